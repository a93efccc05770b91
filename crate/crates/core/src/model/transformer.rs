//! Pre-LN transformer block over the `H·W` spatial tokens of a feature map.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::fdmee::NORM_EPS;
use crate::numerics::{Graph, ParamId, ParamStore, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct TransformerParams {
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    /// `[3C, C]`, rows ordered q, k, v.
    pub qkv_w: ParamId,
    pub qkv_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
    pub channels: usize,
    pub heads: usize,
}

/// Width of the MLP inside the block, as a multiple of `C`.
pub const MLP_RATIO: usize = 2;

impl TransformerParams {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        base: &str,
        channels: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let c = channels;
        if heads == 0 || !c.is_multiple_of(heads) {
            return Err(invalid!("{c} channels cannot be split into {heads} heads"));
        }
        let hidden = MLP_RATIO * c;
        let name = |s: &str| format!("{base}.{s}");
        Ok(Self {
            ln1_gamma: store.add(&name("ln1.gamma"), Tensor::ones(&[c]))?,
            ln1_beta: store.add(&name("ln1.beta"), Tensor::zeros(&[c]))?,
            qkv_w: store.add_uniform(&name("attn.qkv.w"), &[3 * c, c], c, rng)?,
            qkv_b: store.add(&name("attn.qkv.b"), Tensor::zeros(&[3 * c]))?,
            out_w: store.add_uniform(&name("attn.out.w"), &[c, c], c, rng)?,
            out_b: store.add(&name("attn.out.b"), Tensor::zeros(&[c]))?,
            ln2_gamma: store.add(&name("ln2.gamma"), Tensor::ones(&[c]))?,
            ln2_beta: store.add(&name("ln2.beta"), Tensor::zeros(&[c]))?,
            fc1_w: store.add_uniform(&name("mlp.fc1.w"), &[hidden, c], c, rng)?,
            fc1_b: store.add(&name("mlp.fc1.b"), Tensor::zeros(&[hidden]))?,
            fc2_w: store.add_uniform(&name("mlp.fc2.w"), &[c, hidden], hidden, rng)?,
            fc2_b: store.add(&name("mlp.fc2.b"), Tensor::zeros(&[c]))?,
            channels,
            heads,
        })
    }

    pub fn param_count(channels: usize) -> usize {
        let (c, h) = (channels, MLP_RATIO * channels);
        4 * c + 3 * c * c + 3 * c + c * c + c + h * c + h + c * h + c
    }
}

fn layer_norm<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, gamma: ParamId, beta: ParamId, x: Var) -> Result<Var> {
    let (gm, bt) = (g.param(store, gamma), g.param(store, beta));
    g.layer_norm_channels(x, gm, bt, T::of(NORM_EPS))
}

/// Multi-head scaled dot-product self-attention; `x` is already normalized.
pub fn self_attention<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, p: &TransformerParams, x: Var) -> Result<Var> {
    let (b, c, h, w) = g.value(x).dims4()?;
    let tokens = h * w;
    if tokens == 0 {
        return Err(invalid!("attention over an empty {h}×{w} map"));
    }
    let heads = p.heads;
    let d = c / heads;
    let gb = b * heads;
    let (qw, qb) = (g.param(store, p.qkv_w), g.param(store, p.qkv_b));
    let qkv = g.pointwise_conv2d(x, qw, Some(qb))?;
    let qkv = g.reshape(qkv, &[b, 3, heads, d, tokens])?;
    let qkv = g.permute(qkv, &[1, 0, 2, 4, 3])?;
    let qkv = g.reshape(qkv, &[3, gb, tokens, d])?;
    let mut parts = Vec::with_capacity(3);
    for i in 0..3 {
        let t = g.slice(qkv, 0, i, 1)?;
        parts.push(g.reshape(t, &[gb, tokens, d])?);
    }
    let q = g.scale(parts[0], T::one() / T::of(d as f64).sqrt());
    let scores = g.bmm(q, parts[1], true)?;
    let attn = g.softmax(scores, 2)?;
    let o = g.bmm(attn, parts[2], false)?;
    let o = g.reshape(o, &[b, heads, tokens, d])?;
    let o = g.permute(o, &[0, 1, 3, 2])?;
    let o = g.reshape(o, &[b, c, h, w])?;
    let (ow, ob) = (g.param(store, p.out_w), g.param(store, p.out_b));
    g.pointwise_conv2d(o, ow, Some(ob))
}

/// `x + MHSA(LN(x))`, then `+ MLP(LN(·))`.
pub fn transformer_block<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, p: &TransformerParams, x: Var) -> Result<Var> {
    let n1 = layer_norm(g, store, p.ln1_gamma, p.ln1_beta, x)?;
    let a = self_attention(g, store, p, n1)?;
    let x = g.add(x, a)?;
    let n2 = layer_norm(g, store, p.ln2_gamma, p.ln2_beta, x)?;
    let (w1, b1) = (g.param(store, p.fc1_w), g.param(store, p.fc1_b));
    let hdn = g.pointwise_conv2d(n2, w1, Some(b1))?;
    let hdn = g.gelu(hdn);
    let (w2, b2) = (g.param(store, p.fc2_w), g.param(store, p.fc2_b));
    let m = g.pointwise_conv2d(hdn, w2, Some(b2))?;
    g.add(x, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(c: usize, heads: usize, seed: u64) -> (ParamStore<f64>, TransformerParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = TransformerParams::init(&mut store, "tf", c, heads, &mut rng).unwrap();
        (store, p)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn run(store: &ParamStore<f64>, p: &TransformerParams, x: &Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let y = transformer_block(&mut g, store, p, v).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn zero_output_projections_give_identity() {
        let (mut store, p) = setup(4, 2, 0);
        store.set(p.out_w, Tensor::zeros(&[4, 4])).unwrap();
        store.set(p.fc2_w, Tensor::zeros(&[4, 8])).unwrap();
        let x = random(&[2, 4, 3, 2], 1);
        assert_eq!(run(&store, &p, &x), x);
    }

    #[test]
    fn heads_must_divide_channels() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(TransformerParams::init(&mut store, "tf", 6, 4, &mut rng).is_err());
        assert!(TransformerParams::init(&mut store, "tf2", 6, 0, &mut rng).is_err());
    }

    #[test]
    fn parameter_count() {
        let (store, _) = setup(8, 2, 0);
        assert_eq!(store.num_trainable(), TransformerParams::param_count(8));
        assert_eq!(TransformerParams::param_count(8), 8 * 64 + 11 * 8);
    }

    #[test]
    fn equivariant_to_token_permutation() {
        let (store, p) = setup(4, 2, 2);
        let x = random(&[1, 4, 2, 3], 3);
        let perm = [4usize, 2, 0, 5, 1, 3];
        let permute = |t: &Tensor<f64>| Tensor::from_fn(t.shape(), |i| t.data()[i / 6 * 6 + perm[i % 6]]);
        let a = permute(&run(&store, &p, &x));
        let b = run(&store, &p, &permute(&x));
        assert!(a.max_abs_diff(&b) < 1e-13);
    }

    #[test]
    fn attention_matches_dense_oracle() {
        let (c, heads) = (4, 2);
        let (mut store, p) = setup(c, heads, 4);
        store.set(p.qkv_b, random(&[3 * c], 5)).unwrap();
        store.set(p.out_b, random(&[c], 6)).unwrap();
        let x = random(&[1, c, 2, 2], 7);
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let y = self_attention(&mut g, &store, &p, v).unwrap();
        let got = g.value(y).clone();

        let (qw, qb) = (store.value(p.qkv_w), store.value(p.qkv_b).data());
        let (ow, ob) = (store.value(p.out_w), store.value(p.out_b).data());
        let tok = |t: usize| -> Vec<f64> { (0..c).map(|ci| x.data()[ci * 4 + t]).collect() };
        let proj = |row: usize, t: usize| -> f64 {
            let f = tok(t);
            (0..c).map(|ci| qw.at(&[row, ci]) * f[ci]).sum::<f64>() + qb[row]
        };
        let d = c / heads;
        let mut mixed = vec![vec![0.0; c]; 4];
        for hd in 0..heads {
            for t in 0..4 {
                let logits: Vec<f64> = (0..4)
                    .map(|s| {
                        (0..d)
                            .map(|i| proj(hd * d + i, t) * proj(c + hd * d + i, s))
                            .sum::<f64>()
                            / (d as f64).sqrt()
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for i in 0..d {
                    mixed[t][hd * d + i] = (0..4)
                        .map(|s| (logits[s] - m).exp() / z * proj(2 * c + hd * d + i, s))
                        .sum();
                }
            }
        }
        for t in 0..4 {
            for o in 0..c {
                let expect = (0..c).map(|ci| ow.at(&[o, ci]) * mixed[t][ci]).sum::<f64>() + ob[o];
                assert!((got.data()[o * 4 + t] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn block_grad_check() {
        let (mut store, p) = setup(4, 2, 8);
        let x = random(&[2, 4, 2, 2], 9);
        let proj = random(&[2, 4, 2, 2], 10);
        let ids: Vec<_> = store.ids().collect();
        let report = grad_check(
            &mut store,
            &ids,
            |g, st| {
                let v = g.input(x.clone());
                let y = transformer_block(g, st, &p, v)?;
                let r = g.input(proj.clone());
                let m = g.mul(y, r)?;
                Ok(g.sum(m))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.worst);
    }
}
