//! Banks of independent two-layer MLP experts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape_err, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Var};
use crate::scalar::Scalar;

/// Where a bank is used; part of its checkpoint names.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExpertScope {
    Pixel,
    Low,
    High,
}

impl ExpertScope {
    pub fn as_str(self) -> &'static str {
        match self {
            ExpertScope::Pixel => "pixel",
            ExpertScope::Low => "low",
            ExpertScope::High => "high",
        }
    }
}

/// Parameters of one expert: `C → hidden → C` with GELU in between.
#[derive(Clone, Copy, Debug)]
pub struct ExpertParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct ExpertBank {
    pub scope: ExpertScope,
    pub channels: usize,
    pub hidden: usize,
    pub experts: Vec<ExpertParams>,
}

impl ExpertBank {
    /// Registers `n` experts under `{prefix}experts.{scope}.{j}.*`.
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        scope: ExpertScope,
        n: usize,
        channels: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if n == 0 || hidden == 0 || channels == 0 {
            return Err(invalid!(
                "expert bank needs n, channels and hidden ≥ 1 (got {n}, {channels}, {hidden})"
            ));
        }
        let mut experts = Vec::with_capacity(n);
        for j in 0..n {
            let base = format!("{prefix}experts.{}.{j}", scope.as_str());
            let w1 = store.add_uniform(&format!("{base}.w1"), &[hidden, channels], channels, rng)?;
            let b1 = store.add(&format!("{base}.b1"), crate::Tensor::zeros(&[hidden]))?;
            let w2 = store.add_uniform(&format!("{base}.w2"), &[channels, hidden], hidden, rng)?;
            let b2 = store.add(&format!("{base}.b2"), crate::Tensor::zeros(&[channels]))?;
            experts.push(ExpertParams { w1, b1, w2, b2 });
        }
        Ok(Self {
            scope,
            channels,
            hidden,
            experts,
        })
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.len() * (2 * self.channels * self.hidden + self.hidden + self.channels)
    }
}

/// Stand-alone bank in its own store, initialized from `seed`.
pub fn make_bank<T: Scalar>(
    n: usize,
    channels: usize,
    hidden: usize,
    seed: u64,
) -> Result<(ParamStore<T>, ExpertBank)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bank = ExpertBank::init(
        &mut store,
        "",
        ExpertScope::Pixel,
        n,
        channels,
        hidden,
        &mut rng,
    )?;
    Ok((store, bank))
}

/// Applies expert `j` along the channel axis: to rows `[P, C]` or to every
/// pixel of a `[B, C, H, W]` map.
pub fn apply_expert<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    bank: &ExpertBank,
    j: usize,
    x: Var,
) -> Result<Var> {
    let p = *bank
        .experts
        .get(j)
        .ok_or_else(|| invalid!("expert {j} out of range for a bank of {}", bank.len()))?;
    let (w1, b1, w2, b2) = (
        g.param(store, p.w1),
        g.param(store, p.b1),
        g.param(store, p.w2),
        g.param(store, p.b2),
    );
    match g.shape(x).len() {
        2 => {
            let h = g.linear(x, w1, Some(b1))?;
            let h = g.gelu(h);
            g.linear(h, w2, Some(b2))
        }
        4 => {
            let h = g.pointwise_conv2d(x, w1, Some(b1))?;
            let h = g.gelu(h);
            g.pointwise_conv2d(h, w2, Some(b2))
        }
        _ => Err(shape_err!("expert input must be [P, C] or [B, C, H, W], got {:?}", g.shape(x))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, GradCheckOptions};
    use crate::Tensor;

    #[test]
    fn same_seed_same_bank() {
        let (a, _) = make_bank::<f64>(3, 4, 8, 11).unwrap();
        let (b, _) = make_bank::<f64>(3, 4, 8, 11).unwrap();
        let (c, _) = make_bank::<f64>(3, 4, 8, 12).unwrap();
        let mut max_diff: f64 = 0.0;
        for id in a.ids() {
            assert_eq!(a.value(id), b.value(id));
            max_diff = max_diff.max(a.value(id).max_abs_diff(c.value(id)));
        }
        assert!(max_diff > 0.0);
    }

    #[test]
    fn experts_differ_pairwise() {
        let (store, bank) = make_bank::<f64>(4, 3, 6, 1).unwrap();
        for i in 0..4 {
            for j in i + 1..4 {
                let (a, b) = (bank.experts[i].w1, bank.experts[j].w1);
                assert!(store.value(a).max_abs_diff(store.value(b)) > 0.0);
            }
        }
    }

    #[test]
    fn parameter_count_formula() {
        let (n, c, hidden) = (5, 6, 12);
        let (store, bank) = make_bank::<f32>(n, c, hidden, 0).unwrap();
        let expected = n * (c * hidden + hidden + hidden * c + c);
        assert_eq!(store.num_trainable(), expected);
        assert_eq!(bank.param_count(), expected);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let (mut store, bank) = make_bank::<f64>(2, 3, 6, 0).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            let z = Tensor::zeros(store.value(id).shape());
            store.set(id, z).unwrap();
        }
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(&[1, 3, 2, 2], |i| i as f64 - 5.0));
        let y = apply_expert(&mut g, &store, &bank, 1, x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_configuration_preserves_input() {
        // w1 = [I; -I], w2 = [I, -I] with a large positive input shift keeps
        // GELU in its near-linear region: gelu(a) - gelu(-a) = a exactly.
        let c = 3;
        let (mut store, bank) = make_bank::<f64>(1, c, 2 * c, 0).unwrap();
        let e = bank.experts[0];
        let w1 = Tensor::from_fn(&[2 * c, c], |i| {
            let (r, col) = (i / c, i % c);
            if r == col {
                1.0
            } else if r == col + c {
                -1.0
            } else {
                0.0
            }
        });
        let w2 = Tensor::from_fn(&[c, 2 * c], |i| {
            let (r, col) = (i / (2 * c), i % (2 * c));
            if col == r {
                1.0
            } else if col == r + c {
                -1.0
            } else {
                0.0
            }
        });
        store.set(e.w1, w1).unwrap();
        store.set(e.w2, w2).unwrap();
        let x = Tensor::from_f64(&[2, c], &[0.3, -1.2, 2.0, 0.0, 5.0, -0.7]).unwrap();
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = apply_expert(&mut g, &store, &bank, 0, xv).unwrap();
        assert!(g.value(y).max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn matches_two_matmul_oracle() {
        let (c, hidden) = (4, 8);
        let (store, bank) = make_bank::<f64>(2, c, hidden, 3).unwrap();
        let x = Tensor::<f64>::from_f64(&[1, c, 1, 1], &[0.5, -0.25, 1.0, 0.1]).unwrap();
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = apply_expert(&mut g, &store, &bank, 1, xv).unwrap();

        let e = bank.experts[1];
        let (w1, b1, w2, b2) = (
            store.value(e.w1).data(),
            store.value(e.b1).data(),
            store.value(e.w2).data(),
            store.value(e.b2).data(),
        );
        let gelu = |v: f64| {
            0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh())
        };
        let h: Vec<f64> = (0..hidden)
            .map(|r| gelu((0..c).map(|k| w1[r * c + k] * x.data()[k]).sum::<f64>() + b1[r]))
            .collect();
        for o in 0..c {
            let expect = (0..hidden).map(|k| w2[o * hidden + k] * h[k]).sum::<f64>() + b2[o];
            assert!((g.value(y).data()[o] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn position_wise_application_commutes_with_permutation() {
        let (store, bank) = make_bank::<f64>(1, 2, 4, 9).unwrap();
        let x = Tensor::<f64>::from_fn(&[1, 2, 1, 4], |i| (i as f64 * 0.37).sin());
        let perm = [2usize, 0, 3, 1];
        let permuted = Tensor::from_fn(&[1, 2, 1, 4], |i| {
            let (c, p) = (i / 4, i % 4);
            x.data()[c * 4 + perm[p]]
        });
        let run = |t: &Tensor<f64>| {
            let mut g = Graph::new();
            let v = g.input(t.clone());
            let y = apply_expert(&mut g, &store, &bank, 0, v).unwrap();
            g.value(y).clone()
        };
        let (y, yp) = (run(&x), run(&permuted));
        for c in 0..2 {
            for p in 0..4 {
                assert_eq!(yp.data()[c * 4 + p], y.data()[c * 4 + perm[p]]);
            }
        }
    }

    #[test]
    fn expert_index_out_of_range() {
        let (store, bank) = make_bank::<f64>(2, 2, 4, 0).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[3, 2]));
        assert!(apply_expert(&mut g, &store, &bank, 2, x).is_err());
    }

    #[test]
    fn grad_through_weighted_pair_of_experts() {
        let (mut store, bank) = make_bank::<f64>(2, 3, 6, 21).unwrap();
        let mix = store
            .add("mix", Tensor::from_f64(&[2], &[0.7, 0.2]).unwrap())
            .unwrap();
        let x = Tensor::<f64>::from_fn(&[1, 3, 2, 2], |i| (i as f64 * 0.61).cos());
        let ids: Vec<_> = store.ids().collect();
        let report = grad_check(
            &mut store,
            &ids,
            |g, st| {
                let xv = g.input(x.clone());
                let m = g.param(st, mix);
                let a = apply_expert(g, st, &bank, 0, xv)?;
                let b = apply_expert(g, st, &bank, 1, xv)?;
                let wa = g.gather(m, &[0])?;
                let wb = g.gather(m, &[1])?;
                let a = g.mul_leading(a, wa)?;
                let b = g.mul_leading(b, wb)?;
                let s = g.add(a, b)?;
                let s = g.mul(s, s)?;
                Ok(g.sum(s))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.worst);
    }
}
