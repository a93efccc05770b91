//! Pixel-level multi-expert selection and ensemble.
//!
//! Prompt and content features are concatenated, projected onto the expert
//! prompts to get a per-pixel demand distribution `W` over `N` experts, and
//! every pixel is processed by its top-`K` experts weighted by the raw
//! (not renormalized) demand values. The balance loss penalizes dispersion
//! of the soft importance sums `S` and the hard selection counts `S̃`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::experts::{apply_expert, ExpertBank, ExpertScope};
use crate::numerics::{topk, Graph, ParamId, ParamStore, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tspg::PROMPT_INIT_STD;

/// Denominator guard in the balance loss.
pub const BALANCE_EPS: f64 = 1e-10;

/// Which dispersion measure the balance loss uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BalanceVariant {
    /// `σ / (μ² + ε)` per term.
    #[default]
    Std,
    /// Squared coefficient of variation `σ² / (μ² + ε)`.
    Cv2,
}

#[derive(Clone, Debug)]
pub struct MeseParams {
    /// Expert prompts `p_e`, `[2C, N]`.
    pub expert_prompts: ParamId,
    pub bank: ExpertBank,
}

impl MeseParams {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        experts: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let expert_prompts = store.add_normal(
            &format!("{prefix}mese.p_e"),
            &[2 * channels, experts],
            PROMPT_INIT_STD,
            rng,
        )?;
        let bank = ExpertBank::init(store, prefix, ExpertScope::Pixel, experts, channels, hidden, rng)?;
        Ok(Self {
            expert_prompts,
            bank,
        })
    }
}

/// `[P̃, F]` along channels, prompt channels first.
pub fn fuse_task_content<T: Scalar>(g: &mut Graph<T>, prompt: Var, features: Var) -> Result<Var> {
    let (ps, fs) = (g.value(prompt).dims4()?, g.value(features).dims4()?);
    if ps != fs {
        return Err(shape_err!(
            "fuse_task_content: prompt {:?} vs features {:?}",
            g.shape(prompt),
            g.shape(features)
        ));
    }
    g.concat(&[prompt, features], 1)
}

/// Per-pixel demand `W = softmax(F_c · p_e)` over experts, `[B, N, H, W]`.
pub fn route_pixels<T: Scalar>(g: &mut Graph<T>, fused: Var, expert_prompts: Var) -> Result<Var> {
    let (_, c2, _, _) = g.value(fused).dims4()?;
    let ps = g.shape(expert_prompts);
    if ps.len() != 2 || ps[0] != c2 {
        return Err(shape_err!(
            "route_pixels: fused width {c2} with expert prompts {:?}",
            ps
        ));
    }
    let projection = g.permute(expert_prompts, &[1, 0])?;
    let logits = g.pointwise_conv2d(fused, projection, None)?;
    g.softmax(logits, 1)
}

/// Hard top-`K` choice at every pixel of a demand map.
#[derive(Clone, Debug)]
pub struct PixelSelection<T> {
    pub k: usize,
    /// `[B, N, H, W]` of the demand map this was taken from.
    pub dims: [usize; 4],
    /// For pixel `b*H*W + y*W + x`, entries `[pixel*K .. pixel*K + K]` are the
    /// selected experts in descending demand.
    pub indices: Vec<usize>,
    /// Raw demand values of the selected experts, aligned with `indices`.
    pub weights: Vec<T>,
    /// Binary selection mask `W̃`, `[B, N, H, W]`.
    pub mask: Tensor<T>,
}

impl<T: Scalar> PixelSelection<T> {
    pub fn selected(&self, pixel: usize) -> &[usize] {
        &self.indices[pixel * self.k..(pixel + 1) * self.k]
    }

    pub fn pixels(&self) -> usize {
        self.dims[0] * self.dims[2] * self.dims[3]
    }
}

/// Chooses the `k` highest-demand experts per pixel (ties to the lower index).
pub fn select_topk_pixels<T: Scalar>(w: &Tensor<T>, k: usize) -> Result<PixelSelection<T>> {
    let (b, n, h, wd) = w.dims4()?;
    if k == 0 || k > n {
        return Err(invalid!("top-K with K={k} over {n} experts"));
    }
    let hw = h * wd;
    let mut indices = Vec::with_capacity(b * hw * k);
    let mut weights = Vec::with_capacity(b * hw * k);
    let mut mask = Tensor::zeros(w.shape());
    let mut column = vec![T::zero(); n];
    for bi in 0..b {
        for p in 0..hw {
            for (j, slot) in column.iter_mut().enumerate() {
                *slot = w.data()[(bi * n + j) * hw + p];
            }
            let (idx, vals) = topk(&column, k)?;
            for &j in &idx {
                mask.data_mut()[(bi * n + j) * hw + p] = T::one();
            }
            indices.extend(idx);
            weights.extend(vals);
        }
    }
    Ok(PixelSelection {
        k,
        dims: [b, n, h, wd],
        indices,
        weights,
        mask,
    })
}

/// `out[xy] = Σ_k W[j_k, xy] · E_{j_k}(f[xy])`. Each expert only sees the
/// pixels that selected it.
pub fn apply_pixel_experts<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    features: Var,
    demand: Var,
    selection: &PixelSelection<T>,
    bank: &ExpertBank,
) -> Result<Var> {
    let (b, c, h, w) = g.value(features).dims4()?;
    let [sb, n, sh, sw] = selection.dims;
    if (sb, sh, sw) != (b, h, w) || g.shape(demand) != selection.dims || n != bank.len() {
        return Err(shape_err!(
            "apply_pixel_experts: features {:?}, demand {:?}, selection {:?}, {} experts",
            g.shape(features),
            g.shape(demand),
            selection.dims,
            bank.len()
        ));
    }
    let hw = h * w;
    let mut routed: Vec<Vec<usize>> = vec![Vec::new(); n];
    for pixel in 0..b * hw {
        for &j in selection.selected(pixel) {
            routed[j].push(pixel);
        }
    }
    let mut out: Option<Var> = None;
    for (j, pixels) in routed.iter().enumerate() {
        if pixels.is_empty() {
            continue;
        }
        let rows = g.gather_rows(features, pixels)?;
        let y = apply_expert(g, store, bank, j, rows)?;
        let widx: Vec<usize> = pixels
            .iter()
            .map(|&px| (px / hw * n + j) * hw + px % hw)
            .collect();
        let wj = g.gather(demand, &widx)?;
        let y = g.mul_leading(y, wj)?;
        let placed = g.scatter_rows(y, pixels, [b, c, h, w])?;
        out = Some(match out {
            Some(acc) => g.add(acc, placed)?,
            None => placed,
        });
    }
    out.ok_or_else(|| invalid!("no pixel selected any expert"))
}

/// `S[b, n] = Σ_xy W[b, n, x, y]`.
pub fn expert_importance<T: Scalar>(w: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, n, h, wd) = w.dims4()?;
    let data = w
        .data()
        .chunks((h * wd).max(1))
        .map(|p| p.iter().copied().sum())
        .collect();
    Tensor::new(&[b, n], data)
}

/// `S̃[b, n] = Σ_xy W̃[b, n, x, y]`, i.e. how many pixels selected expert `n`.
pub fn expert_counts<T: Scalar>(mask: &Tensor<T>) -> Result<Tensor<T>> {
    expert_importance(mask)
}

/// Differentiable importance sums `[B, N]` from a demand map on the graph.
pub fn importance_var<T: Scalar>(g: &mut Graph<T>, demand: Var) -> Result<Var> {
    let (b, n, h, w) = g.value(demand).dims4()?;
    let pooled = g.global_avg_pool(demand)?;
    let sums = g.scale(pooled, T::of((h * w) as f64));
    g.reshape(sums, &[b, n])
}

fn dispersion<T: Scalar>(values: &[T], eps: T, variant: BalanceVariant) -> T {
    let n = T::of(values.len() as f64);
    let mu = values.iter().copied().sum::<T>() / n;
    let var = values.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
    let spread = match variant {
        BalanceVariant::Std => var.sqrt(),
        BalanceVariant::Cv2 => var,
    };
    spread / (mu * mu + eps)
}

/// Balance loss of one image from plain vectors (population std).
pub fn balance_loss<T: Scalar>(importance: &[T], counts: &[T], eps: T, variant: BalanceVariant) -> T {
    dispersion(importance, eps, variant) + dispersion(counts, eps, variant)
}

/// Batch mean of the per-image balance loss. Gradient flows through the
/// importance sums only; the counts enter as constants.
pub fn balance_loss_var<T: Scalar>(
    g: &mut Graph<T>,
    importance: Var,
    counts: &Tensor<T>,
    eps: T,
    variant: BalanceVariant,
) -> Result<Var> {
    let s = g.shape(importance).to_vec();
    if s.len() != 2 || counts.shape() != s.as_slice() {
        return Err(shape_err!(
            "balance loss: importance {:?} with counts {:?}",
            s,
            counts.shape()
        ));
    }
    let (b, n) = (s[0], s[1]);
    let mut total: Option<Var> = None;
    for bi in 0..b {
        let row = g.slice(importance, 0, bi, 1)?;
        let sigma = g.std(row);
        let mu = g.mean(row);
        let mu2 = g.mul(mu, mu)?;
        let denom = g.add_scalar(mu2, eps);
        let spread = match variant {
            BalanceVariant::Std => sigma,
            BalanceVariant::Cv2 => g.mul(sigma, sigma)?,
        };
        let term = g.div(spread, denom)?;
        let hard = dispersion(&counts.data()[bi * n..(bi + 1) * n], eps, variant);
        let term = g.add_scalar(term, hard);
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    let total = total.ok_or_else(|| invalid!("balance loss over an empty batch"))?;
    Ok(g.scale(total, T::one() / T::of(b as f64)))
}

/// Demand map, selection and usage statistics of one forward pass.
#[derive(Clone, Debug)]
pub struct RoutingMap<T> {
    /// Soft demand `W`, `[B, N, H, W]`.
    pub weights: Tensor<T>,
    pub selection: PixelSelection<T>,
    /// `S`, `[B, N]`.
    pub importance: Tensor<T>,
    /// `S̃`, `[B, N]`.
    pub counts: Tensor<T>,
}

impl<T: Scalar> RoutingMap<T> {
    pub fn from_demand(w: Tensor<T>, k: usize) -> Result<Self> {
        let selection = select_topk_pixels(&w, k)?;
        let importance = expert_importance(&w)?;
        let counts = expert_counts(&selection.mask)?;
        Ok(Self {
            weights: w,
            selection,
            importance,
            counts,
        })
    }

    /// Largest violation of the routing invariants: demand rows on the
    /// simplex, exactly `K` selections per pixel, `Σ S = H·W`,
    /// `Σ S̃ = K·H·W`. Returns `(simplex_dev, importance_dev)`; the integer
    /// invariants are returned as an error when broken.
    pub fn check_invariants(&self) -> Result<(f64, f64)> {
        let (b, n, h, w) = self.weights.dims4()?;
        let hw = h * w;
        let k = self.selection.k;
        let mut simplex_dev: f64 = 0.0;
        for bi in 0..b {
            for p in 0..hw {
                let (mut sum, mut chosen) = (0.0, 0.0);
                for j in 0..n {
                    let at = (bi * n + j) * hw + p;
                    sum += self.weights.data()[at].as_f64();
                    let m = self.selection.mask.data()[at].as_f64();
                    if m != 0.0 && m != 1.0 {
                        return Err(invalid!("mask entry {m} is not binary"));
                    }
                    chosen += m;
                }
                simplex_dev = simplex_dev.max((sum - 1.0).abs());
                if chosen != k as f64 {
                    return Err(invalid!("pixel {p} of image {bi} selected {chosen} experts, expected {k}"));
                }
            }
        }
        let mut importance_dev: f64 = 0.0;
        for bi in 0..b {
            let s: f64 = (0..n).map(|j| self.importance.data()[bi * n + j].as_f64()).sum();
            importance_dev = importance_dev.max((s - hw as f64).abs());
            let st: f64 = (0..n).map(|j| self.counts.data()[bi * n + j].as_f64()).sum();
            if st != (k * hw) as f64 {
                return Err(invalid!("selection counts sum to {st}, expected {}", k * hw));
            }
        }
        Ok((simplex_dev, importance_dev))
    }
}

/// Output of the pixel-level block.
pub struct MeseOutput<T> {
    pub features: Var,
    pub demand: Var,
    pub balance: Var,
    pub routing: RoutingMap<T>,
}

/// Routes and ensembles one feature map. `prompt` is the broadcast task
/// prompt (zeros when prompts are disabled).
#[allow(clippy::too_many_arguments)]
pub fn mese_forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &MeseParams,
    prompt: Var,
    features: Var,
    k: usize,
    variant: BalanceVariant,
) -> Result<MeseOutput<T>> {
    let fused = fuse_task_content(g, prompt, features)?;
    let pe = g.param(store, params.expert_prompts);
    let demand = route_pixels(g, fused, pe)?;
    let routing = RoutingMap::from_demand(g.value(demand).clone(), k)?;
    let out = apply_pixel_experts(g, store, features, demand, &routing.selection, &params.bank)?;
    let importance = importance_var(g, demand)?;
    let balance = balance_loss_var(g, importance, &routing.counts, T::of(BALANCE_EPS), variant)?;
    Ok(MeseOutput {
        features: out,
        demand,
        balance,
        routing,
    })
}
