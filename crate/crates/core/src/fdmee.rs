//! Feature decomposition and global multi-expert ensemble.
//!
//! A dynamic per-channel low-pass filter splits a feature map into low and
//! high frequencies; each branch then scores the global expert bank, runs the
//! DConv/PConv interaction and ensembles its top-K experts on the whole map.

use rand::Rng;

use crate::error::{invalid, shape_err, Result};
use crate::experts::{apply_expert, ExpertBank, ExpertScope};
use crate::numerics::{topk, BatchStats, BnMode, Graph, ParamId, ParamStore, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
/// Weight of the current batch in the running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.1;
/// Kernel size of the branch DConvs.
pub const DCONV_KERNEL: usize = 3;

/// Parameters of the filter generator: 1×1 conv `C → C·k²` and batch norm.
#[derive(Clone, Copy, Debug)]
pub struct FilterParams {
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub bn_gamma: ParamId,
    pub bn_beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub k: usize,
}

impl FilterParams {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        k: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if k == 0 || k.is_multiple_of(2) {
            return Err(invalid!("filter size must be odd, got {k}"));
        }
        let taps = channels * k * k;
        Ok(Self {
            conv_w: store.add_uniform(&format!("{prefix}fd.filter.w"), &[taps, channels], channels, rng)?,
            conv_b: store.add(&format!("{prefix}fd.filter.b"), Tensor::zeros(&[taps]))?,
            bn_gamma: store.add(&format!("{prefix}fd.bn.gamma"), Tensor::ones(&[taps]))?,
            bn_beta: store.add(&format!("{prefix}fd.bn.beta"), Tensor::zeros(&[taps]))?,
            running_mean: store.add_buffer(&format!("{prefix}fd.bn.running_mean"), Tensor::zeros(&[taps]))?,
            running_var: store.add_buffer(&format!("{prefix}fd.bn.running_var"), Tensor::ones(&[taps]))?,
            channels,
            k,
        })
    }
}

/// Folds one training batch into the running statistics. A batch with a
/// single value per channel has no variance estimate and leaves the running
/// variance untouched.
pub fn update_running_stats<T: Scalar>(store: &mut ParamStore<T>, params: &FilterParams, stats: &BatchStats<T>) {
    let m = T::of(BN_MOMENTUM);
    let keep = T::one() - m;
    for (r, &b) in store.value_mut(params.running_mean).data_mut().iter_mut().zip(&stats.mean) {
        *r = keep * *r + m * b;
    }
    if let Some(var) = &stats.var {
        for (r, &b) in store.value_mut(params.running_var).data_mut().iter_mut().zip(var) {
            *r = keep * *r + m * b;
        }
    }
}

/// Whether batch norm uses batch or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// `softmax(BN(conv1x1(GAP(F_t))))` over each channel's `k²` taps,
/// shaped `[B, C, k, k]`. In training mode the batch statistics are returned
/// for the caller to fold into the running buffers.
pub fn make_lowpass_filter<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &FilterParams,
    features: Var,
    mode: NormMode,
) -> Result<(Var, Option<BatchStats<T>>)> {
    let (b, c, _, _) = g.value(features).dims4()?;
    if c != params.channels {
        return Err(shape_err!("filter generator for {} channels got {c}", params.channels));
    }
    let k = params.k;
    let pooled = g.global_avg_pool(features)?;
    let w = g.param(store, params.conv_w);
    let bias = g.param(store, params.conv_b);
    let logits = g.pointwise_conv2d(pooled, w, Some(bias))?;
    let gamma = g.param(store, params.bn_gamma);
    let beta = g.param(store, params.bn_beta);
    let bn_mode = match mode {
        NormMode::Train => BnMode::Train,
        NormMode::Eval => BnMode::Eval {
            mean: store.value(params.running_mean).data(),
            var: store.value(params.running_var).data(),
        },
    };
    let (normed, stats) = g.batch_norm(logits, gamma, beta, bn_mode, T::of(NORM_EPS))?;
    let grouped = g.reshape(normed, &[b, c, k * k])?;
    let taps = g.softmax(grouped, 2)?;
    let filter = g.reshape(taps, &[b, c, k, k])?;
    g.check_finite()?;
    Ok((filter, stats))
}

/// Low and high frequency parts of one feature map.
#[derive(Clone, Copy, Debug)]
pub struct FrequencyPair {
    pub low: Var,
    pub high: Var,
}

/// `low = filter ∗ F_t` per channel (zero padding), `high = F_t − low`.
pub fn split_frequencies<T: Scalar>(g: &mut Graph<T>, features: Var, filter: Var) -> Result<FrequencyPair> {
    let low = g.depthwise_conv2d(features, filter)?;
    let high = g.sub(features, low)?;
    Ok(FrequencyPair { low, high })
}

#[derive(Clone, Copy, Debug)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormParams {
    fn init<T: Scalar>(store: &mut ParamStore<T>, base: &str, c: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(&format!("{base}.gamma"), Tensor::ones(&[c]))?,
            beta: store.add(&format!("{base}.beta"), Tensor::zeros(&[c]))?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DconvParams {
    /// `[1, C, 3, 3]`.
    pub w: ParamId,
    pub b: ParamId,
}

impl DconvParams {
    fn init<T: Scalar>(store: &mut ParamStore<T>, base: &str, c: usize, rng: &mut impl Rng) -> Result<Self> {
        let k = DCONV_KERNEL;
        Ok(Self {
            w: store.add_uniform(&format!("{base}.w"), &[1, c, k, k], k * k, rng)?,
            b: store.add(&format!("{base}.b"), Tensor::zeros(&[c]))?,
        })
    }
}

/// One frequency branch: scoring (upper) path, PConv (lower) path and the
/// branch's own expert bank.
#[derive(Clone, Debug)]
pub struct BranchParams {
    pub upper_norm: NormParams,
    pub upper_dconv: DconvParams,
    /// `[N, C]`.
    pub linear_w: ParamId,
    pub linear_b: ParamId,
    pub lower_norm: NormParams,
    pub lower_dconv: DconvParams,
    /// `[C, C]`.
    pub pconv_w: ParamId,
    pub pconv_b: ParamId,
    pub bank: ExpertBank,
}

impl BranchParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        scope: ExpertScope,
        channels: usize,
        n: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let c = channels;
        let base = format!("{prefix}mee.{}", scope.as_str());
        Ok(Self {
            upper_norm: NormParams::init(store, &format!("{base}.upper.ln"), c)?,
            upper_dconv: DconvParams::init(store, &format!("{base}.upper.dconv"), c, rng)?,
            linear_w: store.add_uniform(&format!("{base}.upper.linear.w"), &[n, c], c, rng)?,
            linear_b: store.add(&format!("{base}.upper.linear.b"), Tensor::zeros(&[n]))?,
            lower_norm: NormParams::init(store, &format!("{base}.lower.ln"), c)?,
            lower_dconv: DconvParams::init(store, &format!("{base}.lower.dconv"), c, rng)?,
            pconv_w: store.add_uniform(&format!("{base}.lower.pconv.w"), &[c, c], c, rng)?,
            pconv_b: store.add(&format!("{base}.lower.pconv.b"), Tensor::zeros(&[c]))?,
            bank: ExpertBank::init(store, prefix, scope, n, c, hidden, rng)?,
        })
    }
}

fn norm_dconv<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    norm: &NormParams,
    dconv: &DconvParams,
    x: Var,
) -> Result<Var> {
    let gamma = g.param(store, norm.gamma);
    let beta = g.param(store, norm.beta);
    let y = g.layer_norm_channels(x, gamma, beta, T::of(NORM_EPS))?;
    let w = g.param(store, dconv.w);
    let b = g.param(store, dconv.b);
    let y = g.depthwise_conv2d(y, w)?;
    g.channel_bias(y, b)
}

/// Scores of the global experts for one branch input.
#[derive(Clone, Copy, Debug)]
pub struct GlobalScores {
    /// `[B, N]`, rows on the simplex.
    pub scores: Var,
    /// Upper-branch DConv output `F̃d`, reused by [`interact`].
    pub dconv: Var,
}

/// `softmax(Linear(GAP(DConv(LN(F_l)))))`.
pub fn global_expert_scores<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &BranchParams,
    x: Var,
) -> Result<GlobalScores> {
    let (b, c, _, _) = g.value(x).dims4()?;
    let dconv = norm_dconv(g, store, &params.upper_norm, &params.upper_dconv, x)?;
    let pooled = g.global_avg_pool(dconv)?;
    let pooled = g.reshape(pooled, &[b, c])?;
    let w = g.param(store, params.linear_w);
    let bias = g.param(store, params.linear_b);
    let logits = g.linear(pooled, w, Some(bias))?;
    let scores = g.softmax(logits, 1)?;
    Ok(GlobalScores { scores, dconv })
}

/// Lower path `PConv(DConv(LN(F_l)))`, i.e. `F̃p`.
pub fn lower_branch<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, params: &BranchParams, x: Var) -> Result<Var> {
    let y = norm_dconv(g, store, &params.lower_norm, &params.lower_dconv, x)?;
    let w = g.param(store, params.pconv_w);
    let b = g.param(store, params.pconv_b);
    g.pointwise_conv2d(y, w, Some(b))
}

/// `F̃pd = F̃p ⊙ F̃d + F̃p`.
pub fn interact<T: Scalar>(g: &mut Graph<T>, fp: Var, fd: Var) -> Result<Var> {
    if g.shape(fp) != g.shape(fd) {
        return Err(shape_err!("interact: {:?} with {:?}", g.shape(fp), g.shape(fd)));
    }
    let prod = g.mul(fp, fd)?;
    g.add(prod, fp)
}

/// Per-image top-K choice over the global scores.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalSelection<T> {
    pub k: usize,
    /// `indices[b]`: the K chosen experts of image `b`, best first.
    pub indices: Vec<Vec<usize>>,
    pub weights: Vec<Vec<T>>,
}

impl<T: Scalar> GlobalSelection<T> {
    pub fn from_scores(scores: &Tensor<T>, k: usize) -> Result<Self> {
        if scores.rank() != 2 {
            return Err(shape_err!("global scores must be [B, N], got {:?}", scores.shape()));
        }
        let n = scores.shape()[1];
        let mut indices = Vec::new();
        let mut weights = Vec::new();
        for row in scores.data().chunks(n.max(1)) {
            let (i, w) = topk(row, k)?;
            indices.push(i);
            weights.push(w);
        }
        Ok(Self { k, indices, weights })
    }

    /// Binary `[B, N]` selection mask.
    pub fn mask(&self, n: usize) -> Tensor<T> {
        let mut m = Tensor::zeros(&[self.indices.len(), n]);
        for (b, idx) in self.indices.iter().enumerate() {
            for &j in idx {
                m.data_mut()[b * n + j] = T::one();
            }
        }
        m
    }
}

/// `Σ_k w(j_k) · E_{j_k}(F̃pd)` per image, with raw (unrenormalized) scores.
pub fn ensemble_global<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: Var,
    scores: Var,
    selection: &GlobalSelection<T>,
    bank: &ExpertBank,
) -> Result<Var> {
    let (b, _, _, _) = g.value(x).dims4()?;
    let n = bank.len();
    if g.shape(scores) != [b, n] || selection.indices.len() != b {
        return Err(shape_err!(
            "ensemble_global: map {:?}, scores {:?}, {} experts",
            g.shape(x),
            g.shape(scores),
            n
        ));
    }
    let mut per_image = Vec::with_capacity(b);
    for (bi, chosen) in selection.indices.iter().enumerate() {
        let xb = if b == 1 { x } else { g.slice(x, 0, bi, 1)? };
        let mut acc: Option<Var> = None;
        for &j in chosen {
            let y = apply_expert(g, store, bank, j, xb)?;
            let w = g.gather(scores, &[bi * n + j])?;
            let y = g.mul_leading(y, w)?;
            acc = Some(match acc {
                Some(a) => g.add(a, y)?,
                None => y,
            });
        }
        per_image.push(acc.ok_or_else(|| invalid!("empty global selection"))?);
    }
    if b == 1 {
        Ok(per_image[0])
    } else {
        g.concat(&per_image, 0)
    }
}

/// Output of one frequency branch.
#[derive(Clone, Debug)]
pub struct BranchOutput<T> {
    pub features: Var,
    pub scores: Var,
    pub selection: GlobalSelection<T>,
}

/// Scores, interaction and ensemble of one branch. With `use_mee == false`
/// expert 0 is applied with weight 1 instead of the scored top-K.
pub fn branch_forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &BranchParams,
    x: Var,
    k: usize,
    use_mee: bool,
) -> Result<BranchOutput<T>> {
    let GlobalScores { scores, dconv } = global_expert_scores(g, store, params, x)?;
    let fp = lower_branch(g, store, params, x)?;
    let fpd = interact(g, fp, dconv)?;
    if use_mee {
        let selection = GlobalSelection::from_scores(g.value(scores), k)?;
        let features = ensemble_global(g, store, fpd, scores, &selection, &params.bank)?;
        Ok(BranchOutput {
            features,
            scores,
            selection,
        })
    } else {
        let b = g.shape(x)[0];
        let features = apply_expert(g, store, &params.bank, 0, fpd)?;
        let selection = GlobalSelection {
            k: 1,
            indices: vec![vec![0]; b],
            weights: vec![vec![T::one()]; b],
        };
        Ok(BranchOutput {
            features,
            scores,
            selection,
        })
    }
}
