//! Finite-difference gradient suite over every differentiable module.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::experts::{apply_expert, ExpertBank, ExpertScope};
use crate::fdmee::{branch_forward, make_lowpass_filter, split_frequencies, BranchParams, FilterParams, NormMode};
use crate::mese::{mese_forward, MeseParams};
use crate::model::transformer::{transformer_block, TransformerParams};
use crate::model::{Model, ModelConfig};
use crate::numerics::{grad_check, BnMode, GradCheckOptions, GradCheckReport, Graph, ParamStore, Var};
use crate::tensor::Tensor;
use crate::tspg::{prompt_map, TspgParams};

/// Module tolerance; the full model uses [`MODEL_TOL`].
pub const MODULE_TOL: f64 = 1e-4;
/// Looser tolerance for the whole network (top-K decision boundaries).
pub const MODEL_TOL: f64 = 1e-3;
/// Denominator floor for the relative error. Central differences with the
/// default step carry round-off near `1e-10` on these losses, which would
/// otherwise dominate entries whose exact gradient is zero (a key bias, for
/// one, cannot change a softmax over keys).
pub const ABS_FLOOR: f64 = 1e-5;
/// Side of the square inputs used by the suite.
pub const INPUT_SIZE: usize = 6;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub module: &'static str,
    pub report: GradCheckReport,
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    /// Passed to the analytic pass to corrupt one op's backward rule.
    pub corrupt_op: Option<&'static str>,
    /// Entries checked per parameter in module checks.
    pub module_entries: usize,
    /// Entries checked per parameter in the full-model check.
    pub model_entries: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            corrupt_op: None,
            module_entries: 12,
            model_entries: 6,
        }
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Fixed projection so that every output entry reaches the loss with its
/// own weight.
fn project(g: &mut Graph<f64>, out: Var) -> Result<Var> {
    let r = g.input(Tensor::from_fn(g.shape(out), |i| ((i * 7919 + 13) % 97) as f64 / 97.0 - 0.45));
    let m = g.mul(out, r)?;
    Ok(g.sum(m))
}

fn options(tol: f64, entries: usize, corrupt: Option<&'static str>) -> GradCheckOptions {
    GradCheckOptions {
        tol,
        abs_floor: ABS_FLOOR,
        max_entries_per_param: Some(entries),
        corrupt_op: corrupt,
        ..GradCheckOptions::default()
    }
}

fn check_primitives(c: usize, opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let s = INPUT_SIZE;
    let mut store = ParamStore::new();
    let x = store.add("x", random(&[2, c, s, s], rng))?;
    let conv = store.add("conv", random(&[c, c, 3, 3], rng).map(|v| v * 0.3))?;
    let dw = store.add("dw", random(&[1, c, 3, 3], rng))?;
    let pw = store.add("pw", random(&[c, c], rng))?;
    let gamma = store.add("gamma", random(&[c], rng))?;
    let beta = store.add("beta", random(&[c], rng))?;
    let lin = store.add("lin", random(&[3, c], rng))?;
    let ids: Vec<_> = store.ids().collect();
    grad_check(
        &mut store,
        &ids,
        |g, st| {
            let xv = g.param(st, x);
            let (w, d, p) = (g.param(st, conv), g.param(st, dw), g.param(st, pw));
            let (ga, be, l) = (g.param(st, gamma), g.param(st, beta), g.param(st, lin));
            let y = g.conv2d(xv, w, None)?;
            let y = g.layer_norm_channels(y, ga, be, 1e-5)?;
            let y = g.gelu(y);
            let y = g.depthwise_conv2d(y, d)?;
            let (y, _) = g.batch_norm(y, ga, be, BnMode::Train, 1e-5)?;
            let y = g.pointwise_conv2d(y, p, Some(be))?;
            let pooled = g.global_avg_pool(y)?;
            let flat = g.reshape(pooled, &[2, c])?;
            let logits = g.linear(flat, l, None)?;
            let sm = g.softmax(logits, 1)?;
            let tokens = g.reshape(y, &[2, c, s * s])?;
            let tokens = g.permute(tokens, &[0, 2, 1])?;
            let scores = g.bmm(tokens, tokens, true)?;
            let scores = g.scale(scores, 0.05);
            let attn = g.softmax(scores, 2)?;
            let mixed = g.bmm(attn, tokens, false)?;
            let a = project(g, mixed)?;
            let b = project(g, sm)?;
            g.add(a, b)
        },
        opts,
    )
}

fn check_tspg(c: usize, opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let p = TspgParams::init(&mut store, c, rng)?;
    let img = random(&[1, 3, INPUT_SIZE, INPUT_SIZE], rng);
    let ids: Vec<_> = store.ids().collect();
    grad_check(
        &mut store,
        &ids,
        |g, st| {
            let x = g.input(img.clone());
            let m = prompt_map(g, st, &p, x)?;
            project(g, m)
        },
        opts,
    )
}

fn check_experts(cfg: &ModelConfig, opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let c = cfg.channels;
    let mut store = ParamStore::new();
    let bank = ExpertBank::init(&mut store, "", ExpertScope::Pixel, cfg.experts, c, cfg.hidden(), rng)?;
    let x = random(&[1, c, INPUT_SIZE, INPUT_SIZE], rng);
    let ids: Vec<_> = store.ids().collect();
    grad_check(
        &mut store,
        &ids,
        |g, st| {
            let xv = g.input(x.clone());
            let mut acc = None;
            for j in 0..bank.len() {
                let y = apply_expert(g, st, &bank, j, xv)?;
                let y = g.scale(y, (j + 1) as f64);
                acc = Some(match acc {
                    Some(a) => g.add(a, y)?,
                    None => y,
                });
            }
            project(g, acc.expect("non-empty bank"))
        },
        opts,
    )
}

fn check_mese(cfg: &ModelConfig, opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let c = cfg.channels;
    let mut store = ParamStore::new();
    let params = MeseParams::init(&mut store, "", c, cfg.experts, cfg.hidden(), rng)?;
    // Sharper routing keeps the ±h probes away from selection ties.
    let pe = store.value(params.expert_prompts).map(|v| v * 100.0);
    store.set(params.expert_prompts, pe)?;
    let s = INPUT_SIZE;
    let (prompt, feats) = (random(&[1, c, s, s], rng), random(&[1, c, s, s], rng));
    let ids: Vec<_> = store.ids().collect();
    let (k, variant) = (cfg.top_k, cfg.balance_variant);
    grad_check(
        &mut store,
        &ids,
        |g, st| {
            let (p, f) = (g.input(prompt.clone()), g.input(feats.clone()));
            let out = mese_forward(g, st, &params, p, f, k, variant)?;
            let a = project(g, out.features)?;
            let b = g.scale(out.balance, 0.5);
            g.add(a, b)
        },
        opts,
    )
}

fn check_fdmee(cfg: &ModelConfig, opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let c = cfg.channels;
    let mut store = ParamStore::new();
    let fp = FilterParams::init(&mut store, "", c, cfg.filter_size, rng)?;
    let low = BranchParams::init(&mut store, "", ExpertScope::Low, c, cfg.experts, cfg.hidden(), rng)?;
    let high = BranchParams::init(&mut store, "", ExpertScope::High, c, cfg.experts, cfg.hidden(), rng)?;
    for b in [&low, &high] {
        let w = store.value(b.linear_w).map(|v| v * 20.0);
        store.set(b.linear_w, w)?;
    }
    let x = random(&[2, c, INPUT_SIZE, INPUT_SIZE], rng);
    let ids: Vec<_> = store.trainable_ids().collect();
    let k = cfg.top_k;
    grad_check(
        &mut store,
        &ids,
        |g, st| {
            let xv = g.input(x.clone());
            let (f, _) = make_lowpass_filter(g, st, &fp, xv, NormMode::Train)?;
            let pair = split_frequencies(g, xv, f)?;
            let lo = branch_forward(g, st, &low, pair.low, k, true)?;
            let hi = branch_forward(g, st, &high, pair.high, k, true)?;
            let both = g.concat(&[lo.features, hi.features], 1)?;
            project(g, both)
        },
        opts,
    )
}

fn check_transformer(cfg: &ModelConfig, opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let c = cfg.channels;
    let mut store = ParamStore::new();
    let p = TransformerParams::init(&mut store, "tf", c, cfg.heads, rng)?;
    let x = random(&[2, c, INPUT_SIZE, INPUT_SIZE], rng);
    let ids: Vec<_> = store.ids().collect();
    grad_check(
        &mut store,
        &ids,
        |g, st| {
            let v = g.input(x.clone());
            let y = transformer_block(g, st, &p, v)?;
            project(g, y)
        },
        opts,
    )
}

fn check_model(cfg: &ModelConfig, opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let m = Model::<f64>::new(cfg.clone())?;
    let mut store = m.store.clone();
    let s = INPUT_SIZE;
    let x = Tensor::from_fn(&[2, 3, s, s], |_| rng.gen_range(0.0..1.0));
    let target = Tensor::from_fn(&[2, 3, s, s], |_| rng.gen_range(0.0..1.0));
    let ids: Vec<_> = store.trainable_ids().collect();
    grad_check(
        &mut store,
        &ids,
        |g, st| {
            let mut mm = m.clone();
            mm.store = st.clone();
            let xv = g.input(x.clone());
            let out = mm.forward(g, xv, NormMode::Train)?;
            let t = g.input(target.clone());
            let d = g.sub(out.restored, t)?;
            let d = g.mul(d, d)?;
            let l = g.mean(d);
            let b = g.scale(out.balance, 0.1);
            g.add(l, b)
        },
        opts,
    )
}

/// Runs every module check in 64-bit on `cfg`'s dimensions with
/// `INPUT_SIZE×INPUT_SIZE` inputs.
pub fn run_suite(cfg: &ModelConfig, opts: &SuiteOptions) -> Result<Vec<SuiteEntry>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6772_6164);
    let m = options(MODULE_TOL, opts.module_entries, opts.corrupt_op);
    let full = options(MODEL_TOL, opts.model_entries, opts.corrupt_op);
    let mut out = Vec::new();
    let mut push = |module, report| out.push(SuiteEntry { module, report });
    push("numerics", check_primitives(cfg.channels, &m, &mut rng)?);
    push("tspg", check_tspg(cfg.channels, &m, &mut rng)?);
    push("experts", check_experts(cfg, &m, &mut rng)?);
    push("mese", check_mese(cfg, &m, &mut rng)?);
    push("fdmee", check_fdmee(cfg, &m, &mut rng)?);
    push("transformer", check_transformer(cfg, &m, &mut rng)?);
    push("model", check_model(cfg, &full, &mut rng)?);
    Ok(out)
}
