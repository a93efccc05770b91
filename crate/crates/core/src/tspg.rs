//! Task-specific prompt generation.
//!
//! A small conv head turns the degraded image into a task query `q` on the
//! channel simplex; the per-image prompt is the `q`-weighted combination of
//! the learnable basic prompt bank `P_t` (`[C, C]`), broadcast over the
//! feature map.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Standard deviation of the prompt initialization.
pub const PROMPT_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug)]
pub struct TspgParams {
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    /// Basic prompt bank, `[C, M]` with `M == C`.
    pub prompts: ParamId,
    pub channels: usize,
}

impl TspgParams {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let conv_w = store.add_uniform("tspg.conv.w", &[channels, 3, 3, 3], 27, rng)?;
        let conv_b = store.add("tspg.conv.b", Tensor::zeros(&[channels]))?;
        let prompts = store.add_normal("tspg.P_t", &[channels, channels], PROMPT_INIT_STD, rng)?;
        Ok(Self {
            conv_w,
            conv_b,
            prompts,
            channels,
        })
    }
}

/// `q = softmax(GAP(conv3x3(image)))` over channels, shape `[B, C]`.
pub fn generate_task_query<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &TspgParams,
    image: Var,
) -> Result<Var> {
    let (b, c, _, _) = g.value(image).dims4()?;
    if c != 3 {
        return Err(shape_err!("task query expects an RGB image, got {c} channels"));
    }
    let w = g.param(store, params.conv_w);
    let bias = g.param(store, params.conv_b);
    let f = g.conv2d(image, w, Some(bias))?;
    let pooled = g.global_avg_pool(f)?;
    let logits = g.reshape(pooled, &[b, params.channels])?;
    let q = g.softmax(logits, 1)?;
    g.check_finite()?;
    Ok(q)
}

/// `p̃ = q · P_t`: `[B, C] × [C, M] → [B, M]`.
pub fn compose_prompt<T: Scalar>(g: &mut Graph<T>, q: Var, prompts: Var) -> Result<Var> {
    let (qs, ps) = (g.shape(q), g.shape(prompts));
    if qs.len() != 2 || ps.len() != 2 || qs[1] != ps[0] {
        return Err(shape_err!("compose_prompt: query {:?} with bank {:?}", qs, ps));
    }
    g.matmul(q, prompts)
}

/// Repeats the composed prompt at every position of an `h×w` map.
pub fn broadcast_prompt<T: Scalar>(g: &mut Graph<T>, prompt: Var, h: usize, w: usize) -> Result<Var> {
    g.broadcast_spatial(prompt, h, w)
}

/// Full prompt path for an image batch: `[B, 3, H, W] → [B, C, H, W]`.
pub fn prompt_map<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &TspgParams,
    image: Var,
) -> Result<Var> {
    let (_, _, h, w) = g.value(image).dims4()?;
    let q = generate_task_query(g, store, params, image)?;
    let bank = g.param(store, params.prompts);
    let p = compose_prompt(g, q, bank)?;
    broadcast_prompt(g, p, h, w)
}
