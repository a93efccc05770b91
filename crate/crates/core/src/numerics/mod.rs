//! Dense tensors with reverse-mode differentiation and a finite-difference
//! gradient oracle.

mod graph;
pub mod kernels;
mod params;

pub use graph::{softmax_tensor, BatchStats, BnMode, Gradients, Graph, Var};
pub use params::{ParamId, ParamStore};

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Softmax of a plain tensor along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    softmax_tensor(x, axis)
}

/// Spatial mean of a `[B, C, H, W]` tensor, shaped `[B, C, 1, 1]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let v = g.input(x.clone());
    let out = g.global_avg_pool(v)?;
    Ok(g.value(out).clone())
}

/// The `k` largest entries, in descending order; equal values keep the lower
/// index first.
pub fn topk<T: Scalar>(values: &[T], k: usize) -> Result<(Vec<usize>, Vec<T>)> {
    if k == 0 || k > values.len() {
        return Err(invalid!("top-k with k={k} over {} values", values.len()));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    // stable: ties stay in index order
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order.truncate(k);
    let picked = order.iter().map(|&i| values[i]).collect();
    Ok((order, picked))
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so that gradients
    /// that are zero up to rounding compare in absolute terms.
    pub abs_floor: f64,
    /// Check at most this many evenly spaced entries per parameter.
    pub max_entries_per_param: Option<usize>,
    /// Forwarded to [`Graph::corrupt_backward`] for the analytic pass.
    pub corrupt_op: Option<&'static str>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            abs_floor: 1e-6,
            max_entries_per_param: None,
            corrupt_op: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub tol: f64,
    /// Entry with the largest relative error.
    pub worst: Option<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.worst.as_ref().is_none_or(|w| w.rel_err <= self.tol)
    }

    pub fn worst_rel_err(&self) -> f64 {
        self.worst.as_ref().map_or(0.0, |w| w.rel_err)
    }
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences, perturbing every entry of `params` in place (and
/// restoring it).
pub fn grad_check<F>(
    store: &mut ParamStore<f64>,
    params: &[ParamId],
    mut f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new();
        g.corrupt_backward(opts.corrupt_op);
        let out = f(&mut g, store)?;
        g.check_finite()?;
        let grads = g.backward(out)?;
        let mut scratch = store.clone();
        scratch.zero_grad();
        grads.accumulate_into(&mut scratch);
        params
            .iter()
            .map(|&id| scratch.grad(id).clone())
            .collect::<Vec<_>>()
    };

    let mut eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, store)?;
        g.check_finite()?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(invalid!("grad_check needs a scalar, got {:?}", v.shape()));
        }
        Ok(v.data()[0])
    };

    let mut report = GradCheckReport {
        checked: 0,
        tol: opts.tol,
        worst: None,
    };
    let h = opts.step;
    for (&id, grad) in params.iter().zip(&analytic) {
        if !grad.is_finite() {
            return Err(Error::NonFinite {
                op: "backward",
                node: 0,
            });
        }
        let n = store.value(id).len();
        let stride = match opts.max_entries_per_param {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for j in (0..n).step_by(stride) {
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + h;
            let plus = eval(store);
            store.value_mut(id).data_mut()[j] = orig - h;
            let minus = eval(store);
            store.value_mut(id).data_mut()[j] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            let a = grad.data()[j];
            let rel_err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.abs_floor);
            report.checked += 1;
            if report.worst.as_ref().is_none_or(|w| rel_err > w.rel_err) {
                report.worst = Some(GradCheckEntry {
                    param: store.name(id).to_owned(),
                    index: j,
                    analytic: a,
                    numeric,
                    rel_err,
                });
            }
        }
    }
    Ok(report)
}
