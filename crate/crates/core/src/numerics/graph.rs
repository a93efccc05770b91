use std::collections::HashMap;

use crate::error::{invalid, shape_err, Error, Result};
use crate::numerics::kernels;
use crate::numerics::params::{ParamId, ParamStore};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm behaviour for one call.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with stored running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Per-channel statistics of one training-mode batch-norm call, for the
/// caller to fold into its running buffers.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance; `None` when each channel saw a single value.
    pub var: Option<Vec<T>>,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Abs(Var),
    Gelu(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Std(Var),
    ChannelBias(Var, Var),
    MulLeading(Var, Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, k: usize },
    Depthwise { x: Var, w: Var, k: usize },
    Pointwise { x: Var, w: Var, b: Option<Var> },
    Linear { x: Var, w: Var, b: Option<Var> },
    Bmm { a: Var, b: Var, tb: bool },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Gap(Var),
    Broadcast(Var),
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterRows { x: Var, idx: Vec<usize> },
    Gather { x: Var, idx: Vec<usize> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Abs(..) => "abs",
            Op::Gelu(..) => "gelu",
            Op::Relu(..) => "relu",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Std(..) => "std",
            Op::ChannelBias(..) => "channel_bias",
            Op::MulLeading(..) => "mul_leading",
            Op::Conv2d { .. } => "conv2d",
            Op::Depthwise { .. } => "depthwise_conv2d",
            Op::Pointwise { .. } => "pointwise_conv2d",
            Op::Linear { .. } => "linear",
            Op::Bmm { .. } => "matmul",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Gap(..) => "global_avg_pool",
            Op::Broadcast(..) => "broadcast_spatial",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterRows { .. } => "scatter_rows",
            Op::Gather { .. } => "gather",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of eagerly evaluated operations supporting one reverse sweep.
///
/// Nodes are appended in evaluation order, which is a topological order, so
/// backward simply walks the tape from the loss towards the front.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    nonfinite: Option<(usize, &'static str)>,
    corrupt: Option<&'static str>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.044_715;
// sqrt(2/pi)
const GELU_S: f64 = 0.797_884_560_802_865_4;

/// `½(1 + tanh u) = σ(2u)`; one `exp` instead of `tanh`.
fn gelu_gate<T: Scalar>(x: T) -> T {
    let u = T::of(GELU_S) * (x + T::of(GELU_C) * x * x * x);
    T::one() / (T::one() + (T::of(-2.0) * u).exp())
}

fn gelu<T: Scalar>(x: T) -> T {
    x * gelu_gate(x)
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let s = gelu_gate(x);
    let du = T::of(GELU_S) * (T::one() + T::of(3.0 * GELU_C) * x * x);
    s + x * T::of(2.0) * s * (T::one() - s) * du
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            nonfinite: None,
            corrupt: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Name of the op that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Test hook: backward through every op with this name returns gradients
    /// scaled by 1.5, so a gradient check must flag it.
    pub fn corrupt_backward(&mut self, op: Option<&'static str>) {
        self.corrupt = op;
    }

    /// Fails with the first op that produced a NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match self.nonfinite {
            Some((node, op)) => Err(Error::NonFinite { op, node }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let id = self.nodes.len();
        if self.nonfinite.is_none() && !value.is_finite() {
            self.nonfinite = Some((id, op.name()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(id)
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    /// Differentiable leaf not backed by a parameter store.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let v = self.push(t, Op::Leaf, &[]);
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// Records a stored parameter (once per graph); gradients are routed back
    /// to it by [`Gradients::accumulate_into`]. Buffers enter as constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, &[]);
        if store.is_trainable(id) {
            self.nodes[v.0].requires_grad = true;
            self.params.insert(id, v);
        }
        v
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "{op}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(a, b, op.name())?;
        let out = self.value(a).zip_map(self.value(b), f)?;
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalar(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.abs());
        self.push(out, Op::Abs(x), &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(x), &[x])
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        self.push(out, Op::Mean(x), &[x])
    }

    /// Population standard deviation of all elements, shape `[1]`.
    pub fn std(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mu = t.mean();
        let n = T::of(t.len() as f64);
        let var = t.data().iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
        let out = Tensor::scalar(var.sqrt());
        self.push(out, Op::Std(x), &[x])
    }

    /// `x[b, c, ...] + bias[c]`.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() < 2 || self.value(bias).len() != xs[1] {
            return Err(shape_err!(
                "channel_bias: {:?} with bias {:?}",
                xs,
                self.shape(bias)
            ));
        }
        let (outer, c, inner) = kernels::split_axis(xs, 1);
        let mut out = self.value(x).clone();
        let bv = self.value(bias).data();
        for o in 0..outer {
            for ci in 0..c {
                let s = &mut out.data_mut()[(o * c + ci) * inner..(o * c + ci + 1) * inner];
                s.iter_mut().for_each(|v| *v += bv[ci]);
            }
        }
        Ok(self.push(out, Op::ChannelBias(x, bias), &[x, bias]))
    }

    /// Multiplies every slice `x[i, ...]` by `s[i]`.
    pub fn mul_leading(&mut self, x: Var, s: Var) -> Result<Var> {
        let lead = self.shape(x)[0];
        if self.value(s).len() != lead {
            return Err(shape_err!(
                "mul_leading: {:?} with scale {:?}",
                self.shape(x),
                self.shape(s)
            ));
        }
        let mut out = self.value(x).clone();
        let per = out.len() / lead.max(1);
        let sv = self.value(s).data();
        for (chunk, &f) in out.data_mut().chunks_mut(per.max(1)).zip(sv) {
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        Ok(self.push(out, Op::MulLeading(x, s), &[x, s]))
    }

    /// Stride-1 convolution with zero padding that preserves `H×W`.
    /// `w` is `[co, ci, k, k]` with odd `k`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (bn, ci, h, wd) = self.value(x).dims4()?;
        let (co, wci, k, k2) = self.value(w).dims4()?;
        if wci != ci || k != k2 || k % 2 == 0 {
            return Err(shape_err!(
                "conv2d: input {:?} with kernel {:?}",
                self.shape(x),
                self.shape(w)
            ));
        }
        if let Some(b) = b {
            if self.value(b).len() != co {
                return Err(shape_err!("conv2d: bias {:?} for {co} outputs", self.shape(b)));
            }
        }
        let mut out = Tensor::zeros(&[bn, co, h, wd]);
        kernels::conv2d_forward(
            self.value(x).data(),
            (bn, ci, h, wd),
            self.value(w).data(),
            co,
            k,
            b.map(|b| self.value(b).data()),
            out.data_mut(),
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, k }, &inputs))
    }

    /// Per-channel convolution; `w` is `[1 | B, C, k, k]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (bn, c, h, wd) = self.value(x).dims4()?;
        let (wb, wc, k, k2) = self.value(w).dims4()?;
        if wc != c || k != k2 || k % 2 == 0 || (wb != 1 && wb != bn) {
            return Err(shape_err!(
                "depthwise_conv2d: input {:?} with kernel {:?}",
                self.shape(x),
                self.shape(w)
            ));
        }
        let mut out = Tensor::zeros(&[bn, c, h, wd]);
        kernels::depthwise_forward(
            self.value(x).data(),
            (bn, c, h, wd),
            self.value(w).data(),
            wb,
            k,
            out.data_mut(),
        );
        Ok(self.push(out, Op::Depthwise { x, w, k }, &[x, w]))
    }

    /// 1×1 convolution with weight `[out, in]`.
    pub fn pointwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (bn, ci, h, wd) = self.value(x).dims4()?;
        let ws = self.shape(w);
        if ws.len() != 2 || ws[1] != ci {
            return Err(shape_err!(
                "pointwise_conv2d: input {:?} with weight {:?}",
                self.shape(x),
                ws
            ));
        }
        let co = ws[0];
        if let Some(b) = b {
            if self.value(b).len() != co {
                return Err(shape_err!("pointwise_conv2d: bias {:?}", self.shape(b)));
            }
        }
        let mut out = Tensor::zeros(&[bn, co, h, wd]);
        kernels::conv2d_forward(
            self.value(x).data(),
            (bn, ci, h, wd),
            self.value(w).data(),
            co,
            1,
            b.map(|b| self.value(b).data()),
            out.data_mut(),
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Pointwise { x, w, b }, &inputs))
    }

    /// Fully connected layer on rows: `x[p, in] · w[out, in]ᵀ + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err!("linear: input {:?} with weight {:?}", xs, ws));
        }
        let (p, i, o) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.value(b).len() != o {
                return Err(shape_err!("linear: bias {:?}", self.shape(b)));
            }
        }
        let mut out = Tensor::zeros(&[p, o]);
        gemm::mm(
            p,
            i,
            o,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            T::zero(),
            out.data_mut(),
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.data_mut().chunks_mut(o.max(1)) {
                row.iter_mut().zip(bv).for_each(|(v, &bb)| *v += bb);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Linear { x, w, b }, &inputs))
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err!("matmul expects matrices, got {:?} and {:?}", sa, sb));
        }
        let a3 = self.reshape(a, &[1, sa[0], sa[1]])?;
        let b3 = self.reshape(b, &[1, sb[0], sb[1]])?;
        let c = self.bmm(a3, b3, false)?;
        self.reshape(c, &[sa[0], sb[1]])
    }

    /// Batched product `a[g, m, k] · b[g, k, n]`, or `· b[g, n, k]ᵀ` when `tb`.
    pub fn bmm(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err!("bmm: {:?} with {:?}", sa, sb));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (bk, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if bk != k {
            return Err(shape_err!("bmm: inner extents {:?} with {:?}", sa, sb));
        }
        let mut out = Tensor::zeros(&[g, m, n]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for gi in 0..g {
            gemm::mm(
                m,
                k,
                n,
                &av[gi * m * k..(gi + 1) * m * k],
                false,
                &bv[gi * k * n..(gi + 1) * k * n],
                tb,
                T::zero(),
                &mut out.data_mut()[gi * m * n..(gi + 1) * m * n],
            );
        }
        Ok(self.push(out, Op::Bmm { a, b, tb }, &[a, b]))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| invalid!("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(invalid!("concat axis {axis} for rank {}", base.len()));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(shape_err!("concat: {:?} vs {:?}", s, base));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = kernels::split_axis(&shape, axis);
        let mut out = Tensor::zeros(&shape);
        let mut offset = 0;
        for &p in parts {
            let n = self.shape(p)[axis];
            let src = self.value(p).data();
            for o in 0..outer {
                let dst = (o * total + offset) * inner;
                out.data_mut()[dst..dst + n * inner]
                    .copy_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
            }
            offset += n;
        }
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// `x[..., start..start+len, ...]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(shape_err!("slice {start}+{len} on axis {axis} of {:?}", s));
        }
        let (outer, n, inner) = kernels::split_axis(&s, axis);
        let mut shape = s.clone();
        shape[axis] = len;
        let mut out = Tensor::zeros(&shape);
        let src = self.value(x).data();
        for o in 0..outer {
            let from = (o * n + start) * inner;
            out.data_mut()[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&src[from..from + len * inner]);
        }
        Ok(self.push(out, Op::Slice { x, axis, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(invalid!("permutation {:?} for rank {}", perm, s.len()));
        }
        let shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let mut out = Tensor::zeros(&shape);
        kernels::permute(self.value(x).data(), &s, perm, out.data_mut());
        Ok(self.push(out, Op::Permute(x, perm.to_vec()), &[x]))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = softmax_tensor(self.value(x), axis)?;
        Ok(self.push(out, Op::Softmax { x, axis }, &[x]))
    }

    /// Layer normalization across the channel axis (axis 1) independently at
    /// every other position, with per-channel affine `gamma`, `beta`.
    pub fn layer_norm_channels(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || self.value(gamma).len() != s[1] || self.value(beta).len() != s[1] {
            return Err(shape_err!("layer_norm: input {:?}", s));
        }
        let (outer, c, inner) = kernels::split_axis(&s, 1);
        let xv = self.value(x).data();
        let (g, bta) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); outer * inner];
        let mut out = Tensor::zeros(&s);
        let cn = T::of(c as f64);
        for o in 0..outer {
            for i in 0..inner {
                let at = |ci: usize| (o * c + ci) * inner + i;
                let mu = (0..c).map(|ci| xv[at(ci)]).sum::<T>() / cn;
                let var = (0..c)
                    .map(|ci| (xv[at(ci)] - mu) * (xv[at(ci)] - mu))
                    .sum::<T>()
                    / cn;
                let is = T::one() / (var + eps).sqrt();
                inv_std[o * inner + i] = is;
                for ci in 0..c {
                    let xh = (xv[at(ci)] - mu) * is;
                    xhat[at(ci)] = xh;
                    out.data_mut()[at(ci)] = g[ci] * xh + bta[ci];
                }
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Batch normalization over every axis except 1.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || self.value(gamma).len() != s[1] || self.value(beta).len() != s[1] {
            return Err(shape_err!("batch_norm: input {:?}", s));
        }
        let (outer, c, inner) = kernels::split_axis(&s, 1);
        let count = outer * inner;
        let xv = self.value(x).data();
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                let n = T::of(count as f64);
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ci in 0..c {
                    let vals = (0..outer)
                        .flat_map(|o| xv[(o * c + ci) * inner..(o * c + ci + 1) * inner].iter());
                    let mu = vals.clone().copied().sum::<T>() / n;
                    mean[ci] = mu;
                    var[ci] = vals.map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
                }
                let unbiased = (count > 1).then(|| {
                    let f = T::of(count as f64 / (count - 1) as f64);
                    var.iter().map(|&v| v * f).collect()
                });
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err!("batch_norm: running stats for {c} channels"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, bta) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = Tensor::zeros(&s);
        for o in 0..outer {
            for ci in 0..c {
                for i in 0..inner {
                    let at = (o * c + ci) * inner + i;
                    let xh = (xv[at] - mean[ci]) * inv_std[ci];
                    xhat[at] = xh;
                    out.data_mut()[at] = g[ci] * xh + bta[ci];
                }
            }
        }
        let train = matches!(mode, BnMode::Train);
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[x, gamma, beta],
        );
        Ok((v, stats))
    }

    /// Mean over `H×W`: `[B, C, H, W] → [B, C, 1, 1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if h * w == 0 {
            return Err(invalid!("global_avg_pool over an empty {h}×{w} map"));
        }
        let n = T::of((h * w) as f64);
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() / n)
            .collect();
        let out = Tensor::new(&[b, c, 1, 1], data)?;
        Ok(self.push(out, Op::Gap(x), &[x]))
    }

    /// Repeats `[B, C]` (or `[B, C, 1, 1]`) over an `h×w` grid.
    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (b, c) = match s[..] {
            [b, c] | [b, c, 1, 1] => (b, c),
            _ => return Err(shape_err!("broadcast_spatial: {:?}", s)),
        };
        let mut out = Tensor::zeros(&[b, c, h, w]);
        for (plane, &v) in out.data_mut().chunks_mut((h * w).max(1)).zip(self.value(x).data()) {
            plane.fill(v);
        }
        Ok(self.push(out, Op::Broadcast(x), &[x]))
    }

    /// Gathers channel vectors at flat pixel positions `b*H*W + y*W + x` of a
    /// `[B, C, H, W]` map into rows `[P, C]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        if let Some(&bad) = idx.iter().find(|&&i| i >= b * hw) {
            return Err(invalid!("gather_rows: pixel {bad} out of range"));
        }
        let xv = self.value(x).data();
        let mut out = Tensor::zeros(&[idx.len(), c]);
        for (row, &pi) in out.data_mut().chunks_mut(c.max(1)).zip(idx) {
            let (bi, p) = (pi / hw, pi % hw);
            for (ci, r) in row.iter_mut().enumerate() {
                *r = xv[(bi * c + ci) * hw + p];
            }
        }
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    /// Adjoint of [`Graph::gather_rows`]: places rows `[P, C]` at the given
    /// pixels of a zero `[B, C, H, W]` map. Indices must be distinct.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], dims: [usize; 4]) -> Result<Var> {
        let [b, c, h, w] = dims;
        let hw = h * w;
        if self.shape(x) != [idx.len(), c] {
            return Err(shape_err!("scatter_rows: rows {:?} for {} pixels", self.shape(x), idx.len()));
        }
        let mut seen = vec![false; b * hw];
        for &i in idx {
            if i >= b * hw || std::mem::replace(&mut seen[i], true) {
                return Err(invalid!("scatter_rows: pixel {i} out of range or repeated"));
            }
        }
        let xv = self.value(x).data();
        let mut out = Tensor::zeros(&dims);
        for (row, &pi) in xv.chunks(c.max(1)).zip(idx) {
            let (bi, p) = (pi / hw, pi % hw);
            for (ci, &r) in row.iter().enumerate() {
                out.data_mut()[(bi * c + ci) * hw + p] = r;
            }
        }
        Ok(self.push(
            out,
            Op::ScatterRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    /// Picks elements of the flattened tensor, shape `[idx.len()]`.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x).data();
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.len()) {
            return Err(invalid!("gather: index {bad} out of range"));
        }
        let out = Tensor::new(&[idx.len()], idx.iter().map(|&i| xv[i]).collect())?;
        Ok(self.push(
            out,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(invalid!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let factor = match self.corrupt {
                Some(name) if name == node.op.name() => T::of(1.5),
                _ => T::one(),
            };
            let mut acc = Acc {
                grads: &mut grads,
                nodes: &self.nodes,
                factor,
            };
            self.backward_node(node, &g, &mut acc)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.iter().map(|(&p, &v)| (p, v)).collect(),
        })
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, acc: &mut Acc<'_, T>) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc.add(*a, || g.clone());
                acc.add(*b, || g.clone());
            }
            Op::Sub(a, b) => {
                acc.add(*a, || g.clone());
                acc.add(*b, || g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                acc.add(*a, || g.zip_map(val(*b), |x, y| x * y).unwrap());
                acc.add(*b, || g.zip_map(val(*a), |x, y| x * y).unwrap());
            }
            Op::Div(a, b) => {
                acc.add(*a, || g.zip_map(val(*b), |x, y| x / y).unwrap());
                acc.add(*b, || {
                    let q = val(*a).zip_map(val(*b), |x, y| x / (y * y)).unwrap();
                    g.zip_map(&q, |x, y| -x * y).unwrap()
                });
            }
            Op::Scale(x, c) => acc.add(*x, || g.map(|v| v * *c)),
            Op::AddScalar(x) => acc.add(*x, || g.clone()),
            Op::Abs(x) => acc.add(*x, || {
                g.zip_map(val(*x), |gv, xv| {
                    if xv > T::zero() {
                        gv
                    } else if xv < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                })
                .unwrap()
            }),
            Op::Gelu(x) => acc.add(*x, || g.zip_map(val(*x), |gv, xv| gv * gelu_grad(xv)).unwrap()),
            Op::Relu(x) => acc.add(*x, || {
                g.zip_map(val(*x), |gv, xv| if xv > T::zero() { gv } else { T::zero() })
                    .unwrap()
            }),
            Op::Sum(x) => acc.add(*x, || Tensor::full(val(*x).shape(), gd[0])),
            Op::Mean(x) => acc.add(*x, || {
                let n = T::of(val(*x).len() as f64);
                Tensor::full(val(*x).shape(), gd[0] / n)
            }),
            Op::Std(x) => acc.add(*x, || {
                let t = val(*x);
                let sigma = node.value.data()[0];
                if sigma == T::zero() {
                    return Tensor::zeros(t.shape());
                }
                let mu = t.mean();
                let n = T::of(t.len() as f64);
                t.map(|v| gd[0] * (v - mu) / (n * sigma))
            }),
            Op::ChannelBias(x, b) => {
                acc.add(*x, || g.clone());
                acc.add(*b, || {
                    let (outer, c, inner) = kernels::split_axis(g.shape(), 1);
                    let mut db = Tensor::zeros(val(*b).shape());
                    for o in 0..outer {
                        for ci in 0..c {
                            db.data_mut()[ci] += gd[(o * c + ci) * inner..(o * c + ci + 1) * inner]
                                .iter()
                                .copied()
                                .sum::<T>();
                        }
                    }
                    db
                });
            }
            Op::MulLeading(x, s) => {
                let lead = val(*x).shape()[0];
                let per = (val(*x).len() / lead.max(1)).max(1);
                acc.add(*x, || {
                    let mut dx = g.clone();
                    for (chunk, &f) in dx.data_mut().chunks_mut(per).zip(val(*s).data()) {
                        chunk.iter_mut().for_each(|v| *v *= f);
                    }
                    dx
                });
                acc.add(*s, || {
                    let data = gd
                        .chunks(per)
                        .zip(val(*x).data().chunks(per))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(&a, &b)| a * b).sum::<T>())
                        .collect();
                    Tensor::new(val(*s).shape(), data).unwrap()
                });
            }
            Op::Conv2d { x, w, b, k } => {
                self.conv_backward(*x, *w, *b, *k, g, acc)?;
            }
            Op::Pointwise { x, w, b } => {
                self.conv_backward(*x, *w, *b, 1, g, acc)?;
            }
            Op::Depthwise { x, w, k } => {
                let dims = val(*x).dims4()?;
                let wb = val(*w).shape()[0];
                let mut dx = acc.wants(*x).then(|| Tensor::zeros(val(*x).shape()));
                let mut dw = acc.wants(*w).then(|| Tensor::zeros(val(*w).shape()));
                kernels::depthwise_backward(
                    val(*x).data(),
                    dims,
                    val(*w).data(),
                    wb,
                    *k,
                    gd,
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.as_mut().map(|t| t.data_mut()),
                );
                acc.put(*x, dx);
                acc.put(*w, dw);
            }
            Op::Linear { x, w, b } => {
                let (p, i) = (val(*x).shape()[0], val(*x).shape()[1]);
                let o = val(*w).shape()[0];
                acc.add(*x, || {
                    let mut dx = Tensor::zeros(&[p, i]);
                    gemm::mm(p, o, i, gd, false, val(*w).data(), false, T::zero(), dx.data_mut());
                    dx
                });
                acc.add(*w, || {
                    let mut dw = Tensor::zeros(&[o, i]);
                    gemm::mm(o, p, i, gd, true, val(*x).data(), false, T::zero(), dw.data_mut());
                    dw
                });
                if let Some(b) = b {
                    acc.add(*b, || {
                        let mut db = Tensor::zeros(&[o]);
                        for row in gd.chunks(o.max(1)) {
                            db.data_mut().iter_mut().zip(row).for_each(|(d, &r)| *d += r);
                        }
                        db
                    });
                }
            }
            Op::Bmm { a, b, tb } => {
                let sa = val(*a).shape();
                let (gn, m, k) = (sa[0], sa[1], sa[2]);
                let n = g.shape()[2];
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc.add(*a, || {
                    let mut da = Tensor::zeros(sa);
                    for gi in 0..gn {
                        // da = g · op(b)ᵀ
                        gemm::mm(
                            m,
                            n,
                            k,
                            &gd[gi * m * n..(gi + 1) * m * n],
                            false,
                            &bv[gi * k * n..(gi + 1) * k * n],
                            !*tb,
                            T::zero(),
                            &mut da.data_mut()[gi * m * k..(gi + 1) * m * k],
                        );
                    }
                    da
                });
                acc.add(*b, || {
                    let mut db = Tensor::zeros(val(*b).shape());
                    for gi in 0..gn {
                        let ga = &gd[gi * m * n..(gi + 1) * m * n];
                        let aa = &av[gi * m * k..(gi + 1) * m * k];
                        let out = &mut db.data_mut()[gi * k * n..(gi + 1) * k * n];
                        if *tb {
                            gemm::mm(n, m, k, ga, true, aa, false, T::zero(), out);
                        } else {
                            gemm::mm(k, m, n, aa, true, ga, false, T::zero(), out);
                        }
                    }
                    db
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = kernels::split_axis(g.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).shape()[*axis];
                    acc.add(p, || {
                        let mut d = Tensor::zeros(val(p).shape());
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            d.data_mut()[o * n * inner..(o + 1) * n * inner]
                                .copy_from_slice(&gd[src..src + n * inner]);
                        }
                        d
                    });
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => acc.add(*x, || {
                let (outer, n, inner) = kernels::split_axis(val(*x).shape(), *axis);
                let len = g.shape()[*axis];
                let mut d = Tensor::zeros(val(*x).shape());
                for o in 0..outer {
                    let to = (o * n + start) * inner;
                    d.data_mut()[to..to + len * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                d
            }),
            Op::Reshape(x) => acc.add(*x, || g.clone().reshape(val(*x).shape()).unwrap()),
            Op::Permute(x, perm) => acc.add(*x, || {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let mut d = Tensor::zeros(val(*x).shape());
                kernels::permute(gd, g.shape(), &inv, d.data_mut());
                d
            }),
            Op::Softmax { x, axis } => acc.add(*x, || {
                let y = node.value.data();
                let (outer, n, inner) = kernels::split_axis(g.shape(), *axis);
                let mut d = Tensor::zeros(g.shape());
                let dd = d.data_mut();
                if inner == 1 {
                    for ((drow, grow), yrow) in dd.chunks_exact_mut(n).zip(gd.chunks_exact(n)).zip(y.chunks_exact(n)) {
                        let dot = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>();
                        for ((o, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *o = yv * (gv - dot);
                        }
                    }
                    return d;
                }
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot = (0..n).map(|j| gd[at(j)] * y[at(j)]).sum::<T>();
                        for j in 0..n {
                            dd[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                d
            }),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (outer, c, inner) = kernels::split_axis(g.shape(), 1);
                let gm = val(*gamma).data();
                acc.add(*x, || {
                    let mut d = Tensor::zeros(g.shape());
                    let cn = T::of(c as f64);
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |ci: usize| (o * c + ci) * inner + i;
                            let (mut s1, mut s2) = (T::zero(), T::zero());
                            for ci in 0..c {
                                let dxh = gd[at(ci)] * gm[ci];
                                s1 += dxh;
                                s2 += dxh * xhat[at(ci)];
                            }
                            let is = inv_std[o * inner + i];
                            for ci in 0..c {
                                let dxh = gd[at(ci)] * gm[ci];
                                d.data_mut()[at(ci)] = is / cn * (cn * dxh - s1 - xhat[at(ci)] * s2);
                            }
                        }
                    }
                    d
                });
                self.affine_backward(*gamma, *beta, xhat, g, acc);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (outer, c, inner) = kernels::split_axis(g.shape(), 1);
                let gm = val(*gamma).data();
                acc.add(*x, || {
                    let mut d = Tensor::zeros(g.shape());
                    let n = T::of((outer * inner) as f64);
                    for ci in 0..c {
                        let idx = (0..outer).flat_map(|o| (o * c + ci) * inner..(o * c + ci + 1) * inner);
                        if *train {
                            let (mut s1, mut s2) = (T::zero(), T::zero());
                            for at in idx.clone() {
                                let dxh = gd[at] * gm[ci];
                                s1 += dxh;
                                s2 += dxh * xhat[at];
                            }
                            for at in idx {
                                let dxh = gd[at] * gm[ci];
                                d.data_mut()[at] = inv_std[ci] / n * (n * dxh - s1 - xhat[at] * s2);
                            }
                        } else {
                            for at in idx {
                                d.data_mut()[at] = gd[at] * gm[ci] * inv_std[ci];
                            }
                        }
                    }
                    d
                });
                self.affine_backward(*gamma, *beta, xhat, g, acc);
            }
            Op::Gap(x) => acc.add(*x, || {
                let s = val(*x).shape();
                let hw = s[2] * s[3];
                let n = T::of(hw as f64);
                let mut d = Tensor::zeros(s);
                for (plane, &gv) in d.data_mut().chunks_mut(hw).zip(gd) {
                    plane.fill(gv / n);
                }
                d
            }),
            Op::Broadcast(x) => acc.add(*x, || {
                let s = g.shape();
                let hw = (s[2] * s[3]).max(1);
                let data = gd.chunks(hw).map(|p| p.iter().copied().sum::<T>()).collect();
                Tensor::new(val(*x).shape(), data).unwrap()
            }),
            Op::GatherRows { x, idx } => acc.add(*x, || {
                let s = val(*x).shape();
                let (c, hw) = (s[1], s[2] * s[3]);
                let mut d = Tensor::zeros(s);
                for (row, &pi) in gd.chunks(c.max(1)).zip(idx) {
                    let (bi, p) = (pi / hw, pi % hw);
                    for (ci, &r) in row.iter().enumerate() {
                        d.data_mut()[(bi * c + ci) * hw + p] += r;
                    }
                }
                d
            }),
            Op::ScatterRows { x, idx } => acc.add(*x, || {
                let s = g.shape();
                let (c, hw) = (s[1], s[2] * s[3]);
                let mut d = Tensor::zeros(val(*x).shape());
                for (row, &pi) in d.data_mut().chunks_mut(c.max(1)).zip(idx) {
                    let (bi, p) = (pi / hw, pi % hw);
                    for (ci, r) in row.iter_mut().enumerate() {
                        *r = gd[(bi * c + ci) * hw + p];
                    }
                }
                d
            }),
            Op::Gather { x, idx } => acc.add(*x, || {
                let mut d = Tensor::zeros(val(*x).shape());
                for (&i, &gv) in idx.iter().zip(gd) {
                    d.data_mut()[i] += gv;
                }
                d
            }),
        }
        Ok(())
    }

    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
        g: &Tensor<T>,
        acc: &mut Acc<'_, T>,
    ) -> Result<()> {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let dims = xv.dims4()?;
        let co = g.shape()[1];
        let mut dx = acc.wants(x).then(|| Tensor::zeros(xv.shape()));
        let mut dw = acc.wants(w).then(|| Tensor::zeros(wv.shape()));
        let mut db = b.filter(|&b| acc.wants(b)).map(|_| Tensor::zeros(&[co]));
        kernels::conv2d_backward(
            xv.data(),
            dims,
            wv.data(),
            co,
            k,
            g.data(),
            dx.as_mut().map(|t| t.data_mut()),
            dw.as_mut().map(|t| t.data_mut()),
            db.as_mut().map(|t| t.data_mut()),
        );
        acc.put(x, dx);
        acc.put(w, dw);
        if let Some(b) = b {
            acc.put(b, db.map(|t| t.reshape(self.nodes[b.0].value.shape()).unwrap()));
        }
        Ok(())
    }

    fn affine_backward(&self, gamma: Var, beta: Var, xhat: &[T], g: &Tensor<T>, acc: &mut Acc<'_, T>) {
        let (outer, c, inner) = kernels::split_axis(g.shape(), 1);
        let gd = g.data();
        let sum_c = |f: &dyn Fn(usize) -> T| {
            let mut out = vec![T::zero(); c];
            for o in 0..outer {
                for (ci, slot) in out.iter_mut().enumerate() {
                    for i in 0..inner {
                        *slot += f((o * c + ci) * inner + i);
                    }
                }
            }
            out
        };
        acc.add(gamma, || {
            Tensor::new(&[c], sum_c(&|at| gd[at] * xhat[at]))
                .unwrap()
                .reshape(self.nodes[gamma.0].value.shape())
                .unwrap()
        });
        acc.add(beta, || {
            Tensor::new(&[c], sum_c(&|at| gd[at]))
                .unwrap()
                .reshape(self.nodes[beta.0].value.shape())
                .unwrap()
        });
    }
}

/// Softmax of a plain tensor along `axis`, stabilized by max subtraction.
pub fn softmax_tensor<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(invalid!("softmax axis {axis} for rank {}", x.rank()));
    }
    let (outer, n, inner) = kernels::split_axis(x.shape(), axis);
    let xv = x.data();
    let mut out = Tensor::zeros(x.shape());
    let od = out.data_mut();
    if inner == 1 {
        for (row, orow) in xv.chunks_exact(n).zip(od.chunks_exact_mut(n)) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - m).exp();
                z += *o;
            }
            let inv = T::one() / z;
            orow.iter_mut().for_each(|o| *o *= inv);
        }
        return Ok(out);
    }
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let m = (0..n).map(|j| xv[at(j)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for j in 0..n {
                let e = (xv[at(j)] - m).exp();
                od[at(j)] = e;
                z += e;
            }
            for j in 0..n {
                od[at(j)] /= z;
            }
        }
    }
    Ok(out)
}

struct Acc<'a, T> {
    grads: &'a mut [Option<Tensor<T>>],
    nodes: &'a [Node<T>],
    factor: T,
}

impl<T: Scalar> Acc<'_, T> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn add(&mut self, v: Var, f: impl FnOnce() -> Tensor<T>) {
        if self.wants(v) {
            let t = f();
            self.put(v, Some(t));
        }
    }

    fn put(&mut self, v: Var, t: Option<Tensor<T>>) {
        let Some(mut t) = t else { return };
        if !self.wants(v) {
            return;
        }
        if self.factor != T::one() {
            let f = self.factor;
            t.data_mut().iter_mut().for_each(|x| *x *= f);
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing
                .data_mut()
                .iter_mut()
                .zip(t.data())
                .for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(t),
        }
    }
}

/// Result of a reverse sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a recorded value, if any flowed into it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Adds parameter gradients into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(id, v) in &self.params {
            if let Some(g) = &self.grads[v.0] {
                store
                    .grad_mut(id)
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, &b)| *a += b);
            }
        }
    }
}
