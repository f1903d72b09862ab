//! Wengert-list reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and the indices of
//! its parents, so parents always precede children. `backward` walks the list
//! once in reverse and accumulates into per-node gradient buffers.

use std::rc::Rc;

use super::tensor::{strides, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Sigmoid,
    Tanh,
    /// Exact Gaussian-CDF form `x * Phi(x)`.
    Gelu,
    Exp,
    /// Natural log of `max(x, LOG_FLOOR)`.
    Log,
}

pub const LOG_FLOOR: f64 = 1e-12;

/// Index value that makes [`Tape::gather`] emit a zero.
pub const GATHER_ZERO: usize = usize::MAX;

/// Backward rule of a user-supplied op: `(input, output, grad_output) -> grad_input`.
pub type CustomBackward = Rc<dyn Fn(&Tensor, &Tensor, &[f64]) -> Vec<f64>>;

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, p: usize },
    Linear { x: Var, w: Var, rows: usize, inp: usize, out: usize },
    Binary { op: BinaryOp, a: Var, b: Var },
    Unary { op: UnaryOp, a: Var },
    Affine { a: Var, scale: f64 },
    Clamp { a: Var, lo: f64, hi: f64 },
    Softmax { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Lookup { table: Var, ids: Rc<[usize]> },
    Gather { a: Var, index: Rc<[usize]> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Reshape { a: Var },
    SumAxis { a: Var, axis: usize },
    SumAll { a: Var },
    BatchedMatVec { w: Var, x: Var, rows: usize, out: usize, inp: usize },
    Gumbel { p: Var, tau: f64 },
    Nll { yhat: Var, labels: Rc<[f64]> },
    Custom { a: Var, backward: CustomBackward },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradient buffers for the leaves of a tape after [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when the leaf does not require grad or received no contribution.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Zero-filled when the leaf was unreachable from the root.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    macs: u64,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-adds performed by dense products recorded so far.
    pub fn mac_count(&self) -> u64 {
        self.macs
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    /// Trainable input; its gradient is kept by `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_raw(value, op, rg)
    }

    // ── dense products ──────────────────────────────────────────────

    /// `a [m×k] · b [k×p]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, p) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * p];
        gemm(
            m,
            k,
            p,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (p, 1),
            &mut out,
            0.0,
        );
        self.macs += (m * k * p) as u64;
        let value = Tensor::from_parts(vec![m, p], out);
        Ok(self.push(value, Op::MatMul { a, b, m, k, p }, &[a, b]))
    }

    /// `x · wᵀ` over the last axis of `x`; `w` is `[out × in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let inp = *sx.last().unwrap();
        if sw.len() != 2 || sw[1] != inp {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: sx,
                rhs: sw,
            });
        }
        let out = sw[0];
        let rows = self.value(x).len() / inp;
        let mut data = vec![0.0; rows * out];
        gemm(
            rows,
            inp,
            out,
            self.value(x).data(),
            (inp, 1),
            self.value(w).data(),
            (1, inp),
            &mut data,
            0.0,
        );
        self.macs += (rows * inp * out) as u64;
        let mut shape = sx;
        *shape.last_mut().unwrap() = out;
        let value = Tensor::from_parts(shape, data);
        Ok(self.push(value, Op::Linear { x, w, rows, inp, out }, &[x, w]))
    }

    /// Per-row matrix–vector product: `w [..., out·in]` holds one row-major
    /// `out×in` matrix per row of `x [..., in]`.
    pub fn batched_matvec(&mut self, w: Var, x: Var, out: usize) -> Result<Var> {
        let (sw, sx) = (self.shape(w).to_vec(), self.shape(x).to_vec());
        let inp = *sx.last().unwrap();
        let rows = self.value(x).len() / inp;
        if sw[..sw.len() - 1] != sx[..sx.len() - 1] || *sw.last().unwrap() != out * inp {
            return Err(Error::ShapeMismatch {
                op: "batched_matvec",
                lhs: sw,
                rhs: sx,
            });
        }
        let (wd, xd) = (self.value(w).data(), self.value(x).data());
        let mut data = vec![0.0; rows * out];
        for r in 0..rows {
            let xr = &xd[r * inp..(r + 1) * inp];
            let wr = &wd[r * out * inp..(r + 1) * out * inp];
            for (p, y) in data[r * out..(r + 1) * out].iter_mut().enumerate() {
                *y = dot(&wr[p * inp..(p + 1) * inp], xr);
            }
        }
        self.macs += (rows * out * inp) as u64;
        let mut shape = sx;
        *shape.last_mut().unwrap() = out;
        let value = Tensor::from_parts(shape, data);
        Ok(self.push(
            value,
            Op::BatchedMatVec {
                w,
                x,
                rows,
                out,
                inp,
            },
            &[w, x],
        ))
    }

    // ── pointwise ───────────────────────────────────────────────────

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or(Error::ShapeMismatch {
            op: "broadcast",
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let n: usize = out_shape.iter().product();
        // outputs are visited in order, so they can be pushed
        let mut out = Vec::with_capacity(n);
        match op {
            BinaryOp::Add => for_each_broadcast(&out_shape, &sa, &sb, |_, ia, ib| out.push(ad[ia] + bd[ib])),
            BinaryOp::Sub => for_each_broadcast(&out_shape, &sa, &sb, |_, ia, ib| out.push(ad[ia] - bd[ib])),
            BinaryOp::Mul => for_each_broadcast(&out_shape, &sa, &sb, |_, ia, ib| out.push(ad[ia] * bd[ib])),
            BinaryOp::Div => for_each_broadcast(&out_shape, &sa, &sb, |_, ia, ib| out.push(ad[ia] / bd[ib])),
        }
        let value = Tensor::from_parts(out_shape, out);
        Ok(self.push(value, Op::Binary { op, a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Var {
        let f: fn(f64) -> f64 = match op {
            UnaryOp::Sigmoid => sigmoid,
            UnaryOp::Tanh => f64::tanh,
            UnaryOp::Gelu => gelu,
            UnaryOp::Exp => f64::exp,
            UnaryOp::Log => |x| x.max(LOG_FLOOR).ln(),
        };
        let src = self.value(a);
        let value = Tensor::from_parts(src.shape().to_vec(), src.data().iter().map(|&x| f(x)).collect());
        self.push(value, Op::Unary { op, a }, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Tanh, a)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Gelu, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Log, a)
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let src = self.value(a);
        let value = Tensor::from_parts(
            src.shape().to_vec(),
            src.data().iter().map(|&x| scale * x + shift).collect(),
        );
        self.push(value, Op::Affine { a, scale }, &[a])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.affine(a, factor, 0.0)
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 1.0)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let src = self.value(a);
        let value = Tensor::from_parts(
            src.shape().to_vec(),
            src.data().iter().map(|&x| x.clamp(lo, hi)).collect(),
        );
        self.push(value, Op::Clamp { a, lo, hi }, &[a])
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let c = src.last_dim();
        let mut out = src.data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let value = Tensor::from_parts(src.shape().to_vec(), out);
        self.push(value, Op::Softmax { a }, &[a])
    }

    /// Normalizes over the last axis, then applies `gain` and `bias` (both `[d]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap();
        for v in [gain, bias] {
            if self.shape(v) != [d] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: sx,
                    rhs: self.shape(v).to_vec(),
                });
            }
        }
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("layer_norm eps must be positive, got {eps}")));
        }
        let (xd, g, b) = (self.value(x).data(), self.value(gain).data(), self.value(bias).data());
        let rows = xd.len() / d;
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::from_parts(sx, out);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    // ── indexing and layout ─────────────────────────────────────────

    /// Row lookup into `table [V×d]`. Row 0 is the padding row: it is read
    /// like any other row but never receives gradient.
    pub fn lookup(&mut self, table: Var, ids: &[usize], field: &str) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(Error::InvalidShape {
                op: "lookup",
                detail: format!("table for {field} must be 2-D, got {st:?}"),
            });
        }
        if ids.is_empty() {
            return Err(Error::InvalidArgument(format!("empty id list for {field}")));
        }
        let (vocab, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::IdOutOfRange {
                field: field.to_string(),
                id: bad,
                vocab,
            });
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let value = Tensor::from_parts(vec![ids.len(), d], out);
        Ok(self.push(
            value,
            Op::Lookup {
                table,
                ids: ids.into(),
            },
            &[table],
        ))
    }

    /// `out.flat[j] = a.flat[index[j]]`, or zero where `index[j] == GATHER_ZERO`.
    pub fn gather(&mut self, a: Var, index: Rc<[usize]>, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        let len = self.value(a).len();
        if n != index.len() || index.iter().any(|&i| i != GATHER_ZERO && i >= len) {
            return Err(Error::InvalidShape {
                op: "gather",
                detail: format!("index of {} entries into {len} values for shape {shape:?}", index.len()),
            });
        }
        let src = self.value(a).data();
        let out = index
            .iter()
            .map(|&i| if i == GATHER_ZERO { 0.0 } else { src[i] })
            .collect();
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(value, Op::Gather { a, index }, &[a]))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if axes.len() != sa.len() || axes.iter().any(|&x| x >= sa.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::InvalidShape {
                op: "permute",
                detail: format!("axes {axes:?} for shape {sa:?}"),
            });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&x| sa[x]).collect();
        let st = strides(&sa);
        let perm_strides: Vec<usize> = axes.iter().map(|&x| st[x]).collect();
        let index = strided_index(&out_shape, &perm_strides);
        self.gather(a, index.into(), out_shape)
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        match broadcast_shape(&sa, shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "broadcast_to",
                    lhs: sa,
                    rhs: shape.to_vec(),
                })
            }
        }
        let bs = broadcast_strides(&sa, shape.len());
        let index = strided_index(shape, &bs);
        self.gather(a, index.into(), shape.to_vec())
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { a }, &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidShape {
                op: "concat",
                detail: format!("axis {axis} for shape {first:?}"),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let block = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let axis = self.shape(parts[0]).len() - 1;
        self.concat(parts, axis)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || len == 0 || start + len > sa[axis] {
            return Err(Error::InvalidShape {
                op: "slice",
                detail: format!("[{start}, {}) on axis {axis} of {sa:?}", start + len),
            });
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * sa[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = sa;
        shape[axis] = len;
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(value, Op::Slice { a, axis, start }, &[a]))
    }

    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let axis = self.shape(a).len() - 1;
        self.slice(a, axis, start, len)
    }

    /// Sums out `axis`; a rank-1 input yields shape `[1]`.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(Error::InvalidShape {
                op: "sum_axis",
                detail: format!("axis {axis} for shape {sa:?}"),
            });
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for t in 0..sa[axis] {
                let base = (o * sa[axis] + t) * inner;
                for j in 0..inner {
                    out[o * inner + j] += src[base + j];
                }
            }
        }
        let mut shape = sa;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(value, Op::SumAxis { a, axis }, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    // ── model-specific primitives ───────────────────────────────────

    /// Two-way Gumbel-Softmax keep factor.
    ///
    /// With `logit_noise = g0 - g1`, computes
    /// `exp((g0 + ln p)/tau) / (exp((g0 + ln p)/tau) + exp((g1 + ln(1-p))/tau))`
    /// with `p` clamped to `[1e-6, 1 - 1e-6]`. Positions with `mask == 0`
    /// output exactly zero. The noise is a constant of the graph.
    pub fn gumbel_select(&mut self, p: Var, logit_noise: &[f64], mask: &[f64], tau: f64) -> Result<Var> {
        if tau <= 0.0 || !tau.is_finite() {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
        }
        let n = self.value(p).len();
        if logit_noise.len() != n || mask.len() != n {
            return Err(Error::InvalidShape {
                op: "gumbel_select",
                detail: format!("{n} probabilities, {} noise, {} mask", logit_noise.len(), mask.len()),
            });
        }
        let pd = self.value(p).data();
        let out = (0..n)
            .map(|i| {
                if mask[i] == 0.0 {
                    0.0
                } else {
                    gumbel_keep(pd[i], logit_noise[i], tau)
                }
            })
            .collect();
        let value = Tensor::from_parts(self.shape(p).to_vec(), out);
        // The backward rule needs only the output and `p`; masked entries are
        // exactly zero.
        Ok(self.push(value, Op::Gumbel { p, tau }, &[p]))
    }

    /// Mean binary negative log-likelihood with predictions clamped to
    /// `[1e-12, 1 - 1e-12]`.
    pub fn nll_loss(&mut self, yhat: Var, labels: &[f64]) -> Result<Var> {
        let n = self.value(yhat).len();
        if labels.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "nll_loss",
                lhs: self.shape(yhat).to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let yd = self.value(yhat).data();
        let loss = nll(yd, labels);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Nll {
                yhat,
                labels: labels.into(),
            },
            &[yhat],
        ))
    }

    /// Records an op whose forward value the caller computed, with a caller
    /// supplied backward rule.
    pub fn custom(&mut self, a: Var, value: Tensor, backward: CustomBackward) -> Var {
        self.push(value, Op::Custom { a, backward }, &[a])
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Only leaf gradients are retained.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                detail: format!("root must be scalar, got {:?}", self.shape(root)),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, p } => {
                let (m, k, p) = (*m, *k, *p);
                if let Some(ga) = self.slot(grads, *a) {
                    gemm(m, p, k, g, (p, 1), self.value(*b).data(), (1, p), ga, 1.0);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm(k, m, p, self.value(*a).data(), (1, k), g, (p, 1), gb, 1.0);
                }
            }
            Op::Linear { x, w, rows, inp, out: o } => {
                let (rows, inp, o) = (*rows, *inp, *o);
                if let Some(gx) = self.slot(grads, *x) {
                    gemm(rows, o, inp, g, (o, 1), self.value(*w).data(), (inp, 1), gx, 1.0);
                }
                if let Some(gw) = self.slot(grads, *w) {
                    gemm(o, rows, inp, g, (1, o), self.value(*x).data(), (inp, 1), gw, 1.0);
                }
            }
            Op::BatchedMatVec { w, x, rows, out: o, inp } => {
                let (rows, o, inp) = (*rows, *o, *inp);
                let (wd, xd) = (self.value(*w).data(), self.value(*x).data());
                if let Some(gw) = self.slot(grads, *w) {
                    for r in 0..rows {
                        let xr = &xd[r * inp..(r + 1) * inp];
                        for p in 0..o {
                            let gp = g[r * o + p];
                            let row = &mut gw[(r * o + p) * inp..(r * o + p + 1) * inp];
                            axpy(gp, xr, row);
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    for r in 0..rows {
                        let gxr = &mut gx[r * inp..(r + 1) * inp];
                        for p in 0..o {
                            let gp = g[r * o + p];
                            axpy(gp, &wd[(r * o + p) * inp..(r * o + p + 1) * inp], gxr);
                        }
                    }
                }
            }
            Op::Binary { op, a, b } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let op = *op;
                if let Some(ga) = self.slot(grads, *a) {
                    let sh = out.shape();
                    match op {
                        BinaryOp::Add | BinaryOp::Sub => for_each_broadcast(sh, &sa, &sb, |o, ia, _| ga[ia] += g[o]),
                        BinaryOp::Mul => for_each_broadcast(sh, &sa, &sb, |o, ia, ib| ga[ia] += g[o] * bd[ib]),
                        BinaryOp::Div => for_each_broadcast(sh, &sa, &sb, |o, ia, ib| ga[ia] += g[o] / bd[ib]),
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let sh = out.shape();
                    match op {
                        BinaryOp::Add => for_each_broadcast(sh, &sa, &sb, |o, _, ib| gb[ib] += g[o]),
                        BinaryOp::Sub => for_each_broadcast(sh, &sa, &sb, |o, _, ib| gb[ib] -= g[o]),
                        BinaryOp::Mul => for_each_broadcast(sh, &sa, &sb, |o, ia, ib| gb[ib] += g[o] * ad[ia]),
                        BinaryOp::Div => for_each_broadcast(sh, &sa, &sb, |o, ia, ib| {
                            gb[ib] -= g[o] * ad[ia] / (bd[ib] * bd[ib])
                        }),
                    }
                }
            }
            Op::Unary { op, a } => {
                let x = self.value(*a).data();
                let y = out.data();
                let op = *op;
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..ga.len() {
                        let d = match op {
                            UnaryOp::Sigmoid => y[i] * (1.0 - y[i]),
                            UnaryOp::Tanh => 1.0 - y[i] * y[i],
                            UnaryOp::Gelu => gelu_grad(x[i]),
                            UnaryOp::Exp => y[i],
                            UnaryOp::Log => {
                                if x[i] > LOG_FLOOR {
                                    1.0 / x[i]
                                } else {
                                    0.0
                                }
                            }
                        };
                        ga[i] += g[i] * d;
                    }
                }
            }
            Op::Affine { a, scale } => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(*scale, g, ga);
                }
            }
            Op::Clamp { a, lo, hi } => {
                let x = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..ga.len() {
                        if x[i] >= *lo && x[i] <= *hi {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            Op::Softmax { a } => {
                let c = out.last_dim();
                let y = out.data();
                if let Some(ga) = self.slot(grads, *a) {
                    for r in 0..y.len() / c {
                        let (yr, gr) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                        let s = dot(yr, gr);
                        for j in 0..c {
                            ga[r * c + j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = out.last_dim();
                let gd = self.value(*gain).data();
                if let Some(gg) = self.slot(grads, *gain) {
                    for (r, gr) in g.chunks(d).enumerate() {
                        for j in 0..d {
                            gg[j] += gr[j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            gb[j] += gr[j];
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let mut dxh = vec![0.0; d];
                    for (r, gr) in g.chunks(d).enumerate() {
                        let xh = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxh[j] = gr[j] * gd[j];
                        }
                        let m1 = dxh.iter().sum::<f64>() / d as f64;
                        let m2 = dot(&dxh, xh) / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += rstd[r] * (dxh[j] - m1 - xh[j] * m2);
                        }
                    }
                }
            }
            Op::Lookup { table, ids } => {
                let d = out.last_dim();
                if let Some(gt) = self.slot(grads, *table) {
                    for (j, &id) in ids.iter().enumerate() {
                        if id == 0 {
                            continue;
                        }
                        axpy(1.0, &g[j * d..(j + 1) * d], &mut gt[id * d..(id + 1) * d]);
                    }
                }
            }
            Op::Gather { a, index } => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (j, &i) in index.iter().enumerate() {
                        if i != GATHER_ZERO {
                            ga[i] += g[j];
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let s = out.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let total = s[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let block = self.shape(p)[*axis] * inner;
                    if let Some(gp) = self.slot(grads, p) {
                        for o in 0..outer {
                            axpy(
                                1.0,
                                &g[o * total + offset..o * total + offset + block],
                                &mut gp[o * block..(o + 1) * block],
                            );
                        }
                    }
                    offset += block;
                }
            }
            Op::Slice { a, axis, start } => {
                let sa = self.shape(*a).to_vec();
                let len = out.shape()[*axis];
                let outer: usize = sa[..*axis].iter().product();
                let inner: usize = sa[axis + 1..].iter().product();
                if let Some(ga) = self.slot(grads, *a) {
                    for o in 0..outer {
                        let base = (o * sa[*axis] + start) * inner;
                        axpy(
                            1.0,
                            &g[o * len * inner..(o + 1) * len * inner],
                            &mut ga[base..base + len * inner],
                        );
                    }
                }
            }
            Op::Reshape { a } => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(1.0, g, ga);
                }
            }
            Op::SumAxis { a, axis } => {
                let sa = self.shape(*a).to_vec();
                let outer: usize = sa[..*axis].iter().product();
                let inner: usize = sa[axis + 1..].iter().product();
                if let Some(ga) = self.slot(grads, *a) {
                    for o in 0..outer {
                        for t in 0..sa[*axis] {
                            let base = (o * sa[*axis] + t) * inner;
                            axpy(1.0, &g[o * inner..(o + 1) * inner], &mut ga[base..base + inner]);
                        }
                    }
                }
            }
            Op::SumAll { a } => {
                if let Some(ga) = self.slot(grads, *a) {
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
            }
            Op::Gumbel { p, tau } => {
                let pd = self.value(*p).data();
                let d = out.data();
                if let Some(gp) = self.slot(grads, *p) {
                    for i in 0..gp.len() {
                        let pi = pd[i];
                        if d[i] == 0.0 || !(GUMBEL_P_MIN..=GUMBEL_P_MAX).contains(&pi) {
                            continue;
                        }
                        let dz = 1.0 / pi + 1.0 / (1.0 - pi);
                        gp[i] += g[i] * d[i] * (1.0 - d[i]) * dz / tau;
                    }
                }
            }
            Op::Nll { yhat, labels } => {
                let yd = self.value(*yhat).data();
                let n = yd.len() as f64;
                if let Some(gy) = self.slot(grads, *yhat) {
                    for i in 0..gy.len() {
                        let p = yd[i];
                        if !(NLL_CLAMP..=1.0 - NLL_CLAMP).contains(&p) {
                            continue;
                        }
                        gy[i] += g[0] * (p - labels[i]) / (p * (1.0 - p)) / n;
                    }
                }
            }
            Op::Custom { a, backward } => {
                let ga_new = backward(self.value(*a), out, g);
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(1.0, &ga_new, ga);
                }
            }
        }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }
}

pub const GUMBEL_P_MIN: f64 = 1e-6;
pub const GUMBEL_P_MAX: f64 = 1.0 - 1e-6;
pub const NLL_CLAMP: f64 = 1e-12;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Keep factor for one position given `p` and `g0 - g1`.
pub fn gumbel_keep(p: f64, logit_noise: f64, tau: f64) -> f64 {
    let pc = p.clamp(GUMBEL_P_MIN, GUMBEL_P_MAX);
    sigmoid((logit_noise + pc.ln() - (1.0 - pc).ln()) / tau)
}

pub fn nll(yhat: &[f64], labels: &[f64]) -> f64 {
    let n = yhat.len() as f64;
    -yhat
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(NLL_CLAMP, 1.0 - NLL_CLAMP);
            y * p.ln() + (1.0 - y) * (1.0 - p).ln()
        })
        .sum::<f64>()
        / n
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut s = acc[0] + acc[1] + acc[2] + acc[3];
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `c = a · b + beta · c` for `a [m×k]`, `b [k×n]` with explicit (row, col) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    }
    // SAFETY: bounds of every accessed element are asserted above; `c` is a
    // distinct mutable slice.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` right-aligned to `rank` axes, zero on broadcast axes.
fn broadcast_strides(shape: &[usize], rank: usize) -> Vec<usize> {
    let st = strides(shape);
    let mut out = vec![0; rank];
    for (i, (&d, &s)) in shape.iter().zip(&st).enumerate() {
        out[rank - shape.len() + i] = if d == 1 { 0 } else { s };
    }
    out
}

fn strided_index(shape: &[usize], st: &[usize]) -> Vec<usize> {
    let n: usize = shape.iter().product();
    let mut index = Vec::with_capacity(n);
    let mut ctr = vec![0; shape.len()];
    let mut off = 0;
    for _ in 0..n {
        index.push(off);
        for d in (0..shape.len()).rev() {
            ctr[d] += 1;
            off += st[d];
            if ctr[d] < shape[d] {
                break;
            }
            off -= st[d] * shape[d];
            ctr[d] = 0;
        }
    }
    index
}

fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out.iter().product();
    if sa == out && sb == out {
        for i in 0..n {
            f(i, i, i);
        }
        return;
    }
    if n == 0 {
        return;
    }
    let r = out.len();
    let (ta, tb) = (broadcast_strides(sa, r), broadcast_strides(sb, r));
    // merge neighbouring axes that stay contiguous (or stay broadcast) in
    // both operands, so the inner loop runs as long as possible
    let mut dims: Vec<(usize, usize, usize)> = Vec::with_capacity(r);
    for d in 0..r {
        if out[d] == 1 {
            continue;
        }
        if let Some(last) = dims.last_mut() {
            if last.1 == ta[d] * out[d] && last.2 == tb[d] * out[d] {
                *last = (last.0 * out[d], ta[d], tb[d]);
                continue;
            }
        }
        dims.push((out[d], ta[d], tb[d]));
    }
    let Some(&(inner, sa_in, sb_in)) = dims.last() else {
        f(0, 0, 0);
        return;
    };
    let outer = &dims[..dims.len() - 1];
    let mut ctr = vec![0; outer.len()];
    let (mut ia, mut ib, mut o) = (0, 0, 0);
    loop {
        match (sa_in, sb_in) {
            (1, 1) => (0..inner).for_each(|j| f(o + j, ia + j, ib + j)),
            (1, 0) => (0..inner).for_each(|j| f(o + j, ia + j, ib)),
            (0, 1) => (0..inner).for_each(|j| f(o + j, ia, ib + j)),
            _ => (0..inner).for_each(|j| f(o + j, ia + j * sa_in, ib + j * sb_in)),
        }
        o += inner;
        let mut d = outer.len();
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            ctr[d] += 1;
            ia += outer[d].1;
            ib += outer[d].2;
            if ctr[d] < outer[d].0 {
                break;
            }
            ia -= outer[d].1 * outer[d].0;
            ib -= outer[d].2 * outer[d].0;
            ctr[d] = 0;
        }
    }
}
