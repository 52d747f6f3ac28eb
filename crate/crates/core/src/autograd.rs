//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in execution order, so node indices
//! are already a topological order. [`Graph::backward`] walks the tape once
//! in reverse and adds `dLoss/dLeaf` into the persistent gradient buffer of
//! each leaf created with [`Graph::param`]. Repeated calls accumulate until
//! [`Graph::zero_grad`].
//!
//! Every op checks its output for NaN/Inf and fails with
//! [`Error::NonFinite`] naming the op.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Gelu(Var),
    Abs(Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        alpha: f64,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    AddBias {
        x: Var,
        bias: Var,
        axis: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    GlobalAvgPool(Var),
    ScatterWindows {
        x: Var,
        origins: Vec<(usize, usize)>,
    },
    BceWithLogits {
        x: Var,
        labels: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant leaf: no gradient is tracked for it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A trainable leaf whose gradient is accumulated by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
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

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn zip_map(&self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::from_fn(t.shape(), |i| f(t.data()[i]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_map(a, b, "add", |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_map(a, b, "sub", |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_map(a, b, "mul", |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_map(a, b, "div", |x, y| x / y)?;
        self.push("div", out, Op::Div(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.map(a, |x| x * s);
        self.push("scale", out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.map(a, |x| x + s);
        self.push("add_scalar", out, Op::AddScalar(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |x| x.max(0.0));
        self.push("relu", out, Op::Relu(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, kernels::gelu);
        self.push("gelu", out, Op::Gelu(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, f64::abs);
        self.push("abs", out, Op::Abs(a), &[a])
    }

    /// Plain matrix product of `a[m×k]` and `b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false, false, 1.0)
    }

    /// `alpha * op(a) * op(b)` where `op` optionally transposes a 2-D operand.
    pub fn matmul_ext(&mut self, a: Var, b: Var, ta: bool, tb: bool, alpha: f64) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", format!("need 2-D operands, got {sa:?} and {sb:?}")));
        }
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(Error::shape("matmul", format!("inner dimensions differ: {sa:?} x {sb:?}")));
        }
        self.matmul_impl(a, b, ta, tb, alpha, 1, m, ka, n, vec![m, n])
    }

    /// Batched product over the leading axis of 3-D operands.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool, alpha: f64) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("bmm", format!("need equal-batch 3-D operands, got {sa:?} and {sb:?}")));
        }
        let (m, ka) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (kb, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if ka != kb {
            return Err(Error::shape("bmm", format!("inner dimensions differ: {sa:?} x {sb:?}")));
        }
        let batch = sa[0];
        self.matmul_impl(a, b, ta, tb, alpha, batch, m, ka, n, vec![batch, m, n])
    }

    #[allow(clippy::too_many_arguments)]
    fn matmul_impl(
        &mut self,
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        alpha: f64,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shape: Vec<usize>,
    ) -> Result<Var> {
        let mut out = vec![0.0; batch * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                kernels::gemm(
                    m,
                    k,
                    n,
                    alpha,
                    &da[i * m * k..(i + 1) * m * k],
                    ta,
                    &db[i * k * n..(i + 1) * k * n],
                    tb,
                    0.0,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let value = Tensor::new(shape, out)?;
        let op = Op::MatMul { a, b, ta, tb, alpha, batch, m, k, n };
        self.push("matmul", value, op, &[a, b])
    }

    /// Adds `bias[d]` along `axis` of `x`, where `d = x.shape[axis]`.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if axis >= tx.rank() || tb.numel() != tx.shape()[axis] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} does not match axis {axis} of {:?}", tb.shape(), tx.shape()),
            ));
        }
        let (_, dim, inner) = kernels::split_axis(tx.shape(), axis);
        let b = tb.data();
        let out = Tensor::from_fn(tx.shape(), |i| tx.data()[i] + b[(i / inner) % dim]);
        self.push("add_bias", out, Op::AddBias { x, bias, axis }, &[x, bias])
    }

    /// Cross-correlation of `x[B×Cin×h×w]` with `w[Cout×Cin×kh×kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::shape("conv2d", format!("input {sx:?} vs kernel {sw:?}")));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be at least 1".into()));
        }
        let (bsz, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, wd + 2 * pad),
            ));
        }
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        };
        let plane = geom.col_cols();
        let mut out = vec![0.0; bsz * cout * plane];
        {
            let (dx, dw) = (self.value(x).data(), self.value(w).data());
            let mut cols = if geom.is_pointwise() {
                Vec::new()
            } else {
                vec![0.0; geom.col_rows() * plane]
            };
            let in_size = cin * h * wd;
            for b in 0..bsz {
                let xb = &dx[b * in_size..(b + 1) * in_size];
                let colm: &[f64] = if geom.is_pointwise() {
                    xb
                } else {
                    kernels::im2col(xb, &geom, &mut cols);
                    &cols
                };
                kernels::gemm(
                    cout,
                    geom.col_rows(),
                    plane,
                    1.0,
                    dw,
                    false,
                    colm,
                    false,
                    0.0,
                    &mut out[b * cout * plane..(b + 1) * cout * plane],
                );
            }
        }
        let value = Tensor::new(vec![bsz, cout, geom.oh, geom.ow], out)?;
        self.push("conv2d", value, Op::Conv2d { x, w, geom }, &[x, w])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::shape("softmax", format!("axis {axis} invalid for {:?}", t.shape())));
        }
        let (outer, dim, inner) = kernels::split_axis(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * dim * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..dim {
                    max = max.max(src[base + j * inner]);
                }
                let mut sum = 0.0;
                for j in 0..dim {
                    let e = (src[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                let inv = 1.0 / sum;
                for j in 0..dim {
                    out[base + j * inner] *= inv;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("softmax", value, Op::Softmax { x, axis }, &[x])
    }

    /// Normalizes over the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = *t.shape().last().expect("tensors have rank >= 1");
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "last axis {d} vs gamma {:?} / beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let rows = t.numel() / d;
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let src = t.data();
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let op = Op::LayerNorm { x, gamma, beta, xhat, rstd };
        self.push("layer_norm", value, op, &[x, gamma, beta])
    }

    /// Group normalization of `x[B×C×h×w]` with per-channel affine parameters.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 4 || groups == 0 || s[1] % groups != 0 {
            return Err(Error::shape("group_norm", format!("{s:?} with {groups} groups")));
        }
        let (bsz, c, plane) = (s[0], s[1], s[2] * s[3]);
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape("group_norm", format!("affine size must be {c}")));
        }
        let cpg = c / groups;
        let size = cpg * plane;
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let src = t.data();
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; bsz * groups];
        let mut out = vec![0.0; src.len()];
        for blk in 0..bsz * groups {
            let off = blk * size;
            let chunk = &src[off..off + size];
            let mean = chunk.iter().sum::<f64>() / size as f64;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / size as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[blk] = rs;
            let first_channel = (blk % groups) * cpg;
            for (j, v) in chunk.iter().enumerate() {
                let ch = first_channel + j / plane;
                let xh = (v - mean) * rs;
                xhat[off + j] = xh;
                out[off + j] = xh * g[ch] + b[ch];
            }
        }
        let value = Tensor::new(s.to_vec(), out)?;
        let op = Op::GroupNorm { x, gamma, beta, groups, xhat, rstd };
        self.push("group_norm", value, op, &[x, gamma, beta])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let rank = t.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("{perm:?} is not a permutation of rank {rank}")));
        }
        let shape: Vec<usize> = perm.iter().map(|&p| t.shape()[p]).collect();
        let mut out = vec![0.0; t.numel()];
        kernels::permute(t.data(), t.shape(), perm, &mut out);
        let value = Tensor::new(shape, out)?;
        self.push("permute", value, Op::Permute { x, perm: perm.to_vec() }, &[x])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.value(x).rank();
        if rank < 2 {
            return Err(Error::shape("transpose", "need rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .map(|&v| self.shape(v).to_vec())
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} invalid for {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        let op = Op::Concat { inputs: inputs.to_vec(), axis };
        self.push("concat", value, op, inputs)
    }

    /// `len` consecutive entries of `x` along `axis`, starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() || len == 0 || start + len > t.shape()[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {:?}", start + len, t.shape()),
            ));
        }
        let (outer, dim, inner) = kernels::split_axis(t.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        self.push("slice", value, Op::Slice { x, axis, start }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Spatial mean of `x[B×C×h×w]`, giving `B×C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("need B×C×h×w, got {s:?}")));
        }
        let plane = s[2] * s[3];
        let out: Vec<f64> = t
            .data()
            .chunks(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor::new(vec![s[0], s[1]], out)?;
        self.push("global_avg_pool", value, Op::GlobalAvgPool(x), &[x])
    }

    /// Sums window stacks onto canvases.
    ///
    /// `x` is `(B·T)×C×h×w`, image-major (window `t` of image `b` at index
    /// `b·T + t`). Window `t` is added into `out[b, :, r..r+h, c..c+w]` where
    /// `(r, c) = origins[t]`, in origin order. The result is `B×C×H×W`.
    pub fn scatter_windows(&mut self, x: Var, origins: &[(usize, usize)], out_h: usize, out_w: usize) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        let count = origins.len();
        if s.len() != 4 || count == 0 || s[0] % count != 0 {
            return Err(Error::shape(
                "scatter_windows",
                format!("{s:?} is not a stack of {count} windows per image"),
            ));
        }
        let (nb, c, h, w) = (s[0] / count, s[1], s[2], s[3]);
        if origins.iter().any(|&(r, q)| r + h > out_h || q + w > out_w) {
            return Err(Error::shape("scatter_windows", format!("window {h}x{w} leaves the {out_h}x{out_w} canvas")));
        }
        let mut out = vec![0.0; nb * c * out_h * out_w];
        let src = t.data();
        for b in 0..nb {
            for (ti, &(r0, c0)) in origins.iter().enumerate() {
                let win = (b * count + ti) * c * h * w;
                for ch in 0..c {
                    for i in 0..h {
                        let dst = ((b * c + ch) * out_h + r0 + i) * out_w + c0;
                        let from = win + (ch * h + i) * w;
                        for j in 0..w {
                            out[dst + j] += src[from + j];
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![nb, c, out_h, out_w], out)?;
        let op = Op::ScatterWindows { x, origins: origins.to_vec() };
        self.push("scatter_windows", value, op, &[x])
    }

    /// Mean sigmoid cross-entropy over all entries, in the stable logit form
    /// `max(s,0) - s·y + ln(1 + e^{-|s|})`.
    pub fn bce_with_logits(&mut self, x: Var, labels: &[f64]) -> Result<Var> {
        let t = self.value(x);
        if labels.len() != t.numel() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{} labels for scores {:?}", labels.len(), t.shape()),
            ));
        }
        let total: f64 = t
            .data()
            .iter()
            .zip(labels)
            .map(|(&s, &y)| s.max(0.0) - s * y + (-s.abs()).exp().ln_1p())
            .sum();
        let value = Tensor::scalar(total / labels.len() as f64);
        let op = Op::BceWithLogits { x, labels: labels.to_vec() };
        self.push("bce_with_logits", value, op, &[x])
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                if node.requires_grad {
                    grads[idx] = Some(g);
                }
                continue;
            }
            backprop(&self.nodes, idx, &g, &mut grads);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let (Some(g), true) = (g, node.requires_grad) {
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }
}

/// Gradient slot for `v`, created on first use; `None` when `v` needs no gradient.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn add_into(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, f: impl Fn(usize) -> f64) {
    if let Some(acc) = slot(nodes, grads, v) {
        for (i, a) in acc.iter_mut().enumerate() {
            *a += f(i);
        }
    }
}

fn backprop(nodes: &[Node], idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| nodes[v.0].value.data();
    let out = nodes[idx].value.data();
    match &nodes[idx].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            add_into(nodes, grads, *a, |i| g[i]);
            add_into(nodes, grads, *b, |i| g[i]);
        }
        Op::Sub(a, b) => {
            add_into(nodes, grads, *a, |i| g[i]);
            add_into(nodes, grads, *b, |i| -g[i]);
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            add_into(nodes, grads, *a, |i| g[i] * vb[i]);
            add_into(nodes, grads, *b, |i| g[i] * va[i]);
        }
        Op::Div(a, b) => {
            let vb = val(*b);
            add_into(nodes, grads, *a, |i| g[i] / vb[i]);
            add_into(nodes, grads, *b, |i| -g[i] * out[i] / vb[i]);
        }
        Op::Scale(a, s) => add_into(nodes, grads, *a, |i| g[i] * s),
        Op::AddScalar(a) => add_into(nodes, grads, *a, |i| g[i]),
        Op::Relu(a) => {
            let va = val(*a);
            add_into(nodes, grads, *a, |i| if va[i] > 0.0 { g[i] } else { 0.0 });
        }
        Op::Gelu(a) => {
            let va = val(*a);
            add_into(nodes, grads, *a, |i| g[i] * kernels::gelu_grad(va[i]));
        }
        Op::Abs(a) => {
            let va = val(*a);
            add_into(nodes, grads, *a, |i| g[i] * va[i].signum() * (va[i] != 0.0) as u8 as f64);
        }
        &Op::MatMul { a, b, ta, tb, alpha, batch, m, k, n } => {
            let (va, vb) = (val(a), val(b));
            if let Some(ga) = slot(nodes, grads, a) {
                for i in 0..batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let bi = &vb[i * k * n..(i + 1) * k * n];
                    let dst = &mut ga[i * m * k..(i + 1) * m * k];
                    if ta {
                        kernels::gemm(k, n, m, alpha, bi, tb, gi, true, 1.0, dst);
                    } else {
                        kernels::gemm(m, n, k, alpha, gi, false, bi, !tb, 1.0, dst);
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, b) {
                for i in 0..batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = &va[i * m * k..(i + 1) * m * k];
                    let dst = &mut gb[i * k * n..(i + 1) * k * n];
                    if tb {
                        kernels::gemm(n, m, k, alpha, gi, true, ai, ta, 1.0, dst);
                    } else {
                        kernels::gemm(k, m, n, alpha, ai, !ta, gi, false, 1.0, dst);
                    }
                }
            }
        }
        &Op::AddBias { x, bias, axis } => {
            add_into(nodes, grads, x, |i| g[i]);
            if let Some(gb) = slot(nodes, grads, bias) {
                let (_, dim, inner) = kernels::split_axis(nodes[x.0].value.shape(), axis);
                for (i, gi) in g.iter().enumerate() {
                    gb[(i / inner) % dim] += gi;
                }
            }
        }
        &Op::Conv2d { x, w, geom } => conv2d_backward(nodes, grads, g, x, w, &geom),
        &Op::Softmax { x, axis } => {
            if let Some(gx) = slot(nodes, grads, x) {
                let (outer, dim, inner) = kernels::split_axis(nodes[x.0].value.shape(), axis);
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * dim * inner + i;
                        let mut dot = 0.0;
                        for j in 0..dim {
                            dot += g[base + j * inner] * out[base + j * inner];
                        }
                        for j in 0..dim {
                            let p = base + j * inner;
                            gx[p] += out[p] * (g[p] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let d = nodes[gamma.0].value.numel();
            let gm = val(*gamma);
            norm_affine_grads(nodes, grads, g, xhat, *gamma, *beta, |i| i % d);
            if let Some(gx) = slot(nodes, grads, *x) {
                let mut dxhat = vec![0.0; d];
                for (r, &rs) in rstd.iter().enumerate() {
                    let off = r * d;
                    for j in 0..d {
                        dxhat[j] = g[off + j] * gm[j];
                    }
                    normalize_backward(&dxhat, &xhat[off..off + d], rs, &mut gx[off..off + d]);
                }
            }
        }
        Op::GroupNorm { x, gamma, beta, groups, xhat, rstd } => {
            let s = nodes[x.0].value.shape();
            let (c, plane) = (s[1], s[2] * s[3]);
            let cpg = c / groups;
            let size = cpg * plane;
            let gm = val(*gamma);
            norm_affine_grads(nodes, grads, g, xhat, *gamma, *beta, |i| (i / plane) % c);
            if let Some(gx) = slot(nodes, grads, *x) {
                let mut dxhat = vec![0.0; size];
                for (blk, &rs) in rstd.iter().enumerate() {
                    let off = blk * size;
                    let first_channel = (blk % groups) * cpg;
                    for j in 0..size {
                        dxhat[j] = g[off + j] * gm[first_channel + j / plane];
                    }
                    normalize_backward(&dxhat, &xhat[off..off + size], rs, &mut gx[off..off + size]);
                }
            }
        }
        Op::Reshape(x) => add_into(nodes, grads, *x, |i| g[i]),
        Op::Permute { x, perm } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let mut back = vec![0.0; g.len()];
                kernels::permute(g, nodes[idx].value.shape(), &inverse, &mut back);
                gx.iter_mut().zip(&back).for_each(|(a, b)| *a += b);
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = kernels::split_axis(nodes[idx].value.shape(), *axis);
            let mut offset = 0;
            for &v in inputs {
                let len = nodes[v.0].value.shape()[*axis];
                if let Some(gv) = slot(nodes, grads, v) {
                    let chunk = len * inner;
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..][..chunk];
                        gv[o * chunk..(o + 1) * chunk]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, b)| *a += b);
                    }
                }
                offset += len;
            }
        }
        &Op::Slice { x, axis, start } => {
            let len = nodes[idx].value.shape()[axis];
            if let Some(gx) = slot(nodes, grads, x) {
                let (outer, dim, inner) = kernels::split_axis(nodes[x.0].value.shape(), axis);
                for o in 0..outer {
                    let dst = &mut gx[(o * dim + start) * inner..][..len * inner];
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::Sum(x) => add_into(nodes, grads, *x, |_| g[0]),
        Op::Mean(x) => {
            let n = nodes[x.0].value.numel() as f64;
            add_into(nodes, grads, *x, |_| g[0] / n);
        }
        Op::GlobalAvgPool(x) => {
            let s = nodes[x.0].value.shape();
            let plane = s[2] * s[3];
            add_into(nodes, grads, *x, |i| g[i / plane] / plane as f64);
        }
        Op::ScatterWindows { x, origins } => {
            let (s, os) = (nodes[x.0].value.shape(), nodes[idx].value.shape());
            let (count, c, h, w) = (origins.len(), s[1], s[2], s[3]);
            let (out_h, out_w) = (os[2], os[3]);
            if let Some(gx) = slot(nodes, grads, *x) {
                for b in 0..s[0] / count {
                    for (ti, &(r0, c0)) in origins.iter().enumerate() {
                        let win = (b * count + ti) * c * h * w;
                        for ch in 0..c {
                            for i in 0..h {
                                let src = ((b * c + ch) * out_h + r0 + i) * out_w + c0;
                                let dst = win + (ch * h + i) * w;
                                for j in 0..w {
                                    gx[dst + j] += g[src + j];
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::BceWithLogits { x, labels } => {
            let vx = val(*x);
            let n = labels.len() as f64;
            add_into(nodes, grads, *x, |i| g[0] * (kernels::sigmoid(vx[i]) - labels[i]) / n);
        }
    }
}

fn norm_affine_grads(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    g: &[f64],
    xhat: &[f64],
    gamma: Var,
    beta: Var,
    channel: impl Fn(usize) -> usize,
) {
    if let Some(gg) = slot(nodes, grads, gamma) {
        for (i, (gi, xh)) in g.iter().zip(xhat).enumerate() {
            gg[channel(i)] += gi * xh;
        }
    }
    if let Some(gb) = slot(nodes, grads, beta) {
        for (i, gi) in g.iter().enumerate() {
            gb[channel(i)] += gi;
        }
    }
}

/// Adds `dL/dx` for `xhat = (x - mean) * rstd` given `dL/dxhat`.
fn normalize_backward(dxhat: &[f64], xhat: &[f64], rstd: f64, gx: &mut [f64]) {
    let n = dxhat.len() as f64;
    let m1 = dxhat.iter().sum::<f64>() / n;
    let m2 = dxhat.iter().zip(xhat).map(|(d, x)| d * x).sum::<f64>() / n;
    for ((gxj, d), x) in gx.iter_mut().zip(dxhat).zip(xhat) {
        *gxj += rstd * (d - m1 - x * m2);
    }
}

fn conv2d_backward(nodes: &[Node], grads: &mut [Option<Vec<f64>>], g: &[f64], x: Var, w: Var, geom: &ConvGeom) {
    let sx = nodes[x.0].value.shape();
    let sw = nodes[w.0].value.shape();
    let (bsz, cout) = (sx[0], sw[0]);
    let (rows, plane) = (geom.col_rows(), geom.col_cols());
    let in_size = geom.cin * geom.h * geom.w;
    let (vx, vw) = (nodes[x.0].value.data(), nodes[w.0].value.data());
    let mut cols = vec![0.0; rows * plane];
    if nodes[w.0].requires_grad {
        for b in 0..bsz {
            let xb = &vx[b * in_size..(b + 1) * in_size];
            let colm: &[f64] = if geom.is_pointwise() {
                xb
            } else {
                kernels::im2col(xb, geom, &mut cols);
                &cols
            };
            let gw = slot(nodes, grads, w).expect("checked requires_grad");
            kernels::gemm(cout, plane, rows, 1.0, &g[b * cout * plane..(b + 1) * cout * plane], false, colm, true, 1.0, gw);
        }
    }
    if let Some(gx) = slot(nodes, grads, x) {
        for b in 0..bsz {
            let gb = &g[b * cout * plane..(b + 1) * cout * plane];
            let dst = &mut gx[b * in_size..(b + 1) * in_size];
            if geom.is_pointwise() {
                kernels::gemm(rows, cout, plane, 1.0, vw, true, gb, false, 1.0, dst);
            } else {
                kernels::gemm(rows, cout, plane, 1.0, vw, true, gb, false, 0.0, &mut cols);
                kernels::col2im_add(&cols, geom, dst);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_values() {
        let mut g = Graph::new();
        let i2 = g.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.input(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = g.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.input(t(&[2, 1], &[5.0, 6.0]));
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(p), &[2, 1]);
        assert_eq!(g.value(p).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_mismatch_reports_both_shapes() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[4, 5]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn conv2d_identity_constant_and_shape() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64));
        let one = g.input(Tensor::full(&[1, 1, 1, 1], 1.0));
        let y = g.conv2d(x, one, 1, 0).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let c = g.input(Tensor::full(&[1, 1, 5, 5], 2.0));
        let k = g.input(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(c, k, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 3, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 18.0));

        let x = g.input(Tensor::zeros(&[1, 2, 8, 8]));
        let k = g.input(Tensor::zeros(&[3, 2, 3, 3]));
        let y = g.conv2d(x, k, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 4, 4]);

        let small = g.input(Tensor::zeros(&[1, 1, 2, 2]));
        let big = g.input(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(matches!(g.conv2d(small, big, 1, 0), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[1.0, 1.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let x = g.input(t(&[2], &[0.0, 3f64.ln()]));
        let y = g.softmax(x, 0).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);

        assert!(g.softmax(x, 1).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let ones = g.input(Tensor::full(&[2], 1.0));
        let zeros = g.input(Tensor::zeros(&[2]));
        let c = g.input(t(&[2], &[4.0, 4.0]));
        let y = g.layer_norm(c, ones, zeros, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);

        let x = g.input(t(&[2], &[1.0, 3.0]));
        let y = g.layer_norm(x, ones, zeros, 1e-12).unwrap();
        let d = g.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-9 && (d[1] - 1.0).abs() < 1e-9);

        let b = g.input(t(&[2], &[0.7, 0.7]));
        let y = g.layer_norm(x, zeros, b, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.7, 0.7]);

        let bad = g.input(Tensor::zeros(&[3]));
        assert!(g.layer_norm(x, bad, zeros, 1e-5).is_err());
    }

    #[test]
    fn global_avg_pool_examples() {
        let mut g = Graph::new();
        let x = g.param(t(&[1, 1, 2, 2], &[1.0, 3.0, 5.0, 7.0]));
        let p = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(p).data(), &[4.0]);
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn backward_quadratic_and_accumulation() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
        g.zero_grad();
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, -8.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_values_are_an_error() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[1], 1e308));
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite { op: "scale" })));
    }

    #[test]
    fn bce_is_stable_and_matches_closed_form() {
        let mut g = Graph::new();
        let s = g.input(Tensor::zeros(&[2, 3]));
        let l = g.bce_with_logits(s, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((g.value(l).data()[0] - 2f64.ln()).abs() < 1e-15);
        let s = g.input(Tensor::full(&[1], 50.0));
        let l = g.bce_with_logits(s, &[1.0]).unwrap();
        assert!(g.value(l).data()[0] < 1e-20);
        let s = g.input(Tensor::full(&[1], -800.0));
        let l = g.bce_with_logits(s, &[0.0]).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);
    }

    #[test]
    fn scatter_windows_sums_overlaps() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[2, 1, 2, 2], 1.0));
        let y = g.scatter_windows(x, &[(0, 0), (0, 1)], 2, 3).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 1.0, 1.0, 2.0, 1.0]);
    }
}
