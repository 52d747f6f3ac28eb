//! Raw numeric kernels shared by the forward and backward passes.

/// `c = alpha * op(a) * op(b) + beta * c` for row-major `c[m×n]`.
///
/// `op(a)` is `m×k`; when `ta` is set, `a` is stored as its `k×m` transpose.
/// Likewise `op(b)` is `k×n`, stored `n×k` when `tb` is set.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m) } else { (k, 1) };
    let (rsb, csb) = if tb { (1, k) } else { (n, 1) };
    // SAFETY: bounds asserted above; the strides address exactly those extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// A 1×1, stride 1, unpadded convolution reads its input as the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let ncols = g.col_cols();
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oi in 0..g.oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oi * g.ow..(oi + 1) * g.ow];
                    if ii < 0 || ii >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + ii as usize) * g.w..][..g.w];
                    for (oj, slot) in out_row.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *slot = if jj < 0 || jj >= g.w as isize {
                            0.0
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let ncols = g.col_cols();
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oi in 0..g.oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst = &mut x[(c * g.h + ii as usize) * g.w..][..g.w];
                    for oj in 0..g.ow {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && (jj as usize) < g.w {
                            dst[jj as usize] += src[oi * g.ow + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Splits a shape around `axis` into `(outer, dim, inner)` extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Copies `data` (laid out as `shape`) into the axis order given by `perm`.
pub(crate) fn permute(data: &[f64], shape: &[usize], perm: &[usize], out: &mut [f64]) {
    let rank = shape.len();
    let in_strides = crate::tensor::strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let last = out_shape[rank - 1];
    let last_stride = strides[rank - 1];
    let mut index = vec![0usize; rank];
    let mut o = 0;
    while o < out.len() {
        let base: usize = index[..rank - 1]
            .iter()
            .zip(&strides)
            .map(|(i, s)| i * s)
            .sum();
        for j in 0..last {
            out[o + j] = data[base + j * last_stride];
        }
        o += last;
        for d in (0..rank - 1).rev() {
            index[d] += 1;
            if index[d] < out_shape[d] {
                break;
            }
            index[d] = 0;
        }
    }
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
