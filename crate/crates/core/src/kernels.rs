//! Raw numeric kernels over row-major slices.
//!
//! Every reduction runs in ascending index order so results are
//! bit-reproducible, and row `i` of a batched kernel depends only on row `i`
//! of its input. The incremental decoder relies on the latter for bit-exact
//! parity with full recomputation.

use alloc::vec;
use alloc::vec::Vec;

/// `a [m×k] · b [k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cij, &bpj) in row.iter_mut().zip(brow) {
                *cij += aip * bpj;
            }
        }
    }
    c
}

/// `a [m×k] · bᵀ` where `b` is `[n×k]`.
pub fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// `aᵀ · b` where `a` is `[k×m]` and `b` is `[k×n]`.
pub fn matmul_at(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            let row = &mut c[i * n..(i + 1) * n];
            for (cij, &bpj) in row.iter_mut().zip(brow) {
                *cij += api * bpj;
            }
        }
    }
    c
}

/// Splits a shape around `axis` into `(outer, len, inner)` strides.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Max-subtracted softmax along one axis.
pub fn softmax(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..len {
                max = max.max(x[idx(j)]);
            }
            let mut sum = 0.0;
            for j in 0..len {
                let e = libm::exp(x[idx(j)] - max);
                y[idx(j)] = e;
                sum += e;
            }
            for j in 0..len {
                y[idx(j)] /= sum;
            }
        }
    }
    y
}

/// Row softmax over the allowed entries of a `[rows×cols]` matrix.
/// Forbidden entries get probability exactly zero. Returns the first row
/// without any allowed entry as an error.
pub fn masked_softmax_rows(
    x: &[f64],
    allowed: &[bool],
    rows: usize,
    cols: usize,
) -> Result<Vec<f64>, usize> {
    let mut y = vec![0.0; x.len()];
    for r in 0..rows {
        let xs = &x[r * cols..(r + 1) * cols];
        let ok = &allowed[r * cols..(r + 1) * cols];
        let mut max = f64::NEG_INFINITY;
        let mut any = false;
        for (v, &a) in xs.iter().zip(ok) {
            if a {
                any = true;
                max = max.max(*v);
            }
        }
        if !any {
            return Err(r);
        }
        let ys = &mut y[r * cols..(r + 1) * cols];
        let mut sum = 0.0;
        for ((out, v), &a) in ys.iter_mut().zip(xs).zip(ok) {
            if a {
                let e = libm::exp(v - max);
                *out = e;
                sum += e;
            }
        }
        for (out, &a) in ys.iter_mut().zip(ok) {
            if a {
                *out /= sum;
            }
        }
    }
    Ok(y)
}

/// Natural log of the softmax of one row.
pub fn log_softmax_row(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &v in x {
        sum += libm::exp(v - max);
    }
    let lse = max + libm::log(sum);
    x.iter().map(|&v| v - lse).collect()
}

/// Per-row layer normalization; returns the output together with the
/// per-row mean and reciprocal standard deviation.
pub fn layer_norm_rows(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    rows: usize,
    cols: usize,
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; x.len()];
    let mut means = vec![0.0; rows];
    let mut rstds = vec![0.0; rows];
    let n = cols as f64;
    for r in 0..rows {
        let xs = &x[r * cols..(r + 1) * cols];
        let mean = xs.iter().fold(0.0, |a, &v| a + v) / n;
        let var = xs.iter().fold(0.0, |a, &v| a + (v - mean) * (v - mean)) / n;
        let rstd = 1.0 / libm::sqrt(var + eps);
        for c in 0..cols {
            y[r * cols + c] = (xs[c] - mean) * rstd * gain[c] + bias[c];
        }
        means[r] = mean;
        rstds[r] = rstd;
    }
    (y, means, rstds)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = libm::tanh(u);
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Geometry of a single-image 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Output extents, or `None` when the kernel does not fit.
    pub fn out_hw(&self) -> Option<(usize, usize)> {
        let ph = self.h + 2 * self.pad;
        let pw = self.w + 2 * self.pad;
        if self.stride == 0 || self.kh > ph || self.kw > pw {
            return None;
        }
        Some(((ph - self.kh) / self.stride + 1, (pw - self.kw) / self.stride + 1))
    }
}

pub fn conv2d(x: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = g.out_hw().expect("conv geometry checked by caller");
    let mut y = vec![0.0; g.c_out * oh * ow];
    for co in 0..g.c_out {
        let yplane = &mut y[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..g.c_in {
            let xplane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let kv = k[((co * g.c_in + ci) * g.kh + ki) * g.kw + kj];
                    for oi in 0..oh {
                        let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                        if ii < 0 || ii >= g.h as isize {
                            continue;
                        }
                        let xrow = &xplane[ii as usize * g.w..(ii as usize + 1) * g.w];
                        let yrow = &mut yplane[oi * ow..(oi + 1) * ow];
                        for (oj, yv) in yrow.iter_mut().enumerate() {
                            let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                            if jj >= 0 && jj < g.w as isize {
                                *yv += kv * xrow[jj as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Gradients of `conv2d` with respect to input and kernel.
pub fn conv2d_backward(x: &[f64], k: &[f64], gy: &[f64], g: &ConvGeom) -> (Vec<f64>, Vec<f64>) {
    let (oh, ow) = g.out_hw().expect("conv geometry checked by caller");
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    for co in 0..g.c_out {
        let gplane = &gy[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..g.c_in {
            let base = ci * g.h * g.w;
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let kidx = ((co * g.c_in + ci) * g.kh + ki) * g.kw + kj;
                    let kv = k[kidx];
                    let mut acc = 0.0;
                    for oi in 0..oh {
                        let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                        if ii < 0 || ii >= g.h as isize {
                            continue;
                        }
                        for oj in 0..ow {
                            let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                            if jj < 0 || jj >= g.w as isize {
                                continue;
                            }
                            let xi = base + ii as usize * g.w + jj as usize;
                            let gv = gplane[oi * ow + oj];
                            acc += gv * x[xi];
                            gx[xi] += gv * kv;
                        }
                    }
                    gk[kidx] += acc;
                }
            }
        }
    }
    (gx, gk)
}

/// Rounds to the nearest IEEE binary16 value (overflow becomes infinite).
pub fn round_half(x: f64) -> f64 {
    half::f16::from_f64(x).to_f64()
}
