//! Dense compute kernels behind the graph operations.

use crate::Tensor;

pub fn conv2d_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(
        input + 2 * pad >= kernel,
        "kernel {kernel} larger than padded input {input}+2*{pad}"
    );
    (input + 2 * pad - kernel) / stride + 1
}

/// `c = a(m×k) · b(k×n) + beta·c`, all row-major with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    // SAFETY: callers pass slices covering the full strided extents; the
    // output is a dense row-major m×n block.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let ncol = g.cols();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let out = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut out[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let ncol = g.cols();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn geometry(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> (usize, usize, ConvGeom) {
    let (n, c_in, h, wd) = x.dims4();
    let (c_out, wc_in, kh, kw) = w.dims4();
    assert_eq!(c_in, wc_in, "conv2d: input has {c_in} channels, weight expects {wc_in}");
    assert!(stride >= 1, "conv2d: stride must be positive");
    let ho = conv2d_output_size(h, kh, stride, pad);
    let wo = conv2d_output_size(wd, kw, stride, pad);
    (
        n,
        c_out,
        ConvGeom {
            c_in,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        },
    )
}

pub fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (n, c_out, g) = geometry(x, w, stride, pad);
    let (k, ncol) = (g.rows(), g.cols());
    let mut out = Tensor::zeros(&[n, c_out, g.ho, g.wo]);
    let mut cols = vec![0.0; k * ncol];
    let per_out = c_out * ncol;
    for i in 0..n {
        im2col(&g, x.sample(i), &mut cols);
        let dst = &mut out.data_mut()[i * per_out..(i + 1) * per_out];
        gemm(c_out, k, ncol, w.data(), k as isize, 1, &cols, ncol as isize, 1, 0.0, dst);
        if let Some(b) = bias {
            for (co, chunk) in dst.chunks_mut(ncol).enumerate() {
                let bv = b.data()[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Returns `(dx, dw, dbias)`; `dx` is skipped when `need_dx` is false.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor>, Option<Tensor>, Tensor) {
    let (n, c_out, g) = geometry(x, w, stride, pad);
    let (k, ncol) = (g.rows(), g.cols());
    let per_out = c_out * ncol;
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    let mut db = Tensor::zeros(&[c_out]);
    let mut cols = vec![0.0; k * ncol];
    let per_in = g.c_in * g.h * g.w;
    for i in 0..n {
        let go = &grad_out.data()[i * per_out..(i + 1) * per_out];
        for (co, chunk) in go.chunks(ncol).enumerate() {
            db.data_mut()[co] += chunk.iter().sum::<f64>();
        }
        if let Some(dw) = dw.as_mut() {
            im2col(&g, x.sample(i), &mut cols);
            // dw(c_out×k) += go(c_out×ncol) · colsᵀ(ncol×k)
            gemm(
                c_out,
                ncol,
                k,
                go,
                ncol as isize,
                1,
                &cols,
                1,
                ncol as isize,
                1.0,
                dw.data_mut(),
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcols(k×ncol) = wᵀ(k×c_out) · go(c_out×ncol)
            gemm(k, c_out, ncol, w.data(), 1, k as isize, go, ncol as isize, 1, 0.0, &mut cols);
            col2im(&g, &cols, &mut dx.data_mut()[i * per_in..(i + 1) * per_in]);
        }
    }
    (dx, dw, db)
}

/// Per-channel statistics used by a batch-norm node.
#[derive(Clone, Debug)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    /// Biased batch variance (training) or running variance (evaluation).
    pub var: Vec<f64>,
    pub eps: f64,
}

impl BatchNormStats {
    /// Biased per-channel statistics of an NCHW batch.
    pub fn from_batch(x: &Tensor, eps: f64) -> Self {
        let (n, c, h, w) = x.dims4();
        let m = (n * h * w) as f64;
        let hw = h * w;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for i in 0..n {
            for (ch, mu) in mean.iter_mut().enumerate() {
                let s = &x.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                *mu += s.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for i in 0..n {
            for ch in 0..c {
                let s = &x.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                var[ch] += s.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        BatchNormStats { mean, var, eps }
    }

    pub fn invstd(&self) -> Vec<f64> {
        self.var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect()
    }
}

pub fn batch_norm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &BatchNormStats,
) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let invstd = stats.invstd();
    let mut out = x.clone();
    for i in 0..n {
        for ch in 0..c {
            let (g, b, mu, is) = (gamma.data()[ch], beta.data()[ch], stats.mean[ch], invstd[ch]);
            let s = &mut out.data_mut()[(i * c + ch) * hw..(i * c + ch + 1) * hw];
            s.iter_mut().for_each(|v| *v = g * (*v - mu) * is + b);
        }
    }
    out
}

/// Returns `(dx, dgamma, dbeta)`. With `training` the statistics are treated
/// as functions of `x`; otherwise they are constants.
pub fn batch_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    stats: &BatchNormStats,
    grad_out: &Tensor,
    training: bool,
) -> (Tensor, Tensor, Tensor) {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let m = (n * hw) as f64;
    let invstd = stats.invstd();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * hw;
            let xs = &x.data()[off..off + hw];
            let gs = &grad_out.data()[off..off + hw];
            for (xv, gv) in xs.iter().zip(gs) {
                dbeta[ch] += gv;
                dgamma[ch] += gv * (xv - stats.mean[ch]) * invstd[ch];
            }
        }
    }
    let mut dx = Tensor::zeros(x.shape());
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * hw;
            let g = gamma.data()[ch];
            let is = invstd[ch];
            let mu = stats.mean[ch];
            for j in 0..hw {
                let gv = grad_out.data()[off + j];
                dx.data_mut()[off + j] = if training {
                    let xhat = (x.data()[off + j] - mu) * is;
                    g * is * (gv - dbeta[ch] / m - xhat * dgamma[ch] / m)
                } else {
                    g * is * gv
                };
            }
        }
    }
    (dx, Tensor::new(&[c], dgamma), Tensor::new(&[c], dbeta))
}

pub fn upsample2x_forward(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data_mut()[p * 4 * h * w..(p + 1) * 4 * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward(grad_out: &Tensor, in_shape: &[usize]) -> Tensor {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let mut dx = Tensor::zeros(in_shape);
    for p in 0..n * c {
        let src = &grad_out.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
        let dst = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
            }
        }
    }
    dx
}

/// Top-left `h×w` window of every plane.
pub fn crop_forward(x: &Tensor, h: usize, w: usize) -> Tensor {
    let (n, c, ih, iw) = x.dims4();
    assert!(h <= ih && w <= iw, "crop {h}x{w} exceeds input {ih}x{iw}");
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for p in 0..n * c {
        for y in 0..h {
            let src = &x.data()[(p * ih + y) * iw..(p * ih + y) * iw + w];
            out.data_mut()[(p * h + y) * w..(p * h + y + 1) * w].copy_from_slice(src);
        }
    }
    out
}

pub fn crop_backward(grad_out: &Tensor, in_shape: &[usize]) -> Tensor {
    let (_, _, h, w) = grad_out.dims4();
    let (n, c, ih, iw) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let mut dx = Tensor::zeros(in_shape);
    for p in 0..n * c {
        for y in 0..h {
            let src = &grad_out.data()[(p * h + y) * w..(p * h + y + 1) * w];
            dx.data_mut()[(p * ih + y) * iw..(p * ih + y) * iw + w].copy_from_slice(src);
        }
    }
    dx
}

/// `x(n×d) · wᵀ` for `w(c×d)`.
pub fn matmul_nt(x: &Tensor, w: &Tensor) -> Tensor {
    let (n, d) = x.dims2();
    let (c, wd) = w.dims2();
    assert_eq!(d, wd, "matmul: input dim {d} vs weight dim {wd}");
    let mut out = Tensor::zeros(&[n, c]);
    gemm(n, d, c, x.data(), d as isize, 1, w.data(), 1, d as isize, 0.0, out.data_mut());
    out
}

/// Gradients of `x · wᵀ`: `(dx = g·w, dw = gᵀ·x)`.
pub fn matmul_nt_backward(x: &Tensor, w: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (n, d) = x.dims2();
    let (c, _) = w.dims2();
    let mut dx = Tensor::zeros(&[n, d]);
    gemm(n, c, d, g.data(), c as isize, 1, w.data(), d as isize, 1, 0.0, dx.data_mut());
    let mut dw = Tensor::zeros(&[c, d]);
    gemm(c, n, d, g.data(), 1, c as isize, x.data(), d as isize, 1, 0.0, dw.data_mut());
    (dx, dw)
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (n, c) = x.dims2();
    let mut out = x.clone();
    for i in 0..n {
        let row = &mut out.data_mut()[i * c..(i + 1) * c];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, ci, h, wd) = x.dims4();
        let (co, _, kh, kw) = w.dims4();
        let ho = conv2d_output_size(h, kh, stride, pad);
        let wo = conv2d_output_size(wd, kw, stride, pad);
        let mut out = Tensor::zeros(&[n, co, ho, wo]);
        for b in 0..n {
            for o in 0..co {
                for y in 0..ho {
                    for xx in 0..wo {
                        let mut s = 0.0;
                        for c in 0..ci {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = (y * stride + i) as isize - pad as isize;
                                    let ix = (xx * stride + j) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        s += x.data()[((b * ci + c) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((o * ci + c) * kh + i) * kw + j];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((b * co + o) * ho + y) * wo + xx] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let x = Tensor::from_fn(&[2, 3, 7, 5], |i| ((i * 37 % 11) as f64 - 5.0) / 3.0);
        let w = Tensor::from_fn(&[4, 3, 3, 3], |i| ((i * 13 % 7) as f64 - 3.0) / 5.0);
        for (stride, pad) in [(1, 1), (2, 1), (2, 0), (1, 0)] {
            let a = conv2d_forward(&x, &w, None, stride, pad);
            let b = naive_conv(&x, &w, stride, pad);
            assert_eq!(a.shape(), b.shape());
            for (p, q) in a.data().iter().zip(b.data()) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn output_size() {
        assert_eq!(conv2d_output_size(72, 3, 2, 1), 36);
        assert_eq!(conv2d_output_size(9, 3, 2, 1), 5);
        assert_eq!(conv2d_output_size(5, 3, 1, 1), 5);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 1000.0, 1000.0, -1000.0]);
        let p = softmax_rows(&x);
        for i in 0..2 {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!((p.row(1)[0] - 0.5).abs() < 1e-12);
    }
}
