//! Forward/backward kernels. Convolutions lower to GEMM through an
//! `im2col` buffer; all products go through `matrixmultiply`, which is
//! single-threaded and therefore bit-reproducible.

use super::{check_shape, NnError, Result, Tensor};

fn max_offset(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    (rows - 1) * rs + (cols - 1) * cs
}

/// `c[m x n] = beta * c + a[m x k] * b[k x n]` with explicit strides.
/// `c` is contiguous row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(max_offset(m, k, rsa, csa) < a.len(), "gemm: A out of bounds");
    assert!(max_offset(k, n, rsb, csb) < b.len(), "gemm: B out of bounds");
    // SAFETY: bounds of all three operands are checked above; `c` does not
    // alias `a` or `b` because it is a unique borrow.
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

/// `floor((n - k) / stride) + 1`, the valid-padding output length.
pub fn conv_output_len(n: usize, k: usize, stride: usize) -> usize {
    (n - k) / stride + 1
}

/// Batched dense forward: `x [b, n_in]`, `w [n_out, n_in]` -> `[b, n_out]`.
pub(crate) fn dense_batch(x: &[f64], batch: usize, w: &Tensor, bias: &Tensor) -> Vec<f64> {
    let (n_out, n_in) = (w.shape()[0], w.shape()[1]);
    let mut out = Vec::with_capacity(batch * n_out);
    for _ in 0..batch {
        out.extend_from_slice(bias.data());
    }
    gemm(batch, n_in, n_out, x, (n_in, 1), w.data(), (1, n_in), 1.0, &mut out);
    out
}

/// Returns `(dW, db, dx)`; `dx` only when requested.
pub(crate) fn dense_batch_backward(
    x: &[f64],
    dy: &[f64],
    batch: usize,
    w: &Tensor,
    want_dx: bool,
) -> (Vec<f64>, Vec<f64>, Option<Vec<f64>>) {
    let (n_out, n_in) = (w.shape()[0], w.shape()[1]);
    let mut dw = vec![0.0; n_out * n_in];
    gemm(n_out, batch, n_in, dy, (1, n_out), x, (n_in, 1), 0.0, &mut dw);
    let mut db = vec![0.0; n_out];
    for row in dy.chunks_exact(n_out) {
        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
    }
    let dx = want_dx.then(|| {
        let mut dx = vec![0.0; batch * n_in];
        gemm(batch, n_out, n_in, dy, (n_out, 1), w.data(), (n_in, 1), 0.0, &mut dx);
        dx
    });
    (dw, db, dx)
}

/// Geometry of one convolution over a `[h, w, c]` sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
    pub out_c: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize) -> Result<Self> {
        let (&[h, w, c], &[out_c, kh, kw, kc]) = (input, kernel) else {
            return Err(NnError::ShapeMismatch {
                context: "conv2d rank",
                expected: vec![3, 4],
                found: vec![input.len(), kernel.len()],
            });
        };
        check_shape("conv2d channels", &[c], &[kc])?;
        if stride == 0 {
            return Err(NnError::InvalidTensor("stride must be positive".into()));
        }
        if kh > h || kw > w {
            return Err(NnError::KernelLargerThanInput { kernel: (kh, kw), input: (h, w) });
        }
        Ok(Self {
            h,
            w,
            c,
            kh,
            kw,
            out_c,
            stride,
            oh: conv_output_len(h, kh, stride),
            ow: conv_output_len(w, kw, stride),
        })
    }

    pub fn patch(&self) -> usize {
        self.kh * self.kw * self.c
    }

    pub fn positions(&self) -> usize {
        self.oh * self.ow
    }

    pub fn in_len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.oh, self.ow, self.out_c]
    }
}

/// Unfolds every receptive field of one sample into a row of `col`
/// (`[oh * ow, kh * kw * c]`).
fn im2col_sample(sample: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let k = g.patch();
    let run = g.kw * g.c;
    let mut rows = col.chunks_exact_mut(k);
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = rows.next().expect("col sized for every position");
            for ky in 0..g.kh {
                let src = ((oy * g.stride + ky) * g.w + ox * g.stride) * g.c;
                row[ky * run..(ky + 1) * run].copy_from_slice(&sample[src..src + run]);
            }
        }
    }
}

/// Scatter-adds one sample's column gradients onto its input grid.
fn col2im_sample(dcol: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let k = g.patch();
    let run = g.kw * g.c;
    let mut rows = dcol.chunks_exact(k);
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = rows.next().expect("dcol sized for every position");
            for ky in 0..g.kh {
                let dst = ((oy * g.stride + ky) * g.w + ox * g.stride) * g.c;
                dx[dst..dst + run].iter_mut().zip(&row[ky * run..(ky + 1) * run]).for_each(|(d, s)| *d += s);
            }
        }
    }
}

/// Batched im2col: `[b * oh * ow, kh * kw * c]`.
#[cfg(test)]
pub(crate) fn im2col(x: &[f64], batch: usize, g: &ConvGeom) -> Vec<f64> {
    let per = g.positions() * g.patch();
    let mut col = vec![0.0; batch * per];
    for (sample, chunk) in x.chunks_exact(g.in_len()).take(batch).zip(col.chunks_exact_mut(per)) {
        im2col_sample(sample, g, chunk);
    }
    col
}

/// Adjoint of [`im2col`].
#[cfg(test)]
pub(crate) fn col2im(dcol: &[f64], batch: usize, g: &ConvGeom) -> Vec<f64> {
    let per = g.positions() * g.patch();
    let mut dx = vec![0.0; batch * g.in_len()];
    for (chunk, sample) in dcol.chunks_exact(per).zip(dx.chunks_exact_mut(g.in_len())).take(batch) {
        col2im_sample(chunk, g, sample);
    }
    dx
}

/// Batched convolution `[b, oh, ow, out_c]`. The im2col buffer is built one
/// sample at a time so it stays small and cache resident.
pub(crate) fn conv_batch(x: &[f64], batch: usize, g: &ConvGeom, kernel: &Tensor, bias: &Tensor) -> Vec<f64> {
    let (p, k) = (g.positions(), g.patch());
    let mut out = Vec::with_capacity(batch * p * g.out_c);
    for _ in 0..batch * p {
        out.extend_from_slice(bias.data());
    }
    let mut col = vec![0.0; p * k];
    for (sample, dst) in x.chunks_exact(g.in_len()).zip(out.chunks_exact_mut(p * g.out_c)) {
        im2col_sample(sample, g, &mut col);
        gemm(p, k, g.out_c, &col, (k, 1), kernel.data(), (1, k), 1.0, dst);
    }
    out
}

/// Returns `(dKernel, db, dx)` for input `x`; `dx` only when requested.
pub(crate) fn conv_batch_backward(
    x: &[f64],
    dy: &[f64],
    batch: usize,
    g: &ConvGeom,
    kernel: &Tensor,
    want_dx: bool,
) -> (Vec<f64>, Vec<f64>, Option<Vec<f64>>) {
    let (p, k) = (g.positions(), g.patch());
    let mut dk = vec![0.0; g.out_c * k];
    let mut db = vec![0.0; g.out_c];
    for row in dy.chunks_exact(g.out_c) {
        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
    }
    let mut col = vec![0.0; p * k];
    let mut dcol = if want_dx { vec![0.0; p * k] } else { Vec::new() };
    let mut dx = if want_dx { vec![0.0; batch * g.in_len()] } else { Vec::new() };
    for b in 0..batch {
        let dyb = &dy[b * p * g.out_c..(b + 1) * p * g.out_c];
        im2col_sample(&x[b * g.in_len()..(b + 1) * g.in_len()], g, &mut col);
        gemm(g.out_c, p, k, dyb, (1, g.out_c), &col, (k, 1), 1.0, &mut dk);
        if want_dx {
            gemm(p, g.out_c, k, dyb, (g.out_c, 1), kernel.data(), (k, 1), 0.0, &mut dcol);
            col2im_sample(&dcol, g, &mut dx[b * g.in_len()..(b + 1) * g.in_len()]);
        }
    }
    (dk, db, want_dx.then_some(dx))
}

/// `out_j = sum_i W[j, i] * x_i + b_j` for a single sample.
pub fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let &[n_out, n_in] = w.shape() else {
        return Err(NnError::ShapeMismatch {
            context: "dense weight rank",
            expected: vec![2],
            found: vec![w.shape().len()],
        });
    };
    check_shape("dense input", &[n_in], x.shape())?;
    check_shape("dense bias", &[n_out], b.shape())?;
    Ok(Tensor::from_parts(vec![n_out], dense_batch(x.data(), 1, w, b)))
}

/// Valid-padding cross-correlation plus bias for one `[h, w, c_in]` sample
/// with kernel `[c_out, kh, kw, c_in]`.
pub fn conv2d_forward(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize) -> Result<Tensor> {
    let g = ConvGeom::new(x.shape(), k.shape(), stride)?;
    check_shape("conv2d bias", &[g.out_c], b.shape())?;
    Ok(Tensor::from_parts(g.out_shape(), conv_batch(x.data(), 1, &g, k, b)))
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| v.max(0.0)).collect())
}

fn residual_check(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(NnError::ShapeMismatch {
            context: "loss",
            expected: vec![target.len()],
            found: vec![pred.len()],
        });
    }
    if pred.is_empty() {
        return Err(NnError::EmptyInput);
    }
    Ok(())
}

/// `(1/n) * sum (pred_i - target_i)^2`.
pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    residual_check(pred, target)?;
    let sum: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / pred.len() as f64)
}

/// Gradient of [`mse`] with respect to `pred`.
pub fn mse_grad(pred: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    residual_check(pred, target)?;
    let scale = 2.0 / pred.len() as f64;
    Ok(pred.iter().zip(target).map(|(p, t)| scale * (p - t)).collect())
}

pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    mse(pred, target).map(f64::sqrt)
}
