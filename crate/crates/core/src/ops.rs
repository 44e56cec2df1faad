//! Forward and backward kernels on plain tensors.
//!
//! Every reduction runs in a fixed loop order so repeated runs are bit-identical.
//! The autograd tape calls these same functions, so eager and recorded forwards
//! agree exactly.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl Conv2dGeometry {
    pub fn infer(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected 4-d input and kernel, got {:?} and {:?}", input, kernel),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let (n, c1, h, w) = (input[0], input[1], input[2], input[3]);
        let (c2, kc1, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if c1 != kc1 {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input has {} channels (shape {:?}) but kernel expects {} (shape {:?})",
                    c1, input, kc1, kernel
                ),
            ));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding || kh == 0 || kw == 0 {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "kernel {}x{} does not fit padded input {}x{}",
                    kh,
                    kw,
                    h + 2 * padding,
                    w + 2 * padding
                ),
            ));
        }
        Ok(Self {
            batch: n,
            in_channels: c1,
            out_channels: c2,
            height: h,
            width: w,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_height: (h + 2 * padding - kh) / stride + 1,
            out_width: (w + 2 * padding - kw) / stride + 1,
        })
    }

    /// Output positions `o` along one axis with `o*stride + k - padding` inside `[0, extent)`.
    fn valid_range(&self, k: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let s = self.stride;
        let p = self.padding;
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        // o*s + k - p <= extent - 1  <=>  o <= (extent - 1 + p - k) / s
        let hi = if extent + p > k {
            ((extent - 1 + p - k) / s + 1).min(out_extent)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Cross-correlation (no kernel flip) with zero padding.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, stride: usize, padding: usize) -> Result<Tensor> {
    let g = Conv2dGeometry::infer(input.shape(), kernel.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [g.out_channels] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?} for {} output channels", b.shape(), g.out_channels),
            ));
        }
    }
    let cols = im2col(&g, input.data());
    let q = g.batch * g.out_height * g.out_width;
    let j = g.in_channels * g.kernel_h * g.kernel_w;
    let w = kernel.data();
    // y[co, q] = sum_j w[co, j] * cols[j, q]
    let mut y = vec![0.0; g.out_channels * q];
    for co in 0..g.out_channels {
        let yrow = &mut y[co * q..][..q];
        if let Some(b) = bias {
            yrow.fill(b.data()[co]);
        }
        let wrow = &w[co * j..][..j];
        for (jj, &wv) in wrow.iter().enumerate() {
            let crow = &cols[jj * q..][..q];
            for (o, &c) in yrow.iter_mut().zip(crow) {
                *o += wv * c;
            }
        }
    }
    let out = channel_major_to_nchw(&y, g.batch, g.out_channels, g.out_height * g.out_width);
    Tensor::new(vec![g.batch, g.out_channels, g.out_height, g.out_width], out)
}

/// Patch matrix `[C1*KH*KW, N*OH*OW]`; padded taps are zero.
fn im2col(g: &Conv2dGeometry, x: &[f64]) -> Vec<f64> {
    let out_plane = g.out_height * g.out_width;
    let in_plane = g.height * g.width;
    let q = g.batch * out_plane;
    let mut cols = vec![0.0; g.in_channels * g.kernel_h * g.kernel_w * q];
    for ci in 0..g.in_channels {
        for kh in 0..g.kernel_h {
            let (oh_lo, oh_hi) = g.valid_range(kh, g.height, g.out_height);
            for kw in 0..g.kernel_w {
                let (ow_lo, ow_hi) = g.valid_range(kw, g.width, g.out_width);
                let row = (ci * g.kernel_h + kh) * g.kernel_w + kw;
                let crow = &mut cols[row * q..][..q];
                for n in 0..g.batch {
                    let xin = &x[(n * g.in_channels + ci) * in_plane..][..in_plane];
                    let cplane = &mut crow[n * out_plane..][..out_plane];
                    for oh in oh_lo..oh_hi {
                        let ih = oh * g.stride + kh - g.padding;
                        let xrow = &xin[ih * g.width..][..g.width];
                        let dst = &mut cplane[oh * g.out_width..][..g.out_width];
                        if g.stride == 1 {
                            let lo = ow_lo + kw - g.padding;
                            dst[ow_lo..ow_hi].copy_from_slice(&xrow[lo..lo + (ow_hi - ow_lo)]);
                        } else {
                            for ow in ow_lo..ow_hi {
                                dst[ow] = xrow[ow * g.stride + kw - g.padding];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add of a patch-matrix gradient back onto the input layout.
fn col2im(g: &Conv2dGeometry, cols: &[f64], dx: &mut [f64]) {
    let out_plane = g.out_height * g.out_width;
    let in_plane = g.height * g.width;
    let q = g.batch * out_plane;
    for ci in 0..g.in_channels {
        for kh in 0..g.kernel_h {
            let (oh_lo, oh_hi) = g.valid_range(kh, g.height, g.out_height);
            for kw in 0..g.kernel_w {
                let (ow_lo, ow_hi) = g.valid_range(kw, g.width, g.out_width);
                let row = (ci * g.kernel_h + kh) * g.kernel_w + kw;
                let crow = &cols[row * q..][..q];
                for n in 0..g.batch {
                    let dxin = &mut dx[(n * g.in_channels + ci) * in_plane..][..in_plane];
                    let cplane = &crow[n * out_plane..][..out_plane];
                    for oh in oh_lo..oh_hi {
                        let ih = oh * g.stride + kh - g.padding;
                        let drow = &mut dxin[ih * g.width..][..g.width];
                        let src = &cplane[oh * g.out_width..][..g.out_width];
                        for ow in ow_lo..ow_hi {
                            drow[ow * g.stride + kw - g.padding] += src[ow];
                        }
                    }
                }
            }
        }
    }
}

/// `[C, N*P]` to `[N, C, P]`.
fn channel_major_to_nchw(y: &[f64], n: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; y.len()];
    for ch in 0..c {
        for b in 0..n {
            out[(b * c + ch) * plane..][..plane].copy_from_slice(&y[(ch * n + b) * plane..][..plane]);
        }
    }
    out
}

/// `[N, C, P]` to `[C, N*P]`.
fn nchw_to_channel_major(x: &[f64], n: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[(ch * n + b) * plane..][..plane].copy_from_slice(&x[(b * c + ch) * plane..][..plane]);
        }
    }
    out
}

/// Gradients of [`conv2d`]: `(d_input, d_kernel, d_bias)`. `d_input` is skipped when not needed.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &[f64],
    stride: usize,
    padding: usize,
    need_input_grad: bool,
) -> Result<(Option<Vec<f64>>, Vec<f64>, Vec<f64>)> {
    let g = Conv2dGeometry::infer(input.shape(), kernel.shape(), stride, padding)?;
    let out_plane = g.out_height * g.out_width;
    let q = g.batch * out_plane;
    let j = g.in_channels * g.kernel_h * g.kernel_w;
    if grad_out.len() != g.out_channels * q {
        return Err(Error::shape(
            "conv2d_backward",
            format!("gradient has {} entries, output has {}", grad_out.len(), g.out_channels * q),
        ));
    }
    let w = kernel.data();
    let cols = im2col(&g, input.data());
    let gy = nchw_to_channel_major(grad_out, g.batch, g.out_channels, out_plane);
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.out_channels];
    // dw[co, j] = sum_q gy[co, q] * cols[j, q], accumulated in q order over a transposed copy
    let mut cols_t = vec![0.0; q * j];
    for jj in 0..j {
        for (qq, &c) in cols[jj * q..][..q].iter().enumerate() {
            cols_t[qq * j + jj] = c;
        }
    }
    for co in 0..g.out_channels {
        let grow = &gy[co * q..][..q];
        db[co] = grow.iter().sum();
        let dwrow = &mut dw[co * j..][..j];
        for (qq, &gv) in grow.iter().enumerate() {
            for (d, &c) in dwrow.iter_mut().zip(&cols_t[qq * j..][..j]) {
                *d += gv * c;
            }
        }
    }
    let dx = need_input_grad.then(|| {
        // dcols[j, q] = sum_co w[co, j] * gy[co, q]
        let mut dcols = vec![0.0; j * q];
        for jj in 0..j {
            let drow = &mut dcols[jj * q..][..q];
            for co in 0..g.out_channels {
                let wv = w[co * j + jj];
                for (d, &gv) in drow.iter_mut().zip(&gy[co * q..][..q]) {
                    *d += wv * gv;
                }
            }
        }
        let mut dx = vec![0.0; input.data().len()];
        col2im(&g, &dcols, &mut dx);
        dx
    });
    Ok((dx, dw, db))
}

fn linear_dims(input: &Tensor, weight: &Tensor) -> Result<(usize, usize, usize)> {
    let (is, ws) = (input.shape(), weight.shape());
    if is.len() != 2 || ws.len() != 2 || is[1] != ws[1] {
        return Err(Error::shape(
            "linear",
            format!("input {:?} incompatible with weight {:?}", is, ws),
        ));
    }
    Ok((is[0], ws[1], ws[0]))
}

/// `input · weightᵀ + bias` for `input[N, Din]`, `weight[Dout, Din]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, din, dout) = linear_dims(input, weight)?;
    if let Some(b) = bias {
        if b.shape() != [dout] {
            return Err(Error::shape(
                "linear",
                format!("bias shape {:?} for {} outputs", b.shape(), dout),
            ));
        }
    }
    let (x, w) = (input.data(), weight.data());
    let mut out = vec![0.0; n * dout];
    for r in 0..n {
        let xr = &x[r * din..][..din];
        for o in 0..dout {
            let wr = &w[o * din..][..din];
            let mut acc = bias.map_or(0.0, |b| b.data()[o]);
            for i in 0..din {
                acc += wr[i] * xr[i];
            }
            out[r * dout + o] = acc;
        }
    }
    Tensor::new(vec![n, dout], out)
}

/// Gradients of [`linear`]: `(d_input, d_weight, d_bias)`.
pub fn linear_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &[f64],
    need_input_grad: bool,
) -> Result<(Option<Vec<f64>>, Vec<f64>, Vec<f64>)> {
    let (n, din, dout) = linear_dims(input, weight)?;
    let (x, w) = (input.data(), weight.data());
    let mut dx = need_input_grad.then(|| vec![0.0; n * din]);
    let mut dw = vec![0.0; dout * din];
    let mut db = vec![0.0; dout];
    for r in 0..n {
        let xr = &x[r * din..][..din];
        for o in 0..dout {
            let gy = grad_out[r * dout + o];
            db[o] += gy;
            let dwr = &mut dw[o * din..][..din];
            for i in 0..din {
                dwr[i] += gy * xr[i];
            }
            if let Some(dx) = dx.as_mut() {
                let wr = &w[o * din..][..din];
                let dxr = &mut dx[r * din..][..din];
                for i in 0..din {
                    dxr[i] += gy * wr[i];
                }
            }
        }
    }
    Ok((dx, dw, db))
}

pub fn relu(input: &Tensor) -> Tensor {
    Tensor::new(
        input.shape().to_vec(),
        input.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
    )
    .expect("same shape")
}

/// Mean over the spatial axes of an `[N, C, H, W]` tensor.
pub fn avg_pool_global(input: &Tensor) -> Result<Tensor> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(Error::shape("avg_pool_global", format!("expected 4-d input, got {:?}", s)));
    }
    let plane = s[2] * s[3];
    if plane == 0 {
        return Err(Error::shape("avg_pool_global", "empty spatial extent"));
    }
    let data = input
        .data()
        .chunks(plane)
        .map(|c| c.iter().sum::<f64>() / plane as f64)
        .collect();
    Tensor::new(vec![s[0], s[1]], data)
}

/// Mean negative log-likelihood of the true class; also returns softmax probabilities.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(Error::shape("cross_entropy", format!("expected [N, classes], got {:?}", s)));
    }
    let (n, k) = (s[0], s[1]);
    if n == 0 {
        return Err(Error::InvalidArgument("cross_entropy on an empty batch".into()));
    }
    if labels.len() != n {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} labels for a batch of {}", labels.len(), n),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!(
            "label {} outside [0, {})",
            bad, k
        )));
    }
    let mut probs = vec![0.0; n * k];
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = &logits.data()[r * k..][..k];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            probs[r * k + j] = e;
            z += e;
        }
        for p in &mut probs[r * k..][..k] {
            *p /= z;
        }
        total += -(row[label] - max - z.ln());
    }
    Ok((total / n as f64, probs))
}

/// `Σ_{i active} λ_i · P[:, i] ⊗ Q[i, :]` as a row-major `[rows_out, rows_in]` matrix.
pub fn lowrank_product(p: &Tensor, lambda: &Tensor, q: &Tensor, active: &[bool]) -> Result<Vec<f64>> {
    let (rows_out, rank, rows_in) = lowrank_dims(p, lambda, q)?;
    if active.len() != rank {
        return Err(Error::shape(
            "lowrank",
            format!("{} mask entries for rank {}", active.len(), rank),
        ));
    }
    let (pd, ld, qd) = (p.data(), lambda.data(), q.data());
    let mut m = vec![0.0; rows_out * rows_in];
    for a in 0..rows_out {
        let row = &mut m[a * rows_in..][..rows_in];
        for i in 0..rank {
            if !active[i] {
                continue;
            }
            let coef = pd[a * rank + i] * ld[i];
            let qrow = &qd[i * rows_in..][..rows_in];
            for b in 0..rows_in {
                row[b] += coef * qrow[b];
            }
        }
    }
    Ok(m)
}

/// Gradients of [`lowrank_product`] given `dM`: `(dP, dΛ, dQ)`.
///
/// `dΛ` is taken through the unmasked product, so a masked singular value still
/// receives the gradient it would have if it were active.
pub fn lowrank_backward(p: &Tensor, lambda: &Tensor, q: &Tensor, grad_m: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let (rows_out, rank, rows_in) = lowrank_dims(p, lambda, q)?;
    let (pd, ld, qd) = (p.data(), lambda.data(), q.data());
    // dM · Qᵀ  -> [rows_out, rank]
    let mut gq_t = vec![0.0; rows_out * rank];
    for a in 0..rows_out {
        let grow = &grad_m[a * rows_in..][..rows_in];
        for i in 0..rank {
            let qrow = &qd[i * rows_in..][..rows_in];
            let mut acc = 0.0;
            for b in 0..rows_in {
                acc += grow[b] * qrow[b];
            }
            gq_t[a * rank + i] = acc;
        }
    }
    let mut dp = vec![0.0; rows_out * rank];
    let mut dl = vec![0.0; rank];
    for a in 0..rows_out {
        for i in 0..rank {
            let v = gq_t[a * rank + i];
            dp[a * rank + i] = ld[i] * v;
            dl[i] += pd[a * rank + i] * v;
        }
    }
    let mut dq = vec![0.0; rank * rows_in];
    for a in 0..rows_out {
        let grow = &grad_m[a * rows_in..][..rows_in];
        for i in 0..rank {
            let coef = pd[a * rank + i] * ld[i];
            let dqrow = &mut dq[i * rows_in..][..rows_in];
            for b in 0..rows_in {
                dqrow[b] += coef * grow[b];
            }
        }
    }
    Ok((dp, dl, dq))
}

fn lowrank_dims(p: &Tensor, lambda: &Tensor, q: &Tensor) -> Result<(usize, usize, usize)> {
    let (ps, ls, qs) = (p.shape(), lambda.shape(), q.shape());
    if ps.len() != 2 || ls.len() != 1 || qs.len() != 2 || ps[1] != ls[0] || qs[0] != ls[0] {
        return Err(Error::shape(
            "lowrank",
            format!("P {:?}, Lambda {:?}, Q {:?} do not form a triplet set", ps, ls, qs),
        ));
    }
    Ok((ps[0], ls[0], qs[1]))
}
