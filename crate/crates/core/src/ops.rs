//! Forward and backward kernels behind the autodiff graph.
//!
//! Every kernel uses a fixed loop nest so results are bit-reproducible.
//! Images are NCHW.

use crate::error::{config_err, shape_err, Result};
use crate::tensor::Tensor;

/// `a[k×m] · b[m×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_rank(2, "matmul lhs")?;
    b.expect_rank(2, "matmul rhs")?;
    let (k, m) = (a.dim(0), a.dim(1));
    let (m2, n) = (b.dim(0), b.dim(1));
    if m != m2 {
        return Err(shape_err!("matmul inner dimensions {m} vs {m2}"));
    }
    let mut out = vec![0.0f32; k * n];
    matmul_into(a.data(), b.data(), &mut out, k, m, n);
    Tensor::new(vec![k, n], out)
}

/// Accumulates `a[k×m] · b[m×n]` into `out`.
pub(crate) fn matmul_into(a: &[f32], b: &[f32], out: &mut [f32], k: usize, m: usize, n: usize) {
    for i in 0..k {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..m {
            let av = a[i * m + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Geometry of a grouped 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    /// Extra zero rows/columns appended at the bottom/right.
    pub extra: (usize, usize),
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self { stride, padding, groups, extra: (0, 0) }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvDims {
    b: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    cpg_in: usize,
    cpg_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn conv_dims(input: &Tensor, weight: &Tensor, spec: &Conv2dSpec) -> Result<ConvDims> {
    input.expect_rank(4, "conv2d input")?;
    weight.expect_rank(4, "conv2d weight")?;
    let [b, c_in, h, w] = [input.dim(0), input.dim(1), input.dim(2), input.dim(3)];
    let [c_out, cpg_in, kh, kw] = [weight.dim(0), weight.dim(1), weight.dim(2), weight.dim(3)];
    let g = spec.groups;
    if g == 0 || spec.stride == 0 {
        return Err(config_err!("groups and stride must be positive"));
    }
    if c_in % g != 0 || c_out % g != 0 {
        return Err(config_err!("groups {g} must divide c_in {c_in} and c_out {c_out}"));
    }
    if cpg_in != c_in / g {
        return Err(shape_err!("weight expects {cpg_in} channels per group, input has {}", c_in / g));
    }
    let ph = h + 2 * spec.padding + spec.extra.0;
    let pw = w + 2 * spec.padding + spec.extra.1;
    if ph < kh || pw < kw {
        return Err(shape_err!("kernel {kh}x{kw} larger than padded input {ph}x{pw}"));
    }
    Ok(ConvDims {
        b,
        c_in,
        h,
        w,
        c_out,
        cpg_in,
        cpg_out: c_out / g,
        kh,
        kw,
        oh: (ph - kh) / spec.stride + 1,
        ow: (pw - kw) / spec.stride + 1,
    })
}

/// Output spatial size of a convolution.
pub fn conv2d_output_hw(h: usize, w: usize, kh: usize, kw: usize, spec: &Conv2dSpec) -> (usize, usize) {
    let ph = h + 2 * spec.padding + spec.extra.0;
    let pw = w + 2 * spec.padding + spec.extra.1;
    ((ph - kh) / spec.stride + 1, (pw - kw) / spec.stride + 1)
}

#[inline]
fn padded_at(img: &[f32], h: usize, w: usize, y: isize, x: isize) -> f32 {
    if y < 0 || x < 0 || y as usize >= h || x as usize >= w {
        0.0
    } else {
        img[y as usize * w + x as usize]
    }
}

/// Unrolls the patches of one group of one image into a
/// `(cpg_in·kh·kw) × (oh·ow)` matrix. Rows are ordered (channel, dy, dx).
pub fn im2col(
    input: &Tensor,
    batch: usize,
    group: usize,
    kh: usize,
    kw: usize,
    spec: &Conv2dSpec,
    groups_cpg: usize,
) -> Result<Tensor> {
    input.expect_rank(4, "im2col input")?;
    let [_, c_in, h, w] = [input.dim(0), input.dim(1), input.dim(2), input.dim(3)];
    let (oh, ow) = conv2d_output_hw(h, w, kh, kw, spec);
    let rows = groups_cpg * kh * kw;
    let mut cols = vec![0.0f32; rows * oh * ow];
    let s = spec.stride as isize;
    let pad = spec.padding as isize;
    for ci in 0..groups_cpg {
        let c = group * groups_cpg + ci;
        let img = &input.data()[(batch * c_in + c) * h * w..(batch * c_in + c + 1) * h * w];
        for dy in 0..kh {
            for dx in 0..kw {
                let row = (ci * kh + dy) * kw + dx;
                for y in 0..oh {
                    for x in 0..ow {
                        let iy = y as isize * s + dy as isize - pad;
                        let ix = x as isize * s + dx as isize - pad;
                        cols[row * oh * ow + y * ow + x] = padded_at(img, h, w, iy, ix);
                    }
                }
            }
        }
    }
    Tensor::new(vec![rows, oh * ow], cols)
}

/// Grouped convolution through im2col + matmul.
pub fn conv2d(input: &Tensor, weight: &Tensor, spec: &Conv2dSpec) -> Result<Tensor> {
    let d = conv_dims(input, weight, spec)?;
    let g = spec.groups;
    let k = d.cpg_in * d.kh * d.kw;
    let n = d.oh * d.ow;
    let mut out = vec![0.0f32; d.b * d.c_out * n];
    for bi in 0..d.b {
        for gi in 0..g {
            let cols = im2col(input, bi, gi, d.kh, d.kw, spec, d.cpg_in)?;
            let wg = &weight.data()[gi * d.cpg_out * k..(gi + 1) * d.cpg_out * k];
            let dst = &mut out[(bi * d.c_out + gi * d.cpg_out) * n..(bi * d.c_out + (gi + 1) * d.cpg_out) * n];
            matmul_into(wg, cols.data(), dst, d.cpg_out, k, n);
        }
    }
    Tensor::new(vec![d.b, d.c_out, d.oh, d.ow], out)
}

/// Grouped convolution by direct nested loops; same summation order as
/// [`conv2d`].
pub fn conv2d_direct(input: &Tensor, weight: &Tensor, spec: &Conv2dSpec) -> Result<Tensor> {
    let d = conv_dims(input, weight, spec)?;
    let s = spec.stride as isize;
    let pad = spec.padding as isize;
    let mut out = Tensor::zeros(&[d.b, d.c_out, d.oh, d.ow]);
    let (x, wt) = (input.data(), weight.data());
    let o = out.data_mut();
    for bi in 0..d.b {
        for co in 0..d.c_out {
            let gi = co / d.cpg_out;
            for y in 0..d.oh {
                for xo in 0..d.ow {
                    let mut acc = 0.0f32;
                    for ci in 0..d.cpg_in {
                        let c = gi * d.cpg_in + ci;
                        let img = &x[(bi * d.c_in + c) * d.h * d.w..(bi * d.c_in + c + 1) * d.h * d.w];
                        for dy in 0..d.kh {
                            for dx in 0..d.kw {
                                let iy = y as isize * s + dy as isize - pad;
                                let ix = xo as isize * s + dx as isize - pad;
                                let wv = wt[((co * d.cpg_in + ci) * d.kh + dy) * d.kw + dx];
                                acc += wv * padded_at(img, d.h, d.w, iy, ix);
                            }
                        }
                    }
                    o[((bi * d.c_out + co) * d.oh + y) * d.ow + xo] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input and weight.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    spec: &Conv2dSpec,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let d = conv_dims(input, weight, spec)?;
    if grad_out.shape() != [d.b, d.c_out, d.oh, d.ow] {
        return Err(shape_err!("conv2d grad_out shape {:?}", grad_out.shape()));
    }
    let s = spec.stride as isize;
    let pad = spec.padding as isize;
    let mut gin = Tensor::zeros(input.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let (x, wt, go) = (input.data(), weight.data(), grad_out.data());
    {
        let gi_buf = gin.data_mut();
        let gw_buf = gw.data_mut();
        for bi in 0..d.b {
            for co in 0..d.c_out {
                let gi = co / d.cpg_out;
                for y in 0..d.oh {
                    for xo in 0..d.ow {
                        let g = go[((bi * d.c_out + co) * d.oh + y) * d.ow + xo];
                        if g == 0.0 {
                            continue;
                        }
                        for ci in 0..d.cpg_in {
                            let c = gi * d.cpg_in + ci;
                            let base = (bi * d.c_in + c) * d.h * d.w;
                            for dy in 0..d.kh {
                                let iy = y as isize * s + dy as isize - pad;
                                if iy < 0 || iy as usize >= d.h {
                                    continue;
                                }
                                for dx in 0..d.kw {
                                    let ix = xo as isize * s + dx as isize - pad;
                                    if ix < 0 || ix as usize >= d.w {
                                        continue;
                                    }
                                    let xi = base + iy as usize * d.w + ix as usize;
                                    let wi = ((co * d.cpg_in + ci) * d.kh + dy) * d.kw + dx;
                                    gw_buf[wi] += g * x[xi];
                                    gi_buf[xi] += g * wt[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((gin, gw))
}

/// Non-overlapping transposed convolution: `weight` is `[r, c_out, p, p]`
/// and the stride must equal the kernel size `p`.
pub fn conv_transpose2d(input: &Tensor, weight: &Tensor, stride: usize) -> Result<Tensor> {
    let (b, r, h, w, c_out, p) = convt_dims(input, weight, stride)?;
    let mut out = Tensor::zeros(&[b, c_out, h * p, w * p]);
    let (x, wt) = (input.data(), weight.data());
    let (oh, ow) = (h * p, w * p);
    let o = out.data_mut();
    for bi in 0..b {
        for co in 0..c_out {
            for y in 0..h {
                for xo in 0..w {
                    for u in 0..p {
                        for v in 0..p {
                            let mut acc = 0.0f32;
                            for j in 0..r {
                                acc += x[((bi * r + j) * h + y) * w + xo] * wt[((j * c_out + co) * p + u) * p + v];
                            }
                            o[((bi * c_out + co) * oh + y * p + u) * ow + xo * p + v] = acc;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn convt_dims(input: &Tensor, weight: &Tensor, stride: usize) -> Result<(usize, usize, usize, usize, usize, usize)> {
    input.expect_rank(4, "conv_transpose2d input")?;
    weight.expect_rank(4, "conv_transpose2d weight")?;
    let [b, r, h, w] = [input.dim(0), input.dim(1), input.dim(2), input.dim(3)];
    let [r2, c_out, p, p2] = [weight.dim(0), weight.dim(1), weight.dim(2), weight.dim(3)];
    if p != p2 || p != stride {
        return Err(config_err!("transposed conv needs square kernel equal to stride, got {p}x{p2} stride {stride}"));
    }
    if r != r2 {
        return Err(shape_err!("transposed conv input has {r} channels, weight expects {r2}"));
    }
    Ok((b, r, h, w, c_out, p))
}

pub fn conv_transpose2d_backward(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (b, r, h, w, c_out, p) = convt_dims(input, weight, stride)?;
    let (oh, ow) = (h * p, w * p);
    if grad_out.shape() != [b, c_out, oh, ow] {
        return Err(shape_err!("conv_transpose2d grad_out shape {:?}", grad_out.shape()));
    }
    let mut gin = Tensor::zeros(input.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let (x, wt, go) = (input.data(), weight.data(), grad_out.data());
    {
        let gi = gin.data_mut();
        let gwb = gw.data_mut();
        for bi in 0..b {
            for j in 0..r {
                for y in 0..h {
                    for xo in 0..w {
                        let xi = ((bi * r + j) * h + y) * w + xo;
                        let mut acc = 0.0f32;
                        for co in 0..c_out {
                            for u in 0..p {
                                for v in 0..p {
                                    let g = go[((bi * c_out + co) * oh + y * p + u) * ow + xo * p + v];
                                    let wi = ((j * c_out + co) * p + u) * p + v;
                                    acc += g * wt[wi];
                                    gwb[wi] += g * x[xi];
                                }
                            }
                        }
                        gi[xi] = acc;
                    }
                }
            }
        }
    }
    Ok((gin, gw))
}

/// Number of channels and per-channel inner size for a `[b, c, ...]` tensor.
fn channel_layout(x: &Tensor) -> Result<(usize, usize, usize)> {
    if x.rank() < 2 {
        return Err(shape_err!("expected [batch, channels, ...], got {:?}", x.shape()));
    }
    let inner: usize = x.shape()[2..].iter().product();
    Ok((x.dim(0), x.dim(1), inner))
}

/// Multiplies channel `c` of `x` by `scale[c]`; `scale` may have any shape
/// with `c` elements (e.g. `1×r×1×1`).
pub fn channel_mul(x: &Tensor, scale: &Tensor) -> Result<Tensor> {
    let (b, c, inner) = channel_layout(x)?;
    if scale.len() != c {
        return Err(shape_err!("channel scale has {} entries, input has {c} channels", scale.len()));
    }
    let mut out = x.clone();
    let s = scale.data();
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * inner;
            for v in &mut out.data_mut()[base..base + inner] {
                *v *= s[ci];
            }
        }
    }
    Ok(out)
}

/// Returns (grad_x, grad_scale) for [`channel_mul`].
pub fn channel_mul_backward(x: &Tensor, scale: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let (b, c, inner) = channel_layout(x)?;
    let gx = channel_mul(grad_out, scale)?;
    let mut gs = vec![0.0f32; c];
    for bi in 0..b {
        for (ci, g) in gs.iter_mut().enumerate() {
            let base = (bi * c + ci) * inner;
            for i in base..base + inner {
                *g += grad_out.data()[i] * x.data()[i];
            }
        }
    }
    Ok((gx, Tensor::new(scale.shape().to_vec(), gs)?))
}

/// Adds `bias[c]` to channel `c`.
pub fn channel_add(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (b, c, inner) = channel_layout(x)?;
    if bias.len() != c {
        return Err(shape_err!("channel bias has {} entries, input has {c} channels", bias.len()));
    }
    let mut out = x.clone();
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * inner;
            for v in &mut out.data_mut()[base..base + inner] {
                *v += bias.data()[ci];
            }
        }
    }
    Ok(out)
}

pub fn channel_sum(x: &Tensor) -> Result<Vec<f32>> {
    let (b, c, inner) = channel_layout(x)?;
    let mut s = vec![0.0f32; c];
    for bi in 0..b {
        for (ci, acc) in s.iter_mut().enumerate() {
            let base = (bi * c + ci) * inner;
            *acc += x.data()[base..base + inner].iter().sum::<f32>();
        }
    }
    Ok(s)
}

pub const BN_EPS: f32 = 1e-5;

/// Per-channel statistics saved by a training-mode batch-norm forward.
#[derive(Clone, Debug)]
pub struct BnSaved {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub x_hat: Tensor,
}

/// Batch-norm with batch statistics (biased variance).
pub fn batch_norm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(Tensor, BnSaved)> {
    let (b, c, inner) = channel_layout(x)?;
    if gamma.len() != c || beta.len() != c {
        return Err(shape_err!("batch norm parameters sized {} / {}, channels {c}", gamma.len(), beta.len()));
    }
    let n = (b * inner) as f32;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    let xd = x.data();
    for ci in 0..c {
        let mut s = 0.0f32;
        for bi in 0..b {
            let base = (bi * c + ci) * inner;
            s += xd[base..base + inner].iter().sum::<f32>();
        }
        mean[ci] = s / n;
        let mut v = 0.0f32;
        for bi in 0..b {
            let base = (bi * c + ci) * inner;
            v += xd[base..base + inner].iter().map(|&t| (t - mean[ci]) * (t - mean[ci])).sum::<f32>();
        }
        var[ci] = v / n;
    }
    let mut x_hat = x.clone();
    let mut out = x.clone();
    for bi in 0..b {
        for ci in 0..c {
            let inv = 1.0 / (var[ci] + BN_EPS).sqrt();
            let base = (bi * c + ci) * inner;
            for i in base..base + inner {
                let h = (xd[i] - mean[ci]) * inv;
                x_hat.data_mut()[i] = h;
                out.data_mut()[i] = gamma.data()[ci] * h + beta.data()[ci];
            }
        }
    }
    Ok((out, BnSaved { mean, var, x_hat }))
}

/// Returns (grad_x, grad_gamma, grad_beta).
pub fn batch_norm_backward(
    saved: &BnSaved,
    gamma: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, c, inner) = channel_layout(grad_out)?;
    let n = (b * inner) as f32;
    let mut gg = vec![0.0f32; c];
    let mut gb = vec![0.0f32; c];
    let go = grad_out.data();
    let xh = saved.x_hat.data();
    for ci in 0..c {
        for bi in 0..b {
            let base = (bi * c + ci) * inner;
            for i in base..base + inner {
                gg[ci] += go[i] * xh[i];
                gb[ci] += go[i];
            }
        }
    }
    let mut gx = Tensor::zeros(grad_out.shape());
    for ci in 0..c {
        let inv = 1.0 / (saved.var[ci] + BN_EPS).sqrt();
        let k = gamma.data()[ci] * inv / n;
        for bi in 0..b {
            let base = (bi * c + ci) * inner;
            for i in base..base + inner {
                gx.data_mut()[i] = k * (n * go[i] - gb[ci] - xh[i] * gg[ci]);
            }
        }
    }
    Ok((gx, Tensor::new(gamma.shape().to_vec(), gg)?, Tensor::new(gamma.shape().to_vec(), gb)?))
}

/// Row-wise softmax of a `[b × C]` matrix.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    logits.expect_rank(2, "softmax")?;
    let c = logits.dim(1);
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(c) {
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &v| a.max(v));
        let mut s = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Ok(out)
}

/// Checks that every row of `targets` is a probability vector.
pub fn validate_distribution_rows(targets: &Tensor) -> Result<()> {
    targets.expect_rank(2, "targets")?;
    for (i, row) in targets.data().chunks(targets.dim(1)).enumerate() {
        if row.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(crate::error::Error::Validation(format!("target row {i} has negative or non-finite entries")));
        }
        let s: f64 = row.iter().map(|&v| v as f64).sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(crate::error::Error::Validation(format!("target row {i} sums to {s}, not 1")));
        }
    }
    Ok(())
}

/// Mean over the batch of `-Σ target · log softmax(logits)`; also returns
/// the softmax for the backward pass.
pub fn softmax_cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<(f32, Tensor)> {
    logits.expect_rank(2, "logits")?;
    logits.expect_same_shape(targets)?;
    validate_distribution_rows(targets)?;
    let c = logits.dim(1);
    let b = logits.dim(0);
    let mut loss = 0.0f32;
    for (row, t) in logits.data().chunks(c).zip(targets.data().chunks(c)) {
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &v| a.max(v));
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f32>().ln();
        for (&l, &tv) in row.iter().zip(t) {
            if tv != 0.0 {
                loss -= tv * (l - lse);
            }
        }
    }
    Ok((loss / b as f32, softmax_rows(logits)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
        assert_eq!(matmul(&Tensor::eye(2), &b).unwrap(), b);
        assert_eq!(matmul(&Tensor::zeros(&[2, 2]), &b).unwrap(), Tensor::zeros(&[2, 2]));
        assert!(matmul(&a, &Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn conv_all_ones() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, &Conv2dSpec::new(1, 0, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn depthwise_identity() {
        let x = Tensor::new(vec![1, 3, 2, 2], (0..12).map(|v| v as f32).collect()).unwrap();
        let w = Tensor::full(&[3, 1, 1, 1], 1.0);
        assert_eq!(conv2d(&x, &w, &Conv2dSpec::new(1, 0, 3)).unwrap(), x);
    }

    #[test]
    fn groups_must_divide() {
        let x = Tensor::zeros(&[1, 3, 4, 4]);
        let w = Tensor::zeros(&[2, 1, 1, 1]);
        assert!(matches!(
            conv2d(&x, &w, &Conv2dSpec::new(1, 0, 2)),
            Err(crate::error::Error::Config(_))
        ));
    }

    #[test]
    fn transpose_impulse() {
        let mut x = Tensor::zeros(&[1, 1, 2, 2]);
        x.data_mut()[0] = 1.0;
        let w = Tensor::full(&[1, 1, 2, 2], 1.0);
        let y = conv_transpose2d(&x, &w, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        let expect = [1., 1., 0., 0., 1., 1., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0.];
        assert_eq!(y.data(), &expect);
        assert!(conv_transpose2d(&x, &w, 1).is_err());
    }

    #[test]
    fn transpose_p1_identity() {
        let x = Tensor::new(vec![1, 2, 2, 2], (0..8).map(|v| v as f32).collect()).unwrap();
        let w = Tensor::eye(2).into_reshaped(&[2, 2, 1, 1]).unwrap();
        assert_eq!(conv_transpose2d(&x, &w, 1).unwrap(), x);
    }

    #[test]
    fn channel_mul_cases() {
        let x = Tensor::new(vec![2, 3, 1, 2], (0..12).map(|v| v as f32 - 4.0).collect()).unwrap();
        assert_eq!(channel_mul(&x, &Tensor::full(&[1, 3, 1, 1], 1.0)).unwrap(), x);
        assert_eq!(channel_mul(&x, &Tensor::zeros(&[3])).unwrap().max_abs(), 0.0);
        let s = Tensor::new(vec![3], vec![2.0, -1.0, 0.5]).unwrap();
        let y = channel_mul(&x, &s).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                for i in 0..2 {
                    let k = (b * 3 + c) * 2 + i;
                    assert_eq!(y.data()[k], x.data()[k] * s.data()[c]);
                }
            }
        }
        assert!(channel_mul(&x, &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let logits = Tensor::zeros(&[2, 5]);
        let mut t = Tensor::zeros(&[2, 5]);
        t.data_mut()[1] = 1.0;
        t.data_mut()[7] = 0.5;
        t.data_mut()[8] = 0.5;
        let (l, _) = softmax_cross_entropy(&logits, &t).unwrap();
        assert!((l - 5f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_unnormalised() {
        let logits = Tensor::zeros(&[1, 2]);
        let t = Tensor::new(vec![1, 2], vec![0.7, 0.7]).unwrap();
        assert!(softmax_cross_entropy(&logits, &t).is_err());
    }

    #[test]
    fn batch_norm_constant_channel_gives_beta() {
        let x = Tensor::full(&[4, 1, 2, 2], 3.0);
        let gamma = Tensor::full(&[1], 2.0);
        let beta = Tensor::full(&[1], 0.25);
        let (y, _) = batch_norm_train(&x, &gamma, &beta).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-5));
    }
}
