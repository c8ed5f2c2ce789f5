//! Two-layer sum-product network layers.
//!
//! An SPN layer computes `W_c [(W_b x) ⊙ ã]` where `W_b` and `W_c` are
//! (quantizable) ternary matrices and `ã` is a length-`r` full-precision
//! vector. The element-wise product with `ã` is the only multiplication;
//! every evaluation adds `r` to the layer's tally.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::autodiff::{Graph, Var};
use crate::error::{config_err, shape_err, Result};
use crate::ops::Conv2dSpec;
use crate::param::{Param, ParamKind};
use crate::quantize::{QuantState, TernaryMatrix};
use crate::tensor::Tensor;

/// Contention-free multiplication counter.
#[derive(Debug, Default)]
pub struct MulTally(AtomicU64);

impl MulTally {
    pub fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }
}

impl Clone for MulTally {
    fn clone(&self) -> Self {
        Self(AtomicU64::new(self.get()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics observed during a training forward pass.
#[derive(Clone, Debug)]
pub struct BnBatchStats {
    pub gamma_id: usize,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// Per-forward-pass context.
#[derive(Debug)]
pub struct Ctx {
    pub mode: Mode,
    pub bn_stats: Vec<BnBatchStats>,
}

impl Ctx {
    pub fn new(mode: Mode) -> Self {
        Self { mode, bn_stats: Vec::new() }
    }
}

pub const BN_MOMENTUM: f32 = 0.9;

/// Per-channel batch normalization with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(ParamKind::BnGamma, Tensor::full(&[channels], 1.0)),
            beta: Param::new(ParamKind::BnBeta, Tensor::zeros(&[channels])),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn forward(&self, g: &mut Graph, x: Var, ctx: &mut Ctx) -> Result<Var> {
        match ctx.mode {
            Mode::Train => {
                let gamma = g.param(self.gamma.id, self.gamma.value.clone());
                let beta = g.param(self.beta.id, self.beta.value.clone());
                let (y, mean, var) = g.batch_norm(x, gamma, beta)?;
                ctx.bn_stats.push(BnBatchStats { gamma_id: self.gamma.id, mean, var });
                Ok(y)
            }
            Mode::Eval => {
                let (scale, shift) = self.affine();
                let s = g.constant(Tensor::new(vec![scale.len()], scale)?);
                let t = g.constant(Tensor::new(vec![shift.len()], shift)?);
                let y = g.channel_mul(x, s)?;
                g.channel_add(y, t)
            }
        }
    }

    /// Inference-time affine form `y = scale · x + shift`.
    pub fn affine(&self) -> (Vec<f32>, Vec<f32>) {
        let mut scale = Vec::with_capacity(self.channels());
        let mut shift = Vec::with_capacity(self.channels());
        for c in 0..self.channels() {
            let s = self.gamma.value.data()[c] / (self.running_var[c] + crate::ops::BN_EPS).sqrt();
            scale.push(s);
            shift.push(self.beta.value.data()[c] - self.running_mean[c] * s);
        }
        (scale, shift)
    }

    pub fn update_running(&mut self, mean: &[f32], var: &[f32]) {
        let m = self.momentum;
        for c in 0..self.channels() {
            self.running_mean[c] = m * self.running_mean[c] + (1.0 - m) * mean[c];
            self.running_var[c] = m * self.running_var[c] + (1.0 - m) * var[c];
        }
    }
}

fn uniform_tensor(rng: &mut impl Rng, shape: &[usize], bound: f32) -> Tensor {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

/// Column-stacking vectorization of a `k × m` matrix.
pub fn vec_col(mat: &Tensor) -> Result<Tensor> {
    mat.expect_rank(2, "vec")?;
    mat.transpose()?.into_reshaped(&[mat.len()])
}

/// Inverse of [`vec_col`].
pub fn unvec_col(v: &[f32], rows: usize, cols: usize) -> Result<Tensor> {
    if v.len() != rows * cols {
        return Err(shape_err!("cannot unvec {} values into {rows}x{cols}", v.len()));
    }
    Tensor::new(vec![cols, rows], v.to_vec())?.transpose()
}

/// SPN approximation of `C = A B` with `A ∈ R^{k×m}` absorbed into `ã`.
#[derive(Clone, Debug)]
pub struct SpnGemm {
    pub k: usize,
    pub m: usize,
    pub n: usize,
    pub r: usize,
    pub a_tilde: Param,
    /// `r × (m n)`.
    pub w_b: QuantState,
    /// `(k n) × r`.
    pub w_c: QuantState,
    pub tally: MulTally,
}

impl SpnGemm {
    pub fn from_parts(k: usize, m: usize, n: usize, a_tilde: Tensor, w_b: QuantState, w_c: QuantState) -> Result<Self> {
        let r = a_tilde.len();
        if r == 0 {
            return Err(config_err!("SPN width must be positive"));
        }
        if w_b.shape() != [r, m * n] {
            return Err(shape_err!("W_b shape {:?}, expected [{r}, {}]", w_b.shape(), m * n));
        }
        if w_c.shape() != [k * n, r] {
            return Err(shape_err!("W_c shape {:?}, expected [{}, {r}]", w_c.shape(), k * n));
        }
        Ok(Self {
            k,
            m,
            n,
            r,
            a_tilde: Param::new(ParamKind::ATilde, a_tilde.into_reshaped(&[r])?),
            w_b,
            w_c,
            tally: MulTally::default(),
        })
    }

    /// Randomly initialised fully connected SPN (`n = 1`) mapping `m → k`.
    pub fn dense(m: usize, k: usize, r: usize, rng: &mut impl Rng) -> Result<Self> {
        if r == 0 {
            return Err(config_err!("SPN width must be positive"));
        }
        let w_b = QuantState::new(uniform_tensor(rng, &[r, m], (3.0 / m as f32).sqrt()));
        let w_c = QuantState::new(uniform_tensor(rng, &[k, r], (3.0 / r as f32).sqrt()));
        Self::from_parts(k, m, 1, Tensor::full(&[r], 1.0), w_b, w_c)
    }

    /// Exact SPN for `A · B` with `r = k m n`: one hidden unit per scalar
    /// product `A[i,p] B[p,j]`.
    pub fn exact_construction(a: &Tensor, n: usize) -> Result<Self> {
        a.expect_rank(2, "exact construction")?;
        let (k, m) = (a.dim(0), a.dim(1));
        let r = k * m * n;
        let mut wb = vec![0i8; r * m * n];
        let mut wc = vec![0i8; k * n * r];
        let mut at = vec![0.0f32; r];
        let mut h = 0;
        for j in 0..n {
            for i in 0..k {
                for p in 0..m {
                    wb[h * m * n + j * m + p] = 1;
                    at[h] = a.data()[i * m + p];
                    wc[(j * k + i) * r + h] = 1;
                    h += 1;
                }
            }
        }
        let w_b = QuantState::frozen_from(&[r, m * n], wb, 1.0)?;
        let w_c = QuantState::frozen_from(&[k * n, r], wc, 1.0)?;
        Self::from_parts(k, m, n, Tensor::new(vec![r], at)?, w_b, w_c)
    }

    /// SPN from a bilinear algorithm `(W_a, W_b, W_c)` with `ã = W_a vec(A)`.
    pub fn from_bilinear(wa: &TernaryMatrix, wb: &TernaryMatrix, wc: &TernaryMatrix, a: &Tensor) -> Result<Self> {
        a.expect_rank(2, "bilinear A")?;
        let (k, m) = (a.dim(0), a.dim(1));
        let r = wa.rows();
        if wa.cols() != k * m || wb.rows() != r || wc.cols() != r {
            return Err(shape_err!("bilinear factors do not match A of shape {:?}", a.shape()));
        }
        let n = wb.cols() / m;
        let va = vec_col(a)?;
        let at: Vec<f32> = (0..r)
            .map(|j| (0..k * m).map(|c| wa.get(j, c) as f32 * va.data()[c]).sum())
            .collect();
        let w_b = QuantState::frozen_from(&[r, wb.cols()], wb.entries().to_vec(), 1.0)?;
        let w_c = QuantState::frozen_from(&[wc.rows(), r], wc.entries().to_vec(), 1.0)?;
        Self::from_parts(k, m, n, Tensor::new(vec![r], at)?, w_b, w_c)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.w_b.shadow, &self.a_tilde, &self.w_c.shadow]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w_b.shadow, &mut self.a_tilde, &mut self.w_c.shadow]
    }

    /// Graph forward on a batch of vectorised right factors `[batch × m n]`.
    pub fn forward_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let xs = g.value(x).shape().to_vec();
        if xs.len() != 2 || xs[1] != self.m * self.n {
            return Err(shape_err!("SPN input {:?}, expected [batch, {}]", xs, self.m * self.n));
        }
        let wb = self.w_b.graph_var(g)?;
        let wbt = g.transpose(wb)?;
        let hidden = g.matmul(x, wbt)?;
        let a = g.param(self.a_tilde.id, self.a_tilde.value.clone());
        let prod = g.channel_mul(hidden, a)?;
        self.tally.add((self.r * xs[0]) as u64);
        let wc = self.w_c.graph_var(g)?;
        let wct = g.transpose(wc)?;
        g.matmul(prod, wct)
    }

    /// Evaluates `C ≈ A B` for one `m × n` matrix `B`.
    pub fn forward(&self, b: &Tensor) -> Result<Tensor> {
        if b.shape() != [self.m, self.n] {
            return Err(shape_err!("B shape {:?}, expected [{}, {}]", b.shape(), self.m, self.n));
        }
        let mut g = Graph::new();
        let x = g.constant(vec_col(b)?.into_reshaped(&[1, self.m * self.n])?);
        let y = self.forward_graph(&mut g, x)?;
        unvec_col(g.value(y).data(), self.k, self.n)
    }

    /// Fully connected application to a batch of column vectors `[batch × m]`.
    pub fn st_dense(&self, x: &Tensor) -> Result<Tensor> {
        if self.n != 1 {
            return Err(config_err!("st_dense needs n = 1, layer has n = {}", self.n));
        }
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = self.forward_graph(&mut g, xv)?;
        Ok(g.value(y).clone())
    }
}

/// Strassen-style compressed 2-D convolution: grouped stride-`s·p`
/// convolution with `W_b`, optional batch norm, per-channel scaling by `ã`,
/// and a stride-`p` transposed convolution with `W_c`.
#[derive(Clone, Debug)]
pub struct StConv2d {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub p: usize,
    pub groups: usize,
    pub r: usize,
    /// `r × (c_in/g) × K × K` with `K = stride·(p−1) + kernel`.
    pub w_b: QuantState,
    pub a_tilde: Param,
    /// `r × c_out × p × p`.
    pub w_c: QuantState,
    pub bn: Option<BatchNorm>,
    pub tally: MulTally,
}

/// Geometry of one StConv2d application.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeometry {
    pub out_h: usize,
    pub out_w: usize,
    pub patches_h: usize,
    pub patches_w: usize,
    pub padding: usize,
    pub extra: (usize, usize),
}

/// Tiling of a `h × w` input into `p × p` output patches, with padding
/// `(kernel−1)/2` plus whatever bottom/right rows the last patch needs.
pub fn patch_geometry(kernel: usize, stride: usize, p: usize, h: usize, w: usize) -> Result<PatchGeometry> {
    let pad = (kernel - 1) / 2;
    if h + 2 * pad < kernel || w + 2 * pad < kernel {
        return Err(shape_err!("input {h}x{w} smaller than kernel {kernel}"));
    }
    let out_h = (h + 2 * pad - kernel) / stride + 1;
    let out_w = (w + 2 * pad - kernel) / stride + 1;
    let patches_h = out_h.div_ceil(p);
    let patches_w = out_w.div_ceil(p);
    let kb = StConv2d::wb_kernel(kernel, stride, p);
    let step = stride * p;
    let need_h = step * (patches_h - 1) + kb;
    let need_w = step * (patches_w - 1) + kb;
    Ok(PatchGeometry {
        out_h,
        out_w,
        patches_h,
        patches_w,
        padding: pad,
        extra: (need_h.saturating_sub(h + 2 * pad), need_w.saturating_sub(w + 2 * pad)),
    })
}

impl StConv2d {
    /// Side length of the `W_b` kernel.
    pub fn wb_kernel(kernel: usize, stride: usize, p: usize) -> usize {
        stride * (p - 1) + kernel
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        p: usize,
        groups: usize,
        r: usize,
        batch_norm: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::validate(c_in, r, kernel, stride, p, groups)?;
        let kb = Self::wb_kernel(kernel, stride, p);
        let fan_b = (c_in / groups) * kb * kb;
        let w_b = QuantState::new(uniform_tensor(rng, &[r, c_in / groups, kb, kb], (3.0 / fan_b as f32).sqrt()));
        let w_c = QuantState::new(uniform_tensor(rng, &[r, c_out, p, p], (3.0 / r as f32).sqrt()));
        Ok(Self {
            c_in,
            c_out,
            kernel,
            stride,
            p,
            groups,
            r,
            w_b,
            a_tilde: Param::new(ParamKind::ATilde, Tensor::full(&[r], 1.0)),
            w_c,
            bn: batch_norm.then(|| BatchNorm::new(r)),
            tally: MulTally::default(),
        })
    }

    fn validate(c_in: usize, r: usize, kernel: usize, stride: usize, p: usize, groups: usize) -> Result<()> {
        if r == 0 || kernel == 0 || stride == 0 || p == 0 || groups == 0 {
            return Err(config_err!("r, kernel, stride, p and groups must be positive"));
        }
        if !c_in.is_multiple_of(groups) || !r.is_multiple_of(groups) {
            return Err(config_err!("groups {groups} must divide c_in {c_in} and r {r}"));
        }
        if kernel.is_multiple_of(2) {
            return Err(config_err!("kernel size {kernel} must be odd"));
        }
        Ok(())
    }

    /// Exact construction with `r = k² c_in c_out p²` reproducing the
    /// stride-1 convolution with `weight` (`c_out × c_in × k × k`, padding
    /// `(k−1)/2`).
    pub fn exact_construction(weight: &Tensor, p: usize) -> Result<Self> {
        weight.expect_rank(4, "conv weight")?;
        let [c_out, c_in, k, k2] = [weight.dim(0), weight.dim(1), weight.dim(2), weight.dim(3)];
        if k != k2 {
            return Err(config_err!("square kernels only"));
        }
        let r = k * k * c_in * c_out * p * p;
        Self::validate(c_in, r, k, 1, p, 1)?;
        let kb = p - 1 + k;
        let mut wb = vec![0i8; r * c_in * kb * kb];
        let mut wc = vec![0i8; r * c_out * p * p];
        let mut at = vec![0.0f32; r];
        let mut j = 0;
        for o in 0..c_out {
            for u in 0..p {
                for v in 0..p {
                    for i in 0..c_in {
                        for dy in 0..k {
                            for dx in 0..k {
                                wb[((j * c_in + i) * kb + u + dy) * kb + v + dx] = 1;
                                at[j] = weight.data()[((o * c_in + i) * k + dy) * k + dx];
                                wc[((j * c_out + o) * p + u) * p + v] = 1;
                                j += 1;
                            }
                        }
                    }
                }
            }
        }
        Ok(Self {
            c_in,
            c_out,
            kernel: k,
            stride: 1,
            p,
            groups: 1,
            r,
            w_b: QuantState::frozen_from(&[r, c_in, kb, kb], wb, 1.0)?,
            a_tilde: Param::new(ParamKind::ATilde, Tensor::new(vec![r], at)?),
            w_c: QuantState::frozen_from(&[r, c_out, p, p], wc, 1.0)?,
            bn: None,
            tally: MulTally::default(),
        })
    }

    pub fn geometry(&self, h: usize, w: usize) -> Result<PatchGeometry> {
        patch_geometry(self.kernel, self.stride, self.p, h, w)
    }

    pub fn wb_spec(&self, geo: &PatchGeometry) -> Conv2dSpec {
        Conv2dSpec { stride: self.stride * self.p, padding: geo.padding, groups: self.groups, extra: geo.extra }
    }

    /// Multiplications for one image of size `h × w`.
    pub fn mults_per_image(&self, h: usize, w: usize) -> Result<u64> {
        let geo = self.geometry(h, w)?;
        Ok((self.r * geo.patches_h * geo.patches_w) as u64)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.w_b.shadow, &self.a_tilde, &self.w_c.shadow];
        if let Some(bn) = &self.bn {
            v.push(&bn.gamma);
            v.push(&bn.beta);
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.w_b.shadow, &mut self.a_tilde, &mut self.w_c.shadow];
        if let Some(bn) = &mut self.bn {
            v.push(&mut bn.gamma);
            v.push(&mut bn.beta);
        }
        v
    }

    pub fn forward_graph(&self, g: &mut Graph, x: Var, ctx: &mut Ctx) -> Result<Var> {
        let xs = g.value(x).shape().to_vec();
        if xs.len() != 4 || xs[1] != self.c_in {
            return Err(shape_err!("ST-Conv input {:?}, expected [b, {}, H, W]", xs, self.c_in));
        }
        let geo = self.geometry(xs[2], xs[3])?;
        let wb = self.w_b.graph_var(g)?;
        let mut hidden = g.conv2d(x, wb, self.wb_spec(&geo))?;
        if g.value(hidden).shape()[2..] != [geo.patches_h, geo.patches_w] {
            return Err(shape_err!("patch grid mismatch {:?}", g.value(hidden).shape()));
        }
        if let Some(bn) = &self.bn {
            hidden = bn.forward(g, hidden, ctx)?;
        }
        let a = g.param(self.a_tilde.id, self.a_tilde.value.clone());
        let prod = g.channel_mul(hidden, a)?;
        self.tally.add((self.r * geo.patches_h * geo.patches_w * xs[0]) as u64);
        let wc = self.w_c.graph_var(g)?;
        let out = g.conv_transpose2d(prod, wc, self.p)?;
        if geo.patches_h * self.p == geo.out_h && geo.patches_w * self.p == geo.out_w {
            Ok(out)
        } else {
            g.crop(out, geo.out_h, geo.out_w)
        }
    }

    /// Eval-mode forward without a caller-managed graph.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let mut ctx = Ctx::new(Mode::Eval);
        let y = self.forward_graph(&mut g, x, &mut ctx)?;
        Ok(g.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn vec_is_column_stacking() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(vec_col(&a).unwrap().data(), &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(unvec_col(&[1.0, 3.0, 2.0, 4.0], 2, 2).unwrap(), a);
    }

    #[test]
    fn naive_construction_is_exact_on_integers() {
        let a = Tensor::from_rows(&[&[1.0, -2.0, 3.0], &[0.0, 4.0, -1.0]]).unwrap();
        let b = Tensor::from_rows(&[&[2.0, 1.0], &[-3.0, 0.0], &[1.0, 5.0]]).unwrap();
        let spn = SpnGemm::exact_construction(&a, 2).unwrap();
        assert_eq!(spn.r, 12);
        assert_eq!(spn.forward(&b).unwrap(), crate::ops::matmul(&a, &b).unwrap());
        assert_eq!(spn.tally.get(), 12);
    }

    #[test]
    fn zero_a_tilde_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut spn = SpnGemm::dense(5, 3, 4, &mut rng).unwrap();
        spn.a_tilde.value = Tensor::zeros(&[4]);
        let x = Tensor::full(&[2, 5], 1.5);
        assert_eq!(spn.st_dense(&x).unwrap().max_abs(), 0.0);

        let mut conv = StConv2d::new(2, 3, 3, 1, 2, 1, 4, false, &mut rng).unwrap();
        conv.a_tilde.value = Tensor::zeros(&[4]);
        let y = conv.forward(&Tensor::full(&[1, 2, 4, 4], 1.0)).unwrap();
        assert_eq!(y.shape(), &[1, 3, 4, 4]);
        assert_eq!(y.max_abs(), 0.0);
    }

    #[test]
    fn conv_geometry_k3_p2() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = StConv2d::new(1, 1, 3, 1, 2, 1, 2, false, &mut rng).unwrap();
        assert_eq!(conv.w_b.shape(), &[2, 1, 4, 4]);
        let geo = conv.geometry(8, 8).unwrap();
        assert_eq!((geo.patches_h, geo.patches_w, geo.out_h), (4, 4, 8));
        assert_eq!(conv.wb_spec(&geo).stride, 2);
        assert_eq!(conv.mults_per_image(8, 8).unwrap(), 2 * 16);
    }

    #[test]
    fn odd_size_is_padded_and_cropped() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = StConv2d::new(2, 2, 3, 1, 2, 2, 4, false, &mut rng).unwrap();
        let y = conv.forward(&Tensor::full(&[1, 2, 5, 7], 0.5)).unwrap();
        assert_eq!(y.shape(), &[1, 2, 5, 7]);
        assert_eq!(conv.tally.get(), 4 * 3 * 4);
    }

    #[test]
    fn invalid_groups_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(StConv2d::new(3, 4, 3, 1, 1, 2, 4, false, &mut rng).is_err());
        assert!(StConv2d::new(4, 4, 3, 1, 1, 2, 3, false, &mut rng).is_err());
    }
}
