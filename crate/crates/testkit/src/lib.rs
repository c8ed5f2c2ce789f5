//! Plain f64 reference implementations used as test oracles.
//!
//! Everything here is written with direct loops over the textbook
//! definitions and shares no code with the library under test. Tensors are
//! flat row-major `Vec<f64>` with explicit shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const BN_EPS: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn ternary(rng: &mut impl Rng, n: usize) -> Vec<i8> {
    (0..n).map(|_| rng.random_range(-1i8..=1)).collect()
}

pub fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// `max |a − b| / max |b|`, with the denominator floored at `1e-12`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    let num = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let den = b.iter().fold(0.0f64, |m, y| m.max(y.abs())).max(1e-12);
    num / den
}

/// `[n × k] · [k × m]`.
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            c[i * m + j] = (0..k).map(|t| a[i * k + t] * b[t * m + j]).sum();
        }
    }
    c
}

pub fn matmul_i64(a: &[i64], b: &[i64], n: usize, k: usize, m: usize) -> Vec<i64> {
    let mut c = vec![0; n * m];
    for i in 0..n {
        for j in 0..m {
            c[i * m + j] = (0..k).map(|t| a[i * k + t] * b[t * m + j]).sum();
        }
    }
    c
}

/// Grouped cross-correlation. `x: [b, c, h, w]`, `w: [co, c/g, kh, kw]`;
/// zero padding `pad` on every side plus `extra` rows/columns at the
/// bottom/right. Returns the output and its shape.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    stride: usize,
    pad: usize,
    extra: (usize, usize),
    groups: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [b, c, h, wd] = xs;
    let [co, cig, kh, kw] = ws;
    assert_eq!(cig * groups, c, "channels per group");
    let oh = (h + 2 * pad + extra.0 - kh) / stride + 1;
    let ow = (wd + 2 * pad + extra.1 - kw) / stride + 1;
    let cog = co / groups;
    let mut out = vec![0.0; b * co * oh * ow];
    for bi in 0..b {
        for o in 0..co {
            let grp = o / cog;
            for y in 0..oh {
                for xo in 0..ow {
                    let mut s = 0.0;
                    for ci in 0..cig {
                        let c_abs = grp * cig + ci;
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * stride + dy) as isize - pad as isize;
                                let ix = (xo * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= wd {
                                    continue;
                                }
                                s += x[((bi * c + c_abs) * h + iy as usize) * wd + ix as usize]
                                    * w[((o * cig + ci) * kh + dy) * kw + dx];
                            }
                        }
                    }
                    out[((bi * co + o) * oh + y) * ow + xo] = s;
                }
            }
        }
    }
    (out, [b, co, oh, ow])
}

/// Transposed convolution (scatter form). `w: [ci, co, kh, kw]`; output side
/// `(h − 1)·stride + kh`.
pub fn conv_transpose2d(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4], stride: usize) -> (Vec<f64>, [usize; 4]) {
    let [b, ci, h, wd] = xs;
    let [wci, co, kh, kw] = ws;
    assert_eq!(ci, wci, "transposed conv channels");
    let oh = (h - 1) * stride + kh;
    let ow = (wd - 1) * stride + kw;
    let mut out = vec![0.0; b * co * oh * ow];
    for bi in 0..b {
        for i in 0..ci {
            for y in 0..h {
                for xi in 0..wd {
                    let v = x[((bi * ci + i) * h + y) * wd + xi];
                    for o in 0..co {
                        for u in 0..kh {
                            for t in 0..kw {
                                out[((bi * co + o) * oh + y * stride + u) * ow + xi * stride + t] +=
                                    v * w[((i * co + o) * kh + u) * kw + t];
                            }
                        }
                    }
                }
            }
        }
    }
    (out, [b, co, oh, ow])
}

/// Training-mode batch norm over axis 1 of `[b, c, rest…]` with biased
/// variance.
pub fn batch_norm(x: &[f64], b: usize, c: usize, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let inner = x.len() / (b * c);
    let n = (b * inner) as f64;
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let idx = || (0..b).flat_map(move |bi| (0..inner).map(move |i| (bi * c + ch) * inner + i));
        let mean = idx().map(|i| x[i]).sum::<f64>() / n;
        let var = idx().map(|i| (x[i] - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + BN_EPS).sqrt();
        for i in idx() {
            out[i] = gamma[ch] * (x[i] - mean) * inv + beta[ch];
        }
    }
    out
}

pub fn crop(x: &[f64], xs: [usize; 4], oh: usize, ow: usize) -> Vec<f64> {
    let [b, c, h, w] = xs;
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for bc in 0..b * c {
        for y in 0..oh {
            out.extend_from_slice(&x[(bc * h + y) * w..(bc * h + y) * w + ow]);
        }
    }
    out
}

/// SPN on a batch of vectors: `W_c [(W_b x) ⊙ a]`. `x: [b, d]`,
/// `wb: [r, d]`, `wc: [o, r]`. Returns `[b, o]`.
pub fn spn(x: &[f64], batch: usize, wb: &[f64], a: &[f64], wc: &[f64]) -> Vec<f64> {
    let r = a.len();
    let d = wb.len() / r;
    let o = wc.len() / r;
    let mut out = vec![0.0; batch * o];
    for bi in 0..batch {
        let hidden: Vec<f64> = (0..r).map(|j| a[j] * (0..d).map(|t| wb[j * d + t] * x[bi * d + t]).sum::<f64>()).collect();
        for i in 0..o {
            out[bi * o + i] = (0..r).map(|j| wc[i * r + j] * hidden[j]).sum();
        }
    }
    out
}

/// Reference compressed convolution.
#[derive(Clone, Debug)]
pub struct StConvRef {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub p: usize,
    pub groups: usize,
    pub r: usize,
    /// `[r, c_in/g, K, K]`, `K = stride·(p−1) + kernel`.
    pub wb: Vec<f64>,
    pub a: Vec<f64>,
    /// `[r, c_out, p, p]`.
    pub wc: Vec<f64>,
    /// Training-mode batch norm `(gamma, beta)` on the hidden channels.
    pub bn: Option<(Vec<f64>, Vec<f64>)>,
}

impl StConvRef {
    pub fn kb(&self) -> usize {
        self.stride * (self.p - 1) + self.kernel
    }

    /// Output spatial size, equal to a stride-`s` conv with padding `(k−1)/2`.
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let pad = (self.kernel - 1) / 2;
        ((h + 2 * pad - self.kernel) / self.stride + 1, (w + 2 * pad - self.kernel) / self.stride + 1)
    }

    pub fn forward(&self, x: &[f64], xs: [usize; 4]) -> (Vec<f64>, [usize; 4]) {
        let [b, _, h, w] = xs;
        let pad = (self.kernel - 1) / 2;
        let (oh, ow) = self.out_hw(h, w);
        let (ph, pw) = (oh.div_ceil(self.p), ow.div_ceil(self.p));
        let step = self.stride * self.p;
        let kb = self.kb();
        let need = |patches: usize, side: usize| (step * (patches - 1) + kb).saturating_sub(side + 2 * pad);
        let extra = (need(ph, h), need(pw, w));
        let (mut hid, hs) = conv2d(x, xs, &self.wb, [self.r, self.c_in / self.groups, kb, kb], step, pad, extra, self.groups);
        assert_eq!(&hs[2..], &[ph, pw], "patch grid");
        if let Some((gamma, beta)) = &self.bn {
            hid = batch_norm(&hid, b, self.r, gamma, beta);
        }
        let inner = ph * pw;
        for (i, v) in hid.iter_mut().enumerate() {
            *v *= self.a[(i / inner) % self.r];
        }
        let (out, os) = conv_transpose2d(&hid, hs, &self.wc, [self.r, self.c_out, self.p, self.p], self.p);
        (crop(&out, os, oh, ow), [b, self.c_out, oh, ow])
    }
}

/// Row-wise `log softmax` of `[b, c]`.
pub fn log_softmax(z: &[f64], c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(z.len());
    for row in z.chunks(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}

pub fn softmax(z: &[f64], c: usize) -> Vec<f64> {
    log_softmax(z, c).into_iter().map(f64::exp).collect()
}

/// Batch mean of `−Σ target · log softmax(logits)`.
pub fn cross_entropy(logits: &[f64], targets: &[f64], c: usize) -> f64 {
    let b = logits.len() / c;
    let ls = log_softmax(logits, c);
    -ls.iter().zip(targets).map(|(l, t)| l * t).sum::<f64>() / b as f64
}

/// `CE(s, hard) + weight · CE(s/T, softmax(t/T))`.
pub fn kd_loss(student: &[f64], teacher: &[f64], hard: &[f64], c: usize, temperature: f64, weight: f64) -> f64 {
    let s_t: Vec<f64> = student.iter().map(|v| v / temperature).collect();
    let t_t: Vec<f64> = teacher.iter().map(|v| v / temperature).collect();
    cross_entropy(student, hard, c) + weight * cross_entropy(&s_t, &softmax(&t_t, c), c)
}

/// Central differences of `f` at `x` with step `h`.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `Σ y ⊙ weights`, the scalar probe used for gradient checks.
pub fn probe(y: &[f64], weights: &[f64]) -> f64 {
    y.iter().zip(weights).map(|(a, b)| a * b).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_conv_copies_input() {
        let x: Vec<f64> = (0..18).map(|v| v as f64).collect();
        let (y, s) = conv2d(&x, [1, 2, 3, 3], &[1.0, 0.0, 0.0, 1.0], [2, 2, 1, 1], 1, 0, (0, 0), 1);
        assert_eq!(s, [1, 2, 3, 3]);
        assert_eq!(y, x);
    }

    #[test]
    fn transposed_conv_is_adjoint() {
        let mut g = rng(5);
        let x = uniform(&mut g, 2 * 3 * 4 * 4, -1.0, 1.0);
        let w = uniform(&mut g, 2 * 3 * 2 * 2, -1.0, 1.0);
        let (y, ys) = conv2d(&x, [2, 3, 4, 4], &w, [2, 3, 2, 2], 2, 0, (0, 0), 1);
        let z = uniform(&mut g, y.len(), -1.0, 1.0);
        let (t, _) = conv_transpose2d(&z, ys, &w, [2, 3, 2, 2], 2);
        let lhs: f64 = y.iter().zip(&z).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&t).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn kd_with_identical_teacher_at_t1() {
        let s = [0.3, -1.0, 2.0];
        let hard = softmax(&s, 3);
        assert!((kd_loss(&s, &s, &hard, 3, 1.0, 1.0) - 2.0 * cross_entropy(&s, &hard, 3)).abs() < 1e-15);
    }
}
