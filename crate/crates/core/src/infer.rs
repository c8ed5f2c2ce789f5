//! Multiplication-free application of ternary matrices and the exported
//! SPN inference path.
//!
//! Packed layout: each row occupies `⌈cols/32⌉` little-endian `u64` words;
//! entry `j` of a row sits in bits `2(j mod 32)..2(j mod 32)+2` of word
//! `j / 32`, encoded `00 → 0`, `01 → +1`, `10 → −1` (`11` is invalid).
//! Unused trailing bits are zero.

use std::ops::Range;

use crate::error::{shape_err, Error, Result};
use crate::ops::{self, Conv2dSpec};
use crate::quantize::{QuantState, TernaryMatrix};
use crate::spn::{patch_geometry, unvec_col, vec_col, SpnGemm, StConv2d};
use crate::tensor::Tensor;

const PER_WORD: usize = 32;

/// Operation counts of one or more kernel calls.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounter {
    pub mults: u64,
    pub adds: u64,
}

impl OpCounter {
    pub fn merge(&mut self, other: OpCounter) {
        self.mults += other.mults;
        self.adds += other.adds;
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedTernary {
    rows: usize,
    cols: usize,
    words: Vec<u64>,
}

impl PackedTernary {
    pub fn words_per_row(cols: usize) -> usize {
        cols.div_ceil(PER_WORD)
    }

    pub fn pack(m: &TernaryMatrix) -> Self {
        let wpr = Self::words_per_row(m.cols());
        let mut words = vec![0u64; m.rows() * wpr];
        for r in 0..m.rows() {
            for c in 0..m.cols() {
                let code: u64 = match m.get(r, c) {
                    1 => 0b01,
                    -1 => 0b10,
                    _ => 0b00,
                };
                words[r * wpr + c / PER_WORD] |= code << (2 * (c % PER_WORD));
            }
        }
        Self { rows: m.rows(), cols: m.cols(), words }
    }

    /// Validates a raw payload: reserved codes and padding bits are rejected.
    pub fn from_words(rows: usize, cols: usize, words: Vec<u64>) -> Result<Self> {
        let wpr = Self::words_per_row(cols);
        if words.len() != rows * wpr {
            return Err(Error::Format(format!("{} words cannot hold {rows}x{cols} packed entries", words.len())));
        }
        for r in 0..rows {
            for wi in 0..wpr {
                let word = words[r * wpr + wi];
                let used = (cols - wi * PER_WORD).min(PER_WORD);
                for slot in 0..PER_WORD {
                    let code = (word >> (2 * slot)) & 0b11;
                    if code == 0b11 {
                        return Err(Error::Format(format!("reserved code 11 at row {r}, column {}", wi * PER_WORD + slot)));
                    }
                    if slot >= used && code != 0 {
                        return Err(Error::Format(format!("nonzero padding bits in row {r}")));
                    }
                }
            }
        }
        Ok(Self { rows, cols, words })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> i8 {
        let wpr = Self::words_per_row(self.cols);
        match (self.words[r * wpr + c / PER_WORD] >> (2 * (c % PER_WORD))) & 0b11 {
            0b01 => 1,
            0b10 => -1,
            _ => 0,
        }
    }

    pub fn unpack(&self) -> Result<TernaryMatrix> {
        let mut entries = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                entries.push(self.get(r, c));
            }
        }
        TernaryMatrix::new(self.rows, self.cols, entries, None)
    }

    /// Payload as lowercase hex of the little-endian word bytes.
    pub fn to_hex(&self) -> String {
        let bytes: Vec<u8> = self.words.iter().flat_map(|w| w.to_le_bytes()).collect();
        hex::encode(bytes)
    }

    pub fn from_hex(rows: usize, cols: usize, text: &str) -> Result<Self> {
        let bytes = hex::decode(text).map_err(|e| Error::Format(format!("packed blob: {e}")))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Format("packed blob length is not a multiple of 8 bytes".into()));
        }
        let words = bytes.chunks(8).map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Self::from_words(rows, cols, words)
    }
}

/// `y_i = Σ_j w_ij x_j` for `i` in `rows`, by additions and subtractions
/// only. Sums are carried in `f64`, so integer-valued inputs stay exact and
/// float inputs round once.
fn accumulate_rows(w: &PackedTernary, rows: Range<usize>, x: &[f64], counter: &mut OpCounter) -> Result<Vec<f64>> {
    if x.len() != w.cols {
        return Err(shape_err!("ternary apply: {} columns, input length {}", w.cols, x.len()));
    }
    if rows.end > w.rows {
        return Err(shape_err!("row range {rows:?} exceeds {} rows", w.rows));
    }
    let wpr = PackedTernary::words_per_row(w.cols);
    let mut out = Vec::with_capacity(rows.len());
    for r in rows {
        let mut acc = 0.0f64;
        for wi in 0..wpr {
            let mut word = w.words[r * wpr + wi];
            let base = wi * PER_WORD;
            while word != 0 {
                let slot = word.trailing_zeros() as usize / 2;
                match (word >> (2 * slot)) & 0b11 {
                    0b01 => acc += x[base + slot],
                    _ => acc -= x[base + slot],
                }
                counter.adds += 1;
                word &= !(0b11 << (2 * slot));
            }
        }
        out.push(acc);
    }
    Ok(out)
}

fn widen(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

/// [`accumulate_rows`] on `f32` data.
pub fn ternary_apply_rows(w: &PackedTernary, rows: Range<usize>, x: &[f32], counter: &mut OpCounter) -> Result<Vec<f32>> {
    Ok(accumulate_rows(w, rows, &widen(x), counter)?.into_iter().map(|v| v as f32).collect())
}

pub fn ternary_apply(w: &PackedTernary, x: &[f32], counter: &mut OpCounter) -> Result<Vec<f32>> {
    ternary_apply_rows(w, 0..w.rows, x, counter)
}

fn frozen_pattern(q: &QuantState, what: &str) -> Result<(TernaryMatrix, f32)> {
    let f = q
        .frozen()
        .ok_or_else(|| Error::Usage(format!("{what} is not frozen; export the layer before running the inference kernel")))?;
    let rows = q.shape()[0];
    let cols = f.pattern.len() / rows;
    Ok((TernaryMatrix::new(rows, cols, f.pattern.clone(), None)?, f.alpha))
}

/// Exported SPN product layer: pure ternary `W_b`, `W_c` and one fused
/// length-`r` multiplier.
#[derive(Clone, Debug, PartialEq)]
pub struct ExportedGemm {
    pub k: usize,
    pub m: usize,
    pub n: usize,
    pub r: usize,
    pub multiplier: Vec<f32>,
    pub w_b: PackedTernary,
    pub w_c: PackedTernary,
}

impl ExportedGemm {
    pub fn from_layer(layer: &SpnGemm) -> Result<Self> {
        let (tb, ab) = frozen_pattern(&layer.w_b, "W_b")?;
        let (tc, ac) = frozen_pattern(&layer.w_c, "W_c")?;
        let multiplier = layer.a_tilde.value.data().iter().map(|&a| a * ab * ac).collect();
        Ok(Self { k: layer.k, m: layer.m, n: layer.n, r: layer.r, multiplier, w_b: PackedTernary::pack(&tb), w_c: PackedTernary::pack(&tc) })
    }

    /// One evaluation on a vectorised right factor; costs exactly `r`
    /// multiplications.
    pub fn apply(&self, vb: &[f32], counter: &mut OpCounter) -> Result<Vec<f32>> {
        let u = accumulate_rows(&self.w_b, 0..self.w_b.rows, &widen(vb), counter)?;
        let z: Vec<f64> = u.iter().zip(&self.multiplier).map(|(u, &m)| u * m as f64).collect();
        counter.mults += self.r as u64;
        Ok(accumulate_rows(&self.w_c, 0..self.w_c.rows, &z, counter)?.into_iter().map(|v| v as f32).collect())
    }

    /// `C ≈ A B` for one `m × n` matrix `B`.
    pub fn matmul(&self, b: &Tensor, counter: &mut OpCounter) -> Result<Tensor> {
        if b.shape() != [self.m, self.n] {
            return Err(shape_err!("B shape {:?}, expected [{}, {}]", b.shape(), self.m, self.n));
        }
        let vc = self.apply(vec_col(b)?.data(), counter)?;
        unvec_col(&vc, self.k, self.n)
    }

    /// Row-wise application to a `[batch × m]` matrix (`n = 1`).
    pub fn dense(&self, x: &Tensor, counter: &mut OpCounter) -> Result<Tensor> {
        if x.rank() != 2 || x.dim(1) != self.m * self.n {
            return Err(shape_err!("dense input {:?}, expected [batch, {}]", x.shape(), self.m * self.n));
        }
        let mut out = Vec::with_capacity(x.dim(0) * self.k * self.n);
        for row in x.data().chunks(self.m * self.n) {
            out.extend(self.apply(row, counter)?);
        }
        Tensor::new(vec![x.dim(0), self.k * self.n], out)
    }
}

/// Exported ST-Conv layer. Batch norm and both scales are folded into
/// `multiplier` and `hidden_bias`: `z_j = multiplier_j · u_j + hidden_bias_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExportedConv {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub p: usize,
    pub groups: usize,
    pub r: usize,
    pub multiplier: Vec<f32>,
    pub hidden_bias: Vec<f32>,
    /// `r × (c_in/g · K²)`.
    pub w_b: PackedTernary,
    /// `W_c` in its stored `r × (c_out p²)` layout.
    pub w_c: PackedTernary,
    /// `(c_out p²) × r`, the layout the kernel applies.
    w_c_t: PackedTernary,
}

impl ExportedConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        p: usize,
        groups: usize,
        multiplier: Vec<f32>,
        hidden_bias: Vec<f32>,
        w_b: PackedTernary,
        w_c: PackedTernary,
    ) -> Result<Self> {
        let r = multiplier.len();
        let kb = StConv2d::wb_kernel(kernel, stride, p);
        if groups == 0 || !c_in.is_multiple_of(groups) || !r.is_multiple_of(groups) || hidden_bias.len() != r {
            return Err(Error::Validation("exported conv: inconsistent r, groups or bias length".into()));
        }
        if w_b.rows() != r || w_b.cols() != c_in / groups * kb * kb || w_c.rows() != r || w_c.cols() != c_out * p * p {
            return Err(Error::Validation("exported conv: packed weight shapes do not match the layer".into()));
        }
        let w_c_t = PackedTernary::pack(&w_c.unpack()?.transpose());
        Ok(Self { c_in, c_out, kernel, stride, p, groups, r, multiplier, hidden_bias, w_b, w_c, w_c_t })
    }

    pub fn from_layer(layer: &StConv2d) -> Result<Self> {
        let (tb, ab) = frozen_pattern(&layer.w_b, "W_b")?;
        let (tc, ac) = frozen_pattern(&layer.w_c, "W_c")?;
        let (scale, shift) = match &layer.bn {
            Some(bn) => bn.affine(),
            None => (vec![1.0; layer.r], vec![0.0; layer.r]),
        };
        let a = layer.a_tilde.value.data();
        let multiplier = (0..layer.r).map(|j| a[j] * scale[j] * ab * ac).collect();
        let hidden_bias = (0..layer.r).map(|j| a[j] * shift[j] * ac).collect();
        Self::new(
            layer.c_in,
            layer.c_out,
            layer.kernel,
            layer.stride,
            layer.p,
            layer.groups,
            multiplier,
            hidden_bias,
            PackedTernary::pack(&tb),
            PackedTernary::pack(&tc),
        )
    }

    pub fn forward(&self, input: &Tensor, counter: &mut OpCounter) -> Result<Tensor> {
        if input.rank() != 4 || input.dim(1) != self.c_in {
            return Err(shape_err!("exported conv input {:?}, expected [b, {}, H, W]", input.shape(), self.c_in));
        }
        let (b, h, w) = (input.dim(0), input.dim(2), input.dim(3));
        let geo = patch_geometry(self.kernel, self.stride, self.p, h, w)?;
        let kb = StConv2d::wb_kernel(self.kernel, self.stride, self.p);
        let spec = Conv2dSpec { stride: self.stride * self.p, padding: geo.padding, groups: self.groups, extra: geo.extra };
        let (ph, pw) = (geo.patches_h, geo.patches_w);
        let n_patch = ph * pw;
        let cpg = self.c_in / self.groups;
        let rpg = self.r / self.groups;
        let p = self.p;
        let mut out = vec![0.0f32; b * self.c_out * geo.out_h * geo.out_w];
        for bi in 0..b {
            let cols: Vec<Tensor> =
                (0..self.groups).map(|gi| ops::im2col(input, bi, gi, kb, kb, &spec, cpg)).collect::<Result<_>>()?;
            let rows = cpg * kb * kb;
            for patch in 0..n_patch {
                let mut z = Vec::with_capacity(self.r);
                for (gi, c) in cols.iter().enumerate() {
                    let x: Vec<f64> = (0..rows).map(|row| c.data()[row * n_patch + patch] as f64).collect();
                    z.extend(accumulate_rows(&self.w_b, gi * rpg..(gi + 1) * rpg, &x, counter)?);
                }
                for (j, zj) in z.iter_mut().enumerate() {
                    *zj = *zj * self.multiplier[j] as f64 + self.hidden_bias[j] as f64;
                }
                counter.mults += self.r as u64;
                counter.adds += self.r as u64;
                let block = accumulate_rows(&self.w_c_t, 0..self.w_c_t.rows, &z, counter)?;
                let (py, px) = (patch / pw, patch % pw);
                for o in 0..self.c_out {
                    for u in 0..p {
                        for v in 0..p {
                            let (y, x) = (py * p + u, px * p + v);
                            if y < geo.out_h && x < geo.out_w {
                                out[((bi * self.c_out + o) * geo.out_h + y) * geo.out_w + x] = block[(o * p + u) * p + v] as f32;
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(vec![b, self.c_out, geo.out_h, geo.out_w], out)
    }

    /// Multiplications for one image of size `h × w`.
    pub fn mults_per_image(&self, h: usize, w: usize) -> Result<u64> {
        let geo = patch_geometry(self.kernel, self.stride, self.p, h, w)?;
        Ok((self.r * geo.patches_h * geo.patches_w) as u64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tm(rows: &[&[i8]]) -> TernaryMatrix {
        TernaryMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn bit_layout() {
        let p = PackedTernary::pack(&tm(&[&[1, -1, 0, 1]]));
        assert_eq!(p.words(), &[0b01_00_10_01]);
        let wide = PackedTernary::pack(&TernaryMatrix::new(2, 33, vec![-1; 66], None).unwrap());
        assert_eq!(wide.words().len(), 4);
        assert_eq!(wide.words()[1], 0b10);
    }

    #[test]
    fn reserved_code_and_padding_rejected() {
        assert!(PackedTernary::from_words(1, 4, vec![0b11]).is_err());
        assert!(PackedTernary::from_words(1, 4, vec![0b01 << 10]).is_err());
        assert!(PackedTernary::from_words(1, 4, vec![0b01]).is_ok());
    }

    #[test]
    fn hex_round_trip() {
        let p = PackedTernary::pack(&tm(&[&[1, 0, -1], &[0, 0, 1]]));
        let back = PackedTernary::from_hex(2, 3, &p.to_hex()).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.unpack().unwrap(), tm(&[&[1, 0, -1], &[0, 0, 1]]));
    }

    #[test]
    fn identity_and_row_sum() {
        let mut c = OpCounter::default();
        let x = [1.5, -2.0, 4.0];
        let id = PackedTernary::pack(&tm(&[&[1, 0, 0], &[0, 1, 0], &[0, 0, 1]]));
        assert_eq!(ternary_apply(&id, &x, &mut c).unwrap(), x.to_vec());
        let ones = PackedTernary::pack(&tm(&[&[1, 1, 1]]));
        assert_eq!(ternary_apply(&ones, &x, &mut c).unwrap(), vec![3.5]);
        assert_eq!(c.mults, 0);
        assert!(ternary_apply(&ones, &x[..2], &mut c).is_err());
    }

    #[test]
    fn unfrozen_layer_is_refused() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let layer = SpnGemm::dense(3, 2, 4, &mut rng).unwrap();
        assert!(matches!(ExportedGemm::from_layer(&layer), Err(Error::Usage(_))));
    }
}
