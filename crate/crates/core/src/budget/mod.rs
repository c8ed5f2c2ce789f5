//! Operation and parameter counts for full-precision and SPN-compressed
//! architectures.
//!
//! Conventions:
//! - a full-precision conv costs `c_in c_out k² H' W'` multiplications and as
//!   many additions; an fc layer `in · out` of each;
//! - a batch norm after a conv costs one multiplication and one addition per
//!   output element, on both sides;
//! - a ternary matrix application is charged at its dense size in additions;
//! - a compressed conv applies one global `p`, strided layers included, with
//!   a `W_b` kernel of side `stride·(p−1) + k`.

mod arch;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

pub use arch::{out_size, ArchSpec, LayerRecord};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCount {
    pub multiplications: u64,
    pub additions: u64,
    pub ternary_params: u64,
    pub fp_params: u64,
    pub model_bytes: u64,
}

impl OpCount {
    pub fn new(multiplications: u64, additions: u64, ternary_params: u64, fp_params: u64) -> Self {
        Self {
            multiplications,
            additions,
            ternary_params,
            fp_params,
            model_bytes: (ternary_params * 2).div_ceil(8) + fp_params * 4,
        }
    }

    /// Storage in bits, 2 per ternary and 32 per full-precision value.
    pub fn model_bits(&self) -> u64 {
        2 * self.ternary_params + 32 * self.fp_params
    }

    /// Storage in units of 2^20 bits.
    pub fn model_mebibits(&self) -> f64 {
        self.model_bits() as f64 / (1u64 << 20) as f64
    }
}

impl std::ops::Add for OpCount {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self::new(
            self.multiplications + o.multiplications,
            self.additions + o.additions,
            self.ternary_params + o.ternary_params,
            self.fp_params + o.fp_params,
        )
    }
}

impl std::iter::Sum for OpCount {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

/// Global compression knobs applied to every compressible layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionConfig {
    /// `r = r_ratio · c_out` for convolutions.
    pub r_ratio: f64,
    pub p: usize,
    pub g: usize,
    /// Count strided convolutions with `p = 1` instead of the global `p`.
    #[serde(default)]
    pub strided_at_p1: bool,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self { r_ratio: 1.0, p: 1, g: 1, strided_at_p1: false }
    }
}

/// Percentage reduction `100 (1 − compressed / full)`; negative when the
/// compressed count is larger.
pub fn reduction(full: u64, compressed: u64) -> f64 {
    if full == 0 {
        0.0
    } else {
        100.0 * (1.0 - compressed as f64 / full as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    pub kind: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub compressed: bool,
    pub r: usize,
    pub p: usize,
    pub g: usize,
    pub fp: OpCount,
    pub spn: OpCount,
    /// Multiplications of the linear map alone (no batch norm).
    pub fp_core_mults: u64,
    pub spn_core_mults: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl LayerReport {
    /// `fp_core_mults / spn_core_mults`.
    pub fn mult_factor(&self) -> f64 {
        self.fp_core_mults as f64 / self.spn_core_mults as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reductions {
    pub multiplications: f64,
    pub additions: f64,
    pub model_size: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub arch: String,
    pub config: CompressionConfig,
    pub layers: Vec<LayerReport>,
    pub total_fp: OpCount,
    pub total_spn: OpCount,
    pub reductions: Reductions,
    pub fp_model_mebibits: f64,
    pub spn_model_mebibits: f64,
}

fn dims(rec: &LayerRecord, input: &[usize], output: &[usize]) -> (usize, usize, usize, usize, usize) {
    match rec {
        LayerRecord::Conv { kernel, stride, .. } => (input[0], output[0], *kernel, *stride, output[1] * output[2]),
        _ => (input[0], output[0], 1, 1, 1),
    }
}

/// Full-precision cost of a conv or fc record.
pub fn count_layer(rec: &LayerRecord, input: &[usize], output: &[usize]) -> Result<OpCount> {
    let (c_in, c_out, k, _, hw) = dims(rec, input, output);
    let (c_in, c_out, k, hw) = (c_in as u64, c_out as u64, k as u64, hw as u64);
    match rec {
        LayerRecord::Conv { bn, .. } => {
            let core = c_in * c_out * k * k * hw;
            let norm = if *bn { c_out * hw } else { 0 };
            let bn_params = if *bn { 2 * c_out } else { 0 };
            Ok(OpCount::new(core + norm, core + norm, 0, c_in * c_out * k * k + bn_params))
        }
        LayerRecord::Fc { bias, .. } => {
            let bias_params = if *bias { c_out } else { 0 };
            Ok(OpCount::new(c_in * c_out, c_in * c_out, 0, c_in * c_out + bias_params))
        }
        _ => Err(config_err!("only conv and fc layers carry a cost")),
    }
}

/// SPN cost of a conv or fc record with width `r`, patch size `p` and `g` groups.
pub fn count_spn_layer(rec: &LayerRecord, input: &[usize], output: &[usize], r: usize, p: usize, g: usize) -> Result<OpCount> {
    if r == 0 || p == 0 || g == 0 {
        return Err(config_err!("r, p and g must be positive"));
    }
    match rec {
        LayerRecord::Conv { name, bn, .. } => {
            let (c_in, c_out, k, s, _) = dims(rec, input, output);
            if c_in % g != 0 || !r.is_multiple_of(g) {
                return Err(config_err!("{name}: groups {g} must divide c_in {c_in} and r {r}"));
            }
            let (oh, ow) = (output[1], output[2]);
            let patches = (oh.div_ceil(p) * ow.div_ceil(p)) as u64;
            let kb = (s * (p - 1) + k) as u64;
            let (r, c_in, c_out, p, g) = (r as u64, c_in as u64, c_out as u64, p as u64, g as u64);
            let wb = r * (c_in / g) * kb * kb;
            let wc = r * c_out * p * p;
            let hw = (oh * ow) as u64;
            let norm = if *bn { c_out * hw } else { 0 };
            let bn_params = if *bn { 2 * c_out } else { 0 };
            Ok(OpCount::new(r * patches + norm, patches * (wb + wc) + norm, wb + wc, r + bn_params))
        }
        LayerRecord::Fc { bias, .. } => {
            let (n_in, n_out) = (input[0] as u64, output[0] as u64);
            let r = r as u64;
            let bias_params = if *bias { n_out } else { 0 };
            Ok(OpCount::new(r, r * n_in + n_out * r, r * n_in + n_out * r, r + bias_params))
        }
        _ => Err(config_err!("only conv and fc layers carry a cost")),
    }
}

fn conv_width(name: &str, c_out: usize, ratio: f64, r: Option<usize>) -> Result<usize> {
    if let Some(r) = r {
        return Ok(r);
    }
    let x = ratio * c_out as f64;
    let rounded = x.round();
    if ratio <= 0.0 || (x - rounded).abs() > 1e-9 || rounded < 1.0 {
        return Err(config_err!("{name}: r_ratio {ratio} · c_out {c_out} is not a positive integer"));
    }
    Ok(rounded as usize)
}

/// Per-layer and total counts for the full-precision and compressed variants.
pub fn compare(spec: &ArchSpec, cfg: &CompressionConfig) -> Result<BudgetReport> {
    if cfg.p == 0 || cfg.g == 0 {
        return Err(config_err!("p and g must be positive"));
    }
    let mut layers = Vec::new();
    arch::chain(&spec.layers, spec.input.clone(), &mut |rec, input, output| {
        let fp = count_layer(rec, input, output)?;
        let (c_in, c_out, kernel, stride, hw) = dims(rec, input, output);
        let (out_h, out_w) = if output.len() == 3 { (output[1], output[2]) } else { (1, 1) };
        let mut note = None;
        let (name, compressed, r, p, g) = match rec {
            LayerRecord::Conv { name, compressed, r, .. } => {
                let width = conv_width(name, c_out, cfg.r_ratio, *r)?;
                let mut g = cfg.g;
                if c_in % g != 0 || width % g != 0 {
                    note = Some(format!("groups {g} do not divide c_in {c_in} and r {width}; counted with g = 1"));
                    g = 1;
                }
                let p = if cfg.strided_at_p1 && stride > 1 { 1 } else { cfg.p };
                (name, *compressed, width, p, g)
            }
            LayerRecord::Fc { name, spn_r, spn_max_ratio, .. } => match spn_r {
                Some(r) if spn_max_ratio.is_none_or(|m| cfg.r_ratio <= m) => (name, true, *r, 1, 1),
                _ => (name, false, 0, 1, 1),
            },
            _ => unreachable!("chain only visits conv and fc"),
        };
        let fp_core = (c_in * c_out * kernel * kernel * hw) as u64;
        let (spn, spn_core) = if compressed {
            let spn = count_spn_layer(rec, input, output, r, p, g)?;
            let patches = (out_h.div_ceil(p) * out_w.div_ceil(p)) as u64;
            (spn, r as u64 * patches)
        } else {
            (fp, fp_core)
        };
        layers.push(LayerReport {
            name: name.clone(),
            kind: if matches!(rec, LayerRecord::Conv { .. }) { "conv".into() } else { "fc".into() },
            c_in,
            c_out,
            kernel,
            stride,
            out_h,
            out_w,
            compressed,
            r,
            p,
            g,
            fp,
            spn,
            fp_core_mults: fp_core,
            spn_core_mults: spn_core,
            note,
        });
        Ok(())
    })?;
    let total_fp: OpCount = layers.iter().map(|l| l.fp).sum();
    let total_spn: OpCount = layers.iter().map(|l| l.spn).sum();
    Ok(BudgetReport {
        arch: spec.name.clone(),
        config: *cfg,
        reductions: Reductions {
            multiplications: reduction(total_fp.multiplications, total_spn.multiplications),
            additions: reduction(total_fp.additions, total_spn.additions),
            model_size: reduction(total_fp.model_bytes, total_spn.model_bytes),
        },
        fp_model_mebibits: total_fp.model_mebibits(),
        spn_model_mebibits: total_spn.model_mebibits(),
        layers,
        total_fp,
        total_spn,
    })
}

impl BudgetReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "layer,fp_mults,spn_mults,fp_adds,spn_adds,ternary_params,fp_params,fp_bytes,spn_bytes,mult_reduction,add_reduction,size_reduction\n",
        );
        let row = |s: &mut String, name: &str, fp: &OpCount, spn: &OpCount| {
            let _ = writeln!(
                s,
                "{name},{},{},{},{},{},{},{},{},{:.4},{:.4},{:.4}",
                fp.multiplications,
                spn.multiplications,
                fp.additions,
                spn.additions,
                spn.ternary_params,
                spn.fp_params,
                fp.model_bytes,
                spn.model_bytes,
                reduction(fp.multiplications, spn.multiplications),
                reduction(fp.additions, spn.additions),
                reduction(fp.model_bytes, spn.model_bytes)
            );
        };
        for l in &self.layers {
            row(&mut s, &l.name, &l.fp, &l.spn);
        }
        row(&mut s, "total", &self.total_fp, &self.total_spn);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(c_out: usize, k: usize, bn: bool) -> LayerRecord {
        LayerRecord::Conv { name: "c".into(), c_out, kernel: k, stride: 1, padding: (k - 1) / 2, bn, compressed: true, r: None }
    }

    #[test]
    fn fp_conv_formula() {
        let c = count_layer(&conv(16, 3, false), &[16, 32, 32], &[16, 32, 32]).unwrap();
        assert_eq!(c.multiplications, 2_359_296);
        let fc = LayerRecord::Fc { name: "fc".into(), out: 10, bias: true, spn_r: None, spn_max_ratio: None };
        assert_eq!(count_layer(&fc, &[64], &[10]).unwrap().multiplications, 640);
    }

    #[test]
    fn spn_factor_64_channels() {
        let rec = conv(64, 3, false);
        let fp = count_layer(&rec, &[64, 8, 8], &[64, 8, 8]).unwrap();
        let spn = count_spn_layer(&rec, &[64, 8, 8], &[64, 8, 8], 128, 2, 1).unwrap();
        assert_eq!(fp.multiplications / spn.multiplications, 1152);
        assert_eq!(spn.ternary_params, 128 * 64 * 16 + 128 * 64 * 4);
    }

    #[test]
    fn bytes_formula() {
        assert_eq!(OpCount::new(0, 0, 9, 0).model_bytes, 3);
        assert_eq!(OpCount::new(0, 0, 8, 2).model_bytes, 2 + 8);
    }

    #[test]
    fn non_integral_width_rejected() {
        let spec = ArchSpec { name: "t".into(), input: vec![3, 8, 8], layers: vec![conv(10, 3, true)] };
        assert!(compare(&spec, &CompressionConfig { r_ratio: 0.25, ..Default::default() }).is_err());
    }
}
