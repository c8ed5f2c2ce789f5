//! Ternary weight quantization with full-precision shadow weights.
//!
//! Entries above `Δ = 0.7 · mean|W|` map to +1, below `-Δ` to -1, the rest
//! to 0; the scale `α` is the mean magnitude over the surviving entries.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::param::{Param, ParamKind};
use crate::tensor::Tensor;

/// Multiplier applied to `mean |W|` to obtain the threshold.
pub const DELTA_FACTOR: f64 = 0.7;

/// A `{-1, 0, +1}` matrix with an optional positive scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TernaryMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<i8>,
    scale: Option<f32>,
}

impl TernaryMatrix {
    pub fn new(rows: usize, cols: usize, entries: Vec<i8>, scale: Option<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 || entries.len() != rows * cols {
            return Err(shape_err!("ternary matrix {rows}x{cols} with {} entries", entries.len()));
        }
        if let Some(bad) = entries.iter().find(|e| !(-1..=1).contains(*e)) {
            return Err(Error::Validation(format!("entry {bad} is not ternary")));
        }
        if let Some(s) = scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Validation(format!("ternary scale must be positive, got {s}")));
            }
        }
        Ok(Self { rows, cols, entries, scale })
    }

    pub fn from_rows(rows: &[&[i8]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err!("ragged ternary rows"));
        }
        Self::new(rows.len(), cols, rows.concat(), None)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn entries(&self) -> &[i8] {
        &self.entries
    }

    pub fn get(&self, r: usize, c: usize) -> i8 {
        self.entries[r * self.cols + c]
    }

    pub fn scale(&self) -> Option<f32> {
        self.scale
    }

    pub fn with_scale(mut self, scale: Option<f32>) -> Result<Self> {
        if let Some(s) = scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Validation(format!("ternary scale must be positive, got {s}")));
            }
        }
        self.scale = scale;
        Ok(self)
    }

    pub fn nnz(&self) -> usize {
        self.entries.iter().filter(|&&e| e != 0).count()
    }

    pub fn transpose(&self) -> Self {
        let mut e = vec![0i8; self.entries.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                e[c * self.rows + r] = self.entries[r * self.cols + c];
            }
        }
        Self { rows: self.cols, cols: self.rows, entries: e, scale: self.scale }
    }

    /// Dense `rows × cols` tensor of `scale · entries` (scale 1 when absent).
    pub fn to_tensor(&self) -> Tensor {
        let s = self.scale.unwrap_or(1.0);
        let data = self.entries.iter().map(|&e| e as f32 * s).collect();
        Tensor::new(vec![self.rows, self.cols], data).expect("validated dimensions")
    }

    /// Dense tensor of the bare pattern reshaped to `shape`.
    pub fn pattern_tensor(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.entries.iter().map(|&e| e as f32).collect())
    }
}

/// Output of [`ternarize`].
#[derive(Clone, Debug, PartialEq)]
pub struct Ternarized {
    pub pattern: Vec<i8>,
    pub delta: f64,
    pub alpha: f64,
}

impl Ternarized {
    pub fn is_degenerate(&self) -> bool {
        self.pattern.iter().all(|&e| e == 0)
    }
}

/// Threshold ternarization of a full-precision weight array.
///
/// An all-zero pattern yields `α = 0` and a warning; callers get a zero
/// layer instead of an error.
pub fn ternarize(shadow: &[f64]) -> Result<Ternarized> {
    if shadow.is_empty() {
        return Err(Error::Validation("cannot ternarize an empty weight".into()));
    }
    let abs_sum: f64 = shadow.iter().map(|v| v.abs()).sum();
    let delta = DELTA_FACTOR * abs_sum / shadow.len() as f64;
    let mut pattern = Vec::with_capacity(shadow.len());
    let (mut kept, mut count) = (0.0f64, 0usize);
    for &w in shadow {
        let t = if w > delta {
            1
        } else if w < -delta {
            -1
        } else {
            0
        };
        if t != 0 {
            kept += w.abs();
            count += 1;
        }
        pattern.push(t);
    }
    let alpha = if count == 0 {
        log::warn!("degenerate ternary quantization: every entry is within the threshold {delta}");
        0.0
    } else {
        kept / count as f64
    };
    Ok(Ternarized { pattern, delta, alpha })
}

/// Fixed-threshold ternarization (`|w| > delta` survives, scale fixed).
pub fn ternarize_fixed(shadow: &[f64], delta: f64, alpha: f64) -> Ternarized {
    let pattern = shadow
        .iter()
        .map(|&w| if w > delta { 1 } else if w < -delta { -1 } else { 0 })
        .collect();
    Ternarized { pattern, delta, alpha }
}

/// Least-squares scale for a fixed pattern: `argmin_α ‖W − α T‖²`.
pub fn alpha_optimal(shadow: &[f64], pattern: &[i8]) -> Result<f64> {
    if shadow.len() != pattern.len() {
        return Err(shape_err!("shadow has {} entries, pattern {}", shadow.len(), pattern.len()));
    }
    let (num, den) = shadow.iter().zip(pattern).fold((0.0f64, 0.0f64), |(n, d), (&w, &t)| {
        let t = t as f64;
        (n + w * t, d + t * t)
    });
    if den == 0.0 {
        return Err(Error::Validation("pattern has empty support".into()));
    }
    Ok(num / den)
}

/// `‖W − α T‖_F²`.
pub fn frobenius_objective(shadow: &[f64], pattern: &[i8], alpha: f64) -> f64 {
    shadow.iter().zip(pattern).map(|(&w, &t)| (w - alpha * t as f64).powi(2)).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
#[derive(Default)]
pub enum QuantScheme {
    /// Data-dependent threshold and scale.
    #[default]
    Adaptive,
    /// Constant threshold and scale.
    Fixed { delta: f32, alpha: f32 },
}


/// Frozen ternary pattern with its scale.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenTernary {
    pub pattern: Vec<i8>,
    pub alpha: f32,
}

/// A quantizable weight: shadow tensor plus quantization mode.
#[derive(Clone, Debug)]
pub struct QuantState {
    pub shadow: Param,
    active: bool,
    frozen: Option<FrozenTernary>,
    pub scheme: QuantScheme,
    /// Use the bare pattern (α = 1) in the forward pass.
    pub unit_scale: bool,
    pub last_delta: f32,
    pub last_alpha: f32,
}

impl QuantState {
    pub fn new(shadow: Tensor) -> Self {
        Self {
            shadow: Param::new(ParamKind::Shadow, shadow),
            active: false,
            frozen: None,
            scheme: QuantScheme::Adaptive,
            unit_scale: false,
            last_delta: 0.0,
            last_alpha: 0.0,
        }
    }

    /// State that is already frozen to `pattern · alpha`.
    pub fn frozen_from(shape: &[usize], pattern: Vec<i8>, alpha: f32) -> Result<Self> {
        let n: usize = shape.iter().product();
        if pattern.len() != n {
            return Err(shape_err!("pattern has {} entries, shape {shape:?}", pattern.len()));
        }
        if pattern.iter().any(|e| !(-1..=1).contains(e)) {
            return Err(Error::Validation("frozen pattern must be ternary".into()));
        }
        let shadow = Tensor::new(shape.to_vec(), pattern.iter().map(|&e| e as f32 * alpha).collect())?;
        let mut q = Self::new(shadow);
        q.active = true;
        q.frozen = Some(FrozenTernary { pattern, alpha });
        q.last_alpha = alpha;
        Ok(q)
    }

    pub fn shape(&self) -> &[usize] {
        self.shadow.value.shape()
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.is_some()
    }

    pub fn frozen(&self) -> Option<&FrozenTernary> {
        self.frozen.as_ref()
    }

    pub fn set_active(&mut self, active: bool) -> Result<()> {
        if !active && self.is_frozen() {
            return Err(Error::Usage("cannot deactivate quantization of a frozen weight".into()));
        }
        self.active = active;
        Ok(())
    }

    fn shadow_f64(&self) -> Vec<f64> {
        self.shadow.value.data().iter().map(|&v| v as f64).collect()
    }

    /// Quantizes the current shadow without touching the frozen snapshot.
    pub fn quantize_shadow(&self) -> Result<Ternarized> {
        let w = self.shadow_f64();
        Ok(match self.scheme {
            QuantScheme::Adaptive => ternarize(&w)?,
            QuantScheme::Fixed { delta, alpha } => ternarize_fixed(&w, delta as f64, alpha as f64),
        })
    }

    /// Fixes the ternary pattern at its current value.
    pub fn freeze(&mut self) -> Result<()> {
        if self.is_frozen() {
            return Ok(());
        }
        let t = self.quantize_shadow()?;
        let alpha = if self.unit_scale { 1.0 } else { t.alpha as f32 };
        self.last_delta = t.delta as f32;
        self.last_alpha = alpha;
        self.active = true;
        self.frozen = Some(FrozenTernary { pattern: t.pattern, alpha });
        Ok(())
    }

    /// Recomputes the logged threshold and scale.
    pub fn refresh_stats(&mut self) -> Result<()> {
        if self.active && !self.is_frozen() {
            let t = self.quantize_shadow()?;
            self.last_delta = t.delta as f32;
            self.last_alpha = if self.unit_scale { 1.0 } else { t.alpha as f32 };
        }
        Ok(())
    }

    /// Effective weight seen by the forward pass.
    pub fn quantized_view(&self) -> Result<Tensor> {
        if let Some(f) = &self.frozen {
            return Tensor::new(self.shape().to_vec(), f.pattern.iter().map(|&e| e as f32 * f.alpha).collect());
        }
        if !self.active {
            return Ok(self.shadow.value.clone());
        }
        let t = self.quantize_shadow()?;
        let alpha = if self.unit_scale { 1.0 } else { t.alpha as f32 };
        Tensor::new(self.shape().to_vec(), t.pattern.iter().map(|&e| e as f32 * alpha).collect())
    }

    /// Gradient the shadow receives for an upstream gradient on the view.
    pub fn ste_gradient(&self, upstream: &Tensor) -> Tensor {
        if self.is_frozen() {
            Tensor::zeros(upstream.shape())
        } else {
            upstream.clone()
        }
    }

    /// Registers the effective weight on `g`.
    pub fn graph_var(&self, g: &mut Graph) -> Result<Var> {
        if self.is_frozen() {
            return Ok(g.constant(self.quantized_view()?));
        }
        let s = g.param(self.shadow.id, self.shadow.value.clone());
        if self.active {
            g.straight_through(s, self.quantized_view()?)
        } else {
            Ok(s)
        }
    }

    /// Ternary pattern (flattened to `dim0 × rest`) with its scale.
    pub fn ternary_matrix(&self) -> Result<TernaryMatrix> {
        let (pattern, alpha) = match &self.frozen {
            Some(f) => (f.pattern.clone(), f.alpha),
            None => {
                let t = self.quantize_shadow()?;
                (t.pattern, if self.unit_scale { 1.0 } else { t.alpha as f32 })
            }
        };
        let rows = self.shape()[0];
        let cols = self.shadow.value.len() / rows;
        TernaryMatrix::new(rows, cols, pattern, (alpha > 0.0).then_some(alpha))
    }
}
