//! JSON model files for trained and exported networks.
//!
//! Saving is canonical: fields are written in declaration order and floats
//! use the shortest decimal that round-trips, so load → save reproduces the
//! input byte for byte.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::infer::{ExportedConv, ExportedGemm, OpCounter, PackedTernary};
use crate::ops::{self, Conv2dSpec};
use crate::param::{Param, ParamKind};
use crate::quantize::{QuantState, TernaryMatrix};
use crate::spn::{BatchNorm, SpnGemm, StConv2d};
use crate::tensor::Tensor;
use crate::train::network::{Conv2d, Dense, Layer, LayerSpec, Network, NetworkSpec};

pub const FORMAT_VERSION: u32 = 1;

/// Hex SHA-256 of `bytes`.
pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Digest of the canonical training configuration.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kd_weight: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_digest: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    /// Full-precision shadow used as is.
    Shadow,
    /// Shadow re-ternarized on every forward pass.
    Quantized,
    /// Fixed pattern and scale.
    Frozen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TernaryFile {
    pub shape: Vec<usize>,
    pub mode: QuantMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shadow: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<Vec<i8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f32>,
    /// Packed 2-bit payload of `pattern` viewed as `shape[0] × rest`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub packed: Option<String>,
}

impl TernaryFile {
    fn from_state(q: &QuantState) -> Result<Self> {
        let shape = q.shape().to_vec();
        Ok(match q.frozen() {
            Some(f) => {
                let m = Self::matrix(&shape, f.pattern.clone())?;
                Self {
                    shape,
                    mode: QuantMode::Frozen,
                    shadow: None,
                    pattern: Some(f.pattern.clone()),
                    alpha: Some(f.alpha),
                    packed: Some(PackedTernary::pack(&m).to_hex()),
                }
            }
            None => Self {
                shape,
                mode: if q.is_active() { QuantMode::Quantized } else { QuantMode::Shadow },
                shadow: Some(q.shadow.value.data().to_vec()),
                pattern: None,
                alpha: None,
                packed: None,
            },
        })
    }

    fn matrix(shape: &[usize], pattern: Vec<i8>) -> Result<TernaryMatrix> {
        let rows = *shape.first().ok_or_else(|| Error::Format("ternary weight without shape".into()))?;
        let cols = shape[1..].iter().product();
        TernaryMatrix::new(rows, cols, pattern, None)
    }

    fn frozen_parts(&self, what: &str) -> Result<(TernaryMatrix, f32)> {
        let (Some(pattern), Some(alpha)) = (&self.pattern, self.alpha) else {
            return Err(Error::Format(format!("{what}: frozen weight needs pattern and alpha")));
        };
        let m = Self::matrix(&self.shape, pattern.clone())
            .map_err(|e| Error::Format(format!("{what}: {e}")))?;
        if let Some(hex) = &self.packed {
            let packed = PackedTernary::from_hex(m.rows(), m.cols(), hex)?;
            if packed != PackedTernary::pack(&m) {
                return Err(Error::Format(format!("{what}: packed blob disagrees with the pattern")));
            }
        }
        Ok((m, alpha))
    }

    fn to_state(&self, what: &str) -> Result<QuantState> {
        let n: usize = self.shape.iter().product();
        match self.mode {
            QuantMode::Frozen => {
                let (m, alpha) = self.frozen_parts(what)?;
                QuantState::frozen_from(&self.shape, m.entries().to_vec(), alpha)
            }
            QuantMode::Shadow | QuantMode::Quantized => {
                let shadow = self
                    .shadow
                    .as_ref()
                    .filter(|s| s.len() == n)
                    .ok_or_else(|| Error::Format(format!("{what}: shadow weights missing or of wrong length")))?;
                let mut q = QuantState::new(Tensor::new(self.shape.clone(), shadow.clone())?);
                q.set_active(self.mode == QuantMode::Quantized)?;
                Ok(q)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BnFile {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

impl BnFile {
    fn from_bn(bn: &BatchNorm) -> Self {
        Self {
            gamma: bn.gamma.value.data().to_vec(),
            beta: bn.beta.value.data().to_vec(),
            running_mean: bn.running_mean.clone(),
            running_var: bn.running_var.clone(),
        }
    }

    fn to_bn(&self) -> Result<BatchNorm> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(Error::Format("batch norm vectors differ in length".into()));
        }
        let mut bn = BatchNorm::new(c);
        bn.gamma.value = Tensor::new(vec![c], self.gamma.clone())?;
        bn.beta.value = Tensor::new(vec![c], self.beta.clone())?;
        bn.running_mean = self.running_mean.clone();
        bn.running_var = self.running_var.clone();
        Ok(bn)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerFile {
    Dense {
        inputs: usize,
        outputs: usize,
        weight: Vec<f32>,
        bias: Vec<f32>,
    },
    Conv2d {
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        weight: Vec<f32>,
    },
    BatchNorm {
        bn: BnFile,
    },
    Relu,
    Flatten,
    StDense {
        inputs: usize,
        outputs: usize,
        r: usize,
        a_tilde: Vec<f32>,
        w_b: TernaryFile,
        w_c: TernaryFile,
    },
    StConv2d {
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        p: usize,
        groups: usize,
        r: usize,
        a_tilde: Vec<f32>,
        w_b: TernaryFile,
        w_c: TernaryFile,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bn: Option<BnFile>,
        /// Present only in exported files.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        hidden_bias: Option<Vec<f32>>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format_version: u32,
    pub architecture: String,
    pub input_shape: Vec<usize>,
    pub exported: bool,
    pub provenance: Provenance,
    pub layers: Vec<LayerFile>,
}

fn tensor(shape: &[usize], data: &[f32], what: &str) -> Result<Tensor> {
    Tensor::new(shape.to_vec(), data.to_vec()).map_err(|e| Error::Format(format!("{what}: {e}")))
}

impl ModelFile {
    pub fn from_network(net: &Network, architecture: &str, provenance: Provenance) -> Result<Self> {
        let layers = net
            .layers
            .iter()
            .map(|layer| {
                Ok(match layer {
                    Layer::Dense(d) => LayerFile::Dense {
                        inputs: d.weight.value.dim(1),
                        outputs: d.weight.value.dim(0),
                        weight: d.weight.value.data().to_vec(),
                        bias: d.bias.value.data().to_vec(),
                    },
                    Layer::Conv2d(c) => LayerFile::Conv2d {
                        c_in: c.weight.value.dim(1) * c.groups,
                        c_out: c.weight.value.dim(0),
                        kernel: c.weight.value.dim(2),
                        stride: c.stride,
                        groups: c.groups,
                        weight: c.weight.value.data().to_vec(),
                    },
                    Layer::BatchNorm(bn) => LayerFile::BatchNorm { bn: BnFile::from_bn(bn) },
                    Layer::Relu => LayerFile::Relu,
                    Layer::Flatten => LayerFile::Flatten,
                    Layer::StDense(s) => LayerFile::StDense {
                        inputs: s.m,
                        outputs: s.k,
                        r: s.r,
                        a_tilde: s.a_tilde.value.data().to_vec(),
                        w_b: TernaryFile::from_state(&s.w_b)?,
                        w_c: TernaryFile::from_state(&s.w_c)?,
                    },
                    Layer::StConv2d(s) => LayerFile::StConv2d {
                        c_in: s.c_in,
                        c_out: s.c_out,
                        kernel: s.kernel,
                        stride: s.stride,
                        p: s.p,
                        groups: s.groups,
                        r: s.r,
                        a_tilde: s.a_tilde.value.data().to_vec(),
                        w_b: TernaryFile::from_state(&s.w_b)?,
                        w_c: TernaryFile::from_state(&s.w_c)?,
                        bn: s.bn.as_ref().map(BnFile::from_bn),
                        hidden_bias: None,
                    },
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            format_version: FORMAT_VERSION,
            architecture: architecture.to_string(),
            input_shape: net.input_shape.clone(),
            exported: false,
            provenance,
            layers,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported model format version {}", m.format_version)));
        }
        Ok(m)
    }

    /// Canonical serialization, newline terminated.
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Rebuilds a trainable network. Exported files are refused.
    pub fn to_network(&self) -> Result<Network> {
        if self.exported {
            return Err(Error::Usage("exported models run only through the inference kernel".into()));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut specs = Vec::with_capacity(self.layers.len());
        for (i, lf) in self.layers.iter().enumerate() {
            let what = format!("layer {i}");
            let (layer, spec) = match lf {
                LayerFile::Dense { inputs, outputs, weight, bias } => (
                    Layer::Dense(Dense {
                        weight: Param::new(ParamKind::Weight, tensor(&[*outputs, *inputs], weight, &what)?),
                        bias: Param::new(ParamKind::Bias, tensor(&[*outputs], bias, &what)?),
                    }),
                    LayerSpec::Dense { outputs: *outputs },
                ),
                LayerFile::Conv2d { c_in, c_out, kernel, stride, groups, weight } => {
                    if *groups == 0 || c_in % groups != 0 {
                        return Err(Error::Format(format!("{what}: groups do not divide c_in")));
                    }
                    (
                        Layer::Conv2d(Conv2d {
                            weight: Param::new(ParamKind::Weight, tensor(&[*c_out, c_in / groups, *kernel, *kernel], weight, &what)?),
                            stride: *stride,
                            groups: *groups,
                        }),
                        LayerSpec::Conv2d { c_out: *c_out, kernel: *kernel, stride: *stride, groups: *groups },
                    )
                }
                LayerFile::BatchNorm { bn } => (Layer::BatchNorm(bn.to_bn()?), LayerSpec::BatchNorm),
                LayerFile::Relu => (Layer::Relu, LayerSpec::Relu),
                LayerFile::Flatten => (Layer::Flatten, LayerSpec::Flatten),
                LayerFile::StDense { inputs, outputs, r, a_tilde, w_b, w_c } => {
                    let spn = SpnGemm::from_parts(
                        *outputs,
                        *inputs,
                        1,
                        tensor(&[*r], a_tilde, &what)?,
                        w_b.to_state(&format!("{what} W_b"))?,
                        w_c.to_state(&format!("{what} W_c"))?,
                    )?;
                    (Layer::StDense(spn), LayerSpec::StDense { outputs: *outputs, r: *r })
                }
                LayerFile::StConv2d { c_in, c_out, kernel, stride, p, groups, r, a_tilde, w_b, w_c, bn, hidden_bias } => {
                    if hidden_bias.is_some() {
                        return Err(Error::Format(format!("{what}: hidden bias in a non-exported model")));
                    }
                    let kb = StConv2d::wb_kernel(*kernel, *stride, *p);
                    let wb = w_b.to_state(&format!("{what} W_b"))?;
                    let wc = w_c.to_state(&format!("{what} W_c"))?;
                    if *groups == 0 || wb.shape() != [*r, c_in / groups, kb, kb] || wc.shape() != [*r, *c_out, *p, *p] {
                        return Err(Error::Format(format!("{what}: ternary weight shapes do not match the layer")));
                    }
                    let layer = StConv2d {
                        c_in: *c_in,
                        c_out: *c_out,
                        kernel: *kernel,
                        stride: *stride,
                        p: *p,
                        groups: *groups,
                        r: *r,
                        w_b: wb,
                        a_tilde: Param::new(ParamKind::ATilde, tensor(&[*r], a_tilde, &what)?),
                        w_c: wc,
                        bn: bn.as_ref().map(BnFile::to_bn).transpose()?,
                        tally: Default::default(),
                    };
                    let spec = LayerSpec::StConv2d {
                        c_out: *c_out,
                        kernel: *kernel,
                        stride: *stride,
                        p: *p,
                        groups: *groups,
                        r: *r,
                        batch_norm: bn.is_some(),
                    };
                    (Layer::StConv2d(layer), spec)
                }
            };
            layers.push(layer);
            specs.push(spec);
        }
        let spec = NetworkSpec { input_shape: self.input_shape.clone(), layers: specs };
        // Rebuild through the builder to validate the shape chain, then
        // install the stored layers.
        let mut net = Network::build(&spec, 0)?;
        for (i, (built, stored)) in net.layers.iter().zip(&layers).enumerate() {
            let shapes = |l: &Layer| l.params().iter().map(|p| p.value.shape().to_vec()).collect::<Vec<_>>();
            if shapes(built) != shapes(stored) {
                return Err(Error::Format(format!("layer {i}: parameter shapes do not chain with the previous layers")));
            }
        }
        net.layers = layers;
        net.assign_ids();
        Ok(net)
    }

    /// Folds scales and batch norm into `ã`, freezes and packs every
    /// ternary weight. Exporting an exported file returns it unchanged.
    pub fn export(&self) -> Result<Self> {
        if self.exported {
            return Ok(self.clone());
        }
        let mut net = self.to_network()?;
        let mut spn_layers = 0;
        for (i, layer) in net.layers.iter_mut().enumerate() {
            if let Some((b, c)) = layer.quant_states_mut() {
                spn_layers += 1;
                if !b.is_active() || !c.is_active() {
                    return Err(Error::Usage(format!(
                        "layer {i} was never quantized; run a quantized (and ideally frozen) training phase before exporting"
                    )));
                }
                b.freeze()?;
                c.freeze()?;
            }
        }
        if spn_layers == 0 {
            return Err(Error::Usage("model has no SPN layers to export; train an ST model with a quantized phase".into()));
        }
        let frozen = |m: &TernaryMatrix, shape: &[usize]| TernaryFile {
            shape: shape.to_vec(),
            mode: QuantMode::Frozen,
            shadow: None,
            pattern: Some(m.entries().to_vec()),
            alpha: Some(1.0),
            packed: Some(PackedTernary::pack(m).to_hex()),
        };
        let mut out = Self::from_network(&net, &self.architecture, self.provenance.clone())?;
        for (lf, layer) in out.layers.iter_mut().zip(&net.layers) {
            match layer {
                Layer::StDense(s) => {
                    let e = ExportedGemm::from_layer(s)?;
                    *lf = LayerFile::StDense {
                        inputs: s.m,
                        outputs: s.k,
                        r: s.r,
                        a_tilde: e.multiplier.clone(),
                        w_b: frozen(&e.w_b.unpack()?, s.w_b.shape()),
                        w_c: frozen(&e.w_c.unpack()?, s.w_c.shape()),
                    };
                }
                Layer::StConv2d(s) => {
                    let e = ExportedConv::from_layer(s)?;
                    *lf = LayerFile::StConv2d {
                        c_in: s.c_in,
                        c_out: s.c_out,
                        kernel: s.kernel,
                        stride: s.stride,
                        p: s.p,
                        groups: s.groups,
                        r: s.r,
                        a_tilde: e.multiplier.clone(),
                        w_b: frozen(&e.w_b.unpack()?, s.w_b.shape()),
                        w_c: frozen(&e.w_c.unpack()?, s.w_c.shape()),
                        bn: None,
                        hidden_bias: Some(e.hidden_bias.clone()),
                    };
                }
                _ => {}
            }
        }
        out.exported = true;
        Ok(out)
    }
}

/// One layer of an exported model, ready for the inference kernel.
#[derive(Clone, Debug)]
pub enum InferLayer {
    Gemm(ExportedGemm),
    Conv(ExportedConv),
    Dense { weight: Tensor, bias: Vec<f32> },
    Conv2d { weight: Tensor, spec: Conv2dSpec },
    Affine { scale: Vec<f32>, shift: Vec<f32> },
    Relu,
    Flatten,
}

impl InferLayer {
    pub fn kind(&self) -> &'static str {
        match self {
            InferLayer::Gemm(_) => "st_dense",
            InferLayer::Conv(_) => "st_conv2d",
            InferLayer::Dense { .. } => "dense",
            InferLayer::Conv2d { .. } => "conv2d",
            InferLayer::Affine { .. } => "batch_norm",
            InferLayer::Relu => "relu",
            InferLayer::Flatten => "flatten",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExportedModel {
    pub input_shape: Vec<usize>,
    pub layers: Vec<InferLayer>,
}

fn frozen_packed(tf: &TernaryFile, what: &str) -> Result<PackedTernary> {
    if tf.mode != QuantMode::Frozen {
        return Err(Error::Format(format!("{what}: exported weights must be frozen")));
    }
    let (m, alpha) = tf.frozen_parts(what)?;
    if alpha != 1.0 {
        return Err(Error::Format(format!("{what}: exported scale must be folded (alpha = 1)")));
    }
    Ok(PackedTernary::pack(&m))
}

impl ExportedModel {
    pub fn from_file(file: &ModelFile) -> Result<Self> {
        if !file.exported {
            return Err(Error::Usage("model is not exported; run export first".into()));
        }
        let mut layers = Vec::with_capacity(file.layers.len());
        for (i, lf) in file.layers.iter().enumerate() {
            let what = format!("layer {i}");
            layers.push(match lf {
                LayerFile::StDense { inputs, outputs, r, a_tilde, w_b, w_c } => {
                    let wb = frozen_packed(w_b, &what)?;
                    let wc = frozen_packed(w_c, &what)?;
                    if a_tilde.len() != *r || wb.rows() != *r || wb.cols() != *inputs || wc.rows() != *outputs || wc.cols() != *r {
                        return Err(Error::Format(format!("{what}: inconsistent SPN shapes")));
                    }
                    InferLayer::Gemm(ExportedGemm { k: *outputs, m: *inputs, n: 1, r: *r, multiplier: a_tilde.clone(), w_b: wb, w_c: wc })
                }
                LayerFile::StConv2d { c_in, c_out, kernel, stride, p, groups, a_tilde, w_b, w_c, bn, hidden_bias, .. } => {
                    if bn.is_some() {
                        return Err(Error::Format(format!("{what}: exported conv must have batch norm folded")));
                    }
                    let bias = hidden_bias.clone().ok_or_else(|| Error::Format(format!("{what}: hidden bias missing")))?;
                    InferLayer::Conv(ExportedConv::new(
                        *c_in,
                        *c_out,
                        *kernel,
                        *stride,
                        *p,
                        *groups,
                        a_tilde.clone(),
                        bias,
                        frozen_packed(w_b, &what)?,
                        frozen_packed(w_c, &what)?,
                    )?)
                }
                LayerFile::Dense { inputs, outputs, weight, bias } => {
                    InferLayer::Dense { weight: tensor(&[*outputs, *inputs], weight, &what)?, bias: bias.clone() }
                }
                LayerFile::Conv2d { c_in, c_out, kernel, stride, groups, weight } => InferLayer::Conv2d {
                    weight: tensor(&[*c_out, c_in / groups.max(&1), *kernel, *kernel], weight, &what)?,
                    spec: Conv2dSpec::new(*stride, (kernel - 1) / 2, *groups),
                },
                LayerFile::BatchNorm { bn } => {
                    let (scale, shift) = bn.to_bn()?.affine();
                    InferLayer::Affine { scale, shift }
                }
                LayerFile::Relu => InferLayer::Relu,
                LayerFile::Flatten => InferLayer::Flatten,
            });
        }
        Ok(Self { input_shape: file.input_shape.clone(), layers })
    }

    /// Runs the model and returns the output with per-layer operation counts.
    pub fn infer(&self, x: &Tensor) -> Result<(Tensor, Vec<OpCounter>)> {
        if x.rank() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(crate::error::shape_err!("input {:?}, expected [batch, {:?}]", x.shape(), self.input_shape));
        }
        let mut h = x.clone();
        let mut counts = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let mut c = OpCounter::default();
            h = match layer {
                InferLayer::Gemm(g) => g.dense(&h, &mut c)?,
                InferLayer::Conv(cv) => cv.forward(&h, &mut c)?,
                InferLayer::Dense { weight, bias } => {
                    let y = ops::matmul(&h, &weight.transpose()?)?;
                    let n = (h.dim(0) * weight.len()) as u64;
                    c.mults += n;
                    c.adds += n;
                    ops::channel_add(&y, &Tensor::new(vec![bias.len()], bias.clone())?)?
                }
                InferLayer::Conv2d { weight, spec } => {
                    let y = ops::conv2d(&h, weight, spec)?;
                    let n = (y.len() * weight.len() / weight.dim(0)) as u64;
                    c.mults += n;
                    c.adds += n;
                    y
                }
                InferLayer::Affine { scale, shift } => {
                    c.mults += h.len() as u64;
                    c.adds += h.len() as u64;
                    let y = ops::channel_mul(&h, &Tensor::new(vec![scale.len()], scale.clone())?)?;
                    ops::channel_add(&y, &Tensor::new(vec![shift.len()], shift.clone())?)?
                }
                InferLayer::Relu => h.map(|v| v.max(0.0)),
                InferLayer::Flatten => {
                    let b = h.dim(0);
                    let rest = h.len() / b;
                    h.into_reshaped(&[b, rest])?
                }
            };
            counts.push(c);
        }
        Ok((h, counts))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::network::NetworkSpec;

    #[test]
    fn save_load_save_is_identical() {
        let net = Network::build(&NetworkSpec::st_mlp(5, 4, 3, 4, 3), 11).unwrap();
        let text = ModelFile::from_network(&net, "toy", Provenance::default()).unwrap().to_json().unwrap();
        let again = ModelFile::from_json(&text).unwrap().to_json().unwrap();
        assert_eq!(text, again);
    }

    #[test]
    fn unquantized_export_refused() {
        let net = Network::build(&NetworkSpec::st_mlp(5, 4, 3, 4, 3), 11).unwrap();
        let file = ModelFile::from_network(&net, "toy", Provenance::default()).unwrap();
        assert!(matches!(file.export(), Err(Error::Usage(_))));
    }

    #[test]
    fn unknown_fields_rejected() {
        let net = Network::build(&NetworkSpec::mlp(2, 2, 2), 0).unwrap();
        let text = ModelFile::from_network(&net, "toy", Provenance::default()).unwrap().to_json().unwrap();
        let bad = text.replacen("\"exported\"", "\"surprise\": 1, \"exported\"", 1);
        assert!(ModelFile::from_json(&bad).is_err());
    }
}
