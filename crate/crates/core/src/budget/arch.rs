use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

/// One record of an architecture description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerRecord {
    Conv {
        name: String,
        c_out: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        /// Batch normalization follows the convolution.
        #[serde(default = "yes")]
        bn: bool,
        #[serde(default = "yes")]
        compressed: bool,
        /// Absolute SPN width overriding `r_ratio · c_out`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        r: Option<usize>,
    },
    Fc {
        name: String,
        out: usize,
        #[serde(default = "yes")]
        bias: bool,
        /// SPN width used when the layer is compressed; uncompressed if absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        spn_r: Option<usize>,
        /// Compress only while the conv `r_ratio` is at most this value.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        spn_max_ratio: Option<f64>,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    GlobalAvgPool,
    Flatten,
    Residual {
        name: String,
        body: Vec<LayerRecord>,
        /// Empty means identity.
        #[serde(default)]
        shortcut: Vec<LayerRecord>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    /// `[c, h, w]` or `[features]`.
    pub input: Vec<usize>,
    pub layers: Vec<LayerRecord>,
}

const BUNDLED: [(&str, &str); 4] = [
    ("resnet20-cifar", include_str!("../../data/arch/resnet20-cifar.json")),
    ("resnet18-imagenet", include_str!("../../data/arch/resnet18-imagenet.json")),
    ("resnet34-imagenet", include_str!("../../data/arch/resnet34-imagenet.json")),
    ("vgg7-cifar", include_str!("../../data/arch/vgg7-cifar.json")),
];

impl ArchSpec {
    pub fn bundled_names() -> Vec<&'static str> {
        BUNDLED.iter().map(|(n, _)| *n).collect()
    }

    pub fn bundled(name: &str) -> Result<Self> {
        let (_, text) = BUNDLED
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| config_err!("unknown architecture {name:?}; bundled: {}", Self::bundled_names().join(", ")))?;
        Self::from_json(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Checks that shapes chain through every layer and returns the output shape.
    pub fn validate(&self) -> Result<Vec<usize>> {
        if self.input.is_empty() || self.input.contains(&0) {
            return Err(config_err!("{}: invalid input shape {:?}", self.name, self.input));
        }
        chain(&self.layers, self.input.clone(), &mut |_, _, _| Ok(()))
    }
}

/// `⌊(h + 2 pad − k) / s⌋ + 1`.
pub fn out_size(h: usize, k: usize, s: usize, pad: usize) -> Result<usize> {
    window(h, k, s, pad).map_err(|e| config_err!("{e}"))
}

fn window(h: usize, k: usize, s: usize, pad: usize) -> std::result::Result<usize, String> {
    if s == 0 || h + 2 * pad < k {
        return Err(format!("window {k} (stride {s}, padding {pad}) does not fit input {h}"));
    }
    Ok((h + 2 * pad - k) / s + 1)
}

fn label(rec: &LayerRecord) -> String {
    match rec {
        LayerRecord::Conv { name, .. } | LayerRecord::Fc { name, .. } | LayerRecord::Residual { name, .. } => name.clone(),
        LayerRecord::Relu => "relu".into(),
        LayerRecord::MaxPool { .. } => "max_pool".into(),
        LayerRecord::GlobalAvgPool => "global_avg_pool".into(),
        LayerRecord::Flatten => "flatten".into(),
    }
}

fn output_shape(rec: &LayerRecord, shape: &[usize]) -> std::result::Result<Vec<usize>, String> {
    Ok(match rec {
        LayerRecord::Conv { c_out, kernel, stride, padding, .. } => {
            let [_, h, w] = shape[..] else { return Err(format!("conv needs a [c, h, w] input, got {shape:?}")) };
            if *c_out == 0 || *kernel == 0 {
                return Err("c_out and kernel must be positive".into());
            }
            vec![*c_out, window(h, *kernel, *stride, *padding)?, window(w, *kernel, *stride, *padding)?]
        }
        LayerRecord::Fc { out, .. } => {
            if shape.len() != 1 {
                return Err(format!("fc needs a flat input, got {shape:?}"));
            }
            vec![*out]
        }
        LayerRecord::Relu => shape.to_vec(),
        LayerRecord::MaxPool { kernel, stride, padding } => {
            let [c, h, w] = shape[..] else { return Err(format!("max pool needs a [c, h, w] input, got {shape:?}")) };
            vec![c, window(h, *kernel, *stride, *padding)?, window(w, *kernel, *stride, *padding)?]
        }
        LayerRecord::GlobalAvgPool => {
            if shape.len() != 3 {
                return Err(format!("global average pool needs a [c, h, w] input, got {shape:?}"));
            }
            vec![shape[0]]
        }
        LayerRecord::Flatten => vec![shape.iter().product()],
        LayerRecord::Residual { .. } => unreachable!("handled by chain"),
    })
}

/// Walks `layers`, calling `visit(record, input_shape, output_shape)` for
/// every conv and fc record in order (residual bodies before shortcuts).
/// Errors name the layer by its index path, e.g. `layer 4.body.1`.
pub(crate) fn chain(
    layers: &[LayerRecord],
    shape: Vec<usize>,
    visit: &mut dyn FnMut(&LayerRecord, &[usize], &[usize]) -> Result<()>,
) -> Result<Vec<usize>> {
    walk(layers, shape, "", visit)
}

fn walk(
    layers: &[LayerRecord],
    mut shape: Vec<usize>,
    prefix: &str,
    visit: &mut dyn FnMut(&LayerRecord, &[usize], &[usize]) -> Result<()>,
) -> Result<Vec<usize>> {
    for (i, rec) in layers.iter().enumerate() {
        let at = format!("{prefix}{i}");
        let next = match rec {
            LayerRecord::Residual { body, shortcut, .. } => {
                let main = walk(body, shape.clone(), &format!("{at}.body."), visit)?;
                let side = walk(shortcut, shape.clone(), &format!("{at}.shortcut."), visit)?;
                if main != side {
                    return Err(config_err!("layer {at} ({}): body output {main:?} does not match shortcut output {side:?}", label(rec)));
                }
                main
            }
            _ => output_shape(rec, &shape).map_err(|e| config_err!("layer {at} ({}): {e}", label(rec)))?,
        };
        if matches!(rec, LayerRecord::Conv { .. } | LayerRecord::Fc { .. }) {
            visit(rec, &shape, &next)?;
        }
        shape = next;
    }
    Ok(shape)
}
