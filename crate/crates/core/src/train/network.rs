use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{config_err, shape_err, Error, Result};
use crate::ops::Conv2dSpec;
use crate::param::{Param, ParamKind};
use crate::quantize::QuantState;
use crate::spn::{BatchNorm, BnBatchStats, Ctx, Mode, SpnGemm, StConv2d};
use crate::tensor::Tensor;

/// Full-precision fully connected layer `y = x Wᵀ + b`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: Param,
    pub bias: Param,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (3.0 / inputs as f32).sqrt();
        Self {
            weight: Param::new(ParamKind::Weight, uniform(rng, &[outputs, inputs], bound)),
            bias: Param::new(ParamKind::Bias, Tensor::zeros(&[outputs])),
        }
    }
}

/// Full-precision convolution with `(k−1)/2` padding and no bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub stride: usize,
    pub groups: usize,
}

impl Conv2d {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, stride: usize, groups: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if groups == 0 || !c_in.is_multiple_of(groups) || !c_out.is_multiple_of(groups) {
            return Err(config_err!("groups {groups} must divide c_in {c_in} and c_out {c_out}"));
        }
        let fan = (c_in / groups) * kernel * kernel;
        Ok(Self {
            weight: Param::new(ParamKind::Weight, uniform(rng, &[c_out, c_in / groups, kernel, kernel], (3.0 / fan as f32).sqrt())),
            stride,
            groups,
        })
    }

    pub fn spec(&self) -> Conv2dSpec {
        Conv2dSpec::new(self.stride, (self.weight.value.dim(2) - 1) / 2, self.groups)
    }
}

#[derive(Clone, Debug)]
pub enum Layer {
    Dense(Dense),
    StDense(SpnGemm),
    Conv2d(Conv2d),
    StConv2d(StConv2d),
    BatchNorm(BatchNorm),
    Relu,
    Flatten,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::StDense(_) => "st_dense",
            Layer::Conv2d(_) => "conv2d",
            Layer::StConv2d(_) => "st_conv2d",
            Layer::BatchNorm(_) => "batch_norm",
            Layer::Relu => "relu",
            Layer::Flatten => "flatten",
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Dense(d) => vec![&d.weight, &d.bias],
            Layer::StDense(s) => s.params(),
            Layer::Conv2d(c) => vec![&c.weight],
            Layer::StConv2d(s) => s.params(),
            Layer::BatchNorm(b) => vec![&b.gamma, &b.beta],
            Layer::Relu | Layer::Flatten => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            Layer::StDense(s) => s.params_mut(),
            Layer::Conv2d(c) => vec![&mut c.weight],
            Layer::StConv2d(s) => s.params_mut(),
            Layer::BatchNorm(b) => vec![&mut b.gamma, &mut b.beta],
            Layer::Relu | Layer::Flatten => vec![],
        }
    }

    /// `(W_b, W_c)` of SPN layers.
    pub fn quant_states(&self) -> Option<(&QuantState, &QuantState)> {
        match self {
            Layer::StDense(s) => Some((&s.w_b, &s.w_c)),
            Layer::StConv2d(s) => Some((&s.w_b, &s.w_c)),
            _ => None,
        }
    }

    pub fn quant_states_mut(&mut self) -> Option<(&mut QuantState, &mut QuantState)> {
        match self {
            Layer::StDense(s) => Some((&mut s.w_b, &mut s.w_c)),
            Layer::StConv2d(s) => Some((&mut s.w_b, &mut s.w_c)),
            _ => None,
        }
    }

    fn batch_norm_mut(&mut self) -> Option<&mut BatchNorm> {
        match self {
            Layer::BatchNorm(b) => Some(b),
            Layer::StConv2d(s) => s.bn.as_mut(),
            _ => None,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, ctx: &mut Ctx) -> Result<Var> {
        match self {
            Layer::Dense(d) => {
                let w = g.param(d.weight.id, d.weight.value.clone());
                let wt = g.transpose(w)?;
                let y = g.matmul(x, wt)?;
                let b = g.param(d.bias.id, d.bias.value.clone());
                g.channel_add(y, b)
            }
            Layer::StDense(s) => s.forward_graph(g, x),
            Layer::Conv2d(c) => {
                let w = g.param(c.weight.id, c.weight.value.clone());
                g.conv2d(x, w, c.spec())
            }
            Layer::StConv2d(s) => s.forward_graph(g, x, ctx),
            Layer::BatchNorm(b) => b.forward(g, x, ctx),
            Layer::Relu => Ok(g.relu(x)),
            Layer::Flatten => {
                let s = g.value(x).shape();
                let b = s[0];
                let rest = s[1..].iter().product();
                g.reshape(x, &[b, rest])
            }
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f32) -> Tensor {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

/// Declarative layer description used by configs and model files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { outputs: usize },
    StDense { outputs: usize, r: usize },
    Conv2d { c_out: usize, kernel: usize, #[serde(default = "one")] stride: usize, #[serde(default = "one")] groups: usize },
    StConv2d {
        c_out: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        p: usize,
        #[serde(default = "one")]
        groups: usize,
        r: usize,
        #[serde(default = "yes")]
        batch_norm: bool,
    },
    BatchNorm,
    Relu,
    Flatten,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Per-sample input shape: `[features]` or `[channels, height, width]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Two-layer perceptron `inputs → hidden → classes`.
    pub fn mlp(inputs: usize, hidden: usize, classes: usize) -> Self {
        Self {
            input_shape: vec![inputs],
            layers: vec![LayerSpec::Dense { outputs: hidden }, LayerSpec::Relu, LayerSpec::Dense { outputs: classes }],
        }
    }

    /// The same perceptron with both layers replaced by SPN layers of
    /// widths `r_hidden` and `r_out`.
    pub fn st_mlp(inputs: usize, hidden: usize, classes: usize, r_hidden: usize, r_out: usize) -> Self {
        Self {
            input_shape: vec![inputs],
            layers: vec![
                LayerSpec::StDense { outputs: hidden, r: r_hidden },
                LayerSpec::Relu,
                LayerSpec::StDense { outputs: classes, r: r_out },
            ],
        }
    }
}

/// A sequential network.
#[derive(Clone, Debug)]
pub struct Network {
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    pub spec: NetworkSpec,
}

impl Network {
    /// Instantiates `spec` with weights drawn from a generator seeded by `seed`.
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = spec.input_shape.clone();
        if shape.is_empty() || shape.contains(&0) {
            return Err(config_err!("input shape {:?} is invalid", shape));
        }
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, ls) in spec.layers.iter().enumerate() {
            let ctx = |e: Error| config_err!("layer {i}: {e}");
            let layer = match *ls {
                LayerSpec::Dense { outputs } => {
                    let [inputs] = shape[..] else { return Err(config_err!("layer {i}: dense needs a flat input, got {shape:?}")) };
                    shape = vec![outputs];
                    Layer::Dense(Dense::new(inputs, outputs, &mut rng))
                }
                LayerSpec::StDense { outputs, r } => {
                    let [inputs] = shape[..] else { return Err(config_err!("layer {i}: st_dense needs a flat input, got {shape:?}")) };
                    shape = vec![outputs];
                    Layer::StDense(SpnGemm::dense(inputs, outputs, r, &mut rng).map_err(ctx)?)
                }
                LayerSpec::Conv2d { c_out, kernel, stride, groups } => {
                    let [c, h, w] = shape[..] else { return Err(config_err!("layer {i}: conv2d needs a CHW input, got {shape:?}")) };
                    let conv = Conv2d::new(c, c_out, kernel, stride, groups, &mut rng).map_err(ctx)?;
                    let (ho, wo) = crate::ops::conv2d_output_hw(h, w, kernel, kernel, &conv.spec());
                    shape = vec![c_out, ho, wo];
                    Layer::Conv2d(conv)
                }
                LayerSpec::StConv2d { c_out, kernel, stride, p, groups, r, batch_norm } => {
                    let [c, h, w] = shape[..] else { return Err(config_err!("layer {i}: st_conv2d needs a CHW input, got {shape:?}")) };
                    let layer = StConv2d::new(c, c_out, kernel, stride, p, groups, r, batch_norm, &mut rng).map_err(ctx)?;
                    let geo = layer.geometry(h, w).map_err(ctx)?;
                    shape = vec![c_out, geo.out_h, geo.out_w];
                    Layer::StConv2d(layer)
                }
                LayerSpec::BatchNorm => {
                    if shape.len() != 1 && shape.len() != 3 {
                        return Err(config_err!("layer {i}: batch norm input {shape:?}"));
                    }
                    Layer::BatchNorm(BatchNorm::new(shape[0]))
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Flatten => {
                    shape = vec![shape.iter().product()];
                    Layer::Flatten
                }
            };
            layers.push(layer);
        }
        let mut net = Self { input_shape: spec.input_shape.clone(), layers, spec: spec.clone() };
        net.assign_ids();
        Ok(net)
    }

    /// Numbers every parameter in layer order.
    pub fn assign_ids(&mut self) {
        let mut id = 0;
        for layer in &mut self.layers {
            for p in layer.params_mut() {
                p.id = id;
                id += 1;
            }
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn quant_states_mut(&mut self) -> Vec<&mut QuantState> {
        self.layers
            .iter_mut()
            .filter_map(Layer::quant_states_mut)
            .flat_map(|(b, c)| [b, c])
            .collect()
    }

    /// Forward pass on a `[batch, ...input_shape]` tensor. Every layer output
    /// is checked for non-finite values.
    pub fn forward(&self, g: &mut Graph, x: Var, ctx: &mut Ctx) -> Result<Var> {
        let xs = g.value(x).shape();
        if xs.len() != self.input_shape.len() + 1 || xs[1..] != self.input_shape[..] {
            return Err(shape_err!("network input {:?}, expected [batch, {:?}]", xs, self.input_shape));
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h, ctx)?;
            if !g.value(h).all_finite() {
                return Err(Error::NonFinite { index: i, name: layer.kind().to_string() });
            }
        }
        Ok(h)
    }

    /// Eval-mode logits.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let mut ctx = Ctx::new(Mode::Eval);
        let y = self.forward(&mut g, xv, &mut ctx)?;
        Ok(g.value(y).clone())
    }

    /// Fraction of rows whose arg-max logit equals the label.
    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let logits = self.logits(x)?;
        Ok(accuracy(&logits, labels))
    }

    pub fn apply_bn_stats(&mut self, stats: &[BnBatchStats]) {
        for s in stats {
            for layer in &mut self.layers {
                if let Some(bn) = layer.batch_norm_mut() {
                    if bn.gamma.id == s.gamma_id {
                        bn.update_running(&s.mean, &s.var);
                    }
                }
            }
        }
    }

    /// Total SPN multiplications counted so far.
    pub fn spn_tally(&self) -> u64 {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::StDense(s) => s.tally.get(),
                Layer::StConv2d(s) => s.tally.get(),
                _ => 0,
            })
            .sum()
    }

    pub fn reset_tally(&self) {
        for l in &self.layers {
            match l {
                Layer::StDense(s) => s.tally.reset(),
                Layer::StConv2d(s) => s.tally.reset(),
                _ => {}
            }
        }
    }
}

pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let c = logits.dim(1);
    let hits = logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row.iter().enumerate().fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            best == y
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}
