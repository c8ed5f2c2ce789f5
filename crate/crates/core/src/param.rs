use crate::tensor::Tensor;

/// Role of a trainable tensor; drives weight decay and phase freezing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Full-precision shadow of a ternary matrix.
    Shadow,
    /// The length-r multiplier vector of an SPN layer.
    ATilde,
    /// Ordinary full-precision weight.
    Weight,
    Bias,
    BnGamma,
    BnBeta,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub id: usize,
    pub kind: ParamKind,
    pub value: Tensor,
    /// Momentum buffer, allocated on the first optimizer step.
    pub velocity: Option<Tensor>,
}

impl Param {
    pub fn new(kind: ParamKind, value: Tensor) -> Self {
        Self { id: 0, kind, value, velocity: None }
    }
}
