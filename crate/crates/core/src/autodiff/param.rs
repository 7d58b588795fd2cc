use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Role tag used by freezing rules (scale/shift trains only the norm groups).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Weight,
    Bias,
    NormScale,
    NormShift,
    Embedding,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Weight,
        ParamGroup::Bias,
        ParamGroup::NormScale,
        ParamGroup::NormShift,
        ParamGroup::Embedding,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Weight => "weight",
            ParamGroup::Bias => "bias",
            ParamGroup::NormScale => "norm_scale",
            ParamGroup::NormShift => "norm_shift",
            ParamGroup::Embedding => "embedding",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ParamGroup::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown parameter group {s:?}")))
    }
}

/// A named learnable tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
    pub group: ParamGroup,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor, group: ParamGroup) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
            trainable: true,
            group,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Adds `g` into the gradient buffer. Frozen parameters ignore it.
    pub fn accumulate(&mut self, g: &Tensor) {
        if self.trainable {
            self.grad.add_assign(g);
        }
    }
}
