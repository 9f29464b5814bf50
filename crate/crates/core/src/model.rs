//! Trainable networks behind one interface.

use serde::{Deserialize, Serialize};

use crate::cnn::CnnConfig;
use crate::error::{Error, Result};
use crate::field::Field;
use crate::lordnet::{bind, Bound, NetworkConfig, ParamSet};
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    Lord(NetworkConfig),
    Cnn(CnnConfig),
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Architecture,
    /// Fixed multiplier applied to inputs before the first layer.
    #[serde(default = "unit")]
    pub input_scale: f64,
    /// Fixed multiplier applied to the last layer's output.
    #[serde(default = "unit")]
    pub output_scale: f64,
    /// Adds the (unscaled) input to the output, so the layers model an increment.
    #[serde(default)]
    pub residual: bool,
}

impl ModelConfig {
    pub fn new(arch: Architecture) -> Self {
        ModelConfig {
            arch,
            input_scale: 1.0,
            output_scale: 1.0,
            residual: false,
        }
    }

    pub fn side(&self) -> usize {
        match &self.arch {
            Architecture::Lord(c) => c.side,
            Architecture::Cnn(c) => c.side,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.input_scale.is_finite() && self.input_scale != 0.0)
            || !(self.output_scale.is_finite() && self.output_scale != 0.0)
        {
            return Err(Error::config("network", "input_scale and output_scale must be finite and non-zero"));
        }
        match &self.arch {
            Architecture::Lord(c) => c.validate(),
            Architecture::Cnn(c) => c.validate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl Network {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = match &config.arch {
            Architecture::Lord(c) => c.init(seed)?,
            Architecture::Cnn(c) => c.init(seed)?,
        };
        Ok(Network { config, params })
    }

    /// Rebuilds from stored parameters, checking names and shapes against the layout.
    pub fn from_parts(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let layout = match &config.arch {
            Architecture::Lord(c) => c.layout(),
            Architecture::Cnn(c) => c.layout(),
        };
        if layout.len() != params.len() {
            return Err(Error::config(
                "checkpoint",
                format!("expected {} parameters, found {}", layout.len(), params.len()),
            ));
        }
        for ((name, shape), (pname, field)) in layout.iter().zip(&params) {
            if name != pname || shape.as_slice() != field.shape() {
                return Err(Error::config(
                    "checkpoint",
                    format!("parameter `{pname}` {:?} does not match `{name}` {shape:?}", field.shape()),
                ));
            }
        }
        Ok(Network { config, params })
    }

    pub fn side(&self) -> usize {
        self.config.side()
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Field::len).sum()
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let xin = if self.config.input_scale == 1.0 {
            x
        } else {
            tape.scale(x, self.config.input_scale)
        };
        let y = match &self.config.arch {
            Architecture::Lord(c) => c.forward(tape, p, xin)?,
            Architecture::Cnn(c) => c.forward(tape, p, xin)?,
        };
        let y = if self.config.output_scale == 1.0 {
            y
        } else {
            tape.scale(y, self.config.output_scale)
        };
        if self.config.residual {
            tape.add(y, x)
        } else {
            Ok(y)
        }
    }

    /// Inference on a `[1, side, side]` input.
    pub fn predict(&self, x: &Field) -> Result<Field> {
        let mut tape = Tape::new();
        let b = bind(&mut tape, &self.params, false);
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, &b, xv)?;
        Ok(tape.value(y).clone())
    }
}
