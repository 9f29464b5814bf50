//! Activation-free dilated CNN used as the translation-equivariant comparator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::lordnet::{Bound, ParamSet};
use crate::tensor::{ConvBoundary, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnConfig {
    pub channels: usize,
    /// Side of the square spatial input.
    pub side: usize,
    /// Grid diameter the receptive field must span; defaults to `side - 1`.
    #[serde(default)]
    pub span: Option<usize>,
    pub boundary: ConvBoundary,
    /// Explicit dilations; derived by doubling from 1 when absent.
    #[serde(default)]
    pub dilations: Option<Vec<usize>>,
}

/// Doubling dilations `1, 2, 4, …` until their sum reaches `span`.
pub fn doubling_dilations(span: usize) -> Vec<usize> {
    let mut out = vec![1];
    let mut d = 1;
    while out.iter().sum::<usize>() < span {
        d *= 2;
        out.push(d);
    }
    out
}

impl CnnConfig {
    pub fn new(side: usize, channels: usize, boundary: ConvBoundary) -> Self {
        CnnConfig {
            channels,
            side,
            span: None,
            boundary,
            dilations: None,
        }
    }

    pub fn span(&self) -> usize {
        self.span.unwrap_or(self.side.saturating_sub(1))
    }

    pub fn dilations(&self) -> Vec<usize> {
        self.dilations
            .clone()
            .unwrap_or_else(|| doubling_dilations(self.span()))
    }

    /// Receptive-field radius of the 3×3 stack, `Σ d_l`.
    pub fn radius(&self) -> usize {
        self.dilations().iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.side == 0 {
            return Err(Error::config("network", "channels and side must be ≥ 1"));
        }
        let d = self.dilations();
        if d.is_empty() || d.contains(&0) {
            return Err(Error::config("network.dilations", "need at least one dilation, all ≥ 1"));
        }
        if self.radius() < self.span() {
            return Err(Error::config(
                "network.dilations",
                format!(
                    "receptive radius {} does not cover grid diameter {}",
                    self.radius(),
                    self.span()
                ),
            ));
        }
        Ok(())
    }

    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.dilations();
        let last = d.len() - 1;
        (0..d.len())
            .map(|l| {
                let cin = if l == 0 { 1 } else { self.channels };
                let cout = if l == last { 1 } else { self.channels };
                (format!("conv{l}.w"), vec![cout, cin, 3, 3])
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Normal weights with variance `1 / (9 · C_in)`.
    pub fn init(&self, seed: u64) -> Result<ParamSet> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, shape) in self.layout() {
            let normal = Normal::new(0.0, (1.0 / (9 * shape[1]) as f64).sqrt())
                .map_err(|e| Error::Numerical(e.to_string()))?;
            params.insert(name, Field::from_fn(&shape, |_| normal.sample(&mut rng)));
        }
        Ok(params)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let xs = tape.value(x).shape();
        if xs != [1, self.side, self.side] {
            return Err(Error::shape(
                "cnn",
                format!("input {xs:?} for a {0}×{0} network", self.side),
            ));
        }
        let mut h = x;
        for (l, &d) in self.dilations().iter().enumerate() {
            h = tape.conv2d_dilated(h, p.get(&format!("conv{l}.w"))?, d, self.boundary)?;
        }
        Ok(h)
    }
}
