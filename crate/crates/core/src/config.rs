//! Run configuration documents.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Protocol;
use crate::fdm::{Boundary, GridSpec, NsParams};
use crate::io;
use crate::model::ModelConfig;
use crate::msr::{ResidualKind, ResidualSpec};
use crate::randfield::GrfSpec;
use crate::train::{LossKind, TrainConfig};

/// Covariance `amplitude · (−Δ + shift)^(−exponent)` without grid or seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Covariance {
    pub amplitude: f64,
    pub shift: f64,
    pub exponent: f64,
}

impl Covariance {
    pub fn at(&self, n: usize, seed: u64) -> GrfSpec {
        GrfSpec {
            amplitude: self.amplitude,
            shift: self.shift,
            exponent: self.exponent,
            n,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NsConfig {
    pub reynolds: f64,
    pub dt: f64,
    /// FDM steps from the sampled vorticity to the first usable state.
    #[serde(default)]
    pub warm_start_steps: usize,
    #[serde(default = "unit")]
    pub lid_speed: f64,
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub kind: ResidualKind,
    /// Random-field law of the forcing (Poisson) or initial vorticity (NS);
    /// the standard law of the problem family when absent.
    #[serde(default)]
    pub covariance: Option<Covariance>,
    #[serde(default)]
    pub ns: Option<NsConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub n: usize,
    #[serde(default = "default_tol")]
    pub cg_tol: f64,
}

fn default_tol() -> f64 {
    crate::fdm::DEFAULT_CG_TOL
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    /// Fresh random-field samples (warm-started for NS); residual training only.
    SampledInitials,
    /// A fixed set of FDM-generated pairs or states.
    FdmTrajectories,
    /// Rolling pool refreshed with model predictions; residual training only.
    Pool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolConfig {
    pub size: usize,
    pub refresh_fraction: f64,
    pub refresh_period: usize,
    pub reinit_period: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DatasetSource,
    /// Size of the sample set: distinct initial conditions, FDM pairs, or warm-start cache.
    #[serde(default)]
    pub samples: usize,
    /// FDM steps recorded per NS trajectory when building fixed sets.
    #[serde(default)]
    pub trajectory_steps: usize,
    #[serde(default)]
    pub pool: Option<PoolConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub test_samples: usize,
    pub protocol: Protocol,
    /// Reference trajectory length for NS one-step evaluation.
    #[serde(default)]
    pub trajectory_steps: usize,
    #[serde(default = "default_reps")]
    pub timing_reps: usize,
}

fn default_reps() -> usize {
    crate::eval::MIN_TIMING_REPS
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    /// Network initialization.
    pub init: u64,
    /// First random-field seed of the training stream.
    pub train: u64,
    /// First random-field seed of the test set.
    pub test: u64,
    /// Batch order and pool bookkeeping.
    #[serde(default)]
    pub shuffle: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    pub grid: GridConfig,
    pub network: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub seeds: Seeds,
    pub output_dir: PathBuf,
}

/// Environment variable that replaces `output_dir`.
pub const OUTPUT_ENV: &str = "LORDNET_OUT";

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = io::parse_json(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn with_env_output(mut self) -> Self {
        if let Some(dir) = std::env::var_os(OUTPUT_ENV) {
            self.output_dir = PathBuf::from(dir);
        }
        self
    }

    pub fn covariance(&self) -> Covariance {
        self.problem.covariance.unwrap_or(if self.problem.kind.is_navier_stokes() {
            Covariance {
                amplitude: 512.0,
                shift: 64.0,
                exponent: 4.0,
            }
        } else {
            Covariance {
                amplitude: 7f64.powf(1.5),
                shift: 49.0,
                exponent: 2.5,
            }
        })
    }

    pub fn grf(&self, seed: u64) -> GrfSpec {
        self.covariance().at(self.grid.n, seed)
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        let n = self.grid.n;
        match self.problem.kind {
            ResidualKind::PoissonDirichlet => GridSpec::new(n, Boundary::DirichletZero),
            ResidualKind::PoissonPeriodic | ResidualKind::NsPeriodic => GridSpec::new(n, Boundary::Periodic),
            ResidualKind::NsLiddriven => {
                let lid_speed = self.problem.ns.map_or(1.0, |c| c.lid_speed);
                GridSpec::new(n, Boundary::LidDriven { lid_speed })
            }
        }
    }

    /// NS step constants; `steps` is the evaluation horizon or trajectory length.
    pub fn ns_params(&self, steps: usize) -> Result<Option<NsParams>> {
        match (self.problem.kind.is_navier_stokes(), self.problem.ns) {
            (true, Some(c)) => Ok(Some(NsParams::new(c.reynolds, c.dt, steps)?)),
            (true, None) => Err(Error::config("problem.ns", "Navier-Stokes problems need reynolds and dt")),
            (false, Some(_)) => Err(Error::config("problem.ns", "only valid for Navier-Stokes problems")),
            (false, None) => Ok(None),
        }
    }

    pub fn residual_spec(&self) -> Result<ResidualSpec> {
        ResidualSpec::new(self.problem.kind, self.grid_spec()?, self.ns_params(1)?)
    }

    /// Number of random-field seeds the training data consumes, starting at `seeds.train`.
    pub fn train_seed_count(&self) -> u64 {
        let fresh = (self.train.max_iters as u64).saturating_mul(self.train.batch as u64);
        match (self.data.source, self.problem.kind.is_navier_stokes()) {
            (DatasetSource::SampledInitials, false) => fresh,
            _ => self.data.samples as u64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.network.validate()?;
        let c = self.covariance();
        if !(c.amplitude > 0.0 && c.shift > 0.0 && c.exponent > 0.0) {
            return Err(Error::config("problem.covariance", "amplitude, shift and exponent must be positive"));
        }
        if !self.grid.n.is_power_of_two() || self.grid.n < 4 {
            return Err(Error::config("grid.n", "random fields need a power-of-two side ≥ 4"));
        }
        if !(self.grid.cg_tol > 0.0) {
            return Err(Error::config("grid.cg_tol", "must be > 0"));
        }
        let spec = self.residual_spec()?;
        let m = spec.grid.unknown_side();
        if self.network.side() != m {
            return Err(Error::config(
                "network",
                format!("network side {} does not match the {m}×{m} unknown block", self.network.side()),
            ));
        }
        let residual_only = matches!(self.data.source, DatasetSource::SampledInitials | DatasetSource::Pool);
        if residual_only && self.train.loss == LossKind::Mse {
            return Err(Error::config(
                "data.source",
                "sampled_initials and pool provide no targets; use fdm_trajectories for mse",
            ));
        }
        let ns = self.problem.kind.is_navier_stokes();
        if self.data.source == DatasetSource::Pool && !ns {
            return Err(Error::config("data.source", "pool training applies to Navier-Stokes problems"));
        }
        if self.data.source == DatasetSource::Pool && self.data.pool.is_none() {
            return Err(Error::config("data.pool", "pool settings are required for the pool source"));
        }
        let needs_set = self.data.source != DatasetSource::SampledInitials || ns;
        if needs_set && self.data.samples == 0 && self.train.max_iters > 0 {
            return Err(Error::config("data.samples", "must be ≥ 1 for this source"));
        }
        if ns && self.data.source == DatasetSource::FdmTrajectories && self.data.trajectory_steps == 0 {
            return Err(Error::config("data.trajectory_steps", "must be ≥ 1"));
        }
        if self.eval.test_samples == 0 {
            return Err(Error::config("eval.test_samples", "must be ≥ 1"));
        }
        if ns {
            let need = match self.eval.protocol {
                Protocol::OneStep => self.eval.trajectory_steps,
                Protocol::Rollout { horizon } => horizon,
            };
            if need == 0 {
                return Err(Error::config("eval", "NS evaluation needs a positive trajectory length or horizon"));
            }
        } else if self.eval.protocol != Protocol::OneStep {
            return Err(Error::config("eval.protocol", "Poisson problems use one_step"));
        }
        let train = (self.seeds.train, self.train_seed_count());
        let test = (self.seeds.test, self.eval.test_samples as u64);
        let overlap = train.0 < test.0.saturating_add(test.1) && test.0 < train.0.saturating_add(train.1);
        if overlap && train.1 > 0 {
            return Err(Error::config(
                "seeds",
                format!(
                    "training seeds [{}, {}) overlap test seeds [{}, {})",
                    train.0,
                    train.0.saturating_add(train.1),
                    test.0,
                    test.0 + test.1
                ),
            ));
        }
        Ok(())
    }
}
