//! Relative-error metrics, autoregressive rollout and evaluation reports.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fdm::{self, GridSpec, NsParams};
use crate::field::Field;
use crate::model::Network;
use crate::msr::ResidualSpec;
use crate::train::forcing_input;

/// Anything mapping a full grid field to a full grid field: a Poisson solve
/// `f ↦ u` or one time step `ψᵗ ↦ ψᵗ⁺¹`.
pub trait Stepper: Sync {
    fn advance(&self, input: &Field) -> Result<Field>;
}

/// A trained network applied through the residual spec's grid conventions.
#[derive(Debug, Clone, Copy)]
pub struct NetworkStepper<'a> {
    pub net: &'a Network,
    pub spec: ResidualSpec,
}

impl Stepper for NetworkStepper<'_> {
    fn advance(&self, input: &Field) -> Result<Field> {
        let x = if self.spec.kind.is_navier_stokes() {
            self.spec.to_unknowns(input)?
        } else {
            forcing_input(input, &self.spec)?
        };
        self.spec.to_grid(&self.net.predict(&x)?)
    }
}

/// One FDM time step of the stream function.
#[derive(Debug, Clone, Copy)]
pub struct FdmStepper {
    pub grid: GridSpec,
    pub params: NsParams,
    pub tol: f64,
}

impl Stepper for FdmStepper {
    fn advance(&self, psi: &Field) -> Result<Field> {
        fdm::ns_advance(psi, &self.grid, &self.params, self.tol)
    }
}

/// The CG Poisson solve.
#[derive(Debug, Clone, Copy)]
pub struct FdmPoisson {
    pub grid: GridSpec,
    pub tol: f64,
}

impl Stepper for FdmPoisson {
    fn advance(&self, f: &Field) -> Result<Field> {
        fdm::poisson_solve(f, &self.grid, self.tol)
    }
}

/// Predicts zero everywhere.
#[derive(Debug, Clone, Copy)]
pub struct ZeroStepper;

impl Stepper for ZeroStepper {
    fn advance(&self, input: &Field) -> Result<Field> {
        Ok(Field::zeros(input.shape()))
    }
}

/// `‖pred − truth‖₂ / ‖truth‖₂`, mean-projecting both fields when `gauge_free`.
pub fn relative_error(pred: &Field, truth: &Field, gauge_free: bool) -> Result<f64> {
    pred.expect_same_shape(truth, "relative_error")?;
    let (p, t) = if gauge_free {
        (fdm::subtract_mean(pred), fdm::subtract_mean(truth))
    } else {
        (pred.clone(), truth.clone())
    };
    let denom = t.norm2();
    if denom == 0.0 {
        return Err(Error::Degenerate("relative error against a zero-norm truth".into()));
    }
    let diff = p.zip_map(&t, |a, b| a - b)?;
    Ok(diff.norm2() / denom)
}

/// `[ψ⁰, …, ψ^steps]`, feeding each prediction back as the next input.
pub fn rollout(model: &dyn Stepper, psi0: &Field, steps: usize) -> Result<Vec<Field>> {
    let mut out = Vec::with_capacity(steps + 1);
    out.push(psi0.clone());
    for step in 1..=steps {
        let next = model.advance(out.last().expect("non-empty"))?;
        if !next.is_finite() {
            return Err(Error::NonFiniteState { step });
        }
        out.push(next);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Protocol {
    OneStep,
    Rollout { horizon: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    /// One entry per test sample: the one-step error, or the terminal rollout error.
    pub errors: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation across test samples.
    pub std: f64,
    /// Mean error after each rollout step `1..=horizon`; a single entry for one-step.
    pub curve: Vec<f64>,
}

impl EvalReport {
    fn from_rows(protocol: Protocol, rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::contract("evaluate", "empty test set"));
        }
        let errors: Vec<f64> = rows.iter().map(|r| *r.last().expect("non-empty row")).collect();
        let len = rows[0].len();
        let curve = (0..len)
            .map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / rows.len() as f64)
            .collect();
        let (mean, std) = mean_std(&errors);
        if !mean.is_finite() || !std.is_finite() {
            return Err(Error::Numerical("non-finite evaluation error".into()));
        }
        Ok(EvalReport {
            protocol,
            errors,
            mean,
            std,
            curve,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample,error\n");
        for (k, e) in self.errors.iter().enumerate() {
            s.push_str(&format!("{k},{e:e}\n"));
        }
        s
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Poisson evaluation over `(f, u)` pairs.
pub fn evaluate_poisson(model: &dyn Stepper, pairs: &[(Field, Field)], gauge_free: bool) -> Result<EvalReport> {
    let rows: Result<Vec<Vec<f64>>> = pairs
        .par_iter()
        .map(|(f, u)| Ok(vec![relative_error(&model.advance(f)?, u, gauge_free)?]))
        .collect();
    EvalReport::from_rows(Protocol::OneStep, rows?)
}

/// NS evaluation against reference trajectories `[ψ⁰, …, ψᴴ]`.
///
/// One-step: per trajectory, the mean over its transitions of the error of a
/// single model step from the reference state. Rollout: the model runs from
/// `ψ⁰` for `horizon` steps and is compared with the reference at every step.
pub fn evaluate_ns(
    model: &dyn Stepper,
    trajectories: &[Vec<Field>],
    protocol: Protocol,
    gauge_free: bool,
) -> Result<EvalReport> {
    let rows: Result<Vec<Vec<f64>>> = trajectories
        .par_iter()
        .map(|traj| match protocol {
            Protocol::OneStep => {
                if traj.len() < 2 {
                    return Err(Error::contract("evaluate_ns", "trajectory shorter than two states"));
                }
                let mut acc = 0.0;
                for w in traj.windows(2) {
                    acc += relative_error(&model.advance(&w[0])?, &w[1], gauge_free)?;
                }
                Ok(vec![acc / (traj.len() - 1) as f64])
            }
            Protocol::Rollout { horizon } => {
                if horizon == 0 || traj.len() <= horizon {
                    return Err(Error::contract(
                        "evaluate_ns",
                        format!("horizon {horizon} needs a reference of more than {horizon} states"),
                    ));
                }
                let states = rollout(model, &traj[0], horizon)?;
                (1..=horizon)
                    .map(|k| relative_error(&states[k], &traj[k], gauge_free))
                    .collect()
            }
        })
        .collect();
    EvalReport::from_rows(protocol, rows?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub median_seconds: f64,
    pub reps: usize,
}

pub const MIN_TIMING_REPS: usize = 100;

/// Median wall-clock time of one `advance` call over at least [`MIN_TIMING_REPS`] runs.
pub fn time_inference(model: &dyn Stepper, input: &Field, reps: usize) -> Result<Timing> {
    let reps = reps.max(MIN_TIMING_REPS);
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        std::hint::black_box(model.advance(input)?);
        samples.push(t0.elapsed().as_secs_f64());
    }
    samples.sort_by(f64::total_cmp);
    let median = if reps % 2 == 1 {
        samples[reps / 2]
    } else {
        0.5 * (samples[reps / 2 - 1] + samples[reps / 2])
    };
    Ok(Timing {
        median_seconds: median,
        reps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdm::DEFAULT_CG_TOL;
    use crate::randfield::{sample_grf, GrfSpec};

    fn bumpy(n: usize) -> Field {
        Field::from_fn(&[n, n], |ix| ((ix[0] * 7 + ix[1] * 3) % 5) as f64 - 1.3)
    }

    #[test]
    fn relative_error_examples() {
        let t = bumpy(6);
        assert_eq!(relative_error(&t, &t, false).unwrap(), 0.0);
        assert!((relative_error(&t.scaled(2.0), &t, false).unwrap() - 1.0).abs() < 1e-15);
        assert!((relative_error(&Field::zeros(&[6, 6]), &t, true).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(
            relative_error(&t, &Field::zeros(&[6, 6]), false),
            Err(Error::Degenerate(_))
        ));
        // constants are invisible on periodic grids
        let shifted = t.map(|v| v + 4.0);
        assert!(relative_error(&shifted, &t, true).unwrap() < 1e-15);
        assert!(matches!(relative_error(&Field::filled(&[3, 3], 1.0), &Field::filled(&[3, 3], 2.0), true), Err(Error::Degenerate(_))));
    }

    fn lid_case() -> (FdmStepper, Field) {
        let grid = GridSpec::lid_driven(12, 1.0).unwrap();
        let p = NsParams::new(100.0, 0.005, 6).unwrap();
        let w = sample_grf(&GrfSpec::initial_vorticity(16, 3)).unwrap();
        let w = Field::from_fn(&[12, 12], |ix| w.get(&[ix[0], ix[1]]));
        let psi0 = fdm::poisson_solve(&w, &grid, DEFAULT_CG_TOL).unwrap();
        (FdmStepper { grid, params: p, tol: DEFAULT_CG_TOL }, psi0)
    }

    #[test]
    fn rollout_basics() {
        let (s, psi0) = lid_case();
        assert_eq!(rollout(&s, &psi0, 0).unwrap(), vec![psi0.clone()]);
        let four = rollout(&s, &psi0, 4).unwrap();
        let a = rollout(&s, &psi0, 2).unwrap();
        let b = rollout(&s, a.last().unwrap(), 2).unwrap();
        assert_eq!(four[4], b[2]);
    }

    #[test]
    fn fdm_rollout_reproduces_trajectory_bitwise() {
        let (s, _) = lid_case();
        let w = sample_grf(&GrfSpec::initial_vorticity(16, 3)).unwrap();
        let w = Field::from_fn(&[12, 12], |ix| w.get(&[ix[0], ix[1]]));
        let traj = fdm::ns_trajectory(&w, &s.grid, &s.params, s.tol).unwrap();
        assert_eq!(rollout(&s, &traj[0], s.params.steps).unwrap(), traj);
    }

    struct Blowup;
    impl Stepper for Blowup {
        fn advance(&self, x: &Field) -> Result<Field> {
            Ok(x.map(|v| v * 1e200))
        }
    }

    #[test]
    fn rollout_reports_failing_step() {
        let x = Field::filled(&[2, 2], 1.0);
        assert!(matches!(rollout(&Blowup, &x, 10), Err(Error::NonFiniteState { step: 2 })));
    }

    #[test]
    fn fdm_and_zero_models_calibrate_the_metric() {
        let (s, psi0) = lid_case();
        let traj = rollout(&s, &psi0, 6).unwrap();
        let trajs = vec![traj.clone(), traj[1..].to_vec()];
        let one = evaluate_ns(&s, &trajs, Protocol::OneStep, false).unwrap();
        assert!(one.errors.iter().all(|&e| e <= 10.0 * DEFAULT_CG_TOL));
        let roll = evaluate_ns(&s, &trajs, Protocol::Rollout { horizon: 5 }, false).unwrap();
        assert_eq!(roll.curve.len(), 5);
        assert!(roll.curve.iter().all(|&e| e <= 10.0 * DEFAULT_CG_TOL));
        let zero = evaluate_ns(&ZeroStepper, &trajs, Protocol::Rollout { horizon: 5 }, false).unwrap();
        assert!(zero.errors.iter().all(|&e| (e - 1.0).abs() < 1e-15));
        assert_eq!(zero.std, 0.0);
    }

    #[test]
    fn poisson_evaluation_of_the_solver_is_at_tolerance() {
        let grid = GridSpec::periodic(16).unwrap();
        let solver = FdmPoisson { grid, tol: DEFAULT_CG_TOL };
        let pairs: Vec<(Field, Field)> = (0..4)
            .map(|k| {
                let f = sample_grf(&GrfSpec::poisson_forcing(16, k)).unwrap();
                let u = fdm::poisson_solve(&f, &grid, 1e-13).unwrap();
                (f, u)
            })
            .collect();
        let rep = evaluate_poisson(&solver, &pairs, true).unwrap();
        assert!(rep.mean <= 10.0 * DEFAULT_CG_TOL, "{}", rep.mean);
        assert_eq!(rep, evaluate_poisson(&solver, &pairs, true).unwrap());
        assert_eq!(rep.to_csv().lines().count(), 5);
    }

    #[test]
    fn timing_uses_enough_repetitions() {
        let t = time_inference(&ZeroStepper, &Field::zeros(&[4, 4]), 3).unwrap();
        assert_eq!(t.reps, MIN_TIMING_REPS);
        assert!(t.median_seconds >= 0.0);
    }
}
