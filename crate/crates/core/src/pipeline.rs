//! Data generation, training and evaluation driven by a [`RunConfig`].

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetSource, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport, FdmStepper, NetworkStepper, Protocol, Stepper, Timing};
use crate::fdm::{self, GridSpec, NsParams};
use crate::field::Field;
use crate::io;
use crate::model::Network;
use crate::msr::ResidualSpec;
use crate::randfield::{sample_grf, PRNG_NAME};
use crate::train::{self, DataPool, FixedSet, ForcingStream, PoolSource, Sample, SampleSource, TrainReport};

/// Random-field draw for `seed`: the forcing of a Poisson problem or the
/// initial vorticity of a flow.
pub fn draw(cfg: &RunConfig, seed: u64) -> Result<Field> {
    sample_grf(&cfg.grf(seed))
}

fn ns_setup(cfg: &RunConfig) -> Result<(GridSpec, NsParams)> {
    let grid = cfg.grid_spec()?;
    let p = cfg.ns_params(1)?.ok_or_else(|| Error::config("problem.kind", "not a Navier-Stokes problem"))?;
    Ok((grid, p))
}

/// Initial stream function for `seed`: the solve of the sampled vorticity,
/// advanced `warm_start_steps` FDM steps.
pub fn ns_initial_state(cfg: &RunConfig, seed: u64) -> Result<Field> {
    let (grid, p) = ns_setup(cfg)?;
    let omega = draw(cfg, seed)?;
    let warm = cfg.problem.ns.map_or(0, |c| c.warm_start_steps);
    let psi = fdm::poisson_solve(&omega, &grid, cfg.grid.cg_tol)?;
    let stepper = FdmStepper { grid, params: p, tol: cfg.grid.cg_tol };
    Ok(eval::rollout(&stepper, &psi, warm)?.pop().expect("non-empty"))
}

/// Reference trajectory `[ψ⁰, …, ψ^steps]` from the initial state of `seed`.
pub fn ns_reference(cfg: &RunConfig, seed: u64, steps: usize) -> Result<Vec<Field>> {
    let (grid, p) = ns_setup(cfg)?;
    let psi0 = ns_initial_state(cfg, seed)?;
    eval::rollout(&FdmStepper { grid, params: p, tol: cfg.grid.cg_tol }, &psi0, steps)
}

/// Poisson pairs `(f, u)` for `count` consecutive seeds.
pub fn poisson_pairs(cfg: &RunConfig, first_seed: u64, count: usize) -> Result<Vec<(Field, Field)>> {
    let grid = cfg.grid_spec()?;
    (0..count as u64)
        .into_par_iter()
        .map(|k| {
            let f = draw(cfg, first_seed + k)?;
            let u = fdm::poisson_solve(&f, &grid, cfg.grid.cg_tol)?;
            Ok((f, u))
        })
        .collect()
}

pub enum TestSet {
    Poisson(Vec<(Field, Field)>),
    Ns(Vec<Vec<Field>>),
}

pub fn test_set(cfg: &RunConfig) -> Result<TestSet> {
    let count = cfg.eval.test_samples;
    if cfg.problem.kind.is_navier_stokes() {
        let steps = match cfg.eval.protocol {
            Protocol::OneStep => cfg.eval.trajectory_steps,
            Protocol::Rollout { horizon } => horizon,
        };
        let trajs = (0..count as u64)
            .into_par_iter()
            .map(|k| ns_reference(cfg, cfg.seeds.test + k, steps))
            .collect::<Result<Vec<_>>>()?;
        Ok(TestSet::Ns(trajs))
    } else {
        Ok(TestSet::Poisson(poisson_pairs(cfg, cfg.seeds.test, count)?))
    }
}

pub fn evaluate(model: &dyn Stepper, cfg: &RunConfig, set: &TestSet) -> Result<EvalReport> {
    let gauge_free = cfg.grid_spec()?.is_periodic();
    match set {
        TestSet::Poisson(pairs) => eval::evaluate_poisson(model, pairs, gauge_free),
        TestSet::Ns(trajs) => eval::evaluate_ns(model, trajs, cfg.eval.protocol, gauge_free),
    }
}

/// NS training states: warm-started initial states, optionally with the FDM
/// trajectories that follow them.
fn ns_states(cfg: &RunConfig) -> Result<Vec<Vec<Field>>> {
    let steps = match cfg.data.source {
        DatasetSource::FdmTrajectories => cfg.data.trajectory_steps,
        _ => 0,
    };
    (0..cfg.data.samples as u64)
        .into_par_iter()
        .map(|k| ns_reference(cfg, cfg.seeds.train + k, steps))
        .collect()
}

/// Builds the training sample source the config asks for.
pub fn sample_source(cfg: &RunConfig, spec: &ResidualSpec) -> Result<Box<dyn SampleSource>> {
    use crate::train::LossKind::*;
    let ns = cfg.problem.kind.is_navier_stokes();
    let shuffle = cfg.seeds.shuffle;
    let source: Box<dyn SampleSource> = match (cfg.data.source, ns, cfg.train.loss) {
        (DatasetSource::SampledInitials, false, _) => Box::new(ForcingStream {
            grf: cfg.grf(0),
            next_seed: cfg.seeds.train,
        }),
        (DatasetSource::FdmTrajectories, false, Msr) => {
            let samples = (0..cfg.data.samples as u64)
                .into_par_iter()
                .map(|k| Ok(Sample::Forcing { f: draw(cfg, cfg.seeds.train + k)? }))
                .collect::<Result<Vec<_>>>()?;
            Box::new(FixedSet::new(samples, shuffle)?)
        }
        (DatasetSource::FdmTrajectories, false, Mse) => {
            let samples = poisson_pairs(cfg, cfg.seeds.train, cfg.data.samples)?
                .into_iter()
                .map(|(f, u)| Sample::ForcingPair { f, u })
                .collect();
            Box::new(FixedSet::new(samples, shuffle)?)
        }
        (DatasetSource::SampledInitials, true, _) | (DatasetSource::FdmTrajectories, true, Msr) => {
            let states: Vec<Field> = ns_states(cfg)?.into_iter().flatten().collect();
            let samples = states
                .into_par_iter()
                .map(|psi| Sample::state(psi, spec))
                .collect::<Result<Vec<_>>>()?;
            Box::new(FixedSet::new(samples, shuffle)?)
        }
        (DatasetSource::FdmTrajectories, true, Mse) => {
            let mut samples = Vec::new();
            for traj in ns_states(cfg)? {
                for w in traj.windows(2) {
                    samples.push(Sample::StatePair { psi: w[0].clone(), next: w[1].clone() });
                }
            }
            Box::new(FixedSet::new(samples, shuffle)?)
        }
        (DatasetSource::Pool, _, _) => {
            let pc = cfg.data.pool.ok_or_else(|| Error::config("data.pool", "missing"))?;
            let initials: Vec<Field> = ns_states(cfg)?.into_iter().flatten().collect();
            let pool = DataPool::new(initials, pc.size, pc.refresh_fraction, pc.refresh_period, pc.reinit_period, shuffle)?;
            Box::new(PoolSource { pool, spec: *spec })
        }
    };
    Ok(source)
}

/// Everything a run produces except wall-clock timing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub prng: String,
    pub param_count: usize,
    pub train: TrainReport,
    pub eval: EvalReport,
}

/// Trains and evaluates per `cfg`, writing into `out`:
/// `config.json`, `checkpoint/`, `checkpoints/iter_<k>/`, `loss_curve.csv`,
/// `summary.json`, `eval_errors.csv` and `timing.json` (the only file that
/// differs between identical runs).
pub fn run(cfg: &RunConfig, out: &Path, force: bool) -> Result<(Network, RunSummary)> {
    cfg.validate()?;
    io::prepare_output_dir(out, force)?;
    io::write_json(&out.join("config.json"), cfg)?;
    let spec = cfg.residual_spec()?;
    let mut net = Network::build(cfg.network.clone(), cfg.seeds.init)?;
    let report = {
        let mut source = sample_source(cfg, &spec)?;
        let ckpt = out.join("checkpoints");
        let mut on_checkpoint = |it: usize, n: &Network| io::save_checkpoint(&ckpt.join(format!("iter_{it:07}")), n, it);
        train::train(&mut net, &spec, &cfg.train, source.as_mut(), &mut on_checkpoint)?
    };
    io::save_checkpoint(&out.join("checkpoint"), &net, report.iters)?;
    io::write_bytes(&out.join("loss_curve.csv"), report.to_csv().as_bytes())?;
    if let Some((iter, loss)) = report.diverged {
        return Err(Error::Diverged { iter, loss });
    }
    let set = test_set(cfg)?;
    let model = NetworkStepper { net: &net, spec };
    let eval_report = evaluate(&model, cfg, &set)?;
    io::write_bytes(&out.join("eval_errors.csv"), eval_report.to_csv().as_bytes())?;
    let probe = match &set {
        TestSet::Poisson(p) => p[0].0.clone(),
        TestSet::Ns(t) => t[0][0].clone(),
    };
    let timing = eval::time_inference(&model, &probe, cfg.eval.timing_reps)?;
    io::write_json(&out.join("timing.json"), &timing)?;
    let summary = RunSummary {
        prng: PRNG_NAME.to_string(),
        param_count: net.param_count(),
        train: report,
        eval: eval_report,
    };
    io::write_json(&out.join("summary.json"), &summary)?;
    Ok((net, summary))
}

/// Loads a checkpoint and evaluates it on the config's test set.
pub fn evaluate_checkpoint(cfg: &RunConfig, dir: &Path) -> Result<(EvalReport, Timing)> {
    let (net, _) = io::load_checkpoint(dir)?;
    let spec = cfg.residual_spec()?;
    let set = test_set(cfg)?;
    let model = NetworkStepper { net: &net, spec };
    let report = evaluate(&model, cfg, &set)?;
    let probe = match &set {
        TestSet::Poisson(p) => p[0].0.clone(),
        TestSet::Ns(t) => t[0][0].clone(),
    };
    Ok((report, eval::time_inference(&model, &probe, cfg.eval.timing_reps)?))
}

/// FDM reference evaluated with the same protocol: the metric floor.
pub fn evaluate_fdm(cfg: &RunConfig) -> Result<EvalReport> {
    let set = test_set(cfg)?;
    let grid = cfg.grid_spec()?;
    let tol = cfg.grid.cg_tol;
    match cfg.ns_params(1)? {
        Some(p) => evaluate(&FdmStepper { grid, params: p, tol }, cfg, &set),
        None => evaluate(&eval::FdmPoisson { grid, tol }, cfg, &set),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenManifest {
    pub prng: String,
    pub problem: crate::config::ProblemConfig,
    pub n: usize,
    pub first_seed: u64,
    pub count: usize,
    pub solved: bool,
    pub files: Vec<String>,
}

/// Writes `count` random-field samples (and their solves when `solve` is set)
/// as LDNF files plus `manifest.json`.
pub fn generate(cfg: &RunConfig, out: &Path, first_seed: u64, count: usize, solve: bool, force: bool) -> Result<GenManifest> {
    io::prepare_output_dir(out, force)?;
    let grid = cfg.grid_spec()?;
    let ns = cfg.problem.kind.is_navier_stokes();
    let items = (0..count as u64)
        .into_par_iter()
        .map(|k| {
            let seed = first_seed + k;
            let input = if ns { ns_initial_state(cfg, seed)? } else { draw(cfg, seed)? };
            let target = match (solve, ns) {
                (false, _) => None,
                (true, false) => Some(fdm::poisson_solve(&input, &grid, cfg.grid.cg_tol)?),
                (true, true) => {
                    let (g, p) = ns_setup(cfg)?;
                    Some(fdm::ns_advance(&input, &g, &p, cfg.grid.cg_tol)?)
                }
            };
            Ok((seed, input, target))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut files = Vec::new();
    let (a, b) = if ns { ("psi", "psi_next") } else { ("f", "u") };
    for (seed, input, target) in items {
        let name = format!("{a}_{seed:08}.ldnf");
        io::write_field(&out.join(&name), &input)?;
        files.push(name);
        if let Some(t) = target {
            let name = format!("{b}_{seed:08}.ldnf");
            io::write_field(&out.join(&name), &t)?;
            files.push(name);
        }
    }
    let manifest = GenManifest {
        prng: PRNG_NAME.to_string(),
        problem: cfg.problem.clone(),
        n: cfg.grid.n,
        first_seed,
        count,
        solved: solve,
        files,
    };
    io::write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}
