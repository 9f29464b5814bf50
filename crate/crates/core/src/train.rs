//! Adam, step-decay schedules, sample sources and the MSE/MSR training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{NetworkStepper, Stepper};
use crate::fdm;
use crate::field::Field;
use crate::lordnet::{bind, ParamSet};
use crate::model::Network;
use crate::msr::{self, ResidualSpec};
use crate::randfield::{sample_grf, GrfSpec};
use crate::tensor::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    Msr,
}

/// One training example. The residual variants hold no solution data.
#[derive(Debug, Clone, PartialEq)]
pub enum Sample {
    /// Poisson forcing on the full `[n, n]` grid.
    Forcing { f: Field },
    /// Poisson forcing with its solved field.
    ForcingPair { f: Field, u: Field },
    /// Stream function `ψᵗ` with its Euler target (`[1, m, m]`).
    State { psi: Field, target: Field },
    /// Stream function pair `(ψᵗ, ψᵗ⁺¹)`.
    StatePair { psi: Field, next: Field },
}

impl Sample {
    pub fn loss_kind(&self) -> LossKind {
        match self {
            Sample::Forcing { .. } | Sample::State { .. } => LossKind::Msr,
            Sample::ForcingPair { .. } | Sample::StatePair { .. } => LossKind::Mse,
        }
    }

    /// Network input, `[1, m, m]`.
    pub fn input(&self, spec: &ResidualSpec) -> Result<Field> {
        match self {
            Sample::Forcing { f } | Sample::ForcingPair { f, .. } => forcing_input(f, spec),
            Sample::State { psi, .. } | Sample::StatePair { psi, .. } => spec.to_unknowns(psi),
        }
    }

    pub fn state(psi: Field, spec: &ResidualSpec) -> Result<Sample> {
        let target = msr::ns_target(&psi, spec)?;
        Ok(Sample::State { psi, target })
    }
}

/// Network input for a Poisson forcing: the equation-set block, mean-projected on periodic grids.
pub fn forcing_input(f: &Field, spec: &ResidualSpec) -> Result<Field> {
    if spec.grid.is_periodic() {
        spec.to_unknowns(&fdm::subtract_mean(f))
    } else {
        spec.to_unknowns(f)
    }
}

fn sample_loss(tape: &mut Tape, net: &Network, spec: &ResidualSpec, s: &Sample, trainable: bool) -> Result<(crate::tensor::Var, Vec<crate::tensor::Var>)> {
    let bound = bind(tape, &net.params, trainable);
    let x = tape.constant(s.input(spec)?);
    let pred = net.forward(tape, &bound, x)?;
    let loss = match s {
        Sample::Forcing { f } => {
            let r = msr::poisson_residual(tape, pred, f, spec)?;
            msr::msr_loss(tape, r)?
        }
        Sample::State { target, .. } => {
            let r = msr::ns_residual_with_target(tape, target, pred, spec)?;
            msr::msr_loss(tape, r)?
        }
        Sample::ForcingPair { u, .. } => msr::mse_loss(tape, pred, &spec.to_unknowns(u)?)?,
        Sample::StatePair { next, .. } => msr::mse_loss(tape, pred, &spec.to_unknowns(next)?)?,
    };
    Ok((loss, bound.vars().map(|(_, v)| v).collect()))
}

/// Mean loss over `samples` and its gradient, in parameter order.
///
/// Items are evaluated on separate tapes in parallel; gradients are summed in
/// sample order, so the result does not depend on the thread count.
pub fn batch_loss_grad(net: &Network, spec: &ResidualSpec, samples: &[Sample]) -> Result<(f64, Vec<Field>)> {
    if samples.is_empty() {
        return Err(Error::contract("batch_loss_grad", "empty batch"));
    }
    let per: Vec<Result<(f64, Vec<Field>)>> = samples
        .par_iter()
        .map(|s| {
            let mut tape = Tape::new();
            let (loss, vars) = sample_loss(&mut tape, net, spec, s, true)?;
            let g = tape.backward(loss)?;
            Ok((tape.value(loss).data()[0], vars.iter().map(|v| g.wrt(*v)).collect()))
        })
        .collect();
    let inv = 1.0 / samples.len() as f64;
    let mut total = 0.0;
    let mut grads: Vec<Field> = net.params.values().map(|f| Field::zeros(f.shape())).collect();
    for item in per {
        let (l, g) = item?;
        total += l;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            acc.axpy(inv, gi)?;
        }
    }
    Ok((total * inv, grads))
}

/// Mean loss over `samples` without gradients.
pub fn batch_loss(net: &Network, spec: &ResidualSpec, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::contract("batch_loss", "empty batch"));
    }
    let per: Vec<Result<f64>> = samples
        .par_iter()
        .map(|s| {
            let mut tape = Tape::new();
            let (loss, _) = sample_loss(&mut tape, net, spec, s, false)?;
            Ok(tape.value(loss).data()[0])
        })
        .collect();
    let mut total = 0.0;
    for l in per {
        total += l?;
    }
    Ok(total / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Field>,
    pub v: Vec<Field>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Field> = params.values().map(|f| Field::zeros(f.shape())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam update in place. Rejects non-finite gradients before touching anything.
pub fn adam_step(params: &mut ParamSet, grads: &[Field], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::contract("adam_step", "gradient list does not match parameters"));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        p.expect_same_shape(g, "adam_step")?;
        if !g.is_finite() {
            return Err(Error::Numerical(format!("non-finite gradient for `{name}`")));
        }
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (k, (p, g)) in params.values_mut().zip(grads).enumerate() {
        let (m, v) = (state.m[k].data_mut(), state.v[k].data_mut());
        let gd = g.data();
        // split borrows: m and v live in different vectors
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + (1.0 - b1) * gd[i];
            v[i] = b2 * v[i] + (1.0 - b2) * gd[i] * gd[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            *w -= lr * mh / (vh.sqrt() + state.eps);
        }
    }
    Ok(())
}

fn default_log_every() -> usize {
    100
}

fn default_divergence() -> f64 {
    1e6
}

fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub lr0: f64,
    pub decay_factor: f64,
    /// Iterations between learning-rate decays.
    pub decay_every: usize,
    pub batch: usize,
    pub max_iters: usize,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default = "default_divergence")]
    pub divergence_threshold: f64,
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    /// Adam denominator guard. Adam is invariant to the loss scale except through
    /// this constant, so residual losses with tiny gradients may need a smaller one.
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::config("train.lr0", "must be > 0"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::config("train.decay_factor", "must lie in (0, 1]"));
        }
        if self.decay_every == 0 {
            return Err(Error::config("train.decay_every", "must be ≥ 1"));
        }
        if self.batch == 0 {
            return Err(Error::config("train.batch", "must be ≥ 1"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("train.adam_eps", "must be > 0"));
        }
        if self.log_every == 0 {
            return Err(Error::config("train.log_every", "must be ≥ 1"));
        }
        Ok(())
    }

    /// `lr0 · factor^⌊iter / decay_every⌋`.
    pub fn lr_at(&self, iter: usize) -> f64 {
        self.lr0 * self.decay_factor.powi((iter / self.decay_every) as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub curve: Vec<CurvePoint>,
    pub iters: usize,
    /// `(iteration, loss)` of an aborted run; parameters are those of the last finite step.
    pub diverged: Option<(usize, f64)>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.curve.first().map(|c| c.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.curve.last().map(|c| c.loss)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,lr,loss\n");
        for c in &self.curve {
            s.push_str(&format!("{},{:e},{:e}\n", c.iter, c.lr, c.loss));
        }
        s
    }
}

/// Supplies training batches and is told about every completed update.
pub trait SampleSource {
    fn next_batch(&mut self, batch: usize) -> Result<Vec<Sample>>;

    fn after_step(&mut self, _iter: usize, _net: &Network, _spec: &ResidualSpec) -> Result<()> {
        Ok(())
    }
}

/// Fresh forcing samples with consecutive seeds.
#[derive(Debug, Clone)]
pub struct ForcingStream {
    pub grf: GrfSpec,
    pub next_seed: u64,
}

impl SampleSource for ForcingStream {
    fn next_batch(&mut self, batch: usize) -> Result<Vec<Sample>> {
        let seeds: Vec<u64> = (0..batch as u64).map(|k| self.next_seed + k).collect();
        self.next_seed += batch as u64;
        seeds
            .par_iter()
            .map(|&s| Ok(Sample::Forcing { f: sample_grf(&self.grf.with_seed(s))? }))
            .collect()
    }
}

/// A finite sample set visited in shuffled epochs.
#[derive(Debug, Clone)]
pub struct FixedSet {
    samples: Vec<Sample>,
    order: Vec<usize>,
    pos: usize,
    epoch: usize,
    rng: ChaCha8Rng,
}

impl FixedSet {
    pub fn new(samples: Vec<Sample>, seed: u64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::contract("FixedSet", "no samples"));
        }
        let mut set = FixedSet {
            order: (0..samples.len()).collect(),
            samples,
            pos: 0,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        set.order.shuffle(&mut set.rng);
        Ok(set)
    }

    /// Completed passes over the set.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

impl SampleSource for FixedSet {
    fn next_batch(&mut self, batch: usize) -> Result<Vec<Sample>> {
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
                self.epoch += 1;
            }
            out.push(self.samples[self.order[self.pos]].clone());
            self.pos += 1;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub state: Field,
    pub age: usize,
}

/// Rolling pool of stream-function states refreshed with model predictions.
///
/// Each [`pool_step`](DataPool::pool_step) ages every entry, resets entries
/// that reached `reinit_period` to a fresh initial state, then advances the
/// next `refresh_fraction` of the pool (round-robin) by one model step.
#[derive(Debug, Clone)]
pub struct DataPool {
    pub entries: Vec<PoolEntry>,
    pub initials: Vec<Field>,
    pub refresh_fraction: f64,
    /// Training iterations between pool steps.
    pub refresh_period: usize,
    /// Pool steps after which an entry is reinitialized.
    pub reinit_period: usize,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl DataPool {
    pub fn new(
        initials: Vec<Field>,
        size: usize,
        refresh_fraction: f64,
        refresh_period: usize,
        reinit_period: usize,
        seed: u64,
    ) -> Result<Self> {
        if initials.is_empty() || size == 0 {
            return Err(Error::config("train.pool", "pool needs initial states and a positive size"));
        }
        if !(0.0..=1.0).contains(&refresh_fraction) || refresh_period == 0 || reinit_period == 0 {
            return Err(Error::config(
                "train.pool",
                "refresh_fraction must lie in [0, 1]; periods must be ≥ 1",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = (0..size)
            .map(|k| PoolEntry {
                state: initials[k % initials.len()].clone(),
                age: rng.gen_range(0..reinit_period),
            })
            .collect();
        Ok(DataPool {
            entries,
            initials,
            refresh_fraction,
            refresh_period,
            reinit_period,
            cursor: 0,
            rng,
        })
    }

    pub fn pool_step(&mut self, stepper: &dyn Stepper) -> Result<()> {
        for e in &mut self.entries {
            e.age += 1;
            if e.age >= self.reinit_period {
                e.state = self.initials[self.rng.gen_range(0..self.initials.len())].clone();
                e.age = 0;
            }
        }
        let len = self.entries.len();
        let k = (self.refresh_fraction * len as f64).round() as usize;
        for _ in 0..k.min(len) {
            let e = &mut self.entries[self.cursor];
            let next = stepper.advance(&e.state)?;
            if next.is_finite() {
                e.state = next;
            } else {
                e.state = self.initials[self.rng.gen_range(0..self.initials.len())].clone();
                e.age = 0;
            }
            self.cursor = (self.cursor + 1) % len;
        }
        Ok(())
    }

    /// Draws states uniformly with replacement.
    pub fn draw(&mut self, count: usize) -> Vec<Field> {
        (0..count)
            .map(|_| self.entries[self.rng.gen_range(0..self.entries.len())].state.clone())
            .collect()
    }
}

/// A [`DataPool`] wired to a residual spec as a training source.
#[derive(Debug, Clone)]
pub struct PoolSource {
    pub pool: DataPool,
    pub spec: ResidualSpec,
}

impl SampleSource for PoolSource {
    fn next_batch(&mut self, batch: usize) -> Result<Vec<Sample>> {
        let states = self.pool.draw(batch);
        let spec = self.spec;
        states.into_par_iter().map(|psi| Sample::state(psi, &spec)).collect()
    }

    fn after_step(&mut self, iter: usize, net: &Network, spec: &ResidualSpec) -> Result<()> {
        if (iter + 1) % self.pool.refresh_period == 0 {
            let stepper = NetworkStepper { net, spec: *spec };
            self.pool.pool_step(&stepper)?;
        }
        Ok(())
    }
}

/// Runs `cfg.max_iters` Adam updates, logging the batch loss every `log_every`
/// iterations (always including iteration 0 and the last iteration).
///
/// On a non-finite loss or one above `divergence_threshold` the parameters are
/// restored to those of the previous iteration and the run stops; the report
/// records where.
pub fn train(
    net: &mut Network,
    spec: &ResidualSpec,
    cfg: &TrainConfig,
    source: &mut dyn SampleSource,
    on_checkpoint: &mut dyn FnMut(usize, &Network) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut adam = AdamState::new(&net.params);
    adam.eps = cfg.adam_eps;
    let mut report = TrainReport {
        curve: Vec::new(),
        iters: 0,
        diverged: None,
    };
    let mut last_good = net.params.clone();
    for it in 0..cfg.max_iters {
        let lr = cfg.lr_at(it);
        let batch = source.next_batch(cfg.batch)?;
        if let Some(s) = batch.iter().find(|s| s.loss_kind() != cfg.loss) {
            return Err(Error::config(
                "train.loss",
                format!("{:?} training given a {:?} sample", cfg.loss, s.loss_kind()),
            ));
        }
        let (loss, grads) = batch_loss_grad(net, spec, &batch)?;
        if !loss.is_finite() || loss > cfg.divergence_threshold || grads.iter().any(|g| !g.is_finite()) {
            net.params = last_good;
            report.diverged = Some((it, loss));
            log::error!("training diverged at iteration {it} (loss {loss:e})");
            return Ok(report);
        }
        if it % cfg.log_every == 0 || it + 1 == cfg.max_iters {
            report.curve.push(CurvePoint { iter: it, lr, loss });
            log::info!("iter {it:>7}  lr {lr:.3e}  loss {loss:.6e}");
        }
        last_good.clone_from(&net.params);
        adam_step(&mut net.params, &grads, &mut adam, lr)?;
        report.iters = it + 1;
        source.after_step(it, net, spec)?;
        if let Some(every) = cfg.checkpoint_every {
            if every > 0 && (it + 1) % every == 0 {
                on_checkpoint(it + 1, net)?;
            }
        }
    }
    Ok(report)
}
