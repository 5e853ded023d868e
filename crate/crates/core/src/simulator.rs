//! Lock-step engine for an `m × P` mesh: local pipeline steps, averaging
//! events, heterogeneous device speeds and metric collection.
//!
//! Within one global tick the order is fixed: local steps of every firing
//! replica (in parallel), initiation of the round's exchanges, completion of
//! the exchanges that fall due, then evaluation.

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dp_average::{
    complete_event, event_mask, initiate_averaging, sparse_average_sync, AveragingConfig, EmaState,
    PendingAverage, Strategy,
};
use crate::error::{config_err, Error, Result};
use crate::metrics::{consensus_error, ema_drift, ema_variance, MetricsRecord};
use crate::model::{Model, ModelConfig};
use crate::numerics::{vec_mean, ParamVector, SubsetMask};
use crate::optim::{EmaSchedule, LrSchedule, OptimizerConfig, OptimizerState};
use crate::pipeline::{delayed_step, DelayMode, StageDelayConfig, StepContext, WeightHistory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshConfig {
    pub num_stages: usize,
    pub num_replicas: usize,
    /// Global ticks; the fastest device takes one local step per tick.
    pub total_steps: u64,
    pub seed: u64,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub lr: LrSchedule,
    pub ema: EmaSchedule,
    pub averaging: AveragingConfig,
    pub delays: DelayMode,
    /// Relative device speeds; empty means all replicas run at the same rate.
    pub speeds: Vec<u64>,
    /// Total local steps across replicas; the run stops once it is spent.
    pub budget: Option<u64>,
    pub eval_every: u64,
    /// Gradient norm cap; zero or negative disables clipping.
    pub clip_norm: f64,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self {
            num_stages: 1,
            num_replicas: 4,
            total_steps: 1000,
            seed: 0,
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            lr: LrSchedule::default(),
            ema: EmaSchedule::default(),
            averaging: AveragingConfig::default(),
            delays: DelayMode::Sync,
            speeds: Vec::new(),
            budget: None,
            eval_every: 100,
            clip_norm: 1.0,
        }
    }
}

impl MeshConfig {
    pub fn speeds_or_default(&self) -> Vec<u64> {
        if self.speeds.is_empty() {
            vec![1; self.num_replicas]
        } else {
            self.speeds.clone()
        }
    }

    pub fn clip(&self) -> Option<f64> {
        (self.clip_norm > 0.0).then_some(self.clip_norm)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_stages == 0 {
            return Err(config_err("num_stages must be at least 1"));
        }
        if self.num_replicas == 0 {
            return Err(config_err("num_replicas must be at least 1"));
        }
        if self.total_steps == 0 {
            return Err(config_err("total_steps must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(config_err("eval_every must be at least 1"));
        }
        if self.clip_norm.is_nan() {
            return Err(config_err("clip_norm must be a number"));
        }
        let speeds = self.speeds_or_default();
        if speeds.len() != self.num_replicas {
            return Err(config_err(format!(
                "speeds has {} entries for {} replicas",
                speeds.len(),
                self.num_replicas
            )));
        }
        if speeds.contains(&0) {
            return Err(config_err("speeds must be positive integers"));
        }
        if let Some(b) = self.budget {
            let clock = SimClock::new(&speeds, self.averaging.effective_interval());
            let capacity = clock.capacity(self.total_steps);
            if b > capacity {
                return Err(config_err(format!(
                    "budget {b} exceeds the {capacity} local steps available in {} ticks",
                    self.total_steps
                )));
            }
        }
        within("delays", StageDelayConfig::resolve(&self.delays, self.num_stages).map(|_| ()))?;
        within("optimizer", self.optimizer.validate())?;
        within("lr", self.lr.validate())?;
        within("ema", self.ema.validate())?;
        within("averaging", self.averaging.validate())
    }
}

/// Prefixes a configuration error with the table it came from.
fn within(section: &str, r: Result<()>) -> Result<()> {
    r.map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{section}: {m}")),
        other => other,
    })
}

/// Per-replica state of the mesh.
#[derive(Clone, Debug)]
pub struct WorkerReplica {
    pub id: usize,
    pub params: ParamVector,
    pub optimizers: Vec<OptimizerState>,
    pub ema: EmaState,
    pub history: WeightHistory,
    /// Local steps taken; also the cursor into the replica's data shard.
    pub local_step: u64,
}

impl WorkerReplica {
    pub fn new(id: usize, params: ParamVector, opt: &OptimizerConfig, history: WeightHistory) -> Self {
        let optimizers = (0..params.num_stages())
            .map(|j| OptimizerState::new(opt, params.stage_len(j)))
            .collect();
        let ema = EmaState::zeros(params.len());
        Self {
            id,
            params,
            optimizers,
            ema,
            history,
            local_step: 0,
        }
    }
}

/// Local-step schedule of one replica in a heterogeneous mesh.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReplicaSchedule {
    pub steps_per_round: u64,
    /// Local steps between the replica's contributions to averaging.
    pub averaging_interval: u64,
}

/// Faster devices take proportionally more local steps between aligned averaging rounds.
pub fn heterogeneous_schedule(speeds: &[u64], base_interval: u64) -> Vec<ReplicaSchedule> {
    speeds
        .iter()
        .map(|&s| ReplicaSchedule {
            steps_per_round: s * base_interval,
            averaging_interval: s * base_interval,
        })
        .collect()
}

/// Global tick counter and the firing pattern derived from device speeds.
///
/// With `S` the largest speed, replica `i` fires on tick `k` iff
/// `⌊(k+1)s_i/S⌋ > ⌊k s_i/S⌋`, so it takes exactly `s_i` steps in any `S`
/// consecutive ticks aligned to a multiple of `S`. A round lasts `K·S` ticks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimClock {
    pub tick: u64,
    speeds: Vec<u64>,
    max_speed: u64,
    round_ticks: u64,
}

impl SimClock {
    pub fn new(speeds: &[u64], interval: u64) -> Self {
        let max_speed = speeds.iter().copied().max().unwrap_or(1).max(1);
        Self {
            tick: 0,
            speeds: speeds.to_vec(),
            max_speed,
            round_ticks: interval.max(1) * max_speed,
        }
    }

    pub fn fires(&self, replica: usize, tick: u64) -> bool {
        let s = self.speeds[replica];
        (tick + 1) * s / self.max_speed > tick * s / self.max_speed
    }

    pub fn is_initiation(&self, tick: u64) -> bool {
        (tick + 1) % self.round_ticks == 0
    }

    pub fn round_ticks(&self) -> u64 {
        self.round_ticks
    }

    /// Local steps all replicas take together in `ticks` ticks.
    pub fn capacity(&self, ticks: u64) -> u64 {
        self.speeds.iter().map(|&s| ticks * s / self.max_speed).sum()
    }
}

/// Counters accumulated over a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub ticks: u64,
    pub local_steps: Vec<u64>,
    /// Ticks on which an averaging round was initiated.
    pub initiation_ticks: Vec<u64>,
    pub events_initiated: u64,
    pub events_completed: u64,
    pub skipped_corrections: u64,
    pub diverged: bool,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub records: Vec<MetricsRecord>,
    pub stats: RunStats,
    pub final_params: Vec<ParamVector>,
}

impl RunResult {
    pub fn last(&self) -> &MetricsRecord {
        self.records.last().expect("a run always records at least once")
    }
}

/// Elementwise mean of the replicas evaluated on held-out data.
pub fn evaluate_consensus_model(model: &Model, replicas: &[ParamVector]) -> Result<f64> {
    Ok(model.validation_loss(&vec_mean(replicas)?))
}

/// A mesh being simulated tick by tick.
pub struct Simulation {
    cfg: MeshConfig,
    model: Model,
    lr: LrSchedule,
    ema_schedule: EmaSchedule,
    delays: StageDelayConfig,
    clock: SimClock,
    replicas: Vec<WorkerReplica>,
    pending: VecDeque<PendingAverage>,
    budget_left: Option<u64>,
    stats: RunStats,
    prev_drift: Option<Vec<f64>>,
}

impl Simulation {
    pub fn new(cfg: &MeshConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::build(&cfg.model, cfg.num_replicas, cfg.num_stages, cfg.seed)?;
        let delays = StageDelayConfig::resolve(&cfg.delays, cfg.num_stages)?;
        let replicas = (0..cfg.num_replicas)
            .map(|i| {
                WorkerReplica::new(
                    i,
                    model.init_params(i),
                    &cfg.optimizer,
                    WeightHistory::for_delays(&delays),
                )
            })
            .collect();
        let speeds = cfg.speeds_or_default();
        Ok(Self {
            lr: cfg.lr.clone().with_horizon(cfg.total_steps),
            ema_schedule: cfg.ema.clone().with_horizon(cfg.total_steps),
            clock: SimClock::new(&speeds, cfg.averaging.effective_interval()),
            budget_left: cfg.budget,
            stats: RunStats {
                local_steps: vec![0; cfg.num_replicas],
                ..RunStats::default()
            },
            cfg: cfg.clone(),
            model,
            delays,
            replicas,
            pending: VecDeque::new(),
            prev_drift: None,
        })
    }

    pub fn config(&self) -> &MeshConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn replicas(&self) -> &[WorkerReplica] {
        &self.replicas
    }

    pub fn params(&self) -> Vec<ParamVector> {
        self.replicas.iter().map(|r| r.params.clone()).collect()
    }

    pub fn pending(&self) -> &VecDeque<PendingAverage> {
        &self.pending
    }

    pub fn stats(&self) -> &RunStats {
        &self.stats
    }

    pub fn clock(&self) -> &SimClock {
        &self.clock
    }

    pub fn is_finished(&self) -> bool {
        self.stats.diverged || self.clock.tick >= self.cfg.total_steps || self.budget_left == Some(0)
    }

    /// Runs `f` on the replicas' parameters and EMA states as two parallel slices.
    fn with_mesh<T>(&mut self, f: impl FnOnce(&mut [ParamVector], &mut [EmaState]) -> Result<T>) -> Result<T> {
        let mut params: Vec<ParamVector> = self
            .replicas
            .iter_mut()
            .map(|r| std::mem::replace(&mut r.params, ParamVector::from_values(Vec::new())))
            .collect();
        let mut ema: Vec<EmaState> = self
            .replicas
            .iter_mut()
            .map(|r| std::mem::replace(&mut r.ema, EmaState::zeros(0)))
            .collect();
        let out = f(&mut params, &mut ema);
        for ((r, p), e) in self.replicas.iter_mut().zip(params).zip(ema) {
            r.params = p;
            r.ema = e;
        }
        out
    }

    /// Advances one global tick. Returns `false` once the run is over.
    pub fn tick(&mut self) -> Result<bool> {
        if self.is_finished() {
            return Ok(false);
        }
        let k = self.clock.tick;
        let mut firing = vec![false; self.replicas.len()];
        for (i, f) in firing.iter_mut().enumerate() {
            if !self.clock.fires(i, k) {
                continue;
            }
            if let Some(left) = self.budget_left.as_mut() {
                if *left == 0 {
                    continue;
                }
                *left -= 1;
            }
            *f = true;
        }

        let ctx = StepContext {
            model: &self.model,
            lr: &self.lr,
            clip_norm: self.cfg.clip(),
            seed: self.cfg.seed,
        };
        let delays = &self.delays;
        let results: Vec<Result<()>> = self
            .replicas
            .par_iter_mut()
            .zip(firing.par_iter())
            .map(|(r, &fire)| if fire { delayed_step(r, delays, &ctx) } else { Ok(()) })
            .collect();
        for (i, res) in results.into_iter().enumerate() {
            match res {
                Ok(()) => {
                    if firing[i] {
                        self.stats.local_steps[i] += 1;
                    }
                }
                Err(Error::NonFinite { .. }) => self.stats.diverged = true,
                Err(e) => return Err(e),
            }
        }

        if !self.stats.diverged && self.replicas.len() > 1 {
            self.average(k)?;
        }
        if !self.replicas.iter().all(|r| r.params.is_finite()) {
            self.stats.diverged = true;
        }
        self.clock.tick += 1;
        self.stats.ticks = self.clock.tick;
        Ok(true)
    }

    fn average(&mut self, k: u64) -> Result<()> {
        let avg = self.cfg.averaging.clone();
        let seed = self.cfg.seed;
        let stages = self.cfg.num_stages;
        if self.clock.is_initiation(k) {
            self.stats.initiation_ticks.push(k);
            if avg.strategy.is_async() {
                let events = self.with_mesh(|params, _| {
                    (0..stages)
                        .map(|s| initiate_averaging(params, s, k, &avg, seed))
                        .collect::<Result<Vec<_>>>()
                })?;
                self.stats.events_initiated += events.len() as u64;
                self.pending.extend(events);
            } else {
                self.with_mesh(|params, _| {
                    for s in 0..stages {
                        let len = params[0].stage_len(s);
                        let mask = match avg.strategy {
                            Strategy::Diloco => SubsetMask::full(len, k),
                            _ => event_mask(&avg, seed, s, k, len)?,
                        };
                        sparse_average_sync(params, s, &mask, avg.quant)?;
                    }
                    Ok(())
                })?;
            }
        }

        let lambda = self.ema_schedule.lambda_at(k);
        let mut due = Vec::new();
        while self.pending.front().is_some_and(|e| e.completes_at <= k) {
            due.push(self.pending.pop_front().unwrap());
        }
        if let Some(e) = due.iter().find(|e| e.completes_at != k) {
            return Err(Error::Internal(format!(
                "event due at tick {} was still pending at tick {k}",
                e.completes_at
            )));
        }
        let n = due.len() as u64;
        self.with_mesh(|params, ema| {
            for ev in &due {
                complete_event(avg.strategy, params, ema, ev, lambda, avg.diff_scale)?;
            }
            Ok(())
        })?;
        self.stats.events_completed += n;
        Ok(())
    }

    /// Metrics for the current state.
    pub fn record(&mut self) -> Result<MetricsRecord> {
        let params = self.params();
        let consensus_loss = evaluate_consensus_model(&self.model, &params)?;
        let err = consensus_error(&params);
        let states: Vec<EmaState> = self.replicas.iter().map(|r| r.ema.clone()).collect();
        let (ema_var_mean, ema_var_max) = ema_variance(&states);
        let drift = ema_drift(&states);
        let drift_norm = drift.iter().map(|v| v * v).sum::<f64>().sqrt();
        let drift_delta_norm = match &self.prev_drift {
            Some(prev) => prev.iter().zip(&drift).map(|(a, b)| (b - a) * (b - a)).sum::<f64>().sqrt(),
            None => 0.0,
        };
        self.prev_drift = Some(drift);
        let replica_losses: Vec<f64> = self
            .replicas
            .iter()
            .map(|r| self.model.train_loss(r.id, &r.params))
            .collect();
        if !consensus_loss.is_finite() || replica_losses.iter().any(|l| !l.is_finite()) {
            self.stats.diverged = true;
        }
        self.stats.skipped_corrections = self.replicas.iter().map(|r| r.ema.skipped_corrections).sum();
        Ok(MetricsRecord {
            step: self.clock.tick,
            replica_losses,
            consensus_loss,
            consensus_error: err,
            consensus_error_per_coord: err / self.model.dim() as f64,
            ema_var_mean,
            ema_var_max,
            diverged: self.stats.diverged,
            inflight: self.pending.len(),
            drift_norm,
            drift_delta_norm,
        })
    }

    /// Ticks until the end of the run, recording every `eval_every` ticks and at the end.
    pub fn run_to_end(mut self) -> Result<RunResult> {
        let mut records = vec![self.record()?];
        while self.tick()? {
            let finished = self.is_finished();
            if finished || self.clock.tick % self.cfg.eval_every == 0 {
                records.push(self.record()?);
                if self.stats.diverged {
                    break;
                }
            }
        }
        let final_params = self.params();
        Ok(RunResult {
            records,
            stats: self.stats,
            final_params,
        })
    }
}

/// Simulates `cfg` from start to finish.
pub fn run(cfg: &MeshConfig) -> Result<RunResult> {
    Simulation::new(cfg)?.run_to_end()
}
