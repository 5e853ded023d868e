//! Gradient staleness inside one replica's pipeline.
//!
//! Stage `j` updates its current weights with a gradient evaluated at the
//! replica's weights and minibatch from `δ_j` local steps ago. Microbatch
//! interleaving is not modeled; only the resulting per-stage lag is.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::model::Model;
use crate::numerics::{ParamVector, Purpose, Rng};
use crate::optim::{clip_by_norm, LrSchedule};
use crate::simulator::WorkerReplica;

/// How per-stage delays are chosen.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum DelayMode {
    /// No staleness.
    #[default]
    Sync,
    /// `δ_j = P - 1 - j` for 0-based stage `j`: the first stage lags the most.
    AsyncLinear,
    Custom { delays: Vec<u64> },
}

/// Resolved per-stage delays.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageDelayConfig {
    delays: Vec<u64>,
}

impl StageDelayConfig {
    pub fn resolve(mode: &DelayMode, num_stages: usize) -> Result<Self> {
        if num_stages == 0 {
            return Err(config_err("num_stages must be at least 1"));
        }
        let delays = match mode {
            DelayMode::Sync => vec![0; num_stages],
            DelayMode::AsyncLinear => (0..num_stages).map(|j| (num_stages - 1 - j) as u64).collect(),
            DelayMode::Custom { delays } => {
                if delays.len() != num_stages {
                    return Err(config_err(format!(
                        "delays.delays has {} entries for {num_stages} stages",
                        delays.len()
                    )));
                }
                delays.clone()
            }
        };
        Ok(Self { delays })
    }

    pub fn sync(num_stages: usize) -> Self {
        Self {
            delays: vec![0; num_stages],
        }
    }

    pub fn delays(&self) -> &[u64] {
        &self.delays
    }

    pub fn num_stages(&self) -> usize {
        self.delays.len()
    }

    pub fn max_delay(&self) -> u64 {
        self.delays.iter().copied().max().unwrap_or(0)
    }
}

/// The last few weight vectors of a replica, newest first.
///
/// Minibatches are a pure function of `(replica, step)`, so only the step
/// number is stored alongside each snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightHistory {
    entries: VecDeque<(u64, ParamVector)>,
    depth: usize,
}

impl WeightHistory {
    pub fn new(depth: usize) -> Self {
        Self {
            entries: VecDeque::with_capacity(depth.max(1)),
            depth: depth.max(1),
        }
    }

    pub fn for_delays(delays: &StageDelayConfig) -> Self {
        Self::new(delays.max_delay() as usize + 1)
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, step: u64, params: ParamVector) {
        if self.entries.len() == self.depth {
            self.entries.pop_back();
        }
        self.entries.push_front((step, params));
    }

    /// Snapshot taken `offset` pushes ago (0 is the newest) and its step.
    pub fn get(&self, offset: u64) -> Result<(u64, &ParamVector)> {
        self.entries
            .get(offset as usize)
            .map(|(s, p)| (*s, p))
            .ok_or_else(|| {
                Error::Internal(format!(
                    "weight history holds {} snapshots (depth {}), offset {offset} requested",
                    self.entries.len(),
                    self.depth
                ))
            })
    }
}

/// Everything a local step needs besides the replica itself.
#[derive(Clone, Copy, Debug)]
pub struct StepContext<'a> {
    pub model: &'a Model,
    pub lr: &'a LrSchedule,
    /// Full-pipe gradient norm cap applied before the optimizer.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

/// Gradient-noise stream for the minibatch `replica` drew at `step`.
pub fn noise_stream(seed: u64, replica: usize, step: u64) -> Rng {
    Rng::derive(seed, Purpose::GradNoise, replica as u64, step)
}

/// One local step of a replica under per-stage delays.
///
/// Stages with `t < δ_j` are still warming up and skip the update. The
/// gradient for a given delay is computed once at the stale full weight vector
/// and sliced per stage.
pub fn delayed_step(replica: &mut WorkerReplica, delays: &StageDelayConfig, ctx: &StepContext) -> Result<()> {
    let t = replica.local_step;
    let stages = replica.params.num_stages();
    if delays.num_stages() != stages || replica.optimizers.len() != stages {
        return Err(config_err(format!(
            "{} stage delays and {} optimizers for {stages} stages",
            delays.num_stages(),
            replica.optimizers.len()
        )));
    }
    if replica.history.depth() <= delays.max_delay() as usize {
        return Err(Error::Internal(format!(
            "weight history depth {} too shallow for delay {}",
            replica.history.depth(),
            delays.max_delay()
        )));
    }
    replica.history.push(t, replica.params.clone());

    let mut grad = vec![0.0; replica.params.len()];
    let mut active = vec![false; stages];
    let mut done: Vec<u64> = Vec::new();
    for &delta in delays.delays() {
        if t < delta || done.contains(&delta) {
            continue;
        }
        done.push(delta);
        let (at, stale) = replica.history.get(delta)?;
        debug_assert_eq!(at, t - delta);
        let batch = ctx.model.sample_batch(replica.id, at);
        let noise = noise_stream(ctx.seed, replica.id, at);
        let full = ctx.model.gradient(stale, &batch, &noise)?;
        for (j, _) in delays.delays().iter().enumerate().filter(|(_, &d)| d == delta) {
            let r = replica.params.stage_range(j);
            grad[r.clone()].copy_from_slice(&full.values()[r]);
            active[j] = true;
        }
    }
    if let Some(max) = ctx.clip_norm {
        clip_by_norm(&mut grad, max);
    }
    let lr = ctx.lr.lr_at(t);
    for j in (0..stages).filter(|&j| active[j]) {
        let r = replica.params.stage_range(j);
        replica.optimizers[j]
            .apply_update(replica.params.stage_mut(j), &grad[r], lr)
            .map_err(|e| match e {
                Error::NonFinite { .. } => Error::NonFinite { step: t },
                other => other,
            })?;
    }
    replica.local_step += 1;
    Ok(())
}
