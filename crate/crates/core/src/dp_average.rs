//! Data-parallel weight synchronization across the `m` replicas of each stage.
//!
//! Synchronous strategies average a subset of a stage block in place. The
//! asynchronous ones split an exchange into [`initiate_averaging`], which
//! captures the communicated payload together with each replica's local
//! snapshot, and a completion operation applied `τ` steps later, when the
//! replica has already moved on.
//!
//! Arithmetic conventions shared with the reference implementation in
//! [`crate::oracle`]: means are summed in replica order and divided by `m`
//! once; the EMA update is `(1 - λ) * d + λ * diff`; corrected writes are
//! `stale_mean + d`.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::numerics::{
    check_fraction, mean_at, quantize_roundtrip, sample_subset, ParamVector, Purpose, QuantScheme,
    Rng, SampleMode, SubsetMask,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Average every parameter after every step.
    FullsyncDpavg,
    /// Synchronous sparse averaging.
    Sparta,
    /// Sparse averaging applied `τ` steps late, no correction.
    AsyncSparta,
    /// Sparse averaging applied `τ` steps late, corrected by the EMA of local drift.
    #[default]
    EmaCorrected,
    /// Full blocking average every `outer_interval` steps.
    Diloco,
    /// Full delayed average plus `1/m` of the replica's own drift.
    EagerDiloco,
    /// Delayed average plus the replica's raw drift (no EMA).
    AblationRawDiff,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::FullsyncDpavg,
        Strategy::Sparta,
        Strategy::AsyncSparta,
        Strategy::EmaCorrected,
        Strategy::Diloco,
        Strategy::EagerDiloco,
        Strategy::AblationRawDiff,
    ];

    /// Whether completion is deferred through a [`PendingAverage`].
    pub fn is_async(self) -> bool {
        matches!(
            self,
            Strategy::AsyncSparta
                | Strategy::EmaCorrected
                | Strategy::EagerDiloco
                | Strategy::AblationRawDiff
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::FullsyncDpavg => "fullsync_dpavg",
            Strategy::Sparta => "sparta",
            Strategy::AsyncSparta => "async_sparta",
            Strategy::EmaCorrected => "ema_corrected",
            Strategy::Diloco => "diloco",
            Strategy::EagerDiloco => "eager_diloco",
            Strategy::AblationRawDiff => "ablation_raw_diff",
        }
    }
}

/// Scaling applied to the local drift before it enters the EMA.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffScale {
    #[default]
    Unit,
    /// Divide the drift by the number of replicas (eager DiLoCo's correction).
    InverseReplicas,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AveragingConfig {
    pub strategy: Strategy,
    /// Fraction `p` of each stage block exchanged per event.
    pub subset_fraction: f64,
    /// Steps `τ` between initiating and applying an exchange.
    pub async_delay: u64,
    /// Steps `K` between initiations.
    pub interval: u64,
    /// Interval of DiLoCo's outer averaging step.
    pub outer_interval: u64,
    pub quant: QuantScheme,
    pub sample_mode: SampleMode,
    pub diff_scale: DiffScale,
}

impl Default for AveragingConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::EmaCorrected,
            subset_fraction: 0.05,
            async_delay: 10,
            interval: 1,
            outer_interval: 10,
            quant: QuantScheme::None,
            sample_mode: SampleMode::FixedCount,
            diff_scale: DiffScale::Unit,
        }
    }
}

impl AveragingConfig {
    pub fn for_strategy(strategy: Strategy) -> Self {
        Self {
            strategy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_fraction(self.subset_fraction).map_err(|e| match e {
            Error::Config(m) => config_err(format!("subset_fraction: {m}")),
            other => other,
        })?;
        if self.interval == 0 || self.outer_interval == 0 {
            return Err(config_err("interval and outer_interval must be >= 1"));
        }
        if self.strategy == Strategy::EagerDiloco {
            if self.subset_fraction < 1.0 {
                return Err(config_err(
                    "eager_diloco communicates every parameter: subset_fraction must be 1",
                ));
            }
            if self.async_delay != self.interval {
                return Err(config_err(
                    "eager_diloco requires async_delay == interval",
                ));
            }
        }
        Ok(())
    }

    /// Fraction actually exchanged (full-communication strategies force 1).
    pub fn effective_fraction(&self) -> f64 {
        match self.strategy {
            Strategy::FullsyncDpavg | Strategy::Diloco | Strategy::EagerDiloco => 1.0,
            _ => self.subset_fraction,
        }
    }

    /// Delay actually applied (synchronous strategies have none).
    pub fn effective_delay(&self) -> u64 {
        if self.strategy.is_async() {
            self.async_delay
        } else {
            0
        }
    }

    /// Steps between initiations.
    pub fn effective_interval(&self) -> u64 {
        match self.strategy {
            Strategy::Diloco => self.outer_interval,
            _ => self.interval,
        }
    }
}

/// Per-replica EMA staleness estimate `d_i`, laid out like the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub d: Vec<f64>,
    /// Completions that found no local snapshot and fell back to the raw stale mean.
    pub skipped_corrections: u64,
}

impl EmaState {
    pub fn zeros(len: usize) -> Self {
        Self {
            d: vec![0.0; len],
            skipped_corrections: 0,
        }
    }
}

/// An exchange in flight for one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct PendingAverage {
    pub stage: usize,
    pub initiated_at: u64,
    pub completes_at: u64,
    pub mask: SubsetMask,
    /// Per-replica communicated values at the mask indices (quantized).
    pub payloads: Vec<Vec<f64>>,
    /// Per-replica full-precision values at initiation, kept locally by each replica.
    pub snapshots: Vec<Option<Vec<f64>>>,
}

impl PendingAverage {
    pub fn num_replicas(&self) -> usize {
        self.payloads.len()
    }

    /// The stale mean over the payloads, one entry per mask index.
    pub fn stale_mean(&self) -> Vec<f64> {
        let m = self.payloads.len();
        (0..self.mask.len())
            .map(|k| mean_at(self.payloads.iter().map(|p| p[k]), m))
            .collect()
    }
}

fn check_replicas(replicas: &[ParamVector], stage: usize, mask: &SubsetMask) -> Result<()> {
    let first = replicas
        .first()
        .ok_or_else(|| config_err("averaging needs at least one replica"))?;
    if stage >= first.num_stages() {
        return Err(config_err(format!("stage {stage} out of range")));
    }
    for r in replicas {
        if !r.same_layout(first) {
            return Err(Error::Dimension {
                expected: first.len(),
                got: r.len(),
            });
        }
    }
    if !mask.is_valid_for(first.stage_len(stage)) {
        return Err(config_err(format!(
            "mask is not a sorted index set within stage {stage}"
        )));
    }
    Ok(())
}

/// Replaces the masked entries of stage `stage` in every replica with the
/// cross-replica mean of their (quantized) values. Unmasked entries are untouched.
pub fn sparse_average_sync(
    replicas: &mut [ParamVector],
    stage: usize,
    mask: &SubsetMask,
    quant: QuantScheme,
) -> Result<()> {
    check_replicas(replicas, stage, mask)?;
    let m = replicas.len();
    let base = replicas[0].stage_offsets()[stage];
    for &mu in &mask.indices {
        let idx = base + mu;
        let mean = mean_at(
            replicas
                .iter()
                .map(|r| quantize_roundtrip(r.values()[idx], quant)),
            m,
        );
        for r in replicas.iter_mut() {
            r.values_mut()[idx] = mean;
        }
    }
    Ok(())
}

/// Mask for the event of `stage` initiated at `step`, drawn from the stream
/// every replica can regenerate.
pub fn event_mask(cfg: &AveragingConfig, seed: u64, stage: usize, step: u64, block_len: usize) -> Result<SubsetMask> {
    let p = cfg.effective_fraction();
    if p >= 1.0 {
        return Ok(SubsetMask::full(block_len, step));
    }
    let rng = Rng::derive(seed, Purpose::Mask, stage as u64, step);
    sample_subset(&rng, block_len, p, cfg.sample_mode, step)
}

/// Captures payloads and local snapshots for an exchange over `mask`.
pub fn capture_event(
    replicas: &[ParamVector],
    stage: usize,
    step: u64,
    mask: SubsetMask,
    delay: u64,
    quant: QuantScheme,
) -> Result<PendingAverage> {
    check_replicas(replicas, stage, &mask)?;
    let base = replicas[0].stage_offsets()[stage];
    let mut payloads = Vec::with_capacity(replicas.len());
    let mut snapshots = Vec::with_capacity(replicas.len());
    for r in replicas {
        let snap: Vec<f64> = mask.indices.iter().map(|&mu| r.values()[base + mu]).collect();
        payloads.push(snap.iter().map(|&v| quantize_roundtrip(v, quant)).collect());
        snapshots.push(Some(snap));
    }
    Ok(PendingAverage {
        stage,
        initiated_at: step,
        completes_at: step + delay,
        mask,
        payloads,
        snapshots,
    })
}

/// Starts an asynchronous exchange for `stage` at `step`; local training continues
/// while it is in flight.
pub fn initiate_averaging(
    replicas: &[ParamVector],
    stage: usize,
    step: u64,
    cfg: &AveragingConfig,
    seed: u64,
) -> Result<PendingAverage> {
    let first = replicas
        .first()
        .ok_or_else(|| config_err("averaging needs at least one replica"))?;
    let mask = event_mask(cfg, seed, stage, step, first.stage_len(stage))?;
    capture_event(replicas, stage, step, mask, cfg.effective_delay(), cfg.quant)
}

fn check_event(replicas: &[ParamVector], event: &PendingAverage) -> Result<usize> {
    check_replicas(replicas, event.stage, &event.mask)?;
    if event.payloads.len() != replicas.len() || event.snapshots.len() != replicas.len() {
        return Err(Error::Dimension {
            expected: replicas.len(),
            got: event.payloads.len(),
        });
    }
    for p in &event.payloads {
        if p.len() != event.mask.len() {
            return Err(Error::Dimension {
                expected: event.mask.len(),
                got: p.len(),
            });
        }
    }
    Ok(replicas[0].stage_offsets()[event.stage])
}

/// Writes the stale mean over the event's mask, discarding the local progress made
/// on those entries since initiation.
pub fn complete_async_sparta(replicas: &mut [ParamVector], event: &PendingAverage) -> Result<()> {
    let base = check_event(replicas, event)?;
    let mean = event.stale_mean();
    for r in replicas.iter_mut() {
        let w = r.values_mut();
        for (k, &mu) in event.mask.indices.iter().enumerate() {
            w[base + mu] = mean[k];
        }
    }
    Ok(())
}

/// Stale mean plus the EMA of each replica's own drift since initiation.
///
/// On the masked entries of replica `i`:
/// `d_i ← (1 − λ) d_i + λ (ŵ_i − snapshot_i)` and `w_i ← stale_mean + d_i`.
/// A replica without a snapshot receives the plain stale mean and its
/// `skipped_corrections` counter is bumped.
pub fn complete_ema_corrected(
    replicas: &mut [ParamVector],
    ema: &mut [EmaState],
    event: &PendingAverage,
    lambda: f64,
    scale: DiffScale,
) -> Result<()> {
    let base = check_event(replicas, event)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(config_err(format!("EMA coefficient {lambda} outside [0, 1]")));
    }
    if ema.len() != replicas.len() {
        return Err(Error::Dimension {
            expected: replicas.len(),
            got: ema.len(),
        });
    }
    let m = replicas.len() as f64;
    let mean = event.stale_mean();
    for ((r, state), snap) in replicas.iter_mut().zip(ema.iter_mut()).zip(&event.snapshots) {
        let w = r.values_mut();
        let Some(snap) = snap else {
            state.skipped_corrections += 1;
            for (k, &mu) in event.mask.indices.iter().enumerate() {
                w[base + mu] = mean[k];
            }
            continue;
        };
        for (k, &mu) in event.mask.indices.iter().enumerate() {
            let idx = base + mu;
            let diff = match scale {
                DiffScale::Unit => w[idx] - snap[k],
                DiffScale::InverseReplicas => (w[idx] - snap[k]) / m,
            };
            let d = (1.0 - lambda) * state.d[idx] + lambda * diff;
            state.d[idx] = d;
            w[idx] = mean[k] + d;
        }
    }
    Ok(())
}

/// Stale mean plus the replica's raw drift since initiation; keeps no state.
pub fn complete_ablation_raw_diff(replicas: &mut [ParamVector], event: &PendingAverage) -> Result<()> {
    let base = check_event(replicas, event)?;
    let mean = event.stale_mean();
    for (r, snap) in replicas.iter_mut().zip(&event.snapshots) {
        let w = r.values_mut();
        for (k, &mu) in event.mask.indices.iter().enumerate() {
            let idx = base + mu;
            w[idx] = match snap {
                Some(s) => mean[k] + (w[idx] - s[k]),
                None => mean[k],
            };
        }
    }
    Ok(())
}

/// Stale full average plus `1/m` of the replica's own drift.
pub fn complete_eager_diloco(replicas: &mut [ParamVector], event: &PendingAverage) -> Result<()> {
    let base = check_event(replicas, event)?;
    let len = replicas[0].stage_len(event.stage);
    if event.mask.len() != len {
        return Err(config_err(
            "eager_diloco is defined for full communication (mask must cover the stage)",
        ));
    }
    let m = replicas.len() as f64;
    let mean = event.stale_mean();
    for (r, snap) in replicas.iter_mut().zip(&event.snapshots) {
        let w = r.values_mut();
        for (k, &mu) in event.mask.indices.iter().enumerate() {
            let idx = base + mu;
            w[idx] = match snap {
                Some(s) => mean[k] + (w[idx] - s[k]) / m,
                None => mean[k],
            };
        }
    }
    Ok(())
}

/// Whether a DiLoCo outer step falls on `step` (1-based count of local steps done).
pub fn is_outer_step(step: u64, cfg: &AveragingConfig) -> bool {
    step > 0 && step % cfg.outer_interval == 0
}

/// DiLoCo's outer step with outer learning rate 1: a blocking full average of every
/// stage. A no-op when `step` is not an outer step.
pub fn diloco_outer_step(replicas: &mut [ParamVector], step: u64, cfg: &AveragingConfig) -> Result<bool> {
    if !is_outer_step(step, cfg) {
        return Ok(false);
    }
    let stages = replicas
        .first()
        .ok_or_else(|| config_err("averaging needs at least one replica"))?
        .num_stages();
    for s in 0..stages {
        let mask = SubsetMask::full(replicas[0].stage_len(s), step);
        sparse_average_sync(replicas, s, &mask, cfg.quant)?;
    }
    Ok(true)
}

/// Applies a due event according to `strategy`.
pub fn complete_event(
    strategy: Strategy,
    replicas: &mut [ParamVector],
    ema: &mut [EmaState],
    event: &PendingAverage,
    lambda: f64,
    scale: DiffScale,
) -> Result<()> {
    match strategy {
        Strategy::AsyncSparta => complete_async_sparta(replicas, event),
        Strategy::EmaCorrected => complete_ema_corrected(replicas, ema, event, lambda, scale),
        Strategy::AblationRawDiff => complete_ablation_raw_diff(replicas, event),
        Strategy::EagerDiloco => complete_eager_diloco(replicas, event),
        s => Err(Error::Internal(format!("{} has no deferred completion", s.name()))),
    }
}
