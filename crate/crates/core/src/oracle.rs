//! Brute-force reference implementations used to check the main engine.
//!
//! [`NaiveMesh`] keeps every weight vector it has ever produced and recomputes
//! each exchange from those lists when it completes, instead of buffering
//! payloads in events. It only supports homogeneous speeds and no budget, and
//! is meant for tiny instances.

use crate::dp_average::{DiffScale, Strategy};
use crate::error::{config_err, Error, Result};
use crate::model::Model;
use crate::numerics::{quantize_roundtrip, sample_subset, ParamVector, Purpose, Rng, SampleMode};
use crate::optim::{clip_by_norm, EmaSchedule, LrSchedule, OptimizerState};
use crate::pipeline::StageDelayConfig;
use crate::simulator::MeshConfig;

/// Full-history transliteration of the mesh update rules.
pub struct NaiveMesh {
    cfg: MeshConfig,
    model: Model,
    lr: LrSchedule,
    ema: EmaSchedule,
    delays: Vec<u64>,
    /// `weights[i][t]`: replica `i` at the start of tick `t`.
    weights: Vec<Vec<ParamVector>>,
    /// `local[i][t]`: replica `i` after its local step at tick `t`, before any averaging.
    local: Vec<Vec<ParamVector>>,
    pub params: Vec<ParamVector>,
    pub d: Vec<Vec<f64>>,
    opts: Vec<Vec<OptimizerState>>,
    pub tick: u64,
    pub diverged: bool,
}

impl NaiveMesh {
    pub fn new(cfg: &MeshConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.speeds_or_default().iter().any(|&s| s != 1) || cfg.budget.is_some() {
            return Err(config_err("the naive mesh supports homogeneous speeds without a budget only"));
        }
        let model = Model::build(&cfg.model, cfg.num_replicas, cfg.num_stages, cfg.seed)?;
        let delays = StageDelayConfig::resolve(&cfg.delays, cfg.num_stages)?.delays().to_vec();
        let params: Vec<ParamVector> = (0..cfg.num_replicas).map(|i| model.init_params(i)).collect();
        let opts = params
            .iter()
            .map(|p| {
                (0..p.num_stages())
                    .map(|j| OptimizerState::new(&cfg.optimizer, p.stage_len(j)))
                    .collect()
            })
            .collect();
        Ok(Self {
            lr: cfg.lr.clone().with_horizon(cfg.total_steps),
            ema: cfg.ema.clone().with_horizon(cfg.total_steps),
            d: vec![vec![0.0; model.dim()]; cfg.num_replicas],
            weights: vec![Vec::new(); cfg.num_replicas],
            local: vec![Vec::new(); cfg.num_replicas],
            cfg: cfg.clone(),
            model,
            delays,
            params,
            opts,
            tick: 0,
            diverged: false,
        })
    }

    fn mask(&self, stage: usize, step: u64) -> Result<Vec<usize>> {
        let len = self.params[0].stage_len(stage);
        let avg = &self.cfg.averaging;
        let p = match avg.strategy {
            Strategy::FullsyncDpavg | Strategy::Diloco | Strategy::EagerDiloco => 1.0,
            _ => avg.subset_fraction,
        };
        if p >= 1.0 {
            return Ok((0..len).collect());
        }
        let rng = Rng::derive(self.cfg.seed, Purpose::Mask, stage as u64, step);
        Ok(sample_subset(&rng, len, p, avg.sample_mode, step)?.indices)
    }

    fn naive_mean(&self, values: impl Fn(usize) -> f64) -> f64 {
        let m = self.params.len();
        let mut s = 0.0;
        for i in 0..m {
            s += values(i);
        }
        s / m as f64
    }

    /// One global tick.
    pub fn naive_mesh_step(&mut self) -> Result<()> {
        let t = self.tick;
        let m = self.params.len();
        let stages = self.delays.len();
        for i in 0..m {
            self.weights[i].push(self.params[i].clone());
            let mut g = vec![0.0; self.params[i].len()];
            let mut active = vec![false; stages];
            for j in 0..stages {
                let dj = self.delays[j];
                if t < dj {
                    continue;
                }
                let s = t - dj;
                let at = &self.weights[i][s as usize];
                let batch = self.model.sample_batch(i, s);
                let noise = Rng::derive(self.cfg.seed, Purpose::GradNoise, i as u64, s);
                let gj = self.model.stage_gradient(at, &batch, j, &noise)?;
                g[self.params[i].stage_range(j)].copy_from_slice(&gj);
                active[j] = true;
            }
            if let Some(c) = self.cfg.clip() {
                clip_by_norm(&mut g, c);
            }
            let lr = self.lr.lr_at(t);
            for j in (0..stages).filter(|&j| active[j]) {
                let r = self.params[i].stage_range(j);
                match self.opts[i][j].apply_update(self.params[i].stage_mut(j), &g[r], lr) {
                    Ok(()) => {}
                    Err(Error::NonFinite { .. }) => self.diverged = true,
                    Err(e) => return Err(e),
                }
            }
        }
        for i in 0..m {
            self.local[i].push(self.params[i].clone());
        }
        if m > 1 && !self.diverged {
            self.average(t)?;
        }
        if self.params.iter().any(|p| !p.is_finite()) {
            self.diverged = true;
        }
        self.tick += 1;
        Ok(())
    }

    fn average(&mut self, t: u64) -> Result<()> {
        let avg = self.cfg.averaging.clone();
        let q = avg.quant;
        let m = self.params.len();
        let interval = if avg.strategy == Strategy::Diloco {
            avg.outer_interval
        } else {
            avg.interval
        };
        let initiates = |s: u64| (s + 1) % interval == 0;
        let stages = self.delays.len();

        if !avg.strategy.is_async() {
            if initiates(t) {
                for j in 0..stages {
                    let base = self.params[0].stage_range(j).start;
                    for mu in self.mask(j, t)? {
                        let idx = base + mu;
                        let mean = self.naive_mean(|i| quantize_roundtrip(self.params[i].values()[idx], q));
                        for p in self.params.iter_mut() {
                            p.values_mut()[idx] = mean;
                        }
                    }
                }
            }
            return Ok(());
        }

        let tau = avg.async_delay;
        if t < tau || !initiates(t - tau) {
            return Ok(());
        }
        let t0 = t - tau;
        let lambda = self.ema.lambda_at(t);
        for j in 0..stages {
            let base = self.params[0].stage_range(j).start;
            for mu in self.mask(j, t0)? {
                let idx = base + mu;
                let stale = self.naive_mean(|i| quantize_roundtrip(self.local[i][t0 as usize].values()[idx], q));
                for i in 0..m {
                    let snap = self.local[i][t0 as usize].values()[idx];
                    let cur = self.params[i].values()[idx];
                    let new = match avg.strategy {
                        Strategy::AsyncSparta => stale,
                        Strategy::AblationRawDiff => stale + (cur - snap),
                        Strategy::EagerDiloco => stale + (cur - snap) / m as f64,
                        Strategy::EmaCorrected => {
                            let diff = match avg.diff_scale {
                                DiffScale::Unit => cur - snap,
                                DiffScale::InverseReplicas => (cur - snap) / m as f64,
                            };
                            let d = (1.0 - lambda) * self.d[i][idx] + lambda * diff;
                            self.d[i][idx] = d;
                            stale + d
                        }
                        _ => unreachable!("synchronous strategies return early"),
                    };
                    self.params[i].values_mut()[idx] = new;
                }
            }
        }
        Ok(())
    }

    /// Runs every tick, calling `visit` after each one.
    pub fn run(mut self, mut visit: impl FnMut(&NaiveMesh)) -> Result<Self> {
        while self.tick < self.cfg.total_steps && !self.diverged {
            self.naive_mesh_step()?;
            visit(&self);
        }
        Ok(self)
    }
}

fn two_pass_consensus_error(state: &[Vec<f64>]) -> f64 {
    let m = state.len() as f64;
    let d = state[0].len();
    let mut mean = vec![0.0; d];
    for w in state {
        for k in 0..d {
            mean[k] += w[k];
        }
    }
    for v in &mut mean {
        *v /= m;
    }
    state
        .iter()
        .map(|w| (0..d).map(|k| (w[k] - mean[k]).powi(2)).sum::<f64>())
        .sum()
}

/// Monte-Carlo estimate of the consensus-error ratio after one synchronous
/// sparse average with Bernoulli(`p`) masks, on a frozen state.
///
/// Returns the mean ratio over `trials` masks and its standard error.
pub fn shrinkage_monte_carlo(state: &[ParamVector], p: f64, trials: usize, seed: u64) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(config_err(format!("fraction {p} outside [0, 1]")));
    }
    if state.len() < 2 || trials < 2 {
        return Err(config_err("need at least two replicas and two trials"));
    }
    let base: Vec<Vec<f64>> = state.iter().map(|w| w.values().to_vec()).collect();
    let before = two_pass_consensus_error(&base);
    if before == 0.0 {
        return Err(config_err("state already at consensus"));
    }
    let m = base.len() as f64;
    let mut ratios = Vec::with_capacity(trials);
    for trial in 0..trials {
        let mut w = base.clone();
        for s in 0..state[0].num_stages() {
            let range = state[0].stage_range(s);
            let picked = if p == 0.0 {
                Vec::new()
            } else {
                let rng = Rng::derive(seed, Purpose::Mask, s as u64, trial as u64);
                sample_subset(&rng, range.len(), p, SampleMode::Bernoulli, trial as u64)?.indices
            };
            for mu in picked {
                let k = range.start + mu;
                let mean = w.iter().map(|r| r[k]).sum::<f64>() / m;
                for r in w.iter_mut() {
                    r[k] = mean;
                }
            }
        }
        ratios.push(two_pass_consensus_error(&w) / before);
    }
    let n = trials as f64;
    let mean = ratios.iter().sum::<f64>() / n;
    let var = ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}
