//! Local optimizers and the learning-rate / EMA-coefficient schedules.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
    #[default]
    Nadamw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// NAdam momentum-schedule decay (ψ).
    pub momentum_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Nadamw,
            beta1: 0.99,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            momentum_decay: 4e-3,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            weight_decay: 0.0,
            ..Self::default()
        }
    }

    pub fn adamw() -> Self {
        Self {
            kind: OptimizerKind::Adamw,
            beta1: 0.9,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..1.0).contains(&v);
        if !in_unit(self.beta1) || !in_unit(self.beta2) {
            return Err(config_err("optimizer betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 || self.momentum_decay < 0.0 {
            return Err(config_err(
                "optimizer eps must be positive and weight_decay, momentum_decay non-negative",
            ));
        }
        Ok(())
    }
}

/// Per-(replica, stage) optimizer accumulators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub momentum_decay: f64,
    /// Running product of NAdam momentum coefficients.
    pub mu_product: f64,
}

impl OptimizerState {
    pub fn new(cfg: &OptimizerConfig, len: usize) -> Self {
        let moments = if cfg.kind == OptimizerKind::Sgd { 0 } else { len };
        Self {
            kind: cfg.kind,
            first_moment: vec![0.0; moments],
            second_moment: vec![0.0; moments],
            step_count: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            momentum_decay: cfg.momentum_decay,
            mu_product: 1.0,
        }
    }

    /// One optimizer step on `params` in place.
    pub fn apply_update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if params.len() != grad.len() {
            return Err(Error::Dimension {
                expected: params.len(),
                got: grad.len(),
            });
        }
        if !(lr > 0.0) {
            return Err(config_err(format!("learning rate {lr} must be positive")));
        }
        let step = self.step_count + 1;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { step });
        }
        self.step_count = step;
        match self.kind {
            OptimizerKind::Sgd => {
                let decay = 1.0 - lr * self.weight_decay;
                for (w, g) in params.iter_mut().zip(grad) {
                    if self.weight_decay != 0.0 {
                        *w *= decay;
                    }
                    *w -= lr * g;
                }
            }
            OptimizerKind::Adamw => {
                let (b1, b2) = (self.beta1, self.beta2);
                let bc1 = 1.0 - b1.powi(step as i32);
                let bc2 = 1.0 - b2.powi(step as i32);
                let decay = 1.0 - lr * self.weight_decay;
                for k in 0..params.len() {
                    let g = grad[k];
                    let m = b1 * self.first_moment[k] + (1.0 - b1) * g;
                    let v = b2 * self.second_moment[k] + (1.0 - b2) * g * g;
                    self.first_moment[k] = m;
                    self.second_moment[k] = v;
                    let w = params[k] * decay;
                    params[k] = w - lr * (m / bc1) / ((v / bc2).sqrt() + self.eps);
                }
            }
            OptimizerKind::Nadamw => {
                let (b1, b2) = (self.beta1, self.beta2);
                let t = step as f64;
                let mu = b1 * (1.0 - 0.5 * 0.96f64.powf(t * self.momentum_decay));
                let mu_next = b1 * (1.0 - 0.5 * 0.96f64.powf((t + 1.0) * self.momentum_decay));
                self.mu_product *= mu;
                let bc2 = 1.0 - b2.powi(step as i32);
                let grad_coef = lr * (1.0 - mu) / (1.0 - self.mu_product);
                let mom_coef = lr * mu_next / (1.0 - self.mu_product * mu_next);
                let decay = 1.0 - lr * self.weight_decay;
                for k in 0..params.len() {
                    let g = grad[k];
                    let m = b1 * self.first_moment[k] + (1.0 - b1) * g;
                    let v = b2 * self.second_moment[k] + (1.0 - b2) * g * g;
                    self.first_moment[k] = m;
                    self.second_moment[k] = v;
                    let denom = (v / bc2).sqrt() + self.eps;
                    // Nesterov lookahead: current gradient plus the next-step momentum
                    let w = params[k] * decay;
                    params[k] = w - grad_coef * g / denom - mom_coef * m / denom;
                }
            }
        }
        Ok(())
    }
}

/// Rescales `grad` so its Euclidean norm is at most `max_norm`; returns the original norm.
pub fn clip_by_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= s;
        }
    }
    norm
}

// ---------------------------------------------------------------------------
// Schedules

fn cosine_between(from: f64, to: f64, progress: f64) -> f64 {
    to + (from - to) * 0.5 * (1.0 + (PI * progress).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant {
        lr: f64,
    },
    /// Linear warm-up from `warmup_start` to `peak_lr`, then cosine decay to `floor_lr`.
    WarmupCosine {
        warmup_steps: u64,
        peak_lr: f64,
        floor_lr: f64,
        #[serde(default = "default_warmup_start")]
        warmup_start: f64,
        /// Horizon; `None` means the length of the run.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        total_steps: Option<u64>,
    },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::WarmupCosine {
            warmup_steps: 3000,
            peak_lr: 3e-4,
            floor_lr: 3e-5,
            warmup_start: default_warmup_start(),
            total_steps: None,
        }
    }
}

fn default_warmup_start() -> f64 {
    1e-7
}

impl LrSchedule {
    pub fn with_horizon(mut self, horizon: u64) -> Self {
        if let LrSchedule::WarmupCosine { total_steps, .. } = &mut self {
            total_steps.get_or_insert(horizon);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LrSchedule::Constant { lr } if lr > 0.0 => Ok(()),
            LrSchedule::Constant { lr } => Err(config_err(format!("lr {lr} must be positive"))),
            LrSchedule::WarmupCosine {
                warmup_steps,
                peak_lr,
                floor_lr,
                warmup_start,
                total_steps,
            } => {
                if !(peak_lr > 0.0 && floor_lr > 0.0 && warmup_start > 0.0) {
                    return Err(config_err("lr schedule values must be positive"));
                }
                if let Some(t) = total_steps {
                    if t < warmup_steps {
                        return Err(config_err("lr schedule total_steps must be >= warmup_steps"));
                    }
                }
                Ok(())
            }
        }
    }

    pub fn lr_at(&self, t: u64) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::WarmupCosine {
                warmup_steps,
                peak_lr,
                floor_lr,
                warmup_start,
                total_steps,
            } => {
                let total = total_steps.unwrap_or(u64::MAX);
                if t > total {
                    return floor_lr;
                }
                if t <= warmup_steps {
                    if warmup_steps == 0 {
                        return peak_lr;
                    }
                    return warmup_start + (peak_lr - warmup_start) * (t as f64 / warmup_steps as f64);
                }
                if total == warmup_steps {
                    return floor_lr;
                }
                let progress = (t - warmup_steps) as f64 / (total - warmup_steps) as f64;
                cosine_between(peak_lr, floor_lr, progress)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmaSchedule {
    /// Constant `initial` for `hold_steps`, then cosine decay to `final_value`.
    HoldCosine {
        initial: f64,
        hold_steps: u64,
        final_value: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        total_steps: Option<u64>,
    },
    /// `λ_t = t^(-exponent)` (with `t` floored at 1): divergent sum, summable squares
    /// for exponents in (0.5, 1].
    Power { exponent: f64 },
    Constant { value: f64 },
}

impl Default for EmaSchedule {
    fn default() -> Self {
        EmaSchedule::HoldCosine {
            initial: 0.5,
            hold_steps: 1000,
            final_value: 0.01,
            total_steps: None,
        }
    }
}

impl EmaSchedule {
    pub fn with_horizon(mut self, horizon: u64) -> Self {
        if let EmaSchedule::HoldCosine { total_steps, .. } = &mut self {
            total_steps.get_or_insert(horizon);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            EmaSchedule::HoldCosine {
                initial,
                final_value,
                ..
            } => (0.0..=1.0).contains(&initial) && (0.0..=1.0).contains(&final_value),
            EmaSchedule::Power { exponent } => exponent > 0.0,
            EmaSchedule::Constant { value } => (0.0..=1.0).contains(&value),
        };
        if ok {
            Ok(())
        } else {
            Err(config_err(format!("invalid EMA schedule {self:?}")))
        }
    }

    pub fn lambda_at(&self, t: u64) -> f64 {
        match *self {
            EmaSchedule::HoldCosine {
                initial,
                hold_steps,
                final_value,
                total_steps,
            } => {
                if t <= hold_steps {
                    return initial;
                }
                let total = total_steps.unwrap_or(u64::MAX);
                if t >= total {
                    return final_value;
                }
                let progress = (t - hold_steps) as f64 / (total - hold_steps) as f64;
                cosine_between(initial, final_value, progress)
            }
            EmaSchedule::Power { exponent } => (t.max(1) as f64).powf(-exponent),
            EmaSchedule::Constant { value } => value,
        }
    }
}
