//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero if any criterion fails.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use meshsim_core::metrics::consensus_error;
use meshsim_core::model::{Activation, MlpConfig, QuadraticConfig};
use meshsim_core::numerics::{Purpose, Rng};
use meshsim_core::optim::{clip_by_norm, OptimizerState};
use meshsim_core::oracle::{shrinkage_monte_carlo, NaiveMesh};
use meshsim_core::pipeline::{delayed_step, noise_stream, StageDelayConfig, StepContext, WeightHistory};
use meshsim_core::simulator::WorkerReplica;
use meshsim_core::{
    run, AveragingConfig, DelayMode, DiffScale, EmaSchedule, LrSchedule, MeshConfig, Model, ModelConfig,
    OptimizerConfig, ParamVector, QuantScheme, SampleMode, Simulation, Strategy,
};
use rand::Rng as _;

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn bits(ps: &[ParamVector]) -> Vec<u64> {
    ps.iter().flat_map(|p| p.values().iter().map(|v| v.to_bits())).collect()
}

// ---------------------------------------------------------------------------
// 1. shrinkage of the consensus error by one sparse average

fn shrinkage_matches_one_minus_p() -> Result<String, String> {
    let mut g = Rng::derive(2024, Purpose::Test, 1, 0).generator();
    let state: Vec<ParamVector> = (0..4)
        .map(|_| ParamVector::from_values((0..1000).map(|_| g.random_range(-1.0..1.0)).collect()))
        .collect();
    let mut parts = Vec::new();
    for p in [0.1, 0.5, 0.9] {
        let (ratio, se) = shrinkage_monte_carlo(&state, p, 2000, 7).map_err(|e| e.to_string())?;
        ensure((ratio - (1.0 - p)).abs() <= 0.02, || {
            format!("p={p}: ratio {ratio:.4} ± {se:.4}, expected {:.2} ± 0.02", 1.0 - p)
        })?;
        parts.push(format!("p={p}: {ratio:.4}"));
    }
    Ok(parts.join(", "))
}

// ---------------------------------------------------------------------------
// 2. consensus under synchronous sparse averaging with a small constant step

fn sparse_consensus_config(lr: f64) -> MeshConfig {
    MeshConfig {
        num_stages: 1,
        num_replicas: 4,
        total_steps: 20_000,
        seed: 31,
        model: ModelConfig::Quadratic(QuadraticConfig {
            dim: 32,
            noise_std: 0.0,
            center_spread: 0.0,
            init_spread: 1.0,
            ..QuadraticConfig::default()
        }),
        optimizer: OptimizerConfig::sgd(),
        lr: LrSchedule::Constant { lr },
        averaging: AveragingConfig {
            subset_fraction: 0.1,
            sample_mode: SampleMode::Bernoulli,
            ..AveragingConfig::for_strategy(Strategy::Sparta)
        },
        eval_every: 1000,
        clip_norm: 0.0,
        ..MeshConfig::default()
    }
}

fn consensus_trace(cfg: &MeshConfig) -> Result<(f64, Vec<f64>), String> {
    let mut sim = Simulation::new(cfg).map_err(|e| e.to_string())?;
    let Model::Quadratic(q) = sim.model() else { unreachable!() };
    let l = q.lipschitz;
    let mut trace = vec![consensus_error(&sim.params())];
    while sim.tick().map_err(|e| e.to_string())? {
        trace.push(consensus_error(&sim.params()));
    }
    Ok((l, trace))
}

fn sparse_averaging_reaches_consensus() -> Result<String, String> {
    let p = 0.1;
    let probe = sparse_consensus_config(1.0);
    let l = match Model::build(&probe.model, 4, 1, probe.seed).map_err(|e| e.to_string())? {
        Model::Quadratic(q) => q.lipschitz,
        _ => unreachable!(),
    };
    let bound = p / (2.0 * (1.0 - p) * l);
    let (_, trace) = consensus_trace(&sparse_consensus_config(0.5 * bound))?;
    let hit = trace
        .iter()
        .position(|&e| e < 1e-8)
        .ok_or_else(|| format!("consensus error still {:.3e} after 20k steps", trace.last().unwrap()))?;
    for w in (0..trace.len()).step_by(100).collect::<Vec<_>>().windows(2) {
        let (a, b) = (trace[w[0]], trace[w[1]]);
        if a < 1e-25 {
            break;
        }
        ensure(b <= a, || format!("error rose from {a:.3e} to {b:.3e} between steps {} and {}", w[0], w[1]))?;
    }
    let (_, control) = consensus_trace(&sparse_consensus_config(10.0 * bound))?;
    let increases = control.windows(2).filter(|w| w[1] > w[0]).count();
    Ok(format!(
        "eta={:.4}: below 1e-8 at step {hit}; control eta={:.3}: final {:.2e}, {increases} step-wise increases",
        0.5 * bound,
        10.0 * bound,
        control.last().unwrap()
    ))
}

// ---------------------------------------------------------------------------
// 3. EMA diagnostics vanish under a decaying EMA coefficient

fn ema_diagnostics_vanish() -> Result<String, String> {
    let cfg = MeshConfig {
        num_stages: 1,
        num_replicas: 4,
        total_steps: 20_000,
        seed: 5,
        model: ModelConfig::Quadratic(QuadraticConfig {
            dim: 32,
            noise_std: 0.1,
            init_spread: 1.0,
            ..QuadraticConfig::default()
        }),
        optimizer: OptimizerConfig::sgd(),
        lr: LrSchedule::WarmupCosine {
            warmup_steps: 0,
            peak_lr: 0.05,
            floor_lr: 1e-4,
            warmup_start: 1e-4,
            total_steps: None,
        },
        ema: EmaSchedule::Power { exponent: 0.6 },
        averaging: AveragingConfig {
            subset_fraction: 0.05,
            async_delay: 5,
            ..AveragingConfig::for_strategy(Strategy::EmaCorrected)
        },
        eval_every: 100,
        clip_norm: 0.0,
        ..MeshConfig::default()
    };
    let r = run(&cfg).map_err(|e| e.to_string())?;
    ensure(!r.stats.diverged, || "run diverged".into())?;
    let peak_var = r.records.iter().map(|m| m.ema_var_mean).fold(0.0, f64::max);
    let peak_err = r.records.iter().map(|m| m.consensus_error).fold(0.0, f64::max);
    let last = r.last();
    ensure(peak_var > 0.0, || "EMA variance never moved".into())?;
    ensure(last.ema_var_mean < 0.01 * peak_var, || {
        format!("final EMA variance {:.3e} vs peak {peak_var:.3e}", last.ema_var_mean)
    })?;
    ensure(last.consensus_error < 0.01 * peak_err, || {
        format!("final consensus error {:.3e} vs peak {peak_err:.3e}", last.consensus_error)
    })?;
    Ok(format!(
        "EMA variance {:.2e} (peak {peak_var:.2e}), consensus error {:.2e} (peak {peak_err:.2e})",
        last.ema_var_mean, last.consensus_error
    ))
}

// ---------------------------------------------------------------------------
// shared tiny instances for the bitwise checks

fn tiny_model(seed: u64) -> ModelConfig {
    if seed % 2 == 0 {
        ModelConfig::Quadratic(QuadraticConfig {
            dim: 12,
            init_spread: 0.4,
            ..QuadraticConfig::default()
        })
    } else {
        ModelConfig::Mlp(MlpConfig {
            input_dim: 3,
            hidden: vec![4],
            output_dim: 2,
            activation: Activation::Tanh,
            teacher_hidden: 3,
            shard_size: 24,
            validation_size: 16,
            batch_size: 4,
            ..MlpConfig::default()
        })
    }
}

fn tiny(seed: u64, replicas: usize, strategy: Strategy) -> MeshConfig {
    MeshConfig {
        num_stages: 2,
        num_replicas: replicas,
        total_steps: 40,
        seed,
        model: tiny_model(seed),
        optimizer: [OptimizerConfig::default(), OptimizerConfig::adamw(), OptimizerConfig::sgd()][seed as usize % 3].clone(),
        lr: LrSchedule::WarmupCosine {
            warmup_steps: 5,
            peak_lr: 0.03,
            floor_lr: 0.003,
            warmup_start: 1e-4,
            total_steps: None,
        },
        ema: EmaSchedule::HoldCosine {
            initial: 0.5,
            hold_steps: 10,
            final_value: 0.05,
            total_steps: None,
        },
        averaging: AveragingConfig {
            subset_fraction: 0.3,
            async_delay: 3,
            quant: [QuantScheme::None, QuantScheme::Bf16, QuantScheme::Fp8E4m3][(seed / 2) as usize % 3],
            sample_mode: if seed % 4 < 2 { SampleMode::FixedCount } else { SampleMode::Bernoulli },
            ..AveragingConfig::for_strategy(strategy)
        },
        delays: DelayMode::AsyncLinear,
        eval_every: 10,
        ..MeshConfig::default()
    }
}

/// Ticks two simulations side by side and compares parameters after every tick.
fn lockstep(a: &MeshConfig, b: &MeshConfig, what: &str) -> Result<(), String> {
    let mut x = Simulation::new(a).map_err(|e| format!("{what}: {e}"))?;
    let mut y = Simulation::new(b).map_err(|e| format!("{what}: {e}"))?;
    loop {
        let (mx, my) = (x.tick().map_err(|e| e.to_string())?, y.tick().map_err(|e| e.to_string())?);
        ensure(mx == my, || format!("{what}: runs ended at different ticks"))?;
        if !mx {
            return Ok(());
        }
        ensure(bits(&x.params()) == bits(&y.params()), || {
            format!("{what} (seed {}): diverged at tick {}", a.seed, x.clock().tick)
        })?;
    }
}

/// Single replica trained by the pipeline step alone.
fn single_worker(cfg: &MeshConfig) -> Result<Vec<ParamVector>, String> {
    let model = Model::build(&cfg.model, 1, cfg.num_stages, cfg.seed).map_err(|e| e.to_string())?;
    let delays = StageDelayConfig::resolve(&cfg.delays, cfg.num_stages).map_err(|e| e.to_string())?;
    let lr = cfg.lr.clone().with_horizon(cfg.total_steps);
    let ctx = StepContext { model: &model, lr: &lr, clip_norm: cfg.clip(), seed: cfg.seed };
    let mut r = WorkerReplica::new(0, model.init_params(0), &cfg.optimizer, WeightHistory::for_delays(&delays));
    let mut out = Vec::new();
    for _ in 0..cfg.total_steps {
        delayed_step(&mut r, &delays, &ctx).map_err(|e| e.to_string())?;
        out.push(r.params.clone());
    }
    Ok(out)
}

/// Gradient, clip and per-stage optimizer update with no pipeline machinery.
fn plain_optimizer(cfg: &MeshConfig) -> Result<Vec<ParamVector>, String> {
    let model = Model::build(&cfg.model, 1, cfg.num_stages, cfg.seed).map_err(|e| e.to_string())?;
    let lr = cfg.lr.clone().with_horizon(cfg.total_steps);
    let mut w = model.init_params(0);
    let mut opts: Vec<OptimizerState> =
        (0..w.num_stages()).map(|j| OptimizerState::new(&cfg.optimizer, w.stage_len(j))).collect();
    let mut out = Vec::new();
    for t in 0..cfg.total_steps {
        let batch = model.sample_batch(0, t);
        let mut g = model
            .gradient(&w, &batch, &noise_stream(cfg.seed, 0, t))
            .map_err(|e| e.to_string())?
            .into_values();
        if let Some(c) = cfg.clip() {
            clip_by_norm(&mut g, c);
        }
        for (j, o) in opts.iter_mut().enumerate() {
            let range = w.stage_range(j);
            o.apply_update(w.stage_mut(j), &g[range], lr.lr_at(t)).map_err(|e| e.to_string())?;
        }
        out.push(w.clone());
    }
    Ok(out)
}

fn sim_trace(cfg: &MeshConfig) -> Result<Vec<ParamVector>, String> {
    let mut sim = Simulation::new(cfg).map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    while sim.tick().map_err(|e| e.to_string())? {
        out.push(sim.params()[0].clone());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// 4. degenerate configurations collapse onto simpler ones

fn degenerate_equivalences() -> Result<String, String> {
    for seed in 0..20u64 {
        let mut sparta = tiny(seed, 3, Strategy::Sparta);

        let mut a = tiny(seed, 3, Strategy::AsyncSparta);
        a.averaging.async_delay = 0;
        lockstep(&a, &sparta, "async_sparta with zero delay vs sparta")?;

        let mut e = tiny(seed, 3, Strategy::EmaCorrected);
        e.averaging.async_delay = 0;
        e.ema = EmaSchedule::Constant { value: 1.0 };
        lockstep(&e, &sparta, "ema_corrected with zero delay and unit coefficient vs sparta")?;

        sparta.averaging.subset_fraction = 1.0;
        lockstep(&sparta, &tiny(seed, 3, Strategy::FullsyncDpavg), "sparta with p=1 vs fullsync")?;

        for strategy in Strategy::ALL {
            let mut c = tiny(seed, 1, strategy);
            if strategy == Strategy::EagerDiloco {
                c.averaging.subset_fraction = 1.0;
                c.averaging.async_delay = c.averaging.interval;
            }
            ensure(bits(&sim_trace(&c)?) == bits(&single_worker(&c)?), || {
                format!("single replica with {} differs from single-worker training (seed {seed})", strategy.name())
            })?;
        }

        let mut s = tiny(seed, 1, Strategy::EmaCorrected);
        s.delays = DelayMode::Sync;
        ensure(bits(&sim_trace(&s)?) == bits(&plain_optimizer(&s)?), || {
            format!("zero-delay pipeline differs from the plain optimizer (seed {seed})")
        })?;
    }
    Ok("5 equivalences x 20 seeds bitwise".into())
}

// ---------------------------------------------------------------------------
// 5. the generalized EMA path reproduces eager DiLoCo

fn eager_diloco_reduction() -> Result<String, String> {
    let mut n = 0;
    for m in [2, 4] {
        for k in [1, 3] {
            for seed in 0..3u64 {
                let mut eager = tiny(seed, m, Strategy::EagerDiloco);
                eager.total_steps = 200;
                eager.averaging.subset_fraction = 1.0;
                eager.averaging.interval = k;
                eager.averaging.async_delay = k;
                let mut ema = eager.clone();
                ema.averaging.strategy = Strategy::EmaCorrected;
                ema.averaging.diff_scale = DiffScale::InverseReplicas;
                ema.ema = EmaSchedule::Constant { value: 1.0 };
                lockstep(&ema, &eager, &format!("ema path vs eager_diloco (m={m}, K={k})"))?;
                n += 1;
            }
        }
    }
    Ok(format!("{n} runs of 200 steps bitwise equal"))
}

// ---------------------------------------------------------------------------
// 6 and 7. method ordering and quantization robustness on the MLP task

fn mlp_task(strategy: Strategy, quant: QuantScheme, seed: u64) -> MeshConfig {
    MeshConfig {
        num_stages: 2,
        num_replicas: 4,
        total_steps: 5000,
        seed,
        model: ModelConfig::Mlp(MlpConfig::default()),
        lr: LrSchedule::WarmupCosine {
            warmup_steps: 200,
            peak_lr: 3e-3,
            floor_lr: 3e-4,
            warmup_start: 1e-7,
            total_steps: None,
        },
        averaging: AveragingConfig {
            subset_fraction: 0.05,
            async_delay: 10,
            quant,
            ..AveragingConfig::for_strategy(strategy)
        },
        delays: DelayMode::AsyncLinear,
        eval_every: 1000,
        ..MeshConfig::default()
    }
}

const PAIRED_SEEDS: [u64; 5] = [101, 202, 303, 404, 505];

/// Final consensus losses per seed (infinite when the run diverged), memoized.
fn mlp_finals(strategy: Strategy, quant: QuantScheme) -> Result<Vec<f64>, String> {
    static CACHE: OnceLock<Mutex<HashMap<(Strategy, u8), Vec<f64>>>> = OnceLock::new();
    let key = (strategy, quant as u8);
    if let Some(v) = CACHE.get_or_init(Default::default).lock().unwrap().get(&key) {
        return Ok(v.clone());
    }
    let mut out = Vec::new();
    for seed in PAIRED_SEEDS {
        let r = run(&mlp_task(strategy, quant, seed)).map_err(|e| e.to_string())?;
        out.push(if r.stats.diverged { f64::INFINITY } else { r.last().consensus_loss });
    }
    CACHE.get().unwrap().lock().unwrap().insert(key, out.clone());
    Ok(out)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn method_ordering() -> Result<String, String> {
    let ours = mean(&mlp_finals(Strategy::EmaCorrected, QuantScheme::None)?);
    let raw = mean(&mlp_finals(Strategy::AblationRawDiff, QuantScheme::None)?);
    let stale = mean(&mlp_finals(Strategy::AsyncSparta, QuantScheme::None)?);
    let full = mean(&mlp_finals(Strategy::FullsyncDpavg, QuantScheme::None)?);
    let summary = format!(
        "ema_corrected {ours:.5e}, ablation_raw_diff {raw:.5e}, async_sparta {stale:.5e}, fullsync {full:.5e}"
    );
    ensure(ours <= raw, || format!("ema_corrected above ablation: {summary}"))?;
    ensure(raw <= stale, || format!("ablation above async_sparta: {summary}"))?;
    let gap = (ours - full).abs() / full;
    ensure(gap <= 0.05, || format!("gap to fullsync {:.2}%: {summary}", 100.0 * gap))?;
    Ok(format!("{summary}; gap to fullsync {:.2}%", 100.0 * gap))
}

fn quantization_robustness() -> Result<String, String> {
    let ours = mean(&mlp_finals(Strategy::EmaCorrected, QuantScheme::None)?);
    let ours_q = mean(&mlp_finals(Strategy::EmaCorrected, QuantScheme::Fp8E4m3)?);
    let full = mean(&mlp_finals(Strategy::FullsyncDpavg, QuantScheme::None)?);
    let full_q = mlp_finals(Strategy::FullsyncDpavg, QuantScheme::Fp8E4m3)?;
    let ours_deg = (ours_q - ours) / ours;
    let full_deg = (mean(&full_q) - full) / full;
    let summary = format!(
        "ema_corrected fp8 {:+.2}%, fullsync fp8 {}",
        100.0 * ours_deg,
        if full_q.iter().any(|v| v.is_infinite()) { "diverged".to_string() } else { format!("{:+.2}%", 100.0 * full_deg) }
    );
    ensure(ours_deg < 0.02, || format!("ema_corrected degrades by 2% or more: {summary}"))?;
    ensure(full_deg > ours_deg, || format!("fullsync degrades less than ema_corrected: {summary}"))?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// 8. heterogeneous speeds under a fixed total budget

fn heterogeneous_budget() -> Result<String, String> {
    let speeds = [10u64, 8, 1, 21];
    let budget = 40 * 100 - 7;
    let cfg = MeshConfig {
        num_stages: 2,
        num_replicas: 4,
        total_steps: 21 * 100,
        seed: 8,
        model: ModelConfig::Quadratic(QuadraticConfig::default()),
        lr: LrSchedule::Constant { lr: 0.02 },
        averaging: AveragingConfig::for_strategy(Strategy::EmaCorrected),
        speeds: speeds.to_vec(),
        budget: Some(budget),
        eval_every: 100,
        ..MeshConfig::default()
    };
    let mut sim = Simulation::new(&cfg).map_err(|e| e.to_string())?;
    let mut at_rounds: Vec<Vec<u64>> = vec![vec![0; 4]];
    while sim.tick().map_err(|e| e.to_string())? {
        if sim.stats().initiation_ticks.len() == at_rounds.len() {
            at_rounds.push(sim.replicas().iter().map(|r| r.local_step).collect());
        }
    }
    let stats = sim.stats().clone();
    ensure(!stats.diverged, || "heterogeneous run diverged".into())?;
    let total: u64 = stats.local_steps.iter().sum();
    ensure(total == budget, || format!("spent {total} local steps, budget {budget}"))?;
    ensure(stats.initiation_ticks.iter().all(|k| (k + 1) % 21 == 0), || "misaligned initiation".into())?;
    let full_rounds = at_rounds.len() - 1;
    for w in at_rounds.windows(2).take(full_rounds - 1) {
        let steps: Vec<u64> = w[1].iter().zip(&w[0]).map(|(b, a)| b - a).collect();
        ensure(steps == speeds, || format!("round took {steps:?} local steps"))?;
    }
    let loss = sim.record().map_err(|e| e.to_string())?.consensus_loss;
    ensure(loss.is_finite(), || "non-finite final loss".into())?;
    Ok(format!(
        "{total} local steps over {} aligned rounds, per-replica {:?}, final loss {loss:.3e}",
        stats.initiation_ticks.len(),
        stats.local_steps
    ))
}

// ---------------------------------------------------------------------------
// 9. the main engine against the brute-force reference

fn oracle_equivalence() -> Result<String, String> {
    let mut runs = 0;
    for strategy in Strategy::ALL {
        for (tau, k) in [(0, 1), (1, 1), (3, 1), (1, 2), (3, 2), (2, 2)] {
            if strategy == Strategy::EagerDiloco && tau != k {
                continue;
            }
            for replicas in [1, 2, 4] {
                for seed in 0..4u64 {
                    let mut c = tiny(seed * 7 + tau + 10 * k, replicas, strategy);
                    c.averaging.async_delay = tau;
                    c.averaging.interval = k;
                    c.averaging.outer_interval = 4;
                    if strategy == Strategy::EagerDiloco {
                        c.averaging.subset_fraction = 1.0;
                    }
                    let mut sim = Simulation::new(&c).map_err(|e| e.to_string())?;
                    let mut failure = None;
                    NaiveMesh::new(&c)
                        .map_err(|e| e.to_string())?
                        .run(|o| {
                            let _ = sim.tick();
                            if failure.is_none() {
                                let same_d = sim.replicas().iter().zip(&o.d).all(|(r, d)| {
                                    r.ema.d.iter().map(|v| v.to_bits()).eq(d.iter().map(|v| v.to_bits()))
                                });
                                if bits(&sim.params()) != bits(&o.params) || !same_d {
                                    failure = Some(o.tick);
                                }
                            }
                        })
                        .map_err(|e| e.to_string())?;
                    if let Some(t) = failure {
                        return Err(format!(
                            "{} tau={tau} K={k} m={replicas} seed={}: mismatch at tick {t}",
                            strategy.name(),
                            c.seed
                        ));
                    }
                    runs += 1;
                }
            }
        }
    }
    Ok(format!("{runs} tiny runs bitwise equal to the reference"))
}

// ---------------------------------------------------------------------------
// 10. analytic MLP gradients against central differences

fn mlp_gradients_match_finite_differences() -> Result<String, String> {
    let cfg = ModelConfig::Mlp(MlpConfig {
        input_dim: 4,
        hidden: vec![6, 5],
        output_dim: 2,
        shard_size: 64,
        validation_size: 16,
        batch_size: 8,
        ..MlpConfig::default()
    });
    let model = Model::build(&cfg, 2, 2, 77).map_err(|e| e.to_string())?;
    let mut g = Rng::derive(77, Purpose::Test, 10, 0).generator();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for point in 0..10u64 {
        let mut w = model.init_params(0);
        for v in w.values_mut() {
            *v += g.random_range(-0.5..0.5);
        }
        let batch = model.sample_batch((point % 2) as usize, point);
        let analytic = model.gradient(&w, &batch, &Rng::new(0, 0)).map_err(|e| e.to_string())?;
        let mut err = 0.0;
        for k in 0..w.len() {
            let (mut plus, mut minus) = (w.clone(), w.clone());
            plus.values_mut()[k] += h;
            minus.values_mut()[k] -= h;
            let num = (model.loss(&plus, &batch).unwrap() - model.loss(&minus, &batch).unwrap()) / (2.0 * h);
            err += (analytic.values()[k] - num).powi(2);
        }
        let rel = err.sqrt() / analytic.norm_sq().sqrt();
        ensure(rel < 1e-5, || format!("relative error {rel:.3e} at point {point}"))?;
        worst = worst.max(rel);
    }
    Ok(format!("worst relative error {worst:.2e} over 10 points"))
}

fn main() {
    let criteria: [(&str, Check, Duration); 10] = [
        ("consensus shrinkage per sparse average", shrinkage_matches_one_minus_p, Duration::from_secs(10)),
        ("sparse averaging reaches consensus", sparse_averaging_reaches_consensus, Duration::from_secs(30)),
        ("EMA variance and consensus error vanish", ema_diagnostics_vanish, Duration::from_secs(60)),
        ("degenerate equivalences", degenerate_equivalences, Duration::from_secs(60)),
        ("eager DiLoCo as a special case", eager_diloco_reduction, Duration::from_secs(10)),
        ("method ordering on the MLP task", method_ordering, Duration::from_secs(300)),
        ("fp8 payload robustness", quantization_robustness, Duration::from_secs(300)),
        ("heterogeneous budget accounting", heterogeneous_budget, Duration::from_secs(60)),
        ("bitwise agreement with the reference mesh", oracle_equivalence, Duration::from_secs(120)),
        ("MLP gradient check", mlp_gradients_match_finite_differences, Duration::from_secs(10)),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check, limit)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !filter.is_empty() && !filter.iter().any(|f| *f == id.to_string()) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > *limit => Err(format!("{detail}; took {elapsed:.1?}, limit {limit:?}")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail} [{elapsed:.1?}]"),
            Err(why) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {why} [{elapsed:.1?}]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}
