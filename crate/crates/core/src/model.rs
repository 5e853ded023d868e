//! Desk-scale objectives split into pipeline stages: a diagonal quadratic with
//! known smoothness constant, and a small fully connected regression network.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::numerics::{ParamVector, Purpose, Rng};

/// Identifies the samples drawn by one replica at one local step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Minibatch {
    pub replica: usize,
    pub step: u64,
    /// Indices into the replica's data shard (empty for the quadratic).
    pub indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Quadratic(QuadraticConfig),
    Mlp(MlpConfig),
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::Quadratic(QuadraticConfig::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadraticConfig {
    pub dim: usize,
    /// Smallest curvature eigenvalue.
    pub min_curvature: f64,
    /// Largest curvature eigenvalue, i.e. the smoothness constant.
    pub max_curvature: f64,
    /// Std-dev of each replica's center around the shared center.
    pub center_spread: f64,
    /// Std-dev of the shared center around the origin.
    pub center_scale: f64,
    /// Std-dev of per-replica perturbations of the starting point.
    pub init_spread: f64,
    /// Std-dev of the additive Gaussian gradient noise.
    pub noise_std: f64,
}

impl Default for QuadraticConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            min_curvature: 0.1,
            max_curvature: 1.0,
            center_spread: 0.05,
            center_scale: 1.0,
            init_spread: 0.0,
            noise_std: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation output `a = apply(z)`.
    #[inline]
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    /// Hidden width of the random teacher network that labels the data.
    pub teacher_hidden: usize,
    pub label_noise: f64,
    pub shard_size: usize,
    pub validation_size: usize,
    pub batch_size: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            input_dim: 8,
            hidden: vec![32, 32],
            output_dim: 1,
            activation: Activation::Tanh,
            teacher_hidden: 16,
            label_noise: 0.05,
            shard_size: 512,
            validation_size: 512,
            batch_size: 16,
        }
    }
}

/// Assignment of parameters to contiguous pipeline stages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StagePartition {
    /// `num_stages + 1` boundaries into the flat parameter vector.
    pub offsets: Vec<usize>,
    /// Stage of each layer (MLP only).
    pub layer_stage: Option<Vec<usize>>,
}

impl StagePartition {
    pub fn num_stages(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Near-equal contiguous blocks of `dim` parameters.
    fn even_blocks(dim: usize, stages: usize) -> Result<Self> {
        if stages == 0 || stages > dim {
            return Err(config_err(format!(
                "cannot split {dim} parameters into {stages} stages"
            )));
        }
        let offsets = split_counts(dim, stages)
            .into_iter()
            .scan(0, |acc, c| {
                *acc += c;
                Some(*acc)
            });
        Ok(Self {
            offsets: std::iter::once(0).chain(offsets).collect(),
            layer_stage: None,
        })
    }
}

/// Splits `n` items into `parts` near-equal counts, earlier parts taking the remainder.
fn split_counts(n: usize, parts: usize) -> Vec<usize> {
    (0..parts)
        .map(|j| n / parts + usize::from(j < n % parts))
        .collect()
}

// ---------------------------------------------------------------------------

/// `f_i(w) = ½ (w − a_i)ᵀ A (w − a_i)` with diagonal `A`.
#[derive(Clone, Debug)]
pub struct QuadraticModel {
    pub curvature: Vec<f64>,
    pub centers: Vec<Vec<f64>>,
    /// Minimizer of the summed objective (mean of the centers).
    pub consensus_center: Vec<f64>,
    pub lipschitz: f64,
    pub noise_std: f64,
    init: Vec<Vec<f64>>,
    partition: StagePartition,
}

impl QuadraticModel {
    pub fn new(cfg: &QuadraticConfig, replicas: usize, stages: usize, seed: u64) -> Result<Self> {
        if cfg.dim == 0 {
            return Err(config_err("model.dim must be positive"));
        }
        if !(cfg.min_curvature > 0.0 && cfg.max_curvature >= cfg.min_curvature) {
            return Err(config_err(
                "model curvature must satisfy 0 < min_curvature <= max_curvature",
            ));
        }
        if cfg.noise_std < 0.0 || cfg.center_spread < 0.0 || cfg.init_spread < 0.0 {
            return Err(config_err("model noise/spread values must be non-negative"));
        }
        let d = cfg.dim;
        let curvature: Vec<f64> = if d == 1 {
            vec![cfg.max_curvature]
        } else {
            (0..d)
                .map(|k| {
                    let t = k as f64 / (d - 1) as f64;
                    cfg.min_curvature + (cfg.max_curvature - cfg.min_curvature) * t
                })
                .collect()
        };
        let mut g = Rng::derive(seed, Purpose::Centers, 0, 0).generator();
        let shared: Vec<f64> = (0..d).map(|_| cfg.center_scale * normal(&mut g)).collect();
        let centers: Vec<Vec<f64>> = (0..replicas)
            .map(|i| {
                let mut g = Rng::derive(seed, Purpose::Centers, 1, i as u64).generator();
                shared
                    .iter()
                    .map(|c| c + cfg.center_spread * normal(&mut g))
                    .collect()
            })
            .collect();
        let consensus_center = (0..d)
            .map(|k| crate::numerics::mean_at(centers.iter().map(|c| c[k]), replicas))
            .collect();
        let init = (0..replicas)
            .map(|i| {
                let mut g = Rng::derive(seed, Purpose::Init, 1, i as u64).generator();
                (0..d).map(|_| cfg.init_spread * normal(&mut g)).collect()
            })
            .collect();
        Ok(Self {
            lipschitz: curvature.iter().cloned().fold(f64::MIN, f64::max),
            curvature,
            centers,
            consensus_center,
            noise_std: cfg.noise_std,
            init,
            partition: StagePartition::even_blocks(d, stages)?,
        })
    }

    fn loss_at(&self, w: &[f64], center: &[f64]) -> f64 {
        0.5 * w
            .iter()
            .zip(center)
            .zip(&self.curvature)
            .map(|((w, c), a)| a * (w - c) * (w - c))
            .sum::<f64>()
    }

    fn grad_range(
        &self,
        w: &[f64],
        replica: usize,
        range: std::ops::Range<usize>,
        noise: &Rng,
    ) -> Vec<f64> {
        let c = &self.centers[replica];
        let mut g = noise.generator();
        // draw the whole noise vector so any stage slice is a slice of the full gradient
        let eps: Vec<f64> = if self.noise_std > 0.0 {
            (0..w.len()).map(|_| normal(&mut g)).collect()
        } else {
            Vec::new()
        };
        range
            .map(|k| {
                let exact = self.curvature[k] * (w[k] - c[k]);
                if eps.is_empty() {
                    exact
                } else {
                    exact + self.noise_std * eps[k]
                }
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------

/// Regression MLP trained with mean squared error on synthetic teacher data.
#[derive(Clone, Debug)]
pub struct MlpModel {
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub batch_size: usize,
    inputs: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
    /// Per-replica sample ids into `inputs`/`targets`.
    pub shards: Vec<Vec<usize>>,
    pub validation: Vec<usize>,
    init: Vec<f64>,
    partition: StagePartition,
    seed: u64,
}

/// Offsets of layer `l`'s weight matrix (row-major out × in) and bias.
#[derive(Clone, Copy, Debug)]
struct LayerSlot {
    w: usize,
    b: usize,
    fan_in: usize,
    fan_out: usize,
}

impl MlpModel {
    pub fn new(cfg: &MlpConfig, replicas: usize, stages: usize, seed: u64) -> Result<Self> {
        if cfg.input_dim == 0 || cfg.output_dim == 0 || cfg.hidden.iter().any(|&h| h == 0) {
            return Err(config_err("model layer widths must be positive"));
        }
        if cfg.shard_size == 0 || cfg.batch_size == 0 || cfg.validation_size == 0 {
            return Err(config_err(
                "model shard_size, batch_size and validation_size must be positive",
            ));
        }
        let mut layer_dims = vec![cfg.input_dim];
        layer_dims.extend(&cfg.hidden);
        layer_dims.push(cfg.output_dim);
        let num_layers = layer_dims.len() - 1;
        if stages == 0 || stages > num_layers {
            return Err(config_err(format!(
                "cannot assign {num_layers} layers to {stages} stages"
            )));
        }

        // data: one generator, shuffled and split into disjoint shards
        let teacher_dims = [cfg.input_dim, cfg.teacher_hidden.max(1), cfg.output_dim];
        let teacher = random_weights(&teacher_dims, &Rng::derive(seed, Purpose::Data, 0, 0));
        let n_train = replicas * cfg.shard_size;
        let n = n_train + cfg.validation_size;
        let mut g = Rng::derive(seed, Purpose::Data, 1, 0).generator();
        let mut inputs = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        for _ in 0..n {
            let x: Vec<f64> = (0..cfg.input_dim).map(|_| normal(&mut g)).collect();
            let mut y = forward_plain(&teacher_dims, &teacher, Activation::Tanh, &x);
            for v in &mut y {
                *v += cfg.label_noise * normal(&mut g);
            }
            inputs.push(x);
            targets.push(y);
        }
        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut Rng::derive(seed, Purpose::Data, 2, 0).generator());
        let shards = order.chunks(cfg.shard_size).map(<[usize]>::to_vec).collect();
        let validation = (n_train..n).collect();

        let layers_per_stage = split_counts(num_layers, stages);
        let mut layer_stage = Vec::with_capacity(num_layers);
        for (s, &c) in layers_per_stage.iter().enumerate() {
            layer_stage.extend(std::iter::repeat(s).take(c));
        }
        let mut offsets = vec![0];
        let mut acc = 0;
        for l in 0..num_layers {
            acc += (layer_dims[l] + 1) * layer_dims[l + 1];
            if l + 1 == num_layers || layer_stage[l + 1] != layer_stage[l] {
                offsets.push(acc);
            }
        }

        let init = random_weights(&layer_dims, &Rng::derive(seed, Purpose::Init, 0, 0));
        Ok(Self {
            layer_dims,
            activation: cfg.activation,
            batch_size: cfg.batch_size,
            inputs,
            targets,
            shards,
            validation,
            init,
            partition: StagePartition {
                offsets,
                layer_stage: Some(layer_stage),
            },
            seed,
        })
    }

    pub fn num_params(&self) -> usize {
        param_count(&self.layer_dims)
    }

    fn slots(&self) -> Vec<LayerSlot> {
        layer_slots(&self.layer_dims)
    }

    /// Inputs and targets of one sample.
    pub fn sample(&self, id: usize) -> (&[f64], &[f64]) {
        (&self.inputs[id], &self.targets[id])
    }

    pub fn forward(&self, w: &[f64], x: &[f64]) -> Vec<f64> {
        forward_plain(&self.layer_dims, w, self.activation, x)
    }

    /// Mean of ½‖ŷ − y‖² over `ids`.
    fn loss_ids(&self, w: &[f64], ids: &[usize]) -> f64 {
        let total: f64 = ids
            .iter()
            .map(|&id| {
                let y_hat = self.forward(w, &self.inputs[id]);
                0.5 * y_hat
                    .iter()
                    .zip(&self.targets[id])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum();
        total / ids.len() as f64
    }

    /// Exact gradient of [`Self::loss_ids`] by backpropagation.
    fn grad_ids(&self, w: &[f64], ids: &[usize]) -> Vec<f64> {
        let slots = self.slots();
        let mut grad = vec![0.0; w.len()];
        let scale = 1.0 / ids.len() as f64;
        let num_layers = slots.len();
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(num_layers + 1);
        for &id in ids {
            acts.clear();
            acts.push(self.inputs[id].clone());
            for (l, s) in slots.iter().enumerate() {
                let x = &acts[l];
                let mut out = w[s.b..s.b + s.fan_out].to_vec();
                for (o, z) in out.iter_mut().enumerate() {
                    let row = &w[s.w + o * s.fan_in..s.w + (o + 1) * s.fan_in];
                    *z += dot(row, x);
                }
                if l + 1 < num_layers {
                    for z in &mut out {
                        *z = self.activation.apply(*z);
                    }
                }
                acts.push(out);
            }
            // dL/d(pre-activation) of the output layer
            let mut delta: Vec<f64> = acts[num_layers]
                .iter()
                .zip(&self.targets[id])
                .map(|(a, y)| (a - y) * scale)
                .collect();
            for l in (0..num_layers).rev() {
                let s = slots[l];
                let x = &acts[l];
                for o in 0..s.fan_out {
                    grad[s.b + o] += delta[o];
                    let row = &mut grad[s.w + o * s.fan_in..s.w + (o + 1) * s.fan_in];
                    for (gi, xi) in row.iter_mut().zip(x) {
                        *gi += delta[o] * xi;
                    }
                }
                if l > 0 {
                    let mut prev = vec![0.0; s.fan_in];
                    for o in 0..s.fan_out {
                        let row = &w[s.w + o * s.fan_in..s.w + (o + 1) * s.fan_in];
                        for (p, wi) in prev.iter_mut().zip(row) {
                            *p += delta[o] * wi;
                        }
                    }
                    for (p, a) in prev.iter_mut().zip(x) {
                        *p *= self.activation.derivative_from_output(*a);
                    }
                    delta = prev;
                }
            }
        }
        grad
    }

    /// Shard positions used at `step`: a cursor walking through a fresh
    /// permutation of the shard each epoch.
    pub fn batch_indices(&self, replica: usize, step: u64) -> Vec<usize> {
        let shard = &self.shards[replica];
        let len = shard.len() as u64;
        let b = self.batch_size as u64;
        let mut out = Vec::with_capacity(self.batch_size);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for k in 0..b {
            let pos = step * b + k;
            let (epoch, within) = (pos / len, (pos % len) as usize);
            if cached.as_ref().map_or(true, |(e, _)| *e != epoch) {
                let mut perm: Vec<usize> = (0..shard.len()).collect();
                perm.shuffle(
                    &mut Rng::derive(self.seed, Purpose::Batch, replica as u64, epoch).generator(),
                );
                cached = Some((epoch, perm));
            }
            out.push(cached.as_ref().unwrap().1[within]);
        }
        out
    }

    fn batch_ids(&self, batch: &Minibatch) -> Vec<usize> {
        let shard = &self.shards[batch.replica];
        batch.indices.iter().map(|&i| shard[i]).collect()
    }
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

fn layer_slots(dims: &[usize]) -> Vec<LayerSlot> {
    let mut off = 0;
    dims.windows(2)
        .map(|d| {
            let (fan_in, fan_out) = (d[0], d[1]);
            let slot = LayerSlot {
                w: off,
                b: off + fan_in * fan_out,
                fan_in,
                fan_out,
            };
            off += (fan_in + 1) * fan_out;
            slot
        })
        .collect()
}

fn forward_plain(dims: &[usize], w: &[f64], act: Activation, x: &[f64]) -> Vec<f64> {
    let slots = layer_slots(dims);
    let mut cur = x.to_vec();
    for (l, s) in slots.iter().enumerate() {
        let mut out = w[s.b..s.b + s.fan_out].to_vec();
        for (o, z) in out.iter_mut().enumerate() {
            *z += dot(&w[s.w + o * s.fan_in..s.w + (o + 1) * s.fan_in], &cur);
        }
        if l + 1 < slots.len() {
            for z in &mut out {
                *z = act.apply(*z);
            }
        }
        cur = out;
    }
    cur
}

/// Weights ~ N(0, 1/fan_in), biases zero.
fn random_weights(dims: &[usize], rng: &Rng) -> Vec<f64> {
    let mut g = rng.generator();
    let mut w = vec![0.0; param_count(dims)];
    for s in layer_slots(dims) {
        let std = (1.0 / s.fan_in as f64).sqrt();
        for v in &mut w[s.w..s.b] {
            *v = std * normal(&mut g);
        }
    }
    w
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normal(g: &mut impl rand::Rng) -> f64 {
    StandardNormal.sample(g)
}

// ---------------------------------------------------------------------------

/// A built objective, ready to be evaluated by the simulator.
#[derive(Clone, Debug)]
pub enum Model {
    Quadratic(QuadraticModel),
    Mlp(MlpModel),
}

impl Model {
    pub fn build(cfg: &ModelConfig, replicas: usize, stages: usize, seed: u64) -> Result<Self> {
        if replicas == 0 {
            return Err(config_err("num_replicas must be at least 1"));
        }
        Ok(match cfg {
            ModelConfig::Quadratic(c) => Model::Quadratic(QuadraticModel::new(c, replicas, stages, seed)?),
            ModelConfig::Mlp(c) => Model::Mlp(MlpModel::new(c, replicas, stages, seed)?),
        })
    }

    pub fn dim(&self) -> usize {
        *self.partition().offsets.last().unwrap()
    }

    pub fn partition(&self) -> &StagePartition {
        match self {
            Model::Quadratic(q) => &q.partition,
            Model::Mlp(m) => &m.partition,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.partition().num_stages()
    }

    /// Starting point for `replica`.
    pub fn init_params(&self, replica: usize) -> ParamVector {
        let values = match self {
            Model::Quadratic(q) => q.init[replica].clone(),
            Model::Mlp(m) => m.init.clone(),
        };
        ParamVector::new(values, self.partition().offsets.clone())
            .expect("model layout is validated at construction")
    }

    pub fn sample_batch(&self, replica: usize, step: u64) -> Minibatch {
        let indices = match self {
            Model::Quadratic(_) => Vec::new(),
            Model::Mlp(m) => m.batch_indices(replica, step),
        };
        Minibatch {
            replica,
            step,
            indices,
        }
    }

    fn check(&self, params: &ParamVector, batch: &Minibatch) -> Result<()> {
        if params.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: params.len(),
            });
        }
        let replicas = match self {
            Model::Quadratic(q) => q.centers.len(),
            Model::Mlp(m) => m.shards.len(),
        };
        if batch.replica >= replicas {
            return Err(config_err(format!(
                "replica {} out of range ({replicas} replicas)",
                batch.replica
            )));
        }
        Ok(())
    }

    /// Minibatch loss of the batch's replica objective.
    pub fn loss(&self, params: &ParamVector, batch: &Minibatch) -> Result<f64> {
        self.check(params, batch)?;
        Ok(match self {
            Model::Quadratic(q) => q.loss_at(params.values(), &q.centers[batch.replica]),
            Model::Mlp(m) => m.loss_ids(params.values(), &m.batch_ids(batch)),
        })
    }

    /// Minibatch gradient; `noise` selects the gradient-noise stream (quadratic only).
    pub fn gradient(&self, params: &ParamVector, batch: &Minibatch, noise: &Rng) -> Result<ParamVector> {
        self.check(params, batch)?;
        let g = match self {
            Model::Quadratic(q) => q.grad_range(params.values(), batch.replica, 0..params.len(), noise),
            Model::Mlp(m) => m.grad_ids(params.values(), &m.batch_ids(batch)),
        };
        params.with_values(g)
    }

    /// Gradient restricted to one stage's parameter block.
    pub fn stage_gradient(
        &self,
        params: &ParamVector,
        batch: &Minibatch,
        stage: usize,
        noise: &Rng,
    ) -> Result<Vec<f64>> {
        if stage >= self.num_stages() {
            return Err(config_err(format!(
                "stage {stage} out of range for {} stages",
                self.num_stages()
            )));
        }
        self.check(params, batch)?;
        let range = params.stage_range(stage);
        Ok(match self {
            Model::Quadratic(q) => q.grad_range(params.values(), batch.replica, range, noise),
            // the backward pass is end-to-end; a stage reads its own block
            Model::Mlp(m) => m.grad_ids(params.values(), &m.batch_ids(batch))[range].to_vec(),
        })
    }

    /// Held-out loss (quadratic: distance to the consensus minimizer).
    pub fn validation_loss(&self, params: &ParamVector) -> f64 {
        match self {
            Model::Quadratic(q) => q.loss_at(params.values(), &q.consensus_center),
            Model::Mlp(m) => m.loss_ids(params.values(), &m.validation),
        }
    }

    /// Noise-free loss of `replica`'s own objective, used for trajectory logging.
    pub fn train_loss(&self, replica: usize, params: &ParamVector) -> f64 {
        match self {
            Model::Quadratic(q) => q.loss_at(params.values(), &q.centers[replica]),
            Model::Mlp(m) => {
                let shard = &m.shards[replica];
                m.loss_ids(params.values(), &shard[..shard.len().min(256)])
            }
        }
    }
}
