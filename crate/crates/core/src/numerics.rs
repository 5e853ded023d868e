//! Flat parameter vectors, counter-derived random streams, subset sampling
//! and simulated payload quantization.

use std::ops::Range;

use rand::seq::index;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

/// A flat parameter vector split into contiguous per-stage blocks.
///
/// `stage_offsets` has `num_stages + 1` entries: block `j` spans
/// `stage_offsets[j]..stage_offsets[j + 1]`. Stages are 0-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    stage_offsets: Vec<usize>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, stage_offsets: Vec<usize>) -> Result<Self> {
        validate_offsets(&stage_offsets, values.len())?;
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(config_err(format!("parameter {pos} is not finite")));
        }
        Ok(Self {
            values,
            stage_offsets,
        })
    }

    /// Single-stage vector.
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len();
        Self {
            values,
            stage_offsets: vec![0, n],
        }
    }

    pub fn zeros(stage_offsets: &[usize]) -> Self {
        let n = *stage_offsets.last().unwrap_or(&0);
        Self {
            values: vec![0.0; n],
            stage_offsets: stage_offsets.to_vec(),
        }
    }

    /// Same layout as `self`, with the given values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        check_len(self.values.len(), values.len())?;
        Ok(Self {
            values,
            stage_offsets: self.stage_offsets.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn stage_offsets(&self) -> &[usize] {
        &self.stage_offsets
    }

    pub fn num_stages(&self) -> usize {
        self.stage_offsets.len() - 1
    }

    pub fn stage_range(&self, stage: usize) -> Range<usize> {
        self.stage_offsets[stage]..self.stage_offsets[stage + 1]
    }

    pub fn stage_len(&self, stage: usize) -> usize {
        self.stage_offsets[stage + 1] - self.stage_offsets[stage]
    }

    pub fn stage(&self, stage: usize) -> &[f64] {
        &self.values[self.stage_range(stage)]
    }

    pub fn stage_mut(&mut self, stage: usize) -> &mut [f64] {
        let r = self.stage_range(stage);
        &mut self.values[r]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.stage_offsets == other.stage_offsets
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

fn validate_offsets(offsets: &[usize], len: usize) -> Result<()> {
    if offsets.len() < 2 || offsets[0] != 0 || *offsets.last().unwrap() != len {
        return Err(config_err(format!(
            "stage offsets {offsets:?} must start at 0 and end at {len}"
        )));
    }
    if offsets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(config_err(format!(
            "stage offsets {offsets:?} must be strictly increasing"
        )));
    }
    Ok(())
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension { expected, got });
    }
    Ok(())
}

/// `a * x + y`.
pub fn vec_axpy(a: f64, x: &ParamVector, y: &ParamVector) -> Result<ParamVector> {
    check_len(x.len(), y.len())?;
    let values = x
        .values
        .iter()
        .zip(&y.values)
        .map(|(xv, yv)| a * xv + yv)
        .collect();
    y.with_values(values)
}

/// `x - y`.
pub fn vec_sub(x: &ParamVector, y: &ParamVector) -> Result<ParamVector> {
    check_len(x.len(), y.len())?;
    let values = x.values.iter().zip(&y.values).map(|(a, b)| a - b).collect();
    x.with_values(values)
}

/// Elementwise mean: the running sum is accumulated in slice order and then
/// divided by `m` once.
pub fn vec_mean(vs: &[ParamVector]) -> Result<ParamVector> {
    let first = vs
        .first()
        .ok_or_else(|| config_err("mean of zero vectors"))?;
    let mut acc = vec![0.0; first.len()];
    for v in vs {
        check_len(first.len(), v.len())?;
        for (a, x) in acc.iter_mut().zip(&v.values) {
            *a += x;
        }
    }
    let m = vs.len() as f64;
    for a in &mut acc {
        *a /= m;
    }
    first.with_values(acc)
}

pub fn slice_stage(v: &ParamVector, stage: usize) -> Result<&[f64]> {
    if stage >= v.num_stages() {
        return Err(config_err(format!(
            "stage {stage} out of range for {} stages",
            v.num_stages()
        )));
    }
    Ok(v.stage(stage))
}

/// Mean of the `idx`-th element across `m` replica slices, summed in replica order.
#[inline]
pub(crate) fn mean_at(values: impl Iterator<Item = f64>, m: usize) -> f64 {
    let mut s = 0.0;
    for v in values {
        s += v;
    }
    s / m as f64
}

// ---------------------------------------------------------------------------
// Random streams

/// What a random stream is used for; part of the stream derivation key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Mask = 1,
    Batch = 2,
    GradNoise = 3,
    Init = 4,
    Data = 5,
    Centers = 6,
    GridPoint = 7,
    Test = 8,
}

const fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a list of words.
pub fn hash_words(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x243f_6a88_85a3_08d3, |h, &w| splitmix(h ^ splitmix(w)))
}

/// A reproducible random stream identified by `(seed, stream_id)`.
///
/// Streams are derived, never advanced globally, so any worker can regenerate
/// the same sequence without coordination.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Rng {
    pub seed: u64,
    pub stream_id: u64,
}

impl Rng {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    /// Stream keyed by `purpose` and two coordinates (typically stage/replica and step).
    pub fn derive(seed: u64, purpose: Purpose, a: u64, b: u64) -> Self {
        Self {
            seed,
            stream_id: hash_words(&[purpose as u64, a, b]),
        }
    }

    pub fn generator(&self) -> ChaCha8Rng {
        let mut g = ChaCha8Rng::seed_from_u64(self.seed);
        g.set_stream(self.stream_id);
        g
    }
}

// ---------------------------------------------------------------------------
// Subset sampling

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    #[default]
    FixedCount,
    Bernoulli,
}

/// Sorted element indices (relative to one stage block) chosen for an averaging event.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetMask {
    pub indices: Vec<usize>,
    pub sampled_at_step: u64,
}

impl SubsetMask {
    pub fn full(block_len: usize, step: u64) -> Self {
        Self {
            indices: (0..block_len).collect(),
            sampled_at_step: step,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// True when indices are strictly increasing and below `block_len`.
    pub fn is_valid_for(&self, block_len: usize) -> bool {
        self.indices.windows(2).all(|w| w[0] < w[1])
            && self.indices.last().map_or(true, |&i| i < block_len)
    }
}

pub fn check_fraction(fraction: f64) -> Result<()> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(config_err(format!(
            "subset fraction {fraction} must lie in (0, 1]"
        )));
    }
    Ok(())
}

pub fn sample_subset(
    rng: &Rng,
    block_len: usize,
    fraction: f64,
    mode: SampleMode,
    step: u64,
) -> Result<SubsetMask> {
    check_fraction(fraction)?;
    if block_len == 0 {
        return Err(config_err("cannot sample from an empty block"));
    }
    let mut g = rng.generator();
    let indices = match mode {
        SampleMode::FixedCount => {
            let count = ((fraction * block_len as f64).round() as usize).clamp(1, block_len);
            if count == block_len {
                (0..block_len).collect()
            } else {
                let mut v = index::sample(&mut g, block_len, count).into_vec();
                v.sort_unstable();
                v
            }
        }
        SampleMode::Bernoulli => (0..block_len)
            .filter(|_| g.random::<f64>() < fraction)
            .collect(),
    };
    Ok(SubsetMask {
        indices,
        sampled_at_step: step,
    })
}

// ---------------------------------------------------------------------------
// Quantization

/// Precision used for communicated payload values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantScheme {
    #[default]
    None,
    Bf16,
    Fp8E4m3,
}

struct FloatFormat {
    mantissa_bits: i32,
    min_normal_exp: i32,
    max_finite: f64,
}

const BF16: FloatFormat = FloatFormat {
    mantissa_bits: 7,
    min_normal_exp: -126,
    // (2 - 2^-7) * 2^127
    max_finite: 3.389_531_389_251_535_5e38,
};

const E4M3: FloatFormat = FloatFormat {
    mantissa_bits: 3,
    min_normal_exp: -6,
    max_finite: 448.0,
};

impl QuantScheme {
    pub fn max_finite(self) -> f64 {
        match self {
            QuantScheme::None => f64::MAX,
            QuantScheme::Bf16 => BF16.max_finite,
            QuantScheme::Fp8E4m3 => E4M3.max_finite,
        }
    }

    pub fn quantize(self, v: f64) -> f64 {
        quantize_roundtrip(v, self)
    }
}

/// Rounds `v` to the nearest value representable in `scheme` (ties to even),
/// saturating at the largest finite magnitude.
pub fn quantize_roundtrip(v: f64, scheme: QuantScheme) -> f64 {
    let fmt = match scheme {
        QuantScheme::None => return v,
        QuantScheme::Bf16 => &BF16,
        QuantScheme::Fp8E4m3 => &E4M3,
    };
    if v.is_nan() {
        return v;
    }
    let a = v.abs();
    if a == 0.0 {
        return v;
    }
    let q = if a.is_infinite() {
        fmt.max_finite
    } else {
        let exp = binary_exponent(a).max(fmt.min_normal_exp);
        let quantum = 2f64.powi(exp - fmt.mantissa_bits);
        ((a / quantum).round_ties_even() * quantum).min(fmt.max_finite)
    };
    q.copysign(v)
}

/// `floor(log2(a))` for positive finite `a`.
fn binary_exponent(a: f64) -> i32 {
    let biased = ((a.to_bits() >> 52) & 0x7ff) as i32;
    if biased == 0 {
        // f64 subnormal: far below every simulated format's range.
        -1075
    } else {
        biased - 1023
    }
}
