//! Consensus diagnostics and trajectory files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dp_average::EmaState;
use crate::error::{Error, Result};
use crate::numerics::ParamVector;

/// `Σ_i ‖w_i − w̄‖²`, with `w̄` the elementwise mean summed in replica order.
pub fn consensus_error(replicas: &[ParamVector]) -> f64 {
    let Some(first) = replicas.first() else {
        return 0.0;
    };
    let m = replicas.len();
    let mut total = 0.0;
    for k in 0..first.len() {
        let mean = crate::numerics::mean_at(replicas.iter().map(|r| r.values()[k]), m);
        for r in replicas {
            let e = r.values()[k] - mean;
            total += e * e;
        }
    }
    total
}

/// Mean and max over coordinates of the population variance of `d_i` across replicas.
pub fn ema_variance(states: &[EmaState]) -> (f64, f64) {
    let m = states.len();
    if m < 2 {
        return (0.0, 0.0);
    }
    let len = states[0].d.len();
    if len == 0 {
        return (0.0, 0.0);
    }
    let (mut sum, mut max) = (0.0f64, 0.0f64);
    for k in 0..len {
        let mean = crate::numerics::mean_at(states.iter().map(|s| s.d[k]), m);
        let var = states.iter().map(|s| (s.d[k] - mean).powi(2)).sum::<f64>() / m as f64;
        sum += var;
        max = max.max(var);
    }
    (sum / len as f64, max)
}

/// Cross-replica mean of the EMA estimates.
pub fn ema_drift(states: &[EmaState]) -> Vec<f64> {
    let m = states.len();
    let len = states.first().map_or(0, |s| s.d.len());
    (0..len)
        .map(|k| crate::numerics::mean_at(states.iter().map(|s| s.d[k]), m))
        .collect()
}

/// One evaluation point of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Global ticks completed.
    pub step: u64,
    pub replica_losses: Vec<f64>,
    pub consensus_loss: f64,
    pub consensus_error: f64,
    pub ema_var_mean: f64,
    pub ema_var_max: f64,
    pub diverged: bool,
    pub inflight: usize,
    pub consensus_error_per_coord: f64,
    /// Norm of the cross-replica mean EMA estimate.
    pub drift_norm: f64,
    /// Norm of its change since the previous record.
    pub drift_delta_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryFormat {
    Csv,
    Jsonl,
}

impl TrajectoryFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "csv" => Some(Self::Csv),
            "jsonl" => Some(Self::Jsonl),
            _ => None,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Self::Csv => "csv",
            Self::Jsonl => "jsonl",
        }
    }
}

const TAIL: [&str; 9] = [
    "consensus_loss",
    "consensus_error",
    "ema_var_mean",
    "ema_var_max",
    "diverged",
    "inflight",
    "consensus_error_per_coord",
    "drift_norm",
    "drift_delta_norm",
];

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn fmt_f64(v: f64) -> String {
    // 17 significant digits survive the round trip exactly
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

/// Writes `records` as CSV or JSON Lines.
pub fn write_trajectory(records: &[MetricsRecord], path: &Path, format: TrajectoryFormat) -> Result<()> {
    let Some(first) = records.first() else {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "no records to write".into(),
        });
    };
    let file = File::create(path).map_err(io_err(path))?;
    match format {
        TrajectoryFormat::Csv => {
            let mut w = csv::Writer::from_writer(BufWriter::new(file));
            let mut header = vec!["step".to_string()];
            header.extend((0..first.replica_losses.len()).map(|i| format!("loss_{i}")));
            header.extend(TAIL.iter().map(|s| s.to_string()));
            w.write_record(&header).map_err(|e| csv_err(path, e))?;
            for r in records {
                let mut row = vec![r.step.to_string()];
                row.extend(r.replica_losses.iter().map(|&v| fmt_f64(v)));
                row.extend([
                    fmt_f64(r.consensus_loss),
                    fmt_f64(r.consensus_error),
                    fmt_f64(r.ema_var_mean),
                    fmt_f64(r.ema_var_max),
                    r.diverged.to_string(),
                    r.inflight.to_string(),
                    fmt_f64(r.consensus_error_per_coord),
                    fmt_f64(r.drift_norm),
                    fmt_f64(r.drift_delta_norm),
                ]);
                w.write_record(&row).map_err(|e| csv_err(path, e))?;
            }
            w.flush().map_err(io_err(path))?;
        }
        TrajectoryFormat::Jsonl => {
            let mut w = BufWriter::new(file);
            for r in records {
                let line = serde_json::to_string(&JsonRecord::from(r)).map_err(|e| Error::Format {
                    path: path.to_path_buf(),
                    message: e.to_string(),
                })?;
                writeln!(w, "{line}").map_err(io_err(path))?;
            }
            w.flush().map_err(io_err(path))?;
        }
    }
    Ok(())
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        other => Error::Format {
            path: path.to_path_buf(),
            message: format!("{other:?}"),
        },
    }
}

/// Reads a trajectory written by [`write_trajectory`]; the format follows the extension
/// unless given.
pub fn read_trajectory(path: &Path, format: Option<TrajectoryFormat>) -> Result<Vec<MetricsRecord>> {
    let format = format
        .or_else(|| TrajectoryFormat::from_path(path))
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            message: "unknown trajectory extension (expected .csv or .jsonl)".into(),
        })?;
    let file = File::open(path).map_err(io_err(path))?;
    let bad = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    match format {
        TrajectoryFormat::Csv => {
            let mut rd = csv::Reader::from_reader(BufReader::new(file));
            let header = rd.headers().map_err(|e| csv_err(path, e))?.clone();
            let n = header.len();
            if n < 1 + TAIL.len() || header.get(0) != Some("step") {
                return Err(bad("unexpected CSV header".into()));
            }
            let m = n - 1 - TAIL.len();
            for (i, name) in TAIL.iter().enumerate() {
                if header.get(1 + m + i) != Some(*name) {
                    return Err(bad(format!("expected column {name}")));
                }
            }
            let mut out = Vec::new();
            for row in rd.records() {
                let row = row.map_err(|e| csv_err(path, e))?;
                let f = |i: usize| -> Result<f64> {
                    row.get(i)
                        .and_then(|s| s.parse::<f64>().ok())
                        .ok_or_else(|| bad(format!("bad number in column {i}")))
                };
                let t = 1 + m;
                out.push(MetricsRecord {
                    step: row
                        .get(0)
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| bad("bad step".into()))?,
                    replica_losses: (1..=m).map(f).collect::<Result<_>>()?,
                    consensus_loss: f(t)?,
                    consensus_error: f(t + 1)?,
                    ema_var_mean: f(t + 2)?,
                    ema_var_max: f(t + 3)?,
                    diverged: row
                        .get(t + 4)
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| bad("bad diverged flag".into()))?,
                    inflight: row
                        .get(t + 5)
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| bad("bad inflight count".into()))?,
                    consensus_error_per_coord: f(t + 6)?,
                    drift_norm: f(t + 7)?,
                    drift_delta_norm: f(t + 8)?,
                });
            }
            Ok(out)
        }
        TrajectoryFormat::Jsonl => {
            let mut out = Vec::new();
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(io_err(path))?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: JsonRecord =
                    serde_json::from_str(&line).map_err(|e| bad(format!("line {}: {e}", i + 1)))?;
                out.push(rec.into_record().map_err(|e| bad(format!("line {}: {e}", i + 1)))?);
            }
            Ok(out)
        }
    }
}

/// JSON has no NaN/Inf; those are carried as strings.
#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum JsonNum {
    Num(f64),
    Text(String),
}

impl JsonNum {
    fn from_f64(v: f64) -> Self {
        if v.is_finite() {
            JsonNum::Num(v)
        } else {
            JsonNum::Text(v.to_string())
        }
    }

    fn to_f64(&self) -> std::result::Result<f64, String> {
        match self {
            JsonNum::Num(v) => Ok(*v),
            JsonNum::Text(s) => s.parse().map_err(|_| format!("not a number: {s}")),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct JsonRecord {
    step: u64,
    replica_losses: Vec<JsonNum>,
    consensus_loss: JsonNum,
    consensus_error: JsonNum,
    ema_var_mean: JsonNum,
    ema_var_max: JsonNum,
    diverged: bool,
    inflight: usize,
    consensus_error_per_coord: JsonNum,
    drift_norm: JsonNum,
    drift_delta_norm: JsonNum,
}

impl From<&MetricsRecord> for JsonRecord {
    fn from(r: &MetricsRecord) -> Self {
        let n = JsonNum::from_f64;
        Self {
            step: r.step,
            replica_losses: r.replica_losses.iter().map(|&v| n(v)).collect(),
            consensus_loss: n(r.consensus_loss),
            consensus_error: n(r.consensus_error),
            ema_var_mean: n(r.ema_var_mean),
            ema_var_max: n(r.ema_var_max),
            diverged: r.diverged,
            inflight: r.inflight,
            consensus_error_per_coord: n(r.consensus_error_per_coord),
            drift_norm: n(r.drift_norm),
            drift_delta_norm: n(r.drift_delta_norm),
        }
    }
}

impl JsonRecord {
    fn into_record(self) -> std::result::Result<MetricsRecord, String> {
        Ok(MetricsRecord {
            step: self.step,
            replica_losses: self
                .replica_losses
                .iter()
                .map(JsonNum::to_f64)
                .collect::<std::result::Result<_, _>>()?,
            consensus_loss: self.consensus_loss.to_f64()?,
            consensus_error: self.consensus_error.to_f64()?,
            ema_var_mean: self.ema_var_mean.to_f64()?,
            ema_var_max: self.ema_var_max.to_f64()?,
            diverged: self.diverged,
            inflight: self.inflight,
            consensus_error_per_coord: self.consensus_error_per_coord.to_f64()?,
            drift_norm: self.drift_norm.to_f64()?,
            drift_delta_norm: self.drift_delta_norm.to_f64()?,
        })
    }
}
