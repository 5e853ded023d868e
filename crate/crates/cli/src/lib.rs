//! Declarative experiment runner: a TOML spec describes one mesh configuration
//! plus an optional grid of overrides, and every grid point becomes one
//! simulator run with its own trajectory file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use meshsim_core::{read_trajectory, run, write_trajectory, MeshConfig, MetricsRecord, TrajectoryFormat};

pub const OUTPUT_DIR_ENV: &str = "MESHSIM_OUTPUT_DIR";
pub const DEFAULT_OUTPUT_DIR: &str = "runs";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] meshsim_core::Error),
}

impl CliError {
    /// 1 for usage and configuration problems, 2 for file-system problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Io { .. } => 2,
            CliError::Core(e) => match e {
                meshsim_core::Error::Io { .. } | meshsim_core::Error::Format { .. } => 2,
                _ => 1,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn config(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// One swept field and the values it takes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    /// Dotted path into the mesh table, e.g. `averaging.subset_fraction`.
    pub path: String,
    pub values: Vec<toml::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Seed shared by every grid point, so points form paired comparisons.
    /// Sweep over `seed` for replicates.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_format")]
    pub format: TrajectoryFormat,
    #[serde(default)]
    pub mesh: toml::Table,
    #[serde(default)]
    pub sweep: Vec<SweepAxis>,
}

fn default_format() -> TrajectoryFormat {
    TrajectoryFormat::Csv
}

impl ExperimentSpec {
    pub fn parse(text: &str) -> CliResult<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| config(format!("invalid spec: {e}")))?;
        if spec.name.is_empty()
            || spec
                .name
                .chars()
                .any(|c| !(c.is_ascii_alphanumeric() || c == '-' || c == '_'))
        {
            return Err(config("name: use letters, digits, '-' and '_' only"));
        }
        for axis in &spec.sweep {
            if axis.values.is_empty() {
                return Err(config(format!("sweep {}: no values", axis.path)));
            }
        }
        Ok(spec)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Applies a `path=value` override to the base mesh table.
    pub fn apply_override(&mut self, assignment: &str) -> CliResult<()> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| config(format!("override `{assignment}` is not of the form path=value")))?;
        let value = parse_value(raw.trim());
        set_path(&mut self.mesh, path.trim(), value)
    }

    pub fn grid_size(&self) -> usize {
        self.sweep.iter().map(|a| a.values.len()).product()
    }

    /// Every grid point in row-major order (the last axis varies fastest).
    pub fn grid(&self) -> CliResult<Vec<GridPoint>> {
        let n = self.grid_size();
        let mut out = Vec::with_capacity(n);
        for index in 0..n {
            let mut table = self.mesh.clone();
            let seed = i64::try_from(self.seed).map_err(|_| config("seed: must be below 2^63"))?;
            table.insert("seed".into(), toml::Value::Integer(seed));
            let mut rest = index;
            let mut overrides = BTreeMap::new();
            let mut picks = vec![0; self.sweep.len()];
            for (a, axis) in self.sweep.iter().enumerate().rev() {
                picks[a] = rest % axis.values.len();
                rest /= axis.values.len();
            }
            for (axis, &pick) in self.sweep.iter().zip(&picks) {
                let v = axis.values[pick].clone();
                set_path(&mut table, &axis.path, v.clone())?;
                overrides.insert(axis.path.clone(), v.to_string());
            }
            let mesh: MeshConfig = toml::Value::Table(table)
                .try_into()
                .map_err(|e| config(format!("grid point {index}{}: {e}", describe(&overrides))))?;
            mesh.validate()
                .map_err(|e| config(format!("grid point {index}{}: {e}", describe(&overrides))))?;
            out.push(GridPoint {
                index,
                overrides,
                config_hash: config_hash(&mesh),
                mesh,
            });
        }
        Ok(out)
    }
}

fn describe(overrides: &BTreeMap<String, String>) -> String {
    if overrides.is_empty() {
        return String::new();
    }
    let parts: Vec<String> = overrides.iter().map(|(k, v)| format!("{k}={v}")).collect();
    format!(" ({})", parts.join(", "))
}

/// Parses a command-line value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

const TOP_LEVEL: [&str; 14] = [
    "num_stages",
    "num_replicas",
    "total_steps",
    "seed",
    "model",
    "optimizer",
    "lr",
    "ema",
    "averaging",
    "delays",
    "speeds",
    "budget",
    "eval_every",
    "clip_norm",
];

/// Sets a dotted path in `table`, creating intermediate tables. The first
/// segment must name a mesh field; deeper typos surface when the table is
/// deserialized.
fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> CliResult<()> {
    let path = path.strip_prefix("mesh.").unwrap_or(path);
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) || !TOP_LEVEL.contains(&keys[0]) {
        return Err(config(format!("unknown field path `{path}`")));
    }
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config(format!("field path `{path}`: `{k}` is not a table")))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// SHA-256 of the resolved configuration's canonical JSON.
pub fn config_hash(mesh: &MeshConfig) -> String {
    let json = serde_json::to_string(mesh).expect("mesh configs always serialize");
    hex::encode(Sha256::digest(json.as_bytes()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridPoint {
    pub index: usize,
    pub overrides: BTreeMap<String, String>,
    pub mesh: MeshConfig,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    pub index: usize,
    pub overrides: String,
    pub seed: u64,
    pub final_step: u64,
    pub final_consensus_loss: f64,
    pub final_consensus_error: f64,
    pub diverged: bool,
    pub config_hash: String,
    pub trajectory: String,
}

/// Output directory with precedence flag/env (resolved by the caller) > spec > default.
pub fn resolve_output_dir(cli: Option<PathBuf>, spec: &ExperimentSpec) -> PathBuf {
    cli.or_else(|| spec.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Runs every grid point and writes `<out>/<name>/point_<k>.<ext>` plus `summary.csv`.
pub fn run_experiment(spec: &ExperimentSpec, out_root: &Path) -> CliResult<Vec<PointSummary>> {
    let points = spec.grid()?;
    let dir = out_root.join(&spec.name);
    fs::create_dir_all(&dir).map_err(io(&dir))?;
    let results: Vec<CliResult<PointSummary>> = points
        .par_iter()
        .map(|p| {
            let result = run(&p.mesh)?;
            let file = format!("point_{:03}.{}", p.index, spec.format.extension());
            write_trajectory(&result.records, &dir.join(&file), spec.format)?;
            let last = result.last();
            Ok(PointSummary {
                index: p.index,
                overrides: describe(&p.overrides),
                seed: p.mesh.seed,
                final_step: last.step,
                final_consensus_loss: last.consensus_loss,
                final_consensus_error: last.consensus_error,
                diverged: last.diverged,
                config_hash: p.config_hash.clone(),
                trajectory: file,
            })
        })
        .collect();
    let summaries = results.into_iter().collect::<CliResult<Vec<_>>>()?;
    let path = dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    for s in &summaries {
        w.serialize(CsvSummary::from(s)).map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(io(&path))?;
    Ok(summaries)
}

/// Same as [`PointSummary`] with floats spelled to round-trip exactly.
#[derive(Serialize)]
struct CsvSummary<'a> {
    index: usize,
    overrides: &'a str,
    seed: u64,
    final_step: u64,
    final_consensus_loss: String,
    final_consensus_error: String,
    diverged: bool,
    config_hash: &'a str,
    trajectory: &'a str,
}

impl<'a> From<&'a PointSummary> for CsvSummary<'a> {
    fn from(s: &'a PointSummary) -> Self {
        Self {
            index: s.index,
            overrides: &s.overrides,
            seed: s.seed,
            final_step: s.final_step,
            final_consensus_loss: format!("{:.16e}", s.final_consensus_loss),
            final_consensus_error: format!("{:.16e}", s.final_consensus_error),
            diverged: s.diverged,
            config_hash: &s.config_hash,
            trajectory: &s.trajectory,
        }
    }
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => CliError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => config(format!("{}: {other:?}", path.display())),
    }
}

/// Per-step differences `b − a` between two trajectories on the same eval grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GapRow {
    pub step: u64,
    pub loss_a: f64,
    pub loss_b: f64,
    pub loss_gap: f64,
    pub relative_loss_gap: f64,
    pub error_gap: f64,
}

pub fn compare(a: &[MetricsRecord], b: &[MetricsRecord]) -> CliResult<Vec<GapRow>> {
    let sa: Vec<u64> = a.iter().map(|r| r.step).collect();
    let sb: Vec<u64> = b.iter().map(|r| r.step).collect();
    if sa != sb {
        return Err(config(format!(
            "trajectories use different eval grids ({} vs {} records)",
            sa.len(),
            sb.len()
        )));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| {
            let gap = y.consensus_loss - x.consensus_loss;
            GapRow {
                step: x.step,
                loss_a: x.consensus_loss,
                loss_b: y.consensus_loss,
                loss_gap: gap,
                relative_loss_gap: if x.consensus_loss == 0.0 { if gap == 0.0 { 0.0 } else { f64::INFINITY } } else { gap / x.consensus_loss.abs() },
                error_gap: y.consensus_error - x.consensus_error,
            }
        })
        .collect())
}

pub fn compare_files(a: &Path, b: &Path) -> CliResult<Vec<GapRow>> {
    compare(&read_trajectory(a, None)?, &read_trajectory(b, None)?)
}

pub fn render_gaps(rows: &[GapRow]) -> String {
    let mut s = String::from("step,consensus_loss_a,consensus_loss_b,loss_gap,relative_loss_gap,consensus_error_gap\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e}",
            r.step, r.loss_a, r.loss_b, r.loss_gap, r.relative_loss_gap, r.error_gap
        );
    }
    if let Some(last) = rows.last() {
        let _ = writeln!(
            s,
            "final step {}: loss gap {:+.6e} ({:+.3}%), consensus error gap {:+.6e}",
            last.step,
            last.loss_gap,
            100.0 * last.relative_loss_gap,
            last.error_gap
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const SPEC: &str = r#"
        name = "tiny"
        seed = 3
        [mesh]
        num_replicas = 2
        total_steps = 20
        eval_every = 5
        [mesh.model]
        kind = "quadratic"
        dim = 6
        [[sweep]]
        path = "averaging.strategy"
        values = ["sparta", "ema_corrected"]
        [[sweep]]
        path = "averaging.subset_fraction"
        values = [0.1, 0.5, 1.0]
    "#;

    #[test]
    fn grid_is_row_major_with_shared_seed() {
        let spec = ExperimentSpec::parse(SPEC).unwrap();
        assert_eq!(spec.grid_size(), 6);
        let g = spec.grid().unwrap();
        assert_eq!(g[1].mesh.averaging.subset_fraction, 0.5);
        assert_eq!(g[3].mesh.averaging.strategy, meshsim_core::Strategy::EmaCorrected);
        assert!(g.iter().all(|p| p.mesh.seed == 3));
        assert_eq!(g, spec.grid().unwrap());
    }

    #[test]
    fn seed_axis_gives_replicates() {
        let mut spec = ExperimentSpec::parse(SPEC).unwrap();
        spec.sweep.push(SweepAxis {
            path: "seed".into(),
            values: vec![toml::Value::Integer(10), toml::Value::Integer(11)],
        });
        let g = spec.grid().unwrap();
        assert_eq!(g.len(), 12);
        assert_eq!((g[0].mesh.seed, g[1].mesh.seed), (10, 11));
        assert_ne!(g[0].config_hash, g[1].config_hash);
    }

    #[test]
    fn empty_sweep_is_a_single_point() {
        let spec = ExperimentSpec::parse("name = \"one\"\n[mesh]\ntotal_steps = 5").unwrap();
        assert_eq!(spec.grid().unwrap().len(), 1);
    }

    #[test]
    fn bad_paths_are_named() {
        let mut spec = ExperimentSpec::parse(SPEC).unwrap();
        spec.sweep[0].path = "averaging.strategyy".into();
        let e = spec.grid().unwrap_err().to_string();
        assert!(e.contains("strategyy"), "{e}");
        let mut spec = ExperimentSpec::parse(SPEC).unwrap();
        let e = spec.apply_override("nonsense.x=1").unwrap_err().to_string();
        assert!(e.contains("nonsense.x"), "{e}");
    }

    #[test]
    fn overrides_parse_toml_values() {
        let mut spec = ExperimentSpec::parse(SPEC).unwrap();
        spec.apply_override("total_steps=7").unwrap();
        spec.apply_override("averaging.quant=fp8_e4m3").unwrap();
        let g = spec.grid().unwrap();
        assert_eq!(g[0].mesh.total_steps, 7);
        assert_eq!(g[0].mesh.averaging.quant, meshsim_core::QuantScheme::Fp8E4m3);
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = MeshConfig::default();
        let mut b = a.clone();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.total_steps += 1;
        assert_ne!(config_hash(&a), config_hash(&b));
    }

    #[test]
    fn compare_rejects_different_grids_and_zeroes_on_self() {
        let spec = ExperimentSpec::parse("name = \"one\"\n[mesh]\ntotal_steps = 20\neval_every = 5").unwrap();
        let r = run(&spec.grid().unwrap()[0].mesh).unwrap().records;
        let gaps = compare(&r, &r).unwrap();
        assert!(gaps.iter().all(|g| g.loss_gap == 0.0 && g.error_gap == 0.0 && g.relative_loss_gap == 0.0));
        assert!(compare(&r, &r[..2]).is_err());
    }
}
