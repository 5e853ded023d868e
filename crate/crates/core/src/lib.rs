//! Deterministic simulation of asynchronous pipeline-parallel × data-parallel
//! training, with EMA-corrected delayed sparse parameter averaging and the
//! synchronous and asynchronous baselines it is compared against.

pub mod dp_average;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod oracle;
pub mod pipeline;
pub mod simulator;

pub use dp_average::{AveragingConfig, DiffScale, EmaState, PendingAverage, Strategy};
pub use error::{Error, Result};
pub use metrics::{read_trajectory, write_trajectory, MetricsRecord, TrajectoryFormat};
pub use model::{Model, ModelConfig};
pub use numerics::{ParamVector, QuantScheme, SampleMode};
pub use optim::{EmaSchedule, LrSchedule, OptimizerConfig, OptimizerKind};
pub use pipeline::DelayMode;
pub use simulator::{run, MeshConfig, RunResult, Simulation};
