//! Simulator of mobile CPU/GPU/memory frequency governors during on-device LLM
//! inference, with brute-force profiling and a two-step energy-aware frequency search.

pub mod calibration;
pub mod error;
pub mod freq;
pub mod fuse;
pub mod governors;
pub mod metrics;
pub mod model;
pub mod profiler;
pub mod replay;
pub mod sim;

pub use calibration::Calibration;
pub use error::{Error, Result};
pub use freq::{Component, FreqConfig, FrequencyTable, Mhz, OperatingPoint, Setting};
pub use model::{PhaseKind, PhaseSpec};
