//! Simulation and real-time qualification of a single-atom cavity
//! single-photon source.
//!
//! - [`clickstream`]: detector clicks, pulse schedule, time-tag formats
//! - [`qed`]: Λ-system + cavity master equation for one trigger pulse
//! - [`simulator`]: seeded generation of full experimental runs
//! - [`correlator`]: HBT cross-correlation and antibunching visibility
//! - [`qualifier`]: the qualify-then-serve state machine

// Negated float comparisons are used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clickstream;
pub mod correlator;
pub mod qed;
pub mod qualifier;
pub mod simulator;

pub use clickstream::{Channel, Click, ClickStream, Format, PulseSchedule, Window, WindowedClicks};
pub use correlator::{CorrelationHistogram, VisibilityReport};
pub use qed::{DensityState, PulseShape, QedParams, Trajectory};
pub use qualifier::{Phase, Qualifier, QualifierConfig, RunVerdict};
pub use simulator::{RunTruth, SimConfig};
