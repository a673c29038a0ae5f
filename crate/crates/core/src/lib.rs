//! Symbolic tracing, deduplicated profiling and regression-backed serving
//! simulation for transformer inference.

pub mod corpus;
pub mod modelir;
pub mod num;
pub mod opset;
pub mod profiler;
pub mod sim;
pub mod taint;
pub mod tracer;

pub use modelir::{BackendSpec, CorpusManifest, HardwareSpec, ModelConfig, Phase, Request, SweepGrid};
pub use taint::{Taint, TaintLabel, TaintRegistry, TaintedValue};
pub use tracer::{run_trace, DummyBatch, TaintedTrace, TraceOptions};

/// `f64` instantiations of the generic numeric routines.
pub type Regressor = sim::Regressor<f64>;
pub type Regressors = sim::Regressors<f64>;
pub type Prediction = sim::Prediction<f64>;
