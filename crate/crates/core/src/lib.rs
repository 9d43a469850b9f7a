//! Profiler for llama.cpp/GGML-style LLM inference traces.
//!
//! The pipeline is: a [`TraceSession`](event::TraceSession) (recorded by the
//! tracer or produced by [`synth`]) goes through [`ingest`], then into one of
//! the three views: [`profdag`], [`proftime`] or [`profstat`].

pub mod cli;
pub mod event;
pub mod ingest;
pub mod profdag;
pub mod profstat;
pub mod proftime;
pub mod synth;
pub mod tracer;
pub mod wire;
