//! The `profinfer` command line.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::event::{read_session, validate_session, write_session_binary, write_session_jsonl, TraceSession};
use crate::ingest::ingest;
use crate::profdag::{build_profdag, export_dot, export_json, DagError};
use crate::profstat::{self, StatError};
use crate::proftime::{build_timeline, emit_chrome_trace, SchedSemantics};
use crate::synth::{self, RunSpec};
use crate::tracer::{Consumer, RecordingControlMap, TracerConfig};
use crate::wire::WireStream;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments or unreadable input: exit code 2.
    #[error("{0}")]
    Usage(String),
    /// The input was read but could not be analyzed: exit code 1.
    #[error("{0}")]
    Analysis(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Analysis(_) => 1,
        }
    }
}

fn analysis(e: impl std::fmt::Display) -> CliError {
    CliError::Analysis(e.to_string())
}

fn write_err(path: &Path) -> impl Fn(io::Error) -> CliError + '_ {
    move |e| CliError::Analysis(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "profinfer", version, about = "Trace and analyze LLM inference on edge CPUs")]
struct Cli {
    /// Tracer/analysis config (TOML). Falls back to $PROFINFER_CONFIG.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum View {
    Tokens,
    Ops,
    Experts,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Decode a recorded kernel-buffer stream into a session.
    Trace {
        /// Recorded stream, or "-" for stdin. Live attachment is not built in.
        #[arg(long)]
        wire: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Write the binary session format instead of JSON Lines.
        #[arg(long)]
        binary: bool,
    },
    /// Generate a synthetic session.
    Synth {
        /// Preset name (dense2, qwen2, gemma2, moe60) or a workload TOML file.
        #[arg(long)]
        model: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        prompt: Option<u32>,
        /// Decode iterations.
        #[arg(long)]
        gen: Option<u32>,
        #[arg(long)]
        threads: Option<u32>,
        #[arg(long)]
        drop_rate: Option<f64>,
        #[arg(long)]
        binary: bool,
        /// Also write the session as a kernel-buffer stream.
        #[arg(long)]
        wire: Option<PathBuf>,
        /// Also write the ground truth as JSON.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Rebuild the operator graph of one iteration.
    Dag {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        iter: usize,
        #[arg(long, default_value = "elapsed")]
        metric: String,
        #[arg(long, default_value_t = 9)]
        palette: usize,
        /// DOT output; the JSON document goes next to it with a .json extension.
        #[arg(long, default_value = "dag.dot")]
        out: PathBuf,
    },
    /// Export the per-thread timeline as Chrome trace JSON.
    Timeline {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "timeline.json")]
        out: PathBuf,
        /// How switch-out prev_state maps to a state: compat (1 is runnable) or kernel (0 is runnable)
        #[arg(long)]
        sched_semantics: Option<SchedSemantics>,
    },
    /// Write statistics tables and plot data.
    Stats {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum)]
        view: View,
        /// Comma-separated op-name patterns for the tokens view.
        #[arg(long, value_delimiter = ',')]
        patterns: Option<Vec<String>>,
        /// Gated op for the experts view.
        #[arg(long)]
        op: Option<String>,
        /// Restrict the ops view to one iteration.
        #[arg(long)]
        iter: Option<usize>,
        /// Output directory.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Check a session against the trace model and print violations.
    Validate {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("profinfer: {e}");
            e.exit_code()
        }
    }
}

fn load(path: &Path) -> Result<TraceSession, CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!("input file {} does not exist", path.display())));
    }
    read_session(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(write_err(dir))?;
    }
    File::create(path).map(BufWriter::new).map_err(write_err(path))
}

fn save(session: &TraceSession, path: &Path, binary: bool) -> Result<(), CliError> {
    let out = create(path)?;
    if binary { write_session_binary(session, out) } else { write_session_jsonl(session, out) }.map_err(analysis)
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value).map_err(analysis)?;
    out.write_all(b"\n").and_then(|_| out.flush()).map_err(write_err(path))
}

fn config(cli_path: Option<&Path>) -> Result<TracerConfig, CliError> {
    TracerConfig::resolve(cli_path).map_err(|e| CliError::Usage(e.to_string()))
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let config_path = cli.config.as_deref();
    match cli.command {
        Command::Trace { wire, out, binary } => {
            let config = config(config_path)?;
            let Some(wire) = wire else {
                return Err(CliError::Usage(
                    "live attachment is not available in this build; record the kernel stream and pass --wire".into(),
                ));
            };
            let header = config.session_header(BTreeSet::new()).map_err(|e| CliError::Usage(e.to_string()))?;
            let mut consumer = Consumer::new(header);
            if config.qos.enabled {
                consumer = consumer.with_qos(config.qos_controller());
            }
            let mut control = RecordingControlMap::default();
            if wire.as_os_str() == "-" {
                let mut stream = WireStream::new(io::stdin().lock()).map_err(analysis)?;
                consumer.poll_and_decode(&mut stream, &mut control).map_err(analysis)?;
            } else {
                if !wire.exists() {
                    return Err(CliError::Usage(format!("input file {} does not exist", wire.display())));
                }
                let file = File::open(&wire).map_err(|e| CliError::Usage(format!("{}: {e}", wire.display())))?;
                let mut stream = WireStream::new(io::BufReader::new(file)).map_err(analysis)?;
                consumer.poll_and_decode(&mut stream, &mut control).map_err(analysis)?;
            }
            for d in consumer.decisions() {
                eprintln!("qos: mask {:?} after {:?}", d.mask, d.toggled);
            }
            let mut session = consumer.finish();
            if session.header.inference_tids.is_empty() {
                session.header.inference_tids =
                    session.events.iter().filter(|e| !e.kind.is_sched()).map(|e| e.tid).collect();
                session.header.nthreads = session.header.inference_tids.len().max(1) as u32;
            }
            save(&session, &out, binary)?;
            println!("{} events, {} lost", session.events.len(), session.header.dropped_events);
            Ok(())
        }
        Command::Synth { model, out, seed, prompt, gen, threads, drop_rate, binary, wire, truth } => {
            let (model, run) = synth::resolve_workload(&model).map_err(|e| CliError::Usage(e.to_string()))?;
            let mut run = run.unwrap_or_default();
            run.seed = seed.unwrap_or(run.seed);
            run.prompt_len = prompt.unwrap_or(run.prompt_len);
            run.gen_len = gen.unwrap_or(run.gen_len);
            run.nthreads = threads.unwrap_or(run.nthreads);
            run.drop_rate = drop_rate.unwrap_or(run.drop_rate);
            let generated = generate(&model, &run)?;
            save(&generated.session, &out, binary)?;
            if let Some(path) = wire {
                let w = create(&path)?;
                synth::write_wire(&generated.session, w).map_err(analysis)?;
            }
            if let Some(path) = truth {
                write_json(&generated.truth, &path)?;
            }
            println!("{} events, {} iterations", generated.session.events.len(), generated.truth.token_ns.len());
            Ok(())
        }
        Command::Dag { input, iter, metric, palette, out } => {
            let session = load(&input)?;
            let ing = ingest(&session).map_err(analysis)?;
            let dag = build_profdag(&ing, iter).map_err(dag_error)?;
            let dot = export_dot(&dag, &metric, palette).map_err(dag_error)?;
            let doc = export_json(&dag, &metric, palette).map_err(dag_error)?;
            let mut w = create(&out)?;
            w.write_all(dot.as_bytes()).and_then(|_| w.flush()).map_err(write_err(&out))?;
            write_json(&doc, &out.with_extension("json"))?;
            for warning in &dag.warnings {
                eprintln!("warning: {warning}");
            }
            Ok(())
        }
        Command::Timeline { input, out, sched_semantics } => {
            let semantics = match sched_semantics {
                Some(s) => s,
                None => config(config_path)?.analysis.sched_semantics,
            };
            let session = load(&input)?;
            let ing = ingest(&session).map_err(analysis)?;
            let doc = build_timeline(&ing, semantics);
            let mut w = create(&out)?;
            w.write_all(&emit_chrome_trace(&doc)).and_then(|_| w.flush()).map_err(write_err(&out))?;
            for a in &doc.anomalies {
                eprintln!("anomaly: {a}");
            }
            Ok(())
        }
        Command::Stats { input, view, patterns, op, iter, out } => {
            let session = load(&input)?;
            let ing = ingest(&session).map_err(analysis)?;
            match view {
                View::Tokens => {
                    let patterns = match patterns {
                        Some(p) => p,
                        None => config(config_path)?.analysis.patterns,
                    };
                    let series = profstat::token_series(&ing, &patterns);
                    csv_out(&out.join("tokens.csv"), |w| profstat::write_tokens_csv(&series, w))?;
                    write_json(&profstat::tokens_plot(&series), &out.join("tokens.plot.json"))
                }
                View::Ops => {
                    let iterations: Vec<usize> = match iter {
                        Some(i) if i >= ing.iterations.len() => {
                            return Err(dag_error(DagError::UnknownIteration {
                                requested: i,
                                available: ing.iterations.len(),
                            }))
                        }
                        Some(i) => vec![i],
                        None => (0..ing.iterations.len()).collect(),
                    };
                    let ops: Vec<_> = iterations.iter().map(|i| (*i, profstat::iteration_ops(&ing, *i))).collect();
                    let specs = &ing.header.pmc_specs;
                    csv_out(&out.join("ops.csv"), |w| profstat::write_ops_csv(&ops, specs, w))?;
                    let samples = profstat::matmul_samples(&ing, iter);
                    csv_out(&out.join("matmuls.csv"), |w| profstat::write_matmuls_csv(&samples, w))?;
                    write_json(&profstat::matmul_plot(&samples), &out.join("matmuls.plot.json"))
                }
                View::Experts => {
                    let name = match op {
                        Some(op) => op,
                        None => profstat::gated_ops(&ing).into_iter().next().ok_or_else(|| {
                            analysis(StatError::OpNotFound { requested: "(any)".into(), available: Vec::new() })
                        })?,
                    };
                    let m = profstat::expert_analysis(&ing, &name).map_err(analysis)?;
                    csv_out(&out.join("experts.csv"), |w| profstat::write_experts_csv(&m, w))?;
                    csv_out(&out.join("expert_density.csv"), |w| profstat::write_expert_density_csv(&m, w))?;
                    write_json(&profstat::experts_plot(&m), &out.join("experts.plot.json"))
                }
            }
        }
        Command::Validate { input } => {
            let session = load(&input)?;
            let violations = validate_session(&session);
            for v in &violations {
                println!("{v}");
            }
            let gaps = session.seq_gaps();
            if !gaps.is_empty() {
                println!("{} seqs missing (lost in transport)", gaps.len());
            }
            if violations.is_empty() {
                println!("ok: {} events", session.events.len());
                Ok(())
            } else {
                Err(CliError::Analysis(format!("{} violations", violations.len())))
            }
        }
    }
}

fn generate(model: &synth::ModelSpec, run: &RunSpec) -> Result<synth::Generated, CliError> {
    synth::generate(model, run).map_err(|e| CliError::Usage(e.to_string()))
}

fn dag_error(e: DagError) -> CliError {
    CliError::Analysis(e.to_string())
}

fn csv_out<F>(path: &Path, write: F) -> Result<(), CliError>
where
    F: FnOnce(BufWriter<File>) -> csv::Result<()>,
{
    write(create(path)?).map_err(analysis)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["profinfer"]), 2);
        assert_eq!(run(["profinfer", "dag", "--in", "x.jsonl"]), 2);
        assert_eq!(run(["profinfer", "dag", "--in", "/nonexistent/x.jsonl", "--iter", "0"]), 2);
        assert_eq!(run(["profinfer", "stats", "--in", "x", "--view", "bogus"]), 2);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(run(["profinfer", "--help"]), 0);
    }

    #[test]
    fn trace_without_stream_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("s.jsonl");
        assert_eq!(run(["profinfer", "trace", "--out", out.to_str().unwrap()]), 2);
    }
}
