//! Command-line driver: trace, resolve, profile, simulate and report.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use dooly_core::modelir::{load_manifest, sample_workload, ConfigError, WorkloadSpec};
use dooly_core::opset::find_opset;
use dooly_core::profiler::db::SCHEMA_SQL;
use dooly_core::profiler::{
    manifest_grid, profile_config, report_from_db, DbError, LatencyDb, ProfileError, ProfileReport,
};
use dooly_core::sim::metrics::{cdf, percentile_errors, svg_lines};
use dooly_core::sim::{fit_graph, reference_run, run, sched_config, schedule_agreement, CallGraph, RunResult, SimError};
use dooly_core::tracer::{chrome, run_trace, DummyBatch, TraceOptions};
use dooly_core::{BackendSpec, CorpusManifest, ModelConfig};

pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Parser)]
#[command(name = "dooly", version, about = "Taint-driven operator profiling and serving simulation")]
pub struct Cli {
    /// Corpus manifest (JSON).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Latency database file.
    #[arg(long, global = true, env = "DOOLY_DB")]
    pub db: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, global = true, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Comma-separated token counts replacing the manifest grid.
    #[arg(long = "grid.num-toks", global = true, value_delimiter = ',')]
    pub grid_num_toks: Option<Vec<u64>>,
    /// Comma-separated request counts replacing the manifest grid.
    #[arg(long = "grid.num-reqs", global = true, value_delimiter = ',')]
    pub grid_num_reqs: Option<Vec<u64>>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Print the latency database schema and exit.
    #[arg(long)]
    pub schema_dump: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Args)]
pub struct Target {
    #[arg(long)]
    pub model: String,
    #[arg(long)]
    pub backend: String,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Trace one model/backend pair to Chrome-trace JSON.
    Trace {
        #[command(flatten)]
        target: Target,
        /// Dummy batch as REQS,TOKENS_PER_REQ; collision-free by default.
        #[arg(long, value_delimiter = ',', num_args = 2)]
        batch: Option<Vec<u64>>,
    },
    /// Resolve the runnable set of one model/backend pair.
    Resolve {
        #[command(flatten)]
        target: Target,
    },
    /// Trace, dedup and sweep every model/backend pair of the manifest.
    Profile {
        /// Keep every n-th grid point on each axis.
        #[arg(long, default_value_t = 1)]
        thin: usize,
    },
    /// Simulate a workload with the fitted regressors.
    Simulate {
        #[command(flatten)]
        target: Target,
        /// Workload spec (JSON).
        #[arg(long)]
        workload: PathBuf,
        /// Also run the oracle reference and print MAPE.
        #[arg(long)]
        reference: bool,
    },
    /// Dedup savings and cumulative-unique curve from the database.
    Report,
    /// Write measurements as JSON lines.
    Export {
        #[arg(long)]
        file: PathBuf,
    },
    /// Load JSON-lines measurements; each line keeps its own source.
    Import {
        #[arg(long)]
        file: PathBuf,
    },
}

/// A failed command with its exit code.
#[derive(Debug)]
pub enum Failure {
    /// Exit 2.
    Validation(String),
    /// Exit 3.
    MissingData(String),
    /// Exit 4.
    Internal(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Validation(_) => 2,
            Failure::MissingData(_) => 3,
            Failure::Internal(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Validation(m) => write!(f, "invalid input: {m}"),
            Failure::MissingData(m) => write!(f, "missing data: {m}"),
            Failure::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Validation(e.to_string())
    }
}

impl From<DbError> for Failure {
    fn from(e: DbError) -> Self {
        match e {
            DbError::BadRecord(_) | DbError::SchemaMismatch { .. } => Failure::Validation(e.to_string()),
            DbError::Integrity(_) => Failure::MissingData(format!("{e}\nmeasurements reference signatures absent from the database; profile first")),
            _ => Failure::Internal(e.to_string()),
        }
    }
}

impl From<ProfileError> for Failure {
    fn from(e: ProfileError) -> Self {
        match e {
            ProfileError::Unknown { .. } => Failure::Validation(e.to_string()),
            ProfileError::Db(d) => d.into(),
            _ => Failure::Internal(e.to_string()),
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::MissingSignatures(_) | SimError::UnknownSignature { .. } | SimError::MissingComm { .. } => {
                Failure::MissingData(format!("{e}\nrun `dooly profile --manifest <manifest> --db <db>` to measure them"))
            }
            SimError::Fit(_) => Failure::MissingData(format!("{e}\nprofile a denser grid (smaller --thin)")),
            SimError::RequestTooLarge { .. } | SimError::EmptyRequest(_) | SimError::Unsorted(_) => {
                Failure::Validation(e.to_string())
            }
            SimError::Profile(p) => p.into(),
            SimError::Db(d) => d.into(),
            _ => Failure::Internal(e.to_string()),
        }
    }
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Internal(format!("{}: {e}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    fs::write(path, text).map_err(io(path))
}

struct Ctx {
    manifest: CorpusManifest,
    out: PathBuf,
}

impl Ctx {
    fn target(&self, t: &Target) -> Result<(&ModelConfig, &BackendSpec), Failure> {
        let m = self
            .manifest
            .model(&t.model)
            .ok_or_else(|| Failure::Validation(format!("unknown model {:?}", t.model)))?;
        let b = self
            .manifest
            .backend(&t.backend)
            .ok_or_else(|| Failure::Validation(format!("unknown backend {:?}", t.backend)))?;
        Ok((m, b))
    }
}

fn slug(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' }).collect()
}

fn load(cli: &Cli) -> Result<Ctx, Failure> {
    let path = cli
        .manifest
        .as_ref()
        .ok_or_else(|| Failure::Validation("--manifest is required".into()))?;
    let mut manifest = load_manifest(path)?;
    if let Some(t) = &cli.grid_num_toks {
        manifest.grid.token_counts = t.clone();
    }
    if let Some(r) = &cli.grid_num_reqs {
        manifest.grid.request_counts = r.clone();
    }
    manifest.validate()?;
    Ok(Ctx {
        manifest,
        out: cli.out.clone(),
    })
}

fn open_db(cli: &Cli) -> Result<LatencyDb, Failure> {
    let path = cli
        .db
        .as_ref()
        .ok_or_else(|| Failure::Validation("--db or DOOLY_DB is required".into()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        if !dir.is_dir() {
            return Err(Failure::Validation(format!("{} is not a directory", dir.display())));
        }
    }
    Ok(LatencyDb::open(path)?)
}

/// Run the parsed command, printing to stdout.
pub fn execute(cli: &Cli) -> Result<(), Failure> {
    if cli.schema_dump {
        print!("{SCHEMA_SQL}");
        return Ok(());
    }
    let Some(cmd) = &cli.command else {
        return Err(Failure::Validation("no subcommand given (see --help)".into()));
    };
    match cmd {
        Command::Trace { target, batch } => {
            let ctx = load(cli)?;
            let (m, b) = ctx.target(target)?;
            let opts = TraceOptions::with_tp(ctx.manifest.tp_degree);
            let batch = match batch.as_deref() {
                Some([r, t]) if *r > 0 && *t > 0 => DummyBatch {
                    num_reqs: *r,
                    tokens_per_req: *t,
                },
                Some(_) => return Err(Failure::Validation("--batch needs two positive values".into())),
                None => DummyBatch::collision_free(m, opts.tp, &Default::default()),
            };
            let trace = run_trace(m, b, batch, &opts).map_err(|e| Failure::Internal(e.to_string()))?;
            let path = ctx.out.join(format!("trace_{}_{}.json", slug(&m.name), slug(&b.name)));
            write(&path, &chrome::export(&trace))?;
            println!("trace: {} events, {} kernels -> {}", trace.events.len(), trace.kernel_count(), path.display());
            println!("ambiguities: {:?}", trace.ambiguities);
            match &trace.retraced_from {
                Some((first, collided)) => println!(
                    "retraced: batch {}x{} collided on {:?}; final batch {}x{}",
                    first.num_reqs, first.tokens_per_req, collided, trace.batch.num_reqs, trace.batch.tokens_per_req
                ),
                None => println!("retraced: no"),
            }
            Ok(())
        }
        Command::Resolve { target } => {
            let ctx = load(cli)?;
            let (m, b) = ctx.target(target)?;
            let opts = TraceOptions::with_tp(ctx.manifest.tp_degree);
            let batch = DummyBatch::collision_free(m, opts.tp, &Default::default());
            let trace = run_trace(m, b, batch, &opts).map_err(|e| Failure::Internal(e.to_string()))?;
            let set = find_opset(&trace).map_err(|e| Failure::Internal(e.to_string()))?;
            let path = ctx.out.join(format!("opset_{}_{}.json", slug(&m.name), slug(&b.name)));
            write(&path, &set.to_json())?;
            for e in &set.entries {
                println!("{:?}\t{}\tx{}", e.granularity, e.path, e.repeat_count);
            }
            println!(
                "{} entries, {} collectives, {} kernels covered -> {}",
                set.entries.len(),
                set.collectives.len(),
                set.covered_kernels(),
                path.display()
            );
            Ok(())
        }
        Command::Profile { thin } => {
            let ctx = load(cli)?;
            let mut db = open_db(cli)?;
            let grid = manifest_grid(&ctx.manifest, &ctx.manifest.grid.thinned(*thin));
            let mut report = ProfileReport::default();
            let mut failures = Vec::new();
            for m in &ctx.manifest.models {
                for b in &ctx.manifest.backends {
                    match profile_config(&mut db, &ctx.manifest, m, b, &grid) {
                        Ok(c) => {
                            let new = c.outcomes.iter().filter(|o| !o.reused).count();
                            if cli.verbose > 0 {
                                eprintln!("{} / {}: {} entries, {} profiled", m.name, b.name, c.outcomes.len(), new);
                            }
                            report.configs.push(c);
                        }
                        Err(e) => failures.push(format!("{} / {}: {e}", m.name, b.name)),
                    }
                }
            }
            print_groups(&report);
            write(&ctx.out.join("profile_groups.csv"), &report.groups_csv())?;
            if failures.is_empty() {
                Ok(())
            } else {
                for f in &failures {
                    eprintln!("failed: {f}");
                }
                Err(Failure::Internal(format!("{} of {} configurations failed", failures.len(), report.configs.len() + failures.len())))
            }
        }
        Command::Simulate {
            target,
            workload,
            reference,
        } => {
            let ctx = load(cli)?;
            let (m, b) = ctx.target(target)?;
            let spec = WorkloadSpec::load(workload)?;
            let requests = sample_workload(&spec, cli.seed)?;
            let db = open_db(cli)?;
            let tp = ctx.manifest.tp_degree;
            let graph = CallGraph::build(m, b, tp)?;
            let regs = fit_graph(&db, &graph)?;
            let comm = db.comm_table(&ctx.manifest.hardware.topology, tp, "all_reduce")?;
            let grid = &ctx.manifest.grid;
            let cfg = sched_config(m, &ctx.manifest.hardware, tp, grid.prefill_chunk, grid.max_batch as usize);
            let sim = run(&requests, &graph, &regs, &comm, cfg)?;
            write_metrics(&ctx.out, "sim", &sim)?;
            print_percentiles("sim", &sim);
            if *reference {
                let refr = reference_run(&requests, &graph, &ctx.manifest.hardware, cfg)?;
                write_metrics(&ctx.out, "reference", &refr)?;
                print_percentiles("reference", &refr);
                for (name, p, t) in [
                    ("TTFT", sim.metrics.ttft_percentiles(), refr.metrics.ttft_percentiles()),
                    ("TPOT", sim.metrics.tpot_percentiles(), refr.metrics.tpot_percentiles()),
                ] {
                    let errs: Vec<String> = percentile_errors(&p, &t)
                        .iter()
                        .map(|(q, e)| format!("p{q}={:.2}%", e * 100.0))
                        .collect();
                    println!("{name} MAPE: {}", errs.join(" "));
                }
                let (same, total) = schedule_agreement(&sim.iterations, &refr.iterations);
                println!("schedule: {same}/{total} iterations with identical batches");
            }
            Ok(())
        }
        Command::Report => {
            let db = open_db(cli)?;
            let report = report_from_db(&db)?;
            if report.configs.is_empty() {
                println!("database has no profiled configurations");
                return Ok(());
            }
            print_groups(&report);
            for (m, u, t) in report.cumulative_unique() {
                println!("{m}\tunique {u}\ttotal {t}");
            }
            write(&cli.out.join("report_groups.csv"), &report.groups_csv())?;
            write(&cli.out.join("report_curve.csv"), &report.curve_csv())?;
            let curve = report.cumulative_unique();
            let pts = |f: fn(&(String, u64, u64)) -> u64| -> Vec<(f64, f64)> {
                curve.iter().enumerate().map(|(i, c)| ((i + 1) as f64, f(c) as f64)).collect()
            };
            let svg = svg_lines(
                "Cumulative signatures",
                "models profiled",
                "signatures",
                &[("unique", pts(|c| c.1)), ("total", pts(|c| c.2))],
            );
            write(&cli.out.join("report_curve.svg"), &svg)?;
            Ok(())
        }
        Command::Export { file } => {
            let db = open_db(cli)?;
            write(file, &db.export_jsonl()?)?;
            println!("{} measurements -> {}", db.measurement_count()?, file.display());
            Ok(())
        }
        Command::Import { file } => {
            let mut db = open_db(cli)?;
            let text = fs::read_to_string(file).map_err(|e| Failure::Validation(format!("{}: {e}", file.display())))?;
            let n = db.import_jsonl(&text)?;
            println!("imported {n} measurements");
            Ok(())
        }
    }
}

fn print_groups(report: &ProfileReport) {
    println!("{:<12} {:>5} {:>5} {:>12} {:>12} {:>9}", "group", "N", "R", "profile_s", "saved_s", "reduction");
    for r in report.attention_table().into_iter().chain([report.overall()]) {
        println!(
            "{:<12} {:>5} {:>5} {:>12.4} {:>12.4} {:>8.1}%",
            r.group,
            r.occurrences,
            r.reused,
            r.profiled_seconds,
            r.saved_seconds,
            r.reduction() * 100.0
        );
    }
}

fn print_percentiles(label: &str, r: &RunResult) {
    let fmt = |v: Vec<(f64, f64)>| v.iter().map(|(p, x)| format!("p{p}={x:.4}")).collect::<Vec<_>>().join(" ");
    println!("{label} TTFT s: {}", fmt(r.metrics.ttft_percentiles()));
    println!("{label} TPOT s: {}", fmt(r.metrics.tpot_percentiles()));
}

fn write_metrics(out: &Path, label: &str, r: &RunResult) -> Result<(), Failure> {
    write(&out.join(format!("{label}_metrics.csv")), &r.metrics.to_csv())?;
    write(&out.join(format!("{label}_summary.json")), &r.metrics.to_json())?;
    let ttft = svg_lines("TTFT CDF", "seconds", "fraction", &[("ttft", cdf(&r.metrics.ttfts()))]);
    write(&out.join(format!("{label}_ttft_cdf.svg")), &ttft)?;
    let tpot = svg_lines("TPOT CDF", "seconds", "fraction", &[("tpot", cdf(&r.metrics.tpots()))]);
    write(&out.join(format!("{label}_tpot_cdf.svg")), &tpot)?;
    let sched: Vec<(f64, f64)> = r.metrics.schedule.iter().map(|(t, n)| (*t, *n as f64)).collect();
    let svg = svg_lines("Scheduled requests", "seconds", "requests", &[("scheduled", sched)]);
    write(&out.join(format!("{label}_schedule.svg")), &svg)
}
