//! The `prompt-kit` command line: profile traces or synthetic workloads, run
//! the reference oracle, generate traces and benchmark the queue and maps.

pub mod bench;

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use prompt_kit::backend::Profile;
use prompt_kit::event::Event;
use prompt_kit::oracle::oracle_profile;
use prompt_kit::profilers::{parse_loop_filter, DepConfig, LifetimeConfig, ModuleConfig, PointsToConfig};
use prompt_kit::queue::DEFAULT_BUFFER_BYTES;
use prompt_kit::trace::{parse_trace, write_trace, ReplayCounts};
use prompt_kit::workload::{RandomTrace, SyntheticWorkload, WorkloadKind};
use prompt_kit::{profile_events, ProfileRun};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Input(_) => 2,
            CliError::Internal(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "prompt-kit", version, about = "Decoupled dynamic memory profiling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Stream a trace through the queue into backend workers.
    Profile(ProfileArgs),
    /// Write a synthetic or random trace.
    GenTrace(GenTraceArgs),
    /// Compute the same profile with the sequential reference implementation.
    Oracle(ProfileArgs),
    /// Measure queue or map throughput.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Args)]
pub struct WorkloadArgs {
    /// stride-loop, pointer-chase, alloc-churn or random.
    #[arg(long)]
    pub workload: Option<String>,
    /// Loop iterations (for `random`: maximum events).
    #[arg(long)]
    pub iters: Option<u64>,
    #[arg(long)]
    pub footprint: Option<u64>,
    #[arg(long)]
    pub stride: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModuleName {
    Memdep,
    Valuepattern,
    Lifetime,
    Pointsto,
}

#[derive(Debug, Clone, Args)]
pub struct ModuleArgs {
    #[arg(long, value_enum)]
    pub module: ModuleName,
    /// memdep options: count, all-types, distance, context.
    #[arg(long, default_value = "")]
    pub flags: String,
    /// Target loops: all, none or a comma-separated id list.
    #[arg(long, default_value = "all")]
    pub loops: String,
    /// Points-to set size limit; 0 means unbounded.
    #[arg(long, default_value_t = 16)]
    pub set_limit: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ProfileArgs {
    /// Textual trace file.
    #[arg(long, conflicts_with = "workload", required_unless_present = "workload")]
    pub trace: Option<PathBuf>,
    #[command(flatten)]
    pub workload: WorkloadArgs,
    #[command(flatten)]
    pub module: ModuleArgs,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..=64))]
    pub workers: u64,
    #[arg(long, env = "PROMPT_KIT_BUFFER_BYTES", default_value_t = DEFAULT_BUFFER_BYTES)]
    pub buffer_bytes: usize,
    /// Output file; standard output if absent.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GenTraceArgs {
    #[command(flatten)]
    pub workload: WorkloadArgs,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BenchTarget {
    Queue,
    Map,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[arg(value_enum)]
    pub target: BenchTarget,
    /// Events streamed (queue) or pairs inserted (map).
    #[arg(long, default_value_t = 10_000_000)]
    pub events: u64,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 8])]
    pub consumers: Vec<usize>,
    #[arg(long, env = "PROMPT_KIT_BUFFER_BYTES", default_value_t = DEFAULT_BUFFER_BYTES)]
    pub buffer_bytes: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 4, 8])]
    pub reducers: Vec<usize>,
    /// Distinct keys for the map bench.
    #[arg(long, default_value_t = 1 << 16)]
    pub keys: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl ModuleArgs {
    pub fn config(&self) -> Result<ModuleConfig, CliError> {
        let loops = parse_loop_filter(&self.loops).map_err(|e| CliError::Usage(e.to_string()))?;
        if self.module != ModuleName::Memdep && !self.flags.is_empty() {
            return Err(CliError::Usage("--flags only applies to --module memdep".into()));
        }
        Ok(match self.module {
            ModuleName::Memdep => ModuleConfig::MemDep(
                DepConfig {
                    loops,
                    ..DepConfig::default()
                }
                .with_flags(&self.flags)
                .map_err(CliError::Usage)?,
            ),
            ModuleName::Valuepattern => ModuleConfig::ValuePattern,
            ModuleName::Lifetime => ModuleConfig::Lifetime(LifetimeConfig { loops }),
            ModuleName::Pointsto => ModuleConfig::PointsTo(PointsToConfig {
                set_limit: (self.set_limit > 0).then_some(self.set_limit),
            }),
        })
    }
}

/// Generates the events a workload description names.
pub fn generate(w: &WorkloadArgs) -> Result<Vec<Event>, CliError> {
    let name = w.workload.as_deref().ok_or_else(|| CliError::Usage("no --workload given".into()))?;
    if name == "random" {
        let mut gen = RandomTrace::default();
        if let Some(n) = w.iters {
            gen.max_events = n as usize;
        }
        return Ok(gen.generate(w.seed));
    }
    let kind: WorkloadKind = name.parse().map_err(|e| CliError::Usage(format!("{e}")))?;
    let mut spec = SyntheticWorkload::with_iterations(kind, w.iters.unwrap_or(1000), w.seed);
    if let Some(f) = w.footprint {
        spec.footprint = f;
    }
    if let Some(s) = w.stride {
        spec.stride = s;
    }
    spec.generate().map_err(|e| CliError::Usage(e.to_string()))
}

/// Loads the events of a profile/oracle invocation.
pub fn load_events(args: &ProfileArgs) -> Result<Vec<Event>, CliError> {
    match &args.trace {
        Some(path) => {
            let f = File::open(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            parse_trace(BufReader::new(f)).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
        }
        None => generate(&args.workload),
    }
}

/// Runs the backend pipeline on already loaded events.
pub fn cmd_profile(
    events: &[Event],
    cfg: &ModuleConfig,
    workers: usize,
    buffer_bytes: usize,
) -> Result<ProfileRun, CliError> {
    profile_events(events, cfg, workers, buffer_bytes).map_err(|e| match e {
        prompt_kit::pipeline::PipelineError::Queue(q) => CliError::Usage(q.to_string()),
        other => CliError::Internal(other.to_string()),
    })
}

/// Runs the reference implementation on already loaded events.
pub fn cmd_oracle(events: &[Event], cfg: &ModuleConfig, workers: usize) -> Result<Profile, CliError> {
    oracle_profile(events, cfg, workers).map_err(|e| CliError::Input(e.to_string()))
}

fn write_output(path: Option<&PathBuf>, f: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Result<(), CliError> {
    let io_err = |e: io::Error| CliError::Input(format!("cannot write output: {e}"));
    match path {
        Some(p) => {
            let file = File::create(p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
            let mut w = BufWriter::new(file);
            f(&mut w).map_err(io_err)?;
            w.flush().map_err(io_err)
        }
        None => {
            let stdout = io::stdout();
            let mut w = stdout.lock();
            f(&mut w).map_err(io_err)
        }
    }
}

fn report(counts: &ReplayCounts, started: Instant) {
    eprintln!(
        "emitted={} dropped={} words={} wall_secs={:.3}",
        counts.emitted,
        counts.dropped,
        counts.words,
        started.elapsed().as_secs_f64()
    );
}

fn bench(args: &BenchArgs) -> Result<(), CliError> {
    let out = io::stdout();
    let mut out = out.lock();
    let w = |out: &mut io::StdoutLock, line: String| writeln!(out, "{line}").map_err(|e| CliError::Internal(e.to_string()));
    match args.target {
        BenchTarget::Queue => {
            let pool = bench::EventPool::new(args.seed);
            for &c in &args.consumers {
                let spmc = bench::spmc_queue(&pool, args.events, c, args.buffer_bytes, bench::Verify::Sum)
                    .map_err(|e| CliError::Usage(e.to_string()))?;
                w(&mut out, format!(
                    "queue impl=spmc consumers={c} buffer_bytes={} events={} secs={:.4} events_per_sec={:.0} intact={}",
                    args.buffer_bytes, spmc.events, spmc.secs, spmc.events_per_sec(), spmc.intact
                ))?;
                let locked = bench::locked_queue(&pool, args.events, c, args.buffer_bytes);
                w(&mut out, format!(
                    "queue impl=locked consumers={c} buffer_bytes={} events={} secs={:.4} events_per_sec={:.0} intact={}",
                    args.buffer_bytes, locked.events, locked.secs, locked.events_per_sec(), locked.intact
                ))?;
            }
        }
        BenchTarget::Map => {
            for &r in &args.reducers {
                let m = bench::ht_count(args.events, args.keys, r.max(1), args.seed);
                w(&mut out, format!(
                    "map impl=ht_count reducers={} inserts={} keys={} secs={:.4} ops_per_sec={:.0}",
                    r.max(1), m.inserts, m.keys, m.secs, m.ops_per_sec()
                ))?;
            }
            let m = bench::naive_count(args.events, args.keys, args.seed);
            w(&mut out, format!(
                "map impl=naive inserts={} keys={} secs={:.4} ops_per_sec={:.0}",
                m.inserts, m.keys, m.secs, m.ops_per_sec()
            ))?;
        }
    }
    Ok(())
}

/// Executes a parsed command.
pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Profile(args) => {
            let started = Instant::now();
            let cfg = args.module.config()?;
            let events = load_events(args)?;
            let run = cmd_profile(&events, &cfg, args.workers as usize, args.buffer_bytes)?;
            write_output(args.output.as_ref(), |w| write!(w, "{}", run.profile))?;
            report(&run.counts, started);
        }
        Command::Oracle(args) => {
            let cfg = args.module.config()?;
            let events = load_events(args)?;
            let profile = cmd_oracle(&events, &cfg, args.workers as usize)?;
            write_output(args.output.as_ref(), |w| write!(w, "{profile}"))?;
        }
        Command::GenTrace(args) => {
            let events = generate(&args.workload)?;
            write_output(args.output.as_ref(), |w| write_trace(w, &events))?;
            eprintln!("events={}", events.len());
        }
        Command::Bench(args) => bench(args)?,
    }
    Ok(())
}

/// Parses `args` and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("prompt-kit: {e}");
            e.exit_code()
        }
    }
}
