use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use svmcheck::ablation::{ablate, AblationMode, AblationReport, Necessity};
use svmcheck::corpus;
use svmcheck::engine::Limits;
use svmcheck::format::parse_bytes;
use svmcheck::invariants::{verify, Verdict};
use svmcheck::model::{validate, ProtocolModel};
use svmcheck::report::RunReport;

#[derive(Parser)]
#[command(name = "svmcheck", version, about = "Symbolic security model checker")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(clap::Args, Clone)]
struct Opts {
    /// Sessions to explore (defaults to the model's own setting).
    #[arg(long)]
    sessions: Option<u32>,
    #[arg(long, default_value_t = svmcheck::engine::DEFAULT_FAB_DEPTH)]
    fab_depth: usize,
    #[arg(long, default_value_t = svmcheck::engine::DEFAULT_MAX_STATES)]
    max_states: usize,
    #[arg(long, default_value_t = svmcheck::engine::DEFAULT_MAX_DEPTH)]
    max_depth: usize,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
    /// Worker threads; 0 picks one per core.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

impl Opts {
    fn limits(&self) -> Limits {
        let workers = if self.workers == 0 { rayon::current_num_threads() } else { self.workers };
        Limits {
            max_states: self.max_states,
            max_depth: self.max_depth,
            sessions: self.sessions,
            fab_depth: self.fab_depth,
            workers,
            ..Limits::default()
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Explore a model and report its verdict.
    Verify {
        /// Model file, or corpus:NAME.
        target: String,
        #[command(flatten)]
        opts: Opts,
    },
    /// Find which trust preconditions a passing model needs.
    Ablate {
        target: String,
        /// Try every subset instead of leaving one out at a time.
        #[arg(long)]
        exhaustive: bool,
        #[command(flatten)]
        opts: Opts,
    },
    /// List bundled models.
    List {
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Print the shortest trace violating one invariant.
    Trace {
        target: String,
        #[arg(long)]
        invariant: String,
        #[command(flatten)]
        opts: Opts,
    },
    /// Parse and validate without exploring.
    Check { target: String },
}

struct UserError(String);

impl<E: std::fmt::Display> From<E> for UserError {
    fn from(e: E) -> Self {
        UserError(e.to_string())
    }
}

fn load(target: &str) -> Result<ProtocolModel, UserError> {
    if let Some(name) = target.strip_prefix("corpus:") {
        return Ok(corpus::load(name)?);
    }
    let path = Path::new(target);
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => UserError(format!("E_FILE_NOT_FOUND: {target}")),
        _ => UserError(format!("E_IO: {target}: {e}")),
    })?;
    parse_bytes(&bytes, target).map_err(|ds| UserError(ds.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("\n")))
}

fn verdict_code(v: &Verdict) -> u8 {
    match v {
        Verdict::Pass => 0,
        Verdict::Fail { .. } => 1,
        Verdict::Inconclusive { .. } => 2,
    }
}

fn ablation_text(r: &AblationReport) -> String {
    let mut out = format!("model {}: baseline {}\n", r.model, r.baseline.label().to_uppercase());
    for p in &r.preconditions {
        let s = match &p.necessity {
            Necessity::Necessary { witness } => {
                let mut s = format!("necessary ({} of {} on {})", witness.kind, witness.invariant, witness.slot);
                for (i, e) in witness.trace.entries.iter().enumerate() {
                    s.push_str(&format!("\n      {:>3}. {}", i + 1, e.step));
                }
                s
            }
            Necessity::Removable => "removable".into(),
            Necessity::Inconclusive { reason } => format!("inconclusive: {reason}"),
        };
        out.push_str(&format!("  {}: {s}\n", p.id));
    }
    if let Some(sets) = &r.minimal_sets {
        out.push_str("minimal sufficient sets:\n");
        for s in sets {
            out.push_str(&format!("  {{{}}}\n", s.join(", ")));
        }
    }
    out
}

fn run(cli: Cli) -> Result<u8, UserError> {
    match cli.command {
        Command::Verify { target, opts } => {
            let m = load(&target)?;
            let limits = opts.limits();
            let start = Instant::now();
            let out = verify(&m, &limits)?;
            let ms = start.elapsed().as_secs_f64() * 1000.0;
            let report = RunReport::new(&m.name, &out, &limits, ms);
            match opts.format {
                Format::Json => println!("{}", report.to_json()),
                Format::Text => print!("{}", report.to_text()),
            }
            Ok(verdict_code(&out.verdict))
        }
        Command::Ablate { target, exhaustive, opts } => {
            let m = load(&target)?;
            let mode = if exhaustive { AblationMode::Exhaustive } else { AblationMode::LeaveOneOut };
            let r = ablate(&m, mode, &opts.limits())?;
            match opts.format {
                Format::Json => println!("{}", serde_json::to_string_pretty(&r)?),
                Format::Text => print!("{}", ablation_text(&r)),
            }
            Ok(verdict_code(&r.baseline))
        }
        Command::List { format } => {
            let entries = corpus::list_entries();
            match format {
                Format::Json => println!("{}", serde_json::to_string_pretty(&entries)?),
                Format::Text => {
                    for e in entries {
                        let expected = match &e.expected {
                            svmcheck::model::ExpectedVerdict::Pass => "pass".to_string(),
                            svmcheck::model::ExpectedVerdict::FailWith(i) => format!("fail {i}"),
                        };
                        println!(
                            "{:<28} {:<9} {:<26} {:<8} {}",
                            e.name,
                            format!("{:?}", e.scope).to_lowercase(),
                            e.phase.keyword(),
                            expected,
                            e.preconditions.join(",")
                        );
                    }
                }
            }
            Ok(0)
        }
        Command::Trace { target, invariant, opts } => {
            let m = load(&target)?;
            if !m.invariants.iter().any(|i| i.id == invariant) {
                return Err(UserError(format!("E_UNKNOWN_INVARIANT: {invariant}")));
            }
            let out = verify(&m, &opts.limits())?;
            let found = out
                .verdict
                .violations()
                .iter()
                .filter(|v| v.invariant == invariant)
                .min_by_key(|v| v.trace.entries.len());
            match (found, opts.format) {
                (Some(v), Format::Json) => println!("{}", serde_json::to_string_pretty(v)?),
                (Some(v), Format::Text) => {
                    println!("{} ({}) on {}: {}", v.invariant, v.kind, v.slot, v.explanation);
                    for (i, e) in v.trace.entries.iter().enumerate() {
                        println!("  {:>3}. {}", i + 1, e.step);
                    }
                }
                (None, _) => println!("no violation of {invariant} ({})", out.verdict.label()),
            }
            Ok(if found.is_some() { 1 } else { verdict_code(&out.verdict) })
        }
        Command::Check { target } => {
            let m = load(&target)?;
            let ds = validate(&m);
            if !ds.is_empty() {
                return Err(UserError(ds.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("\n")));
            }
            println!("{}: ok ({} subjects, {} invariants)", m.name, m.subjects.len(), m.invariants.len());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 3 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(UserError(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
