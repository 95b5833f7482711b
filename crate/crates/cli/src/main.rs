//! `panoptic-forge`: operator entry point for the annotation engine.
//!
//! Reports go to stdout as JSON. Failures go to stderr as
//! `{"error": <code>, "message": <text>}` with exit status 1, or 2 for
//! usage errors.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use panoptic_core::analytics::{corpus_stats, render_table};
use panoptic_core::config::CONFIG_ENV;
use panoptic_core::demo::world_truth;
use panoptic_core::gateway::mock_router;
use panoptic_core::iteration::{AcceptAll, CorrectionsHook, IdentityHook, ModelHook, OracleVerifier, Verifier};
use panoptic_core::workspace::{read_jsonl, serve, write_stats, Workspace};
use panoptic_core::{Config, Error, Region};

const DEFAULT_CONFIG: &str = "forge.json";

#[derive(Parser, Debug)]
#[command(name = "panoptic-forge", version, about = "Region annotation engine")]
struct Cli {
    /// Config file. Falls back to $PANOPTIC_FORGE_CONFIG, then ./forge.json,
    /// then built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Upper bound on worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Register the images in a directory.
    Ingest {
        dir: Option<PathBuf>,
        /// Register this many synthetic images instead of reading files.
        #[arg(long, conflicts_with = "dir")]
        synthetic: Option<usize>,
    },
    /// Localize, tag, match and describe every registered image.
    Annotate,
    /// Re-score stored regions with the configured matcher.
    Match,
    /// Keep the best regions per image and scale bucket.
    Clean,
    /// Queue a concept-wise sample for human verification.
    SampleVerify {
        #[arg(long)]
        budget: usize,
    },
    /// Serve the verification API.
    ServeVerify {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
    /// Serve the mock annotators over HTTP.
    ServeMocks {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "127.0.0.1:8090")]
        addr: String,
    },
    /// Run or resume the annotate / verify / fine-tune loop.
    Loop {
        #[arg(long)]
        iterations: usize,
        #[arg(long, value_enum, default_value_t = HookKind::Identity)]
        train: HookKind,
        #[arg(long, value_enum, default_value_t = HookKind::Corrections)]
        finetune: HookKind,
        #[arg(long, value_enum, default_value_t = VerifierKind::Oracle)]
        verifier: VerifierKind,
    },
    /// Corpus statistics.
    Stats {
        /// Read this JSONL corpus instead of the workspace store.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Where to write stats.json, stats.txt and concepts.csv.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Zero-shot recognition of ground-truth boxes with the configured matcher.
    Eval {
        #[arg(long)]
        gt: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum HookKind {
    Identity,
    Corrections,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VerifierKind {
    /// Skip verification.
    None,
    AcceptAll,
    /// Scripted verifier that knows the mock world's ground truth.
    Oracle,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Json,
    Table,
}

enum Failure {
    Engine(Error),
    /// Finished, but some images or regions failed; carries the report.
    Partial(Value),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Engine(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({"error": "usage", "message": e.to_string().trim()}));
            return ExitCode::from(2);
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(out) => {
            if !out.is_empty() {
                // a closed pipe (e.g. `| head`) is not an error
                let _ = writeln!(std::io::stdout(), "{out}");
            }
            ExitCode::SUCCESS
        }
        Err(Failure::Engine(e)) => {
            eprintln!("{}", json!({"error": e.code(), "message": e.to_string()}));
            ExitCode::from(1)
        }
        Err(Failure::Partial(report)) => {
            eprintln!("{}", json!({"error": "partial", "message": "some images failed", "report": report}));
            ExitCode::from(1)
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config, Error> {
    let path = cli
        .config
        .clone()
        .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let mut cfg = match path {
        Some(p) => Config::load(p)?,
        None if Path::new(DEFAULT_CONFIG).exists() => Config::load(DEFAULT_CONFIG)?,
        None => Config::default(),
    };
    if cli.jobs.is_some() {
        cfg.jobs = cli.jobs;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn pretty(v: &impl serde::Serialize) -> Result<String, Error> {
    Ok(serde_json::to_string_pretty(v)?)
}

async fn ctrl_c() {
    let _ = tokio::signal::ctrl_c().await;
}

fn run(cli: Cli) -> Result<String, Failure> {
    // stats on a standalone corpus file needs no workspace
    if let Command::Stats {
        corpus: Some(path),
        out,
        format,
    } = &cli.command
    {
        let regions: Vec<Region> = read_jsonl(path)?;
        let report = match out {
            Some(dir) => write_stats(dir, &regions)?,
            None => corpus_stats(&regions),
        };
        return Ok(match format {
            Format::Json => pretty(&report)?,
            Format::Table => render_table(&report),
        });
    }

    let cfg = load_config(&cli)?;
    let ws = Workspace::open(cfg)?;
    let out = match cli.command {
        Command::Ingest { dir, synthetic } => {
            let report = match (dir, synthetic) {
                (_, Some(n)) => ws.ingest_synthetic(n)?,
                (Some(d), None) => ws.ingest_dir(&d)?,
                (None, None) => return Err(Error::validation("ingest needs a directory or --synthetic N").into()),
            };
            pretty(&report)?
        }
        Command::Annotate => {
            let report = ws.annotate()?;
            let v = json!({
                "report": report,
                "corpus_hash": ws.store().corpus_hash().map_err(Error::from)?,
                "failure_manifest": ws.root().join("failures.jsonl"),
            });
            if report.fatal > 0 {
                return Err(Failure::Partial(v));
            }
            pretty(&v)?
        }
        Command::Match => pretty(&ws.rematch()?)?,
        Command::Clean => {
            let report = ws.clean()?;
            pretty(&json!({"report": report, "corpus_hash": ws.store().corpus_hash().map_err(Error::from)?}))?
        }
        Command::SampleVerify { budget } => pretty(&ws.sample_verify(budget)?)?,
        Command::ServeVerify { addr } => {
            ws.serve_verify(&addr, announce, ctrl_c())?;
            String::new()
        }
        Command::ServeMocks { seed, addr } => {
            let seed = seed.unwrap_or(ws.config().seed);
            serve(&addr, mock_router(ws.registry(), seed), announce, ctrl_c())?;
            String::new()
        }
        Command::Loop {
            iterations,
            train,
            finetune,
            verifier,
        } => {
            let hook = |k: HookKind| -> Box<dyn ModelHook> {
                match k {
                    HookKind::Identity => Box::new(IdentityHook),
                    HookKind::Corrections => Box::new(CorrectionsHook),
                }
            };
            let (train, finetune) = (hook(train), hook(finetune));
            let verifier: Option<Box<dyn Verifier>> = match verifier {
                VerifierKind::None => None,
                VerifierKind::AcceptAll => Some(Box::new(AcceptAll)),
                VerifierKind::Oracle => Some(Box::new(OracleVerifier::new(world_truth(ws.world(), &ws.images()?)))),
            };
            let manifests = ws.run_loop(iterations, train.as_ref(), finetune.as_ref(), verifier.as_deref())?;
            pretty(&manifests)?
        }
        Command::Stats { out, format, .. } => {
            let report = match out {
                Some(dir) => write_stats(&dir, &ws.corpus()?)?,
                None => ws.stats()?,
            };
            match format {
                Format::Json => pretty(&report)?,
                Format::Table => render_table(&report),
            }
        }
        Command::Eval { gt } => pretty(&ws.eval(&gt)?)?,
    };
    Ok(out)
}

fn announce(addr: std::net::SocketAddr) {
    let mut out = std::io::stdout();
    let _ = writeln!(out, "{}", json!({"listening": format!("http://{addr}")}));
    let _ = out.flush();
}
