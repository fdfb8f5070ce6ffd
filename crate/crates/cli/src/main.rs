use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use preq_core::gateway::{BackendKind, GatewayError, ModelGateway};
use preq_core::preq::ModalitySet;
use preq_core::qcluster::QueryRecord;
use preq_core::synth::{generate_synthetic, write_synthetic, SynthConfig};
use preq_core::workflow::{self, Ablation, RunConfig};
use preq_core::Error;

#[derive(Parser, Debug)]
#[command(name = "preq", version, about = "Question-centric multimodal document retrieval")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Overrides the working directory from the config.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    backend: Option<Backend>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Backend {
    Mock,
    Live,
}

#[derive(Args, Debug, Default)]
struct RetrievalFlags {
    /// Modalities to search, e.g. `M,V,T` or `T`.
    #[arg(long)]
    modalities: Option<ModalitySet>,
    /// Rank passages by retrieval order instead of asking the model.
    #[arg(long)]
    no_qcluster: bool,
    /// Retrieve this many preQs instead of the size-based default.
    #[arg(long)]
    top_k_override: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Caption components that lack a caption.
    Caption {
        /// Keep an existing captioned corpus.
        #[arg(long)]
        skip_existing: bool,
    },
    /// Generate and embed preQs.
    Generate {
        /// Modalities to generate.
        #[arg(long)]
        modalities: Option<ModalitySet>,
        /// Questions kept per source.
        #[arg(long)]
        max_questions: Option<usize>,
    },
    /// Build the vector index.
    Index,
    /// Answer one query and print the ranked passages as JSON.
    Query {
        text: String,
        #[command(flatten)]
        flags: RetrievalFlags,
    },
    /// Evaluate the configured query set.
    Eval {
        #[command(flatten)]
        flags: RetrievalFlags,
        /// Run an ablation instead of a single evaluation.
        #[arg(long, value_enum)]
        ablation: Option<AblationArg>,
    },
    /// Pool analyses.
    Analyze {
        #[arg(value_enum)]
        what: Analysis,
    },
    /// Caption, generate, index and evaluate in one go.
    Run {
        #[arg(long)]
        skip_existing: bool,
    },
    /// Write a synthetic keyword corpus and query set.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        documents: usize,
        #[arg(long, default_value_t = 3)]
        pages: usize,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AblationArg {
    Modality,
    Qcluster,
    QuestionCap,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Analysis {
    Redundancy,
    Coverage,
    Export,
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let Some(path) = &cli.config else {
        bail!(Error::Config("--config is required for this command".into()));
    };
    let mut cfg = RunConfig::load(path)?;
    if let Some(w) = &cli.workdir {
        cfg.workdir = w.clone();
    }
    if let Some(b) = cli.backend {
        cfg.provider.backend = match b {
            Backend::Mock => BackendKind::Mock,
            Backend::Live => BackendKind::Live,
        };
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.workers.is_some() {
        cfg.workers = cli.workers;
    }
    Ok(cfg)
}

fn apply_flags(cfg: &mut RunConfig, flags: &RetrievalFlags) -> anyhow::Result<()> {
    if let Some(m) = flags.modalities {
        cfg.retrieval.modalities = m;
    }
    if flags.no_qcluster {
        cfg.retrieval.use_qcluster = false;
    }
    if flags.top_k_override.is_some() {
        cfg.retrieval.k_override = flags.top_k_override;
    }
    cfg.validate()?;
    Ok(())
}

fn print_eval(cfg: &RunConfig, gw: &ModelGateway) -> anyhow::Result<()> {
    workflow::run_eval(cfg, gw)?;
    print!(
        "{}",
        std::fs::read_to_string(cfg.workdir.join(workflow::EVAL_TABLE_FILE))?
    );
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Command::Synth { out, documents, pages } = &cli.command {
        let s = generate_synthetic(&SynthConfig {
            documents: *documents,
            pages_per_document: *pages,
            seed: cli.seed.unwrap_or(0),
            ..SynthConfig::default()
        })?;
        let (m, q) = write_synthetic(&s, out)?;
        println!("{}\n{}", m.display(), q.display());
        return Ok(());
    }

    let mut cfg = load_config(&cli)?;
    let workers = cfg.workers.unwrap_or(0);
    preq_core::par::with_workers(workers, move || -> anyhow::Result<()> {
        let gw = cfg.gateway()?;
        match &cli.command {
            Command::Caption { skip_existing } => {
                let r = workflow::run_caption(&cfg, &gw, *skip_existing)?;
                if r.skipped_stage {
                    println!("captioned corpus exists; skipped");
                } else {
                    println!("captioned {} components ({} failed)", r.captioned, r.failed.len());
                }
            }
            Command::Generate {
                modalities,
                max_questions,
            } => {
                if let Some(m) = modalities {
                    cfg.generation.modalities_enabled = *m;
                }
                if let Some(n) = max_questions {
                    cfg.generation.max_questions_per_source = *n;
                }
                cfg.validate()?;
                let r = workflow::run_generate(&cfg, &gw)?;
                println!(
                    "{} preQs over {} passages ({} partial)",
                    r.total_preqs,
                    r.passages.len(),
                    r.partial_passages
                );
            }
            Command::Index => {
                let n = workflow::run_index(&cfg)?;
                println!("indexed {n} preQs");
            }
            Command::Query { text, flags } => {
                apply_flags(&mut cfg, flags)?;
                let outcome = workflow::run_query(&cfg, &gw, &cfg.retrieval.request(text.as_str()))?;
                println!("{}", serde_json::to_string_pretty(&QueryRecord::new("query", outcome))?);
            }
            Command::Eval { flags, ablation } => {
                apply_flags(&mut cfg, flags)?;
                match ablation {
                    None => print_eval(&cfg, &gw)?,
                    Some(a) => {
                        let a = match a {
                            AblationArg::Modality => Ablation::Modality,
                            AblationArg::Qcluster => Ablation::Qcluster,
                            AblationArg::QuestionCap => Ablation::QuestionCap,
                        };
                        let rows = workflow::run_ablation(&cfg, &gw, a)?;
                        print!(
                            "{}",
                            preq_core::eval::format_metrics_table(rows.iter().map(|(l, r)| (l.clone(), r)))
                        );
                    }
                }
            }
            Command::Analyze { what } => match what {
                Analysis::Redundancy => {
                    let r = workflow::run_redundancy(&cfg)?;
                    println!(
                        "{:>9}  {:>8}  {:>8}  {:>8}",
                        "threshold", "passage%", "document%", "all%"
                    );
                    for row in &r.rows {
                        println!(
                            "{:>9.2}  {:>8.2}  {:>8.2}  {:>8.2}",
                            row.threshold,
                            row.within_passage_pct,
                            row.within_document_pct.unwrap_or(0.0),
                            row.across_all_pct
                        );
                    }
                }
                Analysis::Coverage => {
                    let r = workflow::run_coverage(&cfg)?;
                    println!("{:>5}  {:>12}", "n", "avg clusters");
                    for (n, c) in &r.avg_cluster_count {
                        println!("{n:>5}  {c:>12.3}");
                    }
                }
                Analysis::Export => {
                    let path = workflow::run_export(&cfg)?;
                    println!("{}", path.display());
                }
            },
            Command::Run { skip_existing } => {
                workflow::run_caption(&cfg, &gw, *skip_existing)?;
                workflow::run_generate(&cfg, &gw)?;
                workflow::run_index(&cfg)?;
                print_eval(&cfg, &gw)?;
            }
            Command::Synth { .. } => unreachable!(),
        }
        Ok(())
    })
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::MissingArtifact { .. }) => 2,
        Some(Error::Gateway(GatewayError::Config(_))) => 1,
        Some(Error::Gateway(_) | Error::ProviderFailure { .. }) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli).context("preq failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}
