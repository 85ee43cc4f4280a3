use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use see_core::catalog::ConceptTree;
use see_core::eval::Experiment;
use see_core::prompts::{write_corpus, Corpus};
use see_core::report::{execute, render_report, resolve_run, ReportFormat};
use see_core::{load_config, AttributeVocabulary, SeeError};

const EXIT_USAGE: u8 = 1;
const EXIT_PARTIAL: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

#[derive(Parser)]
#[command(name = "see", version, about = "Side-effect evaluation for concept-erasure techniques")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the prompt corpus, the concept catalog and a manifest.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one evaluation dimension end to end.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        dimension: DimensionArg,
    },
    /// Render tables or plots for a finished run.
    Report {
        /// Run id under the runs directory, or a path to a run directory.
        #[arg(long)]
        run: String,
        #[arg(long, value_enum, default_value = "md")]
        format: FormatArg,
        #[arg(long, default_value = "runs")]
        runs_dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DimensionArg {
    Neighbors,
    Evasion,
    Leakage,
    Schedule,
    Attention,
}

impl From<DimensionArg> for Experiment {
    fn from(d: DimensionArg) -> Self {
        match d {
            DimensionArg::Neighbors => Experiment::Neighbors,
            DimensionArg::Evasion => Experiment::Evasion,
            DimensionArg::Leakage => Experiment::Leakage,
            DimensionArg::Schedule => Experiment::Schedule,
            DimensionArg::Attention => Experiment::Attention,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Md,
    Plots,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Md => ReportFormat::Md,
            FormatArg::Plots => ReportFormat::Plots,
        }
    }
}

fn exit_code(err: &SeeError) -> u8 {
    match err {
        SeeError::Config { .. }
        | SeeError::UnknownAdapter { .. }
        | SeeError::UnknownConcept(_)
        | SeeError::InvalidVocabulary(_)
        | SeeError::InvalidBinEdges
        | SeeError::Contract(_)
        | SeeError::Io(_) => EXIT_USAGE,
        e if e.is_retriable() || matches!(e, SeeError::Erasure { .. } | SeeError::Embedding { .. }) => EXIT_PARTIAL,
        _ => EXIT_INTERNAL,
    }
}

fn run(cli: Cli) -> Result<u8, SeeError> {
    match cli.command {
        Command::GenCorpus { out } => {
            let tree = ConceptTree::coco();
            let vocab = AttributeVocabulary::default();
            let corpus = Corpus::build(&tree, &vocab)?;
            let manifest = write_corpus(&out, &tree, &vocab, &corpus)?;
            println!(
                "wrote {} prompts to {} (corpus sha256 {})",
                manifest.record_count,
                out.join("corpus.jsonl").display(),
                manifest.corpus_hash
            );
            Ok(0)
        }
        Command::Run { config, dimension } => {
            let config = load_config(&config)?;
            let artifacts = execute(config, dimension.into())?;
            let out = &artifacts.output;
            println!(
                "run {} wrote {} records and {} summary rows to {}",
                artifacts.manifest.run_id,
                out.records.len(),
                out.summaries.len(),
                artifacts.dir.display()
            );
            if out.is_partial() {
                eprintln!("{} work items failed; see {}", out.gaps.len(), artifacts.dir.join("gaps.jsonl").display());
                for g in out.gaps.iter().take(10) {
                    eprintln!(
                        "  {} seed {} on {}{}: {}",
                        g.prompt_id,
                        g.seed,
                        g.model_id,
                        g.verifier_id.as_deref().map(|v| format!(" ({v})")).unwrap_or_default(),
                        g.message
                    );
                }
                return Ok(EXIT_PARTIAL);
            }
            Ok(0)
        }
        Command::Report { run, format, runs_dir } => {
            let dir = resolve_run(&run, &runs_dir)?;
            for path in render_report(&dir, format.into())? {
                println!("{}", path.display());
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
