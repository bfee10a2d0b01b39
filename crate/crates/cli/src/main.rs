//! `dynkc` command-line tool. Every subcommand writes its artifacts under
//! `--out` and a JSON report to `--out/reports/<command>.json`, which is
//! also printed on stdout. Failures print a JSON error object on stderr
//! and exit with status 1.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dynkc::artifacts::{self, FinetuneTask, Workspace};
use dynkc::config::RunConfig;
use dynkc::pipeline::{write_json, REPORT_SCHEMA_VERSION};
use dynkc::pretrain::PretrainMode;
use dynkc::sgnn::AttentionVariant;
use dynkc::synth::gen_synth;
use dynkc::{Error, Result};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "dynkc", version, about = "Dynamic knowledge-context selection for a toy knowledge-enhanced LM")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Workspace directory for artifacts and reports.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Model checkpoint directory (defaults to `<out>/model`).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Hop radius of the raw knowledge context; `ablate khop` takes a list.
    #[arg(long = "K", global = true, value_delimiter = ',')]
    k: Vec<usize>,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, global = true, value_enum)]
    attention: Option<AttentionArg>,
    #[arg(long, global = true)]
    threshold: Option<f64>,
    /// Extra `key=value` config overrides.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    BertStyle,
    RobertaStyle,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AttentionArg {
    Semantic,
    MeanPool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic graph, corpus and gold files into `--out`.
    GenSynth,
    /// Validate a triple file and corpus and prepare them in the workspace.
    BuildKg {
        #[arg(long)]
        kg: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Train the static TransE embeddings.
    TrainTranse,
    /// Pre-train the model on the training split.
    Pretrain,
    /// Fine-tune a task head on top of the pre-trained checkpoint.
    Finetune {
        #[arg(value_enum)]
        task: TaskArg,
    },
    /// Rank a mention's 1-hop triples by attention weight for a sentence.
    RankTriples {
        #[arg(long)]
        sentence: String,
        /// Entity name of the mention.
        #[arg(long)]
        mention: String,
    },
    /// Triple-selection precision, recall and F1.
    EvalSelection {
        /// Pick the threshold on the dev split, then report test F1.
        #[arg(long)]
        threshold_sweep: bool,
    },
    /// Compare hop radii or attention variants.
    Ablate {
        #[command(subcommand)]
        what: Ablation,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Typing,
    Relation,
}

#[derive(Subcommand, Debug)]
enum Ablation {
    /// Relation accuracy for each radius given by `--K`, e.g. `--K 1,2`.
    Khop,
    /// Selection F1 with semantic attention and with mean pooling.
    Attention,
}

fn run_config(c: &Common, ablating_khop: bool) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not KEY=VALUE")))?;
        cfg = cfg.with_override(k.trim(), v.trim())?;
    }
    if let Some(s) = c.seed {
        cfg = cfg.with_override("seed", &s.to_string())?;
    }
    match c.k[..] {
        [] => {}
        [k] => cfg = cfg.with_override("K", &k.to_string())?,
        _ if ablating_khop => {}
        _ => return Err(Error::Config("--K takes a single value here".into())),
    }
    if let Some(m) = c.mode {
        cfg.mode = match m {
            ModeArg::BertStyle => PretrainMode::BertStyle,
            ModeArg::RobertaStyle => PretrainMode::RobertaStyle,
        };
    }
    if let Some(a) = c.attention {
        cfg.attention = match a {
            AttentionArg::Semantic => AttentionVariant::Semantic,
            AttentionArg::MeanPool => AttentionVariant::MeanPool,
        };
    }
    if let Some(t) = c.threshold {
        cfg.threshold = t;
    }
    Ok(cfg)
}

#[derive(Serialize)]
struct GenSynthReport {
    schema_version: u32,
    seed: u64,
    entities: usize,
    relations: usize,
    triples: usize,
    sentences: usize,
    selection_annotations: usize,
    relation_examples: usize,
    two_hop_relation_examples: usize,
}

fn emit<T: Serialize>(ws: &Workspace, name: &str, report: &T) -> Result<()> {
    ws.write_report(name, report)?;
    print_json(report)
}

/// Prints to stdout, ignoring a closed pipe.
fn print_json<T: Serialize>(report: &T) -> Result<()> {
    let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(report)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let ablating_khop = matches!(cli.command, Command::Ablate { what: Ablation::Khop });
    let cfg = run_config(&cli.common, ablating_khop)?;
    let ws = Workspace::new(&cli.common.out);
    let checkpoint = |default: PathBuf| cli.common.checkpoint.clone().unwrap_or(default);
    match cli.command {
        Command::GenSynth => {
            let world = gen_synth(&cfg.synth_config(), cfg.seed)?;
            world.write(&ws.root)?;
            let report = GenSynthReport {
                schema_version: REPORT_SCHEMA_VERSION,
                seed: cfg.seed,
                entities: world.kg.num_entities(),
                relations: world.kg.num_relations(),
                triples: world.kg.num_triples(),
                sentences: world.corpus.len(),
                selection_annotations: world.selection.len(),
                relation_examples: world.relations.len(),
                two_hop_relation_examples: world.relations.iter().filter(|r| r.hops == 2).count(),
            };
            emit(&ws, "gen-synth", &report)
        }
        Command::BuildKg { kg, corpus } => {
            let m = artifacts::build_kg(&ws, &kg, &corpus)?;
            emit(&ws, "build-kg", &m)
        }
        Command::TrainTranse => emit(&ws, "train-transe", &artifacts::train_transe_stage(&ws, &cfg)?),
        Command::Pretrain => {
            let report = artifacts::pretrain_files(&ws, &cfg, |l| {
                if l.step % 50 == 0 {
                    eprintln!("step {} total {:.4}", l.step, l.total);
                }
            })?;
            emit(&ws, "pretrain", &report)
        }
        Command::Finetune { task } => {
            let task = match task {
                TaskArg::Typing => FinetuneTask::Typing,
                TaskArg::Relation => FinetuneTask::Relation,
            };
            let report = artifacts::finetune_files(&ws, &checkpoint(ws.model_dir()), &cfg, task)?;
            emit(&ws, &format!("finetune-{}", task.as_str()), &report)
        }
        Command::RankTriples { sentence, mention } => {
            let report = artifacts::rank_triples_files(&ws, &checkpoint(ws.model_dir()), &cfg, &sentence, &mention)?;
            ws.write_report("rank-triples", &report)?;
            eprint!("{}", report.to_table());
            print_json(&report)
        }
        Command::EvalSelection { threshold_sweep } => {
            let report = artifacts::eval_selection_files(
                &ws,
                &checkpoint(ws.model_dir()),
                &cfg,
                cli.common.threshold,
                threshold_sweep,
            )?;
            emit(&ws, "eval-selection", &report)
        }
        Command::Ablate { what: Ablation::Khop } => {
            if cli.common.k.is_empty() {
                return Err(Error::Config("ablate khop needs --K, e.g. --K 1,2".into()));
            }
            emit(&ws, "ablate-khop", &artifacts::ablate_khop(&ws, &cfg, &cli.common.k)?)
        }
        Command::Ablate { what: Ablation::Attention } => emit(
            &ws,
            "ablate-attention",
            &artifacts::ablate_attention(&ws, &checkpoint(ws.model_dir()), &cfg)?,
        ),
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::ShapeMismatch { .. } => "shape_mismatch",
        Error::InvalidArgument { .. } => "invalid_argument",
        Error::NonFinite { .. } => "non_finite",
        Error::Parse { .. } => "parse",
        Error::UnknownEntity(_) => "unknown_entity",
        Error::UnknownRelation(_) => "unknown_relation",
        Error::MissingEmbedding { .. } => "missing_embedding",
        Error::Checkpoint { .. } => "checkpoint",
        Error::ManifestMismatch { .. } => "manifest_mismatch",
        Error::Marker(_) => "marker",
        Error::SequenceTooLong { .. } => "sequence_too_long",
        Error::GoldMismatch(_) => "gold_mismatch",
        Error::Config(_) => "config",
        Error::Io { .. } => "io",
        Error::Json(_) => "json",
    }
}

fn report_error(e: &Error, out: &Path) {
    let body = serde_json::json!({
        "schema_version": REPORT_SCHEMA_VERSION,
        "error": { "kind": error_kind(e), "message": e.to_string() },
    });
    eprintln!("{body}");
    let _ = write_json(&out.join("reports").join("error.json"), &body);
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = cli.common.out.clone();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(&e, &out);
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn k_list_only_for_khop_ablation() {
        let cli = Cli::parse_from(["dynkc", "--K", "1,2", "pretrain"]);
        assert!(run_config(&cli.common, false).is_err());
        assert!(run_config(&cli.common, true).is_ok());
        let cli = Cli::parse_from(["dynkc", "pretrain", "--K", "1"]);
        assert_eq!(run_config(&cli.common, false).unwrap().k, 1);
    }
}
