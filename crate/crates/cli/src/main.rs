//! `crag`: batch workflows over the contrastive RAG toolkit.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{Category, CliError};
use config::{ConfigError, Overrides};

#[derive(Parser)]
#[command(name = "crag", version, about = "Contrastive retrieval-augmented generation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the BM25 index over the corpus and write index.json.
    Index(Common),
    /// Rank the corpus for every dataset question; writes rankings.jsonl.
    Retrieve(Common),
    /// Evaluate the configured prompt family; one report per task.
    Eval(Common),
    /// Evaluate clean, shuffled and noisy document sets side by side.
    PerturbEval(Common),
    /// Generate contrastive demonstrations with the configured backend.
    GenDemos {
        #[command(flatten)]
        common: Common,
        /// Parse recorded completions (JSON Lines of instance plus
        /// completion) instead of calling the backend.
        #[arg(long)]
        replay: Option<PathBuf>,
    },
    /// Apply the exact-match and citation filters, then balance per task.
    Filter(WithInput),
    /// Write supervised fine-tuning records for the used demonstrations.
    Export(WithInput),
    /// Recompute stage counts from filtered demonstrations.
    Funnel(WithInput),
    /// Combine eval reports into a train-task by eval-task matrix.
    Matrix {
        #[command(flatten)]
        common: Common,
        /// Eval report files.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
    /// Check a config and print it resolved, or list every problem.
    Validate(Common),
}

#[derive(Args)]
struct WithInput {
    #[command(flatten)]
    common: Common,
    /// Demonstrations file; defaults to the one in the output directory.
    #[arg(long)]
    input: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config, or a JSON artifact whose embedded config is reused.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long, short)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<String>,
    #[arg(long)]
    dataset: Option<String>,
    /// baseline, rag or crag.
    #[arg(long)]
    family: Option<String>,
    #[arg(long)]
    top_k: Option<i64>,
    #[arg(long)]
    temperature: Option<f64>,
    /// greedy or sampled.
    #[arg(long)]
    decoding: Option<String>,
    #[arg(long)]
    max_new_tokens: Option<i64>,
    #[arg(long)]
    generation_seed: Option<u64>,
    /// mock or http.
    #[arg(long)]
    backend: Option<String>,
    /// Mock backend script (JSON Lines of fingerprint and response).
    #[arg(long)]
    script: Option<String>,
    /// none, shuffle or noise.
    #[arg(long)]
    perturbation: Option<String>,
    #[arg(long)]
    noise_count: Option<i64>,
    #[arg(long)]
    fraction_mode: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    parallelism: Option<i64>,
    /// none, misleading or mixed.
    #[arg(long)]
    corruption: Option<String>,
    #[arg(long)]
    train_task: Option<String>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            corpus: self.corpus.clone(),
            dataset: self.dataset.clone(),
            family: self.family.clone(),
            top_k: self.top_k,
            temperature: self.temperature,
            decoding: self.decoding.clone(),
            max_new_tokens: self.max_new_tokens,
            generation_seed: self.generation_seed,
            backend: self.backend.clone(),
            script: self.script.clone(),
            perturbation: self.perturbation.clone(),
            noise_count: self.noise_count,
            fraction_mode: self.fraction_mode,
            perturbation_seed: self.seed,
            parallelism: self.parallelism,
            corruption: self.corruption.clone(),
            train_task: self.train_task.clone(),
        }
    }

    fn load(&self) -> Result<config::RunConfig, ConfigError> {
        config::load(self.config.as_deref(), &self.overrides(), self.output_dir.as_deref())
    }
}

fn validate(common: &Common) -> Result<String, CliError> {
    match common.load() {
        Ok(cfg) => {
            let out = serde_json::json!({
                "valid": true,
                "config_fingerprint": cfg.fingerprint(),
                "config": cfg,
            });
            Ok(format!("{}\n", serde_json::to_string_pretty(&out).expect("json")))
        }
        Err(ConfigError::Invalid(issues)) => {
            let out = serde_json::json!({ "valid": false, "errors": issues });
            println!("{}", serde_json::to_string_pretty(&out).expect("json"));
            Err(CliError::new(
                Category::Config,
                format!("{} problems found", issues.len()),
            ))
        }
        Err(e) => Err(e.into()),
    }
}

fn dispatch(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Validate(c) => validate(&c),
        Command::Index(c) => commands::index(&c.load()?),
        Command::Retrieve(c) => commands::retrieve(&c.load()?),
        Command::Eval(c) => commands::eval(&c.load()?),
        Command::PerturbEval(c) => commands::perturb_eval(&c.load()?),
        Command::GenDemos { common, replay } => commands::gen_demos(&common.load()?, replay.as_deref()),
        Command::Filter(w) => commands::filter(&w.common.load()?, w.input.as_deref()),
        Command::Export(w) => commands::export(&w.common.load()?, w.input.as_deref()),
        Command::Funnel(w) => commands::funnel(&w.common.load()?, w.input.as_deref()),
        Command::Matrix { common, reports } => commands::matrix(&common.load()?, &reports),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("crag: {e}");
            ExitCode::from(e.category.exit_code() as u8)
        }
    }
}
