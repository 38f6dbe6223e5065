//! `har`: run the recitation, filter and selection stages, score datasets
//! and predictions, and inspect manifests.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use har_core::corpus::{load_manifest, SourceFormat};
use har_core::filters::FilterMode;
use har_core::metrics::MetricNormalizationRules;
use har_core::pipeline::{
    format_stats, interpolate_env, run_quality, run_score, ConfigOverrides, EvalDataset, Pipeline, PipelineConfig,
    PipelineError, ScorerConfig, DATASET_FILE, MANIFEST_FILE,
};
use har_core::quality::Aggregation;

#[derive(Parser)]
#[command(name = "har", version, about = "Counterfactual open-book QA dataset construction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Pipeline config (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<FilterMode>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    max_inflight: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample k recitations per question.
    Generate(RunArgs),
    /// Run the surface, factuality and attribution filters.
    Filter(RunArgs),
    /// Keep the best-attributed survivor per question.
    Select(RunArgs),
    /// generate, filter and select in one go.
    Pipeline(RunArgs),
    /// NLI quality report over a counterfactual dataset.
    Quality {
        /// Pipeline config; its quality section supplies the scorer and its
        /// output directory the default dataset.
        #[arg(long, required_unless_present = "scorer")]
        config: Option<PathBuf>,
        /// Standalone scorer config (JSON), instead of the pipeline config.
        #[arg(long, conflicts_with = "config")]
        scorer: Option<PathBuf>,
        #[arg(long, required_unless_present = "config")]
        dataset: Option<PathBuf>,
        /// Also report the fraction of examples scoring above this value.
        #[arg(long)]
        fraction_above: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// F1/EM of prediction files against evaluation datasets.
    Score {
        /// `PATH` or `NAME=PATH`; repeatable.
        #[arg(long = "dataset", required = true)]
        datasets: Vec<String>,
        #[arg(long, default_value = "triviaqa-mrqa")]
        format: SourceFormat,
        /// JSONL of `{"qid", "answer"}`; repeatable.
        #[arg(long = "predictions", required = true)]
        predictions: Vec<PathBuf>,
        /// Dataset names averaged into the OOD column.
        #[arg(long, value_delimiter = ',')]
        ood: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the stage counts of a manifest.
    Stats {
        #[arg(long, required_unless_present = "manifest")]
        config: Option<PathBuf>,
        #[arg(long, conflicts_with = "config")]
        manifest: Option<PathBuf>,
    },
}

fn load_config(args: &RunArgs) -> Result<PipelineConfig, PipelineError> {
    let mut config = PipelineConfig::load(&args.config)?;
    config.apply(&ConfigOverrides {
        seed: args.seed,
        mode: args.mode,
        cache_dir: args.cache_dir.clone(),
        max_inflight: args.max_inflight,
    });
    Ok(config)
}

fn pipeline(args: &RunArgs) -> Result<Pipeline, PipelineError> {
    Pipeline::from_config(load_config(args)?)
}

fn load_scorer_config(path: &Path) -> Result<ScorerConfig, PipelineError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
    interpolate_env(&mut value)?;
    let mut scorer: ScorerConfig =
        serde_json::from_value(value).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
    if let ScorerConfig::Mock { fixture, .. } = &mut scorer {
        if fixture.is_relative() {
            *fixture = path.parent().unwrap_or(Path::new(".")).join(&*fixture);
        }
    }
    Ok(scorer)
}

fn run(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::Generate(args) => {
            let s = pipeline(&args)?.run_generate()?;
            println!("{} questions, {} candidates, {} parsed", s.questions, s.candidates, s.parsed);
        }
        Command::Filter(args) => {
            let s = pipeline(&args)?.run_filter()?;
            println!(
                "post_surface {}, post_factuality {}, post_attribution {} ({} verdict errors)",
                s.post_surface, s.post_factuality, s.post_attribution, s.verdict_errors
            );
        }
        Command::Select(args) => {
            let p = pipeline(&args)?;
            let records = p.run_select()?;
            println!("{} records -> {}", records.len(), p.path(DATASET_FILE).display());
        }
        Command::Pipeline(args) => {
            let p = pipeline(&args)?;
            let records = p.run_pipeline()?;
            println!("{} records -> {}", records.len(), p.path(DATASET_FILE).display());
        }
        Command::Quality {
            config,
            scorer,
            dataset,
            fraction_above,
            out,
        } => {
            let (scorer_config, mut aggregation, default_dataset) = match (config, scorer) {
                (Some(c), _) => {
                    let c = PipelineConfig::load(c)?;
                    let scorer = c.quality.scorer.clone().ok_or_else(|| {
                        PipelineError::Config("config has no quality.scorer section".into())
                    })?;
                    (scorer, c.quality.aggregation, Some(c.output_dir.join(DATASET_FILE)))
                }
                (None, Some(s)) => (load_scorer_config(&s)?, Aggregation::Mean, None),
                (None, None) => unreachable!("clap requires one of --config and --scorer"),
            };
            if let Some(tau) = fraction_above {
                aggregation = Aggregation::FractionAbove { tau };
            }
            let dataset = dataset
                .or(default_dataset)
                .expect("clap requires --dataset without --config");
            let scorer = scorer_config.build()?;
            let r = run_quality(&dataset, scorer.as_ref(), aggregation, out.as_deref())?;
            println!(
                "n {}  skipped {}  attribution {:.4}  counterfactuality {:.4}",
                r.n, r.skipped, r.attribution_mean, r.counterfactuality_mean
            );
            if let (Some(tau), Some(a), Some(c)) =
                (r.tau, r.attribution_fraction_above, r.counterfactuality_fraction_above)
            {
                println!("above {tau}: attribution {a:.4}  counterfactuality {c:.4}");
            }
        }
        Command::Score {
            datasets,
            format,
            predictions,
            ood,
            out,
        } => {
            let datasets: Vec<EvalDataset> = datasets
                .iter()
                .map(|d| match d.split_once('=') {
                    Some((name, path)) => EvalDataset {
                        name: Some(name.to_string()),
                        path: path.into(),
                        format,
                    },
                    None => EvalDataset {
                        name: None,
                        path: d.into(),
                        format,
                    },
                })
                .collect();
            let rules = MetricNormalizationRules::default();
            let report = run_score(&datasets, &predictions, &ood, &rules, out.as_deref())?;
            print!("{}", report.to_table());
        }
        Command::Stats { config, manifest } => {
            let path = match (config, manifest) {
                (_, Some(m)) => m,
                (Some(c), None) => PipelineConfig::load(c)?.output_dir.join(MANIFEST_FILE),
                (None, None) => unreachable!("clap requires one of --config and --manifest"),
            };
            print!("{}", format_stats(&load_manifest(&path)?));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
