use std::net::SocketAddr;
use std::path::PathBuf;

use act_core::backends::CriticismStrategy;
use act_core::data::AnnotationStrategy;
use act_core::pipeline::Stage;
use act_core::sampling::{Budget, DrawMode};
use act_core::trainer::synthetic::GapExperimentConfig;
use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "act", version, about = "Machine annotation with criticism and budgeted human review")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Label every item of a data set.
    Annotate {
        #[arg(long)]
        dataset: PathBuf,
        /// Backend TOML; the default simulator when omitted.
        #[arg(long)]
        backend: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "naive")]
        strategy: AnnotationArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        parallelism: usize,
    },
    /// Estimate the error probability of every machine label.
    Criticize {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        backend: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "naive")]
        strategy: CriticismArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        parallelism: usize,
    },
    /// Choose items for review from criticisms.
    Sample {
        #[arg(long)]
        criticisms: PathBuf,
        #[command(flatten)]
        rule: RuleArgs,
        #[command(flatten)]
        budget: BudgetArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "hard-cap")]
        mode: ModeArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run or resume a full pipeline from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Stop once this stage has been recorded.
        #[arg(long, value_enum)]
        stop_after: Option<StageArg>,
    },
    /// Human review: serve the API or import reviews.
    Review {
        #[command(subcommand)]
        command: ReviewCommand,
    },
    /// Write the corrected data and metrics of a finished run.
    Export {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        run: String,
    },
    /// Machine quality and budget-curve area for a criticizer.
    Metrics {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        criticisms: PathBuf,
        #[command(flatten)]
        rule: RuleArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the `b,B,AQG` curve here.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Train a softmax model on a corrected run.
    Train {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        run: String,
        /// TOML with `objective`, optional `embeddings` and `[optimizer]`.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter-gap experiment on synthetic softmax data.
    GapExperiment {
        /// TOML overriding the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<u64>,
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        rules: Option<Vec<String>>,
        #[arg(long, default_value_t = 10.0)]
        beta: f64,
        #[arg(long)]
        proportion: Option<f64>,
        /// Per-trial CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ReviewCommand {
    /// Start the HTTP API, optionally serving console assets.
    Serve {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
    },
    /// Apply reviews from a JSONL file.
    Import {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        run: String,
        #[arg(long)]
        file: PathBuf,
    },
}

#[derive(Args)]
struct RuleArgs {
    #[arg(long, default_value = "threshold")]
    rule: String,
    #[arg(long, default_value_t = 10.0)]
    beta: f64,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct BudgetArgs {
    /// Number of items to review.
    #[arg(long)]
    budget: Option<usize>,
    /// Share of the data set to review.
    #[arg(long)]
    proportion: Option<f64>,
}

impl BudgetArgs {
    fn budget(&self) -> Budget {
        match (self.budget, self.proportion) {
            (Some(b), _) => Budget::Count(b),
            (None, Some(p)) => Budget::Proportion(p),
            (None, None) => unreachable!("clap requires one"),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AnnotationArg {
    Naive,
    Cot,
}

#[derive(Clone, Copy, ValueEnum)]
enum CriticismArg {
    Naive,
    Cot,
    Mc,
    Devil,
    NaiveLogit,
    CotLogit,
    CotPpl,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    HardCap,
    Expectation,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Annotated,
    Criticized,
    Sampled,
    Reviewing,
    Corrected,
}

impl From<AnnotationArg> for AnnotationStrategy {
    fn from(a: AnnotationArg) -> Self {
        match a {
            AnnotationArg::Naive => AnnotationStrategy::Naive,
            AnnotationArg::Cot => AnnotationStrategy::Cot,
        }
    }
}

impl From<CriticismArg> for CriticismStrategy {
    fn from(a: CriticismArg) -> Self {
        match a {
            CriticismArg::Naive => CriticismStrategy::Naive,
            CriticismArg::Cot => CriticismStrategy::Cot,
            CriticismArg::Mc => CriticismStrategy::Mc,
            CriticismArg::Devil => CriticismStrategy::Devil,
            CriticismArg::NaiveLogit => CriticismStrategy::NaiveLogit,
            CriticismArg::CotLogit => CriticismStrategy::CotLogit,
            CriticismArg::CotPpl => CriticismStrategy::CotPpl,
        }
    }
}

impl From<ModeArg> for DrawMode {
    fn from(a: ModeArg) -> Self {
        match a {
            ModeArg::HardCap => DrawMode::HardCap,
            ModeArg::Expectation => DrawMode::Expectation,
        }
    }
}

impl From<StageArg> for Stage {
    fn from(a: StageArg) -> Self {
        match a {
            StageArg::Annotated => Stage::Annotated,
            StageArg::Criticized => Stage::Criticized,
            StageArg::Sampled => Stage::Sampled,
            StageArg::Reviewing => Stage::Reviewing,
            StageArg::Corrected => Stage::Corrected,
        }
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_or_print<T: Serialize>(value: &T, out: Option<&PathBuf>) -> Result<()> {
    match out {
        Some(path) => {
            let text = serde_json::to_string_pretty(value)? + "\n";
            std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
        }
        None => print_json(value),
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Annotate {
            dataset,
            backend,
            strategy,
            out,
            parallelism,
        } => {
            let unparsed = act_cli::annotate(&dataset, backend.as_deref(), strategy.into(), &out, parallelism)?;
            eprintln!("wrote {} ({unparsed} unparsed)", out.display());
        }
        Command::Criticize {
            dataset,
            annotations,
            backend,
            strategy,
            out,
            parallelism,
        } => {
            let unparsed = act_cli::criticize(
                &dataset,
                &annotations,
                backend.as_deref(),
                strategy.into(),
                &out,
                parallelism,
            )?;
            eprintln!("wrote {} ({unparsed} unparsed)", out.display());
        }
        Command::Sample {
            criticisms,
            rule,
            budget,
            seed,
            mode,
            out,
        } => {
            let rule = act_cli::parse_rule(&rule.rule, rule.beta)?;
            let plan = act_cli::sample(&criticisms, rule, budget.budget(), seed, mode.into())?;
            eprintln!("{} of {} items selected", plan.reviewed(), plan.len());
            write_or_print(&plan, out.as_ref())?;
        }
        Command::Run { config, stop_after } => {
            let (dir, state) = act_cli::run(&config, stop_after.map(Into::into))?;
            eprintln!("run directory: {}", dir.display());
            print_json(&state)?;
        }
        Command::Review { command } => match command {
            ReviewCommand::Serve { runs, addr, static_dir } => {
                let rt = tokio::runtime::Runtime::new()?;
                rt.block_on(act_cli::server::serve(runs, addr, static_dir))?;
            }
            ReviewCommand::Import { runs, run, file } => {
                print_json(&act_cli::import_reviews(&runs, &run, &file)?)?;
            }
        },
        Command::Export { runs, run } => {
            let bundle = act_cli::export(&runs, &run)?;
            eprintln!("exported to {}", bundle.dir.display());
            print_json(&bundle.metrics)?;
        }
        Command::Metrics {
            dataset,
            annotations,
            criticisms,
            rule,
            seed,
            curve,
        } => {
            let rule = act_cli::parse_rule(&rule.rule, rule.beta)?;
            let report = act_cli::metrics(&dataset, &annotations, &criticisms, rule, seed, curve.as_deref())?;
            print_json(&report)?;
        }
        Command::Train { runs, run, config, out } => {
            let report = act_cli::train(&runs, &run, &config)?;
            eprintln!(
                "{} steps, final objective {:.6}",
                report.steps,
                report.objective.last().copied().unwrap_or(f64::NAN)
            );
            write_or_print(&report.params, out.as_ref())?;
        }
        Command::GapExperiment {
            config,
            seeds,
            sizes,
            rules,
            beta,
            proportion,
            out,
        } => {
            let mut cfg = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
                }
                None => GapExperimentConfig::default(),
            };
            if let Some(n) = seeds {
                cfg.seeds = (0..n).collect();
            }
            if let Some(sizes) = sizes {
                cfg.sizes = sizes;
            }
            if let Some(rules) = rules {
                cfg.rules = rules
                    .iter()
                    .map(|r| act_cli::parse_rule(r, beta))
                    .collect::<Result<_>>()?;
            }
            if let Some(p) = proportion {
                cfg.budget_proportion = p;
            }
            print_json(&act_cli::gap_experiment(&cfg, out.as_deref())?)?;
        }
    }
    Ok(())
}
