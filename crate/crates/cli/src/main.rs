use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use xfer::adapt::{Ablation, WeightNorm};
use xfer::meta::MetaOrder;
use xfer_cli::{commands, select_seeds, CliError, LoadedConfig, Run, RunConfig};

#[derive(Parser)]
#[command(name = "xfer", version, about = "Cross-domain transfer for fake-news classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Target domain; overrides the config.
    #[arg(long, global = true)]
    target: Option<String>,
    /// Run a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run the first K configured seeds.
    #[arg(long, global = true, value_name = "K")]
    seeds: Option<usize>,
    /// Leave the target domain out of general-model training.
    #[arg(long, global = true)]
    exclude_target: bool,
    /// `train-general`: `wo-meta` trains the pooled baseline. `adapt`: which
    /// variant to adapt, or `all`.
    #[arg(long, global = true)]
    ablation: Option<AblationArg>,
    #[arg(long, global = true)]
    normalize_weights: Option<NormArg>,
    /// Meta-gradient order.
    #[arg(long, global = true)]
    order: Option<OrderArg>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured synthetic corpora.
    Synth,
    /// Per-domain label counts of the configured datasets.
    IngestStats,
    /// Build the vocabulary and train the general model.
    TrainGeneral,
    /// Train the target-domain masked language model.
    TrainLm,
    /// Score source instances with the target LM.
    Score {
        /// Also write perplexity differences against this target's LM.
        #[arg(long)]
        compare_target: Option<String>,
    },
    /// Adapt to the target domain and evaluate on its test split.
    Adapt,
    /// Re-evaluate every classifier checkpoint of the run.
    Evaluate,
    /// Aggregate metrics over seeds.
    Report,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    Full,
    WoMeta,
    WoSources,
    TargetOnly,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    None,
    Mean1,
}

#[derive(Clone, Copy, ValueEnum)]
enum OrderArg {
    First,
    Second,
}

fn load(cli: &Cli) -> Result<LoadedConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::validation("--config is required"))?;
    let mut cfg = RunConfig::load(path)?;
    let c = &mut cfg.config;
    if let Some(t) = &cli.target {
        c.target = t.clone();
    }
    if cli.exclude_target {
        c.exclude_target = true;
    }
    if let Some(o) = cli.order {
        c.meta.order = match o {
            OrderArg::First => MetaOrder::First,
            OrderArg::Second => MetaOrder::Second,
        };
    }
    if let Some(n) = cli.normalize_weights {
        c.adapt.normalize = match n {
            NormArg::None => WeightNorm::None,
            NormArg::Mean1 => WeightNorm::Mean1,
        };
    }
    c.validate()?;
    Ok(cfg)
}

fn ablations(arg: Option<AblationArg>) -> Vec<Ablation> {
    match arg.unwrap_or(AblationArg::Full) {
        AblationArg::Full => vec![Ablation::Full],
        AblationArg::WoMeta => vec![Ablation::WoMeta],
        AblationArg::WoSources => vec![Ablation::WoSources],
        AblationArg::TargetOnly => vec![Ablation::TargetOnly],
        AblationArg::All => Ablation::ALL.to_vec(),
    }
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let cfg = load(cli)?;
    let target = cfg.config.target.clone();
    let runs = || -> Result<Vec<Run>, CliError> {
        select_seeds(&cfg.config.seeds, cli.seed, cli.seeds)?
            .into_iter()
            .map(|s| Run::open(&cfg, s))
            .collect()
    };
    match &cli.command {
        Command::Synth => {
            for p in commands::synth(&cfg)? {
                println!("wrote {}", p.display());
            }
        }
        Command::IngestStats => print!("{}", commands::ingest_stats(&cfg)?),
        Command::TrainGeneral => {
            let pooled = match cli.ablation {
                None | Some(AblationArg::Full) => false,
                Some(AblationArg::WoMeta) => true,
                Some(_) => {
                    return Err(CliError::validation(
                        "train-general accepts --ablation full or wo-meta only",
                    ))
                }
            };
            for run in runs()? {
                let o = commands::train_general(&run, pooled)?;
                println!(
                    "seed {}: {} ({} iterations, best {})",
                    run.seed,
                    o.checkpoint.display(),
                    o.iterations,
                    o.best_iteration
                );
            }
        }
        Command::TrainLm => {
            for run in runs()? {
                let p = commands::train_lm(&run, &target)?;
                println!("seed {}: {}", run.seed, p.display());
            }
        }
        Command::Score { compare_target } => {
            if let Some(o) = compare_target {
                if !cfg.config.datasets.contains_key(o) {
                    return Err(CliError::validation(format!("unknown domain {o:?}")));
                }
            }
            for run in runs()? {
                let o = commands::score(&run, &target, compare_target.as_deref())?;
                let means: Vec<String> = o.mean_weight.iter().map(|(d, w)| format!("{d}={w:.5}")).collect();
                println!(
                    "seed {}: scored {} source items ({} failed); mean w: {}",
                    run.seed,
                    o.records,
                    o.failures,
                    means.join(" ")
                );
                if let Some(p) = o.dvalues {
                    println!("seed {}: {}", run.seed, p.display());
                }
            }
        }
        Command::Adapt => {
            let norm = cfg.config.adapt.normalize;
            for run in runs()? {
                for a in ablations(cli.ablation) {
                    let o = commands::adapt_eval(&run, &target, a, norm)?;
                    let m = &o.metrics;
                    println!(
                        "seed {} {a}: f1={:.4} acc={:.4} auc={:.4} spauc={:.4} (best epoch {})",
                        run.seed, m.f1, m.acc, m.auc, m.spauc, o.best_epoch
                    );
                }
            }
        }
        Command::Evaluate => {
            for run in runs()? {
                for m in commands::evaluate(&run, &target)? {
                    println!(
                        "seed {} {}: f1={:.4} acc={:.4} auc={:.4} spauc={:.4}",
                        run.seed, m.model, m.f1, m.acc, m.auc, m.spauc
                    );
                }
            }
        }
        Command::Report => {
            let o = commands::report(&cfg, &runs()?)?;
            print!("{}", o.table);
            println!("{} runs summarised in {}", o.runs, o.summary.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
