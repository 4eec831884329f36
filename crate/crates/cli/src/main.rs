use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use seqft::data::{save_weights, SyntheticSpec};
use seqft::evaluation::render_table;
use seqft::harness::{
    cmd_evaluate, cmd_experiment, cmd_pretrain, cmd_schedule_preview, DataSource, ExperimentConfig, PretrainConfig,
    PretrainSource,
};
use seqft::model::{build_densenet_lite, DenseNetConfig};
use seqft::scheduler::FineTuneMode;
use seqft::Error;

#[derive(Parser, Debug)]
#[command(name = "seqft", version, about = "Sequential fine-tuning experiments on small DenseNets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network from scratch on a synthetic source task and save its weights.
    Pretrain(PretrainArgs),
    /// Run the two-fold cross-validated comparison of fine-tuning modes.
    Experiment(ExperimentArgs),
    /// Print the unfreeze timeline of a schedule.
    SchedulePreview(PreviewArgs),
    /// Recompute metrics from a saved predictions file.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// Source task, e.g. `source-task` or `source-task;noise=0.2`.
    #[arg(long, default_value = "source-task")]
    synthetic: SyntheticSpec,
    #[arg(long, default_value_t = 15)]
    epochs: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    data_seed: u64,
    /// Output weights file.
    #[arg(long)]
    weights: PathBuf,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    /// JSON experiment config (for example the `config` field of a manifest).
    /// Other flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset index file.
    #[arg(long, conflicts_with = "synthetic")]
    data_index: Option<PathBuf>,
    /// Synthetic target task, e.g. `high-separability;noise=0.2`.
    #[arg(long)]
    synthetic: Option<SyntheticSpec>,
    #[arg(long)]
    data_seed: Option<u64>,
    /// Pretrained weights; without it the source task is pretrained inline.
    #[arg(long, conflicts_with = "random_init")]
    weights: Option<PathBuf>,
    /// Start from a randomly initialized network instead of pretrained weights.
    #[arg(long)]
    random_init: bool,
    /// Modes to run (repeatable or comma separated): FT_ALL, FT_FC, SFT.
    #[arg(long, value_delimiter = ',')]
    mode: Vec<FineTuneMode>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    step_epochs: Option<usize>,
    #[arg(long)]
    unfreeze_per_step: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PreviewArgs {
    #[arg(long)]
    epochs: usize,
    #[arg(long, default_value_t = 2)]
    step_epochs: usize,
    #[arg(long, default_value_t = 1)]
    unfreeze_per_step: usize,
    /// Number of layer groups; defaults to the default network's count.
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long, default_value = "SFT")]
    mode: FineTuneMode,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Predictions CSV written by `experiment`.
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long, default_value = "SFT")]
    mode: FineTuneMode,
    #[arg(long, value_delimiter = ',', default_value = "normal,tb,cancer")]
    classes: Vec<String>,
    /// Directory for `report_<mode>.json`; only the table is printed when absent.
    #[arg(long)]
    out_dir: Option<PathBuf>,
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
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_configuration() { 1 } else { 2 })
        }
    }
}

fn run(cli: Cli) -> seqft::Result<ExitCode> {
    match cli.command {
        Command::Pretrain(args) => pretrain(args),
        Command::Experiment(args) => experiment(args),
        Command::SchedulePreview(args) => {
            let groups = match args.groups {
                Some(m) => m,
                None => build_densenet_lite(&DenseNetConfig::default(), 0)?.num_groups(),
            };
            print!(
                "{}",
                cmd_schedule_preview(args.epochs, args.step_epochs, args.unfreeze_per_step, groups, args.mode)?
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Evaluate(args) => {
            let report = cmd_evaluate(&args.predictions, args.mode.label(), &args.classes)?;
            print!("{}", render_table(std::slice::from_ref(&report)));
            if let Some(dir) = args.out_dir {
                std::fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
                let path = dir.join(format!("report_{}.json", args.mode.slug()));
                let text = serde_json::to_string_pretty(&report)? + "\n";
                std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })?;
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn pretrain(args: PretrainArgs) -> seqft::Result<ExitCode> {
    let config = PretrainConfig {
        source: args.synthetic,
        data_seed: args.data_seed,
        epochs: args.epochs,
        seed: args.seed,
        ..PretrainConfig::default()
    };
    let outcome = cmd_pretrain(&config, &DenseNetConfig::default(), None)?;
    save_weights(&outcome.network, &args.weights)?;
    println!(
        "source validation accuracy {:.4} (epoch {}); weights written to {}",
        outcome.validation_accuracy,
        outcome.best_epoch,
        args.weights.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn read_config(path: &Path) -> seqft::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    serde_json::from_str(&text).map_err(|e| Error::Format { path: path.to_path_buf(), detail: e.to_string() })
}

fn experiment(args: ExperimentArgs) -> seqft::Result<ExitCode> {
    let mut config = match &args.config {
        Some(path) => read_config(path)?,
        None => {
            let data = DataSource::Synthetic { spec: SyntheticSpec::high_separability(), seed: 11 };
            ExperimentConfig::new(data, PathBuf::from("results"))
        }
    };
    if let Some(path) = args.data_index {
        config.data = DataSource::Index { path, target_size: Some(config.model.input_size) };
    }
    if let Some(spec) = args.synthetic {
        let seed = args.data_seed.unwrap_or(11);
        config.data = DataSource::Synthetic { spec, seed };
    } else if let (Some(seed), DataSource::Synthetic { seed: s, .. }) = (args.data_seed, &mut config.data) {
        *s = seed;
    }
    if let Some(path) = args.weights {
        config.pretrained = PretrainSource::Weights { path };
    }
    if args.random_init {
        config.pretrained = PretrainSource::Random { seed: args.seed.unwrap_or(config.seed) };
    }
    if !args.mode.is_empty() {
        config.modes = args.mode;
    }
    if let Some(n) = args.epochs {
        config.epochs = n;
    }
    if let Some(x) = args.step_epochs {
        config.step_epochs = x;
    }
    if let Some(s) = args.unfreeze_per_step {
        config.unfreeze_per_step = s;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(dir) = args.out_dir {
        config.out_dir = dir;
    }

    let outcome = cmd_experiment(&config)?;
    print!("{}", render_table(&outcome.reports));
    println!("outputs written to {}", config.out_dir.display());
    if outcome.manifest.failures.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        for (mode, why) in &outcome.manifest.failures {
            eprintln!("error: mode {mode} failed: {why}");
        }
        Ok(ExitCode::from(2))
    }
}
