use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kbt_core::seqmodel::TransformerModel;
use kbt_harness::config::{BaselineScope, ConfigError, ExperimentConfig};
use kbt_harness::experiment::{
    pretrain_model, run_baseline, run_proposed, run_trials, run_uq, transformer_success, RunOutput,
};
use kbt_harness::metrics::{write_csv, MetricsRow};

/// Exit codes. Each failure class has its own code.
mod code {
    pub const CONFIG_UNREADABLE: u8 = 2;
    pub const CONFIG_INVALID: u8 = 3;
    pub const CHECKPOINT: u8 = 4;
    pub const RUN: u8 = 5;
    pub const OUTPUT: u8 = 6;
    pub const USAGE: u8 = 64;
}

#[derive(Parser)]
#[command(name = "kbt", version, about = "Sequential Bayesian head fine-tuning experiments on a shifted cart-pole")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured checkpoint path.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the transformer on nominal LQR data, save the checkpoint and
    /// write the training set as CSV.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sequential Bayesian fine-tuning of the head on the shifted plant.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Warm-started gradient retraining with bounded memory.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Run only this memory capacity instead of the configured list.
        #[arg(long)]
        capacity: Option<usize>,
        /// `head` or `full`; overrides the configured scope.
        #[arg(long)]
        scope: Option<String>,
    },
    /// Predicted variance under increasing data noise.
    Uq {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Success rate of the pretrained model on both plants.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl std::fmt::Display) -> Self {
        Self { code, message: message.to_string() }
    }
}

fn run_failure(e: kbt_core::Error) -> Failure {
    Failure::new(code::RUN, e)
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::from_file(&common.config).map_err(|e| match e {
        ConfigError::Unreadable { .. } => Failure::new(code::CONFIG_UNREADABLE, e),
        _ => Failure::new(code::CONFIG_INVALID, e),
    })?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(p) = &common.checkpoint {
        cfg.checkpoint = p.clone();
    }
    Ok(cfg)
}

fn load_model(cfg: &ExperimentConfig) -> Result<TransformerModel, Failure> {
    let model = TransformerModel::load(&cfg.checkpoint)
        .map_err(|e| Failure::new(code::CHECKPOINT, format!("checkpoint {}: {e}", cfg.checkpoint.display())))?;
    if model.config != cfg.transformer_config() {
        return Err(Failure::new(
            code::CHECKPOINT,
            format!("checkpoint {} does not match the configured architecture", cfg.checkpoint.display()),
        ));
    }
    Ok(model)
}

fn write_rows(path: &Path, rows: &[MetricsRow]) -> Result<(), Failure> {
    let file =
        std::fs::File::create(path).map_err(|e| Failure::new(code::OUTPUT, format!("{}: {e}", path.display())))?;
    write_csv(rows, std::io::BufWriter::new(file))
        .map_err(|e| Failure::new(code::OUTPUT, format!("{}: {e}", path.display())))
}

fn summarize(label: &str, runs: &[RunOutput]) {
    let finals: Vec<f64> = runs.iter().filter_map(|r| r.success_series().last().copied()).collect();
    let mean_final = finals.iter().sum::<f64>() / finals.len().max(1) as f64;
    let mean_time = runs.iter().map(RunOutput::mean_time).sum::<f64>() / runs.len().max(1) as f64;
    println!(
        "{label}: final success {mean_final:.3} (mean over {} trials), {:.3e} s per sample",
        runs.len(),
        mean_time
    );
}

fn execute(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Pretrain { common, out } => {
            let cfg = load_config(&common)?;
            let outcome = pretrain_model(&cfg).map_err(run_failure)?;
            outcome
                .model
                .save(&cfg.checkpoint)
                .map_err(|e| Failure::new(code::OUTPUT, format!("{}: {e}", cfg.checkpoint.display())))?;
            outcome.train.save(&out).map_err(|e| Failure::new(code::OUTPUT, format!("{}: {e}", out.display())))?;
            println!(
                "held-out accuracy {:.3}; success nominal {:.2}, shifted {:.2}; final loss {:.4}",
                outcome.heldout_accuracy,
                outcome.nominal_success,
                outcome.shifted_success,
                outcome.epoch_loss.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Finetune { common, out } => {
            let cfg = load_config(&common)?;
            let model = load_model(&cfg)?;
            let runs = run_trials(cfg.trials, |t| run_proposed(&cfg, &model, t)).map_err(run_failure)?;
            summarize("proposed", &runs);
            let rows: Vec<MetricsRow> = runs.into_iter().flat_map(|r| r.rows).collect();
            write_rows(&out, &rows)?;
        }
        Command::Baseline { common, out, capacity, scope } => {
            let mut cfg = load_config(&common)?;
            match scope.as_deref() {
                None => {}
                Some("head") => cfg.baseline_scope = BaselineScope::Head,
                Some("full") => cfg.baseline_scope = BaselineScope::Full,
                Some(other) => return Err(Failure::new(code::USAGE, format!("unknown scope `{other}`"))),
            }
            if let Some(c) = capacity {
                if c == 0 {
                    return Err(Failure::new(code::USAGE, "capacity must be positive"));
                }
                cfg.memory_capacities = vec![c];
            }
            let model = load_model(&cfg)?;
            let mut rows = Vec::new();
            for &cap in &cfg.memory_capacities {
                let runs = run_trials(cfg.trials, |t| run_baseline(&cfg, &model, t, cap)).map_err(run_failure)?;
                summarize(&kbt_harness::experiment::baseline_label(cfg.baseline_scope, cap), &runs);
                rows.extend(runs.into_iter().flat_map(|r| r.rows));
            }
            write_rows(&out, &rows)?;
        }
        Command::Uq { common, out } => {
            let cfg = load_config(&common)?;
            let model = load_model(&cfg)?;
            let runs = run_trials(cfg.uq_runs, |t| run_uq(&cfg, &model, t)).map_err(run_failure)?;
            for (t, r) in runs.iter().enumerate() {
                let parts: Vec<String> = r.converged.iter().map(|(s, v)| format!("σ={s}: {v:.4e}")).collect();
                println!("run {t}: {}", parts.join(", "));
            }
            let rows: Vec<MetricsRow> = runs.into_iter().flat_map(|r| r.rows).collect();
            write_rows(&out, &rows)?;
        }
        Command::Evaluate { common, out } => {
            let cfg = load_config(&common)?;
            let model = load_model(&cfg)?;
            let nominal = transformer_success(&cfg, &model, &cfg.nominal).map_err(run_failure)?;
            let shifted = transformer_success(&cfg, &model, &cfg.shifted).map_err(run_failure)?;
            println!("success rate: nominal {nominal:.2}, shifted {shifted:.2}");
            if let Some(out) = out {
                let row = |m: &str, s: f64| MetricsRow { success_rate: Some(s), ..MetricsRow::new(m, 0, 0) };
                write_rows(&out, &[row("pretrained_nominal", nominal), row("pretrained_shifted", shifted)])?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(code::USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
