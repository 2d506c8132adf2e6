use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use unikd::config::{ExperimentConfig, Mode, Overrides};
use unikd::data::load_splits;
use unikd::metrics::{self, diagnose, eval_top1_checkpoint, load_classifier, KlCheckOptions};
use unikd::trainer::{pretrain_teacher, run_experiment};
use unikd::{Result, UniKdError};

#[derive(Parser)]
#[command(name = "unikd", version, about = "Unified feature and logits distillation")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// CIFAR binary training file; `test.bin` next to it is the validation split.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Subcommand)]
enum Verb {
    /// Train a student and write metrics, checkpoint and report.
    Train(Common),
    /// Top-1 accuracy of a checkpoint on the validation split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out_dir>/best.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Logit-gap CDF and correlation-matrix difference against the teacher.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to `teacher.checkpoint` from the config.
        #[arg(long)]
        teacher_checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        points: usize,
    },
    /// Closed-form KL against Monte-Carlo and the diagonal-reduction identity.
    KlCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        cases: usize,
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
    },
    /// Train the teacher architecture with cross-entropy only.
    PretrainTeacher(Common),
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            mode: self.mode,
            alpha: self.alpha,
            beta: self.beta,
            tau: self.tau,
            out_dir: self.out_dir.clone(),
            dataset: self.dataset.clone(),
            epochs: self.epochs,
        }
    }

    fn load(&self) -> Result<ExperimentConfig> {
        let path = self.config.as_ref().ok_or_else(|| UniKdError::Config("--config is required".into()))?;
        let mut cfg = ExperimentConfig::load(path)?;
        cfg.apply(&self.overrides())?;
        Ok(cfg)
    }
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

/// `Ok(false)` means the command ran but its check failed.
fn run(cli: Cli) -> Result<bool> {
    match cli.verb {
        Verb::Train(c) => {
            print_json(&run_experiment(&c.load()?)?)?;
            Ok(true)
        }
        Verb::PretrainTeacher(c) => {
            print_json(&pretrain_teacher(&c.load()?)?)?;
            Ok(true)
        }
        Verb::Eval { common, checkpoint } => {
            let cfg = common.load()?;
            let path = checkpoint.unwrap_or_else(|| cfg.out_dir().join("best.ckpt"));
            let (_, val) = load_splits(&cfg.dataset)?;
            let top1 = eval_top1_checkpoint(&path, &val, 256)?;
            print_json(&serde_json::json!({ "checkpoint": path, "top1": top1 }))?;
            Ok(true)
        }
        Verb::Diagnose { common, checkpoint, teacher_checkpoint, points } => {
            let cfg = common.load()?;
            let student_path = checkpoint.unwrap_or_else(|| cfg.out_dir().join("best.ckpt"));
            let teacher_path = teacher_checkpoint
                .or_else(|| cfg.teacher.checkpoint.clone())
                .ok_or_else(|| UniKdError::Config("no teacher checkpoint given".into()))?;
            let (_, val) = load_splits(&cfg.dataset)?;
            let teacher = load_classifier(&teacher_path)?;
            let student = load_classifier(&student_path)?;
            let report = diagnose(&teacher, &student, &val, points)?;
            let out = cfg.out_dir();
            std::fs::create_dir_all(&out)?;
            metrics::write_cdf_csv(&out.join("cdf.csv"), &report.cdf_points)?;
            metrics::write_corr_csv(&out.join("corr_diff.csv"), &report.corr_diff)?;
            std::fs::write(out.join("diagnostics.json"), serde_json::to_string_pretty(&report)?)?;
            print_json(&serde_json::json!({
                "top1": report.top1,
                "mean_abs_logit_gap": report.mean_abs_logit_gap,
                "out_dir": out,
            }))?;
            Ok(true)
        }
        Verb::KlCheck { common, cases, samples } => {
            let seed = match &common.config {
                Some(_) => common.load()?.seed,
                None => common.seed.unwrap_or(0),
            };
            let mut opts = KlCheckOptions::new(cases, seed);
            opts.n_samples = samples;
            let summary = metrics::kl_selfcheck(&opts)?;
            for c in &summary.cases {
                println!(
                    "case {:>3} {} k={} closed={:.6e} mc={:.6e} ratio={:.3} reduction={} {}",
                    c.index,
                    c.kind,
                    c.dim,
                    c.closed_form,
                    c.monte_carlo,
                    c.oracle_ratio,
                    c.reduction_deviation.map_or("-".to_string(), |r| format!("{r:.1e}")),
                    if c.passed { "ok" } else { "FAIL" }
                );
            }
            println!(
                "max oracle ratio {:.3}, max reduction deviation {:.1e}: {}",
                summary.max_oracle_ratio,
                summary.max_reduction_deviation,
                if summary.passed { "PASS" } else { "FAIL" }
            );
            Ok(summary.passed)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e @ UniKdError::Config(_)) => {
            error!("{e}");
            ExitCode::from(2)
        }
        Err(e) => {
            error!("{e}");
            ExitCode::from(1)
        }
    }
}
