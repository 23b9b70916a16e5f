use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use ffconv::config::{ExperimentConfig, InferenceMode};
use ffconv::experiment;

#[derive(Parser)]
#[command(name = "ffconv", version, about = "Forward-Forward convolutional networks on MNIST")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train an FF network and write metrics, checkpoint and test results.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint; defaults to `<out>/model.ffcnn`.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Overrides `inference_mode` from the config.
        #[arg(long)]
        mode: Option<InferenceMode>,
    },
    /// Class activation maps for one test image.
    Cam {
        #[command(flatten)]
        common: Common,
        /// Checkpoint; defaults to `<out>/model.ffcnn`.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Index into the MNIST test set.
        #[arg(long, default_value_t = 0)]
        image_index: usize,
        /// Target class; defaults to the classifier's prediction.
        #[arg(long)]
        class: Option<usize>,
        /// Layers to map (1-based, comma separated); defaults to 2..=L.
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<usize>>,
    },
    /// Train every cell of the `sweep.*` grid.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Train FF and BP side by side for each `sweep.filters` width.
    Compare {
        #[command(flatten)]
        common: Common,
    },
}

fn model_path(model: &Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    model.clone().unwrap_or_else(|| cfg.out_dir.join(experiment::MODEL_FILE))
}

fn show(path: &Path) -> String {
    path.display().to_string()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common } => {
            let cfg = common.load()?;
            let report = experiment::run_train(&cfg).context("training failed")?;
            println!(
                "test accuracy: classifier {:.2}%  goodness {:.2}%  ({})",
                report.test_accuracy(InferenceMode::Classifier),
                report.test_accuracy(InferenceMode::Goodness),
                show(&report.out_dir)
            );
        }
        Command::Eval { common, model, mode } => {
            let cfg = common.load()?;
            let model = model_path(&model, &cfg);
            let mode = mode.unwrap_or(cfg.inference_mode);
            let e = experiment::run_eval(&model, &cfg, mode, &cfg.out_dir)
                .with_context(|| format!("evaluating {}", show(&model)))?;
            println!("{} accuracy: {:.2}%", mode.as_str(), e.accuracy);
        }
        Command::Cam {
            common,
            model,
            image_index,
            class,
            layers,
        } => {
            let cfg = common.load()?;
            let model = model_path(&model, &cfg);
            let r = experiment::run_cam(
                &model,
                &cfg,
                image_index,
                class,
                layers.as_deref(),
                &cfg.out_dir,
            )
            .with_context(|| format!("CAM from {}", show(&model)))?;
            println!(
                "image {} (label {}, predicted {}): maps for class {}",
                r.image_index, r.label, r.predicted, r.class
            );
            for f in &r.files {
                println!("  {}", show(f));
            }
        }
        Command::Sweep { common } => {
            let cfg = common.load()?;
            let cells = experiment::run_sweep(&cfg).context("sweep failed")?;
            for c in &cells {
                println!(
                    "cell {:>3}  val {:.2}% / {:.2}%  test {:.2}% / {:.2}%  (classifier / goodness)",
                    c.index, c.val_classifier, c.val_goodness, c.test_classifier, c.test_goodness
                );
            }
            println!("{}", show(&cfg.out_dir.join(experiment::SWEEP_FILE)));
        }
        Command::Compare { common } => {
            let cfg = common.load()?;
            let rows = experiment::run_compare(&cfg).context("comparison failed")?;
            println!("filters    FF classifier  FF goodness  BP   (test %)");
            for r in &rows {
                let f: Vec<String> = r.filters.iter().map(|f| f.to_string()).collect();
                println!(
                    "{:<10} {:>13.2} {:>12.2} {:>5.2}",
                    f.join("/"),
                    r.ff_test_classifier,
                    r.ff_test_goodness,
                    r.bp_test
                );
            }
            println!("{}", show(&cfg.out_dir.join(experiment::COMPARE_FILE)));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
