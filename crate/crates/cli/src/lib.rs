//! Command-line front end for the attack engine.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use rlab_core::io;
use rlab_core::metrics::MceMode;
use rlab_core::target::LabeledImage;

use crate::config::{AttackMode, RunConfig, TargetConfig};
use crate::error::CliError;

pub const TARGET_URL_ENV: &str = "RLAB_TARGET_URL";

#[derive(Debug, Parser)]
#[command(
    name = "rlab",
    version,
    about = "Patch-level black-box adversarial attacks"
)]
pub struct Cli {
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags that override keys of the JSON config.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// JSON run config; flags take precedence over its keys.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Base URL of a classify server. Falls back to RLAB_TARGET_URL when no
    /// target is given anywhere else.
    #[arg(long, global = true, value_name = "URL", conflicts_with = "weights")]
    pub target_url: Option<String>,
    /// Reference-model weights to attack in process.
    #[arg(long, global = true, value_name = "PATH")]
    pub weights: Option<PathBuf>,
    /// Active filter by name; repeat for several.
    #[arg(long = "filter", global = true, value_name = "NAME")]
    pub filters: Vec<String>,
    #[arg(long, global = true, value_name = "N")]
    pub patch_size: Option<usize>,
    #[arg(long, global = true, value_name = "N")]
    pub budget: Option<usize>,
    /// Attack towards this class instead of away from the true one.
    #[arg(long, global = true, value_name = "CLASS")]
    pub targeted: Option<usize>,
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_name = "N")]
    pub workers: Option<usize>,
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Agent checkpoint steering `attack`.
    #[arg(long, global = true, value_name = "PATH")]
    pub agent: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Attack images or dataset directories.
    Attack {
        #[arg(required = true, value_name = "INPUT")]
        inputs: Vec<PathBuf>,
        /// True class of single-file inputs.
        #[arg(long)]
        label: Option<usize>,
    },
    /// Train an agent on a dataset directory.
    TrainAgent {
        #[arg(value_name = "DATASET")]
        dataset: PathBuf,
        #[arg(long)]
        passes: Option<usize>,
    },
    /// uCE, mCE and degradation error from a corruption error matrix.
    EvalRobustness {
        #[arg(value_name = "MATRIX_CSV")]
        matrix: PathBuf,
        #[arg(long)]
        clean_error: f64,
        /// Sum uCE over the first five corruptions instead of averaging
        /// over all of them.
        #[arg(long)]
        literal_eq5: bool,
    },
    /// Match every filter's per-patch L2 impact to the gaussian noise filter.
    Calibrate {
        #[arg(required = true, value_name = "REFERENCE")]
        references: Vec<PathBuf>,
    },
    /// Per-patch sensitivity of one image as CSV.
    SensitivityReport {
        #[arg(value_name = "IMAGE")]
        image: PathBuf,
        #[arg(long)]
        label: Option<usize>,
    },
    /// Write the bundled toy victim and its images.
    MakeFixture,
}

/// Config file (or defaults), then flags, then the environment fallback for
/// the target.
pub fn resolve_config(o: &Overrides, env_url: Option<String>) -> Result<RunConfig, CliError> {
    let mut c = match &o.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(url) = &o.target_url {
        c.target = Some(TargetConfig::Url(url.clone()));
    }
    if let Some(path) = &o.weights {
        c.target = Some(TargetConfig::Weights(path.clone()));
    }
    if c.target.is_none() {
        c.target = env_url.filter(|u| !u.is_empty()).map(TargetConfig::Url);
    }
    if !o.filters.is_empty() {
        c.active_filters = Some(o.filters.clone());
    }
    if let Some(v) = o.patch_size {
        c.patch_size = v;
    }
    if let Some(v) = o.budget {
        c.budget = v;
    }
    if let Some(class) = o.targeted {
        c.mode = AttackMode::Targeted { class };
    }
    if let Some(v) = o.seed {
        c.seed = v;
    }
    if let Some(v) = o.workers {
        c.workers = v;
    }
    if let Some(v) = &o.out {
        c.output = v.clone();
    }
    if let Some(v) = &o.agent {
        c.agent_checkpoint = Some(v.clone());
    }
    Ok(c)
}

/// Runs one command and returns the process exit code.
pub fn run(cli: Cli) -> Result<i32, CliError> {
    let mut config = resolve_config(&cli.overrides, std::env::var(TARGET_URL_ENV).ok())?;
    match cli.command {
        Command::Attack { inputs, label } => {
            let clf = commands::connect(&config)?;
            let inputs = commands::load_inputs(&inputs, label, &clf)?;
            let report = commands::cmd_attack(&config, &inputs, &clf)?;
            match &report.summary.summary {
                Some(s) => println!(
                    "{} attempted, {} succeeded, {} skipped; asr {:.4}; results in {}",
                    s.successes + s.failures,
                    s.successes,
                    s.skips,
                    s.asr,
                    config.output.display()
                ),
                None => println!(
                    "all {} inputs skipped (already misclassified); results in {}",
                    report.summary.skips,
                    config.output.display()
                ),
            }
            Ok(if report.all_succeeded() { 0 } else { 4 })
        }
        Command::TrainAgent { dataset, passes } => {
            if let Some(p) = passes {
                config.train_passes = p;
            }
            let clf = commands::connect(&config)?;
            let r = commands::cmd_train_agent(&config, &dataset, &clf)?;
            println!(
                "trained on {} images over {} episodes ({} held out); checkpoint in {}",
                r.train.len(),
                r.log.episodes.len(),
                r.heldout.len(),
                config.output.display()
            );
            Ok(0)
        }
        Command::EvalRobustness {
            matrix,
            clean_error,
            literal_eq5,
        } => {
            let mode = if literal_eq5 {
                MceMode::SumFirstFive
            } else {
                MceMode::Mean
            };
            let out = cli.overrides.out.as_deref();
            let report = commands::cmd_eval_robustness(&matrix, clean_error, mode, out)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&report).expect("report serializes")
            );
            Ok(0)
        }
        Command::Calibrate { references } => {
            let images = references
                .iter()
                .map(io::read_image)
                .collect::<Result<Vec<_>, _>>()?;
            let report = commands::cmd_calibrate(&config, &images)?;
            for e in &report.entries {
                println!(
                    "{}: scale {} (delta L2 {:.6}, target {:.6})",
                    e.filter, e.calibration_scale, e.measured, e.target
                );
            }
            Ok(0)
        }
        Command::SensitivityReport { image, label } => {
            let clf = commands::connect(&config)?;
            let image = io::read_image(&image)?;
            let label = match label {
                Some(l) => l,
                None => rlab_core::target::top_label(&clf.classify(&image)?)?,
            };
            let csv =
                commands::cmd_sensitivity_report(&config, &LabeledImage { image, label }, &clf)?;
            print!("{csv}");
            Ok(0)
        }
        Command::MakeFixture => {
            commands::cmd_make_fixture(&config.output, config.seed)?;
            println!("fixture written to {}", config.output.display());
            Ok(0)
        }
    }
}
