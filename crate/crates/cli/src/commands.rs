use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use rlab_core::agent::Agent;
use rlab_core::dataset::{read_dataset, write_dataset};
use rlab_core::engine::{
    run_episode, split_dataset, train_agent, ActionPolicy, AttackContext, AttackResult,
    EpisodeState, EpisodeStatus, GreedyPolicy, RandomPolicy, TrainOptions, TrainingLog,
};
use rlab_core::filters::{calibrate_filters, CalibrationReport, FilterRegistry, MaskCache};
use rlab_core::fixture::desk_fixture;
use rlab_core::image::{ImageTensor, PatchGrid};
use rlab_core::io;
use rlab_core::metrics::{
    mce_and_degradation, summarize, AttackSummary, CorruptionErrorMatrix, MceMode, MetricsError,
    RobustnessReport,
};
use rlab_core::seed;
use rlab_core::target::{
    top_label, ClassifierHandle, LabeledImage, ReferenceModel, RemoteClassifier, RemoteOptions,
};

use crate::config::{RunConfig, TargetConfig};
use crate::error::CliError;

/// Reference images drawn per filter when calibrating.
const CALIBRATION_SAMPLES: usize = 64;

pub fn connect(config: &RunConfig) -> Result<ClassifierHandle, CliError> {
    let clf = match &config.target {
        None => {
            return Err(CliError::Config(
                "no target: pass --weights or --target-url".into(),
            ))
        }
        Some(TargetConfig::Weights(path)) => {
            ClassifierHandle::in_process(ReferenceModel::load(path)?)
        }
        Some(TargetConfig::Url(url)) => {
            ClassifierHandle::remote(RemoteClassifier::connect(url, RemoteOptions::default())?)
        }
    };
    config.check_shape(clf.input_shape())?;
    Ok(clf)
}

/// One attack input, named for its output files.
#[derive(Debug, Clone)]
pub struct NamedInput {
    pub name: String,
    pub item: LabeledImage,
}

/// Dataset directories contribute every listed image with its label. Single
/// files take `label`, or the victim's own prediction when it is absent.
pub fn load_inputs(
    inputs: &[PathBuf],
    label: Option<usize>,
    clf: &ClassifierHandle,
) -> Result<Vec<NamedInput>, CliError> {
    let mut out = Vec::new();
    for path in inputs {
        if path.is_dir() {
            for item in read_dataset(path)? {
                out.push(item);
            }
        } else {
            let image = io::read_image(path)?;
            let label = match label {
                Some(l) => l,
                None => top_label(&clf.classify(&image)?)?,
            };
            out.push(LabeledImage { image, label });
        }
    }
    if out.is_empty() {
        return Err(CliError::Config("no input images".into()));
    }
    Ok(out
        .into_iter()
        .enumerate()
        .map(|(i, item)| NamedInput {
            name: format!("img_{i:05}"),
            item,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryFile {
    pub policy: &'static str,
    pub episodes: usize,
    pub skips: usize,
    /// Absent when every episode was skipped.
    pub summary: Option<AttackSummary>,
}

#[derive(Debug)]
pub struct AttackReport {
    pub results: Vec<AttackResult>,
    pub summary: SummaryFile,
}

impl AttackReport {
    /// Every episode that was attempted succeeded.
    pub fn all_succeeded(&self) -> bool {
        self.results
            .iter()
            .all(|r| r.status != EpisodeStatus::Failure)
    }
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Config(e.to_string()))
}

/// Attacks every input, then writes adversarial images, traces and the
/// summary from a single thread.
pub fn cmd_attack(
    config: &RunConfig,
    inputs: &[NamedInput],
    clf: &ClassifierHandle,
) -> Result<AttackReport, CliError> {
    config.validate()?;
    let bank = config.filter_bank()?;
    let engine = config.engine();
    let cache = MaskCache::default();
    let ctx = AttackContext {
        classifier: clf,
        bank: &bank,
        config: &engine,
        cache: Some(&cache),
    };
    let codec = ctx.codec(config.n_max)?;
    let agent = match &config.agent_checkpoint {
        Some(path) => {
            let agent = Agent::load(path)?;
            if agent.codec() != codec || agent.online().input_len() != ctx.state_len() {
                return Err(CliError::Config(format!(
                    "agent {} does not match the filter set or state layout",
                    path.display()
                )));
            }
            Some(agent)
        }
        None => None,
    };
    let root = seed::named(config.seed, "attack");
    let results = thread_pool(config.workers)?.install(|| {
        inputs
            .par_iter()
            .enumerate()
            .map(|(i, input)| {
                let episode_seed = seed::derive(root, &[i as u64]);
                let mut policy: Box<dyn ActionPolicy> = match &agent {
                    Some(agent) => Box::new(GreedyPolicy { agent }),
                    None => Box::new(RandomPolicy::new(episode_seed)),
                };
                let goal = config.mode.goal(input.item.label);
                run_episode(
                    &ctx,
                    &input.item.image,
                    goal,
                    policy.as_mut(),
                    &codec,
                    episode_seed,
                )
            })
            .collect::<Result<Vec<_>, _>>()
    })?;

    let summary = SummaryFile {
        policy: if agent.is_some() { "agent" } else { "random" },
        episodes: results.len(),
        skips: results
            .iter()
            .filter(|r| r.status == EpisodeStatus::Skipped)
            .count(),
        summary: match summarize(&results) {
            Ok(s) => Some(s),
            Err(MetricsError::Empty) => None,
            Err(e) => return Err(e.into()),
        },
    };
    write_attack_outputs(&config.output, inputs, &results, &summary)?;
    Ok(AttackReport { results, summary })
}

fn write_attack_outputs(
    out: &Path,
    inputs: &[NamedInput],
    results: &[AttackResult],
    summary: &SummaryFile,
) -> Result<(), CliError> {
    let adv_dir = out.join("adversarial");
    let trace_dir = out.join("traces");
    create_dir(&adv_dir)?;
    create_dir(&trace_dir)?;
    let mut lines = String::new();
    for (input, result) in inputs.iter().zip(results) {
        #[derive(Serialize)]
        struct Line<'a> {
            name: &'a str,
            #[serde(flatten)]
            result: &'a AttackResult,
        }
        lines.push_str(
            &serde_json::to_string(&Line {
                name: &input.name,
                result,
            })
            .expect("result serializes"),
        );
        lines.push('\n');
        if result.status == EpisodeStatus::Skipped {
            continue;
        }
        if let Some(adv) = &result.adversarial {
            io::write_png(adv_dir.join(format!("{}.png", input.name)), adv)?;
            io::write_raw(adv_dir.join(format!("{}.rlt", input.name)), adv)?;
        }
        let path = trace_dir.join(format!("{}.jsonl", input.name));
        let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        let mut w = BufWriter::new(file);
        result.write_trace(&mut w)?;
        w.flush().map_err(|e| CliError::io(&path, e))?;
    }
    write_file(&out.join("results.jsonl"), lines)?;
    let json = serde_json::to_string_pretty(summary).expect("summary serializes");
    write_file(&out.join("summary.json"), json + "\n")?;
    let csv = match &summary.summary {
        Some(s) => s.to_csv(),
        None => format!(
            "{}\n,,,,,,0,0,{}\n",
            AttackSummary::CSV_HEADER,
            summary.skips
        ),
    };
    write_file(&out.join("summary.csv"), csv)
}

#[derive(Debug)]
pub struct TrainReport {
    pub agent: Agent,
    pub log: TrainingLog,
    pub train: Vec<usize>,
    pub heldout: Vec<usize>,
}

/// Splits the dataset, trains on the first part and writes the checkpoint,
/// the per-episode log and the split.
pub fn cmd_train_agent(
    config: &RunConfig,
    dataset: &Path,
    clf: &ClassifierHandle,
) -> Result<TrainReport, CliError> {
    config.validate()?;
    let items = read_dataset(dataset)?;
    let bank = config.filter_bank()?;
    let engine = config.engine();
    let cache = MaskCache::default();
    let ctx = AttackContext {
        classifier: clf,
        bank: &bank,
        config: &engine,
        cache: Some(&cache),
    };
    let indices: Vec<usize> = (0..items.len()).collect();
    let (train, heldout) = split_dataset(&indices, config.train_fraction, config.seed);
    let train_items: Vec<LabeledImage> = train.iter().map(|&i| items[i].clone()).collect();
    let mut agent = Agent::new(config.agent_config(), ctx.state_len(), bank.len())?;
    let options = TrainOptions {
        passes: config.train_passes,
        seed: seed::named(config.seed, "train"),
    };
    let log = train_agent(&ctx, &train_items, &mut agent, &options)?;

    let out = &config.output;
    create_dir(out)?;
    agent.save(out.join("agent.ckpt"))?;
    write_file(&out.join("training_log.csv"), log.to_csv())?;
    let split = serde_json::json!({ "train": train, "heldout": heldout });
    write_file(
        &out.join("split.json"),
        serde_json::to_string_pretty(&split).expect("split serializes") + "\n",
    )?;
    Ok(TrainReport {
        agent,
        log,
        train,
        heldout,
    })
}

pub fn cmd_eval_robustness(
    matrix: &Path,
    clean_error: f64,
    mode: MceMode,
    out: Option<&Path>,
) -> Result<RobustnessReport, CliError> {
    let file = File::open(matrix).map_err(|e| CliError::io(matrix, e))?;
    let report = mce_and_degradation(&CorruptionErrorMatrix::from_csv(file, clean_error)?, mode)?;
    if let Some(out) = out {
        create_dir(out)?;
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        write_file(&out.join("robustness.json"), json + "\n")?;
    }
    Ok(report)
}

/// Writes `filters.json` (the adjusted specs) and `calibration.json` (the
/// per-filter measurements). Unreachable filters are an error after both
/// files are written.
pub fn cmd_calibrate(
    config: &RunConfig,
    references: &[ImageTensor],
) -> Result<CalibrationReport, CliError> {
    config.validate()?;
    let specs = config.active_specs()?;
    let report = calibrate_filters(
        &specs,
        &FilterRegistry::new(),
        references,
        config.patch_size,
        CALIBRATION_SAMPLES,
        seed::named(config.seed, "calibrate"),
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    let out = &config.output;
    create_dir(out)?;
    let specs_json = serde_json::to_string_pretty(&report.specs).expect("specs serialize");
    write_file(&out.join("filters.json"), specs_json + "\n")?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(&out.join("calibration.json"), json + "\n")?;
    report
        .clone()
        .into_result()
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(report)
}

/// Per-patch sensitivities of a clean image as CSV. The add column is the
/// largest delta over the active filters; remove deltas exist only for
/// distorted patches, so they are empty here.
pub fn cmd_sensitivity_report(
    config: &RunConfig,
    input: &LabeledImage,
    clf: &ClassifierHandle,
) -> Result<String, CliError> {
    config.validate()?;
    let bank = config.filter_bank()?;
    let engine = config.engine();
    let ctx = AttackContext {
        classifier: clf,
        bank: &bank,
        config: &engine,
        cache: None,
    };
    let goal = config.mode.goal(input.label);
    let mut ep = EpisodeState::begin(
        &ctx,
        input.image.clone(),
        goal,
        seed::named(config.seed, "sensitivity"),
    )?;
    ep.observe(&ctx)?;
    let report = ep.report().expect("observed");
    let grid = PatchGrid::for_image(&input.image, config.patch_size)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let mut csv = String::from("patch_index,row,col,add_delta,remove_delta\n");
    for (patch, add) in report.combined_add().iter().enumerate() {
        let (row, col) = grid.position(patch);
        let remove = report
            .remove
            .get(patch)
            .map(|v| v.to_string())
            .unwrap_or_default();
        csv.push_str(&format!("{patch},{row},{col},{add},{remove}\n"));
    }
    create_dir(&config.output)?;
    write_file(&config.output.join("sensitivity.csv"), &csv)?;
    Ok(csv)
}

/// Writes the desk victim (`victim.bin`) and its 100 attack images
/// (`data/`) under `out`.
pub fn cmd_make_fixture(out: &Path, seed: u64) -> Result<(), CliError> {
    let fx = desk_fixture(seed)?;
    create_dir(out)?;
    fx.model.save(out.join("victim.bin"))?;
    write_dataset(out.join("data"), &fx.images)?;
    Ok(())
}
