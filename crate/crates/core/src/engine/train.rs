use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{run_episode, AttackContext, EngineError, EpisodeStatus, LearningPolicy};
use crate::agent::Agent;
use crate::seed;
use crate::sensitivity::AttackGoal;
use crate::target::LabeledImage;

/// Seeded shuffle followed by a split; the first part holds
/// `round(train_fraction * n)` items.
pub fn split_dataset<T: Clone>(items: &[T], train_fraction: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut seed::rng(seed::named(seed, "dataset.split")));
    let cut = ((items.len() as f64) * train_fraction).round() as usize;
    let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect::<Vec<T>>();
    (pick(&order[..cut]), pick(&order[cut..]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    /// Passes over the training images.
    pub passes: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { passes: 1, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub pass: usize,
    pub image: usize,
    pub status: EpisodeStatus,
    pub steps: usize,
    pub raw_queries: u64,
    pub final_l2: f64,
    pub epsilon: f64,
    pub updates: u64,
    pub mean_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub episodes: Vec<EpisodeLog>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "episode,pass,image,status,steps,raw_queries,final_l2,epsilon,updates,mean_loss\n",
        );
        for e in &self.episodes {
            let status = match e.status {
                EpisodeStatus::Success => "success",
                EpisodeStatus::Failure => "failure",
                EpisodeStatus::Skipped => "skipped",
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                e.episode,
                e.pass,
                e.image,
                status,
                e.steps,
                e.raw_queries,
                e.final_l2,
                e.epsilon,
                e.updates,
                e.mean_loss.map(|l| l.to_string()).unwrap_or_default()
            ));
        }
        out
    }
}

/// Runs one exploring, learning episode per training image and pass.
/// Images the victim already misclassifies are logged as skips.
pub fn train_agent(
    ctx: &AttackContext,
    images: &[LabeledImage],
    agent: &mut Agent,
    options: &TrainOptions,
) -> Result<TrainingLog, EngineError> {
    if images.is_empty() {
        return Err(EngineError::InvalidConfig("empty training set".into()));
    }
    let codec = ctx.codec(agent.config().n_max)?;
    if codec != agent.codec() || agent.online().input_len() != ctx.state_len() {
        return Err(EngineError::InvalidConfig(
            "agent does not match the filter set or state layout".into(),
        ));
    }
    let mut log = TrainingLog::default();
    for pass in 0..options.passes {
        for (i, item) in images.iter().enumerate() {
            let episode_seed = seed::derive(options.seed, &[pass as u64, i as u64]);
            let epsilon = agent.epsilon();
            let mut policy = LearningPolicy::new(agent);
            let goal = AttackGoal::Untargeted {
                true_class: item.label,
            };
            let result = run_episode(ctx, &item.image, goal, &mut policy, &codec, episode_seed)?;
            let mean_loss = (!policy.losses.is_empty())
                .then(|| policy.losses.iter().sum::<f64>() / policy.losses.len() as f64);
            log.episodes.push(EpisodeLog {
                episode: log.episodes.len(),
                pass,
                image: i,
                status: result.status,
                steps: result.steps,
                raw_queries: result.raw_queries,
                final_l2: result.final_l2,
                epsilon,
                updates: agent.updates(),
                mean_loss,
            });
        }
    }
    Ok(log)
}
