//! The attack episode: probe, choose, distort, re-query, repeat.

mod pd;
mod policy;
mod train;

use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{ActionCodec, AgentError, AttackAction, Transition};
use crate::filters::{DistortionLedger, FilterBank, FilterError, MaskCache};
use crate::image::{l2_distance, linf_distance, ImageError, ImageTensor, PatchGrid};
use crate::seed;
use crate::sensitivity::{
    add_ranking, build_state, probe_all, probe_remove_sensitivity, remove_ranking, AttackGoal,
    RemoveSensitivity, SensitivityError, SensitivityReport, StateLayout, StateVector, L2_HISTORY,
};
use crate::target::{top_label, ClassifierHandle, TargetError};

pub use pd::{
    pd_targeted, pd_untargeted, step_reward, PdParams, RewardFloor, TargetedPd, REWARD_EPSILON,
};
pub use policy::{ActionPolicy, GreedyPolicy, LearningPolicy, RandomPolicy, ScriptedPolicy};
pub use train::{split_dataset, train_agent, EpisodeLog, TrainOptions, TrainingLog};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("invalid engine config: {0}")]
    InvalidConfig(String),
    #[error("working image diverged from ledger replay at step {0}")]
    ReplayMismatch(usize),
    #[error("step requested after the episode ended")]
    EpisodeOver,
    #[error("trace output: {0}")]
    Io(#[from] std::io::Error),
}

impl From<SensitivityError> for EngineError {
    fn from(e: SensitivityError) -> Self {
        match e {
            SensitivityError::Filter(f) => Self::Filter(f),
            SensitivityError::Target(t) => Self::Target(t),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub patch_size: usize,
    /// Maximum number of attack steps per episode.
    pub budget: usize,
    pub pd: PdParams,
    pub targeted_pd: TargetedPd,
    pub layout: StateLayout,
    pub reward_clip: f64,
    pub reward_floor: RewardFloor,
    pub cleanup: bool,
    /// Re-derive the working image from the ledger after every step and fail
    /// on any difference.
    pub verify_replay: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            patch_size: 2,
            budget: 3500,
            pd: PdParams::default(),
            targeted_pd: TargetedPd::Corrected,
            layout: StateLayout::default(),
            reward_clip: 100.0,
            reward_floor: RewardFloor::default(),
            cleanup: true,
            verify_replay: false,
        }
    }
}

/// Everything an episode borrows from the run.
#[derive(Clone, Copy)]
pub struct AttackContext<'a> {
    pub classifier: &'a ClassifierHandle,
    pub bank: &'a FilterBank,
    pub config: &'a EngineConfig,
    pub cache: Option<&'a MaskCache>,
}

impl AttackContext<'_> {
    pub fn codec(&self, n_max: usize) -> Result<ActionCodec, EngineError> {
        Ok(ActionCodec::new(self.bank.len(), n_max)?)
    }

    pub fn state_len(&self) -> usize {
        self.config.layout.len()
    }

    fn pd(&self, probs: &[f64], goal: &AttackGoal) -> Result<f64, EngineError> {
        match *goal {
            AttackGoal::Untargeted { true_class } => {
                pd_untargeted(probs, true_class, &self.config.pd)
            }
            AttackGoal::Targeted { target, .. } => {
                pd_targeted(probs, target, &self.config.pd, self.config.targeted_pd)
            }
        }
    }
}

/// Result of one attack step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub action: AttackAction,
    pub added: Vec<usize>,
    pub removed: Vec<usize>,
    pub pd: f64,
    pub delta_pd: f64,
    pub delta_l2: f64,
    pub reward: f64,
    pub l2: f64,
    pub top_label: usize,
    pub probs: Vec<f64>,
    pub misclassified: bool,
}

/// One line of the per-step JSONL trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub action: AttackAction,
    pub pd: f64,
    pub delta_pd: f64,
    pub delta_l2: f64,
    pub reward: f64,
    pub l2: f64,
    pub top_label: usize,
    pub p_gt: f64,
}

/// State of one running attack.
#[derive(Debug, Clone)]
pub struct EpisodeState {
    pub original: ImageTensor,
    pub working: ImageTensor,
    pub ledger: DistortionLedger,
    pub grid: PatchGrid,
    pub goal: AttackGoal,
    pub seed: u64,
    pub step: usize,
    /// Classifier evaluations made by this episode, including probes.
    pub queries: u64,
    pub probs: Vec<f64>,
    pub pd: f64,
    pub l2: f64,
    /// Previous L2 values, most recent first.
    pub l2_history: VecDeque<f64>,
    report: Option<SensitivityReport>,
    state: Option<StateVector>,
}

impl EpisodeState {
    /// Classifies the original (one query) and sets up an empty ledger.
    pub fn begin(
        ctx: &AttackContext,
        original: ImageTensor,
        goal: AttackGoal,
        seed: u64,
    ) -> Result<Self, EngineError> {
        let classes = ctx.classifier.num_classes();
        for class in [goal.true_class(), goal.focus_class()] {
            if class >= classes {
                return Err(EngineError::ClassOutOfRange { class, classes });
            }
        }
        if let AttackGoal::Targeted { true_class, target } = goal {
            if true_class == target {
                return Err(EngineError::InvalidConfig(
                    "target equals true class".into(),
                ));
            }
        }
        let grid = PatchGrid::for_image(&original, ctx.config.patch_size)?;
        let probs = ctx.classifier.classify(&original)?;
        let pd = ctx.pd(&probs, &goal)?;
        Ok(Self {
            working: original.clone(),
            ledger: DistortionLedger::new(&grid),
            original,
            grid,
            goal,
            seed,
            step: 0,
            queries: 1,
            probs,
            pd,
            l2: 0.0,
            l2_history: VecDeque::with_capacity(L2_HISTORY),
            report: None,
            state: None,
        })
    }

    /// Whether the victim labels the original with its true class.
    pub fn correctly_classified(&self) -> bool {
        top_label(&self.probs).ok() == Some(self.goal.true_class())
    }

    pub fn achieved(&self) -> bool {
        self.goal.achieved(&self.probs)
    }

    pub fn step_seed(&self) -> u64 {
        seed::step_seed(self.seed, self.step)
    }

    fn history(&self) -> Vec<f64> {
        self.l2_history.iter().copied().collect()
    }

    /// Runs both probe passes for the current step and rebuilds the state.
    pub fn observe(&mut self, ctx: &AttackContext) -> Result<&StateVector, EngineError> {
        let report = probe_all(
            &self.working,
            &self.grid,
            ctx.bank,
            &self.ledger,
            ctx.classifier,
            &self.goal,
            &self.probs,
            self.step_seed(),
            ctx.cache,
        )?;
        self.queries += report
            .add
            .iter()
            .map(|a| a.deltas.len() as u64)
            .sum::<u64>()
            + report.remove.deltas.len() as u64;
        let state = build_state(
            &report.combined_add(),
            &report.remove,
            &self.probs,
            self.goal.focus_class(),
            &self.history(),
            self.l2,
            ctx.config.layout,
        );
        self.report = Some(report);
        self.state = Some(state);
        Ok(self.state.as_ref().unwrap())
    }

    pub fn report(&self) -> Option<&SensitivityReport> {
        self.report.as_ref()
    }

    pub fn state(&self) -> Option<&StateVector> {
        self.state.as_ref()
    }

    /// State used as the successor of a terminal step: empty sensitivity
    /// lists with the final probabilities and L2.
    pub fn terminal_state(&self, layout: StateLayout) -> StateVector {
        build_state(
            &vec![0.0; self.grid.patch_count()],
            &RemoveSensitivity::default(),
            &self.probs,
            self.goal.focus_class(),
            &self.history(),
            self.l2,
            layout,
        )
    }

    /// Applies `action` using the sensitivities from the last
    /// [`Self::observe`], then re-queries the classifier once.
    ///
    /// The top `n_add` patches of the chosen filter's ranking are distorted
    /// with the probed masks. Then the top `n_rem` entries of the removal
    /// ranking are reverted, skipping patches distorted in this step.
    pub fn execute_step(
        &mut self,
        ctx: &AttackContext,
        action: AttackAction,
    ) -> Result<StepOutcome, EngineError> {
        if self.step >= ctx.config.budget {
            return Err(EngineError::EpisodeOver);
        }
        let report = self.report.take().ok_or(EngineError::EpisodeOver)?;
        self.state = None;
        let add = report
            .add
            .get(action.filter)
            .ok_or(FilterError::UnknownFilter {
                index: action.filter,
                count: report.add.len(),
            })?;
        let step_seed = self.step_seed();
        let added: Vec<usize> = add_ranking(&add.deltas)
            .into_iter()
            .take(action.n_add)
            .collect();
        for &p in &added {
            self.ledger.apply(
                &mut self.working,
                &self.grid,
                p,
                ctx.bank,
                action.filter,
                seed::mask_seed(step_seed, action.filter, p),
                ctx.cache,
            )?;
        }
        let removed: Vec<usize> = remove_ranking(&report.remove)
            .into_iter()
            .filter(|p| !added.contains(p))
            .take(action.n_rem)
            .collect();
        for &p in &removed {
            self.ledger.revert(&mut self.working, &self.grid, p)?;
        }

        let probs = ctx.classifier.classify(&self.working)?;
        self.queries += 1;
        let pd = ctx.pd(&probs, &self.goal)?;
        let l2 = l2_distance(&self.working, &self.original)?;
        let delta_pd = pd - self.pd;
        let delta_l2 = l2 - self.l2;
        let reward = step_reward(
            delta_pd,
            delta_l2,
            ctx.config.reward_clip,
            ctx.config.reward_floor,
        );

        if self.l2_history.len() == L2_HISTORY {
            self.l2_history.pop_back();
        }
        self.l2_history.push_front(self.l2);
        self.l2 = l2;
        self.pd = pd;
        self.probs = probs;
        self.step += 1;

        if ctx.config.verify_replay {
            let replayed = self.ledger.replay(&self.original, &self.grid, ctx.bank)?;
            if replayed != self.working {
                return Err(EngineError::ReplayMismatch(self.step));
            }
        }

        Ok(StepOutcome {
            action,
            added,
            removed,
            pd,
            delta_pd,
            delta_l2,
            reward,
            l2,
            top_label: top_label(&self.probs)?,
            probs: self.probs.clone(),
            misclassified: self.achieved(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeStatus {
    Success,
    Failure,
    /// The victim already misclassified the original.
    Skipped,
}

/// Outcome of attacking one image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackResult {
    pub status: EpisodeStatus,
    pub success: bool,
    pub true_class: usize,
    pub target: Option<usize>,
    pub final_label: usize,
    pub steps: usize,
    /// Classifier evaluations during the attack itself, probes included.
    pub raw_queries: u64,
    pub cleanup_queries: u64,
    pub pre_cleanup_l2: f64,
    /// L2 of the returned adversarial image, after cleanup.
    pub final_l2: f64,
    pub final_linf: f64,
    pub distortions: usize,
    #[serde(skip)]
    pub adversarial: Option<ImageTensor>,
    #[serde(skip)]
    pub trace: Vec<StepRecord>,
}

impl AttackResult {
    fn from_state(
        ep: &EpisodeState,
        status: EpisodeStatus,
        trace: Vec<StepRecord>,
    ) -> Result<Self, EngineError> {
        let target = match ep.goal {
            AttackGoal::Targeted { target, .. } => Some(target),
            AttackGoal::Untargeted { .. } => None,
        };
        Ok(Self {
            status,
            success: status == EpisodeStatus::Success,
            true_class: ep.goal.true_class(),
            target,
            final_label: top_label(&ep.probs)?,
            steps: ep.step,
            raw_queries: ep.queries,
            cleanup_queries: 0,
            pre_cleanup_l2: ep.l2,
            final_l2: ep.l2,
            final_linf: linf_distance(&ep.working, &ep.original)?,
            distortions: ep.ledger.total(),
            adversarial: Some(ep.working.clone()),
            trace,
        })
    }

    /// Writes the trace as JSON lines.
    pub fn write_trace(&self, mut out: impl Write) -> Result<(), EngineError> {
        for r in &self.trace {
            serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Counts of a cleanup pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CleanupStats {
    pub queries: u64,
    pub reverted: usize,
}

/// Greedily reverts ledger entries while the image stays adversarial.
///
/// Each pass probes remove sensitivities, then tries reverting the top entry
/// of each distorted patch in ascending order of absolute sensitivity. A
/// reversion is kept only if the re-queried image still satisfies the goal
/// and its L2 does not grow. Passes repeat until one keeps nothing.
pub fn cleanup(ep: &mut EpisodeState, ctx: &AttackContext) -> Result<CleanupStats, EngineError> {
    let mut stats = CleanupStats::default();
    if !ep.achieved() {
        return Ok(stats);
    }
    loop {
        let remove = probe_remove_sensitivity(
            &ep.working,
            &ep.grid,
            &ep.ledger,
            ctx.classifier,
            &ep.goal,
            &ep.probs,
        )?;
        stats.queries += remove.deltas.len() as u64;
        let mut order = remove.deltas.clone();
        order.sort_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(a.0.cmp(&b.0)));
        let mut changed = false;
        for (patch, _) in order {
            let candidate = ep.ledger.reverted_copy(&ep.working, &ep.grid, patch)?;
            let probs = ctx.classifier.classify(&candidate)?;
            stats.queries += 1;
            let l2 = l2_distance(&candidate, &ep.original)?;
            if ep.goal.achieved(&probs) && l2 <= ep.l2 {
                ep.ledger.revert(&mut ep.working, &ep.grid, patch)?;
                debug_assert_eq!(ep.working, candidate);
                ep.pd = ctx.pd(&probs, &ep.goal)?;
                ep.probs = probs;
                ep.l2 = l2;
                stats.reverted += 1;
                changed = true;
            }
        }
        if !changed {
            return Ok(stats);
        }
    }
}

/// Attacks `original` until the goal is met or the budget is spent.
///
/// Returns a skip if the victim does not assign the true class to the
/// original. Successful episodes are cleaned up when enabled.
pub fn run_episode(
    ctx: &AttackContext,
    original: &ImageTensor,
    goal: AttackGoal,
    policy: &mut dyn ActionPolicy,
    codec: &ActionCodec,
    episode_seed: u64,
) -> Result<AttackResult, EngineError> {
    let mut ep = EpisodeState::begin(ctx, original.clone(), goal, episode_seed)?;
    if !ep.correctly_classified() {
        return AttackResult::from_state(&ep, EpisodeStatus::Skipped, Vec::new());
    }
    let mut trace = Vec::new();
    let mut pending: Option<(Vec<f64>, usize, f64)> = None;
    let mut success = false;
    while ep.step < ctx.config.budget {
        let features = ep.observe(ctx)?.features();
        if let Some((state, action, reward)) = pending.take() {
            policy.record(Transition {
                state,
                action,
                reward,
                next_state: features.clone(),
                terminal: false,
            })?;
        }
        let action = policy.choose(ep.state().unwrap(), codec)?;
        let index = codec.encode(action)?;
        let step = ep.step;
        let out = ep.execute_step(ctx, action)?;
        trace.push(StepRecord {
            step,
            action,
            pd: out.pd,
            delta_pd: out.delta_pd,
            delta_l2: out.delta_l2,
            reward: out.reward,
            l2: out.l2,
            top_label: out.top_label,
            p_gt: out.probs[ep.goal.true_class()],
        });
        if out.misclassified {
            policy.record(Transition {
                state: features,
                action: index,
                reward: out.reward,
                next_state: ep.terminal_state(ctx.config.layout).features(),
                terminal: true,
            })?;
            success = true;
            break;
        }
        // a transition cut off by the budget has no successor and is dropped
        pending = Some((features, index, out.reward));
    }
    let status = if success {
        EpisodeStatus::Success
    } else {
        EpisodeStatus::Failure
    };
    let pre = ep.l2;
    let cleanup_stats = if success && ctx.config.cleanup {
        cleanup(&mut ep, ctx)?
    } else {
        CleanupStats::default()
    };
    let mut result = AttackResult::from_state(&ep, status, trace)?;
    result.pre_cleanup_l2 = pre;
    result.cleanup_queries = cleanup_stats.queries;
    Ok(result)
}
