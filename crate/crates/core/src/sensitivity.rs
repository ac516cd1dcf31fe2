//! Per-patch sensitivity probes and the fixed-length RL state.
//!
//! Sensitivities are expressed as attack progress: for an untargeted attack
//! an add-delta is the drop in the true-class probability when the probe mask
//! is applied to a patch; for a targeted attack it is the rise in the target
//! probability. Remove-deltas measure the progress lost by reverting a
//! patch's most recent distortion (negative means the reversion helps).

use serde::{Deserialize, Serialize};

use crate::filters::{distort_patch, DistortionLedger, FilterBank, FilterError, MaskCache};
use crate::image::{ImageTensor, PatchGrid};
use crate::seed;
use crate::target::{top_label, ClassifierHandle, TargetError};

/// Number of images sent per classify call during a probe pass.
const PROBE_CHUNK: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum SensitivityError {
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Target(#[from] TargetError),
}

/// What the attack is trying to achieve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AttackGoal {
    Untargeted { true_class: usize },
    Targeted { true_class: usize, target: usize },
}

impl AttackGoal {
    pub fn true_class(&self) -> usize {
        match *self {
            Self::Untargeted { true_class } | Self::Targeted { true_class, .. } => true_class,
        }
    }

    /// The class whose probability the attack watches: the true class when
    /// untargeted, the target class when targeted.
    pub fn focus_class(&self) -> usize {
        match *self {
            Self::Untargeted { true_class } => true_class,
            Self::Targeted { target, .. } => target,
        }
    }

    pub fn is_targeted(&self) -> bool {
        matches!(self, Self::Targeted { .. })
    }

    /// Progress made when moving from `before` to `after`.
    pub fn progress(&self, before: &[f64], after: &[f64]) -> f64 {
        let k = self.focus_class();
        match self {
            Self::Untargeted { .. } => before[k] - after[k],
            Self::Targeted { .. } => after[k] - before[k],
        }
    }

    /// Whether `probs` satisfies the attack: any label but the true class
    /// when untargeted, exactly the target when targeted.
    pub fn achieved(&self, probs: &[f64]) -> bool {
        let Ok(label) = top_label(probs) else {
            return false;
        };
        match *self {
            Self::Untargeted { true_class } => label != true_class,
            Self::Targeted { target, .. } => label == target,
        }
    }
}

/// Add-sensitivity of every patch for one filter at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AddSensitivity {
    pub filter: usize,
    pub step_seed: u64,
    pub deltas: Vec<f64>,
}

/// Remove-sensitivity of every distorted patch, ascending by patch index.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RemoveSensitivity {
    pub deltas: Vec<(usize, f64)>,
}

impl RemoveSensitivity {
    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    pub fn get(&self, patch: usize) -> Option<f64> {
        self.deltas
            .binary_search_by_key(&patch, |&(p, _)| p)
            .ok()
            .map(|i| self.deltas[i].1)
    }
}

/// Both probe passes of one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    /// One entry per active filter.
    pub add: Vec<AddSensitivity>,
    pub remove: RemoveSensitivity,
}

impl SensitivityReport {
    /// Per-patch best add-delta over all filters, used for the state.
    pub fn combined_add(&self) -> Vec<f64> {
        let n = self.add.first().map_or(0, |a| a.deltas.len());
        (0..n)
            .map(|i| {
                self.add
                    .iter()
                    .map(|a| a.deltas[i])
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect()
    }
}

fn classify_chunked(
    classifier: &ClassifierHandle,
    images: &[ImageTensor],
) -> Result<Vec<Vec<f64>>, TargetError> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(PROBE_CHUNK) {
        out.extend(classifier.classify_batch(chunk)?);
    }
    Ok(out)
}

/// Applies filter `filter` with its step mask to each patch in turn and
/// measures the progress each single application would make. The mask for
/// patch `i` is exactly the one an action at this step would apply.
#[allow(clippy::too_many_arguments)]
pub fn probe_add_sensitivity(
    image: &ImageTensor,
    grid: &PatchGrid,
    bank: &FilterBank,
    filter: usize,
    classifier: &ClassifierHandle,
    goal: &AttackGoal,
    base_probs: &[f64],
    step_seed: u64,
    cache: Option<&MaskCache>,
) -> Result<AddSensitivity, SensitivityError> {
    let f = bank.get(filter)?;
    let mut deltas = Vec::with_capacity(grid.patch_count());
    let patches: Vec<usize> = (0..grid.patch_count()).collect();
    for chunk in patches.chunks(PROBE_CHUNK) {
        let mut candidates = Vec::with_capacity(chunk.len());
        for &p in chunk {
            let mut c = image.clone();
            distort_patch(
                &mut c,
                grid,
                p,
                f,
                seed::mask_seed(step_seed, filter, p),
                cache,
            )?;
            candidates.push(c);
        }
        for probs in classify_chunked(classifier, &candidates)? {
            deltas.push(goal.progress(base_probs, &probs));
        }
    }
    Ok(AddSensitivity {
        filter,
        step_seed,
        deltas,
    })
}

/// Reverts each distorted patch's top ledger entry in turn and measures the
/// progress that reversion would give back.
pub fn probe_remove_sensitivity(
    image: &ImageTensor,
    grid: &PatchGrid,
    ledger: &DistortionLedger,
    classifier: &ClassifierHandle,
    goal: &AttackGoal,
    base_probs: &[f64],
) -> Result<RemoveSensitivity, SensitivityError> {
    let patches: Vec<usize> = ledger.distorted().collect();
    let mut deltas = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(PROBE_CHUNK) {
        let candidates = chunk
            .iter()
            .map(|&p| ledger.reverted_copy(image, grid, p))
            .collect::<Result<Vec<_>, _>>()?;
        for (&p, probs) in chunk.iter().zip(classify_chunked(classifier, &candidates)?) {
            deltas.push((p, -goal.progress(base_probs, &probs)));
        }
    }
    Ok(RemoveSensitivity { deltas })
}

/// Probes every active filter for additions and the ledger for removals.
#[allow(clippy::too_many_arguments)]
pub fn probe_all(
    image: &ImageTensor,
    grid: &PatchGrid,
    bank: &FilterBank,
    ledger: &DistortionLedger,
    classifier: &ClassifierHandle,
    goal: &AttackGoal,
    base_probs: &[f64],
    step_seed: u64,
    cache: Option<&MaskCache>,
) -> Result<SensitivityReport, SensitivityError> {
    let add = (0..bank.len())
        .map(|f| {
            probe_add_sensitivity(
                image, grid, bank, f, classifier, goal, base_probs, step_seed, cache,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let remove = probe_remove_sensitivity(image, grid, ledger, classifier, goal, base_probs)?;
    Ok(SensitivityReport { add, remove })
}

/// Patch indices by descending add-delta; ties keep the lower index first.
pub fn add_ranking(deltas: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..deltas.len()).collect();
    idx.sort_by(|&a, &b| deltas[b].total_cmp(&deltas[a]).then(a.cmp(&b)));
    idx
}

/// Distorted patches by ascending remove-delta; ties keep the lower index first.
pub fn remove_ranking(remove: &RemoveSensitivity) -> Vec<usize> {
    let mut v = remove.deltas.clone();
    v.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    v.into_iter().map(|(p, _)| p).collect()
}

fn normalize(values: &[f64]) -> Vec<f64> {
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| v / scale).collect()
}

/// Lengths of the variable-size state sections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateLayout {
    /// Sensitivity slots per list.
    pub k: usize,
    /// Probability slots.
    pub m: usize,
}

/// Number of past L2 values kept in the state.
pub const L2_HISTORY: usize = 4;

impl Default for StateLayout {
    fn default() -> Self {
        Self { k: 16, m: 10 }
    }
}

impl StateLayout {
    pub fn len(&self) -> usize {
        2 * self.k + L2_HISTORY + self.m + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Observation fed to the agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub list_add: Vec<f64>,
    pub list_remove: Vec<f64>,
    pub list_l2: Vec<f64>,
    pub list_prob: Vec<f64>,
    pub l2: f64,
}

impl StateVector {
    /// Concatenation in the order add, remove, l2 history, probabilities, l2.
    pub fn features(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(
            self.list_add.len()
                + self.list_remove.len()
                + self.list_l2.len()
                + self.list_prob.len()
                + 1,
        );
        v.extend(&self.list_add);
        v.extend(&self.list_remove);
        v.extend(&self.list_l2);
        v.extend(&self.list_prob);
        v.push(self.l2);
        v
    }

    pub fn zeros(layout: StateLayout) -> Self {
        Self {
            list_add: vec![0.0; layout.k],
            list_remove: vec![0.0; layout.k],
            list_l2: vec![0.0; L2_HISTORY],
            list_prob: vec![0.0; layout.m],
            l2: 0.0,
        }
    }
}

fn take_padded(mut v: Vec<f64>, n: usize) -> Vec<f64> {
    v.truncate(n);
    v.resize(n, 0.0);
    v
}

/// Assembles the state from probe results.
///
/// `l2_history` is most-recent-first and is zero-padded to four entries.
/// `list_prob` holds the focus-class probability first, then the other
/// classes in descending order.
pub fn build_state(
    add_deltas: &[f64],
    remove: &RemoveSensitivity,
    probs: &[f64],
    focus_class: usize,
    l2_history: &[f64],
    current_l2: f64,
    layout: StateLayout,
) -> StateVector {
    let add_norm = normalize(add_deltas);
    let list_add = take_padded(
        add_ranking(add_deltas)
            .into_iter()
            .map(|i| add_norm[i])
            .collect(),
        layout.k,
    );

    let raw: Vec<f64> = remove.deltas.iter().map(|&(_, d)| d).collect();
    let rem_norm = normalize(&raw);
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| {
        raw[a]
            .total_cmp(&raw[b])
            .then(remove.deltas[a].0.cmp(&remove.deltas[b].0))
    });
    let list_remove = take_padded(order.into_iter().map(|i| rem_norm[i]).collect(), layout.k);

    let list_l2 = take_padded(l2_history.to_vec(), L2_HISTORY);

    let mut others: Vec<f64> = probs
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != focus_class)
        .map(|(_, &p)| p)
        .collect();
    others.sort_by(|a, b| b.total_cmp(a));
    let mut list_prob = Vec::with_capacity(layout.m);
    list_prob.push(probs.get(focus_class).copied().unwrap_or(0.0));
    list_prob.extend(others);
    let list_prob = take_padded(list_prob, layout.m);

    StateVector {
        list_add,
        list_remove,
        list_l2,
        list_prob,
        l2: current_l2,
    }
}
