//! Dueling-DQN agent: action codec, Q-network, replay and TD learning.

mod net;
mod replay;

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{self, FormatError};
use crate::seed;

pub use net::{dueling_combine, DuelingQNet, ForwardCache};
pub use replay::{ReplayBuffer, Transition};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("state has {got} features, network expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("network shapes differ")]
    ShapeMismatch,
    #[error("action index {index} out of range for {size} actions")]
    ActionOutOfRange { index: usize, size: usize },
    #[error("invalid action: {0}")]
    InvalidAction(String),
    #[error("invalid agent config: {0}")]
    InvalidConfig(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("checkpoint sidecar: {0}")]
    Sidecar(String),
}

/// Add `n_add` distortions with filter `filter`, then revert `n_rem`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttackAction {
    pub filter: usize,
    pub n_add: usize,
    pub n_rem: usize,
}

/// Number of flat actions for `num_filters` filters and at most `n_max`
/// additions per step.
pub fn action_space_size(num_filters: usize, n_max: usize) -> usize {
    num_filters * n_max * (n_max + 1) / 2
}

/// Bijection between [`AttackAction`] and flat indices. Actions are ordered
/// by filter, then `n_add`, then `n_rem`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionCodec {
    pub num_filters: usize,
    pub n_max: usize,
}

impl ActionCodec {
    pub fn new(num_filters: usize, n_max: usize) -> Result<Self, AgentError> {
        if num_filters == 0 || n_max == 0 {
            return Err(AgentError::InvalidConfig(
                "need at least one filter and n_max >= 1".into(),
            ));
        }
        Ok(Self { num_filters, n_max })
    }

    pub fn size(&self) -> usize {
        action_space_size(self.num_filters, self.n_max)
    }

    fn per_filter(&self) -> usize {
        self.n_max * (self.n_max + 1) / 2
    }

    pub fn encode(&self, a: AttackAction) -> Result<usize, AgentError> {
        if a.filter >= self.num_filters
            || a.n_add == 0
            || a.n_add > self.n_max
            || a.n_rem >= a.n_add
        {
            return Err(AgentError::InvalidAction(format!("{a:?}")));
        }
        Ok(a.filter * self.per_filter() + (a.n_add - 1) * a.n_add / 2 + a.n_rem)
    }

    pub fn decode(&self, index: usize) -> Result<AttackAction, AgentError> {
        if index >= self.size() {
            return Err(AgentError::ActionOutOfRange {
                index,
                size: self.size(),
            });
        }
        let filter = index / self.per_filter();
        let mut rest = index % self.per_filter();
        let mut n_add = 1;
        while rest >= n_add {
            rest -= n_add;
            n_add += 1;
        }
        Ok(AttackAction {
            filter,
            n_add,
            n_rem: rest,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Transitions over which epsilon decays linearly.
    pub epsilon_decay_steps: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Updates between hard target syncs; 0 disables the target network.
    pub target_sync: u64,
    pub replay_capacity: usize,
    /// Replay size required before the first update.
    pub learn_start: usize,
    pub hidden: Vec<usize>,
    pub optimizer: OptimizerKind,
    pub n_max: usize,
    pub seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_steps: 10_000,
            learning_rate: 1e-3,
            batch_size: 32,
            target_sync: 500,
            replay_capacity: 50_000,
            learn_start: 32,
            hidden: vec![64, 64],
            optimizer: OptimizerKind::Adam,
            n_max: 8,
            seed: 0,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: &str| Err(AgentError::InvalidConfig(m.into()));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.epsilon_start) || !(0.0..=1.0).contains(&self.epsilon_end) {
            return bad("epsilon must lie in [0, 1]");
        }
        if !(self.learning_rate >= 0.0) {
            return bad("learning rate must be non-negative");
        }
        if self.batch_size == 0 || self.replay_capacity == 0 || self.n_max == 0 {
            return bad("batch size, replay capacity and n_max must be positive");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("trunk needs at least one non-empty layer");
        }
        Ok(())
    }

    /// Linear decay from `epsilon_start` to `epsilon_end`.
    pub fn epsilon_at(&self, transitions: u64) -> f64 {
        if self.epsilon_decay_steps == 0 {
            return self.epsilon_end;
        }
        if transitions >= self.epsilon_decay_steps {
            return self.epsilon_end;
        }
        let t = transitions as f64 / self.epsilon_decay_steps as f64;
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * t
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Epsilon-greedy choice over flat action indices.
pub fn select_action(
    net: &DuelingQNet,
    state: &[f64],
    epsilon: f64,
    rng: &mut impl Rng,
) -> Result<usize, AgentError> {
    let q = net.q_values(state)?;
    if rng.gen::<f64>() < epsilon {
        Ok(rng.gen_range(0..q.len()))
    } else {
        Ok(argmax(&q))
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, params: usize) -> Self {
        Self {
            kind,
            learning_rate,
            m: vec![0.0; params],
            v: vec![0.0; params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= self.learning_rate * g;
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(self.t);
                let c2 = 1.0 - ADAM_BETA2.powi(self.t);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
                    self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    params[i] -= self.learning_rate * mh / (vh.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

/// TD targets `r + gamma * max_a' Q_target(s', a')`, or `r` when terminal.
pub fn td_targets(
    target: &DuelingQNet,
    batch: &[&Transition],
    gamma: f64,
) -> Result<Vec<f64>, AgentError> {
    batch
        .iter()
        .map(|t| {
            if t.terminal {
                return Ok(t.reward);
            }
            let q = target.q_values(&t.next_state)?;
            Ok(t.reward + gamma * q.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        })
        .collect()
}

/// Mean squared TD error of `net` against fixed targets, and its gradient.
pub fn td_loss_and_gradient(
    net: &DuelingQNet,
    batch: &[&Transition],
    targets: &[f64],
) -> Result<(f64, Vec<f64>), AgentError> {
    if batch.is_empty() {
        return Err(AgentError::EmptyBatch);
    }
    let n = batch.len() as f64;
    let mut grad = vec![0.0; net.params().len()];
    let mut loss = 0.0;
    for (t, &y) in batch.iter().zip(targets) {
        if t.action >= net.actions() {
            return Err(AgentError::ActionOutOfRange {
                index: t.action,
                size: net.actions(),
            });
        }
        let cache = net.forward(&t.state)?;
        let err = cache.q_values()[t.action] - y;
        loss += err * err / n;
        let mut dq = vec![0.0; net.actions()];
        dq[t.action] = 2.0 * err / n;
        net.backward(&cache, &dq, &mut grad);
    }
    Ok((loss, grad))
}

/// One gradient step on the mean squared TD error. Returns the loss before
/// the step. `target` is only read.
pub fn td_update(
    net: &mut DuelingQNet,
    target: &DuelingQNet,
    batch: &[&Transition],
    gamma: f64,
    optimizer: &mut Optimizer,
) -> Result<f64, AgentError> {
    let targets = td_targets(target, batch, gamma)?;
    let (loss, grad) = td_loss_and_gradient(net, batch, &targets)?;
    optimizer.step(net.params_mut(), &grad);
    Ok(loss)
}

pub fn sync_target(net: &DuelingQNet, target: &mut DuelingQNet) -> Result<(), AgentError> {
    target.copy_from(net)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    config: AgentConfig,
    state_len: usize,
    num_filters: usize,
    transitions: u64,
    updates: u64,
}

/// The learner: online and target networks, optimizer, replay and RNG
/// streams, all derived from `config.seed`.
#[derive(Debug, Clone)]
pub struct Agent {
    config: AgentConfig,
    codec: ActionCodec,
    online: DuelingQNet,
    target: DuelingQNet,
    optimizer: Optimizer,
    replay: ReplayBuffer,
    explore_rng: ChaCha8Rng,
    replay_rng: ChaCha8Rng,
    transitions: u64,
    updates: u64,
}

impl Agent {
    pub fn new(
        config: AgentConfig,
        state_len: usize,
        num_filters: usize,
    ) -> Result<Self, AgentError> {
        config.validate()?;
        let codec = ActionCodec::new(num_filters, config.n_max)?;
        let online = DuelingQNet::new(
            state_len,
            &config.hidden,
            codec.size(),
            seed::named(config.seed, "agent.init"),
        );
        let target = online.clone();
        let optimizer = Optimizer::new(
            config.optimizer,
            config.learning_rate,
            online.params().len(),
        );
        Ok(Self {
            codec,
            target,
            optimizer,
            replay: ReplayBuffer::new(config.replay_capacity),
            explore_rng: seed::rng(seed::named(config.seed, "agent.explore")),
            replay_rng: seed::rng(seed::named(config.seed, "agent.replay")),
            transitions: 0,
            updates: 0,
            online,
            config,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn codec(&self) -> ActionCodec {
        self.codec
    }

    pub fn online(&self) -> &DuelingQNet {
        &self.online
    }

    pub fn target(&self) -> &DuelingQNet {
        &self.target
    }

    pub fn transitions(&self) -> u64 {
        self.transitions
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn epsilon(&self) -> f64 {
        self.config.epsilon_at(self.transitions)
    }

    /// Chooses an action; `explore` selects epsilon-greedy instead of greedy.
    pub fn act(&mut self, state: &[f64], explore: bool) -> Result<AttackAction, AgentError> {
        let eps = if explore { self.epsilon() } else { 0.0 };
        let idx = select_action(&self.online, state, eps, &mut self.explore_rng)?;
        self.codec.decode(idx)
    }

    /// Stores a transition and, once the buffer holds `learn_start` entries,
    /// performs one TD update. Returns the loss when an update ran.
    pub fn observe(&mut self, t: Transition) -> Result<Option<f64>, AgentError> {
        self.replay.push(t);
        self.transitions += 1;
        if self.replay.len() < self.config.learn_start.max(1) {
            return Ok(None);
        }
        let batch = self
            .replay
            .sample(self.config.batch_size, &mut self.replay_rng);
        let target = if self.config.target_sync == 0 {
            &self.online.clone()
        } else {
            &self.target
        };
        let targets = td_targets(target, &batch, self.config.gamma)?;
        let (loss, grad) = td_loss_and_gradient(&self.online, &batch, &targets)?;
        self.optimizer.step(self.online.params_mut(), &grad);
        self.updates += 1;
        if self.config.target_sync > 0 && self.updates % self.config.target_sync == 0 {
            sync_target(&self.online, &mut self.target)?;
        }
        Ok(Some(loss))
    }

    fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    /// Writes the online network as named arrays and the config to
    /// `<path>.json`. Parameters are stored as f32.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), AgentError> {
        let path = path.as_ref();
        io::write_arrays(path, &self.online.to_arrays("online."))?;
        let side = Sidecar {
            config: self.config.clone(),
            state_len: self.online.input_len(),
            num_filters: self.codec.num_filters,
            transitions: self.transitions,
            updates: self.updates,
        };
        let text =
            serde_json::to_string_pretty(&side).map_err(|e| AgentError::Sidecar(e.to_string()))?;
        std::fs::write(Self::sidecar_path(path), text)
            .map_err(|e| AgentError::Format(FormatError::Io(e)))?;
        Ok(())
    }

    /// Restores a saved agent. Replay contents and optimizer moments are not
    /// persisted; the target network starts as a copy of the online one.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, AgentError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(Self::sidecar_path(path))
            .map_err(|e| AgentError::Format(FormatError::Io(e)))?;
        let side: Sidecar =
            serde_json::from_str(&text).map_err(|e| AgentError::Sidecar(e.to_string()))?;
        let mut agent = Self::new(side.config, side.state_len, side.num_filters)?;
        agent
            .online
            .load_arrays(&io::read_arrays(path)?, "online.")?;
        sync_target(&agent.online, &mut agent.target)?;
        agent.transitions = side.transitions;
        agent.updates = side.updates;
        Ok(agent)
    }
}
