use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rlab_core::agent::AgentConfig;
use rlab_core::engine::{EngineConfig, PdParams, RewardFloor, TargetedPd};
use rlab_core::filters::{FilterBank, FilterSpec};
use rlab_core::metrics::MceMode;
use rlab_core::seed;
use rlab_core::sensitivity::{AttackGoal, StateLayout};

use crate::error::CliError;

/// Where the victim lives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetConfig {
    /// Reference-model weights evaluated in process.
    Weights(PathBuf),
    /// Base URL of a classify server.
    Url(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AttackMode {
    #[default]
    Untargeted,
    Targeted {
        class: usize,
    },
}

impl AttackMode {
    pub fn goal(self, true_class: usize) -> AttackGoal {
        match self {
            Self::Untargeted => AttackGoal::Untargeted { true_class },
            Self::Targeted { class } => AttackGoal::Targeted {
                true_class,
                target: class,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub target: Option<TargetConfig>,
    pub filters: Vec<FilterSpec>,
    /// Names of the filters in use, in order. `None` uses all of `filters`.
    pub active_filters: Option<Vec<String>>,
    pub patch_size: usize,
    pub n_max: usize,
    pub budget: usize,
    pub mode: AttackMode,
    pub agent: AgentConfig,
    pub pd: PdParams,
    pub targeted_pd: TargetedPd,
    pub reward_floor: RewardFloor,
    pub reward_clip: f64,
    pub layout: StateLayout,
    pub cleanup: bool,
    pub seed: u64,
    pub workers: usize,
    pub output: PathBuf,
    /// Checkpoint steering `attack`; without one the attack picks actions
    /// uniformly at random.
    pub agent_checkpoint: Option<PathBuf>,
    /// Passes over the training split in `train-agent`.
    pub train_passes: usize,
    pub train_fraction: f64,
    pub mce_mode: MceMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        let engine = EngineConfig::default();
        Self {
            target: None,
            filters: vec![
                FilterSpec::gaussian_noise(),
                FilterSpec::gaussian_blur(),
                FilterSpec::brightness(),
                FilterSpec::dead_pixel(),
            ],
            active_filters: None,
            patch_size: engine.patch_size,
            n_max: AgentConfig::default().n_max,
            budget: engine.budget,
            mode: AttackMode::default(),
            agent: AgentConfig::default(),
            pd: engine.pd,
            targeted_pd: engine.targeted_pd,
            reward_floor: engine.reward_floor,
            reward_clip: engine.reward_clip,
            layout: engine.layout,
            cleanup: engine.cleanup,
            seed: 0,
            workers: 1,
            output: PathBuf::from("rlab-out"),
            agent_checkpoint: None,
            train_passes: 1,
            train_fraction: 0.8,
            mce_mode: MceMode::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CliError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CliError> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
    }

    /// Specs of the active filters, in the order they were named.
    pub fn active_specs(&self) -> Result<Vec<FilterSpec>, CliError> {
        let Some(names) = &self.active_filters else {
            return Ok(self.filters.clone());
        };
        if names.is_empty() {
            return Err(CliError::Config("active filter list is empty".into()));
        }
        names
            .iter()
            .map(|name| {
                let canonical = FilterSpec::by_name(name).map(|s| s.kind_name().to_string());
                let wanted = canonical.as_deref().unwrap_or(name);
                self.filters
                    .iter()
                    .find(|s| s.kind_name() == wanted)
                    .cloned()
                    .or_else(|| FilterSpec::by_name(name))
                    .ok_or_else(|| CliError::Config(format!("unknown filter {name:?}")))
            })
            .collect()
    }

    pub fn filter_bank(&self) -> Result<FilterBank, CliError> {
        FilterBank::from_builtin(self.active_specs()?).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn engine(&self) -> EngineConfig {
        EngineConfig {
            patch_size: self.patch_size,
            budget: self.budget,
            pd: self.pd,
            targeted_pd: self.targeted_pd,
            layout: self.layout,
            reward_clip: self.reward_clip,
            reward_floor: self.reward_floor,
            cleanup: self.cleanup,
            verify_replay: false,
        }
    }

    /// The agent settings with `n_max` from this config and a seed drawn
    /// from the root seed.
    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            n_max: self.n_max,
            seed: seed::named(self.seed, "agent"),
            ..self.agent.clone()
        }
    }

    /// Checks everything that does not need the victim.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.patch_size == 0 {
            return bad("patch_size must be positive".into());
        }
        if self.n_max == 0 {
            return bad("n_max must be positive".into());
        }
        if self.workers == 0 {
            return bad("workers must be positive".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!(
                "train_fraction {} must lie in (0, 1)",
                self.train_fraction
            ));
        }
        if !(self.reward_clip > 0.0) {
            return bad(format!("reward_clip {} must be positive", self.reward_clip));
        }
        self.pd
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.agent_config()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.filter_bank()?;
        Ok(())
    }

    /// Fails unless the victim's input is tiled exactly by patches.
    pub fn check_shape(&self, shape: (usize, usize, usize)) -> Result<(), CliError> {
        let (_, h, w) = shape;
        if h % self.patch_size != 0 || w % self.patch_size != 0 {
            return Err(CliError::Config(format!(
                "patch size {} does not divide input {h}x{w}",
                self.patch_size
            )));
        }
        Ok(())
    }
}
