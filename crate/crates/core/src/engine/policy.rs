use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::EngineError;
use crate::agent::{ActionCodec, Agent, AttackAction, Transition};
use crate::seed;
use crate::sensitivity::StateVector;

/// Chooses actions for an episode and optionally learns from transitions.
pub trait ActionPolicy {
    fn choose(
        &mut self,
        state: &StateVector,
        codec: &ActionCodec,
    ) -> Result<AttackAction, EngineError>;

    fn record(&mut self, _transition: Transition) -> Result<(), EngineError> {
        Ok(())
    }
}

/// Uniform over the flat action space.
#[derive(Debug, Clone)]
pub struct RandomPolicy {
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: seed::rng(seed::named(seed, "policy.random")),
        }
    }
}

impl ActionPolicy for RandomPolicy {
    fn choose(
        &mut self,
        _state: &StateVector,
        codec: &ActionCodec,
    ) -> Result<AttackAction, EngineError> {
        Ok(codec.decode(self.rng.gen_range(0..codec.size()))?)
    }
}

/// Argmax of a trained agent's Q-values; never learns.
#[derive(Debug, Clone, Copy)]
pub struct GreedyPolicy<'a> {
    pub agent: &'a Agent,
}

impl ActionPolicy for GreedyPolicy<'_> {
    fn choose(
        &mut self,
        state: &StateVector,
        _codec: &ActionCodec,
    ) -> Result<AttackAction, EngineError> {
        let q = self.agent.online().q_values(&state.features())?;
        Ok(self.agent.codec().decode(crate::agent::argmax(&q))?)
    }
}

/// Epsilon-greedy agent that trains on every transition it sees.
#[derive(Debug)]
pub struct LearningPolicy<'a> {
    pub agent: &'a mut Agent,
    pub losses: Vec<f64>,
}

impl<'a> LearningPolicy<'a> {
    pub fn new(agent: &'a mut Agent) -> Self {
        Self {
            agent,
            losses: Vec::new(),
        }
    }
}

impl ActionPolicy for LearningPolicy<'_> {
    fn choose(
        &mut self,
        state: &StateVector,
        _codec: &ActionCodec,
    ) -> Result<AttackAction, EngineError> {
        Ok(self.agent.act(&state.features(), true)?)
    }

    fn record(&mut self, transition: Transition) -> Result<(), EngineError> {
        if let Some(loss) = self.agent.observe(transition)? {
            self.losses.push(loss);
        }
        Ok(())
    }
}

/// Plays a fixed list of actions, repeating the last one when exhausted.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    actions: Vec<AttackAction>,
    next: usize,
    pub recorded: Vec<Transition>,
}

impl ScriptedPolicy {
    pub fn new(actions: Vec<AttackAction>) -> Self {
        Self {
            actions,
            next: 0,
            recorded: Vec::new(),
        }
    }
}

impl ActionPolicy for ScriptedPolicy {
    fn choose(
        &mut self,
        _state: &StateVector,
        _codec: &ActionCodec,
    ) -> Result<AttackAction, EngineError> {
        let a = self
            .actions
            .get(self.next)
            .or(self.actions.last())
            .copied()
            .ok_or_else(|| EngineError::InvalidConfig("empty action script".into()))?;
        self.next += 1;
        Ok(a)
    }

    fn record(&mut self, transition: Transition) -> Result<(), EngineError> {
        self.recorded.push(transition);
        Ok(())
    }
}
