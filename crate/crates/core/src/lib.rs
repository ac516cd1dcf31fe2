//! Query-efficient black-box adversarial attacks that add and remove
//! patch-level distortions under the control of a dueling-DQN agent.

pub mod agent;
pub mod dataset;
pub mod engine;
pub mod filters;
pub mod fixture;
pub mod image;
pub mod io;
pub mod metrics;
pub mod seed;
pub mod sensitivity;
pub mod target;
