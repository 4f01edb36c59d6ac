//! Learning agents: PPO actor-critics in three value-input regimes, an
//! independent DQN baseline and the fixed-time controller.

mod dqn;
mod fixed;
mod ppo;
mod runner;

use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{softmax_rows, Adam, AdamConfig, AutodiffError, Mlp, ParamStore, Tensor};
use crate::env::EnvError;
use crate::vae::VaeError;

pub use dqn::{epsilon_at, idqn_update, td_targets, IdqnConfig, QAgent, ReplayBuffer, Transition};
pub use fixed::FixedTimeController;
pub use ppo::{
    act, actor_objective, actor_update, clipped_surrogate_loss, critic_objective, critic_update,
    deltas, gae, normalize, ppo_update, select_action, ActMode, PpoConfig, Trajectory, UpdateStats,
};
pub use runner::{AgentSet, AgentsConfig, Algorithm, EpisodeStats, StepRecord};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Vae(#[from] VaeError),
    #[error("{what}: expected length {expected}, got {got}")]
    Length {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{what} became {value} in epoch {epoch}")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        value: f64,
    },
    #[error("invalid agent config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A multilayer perceptron with its own parameters and optimiser.
#[derive(Clone, Debug)]
pub struct Net {
    pub store: ParamStore,
    pub mlp: Mlp,
    pub adam: Adam,
}

impl Net {
    pub fn new<R: Rng + ?Sized>(name: &str, sizes: &[usize], lr: f64, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, name, sizes, rng);
        let adam = Adam::new(AdamConfig::with_lr(lr), &store);
        Self { store, mlp, adam }
    }

    /// Three linear layers `input -> hidden -> hidden -> output`.
    pub fn three_layer<R: Rng + ?Sized>(
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        lr: f64,
        rng: &mut R,
    ) -> Self {
        Self::new(name, &[input, hidden, hidden, output], lr, rng)
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn eval(&self, x: &Tensor) -> Result<Tensor, AgentError> {
        Ok(self.mlp.eval(&self.store, x)?)
    }

    /// Softmax of the outputs, row by row.
    pub fn probabilities(&self, x: &Tensor) -> Result<Tensor, AgentError> {
        Ok(softmax_rows(&self.eval(x)?))
    }

    /// Output for a single input row.
    pub fn eval_row(&self, x: &[f64]) -> Result<Vec<f64>, AgentError> {
        Ok(self
            .eval(&Tensor::new(vec![1, x.len()], x.to_vec())?)?
            .into_data())
    }

    pub fn save(&self, path: &Path) -> Result<(), AgentError> {
        Ok(self.store.save(path)?)
    }

    pub fn load(&mut self, path: &Path) -> Result<(), AgentError> {
        Ok(self.store.load(path)?)
    }
}
