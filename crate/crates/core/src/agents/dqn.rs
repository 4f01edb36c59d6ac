use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AgentError, Net};
use crate::autodiff::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdqnConfig {
    pub lr: f64,
    pub gamma: f64,
    pub buffer_size: usize,
    pub batch_size: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Fraction of all training steps over which epsilon decays linearly.
    pub eps_fraction: f64,
    pub target_sync: u64,
    pub hidden_dim: usize,
}

impl Default for IdqnConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            gamma: 0.99,
            buffer_size: 50_000,
            batch_size: 64,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_fraction: 0.3,
            target_sync: 500,
            hidden_dim: 66,
        }
    }
}

impl IdqnConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        if self.batch_size == 0 || self.buffer_size < self.batch_size || self.target_sync == 0 {
            return Err(AgentError::Config(
                "need 0 < batch_size <= buffer_size and target_sync > 0".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.eps_end) || !(0.0..=1.0).contains(&self.eps_start) {
            return Err(AgentError::Config(
                "epsilon bounds must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Exploration rate after `step` of `total` training steps.
pub fn epsilon_at(step: usize, total: usize, cfg: &IdqnConfig) -> f64 {
    let horizon = (cfg.eps_fraction * total as f64).max(1.0);
    let frac = (step as f64 / horizon).min(1.0);
    cfg.eps_start + frac * (cfg.eps_end - cfg.eps_start)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub done: bool,
}

/// Fixed-capacity FIFO of transitions with uniform sampling.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(4096)),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<&Transition> {
        (0..n)
            .map(|_| &self.items[rng.random_range(0..self.items.len())])
            .collect()
    }
}

/// `r + gamma * max_next`, or `r` for terminal transitions.
pub fn td_targets(rewards: &[f64], dones: &[bool], max_next: &[f64], gamma: f64) -> Vec<f64> {
    rewards
        .iter()
        .zip(dones)
        .zip(max_next)
        .map(|((r, &d), m)| if d { *r } else { r + gamma * m })
        .collect()
}

/// Online Q-network, its periodically synced copy and a replay buffer.
#[derive(Clone, Debug)]
pub struct QAgent {
    pub q: Net,
    pub target: Net,
    pub buffer: ReplayBuffer,
    pub updates: u64,
}

impl QAgent {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        obs_dim: usize,
        actions: usize,
        cfg: &IdqnConfig,
        rng: &mut R,
    ) -> Self {
        let q = Net::three_layer(name, obs_dim, cfg.hidden_dim, actions, cfg.lr, rng);
        Self {
            target: q.clone(),
            q,
            buffer: ReplayBuffer::new(cfg.buffer_size),
            updates: 0,
        }
    }

    pub fn sync_target(&mut self) {
        self.target.store.copy_from(&self.q.store);
    }

    /// Epsilon-greedy action.
    pub fn act<R: Rng + ?Sized>(
        &self,
        obs: &[f64],
        epsilon: f64,
        rng: &mut R,
    ) -> Result<usize, AgentError> {
        let q = self.q.eval_row(obs)?;
        if rng.random::<f64>() < epsilon {
            return Ok(rng.random_range(0..q.len()));
        }
        Ok(argmax(&q))
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| {
            if x > best.1 {
                (i, x)
            } else {
                best
            }
        })
        .0
}

/// One gradient step on a uniform minibatch; `None` while the buffer holds
/// fewer than `batch_size` transitions. Syncs the target every
/// `target_sync` updates.
pub fn idqn_update<R: Rng + ?Sized>(
    agent: &mut QAgent,
    cfg: &IdqnConfig,
    rng: &mut R,
) -> Result<Option<f64>, AgentError> {
    if agent.buffer.len() < cfg.batch_size {
        return Ok(None);
    }
    let batch = agent.buffer.sample(cfg.batch_size, rng);
    let obs: Vec<Vec<f64>> = batch.iter().map(|t| t.obs.clone()).collect();
    let next: Vec<Vec<f64>> = batch.iter().map(|t| t.next_obs.clone()).collect();
    let actions: Vec<usize> = batch.iter().map(|t| t.action).collect();
    let rewards: Vec<f64> = batch.iter().map(|t| t.reward).collect();
    let dones: Vec<bool> = batch.iter().map(|t| t.done).collect();
    let qn = agent.target.eval(&Tensor::from_rows(&next)?)?;
    let a = qn.shape()[1];
    let max_next: Vec<f64> = qn
        .data()
        .chunks(a)
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let y = td_targets(&rewards, &dones, &max_next, cfg.gamma);
    let x = Tensor::from_rows(&obs)?;
    let (loss, grads) = {
        let net = &agent.q;
        let mut tape = Tape::new();
        let b = net.store.bind(&mut tape);
        let xv = tape.constant(x);
        let q = net.mlp.forward(&mut tape, &b, xv)?;
        let qa = tape.gather(q, &actions)?;
        let yv = tape.constant(Tensor::vector(y));
        let d = tape.sub(qa, yv)?;
        let sq = tape.square(d);
        let loss = tape.mean(sq);
        let lv = tape.value(loss).item();
        if !lv.is_finite() {
            return Err(AgentError::NonFinite {
                what: "td loss",
                epoch: agent.updates as usize,
                value: lv,
            });
        }
        let g = tape.backward(loss)?;
        (lv, net.store.collect_grads(&b, &g))
    };
    agent.q.adam.step(&mut agent.q.store, &grads);
    agent.updates += 1;
    if agent.updates.is_multiple_of(cfg.target_sync) {
        agent.sync_target();
    }
    Ok(Some(loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn target_values() {
        assert_eq!(
            td_targets(&[0.0, 2.0], &[false, true], &[1.0, 5.0], 0.99),
            vec![0.99, 2.0]
        );
    }

    #[test]
    fn epsilon_schedule() {
        let cfg = IdqnConfig::default();
        assert_eq!(epsilon_at(0, 1000, &cfg), 1.0);
        assert!((epsilon_at(150, 1000, &cfg) - 0.525).abs() < 1e-12);
        assert!((epsilon_at(300, 1000, &cfg) - 0.05).abs() < 1e-12);
        assert!((epsilon_at(999, 1000, &cfg) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn buffer_is_bounded_and_update_waits_for_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = IdqnConfig {
            batch_size: 4,
            buffer_size: 8,
            target_sync: 3,
            ..IdqnConfig::default()
        };
        let mut agent = QAgent::new("q", 3, 2, &cfg, &mut rng);
        let t = |i: usize| Transition {
            obs: vec![i as f64; 3],
            action: i % 2,
            reward: 1.0,
            next_obs: vec![0.0; 3],
            done: i.is_multiple_of(3),
        };
        for i in 0..3 {
            agent.buffer.push(t(i));
        }
        assert_eq!(idqn_update(&mut agent, &cfg, &mut rng).unwrap(), None);
        for i in 3..20 {
            agent.buffer.push(t(i));
        }
        assert_eq!(agent.buffer.len(), 8);
        for k in 1..=6 {
            let before = agent.target.store.clone();
            idqn_update(&mut agent, &cfg, &mut rng).unwrap().unwrap();
            if k % 3 == 0 {
                assert_eq!(agent.target.store, agent.q.store);
            } else {
                assert_eq!(agent.target.store, before);
            }
        }
    }
}
