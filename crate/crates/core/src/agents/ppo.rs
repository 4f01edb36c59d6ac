use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AgentError, Net};
use crate::autodiff::{AutodiffError, Bound, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub epochs: usize,
    pub clip_eps: f64,
    pub entropy_coef: f64,
    pub hidden_dim: usize,
    pub normalize_advantages: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            lambda: 0.95,
            gamma: 0.99,
            epochs: 10,
            clip_eps: 0.2,
            entropy_coef: 0.0,
            hidden_dim: 66,
            normalize_advantages: true,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        let unit = |x: f64| x > 0.0 && x <= 1.0;
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(AgentError::Config(format!(
                "clip_eps {} must lie in (0, 1)",
                self.clip_eps
            )));
        }
        if !unit(self.gamma) || !unit(self.lambda) {
            return Err(AgentError::Config(
                "gamma and lambda must lie in (0, 1]".into(),
            ));
        }
        if self.epochs == 0 || self.hidden_dim == 0 {
            return Err(AgentError::Config(
                "epochs and hidden_dim must be positive".into(),
            ));
        }
        if !(self.actor_lr >= 0.0 && self.critic_lr >= 0.0) {
            return Err(AgentError::Config(
                "learning rates must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// TD residuals `r_t + gamma * V_{t+1} - V_t`; `values` has one more entry
/// than `rewards`, the last being the bootstrap (0 at termination).
pub fn deltas(rewards: &[f64], values: &[f64], gamma: f64) -> Result<Vec<f64>, AgentError> {
    if values.len() != rewards.len() + 1 {
        return Err(AgentError::Length {
            what: "values",
            expected: rewards.len() + 1,
            got: values.len(),
        });
    }
    Ok(rewards
        .iter()
        .enumerate()
        .map(|(t, r)| r + gamma * values[t + 1] - values[t])
        .collect())
}

/// Generalised advantage estimates by the backward recursion
/// `A_t = delta_t + gamma * lambda * A_{t+1}`.
pub fn gae(deltas: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    let mut out = vec![0.0; deltas.len()];
    let mut acc = 0.0;
    for t in (0..deltas.len()).rev() {
        acc = deltas[t] + gamma * lambda * acc;
        out[t] = acc;
    }
    out
}

/// Rescales to zero mean and unit standard deviation.
pub fn normalize(x: &[f64]) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt() + 1e-8;
    x.iter().map(|v| (v - mean) / sd).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActMode {
    Sample,
    Greedy,
}

/// Picks an action from softmax probabilities and returns it with its log
/// probability.
pub fn select_action<R: Rng + ?Sized>(probs: &[f64], mode: ActMode, rng: &mut R) -> (usize, f64) {
    let a = match mode {
        ActMode::Greedy => {
            probs
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &p)| {
                    if p > best.1 {
                        (i, p)
                    } else {
                        best
                    }
                })
                .0
        }
        ActMode::Sample => {
            let u: f64 = rng.random();
            let mut c = 0.0;
            let mut pick = probs.len() - 1;
            for (i, &p) in probs.iter().enumerate() {
                c += p;
                if u < c {
                    pick = i;
                    break;
                }
            }
            pick
        }
    };
    (a, probs[a].max(1e-300).ln())
}

/// Runs the policy on one observation.
pub fn act<R: Rng + ?Sized>(
    policy: &Net,
    obs: &[f64],
    mode: ActMode,
    rng: &mut R,
) -> Result<(usize, f64), AgentError> {
    let probs = policy.probabilities(&Tensor::new(vec![1, obs.len()], obs.to_vec())?)?;
    Ok(select_action(probs.data(), mode, rng))
}

/// Negated clipped surrogate, averaged over the batch:
/// `-mean(min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A))`
/// with `ratio = exp(logp_new - logp_old)`.
pub fn clipped_surrogate_loss(
    tape: &mut Tape<'_>,
    logp_new: Var,
    logp_old: &[f64],
    adv: &[f64],
    eps: f64,
) -> Result<Var, AutodiffError> {
    let old = tape.constant(Tensor::vector(logp_old.to_vec()));
    let a = tape.constant(Tensor::vector(adv.to_vec()));
    let diff = tape.sub(logp_new, old)?;
    let ratio = tape.exp(diff);
    let unclipped = tape.mul(ratio, a)?;
    let clipped = tape.clamp(ratio, 1.0 - eps, 1.0 + eps);
    let clipped = tape.mul(clipped, a)?;
    let surrogate = tape.minimum(unclipped, clipped)?;
    let m = tape.mean(surrogate);
    Ok(tape.scale(m, -1.0))
}

/// One agent's experience over an episode.
#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    pub obs: Vec<Vec<f64>>,
    /// Value-network inputs; equal to `obs` for the local critic.
    pub critic_in: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub logp_old: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn push(
        &mut self,
        obs: Vec<f64>,
        critic_in: Vec<f64>,
        action: usize,
        logp: f64,
        value: f64,
    ) {
        self.obs.push(obs);
        self.critic_in.push(critic_in);
        self.actions.push(action);
        self.logp_old.push(logp);
        self.values.push(value);
    }

    pub fn record_outcome(&mut self, reward: f64, done: bool) {
        self.rewards.push(reward);
        self.dones.push(done);
    }

    /// Advantages and frozen value targets. The episode end is treated as
    /// terminal, so the bootstrap value after the last step is 0.
    pub fn advantages(&self, cfg: &PpoConfig) -> Result<(Vec<f64>, Vec<f64>), AgentError> {
        let t = self.len();
        if self.rewards.len() != t || self.values.len() != t {
            return Err(AgentError::Length {
                what: "trajectory",
                expected: t,
                got: self.rewards.len(),
            });
        }
        // A done flag inside the batch cuts the bootstrap there as well.
        let mut d = Vec::with_capacity(t);
        for i in 0..t {
            let next = if self.dones[i] || i + 1 == t {
                0.0
            } else {
                self.values[i + 1]
            };
            d.push(self.rewards[i] + cfg.gamma * next - self.values[i]);
        }
        let mut adv = vec![0.0; t];
        let mut acc = 0.0;
        for i in (0..t).rev() {
            if self.dones[i] {
                acc = 0.0;
            }
            acc = d[i] + cfg.gamma * cfg.lambda * acc;
            adv[i] = acc;
        }
        let targets = adv.iter().zip(&self.values).map(|(a, v)| a + v).collect();
        Ok((adv, targets))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub entropy: f64,
}

fn rows(v: &[Vec<f64>]) -> Result<Tensor, AgentError> {
    Ok(Tensor::from_rows(v)?)
}

fn check_finite(what: &'static str, x: f64, epoch: usize) -> Result<(), AgentError> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(AgentError::NonFinite {
            what,
            epoch,
            value: x,
        })
    }
}

/// Runs `epochs` full-batch actor steps on the clipped objective. Returns the
/// mean actor loss and entropy across epochs.
/// Clipped actor loss (plus the optional entropy bonus) and the mean policy
/// entropy, recorded on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn actor_objective<'p>(
    actor: &'p Net,
    tape: &mut Tape<'p>,
    b: &Bound,
    x: &Tensor,
    actions: &[usize],
    logp_old: &[f64],
    adv: &[f64],
    cfg: &PpoConfig,
) -> Result<(Var, Var), AutodiffError> {
    let xv = tape.constant(x.clone());
    let logits = actor.mlp.forward(tape, b, xv)?;
    let logp_all = tape.log_softmax(logits);
    let logp = tape.gather(logp_all, actions)?;
    let mut loss = clipped_surrogate_loss(tape, logp, logp_old, adv, cfg.clip_eps)?;
    // entropy = -mean_rows(sum p log p)
    let p = tape.exp(logp_all);
    let plogp = tape.mul(p, logp_all)?;
    let s = tape.sum(plogp);
    let ent = tape.scale(s, -1.0 / actions.len() as f64);
    if cfg.entropy_coef != 0.0 {
        let bonus = tape.scale(ent, -cfg.entropy_coef);
        loss = tape.add(loss, bonus)?;
    }
    Ok((loss, ent))
}

/// Mean squared error between `V(x)` and the frozen targets `y: [n, 1]`.
pub fn critic_objective<'p>(
    critic: &'p Net,
    tape: &mut Tape<'p>,
    b: &Bound,
    x: &Tensor,
    y: &Tensor,
) -> Result<Var, AutodiffError> {
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let v = critic.mlp.forward(tape, b, xv)?;
    let d = tape.sub(v, yv)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

pub fn actor_update(
    actor: &mut Net,
    obs: &[Vec<f64>],
    actions: &[usize],
    logp_old: &[f64],
    adv: &[f64],
    cfg: &PpoConfig,
) -> Result<(f64, f64), AgentError> {
    let x = rows(obs)?;
    let mut loss_sum = 0.0;
    let mut ent_sum = 0.0;
    for epoch in 0..cfg.epochs {
        let (loss, ent, grads) = {
            let mut tape = Tape::new();
            let b = actor.store.bind(&mut tape);
            let (loss, ent) =
                actor_objective(actor, &mut tape, &b, &x, actions, logp_old, adv, cfg)?;
            let lv = tape.value(loss).item();
            let ev = tape.value(ent).item();
            check_finite("actor loss", lv, epoch)?;
            let g = tape.backward(loss)?;
            (lv, ev, actor.store.collect_grads(&b, &g))
        };
        actor.adam.step(&mut actor.store, &grads);
        loss_sum += loss;
        ent_sum += ent;
    }
    Ok((loss_sum / cfg.epochs as f64, ent_sum / cfg.epochs as f64))
}

/// Runs `epochs` full-batch steps of mean squared error towards `targets`.
pub fn critic_update(
    critic: &mut Net,
    inputs: &[Vec<f64>],
    targets: &[f64],
    epochs: usize,
) -> Result<f64, AgentError> {
    let x = rows(inputs)?;
    let y = Tensor::new(vec![targets.len(), 1], targets.to_vec())?;
    let mut loss_sum = 0.0;
    for epoch in 0..epochs {
        let (loss, grads) = {
            let mut tape = Tape::new();
            let b = critic.store.bind(&mut tape);
            let loss = critic_objective(critic, &mut tape, &b, &x, &y)?;
            let lv = tape.value(loss).item();
            check_finite("critic loss", lv, epoch)?;
            let g = tape.backward(loss)?;
            (lv, critic.store.collect_grads(&b, &g))
        };
        critic.adam.step(&mut critic.store, &grads);
        loss_sum += loss;
    }
    Ok(loss_sum / epochs as f64)
}

/// Full PPO update of one actor-critic pair from its trajectory.
pub fn ppo_update(
    actor: &mut Net,
    critic: &mut Net,
    traj: &Trajectory,
    cfg: &PpoConfig,
) -> Result<UpdateStats, AgentError> {
    if traj.is_empty() {
        return Ok(UpdateStats::default());
    }
    let (adv, targets) = traj.advantages(cfg)?;
    let adv_used = if cfg.normalize_advantages {
        normalize(&adv)
    } else {
        adv
    };
    let (actor_loss, entropy) = actor_update(
        actor,
        &traj.obs,
        &traj.actions,
        &traj.logp_old,
        &adv_used,
        cfg,
    )?;
    let critic_loss = critic_update(critic, &traj.critic_in, &targets, cfg.epochs)?;
    Ok(UpdateStats {
        actor_loss,
        critic_loss,
        entropy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gae_two_steps() {
        let a = gae(&[1.0, 1.0], 0.99, 0.95);
        assert!((a[0] - 1.9405).abs() < 1e-12 && a[1] == 1.0);
        assert_eq!(gae(&[], 0.9, 0.9), Vec::<f64>::new());
        assert_eq!(gae(&[0.3, -0.2], 0.99, 0.0), vec![0.3, -0.2]);
    }

    #[test]
    fn delta_substitution() {
        let d = deltas(&[1.0], &[2.0, 2.0], 0.99).unwrap();
        assert!((d[0] - 0.98).abs() < 1e-12);
        assert_eq!(
            deltas(&[1.0, 2.0], &[0.0; 3], 0.99).unwrap(),
            vec![1.0, 2.0]
        );
        assert_eq!(deltas(&[0.0; 3], &[5.0; 4], 1.0).unwrap(), vec![0.0; 3]);
        assert!(deltas(&[1.0], &[1.0], 0.9).is_err());
    }

    #[test]
    fn surrogate_arithmetic() {
        let mut tape = Tape::new();
        let logp = tape.leaf(Tensor::vector(vec![1.5f64.ln(), 0.5f64.ln()]));
        let l = clipped_surrogate_loss(&mut tape, logp, &[0.0, 0.0], &[1.0, -1.0], 0.2).unwrap();
        // min(1.5, 1.2) = 1.2 and min(-0.5, -0.8) = -0.8
        assert!((tape.value(l).item() + (1.2 - 0.8) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn greedy_and_sampled_choice() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, lp) = select_action(&[0.1, 0.7, 0.2], ActMode::Greedy, &mut rng);
        assert_eq!(a, 1);
        assert!((lp - 0.7f64.ln()).abs() < 1e-15);
        let (a, _) = select_action(&[0.0, 0.0, 1.0], ActMode::Sample, &mut rng);
        assert_eq!(a, 2);
    }
}
