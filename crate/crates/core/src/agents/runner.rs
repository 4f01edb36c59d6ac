use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dqn::argmax;
use super::{
    critic_update, epsilon_at, idqn_update, ppo_update, select_action, ActMode, AgentError,
    FixedTimeController, IdqnConfig, Net, PpoConfig, QAgent, Trajectory, Transition, UpdateStats,
};
use crate::autodiff::Tensor;
use crate::env::{Env, GlobalMatrix, Observation, StepMetrics, NUM_PHASES, OBS_DIM};
use crate::vae::{LatentTrace, Vae, VaeConfig, VaeLosses};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Fixed,
    Ippo,
    Mappo,
    Idqn,
    #[serde(rename = "maclight")]
    MacLight,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Self::Fixed,
        Self::Ippo,
        Self::Mappo,
        Self::Idqn,
        Self::MacLight,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Fixed => "fixed",
            Self::Ippo => "ippo",
            Self::Mappo => "mappo",
            Self::Idqn => "idqn",
            Self::MacLight => "maclight",
        }
    }

    pub fn is_ppo(self) -> bool {
        matches!(self, Self::Ippo | Self::Mappo | Self::MacLight)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                format!(
                    "unknown algorithm {s:?}; expected one of fixed, ippo, mappo, idqn, maclight"
                )
            })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentsConfig {
    pub ppo: PpoConfig,
    pub idqn: IdqnConfig,
    pub vae: VaeConfig,
    pub fixed: FixedConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixedConfig {
    pub period_s: f64,
}

impl Default for FixedConfig {
    fn default() -> Self {
        Self { period_s: 45.0 }
    }
}

/// Per-step record kept for the metric stream.
pub type StepRecord = StepMetrics;

/// Outcome of one episode.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    /// Sum of every agent's rewards over the episode.
    pub ret: f64,
    /// Sum over decision steps of the network's stopped-vehicle waiting.
    pub wait: f64,
    /// Mean over decision steps of the number of halting vehicles.
    pub queue: f64,
    /// Mean over decision steps of the mean vehicle speed.
    pub speed: f64,
    pub agent_returns: Vec<f64>,
    pub initial_waiting: Vec<f64>,
    pub final_waiting: Vec<f64>,
    pub update: UpdateStats,
    pub vae: Option<VaeLosses>,
    pub trace: Vec<StepRecord>,
}

impl EpisodeStats {
    fn from_trace(trace: Vec<StepRecord>, agent_returns: Vec<f64>) -> Self {
        let n = trace.len().max(1) as f64;
        Self {
            ret: agent_returns.iter().sum(),
            wait: trace.iter().map(|m| m.system_wait_s).sum(),
            queue: trace.iter().map(|m| m.halting as f64).sum::<f64>() / n,
            speed: trace.iter().map(|m| m.mean_speed).sum::<f64>() / n,
            agent_returns,
            trace,
            ..Self::default()
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    algorithm: Algorithm,
    num_agents: usize,
    rows: usize,
    cols: usize,
}

/// Every learner of one run: per-intersection actors and critics, the shared
/// VAE or critic where the regime has one, and the run's random stream.
pub struct AgentSet {
    algo: Algorithm,
    cfg: AgentsConfig,
    rows: usize,
    cols: usize,
    pub actors: Vec<Net>,
    pub critics: Vec<Net>,
    pub vae: Option<Vae>,
    pub q: Vec<QAgent>,
    q_rngs: Vec<ChaCha8Rng>,
    fixed: FixedTimeController,
    rng: ChaCha8Rng,
    planned_steps: usize,
    train_steps: usize,
    pub latent_trace: LatentTrace,
}

impl AgentSet {
    /// Builds learners for a `rows x cols` signal grid. Agent `k` is the
    /// `k`-th signal in row-major order.
    pub fn new(
        algo: Algorithm,
        rows: usize,
        cols: usize,
        cfg: AgentsConfig,
        seed: u64,
    ) -> Result<Self, AgentError> {
        cfg.ppo.validate()?;
        cfg.idqn.validate()?;
        if !(cfg.fixed.period_s > 0.0) {
            return Err(AgentError::Config("fixed period must be positive".into()));
        }
        let k = rows * cols;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = cfg.ppo.hidden_dim;
        let (mut actors, mut critics, mut q, mut q_rngs, mut vae) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new(), None);
        match algo {
            Algorithm::Fixed => {}
            Algorithm::Idqn => {
                for i in 0..k {
                    q.push(QAgent::new(
                        &format!("q{i}"),
                        OBS_DIM,
                        NUM_PHASES,
                        &cfg.idqn,
                        &mut rng,
                    ));
                    q_rngs.push(ChaCha8Rng::seed_from_u64(rng.random()));
                }
            }
            Algorithm::Ippo | Algorithm::Mappo | Algorithm::MacLight => {
                for i in 0..k {
                    actors.push(Net::three_layer(
                        &format!("actor{i}"),
                        OBS_DIM,
                        h,
                        NUM_PHASES,
                        cfg.ppo.actor_lr,
                        &mut rng,
                    ));
                }
                match algo {
                    Algorithm::Mappo => {
                        critics.push(Net::three_layer(
                            "critic",
                            k * OBS_DIM,
                            h,
                            1,
                            cfg.ppo.critic_lr,
                            &mut rng,
                        ));
                    }
                    _ => {
                        let extra = if algo == Algorithm::MacLight {
                            cfg.vae.latent_dim
                        } else {
                            0
                        };
                        for i in 0..k {
                            critics.push(Net::three_layer(
                                &format!("critic{i}"),
                                extra + OBS_DIM,
                                h,
                                1,
                                cfg.ppo.critic_lr,
                                &mut rng,
                            ));
                        }
                    }
                }
                if algo == Algorithm::MacLight {
                    vae = Some(Vae::new(rows, cols, cfg.vae.clone(), rng.random())?);
                }
            }
        }
        Ok(Self {
            algo,
            fixed: FixedTimeController::new(cfg.fixed.period_s),
            cfg,
            rows,
            cols,
            actors,
            critics,
            vae,
            q,
            q_rngs,
            rng,
            planned_steps: 0,
            train_steps: 0,
            latent_trace: LatentTrace::default(),
        })
    }

    pub fn algorithm(&self) -> Algorithm {
        self.algo
    }

    pub fn num_agents(&self) -> usize {
        self.rows * self.cols
    }

    pub fn config(&self) -> &AgentsConfig {
        &self.cfg
    }

    /// Total decision steps of training, used by the exploration schedule.
    pub fn plan_training(&mut self, total_steps: usize) {
        self.planned_steps = total_steps;
    }

    fn latent(&mut self, global: &GlobalMatrix, learn: bool) -> Result<Vec<f64>, AgentError> {
        let vae = self.vae.as_mut().expect("latent regime has a VAE");
        if learn {
            let (mu, losses) = vae.train_step(global)?;
            self.latent_trace.push(losses);
            Ok(mu)
        } else {
            Ok(vae.encode(&global.to_chw())?.0.into_data())
        }
    }

    fn critic_inputs(
        &self,
        obs: &[Observation],
        global: &GlobalMatrix,
        latent: Option<&[f64]>,
    ) -> Vec<Vec<f64>> {
        match self.algo {
            Algorithm::Mappo => vec![global.flat().to_vec(); obs.len()],
            Algorithm::MacLight => {
                let z = latent.expect("latent present");
                obs.iter()
                    .map(|o| z.iter().chain(o.as_slice()).copied().collect())
                    .collect()
            }
            _ => obs.iter().map(|o| o.as_slice().to_vec()).collect(),
        }
    }

    fn values(&self, inputs: &[Vec<f64>]) -> Result<Vec<f64>, AgentError> {
        if self.algo == Algorithm::Mappo {
            let v = self.critics[0].eval_row(&inputs[0])?[0];
            return Ok(vec![v; inputs.len()]);
        }
        self.critics
            .iter()
            .zip(inputs)
            .map(|(c, x)| Ok(c.eval_row(x)?[0]))
            .collect()
    }

    /// Plays one episode on `env`. With `learn`, actions are sampled (or
    /// epsilon-greedy) and the learners update; otherwise actions are greedy
    /// and nothing changes.
    pub fn run_episode(&mut self, env: &mut Env, learn: bool) -> Result<EpisodeStats, AgentError> {
        let k = env.num_agents();
        if k != self.num_agents() {
            return Err(AgentError::Length {
                what: "agents",
                expected: self.num_agents(),
                got: k,
            });
        }
        let mode = if learn {
            ActMode::Sample
        } else {
            ActMode::Greedy
        };
        let mut obs = env.observations();
        let mut global = env.global_matrix(&obs);
        let mut trajs = vec![Trajectory::default(); if self.algo.is_ppo() { k } else { 0 }];
        let mut returns = vec![0.0; k];
        let mut trace = Vec::with_capacity(env.config().steps_per_episode());
        let mut vae_sum = VaeLosses::default();
        let mut vae_n = 0usize;
        let mut td_sum = 0.0;
        let mut td_n = 0usize;
        let initial_waiting = env.waiting();
        while !env.done() {
            let actions: Vec<usize> = match self.algo {
                Algorithm::Fixed => vec![self.fixed.phase_at(env.clock()); k],
                Algorithm::Idqn => {
                    let eps = if learn {
                        epsilon_at(self.train_steps, self.planned_steps.max(1), &self.cfg.idqn)
                    } else {
                        0.0
                    };
                    let mut a = Vec::with_capacity(k);
                    for (agent, o) in self.q.iter().zip(&obs) {
                        a.push(if learn {
                            agent.act(o.as_slice(), eps, &mut self.rng)?
                        } else {
                            argmax(&agent.q.eval_row(o.as_slice())?)
                        });
                    }
                    a
                }
                _ => {
                    let latent = if self.algo == Algorithm::MacLight {
                        let before = self.latent_trace.rows.len();
                        let z = self.latent(&global, learn)?;
                        if let Some(l) = self.latent_trace.rows.get(before) {
                            vae_sum.total += l.total;
                            vae_sum.recon += l.recon;
                            vae_sum.kl += l.kl;
                            vae_n += 1;
                        }
                        Some(z)
                    } else {
                        None
                    };
                    let inputs = self.critic_inputs(&obs, &global, latent.as_deref());
                    let x = Tensor::from_rows(
                        &obs.iter()
                            .map(|o| o.as_slice().to_vec())
                            .collect::<Vec<_>>(),
                    )?;
                    let mut a = Vec::with_capacity(k);
                    let mut logps = Vec::with_capacity(k);
                    for (i, actor) in self.actors.iter().enumerate() {
                        let probs = actor
                            .probabilities(&Tensor::new(vec![1, OBS_DIM], x.row(i).to_vec())?)?;
                        let (ai, lp) = select_action(probs.data(), mode, &mut self.rng);
                        a.push(ai);
                        logps.push(lp);
                    }
                    if learn {
                        let values = self.values(&inputs)?;
                        for (i, ((t, input), o)) in
                            trajs.iter_mut().zip(inputs).zip(&obs).enumerate()
                        {
                            t.push(o.as_slice().to_vec(), input, a[i], logps[i], values[i]);
                        }
                    }
                    a
                }
            };
            let out = env.step(&actions)?;
            for (r, x) in returns.iter_mut().zip(&out.rewards) {
                *r += x;
            }
            if learn {
                match self.algo {
                    Algorithm::Idqn => {
                        let cfg = &self.cfg.idqn;
                        let losses: Vec<Option<f64>> = self
                            .q
                            .par_iter_mut()
                            .zip(self.q_rngs.par_iter_mut())
                            .enumerate()
                            .map(|(i, (agent, rng))| {
                                agent.buffer.push(Transition {
                                    obs: obs[i].as_slice().to_vec(),
                                    action: actions[i],
                                    reward: out.rewards[i],
                                    next_obs: out.observations[i].as_slice().to_vec(),
                                    done: out.done,
                                });
                                idqn_update(agent, cfg, rng)
                            })
                            .collect::<Result<_, _>>()?;
                        for l in losses.into_iter().flatten() {
                            td_sum += l;
                            td_n += 1;
                        }
                    }
                    Algorithm::Fixed => {}
                    _ => {
                        for (t, &r) in trajs.iter_mut().zip(&out.rewards) {
                            t.record_outcome(r, out.done);
                        }
                    }
                }
                self.train_steps += 1;
            }
            trace.push(out.metrics);
            obs = out.observations;
            global = out.global;
        }
        let mut stats = EpisodeStats::from_trace(trace, returns);
        stats.initial_waiting = initial_waiting;
        stats.final_waiting = env.waiting();
        if learn && self.algo.is_ppo() {
            stats.update = self.update_ppo(&trajs)?;
        }
        if td_n > 0 {
            stats.update.critic_loss = td_sum / td_n as f64;
        }
        if vae_n > 0 {
            let n = vae_n as f64;
            stats.vae = Some(VaeLosses {
                total: vae_sum.total / n,
                recon: vae_sum.recon / n,
                kl: vae_sum.kl / n,
            });
        }
        Ok(stats)
    }

    /// Runs the PPO update for every agent; agents are independent and run
    /// in parallel. The shared critic of the global regime is fitted once on
    /// every agent's targets.
    fn update_ppo(&mut self, trajs: &[Trajectory]) -> Result<UpdateStats, AgentError> {
        let cfg = self.cfg.ppo.clone();
        let stats: Vec<UpdateStats> = if self.algo == Algorithm::Mappo {
            let prepared: Vec<(Vec<f64>, Vec<f64>)> = trajs
                .iter()
                .map(|t| t.advantages(&cfg))
                .collect::<Result<_, _>>()?;
            let mut per_agent: Vec<UpdateStats> = self
                .actors
                .par_iter_mut()
                .zip(trajs.par_iter())
                .zip(prepared.par_iter())
                .map(|((actor, t), (adv, _))| {
                    let a = if cfg.normalize_advantages {
                        super::normalize(adv)
                    } else {
                        adv.clone()
                    };
                    let (actor_loss, entropy) =
                        super::actor_update(actor, &t.obs, &t.actions, &t.logp_old, &a, &cfg)?;
                    Ok(UpdateStats {
                        actor_loss,
                        critic_loss: 0.0,
                        entropy,
                    })
                })
                .collect::<Result<_, AgentError>>()?;
            let inputs: Vec<Vec<f64>> = trajs
                .iter()
                .flat_map(|t| t.critic_in.iter().cloned())
                .collect();
            let targets: Vec<f64> = prepared
                .iter()
                .flat_map(|(_, y)| y.iter().copied())
                .collect();
            let closs = critic_update(&mut self.critics[0], &inputs, &targets, cfg.epochs)?;
            per_agent.iter_mut().for_each(|s| s.critic_loss = closs);
            per_agent
        } else {
            self.actors
                .par_iter_mut()
                .zip(self.critics.par_iter_mut())
                .zip(trajs.par_iter())
                .map(|((a, c), t)| ppo_update(a, c, t, &cfg))
                .collect::<Result<_, _>>()?
        };
        let n = stats.len().max(1) as f64;
        Ok(UpdateStats {
            actor_loss: stats.iter().map(|s| s.actor_loss).sum::<f64>() / n,
            critic_loss: stats.iter().map(|s| s.critic_loss).sum::<f64>() / n,
            entropy: stats.iter().map(|s| s.entropy).sum::<f64>() / n,
        })
    }

    /// Writes every network plus a small manifest into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), AgentError> {
        std::fs::create_dir_all(dir)?;
        let meta = Meta {
            algorithm: self.algo,
            num_agents: self.num_agents(),
            rows: self.rows,
            cols: self.cols,
        };
        std::fs::write(
            dir.join("meta.json"),
            serde_json::to_string_pretty(&meta)
                .map_err(|e| AgentError::Checkpoint(e.to_string()))?,
        )?;
        for (i, n) in self.actors.iter().enumerate() {
            n.save(&dir.join(format!("actor_{i}.json")))?;
        }
        for (i, n) in self.critics.iter().enumerate() {
            n.save(&dir.join(format!("critic_{i}.json")))?;
        }
        for (i, a) in self.q.iter().enumerate() {
            a.q.save(&dir.join(format!("q_{i}.json")))?;
        }
        if let Some(v) = &self.vae {
            v.save(&dir.join("vae.json"))?;
        }
        Ok(())
    }

    /// Restores networks saved by [`AgentSet::save`]; the algorithm and
    /// every tensor shape must match.
    pub fn load(&mut self, dir: &Path) -> Result<(), AgentError> {
        let meta: Meta = serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)
            .map_err(|e| AgentError::Checkpoint(e.to_string()))?;
        if meta.algorithm != self.algo || (meta.rows, meta.cols) != (self.rows, self.cols) {
            return Err(AgentError::Checkpoint(format!(
                "checkpoint holds {} on a {}x{} grid, expected {} on {}x{}",
                meta.algorithm, meta.rows, meta.cols, self.algo, self.rows, self.cols
            )));
        }
        for (i, n) in self.actors.iter_mut().enumerate() {
            n.load(&dir.join(format!("actor_{i}.json")))?;
        }
        for (i, n) in self.critics.iter_mut().enumerate() {
            n.load(&dir.join(format!("critic_{i}.json")))?;
        }
        for (i, a) in self.q.iter_mut().enumerate() {
            a.q.load(&dir.join(format!("q_{i}.json")))?;
            a.sync_target();
        }
        if let Some(v) = self.vae.as_mut() {
            v.load(&dir.join("vae.json"))?;
        }
        Ok(())
    }
}
