use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{HarnessError, ScenarioConfig};
use crate::agents::{AgentSet, Algorithm, EpisodeStats};
use crate::env::Env;
use crate::microsim::{generate_demand, Vehicle};
use crate::roadnet::RoadNetwork;

/// One row of the results table. Return and speed are better when higher,
/// wait and queue when lower.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub episode: usize,
    #[serde(rename = "return")]
    pub ret: f64,
    pub wait: f64,
    pub queue: f64,
    pub speed: f64,
}

impl RunRecord {
    pub fn from_stats(seed: u64, episode: usize, s: &EpisodeStats) -> Self {
        Self {
            seed,
            episode,
            ret: s.ret,
            wait: s.wait,
            queue: s.queue,
            speed: s.speed,
        }
    }
}

pub fn write_records<W: Write>(records: &[RunRecord], w: W) -> Result<(), HarnessError> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>, HarnessError> {
    let mut rd = csv::Reader::from_path(path)?;
    Ok(rd.deserialize().collect::<Result<_, _>>()?)
}

/// Everything a finished seed leaves behind.
pub struct SeedRun {
    pub seed: u64,
    pub records: Vec<RunRecord>,
    pub stats: Vec<EpisodeStats>,
    pub agents: AgentSet,
}

/// Demand for a seed. Every episode of a seed replays the same trips.
pub fn demand_for(
    cfg: &ScenarioConfig,
    net: &RoadNetwork,
    seed: u64,
) -> Result<Vec<Vehicle>, HarnessError> {
    generate_demand(net, cfg.total_vehicles, cfg.horizon_s, seed)
        .map_err(|e| HarnessError::Runtime(format!("seed {seed}: {e}")))
}

pub fn make_env(
    cfg: &ScenarioConfig,
    net: &Arc<RoadNetwork>,
    demand: &[Vehicle],
    seed: u64,
    episode: usize,
) -> Result<Env, HarnessError> {
    let blocks = cfg.blocks_for(net, seed, episode)?;
    Env::new(
        Arc::clone(net),
        cfg.sim.clone(),
        demand.to_vec(),
        blocks,
        cfg.env_config(),
    )
    .map_err(|e| HarnessError::Runtime(format!("seed {seed} episode {episode}: {e}")))
}

fn new_agents(
    cfg: &ScenarioConfig,
    net: &RoadNetwork,
    seed: u64,
) -> Result<AgentSet, HarnessError> {
    let (r, c) = net.signal_grid_dims();
    AgentSet::new(cfg.algorithm, r, c, cfg.agents.clone(), seed)
        .map_err(|e| HarnessError::Config(e.to_string()))
}

/// Trains (or, for the fixed controller, just runs) one seed.
pub fn run_seed(cfg: &ScenarioConfig, seed: u64) -> Result<SeedRun, HarnessError> {
    let net = Arc::new(cfg.build_network()?);
    let demand = demand_for(cfg, &net, seed)?;
    let mut agents = new_agents(cfg, &net, seed)?;
    agents.plan_training(cfg.episodes * cfg.steps_per_episode());
    let learn = cfg.algorithm != Algorithm::Fixed;
    let mut records = Vec::with_capacity(cfg.episodes);
    let mut stats = Vec::with_capacity(cfg.episodes);
    for episode in 0..cfg.episodes {
        let mut env = make_env(cfg, &net, &demand, seed, episode)?;
        let s = agents
            .run_episode(&mut env, learn)
            .map_err(|e| HarnessError::Runtime(format!("seed {seed} episode {episode}: {e}")))?;
        log::info!(
            "{} seed {seed} episode {episode}: return {:.3} wait {:.0} queue {:.2} speed {:.2}",
            cfg.algorithm,
            s.ret,
            s.wait,
            s.queue,
            s.speed
        );
        records.push(RunRecord::from_stats(seed, episode, &s));
        stats.push(s);
    }
    Ok(SeedRun {
        seed,
        records,
        stats,
        agents,
    })
}

/// Runs every seed in parallel and returns the seed runs in seed-list order.
pub fn run_seeds(cfg: &ScenarioConfig) -> Result<Vec<SeedRun>, HarnessError> {
    cfg.validate()?;
    cfg.seeds.par_iter().map(|&s| run_seed(cfg, s)).collect()
}

/// One record per seed and episode, ordered by seed then episode.
pub fn run_experiment(cfg: &ScenarioConfig) -> Result<Vec<RunRecord>, HarnessError> {
    Ok(run_seeds(cfg)?
        .into_iter()
        .flat_map(|r| r.records)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_seed: Vec<RunRecord>,
    pub mean_return: f64,
}

/// Greedy rollouts without learning, one episode per seed. `checkpoint`
/// points at a directory written by [`AgentSet::save`]; without one, the
/// freshly initialised networks of each seed are evaluated.
pub fn evaluate(
    cfg: &ScenarioConfig,
    checkpoint: Option<&Path>,
) -> Result<EvalReport, HarnessError> {
    cfg.validate()?;
    let net = Arc::new(cfg.build_network()?);
    let per_seed: Vec<RunRecord> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let mut agents = new_agents(cfg, &net, seed)?;
            if let Some(dir) = checkpoint {
                agents.load(dir).map_err(|e| {
                    HarnessError::Runtime(format!("loading {}: {e}", dir.display()))
                })?;
            }
            let demand = demand_for(cfg, &net, seed)?;
            let mut env = make_env(cfg, &net, &demand, seed, 0)?;
            let s = agents
                .run_episode(&mut env, false)
                .map_err(|e| HarnessError::Runtime(format!("seed {seed}: {e}")))?;
            Ok(RunRecord::from_stats(seed, 0, &s))
        })
        .collect::<Result<_, HarnessError>>()?;
    let mean_return = per_seed.iter().map(|r| r.ret).sum::<f64>() / per_seed.len() as f64;
    Ok(EvalReport {
        per_seed,
        mean_return,
    })
}

/// One JSON line per episode: per-agent returns, the system return and
/// the losses of that episode's update.
pub fn training_log_line(seed: u64, episode: usize, s: &EpisodeStats) -> String {
    let n = s.agent_returns.len().max(1) as f64;
    let mut v = serde_json::json!({
        "seed": seed,
        "episode": episode,
        "return": s.ret,
        "mean_agent_return": s.ret / n,
        "agent_returns": s.agent_returns,
        "actor_loss": s.update.actor_loss,
        "critic_loss": s.update.critic_loss,
        "entropy": s.update.entropy,
    });
    if let Some(l) = &s.vae {
        v["vae_total"] = l.total.into();
        v["vae_recon"] = l.recon.into();
        v["vae_kl"] = l.kl.into();
    }
    v.to_string()
}

pub fn write_training_log<W: Write>(runs: &[SeedRun], mut w: W) -> Result<(), HarnessError> {
    for r in runs {
        for (ep, s) in r.stats.iter().enumerate() {
            writeln!(w, "{}", training_log_line(r.seed, ep, s))?;
        }
    }
    Ok(())
}

/// Per-decision-step system indicators of one episode.
pub fn write_trace<W: Write>(trace: &[crate::env::StepMetrics], w: W) -> Result<(), HarnessError> {
    let mut out = csv::Writer::from_writer(w);
    for m in trace {
        out.serialize(m)?;
    }
    out.flush()?;
    Ok(())
}
