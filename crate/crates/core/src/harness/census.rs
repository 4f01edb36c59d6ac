use std::io::Write;
use std::sync::Arc;

use serde::Serialize;

use super::run::{demand_for, make_env};
use super::{HarnessError, ScenarioConfig};
use crate::agents::{AgentSet, Algorithm};
use crate::roadnet::RoadNetwork;

/// Per-edge, per-minute entrant counts of a blocked run and its unblocked
/// twin on the same demand, both under the fixed-time controller.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowCensus {
    pub edges: Vec<String>,
    /// Direction sign: +1 for the edge whose name sorts before its reverse.
    pub sign: Vec<i8>,
    pub baseline: Vec<Vec<u32>>,
    pub blocked: Vec<Vec<u32>>,
    /// Closed edges and their window.
    pub windows: Vec<(Vec<String>, f64, f64)>,
    pub minutes: usize,
}

#[derive(Serialize)]
struct Row<'a> {
    edge: &'a str,
    minute: usize,
    baseline: i64,
    blocked: i64,
}

impl FlowCensus {
    pub fn edge_index(&self, name: &str) -> Option<usize> {
        self.edges.iter().position(|e| e == name)
    }

    pub fn total(bins: &[u32]) -> u64 {
        bins.iter().map(|&c| u64::from(c)).sum()
    }

    /// Counts with the direction sign applied, as `(baseline, blocked)`.
    pub fn signed(&self, edge: usize) -> (Vec<i64>, Vec<i64>) {
        let s = i64::from(self.sign[edge]);
        let f = |b: &[u32]| b.iter().map(|&c| s * i64::from(c)).collect();
        (f(&self.baseline[edge]), f(&self.blocked[edge]))
    }

    /// `edge,minute,baseline,blocked` with signed counts.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), HarnessError> {
        let mut out = csv::Writer::from_writer(w);
        for (e, name) in self.edges.iter().enumerate() {
            let (b, k) = self.signed(e);
            for m in 0..self.minutes {
                out.serialize(Row {
                    edge: name,
                    minute: m,
                    baseline: b[m],
                    blocked: k[m],
                })?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

fn direction_signs(net: &RoadNetwork) -> Vec<i8> {
    net.edges
        .iter()
        .map(|e| match net.reverse_edge(e.id) {
            Some(r) if net.edge(r).name < e.name => -1,
            _ => 1,
        })
        .collect()
}

fn fixed_run(
    cfg: &ScenarioConfig,
    net: &Arc<RoadNetwork>,
    seed: u64,
    with_blocks: bool,
) -> Result<Vec<Vec<u32>>, HarnessError> {
    let mut plain = cfg.clone();
    plain.algorithm = Algorithm::Fixed;
    if !with_blocks {
        plain.block_events.clear();
        plain.random_blocks = None;
    }
    let demand = demand_for(&plain, net, seed)?;
    let mut env = make_env(&plain, net, &demand, seed, 0)?;
    env.sim_mut().record_flows();
    let (r, c) = net.signal_grid_dims();
    let mut agents = AgentSet::new(Algorithm::Fixed, r, c, plain.agents.clone(), seed)
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    agents
        .run_episode(&mut env, false)
        .map_err(|e| HarnessError::Runtime(e.to_string()))?;
    let minutes = (cfg.horizon_s / 60.0).ceil() as usize;
    let sim = env.into_sim();
    let bins = sim.flow_bins().expect("flows recorded");
    Ok(bins
        .iter()
        .map(|b| {
            let mut v = b.clone();
            v.resize(minutes.max(v.len()), 0);
            v
        })
        .collect())
}

/// Paired censuses for `seed`: the scenario as configured, and the same
/// scenario with every block removed.
pub fn flow_census(cfg: &ScenarioConfig, seed: u64) -> Result<FlowCensus, HarnessError> {
    cfg.validate()?;
    let net = Arc::new(cfg.build_network()?);
    let blocked = fixed_run(cfg, &net, seed, true)?;
    let baseline = fixed_run(cfg, &net, seed, false)?;
    let windows = cfg
        .blocks_for(&net, seed, 0)?
        .into_iter()
        .map(|b| {
            (
                b.edges.iter().map(|&e| net.edge(e).name.clone()).collect(),
                b.start_s,
                b.end_s,
            )
        })
        .collect();
    let minutes = baseline
        .iter()
        .chain(&blocked)
        .map(Vec::len)
        .max()
        .unwrap_or(0);
    let pad = |mut v: Vec<Vec<u32>>| {
        v.iter_mut().for_each(|b| b.resize(minutes, 0));
        v
    };
    Ok(FlowCensus {
        edges: net.edges.iter().map(|e| e.name.clone()).collect(),
        sign: direction_signs(&net),
        baseline: pad(baseline),
        blocked: pad(blocked),
        windows,
        minutes,
    })
}
