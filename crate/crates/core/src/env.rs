//! Multi-agent decision-step interface over [`SimState`].
//!
//! Each signalized node is one agent. Every decision step the agents pick a
//! phase, the simulator advances `decision_interval_s` seconds, and each agent
//! receives a 33-value observation of its own approaches plus a scalar reward.
//! The [`GlobalMatrix`] stacks all observations by grid position.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::microsim::{BlockEvent, SimConfig, SimError, SimState, Vehicle};
use crate::roadnet::{EdgeId, NodeId, RoadNetwork, LANES_PER_EDGE};

pub const NUM_PHASES: usize = 8;
pub const LANES_PER_NODE: usize = 4 * LANES_PER_EDGE;
/// One-hot phase, switch flag, lane densities, halting densities.
pub const OBS_DIM: usize = NUM_PHASES + 1 + 2 * LANES_PER_NODE;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("node {0} is not an agent")]
    UnknownAgent(NodeId),
    #[error("expected {expected} actions, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("no observation for node {0}")]
    MissingObservation(NodeId),
    #[error("episode already finished at {0} s")]
    Finished(f64),
    #[error("invalid environment config: {0}")]
    Config(String),
}

/// Local view of one intersection; always [`OBS_DIM`] values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation(Vec<f64>);

impl Observation {
    pub fn from_values(v: Vec<f64>) -> Option<Self> {
        (v.len() == OBS_DIM).then_some(Self(v))
    }

    pub fn zeros() -> Self {
        Self(vec![0.0; OBS_DIM])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn phase(&self) -> usize {
        self.0[..NUM_PHASES]
            .iter()
            .position(|&x| x == 1.0)
            .unwrap_or(0)
    }

    pub fn can_switch(&self) -> bool {
        self.0[NUM_PHASES] == 1.0
    }

    pub fn lane_density(&self) -> &[f64] {
        &self.0[NUM_PHASES + 1..NUM_PHASES + 1 + LANES_PER_NODE]
    }

    pub fn halting_density(&self) -> &[f64] {
        &self.0[NUM_PHASES + 1 + LANES_PER_NODE..]
    }
}

/// Observations of every signalized node laid out `rows x cols x OBS_DIM`.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalMatrix {
    pub rows: usize,
    pub cols: usize,
    data: Vec<f64>,
}

impl GlobalMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols * OBS_DIM],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.rows, self.cols, OBS_DIM]
    }

    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let start = (i * self.cols + j) * OBS_DIM;
        &self.data[start..start + OBS_DIM]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Channel-first `[1, OBS_DIM, rows, cols]` tensor for convolution.
    pub fn to_chw(&self) -> Tensor {
        let hw = self.rows * self.cols;
        let mut out = vec![0.0; OBS_DIM * hw];
        for p in 0..hw {
            for c in 0..OBS_DIM {
                out[c * hw + p] = self.data[p * OBS_DIM + c];
            }
        }
        Tensor::new(vec![1, OBS_DIM, self.rows, self.cols], out).expect("sizes agree")
    }

    /// Row-major concatenation of all cells.
    pub fn flat(&self) -> &[f64] {
        &self.data
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    /// Drop in stopped-vehicle waiting on incoming lanes since the last step.
    #[default]
    WaitingDiff,
    /// Negative absolute difference of incoming and outgoing vehicle counts.
    Pressure,
    /// Negative number of halting vehicles on incoming lanes.
    Queue,
    /// Mean speed on incoming lanes relative to free flow.
    Speed,
    /// Negative stopped-vehicle waiting on incoming lanes.
    WaitingTotal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardSpec {
    pub kind: RewardKind,
    /// Multiplier on the waiting-based kinds, keeping per-step rewards near
    /// unit scale.
    pub waiting_scale: f64,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self {
            kind: RewardKind::WaitingDiff,
            waiting_scale: 0.01,
        }
    }
}

impl RewardSpec {
    pub fn unscaled(kind: RewardKind) -> Self {
        Self {
            kind,
            waiting_scale: 1.0,
        }
    }
}

fn incoming_edges(net: &RoadNetwork, node: NodeId) -> Vec<EdgeId> {
    net.node(node).incoming.iter().flatten().copied().collect()
}

/// Waiting `W` at `node`: for each stopped vehicle on its incoming lanes, the
/// time it has stood still since entering that lane, summed.
pub fn waiting_at(state: &SimState, node: NodeId) -> f64 {
    state.stopped_wait_on(incoming_edges(state.network(), node))
}

pub fn observe(state: &SimState, node: NodeId) -> Result<Observation, EnvError> {
    let sig = state.signal(node).ok_or(EnvError::UnknownAgent(node))?;
    let net = state.network();
    let mut v = vec![0.0; OBS_DIM];
    v[sig.phase] = 1.0;
    let can = sig.yellow.is_none() && sig.time_in_phase_s >= net.phases.min_hold_s;
    v[NUM_PHASES] = f64::from(u8::from(can));
    let stop = state.config().stop_speed_mps;
    for (k, (edge, lane)) in net.incoming_lanes(node).into_iter().enumerate() {
        let cap = state.lane_capacity(edge, lane).max(1) as f64;
        let (mut n, mut halt) = (0usize, 0usize);
        for veh in state.lane_vehicles(edge, lane) {
            n += 1;
            if veh.speed_mps < stop {
                halt += 1;
            }
        }
        v[NUM_PHASES + 1 + k] = (n as f64 / cap).min(1.0);
        v[NUM_PHASES + 1 + LANES_PER_NODE + k] = (halt as f64 / cap).min(1.0);
    }
    Ok(Observation(v))
}

/// Requests phase `a` at `node`; ignored while the min-hold has not elapsed.
pub fn apply_action(state: &mut SimState, node: NodeId, a: usize) -> Result<(), EnvError> {
    if state.signal(node).is_none() {
        return Err(EnvError::UnknownAgent(node));
    }
    state.request_phase(node, a)?;
    Ok(())
}

/// Reward of `node` for the step from `prev` to `now`.
pub fn reward(prev: &SimState, now: &SimState, node: NodeId, spec: RewardSpec) -> f64 {
    match spec.kind {
        RewardKind::WaitingDiff => {
            waiting_reward(waiting_at(prev, node), waiting_at(now, node), spec)
        }
        _ => instant_reward(now, node, spec),
    }
}

/// `scale * (w_prev - w_now)`.
pub fn waiting_reward(w_prev: f64, w_now: f64, spec: RewardSpec) -> f64 {
    spec.waiting_scale * (w_prev - w_now)
}

/// Rewards that depend only on the current state.
fn instant_reward(now: &SimState, node: NodeId, spec: RewardSpec) -> f64 {
    let net = now.network();
    let stop = now.config().stop_speed_mps;
    let count = |lanes: Vec<(EdgeId, usize)>| -> usize {
        lanes
            .into_iter()
            .map(|(e, l)| now.lane(e, l).occupancy())
            .sum()
    };
    match spec.kind {
        RewardKind::WaitingDiff => unreachable!("needs the previous state"),
        RewardKind::Pressure => {
            let inc = count(net.incoming_lanes(node)) as f64;
            let out = count(net.outgoing_lanes(node)) as f64;
            -(inc - out).abs()
        }
        RewardKind::Queue => {
            let halting = net
                .incoming_lanes(node)
                .into_iter()
                .flat_map(|(e, l)| now.lane_vehicles(e, l))
                .filter(|v| v.speed_mps < stop)
                .count();
            -(halting as f64)
        }
        RewardKind::Speed => {
            let (mut n, mut s) = (0usize, 0.0);
            for v in net
                .incoming_lanes(node)
                .into_iter()
                .flat_map(|(e, l)| now.lane_vehicles(e, l))
            {
                n += 1;
                s += v.speed_mps;
            }
            if n == 0 {
                0.0
            } else {
                s / n as f64 / now.config().free_flow_mps
            }
        }
        RewardKind::WaitingTotal => -spec.waiting_scale * waiting_at(now, node),
    }
}

/// Stacks observations by the grid position of their node.
pub fn build_global_matrix(
    observations: &HashMap<NodeId, Observation>,
    net: &RoadNetwork,
) -> Result<GlobalMatrix, EnvError> {
    let (rows, cols) = net.signal_grid_dims();
    let mut m = GlobalMatrix::zeros(rows, cols);
    for &node in net.signalized() {
        let (i, j) = net
            .signal_grid_pos(node)
            .ok_or(EnvError::UnknownAgent(node))?;
        let obs = observations
            .get(&node)
            .ok_or(EnvError::MissingObservation(node))?;
        let start = (i * cols + j) * OBS_DIM;
        m.data[start..start + OBS_DIM].copy_from_slice(obs.as_slice());
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub decision_interval_s: f64,
    pub horizon_s: f64,
    pub reward: RewardSpec,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            decision_interval_s: 5.0,
            horizon_s: 3600.0,
            reward: RewardSpec::default(),
        }
    }
}

impl EnvConfig {
    pub fn steps_per_episode(&self) -> usize {
        (self.horizon_s / self.decision_interval_s).ceil() as usize
    }
}

/// System indicators after one decision step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub clock_s: f64,
    /// Accumulated wait of every stopped vehicle in the network.
    pub system_wait_s: f64,
    pub halting: usize,
    pub mean_speed: f64,
    pub reward_sum: f64,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub observations: Vec<Observation>,
    pub rewards: Vec<f64>,
    pub global: GlobalMatrix,
    pub done: bool,
    pub metrics: StepMetrics,
}

/// One episode of the multi-agent environment. Agents are the signalized
/// nodes in row-major grid order.
pub struct Env {
    sim: SimState,
    cfg: EnvConfig,
    agents: Vec<NodeId>,
    incoming: Vec<Vec<EdgeId>>,
    prev_wait: Vec<f64>,
    initial_wait: Vec<f64>,
}

impl Env {
    pub fn new(
        net: Arc<RoadNetwork>,
        sim_cfg: SimConfig,
        demand: Vec<Vehicle>,
        blocks: Vec<BlockEvent>,
        cfg: EnvConfig,
    ) -> Result<Self, EnvError> {
        if !(cfg.decision_interval_s > 0.0 && cfg.horizon_s > 0.0) {
            return Err(EnvError::Config(
                "decision interval and horizon must be positive".into(),
            ));
        }
        let mut sim = SimState::new(net, sim_cfg, demand);
        for b in blocks {
            sim.schedule_block(b)?;
        }
        Ok(Self::from_state(sim, cfg))
    }

    /// Wraps an existing simulator state.
    pub fn from_state(sim: SimState, cfg: EnvConfig) -> Self {
        let net = sim.network();
        let agents = net.signalized().to_vec();
        let incoming: Vec<Vec<EdgeId>> = agents.iter().map(|&n| incoming_edges(net, n)).collect();
        let w: Vec<f64> = incoming
            .iter()
            .map(|e| sim.stopped_wait_on(e.iter().copied()))
            .collect();
        Self {
            sim,
            cfg,
            agents,
            incoming,
            initial_wait: w.clone(),
            prev_wait: w,
        }
    }

    pub fn agents(&self) -> &[NodeId] {
        &self.agents
    }

    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn sim(&self) -> &SimState {
        &self.sim
    }

    pub fn sim_mut(&mut self) -> &mut SimState {
        &mut self.sim
    }

    pub fn into_sim(self) -> SimState {
        self.sim
    }

    pub fn clock(&self) -> f64 {
        self.sim.clock_s
    }

    pub fn done(&self) -> bool {
        self.sim.clock_s >= self.cfg.horizon_s - 1e-9
    }

    /// Current waiting `W` per agent.
    pub fn waiting(&self) -> Vec<f64> {
        self.incoming
            .iter()
            .map(|e| self.sim.stopped_wait_on(e.iter().copied()))
            .collect()
    }

    /// Waiting per agent when the episode started.
    pub fn initial_waiting(&self) -> &[f64] {
        &self.initial_wait
    }

    pub fn observations(&self) -> Vec<Observation> {
        self.agents
            .iter()
            .map(|&n| observe(&self.sim, n).expect("agents are signalized"))
            .collect()
    }

    pub fn global_matrix(&self, observations: &[Observation]) -> GlobalMatrix {
        let net = self.sim.network();
        let (rows, cols) = net.signal_grid_dims();
        let mut m = GlobalMatrix::zeros(rows, cols);
        for (&node, obs) in self.agents.iter().zip(observations) {
            let (i, j) = net.signal_grid_pos(node).expect("signalized");
            let start = (i * cols + j) * OBS_DIM;
            m.data[start..start + OBS_DIM].copy_from_slice(obs.as_slice());
        }
        m
    }

    /// Applies one action per agent, advances one decision interval and
    /// returns the new observations and rewards.
    pub fn step(&mut self, actions: &[usize]) -> Result<StepOutput, EnvError> {
        if actions.len() != self.agents.len() {
            return Err(EnvError::ActionCount {
                expected: self.agents.len(),
                got: actions.len(),
            });
        }
        if self.done() {
            return Err(EnvError::Finished(self.sim.clock_s));
        }
        for (&node, &a) in self.agents.iter().zip(actions) {
            apply_action(&mut self.sim, node, a)?;
        }
        let dt = self.sim.config().dt_s;
        let target = (self.sim.clock_s + self.cfg.decision_interval_s).min(self.cfg.horizon_s);
        while self.sim.clock_s < target - 1e-9 {
            self.sim.step(dt);
        }
        let spec = self.cfg.reward;
        let w_now = self.waiting();
        let rewards: Vec<f64> = match spec.kind {
            RewardKind::WaitingDiff => self
                .prev_wait
                .iter()
                .zip(&w_now)
                .map(|(&p, &n)| waiting_reward(p, n, spec))
                .collect(),
            _ => self
                .agents
                .iter()
                .map(|&n| instant_reward(&self.sim, n, spec))
                .collect(),
        };
        self.prev_wait = w_now;
        let observations = self.observations();
        let global = self.global_matrix(&observations);
        let m = self.sim.metrics();
        Ok(StepOutput {
            metrics: StepMetrics {
                clock_s: self.sim.clock_s,
                system_wait_s: m.stopped_wait_s,
                halting: m.halting,
                mean_speed: m.mean_speed,
                reward_sum: rewards.iter().sum(),
            },
            observations,
            rewards,
            global,
            done: self.done(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roadnet::build_grid;

    fn empty_env() -> Env {
        let net = Arc::new(build_grid(6, 6, 200.0).unwrap());
        Env::new(
            net,
            SimConfig::default(),
            Vec::new(),
            Vec::new(),
            EnvConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn observation_layout() {
        assert_eq!(OBS_DIM, 33);
        let env = empty_env();
        let obs = env.observations();
        assert_eq!(obs.len(), 16);
        for o in &obs {
            assert_eq!(o.as_slice().len(), 33);
            assert_eq!(o.phase(), 0);
            assert!(!o.can_switch());
            assert!(o
                .lane_density()
                .iter()
                .chain(o.halting_density())
                .all(|&x| x == 0.0));
        }
    }

    #[test]
    fn can_switch_after_min_hold() {
        let mut env = empty_env();
        env.step(&[0; 16]).unwrap();
        assert!(!env.observations()[0].can_switch());
        env.step(&[0; 16]).unwrap();
        assert!(env.observations()[0].can_switch());
    }

    #[test]
    fn waiting_reward_substitution() {
        assert_eq!(
            waiting_reward(10.0, 4.0, RewardSpec::unscaled(RewardKind::WaitingDiff)),
            6.0
        );
        assert_eq!(waiting_reward(3.0, 3.0, RewardSpec::default()), 0.0);
    }

    #[test]
    fn empty_network_gives_zero_rewards() {
        let mut env = empty_env();
        let mut steps = 0;
        while !env.done() {
            let out = env.step(&[0; 16]).unwrap();
            assert!(out.rewards.iter().all(|&r| r == 0.0));
            steps += 1;
        }
        assert_eq!(steps, 720);
        assert!(env.step(&[0; 16]).is_err());
    }

    #[test]
    fn wrong_action_count_rejected() {
        let mut env = empty_env();
        assert_eq!(
            env.step(&[0; 3]).unwrap_err(),
            EnvError::ActionCount {
                expected: 16,
                got: 3
            }
        );
        assert!(env.step(&[9; 16]).is_err());
    }

    #[test]
    fn global_matrix_cells_match_observations() {
        let env = empty_env();
        let obs = env.observations();
        let map: HashMap<NodeId, Observation> = env
            .agents()
            .iter()
            .copied()
            .zip(obs.iter().cloned())
            .collect();
        let m = build_global_matrix(&map, env.sim().network()).unwrap();
        assert_eq!(m.shape(), [4, 4, 33]);
        assert_eq!(m, env.global_matrix(&obs));
        let mut partial = map.clone();
        partial.remove(&env.agents()[3]);
        assert!(build_global_matrix(&partial, env.sim().network()).is_err());
    }

    #[test]
    fn chw_transpose_round_trip() {
        let mut m = GlobalMatrix::zeros(2, 3);
        for (i, x) in m.data.iter_mut().enumerate() {
            *x = i as f64;
        }
        let t = m.to_chw();
        assert_eq!(t.shape(), &[1, 33, 2, 3]);
        // channel 5 of cell (1, 2)
        assert_eq!(t.data()[5 * 6 + 5], m.cell(1, 2)[5]);
    }
}
