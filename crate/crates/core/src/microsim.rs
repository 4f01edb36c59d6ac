//! Deterministic point-queue traffic simulation.
//!
//! Each lane holds a FIFO of running vehicles travelling at free-flow speed
//! (constrained by the vehicle ahead) and a FIFO queue stacked back from the
//! stop line. Queue heads cross the intersection at the saturation headway
//! while their movement is green and the target lane has room. Block events
//! close edges and make every active vehicle recompute its route.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::roadnet::{EdgeId, Movement, NodeId, RoadNetError, RoadNetwork, Turn};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("network has {0} boundary nodes; demand needs at least 2")]
    TooFewBoundaryNodes(usize),
    #[error("invalid demand: {0}")]
    InvalidDemand(String),
    #[error("no route from node {from} to node {to}")]
    NoRoute { from: NodeId, to: NodeId },
    #[error("route endpoints coincide (node {0})")]
    SameEndpoints(NodeId),
    #[error("invalid block event: {0}")]
    InvalidBlock(String),
    #[error("node {0} has no signal")]
    NotSignalized(NodeId),
    #[error("phase {phase} out of range (table has {len})")]
    PhaseOutOfRange { phase: usize, len: usize },
    #[error(transparent)]
    Network(#[from] RoadNetError),
}

/// Simulation constants. Defaults follow common traffic-engineering values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub dt_s: f64,
    pub free_flow_mps: f64,
    pub vehicle_length_m: f64,
    pub saturation_headway_s: f64,
    pub stop_speed_mps: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt_s: 1.0,
            free_flow_mps: 13.89,
            vehicle_length_m: 7.5,
            saturation_headway_s: 2.0,
            stop_speed_mps: 0.1,
        }
    }
}

impl SimConfig {
    pub fn lane_capacity(&self, length_m: f64) -> usize {
        (length_m / self.vehicle_length_m).floor() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VehicleStatus {
    /// Not yet departed.
    Scheduled,
    /// Departed but waiting for room on its first edge.
    Backlogged,
    Running,
    Queued,
    Arrived,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vehicle {
    pub id: usize,
    pub origin: NodeId,
    pub destination: NodeId,
    pub depart_time_s: f64,
    pub route: Vec<EdgeId>,
    /// Index into `route` of the edge currently occupied.
    pub route_pos: usize,
    pub lane: usize,
    pub offset_m: f64,
    pub speed_mps: f64,
    /// Stopped time over the whole trip.
    pub accumulated_wait_s: f64,
    /// Stopped time since entering the current edge.
    pub edge_wait_s: f64,
    pub status: VehicleStatus,
    /// Set when the last reroute found no path; retried every tick.
    pub stranded: bool,
}

impl Vehicle {
    pub fn current_edge(&self) -> EdgeId {
        self.route[self.route_pos]
    }

    pub fn next_edge(&self) -> Option<EdgeId> {
        self.route.get(self.route_pos + 1).copied()
    }

    pub fn on_network(&self) -> bool {
        matches!(self.status, VehicleStatus::Running | VehicleStatus::Queued)
    }

    pub fn active(&self) -> bool {
        matches!(
            self.status,
            VehicleStatus::Backlogged | VehicleStatus::Running | VehicleStatus::Queued
        )
    }
}

/// Temporary closure of a set of edges over `[start_s, end_s)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockEvent {
    pub edges: Vec<EdgeId>,
    pub start_s: f64,
    pub end_s: f64,
}

impl BlockEvent {
    pub fn new(
        net: &RoadNetwork,
        edges: Vec<EdgeId>,
        start_s: f64,
        end_s: f64,
    ) -> Result<Self, SimError> {
        if !(start_s < end_s) {
            return Err(SimError::InvalidBlock(format!(
                "start {start_s} must precede end {end_s}"
            )));
        }
        if let Some(&e) = edges.iter().find(|&&e| e >= net.edges.len()) {
            return Err(SimError::InvalidBlock(format!(
                "edge id {e} does not exist"
            )));
        }
        Ok(Self {
            edges,
            start_s,
            end_s,
        })
    }

    pub fn from_names<S: AsRef<str>>(
        net: &RoadNetwork,
        names: &[S],
        start_s: f64,
        end_s: f64,
    ) -> Result<Self, SimError> {
        let edges = names
            .iter()
            .map(|n| net.edge_by_name(n.as_ref()))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(net, edges, start_s, end_s)
    }

    pub fn contains(&self, clock_s: f64) -> bool {
        clock_s >= self.start_s && clock_s < self.end_s
    }
}

/// Generates `total_vehicles` trips with departures uniform over
/// `[0, horizon_s)` between distinct boundary nodes chosen uniformly.
/// Vehicles are returned in departure order with ids `0..n`.
pub fn generate_demand(
    net: &RoadNetwork,
    total_vehicles: usize,
    horizon_s: f64,
    seed: u64,
) -> Result<Vec<Vehicle>, SimError> {
    if total_vehicles == 0 {
        return Err(SimError::InvalidDemand(
            "total_vehicles must be positive".into(),
        ));
    }
    if !(horizon_s > 0.0) {
        return Err(SimError::InvalidDemand(format!(
            "horizon must be positive, got {horizon_s}"
        )));
    }
    let boundary = net.boundary_nodes();
    if boundary.len() < 2 {
        return Err(SimError::TooFewBoundaryNodes(boundary.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trips: Vec<(f64, NodeId, NodeId)> = (0..total_vehicles)
        .map(|_| {
            let t = rng.random_range(0.0..horizon_s);
            let o = boundary[rng.random_range(0..boundary.len())];
            let mut d = boundary[rng.random_range(0..boundary.len())];
            while d == o {
                d = boundary[rng.random_range(0..boundary.len())];
            }
            (t, o, d)
        })
        .collect();
    trips.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut cache = std::collections::HashMap::new();
    let closed = vec![false; net.edges.len()];
    trips
        .into_iter()
        .enumerate()
        .map(|(id, (t, o, d))| {
            let route = match cache.get(&(o, d)) {
                Some(r) => Vec::clone(r),
                None => {
                    let r = shortest_route(net, o, d, &closed)?;
                    cache.insert((o, d), r.clone());
                    r
                }
            };
            Ok(Vehicle {
                id,
                origin: o,
                destination: d,
                depart_time_s: t,
                route,
                route_pos: 0,
                lane: 0,
                offset_m: 0.0,
                speed_mps: 0.0,
                accumulated_wait_s: 0.0,
                edge_wait_s: 0.0,
                status: VehicleStatus::Scheduled,
                stranded: false,
            })
        })
        .collect()
}

#[derive(Clone, Copy, PartialEq)]
struct HeapItem(f64, NodeId);

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .total_cmp(&self.0)
            .then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Free-flow distance from every node to `to` over open edges, never passing
/// through a boundary node on the way.
fn distances_to(net: &RoadNetwork, to: NodeId, closed: &[bool]) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; net.nodes.len()];
    dist[to] = 0.0;
    let mut heap = BinaryHeap::from([HeapItem(0.0, to)]);
    while let Some(HeapItem(d, v)) = heap.pop() {
        // boundary nodes are sinks and sources only; no path runs through one
        if d > dist[v] || (v != to && !net.node(v).has_signal) {
            continue;
        }
        for &e in net.node(v).incoming.iter().flatten() {
            if closed[e] {
                continue;
            }
            let edge = net.edge(e);
            let nd = d + edge.length_m;
            if nd < dist[edge.from] {
                dist[edge.from] = nd;
                heap.push(HeapItem(nd, edge.from));
            }
        }
    }
    dist
}

fn tight(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(1.0)
}

fn best_step(
    net: &RoadNetwork,
    node: NodeId,
    dist: &[f64],
    to: NodeId,
    closed: &[bool],
    forbid: Option<EdgeId>,
) -> Option<EdgeId> {
    let mut best: Option<(f64, EdgeId)> = None;
    let mut outs: Vec<EdgeId> = net.node(node).outgoing.iter().flatten().copied().collect();
    outs.sort_unstable();
    for e in outs {
        let head = net.edge(e).to;
        if closed[e] || Some(e) == forbid || (head != to && !net.node(head).has_signal) {
            continue;
        }
        let cost = net.edge(e).length_m + dist[net.edge(e).to];
        if !cost.is_finite() {
            continue;
        }
        match best {
            Some((c, _)) if !(cost < c) || tight(cost, c) => {}
            _ => best = Some((cost, e)),
        }
    }
    best.map(|(_, e)| e)
}

fn walk(
    net: &RoadNetwork,
    mut node: NodeId,
    to: NodeId,
    dist: &[f64],
    closed: &[bool],
    route: &mut Vec<EdgeId>,
) {
    while node != to {
        let e = best_step(net, node, dist, to, closed, None)
            .expect("finite distance implies a tight edge");
        route.push(e);
        node = net.edge(e).to;
    }
}

/// Minimal free-flow path from `from` to `to` avoiding `closed` edges. Among
/// equal-length paths the one with the lexicographically smallest edge-id
/// sequence is chosen.
pub fn shortest_route(
    net: &RoadNetwork,
    from: NodeId,
    to: NodeId,
    closed: &[bool],
) -> Result<Vec<EdgeId>, SimError> {
    if from == to {
        return Err(SimError::SameEndpoints(from));
    }
    let dist = distances_to(net, to, closed);
    if !dist[from].is_finite() {
        return Err(SimError::NoRoute { from, to });
    }
    let mut route = Vec::new();
    walk(net, from, to, &dist, closed, &mut route);
    Ok(route)
}

/// Continuation of a route for a vehicle currently on `edge`: the shortest
/// path from the edge's downstream node that does not begin with a U-turn.
/// Empty when `edge` already ends at `to`.
pub fn shortest_route_from_edge(
    net: &RoadNetwork,
    edge: EdgeId,
    to: NodeId,
    closed: &[bool],
) -> Result<Vec<EdgeId>, SimError> {
    let head = net.edge(edge).to;
    if head == to {
        return Ok(Vec::new());
    }
    let dist = distances_to(net, to, closed);
    let first = best_step(net, head, &dist, to, closed, net.reverse_edge(edge))
        .ok_or(SimError::NoRoute { from: head, to })?;
    let mut route = vec![first];
    walk(net, net.edge(first).to, to, &dist, closed, &mut route);
    Ok(route)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LaneState {
    pub running: VecDeque<usize>,
    pub queue: VecDeque<usize>,
    pub next_discharge_s: f64,
}

impl LaneState {
    pub fn occupancy(&self) -> usize {
        self.running.len() + self.queue.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Yellow {
    pub target: usize,
    pub remaining_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalState {
    pub phase: usize,
    pub time_in_phase_s: f64,
    pub yellow: Option<Yellow>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum PhaseEventKind {
    YellowStart { from: usize, to: usize },
    Green { phase: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseEvent {
    pub clock_s: f64,
    pub node: NodeId,
    pub kind: PhaseEventKind,
}

/// Outcome of a phase request.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhaseRequest {
    /// Requested phase already active.
    Unchanged,
    /// Ignored: min-hold not reached or a yellow is in progress.
    Held,
    /// Yellow started; the new phase follows.
    Switching,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LaneStats {
    pub vehicle_count: usize,
    pub halting_count: usize,
    pub mean_speed: f64,
}

/// Network-wide probe taken after each tick.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TickMetrics {
    pub clock_s: f64,
    pub spawned: usize,
    pub active: usize,
    pub arrived: usize,
    pub on_network: usize,
    pub halting: usize,
    pub mean_speed: f64,
    /// Accumulated wait of all currently stopped vehicles.
    pub stopped_wait_s: f64,
}

#[derive(Clone, Debug)]
struct ScheduledBlock {
    event: BlockEvent,
    active: bool,
}

/// Complete simulator state. Cloning is cheap relative to a tick and yields an
/// independent copy.
#[derive(Clone, Debug)]
pub struct SimState {
    net: Arc<RoadNetwork>,
    cfg: SimConfig,
    pub clock_s: f64,
    pub vehicles: Vec<Vehicle>,
    scheduled: VecDeque<usize>,
    /// Departed vehicles waiting to enter, keyed by first edge.
    backlog: Vec<VecDeque<usize>>,
    lanes: Vec<LaneState>,
    capacity: Vec<usize>,
    signals: Vec<Option<SignalState>>,
    blocks: Vec<ScheduledBlock>,
    closed: Vec<u32>,
    pub spawned: usize,
    pub arrived: usize,
    pub reroutes: usize,
    entrants: Vec<u64>,
    flow_bins: Option<Vec<Vec<u32>>>,
    phase_log: Vec<PhaseEvent>,
}

impl SimState {
    /// Starts an empty network at clock 0 with every signal on phase 0.
    pub fn new(net: Arc<RoadNetwork>, cfg: SimConfig, mut demand: Vec<Vehicle>) -> Self {
        demand.sort_by(|a, b| {
            a.depart_time_s
                .total_cmp(&b.depart_time_s)
                .then(a.id.cmp(&b.id))
        });
        for (i, v) in demand.iter_mut().enumerate() {
            v.id = i;
        }
        let n_edges = net.edges.len();
        let lanes = vec![LaneState::default(); n_edges * crate::roadnet::LANES_PER_EDGE];
        let capacity = net
            .edges
            .iter()
            .flat_map(|e| std::iter::repeat_n(cfg.lane_capacity(e.length_m), e.lanes))
            .collect();
        let signals = net
            .nodes
            .iter()
            .map(|n| {
                n.has_signal.then_some(SignalState {
                    phase: 0,
                    time_in_phase_s: 0.0,
                    yellow: None,
                })
            })
            .collect();
        Self {
            scheduled: (0..demand.len()).collect(),
            vehicles: demand,
            backlog: vec![VecDeque::new(); n_edges],
            lanes,
            capacity,
            signals,
            blocks: Vec::new(),
            closed: vec![0; n_edges],
            spawned: 0,
            arrived: 0,
            reroutes: 0,
            entrants: vec![0; n_edges],
            flow_bins: None,
            phase_log: Vec::new(),
            clock_s: 0.0,
            cfg,
            net,
        }
    }

    pub fn network(&self) -> &RoadNetwork {
        &self.net
    }

    pub fn network_arc(&self) -> &Arc<RoadNetwork> {
        &self.net
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    /// Enables per-edge, per-minute entrant counting.
    pub fn record_flows(&mut self) {
        if self.flow_bins.is_none() {
            self.flow_bins = Some(vec![Vec::new(); self.net.edges.len()]);
        }
    }

    pub fn flow_bins(&self) -> Option<&[Vec<u32>]> {
        self.flow_bins.as_deref()
    }

    /// Total vehicles that have entered each edge.
    pub fn entrants(&self) -> &[u64] {
        &self.entrants
    }

    pub fn phase_log(&self) -> &[PhaseEvent] {
        &self.phase_log
    }

    pub fn signal(&self, node: NodeId) -> Option<&SignalState> {
        self.signals.get(node).and_then(Option::as_ref)
    }

    pub fn lane(&self, edge: EdgeId, lane: usize) -> &LaneState {
        &self.lanes[edge * crate::roadnet::LANES_PER_EDGE + lane]
    }

    pub fn lane_capacity(&self, edge: EdgeId, lane: usize) -> usize {
        self.capacity[edge * crate::roadnet::LANES_PER_EDGE + lane]
    }

    pub fn is_closed(&self, edge: EdgeId) -> bool {
        self.closed[edge] > 0
    }

    pub fn active_count(&self) -> usize {
        self.spawned - self.arrived
    }

    pub fn on_network_count(&self) -> usize {
        self.lanes.iter().map(LaneState::occupancy).sum()
    }

    /// Queues a block event; it closes and reopens its edges automatically.
    pub fn schedule_block(&mut self, ev: BlockEvent) -> Result<(), SimError> {
        if let Some(&e) = ev.edges.iter().find(|&&e| e >= self.net.edges.len()) {
            return Err(SimError::InvalidBlock(format!(
                "edge id {e} does not exist"
            )));
        }
        if !(ev.start_s < ev.end_s) {
            return Err(SimError::InvalidBlock("start must precede end".into()));
        }
        self.blocks.push(ScheduledBlock {
            event: ev,
            active: false,
        });
        Ok(())
    }

    /// Closes `ev.edges` now and reroutes every active vehicle whose remaining
    /// route uses a closed edge. Vehicles already on a closed edge finish it.
    pub fn apply_block(&mut self, ev: &BlockEvent) -> Result<(), SimError> {
        if !ev.contains(self.clock_s) {
            return Err(SimError::InvalidBlock(format!(
                "clock {} outside window [{}, {})",
                self.clock_s, ev.start_s, ev.end_s
            )));
        }
        for &e in &ev.edges {
            self.closed[e] += 1;
        }
        self.reroute_all(true);
        Ok(())
    }

    fn lift_block(&mut self, ev: &BlockEvent) {
        for &e in &ev.edges {
            self.closed[e] = self.closed[e].saturating_sub(1);
        }
        self.reroute_all(false);
    }

    fn closed_mask(&self) -> Vec<bool> {
        self.closed.iter().map(|&c| c > 0).collect()
    }

    /// Recomputes routes. With `only_affected`, only vehicles whose remaining
    /// route touches a closed edge are rerouted.
    fn reroute_all(&mut self, only_affected: bool) {
        let mask = self.closed_mask();
        for id in 0..self.vehicles.len() {
            if !self.vehicles[id].active() {
                continue;
            }
            let v = &self.vehicles[id];
            let rest = &v.route[v.route_pos + usize::from(v.on_network())..];
            if only_affected && !v.stranded && !rest.iter().any(|&e| mask[e]) {
                continue;
            }
            self.reroute(id, &mask);
        }
    }

    fn reroute(&mut self, id: usize, mask: &[bool]) {
        let net = Arc::clone(&self.net);
        let v = &mut self.vehicles[id];
        let result = if v.on_network() {
            shortest_route_from_edge(&net, v.current_edge(), v.destination, mask).map(|tail| {
                let mut r = v.route[..=v.route_pos].to_vec();
                r.extend(tail);
                r
            })
        } else {
            shortest_route(&net, v.origin, v.destination, mask)
        };
        match result {
            Ok(r) => {
                if r != v.route {
                    self.reroutes += 1;
                }
                v.route = r;
                v.stranded = false;
            }
            Err(err) => {
                if !v.stranded {
                    log::debug!("vehicle {id} holds position: {err}");
                }
                v.stranded = true;
            }
        }
    }

    /// Requests phase `phase` at `node`. Honoured only when the current green
    /// has been held for at least the table's min-hold; then the yellow starts.
    pub fn request_phase(&mut self, node: NodeId, phase: usize) -> Result<PhaseRequest, SimError> {
        let len = self.net.phases.len();
        if phase >= len {
            return Err(SimError::PhaseOutOfRange { phase, len });
        }
        let min_hold = self.net.phases.min_hold_s;
        let yellow_s = self.net.phases.yellow_duration_s;
        let clock = self.clock_s;
        let sig = self
            .signals
            .get_mut(node)
            .and_then(Option::as_mut)
            .ok_or(SimError::NotSignalized(node))?;
        if sig.yellow.is_some() {
            return Ok(PhaseRequest::Held);
        }
        if sig.phase == phase {
            return Ok(PhaseRequest::Unchanged);
        }
        if sig.time_in_phase_s < min_hold {
            return Ok(PhaseRequest::Held);
        }
        let from = sig.phase;
        if yellow_s > 0.0 {
            sig.yellow = Some(Yellow {
                target: phase,
                remaining_s: yellow_s,
            });
        } else {
            sig.phase = phase;
            sig.time_in_phase_s = 0.0;
        }
        self.phase_log.push(PhaseEvent {
            clock_s: clock,
            node,
            kind: PhaseEventKind::YellowStart { from, to: phase },
        });
        if yellow_s <= 0.0 {
            self.phase_log.push(PhaseEvent {
                clock_s: clock,
                node,
                kind: PhaseEventKind::Green { phase },
            });
        }
        Ok(PhaseRequest::Switching)
    }

    /// Whether `m` may cross at `node` right now. During a yellow only the
    /// movements green in both the old and new phase keep going.
    pub fn is_green(&self, node: NodeId, m: Movement) -> bool {
        let Some(sig) = self.signal(node) else {
            return true;
        };
        let phases = &self.net.phases.phases;
        let current = phases[sig.phase].permits(m);
        match sig.yellow {
            Some(y) => current && phases[y.target].permits(m),
            None => current,
        }
    }

    fn lane_index(edge: EdgeId, lane: usize) -> usize {
        edge * crate::roadnet::LANES_PER_EDGE + lane
    }

    /// Lane a vehicle should take on `edge` given the edge after it.
    fn target_lane(&self, edge: EdgeId, after: Option<EdgeId>) -> usize {
        let turn = after
            .and_then(|n| self.net.movement(edge, n))
            .map(|m| m.turn)
            .unwrap_or(Turn::Straight);
        match turn {
            Turn::Left => 0,
            Turn::Right => 2,
            Turn::Straight => {
                let a = self.lanes[Self::lane_index(edge, 1)].occupancy();
                let b = self.lanes[Self::lane_index(edge, 2)].occupancy();
                if b < a {
                    2
                } else {
                    1
                }
            }
        }
    }

    fn has_room(&self, edge: EdgeId, lane: usize) -> bool {
        let i = Self::lane_index(edge, lane);
        self.lanes[i].occupancy() < self.capacity[i]
    }

    fn record_entry(&mut self, edge: EdgeId) {
        self.entrants[edge] += 1;
        if let Some(bins) = self.flow_bins.as_mut() {
            let minute = (self.clock_s / 60.0).floor() as usize;
            let b = &mut bins[edge];
            if b.len() <= minute {
                b.resize(minute + 1, 0);
            }
            b[minute] += 1;
        }
    }

    fn update_blocks(&mut self) {
        for i in 0..self.blocks.len() {
            let (active, start, end) = {
                let b = &self.blocks[i];
                (b.active, b.event.start_s, b.event.end_s)
            };
            if !active && self.clock_s >= start && self.clock_s < end {
                let ev = self.blocks[i].event.clone();
                self.blocks[i].active = true;
                self.apply_block(&ev).expect("window checked");
            } else if active && self.clock_s >= end {
                let ev = self.blocks[i].event.clone();
                self.blocks[i].active = false;
                self.lift_block(&ev);
            }
        }
    }

    /// Advances the simulation by one tick of length `dt`.
    pub fn step(&mut self, dt: f64) {
        assert!(dt > 0.0, "dt must be positive");
        self.update_blocks();
        if self.vehicles.iter().any(|v| v.stranded && v.active()) {
            let mask = self.closed_mask();
            for id in 0..self.vehicles.len() {
                if self.vehicles[id].stranded && self.vehicles[id].active() {
                    self.reroute(id, &mask);
                }
            }
        }
        for v in self.vehicles.iter_mut().filter(|v| v.on_network()) {
            v.speed_mps = 0.0;
        }
        self.advance_running(dt);
        self.serve_stop_lines();
        self.depart_and_insert();
        for v in self.vehicles.iter_mut().filter(|v| v.on_network()) {
            if v.speed_mps < self.cfg.stop_speed_mps {
                v.accumulated_wait_s += dt;
                v.edge_wait_s += dt;
            }
        }
        self.advance_signals(dt);
        self.clock_s += dt;
    }

    fn advance_running(&mut self, dt: f64) {
        let len_v = self.cfg.vehicle_length_m;
        let reach = self.cfg.free_flow_mps * dt;
        for e in 0..self.net.edges.len() {
            let edge_len = self.net.edges[e].length_m;
            let exit = !self.net.nodes[self.net.edges[e].to].has_signal;
            for l in 0..crate::roadnet::LANES_PER_EDGE {
                let li = Self::lane_index(e, l);
                if self.lanes[li].running.is_empty() {
                    continue;
                }
                let lane = &mut self.lanes[li];
                let mut tail = edge_len - lane.queue.len() as f64 * len_v;
                let mut limit = tail;
                let mut still_running = VecDeque::with_capacity(lane.running.len());
                while let Some(id) = lane.running.pop_front() {
                    let v = &mut self.vehicles[id];
                    let target = (v.offset_m + reach).min(limit).max(v.offset_m);
                    v.speed_mps = (target - v.offset_m) / dt;
                    if exit && target >= edge_len - 1e-9 {
                        v.offset_m = edge_len;
                        v.status = VehicleStatus::Arrived;
                        self.arrived += 1;
                    } else if !exit && target >= tail - 1e-9 {
                        v.offset_m = tail;
                        v.status = VehicleStatus::Queued;
                        lane.queue.push_back(id);
                        tail -= len_v;
                        limit = tail;
                    } else {
                        v.offset_m = target;
                        limit = target - len_v;
                        still_running.push_back(id);
                    }
                }
                lane.running = still_running;
            }
        }
    }

    fn serve_stop_lines(&mut self) {
        let headway = self.cfg.saturation_headway_s;
        let signalized: Vec<NodeId> = self.net.signalized().to_vec();
        for node in signalized {
            for arm in 0..4 {
                let Some(e) = self.net.nodes[node].incoming[arm] else {
                    continue;
                };
                for l in 0..crate::roadnet::LANES_PER_EDGE {
                    let li = Self::lane_index(e, l);
                    let Some(&id) = self.lanes[li].queue.front() else {
                        continue;
                    };
                    if self.clock_s < self.lanes[li].next_discharge_s - 1e-9 {
                        continue;
                    }
                    let Some(next) = self.vehicles[id].next_edge() else {
                        continue;
                    };
                    if self.is_closed(next) {
                        continue;
                    }
                    let Some(m) = self.net.movement(e, next) else {
                        continue;
                    };
                    if !self.is_green(node, m) {
                        continue;
                    }
                    let after = self.vehicles[id]
                        .route
                        .get(self.vehicles[id].route_pos + 2)
                        .copied();
                    let tl = self.target_lane(next, after);
                    if !self.has_room(next, tl) {
                        continue;
                    }
                    self.lanes[li].queue.pop_front();
                    self.lanes[li].next_discharge_s = self.clock_s + headway;
                    self.restack_queue(e, l);
                    self.enter_edge(id, next, tl);
                }
            }
        }
    }

    fn restack_queue(&mut self, edge: EdgeId, lane: usize) {
        let len_v = self.cfg.vehicle_length_m;
        let edge_len = self.net.edges[edge].length_m;
        let li = Self::lane_index(edge, lane);
        for (k, &id) in self.lanes[li].queue.iter().enumerate() {
            self.vehicles[id].offset_m = edge_len - k as f64 * len_v;
        }
    }

    fn enter_edge(&mut self, id: usize, edge: EdgeId, lane: usize) {
        let v = &mut self.vehicles[id];
        if v.on_network() {
            v.route_pos += 1;
        }
        debug_assert_eq!(v.route[v.route_pos], edge);
        v.lane = lane;
        v.offset_m = 0.0;
        v.edge_wait_s = 0.0;
        v.speed_mps = self.cfg.free_flow_mps;
        v.status = VehicleStatus::Running;
        self.lanes[Self::lane_index(edge, lane)]
            .running
            .push_back(id);
        self.record_entry(edge);
    }

    fn depart_and_insert(&mut self) {
        let any_closed = self.closed.iter().any(|&c| c > 0);
        let mask = any_closed.then(|| self.closed_mask());
        while let Some(&id) = self.scheduled.front() {
            if self.vehicles[id].depart_time_s > self.clock_s {
                break;
            }
            self.scheduled.pop_front();
            self.spawned += 1;
            self.vehicles[id].status = VehicleStatus::Backlogged;
            if let Some(mask) = &mask {
                if self.vehicles[id].route.iter().any(|&e| mask[e]) {
                    self.reroute(id, mask);
                }
            }
            let first = self.vehicles[id].route[0];
            self.backlog[first].push_back(id);
        }
        let len_v = self.cfg.vehicle_length_m;
        for e in 0..self.backlog.len() {
            let Some(&id) = self.backlog[e].front() else {
                continue;
            };
            let first = self.vehicles[id].route[0];
            if first != e {
                // rerouted while waiting: move to the right entry queue
                self.backlog[e].pop_front();
                self.backlog[first].push_back(id);
                continue;
            }
            if self.is_closed(e) {
                continue;
            }
            let tl = self.target_lane(e, self.vehicles[id].route.get(1).copied());
            if !self.has_room(e, tl) {
                continue;
            }
            let lane = &self.lanes[Self::lane_index(e, tl)];
            if let Some(&last) = lane.running.back() {
                if self.vehicles[last].offset_m < len_v {
                    continue;
                }
            }
            self.backlog[e].pop_front();
            self.enter_edge(id, e, tl);
        }
    }

    fn advance_signals(&mut self, dt: f64) {
        let clock_after = self.clock_s + dt;
        for (node, sig) in self.signals.iter_mut().enumerate() {
            let Some(sig) = sig else { continue };
            match sig.yellow.as_mut() {
                Some(y) => {
                    y.remaining_s -= dt;
                    if y.remaining_s <= 1e-9 {
                        sig.phase = y.target;
                        sig.time_in_phase_s = 0.0;
                        sig.yellow = None;
                        self.phase_log.push(PhaseEvent {
                            clock_s: clock_after,
                            node,
                            kind: PhaseEventKind::Green { phase: sig.phase },
                        });
                    }
                }
                None => sig.time_in_phase_s += dt,
            }
        }
    }

    /// Per-lane statistics indexed by `edge * 3 + lane`.
    pub fn lane_stats(&self) -> Vec<LaneStats> {
        let stop = self.cfg.stop_speed_mps;
        self.lanes
            .iter()
            .map(|lane| {
                let ids = lane.running.iter().chain(lane.queue.iter());
                let mut s = LaneStats::default();
                let mut speed_sum = 0.0;
                for &id in ids {
                    let v = &self.vehicles[id];
                    s.vehicle_count += 1;
                    if v.speed_mps < stop {
                        s.halting_count += 1;
                    }
                    speed_sum += v.speed_mps;
                }
                if s.vehicle_count > 0 {
                    s.mean_speed = speed_sum / s.vehicle_count as f64;
                }
                s
            })
            .collect()
    }

    /// Vehicles currently on a lane (running first, then queued).
    pub fn lane_vehicles(&self, edge: EdgeId, lane: usize) -> impl Iterator<Item = &Vehicle> {
        let l = self.lane(edge, lane);
        l.running
            .iter()
            .chain(l.queue.iter())
            .map(|&id| &self.vehicles[id])
    }

    /// Stopped vehicles on the given edges, summing the wait each has built
    /// up since entering its current edge.
    pub fn stopped_wait_on(&self, edges: impl IntoIterator<Item = EdgeId>) -> f64 {
        let stop = self.cfg.stop_speed_mps;
        edges
            .into_iter()
            .flat_map(|e| (0..crate::roadnet::LANES_PER_EDGE).map(move |l| (e, l)))
            .flat_map(|(e, l)| self.lane_vehicles(e, l))
            .filter(|v| v.speed_mps < stop)
            .map(|v| v.edge_wait_s)
            .sum()
    }

    pub fn metrics(&self) -> TickMetrics {
        let stop = self.cfg.stop_speed_mps;
        let mut halting = 0;
        let mut speed_sum = 0.0;
        let mut n = 0;
        let mut wait = 0.0;
        for v in self.vehicles.iter().filter(|v| v.on_network()) {
            n += 1;
            speed_sum += v.speed_mps;
            if v.speed_mps < stop {
                halting += 1;
                wait += v.accumulated_wait_s;
            }
        }
        TickMetrics {
            clock_s: self.clock_s,
            spawned: self.spawned,
            active: self.active_count(),
            arrived: self.arrived,
            on_network: n,
            halting,
            mean_speed: if n > 0 { speed_sum / n as f64 } else { 0.0 },
            stopped_wait_s: wait,
        }
    }

    /// Steps forever, yielding the probe after each tick.
    pub fn ticks(&mut self, dt: f64) -> impl Iterator<Item = TickMetrics> + '_ {
        std::iter::from_fn(move || {
            self.step(dt);
            Some(self.metrics())
        })
    }

    /// Vehicle conservation check: spawned = active + arrived, with `active`
    /// counted from vehicle states.
    pub fn conservation_holds(&self) -> bool {
        let active = self.vehicles.iter().filter(|v| v.active()).count();
        let arrived = self
            .vehicles
            .iter()
            .filter(|v| v.status == VehicleStatus::Arrived)
            .count();
        let backlogged: usize = self.backlog.iter().map(VecDeque::len).sum();
        let on_net = self.on_network_count();
        self.spawned == active + arrived
            && arrived == self.arrived
            && active == backlogged + on_net
            && self
                .lanes
                .iter()
                .zip(&self.capacity)
                .all(|(l, &c)| l.occupancy() <= c)
    }

    /// Writes the per-edge minute-binned entrant counts as
    /// `edge_id,minute_bin,count` rows.
    pub fn write_flow_csv<W: std::io::Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["edge_id", "minute_bin", "count"])?;
        if let Some(bins) = &self.flow_bins {
            for (e, b) in bins.iter().enumerate() {
                for (m, c) in b.iter().enumerate() {
                    out.write_record([
                        self.net.edges[e].name.as_str(),
                        &m.to_string(),
                        &c.to_string(),
                    ])?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }
}
