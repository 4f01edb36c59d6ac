//! Grid road network, intersection geometry and the eight-phase signal scheme.
//!
//! Nodes are laid out on a `rows x cols` lattice. The outer ring (minus the
//! four corners) holds unsignalized boundary nodes where vehicles enter and
//! leave; every other node is a signalized four-way intersection. Node names
//! use a column letter (A = westmost) followed by a row number (0 = southmost),
//! so an edge from `D3` to `C3` is called `D3C3`.
//!
//! Every directed edge carries three lanes with fixed movement assignment:
//! lane 0 turns left, lane 1 goes straight and lane 2 goes straight or right.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type NodeId = usize;
pub type EdgeId = usize;

/// Lanes per directed edge.
pub const LANES_PER_EDGE: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum RoadNetError {
    #[error("grid {rows}x{cols} has no signalized interior node (need at least 3x3 including the boundary ring)")]
    GridTooSmall { rows: usize, cols: usize },
    #[error("grid has {0} columns; column letters only cover 26")]
    TooManyColumns(usize),
    #[error("node spacing must be positive and finite, got {0}")]
    InvalidSpacing(f64),
    #[error("unknown edge `{0}`")]
    UnknownEdge(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
}

/// Compass direction. Used both for the heading of an edge and for the arm of
/// an intersection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dir {
    North,
    East,
    South,
    West,
}

impl Dir {
    pub const ALL: [Dir; 4] = [Dir::North, Dir::East, Dir::South, Dir::West];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn opposite(self) -> Dir {
        Dir::ALL[(self.index() + 2) % 4]
    }

    /// Heading after a left turn (counter-clockwise).
    pub fn left(self) -> Dir {
        Dir::ALL[(self.index() + 3) % 4]
    }

    /// Heading after a right turn (clockwise).
    pub fn right(self) -> Dir {
        Dir::ALL[(self.index() + 1) % 4]
    }

    /// Unit step as (d_col, d_row) with rows growing northwards.
    pub fn step(self) -> (isize, isize) {
        match self {
            Dir::North => (0, 1),
            Dir::East => (1, 0),
            Dir::South => (0, -1),
            Dir::West => (-1, 0),
        }
    }

    pub fn short(self) -> char {
        match self {
            Dir::North => 'N',
            Dir::East => 'E',
            Dir::South => 'S',
            Dir::West => 'W',
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Turn {
    Left,
    Straight,
    Right,
}

impl Turn {
    pub const ALL: [Turn; 3] = [Turn::Left, Turn::Straight, Turn::Right];

    /// Turn taken when leaving on `out_heading` after arriving on `in_heading`.
    /// U-turns return `None`.
    pub fn between(in_heading: Dir, out_heading: Dir) -> Option<Turn> {
        if out_heading == in_heading {
            Some(Turn::Straight)
        } else if out_heading == in_heading.left() {
            Some(Turn::Left)
        } else if out_heading == in_heading.right() {
            Some(Turn::Right)
        } else {
            None
        }
    }

    /// Whether `lane` of a three-lane edge may be used for this turn.
    pub fn allowed_on_lane(self, lane: usize) -> bool {
        matches!(
            (lane, self),
            (0, Turn::Left) | (1, Turn::Straight) | (2, Turn::Straight) | (2, Turn::Right)
        )
    }
}

/// An (approach, turn) pair. The approach is the arm vehicles arrive from,
/// so southbound traffic has approach `North`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Movement {
    pub approach: Dir,
    pub turn: Turn,
}

impl Movement {
    pub fn new(approach: Dir, turn: Turn) -> Self {
        Self { approach, turn }
    }

    /// All twelve movements, approach-major (N, E, S, W) then L, S, R.
    pub fn all() -> Vec<Movement> {
        Dir::ALL
            .iter()
            .flat_map(|&a| Turn::ALL.iter().map(move |&t| Movement::new(a, t)))
            .collect()
    }

    /// Arm the movement exits on.
    pub fn exit_arm(self) -> Dir {
        let heading = self.approach.opposite();
        match self.turn {
            Turn::Straight => heading,
            Turn::Left => heading.left(),
            Turn::Right => heading.right(),
        }
    }
}

impl fmt::Display for Movement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = match self.turn {
            Turn::Left => "left",
            Turn::Straight => "straight",
            Turn::Right => "right",
        };
        write!(f, "{}-{}", self.approach.short(), t)
    }
}

/// True iff the two movements' trajectories cross inside the intersection.
///
/// Right turns hug the corner and never cross. Opposing through movements and
/// opposing left turns pass each other; a left turn crosses the opposing
/// through movement. Between perpendicular approaches through movements cross,
/// left turns cross, and a left turn crosses the through movement coming from
/// the arm it exits onto (the other perpendicular through movement merges into
/// the same exit arm on a different lane).
pub fn conflicting(m1: Movement, m2: Movement) -> bool {
    if m1.approach == m2.approach || m1.turn == Turn::Right || m2.turn == Turn::Right {
        return false;
    }
    if m1.approach.opposite() == m2.approach {
        return m1.turn != m2.turn;
    }
    match (m1.turn, m2.turn) {
        (Turn::Straight, Turn::Straight) | (Turn::Left, Turn::Left) => true,
        (Turn::Left, Turn::Straight) => m1.exit_arm() == m2.approach,
        (Turn::Straight, Turn::Left) => m2.exit_arm() == m1.approach,
        _ => unreachable!("right turns handled above"),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub name: String,
    pub movements: BTreeSet<Movement>,
}

impl Phase {
    pub fn permits(&self, m: Movement) -> bool {
        self.movements.contains(&m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseTable {
    pub phases: Vec<Phase>,
    pub yellow_duration_s: f64,
    pub min_hold_s: f64,
}

impl PhaseTable {
    pub fn len(&self) -> usize {
        self.phases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty()
    }

    /// Movements that conflict inside some phase, as (phase, m1, m2).
    pub fn conflicts(&self) -> Vec<(usize, Movement, Movement)> {
        let mut out = Vec::new();
        for (p, phase) in self.phases.iter().enumerate() {
            for &a in &phase.movements {
                for &b in &phase.movements {
                    if a < b && conflicting(a, b) {
                        out.push((p, a, b));
                    }
                }
            }
        }
        out
    }

    /// Number of phases granting green to `m`.
    pub fn green_opportunities(&self, m: Movement) -> usize {
        self.phases.iter().filter(|p| p.permits(m)).count()
    }
}

/// Four paired phases (N+S straight, N+S left, E+W straight, E+W left) followed
/// by four single-approach phases (N, E, S, W all movements). Right turns are
/// green in every phase. Yellow lasts 3 s and a phase holds at least 10 s.
pub fn default_phase_table() -> PhaseTable {
    use Dir::*;
    use Turn::*;
    let rights: Vec<Movement> = Dir::ALL.iter().map(|&a| Movement::new(a, Right)).collect();
    let make = |name: &str, ms: &[(Dir, Turn)]| Phase {
        name: name.to_string(),
        movements: ms
            .iter()
            .map(|&(a, t)| Movement::new(a, t))
            .chain(rights.iter().copied())
            .collect(),
    };
    PhaseTable {
        phases: vec![
            make("NS-straight", &[(North, Straight), (South, Straight)]),
            make("NS-left", &[(North, Left), (South, Left)]),
            make("EW-straight", &[(East, Straight), (West, Straight)]),
            make("EW-left", &[(East, Left), (West, Left)]),
            make("N-all", &[(North, Left), (North, Straight)]),
            make("E-all", &[(East, Left), (East, Straight)]),
            make("S-all", &[(South, Left), (South, Straight)]),
            make("W-all", &[(West, Left), (West, Straight)]),
        ],
        yellow_duration_s: 3.0,
        min_hold_s: 10.0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub name: String,
    pub row: usize,
    pub col: usize,
    pub has_signal: bool,
    /// Incoming edge per arm, indexed by [`Dir::index`].
    pub incoming: [Option<EdgeId>; 4],
    /// Outgoing edge per arm, indexed by [`Dir::index`].
    pub outgoing: [Option<EdgeId>; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub id: EdgeId,
    pub name: String,
    pub from: NodeId,
    pub to: NodeId,
    pub length_m: f64,
    pub lanes: usize,
    pub heading: Dir,
}

impl Edge {
    /// Arm of the downstream node this edge arrives on.
    pub fn approach(&self) -> Dir {
        self.heading.opposite()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoadNetwork {
    pub grid_dims: (usize, usize),
    pub node_spacing: f64,
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    pub phases: PhaseTable,
    #[serde(skip)]
    lookup: Lookup,
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Lookup {
    node_at: HashMap<(usize, usize), NodeId>,
    node_by_name: HashMap<String, NodeId>,
    edge_by_name: HashMap<String, EdgeId>,
    reverse: Vec<Option<EdgeId>>,
    signalized: Vec<NodeId>,
}

fn column_letter(col: usize) -> char {
    (b'A' + col as u8) as char
}

/// Builds a `rows x cols` lattice whose outer ring (corners excluded) are
/// boundary nodes and whose interior nodes are signalized intersections.
pub fn build_grid(rows: usize, cols: usize, spacing_m: f64) -> Result<RoadNetwork, RoadNetError> {
    if rows < 3 || cols < 3 {
        return Err(RoadNetError::GridTooSmall { rows, cols });
    }
    if cols > 26 {
        return Err(RoadNetError::TooManyColumns(cols));
    }
    if !(spacing_m.is_finite() && spacing_m > 0.0) {
        return Err(RoadNetError::InvalidSpacing(spacing_m));
    }
    let is_interior = |r: usize, c: usize| r > 0 && r + 1 < rows && c > 0 && c + 1 < cols;
    let is_corner = |r: usize, c: usize| (r == 0 || r + 1 == rows) && (c == 0 || c + 1 == cols);

    let mut nodes = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if is_corner(r, c) {
                continue;
            }
            nodes.push(Node {
                id: nodes.len(),
                name: format!("{}{}", column_letter(c), r),
                row: r,
                col: c,
                has_signal: is_interior(r, c),
                incoming: [None; 4],
                outgoing: [None; 4],
            });
        }
    }
    let node_at: HashMap<(usize, usize), NodeId> =
        nodes.iter().map(|n| ((n.row, n.col), n.id)).collect();

    // Directed edges touch at least one interior node.
    let mut pairs: Vec<(String, NodeId, NodeId, Dir)> = Vec::new();
    for n in nodes.iter().filter(|n| n.has_signal) {
        for d in Dir::ALL {
            let (dc, dr) = d.step();
            let r = n.row as isize + dr;
            let c = n.col as isize + dc;
            let Some(&m) = node_at.get(&(r as usize, c as usize)) else {
                continue;
            };
            pairs.push((format!("{}{}", n.name, nodes[m].name), n.id, m, d));
            if !nodes[m].has_signal {
                pairs.push((
                    format!("{}{}", nodes[m].name, n.name),
                    m,
                    n.id,
                    d.opposite(),
                ));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.cmp(&b.0));
    pairs.dedup_by(|a, b| a.0 == b.0);

    let edges: Vec<Edge> = pairs
        .into_iter()
        .enumerate()
        .map(|(id, (name, from, to, heading))| Edge {
            id,
            name,
            from,
            to,
            length_m: spacing_m,
            lanes: LANES_PER_EDGE,
            heading,
        })
        .collect();
    for e in &edges {
        nodes[e.from].outgoing[e.heading.index()] = Some(e.id);
        nodes[e.to].incoming[e.approach().index()] = Some(e.id);
    }

    let mut net = RoadNetwork {
        grid_dims: (rows, cols),
        node_spacing: spacing_m,
        nodes,
        edges,
        phases: default_phase_table(),
        lookup: Lookup::default(),
    };
    net.rebuild_lookup();
    Ok(net)
}

impl RoadNetwork {
    /// Restores the lookup tables after deserialization.
    pub fn rebuild_lookup(&mut self) {
        let node_at = self.nodes.iter().map(|n| ((n.row, n.col), n.id)).collect();
        let node_by_name = self.nodes.iter().map(|n| (n.name.clone(), n.id)).collect();
        let edge_by_name: HashMap<String, EdgeId> =
            self.edges.iter().map(|e| (e.name.clone(), e.id)).collect();
        let reverse = self
            .edges
            .iter()
            .map(|e| {
                let name = format!("{}{}", self.nodes[e.to].name, self.nodes[e.from].name);
                edge_by_name.get(&name).copied()
            })
            .collect();
        let mut signalized: Vec<NodeId> = self
            .nodes
            .iter()
            .filter(|n| n.has_signal)
            .map(|n| n.id)
            .collect();
        signalized.sort_by_key(|&id| (self.nodes[id].row, self.nodes[id].col));
        self.lookup = Lookup {
            node_at,
            node_by_name,
            edge_by_name,
            reverse,
            signalized,
        };
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        let mut net: RoadNetwork = serde_json::from_str(s)?;
        net.rebuild_lookup();
        Ok(net)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("network serializes")
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn edge(&self, id: EdgeId) -> &Edge {
        &self.edges[id]
    }

    pub fn node_by_name(&self, name: &str) -> Result<NodeId, RoadNetError> {
        self.lookup
            .node_by_name
            .get(name)
            .copied()
            .ok_or_else(|| RoadNetError::UnknownNode(name.to_string()))
    }

    pub fn edge_by_name(&self, name: &str) -> Result<EdgeId, RoadNetError> {
        self.lookup
            .edge_by_name
            .get(name)
            .copied()
            .ok_or_else(|| RoadNetError::UnknownEdge(name.to_string()))
    }

    pub fn node_at(&self, row: usize, col: usize) -> Option<NodeId> {
        self.lookup.node_at.get(&(row, col)).copied()
    }

    /// Opposite-direction twin of an edge.
    pub fn reverse_edge(&self, e: EdgeId) -> Option<EdgeId> {
        self.lookup.reverse[e]
    }

    /// Signalized nodes in row-major order of the signal grid.
    pub fn signalized(&self) -> &[NodeId] {
        &self.lookup.signalized
    }

    pub fn boundary_nodes(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter(|n| !n.has_signal)
            .map(|n| n.id)
            .collect()
    }

    /// Dimensions of the signalized sub-grid.
    pub fn signal_grid_dims(&self) -> (usize, usize) {
        (self.grid_dims.0 - 2, self.grid_dims.1 - 2)
    }

    /// Position of a signalized node in the signal grid.
    pub fn signal_grid_pos(&self, node: NodeId) -> Option<(usize, usize)> {
        let n = &self.nodes[node];
        n.has_signal.then(|| (n.row - 1, n.col - 1))
    }

    /// Movement executed at `edge`'s downstream node when continuing on `next`.
    pub fn movement(&self, edge: EdgeId, next: EdgeId) -> Option<Movement> {
        let a = &self.edges[edge];
        let b = &self.edges[next];
        if a.to != b.from {
            return None;
        }
        Turn::between(a.heading, b.heading).map(|t| Movement::new(a.approach(), t))
    }

    /// The twelve incoming lanes of a signalized node as (edge, lane), arm-major
    /// in N, E, S, W order.
    pub fn incoming_lanes(&self, node: NodeId) -> Vec<(EdgeId, usize)> {
        self.nodes[node]
            .incoming
            .iter()
            .flatten()
            .flat_map(|&e| (0..self.edges[e].lanes).map(move |l| (e, l)))
            .collect()
    }

    pub fn outgoing_lanes(&self, node: NodeId) -> Vec<(EdgeId, usize)> {
        self.nodes[node]
            .outgoing
            .iter()
            .flatten()
            .flat_map(|&e| (0..self.edges[e].lanes).map(move |l| (e, l)))
            .collect()
    }
}
