//! Road network and simulator checks against independent brute-force models.

use std::collections::BTreeSet;
use std::sync::Arc;

use proptest::prelude::*;
use signal_lab::microsim::{
    generate_demand, shortest_route, shortest_route_from_edge, BlockEvent, SimConfig, SimState,
    VehicleStatus,
};
use signal_lab::roadnet::{build_grid, conflicting, Dir, Movement, RoadNetwork, Turn};

// ---- geometric conflict model -------------------------------------------
//
// The intersection is the square [-1, 1]^2 with right-hand traffic. A
// movement starts on its approach arm at a lateral offset chosen by lane
// (left 0.2, through 0.5, right 0.8 from the centre line) and ends on the
// exit arm at the same offset. Straight paths are segments, turns are
// quadratic Bezier curves through the corner where entry and exit lines meet.

type P = (f64, f64);

fn unit(d: Dir) -> P {
    match d {
        Dir::North => (0.0, 1.0),
        Dir::East => (1.0, 0.0),
        Dir::South => (0.0, -1.0),
        Dir::West => (-1.0, 0.0),
    }
}

fn right_of(h: P) -> P {
    (h.1, -h.0)
}

fn path(m: Movement) -> Vec<P> {
    let off = match m.turn {
        Turn::Left => 0.2,
        Turn::Straight => 0.5,
        Turn::Right => 0.8,
    };
    let a = unit(m.approach);
    let h = (-a.0, -a.1);
    let r = right_of(h);
    let start = (a.0 + off * r.0, a.1 + off * r.1);
    let x = unit(m.exit_arm());
    let xr = right_of(x);
    let end = (x.0 + off * xr.0, x.1 + off * xr.1);
    if m.turn == Turn::Straight {
        return vec![start, end];
    }
    // corner: entry line start + s*h meets exit line end - u*x
    let ctrl = if h.0 == 0.0 {
        (start.0, end.1)
    } else {
        (end.0, start.1)
    };
    (0..=64)
        .map(|i| {
            let t = i as f64 / 64.0;
            let (a, b, c) = ((1.0 - t) * (1.0 - t), 2.0 * t * (1.0 - t), t * t);
            (
                a * start.0 + b * ctrl.0 + c * end.0,
                a * start.1 + b * ctrl.1 + c * end.1,
            )
        })
        .collect()
}

fn orient(a: P, b: P, c: P) -> f64 {
    (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
}

fn segments_cross(p1: P, p2: P, q1: P, q2: P) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    d1 * d2 < 0.0 && d3 * d4 < 0.0
}

fn geometric_conflict(m1: Movement, m2: Movement) -> bool {
    let (a, b) = (path(m1), path(m2));
    a.windows(2)
        .any(|s| b.windows(2).any(|t| segments_cross(s[0], s[1], t[0], t[1])))
}

#[test]
fn conflict_rule_matches_geometry_for_all_pairs() {
    let all = Movement::all();
    let mut disagreements = Vec::new();
    for &m1 in &all {
        for &m2 in &all {
            if conflicting(m1, m2) != geometric_conflict(m1, m2) {
                disagreements.push(format!("{m1} vs {m2}"));
            }
            assert_eq!(
                conflicting(m1, m2),
                conflicting(m2, m1),
                "asymmetric {m1} {m2}"
            );
        }
    }
    assert!(disagreements.is_empty(), "{disagreements:?}");
}

#[test]
fn phases_are_conflict_free_and_cover_movements_twice() {
    let net = build_grid(6, 6, 200.0).unwrap();
    let table = &net.phases;
    assert_eq!(table.len(), 8);
    assert_eq!(table.yellow_duration_s, 3.0);
    assert_eq!(table.min_hold_s, 10.0);
    for p in &table.phases {
        for &a in &p.movements {
            for &b in &p.movements {
                assert!(!geometric_conflict(a, b), "{}: {a} crosses {b}", p.name);
            }
        }
    }
    for m in Movement::all()
        .into_iter()
        .filter(|m| m.turn != Turn::Right)
    {
        let n = table.phases.iter().filter(|p| p.permits(m)).count();
        assert_eq!(n, 2, "{m}");
    }
}

// ---- lattice enumeration --------------------------------------------------

fn letter(c: usize) -> char {
    (b'A' + c as u8) as char
}

/// Directed edge names by brute force over neighbouring lattice cells.
fn expected_edges(rows: usize, cols: usize) -> BTreeSet<String> {
    let corner = |r: usize, c: usize| (r == 0 || r == rows - 1) && (c == 0 || c == cols - 1);
    let interior = |r: usize, c: usize| r > 0 && r < rows - 1 && c > 0 && c < cols - 1;
    let mut out = BTreeSet::new();
    for r1 in 0..rows {
        for c1 in 0..cols {
            for r2 in 0..rows {
                for c2 in 0..cols {
                    let adjacent = r1.abs_diff(r2) + c1.abs_diff(c2) == 1;
                    if adjacent
                        && !corner(r1, c1)
                        && !corner(r2, c2)
                        && (interior(r1, c1) || interior(r2, c2))
                    {
                        out.insert(format!("{}{r1}{}{r2}", letter(c1), letter(c2)));
                    }
                }
            }
        }
    }
    out
}

proptest! {
    #[test]
    fn edge_set_matches_enumeration(rows in 3usize..9, cols in 3usize..9) {
        let net = build_grid(rows, cols, 100.0).unwrap();
        let got: BTreeSet<String> = net.edges.iter().map(|e| e.name.clone()).collect();
        prop_assert_eq!(got.len(), net.edges.len());
        prop_assert_eq!(got, expected_edges(rows, cols));
        prop_assert_eq!(net.signalized().len(), (rows - 2) * (cols - 2));
        prop_assert_eq!(net.boundary_nodes().len(), 2 * (rows - 2) + 2 * (cols - 2));
        for e in &net.edges {
            let (a, b) = (net.node(e.from), net.node(e.to));
            let (dc, dr) = e.heading.step();
            prop_assert_eq!((b.col as isize - a.col as isize, b.row as isize - a.row as isize), (dc, dr));
            let r = net.reverse_edge(e.id).unwrap();
            prop_assert_eq!(net.reverse_edge(r), Some(e.id));
        }
    }
}

// ---- routing ----------------------------------------------------------------

/// Exhaustive search over simple paths that touch the boundary only at
/// their ends. Returns the shortest, ties broken by
/// the lexicographically smallest edge-id sequence.
fn brute_route(net: &RoadNetwork, from: usize, to: usize, closed: &[bool]) -> Option<Vec<usize>> {
    #[allow(clippy::too_many_arguments)]
    fn dfs(
        net: &RoadNetwork,
        v: usize,
        to: usize,
        closed: &[bool],
        seen: &mut Vec<bool>,
        cur: &mut Vec<usize>,
        len: f64,
        best: &mut Option<(f64, Vec<usize>)>,
    ) {
        if let Some((bl, _)) = best {
            if len > *bl + 1e-9 {
                return;
            }
        }
        if v == to {
            let better = match best {
                None => true,
                Some((bl, bp)) => len < *bl - 1e-9 || (len <= *bl + 1e-9 && *cur < *bp),
            };
            if better {
                *best = Some((len, cur.clone()));
            }
            return;
        }
        for &e in net.node(v).outgoing.iter().flatten() {
            let w = net.edge(e).to;
            // a trip leaves the network at the first boundary node it reaches
            if closed[e] || seen[w] || (w != to && !net.node(w).has_signal) {
                continue;
            }
            seen[w] = true;
            cur.push(e);
            dfs(
                net,
                w,
                to,
                closed,
                seen,
                cur,
                len + net.edge(e).length_m,
                best,
            );
            cur.pop();
            seen[w] = false;
        }
    }
    let mut seen = vec![false; net.nodes.len()];
    seen[from] = true;
    let mut best = None;
    dfs(
        net,
        from,
        to,
        closed,
        &mut seen,
        &mut Vec::new(),
        0.0,
        &mut best,
    );
    best.map(|(_, p)| p)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn routing_matches_exhaustive_search(
        rows in 3usize..5,
        cols in 3usize..6,
        closed_bits in proptest::collection::vec(0u8..10, 64),
        pair in (0usize..64, 0usize..64),
    ) {
        let net = build_grid(rows, cols, 100.0).unwrap();
        let b = net.boundary_nodes();
        let (o, d) = (b[pair.0 % b.len()], b[pair.1 % b.len()]);
        prop_assume!(o != d);
        // roughly one edge in five closed
        let closed: Vec<bool> = (0..net.edges.len()).map(|i| closed_bits[i % 64] < 2).collect();
        match (shortest_route(&net, o, d, &closed), brute_route(&net, o, d, &closed)) {
            (Ok(r), Some(expect)) => prop_assert_eq!(r, expect),
            (Err(_), None) => {}
            (got, expect) => prop_assert!(false, "router {:?} vs oracle {:?}", got, expect),
        }
    }
}

#[test]
fn detours_never_pass_through_the_boundary() {
    // B2A2 and B2B3 tie after B2B1 closes; only the latter keeps the trip alive
    let net = build_grid(5, 5, 150.0).unwrap();
    let mut closed = vec![false; net.edges.len()];
    closed[net.edge_by_name("B2B1").unwrap()] = true;
    let on = net.edge_by_name("C2B2").unwrap();
    let dest = net.node_by_name("A1").unwrap();
    let r = shortest_route_from_edge(&net, on, dest, &closed).unwrap();
    let names: Vec<&str> = r.iter().map(|&e| net.edge(e).name.as_str()).collect();
    assert_eq!(names.last(), Some(&"B1A1"));
    for &e in &r[..r.len() - 1] {
        assert!(net.node(net.edge(e).to).has_signal, "{names:?}");
    }
}

// ---- simulator invariants ---------------------------------------------------

fn drive(sim: &mut SimState, ticks: usize, seed: u64, mut each: impl FnMut(&SimState)) {
    let agents = sim.network().signalized().to_vec();
    let mut x = seed | 1;
    for t in 0..ticks {
        if t % 7 == 0 {
            for &n in &agents {
                // xorshift keeps the action pattern independent of the simulator RNG
                x ^= x << 13;
                x ^= x >> 7;
                x ^= x << 17;
                sim.request_phase(n, (x % 8) as usize).unwrap();
            }
        }
        sim.step(1.0);
        each(sim);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn vehicles_are_conserved_and_blocks_hold(
        seed in 0u64..1000,
        n in 50usize..400,
        start in 100.0f64..300.0,
        len in 50.0f64..200.0,
    ) {
        let net = Arc::new(build_grid(5, 5, 150.0).unwrap());
        let demand = generate_demand(&net, n, 400.0, seed).unwrap();
        let mut sim = SimState::new(Arc::clone(&net), SimConfig::default(), demand);
        let blocked = ["C2B2", "B2B1"];
        sim.schedule_block(BlockEvent::from_names(&net, &blocked, start, start + len).unwrap()).unwrap();
        let ids: Vec<usize> = blocked.iter().map(|b| net.edge_by_name(b).unwrap()).collect();
        let mut before = vec![0u64; ids.len()];
        let mut ok = true;
        let mut block_ok = true;
        drive(&mut sim, 600, seed, |s| {
            let m = s.metrics();
            ok &= s.conservation_holds() && m.spawned == m.active + m.arrived && m.on_network <= m.active;
            let now: Vec<u64> = ids.iter().map(|&e| s.entrants()[e]).collect();
            // entries stamped at clock t happened during the tick ending at t
            if s.clock_s > start + 1.0 && s.clock_s <= start + len {
                block_ok &= now == before;
            }
            before = now;
        });
        prop_assert!(ok, "conservation broken");
        prop_assert!(block_ok, "vehicles entered a closed edge");
        prop_assert!(sim.vehicles.iter().all(|v| v.status != VehicleStatus::Arrived || v.route_pos + 1 == v.route.len()));
    }
}

#[test]
fn identical_seeds_give_identical_flow_dumps() {
    let net = Arc::new(build_grid(6, 6, 200.0).unwrap());
    let run = || {
        let demand = generate_demand(&net, 600, 900.0, 7).unwrap();
        let mut sim = SimState::new(Arc::clone(&net), SimConfig::default(), demand);
        sim.record_flows();
        let mut metrics = Vec::new();
        drive(&mut sim, 900, 11, |s| metrics.push(s.metrics()));
        let mut buf = Vec::new();
        sim.write_flow_csv(&mut buf).unwrap();
        (buf, metrics)
    };
    let (a, ma) = run();
    let (b, mb) = run();
    assert_eq!(a, b);
    assert_eq!(ma, mb);
    assert!(std::str::from_utf8(&a)
        .unwrap()
        .starts_with("edge_id,minute_bin,count"));
}

#[test]
fn demand_is_uniform_over_boundary_pairs() {
    let net = build_grid(6, 6, 200.0).unwrap();
    let d = generate_demand(&net, 20_000, 3600.0, 3).unwrap();
    let b = net.boundary_nodes();
    let mut counts = vec![0usize; net.nodes.len()];
    for v in &d {
        counts[v.origin] += 1;
        assert_ne!(v.origin, v.destination);
        assert!(v.depart_time_s >= 0.0 && v.depart_time_s < 3600.0);
    }
    // chi-square over 16 origins, 15 dof; 99.9% quantile is 37.7
    let e = d.len() as f64 / b.len() as f64;
    let chi: f64 = b.iter().map(|&o| (counts[o] as f64 - e).powi(2) / e).sum();
    assert!(chi < 37.7, "chi-square {chi}");
    let mean_t = d.iter().map(|v| v.depart_time_s).sum::<f64>() / d.len() as f64;
    // standard error of the mean is 3600/sqrt(12 n) ~ 7.3 s
    assert!((mean_t - 1800.0).abs() < 40.0, "{mean_t}");
}
