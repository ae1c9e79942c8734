//! Deterministic world construction: a Manhattan grid of intersections with
//! per-edge capacity and free-flow speed, seeded origin–destination trips,
//! uniformly placed roadside units, and fog sites attached to RSU clusters.

use rand::Rng;

use super::config::ScenarioConfig;
use crate::rng;
use crate::{Error, Result};

/// Block spacing between adjacent intersections (m).
pub const BLOCK_M: f64 = 200.0;
/// Vehicles an edge holds at its congestion capacity.
pub const EDGE_CAPACITY: f64 = 12.0;
/// Free-flow speed (m/s), 50 km/h.
pub const FREE_FLOW_MPS: f64 = 13.9;
/// Nominal fog CPU capacity before the scenario fraction is applied.
pub const BASE_FOG_CPU: f64 = 4.0;
/// Fog memory capacity.
pub const BASE_FOG_MEM: f64 = 2.0;

/// One directed road segment.
#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub length_m: f64,
    pub capacity: f64,
    pub free_flow_mps: f64,
    pub midpoint: (f64, f64),
}

/// A roadside unit placed at an intersection and wired to one fog site.
#[derive(Debug, Clone, PartialEq)]
pub struct Rsu {
    pub node: usize,
    pub pos: (f64, f64),
    pub fog: usize,
}

/// A fog compute site serving a cluster of RSUs.
#[derive(Debug, Clone, PartialEq)]
pub struct FogSite {
    pub cpu_capacity: f64,
    pub mem_capacity: f64,
    pub centroid: (f64, f64),
}

/// Origin–destination pair for one vehicle's first trip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripSeed {
    pub origin: usize,
    pub dest: usize,
}

/// The static scene a run executes in.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub rows: usize,
    pub cols: usize,
    pub edges: Vec<Edge>,
    /// Outgoing edge ids per node.
    pub out_edges: Vec<Vec<usize>>,
    pub rsus: Vec<Rsu>,
    pub fog_sites: Vec<FogSite>,
    /// One initial trip per active vehicle (after the demand multiplier).
    pub trips: Vec<TripSeed>,
    /// Per edge: the two nearest RSUs as (rsu index, distance from the edge
    /// midpoint, m). With a single RSU both candidates coincide.
    pub edge_rsu_candidates: Vec<[(usize, f64); 2]>,
    /// Per edge: the fog zone (the nearest RSU's fog).
    pub edge_zone: Vec<usize>,
}

impl World {
    pub fn node_pos(&self, node: usize) -> (f64, f64) {
        let r = node / self.cols;
        let c = node % self.cols;
        (c as f64 * BLOCK_M, r as f64 * BLOCK_M)
    }

    /// Active vehicle count.
    pub fn vehicle_count(&self) -> usize {
        self.trips.len()
    }

    /// FNV-1a digest of the canonical world encoding; identical worlds hash
    /// identically, and any structural difference changes the digest.
    pub fn hash(&self) -> u64 {
        let mut bytes = Vec::with_capacity(64 + 32 * self.edges.len() + 16 * self.trips.len());
        bytes.extend_from_slice(&(self.rows as u64).to_le_bytes());
        bytes.extend_from_slice(&(self.cols as u64).to_le_bytes());
        for e in &self.edges {
            bytes.extend_from_slice(&(e.from as u64).to_le_bytes());
            bytes.extend_from_slice(&(e.to as u64).to_le_bytes());
            bytes.extend_from_slice(&e.capacity.to_bits().to_le_bytes());
            bytes.extend_from_slice(&e.free_flow_mps.to_bits().to_le_bytes());
        }
        for r in &self.rsus {
            bytes.extend_from_slice(&(r.node as u64).to_le_bytes());
            bytes.extend_from_slice(&(r.fog as u64).to_le_bytes());
        }
        for f in &self.fog_sites {
            bytes.extend_from_slice(&f.cpu_capacity.to_bits().to_le_bytes());
        }
        for t in &self.trips {
            bytes.extend_from_slice(&(t.origin as u64).to_le_bytes());
            bytes.extend_from_slice(&(t.dest as u64).to_le_bytes());
        }
        rng::fnv1a(&bytes)
    }

    /// Shortest route (edge ids) by breadth-first search, deterministic
    /// tie-break by edge id. `None` when `dest` is unreachable.
    pub fn route(&self, origin: usize, dest: usize) -> Option<Vec<usize>> {
        if origin == dest {
            return Some(Vec::new());
        }
        let n = self.rows * self.cols;
        let mut prev_edge: Vec<Option<usize>> = vec![None; n];
        let mut visited = vec![false; n];
        visited[origin] = true;
        let mut frontier = std::collections::VecDeque::new();
        frontier.push_back(origin);
        while let Some(node) = frontier.pop_front() {
            for &eid in &self.out_edges[node] {
                let to = self.edges[eid].to;
                if !visited[to] {
                    visited[to] = true;
                    prev_edge[to] = Some(eid);
                    if to == dest {
                        frontier.clear();
                        break;
                    }
                    frontier.push_back(to);
                }
            }
        }
        if !visited[dest] {
            return None;
        }
        let mut route = Vec::new();
        let mut node = dest;
        while node != origin {
            let eid = prev_edge[node].expect("visited nodes have a predecessor");
            route.push(eid);
            node = self.edges[eid].from;
        }
        route.reverse();
        Some(route)
    }
}

/// Builds the world for a config: validates, lays the grid minus closures,
/// places RSUs evenly over the intersections, attaches fog sites to
/// contiguous RSU clusters, and draws vehicle trips from the seed.
pub fn build_world(cfg: &ScenarioConfig) -> Result<World> {
    cfg.validate()?;
    let (rows, cols) = cfg.grid_dims;
    let n = rows * cols;

    // Directed edges in both directions along every non-closed grid segment.
    let closed = |a: usize, b: usize| {
        cfg.closures.iter().any(|e| {
            let ea = e.a.0 * cols + e.a.1;
            let eb = e.b.0 * cols + e.b.1;
            (ea == a && eb == b) || (ea == b && eb == a)
        })
    };
    let mut edges = Vec::new();
    let mut out_edges: Vec<Vec<usize>> = vec![Vec::new(); n];
    let push_edge = |edges: &mut Vec<Edge>, out: &mut Vec<Vec<usize>>, a: usize, b: usize| {
        let pa = ((a % cols) as f64 * BLOCK_M, (a / cols) as f64 * BLOCK_M);
        let pb = ((b % cols) as f64 * BLOCK_M, (b / cols) as f64 * BLOCK_M);
        let id = edges.len();
        edges.push(Edge {
            from: a,
            to: b,
            length_m: BLOCK_M,
            capacity: EDGE_CAPACITY,
            free_flow_mps: FREE_FLOW_MPS,
            midpoint: ((pa.0 + pb.0) / 2.0, (pa.1 + pb.1) / 2.0),
        });
        out[a].push(id);
    };
    for r in 0..rows {
        for c in 0..cols {
            let a = r * cols + c;
            if c + 1 < cols {
                let b = a + 1;
                if !closed(a, b) {
                    push_edge(&mut edges, &mut out_edges, a, b);
                    push_edge(&mut edges, &mut out_edges, b, a);
                }
            }
            if r + 1 < rows {
                let b = a + cols;
                if !closed(a, b) {
                    push_edge(&mut edges, &mut out_edges, a, b);
                    push_edge(&mut edges, &mut out_edges, b, a);
                }
            }
        }
    }

    // RSUs spread evenly over the node ordering (row-major covers the grid
    // uniformly); co-location is allowed when rsus > intersections.
    let rsu_count = cfg.rsus;
    let fog_count = cfg.fog_nodes;
    let mut rsus = Vec::with_capacity(rsu_count);
    for i in 0..rsu_count {
        let node = ((i as f64 + 0.5) * n as f64 / rsu_count as f64).floor() as usize;
        let node = node.min(n - 1);
        let fog = i * fog_count / rsu_count.max(1);
        let fog = fog.min(fog_count - 1);
        let pos = ((node % cols) as f64 * BLOCK_M, (node / cols) as f64 * BLOCK_M);
        rsus.push(Rsu { node, pos, fog });
    }

    let mut fog_sites = Vec::with_capacity(fog_count);
    for f in 0..fog_count {
        let members: Vec<&Rsu> = rsus.iter().filter(|r| r.fog == f).collect();
        let centroid = if members.is_empty() {
            (cols as f64 * BLOCK_M / 2.0, rows as f64 * BLOCK_M / 2.0)
        } else {
            let sx: f64 = members.iter().map(|r| r.pos.0).sum();
            let sy: f64 = members.iter().map(|r| r.pos.1).sum();
            (sx / members.len() as f64, sy / members.len() as f64)
        };
        // Heterogeneous rack sizes around the same mean: dispatch has real
        // transport work to do even when demand is spatially uniform.
        let size_factor = [1.3, 1.1, 0.9, 0.7][f % 4];
        fog_sites.push(FogSite {
            cpu_capacity: cfg.fog_cpu_frac * BASE_FOG_CPU * size_factor,
            mem_capacity: BASE_FOG_MEM,
            centroid,
        });
    }

    // Per-edge RSU candidates: nearest and second nearest by midpoint
    // distance, ties broken by RSU index.
    let mut edge_rsu_candidates = Vec::with_capacity(edges.len());
    let mut edge_zone = Vec::with_capacity(edges.len());
    for e in &edges {
        let mut best = (0usize, f64::INFINITY);
        let mut second = (0usize, f64::INFINITY);
        for (i, r) in rsus.iter().enumerate() {
            let d = ((e.midpoint.0 - r.pos.0).powi(2) + (e.midpoint.1 - r.pos.1).powi(2)).sqrt();
            if d < best.1 {
                second = best;
                best = (i, d);
            } else if d < second.1 {
                second = (i, d);
            }
        }
        if !second.1.is_finite() {
            second = best;
        }
        edge_rsu_candidates.push([best, second]);
        edge_zone.push(rsus[best.0].fog);
    }

    // Vehicle trips: uniform origin, distinct uniform destination. When the
    // drawn destination is unreachable (closures can split the grid), scan
    // forward to the first reachable one.
    let active = (cfg.vehicles as f64 * cfg.demand_multiplier).round() as usize;
    let mut world = World {
        rows,
        cols,
        edges,
        out_edges,
        rsus,
        fog_sites,
        trips: Vec::new(),
        edge_rsu_candidates,
        edge_zone,
    };
    if active > 0 && n < 2 {
        return Err(Error::config(vec![format!(
            "a {rows}x{cols} grid cannot host {active} vehicles (need at least 2 intersections)"
        )]));
    }
    let mut trips = Vec::with_capacity(active);
    for i in 0..active {
        trips.push(draw_trip(&world, cfg.seed, i as u64)?);
    }
    world.trips = trips;
    Ok(world)
}

/// Draws one OD pair from the trip substream; `index` advances per vehicle
/// and per respawn so every trip is an independent draw.
pub fn draw_trip(world: &World, seed: u64, index: u64) -> Result<TripSeed> {
    let n = world.rows * world.cols;
    let mut r = rng::substream(seed, "sim.trip", index);
    let drawn_origin = r.gen_range(0..n);
    let offset = r.gen_range(1..n);
    // Closures can isolate intersections; scan forward from the drawn pair to
    // the first connected one so a valid grid never fails to seed a trip.
    for j in 0..n {
        let origin = (drawn_origin + j) % n;
        for k in 0..n {
            let dest = (origin + offset + k) % n;
            if dest == origin {
                continue;
            }
            if world.route(origin, dest).is_some() {
                return Ok(TripSeed { origin, dest });
            }
        }
    }
    Err(Error::config(vec![
        "the closure set leaves no pair of connected intersections".to_string(),
    ]))
}
