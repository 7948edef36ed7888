//! Probabilistic roadmap over a traversability map.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::io::{self, Write};
use std::path::Path as FsPath;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::elevation::ElevationMap;

pub type Point2 = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RobotBox {
    /// Footprint extent along x.
    pub length: f64,
    /// Footprint extent along y.
    pub width: f64,
    /// Not used by the 2D validity check.
    pub height: f64,
}

impl Default for RobotBox {
    fn default() -> Self {
        Self {
            length: 0.5,
            width: 0.5,
            height: 1.8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrmParams {
    pub samples: usize,
    pub radius: f64,
    pub t_min: f64,
    pub robot: RobotBox,
    pub seed: u64,
}

impl Default for PrmParams {
    fn default() -> Self {
        Self {
            samples: 2000,
            radius: 1.0,
            t_min: 0.5,
            robot: RobotBox::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("{which} {point:?} is not on a traversable cell")]
    InvalidEndpoint { which: &'static str, point: Point2 },
    #[error("goal not reachable through the roadmap")]
    Unreachable,
}

/// Per-map lookup answering "is every cell in this rectangle traversable"
/// in constant time via a summed-area table of blocked cells.
pub struct Footprint<'a> {
    map: &'a ElevationMap,
    blocked: Vec<u32>,
    half: [f64; 2],
}

impl<'a> Footprint<'a> {
    pub fn new(map: &'a ElevationMap, robot: &RobotBox, t_min: f64) -> Self {
        let (w, h) = (map.width, map.height);
        let mut blocked = vec![0u32; (w + 1) * (h + 1)];
        for r in 0..h {
            for c in 0..w {
                let bad = map.traversability_at(c, r).is_none_or(|t| t < t_min);
                blocked[(r + 1) * (w + 1) + c + 1] =
                    bad as u32 + blocked[r * (w + 1) + c + 1] + blocked[(r + 1) * (w + 1) + c]
                        - blocked[r * (w + 1) + c];
            }
        }
        Self {
            map,
            blocked,
            half: [robot.length / 2.0, robot.width / 2.0],
        }
    }

    /// Whether the footprint centred at `p` covers only traversable cells.
    pub fn fits(&self, p: &Point2) -> bool {
        let m = self.map;
        let res = m.resolution;
        let lo = |v: f64, o: f64| ((v - o) / res).floor();
        // Half-open footprint: a cell only touched on its lower edge is excluded.
        let hi = |v: f64, o: f64| ((v - o) / res).ceil() - 1.0;
        let c0 = lo(p[0] - self.half[0], m.origin[0]);
        let r0 = lo(p[1] - self.half[1], m.origin[1]);
        let c1 = hi(p[0] + self.half[0], m.origin[0]).max(c0);
        let r1 = hi(p[1] + self.half[1], m.origin[1]).max(r0);
        if c0 < 0.0 || r0 < 0.0 || c1 >= m.width as f64 || r1 >= m.height as f64 {
            return false;
        }
        let (c0, r0, c1, r1) = (c0 as usize, r0 as usize, c1 as usize + 1, r1 as usize + 1);
        let w = m.width + 1;
        let s = self.blocked[r1 * w + c1] + self.blocked[r0 * w + c0]
            - self.blocked[r0 * w + c1]
            - self.blocked[r1 * w + c0];
        s == 0
    }

    /// Samples the segment every half cell and checks the footprint at each.
    pub fn segment_free(&self, a: &Point2, b: &Point2) -> bool {
        let len = dist(a, b);
        let n = (len / (self.map.resolution / 2.0)).ceil().max(1.0) as usize;
        (0..=n).all(|k| {
            let s = k as f64 / n as f64;
            self.fits(&[a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])])
        })
    }
}

pub fn dist(a: &Point2, b: &Point2) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Segment validity for an axis-aligned footprint swept from `a` to `b`.
pub fn collision_free(
    m: &ElevationMap,
    a: &Point2,
    b: &Point2,
    robot: &RobotBox,
    t_min: f64,
) -> bool {
    Footprint::new(m, robot, t_min).segment_free(a, b)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Roadmap {
    pub nodes: Vec<Point2>,
    /// `(i, j, length)` with `i < j`.
    pub edges: Vec<(usize, usize, f64)>,
    pub params: PrmParams,
}

/// Cell-bucketed node lookup for radius queries.
struct NodeGrid {
    cell: f64,
    buckets: HashMap<(i64, i64), Vec<usize>>,
}

impl NodeGrid {
    fn new(nodes: &[Point2], cell: f64) -> Self {
        let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in nodes.iter().enumerate() {
            buckets.entry(Self::key(p, cell)).or_default().push(i);
        }
        Self { cell, buckets }
    }

    fn key(p: &Point2, cell: f64) -> (i64, i64) {
        ((p[0] / cell).floor() as i64, (p[1] / cell).floor() as i64)
    }

    /// Indices within `r` of `p`, ascending.
    fn within(&self, nodes: &[Point2], p: &Point2, r: f64) -> Vec<usize> {
        let (kx, ky) = Self::key(p, self.cell);
        let span = (r / self.cell).ceil() as i64;
        let mut out = Vec::new();
        for dx in -span..=span {
            for dy in -span..=span {
                if let Some(b) = self.buckets.get(&(kx + dx, ky + dy)) {
                    out.extend(b.iter().copied().filter(|&j| dist(&nodes[j], p) <= r));
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// Rejection-samples `samples` valid configurations and connects pairs within
/// `radius` whose straight segment is collision free.
pub fn build_prm(m: &ElevationMap, params: &PrmParams) -> Roadmap {
    let fp = Footprint::new(m, &params.robot, params.t_min);
    let any_valid = m
        .traversability
        .iter()
        .any(|t| !t.is_nan() && *t >= params.t_min);
    let mut nodes = Vec::new();
    if any_valid {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let extent = [
            m.width as f64 * m.resolution,
            m.height as f64 * m.resolution,
        ];
        let attempts = params.samples.saturating_mul(50);
        for _ in 0..attempts {
            if nodes.len() == params.samples {
                break;
            }
            let p = [
                m.origin[0] + rng.random::<f64>() * extent[0],
                m.origin[1] + rng.random::<f64>() * extent[1],
            ];
            if fp.fits(&p) {
                nodes.push(p);
            }
        }
    }
    let grid = NodeGrid::new(&nodes, params.radius.max(1e-6));
    let edges: Vec<(usize, usize, f64)> = (0..nodes.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let near = grid.within(&nodes, &nodes[i], params.radius);
            let fp = &fp;
            let nodes = &nodes;
            near.into_iter()
                .filter(move |&j| j > i)
                .filter(move |&j| fp.segment_free(&nodes[i], &nodes[j]))
                .map(move |j| (i, j, dist(&nodes[i], &nodes[j])))
                .filter(|e| e.2 > 0.0)
        })
        .collect();
    Roadmap {
        nodes,
        edges,
        params: *params,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Path {
    pub waypoints: Vec<Point2>,
    pub total_length: f64,
}

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .total_cmp(&self.0)
            .then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Connects start and goal to the roadmap and returns the shortest path by
/// uniform-cost search.
pub fn plan(
    rm: &Roadmap,
    m: &ElevationMap,
    start: Point2,
    goal: Point2,
) -> Result<Path, PlanError> {
    let p = &rm.params;
    let fp = Footprint::new(m, &p.robot, p.t_min);
    if !fp.fits(&start) {
        return Err(PlanError::InvalidEndpoint {
            which: "start",
            point: start,
        });
    }
    if !fp.fits(&goal) {
        return Err(PlanError::InvalidEndpoint {
            which: "goal",
            point: goal,
        });
    }
    if start == goal {
        return Ok(Path {
            waypoints: vec![start],
            total_length: 0.0,
        });
    }
    let n = rm.nodes.len();
    let (s, g) = (n, n + 1);
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n + 2];
    for &(i, j, l) in &rm.edges {
        adj[i].push((j, l));
        adj[j].push((i, l));
    }
    let grid = NodeGrid::new(&rm.nodes, p.radius.max(1e-6));
    for (idx, q) in [(s, start), (g, goal)] {
        for j in grid.within(&rm.nodes, &q, p.radius) {
            if fp.segment_free(&q, &rm.nodes[j]) {
                let l = dist(&q, &rm.nodes[j]);
                adj[idx].push((j, l));
                adj[j].push((idx, l));
            }
        }
    }
    let d = dist(&start, &goal);
    if d <= p.radius && fp.segment_free(&start, &goal) {
        adj[s].push((g, d));
        adj[g].push((s, d));
    }
    let point = |i: usize| match i {
        i if i == s => start,
        i if i == g => goal,
        i => rm.nodes[i],
    };
    let mut best = vec![f64::INFINITY; n + 2];
    let mut prev = vec![usize::MAX; n + 2];
    let mut heap = BinaryHeap::new();
    best[s] = 0.0;
    heap.push(Entry(0.0, s));
    while let Some(Entry(c, u)) = heap.pop() {
        if c > best[u] {
            continue;
        }
        if u == g {
            break;
        }
        for &(v, l) in &adj[u] {
            let nc = c + l;
            if nc < best[v] {
                best[v] = nc;
                prev[v] = u;
                heap.push(Entry(nc, v));
            }
        }
    }
    if best[g].is_infinite() {
        return Err(PlanError::Unreachable);
    }
    let mut order = vec![g];
    while *order.last().expect("nonempty") != s {
        order.push(prev[*order.last().expect("nonempty")]);
    }
    order.reverse();
    let waypoints: Vec<Point2> = order.into_iter().map(point).collect();
    let total_length = waypoints.windows(2).map(|w| dist(&w[0], &w[1])).sum();
    Ok(Path {
        waypoints,
        total_length,
    })
}

/// Rebuilds the roadmap from scratch on the updated map and plans again.
pub fn replan_after_update(
    m: &ElevationMap,
    start: Point2,
    goal: Point2,
    params: &PrmParams,
) -> Result<(Roadmap, Path), PlanError> {
    let rm = build_prm(m, params);
    let path = plan(&rm, m, start, goal)?;
    Ok((rm, path))
}

/// Binary colour image of the map with roadmap and path drawn on top: grey
/// levels for traversability, dark blue for no data, red for blocked cells.
pub fn write_overlay<W: Write>(
    w: &mut W,
    m: &ElevationMap,
    rm: Option<&Roadmap>,
    path: Option<&Path>,
) -> io::Result<()> {
    let (width, height) = (m.width, m.height);
    let mut px = vec![[0u8; 3]; width * height];
    for r in 0..height {
        for c in 0..width {
            px[r * width + c] = match m.traversability_at(c, r) {
                None => [20, 20, 60],
                Some(t) if rm.is_some_and(|rm| t < rm.params.t_min) => [150, 30, 30],
                Some(t) => {
                    let g = (60.0 + 195.0 * t).round() as u8;
                    [g, g, g]
                }
            };
        }
    }
    let mut plot = |p: &Point2, color: [u8; 3]| {
        if let Some((c, r)) = m.cell_at(p[0], p[1]) {
            px[r * width + c] = color;
        }
    };
    let line = |a: &Point2, b: &Point2, color: [u8; 3], plot: &mut dyn FnMut(&Point2, [u8; 3])| {
        let n = (dist(a, b) / (m.resolution / 2.0)).ceil().max(1.0) as usize;
        for k in 0..=n {
            let s = k as f64 / n as f64;
            plot(&[a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])], color);
        }
    };
    if let Some(rm) = rm {
        for &(i, j, _) in &rm.edges {
            line(&rm.nodes[i], &rm.nodes[j], [120, 170, 220], &mut plot);
        }
        for p in &rm.nodes {
            plot(p, [30, 90, 200]);
        }
    }
    if let Some(path) = path {
        for s in path.waypoints.windows(2) {
            line(&s[0], &s[1], [230, 40, 40], &mut plot);
        }
        for (p, color) in [
            (path.waypoints.first(), [40, 200, 40]),
            (path.waypoints.last(), [240, 200, 0]),
        ] {
            if let Some(p) = p {
                plot(p, color);
            }
        }
    }
    write!(w, "P6\n{width} {height}\n255\n")?;
    for r in (0..height).rev() {
        for c in 0..width {
            w.write_all(&px[r * width + c])?;
        }
    }
    Ok(())
}

pub fn save_overlay(
    file: &FsPath,
    m: &ElevationMap,
    rm: Option<&Roadmap>,
    path: Option<&Path>,
) -> io::Result<()> {
    let mut w = io::BufWriter::new(std::fs::File::create(file)?);
    write_overlay(&mut w, m, rm, path)?;
    w.flush()
}
