//! Occupancy voxel maps and the change-detection algebra.
//!
//! Only leaf voxels at a fixed resolution are stored, keyed by
//! `floor(p / resolution)`; an absent key is unknown space. Rays mark the
//! voxels they cross free and their endpoint occupied, and occupied always
//! wins over free, so the result does not depend on insertion order.
//!
//! With `⊖` the difference (occupied in `a`, observed free in `b`), `−` node
//! deletion and `+` merging with occupied overriding free:
//!
//! ```text
//! removed = prior ⊖ current
//! latest  = (prior − removed) + current
//! ```

use std::collections::{HashMap, HashSet};
use std::io::{self, Read, Write};
use std::path::Path;

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{FrameId, PointCloud};
use crate::session::{ResourceKind, SessionError, SessionMap};
use crate::util::PointGrid;

pub type VoxelKey = [i32; 3];

type KeySet = HashSet<VoxelKey>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Occupancy {
    Free,
    Occupied,
}

#[derive(Debug, Error)]
pub enum ChangeError {
    #[error("resolution mismatch: {0} vs {1}")]
    Resolution(f64, f64),
    #[error("frame mismatch: {0} vs {1}")]
    Frame(FrameId, FrameId),
    #[error("session {0:?} has no sensor offset")]
    MissingSensorOffset(String),
    #[error("resolution must be positive and finite, got {0}")]
    BadResolution(f64),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("octree file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyOctree {
    pub resolution: f64,
    pub frame: FrameId,
    nodes: HashMap<VoxelKey, Occupancy>,
}

impl OccupancyOctree {
    pub fn new(resolution: f64, frame: FrameId) -> Self {
        Self {
            resolution,
            frame,
            nodes: HashMap::new(),
        }
    }

    pub fn key_of(&self, p: &Point3<f64>) -> VoxelKey {
        let r = self.resolution;
        [
            (p.x / r).floor() as i32,
            (p.y / r).floor() as i32,
            (p.z / r).floor() as i32,
        ]
    }

    pub fn center(&self, k: &VoxelKey) -> Point3<f64> {
        let r = self.resolution;
        Point3::new(
            (k[0] as f64 + 0.5) * r,
            (k[1] as f64 + 0.5) * r,
            (k[2] as f64 + 0.5) * r,
        )
    }

    pub fn get(&self, k: &VoxelKey) -> Option<Occupancy> {
        self.nodes.get(k).copied()
    }

    pub fn is_occupied(&self, k: &VoxelKey) -> bool {
        self.get(k) == Some(Occupancy::Occupied)
    }

    pub fn is_free(&self, k: &VoxelKey) -> bool {
        self.get(k) == Some(Occupancy::Free)
    }

    pub fn set_occupied(&mut self, k: VoxelKey) {
        self.nodes.insert(k, Occupancy::Occupied);
    }

    /// Marks `k` free unless it is already occupied.
    pub fn set_free(&mut self, k: VoxelKey) {
        self.nodes.entry(k).or_insert(Occupancy::Free);
    }

    pub fn remove(&mut self, k: &VoxelKey) {
        self.nodes.remove(k);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&VoxelKey, &Occupancy)> {
        self.nodes.iter()
    }

    /// Occupied keys in ascending order.
    pub fn occupied_keys(&self) -> Vec<VoxelKey> {
        let mut v: Vec<_> = self
            .nodes
            .iter()
            .filter(|(_, s)| **s == Occupancy::Occupied)
            .map(|(k, _)| *k)
            .collect();
        v.sort_unstable();
        v
    }

    pub fn occupied_count(&self) -> usize {
        self.nodes
            .values()
            .filter(|s| **s == Occupancy::Occupied)
            .count()
    }

    pub fn free_count(&self) -> usize {
        self.nodes
            .values()
            .filter(|s| **s == Occupancy::Free)
            .count()
    }

    /// Voxel centres of the occupied nodes, in key order.
    pub fn occupied_cloud(&self) -> PointCloud {
        PointCloud::new(
            self.occupied_keys()
                .iter()
                .map(|k| self.center(k))
                .collect(),
            self.frame.clone(),
        )
    }

    /// Integrates one ray: voxels strictly between the origin voxel (inclusive)
    /// and the endpoint voxel become free, the endpoint voxel occupied.
    pub fn insert_ray(&mut self, origin: &Point3<f64>, end: &Point3<f64>) {
        let mut free = Vec::new();
        let hit = ray_keys(self.resolution, origin, end, &mut free);
        for k in free {
            self.set_free(k);
        }
        self.set_occupied(hit);
    }

    fn compatible(&self, other: &Self) -> Result<(), ChangeError> {
        if self.resolution != other.resolution {
            return Err(ChangeError::Resolution(self.resolution, other.resolution));
        }
        if self.frame != other.frame {
            return Err(ChangeError::Frame(self.frame.clone(), other.frame.clone()));
        }
        Ok(())
    }
}

/// Walks the voxels from `origin` to `end` (Amanatides–Woo), pushing every
/// voxel before the endpoint into `free` and returning the endpoint key.
pub fn ray_keys(
    resolution: f64,
    origin: &Point3<f64>,
    end: &Point3<f64>,
    free: &mut Vec<VoxelKey>,
) -> VoxelKey {
    let key = |p: &Point3<f64>| -> VoxelKey {
        [
            (p.x / resolution).floor() as i32,
            (p.y / resolution).floor() as i32,
            (p.z / resolution).floor() as i32,
        ]
    };
    let mut cur = key(origin);
    let target = key(end);
    let dir: Vector3<f64> = end - origin;
    let mut step = [0i32; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        if dir[a] > 0.0 {
            step[a] = 1;
            t_max[a] = ((cur[a] + 1) as f64 * resolution - origin[a]) / dir[a];
            t_delta[a] = resolution / dir[a];
        } else if dir[a] < 0.0 {
            step[a] = -1;
            t_max[a] = (cur[a] as f64 * resolution - origin[a]) / dir[a];
            t_delta[a] = -resolution / dir[a];
        }
    }
    // The walk never needs more steps than the Manhattan distance in keys.
    let budget: i64 = (0..3)
        .map(|a| (target[a] as i64 - cur[a] as i64).abs())
        .sum();
    for _ in 0..budget {
        if cur == target {
            break;
        }
        free.push(cur);
        let a = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
            0
        } else if t_max[1] <= t_max[2] {
            1
        } else {
            2
        };
        cur[a] += step[a];
        t_max[a] += t_delta[a];
    }
    target
}

/// Binary occupancy from every submap point within `max_range` of its sensor
/// origin; poses must already be in the common frame.
pub fn build_octree(
    session: &SessionMap,
    resolution: f64,
    max_range: f64,
) -> Result<OccupancyOctree, ChangeError> {
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(ChangeError::BadResolution(resolution));
    }
    let offset = session
        .sensor_offset
        .ok_or_else(|| ChangeError::MissingSensorOffset(session.session_id.clone()))?;
    let ids: Vec<_> = session
        .graph
        .vertices
        .keys()
        .copied()
        .filter(|id| session.has_resource(*id, ResourceKind::Submap))
        .collect();
    let parts: Vec<Result<(KeySet, KeySet), ChangeError>> = ids
        .par_iter()
        .map(|id| {
            let pose = session.graph.vertices[id].pose.isometry();
            let cloud = session.submap(*id)?;
            let origin = Point3::from((pose * offset).translation.vector);
            let mut free = HashSet::new();
            let mut occ = HashSet::new();
            let mut buf = Vec::new();
            for p in &cloud.points {
                let w = pose * p;
                if (w - origin).norm() > max_range {
                    continue;
                }
                buf.clear();
                occ.insert(ray_keys(resolution, &origin, &w, &mut buf));
                free.extend(buf.iter().copied());
            }
            Ok((free, occ))
        })
        .collect();
    let mut tree = OccupancyOctree::new(resolution, session.map_frame.clone());
    let mut all_occ = Vec::new();
    for part in parts {
        let (free, occ) = part?;
        for k in free {
            tree.set_free(k);
        }
        all_occ.push(occ);
    }
    for occ in all_occ {
        for k in occ {
            tree.set_occupied(k);
        }
    }
    Ok(tree)
}

/// `a ⊖ b`: voxels occupied in `a` and observed free in `b`. Voxels unknown in
/// `b` never count as changed.
pub fn octree_diff(
    a: &OccupancyOctree,
    b: &OccupancyOctree,
) -> Result<OccupancyOctree, ChangeError> {
    a.compatible(b)?;
    let mut out = OccupancyOctree::new(a.resolution, a.frame.clone());
    for (k, s) in a.iter() {
        if *s == Occupancy::Occupied && b.is_free(k) {
            out.set_occupied(*k);
        }
    }
    Ok(out)
}

/// `a − r`: occupied voxels of `r` become unknown in `a`; free space of `a`
/// is untouched.
pub fn octree_delete(
    a: &OccupancyOctree,
    r: &OccupancyOctree,
) -> Result<OccupancyOctree, ChangeError> {
    a.compatible(r)?;
    let mut out = a.clone();
    for (k, s) in r.iter() {
        if *s == Occupancy::Occupied && a.is_occupied(k) {
            out.remove(k);
        }
    }
    Ok(out)
}

/// `a + b`: union of nodes, occupied overriding free.
pub fn octree_merge(
    a: &OccupancyOctree,
    b: &OccupancyOctree,
) -> Result<OccupancyOctree, ChangeError> {
    a.compatible(b)?;
    let mut out = a.clone();
    for (k, s) in b.iter() {
        match s {
            Occupancy::Occupied => out.set_occupied(*k),
            Occupancy::Free => out.set_free(*k),
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChangeSet {
    pub removed: OccupancyOctree,
    pub added: OccupancyOctree,
}

impl ChangeSet {
    pub fn is_empty(&self) -> bool {
        self.removed.is_empty() && self.added.is_empty()
    }
}

/// Returns the latest map and the removed/added voxel sets.
pub fn update_latest_map(
    prior: &OccupancyOctree,
    current: &OccupancyOctree,
) -> Result<(OccupancyOctree, ChangeSet), ChangeError> {
    let removed = octree_diff(prior, current)?;
    let added = octree_diff(current, prior)?;
    let change_free_prior = octree_delete(prior, &removed)?;
    let latest = octree_merge(&change_free_prior, current)?;
    Ok((latest, ChangeSet { removed, added }))
}

/// One point per changed voxel at its centre: `(removed, added)`.
pub fn extract_change_clouds(c: &ChangeSet) -> (PointCloud, PointCloud) {
    (c.removed.occupied_cloud(), c.added.occupied_cloud())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChangeMetrics {
    /// Predicted points within `τ` of a changed surface.
    pub true_positives: usize,
    /// Predicted points within `τ` of static geometry only.
    pub false_positives: usize,
    /// Predicted points near neither; excluded from precision.
    pub unassociated: usize,
    /// Ground-truth changed points with no prediction within `τ`.
    pub false_negatives: usize,
    pub precision: Option<f64>,
    /// Fraction of ground-truth changed points covered by a prediction;
    /// `None` when there is no ground-truth change.
    pub recall: Option<f64>,
    pub f_score: Option<f64>,
    /// Mean of the two directed mean nearest-neighbour distances.
    pub chamfer: Option<f64>,
}

fn directed_mean(from: &[Point3<f64>], to: &PointGrid) -> Option<f64> {
    if from.is_empty() || to.is_empty() {
        return None;
    }
    let sum: f64 = from
        .par_iter()
        .map(|p| to.nearest_distance(p).expect("nonempty"))
        .sum();
    Some(sum / from.len() as f64)
}

/// Scores a predicted change against exact annotations at threshold `tau`.
pub fn evaluate_changes(
    predicted: &ChangeSet,
    gt_changed: &PointCloud,
    gt_static: &PointCloud,
    tau: f64,
) -> ChangeMetrics {
    let (removed, added) = extract_change_clouds(predicted);
    let mut pred = removed.points;
    pred.extend(added.points);
    evaluate_change_points(&pred, &gt_changed.points, &gt_static.points, tau)
}

/// As [`evaluate_changes`] on raw predicted points.
pub fn evaluate_change_points(
    pred: &[Point3<f64>],
    gt_changed: &[Point3<f64>],
    gt_static: &[Point3<f64>],
    tau: f64,
) -> ChangeMetrics {
    let cell = tau.max(1e-3);
    let changed = PointGrid::new(gt_changed, cell);
    let stat = PointGrid::new(gt_static, cell);
    let predicted = PointGrid::new(pred, cell);
    let (mut tp, mut fp, mut un) = (0, 0, 0);
    for p in pred {
        if changed.any_within(p, tau) {
            tp += 1;
        } else if stat.any_within(p, tau) {
            fp += 1;
        } else {
            un += 1;
        }
    }
    let covered = gt_changed
        .par_iter()
        .filter(|q| predicted.any_within(q, tau))
        .count();
    let precision = (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64);
    let recall = (!gt_changed.is_empty()).then(|| covered as f64 / gt_changed.len() as f64);
    let f_score = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    let chamfer = match (
        directed_mean(pred, &changed),
        directed_mean(gt_changed, &predicted),
    ) {
        (Some(a), Some(b)) => Some(0.5 * (a + b)),
        _ if pred.is_empty() && gt_changed.is_empty() => Some(0.0),
        _ => None,
    };
    ChangeMetrics {
        true_positives: tp,
        false_positives: fp,
        unassociated: un,
        false_negatives: gt_changed.len() - covered,
        precision,
        recall,
        f_score,
        chamfer,
    }
}

/// Ground-truth points whose voxel was observed (free or occupied) in both
/// trees: the mutually observed space within which a change is detectable.
pub fn observed_subset(
    gt: &PointCloud,
    prior: &OccupancyOctree,
    current: &OccupancyOctree,
) -> Result<PointCloud, ChangeError> {
    prior.compatible(current)?;
    Ok(PointCloud::new(
        gt.points
            .iter()
            .filter(|p| {
                let k = prior.key_of(p);
                prior.get(&k).is_some() && current.get(&k).is_some()
            })
            .copied()
            .collect(),
        gt.frame.clone(),
    ))
}

const OCTREE_MAGIC: [u8; 4] = *b"MSOT";
const OCTREE_VERSION: u16 = 1;

/// Binary form: magic, version, f64 resolution, frame string, node count,
/// then `(i32 x, i32 y, i32 z, u8 state)` in key order.
pub fn write_octree<W: Write>(w: &mut W, t: &OccupancyOctree) -> io::Result<()> {
    w.write_all(&OCTREE_MAGIC)?;
    w.write_all(&OCTREE_VERSION.to_le_bytes())?;
    w.write_all(&t.resolution.to_le_bytes())?;
    let frame = t.frame.as_str().as_bytes();
    w.write_all(&(frame.len() as u32).to_le_bytes())?;
    w.write_all(frame)?;
    let mut nodes: Vec<_> = t.nodes.iter().collect();
    nodes.sort_unstable_by_key(|(k, _)| **k);
    w.write_all(&(nodes.len() as u64).to_le_bytes())?;
    for (k, s) in nodes {
        for c in k {
            w.write_all(&c.to_le_bytes())?;
        }
        w.write_all(&[matches!(s, Occupancy::Occupied) as u8])?;
    }
    Ok(())
}

pub fn read_octree<R: Read>(r: &mut R) -> Result<OccupancyOctree, ChangeError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let bad = |m: &str| ChangeError::Format(m.to_string());
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], ChangeError> {
        let s = buf.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != OCTREE_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u16::from_le_bytes(take(2)?.try_into().expect("2"));
    if version != OCTREE_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let resolution = f64::from_le_bytes(take(8)?.try_into().expect("8"));
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(ChangeError::BadResolution(resolution));
    }
    let flen = u32::from_le_bytes(take(4)?.try_into().expect("4")) as usize;
    let frame = String::from_utf8(take(flen)?.to_vec()).map_err(|_| bad("frame is not utf-8"))?;
    let count = u64::from_le_bytes(take(8)?.try_into().expect("8")) as usize;
    let mut t = OccupancyOctree::new(resolution, FrameId::new(frame));
    for _ in 0..count {
        let rec = take(13)?;
        let c = |i: usize| i32::from_le_bytes(rec[i * 4..i * 4 + 4].try_into().expect("4"));
        let k = [c(0), c(1), c(2)];
        let state = match rec[12] {
            0 => Occupancy::Free,
            1 => Occupancy::Occupied,
            s => return Err(bad(&format!("bad node state {s}"))),
        };
        t.nodes.insert(k, state);
    }
    if pos != buf.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(t)
}

pub fn save_octree(path: &Path, t: &OccupancyOctree) -> io::Result<()> {
    let mut w = io::BufWriter::new(std::fs::File::create(path)?);
    write_octree(&mut w, t)?;
    w.flush()
}

pub fn load_octree(path: &Path) -> Result<OccupancyOctree, ChangeError> {
    let mut f = std::fs::File::open(path)?;
    read_octree(&mut f)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoxelCounts {
    pub occupied: usize,
    pub free: usize,
}

impl From<&OccupancyOctree> for VoxelCounts {
    fn from(t: &OccupancyOctree) -> Self {
        Self {
            occupied: t.occupied_count(),
            free: t.free_count(),
        }
    }
}

/// Voxel counts of every tree involved in one update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChangeSummary {
    pub resolution: f64,
    pub frame: FrameId,
    pub prior: VoxelCounts,
    pub current: VoxelCounts,
    pub removed: VoxelCounts,
    pub added: VoxelCounts,
    pub latest: VoxelCounts,
}

impl ChangeSummary {
    pub fn new(
        prior: &OccupancyOctree,
        current: &OccupancyOctree,
        changes: &ChangeSet,
        latest: &OccupancyOctree,
    ) -> Self {
        Self {
            resolution: prior.resolution,
            frame: prior.frame.clone(),
            prior: prior.into(),
            current: current.into(),
            removed: (&changes.removed).into(),
            added: (&changes.added).into(),
            latest: latest.into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tree(occ: &[VoxelKey], free: &[VoxelKey]) -> OccupancyOctree {
        let mut t = OccupancyOctree::new(0.05, FrameId::new("w"));
        for k in free {
            t.set_free(*k);
        }
        for k in occ {
            t.set_occupied(*k);
        }
        t
    }

    #[test]
    fn ray_one_meter_ahead() {
        let mut t = OccupancyOctree::new(0.05, FrameId::new("w"));
        let o = Point3::new(0.01, 0.02, 0.03);
        t.insert_ray(&o, &Point3::new(1.01, 0.02, 0.03));
        // Integer oracle: origin voxel 0, endpoint voxel floor(1.01/0.05) = 20.
        assert!(t.is_occupied(&[20, 0, 0]));
        for i in 0..20 {
            assert!(t.is_free(&[i, 0, 0]), "voxel {i}");
        }
        assert_eq!(t.len(), 21);
    }

    #[test]
    fn diagonal_ray_is_face_connected() {
        let mut free = Vec::new();
        let end = ray_keys(
            0.1,
            &Point3::new(0.05, 0.05, 0.05),
            &Point3::new(0.93, 0.41, -0.27),
            &mut free,
        );
        assert_eq!(end, [9, 4, -3]);
        let mut walk = free.clone();
        walk.push(end);
        assert_eq!(walk[0], [0, 0, 0]);
        for w in walk.windows(2) {
            let d: i32 = (0..3).map(|a| (w[1][a] - w[0][a]).abs()).sum();
            assert_eq!(d, 1);
        }
        assert_eq!(free.len(), 9 + 4 + 3);
    }

    #[test]
    fn occupied_wins_regardless_of_order() {
        let a = Point3::new(0.0, 0.0, 0.0);
        let mut t1 = OccupancyOctree::new(0.1, FrameId::new("w"));
        let mut t2 = t1.clone();
        t1.insert_ray(&a, &Point3::new(0.55, 0.0, 0.0));
        t1.insert_ray(&a, &Point3::new(1.05, 0.0, 0.0));
        t2.insert_ray(&a, &Point3::new(1.05, 0.0, 0.0));
        t2.insert_ray(&a, &Point3::new(0.55, 0.0, 0.0));
        assert_eq!(t1, t2);
        assert!(t1.is_occupied(&[5, 0, 0]));
    }

    #[test]
    fn diff_delete_merge_examples() {
        let a = tree(&[[0, 0, 0], [1, 0, 0]], &[[2, 0, 0]]);
        assert!(octree_diff(&a, &a).unwrap().is_empty());
        let b = tree(&[], &[[0, 0, 0]]);
        let d = octree_diff(&a, &b).unwrap();
        assert_eq!(d.occupied_keys(), vec![[0, 0, 0]]);
        // [1,0,0] unknown in b, so not a change.
        assert!(!d.is_occupied(&[1, 0, 0]));

        let empty = tree(&[], &[]);
        assert_eq!(octree_delete(&a, &empty).unwrap(), a);
        let gone = octree_delete(&a, &a).unwrap();
        assert_eq!(gone.occupied_count(), 0);
        assert!(gone.is_free(&[2, 0, 0]));

        assert_eq!(octree_merge(&a, &empty).unwrap(), a);
        assert_eq!(octree_merge(&a, &a).unwrap(), a);
        let m = octree_merge(&b, &a).unwrap();
        assert!(m.is_occupied(&[0, 0, 0]));
        let m = octree_merge(&a, &b).unwrap();
        assert!(m.is_occupied(&[0, 0, 0]));
    }

    #[test]
    fn mismatched_trees_rejected() {
        let a = tree(&[], &[]);
        let b = OccupancyOctree::new(0.1, FrameId::new("w"));
        assert!(matches!(
            octree_diff(&a, &b),
            Err(ChangeError::Resolution(..))
        ));
        let c = OccupancyOctree::new(0.05, FrameId::new("v"));
        assert!(matches!(octree_merge(&a, &c), Err(ChangeError::Frame(..))));
    }

    #[test]
    fn update_examples() {
        let prior = tree(&[[0, 0, 0], [5, 5, 5]], &[[1, 0, 0], [2, 0, 0]]);
        let (latest, ch) = update_latest_map(&prior, &prior).unwrap();
        assert!(ch.is_empty());
        assert_eq!(latest, prior);

        let current = tree(&[[2, 0, 0]], &[[0, 0, 0], [1, 0, 0]]);
        let (latest, ch) = update_latest_map(&prior, &current).unwrap();
        assert_eq!(ch.removed.occupied_keys(), vec![[0, 0, 0]]);
        assert_eq!(ch.added.occupied_keys(), vec![[2, 0, 0]]);
        assert!(latest.is_free(&[0, 0, 0]));
        assert!(latest.is_occupied(&[5, 5, 5]));
        assert!(latest.is_occupied(&[2, 0, 0]));
    }

    #[test]
    fn change_clouds_at_voxel_centres() {
        let ch = ChangeSet {
            removed: tree(&[[0, 0, 0]], &[]),
            added: tree(&[], &[]),
        };
        let (r, a) = extract_change_clouds(&ch);
        assert!((r.points[0] - Point3::new(0.025, 0.025, 0.025)).norm() < 1e-15);
        assert!(a.is_empty());
    }

    #[test]
    fn metric_examples() {
        let gt: Vec<_> = (0..10).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        let stat = vec![Point3::new(0.0, 5.0, 0.0)];
        let m = evaluate_change_points(&gt, &gt, &stat, 0.05);
        assert_eq!(
            (m.precision, m.recall, m.chamfer),
            (Some(1.0), Some(1.0), Some(0.0))
        );
        let m = evaluate_change_points(&gt[..5], &gt, &stat, 0.05);
        assert_eq!((m.precision, m.recall), (Some(1.0), Some(0.5)));
        assert_eq!(m.false_negatives, 5);
        let m = evaluate_change_points(&stat, &[], &stat, 0.05);
        assert_eq!((m.precision, m.recall), (Some(0.0), None));
        let m = evaluate_change_points(&[Point3::new(50.0, 0.0, 0.0)], &gt, &stat, 0.05);
        assert_eq!((m.unassociated, m.precision), (1, None));
    }

    #[test]
    fn octree_file_roundtrip() {
        let t = tree(&[[0, -1, 2], [7, 7, 7]], &[[1, 1, 1]]);
        let mut buf = Vec::new();
        write_octree(&mut buf, &t).unwrap();
        assert_eq!(read_octree(&mut buf.as_slice()).unwrap(), t);
        assert!(read_octree(&mut &buf[..buf.len() - 1]).is_err());
        let mut again = Vec::new();
        write_octree(&mut again, &read_octree(&mut buf.as_slice()).unwrap()).unwrap();
        assert_eq!(buf, again);
    }

    fn arb_tree() -> impl Strategy<Value = OccupancyOctree> {
        prop::collection::vec(((0i32..6, 0i32..6, 0i32..6), 0u8..3), 0..120).prop_map(|cells| {
            let mut t = OccupancyOctree::new(0.05, FrameId::new("w"));
            for ((x, y, z), s) in cells {
                match s {
                    0 => t.set_free([x, y, z]),
                    1 => t.set_occupied([x, y, z]),
                    _ => {}
                }
            }
            t
        })
    }

    proptest! {
        #[test]
        fn latest_map_set_identities(prior in arb_tree(), current in arb_tree()) {
            let (latest, ch) = update_latest_map(&prior, &current).unwrap();
            let cleaned = octree_delete(&prior, &ch.removed).unwrap();
            for x in 0..6 { for y in 0..6 { for z in 0..6 {
                let k = [x, y, z];
                prop_assert!(!cleaned.is_occupied(&k) || prior.is_occupied(&k));
                prop_assert!(!(cleaned.is_occupied(&k) && ch.removed.is_occupied(&k)));
                prop_assert!(!(ch.removed.is_occupied(&k) && ch.added.is_occupied(&k)));
                let expect = (prior.is_occupied(&k) && !ch.removed.is_occupied(&k)) || current.is_occupied(&k);
                prop_assert_eq!(latest.is_occupied(&k), expect);
                prop_assert!(!cleaned.is_occupied(&k) || !current.is_free(&k));
            }}}
        }
    }
}
