//! Synthetic multi-session datasets with exact ground truth.
//!
//! A world is a union of axis-aligned free-space boxes (rooms, corridors,
//! doors); everything outside that union is solid. Boxes inside it are props,
//! either static or placed per epoch. A virtual depth sensor casts rays against
//! this geometry, and wall-mounted landmarks with unique signatures stand in for
//! image features.
//!
//! Surfaces are nudged `surface_offset` into the solid side (free space grows,
//! props shrink) so that a surface specified on a voxel boundary is sampled just
//! inside the solid voxel instead of landing on the boundary itself.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Isometry3, Matrix6, Point3, Translation3, UnitQuaternion, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptor::{DescriptorSet, LocalDescriptor};
use crate::geometry::{exp_iso, Aabb, FrameId, PointCloud, Pose};
use crate::graph::{Edge, EdgeKind, PoseGraph, ResourceKeys, Vertex, VertexId};
use crate::place::{estimate_relative_pose, RansacConfig, VertexRef};
use crate::session::{Resource, ResourceKind, SessionMap};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("world has no spaces")]
    NoSpaces,
    #[error("{0}: box min must be below max on every axis")]
    BadBox(String),
    #[error("world needs at least one epoch")]
    NoEpochs,
    #[error("movable prop `{name}` has {found} placements, expected {expected}")]
    Placements {
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("prop `{0}` does not lie within the free space")]
    PropOutside(String),
    #[error("epoch {epoch} out of range (world has {epochs})")]
    Epoch { epoch: usize, epochs: usize },
    #[error("invalid trajectory: {0}")]
    Trajectory(String),
    #[error("trajectory leaves the world at ({x:.3}, {y:.3})")]
    OutsideWorld { x: f64, y: f64 },
}

/// Free-space box; its floor is `min[2]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceSpec {
    pub label: String,
    pub min: [f64; 3],
    pub max: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropSpec {
    pub name: String,
    pub min: [f64; 3],
    pub max: [f64; 3],
}

/// A box whose minimum corner is given per epoch; `None` means absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MovablePropSpec {
    pub name: String,
    pub size: [f64; 3],
    pub placements: Vec<Option<[f64; 3]>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LandmarkSpec {
    /// Horizontal spacing along each wall.
    pub spacing: f64,
    /// Mounting heights above the floor of the space.
    pub heights: Vec<f64>,
    pub dim: usize,
    pub seed: u64,
}

impl Default for LandmarkSpec {
    fn default() -> Self {
        Self {
            spacing: 0.7,
            heights: vec![0.25, 0.6, 0.95],
            dim: 16,
            seed: 7,
        }
    }
}

fn default_offset() -> f64 {
    0.001
}

fn default_epochs() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    #[serde(default)]
    pub name: String,
    pub spaces: Vec<SpaceSpec>,
    #[serde(default)]
    pub static_props: Vec<PropSpec>,
    #[serde(default)]
    pub movable_props: Vec<MovablePropSpec>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub landmarks: LandmarkSpec,
    #[serde(default = "default_offset")]
    pub surface_offset: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorSpec {
    pub hfov_deg: f64,
    pub vfov_deg: f64,
    pub angular_resolution_deg: f64,
    pub max_range: f64,
    /// Downward tilt of the optical axis.
    pub pitch_deg: f64,
    /// Sensor height above the body frame (the floor).
    pub height: f64,
    /// Range noise sigma in meters.
    pub depth_noise: f64,
}

impl Default for SensorSpec {
    fn default() -> Self {
        Self {
            hfov_deg: 90.0,
            vfov_deg: 60.0,
            angular_resolution_deg: 1.0,
            max_range: 5.0,
            pitch_deg: 25.0,
            height: 1.0,
            depth_noise: 0.0,
        }
    }
}

/// Per-step odometry noise sigmas.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OdometryNoise {
    pub translation: f64,
    pub rotation_deg: f64,
}

/// Intra-session loop closures found by the simulated front end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntraLoopSpec {
    pub max_per_vertex: usize,
    /// Minimum index distance between the two vertices.
    pub min_separation: usize,
    /// Minimum number of co-visible landmarks to attempt a match.
    pub min_shared: usize,
    pub ransac: RansacConfig,
}

impl Default for IntraLoopSpec {
    fn default() -> Self {
        Self {
            max_per_vertex: 3,
            min_separation: 2,
            min_shared: 10,
            ransac: RansacConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    /// Ground-plane polyline.
    pub waypoints: Vec<[f64; 2]>,
    #[serde(default = "default_speed")]
    pub speed: f64,
    #[serde(default = "default_spacing")]
    pub keyframe_spacing: f64,
    #[serde(default)]
    pub sensor: SensorSpec,
    #[serde(default)]
    pub odometry_noise: OdometryNoise,
    /// Sigma added to each landmark signature component.
    #[serde(default)]
    pub descriptor_noise: f64,
    #[serde(default)]
    pub intra_loops: IntraLoopSpec,
}

fn default_speed() -> f64 {
    0.5
}

fn default_spacing() -> f64 {
    0.5
}

impl TrajectorySpec {
    pub fn new(waypoints: Vec<[f64; 2]>) -> Self {
        Self {
            waypoints,
            speed: default_speed(),
            keyframe_spacing: default_spacing(),
            sensor: SensorSpec::default(),
            odometry_noise: OdometryNoise::default(),
            descriptor_noise: 0.0,
            intra_loops: IntraLoopSpec::default(),
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Trajectory(m.to_owned()));
        let s = &self.sensor;
        if self.waypoints.is_empty() {
            return bad("no waypoints");
        }
        if !(self.keyframe_spacing > 0.0) {
            return bad("keyframe_spacing must be positive");
        }
        if !(self.speed > 0.0) {
            return bad("speed must be positive");
        }
        if !(s.hfov_deg > 0.0 && s.hfov_deg <= 360.0) || !(s.vfov_deg > 0.0 && s.vfov_deg < 180.0) {
            return bad("fields of view must lie in (0, 360] and (0, 180) degrees");
        }
        if !(s.angular_resolution_deg > 0.0) || !(s.max_range > 0.0) {
            return bad("angular resolution and max range must be positive");
        }
        let noise = [
            s.depth_noise,
            self.descriptor_noise,
            self.odometry_noise.translation,
            self.odometry_noise.rotation_deg,
        ];
        if noise.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return bad("noise sigmas must be finite and non-negative");
        }
        Ok(())
    }
}

/// One session of a scenario file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionPlan {
    pub id: String,
    #[serde(default)]
    pub epoch: usize,
    pub trajectory: TrajectorySpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub sessions: Vec<SessionPlan>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Landmark {
    pub id: usize,
    pub position: Point3<f64>,
    pub signature: Vec<f32>,
}

fn aabb(min: [f64; 3], max: [f64; 3]) -> Aabb<f64> {
    Aabb {
        min: Point3::from(min),
        max: Point3::from(max),
    }
}

fn grow(b: &Aabb<f64>, d: f64) -> Aabb<f64> {
    let v = Vector3::repeat(d);
    Aabb {
        min: b.min - v,
        max: b.max + v,
    }
}

fn inside(b: &Aabb<f64>, p: &Point3<f64>, tol: f64) -> bool {
    (0..3).all(|i| p[i] >= b.min[i] - tol && p[i] <= b.max[i] + tol)
}

/// Distance along `d` at which the ray from `o` leaves `b`.
fn slab_exit(b: &Aabb<f64>, o: &Point3<f64>, d: &Vector3<f64>) -> f64 {
    let mut t = f64::INFINITY;
    for i in 0..3 {
        if d[i] > 0.0 {
            t = t.min((b.max[i] - o[i]) / d[i]);
        } else if d[i] < 0.0 {
            t = t.min((b.min[i] - o[i]) / d[i]);
        }
    }
    t
}

/// Entry distance of the ray into `b`, if it enters at a positive distance.
fn slab_entry(b: &Aabb<f64>, o: &Point3<f64>, d: &Vector3<f64>) -> Option<f64> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for i in 0..3 {
        if d[i] == 0.0 {
            if o[i] < b.min[i] || o[i] > b.max[i] {
                return None;
            }
            continue;
        }
        let a = (b.min[i] - o[i]) / d[i];
        let c = (b.max[i] - o[i]) / d[i];
        t0 = t0.max(a.min(c));
        t1 = t1.min(a.max(c));
    }
    (t1 >= t0 && t0 > 0.0).then_some(t0)
}

/// Validated world with solid geometry resolved per epoch.
#[derive(Clone, Debug)]
pub struct World {
    pub spec: WorldSpec,
    spaces: Vec<Aabb<f64>>,
    /// Solid prop boxes, already shrunk by the surface offset, per epoch.
    props: Vec<Vec<(String, Aabb<f64>)>>,
    pub landmarks: Vec<Landmark>,
}

impl World {
    pub fn new(spec: WorldSpec) -> Result<Self, SynthError> {
        if spec.spaces.is_empty() {
            return Err(SynthError::NoSpaces);
        }
        if spec.epochs == 0 {
            return Err(SynthError::NoEpochs);
        }
        let check = |name: &str, min: &[f64; 3], max: &[f64; 3]| {
            if (0..3).all(|i| min[i] < max[i] && min[i].is_finite() && max[i].is_finite()) {
                Ok(())
            } else {
                Err(SynthError::BadBox(name.to_owned()))
            }
        };
        for s in &spec.spaces {
            check(&s.label, &s.min, &s.max)?;
        }
        let off = spec.surface_offset;
        let spaces: Vec<Aabb<f64>> = spec
            .spaces
            .iter()
            .map(|s| grow(&aabb(s.min, s.max), off))
            .collect();
        let mut props = vec![Vec::new(); spec.epochs];
        let mut nominal: Vec<(String, Aabb<f64>, Vec<usize>)> = Vec::new();
        for p in &spec.static_props {
            check(&p.name, &p.min, &p.max)?;
            nominal.push((
                p.name.clone(),
                aabb(p.min, p.max),
                (0..spec.epochs).collect(),
            ));
        }
        for m in &spec.movable_props {
            if m.placements.len() != spec.epochs {
                return Err(SynthError::Placements {
                    name: m.name.clone(),
                    expected: spec.epochs,
                    found: m.placements.len(),
                });
            }
            for (e, at) in m.placements.iter().enumerate() {
                if let Some(at) = at {
                    let max = [at[0] + m.size[0], at[1] + m.size[1], at[2] + m.size[2]];
                    check(&m.name, at, &max)?;
                    nominal.push((m.name.clone(), aabb(*at, max), vec![e]));
                }
            }
        }
        for (name, b, epochs) in nominal {
            // Every corner must sit in free space; the centre must share a box
            // with it so props cannot bridge a wall.
            let corners_ok = (0..8).all(|c| {
                let p = Point3::new(
                    if c & 1 == 0 { b.min.x } else { b.max.x },
                    if c & 2 == 0 { b.min.y } else { b.max.y },
                    if c & 4 == 0 { b.min.z } else { b.max.z },
                );
                spaces.iter().any(|s| inside(s, &p, 1e-9))
            });
            if !corners_ok {
                return Err(SynthError::PropOutside(name));
            }
            let shrunk = grow(&b, -off);
            for e in epochs {
                props[e].push((name.clone(), shrunk));
            }
        }
        let mut w = Self {
            spec,
            spaces,
            props,
            landmarks: Vec::new(),
        };
        w.landmarks = w.place_landmarks();
        Ok(w)
    }

    pub fn epochs(&self) -> usize {
        self.spec.epochs
    }

    fn check_epoch(&self, epoch: usize) -> Result<(), SynthError> {
        if epoch < self.spec.epochs {
            Ok(())
        } else {
            Err(SynthError::Epoch {
                epoch,
                epochs: self.spec.epochs,
            })
        }
    }

    pub fn in_free_space(&self, p: &Point3<f64>) -> bool {
        self.spaces.iter().any(|s| inside(s, p, 0.0))
    }

    fn in_prop(&self, epoch: usize, p: &Point3<f64>, tol: f64) -> bool {
        self.props[epoch].iter().any(|(_, b)| inside(b, p, tol))
    }

    /// Label and floor height of the first space whose footprint holds `(x, y)`.
    pub fn space_at(&self, x: f64, y: f64) -> Option<(&str, f64)> {
        self.spec
            .spaces
            .iter()
            .find(|s| x >= s.min[0] && x <= s.max[0] && y >= s.min[1] && y <= s.max[1])
            .map(|s| (s.label.as_str(), s.min[2]))
    }

    /// Distance to the first surface along unit direction `d`, if within range.
    /// `None` also when `o` is not in free space.
    pub fn cast_ray(
        &self,
        epoch: usize,
        o: &Point3<f64>,
        d: &Vector3<f64>,
        max_range: f64,
    ) -> Option<f64> {
        let mut t = 0.0;
        let mut moved = false;
        // Hop from box to box until the ray reaches a point no box contains.
        for _ in 0..256 {
            let q = o + d * (t + 1e-9);
            let exit = self
                .spaces
                .iter()
                .filter(|b| inside(b, &q, 0.0))
                .map(|b| slab_exit(b, o, d))
                .fold(f64::NEG_INFINITY, f64::max);
            if exit <= t {
                break;
            }
            t = exit;
            moved = true;
            if t > max_range {
                break;
            }
        }
        if !moved {
            return None;
        }
        let hit = self.props[epoch]
            .iter()
            .filter_map(|(_, b)| slab_entry(b, o, d))
            .fold(t, f64::min);
        (hit <= max_range).then_some(hit)
    }

    fn place_landmarks(&self) -> Vec<Landmark> {
        let ls = &self.spec.landmarks;
        let mut rng = ChaCha8Rng::seed_from_u64(ls.seed);
        let mut out = Vec::new();
        if !(ls.spacing > 0.0) {
            return out;
        }
        for (s, b) in self.spec.spaces.iter().zip(&self.spaces) {
            // Four walls: (fixed axis, side, running axis).
            for (axis, high) in [(0usize, false), (0, true), (1, false), (1, true)] {
                let run = 1 - axis;
                let len = s.max[run] - s.min[run];
                let n = (len / ls.spacing).floor() as usize;
                for k in 0..n {
                    let u = s.min[run]
                        + ls.spacing * (k as f64 + 0.5)
                        + 0.5 * (len - n as f64 * ls.spacing);
                    for h in &ls.heights {
                        let mut p = Point3::origin();
                        p[axis] = if high { b.max[axis] } else { b.min[axis] };
                        p[run] = u;
                        p[2] = s.min[2] + h;
                        let mut n_out = Vector3::zeros();
                        n_out[axis] = if high { 1.0 } else { -1.0 };
                        let on_wall = !self.in_free_space(&(p + n_out * 0.01))
                            && self.in_free_space(&(p - n_out * 0.01))
                            && !self
                                .props
                                .iter()
                                .flatten()
                                .any(|(_, pb)| inside(pb, &p, 0.01));
                        if !on_wall {
                            continue;
                        }
                        let sig: Vec<f32> = (0..ls.dim)
                            .map(|_| rng.sample::<f32, _>(StandardNormal))
                            .collect();
                        let norm = sig.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-6);
                        out.push(Landmark {
                            id: out.len(),
                            position: p,
                            signature: sig.into_iter().map(|v| v / norm).collect(),
                        });
                    }
                }
            }
        }
        out
    }

    /// Surface samples at `spacing` of the geometry present in `epoch`, with
    /// hidden faces (against walls, under props) removed. Props are tagged
    /// with their name, world surfaces with `None`.
    fn surface_samples(&self, epoch: usize, spacing: f64) -> Vec<(Option<&str>, Point3<f64>)> {
        let mut out = Vec::new();
        let visible_from = |p: &Point3<f64>, n: &Vector3<f64>| {
            let q = p + n * 0.01;
            self.in_free_space(&q) && !self.in_prop(epoch, &q, 0.0)
        };
        for b in &self.spaces {
            for (axis, high) in faces() {
                let mut n = Vector3::zeros();
                n[axis] = if high { -1.0 } else { 1.0 };
                sample_face(b, axis, high, spacing, |p| {
                    if visible_from(&p, &n) && !self.in_free_space(&(p - n * 0.01)) {
                        out.push((None, p));
                    }
                });
            }
        }
        for (name, b) in &self.props[epoch] {
            for (axis, high) in faces() {
                if axis == 2 && !high {
                    continue;
                }
                let mut n = Vector3::zeros();
                n[axis] = if high { 1.0 } else { -1.0 };
                sample_face(b, axis, high, spacing, |p| {
                    if visible_from(&p, &n) {
                        out.push((Some(name.as_str()), p));
                    }
                });
            }
        }
        out
    }

    /// Reference surface cloud of `epoch` in the world frame.
    pub fn surface_cloud(&self, epoch: usize, spacing: f64) -> Result<PointCloud, SynthError> {
        self.check_epoch(epoch)?;
        Ok(PointCloud::new(
            self.surface_samples(epoch, spacing)
                .into_iter()
                .map(|(_, p)| p)
                .collect(),
            FrameId::new("world"),
        ))
    }

    fn placement(&self, name: &str, epoch: usize) -> Option<[f64; 3]> {
        self.spec
            .movable_props
            .iter()
            .find(|m| m.name == name)
            .and_then(|m| m.placements[epoch])
    }
}

fn faces() -> [(usize, bool); 6] {
    [
        (0, false),
        (0, true),
        (1, false),
        (1, true),
        (2, false),
        (2, true),
    ]
}

fn sample_face(
    b: &Aabb<f64>,
    axis: usize,
    high: bool,
    spacing: f64,
    mut f: impl FnMut(Point3<f64>),
) {
    let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
    let nu = ((b.max[u] - b.min[u]) / spacing).ceil().max(1.0) as usize;
    let nv = ((b.max[v] - b.min[v]) / spacing).ceil().max(1.0) as usize;
    let (du, dv) = (
        (b.max[u] - b.min[u]) / nu as f64,
        (b.max[v] - b.min[v]) / nv as f64,
    );
    for i in 0..nu {
        for j in 0..nv {
            let mut p = Point3::origin();
            p[axis] = if high { b.max[axis] } else { b.min[axis] };
            p[u] = b.min[u] + du * (i as f64 + 0.5);
            p[v] = b.min[v] + dv * (j as f64 + 0.5);
            f(p);
        }
    }
}

/// Exact change annotation between two epochs, world frame: surfaces of every
/// movable prop whose placement differs (taken from both epochs) versus all
/// remaining surfaces of either epoch.
pub fn change_ground_truth(
    w: &World,
    epoch_a: usize,
    epoch_b: usize,
    spacing: f64,
) -> Result<(PointCloud, PointCloud), SynthError> {
    w.check_epoch(epoch_a)?;
    w.check_epoch(epoch_b)?;
    let moved: BTreeSet<&str> = w
        .spec
        .movable_props
        .iter()
        .filter(|m| m.placements[epoch_a] != m.placements[epoch_b])
        .map(|m| m.name.as_str())
        .collect();
    let mut changed = Vec::new();
    let mut stat = Vec::new();
    // Surfaces common to both epochs are sampled at identical positions.
    let mut seen = BTreeSet::new();
    let epochs = if epoch_a == epoch_b {
        vec![epoch_a]
    } else {
        vec![epoch_a, epoch_b]
    };
    for e in epochs {
        for (tag, p) in w.surface_samples(e, spacing) {
            match tag {
                Some(name) if moved.contains(name) && w.placement(name, e).is_some() => {
                    changed.push(p)
                }
                _ => {
                    if seen.insert([p.x.to_bits(), p.y.to_bits(), p.z.to_bits()]) {
                        stat.push(p);
                    }
                }
            }
        }
    }
    let frame = FrameId::new("world");
    Ok((
        PointCloud::new(changed, frame.clone()),
        PointCloud::new(stat, frame),
    ))
}

/// Exact keyframe poses of one generated session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub session_id: String,
    pub epoch: usize,
    /// `T_{world,map}`; the session map frame is its first keyframe.
    #[serde(with = "pose_array")]
    pub world_from_map: Isometry3<f64>,
    pub keyframes: Vec<GtKeyframe>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtKeyframe {
    pub id: VertexId,
    pub stamp: f64,
    #[serde(with = "pose_array")]
    pub world_from_body: Isometry3<f64>,
    /// Landmarks visible from this keyframe.
    pub landmarks: Vec<usize>,
}

impl GroundTruth {
    pub fn stamp_of(&self, id: VertexId) -> Option<f64> {
        self.keyframes.iter().find(|k| k.id == id).map(|k| k.stamp)
    }
}

/// `[qw, qx, qy, qz, tx, ty, tz]`, the layout of the session graph files.
pub mod pose_array {
    use nalgebra::{Isometry3, Quaternion, Translation3, UnitQuaternion};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn to_array(iso: &Isometry3<f64>) -> [f64; 7] {
        let q = iso.rotation.quaternion();
        let t = iso.translation.vector;
        [q.w, q.i, q.j, q.k, t.x, t.y, t.z]
    }

    pub fn from_array(a: [f64; 7]) -> Isometry3<f64> {
        Isometry3::from_parts(
            Translation3::new(a[4], a[5], a[6]),
            UnitQuaternion::from_quaternion(Quaternion::new(a[0], a[1], a[2], a[3])),
        )
    }

    pub fn serialize<S: Serializer>(iso: &Isometry3<f64>, s: S) -> Result<S::Ok, S::Error> {
        to_array(iso).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Isometry3<f64>, D::Error> {
        <[f64; 7]>::deserialize(d).map(from_array)
    }
}

pub struct GeneratedSession {
    pub session: SessionMap,
    pub truth: GroundTruth,
}

struct Keyframe {
    stamp: f64,
    world_from_body: Isometry3<f64>,
    label: String,
}

fn keyframes(w: &World, t: &TrajectorySpec) -> Result<Vec<Keyframe>, SynthError> {
    let wp = &t.waypoints;
    let mut segs = Vec::new();
    for pair in wp.windows(2) {
        let d = [pair[1][0] - pair[0][0], pair[1][1] - pair[0][1]];
        let len = d[0].hypot(d[1]);
        if len > 1e-12 {
            segs.push((pair[0], d, len));
        }
    }
    let total: f64 = segs.iter().map(|s| s.2).sum();
    let count = (total / t.keyframe_spacing + 1e-9).floor() as usize + 1;
    let mut out = Vec::with_capacity(count);
    let mut seg = 0;
    let mut seg_start = 0.0;
    for k in 0..count {
        let s = k as f64 * t.keyframe_spacing;
        while seg + 1 < segs.len() && s >= seg_start + segs[seg].2 - 1e-9 {
            seg_start += segs[seg].2;
            seg += 1;
        }
        let (x, y, yaw) = match segs.get(seg) {
            Some((a, d, len)) => {
                let f = ((s - seg_start) / len).min(1.0);
                (a[0] + d[0] * f, a[1] + d[1] * f, d[1].atan2(d[0]))
            }
            None => (wp[0][0], wp[0][1], 0.0),
        };
        let (label, floor) = w.space_at(x, y).ok_or(SynthError::OutsideWorld { x, y })?;
        let iso = Isometry3::from_parts(
            Translation3::new(x, y, floor),
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw),
        );
        let sensor = iso * Point3::new(0.0, 0.0, t.sensor.height);
        if !w.in_free_space(&sensor) {
            return Err(SynthError::OutsideWorld { x, y });
        }
        out.push(Keyframe {
            stamp: s / t.speed,
            world_from_body: iso,
            label: label.to_owned(),
        });
    }
    Ok(out)
}

pub fn sensor_offset(s: &SensorSpec) -> Isometry3<f64> {
    Isometry3::from_parts(
        Translation3::new(0.0, 0.0, s.height),
        UnitQuaternion::from_axis_angle(&Vector3::y_axis(), s.pitch_deg.to_radians()),
    )
}

/// Unit ray directions in the sensor frame (x forward, z up).
pub fn ray_directions(s: &SensorSpec) -> Vec<Vector3<f64>> {
    let res = s.angular_resolution_deg;
    let full = s.hfov_deg >= 360.0 - 1e-9;
    let nh = if full {
        (360.0 / res).round() as usize
    } else {
        (s.hfov_deg / res).floor() as usize + 1
    };
    let nv = (s.vfov_deg / res).floor() as usize + 1;
    let mut out = Vec::with_capacity(nh * nv);
    for i in 0..nv {
        let el = (-0.5 * s.vfov_deg + i as f64 * res).to_radians();
        for j in 0..nh {
            let az = if full {
                -180.0 + j as f64 * res
            } else {
                -0.5 * s.hfov_deg + j as f64 * res
            }
            .to_radians();
            out.push(Vector3::new(
                el.cos() * az.cos(),
                el.cos() * az.sin(),
                el.sin(),
            ));
        }
    }
    out
}

fn stream_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 step so neighbouring streams decorrelate.
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn landmark_visible(
    w: &World,
    epoch: usize,
    s: &SensorSpec,
    world_from_sensor: &Isometry3<f64>,
    l: &Point3<f64>,
) -> bool {
    let o = Point3::from(world_from_sensor.translation.vector);
    let v = l - o;
    let r = v.norm();
    if r < 1e-6 || r > s.max_range {
        return false;
    }
    let local = world_from_sensor.rotation.inverse() * v;
    let az = local.y.atan2(local.x).to_degrees();
    let el = (local.z / r).asin().to_degrees();
    if az.abs() > 0.5 * s.hfov_deg || el.abs() > 0.5 * s.vfov_deg {
        return false;
    }
    let d = v / r;
    w.cast_ray(epoch, &o, &d, s.max_range + 0.1)
        .is_some_and(|hit| hit >= r - 0.01)
}

struct Observation {
    cloud: PointCloud,
    descriptors: DescriptorSet,
    landmarks: Vec<usize>,
}

fn observe(
    w: &World,
    epoch: usize,
    t: &TrajectorySpec,
    kf: &Keyframe,
    frame: FrameId,
    seed: u64,
    dirs: &[Vector3<f64>],
) -> Observation {
    let s = &t.sensor;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = Normal::new(0.0, s.depth_noise).expect("validated sigma");
    let feat = Normal::new(0.0, t.descriptor_noise).expect("validated sigma");
    let ws = kf.world_from_body * sensor_offset(s);
    let o = Point3::from(ws.translation.vector);
    let body_from_world = kf.world_from_body.inverse();
    let mut points = Vec::new();
    for d in dirs {
        let dw = ws.rotation * d;
        if let Some(r) = w.cast_ray(epoch, &o, &dw, s.max_range) {
            let r = r + depth.sample(&mut rng);
            points.push(body_from_world * (o + dw * r));
        }
    }
    let mut local = Vec::new();
    let mut seen = Vec::new();
    for l in &w.landmarks {
        if !landmark_visible(w, epoch, s, &ws, &l.position) {
            continue;
        }
        let v = l.position - o;
        let r = v.norm();
        let measured = o + v * ((r + depth.sample(&mut rng)) / r);
        let feature = l
            .signature
            .iter()
            .map(|c| c + feat.sample(&mut rng) as f32)
            .collect();
        local.push(LocalDescriptor {
            feature,
            landmark: body_from_world * measured,
        });
        seen.push(l.id);
    }
    Observation {
        cloud: PointCloud::new(points, frame),
        descriptors: DescriptorSet::new(w.spec.landmarks.dim, local),
        landmarks: seen,
    }
}

fn diag_cov(rot: f64, trans: f64) -> Matrix6<f64> {
    let (r, t) = (rot.max(1e-3).powi(2), trans.max(1e-3).powi(2));
    Matrix6::from_diagonal(&Vector6::new(r, r, r, t, t, t))
}

/// Simulates one session of `t` through `epoch` of the world.
pub fn generate_session(
    w: &World,
    epoch: usize,
    t: &TrajectorySpec,
    session_id: &str,
    seed: u64,
) -> Result<GeneratedSession, SynthError> {
    w.check_epoch(epoch)?;
    t.validate()?;
    let kfs = keyframes(w, t)?;
    let dirs = ray_directions(&t.sensor);
    let obs: Vec<Observation> = kfs
        .par_iter()
        .enumerate()
        .map(|(i, kf)| {
            let frame = FrameId::vertex(session_id, i as u64);
            observe(
                w,
                epoch,
                t,
                kf,
                frame,
                stream_seed(seed, 1 + i as u64),
                &dirs,
            )
        })
        .collect();

    let map_frame = FrameId::map(session_id);
    let sig_r = t.odometry_noise.rotation_deg.to_radians();
    let sig_t = t.odometry_noise.translation;
    let rot_noise = Normal::new(0.0, sig_r).expect("validated sigma");
    let trans_noise = Normal::new(0.0, sig_t).expect("validated sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 0));
    let mut graph = PoseGraph::new();
    let mut est = Isometry3::identity();
    for (i, kf) in kfs.iter().enumerate() {
        let id = i as VertexId;
        if i > 0 {
            let truth = kfs[i - 1].world_from_body.inverse() * kf.world_from_body;
            let xi = Vector6::from_fn(|k, _| {
                if k < 3 {
                    rot_noise.sample(&mut rng)
                } else {
                    trans_noise.sample(&mut rng)
                }
            });
            let meas = truth * exp_iso(&xi);
            est *= meas;
            graph.edges.push(Edge {
                from: id - 1,
                to: id,
                measurement: Pose::from_isometry(
                    &meas,
                    FrameId::vertex(session_id, id - 1),
                    FrameId::vertex(session_id, id),
                ),
                covariance: diag_cov(sig_r, sig_t),
                kind: EdgeKind::Odometry,
            });
        }
        graph.add_vertex(Vertex {
            id,
            pose: Pose::from_isometry(&est, map_frame.clone(), FrameId::vertex(session_id, id)),
            place_label: kf.label.clone(),
            resources: ResourceKeys::default(),
        });
    }

    let loops = intra_loops(&obs, &t.intra_loops, session_id);
    graph.edges.extend(loops);

    let mut resources = BTreeMap::new();
    let mut truth_kfs = Vec::with_capacity(kfs.len());
    for (i, (kf, o)) in kfs.iter().zip(obs).enumerate() {
        let id = i as VertexId;
        resources.insert((id, ResourceKind::Submap), Resource::Submap(o.cloud.into()));
        resources.insert(
            (id, ResourceKind::Descriptors),
            Resource::Descriptors(o.descriptors.into()),
        );
        truth_kfs.push(GtKeyframe {
            id,
            stamp: kf.stamp,
            world_from_body: kf.world_from_body,
            landmarks: o.landmarks,
        });
    }
    let session = SessionMap::in_memory(
        session_id,
        map_frame,
        Some(sensor_offset(&t.sensor)),
        graph,
        resources,
    );
    Ok(GeneratedSession {
        session,
        truth: GroundTruth {
            session_id: session_id.to_owned(),
            epoch,
            world_from_map: kfs[0].world_from_body,
            keyframes: truth_kfs,
        },
    })
}

/// Loop closures between co-visible, non-adjacent keyframes, measured by the
/// same RANSAC registration the merge stage uses.
fn intra_loops(obs: &[Observation], cfg: &IntraLoopSpec, session_id: &str) -> Vec<Edge> {
    if cfg.max_per_vertex == 0 {
        return Vec::new();
    }
    let sets: Vec<BTreeSet<usize>> = obs
        .iter()
        .map(|o| o.landmarks.iter().copied().collect())
        .collect();
    let per_vertex: Vec<Vec<Edge>> = (0..obs.len())
        .into_par_iter()
        .map(|i| {
            let mut cands: Vec<(usize, usize)> = (0..i)
                .filter(|&j| i - j >= cfg.min_separation.max(2))
                .map(|j| (sets[i].intersection(&sets[j]).count(), j))
                .filter(|(n, _)| *n >= cfg.min_shared)
                .collect();
            cands.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
            let q = VertexRef::new(session_id, i as u64);
            let mut out = Vec::new();
            for (_, j) in cands {
                if out.len() >= cfg.max_per_vertex {
                    break;
                }
                let m = VertexRef::new(session_id, j as u64);
                if let Ok(est) = estimate_relative_pose(
                    (&q, &obs[i].descriptors),
                    (&m, &obs[j].descriptors),
                    &cfg.ransac,
                ) {
                    out.push(Edge {
                        from: j as u64,
                        to: i as u64,
                        measurement: est.pose,
                        covariance: est.covariance,
                        kind: EdgeKind::IntraLoop,
                    });
                }
            }
            out
        })
        .collect();
    per_vertex.into_iter().flatten().collect()
}

/// Generates every session of a scenario; session `k` uses seed `seed + k`.
pub fn generate_scenario(
    w: &World,
    scenario: &ScenarioSpec,
    seed: u64,
) -> Result<Vec<GeneratedSession>, SynthError> {
    scenario
        .sessions
        .iter()
        .enumerate()
        .map(|(k, p)| {
            generate_session(
                w,
                p.epoch,
                &p.trajectory,
                &p.id,
                seed.wrapping_add(k as u64),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn room_world() -> WorldSpec {
        WorldSpec {
            name: "room".into(),
            spaces: vec![
                SpaceSpec {
                    label: "room".into(),
                    min: [0.0, 0.0, 0.0],
                    max: [4.0, 3.0, 2.5],
                },
                SpaceSpec {
                    label: "annex".into(),
                    min: [4.0, 1.0, 0.0],
                    max: [6.0, 2.0, 2.5],
                },
            ],
            static_props: vec![],
            movable_props: vec![MovablePropSpec {
                name: "crate".into(),
                size: [0.5, 0.5, 0.5],
                placements: vec![Some([3.0, 1.0, 0.0]), Some([3.0, 2.0, 0.0])],
            }],
            epochs: 2,
            landmarks: LandmarkSpec::default(),
            surface_offset: 0.001,
        }
    }

    #[test]
    fn ray_hits_walls_props_and_passes_openings() {
        let w = World::new(room_world()).unwrap();
        let o = Point3::new(1.0, 1.5, 1.0);
        // Straight +x at y = 1.5 passes the opening into the annex (y in [1, 2]).
        let t = w.cast_ray(0, &o, &Vector3::x(), 20.0).unwrap();
        assert!((t - 5.001).abs() < 1e-9, "{t}");
        // +y hits the room wall at y = 3.001.
        let t = w.cast_ray(0, &o, &Vector3::y(), 20.0).unwrap();
        assert!((t - 1.501).abs() < 1e-9);
        // Low ray at z = 0.25 meets the crate face at x = 3.001 in epoch 0.
        let low = Point3::new(1.0, 1.25, 0.25);
        let t = w.cast_ray(0, &low, &Vector3::x(), 20.0).unwrap();
        assert!((t - 2.001).abs() < 1e-9);
        // In epoch 1 the crate moved away; the ray runs on through the annex.
        let t = w.cast_ray(1, &low, &Vector3::x(), 20.0).unwrap();
        assert!((t - 5.001).abs() < 1e-9);
        assert!(w.cast_ray(0, &o, &Vector3::x(), 2.0).is_none());
        assert!(w
            .cast_ray(0, &Point3::new(9.0, 9.0, 1.0), &Vector3::x(), 20.0)
            .is_none());
    }

    #[test]
    fn landmarks_sit_on_walls_only() {
        let w = World::new(room_world()).unwrap();
        assert!(!w.landmarks.is_empty());
        for l in &w.landmarks {
            let p = l.position;
            assert!(w.in_free_space(&p));
            let wall = [
                p.x + 0.001,
                4.001 - p.x,
                6.001 - p.x,
                p.y + 0.001,
                3.001 - p.y,
                2.001 - p.y,
                p.y - 0.999,
            ];
            assert!(wall.iter().any(|d| d.abs() < 1e-9), "{p:?}");
            assert!((l.signature.iter().map(|v| v * v).sum::<f32>() - 1.0).abs() < 1e-5);
        }
        // The opening between room and annex carries no landmark.
        assert!(
            !w.landmarks.iter().any(|l| (l.position.x - 4.0).abs() < 0.01
                && l.position.y > 1.0
                && l.position.y < 2.0)
        );
    }

    fn traj() -> TrajectorySpec {
        let mut t = TrajectorySpec::new(vec![[0.5, 1.5], [3.5, 1.5]]);
        t.sensor.angular_resolution_deg = 2.0;
        t
    }

    #[test]
    fn zero_noise_session_matches_truth() {
        let w = World::new(room_world()).unwrap();
        let g = generate_session(&w, 0, &traj(), "s", 3).unwrap();
        assert_eq!(g.session.graph.len(), 7);
        g.session.graph.validate().unwrap();
        for k in &g.truth.keyframes {
            let expect = g.truth.world_from_map.inverse() * k.world_from_body;
            let got = g.session.graph.vertices[&k.id].pose.isometry();
            assert!((expect.translation.vector - got.translation.vector).norm() < 1e-12);
            assert!(expect.rotation.angle_to(&got.rotation) < 1e-12);
        }
        assert!((g.truth.keyframes[2].stamp - 2.0).abs() < 1e-12);
        assert!(g
            .session
            .graph
            .edges
            .iter()
            .any(|e| e.kind == EdgeKind::IntraLoop));
        // Noiseless submap points lie on a surface of the room.
        let world_from_body = g.truth.keyframes[0].world_from_body;
        let cloud = g.session.submap(0).unwrap();
        assert!(!cloud.is_empty());
        for p in &cloud.points {
            let q = world_from_body * p;
            let d = [
                q.x + 0.001,
                4.001 - q.x,
                q.y + 0.001,
                3.001 - q.y,
                q.z + 0.001,
                2.501 - q.z,
            ];
            let on_crate =
                (2.999..=3.501).contains(&q.x) && (0.999..=1.501).contains(&q.y) && q.z <= 0.5;
            assert!(
                d.iter().any(|v| v.abs() < 1e-9) || on_crate || q.x > 4.0,
                "{q:?}"
            );
        }
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let w = World::new(room_world()).unwrap();
        let mut t = traj();
        t.odometry_noise = OdometryNoise {
            translation: 0.01,
            rotation_deg: 0.5,
        };
        t.sensor.depth_noise = 0.01;
        t.descriptor_noise = 0.02;
        let a = generate_session(&w, 0, &t, "s", 11).unwrap();
        let b = generate_session(&w, 0, &t, "s", 11).unwrap();
        let c = generate_session(&w, 0, &t, "s", 12).unwrap();
        assert_eq!(a.session.graph, b.session.graph);
        assert_ne!(a.session.graph, c.session.graph);
        for id in a.session.graph.vertices.keys() {
            assert_eq!(
                a.session.submap(*id).unwrap(),
                b.session.submap(*id).unwrap()
            );
            assert_eq!(
                a.session.descriptors(*id).unwrap(),
                b.session.descriptors(*id).unwrap()
            );
        }
    }

    #[test]
    fn visible_box_shows_up_in_a_submap() {
        let w = World::new(room_world()).unwrap();
        let g = generate_session(&w, 0, &traj(), "s", 0).unwrap();
        // The crate at x in [3, 3.5], y in [1, 1.5] is straight ahead of the path.
        let hits = g.truth.keyframes.iter().any(|k| {
            g.session.submap(k.id).unwrap().points.iter().any(|p| {
                let q = k.world_from_body * p;
                q.x > 2.99 && q.x < 3.51 && q.y > 0.99 && q.y < 1.51 && q.z < 0.51
            })
        });
        assert!(hits);
    }

    #[test]
    fn change_truth_examples() {
        let w = World::new(room_world()).unwrap();
        let (changed, stat) = change_ground_truth(&w, 0, 0, 0.05).unwrap();
        assert!(changed.is_empty());
        assert!(!stat.is_empty());
        let (changed, stat) = change_ground_truth(&w, 0, 1, 0.05).unwrap();
        let near_old = changed.points.iter().any(|p| p.y < 1.51);
        let near_new = changed.points.iter().any(|p| p.y > 1.99);
        assert!(near_old && near_new);
        for p in &changed.points {
            assert!(p.x > 2.99 && p.x < 3.51 && p.z < 0.51 && p.z > 0.0, "{p:?}");
        }
        // Walls stay static.
        assert!(stat.points.iter().any(|p| (p.x + 0.001).abs() < 1e-9));
        assert!(!changed.points.iter().any(|p| (p.x + 0.001).abs() < 1e-9));
    }

    #[test]
    fn surface_cloud_hides_covered_faces() {
        let w = World::new(room_world()).unwrap();
        let c = w.surface_cloud(0, 0.05).unwrap();
        // No floor samples under the crate and no crate bottom face.
        assert!(!c.points.iter().any(|p| p.z < 0.0
            && p.x > 3.01
            && p.x < 3.49
            && p.y > 1.01
            && p.y < 1.49));
        // The wall behind the annex opening is not a surface.
        assert!(!c
            .points
            .iter()
            .any(|p| (p.x - 4.001).abs() < 1e-9 && p.y > 1.01 && p.y < 1.99));
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let w = World::new(room_world()).unwrap();
        let out = generate_session(
            &w,
            0,
            &TrajectorySpec::new(vec![[0.5, 1.5], [9.0, 1.5]]),
            "s",
            0,
        );
        assert!(matches!(out, Err(SynthError::OutsideWorld { .. })));
        assert!(matches!(
            generate_session(&w, 5, &traj(), "s", 0),
            Err(SynthError::Epoch { .. })
        ));
        let mut t = traj();
        t.sensor.hfov_deg = 0.0;
        assert!(matches!(
            generate_session(&w, 0, &t, "s", 0),
            Err(SynthError::Trajectory(_))
        ));
        let mut spec = room_world();
        spec.movable_props[0].placements.pop();
        assert!(matches!(
            World::new(spec),
            Err(SynthError::Placements { .. })
        ));
        let mut spec = room_world();
        spec.movable_props[0].placements[0] = Some([5.8, 1.0, 0.0]);
        assert!(matches!(World::new(spec), Err(SynthError::PropOutside(_))));
    }

    #[test]
    fn ray_fan_covers_field_of_view() {
        let s = SensorSpec {
            hfov_deg: 90.0,
            vfov_deg: 60.0,
            angular_resolution_deg: 10.0,
            ..SensorSpec::default()
        };
        let d = ray_directions(&s);
        assert_eq!(d.len(), 10 * 7);
        assert!(d.iter().all(|v| (v.norm() - 1.0).abs() < 1e-12));
        let full = SensorSpec {
            hfov_deg: 360.0,
            ..s
        };
        assert_eq!(ray_directions(&full).len(), 36 * 7);
        // Positive pitch tilts the optical axis down.
        let axis = sensor_offset(&SensorSpec::default()).rotation * Vector3::x();
        assert!(axis.z < 0.0);
    }
}
