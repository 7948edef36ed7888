//! On-disk session format with lazily loaded per-vertex resources.
//!
//! A session directory holds:
//!
//! ```text
//! graph.json            vertices (id, pose [qw,qx,qy,qz,tx,ty,tz], place_label, resource keys)
//!                       and edges (from, to, pose, 36 row-major covariance entries, kind)
//! meta.json             session_id, map_frame, sensor_offset
//! submaps/<id>.ply      binary little-endian xyz float32, vertex frame
//! descriptors/<id>.bin  packed descriptor set, see [`crate::descriptor`]
//! ```
//!
//! Loading parses only the graph; submaps and descriptors are decoded on
//! [`SessionMap::fetch_resource`] and kept in a shared LRU cache.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use nalgebra::{Isometry3, Matrix6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptor::{DescriptorError, DescriptorSet};
use crate::geometry::{FrameId, PointCloud, Pose};
use crate::graph::{Edge, EdgeKind, GraphError, PoseGraph, ResourceKeys, Vertex, VertexId};
use crate::ply;

pub const DEFAULT_CACHE_ENTRIES: usize = 32;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed json: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("missing graph file {0}")]
    MissingGraph(PathBuf),
    #[error("duplicate vertex id {0}")]
    DuplicateVertex(VertexId),
    #[error("vertex {vertex}: resource key `{key}` does not resolve to a readable file")]
    DanglingResource { vertex: VertexId, key: String },
    #[error("invalid graph: {0}")]
    Graph(#[from] GraphError),
    #[error("malformed graph: {0}")]
    Malformed(String),
    #[error("unknown vertex {0}")]
    UnknownVertex(VertexId),
    #[error("vertex {vertex} has no {kind:?} resource")]
    MissingResource {
        vertex: VertexId,
        kind: ResourceKind,
    },
    #[error("{path}: {source}")]
    Descriptor {
        path: PathBuf,
        #[source]
        source: DescriptorError,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SessionError + '_ {
    move |source| SessionError::Io {
        path: path.to_owned(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ResourceKind {
    Submap,
    Descriptors,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Resource {
    Submap(Arc<PointCloud>),
    Descriptors(Arc<DescriptorSet>),
}

impl Resource {
    fn approx_bytes(&self) -> usize {
        match self {
            Resource::Submap(c) => c.points.len() * 24,
            Resource::Descriptors(d) => d.local.len() * (d.dim * 4 + 24),
        }
    }
}

type CacheKey = (String, VertexId, ResourceKind);

#[derive(Default)]
struct CacheState {
    entries: HashMap<CacheKey, (Resource, u64)>,
    tick: u64,
    hits: u64,
    misses: u64,
}

/// Least-recently-used resource cache, bounded by entry count.
///
/// One cache can be shared by several sessions; keys carry the session id.
pub struct ResourceCache {
    budget: usize,
    state: Mutex<CacheState>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CacheStats {
    pub entries: usize,
    pub hits: u64,
    pub misses: u64,
    pub resident_bytes: usize,
}

impl ResourceCache {
    pub fn new(budget: usize) -> Arc<Self> {
        Arc::new(Self {
            budget,
            state: Mutex::new(CacheState::default()),
        })
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    fn get(&self, key: &CacheKey) -> Option<Resource> {
        let mut st = self.state.lock().expect("cache lock");
        st.tick += 1;
        let tick = st.tick;
        match st.entries.get_mut(key) {
            Some((r, t)) => {
                *t = tick;
                let r = r.clone();
                st.hits += 1;
                Some(r)
            }
            None => {
                st.misses += 1;
                None
            }
        }
    }

    fn put(&self, key: CacheKey, r: Resource) {
        if self.budget == 0 {
            return;
        }
        let mut st = self.state.lock().expect("cache lock");
        st.tick += 1;
        let tick = st.tick;
        st.entries.insert(key, (r, tick));
        while st.entries.len() > self.budget {
            let oldest = st
                .entries
                .iter()
                .min_by_key(|(_, (_, t))| *t)
                .map(|(k, _)| k.clone())
                .expect("nonempty");
            st.entries.remove(&oldest);
        }
    }

    pub fn stats(&self) -> CacheStats {
        let st = self.state.lock().expect("cache lock");
        CacheStats {
            entries: st.entries.len(),
            hits: st.hits,
            misses: st.misses,
            resident_bytes: st.entries.values().map(|(r, _)| r.approx_bytes()).sum(),
        }
    }

    pub fn clear(&self) {
        self.state.lock().expect("cache lock").entries.clear();
    }
}

#[derive(Clone)]
enum Backing {
    Directory(PathBuf),
    Memory(Arc<BTreeMap<(VertexId, ResourceKind), Resource>>),
}

/// One SLAM session: pose graph plus indexed, lazily loaded resources.
#[derive(Clone)]
pub struct SessionMap {
    pub session_id: String,
    pub map_frame: FrameId,
    /// Sensor origin relative to the vertex body frame, `T_{b,s}`.
    pub sensor_offset: Option<Isometry3<f64>>,
    pub graph: PoseGraph,
    backing: Backing,
    cache: Arc<ResourceCache>,
}

impl std::fmt::Debug for SessionMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SessionMap")
            .field("session_id", &self.session_id)
            .field("map_frame", &self.map_frame)
            .field("vertices", &self.graph.vertices.len())
            .field("edges", &self.graph.edges.len())
            .finish()
    }
}

/// Canonical resource key for a vertex.
pub fn resource_key(kind: ResourceKind, id: VertexId) -> String {
    match kind {
        ResourceKind::Submap => format!("submaps/{id}.ply"),
        ResourceKind::Descriptors => format!("descriptors/{id}.bin"),
    }
}

impl SessionMap {
    /// Session whose resources live in memory, e.g. freshly generated data.
    pub fn in_memory(
        session_id: impl Into<String>,
        map_frame: FrameId,
        sensor_offset: Option<Isometry3<f64>>,
        mut graph: PoseGraph,
        resources: BTreeMap<(VertexId, ResourceKind), Resource>,
    ) -> Self {
        for (id, kind) in resources.keys() {
            if let Some(v) = graph.vertices.get_mut(id) {
                let key = Some(resource_key(*kind, *id));
                match kind {
                    ResourceKind::Submap => v.resources.submap = key,
                    ResourceKind::Descriptors => v.resources.descriptors = key,
                }
            }
        }
        Self {
            session_id: session_id.into(),
            map_frame,
            sensor_offset,
            graph,
            backing: Backing::Memory(Arc::new(resources)),
            cache: ResourceCache::new(DEFAULT_CACHE_ENTRIES),
        }
    }

    /// Replaces the resource cache, e.g. to share one budget across sessions.
    pub fn with_cache(mut self, cache: Arc<ResourceCache>) -> Self {
        self.cache = cache;
        self
    }

    pub fn cache(&self) -> &Arc<ResourceCache> {
        &self.cache
    }

    pub fn root(&self) -> Option<&Path> {
        match &self.backing {
            Backing::Directory(p) => Some(p),
            Backing::Memory(_) => None,
        }
    }

    pub fn vertex_frame(&self, id: VertexId) -> FrameId {
        FrameId::vertex(&self.session_id, id)
    }

    pub fn has_resource(&self, vertex: VertexId, kind: ResourceKind) -> bool {
        self.resource_key_of(vertex, kind).is_some()
    }

    fn resource_key_of(&self, vertex: VertexId, kind: ResourceKind) -> Option<&str> {
        let v = self.graph.vertices.get(&vertex)?;
        match kind {
            ResourceKind::Submap => v.resources.submap.as_deref(),
            ResourceKind::Descriptors => v.resources.descriptors.as_deref(),
        }
    }

    /// Decodes (or returns the cached) resource of `vertex`.
    pub fn fetch_resource(
        &self,
        vertex: VertexId,
        kind: ResourceKind,
    ) -> Result<Resource, SessionError> {
        if !self.graph.vertices.contains_key(&vertex) {
            return Err(SessionError::UnknownVertex(vertex));
        }
        let key = self
            .resource_key_of(vertex, kind)
            .ok_or(SessionError::MissingResource { vertex, kind })?
            .to_owned();
        let cache_key = (self.session_id.clone(), vertex, kind);
        if let Some(r) = self.cache.get(&cache_key) {
            return Ok(r);
        }
        let r = match &self.backing {
            Backing::Memory(m) => m
                .get(&(vertex, kind))
                .cloned()
                .ok_or(SessionError::MissingResource { vertex, kind })?,
            Backing::Directory(root) => {
                let path = root.join(&key);
                match kind {
                    ResourceKind::Submap => {
                        let pts = ply::read_ply(&path).map_err(io_err(&path))?;
                        Resource::Submap(Arc::new(PointCloud::new(pts, self.vertex_frame(vertex))))
                    }
                    ResourceKind::Descriptors => {
                        let bytes = fs::read(&path).map_err(io_err(&path))?;
                        let d = DescriptorSet::decode(&bytes)
                            .map_err(|source| SessionError::Descriptor { path, source })?;
                        Resource::Descriptors(Arc::new(d))
                    }
                }
            }
        };
        self.cache.put(cache_key, r.clone());
        Ok(r)
    }

    pub fn submap(&self, vertex: VertexId) -> Result<Arc<PointCloud>, SessionError> {
        match self.fetch_resource(vertex, ResourceKind::Submap)? {
            Resource::Submap(c) => Ok(c),
            Resource::Descriptors(_) => unreachable!("kind mismatch"),
        }
    }

    pub fn descriptors(&self, vertex: VertexId) -> Result<Arc<DescriptorSet>, SessionError> {
        match self.fetch_resource(vertex, ResourceKind::Descriptors)? {
            Resource::Descriptors(d) => Ok(d),
            Resource::Submap(_) => unreachable!("kind mismatch"),
        }
    }

    /// Moves every vertex into `frame` using the given absolute poses.
    pub fn set_vertex_poses(&mut self, frame: FrameId, poses: &BTreeMap<VertexId, Isometry3<f64>>) {
        for (id, v) in self.graph.vertices.iter_mut() {
            if let Some(iso) = poses.get(id) {
                v.pose = Pose::from_isometry(iso, frame.clone(), v.pose.child.clone());
            } else {
                v.pose.parent = frame.clone();
            }
        }
        self.map_frame = frame;
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VertexRecord {
    id: VertexId,
    pose: [f64; 7],
    place_label: String,
    #[serde(flatten)]
    resources: ResourceKeys,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeRecord {
    from: VertexId,
    to: VertexId,
    pose: [f64; 7],
    covariance: Vec<f64>,
    kind: EdgeKind,
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    vertices: Vec<VertexRecord>,
    edges: Vec<EdgeRecord>,
}

#[derive(Serialize, Deserialize)]
struct MetaFile {
    session_id: String,
    map_frame: String,
    #[serde(default)]
    sensor_offset: Option<[f64; 7]>,
}

/// Builds a pose from the on-disk array, keeping already-unit quaternions bit-exact.
fn pose_from_disk(a: [f64; 7], parent: FrameId, child: FrameId) -> Result<Pose, SessionError> {
    if !a.iter().all(|v| v.is_finite()) {
        return Err(SessionError::Malformed("non-finite pose entry".into()));
    }
    let n2 = a[0] * a[0] + a[1] * a[1] + a[2] * a[2] + a[3] * a[3];
    if n2 < 1e-12 {
        return Err(SessionError::Malformed("zero quaternion".into()));
    }
    if (n2 - 1.0).abs() < 1e-12 {
        let q = nalgebra::Quaternion::new(a[0], a[1], a[2], a[3]);
        Ok(Pose {
            rotation: nalgebra::UnitQuaternion::new_unchecked(q),
            translation: nalgebra::Vector3::new(a[4], a[5], a[6]),
            parent,
            child,
        })
    } else {
        Ok(Pose::from_array(a, parent, child))
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, SessionError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| SessionError::Json {
        path: path.to_owned(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), SessionError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| SessionError::Json {
        path: path.to_owned(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Parses `graph.json` and `meta.json`; resources are only indexed.
pub fn load_session(dir: &Path) -> Result<SessionMap, SessionError> {
    let graph_path = dir.join("graph.json");
    if !graph_path.is_file() {
        return Err(SessionError::MissingGraph(graph_path));
    }
    let meta: MetaFile = read_json(&dir.join("meta.json"))?;
    let file: GraphFile = read_json(&graph_path)?;
    let map_frame = FrameId::new(meta.map_frame);
    let sid = meta.session_id;
    let mut graph = PoseGraph::new();
    for rec in file.vertices {
        if graph.vertices.contains_key(&rec.id) {
            return Err(SessionError::DuplicateVertex(rec.id));
        }
        for key in [&rec.resources.submap, &rec.resources.descriptors]
            .into_iter()
            .flatten()
        {
            if !dir.join(key).is_file() {
                return Err(SessionError::DanglingResource {
                    vertex: rec.id,
                    key: key.clone(),
                });
            }
        }
        let pose = pose_from_disk(rec.pose, map_frame.clone(), FrameId::vertex(&sid, rec.id))?;
        graph.add_vertex(Vertex {
            id: rec.id,
            pose,
            place_label: rec.place_label,
            resources: rec.resources,
        });
    }
    for rec in file.edges {
        if rec.covariance.len() != 36 {
            return Err(SessionError::Malformed(format!(
                "edge {}->{} covariance has {} entries, expected 36",
                rec.from,
                rec.to,
                rec.covariance.len()
            )));
        }
        graph.edges.push(Edge {
            from: rec.from,
            to: rec.to,
            measurement: pose_from_disk(
                rec.pose,
                FrameId::vertex(&sid, rec.from),
                FrameId::vertex(&sid, rec.to),
            )?,
            covariance: Matrix6::from_row_slice(&rec.covariance),
            kind: rec.kind,
        });
    }
    graph.validate()?;
    let sensor_offset = meta
        .sensor_offset
        .map(|a| pose_from_disk(a, FrameId::default(), FrameId::default()).map(|p| p.isometry()))
        .transpose()?;
    Ok(SessionMap {
        session_id: sid,
        map_frame,
        sensor_offset,
        graph,
        backing: Backing::Directory(dir.to_owned()),
        cache: ResourceCache::new(DEFAULT_CACHE_ENTRIES),
    })
}

/// Writes the session in canonical form; resources are copied under canonical keys.
pub fn save_session(s: &SessionMap, dir: &Path) -> Result<(), SessionError> {
    fs::create_dir_all(dir.join("submaps")).map_err(io_err(dir))?;
    fs::create_dir_all(dir.join("descriptors")).map_err(io_err(dir))?;

    // Resolve everything before writing so saving over the source directory is safe.
    let mut payloads: Vec<(PathBuf, Vec<u8>)> = Vec::new();
    let mut vertices = Vec::with_capacity(s.graph.vertices.len());
    for (id, v) in &s.graph.vertices {
        let mut keys = ResourceKeys {
            keyframe_ref: v.resources.keyframe_ref.clone(),
            ..Default::default()
        };
        if v.resources.submap.is_some() {
            let key = resource_key(ResourceKind::Submap, *id);
            let cloud = s.submap(*id)?;
            let mut buf = Vec::new();
            ply::write_ply_to(&mut buf, &cloud.points).map_err(io_err(&dir.join(&key)))?;
            payloads.push((dir.join(&key), buf));
            keys.submap = Some(key);
        }
        if v.resources.descriptors.is_some() {
            let key = resource_key(ResourceKind::Descriptors, *id);
            let path = dir.join(&key);
            let bytes =
                s.descriptors(*id)?
                    .encode()
                    .map_err(|source| SessionError::Descriptor {
                        path: path.clone(),
                        source,
                    })?;
            payloads.push((path, bytes));
            keys.descriptors = Some(key);
        }
        vertices.push(VertexRecord {
            id: *id,
            pose: v.pose.to_array(),
            place_label: v.place_label.clone(),
            resources: keys,
        });
    }
    for (path, bytes) in payloads {
        fs::write(&path, bytes).map_err(io_err(&path))?;
    }
    let edges = s
        .graph
        .edges
        .iter()
        .map(|e| EdgeRecord {
            from: e.from,
            to: e.to,
            pose: e.measurement.to_array(),
            covariance: e.covariance.transpose().iter().copied().collect(),
            kind: e.kind,
        })
        .collect();
    write_json(&dir.join("graph.json"), &GraphFile { vertices, edges })?;
    let meta = MetaFile {
        session_id: s.session_id.clone(),
        map_frame: s.map_frame.as_str().to_owned(),
        sensor_offset: s.sensor_offset.map(|iso| {
            Pose::from_isometry(&iso, FrameId::default(), FrameId::default()).to_array()
        }),
    };
    write_json(&dir.join("meta.json"), &meta)
}
