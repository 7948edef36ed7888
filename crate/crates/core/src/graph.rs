//! Pose-graph data model shared by the session store, the optimizer and the
//! navigation-map stages.

use std::collections::BTreeMap;

use nalgebra::Matrix6;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose;
use crate::util::UnionFind;

pub type VertexId = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Odometry,
    IntraLoop,
    InterLoop,
}

/// Keys of the per-vertex resources, relative to the session directory.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceKeys {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub submap: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub descriptors: Option<String>,
    /// Opaque reference to the keyframe imagery; never dereferenced.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keyframe_ref: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vertex {
    pub id: VertexId,
    /// `T_{m,b}`: vertex body frame expressed in the session map frame.
    pub pose: Pose,
    pub place_label: String,
    pub resources: ResourceKeys,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Edge {
    pub from: VertexId,
    pub to: VertexId,
    /// Measured `T_{from,to}`.
    pub measurement: Pose,
    /// 6×6, rotation block first.
    pub covariance: Matrix6<f64>,
    pub kind: EdgeKind,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PoseGraph {
    pub vertices: BTreeMap<VertexId, Vertex>,
    pub edges: Vec<Edge>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("edge {index} references missing vertex {vertex}")]
    DanglingEdge { index: usize, vertex: VertexId },
    #[error("covariance of edge {index} is not symmetric positive definite")]
    NotSpd { index: usize },
    #[error("odometry edges do not connect vertex {vertex} to vertex {root}")]
    Disconnected { root: VertexId, vertex: VertexId },
}

/// True when `m` is symmetric (relative tolerance 1e-9) and Cholesky succeeds.
pub fn is_spd(m: &Matrix6<f64>) -> bool {
    let scale = m.amax().max(f64::MIN_POSITIVE);
    if (m - m.transpose()).amax() > 1e-9 * scale {
        return false;
    }
    m.iter().all(|v| v.is_finite()) && m.cholesky().is_some()
}

impl PoseGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_vertex(&mut self, v: Vertex) {
        self.vertices.insert(v.id, v);
    }

    pub fn vertex(&self, id: VertexId) -> Option<&Vertex> {
        self.vertices.get(&id)
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Checks edge endpoints, covariance definiteness and odometry connectivity.
    pub fn validate(&self) -> Result<(), GraphError> {
        for (index, e) in self.edges.iter().enumerate() {
            for vertex in [e.from, e.to] {
                if !self.vertices.contains_key(&vertex) {
                    return Err(GraphError::DanglingEdge { index, vertex });
                }
            }
            if !is_spd(&e.covariance) {
                return Err(GraphError::NotSpd { index });
            }
        }
        let ids: Vec<VertexId> = self.vertices.keys().copied().collect();
        let Some(&root) = ids.first() else {
            return Ok(());
        };
        let slot: BTreeMap<VertexId, usize> =
            ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        let mut uf = UnionFind::new(ids.len());
        for e in self.edges.iter().filter(|e| e.kind == EdgeKind::Odometry) {
            uf.union(slot[&e.from], slot[&e.to]);
        }
        for (i, id) in ids.iter().enumerate() {
            if uf.find(i) != uf.find(0) {
                return Err(GraphError::Disconnected { root, vertex: *id });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::FrameId;

    fn vertex(id: VertexId) -> Vertex {
        Vertex {
            id,
            pose: Pose::identity(FrameId::map("s"), FrameId::vertex("s", id)),
            place_label: "room".into(),
            resources: ResourceKeys::default(),
        }
    }

    fn edge(from: VertexId, to: VertexId, kind: EdgeKind) -> Edge {
        Edge {
            from,
            to,
            measurement: Pose::identity(FrameId::vertex("s", from), FrameId::vertex("s", to)),
            covariance: Matrix6::identity() * 1e-4,
            kind,
        }
    }

    #[test]
    fn validates_connected_chain() {
        let mut g = PoseGraph::new();
        (0..3).for_each(|i| g.add_vertex(vertex(i)));
        g.edges.push(edge(0, 1, EdgeKind::Odometry));
        g.edges.push(edge(1, 2, EdgeKind::Odometry));
        g.edges.push(edge(2, 0, EdgeKind::IntraLoop));
        assert_eq!(g.validate(), Ok(()));
    }

    #[test]
    fn loop_edges_do_not_count_for_connectivity() {
        let mut g = PoseGraph::new();
        (0..3).for_each(|i| g.add_vertex(vertex(i)));
        g.edges.push(edge(0, 1, EdgeKind::Odometry));
        g.edges.push(edge(1, 2, EdgeKind::IntraLoop));
        assert_eq!(
            g.validate(),
            Err(GraphError::Disconnected { root: 0, vertex: 2 })
        );
    }

    #[test]
    fn rejects_dangling_and_indefinite() {
        let mut g = PoseGraph::new();
        g.add_vertex(vertex(0));
        g.edges.push(edge(0, 7, EdgeKind::Odometry));
        assert!(matches!(
            g.validate(),
            Err(GraphError::DanglingEdge { vertex: 7, .. })
        ));

        g.add_vertex(vertex(7));
        g.edges[0].covariance[(2, 2)] = -1.0;
        assert_eq!(g.validate(), Err(GraphError::NotSpd { index: 0 }));
        g.edges[0].covariance = Matrix6::identity();
        g.edges[0].covariance[(0, 1)] = 0.5;
        assert_eq!(g.validate(), Err(GraphError::NotSpd { index: 0 }));
    }
}
