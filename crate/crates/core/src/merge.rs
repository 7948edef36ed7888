//! Multi-session merging: inter-session loop closures, the merged factor graph
//! anchored at the first vertex of the first session, and write-back of the
//! optimized poses into that session's map frame.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Isometry3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptor::SparseVector;
use crate::graph::{EdgeKind, VertexId};
use crate::optimizer::{optimize, FactorGraph, OptimizationReport, OptimizeError, OptimizerConfig};
use crate::place::{
    build_vocabulary, estimate_relative_pose, global_descriptor, select_best_match, PlaceDatabase,
    PlaceError, QueryMode, RansacConfig, RelativePoseEstimate, ScoredEstimate, VertexRef,
};
use crate::session::{SessionError, SessionMap};

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("no sessions to merge")]
    NoSessions,
    #[error("duplicate session id {0:?}")]
    DuplicateSession(String),
    #[error("session {0:?} has no inter-session edge to the merged component")]
    Disconnected(String),
    #[error("session {0:?} has no vertices")]
    EmptySession(String),
    #[error("inter edge references unknown vertex {0:?}")]
    UnknownVertex(VertexRef),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Place(#[from] PlaceError),
    #[error(transparent)]
    Optimize(#[from] OptimizeError),
}

/// Verified loop closure between vertices of different sessions.
#[derive(Clone, Debug, PartialEq)]
pub struct InterEdge {
    /// `b_p`
    pub matched: VertexRef,
    /// `b_q`
    pub query: VertexRef,
    pub similarity: f64,
    pub estimate: RelativePoseEstimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlaceConfig {
    pub word_count: usize,
    pub vocabulary_seed: u64,
    /// Candidates retrieved per query vertex.
    pub top_k: usize,
    pub min_similarity: f64,
    pub ransac: RansacConfig,
}

impl Default for PlaceConfig {
    fn default() -> Self {
        Self {
            word_count: 64,
            vocabulary_seed: 0,
            top_k: 5,
            min_similarity: 0.3,
            ransac: RansacConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeConfig {
    pub place: PlaceConfig,
    pub optimizer: OptimizerConfig,
    pub robust_inter: bool,
    pub robust_intra: bool,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            place: PlaceConfig::default(),
            optimizer: OptimizerConfig::default(),
            robust_inter: true,
            robust_intra: false,
        }
    }
}

fn check_ids(sessions: &[SessionMap]) -> Result<(), MergeError> {
    let mut seen = BTreeSet::new();
    for s in sessions {
        if !seen.insert(s.session_id.as_str()) {
            return Err(MergeError::DuplicateSession(s.session_id.clone()));
        }
    }
    Ok(())
}

/// Queries every vertex of session `k` against sessions `0..k` and keeps the
/// verified candidate with the most inliers per query vertex.
pub fn find_inter_session_edges(
    sessions: &[SessionMap],
    cfg: &PlaceConfig,
) -> Result<Vec<InterEdge>, MergeError> {
    check_ids(sessions)?;
    let mut refs = Vec::new();
    let mut sets = Vec::new();
    for s in sessions {
        for &id in s.graph.vertices.keys() {
            if s.has_resource(id, crate::session::ResourceKind::Descriptors) {
                refs.push((s, VertexRef::new(&s.session_id, id)));
                sets.push(s.descriptors(id)?);
            }
        }
    }
    let total: usize = sets.iter().map(|d| d.len()).sum();
    if total == 0 || sessions.len() < 2 {
        return Ok(Vec::new());
    }
    let borrowed: Vec<_> = sets.iter().map(|d| d.as_ref()).collect();
    let vocab = build_vocabulary(&borrowed, cfg.word_count.min(total), cfg.vocabulary_seed)?;
    let globals: Vec<SparseVector> = sets.iter().map(|d| global_descriptor(d, &vocab)).collect();
    drop(borrowed);
    drop(sets);

    let session_index: BTreeMap<&str, usize> = sessions
        .iter()
        .enumerate()
        .map(|(i, s)| (s.session_id.as_str(), i))
        .collect();
    let mut db = PlaceDatabase::new();
    let mut edges = Vec::new();
    let mut cursor = 0;
    for (k, session) in sessions.iter().enumerate() {
        let start = cursor;
        while cursor < refs.len() && std::ptr::eq(refs[cursor].0, session) {
            cursor += 1;
        }
        if k > 0 {
            let found: Vec<Result<Option<InterEdge>, MergeError>> = (start..cursor)
                .into_par_iter()
                .map(|i| {
                    let query = &refs[i].1;
                    let cands = db.query_candidates(
                        query,
                        &globals[i],
                        cfg.top_k,
                        cfg.min_similarity,
                        QueryMode::Inter,
                    );
                    let qd = session.descriptors(query.id)?;
                    let mut scored = Vec::new();
                    for c in cands {
                        let other = &sessions[session_index[c.matched.session.as_str()]];
                        let md = other.descriptors(c.matched.id)?;
                        if let Ok(estimate) =
                            estimate_relative_pose((query, &qd), (&c.matched, &md), &cfg.ransac)
                        {
                            scored.push(ScoredEstimate {
                                candidate: c,
                                estimate,
                            });
                        }
                    }
                    Ok(select_best_match(&scored).map(|b| InterEdge {
                        matched: b.candidate.matched.clone(),
                        query: b.candidate.query.clone(),
                        similarity: b.candidate.similarity,
                        estimate: b.estimate.clone(),
                    }))
                })
                .collect();
            for r in found {
                edges.extend(r?);
            }
        }
        for i in start..cursor {
            db.insert(refs[i].1.clone(), globals[i].clone());
        }
    }
    Ok(edges)
}

/// `T_{world,b}` for a vertex of an already aligned session.
fn world_pose(
    sessions: &[SessionMap],
    index: &BTreeMap<&str, usize>,
    align: &[Option<Isometry3<f64>>],
    v: &VertexRef,
) -> Result<Option<Isometry3<f64>>, MergeError> {
    let si = *index
        .get(v.session.as_str())
        .ok_or_else(|| MergeError::UnknownVertex(v.clone()))?;
    let vertex = sessions[si]
        .graph
        .vertex(v.id)
        .ok_or_else(|| MergeError::UnknownVertex(v.clone()))?;
    Ok(align[si].map(|a| a * vertex.pose.isometry()))
}

/// Rigid transforms taking each session's map frame into the frame of
/// session 0, from the strongest inter edge reaching each new session.
pub fn prealign_sessions(
    sessions: &[SessionMap],
    inter: &[InterEdge],
) -> Result<Vec<Isometry3<f64>>, MergeError> {
    if sessions.is_empty() {
        return Err(MergeError::NoSessions);
    }
    check_ids(sessions)?;
    let index: BTreeMap<&str, usize> = sessions
        .iter()
        .enumerate()
        .map(|(i, s)| (s.session_id.as_str(), i))
        .collect();
    for e in inter {
        for v in [&e.matched, &e.query] {
            world_pose(
                sessions,
                &index,
                &vec![Some(Isometry3::identity()); sessions.len()],
                v,
            )?;
        }
    }
    let mut align: Vec<Option<Isometry3<f64>>> = vec![None; sessions.len()];
    align[0] = Some(Isometry3::identity());
    loop {
        // Best edge between the aligned component and an unaligned session.
        let mut best: Option<(&InterEdge, bool)> = None;
        for e in inter {
            let a = index[e.matched.session.as_str()];
            let b = index[e.query.session.as_str()];
            let forward = match (align[a].is_some(), align[b].is_some()) {
                (true, false) => true,
                (false, true) => false,
                _ => continue,
            };
            let better = best.is_none_or(|(cur, _)| {
                (e.estimate.inlier_count, e.similarity)
                    .partial_cmp(&(cur.estimate.inlier_count, cur.similarity))
                    .is_some_and(|o| o.is_gt())
            });
            if better {
                best = Some((e, forward));
            }
        }
        let Some((e, forward)) = best else { break };
        let t_pq = e.estimate.pose.isometry();
        let (known, unknown, t_known_unknown) = if forward {
            (&e.matched, &e.query, t_pq)
        } else {
            (&e.query, &e.matched, t_pq.inverse())
        };
        let t_w_known = world_pose(sessions, &index, &align, known)?.expect("aligned");
        let ui = index[unknown.session.as_str()];
        let t_m_unknown = sessions[ui].graph.vertices[&unknown.id].pose.isometry();
        align[ui] = Some(t_w_known * t_known_unknown * t_m_unknown.inverse());
    }
    align
        .into_iter()
        .zip(sessions)
        .map(|(a, s)| a.ok_or_else(|| MergeError::Disconnected(s.session_id.clone())))
        .collect()
}

/// Factor graph over all sessions: intra-session edges plus the inter-session
/// matched set, gauge at the first vertex of the first session.
pub fn build_merged_graph(
    sessions: &[SessionMap],
    inter: &[InterEdge],
    cfg: &MergeConfig,
) -> Result<FactorGraph<f64>, MergeError> {
    let align = prealign_sessions(sessions, inter)?;
    let mut g = FactorGraph::new();
    for (s, a) in sessions.iter().zip(&align) {
        if s.graph.is_empty() {
            return Err(MergeError::EmptySession(s.session_id.clone()));
        }
        for v in s.graph.vertices.values() {
            g.add_variable(VertexRef::new(&s.session_id, v.id), a * v.pose.isometry());
        }
    }
    g.gauge = 0;
    for s in sessions {
        for e in &s.graph.edges {
            let from = g
                .variable(&VertexRef::new(&s.session_id, e.from))
                .ok_or_else(|| MergeError::UnknownVertex(VertexRef::new(&s.session_id, e.from)))?;
            let to = g
                .variable(&VertexRef::new(&s.session_id, e.to))
                .ok_or_else(|| MergeError::UnknownVertex(VertexRef::new(&s.session_id, e.to)))?;
            g.add_factor(
                from,
                to,
                e.measurement.isometry(),
                e.covariance,
                cfg.robust_intra,
                e.kind,
            )?;
        }
    }
    for e in inter {
        let p = g
            .variable(&e.matched)
            .ok_or_else(|| MergeError::UnknownVertex(e.matched.clone()))?;
        let q = g
            .variable(&e.query)
            .ok_or_else(|| MergeError::UnknownVertex(e.query.clone()))?;
        g.add_factor(
            p,
            q,
            e.estimate.pose.isometry(),
            e.estimate.covariance,
            cfg.robust_inter,
            EdgeKind::InterLoop,
        )?;
        g.matched.push((e.matched.clone(), e.query.clone()));
    }
    Ok(g)
}

/// Rewrites every vertex pose from the optimized states, in the map frame of
/// the first session. Submaps stay in their vertex frames.
pub fn apply_optimized_poses(sessions: &mut [SessionMap], g: &FactorGraph<f64>) {
    let Some(frame) = sessions.first().map(|s| s.map_frame.clone()) else {
        return;
    };
    for s in sessions.iter_mut() {
        let poses: BTreeMap<VertexId, Isometry3<f64>> = s
            .graph
            .vertices
            .keys()
            .filter_map(|&id| {
                g.state(&VertexRef::new(&s.session_id, id))
                    .map(|st| (id, *st))
            })
            .collect();
        s.set_vertex_poses(frame.clone(), &poses);
    }
}

#[derive(Clone, Debug)]
pub struct MergeOutcome {
    pub inter_edges: Vec<InterEdge>,
    pub graph: FactorGraph<f64>,
    pub report: OptimizationReport,
}

/// Place recognition, graph assembly, optimization and write-back.
pub fn merge_sessions(
    sessions: &mut [SessionMap],
    cfg: &MergeConfig,
) -> Result<MergeOutcome, MergeError> {
    let inter_edges = find_inter_session_edges(sessions, &cfg.place)?;
    merge_with_edges(sessions, inter_edges, cfg)
}

/// As [`merge_sessions`] with a given inter-session matched set.
pub fn merge_with_edges(
    sessions: &mut [SessionMap],
    inter_edges: Vec<InterEdge>,
    cfg: &MergeConfig,
) -> Result<MergeOutcome, MergeError> {
    let mut graph = build_merged_graph(sessions, &inter_edges, cfg)?;
    let report = optimize(&mut graph, &cfg.optimizer)?;
    apply_optimized_poses(sessions, &graph);
    Ok(MergeOutcome {
        inter_edges,
        graph,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{exp_iso, FrameId, Pose};
    use crate::graph::{Edge, PoseGraph, ResourceKeys, Vertex};
    use nalgebra::{Matrix6, Vector6};

    fn chain(id: &str, poses: &[Isometry3<f64>]) -> SessionMap {
        let map = FrameId::map(id);
        let mut g = PoseGraph::new();
        for (i, p) in poses.iter().enumerate() {
            g.add_vertex(Vertex {
                id: i as u64,
                pose: Pose::from_isometry(p, map.clone(), FrameId::vertex(id, i as u64)),
                place_label: "room".into(),
                resources: ResourceKeys::default(),
            });
        }
        for i in 1..poses.len() {
            let rel = poses[i - 1].inverse() * poses[i];
            g.edges.push(Edge {
                from: i as u64 - 1,
                to: i as u64,
                measurement: Pose::from_isometry(
                    &rel,
                    FrameId::vertex(id, i as u64 - 1),
                    FrameId::vertex(id, i as u64),
                ),
                covariance: Matrix6::identity() * 1e-4,
                kind: EdgeKind::Odometry,
            });
        }
        SessionMap::in_memory(id, map, None, g, BTreeMap::new())
    }

    fn edge(p: VertexRef, q: VertexRef, t: Isometry3<f64>, inliers: usize) -> InterEdge {
        InterEdge {
            estimate: RelativePoseEstimate {
                pose: Pose::from_isometry(&t, p.frame(), q.frame()),
                inlier_count: inliers,
                correspondences: inliers,
                covariance: Matrix6::identity() * 1e-6,
            },
            matched: p,
            query: q,
            similarity: 0.9,
        }
    }

    fn path(n: usize) -> Vec<Isometry3<f64>> {
        (0..n)
            .map(|i| {
                exp_iso(&Vector6::new(
                    0.0,
                    0.0,
                    0.1 * i as f64,
                    0.5 * i as f64,
                    0.0,
                    0.0,
                ))
            })
            .collect()
    }

    #[test]
    fn single_session_keeps_poses() {
        let s = chain("a", &path(4));
        let g = build_merged_graph(std::slice::from_ref(&s), &[], &MergeConfig::default()).unwrap();
        assert_eq!(g.gauge, 0);
        assert_eq!(g.keys[0], VertexRef::new("a", 0));
        for (i, v) in s.graph.vertices.values().enumerate() {
            assert_eq!(g.states[i], v.pose.isometry());
        }
        assert_eq!(g.factors.len(), 3);
    }

    #[test]
    fn coincident_identity_edge_gives_identity_alignment() {
        let a = chain("a", &path(3));
        let b = chain("b", &path(3));
        let e = edge(
            VertexRef::new("a", 1),
            VertexRef::new("b", 1),
            Isometry3::identity(),
            20,
        );
        let align = prealign_sessions(&[a, b], &[e]).unwrap();
        assert!(
            (align[1].to_homogeneous() - Isometry3::<f64>::identity().to_homogeneous()).norm()
                < 1e-12
        );
    }

    #[test]
    fn offset_session_prealigned_exactly() {
        let truth = path(5);
        let offset = exp_iso(&Vector6::new(0.1, -0.2, 0.7, 3.0, -1.0, 0.5));
        let a = chain("a", &truth);
        // Session b observed the same places, expressed in its own map frame.
        let b_poses: Vec<_> = truth.iter().map(|p| offset.inverse() * p).collect();
        let b = chain("b", &b_poses);
        let e = edge(
            VertexRef::new("a", 2),
            VertexRef::new("b", 3),
            truth[2].inverse() * truth[3],
            30,
        );
        let sessions = [a, b];
        let g = build_merged_graph(&sessions, std::slice::from_ref(&e), &MergeConfig::default())
            .unwrap();
        for i in 0..5 {
            let st = g.state(&VertexRef::new("b", i)).unwrap();
            assert!((st.to_homogeneous() - truth[i as usize].to_homogeneous()).norm() < 1e-9);
        }
        // The same edge stated from the other side aligns identically.
        let rev = edge(
            VertexRef::new("b", 3),
            VertexRef::new("a", 2),
            truth[3].inverse() * truth[2],
            30,
        );
        let align = prealign_sessions(&sessions, &[rev]).unwrap();
        assert!((align[1].to_homogeneous() - offset.to_homogeneous()).norm() < 1e-9);
    }

    #[test]
    fn disconnected_session_refused() {
        let a = chain("a", &path(2));
        let b = chain("b", &path(2));
        let c = chain("c", &path(2));
        let e = edge(
            VertexRef::new("a", 0),
            VertexRef::new("b", 0),
            Isometry3::identity(),
            20,
        );
        match build_merged_graph(&[a, b, c], &[e], &MergeConfig::default()) {
            Err(MergeError::Disconnected(id)) => assert_eq!(id, "c"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn merge_moves_everything_into_first_frame() {
        let truth = path(4);
        let offset = exp_iso(&Vector6::new(0.0, 0.0, 0.3, 1.0, 2.0, 0.0));
        let mut sessions = vec![
            chain("a", &truth),
            chain("b", &truth.iter().map(|p| offset * p).collect::<Vec<_>>()),
        ];
        let e = edge(
            VertexRef::new("a", 0),
            VertexRef::new("b", 0),
            Isometry3::identity(),
            20,
        );
        let out = merge_with_edges(&mut sessions, vec![e], &MergeConfig::default()).unwrap();
        assert!(out.report.final_cost < 1e-12);
        for s in &sessions {
            assert_eq!(s.map_frame, FrameId::map("a"));
            for (i, v) in s.graph.vertices.values().enumerate() {
                assert_eq!(v.pose.parent, FrameId::map("a"));
                assert!(
                    (v.pose.isometry().to_homogeneous() - truth[i].to_homogeneous()).norm() < 1e-9
                );
            }
        }
    }
}
