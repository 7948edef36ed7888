//! Trajectory and map accuracy metrics against generator ground truth.

use std::collections::HashMap;

use nalgebra::{Isometry3, Point3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{FrameId, PointCloud};
use crate::session::{SessionError, SessionMap};
use crate::synth::GroundTruth;
use crate::util::PointGrid;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("session `{session}`: stamps must be strictly increasing (index {index})")]
    Unordered { session: String, index: usize },
    #[error("session `{session}`: stamp {stamp} has no ground-truth pose")]
    UnknownStamp { session: String, stamp: f64 },
    #[error("session `{0}` has no ground truth")]
    MissingSession(String),
    #[error("session `{session}`: vertex {id} has no ground-truth keyframe")]
    UnknownVertex { session: String, id: u64 },
    #[error("nothing to evaluate")]
    Empty,
    #[error("frame mismatch: `{0}` vs `{1}`")]
    FrameMismatch(FrameId, FrameId),
    #[error(transparent)]
    Session(#[from] SessionError),
}

/// Stamped poses of one session.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub session_id: String,
    pub stamps: Vec<f64>,
    pub poses: Vec<Isometry3<f64>>,
}

impl Trajectory {
    fn check_order(&self) -> Result<(), EvalError> {
        for (index, w) in self.stamps.windows(2).enumerate() {
            if !(w[1] > w[0]) {
                return Err(EvalError::Unordered {
                    session: self.session_id.clone(),
                    index: index + 1,
                });
            }
        }
        Ok(())
    }
}

/// Ground-truth body poses in the world frame.
pub fn truth_trajectory(gt: &GroundTruth) -> Trajectory {
    Trajectory {
        session_id: gt.session_id.clone(),
        stamps: gt.keyframes.iter().map(|k| k.stamp).collect(),
        poses: gt.keyframes.iter().map(|k| k.world_from_body).collect(),
    }
}

/// Vertex poses of `s`, stamped through the matching ground truth.
pub fn session_trajectory(s: &SessionMap, gt: &GroundTruth) -> Result<Trajectory, EvalError> {
    let mut stamps = Vec::with_capacity(s.graph.len());
    let mut poses = Vec::with_capacity(s.graph.len());
    for v in s.graph.vertices.values() {
        let stamp = gt.stamp_of(v.id).ok_or_else(|| EvalError::UnknownVertex {
            session: s.session_id.clone(),
            id: v.id,
        })?;
        stamps.push(stamp);
        poses.push(v.pose.isometry());
    }
    Ok(Trajectory {
        session_id: s.session_id.clone(),
        stamps,
        poses,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    /// Estimate already expressed in the ground-truth frame.
    Identity,
    /// One rigid transform taking the first estimated pose of the first
    /// session onto its ground truth, applied to every session.
    Gauge,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMetrics {
    pub poses: usize,
    pub ate_rmse: f64,
    pub ate_max: f64,
    pub rpe_pairs: usize,
    /// Translational RPE over ~`rpe_delta` meter windows; `None` without pairs.
    pub rpe_trans_rmse: Option<f64>,
    pub rpe_rot_rmse_deg: Option<f64>,
    pub rpe_delta: f64,
}

fn rmse(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| (v.iter().map(|e| e * e).sum::<f64>() / v.len() as f64).sqrt())
}

/// ATE and RPE of `est` against `gt`, sessions matched by id and poses by
/// stamp. The RPE window is `delta` meters of ground-truth path length.
pub fn evaluate_trajectory(
    est: &[Trajectory],
    gt: &[Trajectory],
    alignment: Alignment,
    delta: f64,
) -> Result<TrajectoryMetrics, EvalError> {
    for t in est.iter().chain(gt) {
        t.check_order()?;
    }
    let by_id: HashMap<&str, &Trajectory> = gt.iter().map(|t| (t.session_id.as_str(), t)).collect();
    // Pair every estimated pose with its ground truth.
    let mut paired: Vec<Vec<(Isometry3<f64>, Isometry3<f64>)>> = Vec::new();
    for e in est {
        let g = by_id
            .get(e.session_id.as_str())
            .ok_or_else(|| EvalError::MissingSession(e.session_id.clone()))?;
        let mut pairs = Vec::with_capacity(e.stamps.len());
        for (stamp, pose) in e.stamps.iter().zip(&e.poses) {
            let k = g.stamps.partition_point(|s| *s < stamp - 1e-6);
            match g.stamps.get(k) {
                Some(s) if (s - stamp).abs() <= 1e-6 => pairs.push((*pose, g.poses[k])),
                _ => {
                    return Err(EvalError::UnknownStamp {
                        session: e.session_id.clone(),
                        stamp: *stamp,
                    })
                }
            }
        }
        paired.push(pairs);
    }
    let Some((e0, g0)) = paired.iter().find_map(|p| p.first()) else {
        return Err(EvalError::Empty);
    };
    let align = match alignment {
        Alignment::Identity => Isometry3::identity(),
        Alignment::Gauge => g0 * e0.inverse(),
    };
    let ate: Vec<f64> = paired
        .iter()
        .flatten()
        .map(|(e, g)| ((align * e).translation.vector - g.translation.vector).norm())
        .collect();
    let mut rpe_t = Vec::new();
    let mut rpe_r = Vec::new();
    for pairs in &paired {
        // Cumulative ground-truth path length.
        let mut along = vec![0.0];
        for w in pairs.windows(2) {
            let step = (w[1].1.translation.vector - w[0].1.translation.vector).norm();
            along.push(along.last().unwrap() + step);
        }
        for i in 0..pairs.len() {
            let j = along.partition_point(|s| *s < along[i] + delta - 1e-9);
            if j >= pairs.len() {
                break;
            }
            let (ei, gi) = &pairs[i];
            let (ej, gj) = &pairs[j];
            let err = (gi.inverse() * gj).inverse() * (ei.inverse() * ej);
            rpe_t.push(err.translation.vector.norm());
            rpe_r.push(err.rotation.angle().to_degrees());
        }
    }
    Ok(TrajectoryMetrics {
        poses: ate.len(),
        ate_rmse: rmse(&ate).unwrap_or(0.0),
        ate_max: ate.iter().copied().fold(0.0, f64::max),
        rpe_pairs: rpe_t.len(),
        rpe_trans_rmse: rmse(&rpe_t),
        rpe_rot_rmse_deg: rmse(&rpe_r),
        rpe_delta: delta,
    })
}

/// Merged-map ATE in the world frame, anchored on the first ground truth.
pub fn evaluate_sessions(
    sessions: &[SessionMap],
    truths: &[GroundTruth],
    delta: f64,
) -> Result<TrajectoryMetrics, EvalError> {
    let mut est = Vec::with_capacity(sessions.len());
    let mut gt = Vec::with_capacity(sessions.len());
    for s in sessions {
        let t = truths
            .iter()
            .find(|t| t.session_id == s.session_id)
            .ok_or_else(|| EvalError::MissingSession(s.session_id.clone()))?;
        est.push(session_trajectory(s, t)?);
        gt.push(truth_trajectory(t));
    }
    evaluate_trajectory(&est, &gt, Alignment::Gauge, delta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointErrorStats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    pub p90: f64,
}

/// Nearest-neighbour distance from every map point to the reference cloud.
pub fn point_to_point_error(
    map: &PointCloud,
    gt: &PointCloud,
) -> Result<PointErrorStats, EvalError> {
    if map.frame != gt.frame {
        return Err(EvalError::FrameMismatch(
            map.frame.clone(),
            gt.frame.clone(),
        ));
    }
    if map.is_empty() || gt.is_empty() {
        return Err(EvalError::Empty);
    }
    let grid = PointGrid::new(&gt.points, 0.05);
    let mut d: Vec<f64> = map
        .points
        .par_iter()
        .map(|p| grid.nearest_distance(p).expect("nonempty"))
        .collect();
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let median = if n % 2 == 1 {
        d[n / 2]
    } else {
        0.5 * (d[n / 2 - 1] + d[n / 2])
    };
    // Nearest-rank percentile.
    let p90 = d[((0.9 * n as f64).ceil() as usize).clamp(1, n) - 1];
    Ok(PointErrorStats {
        count: n,
        mean: d.iter().sum::<f64>() / n as f64,
        median,
        max: d[n - 1],
        p90,
    })
}

pub fn transform_cloud(iso: &Isometry3<f64>, c: &PointCloud, frame: FrameId) -> PointCloud {
    PointCloud::new(c.points.iter().map(|p| iso * p).collect(), frame)
}

/// One point per occupied voxel at the centroid of its members. Output is
/// sorted by voxel key so it does not depend on input order.
pub fn voxel_downsample(c: &PointCloud, resolution: f64) -> PointCloud {
    let mut acc: HashMap<[i64; 3], (Vector3<f64>, usize)> = HashMap::new();
    for p in &c.points {
        let k = [0, 1, 2].map(|i| (p[i] / resolution).floor() as i64);
        let e = acc.entry(k).or_insert((Vector3::zeros(), 0));
        e.0 += p.coords;
        e.1 += 1;
    }
    let mut cells: Vec<_> = acc.into_iter().collect();
    cells.sort_by_key(|(k, _)| *k);
    PointCloud::new(
        cells
            .into_iter()
            .map(|(_, (sum, n))| Point3::from(sum / n as f64))
            .collect(),
        c.frame.clone(),
    )
}

/// All submaps placed by their vertex poses, optionally voxel-downsampled.
/// Every vertex pose must share one parent frame.
pub fn assemble_cloud(
    sessions: &[SessionMap],
    voxel: Option<f64>,
) -> Result<PointCloud, EvalError> {
    let mut frame: Option<FrameId> = None;
    let mut points = Vec::new();
    for s in sessions {
        for v in s.graph.vertices.values() {
            match &frame {
                None => frame = Some(v.pose.parent.clone()),
                Some(f) if *f != v.pose.parent => {
                    return Err(EvalError::FrameMismatch(f.clone(), v.pose.parent.clone()))
                }
                Some(_) => {}
            }
            if !s.has_resource(v.id, crate::session::ResourceKind::Submap) {
                continue;
            }
            let iso = v.pose.isometry();
            points.extend(s.submap(v.id)?.points.iter().map(|p| iso * p));
        }
    }
    let cloud = PointCloud::new(points, frame.ok_or(EvalError::Empty)?);
    Ok(match voxel {
        Some(r) => voxel_downsample(&cloud, r),
        None => cloud,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Translation3, UnitQuaternion};

    fn line(session: &str, n: usize, f: impl Fn(usize) -> Isometry3<f64>) -> Trajectory {
        Trajectory {
            session_id: session.into(),
            stamps: (0..n).map(|i| i as f64).collect(),
            poses: (0..n).map(f).collect(),
        }
    }

    fn straight(i: usize) -> Isometry3<f64> {
        Isometry3::from_parts(
            Translation3::new(0.5 * i as f64, 0.0, 0.0),
            UnitQuaternion::from_euler_angles(0.0, 0.0, 0.1 * i as f64),
        )
    }

    #[test]
    fn identical_trajectories_score_zero() {
        let gt = vec![line("a", 10, straight)];
        let m = evaluate_trajectory(&gt, &gt, Alignment::Gauge, 1.0).unwrap();
        assert_eq!(m.ate_rmse, 0.0);
        assert!(m.rpe_trans_rmse.unwrap() < 1e-12);
        assert_eq!(m.rpe_pairs, 8);
    }

    #[test]
    fn constant_offset_is_the_ate_without_alignment() {
        let gt = vec![line("a", 10, straight)];
        let shift = Isometry3::translation(0.0, 0.1, 0.0);
        let est = vec![line("a", 10, |i| shift * straight(i))];
        let m = evaluate_trajectory(&est, &gt, Alignment::Identity, 1.0).unwrap();
        assert!((m.ate_rmse - 0.1).abs() < 1e-12);
        // A world-frame shift leaves relative motion untouched.
        assert!(m.rpe_trans_rmse.unwrap() < 1e-12);
        let m = evaluate_trajectory(&est, &gt, Alignment::Gauge, 1.0).unwrap();
        assert!(m.ate_rmse < 1e-12);
    }

    #[test]
    fn rpe_of_a_scaled_trajectory() {
        // Straight line with 10 % scale error: every 1 m window is 0.1 m off.
        let gt = vec![line("a", 11, |i| {
            Isometry3::translation(0.5 * i as f64, 0.0, 0.0)
        })];
        let est = vec![line("a", 11, |i| {
            Isometry3::translation(0.55 * i as f64, 0.0, 0.0)
        })];
        let m = evaluate_trajectory(&est, &gt, Alignment::Identity, 1.0).unwrap();
        assert!((m.rpe_trans_rmse.unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(m.rpe_pairs, 9);
    }

    #[test]
    fn unordered_or_unknown_stamps_are_rejected() {
        let gt = vec![line("a", 5, straight)];
        let mut est = gt.clone();
        est[0].stamps.swap(1, 2);
        assert!(matches!(
            evaluate_trajectory(&est, &gt, Alignment::Gauge, 1.0),
            Err(EvalError::Unordered { index: 2, .. })
        ));
        let mut est = gt.clone();
        est[0].stamps[4] = 4.5;
        assert!(matches!(
            evaluate_trajectory(&est, &gt, Alignment::Gauge, 1.0),
            Err(EvalError::UnknownStamp { .. })
        ));
        let est = vec![line("b", 5, straight)];
        assert!(matches!(
            evaluate_trajectory(&est, &gt, Alignment::Gauge, 1.0),
            Err(EvalError::MissingSession(_))
        ));
    }

    #[test]
    fn point_error_statistics() {
        let f = FrameId::new("w");
        let gt = PointCloud::new(
            (0..100)
                .map(|i| Point3::new(i as f64 * 0.01, 0.0, 0.0))
                .collect(),
            f.clone(),
        );
        let same = point_to_point_error(&gt, &gt).unwrap();
        assert_eq!(
            (same.mean, same.median, same.max, same.p90),
            (0.0, 0.0, 0.0, 0.0)
        );
        let off = transform_cloud(&Isometry3::translation(0.0, 0.0, 0.02), &gt, f.clone());
        let s = point_to_point_error(&off, &gt).unwrap();
        assert!((s.mean - 0.02).abs() < 1e-12 && (s.max - 0.02).abs() < 1e-12);
        // Distances 1..=10 cm: median 5.5, p90 by nearest rank is the 9th.
        let pts = (1..=10)
            .map(|i| Point3::new(0.0, 0.0, i as f64 * 0.01))
            .collect();
        let s = point_to_point_error(
            &PointCloud::new(pts, f.clone()),
            &PointCloud::new(vec![Point3::origin()], f.clone()),
        )
        .unwrap();
        assert!((s.median - 0.055).abs() < 1e-12);
        assert!((s.p90 - 0.09).abs() < 1e-12);
        assert!((s.mean - 0.055).abs() < 1e-12);
        let other = PointCloud::new(vec![Point3::origin()], FrameId::new("x"));
        assert!(matches!(
            point_to_point_error(&other, &gt),
            Err(EvalError::FrameMismatch(..))
        ));
    }

    #[test]
    fn downsample_takes_centroids() {
        let f = FrameId::new("w");
        let c = PointCloud::new(
            vec![
                Point3::new(0.01, 0.01, 0.01),
                Point3::new(0.03, 0.03, 0.03),
                Point3::new(0.26, 0.0, 0.0),
            ],
            f,
        );
        let d = voxel_downsample(&c, 0.1);
        assert_eq!(d.len(), 2);
        assert!((d.points[0] - Point3::new(0.02, 0.02, 0.02)).norm() < 1e-12);
    }
}
