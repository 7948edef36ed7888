//! Place recognition: bag-of-words global descriptors for candidate retrieval
//! and RANSAC rigid alignment of matched landmarks for relative poses.
//!
//! Relative poses come from 3D–3D landmark correspondences rather than
//! image-based PnP; the interface (vertex pair in, relative pose with inlier
//! count and covariance out) is the same one a PnP backend would implement.

use std::cmp::Ordering;

use nalgebra::{Isometry3, Matrix3, Matrix6, Point3, Rotation3, Translation3, UnitQuaternion};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptor::{DescriptorSet, SparseVector};
use crate::geometry::{FrameId, Pose};
use crate::graph::VertexId;
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlaceError {
    #[error("need at least {needed} descriptors to build the vocabulary, have {available}")]
    InsufficientDescriptors { needed: usize, available: usize },
    #[error("only {distinct} distinct descriptors for {needed} words")]
    InsufficientDistinct { needed: usize, distinct: usize },
    #[error("word count must be positive")]
    ZeroWords,
    #[error("descriptor dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
}

/// Vertex of a particular session.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VertexRef {
    pub session: String,
    pub id: VertexId,
}

impl VertexRef {
    pub fn new(session: impl Into<String>, id: VertexId) -> Self {
        Self {
            session: session.into(),
            id,
        }
    }

    pub fn frame(&self) -> FrameId {
        FrameId::vertex(&self.session, self.id)
    }
}

#[derive(Clone, Debug)]
pub struct Vocabulary {
    pub dim: usize,
    pub centroids: Vec<Vec<f64>>,
    pub idf: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - *y as f64;
            d * d
        })
        .sum()
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    /// Index of the closest centroid.
    pub fn word_of(&self, feature: &[f32]) -> u32 {
        let mut best = (0usize, f64::INFINITY);
        for (i, c) in self.centroids.iter().enumerate() {
            let d = sq_dist(c, feature);
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0 as u32
    }
}

/// Clusters all local features with seeded k-means++ and Lloyd iterations.
pub fn build_vocabulary(
    sets: &[&DescriptorSet],
    word_count: usize,
    seed: u64,
) -> Result<Vocabulary, PlaceError> {
    if word_count == 0 {
        return Err(PlaceError::ZeroWords);
    }
    let dim = sets.iter().find(|s| !s.is_empty()).map_or(0, |s| s.dim);
    let features: Vec<&[f32]> = sets
        .iter()
        .flat_map(|s| s.local.iter().map(|d| d.feature.as_slice()))
        .collect();
    if features.len() < word_count {
        return Err(PlaceError::InsufficientDescriptors {
            needed: word_count,
            available: features.len(),
        });
    }
    if let Some(f) = features.iter().find(|f| f.len() != dim) {
        return Err(PlaceError::Dimension(dim, f.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let to64 = |f: &[f32]| f.iter().map(|v| *v as f64).collect::<Vec<f64>>();

    // k-means++ seeding
    let mut centroids = vec![to64(features[rng.random_range(0..features.len())])];
    let mut d2: Vec<f64> = features.iter().map(|f| sq_dist(&centroids[0], f)).collect();
    while centroids.len() < word_count {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(PlaceError::InsufficientDistinct {
                needed: word_count,
                distinct: centroids.len(),
            });
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = d2.len() - 1;
        for (i, w) in d2.iter().enumerate() {
            if *w > 0.0 && target < *w {
                pick = i;
                break;
            }
            target -= w;
        }
        if d2[pick] <= 0.0 {
            pick = d2
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .expect("nonempty");
        }
        let c = to64(features[pick]);
        for (w, f) in d2.iter_mut().zip(&features) {
            *w = w.min(sq_dist(&c, f));
        }
        centroids.push(c);
    }

    // Lloyd iterations
    let mut assign = vec![usize::MAX; features.len()];
    for _ in 0..100 {
        let mut changed = false;
        for (a, f) in assign.iter_mut().zip(&features) {
            let w = nearest(&centroids, f);
            if *a != w {
                *a = w;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; word_count];
        let mut counts = vec![0usize; word_count];
        for (a, f) in assign.iter().zip(&features) {
            counts[*a] += 1;
            for (s, v) in sums[*a].iter_mut().zip(f.iter()) {
                *s += *v as f64;
            }
        }
        for k in 0..word_count {
            if counts[k] > 0 {
                centroids[k] = sums[k].iter().map(|s| s / counts[k] as f64).collect();
            } else {
                // Re-seed an empty word at the feature farthest from its centroid.
                let far = features
                    .iter()
                    .zip(&assign)
                    .map(|(f, a)| sq_dist(&centroids[*a], f))
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(i, _)| i)
                    .expect("nonempty");
                centroids[k] = to64(features[far]);
                assign[far] = k;
            }
        }
    }

    let vocab_tmp = Vocabulary {
        dim,
        centroids,
        idf: Vec::new(),
    };
    let n_docs = sets.len() as f64;
    let mut doc_freq = vec![0usize; word_count];
    for s in sets {
        let mut seen = vec![false; word_count];
        for d in &s.local {
            seen[vocab_tmp.word_of(&d.feature) as usize] = true;
        }
        for (df, hit) in doc_freq.iter_mut().zip(seen) {
            *df += hit as usize;
        }
    }
    let idf = doc_freq
        .iter()
        .map(|&df| (1.0 + n_docs / df.max(1) as f64).ln())
        .collect();
    Ok(Vocabulary { idf, ..vocab_tmp })
}

fn nearest(centroids: &[Vec<f64>], f: &[f32]) -> usize {
    let mut best = (0usize, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, f);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// tf-idf weighted word histogram, L2-normalized. An empty set yields the
/// zero vector, which never matches anything.
pub fn global_descriptor(ds: &DescriptorSet, vocab: &Vocabulary) -> SparseVector {
    if ds.is_empty() || vocab.is_empty() {
        return SparseVector::default();
    }
    let mut counts = std::collections::BTreeMap::<u32, usize>::new();
    for d in &ds.local {
        *counts.entry(vocab.word_of(&d.feature)).or_default() += 1;
    }
    let total = ds.len() as f64;
    let mut v = SparseVector::from_entries(
        counts
            .into_iter()
            .map(|(w, c)| (w, c as f64 / total * vocab.idf[w as usize]))
            .collect(),
    );
    let n = v.norm();
    if n > 0.0 {
        v.entries.iter_mut().for_each(|(_, x)| *x /= n);
    }
    v
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopCandidate {
    /// `b_q`
    pub query: VertexRef,
    /// `b_p`
    pub matched: VertexRef,
    pub similarity: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryMode {
    /// Only vertices of other sessions are candidates.
    Inter,
    /// Every database vertex is a candidate, including the query itself.
    Intra,
}

#[derive(Clone, Debug, Default)]
pub struct PlaceDatabase {
    entries: Vec<(VertexRef, SparseVector)>,
}

impl PlaceDatabase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, v: VertexRef, descriptor: SparseVector) {
        self.entries.push((v, descriptor));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Top-`k` database vertices by cosine similarity, at least `min_similarity`.
    pub fn query_candidates(
        &self,
        query: &VertexRef,
        descriptor: &SparseVector,
        k: usize,
        min_similarity: f64,
        mode: QueryMode,
    ) -> Vec<LoopCandidate> {
        if descriptor.is_zero() {
            return Vec::new();
        }
        let mut out: Vec<LoopCandidate> = self
            .entries
            .iter()
            .filter(|(v, _)| mode == QueryMode::Intra || v.session != query.session)
            .filter_map(|(v, d)| {
                let s = descriptor.cosine(d);
                (s >= min_similarity && s > 0.0).then(|| LoopCandidate {
                    query: query.clone(),
                    matched: v.clone(),
                    similarity: s,
                })
            })
            .collect();
        out.sort_by(|a, b| {
            b.similarity
                .total_cmp(&a.similarity)
                .then_with(|| a.matched.cmp(&b.matched))
        });
        out.truncate(k);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Inlier distance threshold in meters.
    pub inlier_threshold: f64,
    pub min_inliers: usize,
    /// Lower bound on the residual sigma used for the covariance.
    pub sigma_floor: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            inlier_threshold: 0.05,
            min_inliers: 10,
            sigma_floor: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelativePoseEstimate {
    /// `T̂_{b_p,b_q}`: query vertex expressed in the matched vertex frame.
    pub pose: Pose,
    pub inlier_count: usize,
    pub correspondences: usize,
    pub covariance: Matrix6<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum Rejection {
    #[error("{0} correspondences, need at least 3")]
    TooFewCorrespondences(usize),
    #[error("{inliers} inliers, need at least {required}")]
    TooFewInliers { inliers: usize, required: usize },
}

/// Least-squares rigid transform mapping `src` onto `dst` (Kabsch).
/// Returns `None` for fewer than three points.
pub fn rigid_fit<T: Real>(src: &[Point3<T>], dst: &[Point3<T>]) -> Option<Isometry3<T>> {
    if src.len() < 3 || src.len() != dst.len() {
        return None;
    }
    let n = T::from_usize(src.len())?;
    let cs = src
        .iter()
        .fold(nalgebra::Vector3::zeros(), |a, p| a + p.coords)
        / n;
    let cd = dst
        .iter()
        .fold(nalgebra::Vector3::zeros(), |a, p| a + p.coords)
        / n;
    let mut h = Matrix3::<T>::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s.coords - cs) * (d.coords - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let v = vt.transpose();
    let mut fix = Matrix3::identity();
    if (v * u.transpose()).determinant() < T::zero() {
        fix[(2, 2)] = -T::one();
    }
    let r = v * fix * u.transpose();
    let rot = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    let t = cd - rot * cs;
    Some(Isometry3::from_parts(Translation3::from(t), rot))
}

/// Mutual nearest neighbours in feature space, as `(query index, match index)`.
pub fn mutual_matches(query: &DescriptorSet, matched: &DescriptorSet) -> Vec<(usize, usize)> {
    let dist =
        |a: &[f32], b: &[f32]| -> f32 { a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum() };
    let best = |from: &DescriptorSet, to: &DescriptorSet| -> Vec<Option<usize>> {
        from.local
            .iter()
            .map(|a| {
                to.local
                    .iter()
                    .enumerate()
                    .map(|(j, b)| (j, dist(&a.feature, &b.feature)))
                    .min_by(|x, y| x.1.total_cmp(&y.1))
                    .map(|(j, _)| j)
            })
            .collect()
    };
    if query.dim != matched.dim {
        return Vec::new();
    }
    let fwd = best(query, matched);
    let bwd = best(matched, query);
    fwd.iter()
        .enumerate()
        .filter_map(|(i, j)| j.filter(|&j| bwd[j] == Some(i)).map(|j| (i, j)))
        .collect()
}

fn count_inliers(
    iso: &Isometry3<f64>,
    src: &[Point3<f64>],
    dst: &[Point3<f64>],
    threshold: f64,
) -> Vec<usize> {
    src.iter()
        .zip(dst)
        .enumerate()
        .filter(|(_, (s, d))| (iso * *s - *d).norm() < threshold)
        .map(|(i, _)| i)
        .collect()
}

fn non_degenerate(p: [&Point3<f64>; 3]) -> bool {
    (p[1] - p[0]).cross(&(p[2] - p[0])).norm() > 1e-9
}

/// RANSAC over mutual-nearest-neighbour landmark matches, refined on all inliers.
pub fn estimate_relative_pose(
    query: (&VertexRef, &DescriptorSet),
    matched: (&VertexRef, &DescriptorSet),
    cfg: &RansacConfig,
) -> Result<RelativePoseEstimate, Rejection> {
    let pairs = mutual_matches(query.1, matched.1);
    if pairs.len() < 3 {
        return Err(Rejection::TooFewCorrespondences(pairs.len()));
    }
    let src: Vec<Point3<f64>> = pairs
        .iter()
        .map(|(i, _)| query.1.local[*i].landmark)
        .collect();
    let dst: Vec<Point3<f64>> = pairs
        .iter()
        .map(|(_, j)| matched.1.local[*j].landmark)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut best: Vec<usize> = Vec::new();
    let all: Vec<usize> = (0..src.len()).collect();
    if src.len() == 3 {
        best = all.clone();
    }
    for _ in 0..cfg.iterations {
        if src.len() == 3 {
            break;
        }
        let idx = sample(&mut rng, src.len(), 3).into_vec();
        if !non_degenerate([&src[idx[0]], &src[idx[1]], &src[idx[2]]]) {
            continue;
        }
        let s = [src[idx[0]], src[idx[1]], src[idx[2]]];
        let d = [dst[idx[0]], dst[idx[1]], dst[idx[2]]];
        let Some(iso) = rigid_fit(&s, &d) else {
            continue;
        };
        let inl = count_inliers(&iso, &src, &dst, cfg.inlier_threshold);
        if inl.len() > best.len() {
            best = inl;
            if best.len() == src.len() {
                break;
            }
        }
    }
    if best.len() < 3 {
        return Err(Rejection::TooFewInliers {
            inliers: best.len(),
            required: cfg.min_inliers.max(3),
        });
    }
    // Refit on the consensus set until it stops growing.
    let mut iso = Isometry3::identity();
    for _ in 0..5 {
        let s: Vec<_> = best.iter().map(|&i| src[i]).collect();
        let d: Vec<_> = best.iter().map(|&i| dst[i]).collect();
        iso = rigid_fit(&s, &d).expect("at least three inliers");
        let next = count_inliers(&iso, &src, &dst, cfg.inlier_threshold);
        if next.len() <= best.len() {
            break;
        }
        best = next;
    }
    if best.len() < cfg.min_inliers {
        return Err(Rejection::TooFewInliers {
            inliers: best.len(),
            required: cfg.min_inliers,
        });
    }
    let sse: f64 = best
        .iter()
        .map(|&i| (iso * src[i] - dst[i]).norm_squared())
        .sum();
    let sigma = (sse / best.len() as f64).sqrt().max(cfg.sigma_floor);
    let covariance = Matrix6::identity() * (sigma * sigma / best.len() as f64);
    Ok(RelativePoseEstimate {
        pose: Pose::from_isometry(&iso, matched.0.frame(), query.0.frame()),
        inlier_count: best.len(),
        correspondences: pairs.len(),
        covariance,
    })
}

/// A verified loop candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredEstimate {
    pub candidate: LoopCandidate,
    pub estimate: RelativePoseEstimate,
}

fn rank(a: &ScoredEstimate, b: &ScoredEstimate) -> Ordering {
    b.estimate
        .inlier_count
        .cmp(&a.estimate.inlier_count)
        .then_with(|| b.candidate.similarity.total_cmp(&a.candidate.similarity))
        .then_with(|| a.candidate.matched.cmp(&b.candidate.matched))
        .then_with(|| a.candidate.query.cmp(&b.candidate.query))
}

/// Most inliers wins; ties go to higher similarity, then the lower vertex id.
pub fn select_best_match(estimates: &[ScoredEstimate]) -> Option<&ScoredEstimate> {
    estimates.iter().min_by(|a, b| rank(a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::LocalDescriptor;
    use crate::geometry::exp_iso;
    use nalgebra::{Vector3, Vector6};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn set_from(features: Vec<Vec<f32>>, landmarks: Vec<Point3<f64>>) -> DescriptorSet {
        let dim = features.first().map_or(0, |f| f.len());
        DescriptorSet::new(
            dim,
            features
                .into_iter()
                .zip(landmarks)
                .map(|(feature, landmark)| LocalDescriptor { feature, landmark })
                .collect(),
        )
    }

    fn clustered(centers: &[[f32; 2]], per: usize, spread: f32, seed: u64) -> DescriptorSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut feats = Vec::new();
        for c in centers {
            for _ in 0..per {
                feats.push(vec![
                    c[0] + rng.random_range(-spread..spread),
                    c[1] + rng.random_range(-spread..spread),
                ]);
            }
        }
        let n = feats.len();
        set_from(feats, vec![Point3::origin(); n])
    }

    #[test]
    fn vocabulary_recovers_separated_clusters() {
        let centers = [[0.0, 0.0], [100.0, 0.0], [0.0, 100.0], [100.0, 100.0]];
        let ds = clustered(&centers, 25, 1.0, 3);
        let v = build_vocabulary(&[&ds], 4, 11).unwrap();
        for c in centers {
            let hit = v
                .centroids
                .iter()
                .filter(|k| {
                    ((k[0] - c[0] as f64).powi(2) + (k[1] - c[1] as f64).powi(2)).sqrt() < 2.0
                })
                .count();
            assert_eq!(hit, 1, "center {c:?}");
        }
        assert!(v.idf.iter().all(|w| *w >= 0.0));
    }

    #[test]
    fn vocabulary_single_word_is_mean() {
        let ds = clustered(&[[1.0, 2.0], [5.0, -2.0]], 10, 0.5, 1);
        let v = build_vocabulary(&[&ds], 1, 0).unwrap();
        let n = ds.len() as f64;
        let mean: Vec<f64> = (0..2)
            .map(|k| ds.local.iter().map(|d| d.feature[k] as f64).sum::<f64>() / n)
            .collect();
        assert!((v.centroids[0][0] - mean[0]).abs() < 1e-9);
        assert!((v.centroids[0][1] - mean[1]).abs() < 1e-9);
    }

    #[test]
    fn vocabulary_needs_enough_descriptors() {
        let ds = clustered(&[[0.0, 0.0]], 3, 0.1, 0);
        assert_eq!(
            build_vocabulary(&[&ds], 4, 0).unwrap_err(),
            PlaceError::InsufficientDescriptors {
                needed: 4,
                available: 3
            }
        );
    }

    #[test]
    fn vocabulary_is_deterministic() {
        let ds = clustered(&[[0.0, 0.0], [10.0, 3.0], [4.0, 9.0]], 20, 2.0, 5);
        let a = build_vocabulary(&[&ds], 5, 42).unwrap();
        let b = build_vocabulary(&[&ds], 5, 42).unwrap();
        assert_eq!(a.centroids, b.centroids);
    }

    fn four_word_vocab() -> Vocabulary {
        let centers = [[0.0, 0.0], [100.0, 0.0], [0.0, 100.0], [100.0, 100.0]];
        let ds = clustered(&centers, 10, 1.0, 7);
        build_vocabulary(&[&ds], 4, 1).unwrap()
    }

    #[test]
    fn global_descriptor_cases() {
        let v = four_word_vocab();
        let one = clustered(&[[0.0, 0.0]], 6, 0.5, 2);
        let g = global_descriptor(&one, &v);
        assert_eq!(g.entries.len(), 1);
        assert!((g.entries[0].1 - 1.0).abs() < 1e-12);

        let mixed = clustered(&[[0.0, 0.0], [100.0, 0.0]], 4, 0.5, 9);
        let g1 = global_descriptor(&mixed, &v);
        assert!((g1.cosine(&global_descriptor(&mixed, &v)) - 1.0).abs() < 1e-12);

        let other = clustered(&[[0.0, 100.0], [100.0, 100.0]], 4, 0.5, 9);
        assert_eq!(g1.cosine(&global_descriptor(&other, &v)), 0.0);

        assert!(global_descriptor(&DescriptorSet::new(2, vec![]), &v).is_zero());
    }

    #[test]
    fn query_modes_and_threshold() {
        let v = four_word_vocab();
        let a = global_descriptor(&clustered(&[[0.0, 0.0], [100.0, 0.0]], 4, 0.5, 1), &v);
        let b = global_descriptor(&clustered(&[[0.0, 0.0]], 4, 0.5, 2), &v);
        let c = global_descriptor(&clustered(&[[0.0, 100.0]], 4, 0.5, 3), &v);
        let mut db = PlaceDatabase::new();
        db.insert(VertexRef::new("s0", 0), a.clone());
        db.insert(VertexRef::new("s1", 0), b);
        db.insert(VertexRef::new("s1", 1), c);

        let q = VertexRef::new("s0", 0);
        let intra = db.query_candidates(&q, &a, 5, 0.3, QueryMode::Intra);
        assert_eq!(intra[0].matched, q);
        assert!((intra[0].similarity - 1.0).abs() < 1e-12);

        let inter = db.query_candidates(&q, &a, 5, 0.3, QueryMode::Inter);
        assert_eq!(inter.len(), 1);
        assert_eq!(inter[0].matched, VertexRef::new("s1", 0));

        let unrelated = global_descriptor(&clustered(&[[100.0, 100.0]], 4, 0.5, 4), &v);
        assert!(db
            .query_candidates(
                &VertexRef::new("s2", 0),
                &unrelated,
                5,
                0.3,
                QueryMode::Inter
            )
            .is_empty());
    }

    /// Landmark sets related by `truth`, with unique one-hot-ish features.
    fn correspondence_sets(
        truth: &Isometry3<f64>,
        n: usize,
        outlier_frac: f64,
        noise: f64,
        seed: u64,
    ) -> (DescriptorSet, DescriptorSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gauss = Normal::new(0.0, noise.max(1e-300)).unwrap();
        let mut q_feats = Vec::new();
        let mut p_feats = Vec::new();
        let mut q_pts = Vec::new();
        let mut p_pts = Vec::new();
        for i in 0..n {
            let f: Vec<f32> = (0..8)
                .map(|k| ((i * 31 + k * 7) % 97) as f32 + i as f32 * 100.0)
                .collect();
            let x = Point3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(0.0..2.5),
            );
            let mut y = truth * x;
            if noise > 0.0 {
                y += Vector3::new(
                    gauss.sample(&mut rng),
                    gauss.sample(&mut rng),
                    gauss.sample(&mut rng),
                );
            }
            if rng.random::<f64>() < outlier_frac {
                y = Point3::new(
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                );
            }
            q_feats.push(f.clone());
            p_feats.push(f);
            q_pts.push(x);
            p_pts.push(y);
        }
        (set_from(q_feats, q_pts), set_from(p_feats, p_pts))
    }

    fn truth() -> Isometry3<f64> {
        exp_iso(&Vector6::new(0.1, -0.05, 0.6, 0.8, -0.4, 0.05))
    }

    #[test]
    fn exact_correspondences_recover_pose() {
        let t = truth();
        let (q, p) = correspondence_sets(&t, 40, 0.0, 0.0, 1);
        let est = estimate_relative_pose(
            (&VertexRef::new("b", 3), &q),
            (&VertexRef::new("a", 5), &p),
            &RansacConfig::default(),
        )
        .unwrap();
        assert_eq!(est.inlier_count, 40);
        assert_eq!(est.correspondences, 40);
        assert!(est
            .pose
            .approx_eq(&Pose::from_isometry(&t, "x".into(), "y".into()), 1e-9));
        assert_eq!(est.pose.parent, FrameId::vertex("a", 5));
        assert_eq!(est.pose.child, FrameId::vertex("b", 3));
        assert!(crate::graph::is_spd(&est.covariance));
    }

    #[test]
    fn outliers_and_noise() {
        let t = truth();
        let (q, p) = correspondence_sets(&t, 80, 0.3, 0.005, 2);
        let est = estimate_relative_pose(
            (&VertexRef::new("b", 0), &q),
            (&VertexRef::new("a", 0), &p),
            &RansacConfig::default(),
        )
        .unwrap();
        let d = t.inverse() * est.pose.isometry();
        assert!(d.translation.vector.norm() < 0.02);
        assert!(crate::geometry::quat_angle(&d.rotation).to_degrees() < 0.5);
        assert!(est.inlier_count <= est.correspondences);
    }

    #[test]
    fn two_correspondences_rejected() {
        let (q, p) = correspondence_sets(&truth(), 2, 0.0, 0.0, 3);
        assert_eq!(
            estimate_relative_pose(
                (&VertexRef::new("b", 0), &q),
                (&VertexRef::new("a", 0), &p),
                &RansacConfig::default()
            )
            .unwrap_err(),
            Rejection::TooFewCorrespondences(2)
        );
    }

    #[test]
    fn ransac_is_deterministic() {
        let (q, p) = correspondence_sets(&truth(), 50, 0.4, 0.01, 4);
        let run = || {
            estimate_relative_pose(
                (&VertexRef::new("b", 0), &q),
                (&VertexRef::new("a", 0), &p),
                &RansacConfig {
                    seed: 9,
                    ..Default::default()
                },
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    fn scored(id: VertexId, inliers: usize, similarity: f64) -> ScoredEstimate {
        ScoredEstimate {
            candidate: LoopCandidate {
                query: VertexRef::new("q", 0),
                matched: VertexRef::new("p", id),
                similarity,
            },
            estimate: RelativePoseEstimate {
                pose: Pose::identity("p".into(), "q".into()),
                inlier_count: inliers,
                correspondences: inliers,
                covariance: Matrix6::identity(),
            },
        }
    }

    #[test]
    fn best_match_rules() {
        let list = [scored(0, 12, 0.9), scored(1, 40, 0.4), scored(2, 7, 1.0)];
        assert_eq!(select_best_match(&list).unwrap().candidate.matched.id, 1);
        let tie = [scored(0, 40, 0.5), scored(1, 40, 0.9)];
        assert_eq!(select_best_match(&tie).unwrap().candidate.matched.id, 1);
        let exact_tie = [scored(5, 40, 0.9), scored(3, 40, 0.9)];
        assert_eq!(
            select_best_match(&exact_tie).unwrap().candidate.matched.id,
            3
        );
        assert_eq!(select_best_match(&list[..1]).unwrap(), &list[0]);
        assert!(select_best_match(&[]).is_none());
    }

    proptest! {
        #[test]
        fn rigid_fit_recovers_transform(
            w in prop::array::uniform3(-1.5f64..1.5),
            t in prop::array::uniform3(-10.0f64..10.0),
            pts in prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), 3..30),
        ) {
            let iso = exp_iso(&Vector6::new(w[0], w[1], w[2], t[0], t[1], t[2]));
            let src: Vec<Point3<f64>> = pts.iter().map(|p| Point3::from(*p)).collect();
            prop_assume!(non_degenerate([&src[0], &src[1], &src[2]]) && (src[1] - src[0]).cross(&(src[2] - src[0])).norm() > 0.5);
            let dst: Vec<Point3<f64>> = src.iter().map(|p| iso * p).collect();
            let fit = rigid_fit(&src, &dst).unwrap();
            let d = iso.inverse() * fit;
            prop_assert!(d.translation.vector.norm() < 1e-9);
            prop_assert!(crate::geometry::quat_angle(&d.rotation) < 1e-9);
        }

        #[test]
        fn best_match_permutation_invariant(
            items in prop::collection::vec((0u64..5, 0usize..4, 0u8..3), 1..8),
            perm_seed in any::<u64>(),
        ) {
            let list: Vec<ScoredEstimate> = items
                .iter()
                .map(|(id, inl, s)| scored(*id, *inl, *s as f64 / 2.0))
                .collect();
            let mut shuffled = list.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
            use rand::seq::SliceRandom;
            shuffled.shuffle(&mut rng);
            prop_assert_eq!(select_best_match(&list), select_best_match(&shuffled));
        }
    }
}
