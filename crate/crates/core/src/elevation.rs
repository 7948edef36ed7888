//! Place clustering, dangling-point removal, elevation maps and traversability.

use std::collections::BTreeMap;
use std::io::{self, Write};
use std::path::Path;

use nalgebra::Point3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Aabb, PointCloud};
use crate::place::VertexRef;
use crate::session::{ResourceKind, SessionError, SessionMap};
use crate::util::UnionFind;

/// Label given to vertices without a place label.
pub const UNLABELED: &str = "__unlabeled__";

#[derive(Debug, Error)]
pub enum ElevationError {
    #[error("resolution mismatch: {0} vs {1}")]
    Resolution(f64, f64),
    #[error("{0} must be strictly positive, got {1}")]
    NonPositive(&'static str, f64),
    #[error("dangling-filter resolutions must be non-empty and strictly decreasing")]
    BadResolutions,
    #[error("map origin ({0}, {1}) is not on the cell lattice")]
    Unaligned(f64, f64),
    #[error("raster: {0}")]
    Format(String),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Vertices of all sessions with their labels and adjacency (intra-session
/// edges plus inter-session pairs).
#[derive(Clone, Debug, Default)]
pub struct LabeledGraph {
    pub labels: BTreeMap<VertexRef, String>,
    pub edges: Vec<(VertexRef, VertexRef)>,
}

impl LabeledGraph {
    pub fn from_sessions(sessions: &[SessionMap], inter: &[(VertexRef, VertexRef)]) -> Self {
        let mut g = Self::default();
        for s in sessions {
            for v in s.graph.vertices.values() {
                g.labels
                    .insert(VertexRef::new(&s.session_id, v.id), v.place_label.clone());
            }
            for e in &s.graph.edges {
                g.edges.push((
                    VertexRef::new(&s.session_id, e.from),
                    VertexRef::new(&s.session_id, e.to),
                ));
            }
        }
        g.edges.extend(inter.iter().cloned());
        g
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlaceCluster {
    pub label: String,
    pub vertices: Vec<VertexRef>,
    /// Union of the member bounding volumes; `None` if no member has one.
    pub bounds: Option<Aabb<f64>>,
}

/// Connected components of the adjacency restricted to equal labels.
/// `bounds_of` supplies each vertex's volume in the common frame.
pub fn cluster_vertices_by_place<F>(g: &LabeledGraph, mut bounds_of: F) -> Vec<PlaceCluster>
where
    F: FnMut(&VertexRef) -> Option<Aabb<f64>>,
{
    let keys: Vec<&VertexRef> = g.labels.keys().collect();
    let index: BTreeMap<&VertexRef, usize> =
        keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    let label = |v: &VertexRef| -> &str {
        match g.labels[v].as_str() {
            "" => UNLABELED,
            l => l,
        }
    };
    let mut uf = UnionFind::new(keys.len());
    for (a, b) in &g.edges {
        if let (Some(&i), Some(&j)) = (index.get(a), index.get(b)) {
            if label(a) == label(b) {
                uf.union(i, j);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..keys.len() {
        groups.entry(uf.find(i)).or_default().push(i);
    }
    let mut out: Vec<PlaceCluster> = groups
        .into_values()
        .map(|members| {
            let vertices: Vec<VertexRef> = members.iter().map(|&i| keys[i].clone()).collect();
            let bounds = vertices
                .iter()
                .filter_map(&mut bounds_of)
                .reduce(|a, b| a.union(&b));
            PlaceCluster {
                label: label(&vertices[0]).to_string(),
                vertices,
                bounds,
            }
        })
        .collect();
    out.sort_by(|a, b| a.vertices[0].cmp(&b.vertices[0]));
    out
}

/// Submap bounding box of a vertex in its session's map frame.
pub fn submap_bounds(s: &SessionMap, id: u64) -> Result<Option<Aabb<f64>>, SessionError> {
    if !s.has_resource(id, ResourceKind::Submap) {
        return Ok(None);
    }
    let cloud = s.submap(id)?;
    let pose = s.graph.vertices[&id].pose.isometry();
    Ok(cloud.aabb().map(|b| b.transformed(&pose)))
}

/// Points whose ground-plane position lies in the footprint of `b`. Heights are
/// not cut: the floor under a submap usually sits below its lowest point.
pub fn crop(cloud: &PointCloud, b: &Aabb<f64>) -> PointCloud {
    let inside =
        |p: &&Point3<f64>| p.x >= b.min.x && p.x <= b.max.x && p.y >= b.min.y && p.y <= b.max.y;
    PointCloud::new(
        cloud.points.iter().filter(inside).copied().collect(),
        cloud.frame.clone(),
    )
}

fn cell_of(p: &Point3<f64>, res: f64) -> (i64, i64) {
    ((p.x / res).floor() as i64, (p.y / res).floor() as i64)
}

fn lowest_cluster_pass(points: &[Point3<f64>], res: f64, gap: f64) -> Vec<Point3<f64>> {
    let mut cells: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        cells.entry(cell_of(p, res)).or_default().push(i);
    }
    let mut keep = vec![false; points.len()];
    for idx in cells.values_mut() {
        idx.sort_by(|&a, &b| points[a].z.total_cmp(&points[b].z));
        keep[idx[0]] = true;
        for w in idx.windows(2) {
            if points[w[1]].z - points[w[0]].z > gap {
                break;
            }
            keep[w[1]] = true;
        }
    }
    points
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(p, _)| *p)
        .collect()
}

/// Keeps, per x-y cell, only the lowest height cluster (points separated by
/// more than `gap` start a new cluster), sweeping from coarse to fine cells.
/// The sweep repeats until nothing changes, which makes the filter idempotent.
pub fn remove_dangling_points(
    cloud: &PointCloud,
    resolutions: &[f64],
    gap: f64,
) -> Result<PointCloud, ElevationError> {
    if resolutions.is_empty()
        || resolutions.iter().any(|r| !(*r > 0.0))
        || resolutions.windows(2).any(|w| w[1] >= w[0])
    {
        return Err(ElevationError::BadResolutions);
    }
    if !(gap > 0.0) {
        return Err(ElevationError::NonPositive("gap", gap));
    }
    let mut pts = cloud.points.clone();
    loop {
        let before = pts.len();
        for &r in resolutions {
            pts = lowest_cluster_pass(&pts, r, gap);
        }
        if pts.len() == before {
            break;
        }
    }
    Ok(PointCloud::new(pts, cloud.frame.clone()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraversabilityParams {
    /// Neighbourhood radius `s*`.
    pub stride: f64,
    /// Maximum step height `h*`.
    pub step_height: f64,
    /// Treat no-data or off-map neighbours as untraversable.
    pub strict: bool,
}

impl Default for TraversabilityParams {
    fn default() -> Self {
        Self {
            stride: 0.4,
            step_height: 0.15,
            strict: false,
        }
    }
}

impl TraversabilityParams {
    pub fn validate(&self) -> Result<(), ElevationError> {
        if !(self.stride > 0.0) {
            return Err(ElevationError::NonPositive("stride", self.stride));
        }
        if !(self.step_height > 0.0) {
            return Err(ElevationError::NonPositive("step_height", self.step_height));
        }
        Ok(())
    }
}

/// Height grid with per-cell traversability. Cells are row-major with `x`
/// along columns; `NaN` marks no data.
#[derive(Clone, Debug, PartialEq)]
pub struct ElevationMap {
    /// World coordinates of the lower-left corner, a multiple of `resolution`.
    pub origin: [f64; 2],
    pub resolution: f64,
    pub width: usize,
    pub height: usize,
    pub heights: Vec<f64>,
    pub traversability: Vec<f64>,
    /// Points that contributed to each cell.
    pub counts: Vec<u32>,
    pub label: String,
}

impl ElevationMap {
    pub fn empty(resolution: f64, label: impl Into<String>) -> Self {
        Self {
            origin: [0.0, 0.0],
            resolution,
            width: 0,
            height: 0,
            heights: Vec::new(),
            traversability: Vec::new(),
            counts: Vec::new(),
            label: label.into(),
        }
    }

    /// Lattice index of the first column and row.
    pub fn lattice_origin(&self) -> (i64, i64) {
        (
            (self.origin[0] / self.resolution).round() as i64,
            (self.origin[1] / self.resolution).round() as i64,
        )
    }

    pub fn index(&self, col: usize, row: usize) -> usize {
        row * self.width + col
    }

    /// Cell containing a world point, if inside the grid.
    pub fn cell_at(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let c = ((x - self.origin[0]) / self.resolution).floor();
        let r = ((y - self.origin[1]) / self.resolution).floor();
        (c >= 0.0 && r >= 0.0 && (c as usize) < self.width && (r as usize) < self.height)
            .then_some((c as usize, r as usize))
    }

    pub fn cell_center(&self, col: usize, row: usize) -> [f64; 2] {
        [
            self.origin[0] + (col as f64 + 0.5) * self.resolution,
            self.origin[1] + (row as f64 + 0.5) * self.resolution,
        ]
    }

    pub fn height_at(&self, col: usize, row: usize) -> Option<f64> {
        let h = self.heights[self.index(col, row)];
        (!h.is_nan()).then_some(h)
    }

    pub fn traversability_at(&self, col: usize, row: usize) -> Option<f64> {
        let t = self.traversability[self.index(col, row)];
        (!t.is_nan()).then_some(t)
    }

    pub fn defined_cells(&self) -> usize {
        self.heights.iter().filter(|h| !h.is_nan()).count()
    }
}

/// Mean point height per cell, on a lattice-aligned grid covering the cloud.
pub fn build_elevation_map(
    cloud: &PointCloud,
    resolution: f64,
    label: impl Into<String>,
) -> Result<ElevationMap, ElevationError> {
    if !(resolution > 0.0) {
        return Err(ElevationError::NonPositive("resolution", resolution));
    }
    let mut m = ElevationMap::empty(resolution, label);
    if cloud.is_empty() {
        return Ok(m);
    }
    let cells: Vec<(i64, i64)> = cloud
        .points
        .iter()
        .map(|p| cell_of(p, resolution))
        .collect();
    let (c0, r0) = cells
        .iter()
        .fold((i64::MAX, i64::MAX), |a, c| (a.0.min(c.0), a.1.min(c.1)));
    let (c1, r1) = cells
        .iter()
        .fold((i64::MIN, i64::MIN), |a, c| (a.0.max(c.0), a.1.max(c.1)));
    m.origin = [c0 as f64 * resolution, r0 as f64 * resolution];
    m.width = (c1 - c0 + 1) as usize;
    m.height = (r1 - r0 + 1) as usize;
    let n = m.width * m.height;
    let mut sums = vec![0.0; n];
    m.counts = vec![0; n];
    for (p, (c, r)) in cloud.points.iter().zip(&cells) {
        let i = m.index((c - c0) as usize, (r - r0) as usize);
        sums[i] += p.z;
        m.counts[i] += 1;
    }
    m.heights = sums
        .iter()
        .zip(&m.counts)
        .map(|(s, &k)| if k == 0 { f64::NAN } else { s / k as f64 })
        .collect();
    m.traversability = vec![f64::NAN; n];
    Ok(m)
}

/// Offsets of the cells whose centres lie within `radius` of a cell centre.
fn disc_offsets(radius: f64, res: f64) -> Vec<(i64, i64)> {
    let k = (radius / res).floor() as i64;
    let r2 = (radius / res) * (radius / res) + 1e-9;
    let mut out = Vec::new();
    for dr in -k..=k {
        for dc in -k..=k {
            if ((dc * dc + dr * dr) as f64) <= r2 {
                out.push((dc, dr));
            }
        }
    }
    out
}

/// `t_i = 1 − min(h_i^max / h*, 1)`, with `h_i^max` the largest height
/// difference to any defined cell within `s*`.
pub fn compute_traversability(
    m: &ElevationMap,
    p: &TraversabilityParams,
) -> Result<ElevationMap, ElevationError> {
    p.validate()?;
    let offsets = disc_offsets(p.stride, m.resolution);
    let (w, h) = (m.width as i64, m.height as i64);
    let mut out = m.clone();
    out.traversability = (0..m.height)
        .into_par_iter()
        .flat_map_iter(|row| {
            let offsets = &offsets;
            (0..m.width).map(move |col| {
                let Some(hi) = m.height_at(col, row) else {
                    return f64::NAN;
                };
                let mut hmax: f64 = 0.0;
                for &(dc, dr) in offsets {
                    let (c, r) = (col as i64 + dc, row as i64 + dr);
                    let hj = if c < 0 || r < 0 || c >= w || r >= h {
                        None
                    } else {
                        m.height_at(c as usize, r as usize)
                    };
                    match hj {
                        Some(hj) => hmax = hmax.max((hj - hi).abs()),
                        None if p.strict => return 0.0,
                        None => {}
                    }
                }
                1.0 - (hmax / p.step_height).min(1.0)
            })
        })
        .collect();
    Ok(out)
}

/// Union of maps on a shared lattice. Where maps overlap the cell with more
/// supporting points wins; equal counts average their heights.
/// Traversability is recomputed on the result.
pub fn merge_elevation_maps(
    maps: &[ElevationMap],
    params: &TraversabilityParams,
    label: impl Into<String>,
) -> Result<ElevationMap, ElevationError> {
    let label = label.into();
    let maps: Vec<&ElevationMap> = maps.iter().filter(|m| m.width * m.height > 0).collect();
    let Some(first) = maps.first() else {
        return Ok(ElevationMap::empty(0.05, label));
    };
    let res = first.resolution;
    for m in &maps {
        if m.resolution != res {
            return Err(ElevationError::Resolution(res, m.resolution));
        }
        let (lc, lr) = m.lattice_origin();
        if ((lc as f64 * res) - m.origin[0]).abs() > 1e-9 * res.max(m.origin[0].abs())
            || ((lr as f64 * res) - m.origin[1]).abs() > 1e-9 * res.max(m.origin[1].abs())
        {
            return Err(ElevationError::Unaligned(m.origin[0], m.origin[1]));
        }
    }
    let (mut c0, mut r0, mut c1, mut r1) = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
    for m in &maps {
        let (lc, lr) = m.lattice_origin();
        c0 = c0.min(lc);
        r0 = r0.min(lr);
        c1 = c1.max(lc + m.width as i64 - 1);
        r1 = r1.max(lr + m.height as i64 - 1);
    }
    let mut out = ElevationMap::empty(res, label);
    out.origin = [c0 as f64 * res, r0 as f64 * res];
    out.width = (c1 - c0 + 1) as usize;
    out.height = (r1 - r0 + 1) as usize;
    let n = out.width * out.height;
    out.heights = vec![f64::NAN; n];
    out.counts = vec![0; n];
    let mut tied = vec![0u32; n];
    for m in &maps {
        let (lc, lr) = m.lattice_origin();
        for row in 0..m.height {
            for col in 0..m.width {
                let Some(hv) = m.height_at(col, row) else {
                    continue;
                };
                let k = m.counts[m.index(col, row)];
                let i = out.index((lc - c0) as usize + col, (lr - r0) as usize + row);
                if out.heights[i].is_nan() || k > out.counts[i] {
                    out.heights[i] = hv;
                    out.counts[i] = k;
                    tied[i] = 1;
                } else if k == out.counts[i] {
                    // running mean over the maps tied at the maximum count
                    tied[i] += 1;
                    out.heights[i] += (hv - out.heights[i]) / tied[i] as f64;
                }
            }
        }
    }
    out.traversability = vec![f64::NAN; n];
    compute_traversability(&out, params)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NavmapConfig {
    pub resolution: f64,
    pub filter_resolutions: [f64; 3],
    pub gap: f64,
    pub traversability: TraversabilityParams,
}

impl Default for NavmapConfig {
    fn default() -> Self {
        Self {
            resolution: 0.05,
            filter_resolutions: [0.8, 0.4, 0.2],
            gap: 0.3,
            traversability: TraversabilityParams::default(),
        }
    }
}

/// Per-cluster elevation maps cut from `cloud`, merged into one navigation map.
pub fn build_navmap(
    cloud: &PointCloud,
    clusters: &[PlaceCluster],
    cfg: &NavmapConfig,
) -> Result<(ElevationMap, Vec<ElevationMap>), ElevationError> {
    let parts: Vec<Result<ElevationMap, ElevationError>> = clusters
        .par_iter()
        .filter_map(|c| c.bounds.as_ref().map(|b| (c, b)))
        .map(|(c, b)| {
            let local = crop(cloud, b);
            let filtered = remove_dangling_points(&local, &cfg.filter_resolutions, cfg.gap)?;
            let m = build_elevation_map(&filtered, cfg.resolution, c.label.clone())?;
            compute_traversability(&m, &cfg.traversability)
        })
        .collect();
    let parts = parts.into_iter().collect::<Result<Vec<_>, _>>()?;
    let merged = merge_elevation_maps(&parts, &cfg.traversability, "merged")?;
    Ok((merged, parts))
}

/// Metadata written next to the two rasters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RasterMeta {
    pub origin: [f64; 2],
    pub resolution: f64,
    pub width: usize,
    pub height: usize,
    pub label: String,
    /// Height of grey level 1; level 0 is no data.
    pub height_min: f64,
    /// Height of grey level 65535.
    pub height_max: f64,
    pub heights_file: String,
    pub traversability_file: String,
}

fn write_pgm16<W: Write>(w: &mut W, width: usize, height: usize, v: &[u16]) -> io::Result<()> {
    write!(w, "P5\n{width} {height}\n65535\n")?;
    // Rows top to bottom, i.e. largest y first.
    for row in (0..height).rev() {
        for col in 0..width {
            w.write_all(&v[row * width + col].to_be_bytes())?;
        }
    }
    Ok(())
}

fn read_pgm16(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>), ElevationError> {
    let bad = |m: &str| ElevationError::Format(m.to_string());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "65535" {
        return Err(bad("expected a 16-bit binary grey map"));
    }
    let width: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let height: usize = fields[2].parse().map_err(|_| bad("height"))?;
    let data = bytes.get(pos..).ok_or_else(|| bad("truncated data"))?;
    if data.len() != width * height * 2 {
        return Err(bad("pixel count does not match header"));
    }
    let mut v = vec![0u16; width * height];
    for (k, px) in data.chunks_exact(2).enumerate() {
        let (row, col) = (height - 1 - k / width, k % width);
        v[row * width + col] = u16::from_be_bytes([px[0], px[1]]);
    }
    Ok((width, height, v))
}

/// Traversability is stored as `1 + round(t · 65534)`, so `t = 0.5` maps
/// back exactly.
fn encode_t(t: f64) -> u16 {
    if t.is_nan() {
        0
    } else {
        1 + (t.clamp(0.0, 1.0) * 65534.0).round() as u16
    }
}

fn decode_t(v: u16) -> f64 {
    if v == 0 {
        f64::NAN
    } else {
        (v - 1) as f64 / 65534.0
    }
}

/// Writes `<stem>_height.pgm`, `<stem>_traversability.pgm` and `<stem>.json`
/// into `dir`; returns the three paths.
pub fn export_elevation_map(
    m: &ElevationMap,
    dir: &Path,
    stem: &str,
) -> Result<[std::path::PathBuf; 3], ElevationError> {
    let defined = m.heights.iter().copied().filter(|h| !h.is_nan());
    let (lo, hi) = defined.fold((f64::INFINITY, f64::NEG_INFINITY), |a, h| {
        (a.0.min(h), a.1.max(h))
    });
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 0.0) };
    let span = hi - lo;
    let hv: Vec<u16> = m
        .heights
        .iter()
        .map(|h| {
            if h.is_nan() {
                0
            } else if span == 0.0 {
                1
            } else {
                1 + ((h - lo) / span * 65534.0).round() as u16
            }
        })
        .collect();
    let tv: Vec<u16> = m.traversability.iter().map(|t| encode_t(*t)).collect();
    let hp = dir.join(format!("{stem}_height.pgm"));
    let tp = dir.join(format!("{stem}_traversability.pgm"));
    let mp = dir.join(format!("{stem}.json"));
    for (path, data) in [(&hp, &hv), (&tp, &tv)] {
        let mut w = io::BufWriter::new(std::fs::File::create(path)?);
        write_pgm16(&mut w, m.width, m.height, data)?;
        w.flush()?;
    }
    let meta = RasterMeta {
        origin: m.origin,
        resolution: m.resolution,
        width: m.width,
        height: m.height,
        label: m.label.clone(),
        height_min: lo,
        height_max: hi,
        heights_file: file_name(&hp),
        traversability_file: file_name(&tp),
    };
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    std::fs::write(&mp, text)?;
    Ok([hp, tp, mp])
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Reads a map written by [`export_elevation_map`] from its metadata file.
/// Heights come back quantized to the 16-bit range; no-data and
/// traversability thresholds at multiples of 1/65534 are exact.
pub fn import_elevation_map(meta_path: &Path) -> Result<ElevationMap, ElevationError> {
    let meta: RasterMeta = serde_json::from_str(&std::fs::read_to_string(meta_path)?)?;
    let dir = meta_path.parent().unwrap_or(Path::new("."));
    let (hw, hh, hv) = read_pgm16(&std::fs::read(dir.join(&meta.heights_file))?)?;
    let (tw, th, tv) = read_pgm16(&std::fs::read(dir.join(&meta.traversability_file))?)?;
    if (hw, hh) != (meta.width, meta.height) || (tw, th) != (meta.width, meta.height) {
        return Err(ElevationError::Format(
            "raster size differs from metadata".into(),
        ));
    }
    if !(meta.resolution > 0.0) {
        return Err(ElevationError::NonPositive("resolution", meta.resolution));
    }
    let span = meta.height_max - meta.height_min;
    let heights = hv
        .iter()
        .map(|&v| match v {
            0 => f64::NAN,
            v => meta.height_min + (v - 1) as f64 / 65534.0 * span,
        })
        .collect::<Vec<_>>();
    let counts = heights
        .iter()
        .map(|h: &f64| u32::from(!h.is_nan()))
        .collect();
    Ok(ElevationMap {
        origin: meta.origin,
        resolution: meta.resolution,
        width: meta.width,
        height: meta.height,
        heights,
        traversability: tv.into_iter().map(decode_t).collect(),
        counts,
        label: meta.label,
    })
}
