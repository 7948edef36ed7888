//! The subcommands. Each one reads its inputs, runs a library stage and
//! records everything it writes in the output manifest.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::{Path, PathBuf};

use msmap_core::change::{
    build_octree, evaluate_change_points, extract_change_clouds, observed_subset, octree_merge,
    read_octree, update_latest_map, write_octree, ChangeError, ChangeSummary, OccupancyOctree,
};
use msmap_core::elevation::{
    build_navmap, cluster_vertices_by_place, export_elevation_map, import_elevation_map,
    submap_bounds, ElevationError, LabeledGraph,
};
use msmap_core::eval::{
    assemble_cloud, evaluate_sessions, point_to_point_error, transform_cloud, EvalError,
};
use msmap_core::graph::EdgeKind;
use msmap_core::merge::{merge_sessions, MergeError};
use msmap_core::place::VertexRef;
use msmap_core::planner::{replan_after_update, write_overlay, PlanError};
use msmap_core::ply;
use msmap_core::session::{
    load_session, save_session, ResourceCache, SessionError, SessionMap, DEFAULT_CACHE_ENTRIES,
};
use msmap_core::synth::{
    change_ground_truth, generate_scenario, pose_array, GroundTruth, ScenarioSpec, World, WorldSpec,
};
use msmap_core::{FrameId, PointCloud};
use nalgebra::{Isometry3, Point3};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::manifest::{Manifest, Outputs};
use crate::{CliError, Command, EvalMode, GlobalArgs};

fn invalid<E: Display>(what: impl Display) -> impl FnOnce(E) -> CliError {
    move |e| CliError::Validation(format!("{what}: {e}"))
}

fn failed<E: Display>(what: impl Display) -> impl FnOnce(E) -> CliError {
    move |e| CliError::Runtime(format!("{what}: {e}"))
}

struct Log(bool);

impl Log {
    fn info(&self, msg: impl FnOnce() -> String) {
        if self.0 {
            eprintln!("{}", msg());
        }
    }
}

pub fn dispatch(
    cfg: &PipelineConfig,
    global: &GlobalArgs,
    cmd: Command,
) -> Result<Manifest, CliError> {
    let log = Log(global.verbose);
    let mut out = Outputs::create(&global.out)?;
    let name = match cmd {
        Command::Merge { sessions } => {
            merge(cfg, &log, &mut out, &sessions)?;
            "merge"
        }
        Command::Detect { prior, current } => {
            detect(cfg, &log, &mut out, &prior, &current)?;
            "detect"
        }
        Command::Navmap {
            latest,
            sessions,
            inter,
        } => {
            navmap(cfg, &log, &mut out, &latest, &sessions, inter.as_deref())?;
            "navmap"
        }
        Command::Plan {
            navmap,
            start,
            goal,
        } => {
            plan(cfg, &log, &mut out, &navmap, start, goal)?;
            "plan"
        }
        Command::Synth { world, scenario } => {
            synth(cfg, &log, &mut out, &world, &scenario)?;
            "synth"
        }
        Command::Eval {
            mode,
            truth,
            sessions,
            detect,
            pair,
        } => {
            eval(
                cfg,
                &log,
                &mut out,
                mode,
                &truth,
                &sessions,
                detect.as_deref(),
                pair.as_deref(),
            )?;
            "eval"
        }
    };
    out.finish(name, &cfg.hash())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(invalid(path.display()))?;
    serde_json::from_str(&text).map_err(invalid(path.display()))
}

/// Expands each path to session directories: a directory holding `graph.json`
/// is a session, otherwise its session subdirectories are taken in name order.
pub fn session_dirs(paths: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut dirs = Vec::new();
    for p in paths {
        if p.join("graph.json").is_file() {
            dirs.push(p.clone());
            continue;
        }
        let entries = std::fs::read_dir(p).map_err(invalid(p.display()))?;
        let mut subs: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|d| d.join("graph.json").is_file())
            .collect();
        if subs.is_empty() {
            return Err(CliError::Validation(format!(
                "{}: no session directories",
                p.display()
            )));
        }
        subs.sort();
        dirs.extend(subs);
    }
    Ok(dirs)
}

fn load_sessions(paths: &[PathBuf], log: &Log) -> Result<Vec<SessionMap>, CliError> {
    let cache = ResourceCache::new(DEFAULT_CACHE_ENTRIES);
    let sessions = session_dirs(paths)?
        .iter()
        .map(|d| {
            load_session(d)
                .map(|s| s.with_cache(cache.clone()))
                .map_err(invalid(d.display()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut seen = BTreeSet::new();
    for s in &sessions {
        if !seen.insert(s.session_id.clone()) {
            return Err(CliError::Validation(format!(
                "session `{}` given twice",
                s.session_id
            )));
        }
        log.info(|| format!("loaded {} ({} vertices)", s.session_id, s.graph.len()));
    }
    Ok(sessions)
}

fn write_sessions(out: &mut Outputs, sessions: &[SessionMap]) -> Result<(), CliError> {
    for s in sessions {
        let rel = format!("sessions/{}", s.session_id);
        save_session(s, &out.path(&rel)).map_err(failed(&rel))?;
        out.add_tree(&rel)?;
    }
    Ok(())
}

fn write_ply(out: &mut Outputs, rel: &str, points: &[Point3<f64>]) -> Result<(), CliError> {
    let mut buf = Vec::new();
    ply::write_ply_to(&mut buf, points).map_err(failed(rel))?;
    out.write_bytes(rel, &buf)
}

fn write_tree(out: &mut Outputs, rel: &str, t: &OccupancyOctree) -> Result<(), CliError> {
    let mut buf = Vec::new();
    write_octree(&mut buf, t).map_err(failed(rel))?;
    out.write_bytes(rel, &buf)
}

/// Serialized form of one verified inter-session loop closure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterEdgeRecord {
    pub matched: VertexRef,
    pub query: VertexRef,
    pub similarity: f64,
    pub inliers: usize,
    pub correspondences: usize,
    /// Query vertex in the matched vertex frame.
    #[serde(with = "pose_array")]
    pub pose: Isometry3<f64>,
}

#[derive(Serialize)]
struct SessionSummary {
    id: String,
    vertices: usize,
    edges: usize,
}

#[derive(Serialize)]
struct MergeReport {
    map_frame: FrameId,
    sessions: Vec<SessionSummary>,
    inter_edges: usize,
    /// Inter-session factors the robust kernel weighted below one half.
    downweighted_inter_edges: usize,
    initial_cost: f64,
    final_cost: f64,
    iterations: usize,
    termination: msmap_core::optimizer::Termination,
    final_lambda: f64,
    cost_trace: Vec<f64>,
}

fn merge_error(e: MergeError) -> CliError {
    match e {
        MergeError::Optimize(_) | MergeError::Disconnected(_) | MergeError::Place(_) => {
            CliError::Runtime(format!("merge: {e}"))
        }
        _ => CliError::Validation(format!("merge: {e}")),
    }
}

fn merge(
    cfg: &PipelineConfig,
    log: &Log,
    out: &mut Outputs,
    paths: &[PathBuf],
) -> Result<(), CliError> {
    let mut sessions = load_sessions(paths, log)?;
    let outcome = merge_sessions(&mut sessions, &cfg.merge).map_err(merge_error)?;
    let r = &outcome.report;
    log.info(|| {
        format!(
            "{} inter edges, cost {:.6e} -> {:.6e} in {} iterations",
            outcome.inter_edges.len(),
            r.initial_cost,
            r.final_cost,
            r.iterations
        )
    });
    write_sessions(out, &sessions)?;
    let edges: Vec<InterEdgeRecord> = outcome
        .inter_edges
        .iter()
        .map(|e| InterEdgeRecord {
            matched: e.matched.clone(),
            query: e.query.clone(),
            similarity: e.similarity,
            inliers: e.estimate.inlier_count,
            correspondences: e.estimate.correspondences,
            pose: e.estimate.pose.isometry(),
        })
        .collect();
    out.write_json("inter_edges.json", &edges)?;
    let report = MergeReport {
        map_frame: sessions[0].map_frame.clone(),
        sessions: sessions
            .iter()
            .map(|s| SessionSummary {
                id: s.session_id.clone(),
                vertices: s.graph.len(),
                edges: s.graph.edges.len(),
            })
            .collect(),
        inter_edges: edges.len(),
        downweighted_inter_edges: r
            .factors
            .iter()
            .filter(|f| f.kind == EdgeKind::InterLoop && f.weight < 0.5)
            .count(),
        initial_cost: r.initial_cost,
        final_cost: r.final_cost,
        iterations: r.iterations,
        termination: r.termination,
        final_lambda: r.final_lambda,
        cost_trace: r.cost_trace.clone(),
    };
    out.write_json("merge_report.json", &report)
}

fn change_error(what: &str) -> impl FnOnce(ChangeError) -> CliError + '_ {
    move |e| match e {
        ChangeError::Io(_) => CliError::Runtime(format!("{what}: {e}")),
        _ => CliError::Validation(format!("{what}: {e}")),
    }
}

/// One tree from several sessions of the same epoch: their union, later
/// sessions winning where they disagree.
fn session_octree(
    cfg: &PipelineConfig,
    sessions: &[SessionMap],
) -> Result<OccupancyOctree, CliError> {
    let mut tree: Option<OccupancyOctree> = None;
    for s in sessions {
        let t = build_octree(s, cfg.octree.resolution, cfg.octree.max_range)
            .map_err(change_error(&s.session_id))?;
        tree = Some(match tree {
            None => t,
            Some(acc) => octree_merge(&acc, &t).map_err(change_error(&s.session_id))?,
        });
    }
    tree.ok_or_else(|| CliError::Validation("no sessions".into()))
}

fn detect(
    cfg: &PipelineConfig,
    log: &Log,
    out: &mut Outputs,
    prior: &[PathBuf],
    current: &[PathBuf],
) -> Result<(), CliError> {
    let prior_tree = match prior {
        [p] if p.is_file() => {
            let mut f = std::fs::File::open(p).map_err(invalid(p.display()))?;
            read_octree(&mut f).map_err(invalid(p.display()))?
        }
        _ => {
            // Successive prior sessions are folded through the update rule.
            let sessions = load_sessions(prior, log)?;
            let mut latest: Option<OccupancyOctree> = None;
            for s in &sessions {
                let t = session_octree(cfg, std::slice::from_ref(s))?;
                latest = Some(match latest {
                    None => t,
                    Some(l) => {
                        update_latest_map(&l, &t)
                            .map_err(change_error(&s.session_id))?
                            .0
                    }
                });
            }
            latest.ok_or_else(|| CliError::Validation("--prior: no sessions".into()))?
        }
    };
    let current_tree = session_octree(cfg, &load_sessions(current, log)?)?;
    if prior_tree.frame != current_tree.frame {
        return Err(CliError::Validation(format!(
            "prior is in frame `{}` but current is in `{}`; merge the sessions first",
            prior_tree.frame, current_tree.frame
        )));
    }
    let (latest, changes) =
        update_latest_map(&prior_tree, &current_tree).map_err(change_error("detect"))?;
    log.info(|| {
        format!(
            "removed {} voxels, added {}",
            changes.removed.occupied_count(),
            changes.added.occupied_count()
        )
    });
    write_tree(out, "prior.msot", &prior_tree)?;
    write_tree(out, "current.msot", &current_tree)?;
    write_tree(out, "latest.msot", &latest)?;
    let (removed, added) = extract_change_clouds(&changes);
    write_ply(out, "removed.ply", &removed.points)?;
    write_ply(out, "added.ply", &added.points)?;
    out.write_json(
        "change_summary.json",
        &ChangeSummary::new(&prior_tree, &current_tree, &changes, &latest),
    )
}

#[derive(Serialize)]
struct ClusterRecord {
    label: String,
    vertices: Vec<VertexRef>,
    bounds_min: Option<[f64; 3]>,
    bounds_max: Option<[f64; 3]>,
}

fn navmap(
    cfg: &PipelineConfig,
    log: &Log,
    out: &mut Outputs,
    latest: &Path,
    paths: &[PathBuf],
    inter: Option<&Path>,
) -> Result<(), CliError> {
    let mut f = std::fs::File::open(latest).map_err(invalid(latest.display()))?;
    let tree = read_octree(&mut f).map_err(invalid(latest.display()))?;
    let sessions = load_sessions(paths, log)?;
    for s in &sessions {
        if s.map_frame != tree.frame {
            return Err(CliError::Validation(format!(
                "session `{}` is in frame `{}` but the map is in `{}`",
                s.session_id, s.map_frame, tree.frame
            )));
        }
    }
    let pairs: Vec<(VertexRef, VertexRef)> = match inter {
        None => Vec::new(),
        Some(p) => read_json::<Vec<InterEdgeRecord>>(p)?
            .into_iter()
            .map(|e| (e.matched, e.query))
            .collect(),
    };
    let graph = LabeledGraph::from_sessions(&sessions, &pairs);
    let mut bound_err: Option<SessionError> = None;
    let clusters = cluster_vertices_by_place(&graph, |v| {
        let s = sessions.iter().find(|s| s.session_id == v.session)?;
        submap_bounds(s, v.id).unwrap_or_else(|e| {
            bound_err.get_or_insert(e);
            None
        })
    });
    if let Some(e) = bound_err {
        return Err(CliError::Validation(format!("submap: {e}")));
    }
    log.info(|| format!("{} place clusters", clusters.len()));
    let cloud = tree.occupied_cloud();
    let (map, _) = build_navmap(&cloud, &clusters, &cfg.navmap).map_err(|e| match e {
        ElevationError::Session(_) => CliError::Validation(format!("navmap: {e}")),
        _ => CliError::Runtime(format!("navmap: {e}")),
    })?;
    log.info(|| {
        format!(
            "{}x{} cells, {} defined",
            map.width,
            map.height,
            map.defined_cells()
        )
    });
    let written =
        export_elevation_map(&map, out.root(), "navmap").map_err(failed("navmap export"))?;
    for p in written {
        out.add(
            p.strip_prefix(out.root())
                .expect("written under the output root"),
        );
    }
    let records: Vec<ClusterRecord> = clusters
        .into_iter()
        .map(|c| ClusterRecord {
            label: c.label,
            vertices: c.vertices,
            bounds_min: c.bounds.map(|b| [b.min.x, b.min.y, b.min.z]),
            bounds_max: c.bounds.map(|b| [b.max.x, b.max.y, b.max.z]),
        })
        .collect();
    out.write_json("clusters.json", &records)
}

#[derive(Serialize)]
struct PathReport {
    start: [f64; 2],
    goal: [f64; 2],
    waypoints: Vec<[f64; 2]>,
    total_length: f64,
    roadmap_nodes: usize,
    roadmap_edges: usize,
}

fn plan(
    cfg: &PipelineConfig,
    log: &Log,
    out: &mut Outputs,
    navmap: &Path,
    start: [f64; 2],
    goal: [f64; 2],
) -> Result<(), CliError> {
    let map = import_elevation_map(navmap).map_err(invalid(navmap.display()))?;
    let (rm, path) = replan_after_update(&map, start, goal, &cfg.planner).map_err(|e| match e {
        PlanError::InvalidEndpoint { .. } => CliError::Validation(format!("plan: {e}")),
        PlanError::Unreachable => CliError::Runtime(format!("plan: {e}")),
    })?;
    log.info(|| {
        format!(
            "{} roadmap nodes, path length {:.3} m",
            rm.nodes.len(),
            path.total_length
        )
    });
    let mut buf = Vec::new();
    write_overlay(&mut buf, &map, Some(&rm), Some(&path)).map_err(failed("overlay"))?;
    out.write_bytes("overlay.ppm", &buf)?;
    out.write_json(
        "path.json",
        &PathReport {
            start,
            goal,
            waypoints: path.waypoints,
            total_length: path.total_length,
            roadmap_nodes: rm.nodes.len(),
            roadmap_edges: rm.edges.len(),
        },
    )
}

fn synth(
    cfg: &PipelineConfig,
    log: &Log,
    out: &mut Outputs,
    world: &Path,
    scenario: &Path,
) -> Result<(), CliError> {
    let spec: WorldSpec = read_json(world)?;
    let scenario: ScenarioSpec = read_json(scenario)?;
    let w = World::new(spec).map_err(invalid("world"))?;
    let generated =
        generate_scenario(&w, &scenario, cfg.generator_seed()).map_err(invalid("scenario"))?;
    let mut epochs = BTreeSet::new();
    for g in &generated {
        log.info(|| {
            format!(
                "{}: {} keyframes in epoch {}",
                g.session.session_id,
                g.session.graph.len(),
                g.truth.epoch
            )
        });
        epochs.insert(g.truth.epoch);
        out.write_json(&format!("truth/{}.json", g.session.session_id), &g.truth)?;
    }
    let sessions: Vec<SessionMap> = generated.iter().map(|g| g.session.clone()).collect();
    write_sessions(out, &sessions)?;
    let spacing = cfg.synth.surface_spacing;
    for e in epochs {
        let c = w.surface_cloud(e, spacing).map_err(failed("surface"))?;
        write_ply(out, &format!("truth/surface_e{e}.ply"), &c.points)?;
    }
    for pair in generated.windows(2) {
        let (a, b) = (&pair[0].truth, &pair[1].truth);
        let (changed, stat) =
            change_ground_truth(&w, a.epoch, b.epoch, spacing).map_err(failed("change truth"))?;
        let stem = format!("truth/change_{}_{}", a.session_id, b.session_id);
        write_ply(out, &format!("{stem}_changed.ply"), &changed.points)?;
        write_ply(out, &format!("{stem}_static.ply"), &stat.points)?;
    }
    Ok(())
}

fn truth_dir(p: &Path) -> PathBuf {
    let sub = p.join("truth");
    if sub.is_dir() {
        sub
    } else {
        p.to_owned()
    }
}

fn load_truth(dir: &Path, session: &str) -> Result<GroundTruth, CliError> {
    read_json(&dir.join(format!("{session}.json")))
}

fn read_cloud(path: &Path, frame: FrameId) -> Result<PointCloud, CliError> {
    let points = ply::read_ply(path).map_err(invalid(path.display()))?;
    Ok(PointCloud::new(points, frame))
}

/// `T_{world,map}` of a merged map frame `<session>/map`.
fn world_from_frame(dir: &Path, frame: &FrameId) -> Result<Isometry3<f64>, CliError> {
    let anchor = frame.as_str().strip_suffix("/map").ok_or_else(|| {
        CliError::Validation(format!("frame `{frame}` is not a session map frame"))
    })?;
    Ok(load_truth(dir, anchor)?.world_from_map)
}

fn eval_error(e: EvalError) -> CliError {
    CliError::Validation(format!("eval: {e}"))
}

#[derive(Serialize)]
struct MapEvalEntry {
    session: String,
    epoch: usize,
    stats: msmap_core::eval::PointErrorStats,
}

#[allow(clippy::too_many_arguments)]
fn eval(
    cfg: &PipelineConfig,
    log: &Log,
    out: &mut Outputs,
    mode: EvalMode,
    truth: &Path,
    sessions: &[PathBuf],
    detect: Option<&Path>,
    pair: Option<&str>,
) -> Result<(), CliError> {
    let dir = truth_dir(truth);
    let file = format!("eval_{}.json", mode.name());
    match mode {
        EvalMode::Traj => {
            if sessions.is_empty() {
                return Err(CliError::Validation("--mode traj needs --sessions".into()));
            }
            let sessions = load_sessions(sessions, log)?;
            let truths = sessions
                .iter()
                .map(|s| load_truth(&dir, &s.session_id))
                .collect::<Result<Vec<_>, _>>()?;
            let m =
                evaluate_sessions(&sessions, &truths, cfg.eval.rpe_delta).map_err(eval_error)?;
            log.info(|| format!("ATE rmse {:.4} m over {} poses", m.ate_rmse, m.poses));
            out.write_json(&file, &m)
        }
        EvalMode::Map => {
            if sessions.is_empty() {
                return Err(CliError::Validation("--mode map needs --sessions".into()));
            }
            let sessions = load_sessions(sessions, log)?;
            let voxel = (cfg.eval.map_voxel > 0.0).then_some(cfg.eval.map_voxel);
            let world = FrameId::new("world");
            let mut entries = Vec::new();
            for s in &sessions {
                let to_world = world_from_frame(&dir, &s.map_frame)?;
                let epoch = load_truth(&dir, &s.session_id)?.epoch;
                let cloud = assemble_cloud(std::slice::from_ref(s), voxel).map_err(eval_error)?;
                let cloud = transform_cloud(&to_world, &cloud, world.clone());
                let gt = read_cloud(&dir.join(format!("surface_e{epoch}.ply")), world.clone())?;
                let stats = point_to_point_error(&cloud, &gt).map_err(eval_error)?;
                log.info(|| {
                    format!(
                        "{}: mean {:.4} m over {} points",
                        s.session_id, stats.mean, stats.count
                    )
                });
                entries.push(MapEvalEntry {
                    session: s.session_id.clone(),
                    epoch,
                    stats,
                });
            }
            out.write_json(&file, &entries)
        }
        EvalMode::Change => {
            let det = detect
                .ok_or_else(|| CliError::Validation("--mode change needs --detect".into()))?;
            let pair =
                pair.ok_or_else(|| CliError::Validation("--mode change needs --pair a,b".into()))?;
            let (a, b) = pair.split_once(',').ok_or_else(|| {
                CliError::Validation(format!("--pair expects a,b but got `{pair}`"))
            })?;
            let load = |name: &str| -> Result<OccupancyOctree, CliError> {
                let p = det.join(name);
                let mut f = std::fs::File::open(&p).map_err(invalid(p.display()))?;
                read_octree(&mut f).map_err(invalid(p.display()))
            };
            let (prior, current) = (load("prior.msot")?, load("current.msot")?);
            let map_from_world = world_from_frame(&dir, &prior.frame)?.inverse();
            let stem = dir.join(format!("change_{a}_{b}"));
            let frame = prior.frame.clone();
            let gt = |suffix: &str| -> Result<PointCloud, CliError> {
                let c = read_cloud(
                    &PathBuf::from(format!("{}_{suffix}.ply", stem.display())),
                    FrameId::new("world"),
                )?;
                Ok(transform_cloud(&map_from_world, &c, frame.clone()))
            };
            let (changed, stat) = (gt("changed")?, gt("static")?);
            let observed =
                observed_subset(&changed, &prior, &current).map_err(change_error("eval"))?;
            let mut pred = read_cloud(&det.join("removed.ply"), frame.clone())?.points;
            pred.extend(read_cloud(&det.join("added.ply"), frame.clone())?.points);
            let m = evaluate_change_points(&pred, &observed.points, &stat.points, cfg.eval.tau);
            log.info(|| format!("precision {:?} recall {:?}", m.precision, m.recall));
            out.write_json(&file, &m)
        }
    }
}
