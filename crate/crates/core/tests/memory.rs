//! Peak heap usage while walking and merging on-disk sessions is bounded by the
//! resource cache budget, not by the total size of the submaps.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};

use msmap_core::merge::{merge_sessions, MergeConfig};
use msmap_core::session::{load_session, save_session, ResourceCache, ResourceKind};
use msmap_core::synth::{
    generate_scenario, ScenarioSpec, SessionPlan, SpaceSpec, TrajectorySpec, World, WorldSpec,
};

struct Counting;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

fn grew(n: usize) {
    let now = CURRENT.fetch_add(n, Ordering::SeqCst) + n;
    PEAK.fetch_max(now, Ordering::SeqCst);
}

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, l: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(l) };
        if !p.is_null() {
            grew(l.size());
        }
        p
    }

    unsafe fn dealloc(&self, p: *mut u8, l: Layout) {
        unsafe { System.dealloc(p, l) };
        CURRENT.fetch_sub(l.size(), Ordering::SeqCst);
    }

    unsafe fn realloc(&self, p: *mut u8, l: Layout, new_size: usize) -> *mut u8 {
        let q = unsafe { System.realloc(p, l, new_size) };
        if !q.is_null() {
            CURRENT.fetch_sub(l.size(), Ordering::SeqCst);
            grew(new_size);
        }
        q
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

/// Heap growth above the level at the start of `f`.
fn peak_growth<R>(f: impl FnOnce() -> R) -> (R, usize) {
    let base = CURRENT.load(Ordering::SeqCst);
    PEAK.store(base, Ordering::SeqCst);
    let r = f();
    (r, PEAK.load(Ordering::SeqCst) - base)
}

#[test]
fn cache_budget_bounds_peak_memory() {
    let world = World::new(WorldSpec {
        name: "room".into(),
        spaces: vec![SpaceSpec {
            label: "room".into(),
            min: [0.0, 0.0, 0.0],
            max: [6.0, 4.0, 2.5],
        }],
        static_props: vec![],
        movable_props: vec![],
        epochs: 1,
        landmarks: Default::default(),
        surface_offset: 0.001,
    })
    .unwrap();
    let mut t = TrajectorySpec::new(vec![
        [1.0, 0.8],
        [5.0, 0.8],
        [5.0, 3.2],
        [1.0, 3.2],
        [1.0, 0.8],
    ]);
    t.sensor.hfov_deg = 360.0;
    let scenario = ScenarioSpec {
        sessions: ["a", "b"]
            .into_iter()
            .map(|id| SessionPlan {
                id: id.into(),
                epoch: 0,
                trajectory: t.clone(),
            })
            .collect(),
    };
    let dir = tempfile::tempdir().unwrap();
    let mut largest = 0usize;
    let mut total = 0usize;
    for g in generate_scenario(&world, &scenario, 3).unwrap() {
        let s = &g.session;
        for id in s.graph.vertices.keys() {
            let bytes =
                s.submap(*id).unwrap().points.len() * std::mem::size_of::<nalgebra::Point3<f64>>();
            largest = largest.max(bytes);
            total += bytes;
        }
        save_session(s, &dir.path().join(&s.session_id)).unwrap();
    }

    const BUDGET: usize = 2;
    let cache = ResourceCache::new(BUDGET);
    let mut sessions: Vec<_> = ["a", "b"]
        .iter()
        .map(|id| {
            load_session(&dir.path().join(id))
                .unwrap()
                .with_cache(cache.clone())
        })
        .collect();

    // Cached entries plus the one being decoded, each at most twice its
    // length while its vector grows, plus reader buffers.
    let bound = (BUDGET + 1) * 2 * largest + (1 << 20);
    assert!(
        total > 4 * bound,
        "scene too small to tell: total {total}, bound {bound}"
    );

    let (visited, walk) = peak_growth(|| {
        let mut n = 0;
        for s in &sessions {
            for id in s.graph.vertices.keys() {
                if s.has_resource(*id, ResourceKind::Submap) {
                    n += s.submap(*id).unwrap().len();
                }
            }
        }
        n
    });
    assert!(visited > 0);
    assert!(cache.stats().entries <= BUDGET);
    assert!(
        walk <= bound,
        "walk peak {walk} above bound {bound} (total submaps {total})"
    );

    cache.clear();
    let (outcome, merge) = peak_growth(|| merge_sessions(&mut sessions, &MergeConfig::default()));
    outcome.unwrap();
    assert!(
        merge < total / 2,
        "merge peak {merge} vs total submaps {total}"
    );
}
