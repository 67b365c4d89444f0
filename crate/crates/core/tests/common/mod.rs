#![allow(dead_code)]

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard, OnceLock};

use planar_rect::bbox::{iou, BBox};
use planar_rect::dataset::{AnnotationSet, Dataset};
use planar_rect::detection::{load_templates, ReferenceDetector};
use planar_rect::detection::{Detection, DetectorBackend, DEFAULT_NCC_THRESHOLD};
use planar_rect::synth::{self, SweepConfig, TEMPLATES_DIR};

/// Heavy tests take this lock so timings are not skewed by each other.
pub fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|p| p.into_inner())
}

/// Writes straight to the process stderr so the line shows up even when the
/// test harness captures output.
pub fn report(criterion: u32, name: &str, pass: bool, detail: &str) {
    let line = format!("criterion {criterion} [{}] {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

pub struct Sweep {
    _dir: tempfile::TempDir,
    pub root: PathBuf,
    pub annotations: AnnotationSet,
}

/// The default 27-frame sweep, rendered once per test binary.
pub fn default_sweep() -> &'static Sweep {
    static SWEEP: OnceLock<Sweep> = OnceLock::new();
    SWEEP.get_or_init(|| make_sweep(&SweepConfig::default()))
}

pub fn make_sweep(cfg: &SweepConfig) -> Sweep {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let annotations = synth::sweep(cfg, &root).unwrap();
    Sweep { _dir: dir, root, annotations }
}

impl Sweep {
    pub fn dataset(&self) -> Dataset {
        Dataset::open(&self.root).unwrap()
    }
}

pub fn reference_backend(dataset_root: &Path) -> Box<dyn DetectorBackend> {
    let templates = load_templates(&dataset_root.join(TEMPLATES_DIR)).unwrap();
    Box::new(ReferenceDetector::new(templates, DEFAULT_NCC_THRESHOLD).unwrap())
}

/// Greedy NMS written the slow way: repeatedly take the best remaining box of
/// a class and delete everything overlapping it.
pub fn nms_oracle(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let key = |d: &Detection| (-d.score, d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h);
    let mut classes: Vec<u32> = dets.iter().map(|d| d.class_id).collect();
    classes.sort();
    classes.dedup();
    let mut out = Vec::new();
    for c in classes {
        let mut alive: Vec<Detection> = dets.iter().filter(|d| d.class_id == c).copied().collect();
        while !alive.is_empty() {
            let mut best = 0;
            for k in 1..alive.len() {
                if key(&alive[k]).partial_cmp(&key(&alive[best])) == Some(std::cmp::Ordering::Less) {
                    best = k;
                }
            }
            let top = alive.swap_remove(best);
            alive.retain(|d| iou(&d.bbox, &top.bbox) < thr);
            out.push(top);
        }
    }
    out
}

/// Exhaustive matching: among all one-to-one assignments with IoU at or above
/// `thr`, pick the one whose per-detection sequence of (IoU, −gt index) is
/// lexicographically largest, unmatched ranking lowest. Returns the matched
/// flags per detection.
pub fn brute_force_match(dets: &[BBox], gts: &[BBox], thr: f64) -> Vec<bool> {
    type Best = Option<(Vec<(f64, i64)>, Vec<Option<usize>>)>;
    fn rec(
        k: usize,
        dets: &[BBox],
        gts: &[BBox],
        thr: f64,
        used: &mut Vec<bool>,
        cur: &mut Vec<Option<usize>>,
        best: &mut Best,
    ) {
        if k == dets.len() {
            let key: Vec<(f64, i64)> = cur
                .iter()
                .enumerate()
                .map(|(d, m)| match m {
                    Some(g) => (iou(&dets[d], &gts[*g]), -(*g as i64)),
                    None => (-1.0, 0),
                })
                .collect();
            let better = match best {
                None => true,
                Some((b, _)) => key.partial_cmp(b) == Some(std::cmp::Ordering::Greater),
            };
            if better {
                *best = Some((key, cur.clone()));
            }
            return;
        }
        cur.push(None);
        rec(k + 1, dets, gts, thr, used, cur, best);
        cur.pop();
        for g in 0..gts.len() {
            if !used[g] && iou(&dets[k], &gts[g]) >= thr {
                used[g] = true;
                cur.push(Some(g));
                rec(k + 1, dets, gts, thr, used, cur, best);
                cur.pop();
                used[g] = false;
            }
        }
    }
    let mut best = None;
    rec(0, dets, gts, thr, &mut vec![false; gts.len()], &mut Vec::new(), &mut best);
    best.map(|(_, m)| m.iter().map(Option::is_some).collect()).unwrap_or_default()
}

/// AP from the definition: at each of the 101 recall levels, the best
/// precision reached at any rank whose recall is at least that level.
pub fn oracle_ap(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut points = Vec::new();
    let mut tp = 0;
    for (rank, &h) in hits.iter().enumerate() {
        tp += h as usize;
        points.push((tp as f64 / num_gt as f64, tp as f64 / (rank + 1) as f64));
    }
    let mut total = 0.0;
    for level in 0..=100 {
        let r = level as f64 / 100.0;
        total += points.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max);
    }
    total / 101.0
}
