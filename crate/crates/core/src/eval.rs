//! Center-distance detection metrics: greedy matching, 101-point
//! interpolated average precision, true-positive error statistics, and the
//! composite detection score.

use serde::Serialize;

use crate::config::NUM_CLASSES;
use crate::geometry::angle_diff;
use crate::scene::{Detection, GtBox};

/// Distance thresholds the per-class AP is averaged over (meters).
pub const DIST_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

/// Threshold whose matches feed the true-positive error metrics.
pub const TP_THRESHOLD: f64 = 2.0;

const MIN_RECALL: f64 = 0.1;
const MIN_PRECISION: f64 = 0.1;

/// One scene's detections and ground truth, paired for evaluation.
#[derive(Debug, Clone, Default)]
pub struct EvalScene {
    pub dets: Vec<Detection>,
    pub gts: Vec<GtBox>,
}

fn center_distance(d: &Detection, g: &GtBox) -> f64 {
    let dx = d.center[0] - g.center[0];
    let dy = d.center[1] - g.center[1];
    (dx * dx + dy * dy).sqrt()
}

/// Greedy matching of one class at one distance threshold.
///
/// Detections are visited in descending score order (ties: scene then
/// input index); each matches the nearest not-yet-matched ground-truth box
/// of the same class in its scene when that distance is strictly below the
/// threshold, and counts as a false positive otherwise.
#[derive(Debug, Clone)]
pub struct MatchResult {
    /// (scene, detection index, score, matched gt index) in visit order.
    pub pairs: Vec<(usize, usize, f64, Option<usize>)>,
    /// Ground-truth boxes of the class across all scenes.
    pub n_gt: usize,
    /// (recall, precision) after each visited detection.
    pub curve: Vec<(f64, f64)>,
}

pub fn match_class(scenes: &[EvalScene], class: usize, threshold: f64) -> MatchResult {
    let mut order: Vec<(usize, usize, f64)> = Vec::new();
    for (si, scene) in scenes.iter().enumerate() {
        for (di, d) in scene.dets.iter().enumerate() {
            if d.class == class {
                order.push((si, di, d.score));
            }
        }
    }
    order.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));

    let n_gt: usize = scenes.iter().map(|s| s.gts.iter().filter(|g| g.class == class).count()).sum();
    let mut taken: Vec<Vec<bool>> = scenes.iter().map(|s| vec![false; s.gts.len()]).collect();
    let mut pairs = Vec::with_capacity(order.len());
    let mut curve = Vec::with_capacity(order.len());
    let mut tp = 0usize;
    let mut fp = 0usize;
    for (si, di, score) in order {
        let det = &scenes[si].dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in scenes[si].gts.iter().enumerate() {
            if g.class != class || taken[si][gi] {
                continue;
            }
            let dist = center_distance(det, g);
            if best.is_none_or(|(_, bd)| dist < bd) {
                best = Some((gi, dist));
            }
        }
        let matched = match best {
            Some((gi, dist)) if dist < threshold => {
                taken[si][gi] = true;
                tp += 1;
                Some(gi)
            }
            _ => {
                fp += 1;
                None
            }
        };
        pairs.push((si, di, score, matched));
        let recall = if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 };
        let precision = tp as f64 / (tp + fp) as f64;
        curve.push((recall, precision));
    }
    MatchResult { pairs, n_gt, curve }
}

/// Linear interpolation over a nondecreasing x grid; queries left of the
/// grid return the first value, queries right of it return zero.
fn interp(x: f64, points: &[(f64, f64)]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    if x <= points[0].0 {
        return points[0].1;
    }
    if x > points[points.len() - 1].0 {
        return 0.0;
    }
    let mut lo = 0;
    let mut hi = points.len() - 1;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if points[mid].0 >= x {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let (x0, y0) = points[lo];
    let (x1, y1) = points[hi];
    let t = (x - x0) / (x1 - x0);
    y0 + t * (y1 - y0)
}

/// Normalized area under the interpolated precision-recall curve: 101
/// evenly spaced recall levels, operating points below 10% recall dropped,
/// precision floored at 10%.
pub fn average_precision(m: &MatchResult) -> f64 {
    if m.n_gt == 0 || m.curve.is_empty() {
        return 0.0;
    }
    let first = (100.0 * MIN_RECALL).round() as usize + 1;
    let mut acc = 0.0;
    for i in first..=100 {
        let r = i as f64 / 100.0;
        // Normalizing per term keeps a perfect detector at exactly 1.0.
        acc += (interp(r, &m.curve) - MIN_PRECISION).max(0.0) / (1.0 - MIN_PRECISION);
    }
    acc / (101 - first) as f64
}

/// Mean errors over the true positives of a match: translation is 2D
/// center distance, scale is one minus the IoU of center- and
/// yaw-aligned boxes, orientation is the smallest yaw difference, velocity
/// is the L2 difference. With no true positives every error is 1.
#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct TpErrors {
    pub ate: f64,
    pub ase: f64,
    pub aoe: f64,
    pub ave: f64,
    pub n_tp: usize,
}

fn aligned_iou(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let inter: f64 = (0..3).map(|i| a[i].min(b[i])).product();
    let union = a.iter().product::<f64>() + b.iter().product::<f64>() - inter;
    inter / union
}

pub fn tp_errors(scenes: &[EvalScene], m: &MatchResult) -> TpErrors {
    let mut acc = [0.0f64; 4];
    let mut n = 0usize;
    for &(si, di, _, gi) in &m.pairs {
        let Some(gi) = gi else { continue };
        let d = &scenes[si].dets[di];
        let g = &scenes[si].gts[gi];
        acc[0] += center_distance(d, g);
        acc[1] += 1.0 - aligned_iou(&d.size, &g.size);
        acc[2] += angle_diff(d.yaw, g.yaw);
        acc[3] += ((d.velocity[0] - g.velocity[0]).powi(2) + (d.velocity[1] - g.velocity[1]).powi(2)).sqrt();
        n += 1;
    }
    if n == 0 {
        return TpErrors { ate: 1.0, ase: 1.0, aoe: 1.0, ave: 1.0, n_tp: 0 };
    }
    let k = n as f64;
    TpErrors { ate: acc[0] / k, ase: acc[1] / k, aoe: acc[2] / k, ave: acc[3] / k, n_tp: n }
}

/// Composite score: five parts mAP plus one part per error term's
/// goodness, normalized. Errors clamp at 1 before inversion.
pub fn nds(map: f64, errors: &TpErrors) -> f64 {
    let terms = [errors.ate, errors.ase, errors.aoe, errors.ave];
    let goodness: f64 = terms.iter().map(|e| 1.0 - e.min(1.0)).sum();
    (5.0 * map + goodness) / (5.0 + terms.len() as f64)
}

// ── full report ──

#[derive(Debug, Clone, Serialize)]
pub struct ClassReport {
    pub class: String,
    pub n_gt: usize,
    /// AP at each distance threshold.
    pub ap: Vec<f64>,
    pub mean_ap: f64,
    pub errors: TpErrors,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassReport>,
    pub map: f64,
    pub mate: f64,
    pub mase: f64,
    pub maoe: f64,
    pub mave: f64,
    pub nds: f64,
    /// Precision-recall operating points per class at each threshold,
    /// kept for plotting.
    #[serde(skip)]
    pub curves: Vec<Vec<Vec<(f64, f64)>>>,
}

/// Evaluate detections against ground truth. Classes with no ground-truth
/// boxes anywhere are excluded from every average; with no ground truth at
/// all the report is all-zero mAP and worst-case errors.
pub fn evaluate(scenes: &[EvalScene]) -> EvalReport {
    let mut per_class = Vec::with_capacity(NUM_CLASSES);
    let mut curves = Vec::with_capacity(NUM_CLASSES);
    for class in 0..NUM_CLASSES {
        let mut ap = Vec::with_capacity(DIST_THRESHOLDS.len());
        let mut class_curves = Vec::with_capacity(DIST_THRESHOLDS.len());
        let mut n_gt = 0;
        let mut errors = TpErrors { ate: 1.0, ase: 1.0, aoe: 1.0, ave: 1.0, n_tp: 0 };
        for &t in &DIST_THRESHOLDS {
            let m = match_class(scenes, class, t);
            n_gt = m.n_gt;
            ap.push(average_precision(&m));
            if t == TP_THRESHOLD {
                errors = tp_errors(scenes, &m);
            }
            class_curves.push(m.curve);
        }
        let mean_ap = ap.iter().sum::<f64>() / ap.len() as f64;
        per_class.push(ClassReport {
            class: crate::scene::CLASS_NAMES[class].to_string(),
            n_gt,
            ap,
            mean_ap,
            errors,
        });
        curves.push(class_curves);
    }

    let active: Vec<&ClassReport> = per_class.iter().filter(|c| c.n_gt > 0).collect();
    let (map, mate, mase, maoe, mave) = if active.is_empty() {
        (0.0, 1.0, 1.0, 1.0, 1.0)
    } else {
        let k = active.len() as f64;
        (
            active.iter().map(|c| c.mean_ap).sum::<f64>() / k,
            active.iter().map(|c| c.errors.ate).sum::<f64>() / k,
            active.iter().map(|c| c.errors.ase).sum::<f64>() / k,
            active.iter().map(|c| c.errors.aoe).sum::<f64>() / k,
            active.iter().map(|c| c.errors.ave).sum::<f64>() / k,
        )
    };
    let score = nds(map, &TpErrors { ate: mate, ase: mase, aoe: maoe, ave: mave, n_tp: 0 });
    EvalReport { per_class, map, mate, mase, maoe, mave, nds: score, curves }
}

/// Plain-text metrics table.
pub fn format_report(r: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str("class        n_gt   AP@0.5   AP@1.0   AP@2.0   AP@4.0   mAP      ATE    ASE    AOE    AVE\n");
    for c in &r.per_class {
        out.push_str(&format!(
            "{:<12} {:>5}   {:.4}   {:.4}   {:.4}   {:.4}   {:.4}   {:.3}  {:.3}  {:.3}  {:.3}\n",
            c.class, c.n_gt, c.ap[0], c.ap[1], c.ap[2], c.ap[3], c.mean_ap, c.errors.ate, c.errors.ase, c.errors.aoe, c.errors.ave
        ));
    }
    out.push_str(&format!(
        "mAP {:.4}  mATE {:.4}  mASE {:.4}  mAOE {:.4}  mAVE {:.4}  NDS {:.4}\n",
        r.map, r.mate, r.mase, r.maoe, r.mave, r.nds
    ));
    out
}
