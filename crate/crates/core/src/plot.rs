//! Static SVG plots: training loss curves, precision-recall curves, and a
//! bird's-eye scatter of detections against ground truth. Output is plain
//! text built with fixed-precision formatting, so identical inputs yield
//! byte-identical files.

use std::fmt::Write as _;

use crate::eval::{EvalReport, DIST_THRESHOLDS};
use crate::geometry::BevGridSpec;
use crate::scene::{Detection, RadarPoint, SceneRecord, CLASS_NAMES};
use crate::train::TrainLog;

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN_L: f64 = 56.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 34.0;
const MARGIN_B: f64 = 42.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn fmt(v: f64) -> String {
    format!("{v:.2}")
}

fn svg_open(out: &mut String, title: &str) {
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"monospace\" font-size=\"12\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n",
        W / 2.0
    );
}

/// Generic line chart over the given series. Axis ranges come from the data
/// (padded), with clean linear tick labels.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    chart(title, x_label, y_label, series, None)
}

fn chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    bounds: Option<((f64, f64), (f64, f64))>,
) -> String {
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let ((x0, x1), (y0, y1)) = bounds.unwrap_or_else(|| {
        (span(pts.iter().map(|p| p.0)), span(pts.iter().map(|p| p.1)))
    });
    let px = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * (W - MARGIN_L - MARGIN_R);
    let py = |y: f64| H - MARGIN_B - (y - y0) / (y1 - y0) * (H - MARGIN_T - MARGIN_B);

    let mut out = String::new();
    svg_open(&mut out, title);
    let _ = write!(
        out,
        "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#888\"/>\n",
        fmt(MARGIN_L),
        fmt(MARGIN_T),
        fmt(W - MARGIN_L - MARGIN_R),
        fmt(H - MARGIN_T - MARGIN_B)
    );
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = write!(
            out,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n\
             <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
            fmt(px(fx)),
            fmt(H - MARGIN_B + 16.0),
            trim_num(fx),
            fmt(MARGIN_L - 6.0),
            fmt(py(fy) + 4.0),
            trim_num(fy)
        );
    }
    let _ = write!(
        out,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x_label}</text>\n\
         <text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{y_label}</text>\n",
        fmt((MARGIN_L + W - MARGIN_R) / 2.0),
        fmt(H - 8.0),
        fmt(H / 2.0),
        fmt(H / 2.0)
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = s.points.iter().map(|(x, y)| format!("{},{}", fmt(px(*x)), fmt(py(*y)))).collect();
        if !path.is_empty() {
            let _ = write!(
                out,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
                path.join(" ")
            );
        }
        let ly = MARGIN_T + 14.0 + 16.0 * i as f64;
        let _ = write!(
            out,
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{color}\" stroke-width=\"2\"/>\n\
             <text x=\"{}\" y=\"{}\">{}</text>\n",
            fmt(MARGIN_L + 8.0),
            fmt(ly),
            fmt(MARGIN_L + 28.0),
            fmt(ly),
            fmt(MARGIN_L + 34.0),
            fmt(ly + 4.0),
            s.label
        );
    }
    out.push_str("</svg>\n");
    out
}

fn span(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in vals {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if lo == hi {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

fn trim_num(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-" { "0".into() } else { s.into() }
}

/// Per-step loss terms from a training run.
pub fn loss_curves(log: &TrainLog) -> String {
    let take = |f: fn(&crate::train::StepLog) -> f64| {
        log.steps.iter().map(|s| (s.step as f64, f(s))).collect::<Vec<_>>()
    };
    let series = vec![
        Series { label: "total".into(), points: take(|s| s.total) },
        Series { label: "heatmap".into(), points: take(|s| s.focal) },
        Series { label: "regression".into(), points: take(|s| s.reg) },
        Series { label: "refinement".into(), points: take(|s| s.refine) },
    ];
    line_chart("training loss", "step", "loss", &series)
}

/// Precision-recall curves for one class, one series per distance threshold.
pub fn pr_curves(report: &EvalReport, class: usize) -> String {
    let mut series = Vec::new();
    if let Some(per_thr) = report.curves.get(class) {
        for (t, curve) in per_thr.iter().enumerate() {
            let mut points = vec![(0.0, 1.0)];
            points.extend(curve.iter().copied());
            series.push(Series { label: format!("{}m", trim_num(DIST_THRESHOLDS[t])), points });
        }
    }
    let title = format!("precision-recall: {}", CLASS_NAMES[class]);
    chart(&title, "recall", "precision", &series, Some(((-0.02, 1.02), (-0.02, 1.02))))
}

/// Top-down scatter: ground-truth boxes, detections, and radar returns.
pub fn bev_scatter(scene: &SceneRecord, radar: &[RadarPoint], dets: &[Detection], spec: &BevGridSpec) -> String {
    let side = 480.0;
    let px = |x: f64| MARGIN_L + (x - spec.x_min) / (spec.x_max - spec.x_min) * side;
    let py = |y: f64| MARGIN_T + (spec.y_max - y) / (spec.y_max - spec.y_min) * side;
    let (w, h) = (MARGIN_L + side + MARGIN_R, MARGIN_T + side + MARGIN_B);

    let mut out = String::new();
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\" font-family=\"monospace\" font-size=\"12\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">scene {}</text>\n\
         <rect x=\"{}\" y=\"{}\" width=\"{side}\" height=\"{side}\" fill=\"#fafafa\" stroke=\"#888\"/>\n",
        fmt(w / 2.0),
        scene.scene_id,
        fmt(MARGIN_L),
        fmt(MARGIN_T)
    );
    let box_poly = |out: &mut String, cx: f64, cy: f64, bw: f64, bl: f64, yaw: f64, color: &str, dash: bool| {
        let (c, s) = (yaw.cos(), yaw.sin());
        let corners = [(bl / 2.0, bw / 2.0), (bl / 2.0, -bw / 2.0), (-bl / 2.0, -bw / 2.0), (-bl / 2.0, bw / 2.0)];
        let pts: Vec<String> = corners
            .iter()
            .map(|(dx, dy)| {
                let x = cx + dx * c - dy * s;
                let y = cy + dx * s + dy * c;
                format!("{},{}", fmt(px(x)), fmt(py(y)))
            })
            .collect();
        let dash_attr = if dash { " stroke-dasharray=\"4 3\"" } else { "" };
        let _ = write!(
            out,
            "<polygon points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"{dash_attr}/>\n",
            pts.join(" ")
        );
    };
    for g in &scene.gt {
        box_poly(&mut out, g.center[0], g.center[1], g.size[0], g.size[1], g.yaw, "#2ca02c", false);
    }
    for d in dets {
        box_poly(&mut out, d.center[0], d.center[1], d.size[0], d.size[1], d.yaw, "#d62728", true);
    }
    for p in radar {
        if p.position[0] < spec.x_min || p.position[0] > spec.x_max || p.position[1] < spec.y_min || p.position[1] > spec.y_max {
            continue;
        }
        let _ = write!(
            out,
            "<circle cx=\"{}\" cy=\"{}\" r=\"2\" fill=\"#1f77b4\"/>\n",
            fmt(px(p.position[0])),
            fmt(py(p.position[1]))
        );
    }
    let legend = [("#2ca02c", "ground truth"), ("#d62728", "detection"), ("#1f77b4", "radar return")];
    for (i, (color, label)) in legend.iter().enumerate() {
        let y = MARGIN_T + side + 18.0;
        let x = MARGIN_L + 150.0 * i as f64;
        let _ = write!(
            out,
            "<rect x=\"{}\" y=\"{}\" width=\"12\" height=\"12\" fill=\"{color}\"/>\n\
             <text x=\"{}\" y=\"{}\">{label}</text>\n",
            fmt(x),
            fmt(y),
            fmt(x + 18.0),
            fmt(y + 10.0)
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::eval::{evaluate, EvalScene};
    use crate::scene::gen::{generate_scene, scene_seed};
    use crate::train::StepLog;

    fn sample_log() -> TrainLog {
        TrainLog {
            steps: (0..10)
                .map(|i| StepLog {
                    step: i,
                    lr: 0.01,
                    total: 5.0 / (i + 1) as f64,
                    focal: 3.0 / (i + 1) as f64,
                    reg: 1.5 / (i + 1) as f64,
                    refine: 0.5 / (i + 1) as f64,
                })
                .collect(),
        }
    }

    #[test]
    fn loss_chart_is_valid_svg_and_deterministic() {
        let log = sample_log();
        let a = loss_curves(&log);
        let b = loss_curves(&log);
        assert_eq!(a, b);
        assert!(a.starts_with("<svg"));
        assert!(a.ends_with("</svg>\n"));
        assert_eq!(a.matches("<polyline").count(), 4);
        assert!(a.contains("refinement"));
    }

    #[test]
    fn pr_chart_covers_all_thresholds() {
        let mut cfg = RunConfig::default();
        cfg.grid.x_min = -10.0;
        cfg.grid.x_max = 10.0;
        cfg.grid.y_min = -10.0;
        cfg.grid.y_max = 10.0;
        let scene = generate_scene(&cfg, "s0", scene_seed(1, "s0")).unwrap();
        let dets: Vec<Detection> = scene.gt.iter().map(Detection::from_gt).collect();
        let report = evaluate(&[EvalScene { dets, gts: scene.gt.clone() }]);
        let svg = pr_curves(&report, 0);
        assert!(svg.contains("0.5m") && svg.contains("4m"));
        assert!(svg.contains("precision-recall: car"));
        assert_eq!(svg.matches("<polyline").count(), DIST_THRESHOLDS.len());
    }

    #[test]
    fn scatter_draws_boxes_and_points() {
        let mut cfg = RunConfig::default();
        cfg.grid.x_min = -10.0;
        cfg.grid.x_max = 10.0;
        cfg.grid.y_min = -10.0;
        cfg.grid.y_max = 10.0;
        let spec = cfg.grid_spec().unwrap();
        let scene = generate_scene(&cfg, "s1", scene_seed(2, "s1")).unwrap();
        let radar: Vec<RadarPoint> = crate::pipeline::scene_radar_points(&scene, &cfg).unwrap();
        let dets: Vec<Detection> = scene.gt.iter().map(Detection::from_gt).collect();
        let svg = bev_scatter(&scene, &radar, &dets, &spec);
        assert_eq!(svg.matches("<polygon").count(), scene.gt.len() + dets.len());
        assert!(svg.matches("<circle").count() > 0);
        assert_eq!(svg, bev_scatter(&scene, &radar, &dets, &spec));
    }
}
