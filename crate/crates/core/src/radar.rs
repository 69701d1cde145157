//! Radar pipeline: multi-sweep accumulation, filtering, and pillar
//! encoding into the radar BEV feature map.

use std::sync::Arc;

use nalgebra::Vector3;

use crate::config::RadarConfig;
use crate::error::Result;
use crate::geometry::BevGridSpec;
use crate::scene::{RadarPoint, RadarSweep};
use crate::tensor::{MlpParams, Tape, Tensor};

/// Width of the raw per-point feature vector fed to the pillar MLP:
/// (x, y, z, rcs, vx, vy, sweep_age, dx_cell, dy_cell).
pub const POINT_WIDTH: usize = 9;

/// Pillar-encoder parameters: per-point MLP plus a two-layer 3x3 conv stack.
#[derive(Debug, Clone)]
pub struct RadarParams {
    pub point_mlp: MlpParams,
    pub conv1_kernel: Tensor,
    pub conv1_bias: Tensor,
    pub conv2_kernel: Tensor,
    pub conv2_bias: Tensor,
}

impl RadarParams {
    pub fn entries(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.point_mlp.entries("radar.point_mlp");
        out.push(("radar.conv1_kernel".into(), &self.conv1_kernel));
        out.push(("radar.conv1_bias".into(), &self.conv1_bias));
        out.push(("radar.conv2_kernel".into(), &self.conv2_kernel));
        out.push(("radar.conv2_bias".into(), &self.conv2_bias));
        out
    }

    pub fn entries_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.point_mlp.entries_mut("radar.point_mlp");
        out.push(("radar.conv1_kernel".into(), &mut self.conv1_kernel));
        out.push(("radar.conv1_bias".into(), &mut self.conv1_bias));
        out.push(("radar.conv2_kernel".into(), &mut self.conv2_kernel));
        out.push(("radar.conv2_bias".into(), &mut self.conv2_bias));
        out
    }
}

/// Transform every sweep's points into the current ego frame and stamp ages.
/// Output order: by sweep, newest first, then original point order.
pub fn accumulate_sweeps(sweeps: &[RadarSweep], current_time: f64) -> Result<Vec<RadarPoint>> {
    let mut order: Vec<usize> = (0..sweeps.len()).collect();
    order.sort_by(|a, b| {
        sweeps[*b]
            .timestamp
            .partial_cmp(&sweeps[*a].timestamp)
            .expect("finite timestamps")
            .then(a.cmp(b))
    });
    let mut out = Vec::with_capacity(sweeps.iter().map(|s| s.points.len()).sum());
    for i in order {
        let sweep = &sweeps[i];
        sweep.ego_pose.validate_rotation()?;
        let age = (current_time - sweep.timestamp).max(0.0);
        for p in &sweep.points {
            let pos = sweep.ego_pose.apply(&Vector3::new(p.position[0], p.position[1], p.position[2]));
            let vel = sweep.ego_pose.rotate(&Vector3::new(p.velocity[0], p.velocity[1], 0.0));
            out.push(RadarPoint {
                position: [pos.x, pos.y, pos.z],
                rcs: p.rcs,
                velocity: [vel.x, vel.y],
                sweep_age: age,
            });
        }
    }
    Ok(out)
}

/// Keep points inside the BEV extent with plausible velocity and RCS.
/// Pure order-preserving predicate.
pub fn filter_points(points: &[RadarPoint], spec: &BevGridSpec, cfg: &RadarConfig) -> Vec<RadarPoint> {
    points
        .iter()
        .filter(|p| {
            let speed = (p.velocity[0] * p.velocity[0] + p.velocity[1] * p.velocity[1]).sqrt();
            spec.contains(p.position[0], p.position[1]) && speed <= cfg.v_max && p.rcs >= cfg.rcs_min
        })
        .cloned()
        .collect()
}

/// Raw per-point features for the pillar MLP, plus each point's cell.
fn point_features(points: &[RadarPoint], spec: &BevGridSpec) -> (Vec<f64>, Vec<(usize, usize)>) {
    let mut feats = Vec::with_capacity(points.len() * POINT_WIDTH);
    let mut cells = Vec::with_capacity(points.len());
    for p in points {
        let Some((row, col)) = spec.cell_of(p.position[0], p.position[1]) else {
            continue;
        };
        let (cx, cy) = spec.cell_center(row, col);
        feats.extend_from_slice(&[
            p.position[0],
            p.position[1],
            p.position[2],
            p.rcs,
            p.velocity[0],
            p.velocity[1],
            p.sweep_age,
            p.position[0] - cx,
            p.position[1] - cy,
        ]);
        cells.push((row, col));
    }
    (feats, cells)
}

/// Pillar encoding: per-point MLP, max-pool per cell, empty cells zero,
/// then two 3x3 conv layers. Returns the radar BEV map `[H, W, C]`.
pub fn pillarize(points: &[RadarPoint], spec: &BevGridSpec, params: &RadarParams, tape: &Tape) -> Tensor {
    let (h, w) = (spec.h(), spec.w());
    let (feats, cells) = point_features(points, spec);
    let n = cells.len();
    let x = Tensor::from_vec(&[n, POINT_WIDTH], feats);
    let embedded = params.point_mlp.forward(tape, &x);

    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); h * w];
    for (i, (row, col)) in cells.iter().enumerate() {
        groups[row * w + col].push(i);
    }
    let pooled = tape.segment_max(&embedded, &Arc::new(groups));
    let grid = pooled.reshape(&[h, w, params.point_mlp.out_width()]);

    let c1 = tape.conv3x3(&grid, &params.conv1_kernel, &params.conv1_bias);
    let a1 = tape.relu(&c1);
    tape.conv3x3(&a1, &params.conv2_kernel, &params.conv2_bias)
}
