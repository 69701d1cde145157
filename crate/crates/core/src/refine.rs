//! Instance-level refinement: polar association of radar points to
//! proposals, proposal-aware radar attention, adaptive grid point
//! generation, farthest point sampling, radar/image feature pooling, and
//! the residual refinement head.

use std::sync::Arc;

use nalgebra::Vector3;

use crate::camera::CameraFeatures;
use crate::config::RefineConfig;
use crate::geometry::{angle_diff, decompose_velocity, to_polar, wrap_angle};
use crate::head::Proposal;
use crate::scene::RadarPoint;
use crate::tensor::{MlpParams, Tape, Tensor};

/// Width of the raw radar point feature r_k: (x, y, z, rcs, vx, vy,
/// sweep_age).
pub const RADAR_FEATURE_WIDTH: usize = 7;

/// Residual vector width emitted by the refine head: (dx, dy, dz, dlog w,
/// dlog l, dlog h, dyaw, dvx, dvy, dscore-logit).
pub const DELTA_WIDTH: usize = 10;

/// Velocities below this magnitude use the yaw-perpendicular fallback
/// direction for grid generation.
pub const V_TAN_EPS: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct RefineParams {
    /// Radar point embedding of the attention score path.
    pub mlp1: MlpParams,
    /// Scalar importance score from the embedded point and the positional
    /// encoding of the proposal-to-point offset.
    pub mlp2: MlpParams,
    /// Attended radar point features.
    pub mlp3: MlpParams,
    /// One encoder per ball radius, input `[attended ; relative offset]`.
    pub set_mlps: Vec<MlpParams>,
    /// Residual head over `[pooled object feature ; proposal latent]`.
    pub head: MlpParams,
}

impl RefineParams {
    pub fn entries(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.mlp1.entries("refine.mlp1");
        out.extend(self.mlp2.entries("refine.mlp2"));
        out.extend(self.mlp3.entries("refine.mlp3"));
        for (i, m) in self.set_mlps.iter().enumerate() {
            out.extend(m.entries(&format!("refine.set{i}")));
        }
        out.extend(self.head.entries("refine.head"));
        out
    }

    pub fn entries_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.mlp1.entries_mut("refine.mlp1");
        out.extend(self.mlp2.entries_mut("refine.mlp2"));
        out.extend(self.mlp3.entries_mut("refine.mlp3"));
        for (i, m) in self.set_mlps.iter_mut().enumerate() {
            out.extend(m.entries_mut(&format!("refine.set{i}")));
        }
        out.extend(self.head.entries_mut("refine.head"));
        out
    }
}

// ── soft polar association ──

/// Indices of points within the closed azimuth/radial window around the
/// proposal center.
pub fn soft_polar_associate(center: (f64, f64), points: &[RadarPoint], az_window: f64, radial_window: f64) -> Vec<usize> {
    let c = to_polar(center.0, center.1);
    points
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            let q = to_polar(p.position[0], p.position[1]);
            angle_diff(q.azimuth, c.azimuth) <= az_window && (q.range - c.range).abs() <= radial_window
        })
        .map(|(i, _)| i)
        .collect()
}

/// Raw feature rows r_k for the selected points.
pub fn radar_feature_rows(points: &[RadarPoint], idx: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(idx.len() * RADAR_FEATURE_WIDTH);
    for &i in idx {
        let p = &points[i];
        data.extend_from_slice(&[
            p.position[0],
            p.position[1],
            p.position[2],
            p.rcs,
            p.velocity[0],
            p.velocity[1],
            p.sweep_age,
        ]);
    }
    Tensor::from_vec(&[idx.len(), RADAR_FEATURE_WIDTH], data)
}

// ── proposal-aware radar attention ──

/// Sinusoidal encoding of a 3D offset: for each coordinate and frequency
/// `0.5 * 2^f`, a (sin, cos) pair.
pub fn pos_encode(offset: [f64; 3], freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(offset.len() * freqs * 2);
    for d in offset {
        for f in 0..freqs {
            let w = 0.5 * (1u64 << f) as f64;
            out.push((w * d).sin());
            out.push((w * d).cos());
        }
    }
    out
}

/// Attended radar point features a_k. With attention enabled, scalar
/// importance scores are softmaxed over the K points of the proposal and
/// scale each point's feature; disabled, weights are uniform 1/K.
pub fn proposal_radar_attention(
    center: [f64; 3],
    points: &[RadarPoint],
    idx: &[usize],
    params: &RefineParams,
    freqs: usize,
    pra_on: bool,
    tape: &Tape,
) -> Tensor {
    let k = idx.len();
    assert!(k > 0, "attention needs at least one associated point");
    let r = radar_feature_rows(points, idx);
    let features = params.mlp3.forward(tape, &r);
    let weights = if pra_on {
        let embedded = params.mlp1.forward(tape, &r);
        let mut enc = Vec::with_capacity(k * freqs * 6);
        for &i in idx {
            let p = &points[i];
            enc.extend(pos_encode(
                [center[0] - p.position[0], center[1] - p.position[1], center[2] - p.position[2]],
                freqs,
            ));
        }
        let enc = Tensor::from_vec(&[k, freqs * 6], enc);
        let joint = tape.concat_cols(&[&embedded, &enc]);
        let scores = params.mlp2.forward(tape, &joint);
        assert_eq!(scores.shape(), &[k, 1], "importance head must emit one scalar per point");
        tape.softmax_rows(&scores.reshape(&[1, k])).reshape(&[k])
    } else {
        Tensor::full(&[k], 1.0 / k as f64)
    };
    tape.scale_rows(&features, &weights)
}

// ── adaptive grid points ──

/// Tangential component of the proposal's predicted velocity with respect
/// to the ray from the ego origin to the proposal center.
pub fn proposal_v_tan(p: &Proposal) -> (f64, f64) {
    match decompose_velocity((p.velocity[0], p.velocity[1]), (p.center[0], p.center[1])) {
        Ok((tan, _rad)) => tan,
        Err(_) => (0.0, 0.0),
    }
}

/// T grid points along the tangential velocity direction, centered on the
/// radar point, spaced by the clamped span. Near-zero tangential velocity
/// falls back to the proposal's yaw-perpendicular direction at minimum
/// span. z comes from the proposal center.
pub fn gen_grid_points(
    u_k: [f64; 3],
    v_tan: (f64, f64),
    yaw: f64,
    z: f64,
    t_count: usize,
    rho_min: f64,
    rho_max: f64,
) -> Vec<[f64; 3]> {
    assert!(t_count >= 2, "grid spacing divides by T - 1");
    let mag = (v_tan.0 * v_tan.0 + v_tan.1 * v_tan.1).sqrt();
    let (gamma, dir) = if mag < V_TAN_EPS {
        (rho_min, (-yaw.sin(), yaw.cos()))
    } else {
        (mag.clamp(rho_min, rho_max), (v_tan.0 / mag, v_tan.1 / mag))
    };
    (0..t_count)
        .map(|t| {
            let a = gamma * (t as f64 / (t_count - 1) as f64 - 0.5);
            [u_k[0] + a * dir.0, u_k[1] + a * dir.1, z]
        })
        .collect()
}

// ── farthest point sampling ──

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Greedy max-min selection of `m` candidates, seeded at the candidate
/// nearest `center`; ties break toward the lowest index. Returns selected
/// indices in selection order; if there are at most `m` candidates, all
/// indices are returned in input order.
pub fn fps(candidates: &[[f64; 3]], m: usize, center: [f64; 3]) -> Vec<usize> {
    let n = candidates.len();
    assert!(n > 0, "farthest point sampling needs candidates");
    if n <= m {
        return (0..n).collect();
    }
    let mut seed = 0usize;
    let mut best = f64::INFINITY;
    for (i, c) in candidates.iter().enumerate() {
        let d = dist2(c, &center);
        if d < best {
            best = d;
            seed = i;
        }
    }
    let mut selected = Vec::with_capacity(m);
    selected.push(seed);
    let mut min_d: Vec<f64> = candidates.iter().map(|c| dist2(c, &candidates[seed])).collect();
    while selected.len() < m {
        let mut pick = 0usize;
        let mut far = f64::NEG_INFINITY;
        for (i, d) in min_d.iter().enumerate() {
            if *d > far {
                far = *d;
                pick = i;
            }
        }
        selected.push(pick);
        for (i, d) in min_d.iter_mut().enumerate() {
            let nd = dist2(&candidates[i], &candidates[pick]);
            if nd < *d {
                *d = nd;
            }
        }
    }
    selected
}

// ── set abstraction ──

/// Multi-radius ball encoding of attended radar features around each grid
/// point: per radius, points within the closed ball are encoded from
/// `[a_k ; u_k - g_m]` and max-pooled; radii results are concatenated.
/// Grid points with an empty ball contribute zero for that radius.
pub fn set_abstraction(
    attended: &Tensor,
    positions: &[[f64; 3]],
    grid: &[[f64; 3]],
    radii: &[f64],
    set_mlps: &[MlpParams],
    tape: &Tape,
) -> Tensor {
    assert_eq!(radii.len(), set_mlps.len(), "one encoder per radius");
    let m = grid.len();
    let mut per_radius = Vec::with_capacity(radii.len());
    for (radius, mlp) in radii.iter().zip(set_mlps) {
        let r2 = radius * radius;
        let mut gather_idx = Vec::new();
        let mut offsets = Vec::new();
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); m];
        for (gi, g) in grid.iter().enumerate() {
            for (ki, u) in positions.iter().enumerate() {
                if dist2(u, g) <= r2 {
                    groups[gi].push(gather_idx.len());
                    gather_idx.push(ki);
                    offsets.extend_from_slice(&[u[0] - g[0], u[1] - g[1], u[2] - g[2]]);
                }
            }
        }
        let n_pairs = gather_idx.len();
        let gathered = tape.gather_rows(attended, &Arc::new(gather_idx));
        let rel = Tensor::from_vec(&[n_pairs, 3], offsets);
        let joint = tape.concat_cols(&[&gathered, &rel]);
        let encoded = mlp.forward(tape, &joint);
        per_radius.push(tape.segment_max(&encoded, &Arc::new(groups)));
    }
    let refs: Vec<&Tensor> = per_radius.iter().collect();
    tape.concat_cols(&refs)
}

// ── image feature pooling ──

/// Project each grid point into every camera and bilinear-sample level-0
/// features at valid hits, averaged over valid views. Points no camera
/// sees pool to zero.
pub fn pool_image_features(grid: &[[f64; 3]], cams: &[CameraFeatures], tape: &Tape) -> Tensor {
    let m = grid.len();
    let c = cams.first().map(|cam| cam.channels()).unwrap_or(0);
    let mut sum: Option<Tensor> = None;
    let mut hits = vec![0usize; m];
    for cam in cams {
        let fshape = cam.levels[0].shape();
        let (fh, fw) = (fshape[0], fshape[1]);
        let mut uvs = Vec::with_capacity(m);
        let mut any = false;
        for (i, g) in grid.iter().enumerate() {
            let ((u, v), valid) = cam.model.project_level(&Vector3::new(g[0], g[1], g[2]), 0);
            let valid = valid && u <= (fw - 1) as f64 && v <= (fh - 1) as f64;
            if valid {
                uvs.push((u, v));
                hits[i] += 1;
                any = true;
            } else {
                uvs.push((-10.0, -10.0));
            }
        }
        if !any {
            continue;
        }
        let sampled = tape.bilinear_rows(&cam.levels[0], &Arc::new(uvs));
        sum = Some(match sum {
            Some(acc) => tape.add(&acc, &sampled),
            None => sampled,
        });
    }
    match sum {
        Some(acc) => {
            let inv: Vec<f64> = hits.iter().map(|h| 1.0 / (*h).max(1) as f64).collect();
            tape.scale_rows(&acc, &Tensor::from_vec(&[m], inv))
        }
        None => Tensor::zeros(&[m, c]),
    }
}

// ── fuse and refine ──

/// Residuals for one proposal, or `None` when no radar point associates
/// (the caller bypasses refinement).
#[allow(clippy::too_many_arguments)]
pub fn refine_deltas(
    b: &Proposal,
    latent: &Tensor,
    points: &[RadarPoint],
    cams: &[CameraFeatures],
    params: &RefineParams,
    cfg: &RefineConfig,
    pra_on: bool,
    tape: &Tape,
) -> Option<Tensor> {
    let idx = soft_polar_associate(
        (b.center[0], b.center[1]),
        points,
        cfg.azimuth_window_deg.to_radians(),
        cfg.radial_window,
    );
    if idx.is_empty() {
        return None;
    }
    let attended = proposal_radar_attention(b.center, points, &idx, params, cfg.pos_freqs, pra_on, tape);

    let v_tan = proposal_v_tan(b);
    let positions: Vec<[f64; 3]> = idx.iter().map(|&i| points[i].position).collect();
    let mut candidates = Vec::with_capacity(idx.len() * cfg.t);
    for u in &positions {
        candidates.extend(gen_grid_points(*u, v_tan, b.yaw, b.center[2], cfg.t, cfg.rho_min, cfg.rho_max));
    }
    let picked = fps(&candidates, cfg.m, b.center);
    let grid: Vec<[f64; 3]> = picked.iter().map(|&i| candidates[i]).collect();

    let f_pts = set_abstraction(&attended, &positions, &grid, &cfg.ball_radii, &params.set_mlps, tape);
    let f_img = pool_image_features(&grid, cams, tape);
    let fused = tape.add(&f_pts, &f_img);
    let m = grid.len();
    let f_obj = tape.segment_max(&fused, &Arc::new(vec![(0..m).collect::<Vec<usize>>()]));

    let joint = tape.concat_cols(&[&f_obj, latent]);
    Some(params.head.forward(tape, &joint))
}

/// Apply a residual vector to a proposal. A zero residual reproduces the
/// input exactly.
pub fn apply_deltas(b: &Proposal, d: &[f64]) -> Proposal {
    assert_eq!(d.len(), DELTA_WIDTH);
    let score = if d[9] == 0.0 {
        b.score
    } else {
        let s = b.score.clamp(1e-7, 1.0 - 1e-7);
        let logit = (s / (1.0 - s)).ln();
        1.0 / (1.0 + (-(logit + d[9])).exp())
    };
    Proposal {
        center: [b.center[0] + d[0], b.center[1] + d[1], b.center[2] + d[2]],
        size: [b.size[0] * d[3].exp(), b.size[1] * d[4].exp(), b.size[2] * d[5].exp()],
        yaw: wrap_angle(b.yaw + d[6]),
        velocity: [b.velocity[0] + d[7], b.velocity[1] + d[8]],
        score,
        class: b.class,
        latent: b.latent.clone(),
        cell: b.cell,
    }
}

/// Full per-proposal refinement; proposals with no associated radar points
/// are returned unchanged.
#[allow(clippy::too_many_arguments)]
pub fn refine_one(
    b: &Proposal,
    latent: &Tensor,
    points: &[RadarPoint],
    cams: &[CameraFeatures],
    params: &RefineParams,
    cfg: &RefineConfig,
    pra_on: bool,
    tape: &Tape,
) -> Proposal {
    match refine_deltas(b, latent, points, cams, params, cfg, pra_on, tape) {
        Some(d) => apply_deltas(b, d.values()),
        None => b.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitRng;
    use crate::tensor::{Activation, MlpLayer};

    fn pt(x: f64, y: f64, z: f64) -> RadarPoint {
        RadarPoint { position: [x, y, z], rcs: 3.0, velocity: [0.5, -0.2], sweep_age: 0.1 }
    }

    #[test]
    fn spa_center_point_always_associates() {
        let pts = vec![pt(5.0, 5.0, 0.5)];
        let idx = soft_polar_associate((5.0, 5.0), &pts, 0.01, 0.01);
        assert_eq!(idx, vec![0]);
    }

    #[test]
    fn spa_closed_boundary_included() {
        let az = 5.0f64.to_radians();
        // Proposal straight ahead at range 10; point rotated by exactly the
        // window at the same range.
        let p = pt(10.0 * az.cos(), 10.0 * az.sin(), 0.0);
        let idx = soft_polar_associate((10.0, 0.0), &[p], az, 3.0);
        assert_eq!(idx, vec![0]);
        // Radial boundary: range offset exactly the window.
        let q = pt(13.0, 0.0, 0.0);
        let idx = soft_polar_associate((10.0, 0.0), &[q], az, 3.0);
        assert_eq!(idx, vec![0]);
    }

    #[test]
    fn spa_matches_predicate_oracle() {
        let mut rng = SplitRng::new(21, "spa");
        let pts: Vec<RadarPoint> = (0..300).map(|_| pt(rng.range(-20.0, 20.0), rng.range(-20.0, 20.0), 0.0)).collect();
        let center = (8.0, -3.0);
        let az = 0.12;
        let rad = 2.5;
        let got = soft_polar_associate(center, &pts, az, rad);
        let c = to_polar(center.0, center.1);
        let want: Vec<usize> = pts
            .iter()
            .enumerate()
            .filter(|(_, p)| {
                let q = to_polar(p.position[0], p.position[1]);
                let mut da = (q.azimuth - c.azimuth).abs();
                if da > std::f64::consts::PI {
                    da = std::f64::consts::TAU - da;
                }
                da <= az && (q.range - c.range).abs() <= rad
            })
            .map(|(i, _)| i)
            .collect();
        assert_eq!(got, want);
    }

    fn linear(inp: usize, out: usize, w: Vec<f64>, b: Vec<f64>, act: Activation) -> MlpParams {
        MlpParams::new(vec![MlpLayer {
            weight: Tensor::from_vec(&[inp, out], w),
            bias: Tensor::from_vec(&[out], b),
            activation: act,
        }])
    }

    fn pra_params(c_a: usize, hidden: usize, freqs: usize, rng: &mut SplitRng) -> RefineParams {
        let mut rv = |n: usize, s: f64| -> Vec<f64> { (0..n).map(|_| rng.range(-s, s)).collect() };
        let enc = freqs * 6;
        RefineParams {
            mlp1: linear(RADAR_FEATURE_WIDTH, hidden, rv(RADAR_FEATURE_WIDTH * hidden, 0.5), rv(hidden, 0.2), Activation::Relu),
            mlp2: linear(hidden + enc, 1, rv(hidden + enc, 0.5), rv(1, 0.2), Activation::None),
            mlp3: linear(RADAR_FEATURE_WIDTH, c_a, rv(RADAR_FEATURE_WIDTH * c_a, 0.5), rv(c_a, 0.2), Activation::None),
            set_mlps: vec![
                linear(c_a + 3, 2, rv((c_a + 3) * 2, 0.5), rv(2, 0.2), Activation::Relu),
                linear(c_a + 3, 2, rv((c_a + 3) * 2, 0.5), rv(2, 0.2), Activation::Relu),
            ],
            head: linear(4 + 4, DELTA_WIDTH, vec![0.0; 8 * DELTA_WIDTH], vec![0.0; DELTA_WIDTH], Activation::None),
        }
    }

    #[test]
    fn pra_singleton_weight_is_one() {
        let tape = Tape::inference();
        let mut rng = SplitRng::new(22, "pra1");
        let params = pra_params(4, 6, 8, &mut rng);
        let pts = vec![pt(3.0, 1.0, 0.5)];
        let a = proposal_radar_attention([3.0, 1.0, 0.5], &pts, &[0], &params, 8, true, &tape);
        let direct = params.mlp3.forward(&tape, &radar_feature_rows(&pts, &[0]));
        for (x, y) in a.values().iter().zip(direct.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn pra_identical_points_share_weight() {
        let tape = Tape::inference();
        let mut rng = SplitRng::new(23, "pra2");
        let params = pra_params(4, 6, 8, &mut rng);
        let pts = vec![pt(3.0, 1.0, 0.5), pt(3.0, 1.0, 0.5)];
        let a = proposal_radar_attention([4.0, 1.0, 0.5], &pts, &[0, 1], &params, 8, true, &tape);
        let direct = params.mlp3.forward(&tape, &radar_feature_rows(&pts, &[0, 1]));
        for (x, y) in a.values().iter().zip(direct.values()) {
            assert!((x - 0.5 * y).abs() < 1e-12);
        }
    }

    #[test]
    fn pra_matches_direct_formula() {
        let tape = Tape::inference();
        let mut rng = SplitRng::new(24, "pra3");
        let c_a = 5;
        let hidden = 6;
        let freqs = 8;
        let params = pra_params(c_a, hidden, freqs, &mut rng);
        let pts: Vec<RadarPoint> = (0..5)
            .map(|_| {
                let mut p = pt(rng.range(-5.0, 5.0), rng.range(-5.0, 5.0), rng.range(0.0, 2.0));
                p.rcs = rng.range(-5.0, 10.0);
                p.velocity = [rng.range(-3.0, 3.0), rng.range(-3.0, 3.0)];
                p.sweep_age = rng.range(0.0, 0.6);
                p
            })
            .collect();
        let center = [1.0, -2.0, 0.8];
        let idx = [0, 1, 2, 3, 4];
        let a = proposal_radar_attention(center, &pts, &idx, &params, freqs, true, &tape);

        // Direct evaluation of the score/softmax/scale chain.
        let relu = |v: f64| v.max(0.0);
        let mut scores = Vec::new();
        for p in &pts {
            let r = [p.position[0], p.position[1], p.position[2], p.rcs, p.velocity[0], p.velocity[1], p.sweep_age];
            let w1 = params.mlp1.layers[0].weight.values();
            let b1 = params.mlp1.layers[0].bias.values();
            let h: Vec<f64> = (0..6)
                .map(|j| relu(b1[j] + (0..7).map(|i| r[i] * w1[i * 6 + j]).sum::<f64>()))
                .collect();
            let enc = pos_encode(
                [center[0] - p.position[0], center[1] - p.position[1], center[2] - p.position[2]],
                freqs,
            );
            let joint: Vec<f64> = h.iter().chain(enc.iter()).cloned().collect();
            let w2 = params.mlp2.layers[0].weight.values();
            let b2 = params.mlp2.layers[0].bias.values();
            scores.push(b2[0] + joint.iter().enumerate().map(|(i, v)| v * w2[i]).sum::<f64>());
        }
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let weights: Vec<f64> = exps.iter().map(|e| e / z).collect();
        assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let feats = params.mlp3.forward(&tape, &radar_feature_rows(&pts, &idx));
        for k in 0..5 {
            for ch in 0..c_a {
                let want = weights[k] * feats.values()[k * c_a + ch];
                let got = a.values()[k * c_a + ch];
                assert!((got - want).abs() < 1e-12, "k={k} ch={ch}");
            }
        }
    }

    #[test]
    fn pra_softmax_shift_invariance() {
        let tape = Tape::inference();
        let mut rng = SplitRng::new(25, "pra4");
        let mut params = pra_params(4, 6, 8, &mut rng);
        let pts: Vec<RadarPoint> = (0..4).map(|i| pt(i as f64, 1.0, 0.0)).collect();
        let idx = [0, 1, 2, 3];
        let a = proposal_radar_attention([1.5, 1.0, 0.5], &pts, &idx, &params, 8, true, &tape);
        // Shift every score by a constant via the mlp2 bias.
        let b2 = params.mlp2.layers[0].bias.values()[0];
        params.mlp2.layers[0].bias = Tensor::from_vec(&[1], vec![b2 + 7.5]);
        let b = proposal_radar_attention([1.5, 1.0, 0.5], &pts, &idx, &params, 8, true, &tape);
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_points_direct_example() {
        let got = gen_grid_points([0.0, 0.0, 0.0], (0.0, 2.0), 0.0, 0.0, 3, 0.5, 3.0);
        let want = [[0.0, -1.0, 0.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        for (g, w) in got.iter().zip(&want) {
            for i in 0..3 {
                assert!((g[i] - w[i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn grid_span_upper_clamp() {
        let got = gen_grid_points([1.0, 1.0, 0.0], (10.0, 0.0), 0.0, 0.0, 2, 0.5, 3.0);
        // gamma = 3: endpoints at x = 1 - 1.5 and 1 + 1.5
        assert!((got[0][0] - -0.5).abs() < 1e-15);
        assert!((got[1][0] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn grid_odd_t_center_is_radar_point() {
        let got = gen_grid_points([4.0, -2.0, 0.7], (1.3, 0.7), 0.0, 0.7, 7, 0.5, 3.0);
        let mid = got[3];
        assert!((mid[0] - 4.0).abs() < 1e-12);
        assert!((mid[1] - -2.0).abs() < 1e-12);
    }

    #[test]
    fn grid_collinear_with_exact_spacing() {
        let v = (0.9, 1.7);
        let t = 5;
        let got = gen_grid_points([2.0, 3.0, 0.5], v, 0.0, 0.5, t, 0.5, 3.0);
        let mag = (v.0 * v.0 + v.1 * v.1).sqrt();
        let gamma = mag.clamp(0.5, 3.0);
        let spacing = gamma / (t - 1) as f64;
        for pair in got.windows(2) {
            let dx = pair[1][0] - pair[0][0];
            let dy = pair[1][1] - pair[0][1];
            assert!(((dx * dx + dy * dy).sqrt() - spacing).abs() < 1e-12);
            // Collinear with v:
            assert!((dx * v.1 - dy * v.0).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_zero_velocity_uses_yaw_perpendicular() {
        let yaw = 0.6;
        let got = gen_grid_points([0.0, 0.0, 0.0], (0.0, 0.0), yaw, 0.0, 3, 0.5, 3.0);
        let d = (got[2][0] - got[0][0], got[2][1] - got[0][1]);
        let len = (d.0 * d.0 + d.1 * d.1).sqrt();
        assert!((len - 0.5).abs() < 1e-12, "span must be rho_min");
        // Perpendicular to the yaw direction:
        assert!((d.0 * yaw.cos() + d.1 * yaw.sin()).abs() < 1e-12);
    }

    #[test]
    fn fps_collinear_example() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        let got = fps(&pts, 2, [0.0, 0.0, 0.0]);
        assert_eq!(got, vec![0, 3]);
    }

    #[test]
    fn fps_identity_when_few_candidates() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        assert_eq!(fps(&pts, 5, [0.0, 0.0, 0.0]), vec![0, 1]);
    }

    #[test]
    fn fps_greedy_step_property() {
        let mut rng = SplitRng::new(26, "fps");
        let pts: Vec<[f64; 3]> = (0..30).map(|_| [rng.range(-5.0, 5.0), rng.range(-5.0, 5.0), rng.range(-1.0, 1.0)]).collect();
        let m = 8;
        let got = fps(&pts, m, [0.0, 0.0, 0.0]);
        for step in 1..got.len() {
            let chosen = got[step];
            let prior = &got[..step];
            let chosen_min: f64 = prior.iter().map(|&j| dist2(&pts[chosen], &pts[j])).fold(f64::INFINITY, f64::min);
            for i in 0..pts.len() {
                let d: f64 = prior.iter().map(|&j| dist2(&pts[i], &pts[j])).fold(f64::INFINITY, f64::min);
                assert!(
                    d < chosen_min || (d == chosen_min && chosen <= i),
                    "step {step}: candidate {i} beats chosen {chosen}"
                );
            }
        }
    }

    #[test]
    fn set_abstraction_empty_balls_are_zero() {
        let tape = Tape::inference();
        let mut rng = SplitRng::new(27, "setabs");
        let params = pra_params(4, 6, 8, &mut rng);
        let attended = Tensor::from_vec(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]);
        let far_grid = [[100.0, 100.0, 0.0]];
        let out = set_abstraction(&attended, &[[0.0, 0.0, 0.0]], &far_grid, &[0.8, 1.6], &params.set_mlps, &tape);
        assert_eq!(out.shape(), &[1, 4]);
        assert!(out.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn set_abstraction_coincident_point() {
        let tape = Tape::inference();
        let mut rng = SplitRng::new(28, "setabs2");
        let params = pra_params(4, 6, 8, &mut rng);
        let attended = Tensor::from_vec(&[1, 4], vec![0.5, -0.25, 1.5, 2.0]);
        let g = [[2.0, 3.0, 0.5]];
        let out = set_abstraction(&attended, &[[2.0, 3.0, 0.5]], &g, &[0.8, 1.6], &params.set_mlps, &tape);
        let joint = Tensor::from_vec(&[1, 7], vec![0.5, -0.25, 1.5, 2.0, 0.0, 0.0, 0.0]);
        let w0 = params.set_mlps[0].forward(&tape, &joint);
        let w1 = params.set_mlps[1].forward(&tape, &joint);
        let want: Vec<f64> = w0.values().iter().chain(w1.values()).cloned().collect();
        for (a, b) in out.values().iter().zip(&want) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn set_abstraction_permutation_invariant() {
        let tape = Tape::inference();
        let mut rng = SplitRng::new(29, "setabs3");
        let params = pra_params(4, 6, 8, &mut rng);
        let k = 12;
        let a_vals: Vec<f64> = (0..k * 4).map(|_| rng.range(-1.0, 1.0)).collect();
        let positions: Vec<[f64; 3]> = (0..k).map(|_| [rng.range(-2.0, 2.0), rng.range(-2.0, 2.0), rng.range(-0.5, 0.5)]).collect();
        let grid = [[0.0, 0.0, 0.0], [1.0, 0.5, 0.0], [-0.5, 1.0, 0.2]];
        let attended = Tensor::from_vec(&[k, 4], a_vals.clone());
        let base = set_abstraction(&attended, &positions, &grid, &[0.8, 1.6], &params.set_mlps, &tape);

        let perm: Vec<usize> = (0..k).rev().collect();
        let shuffled_vals: Vec<f64> = perm.iter().flat_map(|&i| a_vals[i * 4..(i + 1) * 4].to_vec()).collect();
        let shuffled_pos: Vec<[f64; 3]> = perm.iter().map(|&i| positions[i]).collect();
        let attended_s = Tensor::from_vec(&[k, 4], shuffled_vals);
        let other = set_abstraction(&attended_s, &shuffled_pos, &grid, &[0.8, 1.6], &params.set_mlps, &tape);
        for (a, b) in base.values().iter().zip(other.values()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    fn test_cam(c: usize, constant: Option<f64>) -> CameraFeatures {
        use crate::geometry::{CameraModel, RigidTransform};
        use nalgebra::Matrix3;
        let image = 32;
        let focal = image as f64 / 2.0;
        let cxy = (image as f64 - 1.0) / 2.0;
        let rotation = Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
        let model = CameraModel {
            intrinsics: Matrix3::new(focal, 0.0, cxy, 0.0, focal, cxy, 0.0, 0.0, 1.0),
            extrinsics: RigidTransform::new(rotation, Vector3::zeros()),
            image_size: (image, image),
            feature_scales: vec![0.125],
        };
        let side = image / 8;
        let mut rng = SplitRng::new(31, "cam");
        let values = match constant {
            Some(k) => vec![k; side * side * c],
            None => (0..side * side * c).map(|_| rng.range(-1.0, 1.0)).collect(),
        };
        CameraFeatures { levels: vec![Tensor::from_vec(&[side, side, c], values)], model }
    }

    #[test]
    fn image_pool_behind_cameras_is_zero() {
        let tape = Tape::inference();
        let cam = test_cam(4, None);
        let out = pool_image_features(&[[-5.0, 0.0, 0.5]], std::slice::from_ref(&cam), &tape);
        assert!(out.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn image_pool_constant_field() {
        let tape = Tape::inference();
        let cam = test_cam(4, Some(3.25));
        let out = pool_image_features(&[[6.0, 0.0, 0.0]], std::slice::from_ref(&cam), &tape);
        for v in out.values() {
            assert!((v - 3.25).abs() < 1e-12);
        }
    }

    #[test]
    fn image_pool_averages_two_views() {
        let tape = Tape::inference();
        let a = test_cam(4, Some(1.0));
        let b = test_cam(4, Some(5.0));
        let out = pool_image_features(&[[6.0, 0.0, 0.0]], &[a, b], &tape);
        for v in out.values() {
            assert!((v - 3.0).abs() < 1e-12);
        }
    }

    fn proposal() -> Proposal {
        Proposal {
            center: [6.0, 1.0, 0.8],
            size: [1.8, 4.2, 1.6],
            yaw: 0.4,
            velocity: [2.0, -1.0],
            score: 0.7,
            class: 0,
            latent: vec![0.0; 4],
            cell: 0,
        }
    }

    #[test]
    fn zero_head_refinement_is_exact_noop() {
        let tape = Tape::inference();
        let mut rng = SplitRng::new(32, "refine");
        let params = pra_params(4, 6, 8, &mut rng);
        let cfg = RefineConfig {
            t: 3,
            m: 4,
            channels: 4,
            hidden: 6,
            ball_radii: vec![0.8, 1.6],
            ..RefineConfig::default()
        };
        let b = proposal();
        let latent = Tensor::zeros(&[1, 4]);
        let pts = vec![pt(6.1, 1.1, 0.6), pt(5.8, 0.9, 0.7)];
        let cam = test_cam(4, None);
        let refined = refine_one(&b, &latent, &pts, std::slice::from_ref(&cam), &params, &cfg, true, &tape);
        assert_eq!(refined.center, b.center);
        assert_eq!(refined.size, b.size);
        assert_eq!(refined.yaw, b.yaw);
        assert_eq!(refined.velocity, b.velocity);
        assert_eq!(refined.score, b.score);
    }

    #[test]
    fn no_associated_points_bypasses() {
        let tape = Tape::inference();
        let mut rng = SplitRng::new(33, "refine2");
        let params = pra_params(4, 6, 8, &mut rng);
        let cfg = RefineConfig { t: 3, m: 4, channels: 4, hidden: 6, ball_radii: vec![0.8, 1.6], ..RefineConfig::default() };
        let b = proposal();
        let latent = Tensor::zeros(&[1, 4]);
        let cam = test_cam(4, None);
        let refined = refine_one(&b, &latent, &[], std::slice::from_ref(&cam), &params, &cfg, true, &tape);
        assert_eq!(refined.center, b.center);
        assert_eq!(refined.score, b.score);
    }

    #[test]
    fn random_refinement_preserves_invariants() {
        let tape = Tape::inference();
        let mut rng = SplitRng::new(34, "refine3");
        let mut params = pra_params(4, 6, 8, &mut rng);
        // Non-trivial head.
        let vals: Vec<f64> = (0..8 * DELTA_WIDTH).map(|_| rng.range(-0.8, 0.8)).collect();
        let bias: Vec<f64> = (0..DELTA_WIDTH).map(|_| rng.range(-0.5, 0.5)).collect();
        params.head = linear(8, DELTA_WIDTH, vals, bias, Activation::None);
        let cfg = RefineConfig { t: 3, m: 4, channels: 4, hidden: 6, ball_radii: vec![0.8, 1.6], ..RefineConfig::default() };
        let cam = test_cam(4, None);
        for trial in 0..20 {
            let mut b = proposal();
            b.center = [rng.range(3.0, 10.0), rng.range(-5.0, 5.0), rng.range(0.3, 1.5)];
            b.yaw = rng.range(-3.1, 3.1);
            b.score = rng.range(0.05, 0.95);
            let latent = Tensor::from_vec(&[1, 4], (0..4).map(|_| rng.range(-1.0, 1.0)).collect());
            let pts: Vec<RadarPoint> = (0..3)
                .map(|_| pt(b.center[0] + rng.range(-0.5, 0.5), b.center[1] + rng.range(-0.5, 0.5), rng.range(0.0, 1.5)))
                .collect();
            let refined = refine_one(&b, &latent, &pts, std::slice::from_ref(&cam), &params, &cfg, true, &tape);
            assert!(refined.size.iter().all(|s| *s > 0.0), "trial {trial}");
            assert!(refined.yaw > -std::f64::consts::PI && refined.yaw <= std::f64::consts::PI);
            assert!((0.0..=1.0).contains(&refined.score));
            assert!(refined.center.iter().all(|v| v.is_finite()));
        }
    }
}
