//! Deterministic synthetic scene generation: boxes, radar sweeps with
//! anisotropic noise, clutter, and splat-based camera feature rasters.

use nalgebra::{Matrix3, Vector3};

use crate::config::{RunConfig, NUM_CLASSES};
use crate::error::Result;
use crate::geometry::{CameraModel, RigidTransform};
use crate::rng::SplitRng;
use crate::scene::{FeatureLevel, GtBox, RadarPoint, RadarSweep, SceneRecord};

/// Class-typical (width, length, height) in meters.
const CLASS_SIZES: [[f64; 3]; NUM_CLASSES] = [[1.9, 4.6, 1.7], [0.7, 0.7, 1.7], [0.7, 1.9, 1.4]];
/// Speed multiplier per class on top of the configured maximum.
const CLASS_SPEED: [f64; NUM_CLASSES] = [1.0, 0.2, 0.5];
/// Mean radar cross section per class, dBsm.
const CLASS_RCS: [f64; NUM_CLASSES] = [12.0, 0.0, 5.0];
const CLUTTER_RCS_MEAN: f64 = -4.0;
const CAMERA_HEIGHT: f64 = 1.6;
/// Closest allowed box center to the ego origin.
const MIN_EGO_DISTANCE: f64 = 4.0;
/// Minimum 2D separation between box centers.
const MIN_SEPARATION: f64 = 3.0;

/// Build the fixed camera rig: `n` level pinhole cameras at the ego origin,
/// headings evenly spaced over 360°, square images, 90°-class field of view.
pub fn camera_rig(cfg: &RunConfig) -> Vec<CameraModel> {
    let n = cfg.scene.cameras;
    let size = cfg.scene.image_size as f64;
    let focal = size / 2.0;
    let cxy = (size - 1.0) / 2.0;
    let intrinsics = Matrix3::new(focal, 0.0, cxy, 0.0, focal, cxy, 0.0, 0.0, 1.0);
    let scales: Vec<f64> = (0..cfg.scene.feature_levels).map(|l| 1.0 / (8 << l) as f64).collect();
    (0..n)
        .map(|k| {
            let heading = std::f64::consts::TAU * k as f64 / n as f64;
            let (s, c) = heading.sin_cos();
            // Rows: camera x (right), y (down), z (forward along heading).
            let rotation = Matrix3::new(s, -c, 0.0, 0.0, 0.0, -1.0, c, s, 0.0);
            let position = Vector3::new(0.0, 0.0, CAMERA_HEIGHT);
            let translation = -(rotation * position);
            CameraModel {
                intrinsics,
                extrinsics: RigidTransform::new(rotation, translation),
                image_size: (cfg.scene.image_size, cfg.scene.image_size),
                feature_scales: scales.clone(),
            }
        })
        .collect()
}

fn sample_boxes(cfg: &RunConfig, rng: &mut SplitRng) -> Vec<GtBox> {
    let n = rng.range_usize(cfg.scene.boxes_min, cfg.scene.boxes_max);
    let m = cfg.scene.margin;
    let (x_lo, x_hi) = (cfg.grid.x_min + m, cfg.grid.x_max - m);
    let (y_lo, y_hi) = (cfg.grid.y_min + m, cfg.grid.y_max - m);
    let mut boxes: Vec<GtBox> = Vec::with_capacity(n);
    for _ in 0..n {
        let class = rng.range_usize(0, NUM_CLASSES - 1);
        let mut x = 0.0;
        let mut y = 0.0;
        for attempt in 0..100 {
            x = rng.range(x_lo, x_hi);
            y = rng.range(y_lo, y_hi);
            let clear = (x * x + y * y).sqrt() >= MIN_EGO_DISTANCE
                && boxes.iter().all(|b| {
                    let (dx, dy) = (b.center[0] - x, b.center[1] - y);
                    (dx * dx + dy * dy).sqrt() >= MIN_SEPARATION
                });
            if clear || attempt == 99 {
                break;
            }
        }
        let base = CLASS_SIZES[class];
        let size = [
            (base[0] * (1.0 + 0.1 * rng.normal())).max(0.3),
            (base[1] * (1.0 + 0.1 * rng.normal())).max(0.3),
            (base[2] * (1.0 + 0.1 * rng.normal())).max(0.3),
        ];
        let yaw = rng.range(-std::f64::consts::PI, std::f64::consts::PI);
        let speed = rng.range(0.0, cfg.scene.speed_max * CLASS_SPEED[class]);
        let dir = rng.range(-std::f64::consts::PI, std::f64::consts::PI);
        boxes.push(GtBox {
            center: [x, y, size[2] / 2.0],
            size,
            yaw,
            velocity: [speed * dir.cos(), speed * dir.sin()],
            class,
        });
    }
    boxes
}

/// 2D corners of a box footprint, counterclockwise from front-left, world
/// frame.
fn footprint(center: [f64; 3], size: [f64; 3], yaw: f64) -> [(f64, f64); 4] {
    let (hw, hl) = (size[0] / 2.0, size[1] / 2.0);
    let (s, c) = yaw.sin_cos();
    let local = [(hl, hw), (hl, -hw), (-hl, -hw), (-hl, hw)];
    local.map(|(lx, ly)| (center[0] + c * lx - s * ly, center[1] + s * lx + c * ly))
}

/// Outward 2D normals for the edges of [`footprint`], same order.
fn edge_normals(yaw: f64) -> [(f64, f64); 4] {
    let (s, c) = yaw.sin_cos();
    // Local normals: front (+x), right (-y), back (-x), left (+y).
    [(c, s), (s, -c), (-c, -s), (-s, c)]
}

fn sample_box_return(
    b: &GtBox,
    past_center: [f64; 3],
    ego_pos: (f64, f64),
    cfg: &RunConfig,
    age: f64,
    rng: &mut SplitRng,
) -> RadarPoint {
    let corners = footprint(past_center, b.size, b.yaw);
    let normals = edge_normals(b.yaw);
    let mut facing: Vec<usize> = Vec::with_capacity(2);
    for e in 0..4 {
        let mid = (
            (corners[e].0 + corners[(e + 1) % 4].0) / 2.0,
            (corners[e].1 + corners[(e + 1) % 4].1) / 2.0,
        );
        let view = (mid.0 - ego_pos.0, mid.1 - ego_pos.1);
        if normals[e].0 * view.0 + normals[e].1 * view.1 < 0.0 {
            facing.push(e);
        }
    }
    if facing.is_empty() {
        facing.extend(0..4);
    }
    let e = facing[rng.range_usize(0, facing.len() - 1)];
    let t = rng.uniform();
    let a = corners[e];
    let bb = corners[(e + 1) % 4];
    let mut x = a.0 + t * (bb.0 - a.0);
    let mut y = a.1 + t * (bb.1 - a.1);
    let z = past_center[2] + b.size[2] * (rng.uniform() - 0.5);

    // Noise in the measuring polar frame: tangential dominates.
    let view = (x - ego_pos.0, y - ego_pos.1);
    let dist = (view.0 * view.0 + view.1 * view.1).sqrt().max(1e-9);
    let radial = (view.0 / dist, view.1 / dist);
    let tangential = (-radial.1, radial.0);
    let nr = rng.normal_scaled(cfg.scene.sigma_radial);
    let nt = rng.normal_scaled(cfg.scene.sigma_radial * cfg.scene.tangential_ratio);
    x += nr * radial.0 + nt * tangential.0;
    y += nr * radial.1 + nt * tangential.1;

    // Doppler: the radial component of the object velocity plus noise,
    // reported as an ego-motion-compensated 2D vector along the ray.
    let v_radial = b.velocity[0] * radial.0 + b.velocity[1] * radial.1 + rng.normal_scaled(cfg.scene.doppler_sigma);
    let rcs = CLASS_RCS[b.class] + rng.normal_scaled(2.5);
    RadarPoint {
        position: [x, y, z],
        rcs,
        velocity: [v_radial * radial.0, v_radial * radial.1],
        sweep_age: age,
    }
}

fn sample_sweeps(cfg: &RunConfig, boxes: &[GtBox], radar_rng: &mut SplitRng, clutter_rng: &mut SplitRng) -> Vec<RadarSweep> {
    let period = cfg.radar.sweep_period;
    let mut sweeps = Vec::with_capacity(cfg.radar.sweeps);
    for i in 0..cfg.radar.sweeps {
        let age = i as f64 * period;
        // Ego reaches the origin at the current frame, moving along +x.
        let ego_pos = (-cfg.scene.ego_speed * age, 0.0);
        let pose = RigidTransform::planar(0.0, ego_pos.0, ego_pos.1);
        let mut points = Vec::new();
        for b in boxes {
            let past_center = [b.center[0] - b.velocity[0] * age, b.center[1] - b.velocity[1] * age, b.center[2]];
            let count = radar_rng.range_usize(cfg.scene.returns_min, cfg.scene.returns_max);
            for _ in 0..count {
                let mut p = sample_box_return(b, past_center, ego_pos, cfg, age, radar_rng);
                // Store in the sweep's own ego frame.
                p.position[0] -= ego_pos.0;
                p.position[1] -= ego_pos.1;
                points.push(p);
            }
        }
        let n_clutter = clutter_rng.range_usize(cfg.scene.clutter_min, cfg.scene.clutter_max);
        for _ in 0..n_clutter {
            let x = clutter_rng.range(cfg.grid.x_min, cfg.grid.x_max);
            let y = clutter_rng.range(cfg.grid.y_min, cfg.grid.y_max);
            let z = clutter_rng.range(0.0, 3.0);
            points.push(RadarPoint {
                position: [x, y, z],
                rcs: CLUTTER_RCS_MEAN + clutter_rng.normal_scaled(4.0),
                velocity: [clutter_rng.normal_scaled(0.3), clutter_rng.normal_scaled(0.3)],
                sweep_age: age,
            });
        }
        sweeps.push(RadarSweep { points, ego_pose: pose, timestamp: -age });
    }
    sweeps
}

fn splat_features(cfg: &RunConfig, boxes: &[GtBox], cams: &[CameraModel], rng: &mut SplitRng) -> Vec<Vec<FeatureLevel>> {
    let c_out = cfg.grid.channels;
    let sigma = cfg.scene.splat_sigma;
    let mut all = Vec::with_capacity(cams.len());
    for cam in cams {
        let mut stack = Vec::with_capacity(cfg.scene.feature_levels);
        for level in 0..cfg.scene.feature_levels {
            let side = cfg.scene.image_size / (8 << level);
            let mut raster = vec![0.0f64; side * side * c_out];
            for b in boxes {
                let p = Vector3::new(b.center[0], b.center[1], b.center[2]);
                let ((u, v), valid) = cam.project_level(&p, level);
                if !valid {
                    continue;
                }
                let depth = cam.extrinsics.apply(&p).z;
                let amp = 10.0 / (10.0 + depth);
                let reach = (3.0 * sigma).ceil() as isize;
                let (cu, cv) = (u.round() as isize, v.round() as isize);
                for py in (cv - reach).max(0)..=(cv + reach).min(side as isize - 1) {
                    for px in (cu - reach).max(0)..=(cu + reach).min(side as isize - 1) {
                        let du = px as f64 - u;
                        let dv = py as f64 - v;
                        let g = amp * (-(du * du + dv * dv) / (2.0 * sigma * sigma)).exp();
                        for ch in 0..c_out {
                            let w = if ch % NUM_CLASSES == b.class { 1.0 } else { 0.15 };
                            raster[(py as usize * side + px as usize) * c_out + ch] += g * w;
                        }
                    }
                }
            }
            if cfg.scene.feature_noise > 0.0 {
                for v in raster.iter_mut() {
                    *v += rng.normal_scaled(cfg.scene.feature_noise);
                }
            }
            stack.push(FeatureLevel::encode([side, side, c_out], &raster));
        }
        all.push(stack);
    }
    all
}

/// Generate one scene. Byte-identical output for identical `(cfg, scene_id,
/// seed)`.
pub fn generate_scene(cfg: &RunConfig, scene_id: &str, seed: u64) -> Result<SceneRecord> {
    cfg.validate()?;
    let mut box_rng = SplitRng::new(seed, "boxes");
    let mut radar_rng = SplitRng::new(seed, "radar");
    let mut clutter_rng = SplitRng::new(seed, "clutter");
    let mut feature_rng = SplitRng::new(seed, "features");

    let boxes = sample_boxes(cfg, &mut box_rng);
    let sweeps = sample_sweeps(cfg, &boxes, &mut radar_rng, &mut clutter_rng);
    let cams = camera_rig(cfg);
    let features = splat_features(cfg, &boxes, &cams, &mut feature_rng);

    let record = SceneRecord { scene_id: scene_id.to_string(), gt: boxes, sweeps, cameras: cams, features, seed };
    record.validate_against(&cfg.grid_spec()?)?;
    Ok(record)
}

/// Per-scene seed derived from the run seed and the scene id.
pub fn scene_seed(base_seed: u64, scene_id: &str) -> u64 {
    crate::rng::split_seed(base_seed, scene_id)
}
