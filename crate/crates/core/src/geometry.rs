//! Coordinate frames, camera projection, polar transforms, and velocity
//! decomposition.
//!
//! Conventions used throughout: the ego frame has x forward, y left, z up;
//! azimuth is measured from the +x axis, counterclockwise, in `(-π, π]`.
//! Camera frames are standard pinhole: z forward (depth), x right, y down.
//! BEV grid cells are indexed `(row, col)` with rows along y and columns
//! along x; the metric extent is half-open, `[min, max)` on both axes.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_CAMERA_DEPTH: f64 = 0.1;
const ROTATION_TOL: f64 = 1e-9;

/// Rigid transform `p' = R p + t`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "TransformRepr", into = "TransformRepr")]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// JSON shape of a rigid transform: row-major rotation plus translation.
#[derive(Serialize, Deserialize)]
struct TransformRepr {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl From<TransformRepr> for RigidTransform {
    fn from(r: TransformRepr) -> RigidTransform {
        let m = r.rotation;
        RigidTransform {
            rotation: Matrix3::new(
                m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
            ),
            translation: Vector3::new(r.translation[0], r.translation[1], r.translation[2]),
        }
    }
}

impl From<RigidTransform> for TransformRepr {
    fn from(t: RigidTransform) -> TransformRepr {
        let m = &t.rotation;
        TransformRepr {
            rotation: [
                [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
                [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
                [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
            ],
            translation: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

impl RigidTransform {
    pub fn identity() -> RigidTransform {
        RigidTransform { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> RigidTransform {
        RigidTransform { rotation, translation }
    }

    /// Rotation about +z by `angle`, plus translation.
    pub fn planar(angle: f64, tx: f64, ty: f64) -> RigidTransform {
        let (s, c) = angle.sin_cos();
        let rotation = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        RigidTransform { rotation, translation: Vector3::new(tx, ty, 0.0) }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Rotate a direction without translating (velocities, axes).
    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Verify `RᵀR = I` within tolerance.
    pub fn validate_rotation(&self) -> Result<()> {
        let delta = self.rotation.transpose() * self.rotation - Matrix3::identity();
        let worst = delta.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if worst > ROTATION_TOL {
            return Err(Error::data(format!("rotation is not orthonormal (max deviation {worst:.3e})")));
        }
        Ok(())
    }
}

/// Pinhole camera: intrinsics, ego-to-camera extrinsics, image size in
/// pixels, and the feature-map scale of each pyramid level.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "CameraRepr", into = "CameraRepr")]
pub struct CameraModel {
    pub intrinsics: Matrix3<f64>,
    pub extrinsics: RigidTransform,
    pub image_size: (usize, usize),
    pub feature_scales: Vec<f64>,
}

/// JSON shape of a camera: row-major intrinsics, extrinsics, (width,
/// height), per-level feature scales.
#[derive(Serialize, Deserialize)]
struct CameraRepr {
    intrinsics: [[f64; 3]; 3],
    extrinsics: RigidTransform,
    image_size: (usize, usize),
    feature_scales: Vec<f64>,
}

impl From<CameraRepr> for CameraModel {
    fn from(r: CameraRepr) -> CameraModel {
        let m = r.intrinsics;
        CameraModel {
            intrinsics: Matrix3::new(
                m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
            ),
            extrinsics: r.extrinsics,
            image_size: r.image_size,
            feature_scales: r.feature_scales,
        }
    }
}

impl From<CameraModel> for CameraRepr {
    fn from(c: CameraModel) -> CameraRepr {
        let m = &c.intrinsics;
        CameraRepr {
            intrinsics: [
                [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
                [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
                [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
            ],
            extrinsics: c.extrinsics,
            image_size: c.image_size,
            feature_scales: c.feature_scales,
        }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        self.extrinsics.validate_rotation()?;
        let (fx, fy) = (self.intrinsics[(0, 0)], self.intrinsics[(1, 1)]);
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::data(format!("camera focal lengths must be positive, got ({fx}, {fy})")));
        }
        Ok(())
    }

    /// Project an ego-frame point to image pixels. Returns the pixel
    /// coordinate and a validity flag; invalid when the depth is at or below
    /// [`MIN_CAMERA_DEPTH`] or the pixel lands outside the image.
    pub fn project_pixel(&self, p_ego: &Vector3<f64>) -> ((f64, f64), bool) {
        let cam = self.extrinsics.apply(p_ego);
        let depth = cam.z;
        if depth <= MIN_CAMERA_DEPTH {
            return ((0.0, 0.0), false);
        }
        let fx = self.intrinsics[(0, 0)];
        let fy = self.intrinsics[(1, 1)];
        let cx = self.intrinsics[(0, 2)];
        let cy = self.intrinsics[(1, 2)];
        let skew = self.intrinsics[(0, 1)];
        let u = (fx * cam.x + skew * cam.y) / depth + cx;
        let v = fy * cam.y / depth + cy;
        let (w, h) = self.image_size;
        let valid = u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64;
        ((u, v), valid)
    }

    /// Project to the feature map of a pyramid level: image pixels scaled by
    /// the level's feature scale.
    pub fn project_level(&self, p_ego: &Vector3<f64>, level: usize) -> ((f64, f64), bool) {
        let ((u, v), valid) = self.project_pixel(p_ego);
        let s = self.feature_scales[level];
        ((u * s, v * s), valid)
    }
}

/// Project a point into every camera at the given feature level.
pub fn project_to_cameras(point: &Vector3<f64>, cams: &[CameraModel], level: usize) -> Vec<(usize, (f64, f64), bool)> {
    cams.iter()
        .enumerate()
        .map(|(i, cam)| {
            let (uv, valid) = cam.project_level(point, level);
            (i, uv, valid)
        })
        .collect()
}

/// Metric extent, resolution, and channel count of every BEV map.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BevGridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub resolution: f64,
    pub channels: usize,
    #[serde(skip)]
    h: usize,
    #[serde(skip)]
    w: usize,
}

impl BevGridSpec {
    /// Validated constructor: extents must divide evenly into at least 8
    /// cells per axis.
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64, resolution: f64, channels: usize) -> Result<BevGridSpec> {
        let spec = BevGridSpec::new_unchecked(x_min, x_max, y_min, y_max, resolution, channels)?;
        if spec.h < 8 || spec.w < 8 {
            return Err(Error::config(format!("BEV grid must be at least 8x8 cells, got {}x{}", spec.h, spec.w)));
        }
        Ok(spec)
    }

    /// Constructor without the 8-cell minimum, for micro-grids in numeric
    /// verification; production configs go through [`BevGridSpec::new`].
    pub fn new_unchecked(
        x_min: f64,
        x_max: f64,
        y_min: f64,
        y_max: f64,
        resolution: f64,
        channels: usize,
    ) -> Result<BevGridSpec> {
        if !(resolution > 0.0) || x_max <= x_min || y_max <= y_min || channels == 0 {
            return Err(Error::config(format!(
                "invalid BEV grid: x [{x_min}, {x_max}], y [{y_min}, {y_max}], resolution {resolution}, channels {channels}"
            )));
        }
        let wf = (x_max - x_min) / resolution;
        let hf = (y_max - y_min) / resolution;
        if (wf - wf.round()).abs() > 1e-9 || (hf - hf.round()).abs() > 1e-9 {
            return Err(Error::config(format!(
                "BEV extent must divide evenly by the resolution, got {wf} x {hf} cells"
            )));
        }
        Ok(BevGridSpec {
            x_min,
            x_max,
            y_min,
            y_max,
            resolution,
            channels,
            h: hf.round() as usize,
            w: wf.round() as usize,
        })
    }

    /// Recompute the cached cell counts after deserialization.
    pub fn revalidate(&self) -> Result<BevGridSpec> {
        BevGridSpec::new(self.x_min, self.x_max, self.y_min, self.y_max, self.resolution, self.channels)
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn num_cells(&self) -> usize {
        self.h * self.w
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }

    /// Floor-quantized cell of a position; `None` outside the extent.
    /// Positions exactly on a cell boundary fall into the lower cell.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !self.contains(x, y) {
            return None;
        }
        let col = ((x - self.x_min) / self.resolution).floor() as usize;
        let row = ((y - self.y_min) / self.resolution).floor() as usize;
        Some((row.min(self.h - 1), col.min(self.w - 1)))
    }

    /// Metric center of a cell.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.x_min + (col as f64 + 0.5) * self.resolution,
            self.y_min + (row as f64 + 0.5) * self.resolution,
        )
    }
}

/// Polar coordinate in the BEV plane: range in meters, azimuth from +x in
/// `(-π, π]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarCoord {
    pub range: f64,
    pub azimuth: f64,
}

/// Cartesian-to-polar with the degenerate convention `(0, 0) → (0, 0)`.
pub fn to_polar(x: f64, y: f64) -> PolarCoord {
    if x == 0.0 && y == 0.0 {
        return PolarCoord { range: 0.0, azimuth: 0.0 };
    }
    PolarCoord { range: x.hypot(y), azimuth: wrap_angle(y.atan2(x)) }
}

pub fn to_cartesian(p: &PolarCoord) -> (f64, f64) {
    (p.range * p.azimuth.cos(), p.range * p.azimuth.sin())
}

/// Wrap an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut r = a % two_pi;
    if r <= -std::f64::consts::PI {
        r += two_pi;
    } else if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// Smallest absolute difference between two angles, in `[0, π]`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    wrap_angle(a - b).abs()
}

/// Split a 2D velocity into its radial component (along the ego-to-center
/// line of sight) and the tangential remainder.
///
/// Errors when the center is within 1e-6 m of the ego origin, where the line
/// of sight is undefined.
pub fn decompose_velocity(v: (f64, f64), center: (f64, f64)) -> Result<((f64, f64), (f64, f64))> {
    let norm = center.0.hypot(center.1);
    if norm < 1e-6 {
        return Err(Error::numeric("velocity decomposition at a degenerate center (|c| < 1e-6 m)"));
    }
    let (cx, cy) = (center.0 / norm, center.1 / norm);
    let along = v.0 * cx + v.1 * cy;
    let v_rad = (along * cx, along * cy);
    let v_tan = (v.0 - v_rad.0, v.1 - v_rad.1);
    Ok((v_tan, v_rad))
}
