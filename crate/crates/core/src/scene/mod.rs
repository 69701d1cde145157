//! Scene records: ground truth, radar sweeps, camera calibration, and
//! camera feature rasters, with JSON (de)serialization.

pub mod gen;

use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::config::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::geometry::{BevGridSpec, CameraModel, RigidTransform};

pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["car", "pedestrian", "cycle"];

/// One ground-truth 3D box.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GtBox {
    /// Center (x, y, z) in the current ego frame, meters.
    pub center: [f64; 3],
    /// (width, length, height), meters.
    pub size: [f64; 3],
    /// Heading about +z, radians in `(-π, π]`.
    pub yaw: f64,
    /// Ground velocity (vx, vy), m/s.
    pub velocity: [f64; 2],
    pub class: usize,
}

/// One radar return, stored in its sweep's ego frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RadarPoint {
    pub position: [f64; 3],
    /// Radar cross section, dBsm.
    pub rcs: f64,
    /// Ego-motion-compensated Doppler velocity (vx, vy), m/s.
    pub velocity: [f64; 2],
    /// Seconds since this point was measured; 0 for the current sweep.
    pub sweep_age: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RadarSweep {
    pub points: Vec<RadarPoint>,
    /// Transform from this sweep's ego frame into the current ego frame.
    pub ego_pose: RigidTransform,
    /// Seconds; the newest sweep carries the largest timestamp.
    pub timestamp: f64,
}

/// One feature raster, base64-encoded little-endian fp32.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureLevel {
    /// (height, width, channels).
    pub shape: [usize; 3],
    pub data: String,
}

impl FeatureLevel {
    pub fn encode(shape: [usize; 3], values: &[f64]) -> FeatureLevel {
        assert_eq!(shape[0] * shape[1] * shape[2], values.len(), "raster shape mismatch");
        let mut bytes = Vec::with_capacity(values.len() * 4);
        for v in values {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        FeatureLevel { shape, data: B64.encode(bytes) }
    }

    pub fn decode(&self) -> Result<Vec<f64>> {
        let expected = self.shape[0].checked_mul(self.shape[1]).and_then(|n| n.checked_mul(self.shape[2]));
        let expected = expected.ok_or_else(|| Error::data("feature raster shape overflows"))?;
        let bytes = B64
            .decode(self.data.as_bytes())
            .map_err(|e| Error::data(format!("feature raster base64: {e}")))?;
        if bytes.len() != expected * 4 {
            return Err(Error::data(format!(
                "feature raster length mismatch: shape wants {} bytes, got {}",
                expected * 4,
                bytes.len()
            )));
        }
        let mut out = Vec::with_capacity(expected);
        for chunk in bytes.chunks_exact(4) {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
            if !v.is_finite() {
                return Err(Error::data("feature raster contains a non-finite value"));
            }
            out.push(v);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: String,
    pub gt: Vec<GtBox>,
    /// Newest sweep first.
    pub sweeps: Vec<RadarSweep>,
    pub cameras: Vec<CameraModel>,
    /// Indexed `[camera][level]`.
    pub features: Vec<Vec<FeatureLevel>>,
    pub seed: u64,
}

impl SceneRecord {
    /// Structural checks that do not need the run config: classes in range,
    /// finite values, orthonormal sweep poses, camera/feature list agreement,
    /// halving feature levels.
    pub fn validate(&self) -> Result<()> {
        for b in &self.gt {
            if b.class >= NUM_CLASSES {
                return Err(Error::data(format!("gt class {} out of range", b.class)));
            }
            let finite = b.center.iter().chain(&b.size).chain(&b.velocity).all(|v| v.is_finite());
            if !finite || !b.yaw.is_finite() || b.size.iter().any(|s| *s <= 0.0) {
                return Err(Error::data("gt box has non-finite or non-positive fields"));
            }
        }
        for (i, s) in self.sweeps.iter().enumerate() {
            s.ego_pose.validate_rotation()?;
            if !s.timestamp.is_finite() {
                return Err(Error::data(format!("sweep {i} timestamp not finite")));
            }
            for p in &s.points {
                let finite =
                    p.position.iter().chain(&p.velocity).all(|v| v.is_finite()) && p.rcs.is_finite() && p.sweep_age.is_finite();
                if !finite || p.sweep_age < 0.0 {
                    return Err(Error::data(format!("sweep {i} has an invalid radar point")));
                }
            }
        }
        if self.features.len() != self.cameras.len() {
            return Err(Error::data(format!(
                "{} cameras but {} feature stacks",
                self.cameras.len(),
                self.features.len()
            )));
        }
        for (ci, (cam, stack)) in self.cameras.iter().zip(&self.features).enumerate() {
            cam.validate()?;
            if cam.feature_scales.len() != stack.len() {
                return Err(Error::data(format!(
                    "camera {ci}: {} feature scales but {} levels",
                    cam.feature_scales.len(),
                    stack.len()
                )));
            }
            if stack.is_empty() {
                return Err(Error::data(format!("camera {ci} has no feature levels")));
            }
            let c0 = stack[0].shape[2];
            for (li, level) in stack.iter().enumerate() {
                if level.shape.contains(&0) {
                    return Err(Error::data(format!("camera {ci} level {li} has a zero dimension")));
                }
                if level.shape[2] != c0 {
                    return Err(Error::data(format!("camera {ci} level {li} channel count differs from level 0")));
                }
                if li > 0 {
                    let prev = stack[li - 1].shape;
                    if prev[0] != level.shape[0] * 2 || prev[1] != level.shape[1] * 2 {
                        return Err(Error::data(format!(
                            "camera {ci} level {li} does not halve the previous level exactly"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Config-aware checks: gt inside the BEV extent.
    pub fn validate_against(&self, spec: &BevGridSpec) -> Result<()> {
        self.validate()?;
        for (i, b) in self.gt.iter().enumerate() {
            if !spec.contains(b.center[0], b.center[1]) {
                return Err(Error::data(format!(
                    "gt box {i} at ({:.2}, {:.2}) lies outside the BEV extent",
                    b.center[0], b.center[1]
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("scene serializes")
    }
}

/// Parse and structurally validate a scene record.
pub fn parse_scene(bytes: &[u8]) -> Result<SceneRecord> {
    let scene: SceneRecord = serde_json::from_slice(bytes).map_err(|e| Error::data(format!("scene parse: {e}")))?;
    scene.validate()?;
    Ok(scene)
}

pub fn load_scene(path: &Path) -> Result<SceneRecord> {
    let bytes = std::fs::read(path).map_err(|e| Error::data(format!("read {}: {e}", path.display())))?;
    parse_scene(&bytes).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

/// Load every `*.json` scene in a directory, sorted by file name. The
/// manifest and other non-scene JSON files are skipped by name convention
/// (`scene-*.json` only).
pub fn load_scenes_dir(dir: &Path) -> Result<Vec<SceneRecord>> {
    let mut paths = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::data(format!("read dir {}: {e}", dir.display())))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::data(format!("read dir {}: {e}", dir.display())))?;
        let path = entry.path();
        let name = entry.file_name().to_string_lossy().to_string();
        if name.starts_with("scene-") && name.ends_with(".json") {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Error::data(format!("no scene-*.json files in {}", dir.display())));
    }
    paths.iter().map(|p| load_scene(p)).collect()
}

// ── detections ──

/// One predicted box, the unit of evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Detection {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
    pub score: f64,
    pub class: usize,
}

impl Detection {
    pub fn from_gt(b: &GtBox) -> Detection {
        Detection { center: b.center, size: b.size, yaw: b.yaw, velocity: b.velocity, score: 1.0, class: b.class }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneDetections {
    pub scene_id: String,
    pub detections: Vec<Detection>,
}

/// Parse and validate a detections file (a JSON array of per-scene lists).
pub fn parse_detections(bytes: &[u8]) -> Result<Vec<SceneDetections>> {
    let sets: Vec<SceneDetections> =
        serde_json::from_slice(bytes).map_err(|e| Error::data(format!("detections parse: {e}")))?;
    for s in &sets {
        for d in &s.detections {
            let finite = d.center.iter().chain(&d.size).chain(&d.velocity).all(|v| v.is_finite())
                && d.yaw.is_finite()
                && d.score.is_finite();
            if !finite {
                return Err(Error::data(format!("scene {}: non-finite detection field", s.scene_id)));
            }
            if !(0.0..=1.0).contains(&d.score) {
                return Err(Error::data(format!("scene {}: detection score {} outside [0,1]", s.scene_id, d.score)));
            }
            if d.class >= NUM_CLASSES {
                return Err(Error::data(format!("scene {}: detection class {} out of range", s.scene_id, d.class)));
            }
        }
    }
    Ok(sets)
}

pub fn load_detections(path: &Path) -> Result<Vec<SceneDetections>> {
    let bytes = std::fs::read(path).map_err(|e| Error::data(format!("read {}: {e}", path.display())))?;
    parse_detections(&bytes).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

pub fn detections_to_json(sets: &[SceneDetections]) -> Vec<u8> {
    serde_json::to_vec(sets).expect("detections serialize")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_blob_round_trip() {
        let values: Vec<f64> = (0..24).map(|i| i as f64 * 0.25 - 3.0).collect();
        let blob = FeatureLevel::encode([2, 3, 4], &values);
        let back = blob.decode().unwrap();
        assert_eq!(back, values);
    }

    #[test]
    fn feature_blob_length_mismatch_rejected() {
        let mut blob = FeatureLevel::encode([2, 2, 2], &vec![0.0; 8]);
        blob.shape = [2, 2, 3];
        assert!(blob.decode().is_err());
    }

    #[test]
    fn feature_blob_bad_base64_rejected() {
        let blob = FeatureLevel { shape: [1, 1, 1], data: "@@".into() };
        assert!(blob.decode().is_err());
    }

    #[test]
    fn detections_validation() {
        let good = br#"[{"scene_id":"scene-000000","detections":[{"center":[1.0,2.0,0.5],"size":[1.0,2.0,1.5],"yaw":0.1,"velocity":[0.0,0.0],"score":0.9,"class":0}]}]"#;
        assert_eq!(parse_detections(good).unwrap().len(), 1);
        let bad_score = br#"[{"scene_id":"s","detections":[{"center":[0,0,0],"size":[1,1,1],"yaw":0,"velocity":[0,0],"score":1.5,"class":0}]}]"#;
        assert!(parse_detections(bad_score).is_err());
        let bad_class = br#"[{"scene_id":"s","detections":[{"center":[0,0,0],"size":[1,1,1],"yaw":0,"velocity":[0,0],"score":0.5,"class":7}]}]"#;
        assert!(parse_detections(bad_class).is_err());
    }
}
