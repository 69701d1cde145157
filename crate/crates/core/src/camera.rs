//! Camera feature pyramids: decoded per-camera multi-scale rasters plus
//! their camera models.

use crate::error::{Error, Result};
use crate::scene::SceneRecord;
use crate::geometry::CameraModel;
use crate::tensor::Tensor;

/// One camera's feature pyramid. Level sizes halve exactly; all levels share
/// one channel count.
#[derive(Debug, Clone)]
pub struct CameraFeatures {
    pub levels: Vec<Tensor>,
    pub model: CameraModel,
}

impl CameraFeatures {
    pub fn channels(&self) -> usize {
        self.levels[0].shape()[2]
    }
}

/// Decode every camera's rasters from a scene. Values pass through
/// unchanged; shapes are validated (halving levels, shared channels).
pub fn load_features(scene: &SceneRecord) -> Result<Vec<CameraFeatures>> {
    if scene.features.len() != scene.cameras.len() {
        return Err(Error::data(format!(
            "{} cameras but {} feature stacks",
            scene.cameras.len(),
            scene.features.len()
        )));
    }
    let mut out = Vec::with_capacity(scene.cameras.len());
    for (ci, (model, stack)) in scene.cameras.iter().zip(&scene.features).enumerate() {
        model.validate()?;
        if stack.is_empty() {
            return Err(Error::data(format!("camera {ci} has no feature levels")));
        }
        let mut levels = Vec::with_capacity(stack.len());
        let c0 = stack[0].shape[2];
        for (li, blob) in stack.iter().enumerate() {
            if blob.shape[2] != c0 {
                return Err(Error::data(format!("camera {ci} level {li}: channel count differs from level 0")));
            }
            if li > 0 {
                let prev = stack[li - 1].shape;
                if prev[0] != blob.shape[0] * 2 || prev[1] != blob.shape[1] * 2 {
                    return Err(Error::data(format!("camera {ci} level {li}: sizes do not halve exactly")));
                }
            }
            let values = blob.decode()?;
            levels.push(Tensor::from_vec(&[blob.shape[0], blob.shape[1], blob.shape[2]], values));
        }
        out.push(CameraFeatures { levels, model: model.clone() });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::scene::gen::generate_scene;
    use crate::scene::FeatureLevel;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.grid.x_min = -16.0;
        cfg.grid.x_max = 16.0;
        cfg.grid.y_min = -16.0;
        cfg.grid.y_max = 16.0;
        cfg.grid.resolution = 1.0;
        cfg.grid.channels = 6;
        cfg.scene.image_size = 64;
        cfg.scene.feature_levels = 3;
        cfg.scene.cameras = 2;
        cfg.radar.sweeps = 2;
        cfg
    }

    #[test]
    fn pass_through_preserves_values() {
        let scene = generate_scene(&tiny_cfg(), "s", 3).unwrap();
        let feats = load_features(&scene).unwrap();
        assert_eq!(feats.len(), 2);
        assert_eq!(feats[0].levels.len(), 3);
        for (cam_feats, stack) in feats.iter().zip(&scene.features) {
            for (level, blob) in cam_feats.levels.iter().zip(stack) {
                let decoded = blob.decode().unwrap();
                let max_dev = level
                    .values()
                    .iter()
                    .zip(&decoded)
                    .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
                assert_eq!(max_dev, 0.0);
            }
        }
    }

    #[test]
    fn non_halving_level_rejected() {
        let mut scene = generate_scene(&tiny_cfg(), "s", 3).unwrap();
        let c = scene.features[0][1].shape[2];
        scene.features[0][1] = FeatureLevel::encode([5, 5, c], &vec![0.0; 25 * c]);
        assert!(load_features(&scene).is_err());
    }

    #[test]
    fn all_zero_rasters_accepted() {
        let mut scene = generate_scene(&tiny_cfg(), "s", 3).unwrap();
        for stack in scene.features.iter_mut() {
            for blob in stack.iter_mut() {
                let n = blob.shape[0] * blob.shape[1] * blob.shape[2];
                *blob = FeatureLevel::encode(blob.shape, &vec![0.0; n]);
            }
        }
        let feats = load_features(&scene).unwrap();
        assert!(feats[0].levels[0].values().iter().all(|v| *v == 0.0));
    }
}
