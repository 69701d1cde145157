//! Run configuration: one TOML file drives generation, training, inference,
//! and evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BevGridSpec;

/// Number of object classes produced by the simulator (car, pedestrian,
/// cycle).
pub const NUM_CLASSES: usize = 3;

/// Width of the regression target vector: (dx, dy, z, log w, log l, log h,
/// sin yaw, cos yaw, vx, vy).
pub const REG_WIDTH: usize = 10;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub resolution: f64,
    pub channels: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { x_min: -32.0, x_max: 32.0, y_min: -32.0, y_max: 32.0, resolution: 0.5, channels: 64 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Encoder layer count L.
    pub layers: usize,
    /// Deformable-attention sampling points per value map.
    pub sample_points: usize,
    /// Reference heights lifted per BEV pixel for camera cross attention.
    pub heights: usize,
    pub z_min: f64,
    pub z_max: f64,
    pub ffn_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { layers: 2, sample_points: 4, heights: 4, z_min: -1.0, z_max: 3.0, ffn_hidden: 128 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RadarConfig {
    /// Sweeps provided per scene: the current one plus this minus one
    /// previous.
    pub sweeps: usize,
    /// Seconds between consecutive sweeps.
    pub sweep_period: f64,
    /// Filter: drop points faster than this (m/s).
    pub v_max: f64,
    /// Filter: drop points weaker than this (dBsm).
    pub rcs_min: f64,
}

impl Default for RadarConfig {
    fn default() -> Self {
        RadarConfig { sweeps: 7, sweep_period: 0.1, v_max: 50.0, rcs_min: -10.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// Maximum proposals kept per scene.
    pub max_proposals: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { max_proposals: 100 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    /// Grid points generated per associated radar point.
    pub t: usize,
    /// Grid points kept after farthest point sampling.
    pub m: usize,
    /// Lower clamp for the grid span (meters).
    pub rho_min: f64,
    /// Upper clamp for the grid span (meters).
    pub rho_max: f64,
    /// Association window around the proposal azimuth (degrees).
    pub azimuth_window_deg: f64,
    /// Association window around the proposal range (meters).
    pub radial_window: f64,
    /// Width of attended radar point features.
    pub channels: usize,
    /// Hidden width of the refinement MLPs.
    pub hidden: usize,
    /// Ball-query radii for set abstraction (meters).
    pub ball_radii: Vec<f64>,
    /// Sinusoidal frequencies in the positional encoding.
    pub pos_freqs: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            t: 7,
            m: 64,
            rho_min: 0.5,
            rho_max: 3.0,
            azimuth_window_deg: 5.0,
            radial_window: 3.0,
            channels: 64,
            hidden: 64,
            ball_radii: vec![0.8, 1.6],
            pos_freqs: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub boxes_min: usize,
    pub boxes_max: usize,
    pub returns_min: usize,
    pub returns_max: usize,
    pub clutter_min: usize,
    pub clutter_max: usize,
    /// Radial position noise of radar returns (meters, 1 sigma).
    pub sigma_radial: f64,
    /// Tangential-to-radial noise ratio.
    pub tangential_ratio: f64,
    /// Doppler measurement noise (m/s, 1 sigma).
    pub doppler_sigma: f64,
    /// Per-element noise added to camera feature rasters.
    pub feature_noise: f64,
    pub cameras: usize,
    /// Square image side in pixels.
    pub image_size: usize,
    pub feature_levels: usize,
    /// Gaussian splat width in level-0 feature pixels.
    pub splat_sigma: f64,
    /// Ego speed along +x used for past sweep poses (m/s).
    pub ego_speed: f64,
    /// Maximum object speed (m/s).
    pub speed_max: f64,
    /// Keep-out margin from the grid edge when placing boxes (meters).
    pub margin: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            boxes_min: 3,
            boxes_max: 15,
            returns_min: 1,
            returns_max: 8,
            clutter_min: 5,
            clutter_max: 20,
            sigma_radial: 0.15,
            tangential_ratio: 3.0,
            doppler_sigma: 0.2,
            feature_noise: 0.02,
            cameras: 4,
            image_size: 256,
            feature_levels: 3,
            splat_sigma: 1.5,
            ego_speed: 5.0,
            speed_max: 8.0,
            margin: 2.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Step at which the learning rate is multiplied by `decay_factor`.
    pub decay_step: usize,
    pub decay_factor: f64,
    /// Center jitter applied to ground-truth boxes when building refinement
    /// training proposals (meters, 1 sigma, tangential direction; the radial
    /// component uses a third of this).
    pub jitter_sigma: f64,
    pub lambda_reg: f64,
    pub lambda_refine: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            lr: 1e-2,
            decay_step: 150,
            decay_factor: 0.1,
            jitter_sigma: 0.6,
            lambda_reg: 1.0,
            lambda_refine: 1.0,
        }
    }
}

/// Pipeline stage toggles. `pra` requires `rgpp`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub rgbq: bool,
    pub rcg: bool,
    pub rgpp: bool,
    pub pra: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags { rgbq: true, rcg: true, rgpp: true, pra: true }
    }
}

impl AblationFlags {
    pub fn all_off() -> AblationFlags {
        AblationFlags { rgbq: false, rcg: false, rgpp: false, pra: false }
    }

    /// Parse a comma-separated list of enabled stages; empty or `none`
    /// disables everything.
    pub fn from_list(list: &str) -> Result<AblationFlags> {
        let mut flags = AblationFlags::all_off();
        let trimmed = list.trim();
        if trimmed.is_empty() || trimmed == "none" {
            return Ok(flags);
        }
        for token in trimmed.split(',') {
            match token.trim() {
                "rgbq" => flags.rgbq = true,
                "rcg" => flags.rcg = true,
                "rgpp" => flags.rgpp = true,
                "pra" => flags.pra = true,
                other => {
                    return Err(Error::config(format!(
                        "unknown ablation stage `{other}` (expected rgbq, rcg, rgpp, pra)"
                    )))
                }
            }
        }
        Ok(flags)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pra && !self.rgpp {
            return Err(Error::config("ablation flag `pra` requires `rgpp` (attention feeds grid pooling)"));
        }
        Ok(())
    }

    /// Canonical enabled-stage list, e.g. `rgbq,rcg` or `none`.
    pub fn to_list(&self) -> String {
        let mut parts = Vec::new();
        if self.rgbq {
            parts.push("rgbq");
        }
        if self.rcg {
            parts.push("rcg");
        }
        if self.rgpp {
            parts.push("rgpp");
        }
        if self.pra {
            parts.push("pra");
        }
        if parts.is_empty() {
            "none".to_string()
        } else {
            parts.join(",")
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Worker threads for scene-level parallelism; 0 uses all cores.
    pub threads: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { threads: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub grid: GridConfig,
    pub encoder: EncoderConfig,
    pub radar: RadarConfig,
    pub head: HeadConfig,
    pub refine: RefineConfig,
    pub scene: SceneConfig,
    pub train: TrainConfig,
    pub ablate: AblationFlags,
    pub run: RunSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Stable fingerprint of the full effective configuration.
    pub fn fingerprint(&self) -> u64 {
        crate::rng::fnv1a64(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn grid_spec(&self) -> Result<BevGridSpec> {
        BevGridSpec::new(
            self.grid.x_min,
            self.grid.x_max,
            self.grid.y_min,
            self.grid.y_max,
            self.grid.resolution,
            self.grid.channels,
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.grid_spec()?;
        let c = self.grid.channels;
        if c < 6 || c % 2 != 0 {
            return Err(Error::config(format!("grid.channels must be even and at least 6, got {c}")));
        }
        if self.encoder.layers < 1 {
            return Err(Error::config("encoder.layers must be at least 1"));
        }
        if self.encoder.sample_points < 1 {
            return Err(Error::config("encoder.sample_points must be at least 1"));
        }
        if self.encoder.heights < 1 || self.encoder.z_max <= self.encoder.z_min {
            return Err(Error::config("encoder height lift needs heights >= 1 and z_max > z_min"));
        }
        if self.radar.sweeps < 1 || self.radar.sweep_period <= 0.0 {
            return Err(Error::config("radar needs sweeps >= 1 and a positive sweep_period"));
        }
        if self.refine.t < 2 {
            return Err(Error::config("refine.t must be at least 2 (grid spacing divides by t - 1)"));
        }
        if self.refine.m < 1 {
            return Err(Error::config("refine.m must be at least 1"));
        }
        if !(self.refine.rho_min > 0.0 && self.refine.rho_min < self.refine.rho_max) {
            return Err(Error::config("refine needs 0 < rho_min < rho_max"));
        }
        if self.refine.azimuth_window_deg <= 0.0 || self.refine.radial_window <= 0.0 {
            return Err(Error::config("association windows must be positive"));
        }
        if self.refine.ball_radii.is_empty() || self.refine.ball_radii.iter().any(|r| *r <= 0.0) {
            return Err(Error::config("refine.ball_radii must be non-empty and positive"));
        }
        if c % self.refine.ball_radii.len() != 0 {
            return Err(Error::config(format!(
                "grid.channels ({c}) must divide evenly by the {} ball radii",
                self.refine.ball_radii.len()
            )));
        }
        if self.refine.pos_freqs < 1 {
            return Err(Error::config("refine.pos_freqs must be at least 1"));
        }
        if self.scene.boxes_min > self.scene.boxes_max || self.scene.boxes_min == 0 {
            return Err(Error::config("scene.boxes_min..boxes_max must be a non-empty range starting above 0"));
        }
        if self.scene.returns_min > self.scene.returns_max {
            return Err(Error::config("scene.returns_min..returns_max must be a non-empty range"));
        }
        if self.scene.clutter_min > self.scene.clutter_max {
            return Err(Error::config("scene.clutter_min..clutter_max must be a non-empty range"));
        }
        if self.scene.cameras < 1 || self.scene.image_size < 16 || self.scene.feature_levels < 1 {
            return Err(Error::config("scene needs cameras >= 1, image_size >= 16, feature_levels >= 1"));
        }
        let div = 8 << (self.scene.feature_levels - 1);
        if self.scene.image_size % div != 0 {
            return Err(Error::config(format!(
                "scene.image_size must be divisible by {div} so feature levels halve exactly"
            )));
        }
        if self.scene.sigma_radial < 0.0 || self.scene.tangential_ratio <= 0.0 {
            return Err(Error::config("scene noise scales must be non-negative (ratio positive)"));
        }
        if self.train.lr <= 0.0 || self.train.decay_factor <= 0.0 {
            return Err(Error::config("train.lr and train.decay_factor must be positive"));
        }
        self.ablate.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(cfg.fingerprint(), back.fingerprint());
    }

    #[test]
    fn ablation_list_round_trip() {
        for list in ["none", "rgbq", "rgbq,rcg", "rgbq,rcg,rgpp", "rgbq,rcg,rgpp,pra"] {
            let flags = AblationFlags::from_list(list).unwrap();
            assert_eq!(flags.to_list(), list);
        }
        assert!(AblationFlags::from_list("rgbq,warp").is_err());
    }

    #[test]
    fn pra_requires_rgpp() {
        let flags = AblationFlags::from_list("pra").unwrap();
        assert!(flags.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.ablate = flags;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn uneven_grid_rejected() {
        let mut cfg = RunConfig::default();
        cfg.grid.resolution = 0.7;
        assert!(cfg.validate().is_err());
    }
}
