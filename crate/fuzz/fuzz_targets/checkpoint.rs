#![no_main]

use std::sync::OnceLock;

use libfuzzer_sys::fuzz_target;

use radcam_core::checkpoint::{assemble, parse_manifest};
use radcam_core::model::ModelParams;
use radcam_core::RunConfig;

/// Small but structurally complete parameter set to validate blobs against.
fn template() -> &'static ModelParams {
    static T: OnceLock<ModelParams> = OnceLock::new();
    T.get_or_init(|| {
        let mut cfg = RunConfig::default();
        cfg.grid.x_min = -4.0;
        cfg.grid.x_max = 4.0;
        cfg.grid.y_min = -4.0;
        cfg.grid.y_max = 4.0;
        cfg.grid.resolution = 1.0;
        cfg.grid.channels = 6;
        cfg.encoder.layers = 1;
        cfg.encoder.sample_points = 1;
        cfg.encoder.heights = 1;
        cfg.encoder.ffn_hidden = 8;
        cfg.refine.t = 2;
        cfg.refine.m = 1;
        cfg.refine.channels = 6;
        cfg.refine.hidden = 4;
        cfg.refine.ball_radii = vec![0.5, 1.0];
        cfg.refine.pos_freqs = 1;
        cfg.validate().expect("template config is valid");
        ModelParams::init(&cfg, 0).expect("template initializes")
    })
}

// Input layout: manifest JSON, a 0 byte, then the weight blob.
fuzz_target!(|data: &[u8]| {
    let split = data.iter().position(|b| *b == 0).unwrap_or(data.len());
    let (json, rest) = data.split_at(split);
    if let Ok(manifest) = parse_manifest(json) {
        let blob = rest.get(1..).unwrap_or(&[]);
        let _ = assemble(&manifest, blob, template());
    }
});
