//! End-to-end per-scene inference: radar pillars, BEV encoding, proposal
//! decoding, and instance refinement, honoring the ablation flags.

use crate::bev::{encode, BevFeatureMap};
use crate::camera::load_features;
use crate::config::{AblationFlags, RunConfig};
use crate::error::{Error, Result};
use crate::head::{propose, Proposal};
use crate::model::ModelParams;
use crate::radar::{accumulate_sweeps, filter_points, pillarize};
use crate::refine::refine_one;
use crate::scene::{Detection, RadarPoint, SceneDetections, SceneRecord};
use crate::tensor::{Tape, Tensor};

/// Everything a scene pass produces; training reuses the tensors,
/// inference keeps only the detections.
pub struct SceneOutputs {
    pub bev: BevFeatureMap,
    pub radar_points: Vec<RadarPoint>,
    pub proposals: Vec<Proposal>,
    pub refined: Vec<Proposal>,
}

/// Aggregated radar points of a scene, in the current frame, filtered to
/// the grid and the radar's plausibility gates.
pub fn scene_radar_points(scene: &SceneRecord, cfg: &RunConfig) -> Result<Vec<RadarPoint>> {
    let spec = cfg.grid_spec()?;
    let all = accumulate_sweeps(&scene.sweeps, 0.0)?;
    Ok(filter_points(&all, &spec, &cfg.radar))
}

/// Run the full pipeline on one scene. The radar branch is skipped
/// entirely when no enabled stage consumes it.
pub fn run_scene(
    scene: &SceneRecord,
    params: &ModelParams,
    cfg: &RunConfig,
    flags: &AblationFlags,
    tape: &Tape,
) -> Result<SceneOutputs> {
    let spec = cfg.grid_spec()?;
    let cams = load_features(scene)?;
    for cam in &cams {
        if cam.channels() != spec.channels {
            return Err(Error::data(format!(
                "camera features carry {} channels but the grid expects {}",
                cam.channels(),
                spec.channels
            )));
        }
    }

    let needs_radar = flags.rgbq || flags.rcg || flags.rgpp;
    let radar_points = if needs_radar { scene_radar_points(scene, cfg)? } else { Vec::new() };
    let f_r = if flags.rgbq || flags.rcg {
        Some(pillarize(&radar_points, &spec, &params.radar, tape))
    } else {
        None
    };

    let fused = encode(&params.encoder, f_r.as_ref(), &cams, &spec, &cfg.encoder, flags, tape);
    let bev = BevFeatureMap::new(fused, spec);
    let proposals = propose(&bev, &params.head, cfg.head.max_proposals, tape);

    let refined = if flags.rgpp {
        proposals
            .iter()
            .map(|p| {
                let latent = Tensor::from_vec(&[1, p.latent.len()], p.latent.clone());
                refine_one(p, &latent, &radar_points, &cams, &params.refine, &cfg.refine, flags.pra, tape)
            })
            .collect()
    } else {
        proposals.clone()
    };

    tape.check_finite(&format!("scene {}", scene.scene_id))?;
    Ok(SceneOutputs { bev, radar_points, proposals, refined })
}

/// Inference entry: detections for one scene, ordered by descending score
/// (ties: class then cell) for stable output.
pub fn infer_scene(
    scene: &SceneRecord,
    params: &ModelParams,
    cfg: &RunConfig,
    flags: &AblationFlags,
) -> Result<SceneDetections> {
    let tape = Tape::inference();
    let out = run_scene(scene, params, cfg, flags, &tape)?;
    let mut boxes = out.refined;
    boxes.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("finite scores")
            .then(a.class.cmp(&b.class))
            .then(a.cell.cmp(&b.cell))
    });
    let detections = boxes
        .iter()
        .map(|p| Detection {
            center: p.center,
            size: p.size,
            yaw: p.yaw,
            velocity: p.velocity,
            score: p.score,
            class: p.class,
        })
        .collect();
    Ok(SceneDetections { scene_id: scene.scene_id.clone(), detections })
}
