//! Desk-scale training: full-batch gradient descent on the heatmap focal
//! loss, the center-cell regression loss, and a refinement residual loss
//! driven by jittered ground-truth proposals.
//!
//! Scenes run forward and backward in parallel on private tapes; gradients
//! are reduced in scene order, so results are byte-identical regardless of
//! thread count.

use std::sync::Arc;

use rayon::prelude::*;

use crate::bev::{encode, BevFeatureMap};
use crate::camera::{load_features, CameraFeatures};
use crate::config::{AblationFlags, RunConfig};
use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, BevGridSpec};
use crate::head::{encode_targets, head_loss, head_outputs, Proposal, TargetMaps};
use crate::model::ModelParams;
use crate::pipeline::scene_radar_points;
use crate::radar::pillarize;
use crate::refine::refine_deltas;
use crate::rng::{split_seed, SplitRng};
use crate::scene::{RadarPoint, SceneRecord};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, serde::Serialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub focal: f64,
    pub reg: f64,
    pub refine: f64,
}

#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
}

/// Per-scene state reused across steps: decoded features, aggregated radar,
/// head targets, and fixed jittered refinement proposals.
struct PreparedScene {
    scene_id: String,
    cams: Vec<CameraFeatures>,
    radar: Vec<RadarPoint>,
    targets: TargetMaps,
    jitter: Vec<(Proposal, [f64; 9])>,
}

/// Noisy copies of the ground-truth boxes used as refinement training
/// proposals, each paired with the residual vector (sans score) that maps
/// it back onto its box. Center noise is anisotropic like the radar:
/// tangential sigma `jitter_sigma`, radial a third of that.
fn jitter_proposals(scene: &SceneRecord, spec: &BevGridSpec, sigma: f64, seed: u64) -> Vec<(Proposal, [f64; 9])> {
    let mut rng = SplitRng::new(split_seed(seed, &scene.scene_id), "jitter");
    let mut out = Vec::with_capacity(scene.gt.len());
    for g in &scene.gt {
        let range = (g.center[0] * g.center[0] + g.center[1] * g.center[1]).sqrt();
        let (rx, ry) = if range < 1e-6 { (1.0, 0.0) } else { (g.center[0] / range, g.center[1] / range) };
        let (tx, ty) = (-ry, rx);
        let (nt, nr) = (rng.normal_scaled(sigma), rng.normal_scaled(sigma / 3.0));
        let center = [g.center[0] + nt * tx + nr * rx, g.center[1] + nt * ty + nr * ry, g.center[2]];
        let size = [
            g.size[0] * rng.normal_scaled(sigma / 6.0).exp(),
            g.size[1] * rng.normal_scaled(sigma / 6.0).exp(),
            g.size[2] * rng.normal_scaled(sigma / 6.0).exp(),
        ];
        let yaw = wrap_angle(g.yaw + rng.normal_scaled(sigma / 3.0));
        let velocity = [g.velocity[0] + rng.normal_scaled(sigma), g.velocity[1] + rng.normal_scaled(sigma)];
        let gt_cell = spec.cell_of(g.center[0], g.center[1]).expect("gt inside extent");
        let cell = spec.cell_of(center[0], center[1]).unwrap_or(gt_cell);
        let proposal = Proposal {
            center,
            size,
            yaw,
            velocity,
            score: 1.0,
            class: g.class,
            latent: Vec::new(),
            cell: cell.0 * spec.w() + cell.1,
        };
        let target = [
            g.center[0] - center[0],
            g.center[1] - center[1],
            g.center[2] - center[2],
            (g.size[0] / size[0]).ln(),
            (g.size[1] / size[1]).ln(),
            (g.size[2] / size[2]).ln(),
            wrap_angle(g.yaw - yaw),
            g.velocity[0] - velocity[0],
            g.velocity[1] - velocity[1],
        ];
        out.push((proposal, target));
    }
    out
}

fn prepare(scene: &SceneRecord, cfg: &RunConfig, spec: &BevGridSpec, flags: &AblationFlags, seed: u64) -> Result<PreparedScene> {
    let cams = load_features(scene)?;
    for cam in &cams {
        if cam.channels() != spec.channels {
            return Err(Error::data(format!(
                "scene {}: camera features carry {} channels but the grid expects {}",
                scene.scene_id,
                cam.channels(),
                spec.channels
            )));
        }
    }
    let needs_radar = flags.rgbq || flags.rcg || flags.rgpp;
    let radar = if needs_radar { scene_radar_points(scene, cfg)? } else { Vec::new() };
    let targets = encode_targets(&scene.gt, spec);
    let jitter = if flags.rgpp {
        jitter_proposals(scene, spec, cfg.train.jitter_sigma, seed)
    } else {
        Vec::new()
    };
    Ok(PreparedScene { scene_id: scene.scene_id.clone(), cams, radar, targets, jitter })
}

/// Loss terms of one scene: (total, focal, reg, refine).
type SceneLoss = [f64; 4];

fn scene_grads(
    prep: &PreparedScene,
    params: &ModelParams,
    cfg: &RunConfig,
    spec: &BevGridSpec,
    flags: &AblationFlags,
) -> Result<(Vec<Vec<f64>>, SceneLoss)> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let f_r = if flags.rgbq || flags.rcg {
        Some(pillarize(&prep.radar, spec, &bound.radar, &tape))
    } else {
        None
    };
    let fused = encode(&bound.encoder, f_r.as_ref(), &prep.cams, spec, &cfg.encoder, flags, &tape);
    let bev = BevFeatureMap::new(fused, spec.clone());
    let (heat, reg) = head_outputs(&bev, &bound.head, &tape);
    let hl = head_loss(&heat, &reg, &prep.targets, cfg.train.lambda_reg, &tape);
    let mut total = hl.total;

    let mut refine_val = 0.0;
    if flags.rgpp && !prep.jitter.is_empty() {
        let n = spec.num_cells();
        let flat = bev.values.reshape(&[n, spec.channels]);
        let mut acc: Option<Tensor> = None;
        let mut count = 0usize;
        for (prop, target) in &prep.jitter {
            let latent = tape.gather_rows(&flat, &Arc::new(vec![prop.cell]));
            let Some(d) = refine_deltas(prop, &latent, &prep.radar, &prep.cams, &bound.refine, &cfg.refine, flags.pra, &tape)
            else {
                continue;
            };
            let pred = tape.slice_cols(&d, 0, 9);
            let diff = tape.abs(&tape.sub(&pred, &Tensor::from_vec(&[1, 9], target.to_vec())));
            let term = tape.sum_all(&diff);
            acc = Some(match acc {
                Some(a) => tape.add(&a, &term),
                None => term,
            });
            count += 1;
        }
        if let Some(a) = acc {
            let refine_loss = tape.affine(&a, cfg.train.lambda_refine / count as f64, 0.0);
            refine_val = refine_loss.item();
            total = tape.add(&total, &refine_loss);
        }
    }

    tape.check_finite(&format!("scene {}", prep.scene_id))?;
    let grads = tape.backward(&total)?;
    let gvecs = bound.entries().iter().map(|(_, t)| grads.wrt_or_zeros(t)).collect();
    Ok((gvecs, [total.item(), hl.focal, hl.l1, refine_val]))
}

/// Full-batch gradient descent from a fresh initialization. Returns the
/// trained parameters and the per-step loss trace.
pub fn train(cfg: &RunConfig, scenes: &[SceneRecord], seed: u64) -> Result<(ModelParams, TrainLog)> {
    train_with(cfg, scenes, seed, &mut |_| {})
}

/// Like [`train`], invoking `on_step` after each completed step.
pub fn train_with(
    cfg: &RunConfig,
    scenes: &[SceneRecord],
    seed: u64,
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<(ModelParams, TrainLog)> {
    if scenes.is_empty() {
        return Err(Error::data("training needs at least one scene"));
    }
    let spec = cfg.grid_spec()?;
    let flags = cfg.ablate;
    let mut params = ModelParams::init(cfg, seed)?;
    let prepared: Vec<PreparedScene> = scenes
        .iter()
        .map(|s| prepare(s, cfg, &spec, &flags, seed))
        .collect::<Result<_>>()?;

    let mut log = TrainLog::default();
    let n = prepared.len() as f64;
    for step in 0..cfg.train.steps {
        let lr = if step >= cfg.train.decay_step { cfg.train.lr * cfg.train.decay_factor } else { cfg.train.lr };
        let results: Vec<(Vec<Vec<f64>>, SceneLoss)> = prepared
            .par_iter()
            .map(|prep| scene_grads(prep, &params, cfg, &spec, &flags))
            .collect::<Result<_>>()
            .map_err(|e| Error::numeric(format!("training step {step}: {e}")))?;

        let mut summed: Vec<Vec<f64>> = results[0].0.clone();
        for (gvecs, _) in &results[1..] {
            for (acc, g) in summed.iter_mut().zip(gvecs) {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        let mut losses = [0.0f64; 4];
        for (_, l) in &results {
            for i in 0..4 {
                losses[i] += l[i] / n;
            }
        }
        if !losses[0].is_finite() {
            return Err(Error::numeric(format!("training step {step}: loss is not finite")));
        }

        for (slot, (name, t)) in params.entries_mut().into_iter().enumerate() {
            let g = &summed[slot];
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(format!("training step {step}: gradient of {name} is not finite")));
            }
            let mut vals = t.to_vec();
            for (v, gi) in vals.iter_mut().zip(g) {
                *v -= lr * gi / n;
            }
            *t = Tensor::from_vec(t.shape(), vals);
        }
        let entry = StepLog { step, lr, total: losses[0], focal: losses[1], reg: losses[2], refine: losses[3] };
        on_step(&entry);
        log.steps.push(entry);
    }
    Ok((params, log))
}
