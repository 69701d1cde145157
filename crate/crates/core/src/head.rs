//! Center-based detection head over the fused BEV map: per-cell class
//! heatmaps and box regression, peak-picked proposals, target encoding,
//! and the focal + L1 training loss.

use crate::bev::BevFeatureMap;
use crate::config::{NUM_CLASSES, REG_WIDTH};
use crate::geometry::BevGridSpec;
use crate::scene::GtBox;
use crate::tensor::{MlpParams, Tape, Tensor};

/// Regression row layout: (dx, dy, z, log w, log l, log h, sin yaw,
/// cos yaw, vx, vy). dx/dy are offsets from the cell center.
pub const REG_DX: usize = 0;
pub const REG_DY: usize = 1;
pub const REG_Z: usize = 2;
pub const REG_LOG_W: usize = 3;
pub const REG_LOG_L: usize = 4;
pub const REG_LOG_H: usize = 5;
pub const REG_SIN: usize = 6;
pub const REG_COS: usize = 7;
pub const REG_VX: usize = 8;
pub const REG_VY: usize = 9;

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub stem_kernel: Tensor,
    pub stem_bias: Tensor,
    pub heat: MlpParams,
    pub reg: MlpParams,
}

impl HeadParams {
    pub fn entries(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("head.stem_kernel".to_string(), &self.stem_kernel),
            ("head.stem_bias".to_string(), &self.stem_bias),
        ];
        out.extend(self.heat.entries("head.heat"));
        out.extend(self.reg.entries("head.reg"));
        out
    }

    pub fn entries_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("head.stem_kernel".to_string(), &mut self.stem_kernel),
            ("head.stem_bias".to_string(), &mut self.stem_bias),
        ];
        out.extend(self.heat.entries_mut("head.heat"));
        out.extend(self.reg.entries_mut("head.reg"));
        out
    }
}

/// A decoded box hypothesis with the BEV cell it came from and the fused
/// feature row at that cell.
#[derive(Debug, Clone)]
pub struct Proposal {
    pub center: [f64; 3],
    /// (w, l, h)
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
    pub score: f64,
    pub class: usize,
    pub latent: Vec<f64>,
    pub cell: usize,
}

/// Per-cell class logits `[HW, classes]` and regression rows
/// `[HW, reg width]` from the fused BEV map.
pub fn head_outputs(bev: &BevFeatureMap, params: &HeadParams, tape: &Tape) -> (Tensor, Tensor) {
    let spec = &bev.spec;
    let n = spec.num_cells();
    let stem = tape.relu(&tape.conv3x3(&bev.values, &params.stem_kernel, &params.stem_bias));
    let flat = stem.reshape(&[n, spec.channels]);
    let heat = params.heat.forward(tape, &flat);
    let reg = params.reg.forward(tape, &flat);
    (heat, reg)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Pick local heatmap maxima and decode them into proposals.
///
/// A cell survives for a class when its logit is `>=` every same-class
/// logit in its 3x3 neighborhood, so flat fields still yield candidates.
/// Survivors are ordered by score descending (ties: class, then row, then
/// column) and truncated to `max_n`.
pub fn decode_outputs(
    heat: &Tensor,
    reg: &Tensor,
    bev: &BevFeatureMap,
    max_n: usize,
) -> Vec<Proposal> {
    let spec = &bev.spec;
    let (h, w) = (spec.h(), spec.w());
    assert_eq!(heat.shape(), &[h * w, NUM_CLASSES]);
    assert_eq!(reg.shape(), &[h * w, REG_WIDTH]);
    let hv = heat.values();
    let rv = reg.values();
    let bv = bev.values.values();
    let c = spec.channels;

    let mut picks: Vec<(f64, usize, usize, usize)> = Vec::new();
    for row in 0..h {
        for col in 0..w {
            let cell = row * w + col;
            'class: for class in 0..NUM_CLASSES {
                let logit = hv[cell * NUM_CLASSES + class];
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        if dr == 0 && dc == 0 {
                            continue;
                        }
                        let (nr, nc) = (row as i64 + dr, col as i64 + dc);
                        if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                            continue;
                        }
                        let ncell = nr as usize * w + nc as usize;
                        if hv[ncell * NUM_CLASSES + class] > logit {
                            continue 'class;
                        }
                    }
                }
                picks.push((logit, class, row, col));
            }
        }
    }
    picks.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
            .then(a.3.cmp(&b.3))
    });
    picks.truncate(max_n);

    picks
        .into_iter()
        .map(|(logit, class, row, col)| {
            let cell = row * w + col;
            let r = &rv[cell * REG_WIDTH..(cell + 1) * REG_WIDTH];
            let (cx, cy) = spec.cell_center(row, col);
            Proposal {
                center: [cx + r[REG_DX], cy + r[REG_DY], r[REG_Z]],
                size: [r[REG_LOG_W].exp(), r[REG_LOG_L].exp(), r[REG_LOG_H].exp()],
                yaw: r[REG_SIN].atan2(r[REG_COS]),
                velocity: [r[REG_VX], r[REG_VY]],
                score: sigmoid(logit),
                class,
                latent: bv[cell * c..(cell + 1) * c].to_vec(),
                cell,
            }
        })
        .collect()
}

/// Run the head and decode its outputs in one step.
pub fn propose(bev: &BevFeatureMap, params: &HeadParams, max_n: usize, tape: &Tape) -> Vec<Proposal> {
    let (heat, reg) = head_outputs(bev, params, tape);
    decode_outputs(&heat, &reg, bev, max_n)
}

// ── target encoding ──

/// Ground-truth maps for the head loss. Heatmaps hold Gaussian-splatted
/// class scores; regression targets and the positive mask are set at box
/// center cells only.
#[derive(Debug, Clone)]
pub struct TargetMaps {
    /// `[HW, classes]`, values in [0, 1], exactly 1 at center cells.
    pub heat: Tensor,
    /// `[HW, reg width]`, zero away from center cells.
    pub reg: Tensor,
    /// `[HW]`, 1 at center cells.
    pub mask: Vec<f64>,
    /// Number of positive cells.
    pub n_pos: usize,
    /// Boxes whose center fell outside the grid extent.
    pub skipped: usize,
}

/// Splat radius in cells: at least one cell, half the larger footprint
/// side otherwise.
fn splat_radius(size: &[f64; 3], resolution: f64) -> f64 {
    (0.5 * size[0].max(size[1]) / resolution).max(1.0)
}

pub fn encode_targets(gt: &[GtBox], spec: &BevGridSpec) -> TargetMaps {
    let (h, w) = (spec.h(), spec.w());
    let n = h * w;
    let mut heat = vec![0.0; n * NUM_CLASSES];
    let mut reg = vec![0.0; n * REG_WIDTH];
    let mut mask = vec![0.0; n];
    let mut skipped = 0usize;

    for b in gt {
        let Some((row, col)) = spec.cell_of(b.center[0], b.center[1]) else {
            skipped += 1;
            continue;
        };
        let radius = splat_radius(&b.size, spec.resolution);
        let sigma = radius / 3.0;
        let reach = radius.ceil() as i64;
        for dr in -reach..=reach {
            for dc in -reach..=reach {
                let (nr, nc) = (row as i64 + dr, col as i64 + dc);
                if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                    continue;
                }
                let d2 = (dr * dr + dc * dc) as f64;
                let v = (-d2 / (2.0 * sigma * sigma)).exp();
                let at = (nr as usize * w + nc as usize) * NUM_CLASSES + b.class;
                if v > heat[at] {
                    heat[at] = v;
                }
            }
        }
        let cell = row * w + col;
        heat[cell * NUM_CLASSES + b.class] = 1.0;
        let (cx, cy) = spec.cell_center(row, col);
        let r = &mut reg[cell * REG_WIDTH..(cell + 1) * REG_WIDTH];
        r[REG_DX] = b.center[0] - cx;
        r[REG_DY] = b.center[1] - cy;
        r[REG_Z] = b.center[2];
        r[REG_LOG_W] = b.size[0].ln();
        r[REG_LOG_L] = b.size[1].ln();
        r[REG_LOG_H] = b.size[2].ln();
        r[REG_SIN] = b.yaw.sin();
        r[REG_COS] = b.yaw.cos();
        r[REG_VX] = b.velocity[0];
        r[REG_VY] = b.velocity[1];
        mask[cell] = 1.0;
    }
    let n_pos = mask.iter().filter(|m| **m > 0.0).count();
    TargetMaps {
        heat: Tensor::from_vec(&[n, NUM_CLASSES], heat),
        reg: Tensor::from_vec(&[n, REG_WIDTH], reg),
        mask,
        n_pos,
        skipped,
    }
}

// ── loss ──

/// Penalty-reduced focal loss over the class heatmaps plus masked L1 over
/// center-cell regression rows, each normalized by the positive count.
pub struct HeadLoss {
    pub total: Tensor,
    pub focal: f64,
    pub l1: f64,
}

pub fn head_loss(
    heat_logits: &Tensor,
    reg: &Tensor,
    targets: &TargetMaps,
    reg_weight: f64,
    tape: &Tape,
) -> HeadLoss {
    let norm = 1.0 / targets.n_pos.max(1) as f64;
    let tv = targets.heat.values();
    let n = tv.len();
    let pos_mask: Vec<f64> = tv.iter().map(|t| if *t == 1.0 { 1.0 } else { 0.0 }).collect();
    let neg_weight: Vec<f64> = tv
        .iter()
        .map(|t| if *t == 1.0 { 0.0 } else { (1.0 - t).powi(4) })
        .collect();
    let shape = targets.heat.shape();
    let pos_mask = Tensor::from_vec(shape, pos_mask);
    let neg_weight = Tensor::from_vec(shape, neg_weight);
    debug_assert_eq!(heat_logits.len(), n);

    // log p, log(1 - p), and their complements from raw logits.
    let neg_x = tape.affine(heat_logits, -1.0, 0.0);
    let log_p = tape.affine(&tape.softplus(&neg_x), -1.0, 0.0);
    let log_1p = tape.affine(&tape.softplus(heat_logits), -1.0, 0.0);
    let p = tape.sigmoid(heat_logits);
    let one_minus_p = tape.sigmoid(&neg_x);

    let pos_term = tape.mul(&pos_mask, &tape.mul(&tape.mul(&one_minus_p, &one_minus_p), &log_p));
    let neg_term = tape.mul(&neg_weight, &tape.mul(&tape.mul(&p, &p), &log_1p));
    let focal = tape.affine(&tape.sum_all(&tape.add(&pos_term, &neg_term)), -norm, 0.0);

    let diff = tape.abs(&tape.sub(reg, &targets.reg));
    let masked = tape.scale_rows(&diff, &Tensor::from_vec(&[targets.mask.len()], targets.mask.clone()));
    let l1 = tape.affine(&tape.sum_all(&masked), reg_weight * norm, 0.0);

    let total = tape.add(&focal, &l1);
    HeadLoss { total, focal: focal.item(), l1: l1.item() }
}
