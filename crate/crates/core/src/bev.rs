//! BEV encoder: radar-guided query attention, spatial cross attention over
//! camera features, and the radar-camera gating block, stacked L times.

use std::sync::Arc;

use nalgebra::Vector3;

use crate::camera::CameraFeatures;
use crate::config::{AblationFlags, EncoderConfig};
use crate::geometry::BevGridSpec;
use crate::tensor::{MlpParams, Tape, Tensor};

/// A BEV-shaped tensor tied to its grid.
#[derive(Debug, Clone)]
pub struct BevFeatureMap {
    pub values: Tensor,
    pub spec: BevGridSpec,
}

impl BevFeatureMap {
    pub fn new(values: Tensor, spec: BevGridSpec) -> BevFeatureMap {
        assert_eq!(
            values.shape(),
            &[spec.h(), spec.w(), spec.channels],
            "BEV map shape does not match its grid"
        );
        BevFeatureMap { values, spec }
    }
}

/// Deformable-attention parameters for the radar-guided query block: the
/// offset and weight heads see the query, values come from projections of
/// the query map and the radar map.
#[derive(Debug, Clone)]
pub struct RgbqParams {
    pub offset: MlpParams,
    pub weight: MlpParams,
    pub proj_q: Tensor,
    pub proj_r: Tensor,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
}

/// Spatial cross attention parameters: per-height offset and weight heads
/// plus a value projection of camera features.
#[derive(Debug, Clone)]
pub struct ScaParams {
    pub offset: MlpParams,
    pub weight: MlpParams,
    pub proj: Tensor,
}

/// Gating-fusion parameters: radar encoding MLP and the two gate convs.
#[derive(Debug, Clone)]
pub struct GatingParams {
    pub mlp0: MlpParams,
    pub conv_c_kernel: Tensor,
    pub conv_c_bias: Tensor,
    pub conv_r_kernel: Tensor,
    pub conv_r_bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub rgbq: RgbqParams,
    pub sca: ScaParams,
    pub gate: GatingParams,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub ffn: MlpParams,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    /// Learnable BEV query, `[H, W, C]`.
    pub query: Tensor,
    pub layers: Vec<LayerParams>,
}

impl EncoderParams {
    pub fn entries(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("encoder.query".to_string(), &self.query)];
        for (i, l) in self.layers.iter().enumerate() {
            let e = format!("encoder.layer{i}");
            out.extend(l.rgbq.offset.entries(&format!("{e}.rgbq.offset")));
            out.extend(l.rgbq.weight.entries(&format!("{e}.rgbq.weight")));
            out.push((format!("{e}.rgbq.proj_q"), &l.rgbq.proj_q));
            out.push((format!("{e}.rgbq.proj_r"), &l.rgbq.proj_r));
            out.push((format!("{e}.rgbq.ln_gamma"), &l.rgbq.ln_gamma));
            out.push((format!("{e}.rgbq.ln_beta"), &l.rgbq.ln_beta));
            out.extend(l.sca.offset.entries(&format!("{e}.sca.offset")));
            out.extend(l.sca.weight.entries(&format!("{e}.sca.weight")));
            out.push((format!("{e}.sca.proj"), &l.sca.proj));
            out.extend(l.gate.mlp0.entries(&format!("{e}.gate.mlp0")));
            out.push((format!("{e}.gate.conv_c_kernel"), &l.gate.conv_c_kernel));
            out.push((format!("{e}.gate.conv_c_bias"), &l.gate.conv_c_bias));
            out.push((format!("{e}.gate.conv_r_kernel"), &l.gate.conv_r_kernel));
            out.push((format!("{e}.gate.conv_r_bias"), &l.gate.conv_r_bias));
            out.push((format!("{e}.ln1_gamma"), &l.ln1_gamma));
            out.push((format!("{e}.ln1_beta"), &l.ln1_beta));
            out.extend(l.ffn.entries(&format!("{e}.ffn")));
            out.push((format!("{e}.ln2_gamma"), &l.ln2_gamma));
            out.push((format!("{e}.ln2_beta"), &l.ln2_beta));
        }
        out
    }

    pub fn entries_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![("encoder.query".to_string(), &mut self.query)];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let e = format!("encoder.layer{i}");
            out.extend(l.rgbq.offset.entries_mut(&format!("{e}.rgbq.offset")));
            out.extend(l.rgbq.weight.entries_mut(&format!("{e}.rgbq.weight")));
            out.push((format!("{e}.rgbq.proj_q"), &mut l.rgbq.proj_q));
            out.push((format!("{e}.rgbq.proj_r"), &mut l.rgbq.proj_r));
            out.push((format!("{e}.rgbq.ln_gamma"), &mut l.rgbq.ln_gamma));
            out.push((format!("{e}.rgbq.ln_beta"), &mut l.rgbq.ln_beta));
            out.extend(l.sca.offset.entries_mut(&format!("{e}.sca.offset")));
            out.extend(l.sca.weight.entries_mut(&format!("{e}.sca.weight")));
            out.push((format!("{e}.sca.proj"), &mut l.sca.proj));
            out.extend(l.gate.mlp0.entries_mut(&format!("{e}.gate.mlp0")));
            out.push((format!("{e}.gate.conv_c_kernel"), &mut l.gate.conv_c_kernel));
            out.push((format!("{e}.gate.conv_c_bias"), &mut l.gate.conv_c_bias));
            out.push((format!("{e}.gate.conv_r_kernel"), &mut l.gate.conv_r_kernel));
            out.push((format!("{e}.gate.conv_r_bias"), &mut l.gate.conv_r_bias));
            out.push((format!("{e}.ln1_gamma"), &mut l.ln1_gamma));
            out.push((format!("{e}.ln1_beta"), &mut l.ln1_beta));
            out.extend(l.ffn.entries_mut(&format!("{e}.ffn")));
            out.push((format!("{e}.ln2_gamma"), &mut l.ln2_gamma));
            out.push((format!("{e}.ln2_beta"), &mut l.ln2_beta));
        }
        out
    }
}

/// Evaluate an MLP on plain values, off the tape. Used for sampling-offset
/// heads: sample positions are treated as constants of the attention, so
/// offset heads receive no gradient (and, zero-initialized, stay zero).
fn eval_detached(mlp: &MlpParams, x: &Tensor) -> Vec<f64> {
    let inf = Tape::inference();
    mlp.forward(&inf, x).to_vec()
}

/// Reference heights for the camera lift, inclusive ends.
pub fn lift_heights(n: usize, z_min: f64, z_max: f64) -> Vec<f64> {
    if n == 1 {
        return vec![(z_min + z_max) / 2.0];
    }
    (0..n).map(|k| z_min + (z_max - z_min) * k as f64 / (n as f64 - 1.0)).collect()
}

// ── radar-guided query ──

/// Deformable self attention over the query map and (when enabled) the
/// radar map, with the BEV pixel itself as reference; residual-added to the
/// query and layer-normalized. `f_r = None` is the ablated form: plain
/// deformable self attention over the query map only.
pub fn radar_guided_query(
    q: &Tensor,
    f_r: Option<&Tensor>,
    p: &RgbqParams,
    s_points: usize,
    spec: &BevGridSpec,
    tape: &Tape,
) -> Tensor {
    let (h, w, c) = (spec.h(), spec.w(), spec.channels);
    assert_eq!(q.shape(), &[h, w, c], "query shape mismatch");
    let n = h * w;
    let q_flat = q.reshape(&[n, c]);

    let logits_full = p.weight.forward(tape, &q_flat);
    let offsets = eval_detached(&p.offset, &q_flat);
    debug_assert_eq!(offsets.len(), n * s_points * 4);

    // Sample positions: reference pixel plus learned offset, in cell units.
    let mut uv_q = Vec::with_capacity(n * s_points);
    let mut uv_r = Vec::with_capacity(n * s_points);
    for i in 0..n {
        let (row, col) = (i / w, i % w);
        for s in 0..s_points {
            let o = &offsets[i * s_points * 4..];
            uv_q.push((col as f64 + o[s * 2], row as f64 + o[s * 2 + 1]));
            let ro = &offsets[i * s_points * 4 + s_points * 2..];
            uv_r.push((col as f64 + ro[s * 2], row as f64 + ro[s * 2 + 1]));
        }
    }

    let proj_q_map = tape.matmul(&q_flat, &p.proj_q).reshape(&[h, w, c]);
    let sampled_q = tape.bilinear_rows(&proj_q_map, &Arc::new(uv_q));

    let attended = match f_r {
        Some(f_r) => {
            assert_eq!(f_r.shape(), &[h, w, c], "radar map shape mismatch");
            let weights = tape.softmax_rows(&logits_full);
            let w_q = tape.slice_cols(&weights, 0, s_points);
            let w_r = tape.slice_cols(&weights, s_points, 2 * s_points);
            let f_r_flat = f_r.reshape(&[n, c]);
            let proj_r_map = tape.matmul(&f_r_flat, &p.proj_r).reshape(&[h, w, c]);
            let sampled_r = tape.bilinear_rows(&proj_r_map, &Arc::new(uv_r));
            let from_q = tape.mix_rows(&w_q, &sampled_q);
            let from_r = tape.mix_rows(&w_r, &sampled_r);
            tape.add(&from_q, &from_r)
        }
        None => {
            let logits_q = tape.slice_cols(&logits_full, 0, s_points);
            let weights = tape.softmax_rows(&logits_q);
            tape.mix_rows(&weights, &sampled_q)
        }
    };

    let residual = tape.add(&q_flat, &attended);
    tape.layer_norm_rows(&residual, &p.ln_gamma, &p.ln_beta).reshape(&[h, w, c])
}

// ── spatial cross attention ──

/// Fixed per-scene geometry of the camera lift: for every BEV pixel and
/// reference height, the level-0 feature-map sample position and validity
/// per camera, plus the per-pixel valid-view count.
pub struct ScaGeometry {
    /// Per camera: sample positions `[n_pixels * n_heights]` and a softmax
    /// mask (0 where valid, large negative where not).
    per_cam: Vec<(Arc<Vec<(f64, f64)>>, Tensor, bool)>,
    /// Per-pixel `1 / max(1, hit_views)`.
    inv_hits: Tensor,
}

const MASK_OFF: f64 = -1e30;

pub fn sca_geometry(spec: &BevGridSpec, heights: &[f64], cams: &[CameraFeatures]) -> ScaGeometry {
    let (h, w) = (spec.h(), spec.w());
    let n = h * w;
    let nz = heights.len();
    let mut per_cam = Vec::with_capacity(cams.len());
    let mut hits = vec![0usize; n];
    for cam in cams {
        let fshape = cam.levels[0].shape();
        let (fh, fw) = (fshape[0], fshape[1]);
        let mut uvs = Vec::with_capacity(n * nz);
        let mut mask = vec![MASK_OFF; n * nz];
        let mut any_valid = false;
        for i in 0..n {
            let (row, col) = (i / w, i % w);
            let (x, y) = spec.cell_center(row, col);
            let mut cam_hit = false;
            for (zi, z) in heights.iter().enumerate() {
                let ((u, v), valid) = cam.model.project_level(&Vector3::new(x, y, *z), 0);
                let valid = valid && u <= (fw - 1) as f64 && v <= (fh - 1) as f64;
                if valid {
                    uvs.push((u, v));
                    mask[i * nz + zi] = 0.0;
                    cam_hit = true;
                    any_valid = true;
                } else {
                    uvs.push((-10.0, -10.0));
                }
            }
            if cam_hit {
                hits[i] += 1;
            }
        }
        per_cam.push((Arc::new(uvs), Tensor::from_vec(&[n, nz], mask), any_valid));
    }
    let inv: Vec<f64> = hits.iter().map(|h| 1.0 / (*h).max(1) as f64).collect();
    ScaGeometry { per_cam, inv_hits: Tensor::from_vec(&[n], inv) }
}

/// Per BEV pixel: lift to reference heights, sample each camera's level-0
/// features at learned offsets with mask-renormalized learned weights,
/// average over cameras that see the pixel, and residual-add to the query.
/// Pixels seen by no camera keep their query value exactly.
pub fn spatial_cross_attention(
    q_rg: &Tensor,
    cams: &[CameraFeatures],
    geo: &ScaGeometry,
    p: &ScaParams,
    heights: &[f64],
    spec: &BevGridSpec,
    tape: &Tape,
) -> Tensor {
    let (h, w, c) = (spec.h(), spec.w(), spec.channels);
    let n = h * w;
    let nz = heights.len();
    let q_flat = q_rg.reshape(&[n, c]);

    let logits = p.weight.forward(tape, &q_flat);
    let offsets = eval_detached(&p.offset, &q_flat);

    let mut attended_sum: Option<Tensor> = None;
    for (cam, (base_uv, mask, any_valid)) in cams.iter().zip(&geo.per_cam) {
        if !*any_valid {
            continue;
        }
        let fshape = cam.levels[0].shape();
        let (fh, fw, fc) = (fshape[0], fshape[1], fshape[2]);
        assert_eq!(fc, c, "camera channels must match BEV channels");
        let flat = cam.levels[0].reshape(&[fh * fw, fc]);
        let proj_map = tape.matmul(&flat, &p.proj).reshape(&[fh, fw, c]);

        let uvs: Vec<(f64, f64)> = base_uv
            .iter()
            .enumerate()
            .map(|(j, (u, v))| {
                if *u < 0.0 {
                    (*u, *v)
                } else {
                    let (i, zi) = (j / nz, j % nz);
                    let o = &offsets[i * nz * 2..];
                    (u + o[zi * 2], v + o[zi * 2 + 1])
                }
            })
            .collect();
        let sampled = tape.bilinear_rows(&proj_map, &Arc::new(uvs));
        let weights = tape.softmax_rows(&tape.add(&logits, mask));
        let att = tape.mix_rows(&weights, &sampled);
        attended_sum = Some(match attended_sum {
            Some(acc) => tape.add(&acc, &att),
            None => att,
        });
    }

    match attended_sum {
        Some(sum) => {
            let averaged = tape.scale_rows(&sum, &geo.inv_hits);
            tape.add(&q_flat, &averaged).reshape(&[h, w, c])
        }
        None => q_rg.clone(),
    }
}

// ── radar-camera gating ──

/// Gated fusion of the camera BEV map and the encoded radar map:
/// both gates see the elementwise sum of the two inputs, and each path is
/// gated per channel before summation.
fn gates_and_radar(b_c: &Tensor, f_r: &Tensor, p: &GatingParams, tape: &Tape) -> (Tensor, Tensor, Tensor) {
    assert_eq!(b_c.shape(), f_r.shape(), "gating inputs must share shape");
    let f_pr = encode_radar(f_r, p, tape);
    let sum = tape.add(b_c, &f_pr);
    let gate_c = tape.sigmoid(&tape.conv3x3(&sum, &p.conv_c_kernel, &p.conv_c_bias));
    let gate_r = tape.sigmoid(&tape.conv3x3(&sum, &p.conv_r_kernel, &p.conv_r_bias));
    (gate_c, gate_r, f_pr)
}

/// The sigmoid gate pair `(gate_c, gate_r)` over the joint map.
pub fn gating_gates(b_c: &Tensor, f_r: &Tensor, p: &GatingParams, tape: &Tape) -> (Tensor, Tensor) {
    let (gate_c, gate_r, _) = gates_and_radar(b_c, f_r, p, tape);
    (gate_c, gate_r)
}

pub fn radar_camera_gating(b_c: &Tensor, f_r: &Tensor, p: &GatingParams, tape: &Tape) -> Tensor {
    let (gate_c, gate_r, f_pr) = gates_and_radar(b_c, f_r, p, tape);
    tape.add(&tape.mul(&gate_c, b_c), &tape.mul(&gate_r, &f_pr))
}

/// The radar-side channel MLP of the gating block.
pub fn encode_radar(f_r: &Tensor, p: &GatingParams, tape: &Tape) -> Tensor {
    p.mlp0.forward(tape, f_r)
}

// ── full encoder ──

/// Run the L-layer encoder. `f_r` must be `Some` when `rgbq` or `rcg` is
/// enabled; with both disabled the radar map is ignored entirely and the
/// output is the pure camera path.
pub fn encode(
    params: &EncoderParams,
    f_r: Option<&Tensor>,
    cams: &[CameraFeatures],
    spec: &BevGridSpec,
    cfg: &EncoderConfig,
    flags: &AblationFlags,
    tape: &Tape,
) -> Tensor {
    let (h, w, c) = (spec.h(), spec.w(), spec.channels);
    assert_eq!(params.query.shape(), &[h, w, c], "encoder query shape mismatch");
    if flags.rgbq || flags.rcg {
        assert!(f_r.is_some(), "radar map required when rgbq or rcg is enabled");
    }
    let heights = lift_heights(cfg.heights, cfg.z_min, cfg.z_max);
    let geo = sca_geometry(spec, &heights, cams);
    let n = h * w;

    let mut q = params.query.clone();
    for layer in &params.layers {
        let q_rg = radar_guided_query(&q, if flags.rgbq { f_r } else { None }, &layer.rgbq, cfg.sample_points, spec, tape);
        let s = spatial_cross_attention(&q_rg, cams, &geo, &layer.sca, &heights, spec, tape);
        let fused = match (flags.rcg, flags.rgbq) {
            (true, _) => radar_camera_gating(&s, f_r.expect("radar map present"), &layer.gate, tape),
            (false, true) => {
                // Ablated gating: plain elementwise sum with the encoded radar map.
                let f_pr = encode_radar(f_r.expect("radar map present"), &layer.gate, tape);
                tape.add(&s, &f_pr)
            }
            (false, false) => s.clone(),
        };
        let res1 = tape.add(&fused.reshape(&[n, c]), &s.reshape(&[n, c]));
        let h1 = tape.layer_norm_rows(&res1, &layer.ln1_gamma, &layer.ln1_beta);
        let ffn_out = layer.ffn.forward(tape, &h1);
        let res2 = tape.add(&h1, &ffn_out);
        q = tape.layer_norm_rows(&res2, &layer.ln2_gamma, &layer.ln2_beta).reshape(&[h, w, c]);
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraModel, RigidTransform};
    use crate::rng::SplitRng;
    use crate::tensor::{Activation, MlpLayer};
    use nalgebra::Matrix3;

    fn eye(c: usize) -> Tensor {
        Tensor::from_vec(&[c, c], (0..c * c).map(|i| if i / c == i % c { 1.0 } else { 0.0 }).collect())
    }

    fn linear(inp: usize, out: usize, weight: Vec<f64>, bias: Vec<f64>) -> MlpParams {
        MlpParams::new(vec![MlpLayer {
            weight: Tensor::from_vec(&[inp, out], weight),
            bias: Tensor::from_vec(&[out], bias),
            activation: Activation::None,
        }])
    }

    fn zero_linear(inp: usize, out: usize) -> MlpParams {
        linear(inp, out, vec![0.0; inp * out], vec![0.0; out])
    }

    fn rgbq_identity(c: usize, s: usize) -> RgbqParams {
        RgbqParams {
            offset: zero_linear(c, s * 4),
            weight: zero_linear(c, s * 2),
            proj_q: eye(c),
            proj_r: eye(c),
            ln_gamma: Tensor::full(&[c], 1.0),
            ln_beta: Tensor::zeros(&[c]),
        }
    }

    fn ln_rows(x: &[f64], n: usize, c: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let row = &x[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let std = (var + 1e-6).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) / std;
            }
        }
        out
    }

    fn small_spec(h: usize, w: usize, c: usize) -> BevGridSpec {
        BevGridSpec::new_unchecked(-(w as f64) / 2.0, w as f64 / 2.0, -(h as f64) / 2.0, h as f64 / 2.0, 1.0, c)
            .unwrap()
    }

    #[test]
    fn rgbq_uniform_identity_oracle() {
        let (h, w, c, s) = (4, 4, 6, 4);
        let spec = small_spec(h, w, c);
        let tape = Tape::inference();
        let mut rng = SplitRng::new(3, "rgbq");
        let q = Tensor::from_vec(&[h, w, c], (0..h * w * c).map(|_| rng.range(-1.0, 1.0)).collect());
        let f_r = Tensor::zeros(&[h, w, c]);
        let out = radar_guided_query(&q, Some(&f_r), &rgbq_identity(c, s), s, &spec, &tape);
        // Uniform weights over 2S samples, zero offsets, identity projections,
        // zero radar: attention output is Q/2, so the block returns
        // normalize(Q + Q/2).
        let residual: Vec<f64> = q.values().iter().map(|v| v * 1.5).collect();
        let want = ln_rows(&residual, h * w, c);
        for (a, b) in out.values().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn rgbq_symmetric_maps_double_the_attention() {
        let (h, w, c, s) = (2, 2, 4, 3);
        let spec = small_spec(h, w, c);
        let tape = Tape::inference();
        let mut rng = SplitRng::new(4, "rgbq-sym");
        let q = Tensor::from_vec(&[h, w, c], (0..h * w * c).map(|_| rng.range(-1.0, 1.0)).collect());
        let out = radar_guided_query(&q, Some(&q), &rgbq_identity(c, s), s, &spec, &tape);
        let residual: Vec<f64> = q.values().iter().map(|v| v * 2.0).collect();
        let want = ln_rows(&residual, h * w, c);
        for (a, b) in out.values().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Manual bilinear sample on a [h, w, c] map with zero outside.
    fn sample(map: &[f64], h: usize, w: usize, c: usize, x: f64, y: f64, ch: usize) -> f64 {
        if x < 0.0 || y < 0.0 || x > (w - 1) as f64 || y > (h - 1) as f64 {
            return 0.0;
        }
        let x0 = (x.floor() as usize).min(w - 1);
        let y0 = (y.floor() as usize).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let g = |r: usize, cc: usize| map[(r * w + cc) * c + ch];
        g(y0, x0) * (1.0 - fx) * (1.0 - fy) + g(y0, x1) * fx * (1.0 - fy) + g(y1, x0) * (1.0 - fx) * fy + g(y1, x1) * fx * fy
    }

    #[test]
    fn rgbq_matches_loop_oracle() {
        let (h, w, c, s) = (4, 4, 8, 2);
        let spec = small_spec(h, w, c);
        let tape = Tape::inference();
        let mut rng = SplitRng::new(5, "rgbq-loop");
        let mut rand_vec = |n: usize, scale: f64| -> Vec<f64> { (0..n).map(|_| rng.range(-scale, scale)).collect() };
        let q_v = rand_vec(h * w * c, 1.0);
        let fr_v = rand_vec(h * w * c, 1.0);
        let q = Tensor::from_vec(&[h, w, c], q_v.clone());
        let f_r = Tensor::from_vec(&[h, w, c], fr_v.clone());
        // Nonzero offset bias exercises the bilinear path; random weight head
        // and projections exercise everything else.
        let off_bias = rand_vec(s * 4, 1.3);
        let wt_w = rand_vec(c * s * 2, 0.7);
        let wt_b = rand_vec(s * 2, 0.4);
        let pq = rand_vec(c * c, 0.5);
        let pr = rand_vec(c * c, 0.5);
        let params = RgbqParams {
            offset: linear(c, s * 4, vec![0.0; c * s * 4], off_bias.clone()),
            weight: linear(c, s * 2, wt_w.clone(), wt_b.clone()),
            proj_q: Tensor::from_vec(&[c, c], pq.clone()),
            proj_r: Tensor::from_vec(&[c, c], pr.clone()),
            ln_gamma: Tensor::from_vec(&[c], rand_vec(c, 1.0)),
            ln_beta: Tensor::from_vec(&[c], rand_vec(c, 0.5)),
        };
        let out = radar_guided_query(&q, Some(&f_r), &params, s, &spec, &tape);

        // Oracle: explicit per-pixel evaluation.
        let mat = |x: &[f64], m: &[f64], rows: usize, k: usize, cols: usize| -> Vec<f64> {
            let mut y = vec![0.0; rows * cols];
            for i in 0..rows {
                for kk in 0..k {
                    for j in 0..cols {
                        y[i * cols + j] += x[i * k + kk] * m[kk * cols + j];
                    }
                }
            }
            y
        };
        let proj_q_map = mat(&q_v, &pq, h * w, c, c);
        let proj_r_map = mat(&fr_v, &pr, h * w, c, c);
        let mut residual = vec![0.0; h * w * c];
        for i in 0..h * w {
            let (row, col) = (i / w, i % w);
            let mut logits = wt_b.clone();
            for kk in 0..c {
                for j in 0..2 * s {
                    logits[j] += q_v[i * c + kk] * wt_w[kk * 2 * s + j];
                }
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for ch in 0..c {
                let mut acc = 0.0;
                for si in 0..s {
                    let (dx, dy) = (off_bias[si * 2], off_bias[si * 2 + 1]);
                    acc += exps[si] / z * sample(&proj_q_map, h, w, c, col as f64 + dx, row as f64 + dy, ch);
                    let (rx, ry) = (off_bias[s * 2 + si * 2], off_bias[s * 2 + si * 2 + 1]);
                    acc += exps[s + si] / z * sample(&proj_r_map, h, w, c, col as f64 + rx, row as f64 + ry, ch);
                }
                residual[i * c + ch] = q_v[i * c + ch] + acc;
            }
        }
        let normed = ln_rows(&residual, h * w, c);
        let want: Vec<f64> = normed
            .iter()
            .enumerate()
            .map(|(idx, v)| v * params.ln_gamma.values()[idx % c] + params.ln_beta.values()[idx % c])
            .collect();
        for (a, b) in out.values().iter().zip(&want) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    /// A camera looking along +x with a 90-degree field of view.
    fn forward_camera(c: usize, image: usize, constant: Option<f64>) -> CameraFeatures {
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
        let mut rng = SplitRng::new(17, "cam-feats");
        let values = match constant {
            Some(k) => vec![k; side * side * c],
            None => (0..side * side * c).map(|_| rng.range(-1.0, 1.0)).collect(),
        };
        CameraFeatures { levels: vec![Tensor::from_vec(&[side, side, c], values)], model }
    }

    fn sca_identity(c: usize, nz: usize) -> ScaParams {
        ScaParams { offset: zero_linear(c, nz * 2), weight: zero_linear(c, nz), proj: eye(c) }
    }

    #[test]
    fn sca_uncovered_pixels_keep_query() {
        let (hh, ww, c) = (6, 6, 4);
        let spec = small_spec(hh, ww, c);
        let tape = Tape::inference();
        let mut rng = SplitRng::new(6, "sca");
        let q = Tensor::from_vec(&[hh, ww, c], (0..hh * ww * c).map(|_| rng.range(-1.0, 1.0)).collect());
        let cam = forward_camera(c, 32, Some(1.0));
        let heights = lift_heights(2, -1.0, 3.0);
        let geo = sca_geometry(&spec, &heights, std::slice::from_ref(&cam));
        let out = spatial_cross_attention(&q, std::slice::from_ref(&cam), &geo, &sca_identity(c, 2), &heights, &spec, &tape);
        // The camera looks along +x; pixels behind it (x < 0) are uncovered
        // and must carry the query through bit-exactly.
        let mut checked = 0;
        for i in 0..hh * ww {
            let (row, col) = (i / ww, i % ww);
            let (x, _y) = spec.cell_center(row, col);
            if x < -1.0 {
                for ch in 0..c {
                    assert_eq!(out.values()[i * c + ch], q.values()[i * c + ch]);
                }
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn sca_constant_field_attends_to_constant() {
        let (hh, ww, c) = (6, 6, 4);
        let spec = small_spec(hh, ww, c);
        let tape = Tape::inference();
        let q = Tensor::zeros(&[hh, ww, c]);
        let k = 2.5;
        let cam = forward_camera(c, 32, Some(k));
        let heights = lift_heights(3, -1.0, 3.0);
        let geo = sca_geometry(&spec, &heights, std::slice::from_ref(&cam));
        let out = spatial_cross_attention(&q, std::slice::from_ref(&cam), &geo, &sca_identity(c, 3), &heights, &spec, &tape);
        let mut covered = 0;
        for i in 0..hh * ww {
            let (row, col) = (i / ww, i % ww);
            let (x, y) = spec.cell_center(row, col);
            let mut any = false;
            for z in &heights {
                let ((u, v), valid) = cam.model.project_level(&Vector3::new(x, y, *z), 0);
                if valid && u <= 3.0 && v <= 3.0 {
                    any = true;
                }
            }
            if any {
                covered += 1;
                for ch in 0..c {
                    let got = out.values()[i * c + ch];
                    assert!((got - k).abs() < 1e-12, "pixel {i} ch {ch}: {got}");
                }
            }
        }
        assert!(covered > 0, "test camera covers nothing");
    }

    #[test]
    fn sca_matches_loop_oracle() {
        let (hh, ww, c, nz) = (4, 4, 6, 3);
        let spec = small_spec(hh, ww, c);
        let tape = Tape::inference();
        let mut rng = SplitRng::new(8, "sca-loop");
        let mut rand_vec = |n: usize, scale: f64| -> Vec<f64> { (0..n).map(|_| rng.range(-scale, scale)).collect() };
        let q_v = rand_vec(hh * ww * c, 1.0);
        let q = Tensor::from_vec(&[hh, ww, c], q_v.clone());
        let cam = forward_camera(c, 32, None);
        let heights = lift_heights(nz, -1.0, 3.0);
        let geo = sca_geometry(&spec, &heights, std::slice::from_ref(&cam));
        let off_bias = rand_vec(nz * 2, 0.8);
        let wt_w = rand_vec(c * nz, 0.6);
        let wt_b = rand_vec(nz, 0.3);
        let proj = rand_vec(c * c, 0.5);
        let params = ScaParams {
            offset: linear(c, nz * 2, vec![0.0; c * nz * 2], off_bias.clone()),
            weight: linear(c, nz, wt_w.clone(), wt_b.clone()),
            proj: Tensor::from_vec(&[c, c], proj.clone()),
        };
        let out = spatial_cross_attention(&q, std::slice::from_ref(&cam), &geo, &params, &heights, &spec, &tape);

        // Oracle.
        let fshape = cam.levels[0].shape();
        let (fh, fw) = (fshape[0], fshape[1]);
        let feat = cam.levels[0].values();
        let mut proj_map = vec![0.0; fh * fw * c];
        for i in 0..fh * fw {
            for kk in 0..c {
                for j in 0..c {
                    proj_map[i * c + j] += feat[i * c + kk] * proj[kk * c + j];
                }
            }
        }
        for i in 0..hh * ww {
            let (row, col) = (i / ww, i % ww);
            let (x, y) = spec.cell_center(row, col);
            let mut logits = wt_b.clone();
            for kk in 0..c {
                for j in 0..nz {
                    logits[j] += q_v[i * c + kk] * wt_w[kk * nz + j];
                }
            }
            let mut valid = vec![false; nz];
            let mut uv = vec![(0.0, 0.0); nz];
            let mut any = false;
            for (zi, z) in heights.iter().enumerate() {
                let ((u, v), ok) = cam.model.project_level(&Vector3::new(x, y, *z), 0);
                let ok = ok && u <= (fw - 1) as f64 && v <= (fh - 1) as f64;
                valid[zi] = ok;
                if ok {
                    uv[zi] = (u + off_bias[zi * 2], v + off_bias[zi * 2 + 1]);
                    any = true;
                }
            }
            for ch in 0..c {
                let want = if any {
                    let masked: Vec<f64> = logits
                        .iter()
                        .zip(&valid)
                        .map(|(l, ok)| if *ok { *l } else { f64::NEG_INFINITY })
                        .collect();
                    let m = masked.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = masked.iter().map(|l| if l.is_finite() { (l - m).exp() } else { 0.0 }).collect();
                    let z: f64 = exps.iter().sum();
                    let mut acc = 0.0;
                    for zi in 0..nz {
                        if valid[zi] {
                            acc += exps[zi] / z * sample(&proj_map, fh, fw, c, uv[zi].0, uv[zi].1, ch);
                        }
                    }
                    q_v[i * c + ch] + acc
                } else {
                    q_v[i * c + ch]
                };
                let got = out.values()[i * c + ch];
                assert!((got - want).abs() < 1e-10, "pixel {i} ch {ch}: {got} vs {want}");
            }
        }
    }

    fn gating_zero(c: usize) -> GatingParams {
        GatingParams {
            mlp0: linear(c, c, eye(c).to_vec(), vec![0.0; c]),
            conv_c_kernel: Tensor::zeros(&[3, 3, c, c]),
            conv_c_bias: Tensor::zeros(&[c]),
            conv_r_kernel: Tensor::zeros(&[3, 3, c, c]),
            conv_r_bias: Tensor::zeros(&[c]),
        }
    }

    #[test]
    fn gating_zero_convs_give_half_gates() {
        let (h, w, c) = (4, 4, 6);
        let tape = Tape::inference();
        let mut rng = SplitRng::new(10, "gate");
        let b_c = Tensor::from_vec(&[h, w, c], (0..h * w * c).map(|_| rng.range(-1.0, 1.0)).collect());
        let f_r = Tensor::from_vec(&[h, w, c], (0..h * w * c).map(|_| rng.range(-1.0, 1.0)).collect());
        let out = radar_camera_gating(&b_c, &f_r, &gating_zero(c), &tape);
        for ((o, b), f) in out.values().iter().zip(b_c.values()).zip(f_r.values()) {
            assert!((o - 0.5 * (b + f)).abs() < 1e-15);
        }
    }

    #[test]
    fn gating_null_inputs_stay_null() {
        let (h, w, c) = (4, 4, 6);
        let tape = Tape::inference();
        let mut params = gating_zero(c);
        params.mlp0 = zero_linear(c, c);
        let b_c = Tensor::zeros(&[h, w, c]);
        let f_r = Tensor::full(&[h, w, c], 3.0);
        let out = radar_camera_gating(&b_c, &f_r, &params, &tape);
        assert!(out.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gating_output_bounded_by_inputs() {
        let (h, w, c) = (4, 4, 6);
        let tape = Tape::inference();
        let mut rng = SplitRng::new(11, "gate-bound");
        let mut params = gating_zero(c);
        params.conv_c_kernel = Tensor::from_vec(&[3, 3, c, c], (0..9 * c * c).map(|_| rng.range(-0.5, 0.5)).collect());
        params.conv_r_kernel = Tensor::from_vec(&[3, 3, c, c], (0..9 * c * c).map(|_| rng.range(-0.5, 0.5)).collect());
        let b_c = Tensor::from_vec(&[h, w, c], (0..h * w * c).map(|_| rng.range(-2.0, 2.0)).collect());
        let f_r = Tensor::from_vec(&[h, w, c], (0..h * w * c).map(|_| rng.range(-2.0, 2.0)).collect());
        let out = radar_camera_gating(&b_c, &f_r, &params, &tape);
        for ((o, b), f) in out.values().iter().zip(b_c.values()).zip(f_r.values()) {
            assert!(o.abs() <= b.abs() + f.abs() + 1e-12);
        }
    }

    #[test]
    fn gating_null_sensor_uses_camera_gate_only() {
        let (h, w, c) = (4, 4, 6);
        let tape = Tape::inference();
        let mut rng = SplitRng::new(12, "null-sensor");
        let mut params = gating_zero(c);
        params.mlp0 = zero_linear(c, c);
        params.conv_c_kernel = Tensor::from_vec(&[3, 3, c, c], (0..9 * c * c).map(|_| rng.range(-0.5, 0.5)).collect());
        params.conv_c_bias = Tensor::from_vec(&[c], (0..c).map(|_| rng.range(-0.5, 0.5)).collect());
        params.conv_r_kernel = Tensor::from_vec(&[3, 3, c, c], (0..9 * c * c).map(|_| rng.range(-0.5, 0.5)).collect());
        let b_c = Tensor::from_vec(&[h, w, c], (0..h * w * c).map(|_| rng.range(-2.0, 2.0)).collect());
        let f_r = Tensor::zeros(&[h, w, c]);
        let out = radar_camera_gating(&b_c, &f_r, &params, &tape);
        let gate_path = tape.mul(
            &tape.sigmoid(&tape.conv3x3(&b_c, &params.conv_c_kernel, &params.conv_c_bias)),
            &b_c,
        );
        for (a, b) in out.values().iter().zip(gate_path.values()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    fn full_layer(c: usize, s: usize, nz: usize, hidden: usize) -> LayerParams {
        LayerParams {
            rgbq: rgbq_identity(c, s),
            sca: sca_identity(c, nz),
            gate: gating_zero(c),
            ln1_gamma: Tensor::full(&[c], 1.0),
            ln1_beta: Tensor::zeros(&[c]),
            ffn: MlpParams::new(vec![
                MlpLayer {
                    weight: Tensor::full(&[c, hidden], 0.1),
                    bias: Tensor::zeros(&[hidden]),
                    activation: Activation::Relu,
                },
                MlpLayer {
                    weight: Tensor::full(&[hidden, c], 0.1),
                    bias: Tensor::zeros(&[c]),
                    activation: Activation::None,
                },
            ]),
            ln2_gamma: Tensor::full(&[c], 1.0),
            ln2_beta: Tensor::zeros(&[c]),
        }
    }

    #[test]
    fn encode_single_layer_equals_manual_composition() {
        let (h, w, c) = (6, 6, 6);
        let spec = small_spec(h, w, c);
        let tape = Tape::inference();
        let mut rng = SplitRng::new(13, "encode");
        let query = Tensor::from_vec(&[h, w, c], (0..h * w * c).map(|_| rng.range(-1.0, 1.0)).collect());
        let f_r = Tensor::from_vec(&[h, w, c], (0..h * w * c).map(|_| rng.range(-1.0, 1.0)).collect());
        let cam = forward_camera(c, 32, None);
        let cfg = EncoderConfig { layers: 1, sample_points: 2, heights: 2, z_min: -1.0, z_max: 3.0, ffn_hidden: 8 };
        let layer = full_layer(c, 2, 2, 8);
        let params = EncoderParams { query: query.clone(), layers: vec![layer.clone()] };
        let flags = AblationFlags::default();
        let out = encode(&params, Some(&f_r), std::slice::from_ref(&cam), &spec, &cfg, &flags, &tape);

        let heights = lift_heights(2, -1.0, 3.0);
        let geo = sca_geometry(&spec, &heights, std::slice::from_ref(&cam));
        let q_rg = radar_guided_query(&query, Some(&f_r), &layer.rgbq, 2, &spec, &tape);
        let s = spatial_cross_attention(&q_rg, std::slice::from_ref(&cam), &geo, &layer.sca, &heights, &spec, &tape);
        let fused = radar_camera_gating(&s, &f_r, &layer.gate, &tape);
        let n = h * w;
        let h1 = tape.layer_norm_rows(&tape.add(&fused.reshape(&[n, c]), &s.reshape(&[n, c])), &layer.ln1_gamma, &layer.ln1_beta);
        let ffn_out = layer.ffn.forward(&tape, &h1);
        let want = tape.layer_norm_rows(&tape.add(&h1, &ffn_out), &layer.ln2_gamma, &layer.ln2_beta);
        for (a, b) in out.values().iter().zip(want.values()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn encode_two_layers_preserves_shape() {
        let (h, w, c) = (6, 6, 6);
        let spec = small_spec(h, w, c);
        let tape = Tape::inference();
        let query = Tensor::full(&[h, w, c], 0.3);
        let f_r = Tensor::full(&[h, w, c], -0.2);
        let cam = forward_camera(c, 32, None);
        let cfg = EncoderConfig { layers: 2, sample_points: 2, heights: 2, z_min: -1.0, z_max: 3.0, ffn_hidden: 8 };
        let params = EncoderParams { query, layers: vec![full_layer(c, 2, 2, 8), full_layer(c, 2, 2, 8)] };
        let out = encode(&params, Some(&f_r), std::slice::from_ref(&cam), &spec, &cfg, &AblationFlags::default(), &tape);
        assert_eq!(out.shape(), &[h, w, c]);
        assert!(out.all_finite());
    }

    #[test]
    fn encode_camera_only_ignores_radar() {
        let (h, w, c) = (6, 6, 6);
        let spec = small_spec(h, w, c);
        let tape = Tape::inference();
        let query = Tensor::full(&[h, w, c], 0.3);
        let cam = forward_camera(c, 32, None);
        let cfg = EncoderConfig { layers: 1, sample_points: 2, heights: 2, z_min: -1.0, z_max: 3.0, ffn_hidden: 8 };
        let params = EncoderParams { query, layers: vec![full_layer(c, 2, 2, 8)] };
        let flags = AblationFlags::all_off();
        let out = encode(&params, None, std::slice::from_ref(&cam), &spec, &cfg, &flags, &tape);
        assert_eq!(out.shape(), &[h, w, c]);
        assert!(out.all_finite());
    }
}
