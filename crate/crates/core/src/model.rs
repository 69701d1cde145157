//! Full model assembly: parameter construction, named flat views for
//! checkpointing, and tape binding for training.
//!
//! Every tensor draws from an RNG stream keyed by (seed, entry name), so
//! initialization is independent of construction order.

use crate::bev::{EncoderParams, GatingParams, LayerParams, RgbqParams, ScaParams};
use crate::config::{RunConfig, NUM_CLASSES, REG_WIDTH};
use crate::error::Result;
use crate::head::{HeadParams, REG_COS};
use crate::radar::{RadarParams, POINT_WIDTH};
use crate::refine::{RefineParams, RADAR_FEATURE_WIDTH};
use crate::rng::SplitRng;
use crate::tensor::{Activation, MlpLayer, MlpParams, Tape, Tensor};

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub radar: RadarParams,
    pub encoder: EncoderParams,
    pub head: HeadParams,
    pub refine: RefineParams,
}

fn draw(seed: u64, name: &str, shape: &[usize], sigma: f64) -> Tensor {
    let mut rng = SplitRng::new(seed, name);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.normal_scaled(sigma)).collect())
}

fn xavier(seed: u64, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    draw(seed, name, shape, (2.0 / (fan_in + fan_out) as f64).sqrt())
}

fn eye(c: usize) -> Tensor {
    Tensor::from_vec(&[c, c], (0..c * c).map(|i| if i / c == i % c { 1.0 } else { 0.0 }).collect())
}

fn conv_kernel(seed: u64, name: &str, c_in: usize, c_out: usize) -> Tensor {
    xavier(seed, name, &[3, 3, c_in, c_out], 9 * c_in, 9 * c_out)
}

/// Xavier-initialized MLP over the width chain, ReLU on all but the last
/// layer.
fn mlp(seed: u64, name: &str, widths: &[usize]) -> MlpParams {
    let mut layers = Vec::with_capacity(widths.len() - 1);
    for (i, pair) in widths.windows(2).enumerate() {
        let (inp, out) = (pair[0], pair[1]);
        layers.push(MlpLayer {
            weight: xavier(seed, &format!("{name}.{i}.weight"), &[inp, out], inp, out),
            bias: Tensor::zeros(&[out]),
            activation: if i + 1 < widths.len() - 1 { Activation::Relu } else { Activation::None },
        });
    }
    MlpParams::new(layers)
}

/// Like `mlp` but with the final layer zeroed, so the block starts as a
/// constant (its bias) and trains from there.
fn mlp_zero_final(seed: u64, name: &str, widths: &[usize], final_bias: Option<Vec<f64>>) -> MlpParams {
    let mut m = mlp(seed, name, widths);
    let last = m.layers.len() - 1;
    let shape = m.layers[last].weight.shape().to_vec();
    m.layers[last].weight = Tensor::zeros(&shape);
    if let Some(b) = final_bias {
        m.layers[last].bias = Tensor::from_vec(&[shape[1]], b);
    }
    MlpParams::new(m.layers)
}

/// All-zero MLP: sampling-offset heads are evaluated off the tape, receive
/// no gradient, and therefore stay at zero (samples sit at the reference
/// points).
fn mlp_all_zero(widths: &[usize]) -> MlpParams {
    let layers = widths
        .windows(2)
        .map(|p| MlpLayer {
            weight: Tensor::zeros(&[p[0], p[1]]),
            bias: Tensor::zeros(&[p[1]]),
            activation: Activation::None,
        })
        .collect();
    MlpParams::new(layers)
}

impl ModelParams {
    /// Deterministic initialization for a configuration.
    ///
    /// Value projections start as the identity and attention logit heads at
    /// zero, so attention begins uniform over samples at the reference
    /// points. Gate convolutions start at zero (gates half-open), the
    /// regression and refinement output layers start at zero (unit boxes at
    /// cell centers; refinement an exact no-op), and the heatmap bias
    /// starts low so the focal loss sees a sparse prior.
    pub fn init(cfg: &RunConfig, seed: u64) -> Result<ModelParams> {
        let spec = cfg.grid_spec()?;
        let c = spec.channels;
        let s_points = cfg.encoder.sample_points;
        let nz = cfg.encoder.heights;

        let radar = RadarParams {
            point_mlp: mlp(seed, "radar.point_mlp", &[POINT_WIDTH, c, c]),
            conv1_kernel: conv_kernel(seed, "radar.conv1_kernel", c, c),
            conv1_bias: Tensor::zeros(&[c]),
            conv2_kernel: conv_kernel(seed, "radar.conv2_kernel", c, c),
            conv2_bias: Tensor::zeros(&[c]),
        };

        let mut layers = Vec::with_capacity(cfg.encoder.layers);
        for li in 0..cfg.encoder.layers {
            let e = format!("encoder.layer{li}");
            layers.push(LayerParams {
                rgbq: RgbqParams {
                    offset: mlp_all_zero(&[c, s_points * 4]),
                    weight: mlp_zero_final(seed, &format!("{e}.rgbq.weight"), &[c, s_points * 2], None),
                    proj_q: eye(c),
                    proj_r: eye(c),
                    ln_gamma: Tensor::full(&[c], 1.0),
                    ln_beta: Tensor::zeros(&[c]),
                },
                sca: ScaParams {
                    offset: mlp_all_zero(&[c, nz * 2]),
                    weight: mlp_zero_final(seed, &format!("{e}.sca.weight"), &[c, nz], None),
                    proj: eye(c),
                },
                gate: GatingParams {
                    mlp0: mlp(seed, &format!("{e}.gate.mlp0"), &[c, c]),
                    conv_c_kernel: Tensor::zeros(&[3, 3, c, c]),
                    conv_c_bias: Tensor::zeros(&[c]),
                    conv_r_kernel: Tensor::zeros(&[3, 3, c, c]),
                    conv_r_bias: Tensor::zeros(&[c]),
                },
                ln1_gamma: Tensor::full(&[c], 1.0),
                ln1_beta: Tensor::zeros(&[c]),
                ffn: mlp_zero_final(seed, &format!("{e}.ffn"), &[c, cfg.encoder.ffn_hidden, c], None),
                ln2_gamma: Tensor::full(&[c], 1.0),
                ln2_beta: Tensor::zeros(&[c]),
            });
        }
        let mut qrng = SplitRng::new(seed, "encoder.query");
        let query = Tensor::from_vec(
            &[spec.h(), spec.w(), c],
            (0..spec.num_cells() * c).map(|_| qrng.range(-0.1, 0.1)).collect(),
        );
        let encoder = EncoderParams { query, layers };

        let mut reg_bias = vec![0.0; REG_WIDTH];
        reg_bias[REG_COS] = 1.0;
        let mut heat = mlp(seed, "head.heat", &[c, NUM_CLASSES]);
        heat.layers[0].bias = Tensor::full(&[NUM_CLASSES], -2.0);
        let head = HeadParams {
            stem_kernel: conv_kernel(seed, "head.stem_kernel", c, c),
            stem_bias: Tensor::zeros(&[c]),
            heat,
            reg: mlp_zero_final(seed, "head.reg", &[c, REG_WIDTH], Some(reg_bias)),
        };

        let ca = cfg.refine.channels;
        let hidden = cfg.refine.hidden;
        let enc = cfg.refine.pos_freqs * 6;
        let per_radius = c / cfg.refine.ball_radii.len();
        let set_mlps = (0..cfg.refine.ball_radii.len())
            .map(|i| {
                let m = mlp(seed, &format!("refine.set{i}"), &[ca + 3, per_radius, per_radius]);
                relu_final(m)
            })
            .collect();
        let refine = RefineParams {
            mlp1: relu_final(mlp(seed, "refine.mlp1", &[RADAR_FEATURE_WIDTH, hidden])),
            mlp2: mlp(seed, "refine.mlp2", &[hidden + enc, hidden, 1]),
            mlp3: mlp(seed, "refine.mlp3", &[RADAR_FEATURE_WIDTH, hidden, ca]),
            set_mlps,
            head: mlp_zero_final(seed, "refine.head", &[2 * c, hidden, crate::refine::DELTA_WIDTH], None),
        };

        Ok(ModelParams { radar, encoder, head, refine })
    }

    pub fn entries(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.radar.entries();
        out.extend(self.encoder.entries());
        out.extend(self.head.entries());
        out.extend(self.refine.entries());
        out
    }

    pub fn entries_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.radar.entries_mut();
        out.extend(self.encoder.entries_mut());
        out.extend(self.head.entries_mut());
        out.extend(self.refine.entries_mut());
        out
    }

    /// Register every parameter as a tape variable, returning the tracked
    /// copy used for a training step.
    pub fn bind(&self, tape: &Tape) -> ModelParams {
        let mut bound = self.clone();
        for (_, t) in bound.entries_mut() {
            *t = tape.var(t);
        }
        bound
    }

    /// Total parameter count.
    pub fn n_values(&self) -> usize {
        self.entries().iter().map(|(_, t)| t.len()).sum()
    }
}

fn relu_final(mut m: MlpParams) -> MlpParams {
    let last = m.layers.len() - 1;
    m.layers[last].activation = Activation::Relu;
    m
}
