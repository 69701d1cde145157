//! Gradient tape: records primitive operations forward, replays them backward.
//!
//! Every differentiable primitive is a method on [`Tape`]. When the tape is
//! recording and at least one input is tracked, the op pushes a node holding
//! the inputs it needs for its vector-Jacobian product. [`Tape::backward`]
//! walks the nodes in reverse creation order (which is a reverse topological
//! order by construction) and accumulates gradients per node.
//!
//! Non-finite outputs are never silent: each op scans its result and poisons
//! the tape with the offending op name; pipeline stages surface the poison as
//! a numeric error.

use std::cell::{Cell, RefCell};
use std::sync::Arc;

use crate::error::{Error, Result};

use super::{NodeId, Tensor};

type Groups = Arc<Vec<Vec<usize>>>;

enum Op {
    Leaf,
    Matmul { a: Tensor, b: Tensor },
    Add { a: Tensor, b: Tensor },
    Sub { a: Tensor, b: Tensor },
    Mul { a: Tensor, b: Tensor },
    Affine { x: Tensor, mul: f64 },
    AddBias { x: Tensor, bias: Tensor },
    Relu { x: Tensor },
    Sigmoid { x: Tensor, y: Arc<Vec<f64>> },
    Softplus { x: Tensor },
    Abs { x: Tensor },
    SoftmaxRows { x: Tensor, y: Arc<Vec<f64>>, cols: usize },
    SumAll { x: Tensor },
    SegmentSum { x: Tensor, groups: Groups },
    SegmentMax { x: Tensor, winners: Vec<Option<usize>>, cols: usize },
    GatherRows { x: Tensor, idx: Arc<Vec<usize>> },
    ConcatCols { xs: Vec<Tensor>, widths: Vec<usize> },
    SliceCols { x: Tensor, lo: usize, hi: usize },
    ScaleRows { x: Tensor, w: Tensor },
    MixRows { w: Tensor, v: Tensor, s: usize, c: usize },
    Bilinear { map: Tensor, uvs: Arc<Vec<(f64, f64)>> },
    Conv3x3 { x: Tensor, k: Tensor, b: Tensor },
    LayerNormRows { x: Tensor, gamma: Tensor, cols: usize },
}

struct Node {
    op: Op,
}

/// Reverse-mode gradient tape. Confined to one thread.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: Cell<bool>,
    poison: RefCell<Option<String>>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    /// A recording tape: ops on tracked tensors build the backward graph.
    pub fn new() -> Tape {
        Tape { nodes: RefCell::new(Vec::new()), recording: Cell::new(true), poison: RefCell::new(None) }
    }

    /// A non-recording tape: ops compute values only. Used for inference.
    pub fn inference() -> Tape {
        let t = Tape::new();
        t.recording.set(false);
        t
    }

    pub fn is_recording(&self) -> bool {
        self.recording.get()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// First op that produced a non-finite value, if any.
    pub fn poisoned(&self) -> Option<String> {
        self.poison.borrow().clone()
    }

    pub fn clear_poison(&self) {
        *self.poison.borrow_mut() = None;
    }

    /// Surface the poison state as a numeric error.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        match self.poisoned() {
            Some(op) => Err(Error::numeric(format!("non-finite value produced by `{}` during {}", op, context))),
            None => Ok(()),
        }
    }

    fn scan(&self, op: &str, data: &[f64]) {
        if data.iter().any(|v| !v.is_finite()) {
            let mut p = self.poison.borrow_mut();
            if p.is_none() {
                *p = Some(op.to_string());
            }
        }
    }

    fn push(&self, op: Op) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op });
        NodeId(nodes.len() - 1)
    }

    fn emit(&self, op_name: &str, shape: &[usize], data: Vec<f64>, tracked: bool, op: impl FnOnce() -> Op) -> Tensor {
        self.scan(op_name, &data);
        let t = Tensor::from_vec(shape, data);
        if self.recording.get() && tracked {
            let id = self.push(op());
            t.with_node(id)
        } else {
            t
        }
    }

    /// Register a leaf whose gradient can be queried after `backward`.
    pub fn var(&self, t: &Tensor) -> Tensor {
        self.scan("var", t.values());
        if !self.recording.get() {
            return t.clone();
        }
        let id = self.push(Op::Leaf);
        t.clone().with_node(id)
    }

    // ── elementwise and linear ──

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape().len(), 2, "matmul lhs must be rank 2, got {:?}", a.shape());
        assert_eq!(b.shape().len(), 2, "matmul rhs must be rank 2, got {:?}", b.shape());
        let (m, ka) = (a.shape()[0], a.shape()[1]);
        let (kb, n) = (b.shape()[0], b.shape()[1]);
        assert_eq!(ka, kb, "matmul inner dims differ: {} vs {}", ka, kb);
        let (av, bv) = (a.values(), b.values());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for k in 0..ka {
                let aik = av[i * ka + k];
                if aik == 0.0 {
                    continue;
                }
                let brow = &bv[k * n..(k + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aik * brow[j];
                }
            }
        }
        let tracked = a.node().is_some() || b.node().is_some();
        self.emit("matmul", &[m, n], out, tracked, || Op::Matmul { a: a.clone(), b: b.clone() })
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape(), b.shape(), "add shape mismatch: {:?} vs {:?}", a.shape(), b.shape());
        let out: Vec<f64> = a.values().iter().zip(b.values()).map(|(x, y)| x + y).collect();
        let tracked = a.node().is_some() || b.node().is_some();
        self.emit("add", a.shape(), out, tracked, || Op::Add { a: a.clone(), b: b.clone() })
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape(), b.shape(), "sub shape mismatch: {:?} vs {:?}", a.shape(), b.shape());
        let out: Vec<f64> = a.values().iter().zip(b.values()).map(|(x, y)| x - y).collect();
        let tracked = a.node().is_some() || b.node().is_some();
        self.emit("sub", a.shape(), out, tracked, || Op::Sub { a: a.clone(), b: b.clone() })
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape(), b.shape(), "mul shape mismatch: {:?} vs {:?}", a.shape(), b.shape());
        let out: Vec<f64> = a.values().iter().zip(b.values()).map(|(x, y)| x * y).collect();
        let tracked = a.node().is_some() || b.node().is_some();
        self.emit("mul", a.shape(), out, tracked, || Op::Mul { a: a.clone(), b: b.clone() })
    }

    /// `y = mul * x + add`, elementwise with scalar coefficients.
    pub fn affine(&self, x: &Tensor, mul: f64, add: f64) -> Tensor {
        let out: Vec<f64> = x.values().iter().map(|v| mul * v + add).collect();
        let tracked = x.node().is_some();
        self.emit("affine", x.shape(), out, tracked, || Op::Affine { x: x.clone(), mul })
    }

    /// Broadcast-add a bias vector over the trailing axis.
    pub fn add_bias(&self, x: &Tensor, bias: &Tensor) -> Tensor {
        let (r, c) = x.as_rows();
        assert_eq!(bias.len(), c, "bias width {} vs trailing {}", bias.len(), c);
        let bv = bias.values();
        let mut out = x.to_vec();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += bv[j];
            }
        }
        let tracked = x.node().is_some() || bias.node().is_some();
        self.emit("add_bias", x.shape(), out, tracked, || Op::AddBias { x: x.clone(), bias: bias.clone() })
    }

    pub fn relu(&self, x: &Tensor) -> Tensor {
        let out: Vec<f64> = x.values().iter().map(|v| v.max(0.0)).collect();
        let tracked = x.node().is_some();
        self.emit("relu", x.shape(), out, tracked, || Op::Relu { x: x.clone() })
    }

    pub fn sigmoid(&self, x: &Tensor) -> Tensor {
        let out: Vec<f64> = x.values().iter().map(|&v| sigmoid_scalar(v)).collect();
        let tracked = x.node().is_some();
        let y = Arc::new(out.clone());
        self.emit("sigmoid", x.shape(), out, tracked, || Op::Sigmoid { x: x.clone(), y })
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&self, x: &Tensor) -> Tensor {
        let out: Vec<f64> = x.values().iter().map(|&v| softplus_scalar(v)).collect();
        let tracked = x.node().is_some();
        self.emit("softplus", x.shape(), out, tracked, || Op::Softplus { x: x.clone() })
    }

    pub fn abs(&self, x: &Tensor) -> Tensor {
        let out: Vec<f64> = x.values().iter().map(|v| v.abs()).collect();
        let tracked = x.node().is_some();
        self.emit("abs", x.shape(), out, tracked, || Op::Abs { x: x.clone() })
    }

    /// Softmax over the trailing axis, with max-subtraction for stability.
    /// Rank-1 input is treated as a single row.
    pub fn softmax_rows(&self, x: &Tensor) -> Tensor {
        let (r, c) = x.as_rows();
        assert!(c >= 1, "softmax over empty rows");
        let xv = x.values();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                out[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                out[i * c + j] /= sum;
            }
        }
        let tracked = x.node().is_some();
        let y = Arc::new(out.clone());
        self.emit("softmax", x.shape(), out, tracked, || Op::SoftmaxRows { x: x.clone(), y, cols: c })
    }

    // ── reductions and indexing ──

    pub fn sum_all(&self, x: &Tensor) -> Tensor {
        let s: f64 = x.values().iter().sum();
        let tracked = x.node().is_some();
        self.emit("sum_all", &[1], vec![s], tracked, || Op::SumAll { x: x.clone() })
    }

    pub fn mean_all(&self, x: &Tensor) -> Tensor {
        let n = x.len().max(1);
        let s = self.sum_all(x);
        self.affine(&s, 1.0 / n as f64, 0.0)
    }

    /// Sum rows of `x: [n, c]` per group; `groups[g]` lists row indices.
    /// Empty groups produce zero rows.
    pub fn segment_sum(&self, x: &Tensor, groups: &Groups) -> Tensor {
        let (n, c) = x.as_rows();
        let xv = x.values();
        let g_count = groups.len();
        let mut out = vec![0.0; g_count * c];
        for (gi, members) in groups.iter().enumerate() {
            for &row in members {
                assert!(row < n, "segment_sum row {} out of {}", row, n);
                for j in 0..c {
                    out[gi * c + j] += xv[row * c + j];
                }
            }
        }
        let tracked = x.node().is_some();
        self.emit("segment_sum", &[g_count, c], out, tracked, || Op::SegmentSum {
            x: x.clone(),
            groups: Arc::clone(groups),
        })
    }

    /// Per-channel max over rows of `x: [n, c]` per group. Ties break toward
    /// the lowest row index; empty groups produce zero rows.
    pub fn segment_max(&self, x: &Tensor, groups: &Groups) -> Tensor {
        let (n, c) = x.as_rows();
        let xv = x.values();
        let g_count = groups.len();
        let mut out = vec![0.0; g_count * c];
        let mut winners: Vec<Option<usize>> = vec![None; g_count * c];
        for (gi, members) in groups.iter().enumerate() {
            for &row in members {
                assert!(row < n, "segment_max row {} out of {}", row, n);
            }
            for j in 0..c {
                let mut best: Option<(f64, usize)> = None;
                for &row in members {
                    let v = xv[row * c + j];
                    let better = match best {
                        None => true,
                        Some((bv, _)) => v > bv,
                    };
                    if better {
                        best = Some((v, row));
                    }
                }
                if let Some((v, row)) = best {
                    out[gi * c + j] = v;
                    winners[gi * c + j] = Some(row);
                }
            }
        }
        let tracked = x.node().is_some();
        self.emit("segment_max", &[g_count, c], out, tracked, || Op::SegmentMax { x: x.clone(), winners, cols: c })
    }

    /// Select rows of `x: [n, c]` by index, duplicates allowed.
    pub fn gather_rows(&self, x: &Tensor, idx: &Arc<Vec<usize>>) -> Tensor {
        let (n, c) = x.as_rows();
        let xv = x.values();
        let mut out = vec![0.0; idx.len() * c];
        for (i, &row) in idx.iter().enumerate() {
            assert!(row < n, "gather_rows index {} out of {}", row, n);
            out[i * c..(i + 1) * c].copy_from_slice(&xv[row * c..(row + 1) * c]);
        }
        let tracked = x.node().is_some();
        self.emit("gather_rows", &[idx.len(), c], out, tracked, || Op::GatherRows {
            x: x.clone(),
            idx: Arc::clone(idx),
        })
    }

    /// Concatenate along the trailing axis; all inputs share the row count.
    pub fn concat_cols(&self, xs: &[&Tensor]) -> Tensor {
        assert!(!xs.is_empty(), "concat_cols of nothing");
        let r = xs[0].as_rows().0;
        let widths: Vec<usize> = xs
            .iter()
            .map(|t| {
                let (tr, tc) = t.as_rows();
                assert_eq!(tr, r, "concat_cols row mismatch: {} vs {}", tr, r);
                tc
            })
            .collect();
        let c_total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * c_total];
        for i in 0..r {
            let mut off = 0;
            for (t, &w) in xs.iter().zip(&widths) {
                out[i * c_total + off..i * c_total + off + w].copy_from_slice(&t.values()[i * w..(i + 1) * w]);
                off += w;
            }
        }
        let tracked = xs.iter().any(|t| t.node().is_some());
        self.emit("concat_cols", &[r, c_total], out, tracked, || Op::ConcatCols {
            xs: xs.iter().map(|t| (*t).clone()).collect(),
            widths,
        })
    }

    /// Columns `lo..hi` of `x: [n, c]`.
    pub fn slice_cols(&self, x: &Tensor, lo: usize, hi: usize) -> Tensor {
        let (r, c) = x.as_rows();
        assert!(lo < hi && hi <= c, "slice_cols {}..{} out of width {}", lo, hi, c);
        let xv = x.values();
        let w = hi - lo;
        let mut out = vec![0.0; r * w];
        for i in 0..r {
            out[i * w..(i + 1) * w].copy_from_slice(&xv[i * c + lo..i * c + hi]);
        }
        let tracked = x.node().is_some();
        self.emit("slice_cols", &[r, w], out, tracked, || Op::SliceCols { x: x.clone(), lo, hi })
    }

    /// Scale each row of `x: [n, c]` by the matching entry of `w: [n]`.
    pub fn scale_rows(&self, x: &Tensor, w: &Tensor) -> Tensor {
        let (r, c) = x.as_rows();
        assert_eq!(w.len(), r, "scale_rows weight count {} vs rows {}", w.len(), r);
        let (xv, wv) = (x.values(), w.values());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = xv[i * c + j] * wv[i];
            }
        }
        let tracked = x.node().is_some() || w.node().is_some();
        self.emit("scale_rows", x.shape(), out, tracked, || Op::ScaleRows { x: x.clone(), w: w.clone() })
    }

    /// Attention-style mixing: `out[i] = Σ_s w[i,s] · v[i·S + s]` with
    /// `w: [n, S]` and `v: [n·S, c]`.
    pub fn mix_rows(&self, w: &Tensor, v: &Tensor) -> Tensor {
        assert_eq!(w.shape().len(), 2, "mix_rows weights must be rank 2");
        let (n, s) = (w.shape()[0], w.shape()[1]);
        let (vr, c) = v.as_rows();
        assert_eq!(vr, n * s, "mix_rows value rows {} vs n*S {}", vr, n * s);
        let (wv, vv) = (w.values(), v.values());
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for si in 0..s {
                let wt = wv[i * s + si];
                if wt == 0.0 {
                    continue;
                }
                let vrow = &vv[(i * s + si) * c..(i * s + si + 1) * c];
                let orow = &mut out[i * c..(i + 1) * c];
                for j in 0..c {
                    orow[j] += wt * vrow[j];
                }
            }
        }
        let tracked = w.node().is_some() || v.node().is_some();
        self.emit("mix_rows", &[n, c], out, tracked, || Op::MixRows { w: w.clone(), v: v.clone(), s, c })
    }

    // ── sampling, convolution, normalization ──

    /// Bilinear samples from `map: [H, W, C]` at continuous pixel coordinates
    /// `(x, y)` per row. Coordinates outside `[0, W-1] × [0, H-1]` yield a
    /// zero row (see [`bilinear_flags`] for the clipped mask). Gradients flow
    /// to map values only, never to the coordinates.
    pub fn bilinear_rows(&self, map: &Tensor, uvs: &Arc<Vec<(f64, f64)>>) -> Tensor {
        assert_eq!(map.shape().len(), 3, "bilinear map must be [H, W, C], got {:?}", map.shape());
        let (h, w, c) = (map.shape()[0], map.shape()[1], map.shape()[2]);
        let mv = map.values();
        let mut out = vec![0.0; uvs.len() * c];
        for (i, &(x, y)) in uvs.iter().enumerate() {
            for (ix, iy, wt) in bilinear_taps(h, w, x, y) {
                let base = (iy * w + ix) * c;
                let orow = &mut out[i * c..(i + 1) * c];
                for j in 0..c {
                    orow[j] += wt * mv[base + j];
                }
            }
        }
        let tracked = map.node().is_some();
        self.emit("bilinear", &[uvs.len(), c], out, tracked, || Op::Bilinear {
            map: map.clone(),
            uvs: Arc::clone(uvs),
        })
    }

    /// Single-point convenience over [`Tape::bilinear_rows`]; also returns
    /// the clipped flag.
    pub fn bilinear(&self, map: &Tensor, uv: (f64, f64)) -> (Tensor, bool) {
        let uvs = Arc::new(vec![uv]);
        let out = self.bilinear_rows(map, &uvs);
        let clipped = bilinear_flags(map.shape()[0], map.shape()[1], &[uv])[0];
        (out.reshape(&[map.shape()[2]]), clipped)
    }

    /// Zero-padded same-size 3×3 convolution: `x: [H, W, Cin]`,
    /// `k: [3, 3, Cin, Cout]`, `b: [Cout]`.
    pub fn conv3x3(&self, x: &Tensor, k: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(x.shape().len(), 3, "conv input must be [H, W, C], got {:?}", x.shape());
        assert_eq!(k.shape().len(), 4, "conv kernel must be [3, 3, Cin, Cout], got {:?}", k.shape());
        assert_eq!(k.shape()[0], 3, "conv kernel must be 3x3");
        assert_eq!(k.shape()[1], 3, "conv kernel must be 3x3");
        let (h, w, ci) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        assert_eq!(k.shape()[2], ci, "conv kernel Cin {} vs input {}", k.shape()[2], ci);
        let co = k.shape()[3];
        assert_eq!(b.len(), co, "conv bias width {} vs Cout {}", b.len(), co);
        let (xv, kv, bv) = (x.values(), k.values(), b.values());
        let mut out = vec![0.0; h * w * co];
        for y in 0..h {
            for xx in 0..w {
                let orow = &mut out[(y * w + xx) * co..(y * w + xx) * co + co];
                orow.copy_from_slice(bv);
                for dy in 0..3usize {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..3usize {
                        let sx = xx as isize + dx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let xbase = ((sy as usize) * w + sx as usize) * ci;
                        let kbase = (dy * 3 + dx) * ci * co;
                        for cin in 0..ci {
                            let xi = xv[xbase + cin];
                            if xi == 0.0 {
                                continue;
                            }
                            let krow = &kv[kbase + cin * co..kbase + (cin + 1) * co];
                            for cout in 0..co {
                                orow[cout] += xi * krow[cout];
                            }
                        }
                    }
                }
            }
        }
        let tracked = x.node().is_some() || k.node().is_some() || b.node().is_some();
        self.emit("conv3x3", &[h, w, co], out, tracked, || Op::Conv3x3 {
            x: x.clone(),
            k: k.clone(),
            b: b.clone(),
        })
    }

    /// Per-row layer normalization over the trailing axis with learnable
    /// scale and shift: `(x - mean) / std * gamma + beta`.
    pub fn layer_norm_rows(&self, x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Tensor {
        let (r, c) = x.as_rows();
        assert_eq!(gamma.len(), c, "layer_norm gamma width {} vs {}", gamma.len(), c);
        assert_eq!(beta.len(), c, "layer_norm beta width {} vs {}", beta.len(), c);
        let (xv, gv) = (x.values(), gamma.values());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let (mean, std) = row_moments(row);
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) / std * gv[j];
            }
        }
        let tracked = x.node().is_some() || gamma.node().is_some();
        let op = || Op::LayerNormRows { x: x.clone(), gamma: gamma.clone(), cols: c };
        let y = self.emit("layer_norm", x.shape(), out, tracked, op);
        self.add_bias(&y, beta)
    }

    // ── backward ──

    /// Accumulate gradients of a scalar loss into every tracked node.
    pub fn backward(&self, loss: &Tensor) -> Result<Grads> {
        if loss.len() != 1 {
            return Err(Error::shape(format!("backward needs a scalar loss, got shape {:?}", loss.shape())));
        }
        let loss_id = match loss.node() {
            Some(NodeId(id)) => id,
            None => return Err(Error::shape("backward loss is not recorded on this tape")),
        };
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss_id] = Some(vec![1.0]);
        for i in (0..=loss_id).rev() {
            let (lo, hi) = grads.split_at_mut(i);
            let g = match &hi[0] {
                Some(g) => g,
                None => continue,
            };
            apply_vjp(&nodes[i].op, g, lo);
        }
        Ok(Grads { grads })
    }
}

/// Gradients produced by [`Tape::backward`], indexed by tape node.
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// Gradient of the loss with respect to `t`, if `t` is tracked and was
    /// reached by the backward sweep.
    pub fn wrt(&self, t: &Tensor) -> Option<&[f64]> {
        let NodeId(id) = t.node()?;
        self.grads.get(id)?.as_deref()
    }

    /// Gradient of the loss with respect to `t`; untouched tracked leaves
    /// yield zeros.
    pub fn wrt_or_zeros(&self, t: &Tensor) -> Vec<f64> {
        match self.wrt(t) {
            Some(g) => g.to_vec(),
            None => vec![0.0; t.len()],
        }
    }
}

fn acc(lo: &mut [Option<Vec<f64>>], t: &Tensor, f: impl FnOnce(&mut [f64])) {
    if let Some(NodeId(id)) = t.node() {
        let slot = &mut lo[id];
        let buf = slot.get_or_insert_with(|| vec![0.0; t.len()]);
        f(buf);
    }
}

fn apply_vjp(op: &Op, g: &[f64], lo: &mut [Option<Vec<f64>>]) {
    match op {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            let (av, bv) = (a.values(), b.values());
            acc(lo, a, |da| {
                for i in 0..m {
                    for kk in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[i * n + j] * bv[kk * n + j];
                        }
                        da[i * k + kk] += s;
                    }
                }
            });
            acc(lo, b, |db| {
                for kk in 0..k {
                    for j in 0..n {
                        let mut s = 0.0;
                        for i in 0..m {
                            s += av[i * k + kk] * g[i * n + j];
                        }
                        db[kk * n + j] += s;
                    }
                }
            });
        }
        Op::Add { a, b } => {
            acc(lo, a, |da| add_into(da, g, 1.0));
            acc(lo, b, |db| add_into(db, g, 1.0));
        }
        Op::Sub { a, b } => {
            acc(lo, a, |da| add_into(da, g, 1.0));
            acc(lo, b, |db| add_into(db, g, -1.0));
        }
        Op::Mul { a, b } => {
            let (av, bv) = (a.values(), b.values());
            acc(lo, a, |da| {
                for i in 0..g.len() {
                    da[i] += g[i] * bv[i];
                }
            });
            acc(lo, b, |db| {
                for i in 0..g.len() {
                    db[i] += g[i] * av[i];
                }
            });
        }
        Op::Affine { x, mul } => {
            acc(lo, x, |dx| add_into(dx, g, *mul));
        }
        Op::AddBias { x, bias } => {
            let (r, c) = x.as_rows();
            acc(lo, x, |dx| add_into(dx, g, 1.0));
            acc(lo, bias, |db| {
                for i in 0..r {
                    for j in 0..c {
                        db[j] += g[i * c + j];
                    }
                }
            });
        }
        Op::Relu { x } => {
            let xv = x.values();
            acc(lo, x, |dx| {
                for i in 0..g.len() {
                    if xv[i] > 0.0 {
                        dx[i] += g[i];
                    }
                }
            });
        }
        Op::Sigmoid { x, y } => {
            acc(lo, x, |dx| {
                for i in 0..g.len() {
                    dx[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            });
        }
        Op::Softplus { x } => {
            let xv = x.values();
            acc(lo, x, |dx| {
                for i in 0..g.len() {
                    dx[i] += g[i] * sigmoid_scalar(xv[i]);
                }
            });
        }
        Op::Abs { x } => {
            let xv = x.values();
            acc(lo, x, |dx| {
                for i in 0..g.len() {
                    dx[i] += g[i] * sign_scalar(xv[i]);
                }
            });
        }
        Op::SoftmaxRows { x, y, cols } => {
            let c = *cols;
            let r = y.len() / c;
            acc(lo, x, |dx| {
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[i * c + j] += yr[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::SumAll { x } => {
            acc(lo, x, |dx| {
                for v in dx.iter_mut() {
                    *v += g[0];
                }
            });
        }
        Op::SegmentSum { x, groups } => {
            let (_, c) = x.as_rows();
            acc(lo, x, |dx| {
                for (gi, members) in groups.iter().enumerate() {
                    for &row in members {
                        for j in 0..c {
                            dx[row * c + j] += g[gi * c + j];
                        }
                    }
                }
            });
        }
        Op::SegmentMax { x, winners, cols } => {
            let c = *cols;
            acc(lo, x, |dx| {
                for (slot, winner) in winners.iter().enumerate() {
                    if let Some(row) = winner {
                        dx[row * c + slot % c] += g[slot];
                    }
                }
            });
        }
        Op::GatherRows { x, idx } => {
            let (_, c) = x.as_rows();
            acc(lo, x, |dx| {
                for (i, &row) in idx.iter().enumerate() {
                    for j in 0..c {
                        dx[row * c + j] += g[i * c + j];
                    }
                }
            });
        }
        Op::ConcatCols { xs, widths } => {
            let c_total: usize = widths.iter().sum();
            let mut off = 0;
            for (t, &w) in xs.iter().zip(widths) {
                let r = t.as_rows().0;
                acc(lo, t, |dt| {
                    for i in 0..r {
                        for j in 0..w {
                            dt[i * w + j] += g[i * c_total + off + j];
                        }
                    }
                });
                off += w;
            }
        }
        Op::SliceCols { x, lo: l, hi } => {
            let (r, c) = x.as_rows();
            let w = hi - l;
            acc(lo, x, |dx| {
                for i in 0..r {
                    for j in 0..w {
                        dx[i * c + l + j] += g[i * w + j];
                    }
                }
            });
        }
        Op::ScaleRows { x, w } => {
            let (r, c) = x.as_rows();
            let (xv, wv) = (x.values(), w.values());
            acc(lo, x, |dx| {
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] += g[i * c + j] * wv[i];
                    }
                }
            });
            acc(lo, w, |dw| {
                for i in 0..r {
                    let mut s = 0.0;
                    for j in 0..c {
                        s += g[i * c + j] * xv[i * c + j];
                    }
                    dw[i] += s;
                }
            });
        }
        Op::MixRows { w, v, s, c } => {
            let (s, c) = (*s, *c);
            let n = w.shape()[0];
            let (wv, vv) = (w.values(), v.values());
            acc(lo, w, |dw| {
                for i in 0..n {
                    for si in 0..s {
                        let vrow = &vv[(i * s + si) * c..(i * s + si + 1) * c];
                        let grow = &g[i * c..(i + 1) * c];
                        let mut acc_w = 0.0;
                        for j in 0..c {
                            acc_w += grow[j] * vrow[j];
                        }
                        dw[i * s + si] += acc_w;
                    }
                }
            });
            acc(lo, v, |dv| {
                for i in 0..n {
                    for si in 0..s {
                        let wt = wv[i * s + si];
                        if wt == 0.0 {
                            continue;
                        }
                        let grow = &g[i * c..(i + 1) * c];
                        let drow = &mut dv[(i * s + si) * c..(i * s + si + 1) * c];
                        for j in 0..c {
                            drow[j] += wt * grow[j];
                        }
                    }
                }
            });
        }
        Op::Bilinear { map, uvs } => {
            let (h, w, c) = (map.shape()[0], map.shape()[1], map.shape()[2]);
            acc(lo, map, |dm| {
                for (i, &(x, y)) in uvs.iter().enumerate() {
                    for (ix, iy, wt) in bilinear_taps(h, w, x, y) {
                        let base = (iy * w + ix) * c;
                        for j in 0..c {
                            dm[base + j] += wt * g[i * c + j];
                        }
                    }
                }
            });
        }
        Op::Conv3x3 { x, k, b } => {
            let (h, w, ci) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let co = k.shape()[3];
            let (xv, kv) = (x.values(), k.values());
            acc(lo, b, |db| {
                for y in 0..h {
                    for xx in 0..w {
                        for cout in 0..co {
                            db[cout] += g[(y * w + xx) * co + cout];
                        }
                    }
                }
            });
            acc(lo, k, |dk| {
                for y in 0..h {
                    for xx in 0..w {
                        let grow = &g[(y * w + xx) * co..(y * w + xx + 1) * co];
                        for dy in 0..3usize {
                            let sy = y as isize + dy as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for dx in 0..3usize {
                                let sx = xx as isize + dx as isize - 1;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                let xbase = ((sy as usize) * w + sx as usize) * ci;
                                let kbase = (dy * 3 + dx) * ci * co;
                                for cin in 0..ci {
                                    let xi = xv[xbase + cin];
                                    if xi == 0.0 {
                                        continue;
                                    }
                                    let drow = &mut dk[kbase + cin * co..kbase + (cin + 1) * co];
                                    for cout in 0..co {
                                        drow[cout] += xi * grow[cout];
                                    }
                                }
                            }
                        }
                    }
                }
            });
            acc(lo, x, |dxv| {
                for y in 0..h {
                    for xx in 0..w {
                        let grow = &g[(y * w + xx) * co..(y * w + xx + 1) * co];
                        for dy in 0..3usize {
                            let sy = y as isize + dy as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for dx in 0..3usize {
                                let sx = xx as isize + dx as isize - 1;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                let xbase = ((sy as usize) * w + sx as usize) * ci;
                                let kbase = (dy * 3 + dx) * ci * co;
                                for cin in 0..ci {
                                    let krow = &kv[kbase + cin * co..kbase + (cin + 1) * co];
                                    let mut s = 0.0;
                                    for cout in 0..co {
                                        s += krow[cout] * grow[cout];
                                    }
                                    dxv[xbase + cin] += s;
                                }
                            }
                        }
                    }
                }
            });
        }
        Op::LayerNormRows { x, gamma, cols } => {
            let c = *cols;
            let r = x.len() / c;
            let (xv, gv) = (x.values(), gamma.values());
            acc(lo, gamma, |dg| {
                for i in 0..r {
                    let row = &xv[i * c..(i + 1) * c];
                    let (mean, std) = row_moments(row);
                    for j in 0..c {
                        dg[j] += g[i * c + j] * (row[j] - mean) / std;
                    }
                }
            });
            acc(lo, x, |dx| {
                for i in 0..r {
                    let row = &xv[i * c..(i + 1) * c];
                    let grow = &g[i * c..(i + 1) * c];
                    let (mean, std) = row_moments(row);
                    let inv = 1.0 / std;
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..c {
                        let xhat = (row[j] - mean) * inv;
                        let dxhat = grow[j] * gv[j];
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat;
                    }
                    mean_dxhat /= c as f64;
                    mean_dxhat_xhat /= c as f64;
                    for j in 0..c {
                        let xhat = (row[j] - mean) * inv;
                        let dxhat = grow[j] * gv[j];
                        dx[i * c + j] += (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * inv;
                    }
                }
            });
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

const LAYER_NORM_EPS: f64 = 1e-6;

fn row_moments(row: &[f64]) -> (f64, f64) {
    let c = row.len() as f64;
    let mean: f64 = row.iter().sum::<f64>() / c;
    let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
    (mean, (var + LAYER_NORM_EPS).sqrt())
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sign_scalar(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Non-zero bilinear taps `(col, row, weight)` for pixel coordinate `(x, y)`
/// in a `h × w` map; empty when the coordinate is outside the closed box
/// `[0, w-1] × [0, h-1]`.
fn bilinear_taps(h: usize, w: usize, x: f64, y: f64) -> Vec<(usize, usize, f64)> {
    let mut taps = Vec::with_capacity(4);
    if !(x.is_finite() && y.is_finite()) {
        return taps;
    }
    if x < 0.0 || y < 0.0 || x > (w - 1) as f64 || y > (h - 1) as f64 {
        return taps;
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as usize, y0 as usize);
    for (iy, wy) in [(y0, 1.0 - fy), (y0 + 1, fy)] {
        if wy == 0.0 || iy >= h {
            continue;
        }
        for (ix, wx) in [(x0, 1.0 - fx), (x0 + 1, fx)] {
            if wx == 0.0 || ix >= w {
                continue;
            }
            taps.push((ix, iy, wx * wy));
        }
    }
    taps
}

/// Clipped mask companion to [`Tape::bilinear_rows`]: `true` where the
/// coordinate fell outside the sampleable box and the output row is zero.
pub fn bilinear_flags(h: usize, w: usize, uvs: &[(f64, f64)]) -> Vec<bool> {
    uvs.iter()
        .map(|&(x, y)| !(x.is_finite() && y.is_finite()) || x < 0.0 || y < 0.0 || x > (w - 1) as f64 || y > (h - 1) as f64)
        .collect()
}
