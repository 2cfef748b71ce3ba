//! Per-level image → graph bridge.
//!
//! Pixels of `Y_t` are projected to the token width, the tokens attend to
//! them (query-only), the attention map pools pixel features into `M_i`, the
//! token summary is fused into every vertex of both hands, and the hands
//! exchange information by cross-hand attention followed by a shared MLP
//! merge. Tokens are only read here.

use crate::attention::{
    cross_hand_attention_backward, cross_hand_attention_traced, map_global_to_graph,
    map_global_to_graph_backward, query_attention_backward, query_attention_forward,
    separable_cross_attention, separable_cross_attention_backward, AttentionMap, AttentionNorm,
    CrossHandFeatures, CrossHandTrace, CrossHandWeights, HandProjections, MlpTrace, PointwiseMlp,
    QueryAttentionTrace, SeparableTrace, SeparableWeights,
};
use crate::error::{Error, Result};
use crate::ops::{chw_to_pixels, pixels_to_chw, Activation};
use crate::param::{join, ParamTree};
use crate::param_tree;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const OPERATORS: &[&str] = &["bridge_input_projection", "vertex_fusion", "bridge_forward"];

/// Cross-hand exchange weights at one level.
#[derive(Debug, Clone, PartialEq)]
pub enum CrossWeights {
    Dense(CrossHandWeights),
    /// Scoring and key branches come from the source hand, value and output
    /// branches from the target hand.
    Separable {
        left: SeparableWeights,
        right: SeparableWeights,
    },
}

impl ParamTree for CrossWeights {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        match self {
            CrossWeights::Dense(w) => w.for_each(&join(prefix, "dense"), f),
            CrossWeights::Separable { left, right } => {
                left.for_each(&join(prefix, "separable.left"), f);
                right.for_each(&join(prefix, "separable.right"), f);
            }
        }
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        match self {
            CrossWeights::Dense(w) => w.for_each_mut(&join(prefix, "dense"), f),
            CrossWeights::Separable { left, right } => {
                left.for_each_mut(&join(prefix, "separable.left"), f);
                right.for_each_mut(&join(prefix, "separable.right"), f);
            }
        }
    }
}


#[derive(Debug, Clone, PartialEq)]
pub struct BridgeLevel {
    pub level: usize,
    pub heads: usize,
    pub norm: AttentionNorm,
    /// `C_t × d`: pixel features to token width.
    pub w_in: Tensor,
    /// `heads × d/h × d/h`: query projection of the tokens.
    pub w_q: Tensor,
    /// `2d × d`: projects `[vertex | token summary]` back to `d`.
    pub fuse: Tensor,
    pub cross: CrossWeights,
    pub merge: PointwiseMlp,
}

param_tree!(BridgeLevel { w_in, w_q, fuse } nested { cross, merge });

impl BridgeLevel {
    #[allow(clippy::too_many_arguments)]
    pub fn random(
        level: usize,
        channels: usize,
        d: usize,
        heads: usize,
        norm: AttentionNorm,
        separable: bool,
        value_activation: Activation,
        mlp_activation: Activation,
        rng: &mut SeededRng,
    ) -> Self {
        let dh = d / heads;
        let w_in = Tensor::uniform(&[channels, d], 1.0 / (channels as f64).sqrt(), rng);
        let w_q = Tensor::uniform(&[heads, dh, dh], 1.0 / (dh as f64).sqrt(), rng);
        let fuse = Tensor::uniform(&[2 * d, d], 1.0 / ((2 * d) as f64).sqrt(), rng);
        let cross = if separable {
            CrossWeights::Separable {
                left: SeparableWeights::random(d, value_activation, rng),
                right: SeparableWeights::random(d, value_activation, rng),
            }
        } else {
            CrossWeights::Dense(CrossHandWeights {
                left: HandProjections::random(d, rng),
                right: HandProjections::random(d, rng),
            })
        };
        Self {
            level,
            heads,
            norm,
            w_in,
            w_q,
            fuse,
            cross,
            merge: PointwiseMlp::random(d, mlp_activation, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut("", &mut |_, t| *t = Tensor::zeros(t.shape()));
        z
    }

    pub fn dim(&self) -> usize {
        self.fuse.shape()[1]
    }
}

/// Bridge result for one level.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeOutput {
    pub left: Tensor,
    pub right: Tensor,
    /// Head-averaged `M × P` map from tokens to pixels.
    pub attention: AttentionMap,
    /// `M_i = A · F_X`.
    pub context: Tensor,
}

#[derive(Debug, Clone)]
enum CrossTrace {
    Dense(CrossHandTrace),
    Separable { to_left: SeparableTrace, to_right: SeparableTrace },
}

#[derive(Debug, Clone)]
pub struct BridgeTrace {
    pixels: Tensor,
    local: Tensor,
    tokens: Tensor,
    query: QueryAttentionTrace,
    context_mean: Tensor,
    left_in: Tensor,
    right_in: Tensor,
    fused_left: Tensor,
    fused_right: Tensor,
    cross: CrossTrace,
    sum_left: Tensor,
    sum_right: Tensor,
    mlp_left: MlpTrace,
    mlp_right: MlpTrace,
    hw: (usize, usize),
}

/// `[V | 1·m̄ᵀ] · W = V·W_top + 1·(m̄ᵀ W_bottom)`.
fn fuse_vertices(v: &Tensor, mean: &Tensor, fuse: &Tensor) -> Result<Tensor> {
    let (_, d) = v.dims2()?;
    let top = fuse.slice_rows(0, d)?;
    let bottom = fuse.slice_rows(d, 2 * d)?;
    let bias = mean.clone().reshape(&[1, d])?.matmul(&bottom)?.reshape(&[d])?;
    v.matmul(&top)?.add_row_broadcast(&bias)
}

fn check_inputs(y: &Tensor, tokens: &Tensor, left: &Tensor, right: &Tensor, lvl: &BridgeLevel) -> Result<()> {
    let (c, _, _) = y.dims3()?;
    let d = lvl.dim();
    if lvl.w_in.shape() != [c, d] {
        return Err(Error::shape("bridge.w_in", lvl.w_in.shape(), &[c, d]));
    }
    if lvl.fuse.shape() != [2 * d, d] {
        return Err(Error::shape("bridge.fuse", lvl.fuse.shape(), &[2 * d, d]));
    }
    let (_, td) = tokens.dims2()?;
    if td != d {
        return Err(Error::shape("bridge.tokens", tokens.shape(), &[tokens.shape()[0], d]));
    }
    if left.shape() != right.shape() {
        return Err(Error::Config(format!(
            "hand level mismatch: left {:?} vs right {:?}",
            left.shape(),
            right.shape()
        )));
    }
    let (_, vd) = left.dims2()?;
    if vd != d {
        return Err(Error::shape("bridge.vertices", left.shape(), &[left.shape()[0], d]));
    }
    Ok(())
}

pub fn bridge_forward_traced(
    y: &Tensor,
    tokens: &Tensor,
    left: &Tensor,
    right: &Tensor,
    lvl: &BridgeLevel,
) -> Result<(BridgeOutput, BridgeTrace)> {
    let run = || -> Result<(BridgeOutput, BridgeTrace)> {
        check_inputs(y, tokens, left, right, lvl)?;
        let (_, h, w) = y.dims3()?;
        let pixels = chw_to_pixels(y)?;
        let local = pixels.matmul(&lvl.w_in)?;
        let query = query_attention_forward(&local, tokens, lvl.heads, &lvl.w_q, None)?;
        let context = map_global_to_graph(&query.map, &local)?;
        let context_mean = context.mean_rows()?;
        let fused_left = fuse_vertices(left, &context_mean, &lvl.fuse)?;
        let fused_right = fuse_vertices(right, &context_mean, &lvl.fuse)?;
        let (incoming, cross) = match &lvl.cross {
            CrossWeights::Dense(cw) => {
                let (f, t) = cross_hand_attention_traced(&fused_left, &fused_right, cw, lvl.norm)?;
                (f, CrossTrace::Dense(t))
            }
            CrossWeights::Separable { left: wl, right: wr } => {
                let (to_left, tl) = separable_cross_attention(&fused_left, &fused_right, wr, wl)?;
                let (to_right, tr) = separable_cross_attention(&fused_right, &fused_left, wl, wr)?;
                (
                    CrossHandFeatures {
                        left_to_right: to_right,
                        right_to_left: to_left,
                    },
                    CrossTrace::Separable {
                        to_left: tl,
                        to_right: tr,
                    },
                )
            }
        };
        let sum_left = fused_left.add(&incoming.right_to_left)?;
        let sum_right = fused_right.add(&incoming.left_to_right)?;
        let (out_left, mlp_left) = lvl.merge.forward_traced(&sum_left)?;
        let (out_right, mlp_right) = lvl.merge.forward_traced(&sum_right)?;
        Ok((
            BridgeOutput {
                left: out_left,
                right: out_right,
                attention: query.map.clone(),
                context,
            },
            BridgeTrace {
                pixels,
                local,
                tokens: tokens.clone(),
                query,
                context_mean,
                left_in: left.clone(),
                right_in: right.clone(),
                fused_left,
                fused_right,
                cross,
                sum_left,
                sum_right,
                mlp_left,
                mlp_right,
                hw: (h, w),
            },
        ))
    };
    run().map_err(|e| e.at_level(lvl.level))
}

/// Runs one bridge level on feature map `Y_t` (`C_t × H × W`), the token set
/// and both hands' vertex features (`N_t × d`).
pub fn bridge_forward(y: &Tensor, tokens: &Tensor, left: &Tensor, right: &Tensor, lvl: &BridgeLevel) -> Result<BridgeOutput> {
    Ok(bridge_forward_traced(y, tokens, left, right, lvl)?.0)
}

#[derive(Debug, Clone)]
pub struct BridgeGrads {
    pub d_y: Tensor,
    pub d_tokens: Tensor,
    pub d_left: Tensor,
    pub d_right: Tensor,
    pub weights: BridgeLevel,
}

fn col_sums(x: &Tensor) -> Result<Tensor> {
    x.sum_rows()
}

pub fn bridge_backward(trace: &BridgeTrace, lvl: &BridgeLevel, d_left_out: &Tensor, d_right_out: &Tensor) -> Result<BridgeGrads> {
    let d = lvl.dim();
    let mut g = lvl.zeros_like();

    let (d_sum_left, g_ml) = lvl.merge.backward(&trace.mlp_left, &trace.sum_left, d_left_out)?;
    let (d_sum_right, g_mr) = lvl.merge.backward(&trace.mlp_right, &trace.sum_right, d_right_out)?;
    g.merge = PointwiseMlp {
        w1: g_ml.w1.add(&g_mr.w1)?,
        b1: g_ml.b1.add(&g_mr.b1)?,
        w2: g_ml.w2.add(&g_mr.w2)?,
        b2: g_ml.b2.add(&g_mr.b2)?,
        activation: lvl.merge.activation,
    };

    let mut d_fl = d_sum_left.clone();
    let mut d_fr = d_sum_right.clone();
    match (&trace.cross, &lvl.cross) {
        (CrossTrace::Dense(t), CrossWeights::Dense(cw)) => {
            let d_feat = CrossHandFeatures {
                left_to_right: d_sum_right,
                right_to_left: d_sum_left,
            };
            let (dl, dr, gw) = cross_hand_attention_backward(t, &trace.fused_left, &trace.fused_right, cw, &d_feat)?;
            d_fl.add_assign(&dl)?;
            d_fr.add_assign(&dr)?;
            g.cross = CrossWeights::Dense(gw);
        }
        (CrossTrace::Separable { to_left, to_right }, CrossWeights::Separable { left: wl, right: wr }) => {
            let gl = separable_cross_attention_backward(to_left, &trace.fused_left, &trace.fused_right, wr, wl, &d_sum_left)?;
            let gr = separable_cross_attention_backward(to_right, &trace.fused_right, &trace.fused_left, wl, wr, &d_sum_right)?;
            d_fl.add_assign(&gl.d_target)?;
            d_fl.add_assign(&gr.d_source)?;
            d_fr.add_assign(&gr.d_target)?;
            d_fr.add_assign(&gl.d_source)?;
            g.cross = CrossWeights::Separable {
                left: SeparableWeights {
                    w_i: gr.d_w_i,
                    w_k: gr.d_w_k,
                    w_v: gl.d_w_v,
                    w_o: gl.d_w_o,
                    activation: wl.activation,
                },
                right: SeparableWeights {
                    w_i: gl.d_w_i,
                    w_k: gl.d_w_k,
                    w_v: gr.d_w_v,
                    w_o: gr.d_w_o,
                    activation: wr.activation,
                },
            };
        }
        _ => return Err(Error::Config("bridge trace does not match its weights".into())),
    }

    // vertex fusion
    let top = lvl.fuse.slice_rows(0, d)?;
    let bottom = lvl.fuse.slice_rows(d, 2 * d)?;
    let d_left = d_fl.matmul_t(&top)?;
    let d_right = d_fr.matmul_t(&top)?;
    let d_top = trace.left_in.t_matmul(&d_fl)?.add(&trace.right_in.t_matmul(&d_fr)?)?;
    let s = col_sums(&d_fl)?.add(&col_sums(&d_fr)?)?;
    let d_bottom = trace.context_mean.clone().reshape(&[d, 1])?.matmul(&s.clone().reshape(&[1, d])?)?;
    let mut d_fuse = Tensor::zeros(lvl.fuse.shape());
    d_fuse.data_mut()[..d * d].copy_from_slice(d_top.data());
    d_fuse.data_mut()[d * d..].copy_from_slice(d_bottom.data());
    g.fuse = d_fuse;
    let d_mean = bottom.matmul(&s.reshape(&[d, 1])?)?;

    // context pooling and the query-only map
    let (m, _) = trace.tokens.dims2()?;
    let mut d_context = Tensor::zeros(&[m, d]);
    for r in 0..m {
        d_context.row_mut(r).iter_mut().zip(d_mean.data()).for_each(|(x, v)| *x = v / m as f64);
    }
    let (d_map, mut d_local) = map_global_to_graph_backward(&trace.query.map, &trace.local, &d_context)?;
    let q = query_attention_backward(&trace.query, &trace.local, &trace.tokens, &lvl.w_q, None, None, Some(&d_map))?;
    d_local.add_assign(&q.d_local)?;
    g.w_q = q.d_w_q;
    g.w_in = trace.pixels.t_matmul(&d_local)?;
    let d_y = pixels_to_chw(&d_local.matmul_t(&lvl.w_in)?, trace.hw.0, trace.hw.1)?;

    Ok(BridgeGrads {
        d_y,
        d_tokens: q.d_tokens,
        d_left,
        d_right,
        weights: g,
    })
}
