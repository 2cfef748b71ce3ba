//! Attention operators.
//!
//! * [`query_only_cross_attention`]: local features → global tokens, where only
//!   the query side is projected and keys/values are the raw local features.
//! * [`map_global_to_graph`]: pools local features with an attention map.
//! * [`cross_hand_attention`]: dense softmax attention between the two hands.
//! * [`merge_cross_features`]: residual merge through a pointwise MLP.
//! * [`separable_self_attention`] / [`separable_cross_attention`]: context-score
//!   attention whose cost is linear in the token count.
//!
//! Every operator has a `*_backward` companion returning input and weight
//! gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{softmax_rows, softmax_rows_backward, Activation};
use crate::rng::SeededRng;
use crate::tensor::{dot, Tensor};

/// Operator names exported by this module; each has a cost formula in
/// [`crate::flops`].
pub const OPERATORS: &[&str] = &[
    "query_only_cross_attention",
    "query_only_attention_map",
    "map_global_to_graph",
    "cross_hand_attention",
    "merge_cross_features",
    "separable_self_attention",
    "separable_cross_attention",
];

/// Recommended upper bound on the token count.
pub const MAX_RECOMMENDED_TOKENS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiHeadConfig {
    pub heads: usize,
    pub model_dim: usize,
    pub tokens: usize,
}

impl MultiHeadConfig {
    /// Hard errors for unusable configs; returns soft warnings otherwise.
    pub fn validate(&self) -> Result<Vec<String>> {
        if self.heads == 0 || self.model_dim == 0 || self.tokens == 0 {
            return Err(Error::Config(format!(
                "heads, model_dim and tokens must be positive: {self:?}"
            )));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        let mut warnings = Vec::new();
        if self.tokens > MAX_RECOMMENDED_TOKENS {
            warnings.push(format!(
                "{} global tokens exceeds the lightweight regime (fewer than 7)",
                self.tokens
            ));
        }
        Ok(warnings)
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

/// Row-stochastic `M × P` map from tokens to local positions.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub weights: Tensor,
}

impl AttentionMap {
    pub fn new(weights: Tensor) -> Result<Self> {
        weights.dims2()?;
        Ok(Self { weights })
    }

    /// Largest `|Σ_row − 1|`.
    pub fn max_row_sum_deviation(&self) -> f64 {
        let (rows, _) = self.weights.dims2().expect("rank-2 map");
        (0..rows)
            .map(|r| (self.weights.row(r).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn check(&self) -> Result<()> {
        let dev = self.max_row_sum_deviation();
        let in_range = self.weights.data().iter().all(|&v| (0.0..=1.0).contains(&v));
        if dev > 1e-6 || !in_range {
            return Err(Error::Degenerate(format!(
                "attention map not row-stochastic (row-sum deviation {dev:e})"
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// query-only cross attention

fn head_block(w_q: &Tensor, head: usize) -> Result<Tensor> {
    let [_, dh, ch] = w_q.shape()[..] else {
        return Err(Error::InvalidShape {
            shape: w_q.shape().to_vec(),
            reason: "query projection must be heads × d/h × c/h".into(),
        });
    };
    let n = dh * ch;
    Tensor::new(vec![dh, ch], w_q.data()[head * n..(head + 1) * n].to_vec())
}

/// Intermediate values of a query-only attention pass, kept for backward.
#[derive(Debug, Clone)]
pub struct QueryAttentionTrace {
    pub map: AttentionMap,
    /// Token update `M × d`, present when an output projection was given.
    pub out: Option<Tensor>,
    queries: Vec<Tensor>,
    probs: Vec<Tensor>,
    context: Tensor,
}

#[derive(Debug, Clone)]
pub struct QueryAttentionGrads {
    pub d_local: Tensor,
    pub d_tokens: Tensor,
    pub d_w_q: Tensor,
    pub d_w_o: Option<Tensor>,
}

fn query_attention_check(local: &Tensor, tokens: &Tensor, heads: usize, w_q: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (p, c) = local.dims2()?;
    let (m, d) = tokens.dims2()?;
    if heads == 0 || d % heads != 0 || c % heads != 0 {
        return Err(Error::Config(format!(
            "token dim {d} and local dim {c} must be divisible by heads {heads}"
        )));
    }
    if w_q.shape() != [heads, d / heads, c / heads] {
        return Err(Error::shape(
            "query_only_cross_attention.w_q",
            w_q.shape(),
            &[heads, d / heads, c / heads],
        ));
    }
    Ok((p, c, m, d))
}

/// Runs the attention. `w_o = None` computes only the head-averaged map.
pub fn query_attention_forward(
    local: &Tensor,
    tokens: &Tensor,
    heads: usize,
    w_q: &Tensor,
    w_o: Option<&Tensor>,
) -> Result<QueryAttentionTrace> {
    let (p, c, m, d) = query_attention_check(local, tokens, heads, w_q)?;
    let (dh, ch) = (d / heads, c / heads);
    let scale = 1.0 / (ch as f64).sqrt();
    let mut map = Tensor::zeros(&[m, p]);
    let mut context = Tensor::zeros(&[m, c]);
    let mut queries = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let z = tokens.slice_cols(h * dh, (h + 1) * dh)?;
        let x = local.slice_cols(h * ch, (h + 1) * ch)?;
        let q = z.matmul(&head_block(w_q, h)?)?;
        let prob = softmax_rows(&q.matmul_t(&x)?.scale(scale))?;
        if w_o.is_some() {
            context.set_cols(h * ch, &prob.matmul(&x)?)?;
        }
        map.axpy(1.0 / heads as f64, &prob)?;
        queries.push(q);
        probs.push(prob);
    }
    let out = match w_o {
        Some(w_o) => {
            if w_o.shape() != [c, d] {
                return Err(Error::shape("query_only_cross_attention.w_o", w_o.shape(), &[c, d]));
            }
            Some(context.matmul(w_o)?)
        }
        None => None,
    };
    Ok(QueryAttentionTrace {
        map: AttentionMap::new(map)?,
        out,
        queries,
        probs,
        context,
    })
}

/// Cross attention from `local` (`P × c`) to `tokens` (`M × d`) with a query
/// projection only. Returns the head-averaged `M × P` map and the `M × d`
/// token update (`concat_h(softmax(z̄_h W_h^Q x̄_hᵀ / √(c/h)) x̄_h) · W^O`).
pub fn query_only_cross_attention(
    local: &Tensor,
    tokens: &Tensor,
    cfg: &MultiHeadConfig,
    w_q: &Tensor,
    w_o: &Tensor,
) -> Result<(AttentionMap, Tensor)> {
    cfg.validate()?;
    let (m, d) = tokens.dims2()?;
    if m != cfg.tokens || d != cfg.model_dim {
        return Err(Error::shape(
            "query_only_cross_attention.tokens",
            tokens.shape(),
            &[cfg.tokens, cfg.model_dim],
        ));
    }
    let trace = query_attention_forward(local, tokens, cfg.heads, w_q, Some(w_o))?;
    Ok((trace.map, trace.out.expect("output projection given")))
}

pub fn query_attention_backward(
    trace: &QueryAttentionTrace,
    local: &Tensor,
    tokens: &Tensor,
    w_q: &Tensor,
    w_o: Option<&Tensor>,
    d_out: Option<&Tensor>,
    d_map: Option<&Tensor>,
) -> Result<QueryAttentionGrads> {
    let heads = trace.probs.len();
    let (_, c, _, d) = query_attention_check(local, tokens, heads, w_q)?;
    let (dh, ch) = (d / heads, c / heads);
    let scale = 1.0 / (ch as f64).sqrt();

    let (d_context, d_w_o) = match (d_out, w_o) {
        (Some(g), Some(w_o)) => (Some(g.matmul_t(w_o)?), Some(trace.context.t_matmul(g)?)),
        (None, Some(w_o)) => (None, Some(Tensor::zeros(w_o.shape()))),
        _ => (None, None),
    };

    let mut d_local = Tensor::zeros(local.shape());
    let mut d_tokens = Tensor::zeros(tokens.shape());
    let mut d_w_q = Tensor::zeros(w_q.shape());
    for h in 0..heads {
        let x = local.slice_cols(h * ch, (h + 1) * ch)?;
        let z = tokens.slice_cols(h * dh, (h + 1) * dh)?;
        let prob = &trace.probs[h];
        let mut d_prob = Tensor::zeros(prob.shape());
        let mut d_x = Tensor::zeros(x.shape());
        if let Some(dc) = &d_context {
            let dc_h = dc.slice_cols(h * ch, (h + 1) * ch)?;
            d_prob.add_assign(&dc_h.matmul_t(&x)?)?;
            d_x.add_assign(&prob.t_matmul(&dc_h)?)?;
        }
        if let Some(dm) = d_map {
            d_prob.axpy(1.0 / heads as f64, dm)?;
        }
        let d_scores = softmax_rows_backward(prob, &d_prob)?.scale(scale);
        let q = &trace.queries[h];
        let d_q = d_scores.matmul(&x)?;
        d_x.add_assign(&d_scores.t_matmul(q)?)?;
        let wq_h = head_block(w_q, h)?;
        let d_wq_h = z.t_matmul(&d_q)?;
        let d_z = d_q.matmul_t(&wq_h)?;
        let n = dh * ch;
        d_w_q.data_mut()[h * n..(h + 1) * n].copy_from_slice(d_wq_h.data());
        // scatter head slices back
        let mut dl_block = d_local.slice_cols(h * ch, (h + 1) * ch)?;
        dl_block.add_assign(&d_x)?;
        d_local.set_cols(h * ch, &dl_block)?;
        d_tokens.set_cols(h * dh, &d_z)?;
    }
    Ok(QueryAttentionGrads {
        d_local,
        d_tokens,
        d_w_q,
        d_w_o,
    })
}

// ---------------------------------------------------------------------------
// global → graph mapping

/// `A · F_X`: each output row is an attention-weighted pooling of local rows.
pub fn map_global_to_graph(attn: &AttentionMap, local: &Tensor) -> Result<Tensor> {
    let (_, p) = attn.weights.dims2()?;
    let (lp, _) = local.dims2()?;
    if p != lp {
        return Err(Error::shape("map_global_to_graph", attn.weights.shape(), local.shape()));
    }
    attn.weights.matmul(local)
}

/// Returns `(d_attn, d_local)`.
pub fn map_global_to_graph_backward(attn: &AttentionMap, local: &Tensor, d_out: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((d_out.matmul_t(local)?, attn.weights.t_matmul(d_out)?))
}

// ---------------------------------------------------------------------------
// dense cross-hand attention

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionNorm {
    /// Divide scores by `√d`.
    #[default]
    SqrtD,
    /// Divide scores by `d`.
    D,
}

impl AttentionNorm {
    pub fn divisor(self, d: usize) -> f64 {
        match self {
            AttentionNorm::SqrtD => (d as f64).sqrt(),
            AttentionNorm::D => d as f64,
        }
    }
}

/// One hand's query/key/value projections, each `d × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct HandProjections {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

impl HandProjections {
    pub fn random(d: usize, rng: &mut SeededRng) -> Self {
        let b = 1.0 / (d as f64).sqrt();
        Self {
            w_q: Tensor::uniform(&[d, d], b, rng),
            w_k: Tensor::uniform(&[d, d], b, rng),
            w_v: Tensor::uniform(&[d, d], b, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w_q: Tensor::zeros(self.w_q.shape()),
            w_k: Tensor::zeros(self.w_k.shape()),
            w_v: Tensor::zeros(self.w_v.shape()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossHandWeights {
    pub left: HandProjections,
    pub right: HandProjections,
}

/// `left_to_right` is attended by the right hand using left-hand keys/values,
/// and vice versa.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossHandFeatures {
    pub left_to_right: Tensor,
    pub right_to_left: Tensor,
}

#[derive(Debug, Clone)]
pub struct DirectedTrace {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    probs: Tensor,
    divisor: f64,
}

impl DirectedTrace {
    pub fn probs(&self) -> &Tensor {
        &self.probs
    }
}

/// `softmax(target·W_Q (source·W_K)ᵀ / norm) · source·W_V`.
pub fn directed_attention(
    target: &Tensor,
    source: &Tensor,
    w_q: &Tensor,
    w_k: &Tensor,
    w_v: &Tensor,
    norm: AttentionNorm,
) -> Result<(Tensor, DirectedTrace)> {
    let (_, d) = target.dims2()?;
    let q = target.matmul(w_q)?;
    let k = source.matmul(w_k)?;
    let v = source.matmul(w_v)?;
    let divisor = norm.divisor(d);
    let probs = softmax_rows(&q.matmul_t(&k)?.scale(1.0 / divisor))?;
    let out = probs.matmul(&v)?;
    Ok((out, DirectedTrace { q, k, v, probs, divisor }))
}

#[derive(Debug, Clone)]
pub struct DirectedGrads {
    pub d_target: Tensor,
    pub d_source: Tensor,
    pub d_w_q: Tensor,
    pub d_w_k: Tensor,
    pub d_w_v: Tensor,
}

pub fn directed_attention_backward(
    trace: &DirectedTrace,
    target: &Tensor,
    source: &Tensor,
    w_q: &Tensor,
    w_k: &Tensor,
    w_v: &Tensor,
    d_out: &Tensor,
) -> Result<DirectedGrads> {
    let d_probs = d_out.matmul_t(&trace.v)?;
    let d_v = trace.probs.t_matmul(d_out)?;
    let d_scores = softmax_rows_backward(&trace.probs, &d_probs)?.scale(1.0 / trace.divisor);
    let d_q = d_scores.matmul(&trace.k)?;
    let d_k = d_scores.t_matmul(&trace.q)?;
    let mut d_source = d_k.matmul_t(w_k)?;
    d_source.add_assign(&d_v.matmul_t(w_v)?)?;
    Ok(DirectedGrads {
        d_target: d_q.matmul_t(w_q)?,
        d_source,
        d_w_q: target.t_matmul(&d_q)?,
        d_w_k: source.t_matmul(&d_k)?,
        d_w_v: source.t_matmul(&d_v)?,
    })
}

fn check_hand_pair(left: &Tensor, right: &Tensor) -> Result<()> {
    left.dims2()?;
    if left.shape() != right.shape() {
        return Err(Error::Config(format!(
            "hand level mismatch: left {:?} vs right {:?}",
            left.shape(),
            right.shape()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct CrossHandTrace {
    pub right_to_left: DirectedTrace,
    pub left_to_right: DirectedTrace,
}

pub fn cross_hand_attention_traced(
    left: &Tensor,
    right: &Tensor,
    w: &CrossHandWeights,
    norm: AttentionNorm,
) -> Result<(CrossHandFeatures, CrossHandTrace)> {
    check_hand_pair(left, right)?;
    let (r2l, t_r2l) = directed_attention(left, right, &w.left.w_q, &w.right.w_k, &w.right.w_v, norm)?;
    let (l2r, t_l2r) = directed_attention(right, left, &w.right.w_q, &w.left.w_k, &w.left.w_v, norm)?;
    Ok((
        CrossHandFeatures {
            left_to_right: l2r,
            right_to_left: r2l,
        },
        CrossHandTrace {
            right_to_left: t_r2l,
            left_to_right: t_l2r,
        },
    ))
}

/// Dense cross-hand attention:
/// `FH^{R→L} = softmax(Q^L K^{Rᵀ} / norm) V^R` and symmetrically for `L→R`,
/// with per-hand linear projections.
pub fn cross_hand_attention(
    left: &Tensor,
    right: &Tensor,
    weights: &CrossHandWeights,
    norm: AttentionNorm,
) -> Result<CrossHandFeatures> {
    Ok(cross_hand_attention_traced(left, right, weights, norm)?.0)
}

/// Returns `(d_left, d_right, weight grads)`.
pub fn cross_hand_attention_backward(
    trace: &CrossHandTrace,
    left: &Tensor,
    right: &Tensor,
    w: &CrossHandWeights,
    d_feat: &CrossHandFeatures,
) -> Result<(Tensor, Tensor, CrossHandWeights)> {
    let g_r2l = directed_attention_backward(
        &trace.right_to_left,
        left,
        right,
        &w.left.w_q,
        &w.right.w_k,
        &w.right.w_v,
        &d_feat.right_to_left,
    )?;
    let g_l2r = directed_attention_backward(
        &trace.left_to_right,
        right,
        left,
        &w.right.w_q,
        &w.left.w_k,
        &w.left.w_v,
        &d_feat.left_to_right,
    )?;
    let d_left = g_r2l.d_target.add(&g_l2r.d_source)?;
    let d_right = g_l2r.d_target.add(&g_r2l.d_source)?;
    let grads = CrossHandWeights {
        left: HandProjections {
            w_q: g_r2l.d_w_q,
            w_k: g_l2r.d_w_k,
            w_v: g_l2r.d_w_v,
        },
        right: HandProjections {
            w_q: g_l2r.d_w_q,
            w_k: g_r2l.d_w_k,
            w_v: g_r2l.d_w_v,
        },
    };
    Ok((d_left, d_right, grads))
}

// ---------------------------------------------------------------------------
// pointwise merge

/// A function applied independently to each row.
pub trait RowMap {
    fn apply(&self, x: &Tensor) -> Result<Tensor>;
}

/// `x ↦ x`.
pub struct IdentityMap;

impl RowMap for IdentityMap {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.clone())
    }
}

/// Two-layer perceptron `d → 2d → d` applied row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct PointwiseMlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct MlpTrace {
    pre: Tensor,
    hidden: Tensor,
}

impl PointwiseMlp {
    pub fn random(d: usize, activation: Activation, rng: &mut SeededRng) -> Self {
        Self {
            w1: Tensor::uniform(&[d, 2 * d], 1.0 / (d as f64).sqrt(), rng),
            b1: Tensor::zeros(&[2 * d]),
            w2: Tensor::uniform(&[2 * d, d], 1.0 / ((2 * d) as f64).sqrt(), rng),
            b2: Tensor::zeros(&[d]),
            activation,
        }
    }

    pub fn forward_traced(&self, x: &Tensor) -> Result<(Tensor, MlpTrace)> {
        let pre = x.matmul(&self.w1)?.add_row_broadcast(&self.b1)?;
        let hidden = self.activation.forward(&pre);
        let out = hidden.matmul(&self.w2)?.add_row_broadcast(&self.b2)?;
        Ok((out, MlpTrace { pre, hidden }))
    }

    /// Returns `(dx, grads)` where `grads` holds `dw1, db1, dw2, db2`.
    pub fn backward(&self, trace: &MlpTrace, x: &Tensor, d_out: &Tensor) -> Result<(Tensor, PointwiseMlp)> {
        let d_w2 = trace.hidden.t_matmul(d_out)?;
        let d_b2 = d_out.sum_rows()?;
        let d_hidden = d_out.matmul_t(&self.w2)?;
        let d_pre = self.activation.backward(&trace.pre, &d_hidden)?;
        let d_w1 = x.t_matmul(&d_pre)?;
        let d_b1 = d_pre.sum_rows()?;
        let dx = d_pre.matmul_t(&self.w1)?;
        Ok((
            dx,
            PointwiseMlp {
                w1: d_w1,
                b1: d_b1,
                w2: d_w2,
                b2: d_b2,
                activation: self.activation,
            },
        ))
    }
}

impl RowMap for PointwiseMlp {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_traced(x)?.0)
    }
}

/// `fp(own + incoming)`.
pub fn merge_cross_features(own: &Tensor, incoming: &Tensor, fp: &impl RowMap) -> Result<Tensor> {
    if own.shape() != incoming.shape() {
        return Err(Error::shape("merge_cross_features", own.shape(), incoming.shape()));
    }
    fp.apply(&own.add(incoming)?)
}

// ---------------------------------------------------------------------------
// separable attention

#[derive(Debug, Clone, PartialEq)]
pub struct SeparableWeights {
    /// Input branch `d`: maps each token to a scalar score.
    pub w_i: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub activation: Activation,
}

impl SeparableWeights {
    pub fn random(d: usize, activation: Activation, rng: &mut SeededRng) -> Self {
        let b = 1.0 / (d as f64).sqrt();
        Self {
            w_i: Tensor::uniform(&[d], b, rng),
            w_k: Tensor::uniform(&[d, d], b, rng),
            w_v: Tensor::uniform(&[d, d], b, rng),
            w_o: Tensor::uniform(&[d, d], b, rng),
            activation,
        }
    }

    fn check(&self, d: usize) -> Result<()> {
        if self.w_i.shape() != [d] {
            return Err(Error::shape("separable.w_i", self.w_i.shape(), &[d]));
        }
        for (name, w) in [("separable.w_k", &self.w_k), ("separable.w_v", &self.w_v), ("separable.w_o", &self.w_o)] {
            if w.shape() != [d, d] {
                return Err(Error::shape(name, w.shape(), &[d, d]));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SeparableTrace {
    /// Context scores over source tokens, sums to 1.
    pub context_scores: Tensor,
    /// Context vector `Σ_i c_s(i) · key_i`.
    pub context_vector: Tensor,
    keys: Tensor,
    value_pre: Tensor,
    values: Tensor,
    gated: Tensor,
}

/// Separable attention where the context vector is built from `source` and
/// shared with every row of `target`.
///
/// `c_s = softmax(source · w_i)`, `c_v = Σ_i c_s(i) (source · W_K)_i`,
/// `out_j = (act(target · W_V)_j ⊙ c_v) · W_O`. The scoring and key branches
/// use `source_w`; the value branch and output projection use `target_w`.
pub fn separable_cross_attention(
    target: &Tensor,
    source: &Tensor,
    source_w: &SeparableWeights,
    target_w: &SeparableWeights,
) -> Result<(Tensor, SeparableTrace)> {
    let (_, d) = target.dims2()?;
    let (k, ds) = source.dims2()?;
    if ds != d {
        return Err(Error::shape("separable_cross_attention", target.shape(), source.shape()));
    }
    source_w.check(d)?;
    target_w.check(d)?;
    let scores: Vec<f64> = (0..k).map(|i| dot(source.row(i), source_w.w_i.data())).collect();
    let context_scores = softmax_rows(&Tensor::vector(scores)?)?;
    let keys = source.matmul(&source_w.w_k)?;
    let context_vector = context_scores.clone().reshape(&[1, k])?.matmul(&keys)?.reshape(&[d])?;
    let value_pre = target.matmul(&target_w.w_v)?;
    let values = target_w.activation.forward(&value_pre);
    let (n, _) = values.dims2()?;
    let mut gated = values.clone();
    for r in 0..n {
        for (g, c) in gated.row_mut(r).iter_mut().zip(context_vector.data()) {
            *g *= c;
        }
    }
    let out = gated.matmul(&target_w.w_o)?;
    Ok((
        out,
        SeparableTrace {
            context_scores,
            context_vector,
            keys,
            value_pre,
            values,
            gated,
        },
    ))
}

/// Separable self-attention over the `k` rows of `x`.
pub fn separable_self_attention(x: &Tensor, w: &SeparableWeights) -> Result<(Tensor, SeparableTrace)> {
    separable_cross_attention(x, x, w, w)
}

#[derive(Debug, Clone)]
pub struct SeparableGrads {
    pub d_target: Tensor,
    pub d_source: Tensor,
    /// Gradients for `w_i`, `w_k` (source side).
    pub d_w_i: Tensor,
    pub d_w_k: Tensor,
    /// Gradients for `w_v`, `w_o` (target side).
    pub d_w_v: Tensor,
    pub d_w_o: Tensor,
}

pub fn separable_cross_attention_backward(
    trace: &SeparableTrace,
    target: &Tensor,
    source: &Tensor,
    source_w: &SeparableWeights,
    target_w: &SeparableWeights,
    d_out: &Tensor,
) -> Result<SeparableGrads> {
    let (n, d) = target.dims2()?;
    let (k, _) = source.dims2()?;
    let d_w_o = trace.gated.t_matmul(d_out)?;
    let d_gated = d_out.matmul_t(&target_w.w_o)?;
    let mut d_values = d_gated.clone();
    let mut d_cv = vec![0.0; d];
    for r in 0..n {
        let vals = trace.values.row(r);
        let dg = d_gated.row(r);
        for j in 0..d {
            d_cv[j] += dg[j] * vals[j];
        }
        for (dv, c) in d_values.row_mut(r).iter_mut().zip(trace.context_vector.data()) {
            *dv *= c;
        }
    }
    let d_value_pre = target_w.activation.backward(&trace.value_pre, &d_values)?;
    let d_w_v = target.t_matmul(&d_value_pre)?;
    let d_target = d_value_pre.matmul_t(&target_w.w_v)?;

    let cs = trace.context_scores.data();
    let mut d_keys = Tensor::zeros(&[k, d]);
    let mut d_cs = vec![0.0; k];
    for i in 0..k {
        d_cs[i] = dot(trace.keys.row(i), &d_cv);
        for (dk, g) in d_keys.row_mut(i).iter_mut().zip(&d_cv) {
            *dk = cs[i] * g;
        }
    }
    let d_w_k = source.t_matmul(&d_keys)?;
    let mut d_source = d_keys.matmul_t(&source_w.w_k)?;
    let d_scores = softmax_rows_backward(&trace.context_scores, &Tensor::vector(d_cs)?)?;
    let mut d_w_i = vec![0.0; d];
    for i in 0..k {
        let s = d_scores.data()[i];
        for (dw, x) in d_w_i.iter_mut().zip(source.row(i)) {
            *dw += s * x;
        }
        for (ds, w) in d_source.row_mut(i).iter_mut().zip(source_w.w_i.data()) {
            *ds += s * w;
        }
    }
    Ok(SeparableGrads {
        d_target,
        d_source,
        d_w_i: Tensor::vector(d_w_i)?,
        d_w_k,
        d_w_v,
        d_w_o,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{finite_diff_grad, max_rel_error, DEFAULT_EPS};

    fn rand(shape: &[usize], rng: &mut SeededRng) -> Tensor {
        Tensor::uniform(shape, 1.0, rng)
    }

    #[test]
    fn config_validation() {
        let ok = MultiHeadConfig { heads: 2, model_dim: 8, tokens: 4 };
        assert!(ok.validate().unwrap().is_empty());
        let many = MultiHeadConfig { tokens: 9, ..ok };
        assert_eq!(many.validate().unwrap().len(), 1);
        let bad = MultiHeadConfig { heads: 3, ..ok };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn single_position_attention() {
        let mut rng = SeededRng::new(1);
        let cfg = MultiHeadConfig { heads: 2, model_dim: 4, tokens: 3 };
        let local = rand(&[1, 4], &mut rng);
        let tokens = rand(&[3, 4], &mut rng);
        let w_o = rand(&[4, 4], &mut rng);
        let expected = local.matmul(&w_o).unwrap();
        for s in 0..3 {
            let w_q = rand(&[2, 2, 2], &mut SeededRng::new(s));
            let (map, upd) = query_only_cross_attention(&local, &tokens, &cfg, &w_q, &w_o).unwrap();
            assert!(map.weights.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
            for r in 0..3 {
                assert!(upd.row(r).iter().zip(expected.row(0)).all(|(a, b)| (a - b).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn uniform_local_features_give_uniform_map() {
        let mut rng = SeededRng::new(2);
        let cfg = MultiHeadConfig { heads: 2, model_dim: 4, tokens: 2 };
        let row = rand(&[1, 4], &mut rng);
        let local = Tensor::from_rows(&vec![row.row(0).to_vec(); 5]).unwrap();
        let (map, _) = query_only_cross_attention(
            &local,
            &rand(&[2, 4], &mut rng),
            &cfg,
            &rand(&[2, 2, 2], &mut rng),
            &rand(&[4, 4], &mut rng),
        )
        .unwrap();
        assert!(map.weights.data().iter().all(|&v| (v - 0.2).abs() < 1e-12));
        map.check().unwrap();
    }

    #[test]
    fn bad_head_split_is_config_error() {
        let cfg = MultiHeadConfig { heads: 3, model_dim: 4, tokens: 2 };
        let r = query_only_cross_attention(
            &Tensor::zeros(&[2, 4]),
            &Tensor::zeros(&[2, 4]),
            &cfg,
            &Tensor::zeros(&[3, 1, 1]),
            &Tensor::zeros(&[4, 4]),
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn map_selection_and_mean() {
        let mut rng = SeededRng::new(3);
        let local = rand(&[4, 3], &mut rng);
        let onehot = AttentionMap::new(
            Tensor::from_rows(&[vec![0.0, 0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0, 0.0]]).unwrap(),
        )
        .unwrap();
        let m = map_global_to_graph(&onehot, &local).unwrap();
        assert_eq!(m.row(0), local.row(2));
        assert_eq!(m.row(1), local.row(0));

        let uniform = AttentionMap::new(Tensor::full(&[2, 4], 0.25)).unwrap();
        let m = map_global_to_graph(&uniform, &local).unwrap();
        let mean = local.mean_rows().unwrap();
        assert!(m.row(1).iter().zip(mean.data()).all(|(a, b)| (a - b).abs() < 1e-12));

        assert!(map_global_to_graph(&uniform, &rand(&[3, 3], &mut rng)).is_err());
    }

    #[test]
    fn map_rows_stay_in_convex_hull() {
        for seed in 0..20 {
            let mut rng = SeededRng::new(seed);
            let local = rand(&[6, 4], &mut rng);
            let attn = AttentionMap::new(softmax_rows(&Tensor::uniform(&[3, 6], 3.0, &mut rng)).unwrap()).unwrap();
            let m = map_global_to_graph(&attn, &local).unwrap();
            for j in 0..4 {
                let col: Vec<f64> = (0..6).map(|p| local.at(p, j)).collect();
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                for i in 0..3 {
                    assert!(m.at(i, j) >= lo - 1e-12 && m.at(i, j) <= hi + 1e-12);
                }
            }
        }
    }

    fn cross_weights(d: usize, rng: &mut SeededRng) -> CrossHandWeights {
        CrossHandWeights {
            left: HandProjections::random(d, rng),
            right: HandProjections::random(d, rng),
        }
    }

    #[test]
    fn cross_hand_symmetry_and_single_vertex() {
        let mut rng = SeededRng::new(4);
        let hand = rand(&[5, 4], &mut rng);
        let p = HandProjections::random(4, &mut rng);
        let w = CrossHandWeights { left: p.clone(), right: p };
        let f = cross_hand_attention(&hand, &hand, &w, AttentionNorm::SqrtD).unwrap();
        assert_eq!(f.left_to_right, f.right_to_left);

        let w = cross_weights(4, &mut rng);
        let l = rand(&[1, 4], &mut rng);
        let r = rand(&[1, 4], &mut rng);
        let f = cross_hand_attention(&l, &r, &w, AttentionNorm::SqrtD).unwrap();
        assert!(f.right_to_left.max_abs_diff(&r.matmul(&w.right.w_v).unwrap()) < 1e-12);
        assert!(f.left_to_right.max_abs_diff(&l.matmul(&w.left.w_v).unwrap()) < 1e-12);

        let err = cross_hand_attention(&rand(&[3, 4], &mut rng), &rand(&[2, 4], &mut rng), &w, AttentionNorm::SqrtD)
            .unwrap_err();
        assert!(err.to_string().contains("level mismatch"));
    }

    #[test]
    fn cross_hand_is_invariant_to_source_permutation() {
        let mut rng = SeededRng::new(5);
        let w = cross_weights(6, &mut rng);
        let l = rand(&[5, 6], &mut rng);
        let r = rand(&[5, 6], &mut rng);
        let perm = rng.permutation(5);
        let r_perm = Tensor::from_rows(&perm.iter().map(|&i| r.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let (a, _) = directed_attention(&l, &r, &w.left.w_q, &w.right.w_k, &w.right.w_v, AttentionNorm::SqrtD).unwrap();
        let (b, _) =
            directed_attention(&l, &r_perm, &w.left.w_q, &w.right.w_k, &w.right.w_v, AttentionNorm::SqrtD).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn merge_cases() {
        let mut rng = SeededRng::new(6);
        let own = rand(&[4, 3], &mut rng);
        assert_eq!(merge_cross_features(&own, &Tensor::zeros(&[4, 3]), &IdentityMap).unwrap(), own);
        let z = merge_cross_features(&own, &own.scale(-1.0), &IdentityMap).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(merge_cross_features(&own, &Tensor::zeros(&[3, 3]), &IdentityMap).is_err());
    }

    #[test]
    fn merge_is_row_equivariant() {
        let mut rng = SeededRng::new(7);
        let mlp = PointwiseMlp::random(4, Activation::Silu, &mut rng);
        let own = rand(&[6, 4], &mut rng);
        let inc = rand(&[6, 4], &mut rng);
        let perm = rng.permutation(6);
        let permute = |t: &Tensor| Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let out = merge_cross_features(&own, &inc, &mlp).unwrap();
        let out_p = merge_cross_features(&permute(&own), &permute(&inc), &mlp).unwrap();
        assert!(permute(&out).max_abs_diff(&out_p) < 1e-12);
    }

    #[test]
    fn separable_single_and_identical_tokens() {
        let mut rng = SeededRng::new(8);
        let w = SeparableWeights::random(5, Activation::Silu, &mut rng);
        let x = rand(&[1, 5], &mut rng);
        let (_, t) = separable_self_attention(&x, &w).unwrap();
        assert_eq!(t.context_scores.data(), &[1.0]);
        assert!(t.context_vector.max_abs_diff(&x.matmul(&w.w_k).unwrap().reshape(&[5]).unwrap()) < 1e-15);

        let rows = Tensor::from_rows(&vec![x.row(0).to_vec(); 4]).unwrap();
        let (_, t) = separable_self_attention(&rows, &w).unwrap();
        let key = x.matmul(&w.w_k).unwrap().reshape(&[5]).unwrap();
        assert!(t.context_vector.max_abs_diff(&key) < 1e-12);
    }

    #[test]
    fn separable_rejects_bad_weights() {
        let mut rng = SeededRng::new(9);
        let w = SeparableWeights::random(4, Activation::Silu, &mut rng);
        assert!(separable_self_attention(&rand(&[3, 5], &mut rng), &w).is_err());
    }

    // Gradient checks: every weight and input of every operator against
    // central differences, 10 seeds each.

    fn check(analytic: &Tensor, numeric: &Tensor, what: &str) {
        let e = max_rel_error(analytic, numeric);
        assert!(e < 1e-4, "{what}: rel err {e:e}");
    }

    #[test]
    fn query_attention_gradients() {
        for seed in 0..10 {
            let mut rng = SeededRng::new(300 + seed);
            let (p, c, m, d, h) = (5, 4, 3, 6, 2);
            let local = rand(&[p, c], &mut rng);
            let tokens = rand(&[m, d], &mut rng);
            let w_q = rand(&[h, d / h, c / h], &mut rng);
            let w_o = rand(&[c, d], &mut rng);
            let g_out = rand(&[m, d], &mut rng);
            let g_map = rand(&[m, p], &mut rng);
            let obj = |l: &Tensor, z: &Tensor, q: &Tensor, o: &Tensor| -> Result<f64> {
                let t = query_attention_forward(l, z, h, q, Some(o))?;
                Ok(t.out.unwrap().dot(&g_out)? + t.map.weights.dot(&g_map)?)
            };
            let trace = query_attention_forward(&local, &tokens, h, &w_q, Some(&w_o)).unwrap();
            let g = query_attention_backward(&trace, &local, &tokens, &w_q, Some(&w_o), Some(&g_out), Some(&g_map)).unwrap();
            check(&g.d_local, &finite_diff_grad(|t| obj(t, &tokens, &w_q, &w_o), &local, DEFAULT_EPS).unwrap(), "local");
            check(&g.d_tokens, &finite_diff_grad(|t| obj(&local, t, &w_q, &w_o), &tokens, DEFAULT_EPS).unwrap(), "tokens");
            check(&g.d_w_q, &finite_diff_grad(|t| obj(&local, &tokens, t, &w_o), &w_q, DEFAULT_EPS).unwrap(), "w_q");
            check(
                g.d_w_o.as_ref().unwrap(),
                &finite_diff_grad(|t| obj(&local, &tokens, &w_q, t), &w_o, DEFAULT_EPS).unwrap(),
                "w_o",
            );
        }
    }

    #[test]
    fn map_global_to_graph_gradients() {
        for seed in 0..10 {
            let mut rng = SeededRng::new(400 + seed);
            let a = AttentionMap::new(rand(&[3, 5], &mut rng)).unwrap();
            let local = rand(&[5, 4], &mut rng);
            let g = rand(&[3, 4], &mut rng);
            let (da, dl) = map_global_to_graph_backward(&a, &local, &g).unwrap();
            let na = finite_diff_grad(
                |t| map_global_to_graph(&AttentionMap::new(t.clone())?, &local)?.dot(&g),
                &a.weights,
                DEFAULT_EPS,
            )
            .unwrap();
            let nl = finite_diff_grad(|t| map_global_to_graph(&a, t)?.dot(&g), &local, DEFAULT_EPS).unwrap();
            check(&da, &na, "attn");
            check(&dl, &nl, "local");
        }
    }

    #[test]
    fn cross_hand_gradients() {
        for seed in 0..10 {
            let mut rng = SeededRng::new(500 + seed);
            let d = 4;
            let l = rand(&[3, d], &mut rng);
            let r = rand(&[3, d], &mut rng);
            let w = cross_weights(d, &mut rng);
            let g = CrossHandFeatures {
                left_to_right: rand(&[3, d], &mut rng),
                right_to_left: rand(&[3, d], &mut rng),
            };
            let obj = |l: &Tensor, r: &Tensor, w: &CrossHandWeights| -> Result<f64> {
                let f = cross_hand_attention(l, r, w, AttentionNorm::SqrtD)?;
                Ok(f.left_to_right.dot(&g.left_to_right)? + f.right_to_left.dot(&g.right_to_left)?)
            };
            let (_, trace) = cross_hand_attention_traced(&l, &r, &w, AttentionNorm::SqrtD).unwrap();
            let (dl, dr, dw) = cross_hand_attention_backward(&trace, &l, &r, &w, &g).unwrap();
            check(&dl, &finite_diff_grad(|t| obj(t, &r, &w), &l, DEFAULT_EPS).unwrap(), "left");
            check(&dr, &finite_diff_grad(|t| obj(&l, t, &w), &r, DEFAULT_EPS).unwrap(), "right");
            type Pick = fn(&mut CrossHandWeights) -> &mut Tensor;
            let picks: [(&str, Pick, &Tensor); 6] = [
                ("left.w_q", |w| &mut w.left.w_q, &dw.left.w_q),
                ("left.w_k", |w| &mut w.left.w_k, &dw.left.w_k),
                ("left.w_v", |w| &mut w.left.w_v, &dw.left.w_v),
                ("right.w_q", |w| &mut w.right.w_q, &dw.right.w_q),
                ("right.w_k", |w| &mut w.right.w_k, &dw.right.w_k),
                ("right.w_v", |w| &mut w.right.w_v, &dw.right.w_v),
            ];
            for (name, pick, analytic) in picks {
                let mut base = w.clone();
                let x0 = pick(&mut base).clone();
                let numeric = finite_diff_grad(
                    |t| {
                        let mut ww = w.clone();
                        *pick(&mut ww) = t.clone();
                        obj(&l, &r, &ww)
                    },
                    &x0,
                    DEFAULT_EPS,
                )
                .unwrap();
                check(analytic, &numeric, name);
            }
        }
    }

    #[test]
    fn mlp_gradients() {
        for seed in 0..10 {
            let mut rng = SeededRng::new(600 + seed);
            let mut mlp = PointwiseMlp::random(3, Activation::Silu, &mut rng);
            mlp.b1 = rand(&[6], &mut rng);
            mlp.b2 = rand(&[3], &mut rng);
            let x = rand(&[4, 3], &mut rng);
            let g = rand(&[4, 3], &mut rng);
            let (_, trace) = mlp.forward_traced(&x).unwrap();
            let (dx, dw) = mlp.backward(&trace, &x, &g).unwrap();
            check(&dx, &finite_diff_grad(|t| mlp.apply(t)?.dot(&g), &x, DEFAULT_EPS).unwrap(), "x");
            type Pick = fn(&mut PointwiseMlp) -> &mut Tensor;
            let picks: [(Pick, &Tensor); 4] =
                [(|m| &mut m.w1, &dw.w1), (|m| &mut m.b1, &dw.b1), (|m| &mut m.w2, &dw.w2), (|m| &mut m.b2, &dw.b2)];
            for (pick, analytic) in picks {
                let x0 = pick(&mut mlp.clone()).clone();
                let numeric = finite_diff_grad(
                    |t| {
                        let mut m = mlp.clone();
                        *pick(&mut m) = t.clone();
                        m.apply(&x)?.dot(&g)
                    },
                    &x0,
                    DEFAULT_EPS,
                )
                .unwrap();
                check(analytic, &numeric, "mlp weight");
            }
        }
    }

    #[test]
    fn separable_gradients() {
        for seed in 0..10 {
            let mut rng = SeededRng::new(700 + seed);
            let d = 4;
            let tgt = rand(&[3, d], &mut rng);
            let src = rand(&[5, d], &mut rng);
            let sw = SeparableWeights::random(d, Activation::Silu, &mut rng);
            let tw = SeparableWeights::random(d, Activation::Silu, &mut rng);
            let g = rand(&[3, d], &mut rng);
            let obj = |t: &Tensor, s: &Tensor, sw: &SeparableWeights, tw: &SeparableWeights| -> Result<f64> {
                separable_cross_attention(t, s, sw, tw)?.0.dot(&g)
            };
            let (_, trace) = separable_cross_attention(&tgt, &src, &sw, &tw).unwrap();
            let gr = separable_cross_attention_backward(&trace, &tgt, &src, &sw, &tw, &g).unwrap();
            check(&gr.d_target, &finite_diff_grad(|t| obj(t, &src, &sw, &tw), &tgt, DEFAULT_EPS).unwrap(), "target");
            check(&gr.d_source, &finite_diff_grad(|t| obj(&tgt, t, &sw, &tw), &src, DEFAULT_EPS).unwrap(), "source");
            let n_wi = finite_diff_grad(
                |t| obj(&tgt, &src, &SeparableWeights { w_i: t.clone(), ..sw.clone() }, &tw),
                &sw.w_i,
                DEFAULT_EPS,
            )
            .unwrap();
            let n_wk = finite_diff_grad(
                |t| obj(&tgt, &src, &SeparableWeights { w_k: t.clone(), ..sw.clone() }, &tw),
                &sw.w_k,
                DEFAULT_EPS,
            )
            .unwrap();
            let n_wv = finite_diff_grad(
                |t| obj(&tgt, &src, &sw, &SeparableWeights { w_v: t.clone(), ..tw.clone() }),
                &tw.w_v,
                DEFAULT_EPS,
            )
            .unwrap();
            let n_wo = finite_diff_grad(
                |t| obj(&tgt, &src, &sw, &SeparableWeights { w_o: t.clone(), ..tw.clone() }),
                &tw.w_o,
                DEFAULT_EPS,
            )
            .unwrap();
            check(&gr.d_w_i, &n_wi, "w_i");
            check(&gr.d_w_k, &n_wk, "w_k");
            check(&gr.d_w_v, &n_wv, "w_v");
            check(&gr.d_w_o, &n_wo, "w_o");
        }
    }
}
