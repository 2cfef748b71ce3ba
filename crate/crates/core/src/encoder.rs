//! Mobile local/global encoder: depthwise + pointwise stacks fused with a
//! small set of global tokens, emitting a three-level feature pyramid.

use crate::attention::{query_attention_backward, query_attention_forward, QueryAttentionTrace};
use crate::config::{EncoderConfig, StackConfig};
use crate::error::{Error, Result};
use crate::ops::{
    chw_to_pixels, depthwise_conv2d, depthwise_conv2d_backward, pixels_to_chw, pointwise_conv2d,
    pointwise_conv2d_backward, Activation,
};
use crate::param_tree;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const OPERATORS: &[&str] = &[
    "expand_pointwise",
    "depthwise_conv2d",
    "token_fusion",
    "pointwise_conv2d",
    "activation",
    "token_update",
    "token_mean",
];

/// One encoder stack's weights. `expand` is present when the expansion ratio
/// is above one.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStack {
    pub index: usize,
    pub stride: usize,
    pub heads: usize,
    pub activation: Activation,
    /// `eC × C`
    pub expand: Option<Tensor>,
    /// `eC × K × K`
    pub depthwise: Tensor,
    /// `eC × (eC + d)`: projects `[features | token mean]` back to `eC` channels.
    pub fusion: Tensor,
    /// `C' × eC`
    pub pointwise: Tensor,
    /// `heads × d/h × C'/h`
    pub w_q: Tensor,
    /// `C' × d`
    pub w_o: Tensor,
}

param_tree!(EncoderStack { depthwise, fusion, pointwise, w_q, w_o } opt { expand });

fn bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

impl EncoderStack {
    #[allow(clippy::too_many_arguments)]
    pub fn random(
        index: usize,
        in_channels: usize,
        cfg: &StackConfig,
        dim: usize,
        heads: usize,
        kernel: usize,
        activation: Activation,
        rng: &mut SeededRng,
    ) -> Self {
        let ec = in_channels * cfg.expansion;
        let co = cfg.out_channels;
        Self {
            index,
            stride: cfg.stride,
            heads,
            activation,
            expand: (cfg.expansion > 1).then(|| Tensor::uniform(&[ec, in_channels], bound(in_channels), rng)),
            depthwise: Tensor::uniform(&[ec, kernel, kernel], bound(kernel * kernel), rng),
            fusion: Tensor::uniform(&[ec, ec + dim], bound(ec + dim), rng),
            pointwise: Tensor::uniform(&[co, ec], bound(ec), rng),
            w_q: Tensor::uniform(&[heads, dim / heads, co / heads], bound(dim / heads), rng),
            w_o: Tensor::uniform(&[co, dim], bound(co), rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            expand: self.expand.as_ref().map(|t| Tensor::zeros(t.shape())),
            depthwise: Tensor::zeros(self.depthwise.shape()),
            fusion: Tensor::zeros(self.fusion.shape()),
            pointwise: Tensor::zeros(self.pointwise.shape()),
            w_q: Tensor::zeros(self.w_q.shape()),
            w_o: Tensor::zeros(self.w_o.shape()),
            ..self.clone()
        }
    }

    pub fn kernel(&self) -> usize {
        self.depthwise.shape()[1]
    }

    pub fn in_channels(&self) -> usize {
        match &self.expand {
            Some(e) => e.shape()[1],
            None => self.depthwise.shape()[0],
        }
    }

    pub fn expanded_channels(&self) -> usize {
        self.depthwise.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.pointwise.shape()[0]
    }

    /// Checks every weight shape against an input of `c` channels and token
    /// width `d`.
    pub fn check(&self, c: usize, d: usize) -> Result<()> {
        let ec = self.expanded_channels();
        let co = self.out_channels();
        let k = self.kernel();
        let h = self.heads;
        if self.stride == 0 || self.stride > 2 {
            return Err(Error::Config(format!("stack {}: stride must be 1 or 2", self.index)));
        }
        if h == 0 || d % h != 0 || co % h != 0 {
            return Err(Error::Config(format!(
                "stack {}: heads {h} must divide token dim {d} and channels {co}",
                self.index
            )));
        }
        let expect = |name: &'static str, t: &Tensor, shape: &[usize]| {
            if t.shape() == shape {
                Ok(())
            } else {
                Err(Error::shape(name, t.shape(), shape))
            }
        };
        match &self.expand {
            Some(e) => expect("encoder.expand", e, &[ec, c])?,
            None if ec != c => return Err(Error::shape("encoder.depthwise", self.depthwise.shape(), &[c, k, k])),
            None => {}
        }
        expect("encoder.depthwise", &self.depthwise, &[ec, k, k])?;
        expect("encoder.fusion", &self.fusion, &[ec, ec + d])?;
        expect("encoder.pointwise", &self.pointwise, &[co, ec])?;
        expect("encoder.w_q", &self.w_q, &[h, d / h, co / h])?;
        expect("encoder.w_o", &self.w_o, &[co, d])?;
        Ok(())
    }
}

/// Global tokens plus the snapshot taken after every stack.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    pub z: Tensor,
    pub snapshots: Vec<Tensor>,
}

impl TokenSet {
    pub fn new(z: Tensor) -> Self {
        Self { z, snapshots: Vec::new() }
    }

    /// Uniform in `[−1/√d, 1/√d]`.
    pub fn random(m: usize, d: usize, rng: &mut SeededRng) -> Self {
        Self::new(Tensor::uniform(&[m, d], bound(d), rng))
    }

    fn advance(&self, z: Tensor) -> Self {
        let mut snapshots = self.snapshots.clone();
        snapshots.push(z.clone());
        Self { z, snapshots }
    }
}

/// Feature maps ordered coarse → fine plus the pooled global vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    /// `Y_t`, `C_t × H_t × W_t`, with `H_t·W_t` strictly increasing in `t`.
    pub levels: Vec<Tensor>,
    /// Token state at the stack that produced each level.
    pub level_tokens: Vec<Tensor>,
    /// `F_G`, mean of the final tokens.
    pub global: Tensor,
    pub tokens: TokenSet,
}

#[derive(Debug, Clone)]
pub struct BlockTrace {
    input: Tensor,
    tokens_in: Tensor,
    expand_pre: Option<Tensor>,
    expanded: Tensor,
    /// Depthwise output.
    pub depthwise: Tensor,
    token_mean: Tensor,
    /// `F_{X^0}`: fused features before the pointwise step.
    pub fused: Tensor,
    pw_pre: Tensor,
    local: Tensor,
    attn: QueryAttentionTrace,
}

impl BlockTrace {
    pub fn attention(&self) -> &QueryAttentionTrace {
        &self.attn
    }
}

fn padding(stack: &EncoderStack) -> usize {
    stack.kernel() / 2
}

/// Splits the fusion projection into its feature and token halves.
fn fusion_parts(stack: &EncoderStack) -> Result<(Tensor, Tensor)> {
    let ec = stack.expanded_channels();
    let (_, cols) = stack.fusion.dims2()?;
    Ok((stack.fusion.slice_cols(0, ec)?, stack.fusion.slice_cols(ec, cols)?))
}

fn add_channel_bias(x: &mut Tensor, bias: &[f64]) {
    let hw = x.len() / bias.len();
    for (chunk, b) in x.data_mut().chunks_mut(hw).zip(bias) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_sums(x: &Tensor, c: usize) -> Vec<f64> {
    let hw = x.len() / c;
    x.data().chunks(hw).map(|ch| ch.iter().sum()).collect()
}

pub fn mobile_block_traced(x: &Tensor, z: &Tensor, stack: &EncoderStack) -> Result<(Tensor, Tensor, BlockTrace)> {
    let (c, h, w) = x.dims3()?;
    let (m, d) = z.dims2()?;
    stack.check(c, d)?;
    if h % stack.stride != 0 || w % stack.stride != 0 {
        return Err(Error::Config(format!(
            "stack {}: non-integral stride arithmetic ({h}×{w} / {})",
            stack.index, stack.stride
        )));
    }
    let (expand_pre, expanded) = match &stack.expand {
        Some(e) => {
            let pre = pointwise_conv2d(x, e)?;
            let act = stack.activation.forward(&pre);
            (Some(pre), act)
        }
        None => (None, x.clone()),
    };
    let dw = depthwise_conv2d(&expanded, &stack.depthwise, stack.stride, padding(stack))?;
    let (_, ho, wo) = dw.dims3()?;

    let token_mean = z.mean_rows()?;
    let (fx, fz) = fusion_parts(stack)?;
    let mut fused = pointwise_conv2d(&dw, &fx)?;
    let bias = fz.matmul(&token_mean.clone().reshape(&[d, 1])?)?;
    add_channel_bias(&mut fused, bias.data());

    let pw_pre = pointwise_conv2d(&fused, &stack.pointwise)?;
    let out = stack.activation.forward(&pw_pre);
    let local = chw_to_pixels(&out)?;
    let attn = query_attention_forward(&local, z, stack.heads, &stack.w_q, Some(&stack.w_o))?;
    let z_next = z.add(attn.out.as_ref().expect("output projection given"))?;
    debug_assert_eq!(z_next.shape(), [m, d]);
    let _ = (ho, wo);
    Ok((
        out,
        z_next,
        BlockTrace {
            input: x.clone(),
            tokens_in: z.clone(),
            expand_pre,
            expanded,
            depthwise: dw,
            token_mean,
            fused,
            pw_pre,
            local,
            attn,
        },
    ))
}

/// One stack: optional expansion, depthwise, token fusion, pointwise, then a
/// residual token update by query-only attention over the new local features.
pub fn mobile_block_forward(x: &Tensor, tokens: &TokenSet, stack: &EncoderStack) -> Result<(Tensor, TokenSet)> {
    let (out, z, _) = mobile_block_traced(x, &tokens.z, stack)?;
    Ok((out, tokens.advance(z)))
}

/// Returns `(d_x, d_z, weight grads)`.
pub fn mobile_block_backward(
    trace: &BlockTrace,
    stack: &EncoderStack,
    d_out: &Tensor,
    d_z_next: &Tensor,
) -> Result<(Tensor, Tensor, EncoderStack)> {
    let (_, ho, wo) = trace.pw_pre.dims3()?;
    let (m, d) = trace.tokens_in.dims2()?;
    let ec = stack.expanded_channels();

    let g = query_attention_backward(
        &trace.attn,
        &trace.local,
        &trace.tokens_in,
        &stack.w_q,
        Some(&stack.w_o),
        Some(d_z_next),
        None,
    )?;
    let mut d_z = d_z_next.add(&g.d_tokens)?;
    let d_out = d_out.add(&pixels_to_chw(&g.d_local, ho, wo)?)?;

    let d_pw_pre = stack.activation.backward(&trace.pw_pre, &d_out)?;
    let (d_fused, d_pointwise) = pointwise_conv2d_backward(&trace.fused, &stack.pointwise, &d_pw_pre)?;

    let (fx, fz) = fusion_parts(stack)?;
    let (d_dw, d_fx) = pointwise_conv2d_backward(&trace.depthwise, &fx, &d_fused)?;
    let s = Tensor::new(vec![ec, 1], channel_sums(&d_fused, ec))?;
    let d_fz = s.matmul(&trace.token_mean.clone().reshape(&[1, d])?)?;
    let d_mean = fz.t_matmul(&s)?;
    for r in 0..m {
        for (dz, g) in d_z.row_mut(r).iter_mut().zip(d_mean.data()) {
            *dz += g / m as f64;
        }
    }
    let d_fusion = d_fx.concat_cols(&d_fz)?;

    let (d_expanded, d_depthwise) =
        depthwise_conv2d_backward(&trace.expanded, &stack.depthwise, stack.stride, padding(stack), &d_dw)?;
    let (d_x, d_expand) = match (&stack.expand, &trace.expand_pre) {
        (Some(e), Some(pre)) => {
            let d_pre = stack.activation.backward(pre, &d_expanded)?;
            let (dx, de) = pointwise_conv2d_backward(&trace.input, e, &d_pre)?;
            (dx, Some(de))
        }
        _ => (d_expanded, None),
    };
    Ok((
        d_x,
        d_z,
        EncoderStack {
            expand: d_expand,
            depthwise: d_depthwise,
            fusion: d_fusion,
            pointwise: d_pointwise,
            w_q: g.d_w_q,
            w_o: g.d_w_o.expect("output projection given"),
            ..stack.clone()
        },
    ))
}

/// Initializes the stacks and token set of an encoder config.
pub fn init_encoder(cfg: &EncoderConfig, rng: &mut SeededRng) -> Result<(Vec<EncoderStack>, Tensor)> {
    let shapes = cfg.stack_shapes()?;
    let stacks = cfg
        .stacks
        .iter()
        .zip(&shapes)
        .enumerate()
        .map(|(i, (s, &(c_in, ..)))| {
            EncoderStack::random(i, c_in, s, cfg.dim, cfg.heads, cfg.kernel, cfg.activation, rng)
        })
        .collect();
    let tokens = TokenSet::random(cfg.tokens, cfg.dim, rng).z;
    Ok((stacks, tokens))
}

#[derive(Debug, Clone)]
pub struct EncoderTrace {
    pub blocks: Vec<BlockTrace>,
    /// 0-based stack index feeding each pyramid level (coarse → fine).
    pub level_stacks: Vec<usize>,
}

fn level_stacks(taps: &[usize], n: usize) -> Result<Vec<usize>> {
    if taps.len() != 3 || taps.windows(2).any(|w| w[0] >= w[1]) || taps[0] == 0 || taps[2] > n {
        return Err(Error::Config(format!(
            "encoder taps {taps:?} must be 3 strictly increasing stack numbers in 1..={n}"
        )));
    }
    Ok(taps.iter().rev().map(|t| t - 1).collect())
}

pub fn encoder_forward_traced(
    image: &Tensor,
    stacks: &[EncoderStack],
    tokens: &TokenSet,
    taps: &[usize],
) -> Result<(FeaturePyramid, EncoderTrace)> {
    let levels_at = level_stacks(taps, stacks.len())?;
    let mut x = image.clone();
    let mut tokens = tokens.clone();
    let mut outputs = Vec::with_capacity(stacks.len());
    let mut blocks = Vec::with_capacity(stacks.len());
    for stack in stacks {
        let (out, z, trace) = mobile_block_traced(&x, &tokens.z, stack)?;
        tokens = tokens.advance(z);
        outputs.push(out.clone());
        blocks.push(trace);
        x = out;
    }
    let levels: Vec<Tensor> = levels_at.iter().map(|&i| outputs[i].clone()).collect();
    let sizes: Vec<usize> = levels.iter().map(|l| l.len() / l.shape()[0]).collect();
    if !sizes.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Config(format!(
            "pyramid resolutions must strictly increase from level 0 to 2, got {sizes:?} pixels"
        )));
    }
    let level_tokens = levels_at.iter().map(|&i| tokens.snapshots[i].clone()).collect();
    let global = tokens.z.mean_rows()?;
    Ok((
        FeaturePyramid {
            levels,
            level_tokens,
            global,
            tokens,
        },
        EncoderTrace {
            blocks,
            level_stacks: levels_at,
        },
    ))
}

/// Runs every stack, taps the outputs of the 1-based stack numbers in `taps`
/// (last tap = level 0) and pools the final tokens into `F_G`.
pub fn encoder_forward(image: &Tensor, stacks: &[EncoderStack], tokens: &TokenSet, taps: &[usize]) -> Result<FeaturePyramid> {
    Ok(encoder_forward_traced(image, stacks, tokens, taps)?.0)
}

#[derive(Debug, Clone)]
pub struct EncoderGrads {
    pub d_image: Tensor,
    pub d_tokens: Tensor,
    pub stacks: Vec<EncoderStack>,
}

/// Backward through the encoder given gradients on each pyramid level, each
/// level's token snapshot, and optionally `F_G`.
pub fn encoder_backward(
    trace: &EncoderTrace,
    stacks: &[EncoderStack],
    d_levels: &[Tensor],
    d_level_tokens: &[Tensor],
    d_global: Option<&Tensor>,
) -> Result<EncoderGrads> {
    let n = stacks.len();
    let last = &trace.blocks[n - 1];
    let (m, d) = last.tokens_in.dims2()?;
    let mut d_x = Tensor::zeros(last.pw_pre.shape());
    let mut d_z = Tensor::zeros(&[m, d]);
    if let Some(g) = d_global {
        for r in 0..m {
            for (dz, v) in d_z.row_mut(r).iter_mut().zip(g.data()) {
                *dz += v / m as f64;
            }
        }
    }
    let mut grads = vec![None; n];
    for i in (0..n).rev() {
        for (t, &s) in trace.level_stacks.iter().enumerate() {
            if s == i {
                if let Some(g) = d_levels.get(t) {
                    d_x.add_assign(g)?;
                }
                if let Some(g) = d_level_tokens.get(t) {
                    d_z.add_assign(g)?;
                }
            }
        }
        let (dx, dz, g) = mobile_block_backward(&trace.blocks[i], &stacks[i], &d_x, &d_z)?;
        d_x = dx;
        d_z = dz;
        grads[i] = Some(g);
    }
    Ok(EncoderGrads {
        d_image: d_x,
        d_tokens: d_z,
        stacks: grads.into_iter().map(|g| g.expect("every stack visited")).collect(),
    })
}
