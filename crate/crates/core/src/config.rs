//! JSON model configuration.
//!
//! Every section has defaults, unknown keys are rejected, and serializing a
//! parsed config echoes every field fully resolved.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionNorm, MultiHeadConfig};
use crate::error::{Error, Result};
use crate::flops::ExtraOp;
use crate::metrics::EvalProtocol;
use crate::ops::Activation;

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub format_version: u32,
    pub encoder: EncoderConfig,
    pub bridge: BridgeConfig,
    pub decoder: DecoderConfig,
    /// Path to a topology file, or `synthetic:<seed>`.
    pub topology: String,
    pub loss_weights: LossWeights,
    pub eval: EvalProtocol,
    pub optimizer: OptimizerConfig,
    pub flops: FlopsConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            format_version: CONFIG_FORMAT_VERSION,
            encoder: EncoderConfig::default(),
            bridge: BridgeConfig::default(),
            decoder: DecoderConfig::default(),
            topology: "synthetic:0".into(),
            loss_weights: LossWeights::default(),
            eval: EvalProtocol::default(),
            optimizer: OptimizerConfig::default(),
            flops: FlopsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackConfig {
    pub out_channels: usize,
    pub stride: usize,
    pub expansion: usize,
}

impl StackConfig {
    pub const fn new(out_channels: usize, stride: usize, expansion: usize) -> Self {
        Self {
            out_channels,
            stride,
            expansion,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub input_channels: usize,
    /// Global token count `M`.
    pub tokens: usize,
    /// Token and vertex feature width `d`.
    pub dim: usize,
    pub heads: usize,
    pub kernel: usize,
    pub activation: Activation,
    pub stacks: Vec<StackConfig>,
    /// 1-based stack numbers whose outputs feed the bridges. The last tap is
    /// the coarsest map and becomes level 0.
    pub taps: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            input_channels: 3,
            tokens: 6,
            dim: 96,
            heads: 2,
            kernel: 3,
            activation: Activation::Hardswish,
            stacks: vec![
                StackConfig::new(16, 2, 1),
                StackConfig::new(16, 1, 1),
                StackConfig::new(32, 2, 2),
                StackConfig::new(32, 1, 1),
                StackConfig::new(64, 2, 2),
                StackConfig::new(64, 1, 1),
                StackConfig::new(96, 2, 2),
                StackConfig::new(96, 1, 1),
                StackConfig::new(96, 1, 1),
            ],
            taps: vec![3, 6, 9],
        }
    }
}

impl EncoderConfig {
    pub fn head_config(&self) -> MultiHeadConfig {
        MultiHeadConfig {
            heads: self.heads,
            model_dim: self.dim,
            tokens: self.tokens,
        }
    }

    /// `(in_channels, out_channels, size_in, size_out)` per stack.
    pub fn stack_shapes(&self) -> Result<Vec<(usize, usize, usize, usize)>> {
        let mut out = Vec::with_capacity(self.stacks.len());
        let mut c = self.input_channels;
        let mut size = self.image_size;
        for (i, s) in self.stacks.iter().enumerate() {
            if s.stride == 0 || s.stride > 2 {
                return Err(Error::Config(format!("encoder.stacks[{i}].stride must be 1 or 2, got {}", s.stride)));
            }
            if size % s.stride != 0 {
                return Err(Error::Config(format!(
                    "encoder.stacks[{i}]: non-integral stride arithmetic ({size} / {})",
                    s.stride
                )));
            }
            let next = size / s.stride;
            out.push((c, s.out_channels, size, next));
            c = s.out_channels;
            size = next;
        }
        Ok(out)
    }

    /// `(channels, side)` for pyramid levels 0..3 (coarse → fine).
    pub fn pyramid_shapes(&self) -> Result<Vec<(usize, usize)>> {
        let shapes = self.stack_shapes()?;
        Ok(self
            .taps
            .iter()
            .rev()
            .map(|&t| (shapes[t - 1].1, shapes[t - 1].3))
            .collect())
    }

    fn validate(&self, warnings: &mut Vec<String>) -> Result<()> {
        warnings.extend(self.head_config().validate()?);
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("encoder.kernel must be odd, got {}", self.kernel)));
        }
        if self.input_channels == 0 || self.image_size == 0 || self.stacks.is_empty() {
            return Err(Error::Config("encoder needs a positive image size, channels and at least one stack".into()));
        }
        for (i, s) in self.stacks.iter().enumerate() {
            if s.expansion == 0 || s.out_channels == 0 {
                return Err(Error::Config(format!("encoder.stacks[{i}]: channels and expansion must be positive")));
            }
            if s.out_channels % self.heads != 0 {
                return Err(Error::Config(format!(
                    "encoder.stacks[{i}].out_channels {} not divisible by heads {}",
                    s.out_channels, self.heads
                )));
            }
        }
        let shapes = self.stack_shapes()?;
        if self.taps.len() != 3 {
            return Err(Error::Config(format!("encoder.taps must name exactly 3 stacks, got {}", self.taps.len())));
        }
        for w in self.taps.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Config("encoder.taps must be strictly increasing".into()));
            }
        }
        if self.taps[0] == 0 || *self.taps.last().unwrap() > shapes.len() {
            return Err(Error::Config(format!("encoder.taps must lie in 1..={}", shapes.len())));
        }
        let sides: Vec<usize> = self.pyramid_shapes()?.iter().map(|s| s.1).collect();
        if !sides.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(format!(
                "pyramid resolutions must strictly increase from level 0 to 2, got sides {sides:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CrossAttentionMode {
    /// Dense everywhere except `separable_levels`.
    #[default]
    Auto,
    Dense,
    Separable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ValueCombine {
    /// Elementwise product with the context vector, then a linear projection.
    #[default]
    MultiplyProject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TokenSource {
    /// Each bridge reads the token snapshot taken at its tap stack.
    #[default]
    TapSnapshot,
    /// Every bridge reads the final encoder tokens.
    Final,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BridgeConfig {
    pub heads: usize,
    pub attention_norm: AttentionNorm,
    pub cross_attention: CrossAttentionMode,
    pub separable_levels: Vec<usize>,
    pub value_combine: ValueCombine,
    pub value_activation: Activation,
    pub mlp_activation: Activation,
    pub token_source: TokenSource,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self {
            heads: 2,
            attention_norm: AttentionNorm::SqrtD,
            cross_attention: CrossAttentionMode::Auto,
            separable_levels: vec![2],
            value_combine: ValueCombine::MultiplyProject,
            value_activation: Activation::Silu,
            mlp_activation: Activation::Silu,
            token_source: TokenSource::TapSnapshot,
        }
    }
}

impl BridgeConfig {
    pub fn is_separable(&self, level: usize) -> bool {
        match self.cross_attention {
            CrossAttentionMode::Dense => false,
            CrossAttentionMode::Separable => true,
            CrossAttentionMode::Auto => self.separable_levels.contains(&level),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// GCN blocks per level, shared by both hands.
    pub gcn_depth: Vec<usize>,
    pub activation: Activation,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            gcn_depth: vec![2, 2, 2],
            activation: Activation::Silu,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub vertex: f64,
    pub joint: f64,
    pub smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            vertex: 1.0,
            joint: 1.0,
            smooth: 0.1,
        }
    }
}

/// Reference schedule of the full-scale Adam training, recorded for
/// provenance only; desk-scale fitting uses SGD with momentum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamReference {
    pub initial_lr: f64,
    pub decayed_lr: f64,
    pub decay_epoch: usize,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for AdamReference {
    fn default() -> Self {
        Self {
            initial_lr: 1e-4,
            decayed_lr: 1e-5,
            decay_epoch: 50,
            epochs: 120,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub steps: usize,
    pub adam_reference: AdamReference,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            momentum: 0.9,
            steps: 500,
            adam_reference: AdamReference::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FlopsConvention {
    /// One multiply–add counts as two flops.
    #[default]
    MultiplyAddIsTwo,
}

impl FlopsConvention {
    pub fn describe(self) -> &'static str {
        match self {
            FlopsConvention::MultiplyAddIsTwo => {
                "1 multiply-add = 2 flops; softmax = 5 flops/element; silu/hardswish = 4 flops/element; add/mean/mul = 1 flop/element"
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct FlopsConfig {
    pub convention: FlopsConvention,
    /// Additional cost line items, e.g. auxiliary decoder heads.
    pub extra_ops: Vec<ExtraOp>,
}

impl ModelConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Config(format!("{}: {j}", path.display())),
            other => other,
        })
    }

    /// Fully resolved JSON echo.
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Small configuration for gradient checks and desk-scale fitting.
    pub fn toy() -> Self {
        Self {
            encoder: EncoderConfig {
                image_size: 16,
                input_channels: 3,
                tokens: 2,
                dim: 8,
                heads: 2,
                kernel: 3,
                activation: Activation::Silu,
                stacks: vec![
                    StackConfig::new(4, 1, 1),
                    StackConfig::new(8, 2, 2),
                    StackConfig::new(8, 1, 1),
                    StackConfig::new(8, 2, 2),
                    StackConfig::new(8, 1, 1),
                    StackConfig::new(8, 2, 1),
                ],
                taps: vec![2, 4, 6],
            },
            decoder: DecoderConfig {
                gcn_depth: vec![1, 1, 1],
                activation: Activation::Silu,
            },
            optimizer: OptimizerConfig {
                lr: 3e-4,
                momentum: 0.9,
                steps: 500,
                adam_reference: AdamReference::default(),
            },
            ..Self::default()
        }
    }

    /// Returns soft warnings; hard violations are errors.
    pub fn validate(&self) -> Result<Vec<String>> {
        if self.format_version != CONFIG_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "format_version {} unsupported (expected {CONFIG_FORMAT_VERSION})",
                self.format_version
            )));
        }
        let mut warnings = Vec::new();
        self.encoder.validate(&mut warnings)?;
        if self.bridge.heads == 0 || self.encoder.dim % self.bridge.heads != 0 {
            return Err(Error::Config(format!(
                "bridge.heads {} must divide encoder.dim {}",
                self.bridge.heads, self.encoder.dim
            )));
        }
        if self.bridge.separable_levels.iter().any(|&l| l > 2) {
            return Err(Error::Config("bridge.separable_levels entries must be 0, 1 or 2".into()));
        }
        if self.decoder.gcn_depth.len() != 3 {
            return Err(Error::Config(format!(
                "decoder.gcn_depth needs one entry per level (3), got {}",
                self.decoder.gcn_depth.len()
            )));
        }
        let w = self.loss_weights;
        if [w.vertex, w.joint, w.smooth].iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("loss_weights must be finite and non-negative".into()));
        }
        self.eval.validate()?;
        let o = self.optimizer;
        if !o.lr.is_finite() || o.lr < 0.0 || !(0.0..1.0).contains(&o.momentum) {
            return Err(Error::Config("optimizer.lr must be ≥ 0 and momentum in [0, 1)".into()));
        }
        self.topology_source()?;
        Ok(warnings)
    }

    pub fn topology_source(&self) -> Result<TopologySource> {
        match self.topology.strip_prefix("synthetic:") {
            Some(seed) => seed
                .parse()
                .map(TopologySource::Synthetic)
                .map_err(|_| Error::Config(format!("topology: bad synthetic seed {seed:?}"))),
            None if self.topology.is_empty() => Err(Error::Config("topology must not be empty".into())),
            None => Ok(TopologySource::File(self.topology.clone().into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TopologySource {
    Synthetic(u64),
    File(std::path::PathBuf),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        assert!(ModelConfig::default().validate().unwrap().is_empty());
        ModelConfig::toy().validate().unwrap();
        let p = ModelConfig::default().encoder.pyramid_shapes().unwrap();
        assert_eq!(p, vec![(96, 16), (64, 32), (32, 64)]);
    }

    #[test]
    fn round_trip_is_a_fixed_point() {
        for cfg in [ModelConfig::default(), ModelConfig::toy()] {
            let once = cfg.to_json_pretty();
            let parsed = ModelConfig::from_json(&once).unwrap();
            assert_eq!(parsed, cfg);
            assert_eq!(parsed.to_json_pretty(), once);
        }
        // empty object resolves to the defaults
        let parsed = ModelConfig::from_json("{}").unwrap();
        assert_eq!(parsed, ModelConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ModelConfig::from_json(r#"{"encoder": {"dims": 3}}"#).is_err());
        assert!(ModelConfig::from_json(r#"{"mystery": 1}"#).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let mut c = ModelConfig::default();
        c.encoder.image_size = 250;
        assert!(c.validate().unwrap_err().to_string().contains("non-integral"));

        let mut c = ModelConfig::default();
        c.encoder.taps = vec![8, 9, 7];
        assert!(c.validate().is_err());

        let mut c = ModelConfig::default();
        c.encoder.taps = vec![4, 8, 9];
        assert!(c.validate().unwrap_err().to_string().contains("strictly increase"));

        let mut c = ModelConfig::default();
        c.encoder.dim = 95;
        assert!(c.validate().is_err());

        let mut c = ModelConfig::default();
        c.topology = "synthetic:x".into();
        assert!(c.validate().is_err());

        let mut c = ModelConfig::default();
        c.encoder.tokens = 8;
        assert_eq!(c.validate().unwrap().len(), 1);
    }
}
