//! Full pipeline: encoder → three bridge/decoder levels → full-mesh heads.

use serde::Serialize;

use crate::bridge::{bridge_backward, bridge_forward_traced, BridgeLevel, BridgeTrace};
use crate::config::{ModelConfig, TokenSource, TopologySource};
use crate::encoder::{encoder_backward, encoder_forward_traced, init_encoder, EncoderStack, EncoderTrace, TokenSet};
use crate::error::{Error, Result};
use crate::lwat::Bundle;
use crate::mesh::{
    gcn_block_backward, gcn_block_traced, load_topology, synthesize_topology, upsample_level, upsample_level_backward,
    upsample_to_full_backward, upsample_to_full_traced, FullMeshHead, GcnTrace, Hand, HandMesh, HandVertexFeatures,
    HeadTrace, SubmeshHierarchy, FULL_MESH_VERTICES, LEVEL_VERTEX_COUNTS,
};
use crate::param::{join, ParamStore, ParamTree};
use crate::rng::SeededRng;
use crate::synthetic::template_mesh;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub stacks: Vec<EncoderStack>,
    /// Initial global tokens `M × d`.
    pub tokens: Tensor,
    pub bridges: Vec<BridgeLevel>,
    /// Learned level-0 vertex embeddings, `N_0 × d` per hand.
    pub left_init: Tensor,
    pub right_init: Tensor,
    /// GCN weights per level, shared by both hands.
    pub gcn: Vec<Vec<Tensor>>,
    pub left_head: FullMeshHead,
    pub right_head: FullMeshHead,
}

impl ParamTree for ModelWeights {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.stacks.for_each(&join(prefix, "encoder.stacks"), f);
        f(join(prefix, "encoder.tokens"), &self.tokens);
        self.bridges.for_each(&join(prefix, "bridge"), f);
        f(join(prefix, "decoder.left_init"), &self.left_init);
        f(join(prefix, "decoder.right_init"), &self.right_init);
        self.gcn.for_each(&join(prefix, "decoder.gcn"), f);
        self.left_head.for_each(&join(prefix, "head.left"), f);
        self.right_head.for_each(&join(prefix, "head.right"), f);
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.stacks.for_each_mut(&join(prefix, "encoder.stacks"), f);
        f(join(prefix, "encoder.tokens"), &mut self.tokens);
        self.bridges.for_each_mut(&join(prefix, "bridge"), f);
        f(join(prefix, "decoder.left_init"), &mut self.left_init);
        f(join(prefix, "decoder.right_init"), &mut self.right_init);
        self.gcn.for_each_mut(&join(prefix, "decoder.gcn"), f);
        self.left_head.for_each_mut(&join(prefix, "head.left"), f);
        self.right_head.for_each_mut(&join(prefix, "head.right"), f);
    }
}

impl ModelWeights {
    pub fn init(cfg: &ModelConfig, topology: &SubmeshHierarchy, seed: u64) -> Result<Self> {
        let mut rng = SeededRng::new(seed);
        let enc = &cfg.encoder;
        let d = enc.dim;
        let (stacks, tokens) = init_encoder(enc, &mut rng.fork())?;
        let pyramid = enc.pyramid_shapes()?;
        let mut brng = rng.fork();
        let bridges = (0..3)
            .map(|t| {
                BridgeLevel::random(
                    t,
                    pyramid[t].0,
                    d,
                    cfg.bridge.heads,
                    cfg.bridge.attention_norm,
                    cfg.bridge.is_separable(t),
                    cfg.bridge.value_activation,
                    cfg.bridge.mlp_activation,
                    &mut brng,
                )
            })
            .collect();
        let b = 1.0 / (d as f64).sqrt();
        let mut drng = rng.fork();
        let n0 = topology.level(0)?.n;
        let left_init = Tensor::uniform(&[n0, d], b, &mut drng);
        let right_init = Tensor::uniform(&[n0, d], b, &mut drng);
        let gcn = cfg
            .decoder
            .gcn_depth
            .iter()
            .map(|&k| (0..k).map(|_| Tensor::uniform(&[d, d], b, &mut drng)).collect())
            .collect();
        let top = topology.level(topology.levels.len() - 1)?;
        // the bias starts at the mean shape, so the network predicts offsets
        let template = mean_shape(topology.full_n)?;
        let head = |rng: &mut SeededRng, bias: Tensor| FullMeshHead {
            feat: Tensor::uniform(&[d, 3], b, rng),
            upsample: top.upsample.clone(),
            bias,
        };
        let left_head = head(&mut drng, template.clone());
        let right_head = head(&mut drng, mirror_x(&template));
        Ok(Self {
            stacks,
            tokens,
            bridges,
            left_init,
            right_init,
            gcn,
            left_head,
            right_head,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut("", &mut |_, t| *t = Tensor::zeros(t.shape()));
        z
    }

    pub fn to_bundle(&self) -> Bundle {
        self.to_store("").to_bundle()
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.for_each("", &mut |n, _| out.push(n));
        out
    }

    pub fn get(&self, name: &str) -> Option<Tensor> {
        let mut found = None;
        self.for_each("", &mut |n, t| {
            if n == name {
                found = Some(t.clone());
            }
        });
        found
    }

    pub fn set(&mut self, name: &str, value: &Tensor) -> Result<()> {
        let mut hit = Ok(false);
        self.for_each_mut("", &mut |n, t| {
            if n == name {
                hit = if t.shape() == value.shape() {
                    *t = value.clone();
                    Ok(true)
                } else {
                    Err(Error::shape("set_parameter", t.shape(), value.shape()))
                };
            }
        });
        match hit? {
            true => Ok(()),
            false => Err(Error::Config(format!("missing parameter {name:?}"))),
        }
    }

    /// `self += alpha · other` over every tensor.
    pub fn axpy(&mut self, alpha: f64, other: &ModelWeights) -> Result<()> {
        let mut vals = Vec::new();
        other.for_each("", &mut |_, t| vals.push(t.clone()));
        let mut it = vals.into_iter();
        let mut res = Ok(());
        self.for_each_mut("", &mut |_, t| {
            if let Some(o) = it.next() {
                if res.is_ok() {
                    res = t.axpy(alpha, &o);
                }
            }
        });
        res
    }

    pub fn dot(&self, other: &ModelWeights) -> Result<f64> {
        let mut vals = Vec::new();
        other.for_each("", &mut |_, t| vals.push(t.clone()));
        let mut it = vals.into_iter();
        let mut s = 0.0;
        let mut res = Ok(());
        self.for_each("", &mut |_, t| {
            if let Some(o) = it.next() {
                match t.dot(&o) {
                    Ok(v) => s += v,
                    Err(e) => res = Err(e),
                }
            }
        });
        res.map(|_| s)
    }

    /// First tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<String> {
        let mut bad = None;
        self.for_each("", &mut |n, t| {
            if bad.is_none() && !t.is_finite() {
                bad = Some(n);
            }
        });
        bad
    }

    pub fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.for_each("", &mut |_, t| n += t.len());
        n
    }
}

/// Template mesh for a `full_n`-vertex topology, zeros for sizes other than
/// the built-in template's.
fn mean_shape(full_n: usize) -> Result<Tensor> {
    let t = template_mesh();
    Ok(if t.shape()[0] == full_n { t } else { Tensor::zeros(&[full_n, 3]) })
}

/// Reflection through the `x = 0` plane, turning a left hand into a right one.
pub fn mirror_x(v: &Tensor) -> Tensor {
    let mut out = v.clone();
    for r in 0..out.shape()[0] {
        out.row_mut(r)[0] = -out.row(r)[0];
    }
    out
}

pub fn load_configured_topology(cfg: &ModelConfig) -> Result<SubmeshHierarchy> {
    match cfg.topology_source()? {
        TopologySource::Synthetic(seed) => Ok(synthesize_topology(seed)),
        TopologySource::File(path) => load_topology(&path),
    }
}

/// Configuration, topology and weights, checked against each other.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub topology: SubmeshHierarchy,
    pub weights: ModelWeights,
}

/// Per-level record written into forward summaries.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelDiagnostics {
    pub level: usize,
    pub vertices: usize,
    pub feature_map: Vec<usize>,
    pub attention_max_row_sum_deviation: f64,
    pub cross_attention: &'static str,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub left: HandMesh,
    pub right: HandMesh,
    pub levels: Vec<LevelDiagnostics>,
}

impl PipelineOutput {
    /// Vertex counts visited by the decoder, ending with the full mesh.
    pub fn vertex_path(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.levels.iter().map(|l| l.vertices).collect();
        v.push(self.left.vertices.shape()[0]);
        v
    }
}

#[derive(Debug, Clone)]
struct LevelTrace {
    bridge: BridgeTrace,
    /// `(left, right)` per GCN block.
    gcn: Vec<(GcnTrace, GcnTrace)>,
}

#[derive(Debug, Clone)]
pub struct PipelineTrace {
    encoder: EncoderTrace,
    levels: Vec<LevelTrace>,
    top_left: Tensor,
    top_right: Tensor,
    head_left: HeadTrace,
    head_right: HeadTrace,
    tokens_shape: Vec<usize>,
}

impl Model {
    pub fn new(config: ModelConfig, topology: SubmeshHierarchy, weights: ModelWeights) -> Result<Self> {
        let m = Self {
            config,
            topology,
            weights,
        };
        m.check()?;
        Ok(m)
    }

    pub fn init(config: ModelConfig, topology: SubmeshHierarchy, seed: u64) -> Result<Self> {
        config.validate()?;
        let weights = ModelWeights::init(&config, &topology, seed)?;
        Self::new(config, topology, weights)
    }

    pub fn from_config(config: ModelConfig, seed: u64) -> Result<Self> {
        let topology = load_configured_topology(&config)?;
        Self::init(config, topology, seed)
    }

    /// Validates config, topology counts and every weight shape.
    pub fn check(&self) -> Result<()> {
        self.config.validate()?;
        self.topology.check_counts(&LEVEL_VERTEX_COUNTS, FULL_MESH_VERTICES)?;
        let expected = ModelWeights::init(&self.config, &self.topology, 0)?;
        let mut shapes = Vec::new();
        expected.for_each("", &mut |n, t| shapes.push((n, t.shape().to_vec())));
        let mut found = Vec::new();
        self.weights.for_each("", &mut |n, t| found.push((n, t.shape().to_vec())));
        if shapes.len() != found.len() {
            return Err(Error::Config(format!(
                "weights hold {} tensors, config expects {}",
                found.len(),
                shapes.len()
            )));
        }
        for ((en, es), (fname, fs)) in shapes.iter().zip(&found) {
            if en != fname {
                return Err(Error::Config(format!("weights: expected parameter {en:?}, found {fname:?}")));
            }
            if es != fs {
                return Err(Error::Config(format!(
                    "weights: parameter {en:?} has shape {fs:?}, config expects {es:?}"
                )));
            }
        }
        Ok(())
    }

    /// Loads weights from a bundle, rejecting missing, extra or misshapen entries.
    pub fn load_weights(&mut self, bundle: &Bundle) -> Result<()> {
        let mut store = ParamStore::new();
        for (k, v) in bundle {
            store.insert(k.clone(), v.clone(), true)?;
        }
        self.weights.load_store("", &store)
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let enc = &self.config.encoder;
        let want = [enc.input_channels, enc.image_size, enc.image_size];
        if image.shape() != want {
            return Err(Error::shape("pipeline image", image.shape(), &want));
        }
        Ok(())
    }

    pub fn forward_traced(&self, image: &Tensor) -> Result<(PipelineOutput, PipelineTrace)> {
        self.check_image(image)?;
        let w = &self.weights;
        let act = self.config.decoder.activation;
        let (pyramid, enc_trace) =
            encoder_forward_traced(image, &w.stacks, &TokenSet::new(w.tokens.clone()), &self.config.encoder.taps)?;
        let mut left = HandVertexFeatures::new(Hand::Left, 0, w.left_init.clone());
        let mut right = HandVertexFeatures::new(Hand::Right, 0, w.right_init.clone());
        let mut levels = Vec::with_capacity(3);
        let mut diags = Vec::with_capacity(3);
        for t in 0..3 {
            let lvl = self.topology.level(t)?;
            if left.features.shape()[0] != lvl.n {
                return Err(Error::Config(format!(
                    "level {t}: decoder carries {} vertices, topology has {}",
                    left.features.shape()[0],
                    lvl.n
                )));
            }
            let tokens = match self.config.bridge.token_source {
                TokenSource::TapSnapshot => &pyramid.level_tokens[t],
                TokenSource::Final => &pyramid.tokens.z,
            };
            let (out, btrace) =
                bridge_forward_traced(&pyramid.levels[t], tokens, &left.features, &right.features, &w.bridges[t])?;
            diags.push(LevelDiagnostics {
                level: t,
                vertices: lvl.n,
                feature_map: pyramid.levels[t].shape().to_vec(),
                attention_max_row_sum_deviation: out.attention.max_row_sum_deviation(),
                cross_attention: if self.config.bridge.is_separable(t) { "separable" } else { "dense" },
            });
            left = HandVertexFeatures::new(Hand::Left, t, out.left);
            right = HandVertexFeatures::new(Hand::Right, t, out.right);
            let mut gcn = Vec::new();
            for wt in &w.gcn[t] {
                let (l, tl) = gcn_block_traced(&left, &lvl.adjacency, wt, act).map_err(|e| e.at_level(t))?;
                let (r, tr) = gcn_block_traced(&right, &lvl.adjacency, wt, act).map_err(|e| e.at_level(t))?;
                left = l;
                right = r;
                gcn.push((tl, tr));
            }
            if t < 2 {
                left = upsample_level(&left, &self.topology)?;
                right = upsample_level(&right, &self.topology)?;
            }
            levels.push(LevelTrace { bridge: btrace, gcn });
        }
        let (lm, head_left) = upsample_to_full_traced(&left, &self.topology, &w.left_head)?;
        let (rm, head_right) = upsample_to_full_traced(&right, &self.topology, &w.right_head)?;
        Ok((
            PipelineOutput {
                left: lm,
                right: rm,
                levels: diags,
            },
            PipelineTrace {
                encoder: enc_trace,
                levels,
                top_left: left.features,
                top_right: right.features,
                head_left,
                head_right,
                tokens_shape: w.tokens.shape().to_vec(),
            },
        ))
    }

    pub fn forward(&self, image: &Tensor) -> Result<PipelineOutput> {
        Ok(self.forward_traced(image)?.0)
    }

    /// Gradients of a scalar whose derivatives w.r.t. the two output meshes
    /// are `d_left` and `d_right`. Returns weight gradients and the image
    /// gradient.
    pub fn backward(&self, trace: &PipelineTrace, d_left: &Tensor, d_right: &Tensor) -> Result<(ModelWeights, Tensor)> {
        let w = &self.weights;
        let act = self.config.decoder.activation;
        let mut g = w.zeros_like();
        let (mut dl, gh) = upsample_to_full_backward(&trace.head_left, &trace.top_left, &w.left_head, d_left)?;
        g.left_head = gh;
        let (mut dr, gh) = upsample_to_full_backward(&trace.head_right, &trace.top_right, &w.right_head, d_right)?;
        g.right_head = gh;

        let mut d_levels = vec![Tensor::zeros(&[1]); 3];
        let mut d_level_tokens = vec![Tensor::zeros(&trace.tokens_shape); 3];
        for t in (0..3).rev() {
            let lvl = self.topology.level(t)?;
            if t < 2 {
                dl = upsample_level_backward(lvl, &dl)?;
                dr = upsample_level_backward(lvl, &dr)?;
            }
            let lt = &trace.levels[t];
            for (k, (tl, tr)) in lt.gcn.iter().enumerate().rev() {
                let wt = &w.gcn[t][k];
                let (dxl, dwl) = gcn_block_backward(tl, &lvl.adjacency, wt, act, &dl)?;
                let (dxr, dwr) = gcn_block_backward(tr, &lvl.adjacency, wt, act, &dr)?;
                g.gcn[t][k] = dwl.add(&dwr)?;
                dl = dxl;
                dr = dxr;
            }
            let bg = bridge_backward(&lt.bridge, &w.bridges[t], &dl, &dr).map_err(|e| e.at_level(t))?;
            g.bridges[t] = bg.weights;
            d_levels[t] = bg.d_y;
            d_level_tokens[t] = bg.d_tokens;
            dl = bg.d_left;
            dr = bg.d_right;
        }
        g.left_init = dl;
        g.right_init = dr;

        let eg = match self.config.bridge.token_source {
            TokenSource::TapSnapshot => encoder_backward(&trace.encoder, &w.stacks, &d_levels, &d_level_tokens, None)?,
            TokenSource::Final => {
                let mut total = Tensor::zeros(&trace.tokens_shape);
                for d in &d_level_tokens {
                    total.add_assign(d)?;
                }
                encoder_backward(&trace.encoder, &w.stacks, &d_levels, &[], Some(&total))?
            }
        };
        g.stacks = eg.stacks;
        g.tokens = eg.d_tokens;
        Ok((g, eg.d_image))
    }
}

/// Image → `(left, right)` meshes.
pub fn pipeline_forward(image: &Tensor, model: &Model) -> Result<(HandMesh, HandMesh)> {
    let out = model.forward(image)?;
    Ok((out.left, out.right))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::CrossHandWeights;
    use crate::bridge::CrossWeights;

    fn toy(seed: u64) -> Model {
        Model::from_config(ModelConfig::toy(), seed).unwrap()
    }

    fn image(model: &Model, seed: u64) -> Tensor {
        let s = model.config.encoder.image_size;
        Tensor::uniform(&[3, s, s], 0.5, &mut SeededRng::new(seed)).map(|v| v + 0.5)
    }

    #[test]
    fn shape_law_and_determinism() {
        let m = toy(0);
        let img = image(&m, 1);
        let a = m.forward(&img).unwrap();
        assert_eq!(a.vertex_path(), [63, 126, 252, 778]);
        assert_eq!(a.left.vertices.shape(), [778, 3]);
        assert_eq!(a.right.vertices.shape(), [778, 3]);
        assert!(a.levels.iter().all(|l| l.attention_max_row_sum_deviation < 1e-6));
        assert_eq!(a, m.forward(&img).unwrap());
    }

    #[test]
    fn zero_weights_give_the_bias() {
        let mut m = toy(0);
        m.weights = m.weights.zeros_like();
        let mut rng = SeededRng::new(4);
        m.weights.left_head.bias = Tensor::uniform(&[778, 3], 0.1, &mut rng);
        m.weights.right_head.bias = Tensor::uniform(&[778, 3], 0.1, &mut rng);
        let (l, r) = pipeline_forward(&image(&m, 2), &m).unwrap();
        assert_eq!(l.vertices, m.weights.left_head.bias);
        assert_eq!(r.vertices, m.weights.right_head.bias);
    }

    #[test]
    fn one_pixel_changes_the_default_model() {
        let m = Model::from_config(ModelConfig::default(), 0).unwrap();
        let img = Tensor::full(&[3, 256, 256], 0.5);
        let a = m.forward(&img).unwrap();
        let mut img2 = img.clone();
        img2.data_mut()[128 * 256 + 128] = 1.0;
        let b = m.forward(&img2).unwrap();
        assert_eq!(a.vertex_path(), [63, 126, 252, 778]);
        assert!(a.left.vertices.max_abs_diff(&b.left.vertices) > 0.0 || a.right.vertices.max_abs_diff(&b.right.vertices) > 0.0);
    }

    #[test]
    fn mismatched_weights_rejected_before_compute() {
        let m = toy(0);
        let mut w = m.weights.clone();
        w.gcn[0].pop();
        assert!(Model::new(m.config.clone(), m.topology.clone(), w).is_err());
        let mut w = m.weights.clone();
        w.left_init = Tensor::zeros(&[62, 8]);
        let e = Model::new(m.config.clone(), m.topology.clone(), w).unwrap_err();
        assert!(e.to_string().contains("decoder.left_init"), "{e}");
    }

    #[test]
    fn weights_bundle_round_trip() {
        let a = toy(0);
        let mut b = toy(1);
        assert_ne!(a.weights, b.weights);
        b.load_weights(&a.weights.to_bundle()).unwrap();
        assert_eq!(a.weights, b.weights);
        let mut bundle = a.weights.to_bundle();
        bundle.remove("encoder.tokens");
        assert!(b.load_weights(&bundle).unwrap_err().to_string().contains("encoder.tokens"));
    }

    #[test]
    fn swapping_initial_streams_swaps_meshes_with_shared_weights() {
        let mut m = toy(3);
        let w = &mut m.weights;
        for b in &mut w.bridges {
            match &mut b.cross {
                CrossWeights::Dense(CrossHandWeights { left, right }) => *right = left.clone(),
                CrossWeights::Separable { left, right } => *right = left.clone(),
            }
        }
        w.right_head = w.left_head.clone();
        let img = image(&m, 5);
        let a = m.forward(&img).unwrap();
        std::mem::swap(&mut m.weights.left_init, &mut m.weights.right_init);
        let b = m.forward(&img).unwrap();
        assert!(a.left.vertices.max_abs_diff(&b.right.vertices) < 1e-12);
        assert!(a.right.vertices.max_abs_diff(&b.left.vertices) < 1e-12);
    }

    /// Directional derivative of `⟨probe, meshes⟩` along a random direction in
    /// weight space, finite differences vs the analytic chain.
    fn jvp_rel_error(m: &Model, seed: u64) -> f64 {
        let mut rng = SeededRng::new(seed);
        let img = image(m, seed);
        let pl = Tensor::uniform(&[778, 3], 1.0, &mut rng);
        let pr = Tensor::uniform(&[778, 3], 1.0, &mut rng);
        let (_, trace) = m.forward_traced(&img).unwrap();
        let (g, _) = m.backward(&trace, &pl, &pr).unwrap();
        let mut dir = m.weights.clone();
        dir.for_each_mut("", &mut |_, t| *t = Tensor::uniform(t.shape(), 1.0, &mut rng));
        let analytic = g.dot(&dir).unwrap();
        let eps = 1e-6;
        let f = |s: f64| {
            let mut mm = m.clone();
            mm.weights.axpy(s, &dir).unwrap();
            let o = mm.forward(&img).unwrap();
            o.left.vertices.dot(&pl).unwrap() + o.right.vertices.dot(&pr).unwrap()
        };
        let fd = (f(eps) - f(-eps)) / (2.0 * eps);
        (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6)
    }

    #[test]
    fn pipeline_jvp_matches_finite_differences() {
        for seed in 0..3 {
            let e = jvp_rel_error(&toy(seed), seed);
            assert!(e < 1e-3, "seed {seed}: {e}");
        }
        let mut cfg = ModelConfig::toy();
        cfg.bridge.token_source = TokenSource::Final;
        cfg.bridge.cross_attention = crate::config::CrossAttentionMode::Separable;
        let m = Model::from_config(cfg, 9).unwrap();
        assert!(jvp_rel_error(&m, 9) < 1e-3);
    }

    #[test]
    fn image_gradient_matches_finite_differences() {
        let m = toy(2);
        let img = image(&m, 2);
        let mut rng = SeededRng::new(77);
        let pl = Tensor::uniform(&[778, 3], 1.0, &mut rng);
        let pr = Tensor::uniform(&[778, 3], 1.0, &mut rng);
        let (_, trace) = m.forward_traced(&img).unwrap();
        let (_, d_img) = m.backward(&trace, &pl, &pr).unwrap();
        for idx in [0usize, 100, 400, 767] {
            let fd = crate::grad::finite_diff_at(
                |x| {
                    let o = m.forward(x)?;
                    Ok(o.left.vertices.dot(&pl)? + o.right.vertices.dot(&pr)?)
                },
                &img,
                idx,
                1e-5,
            )
            .unwrap();
            assert!(crate::grad::rel_error(d_img.data()[idx], fd) < 1e-4);
        }
    }
}
