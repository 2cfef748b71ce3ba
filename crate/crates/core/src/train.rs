//! Combined two-hand objective, a momentum SGD loop and the per-parameter
//! gradient check.

use serde::Serialize;

use crate::config::LossWeights;
use crate::error::{Error, Result};
use crate::grad::{rel_error, DEFAULT_EPS};
use crate::metrics::{combined_loss_delta, combined_loss_grad, HandTarget, JointRegressor, LossBreakdown};
use crate::model::{Model, ModelWeights};
use crate::param::ParamTree;
use crate::rng::SeededRng;
use crate::synthetic::Sample;
use crate::tensor::Tensor;

/// Everything the objective needs besides the model.
#[derive(Debug, Clone)]
pub struct Objective<'a> {
    pub regressor: &'a JointRegressor,
    pub weights: LossWeights,
}

fn add_breakdown(a: LossBreakdown, b: LossBreakdown) -> LossBreakdown {
    LossBreakdown {
        vertex: a.vertex + b.vertex,
        joint: a.joint + b.joint,
        smooth: a.smooth + b.smooth,
        total: a.total + b.total,
    }
}

impl Objective<'_> {
    /// Loss summed over both hands, and its weight gradient.
    pub fn loss_and_grad(&self, model: &Model, image: &Tensor, left: &HandTarget, right: &HandTarget) -> Result<(LossBreakdown, ModelWeights)> {
        let edges = model.topology.full_edges()?;
        let (out, trace) = model.forward_traced(image)?;
        let (bl, gl) = combined_loss_grad(&out.left.vertices, left, self.regressor, edges, &self.weights)?;
        let (br, gr) = combined_loss_grad(&out.right.vertices, right, self.regressor, edges, &self.weights)?;
        let (g, _) = model.backward(&trace, &gl, &gr)?;
        Ok((add_breakdown(bl, br), g))
    }

    pub fn loss(&self, model: &Model, image: &Tensor, left: &HandTarget, right: &HandTarget) -> Result<LossBreakdown> {
        let edges = model.topology.full_edges()?;
        let out = model.forward(image)?;
        let (bl, _) = combined_loss_grad(&out.left.vertices, left, self.regressor, edges, &self.weights)?;
        let (br, _) = combined_loss_grad(&out.right.vertices, right, self.regressor, edges, &self.weights)?;
        Ok(add_breakdown(bl, br))
    }

    /// `loss(plus) − loss(minus)` for one hand, see [`combined_loss_delta`].
    pub fn delta(&self, plus: &Tensor, minus: &Tensor, target: &HandTarget, edges: &[(usize, usize)]) -> Result<f64> {
        combined_loss_delta(plus, minus, target, self.regressor, edges, &self.weights)
    }

    /// Mean over samples.
    pub fn batch(&self, model: &Model, data: &[Sample]) -> Result<(LossBreakdown, ModelWeights)> {
        let mut total = LossBreakdown::default();
        let mut grad = model.weights.zeros_like();
        let inv = 1.0 / data.len() as f64;
        for s in data {
            let (b, g) = self.loss_and_grad(model, &s.image, &s.left, &s.right)?;
            total = add_breakdown(total, b);
            grad.axpy(inv, &g)?;
        }
        Ok((
            LossBreakdown {
                vertex: total.vertex * inv,
                joint: total.joint * inv,
                smooth: total.smooth * inv,
                total: total.total * inv,
            },
            grad,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SgdSettings {
    pub lr: f64,
    pub momentum: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitTrace {
    pub settings: SgdSettings,
    pub samples: usize,
    /// Combined loss before each step, then once more after the last one.
    pub losses: Vec<f64>,
    pub initial: LossBreakdown,
    pub last: LossBreakdown,
}

impl FitTrace {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("trace holds at least the initial loss")
    }

    /// `final / initial`.
    pub fn ratio(&self) -> f64 {
        self.final_loss() / self.initial_loss()
    }
}

/// Full-batch gradient descent with heavy-ball momentum. Aborts with the step
/// index on the first non-finite loss or weight.
pub fn sgd_fit(model: &mut Model, data: &[Sample], objective: &Objective, settings: SgdSettings) -> Result<FitTrace> {
    if data.is_empty() {
        return Err(Error::Config("sgd_fit needs at least one sample".into()));
    }
    if !(settings.lr >= 0.0) || !(0.0..1.0).contains(&settings.momentum) {
        return Err(Error::Config(format!(
            "sgd: lr must be >= 0 and momentum in [0, 1), got {} and {}",
            settings.lr, settings.momentum
        )));
    }
    let mut velocity = model.weights.zeros_like();
    let mut losses = Vec::with_capacity(settings.steps + 1);
    let mut initial = None;
    for step in 0..settings.steps {
        let (b, g) = objective.batch(model, data)?;
        if !b.total.is_finite() {
            return Err(Error::Diverged {
                step,
                what: format!("combined loss is {}", b.total),
            });
        }
        initial.get_or_insert(b);
        losses.push(b.total);
        velocity.for_each_mut("", &mut |_, v| *v = v.scale(settings.momentum));
        velocity.axpy(1.0, &g)?;
        model.weights.axpy(-settings.lr, &velocity)?;
        if let Some(name) = model.weights.first_non_finite() {
            return Err(Error::Diverged {
                step,
                what: format!("parameter {name} became non-finite"),
            });
        }
    }
    let mut last = LossBreakdown::default();
    for s in data {
        last = add_breakdown(last, objective.loss(model, &s.image, &s.left, &s.right)?);
    }
    let n = data.len() as f64;
    let last = LossBreakdown {
        vertex: last.vertex / n,
        joint: last.joint / n,
        smooth: last.smooth / n,
        total: last.total / n,
    };
    if !last.total.is_finite() {
        return Err(Error::Diverged {
            step: settings.steps,
            what: format!("combined loss is {}", last.total),
        });
    }
    losses.push(last.total);
    Ok(FitTrace {
        settings,
        samples: data.len(),
        losses,
        initial: initial.unwrap_or(last),
        last,
    })
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Entries probed per parameter tensor (all of them if the tensor is
    /// smaller).
    pub entries_per_group: usize,
    pub eps: f64,
    pub tolerance: f64,
    /// Fault injection: perturbs the analytic gradient of this group.
    pub corrupt_group: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            entries_per_group: 3,
            eps: DEFAULT_EPS,
            tolerance: GRADCHECK_TOLERANCE,
            corrupt_group: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupCheck {
    pub name: String,
    pub shape: Vec<usize>,
    pub entries: Vec<usize>,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub eps: f64,
    pub tolerance: f64,
    pub loss: LossBreakdown,
    pub groups: Vec<GroupCheck>,
    pub pass: bool,
}

impl GradcheckReport {
    pub fn failing(&self) -> Vec<&str> {
        self.groups.iter().filter(|g| !g.pass).map(|g| g.name.as_str()).collect()
    }

    pub fn to_table(&self) -> String {
        let w = self.groups.iter().map(|g| g.name.len()).max().unwrap_or(5).max(5);
        let mut s = format!("{:<w$}  {:>12}  {:>12}  result\n", "group", "max_rel", "max_abs");
        for g in &self.groups {
            s.push_str(&format!(
                "{:<w$}  {:>12.3e}  {:>12.3e}  {}\n",
                g.name,
                g.max_rel_error,
                g.max_abs_error,
                if g.pass { "pass" } else { "FAIL" }
            ));
        }
        s.push_str(&format!(
            "{} groups, {} failing, tolerance {:e}\n",
            self.groups.len(),
            self.failing().len(),
            self.tolerance
        ));
        s
    }
}

/// Targets offset from the current prediction so every L1 residual sits
/// well away from its kink.
fn offset_targets(model: &Model, image: &Tensor, j: &JointRegressor, rng: &mut SeededRng) -> Result<(HandTarget, HandTarget)> {
    let out = model.forward(image)?;
    let mut target = |pred: &Tensor| -> Result<HandTarget> {
        let noise = Tensor::uniform(pred.shape(), 0.002, rng);
        let vertices = pred.map(|v| v + 0.01).add(&noise)?;
        let joints = j.regress(&vertices)?.map(|v| v + 0.01);
        Ok(HandTarget { vertices, joints })
    };
    Ok((target(&out.left.vertices)?, target(&out.right.vertices)?))
}

/// Compares the analytic gradient of the combined loss with central finite
/// differences on sampled entries of every parameter tensor.
pub fn gradcheck(model: &Model, objective: &Objective, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = SeededRng::new(opts.seed);
    let s = model.config.encoder.image_size;
    let image = Tensor::uniform(&[3, s, s], 0.5, &mut rng).map(|v| v + 0.5);
    let (left, right) = offset_targets(model, &image, objective.regressor, &mut rng)?;
    let (loss, grads) = objective.loss_and_grad(model, &image, &left, &right)?;
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    if let Some(c) = &opts.corrupt_group {
        if grads.get(c).is_none() {
            return Err(Error::Config(format!("corrupt_group: no parameter named {c:?}")));
        }
    }
    let edges = model.topology.full_edges()?;
    let mut analytic = Vec::new();
    grads.for_each("", &mut |n, t| analytic.push((n, t.clone())));

    let mut groups = Vec::with_capacity(analytic.len());
    for (name, g) in analytic {
        let mut g = g;
        if opts.corrupt_group.as_deref() == Some(name.as_str()) {
            g = g.map(|v| 1.5 * v + 1e-3);
        }
        let n = g.len();
        let entries: Vec<usize> = if n <= opts.entries_per_group {
            (0..n).collect()
        } else {
            let mut idx: Vec<usize> = rng.permutation(n).into_iter().take(opts.entries_per_group).collect();
            idx.sort_unstable();
            idx
        };
        let base = model.weights.get(&name).expect("gradient names mirror weight names");
        let mut probe = model.clone();
        let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
        for &i in &entries {
            let mut eval = |delta: f64| -> Result<(Tensor, Tensor)> {
                let mut t = base.clone();
                t.data_mut()[i] += delta;
                probe.weights.set(&name, &t)?;
                let out = probe.forward(&image)?;
                Ok((out.left.vertices, out.right.vertices))
            };
            let (lp, rp) = eval(opts.eps)?;
            let (lm, rm) = eval(-opts.eps)?;
            let diff = objective.delta(&lp, &lm, &left, edges)? + objective.delta(&rp, &rm, &right, edges)?;
            if !diff.is_finite() {
                return Err(Error::NonFinite(format!("loss while probing {name}[{i}]")));
            }
            let fd = diff / (2.0 * opts.eps);
            let a = g.data()[i];
            max_rel = max_rel.max(rel_error(a, fd));
            max_abs = max_abs.max((a - fd).abs());
        }
        groups.push(GroupCheck {
            pass: max_rel < opts.tolerance,
            shape: g.shape().to_vec(),
            name,
            entries,
            max_rel_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    Ok(GradcheckReport {
        seed: opts.seed,
        eps: opts.eps,
        tolerance: opts.tolerance,
        loss,
        pass: groups.iter().all(|g| g.pass),
        groups,
    })
}
