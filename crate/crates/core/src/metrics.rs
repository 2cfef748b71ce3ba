//! Training losses and the MPJPE / MPVPE evaluation protocol.
//!
//! Meshes are stored in meters; losses and metrics are reported in
//! millimeters.

use serde::{Deserialize, Serialize};

use crate::config::LossWeights;
use crate::error::{Error, Result};
use crate::mesh::{HandMesh, TopologyError};
use crate::tensor::Tensor;

pub const NUM_JOINTS: usize = 21;
const MM: f64 = 1000.0;
const DEGENERATE_LENGTH: f64 = 1e-12;

/// Row-stochastic map from mesh vertices to joints.
#[derive(Debug, Clone, PartialEq)]
pub struct JointRegressor {
    j: Tensor,
}

impl JointRegressor {
    pub fn new(j: Tensor) -> Result<Self> {
        let (rows, _) = j.dims2()?;
        for r in 0..rows {
            let row = j.row(r);
            if row.iter().any(|&v| v < 0.0) {
                return Err(Error::InvalidShape {
                    shape: j.shape().to_vec(),
                    reason: format!("joint regressor row {r} has a negative weight"),
                });
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidShape {
                    shape: j.shape().to_vec(),
                    reason: format!("joint regressor row {r} sums to {s}, expected 1"),
                });
            }
        }
        Ok(Self { j })
    }

    /// Each joint averages the 4 template vertices nearest to an anchor
    /// vertex spread evenly over the mesh.
    pub fn synthetic(template: &Tensor) -> Result<Self> {
        let (n, _) = template.dims2()?;
        let mut j = Tensor::zeros(&[NUM_JOINTS, n]);
        for joint in 0..NUM_JOINTS {
            let anchor = ((joint * n) as f64 / NUM_JOINTS as f64).round() as usize % n;
            let a = template.row(anchor);
            let mut order: Vec<(f64, usize)> = (0..n)
                .map(|v| {
                    let d: f64 = template.row(v).iter().zip(a).map(|(x, y)| (x - y).powi(2)).sum();
                    (d, v)
                })
                .collect();
            order.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            for &(_, v) in order.iter().take(4) {
                j.set(joint, v, 0.25);
            }
        }
        Self::new(j)
    }

    pub fn matrix(&self) -> &Tensor {
        &self.j
    }

    pub fn regress(&self, vertices: &Tensor) -> Result<Tensor> {
        self.j.matmul(vertices)
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute coordinate error in mm, with its gradient w.r.t. `pred`.
pub fn vertex_loss_grad(pred: &Tensor, gt: &Tensor) -> Result<(f64, Tensor)> {
    check_same("vertex_loss", pred, gt)?;
    let n = pred.len() as f64;
    let diff = pred.sub(gt)?;
    let loss = MM * diff.data().iter().map(|v| v.abs()).sum::<f64>() / n;
    Ok((loss, diff.map(|v| MM * sign(v) / n)))
}

pub fn vertex_loss(pred: &HandMesh, gt: &HandMesh) -> Result<f64> {
    Ok(vertex_loss_grad(&pred.vertices, &gt.vertices)?.0)
}

/// Mean absolute error between regressed and target joints in mm.
pub fn joint_loss_grad(pred: &Tensor, gt_joints: &Tensor, j: &JointRegressor) -> Result<(f64, Tensor)> {
    let joints = j.regress(pred)?;
    check_same("joint_loss", &joints, gt_joints)?;
    let n = joints.len() as f64;
    let diff = joints.sub(gt_joints)?;
    let loss = MM * diff.data().iter().map(|v| v.abs()).sum::<f64>() / n;
    let d_joints = diff.map(|v| MM * sign(v) / n);
    Ok((loss, j.j.t_matmul(&d_joints)?))
}

pub fn joint_loss(pred: &HandMesh, gt_joints: &Tensor, j: &JointRegressor) -> Result<f64> {
    Ok(joint_loss_grad(&pred.vertices, gt_joints, j)?.0)
}

fn edge_vec(v: &Tensor, i: usize, j: usize) -> [f64; 3] {
    let (a, b) = (v.row(i), v.row(j));
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm3(e: [f64; 3]) -> f64 {
    (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt()
}

/// Edge-length preservation: `mean_e (|e_pred| − |e_template|)²` with
/// lengths in mm.
pub fn smooth_loss_grad(pred: &Tensor, template: &Tensor, edges: &[(usize, usize)]) -> Result<(f64, Tensor)> {
    check_same("smooth_loss", pred, template)?;
    if edges.is_empty() {
        return Err(TopologyError::MissingFullEdges.into());
    }
    let (n, c) = pred.dims2()?;
    if c != 3 {
        return Err(Error::shape("smooth_loss", pred.shape(), &[n, 3]));
    }
    let mut grad = Tensor::zeros(pred.shape());
    let mut loss = 0.0;
    let m = edges.len() as f64;
    for &(i, j) in edges {
        if i >= n || j >= n {
            return Err(Error::Config(format!("smooth_loss: edge ({i}, {j}) outside 0..{n}")));
        }
        let e = edge_vec(pred, i, j);
        let lp = MM * norm3(e);
        let lt = MM * norm3(edge_vec(template, i, j));
        let r = lp - lt;
        loss += r * r;
        if lp > 0.0 {
            let s = 2.0 * r / m * MM * MM / lp;
            for k in 0..3 {
                let g = s * e[k];
                grad.row_mut(i)[k] += g;
                grad.row_mut(j)[k] -= g;
            }
        }
    }
    Ok((loss / m, grad))
}

pub fn smooth_loss(pred: &HandMesh, template: &HandMesh, edges: &[(usize, usize)]) -> Result<f64> {
    Ok(smooth_loss_grad(&pred.vertices, &template.vertices, edges)?.0)
}

/// Ground truth for one hand.
#[derive(Debug, Clone, PartialEq)]
pub struct HandTarget {
    pub vertices: Tensor,
    pub joints: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub vertex: f64,
    pub joint: f64,
    pub smooth: f64,
    pub total: f64,
}

/// Weighted sum of the three losses for one hand, with the gradient w.r.t.
/// the predicted vertices. The ground-truth mesh is the smoothness template.
pub fn combined_loss_grad(
    pred: &Tensor,
    target: &HandTarget,
    j: &JointRegressor,
    edges: &[(usize, usize)],
    w: &LossWeights,
) -> Result<(LossBreakdown, Tensor)> {
    let (lv, gv) = vertex_loss_grad(pred, &target.vertices)?;
    let (lj, gj) = joint_loss_grad(pred, &target.joints, j)?;
    let (ls, gs) = smooth_loss_grad(pred, &target.vertices, edges)?;
    let mut grad = gv.scale(w.vertex);
    grad.axpy(w.joint, &gj)?;
    grad.axpy(w.smooth, &gs)?;
    Ok((
        LossBreakdown {
            vertex: lv,
            joint: lj,
            smooth: ls,
            total: w.vertex * lv + w.joint * lj + w.smooth * ls,
        },
        grad,
    ))
}

/// `|a − t| − |b − t|`, exact in `a − b` when both residuals share a sign.
fn abs_delta(a: f64, b: f64, t: f64) -> f64 {
    let (ra, rb) = (a - t, b - t);
    if ra >= 0.0 && rb >= 0.0 {
        a - b
    } else if ra <= 0.0 && rb <= 0.0 {
        b - a
    } else {
        ra.abs() - rb.abs()
    }
}

/// Combined loss at `plus` minus combined loss at `minus`, accumulated term
/// by term from the exact vertex differences. Subtracting two whole loss
/// values instead would cost the digits the shared part of the loss
/// occupies, which swamps small finite-difference signals.
pub fn combined_loss_delta(
    plus: &Tensor,
    minus: &Tensor,
    target: &HandTarget,
    j: &JointRegressor,
    edges: &[(usize, usize)],
    w: &LossWeights,
) -> Result<f64> {
    check_same("combined_loss_delta", plus, minus)?;
    check_same("combined_loss_delta", plus, &target.vertices)?;
    let n = plus.len() as f64;
    let vertex: f64 = plus
        .data()
        .iter()
        .zip(minus.data())
        .zip(target.vertices.data())
        .map(|((&a, &b), &t)| abs_delta(a, b, t))
        .sum::<f64>()
        * MM
        / n;

    let dp = plus.sub(minus)?;
    let jp = j.regress(plus)?;
    let jm = j.regress(minus)?;
    let jd = j.regress(&dp)?;
    check_same("combined_loss_delta", &jp, &target.joints)?;
    let nj = jp.len() as f64;
    let mut joint = 0.0;
    for k in 0..jp.len() {
        let (ra, rb) = (jp.data()[k] - target.joints.data()[k], jm.data()[k] - target.joints.data()[k]);
        joint += if ra >= 0.0 && rb >= 0.0 {
            jd.data()[k]
        } else if ra <= 0.0 && rb <= 0.0 {
            -jd.data()[k]
        } else {
            ra.abs() - rb.abs()
        };
    }
    joint *= MM / nj;

    if edges.is_empty() {
        return Err(TopologyError::MissingFullEdges.into());
    }
    let mut smooth = 0.0;
    for &(a, b) in edges {
        let ep = edge_vec(plus, a, b);
        let em = edge_vec(minus, a, b);
        let de = edge_vec(&dp, a, b);
        let (lp, lm) = (norm3(ep), norm3(em));
        let lt = norm3(edge_vec(&target.vertices, a, b));
        let sum_len = lp + lm;
        let d_len = if sum_len > 0.0 {
            (de[0] * (ep[0] + em[0]) + de[1] * (ep[1] + em[1]) + de[2] * (ep[2] + em[2])) / sum_len
        } else {
            0.0
        };
        // r⁺² − r⁻² = (r⁺ − r⁻)(r⁺ + r⁻)
        smooth += MM * d_len * MM * (lp + lm - 2.0 * lt);
    }
    smooth /= edges.len() as f64;
    Ok(w.vertex * vertex + w.joint * joint + w.smooth * smooth)
}

/// Evaluation convention: root alignment, then rescaling the prediction so
/// its middle metacarpal matches the ground truth's. Joint indices follow the
/// 21-joint layout with the wrist at 0 and the middle-finger knuckle at 9.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalProtocol {
    pub root_joint: usize,
    pub metacarpal: [usize; 2],
    /// Metacarpal length used to normalize training meshes.
    pub train_scale_cm: f64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            root_joint: 0,
            metacarpal: [0, 9],
            train_scale_cm: 9.5,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.train_scale_cm != 9.5 {
            return Err(Error::Config(format!(
                "eval.train_scale_cm must be 9.5, got {}",
                self.train_scale_cm
            )));
        }
        let [a, b] = self.metacarpal;
        if a == b || a >= NUM_JOINTS || b >= NUM_JOINTS || self.root_joint >= NUM_JOINTS {
            return Err(Error::Config(format!(
                "eval joint indices must be distinct and below {NUM_JOINTS}: root {}, metacarpal {:?}",
                self.root_joint, self.metacarpal
            )));
        }
        Ok(())
    }

    fn metacarpal_length(&self, joints: &Tensor) -> f64 {
        let [a, b] = self.metacarpal;
        norm3(edge_vec(joints, b, a))
    }
}

fn subtract_row(x: &Tensor, r: &[f64]) -> Tensor {
    let mut out = x.clone();
    let (n, _) = out.dims2().expect("rank 2");
    for i in 0..n {
        out.row_mut(i).iter_mut().zip(r).for_each(|(v, o)| *v -= o);
    }
    out
}

fn mean_euclidean(a: &Tensor, b: &Tensor) -> f64 {
    let (n, _) = a.dims2().expect("rank 2");
    (0..n)
        .map(|i| a.row(i).iter().zip(b.row(i)).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
        .sum::<f64>()
        / n as f64
}

/// Root-aligns both sides and rescales the prediction to the ground-truth
/// metacarpal length. Returns `(joints, vertices)` of the prediction and the
/// ground truth in that order.
pub fn align_hand(
    pred_joints: &Tensor,
    pred_vertices: &Tensor,
    gt_joints: &Tensor,
    gt_vertices: &Tensor,
    protocol: &EvalProtocol,
) -> Result<[Tensor; 4]> {
    for (name, t) in [("pred joints", pred_joints), ("gt joints", gt_joints)] {
        if t.shape() != [NUM_JOINTS, 3] {
            return Err(Error::InvalidShape {
                shape: t.shape().to_vec(),
                reason: format!("{name} must be {NUM_JOINTS} × 3"),
            });
        }
    }
    check_same("evaluate", pred_vertices, gt_vertices)?;
    let gt_len = protocol.metacarpal_length(gt_joints);
    if gt_len < DEGENERATE_LENGTH {
        return Err(Error::Degenerate("zero-length ground-truth metacarpal".into()));
    }
    let pred_len = protocol.metacarpal_length(pred_joints);
    if pred_len < DEGENERATE_LENGTH {
        return Err(Error::Degenerate("zero-length predicted metacarpal".into()));
    }
    let s = gt_len / pred_len;
    let pr = pred_joints.row(protocol.root_joint).to_vec();
    let gr = gt_joints.row(protocol.root_joint).to_vec();
    Ok([
        subtract_row(pred_joints, &pr).scale(s),
        subtract_row(pred_vertices, &pr).scale(s),
        subtract_row(gt_joints, &gr),
        subtract_row(gt_vertices, &gr),
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mpjpe_mm: f64,
    pub mpvpe_mm: f64,
}

/// Per-hand errors from explicit joints, in mm.
pub fn evaluate_hand(
    pred_joints: &Tensor,
    pred_vertices: &Tensor,
    gt_joints: &Tensor,
    gt_vertices: &Tensor,
    protocol: &EvalProtocol,
) -> Result<EvalMetrics> {
    let [pj, pv, gj, gv] = align_hand(pred_joints, pred_vertices, gt_joints, gt_vertices, protocol)?;
    Ok(EvalMetrics {
        mpjpe_mm: MM * mean_euclidean(&pj, &gj),
        mpvpe_mm: MM * mean_euclidean(&pv, &gv),
    })
}

/// MPJPE and MPVPE averaged over both hands; joints are regressed from the
/// meshes on both sides.
pub fn evaluate(pred: &[HandMesh; 2], gt: &[HandMesh; 2], j: &JointRegressor, protocol: &EvalProtocol) -> Result<EvalMetrics> {
    protocol.validate()?;
    let mut total = EvalMetrics {
        mpjpe_mm: 0.0,
        mpvpe_mm: 0.0,
    };
    for (p, g) in pred.iter().zip(gt) {
        if p.hand != g.hand {
            return Err(Error::Config(format!(
                "evaluate: prediction for the {} hand paired with ground truth for the {} hand",
                p.hand.name(),
                g.hand.name()
            )));
        }
        let m = evaluate_hand(&j.regress(&p.vertices)?, &p.vertices, &j.regress(&g.vertices)?, &g.vertices, protocol)?;
        total.mpjpe_mm += m.mpjpe_mm / 2.0;
        total.mpvpe_mm += m.mpvpe_mm / 2.0;
    }
    Ok(total)
}

/// Root-aligns a hand and scales it so its metacarpal is `train_scale_cm`.
pub fn normalize_to_train_scale(joints: &Tensor, vertices: &Tensor, protocol: &EvalProtocol) -> Result<(Tensor, Tensor)> {
    let len = protocol.metacarpal_length(joints);
    if len < DEGENERATE_LENGTH {
        return Err(Error::Degenerate("zero-length metacarpal".into()));
    }
    let s = protocol.train_scale_cm / 100.0 / len;
    let r = joints.row(protocol.root_joint).to_vec();
    Ok((subtract_row(joints, &r).scale(s), subtract_row(vertices, &r).scale(s)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{finite_diff_grad, max_rel_error, DEFAULT_EPS};
    use crate::mesh::{synthesize_topology, Hand};
    use crate::rng::SeededRng;
    use crate::synthetic::{synthetic_regressor, template_mesh};

    fn random_mesh(rng: &mut SeededRng) -> Tensor {
        template_mesh().add(&Tensor::uniform(&[778, 3], 0.005, rng)).unwrap()
    }

    #[test]
    fn vertex_loss_cases() {
        let mut rng = SeededRng::new(0);
        let gt = random_mesh(&mut rng);
        assert_eq!(vertex_loss_grad(&gt, &gt).unwrap().0, 0.0);
        let off = gt.map(|v| v + 0.001);
        assert!((vertex_loss_grad(&off, &gt).unwrap().0 - 1.0).abs() < 1e-9);
        assert!(vertex_loss_grad(&gt, &Tensor::zeros(&[778, 2])).is_err());
    }

    #[test]
    fn synthetic_regressor_is_row_stochastic() {
        let j = JointRegressor::synthetic(&template_mesh()).unwrap();
        assert_eq!(j.matrix().shape(), [21, 778]);
        assert!(JointRegressor::new(Tensor::full(&[2, 3], 0.5)).is_err());
    }

    #[test]
    fn joint_loss_cases() {
        let mut rng = SeededRng::new(1);
        let j = JointRegressor::synthetic(&template_mesh()).unwrap();
        let pred = random_mesh(&mut rng);
        let gt_j = j.regress(&pred).unwrap();
        assert_eq!(joint_loss_grad(&pred, &gt_j, &j).unwrap().0, 0.0);

        // translation shifts every joint by exactly v
        let v = [0.01, -0.02, 0.03];
        let mut moved = pred.clone();
        for i in 0..778 {
            moved.row_mut(i).iter_mut().zip(v).for_each(|(x, o)| *x += o);
        }
        let jm = j.regress(&moved).unwrap();
        for r in 0..21 {
            for k in 0..3 {
                assert!((jm.at(r, k) - gt_j.at(r, k) - v[k]).abs() < 1e-15);
            }
        }

        // naive loop oracle
        let target = Tensor::uniform(&[21, 3], 0.05, &mut rng);
        let mut s = 0.0;
        for r in 0..21 {
            for k in 0..3 {
                let mut acc = 0.0;
                for c in 0..778 {
                    acc += j.matrix().at(r, c) * pred.at(c, k);
                }
                s += (acc - target.at(r, k)).abs();
            }
        }
        let oracle = 1000.0 * s / 63.0;
        assert!((joint_loss_grad(&pred, &target, &j).unwrap().0 - oracle).abs() < 1e-12 * oracle.max(1.0));
    }

    #[test]
    fn smooth_loss_cases() {
        let topo = synthesize_topology(0);
        let edges = topo.full_edges().unwrap();
        let t = template_mesh();
        assert_eq!(smooth_loss_grad(&t, &t, edges).unwrap().0, 0.0);
        let doubled = t.scale(2.0);
        let mean_sq: f64 = edges
            .iter()
            .map(|&(i, j)| (1000.0 * norm3(edge_vec(&t, i, j))).powi(2))
            .sum::<f64>()
            / edges.len() as f64;
        let l = smooth_loss_grad(&doubled, &t, edges).unwrap().0;
        assert!((l - mean_sq).abs() < 1e-9 * mean_sq);
        assert!(smooth_loss_grad(&t, &t, &[]).unwrap_err().to_string().contains("missing"));
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let topo = synthesize_topology(0);
        let edges = topo.full_edges().unwrap();
        let j = JointRegressor::synthetic(&template_mesh()).unwrap();
        for seed in 0..10 {
            let mut rng = SeededRng::new(seed);
            // keep every residual far from the L1 kink relative to eps
            let gt = random_mesh(&mut rng);
            let signs: Vec<f64> = (0..gt.len()).map(|_| if rng.next_f64() < 0.5 { 0.002 } else { -0.002 }).collect();
            let pred = gt.add(&Tensor::new(vec![778, 3], signs).unwrap()).unwrap();
            let pred = pred.add(&Tensor::uniform(&[778, 3], 0.0005, &mut rng)).unwrap();
            let gt_j = j.regress(&gt).unwrap().add(&Tensor::full(&[21, 3], 0.003)).unwrap();

            let (_, g) = vertex_loss_grad(&pred, &gt).unwrap();
            let fd = finite_diff_grad(|p| Ok(vertex_loss_grad(p, &gt)?.0), &pred, DEFAULT_EPS).unwrap();
            assert!(max_rel_error(&g, &fd) < 1e-4);

            let (_, g) = joint_loss_grad(&pred, &gt_j, &j).unwrap();
            let fd = finite_diff_grad(|p| Ok(joint_loss_grad(p, &gt_j, &j)?.0), &pred, DEFAULT_EPS).unwrap();
            assert!(max_rel_error(&g, &fd) < 1e-4);

            // edge lengths of the hand template are well below a millimeter,
            // so the edge-length term is probed on a coarser point cloud
            let cloud = Tensor::uniform(&[778, 3], 0.5, &mut rng);
            let tmpl = Tensor::uniform(&[778, 3], 0.5, &mut rng);
            let (_, g) = smooth_loss_grad(&cloud, &tmpl, edges).unwrap();
            let fd = finite_diff_grad(|p| Ok(smooth_loss_grad(p, &tmpl, edges)?.0), &cloud, DEFAULT_EPS).unwrap();
            assert!(max_rel_error(&g, &fd) < 1e-4, "seed {seed}: {} {} {}", max_rel_error(&g, &fd), g.max_abs(), g.max_abs_diff(&fd));
        }
    }

    #[test]
    fn loss_delta_matches_direct_difference() {
        let topo = synthesize_topology(0);
        let edges = topo.full_edges().unwrap();
        let j = synthetic_regressor();
        let w = LossWeights::default();
        for seed in 0..5 {
            let mut rng = SeededRng::new(seed);
            let gt = random_mesh(&mut rng);
            let target = HandTarget {
                joints: j.regress(&gt).unwrap(),
                vertices: gt.clone(),
            };
            let a = random_mesh(&mut rng);
            // large and small perturbations, some crossing the L1 kinks
            for scale in [1e-3, 1e-7] {
                let b = a.add(&Tensor::uniform(&[778, 3], scale, &mut rng)).unwrap();
                let direct = combined_loss_grad(&a, &target, &j, edges, &w).unwrap().0.total
                    - combined_loss_grad(&b, &target, &j, edges, &w).unwrap().0.total;
                let delta = combined_loss_delta(&a, &b, &target, &j, edges, &w).unwrap();
                assert!((direct - delta).abs() < 1e-9 * (1.0 + direct.abs()), "{direct} {delta}");
            }
        }
    }

    fn hands(rng: &mut SeededRng) -> [HandMesh; 2] {
        [
            HandMesh::new(Hand::Left, random_mesh(rng)).unwrap(),
            HandMesh::new(Hand::Right, random_mesh(rng)).unwrap(),
        ]
    }

    #[test]
    fn evaluate_identity_and_scaling() {
        let mut rng = SeededRng::new(5);
        let j = JointRegressor::synthetic(&template_mesh()).unwrap();
        let p = EvalProtocol::default();
        let gt = hands(&mut rng);
        let m = evaluate(&gt, &gt, &j, &p).unwrap();
        assert_eq!((m.mpjpe_mm, m.mpvpe_mm), (0.0, 0.0));

        // scaling about the root joint
        let scaled = gt.clone().map(|h| {
            let root = j.regress(&h.vertices).unwrap().row(0).to_vec();
            let v = subtract_row(&h.vertices, &root).scale(1.3);
            let mut back = v.clone();
            for i in 0..778 {
                back.row_mut(i).iter_mut().zip(&root).for_each(|(x, o)| *x += o);
            }
            HandMesh::new(h.hand, back).unwrap()
        });
        let m = evaluate(&scaled, &gt, &j, &p).unwrap();
        assert!(m.mpjpe_mm < 1e-9 && m.mpvpe_mm < 1e-9);
    }

    #[test]
    fn one_joint_offset_averages_over_joints() {
        let mut rng = SeededRng::new(6);
        let p = EvalProtocol::default();
        let gt_j = Tensor::uniform(&[21, 3], 0.05, &mut rng);
        let v = Tensor::uniform(&[10, 3], 0.05, &mut rng);
        let mut pj = gt_j.clone();
        pj.row_mut(5)[1] += 0.002;
        let m = evaluate_hand(&pj, &v, &gt_j, &v, &p).unwrap();
        assert!((m.mpjpe_mm - 2.0 / 21.0).abs() < 1e-9);
        assert!(m.mpvpe_mm < 1e-12);
    }

    #[test]
    fn degenerate_metacarpal() {
        let p = EvalProtocol::default();
        let z = Tensor::zeros(&[21, 3]);
        let v = Tensor::zeros(&[4, 3]);
        assert!(matches!(evaluate_hand(&z, &v, &z, &v, &p), Err(Error::Degenerate(_))));
    }

    #[test]
    fn protocol_validation() {
        let mut p = EvalProtocol::default();
        p.validate().unwrap();
        p.train_scale_cm = 9.0;
        assert!(p.validate().is_err());
        let p = EvalProtocol {
            metacarpal: [3, 3],
            ..EvalProtocol::default()
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn train_scale_normalization() {
        let mut rng = SeededRng::new(7);
        let p = EvalProtocol::default();
        let j = Tensor::uniform(&[21, 3], 0.05, &mut rng);
        let (nj, _) = normalize_to_train_scale(&j, &Tensor::zeros(&[2, 3]), &p).unwrap();
        assert!((p.metacarpal_length(&nj) - 0.095).abs() < 1e-15);
        assert_eq!(nj.row(0), &[0.0, 0.0, 0.0]);
    }

    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn evaluate_is_translation_and_scale_invariant(
            seed in 0u64..1000,
            tx in -0.5f64..0.5, ty in -0.5f64..0.5, tz in -0.5f64..0.5,
            scale in 0.2f64..5.0,
        ) {
            let mut rng = SeededRng::new(seed);
            let j = JointRegressor::synthetic(&template_mesh()).unwrap();
            let p = EvalProtocol::default();
            let gt = hands(&mut rng);
            let pred = hands(&mut rng);
            let base = evaluate(&pred, &gt, &j, &p).unwrap();
            let shift = |h: &HandMesh, s: f64| {
                let mut v = h.vertices.scale(s);
                for i in 0..778 {
                    v.row_mut(i).iter_mut().zip([tx, ty, tz]).for_each(|(x, o)| *x += o);
                }
                HandMesh { hand: h.hand, vertices: v }
            };
            let moved = evaluate(&[shift(&pred[0], 1.0), shift(&pred[1], 1.0)], &[shift(&gt[0], 1.0), shift(&gt[1], 1.0)], &j, &p).unwrap();
            prop_assert!((moved.mpjpe_mm - base.mpjpe_mm).abs() < 1e-9);
            prop_assert!((moved.mpvpe_mm - base.mpvpe_mm).abs() < 1e-9);
            let scaled = [HandMesh { hand: pred[0].hand, vertices: pred[0].vertices.scale(scale) }, HandMesh { hand: pred[1].hand, vertices: pred[1].vertices.scale(scale) }];
            let s = evaluate(&scaled, &gt, &j, &p).unwrap();
            prop_assert!((s.mpjpe_mm - base.mpjpe_mm).abs() < 1e-9);
            prop_assert!((s.mpvpe_mm - base.mpvpe_mm).abs() < 1e-9);
        }
    }
}
