//! Static FLOPs accounting.
//!
//! A config is turned into a flat plan of op calls, each priced by a
//! closed-form formula from the registry. Nothing is executed, so counting is
//! cheap and exact (integer arithmetic throughout).
//!
//! Conventions: a multiply–add is 2 flops, softmax 5 per element (exp ≈ 4,
//! divide ≈ 1), a nonlinearity 4 per element, and add/mean/scale/gate 1 per
//! element.

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::mesh::SubmeshHierarchy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    /// Encoder plus the pixel-side bridge work (projection, attention map,
    /// token-to-pixel gather).
    Image,
    /// Vertex streams, cross-hand exchange, decoder and heads.
    Pose,
}

/// One call in a cost plan. Also the shape of user-supplied extra items.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtraOp {
    pub path: String,
    pub op: String,
    pub args: Vec<u64>,
    pub part: Part,
}

type CostFn = fn(&[u64]) -> u64;

struct Registered {
    name: &'static str,
    args: &'static [&'static str],
    cost: CostFn,
}

fn matmul(m: u64, k: u64, n: u64) -> u64 {
    2 * m * k * n
}

fn mlp(n: u64, d: u64) -> u64 {
    matmul(n, d, 2 * d) + n * 2 * d + 4 * n * 2 * d + matmul(n, 2 * d, d) + n * d
}

/// Scores, scaling, softmax and weighted sum of dense attention between
/// `nt` targets and `ns` sources.
fn dense_mixing(nt: u64, ns: u64, d: u64) -> u64 {
    matmul(nt, d, ns) + nt * ns + 5 * nt * ns + matmul(nt, ns, d)
}

fn dense_directed(nt: u64, ns: u64, d: u64) -> u64 {
    matmul(nt, d, d) + 2 * matmul(ns, d, d) + dense_mixing(nt, ns, d)
}

/// Scoring, softmax, context vector and broadcast gating of separable
/// attention. Linear in both token counts.
fn separable_mixing(nt: u64, ns: u64, d: u64) -> u64 {
    2 * ns * d + 5 * ns + 2 * ns * d + nt * d
}

fn separable(nt: u64, ns: u64, d: u64) -> u64 {
    matmul(ns, d, d) + matmul(nt, d, d) + 4 * nt * d + matmul(nt, d, d) + separable_mixing(nt, ns, d)
}

fn query_map(m: u64, d: u64, p: u64, c: u64, h: u64) -> u64 {
    let (dh, ch) = (d / h, c / h);
    h * (matmul(m, dh, ch) + matmul(m, ch, p) + m * p + 5 * m * p + m * p)
}

fn query_cross(m: u64, d: u64, p: u64, c: u64, h: u64) -> u64 {
    query_map(m, d, p, c, h) + h * matmul(m, p, c / h) + matmul(m, c, d)
}

const REGISTRY: &[Registered] = &[
    Registered { name: "matmul", args: &["m", "k", "n"], cost: |a| matmul(a[0], a[1], a[2]) },
    Registered { name: "softmax", args: &["elements"], cost: |a| 5 * a[0] },
    Registered { name: "activation", args: &["elements"], cost: |a| 4 * a[0] },
    Registered { name: "add", args: &["elements"], cost: |a| a[0] },
    Registered { name: "mean", args: &["elements"], cost: |a| a[0] },
    // encoder
    Registered {
        name: "expand_pointwise",
        args: &["c_in", "c_out", "h", "w"],
        cost: |a| 2 * a[0] * a[1] * a[2] * a[3],
    },
    Registered {
        name: "pointwise_conv2d",
        args: &["c_in", "c_out", "h", "w"],
        cost: |a| 2 * a[0] * a[1] * a[2] * a[3],
    },
    Registered {
        name: "depthwise_conv2d",
        args: &["c", "h_out", "w_out", "k"],
        cost: |a| 2 * a[0] * a[1] * a[2] * a[3] * a[3],
    },
    Registered {
        name: "token_fusion",
        args: &["c", "d", "h", "w"],
        cost: |a| 2 * a[0] * a[0] * a[2] * a[3] + 2 * a[0] * a[1] + a[0] * a[2] * a[3],
    },
    Registered { name: "token_mean", args: &["m", "d"], cost: |a| a[0] * a[1] },
    Registered {
        name: "token_update",
        args: &["m", "d", "p", "c", "heads"],
        cost: |a| query_cross(a[0], a[1], a[2], a[3], a[4]) + a[0] * a[1],
    },
    // attention
    Registered {
        name: "query_only_cross_attention",
        args: &["m", "d", "p", "c", "heads"],
        cost: |a| query_cross(a[0], a[1], a[2], a[3], a[4]),
    },
    Registered {
        name: "query_only_attention_map",
        args: &["m", "d", "p", "c", "heads"],
        cost: |a| query_map(a[0], a[1], a[2], a[3], a[4]),
    },
    Registered { name: "map_global_to_graph", args: &["m", "p", "c"], cost: |a| matmul(a[0], a[1], a[2]) },
    Registered {
        name: "cross_hand_attention",
        args: &["n", "d"],
        cost: |a| 2 * dense_directed(a[0], a[0], a[1]),
    },
    Registered { name: "merge_cross_features", args: &["n", "d"], cost: |a| a[0] * a[1] + mlp(a[0], a[1]) },
    Registered { name: "separable_self_attention", args: &["k", "d"], cost: |a| separable(a[0], a[0], a[1]) },
    Registered {
        name: "separable_cross_attention",
        args: &["n_target", "n_source", "d"],
        cost: |a| separable(a[0], a[1], a[2]),
    },
    Registered {
        name: "dense_token_mixing",
        args: &["n_target", "n_source", "d"],
        cost: |a| dense_mixing(a[0], a[1], a[2]),
    },
    Registered {
        name: "separable_token_mixing",
        args: &["n_target", "n_source", "d"],
        cost: |a| separable_mixing(a[0], a[1], a[2]),
    },
    // bridge
    Registered { name: "bridge_input_projection", args: &["p", "c", "d"], cost: |a| matmul(a[0], a[1], a[2]) },
    Registered {
        name: "vertex_fusion",
        args: &["n", "d"],
        cost: |a| matmul(a[0], a[1], a[1]) + matmul(1, a[1], a[1]) + a[0] * a[1],
    },
    Registered {
        name: "bridge_forward",
        args: &["p", "c", "d", "m", "heads", "n", "separable"],
        cost: |a| {
            let (p, c, d, m, h, n) = (a[0], a[1], a[2], a[3], a[4], a[5]);
            let cross = if a[6] != 0 {
                2 * separable(n, n, d)
            } else {
                2 * dense_directed(n, n, d)
            };
            matmul(p, c, d)
                + query_map(m, d, p, d, h)
                + matmul(m, p, d)
                + m * d
                + 2 * (matmul(n, d, d) + d * d * 2 + n * d)
                + cross
                + 2 * (n * d + mlp(n, d))
        },
    },
    // mesh
    Registered {
        name: "gcn_block",
        args: &["n", "nnz", "d"],
        cost: |a| 2 * a[1] * a[2] + matmul(a[0], a[2], a[2]) + 4 * a[0] * a[2],
    },
    Registered {
        name: "upsample_level",
        args: &["n_out", "n_in", "d"],
        cost: |a| matmul(a[0], a[1], a[2]),
    },
    Registered {
        name: "upsample_to_full",
        args: &["full_n", "n", "d"],
        cost: |a| matmul(a[1], a[2], 3) + matmul(a[0], a[1], 3) + 3 * a[0],
    },
];

pub fn registered_ops() -> Vec<&'static str> {
    REGISTRY.iter().map(|r| r.name).collect()
}

/// Argument names of a registered op.
pub fn op_args(op: &str) -> Option<&'static [&'static str]> {
    REGISTRY.iter().find(|r| r.name == op).map(|r| r.args)
}

pub fn op_cost(op: &str, args: &[u64]) -> Result<u64> {
    let r = REGISTRY
        .iter()
        .find(|r| r.name == op)
        .ok_or_else(|| Error::UnknownOp(vec![op.to_string()]))?;
    if args.len() != r.args.len() {
        return Err(Error::Config(format!(
            "op {op:?} takes {} args ({}), got {}",
            r.args.len(),
            r.args.join(", "),
            args.len()
        )));
    }
    Ok((r.cost)(args))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlopsEntry {
    pub path: String,
    pub op: String,
    pub part: Part,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlopsReport {
    pub convention: String,
    pub entries: Vec<FlopsEntry>,
    pub image_part: u64,
    pub pose_part: u64,
    pub total: u64,
}

const GIGA: f64 = 1e9;

impl FlopsReport {
    fn from_entries(convention: &str, entries: Vec<FlopsEntry>) -> Self {
        let sum = |p: Part| entries.iter().filter(|e| e.part == p).map(|e| e.flops).sum::<u64>();
        let image_part = sum(Part::Image);
        let pose_part = sum(Part::Pose);
        Self {
            convention: convention.to_string(),
            total: entries.iter().map(|e| e.flops).sum(),
            entries,
            image_part,
            pose_part,
        }
    }

    pub fn total_gflops(&self) -> f64 {
        self.total as f64 / GIGA
    }

    /// Sums entries whose path starts with `prefix`.
    pub fn subtotal(&self, prefix: &str) -> u64 {
        self.entries.iter().filter(|e| e.path.starts_with(prefix)).map(|e| e.flops).sum()
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("# {}\n", self.convention);
        s.push_str(&format!("{:<14}{:>14}{:>14}\n", "Total flops", "Image part", "Pose part"));
        s.push_str(&format!(
            "{:<14}{:>14}{:>14}\n",
            format!("{:.4}G", self.total as f64 / GIGA),
            format!("{:.4}G", self.image_part as f64 / GIGA),
            format!("{:.4}G", self.pose_part as f64 / GIGA)
        ));
        s.push('\n');
        let width = self.entries.iter().map(|e| e.path.len()).max().unwrap_or(4).max(4);
        s.push_str(&format!("{:<width$}  {:<5}  {:>14}\n", "path", "part", "flops"));
        for e in &self.entries {
            let part = match e.part {
                Part::Image => "image",
                Part::Pose => "pose",
            };
            s.push_str(&format!("{:<width$}  {:<5}  {:>14}\n", e.path, part, e.flops));
        }
        s
    }
}

/// The op calls a forward pass makes under `cfg`, in execution order.
pub fn plan(cfg: &ModelConfig, topology: &SubmeshHierarchy) -> Result<Vec<ExtraOp>> {
    let enc = &cfg.encoder;
    let (m, d, h) = (enc.tokens as u64, enc.dim as u64, enc.heads as u64);
    let mut calls = Vec::new();
    let mut push = |path: String, op: &str, args: Vec<u64>, part: Part| {
        calls.push(ExtraOp {
            path,
            op: op.to_string(),
            args,
            part,
        })
    };
    for (i, ((c_in, c_out, s_in, s_out), sc)) in enc.stack_shapes()?.into_iter().zip(&enc.stacks).enumerate() {
        let p = format!("encoder.stacks.{i}");
        let (c_in, c_out, s_in, s_out) = (c_in as u64, c_out as u64, s_in as u64, s_out as u64);
        let ec = c_in * sc.expansion as u64;
        if sc.expansion > 1 {
            push(format!("{p}.expand"), "expand_pointwise", vec![c_in, ec, s_in, s_in], Part::Image);
            push(format!("{p}.expand_act"), "activation", vec![ec * s_in * s_in], Part::Image);
        }
        push(format!("{p}.depthwise"), "depthwise_conv2d", vec![ec, s_out, s_out, enc.kernel as u64], Part::Image);
        push(format!("{p}.token_mean"), "token_mean", vec![m, d], Part::Image);
        push(format!("{p}.fusion"), "token_fusion", vec![ec, d, s_out, s_out], Part::Image);
        push(format!("{p}.pointwise"), "pointwise_conv2d", vec![ec, c_out, s_out, s_out], Part::Image);
        push(format!("{p}.pointwise_act"), "activation", vec![c_out * s_out * s_out], Part::Image);
        push(format!("{p}.token_update"), "token_update", vec![m, d, s_out * s_out, c_out, h], Part::Image);
    }
    let bh = cfg.bridge.heads as u64;
    for (t, (c, side)) in enc.pyramid_shapes()?.into_iter().enumerate() {
        let p = format!("bridge.{t}");
        let (c, px) = (c as u64, (side * side) as u64);
        let n = topology.level(t)?.n as u64;
        push(format!("{p}.input_projection"), "bridge_input_projection", vec![px, c, d], Part::Image);
        push(format!("{p}.attention_map"), "query_only_attention_map", vec![m, d, px, d, bh], Part::Image);
        push(format!("{p}.map_to_graph"), "map_global_to_graph", vec![m, px, d], Part::Image);
        push(format!("{p}.context_mean"), "mean", vec![m * d], Part::Pose);
        for hand in ["left", "right"] {
            push(format!("{p}.fusion.{hand}"), "vertex_fusion", vec![n, d], Part::Pose);
        }
        if cfg.bridge.is_separable(t) {
            for hand in ["left", "right"] {
                push(format!("{p}.cross.to_{hand}"), "separable_cross_attention", vec![n, n, d], Part::Pose);
            }
        } else {
            push(format!("{p}.cross"), "cross_hand_attention", vec![n, d], Part::Pose);
        }
        for hand in ["left", "right"] {
            push(format!("{p}.merge.{hand}"), "merge_cross_features", vec![n, d], Part::Pose);
        }
        let lvl = topology.level(t)?;
        for k in 0..cfg.decoder.gcn_depth[t] {
            for hand in ["left", "right"] {
                push(
                    format!("decoder.{t}.gcn.{k}.{hand}"),
                    "gcn_block",
                    vec![n, lvl.adjacency.nnz() as u64, d],
                    Part::Pose,
                );
            }
        }
        if t + 1 < topology.levels.len() {
            let n_out = topology.level(t + 1)?.n as u64;
            for hand in ["left", "right"] {
                push(format!("decoder.{t}.upsample.{hand}"), "upsample_level", vec![n_out, n, d], Part::Pose);
            }
        } else {
            for hand in ["left", "right"] {
                push(
                    format!("head.{hand}"),
                    "upsample_to_full",
                    vec![topology.full_n as u64, n, d],
                    Part::Pose,
                );
            }
        }
    }
    calls.extend(cfg.flops.extra_ops.iter().cloned());
    Ok(calls)
}

/// Prices every planned call. Unregistered ops are all reported together.
pub fn count_flops(cfg: &ModelConfig, topology: &SubmeshHierarchy) -> Result<FlopsReport> {
    cfg.validate()?;
    let calls = plan(cfg, topology)?;
    let unknown: Vec<String> = calls
        .iter()
        .filter(|c| op_args(&c.op).is_none())
        .map(|c| format!("{} ({})", c.op, c.path))
        .collect();
    if !unknown.is_empty() {
        return Err(Error::UnknownOp(unknown));
    }
    let entries = calls
        .into_iter()
        .map(|c| {
            Ok(FlopsEntry {
                flops: op_cost(&c.op, &c.args)?,
                path: c.path,
                op: c.op,
                part: c.part,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FlopsReport::from_entries(cfg.flops.convention.describe(), entries))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplexityScan {
    pub op: String,
    pub variable: String,
    pub sizes: Vec<u64>,
    /// Token-mixing cost at each size (for `matmul`, the whole product).
    pub flops: Vec<u64>,
    pub exponent: f64,
    /// Whole-op cost including the fixed-width projections.
    pub full_op_flops: Vec<u64>,
    pub full_op_exponent: f64,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_loglog_slope(xs: &[u64], ys: &[u64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|&x| (x as f64).ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|&y| (y as f64).ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

pub const SCANNABLE: &[&str] = &[
    "separable_self_attention",
    "separable_cross_attention",
    "cross_hand_attention",
    "matmul",
];

/// Sweeps the token count (or `n` for `matmul`, with `m = k = width`) and
/// fits the growth exponent. For attention ops the primary exponent is the
/// token-mixing cost, the part that distinguishes dense from separable
/// attention; the whole-op exponent is reported alongside.
pub fn complexity_scan(op: &str, sizes: &[u64], width: u64) -> Result<ComplexityScan> {
    if sizes.len() < 4 {
        return Err(Error::Config(format!(
            "complexity scan needs at least 4 sizes, got {}",
            sizes.len()
        )));
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) || sizes[0] == 0 {
        return Err(Error::Config("complexity scan sizes must be positive and strictly increasing".into()));
    }
    let (variable, mixing, full): (&str, Box<dyn Fn(u64) -> Result<u64>>, Box<dyn Fn(u64) -> Result<u64>>) = match op {
        "separable_self_attention" | "separable_cross_attention" => (
            "tokens",
            Box::new(move |k| op_cost("separable_token_mixing", &[k, k, width])),
            Box::new(move |k| op_cost("separable_cross_attention", &[k, k, width])),
        ),
        "cross_hand_attention" => (
            "tokens",
            Box::new(move |k| Ok(2 * op_cost("dense_token_mixing", &[k, k, width])?)),
            Box::new(move |k| op_cost("cross_hand_attention", &[k, width])),
        ),
        "matmul" => (
            "n",
            Box::new(move |n| op_cost("matmul", &[width, width, n])),
            Box::new(move |n| op_cost("matmul", &[width, width, n])),
        ),
        other => {
            return Err(Error::Config(format!(
                "op {other:?} has no token sweep; scannable ops: {}",
                SCANNABLE.join(", ")
            )))
        }
    };
    let flops = sizes.iter().map(|&k| mixing(k)).collect::<Result<Vec<_>>>()?;
    let full_op_flops = sizes.iter().map(|&k| full(k)).collect::<Result<Vec<_>>>()?;
    Ok(ComplexityScan {
        op: op.to_string(),
        variable: variable.to_string(),
        sizes: sizes.to_vec(),
        exponent: fit_loglog_slope(sizes, &flops),
        full_op_exponent: fit_loglog_slope(sizes, &full_op_flops),
        flops,
        full_op_flops,
    })
}

/// Parses `"64..512"` into the doubling sweep `64, 128, 256, 512`, or a comma
/// list `"64,100,300,512"` verbatim.
pub fn parse_sweep(spec: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("bad sweep {spec:?}; use LO..HI or a comma list"));
    if let Some((lo, hi)) = spec.split_once("..") {
        let lo: u64 = lo.trim().parse().map_err(|_| bad())?;
        let hi: u64 = hi.trim().parse().map_err(|_| bad())?;
        if lo == 0 || hi < lo {
            return Err(bad());
        }
        let mut out = vec![lo];
        while let Some(&last) = out.last() {
            if last * 2 > hi {
                break;
            }
            out.push(last * 2);
        }
        Ok(out)
    } else {
        spec.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::synthesize_topology;

    #[test]
    fn matmul_counts_two_per_multiply_add() {
        assert_eq!(op_cost("matmul", &[2, 3, 4]).unwrap(), 48);
        assert!(matches!(op_cost("conv3d", &[1]), Err(Error::UnknownOp(_))));
        assert!(op_cost("matmul", &[2, 3]).is_err());
    }

    #[test]
    fn every_exposed_operator_is_priced() {
        let exposed = crate::attention::OPERATORS
            .iter()
            .chain(crate::encoder::OPERATORS)
            .chain(crate::mesh::OPERATORS)
            .chain(crate::bridge::OPERATORS);
        let missing: Vec<_> = exposed.filter(|op| op_args(op).is_none()).collect();
        assert!(missing.is_empty(), "unpriced: {missing:?}");
    }

    #[test]
    fn closed_forms_match_hand_counts() {
        // depthwise: 2·C·H'·W'·K²
        assert_eq!(op_cost("depthwise_conv2d", &[4, 5, 6, 3]).unwrap(), 2 * 4 * 5 * 6 * 9);
        assert_eq!(op_cost("pointwise_conv2d", &[3, 7, 2, 2]).unwrap(), 2 * 3 * 7 * 4);
        // dense attention, one direction, counted by hand for n = 2, d = 1
        // q,k,v: 3·2·2·1·1 = 12; scores 2·2·1·2 = 8; scale 4; softmax 20; out 8
        assert_eq!(op_cost("cross_hand_attention", &[2, 1]).unwrap(), 2 * (12 + 8 + 4 + 20 + 8));
    }

    #[test]
    fn bridge_total_equals_its_planned_pieces() {
        let cfg = ModelConfig::default();
        let topo = synthesize_topology(0);
        let r = count_flops(&cfg, &topo).unwrap();
        for (t, (c, side)) in cfg.encoder.pyramid_shapes().unwrap().into_iter().enumerate() {
            let args = [
                (side * side) as u64,
                c as u64,
                cfg.encoder.dim as u64,
                cfg.encoder.tokens as u64,
                cfg.bridge.heads as u64,
                topo.level(t).unwrap().n as u64,
                cfg.bridge.is_separable(t) as u64,
            ];
            assert_eq!(op_cost("bridge_forward", &args).unwrap(), r.subtotal(&format!("bridge.{t}.")));
        }
    }

    #[test]
    fn default_config_meets_budget() {
        let r = count_flops(&ModelConfig::default(), &synthesize_topology(0)).unwrap();
        assert_eq!(r.image_part + r.pose_part, r.total);
        assert_eq!(r.entries.iter().map(|e| e.flops).sum::<u64>(), r.total);
        let g = r.total_gflops();
        assert!((0.40..=0.55).contains(&g), "{g}");
        assert!(r.to_table().contains("Image part"));
    }

    #[test]
    fn published_row_partition_identity() {
        // Total 0.47 G split into 0.25 G image and 0.22 G pose.
        let (image, pose, total) = (250_000_000u64, 220_000_000u64, 470_000_000u64);
        assert_eq!(image + pose, total);
    }

    #[test]
    fn extra_ops_are_priced_or_rejected() {
        let topo = synthesize_topology(0);
        let mut cfg = ModelConfig::default();
        let base = count_flops(&cfg, &topo).unwrap().total;
        cfg.flops.extra_ops.push(ExtraOp {
            path: "aux.head".into(),
            op: "matmul".into(),
            args: vec![2, 3, 4],
            part: Part::Pose,
        });
        assert_eq!(count_flops(&cfg, &topo).unwrap().total, base + 48);
        cfg.flops.extra_ops.push(ExtraOp {
            path: "aux.fancy".into(),
            op: "fancy_op".into(),
            args: vec![],
            part: Part::Image,
        });
        let e = count_flops(&cfg, &topo).unwrap_err();
        assert!(e.to_string().contains("fancy_op"), "{e}");
    }

    #[test]
    fn scan_exponents() {
        let ks = [64, 128, 256, 512];
        let sep = complexity_scan("separable_self_attention", &ks, 96).unwrap();
        assert!((sep.exponent - 1.0).abs() < 1e-12, "{}", sep.exponent);
        assert!((0.9..=1.1).contains(&sep.full_op_exponent));
        let dense = complexity_scan("cross_hand_attention", &ks, 96).unwrap();
        assert!((dense.exponent - 2.0).abs() < 1e-12, "{}", dense.exponent);
        assert!(dense.full_op_exponent > 1.3 && dense.full_op_exponent < 2.0);
        let mm = complexity_scan("matmul", &ks, 8).unwrap();
        assert_eq!(mm.exponent, 1.0);
        assert!(complexity_scan("matmul", &ks[..3], 8).is_err());
        assert!(complexity_scan("matmul", &[1, 2, 2, 3], 8).is_err());
        assert!(complexity_scan("gcn_block", &ks, 8).is_err());
    }

    #[test]
    fn sweep_parsing() {
        assert_eq!(parse_sweep("64..512").unwrap(), [64, 128, 256, 512]);
        assert_eq!(parse_sweep("1,3,5").unwrap(), [1, 3, 5]);
        assert!(parse_sweep("a..b").is_err());
    }
}
