//! Command implementations behind the `lwa` binary.
//!
//! Every command returns its printable output instead of writing to stdout,
//! so tests can drive the same code paths in-process. Artifacts go to
//! `--out`, together with a `manifest.json` recording inputs, outputs and
//! their SHA-256 digests.

pub mod manifest;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use lwa_core::config::ModelConfig;
use lwa_core::flops::{complexity_scan, count_flops, parse_sweep, ComplexityScan, FlopsReport};
use lwa_core::lwat::{load_bundle, BUNDLE_MAGIC, load_tensor, save_bundle, save_tensor, DType};
use lwa_core::mesh::{save_topology, synthesize_topology, Hand, HandMesh};
use lwa_core::metrics::{evaluate, EvalMetrics, JointRegressor};
use lwa_core::model::{load_configured_topology, LevelDiagnostics, Model};
use lwa_core::synthetic::{load_dataset, make_dataset, synthetic_regressor, Sample};
use lwa_core::train::{gradcheck, sgd_fit, FitTrace, GradcheckOptions, GradcheckReport, Objective, SgdSettings};
use lwa_core::Tensor;

use manifest::ManifestBuilder;

/// Version stamped into every JSON output.
pub const OUTPUT_FORMAT_VERSION: u32 = 1;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Numeric,
}

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Validation,
            message: message.into(),
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Numeric,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Validation => EXIT_VALIDATION,
            ErrorKind::Numeric => EXIT_NUMERIC,
        }
    }
}

impl From<lwa_core::Error> for CliError {
    fn from(e: lwa_core::Error) -> Self {
        let kind = if e.is_validation() {
            ErrorKind::Validation
        } else {
            ErrorKind::Numeric
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

/// Prefixes a core error with the file it came from.
fn in_file(path: &Path) -> impl Fn(lwa_core::Error) -> CliError + '_ {
    move |e| {
        let mut c = CliError::from(e);
        c.message = format!("{}: {}", path.display(), c.message);
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Table,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Default,
    Toy,
}

#[derive(Debug, Parser)]
#[command(name = "lwa", version, about = "Lightweight two-hand mesh reconstruction: forward passes, FLOPs, gradient checks and fitting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// JSON model config. Overrides --preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in config used when --config is absent.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write freshly initialized weights and the resolved config.
    Init {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write all-zero weights instead of random ones.
        #[arg(long)]
        zero: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the pipeline on one image tensor and write both hand meshes.
    Forward {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Weight bundle; freshly initialized from --seed when absent.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// LWAT tensor `3 × S × S` with values in [0, 1], or a dataset sample.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Static FLOPs report, or a token sweep with `--sweep tokens LO..HI`.
    Flops {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, num_args = 2, value_names = ["VARIABLE", "RANGE"])]
        sweep: Option<Vec<String>>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Complexity scan of one operator.
    Scan {
        #[arg(long)]
        op: String,
        /// `LO..HI` (doubling) or a comma list.
        #[arg(long, default_value = "64..512")]
        sweep: String,
        /// Feature width held fixed during the sweep.
        #[arg(long, default_value_t = 96)]
        width: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Analytic vs finite-difference gradients for every parameter tensor.
    /// Uses the toy preset unless told otherwise.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        entries: usize,
        /// Fault injection: perturb this group's analytic gradient.
        #[arg(long)]
        corrupt_group: Option<String>,
        /// LWAT `21 × 778` joint regressor; the synthetic one by default.
        #[arg(long)]
        regressor: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Fit a dataset directory with momentum SGD and report the loss trace.
    /// Uses the toy preset unless told otherwise.
    Overfit {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        momentum: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        regressor: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Write the deterministic synthetic topology to a JSON file.
    MakeTopology {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write synthetic training samples (LWAT bundles).
    MakeDataset {
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        image_size: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Resolved config, validation warnings, parameter count and FLOPs summary.
    Report {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
}

fn load_config(args: &ConfigArgs, fallback: Preset, m: &mut ManifestBuilder) -> Result<ModelConfig, CliError> {
    let cfg = match &args.config {
        Some(path) => {
            m.input(path);
            ModelConfig::load(path)?
        }
        None => match args.preset.unwrap_or(fallback) {
            Preset::Default => ModelConfig::default(),
            Preset::Toy => ModelConfig::toy(),
        },
    };
    m.config_json(&cfg.to_json_pretty());
    m.loss_weights(cfg.loss_weights);
    Ok(cfg)
}

fn build_model(cfg: ModelConfig, weights: Option<&Path>, seed: u64, m: &mut ManifestBuilder) -> Result<Model, CliError> {
    let mut model = Model::from_config(cfg, seed)?;
    if let Some(path) = weights {
        m.input(path);
        let bundle = load_bundle(path).map_err(in_file(path))?;
        model.load_weights(&bundle).map_err(in_file(path))?;
    }
    Ok(model)
}

fn load_regressor(path: Option<&Path>, m: &mut ManifestBuilder) -> Result<JointRegressor, CliError> {
    match path {
        Some(p) => {
            m.input(p);
            let t = load_tensor(p).map_err(in_file(p))?;
            JointRegressor::new(t).map_err(in_file(p))
        }
        None => Ok(synthetic_regressor()),
    }
}

/// Reads an image tensor, or the `image` entry of a sample bundle.
fn load_image(path: &Path) -> Result<Tensor, CliError> {
    let mut magic = [0u8; 4];
    std::fs::File::open(path)
        .and_then(|mut f| std::io::Read::read_exact(&mut f, &mut magic))
        .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    if &magic == BUNDLE_MAGIC {
        let mut bundle = load_bundle(path).map_err(in_file(path))?;
        bundle
            .remove("image")
            .ok_or_else(|| CliError::validation(format!("{}: bundle has no `image` entry", path.display())))
    } else {
        load_tensor(path).map_err(in_file(path))
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::validation(format!("{}: {e}", dir.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T, m: &mut ManifestBuilder) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("outputs serialize");
    std::fs::write(path, text + "\n").map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    m.output(path);
    Ok(())
}

fn render<T: Serialize>(format: Format, value: &T, table: impl FnOnce() -> String) -> String {
    match format {
        Format::Json => serde_json::to_string_pretty(value).expect("outputs serialize") + "\n",
        Format::Table => table(),
    }
}

#[derive(Debug, Clone, Serialize)]
struct Versioned<'a, T: Serialize> {
    format_version: u32,
    #[serde(flatten)]
    body: &'a T,
}

fn versioned<T: Serialize>(body: &T) -> Versioned<'_, T> {
    Versioned {
        format_version: OUTPUT_FORMAT_VERSION,
        body,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MeshBounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub finite: bool,
}

fn bounds(t: &Tensor) -> MeshBounds {
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    for r in 0..t.shape()[0] {
        for (k, &v) in t.row(r).iter().enumerate() {
            min[k] = min[k].min(v);
            max[k] = max[k].max(v);
        }
    }
    MeshBounds {
        min,
        max,
        finite: t.is_finite(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ForwardSummary {
    pub image: Vec<usize>,
    pub vertex_path: Vec<usize>,
    pub levels: Vec<LevelDiagnostics>,
    pub left: MeshBounds,
    pub right: MeshBounds,
}

#[derive(Debug, Clone, Serialize)]
pub struct OverfitSummary {
    pub trace: FitTrace,
    pub ratio: f64,
    /// Protocol metrics of the fitted model on the training samples.
    pub evaluation: EvalMetrics,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConfigReport {
    pub config: ModelConfig,
    pub warnings: Vec<String>,
    pub parameter_tensors: usize,
    pub parameter_scalars: usize,
    pub topology_counts: Vec<usize>,
    pub flops_convention: String,
    pub total_flops: u64,
    pub image_part: u64,
    pub pose_part: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub variable: String,
    pub width: u64,
    pub scans: Vec<ComplexityScan>,
}

fn scan_table(scans: &[ComplexityScan]) -> String {
    let mut s = String::new();
    for scan in scans {
        s.push_str(&format!(
            "{} over {}: exponent {:.4} (whole op {:.4})\n",
            scan.op, scan.variable, scan.exponent, scan.full_op_exponent
        ));
        s.push_str(&format!("{:>8}  {:>16}  {:>16}\n", scan.variable, "flops", "whole_op_flops"));
        for ((k, f), w) in scan.sizes.iter().zip(&scan.flops).zip(&scan.full_op_flops) {
            s.push_str(&format!("{k:>8}  {f:>16}  {w:>16}\n"));
        }
    }
    s
}

/// Mean protocol metrics of `model` over `data`.
fn evaluate_samples(model: &Model, data: &[Sample], j: &JointRegressor) -> Result<EvalMetrics, CliError> {
    let mut total = EvalMetrics {
        mpjpe_mm: 0.0,
        mpvpe_mm: 0.0,
    };
    for s in data {
        let out = model.forward(&s.image)?;
        let gt = [
            HandMesh::new(Hand::Left, s.left.vertices.clone())?,
            HandMesh::new(Hand::Right, s.right.vertices.clone())?,
        ];
        let e = evaluate(&[out.left, out.right], &gt, j, &model.config.eval)?;
        total.mpjpe_mm += e.mpjpe_mm;
        total.mpvpe_mm += e.mpvpe_mm;
    }
    let n = data.len() as f64;
    Ok(EvalMetrics {
        mpjpe_mm: total.mpjpe_mm / n,
        mpvpe_mm: total.mpvpe_mm / n,
    })
}

/// Runs one command. `argv` is recorded verbatim in the manifest.
pub fn run(cli: Cli, argv: Vec<String>) -> Result<String, CliError> {
    match cli.command {
        Command::Init { cfg, seed, zero, out } => {
            let mut m = ManifestBuilder::new("init", argv);
            m.seed(seed);
            let config = load_config(&cfg, Preset::Default, &mut m)?;
            let mut model = Model::from_config(config, seed)?;
            if zero {
                model.weights = model.weights.zeros_like();
            }
            create_dir(&out)?;
            let wpath = out.join("weights.lwab");
            save_bundle(&wpath, &model.weights.to_bundle(), DType::F64)?;
            m.output(&wpath);
            let cpath = out.join("config.json");
            std::fs::write(&cpath, model.config.to_json_pretty() + "\n")
                .map_err(|e| CliError::validation(format!("{}: {e}", cpath.display())))?;
            m.output(&cpath);
            m.write(&out)?;
            Ok(format!(
                "wrote {} ({} tensors, {} scalars) and {}\n",
                wpath.display(),
                model.weights.names().len(),
                model.weights.num_scalars(),
                cpath.display()
            ))
        }

        Command::Forward {
            cfg,
            weights,
            input,
            seed,
            out,
            format,
        } => {
            let mut m = ManifestBuilder::new("forward", argv);
            m.seed(seed);
            let config = load_config(&cfg, Preset::Default, &mut m)?;
            let model = build_model(config, weights.as_deref(), seed, &mut m)?;
            m.input(&input);
            let image = load_image(&input)?;
            if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(CliError::validation(format!(
                    "{}: image values must lie in [0, 1]",
                    input.display()
                )));
            }
            let result = model.forward(&image).map_err(in_file(&input))?;
            for mesh in [&result.left, &result.right] {
                if !mesh.vertices.is_finite() {
                    return Err(CliError::numeric(format!("{} hand mesh is not finite", mesh.hand.name())));
                }
            }
            create_dir(&out)?;
            for mesh in [&result.left, &result.right] {
                let p = out.join(format!("{}.lwat", mesh.hand.name()));
                save_tensor(&p, &mesh.vertices, DType::F64)?;
                m.output(&p);
            }
            let summary = ForwardSummary {
                image: image.shape().to_vec(),
                vertex_path: result.vertex_path(),
                left: bounds(&result.left.vertices),
                right: bounds(&result.right.vertices),
                levels: result.levels,
            };
            write_json(&out.join("summary.json"), &versioned(&summary), &mut m)?;
            m.write(&out)?;
            Ok(render(format, &versioned(&summary), || {
                let mut s = format!(
                    "vertex path {:?}\n{:<6}{:>10}{:>14}{:>22}\n",
                    summary.vertex_path, "level", "vertices", "feature_map", "attn_row_sum_dev"
                );
                for l in &summary.levels {
                    s.push_str(&format!(
                        "{:<6}{:>10}{:>14}{:>22.3e}\n",
                        l.level,
                        l.vertices,
                        format!("{:?}", l.feature_map),
                        l.attention_max_row_sum_deviation
                    ));
                }
                for (name, b) in [("left", &summary.left), ("right", &summary.right)] {
                    s.push_str(&format!("{name}: min {:?} max {:?}\n", b.min, b.max));
                }
                s.push_str(&format!("meshes written to {}\n", out.display()));
                s
            }))
        }

        Command::Flops { cfg, sweep, out, format } => {
            let mut m = ManifestBuilder::new("flops", argv);
            let config = load_config(&cfg, Preset::Default, &mut m)?;
            if let Some(sweep) = sweep {
                let (var, range) = (&sweep[0], &sweep[1]);
                if var != "tokens" {
                    return Err(CliError::validation(format!("--sweep supports `tokens`, got {var:?}")));
                }
                let sizes = parse_sweep(range)?;
                let width = config.encoder.dim as u64;
                let scans = ["separable_self_attention", "cross_hand_attention"]
                    .iter()
                    .map(|op| complexity_scan(op, &sizes, width))
                    .collect::<Result<Vec<_>, _>>()?;
                let report = SweepReport {
                    variable: var.clone(),
                    width,
                    scans,
                };
                if let Some(dir) = &out {
                    create_dir(dir)?;
                    write_json(&dir.join("scan.json"), &versioned(&report), &mut m)?;
                    m.write(dir)?;
                }
                return Ok(render(format, &versioned(&report), || scan_table(&report.scans)));
            }
            let topology = load_configured_topology(&config)?;
            let report: FlopsReport = count_flops(&config, &topology)?;
            if let Some(dir) = &out {
                create_dir(dir)?;
                write_json(&dir.join("flops.json"), &versioned(&report), &mut m)?;
                std::fs::write(dir.join("flops.txt"), report.to_table())
                    .map_err(|e| CliError::validation(format!("{}: {e}", dir.display())))?;
                m.output(&dir.join("flops.txt"));
                m.write(dir)?;
            }
            Ok(render(format, &versioned(&report), || report.to_table()))
        }

        Command::Scan {
            op,
            sweep,
            width,
            out,
            format,
        } => {
            let mut m = ManifestBuilder::new("scan", argv);
            let scan = complexity_scan(&op, &parse_sweep(&sweep)?, width)?;
            if let Some(dir) = &out {
                create_dir(dir)?;
                write_json(&dir.join("scan.json"), &versioned(&scan), &mut m)?;
                m.write(dir)?;
            }
            Ok(render(format, &versioned(&scan), || scan_table(std::slice::from_ref(&scan))))
        }

        Command::Gradcheck {
            cfg,
            weights,
            seed,
            entries,
            corrupt_group,
            regressor,
            out,
            format,
        } => {
            let mut m = ManifestBuilder::new("gradcheck", argv);
            m.seed(seed);
            let config = load_config(&cfg, Preset::Toy, &mut m)?;
            let j = load_regressor(regressor.as_deref(), &mut m)?;
            let model = build_model(config, weights.as_deref(), seed, &mut m)?;
            let objective = Objective {
                regressor: &j,
                weights: model.config.loss_weights,
            };
            let opts = GradcheckOptions {
                seed,
                entries_per_group: entries,
                corrupt_group,
                ..Default::default()
            };
            let report: GradcheckReport = gradcheck(&model, &objective, &opts)?;
            if let Some(dir) = &out {
                create_dir(dir)?;
                write_json(&dir.join("gradcheck.json"), &versioned(&report), &mut m)?;
                m.write(dir)?;
            }
            let text = render(format, &versioned(&report), || report.to_table());
            if report.pass {
                Ok(text)
            } else {
                Err(CliError::numeric(format!(
                    "{text}gradient check failed for: {}",
                    report.failing().join(", ")
                )))
            }
        }

        Command::Overfit {
            cfg,
            weights,
            data,
            steps,
            lr,
            momentum,
            seed,
            regressor,
            out,
            format,
        } => {
            let mut m = ManifestBuilder::new("overfit", argv);
            m.seed(seed);
            let config = load_config(&cfg, Preset::Toy, &mut m)?;
            let j = load_regressor(regressor.as_deref(), &mut m)?;
            let mut model = build_model(config, weights.as_deref(), seed, &mut m)?;
            let samples = load_dataset(&data)?;
            let mut paths: Vec<PathBuf> = std::fs::read_dir(&data)
                .map_err(|e| CliError::validation(format!("{}: {e}", data.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "lwab"))
                .collect();
            paths.sort();
            for p in &paths {
                m.input(p);
            }
            let o = model.config.optimizer;
            let settings = SgdSettings {
                lr: lr.unwrap_or(o.lr),
                momentum: momentum.unwrap_or(o.momentum),
                steps: steps.unwrap_or(o.steps),
            };
            let objective = Objective {
                regressor: &j,
                weights: model.config.loss_weights,
            };
            let trace = sgd_fit(&mut model, &samples, &objective, settings)?;
            let evaluation = evaluate_samples(&model, &samples, &j)?;
            let summary = OverfitSummary {
                ratio: trace.ratio(),
                trace,
                evaluation,
            };
            create_dir(&out)?;
            write_json(&out.join("trace.json"), &versioned(&summary), &mut m)?;
            let wpath = out.join("weights.lwab");
            save_bundle(&wpath, &model.weights.to_bundle(), DType::F64)?;
            m.output(&wpath);
            m.write(&out)?;
            Ok(render(format, &versioned(&summary), || {
                format!(
                    "samples {}  steps {}  lr {}  momentum {}\ninitial loss {:.6}\nfinal loss   {:.6}\nratio        {:.6}\nMPJPE {:.3} mm  MPVPE {:.3} mm\n",
                    summary.trace.samples,
                    settings.steps,
                    settings.lr,
                    settings.momentum,
                    summary.trace.initial_loss(),
                    summary.trace.final_loss(),
                    summary.ratio,
                    summary.evaluation.mpjpe_mm,
                    summary.evaluation.mpvpe_mm
                )
            }))
        }

        Command::MakeTopology { seed, out } => {
            let mut m = ManifestBuilder::new("make-topology", argv);
            m.seed(seed);
            let h = synthesize_topology(seed);
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            save_topology(&out, &h)?;
            m.output(&out);
            let dir = out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
            m.write(dir)?;
            Ok(format!("wrote {} with level counts {:?}\n", out.display(), h.counts()))
        }

        Command::MakeDataset {
            count,
            seed,
            image_size,
            cfg,
            out,
        } => {
            let mut m = ManifestBuilder::new("make-dataset", argv);
            m.seed(seed);
            let size = match image_size {
                Some(s) => s,
                None => load_config(&cfg, Preset::Toy, &mut m)?.encoder.image_size,
            };
            if count == 0 || size == 0 {
                return Err(CliError::validation("--count and --image-size must be positive"));
            }
            let paths = make_dataset(&out, count, seed, size)?;
            for p in &paths {
                m.output(p);
            }
            m.write(&out)?;
            Ok(format!("wrote {count} samples ({size}×{size}) to {}\n", out.display()))
        }

        Command::Report { cfg, out, format } => {
            let mut m = ManifestBuilder::new("report", argv);
            let config = load_config(&cfg, Preset::Default, &mut m)?;
            let warnings = config.validate()?;
            let topology = load_configured_topology(&config)?;
            let flops = count_flops(&config, &topology)?;
            let model = Model::init(config.clone(), topology.clone(), 0)?;
            let report = ConfigReport {
                config,
                warnings,
                parameter_tensors: model.weights.names().len(),
                parameter_scalars: model.weights.num_scalars(),
                topology_counts: topology.counts(),
                flops_convention: flops.convention.clone(),
                total_flops: flops.total,
                image_part: flops.image_part,
                pose_part: flops.pose_part,
            };
            if let Some(dir) = &out {
                create_dir(dir)?;
                write_json(&dir.join("report.json"), &versioned(&report), &mut m)?;
                m.write(dir)?;
            }
            Ok(render(format, &versioned(&report), || {
                let mut s = String::new();
                for w in &report.warnings {
                    s.push_str(&format!("warning: {w}\n"));
                }
                s.push_str(&format!(
                    "parameters: {} tensors, {} scalars\ntopology: {:?}\n",
                    report.parameter_tensors, report.parameter_scalars, report.topology_counts
                ));
                s.push_str(&flops.to_table().lines().take(3).collect::<Vec<_>>().join("\n"));
                s.push('\n');
                s
            }))
        }
    }
}

/// Parses `argv` (program name first) and runs it.
pub fn run_args<I, S>(argv: I) -> Result<String, CliError>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let cli = Cli::try_parse_from(&argv).map_err(|e| CliError::validation(e.to_string()))?;
    run(cli, argv.into_iter().skip(1).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn core_errors_map_to_exit_codes() {
        let v = CliError::from(lwa_core::Error::Config("x".into()));
        assert_eq!(v.exit_code(), EXIT_VALIDATION);
        let n = CliError::from(lwa_core::Error::NonFinite("loss".into()));
        assert_eq!(n.exit_code(), EXIT_NUMERIC);
    }

    #[test]
    fn versioned_output_flattens_the_body() {
        #[derive(Serialize)]
        struct Body {
            a: u32,
        }
        let v = serde_json::to_value(versioned(&Body { a: 7 })).unwrap();
        assert_eq!(v, serde_json::json!({"format_version": OUTPUT_FORMAT_VERSION, "a": 7}));
    }

    #[test]
    fn bad_arguments_are_validation_errors() {
        let e = run_args(["lwa", "flops", "--format", "yaml"]).unwrap_err();
        assert_eq!(e.exit_code(), EXIT_VALIDATION);
        let e = run_args(["lwa", "flops", "--sweep", "heads", "64..512"]).unwrap_err();
        assert!(e.message.contains("tokens"));
    }

    #[test]
    fn bounds_cover_each_axis() {
        let t = Tensor::from_rows(&[vec![1.0, -2.0, 0.5], vec![-1.0, 3.0, 0.0]]).unwrap();
        let b = bounds(&t);
        assert_eq!(b.min, [-1.0, -2.0, 0.0]);
        assert_eq!(b.max, [1.0, 3.0, 0.5]);
        assert!(b.finite);
    }
}
