//! Synthetic hands and images for desk-scale fitting.
//!
//! The template is a flattened capsule about 9 cm long, wound by a helix so
//! consecutive vertices sit a few millimeters apart, as on a real hand mesh. Samples apply seeded smooth deformations per hand; the right hand
//! is mirrored. Dataset samples are LWAT bundles with the entries `image`,
//! `left_gt`, `right_gt` and `joints` (`2 × 21 × 3`, left then right).

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::lwat::{load_bundle, save_bundle, Bundle, DType};
use crate::mesh::FULL_MESH_VERTICES;
use crate::metrics::{HandTarget, JointRegressor, NUM_JOINTS};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Helix turns over the template's length.
const TURNS: f64 = 26.0;

/// `778 × 3` template in meters.
pub fn template_mesh() -> Tensor {
    let n = FULL_MESH_VERTICES;
    let mut data = Vec::with_capacity(n * 3);
    for i in 0..n {
        let u = i as f64 / n as f64;
        let r = 0.035 * (0.6 + 0.4 * (PI * u).sin());
        let theta = 2.0 * PI * TURNS * u;
        data.extend([r * theta.cos(), 0.09 * (u - 0.5), 0.4 * r * theta.sin()]);
    }
    Tensor::new(vec![n, 3], data).expect("template shape")
}

pub fn synthetic_regressor() -> JointRegressor {
    JointRegressor::synthetic(&template_mesh()).expect("synthetic regressor is row-stochastic")
}

fn deform(template: &Tensor, rng: &mut SeededRng, mirror: bool) -> Tensor {
    let (n, _) = template.dims2().expect("rank 2");
    let s = rng.uniform(0.9, 1.1);
    let theta = rng.uniform(-0.3, 0.3);
    let t = [rng.uniform(-0.02, 0.02), rng.uniform(-0.02, 0.02), rng.uniform(-0.02, 0.02)];
    let amp = rng.uniform(0.0, 0.006);
    let k = 1.0 + rng.below(3) as f64;
    let phase = rng.uniform(0.0, 2.0 * PI);
    let (c, sn) = (theta.cos(), theta.sin());
    let mut out = Tensor::zeros(&[n, 3]);
    for i in 0..n {
        let u = i as f64 / n as f64;
        let p = template.row(i);
        let x = s * (c * p[0] - sn * p[1]);
        let y = s * (sn * p[0] + c * p[1]);
        let z = s * p[2] + amp * (2.0 * PI * k * u + phase).sin();
        let x = if mirror { -x } else { x };
        out.row_mut(i).copy_from_slice(&[x + t[0], y + t[1], z + t[2]]);
    }
    out
}

fn root_relative(v: &Tensor, j: &JointRegressor) -> Result<HandTarget> {
    let joints = j.regress(v)?;
    let root = joints.row(0).to_vec();
    let shift = |t: &Tensor| {
        let mut t = t.clone();
        let (n, _) = t.dims2().expect("rank 2");
        for i in 0..n {
            t.row_mut(i).iter_mut().zip(&root).for_each(|(x, r)| *x -= r);
        }
        t
    };
    Ok(HandTarget {
        vertices: shift(v),
        joints: shift(&joints),
    })
}

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `3 × S × S`, values in `[0, 1]`.
    pub image: Tensor,
    pub left: HandTarget,
    pub right: HandTarget,
}

impl Sample {
    pub fn synthetic(seed: u64, image_size: usize, j: &JointRegressor) -> Result<Self> {
        let mut rng = SeededRng::new(seed);
        let template = template_mesh();
        let left = root_relative(&deform(&template, &mut rng, false), j)?;
        let right = root_relative(&deform(&template, &mut rng, true), j)?;
        let mut img = Vec::with_capacity(3 * image_size * image_size);
        for _ in 0..3 {
            let fx = rng.uniform(0.5, 4.0) * 2.0 * PI / image_size as f64;
            let fy = rng.uniform(0.5, 4.0) * 2.0 * PI / image_size as f64;
            let ph = rng.uniform(0.0, 2.0 * PI);
            for y in 0..image_size {
                for x in 0..image_size {
                    img.push(0.5 + 0.5 * (fx * x as f64 + fy * y as f64 + ph).sin());
                }
            }
        }
        Ok(Self {
            image: Tensor::new(vec![3, image_size, image_size], img)?,
            left,
            right,
        })
    }

    pub fn to_bundle(&self) -> Result<Bundle> {
        let mut joints = self.left.joints.data().to_vec();
        joints.extend_from_slice(self.right.joints.data());
        let mut b = Bundle::new();
        b.insert("image".into(), self.image.clone());
        b.insert("left_gt".into(), self.left.vertices.clone());
        b.insert("right_gt".into(), self.right.vertices.clone());
        b.insert("joints".into(), Tensor::new(vec![2, NUM_JOINTS, 3], joints)?);
        Ok(b)
    }

    pub fn from_bundle(b: &Bundle) -> Result<Self> {
        let get = |name: &str| {
            b.get(name)
                .ok_or_else(|| Error::Format(format!("sample is missing entry {name:?}")))
        };
        if let Some(extra) = b.keys().find(|k| !["image", "left_gt", "right_gt", "joints"].contains(&k.as_str())) {
            return Err(Error::Format(format!("sample has unknown entry {extra:?}")));
        }
        let image = get("image")?.clone();
        image.dims3()?;
        if image.shape()[0] != 3 {
            return Err(Error::shape("sample.image", image.shape(), &[3, 0, 0]));
        }
        if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Format("sample.image values must lie in [0, 1]".into()));
        }
        let mesh = |name: &str| -> Result<Tensor> {
            let t = get(name)?;
            if t.shape() != [FULL_MESH_VERTICES, 3] {
                return Err(Error::shape("sample mesh", t.shape(), &[FULL_MESH_VERTICES, 3]));
            }
            Ok(t.clone())
        };
        let joints = get("joints")?;
        if joints.shape() != [2, NUM_JOINTS, 3] {
            return Err(Error::shape("sample.joints", joints.shape(), &[2, NUM_JOINTS, 3]));
        }
        let half = NUM_JOINTS * 3;
        Ok(Self {
            image,
            left: HandTarget {
                vertices: mesh("left_gt")?,
                joints: Tensor::new(vec![NUM_JOINTS, 3], joints.data()[..half].to_vec())?,
            },
            right: HandTarget {
                vertices: mesh("right_gt")?,
                joints: Tensor::new(vec![NUM_JOINTS, 3], joints.data()[half..].to_vec())?,
            },
        })
    }
}

/// Writes `count` samples as `sample_NNNN.lwab`; returns the paths.
pub fn make_dataset(dir: &Path, count: usize, seed: u64, image_size: usize) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let j = synthetic_regressor();
    (0..count)
        .map(|i| {
            let sample = Sample::synthetic(seed.wrapping_add(i as u64), image_size, &j)?;
            let path = dir.join(format!("sample_{i:04}.lwab"));
            save_bundle(&path, &sample.to_bundle()?, DType::F64)?;
            Ok(path)
        })
        .collect()
}

/// Loads every `*.lwab` file in `dir`, sorted by name.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Config(format!("dataset {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "lwab"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("dataset {} contains no .lwab samples", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            Sample::from_bundle(&load_bundle(p)?).map_err(|e| match e {
                Error::Format(m) => Error::Format(format!("{}: {m}", p.display())),
                other => other,
            })
        })
        .collect()
}
