//! End-to-end behaviour of the model through the public API.

use lwa_core::config::ModelConfig;
use lwa_core::lwat::{load_bundle, save_bundle, DType};
use lwa_core::mesh::{save_topology, synthesize_topology, Hand, HandMesh};
use lwa_core::metrics::evaluate;
use lwa_core::model::{mirror_x, pipeline_forward, Model};
use lwa_core::synthetic::{load_dataset, make_dataset, synthetic_regressor, template_mesh};
use lwa_core::train::{sgd_fit, Objective, SgdSettings};
use lwa_core::{Error, SeededRng, Tensor};

fn image(size: usize, seed: u64) -> Tensor {
    let mut rng = SeededRng::new(seed);
    Tensor::uniform(&[3, size, size], 0.5, &mut rng).map(|v| v + 0.5)
}

#[test]
fn file_topology_matches_the_synthetic_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("topology.json");
    save_topology(&path, &synthesize_topology(0)).unwrap();
    let mut cfg = ModelConfig::toy();
    let synthetic = Model::from_config(cfg.clone(), 5).unwrap();
    cfg.topology = path.to_str().unwrap().into();
    let from_file = Model::from_config(cfg, 5).unwrap();
    let img = image(synthetic.config.encoder.image_size, 1);
    let (a, b) = (synthetic.forward(&img).unwrap(), from_file.forward(&img).unwrap());
    assert_eq!(a.left, b.left);
    assert_eq!(a.right, b.right);
}

#[test]
fn saved_weights_reproduce_the_forward_pass() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::from_config(ModelConfig::toy(), 8).unwrap();
    let path = dir.path().join("w.lwab");
    save_bundle(&path, &model.weights.to_bundle(), DType::F64).unwrap();
    let mut other = Model::from_config(ModelConfig::toy(), 99).unwrap();
    other.load_weights(&load_bundle(&path).unwrap()).unwrap();
    let img = image(model.config.encoder.image_size, 2);
    assert_eq!(pipeline_forward(&img, &model).unwrap(), pipeline_forward(&img, &other).unwrap());
}

#[test]
fn wrong_image_shape_is_rejected() {
    let model = Model::from_config(ModelConfig::toy(), 0).unwrap();
    let s = model.config.encoder.image_size;
    assert!(model.forward(&Tensor::zeros(&[3, s, s + 1])).is_err());
    assert!(model.forward(&Tensor::zeros(&[1, s, s])).is_err());
}

#[test]
fn fresh_model_starts_at_the_template() {
    // head features start small, so the bias dominates the initial mesh
    let model = Model::from_config(ModelConfig::toy(), 0).unwrap();
    let out = model.forward(&image(model.config.encoder.image_size, 0)).unwrap();
    let t = template_mesh();
    assert!(out.left.vertices.max_abs_diff(&t) < 0.05);
    assert!(out.right.vertices.max_abs_diff(&mirror_x(&t)) < 0.05);
}

#[test]
fn fitting_improves_protocol_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::toy();
    make_dataset(dir.path(), 1, 4, cfg.encoder.image_size).unwrap();
    let data = load_dataset(dir.path()).unwrap();
    let j = synthetic_regressor();
    let mut model = Model::from_config(cfg.clone(), 0).unwrap();
    let objective = Objective {
        regressor: &j,
        weights: cfg.loss_weights,
    };
    let metrics = |m: &Model| {
        let out = m.forward(&data[0].image).unwrap();
        let gt = [
            HandMesh::new(Hand::Left, data[0].left.vertices.clone()).unwrap(),
            HandMesh::new(Hand::Right, data[0].right.vertices.clone()).unwrap(),
        ];
        evaluate(&[out.left, out.right], &gt, &j, &cfg.eval).unwrap()
    };
    let before = metrics(&model);
    let settings = SgdSettings {
        lr: cfg.optimizer.lr,
        momentum: cfg.optimizer.momentum,
        steps: 150,
    };
    let trace = sgd_fit(&mut model, &data, &objective, settings).unwrap();
    let after = metrics(&model);
    assert!(trace.final_loss() < trace.initial_loss());
    assert!(after.mpvpe_mm < before.mpvpe_mm, "{before:?} -> {after:?}");
}

#[test]
fn huge_learning_rate_reports_divergence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::toy();
    make_dataset(dir.path(), 1, 0, cfg.encoder.image_size).unwrap();
    let data = load_dataset(dir.path()).unwrap();
    let j = synthetic_regressor();
    let mut model = Model::from_config(cfg.clone(), 0).unwrap();
    let objective = Objective {
        regressor: &j,
        weights: cfg.loss_weights,
    };
    let settings = SgdSettings {
        lr: 1e6,
        momentum: 0.9,
        steps: 50,
    };
    match sgd_fit(&mut model, &data, &objective, settings) {
        Err(Error::Diverged { .. }) => {}
        other => panic!("expected divergence, got {other:?}"),
    }
}
