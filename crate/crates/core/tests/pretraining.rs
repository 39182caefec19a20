//! Source-domain pretraining against constant baselines, on held-out source data.

use std::sync::Arc;

use dapa_core::body::{build_template, forward_kinematics, KinematicTree};
use dapa_core::datagen::{sample_domain, DomainSpec};
use dapa_core::metrics::mpjpe;
use dapa_core::regressor::{init_mean_params, unpack, RegressorConfig, RegressorParams};
use dapa_core::rng;
use dapa_core::trainer::{pretrain, quick_mpjpe, TrainConfig, TrainState};

#[test]
fn pretraining_beats_constant_predictors() {
    let tree = Arc::new(KinematicTree::default_17());
    let template = build_template(&tree, 3, 8).unwrap();
    let source = sample_domain(&DomainSpec::default_source(), &tree, &template).unwrap();
    let held = sample_domain(
        &DomainSpec {
            count: 500,
            seed: 11,
            ..DomainSpec::default_source()
        },
        &tree,
        &template,
    )
    .unwrap();

    let mean = init_mean_params(&source).unwrap();
    let (m_orient, m_pose, m_shape, _) = unpack(&mean, tree.num_joints());
    // Constant predictor: the source mean for every sample.
    let constant = forward_kinematics(&tree, &m_pose, &m_orient, &m_shape, [0.0; 3]).unwrap();
    let baseline = held
        .samples
        .iter()
        .map(|s| 1000.0 * mpjpe(&constant.joints, &s.eval_labels().unwrap().joints3d))
        .sum::<f64>()
        / held.len() as f64;

    let reg = RegressorParams::init(&RegressorConfig::default(), &tree, mean, &mut rng::stream(0, 0)).unwrap();
    let mut state = TrainState::new(reg, 1e-3);
    pretrain(&mut state, &tree, &source, &TrainConfig::pretrain(), &mut |_| {}).unwrap();
    let trained = quick_mpjpe(&state.regressor, &tree, &held, held.len()).unwrap();
    println!("held-out source MPJPE: pretrained {trained:.1}, constant {baseline:.1}");
    assert!(trained <= 0.5 * baseline, "{trained} vs {baseline}");
}
