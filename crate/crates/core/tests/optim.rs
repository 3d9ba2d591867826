use bgg_core::optim::{adamw_step, AdamWConfig, OptimizerState};
use bgg_core::{BggError, Tensor};
use proptest::prelude::*;

fn no_decay(lr: f64) -> AdamWConfig {
    AdamWConfig {
        lr,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    }
}

#[test]
fn defaults_follow_the_training_recipe() {
    let c = AdamWConfig::default();
    assert_eq!(
        (c.lr, c.beta1, c.beta2, c.eps, c.weight_decay),
        (1e-3, 0.9, 0.999, 1e-8, 0.01)
    );
    c.validate().unwrap();
    assert!(AdamWConfig {
        beta1: 1.0,
        ..c.clone()
    }
    .validate()
    .is_err());
    assert!(AdamWConfig { lr: -1.0, ..c }.validate().is_err());
}

#[test]
fn first_unit_gradient_moves_by_the_learning_rate() {
    let mut p = Tensor::scalar(0.5).trainable();
    let mut st = OptimizerState::new(no_decay(0.1), &[&p]);
    adamw_step(&mut [&mut p], &[vec![1.0]], &mut st).unwrap();
    // m̂ = 1, v̂ = 1, so the update is lr / (1 + eps).
    assert!((p.data()[0] - (0.5 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    assert!((p.data()[0] - 0.4).abs() < 1e-8);
    assert_eq!(st.step, 1);
}

#[test]
fn zero_gradient_without_decay_is_a_no_op() {
    let mut p = Tensor::new([3], vec![1.0, -2.0, 3.0]).unwrap().trainable();
    let before = p.clone();
    let mut st = OptimizerState::new(no_decay(0.1), &[&p]);
    for _ in 0..3 {
        adamw_step(&mut [&mut p], &[vec![0.0; 3]], &mut st).unwrap();
    }
    assert_eq!(p, before);
}

#[test]
fn decay_is_decoupled_from_the_gradient() {
    let mut p = Tensor::scalar(2.0).trainable();
    let cfg = AdamWConfig {
        lr: 0.1,
        weight_decay: 0.5,
        ..AdamWConfig::default()
    };
    let mut st = OptimizerState::new(cfg, &[&p]);
    adamw_step(&mut [&mut p], &[vec![0.0]], &mut st).unwrap();
    assert!((p.data()[0] - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-15);
}

#[test]
fn frozen_tensors_and_their_moments_are_untouched() {
    let mut frozen = Tensor::new([2], vec![1.0, 2.0]).unwrap();
    let mut live = Tensor::new([2], vec![1.0, 2.0]).unwrap().trainable();
    let mut st = OptimizerState::new(AdamWConfig::default(), &[&frozen, &live]);
    adamw_step(
        &mut [&mut frozen, &mut live],
        &[vec![1.0, 1.0], vec![1.0, 1.0]],
        &mut st,
    )
    .unwrap();
    assert_eq!(frozen.data(), [1.0, 2.0]);
    assert_eq!(st.m[0], vec![0.0, 0.0]);
    assert_ne!(live.data(), [1.0, 2.0]);
}

#[test]
fn shape_mismatch_is_dimension_error() {
    let mut p = Tensor::zeros([3]).trainable();
    let mut st = OptimizerState::new(AdamWConfig::default(), &[&p]);
    let err = adamw_step(&mut [&mut p], &[vec![0.0; 2]], &mut st).unwrap_err();
    assert!(matches!(err, BggError::Dimension { .. }));
    assert!(adamw_step(&mut [&mut p], &[], &mut st).is_err());
    assert_eq!(st.step, 0);
}

/// Two AdamW steps in closed form: moments after two updates expanded
/// directly rather than iterated.
fn fused_two_steps(p0: f64, g1: f64, g2: f64, c: &AdamWConfig) -> f64 {
    let (b1, b2) = (c.beta1, c.beta2);
    let m1 = (1.0 - b1) * g1;
    let v1 = (1.0 - b2) * g1 * g1;
    let p1 = p0 * (1.0 - c.lr * c.weight_decay) - c.lr * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + c.eps);
    let m2 = (1.0 - b1) * (b1 * g1 + g2);
    let v2 = (1.0 - b2) * (b2 * g1 * g1 + g2 * g2);
    let mh = m2 / (1.0 - b1 * b1);
    let vh = v2 / (1.0 - b2 * b2);
    p1 * (1.0 - c.lr * c.weight_decay) - c.lr * mh / (vh.sqrt() + c.eps)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn two_steps_match_the_closed_form(
        p0 in -3.0f64..3.0,
        g1 in -5.0f64..5.0,
        g2 in -5.0f64..5.0,
        lr in 1e-4f64..0.5,
        wd in 0.0f64..0.1,
    ) {
        let cfg = AdamWConfig { lr, weight_decay: wd, ..AdamWConfig::default() };
        let mut p = Tensor::scalar(p0).trainable();
        let mut st = OptimizerState::new(cfg.clone(), &[&p]);
        adamw_step(&mut [&mut p], &[vec![g1]], &mut st).unwrap();
        adamw_step(&mut [&mut p], &[vec![g2]], &mut st).unwrap();
        prop_assert!((p.data()[0] - fused_two_steps(p0, g1, g2, &cfg)).abs() < 1e-12);
        prop_assert_eq!(st.step, 2);
    }

    #[test]
    fn first_step_size_is_bounded_by_lr(g in -100.0f64..100.0, lr in 1e-4f64..1.0) {
        prop_assume!(g.abs() > 1e-3);
        let mut p = Tensor::scalar(0.0).trainable();
        let mut st = OptimizerState::new(no_decay(lr), &[&p]);
        adamw_step(&mut [&mut p], &[vec![g]], &mut st).unwrap();
        prop_assert!(p.data()[0].abs() <= lr * (1.0 + 1e-9));
        prop_assert!(p.data()[0] * g < 0.0);
    }
}
