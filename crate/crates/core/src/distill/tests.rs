use std::sync::Arc;

use super::*;
use crate::classifier::{argmax, Classifier};
use crate::diffcore::{Tape, Tensor};
use crate::models::{init_mlp, Activation, Teacher};
use crate::synthworld::{make_world, Split, WorldSpec};

#[test]
fn erm_loss_examples() {
    assert!((erm_loss(&[0.25, 0.75], 1) - 0.2876820724517809).abs() < 1e-15);
    assert_eq!(erm_loss(&[1.0, 0.0], 0), 0.0);
}

#[test]
fn zero_probability_is_floored_and_counted() {
    let before = clamp_events();
    let v = erm_loss(&[1.0, 0.0], 1);
    assert!((v - 690.7755278982137).abs() < 1e-9);
    assert!(clamp_events() > before);
}

#[test]
fn kl_form_vanishes_at_the_teacher() {
    let t = [0.2, 0.5, 0.3];
    assert!(edrm_loss(&t, &t, EdrmForm::Kl).abs() < 1e-15);
    assert!((edrm_loss(&t, &t, EdrmForm::CrossEntropy) - entropy(&t)).abs() < 1e-15);
    assert!((combined_loss(&t, 1, &t) - (entropy(&t) + 0.5f64.ln().abs())).abs() < 1e-15);
}

fn logit_loss(z: &[f64], t: &[f64], form: EdrmForm) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
    let p: Vec<f64> = z.iter().map(|v| (v - m).exp() / s).collect();
    edrm_loss(&p, t, form)
}

#[test]
fn kl_and_cross_entropy_share_logit_gradients() {
    let z = [0.3, -1.1, 0.8, 0.05];
    let t = [0.1, 0.2, 0.6, 0.1];
    let h = 1e-6;
    for i in 0..z.len() {
        let g = |form| {
            let (mut a, mut b) = (z, z);
            a[i] += h;
            b[i] -= h;
            (logit_loss(&a, &t, form) - logit_loss(&b, &t, form)) / (2.0 * h)
        };
        assert!((g(EdrmForm::Kl) - g(EdrmForm::CrossEntropy)).abs() < 1e-10);
    }
}

#[test]
fn mixing_degenerate_cases() {
    let (x1, x2) = ([1.0, 2.0, 3.0], [-1.0, -2.0, -3.0]);
    let all = mask_mix_with(&x1, 0, &x2, 1, 2, &[true; 3]);
    assert_eq!(all.x, x1.to_vec());
    assert_eq!(all.soft_label, vec![1.0, 0.0]);
    let none = mask_mix_with(&x1, 0, &x2, 1, 2, &[false; 3]);
    assert_eq!(none.x, x2.to_vec());
    assert_eq!(none.soft_label, vec![0.0, 1.0]);
    let half = convex_mix_with(&x1, 0, &x2, 1, 2, 0.5);
    assert_eq!(half.x, vec![0.0; 3]);
    assert_eq!(half.soft_label, vec![0.5, 0.5]);
    let one = convex_mix_with(&x1, 0, &x2, 0, 2, 1.0);
    assert_eq!(one.x, x1.to_vec());
    assert_eq!(one.soft_label, vec![1.0, 0.0]);
}

#[test]
fn random_mixes_keep_soft_labels_normalized() {
    for s in 0..50 {
        let m = mask_mix(&[1.0, 2.0, 3.0, 4.0], 1, &[0.0; 4], 2, 3, s);
        assert!((m.soft_label.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let c = convex_mix(&[1.0, 2.0], 0, &[3.0, 4.0], 1, 2, s);
        let lam = c.soft_label[0];
        assert!((c.x[0] - (lam + 3.0 * (1.0 - lam))).abs() < 1e-12);
    }
}

fn separable_world() -> crate::synthworld::World {
    let mut spec = WorldSpec::celeba_toy(1);
    spec.class_scale = 3.0;
    spec.noise_std = 0.3;
    make_world(spec, 3).unwrap()
}

fn quick_cfg(mode: LossMode, seed: u64) -> TrainConfig {
    TrainConfig {
        loss_mode: mode,
        epochs: 15,
        batch_size: 64,
        base_lr: 1e-2,
        weight_decay: 1e-4,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn erm_fits_a_separable_problem() {
    let world = separable_world();
    for seed in 0..3 {
        let train = world.sample_split(Split::Train, 500, 100 + seed);
        let val = world.sample_split(Split::ValRestricted, 200, 200 + seed);
        let student = init_mlp::<f64>(&[2, 16, 2], Activation::Relu, seed).unwrap();
        let (m, rep) = train_student(student, &train, None, &val, &quick_cfg(LossMode::Erm, seed)).unwrap();
        let acc = train.examples().iter().filter(|e| argmax(&m.predict(&e.x)) == e.y).count() as f64
            / train.len() as f64;
        assert!(acc >= 0.99, "seed {seed}: {acc}");
        assert!(rep.train_erm_risk < rep.initial_loss);
    }
}

#[test]
fn initial_loss_is_near_log_classes() {
    let mut spec = WorldSpec::celeba_toy(1);
    spec.class_scale = 1.0;
    spec.spurious_scale = 1.0;
    spec.noise_std = 0.5;
    let world = make_world(spec, 3).unwrap();
    let train = world.sample_split(Split::Train, 300, 1);
    let val = world.sample_split(Split::ValRestricted, 100, 2);
    let mut cfg = quick_cfg(LossMode::Erm, 0);
    cfg.epochs = 1;
    for init in 0..5 {
        let student = init_mlp::<f64>(&[2, 16, 2], Activation::Tanh, init).unwrap();
        let (_, rep) = train_student(student, &train, None, &val, &cfg).unwrap();
        assert!((rep.initial_loss - 2f64.ln()).abs() < 0.2, "{}", rep.initial_loss);
    }
}

#[test]
fn edrm_approaches_teacher_entropy() {
    let mut spec = WorldSpec::celeba_toy(1);
    spec.noise_std = 0.8;
    let world = Arc::new(make_world(spec, 5).unwrap());
    let teacher = Teacher::exact(world.clone(), Split::Train);
    let train = world.sample_split(Split::Train, 1000, 11);
    let val = world.sample_split(Split::ValRestricted, 200, 12);
    let student = init_mlp::<f64>(&[2, 32, 2], Activation::Tanh, 4).unwrap();
    let mut cfg = quick_cfg(LossMode::Edrm, 4);
    cfg.epochs = 40;
    cfg.edrm_form = EdrmForm::CrossEntropy;
    let (_, rep) = train_student(student, &train, Some(&teacher), &val, &cfg).unwrap();
    let h: f64 = train.examples().iter().map(|e| entropy(&teacher.predict(&e.x))).sum::<f64>() / train.len() as f64;
    let risk = rep.train_edrm_risk.unwrap();
    assert!(risk >= h - 1e-9 && risk <= h + 0.1, "risk {risk} entropy {h}");
}

#[test]
fn training_is_reproducible_and_selection_is_argmax() {
    let world = separable_world();
    let train = world.sample_split(Split::Train, 300, 1);
    let val = world.sample_split(Split::ValRestricted, 100, 2);
    let student = init_mlp::<f64>(&[2, 8, 2], Activation::Relu, 1).unwrap();
    let mut cfg = quick_cfg(LossMode::Erm, 7);
    cfg.mix_mode = MixMode::Convex;
    let (m1, r1) = train_student(student.clone(), &train, None, &val, &cfg).unwrap();
    let (m2, r2) = train_student(student, &train, None, &val, &cfg).unwrap();
    assert_eq!(m1.flat_params(), m2.flat_params());
    assert_eq!(r1.to_text(), r2.to_text());
    let best = r1.epochs.iter().map(|e| e.val_restricted_acc).fold(f64::MIN, f64::max);
    let tied = r1.epochs.iter().filter(|e| e.val_restricted_acc == best);
    let lowest = tied.clone().map(|e| e.val_restricted_loss).fold(f64::INFINITY, f64::min);
    let first = tied.clone().find(|e| e.val_restricted_loss == lowest).unwrap().epoch;
    assert_eq!(r1.selected_epoch, first);
    assert_eq!(r1.best_val_acc(), best);
}

#[test]
fn distillation_without_teacher_is_rejected() {
    let world = separable_world();
    let train = world.sample_split(Split::Train, 50, 1);
    let val = world.sample_split(Split::ValRestricted, 20, 2);
    let student = init_mlp::<f64>(&[2, 4, 2], Activation::Relu, 1).unwrap();
    for mode in [LossMode::Edrm, LossMode::ErmPlusEdrm] {
        assert!(train_student(student.clone(), &train, None, &val, &quick_cfg(mode, 0)).is_err());
    }
    let empty = train.restrict(&Default::default(), Split::ValRestricted);
    assert!(train_student(student, &train, None, &empty, &quick_cfg(LossMode::Erm, 0)).is_err());
}

#[test]
fn batch_loss_on_tape_matches_pointwise_loss() {
    let mlp = init_mlp::<f64>(&[3, 5, 2], Activation::Tanh, 2).unwrap();
    let xs = vec![vec![0.1, -0.4, 1.0], vec![2.0, 0.3, -0.7]];
    let ys = [1usize, 0];
    let mut tape = Tape::new();
    let xv = tape.leaf(Tensor::from_columns(&xs));
    let (_, logits) = mlp.record(&mut tape, xv);
    let lp = tape.log_softmax(logits);
    let mut t = Tensor::zeros(2, 2);
    t.set(ys[0], 0, 1.0);
    t.set(ys[1], 1, 1.0);
    let tv = tape.leaf(t);
    let prod = tape.mul(tv, lp);
    let s = tape.sum(prod);
    tape.combine(&[(s, -0.5)], 0.0);
    let v = tape.forward().unwrap().item();
    let oracle = (erm_loss(&mlp.predict(&xs[0]), 1) + erm_loss(&mlp.predict(&xs[1]), 0)) / 2.0;
    assert!((v - oracle).abs() < 1e-12);
}

#[test]
fn grid_has_thirty_two_points() {
    assert_eq!(hparam_grid().len(), 32);
}
