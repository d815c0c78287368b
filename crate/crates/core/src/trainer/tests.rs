use super::*;
use crate::datagen::{generate, GenConfig};
use crate::losses::{bce_per_class, weighted_train_loss, LossMatrix, WeightMatrix};
use crate::models::{classifier_forward, weightnet_forward};

fn tiny_problem(weighting: fn(WeightNetConfig) -> Weighting) -> (Problem, ParamSet, ParamSet, Batch, Batch) {
    let classifier = ClassifierConfig {
        input_dim: 5,
        hidden_sizes: vec![6],
        num_classes: 3,
        seed: 11,
    };
    let net = WeightNetConfig {
        num_classes: 3,
        hidden_sizes: vec![4],
        scalar_mode: false,
        seed: 12,
    };
    let theta = classifier.init_params();
    let phi = net.init_params();
    let ds = generate(&GenConfig {
        num_classes: 3,
        dim: 5,
        num_instances: 30,
        zipf_s: 0.5,
        target_ir: None,
        cooccur_p: 0.3,
        noise_sigma: 0.3,
        scene_size: 10,
        seed: 4,
    })
    .unwrap();
    let batch = Batch::gather(&ds, &[0, 1, 2, 3, 4, 5]);
    let meta = Batch::gather(&ds, &(6..30).collect::<Vec<_>>());
    let problem = Problem {
        classifier,
        weighting: weighting(net),
    };
    (problem, theta, phi, batch, meta)
}

fn weighted_loss_at(problem: &Problem, theta: &ParamSet, phi: &ParamSet, batch: &Batch) -> f64 {
    let p = classifier_forward(&problem.classifier, theta, &batch.x).unwrap();
    let l = bce_per_class(&batch.y, &p).unwrap();
    let w = match &problem.weighting {
        Weighting::Learned(net) => weightnet_forward(net, phi, &l).unwrap(),
        _ => WeightMatrix::new(Matrix::filled(l.matrix().rows(), l.matrix().cols(), 1.0)).unwrap(),
    };
    weighted_train_loss(&w, &l).unwrap()
}

#[test]
fn zero_alpha_pseudo_update_is_identity() {
    let (problem, theta, phi, batch, _) = tiny_problem(Weighting::Learned);
    let out = problem.pseudo_update(&theta, Some(&phi), &batch, 0.0).unwrap();
    assert_eq!(out, theta);
}

#[test]
fn zero_weights_freeze_pseudo_update() {
    let (problem, theta, mut phi, batch, _) = tiny_problem(Weighting::Learned);
    let net = problem.weighting.weightnet().unwrap().clone();
    let last = net.layer_sizes().len() - 2;
    for v in phi.segment_mut(&format!("layer{last}.bias")).unwrap() {
        *v = -1e4;
    }
    let out = problem.pseudo_update(&theta, Some(&phi), &batch, 0.5).unwrap();
    let diff = out.add_scaled(&theta, -1.0).unwrap();
    assert!(diff.max_abs() <= 1e-9, "{}", diff.max_abs());
}

#[test]
fn pseudo_update_descends() {
    let (problem, theta, phi, batch, _) = tiny_problem(Weighting::Learned);
    let before = weighted_loss_at(&problem, &theta, &phi, &batch);
    let after = weighted_loss_at(&problem, &problem.pseudo_update(&theta, Some(&phi), &batch, 1e-6).unwrap(), &phi, &batch);
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn zero_beta_keeps_phi() {
    let (problem, theta, phi, batch, meta) = tiny_problem(Weighting::Learned);
    let mut opt = SgdMomentum::new(0.0, 0.9, 0.01);
    let u = problem.meta_update_phi(&theta, &phi, &batch, &meta, 0.1, &mut opt).unwrap();
    assert_eq!(u.phi, phi);
}

#[test]
fn zero_alpha_gives_zero_hypergradient() {
    let (problem, theta, phi, batch, meta) = tiny_problem(Weighting::Learned);
    let mut opt = SgdMomentum::new(0.1, 0.0, 0.01);
    let u = problem.meta_update_phi(&theta, &phi, &batch, &meta, 0.0, &mut opt).unwrap();
    assert_eq!(u.hypergrad.max_abs(), 0.0);
    // only weight decay moves phi
    let expected = phi.add_scaled(&phi, -0.1 * 0.01).unwrap();
    assert_eq!(u.phi, expected);
}

#[test]
fn meta_step_descends_meta_loss() {
    let (problem, theta, phi, batch, meta) = tiny_problem(Weighting::Learned);
    let stats = class_stats(&meta.y).unwrap();
    let mut opt = SgdMomentum::plain(1e-6);
    let u = problem.meta_update_phi(&theta, &phi, &batch, &meta, 0.5, &mut opt).unwrap();
    let before = problem.meta_loss_through_step(&theta, &phi, &batch, &meta, &stats, 0.5).unwrap();
    let after = problem.meta_loss_through_step(&theta, &u.phi, &batch, &meta, &stats, 0.5).unwrap();
    assert!((before - u.meta_loss).abs() < 1e-12);
    assert!(after <= before, "{after} > {before}");
}

#[test]
fn meta_batch_missing_class_errors() {
    let (problem, theta, phi, batch, meta) = tiny_problem(Weighting::Learned);
    let mut y = meta.y.clone();
    for r in 0..y.rows() {
        y.set(r, 2, 0.0);
    }
    let meta = Batch { x: meta.x, y };
    let mut opt = SgdMomentum::plain(0.1);
    assert!(matches!(
        problem.meta_update_phi(&theta, &phi, &batch, &meta, 0.1, &mut opt),
        Err(Error::MissingClass { class: 2 })
    ));
}

#[test]
fn final_update_matches_pseudo_with_same_phi() {
    let (problem, theta, phi, batch, _) = tiny_problem(Weighting::Learned);
    let pseudo = problem.pseudo_update(&theta, Some(&phi), &batch, 0.3).unwrap();
    let (real, _) = problem
        .final_update_theta(&theta, Some(&phi), &batch, &mut SgdMomentum::plain(0.3))
        .unwrap();
    assert_eq!(pseudo, real);
}

#[test]
fn final_update_descends() {
    let (problem, theta, phi, batch, _) = tiny_problem(Weighting::Learned);
    let before = weighted_loss_at(&problem, &theta, &phi, &batch);
    let (next, _) = problem
        .final_update_theta(&theta, Some(&phi), &batch, &mut SgdMomentum::plain(1e-6))
        .unwrap();
    assert!(weighted_loss_at(&problem, &next, &phi, &batch) < before);
}

#[test]
fn perfect_predictions_give_zero_step() {
    // output bias pushes every probability onto the upper clamp and labels are
    // all 1, so losses and gradients are at the clamp residual of 1e-12
    let (problem, mut theta, _, batch, _) = tiny_problem(|_| Weighting::Uniform);
    let last = problem.classifier.layer_sizes().len() - 2;
    for v in theta.segment_mut(&format!("layer{last}.bias")).unwrap() {
        *v = 1e3;
    }
    let batch = Batch {
        y: Matrix::filled(batch.y.rows(), batch.y.cols(), 1.0),
        x: batch.x,
    };
    let (next, losses) = problem
        .final_update_theta(&theta, None, &batch, &mut SgdMomentum::plain(0.5))
        .unwrap();
    assert!(losses.data().iter().all(|&l| l <= 2e-12));
    assert!(next.add_scaled(&theta, -1.0).unwrap().max_abs() <= 1e-12);
}

#[test]
fn per_instance_weighting_shares_a_weight_per_row() {
    let (problem, theta, _, batch, _) = tiny_problem(|n| Weighting::LearnedPerInstance(WeightNetConfig { scalar_mode: true, ..n }));
    let net = problem.weighting.weightnet().unwrap();
    let phi = net.init_params();
    let tape = Tape::new();
    let l = LossMatrix::new(Matrix::from_rows(&[vec![0.1, 0.2, 0.9], vec![1.0, 1.0, 1.0]]).unwrap()).unwrap();
    let lv = tape.constant(l.matrix().clone());
    let w = problem.weighting.weights_var(&tape, &numerics::constants(&tape, &phi), lv).unwrap();
    let w = tape.value(w);
    for r in 0..2 {
        assert!(w.row(r).iter().all(|&v| v == w.get(r, 0)));
    }
    let _ = (theta, batch);
}

#[test]
fn static_weights_have_unit_mean() {
    let net = WeightNetConfig::new(3, 0);
    let Weighting::PerClass(w) = weighting_for(Strategy::StaticInvfreq, &net, &[100, 10, 1]).unwrap() else {
        panic!("expected per-class weights");
    };
    let mean = w.iter().sum::<f64>() / 3.0;
    assert!((mean - 1.0).abs() < 1e-12);
    assert!((w[2] / w[0] - 100.0).abs() < 1e-9);
    assert!(matches!(
        weighting_for(Strategy::StaticInvfreq, &net, &[3, 0]),
        Err(Error::MissingClass { class: 1 })
    ));
}

#[test]
fn strategy_names_round_trip() {
    for s in Strategy::ALL {
        assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
        assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{s}\""));
    }
    assert!("adamw".parse::<Strategy>().is_err());
}

fn small_dataset() -> Dataset {
    generate(&GenConfig {
        num_classes: 4,
        dim: 6,
        num_instances: 120,
        zipf_s: 1.0,
        target_ir: None,
        cooccur_p: 0.3,
        noise_sigma: 0.3,
        scene_size: 10,
        seed: 9,
    })
    .unwrap()
}

fn small_configs(strategy: Strategy, epochs: usize) -> (ClassifierConfig, WeightNetConfig, TrainerConfig) {
    let classifier = ClassifierConfig {
        input_dim: 6,
        hidden_sizes: vec![8],
        num_classes: 4,
        seed: 1,
    };
    let net = WeightNetConfig {
        num_classes: 4,
        hidden_sizes: vec![8],
        scalar_mode: false,
        seed: 2,
    };
    let cfg = TrainerConfig {
        alpha: 0.1,
        batch_size: 16,
        epochs,
        strategy,
        seed: 3,
        ..TrainerConfig::default()
    };
    (classifier, net, cfg)
}

#[test]
fn zero_epochs_keep_initialisation() {
    let ds = small_dataset();
    let (c, n, cfg) = small_configs(Strategy::MlMwn, 0);
    let out = train(&ds, &c, &n, &cfg).unwrap();
    assert_eq!(out.state.theta, c.init_params());
    assert_eq!(out.state.phi, Some(n.init_params()));
    assert!(out.state.history.is_empty());
}

#[test]
fn training_is_deterministic_for_every_strategy() {
    let ds = small_dataset();
    for s in Strategy::ALL {
        let (c, n, cfg) = small_configs(s, 2);
        let a = train(&ds, &c, &n, &cfg).unwrap();
        let b = train(&ds, &c, &n, &cfg).unwrap();
        assert_eq!(a.state, b.state, "{s}");
        // 108 training instances in batches of 16, final partial batch kept
        assert_eq!(a.state.step, 2 * 7);
        assert!(a.state.history.windows(2).all(|w| w[0].step < w[1].step));
        assert_eq!(a.state.history.iter().all(|h| h.meta_loss.is_some()), s.is_meta());
    }
}

#[test]
fn hypergradient_spot_check_passes_in_training() {
    let ds = small_dataset();
    let (c, n, mut cfg) = small_configs(Strategy::MlMwn, 1);
    cfg.hypergrad_check_every = 1;
    train(&ds, &c, &n, &cfg).unwrap();
}

#[test]
fn divergence_keeps_last_good_state() {
    let ds = small_dataset();
    let (c, n, mut cfg) = small_configs(Strategy::Unweighted, 3);
    cfg.alpha = 1e300;
    let err = train(&ds, &c, &n, &cfg).unwrap_err();
    let TrainError::Diverged { step, last_good } = err else {
        panic!("expected divergence, got {err}");
    };
    assert_eq!(last_good.step + 1, step);
    assert!(last_good.theta.is_finite());
}

#[test]
fn mismatched_dimensions_are_rejected() {
    let ds = small_dataset();
    let (mut c, n, cfg) = small_configs(Strategy::Unweighted, 1);
    c.input_dim = 7;
    assert!(matches!(train(&ds, &c, &n, &cfg), Err(TrainError::Failed(Error::Shape { .. }))));
}

#[test]
fn evaluation_ignores_phi() {
    let ds = small_dataset();
    let (pool, test) = split_test_scenes(&ds, 0.25, 0).unwrap();
    let (c, n, cfg) = small_configs(Strategy::MlMwn, 1);
    let spec = EvalSpec {
        k_values: vec![1, 5],
        constraints: crate::eval::Constraint::ALL.to_vec(),
    };
    let (mut outcome, report, records) = run(&ds, &pool, &test, &c, &n, &cfg, &spec).unwrap();
    assert_eq!(records.len(), test.len());
    assert_eq!(report.summary.len(), 6);
    assert_eq!(report.weightnet.as_deref(), Some("C-8-C"));
    outcome.state.phi = None;
    let (again, _) = evaluate(&ds, &test, &c, &n, &cfg, &outcome, &spec).unwrap();
    assert_eq!(again, report);
    assert!(outcome.split.train.iter().chain(&outcome.split.meta).all(|i| pool.contains(i)));
}
