use probe_core::data::{synth_dataset, SynthConfig};
use probe_core::net::{InitScheme, LayerSpec, Mode, Network, NetworkSpec};
use probe_core::train::{
    adversarial_train_epoch, mu_heuristic, norm_bias_value_grad, pgd_attack, robust_accuracy, sgd_step, train,
    AttackConfig, EvalSpec, LrSchedule, Model, Regularizer, SgdState, TrainConfig,
};
use probe_core::{Batch, ProbeError, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit_box_batch(shape: Shape, count: usize, classes: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.size() * count).map(|_| rng.random_range(0.0..1.0)).collect();
    let labels = (0..count).map(|_| rng.random_range(0..classes)).collect();
    Batch::new(Tensor::new(shape, count, data).unwrap(), labels, classes).unwrap()
}

fn small_conv() -> Network {
    Network::new(NetworkSpec {
        input: Shape::image(2, 6, 6),
        layers: vec![
            LayerSpec::conv(2, 4, 3, 1),
            LayerSpec::batch_norm(4),
            LayerSpec::Relu,
            LayerSpec::MaxPool { window: 2 },
            LayerSpec::Flatten,
            LayerSpec::dense(36, 3),
        ],
        classes: 3,
    })
    .unwrap()
}

#[test]
fn pgd_stays_in_ball_and_box() {
    let net = small_conv();
    let params = net.init(InitScheme::HeUniform { seed: 1 }).values;
    let stats = net.fresh_stats();
    let batch = unit_box_batch(net.spec().input, 5, 3, 2);
    let cfg = AttackConfig::training();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let adv = pgd_attack(&net, &params, &stats, &batch, &cfg, Mode::Eval, &mut rng).unwrap();
    let mut moved = false;
    for (a, x) in adv.data.iter().zip(&batch.inputs.data) {
        assert!((a - x).abs() <= cfg.epsilon + 1e-15);
        assert!((0.0..=1.0).contains(a));
        moved |= a != x;
    }
    assert!(moved);
}

#[test]
fn zero_epsilon_returns_input_unchanged() {
    let net = small_conv();
    let params = net.init(InitScheme::HeUniform { seed: 4 }).values;
    let batch = unit_box_batch(net.spec().input, 3, 3, 5);
    let cfg = AttackConfig { epsilon: 0.0, ..AttackConfig::training() };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let adv = pgd_attack(&net, &params, &net.fresh_stats(), &batch, &cfg, Mode::Eval, &mut rng).unwrap();
    assert_eq!(adv, batch.inputs);
}

#[test]
fn single_step_equals_signed_gradient_oracle() {
    // Linear model: the input gradient of cross-entropy is Wᵀ(p − e_y)/N.
    let net = Network::new(NetworkSpec { input: Shape::flat(4), layers: vec![LayerSpec::dense(4, 3)], classes: 3 })
        .unwrap();
    let params = net.init(InitScheme::Default { seed: 6 }).values;
    let batch = unit_box_batch(Shape::flat(4), 4, 3, 7);
    let stats = net.fresh_stats();
    let (w, b) = (&params[..12], &params[12..]);
    let eps = 0.1;
    let cfg = AttackConfig { epsilon: eps, step_size: eps, steps: 1, random_start: false };
    let adv = pgd_attack(&net, &params, &stats, &batch, &cfg, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for n in 0..batch.len() {
        let x = batch.inputs.example(n);
        let z: Vec<f64> = (0..3).map(|k| (0..4).map(|j| w[k * 4 + j] * x[j]).sum::<f64>() + b[k]).collect();
        let mx = z.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        for j in 0..4 {
            let g: f64 = (0..3)
                .map(|k| w[k * 4 + j] * (e[k] / s - if k == batch.labels[n] { 1.0 } else { 0.0 }))
                .sum();
            let want = (x[j] + eps * g.signum()).clamp(0.0, 1.0);
            assert!((adv.example(n)[j] - want).abs() < 1e-15, "example {n} coord {j}");
        }
    }
}

#[test]
fn attack_does_not_raise_accuracy() {
    let data = synth_dataset(&SynthConfig { noise: 0.05, ..SynthConfig::blobs(3, 6, 40, 0.6, 8) }).unwrap();
    let to_box = |b: &Batch| {
        let mut b = b.clone();
        b.inputs.data.iter_mut().for_each(|v| *v = (0.5 + 0.5 * *v).clamp(0.0, 1.0));
        b
    };
    let (tr, te) = (to_box(&data.train), to_box(&data.test));
    let net = Network::new(NetworkSpec::mlp(6, &[16], 3)).unwrap();
    let mut model = Model::new(&net, net.init(InitScheme::HeUniform { seed: 9 }));
    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 32,
        schedule: LrSchedule::Constant { lr: 0.1 },
        momentum: 0.9,
        regularizer: Regularizer::None,
        augment_padding: None,
        attack: None,
        seed: 1,
    };
    train(&net, &mut model, &tr, &cfg, &EvalSpec::default(), |_, _| Ok(())).unwrap();
    let clean = net.accuracy(&model.params.values, &model.stats, &te).unwrap();
    let attack = AttackConfig { epsilon: 0.2, step_size: 0.05, steps: 10, random_start: false };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let robust = robust_accuracy(&net, &model.params.values, &model.stats, &te, &attack, 64, &mut rng).unwrap();
    assert!(clean > 0.8, "clean accuracy {clean}");
    assert!(robust <= clean, "robust {robust} clean {clean}");
}

#[test]
fn norm_bias_at_zero_radius_is_bitwise_weight_decay() {
    let net = Network::new(NetworkSpec::mlp(5, &[8], 3)).unwrap();
    let data = synth_dataset(&SynthConfig::blobs(3, 5, 20, 3.0, 1)).unwrap();
    let start = net.init(InitScheme::HeUniform { seed: 2 }).values;
    let stats = net.fresh_stats();
    let lambda = 5e-3;
    let run = |reg: Regularizer| {
        let mut p = start.clone();
        let mut state = SgdState::default();
        for _ in 0..100 {
            let g = net.loss_grad(&p, &stats, &data.train, Mode::Eval).unwrap().grad;
            sgd_step(&mut p, &g, &mut state, 0.05, 0.9, &reg).unwrap();
        }
        p
    };
    let wd = run(Regularizer::WeightDecay { lambda });
    let nb = run(Regularizer::NormBias { coefficient: lambda, mu_sq: 0.0 });
    assert!(wd.iter().zip(&nb).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn norm_bias_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let phi: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
    let sq: f64 = phi.iter().map(|v| v * v).sum();
    for mu_sq in [0.5 * sq, 2.0 * sq] {
        let (_, g) = norm_bias_value_grad(&phi, mu_sq);
        let h = 1e-6;
        for i in 0..phi.len() {
            let mut p = phi.clone();
            p[i] += h;
            let up = norm_bias_value_grad(&p, mu_sq).0;
            p[i] -= 2.0 * h;
            let down = norm_bias_value_grad(&p, mu_sq).0;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-6 * g[i].abs().max(1.0), "coord {i}: {fd} vs {}", g[i]);
        }
    }
}

#[test]
fn mu_heuristic_scales_squared_norm() {
    let phi = [3.0, 4.0];
    assert_eq!(mu_heuristic(&phi, 1.0).unwrap(), 25.0);
    assert_eq!(mu_heuristic(&phi, 1.2).unwrap(), 30.0);
    assert!(matches!(mu_heuristic(&phi, 0.5), Err(ProbeError::Argument(_))));
}

#[test]
fn zero_epsilon_adversarial_epoch_equals_natural_epoch() {
    let net = small_conv();
    let data = unit_box_batch(net.spec().input, 20, 3, 11);
    let base = TrainConfig {
        epochs: 1,
        batch_size: 8,
        schedule: LrSchedule::Constant { lr: 0.05 },
        momentum: 0.9,
        regularizer: Regularizer::WeightDecay { lambda: 5e-4 },
        augment_padding: Some(1),
        attack: None,
        seed: 4,
    };
    let adv_cfg = TrainConfig { attack: Some(AttackConfig { epsilon: 0.0, ..AttackConfig::training() }), ..base.clone() };
    let run = |cfg: &TrainConfig| {
        let mut model = Model::new(&net, net.init(InitScheme::HeUniform { seed: 5 }));
        let mut state = SgdState::default();
        let mut losses = Vec::new();
        for epoch in 0..3 {
            losses.push(adversarial_train_epoch(&net, &mut model, &mut state, &data, cfg, epoch, 0.05).unwrap());
        }
        (model, losses)
    };
    let (m0, l0) = run(&base);
    let (m1, l1) = run(&adv_cfg);
    assert_eq!(l0, l1);
    assert_eq!(m0, m1);
}

#[test]
fn named_schedules_follow_milestones() {
    let s = LrSchedule::named("regularizer").unwrap();
    let lrs: Vec<f64> = [0, 99, 100, 175, 225, 275].iter().map(|&e| s.lr(e).unwrap()).collect();
    let want = [0.1, 0.1, 0.01, 1e-3, 1e-4, 1e-5];
    for (a, b) in lrs.iter().zip(want) {
        assert!((a - b).abs() <= 1e-12 * b, "{a} vs {b}");
    }
    assert!(matches!(LrSchedule::named("nope"), Err(ProbeError::Config(_))));
}
