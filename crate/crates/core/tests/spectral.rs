use faer::{Mat, Side};
use probe_core::net::{InitScheme, Mode, Network, NetworkSpec};
use probe_core::spectral::{
    dense_hessian, extreme_eigenvalues, hvp, power_max, HvpConfig, NetObjective, Objective, PowerConfig, Quadratic,
    DENSE_HESSIAN_LIMIT,
};
use probe_core::{Batch, ProbeError, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_batch(dim: usize, count: usize, classes: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..dim * count).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels = (0..count).map(|_| rng.random_range(0..classes)).collect();
    Batch::new(Tensor::new(Shape::flat(dim), count, data).unwrap(), labels, classes).unwrap()
}

/// Hessian from second differences of the loss value only.
fn loss_only_hessian(net: &Network, params: &[f64], batch: &Batch, h: f64) -> Mat<f64> {
    let stats = net.fresh_stats();
    let f = |p: &[f64]| net.loss(p, &stats, batch, Mode::Eval).unwrap();
    let n = params.len();
    let mut p = params.to_vec();
    let mut out = Mat::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut eval = |di: f64, dj: f64| {
                p[i] += di;
                p[j] += dj;
                let v = f(&p);
                p[i] -= di;
                p[j] -= dj;
                v
            };
            let v = (eval(h, h) - eval(h, -h) - eval(-h, h) + eval(-h, -h)) / (4.0 * h * h);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

fn tiny_mlp(seed: u64) -> (Network, Vec<f64>, Batch) {
    let net = Network::new(NetworkSpec::mlp(3, &[4], 3)).unwrap();
    let mut params = net.init(InitScheme::Default { seed }).values;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    params.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    let batch = random_batch(3, 12, 3, seed + 2);
    (net, params, batch)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

#[test]
fn hvp_is_exact_on_quadratic() {
    let vals = [2.0, 0.5, 0.0, 0.5, 1.0, -0.3, 0.0, -0.3, 4.0];
    let m = Mat::from_fn(3, 3, |i, j| vals[i * 3 + j]);
    let q = Quadratic { m: m.clone() };
    let phi = [0.3, -1.0, 2.0];
    let v = [1.0, 2.0, -0.5];
    let got = hvp(&q, &phi, &v, &HvpConfig::default()).unwrap();
    let want: Vec<f64> = (0..3).map(|i| (0..3).map(|j| m[(i, j)] * v[j]).sum()).collect();
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-8, "{g} vs {w}");
    }
}

#[test]
fn hvp_is_linear_in_direction() {
    let (net, params, batch) = tiny_mlp(3);
    let stats = net.fresh_stats();
    let obj = NetObjective { net: &net, stats: &stats, data: &batch };
    let cfg = HvpConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let u: Vec<f64> = (0..obj.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..obj.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let combo: Vec<f64> = u.iter().zip(&w).map(|(a, b)| 2.0 * a - 0.5 * b).collect();
    let hu = hvp(&obj, &params, &u, &cfg).unwrap();
    let hw = hvp(&obj, &params, &w, &cfg).unwrap();
    let hc = hvp(&obj, &params, &combo, &cfg).unwrap();
    let scale = hc.iter().map(|v| v.abs()).fold(0.0, f64::max);
    for i in 0..hc.len() {
        assert!((hc[i] - (2.0 * hu[i] - 0.5 * hw[i])).abs() <= 1e-4 * scale, "coord {i}");
    }
    assert_eq!(hvp(&obj, &params, &vec![0.0; obj.dim()], &cfg).unwrap(), vec![0.0; obj.dim()]);
}

#[test]
fn dense_hessian_matches_loss_only_oracle() {
    let (net, params, batch) = tiny_mlp(5);
    let stats = net.fresh_stats();
    let obj = NetObjective { net: &net, stats: &stats, data: &batch };
    let dense = dense_hessian(&obj, &params, &HvpConfig::default()).unwrap();
    let oracle = loss_only_hessian(&net, &params, &batch, 1e-4);
    let err = (&dense.sym - &oracle).norm_l2() / oracle.norm_l2();
    assert!(err < 1e-3, "relative error {err}");
    assert!(dense.symmetry_defect() < 1e-5, "defect {}", dense.symmetry_defect());
}

#[test]
fn power_iteration_matches_dense_extremes() {
    for seed in [1u64, 2, 3] {
        let (net, params, batch) = tiny_mlp(seed * 10);
        let stats = net.fresh_stats();
        let obj = NetObjective { net: &net, stats: &stats, data: &batch };
        let hcfg = HvpConfig::default();
        let dense = dense_hessian(&obj, &params, &hcfg).unwrap();
        let ev = dense.eigenvalues().unwrap();
        let (lo, hi) = (ev[0], *ev.last().unwrap());
        let pcfg = PowerConfig { iters: 5000, tol: 1e-10, seed, ..Default::default() };
        let (min, max) = extreme_eigenvalues(&obj, &params, &hcfg, &pcfg).unwrap();
        let spread = hi - lo;
        assert!(rel(max.eigenvalue, hi) < 1e-3, "seed {seed}: max {} vs {hi}", max.eigenvalue);
        assert!((min.eigenvalue - lo).abs() < 1e-3 * spread, "seed {seed}: min {} vs {lo}", min.eigenvalue);
    }
}

#[test]
fn negative_dominated_spectrum_reports_both_ends() {
    let q = Quadratic::diagonal(&[1.5, 0.2, -6.0, -1.0]);
    let cfg = PowerConfig { iters: 5000, ..Default::default() };
    let (min, max) = extreme_eigenvalues(&q, &[0.0; 4], &HvpConfig::default(), &cfg).unwrap();
    assert!((min.eigenvalue + 6.0).abs() < 1e-5, "{min:?}");
    assert!((max.eigenvalue - 1.5).abs() < 1e-5, "{max:?}");
}

#[test]
fn power_max_agrees_with_symmetric_eigen() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let b = Mat::from_fn(8, 8, |_, _| rng.random_range(-1.0..1.0));
    let m = &b * b.transpose();
    let top = *m.self_adjoint_eigenvalues(Side::Lower).unwrap().last().unwrap();
    let q = Quadratic { m };
    let est = power_max(
        |v: &[f64]| Ok(q.apply(v)),
        8,
        &PowerConfig { iters: 10_000, tol: 1e-10, ..Default::default() },
    )
    .unwrap();
    assert!(rel(est.eigenvalue, top) < 1e-8, "{} vs {top}", est.eigenvalue);
}

#[test]
fn non_convergence_is_reported_not_hidden() {
    let q = Quadratic::diagonal(&[1.0, 0.999_999]);
    let est = power_max(
        |v: &[f64]| Ok(q.apply(v)),
        2,
        &PowerConfig { iters: 3, tol: 1e-14, ..Default::default() },
    )
    .unwrap();
    assert_eq!(est.iterations, 3);
    assert!(!est.converged || est.residual <= 1e-14);
}

#[test]
fn oversized_dense_hessian_is_refused() {
    let q = Quadratic::diagonal(&vec![1.0; DENSE_HESSIAN_LIMIT + 1]);
    let phi = vec![0.0; DENSE_HESSIAN_LIMIT + 1];
    assert!(matches!(dense_hessian(&q, &phi, &HvpConfig::default()), Err(ProbeError::Refused(_))));
}
