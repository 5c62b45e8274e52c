mod common;

use octangle::svr::{svr_gradient, svr_objective, svr_train, SvrModel, SvrParams, SvrSolver, SvrTrainSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn one_point(x: f64, d: f64) -> SvrTrainSet {
    let mut set = SvrTrainSet::new(1);
    set.push(&[x], d).unwrap();
    set
}

fn random_set(n: usize, dim: usize, seed: u64) -> SvrTrainSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.3..0.3)).collect();
    let mut set = SvrTrainSet::new(dim);
    for _ in 0..n {
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let clean: f64 = 0.5 + x.iter().zip(&truth).map(|(a, b)| a * b).sum::<f64>();
        set.push(&x, (clean + rng.random_range(-0.2..0.2)).clamp(0.0, 1.0)).unwrap();
    }
    set
}

fn no_bias(c: f64, epsilon: f64, solver: SvrSolver) -> SvrParams {
    SvrParams { c, epsilon, tol: 1e-10, max_iter: 10_000, fit_bias: false, solver }
}

#[test]
fn one_dimensional_closed_form_without_margin() {
    // ½w² + (w − 0.5)² is minimised at w = 1/3.
    for solver in [SvrSolver::NewtonCg, SvrSolver::GradientDescent] {
        let (model, report) = svr_train(&one_point(1.0, 0.5), &no_bias(1.0, 0.0, solver)).unwrap();
        assert!((model.w[0] - 1.0 / 3.0).abs() < 1e-6, "{solver:?}: {}", model.w[0]);
        assert_eq!(model.bias(), 0.0);
        assert!(report.grad_inf_norm < 1e-6, "{solver:?}: {}", report.grad_inf_norm);
    }
}

#[test]
fn one_dimensional_closed_form_with_margin() {
    // Below d − ε the objective is ½w² + C(d − ε − w)², so w = 2C(d − ε)/(1 + 2C).
    let (d, eps, c): (f64, f64, f64) = (0.8, 0.1, 2.0);
    let expected = 2.0 * c * (d - eps) / (1.0 + 2.0 * c);
    assert!((expected - 0.56).abs() < 1e-15);
    let (model, _) = svr_train(&one_point(1.0, d), &no_bias(c, eps, SvrSolver::NewtonCg)).unwrap();
    assert!((model.w[0] - expected).abs() < 1e-8);
}

#[test]
fn targets_inside_the_tube_leave_zero_weights() {
    let mut set = SvrTrainSet::new(2);
    set.push(&[0.3, -0.2], 0.05).unwrap();
    set.push(&[-0.1, 0.4], 0.02).unwrap();
    let (model, report) = svr_train(&set, &no_bias(5.0, 0.1, SvrSolver::NewtonCg)).unwrap();
    assert_eq!(model.w, vec![0.0, 0.0, 0.0]);
    assert_eq!(report.iterations, 0);
}

#[test]
fn gradient_matches_central_differences() {
    let set = random_set(40, 5, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (c, eps) in [(1.0, 0.1), (0.3, 0.0), (4.0, 0.25)] {
        let w: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let analytic = svr_gradient(&w, &set, c, eps).unwrap();
        let f = |w: &[f64]| svr_objective(w, &set, c, eps).unwrap();
        let numeric = common::central_difference(&f, &w, 1e-6);
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() <= 1e-6 * a.abs().max(1.0), "C={c} eps={eps}: {a} vs {n}");
        }
    }
}

#[test]
fn accepted_steps_never_increase_the_objective() {
    let set = random_set(300, 12, 5);
    for solver in [SvrSolver::NewtonCg, SvrSolver::GradientDescent] {
        let params = SvrParams { c: 2.0, epsilon: 0.05, tol: 1e-8, max_iter: 400, fit_bias: true, solver };
        let (model, report) = svr_train(&set, &params).unwrap();
        assert!(report.objectives.windows(2).all(|p| p[1] <= p[0]), "{solver:?}");
        let last = *report.objectives.last().unwrap();
        assert_eq!(last, svr_objective(&model.w, &set, 2.0, 0.05).unwrap());
    }
}

#[test]
fn both_solvers_reach_the_same_optimum() {
    let set = random_set(200, 6, 9);
    let base = SvrParams { c: 1.0, epsilon: 0.1, tol: 1e-6, max_iter: 50_000, fit_bias: true, solver: SvrSolver::NewtonCg };
    let (a, ra) = svr_train(&set, &base).unwrap();
    let (b, rb) = svr_train(&set, &SvrParams { solver: SvrSolver::GradientDescent, ..base }).unwrap();
    assert!(ra.converged && rb.converged, "{} {} {} {}", ra.grad_inf_norm, rb.grad_inf_norm, ra.iterations, rb.iterations);
    assert!(ra.iterations < rb.iterations);
    for (x, y) in a.w.iter().zip(&b.w) {
        assert!((x - y).abs() < 1e-6);
    }
}

#[test]
fn training_is_thread_count_invariant() {
    let set = random_set(1500, 20, 13);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| svr_train(&set, &SvrParams::default()).unwrap())
    };
    let (a, ra) = run(1);
    let (b, rb) = run(3);
    assert_eq!(a, b);
    assert_eq!(ra, rb);
}

#[test]
fn model_bytes_round_trip_and_reject_corruption() {
    let (model, _) = svr_train(&random_set(50, 4, 1), &SvrParams::default()).unwrap();
    let bytes = model.to_bytes();
    assert_eq!(SvrModel::from_bytes(&bytes).unwrap(), model);
    assert!(SvrModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(SvrModel::from_bytes(&bad).is_err());
    let mut future = bytes;
    future[4] = 9;
    assert!(SvrModel::from_bytes(&future).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.osvr");
    model.save(&path).unwrap();
    assert_eq!(SvrModel::load(&path).unwrap(), model);
    assert_eq!(model.predict(&[0.0; 4]).unwrap(), model.bias());
    assert!(model.predict(&[0.0; 3]).is_err());
}

#[test]
fn invalid_inputs_are_rejected() {
    let mut set = SvrTrainSet::new(2);
    assert!(set.push(&[1.0], 0.5).is_err());
    assert!(set.push(&[1.0, 2.0], 1.5).is_err());
    assert!(set.push(&[f64::NAN, 2.0], 0.5).is_err());
    assert!(svr_train(&set, &SvrParams::default()).is_err());
    set.push(&[1.0, 2.0], 0.5).unwrap();
    assert!(svr_train(&set, &SvrParams { c: 0.0, ..SvrParams::default() }).is_err());
    assert!(svr_objective(&[0.0; 2], &set, 1.0, 0.1).is_err());
}
