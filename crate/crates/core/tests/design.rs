use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thermoforge::design::mlp::P_MAX;
use thermoforge::design::{CaseId, CaseProblem, CaseSpec, MeshSpec};

fn small(case: CaseId) -> CaseSpec {
    let mut spec = CaseSpec::desk(case);
    if case != CaseId::Three {
        spec.scenario.mesh = MeshSpec::Layered {
            substrate: [5, 5, 2],
            layers: vec![(3, 3)],
            element_size: [1e-3; 3],
        };
        spec.scenario.sim.n_steps = 200;
    }
    spec
}

/// Central difference of the loss along a random unit direction.
fn directional_check(problem: &CaseProblem, x: &[f64], h: f64, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d: Vec<f64> = x.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    d.iter_mut().for_each(|v| *v /= norm);
    let g = problem.evaluate(x, true).unwrap().grad.unwrap();
    let ad: f64 = g.iter().zip(&d).map(|(g, d)| g * d).sum();
    let shifted = |s: f64| -> Vec<f64> { x.iter().zip(&d).map(|(x, d)| x + s * d).collect() };
    let fd = (problem.evaluate(&shifted(h), false).unwrap().loss
        - problem.evaluate(&shifted(-h), false).unwrap().loss)
        / (2.0 * h);
    (ad, fd)
}

#[test]
fn case1_gradient_matches_directional_difference() {
    let problem = CaseProblem::new(small(CaseId::One)).unwrap();
    let (ad, fd) = directional_check(&problem, &problem.x0, 1e-5, 1);
    assert!(ad != 0.0);
    assert!((ad - fd).abs() <= 1e-4 * fd.abs(), "AD {ad:e} FD {fd:e}");
}

#[test]
fn case1_truth_is_a_zero_loss_point() {
    let problem = CaseProblem::new(small(CaseId::One)).unwrap();
    let at_truth = problem.evaluate(&[1.0; 5], true).unwrap();
    assert_eq!(at_truth.loss, 0.0);
    assert!(at_truth.grad.unwrap().iter().all(|g| *g == 0.0));
    assert!(problem.evaluate(&problem.x0, false).unwrap().loss > 0.0);
    assert_eq!(problem.physical(&[1.0; 5]), problem.truth);
}

#[test]
fn case2_gradient_matches_directional_difference() {
    let problem = CaseProblem::new(small(CaseId::Two)).unwrap();
    let (ad, fd) = directional_check(&problem, &problem.x0, 1e-5, 2);
    assert!(ad != 0.0);
    assert!((ad - fd).abs() <= 1e-4 * fd.abs(), "AD {ad:e} FD {fd:e}");
}

#[test]
fn case2_power_snapshot_stays_in_range() {
    let problem = CaseProblem::new(small(CaseId::Two)).unwrap();
    let eval = problem.evaluate(&problem.x0, false).unwrap();
    assert_eq!(eval.snapshot.len(), problem.sim.config.n_steps);
    assert!(eval.snapshot.iter().all(|p| (0.0..=P_MAX).contains(p)));
    assert_eq!(
        problem.truth,
        problem.spec.reference.sample(problem.sim.config.n_steps)
    );
}

#[test]
fn case3_gradient_matches_directional_difference() {
    let mut spec = small(CaseId::Three);
    spec.optimizer.seed = 4;
    let problem = CaseProblem::new(spec).unwrap();
    let eval = problem.evaluate(&problem.x0, false).unwrap();
    let trace = eval.depth.unwrap();
    assert!(trace.depths().iter().all(|d| (0.0..=3e-3).contains(d)));
    let (ad, fd) = directional_check(&problem, &problem.x0, 1e-5, 3);
    assert!(ad != 0.0);
    assert!((ad - fd).abs() <= 1e-4 * fd.abs(), "AD {ad:e} FD {fd:e}");
}

#[test]
fn case_specs_reject_bad_inputs() {
    let mut spec = small(CaseId::Three);
    spec.target_depth = 10e-3;
    assert!(CaseProblem::new(spec).is_err());
    let mut spec = small(CaseId::Three);
    spec.delta_clamp = 0.0;
    assert!(CaseProblem::new(spec).is_err());
    let mut spec = small(CaseId::One);
    spec.init_range = (-1.0, 1.0);
    assert!(CaseProblem::new(spec).is_err());
    let problem = CaseProblem::new(small(CaseId::One)).unwrap();
    assert!(problem.evaluate(&[1.0; 3], false).is_err());
}

#[test]
fn short_optimization_logs_every_iteration() {
    let mut spec = small(CaseId::One);
    spec.optimizer.iterations = 5;
    let problem = CaseProblem::new(spec).unwrap();
    let mut seen = Vec::new();
    let log = problem.optimize(|e| seen.push(e.iteration)).unwrap();
    assert_eq!(seen, (0..=5).collect::<Vec<_>>());
    assert_eq!(log.entries.len(), 6);
    assert!(log.final_loss() < log.initial_loss());
    let mut csv = Vec::new();
    log.write_loss_csv(&mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 7);
}
