//! Solver behavior measured over whole runs.

mod support;

use lensless_core::admm::{admm_solve, AdmmParams};
use lensless_core::forward::{caustic_psf, normalize_psf, Scene};
use lensless_core::{forward_measure, Dims, NoiseModel};
use support::*;

fn noisy_instance(side: usize, seed: u64) -> (lensless_core::Psf, lensless_core::Measurement) {
    let sensor = Dims::square(side).unwrap();
    let psf = normalize_psf(&caustic_psf(sensor, seed)).unwrap();
    let gt = random_image(sensor, &mut rng(seed));
    let b = forward_measure(&psf, &Scene::embed(&gt).unwrap(), &NoiseModel::gaussian(0.02, seed)).unwrap();
    (psf, b)
}

#[test]
fn objective_at_iteration_100_does_not_exceed_iteration_10() {
    for seed in 0..3 {
        let (psf, b) = noisy_instance(12, seed);
        let (_, trace) = admm_solve(&psf, &b, &AdmmParams::bounded(100), None).unwrap();
        assert_eq!(trace.len(), 100);
        let at = |i: usize| trace.records[i - 1].x_objective;
        assert!(at(100) <= at(10), "seed {seed}: {} > {}", at(100), at(10));
    }
}

#[test]
fn autotuned_run_reaches_fixed_penalty_residuals() {
    let (psf, b) = noisy_instance(4, 5);
    let fixed = AdmmParams::bounded(100);
    let tuned = AdmmParams { autotune: true, ..fixed };
    let (_, plain) = admm_solve(&psf, &b, &fixed, None).unwrap();
    let (x, auto) = admm_solve(&psf, &b, &tuned, None).unwrap();
    assert!(x.min() >= 0.0);
    let last = |t: &lensless_core::ResidualTrace| t.records.last().unwrap().primal.iter().sum::<f64>();
    assert!(last(&auto) <= last(&plain), "autotuned {} vs fixed {}", last(&auto), last(&plain));
    assert!(auto.records.iter().any(|r| r.mu != auto.records[0].mu));
}

#[test]
fn early_stopping_halts_at_first_iteration_below_tolerance() {
    let (psf, b) = noisy_instance(8, 2);
    let (_, full) = admm_solve(&psf, &b, &AdmmParams::bounded(100), None).unwrap();
    let worst = |i: usize| full.records[i].relative.iter().copied().fold(0.0, f64::max);
    let tol = worst(60) * (1.0 + 1e-9);
    let expected = (0..100).position(|i| worst(i) < tol).unwrap() + 1;
    let (_, trace) = admm_solve(&psf, &b, &AdmmParams { tol, ..AdmmParams::bounded(100) }, None).unwrap();
    assert_eq!(trace.len(), expected);
    assert!(expected <= 61);
    assert_eq!(trace.records[..], full.records[..expected]);
}
