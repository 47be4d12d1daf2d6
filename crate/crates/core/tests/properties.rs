//! Randomized invariants.

use lensless_core::admm::{
    admm_solve, psi_adjoint, psi_forward, soft_threshold_aniso, soft_threshold_vec, AdmmParams, GradField,
};
use lensless_core::forward::{normalize_psf, ColorImage, ForwardOperator, Scene};
use lensless_core::grid::{crop_center, inner_product, pad_center, Dims, RealGrid};
use lensless_core::io::{decode_array, encode_array, Dtype, GridArray};
use lensless_core::training::{adam_step, loss_eval, AdamState, LossSchedule};
use lensless_core::unrolled::{leadmm_forward, LeAdmmTheta};
use lensless_core::{forward_measure, NoiseModel, PrecomputedOperators};
use proptest::prelude::*;
use std::path::Path;

fn dims(max: usize) -> impl Strategy<Value = Dims> {
    (1..=max, 1..=max).prop_map(|(r, c)| Dims::new(r, c).unwrap())
}

fn grid(d: Dims, lo: f64, hi: f64) -> impl Strategy<Value = RealGrid> {
    proptest::collection::vec(lo..hi, d.len()).prop_map(move |v| RealGrid::new(d, v).unwrap())
}

fn grid_any(max: usize) -> impl Strategy<Value = RealGrid> {
    dims(max).prop_flat_map(|d| grid(d, -10.0, 10.0))
}

fn psf(max: usize) -> impl Strategy<Value = lensless_core::Psf> {
    dims(max)
        .prop_flat_map(|d| grid(d, 0.0, 1.0))
        .prop_filter("nonzero", |g| g.max() > 0.0)
        .prop_map(|g| normalize_psf(&g).unwrap())
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn convolution_adjoint(p in psf(6), seed in any::<u64>()) {
        let op = ForwardOperator::new(&p).unwrap();
        let d = op.padded_dims();
        let mut state = seed;
        let mut next = || { state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5 };
        let x = RealGrid::from_fn(d, |_, _| next()).unwrap();
        let y = RealGrid::from_fn(d, |_, _| next()).unwrap();
        let lhs = inner_product(&op.apply_h(&x).unwrap(), &y).unwrap();
        let rhs = inner_product(&x, &op.apply_h_adjoint(&y).unwrap()).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1e-12));
    }

    #[test]
    fn crop_pad_adjoint(x in grid_any(8), extra in (0usize..5, 0usize..5)) {
        let s = x.dims();
        let p = Dims::new(s.rows + extra.0, s.cols + extra.1).unwrap();
        let padded = pad_center(&x, p).unwrap();
        prop_assert_eq!(&crop_center(&padded, s).unwrap(), &x);
        prop_assert!(close(padded.sum_squares(), x.sum_squares(), 1e-15));
    }

    #[test]
    fn psi_adjoint_identity(x in grid_any(7), seed in 0.0f64..1.0) {
        let d = x.dims();
        let gx = x.map(|v| (v * 1.7 + seed).sin()).unwrap();
        let gy = x.map(|v| (v * 0.3 - seed).cos()).unwrap();
        let px = psi_forward(&x);
        let lhs = inner_product(&px.gx, &gx).unwrap() + inner_product(&px.gy, &gy).unwrap();
        let rhs = inner_product(&x, &psi_adjoint(&GradField::new(gx, gy).unwrap()).unwrap()).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1.0));
        prop_assert_eq!(psi_adjoint(&GradField::zeros(d)).unwrap(), RealGrid::zeros(d));
    }

    #[test]
    fn shrinkage_reduces_magnitude(gx in grid(Dims::new(3, 4).unwrap(), -5.0, 5.0),
                                   gy in grid(Dims::new(3, 4).unwrap(), -5.0, 5.0),
                                   kappa in 0.0f64..3.0) {
        let g = GradField::new(gx, gy).unwrap();
        let iso = soft_threshold_vec(&g, kappa).unwrap();
        for i in 0..12 {
            let (a, b) = (g.gx.values()[i], g.gy.values()[i]);
            let (c, d) = (iso.gx.values()[i], iso.gy.values()[i]);
            let m = (a * a + b * b).sqrt();
            let n = (c * c + d * d).sqrt();
            prop_assert!((n - (m - kappa).max(0.0)).abs() < 1e-12);
        }
        let aniso = soft_threshold_aniso(&g, kappa).unwrap();
        for (o, z) in aniso.gx.values().iter().zip(g.gx.values()) {
            prop_assert!(o.abs() <= z.abs() && o * z >= 0.0);
        }
    }

    #[test]
    fn solver_output_nonnegative(p in psf(5), iters in 0usize..6, sigma in 0.0f64..0.1) {
        let s = p.sensor_dims();
        let gt = ColorImage::new(std::array::from_fn(|c| RealGrid::from_fn(s, |r, k| ((r * 3 + k * 5 + c) % 7) as f64 / 7.0).unwrap())).unwrap();
        let b = forward_measure(&p, &Scene::embed(&gt).unwrap(), &NoiseModel::gaussian(sigma, 3)).unwrap();
        let (scene, _) = admm_solve(&p, &b, &AdmmParams::bounded(iters), None).unwrap();
        prop_assert!(scene.planes.iter().all(|pl| pl.values().iter().all(|v| *v >= 0.0)));
        let ops = PrecomputedOperators::new(&p).unwrap();
        let out = leadmm_forward(&LeAdmmTheta::initial(2), &ops, &b).unwrap();
        prop_assert!(out.scene.planes.iter().all(|pl| pl.values().iter().all(|v| *v >= 0.0)));
        prop_assert!(b.min() >= 0.0);
    }

    #[test]
    fn unrolled_forward_is_deterministic(p in psf(4)) {
        let s = p.sensor_dims();
        let gt = ColorImage::new(std::array::from_fn(|c| RealGrid::filled(s, 0.2 * c as f64 + 0.1))).unwrap();
        let b = forward_measure(&p, &Scene::embed(&gt).unwrap(), &NoiseModel::gaussian(0.05, 9)).unwrap();
        let ops = PrecomputedOperators::new(&p).unwrap();
        let theta = LeAdmmTheta::initial(3);
        let a = leadmm_forward(&theta, &ops, &b).unwrap();
        let again = leadmm_forward(&theta, &ops, &b).unwrap();
        prop_assert_eq!(&a.scene, &again.scene);
        let replay = a.tape.replay().unwrap();
        prop_assert_eq!(replay.records(), a.tape.records());
    }

    #[test]
    fn grid_file_round_trip(x in grid_any(9)) {
        let array = GridArray::from_grid(&x);
        let bytes = encode_array(&array, Dtype::F64).unwrap();
        let (back, dtype) = decode_array(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(dtype, Dtype::F64);
        prop_assert_eq!(back.into_grid().unwrap(), x);
    }

    #[test]
    fn adam_keeps_second_moment_nonnegative(g in proptest::collection::vec(-1e3f64..1e3, 1..8), steps in 1usize..5) {
        let mut params = vec![0.5; g.len()];
        let mut state = AdamState::new(g.len(), 1e-2);
        for _ in 0..steps {
            let (p, s) = adam_step(&params, &g, &state).unwrap();
            prop_assert!(s.v.iter().all(|v| *v >= 0.0));
            let (p2, s2) = adam_step(&params, &g, &state).unwrap();
            prop_assert_eq!(&p, &p2);
            prop_assert_eq!(&s, &s2);
            params = p;
            state = s;
        }
    }

    #[test]
    fn loss_is_nonnegative(a in grid(Dims::new(10, 9).unwrap(), 0.0, 1.0),
                           b in grid(Dims::new(10, 9).unwrap(), 0.0, 1.0),
                           epoch in 0usize..10) {
        let x = ColorImage::new([a.clone(), b.clone(), a.clone()]).unwrap();
        let y = ColorImage::new([b.clone(), a.clone(), a.clone()]).unwrap();
        let schedule = LossSchedule::for_epochs(10);
        let valid = Dims::new(8, 8).unwrap();
        let (loss, _) = loss_eval(&x, &y, valid, &schedule, epoch).unwrap();
        prop_assert!(loss >= 0.0);
        let (same, grad) = loss_eval(&x, &x, valid, &schedule, epoch).unwrap();
        prop_assert!(same.abs() < 1e-15);
        prop_assert!(grad.planes.iter().all(|p| p.values().iter().all(|v| v.abs() < 1e-15)));
    }
}
