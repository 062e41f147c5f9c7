use std::sync::Arc;

use gbp_core::factors::{
    finite_difference_jacobian, huber_energy, FactorParams, HuberParams, Identity, MeasurementFn,
    MeasurementModel, Square,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn jacobian_agrees(f: &dyn MeasurementFn, x: &DVector<f64>) -> Result<(), String> {
    let analytic = f.jacobian(x).map_err(|e| e.to_string())?;
    let numeric = finite_difference_jacobian(|p| f.eval(p), x).map_err(|e| e.to_string())?;
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        if (a - n).abs() > 1e-5 * a.abs().max(1.0) {
            return Err(format!("{f:?} at {x}: analytic {analytic} vs numeric {numeric}"));
        }
    }
    Ok(())
}

fn shipped_models() -> Vec<(FactorParams, Vec<usize>)> {
    vec![
        (FactorParams::Prior { mean: vec![0.0, 1.0], sigma_n: vec![vec![1.0, 0.2], vec![0.2, 0.5]] }, vec![2]),
        (FactorParams::Offset1d { d: 1.0, sigma: 0.1, huber_t: None }, vec![1]),
        (FactorParams::Smooth1d { sigma: 0.3, huber_t: None }, vec![1, 1]),
        (FactorParams::RelPos2d { dx: 1.0, dy: -1.0, sigma: 0.1 }, vec![2, 2]),
        (
            FactorParams::RangeBearing { range: 2.0, bearing: 0.3, sigma_r: 0.1, sigma_b: 0.03, huber_t: None },
            vec![2, 2],
        ),
        (
            FactorParams::CustomLinear {
                j: vec![vec![1.0, -2.0, 0.5]],
                d: vec![0.0],
                sigma_n: vec![vec![1.0]],
                huber_t: None,
            },
            vec![1, 2],
        ),
    ]
}

#[test]
fn jacobians_match_finite_differences_at_100_points() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
    let mut models: Vec<Arc<dyn MeasurementFn>> = shipped_models()
        .into_iter()
        .map(|(p, dims)| p.to_model(&dims).unwrap().function().clone())
        .collect();
    models.push(Arc::new(Square));
    for f in &models {
        let mut checked = 0;
        while checked < 100 {
            let x: DVector<f64> = DVector::from_fn(f.input_dim(), |_, _| rng.random_range(-5.0..5.0));
            // stay away from coincident range-bearing points
            if f.input_dim() == 4 && f.output_dim() == 2 && ((x[2] - x[0]).hypot(x[3] - x[1])) < 0.5 {
                continue;
            }
            jacobian_agrees(f.as_ref(), &x).unwrap();
            checked += 1;
        }
    }
}

fn spd(d: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0..1.0f64, d * d).prop_map(move |a| {
        let a = DMatrix::from_vec(d, d, a);
        &a * a.transpose() + DMatrix::identity(d, d) * 0.1
    })
}

fn robust_model() -> impl Strategy<Value = (MeasurementModel, f64)> {
    (1usize..=3)
        .prop_flat_map(|d| (spd(d), 0.1..5.0f64))
        .prop_map(|(cov, t)| {
            let d = cov.nrows();
            let m = MeasurementModel::new(
                Arc::new(Identity { dim: d }),
                DVector::zeros(d),
                cov,
                Some(HuberParams::new(t).unwrap()),
            )
            .unwrap();
            (m, t)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn energy_matching_identity((model, t) in robust_model(), r in prop::collection::vec(-20.0..20.0f64, 3)) {
        let r = DVector::from_fn(model.observed().len(), |i, _| r[i]);
        let scaled = model.robust_scale(&r);
        let quad = 0.5 * r.dot(&(scaled.clone().try_inverse().unwrap() * &r));
        let e = huber_energy(&r, model.noise_precision(), t);
        prop_assert!((quad - e).abs() <= 1e-12 * e.max(1.0), "quad {quad} vs huber {e}");

        // the scaled covariance only ever widens the noise
        let widened = &scaled - model.noise_cov();
        let min_eig = widened.symmetric_eigenvalues().min();
        prop_assert!(min_eig >= -1e-12 * model.noise_cov().amax());
    }
}

proptest! {
    #[test]
    fn huber_continuous_at_transition(t in 0.01..10.0f64) {
        let p = DMatrix::identity(1, 1);
        let below = huber_energy(&DVector::from_element(1, t * (1.0 - 1e-15)), &p, t);
        let at = huber_energy(&DVector::from_element(1, t), &p, t);
        prop_assert!((0.5 * t * t - at).abs() <= 1e-12 * at.max(1.0));
        prop_assert!((below - at).abs() <= 1e-12 * at.max(1.0));
    }

    #[test]
    fn huber_monotone_in_mahalanobis(t in 0.01..10.0f64, a in 0.0..30.0f64, b in 0.0..30.0f64) {
        let p = DMatrix::identity(1, 1);
        let (lo, hi) = (a.min(b), a.max(b));
        let e = |m: f64| huber_energy(&DVector::from_element(1, m), &p, t);
        prop_assert!(e(lo) <= e(hi));
    }

    #[test]
    fn affine_linearization_is_point_independent(
        j in prop::collection::vec(-3.0..3.0f64, 6),
        x0 in prop::collection::vec(-10.0..10.0f64, 3),
        x1 in prop::collection::vec(-10.0..10.0f64, 3),
    ) {
        let params = FactorParams::CustomLinear {
            j: vec![j[..3].to_vec(), j[3..].to_vec()],
            d: vec![0.5, -1.0],
            sigma_n: vec![vec![0.4, 0.1], vec![0.1, 0.3]],
            huber_t: None,
        };
        let model = params.to_model(&[1, 2]).unwrap();
        let a = model.linearize(&DVector::from_vec(x0)).unwrap().gaussian;
        let b = model.linearize(&DVector::from_vec(x1)).unwrap().gaussian;
        prop_assert!((&a.precision - &b.precision).amax() <= 1e-12 * a.precision.amax().max(1.0));
        prop_assert!((&a.info - &b.info).amax() <= 1e-12 * a.info.amax().max(1.0));
    }

    #[test]
    fn linearized_precision_is_psd_with_rank_at_most_m(
        x in prop::collection::vec(-5.0..5.0f64, 4),
    ) {
        let model = FactorParams::RangeBearing { range: 2.0, bearing: 0.3, sigma_r: 0.1, sigma_b: 0.03, huber_t: None }
            .to_model(&[2, 2])
            .unwrap();
        let x = DVector::from_vec(x);
        prop_assume!((x[2] - x[0]).hypot(x[3] - x[1]) > 0.5);
        let lam = model.linearize(&x).unwrap().gaussian.precision;
        prop_assert_eq!(lam.clone(), lam.transpose());
        let eig = lam.symmetric_eigenvalues();
        let scale = eig.amax();
        prop_assert!(eig.iter().all(|e| *e >= -1e-9 * scale));
        prop_assert!(eig.iter().filter(|e| e.abs() > 1e-9 * scale).count() <= 2);
    }
}
