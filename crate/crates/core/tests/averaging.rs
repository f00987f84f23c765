mod common;

use common::*;
use dipole_id::averaging::*;
use dipole_id::propagate::{evolve_state, Model, StepPolicy};
use dipole_id::qsys::{Pair, QuantumState};
use dipole_id::ramsey::psi2_target;
use nalgebra::DVector;
use num_complex::Complex64;
use rand::Rng;

#[test]
fn k_matches_time_average_on_every_pair() {
    for (spec, dipole) in [two_level(), ladder(), fully_coupled()] {
        for &pair in dipole.support() {
            let k = k_matrix(&spec, &dipole, pair).unwrap();
            let oracle = time_average_k(&spec, &dipole, pair, 200.0);
            let diff = max_abs(&(&k.matrix - &oracle));
            assert!(diff < 1e-3, "{pair}: |K − oracle| = {diff:e}");
            assert!(k.hermiticity_defect() < 1e-12);
        }
    }
}

#[test]
fn two_level_k_is_an_eighth_sigma_z() {
    let (spec, dipole) = two_level();
    let k = k_matrix(&spec, &dipole, Pair::new(0, 1).unwrap()).unwrap();
    assert!((k.matrix[(0, 0)].re - 0.125).abs() < 1e-14);
    assert!((k.matrix[(1, 1)].re + 0.125).abs() < 1e-14);
    assert!(k.matrix[(0, 1)].norm() < 1e-14);
}

#[test]
fn rotated_sigma_x_identity_at_random_times() {
    let (spec, _) = fully_coupled();
    let mut r = rng(11);
    let pairs = [Pair::new(0, 1).unwrap(), Pair::new(0, 2).unwrap(), Pair::new(1, 2).unwrap()];
    for &drive in &pairs {
        for &target in &pairs {
            for _ in 0..30 {
                let tau = r.random_range(0.0..500.0);
                let a = rotated_sigma_x(&spec, drive, target, tau);
                let b = rotated_sigma_x_closed_form(&spec, drive, target, tau);
                assert!(max_abs(&(a - b)) < 1e-12);
            }
        }
    }
}

#[test]
fn conjugation_deviation_is_first_order() {
    let (spec, dipole) = fully_coupled();
    for &pair in dipole.support() {
        let k = k_matrix(&spec, &dipole, pair).unwrap();
        let dev: Vec<f64> = [0.04, 0.02, 0.01]
            .iter()
            .map(|&xi| {
                let s: Vec<f64> = (0..=200).map(|j| j as f64 / 200.0 / (xi * xi)).collect();
                conjugation_check(&dipole, &k, xi, &s)
            })
            .collect();
        for w in dev.windows(2) {
            let ratio = w[0] / w[1];
            assert!((1.6..2.4).contains(&ratio), "{pair}: ratio {ratio}");
        }
    }
}

#[test]
fn averaged_propagator_tracks_full_propagation() {
    let (spec, dipole) = ladder();
    let policy = StepPolicy::default();
    for &pair in dipole.support() {
        let errs: Vec<f64> = [0.04, 0.02]
            .iter()
            .map(|&xi| averaging_error(&spec, &dipole, pair, xi, &policy).unwrap().error_over_xi)
            .collect();
        let spread = errs.iter().cloned().fold(0.0, f64::max) / errs.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(spread < 1.3, "{pair}: {errs:?}");
    }
}

#[test]
fn psi2_agrees_with_averaged_prediction_for_two_levels() {
    let (spec, dipole) = two_level();
    let pair = Pair::new(0, 1).unwrap();
    let k = k_matrix(&spec, &dipole, pair).unwrap();
    for xi in [0.04, 0.02] {
        let psi2 = psi2_target(&spec, &dipole, pair, 0, xi, &StepPolicy::default()).unwrap();
        let start = DVector::from_vec(vec![
            Complex64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0),
            Complex64::new(0.0, std::f64::consts::FRAC_1_SQRT_2),
        ]);
        let predicted = u_averaged(&spec, &dipole, &k, xi, 1.0 / (xi * xi)).matrix * start;
        let err = (psi2.as_vector() - predicted).norm();
        assert!(err < 2.0 * xi, "ξ = {xi}: {err}");
    }
}

#[test]
fn resonant_drive_agrees_with_fine_rk4() {
    let (spec, dipole) = two_level();
    let xi = 0.1;
    let drive = resonant_drive(&spec, &dipole, Pair::new(0, 1).unwrap(), xi).unwrap();
    let psi0 = QuantumState::basis(2, 0);
    let model = Model::new(&spec, &dipole).unwrap();
    let oracle = rk4(&spec, &dipole, &drive, psi0.as_vector(), 0.0, drive.horizon(), 2e-3);
    for (h, tol) in [(f64::INFINITY, 1e-3), (0.02, 1e-8)] {
        let policy = StepPolicy::default().with_max_step(h);
        let ours = evolve_state(&model, &drive, &psi0, 0.0, drive.horizon(), &policy, None).unwrap();
        let err = (ours.state.as_vector() - &oracle).norm();
        assert!(err < tol, "step cap {h}: {err:e}");
    }
}
