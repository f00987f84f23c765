mod common;

use common::*;
use dipole_id::propagate::*;
use dipole_id::qsys::QuantumState;
use nalgebra::DMatrix;
use num_complex::Complex64;
use proptest::prelude::*;

#[test]
fn rwa_pi_pulse_transfers_population() {
    let (spec, dipole) = two_level();
    let model = Model::new(&spec, &dipole).unwrap();
    for xi in [0.04, 0.02] {
        let duration = std::f64::consts::PI / xi;
        let control = ControlWaveform::new(
            duration,
            vec![Segment::Resonant { start: 0.0, duration, amplitude: model.field_for(xi), frequency: 1.0 }],
        )
        .unwrap();
        let p = population(&spec, &model, &control, &StepPolicy::default()).unwrap();
        assert!(1.0 - p < 2.0 * xi, "ξ = {xi}: P = {p}");
        let oracle = rk4(&spec, &dipole, &control, QuantumState::basis(2, 0).as_vector(), 0.0, duration, 5e-3);
        assert!((p - oracle[1].norm_sqr()).abs() < 1e-6);
    }
}

#[test]
fn random_controls_match_rk4() {
    let mut r = rng(3);
    for (spec, dipole) in [ladder(), four_level()] {
        let model = Model::new(&spec, &dipole).unwrap();
        for _ in 0..3 {
            let c = random_control(&spec, &dipole, &mut r);
            let psi0 = QuantumState::basis(spec.dimension(), 0);
            let ours = evolve_state(&model, &c, &psi0, 0.0, c.horizon(), &StepPolicy::default().with_max_step(0.01), None)
                .unwrap();
            let oracle = rk4(&spec, &dipole, &c, psi0.as_vector(), 0.0, c.horizon(), 2e-3);
            let err = (ours.state.as_vector() - oracle).norm();
            assert!(err < 1e-8, "{err:e}");
        }
    }
}

#[test]
fn zero_field_population_is_kronecker() {
    let (spec, dipole) = ladder();
    let model = Model::new(&spec, &dipole).unwrap();
    let p = population(&spec, &model, &ControlWaveform::zero(37.0), &StepPolicy::default()).unwrap();
    assert_eq!(p, 0.0);
    let same = dipole_id::qsys::SystemSpec::new(vec![0.0, 0.4, 1.0], 1, 1).unwrap();
    let p = population(&same, &model, &ControlWaveform::zero(37.0), &StepPolicy::default()).unwrap();
    assert!((p - 1.0).abs() < 1e-15);
}

#[test]
fn long_horizon_stays_unitary() {
    let (spec, dipole) = ladder();
    let model = Model::new(&spec, &dipole).unwrap();
    let xi = 0.02;
    let drive = dipole_id::averaging::resonant_drive(&spec, &dipole, dipole.support()[1], xi).unwrap();
    let u = propagator(&model, &drive, 0.0, drive.horizon(), &StepPolicy::default()).unwrap();
    assert!(u.unitarity_defect() <= UNITARITY_TOL);
    let ev = evolve_state(&model, &drive, &QuantumState::basis(3, 0), 0.0, drive.horizon(), &StepPolicy::default(), None)
        .unwrap();
    assert!(ev.max_norm_drift <= 1e-10);
}

fn control_strategy() -> impl Strategy<Value = (u64, f64)> {
    (any::<u64>(), 0.05f64..0.95)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn concatenation_and_norm((seed, frac) in control_strategy()) {
        let (spec, dipole) = four_level();
        let model = Model::new(&spec, &dipole).unwrap();
        let c = random_control(&spec, &dipole, &mut rng(seed));
        let policy = StepPolicy::default();
        let mid = frac * c.horizon();
        let psi0 = QuantumState::basis(4, 0);
        let whole = evolve_state(&model, &c, &psi0, 0.0, c.horizon(), &policy, None).unwrap();
        let first = evolve_state(&model, &c, &psi0, 0.0, mid, &policy, None).unwrap();
        let second = evolve_state(&model, &c, &first.state, mid, c.horizon(), &policy, None).unwrap();
        // the split point need not be a grid point, so only the scheme error is shared
        prop_assert!((whole.state.as_vector() - second.state.as_vector()).norm() < 1e-4);
        prop_assert!(whole.max_norm_drift <= 1e-10);

        let u1 = propagator(&model, &c, 0.0, mid, &policy).unwrap();
        let u2 = propagator(&model, &c, mid, c.horizon(), &policy).unwrap();
        prop_assert!(u1.unitarity_defect() <= UNITARITY_TOL);
        prop_assert!(u2.unitarity_defect() <= UNITARITY_TOL);
    }

    #[test]
    fn composition_at_segment_boundaries(seed in any::<u64>()) {
        let (spec, dipole) = ladder();
        let model = Model::new(&spec, &dipole).unwrap();
        let c = random_control(&spec, &dipole, &mut rng(seed));
        let policy = StepPolicy::default();
        let b = c.segments()[0].end();
        let u = propagator(&model, &c, 0.0, c.horizon(), &policy).unwrap().matrix;
        let ua = propagator(&model, &c, 0.0, b, &policy).unwrap().matrix;
        let ub = propagator(&model, &c, b, c.horizon(), &policy).unwrap().matrix;
        prop_assert!(max_abs_diff(&(ub * ua), &u) < 1e-9);
    }

    #[test]
    fn global_phase_does_not_change_population(seed in any::<u64>(), phase in 0.0f64..6.3) {
        let (spec, dipole) = ladder();
        let model = Model::new(&spec, &dipole).unwrap();
        let c = random_control(&spec, &dipole, &mut rng(seed));
        let policy = StepPolicy::default();
        let psi0 = QuantumState::basis(3, 0);
        let rotated = QuantumState::new(psi0.as_vector() * Complex64::from_polar(1.0, phase)).unwrap();
        let a = evolve_state(&model, &c, &psi0, 0.0, c.horizon(), &policy, None).unwrap().state.populations();
        let b = evolve_state(&model, &c, &rotated, 0.0, c.horizon(), &policy, None).unwrap().state.populations();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-13);
        }
    }
}

#[test]
fn zero_field_propagator_is_diagonal_phase() {
    let (spec, dipole) = four_level();
    let model = Model::new(&spec, &dipole).unwrap();
    let u = propagator(&model, &ControlWaveform::zero(12.5), 2.0, 12.5, &StepPolicy::default()).unwrap();
    let e = spec.normalized_energies();
    let expected = DMatrix::from_fn(4, 4, |i, j| if i == j { Complex64::from_polar(1.0, -e[i] * 10.5) } else { Complex64::new(0.0, 0.0) });
    assert!(max_abs_diff(&u.matrix, &expected) < 1e-14);
}
