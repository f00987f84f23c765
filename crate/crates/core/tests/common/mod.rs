#![allow(dead_code)]

use dipole_id::propagate::{ControlWaveform, Segment};
use dipole_id::qsys::{DipoleMatrix, Pair, SystemSpec};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn two_level() -> (SystemSpec, DipoleMatrix) {
    let spec = SystemSpec::new(vec![0.0, 1.0], 0, 1).unwrap();
    let dipole = DipoleMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
    (spec, dipole)
}

/// E = (0, 0.4, 1), μ12 = 1, μ23 = 0.8; measure |3⟩ starting from |1⟩.
pub fn ladder() -> (SystemSpec, DipoleMatrix) {
    let spec = SystemSpec::new(vec![0.0, 0.4, 1.0], 0, 2).unwrap();
    let dipole = DipoleMatrix::from_rows(&[
        vec![0.0, 1.0, 0.0],
        vec![1.0, 0.0, 0.8],
        vec![0.0, 0.8, 0.0],
    ])
    .unwrap();
    (spec, dipole)
}

/// Ladder energies with all three couplings present.
pub fn fully_coupled() -> (SystemSpec, DipoleMatrix) {
    let spec = SystemSpec::new(vec![0.0, 0.4, 1.0], 0, 2).unwrap();
    let dipole = DipoleMatrix::from_rows(&[
        vec![0.0, 1.0, 0.5],
        vec![1.0, 0.0, 0.8],
        vec![0.5, 0.8, 0.0],
    ])
    .unwrap();
    (spec, dipole)
}

pub fn four_level() -> (SystemSpec, DipoleMatrix) {
    let spec = SystemSpec::new(vec![0.0, 0.27, 0.61, 1.0], 0, 3).unwrap();
    let dipole = DipoleMatrix::from_rows(&[
        vec![0.0, 1.0, 0.3, 0.0],
        vec![1.0, 0.0, 0.7, 0.2],
        vec![0.3, 0.7, 0.0, 0.9],
        vec![0.0, 0.2, 0.9, 0.0],
    ])
    .unwrap();
    (spec, dipole)
}

/// Random bounded control: a sampled block, a gap, then a resonant burst on
/// a random support pair. Amplitudes are in input units.
pub fn random_control(spec: &SystemSpec, dipole: &DipoleMatrix, rng: &mut ChaCha8Rng) -> ControlWaveform {
    let unit = spec.h0_norm() / dipole.scale();
    let dt = rng.random_range(0.2..0.6);
    let count = rng.random_range(20..60);
    let amplitudes: Vec<f64> = (0..count).map(|_| unit * rng.random_range(-0.3..0.3)).collect();
    let sampled_end = dt * count as f64;
    let gap = rng.random_range(0.0..3.0);
    let pair = dipole.support()[rng.random_range(0..dipole.support_len())];
    let duration = rng.random_range(10.0..30.0);
    let start = sampled_end + gap;
    let segments = vec![
        Segment::Sampled { start: 0.0, dt, amplitudes },
        Segment::Resonant {
            start,
            duration,
            amplitude: unit * rng.random_range(0.05..0.2),
            frequency: spec.transition_frequency(pair.k, pair.l).abs(),
        },
    ];
    ControlWaveform::new(start + duration + rng.random_range(0.0..2.0), segments).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn hamiltonian(spec: &SystemSpec, dipole: &DipoleMatrix, field: f64) -> DMatrix<Complex64> {
    let e = spec.normalized_energies();
    let kappa = dipole.scale() / spec.h0_norm();
    DMatrix::from_fn(e.len(), e.len(), |i, j| {
        let d = if i == j { e[i] } else { 0.0 };
        Complex64::new(d - field * kappa * dipole.normalized()[(i, j)], 0.0)
    })
}

/// Classical RK4 on iψ' = H(τ)ψ with the continuous field, step at most `h`,
/// restarted at every sample and segment boundary so jumps never fall inside a step.
pub fn rk4(
    spec: &SystemSpec,
    dipole: &DipoleMatrix,
    control: &ControlWaveform,
    psi0: &DVector<Complex64>,
    ta: f64,
    tb: f64,
    h: f64,
) -> DVector<Complex64> {
    let mut cuts = vec![ta, tb];
    for seg in control.segments() {
        cuts.push(seg.start());
        cuts.push(seg.end());
        if let Segment::Sampled { start, dt, amplitudes } = seg {
            cuts.extend((1..amplitudes.len()).map(|j| start + j as f64 * dt));
        }
    }
    cuts.retain(|&t| t >= ta && t <= tb);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-12);

    let c = |x: f64| Complex64::new(x, 0.0);
    let mut psi = psi0.clone();
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        // evaluate the field strictly inside the piece
        let mid_field = control.field_at(0.5 * (a + b));
        // the closed interval matters: field_at is half-open and the last stage lands on b
        let piece = control.segments().iter().find(|s| 0.5 * (a + b) >= s.start() && 0.5 * (a + b) < s.end());
        let field = |t: f64| -> f64 {
            match piece {
                Some(&Segment::Resonant { start, amplitude, frequency, .. }) => amplitude * (frequency * (t - start)).cos(),
                _ => mid_field,
            }
        };
        let rhs = |t: f64, psi: &DVector<Complex64>| -> DVector<Complex64> {
            hamiltonian(spec, dipole, field(t)) * psi * Complex64::new(0.0, -1.0)
        };
        let n = ((b - a) / h).ceil().max(1.0) as usize;
        let step = (b - a) / n as f64;
        for j in 0..n {
            let t = a + j as f64 * step;
            let k1 = rhs(t, &psi);
            let k2 = rhs(t + step / 2.0, &(&psi + &k1 * c(step / 2.0)));
            let k3 = rhs(t + step / 2.0, &(&psi + &k2 * c(step / 2.0)));
            let k4 = rhs(t + step, &(&psi + &k3 * c(step)));
            psi += (k1 + k2 * c(2.0) + k3 * c(2.0) + k4) * c(step / 6.0);
        }
    }
    psi
}

/// Zero-mean oscillating part F(τ) of cos(ω'_lk τ)·e^{iH'_0τ}μ'e^{−iH'_0τ},
/// built directly from matrices.
pub fn oscillating_part(spec: &SystemSpec, dipole: &DipoleMatrix, pair: Pair, tau: f64) -> DMatrix<Complex64> {
    let e = spec.normalized_energies();
    let w = spec.transition_frequency(pair.l, pair.k);
    let n = e.len();
    let mu = dipole.normalized();
    let c = dipole.entry(pair);
    DMatrix::from_fn(n, n, |a, b| {
        let rotated = Complex64::from_polar(mu[(a, b)], (e[a] - e[b]) * tau) * (w * tau).cos();
        let secular = if (a, b) == (pair.l, pair.k) || (a, b) == (pair.k, pair.l) { 0.5 * c } else { 0.0 };
        rotated - Complex64::new(secular, 0.0)
    })
}

/// K = −i·avg(Φ F), where Φ is the running integral of F, estimated by
/// brute-force quadrature over a window of `periods` slowest periods.
///
/// Uses ½avg([Φ, F]), which does not depend on the integration constant of Φ.
pub fn time_average_k(spec: &SystemSpec, dipole: &DipoleMatrix, pair: Pair, periods: f64) -> DMatrix<Complex64> {
    let n = spec.dimension();
    let w = spec.transition_frequency(pair.l, pair.k).abs();
    let mut freqs = Vec::new();
    for a in 0..n {
        for b in 0..n {
            let g = spec.transition_frequency(a, b);
            for s in [g + w, g - w] {
                if s.abs() > 1e-9 {
                    freqs.push(s.abs());
                }
            }
        }
    }
    let slow = freqs.iter().cloned().fold(f64::INFINITY, f64::min);
    let fast = freqs.iter().cloned().fold(0.0, f64::max);
    let theta = periods * 2.0 * std::f64::consts::PI / slow;
    let h = 2.0 * std::f64::consts::PI / (400.0 * fast);
    let steps = (theta / h).ceil() as usize;
    let h = theta / steps as f64;
    let mut phi = DMatrix::<Complex64>::zeros(n, n);
    let mut acc = DMatrix::<Complex64>::zeros(n, n);
    let mut f_prev = oscillating_part(spec, dipole, pair, 0.0);
    for j in 0..steps {
        let t1 = (j + 1) as f64 * h;
        let f_mid = oscillating_part(spec, dipole, pair, t1 - 0.5 * h);
        let f_next = oscillating_part(spec, dipole, pair, t1);
        // Simpson on the running integral, midpoint sample of the commutator
        let phi_mid = &phi + (&f_prev * Complex64::new(5.0, 0.0) + &f_mid * Complex64::new(8.0, 0.0) - &f_next)
            * Complex64::new(h / 24.0, 0.0);
        phi += (&f_prev + &f_mid * Complex64::new(4.0, 0.0) + &f_next) * Complex64::new(h / 6.0, 0.0);
        acc += (&phi_mid * &f_mid - &f_mid * &phi_mid) * Complex64::new(h, 0.0);
        f_prev = f_next;
    }
    acc * Complex64::new(0.0, -0.5 / theta)
}

pub fn max_abs(m: &DMatrix<Complex64>) -> f64 {
    m.iter().fold(0.0, |a, z| a.max(z.norm()))
}
