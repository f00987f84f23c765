//! Averaging of the resonant drive on one transition.
//!
//! Under ε'(τ) = ξ cos(ω'_lk τ), the interaction-frame generator splits into
//! the secular term (μ'_lk/2)σx^{lk} and zero-mean oscillating terms. The
//! second-order secular correction K = −i·avg(H_I ∂τH_I) is built here from
//! frequency bookkeeping, and the averaged propagator
//! e^{−iH'_0τ} e^{i(ξμ'_lk/2·σx + ξ²K)τ} is compared against full propagation.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::propagate::{max_abs_diff, steps, ControlWaveform, Model, Segment, StepExp, StepPolicy};
use crate::qsys::{pauli, DipoleMatrix, Pair, PauliKind, SystemSpec, DEFAULT_DEGENERACY_TOL};

/// One term A·e^{iΩτ} of ∂τH_I.
#[derive(Debug, Clone, PartialEq)]
pub struct OscillatingTerm {
    pub frequency: f64,
    pub matrix: DMatrix<Complex64>,
}

fn unit(n: usize, m: usize, k: usize, value: f64) -> DMatrix<Complex64> {
    let mut a = DMatrix::zeros(n, n);
    a[(m, k)] = Complex64::new(value, 0.0);
    a
}

/// All oscillating terms of ∂τH_I for a drive resonant with `pair`.
///
/// For every ordered (m,n) with μ'_mn ≠ 0 there are two terms ½μ'_mn|m⟩⟨n|,
/// at ω'_mn − ω'_kl and ω'_mn − ω'_lk. The two zero-frequency ones,
/// (m,n) = (k,l) and (l,k), make up the secular (μ'_lk/2)σx and are left out.
pub fn interaction_components(
    spec: &SystemSpec,
    dipole: &DipoleMatrix,
    pair: Pair,
) -> Result<Vec<OscillatingTerm>> {
    let n = spec.dimension();
    if dipole.dimension() != n || pair.k >= n {
        return Err(Error::InvalidArgument("pair or dipole does not match the system".into()));
    }
    let (l, k) = (pair.l, pair.k);
    let w_lk = spec.transition_frequency(l, k);
    let w_kl = -w_lk;
    let mu = dipole.normalized();
    let mut terms = Vec::new();
    for m in 0..n {
        for q in 0..n {
            if m == q || mu[(m, q)] == 0.0 {
                continue;
            }
            let w_mq = spec.transition_frequency(m, q);
            for (excluded, freq) in [((k, l), w_mq - w_kl), ((l, k), w_mq - w_lk)] {
                if (m, q) == excluded {
                    continue;
                }
                if freq.abs() < DEFAULT_DEGENERACY_TOL {
                    return Err(Error::DegenerateSpectrum(format!(
                        "term |{}⟩⟨{}| is resonant with the drive on {pair}",
                        m + 1,
                        q + 1
                    )));
                }
                terms.push(OscillatingTerm { frequency: freq, matrix: unit(n, m, q, 0.5 * mu[(m, q)]) });
            }
        }
    }
    Ok(terms)
}

/// ∂τH_I(τ) = Σ A_j e^{iΩ_jτ}.
pub fn interaction_derivative(terms: &[OscillatingTerm], tau: f64) -> DMatrix<Complex64> {
    let n = terms.first().map_or(0, |t| t.matrix.nrows());
    terms.iter().fold(DMatrix::zeros(n, n), |acc, t| {
        acc + &t.matrix * Complex64::from_polar(1.0, t.frequency * tau)
    })
}

/// Zero-average antiderivative H_I(τ) = Σ A_j e^{iΩ_jτ}/(iΩ_j).
pub fn interaction_hamiltonian(terms: &[OscillatingTerm], tau: f64) -> DMatrix<Complex64> {
    let n = terms.first().map_or(0, |t| t.matrix.nrows());
    terms.iter().fold(DMatrix::zeros(n, n), |acc, t| {
        acc + &t.matrix * (Complex64::from_polar(1.0, t.frequency * tau) / Complex64::new(0.0, t.frequency))
    })
}

/// Hermitian secular correction K for one drive pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SecularCorrection {
    pub pair: Pair,
    pub matrix: DMatrix<Complex64>,
}

impl SecularCorrection {
    pub fn hermiticity_defect(&self) -> f64 {
        max_abs_diff(&self.matrix, &self.matrix.adjoint())
    }

    /// Zero correction, for checks that isolate the first-order term.
    pub fn zero(n: usize, pair: Pair) -> Self {
        SecularCorrection { pair, matrix: DMatrix::zeros(n, n) }
    }
}

/// Relative tolerance for deciding that Ω_j + Ω_j' = 0.
const FREQUENCY_MATCH_TOL: f64 = 1e-9;

/// K = −i·avg(H_I ∂τH_I) = −Σ_{Ω_j+Ω_j'=0} A_j A_j'/Ω_j.
pub fn k_matrix(spec: &SystemSpec, dipole: &DipoleMatrix, pair: Pair) -> Result<SecularCorrection> {
    let terms = interaction_components(spec, dipole, pair)?;
    let n = spec.dimension();
    let scale = terms.iter().fold(1.0_f64, |m, t| m.max(t.frequency.abs()));
    let mut k = DMatrix::<Complex64>::zeros(n, n);
    for a in &terms {
        let mut matched = false;
        for b in &terms {
            if (a.frequency + b.frequency).abs() <= FREQUENCY_MATCH_TOL * scale {
                matched = true;
                k -= &a.matrix * &b.matrix / Complex64::new(a.frequency, 0.0);
            }
        }
        if !matched {
            return Err(Error::Internal(format!(
                "term at frequency {} has no conjugate partner",
                a.frequency
            )));
        }
    }
    let out = SecularCorrection { pair, matrix: k };
    if out.hermiticity_defect() > 1e-12 {
        return Err(Error::Internal(format!(
            "K is not Hermitian (defect {:e})",
            out.hermiticity_defect()
        )));
    }
    Ok(out)
}

/// ξ·(μ'_lk/2)·σx^{lk} + ξ²·K.
pub fn averaged_generator(dipole: &DipoleMatrix, k: &SecularCorrection, xi: f64) -> DMatrix<Complex64> {
    let n = dipole.dimension();
    let c = dipole.entry(k.pair);
    pauli(n, k.pair, PauliKind::X) * Complex64::new(0.5 * xi * c, 0.0)
        + &k.matrix * Complex64::new(xi * xi, 0.0)
}

/// Spectral form of a Hermitian generator, for repeated e^{iGt}.
#[derive(Debug, Clone)]
pub struct HermitianExp {
    vectors: DMatrix<Complex64>,
    values: Vec<f64>,
}

impl HermitianExp {
    pub fn new(g: &DMatrix<Complex64>) -> Self {
        // symmetrize away rounding so the eigensolver sees an exact Hermitian
        let h = (g + g.adjoint()) * Complex64::new(0.5, 0.0);
        let eig = SymmetricEigen::new(h);
        HermitianExp { vectors: eig.eigenvectors, values: eig.eigenvalues.iter().cloned().collect() }
    }

    /// e^{iGt}.
    pub fn at(&self, t: f64) -> DMatrix<Complex64> {
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            self.values.len(),
            self.values.iter().map(|l| Complex64::from_polar(1.0, l * t)),
        ));
        &self.vectors * d * self.vectors.adjoint()
    }
}

/// Averaged propagator and whether `elapsed` exceeded 1/ξ².
#[derive(Debug, Clone)]
pub struct AveragedPropagator {
    pub matrix: DMatrix<Complex64>,
    pub outside_window: bool,
}

/// e^{−iH'_0 s} e^{i(ξμ'_lk/2·σx + ξ²K)s} with s = τ − τ1.
///
/// Outside 0 ≤ s ≤ 1/ξ² the approximation is not controlled; it is still
/// computed and flagged.
pub fn u_averaged(
    spec: &SystemSpec,
    dipole: &DipoleMatrix,
    k: &SecularCorrection,
    xi: f64,
    elapsed: f64,
) -> AveragedPropagator {
    let slow = HermitianExp::new(&averaged_generator(dipole, k, xi)).at(elapsed);
    AveragedPropagator {
        matrix: free_phase(spec, elapsed) * slow,
        outside_window: elapsed < 0.0 || elapsed > 1.0 / (xi * xi),
    }
}

/// e^{−iH'_0 s}.
pub fn free_phase(spec: &SystemSpec, s: f64) -> DMatrix<Complex64> {
    let e = spec.normalized_energies();
    DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        e.len(),
        e.iter().map(|x| Complex64::from_polar(1.0, -x * s)),
    ))
}

/// The middle Ramsey segment on its own: ξ‖H_0‖/‖μ‖·cos(ω'_lk τ) on [0, 1/ξ²].
pub fn resonant_drive(spec: &SystemSpec, dipole: &DipoleMatrix, pair: Pair, xi: f64) -> Result<ControlWaveform> {
    let duration = 1.0 / (xi * xi);
    let amplitude = xi * spec.h0_norm() / dipole.scale();
    ControlWaveform::new(
        duration,
        vec![Segment::Resonant {
            start: 0.0,
            duration,
            amplitude,
            frequency: spec.transition_frequency(pair.k, pair.l).abs(),
        }],
    )
}

/// Sup-norm distance between full and averaged propagators over the window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AveragingError {
    pub xi: f64,
    pub sup_error: f64,
    pub error_over_xi: f64,
    /// Largest unitarity defect of the full propagator seen along the way.
    pub unitarity_defect: f64,
}

/// Compares U(τ, 0) against [`u_averaged`] at every step boundary of
/// [0, 1/ξ²], using the max norm.
pub fn averaging_error(
    spec: &SystemSpec,
    dipole: &DipoleMatrix,
    pair: Pair,
    xi: f64,
    policy: &StepPolicy,
) -> Result<AveragingError> {
    if !(xi > 0.0 && xi.is_finite()) {
        return Err(Error::InvalidArgument(format!("ξ = {xi} must be positive")));
    }
    if dipole.entry(pair) == 0.0 {
        return Err(Error::NotInSupport(pair));
    }
    let k = k_matrix(spec, dipole, pair)?;
    let slow = HermitianExp::new(&averaged_generator(dipole, &k, xi));
    let model = Model::new(spec, dipole)?;
    let drive = resonant_drive(spec, dipole, pair, xi)?;
    let n = spec.dimension();
    let mut u = DMatrix::<Complex64>::identity(n, n);
    let mut sup = 0.0_f64;
    let mut defect = 0.0_f64;
    for (idx, st) in steps(&model, &drive, 0.0, drive.horizon(), policy)?.iter().enumerate() {
        u = StepExp::new(&model, st).matrix() * u;
        let t = st.start + st.dt;
        let avg = free_phase(spec, t) * slow.at(t);
        sup = sup.max(max_abs_diff(&u, &avg));
        if idx % 64 == 0 {
            defect = defect.max(crate::propagate::unitarity_defect(&u));
        }
    }
    defect = defect.max(crate::propagate::unitarity_defect(&u));
    Ok(AveragingError { xi, sup_error: sup, error_over_xi: sup / xi, unitarity_defect: defect })
}

/// max over samples of ‖e^{−iGs}σx e^{iGs} − σx‖ with G = ξμ'_lk/2·σx + ξ²K.
pub fn conjugation_check(dipole: &DipoleMatrix, k: &SecularCorrection, xi: f64, samples: &[f64]) -> f64 {
    let n = dipole.dimension();
    let sx = pauli(n, k.pair, PauliKind::X);
    let g = HermitianExp::new(&averaged_generator(dipole, k, xi));
    samples
        .iter()
        .map(|&s| {
            let fwd = g.at(s);
            let conj = fwd.adjoint() * &sx * &fwd;
            max_abs_diff(&conj, &sx)
        })
        .fold(0.0, f64::max)
}

/// cos(ω'_lk τ)·e^{iH'_0τ}σx^{mn}e^{−iH'_0τ}, evaluated by matrix products.
pub fn rotated_sigma_x(spec: &SystemSpec, drive: Pair, target: Pair, tau: f64) -> DMatrix<Complex64> {
    let n = spec.dimension();
    let phase = free_phase(spec, tau);
    let w = spec.transition_frequency(drive.l, drive.k);
    phase.adjoint() * pauli(n, target, PauliKind::X) * phase * Complex64::new((w * tau).cos(), 0.0)
}

/// Closed form of [`rotated_sigma_x`]:
/// ½cos((a−b)τ)σx + ½sin((a−b)τ)σy + ½cos((a+b)τ)σx − ½sin((a+b)τ)σy
/// with a = ω'_lk, b = ω'_mn. For (m,n) = (l,k) this is
/// ½σx + ½cos(2aτ)σx − ½sin(2aτ)σy.
pub fn rotated_sigma_x_closed_form(spec: &SystemSpec, drive: Pair, target: Pair, tau: f64) -> DMatrix<Complex64> {
    let n = spec.dimension();
    let a = spec.transition_frequency(drive.l, drive.k);
    let b = spec.transition_frequency(target.l, target.k);
    let sx = pauli(n, target, PauliKind::X);
    let sy = pauli(n, target, PauliKind::Y);
    let cx = 0.5 * (((a - b) * tau).cos() + ((a + b) * tau).cos());
    let cy = 0.5 * (((a - b) * tau).sin() - ((a + b) * tau).sin());
    sx * Complex64::new(cx, 0.0) + sy * Complex64::new(cy, 0.0)
}
