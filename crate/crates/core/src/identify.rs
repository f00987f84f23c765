//! Least-squares identification of the normalized support entries μ'_p from
//! one population measurement per control.
//!
//! J(μ̂) = Σ_k (P_if(ε_k, μ̂) − P_k)². The Hessian reported by [`hessian_j`]
//! is the outer-product form H = Σ_k ∇P_k ∇P_kᵀ; since J is a plain sum of
//! squares its exact second derivative at a zero-residual point is 2H, and
//! the Gauss–Newton step below solves with 2H accordingly.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::propagate::{population, ControlWaveform, Model, StepPolicy};
use crate::qsys::{DipoleMatrix, Pair, SystemSpec};
use crate::sensitivity::measure;

/// One (possibly noisy) value of P_if for control `control_id`.
///
/// Noisy values are kept as drawn, even outside [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub control_id: usize,
    pub value: f64,
    pub variance: f64,
    pub seed: Option<u64>,
}

/// Noiseless records P_if(ε_k, μ) for every control.
pub fn noiseless_records(
    spec: &SystemSpec,
    dipole: &DipoleMatrix,
    controls: &[ControlWaveform],
    policy: &StepPolicy,
) -> Result<Vec<MeasurementRecord>> {
    let model = Model::new(spec, dipole)?;
    controls
        .par_iter()
        .enumerate()
        .map(|(k, c)| {
            Ok(MeasurementRecord { control_id: k, value: population(spec, &model, c, policy)?, variance: 0.0, seed: None })
        })
        .collect()
}

/// Adds i.i.d. N(0, variance) noise drawn from a ChaCha stream seeded by `seed`.
pub fn with_noise(records: &[MeasurementRecord], variance: f64, seed: u64) -> Result<Vec<MeasurementRecord>> {
    if !(variance >= 0.0 && variance.is_finite()) {
        return Err(Error::InvalidArgument(format!("variance {variance} must be finite and ≥ 0")));
    }
    let normal = Normal::new(0.0, variance.sqrt()).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(records
        .iter()
        .map(|r| MeasurementRecord {
            value: r.value + normal.sample(&mut rng),
            variance,
            seed: Some(seed),
            ..*r
        })
        .collect())
}

fn check_records(controls: &[ControlWaveform], records: &[MeasurementRecord]) -> Result<()> {
    if let Some(r) = records.iter().find(|r| r.control_id >= controls.len()) {
        return Err(Error::InvalidArgument(format!(
            "record refers to control {} but only {} controls were given",
            r.control_id,
            controls.len()
        )));
    }
    if let Some(r) = records.iter().find(|r| !r.value.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite record for control {}", r.control_id)));
    }
    Ok(())
}

/// J(μ̂) = Σ_k (P_if(ε_k, μ̂) − P_k)².
pub fn cost_j(
    spec: &SystemSpec,
    candidate: &DipoleMatrix,
    controls: &[ControlWaveform],
    records: &[MeasurementRecord],
    policy: &StepPolicy,
) -> Result<f64> {
    check_records(controls, records)?;
    let model = Model::new(spec, candidate)?;
    let residuals = records
        .par_iter()
        .map(|r| Ok(population(spec, &model, &controls[r.control_id], policy)? - r.value))
        .collect::<Result<Vec<f64>>>()?;
    Ok(residuals.iter().map(|r| r * r).sum())
}

/// Residuals and their Jacobian at a candidate.
#[derive(Debug, Clone)]
pub struct Linearization {
    /// P̂_k − P_k.
    pub residuals: DVector<f64>,
    /// ∂P̂_k/∂μ'_p, records × support.
    pub jacobian: DMatrix<f64>,
}

impl Linearization {
    pub fn cost(&self) -> f64 {
        self.residuals.norm_squared()
    }

    /// ∇J = 2 Σ_k r_k ∇P̂_k.
    pub fn gradient(&self) -> DVector<f64> {
        self.jacobian.transpose() * &self.residuals * 2.0
    }

    /// Σ_k ∇P̂_k ∇P̂_kᵀ.
    pub fn hessian(&self) -> DMatrix<f64> {
        self.jacobian.transpose() * &self.jacobian
    }
}

pub fn linearize(
    spec: &SystemSpec,
    candidate: &DipoleMatrix,
    controls: &[ControlWaveform],
    records: &[MeasurementRecord],
    policy: &StepPolicy,
) -> Result<Linearization> {
    check_records(controls, records)?;
    let model = Model::new(spec, candidate)?;
    let rows = records
        .par_iter()
        .map(|r| {
            let control = &controls[r.control_id];
            let m = measure(spec, candidate, control, policy)?;
            // same arithmetic path as the records, so noiseless residuals are exactly zero at the truth
            Ok((population(spec, &model, control, policy)? - r.value, m.sensitivity.values))
        })
        .collect::<Result<Vec<_>>>()?;
    let m = candidate.support_len();
    Ok(Linearization {
        residuals: DVector::from_iterator(rows.len(), rows.iter().map(|r| r.0)),
        jacobian: DMatrix::from_fn(rows.len(), m, |k, p| rows[k].1[p]),
    })
}

/// H = Σ_k ∇P_k ∇P_kᵀ over all controls, at `candidate`.
pub fn hessian_j(
    spec: &SystemSpec,
    candidate: &DipoleMatrix,
    controls: &[ControlWaveform],
    policy: &StepPolicy,
) -> Result<DMatrix<f64>> {
    let m = candidate.support_len();
    if controls.is_empty() {
        return Ok(DMatrix::zeros(m, m));
    }
    let rows = controls
        .par_iter()
        .map(|c| measure(spec, candidate, c, policy).map(|m| m.sensitivity.values))
        .collect::<Result<Vec<_>>>()?;
    let a = DMatrix::from_fn(rows.len(), m, |k, p| rows[k][p]);
    Ok(a.transpose() * a)
}

/// Smallest eigenvalue of a symmetric matrix; 0 for an empty one.
pub fn min_eigenvalue(h: &DMatrix<f64>) -> f64 {
    if h.is_empty() {
        return 0.0;
    }
    SymmetricEigen::new(h.clone()).eigenvalues.min()
}

/// Outcome of a local convexity check.
#[derive(Debug, Clone, Serialize)]
pub struct AlphaReport {
    pub alpha_hat: f64,
    pub alpha_target: f64,
    pub certified: bool,
    pub eigenvalues: Vec<f64>,
    pub hessian: Vec<Vec<f64>>,
    /// Strength of the controls, if known.
    pub xi: Option<f64>,
    /// Strength expected to reach `alpha_target`, from α ≈ 1/(4ξ²).
    pub xi_needed: f64,
}

pub fn alpha_convexity(
    spec: &SystemSpec,
    dipole: &DipoleMatrix,
    controls: &[ControlWaveform],
    xi: Option<f64>,
    alpha_target: f64,
    policy: &StepPolicy,
) -> Result<AlphaReport> {
    if !(alpha_target > 0.0 && alpha_target.is_finite()) {
        return Err(Error::InvalidArgument(format!("α target {alpha_target} must be positive")));
    }
    let h = hessian_j(spec, dipole, controls, policy)?;
    let mut eigenvalues: Vec<f64> =
        if h.is_empty() { Vec::new() } else { SymmetricEigen::new(h.clone()).eigenvalues.iter().copied().collect() };
    eigenvalues.sort_by(f64::total_cmp);
    let alpha_hat = eigenvalues.first().copied().unwrap_or(0.0);
    let xi_needed = match xi {
        // α̂ ∝ 1/ξ² around the current point
        Some(x) if alpha_hat > 0.0 => x * (alpha_hat / alpha_target).sqrt(),
        _ => 1.0 / (2.0 * alpha_target.sqrt()),
    };
    Ok(AlphaReport {
        alpha_hat,
        alpha_target,
        certified: alpha_hat >= alpha_target,
        eigenvalues,
        hessian: h.row_iter().map(|r| r.iter().copied().collect()).collect(),
        xi,
        xi_needed,
    })
}

/// Stopping rules for [`local_identify`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentifyOptions {
    pub max_iterations: usize,
    pub gradient_tol: f64,
    /// Relative condition number above which damping is switched on from the start.
    pub max_condition: f64,
    pub policy: StepPolicy,
}

impl Default for IdentifyOptions {
    fn default() -> Self {
        IdentifyOptions { max_iterations: 100, gradient_tol: 1e-10, max_condition: 1e12, policy: StepPolicy::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    IterationLimit,
    /// No damped step lowers J.
    Stalled,
}

/// Estimate on the support with diagnostics at the final point.
#[derive(Debug, Clone, Serialize)]
pub struct IdentificationResult {
    pub pairs: Vec<Pair>,
    /// Estimated normalized entries μ̂'_p, in support order.
    pub estimate: Vec<f64>,
    pub scale: f64,
    pub cost: f64,
    pub gradient_norm: f64,
    pub hessian: Vec<Vec<f64>>,
    pub alpha_hat: f64,
    pub iterations: usize,
    pub converged: bool,
    pub termination: Termination,
    #[serde(skip)]
    pub dipole: DipoleMatrix,
}

impl IdentificationResult {
    /// Max-norm distance to `truth` on the support.
    pub fn max_error(&self, truth: &DipoleMatrix) -> f64 {
        self.estimate.iter().zip(truth.support_values()).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Root-mean-square distance to `truth` on the support.
    pub fn rms_error(&self, truth: &DipoleMatrix) -> f64 {
        let m = self.estimate.len().max(1) as f64;
        (self.estimate.iter().zip(truth.support_values()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / m).sqrt()
    }
}

/// Levenberg–Marquardt damped Gauss–Newton from `start`, on its support.
pub fn local_identify(
    spec: &SystemSpec,
    controls: &[ControlWaveform],
    records: &[MeasurementRecord],
    start: &DipoleMatrix,
    options: &IdentifyOptions,
) -> Result<IdentificationResult> {
    let policy = &options.policy;
    let m = start.support_len();
    let mut x = DVector::from_vec(start.support_values());
    let mut current = start.with_support_values(x.as_slice())?;
    let mut lin = linearize(spec, &current, controls, records, policy)?;
    let mut lambda = 0.0_f64;
    let mut iterations = 0;
    let termination = loop {
        let g = lin.gradient();
        if g.norm() <= options.gradient_tol {
            break Termination::GradientTolerance;
        }
        if iterations >= options.max_iterations {
            break Termination::IterationLimit;
        }
        let h = lin.hessian();
        let scale = h.diagonal().amax().max(f64::MIN_POSITIVE);
        let eig = SymmetricEigen::new(h.clone()).eigenvalues;
        if eig.min() <= eig.max() / options.max_condition {
            lambda = lambda.max(scale / options.max_condition);
        }
        let cost = lin.cost();
        let mut accepted = None;
        while lambda <= 1e16 * scale {
            // (2H + 2λI)δ = −g
            let system = (&h + DMatrix::identity(m, m) * lambda) * 2.0;
            let Some(chol) = system.cholesky() else {
                lambda = if lambda == 0.0 { 1e-12 * scale } else { lambda * 10.0 };
                continue;
            };
            let trial_x = &x - chol.solve(&g);
            let trial = start.with_support_values(trial_x.as_slice())?;
            let trial_lin = linearize(spec, &trial, controls, records, policy)?;
            if trial_lin.cost() < cost || (trial_lin.cost() == cost && trial_lin.gradient().norm() < g.norm()) {
                accepted = Some((trial_x, trial, trial_lin));
                break;
            }
            lambda = if lambda == 0.0 { 1e-6 * scale } else { lambda * 10.0 };
        }
        let Some((nx, nc, nl)) = accepted else { break Termination::Stalled };
        x = nx;
        current = nc;
        lin = nl;
        lambda /= 10.0;
        if lambda < 1e-12 * scale {
            lambda = 0.0;
        }
        iterations += 1;
    };
    let h = lin.hessian();
    Ok(IdentificationResult {
        pairs: current.support().to_vec(),
        estimate: x.iter().copied().collect(),
        scale: current.scale(),
        cost: lin.cost(),
        gradient_norm: lin.gradient().norm(),
        alpha_hat: min_eigenvalue(&h),
        hessian: h.row_iter().map(|r| r.iter().copied().collect()).collect(),
        iterations,
        converged: termination == Termination::GradientTolerance,
        termination,
        dipole: current,
    })
}

/// One row of the noise study.
#[derive(Debug, Clone, Serialize)]
pub struct NoiseRow {
    pub variance: f64,
    /// RMS over trials of the per-trial RMS support error.
    pub rms_error: f64,
    /// √(var/α̂) with α̂ at the truth.
    pub predicted_radius: f64,
    pub nonconverged: usize,
    pub trial_errors: Vec<f64>,
}

impl NoiseRow {
    /// Fraction of trials whose error is at most `factor` times the predicted radius.
    pub fn fraction_within(&self, factor: f64) -> f64 {
        if self.trial_errors.is_empty() {
            return 0.0;
        }
        let inside = self.trial_errors.iter().filter(|&&e| e <= factor * self.predicted_radius).count();
        inside as f64 / self.trial_errors.len() as f64
    }
}

/// Per-trial seed, independent of evaluation order.
pub fn trial_seed(seed: u64, variance_index: usize, trial: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((variance_index as u64) << 32) | trial as u64);
    rand::Rng::random(&mut rng)
}

/// Identification from noisy records around `truth`, starting at `truth`.
pub fn noise_study(
    spec: &SystemSpec,
    truth: &DipoleMatrix,
    controls: &[ControlWaveform],
    variances: &[f64],
    trials: usize,
    seed: u64,
    options: &IdentifyOptions,
) -> Result<Vec<NoiseRow>> {
    let base = noiseless_records(spec, truth, controls, &options.policy)?;
    let alpha = min_eigenvalue(&hessian_j(spec, truth, controls, &options.policy)?);
    variances
        .iter()
        .enumerate()
        .map(|(vi, &var)| {
            let outcomes = (0..trials)
                .into_par_iter()
                .map(|t| {
                    let records = with_noise(&base, var, trial_seed(seed, vi, t))?;
                    let r = local_identify(spec, controls, &records, truth, options)?;
                    Ok((r.rms_error(truth), r.converged))
                })
                .collect::<Result<Vec<_>>>()?;
            let trial_errors: Vec<f64> = outcomes.iter().map(|o| o.0).collect();
            let rms = (trial_errors.iter().map(|e| e * e).sum::<f64>() / trials.max(1) as f64).sqrt();
            Ok(NoiseRow {
                variance: var,
                rms_error: rms,
                predicted_radius: if alpha > 0.0 { (var / alpha).sqrt() } else { f64::INFINITY },
                nonconverged: outcomes.iter().filter(|o| !o.1).count(),
                trial_errors,
            })
        })
        .collect()
}

/// Least-squares slope of log(y) against log(x).
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::propagate::Segment;

    fn two_level() -> (SystemSpec, DipoleMatrix) {
        let spec = SystemSpec::new(vec![0.0, 1.0], 0, 1).unwrap();
        let dipole = DipoleMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        (spec, dipole)
    }

    fn rabi(amplitude: f64) -> ControlWaveform {
        ControlWaveform::new(
            40.0,
            vec![Segment::Resonant { start: 0.0, duration: 40.0, amplitude, frequency: 1.0 }],
        )
        .unwrap()
    }

    #[test]
    fn cost_vanishes_at_truth() {
        let (spec, dipole) = two_level();
        let controls = vec![rabi(0.03), rabi(0.05)];
        let policy = StepPolicy::default();
        let records = noiseless_records(&spec, &dipole, &controls, &policy).unwrap();
        assert!(cost_j(&spec, &dipole, &controls, &records, &policy).unwrap() <= 1e-12);
    }

    #[test]
    fn cost_is_squared_offset() {
        let (spec, dipole) = two_level();
        let controls = vec![rabi(0.03)];
        let policy = StepPolicy::default();
        let mut records = noiseless_records(&spec, &dipole, &controls, &policy).unwrap();
        records[0].value -= 0.1;
        let j = cost_j(&spec, &dipole, &controls, &records, &policy).unwrap();
        assert!((j - 0.01).abs() < 1e-12, "{j}");
    }

    #[test]
    fn no_controls_give_zero_alpha() {
        let (spec, dipole) = two_level();
        let report = alpha_convexity(&spec, &dipole, &[], None, 1.0, &StepPolicy::default()).unwrap();
        assert_eq!(report.alpha_hat, 0.0);
        assert!(!report.certified);
    }

    #[test]
    fn start_at_truth_takes_no_iterations() {
        let (spec, dipole) = two_level();
        let controls = vec![rabi(0.03)];
        let options = IdentifyOptions::default();
        let records = noiseless_records(&spec, &dipole, &controls, &options.policy).unwrap();
        let r = local_identify(&spec, &controls, &records, &dipole, &options).unwrap();
        assert_eq!(r.iterations, 0);
        assert!(r.converged);
    }

    #[test]
    fn recovers_two_level_entry() {
        let (spec, dipole) = two_level();
        let controls = vec![rabi(0.03)];
        let options = IdentifyOptions::default();
        let records = noiseless_records(&spec, &dipole, &controls, &options.policy).unwrap();
        let start = dipole.with_support_values(&[1.0 + 1e-3]).unwrap();
        let r = local_identify(&spec, &controls, &records, &start, &options).unwrap();
        assert!(r.converged, "{:?}", r.termination);
        assert!(r.max_error(&dipole) < 1e-9);
    }

    #[test]
    fn noise_is_reproducible() {
        let recs = vec![MeasurementRecord { control_id: 0, value: 0.5, variance: 0.0, seed: None }; 3];
        let a = with_noise(&recs, 1e-4, 7).unwrap();
        let b = with_noise(&recs, 1e-4, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(trial_seed(1, 0, 0), trial_seed(1, 0, 1));
        assert_ne!(trial_seed(1, 0, 0), trial_seed(1, 1, 0));
    }

    #[test]
    fn slope_of_power_law() {
        let x = [1e-8, 1e-6, 1e-4];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.sqrt()).collect();
        assert!((log_log_slope(&x, &y) - 0.5).abs() < 1e-12);
    }
}
