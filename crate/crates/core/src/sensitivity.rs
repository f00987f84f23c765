//! First-order derivatives of propagators and of P_if with respect to the
//! normalized support entries μ'_p, plus the central-difference oracle.
//!
//! Perturbing μ'_p moves both symmetric entries, i.e. δμ' = σx^{l_p k_p}.
//! Derivatives are accumulated alongside propagation on the same step grid:
//! each step contributes the exact derivative of its exponential, which
//! tends to i(‖μ‖/‖H_0‖)·U·∫ε U†σxU dτ as the step shrinks and coincides with
//! the derivative of the discrete propagator at any step size.

use nalgebra::{DMatrix, RowDVector};
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::propagate::{steps, ControlWaveform, Model, StepExp, StepPolicy};
use crate::qsys::{sigma_x, DipoleMatrix, Pair, SystemSpec};

/// U(tb, ta) and ∂U/∂μ'_p for each requested pair.
#[derive(Debug, Clone)]
pub struct PropagatorDerivatives {
    pub pairs: Vec<Pair>,
    pub propagator: DMatrix<Complex64>,
    pub derivatives: Vec<DMatrix<Complex64>>,
    pub steps: usize,
}

pub fn propagate_with_derivatives(
    model: &Model,
    control: &ControlWaveform,
    ta: f64,
    tb: f64,
    pairs: &[Pair],
    policy: &StepPolicy,
) -> Result<PropagatorDerivatives> {
    let n = model.dimension();
    if let Some(p) = pairs.iter().find(|p| p.k >= n) {
        return Err(Error::InvalidArgument(format!("pair {p} outside {n}-level system")));
    }
    let grid = steps(model, control, ta, tb, policy)?;
    let sigmas: Vec<DMatrix<f64>> = pairs.iter().map(|&p| sigma_x(n, p)).collect();
    let mut u = DMatrix::<Complex64>::identity(n, n);
    let mut du = vec![DMatrix::<Complex64>::zeros(n, n); pairs.len()];
    for st in &grid {
        let e = StepExp::new(model, st);
        for (d, sigma) in du.iter_mut().zip(&sigmas) {
            let next = if st.fields == [0.0; 2] {
                e.matrix() * &*d
            } else {
                let de = e.derivative(&model.generator_derivative(st.dt, st.fields, sigma));
                e.matrix() * &*d + de * &u
            };
            *d = next;
        }
        u = e.matrix() * u;
    }
    Ok(PropagatorDerivatives { pairs: pairs.to_vec(), propagator: u, derivatives: du, steps: grid.len() })
}

/// ∂U(tb, ta)/∂μ'_lk.
pub fn du_dmu(
    model: &Model,
    control: &ControlWaveform,
    pair: Pair,
    ta: f64,
    tb: f64,
    policy: &StepPolicy,
) -> Result<DMatrix<Complex64>> {
    let mut d = propagate_with_derivatives(model, control, ta, tb, &[pair], policy)?;
    Ok(d.derivatives.pop().expect("one pair requested"))
}

/// ∂P_if/∂μ'_p aligned with the support ordering.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityVector {
    pub pairs: Vec<Pair>,
    pub values: Vec<f64>,
}

impl SensitivityVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, pair: Pair) -> Option<f64> {
        self.pairs.iter().position(|&p| p == pair).map(|i| self.values[i])
    }
}

/// P_if together with its sensitivity vector.
#[derive(Debug, Clone)]
pub struct Measurement {
    pub population: f64,
    pub sensitivity: SensitivityVector,
}

/// P_if and ∂P_if/∂μ'_p over the full horizon in one propagation pass.
pub fn measure(
    spec: &SystemSpec,
    dipole: &DipoleMatrix,
    control: &ControlWaveform,
    policy: &StepPolicy,
) -> Result<Measurement> {
    let model = Model::new(spec, dipole)?;
    let pairs = dipole.support();
    let d = propagate_with_derivatives(&model, control, 0.0, control.horizon(), pairs, policy)?;
    let (i, f) = (spec.initial(), spec.measured());
    let z = d.propagator[(f, i)];
    let values = d.derivatives.iter().map(|du| 2.0 * (du[(f, i)] * z.conj()).re).collect();
    Ok(Measurement {
        population: z.norm_sqr(),
        sensitivity: SensitivityVector { pairs: pairs.to_vec(), values },
    })
}

/// ∂P_if/∂μ'_p for every support pair.
pub fn dp_dmu(
    spec: &SystemSpec,
    dipole: &DipoleMatrix,
    control: &ControlWaveform,
    policy: &StepPolicy,
) -> Result<SensitivityVector> {
    Ok(measure(spec, dipole, control, policy)?.sensitivity)
}

/// Same as [`dp_dmu`] but assembled piece by piece over the partition of
/// `[0, ⊤]` given by `breakpoints`:
/// δz = Σ_j ⟨f|U_K ⋯ δU_j ⋯ U_1|i⟩, δP = 2ℜ(δz·z̄).
pub fn dp_dmu_partitioned(
    spec: &SystemSpec,
    dipole: &DipoleMatrix,
    control: &ControlWaveform,
    breakpoints: &[f64],
    policy: &StepPolicy,
) -> Result<SensitivityVector> {
    let model = Model::new(spec, dipole)?;
    let pairs = dipole.support();
    let horizon = control.horizon();
    let mut bounds = vec![0.0];
    for &b in breakpoints {
        if !(b > *bounds.last().unwrap() && b < horizon) {
            return Err(Error::InvalidArgument(format!(
                "breakpoints must increase strictly inside (0, {horizon})"
            )));
        }
        bounds.push(b);
    }
    bounds.push(horizon);
    let pieces = bounds
        .windows(2)
        .map(|w| propagate_with_derivatives(&model, control, w[0], w[1], pairs, policy))
        .collect::<Result<Vec<_>>>()?;

    let n = model.dimension();
    let (i, f) = (spec.initial(), spec.measured());
    // before[j] = U_{j-1} ⋯ U_1 |i⟩, after[j] = ⟨f| U_K ⋯ U_{j+1}
    let mut before = Vec::with_capacity(pieces.len());
    let mut ket = DMatrix::<Complex64>::identity(n, n).column(i).into_owned();
    for piece in &pieces {
        before.push(ket.clone());
        ket = &piece.propagator * ket;
    }
    let z = ket[f];
    let mut after = vec![RowDVector::<Complex64>::zeros(n); pieces.len()];
    let mut bra = DMatrix::<Complex64>::identity(n, n).row(f).into_owned();
    for (j, piece) in pieces.iter().enumerate().rev() {
        after[j] = bra.clone();
        bra = bra * &piece.propagator;
    }
    let values = (0..pairs.len())
        .map(|p| {
            let dz: Complex64 = pieces
                .iter()
                .enumerate()
                .map(|(j, piece)| (&after[j] * &piece.derivatives[p] * &before[j])[(0, 0)])
                .sum();
            2.0 * (dz * z.conj()).re
        })
        .collect();
    Ok(SensitivityVector { pairs: pairs.to_vec(), values })
}

/// Central difference estimate of ∂P_if/∂μ'_lk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FiniteDifference {
    pub value: f64,
    pub h: f64,
    /// Rough rounding error of the difference quotient: steps·ε_mach/h.
    pub roundoff_estimate: f64,
    /// `h` is below the point where rounding starts to dominate truncation.
    pub below_noise_floor: bool,
}

pub fn fd_oracle(
    spec: &SystemSpec,
    dipole: &DipoleMatrix,
    control: &ControlWaveform,
    pair: Pair,
    h: f64,
    policy: &StepPolicy,
) -> Result<FiniteDifference> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("step h = {h} must be positive")));
    }
    if pair.k >= dipole.dimension() {
        return Err(Error::InvalidArgument(format!("pair {pair} outside the system")));
    }
    let p = |delta: f64| -> Result<f64> {
        let model = Model::new(spec, &dipole.perturbed(pair, delta))?;
        crate::propagate::population(spec, &model, control, policy)
    };
    let value = (p(h)? - p(-h)?) / (2.0 * h);
    let n_steps = steps(&Model::new(spec, dipole)?, control, 0.0, control.horizon(), policy)?.len();
    let noise = (n_steps.max(1) as f64) * f64::EPSILON;
    Ok(FiniteDifference {
        value,
        h,
        roundoff_estimate: noise / h,
        below_noise_floor: h < noise.cbrt(),
    })
}
