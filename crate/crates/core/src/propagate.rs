//! Unitary propagation under i∂τU = (H'_0 − ε'(τ)μ')U.
//!
//! Time is the dimensionless τ = ‖H_0‖t/ħ. Control fields are stored in
//! input units and converted with ε' = ε‖μ‖/‖H_0‖.
//!
//! The stepper is the exponential midpoint rule: each step applies the exact
//! exponential of the Hamiltonian frozen at the step midpoint, so every step
//! is unitary to rounding. Zero-field gaps are a single diagonal exponential,
//! and sampled segments are piecewise constant so their steps are exact.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qsys::{DipoleMatrix, QuantumState, SystemSpec};

/// Unitarity budget for any propagator returned by this module.
pub const UNITARITY_TOL: f64 = 1e-10;

const MAX_STEPS: usize = 50_000_000;
const MIN_STEP: f64 = 1e-12;

/// Normalized Hamiltonian data shared by all propagation routines.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    energies: Vec<f64>,
    coupling: f64,
    mu: DMatrix<f64>,
    omega_max: f64,
}

impl Model {
    pub fn new(spec: &SystemSpec, dipole: &DipoleMatrix) -> Result<Self> {
        if spec.dimension() != dipole.dimension() {
            return Err(Error::InvalidArgument(format!(
                "system has {} levels, dipole has {}",
                spec.dimension(),
                dipole.dimension()
            )));
        }
        Ok(Model {
            energies: spec.normalized_energies(),
            coupling: dipole.scale() / spec.h0_norm(),
            mu: dipole.normalized().clone(),
            omega_max: spec.max_transition_frequency(),
        })
    }

    pub fn dimension(&self) -> usize {
        self.energies.len()
    }

    /// ‖μ‖/‖H_0‖: converts an input-unit field into ε'.
    pub fn coupling(&self) -> f64 {
        self.coupling
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    pub fn mu(&self) -> &DMatrix<f64> {
        &self.mu
    }

    pub fn omega_max(&self) -> f64 {
        self.omega_max
    }

    /// H'_0 − ε'μ' for an input-unit field value.
    pub fn hamiltonian(&self, field: f64) -> DMatrix<f64> {
        let mut h = &self.mu * (-field * self.coupling);
        for (i, e) in self.energies.iter().enumerate() {
            h[(i, i)] += e;
        }
        h
    }

    /// Field amplitude (input units) whose normalized value is `xi`.
    pub fn field_for(&self, xi: f64) -> f64 {
        xi / self.coupling
    }
}

/// One piece of a control waveform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Segment {
    /// Zero-order hold: `amplitudes[j]` on `[start + j·dt, start + (j+1)·dt)`.
    Sampled { start: f64, dt: f64, amplitudes: Vec<f64> },
    /// `amplitude · cos(frequency · (τ − start))` on `[start, start + duration)`.
    Resonant { start: f64, duration: f64, amplitude: f64, frequency: f64 },
}

impl Segment {
    pub fn start(&self) -> f64 {
        match self {
            Segment::Sampled { start, .. } | Segment::Resonant { start, .. } => *start,
        }
    }

    pub fn end(&self) -> f64 {
        match self {
            Segment::Sampled { start, dt, amplitudes } => start + dt * amplitudes.len() as f64,
            Segment::Resonant { start, duration, .. } => start + duration,
        }
    }

    pub fn max_amplitude(&self) -> f64 {
        match self {
            Segment::Sampled { amplitudes, .. } => {
                amplitudes.iter().fold(0.0_f64, |m, a| m.max(a.abs()))
            }
            Segment::Resonant { amplitude, .. } => amplitude.abs(),
        }
    }

    pub fn field_at(&self, tau: f64) -> f64 {
        match self {
            Segment::Sampled { start, dt, amplitudes } => {
                let j = ((tau - start) / dt).floor();
                if j < 0.0 {
                    return 0.0;
                }
                amplitudes.get(j as usize).copied().unwrap_or(0.0)
            }
            Segment::Resonant { start, amplitude, frequency, .. } => {
                amplitude * (frequency * (tau - start)).cos()
            }
        }
    }

    pub fn shifted(&self, offset: f64) -> Segment {
        let mut s = self.clone();
        match &mut s {
            Segment::Sampled { start, .. } | Segment::Resonant { start, .. } => *start += offset,
        }
        s
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidControl(msg.to_string()));
        match self {
            Segment::Sampled { start, dt, amplitudes } => {
                if !start.is_finite() || !(dt.is_finite() && *dt > 0.0) {
                    return bad("sampled segment needs finite start and dt > 0");
                }
                if amplitudes.is_empty() {
                    return bad("sampled segment has no samples");
                }
                if amplitudes.iter().any(|a| !a.is_finite()) {
                    return bad("non-finite sample");
                }
            }
            Segment::Resonant { start, duration, amplitude, frequency } => {
                if !start.is_finite() || !(duration.is_finite() && *duration > 0.0) {
                    return bad("resonant segment needs finite start and duration > 0");
                }
                if !amplitude.is_finite() || !frequency.is_finite() {
                    return bad("non-finite resonant parameters");
                }
            }
        }
        Ok(())
    }
}

/// Piecewise control on `[0, horizon]`; the field is zero outside segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawWaveform", into = "RawWaveform")]
pub struct ControlWaveform {
    horizon: f64,
    segments: Vec<Segment>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWaveform {
    horizon: f64,
    segments: Vec<Segment>,
}

impl TryFrom<RawWaveform> for ControlWaveform {
    type Error = Error;
    fn try_from(raw: RawWaveform) -> Result<Self> {
        ControlWaveform::new(raw.horizon, raw.segments)
    }
}

impl From<ControlWaveform> for RawWaveform {
    fn from(c: ControlWaveform) -> Self {
        RawWaveform { horizon: c.horizon, segments: c.segments }
    }
}

/// Relative slack when checking segment boundaries against each other.
const BOUNDARY_SLACK: f64 = 1e-12;

impl ControlWaveform {
    pub fn new(horizon: f64, segments: Vec<Segment>) -> Result<Self> {
        if !(horizon.is_finite() && horizon >= 0.0) {
            return Err(Error::InvalidControl(format!("bad horizon {horizon}")));
        }
        let slack = BOUNDARY_SLACK * horizon.max(1.0);
        let mut prev_end = 0.0;
        for (i, s) in segments.iter().enumerate() {
            s.validate()?;
            if s.start() < prev_end - slack {
                return Err(Error::InvalidControl(format!(
                    "segment {i} starts at {} before previous end {prev_end}",
                    s.start()
                )));
            }
            prev_end = s.end();
        }
        if prev_end > horizon + slack {
            return Err(Error::InvalidControl(format!(
                "segments end at {prev_end}, past horizon {horizon}"
            )));
        }
        Ok(ControlWaveform { horizon, segments })
    }

    /// Zero field on `[0, horizon]`.
    pub fn zero(horizon: f64) -> Self {
        ControlWaveform { horizon, segments: Vec::new() }
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn max_amplitude(&self) -> f64 {
        self.segments.iter().fold(0.0, |m, s| m.max(s.max_amplitude()))
    }

    pub fn field_at(&self, tau: f64) -> f64 {
        self.segments
            .iter()
            .find(|s| tau >= s.start() && tau < s.end())
            .map_or(0.0, |s| s.field_at(tau))
    }

    /// Same waveform with zero field appended up to `horizon`.
    pub fn padded_to(&self, horizon: f64) -> Result<Self> {
        ControlWaveform::new(horizon, self.segments.clone())
    }

    /// Appends `other` after this waveform's horizon.
    pub fn then(&self, other: &ControlWaveform) -> Result<Self> {
        let offset = self.horizon;
        let mut segments = self.segments.clone();
        segments.extend(other.segments.iter().map(|s| s.shifted(offset)));
        ControlWaveform::new(self.horizon + other.horizon, segments)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Per-step integrator for time-dependent (resonant) segments.
///
/// Constant-field steps are exact under either scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Exponential midpoint rule, second order.
    Midpoint,
    /// Two-point Gauss Magnus expansion, fourth order.
    #[default]
    GaussMagnus4,
}

/// Step-size rule: dt = min(2π/(samples_per_period·ω'_max), amplitude_factor/max|ε'|, max_step).
///
/// The amplitude bound uses the largest field of each segment separately so a
/// segment's grid does not depend on its neighbours.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StepPolicy {
    pub samples_per_period: f64,
    pub amplitude_factor: f64,
    pub max_step: Option<f64>,
    pub scheme: Scheme,
}

impl Default for StepPolicy {
    fn default() -> Self {
        StepPolicy {
            samples_per_period: 20.0,
            amplitude_factor: 0.1,
            max_step: None,
            scheme: Scheme::default(),
        }
    }
}

impl StepPolicy {
    pub fn with_max_step(mut self, dt: f64) -> Self {
        self.max_step = Some(dt);
        self
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    /// Largest admissible step for a field of normalized magnitude `field_max`.
    pub fn step_for(&self, model: &Model, field_max: f64) -> f64 {
        let mut dt = f64::INFINITY;
        if model.omega_max > 0.0 {
            dt = dt.min(2.0 * PI / (self.samples_per_period * model.omega_max));
        }
        if field_max > 0.0 {
            dt = dt.min(self.amplitude_factor / field_max);
        }
        if let Some(cap) = self.max_step {
            dt = dt.min(cap);
        }
        dt
    }
}

/// One propagation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub start: f64,
    pub dt: f64,
    /// Field (input units) at the two quadrature nodes; equal for
    /// constant-field and midpoint steps.
    pub fields: [f64; 2],
    /// `(segment, sample)` for steps inside a sampled segment.
    pub sample: Option<(usize, usize)>,
}

impl Step {
    pub fn is_constant(&self) -> bool {
        self.fields[0] == self.fields[1]
    }

    pub fn mean_field(&self) -> f64 {
        0.5 * (self.fields[0] + self.fields[1])
    }
}

const GAUSS_OFFSET: f64 = 0.288_675_134_594_812_9; // √3/6

/// Expands `control` restricted to `[ta, tb]` into propagation steps.
///
/// Grid points are fixed per segment, so an interval that starts and ends on
/// grid points (segment boundaries in particular) reuses exactly the steps of
/// any enclosing interval.
pub fn steps(
    model: &Model,
    control: &ControlWaveform,
    ta: f64,
    tb: f64,
    policy: &StepPolicy,
) -> Result<Vec<Step>> {
    if !(ta.is_finite() && tb.is_finite()) || tb < ta {
        return Err(Error::InvalidArgument(format!("bad interval [{ta}, {tb}]")));
    }
    let eps = 1e-13 * tb.abs().max(1.0);
    let mut out = Vec::new();
    let mut cursor = ta;
    let push = |out: &mut Vec<Step>, a: f64, b: f64, fields: [f64; 2], sample| {
        if b - a > eps {
            out.push(Step { start: a, dt: b - a, fields, sample });
        }
    };
    for (si, seg) in control.segments().iter().enumerate() {
        let (s0, s1) = (seg.start(), seg.end());
        if s1 <= ta || s0 >= tb {
            continue;
        }
        // free evolution up to the segment
        if s0 > cursor {
            push(&mut out, cursor, s0.min(tb), [0.0; 2], None);
        }
        let dt_max = policy.step_for(model, seg.max_amplitude() * model.coupling);
        if !(dt_max >= MIN_STEP) {
            return Err(Error::StepPolicy(format!(
                "required step {dt_max:e} underflows on segment {si}"
            )));
        }
        let expected = (seg.end() - seg.start()) / dt_max;
        if expected > MAX_STEPS as f64 {
            return Err(Error::StepPolicy(format!(
                "segment {si} needs about {expected:.3e} steps (limit {MAX_STEPS})"
            )));
        }
        match seg {
            Segment::Sampled { start, dt, amplitudes } => {
                let sub = (dt / dt_max).ceil().max(1.0) as usize;
                let h = dt / sub as f64;
                let first = (((ta - start) / dt).floor().max(0.0)) as usize;
                for (j, &a) in amplitudes.iter().enumerate().skip(first) {
                    let c0 = start + j as f64 * dt;
                    if c0 >= tb {
                        break;
                    }
                    for q in 0..sub {
                        let lo = c0 + q as f64 * h;
                        let hi = if q + 1 == sub { c0 + dt } else { lo + h };
                        let (lo, hi) = (lo.max(ta), hi.min(tb));
                        if hi > lo {
                            push(&mut out, lo, hi, [a; 2], Some((si, j)));
                        }
                    }
                }
            }
            Segment::Resonant { start, duration, amplitude, frequency } => {
                let n = (duration / dt_max).ceil().max(1.0) as usize;
                let h = duration / n as f64;
                let first = (((ta - start) / h).floor().max(0.0)) as usize;
                let field = |t: f64| amplitude * (frequency * (t - start)).cos();
                for j in first..n {
                    let c0 = start + j as f64 * h;
                    let c1 = if j + 1 == n { start + duration } else { c0 + h };
                    if c0 >= tb {
                        break;
                    }
                    let (lo, hi) = (c0.max(ta), c1.min(tb));
                    if hi > lo {
                        let mid = 0.5 * (lo + hi);
                        let fields = match policy.scheme {
                            Scheme::Midpoint => [field(mid); 2],
                            Scheme::GaussMagnus4 => {
                                let off = GAUSS_OFFSET * (hi - lo);
                                [field(mid - off), field(mid + off)]
                            }
                        };
                        push(&mut out, lo, hi, fields, None);
                    }
                }
            }
        }
        cursor = s1.max(cursor).min(tb);
    }
    if tb > cursor {
        push(&mut out, cursor.max(ta), tb, [0.0; 2], None);
    }
    Ok(out)
}

impl Model {
    /// Effective step Hamiltonian for fields `[fa, fb]` at the Gauss nodes:
    /// H'_0 − ½(ε'_a+ε'_b)μ' − i(√3·dt/12)(ε'_a−ε'_b)[μ', H'_0].
    ///
    /// Equal fields give the plain frozen Hamiltonian.
    pub fn step_generator(&self, dt: f64, fields: [f64; 2]) -> DMatrix<Complex64> {
        let h = self.hamiltonian(0.5 * (fields[0] + fields[1])).map(|x| Complex64::new(x, 0.0));
        if fields[0] == fields[1] {
            return h;
        }
        h + self.commutator_with_h0(&self.mu)
            * Complex64::new(0.0, -(3f64.sqrt()) * dt / 12.0 * self.coupling * (fields[0] - fields[1]))
    }

    /// Change of [`Model::step_generator`] when μ' moves by `direction`.
    pub fn generator_derivative(&self, dt: f64, fields: [f64; 2], direction: &DMatrix<f64>) -> DMatrix<Complex64> {
        let mean = 0.5 * (fields[0] + fields[1]);
        let base = direction.map(|x| Complex64::new(-mean * self.coupling * x, 0.0));
        if fields[0] == fields[1] {
            return base;
        }
        base + self.commutator_with_h0(direction)
            * Complex64::new(0.0, -(3f64.sqrt()) * dt / 12.0 * self.coupling * (fields[0] - fields[1]))
    }

    /// [A, H'_0] for real A.
    fn commutator_with_h0(&self, a: &DMatrix<f64>) -> DMatrix<Complex64> {
        let e = &self.energies;
        DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| Complex64::new(a[(i, j)] * (e[j] - e[i]), 0.0))
    }
}

/// Exponential exp(−i·dt·H_eff) of one step, with the eigenbasis kept for
/// directional derivatives.
#[derive(Debug, Clone)]
pub struct StepExp {
    dt: f64,
    vectors: DMatrix<Complex64>,
    values: DVector<f64>,
    exp: DMatrix<Complex64>,
}

impl StepExp {
    pub fn new(model: &Model, step: &Step) -> Self {
        Self::with_fields(model, step.dt, step.fields)
    }

    /// Constant field over `dt`.
    pub fn constant(model: &Model, dt: f64, field: f64) -> Self {
        Self::with_fields(model, dt, [field; 2])
    }

    pub fn with_fields(model: &Model, dt: f64, fields: [f64; 2]) -> Self {
        let n = model.dimension();
        let (vectors, values) = if fields == [0.0; 2] {
            (DMatrix::identity(n, n), DVector::from_column_slice(&model.energies))
        } else if fields[0] == fields[1] {
            let eig = SymmetricEigen::new(model.hamiltonian(fields[0]));
            (eig.eigenvectors.map(|x| Complex64::new(x, 0.0)), eig.eigenvalues)
        } else {
            let eig = SymmetricEigen::new(model.step_generator(dt, fields));
            (eig.eigenvectors, eig.eigenvalues)
        };
        let phases = values.map(|l| Complex64::from_polar(1.0, -dt * l));
        let exp = &vectors * DMatrix::from_diagonal(&phases) * vectors.adjoint();
        StepExp { dt, vectors, values, exp }
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.exp
    }

    /// Derivative of exp(−i·dt·H_eff) when H_eff moves by the Hermitian
    /// `direction`.
    pub fn derivative(&self, direction: &DMatrix<Complex64>) -> DMatrix<Complex64> {
        let v = &self.vectors;
        let m = v.adjoint() * direction * v;
        let n = m.nrows();
        let dt = self.dt;
        let lam = &self.values;
        let g = DMatrix::from_fn(n, n, |a, b| {
            let phase = Complex64::from_polar(1.0, -0.5 * dt * (lam[a] + lam[b]));
            phase * sinc(0.5 * dt * (lam[a] - lam[b])) * Complex64::new(0.0, -dt) * m[(a, b)]
        });
        v * g * v.adjoint()
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

/// Propagator over an interval.
#[derive(Debug, Clone, PartialEq)]
pub struct Propagator {
    pub matrix: DMatrix<Complex64>,
    pub start: f64,
    pub end: f64,
}

impl Propagator {
    /// ‖U†U − I‖_max.
    pub fn unitarity_defect(&self) -> f64 {
        unitarity_defect(&self.matrix)
    }

    pub fn apply(&self, state: &QuantumState) -> QuantumState {
        QuantumState::normalize(&self.matrix * state.as_vector())
            .expect("unitary image of a unit vector is nonzero")
    }
}

pub fn unitarity_defect(u: &DMatrix<Complex64>) -> f64 {
    let n = u.nrows();
    let d = u.adjoint() * u - DMatrix::<Complex64>::identity(n, n);
    d.iter().fold(0.0, |m, z| m.max(z.norm()))
}

/// Max-norm distance between two complex matrices.
pub fn max_abs_diff(a: &DMatrix<Complex64>, b: &DMatrix<Complex64>) -> f64 {
    a.iter().zip(b.iter()).fold(0.0, |m, (x, y)| m.max((x - y).norm()))
}

/// Final state plus the trajectory samples that were requested.
#[derive(Debug, Clone)]
pub struct Evolution {
    pub state: QuantumState,
    /// `(τ, ψ(τ))` every `stride` steps, including both endpoints.
    pub trajectory: Vec<(f64, DVector<Complex64>)>,
    pub steps: usize,
    /// Largest |‖ψ‖ − 1| observed along the way.
    pub max_norm_drift: f64,
}

/// Evolves `psi0` from `ta` to `tb`. A `stride` records the trajectory every
/// `stride` steps.
pub fn evolve_state(
    model: &Model,
    control: &ControlWaveform,
    psi0: &QuantumState,
    ta: f64,
    tb: f64,
    policy: &StepPolicy,
    stride: Option<usize>,
) -> Result<Evolution> {
    check_interval(control, ta, tb)?;
    if psi0.dimension() != model.dimension() {
        return Err(Error::InvalidState("state dimension mismatch".into()));
    }
    let grid = steps(model, control, ta, tb, policy)?;
    let mut psi = psi0.as_vector().clone();
    let mut trajectory = Vec::new();
    let stride = stride.filter(|&s| s > 0);
    if stride.is_some() {
        trajectory.push((ta, psi.clone()));
    }
    let mut drift = 0.0_f64;
    for (idx, st) in grid.iter().enumerate() {
        psi = StepExp::new(model, st).matrix() * psi;
        drift = drift.max((psi.norm() - 1.0).abs());
        if let Some(s) = stride {
            if (idx + 1) % s == 0 || idx + 1 == grid.len() {
                trajectory.push((st.start + st.dt, psi.clone()));
            }
        }
    }
    Ok(Evolution {
        state: QuantumState::normalize(psi)?,
        trajectory,
        steps: grid.len(),
        max_norm_drift: drift,
    })
}

fn check_interval(control: &ControlWaveform, ta: f64, tb: f64) -> Result<()> {
    let slack = BOUNDARY_SLACK * control.horizon().max(1.0);
    if !(ta >= 0.0 && ta <= tb && tb <= control.horizon() + slack) {
        return Err(Error::InvalidArgument(format!(
            "interval [{ta}, {tb}] not inside [0, {}]",
            control.horizon()
        )));
    }
    Ok(())
}

/// U(tb, ta).
pub fn propagator(
    model: &Model,
    control: &ControlWaveform,
    ta: f64,
    tb: f64,
    policy: &StepPolicy,
) -> Result<Propagator> {
    check_interval(control, ta, tb)?;
    let n = model.dimension();
    let mut u = DMatrix::<Complex64>::identity(n, n);
    for st in steps(model, control, ta, tb, policy)? {
        u = StepExp::new(model, &st).matrix() * u;
    }
    Ok(Propagator { matrix: u, start: ta, end: tb })
}

/// P_if = |⟨f|U(⊤,0)|i⟩|².
pub fn population(
    spec: &SystemSpec,
    model: &Model,
    control: &ControlWaveform,
    policy: &StepPolicy,
) -> Result<f64> {
    let psi0 = QuantumState::basis(model.dimension(), spec.initial());
    let ev = evolve_state(model, control, &psi0, 0.0, control.horizon(), policy, None)?;
    Ok(ev.state.as_vector()[spec.measured()].norm_sqr())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_level() -> (SystemSpec, DipoleMatrix, Model) {
        let spec = SystemSpec::new(vec![0.0, 1.0], 0, 1).unwrap();
        let dipole = DipoleMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let model = Model::new(&spec, &dipole).unwrap();
        (spec, dipole, model)
    }

    fn three_level() -> (SystemSpec, DipoleMatrix, Model) {
        let spec = SystemSpec::new(vec![0.0, 1.0, 2.5], 0, 2).unwrap();
        let dipole = DipoleMatrix::from_rows(&[
            vec![0.0, 1.0, 0.3],
            vec![1.0, 0.0, 0.7],
            vec![0.3, 0.7, 0.0],
        ])
        .unwrap();
        let model = Model::new(&spec, &dipole).unwrap();
        (spec, dipole, model)
    }

    fn wiggly(horizon: f64) -> ControlWaveform {
        let amps: Vec<f64> = (0..40).map(|j| 0.3 * ((j as f64) * 0.7).sin()).collect();
        ControlWaveform::new(
            horizon,
            vec![
                Segment::Sampled { start: 1.0, dt: 0.25, amplitudes: amps },
                Segment::Resonant { start: 12.0, duration: 20.0, amplitude: 0.2, frequency: 0.4 },
            ],
        )
        .unwrap()
    }

    #[test]
    fn free_evolution_is_diagonal_phase() {
        let (_, _, model) = three_level();
        let control = ControlWaveform::zero(10.0);
        let u = propagator(&model, &control, 1.5, 7.0, &StepPolicy::default()).unwrap();
        for (k, e) in model.energies().iter().enumerate() {
            let expected = Complex64::from_polar(1.0, -e * 5.5);
            assert!((u.matrix[(k, k)] - expected).norm() < 1e-14);
        }
        let psi = QuantumState::basis(3, 1);
        let ev = evolve_state(&model, &control, &psi, 0.0, 10.0, &StepPolicy::default(), None)
            .unwrap();
        assert!((ev.state.populations()[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_field_population() {
        let (spec, _, model) = two_level();
        let control = ControlWaveform::zero(3.0);
        assert!(population(&spec, &model, &control, &StepPolicy::default()).unwrap() < 1e-30);
        let same = SystemSpec::new(vec![0.0, 1.0], 1, 1).unwrap();
        assert!((population(&same, &model, &control, &StepPolicy::default()).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn unitarity_and_composition() {
        let (_, _, model) = three_level();
        let control = wiggly(40.0);
        let policy = StepPolicy::default();
        let u = propagator(&model, &control, 0.0, 40.0, &policy).unwrap();
        assert!(u.unitarity_defect() < UNITARITY_TOL);
        // split at a segment boundary and inside a free gap
        for b in [11.0, 12.0, 32.0] {
            let u1 = propagator(&model, &control, 0.0, b, &policy).unwrap();
            let u2 = propagator(&model, &control, b, 40.0, &policy).unwrap();
            assert!(max_abs_diff(&(&u2.matrix * &u1.matrix), &u.matrix) < 1e-9);
        }
        let id = propagator(&model, &control, 5.0, 5.0, &policy).unwrap();
        assert_eq!(id.matrix, DMatrix::identity(3, 3));
    }

    #[test]
    fn sampled_substeps_are_exact() {
        let (_, _, model) = three_level();
        let control = wiggly(40.0);
        let coarse = propagator(&model, &control, 0.0, 11.0, &StepPolicy::default()).unwrap();
        let fine = propagator(&model, &control, 0.0, 11.0, &StepPolicy::default().with_max_step(0.01))
            .unwrap();
        assert!(max_abs_diff(&coarse.matrix, &fine.matrix) < 1e-12);
    }

    #[test]
    fn midpoint_is_second_order() {
        let (_, _, model) = two_level();
        let control = ControlWaveform::new(
            30.0,
            vec![Segment::Resonant { start: 0.0, duration: 30.0, amplitude: 0.3, frequency: 1.0 }],
        )
        .unwrap();
        let psi = QuantumState::basis(2, 0);
        let run = |h: f64, scheme: Scheme| {
            let policy = StepPolicy::default().with_max_step(h).with_scheme(scheme);
            evolve_state(&model, &control, &psi, 0.0, 30.0, &policy, None).unwrap().state.into_vector()
        };
        let reference = run(1e-3, Scheme::GaussMagnus4);
        let e1 = (run(0.1, Scheme::Midpoint) - &reference).norm();
        let e2 = (run(0.05, Scheme::Midpoint) - &reference).norm();
        let ratio = e1 / e2;
        assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn gauss_magnus_is_fourth_order() {
        let (_, _, model) = two_level();
        let control = ControlWaveform::new(
            30.0,
            vec![Segment::Resonant { start: 0.0, duration: 30.0, amplitude: 0.3, frequency: 1.0 }],
        )
        .unwrap();
        let psi = QuantumState::basis(2, 0);
        let run = |h: f64| {
            let policy = StepPolicy::default().with_max_step(h);
            evolve_state(&model, &control, &psi, 0.0, 30.0, &policy, None).unwrap().state.into_vector()
        };
        let reference = run(2e-3);
        let e1 = (run(0.2) - &reference).norm();
        let e2 = (run(0.1) - &reference).norm();
        let ratio = e1 / e2;
        assert!((13.0..19.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn trajectory_stride_and_norm() {
        let (_, _, model) = three_level();
        let control = wiggly(40.0);
        let ev = evolve_state(
            &model,
            &control,
            &QuantumState::basis(3, 0),
            0.0,
            40.0,
            &StepPolicy::default(),
            Some(10),
        )
        .unwrap();
        assert!(ev.max_norm_drift < 1e-12);
        assert_eq!(ev.trajectory.first().unwrap().0, 0.0);
        assert!((ev.trajectory.last().unwrap().0 - 40.0).abs() < 1e-12);
        assert_eq!(ev.trajectory.len(), 2 + (ev.steps - 1) / 10);
    }

    #[test]
    fn rejects_bad_waveforms() {
        let overlap = ControlWaveform::new(
            10.0,
            vec![
                Segment::Resonant { start: 0.0, duration: 5.0, amplitude: 1.0, frequency: 1.0 },
                Segment::Resonant { start: 4.0, duration: 2.0, amplitude: 1.0, frequency: 1.0 },
            ],
        );
        assert!(overlap.is_err());
        let past = ControlWaveform::new(
            3.0,
            vec![Segment::Sampled { start: 0.0, dt: 1.0, amplitudes: vec![0.0; 4] }],
        );
        assert!(past.is_err());
        let nan = ControlWaveform::new(
            3.0,
            vec![Segment::Sampled { start: 0.0, dt: 1.0, amplitudes: vec![f64::NAN] }],
        );
        assert!(nan.is_err());
        let json = r#"{"horizon":2,"segments":[{"kind":"sampled","start":0,"dt":1,"amplitudes":[0.1,0.2]}]}"#;
        let c: ControlWaveform = serde_json::from_str(json).unwrap();
        assert_eq!(c.field_at(1.5), 0.2);
        assert!(serde_json::from_str::<ControlWaveform>(r#"{"horizon":1,"segments":[{"kind":"sampled","start":0,"dt":1,"amplitudes":[0,0]}]}"#).is_err());
    }

    #[test]
    fn step_underflow_is_reported() {
        let (_, _, model) = two_level();
        let control = ControlWaveform::new(
            1.0,
            vec![Segment::Sampled { start: 0.0, dt: 1.0, amplitudes: vec![1e15] }],
        )
        .unwrap();
        let err = propagator(&model, &control, 0.0, 1.0, &StepPolicy::default()).unwrap_err();
        assert!(matches!(err, Error::StepPolicy(_)));
    }

    #[test]
    fn step_derivative_matches_finite_difference() {
        let (_, _, model) = three_level();
        let dir = crate::qsys::sigma_x(3, crate::qsys::Pair { l: 0, k: 2 });
        let base = StepExp::constant(&model, 0.3, 0.7);
        let analytic = base.derivative(&dir.map(|x| Complex64::new(x, 0.0)));
        let h = 1e-6;
        let shifted = |s: f64| {
            let ham = model.hamiltonian(0.7) + &dir * s;
            let eig = SymmetricEigen::new(ham);
            let v = eig.eigenvectors.map(|x| Complex64::new(x, 0.0));
            let d = eig.eigenvalues.map(|l| Complex64::from_polar(1.0, -0.3 * l));
            &v * DMatrix::from_diagonal(&d) * v.transpose()
        };
        let fd = (shifted(h) - shifted(-h)) / Complex64::new(2.0 * h, 0.0);
        assert!(max_abs_diff(&analytic, &fd) < 1e-8);
    }
}
