//! Three-part discriminating controls: steer |i⟩ to one end of the target
//! transition, drive that transition resonantly for 1/ξ², then steer the
//! resulting state ψ2 onto |f⟩.
//!
//! Steering seeds are resonant π-pulse chains along shortest paths of the
//! coupling graph, sampled on a fixed grid and then refined by L-BFGS on the
//! samples with exact per-sample derivatives.

use std::collections::VecDeque;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::averaging::resonant_drive;
use crate::error::{Error, Result};
use crate::propagate::{evolve_state, ControlWaveform, Model, Segment, StepExp, StepPolicy};
use crate::qsys::{validate_system, DipoleMatrix, Pair, QuantumState, SystemSpec, DEFAULT_DEGENERACY_TOL};

/// Settings for state-to-state steering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteerConfig {
    /// Normalized strength ξ_steer of the seed π-pulses.
    pub xi_steer: f64,
    /// Samples per period of the fastest transition.
    pub samples_per_period: f64,
    /// Largest acceptable 1 − F.
    pub max_infidelity: f64,
    /// Refinement keeps going until 1 − F drops below this.
    pub polish_infidelity: f64,
    pub max_iterations: usize,
    /// Number of drive phases tried when rotating a superposition.
    pub phase_scan: usize,
}

impl Default for SteerConfig {
    fn default() -> Self {
        SteerConfig {
            xi_steer: 0.05,
            samples_per_period: 20.0,
            max_infidelity: 1e-6,
            polish_infidelity: 1e-11,
            max_iterations: 1000,
            phase_scan: 16,
        }
    }
}

/// Settings for building discriminating controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RamseyConfig {
    pub steer: SteerConfig,
    pub xi_max: f64,
    pub policy: StepPolicy,
    /// Make the closing segment first-order insensitive to every support
    /// entry, so it adds nothing to ∂P/∂μ'_p.
    pub desensitize: bool,
}

impl Default for RamseyConfig {
    fn default() -> Self {
        RamseyConfig { steer: SteerConfig::default(), xi_max: 0.1, policy: StepPolicy::default(), desensitize: true }
    }
}

/// Result of [`steer`].
#[derive(Debug, Clone, Serialize)]
pub struct Steering {
    /// Control on `[0, duration]`; empty when no steering was needed.
    pub control: ControlWaveform,
    /// |⟨ψ_to|U|ψ_from⟩|², recomputed by plain propagation.
    pub fidelity: f64,
    pub seed_fidelity: f64,
    pub iterations: usize,
}

/// Fails unless the coupling graph is connected and transitions are resolvable.
pub fn check_controllable(spec: &SystemSpec, dipole: &DipoleMatrix) -> Result<()> {
    if spec.dimension() != dipole.dimension() {
        return Err(Error::InvalidArgument("system and dipole dimensions differ".into()));
    }
    if !dipole.is_connected() {
        return Err(Error::Uncontrollable("coupling graph is not connected".into()));
    }
    let report = validate_system(spec, DEFAULT_DEGENERACY_TOL);
    if !report.is_ok() {
        return Err(Error::Uncontrollable(format!(
            "{} degenerate transition pairs",
            report.violations.len()
        )));
    }
    Ok(())
}

/// Piecewise-constant control taking `from` to `to` up to a global phase.
pub fn steer(
    spec: &SystemSpec,
    dipole: &DipoleMatrix,
    from: &QuantumState,
    to: &QuantumState,
    config: &SteerConfig,
    policy: &StepPolicy,
) -> Result<Steering> {
    steer_impl(spec, dipole, from, to, None, config, policy)
}

/// Like [`steer`], but also drives to zero the first-order sensitivity of
/// |⟨to|U|probe⟩|² to each of `pairs`, so that the steering segment adds
/// nothing to ∂P/∂μ'_p when the state entering it is `probe`.
pub fn steer_desensitized(
    spec: &SystemSpec,
    dipole: &DipoleMatrix,
    from: &QuantumState,
    to: &QuantumState,
    probe: &QuantumState,
    pairs: &[Pair],
    config: &SteerConfig,
    policy: &StepPolicy,
) -> Result<Steering> {
    if probe.dimension() != spec.dimension() {
        return Err(Error::InvalidState("probe dimension mismatch".into()));
    }
    steer_impl(spec, dipole, from, to, Some((probe, pairs)), config, policy)
}

fn steer_impl(
    spec: &SystemSpec,
    dipole: &DipoleMatrix,
    from: &QuantumState,
    to: &QuantumState,
    desensitize: Option<(&QuantumState, &[Pair])>,
    config: &SteerConfig,
    policy: &StepPolicy,
) -> Result<Steering> {
    check_controllable(spec, dipole)?;
    let n = spec.dimension();
    if from.dimension() != n || to.dimension() != n {
        return Err(Error::InvalidState("state dimension mismatch".into()));
    }
    if !(config.xi_steer > 0.0 && config.samples_per_period >= 2.0) {
        return Err(Error::InvalidArgument("steering needs xi_steer > 0 and at least 2 samples per period".into()));
    }
    if desensitize.is_none() && 1.0 - from.fidelity(to) <= config.polish_infidelity {
        return Ok(Steering {
            control: ControlWaveform::zero(0.0),
            fidelity: from.fidelity(to),
            seed_fidelity: from.fidelity(to),
            iterations: 0,
        });
    }
    let model = Model::new(spec, dipole)?;
    let dt = 2.0 * PI / (config.samples_per_period * spec.max_transition_frequency());
    let problem = Problem { model: &model, dt, from: from.as_vector(), to: to.as_vector() };

    let seed = seed_amplitudes(spec, dipole, &problem, from, to, config)?;
    let seed_fidelity = 1.0 - problem.infidelity(&seed);
    let max_move = 0.1 * model.field_for(1.0);
    let (amps, iterations) = match desensitize {
        None => lbfgs(|x| problem.evaluate(x), max_move, seed, config.polish_infidelity, config.max_iterations),
        Some((probe, pairs)) => {
            let robust = Desensitized::new(&problem, probe.as_vector(), pairs);
            lbfgs(|x| robust.evaluate(x), max_move, seed, config.polish_infidelity, config.max_iterations)
        }
    };

    let control = ControlWaveform::new(
        dt * amps.len() as f64,
        vec![Segment::Sampled { start: 0.0, dt, amplitudes: amps }],
    )?;
    let fidelity = evolve_state(&model, &control, from, 0.0, control.horizon(), policy, None)?
        .state
        .fidelity(to);
    if 1.0 - fidelity > config.max_infidelity {
        return Err(Error::SteeringFailed { best_fidelity: fidelity, target: 1.0 - config.max_infidelity });
    }
    Ok(Steering { control, fidelity, seed_fidelity, iterations })
}

/// Sampled steering problem: minimize 1 − |⟨to|U(x)|from⟩|² over samples x.
struct Problem<'a> {
    model: &'a Model,
    dt: f64,
    from: &'a DVector<Complex64>,
    to: &'a DVector<Complex64>,
}

impl Problem<'_> {
    fn overlap(&self, x: &[f64]) -> Complex64 {
        let psi = x.iter().fold(self.from.clone(), |psi, &a| {
            StepExp::constant(self.model, self.dt, a).matrix() * psi
        });
        self.to.dotc(&psi)
    }

    fn infidelity(&self, x: &[f64]) -> f64 {
        1.0 - self.overlap(x).norm_sqr()
    }

    /// 1 − F and its gradient.
    fn evaluate(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let exps: Vec<StepExp> = x.iter().map(|&a| StepExp::constant(self.model, self.dt, a)).collect();
        let mut forward = Vec::with_capacity(x.len() + 1);
        forward.push(self.from.clone());
        for e in &exps {
            let next = e.matrix() * forward.last().unwrap();
            forward.push(next);
        }
        let z = self.to.dotc(forward.last().unwrap());
        // ∂H/∂a = −κμ' for every sample
        let direction = self.model.mu().map(|m| Complex64::new(-self.model.coupling() * m, 0.0));
        let mut grad = vec![0.0; x.len()];
        let mut costate = self.to.clone();
        for j in (0..x.len()).rev() {
            let dz = costate.dotc(&(exps[j].derivative(&direction) * &forward[j]));
            grad[j] = -2.0 * (z.conj() * dz).re;
            costate = exps[j].matrix().adjoint() * costate;
        }
        (1.0 - z.norm_sqr(), grad)
    }
}

/// Steering objective plus the squared sensitivities T_p = ∂|⟨to|U|probe⟩|²/∂μ'_p.
struct Desensitized<'a> {
    base: &'a Problem<'a>,
    probe: &'a DVector<Complex64>,
    sigmas: Vec<DMatrix<Complex64>>,
}

impl<'a> Desensitized<'a> {
    fn new(base: &'a Problem<'a>, probe: &'a DVector<Complex64>, pairs: &[Pair]) -> Self {
        let n = base.model.dimension();
        let kappa = base.model.coupling();
        let sigmas = pairs
            .iter()
            .map(|&p| crate::qsys::sigma_x(n, p).map(|v| Complex64::new(-kappa * v, 0.0)))
            .collect();
        Desensitized { base, probe, sigmas }
    }

    /// ∂E/∂μ'_p for a sample of amplitude `a`.
    fn dmu(&self, a: f64, sigma: &DMatrix<Complex64>) -> DMatrix<Complex64> {
        StepExp::constant(self.base.model, self.base.dt, a).derivative(sigma) * Complex64::new(a, 0.0)
    }

    fn evaluate(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let (infid, mut grad) = self.base.evaluate(x);
        let model = self.base.model;
        let dt = self.base.dt;
        let m = self.sigmas.len();
        let k = x.len();
        let field_dir = model.mu().map(|v| Complex64::new(-model.coupling() * v, 0.0));
        let h = 1e-4 / model.coupling();

        let exps: Vec<StepExp> = x.iter().map(|&a| StepExp::constant(model, dt, a)).collect();
        let dfield: Vec<DMatrix<Complex64>> = exps.iter().map(|e| e.derivative(&field_dir)).collect();
        let dmu: Vec<Vec<DMatrix<Complex64>>> = exps
            .iter()
            .zip(x)
            .map(|(e, &a)| self.sigmas.iter().map(|s| e.derivative(s) * Complex64::new(a, 0.0)).collect())
            .collect();

        let mut fwd = Vec::with_capacity(k + 1);
        fwd.push(self.probe.clone());
        let mut der = vec![vec![DVector::<Complex64>::zeros(self.probe.len())]; m];
        for j in 0..k {
            for p in 0..m {
                let next = exps[j].matrix() * &der[p][j] + &dmu[j][p] * &fwd[j];
                der[p].push(next);
            }
            let next = exps[j].matrix() * &fwd[j];
            fwd.push(next);
        }
        let to = self.base.to;
        let z = to.dotc(&fwd[k]);
        let dz: Vec<Complex64> = (0..m).map(|p| to.dotc(&der[p][k])).collect();
        let t: Vec<f64> = dz.iter().map(|d| 2.0 * (d * z.conj()).re).collect();

        let mut b = to.clone();
        let mut g = vec![DVector::<Complex64>::zeros(to.len()); m];
        for j in (0..k).rev() {
            let gphi = &dfield[j] * &fwd[j];
            let dz_dx = b.dotc(&gphi);
            for p in 0..m {
                let mixed = (self.dmu(x[j] + h, &self.sigmas[p]) - self.dmu(x[j] - h, &self.sigmas[p]))
                    / Complex64::new(2.0 * h, 0.0);
                let ddz = b.dotc(&(mixed * &fwd[j])) + g[p].dotc(&gphi) + b.dotc(&(&dfield[j] * &der[p][j]));
                let dt_dx = 2.0 * (ddz * z.conj() + dz[p] * dz_dx.conj()).re;
                grad[j] += 2.0 * t[p] * dt_dx;
                g[p] = dmu[j][p].adjoint() * &b + exps[j].matrix().adjoint() * &g[p];
            }
            b = exps[j].matrix().adjoint() * b;
        }
        (infid + t.iter().map(|v| v * v).sum::<f64>(), grad)
    }
}

/// Samples of amplitude·cos(ω·(j+½)·dt + φ).
fn sampled_cosine(amplitude: f64, omega: f64, phase: f64, dt: f64, count: usize) -> Vec<f64> {
    (0..count).map(|j| amplitude * (omega * (j as f64 + 0.5) * dt + phase).cos()).collect()
}

/// Resonant pulse on `edge` rotating by half-angle `theta` under RWA.
fn edge_pulse(spec: &SystemSpec, dipole: &DipoleMatrix, model: &Model, edge: Pair, theta: f64, phase: f64, dt: f64, xi: f64) -> Vec<f64> {
    let c = dipole.entry(edge).abs();
    let duration = 2.0 * theta / (xi * c);
    let count = (duration / dt).round().max(1.0) as usize;
    let omega = spec.transition_frequency(edge.k, edge.l).abs();
    sampled_cosine(model.field_for(xi), omega, phase, dt, count)
}

fn chain(spec: &SystemSpec, dipole: &DipoleMatrix, model: &Model, from: usize, to: usize, dt: f64, xi: f64) -> Result<Vec<f64>> {
    let path = dipole
        .shortest_path(from, to)
        .ok_or_else(|| Error::Uncontrollable(format!("no path from level {} to {}", from + 1, to + 1)))?;
    let mut out = Vec::new();
    for w in path.windows(2) {
        let edge = Pair::new(w[0], w[1])?;
        out.extend(edge_pulse(spec, dipole, model, edge, PI / 2.0, 0.0, dt, xi));
    }
    Ok(out)
}

fn dominant_levels(state: &QuantumState) -> Vec<usize> {
    let pops = state.populations();
    let mut idx: Vec<usize> = (0..pops.len()).collect();
    idx.sort_by(|a, b| pops[*b].total_cmp(&pops[*a]));
    idx
}

fn seed_amplitudes(
    spec: &SystemSpec,
    dipole: &DipoleMatrix,
    problem: &Problem,
    from: &QuantumState,
    to: &QuantumState,
    config: &SteerConfig,
) -> Result<Vec<f64>> {
    let model = problem.model;
    let xi = config.xi_steer;
    let dt = problem.dt;
    let target = dominant_levels(to)[0];
    let order = dominant_levels(from);
    let pops = from.populations();
    let (a, b) = (order[0], order[1]);

    let mut candidates = vec![chain(spec, dipole, model, a, target, dt, xi)?];
    let edge = Pair::new(a, b)?;
    if pops[b] > 1e-6 && dipole.entry(edge) != 0.0 {
        // rotate the two dominant components onto one level, then chain
        for (keep, other) in [(a, b), (b, a)] {
            let theta = (pops[other] / pops[keep]).sqrt().atan();
            let tail = chain(spec, dipole, model, keep, target, dt, xi)?;
            for m in 0..config.phase_scan.max(1) {
                let phase = 2.0 * PI * m as f64 / config.phase_scan.max(1) as f64;
                let mut x = edge_pulse(spec, dipole, model, edge, theta, phase, dt, xi);
                x.extend_from_slice(&tail);
                candidates.push(x);
            }
        }
    }
    Ok(candidates
        .into_iter()
        .map(|x| (problem.infidelity(&x), x))
        .min_by(|p, q| p.0.total_cmp(&q.0))
        .map(|(_, x)| x)
        .expect("at least one candidate"))
}

/// Limited-memory BFGS with Armijo backtracking. Returns the best point and
/// the number of iterations used.
fn lbfgs<F>(eval: F, max_move: f64, mut x: Vec<f64>, tol: f64, max_iter: usize) -> (Vec<f64>, usize)
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    const MEMORY: usize = 12;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    let (mut f, mut g) = eval(&x);
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iter = 0;
    while iter < max_iter && f > tol {
        iter += 1;
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = history.back().map_or(1.0, |(s, y, _)| dot(s, y) / dot(y, y));
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.into_iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            history.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        if history.is_empty() {
            // first step from a gradient: keep the trial move modest
            let norm = dot(&dir, &dir).sqrt();
            let cap = max_move / norm.max(f64::MIN_POSITIVE);
            if cap < 1.0 {
                dir.iter_mut().for_each(|d| *d *= cap);
                slope *= cap;
            }
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect();
            let (ft, gt) = eval(&trial);
            if ft <= f + 1e-4 * step * slope {
                accepted = Some((trial, ft, gt));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gn)) = accepted else { break };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-300 {
            if history.len() == MEMORY {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        x = xn;
        f = fnew;
        g = gn;
        if dot(&g, &g).sqrt() < 1e-15 {
            break;
        }
    }
    (x, iter)
}

/// Normalized transition start (|a⟩ + i|b⟩)/√2.
fn ramsey_superposition(n: usize, entry: usize, other: usize) -> QuantumState {
    let mut v = DVector::zeros(n);
    v[entry] = Complex64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
    v[other] = Complex64::new(0.0, std::f64::consts::FRAC_1_SQRT_2);
    QuantumState::new(v).expect("unit by construction")
}

/// ψ2 = U(τ2, τ1)(|entry⟩ + i|other⟩)/√2 for the resonant middle segment on
/// `pair` at strength ξ, where `entry` is one end of `pair`.
pub fn psi2_target(
    spec: &SystemSpec,
    dipole: &DipoleMatrix,
    pair: Pair,
    entry: usize,
    xi: f64,
    policy: &StepPolicy,
) -> Result<QuantumState> {
    let other = pair
        .partner(entry)
        .ok_or_else(|| Error::InvalidArgument(format!("level {} is not in {pair}", entry + 1)))?;
    let model = Model::new(spec, dipole)?;
    let drive = resonant_drive(spec, dipole, pair, xi)?;
    let start = ramsey_superposition(spec.dimension(), entry, other);
    Ok(evolve_state(&model, &drive, &start, 0.0, drive.horizon(), policy, None)?.state)
}

/// End of `pair` nearer to `level` in the coupling graph; ties go to `l`.
pub fn entry_level(dipole: &DipoleMatrix, pair: Pair, level: usize) -> usize {
    let dist = |to: usize| dipole.shortest_path(level, to).map_or(usize::MAX, |p| p.len());
    if dist(pair.k) < dist(pair.l) {
        pair.k
    } else {
        pair.l
    }
}

/// The assembled three-part control for one support pair.
#[derive(Debug, Clone, Serialize)]
pub struct DiscriminatingControl {
    pub pair: Pair,
    pub xi: f64,
    /// Level of `pair` reached by the first steering segment (0-based).
    pub entry: usize,
    pub tau1: f64,
    pub tau2: f64,
    pub horizon: f64,
    pub control: ControlWaveform,
    pub f1: f64,
    pub f2: f64,
    #[serde(skip)]
    pub psi2: QuantumState,
}

pub fn build_discriminating_control(
    spec: &SystemSpec,
    dipole: &DipoleMatrix,
    pair: Pair,
    xi: f64,
    config: &RamseyConfig,
) -> Result<DiscriminatingControl> {
    if dipole.support_index(pair).is_none() {
        return Err(Error::NotInSupport(pair));
    }
    if !(xi > 0.0 && xi <= config.xi_max) {
        return Err(Error::InvalidArgument(format!("ξ = {xi} outside (0, {}]", config.xi_max)));
    }
    check_controllable(spec, dipole)?;
    let n = spec.dimension();
    let policy = &config.policy;
    let entry = entry_level(dipole, pair, spec.initial());

    let initial = QuantumState::basis(n, spec.initial());
    let psi1 = QuantumState::basis(n, entry);
    let first = steer(spec, dipole, &initial, &psi1, &config.steer, policy)?;
    let psi2 = psi2_target(spec, dipole, pair, entry, xi, policy)?;
    let middle = resonant_drive(spec, dipole, pair, xi)?;
    let target = QuantumState::basis(n, spec.measured());
    let last = if config.desensitize {
        // state actually entering the closing segment
        let model = Model::new(spec, dipole)?;
        let after_first = evolve_state(&model, &first.control, &initial, 0.0, first.control.horizon(), policy, None)?.state;
        let probe = evolve_state(&model, &middle, &after_first, 0.0, middle.horizon(), policy, None)?.state;
        steer_desensitized(spec, dipole, &psi2, &target, &probe, dipole.support(), &config.steer, policy)?
    } else {
        steer(spec, dipole, &psi2, &target, &config.steer, policy)?
    };

    let control = first.control.then(&middle)?.then(&last.control)?;
    let tau1 = first.control.horizon();
    let tau2 = tau1 + middle.horizon();
    Ok(DiscriminatingControl {
        pair,
        xi,
        entry,
        tau1,
        tau2,
        horizon: control.horizon(),
        control,
        f1: first.fidelity,
        f2: last.fidelity,
        psi2,
    })
}

impl DiscriminatingControl {
    /// Same control with zero field appended up to `horizon`.
    pub fn padded_to(&self, horizon: f64) -> Result<Self> {
        let mut out = self.clone();
        out.control = self.control.padded_to(horizon)?;
        out.horizon = horizon;
        Ok(out)
    }

    /// |⟨ψ1|U(τ1,0)|i⟩|² and |⟨f|U(⊤,τ2)|ψ2⟩|² recomputed under `policy`.
    pub fn recompute_fidelities(&self, spec: &SystemSpec, dipole: &DipoleMatrix, policy: &StepPolicy) -> Result<(f64, f64)> {
        let model = Model::new(spec, dipole)?;
        let n = spec.dimension();
        let psi1 = QuantumState::basis(n, self.entry);
        let start = QuantumState::basis(n, spec.initial());
        let f1 = evolve_state(&model, &self.control, &start, 0.0, self.tau1, policy, None)?.state.fidelity(&psi1);
        let end = evolve_state(&model, &self.control, &self.psi2, self.tau2, self.horizon, policy, None)?.state;
        let f2 = end.fidelity(&QuantumState::basis(n, spec.measured()));
        Ok((f1, f2))
    }
}

/// One discriminating control per support pair, all padded to a common ⊤.
pub fn build_control_set(
    spec: &SystemSpec,
    dipole: &DipoleMatrix,
    xi: f64,
    config: &RamseyConfig,
) -> Result<Vec<DiscriminatingControl>> {
    let built = dipole
        .support()
        .par_iter()
        .map(|&pair| build_discriminating_control(spec, dipole, pair, xi, config))
        .collect::<Result<Vec<_>>>()?;
    let horizon = built.iter().fold(0.0_f64, |m, c| m.max(c.horizon));
    built.iter().map(|c| c.padded_to(horizon)).collect()
}

/// Controls × pairs matrix of ∂P_if/∂μ'_p.
pub fn sensitivity_matrix(
    spec: &SystemSpec,
    dipole: &DipoleMatrix,
    controls: &[DiscriminatingControl],
    policy: &StepPolicy,
) -> Result<DMatrix<f64>> {
    let rows = controls
        .par_iter()
        .map(|c| crate::sensitivity::dp_dmu(spec, dipole, &c.control, policy).map(|s| s.values))
        .collect::<Result<Vec<_>>>()?;
    let m = dipole.support_len();
    Ok(DMatrix::from_fn(rows.len(), m, |r, p| rows[r][p]))
}
