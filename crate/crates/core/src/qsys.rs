//! System description: free energies, the real dipole coupling and the
//! Pauli-like operators on a single transition.
//!
//! Levels are indexed from 0 in the API. Files and printed output use
//! 1-based indices.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default minimum separation between distinct transition frequencies,
/// in normalized units.
pub const DEFAULT_DEGENERACY_TOL: f64 = 1e-6;

/// Unordered level pair with `l < k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pair {
    pub l: usize,
    pub k: usize,
}

impl Pair {
    /// Builds the pair from two distinct levels in either order.
    pub fn new(a: usize, b: usize) -> Result<Self> {
        if a == b {
            return Err(Error::InvalidArgument(format!(
                "pair needs two distinct levels, got ({}, {})",
                a + 1,
                b + 1
            )));
        }
        Ok(Pair { l: a.min(b), k: a.max(b) })
    }

    /// Parses a 1-based pair such as `[1, 2]`.
    pub fn from_one_based(a: usize, b: usize) -> Result<Self> {
        if a == 0 || b == 0 {
            return Err(Error::InvalidArgument("pair indices are 1-based".into()));
        }
        Pair::new(a - 1, b - 1)
    }

    pub fn contains(&self, level: usize) -> bool {
        self.l == level || self.k == level
    }

    /// The other end of the pair, if `level` belongs to it.
    pub fn partner(&self, level: usize) -> Option<usize> {
        if level == self.l {
            Some(self.k)
        } else if level == self.k {
            Some(self.l)
        } else {
            None
        }
    }
}

impl fmt::Display for Pair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.l + 1, self.k + 1)
    }
}

impl Serialize for Pair {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        [self.l + 1, self.k + 1].serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pair {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [a, b] = <[usize; 2]>::deserialize(d)?;
        Pair::from_one_based(a, b).map_err(serde::de::Error::custom)
    }
}

/// Diagonal free Hamiltonian plus the prepared and measured levels.
///
/// Energies are kept as given; `h0_norm` is the max norm used to rescale
/// time and frequencies to dimensionless units.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemSpec {
    energies: Vec<f64>,
    h0_norm: f64,
    initial: usize,
    measured: usize,
}

impl SystemSpec {
    pub fn new(energies: Vec<f64>, initial: usize, measured: usize) -> Result<Self> {
        let n = energies.len();
        if n < 2 {
            return Err(Error::InvalidSystem(format!("need at least 2 levels, got {n}")));
        }
        if let Some(bad) = energies.iter().position(|e| !e.is_finite()) {
            return Err(Error::InvalidSystem(format!("energy E_{} is not finite", bad + 1)));
        }
        let h0_norm = energies.iter().fold(0.0_f64, |m, e| m.max(e.abs()));
        if h0_norm == 0.0 {
            return Err(Error::InvalidSystem("all energies are zero".into()));
        }
        for (name, idx) in [("initial", initial), ("measured", measured)] {
            if idx >= n {
                return Err(Error::InvalidSystem(format!(
                    "{name} level {} out of range 1..={n}",
                    idx + 1
                )));
            }
        }
        Ok(SystemSpec { energies, h0_norm, initial, measured })
    }

    pub fn dimension(&self) -> usize {
        self.energies.len()
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    /// ‖H_0‖ in input units.
    pub fn h0_norm(&self) -> f64 {
        self.h0_norm
    }

    /// E_k / ‖H_0‖; the largest magnitude is exactly 1.
    pub fn normalized_energies(&self) -> Vec<f64> {
        self.energies.iter().map(|e| e / self.h0_norm).collect()
    }

    pub fn initial(&self) -> usize {
        self.initial
    }

    pub fn measured(&self) -> usize {
        self.measured
    }

    /// Normalized transition frequency ω'_mn = (E_m − E_n)/‖H_0‖.
    pub fn transition_frequency(&self, m: usize, n: usize) -> f64 {
        (self.energies[m] - self.energies[n]) / self.h0_norm
    }

    /// Raw energy gap E_m − E_n in input units.
    pub fn transition_gap(&self, m: usize, n: usize) -> f64 {
        self.energies[m] - self.energies[n]
    }

    /// Largest |ω'_mn| over all level pairs.
    pub fn max_transition_frequency(&self) -> f64 {
        let e = self.normalized_energies();
        let hi = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = e.iter().cloned().fold(f64::INFINITY, f64::min);
        hi - lo
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Degeneracy {
    /// Two distinct transitions whose |frequencies| are closer than the tolerance.
    CoincidentTransitions { first: Pair, second: Pair, first_frequency: f64, second_frequency: f64 },
    /// A transition with (near) zero frequency, i.e. degenerate levels.
    ZeroFrequency { pair: Pair, frequency: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub tolerance: f64,
    pub violations: Vec<Degeneracy>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    /// Converts a failed report into an error.
    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            return Ok(());
        }
        let msg = self
            .violations
            .iter()
            .map(|v| match v {
                Degeneracy::CoincidentTransitions { first, second, .. } => {
                    format!("|ω{first}| ≈ |ω{second}|")
                }
                Degeneracy::ZeroFrequency { pair, .. } => format!("ω{pair} ≈ 0"),
            })
            .collect::<Vec<_>>()
            .join(", ");
        Err(Error::DegenerateSpectrum(msg))
    }
}

/// Lists every pair of distinct transitions whose normalized frequencies
/// are closer than `tol`.
pub fn validate_system(spec: &SystemSpec, tol: f64) -> ValidationReport {
    let n = spec.dimension();
    let pairs: Vec<(Pair, f64)> = all_pairs(n)
        .map(|p| (p, spec.transition_frequency(p.k, p.l).abs()))
        .collect();
    let mut violations = Vec::new();
    for &(p, w) in &pairs {
        if w < tol {
            violations.push(Degeneracy::ZeroFrequency { pair: p, frequency: w });
        }
    }
    for (a, &(pa, wa)) in pairs.iter().enumerate() {
        for &(pb, wb) in &pairs[a + 1..] {
            if (wa - wb).abs() < tol {
                violations.push(Degeneracy::CoincidentTransitions {
                    first: pa,
                    second: pb,
                    first_frequency: wa,
                    second_frequency: wb,
                });
            }
        }
    }
    ValidationReport { tolerance: tol, violations }
}

/// All pairs `l < k` of an `n`-level system in row-major order.
pub fn all_pairs(n: usize) -> impl Iterator<Item = Pair> {
    (0..n).flat_map(move |l| (l + 1..n).map(move |k| Pair { l, k }))
}

/// Real symmetric, zero-diagonal dipole coupling.
///
/// Stores the normalized operator μ' = μ/‖μ‖ together with the scale ‖μ‖.
/// Candidates produced by [`DipoleMatrix::with_support_values`] keep the
/// scale of their parent, so their normalized max norm may differ from 1.
#[derive(Debug, Clone, PartialEq)]
pub struct DipoleMatrix {
    normalized: DMatrix<f64>,
    scale: f64,
    support: Vec<Pair>,
}

impl DipoleMatrix {
    /// Validates and normalizes a physical dipole matrix.
    pub fn from_matrix(mu: DMatrix<f64>) -> Result<Self> {
        let n = mu.nrows();
        if mu.ncols() != n {
            return Err(Error::InvalidDipole(format!("matrix is {}x{}", n, mu.ncols())));
        }
        if n < 2 {
            return Err(Error::InvalidDipole("need at least 2 levels".into()));
        }
        if mu.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidDipole("non-finite entry".into()));
        }
        for i in 0..n {
            if mu[(i, i)] != 0.0 {
                return Err(Error::InvalidDipole(format!(
                    "diagonal entry ({0},{0}) must be zero",
                    i + 1
                )));
            }
        }
        let scale = mu.amax();
        if scale == 0.0 {
            return Err(Error::InvalidDipole("all entries are zero".into()));
        }
        for p in all_pairs(n) {
            if (mu[(p.l, p.k)] - mu[(p.k, p.l)]).abs() > 1e-12 * scale {
                return Err(Error::InvalidDipole(format!("not symmetric at {p}")));
            }
        }
        let mut normalized = mu / scale;
        for p in all_pairs(n) {
            normalized[(p.k, p.l)] = normalized[(p.l, p.k)];
        }
        let support = all_pairs(n).filter(|p| normalized[(p.l, p.k)] != 0.0).collect();
        Ok(DipoleMatrix { normalized, scale, support })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidDipole("rows must form a square matrix".into()));
        }
        Self::from_matrix(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }

    pub fn dimension(&self) -> usize {
        self.normalized.nrows()
    }

    /// ‖μ‖ (max norm) of the matrix this was built from.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// μ' = μ/‖μ‖.
    pub fn normalized(&self) -> &DMatrix<f64> {
        &self.normalized
    }

    /// μ in input units.
    pub fn physical(&self) -> DMatrix<f64> {
        &self.normalized * self.scale
    }

    /// Normalized entry μ'_lk.
    pub fn entry(&self, pair: Pair) -> f64 {
        self.normalized[(pair.l, pair.k)]
    }

    /// Ordered support pairs; index p of the parametrization.
    pub fn support(&self) -> &[Pair] {
        &self.support
    }

    pub fn support_len(&self) -> usize {
        self.support.len()
    }

    pub fn support_index(&self, pair: Pair) -> Option<usize> {
        self.support.iter().position(|&p| p == pair)
    }

    /// Normalized entries on the support, in support order.
    pub fn support_values(&self) -> Vec<f64> {
        self.support.iter().map(|&p| self.entry(p)).collect()
    }

    /// Candidate with the same scale and support and the given normalized
    /// support entries. Off-support entries stay exactly zero.
    pub fn with_support_values(&self, values: &[f64]) -> Result<Self> {
        if values.len() != self.support.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} support values, got {}",
                self.support.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite support value".into()));
        }
        let n = self.dimension();
        let mut normalized = DMatrix::zeros(n, n);
        for (&p, &v) in self.support.iter().zip(values) {
            normalized[(p.l, p.k)] = v;
            normalized[(p.k, p.l)] = v;
        }
        Ok(DipoleMatrix { normalized, scale: self.scale, support: self.support.clone() })
    }

    /// Same matrix with μ'_lk and μ'_kl both shifted by `delta`.
    /// The support is unchanged.
    pub fn perturbed(&self, pair: Pair, delta: f64) -> Self {
        let mut out = self.clone();
        out.normalized[(pair.l, pair.k)] += delta;
        out.normalized[(pair.k, pair.l)] += delta;
        out
    }

    /// Level adjacency on the support graph.
    pub fn neighbours(&self, level: usize) -> impl Iterator<Item = usize> + '_ {
        self.support.iter().filter_map(move |p| p.partner(level))
    }

    /// Whether every level is reachable from every other through support edges.
    pub fn is_connected(&self) -> bool {
        let n = self.dimension();
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(a) = stack.pop() {
            for b in self.neighbours(a) {
                if !seen[b] {
                    seen[b] = true;
                    stack.push(b);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Shortest path of levels from `from` to `to` over support edges.
    pub fn shortest_path(&self, from: usize, to: usize) -> Option<Vec<usize>> {
        let n = self.dimension();
        let mut prev = vec![usize::MAX; n];
        let mut queue = std::collections::VecDeque::from([from]);
        prev[from] = from;
        while let Some(a) = queue.pop_front() {
            if a == to {
                let mut path = vec![to];
                let mut cur = to;
                while cur != from {
                    cur = prev[cur];
                    path.push(cur);
                }
                path.reverse();
                return Some(path);
            }
            for b in self.neighbours(a) {
                if prev[b] == usize::MAX {
                    prev[b] = a;
                    queue.push_back(b);
                }
            }
        }
        None
    }
}

/// Ordered support of the dipole (row-major over the strict upper triangle).
pub fn support_basis(dipole: &DipoleMatrix) -> &[Pair] {
    dipole.support()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PauliKind {
    X,
    Y,
    Z,
}

/// σx = |l⟩⟨k|+|k⟩⟨l|, σy = −i|l⟩⟨k|+i|k⟩⟨l|, σz = |l⟩⟨l|−|k⟩⟨k|, embedded in
/// an `n`-level space.
pub fn pauli(n: usize, pair: Pair, kind: PauliKind) -> DMatrix<Complex64> {
    let mut m = DMatrix::zeros(n, n);
    let (l, k) = (pair.l, pair.k);
    match kind {
        PauliKind::X => {
            m[(l, k)] = Complex64::new(1.0, 0.0);
            m[(k, l)] = Complex64::new(1.0, 0.0);
        }
        PauliKind::Y => {
            m[(l, k)] = Complex64::new(0.0, -1.0);
            m[(k, l)] = Complex64::new(0.0, 1.0);
        }
        PauliKind::Z => {
            m[(l, l)] = Complex64::new(1.0, 0.0);
            m[(k, k)] = Complex64::new(-1.0, 0.0);
        }
    }
    m
}

/// Real form of σx on `pair`.
pub fn sigma_x(n: usize, pair: Pair) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    m[(pair.l, pair.k)] = 1.0;
    m[(pair.k, pair.l)] = 1.0;
    m
}

/// Pure state with unit Euclidean norm.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantumState(DVector<Complex64>);

pub const STATE_NORM_TOL: f64 = 1e-12;

impl QuantumState {
    /// Accepts an already-normalized vector.
    pub fn new(v: DVector<Complex64>) -> Result<Self> {
        let norm = v.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > STATE_NORM_TOL {
            return Err(Error::InvalidState(format!("norm {norm} is not 1")));
        }
        Ok(QuantumState(v))
    }

    /// Rescales any nonzero vector to unit norm.
    pub fn normalize(v: DVector<Complex64>) -> Result<Self> {
        let norm = v.norm();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::InvalidState("cannot normalize zero vector".into()));
        }
        Ok(QuantumState(v / Complex64::new(norm, 0.0)))
    }

    pub fn basis(n: usize, k: usize) -> Self {
        let mut v = DVector::zeros(n);
        v[k] = Complex64::new(1.0, 0.0);
        QuantumState(v)
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn as_vector(&self) -> &DVector<Complex64> {
        &self.0
    }

    pub fn into_vector(self) -> DVector<Complex64> {
        self.0
    }

    /// ⟨self|other⟩.
    pub fn overlap(&self, other: &QuantumState) -> Complex64 {
        self.0.dotc(&other.0)
    }

    /// |⟨self|other⟩|², insensitive to global phase.
    pub fn fidelity(&self, other: &QuantumState) -> f64 {
        self.overlap(other).norm_sqr()
    }

    pub fn populations(&self) -> Vec<f64> {
        self.0.iter().map(|c| c.norm_sqr()).collect()
    }
}

/// On-disk system description with 1-based level indices.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemFile {
    pub energies: Vec<f64>,
    pub dipole: Vec<Vec<f64>>,
    pub initial: usize,
    pub measured: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degeneracy_tol: Option<f64>,
}

impl SystemFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Builds the validated system and dipole. Degenerate spectra are
    /// rejected.
    pub fn build(&self) -> Result<(SystemSpec, DipoleMatrix)> {
        if self.initial == 0 || self.measured == 0 {
            return Err(Error::InvalidSystem("initial/measured are 1-based".into()));
        }
        let spec = SystemSpec::new(self.energies.clone(), self.initial - 1, self.measured - 1)?;
        let dipole = DipoleMatrix::from_rows(&self.dipole)?;
        if dipole.dimension() != spec.dimension() {
            return Err(Error::InvalidDipole(format!(
                "dipole is {0}x{0} but there are {1} energies",
                dipole.dimension(),
                spec.dimension()
            )));
        }
        validate_system(&spec, self.degeneracy_tol.unwrap_or(DEFAULT_DEGENERACY_TOL))
            .into_result()?;
        Ok((spec, dipole))
    }

    pub fn from_parts(spec: &SystemSpec, dipole: &DipoleMatrix) -> Self {
        let mu = dipole.physical();
        SystemFile {
            energies: spec.energies().to_vec(),
            dipole: (0..mu.nrows()).map(|i| mu.row(i).iter().cloned().collect()).collect(),
            initial: spec.initial() + 1,
            measured: spec.measured() + 1,
            degeneracy_tol: None,
        }
    }
}
