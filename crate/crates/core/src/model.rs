//! Model specifications and assembly of deformed generators.
//!
//! A model is a set of `N` orthogonal states joined by stochastic transitions
//! with rates `κ_ij` (from state `j` to state `i`) and, for quantum models, a
//! Hermitian Hamiltonian. A detector counts jumps along one transition
//! `j* → i*`. Counting with the variable `s = e^ξ` deforms the generator into
//! `L(s) = B + s·J`, where `J` holds the single matrix element of the monitored
//! jump.
//!
//! State labels are 1-based throughout the public API, matching the labels of
//! model files. Quantum generators act on the density matrix vectorized in
//! row-major order `ρ11, ρ12, …, ρNN`.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use num_complex::Complex64;
use num_traits::Zero;
use serde::{Deserialize, Serialize};

use crate::error::{IcsError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Classical,
    Quantum,
}

impl ModelKind {
    /// Generator dimension for `n` states.
    pub fn generator_dim(self, n: usize) -> usize {
        match self {
            ModelKind::Classical => n,
            ModelKind::Quantum => n * n,
        }
    }
}

/// A transition `from → to` between 1-based state labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Transition {
    pub from: usize,
    pub to: usize,
}

impl Transition {
    pub fn new(from: usize, to: usize) -> Self {
        Transition { from, to }
    }
}

/// Dense `N×N` Hamiltonian, row-major, 1-based accessors.
#[derive(Debug, Clone, PartialEq)]
pub struct Hamiltonian {
    n: usize,
    entries: Vec<Complex64>,
}

impl Hamiltonian {
    pub fn zeros(n: usize) -> Self {
        Hamiltonian {
            n,
            entries: vec![Complex64::zero(); n * n],
        }
    }

    pub fn from_parts(real: &[Vec<f64>], imag: Option<&[Vec<f64>]>) -> Result<Self> {
        let n = real.len();
        let mut h = Hamiltonian::zeros(n);
        for (i, row) in real.iter().enumerate() {
            if row.len() != n {
                return Err(IcsError::InvalidInput(format!(
                    "hamiltonian row {} has {} entries, expected {n}",
                    i + 1,
                    row.len()
                )));
            }
            for (j, &re) in row.iter().enumerate() {
                let im = match imag {
                    Some(rows) => *rows.get(i).and_then(|r| r.get(j)).ok_or_else(|| {
                        IcsError::InvalidInput("hamiltonian imaginary part has wrong shape".into())
                    })?,
                    None => 0.0,
                };
                h.entries[i * n + j] = Complex64::new(re, im);
            }
        }
        if let Some(rows) = imag {
            if rows.len() != n {
                return Err(IcsError::InvalidInput(
                    "hamiltonian imaginary part has wrong shape".into(),
                ));
            }
        }
        Ok(h)
    }

    /// `H = ½ Σ Ω_ij (|i⟩⟨j| + |j⟩⟨i|)` for a list of real Rabi couplings.
    pub fn rabi(n: usize, couplings: &[(usize, usize, f64)]) -> Self {
        let mut h = Hamiltonian::zeros(n);
        for &(i, j, omega) in couplings {
            h.add(i, j, Complex64::new(0.5 * omega, 0.0));
            h.add(j, i, Complex64::new(0.5 * omega, 0.0));
        }
        h
    }

    pub fn dimension(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.entries[(i - 1) * self.n + (j - 1)]
    }

    pub fn set(&mut self, i: usize, j: usize, value: Complex64) {
        self.entries[(i - 1) * self.n + (j - 1)] = value;
    }

    pub fn add(&mut self, i: usize, j: usize, value: Complex64) {
        self.entries[(i - 1) * self.n + (j - 1)] += value;
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(|z| z.is_zero())
    }

    pub fn real_rows(&self) -> Vec<Vec<f64>> {
        self.entries.chunks(self.n).map(|r| r.iter().map(|z| z.re).collect()).collect()
    }

    pub fn imag_rows(&self) -> Vec<Vec<f64>> {
        self.entries.chunks(self.n).map(|r| r.iter().map(|z| z.im).collect()).collect()
    }

    fn scaled(&self, alpha: f64) -> Self {
        Hamiltonian {
            n: self.n,
            entries: self.entries.iter().map(|z| z * alpha).collect(),
        }
    }
}

/// Declarative description of a classical or quantum model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub dimension: usize,
    /// Rates keyed by transition; absent transitions have rate zero.
    pub rates: BTreeMap<Transition, f64>,
    pub hamiltonian: Option<Hamiltonian>,
    pub detector: Transition,
}

impl ModelSpec {
    pub fn classical(dimension: usize, detector: Transition) -> Self {
        ModelSpec {
            kind: ModelKind::Classical,
            dimension,
            rates: BTreeMap::new(),
            hamiltonian: None,
            detector,
        }
    }

    pub fn quantum(dimension: usize, detector: Transition) -> Self {
        ModelSpec {
            kind: ModelKind::Quantum,
            ..ModelSpec::classical(dimension, detector)
        }
    }

    /// Sets the rate of `from → to`, i.e. `κ_{to,from}`.
    pub fn with_rate(mut self, from: usize, to: usize, value: f64) -> Self {
        self.rates.insert(Transition::new(from, to), value);
        self
    }

    pub fn with_hamiltonian(mut self, h: Hamiltonian) -> Self {
        self.hamiltonian = Some(h);
        self
    }

    pub fn rate(&self, from: usize, to: usize) -> f64 {
        self.rates.get(&Transition::new(from, to)).copied().unwrap_or(0.0)
    }

    pub fn detector_rate(&self) -> f64 {
        self.rate(self.detector.from, self.detector.to)
    }

    /// Total exit rate of a state.
    pub fn exit_rate(&self, state: usize) -> f64 {
        self.rates
            .iter()
            .filter(|(t, _)| t.from == state)
            .map(|(_, v)| v)
            .sum()
    }

    pub fn generator_dim(&self) -> usize {
        self.kind.generator_dim(self.dimension)
    }

    /// Multiplies every rate and Hamiltonian entry by `alpha`.
    pub fn scaled(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        for v in out.rates.values_mut() {
            *v *= alpha;
        }
        out.hamiltonian = self.hamiltonian.as_ref().map(|h| h.scaled(alpha));
        out
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dimension;
        if n < 2 {
            return Err(IcsError::BadDimension(n));
        }
        let check_index = |index: usize| {
            if index == 0 || index > n {
                Err(IcsError::IndexOutOfRange { index, dimension: n })
            } else {
                Ok(())
            }
        };
        for (t, &v) in &self.rates {
            check_index(t.from)?;
            check_index(t.to)?;
            if t.from == t.to || !v.is_finite() || v < 0.0 {
                return Err(IcsError::InvalidRate { from: t.from, to: t.to, value: v });
            }
        }
        check_index(self.detector.from)?;
        check_index(self.detector.to)?;
        if self.detector.from == self.detector.to || self.detector_rate() <= 0.0 {
            return Err(IcsError::MissingDetectorRate {
                from: self.detector.from,
                to: self.detector.to,
            });
        }
        if let Some(h) = &self.hamiltonian {
            if h.dimension() != n {
                return Err(IcsError::InvalidInput(format!(
                    "hamiltonian dimension {} does not match model dimension {n}",
                    h.dimension()
                )));
            }
            for i in 1..=n {
                for j in 1..=n {
                    let z = h.get(i, j);
                    if !z.re.is_finite() || !z.im.is_finite() || z != h.get(j, i).conj() {
                        return Err(IcsError::NonHermitianHamiltonian { row: i, col: j });
                    }
                }
            }
            if self.kind == ModelKind::Classical && !h.is_zero() {
                return Err(IcsError::ClassicalWithHamiltonian);
            }
        }
        Ok(())
    }
}

/// The single nonzero matrix element of the jump part `J`, 0-based.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpEntry {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// `L(s) = B + s·J` with `J` a single matrix element.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformedGenerator {
    pub kind: ModelKind,
    /// Number of physical states `N`.
    pub states: usize,
    pub base: DMatrix<Complex64>,
    pub jump: JumpEntry,
}

impl DeformedGenerator {
    /// Matrix dimension `M`.
    pub fn dim(&self) -> usize {
        self.base.nrows()
    }

    /// `B + s·J`.
    pub fn at(&self, s: f64) -> DMatrix<Complex64> {
        let mut m = self.base.clone();
        m[(self.jump.row, self.jump.col)] += Complex64::new(s * self.jump.value, 0.0);
        m
    }

    /// The undeformed generator `B + J`.
    pub fn full(&self) -> DMatrix<Complex64> {
        self.at(1.0)
    }

    pub fn trace(&self) -> Complex64 {
        self.full().trace()
    }

    /// Largest absolute imaginary part of any entry.
    pub fn max_imag(&self) -> f64 {
        self.base.iter().fold(0.0_f64, |m, z| m.max(z.im.abs()))
    }

    /// The base matrix as a real matrix similar to `B`, with the jump entry
    /// in place. Quantum generators preserve Hermiticity, so they are real in
    /// the coordinates `ρ_ii`, `ρ_ij + ρ_ji`, `i(ρ_ij − ρ_ji)` (`i < j`); these
    /// leave the populations, and hence the jump entry, untouched. `None` if
    /// the transformed matrix is not real to `tol` relative.
    pub fn real_base(&self, tol: f64) -> Option<DMatrix<f64>> {
        let scale = self.base.iter().fold(0.0_f64, |m, z| m.max(z.norm()));
        let m = match self.kind {
            ModelKind::Classical => self.base.clone(),
            ModelKind::Quantum => {
                let n = self.states;
                let dim = n * n;
                let mut t = DMatrix::<Complex64>::zeros(dim, dim);
                let mut t_inv = DMatrix::<Complex64>::zeros(dim, dim);
                let half = Complex64::new(0.5, 0.0);
                let i_unit = Complex64::new(0.0, 1.0);
                for i in 0..n {
                    t[(i * n + i, i * n + i)] = Complex64::new(1.0, 0.0);
                    t_inv[(i * n + i, i * n + i)] = Complex64::new(1.0, 0.0);
                    for j in i + 1..n {
                        let (ij, ji) = (i * n + j, j * n + i);
                        t[(ij, ij)] = Complex64::new(1.0, 0.0);
                        t[(ij, ji)] = Complex64::new(1.0, 0.0);
                        t[(ji, ij)] = i_unit;
                        t[(ji, ji)] = -i_unit;
                        t_inv[(ij, ij)] = half;
                        t_inv[(ji, ij)] = half;
                        t_inv[(ij, ji)] = -half * i_unit;
                        t_inv[(ji, ji)] = half * i_unit;
                    }
                }
                &t * &self.base * &t_inv
            }
        };
        if m.iter().any(|z| z.im.abs() > tol * scale.max(f64::MIN_POSITIVE)) {
            return None;
        }
        Some(m.map(|z| z.re))
    }

    /// The block acting on occupations. For classical generators this is the
    /// generator itself; for quantum generators the rows and columns of the
    /// diagonal density-matrix elements are extracted.
    pub fn population_block(&self) -> DeformedGenerator {
        match self.kind {
            ModelKind::Classical => self.clone(),
            ModelKind::Quantum => {
                let n = self.states;
                let idx = |i: usize| i * n + i;
                let base = DMatrix::from_fn(n, n, |i, j| self.base[(idx(i), idx(j))]);
                DeformedGenerator {
                    kind: ModelKind::Classical,
                    states: n,
                    base,
                    jump: JumpEntry {
                        row: self.jump.row / (n + 1),
                        col: self.jump.col / (n + 1),
                        value: self.jump.value,
                    },
                }
            }
        }
    }

    /// Rows and columns of the off-diagonal density-matrix elements of a
    /// quantum generator, in vectorization order.
    pub fn coherence_block(&self) -> Option<DMatrix<Complex64>> {
        if self.kind != ModelKind::Quantum {
            return None;
        }
        let n = self.states;
        let idx: Vec<usize> = (0..n * n).filter(|k| k % (n + 1) != 0).collect();
        Some(DMatrix::from_fn(idx.len(), idx.len(), |i, j| self.base[(idx[i], idx[j])]))
    }
}

/// Dense row-major matrix over any [`Scalar`], for the exact and generic paths.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix<T> {
    pub n: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> DenseMatrix<T> {
    pub fn zeros(n: usize) -> Self {
        DenseMatrix { n, data: vec![T::zero(); n * n] }
    }

    pub fn get(&self, i: usize, j: usize) -> &T {
        &self.data[i * self.n + j]
    }

    pub fn add_to(&mut self, i: usize, j: usize, value: T) {
        let slot = &mut self.data[i * self.n + j];
        *slot = slot.clone() + value;
    }

    pub fn set(&mut self, i: usize, j: usize, value: T) {
        self.data[i * self.n + j] = value;
    }
}

/// Generator assembled over a generic scalar: base matrix plus jump entry.
#[derive(Debug, Clone, PartialEq)]
pub struct GenericGenerator<T> {
    pub base: DenseMatrix<T>,
    pub jump_row: usize,
    pub jump_col: usize,
    pub jump_value: T,
}

impl<T: Scalar> GenericGenerator<T> {
    pub fn at(&self, s: &T) -> DenseMatrix<T> {
        let mut m = self.base.clone();
        m.add_to(self.jump_row, self.jump_col, s.clone() * self.jump_value.clone());
        m
    }
}

/// Assembles the generator over `T`. Fails with [`IcsError::WrongKind`] if the
/// model needs complex entries and `T` is real.
pub fn assemble<T: Scalar>(spec: &ModelSpec) -> Result<GenericGenerator<T>> {
    spec.validate()?;
    match spec.kind {
        ModelKind::Classical => Ok(assemble_classical(spec)),
        ModelKind::Quantum => assemble_quantum(spec),
    }
}

fn assemble_classical<T: Scalar>(spec: &ModelSpec) -> GenericGenerator<T> {
    let n = spec.dimension;
    let mut base = DenseMatrix::zeros(n);
    for (t, &v) in &spec.rates {
        if v == 0.0 {
            continue;
        }
        let k = T::from_f64(v);
        base.add_to(t.to - 1, t.from - 1, k.clone());
        base.add_to(t.from - 1, t.from - 1, -k);
    }
    let (row, col) = (spec.detector.to - 1, spec.detector.from - 1);
    let jump_value = base.get(row, col).clone();
    base.set(row, col, T::zero());
    GenericGenerator { base, jump_row: row, jump_col: col, jump_value }
}

fn assemble_quantum<T: Scalar>(spec: &ModelSpec) -> Result<GenericGenerator<T>> {
    let n = spec.dimension;
    let vec_index = |i: usize, j: usize| i * n + j;
    let mut base = DenseMatrix::<T>::zeros(n * n);
    let half = T::from_f64(0.5);

    if let Some(h) = spec.hamiltonian.as_ref().filter(|h| !h.is_zero()) {
        let not_real = || IcsError::WrongKind { expected: "real-valued" };
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    // -i H_ik ρ_kj
                    let z = h.get(i + 1, k + 1);
                    if !z.is_zero() {
                        let entry = T::from_parts(z.im, -z.re).ok_or_else(not_real)?;
                        base.add_to(vec_index(i, j), vec_index(k, j), entry);
                    }
                    // +i ρ_ik H_kj
                    let z = h.get(k + 1, j + 1);
                    if !z.is_zero() {
                        let entry = T::from_parts(-z.im, z.re).ok_or_else(not_real)?;
                        base.add_to(vec_index(i, j), vec_index(i, k), entry);
                    }
                }
            }
        }
    }

    let mut exit = vec![T::zero(); n];
    for (t, &v) in &spec.rates {
        if v == 0.0 {
            continue;
        }
        let k = T::from_f64(v);
        let (to, from) = (t.to - 1, t.from - 1);
        base.add_to(vec_index(to, to), vec_index(from, from), k.clone());
        exit[from] = exit[from].clone() + k;
    }
    for i in 0..n {
        for j in 0..n {
            let loss = half.clone() * (exit[i].clone() + exit[j].clone());
            base.add_to(vec_index(i, j), vec_index(i, j), -loss);
        }
    }

    let (is, js) = (spec.detector.to - 1, spec.detector.from - 1);
    let (row, col) = (vec_index(is, is), vec_index(js, js));
    let jump_value = T::from_f64(spec.detector_rate());
    base.add_to(row, col, -jump_value.clone());
    Ok(GenericGenerator { base, jump_row: row, jump_col: col, jump_value })
}

fn to_deformed(spec: &ModelSpec, g: GenericGenerator<Complex64>) -> DeformedGenerator {
    let m = g.base.n;
    DeformedGenerator {
        kind: spec.kind,
        states: spec.dimension,
        base: DMatrix::from_fn(m, m, |i, j| *g.base.get(i, j)),
        jump: JumpEntry { row: g.jump_row, col: g.jump_col, value: g.jump_value.re },
    }
}

/// Stochastic generator on the occupation vector.
pub fn build_classical_generator(spec: &ModelSpec) -> Result<DeformedGenerator> {
    if spec.kind != ModelKind::Classical {
        return Err(IcsError::WrongKind { expected: "classical" });
    }
    Ok(to_deformed(spec, assemble::<Complex64>(spec)?))
}

/// Lindblad superoperator on the row-major vectorized density matrix.
pub fn build_quantum_generator(spec: &ModelSpec) -> Result<DeformedGenerator> {
    if spec.kind != ModelKind::Quantum {
        return Err(IcsError::WrongKind { expected: "quantum" });
    }
    Ok(to_deformed(spec, assemble::<Complex64>(spec)?))
}

/// Assembly at a trial parameter point: rates may be negative, everything
/// else must already be valid. Used to evaluate polynomial residuals while a
/// solver moves through parameter space.
pub(crate) fn build_trial_generator(spec: &ModelSpec) -> Result<DeformedGenerator> {
    let g = match spec.kind {
        ModelKind::Classical => assemble_classical::<Complex64>(spec),
        ModelKind::Quantum => assemble_quantum::<Complex64>(spec)?,
    };
    Ok(to_deformed(spec, g))
}

/// Dispatches on the model kind.
pub fn build_generator(spec: &ModelSpec) -> Result<DeformedGenerator> {
    match spec.kind {
        ModelKind::Classical => build_classical_generator(spec),
        ModelKind::Quantum => build_quantum_generator(spec),
    }
}

/// The same rates treated as a quantum model with vanishing Hamiltonian.
pub fn embed_classical(spec: &ModelSpec) -> Result<ModelSpec> {
    if spec.kind != ModelKind::Classical {
        return Err(IcsError::WrongKind { expected: "classical" });
    }
    spec.validate()?;
    Ok(ModelSpec {
        kind: ModelKind::Quantum,
        hamiltonian: None,
        ..spec.clone()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteadyState {
    pub occupations: Vec<f64>,
    pub zero_eigenvalue_multiplicity: usize,
    /// Vectorized steady density (quantum) or occupation vector (classical).
    pub vector: Vec<Complex64>,
    /// `‖(B + J)·vector‖∞`.
    pub residual: f64,
}

/// Relative singular-value threshold defining the numerical null space.
pub const NULL_SPACE_RTOL: f64 = 1e-10;

pub fn steady_state(generator: &DeformedGenerator) -> Result<SteadyState> {
    let full = generator.full();
    let svd = full.clone().svd(false, true);
    let v_t = svd.v_t.as_ref().ok_or(IcsError::NoSteadyState)?;
    let sigma = &svd.singular_values;
    let largest = sigma.iter().cloned().fold(0.0, f64::max);
    if largest == 0.0 {
        return Err(IcsError::NonUniqueSteadyState(sigma.len()));
    }
    let null: Vec<usize> =
        (0..sigma.len()).filter(|&k| sigma[k] < NULL_SPACE_RTOL * largest).collect();
    match null.len() {
        0 => return Err(IcsError::NoSteadyState),
        1 => {}
        m => return Err(IcsError::NonUniqueSteadyState(m)),
    }
    let k = null[0];
    let raw: Vec<Complex64> = v_t.row(k).iter().map(|z| z.conj()).collect();

    let n = generator.states;
    let (norm, diag): (Complex64, Vec<Complex64>) = match generator.kind {
        ModelKind::Classical => (raw.iter().sum(), raw.clone()),
        ModelKind::Quantum => {
            let d: Vec<Complex64> = (0..n).map(|i| raw[i * n + i]).collect();
            (d.iter().sum(), d)
        }
    };
    if norm.norm() < 1e-300 {
        return Err(IcsError::NoSteadyState);
    }
    let vector: Vec<Complex64> = raw.iter().map(|z| z / norm).collect();
    let occupations: Vec<f64> = diag
        .iter()
        .map(|z| (z / norm).re)
        .map(|p| if p.abs() < 1e-14 { 0.0 } else { p })
        .collect();

    let v = nalgebra::DVector::from_column_slice(&vector);
    let residual = (&full * v).iter().fold(0.0_f64, |m, z| m.max(z.norm()));
    Ok(SteadyState {
        occupations,
        zero_eigenvalue_multiplicity: 1,
        vector,
        residual,
    })
}

/// Standard fixtures used by tests, examples and benches.
pub mod fixtures {
    use super::*;

    /// Single-enzyme Michaelis–Menten cycle E(1) ⇄ ES(2) → EP(3) → E(1), detector on 3 → 1.
    pub fn michaelis_menten(k21: f64, k12: f64, k32: f64, k13: f64) -> ModelSpec {
        ModelSpec::classical(3, Transition::new(3, 1))
            .with_rate(1, 2, k21)
            .with_rate(2, 1, k12)
            .with_rate(2, 3, k32)
            .with_rate(3, 1, k13)
    }

    /// Two-state switch with detector on 1 → 2.
    pub fn two_state(k21: f64, k12: f64) -> ModelSpec {
        ModelSpec::classical(2, Transition::new(1, 2))
            .with_rate(1, 2, k21)
            .with_rate(2, 1, k12)
    }

    /// Unidirectional ring 1 → 2 → … → N → 1, `rates[i]` on `i+1 → i+2`,
    /// detector on N → 1.
    pub fn ring(rates: &[f64]) -> ModelSpec {
        let n = rates.len();
        let mut spec = ModelSpec::classical(n, Transition::new(n, 1));
        for (i, &k) in rates.iter().enumerate() {
            spec = spec.with_rate(i + 1, (i + 1) % n + 1, k);
        }
        spec
    }

    /// Λ-type three-level atom: decays 1 → 2 (monitored) and 3 → 1, Rabi
    /// couplings Ω32, Ω21, Ω31.
    pub fn lambda_atom(k21: f64, k13: f64, o32: f64, o21: f64, o31: f64) -> ModelSpec {
        ModelSpec::quantum(3, Transition::new(1, 2))
            .with_rate(1, 2, k21)
            .with_rate(3, 1, k13)
            .with_hamiltonian(Hamiltonian::rabi(3, &[(3, 2, o32), (2, 1, o21), (3, 1, o31)]))
    }

    /// Resonantly driven two-level emitter: decay 1 → 2 (monitored), Rabi Ω.
    pub fn driven_two_level(k21: f64, omega: f64) -> ModelSpec {
        ModelSpec::quantum(2, Transition::new(1, 2))
            .with_rate(1, 2, k21)
            .with_hamiltonian(Hamiltonian::rabi(2, &[(1, 2, omega)]))
    }
}
