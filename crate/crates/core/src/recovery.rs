//! Recovery of generator parameters from counting statistics.
//!
//! A [`ParameterStructure`] marks some rates and Hamiltonian entries of a
//! template model as unknown. Parameters are found by damped least squares on
//! a square subsystem of the matching conditions, started from many random
//! points, and kept only if they satisfy the full set of conditions.

use std::fmt;

use levenberg_marquardt::{LeastSquaresProblem, LevenbergMarquardt};
use nalgebra::{DMatrix, DVector, Dyn, Owned};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::charpoly::{affine_split, affine_split_fast, affine_split_unchecked, CharPolyPair};
use crate::cumulants::{cumulants_from_charpoly, CumulantVector};
use crate::error::{IcsError, Result};
use crate::inverse::{independent_cumulants, reconstruct_charpoly};
use crate::model::{build_generator, build_trial_generator, Hamiltonian, ModelKind, ModelSpec, Transition};
use crate::par::{self, Execution};

pub const DEFAULT_STARTS: usize = 512;
pub const DEFAULT_TOLERANCE: f64 = 1e-8;
pub const DEFAULT_DEDUP_RADIUS: f64 = 1e-6;
/// Relative singular-value cut for the numerical rank of residual Jacobians.
pub const JACOBIAN_RANK_RTOL: f64 = 1e-6;
/// Rank estimates closer than this factor to the cut are flagged in reports.
const RANK_MARGIN: f64 = 100.0;
const RANK_PROBES: usize = 4;
const CLIP_ROUNDS: usize = 3;
/// Agreement required between a cumulant-matched solution and the polynomial
/// reconstructed directly from the same cumulants.
pub const CROSS_CHECK_RTOL: f64 = 1e-6;
/// Residual bound, in standard errors, for data that carry uncertainties.
const STDERR_ACCEPT: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parameter {
    /// Rate of the transition `from → to`.
    Rate { from: usize, to: usize },
    /// Real Rabi frequency `Ω` in `H_ij = H_ji = Ω/2`.
    Rabi { i: usize, j: usize },
    /// Diagonal energy `H_ii`.
    Energy { i: usize },
}

impl Parameter {
    pub fn is_rate(&self) -> bool {
        matches!(self, Parameter::Rate { .. })
    }
}

impl fmt::Display for Parameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Parameter::Rate { from, to } => write!(f, "k{to}{from}"),
            Parameter::Rabi { i, j } => write!(f, "Omega{i}{j}"),
            Parameter::Energy { i } => write!(f, "E{i}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStructure {
    pub template: ModelSpec,
    pub unknowns: Vec<Parameter>,
}

impl ParameterStructure {
    pub fn new(template: ModelSpec, unknowns: Vec<Parameter>) -> Result<Self> {
        let s = ParameterStructure { template, unknowns };
        s.validate()?;
        Ok(s)
    }

    /// Every rate present in the template becomes an unknown.
    pub fn free_rates(template: ModelSpec) -> Result<Self> {
        let unknowns = template
            .rates
            .keys()
            .map(|t| Parameter::Rate { from: t.from, to: t.to })
            .collect();
        ParameterStructure::new(template, unknowns)
    }

    pub fn validate(&self) -> Result<()> {
        if self.unknowns.is_empty() {
            return Err(IcsError::InvalidInput("a structure needs at least one unknown".into()));
        }
        let n = self.template.dimension;
        let check = |index: usize| {
            if index == 0 || index > n {
                Err(IcsError::IndexOutOfRange { index, dimension: n })
            } else {
                Ok(())
            }
        };
        for (k, p) in self.unknowns.iter().enumerate() {
            if self.unknowns[..k].contains(p) {
                return Err(IcsError::InvalidInput(format!("unknown {p} listed twice")));
            }
            match *p {
                Parameter::Rate { from, to } => {
                    check(from)?;
                    check(to)?;
                    if from == to {
                        return Err(IcsError::InvalidRate { from, to, value: f64::NAN });
                    }
                }
                Parameter::Rabi { i, j } => {
                    check(i)?;
                    check(j)?;
                    if i == j {
                        return Err(IcsError::InvalidInput(format!("{p} couples a state to itself")));
                    }
                }
                Parameter::Energy { i } => check(i)?,
            }
            if !p.is_rate() && self.template.kind != ModelKind::Quantum {
                return Err(IcsError::WrongKind { expected: "quantum" });
            }
        }
        self.instantiate(&vec![1.0; self.unknowns.len()])?.validate()
    }

    pub fn len(&self) -> usize {
        self.unknowns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unknowns.is_empty()
    }

    pub fn generator_dim(&self) -> usize {
        self.template.generator_dim()
    }

    /// The template with the unknowns set to `x`. No sign checks.
    pub fn instantiate(&self, x: &[f64]) -> Result<ModelSpec> {
        if x.len() != self.unknowns.len() {
            return Err(IcsError::InvalidInput(format!(
                "expected {} parameters, got {}",
                self.unknowns.len(),
                x.len()
            )));
        }
        let mut spec = self.template.clone();
        let n = spec.dimension;
        for (p, &v) in self.unknowns.iter().zip(x) {
            match *p {
                Parameter::Rate { from, to } => {
                    spec.rates.insert(Transition::new(from, to), v);
                }
                Parameter::Rabi { i, j } => {
                    let h = spec.hamiltonian.get_or_insert_with(|| Hamiltonian::zeros(n));
                    h.set(i, j, Complex64::new(0.5 * v, 0.0));
                    h.set(j, i, Complex64::new(0.5 * v, 0.0));
                }
                Parameter::Energy { i } => {
                    let h = spec.hamiltonian.get_or_insert_with(|| Hamiltonian::zeros(n));
                    h.set(i, i, Complex64::new(v, 0.0));
                }
            }
        }
        Ok(spec)
    }

    /// Current values of the unknowns in `spec`.
    pub fn values_of(&self, spec: &ModelSpec) -> Vec<f64> {
        self.unknowns
            .iter()
            .map(|p| match *p {
                Parameter::Rate { from, to } => spec.rate(from, to),
                Parameter::Rabi { i, j } => {
                    2.0 * spec.hamiltonian.as_ref().map(|h| h.get(i, j).re).unwrap_or(0.0)
                }
                Parameter::Energy { i } => {
                    spec.hamiltonian.as_ref().map(|h| h.get(i, i).re).unwrap_or(0.0)
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecoveryConfig {
    pub starts: usize,
    pub seed: u64,
    /// Relative tolerance of the verification against the full condition set.
    pub tolerance: f64,
    pub dedup_radius: f64,
    /// Evaluation budget of one solver run, in multiples of `|S| + 1`.
    pub patience: usize,
    pub execution: Execution,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        RecoveryConfig {
            starts: DEFAULT_STARTS,
            seed: 0,
            tolerance: DEFAULT_TOLERANCE,
            dedup_radius: DEFAULT_DEDUP_RADIUS,
            patience: 100,
            execution: Execution::default(),
        }
    }
}

impl RecoveryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.starts == 0 || self.patience == 0 {
            return Err(IcsError::InvalidInput("starts and patience must be positive".into()));
        }
        if !(self.tolerance > 0.0 && self.dedup_radius > 0.0) {
            return Err(IcsError::InvalidInput("tolerances must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    ClosedForm,
    CoefficientMatch,
    CumulantMatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub parameters: Vec<f64>,
    /// Largest normalized deviation from the target coefficients.
    pub coefficient_residual: Option<f64>,
    /// Largest relative deviation from the target cumulants.
    pub cumulant_residual: Option<f64>,
    pub verified: bool,
    /// Number of starts that converged to this point.
    pub multiplicity: usize,
    pub first_start: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub mode: Mode,
    pub unknowns: Vec<Parameter>,
    pub solutions: Vec<Solution>,
    pub unverified: Vec<Solution>,
    pub n_starts: usize,
    pub n_converged: usize,
    pub n_discarded_negative: usize,
    pub dedup_radius: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Number of matching conditions available.
    pub conditions: usize,
    pub jacobian_rank: usize,
    /// Conditions solved by the multistart stage, in selection order.
    pub subsystem: Vec<String>,
    pub notes: Vec<String>,
}

/// Rates `{κ21, κ12}` of a two-state model from its first two cumulants,
/// both labelings.
pub fn two_state_closed_form(c1: f64, c2: f64) -> Result<Vec<[f64; 2]>> {
    if !(c1 > 0.0 && c1.is_finite() && c2.is_finite()) {
        return Err(IcsError::InvalidInput(format!("c1 = {c1} must be positive")));
    }
    if c2 > c1 {
        return Err(IcsError::NoRealSolution(format!(
            "super-Poissonian statistics c2 = {c2} > c1 = {c1}"
        )));
    }
    if c2 == c1 {
        return Err(IcsError::NoRealSolution("Poissonian statistics c2 = c1".into()));
    }
    let disc = 2.0 * c2 - c1;
    if disc < 0.0 {
        return Err(IcsError::NoRealSolution(format!(
            "2 c2 = {} < c1 = {c1}: complex rates",
            2.0 * c2
        )));
    }
    let root = c1.powf(1.5) * disc.sqrt();
    let plus = (c1 * c1 + root) / (c1 - c2);
    let minus = (c1 * c1 - root) / (c1 - c2);
    Ok(vec![[plus, minus], [minus, plus]])
}

/// `affine_split(model(x)) − target` in free-coefficient layout.
pub fn coefficient_residuals(
    structure: &ParameterStructure,
    x: &[f64],
    target: &CharPolyPair,
) -> Result<Vec<f64>> {
    let spec = structure.instantiate(x)?;
    let cp = affine_split(&build_generator(&spec)?)?;
    if cp.degree() != target.degree() {
        return Err(IcsError::InvalidInput(format!(
            "structure has degree {}, target {}",
            cp.degree(),
            target.degree()
        )));
    }
    Ok(cp
        .free_coefficients()
        .iter()
        .zip(target.free_coefficients())
        .map(|(a, b)| a - b)
        .collect())
}

trait Residual: Sync {
    /// Normalized residual vector, or `None` where the model cannot be evaluated.
    /// `accurate` selects compensated arithmetic over the fast real path.
    fn eval_with(&self, x: &[f64], accurate: bool) -> Option<Vec<f64>>;

    fn eval(&self, x: &[f64]) -> Option<Vec<f64>> {
        self.eval_with(x, false)
    }
}

fn split_trial(spec: &ModelSpec, accurate: bool) -> Option<CharPolyPair> {
    let generator = build_trial_generator(spec).ok()?;
    if accurate {
        affine_split_unchecked(&generator).ok()
    } else {
        affine_split_fast(&generator).ok()
    }
}

struct CoefficientTarget<'a> {
    structure: &'a ParameterStructure,
    target: Vec<f64>,
    weights: Vec<f64>,
}

impl Residual for CoefficientTarget<'_> {
    fn eval_with(&self, x: &[f64], accurate: bool) -> Option<Vec<f64>> {
        let spec = self.structure.instantiate(x).ok()?;
        let cp = split_trial(&spec, accurate)?;
        let free = cp.free_coefficients();
        if free.len() != self.target.len() {
            return None;
        }
        let r: Vec<f64> = free
            .iter()
            .zip(&self.target)
            .zip(&self.weights)
            .map(|((a, b), w)| (a - b) / w)
            .collect();
        r.iter().all(|v| v.is_finite()).then_some(r)
    }
}

struct CumulantTarget<'a> {
    structure: &'a ParameterStructure,
    target: Vec<f64>,
    weights: Vec<f64>,
}

impl Residual for CumulantTarget<'_> {
    fn eval_with(&self, x: &[f64], accurate: bool) -> Option<Vec<f64>> {
        let spec = self.structure.instantiate(x).ok()?;
        let cp = split_trial(&spec, accurate)?;
        let c = cumulants_from_charpoly(&cp, self.target.len()).ok()?;
        let r: Vec<f64> = c
            .values
            .iter()
            .zip(&self.target)
            .zip(&self.weights)
            .map(|((a, b), w)| (a - b) / w)
            .collect();
        r.iter().all(|v| v.is_finite()).then_some(r)
    }
}

struct Problem<'a> {
    residual: &'a dyn Residual,
    rows: Option<&'a [usize]>,
    x: DVector<f64>,
    scale: f64,
}

impl Problem<'_> {
    fn eval(&self, x: &[f64]) -> Option<DVector<f64>> {
        let full = self.residual.eval(x)?;
        Some(match self.rows {
            Some(rows) => DVector::from_iterator(rows.len(), rows.iter().map(|&r| full[r])),
            None => DVector::from_vec(full),
        })
    }
}

impl LeastSquaresProblem<f64, Dyn, Dyn> for Problem<'_> {
    type ResidualStorage = Owned<f64, Dyn>;
    type JacobianStorage = Owned<f64, Dyn, Dyn>;
    type ParameterStorage = Owned<f64, Dyn>;

    fn set_params(&mut self, x: &DVector<f64>) {
        self.x.copy_from(x);
    }

    fn params(&self) -> DVector<f64> {
        self.x.clone()
    }

    fn residuals(&self) -> Option<DVector<f64>> {
        self.eval(self.x.as_slice())
    }

    fn jacobian(&self) -> Option<DMatrix<f64>> {
        let r0 = self.eval(self.x.as_slice())?;
        let mut jac = DMatrix::zeros(r0.len(), self.x.len());
        let mut probe = self.x.as_slice().to_vec();
        for k in 0..probe.len() {
            let h = 1e-7 * probe[k].abs().max(self.scale);
            let orig = probe[k];
            probe[k] = orig + h;
            let r = self.eval(&probe)?;
            probe[k] = orig;
            jac.column_mut(k).copy_from(&((r - &r0) / h));
        }
        Some(jac)
    }
}

/// Central-difference Jacobian of the full residual.
fn central_jacobian(residual: &dyn Residual, x: &[f64], scale: f64) -> Option<DMatrix<f64>> {
    let mut probe = x.to_vec();
    let mut cols = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        let h = 1e-5 * x[k].abs().max(scale);
        probe[k] = x[k] + h;
        let up = DVector::from_vec(residual.eval_with(&probe, true)?);
        probe[k] = x[k] - h;
        let down = DVector::from_vec(residual.eval_with(&probe, true)?);
        probe[k] = x[k];
        cols.push((up - down) / (2.0 * h));
    }
    Some(DMatrix::from_columns(&cols))
}

fn numerical_rank(m: &DMatrix<f64>) -> (usize, f64) {
    let sv = m.singular_values();
    let top = sv.max();
    if top == 0.0 {
        return (0, 0.0);
    }
    let cut = JACOBIAN_RANK_RTOL * top;
    let rank = sv.iter().filter(|s| **s > cut).count();
    // Smallest ratio between a retained or rejected singular value and the cut.
    let margin = sv
        .iter()
        .map(|s| if *s > cut { s / cut } else { cut / s.max(f64::MIN_POSITIVE) })
        .fold(f64::INFINITY, f64::min);
    (rank, margin)
}

struct Engine<'a> {
    structure: &'a ParameterStructure,
    residual: &'a dyn Residual,
    labels: Vec<String>,
    /// Row indices in selection-preference order.
    preference: Vec<usize>,
    rate_scale: f64,
    config: RecoveryConfig,
    accept: f64,
}

struct Outcome {
    start: usize,
    x: Vec<f64>,
    converged: bool,
    negative: bool,
    residual: f64,
}

impl Engine<'_> {
    fn start_point(&self, k: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(k);
        self.structure
            .unknowns
            .iter()
            .map(|p| {
                if p.is_rate() {
                    self.rate_scale * 10f64.powf(rng.random_range(-2.0..2.0))
                } else {
                    rng.random_range(-self.rate_scale..self.rate_scale)
                }
            })
            .collect()
    }

    /// Rank of the full Jacobian at a few random points and a row subset of
    /// maximal rank, chosen greedily in preference order.
    fn select_rows(&self, notes: &mut Vec<String>) -> Result<(usize, Vec<usize>)> {
        let unknowns = self.structure.len();
        let mut best: Option<(usize, f64, DMatrix<f64>)> = None;
        for probe in 0..RANK_PROBES as u64 {
            let x = self.start_point(u64::MAX - probe);
            let Some(jac) = central_jacobian(self.residual, &x, self.rate_scale) else {
                continue;
            };
            let (rank, margin) = numerical_rank(&jac);
            if best.as_ref().map(|b| rank > b.0).unwrap_or(true) {
                best = Some((rank, margin, jac));
            }
        }
        let (rank, margin, jac) = best.ok_or(IcsError::NoSolutionFound)?;
        if margin < RANK_MARGIN {
            notes.push(format!(
                "numerical Jacobian rank {rank} is within a factor {margin:.1} of the cut; \
                 the structure may be near-degenerate"
            ));
        }
        if rank < unknowns {
            return Err(IcsError::Underdetermined { unknowns, rank });
        }
        let mut rows: Vec<usize> = Vec::new();
        for &r in &self.preference {
            let mut trial = rows.clone();
            trial.push(r);
            let sub = DMatrix::from_fn(trial.len(), jac.ncols(), |i, k| jac[(trial[i], k)]);
            let scaled = normalize_rows(sub);
            if numerical_rank(&scaled).0 == trial.len() {
                rows = trial;
            }
            if rows.len() == unknowns {
                break;
            }
        }
        if rows.len() < unknowns {
            return Err(IcsError::Underdetermined { unknowns, rank: rows.len() });
        }
        Ok((rank, rows))
    }

    fn solve(&self, x0: Vec<f64>, rows: Option<&[usize]>) -> (Vec<f64>, bool) {
        let problem = Problem {
            residual: self.residual,
            rows,
            x: DVector::from_vec(x0),
            scale: self.rate_scale,
        };
        let (problem, report) = LevenbergMarquardt::new()
            .with_patience(self.config.patience)
            .minimize(problem);
        let x: Vec<f64> = problem.x.iter().copied().collect();
        (x, report.termination.was_successful())
    }

    fn max_residual(&self, x: &[f64]) -> f64 {
        self.residual
            .eval_with(x, true)
            .map(|r| r.iter().fold(0.0_f64, |m, v| m.max(v.abs())))
            .unwrap_or(f64::INFINITY)
    }

    fn run_start(&self, start: usize, rows: &[usize]) -> Outcome {
        let mut x = self.start_point(start as u64);
        for _ in 0..CLIP_ROUNDS {
            x = self.solve(x, Some(rows)).0;
            if self.rates_nonnegative(&x) {
                break;
            }
            for (v, p) in x.iter_mut().zip(&self.structure.unknowns) {
                if p.is_rate() {
                    *v = v.abs();
                }
            }
        }
        let (mut x, success) = self.solve(x, None);
        let tiny = 1e-12 * self.rate_scale;
        for (v, p) in x.iter_mut().zip(&self.structure.unknowns) {
            if p.is_rate() && *v < 0.0 && *v > -tiny {
                *v = 0.0;
            }
        }
        let residual = self.max_residual(&x);
        Outcome {
            start,
            converged: x.iter().all(|v| v.is_finite()) && (success || residual <= self.accept),
            negative: !self.rates_nonnegative(&x),
            x,
            residual,
        }
    }

    fn rates_nonnegative(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.structure.unknowns).all(|(v, p)| !p.is_rate() || *v >= 0.0)
    }

    fn run(&self, mode: Mode) -> Result<(RecoveryReport, Vec<Vec<f64>>)> {
        self.config.validate()?;
        let mut notes = Vec::new();
        let (rank, rows) = self.select_rows(&mut notes)?;
        let starts: Vec<usize> = (0..self.config.starts).collect();
        let outcomes = par::map(self.config.execution, starts, |k| self.run_start(k, &rows));
        let n_converged = outcomes.iter().filter(|o| o.converged).count();
        if n_converged == 0 {
            return Err(IcsError::NoSolutionFound);
        }
        let mut discarded = 0;
        let mut verified: Vec<Solution> = Vec::new();
        let mut unverified: Vec<Solution> = Vec::new();
        for o in outcomes.into_iter().filter(|o| o.converged) {
            if o.negative {
                discarded += 1;
                continue;
            }
            let ok = o.residual <= self.accept;
            let list = if ok { &mut verified } else { &mut unverified };
            self.merge(list, o, ok);
        }
        let points = verified.iter().map(|s| s.parameters.clone()).collect();
        notes.push(format!(
            "{} of {} conditions are independent at random points; a finite solution set is expected",
            rank,
            self.labels.len()
        ));
        Ok((
            RecoveryReport {
                mode,
                unknowns: self.structure.unknowns.clone(),
                solutions: verified,
                unverified,
                n_starts: self.config.starts,
                n_converged,
                n_discarded_negative: discarded,
                dedup_radius: self.config.dedup_radius,
                tolerance: self.config.tolerance,
                seed: self.config.seed,
                conditions: self.labels.len(),
                jacobian_rank: rank,
                subsystem: rows.iter().map(|&r| self.labels[r].clone()).collect(),
                notes,
            },
            points,
        ))
    }

    fn merge(&self, list: &mut Vec<Solution>, o: Outcome, verified: bool) {
        let floor = 1e-3 * self.rate_scale;
        let radius = self.config.dedup_radius;
        let same = |s: &Solution| {
            s.parameters
                .iter()
                .zip(&o.x)
                .all(|(a, b)| (a - b).abs() <= radius * a.abs().max(b.abs()).max(floor))
        };
        if let Some(s) = list.iter_mut().find(|s| same(s)) {
            s.multiplicity += 1;
            return;
        }
        list.push(Solution {
            parameters: o.x,
            coefficient_residual: None,
            cumulant_residual: None,
            verified,
            multiplicity: 1,
            first_start: o.start,
        });
    }
}

fn normalize_rows(mut m: DMatrix<f64>) -> DMatrix<f64> {
    for mut row in m.row_iter_mut() {
        let n = row.norm();
        if n > 0.0 {
            row /= n;
        }
    }
    m
}

/// Typical rate of one unknown, from the trace identity `ã_{M−1} = Σ κ`
/// (classical) or `N·Σ κ` (quantum).
fn rate_scale(structure: &ParameterStructure, trace_coefficient: f64) -> f64 {
    let t = &structure.template;
    let total = match t.kind {
        ModelKind::Classical => trace_coefficient,
        ModelKind::Quantum => trace_coefficient / t.dimension as f64,
    };
    let known: f64 = t
        .rates
        .iter()
        .filter(|(tr, _)| !structure.unknowns.contains(&Parameter::Rate { from: tr.from, to: tr.to }))
        .map(|(_, v)| v)
        .sum();
    let unknown_rates = structure.unknowns.iter().filter(|p| p.is_rate()).count().max(1);
    let s = (total - known) / unknown_rates as f64;
    if s.is_finite() && s > 0.0 {
        s
    } else {
        total.abs().max(1.0) / t.rates.len().max(1) as f64
    }
}

fn coefficient_labels(m: usize) -> (Vec<String>, Vec<usize>) {
    let labels: Vec<String> = (1..m)
        .map(|mu| format!("a{mu}"))
        .chain((0..m - 1).map(|mu| format!("a'{mu}")))
        .collect();
    // Degree of a_μ and a′_μ in the parameters is M − μ; a′ rows go first at equal degree.
    let mut order: Vec<(usize, usize, usize)> = (1..m)
        .enumerate()
        .map(|(row, mu)| (m - mu, 1, row))
        .chain((0..m - 1).map(|mu| (m - mu, 0, m - 1 + mu)))
        .collect();
    order.sort();
    (labels, order.into_iter().map(|(_, _, r)| r).collect())
}

fn relative_cumulant_residual(a: &CumulantVector, b: &CumulantVector) -> f64 {
    let floor = b.values.iter().fold(0.0_f64, |m, v| m.max(v.abs())) * f64::EPSILON;
    a.values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y).abs() / y.abs().max(floor))
        .fold(0.0, f64::max)
}

/// Multistart recovery against a target characteristic polynomial.
pub fn recover_multistart(
    structure: &ParameterStructure,
    target: &CharPolyPair,
    config: &RecoveryConfig,
) -> Result<RecoveryReport> {
    structure.validate()?;
    let m = structure.generator_dim();
    if target.degree() != m {
        return Err(IcsError::InvalidInput(format!(
            "structure has generator dimension {m}, target polynomial degree {}",
            target.degree()
        )));
    }
    if structure.len() > independent_cumulants(m) {
        return Err(IcsError::Underdetermined {
            unknowns: structure.len(),
            rank: independent_cumulants(m),
        });
    }
    let free = target.free_coefficients();
    let sigma = (target.a[m - 1].abs() / m as f64).max(f64::MIN_POSITIVE);
    let weights: Vec<f64> = (1..m)
        .map(|mu| m - mu)
        .chain((0..m - 1).map(|mu| m - mu))
        .zip(&free)
        .map(|(deg, v)| v.abs().max(sigma.powi(deg as i32)))
        .collect();
    let residual = CoefficientTarget { structure, target: free, weights };
    let (labels, preference) = coefficient_labels(m);
    let engine = Engine {
        structure,
        residual: &residual,
        labels,
        preference,
        rate_scale: rate_scale(structure, target.a[m - 1]),
        config: *config,
        accept: config.tolerance,
    };
    let (mut report, _) = engine.run(Mode::CoefficientMatch)?;
    let order = independent_cumulants(m);
    let target_c = cumulants_from_charpoly(target, order).ok();
    for s in report.solutions.iter_mut().chain(report.unverified.iter_mut()) {
        s.coefficient_residual = Some(engine.max_residual(&s.parameters));
        s.cumulant_residual = target_c.as_ref().and_then(|tc| {
            let spec = structure.instantiate(&s.parameters).ok()?;
            let cp = affine_split(&build_generator(&spec).ok()?).ok()?;
            Some(relative_cumulant_residual(&cumulants_from_charpoly(&cp, order).ok()?, tc))
        });
    }
    Ok(report)
}

/// How a cumulant-matched solution is cross-checked against a polynomial
/// reconstructed directly from the data.
enum CrossCheck {
    /// Classical rates embedded as a quantum model: compare the classical block.
    Classical(CharPolyPair),
    Full(CharPolyPair),
    None(String),
}

fn cross_check_target(structure: &ParameterStructure, c: &CumulantVector) -> CrossCheck {
    let t = &structure.template;
    let embedded = t.kind == ModelKind::Quantum
        && t.hamiltonian.as_ref().map(|h| h.is_zero()).unwrap_or(true)
        && structure.unknowns.iter().all(|p| p.is_rate());
    let (m, classical) = if embedded {
        (t.dimension, true)
    } else {
        (t.generator_dim(), false)
    };
    if c.len() < independent_cumulants(m) {
        return CrossCheck::None(format!(
            "{} cumulants are too few to reconstruct the degree-{m} polynomial for the cross-check",
            c.len()
        ));
    }
    match reconstruct_charpoly(&c.truncated(independent_cumulants(m)), m) {
        Ok(r) if r.unique && classical => CrossCheck::Classical(r.pair),
        Ok(r) if r.unique => CrossCheck::Full(r.pair),
        Ok(r) => CrossCheck::None(format!(
            "reconstruction at degree {m} has a null space of dimension {}",
            r.null_space.len()
        )),
        Err(e) => CrossCheck::None(format!("reconstruction at degree {m} failed: {e}")),
    }
}

fn cross_check_distance(structure: &ParameterStructure, check: &CrossCheck, x: &[f64]) -> Option<f64> {
    let spec = structure.instantiate(x).ok()?;
    match check {
        CrossCheck::Classical(target) => {
            let classical = ModelSpec { kind: ModelKind::Classical, hamiltonian: None, ..spec };
            let cp = affine_split(&build_generator(&classical).ok()?).ok()?;
            Some(cp.relative_distance(target))
        }
        CrossCheck::Full(target) => {
            let cp = affine_split(&build_generator(&spec).ok()?).ok()?;
            Some(cp.relative_distance(target))
        }
        CrossCheck::None(_) => None,
    }
}

/// Multistart recovery matching the cumulants themselves, for structures
/// whose polynomial cannot be reconstructed uniquely.
pub fn cumulant_match_recover(
    structure: &ParameterStructure,
    c: &CumulantVector,
    config: &RecoveryConfig,
) -> Result<RecoveryReport> {
    structure.validate()?;
    c.validate()?;
    if c.len() < structure.len() {
        return Err(IcsError::Underdetermined { unknowns: structure.len(), rank: c.len() });
    }
    let weights: Vec<f64> = match &c.stderr {
        Some(se) => se.clone(),
        None => {
            let mut running = 0.0_f64;
            c.values
                .iter()
                .map(|v| {
                    running = running.max(v.abs());
                    v.abs().max(1e-3 * running)
                })
                .collect()
        }
    };
    let accept = if c.stderr.is_some() { STDERR_ACCEPT } else { config.tolerance };
    let residual = CumulantTarget { structure, target: c.values.clone(), weights };
    let labels: Vec<String> = (1..=c.len()).map(|nu| format!("c{nu}")).collect();
    // Σ κ from the mean current is unavailable; use the first cumulant as the scale.
    let scale_guess = {
        let t = &structure.template;
        let trace = match t.kind {
            ModelKind::Classical => c.get(1) * t.dimension as f64,
            ModelKind::Quantum => c.get(1) * (t.dimension * t.dimension) as f64,
        };
        rate_scale(structure, trace.max(f64::MIN_POSITIVE))
    };
    let engine = Engine {
        structure,
        residual: &residual,
        labels,
        preference: (0..c.len()).collect(),
        rate_scale: scale_guess,
        config: *config,
        accept,
    };
    let (mut report, _) = engine.run(Mode::CumulantMatch)?;
    let check = cross_check_target(structure, c);
    if let CrossCheck::None(reason) = &check {
        report.notes.push(format!("cross-check skipped: {reason}"));
    }
    let mut demoted = Vec::new();
    for mut s in std::mem::take(&mut report.solutions) {
        s.cumulant_residual = Some(engine.max_residual(&s.parameters));
        s.coefficient_residual = cross_check_distance(structure, &check, &s.parameters);
        if s.coefficient_residual.map(|d| d > CROSS_CHECK_RTOL).unwrap_or(false) {
            s.verified = false;
            demoted.push(s);
        } else {
            report.solutions.push(s);
        }
    }
    for s in report.unverified.iter_mut() {
        s.cumulant_residual = Some(engine.max_residual(&s.parameters));
        s.coefficient_residual = cross_check_distance(structure, &check, &s.parameters);
    }
    report.unverified.extend(demoted);
    Ok(report)
}

/// Closed-form recovery for a classical two-state structure with both rates unknown.
pub fn closed_form_recover(structure: &ParameterStructure, c: &CumulantVector) -> Result<RecoveryReport> {
    structure.validate()?;
    let t = &structure.template;
    let two_rates = t.kind == ModelKind::Classical
        && t.dimension == 2
        && structure.len() == 2
        && structure.unknowns.iter().all(|p| p.is_rate());
    if !two_rates {
        return Err(IcsError::InvalidInput(
            "the closed form needs a classical two-state structure with both rates unknown".into(),
        ));
    }
    if c.len() < 2 {
        return Err(IcsError::InsufficientCumulants { needed: 2, available: c.len() });
    }
    let pairs = two_state_closed_form(c.get(1), c.get(2))?;
    let target = reconstruct_charpoly(&c.truncated(2), 2)?.pair;
    let config = RecoveryConfig::default();
    let target_c = c.truncated(2);
    let mut solutions: Vec<Solution> = Vec::new();
    for (k, pair) in pairs.iter().enumerate() {
        let x = pair.to_vec();
        let res = coefficient_residuals(structure, &x, &target)?;
        let free = target.free_coefficients();
        let coefficient_residual = res
            .iter()
            .zip(&free)
            .map(|(r, v)| r.abs() / v.abs().max(1.0))
            .fold(0.0, f64::max);
        let spec = structure.instantiate(&x)?;
        let cp = affine_split(&build_generator(&spec)?)?;
        let cumulant_residual = relative_cumulant_residual(&cumulants_from_charpoly(&cp, 2)?, &target_c);
        let duplicate = solutions.iter_mut().find(|s| {
            s.parameters
                .iter()
                .zip(&x)
                .all(|(a, b)| (a - b).abs() <= config.dedup_radius * a.abs().max(b.abs()))
        });
        match duplicate {
            Some(s) => s.multiplicity += 1,
            None => solutions.push(Solution {
                parameters: x,
                coefficient_residual: Some(coefficient_residual),
                cumulant_residual: Some(cumulant_residual),
                verified: coefficient_residual <= config.tolerance,
                multiplicity: 1,
                first_start: k,
            }),
        }
    }
    let (solutions, unverified) = solutions.into_iter().partition(|s| s.verified);
    Ok(RecoveryReport {
        mode: Mode::ClosedForm,
        unknowns: structure.unknowns.clone(),
        solutions,
        unverified,
        n_starts: 0,
        n_converged: pairs.len(),
        n_discarded_negative: 0,
        dedup_radius: config.dedup_radius,
        tolerance: config.tolerance,
        seed: 0,
        conditions: 2,
        jacobian_rank: 2,
        subsystem: vec!["a1".into(), "a'0".into()],
        notes: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::*;

    fn mm_structure() -> ParameterStructure {
        ParameterStructure::free_rates(michaelis_menten(1.0, 1.0, 2.0, 3.0)).unwrap()
    }

    fn target_of(spec: &ModelSpec) -> CharPolyPair {
        affine_split(&build_generator(spec).unwrap()).unwrap()
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn closed_form_two_state() {
        let s = two_state_closed_form(1.2, 1.2 * (1.0 - 2.0 * 6.0 / 25.0)).unwrap();
        for (got, want) in s.iter().zip([[3.0, 2.0], [2.0, 3.0]]) {
            assert!((got[0] - want[0]).abs() < 1e-12 && (got[1] - want[1]).abs() < 1e-12);
        }
        let d = two_state_closed_form(0.5, 0.25).unwrap();
        assert!(d.iter().flatten().all(|k| (k - 1.0).abs() < 1e-12));
        assert!(matches!(two_state_closed_form(1.0, 2.0), Err(IcsError::NoRealSolution(_))));
        assert!(matches!(two_state_closed_form(1.0, 0.4), Err(IcsError::NoRealSolution(_))));
        assert!(two_state_closed_form(1.0, 0.5).is_ok());
    }

    #[test]
    fn residuals_vanish_at_equivalent_rates() {
        let s = mm_structure();
        let target = target_of(&michaelis_menten(1.0, 1.0, 2.0, 3.0));
        let order = |k21: f64, k12: f64, k32: f64, k13: f64| {
            let spec = michaelis_menten(k21, k12, k32, k13);
            s.values_of(&spec)
        };
        let r = coefficient_residuals(&s, &order(1.0, 1.0, 2.0, 3.0), &target).unwrap();
        assert!(norm(&r) < 1e-12);
        let r = coefficient_residuals(&s, &order(3.0, 1.0 / 3.0, 2.0 / 3.0, 3.0), &target).unwrap();
        assert!(norm(&r) < 1e-10);
        let r = coefficient_residuals(&s, &order(1.0, 1.0, 2.0, 4.0), &target).unwrap();
        assert!(norm(&r) > 0.1);
    }

    #[test]
    fn structure_round_trips_values() {
        let spec = lambda_atom(5.0, 4.0, 3.0, 2.0, 1.0);
        let s = ParameterStructure::new(
            spec.clone(),
            vec![
                Parameter::Rate { from: 1, to: 2 },
                Parameter::Rate { from: 3, to: 1 },
                Parameter::Rabi { i: 3, j: 2 },
                Parameter::Rabi { i: 2, j: 1 },
                Parameter::Rabi { i: 3, j: 1 },
            ],
        )
        .unwrap();
        let x = s.values_of(&spec);
        assert_eq!(x, vec![5.0, 4.0, 3.0, 2.0, 1.0]);
        assert_eq!(s.instantiate(&x).unwrap(), spec);
        assert!(ParameterStructure::new(two_state(1.0, 1.0), vec![Parameter::Energy { i: 1 }]).is_err());
        assert!(ParameterStructure::new(two_state(1.0, 1.0), vec![]).is_err());
    }

    #[test]
    fn two_state_multistart_collapses_double_root() {
        let s = ParameterStructure::free_rates(two_state(1.0, 1.0)).unwrap();
        let target = reconstruct_charpoly(&CumulantVector::new(vec![0.5, 0.25]).unwrap(), 2)
            .unwrap()
            .pair;
        let config = RecoveryConfig { starts: 32, seed: 3, ..Default::default() };
        let r = recover_multistart(&s, &target, &config).unwrap();
        assert_eq!(r.solutions.len(), 1, "{r:?}");
        assert!(r.solutions[0].parameters.iter().all(|k| (k - 1.0).abs() < 1e-6));
    }

    #[test]
    fn classical_mm_coefficient_match_is_underdetermined() {
        let s = mm_structure();
        let target = target_of(&michaelis_menten(1.0, 1.0, 2.0, 3.0));
        let config = RecoveryConfig { starts: 64, seed: 1, ..Default::default() };
        // Four unknowns against three nontrivial classical conditions.
        assert!(matches!(
            recover_multistart(&s, &target, &config),
            Err(IcsError::Underdetermined { unknowns: 4, rank: 3 })
        ));
    }

    #[test]
    fn config_is_deterministic() {
        let s = ParameterStructure::free_rates(two_state(2.0, 3.0)).unwrap();
        let target = target_of(&two_state(2.0, 3.0));
        let config = RecoveryConfig { starts: 16, seed: 11, ..Default::default() };
        let a = recover_multistart(&s, &target, &config).unwrap();
        let b = recover_multistart(
            &s,
            &target,
            &RecoveryConfig { execution: Execution::Sequential, ..config },
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.solutions.len(), 2);
    }
}
