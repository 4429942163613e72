//! Inverse direction: the characteristic polynomial from measured cumulants.
//!
//! Each order `ℓ` of `d^ℓ/dξ^ℓ P_ξ(λ(ξ))|₀ = 0` is linear in the unknown
//! coefficients `a_1 … a_{M−1}, a′_0 … a′_{M−2}` once the cumulants are fixed.
//! The first `2(M−1)` orders form a square linear system.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use num_rational::BigRational;
use num_traits::{One, Zero};

use crate::charpoly::{CharPolyPair, ExactCharPolyPair};
use crate::cumulants::CumulantVector;
use crate::error::{IcsError, Result};
use crate::scalar::{rational_to_f64, Scalar};
use crate::series::PowerSeries;

/// Relative singular-value threshold for the numerical rank of the
/// equilibrated system. Exact degeneracies sit at the 1e-16 level once the
/// system is assembled exactly; genuine but ill-conditioned directions of
/// nine-dimensional generators reach down to about 1e-14.
pub const RANK_RTOL: f64 = 2e-15;
/// Refinement sweeps for the full-rank solve.
const REFINEMENT_STEPS: usize = 6;
/// Relative residual above which a rank-deficient system is declared inconsistent.
const CONSISTENCY_RTOL: f64 = 1e-8;

/// Number of independent cumulants `2(M−1)` for generator dimension `M`.
pub fn independent_cumulants(m: usize) -> usize {
    2 * (m - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Unknown {
    /// `a_μ`
    A(usize),
    /// `a′_μ`
    APrime(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HSystem {
    pub degree: usize,
    /// Row `ℓ−1` holds the coefficients of order `ℓ`, unscaled.
    pub matrix: DMatrix<f64>,
    pub rhs: DVector<f64>,
    pub unknown_layout: Vec<Unknown>,
    /// Singular values of the equilibrated matrix, descending.
    pub singular_values: Vec<f64>,
    pub condition: f64,
    pub rank: usize,
}

fn layout(m: usize) -> Vec<Unknown> {
    (1..m).map(Unknown::A).chain((0..m - 1).map(Unknown::APrime)).collect()
}

/// Rows over any scalar: `ℓ!·[ξ^ℓ] λ^μ` for `a_μ`, `ℓ!·[ξ^ℓ] (e^ξ−1) λ^μ`
/// for `a′_μ`, right-hand side `−ℓ!·[ξ^ℓ] λ^M`.
pub fn h_rows_generic<T: Scalar>(cumulants: &[T], m: usize, rows: usize) -> (Vec<Vec<T>>, Vec<T>) {
    let lambda = PowerSeries::from_derivatives(cumulants, rows);
    let powers = lambda.powers(m);
    let e = PowerSeries::exp_minus_one(rows);
    let shifted: Vec<PowerSeries<T>> = powers.iter().map(|p| e.mul(p)).collect();
    let unknowns = layout(m);
    let mut factorial = T::one();
    let mut matrix = Vec::with_capacity(rows);
    let mut rhs = Vec::with_capacity(rows);
    for l in 1..=rows {
        factorial = factorial * T::from_usize(l);
        let row = unknowns
            .iter()
            .map(|u| {
                factorial.clone()
                    * match *u {
                        Unknown::A(mu) => powers[mu].coeff(l).clone(),
                        Unknown::APrime(mu) => shifted[mu].coeff(l).clone(),
                    }
            })
            .collect();
        matrix.push(row);
        rhs.push(-(factorial.clone() * powers[m].coeff(l).clone()));
    }
    (matrix, rhs)
}

type ExactRows = (Vec<Vec<BigRational>>, Vec<BigRational>);

/// Rows assembled in exact arithmetic from the given floating-point values,
/// so that the only error left in the system is the input's own.
fn exact_rows(cumulants: &[f64], m: usize, rows: usize) -> Result<ExactRows> {
    let q = cumulants
        .iter()
        .map(|x| BigRational::from_float(*x).ok_or_else(|| IcsError::InvalidInput("non-finite cumulant".into())))
        .collect::<Result<Vec<_>>>()?;
    Ok(h_rows_generic(&q, m, rows))
}

fn rounded(exact: &ExactRows) -> (DMatrix<f64>, DVector<f64>) {
    let (matrix, rhs) = exact;
    let (rows, cols) = (matrix.len(), matrix[0].len());
    (
        DMatrix::from_fn(rows, cols, |r, c| rational_to_f64(&matrix[r][c])),
        DVector::from_iterator(rows, rhs.iter().map(rational_to_f64)),
    )
}

/// `b − A·x` evaluated exactly, then rounded.
fn exact_residual(exact: &ExactRows, x: &[f64]) -> DVector<f64> {
    let (matrix, rhs) = exact;
    let xq: Vec<BigRational> = x.iter().map(|v| BigRational::from_float(*v).expect("finite")).collect();
    DVector::from_iterator(
        rhs.len(),
        matrix.iter().zip(rhs).map(|(row, b)| {
            let ax = row.iter().zip(&xq).fold(BigRational::zero(), |acc, (a, x)| acc + a * x);
            rational_to_f64(&(b - ax))
        }),
    )
}

/// Row-equilibrated copy (each row divided by its largest entry), optionally
/// weighted, followed by column equilibration. Returns the scaled system and
/// the column scale factors.
fn equilibrate(
    matrix: &DMatrix<f64>,
    rhs: &DVector<f64>,
    weights: Option<&[f64]>,
) -> (DMatrix<f64>, DVector<f64>, Vec<f64>) {
    let mut a = matrix.clone();
    let mut b = rhs.clone();
    for r in 0..a.nrows() {
        let scale = a.row(r).iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        let w = weights.map(|w| w[r]).unwrap_or(1.0);
        if scale > 0.0 {
            let f = w / scale;
            a.row_mut(r).scale_mut(f);
            b[r] *= f;
        }
    }
    let cols: Vec<f64> = (0..a.ncols())
        .map(|c| {
            let s = a.column(c).iter().fold(0.0_f64, |m, x| m.max(x.abs()));
            if s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect();
    for (c, s) in cols.iter().enumerate() {
        a.column_mut(c).unscale_mut(*s);
    }
    (a, b, cols)
}

fn row_weights(c: &CumulantVector, rows: usize) -> Option<Vec<f64>> {
    let se = c.stderr.as_ref()?;
    let floor = se[..rows].iter().cloned().filter(|s| *s > 0.0).fold(f64::INFINITY, f64::min);
    if !floor.is_finite() {
        return None;
    }
    let w: Vec<f64> = se[..rows].iter().map(|s| 1.0 / s.max(floor)).collect();
    let max = w.iter().cloned().fold(0.0, f64::max);
    Some(w.into_iter().map(|x| x / max).collect())
}

fn sorted_svd(a: &DMatrix<f64>) -> (Vec<f64>, nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn>) {
    let svd = a.clone().svd(true, true);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    (sv, svd)
}

fn rank_of(sv: &[f64]) -> usize {
    let top = sv.first().copied().unwrap_or(0.0);
    sv.iter().filter(|s| **s > RANK_RTOL * top).count()
}

pub fn build_h_system(c: &CumulantVector, m: usize) -> Result<HSystem> {
    if m < 2 {
        return Err(IcsError::BadDimension(m));
    }
    let rows = independent_cumulants(m);
    if c.len() < rows {
        return Err(IcsError::InsufficientCumulants { needed: rows, available: c.len() });
    }
    let exact = exact_rows(&c.values[..rows], m, rows)?;
    Ok(system_from(&exact, m))
}

fn system_from(exact: &ExactRows, m: usize) -> HSystem {
    let (matrix, rhs) = rounded(exact);
    let (scaled, _, _) = equilibrate(&matrix, &rhs, None);
    let (singular_values, _) = sorted_svd(&scaled);
    let rank = rank_of(&singular_values);
    let condition = singular_values[0] / singular_values[singular_values.len() - 1];
    HSystem {
        degree: m,
        matrix,
        rhs,
        unknown_layout: layout(m),
        singular_values,
        condition,
        rank,
    }
}

impl HSystem {
    /// `matrix·u − rhs` for the free coefficients of a trial pair.
    pub fn residual(&self, cp: &CharPolyPair) -> DVector<f64> {
        let u = DVector::from_vec(cp.free_coefficients());
        &self.matrix * u - &self.rhs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    /// The unique solution, or the minimum-norm one (in equilibrated
    /// coordinates) when the system is rank-deficient.
    pub pair: CharPolyPair,
    pub unique: bool,
    /// Basis of the solution set's direction space, in free-coefficient layout.
    pub null_space: Vec<Vec<f64>>,
    pub condition: f64,
    pub rank: usize,
    pub singular_values: Vec<f64>,
}

impl Reconstruction {
    /// Distance of `candidate` from the affine solution set, relative to the
    /// coefficient magnitudes: the residual after projecting out the null space.
    /// The basis is orthonormal, so the projection is a sum of dot products.
    pub fn affine_residual(&self, candidate: &CharPolyPair) -> f64 {
        let base = DVector::from_vec(self.pair.free_coefficients());
        let target = DVector::from_vec(candidate.free_coefficients());
        let mut diff = &target - &base;
        for v in &self.null_space {
            let v = DVector::from_column_slice(v);
            let proj = diff.dot(&v);
            diff -= v * proj;
        }
        let scale = target.iter().fold(1.0_f64, |m, x| m.max(x.abs()));
        diff.amax() / scale
    }
}

/// Solves the first `2(M−1)` orders for the characteristic polynomial pair.
pub fn reconstruct_charpoly(c: &CumulantVector, m: usize) -> Result<Reconstruction> {
    if m < 2 {
        return Err(IcsError::BadDimension(m));
    }
    let rows = independent_cumulants(m);
    if c.len() < rows {
        return Err(IcsError::InsufficientCumulants { needed: rows, available: c.len() });
    }
    let exact = exact_rows(&c.values[..rows], m, rows)?;
    let system = system_from(&exact, m);
    let weights = row_weights(c, rows);
    let (a, b, cols) = equilibrate(&system.matrix, &system.rhs, weights.as_deref());
    if b.iter().all(|x| *x == 0.0) && a.iter().all(|x| *x == 0.0) {
        return Err(IcsError::SingularSystem);
    }
    let (free, null_space) = if system.rank == a.ncols() {
        (refined_solve(&exact, &system, &a, &cols, weights.as_deref())?, Vec::new())
    } else {
        minimum_norm(&a, &b, &cols, system.rank)?
    };
    let pair = CharPolyPair::from_free_coefficients(m, &free)?;
    Ok(Reconstruction {
        pair,
        unique: null_space.is_empty(),
        null_space,
        condition: system.condition,
        rank: system.rank,
        singular_values: system.singular_values,
    })
}

/// LU on the equilibrated system, refined against the exactly evaluated residual.
fn refined_solve(
    exact: &ExactRows,
    system: &HSystem,
    a: &DMatrix<f64>,
    cols: &[f64],
    weights: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let lu = a.clone().lu();
    let row_scale: Vec<f64> = (0..system.matrix.nrows())
        .map(|r| {
            let s = system.matrix.row(r).amax();
            let w = weights.map(|w| w[r]).unwrap_or(1.0);
            if s > 0.0 {
                w / s
            } else {
                w
            }
        })
        .collect();
    let mut x = vec![0.0; a.ncols()];
    for _ in 0..REFINEMENT_STEPS {
        let mut r = exact_residual(exact, &x);
        for (v, s) in r.iter_mut().zip(&row_scale) {
            *v *= s;
        }
        let dy = lu.solve(&r).ok_or(IcsError::SingularSystem)?;
        let mut change = 0.0_f64;
        for ((xi, d), s) in x.iter_mut().zip(dy.iter()).zip(cols) {
            let dx = d / s;
            *xi += dx;
            change = change.max(dx.abs() / xi.abs().max(f64::MIN_POSITIVE));
        }
        if change < 1e-16 {
            break;
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(IcsError::SingularSystem);
    }
    Ok(x)
}

/// Minimum-norm solution in equilibrated coordinates plus an orthonormal basis
/// of the null space in free-coefficient coordinates.
fn minimum_norm(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    cols: &[f64],
    rank: usize,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let (sv, svd) = sorted_svd(a);
    let u = svd.u.as_ref().expect("computed");
    let v_t = svd.v_t.as_ref().expect("computed");
    let cut = if rank == 0 { f64::INFINITY } else { sv[rank - 1] };
    let n = a.ncols();
    let mut solution = DVector::zeros(n);
    let mut null = Vec::new();
    for k in 0..svd.singular_values.len() {
        let v = v_t.row(k).transpose();
        let sigma = svd.singular_values[k];
        if sigma >= cut {
            solution += &v * (u.column(k).dot(b) / sigma);
        } else {
            null.push(DVector::from_iterator(n, v.iter().zip(cols).map(|(x, s)| x / s)));
        }
    }
    let consistency = (a * &solution - b).amax() / b.amax().max(f64::MIN_POSITIVE);
    if consistency > CONSISTENCY_RTOL {
        return Err(IcsError::SingularSystem);
    }
    let free: Vec<f64> = solution.iter().zip(cols).map(|(x, s)| x / s).collect();
    Ok((free, orthonormalize(null)))
}

fn orthonormalize(vectors: Vec<DVector<f64>>) -> Vec<Vec<f64>> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for mut v in vectors {
        for _ in 0..2 {
            for q in &basis {
                let p = v.dot(q);
                v -= q * p;
            }
        }
        let norm = v.norm();
        if norm > 0.0 {
            basis.push(v / norm);
        }
    }
    basis.into_iter().map(|v| v.iter().copied().collect()).collect()
}

/// Exact reconstruction over the rationals by Gaussian elimination.
pub fn reconstruct_charpoly_exact(cumulants: &[BigRational], m: usize) -> Result<ExactCharPolyPair> {
    if m < 2 {
        return Err(IcsError::BadDimension(m));
    }
    let rows = independent_cumulants(m);
    if cumulants.len() < rows {
        return Err(IcsError::InsufficientCumulants { needed: rows, available: cumulants.len() });
    }
    let (mut a, mut b) = h_rows_generic(&cumulants[..rows], m, rows);
    for col in 0..rows {
        let pivot = (col..rows).find(|&r| !a[r][col].is_zero()).ok_or(IcsError::SingularSystem)?;
        a.swap(col, pivot);
        b.swap(col, pivot);
        let inv = BigRational::one() / a[col][col].clone();
        for k in col..rows {
            a[col][k] = a[col][k].clone() * inv.clone();
        }
        b[col] = b[col].clone() * inv;
        for r in 0..rows {
            if r == col || a[r][col].is_zero() {
                continue;
            }
            let f = a[r][col].clone();
            for k in col..rows {
                let v = a[col][k].clone() * f.clone();
                a[r][k] = a[r][k].clone() - v;
            }
            let v = b[col].clone() * f;
            b[r] = b[r].clone() - v;
        }
    }
    let mut coeffs = vec![BigRational::zero(); m + 1];
    let mut primes = vec![BigRational::zero(); m + 1];
    coeffs[m] = BigRational::one();
    for (u, x) in layout(m).into_iter().zip(b) {
        match u {
            Unknown::A(mu) => coeffs[mu] = x,
            Unknown::APrime(mu) => primes[mu] = x,
        }
    }
    Ok(ExactCharPolyPair { a: coeffs, aprime: primes })
}
