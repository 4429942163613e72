//! Forward direction: scaled cumulants from the characteristic polynomial.
//!
//! The eigenvalue branch `λ(ξ)` through zero satisfies `P_ξ(λ(ξ)) = 0`. Expanding
//! this identity order by order in ξ gives, at order `ℓ`, an equation that is
//! linear in `c_ℓ` with slope `a_1/ℓ!`; all other terms involve only lower
//! cumulants. [`eigenvalue_fd_oracle`] provides an independent check by
//! differentiating numerically computed eigenvalues.

use nalgebra::DMatrix;
use num_complex::Complex64;
use num_rational::BigRational;
use num_traits::Zero;
use serde::{Deserialize, Serialize};

use crate::charpoly::{affine_split_exact, CharPolyPair, ExactCharPolyPair};
use crate::error::{IcsError, Result};
use crate::model::{DeformedGenerator, ModelSpec};
use crate::scalar::{rational_to_f64, Scalar};
use crate::series::PowerSeries;

/// Largest supported recursion order.
pub const MAX_ORDER: usize = 64;
/// Largest order the finite-difference oracle accepts.
pub const MAX_ORACLE_ORDER: usize = 6;
/// Relative threshold on `|a_1| / max|a_μ|` below which the recursion is undefined.
pub const DEGENERACY_RTOL: f64 = 1e-12;

/// Scaled cumulants `c_1 … c_K`, optionally with standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumulantVector {
    pub values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stderr: Option<Vec<f64>>,
}

impl CumulantVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let cv = CumulantVector { values, stderr: None };
        cv.validate()?;
        Ok(cv)
    }

    pub fn with_stderr(values: Vec<f64>, stderr: Vec<f64>) -> Result<Self> {
        let cv = CumulantVector { values, stderr: Some(stderr) };
        cv.validate()?;
        Ok(cv)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(IcsError::InvalidInput("cumulant vector is empty".into()));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(IcsError::InvalidInput("cumulants must be finite".into()));
        }
        if let Some(se) = &self.stderr {
            if se.len() != self.values.len() {
                return Err(IcsError::InvalidInput(format!(
                    "{} standard errors for {} cumulants",
                    se.len(),
                    self.values.len()
                )));
            }
            if se.iter().any(|s| !s.is_finite() || *s < 0.0) {
                return Err(IcsError::InvalidInput(
                    "standard errors must be nonnegative".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `c_ν`, 1-based.
    pub fn get(&self, nu: usize) -> f64 {
        self.values[nu - 1]
    }

    /// The first `k` cumulants (and standard errors).
    pub fn truncated(&self, k: usize) -> Self {
        CumulantVector {
            values: self.values[..k.min(self.len())].to_vec(),
            stderr: self.stderr.as_ref().map(|s| s[..k.min(s.len())].to_vec()),
        }
    }
}

/// Order-by-order solution of `P_ξ(λ(ξ)) = 0` for `c_1 … c_K`.
///
/// `a` and `aprime` run from degree 0 to `M`. The caller guarantees `a_1 ≠ 0`.
pub fn cumulant_recursion<T: Scalar>(a: &[T], aprime: &[T], order: usize) -> Vec<T> {
    let m = a.len() - 1;
    let e = PowerSeries::<T>::exp_minus_one(order);
    // powers[μ][k] = [ξ^k] λ^μ
    let mut powers = vec![vec![T::zero(); order + 1]; m + 1];
    powers[0][0] = T::one();
    let mut factorial = T::one();
    let mut out = Vec::with_capacity(order);
    for l in 1..=order {
        factorial = factorial * T::from_usize(l);
        for mu in 2..=m {
            let v = T::sum_all(
                (mu - 1..l)
                    .filter(|&j| !powers[mu - 1][j].is_zero())
                    .map(|j| powers[mu - 1][j].clone() * powers[1][l - j].clone()),
            );
            powers[mu][l] = v;
        }
        let mut terms: Vec<T> = (2..=m)
            .filter(|&mu| !a[mu].is_zero())
            .map(|mu| a[mu].clone() * powers[mu][l].clone())
            .collect();
        for (mu, ap) in aprime.iter().enumerate().filter(|(_, ap)| !ap.is_zero()) {
            for j in 0..l {
                if !powers[mu][j].is_zero() {
                    terms.push(ap.clone() * powers[mu][j].clone() * e.coeff(l - j).clone());
                }
            }
        }
        let rest = T::sum_all(terms);
        let lambda_l = -(rest / a[1].clone());
        powers[1][l] = lambda_l.clone();
        out.push(lambda_l * factorial.clone());
    }
    out
}

fn check_order(order: usize) -> Result<()> {
    if order == 0 || order > MAX_ORDER {
        return Err(IcsError::BadOrder(order));
    }
    Ok(())
}

fn check_a1(cp: &CharPolyPair) -> Result<()> {
    let scale = cp.a.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if cp.degree() < 1 || cp.a[1].abs() <= DEGENERACY_RTOL * scale {
        return Err(IcsError::DegenerateA1);
    }
    Ok(())
}

pub fn cumulants_from_charpoly(cp: &CharPolyPair, order: usize) -> Result<CumulantVector> {
    check_order(order)?;
    check_a1(cp)?;
    let values = cumulant_recursion(&cp.a, &cp.aprime, order);
    if values.iter().any(|v| !v.is_finite()) {
        return Err(IcsError::InvalidInput("cumulant recursion overflowed".into()));
    }
    Ok(CumulantVector { values, stderr: None })
}

/// Exact cumulants for an exact polynomial pair.
pub fn cumulants_exact(cp: &ExactCharPolyPair, order: usize) -> Result<Vec<BigRational>> {
    check_order(order)?;
    if cp.degree() < 1 || cp.a[1].is_zero() {
        return Err(IcsError::DegenerateA1);
    }
    Ok(cumulant_recursion(&cp.a, &cp.aprime, order))
}

/// Cumulants of a model computed in rational arithmetic from its exact
/// polynomial pair and rounded once at the end. Slower than the floating
/// path but correctly rounded, which matters when the result feeds an
/// inversion.
pub fn model_cumulants_exact(spec: &ModelSpec, order: usize) -> Result<CumulantVector> {
    let exact = affine_split_exact(spec)?;
    let values: Vec<f64> = cumulants_exact(&exact, order)?.iter().map(rational_to_f64).collect();
    CumulantVector::new(values)
}

/// `F = c_2/c_1 = 1 + 2a′_0 a_2/a_1² − 2a′_1/a_1`.
pub fn fano_factor(cp: &CharPolyPair) -> Result<f64> {
    check_a1(cp)?;
    let a1 = cp.a[1];
    let a2 = cp.a.get(2).copied().unwrap_or(0.0);
    let ap1 = cp.aprime.get(1).copied().unwrap_or(0.0);
    Ok(1.0 + 2.0 * cp.aprime[0] * a2 / (a1 * a1) - 2.0 * ap1 / a1)
}

/// Finite-difference weights for derivatives `0 … max_order` at 0 on the given
/// nodes (Fornberg's algorithm). `weights[d][j]` multiplies `f(nodes[j])`.
pub fn fd_weights(nodes: &[f64], max_order: usize) -> Vec<Vec<f64>> {
    let n = nodes.len();
    let mut c = vec![vec![0.0; n]; max_order + 1];
    c[0][0] = 1.0;
    let mut c1 = 1.0;
    let mut c4 = nodes[0];
    for i in 1..n {
        let mn = i.min(max_order);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = nodes[i];
        for j in 0..i {
            let c3 = nodes[i] - nodes[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[k][i] = c1 * (k as f64 * c[k - 1][i - 1] - c5 * c[k][i - 1]) / c2;
                }
                c[0][i] = -c1 * c5 * c[0][i - 1] / c2;
            }
            for k in (1..=mn).rev() {
                c[k][j] = (c4 * c[k][j] - k as f64 * c[k - 1][j]) / c3;
            }
            c[0][j] = c4 * c[0][j] / c3;
        }
        c1 = c2;
    }
    c
}

fn eigenvalues(m: &DMatrix<Complex64>) -> Vec<Complex64> {
    if m.iter().all(|z| z.im == 0.0) {
        return m.map(|z| z.re).complex_eigenvalues().iter().copied().collect();
    }
    let schur = m.clone().schur();
    let (_, t) = schur.unpack();
    t.diagonal().iter().copied().collect()
}

/// Branch of eigenvalues continuously connected to 0, on `ξ_j = j·h`, `j = −p … p`.
fn track_branch(generator: &DeformedGenerator, p: usize, h: f64) -> Result<Vec<f64>> {
    let at = |xi: f64| eigenvalues(&generator.at(xi.exp()));
    let scale = generator.full().iter().fold(1.0_f64, |m, z| m.max(z.norm()));

    let mut ev0 = at(0.0);
    ev0.sort_by(|x, y| x.norm().total_cmp(&y.norm()));
    if ev0.len() > 1 && ev0[1].norm() < 1e-8 * scale {
        return Err(IcsError::NonSimpleZero);
    }
    let mut values = vec![0.0; 2 * p + 1];
    values[p] = ev0[0].re;

    for direction in [1isize, -1] {
        let mut history = vec![ev0[0]];
        for step in 1..=p {
            let xi = direction as f64 * step as f64 * h;
            let predicted = match history.len() {
                1 => history[0],
                k => history[k - 1] * 2.0 - history[k - 2],
            };
            let mut ev = at(xi);
            ev.sort_by(|x, y| (*x - predicted).norm().total_cmp(&(*y - predicted).norm()));
            let nearest = (ev[0] - predicted).norm();
            if ev.len() > 1 {
                let second = (ev[1] - predicted).norm();
                if second < 3.0 * nearest || second < 1e-10 * scale {
                    return Err(IcsError::BranchTrackingFailed(xi));
                }
            }
            history.push(ev[0]);
            values[(p as isize + direction * step as isize) as usize] = ev[0].re;
        }
    }
    Ok(values)
}

/// Leading truncation-error exponent `q` of a unit-spaced stencil for derivative `d`.
fn truncation_exponent(nodes: &[f64], weights: &[f64], d: usize) -> i32 {
    (d + 1..d + 2 * nodes.len() + 2)
        .find(|&m| {
            let moment: f64 = nodes.iter().zip(weights).map(|(x, w)| w * x.powi(m as i32)).sum();
            let exact: f64 = (1..=m).map(|k| k as f64).product();
            moment.abs() > 1e-9 * exact
        })
        .map(|m| (m - d) as i32)
        .unwrap_or(2)
}

/// Default finite-difference step of the oracle.
pub const DEFAULT_ORACLE_STEP: f64 = 0.05;

/// Independent cumulant oracle: central finite differences of the tracked
/// eigenvalue branch on the stencil `{−K h, …, K h}`, Richardson-extrapolated
/// between steps `h` and `h/2`.
///
/// Expected agreement with the recursion is `max(1e-6, C_ν h²)` with `C_ν`
/// growing with the order; roundoff in the eigenvalues is amplified by
/// `h^{−ν}`, so the higher orders prefer the upper end of the step range.
pub fn eigenvalue_fd_oracle(
    generator: &DeformedGenerator,
    order: usize,
    h: f64,
) -> Result<CumulantVector> {
    if order == 0 || order > MAX_ORACLE_ORDER {
        return Err(IcsError::BadOrder(order));
    }
    if !(1e-3..=1e-1).contains(&h) {
        return Err(IcsError::BadStep(h));
    }
    let p = order.max(1);
    let nodes: Vec<f64> = (-(p as isize)..=p as isize).map(|j| j as f64).collect();
    let weights = fd_weights(&nodes, order);

    let coarse = track_branch(generator, p, h)?;
    let fine = track_branch(generator, p, h / 2.0)?;
    let derivative = |samples: &[f64], d: usize, step: f64| -> f64 {
        let s: f64 = samples.iter().zip(&weights[d]).map(|(f, w)| f * w).sum();
        s / step.powi(d as i32)
    };
    let values = (1..=order)
        .map(|d| {
            let q = truncation_exponent(&nodes, &weights[d], d);
            let dh = derivative(&coarse, d, h);
            let dh2 = derivative(&fine, d, h / 2.0);
            let r = 2f64.powi(q);
            (r * dh2 - dh) / (r - 1.0)
        })
        .collect();
    Ok(CumulantVector { values, stderr: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::charpoly::affine_split;
    use crate::model::build_generator;
    use crate::model::fixtures::*;
    use approx::assert_relative_eq;

    fn q(n: i64, d: i64) -> BigRational {
        BigRational::new(n.into(), d.into())
    }

    fn pair(a: &[f64], ap: &[f64]) -> CharPolyPair {
        CharPolyPair::new(a.to_vec(), ap.to_vec()).unwrap()
    }

    #[test]
    fn mm_cumulants_exact() {
        let cp = affine_split_exact(&michaelis_menten(1.0, 1.0, 2.0, 3.0)).unwrap();
        assert_eq!(cumulants_exact(&cp, 3).unwrap(), vec![q(3, 7), q(12, 49), q(192, 2401)]);
        let c = cumulants_from_charpoly(&pair(&[0.0, 14.0, 7.0, 1.0], &[-6.0, 0.0, 0.0, 0.0]), 3)
            .unwrap();
        for (x, e) in c.values.iter().zip([3.0 / 7.0, 12.0 / 49.0, 192.0 / 2401.0]) {
            assert_relative_eq!(*x, e, max_relative = 1e-14);
        }
    }

    #[test]
    fn symmetric_two_state_cumulants_are_powers_of_half() {
        let c = cumulants_from_charpoly(&pair(&[0.0, 2.0, 1.0], &[-1.0, 0.0, 0.0]), 8).unwrap();
        for (nu, x) in c.values.iter().enumerate() {
            assert_relative_eq!(*x, 0.5f64.powi(nu as i32 + 1), max_relative = 1e-13);
        }
    }

    #[test]
    fn uniform_ring_cumulants_are_powers_of_third() {
        let c = cumulants_from_charpoly(&pair(&[0.0, 3.0, 3.0, 1.0], &[-1.0, 0.0, 0.0, 0.0]), 6)
            .unwrap();
        for (nu, x) in c.values.iter().enumerate() {
            assert_relative_eq!(*x, 3f64.powi(-(nu as i32) - 1), max_relative = 1e-13);
        }
    }

    #[test]
    fn recursion_matches_printed_low_orders() {
        // c_1..c_3 written out explicitly in terms of a, a′.
        let a = [0.0, 2.5, 1.75, -0.5, 1.0];
        let ap = [-1.2, 0.4, 0.3, 0.0, 0.0];
        let c = cumulants_from_charpoly(&pair(&a, &ap), 3).unwrap().values;
        let c1 = -ap[0] / a[1];
        let c2 = -(ap[0] + 2.0 * ap[1] * c1 + 2.0 * a[2] * c1 * c1) / a[1];
        let c3 = -(ap[0]
            + 3.0 * ap[1] * c1
            + 6.0 * ap[2] * c1 * c1
            + 6.0 * a[3] * c1.powi(3)
            + 3.0 * ap[1] * c2
            + 6.0 * a[2] * c1 * c2)
            / a[1];
        assert_relative_eq!(c[0], c1, max_relative = 1e-15);
        assert_relative_eq!(c[1], c2, max_relative = 1e-14);
        assert_relative_eq!(c[2], c3, max_relative = 1e-14);
    }

    #[test]
    fn fano_factors() {
        let mm = pair(&[0.0, 14.0, 7.0, 1.0], &[-6.0, 0.0, 0.0, 0.0]);
        assert_relative_eq!(fano_factor(&mm).unwrap(), 4.0 / 7.0, max_relative = 1e-15);
        let two = pair(&[0.0, 2.0, 1.0], &[-1.0, 0.0, 0.0]);
        assert_relative_eq!(fano_factor(&two).unwrap(), 0.5, max_relative = 1e-15);
        let poisson = pair(&[0.0, 1.0, 0.0, 1.0], &[-0.7, 0.0, 0.0, 0.0]);
        assert_relative_eq!(fano_factor(&poisson).unwrap(), 1.0, max_relative = 1e-15);
        let c = cumulants_from_charpoly(&mm, 2).unwrap();
        assert_relative_eq!(fano_factor(&mm).unwrap(), c.get(2) / c.get(1), max_relative = 1e-12);
    }

    #[test]
    fn degenerate_a1_is_reported() {
        let cp = pair(&[0.0, 0.0, 1.0], &[-1.0, 0.0, 0.0]);
        assert_eq!(cumulants_from_charpoly(&cp, 2), Err(IcsError::DegenerateA1));
        assert_eq!(fano_factor(&cp), Err(IcsError::DegenerateA1));
    }

    #[test]
    fn order_limits() {
        let cp = pair(&[0.0, 2.0, 1.0], &[-1.0, 0.0, 0.0]);
        assert_eq!(cumulants_from_charpoly(&cp, 0), Err(IcsError::BadOrder(0)));
        assert_eq!(cumulants_from_charpoly(&cp, 65), Err(IcsError::BadOrder(65)));
        assert!(cumulants_from_charpoly(&cp, 64).is_ok());
    }

    #[test]
    fn fd_weights_reproduce_polynomial_derivatives() {
        let nodes = [-2.0, -1.0, 0.0, 1.0, 2.0];
        let w = fd_weights(&nodes, 2);
        assert_relative_eq!(w[1][3], 2.0 / 3.0, max_relative = 1e-14);
        assert_relative_eq!(w[2][2], -5.0 / 2.0, max_relative = 1e-14);
        assert_eq!(truncation_exponent(&nodes, &w[1], 1), 4);
    }

    #[test]
    fn oracle_matches_mm_and_two_state() {
        let g = build_generator(&michaelis_menten(1.0, 1.0, 2.0, 3.0)).unwrap();
        let fd = eigenvalue_fd_oracle(&g, 3, 0.01).unwrap();
        for (x, e) in fd.values.iter().zip([3.0 / 7.0, 12.0 / 49.0, 192.0 / 2401.0]) {
            assert!((x - e).abs() < 1e-5, "{x} vs {e}");
        }
        let g = build_generator(&two_state(1.0, 1.0)).unwrap();
        let fd = eigenvalue_fd_oracle(&g, 2, 0.01).unwrap();
        assert!((fd.values[0] - 0.5).abs() < 1e-8);
        assert!((fd.values[1] - 0.25).abs() < 1e-6);
    }

    #[test]
    fn oracle_rejects_bad_arguments() {
        let g = build_generator(&two_state(1.0, 1.0)).unwrap();
        assert_eq!(eigenvalue_fd_oracle(&g, 7, 0.01), Err(IcsError::BadOrder(7)));
        assert_eq!(eigenvalue_fd_oracle(&g, 2, 0.5), Err(IcsError::BadStep(0.5)));
    }

    #[test]
    fn time_rescaling_scales_cumulants() {
        let spec = lambda_atom(5.0, 4.0, 3.0, 2.0, 1.0);
        let base = cumulants_from_charpoly(&affine_split(&build_generator(&spec).unwrap()).unwrap(), 6)
            .unwrap();
        let scaled = cumulants_from_charpoly(
            &affine_split(&build_generator(&spec.scaled(2.5)).unwrap()).unwrap(),
            6,
        )
        .unwrap();
        for (x, y) in base.values.iter().zip(&scaled.values) {
            assert_relative_eq!(2.5 * x, *y, max_relative = 1e-9);
        }
    }

    #[test]
    fn exact_model_cumulants_agree_with_float_path() {
        let spec = lambda_atom(5.0, 4.0, 3.0, 2.0, 1.0);
        let exact = model_cumulants_exact(&spec, 6).unwrap();
        let float = cumulants_from_charpoly(&affine_split(&build_generator(&spec).unwrap()).unwrap(), 6).unwrap();
        for (x, y) in exact.values.iter().zip(&float.values) {
            assert_relative_eq!(*x, *y, max_relative = 1e-9);
        }
    }
}
