//! Characteristic polynomials of deformed generators.
//!
//! Coefficients of `det(xI − L(s))` come from the Faddeev–LeVerrier
//! recursion. Because the jump part is a single matrix element, every
//! coefficient is affine in `s = e^ξ`, so the polynomial is fixed by the pair
//! `P(s=1)` and `∂_s P`, stored as [`CharPolyPair`].

use nalgebra::DMatrix;
use num_complex::Complex64;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{IcsError, Result};
use crate::model::{assemble, DeformedGenerator, DenseMatrix, ModelKind, ModelSpec};
use crate::scalar::{rational_to_f64, ExactComplex, Scalar};

pub const MAX_DIM: usize = 64;
pub const IMAG_RTOL: f64 = 1e-10;
pub const AFFINE_RTOL: f64 = 1e-9;

/// Coefficients `c_0 … c_n` of `det(xI − A)`, with `c_n = 1`.
pub fn faddeev_leverrier<T: Scalar>(a: &DenseMatrix<T>) -> Vec<T> {
    let n = a.n;
    let mut coeffs = vec![T::zero(); n + 1];
    coeffs[n] = T::one();
    let mut m = identity::<T>(n);
    for k in 1..=n {
        let am = matmul(a, &m);
        let trace = T::sum_all((0..n).map(|i| am.get(i, i).clone()));
        let c = -(trace / T::from_usize(k));
        coeffs[n - k] = c.clone();
        if k < n {
            m = am;
            for i in 0..n {
                m.add_to(i, i, c.clone());
            }
        }
    }
    coeffs
}

fn identity<T: Scalar>(n: usize) -> DenseMatrix<T> {
    let mut m = DenseMatrix::zeros(n);
    for i in 0..n {
        m.set(i, i, T::one());
    }
    m
}

fn matmul<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> DenseMatrix<T> {
    let n = a.n;
    let mut out = DenseMatrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            let dot = T::sum_all(
                (0..n)
                    .filter(|&k| !a.get(i, k).is_zero() && !b.get(k, j).is_zero())
                    .map(|k| a.get(i, k).clone() * b.get(k, j).clone()),
            );
            out.set(i, j, dot);
        }
    }
    out
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Real coefficient vector `c_0 … c_M` of `det(xI − (B + s·J))`.
pub fn charpoly_at(generator: &DeformedGenerator, s: f64) -> Result<Vec<f64>> {
    let m = generator.dim();
    if m > MAX_DIM {
        return Err(IcsError::Overflow(m));
    }
    let full = generator.at(s);
    if generator.max_imag() == 0.0 {
        let dense = DenseMatrix {
            n: m,
            data: (0..m * m).map(|k| full[(k / m, k % m)].re).collect(),
        };
        return Ok(faddeev_leverrier(&dense));
    }
    let dense = DenseMatrix {
        n: m,
        data: (0..m * m).map(|k| full[(k / m, k % m)]).collect::<Vec<Complex64>>(),
    };
    let coeffs = faddeev_leverrier(&dense);
    let scale = coeffs.iter().fold(1.0_f64, |acc, z| acc.max(z.norm()));
    for (index, z) in coeffs.iter().enumerate() {
        if z.im.abs() > IMAG_RTOL * scale {
            return Err(IcsError::ComplexResidue { index, residue: z.im.abs() });
        }
    }
    Ok(coeffs.into_iter().map(|z| z.re).collect())
}

/// `P_ξ(x) = Σ_μ (a_μ + a′_μ (e^ξ − 1)) x^μ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharPolyPair {
    pub a: Vec<f64>,
    pub aprime: Vec<f64>,
}

impl CharPolyPair {
    /// Builds a pair and imposes the structural zeros `a_0 = a′_{M−1} = a′_M = 0`, `a_M = 1`.
    pub fn new(mut a: Vec<f64>, mut aprime: Vec<f64>) -> Result<Self> {
        let m = a.len().checked_sub(1).filter(|&m| m >= 1).ok_or_else(|| {
            IcsError::InvalidInput("characteristic polynomial needs degree at least 1".into())
        })?;
        if aprime.len() != m + 1 {
            return Err(IcsError::InvalidInput(format!(
                "coefficient vectors have lengths {} and {}",
                a.len(),
                aprime.len()
            )));
        }
        a[0] = 0.0;
        a[m] = 1.0;
        aprime[m] = 0.0;
        aprime[m - 1] = 0.0;
        Ok(CharPolyPair { a, aprime })
    }

    pub fn degree(&self) -> usize {
        self.a.len() - 1
    }

    /// Coefficients of `P` at `s = e^ξ`.
    pub fn coefficients_at(&self, s: f64) -> Vec<f64> {
        self.a
            .iter()
            .zip(&self.aprime)
            .map(|(a, ap)| a + ap * (s - 1.0))
            .collect()
    }

    /// The free coefficients in the order `a_1 … a_{M−1}, a′_0 … a′_{M−2}`.
    pub fn free_coefficients(&self) -> Vec<f64> {
        let m = self.degree();
        self.a[1..m].iter().chain(&self.aprime[..m - 1]).copied().collect()
    }

    pub fn from_free_coefficients(m: usize, free: &[f64]) -> Result<Self> {
        if free.len() != 2 * (m - 1) {
            return Err(IcsError::InvalidInput(format!(
                "expected {} free coefficients, got {}",
                2 * (m - 1),
                free.len()
            )));
        }
        let mut a = vec![0.0; m + 1];
        let mut aprime = vec![0.0; m + 1];
        a[1..m].copy_from_slice(&free[..m - 1]);
        aprime[..m - 1].copy_from_slice(&free[m - 1..]);
        CharPolyPair::new(a, aprime)
    }

    /// Product with a ξ-independent polynomial `q` (coefficients low to high).
    pub fn times_static(&self, q: &[f64]) -> Self {
        CharPolyPair {
            a: convolve(&self.a, q),
            aprime: convolve(&self.aprime, q),
        }
    }

    /// Largest coefficient-wise difference relative to the larger coefficient magnitude.
    pub fn relative_distance(&self, other: &CharPolyPair) -> f64 {
        fn rel(x: &[f64], y: &[f64]) -> f64 {
            x.iter()
                .zip(y)
                .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1.0))
                .fold(0.0, f64::max)
        }
        if self.degree() != other.degree() {
            return f64::INFINITY;
        }
        rel(&self.a, &other.a).max(rel(&self.aprime, &other.aprime))
    }
}

/// Polynomial product of coefficient vectors.
pub fn convolve(p: &[f64], q: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; p.len() + q.len() - 1];
    for (i, x) in p.iter().enumerate() {
        for (j, y) in q.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// `P^qm = P^cl · P^coh` for a classical model and its embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingFactorization {
    pub classical: CharPolyPair,
    pub quantum: CharPolyPair,
    /// Characteristic polynomial of the coherence block (ξ-independent).
    pub coherence: Vec<f64>,
    /// [`CharPolyPair::relative_distance`] between `quantum` and the product.
    pub residual: f64,
}

pub fn embedding_factorization(spec: &ModelSpec) -> Result<EmbeddingFactorization> {
    let embedded = crate::model::embed_classical(spec)?;
    let classical = affine_split(&crate::model::build_generator(spec)?)?;
    let generator = crate::model::build_generator(&embedded)?;
    let quantum = affine_split(&generator)?;
    let block = generator.coherence_block().expect("embedded models are quantum");
    let k = block.nrows();
    let dense = DenseMatrix {
        n: k,
        data: (0..k * k).map(|i| block[(i / k, i % k)]).collect::<Vec<Complex64>>(),
    };
    let coherence: Vec<f64> = faddeev_leverrier(&dense).into_iter().map(|z| z.re).collect();
    let residual = quantum.relative_distance(&classical.times_static(&coherence));
    Ok(EmbeddingFactorization { classical, quantum, coherence, residual })
}

/// Faddeev–LeVerrier with plain floating-point sums.
fn faddeev_leverrier_plain(a: &DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut coeffs = vec![0.0; n + 1];
    coeffs[n] = 1.0;
    let mut m = DMatrix::<f64>::identity(n, n);
    let mut am = DMatrix::<f64>::zeros(n, n);
    for k in 1..=n {
        a.mul_to(&m, &mut am);
        let c = -am.trace() / k as f64;
        coeffs[n - k] = c;
        if k < n {
            std::mem::swap(&mut m, &mut am);
            for i in 0..n {
                m[(i, i)] += c;
            }
        }
    }
    coeffs
}

/// Two-point affine split on the real form of the generator, without
/// compensated sums or consistency checks. Meant for solver iterations;
/// results are confirmed with [`affine_split`].
pub(crate) fn affine_split_fast(generator: &DeformedGenerator) -> Result<CharPolyPair> {
    let m = generator.dim();
    if m > MAX_DIM {
        return Err(IcsError::Overflow(m));
    }
    let Some(mut base) = generator.real_base(IMAG_RTOL) else {
        return Err(IcsError::ComplexResidue { index: 0, residue: generator.max_imag() });
    };
    let jump = generator.jump;
    base[(jump.row, jump.col)] += jump.value;
    let p1 = faddeev_leverrier_plain(&base);
    base[(jump.row, jump.col)] += jump.value;
    let p2 = faddeev_leverrier_plain(&base);
    let aprime = p2.iter().zip(&p1).map(|(b, a)| b - a).collect();
    Ok(CharPolyPair { a: p1, aprime })
}

pub(crate) fn affine_split_unchecked(generator: &DeformedGenerator) -> Result<CharPolyPair> {
    let p1 = charpoly_at(generator, 1.0)?;
    let p2 = charpoly_at(generator, 2.0)?;
    let aprime = p2.iter().zip(&p1).map(|(b, a)| b - a).collect();
    Ok(CharPolyPair { a: p1, aprime })
}

/// `a = P(s=1)` and `a′ = P(s=2) − P(s=1)`, checked against `P(s=3) = a + 2a′`.
pub fn affine_split(generator: &DeformedGenerator) -> Result<CharPolyPair> {
    let raw = affine_split_unchecked(generator)?;
    let p3 = charpoly_at(generator, 3.0)?;
    let scale = max_abs(&p3).max(max_abs(&raw.a)).max(1.0);
    let predicted = raw.coefficients_at(3.0);
    let deviation = p3
        .iter()
        .zip(&predicted)
        .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()));
    if deviation > AFFINE_RTOL * scale {
        return Err(IcsError::AffinityViolated(deviation / scale));
    }
    let m = raw.degree();
    let structural = raw.a[0].abs().max(raw.aprime[m - 1].abs()).max(raw.aprime[m].abs());
    if structural > AFFINE_RTOL * scale {
        return Err(IcsError::AffinityViolated(structural / scale));
    }
    CharPolyPair::new(raw.a, raw.aprime)
}

/// Exact characteristic polynomial pair for models whose inputs are exactly
/// representable (every `f64` is a dyadic rational, so integer and half-integer
/// inputs stay exact).
#[derive(Debug, Clone, PartialEq)]
pub struct ExactCharPolyPair {
    pub a: Vec<BigRational>,
    pub aprime: Vec<BigRational>,
}

impl ExactCharPolyPair {
    pub fn to_f64(&self) -> CharPolyPair {
        CharPolyPair {
            a: self.a.iter().map(rational_to_f64).collect(),
            aprime: self.aprime.iter().map(rational_to_f64).collect(),
        }
    }

    pub fn degree(&self) -> usize {
        self.a.len() - 1
    }
}

fn exact_coefficients_at<T: Scalar>(
    g: &crate::model::GenericGenerator<T>,
    s: usize,
) -> Vec<T> {
    faddeev_leverrier(&g.at(&T::from_usize(s)))
}

fn exact_pair<T: Scalar>(
    g: &crate::model::GenericGenerator<T>,
    to_real: impl Fn(&T, usize) -> Result<BigRational>,
) -> Result<ExactCharPolyPair> {
    let p: Vec<Vec<BigRational>> = (1..=3)
        .map(|s| {
            exact_coefficients_at(g, s)
                .iter()
                .enumerate()
                .map(|(k, c)| to_real(c, k))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let a = p[0].clone();
    let aprime: Vec<BigRational> = p[1].iter().zip(&a).map(|(x, y)| x - y).collect();
    let two = BigRational::from_integer(2.into());
    let affine = p[2]
        .iter()
        .zip(a.iter().zip(&aprime))
        .all(|(c3, (c, cp))| *c3 == c + &two * cp);
    let m = a.len() - 1;
    if !affine || !a[0].is_zero() || !aprime[m].is_zero() || !aprime[m - 1].is_zero() {
        let dev = p[2]
            .iter()
            .zip(a.iter().zip(&aprime))
            .map(|(c3, (c, cp))| rational_to_f64(&(c3 - c - &two * cp).abs()))
            .fold(0.0, f64::max);
        return Err(IcsError::AffinityViolated(dev));
    }
    debug_assert!(a[m].is_one());
    Ok(ExactCharPolyPair { a, aprime })
}

/// Rational-arithmetic affine split, assembled directly from the model.
pub fn affine_split_exact(spec: &ModelSpec) -> Result<ExactCharPolyPair> {
    let m = spec.generator_dim();
    if m > MAX_DIM {
        return Err(IcsError::Overflow(m));
    }
    let needs_complex = spec.kind == ModelKind::Quantum
        && spec.hamiltonian.as_ref().is_some_and(|h| !h.is_zero());
    if needs_complex {
        let g = assemble::<ExactComplex>(spec)?;
        exact_pair(&g, |c, index| {
            if c.im.is_zero() {
                Ok(c.re.clone())
            } else {
                Err(IcsError::ComplexResidue { index, residue: rational_to_f64(&c.im.abs()) })
            }
        })
    } else {
        let g = assemble::<BigRational>(spec)?;
        exact_pair(&g, |c, _| Ok(c.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::*;
    use crate::model::{build_generator, embed_classical};
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;

    fn int(v: &[i64]) -> Vec<BigRational> {
        v.iter().map(|&x| BigRational::from_integer(x.into())).collect()
    }

    #[test]
    fn fast_split_agrees_with_compensated() {
        let mm = michaelis_menten(1.0, 1.0, 2.0, 3.0);
        let models = [
            lambda_atom(1.0, 1.0, 5.0, 3.0, 2.0),
            mm.clone(),
            embed_classical(&mm).unwrap(),
        ];
        for spec in &models {
            let generator = build_generator(spec).unwrap();
            let generator = &generator;
            let slow = affine_split(generator).unwrap();
            let fast = affine_split_fast(generator).unwrap();
            for (a, b) in slow.a.iter().zip(&fast.a).chain(slow.aprime.iter().zip(&fast.aprime)) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-10 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn mm_coefficients_at_s() {
        let g = build_generator(&michaelis_menten(1.0, 1.0, 2.0, 3.0)).unwrap();
        assert_eq!(charpoly_at(&g, 1.0).unwrap(), vec![0.0, 14.0, 7.0, 1.0]);
        assert_eq!(charpoly_at(&g, 0.0).unwrap(), vec![6.0, 14.0, 7.0, 1.0]);
    }

    #[test]
    fn symmetric_two_state_at_one() {
        let g = build_generator(&two_state(1.0, 1.0)).unwrap();
        assert_eq!(charpoly_at(&g, 1.0).unwrap(), vec![0.0, 2.0, 1.0]);
    }

    #[test]
    fn mm_split_exact_and_float() {
        let spec = michaelis_menten(1.0, 1.0, 2.0, 3.0);
        let exact = affine_split_exact(&spec).unwrap();
        assert_eq!(exact.a, int(&[0, 14, 7, 1]));
        assert_eq!(exact.aprime, int(&[-6, 0, 0, 0]));
        let cp = affine_split(&build_generator(&spec).unwrap()).unwrap();
        assert_eq!(cp.a, vec![0.0, 14.0, 7.0, 1.0]);
        assert_eq!(cp.aprime, vec![-6.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn two_state_split_matches_closed_form() {
        for (k21, k12) in [(1.0, 1.0), (2.0, 3.0), (0.5, 7.25)] {
            let cp = affine_split(&build_generator(&two_state(k21, k12)).unwrap()).unwrap();
            assert_abs_diff_eq!(cp.a[1], k21 + k12, epsilon = 1e-14);
            assert_abs_diff_eq!(cp.aprime[0], -k21 * k12, epsilon = 1e-13);
            assert_eq!(cp.a[2], 1.0);
        }
    }

    #[test]
    fn uniform_ring_split() {
        let cp = affine_split(&build_generator(&ring(&[1.0, 1.0, 1.0])).unwrap()).unwrap();
        assert_eq!(cp.a, vec![0.0, 3.0, 3.0, 1.0]);
        assert_eq!(cp.aprime, vec![-1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn trace_identity() {
        let spec = lambda_atom(5.0, 4.0, 3.0, 2.0, 1.0);
        let g = build_generator(&spec).unwrap();
        let cp = affine_split(&g).unwrap();
        assert_abs_diff_eq!(cp.a[8], -g.trace().re, epsilon = 1e-12);
        assert_abs_diff_eq!(cp.a[8], 27.0, epsilon = 1e-12);
    }

    #[test]
    fn lambda_atom_exact_matches_float() {
        let spec = lambda_atom(5.0, 4.0, 3.0, 2.0, 1.0);
        let exact = affine_split_exact(&spec).unwrap().to_f64();
        let float = affine_split(&build_generator(&spec).unwrap()).unwrap();
        assert!(exact.relative_distance(&float) < 1e-12);
    }

    #[test]
    fn mm_embedding_factorizes_exactly() {
        let spec = michaelis_menten(1.0, 1.0, 2.0, 3.0);
        let qm = affine_split_exact(&embed_classical(&spec).unwrap()).unwrap().to_f64();
        // (x+2)^4 (x+3)^2
        let coh = convolve(
            &convolve(&convolve(&[2.0, 1.0], &[2.0, 1.0]), &convolve(&[2.0, 1.0], &[2.0, 1.0])),
            &convolve(&[3.0, 1.0], &[3.0, 1.0]),
        );
        let cl = affine_split_exact(&spec).unwrap().to_f64();
        assert_eq!(qm, cl.times_static(&coh));
    }

    #[test]
    fn charpoly_vanishes_at_eigenvalues() {
        let m = DMatrix::from_row_slice(
            4,
            4,
            &[
                -1.3, 0.7, 0.2, 0.0, 0.4, -2.1, 0.5, 1.1, 0.9, 0.3, -0.8, 0.6, 0.0, 1.1, 0.1, -1.7,
            ],
        );
        let dense = DenseMatrix { n: 4, data: m.transpose().iter().copied().collect() };
        let c = faddeev_leverrier(&dense);
        for ev in m.complex_eigenvalues().iter() {
            let p = c.iter().rev().fold(Complex64::zero(), |acc, &ck| acc * ev + ck);
            assert!(p.norm() < 1e-12 * max_abs(&c));
        }
    }

    #[test]
    fn oversized_generator_is_rejected() {
        let spec = ring(&vec![1.0; 65]);
        let g = build_generator(&spec).unwrap();
        assert_eq!(charpoly_at(&g, 1.0), Err(IcsError::Overflow(65)));
    }
}
