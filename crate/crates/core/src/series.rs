//! Truncated power series in ξ.

use crate::scalar::Scalar;

/// Coefficients `t_0 … t_K` of `Σ t_k ξ^k`, truncated at order `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSeries<T> {
    coeffs: Vec<T>,
}

impl<T: Scalar> PowerSeries<T> {
    pub fn zeros(order: usize) -> Self {
        PowerSeries { coeffs: vec![T::zero(); order + 1] }
    }

    pub fn one(order: usize) -> Self {
        let mut s = Self::zeros(order);
        s.coeffs[0] = T::one();
        s
    }

    pub fn from_coeffs(coeffs: Vec<T>) -> Self {
        assert!(!coeffs.is_empty(), "a power series needs at least one coefficient");
        PowerSeries { coeffs }
    }

    /// `e^ξ − 1` through order `K`.
    pub fn exp_minus_one(order: usize) -> Self {
        let mut s = Self::zeros(order);
        let mut term = T::one();
        for k in 1..=order {
            term = term / T::from_usize(k);
            s.coeffs[k] = term.clone();
        }
        s
    }

    /// Series whose ν-th derivative at 0 is `derivatives[ν−1]`, with zero constant term.
    /// This and [`PowerSeries::derivatives`] are the only places where the
    /// factorial normalization is applied.
    pub fn from_derivatives(derivatives: &[T], order: usize) -> Self {
        let mut s = Self::zeros(order);
        let mut factorial = T::one();
        for k in 1..=order.min(derivatives.len()) {
            factorial = factorial * T::from_usize(k);
            s.coeffs[k] = derivatives[k - 1].clone() / factorial.clone();
        }
        s
    }

    /// `ν!·t_ν` for `ν = 1 … K`.
    pub fn derivatives(&self) -> Vec<T> {
        let mut factorial = T::one();
        (1..self.coeffs.len())
            .map(|k| {
                factorial = factorial.clone() * T::from_usize(k);
                self.coeffs[k].clone() * factorial.clone()
            })
            .collect()
    }

    pub fn order(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn coeff(&self, k: usize) -> &T {
        &self.coeffs[k]
    }

    pub fn coeffs(&self) -> &[T] {
        &self.coeffs
    }

    pub fn set_coeff(&mut self, k: usize, value: T) {
        self.coeffs[k] = value;
    }

    /// Cauchy product truncated at the smaller order.
    pub fn mul(&self, other: &Self) -> Self {
        let order = self.order().min(other.order());
        let coeffs = (0..=order)
            .map(|k| {
                T::sum_all(
                    (0..=k)
                        .filter(|&j| !self.coeffs[j].is_zero() && !other.coeffs[k - j].is_zero())
                        .map(|j| self.coeffs[j].clone() * other.coeffs[k - j].clone()),
                )
            })
            .collect();
        PowerSeries { coeffs }
    }

    pub fn add(&self, other: &Self) -> Self {
        let order = self.order().min(other.order());
        PowerSeries {
            coeffs: (0..=order)
                .map(|k| self.coeffs[k].clone() + other.coeffs[k].clone())
                .collect(),
        }
    }

    pub fn scale(&self, factor: &T) -> Self {
        PowerSeries {
            coeffs: self.coeffs.iter().map(|c| c.clone() * factor.clone()).collect(),
        }
    }

    pub fn pow(&self, exponent: usize) -> Self {
        (0..exponent).fold(Self::one(self.order()), |acc, _| acc.mul(self))
    }

    /// Powers `self^0 … self^max`.
    pub fn powers(&self, max: usize) -> Vec<Self> {
        let mut out = Vec::with_capacity(max + 1);
        out.push(Self::one(self.order()));
        for mu in 1..=max {
            let next = out[mu - 1].mul(self);
            out.push(next);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::BigRational;

    fn q(n: i64, d: i64) -> BigRational {
        BigRational::new(n.into(), d.into())
    }

    #[test]
    fn exp_minus_one_coefficients() {
        let s = PowerSeries::<BigRational>::exp_minus_one(4);
        assert_eq!(s.coeffs(), &[q(0, 1), q(1, 1), q(1, 2), q(1, 6), q(1, 24)]);
        assert_eq!(s.derivatives(), vec![q(1, 1); 4]);
    }

    #[test]
    fn derivative_normalization_round_trips() {
        let c = vec![q(3, 7), q(12, 49), q(-5, 3)];
        let s = PowerSeries::from_derivatives(&c, 3);
        assert_eq!(s.derivatives(), c);
    }

    #[test]
    fn product_with_exp_minus_one_matches_leibniz_rule() {
        // d^l [(e^ξ − 1) λ] at 0 = Σ_{j≥1} C(l, j) c_{l−j}, with c_0 = 0.
        let c = [0.3, -1.25, 2.5, 0.125, -7.0, 3.0];
        let lambda = PowerSeries::from_derivatives(&c, 6);
        let direct = PowerSeries::exp_minus_one(6).mul(&lambda).derivatives();
        for l in 1..=6 {
            let mut binom = 1.0;
            let mut leibniz = 0.0;
            for j in 1..=l {
                binom = binom * (l - j + 1) as f64 / j as f64;
                if l > j {
                    leibniz += binom * c[l - j - 1];
                }
            }
            assert!((direct[l - 1] - leibniz).abs() <= 1e-14 * leibniz.abs().max(1.0));
        }
    }

    #[test]
    fn powers_agree_with_repeated_products() {
        let s = PowerSeries::from_coeffs(vec![0.0, 1.5, -0.5, 0.25]);
        let p = s.powers(3);
        assert_eq!(p[3], s.mul(&s).mul(&s));
        assert_eq!(p[3], s.pow(3));
        assert_eq!(p[0].coeffs(), &[1.0, 0.0, 0.0, 0.0]);
    }
}
