//! Consistency tests of measured cumulants against a hypothesized generator class.
//!
//! A class fixes the generator dimension `M` (`N` classical, `N²` quantum).
//! The first `N_p = 2(M−1)` cumulants determine the characteristic
//! polynomial; the polynomial predicts `c_{N_p+1}`, and a prediction that
//! misses the measured value rules the whole class out.

use serde::{Deserialize, Serialize};

use crate::cumulants::{cumulants_from_charpoly, CumulantVector};
use crate::error::{IcsError, Result};
use crate::inverse::{independent_cumulants, reconstruct_charpoly};
use crate::model::ModelKind;
use crate::par::{self, Execution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Assumption {
    Classical,
    Quantum,
    Markovian,
    Dimension(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub assumptions: Vec<Assumption>,
    pub under_test: Assumption,
}

impl Hypothesis {
    pub fn new(assumptions: Vec<Assumption>, under_test: Assumption) -> Result<Self> {
        let h = Hypothesis { assumptions, under_test };
        h.validate()?;
        Ok(h)
    }

    /// "Classical" under the prior assumptions "Markovian, dimension N".
    pub fn classical(n: usize) -> Self {
        Hypothesis {
            assumptions: vec![Assumption::Markovian, Assumption::Dimension(n)],
            under_test: Assumption::Classical,
        }
    }

    /// "Dimension N" under the prior assumptions "kind, Markovian".
    pub fn dimension(kind: ModelKind, n: usize) -> Self {
        let k = match kind {
            ModelKind::Classical => Assumption::Classical,
            ModelKind::Quantum => Assumption::Quantum,
        };
        Hypothesis {
            assumptions: vec![k, Assumption::Markovian],
            under_test: Assumption::Dimension(n),
        }
    }

    fn all(&self) -> impl Iterator<Item = &Assumption> {
        self.assumptions.iter().chain(std::iter::once(&self.under_test))
    }

    pub fn validate(&self) -> Result<()> {
        if self.assumptions.contains(&self.under_test) {
            return Err(IcsError::InvalidInput(
                "the hypothesis under test is also listed as an assumption".into(),
            ));
        }
        let kinds = self
            .all()
            .filter(|a| matches!(a, Assumption::Classical | Assumption::Quantum))
            .count();
        if kinds != 1 {
            return Err(IcsError::InvalidInput(
                "exactly one of classical or quantum must be given".into(),
            ));
        }
        match self.all().filter(|a| matches!(a, Assumption::Dimension(_))).count() {
            1 => {}
            _ => {
                return Err(IcsError::InvalidInput(
                    "exactly one dimension must be given".into(),
                ))
            }
        }
        if self.states() < 2 {
            return Err(IcsError::BadDimension(self.states()));
        }
        Ok(())
    }

    pub fn kind(&self) -> ModelKind {
        if self.all().any(|a| *a == Assumption::Quantum) {
            ModelKind::Quantum
        } else {
            ModelKind::Classical
        }
    }

    pub fn states(&self) -> usize {
        self.all()
            .find_map(|a| match a {
                Assumption::Dimension(n) => Some(*n),
                _ => None,
            })
            .unwrap_or(0)
    }

    pub fn implied_m(&self) -> usize {
        self.kind().generator_dim(self.states())
    }

    pub fn n_p(&self) -> usize {
        independent_cumulants(self.implied_m())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    Absolute(f64),
    /// A multiple of the standard error of the measured cumulant.
    StandardErrors(f64),
}

impl Threshold {
    /// Three standard errors when the data carry them.
    pub fn default_for(c: &CumulantVector) -> Option<Threshold> {
        c.stderr.as_ref().map(|_| Threshold::StandardErrors(3.0))
    }

    fn resolve(self, c: &CumulantVector, nu: usize) -> Result<(f64, Option<f64>)> {
        let value = match self {
            Threshold::Absolute(t) => (t, None),
            Threshold::StandardErrors(k) => {
                let se = c
                    .stderr
                    .as_ref()
                    .map(|s| s[nu - 1])
                    .ok_or_else(|| IcsError::InvalidInput("threshold in standard errors needs stderr".into()))?;
                (k * se, Some(se))
            }
        };
        if !(value.0 > 0.0 && value.0.is_finite()) {
            return Err(IcsError::InvalidInput(format!("threshold {} must be positive", value.0)));
        }
        Ok(value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Reject,
    Consistent,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub hypothesis: Hypothesis,
    pub implied_m: usize,
    pub n_p: usize,
    pub predicted: Option<f64>,
    pub measured: f64,
    pub discrepancy: Option<f64>,
    pub threshold: f64,
    /// Discrepancy in units of the measured standard error, when known.
    pub z_score: Option<f64>,
    pub decision: Decision,
    pub reason: Option<String>,
    pub condition: Option<f64>,
    pub rank: Option<usize>,
    pub diagnostics: Vec<String>,
}

/// `c_{N_p+1}` predicted from the first `N_p = 2(M−1)` cumulants.
pub fn predict_next_cumulant(c: &CumulantVector, m: usize) -> Result<f64> {
    prediction(c, m).map(|(p, _, _)| p)
}

fn prediction(c: &CumulantVector, m: usize) -> Result<(f64, f64, usize)> {
    let n_p = independent_cumulants(m);
    if c.len() < n_p {
        return Err(IcsError::InsufficientCumulants { needed: n_p, available: c.len() });
    }
    let r = reconstruct_charpoly(&c.truncated(n_p), m)?;
    if !r.unique {
        return Err(IcsError::NonUnique { nullity: r.null_space.len() });
    }
    let next = cumulants_from_charpoly(&r.pair, n_p + 1)?;
    Ok((next.get(n_p + 1), r.condition, r.rank))
}

/// Closed-form existence region of a classical two-state model.
fn two_state_diagnostics(c: &CumulantVector) -> Vec<String> {
    let (c1, c2) = (c.get(1), c.get(2));
    let mut out = Vec::new();
    if c2 > c1 {
        out.push("super-Poissonian c2 > c1: no two-state rates exist".to_string());
    } else if 2.0 * c2 < c1 {
        out.push("2 c2 < c1: the two-state rates are complex".to_string());
    }
    out
}

pub fn run_test(c: &CumulantVector, hyp: &Hypothesis, threshold: Threshold) -> Result<Verdict> {
    hyp.validate()?;
    let m = hyp.implied_m();
    let n_p = independent_cumulants(m);
    if c.len() < n_p + 1 {
        return Err(IcsError::InsufficientCumulants { needed: n_p + 1, available: c.len() });
    }
    let measured = c.get(n_p + 1);
    let (threshold_value, stderr) = threshold.resolve(c, n_p + 1)?;
    let mut diagnostics = Vec::new();
    if m == 2 {
        diagnostics = two_state_diagnostics(c);
    }
    let verdict = match prediction(c, m) {
        Ok((predicted, condition, rank)) => {
            let discrepancy = (predicted - measured).abs();
            let decision = if discrepancy > threshold_value {
                Decision::Reject
            } else {
                Decision::Consistent
            };
            Verdict {
                hypothesis: hyp.clone(),
                implied_m: m,
                n_p,
                predicted: Some(predicted),
                measured,
                discrepancy: Some(discrepancy),
                threshold: threshold_value,
                z_score: stderr.map(|s| discrepancy / s),
                decision,
                reason: None,
                condition: Some(condition),
                rank: Some(rank),
                diagnostics,
            }
        }
        Err(e @ IcsError::InsufficientCumulants { .. }) => return Err(e),
        Err(e) => Verdict {
            hypothesis: hyp.clone(),
            implied_m: m,
            n_p,
            predicted: None,
            measured,
            discrepancy: None,
            threshold: threshold_value,
            z_score: None,
            decision: Decision::Inconclusive,
            reason: Some(e.to_string()),
            condition: None,
            rank: None,
            diagnostics,
        },
    };
    Ok(verdict)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionBound {
    pub kind: ModelKind,
    /// Smallest dimension not rejected, or one past the largest testable
    /// dimension when every test rejected.
    pub bound: usize,
    /// True when the scan ran out of cumulants before a test passed.
    pub capped: bool,
    pub max_testable: usize,
    pub inconclusive_at: Option<usize>,
    pub verdicts: Vec<Verdict>,
}

/// Scans `N = 2, 3, …` while the "dimension N" hypothesis is rejected.
pub fn dimension_lower_bound(
    c: &CumulantVector,
    kind: ModelKind,
    threshold: Threshold,
) -> Result<DimensionBound> {
    dimension_lower_bound_with(c, kind, threshold, Execution::default())
}

pub fn dimension_lower_bound_with(
    c: &CumulantVector,
    kind: ModelKind,
    threshold: Threshold,
    execution: Execution,
) -> Result<DimensionBound> {
    let testable: Vec<usize> = (2..)
        .take_while(|&n| independent_cumulants(kind.generator_dim(n)) < c.len())
        .collect();
    if testable.is_empty() {
        return Err(IcsError::InsufficientCumulants {
            needed: independent_cumulants(kind.generator_dim(2)) + 1,
            available: c.len(),
        });
    }
    let max_testable = *testable.last().expect("nonempty");
    let results = par::map(execution, testable, |n| {
        run_test(c, &Hypothesis::dimension(kind, n), threshold)
    });
    let mut verdicts = Vec::new();
    for r in results {
        let v = r?;
        let stop = v.decision != Decision::Reject;
        verdicts.push(v);
        if stop {
            break;
        }
    }
    let last = verdicts.last().expect("at least one test ran");
    let (bound, capped) = if last.decision == Decision::Reject {
        (max_testable + 1, true)
    } else {
        (last.hypothesis.states(), false)
    };
    let inconclusive_at = (last.decision == Decision::Inconclusive).then_some(bound);
    Ok(DimensionBound { kind, bound, capped, max_testable, inconclusive_at, verdicts })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cv(v: &[f64]) -> CumulantVector {
        CumulantVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn hypothesis_validation() {
        assert!(Hypothesis::new(vec![Assumption::Markovian], Assumption::Classical).is_err());
        assert!(Hypothesis::new(
            vec![Assumption::Classical, Assumption::Dimension(2)],
            Assumption::Classical
        )
        .is_err());
        assert!(Hypothesis::new(
            vec![Assumption::Quantum, Assumption::Dimension(2)],
            Assumption::Classical
        )
        .is_err());
        let h = Hypothesis::dimension(ModelKind::Quantum, 3);
        assert_eq!(h.implied_m(), 9);
        assert_eq!(h.n_p(), 16);
        assert_eq!(Hypothesis::classical(2).n_p(), 2);
    }

    #[test]
    fn two_state_prediction_matches_closed_form() {
        assert!((predict_next_cumulant(&cv(&[0.5, 0.25]), 2).unwrap() - 0.125).abs() < 1e-15);
        for (c1, c2) in [(0.7, 0.45), (2.0, 1.3), (1.0, 0.6)] {
            let closed = c1 + 3.0 * c2 * (c2 / c1 - 1.0);
            let p = predict_next_cumulant(&cv(&[c1, c2]), 2).unwrap();
            assert!((p - closed).abs() < 1e-12 * closed.abs().max(1.0));
        }
    }

    #[test]
    fn poissonian_is_inconclusive() {
        assert_eq!(predict_next_cumulant(&cv(&[1.0, 1.0]), 2), Err(IcsError::SingularSystem));
        let v = run_test(&cv(&[1.0, 1.0, 1.0]), &Hypothesis::classical(2), Threshold::Absolute(1e-6))
            .unwrap();
        assert_eq!(v.decision, Decision::Inconclusive);
        assert!(v.predicted.is_none());
        let b = dimension_lower_bound(&cv(&[1.0; 7]), ModelKind::Classical, Threshold::Absolute(1e-6))
            .unwrap();
        assert_eq!(b.bound, 2);
        assert_eq!(b.inconclusive_at, Some(2));
    }

    #[test]
    fn threshold_needs_stderr_for_sigma_units() {
        let c = cv(&[0.5, 0.25, 0.125]);
        assert!(run_test(&c, &Hypothesis::classical(2), Threshold::StandardErrors(3.0)).is_err());
        assert!(run_test(&c, &Hypothesis::classical(2), Threshold::Absolute(0.0)).is_err());
        assert!(Threshold::default_for(&c).is_none());
    }

    #[test]
    fn rejection_is_monotone_in_threshold() {
        let c = cv(&[0.5, 0.25, 0.2]);
        let mut rejected = false;
        for t in [1.0, 0.1, 0.05, 0.01, 1e-3] {
            let v = run_test(&c, &Hypothesis::classical(2), Threshold::Absolute(t)).unwrap();
            if rejected {
                assert_eq!(v.decision, Decision::Reject);
            }
            rejected |= v.decision == Decision::Reject;
        }
        assert!(rejected);
    }

    #[test]
    fn insufficient_cumulants() {
        assert!(matches!(
            run_test(&cv(&[0.5, 0.25]), &Hypothesis::classical(2), Threshold::Absolute(1e-3)),
            Err(IcsError::InsufficientCumulants { needed: 3, available: 2 })
        ));
        assert!(dimension_lower_bound(&cv(&[0.5, 0.25]), ModelKind::Classical, Threshold::Absolute(1e-3))
            .is_err());
    }
}
