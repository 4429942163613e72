//! Exact stochastic simulation of classical models and cumulant estimation
//! from window counts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::cumulants::CumulantVector;
use crate::error::{IcsError, Result};
use crate::io::model_hash;
use crate::model::{ModelKind, ModelSpec};
use crate::par::{self, Execution};

/// Windows per batch for the batch-means standard error.
pub const BATCH_WINDOWS: usize = 10;
pub const MIN_WINDOWS: usize = 30;
pub const MAX_ESTIMATED_ORDER: usize = 4;
/// Burn-in in units of the slowest rate.
pub const BURN_IN_RELAXATIONS: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub total_time: f64,
    /// Window length `T_w`.
    pub window: f64,
    /// Defaults to 20 divided by the smallest nonzero rate.
    #[serde(default)]
    pub burn_in: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl SimulationConfig {
    pub fn new(total_time: f64, window: f64, seed: u64) -> Self {
        SimulationConfig { total_time, window, burn_in: None, seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    /// SHA-256 of the canonical model document.
    pub model_hash: String,
    pub seed: u64,
    pub window: f64,
    pub burn_in: f64,
    pub total_time: f64,
    /// Monitored transitions over the whole run, burn-in included.
    pub events: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventTrace {
    pub header: TraceHeader,
    pub window_counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatedCumulants {
    pub cumulants: CumulantVector,
    pub windows: usize,
    pub window: f64,
}

struct Outgoing {
    exit: f64,
    /// `(target, cumulative rate)`, 0-based targets.
    cumulative: Vec<(usize, f64)>,
}

fn default_burn_in(spec: &ModelSpec) -> f64 {
    let slowest = spec
        .rates
        .values()
        .copied()
        .filter(|v| *v > 0.0)
        .fold(f64::INFINITY, f64::min);
    BURN_IN_RELAXATIONS / slowest
}

/// Gillespie simulation started in state 1, counting monitored jumps in
/// non-overlapping windows after the burn-in.
pub fn gillespie_trajectory(spec: &ModelSpec, config: &SimulationConfig) -> Result<EventTrace> {
    spec.validate()?;
    if spec.kind != ModelKind::Classical {
        return Err(IcsError::WrongKind { expected: "classical" });
    }
    let burn_in = config.burn_in.unwrap_or_else(|| default_burn_in(spec));
    let SimulationConfig { total_time, window, seed, .. } = *config;
    if !(window.is_finite() && window > 0.0 && burn_in.is_finite() && burn_in >= 0.0) {
        return Err(IcsError::InvalidInput(format!(
            "window {window} and burn-in {burn_in} must be positive and finite"
        )));
    }
    if !(total_time.is_finite() && total_time > burn_in + window) {
        return Err(IcsError::InvalidInput(format!(
            "total time {total_time} must exceed burn-in {burn_in} plus one window {window}"
        )));
    }

    let n = spec.dimension;
    let table: Vec<Outgoing> = (1..=n)
        .map(|from| {
            let mut acc = 0.0;
            let cumulative = (1..=n)
                .filter(|&to| to != from && spec.rate(from, to) > 0.0)
                .map(|to| {
                    acc += spec.rate(from, to);
                    (to - 1, acc)
                })
                .collect();
            Outgoing { exit: acc, cumulative }
        })
        .collect();
    let (det_from, det_to) = (spec.detector.from - 1, spec.detector.to - 1);

    let n_windows = ((total_time - burn_in) / window).floor() as usize;
    let mut counts = vec![0u64; n_windows];
    let mut events = 0u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = 0usize;
    let mut t = 0.0;
    loop {
        let out = &table[state];
        if out.exit == 0.0 {
            return Err(IcsError::AbsorbingState(state + 1));
        }
        let wait: f64 = rng.sample(Exp1);
        t += wait / out.exit;
        if t >= total_time {
            break;
        }
        let pick = rng.random::<f64>() * out.exit;
        let next = out
            .cumulative
            .iter()
            .find(|(_, c)| pick < *c)
            .map_or(out.cumulative[out.cumulative.len() - 1].0, |(to, _)| *to);
        if state == det_from && next == det_to {
            events += 1;
            if t >= burn_in {
                let w = ((t - burn_in) / window) as usize;
                if w < n_windows {
                    counts[w] += 1;
                }
            }
        }
        state = next;
    }

    Ok(EventTrace {
        header: TraceHeader {
            model_hash: model_hash(spec),
            seed,
            window,
            burn_in,
            total_time,
            events,
        },
        window_counts: counts,
    })
}

/// Independent traces for several seeds.
pub fn simulate_many(
    spec: &ModelSpec,
    config: &SimulationConfig,
    seeds: &[u64],
    execution: Execution,
) -> Vec<Result<EventTrace>> {
    par::map(execution, seeds.to_vec(), |seed| {
        gillespie_trajectory(spec, &SimulationConfig { seed, ..*config })
    })
}

/// Unbiased k-statistics `k_1 … k_order` of a sample.
pub fn k_statistics(sample: &[f64], order: usize) -> Vec<f64> {
    let n = sample.len() as f64;
    let mean = sample.iter().sum::<f64>() / n;
    let (mut s2, mut s3, mut s4) = (0.0, 0.0, 0.0);
    for x in sample {
        let d = x - mean;
        let d2 = d * d;
        s2 += d2;
        s3 += d2 * d;
        s4 += d2 * d2;
    }
    let k = [
        mean,
        s2 / (n - 1.0),
        n * s3 / ((n - 1.0) * (n - 2.0)),
        (n * (n + 1.0) * s4 - 3.0 * (n - 1.0) * s2 * s2) / ((n - 1.0) * (n - 2.0) * (n - 3.0)),
    ];
    k[..order].to_vec()
}

/// Scaled cumulants `k_ν / T_w` with batch-means standard errors.
pub fn estimate_cumulants(trace: &EventTrace, order: usize) -> Result<EstimatedCumulants> {
    if order == 0 || order > MAX_ESTIMATED_ORDER {
        return Err(IcsError::BadOrder(order));
    }
    let w = trace.window_counts.len();
    if w < MIN_WINDOWS {
        return Err(IcsError::TooFewWindows { windows: w, required: MIN_WINDOWS });
    }
    let t_w = trace.header.window;
    let counts: Vec<f64> = trace.window_counts.iter().map(|&c| c as f64).collect();
    let values: Vec<f64> = k_statistics(&counts, order).iter().map(|k| k / t_w).collect();

    let batches: Vec<Vec<f64>> = counts
        .chunks_exact(BATCH_WINDOWS)
        .map(|b| k_statistics(b, order))
        .collect();
    let b = batches.len() as f64;
    let stderr: Vec<f64> = (0..order)
        .map(|nu| {
            let mean = batches.iter().map(|k| k[nu]).sum::<f64>() / b;
            let var = batches.iter().map(|k| (k[nu] - mean).powi(2)).sum::<f64>() / (b - 1.0);
            (var / b).sqrt() / t_w
        })
        .collect();
    if stderr.iter().any(|s| !(*s > 0.0)) {
        return Err(IcsError::InvalidInput(
            "window counts have no spread; standard errors vanish".into(),
        ));
    }
    Ok(EstimatedCumulants {
        cumulants: CumulantVector::with_stderr(values, stderr)?,
        windows: w,
        window: t_w,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::*;

    #[test]
    fn k_statistics_of_small_sample() {
        // Reference values from the textbook formulas in power sums.
        let x = [1.0, 2.0, 4.0, 7.0, 11.0];
        let k = k_statistics(&x, 4);
        let n = 5.0;
        let s: Vec<f64> = (1..=4).map(|p| x.iter().map(|v: &f64| v.powi(p)).sum()).collect();
        let k2 = (n * s[1] - s[0] * s[0]) / (n * (n - 1.0));
        let k3 = (2.0 * s[0].powi(3) - 3.0 * n * s[0] * s[1] + n * n * s[2]) / (n * (n - 1.0) * (n - 2.0));
        let k4 = (-6.0 * s[0].powi(4) + 12.0 * n * s[0].powi(2) * s[1] - 3.0 * n * (n - 1.0) * s[1].powi(2)
            - 4.0 * n * (n + 1.0) * s[0] * s[2]
            + n * n * (n + 1.0) * s[3])
            / (n * (n - 1.0) * (n - 2.0) * (n - 3.0));
        for (a, b) in k.iter().zip([s[0] / n, k2, k3, k4]) {
            assert!((a - b).abs() < 1e-10 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn seeded_runs_repeat() {
        let spec = two_state(1.0, 1.0);
        let cfg = SimulationConfig::new(2000.0, 10.0, 42);
        let a = gillespie_trajectory(&spec, &cfg).unwrap();
        let b = gillespie_trajectory(&spec, &cfg).unwrap();
        assert_eq!(a, b);
        let c = gillespie_trajectory(&spec, &SimulationConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(a.window_counts, c.window_counts);
        assert!(a.window_counts.iter().sum::<u64>() <= a.header.events);
    }

    #[test]
    fn absorbing_state_is_reported() {
        let spec = ModelSpec::classical(2, crate::model::Transition::new(1, 2)).with_rate(1, 2, 1.0);
        let err = gillespie_trajectory(&spec, &SimulationConfig::new(100.0, 1.0, 0)).unwrap_err();
        assert_eq!(err, IcsError::AbsorbingState(2));
    }

    #[test]
    fn too_few_windows() {
        let spec = two_state(1.0, 1.0);
        let trace = gillespie_trajectory(&spec, &SimulationConfig::new(40.0, 1.0, 0)).unwrap();
        assert!(matches!(estimate_cumulants(&trace, 2), Err(IcsError::TooFewWindows { .. })));
    }

    #[test]
    fn parallel_and_sequential_traces_match() {
        let spec = two_state(2.0, 3.0);
        let cfg = SimulationConfig::new(500.0, 5.0, 0);
        let seq = simulate_many(&spec, &cfg, &[1, 2, 3], Execution::Sequential);
        let par = simulate_many(&spec, &cfg, &[1, 2, 3], Execution::Parallel);
        assert_eq!(seq, par);
    }
}
