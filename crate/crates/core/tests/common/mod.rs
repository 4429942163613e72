//! Random model generators shared by the integration tests.
#![allow(dead_code)]

use ics_core::model::{Hamiltonian, ModelSpec, Transition};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Fully connected classical model with rates in [0.5, 3), detector on 1 → 2.
pub fn random_classical(rng: &mut ChaCha8Rng, n: usize) -> ModelSpec {
    let mut spec = ModelSpec::classical(n, Transition::new(1, 2));
    for from in 1..=n {
        for to in 1..=n {
            if from != to {
                spec = spec.with_rate(from, to, rng.random_range(0.5..3.0));
            }
        }
    }
    spec
}

/// Quantum model with a random subset of decay channels (detector 1 → 2 and
/// a path back to 1 always present) and a random complex Hermitian
/// Hamiltonian with detunings.
pub fn random_quantum(rng: &mut ChaCha8Rng, n: usize) -> ModelSpec {
    let mut spec = ModelSpec::quantum(n, Transition::new(1, 2)).with_rate(1, 2, rng.random_range(0.5..3.0));
    spec = spec.with_rate(n, 1, rng.random_range(0.5..3.0));
    for from in 1..=n {
        for to in 1..=n {
            if from != to && !spec.rates.contains_key(&Transition::new(from, to)) && rng.random_bool(0.3) {
                spec = spec.with_rate(from, to, rng.random_range(0.2..2.0));
            }
        }
    }
    let mut h = Hamiltonian::zeros(n);
    for i in 1..=n {
        h.set(i, i, Complex64::new(rng.random_range(-1.0..1.0), 0.0));
        for j in i + 1..=n {
            let z = Complex64::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            h.set(i, j, z);
            h.set(j, i, z.conj());
        }
    }
    spec.with_hamiltonian(h)
}
