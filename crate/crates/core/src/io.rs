//! JSON documents: model, cumulant, structure and trace files.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cumulants::CumulantVector;
use crate::error::{IcsError, Result};
use crate::model::{Hamiltonian, ModelKind, ModelSpec, Transition};
use crate::recovery::{Parameter, ParameterStructure};

/// Version of every document schema written by this crate.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateEntry {
    pub from: usize,
    pub to: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HamiltonianFile {
    pub real: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub imag: Option<Vec<Vec<f64>>>,
}

/// On-disk model: 1-based state labels, rates as a list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub kind: ModelKind,
    pub dimension: usize,
    pub rates: Vec<RateEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hamiltonian: Option<HamiltonianFile>,
    pub detector: Transition,
}

impl ModelFile {
    pub fn from_spec(spec: &ModelSpec) -> Self {
        let rates = spec
            .rates
            .iter()
            .map(|(t, &value)| RateEntry { from: t.from, to: t.to, value })
            .collect();
        let hamiltonian = spec.hamiltonian.as_ref().map(|h| {
            let imag = h.imag_rows();
            let has_imag = imag.iter().flatten().any(|v| *v != 0.0);
            HamiltonianFile {
                real: h.real_rows(),
                imag: has_imag.then_some(imag),
            }
        });
        ModelFile {
            kind: spec.kind,
            dimension: spec.dimension,
            rates,
            hamiltonian,
            detector: spec.detector,
        }
    }

    /// Converts and validates. Repeated transitions are rejected.
    pub fn to_spec(&self) -> Result<ModelSpec> {
        let mut spec = match self.kind {
            ModelKind::Classical => ModelSpec::classical(self.dimension, self.detector),
            ModelKind::Quantum => ModelSpec::quantum(self.dimension, self.detector),
        };
        for r in &self.rates {
            let t = Transition::new(r.from, r.to);
            if spec.rates.insert(t, r.value).is_some() {
                return Err(IcsError::InvalidInput(format!(
                    "rate {} -> {} listed twice",
                    r.from, r.to
                )));
            }
        }
        if let Some(h) = &self.hamiltonian {
            spec.hamiltonian = Some(Hamiltonian::from_parts(&h.real, h.imag.as_deref())?);
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Cumulant file. `time_base` is the time unit the values are expressed in,
/// measured in model time units; values are divided by it on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CumulantFile {
    #[serde(default = "unit_time_base")]
    pub time_base: f64,
    pub cumulants: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stderr: Option<Vec<f64>>,
}

fn unit_time_base() -> f64 {
    1.0
}

impl CumulantFile {
    pub fn from_cumulants(c: &CumulantVector) -> Self {
        CumulantFile {
            time_base: 1.0,
            cumulants: c.values.clone(),
            stderr: c.stderr.clone(),
        }
    }

    pub fn to_cumulants(&self) -> Result<CumulantVector> {
        if !(self.time_base.is_finite() && self.time_base > 0.0) {
            return Err(IcsError::InvalidInput(format!(
                "time_base must be positive, got {}",
                self.time_base
            )));
        }
        let scale = |v: &[f64]| v.iter().map(|x| x / self.time_base).collect::<Vec<_>>();
        match &self.stderr {
            Some(se) => CumulantVector::with_stderr(scale(&self.cumulants), scale(se)),
            None => CumulantVector::new(scale(&self.cumulants)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureFile {
    pub template: ModelFile,
    pub unknowns: Vec<Parameter>,
}

impl StructureFile {
    pub fn from_structure(s: &ParameterStructure) -> Self {
        StructureFile {
            template: ModelFile::from_spec(&s.template),
            unknowns: s.unknowns.clone(),
        }
    }

    /// The template is not validated on its own, since unknown rates may be
    /// absent from it; the structure is validated as a whole.
    pub fn to_structure(&self) -> Result<ParameterStructure> {
        let t = &self.template;
        let mut spec = match t.kind {
            ModelKind::Classical => ModelSpec::classical(t.dimension, t.detector),
            ModelKind::Quantum => ModelSpec::quantum(t.dimension, t.detector),
        };
        for r in &t.rates {
            spec.rates.insert(Transition::new(r.from, r.to), r.value);
        }
        if let Some(h) = &t.hamiltonian {
            spec.hamiltonian = Some(Hamiltonian::from_parts(&h.real, h.imag.as_deref())?);
        }
        ParameterStructure::new(spec, self.unknowns.clone())
    }
}

/// Parses a JSON document; errors carry line and column.
pub fn parse_json<T: DeserializeOwned>(text: &str, what: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| IcsError::InvalidInput(format!("malformed {what}: {e}")))
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("documents serialize");
    s.push('\n');
    s
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the canonical (compact) model document.
pub fn model_hash(spec: &ModelSpec) -> String {
    let canonical = serde_json::to_string(&ModelFile::from_spec(spec)).expect("models serialize");
    sha256_hex(canonical.as_bytes())
}
