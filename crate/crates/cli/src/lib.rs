//! Argument parsing and verb execution for the `ics` binary.
//!
//! [`parse_and_validate`] turns an argument list into a [`Command`] with all
//! input documents read and parsed; [`execute`] runs it and returns the report
//! together with the exit code.

use std::fmt;
use std::io::Read;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use ics_core::charpoly::{self, affine_split, embedding_factorization};
use ics_core::cumulants::{self, cumulants_from_charpoly, eigenvalue_fd_oracle, CumulantVector};
use ics_core::hypothesis::{self, Assumption, Hypothesis, Threshold};
use ics_core::inverse::{self, independent_cumulants, reconstruct_charpoly};
use ics_core::io::{self, CumulantFile, ModelFile, StructureFile};
use ics_core::model::{build_generator, embed_classical, steady_state, ModelKind};
use ics_core::recovery::{self, RecoveryConfig, RecoveryReport};
use ics_core::sim::{self, estimate_cumulants, gillespie_trajectory, EventTrace, SimulationConfig};
use ics_core::IcsError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "ics", version, about = "Inverse counting statistics toolkit")]
struct Cli {
    /// Write the full report here; a summary goes to stdout.
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    verb: VerbArgs,
}

#[derive(Subcommand, Debug)]
enum VerbArgs {
    /// Characteristic polynomial, cumulants and steady state of a model.
    Forward {
        model: String,
        #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..=64))]
        orders: u64,
        /// Cross-check against finite differences of the eigenvalue branch.
        #[arg(long)]
        oracle: bool,
        /// Compute the cumulants in rational arithmetic (slow, correctly rounded).
        #[arg(long)]
        exact: bool,
    },
    /// Reconstruct the characteristic polynomial pair from cumulants.
    ReconPoly {
        cumulants: String,
        #[arg(long)]
        dimension: usize,
    },
    /// Predict higher cumulants from the first 2(M-1).
    Predict {
        cumulants: String,
        #[arg(long)]
        dimension: usize,
        /// Highest order to report (default 2M-1).
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..=64))]
        orders: Option<u64>,
    },
    /// Test a hypothesis against measured cumulants.
    Test {
        cumulants: String,
        /// classical, quantum, markovian or dim=N (repeatable).
        #[arg(long = "assume")]
        assume: Vec<String>,
        /// classical, quantum, dim=N, or dim for a lower-bound scan.
        #[arg(long)]
        hypothesis: String,
        /// Absolute threshold, or K-sigma such as "3sigma".
        #[arg(long)]
        threshold: Option<String>,
    },
    /// Recover generator parameters consistent with the data.
    Recover {
        structure: String,
        cumulants: String,
        #[arg(long, value_enum, default_value_t = ModeArg::CoefficientMatch)]
        mode: ModeArg,
        #[arg(long)]
        starts: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Recovery config document; --starts and --seed override it.
        #[arg(long)]
        config: Option<String>,
    },
    /// Gillespie simulation of a classical model with cumulant estimates.
    Simulate {
        model: String,
        #[arg(long)]
        time: f64,
        #[arg(long)]
        window: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        burn_in: Option<f64>,
        #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..=4))]
        orders: u64,
    },
    /// Embed a classical model as a quantum one and check the factorization.
    Embed { model: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    CoefficientMatch,
    CumulantMatch,
    ClosedForm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verb {
    Forward,
    ReconPoly,
    Predict,
    Test,
    Recover,
    Simulate,
    Embed,
}

impl Verb {
    pub fn name(self) -> &'static str {
        match self {
            Verb::Forward => "forward",
            Verb::ReconPoly => "recon-poly",
            Verb::Predict => "predict",
            Verb::Test => "test",
            Verb::Recover => "recover",
            Verb::Simulate => "simulate",
            Verb::Embed => "embed",
        }
    }
}

/// What the command asks to be tested.
#[derive(Debug, Clone, PartialEq)]
pub enum TestKind {
    Single(Hypothesis),
    DimensionScan(ModelKind),
}

/// Cumulants as given, or a trace to estimate them from.
#[derive(Debug, Clone, PartialEq)]
pub enum CumulantSource {
    File(CumulantFile),
    Trace(Box<EventTrace>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Document {
    Model(ModelFile),
    Cumulants(CumulantSource),
    Structure(StructureFile),
    Config(RecoveryConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Input {
    pub path: String,
    pub sha256: String,
    pub document: Document,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Command {
    pub verb: Verb,
    pub argv: Vec<String>,
    pub inputs: Vec<Input>,
    pub output: Option<PathBuf>,
    pub orders: Option<usize>,
    pub dimension: Option<usize>,
    pub oracle: bool,
    pub exact: bool,
    pub test: Option<TestKind>,
    pub threshold: Option<Threshold>,
    pub mode: Option<ModeArg>,
    pub recovery: Option<RecoveryConfig>,
    pub simulation: Option<SimulationConfig>,
}

#[derive(Debug)]
pub enum CliError {
    /// Help, version or a clap usage error, printed as clap formats it.
    Clap(clap::Error),
    Usage(String),
    FileNotFound(String),
    Malformed { path: String, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Clap(e) => e.exit_code(),
            _ => EXIT_USAGE,
        }
    }

    /// Prints to stdout for help/version, stderr otherwise.
    pub fn print(&self) {
        match self {
            CliError::Clap(e) => {
                let _ = e.print();
            }
            other => eprintln!("error: {other}"),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Clap(e) => write!(f, "{}", e.render()),
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::FileNotFound(p) => write!(f, "file not found: {p}"),
            CliError::Malformed { path, message } => write!(f, "{path}: {message}"),
        }
    }
}

impl std::error::Error for CliError {}

fn usage(message: impl Into<String>) -> CliError {
    CliError::Usage(message.into())
}

struct Reader {
    stdin_used: bool,
}

impl Reader {
    fn read(&mut self, path: &str) -> Result<String, CliError> {
        if path == "-" {
            if self.stdin_used {
                return Err(usage("standard input can be read only once"));
            }
            self.stdin_used = true;
            let mut s = String::new();
            std::io::stdin()
                .read_to_string(&mut s)
                .map_err(|e| CliError::Malformed { path: "-".into(), message: e.to_string() })?;
            return Ok(s);
        }
        std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CliError::FileNotFound(path.to_string()),
            _ => CliError::Malformed { path: path.to_string(), message: e.to_string() },
        })
    }
}

/// Parses `text` as `T`, or as the `field` of a report's `result`.
fn extract<T: DeserializeOwned>(text: &str, field: &str) -> Result<T, String> {
    let direct = serde_json::from_str::<T>(text);
    let err = match direct {
        Ok(v) => return Ok(v),
        Err(e) => e,
    };
    if let Ok(Value::Object(obj)) = serde_json::from_str::<Value>(text) {
        if let Some(inner) = obj.get("result").and_then(|r| r.get(field)) {
            return serde_json::from_value(inner.clone()).map_err(|e| format!("result.{field}: {e}"));
        }
    }
    Err(err.to_string())
}

fn parse_cumulant_source(text: &str) -> Result<CumulantSource, String> {
    match extract::<CumulantFile>(text, "cumulants") {
        Ok(f) => Ok(CumulantSource::File(f)),
        Err(first) => extract::<EventTrace>(text, "trace")
            .map(|t| CumulantSource::Trace(Box::new(t)))
            .map_err(|_| first),
    }
}

fn load(reader: &mut Reader, path: &str, kind: &str) -> Result<Input, CliError> {
    let text = reader.read(path)?;
    let malformed = |message: String| CliError::Malformed { path: path.to_string(), message };
    let document = match kind {
        "model" => Document::Model(extract(&text, "model").map_err(malformed)?),
        "cumulants" => Document::Cumulants(parse_cumulant_source(&text).map_err(malformed)?),
        "structure" => Document::Structure(extract(&text, "structure").map_err(malformed)?),
        "config" => Document::Config(extract(&text, "config").map_err(malformed)?),
        _ => unreachable!("unknown document kind"),
    };
    Ok(Input {
        path: path.to_string(),
        sha256: io::sha256_hex(text.as_bytes()),
        document,
    })
}

fn parse_assumption(key: &str) -> Result<Assumption, CliError> {
    match key {
        "classical" => Ok(Assumption::Classical),
        "quantum" => Ok(Assumption::Quantum),
        "markovian" => Ok(Assumption::Markovian),
        _ => {
            let value = key
                .strip_prefix("dim=")
                .or_else(|| key.strip_prefix("dimension="))
                .ok_or_else(|| usage(format!("unknown assumption '{key}'")))?;
            let n = value
                .parse::<usize>()
                .map_err(|_| usage(format!("invalid dimension in '{key}'")))?;
            Ok(Assumption::Dimension(n))
        }
    }
}

fn parse_threshold(text: &str) -> Result<Threshold, CliError> {
    let bad = || usage(format!("--threshold: expected a positive number or K-sigma, got '{text}'"));
    let t = match text.strip_suffix("sigma") {
        Some(k) => Threshold::StandardErrors(k.parse().map_err(|_| bad())?),
        None => Threshold::Absolute(text.parse().map_err(|_| bad())?),
    };
    let v = match t {
        Threshold::Absolute(v) | Threshold::StandardErrors(v) => v,
    };
    if !(v.is_finite() && v > 0.0) {
        return Err(bad());
    }
    Ok(t)
}

fn parse_test(assume: &[String], hypothesis: &str) -> Result<TestKind, CliError> {
    let assumptions = assume.iter().map(|a| parse_assumption(a)).collect::<Result<Vec<_>, _>>()?;
    if hypothesis == "dim" || hypothesis == "dimension" {
        let kinds: Vec<ModelKind> = assumptions
            .iter()
            .filter_map(|a| match a {
                Assumption::Classical => Some(ModelKind::Classical),
                Assumption::Quantum => Some(ModelKind::Quantum),
                _ => None,
            })
            .collect();
        if kinds.len() != 1 || assumptions.iter().any(|a| matches!(a, Assumption::Dimension(_))) {
            return Err(usage(
                "--hypothesis dim needs exactly one of --assume classical|quantum and no dimension",
            ));
        }
        return Ok(TestKind::DimensionScan(kinds[0]));
    }
    let under_test = parse_assumption(hypothesis).map_err(|_| usage(format!("--hypothesis: unknown key '{hypothesis}'")))?;
    let h = Hypothesis::new(assumptions, under_test).map_err(|e| usage(format!("--assume/--hypothesis: {e}")))?;
    Ok(TestKind::Single(h))
}

/// Parses arguments (without the program name) and reads every input.
pub fn parse_and_validate<S: AsRef<str>>(args: &[S]) -> Result<Command, CliError> {
    let argv: Vec<String> = std::iter::once("ics".to_string())
        .chain(args.iter().map(|s| s.as_ref().to_string()))
        .collect();
    let cli = Cli::try_parse_from(&argv).map_err(CliError::Clap)?;
    let mut reader = Reader { stdin_used: false };
    let mut cmd = Command {
        verb: Verb::Forward,
        argv,
        inputs: Vec::new(),
        output: cli.output,
        orders: None,
        dimension: None,
        oracle: false,
        exact: false,
        test: None,
        threshold: None,
        mode: None,
        recovery: None,
        simulation: None,
    };
    match cli.verb {
        VerbArgs::Forward { model, orders, oracle, exact } => {
            if oracle && orders as usize > cumulants::MAX_ORACLE_ORDER {
                return Err(usage(format!(
                    "--oracle supports --orders up to {}",
                    cumulants::MAX_ORACLE_ORDER
                )));
            }
            cmd.inputs.push(load(&mut reader, &model, "model")?);
            cmd.orders = Some(orders as usize);
            cmd.oracle = oracle;
            cmd.exact = exact;
        }
        VerbArgs::ReconPoly { cumulants, dimension } => {
            cmd.verb = Verb::ReconPoly;
            check_dimension(dimension)?;
            cmd.inputs.push(load(&mut reader, &cumulants, "cumulants")?);
            cmd.dimension = Some(dimension);
        }
        VerbArgs::Predict { cumulants, dimension, orders } => {
            cmd.verb = Verb::Predict;
            check_dimension(dimension)?;
            cmd.inputs.push(load(&mut reader, &cumulants, "cumulants")?);
            cmd.dimension = Some(dimension);
            cmd.orders = orders.map(|k| k as usize);
        }
        VerbArgs::Test { cumulants, assume, hypothesis, threshold } => {
            cmd.verb = Verb::Test;
            cmd.test = Some(parse_test(&assume, &hypothesis)?);
            cmd.threshold = threshold.as_deref().map(parse_threshold).transpose()?;
            let input = load(&mut reader, &cumulants, "cumulants")?;
            if cmd.threshold.is_none() {
                let has_stderr = match &input.document {
                    Document::Cumulants(CumulantSource::File(f)) => f.stderr.is_some(),
                    _ => true,
                };
                if !has_stderr {
                    return Err(usage("--threshold is required when the cumulants carry no stderr"));
                }
            }
            cmd.inputs.push(input);
        }
        VerbArgs::Recover { structure, cumulants, mode, starts, seed, config } => {
            cmd.verb = Verb::Recover;
            cmd.inputs.push(load(&mut reader, &structure, "structure")?);
            cmd.inputs.push(load(&mut reader, &cumulants, "cumulants")?);
            let mut rc = RecoveryConfig::default();
            if let Some(path) = config {
                let input = load(&mut reader, &path, "config")?;
                if let Document::Config(c) = &input.document {
                    rc = *c;
                }
                cmd.inputs.push(input);
            }
            if let Some(s) = starts {
                rc.starts = s;
            }
            if let Some(s) = seed {
                rc.seed = s;
            }
            rc.validate().map_err(|e| usage(format!("recovery settings: {e}")))?;
            cmd.mode = Some(mode);
            cmd.recovery = Some(rc);
        }
        VerbArgs::Simulate { model, time, window, seed, burn_in, orders } => {
            cmd.verb = Verb::Simulate;
            for (name, v) in [("--time", Some(time)), ("--window", Some(window)), ("--burn-in", burn_in)] {
                if let Some(v) = v {
                    if !(v.is_finite() && v >= 0.0) || (name != "--burn-in" && v == 0.0) {
                        return Err(usage(format!("{name} must be a positive number, got {v}")));
                    }
                }
            }
            cmd.inputs.push(load(&mut reader, &model, "model")?);
            cmd.orders = Some(orders as usize);
            cmd.simulation = Some(SimulationConfig { total_time: time, window, burn_in, seed });
        }
        VerbArgs::Embed { model } => {
            cmd.verb = Verb::Embed;
            cmd.inputs.push(load(&mut reader, &model, "model")?);
        }
    }
    Ok(cmd)
}

fn check_dimension(m: usize) -> Result<(), CliError> {
    if m < 2 {
        return Err(usage(format!("--dimension must be at least 2, got {m}")));
    }
    Ok(())
}

/// Report and exit code of an executed command.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub exit_code: i32,
    pub report: Value,
    pub summary: String,
}

struct Success {
    result: Value,
    summary: String,
    tolerances: Value,
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report values serialize")
}

/// Runs the command. Domain errors become an `error` entry and exit code 1.
pub fn execute(cmd: &Command) -> Outcome {
    let outcome = match cmd.verb {
        Verb::Forward => run_forward(cmd),
        Verb::ReconPoly => run_recon(cmd),
        Verb::Predict => run_predict(cmd),
        Verb::Test => run_test(cmd),
        Verb::Recover => run_recover(cmd),
        Verb::Simulate => run_simulate(cmd),
        Verb::Embed => run_embed(cmd),
    };
    let mut report = json!({
        "schema_version": io::SCHEMA_VERSION,
        "tool": {"name": "ics", "version": env!("CARGO_PKG_VERSION")},
        "command": cmd.argv,
        "verb": cmd.verb.name(),
        "inputs": cmd.inputs.iter().map(|i| json!({"path": i.path, "sha256": i.sha256})).collect::<Vec<_>>(),
    });
    let obj = report.as_object_mut().expect("object");
    match outcome {
        Ok(s) => {
            obj.insert("tolerances".into(), s.tolerances);
            obj.insert("status".into(), json!("ok"));
            obj.insert("result".into(), s.result);
            Outcome { exit_code: EXIT_OK, report, summary: s.summary }
        }
        Err((e, tolerances)) => {
            obj.insert("tolerances".into(), tolerances);
            obj.insert("status".into(), json!("error"));
            obj.insert("error".into(), json!({"kind": e.kind(), "message": e.to_string()}));
            Outcome {
                exit_code: EXIT_DOMAIN,
                report,
                summary: format!("{} failed: {e}", cmd.verb.name()),
            }
        }
    }
}

type Run = std::result::Result<Success, (IcsError, Value)>;

fn model_of(cmd: &Command) -> &ModelFile {
    match &cmd.inputs[0].document {
        Document::Model(m) => m,
        _ => unreachable!("first input is a model"),
    }
}

fn cumulants_of(cmd: &Command, index: usize) -> ics_core::Result<(CumulantVector, Option<Value>)> {
    match &cmd.inputs[index].document {
        Document::Cumulants(CumulantSource::File(f)) => Ok((f.to_cumulants()?, None)),
        Document::Cumulants(CumulantSource::Trace(t)) => {
            let e = estimate_cumulants(t, sim::MAX_ESTIMATED_ORDER)?;
            let note = json!({"estimated_from_trace": true, "windows": e.windows, "window": e.window});
            Ok((e.cumulants, Some(note)))
        }
        _ => unreachable!("input is a cumulant document"),
    }
}

fn forward_tolerances(oracle: bool) -> Value {
    let mut t = json!({
        "affine_rtol": charpoly::AFFINE_RTOL,
        "imag_rtol": charpoly::IMAG_RTOL,
        "degeneracy_rtol": cumulants::DEGENERACY_RTOL,
    });
    if oracle {
        t["oracle_step"] = json!(cumulants::DEFAULT_ORACLE_STEP);
    }
    t
}

fn inverse_tolerances() -> Value {
    json!({"rank_rtol": inverse::RANK_RTOL, "degeneracy_rtol": cumulants::DEGENERACY_RTOL})
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(", ")
}

fn run_forward(cmd: &Command) -> Run {
    let tol = forward_tolerances(cmd.oracle);
    let fail = |e: IcsError| (e, tol.clone());
    let spec = model_of(cmd).to_spec().map_err(fail)?;
    let order = cmd.orders.unwrap_or(4);
    let generator = build_generator(&spec).map_err(fail)?;
    let pair = affine_split(&generator).map_err(fail)?;
    let c = if cmd.exact {
        cumulants::model_cumulants_exact(&spec, order).map_err(fail)?
    } else {
        cumulants_from_charpoly(&pair, order).map_err(fail)?
    };
    let ss = steady_state(&generator).map_err(fail)?;
    let mut result = json!({
        "model_hash": io::model_hash(&spec),
        "generator_dimension": generator.dim(),
        "charpoly": pair,
        "cumulants": CumulantFile::from_cumulants(&c),
        "exact": cmd.exact,
        "fano_factor": cumulants::fano_factor(&pair).map_err(fail)?,
        "steady_state": ss.occupations,
    });
    let mut summary = format!("cumulants c1..c{order}: {}", fmt_list(&c.values));
    if cmd.oracle {
        let o = eigenvalue_fd_oracle(&generator, order, cumulants::DEFAULT_ORACLE_STEP).map_err(fail)?;
        let diff = c
            .values
            .iter()
            .zip(&o.values)
            .map(|(a, b)| (a - b).abs() / a.abs().max(1.0))
            .fold(0.0, f64::max);
        result["oracle"] = json!({"cumulants": o.values, "max_relative_difference": diff});
        summary.push_str(&format!("\noracle agreement: {diff:.2e}"));
    }
    Ok(Success { result, summary, tolerances: tol })
}

fn run_recon(cmd: &Command) -> Run {
    let tol = inverse_tolerances();
    let fail = |e: IcsError| (e, tol.clone());
    let m = cmd.dimension.expect("validated");
    let (c, source) = cumulants_of(cmd, 0).map_err(fail)?;
    let r = reconstruct_charpoly(&c, m).map_err(fail)?;
    let n_p = independent_cumulants(m);
    let next = if r.unique {
        Some(cumulants_from_charpoly(&r.pair, n_p + 1).map_err(fail)?.get(n_p + 1))
    } else {
        None
    };
    let summary = format!(
        "M = {m}: rank {}/{}, condition {:.2e}, {}",
        r.rank,
        n_p,
        r.condition,
        if r.unique {
            "unique".to_string()
        } else {
            format!("null space of dimension {}", r.null_space.len())
        }
    );
    let result = json!({
        "dimension": m,
        "charpoly": r.pair,
        "unique": r.unique,
        "rank": r.rank,
        "condition": r.condition,
        "singular_values": r.singular_values,
        "null_space": r.null_space,
        "next_cumulant": next,
        "source": source,
    });
    Ok(Success { result, summary, tolerances: tol })
}

fn run_predict(cmd: &Command) -> Run {
    let tol = inverse_tolerances();
    let fail = |e: IcsError| (e, tol.clone());
    let m = cmd.dimension.expect("validated");
    let n_p = independent_cumulants(m);
    let order = cmd.orders.unwrap_or(n_p + 1);
    let (c, source) = cumulants_of(cmd, 0).map_err(fail)?;
    if c.len() < n_p {
        return Err(fail(IcsError::InsufficientCumulants { needed: n_p, available: c.len() }));
    }
    let r = reconstruct_charpoly(&c.truncated(n_p), m).map_err(fail)?;
    if !r.unique {
        return Err(fail(IcsError::NonUnique { nullity: r.null_space.len() }));
    }
    let predicted = cumulants_from_charpoly(&r.pair, order).map_err(fail)?;
    let comparison: Vec<Value> = (n_p + 1..=order.min(c.len()))
        .map(|nu| {
            json!({
                "order": nu,
                "predicted": predicted.get(nu),
                "measured": c.get(nu),
                "difference": predicted.get(nu) - c.get(nu),
            })
        })
        .collect();
    let summary = format!("predicted c1..c{order}: {}", fmt_list(&predicted.values));
    let result = json!({
        "dimension": m,
        "n_p": n_p,
        "charpoly": r.pair,
        "predicted": predicted.values,
        "comparison": comparison,
        "condition": r.condition,
        "source": source,
    });
    Ok(Success { result, summary, tolerances: tol })
}

fn run_test(cmd: &Command) -> Run {
    let mut tol = inverse_tolerances();
    let (c, source) = match cumulants_of(cmd, 0) {
        Ok(v) => v,
        Err(e) => return Err((e, tol)),
    };
    let threshold = match cmd.threshold.or_else(|| Threshold::default_for(&c)) {
        Some(t) => t,
        None => {
            let e = IcsError::InvalidInput("a threshold is required without stderr".into());
            return Err((e, tol));
        }
    };
    tol["threshold"] = to_value(&threshold);
    match cmd.test.as_ref().expect("validated") {
        TestKind::Single(h) => {
            let v = hypothesis::run_test(&c, h, threshold).map_err(|e| (e, tol.clone()))?;
            let mut summary = format!("decision: {:?}", v.decision).to_lowercase();
            if let (Some(p), Some(d)) = (v.predicted, v.discrepancy) {
                summary.push_str(&format!(
                    "\nc{} predicted {p:.6}, measured {:.6}, discrepancy {d:.3e} vs threshold {:.3e}",
                    v.n_p + 1,
                    v.measured,
                    v.threshold
                ));
            }
            if let Some(r) = &v.reason {
                summary.push_str(&format!("\nreason: {r}"));
            }
            let mut result = to_value(&v);
            result["source"] = json!(source);
            Ok(Success { result, summary, tolerances: tol })
        }
        TestKind::DimensionScan(kind) => {
            let b = hypothesis::dimension_lower_bound(&c, *kind, threshold).map_err(|e| (e, tol.clone()))?;
            let summary = format!(
                "dimension lower bound: {}{}",
                b.bound,
                if b.capped { " (capped by the number of cumulants)" } else { "" }
            );
            let mut result = to_value(&b);
            result["source"] = json!(source);
            Ok(Success { result, summary, tolerances: tol })
        }
    }
}

fn recovery_tolerances(rc: &RecoveryConfig) -> Value {
    json!({
        "tolerance": rc.tolerance,
        "dedup_radius": rc.dedup_radius,
        "jacobian_rank_rtol": recovery::JACOBIAN_RANK_RTOL,
        "cross_check_rtol": recovery::CROSS_CHECK_RTOL,
        "rank_rtol": inverse::RANK_RTOL,
        "starts": rc.starts,
        "seed": rc.seed,
        "patience": rc.patience,
    })
}

fn run_recover(cmd: &Command) -> Run {
    let rc = cmd.recovery.expect("validated");
    let tol = recovery_tolerances(&rc);
    let fail = |e: IcsError| (e, tol.clone());
    let structure = match &cmd.inputs[0].document {
        Document::Structure(s) => s.to_structure().map_err(fail)?,
        _ => unreachable!("first input is a structure"),
    };
    let (c, source) = cumulants_of(cmd, 1).map_err(fail)?;
    let report: RecoveryReport = match cmd.mode.expect("validated") {
        ModeArg::ClosedForm => recovery::closed_form_recover(&structure, &c),
        ModeArg::CumulantMatch => recovery::cumulant_match_recover(&structure, &c, &rc),
        ModeArg::CoefficientMatch => {
            let m = structure.generator_dim();
            let r = reconstruct_charpoly(&c, m).map_err(fail)?;
            if !r.unique {
                return Err(fail(IcsError::NonUnique { nullity: r.null_space.len() }));
            }
            recovery::recover_multistart(&structure, &r.pair, &rc)
        }
    }
    .map_err(fail)?;
    let names: Vec<String> = structure.unknowns.iter().map(|p| p.to_string()).collect();
    let mut summary = format!(
        "{} verified solution(s) over [{}]",
        report.solutions.len(),
        names.join(", ")
    );
    for s in &report.solutions {
        summary.push_str(&format!("\n  {}", fmt_list(&s.parameters)));
    }
    let mut result = to_value(&report);
    result["source"] = json!(source);
    Ok(Success { result, summary, tolerances: tol })
}

fn run_simulate(cmd: &Command) -> Run {
    let sc = cmd.simulation.expect("validated");
    let tol = json!({
        "batch_windows": sim::BATCH_WINDOWS,
        "min_windows": sim::MIN_WINDOWS,
        "burn_in_relaxations": sim::BURN_IN_RELAXATIONS,
    });
    let fail = |e: IcsError| (e, tol.clone());
    let spec = model_of(cmd).to_spec().map_err(fail)?;
    let trace = gillespie_trajectory(&spec, &sc).map_err(fail)?;
    let est = estimate_cumulants(&trace, cmd.orders.unwrap_or(4)).map_err(fail)?;
    let summary = format!(
        "{} events, {} windows of length {}\ncumulants: {}\nstderr:    {}",
        trace.header.events,
        est.windows,
        est.window,
        fmt_list(&est.cumulants.values),
        fmt_list(est.cumulants.stderr.as_deref().unwrap_or(&[]))
    );
    let result = json!({
        "cumulants": CumulantFile::from_cumulants(&est.cumulants),
        "windows": est.windows,
        "trace": trace,
    });
    Ok(Success { result, summary, tolerances: tol })
}

fn run_embed(cmd: &Command) -> Run {
    let tol = json!({"affine_rtol": charpoly::AFFINE_RTOL, "imag_rtol": charpoly::IMAG_RTOL});
    let fail = |e: IcsError| (e, tol.clone());
    let spec = model_of(cmd).to_spec().map_err(fail)?;
    let embedded = embed_classical(&spec).map_err(fail)?;
    let f = embedding_factorization(&spec).map_err(fail)?;
    let summary = format!(
        "embedded {}-state model; coherence polynomial {}; factorization residual {:.2e}",
        spec.dimension,
        fmt_list(&f.coherence),
        f.residual
    );
    let result = json!({
        "model": ModelFile::from_spec(&embedded),
        "factorization": f,
    });
    Ok(Success { result, summary, tolerances: tol })
}

/// Runs a full invocation: parse, execute, write. Returns the exit code.
pub fn run<S: AsRef<str>>(args: &[S]) -> i32 {
    let cmd = match parse_and_validate(args) {
        Ok(c) => c,
        Err(e) => {
            e.print();
            return e.exit_code();
        }
    };
    let outcome = execute(&cmd);
    let text = io::to_json(&outcome.report);
    match &cmd.output {
        Some(path) => {
            if let Err(e) = std::fs::write(path, &text) {
                eprintln!("error: cannot write {}: {e}", path.display());
                return EXIT_DOMAIN;
            }
            println!("{}", outcome.summary);
        }
        None => {
            print!("{text}");
            eprintln!("{}", outcome.summary);
        }
    }
    outcome.exit_code
}
