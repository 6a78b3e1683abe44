//! Command-line front end: `check`, `classify`, `verify`.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::Expression;
use crate::feller::{bound_serde, validate_conditions, Boundary, CoefficientSet, ValidationReport};
use crate::mc::{
    simulate_path, verify_time_change_identity_with, verify_zero_one_law, Agreement, SimConfig, VerificationSummary,
};
use crate::quad::Status;
use crate::timechange::accumulate_phi;
use crate::zeroone::{full_report, BoundaryReport, Functional, ZeroOneError};

pub const TOOL: &str = "dzol";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INDETERMINATE: i32 = 3;
pub const EXIT_CONTRADICTS: i32 = 4;
pub const EXIT_UNDERPOWERED: i32 = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Parser)]
#[command(name = TOOL, version, about = "Zero-one laws for integral functionals of 1-D diffusions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate the standing conditions on the coefficients.
    Check(CommonArgs),
    /// Classify the functional at both boundaries.
    Classify(CommonArgs),
    /// Run the Monte Carlo verification experiments.
    Verify(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub tol: Option<f64>,
    /// Worker threads for simulation; does not affect results.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientsSection {
    pub mu: String,
    pub sigma: String,
    #[serde(with = "bound_serde")]
    pub ell: f64,
    #[serde(with = "bound_serde")]
    pub r: f64,
    pub x0: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionalSection {
    pub f: String,
    /// Time-change weight; defaults to `sqrt(f)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<String>,
    /// Weight used to build `X` in the identity check; defaults to `b`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_x: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZeroOneSection {
    pub ladder: Vec<f64>,
    pub base_step: Option<f64>,
    pub truncation: Option<(f64, f64)>,
    pub n_paths: Option<usize>,
}

impl Default for ZeroOneSection {
    fn default() -> Self {
        ZeroOneSection { ladder: vec![25.0, 50.0, 100.0, 200.0], base_step: None, truncation: None, n_paths: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub quad: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { quad: 1e-9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Number of `Y` paths to write to `paths.jsonl`.
    pub dump_paths: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: PathBuf::from("dzol-out"), dump_paths: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub coefficients: CoefficientsSection,
    pub functional: FunctionalSection,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub zero_one: ZeroOneSection,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub output: OutputSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn apply(&mut self, args: &CommonArgs) {
        if let Some(s) = args.seed {
            self.sim.seed = s;
        }
        if let Some(n) = args.paths {
            self.sim.n_paths = n;
        }
        if let Some(h) = args.horizon {
            self.sim.horizon = h;
        }
        if let Some(o) = &args.out {
            self.output.dir = o.clone();
        }
        if let Some(t) = args.tol {
            self.tolerances.quad = t;
        }
    }

    pub fn resolve(&self) -> Result<Resolved, CliError> {
        let parse = |what: &str, text: &str| {
            Expression::parse(text).map_err(|e| CliError::Config(format!("{what}: {e} (position {})", e.position())))
        };
        let c = &self.coefficients;
        let cs = CoefficientSet::new(parse("mu", &c.mu)?, parse("sigma", &c.sigma)?, c.ell, c.r, c.x0, c.c)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let f = parse("f", &self.functional.f)?;
        let b = match &self.functional.b {
            Some(t) => parse("b", t)?,
            None => f.sqrt(),
        };
        let b_x = match &self.functional.b_x {
            Some(t) => parse("b_x", t)?,
            None => b.clone(),
        };
        if !(self.tolerances.quad > 0.0 && self.tolerances.quad < 1.0) {
            return Err(CliError::Config(format!("tolerances.quad must lie in (0, 1), got {}", self.tolerances.quad)));
        }
        Ok(Resolved { cs, f, b, b_x })
    }

    fn zero_one_sim(&self) -> SimConfig {
        let z = &self.zero_one;
        SimConfig {
            base_step: z.base_step.unwrap_or(self.sim.base_step),
            truncation: z.truncation.unwrap_or(self.sim.truncation),
            n_paths: z.n_paths.unwrap_or(self.sim.n_paths),
            ..self.sim.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct Resolved {
    pub cs: CoefficientSet,
    pub f: Expression,
    pub b: Expression,
    pub b_x: Expression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Outcome {
    Check { validation: ValidationReport },
    Classify { report: Box<BoundaryReport> },
    Verify {
        classification: Box<BoundaryReport>,
        time_change: VerificationSummary,
        zero_one: Vec<VerificationSummary>,
    },
    Rejected { stage: String, message: String, #[serde(default, skip_serializing_if = "Option::is_none")] validation: Option<ValidationReport> },
}

/// The machine-readable report written for every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub tool: String,
    pub version: String,
    pub config: RunConfig,
    pub outcome: Outcome,
    pub exit_code: i32,
}

/// Exit code as a function of the outcome.
pub fn exit_code(outcome: &Outcome) -> i32 {
    match outcome {
        Outcome::Check { validation } => {
            if validation.all_pass() { EXIT_OK } else { EXIT_FAIL }
        }
        Outcome::Classify { report } => {
            if report.has_indeterminate() { EXIT_INDETERMINATE } else { EXIT_OK }
        }
        Outcome::Verify { time_change, zero_one, .. } => {
            let all: Vec<Agreement> =
                std::iter::once(time_change.verdict_agreement).chain(zero_one.iter().map(|z| z.verdict_agreement)).collect();
            if all.contains(&Agreement::Contradicts) {
                EXIT_CONTRADICTS
            } else if all.contains(&Agreement::Underpowered) {
                EXIT_UNDERPOWERED
            } else {
                EXIT_OK
            }
        }
        Outcome::Rejected { .. } => EXIT_FAIL,
    }
}

pub fn cmd_check(config: &RunConfig) -> Result<Outcome, CliError> {
    let r = config.resolve()?;
    Ok(Outcome::Check { validation: validate_conditions(&r.cs, Some(&r.b)) })
}

fn rejected(stage: &str, e: ZeroOneError) -> Outcome {
    let validation = match &e {
        ZeroOneError::Validation(v) => Some((**v).clone()),
        _ => None,
    };
    Outcome::Rejected { stage: stage.into(), message: e.to_string(), validation }
}

pub fn cmd_classify(config: &RunConfig) -> Result<Outcome, CliError> {
    let r = config.resolve()?;
    Ok(match full_report(&r.cs, &r.f, config.tolerances.quad) {
        Ok(report) => Outcome::Classify { report: Box::new(report) },
        Err(e) => rejected("classify", e),
    })
}

pub fn cmd_verify(config: &RunConfig) -> Result<Outcome, CliError> {
    let r = config.resolve()?;
    let classification = match full_report(&r.cs, &r.f, config.tolerances.quad) {
        Ok(report) => report,
        Err(e) => return Ok(rejected("classify", e)),
    };
    let sim_err = |e: crate::mc::SimError| CliError::Config(e.to_string());
    let time_change = verify_time_change_identity_with(&r.cs, &r.b, &r.b_x, &config.sim).map_err(sim_err)?;
    let zo_cfg = config.zero_one_sim();
    let mut zero_one = Vec::new();
    for side in [Boundary::Ell, Boundary::R] {
        let v = classification.verdict(side);
        if matches!(v.functional, Functional::ConvergesAs | Functional::DivergesAs) {
            zero_one.push(
                verify_zero_one_law(&r.cs, &r.f, &zo_cfg, &config.zero_one.ladder, side, v.functional)
                    .map_err(sim_err)?,
            );
        }
    }
    if zero_one.is_empty() {
        let mut s = verify_zero_one_law(&r.cs, &r.f, &zo_cfg, &config.zero_one.ladder, Boundary::R, Functional::Vacuous)
            .map_err(sim_err)?;
        s.boundary = None;
        s.functional_diagnostics.clear();
        s.n_effective = (0, 0);
        zero_one.push(s);
    }
    Ok(Outcome::Verify { classification: Box::new(classification), time_change, zero_one })
}

pub fn build_report(config: &RunConfig, outcome: Outcome) -> Report {
    let exit_code = exit_code(&outcome);
    Report { tool: TOOL.into(), version: VERSION.into(), config: config.clone(), outcome, exit_code }
}

pub fn report_json(report: &Report) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

fn status_word(s: Status) -> &'static str {
    match s {
        Status::Finite => "FINITE",
        Status::Infinite => "INFINITE",
        Status::Indeterminate => "INDETERMINATE",
    }
}

/// Human-readable summary table.
pub fn summary_table(report: &Report) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{} {}  exit code {}", report.tool, report.version, report.exit_code);
    let boundary_rows = |out: &mut String, b: &BoundaryReport| {
        let tf = &b.test_functions;
        let _ = writeln!(out, "{:<10} {:<14} {:<14} {:<14} {:<14} {}", "boundary", "s", "v", "v_X", "events", "functional");
        for (name, s, v, vx, ev, f) in [
            ("ell", &b.s_at_ell, &tf.v_ell, &tf.vx_ell, b.events.ell_events, b.ell.functional),
            ("r", &b.s_at_r, &tf.v_r, &tf.vx_r, b.events.r_events, b.r.functional),
        ] {
            let _ = writeln!(
                out,
                "{:<10} {:<14} {:<14} {:<14} {:<14} {}",
                name,
                status_word(s.status),
                status_word(v.status),
                status_word(vx.status),
                format!("{ev:?}"),
                format!("{f:?}")
            );
        }
        let _ = writeln!(
            out,
            "event A certain: {:?}; X explosion certain: {:?}; consistency: {}",
            b.events.a_certain,
            b.x_certain_explosion,
            if b.consistency.ok { "ok".to_string() } else { b.consistency.contradictions.join("; ") }
        );
    };
    match &report.outcome {
        Outcome::Check { validation } | Outcome::Rejected { validation: Some(validation), .. } => {
            for e in &validation.entries {
                let loc = e.location.map(|x| format!(" at x = {x}")).unwrap_or_default();
                let _ = writeln!(out, "{:<36} {:?}{}  {}", e.condition, e.status, loc, e.evidence);
            }
            if let Outcome::Rejected { message, .. } = &report.outcome {
                let _ = writeln!(out, "rejected: {message}");
            }
        }
        Outcome::Rejected { message, .. } => {
            let _ = writeln!(out, "rejected: {message}");
        }
        Outcome::Classify { report } => boundary_rows(&mut out, report),
        Outcome::Verify { classification, time_change, zero_one } => {
            boundary_rows(&mut out, classification);
            let _ = writeln!(
                out,
                "time change: KS {:.4} (threshold {:.4}), exits {:?}, side agreement {:?}: {:?}",
                time_change.ks_distance.unwrap_or(f64::NAN),
                time_change.ks_threshold.unwrap_or(f64::NAN),
                time_change.n_effective,
                time_change.exit_side_agreement,
                time_change.verdict_agreement
            );
            for z in zero_one {
                let _ = writeln!(out, "zero-one {:?}: {:?}", z.boundary, z.verdict_agreement);
                for row in &z.functional_diagnostics {
                    let _ = writeln!(
                        out,
                        "  horizon {:>8}  tending {:>6}  mean {:>12.6e}  q90 {:>12.6e}",
                        row.horizon,
                        row.tending,
                        row.mean.unwrap_or(f64::NAN),
                        row.q90.unwrap_or(f64::NAN)
                    );
                }
            }
        }
    }
    out
}

fn write_paths(config: &RunConfig, r: &Resolved, dir: &Path) -> Result<(), CliError> {
    let mut file = fs::File::create(dir.join("paths.jsonl"))?;
    for id in 0..config.output.dump_paths as u64 {
        let p = simulate_path(&r.cs, &config.sim, id);
        let p = accumulate_phi(&p, &r.b).unwrap_or(p);
        writeln!(file, "{}", serde_json::to_string(&p).expect("path serializes"))?;
    }
    Ok(())
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Check(_) => "check",
        Command::Classify(_) => "classify",
        Command::Verify(_) => "verify",
    }
}

/// Run one command and return the process exit code.
pub fn run(cli: Cli) -> i32 {
    let name = command_name(&cli.command);
    let args = match &cli.command {
        Command::Check(a) | Command::Classify(a) | Command::Verify(a) => a.clone(),
    };
    let mut config = match RunConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{TOOL}: {e}");
            return EXIT_CONFIG;
        }
    };
    config.apply(&args);
    let exec = || match &cli.command {
        Command::Check(_) => cmd_check(&config),
        Command::Classify(_) => cmd_classify(&config),
        Command::Verify(_) => cmd_verify(&config),
    };
    let outcome = match args.workers {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(exec),
            Err(e) => Err(CliError::Config(format!("workers: {e}"))),
        },
        None => exec(),
    };
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            eprintln!("{TOOL}: {e}");
            return EXIT_CONFIG;
        }
    };
    let report = build_report(&config, outcome);
    print!("{}", summary_table(&report));
    let dir = &config.output.dir;
    let written = fs::create_dir_all(dir)
        .and_then(|_| fs::write(dir.join(format!("{name}_report.json")), report_json(&report)))
        .map_err(CliError::from);
    let written = written.and_then(|_| match (&cli.command, config.resolve()) {
        (Command::Verify(_), Ok(r)) if config.output.dump_paths > 0 => write_paths(&config, &r, dir),
        _ => Ok(()),
    });
    if let Err(e) = written {
        eprintln!("{TOOL}: {e}");
        return EXIT_CONFIG;
    }
    report.exit_code
}

#[cfg(test)]
mod tests {
    use super::*;

    const BM: &str = r#"
[coefficients]
mu = "0"
sigma = "1"
ell = "-inf"
r = "inf"
x0 = 0.0

[functional]
f = "1"
"#;

    #[test]
    fn parses_with_defaults() {
        let c = RunConfig::from_toml(BM).unwrap();
        assert_eq!(c.coefficients.ell, f64::NEG_INFINITY);
        assert_eq!(c.sim, SimConfig::default());
        assert_eq!(c.zero_one.ladder, vec![25.0, 50.0, 100.0, 200.0]);
        assert_eq!(c.tolerances.quad, 1e-9);
    }

    #[test]
    fn check_exit_codes() {
        let c = RunConfig::from_toml(BM).unwrap();
        assert_eq!(exit_code(&cmd_check(&c).unwrap()), EXIT_OK);
        let bad = BM.replace("sigma = \"1\"", "sigma = \"x\"").replace("\"-inf\"", "-1.0").replace("\"inf\"", "1.0");
        let c = RunConfig::from_toml(&bad).unwrap();
        let out = cmd_check(&c).unwrap();
        assert_eq!(exit_code(&out), EXIT_FAIL);
        let Outcome::Check { validation } = out else { panic!() };
        assert!(validation.entries[0].location.unwrap().abs() < 1e-12);
    }

    #[test]
    fn malformed_expression_is_config_error() {
        let c = RunConfig::from_toml(&BM.replace("mu = \"0\"", "mu = \"1/(x^2\"")).unwrap();
        match c.resolve() {
            Err(CliError::Config(m)) => assert!(m.contains("position 6"), "{m}"),
            other => panic!("{other:?}"),
        }
        assert!(RunConfig::from_toml("[coefficients]\nmu = 1").is_err());
    }

    #[test]
    fn classify_brownian_motion() {
        let c = RunConfig::from_toml(BM).unwrap();
        let report = build_report(&c, cmd_classify(&c).unwrap());
        assert_eq!(report.exit_code, EXIT_OK);
        let Outcome::Classify { report: b } = &report.outcome else { panic!() };
        assert_eq!(b.ell.functional, Functional::Vacuous);
        assert_eq!(b.r.functional, Functional::Vacuous);
        let text = report_json(&report);
        let back: Report = serde_json::from_str(&text).unwrap();
        assert_eq!(report_json(&back), text);
        assert!(summary_table(&report).contains("Vacuous"));
    }
}
