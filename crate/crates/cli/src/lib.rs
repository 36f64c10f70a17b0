//! Config parsing and command execution behind the `kfp` binary.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use nalgebra::DVector;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use kfp::coefficients::{CoefficientSpec, Coefficients, TimeCoefficients};
use kfp::geometry::{DriftSpec, DriftStructure, GroupPoint};
use kfp::holder::{schauder_ratio, schauder_space_time, PairSelection};
use kfp::kernel::{KernelContext, MultiIndex, Wrt};
use kfp::solver::{
    cancellation_integral, cauchy_homogeneous, duhamel, on_points, second_derivative, BumpSolution, CancellationSettings, GridSpec,
    SolverSettings, SourceField, TimeWindow,
};
use kfp::verify::{run_suite, SuiteConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

/// One problem in a config file, located by a dotted field path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub path: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigErrors(pub Vec<ConfigIssue>);

impl ConfigErrors {
    fn one(path: &str, message: impl fmt::Display) -> Self {
        ConfigErrors(vec![ConfigIssue {
            path: path.into(),
            message: message.to_string(),
        }])
    }
}

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, e) in self.0.iter().enumerate() {
            if k > 0 {
                writeln!(f)?;
            }
            write!(f, "{}: {}", e.path, e.message)?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

/// Cauchy datum presets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Datum {
    Constant { value: f64 },
    /// `exp(-|y - center|^2 / (2 variance))`.
    Gaussian { center: Vec<f64>, variance: f64 },
    /// `(1 - |y - center|^2 / radius^2)_+^2`.
    LipschitzBump { center: Vec<f64>, radius: f64 },
}

impl Default for Datum {
    fn default() -> Self {
        Datum::Constant { value: 1.0 }
    }
}

impl Datum {
    pub fn eval(&self, y: &DVector<f64>) -> f64 {
        let dist2 = |c: &[f64]| y.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        match self {
            Datum::Constant { value } => *value,
            Datum::Gaussian { center, variance } => (-dist2(center) / (2.0 * variance)).exp(),
            Datum::LipschitzBump { center, radius } => (1.0 - dist2(center) / (radius * radius)).max(0.0).powi(2),
        }
    }
}

/// Duhamel source presets.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Source {
    #[default]
    Zero,
    /// `L u` for a bump solution `u`.
    Manufactured(BumpSolution),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelParams {
    pub pole: Vec<f64>,
    pub pole_t: f64,
    /// Derivative multi-index as `a1.a2...`; empty for the kernel itself.
    pub multi_index: String,
    pub wrt: String,
}

impl Default for KernelParams {
    fn default() -> Self {
        KernelParams {
            pole: Vec::new(),
            pole_t: 0.0,
            multi_index: String::new(),
            wrt: "x".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveParams {
    pub s: f64,
    pub datum: Datum,
    pub tau: f64,
    pub horizon: f64,
    pub source: Source,
    pub i: usize,
    pub j: usize,
    pub time_cells: usize,
    pub hermite_order: Option<usize>,
}

impl Default for SolveParams {
    fn default() -> Self {
        SolveParams {
            s: 0.0,
            datum: Datum::default(),
            tau: 0.0,
            horizon: 2.0,
            source: Source::Zero,
            i: 0,
            j: 0,
            time_cells: 32,
            hermite_order: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchauderParams {
    /// Empty means a built-in family of ten bumps.
    pub solutions: Vec<BumpSolution>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CancellationParams {
    pub x: Vec<f64>,
    pub t: f64,
    pub tau: f64,
    pub radii: Vec<f64>,
    pub i: usize,
    pub j: usize,
}

impl Default for CancellationParams {
    fn default() -> Self {
        CancellationParams {
            x: Vec::new(),
            t: 0.0,
            tau: -100.0,
            radii: (-8..=3).map(|k| 2f64.powi(k)).collect(),
            i: 0,
            j: 0,
        }
    }
}

/// Validated run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub drift: DriftStructure,
    pub coefficients: Coefficients,
    pub nu: f64,
    pub alpha: f64,
    pub seed: u64,
    pub grid: Option<GridSpec>,
    pub kernel: KernelParams,
    pub solve: SolveParams,
    pub schauder: SchauderParams,
    pub cancellation: CancellationParams,
}

const KNOWN: [&str; 13] = [
    "preset",
    "n",
    "m",
    "blocks",
    "coefficients",
    "nu",
    "alpha",
    "seed",
    "grid",
    "kernel",
    "solve",
    "schauder",
    "cancellation",
];

fn field<T: DeserializeOwned>(obj: &Map<String, Value>, key: &str, errors: &mut Vec<ConfigIssue>) -> Option<T> {
    let v = obj.get(key)?;
    match serde_json::from_value(v.clone()) {
        Ok(t) => Some(t),
        Err(e) => {
            errors.push(ConfigIssue {
                path: key.into(),
                message: e.to_string(),
            });
            None
        }
    }
}

fn required<T: DeserializeOwned>(obj: &Map<String, Value>, key: &str, errors: &mut Vec<ConfigIssue>) -> Option<T> {
    if !obj.contains_key(key) {
        errors.push(ConfigIssue {
            path: key.into(),
            message: "missing required field".into(),
        });
        return None;
    }
    field(obj, key, errors)
}

/// Reads and validates a config file. Relative grid paths resolve against
/// the config's directory.
pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigErrors> {
    let text = fs::read_to_string(path).map_err(|e| ConfigErrors::one(&path.display().to_string(), e))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| ConfigErrors::one("$", e))?;
    parse_value(&value, path.parent())
}

pub fn parse_value(value: &Value, base: Option<&Path>) -> Result<RunConfig, ConfigErrors> {
    let obj = value.as_object().ok_or_else(|| ConfigErrors::one("$", "expected a JSON object"))?;
    let mut errors = Vec::new();
    for k in obj.keys() {
        if !KNOWN.contains(&k.as_str()) {
            errors.push(ConfigIssue {
                path: k.clone(),
                message: "unknown field".into(),
            });
        }
    }

    let drift_spec = if obj.contains_key("preset") {
        let preset: Option<String> = field(obj, "preset", &mut errors);
        let n: usize = field(obj, "n", &mut errors).unwrap_or(1);
        preset.map(|preset| DriftSpec::Preset { preset, n })
    } else if obj.contains_key("m") {
        let m: Option<Vec<usize>> = field(obj, "m", &mut errors);
        let blocks: Option<Vec<Vec<Vec<f64>>>> = if obj.contains_key("blocks") { field(obj, "blocks", &mut errors) } else { Some(Vec::new()) };
        m.zip(blocks).map(|(m, blocks)| DriftSpec::Blocks { m, blocks })
    } else {
        errors.push(ConfigIssue {
            path: "preset".into(),
            message: "missing drift structure: give `preset` (and `n`) or `m` (and `blocks`)".into(),
        });
        None
    };
    let drift = drift_spec.and_then(|spec| {
        let built = match &spec {
            DriftSpec::Blocks { m, blocks } if blocks.is_empty() && m.len() > 1 => DriftStructure::chain(m),
            _ => DriftStructure::from_spec(&spec),
        };
        built
            .map_err(|e| {
                let path = if matches!(spec, DriftSpec::Preset { .. }) { "preset" } else { "m" };
                errors.push(ConfigIssue {
                    path: path.into(),
                    message: e.to_string(),
                })
            })
            .ok()
    });

    let nu: Option<f64> = required(obj, "nu", &mut errors);
    if let Some(nu) = nu {
        if !(nu > 0.0 && nu <= 1.0) {
            errors.push(ConfigIssue {
                path: "nu".into(),
                message: format!("must lie in (0, 1], got {nu}"),
            });
        }
    }
    let alpha: Option<f64> = required(obj, "alpha", &mut errors);
    if let Some(a) = alpha {
        if !(a > 0.0 && a < 1.0) {
            errors.push(ConfigIssue {
                path: "alpha".into(),
                message: format!("must lie in (0, 1), got {a}"),
            });
        }
    }
    let coeff_spec: Option<CoefficientSpec> = required(obj, "coefficients", &mut errors);
    let coefficients = match (&drift, coeff_spec, nu, alpha) {
        (Some(d), Some(spec), Some(nu), Some(alpha)) => spec
            .build(d.q(), nu, alpha)
            .map_err(|e| {
                errors.push(ConfigIssue {
                    path: "coefficients".into(),
                    message: e.to_string(),
                })
            })
            .ok(),
        _ => None,
    };
    let seed: u64 = field(obj, "seed", &mut errors).unwrap_or(0);
    let grid = match obj.get("grid") {
        None => None,
        Some(Value::String(p)) => {
            let p = base.map_or_else(|| PathBuf::from(p), |b| b.join(p));
            match load_grid(&p) {
                Ok(g) => Some(g),
                Err(e) => {
                    errors.extend(e.0.into_iter().map(|i| ConfigIssue {
                        path: format!("grid.{}", i.path),
                        message: i.message,
                    }));
                    None
                }
            }
        }
        Some(_) => field(obj, "grid", &mut errors),
    };
    if let (Some(g), Some(d)) = (&grid, &drift) {
        if g.bounds.len() != d.dim() {
            errors.push(ConfigIssue {
                path: "grid.box".into(),
                message: format!("{} axes for a {}-dimensional operator", g.bounds.len(), d.dim()),
            });
        }
    }
    let kernel: KernelParams = field(obj, "kernel", &mut errors).unwrap_or_default();
    let solve: SolveParams = field(obj, "solve", &mut errors).unwrap_or_default();
    let schauder: SchauderParams = field(obj, "schauder", &mut errors).unwrap_or_default();
    let cancellation: CancellationParams = field(obj, "cancellation", &mut errors).unwrap_or_default();

    if !errors.is_empty() {
        return Err(ConfigErrors(errors));
    }
    Ok(RunConfig {
        drift: drift.expect("checked"),
        coefficients: coefficients.expect("checked"),
        nu: nu.expect("checked"),
        alpha: alpha.expect("checked"),
        seed,
        grid,
        kernel,
        solve,
        schauder,
        cancellation,
    })
}

pub fn load_grid(path: &Path) -> Result<GridSpec, ConfigErrors> {
    let text = fs::read_to_string(path).map_err(|e| ConfigErrors::one(&path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| ConfigErrors::one("$", e))
}

#[derive(Debug, Parser)]
#[command(name = "kfp", version, about = "Kernels, representation formulas and Schauder diagnostics for KFP operators")]
pub struct Cli {
    /// Operator config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output file; stdout when absent.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Grid spec (JSON); overrides the config grid.
    #[arg(long, global = true)]
    pub grid: Option<PathBuf>,
    /// Adds per-check runtimes to suite reports.
    #[arg(long, global = true)]
    pub timings: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run named check groups (`all`, geometry, kernel, solver, cancellation, holder, mc).
    Verify {
        #[arg(long, value_delimiter = ',', required = true)]
        suite: Vec<String>,
    },
    /// Kernel evaluation on the grid.
    Kernel {
        #[command(subcommand)]
        action: KernelAction,
    },
    /// Representation formulas on the grid.
    Solve {
        #[command(subcommand)]
        problem: Problem,
    },
    /// Schauder ratios over a family of manufactured solutions.
    Schauder,
    /// Cancellation integral against the radius.
    Cancellation,
}

#[derive(Debug, Subcommand)]
pub enum KernelAction {
    /// Gamma or a derivative at the grid points, pole from `kernel.pole`
    Eval,
}

#[derive(Debug, Subcommand)]
pub enum Problem {
    /// Homogeneous Cauchy problem from `solve.datum`
    Cauchy,
    /// Duhamel term for `solve.source`
    Duhamel,
    /// Second derivative d_ij of the Duhamel term
    D2,
}

/// Fixed 17-significant-digit formatting.
pub fn fmt_num(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_header(n: usize, last: &str) -> String {
    let mut cols: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
    cols.push("t".into());
    cols.push(last.into());
    cols.join(",")
}

fn csv_rows(points: &[GroupPoint], values: &[f64], last: &str) -> String {
    let n = points.first().map_or(0, |p| p.dim());
    let mut out = csv_header(n, last);
    out.push('\n');
    for (p, v) in points.iter().zip(values) {
        let mut row: Vec<String> = p.x.iter().map(|&c| fmt_num(c)).collect();
        row.push(fmt_num(p.t));
        row.push(fmt_num(*v));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Failure of a command after the config was accepted.
#[derive(Debug)]
pub enum RunError {
    Config(ConfigErrors),
    Compute(String),
    Io(std::io::Error),
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Config(e) => write!(f, "{e}"),
            RunError::Compute(e) => write!(f, "{e}"),
            RunError::Io(e) => write!(f, "{e}"),
        }
    }
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => EXIT_CONFIG,
            _ => EXIT_CHECK,
        }
    }
}

fn compute<E: fmt::Display>(e: E) -> RunError {
    RunError::Compute(e.to_string())
}

fn config_err(path: &str, msg: impl fmt::Display) -> RunError {
    RunError::Config(ConfigErrors::one(path, msg))
}

fn time_context(cfg: &RunConfig) -> Result<KernelContext, RunError> {
    let c: TimeCoefficients = match &cfg.coefficients {
        Coefficients::Time(c) => c.clone(),
        Coefficients::SpaceTime(_) => return Err(config_err("coefficients", "this command needs coefficients depending on t only")),
    };
    KernelContext::new(cfg.drift.clone(), c).map_err(|e| config_err("coefficients", e))
}

fn grid_points(cfg: &RunConfig) -> Result<Vec<GroupPoint>, RunError> {
    let g = cfg.grid.as_ref().ok_or_else(|| config_err("grid", "this command needs a grid (config `grid` or --grid)"))?;
    Ok(g.points())
}

/// Built-in manufactured family for `schauder`.
pub fn default_family(n: usize) -> Vec<BumpSolution> {
    (0..10)
        .map(|k| {
            let k = k as f64;
            BumpSolution {
                tau: -1.0,
                amplitude: 1.0 + 0.1 * k,
                centers: (0..n).map(|i| 0.1 * k * if i % 2 == 0 { 1.0 } else { -1.0 }).collect(),
                widths: (0..n).map(|i| 0.6 + 0.05 * k + 0.1 * i as f64).collect(),
                freqs: (0..n).map(|i| if i == 0 { 0.2 * k } else { 0.0 }).collect(),
            }
        })
        .collect()
}

/// Executes `command`; returns the report text and the exit status.
pub fn execute(command: &Command, cfg: &RunConfig, timings: bool) -> Result<(String, i32), RunError> {
    match command {
        Command::Verify { suite } => {
            let sc = SuiteConfig {
                drift: cfg.drift.clone(),
                coefficients: cfg.coefficients.clone(),
                nu: cfg.nu,
                alpha: cfg.alpha,
                seed: cfg.seed,
                timings,
            };
            let r = run_suite(&sc, suite).map_err(|e| match e {
                kfp::verify::VerifyError::UnknownSelection(s) => config_err("--suite", format!("unknown suite {s:?}")),
                other => compute(other),
            })?;
            let text = serde_json::to_string_pretty(&r).map_err(compute)? + "\n";
            Ok((text, if r.passed { EXIT_OK } else { EXIT_CHECK }))
        }
        Command::Kernel { action: KernelAction::Eval } => {
            let ctx = time_context(cfg)?;
            let points = grid_points(cfg)?;
            let n = cfg.drift.dim();
            let kp = &cfg.kernel;
            let pole_x = if kp.pole.is_empty() { vec![0.0; n] } else { kp.pole.clone() };
            if pole_x.len() != n {
                return Err(config_err("kernel.pole", format!("expected {n} coordinates")));
            }
            let pole = GroupPoint::from_slice(&pole_x, kp.pole_t);
            let alpha: MultiIndex = if kp.multi_index.is_empty() {
                MultiIndex::zero(n)
            } else {
                kp.multi_index.parse().map_err(|e| config_err("kernel.multi_index", e))?
            };
            let wrt = match kp.wrt.as_str() {
                "x" => Wrt::X,
                "y" => Wrt::Y,
                other => return Err(config_err("kernel.wrt", format!("expected x or y, got {other:?}"))),
            };
            let values: Vec<f64> = points
                .iter()
                .map(|p| {
                    if p.t <= pole.t {
                        Ok(0.0)
                    } else {
                        ctx.gamma_derivative(&alpha, wrt, p, &pole)
                    }
                })
                .collect::<Result<_, _>>()
                .map_err(compute)?;
            Ok((csv_rows(&points, &values, "gamma"), EXIT_OK))
        }
        Command::Solve { problem } => {
            let ctx = time_context(cfg)?;
            let points = grid_points(cfg)?;
            let sp = &cfg.solve;
            let st = SolverSettings {
                time_cells: sp.time_cells,
                hermite_order: sp.hermite_order,
                ..SolverSettings::default()
            };
            let values = match problem {
                Problem::Cauchy => {
                    let datum = sp.datum.clone();
                    on_points(&points, |p| cauchy_homogeneous(&ctx, |y| datum.eval(y), sp.s, p, &st))
                }
                Problem::Duhamel | Problem::D2 => {
                    let window = TimeWindow::new(sp.tau, sp.horizon).map_err(|e| config_err("solve", e))?;
                    let f = match &sp.source {
                        Source::Zero => SourceField::zero(),
                        Source::Manufactured(u) => u.source(ctx.drift(), ctx.coeffs()),
                    };
                    if matches!(problem, Problem::Duhamel) {
                        on_points(&points, |p| duhamel(&ctx, &f, &window, p, &st))
                    } else {
                        on_points(&points, |p| second_derivative(&ctx, &f, &window, p, sp.i, sp.j, &st))
                    }
                }
            }
            .map_err(compute)?;
            Ok((csv_rows(&points, &values, "u"), EXIT_OK))
        }
        Command::Schauder => {
            let points = grid_points(cfg)?;
            let n = cfg.drift.dim();
            let family = if cfg.schauder.solutions.is_empty() { default_family(n) } else { cfg.schauder.solutions.clone() };
            let field = cfg.coefficients.field();
            let sel = PairSelection::Auto { seed: cfg.seed };
            let mut rows = Vec::new();
            let mut finite = true;
            for u in &family {
                let r = schauder_ratio(&cfg.drift, field, u, cfg.alpha, &points, sel).map_err(compute)?;
                let st = schauder_space_time(&cfg.drift, field, u, cfg.alpha, &points, sel).map_err(compute)?;
                finite &= r.ratio.is_finite() && st.quotient.is_finite();
                rows.push(json!({ "solution": u, "space": r, "space_time": st }));
            }
            let report = json!({ "alpha": cfg.alpha, "finite": finite, "results": rows });
            let text = serde_json::to_string_pretty(&report).map_err(compute)? + "\n";
            Ok((text, if finite { EXIT_OK } else { EXIT_CHECK }))
        }
        Command::Cancellation => {
            let ctx = time_context(cfg)?;
            let cp = &cfg.cancellation;
            let n = cfg.drift.dim();
            let x = if cp.x.is_empty() { vec![0.0; n] } else { cp.x.clone() };
            if x.len() != n {
                return Err(config_err("cancellation.x", format!("expected {n} coordinates")));
            }
            let x = DVector::from_vec(x);
            let st = CancellationSettings::default();
            let mut out = String::from("r,value\n");
            for &r in &cp.radii {
                let v = cancellation_integral(&ctx, &x, cp.t, cp.tau, r, cp.i, cp.j, &st).map_err(compute)?;
                out.push_str(&format!("{},{}\n", fmt_num(r), fmt_num(v)));
            }
            Ok((out, EXIT_OK))
        }
    }
}

/// Full CLI run; returns the process exit status.
pub fn run(cli: Cli) -> i32 {
    if let Some(threads) = std::env::var("KFP_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build_global();
    }
    let Some(config_path) = cli.config.as_ref() else {
        eprintln!("--config: missing required flag");
        return EXIT_CONFIG;
    };
    let mut cfg = match parse_config(config_path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return EXIT_CONFIG;
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(g) = cli.grid.as_ref() {
        match load_grid(g) {
            Ok(grid) if grid.bounds.len() == cfg.drift.dim() => cfg.grid = Some(grid),
            Ok(grid) => {
                eprintln!("--grid: {} axes for a {}-dimensional operator", grid.bounds.len(), cfg.drift.dim());
                return EXIT_CONFIG;
            }
            Err(e) => {
                eprintln!("--grid: {e}");
                return EXIT_CONFIG;
            }
        }
    }
    match execute(&cli.command, &cfg, cli.timings) {
        Ok((text, code)) => {
            let written = match cli.out.as_ref() {
                Some(p) => fs::write(p, text.as_bytes()),
                None => std::io::stdout().write_all(text.as_bytes()),
            };
            if let Err(e) = written {
                eprintln!("--out: {e}");
                return EXIT_CHECK;
            }
            code
        }
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
