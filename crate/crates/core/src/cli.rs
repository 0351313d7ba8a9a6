//! Batch front end: `estimate`, `select`, `infer`, `simulate`, `fit-dgp`.
//!
//! Parameters come from an optional JSON config (`--config`) overlaid with
//! command-line flags. Every artifact carries the resolved config and a
//! SHA-256 of the input; CSV files carry them as leading `#` lines.
//!
//! Exit codes: 0 success, 1 numeric failure, 2 usage or validation error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{EstimationError, NumericError, PanelError};
use crate::estimators::{
    factor_estimator, gmm_sce, ols_sce, powell_estimator, uniform_sce, EstimationResult, GmmConfig, Method, PowellConfig,
};
use crate::inference::{subsampling_ci, SubsampleScheme, SubsamplingConfig};
use crate::linalg::{Bandwidth, QpOptions};
use crate::moments::WeightingScheme;
use crate::panel::{load_panel, load_wide_panel, validate_roles, PanelData, PanelFormat, RoleAssignment};
use crate::selection::{SelectionMethod, SelectionResult, SelectionSpec};
use crate::simlab::{fit_dgp, run_study, FittedDGP, StudyDesign};

/// Failure of one command, carrying its exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<EstimationError> for CliError {
    fn from(e: EstimationError) -> Self {
        match e {
            EstimationError::Numeric(n) => n.into(),
            EstimationError::LogisticNotConverged(_) => CliError::Numeric(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<NumericError> for CliError {
    fn from(e: NumericError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<PanelError> for CliError {
    fn from(e: PanelError) -> Self {
        CliError::Usage(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

/// Fully resolved parameters of one run. Fields not used by a command are
/// ignored by it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub panel: Option<PathBuf>,
    /// Detected from the header when absent.
    pub format: Option<PanelFormat>,
    /// `unit,first_treated_period` file for wide panels.
    pub sidecar: Option<PathBuf>,
    pub unit: Option<String>,
    pub controls: Option<Vec<String>>,
    pub instruments: Option<Vec<String>>,
    /// Label of the first post period; defaults to the first period in which
    /// the unit of interest is treated.
    pub first_post: Option<String>,
    pub anticipation: usize,
    pub method: Method,
    pub weighting: WeightingScheme,
    pub constrained: bool,
    pub solver: QpOptions,
    /// Effect weights over post periods; uniform when absent.
    pub v: Option<Vec<f64>>,
    pub factor_rank: Option<usize>,
    pub powell_iterations: usize,
    pub select: Option<SelectionMethod>,
    pub alpha: f64,
    pub pool: Option<Vec<String>>,
    pub extra_instruments: Option<Vec<String>>,
    pub inference: SubsamplingConfig,
    pub seed: u64,
    pub dgp: Option<PathBuf>,
    pub design: Option<StudyDesign>,
    pub detail: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            panel: None,
            format: None,
            sidecar: None,
            unit: None,
            controls: None,
            instruments: None,
            first_post: None,
            anticipation: 0,
            method: Method::Gmm,
            weighting: WeightingScheme::Identity,
            constrained: true,
            solver: QpOptions::default(),
            v: None,
            factor_rank: None,
            powell_iterations: PowellConfig::default().n_iter,
            select: None,
            alpha: 0.05,
            pool: None,
            extra_instruments: None,
            inference: SubsamplingConfig::default(),
            seed: 0,
            dgp: None,
            design: None,
            detail: false,
        }
    }
}

/// Parses a serde enum name, accepting `-` for `_`.
fn parse_enum<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(Value::String(s.trim().replace('-', "_"))).map_err(|_| format!("unrecognized value `{s}`"))
}

fn parse_bandwidth(s: &str) -> std::result::Result<Bandwidth, String> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(Bandwidth::Auto);
    }
    s.parse().map(Bandwidth::Fixed).map_err(|_| format!("bandwidth must be `auto` or a lag count, got `{s}`"))
}

#[derive(Debug, Parser)]
#[command(name = "gmmsc", version, about = "GMM synthetic control estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate effects for one unit of interest.
    Estimate(EstimateArgs),
    /// Choose the control/instrument partition.
    Select(SelectArgs),
    /// Subsampling confidence interval for the weighted average effect.
    Infer(InferArgs),
    /// Run a placebo study on a fitted factor process.
    Simulate(SimulateArgs),
    /// Fit a factor process to the never-treated units of a panel.
    FitDgp(FitDgpArgs),
}

#[derive(Debug, Args)]
pub struct SharedArgs {
    #[arg(long)]
    pub panel: Option<PathBuf>,
    /// JSON run config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    /// long-csv or wide-csv.
    #[arg(long, value_parser = parse_enum::<PanelFormat>)]
    pub format: Option<PanelFormat>,
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RoleArgs {
    /// Unit of interest.
    #[arg(long)]
    pub unit: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub controls: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub instruments: Option<Vec<String>>,
    #[arg(long)]
    pub first_post: Option<String>,
    #[arg(long)]
    pub anticipation: Option<usize>,
    /// identity or two-step.
    #[arg(long, value_parser = parse_weighting)]
    pub weighting: Option<WeightingScheme>,
    /// Bartlett lag for two-step weighting: `auto` or a number.
    #[arg(long, value_parser = parse_bandwidth)]
    pub bandwidth: Option<Bandwidth>,
    /// Minimum-norm unconstrained GMM weights.
    #[arg(long)]
    pub unconstrained: bool,
    /// Effect weights, one per post period.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub v: Option<Vec<f64>>,
    #[arg(long)]
    pub factor_rank: Option<usize>,
    #[arg(long)]
    pub powell_iterations: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Candidate controls for selection (default: never-treated units).
    #[arg(long, value_delimiter = ',')]
    pub pool: Option<Vec<String>>,
    /// Instrument-only units for selection.
    #[arg(long, value_delimiter = ',')]
    pub extra_instruments: Option<Vec<String>>,
}

fn parse_weighting(s: &str) -> std::result::Result<WeightingScheme, String> {
    match s.trim().replace('-', "_").as_str() {
        "identity" => Ok(WeightingScheme::Identity),
        "two_step" => Ok(WeightingScheme::two_step()),
        _ => Err(format!("weighting must be `identity` or `two-step`, got `{s}`")),
    }
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub shared: SharedArgs,
    #[command(flatten)]
    pub roles: RoleArgs,
    /// gmm, ols, uniform, factor or powell.
    #[arg(long, value_parser = parse_enum::<Method>)]
    pub method: Option<Method>,
    /// Choose controls and instruments first: sequential or two-step.
    #[arg(long, value_parser = parse_enum::<SelectionMethod>)]
    pub select: Option<SelectionMethod>,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub shared: SharedArgs,
    #[command(flatten)]
    pub roles: RoleArgs,
    /// sequential or two-step.
    #[arg(long, value_parser = parse_enum::<SelectionMethod>)]
    pub method: Option<SelectionMethod>,
    /// Also estimate with the chosen partition using this estimator.
    #[arg(long, value_parser = parse_enum::<Method>)]
    pub estimate: Option<Method>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub shared: SharedArgs,
    #[command(flatten)]
    pub roles: RoleArgs,
    #[arg(long, value_parser = parse_enum::<SelectionMethod>)]
    pub select: Option<SelectionMethod>,
    /// Subsample size (default ⌊T₀^0.7⌋).
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub draws: Option<usize>,
    /// δ of the 1 − δ interval.
    #[arg(long)]
    pub level: Option<f64>,
    /// block or iid.
    #[arg(long, value_parser = parse_enum::<SubsampleScheme>)]
    pub scheme: Option<SubsampleScheme>,
    /// Re-run selection on every block.
    #[arg(long)]
    pub reselect: bool,
    #[arg(long, value_parser = parse_bandwidth)]
    pub sigma_bandwidth: Option<Bandwidth>,
    /// Write every subsampling statistic to this CSV.
    #[arg(long)]
    pub draws_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub shared: SharedArgs,
    /// Fitted process from `fit-dgp`; otherwise one is fitted to `--panel`.
    #[arg(long)]
    pub dgp: Option<PathBuf>,
    /// Study design JSON.
    #[arg(long)]
    pub design: Option<PathBuf>,
    #[arg(long)]
    pub reps: Option<usize>,
    /// Factor rank when fitting from a panel.
    #[arg(long)]
    pub rank: Option<usize>,
    /// Keep per-replication results in the JSON report.
    #[arg(long)]
    pub detail: bool,
}

#[derive(Debug, Args)]
pub struct FitDgpArgs {
    #[command(flatten)]
    pub shared: SharedArgs,
    /// Number of factors (default: singular value thresholding).
    #[arg(long)]
    pub rank: Option<usize>,
}

fn load_config(shared: &SharedArgs) -> CliResult<RunConfig> {
    let mut cfg = match &shared.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    set(&mut cfg.panel, shared.panel.clone());
    set(&mut cfg.format, shared.format);
    set(&mut cfg.sidecar, shared.sidecar.clone());
    if let Some(s) = shared.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn set<T>(slot: &mut Option<T>, flag: Option<T>) {
    if flag.is_some() {
        *slot = flag;
    }
}

fn apply_roles(cfg: &mut RunConfig, a: &RoleArgs) {
    set(&mut cfg.unit, a.unit.clone());
    set(&mut cfg.controls, a.controls.clone());
    set(&mut cfg.instruments, a.instruments.clone());
    set(&mut cfg.first_post, a.first_post.clone());
    set(&mut cfg.v, a.v.clone());
    set(&mut cfg.factor_rank, a.factor_rank);
    set(&mut cfg.pool, a.pool.clone());
    set(&mut cfg.extra_instruments, a.extra_instruments.clone());
    if let Some(x) = a.anticipation {
        cfg.anticipation = x;
    }
    if let Some(w) = &a.weighting {
        cfg.weighting = w.clone();
    }
    if let Some(b) = a.bandwidth {
        match &mut cfg.weighting {
            WeightingScheme::TwoStep { bandwidth } => *bandwidth = b,
            _ => cfg.weighting = WeightingScheme::TwoStep { bandwidth: b },
        }
    }
    if a.unconstrained {
        cfg.constrained = false;
    }
    if let Some(n) = a.powell_iterations {
        cfg.powell_iterations = n;
    }
    if let Some(x) = a.alpha {
        cfg.alpha = x;
    }
}

fn detect_format(path: &Path) -> CliResult<PanelFormat> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| CliError::Usage(format!("cannot read panel {}: {e}", path.display())))?;
    let headers = reader.headers().map_err(PanelError::from)?;
    let has = |name: &str| headers.iter().any(|h| h.trim().eq_ignore_ascii_case(name));
    Ok(if has("period") && has("outcome") {
        PanelFormat::LongCsv
    } else {
        PanelFormat::WideCsv
    })
}

fn read_panel(cfg: &RunConfig) -> CliResult<PanelData> {
    let Some(path) = &cfg.panel else {
        return usage("no panel given (--panel)");
    };
    let format = match (cfg.format, &cfg.sidecar) {
        (Some(f), _) => f,
        (None, Some(_)) => PanelFormat::WideCsv,
        (None, None) => detect_format(path)?,
    };
    Ok(match format {
        PanelFormat::LongCsv => load_panel(path, format)?,
        PanelFormat::WideCsv => load_wide_panel(path, cfg.sidecar.as_deref())?,
    })
}

fn unit_indices(p: &PanelData, ids: &[String], role: &str) -> CliResult<Vec<usize>> {
    ids.iter()
        .map(|id| {
            p.unit_index(id)
                .ok_or_else(|| CliError::Usage(format!("unknown unit id `{id}` in {role}")))
        })
        .collect()
}

/// Units untreated in every period.
fn never_treated_except(p: &PanelData, skip: &[usize]) -> Vec<usize> {
    p.never_treated().into_iter().filter(|u| !skip.contains(u)).collect()
}

/// Base roles and, when selection is requested, its specification.
struct Resolved {
    roles: RoleAssignment,
    selection: Option<SelectionSpec>,
}

fn resolve_roles(p: &PanelData, cfg: &RunConfig) -> CliResult<Resolved> {
    let Some(uid) = &cfg.unit else {
        return usage("no unit of interest given (--unit)");
    };
    let uoi = unit_indices(p, std::slice::from_ref(uid), "unit")?[0];
    let first_post = match &cfg.first_post {
        Some(label) => p
            .period_index(label)
            .ok_or_else(|| CliError::Usage(format!("unknown period `{label}` in first_post")))?,
        None => p.first_treated_period(uoi).ok_or_else(|| {
            CliError::Usage(format!("unit `{uid}` is never treated; pass --first-post"))
        })?,
    };
    let instruments = match &cfg.instruments {
        Some(ids) => unit_indices(p, ids, "instruments")?,
        None => Vec::new(),
    };
    let controls = match &cfg.controls {
        Some(ids) => unit_indices(p, ids, "controls")?,
        None => {
            let mut skip = instruments.clone();
            skip.push(uoi);
            never_treated_except(p, &skip)
        }
    };
    let base = RoleAssignment::split_with_anticipation(
        uoi,
        controls,
        instruments,
        first_post,
        p.n_periods(),
        cfg.anticipation,
    );

    let selection = match cfg.select {
        None => None,
        Some(method) => {
            if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
                return usage(format!("alpha must lie in (0, 1), got {}", cfg.alpha));
            }
            let extra = match (&cfg.extra_instruments, &cfg.instruments) {
                (Some(ids), _) | (None, Some(ids)) => unit_indices(p, ids, "extra_instruments")?,
                // Other units untreated before the first post period.
                (None, None) => (0..p.n_units())
                    .filter(|&u| u != uoi && !p.never_treated().contains(&u))
                    .filter(|&u| base.pre_periods.iter().all(|&t| !p.is_treated(u, t)))
                    .collect(),
            };
            let pool = match &cfg.pool {
                Some(ids) => unit_indices(p, ids, "pool")?,
                None => {
                    let mut skip = extra.clone();
                    skip.push(uoi);
                    never_treated_except(p, &skip)
                }
            };
            Some(SelectionSpec {
                method,
                pool,
                extra_instruments: extra,
                alpha: cfg.alpha,
            })
        }
    };
    let check = match &selection {
        Some(s) => base.with_partition(s.pool.clone(), s.extra_instruments.clone()),
        None => base.clone(),
    };
    check_roles(p, &check)?;
    Ok(Resolved { roles: base, selection })
}

fn check_roles(p: &PanelData, r: &RoleAssignment) -> CliResult<()> {
    let violations = validate_roles(p, r);
    if violations.is_empty() {
        return Ok(());
    }
    let lines: Vec<String> = violations.iter().map(|v| format!("  - {}", v.describe(p))).collect();
    usage(format!("invalid roles:\n{}", lines.join("\n")))
}

fn gmm_config(cfg: &RunConfig) -> GmmConfig {
    GmmConfig {
        weighting: cfg.weighting.clone(),
        constrained: cfg.constrained,
        solver: cfg.solver,
    }
}

fn run_estimator(method: Method, p: &PanelData, r: &RoleAssignment, cfg: &RunConfig) -> CliResult<EstimationResult> {
    let v = cfg.v.as_ref().map(|v| DVector::from_vec(v.clone()));
    let v = v.as_ref();
    Ok(match method {
        Method::Gmm => gmm_sce(p, r, &gmm_config(cfg), v)?,
        Method::Ols => ols_sce(p, r, v, &cfg.solver)?,
        Method::Uniform => uniform_sce(p, r, v)?,
        Method::Factor => factor_estimator(p, r, v, cfg.factor_rank)?.0,
        Method::Powell => powell_estimator(
            p,
            r,
            v,
            &PowellConfig {
                n_iter: cfg.powell_iterations,
                solver: cfg.solver,
            },
        )?,
    })
}

/// Roles after optional selection.
fn final_roles(p: &PanelData, res: &Resolved, cfg: &RunConfig) -> CliResult<(RoleAssignment, Option<SelectionResult>)> {
    match &res.selection {
        None => Ok((res.roles.clone(), None)),
        Some(spec) => {
            let sel = spec.run(p, &res.roles, &gmm_config(cfg))?;
            Ok((sel.chosen.roles(&res.roles), Some(sel)))
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes output files under one directory, stamping each with provenance.
struct Output<'a> {
    dir: &'a Path,
    command: &'static str,
    input_sha256: String,
    config: Value,
}

impl Output<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&self, path: &Path, bytes: &[u8]) -> CliResult<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)
                    .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", parent.display())))?;
            }
        }
        fs::write(path, bytes).map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))?;
        log::info!("wrote {}", path.display());
        Ok(())
    }

    fn json(&self, name: &str, result: Value) -> CliResult<()> {
        let doc = json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "input_sha256": self.input_sha256,
            "config": self.config,
            "result": result,
        });
        let mut text = serde_json::to_string_pretty(&doc).expect("serializable");
        text.push('\n');
        self.write(&self.path(name), text.as_bytes())
    }

    fn csv_header(&self) -> Vec<u8> {
        format!(
            "# command={}\n# version={}\n# input_sha256={}\n# config={}\n",
            self.command,
            env!("CARGO_PKG_VERSION"),
            self.input_sha256,
            serde_json::to_string(&self.config).expect("serializable")
        )
        .into_bytes()
    }

    fn csv<F>(&self, path: &Path, body: F) -> CliResult<()>
    where
        F: FnOnce(&mut csv::Writer<&mut Vec<u8>>) -> csv::Result<()>,
    {
        let mut buf = self.csv_header();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            body(&mut w).map_err(|e| CliError::Usage(format!("csv error: {e}")))?;
            w.flush().map_err(|e| CliError::Usage(format!("csv error: {e}")))?;
        }
        self.write(path, &buf)
    }
}

fn to_value<T: Serialize>(x: &T) -> Value {
    serde_json::to_value(x).expect("serializable")
}

fn write_estimate(out: &Output, p: &PanelData, r: &RoleAssignment, est: &EstimationResult, sel: Option<&SelectionResult>) -> CliResult<()> {
    let mut result = json!({ "estimate": to_value(&est.report(p, r)) });
    if let Some(s) = sel {
        result["selection"] = to_value(&s.report(p));
    }
    out.json("estimate.json", result)?;
    let rows = est.gap_rows(p);
    out.csv(&out.path("gap.csv"), |w| rows.iter().try_for_each(|row| w.serialize(row)))
}

fn write_selection(out: &Output, p: &PanelData, sel: &SelectionResult) -> CliResult<()> {
    let report = sel.report(p);
    out.json("selection.json", json!({ "selection": to_value(&report) }))?;
    out.csv(&out.path("selection_trace.csv"), |w| {
        w.write_record(["step", "controls", "instruments", "df", "sh_statistic", "chi2_critical"])?;
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for (k, c) in report.trace.iter().enumerate() {
            w.write_record([
                k.to_string(),
                c.controls.join(" "),
                c.instruments.join(" "),
                c.df.map(|d| d.to_string()).unwrap_or_default(),
                opt(c.sh_statistic),
                opt(c.critical_value),
            ])?;
        }
        Ok(())
    })
}

/// Config as echoed into artifacts.
fn config_value(cfg: &RunConfig) -> Value {
    to_value(cfg)
}

fn cmd_estimate(a: EstimateArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.shared)?;
    apply_roles(&mut cfg, &a.roles);
    set(&mut cfg.select, a.select);
    if let Some(m) = a.method {
        cfg.method = m;
    }
    let p = read_panel(&cfg)?;
    let res = resolve_roles(&p, &cfg)?;
    let (roles, sel) = final_roles(&p, &res, &cfg)?;
    let est = run_estimator(cfg.method, &p, &roles, &cfg)?;
    let out = Output {
        dir: &a.shared.out_dir,
        command: "estimate",
        input_sha256: p.content_hash(),
        config: config_value(&cfg),
    };
    write_estimate(&out, &p, &roles, &est, sel.as_ref())
}

fn cmd_select(a: SelectArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.shared)?;
    apply_roles(&mut cfg, &a.roles);
    set(&mut cfg.select, a.method);
    if cfg.select.is_none() {
        cfg.select = Some(SelectionMethod::Sequential);
    }
    if let Some(m) = a.estimate {
        cfg.method = m;
    }
    let p = read_panel(&cfg)?;
    let res = resolve_roles(&p, &cfg)?;
    let (roles, sel) = final_roles(&p, &res, &cfg)?;
    let sel = sel.expect("selection requested");
    let out = Output {
        dir: &a.shared.out_dir,
        command: "select",
        input_sha256: p.content_hash(),
        config: config_value(&cfg),
    };
    write_selection(&out, &p, &sel)?;
    if let Some(m) = a.estimate {
        let est = run_estimator(m, &p, &roles, &cfg)?;
        write_estimate(&out, &p, &roles, &est, Some(&sel))?;
    }
    Ok(())
}

fn cmd_infer(a: InferArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.shared)?;
    apply_roles(&mut cfg, &a.roles);
    set(&mut cfg.select, a.select);
    cfg.method = Method::Gmm;
    let inf = &mut cfg.inference;
    set(&mut inf.m, a.m);
    if let Some(n) = a.draws {
        inf.n_draws = n;
    }
    if let Some(l) = a.level {
        inf.level = l;
    }
    if let Some(s) = a.scheme {
        inf.scheme = s;
    }
    if let Some(b) = a.sigma_bandwidth {
        inf.sigma_bandwidth = b;
    }
    if a.reselect {
        inf.reselect_per_block = true;
    }
    if !cfg.constrained {
        return usage("subsampling inference needs simplex-constrained weights");
    }
    let p = read_panel(&cfg)?;
    let res = resolve_roles(&p, &cfg)?;
    if cfg.inference.reselect_per_block && res.selection.is_none() {
        return usage("--reselect needs a selection method (--select)");
    }
    let (roles, sel) = final_roles(&p, &res, &cfg)?;
    cfg.inference.validate(roles.t0())?;
    let gmm = gmm_config(&cfg);
    let est = gmm_sce(&p, &roles, &gmm, cfg.v.as_ref().map(|v| DVector::from_vec(v.clone())).as_ref())?;
    let reselect = if cfg.inference.reselect_per_block {
        res.selection.as_ref()
    } else {
        None
    };
    let ci = subsampling_ci(&p, &roles, &est, &gmm, &cfg.inference, reselect, cfg.seed)?;
    let out = Output {
        dir: &a.shared.out_dir,
        command: "infer",
        input_sha256: p.content_hash(),
        config: config_value(&cfg),
    };
    let mut ci_value = to_value(&ci);
    ci_value.as_object_mut().expect("struct").remove("draws");
    let mut result = json!({
        "interval": ci_value,
        "n_draws": ci.draws.len(),
        "estimate": to_value(&est.report(&p, &roles)),
    });
    if let Some(s) = &sel {
        result["selection"] = to_value(&s.report(&p));
    }
    out.json("ci.json", result)?;
    if let Some(path) = &a.draws_out {
        out.csv(path, |w| {
            w.write_record(["draw", "alpha_star"])?;
            for (k, d) in ci.draws.iter().enumerate() {
                w.write_record([k.to_string(), d.to_string()])?;
            }
            Ok(())
        })?;
    }
    Ok(())
}

/// Panel restricted to its never-treated units.
fn untreated_part(p: &PanelData) -> CliResult<(PanelData, Vec<String>)> {
    let keep = p.never_treated();
    if keep.is_empty() {
        return usage("the panel has no never-treated units to fit a process to");
    }
    let dropped: Vec<String> = (0..p.n_units())
        .filter(|u| !keep.contains(u))
        .map(|u| p.unit_ids()[u].clone())
        .collect();
    let periods: Vec<usize> = (0..p.n_periods()).collect();
    let ids = keep.iter().map(|&u| p.unit_ids()[u].clone()).collect();
    let sub = PanelData::new(ids, p.period_labels().to_vec(), p.submatrix(&keep, &periods), None)?;
    Ok((sub, dropped))
}

fn fit_from_panel(cfg: &RunConfig, rank: Option<usize>) -> CliResult<(FittedDGP, Vec<String>, String)> {
    let p = read_panel(cfg)?;
    let hash = p.content_hash();
    let (sub, dropped) = untreated_part(&p)?;
    if !dropped.is_empty() {
        log::warn!("fitting on never-treated units only; dropped {}", dropped.join(", "));
    }
    Ok((fit_dgp(&sub, rank)?, dropped, hash))
}

fn cmd_fit_dgp(a: FitDgpArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.shared)?;
    set(&mut cfg.factor_rank, a.rank);
    let (dgp, dropped, hash) = fit_from_panel(&cfg, cfg.factor_rank)?;
    let out = Output {
        dir: &a.shared.out_dir,
        command: "fit-dgp",
        input_sha256: hash,
        config: config_value(&cfg),
    };
    out.json("dgp.json", json!({ "dgp": to_value(&dgp), "dropped_units": dropped }))
}

/// Reads a process written by `fit-dgp`, or a bare [`FittedDGP`].
fn read_dgp(path: &Path) -> CliResult<(FittedDGP, String)> {
    let bytes = fs::read(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    let value: Value = serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Usage(format!("invalid JSON in {}: {e}", path.display())))?;
    let inner = value.pointer("/result/dgp").cloned().unwrap_or(value);
    let dgp: FittedDGP = serde_json::from_value(inner)
        .map_err(|e| CliError::Usage(format!("{} is not a fitted process: {e}", path.display())))?;
    dgp.validate()?;
    Ok((dgp, sha256_hex(&bytes)))
}

fn cmd_simulate(a: SimulateArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.shared)?;
    set(&mut cfg.dgp, a.dgp.clone());
    set(&mut cfg.factor_rank, a.rank);
    if let Some(path) = &a.design {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read design {}: {e}", path.display())))?;
        let d: StudyDesign = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid design {}: {e}", path.display())))?;
        cfg.design = Some(d);
    }
    let mut design = cfg.design.clone().unwrap_or_default();
    if let Some(r) = a.reps {
        design.reps = r;
    }
    if a.detail || cfg.detail {
        design.detail = true;
        cfg.detail = true;
    }
    cfg.design = Some(design.clone());
    let (dgp, hash) = match &cfg.dgp {
        Some(path) => read_dgp(path)?,
        None if cfg.panel.is_some() => {
            let (d, _, h) = fit_from_panel(&cfg, cfg.factor_rank)?;
            (d, h)
        }
        None => return usage("simulate needs --dgp or --panel"),
    };
    design.validate(&dgp)?;
    let report = run_study(&dgp, &design, cfg.seed)?;
    let out = Output {
        dir: &a.shared.out_dir,
        command: "simulate",
        input_sha256: hash,
        config: config_value(&cfg),
    };
    let mut buf = out.csv_header();
    report
        .write_csv(&mut buf)
        .map_err(|e| CliError::Usage(format!("csv error: {e}")))?;
    out.write(&out.path("sim_report.csv"), &buf)?;
    out.json("sim_report.json", to_value(&report))
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Estimate(a) => cmd_estimate(a),
        Command::Select(a) => cmd_select(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::FitDgp(a) => cmd_fit_dgp(a),
    }
}

fn threads(command: &Command) -> Option<usize> {
    match command {
        Command::Estimate(a) => a.shared.threads,
        Command::Select(a) => a.shared.threads,
        Command::Infer(a) => a.shared.threads,
        Command::Simulate(a) => a.shared.threads,
        Command::FitDgp(a) => a.shared.threads,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors are reported on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let outcome = match threads(&cli.command) {
        Some(0) => Err(CliError::Usage("--threads must be positive".into())),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(cli.command)),
            Err(e) => Err(CliError::Usage(format!("cannot start {n} threads: {e}"))),
        },
        None => dispatch(cli.command),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {}", e.message());
            e.exit_code()
        }
    }
}
