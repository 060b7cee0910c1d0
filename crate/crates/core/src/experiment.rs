//! Configuration parsing and the end-to-end experiment pipelines.
//!
//! A configuration is a TOML document with the sections `potential`, `sde`,
//! `hydro`, `init`, `stats`, `thresholds` and `output`, plus a top-level
//! `experiment` key. Overrides of the form `section.key=value` are applied to
//! the parsed document before it is validated.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::characteristics::{self, HydroConfig, HydroSolution, InitialTransform};
use crate::dbm_sde::{self, ParticleConfiguration, SdeParams};
use crate::measure;
use crate::potential::PotentialSpec;
use crate::stats::{
    self, FieldProbes, GeometryPolicy, LinearStatConfig, LinearStatistic, LocalLawProbes, ProbeGeometry, ProbeGrid,
    SpectralDomainParams, TestFunction,
};
use crate::Complex64;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("missing required key `{0}`")]
    MissingKey(String),
    #[error("invalid value for `{key}`: {msg}")]
    Invalid { key: String, msg: String },
    #[error("{context}: {message}")]
    Module { context: String, message: String },
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

fn module_err<E: std::fmt::Display>(context: &str) -> impl FnOnce(E) -> ExperimentError + '_ {
    move |e| ExperimentError::Module {
        context: context.to_string(),
        message: e.to_string(),
    }
}

fn invalid(key: &str, msg: impl Into<String>) -> ExperimentError {
    ExperimentError::Invalid {
        key: key.to_string(),
        msg: msg.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Locallaw,
    Rigidity,
    Clt,
    Linstat,
    HydroOracle,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Locallaw => "locallaw",
            ExperimentKind::Rigidity => "rigidity",
            ExperimentKind::Clt => "clt",
            ExperimentKind::Linstat => "linstat",
            ExperimentKind::HydroOracle => "hydro-oracle",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialSection {
    #[serde(default = "default_kind")]
    pub kind: String,
    #[serde(default)]
    pub coeffs: Option<Vec<f64>>,
    #[serde(default = "default_b_cut")]
    pub b_cut: f64,
    #[serde(default)]
    pub kappa: f64,
}

fn default_kind() -> String {
    "quadratic".into()
}
fn default_b_cut() -> f64 {
    4.0
}

impl Default for PotentialSection {
    fn default() -> Self {
        PotentialSection {
            kind: default_kind(),
            coeffs: None,
            b_cut: default_b_cut(),
            kappa: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdeSection {
    pub n: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub step_h: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_runs")]
    pub runs: usize,
    pub t_end: f64,
    #[serde(default)]
    pub gap_floor: Option<f64>,
    #[serde(default = "default_true")]
    pub noise: bool,
}

fn default_beta() -> f64 {
    2.0
}
fn default_runs() -> usize {
    1
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HydroSection {
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_n_mf")]
    pub n_mf: usize,
    #[serde(default = "default_mesh_x")]
    pub mesh_x: usize,
    #[serde(default = "default_mesh_y")]
    pub mesh_y: usize,
    #[serde(default = "default_eta_floor")]
    pub eta_floor: f64,
    /// Top of the mesh; the local-law pipeline defaults to 16.
    #[serde(default)]
    pub y_max: Option<f64>,
    /// `auto` (matching the initial preset) or `empirical` (transform of the SDE start).
    #[serde(default = "default_m0")]
    pub m0: String,
    /// Start points `[re, im]` for the oracle comparison.
    #[serde(default = "default_oracle_points")]
    pub oracle_points: Vec<[f64; 2]>,
}

fn default_dt() -> f64 {
    1e-3
}
fn default_n_mf() -> usize {
    1000
}
fn default_mesh_x() -> usize {
    201
}
fn default_mesh_y() -> usize {
    20
}
fn default_eta_floor() -> f64 {
    1e-6
}
fn default_m0() -> String {
    "auto".into()
}
fn default_oracle_points() -> Vec<[f64; 2]> {
    vec![[0.0, 1.0]]
}

impl Default for HydroSection {
    fn default() -> Self {
        HydroSection {
            dt: default_dt(),
            n_mf: default_n_mf(),
            mesh_x: default_mesh_x(),
            mesh_y: default_mesh_y(),
            eta_floor: default_eta_floor(),
            y_max: None,
            m0: default_m0(),
            oracle_points: default_oracle_points(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSection {
    #[serde(default = "default_preset")]
    pub preset: String,
    #[serde(default)]
    pub path: Option<PathBuf>,
}

fn default_preset() -> String {
    "semicircle".into()
}

impl Default for InitSection {
    fn default() -> Self {
        InitSection {
            preset: default_preset(),
            path: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsSection {
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_k", rename = "K")]
    pub k: f64,
    #[serde(default = "default_c_exp")]
    pub c_exp: f64,
    /// CLT probe points `[re, im]`.
    #[serde(default = "default_probes")]
    pub probes: Vec<[f64; 2]>,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default, rename = "E")]
    pub e: f64,
    #[serde(default = "default_psi")]
    pub psi: String,
    /// Number of local-law probe points.
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    #[serde(default = "default_geometry")]
    pub geometry: GeometryPolicy,
    #[serde(default, rename = "E0")]
    pub e0: f64,
    #[serde(default = "default_r")]
    pub r: f64,
}

fn default_delta() -> f64 {
    0.1
}
fn default_k() -> f64 {
    10.0
}
fn default_c_exp() -> f64 {
    3.0
}
fn default_probes() -> Vec<[f64; 2]> {
    vec![[0.0, 0.005]]
}
fn default_eta() -> f64 {
    0.01
}
fn default_psi() -> String {
    "gaussian".into()
}
fn default_grid_points() -> usize {
    200
}
fn default_geometry() -> GeometryPolicy {
    GeometryPolicy::DeskScale
}
fn default_r() -> f64 {
    0.5
}

impl Default for StatsSection {
    fn default() -> Self {
        StatsSection {
            delta: default_delta(),
            k: default_k(),
            c_exp: default_c_exp(),
            probes: default_probes(),
            eta: default_eta(),
            e: 0.0,
            psi: default_psi(),
            grid_points: default_grid_points(),
            geometry: default_geometry(),
            e0: 0.0,
            r: default_r(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdSection {
    #[serde(default = "d_pass_fraction")]
    pub pass_fraction: f64,
    #[serde(default)]
    pub max_violations: usize,
    #[serde(default = "d_var_tol")]
    pub var_tol: f64,
    #[serde(default = "d_cov_tol")]
    pub cov_tol: f64,
    #[serde(default = "d_skew")]
    pub skewness: f64,
    #[serde(default = "d_kurt")]
    pub kurtosis: f64,
    #[serde(default = "d_cov_distance")]
    pub cov_distance: f64,
    #[serde(default = "d_sigma_tol")]
    pub sigma_tol: f64,
    #[serde(default = "d_sigma_self_check")]
    pub sigma_self_check: f64,
    #[serde(default = "d_oracle_error")]
    pub oracle_error: f64,
    #[serde(default = "d_density_tol")]
    pub density_tol: f64,
}

fn d_pass_fraction() -> f64 {
    0.99
}
fn d_var_tol() -> f64 {
    0.15
}
fn d_cov_tol() -> f64 {
    0.02
}
fn d_skew() -> f64 {
    0.15
}
fn d_kurt() -> f64 {
    0.3
}
fn d_cov_distance() -> f64 {
    0.03
}
fn d_sigma_tol() -> f64 {
    0.2
}
fn d_sigma_self_check() -> f64 {
    1e-3
}
fn d_oracle_error() -> f64 {
    1e-8
}
fn d_density_tol() -> f64 {
    0.02
}

impl Default for ThresholdSection {
    fn default() -> Self {
        ThresholdSection {
            pass_fraction: d_pass_fraction(),
            max_violations: 0,
            var_tol: d_var_tol(),
            cov_tol: d_cov_tol(),
            skewness: d_skew(),
            kurtosis: d_kurt(),
            cov_distance: d_cov_distance(),
            sigma_tol: d_sigma_tol(),
            sigma_self_check: d_sigma_self_check(),
            oracle_error: d_oracle_error(),
            density_tol: d_density_tol(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Runs whose start and end positions go to `trajectory.csv`.
    #[serde(default = "d_traj_runs")]
    pub trajectory_runs: usize,
    #[serde(default = "d_density_points")]
    pub density_points: usize,
}

fn d_traj_runs() -> usize {
    10
}
fn d_density_points() -> usize {
    401
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            trajectory_runs: d_traj_runs(),
            density_points: d_density_points(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub potential: PotentialSection,
    pub sde: SdeSection,
    #[serde(default)]
    pub hydro: HydroSection,
    #[serde(default)]
    pub init: InitSection,
    #[serde(default)]
    pub stats: StatsSection,
    #[serde(default)]
    pub thresholds: ThresholdSection,
    #[serde(default)]
    pub output: OutputSection,
}

const REQUIRED: [&str; 3] = ["experiment", "sde.n", "sde.t_end"];

fn lookup<'a>(table: &'a toml::Table, key: &str) -> Option<&'a toml::Value> {
    let mut parts = key.split('.');
    let mut cur = table.get(parts.next()?)?;
    for p in parts {
        cur = cur.as_table()?.get(p)?;
    }
    Some(cur)
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies a `section.key=value` override; the value is read as a TOML literal
/// and falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), ExperimentError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ExperimentError::Parse(format!("override `{assignment}` is not of the form key=value")))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ExperimentError::Parse(format!("bad override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| ExperimentError::Parse(format!("`{p}` in override `{key}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    /// Parses TOML text, applies overrides and checks required keys.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, ExperimentError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ExperimentError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        for key in REQUIRED {
            if lookup(&table, key).is_none() {
                return Err(ExperimentError::MissingKey(key.to_string()));
            }
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ExperimentError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(|e| ExperimentError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::parse(&text, overrides)
    }

    /// Cross-field checks.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.sde.n < 2 {
            return Err(invalid("sde.n", "need at least 2 particles"));
        }
        if !(self.sde.beta >= 1.0) {
            return Err(invalid("sde.beta", "beta must be >= 1"));
        }
        if !(self.sde.t_end > 0.0 && self.sde.t_end.is_finite()) {
            return Err(invalid("sde.t_end", "must be positive"));
        }
        if self.sde.runs == 0 {
            return Err(invalid("sde.runs", "must be at least 1"));
        }
        if let Some(h) = self.sde.step_h {
            if !(h > 0.0 && h <= 1.0) {
                return Err(invalid("sde.step_h", "must lie in (0, 1]"));
            }
        }
        if !(self.hydro.dt > 0.0 && self.hydro.dt <= self.sde.t_end) {
            return Err(invalid("hydro.dt", "must lie in (0, sde.t_end]"));
        }
        if !matches!(self.hydro.m0.as_str(), "auto" | "empirical") {
            return Err(invalid("hydro.m0", "expected `auto` or `empirical`"));
        }
        if TestFunction::parse(&self.stats.psi).is_none() {
            return Err(invalid("stats.psi", "expected gaussian, bump or zero"));
        }
        if self.stats.probes.iter().any(|p| !(p[1] > 0.0)) {
            return Err(invalid("stats.probes", "probe heights must be positive"));
        }
        match self.init.preset.as_str() {
            "semicircle" | "atom" | "two-atom" => {}
            "file" => {
                if self.init.path.is_none() {
                    return Err(ExperimentError::MissingKey("init.path".into()));
                }
            }
            other => return Err(invalid("init.preset", format!("unknown preset `{other}`"))),
        }
        Ok(())
    }

    fn spectral_params(&self) -> Result<SpectralDomainParams, ExperimentError> {
        let p = SpectralDomainParams::new(self.sde.n, self.stats.delta)
            .map_err(|e| invalid("stats.delta", e.to_string()))?
            .with_k(self.stats.k)
            .with_c_exp(self.stats.c_exp);
        p.validate().map_err(|e| invalid("stats", e.to_string()))?;
        Ok(p)
    }

    fn geometry(&self) -> ProbeGeometry {
        ProbeGeometry {
            e0: self.stats.e0,
            r: self.stats.r,
            policy: self.stats.geometry,
        }
    }
}

/// Machine-readable outcome of a run. Keys that do not apply are `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub experiment: String,
    pub passed: bool,
    pub failures: Vec<String>,
    pub max_r: Option<f64>,
    pub pass_fraction: Option<f64>,
    pub violations: Option<usize>,
    pub max_index_displacement: Option<i64>,
    pub cov_empirical: Option<Vec<Vec<f64>>>,
    pub cov_predicted: Option<Vec<Vec<f64>>>,
    pub cov_distance: Option<f64>,
    pub sigma2_predicted: Option<f64>,
    pub sigma2_empirical: Option<f64>,
    pub runs: Option<usize>,
    pub max_error: Option<f64>,
    pub details: serde_json::Value,
}

/// Keys every report carries.
pub const REPORT_KEYS: [&str; 10] = [
    "max_r",
    "pass_fraction",
    "violations",
    "max_index_displacement",
    "cov_empirical",
    "cov_predicted",
    "cov_distance",
    "sigma2_predicted",
    "sigma2_empirical",
    "runs",
];

impl Report {
    fn new(kind: ExperimentKind) -> Self {
        Report {
            experiment: kind.name().to_string(),
            passed: true,
            failures: Vec::new(),
            max_r: None,
            pass_fraction: None,
            violations: None,
            max_index_displacement: None,
            cov_empirical: None,
            cov_predicted: None,
            cov_distance: None,
            sigma2_predicted: None,
            sigma2_empirical: None,
            runs: None,
            max_error: None,
            details: serde_json::Value::Object(Default::default()),
        }
    }

    fn check(&mut self, ok: bool, what: String) {
        if !ok {
            self.failures.push(what);
            self.passed = false;
        }
    }

    fn detail(&mut self, key: &str, value: impl Serialize) {
        if let serde_json::Value::Object(map) = &mut self.details {
            map.insert(key.to_string(), serde_json::to_value(value).unwrap_or(serde_json::Value::Null));
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }
}

/// Everything a pipeline needs before the statistics stage.
pub struct Prepared {
    pub spec: PotentialSpec,
    pub start: ParticleConfiguration,
    pub solution: HydroSolution,
}

fn build_spec(p: &PotentialSection) -> Result<PotentialSpec, ExperimentError> {
    let coeffs = match p.kind.as_str() {
        "quadratic" => vec![0.0, 0.0, 0.5],
        "quartic" => vec![0.0, 0.0, 0.0, 0.0, 0.25],
        "zero" => vec![0.0],
        "poly" => p.coeffs.clone().ok_or_else(|| ExperimentError::MissingKey("potential.coeffs".into()))?,
        other => return Err(invalid("potential.kind", format!("unknown kind `{other}`"))),
    };
    PotentialSpec::polynomial(coeffs, p.b_cut, p.kappa).map_err(|e| invalid("potential", e.to_string()))
}

/// Spread of the SDE start for atom presets (the drift is singular at coincident points).
const ATOM_START_RADIUS: f64 = 1e-3;
const MEAN_FIELD_ATOM_RADIUS: f64 = 1e-2;

fn cluster(center: f64, radius: f64, n: usize) -> Vec<f64> {
    measure::semicircle_points(n)
        .into_iter()
        .map(|x| center + radius / 2.0 * x)
        .collect()
}

fn read_positions(path: &Path) -> Result<Vec<f64>, ExperimentError> {
    let text = fs::read_to_string(path).map_err(|e| ExperimentError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let field = line.split(',').next_back().unwrap_or("").trim();
        if field.is_empty() {
            continue;
        }
        match field.parse::<f64>() {
            Ok(v) if v.is_finite() => out.push(v),
            _ if k == 0 => continue, // header
            _ => return Err(invalid("init.path", format!("line {}: cannot parse `{field}`", k + 1))),
        }
    }
    Ok(out)
}

/// Initial positions, hydro transform and mean-field start for the preset.
fn initial_data(cfg: &ExperimentConfig) -> Result<(Vec<f64>, InitialTransform, Vec<f64>), ExperimentError> {
    let n = cfg.sde.n;
    let n_mf = cfg.hydro.n_mf;
    let (positions, transform, mf) = match cfg.init.preset.as_str() {
        "semicircle" => {
            let t = InitialTransform::Semicircle { center: 0.0, radius: 2.0 };
            let mf = t.mean_field_points(n_mf);
            (measure::semicircle_points(n), t, mf)
        }
        "atom" => (
            cluster(0.0, ATOM_START_RADIUS, n),
            InitialTransform::Atom { at: 0.0 },
            cluster(0.0, MEAN_FIELD_ATOM_RADIUS, n_mf),
        ),
        "two-atom" => {
            let left = n / 2;
            let mut pos = cluster(-1.0, ATOM_START_RADIUS, left);
            pos.extend(cluster(1.0, ATOM_START_RADIUS, n - left));
            let mut atoms = vec![-1.0; left];
            atoms.extend(vec![1.0; n - left]);
            let mf_left = (n_mf * left) / n;
            let mut mf = cluster(-1.0, MEAN_FIELD_ATOM_RADIUS, mf_left);
            mf.extend(cluster(1.0, MEAN_FIELD_ATOM_RADIUS, n_mf - mf_left));
            (pos, InitialTransform::empirical(atoms), mf)
        }
        "file" => {
            let path = cfg.init.path.as_ref().ok_or_else(|| ExperimentError::MissingKey("init.path".into()))?;
            let pos = read_positions(path)?;
            if pos.len() != n {
                return Err(invalid(
                    "init.path",
                    format!("file holds {} positions but sde.n = {n}", pos.len()),
                ));
            }
            let t = InitialTransform::empirical(pos.clone());
            let mf = t.mean_field_points(n_mf);
            (pos, t, mf)
        }
        other => return Err(invalid("init.preset", format!("unknown preset `{other}`"))),
    };
    if cfg.hydro.m0 == "empirical" {
        let t = InitialTransform::empirical(positions.clone());
        let mf = t.mean_field_points(n_mf);
        return Ok((positions, t, mf));
    }
    Ok((positions, transform, mf))
}

fn hydro_config(cfg: &ExperimentConfig, y_max: f64) -> HydroConfig {
    HydroConfig {
        dt: cfg.hydro.dt,
        n_mf: cfg.hydro.n_mf,
        mesh_x: cfg.hydro.mesh_x,
        mesh_y: cfg.hydro.mesh_y,
        eta_floor: cfg.hydro.eta_floor,
        y_range: (1e-3, y_max),
        ..HydroConfig::default()
    }
}

/// Builds the potential, the SDE start and the hydro solution at `sde.t_end`.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, ExperimentError> {
    let spec = build_spec(&cfg.potential)?;
    let (positions, transform, mf) = initial_data(cfg)?;
    let start = ParticleConfiguration::new(positions, 0.0, cfg.sde.beta).map_err(module_err("initial configuration"))?;
    let default_top = if cfg.experiment == ExperimentKind::Locallaw { 16.0 } else { 1.0 };
    let hcfg = hydro_config(cfg, cfg.hydro.y_max.unwrap_or(default_top));
    let mut solution = HydroSolution::with_mean_field(spec.clone(), transform, hcfg, mf).map_err(module_err("hydro"))?;
    solution.advance_to(cfg.sde.t_end).map_err(module_err("hydro"))?;
    Ok(Prepared { spec, start, solution })
}

fn sde_params(cfg: &ExperimentConfig) -> SdeParams {
    let mut p = SdeParams::for_particles(cfg.sde.n).with_seed(cfg.sde.seed);
    if let Some(h) = cfg.sde.step_h {
        p.step_h = h;
    }
    if let Some(g) = cfg.sde.gap_floor {
        p.gap_floor = g;
    }
    p.noise = cfg.sde.noise;
    p
}

/// Final configurations of the ensemble, in run order.
pub fn run_ensemble(cfg: &ExperimentConfig, prep: &Prepared) -> Result<Vec<ParticleConfiguration>, ExperimentError> {
    let params = sde_params(cfg);
    let out = dbm_sde::ensemble(&prep.start, &prep.spec, &params, cfg.sde.t_end, cfg.sde.runs)
        .map_err(module_err("sde ensemble"))?;
    Ok(out.into_iter().map(|r| r.config).collect())
}

struct Outputs<'a> {
    dir: Option<&'a Path>,
}

impl Outputs<'_> {
    fn write(&self, name: &str, f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<(), ExperimentError> {
        let Some(dir) = self.dir else {
            return Ok(());
        };
        let path = dir.join(name);
        let io = |e: std::io::Error| ExperimentError::Io {
            path: path.clone(),
            message: e.to_string(),
        };
        let file = fs::File::create(&path).map_err(io)?;
        let mut w = BufWriter::new(file);
        f(&mut w).map_err(io)?;
        w.flush().map_err(io)
    }
}

fn write_common(
    out: &Outputs,
    cfg: &ExperimentConfig,
    prep: &Prepared,
    finals: &[ParticleConfiguration],
    table: Option<&measure::QuantileTable>,
) -> Result<(), ExperimentError> {
    out.write("trajectory.csv", |w| {
        writeln!(w, "run,time,index,position")?;
        for (run, fin) in finals.iter().enumerate().take(cfg.output.trajectory_runs) {
            for c in [&prep.start, fin] {
                for (i, x) in c.positions().iter().enumerate() {
                    writeln!(w, "{run},{},{},{x}", c.time(), i + 1)?;
                }
            }
        }
        Ok(())
    })?;
    out.write("mesh.csv", |w| prep.solution.write_mesh_csv(w))?;
    if let Some(t) = table {
        out.write("quantiles.csv", |w| t.write_csv(w))?;
    }
    if cfg.output.density_points >= 2 {
        if let Some((lo, hi)) = prep.solution.alive_real_extent() {
            let k = cfg.output.density_points;
            let grid: Vec<f64> = (0..k).map(|j| lo + (hi - lo) * j as f64 / (k - 1) as f64).collect();
            let eta = measure::default_eta_probe(cfg.sde.n);
            let mut buf = Vec::new();
            measure::write_density_csv(&mut buf, &prep.solution, &grid, eta).map_err(module_err("density profile"))?;
            out.write("density.csv", |w| w.write_all(&buf))?;
        }
    }
    Ok(())
}

/// Runs the configured experiment and writes its artifacts into `out_dir` if given.
pub fn run(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<Report, ExperimentError> {
    if let Some(d) = out_dir {
        fs::create_dir_all(d).map_err(|e| ExperimentError::Io {
            path: d.to_path_buf(),
            message: e.to_string(),
        })?;
    }
    let out = Outputs { dir: out_dir };
    let report = match cfg.experiment {
        ExperimentKind::HydroOracle => hydro_oracle(cfg)?,
        ExperimentKind::Locallaw => local_law(cfg, &out)?,
        ExperimentKind::Rigidity => rigidity(cfg, &out)?,
        ExperimentKind::Clt => clt(cfg, &out)?,
        ExperimentKind::Linstat => linstat(cfg, &out)?,
    };
    let json = report.to_json();
    out.write("report.json", |w| w.write_all(json.as_bytes()))?;
    Ok(report)
}

fn hydro_oracle(cfg: &ExperimentConfig) -> Result<Report, ExperimentError> {
    let mut report = Report::new(cfg.experiment);
    let spec = build_spec(&cfg.potential)?;
    let quadratic = spec.coefficients() == [0.0, 0.0, 0.5];
    let free = spec.coefficients().iter().all(|&c| c == 0.0);
    if !quadratic && !free {
        return Err(invalid("potential.kind", "the oracle needs the quadratic or zero potential"));
    }
    let (_, transform, _) = initial_data(cfg)?;
    let t_end = cfg.sde.t_end;
    let mut max_error: f64 = 0.0;
    for p in &cfg.hydro.oracle_points {
        let u = Complex64::new(p[0], p[1]);
        let hcfg = HydroConfig {
            dt: cfg.hydro.dt,
            n_mf: 0,
            mesh_x: 2,
            mesh_y: 1,
            eta_floor: cfg.hydro.eta_floor,
            x_range: Some((u.re, u.re + 1.0)),
            y_range: (u.im, u.im),
            ..HydroConfig::default()
        };
        let mut sol = HydroSolution::new(spec.clone(), transform.clone(), hcfg).map_err(module_err("hydro"))?;
        sol.advance_to(t_end).map_err(module_err("hydro"))?;
        let path = sol.trace(u).map_err(module_err("hydro"))?;
        let m0 = |w: Complex64| transform.eval(w);
        for c in path.iter().filter(|c| c.alive) {
            let o = if quadratic {
                characteristics::quadratic_flow_oracle(u, c.s, m0)
            } else {
                characteristics::free_flow_oracle(u, c.s, m0)
            }
            .map_err(module_err("oracle"))?;
            max_error = max_error.max((c.z - o.z).norm()).max((c.m - o.m).norm());
        }
    }
    report.max_error = Some(max_error);
    report.check(
        max_error <= cfg.thresholds.oracle_error,
        format!("max oracle error {max_error:e} exceeds {:e}", cfg.thresholds.oracle_error),
    );
    // the atom evolves into a semicircle of radius 2√t under the free flow
    if free && cfg.init.preset == "atom" {
        let hcfg = HydroConfig {
            dt: cfg.hydro.dt,
            n_mf: 0,
            mesh_x: cfg.hydro.mesh_x,
            mesh_y: cfg.hydro.mesh_y,
            eta_floor: cfg.hydro.eta_floor,
            ..HydroConfig::default()
        };
        let mut sol = HydroSolution::new(spec, transform, hcfg).map_err(module_err("hydro"))?;
        sol.advance_to(t_end).map_err(module_err("hydro"))?;
        let d = measure::density(&sol, 0.0, 1e-3).map_err(module_err("density"))?;
        let expect = 1.0 / (std::f64::consts::PI * t_end.sqrt());
        let rel = (d - expect).abs() / expect;
        report.detail("density_at_zero", d);
        report.detail("density_expected", expect);
        report.check(
            rel <= cfg.thresholds.density_tol,
            format!("density at 0 is {d}, expected {expect} within {}", cfg.thresholds.density_tol),
        );
    }
    Ok(report)
}

fn local_law(cfg: &ExperimentConfig, out: &Outputs) -> Result<Report, ExperimentError> {
    let mut report = Report::new(cfg.experiment);
    let params = cfg.spectral_params()?;
    let prep = prepare(cfg)?;
    let grid = ProbeGrid::covering(&prep.solution, &params, cfg.sde.t_end);
    let probes = match LocalLawProbes::build(&params, &prep.solution, &grid, cfg.stats.grid_points) {
        Err(stats::StatsError::EmptyDomain { candidates }) => {
            return Err(ExperimentError::Module {
                context: "local law".into(),
                message: format!(
                    "the spectral domain is empty on all {candidates} candidates at N = {}, K = {} \
                     (Im w · Im m <= 1 < e^(Kt) M log N / N = {:.3}); try stats.K = 0",
                    cfg.sde.n,
                    params.k,
                    params.local_scale(cfg.sde.t_end)
                ),
            })
        }
        other => other.map_err(module_err("local law"))?,
    };
    let finals = run_ensemble(cfg, &prep)?;
    let residuals: Vec<Vec<f64>> = finals.iter().map(|c| probes.residuals(c)).collect();
    let rep = stats::pool_local_law(&residuals, &probes.probes, params.m);
    report.max_r = Some(rep.max_r);
    report.pass_fraction = Some(rep.pass_fraction);
    report.runs = Some(finals.len());
    report.detail("threshold_M", params.m);
    report.detail("probes", probes.probes.len());
    report.detail("in_domain_candidates", probes.in_domain);
    report.detail("worst_probe", rep.worst);
    report.check(
        rep.pass_fraction >= cfg.thresholds.pass_fraction,
        format!("pass fraction {} below {}", rep.pass_fraction, cfg.thresholds.pass_fraction),
    );
    write_common(out, cfg, &prep, &finals, None)?;
    Ok(report)
}

fn rigidity(cfg: &ExperimentConfig, out: &Outputs) -> Result<Report, ExperimentError> {
    let mut report = Report::new(cfg.experiment);
    let params = cfg.spectral_params()?;
    let prep = prepare(cfg)?;
    let table = measure::classical_locations(&prep.solution, cfg.sde.n).map_err(module_err("classical locations"))?;
    let finals = run_ensemble(cfg, &prep)?;
    let mut violations = 0;
    let mut bulk_violations = 0;
    let mut bulk_indices = 0;
    let mut max_d = i64::MIN;
    let mut max_abs = 0;
    for c in &finals {
        let r = stats::rigidity_report(c, &table, &params).map_err(module_err("rigidity"))?;
        violations += r.violations;
        bulk_violations += r.bulk_violations;
        bulk_indices = r.bulk_indices;
        max_d = max_d.max(r.max_index_displacement);
        max_abs = max_abs.max(r.max_abs_index_displacement);
    }
    report.violations = Some(violations);
    report.max_index_displacement = Some(max_d);
    report.runs = Some(finals.len());
    report.detail("window", params.window());
    report.detail("m_log_n", params.m_log_n());
    report.detail("bulk_indices", bulk_indices);
    report.detail("bulk_violations", bulk_violations);
    report.detail("max_abs_index_displacement", max_abs);
    report.check(
        violations <= cfg.thresholds.max_violations,
        format!("{violations} rigidity violations"),
    );
    report.check(
        (max_abs as f64) <= params.m_log_n(),
        format!("index displacement {max_abs} exceeds M log N = {}", params.m_log_n()),
    );
    write_common(out, cfg, &prep, &finals, Some(&table))?;
    Ok(report)
}

fn clt(cfg: &ExperimentConfig, out: &Outputs) -> Result<Report, ExperimentError> {
    let mut report = Report::new(cfg.experiment);
    let params = cfg.spectral_params()?;
    let prep = prepare(cfg)?;
    let probes: Vec<Complex64> = cfg.stats.probes.iter().map(|p| Complex64::new(p[0], p[1])).collect();
    let field = FieldProbes::new(&prep.solution, probes.clone(), &cfg.geometry(), &params).map_err(module_err("clt probes"))?;
    let finals = run_ensemble(cfg, &prep)?;
    let samples: Vec<_> = finals.iter().enumerate().map(|(r, c)| field.sample(c, r)).collect();
    let rep = stats::clt_report(&samples, cfg.sde.beta).map_err(module_err("clt"))?;
    let target = 1.0 / (4.0 * cfg.sde.beta);
    let th = &cfg.thresholds;
    for j in 0..probes.len() {
        for (a, name) in [(2 * j, "Re"), (2 * j + 1, "Im")] {
            let v = rep.cov_empirical[a][a];
            report.check(
                (v - target).abs() <= th.var_tol * target,
                format!("probe {j}: Var {name} = {v}, expected {target} ± {}%", th.var_tol * 100.0),
            );
            report.check(
                rep.skewness[a].abs() <= th.skewness,
                format!("probe {j}: skewness {name} = {}", rep.skewness[a]),
            );
            report.check(
                rep.excess_kurtosis[a].abs() <= th.kurtosis,
                format!("probe {j}: excess kurtosis {name} = {}", rep.excess_kurtosis[a]),
            );
        }
        let c = rep.cov_empirical[2 * j][2 * j + 1];
        report.check(c.abs() <= th.cov_tol, format!("probe {j}: Cov(Re, Im) = {c}"));
    }
    if probes.len() > 1 {
        report.check(
            rep.cov_distance <= th.cov_distance,
            format!("covariance distance {} exceeds {}", rep.cov_distance, th.cov_distance),
        );
    }
    report.cov_empirical = Some(rep.cov_empirical.clone());
    report.cov_predicted = Some(rep.cov_predicted.clone());
    report.cov_distance = Some(rep.cov_distance);
    report.runs = Some(rep.runs);
    report.detail("mean", &rep.mean);
    report.detail("mean_standard_error", &rep.mean_standard_error);
    report.detail("skewness", &rep.skewness);
    report.detail("excess_kurtosis", &rep.excess_kurtosis);
    out.write("fluctuations.csv", |w| {
        writeln!(w, "run,probe_re,probe_im,gamma_re,gamma_im")?;
        for s in &samples {
            for (z, g) in s.probes.iter().zip(&s.gamma) {
                writeln!(w, "{},{},{},{},{}", s.run_id, z.re, z.im, g.re, g.im)?;
            }
        }
        Ok(())
    })?;
    write_common(out, cfg, &prep, &finals, None)?;
    Ok(report)
}

fn linstat(cfg: &ExperimentConfig, out: &Outputs) -> Result<Report, ExperimentError> {
    let mut report = Report::new(cfg.experiment);
    let params = cfg.spectral_params()?;
    let psi = TestFunction::parse(&cfg.stats.psi).ok_or_else(|| invalid("stats.psi", "unknown test function"))?;
    let lcfg = LinearStatConfig {
        psi,
        eta: cfg.stats.eta,
        e: cfg.stats.e,
    };
    let sigma = stats::sigma_psi_squared_checked(&psi, cfg.sde.beta).map_err(module_err("sigma"))?;
    let prep = prepare(cfg)?;
    let stat = LinearStatistic::prepare(&prep.solution, lcfg, cfg.sde.n, &cfg.geometry(), &params)
        .map_err(module_err("linear statistic"))?;
    let finals = run_ensemble(cfg, &prep)?;
    let values: Vec<f64> = finals.iter().map(|c| stat.evaluate(c)).collect();
    let var = stats::sample_variance(&values);
    report.sigma2_predicted = Some(sigma.value);
    report.sigma2_empirical = Some(var);
    report.runs = Some(values.len());
    report.detail("sigma2_fourier", sigma.fourier);
    report.detail("sigma2_route_rel_diff", sigma.rel_diff);
    report.detail("centering", stat.centering);
    report.detail("mean", values.iter().sum::<f64>() / values.len() as f64);
    let th = &cfg.thresholds;
    report.check(
        sigma.rel_diff <= th.sigma_self_check,
        format!("sigma² quadrature routes differ by {}", sigma.rel_diff),
    );
    report.check(
        (var - sigma.value).abs() <= th.sigma_tol * sigma.value,
        format!("sample variance {var} vs sigma² {} (tolerance {}%)", sigma.value, th.sigma_tol * 100.0),
    );
    write_common(out, cfg, &prep, &finals, None)?;
    Ok(report)
}

/// Built-in oracle configurations for `quadratic` and `free`.
pub fn oracle_config(which: &str) -> Result<ExperimentConfig, ExperimentError> {
    let (potential, preset, t_end) = match which {
        "quadratic" => ("quadratic", "semicircle", 0.5),
        "free" => ("zero", "atom", 0.25),
        other => return Err(invalid("oracle", format!("expected quadratic or free, got `{other}`"))),
    };
    let text = format!(
        "experiment = \"hydro-oracle\"\n\
         [potential]\nkind = \"{potential}\"\n\
         [sde]\nn = 100\nt_end = {t_end}\n\
         [init]\npreset = \"{preset}\"\n"
    );
    ExperimentConfig::parse(&text, &[])
}
