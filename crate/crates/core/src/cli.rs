//! Experiment runner behind the `chivar` binary: a JSON config selects one
//! experiment kind, the runner writes plot-ready CSV/JSON files plus a
//! manifest labelling each file.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::chi_window::{chi_cov_closed, chi_cov_direct, LaggedBrackets};
use crate::covariation::{check_schedule, epsilon_covariation, CovariationCurve};
use crate::error::{Error, Result};
use crate::flow::{Diffusion, Drift, SdeModel};
use crate::functionals::{DensitySpec, FunctionalSpec};
use crate::fukushima::decompose;
use crate::maps::SmoothMap;
use crate::measures::{Chi2Measure, DaL2Measure, Kernel, KernelFactor};
use crate::paths::{window_at_node, AnchorSet, LagGrid, SampledPath, TimeGrid, WindowSlice};
use crate::pde_chain::{black_scholes_call, cross_validate, hedge_from_chain, solve_chain, ChainSettings, LatticeSpec};
use crate::representation::{
    directional_derivative, estimate_delta0, estimate_perp, estimate_u, fd_directional, malliavin_derivatives, replicate,
    rms_error, scenario_path, HedgeResult, PathPayoff, PayoffSpec,
};
use crate::rng::{derive_seed, standard_normal_row};

/// Multiplier on `Δ^{1/2}` in the Itô-oracle check, fixed once.
pub const ITO_CONSTANT: f64 = 1.0;

/// Slack `c·δ²` added to the finite-difference comparison.
pub const FD_SLACK: f64 = 100.0;

const BUMP_TAG: u64 = 0xb0b;
const PROBE_TAG: u64 = 0x9b0e;
const CROSS_TAG: u64 = 0xc805;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    QvSweep,
    ChiWindow,
    Fukushima,
    Represent,
    HedgeMc,
    HedgePde,
    CrossValidate,
    Malliavin,
}

impl ExperimentKind {
    /// Acceptance criteria this kind exercises.
    pub fn criteria(self) -> &'static [u32] {
        match self {
            ExperimentKind::QvSweep => &[1, 2],
            ExperimentKind::ChiWindow => &[3],
            ExperimentKind::Fukushima => &[4, 5],
            ExperimentKind::Represent => &[9],
            ExperimentKind::HedgeMc => &[7],
            ExperimentKind::HedgePde | ExperimentKind::CrossValidate => &[6],
            ExperimentKind::Malliavin => &[8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    pub horizon: f64,
    pub steps: usize,
}

/// Registry name plus parameters. Names: `brownian`, `constant` (sigma),
/// `geometric` (sigma), `degenerate` (sigma), `sinusoidal` (sigma0, sigma1),
/// `linear_path` (no diffusion). Drift parameters: `mu` or `beta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default)]
    pub x0: f64,
}

impl Default for ModelBlock {
    fn default() -> Self {
        Self { name: "brownian".into(), params: BTreeMap::new(), x0: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalBlock {
    /// Window length.
    pub tau: f64,
    #[serde(flatten)]
    pub spec: FunctionalSpec,
}

/// `μ2` for the χ-window experiment: atoms between anchors plus an optional
/// rank-one kernel `left(x)·right(y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureBlock {
    pub tau: f64,
    /// Interior anchor lags; `0` and `-tau` are always present.
    #[serde(default)]
    pub anchors: Vec<f64>,
    /// Rows and columns in anchor order `0, …, -tau`.
    #[serde(default)]
    pub atoms: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub kernel: Option<KernelBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelBlock {
    pub left: DensitySpec,
    pub right: DensitySpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeBlock {
    pub space: LatticeSpec,
    #[serde(default)]
    pub params: Option<LatticeSpec>,
    pub steps_per_unit: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NumericBlock {
    /// Strictly decreasing ε values, each a multiple of the time step.
    pub schedule: Vec<f64>,
    /// Independent paths or outer scenarios.
    pub seeds: usize,
    pub n_paths: usize,
    pub inner_n: usize,
    pub rebalance_stride: usize,
    pub refinements: usize,
    pub lattice: Option<LatticeBlock>,
    pub s: f64,
    pub probes: usize,
    pub bumps: usize,
    pub delta: f64,
    pub threshold: f64,
    pub tolerance: Option<f64>,
    pub reference: Option<f64>,
    pub measure: Option<MeasureBlock>,
}

impl Default for NumericBlock {
    fn default() -> Self {
        Self {
            schedule: Vec::new(),
            seeds: 32,
            n_paths: 4096,
            inner_n: 1024,
            rebalance_stride: 1,
            refinements: 3,
            lattice: None,
            s: 0.0,
            probes: 10,
            bumps: 20,
            delta: 1e-3,
            threshold: 0.05,
            tolerance: None,
            reference: None,
            measure: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub grid: GridBlock,
    #[serde(default)]
    pub model: ModelBlock,
    #[serde(default)]
    pub payoff: Option<PayoffSpec>,
    #[serde(default)]
    pub functional: Option<FunctionalBlock>,
    #[serde(default)]
    pub numeric: NumericBlock,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn config_error(field: &str, message: impl std::fmt::Display) -> Error {
    Error::Config { field: field.into(), message: message.to_string() }
}

trait AtField<T> {
    fn at(self, field: &str) -> Result<T>;
}

impl<T> AtField<T> for Result<T> {
    fn at(self, field: &str) -> Result<T> {
        self.map_err(|e| match e {
            Error::Config { .. } => e,
            other => config_error(field, other),
        })
    }
}

/// Parses a config, naming the offending field on failure.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut de = serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let message = e.inner().to_string();
        let mut field = e.path().to_string();
        if field == "." {
            field = message
                .split('`')
                .nth(1)
                .filter(|_| message.starts_with("missing field") || message.starts_with("unknown field"))
                .unwrap_or("config")
                .to_string();
        }
        Error::Config { field, message }
    })
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| config_error("config", format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

/// Builds the model from its registry entry.
pub fn build_model(block: &ModelBlock) -> Result<SdeModel> {
    let p = &block.params;
    let allowed: &[&str] = match block.name.as_str() {
        "brownian" | "linear_path" => &["mu", "beta"],
        "constant" | "geometric" | "degenerate" => &["sigma", "mu", "beta"],
        "sinusoidal" => &["sigma0", "sigma1", "mu", "beta"],
        other => return Err(config_error("model.name", format!("unknown model `{other}`"))),
    };
    if let Some(k) = p.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(config_error(&format!("model.params.{k}"), format!("not a parameter of `{}`", block.name)));
    }
    let need = |k: &str| p.get(k).copied().ok_or_else(|| config_error(&format!("model.params.{k}"), "missing"));
    let diffusion = match block.name.as_str() {
        "brownian" => Diffusion::Constant { sigma: 1.0 },
        "linear_path" => Diffusion::Constant { sigma: 0.0 },
        "constant" => Diffusion::Constant { sigma: need("sigma")? },
        "geometric" => Diffusion::Affine { sigma: need("sigma")? },
        "degenerate" => Diffusion::Degenerate { sigma: need("sigma")? },
        _ => Diffusion::Sinusoidal { sigma0: need("sigma0")?, sigma1: need("sigma1")? },
    };
    let drift = match (p.get("mu"), p.get("beta")) {
        (Some(_), Some(_)) => return Err(config_error("model.params", "give at most one of `mu` and `beta`")),
        (Some(&mu), None) => Drift::Constant { mu },
        (None, Some(&beta)) => Drift::Linear { beta },
        (None, None) => Drift::Zero,
    };
    let model = SdeModel::new(diffusion, drift);
    model.validate().at("model.params")?;
    if !block.x0.is_finite() {
        return Err(config_error("model.x0", "must be finite"));
    }
    Ok(model)
}

/// Everything a run needs, built and checked from the config.
struct Prepared {
    grid: TimeGrid,
    model: SdeModel,
    x0: f64,
}

fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let grid = TimeGrid::new(cfg.grid.horizon, cfg.grid.steps).at("grid")?;
    let model = build_model(&cfg.model)?;
    let n = &cfg.numeric;
    let need_schedule = matches!(cfg.kind, ExperimentKind::QvSweep | ExperimentKind::ChiWindow | ExperimentKind::Fukushima);
    if need_schedule {
        check_schedule(&grid, &n.schedule).at("numeric.schedule")?;
    }
    let need_payoff = matches!(
        cfg.kind,
        ExperimentKind::Represent
            | ExperimentKind::HedgeMc
            | ExperimentKind::HedgePde
            | ExperimentKind::CrossValidate
            | ExperimentKind::Malliavin
    );
    if need_payoff {
        let spec = cfg.payoff.as_ref().ok_or_else(|| config_error("payoff", "required for this experiment kind"))?;
        build_payoff(spec, &grid)?;
    }
    if cfg.kind == ExperimentKind::Fukushima {
        let f = cfg.functional.as_ref().ok_or_else(|| config_error("functional", "required for this experiment kind"))?;
        build_functional_lags(f, &grid)?;
    }
    if cfg.kind == ExperimentKind::ChiWindow {
        let m = n.measure.as_ref().ok_or_else(|| config_error("numeric.measure", "required for this experiment kind"))?;
        build_measure(m, &grid)?;
    }
    if matches!(cfg.kind, ExperimentKind::HedgePde | ExperimentKind::CrossValidate) {
        chain_settings(cfg)?;
        match cfg.payoff.as_ref() {
            Some(PayoffSpec::Discrete { .. }) => {}
            _ => return Err(config_error("payoff.kind", "the PDE chain needs a discrete payoff")),
        }
    }
    if matches!(cfg.kind, ExperimentKind::QvSweep | ExperimentKind::ChiWindow | ExperimentKind::Fukushima | ExperimentKind::HedgeMc | ExperimentKind::HedgePde)
        && n.seeds == 0
    {
        return Err(config_error("numeric.seeds", "must be positive"));
    }
    if matches!(cfg.kind, ExperimentKind::Represent | ExperimentKind::Malliavin) {
        if n.n_paths < 2 {
            return Err(config_error("numeric.n_paths", "need at least 2 paths"));
        }
        if grid.node_index(n.s).is_none() || n.s >= grid.horizon() {
            return Err(config_error("numeric.s", "must be a grid node before the horizon"));
        }
    }
    if cfg.kind == ExperimentKind::Represent && !(n.delta > 0.0) {
        return Err(config_error("numeric.delta", "must be positive"));
    }
    if matches!(cfg.kind, ExperimentKind::HedgeMc | ExperimentKind::CrossValidate) && n.inner_n < 2 {
        return Err(config_error("numeric.inner_n", "need at least 2 inner paths"));
    }
    if cfg.kind == ExperimentKind::HedgeMc {
        if n.refinements == 0 || n.refinements > 16 {
            return Err(config_error("numeric.refinements", "must lie in 1..=16"));
        }
        let div = 1usize << (n.refinements - 1);
        if n.rebalance_stride == 0 || !n.rebalance_stride.is_multiple_of(div) {
            return Err(config_error("numeric.rebalance_stride", format!("must be a positive multiple of {div}")));
        }
        let payoff = build_payoff(cfg.payoff.as_ref().unwrap(), &grid)?;
        crate::representation::rebalance_nodes(&payoff, n.rebalance_stride).at("numeric.rebalance_stride")?;
    }
    if cfg.kind == ExperimentKind::CrossValidate && (n.probes == 0 || grid.steps() < 2) {
        return Err(config_error("numeric.probes", "need at least one probe and two time steps"));
    }
    if cfg.kind == ExperimentKind::Malliavin && !model.is_brownian() {
        return Err(config_error("model.name", "the integration-by-parts estimator needs the `brownian` model"));
    }
    Ok(Prepared { grid, model, x0: cfg.model.x0 })
}

fn build_payoff(spec: &PayoffSpec, grid: &TimeGrid) -> Result<PathPayoff> {
    let anchors = match spec {
        PayoffSpec::Discrete { anchors, .. } | PayoffSpec::Integralized { anchors, .. } => Some(anchors),
        PayoffSpec::WeightedIncrement { .. } => None,
    };
    if let Some(a) = anchors {
        if let Some(bad) = a.iter().find(|&&t| grid.node_index(t).is_none()) {
            return Err(config_error("payoff.anchors", format!("anchor {bad} is not a grid node")));
        }
    }
    PathPayoff::new(spec.clone(), *grid).at("payoff")
}

fn build_functional_lags(block: &FunctionalBlock, grid: &TimeGrid) -> Result<(LagGrid, crate::functionals::C1Functional)> {
    let lags = LagGrid::new(block.tau, grid).at("functional.tau")?;
    let f = block.spec.build(&lags).at("functional")?;
    Ok((lags, f))
}

fn build_measure(block: &MeasureBlock, grid: &TimeGrid) -> Result<Chi2Measure> {
    let lags = LagGrid::new(block.tau, grid).at("numeric.measure.tau")?;
    let anchors = AnchorSet::new(lags, &block.anchors).at("numeric.measure.anchors")?;
    let n = anchors.len();
    let atoms = block.atoms.clone().unwrap_or_else(|| vec![vec![0.0; n]; n]);
    let kernel = match &block.kernel {
        None => Kernel::Zero,
        Some(k) => Kernel::Factored(vec![KernelFactor {
            left: k.left.sample(&lags).at("numeric.measure.kernel.left")?,
            right: k.right.sample(&lags).at("numeric.measure.kernel.right")?,
        }]),
    };
    Chi2Measure::new(anchors, atoms, vec![Vec::new(); n], vec![Vec::new(); n], kernel).at("numeric.measure.atoms")
}

fn chain_settings(cfg: &ExperimentConfig) -> Result<ChainSettings> {
    let l = cfg.numeric.lattice.as_ref().ok_or_else(|| config_error("numeric.lattice", "required for the PDE chain"))?;
    if l.space.points < 4 || !(l.space.upper > l.space.lower) {
        return Err(config_error("numeric.lattice.space", "need lower < upper and at least 4 points"));
    }
    let params = l.params.unwrap_or(l.space);
    if params.points < 2 || !(params.upper > params.lower) {
        return Err(config_error("numeric.lattice.params", "need lower < upper and at least 2 points"));
    }
    if l.steps_per_unit == 0 {
        return Err(config_error("numeric.lattice.steps_per_unit", "must be positive"));
    }
    Ok(ChainSettings { space: l.space, params, steps_per_unit: l.steps_per_unit })
}

/// One numeric acceptance check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub pass: bool,
}

impl Check {
    fn at_most(name: &str, value: f64, limit: f64) -> Self {
        Self { name: name.into(), value, limit, pass: value <= limit }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub label: String,
    pub criteria: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub kind: ExperimentKind,
    pub out_dir: PathBuf,
    pub files: Vec<ManifestEntry>,
    pub checks: Vec<Check>,
}

impl RunOutcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

struct Emitter<'a> {
    dir: &'a Path,
    criteria: &'static [u32],
    files: Vec<ManifestEntry>,
}

impl Emitter<'_> {
    fn record(&mut self, name: &str, label: &str) -> PathBuf {
        self.files.push(ManifestEntry { file: name.into(), label: label.into(), criteria: self.criteria.to_vec() });
        self.dir.join(name)
    }

    fn json(&mut self, name: &str, label: &str, value: &impl Serialize) -> Result<()> {
        let path = self.record(name, label);
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut out, value)?;
        writeln!(out)?;
        out.flush()?;
        Ok(())
    }

    fn csv(&mut self, name: &str, label: &str, header: &str, rows: impl IntoIterator<Item = Vec<f64>>) -> Result<()> {
        let path = self.record(name, label);
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{header}")?;
        for row in rows {
            let cells: Vec<String> = row.iter().map(f64::to_string).collect();
            writeln!(out, "{}", cells.join(","))?;
        }
        out.flush()?;
        Ok(())
    }

    fn curve(&mut self, name: &str, label: &str, curve: &CovariationCurve) -> Result<()> {
        let path = self.record(name, label);
        let mut out = BufWriter::new(File::create(path)?);
        curve.write_csv(&mut out)?;
        out.flush()?;
        Ok(())
    }
}

/// Validates the config without running it.
pub fn validate_config(cfg: &ExperimentConfig) -> Result<()> {
    prepare(cfg).map(|_| ())
}

/// Runs one experiment into `out`, returning the manifest entries and checks.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutcome> {
    let prep = prepare(cfg)?;
    std::fs::create_dir_all(out)?;
    let mut em = Emitter { dir: out, criteria: cfg.kind.criteria(), files: Vec::new() };
    let checks = match cfg.kind {
        ExperimentKind::QvSweep => run_qv_sweep(cfg, &prep, &mut em)?,
        ExperimentKind::ChiWindow => run_chi_window(cfg, &prep, &mut em)?,
        ExperimentKind::Fukushima => run_fukushima(cfg, &prep, &mut em)?,
        ExperimentKind::Represent => run_represent(cfg, &prep, &mut em)?,
        ExperimentKind::HedgeMc => run_hedge_mc(cfg, &prep, &mut em)?,
        ExperimentKind::HedgePde => run_hedge_pde(cfg, &prep, &mut em)?,
        ExperimentKind::CrossValidate => run_cross_validate(cfg, &prep, &mut em)?,
        ExperimentKind::Malliavin => run_malliavin(cfg, &prep, &mut em)?,
    };
    em.json("checks.json", "numeric acceptance checks for this run", &checks)?;
    let files = em.files;
    let manifest = json!({
        "kind": cfg.kind,
        "seed": cfg.seed,
        "criteria": cfg.kind.criteria(),
        "files": files,
    });
    let mut w = BufWriter::new(File::create(out.join("manifest.json"))?);
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    writeln!(w)?;
    w.flush()?;
    Ok(RunOutcome { kind: cfg.kind, out_dir: out.to_path_buf(), files, checks })
}

fn paths_for(prep: &Prepared, seed: u64, count: usize) -> Result<Vec<SampledPath>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| scenario_path(&prep.model, prep.x0, &prep.grid, seed, i).map(|(x, _)| x))
        .collect()
}

/// `[X]^ε_t` for `X_s = x0 + μs`, with the path held at `X_T` after `T`.
fn linear_path_bracket(mu: f64, eps: f64, horizon: f64, t: f64) -> f64 {
    let knee = horizon - eps;
    if t <= knee {
        mu * mu * eps * t
    } else {
        mu * mu * (eps * knee + (eps.powi(3) - (horizon - t).powi(3)) / (3.0 * eps))
    }
}

fn run_qv_sweep(cfg: &ExperimentConfig, prep: &Prepared, em: &mut Emitter) -> Result<Vec<Check>> {
    let n = &cfg.numeric;
    let grid = prep.grid;
    let paths = paths_for(prep, cfg.seed, n.seeds)?;
    let deterministic = matches!(prep.model.diffusion, Diffusion::Constant { sigma } if sigma == 0.0);
    let linear_mu = match prep.model.drift {
        Drift::Zero => Some(0.0),
        Drift::Constant { mu } => Some(mu),
        Drift::Linear { .. } => None,
    };
    let mut rows = Vec::new();
    let mut checks = Vec::new();
    for (j, &eps) in n.schedule.iter().enumerate() {
        let curves = paths
            .par_iter()
            .map(|x| epsilon_covariation(x, x, eps))
            .collect::<Result<Vec<_>>>()?;
        let mean = CovariationCurve::mean(&curves)?;
        em.curve(&format!("qv_eps_{j}.csv"), &format!("seed-mean [X]^eps at eps = {eps}"), &mean)?;
        let oracle = match (deterministic, linear_mu, prep.model.diffusion) {
            (true, Some(mu), _) => Some(CovariationCurve::exact(grid, |t| linear_path_bracket(mu, eps, grid.horizon(), t))?),
            (false, _, Diffusion::Constant { sigma }) => Some(CovariationCurve::exact(grid, |t| sigma * sigma * t)?),
            _ => None,
        };
        let sup_error = oracle.as_ref().map(|o| mean.sup_distance(o)).transpose()?;
        let final_error = oracle.as_ref().map(|o| (mean.last() - o.last()).abs());
        rows.push(json!({
            "epsilon": eps,
            "final_mean": mean.last(),
            "sup_error": sup_error,
            "final_error": final_error,
        }));
        if j + 1 == n.schedule.len() {
            if let Some(o) = &oracle {
                if deterministic {
                    checks.push(Check::at_most("sup |[X]^eps - closed form|", sup_error.unwrap(), n.tolerance.unwrap_or(1e-6)));
                } else {
                    let rel = final_error.unwrap() / o.last().abs().max(f64::MIN_POSITIVE);
                    checks.push(Check::at_most("relative error of mean [X]^eps at T", rel, n.tolerance.unwrap_or(0.03)));
                }
            }
        }
    }
    let oracle_name = if deterministic { "closed-form bracket of a linear path" } else { "sigma^2 t" };
    em.json("summary.json", "epsilon sweep of the bracket against its oracle", &json!({ "oracle": oracle_name, "sweep": rows }))?;
    Ok(checks)
}

fn run_chi_window(cfg: &ExperimentConfig, prep: &Prepared, em: &mut Emitter) -> Result<Vec<Check>> {
    let n = &cfg.numeric;
    let mu = build_measure(n.measure.as_ref().unwrap(), &prep.grid)?;
    let paths = paths_for(prep, cfg.seed, n.seeds)?;
    let mut rows = Vec::new();
    let mut last = 0.0;
    for (j, &eps) in n.schedule.iter().enumerate() {
        let pairs = paths
            .par_iter()
            .map(|x| {
                let direct = chi_cov_direct(x, x, &mu, eps)?;
                let closed = chi_cov_closed(&LaggedBrackets::estimate(x, x, mu.anchors(), eps)?, &mu)?;
                Ok((direct, closed))
            })
            .collect::<Result<Vec<_>>>()?;
        let (direct, closed): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let direct = CovariationCurve::mean(&direct)?;
        let closed = CovariationCurve::mean(&closed)?;
        em.curve(&format!("chi_direct_eps_{j}.csv"), &format!("seed-mean direct chi-covariation at eps = {eps}"), &direct)?;
        em.curve(&format!("chi_closed_eps_{j}.csv"), &format!("seed-mean closed-form chi-covariation at eps = {eps}"), &closed)?;
        last = direct.sup_distance(&closed)?;
        rows.push(json!({ "epsilon": eps, "sup_discrepancy": last, "direct_final": direct.last(), "closed_final": closed.last() }));
    }
    let limit = n.tolerance.unwrap_or(0.05);
    em.json("summary.json", "direct against closed-form chi-covariation", &json!({ "sweep": rows, "atoms_only": mu.is_atoms_only() }))?;
    Ok(vec![Check::at_most("sup |direct - closed| at the smallest eps", last, limit)])
}

/// `X` minus its left-point drift integral.
fn martingale_driver(model: &SdeModel, x: &SampledPath) -> Result<SampledPath> {
    let grid = *x.grid();
    let v = x.values();
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(v.len());
    out.push(v[0]);
    for k in 0..grid.steps() {
        acc += model.drift(grid.node(k), v[k]) * grid.dt();
        out.push(v[k + 1] - acc);
    }
    SampledPath::new(grid, out)
}

fn run_fukushima(cfg: &ExperimentConfig, prep: &Prepared, em: &mut Emitter) -> Result<Vec<Check>> {
    let n = &cfg.numeric;
    let grid = prep.grid;
    let block = cfg.functional.as_ref().unwrap();
    let (_, f) = build_functional_lags(block, &grid)?;
    let paths = paths_for(prep, cfg.seed, n.seeds)?;
    let eps_last = *n.schedule.last().unwrap();
    let sigma_const = match prep.model.diffusion {
        Diffusion::Constant { sigma } => Some(sigma),
        _ => None,
    };
    struct PerSeed {
        additive: bool,
        estimated: CovariationCurve,
        predicted: CovariationCurve,
        cross: CovariationCurve,
        ortho: Vec<f64>,
        ito_sup: f64,
    }
    let results = paths
        .par_iter()
        .map(|x| {
            let m = martingale_driver(&prep.model, x)?;
            let bracket = match sigma_const {
                Some(s) => CovariationCurve::exact(grid, |t| s * s * t)?,
                None => epsilon_covariation(x, x, grid.dt())?,
            };
            let r = decompose(&f, x, &m, &bracket, std::slice::from_ref(&m), &n.schedule, n.threshold)?;
            let cross = epsilon_covariation(&r.remainder, &m, eps_last)?;
            let ito_sup = (0..grid.len())
                .map(|k| (r.martingale_part.values()[k] - (x.values()[k].powi(2) - grid.node(k))).abs())
                .fold(0.0, f64::max);
            Ok(PerSeed {
                additive: r.is_additive(),
                estimated: r.diagnostics.remainder_bracket.estimated.clone(),
                predicted: r.diagnostics.remainder_bracket.predicted.clone(),
                cross,
                ortho: r.diagnostics.orthogonality[0].sup_norms.clone(),
                ito_sup,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    // one full bundle for the first path
    let first = {
        let x = &paths[0];
        let m = martingale_driver(&prep.model, x)?;
        let bracket = match sigma_const {
            Some(s) => CovariationCurve::exact(grid, |t| s * s * t)?,
            None => epsilon_covariation(x, x, grid.dt())?,
        };
        decompose(&f, x, &m, &bracket, std::slice::from_ref(&m), &n.schedule, n.threshold)?
    };
    let bundle_dir = em.dir.join("path_0");
    for p in first.write_bundle(&bundle_dir)? {
        let name = format!("path_0/{}", p.file_name().unwrap().to_string_lossy());
        let label = match p.file_name().unwrap().to_string_lossy().as_ref() {
            "transformed.csv" => "F(t, X_t(.)) on the first path",
            "martingale_part.csv" => "martingale part of the decomposition on the first path",
            "remainder.csv" => "orthogonal remainder on the first path",
            _ => "orthogonality and remainder-bracket diagnostics on the first path",
        };
        em.record(&name, label);
    }
    let estimated = CovariationCurve::mean(&results.iter().map(|r| r.estimated.clone()).collect::<Vec<_>>())?;
    let predicted = CovariationCurve::mean(&results.iter().map(|r| r.predicted.clone()).collect::<Vec<_>>())?;
    let cross = CovariationCurve::mean(&results.iter().map(|r| r.cross.clone()).collect::<Vec<_>>())?;
    em.curve("remainder_bracket_estimated.csv", "seed-mean [A]^eps at the smallest eps", &estimated)?;
    em.curve("remainder_bracket_predicted.csv", "[A] predicted from the derivative atoms", &predicted)?;
    em.curve("remainder_cross_bracket.csv", "seed-mean [A, M]^eps at the smallest eps", &cross)?;
    let additive = results.iter().all(|r| r.additive);
    let bracket_gap = estimated.sup_distance(&predicted)?;
    let cross_sup = cross.sup_norm();
    let ortho_mean: Vec<f64> = (0..n.schedule.len())
        .map(|j| results.iter().map(|r| r.ortho[j]).sum::<f64>() / results.len() as f64)
        .collect();
    let ito = matches!(block.spec, FunctionalSpec::Square { lag } if lag == 0.0) && prep.model.is_brownian() && prep.x0 == 0.0;
    let ito_rms = ito.then(|| (results.iter().map(|r| r.ito_sup.powi(2)).sum::<f64>() / results.len() as f64).sqrt());
    let tol = n.tolerance.unwrap_or(0.05);
    let mut checks = vec![
        Check { name: "transformed = martingale part + remainder at every node".into(), value: f64::from(u8::from(additive)), limit: 1.0, pass: additive },
        Check::at_most("sup |[A]^eps - predicted [A]|", bracket_gap, tol),
        Check::at_most("sup |[A, M]^eps|", cross_sup, tol),
    ];
    if let Some(rms) = ito_rms {
        checks.push(Check::at_most("RMS sup |M - (W^2 - t)|", rms, 3.0 * grid.dt().sqrt() * ITO_CONSTANT));
    }
    em.json(
        "summary.json",
        "decomposition diagnostics against the predicted remainder bracket",
        &json!({
            "additive": additive,
            "remainder_bracket_sup_gap": bracket_gap,
            "cross_bracket_sup": cross_sup,
            "orthogonality_schedule": n.schedule,
            "orthogonality_mean_sup": ortho_mean,
            "ito_rms_sup_error": ito_rms,
        }),
    )?;
    Ok(checks)
}

fn full_lags(grid: &TimeGrid) -> Result<LagGrid> {
    LagGrid::from_steps(grid.dt(), grid.steps())
}

fn start_window(prep: &Prepared, seed: u64, s: f64) -> Result<WindowSlice> {
    let lags = full_lags(&prep.grid)?;
    let ks = prep.grid.node_index(s).ok_or_else(|| config_error("numeric.s", "not a grid node"))?;
    let (x, _) = scenario_path(&prep.model, prep.x0, &prep.grid, seed, 0)?;
    Ok(window_at_node(&x, ks, &lags))
}

fn measure_rows(mean: &DaL2Measure, se: Option<&DaL2Measure>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let anchors = mean.anchors();
    let atoms = (0..anchors.len())
        .map(|i| vec![anchors.lag(i), mean.atoms()[i], se.map_or(0.0, |s| s.atoms()[i])])
        .collect();
    let density = mean
        .lag_grid()
        .lags()
        .into_iter()
        .enumerate()
        .map(|(j, y)| vec![y, mean.density()[j], se.map_or(0.0, |s| s.density()[j])])
        .collect();
    (atoms, density)
}

fn run_represent(cfg: &ExperimentConfig, prep: &Prepared, em: &mut Emitter) -> Result<Vec<Check>> {
    let n = &cfg.numeric;
    let payoff = build_payoff(cfg.payoff.as_ref().unwrap(), &prep.grid)?;
    let eta = start_window(prep, cfg.seed, n.s)?;
    let u = estimate_u(&payoff, &prep.model, n.s, &eta, n.n_paths, cfg.seed)?;
    let d0 = estimate_delta0(&payoff, &prep.model, n.s, &eta, n.n_paths, cfg.seed)?;
    let perp = estimate_perp(&payoff, &prep.model, n.s, &eta, n.n_paths, cfg.seed)?;
    let (atoms, density) = measure_rows(&perp.mean, Some(&perp.stderr));
    em.csv("perp_atoms.csv", "atoms of the lag part of the derivative", "lag,mean,stderr", atoms)?;
    em.csv("perp_density.csv", "density of the lag part of the derivative", "lag,mean,stderr", density)?;
    let lags = *eta.lags();
    let bump_seed = derive_seed(cfg.seed, BUMP_TAG);
    let mut rows = Vec::with_capacity(n.bumps);
    let mut worst: f64 = 0.0;
    for b in 0..n.bumps {
        let h = WindowSlice::new(lags, standard_normal_row(bump_seed, b as u64, lags.len()))?;
        let exact = directional_derivative(&payoff, &prep.model, n.s, &eta, &h, n.n_paths, cfg.seed)?;
        let fd = fd_directional(&payoff, &prep.model, n.s, &eta, &h, n.delta, n.n_paths, cfg.seed)?;
        let tol = 3.0 * (exact.stderr.powi(2) + fd.stderr.powi(2)).sqrt() + FD_SLACK * n.delta * n.delta;
        let gap = (exact.value - fd.value).abs();
        worst = worst.max(gap / tol);
        rows.push(vec![b as f64, exact.value, exact.stderr, fd.value, fd.stderr, gap, tol]);
    }
    em.csv(
        "bumps.csv",
        "reconstructed directional derivative against common-random-number central differences",
        "bump,directional,directional_stderr,fd,fd_stderr,gap,tolerance",
        rows,
    )?;
    em.json(
        "summary.json",
        "value, present-time derivative and lag derivative at the start state",
        &json!({ "s": n.s, "u": u, "delta0": d0, "worst_gap_over_tolerance": worst }),
    )?;
    Ok(vec![Check::at_most("max gap / (3 stderr + c delta^2) over bumps", worst, 1.0)])
}

fn hedge_rows(results: &[HedgeResult]) -> Vec<Vec<f64>> {
    results
        .iter()
        .map(|r| {
            vec![
                r.scenario.map_or(f64::NAN, |s| s as f64),
                r.initial_value,
                r.initial_stderr,
                r.gains,
                r.payoff,
                r.replication_error,
                f64::from(u8::from(r.clamped)),
            ]
        })
        .collect()
}

const HEDGE_HEADER: &str = "scenario,initial_value,initial_stderr,gains,payoff,replication_error,clamped";

fn run_hedge_mc(cfg: &ExperimentConfig, prep: &Prepared, em: &mut Emitter) -> Result<Vec<Check>> {
    let n = &cfg.numeric;
    let payoff = build_payoff(cfg.payoff.as_ref().unwrap(), &prep.grid)?;
    let mut rms = Vec::new();
    for level in 0..n.refinements {
        let stride = n.rebalance_stride >> level;
        let inner = n.inner_n << (2 * level);
        let results = (0..n.seeds as u64)
            .map(|sc| replicate(&payoff, &prep.model, prep.x0, sc, stride, inner, cfg.seed))
            .collect::<Result<Vec<_>>>()?;
        em.csv(
            &format!("hedge_level_{level}.csv"),
            &format!("replication per scenario with stride {stride} and {inner} inner paths"),
            HEDGE_HEADER,
            hedge_rows(&results),
        )?;
        let path = em.record(&format!("strategy_level_{level}.csv"), "hedge ratios along the first scenario");
        results[0].write_strategy_csv(BufWriter::new(File::create(path)?))?;
        rms.push(json!({ "level": level, "stride": stride, "inner_n": inner, "rms_error": rms_error(&results) }));
    }
    let values: Vec<f64> = rms.iter().map(|r| r["rms_error"].as_f64().unwrap_or(f64::NAN)).collect();
    let decreasing = values.windows(2).all(|w| w[1] < w[0]);
    em.json("summary.json", "replication error across refinement levels", &json!({ "levels": rms }))?;
    Ok(vec![Check {
        name: "RMS replication error strictly decreases".into(),
        value: f64::from(u8::from(decreasing)),
        limit: 1.0,
        pass: decreasing,
    }])
}

fn chain_inputs(cfg: &ExperimentConfig) -> (Vec<f64>, SmoothMap) {
    match cfg.payoff.as_ref() {
        Some(PayoffSpec::Discrete { anchors, map }) => (anchors.clone(), map.clone()),
        _ => unreachable!("checked in prepare"),
    }
}

/// Closed-form price when the run is a zero-rate Black–Scholes call.
fn black_scholes_reference(cfg: &ExperimentConfig, prep: &Prepared) -> Option<f64> {
    let (anchors, map) = chain_inputs(cfg);
    match (prep.model.diffusion, prep.model.drift, map) {
        (Diffusion::Affine { sigma }, Drift::Zero, SmoothMap::SmoothedCall { index: 0, strike, .. }) if anchors.len() == 1 => {
            Some(black_scholes_call(prep.x0, strike, sigma, anchors[0]))
        }
        _ => None,
    }
}

fn run_hedge_pde(cfg: &ExperimentConfig, prep: &Prepared, em: &mut Emitter) -> Result<Vec<Check>> {
    let n = &cfg.numeric;
    let (anchors, map) = chain_inputs(cfg);
    let settings = chain_settings(cfg)?;
    let sol = solve_chain(&map, &prep.model, &anchors, &settings).at("numeric.lattice")?;
    for p in sol.save(&em.dir.join("chain"))? {
        let file = p.file_name().unwrap().to_string_lossy().into_owned();
        let label = if file == "chain.json" { "PDE chain metadata" } else { "PDE chain values on one interval" };
        em.record(&format!("chain/{file}"), label);
    }
    let price = sol.value(0, &[], 0.0, prep.x0)?;
    let reference = n.reference.or_else(|| black_scholes_reference(cfg, prep));
    let results = (0..n.seeds as u64)
        .into_par_iter()
        .map(|sc| {
            let (x, _) = scenario_path(&prep.model, prep.x0, &prep.grid, cfg.seed, sc)?;
            let mut r = hedge_from_chain(&sol, &x)?;
            r.scenario = Some(sc);
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    em.csv("hedge_pde.csv", "replication per scenario with the PDE hedge ratio", HEDGE_HEADER, hedge_rows(&results))?;
    let path = em.record("strategy_pde.csv", "PDE hedge ratios along the first scenario");
    results[0].write_strategy_csv(BufWriter::new(File::create(path)?))?;
    let rel = reference.map(|r| ((price.value - r) / r).abs());
    em.json(
        "summary.json",
        "PDE price, closed-form reference and replication error",
        &json!({
            "price": price.value,
            "price_clamped": price.clamped,
            "reference": reference,
            "relative_error": rel,
            "rms_replication_error": rms_error(&results),
            "matching_residuals": sol.matching_residuals(),
            "warnings": sol.warnings(),
        }),
    )?;
    Ok(rel.map(|r| Check::at_most("relative price error against the reference", r, n.tolerance.unwrap_or(0.01))).into_iter().collect())
}

/// Off-anchor probe nodes, one per scenario.
pub fn probe_nodes(grid: &TimeGrid, anchors: &[f64], seed: u64, count: usize) -> Vec<usize> {
    let m = grid.steps() as u64;
    let anchor_nodes: Vec<usize> = anchors.iter().filter_map(|&a| grid.node_index(a)).collect();
    (0..count as u64)
        .map(|p| {
            let mut k = 1 + (derive_seed(seed, PROBE_TAG ^ p) % (m - 1)) as usize;
            while anchor_nodes.contains(&k) {
                k = if k + 1 < m as usize { k + 1 } else { 1 };
            }
            k
        })
        .collect()
}

fn run_cross_validate(cfg: &ExperimentConfig, prep: &Prepared, em: &mut Emitter) -> Result<Vec<Check>> {
    let n = &cfg.numeric;
    let (anchors, map) = chain_inputs(cfg);
    let settings = chain_settings(cfg)?;
    let sol = solve_chain(&map, &prep.model, &anchors, &settings).at("numeric.lattice")?;
    let payoff = build_payoff(cfg.payoff.as_ref().unwrap(), &prep.grid)?;
    let lags = full_lags(&prep.grid)?;
    let nodes = probe_nodes(&prep.grid, &anchors, cfg.seed, n.probes);
    let probes = nodes
        .iter()
        .enumerate()
        .map(|(p, &k)| {
            let (x, _) = scenario_path(&prep.model, prep.x0, &prep.grid, cfg.seed, p as u64)?;
            Ok((prep.grid.node(k), window_at_node(&x, k, &lags)))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = cross_validate(&sol, &payoff, &prep.model, &probes, n.inner_n, derive_seed(cfg.seed, CROSS_TAG))?;
    let rows = report.probes.iter().map(|p| {
        vec![p.s, p.y, p.mc.value, p.mc.stderr, p.pde, p.allowance, p.z, f64::from(u8::from(p.clamped))]
    });
    em.csv("probes.csv", "Monte-Carlo present-time derivative against the PDE gradient", "s,y,mc,mc_stderr,pde,allowance,z,clamped", rows)?;
    let price = sol.value(0, &[], 0.0, prep.x0)?;
    em.json(
        "summary.json",
        "cross-validation of the two representation engines",
        &json!({
            "max_abs_z": report.max_abs_z,
            "price": price.value,
            "reference": n.reference.or_else(|| black_scholes_reference(cfg, prep)),
            "warnings": sol.warnings(),
            "probes": report.probes,
        }),
    )?;
    Ok(vec![Check::at_most("max |z| over probes", report.max_abs_z, n.tolerance.unwrap_or(3.0))])
}

fn run_malliavin(cfg: &ExperimentConfig, prep: &Prepared, em: &mut Emitter) -> Result<Vec<Check>> {
    let n = &cfg.numeric;
    let payoff = build_payoff(cfg.payoff.as_ref().unwrap(), &prep.grid)?;
    let eta = WindowSlice::constant(full_lags(&prep.grid)?, prep.x0);
    match malliavin_derivatives(&payoff, n.s, &eta, n.n_paths, cfg.seed) {
        Ok(r) => {
            let (atoms, density) = measure_rows(&r.perp, None);
            em.csv("perp_atoms.csv", "atoms of the lag derivative from integration by parts", "lag,mean,stderr", atoms)?;
            em.csv("perp_density.csv", "density of the lag derivative from integration by parts", "lag,mean,stderr", density)?;
            em.json("summary.json", "integration-by-parts derivative estimates", &json!({ "flag": Value::Null, "result": r, "reference": n.reference }))?;
            Ok(n
                .reference
                .map(|reference| {
                    let z = (r.delta0.value - reference).abs() / r.delta0.stderr.max(f64::MIN_POSITIVE);
                    Check::at_most("|delta0 - reference| / stderr", z, 3.0)
                })
                .into_iter()
                .collect())
        }
        Err(Error::DegenerateDenominator(msg)) => {
            em.json("summary.json", "integration-by-parts derivative estimates", &json!({ "flag": "degenerate_denominator", "message": msg }))?;
            Ok(vec![Check { name: "non-degenerate weight".into(), value: 0.0, limit: 1.0, pass: false }])
        }
        Err(e) => Err(e),
    }
}

#[derive(Debug, Parser)]
#[command(name = "chivar", version, about = "Regularization covariations and path-dependent representation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run an experiment config.
    Run {
        config: PathBuf,
        /// Output directory (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed (overrides the config).
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads.
        #[arg(long)]
        threads: Option<usize>,
        /// Exit with status 1 when a numeric check fails.
        #[arg(long)]
        assert: bool,
    },
    /// Check a config without running it.
    Validate { config: PathBuf },
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_ASSERT: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

fn error_report(e: &Error) -> Value {
    match e {
        Error::Config { field, message } => json!({ "status": "config_error", "field": field, "message": message }),
        other => json!({ "status": "error", "field": Value::Null, "message": other.to_string() }),
    }
}

fn report_error(e: &Error, out: Option<&Path>) {
    let report = error_report(e);
    if let Some(dir) = out {
        if std::fs::create_dir_all(dir).is_ok() {
            if let Ok(f) = File::create(dir.join("error.json")) {
                let mut w = BufWriter::new(f);
                let _ = serde_json::to_writer_pretty(&mut w, &report);
                let _ = writeln!(w);
            }
        }
    }
    eprintln!("{report}");
}

/// Entry point for the binary; returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match cli.command {
        Command::Validate { config } => match load_config(&config).and_then(|c| validate_config(&c)) {
            Ok(()) => {
                println!("{}", json!({ "status": "ok" }));
                EXIT_OK
            }
            Err(e) => {
                report_error(&e, None);
                EXIT_CONFIG
            }
        },
        Command::Run { config, out, seed, threads, assert } => {
            let mut cfg = match load_config(&config) {
                Ok(c) => c,
                Err(e) => {
                    report_error(&e, out.as_deref());
                    return EXIT_CONFIG;
                }
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let dir = out.or_else(|| cfg.output.clone()).unwrap_or_else(|| PathBuf::from("chivar-out"));
            let run = || run_experiment(&cfg, &dir);
            let result = match threads {
                Some(0) => Err(config_error("--threads", "must be positive")),
                Some(t) => match rayon::ThreadPoolBuilder::new().num_threads(t).build() {
                    Ok(pool) => pool.install(run),
                    Err(e) => Err(config_error("--threads", e)),
                },
                None => run(),
            };
            match result {
                Ok(outcome) => {
                    for c in &outcome.checks {
                        println!("{} {}: {} (limit {})", if c.pass { "PASS" } else { "FAIL" }, c.name, c.value, c.limit);
                    }
                    println!("wrote {} files to {}", outcome.files.len() + 1, dir.display());
                    if assert && !outcome.passed() {
                        EXIT_ASSERT
                    } else {
                        EXIT_OK
                    }
                }
                Err(e) => {
                    report_error(&e, Some(&dir));
                    EXIT_CONFIG
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(kind: &str) -> String {
        format!(r#"{{"kind":"{kind}","grid":{{"horizon":1.0,"steps":64}},"numeric":{{"schedule":[0.25,0.125],"seeds":4}}}}"#)
    }

    #[test]
    fn parses_minimal_config() {
        let c = parse_config(&base("qv-sweep")).unwrap();
        assert_eq!(c.kind, ExperimentKind::QvSweep);
        assert_eq!(c.numeric.n_paths, 4096);
        validate_config(&c).unwrap();
    }

    #[test]
    fn errors_name_the_field() {
        let field = |text: &str| match parse_config(text).and_then(|c| validate_config(&c)) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("{other:?}"),
        };
        assert_eq!(field(r#"{"grid":{"horizon":1.0,"steps":8}}"#), "kind");
        assert_eq!(field(r#"{"kind":"qv-sweep","grid":{"horizon":1.0,"steps":"x"}}"#), "grid.steps");
        assert_eq!(field(r#"{"kind":"qv-sweep","grid":{"horizon":1.0,"steps":8},"bogus":1}"#), "bogus");
        assert_eq!(field(&base("qv-sweep").replace("0.125", "0.1")), "numeric.schedule");
        let off_grid = r#"{"kind":"represent","grid":{"horizon":1.0,"steps":8},
            "payoff":{"kind":"discrete","anchors":[0.3,1.0],"map":{"name":"product","indices":[0,1]}}}"#;
        assert_eq!(field(off_grid), "payoff.anchors");
        let model = r#"{"kind":"qv-sweep","grid":{"horizon":1.0,"steps":8},"model":{"name":"geometric"},"numeric":{"schedule":[0.5]}}"#;
        assert_eq!(field(model), "model.params.sigma");
    }

    #[test]
    fn linear_path_closed_form() {
        assert!((linear_path_bracket(1.0, 0.1, 1.0, 1.0) - (0.09 + 0.001 / 0.3)).abs() < 1e-15);
        assert_eq!(linear_path_bracket(2.0, 0.1, 1.0, 0.5), 4.0 * 0.1 * 0.5);
    }

    #[test]
    fn probe_nodes_avoid_anchors() {
        let g = TimeGrid::new(1.0, 8).unwrap();
        let nodes = probe_nodes(&g, &[0.5, 1.0], 3, 50);
        assert!(nodes.iter().all(|&k| (1..8).contains(&k) && k != 4));
    }

    #[test]
    fn qv_sweep_runs_and_is_reproducible() {
        let cfg = parse_config(&base("qv-sweep")).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = run_experiment(&cfg, a.path()).unwrap();
        run_experiment(&cfg, b.path()).unwrap();
        for e in &ra.files {
            assert_eq!(std::fs::read(a.path().join(&e.file)).unwrap(), std::fs::read(b.path().join(&e.file)).unwrap());
        }
        assert!(a.path().join("manifest.json").exists());
    }
}
