//! Backward PDE chain for `f(X_{a_1}, …, X_{a_N})`: on `[a_{i-1}, a_i]` the
//! function `ν^i(y_1, …, y_{i-1}; s, y)` solves
//! `∂_s ν + ½σ²∂²_y ν + b ∂_y ν = 0` with terminal data obtained from
//! `ν^{i+1}` by the substitution `y_i := y`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{invalid, Error, Result};
use crate::flow::SdeModel;
use crate::maps::SmoothMap;
use crate::paths::{SampledPath, WindowSlice};
use crate::representation::{estimate_delta0, HedgeResult, MCEstimate, PathPayoff, PayoffSpec, StrategyPoint};
use crate::rng::derive_seed;

/// Largest supported number of anchors.
pub const MAX_ANCHORS: usize = 3;

/// Floor for the cross-validation scheme allowance.
pub const ALLOWANCE_FLOOR: f64 = 1e-4;

/// Uniform lattice `lower + j·h`, `j = 0..points`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatticeSpec {
    pub lower: f64,
    pub upper: f64,
    pub points: usize,
}

impl LatticeSpec {
    fn validate(&self, what: &str, min_points: usize) -> Result<()> {
        if !(self.upper > self.lower) || !self.lower.is_finite() || !self.upper.is_finite() {
            return invalid(format!("{what} lattice needs lower < upper"));
        }
        if self.points < min_points {
            return invalid(format!("{what} lattice needs at least {min_points} points"));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        (self.upper - self.lower) / (self.points - 1) as f64
    }

    pub fn node(&self, j: usize) -> f64 {
        if j + 1 == self.points {
            self.upper
        } else {
            self.lower + j as f64 * self.step()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.points).map(|j| self.node(j)).collect()
    }

    /// Cell index and weight of `x`, clamped to the lattice; the flag is set
    /// when clamping happened.
    fn locate(&self, x: f64) -> (usize, f64, bool) {
        let q = (x - self.lower) / self.step();
        let last = self.points - 2;
        if q < 0.0 {
            (0, 0.0, true)
        } else if q > (self.points - 1) as f64 {
            (last, 1.0, true)
        } else {
            let k = (q.floor() as usize).min(last);
            (k, q - k as f64, false)
        }
    }
}

/// Numerical settings for [`solve_chain`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainSettings {
    pub space: LatticeSpec,
    /// Lattice for each frozen coordinate `y_1, …, y_{N-1}`.
    pub params: LatticeSpec,
    /// Time steps per unit time; each interval gets at least one.
    pub steps_per_unit: usize,
}

/// One interval's samples, laid out as `[combo][time][y]`.
#[derive(Debug, Clone, PartialEq)]
struct Level {
    times: Vec<f64>,
    values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ChainMeta {
    anchors: Vec<f64>,
    map: SmoothMap,
    model: SdeModel,
    settings: ChainSettings,
    scheme: String,
    times: Vec<Vec<f64>>,
    matching_residuals: Vec<f64>,
    warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainSolution {
    meta: ChainMeta,
    levels: Vec<Level>,
}

const SCHEME: &str = "crank-nicolson theta=0.5, two implicit-Euler half steps after each terminal slice, linear boundary extrapolation";

/// Tridiagonal solve; `a[0]` and `c[n-1]` are ignored.
fn thomas(a: &[f64], b: &[f64], c: &[f64], d: &mut [f64], scratch: &mut [f64]) {
    let n = d.len();
    scratch[0] = c[0] / b[0];
    d[0] /= b[0];
    for i in 1..n {
        let m = b[i] - a[i] * scratch[i - 1];
        scratch[i] = if i + 1 < n { c[i] / m } else { 0.0 };
        d[i] = (d[i] - a[i] * d[i - 1]) / m;
    }
    for i in (0..n - 1).rev() {
        d[i] -= scratch[i] * d[i + 1];
    }
}

/// Backward θ-step from `later` (time `t1`) to `earlier` (time `t0`).
fn theta_step(model: &SdeModel, ys: &[f64], h: f64, later: &[f64], t0: f64, t1: f64, theta: f64, out: &mut [f64]) {
    let n = ys.len();
    let dtau = t1 - t0;
    let coeffs = |t: f64, y: f64| {
        let s = model.sigma(t, y);
        let alpha = 0.5 * (s * s).max(0.0) / (h * h);
        let beta = model.drift(t, y) / (2.0 * h);
        (alpha - beta, -2.0 * alpha, alpha + beta)
    };
    let m = n - 2;
    let mut a = vec![0.0; m];
    let mut b = vec![0.0; m];
    let mut c = vec![0.0; m];
    let mut d = vec![0.0; m];
    for r in 0..m {
        let j = r + 1;
        let (l1, l0, u1) = coeffs(t1, ys[j]);
        let explicit = later[j] + (1.0 - theta) * dtau * (l1 * later[j - 1] + l0 * later[j] + u1 * later[j + 1]);
        let (l1, l0, u1) = coeffs(t0, ys[j]);
        a[r] = -theta * dtau * l1;
        b[r] = 1.0 - theta * dtau * l0;
        c[r] = -theta * dtau * u1;
        d[r] = explicit;
    }
    // ν_0 = 2ν_1 − ν_2 and ν_{n-1} = 2ν_{n-2} − ν_{n-3}
    if m == 1 {
        b[0] += 2.0 * a[0] + 2.0 * c[0];
    } else {
        b[0] += 2.0 * a[0];
        c[0] -= a[0];
        b[m - 1] += 2.0 * c[m - 1];
        a[m - 1] -= c[m - 1];
    }
    let mut scratch = vec![0.0; m];
    thomas(&a, &b, &c, &mut d, &mut scratch);
    out[1..n - 1].copy_from_slice(&d);
    out[0] = 2.0 * out[1] - out[2];
    out[n - 1] = 2.0 * out[n - 2] - out[n - 3];
}

/// Solves one column backward from `terminal` over `times` (increasing);
/// returns `times.len() × ys.len()` samples.
fn solve_column(model: &SdeModel, ys: &[f64], h: f64, times: &[f64], terminal: Vec<f64>) -> Vec<f64> {
    let ny = ys.len();
    let nt = times.len();
    let mut out = vec![0.0; nt * ny];
    out[(nt - 1) * ny..].copy_from_slice(&terminal);
    let mut later = terminal;
    let mut earlier = vec![0.0; ny];
    for n in (0..nt - 1).rev() {
        let (t0, t1) = (times[n], times[n + 1]);
        if n == nt - 2 {
            let mid = 0.5 * (t0 + t1);
            let mut half = vec![0.0; ny];
            theta_step(model, ys, h, &later, mid, t1, 1.0, &mut half);
            theta_step(model, ys, h, &half, t0, mid, 1.0, &mut earlier);
        } else {
            theta_step(model, ys, h, &later, t0, t1, 0.5, &mut earlier);
        }
        out[n * ny..(n + 1) * ny].copy_from_slice(&earlier);
        std::mem::swap(&mut later, &mut earlier);
    }
    out
}

fn interval_times(a: f64, b: f64, steps_per_unit: usize) -> Vec<f64> {
    let n = (((b - a) * steps_per_unit as f64) - 1e-9).ceil().max(1.0) as usize;
    (0..=n).map(|k| if k == n { b } else { a + (b - a) * k as f64 / n as f64 }).collect()
}

/// Solves the chain `ν^N, …, ν^1` for `f(y_1, …, y_N)` at the given anchors.
pub fn solve_chain(map: &SmoothMap, model: &SdeModel, anchors: &[f64], settings: &ChainSettings) -> Result<ChainSolution> {
    let n_anchors = anchors.len();
    if n_anchors == 0 {
        return invalid("the chain needs at least one anchor");
    }
    if n_anchors > MAX_ANCHORS {
        return Err(Error::Unsupported(format!("{n_anchors} anchors; the PDE chain supports at most {MAX_ANCHORS}")));
    }
    if !(anchors[0] > 0.0) || anchors.windows(2).any(|w| !(w[1] > w[0])) {
        return invalid("anchors must be increasing and positive");
    }
    map.check_arity(n_anchors)?;
    model.validate()?;
    settings.space.validate("space", 4)?;
    if n_anchors > 1 {
        settings.params.validate("parameter", 2)?;
    }
    if settings.steps_per_unit == 0 {
        return invalid("steps_per_unit must be positive");
    }
    let ys = settings.space.nodes();
    let h = settings.space.step();
    let ny = ys.len();
    let np = settings.params.points;
    let pnodes = settings.params.nodes();
    let mut warnings = Vec::new();
    check_stability(model, &ys, h, &mut warnings);

    let mut levels: Vec<Option<Level>> = vec![None; n_anchors];
    let mut matching_residuals = Vec::new();
    for i in (0..n_anchors).rev() {
        let start = if i == 0 { 0.0 } else { anchors[i - 1] };
        let times = interval_times(start, anchors[i], settings.steps_per_unit);
        let dims = i;
        let combos = np.pow(dims as u32);
        let mut clamped = false;
        let terminals: Vec<Vec<f64>> = (0..combos)
            .map(|c| {
                let params = combo_params(c, dims, np, &pnodes);
                if i + 1 == n_anchors {
                    ys.iter()
                        .map(|&y| {
                            let mut x = params.clone();
                            x.push(y);
                            map.value(&x)
                        })
                        .collect()
                } else {
                    let next = levels[i + 1].as_ref().unwrap();
                    let nt_next = next.times.len();
                    ys.iter()
                        .enumerate()
                        .map(|(j, &y)| {
                            let (k, w, cl) = settings.params.locate(y);
                            clamped |= cl;
                            let stride = np.pow(dims as u32);
                            let lo = c + k * stride;
                            let hi = c + (k + 1) * stride;
                            let at = |combo: usize| next.values[(combo * nt_next) * ny + j];
                            (1.0 - w) * at(lo) + w * at(hi)
                        })
                        .collect()
                }
            })
            .collect();
        if clamped {
            warnings.push(format!("matching slice at a = {} clamped to the parameter lattice", anchors[i]));
        }
        let columns: Vec<Vec<f64>> = terminals
            .into_par_iter()
            .map(|term| solve_column(model, &ys, h, &times, term))
            .collect();
        let values = columns.concat();
        levels[i] = Some(Level { times, values });
    }
    let levels: Vec<Level> = levels.into_iter().map(Option::unwrap).collect();
    let mut sol = ChainSolution {
        meta: ChainMeta {
            anchors: anchors.to_vec(),
            map: map.clone(),
            model: *model,
            settings: *settings,
            scheme: SCHEME.into(),
            times: levels.iter().map(|l| l.times.clone()).collect(),
            matching_residuals: Vec::new(),
            warnings,
        },
        levels,
    };
    for i in 0..n_anchors - 1 {
        matching_residuals.push(sol.matching_residual(i)?);
    }
    sol.meta.matching_residuals = matching_residuals;
    Ok(sol)
}

fn combo_params(c: usize, dims: usize, np: usize, pnodes: &[f64]) -> Vec<f64> {
    let mut rest = c;
    (0..dims)
        .map(|_| {
            let k = rest % np;
            rest /= np;
            pnodes[k]
        })
        .collect()
}

fn check_stability(model: &SdeModel, ys: &[f64], h: f64, warnings: &mut Vec<String>) {
    let mut degenerate = false;
    let mut peclet = false;
    for &y in ys {
        let s2 = model.sigma(0.0, y).powi(2);
        let b = model.drift(0.0, y).abs();
        if s2 == 0.0 {
            degenerate = true;
        } else if b * h / s2 > 1.0 {
            peclet = true;
        }
    }
    if degenerate {
        warnings.push("diffusion vanishes on part of the space lattice".into());
    }
    if peclet {
        warnings.push("cell Péclet number exceeds 1; central differences may oscillate".into());
    }
}

/// Value or gradient query result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Query {
    pub value: f64,
    pub clamped: bool,
}

impl ChainSolution {
    pub fn anchors(&self) -> &[f64] {
        &self.meta.anchors
    }

    pub fn map(&self) -> &SmoothMap {
        &self.meta.map
    }

    pub fn model(&self) -> &SdeModel {
        &self.meta.model
    }

    pub fn settings(&self) -> &ChainSettings {
        &self.meta.settings
    }

    pub fn warnings(&self) -> &[String] {
        &self.meta.warnings
    }

    /// Max lattice gap between `ν^i(a_i, ·)` and the substituted `ν^{i+1}`
    /// slice, per matching anchor.
    pub fn matching_residuals(&self) -> &[f64] {
        &self.meta.matching_residuals
    }

    /// Time nodes of interval `i` (0-based).
    pub fn times(&self, i: usize) -> &[f64] {
        &self.levels[i].times
    }

    /// Interval index for `t`: `t ∈ [a_{i-1}, a_i)`, with `T` in the last.
    pub fn level_of(&self, t: f64) -> Result<usize> {
        let a = &self.meta.anchors;
        if t < -1e-12 || t > a[a.len() - 1] + 1e-12 {
            return invalid(format!("time {t} outside [0, {}]", a[a.len() - 1]));
        }
        Ok(a.iter().position(|&ai| t < ai - 1e-12).unwrap_or(a.len() - 1))
    }

    fn sample(&self, level: usize, combo: usize, tn: usize, j: usize) -> f64 {
        let l = &self.levels[level];
        let ny = self.meta.settings.space.points;
        l.values[(combo * l.times.len() + tn) * ny + j]
    }

    /// Central-difference `∂_y ν` at a space node (one-sided at the ends);
    /// `reach` is the stencil half-width in nodes.
    fn node_gradient(&self, level: usize, combo: usize, tn: usize, j: usize, reach: usize) -> f64 {
        let ny = self.meta.settings.space.points;
        let h = self.meta.settings.space.step();
        let lo = j.saturating_sub(reach);
        let hi = (j + reach).min(ny - 1);
        (self.sample(level, combo, tn, hi) - self.sample(level, combo, tn, lo)) / ((hi - lo) as f64 * h)
    }

    /// Multilinear interpolation over parameters, time and `y` of a node
    /// quantity.
    fn interpolate(&self, level: usize, params: &[f64], t: f64, y: f64, node: impl Fn(usize, usize, usize) -> f64) -> Result<Query> {
        if params.len() != level {
            return invalid(format!("interval {} expects {} frozen coordinates, got {}", level + 1, level, params.len()));
        }
        let settings = &self.meta.settings;
        let times = &self.levels[level].times;
        let mut clamped = false;
        let tn = times.partition_point(|&s| s <= t).clamp(1, times.len() - 1) - 1;
        let wt = ((t - times[tn]) / (times[tn + 1] - times[tn])).clamp(0.0, 1.0);
        let (j, wy, cy) = settings.space.locate(y);
        clamped |= cy;
        let np = settings.params.points;
        let mut cells = Vec::with_capacity(level);
        for &p in params {
            let (k, w, c) = settings.params.locate(p);
            clamped |= c;
            cells.push((k, w));
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << level) {
            let mut combo = 0;
            let mut weight = 1.0;
            let mut stride = 1;
            for (d, &(k, w)) in cells.iter().enumerate() {
                let up = (corner >> d) & 1 == 1;
                combo += (k + usize::from(up)) * stride;
                weight *= if up { w } else { 1.0 - w };
                stride *= np;
            }
            if weight == 0.0 {
                continue;
            }
            let mut v = 0.0;
            for (dt_i, wt_i) in [(0, 1.0 - wt), (1, wt)] {
                if wt_i == 0.0 {
                    continue;
                }
                for (dj, wy_i) in [(0, 1.0 - wy), (1, wy)] {
                    if wy_i != 0.0 {
                        v += wt_i * wy_i * node(combo, tn + dt_i, j + dj);
                    }
                }
            }
            acc += weight * v;
        }
        Ok(Query { value: acc, clamped })
    }

    /// `ν^{level+1}(params; t, y)`.
    pub fn value(&self, level: usize, params: &[f64], t: f64, y: f64) -> Result<Query> {
        self.interpolate(level, params, t, y, |c, tn, j| self.sample(level, c, tn, j))
    }

    /// `∂_y ν^{level+1}(params; t, y)`.
    pub fn gradient(&self, level: usize, params: &[f64], t: f64, y: f64) -> Result<Query> {
        self.interpolate(level, params, t, y, |c, tn, j| self.node_gradient(level, c, tn, j, 1))
    }

    /// The same gradient from a stencil twice as wide.
    fn gradient_wide(&self, level: usize, params: &[f64], t: f64, y: f64) -> Result<Query> {
        self.interpolate(level, params, t, y, |c, tn, j| self.node_gradient(level, c, tn, j, 2))
    }

    fn matching_residual(&self, i: usize) -> Result<f64> {
        let settings = &self.meta.settings;
        let pnodes = settings.params.nodes();
        let combos = settings.params.points.pow(i as u32);
        let t = self.meta.anchors[i];
        let mut worst: f64 = 0.0;
        for c in 0..combos {
            let params = combo_params(c, i, settings.params.points, &pnodes);
            for (j, y) in settings.space.nodes().into_iter().enumerate() {
                let here = self.sample(i, c, self.levels[i].times.len() - 1, j);
                let mut p = params.clone();
                p.push(y);
                let q = self.value(i + 1, &p, t, y)?;
                if !q.clamped {
                    worst = worst.max((here - q.value).abs());
                }
            }
        }
        Ok(worst)
    }

    /// Writes `chain.json` plus `level_<i>.csv` (`p_1..p_{i-1},t,y,value`).
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut files = Vec::new();
        let meta = dir.join("chain.json");
        serde_json::to_writer_pretty(BufWriter::new(File::create(&meta)?), &self.meta)?;
        files.push(meta);
        let settings = &self.meta.settings;
        let ys = settings.space.nodes();
        let pnodes = settings.params.nodes();
        for (i, level) in self.levels.iter().enumerate() {
            let p = dir.join(format!("level_{}.csv", i + 1));
            let mut out = BufWriter::new(File::create(&p)?);
            let mut header: Vec<String> = (1..=i).map(|k| format!("p{k}")).collect();
            header.extend(["t".into(), "y".into(), "value".into()]);
            writeln!(out, "{}", header.join(","))?;
            let combos = settings.params.points.pow(i as u32);
            for c in 0..combos {
                let params = combo_params(c, i, settings.params.points, &pnodes);
                for (tn, &t) in level.times.iter().enumerate() {
                    for (j, &y) in ys.iter().enumerate() {
                        for p in &params {
                            write!(out, "{p},")?;
                        }
                        writeln!(out, "{t},{y},{}", self.sample(i, c, tn, j))?;
                    }
                }
            }
            out.flush()?;
            files.push(p);
        }
        Ok(files)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: ChainMeta = serde_json::from_reader(BufReader::new(File::open(dir.join("chain.json"))?))?;
        let mut levels = Vec::new();
        for (i, times) in meta.times.iter().enumerate() {
            let file = BufReader::new(File::open(dir.join(format!("level_{}.csv", i + 1)))?);
            let mut values = Vec::new();
            for (n, line) in file.lines().enumerate().skip(1) {
                let line = line?;
                let last = line.rsplit(',').next().unwrap_or("");
                values.push(last.trim().parse::<f64>().map_err(|e| Error::Parse(format!("level {} line {}: {e}", i + 1, n + 1)))?);
            }
            let want = meta.settings.params.points.pow(i as u32) * times.len() * meta.settings.space.points;
            if values.len() != want {
                return Err(Error::Parse(format!("level {} has {} samples, expected {want}", i + 1, values.len())));
            }
            levels.push(Level { times: times.clone(), values });
        }
        Ok(Self { meta, levels })
    }

    fn payoff_value(&self, x: &[f64]) -> f64 {
        self.meta.map.value(x)
    }
}

/// Hedge along `scenario` with `ξ_t = ∂_y ν^i(X_{a_1}, …, X_{a_{i-1}}; t, X_t)`
/// for `t ∈ [a_{i-1}, a_i)`, accumulated against `ΔX`.
pub fn hedge_from_chain(sol: &ChainSolution, scenario: &SampledPath) -> Result<HedgeResult> {
    let grid = scenario.grid();
    let anchors = sol.anchors();
    if (grid.horizon() - anchors[anchors.len() - 1]).abs() > 1e-9 * grid.horizon() {
        return invalid("scenario horizon differs from the last anchor");
    }
    let nodes = anchors
        .iter()
        .map(|&a| grid.node_index(a).ok_or_else(|| Error::InvalidArgument(format!("anchor {a} is not a scenario node"))))
        .collect::<Result<Vec<_>>>()?;
    let xv = scenario.values();
    let x_anchor: Vec<f64> = nodes.iter().map(|&m| xv[m]).collect();
    let h0 = sol.value(0, &[], 0.0, xv[0])?;
    let mut clamped = h0.clamped;
    let mut strategy = Vec::with_capacity(grid.steps());
    let mut gains = 0.0;
    for k in 0..grid.steps() {
        let t = grid.node(k);
        let level = nodes.iter().position(|&m| k < m).unwrap_or(nodes.len() - 1);
        let q = sol.gradient(level, &x_anchor[..level], t, xv[k])?;
        clamped |= q.clamped;
        gains += q.value * (xv[k + 1] - xv[k]);
        strategy.push(StrategyPoint { s: t, xi: q.value, stderr: 0.0 });
    }
    let payoff = sol.payoff_value(&x_anchor);
    Ok(HedgeResult {
        scenario: None,
        initial_value: h0.value,
        initial_stderr: 0.0,
        strategy,
        gains,
        payoff,
        replication_error: payoff - h0.value - gains,
        clamped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub s: f64,
    pub y: f64,
    pub frozen: Vec<f64>,
    pub mc: MCEstimate,
    pub pde: f64,
    /// `|∂_y ν|` difference between the h and 2h stencils, floored.
    pub allowance: f64,
    pub z: f64,
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossReport {
    pub probes: Vec<ProbeResult>,
    pub max_abs_z: f64,
}

/// Compares the Monte-Carlo `D^{δ₀}u` with `∂_y ν^i` at probe states.
pub fn cross_validate(
    sol: &ChainSolution,
    payoff: &PathPayoff,
    model: &SdeModel,
    probes: &[(f64, WindowSlice)],
    inner_n: usize,
    seed: u64,
) -> Result<CrossReport> {
    match payoff.spec() {
        PayoffSpec::Discrete { map, .. } if map == sol.map() => {}
        _ => return invalid("payoff must be the discrete payoff the chain was solved for"),
    }
    let anchors = sol.anchors();
    if payoff.anchors().len() != anchors.len() || payoff.anchors().iter().zip(anchors).any(|(a, b)| (a - b).abs() > 1e-9) {
        return invalid("payoff anchors differ from the chain anchors");
    }
    let mut out = Vec::with_capacity(probes.len());
    for (p, (s, eta)) in probes.iter().enumerate() {
        if anchors.iter().any(|&a| (a - s).abs() < 1e-12) || *s < 0.0 {
            return invalid(format!("probe time {s} must be off the anchor set"));
        }
        let level = sol.level_of(*s)?;
        let frozen = anchors[..level].iter().map(|&a| eta.value(a - s)).collect::<Result<Vec<_>>>()?;
        let y = eta.present();
        let mc = estimate_delta0(payoff, model, *s, eta, inner_n, derive_seed(seed, p as u64))?;
        let g = sol.gradient(level, &frozen, *s, y)?;
        let g2 = sol.gradient_wide(level, &frozen, *s, y)?;
        let allowance = (g.value - g2.value).abs().max(ALLOWANCE_FLOOR);
        let z = (mc.value - g.value) / (mc.stderr.powi(2) + allowance.powi(2)).sqrt();
        out.push(ProbeResult { s: *s, y, frozen, mc, pde: g.value, allowance, z, clamped: g.clamped || g2.clamped });
    }
    let max_abs_z = out.iter().map(|p| p.z.abs()).fold(0.0, f64::max);
    Ok(CrossReport { probes: out, max_abs_z })
}

/// Zero-rate Black–Scholes call price.
pub fn black_scholes_call(spot: f64, strike: f64, sigma: f64, maturity: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    let v = sigma * maturity.sqrt();
    if v <= 0.0 {
        return (spot - strike).max(0.0);
    }
    let d1 = ((spot / strike).ln() + 0.5 * v * v) / v;
    spot * n.cdf(d1) - strike * n.cdf(d1 - v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{Diffusion, Drift};
    use crate::paths::{window_at_node, LagGrid, TimeGrid};
    use crate::representation::scenario_path;

    fn settings(lower: f64, upper: f64, points: usize, steps: usize) -> ChainSettings {
        let lat = LatticeSpec { lower, upper, points };
        ChainSettings { space: lat, params: lat, steps_per_unit: steps }
    }

    fn constant_sigma(sigma: f64) -> SdeModel {
        SdeModel::new(Diffusion::Constant { sigma }, Drift::Zero)
    }

    #[test]
    fn thomas_solves_tridiagonal_systems() {
        let a = [0.0, 1.0, 1.0, 1.0];
        let b = [4.0, 4.0, 4.0, 4.0];
        let c = [1.0, 1.0, 1.0, 0.0];
        let x = [1.0, -2.0, 3.0, 0.5];
        let mut d: Vec<f64> = (0..4)
            .map(|i| b[i] * x[i] + if i > 0 { a[i] * x[i - 1] } else { 0.0 } + if i < 3 { c[i] * x[i + 1] } else { 0.0 })
            .collect();
        let mut s = vec![0.0; 4];
        thomas(&a, &b, &c, &mut d, &mut s);
        for i in 0..4 {
            assert!((d[i] - x[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn linear_payoff_is_preserved() {
        let map = SmoothMap::Linear { coeffs: vec![1.0], constant: 0.0 };
        let sol = solve_chain(&map, &constant_sigma(0.7), &[1.0], &settings(-3.0, 3.0, 61, 50)).unwrap();
        for t in [0.0, 0.33, 0.9] {
            for y in [-2.5, 0.1, 1.7] {
                assert!((sol.value(0, &[], t, y).unwrap().value - y).abs() < 1e-12);
                assert!((sol.gradient(0, &[], t, y).unwrap().value - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn heat_equation_closed_form() {
        let sigma = 0.5;
        let map = SmoothMap::Power { index: 0, power: 2 };
        let sol = solve_chain(&map, &constant_sigma(sigma), &[1.0], &settings(-5.0, 5.0, 201, 100)).unwrap();
        for t in [0.0, 0.5] {
            for y in [-1.0, 0.0, 0.7] {
                let want = y * y + sigma * sigma * (1.0 - t);
                assert!((sol.value(0, &[], t, y).unwrap().value - want).abs() < 1e-3, "t={t} y={y}");
            }
        }
    }

    #[test]
    fn product_chain_oracle() {
        let map = SmoothMap::Product { indices: vec![0, 1], scale: 1.0 };
        let sol = solve_chain(&map, &SdeModel::brownian(), &[0.5, 1.0], &settings(-4.0, 4.0, 81, 40)).unwrap();
        for y1 in [-1.0, 0.3] {
            for y in [-0.5, 1.2] {
                assert!((sol.value(1, &[y1], 0.75, y).unwrap().value - y1 * y).abs() < 1e-9);
            }
        }
        for y in [-1.0, 0.2, 1.0] {
            assert!((sol.value(0, &[], 0.5, y).unwrap().value - y * y).abs() < 1e-9);
            let want = y * y + 0.5 - 0.2;
            assert!((sol.value(0, &[], 0.2, y).unwrap().value - want).abs() < 2e-3);
        }
        assert!(sol.matching_residuals()[0] < 1e-12);
    }

    #[test]
    fn too_many_anchors_are_rejected() {
        let map = SmoothMap::Linear { coeffs: vec![1.0; 4], constant: 0.0 };
        let err = solve_chain(&map, &SdeModel::brownian(), &[0.25, 0.5, 0.75, 1.0], &settings(-1.0, 1.0, 11, 10));
        assert!(matches!(err, Err(Error::Unsupported(_))));
    }

    #[test]
    fn black_scholes_reproduction() {
        let (x0, k, sigma) = (1.0, 1.0, 0.2);
        let model = SdeModel::new(Diffusion::Affine { sigma }, Drift::Zero);
        for width in [0.0, 0.01] {
            let map = SmoothMap::SmoothedCall { index: 0, strike: k, width };
            let sol = solve_chain(&map, &model, &[1.0], &settings(0.0, 4.0, 801, 200)).unwrap();
            let pde = sol.value(0, &[], 0.0, x0).unwrap().value;
            let bs = black_scholes_call(x0, k, sigma, 1.0);
            assert!(((pde - bs) / bs).abs() < 0.01, "width {width}: {pde} vs {bs}");
        }
        assert!((black_scholes_call(1.0, 1.0, 0.2, 1.0) - 0.0796556745).abs() < 1e-8);
    }

    #[test]
    fn comparison_principle() {
        let map = SmoothMap::SmoothedCall { index: 0, strike: 1.0, width: 0.0 };
        let model = SdeModel::new(Diffusion::Degenerate { sigma: 0.4 }, Drift::Zero);
        let sol = solve_chain(&map, &model, &[1.0], &settings(-1.0, 3.0, 201, 50)).unwrap();
        assert!(sol.levels[0].values.iter().all(|&v| v > -1e-8));
        assert!(!sol.warnings().is_empty());
    }

    #[test]
    fn linear_hedge_replicates_exactly() {
        let grid = TimeGrid::new(1.0, 64).unwrap();
        let model = SdeModel::new(Diffusion::Sinusoidal { sigma0: 0.3, sigma1: 0.1 }, Drift::Zero);
        let map = SmoothMap::Linear { coeffs: vec![1.0], constant: 0.0 };
        let sol = solve_chain(&map, &model, &[1.0], &settings(-3.0, 5.0, 81, 64)).unwrap();
        let (x, _) = scenario_path(&model, 1.0, &grid, 3, 0).unwrap();
        let r = hedge_from_chain(&sol, &x).unwrap();
        assert!(r.strategy.iter().all(|p| (p.xi - 1.0).abs() < 1e-9));
        assert!(r.replication_error.abs() < 1e-9);
        assert_eq!(r.initial_value, sol.value(0, &[], 0.0, 1.0).unwrap().value);
        assert!(!r.clamped);
    }

    #[test]
    fn product_hedge_ratio_after_first_anchor() {
        let grid = TimeGrid::new(1.0, 32).unwrap();
        let model = SdeModel::brownian();
        let map = SmoothMap::Product { indices: vec![0, 1], scale: 1.0 };
        let sol = solve_chain(&map, &model, &[0.5, 1.0], &settings(-5.0, 5.0, 101, 32)).unwrap();
        let (x, _) = scenario_path(&model, 0.2, &grid, 8, 1).unwrap();
        let r = hedge_from_chain(&sol, &x).unwrap();
        let x_a1 = x.values()[16];
        for p in &r.strategy[16..] {
            assert!((p.xi - x_a1).abs() < 1e-9);
        }
    }

    #[test]
    fn save_and_load_round_trip() {
        let map = SmoothMap::Product { indices: vec![0, 1], scale: 1.0 };
        let sol = solve_chain(&map, &constant_sigma(0.3), &[0.5, 1.0], &settings(-1.0, 1.0, 9, 8)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = sol.save(dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        let back = ChainSolution::load(dir.path()).unwrap();
        assert_eq!(back, sol);
    }

    #[test]
    fn cross_validation_examples() {
        let grid = TimeGrid::new(1.0, 32).unwrap();
        let lags = LagGrid::from_steps(grid.dt(), grid.steps()).unwrap();
        let model = constant_sigma(0.5);
        let cases = [
            (vec![1.0], SmoothMap::Linear { coeffs: vec![1.0], constant: 0.0 }),
            (vec![1.0], SmoothMap::Power { index: 0, power: 2 }),
            (vec![0.5, 1.0], SmoothMap::Product { indices: vec![0, 1], scale: 1.0 }),
        ];
        for (anchors, map) in cases {
            let sol = solve_chain(&map, &model, &anchors, &settings(-5.0, 5.0, 201, 64)).unwrap();
            let payoff = PathPayoff::new(PayoffSpec::Discrete { anchors: anchors.clone(), map: map.clone() }, grid).unwrap();
            let probes: Vec<(f64, WindowSlice)> = (0..4u64)
                .map(|p| {
                    let (x, _) = scenario_path(&model, 0.3, &grid, 12, p).unwrap();
                    let k = [3, 9, 19, 27][p as usize];
                    (grid.node(k), window_at_node(&x, k, &lags))
                })
                .collect();
            let r = cross_validate(&sol, &payoff, &model, &probes, 4096, 5).unwrap();
            assert!(r.max_abs_z <= 3.0, "{map:?}: {r:?}");
        }
    }

    #[test]
    fn chain_value_is_a_martingale_along_scenarios() {
        let grid = TimeGrid::new(1.0, 32).unwrap();
        let model = SdeModel::new(Diffusion::Affine { sigma: 0.3 }, Drift::Zero);
        let map = SmoothMap::Product { indices: vec![0, 1], scale: 1.0 };
        let sol = solve_chain(&map, &model, &[0.5, 1.0], &settings(0.0, 4.0, 161, 64)).unwrap();
        let incs: Vec<f64> = (0..400)
            .map(|sc| {
                let (x, _) = scenario_path(&model, 1.0, &grid, 17, sc).unwrap();
                let v = x.values();
                let a = sol.value(0, &[], 0.25, v[8]).unwrap().value;
                let b = sol.value(1, &[v[16]], 0.75, v[24]).unwrap().value;
                b - a
            })
            .collect();
        let n = incs.len() as f64;
        let mean = incs.iter().sum::<f64>() / n;
        let sd = (incs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(mean.abs() < 3.0 * sd / n.sqrt(), "mean {mean} sd {sd}");
    }
}
