//! Monte-Carlo representation of `u(s, η) = E[Φ(Y^{s,η})]`, its derivative
//! split `D^{δ₀}u`, `D^⊥u`, delta-hedging along a scenario, and the
//! integration-by-parts estimator for non-smooth weighted increments.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::flow::{flow_start, flow_values, log_weights, noise_row, SdeModel};
use crate::maps::SmoothMap;
use crate::measures::DaL2Measure;
use crate::paths::{AnchorSet, LagGrid, SampledPath, TimeGrid, WindowSlice};
use crate::rng::derive_seed;

/// Deterministic function of time with its derivative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum TimeKernel {
    Constant { value: f64 },
    /// `intercept + slope·t`
    Linear { intercept: f64, slope: f64 },
    /// `scale·exp(rate·t)`
    Exponential { scale: f64, rate: f64 },
}

impl TimeKernel {
    pub fn value(&self, t: f64) -> f64 {
        match self {
            TimeKernel::Constant { value } => *value,
            TimeKernel::Linear { intercept, slope } => intercept + slope * t,
            TimeKernel::Exponential { scale, rate } => scale * (rate * t).exp(),
        }
    }

    pub fn derivative(&self, t: f64) -> f64 {
        match self {
            TimeKernel::Constant { .. } => 0.0,
            TimeKernel::Linear { slope, .. } => *slope,
            TimeKernel::Exponential { scale, rate } => scale * rate * (rate * t).exp(),
        }
    }
}

/// Registry key plus parameters for a payoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PayoffSpec {
    /// `f(γ(a_1), …, γ(a_N))`
    Discrete { anchors: Vec<f64>, map: SmoothMap },
    /// `f(γ(a_1), …, γ(a_N), ∫₀ᵀ k(r)γ(r) dr)`
    Integralized { anchors: Vec<f64>, map: SmoothMap, kernel: TimeKernel },
    /// `f(∫₀ᵀ φ dγ)` with `∫φ dγ = φ(T)γ(T) − φ(0)γ(0) − ∫γ φ̇ dr`.
    WeightedIncrement { map: SmoothMap, phi: TimeKernel },
}

/// Linear part `L(γ) = Σ c_m γ(t_m) + ∫ p(r) γ(r) dr` fed to the last
/// argument of `f`.
#[derive(Debug, Clone, PartialEq)]
struct LinearPart {
    atoms: Vec<(usize, f64)>,
    /// `p` at every grid node.
    profile: Vec<f64>,
}

/// Named payoffs used by the derivative checks; anchors sit on quarters of
/// a unit horizon.
pub fn payoff_catalogue() -> Vec<(String, PayoffSpec)> {
    vec![
        (
            "product".into(),
            PayoffSpec::Discrete { anchors: vec![0.5, 1.0], map: SmoothMap::Product { indices: vec![0, 1], scale: 1.0 } },
        ),
        (
            "sin_times".into(),
            PayoffSpec::Discrete { anchors: vec![0.25, 1.0], map: SmoothMap::SinTimes { sin_index: 0, other: 1 } },
        ),
        (
            "smoothed_call".into(),
            PayoffSpec::Discrete { anchors: vec![1.0], map: SmoothMap::SmoothedCall { index: 0, strike: 0.5, width: 0.2 } },
        ),
        (
            "integralized_product".into(),
            PayoffSpec::Integralized {
                anchors: vec![1.0],
                map: SmoothMap::Product { indices: vec![0, 1], scale: 1.0 },
                kernel: TimeKernel::Exponential { scale: 1.0, rate: -1.0 },
            },
        ),
        (
            "weighted_cube".into(),
            PayoffSpec::WeightedIncrement { map: SmoothMap::Power { index: 0, power: 3 }, phi: TimeKernel::Linear { intercept: 1.0, slope: 0.5 } },
        ),
    ]
}

/// A path payoff `Φ` on a fixed simulation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PathPayoff {
    spec: PayoffSpec,
    grid: TimeGrid,
    anchors: Vec<f64>,
    /// Grid nodes read directly by `f`.
    nodes: Vec<usize>,
    linear: Option<LinearPart>,
    map: SmoothMap,
    /// Time trapezoid weights on `[0, T]`.
    weights: Vec<f64>,
}

fn time_weights(grid: &TimeGrid) -> Vec<f64> {
    let mut w = vec![grid.dt(); grid.len()];
    w[0] *= 0.5;
    w[grid.steps()] *= 0.5;
    w
}

impl PathPayoff {
    pub fn new(spec: PayoffSpec, grid: TimeGrid) -> Result<Self> {
        let weights = time_weights(&grid);
        let t_end = grid.horizon();
        let node_of = |a: f64| {
            grid.node_index(a)
                .ok_or_else(|| Error::InvalidArgument(format!("payoff anchor {a} is not a grid node")))
        };
        let (anchors, nodes, linear, map) = match &spec {
            PayoffSpec::Discrete { anchors, map } | PayoffSpec::Integralized { anchors, map, .. } => {
                if anchors.is_empty() {
                    return invalid("payoff needs at least one anchor");
                }
                let nodes = anchors.iter().map(|&a| node_of(a)).collect::<Result<Vec<_>>>()?;
                if nodes[0] == 0 || nodes.windows(2).any(|w| w[1] <= w[0]) {
                    return invalid("payoff anchors must be increasing in (0, T]");
                }
                if *nodes.last().unwrap() != grid.steps() {
                    return invalid("last payoff anchor must be T");
                }
                let linear = match &spec {
                    PayoffSpec::Integralized { kernel, .. } => Some(LinearPart {
                        atoms: Vec::new(),
                        profile: (0..grid.len()).map(|m| kernel.value(grid.node(m))).collect(),
                    }),
                    _ => None,
                };
                let arity = nodes.len() + usize::from(linear.is_some());
                map.check_arity(arity)?;
                (anchors.iter().map(|&a| grid.node(node_of(a).unwrap())).collect(), nodes, linear, map.clone())
            }
            PayoffSpec::WeightedIncrement { map, phi } => {
                if phi.value(t_end) == 0.0 {
                    return invalid("weight φ must not vanish at T");
                }
                map.check_arity(1)?;
                let linear = LinearPart {
                    atoms: vec![(grid.steps(), phi.value(t_end)), (0, -phi.value(0.0))],
                    profile: (0..grid.len()).map(|m| -phi.derivative(grid.node(m))).collect(),
                };
                (vec![t_end], Vec::new(), Some(linear), map.clone())
            }
        };
        Ok(Self { spec, grid, anchors, nodes, linear, map, weights })
    }

    pub fn spec(&self) -> &PayoffSpec {
        &self.spec
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Anchor times `a_1 < … < a_N = T`.
    pub fn anchors(&self) -> &[f64] {
        &self.anchors
    }

    pub fn anchor_nodes(&self) -> Vec<usize> {
        self.anchors.iter().map(|&a| self.grid.node_index(a).unwrap()).collect()
    }

    pub fn is_differentiable(&self) -> bool {
        self.map.is_differentiable()
    }

    /// True when `f` and its gradient grow at most polynomially.
    pub fn polynomial_growth(&self) -> bool {
        !matches!(self.map, SmoothMap::Exp { .. } | SmoothMap::Custom(_))
    }

    fn phi(&self) -> Option<&TimeKernel> {
        match &self.spec {
            PayoffSpec::WeightedIncrement { phi, .. } => Some(phi),
            _ => None,
        }
    }

    fn inputs(&self, values: &[f64]) -> Vec<f64> {
        let mut x: Vec<f64> = self.nodes.iter().map(|&m| values[m]).collect();
        if let Some(lin) = &self.linear {
            let mut l: f64 = lin.atoms.iter().map(|&(m, c)| c * values[m]).sum();
            l += lin.profile.iter().zip(&self.weights).zip(values).map(|((p, w), v)| p * w * v).sum::<f64>();
            x.push(l);
        }
        x
    }

    /// `Φ(γ)` for a path sampled on the payoff grid.
    pub fn evaluate(&self, path: &SampledPath) -> Result<f64> {
        if !path.grid().same_as(&self.grid) {
            return invalid("path and payoff use different grids");
        }
        Ok(self.value(path.values()))
    }

    fn value(&self, values: &[f64]) -> f64 {
        self.map.value(&self.inputs(values))
    }

    /// Pathwise derivative: atoms per grid node and the scale of the
    /// linear part's density.
    fn gradient(&self, values: &[f64]) -> (Vec<(usize, f64)>, f64) {
        let x = self.inputs(values);
        let g = self.map.gradient_vec(&x);
        let mut atoms: Vec<(usize, f64)> = self.nodes.iter().zip(&g).map(|(&m, &d)| (m, d)).collect();
        let mut scale = 0.0;
        if let Some(lin) = &self.linear {
            scale = g[self.nodes.len()];
            atoms.extend(lin.atoms.iter().map(|&(m, c)| (m, c * scale)));
        }
        (atoms, scale)
    }

    fn profile(&self) -> Option<&[f64]> {
        self.linear.as_ref().map(|l| l.profile.as_slice())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MCEstimate {
    pub value: f64,
    pub stderr: f64,
    pub n_paths: usize,
    pub seed: u64,
}

/// Paths per deterministic reduction block.
const CHUNK: usize = 256;

/// Per-coordinate mean and standard error of `sample(path)`. Blocks are
/// reduced in index order, so results do not depend on the worker count.
fn moments<F>(n: usize, dim: usize, sample: F) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: Fn(u64, &mut [f64]) -> Result<()> + Sync,
{
    if n < 2 {
        return invalid("Monte-Carlo estimates need at least 2 paths");
    }
    let mut shift = vec![0.0; dim];
    sample(0, &mut shift)?;
    let blocks = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|b| {
            let mut s = vec![0.0; dim];
            let mut ss = vec![0.0; dim];
            let mut buf = vec![0.0; dim];
            for p in b * CHUNK..((b + 1) * CHUNK).min(n) {
                buf.iter_mut().for_each(|v| *v = 0.0);
                sample(p as u64, &mut buf)?;
                for d in 0..dim {
                    let y = buf[d] - shift[d];
                    s[d] += y;
                    ss[d] += y * y;
                }
            }
            Ok((s, ss))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut s = vec![0.0; dim];
    let mut ss = vec![0.0; dim];
    for (bs, bss) in &blocks {
        for d in 0..dim {
            s[d] += bs[d];
            ss[d] += bss[d];
        }
    }
    let nf = n as f64;
    let mean = (0..dim).map(|d| shift[d] + s[d] / nf).collect();
    let se = (0..dim)
        .map(|d| (((ss[d] - s[d] * s[d] / nf) / (nf - 1.0)).max(0.0) / nf).sqrt())
        .collect();
    Ok((mean, se))
}

fn scalar<F>(n: usize, seed: u64, sample: F) -> Result<MCEstimate>
where
    F: Fn(u64) -> Result<f64> + Sync,
{
    let (m, se) = moments(n, 1, |p, out| {
        out[0] = sample(p)?;
        Ok(())
    })?;
    Ok(MCEstimate { value: m[0], stderr: se[0], n_paths: n, seed })
}

fn check_payoff_grid(payoff: &PathPayoff, s: f64, eta: &WindowSlice) -> Result<usize> {
    flow_start(payoff.grid(), s, eta)
}

fn check_before_horizon(grid: &TimeGrid, ks: usize) -> Result<()> {
    if ks >= grid.steps() {
        return invalid("derivatives need s < T");
    }
    Ok(())
}

/// `u(s, η) = E[Φ(Y^{s,η})]` over `n` flows driven by rows `0..n` of `seed`.
pub fn estimate_u(payoff: &PathPayoff, model: &SdeModel, s: f64, eta: &WindowSlice, n: usize, seed: u64) -> Result<MCEstimate> {
    let ks = check_payoff_grid(payoff, s, eta)?;
    let grid = payoff.grid();
    scalar(n, seed, |p| {
        let noise = noise_row(seed, p, grid);
        Ok(payoff.value(&flow_values(model, ks, eta, grid, &noise)))
    })
}

/// One path's `D^{δ₀}` contribution: atoms at nodes `≥ ks` (`> ks` for the
/// right limit) weighted by the Doléans exponential, plus the density
/// against the weight on `[s, T]`.
fn delta0_path(payoff: &PathPayoff, model: &SdeModel, ks: usize, values: &[f64], noise: &[f64], right: bool) -> f64 {
    let grid = payoff.grid();
    let logs = log_weights(model, values, ks, grid, noise);
    let (atoms, scale) = payoff.gradient(values);
    let mut acc = 0.0;
    for (m, d) in atoms {
        if m > ks || (m == ks && !right) {
            acc += d * logs[m - ks].exp();
        }
    }
    if let Some(profile) = payoff.profile() {
        if scale != 0.0 {
            let dt = grid.dt();
            let mut integral = 0.0;
            for m in ks..=grid.steps() {
                let w = if m == ks || m == grid.steps() { 0.5 * dt } else { dt };
                integral += w * profile[m] * logs[m - ks].exp();
            }
            acc += scale * integral;
        }
    }
    acc
}

fn delta0_estimate(
    payoff: &PathPayoff,
    model: &SdeModel,
    s: f64,
    eta: &WindowSlice,
    n: usize,
    seed: u64,
    right: bool,
) -> Result<MCEstimate> {
    let ks = check_payoff_grid(payoff, s, eta)?;
    let grid = payoff.grid();
    check_before_horizon(grid, ks)?;
    scalar(n, seed, |p| {
        let noise = noise_row(seed, p, grid);
        let values = flow_values(model, ks, eta, grid, &noise);
        Ok(delta0_path(payoff, model, ks, &values, &noise, right))
    })
}

/// `D^{δ₀}u(s, η)` with anchors `a_i ≥ s` transported by the flow weight.
pub fn estimate_delta0(payoff: &PathPayoff, model: &SdeModel, s: f64, eta: &WindowSlice, n: usize, seed: u64) -> Result<MCEstimate> {
    delta0_estimate(payoff, model, s, eta, n, seed, false)
}

/// Right limit in `s` of `D^{δ₀}u`: an anchor at `s` itself counts as
/// already fixed. This is the hedge ratio held over `[s, s + Δ)`.
pub fn estimate_delta0_right(payoff: &PathPayoff, model: &SdeModel, s: f64, eta: &WindowSlice, n: usize, seed: u64) -> Result<MCEstimate> {
    delta0_estimate(payoff, model, s, eta, n, seed, true)
}

/// Lag object on `[-T, 0]`: atoms at `a_i − s` for `a_i < s` and the
/// density of the linear part on `[-s, 0]`. The density at `-s` carries half
/// its value (the time integral starts there), and vanishes below `-s`.
fn perp_path(payoff: &PathPayoff, anchors: &AnchorSet, ks: usize, values: &[f64], atoms_out: &mut [f64], density_out: &mut [f64]) {
    let grid = payoff.grid();
    let m_steps = grid.steps();
    let (atoms, scale) = payoff.gradient(values);
    for (m, d) in atoms {
        if m < ks {
            let y = -((ks - m) as f64) * grid.dt();
            atoms_out[anchors.position(y).expect("frozen anchor in lag set")] += d;
        }
    }
    if let Some(profile) = payoff.profile() {
        if ks > 0 && scale != 0.0 {
            for m in 0..=ks {
                let half = if m == 0 { 0.5 } else { 1.0 };
                density_out[m_steps - ks + m] += half * scale * profile[m];
            }
        }
    }
}

fn perp_anchors(payoff: &PathPayoff, ks: usize) -> Result<AnchorSet> {
    let grid = payoff.grid();
    let lags = LagGrid::from_steps(grid.dt(), grid.steps())?;
    let mut frozen: Vec<f64> = payoff.anchor_nodes().into_iter().filter(|&m| m < ks).map(|m| -((ks - m) as f64) * grid.dt()).collect();
    if let Some(lin) = &payoff.linear {
        frozen.extend(lin.atoms.iter().filter(|&&(m, _)| m < ks).map(|&(m, _)| -((ks - m) as f64) * grid.dt()));
    }
    AnchorSet::new(lags, &frozen)
}

/// Mean and standard error of a lag object, coordinate-wise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagEstimate {
    pub mean: DaL2Measure,
    pub stderr: DaL2Measure,
    pub n_paths: usize,
    pub seed: u64,
}

/// `D^⊥u(s, η)`.
pub fn estimate_perp(payoff: &PathPayoff, model: &SdeModel, s: f64, eta: &WindowSlice, n: usize, seed: u64) -> Result<LagEstimate> {
    let ks = check_payoff_grid(payoff, s, eta)?;
    let grid = payoff.grid();
    check_before_horizon(grid, ks)?;
    let anchors = perp_anchors(payoff, ks)?;
    let na = anchors.len();
    let nl = anchors.lag_grid().len();
    let (mean, se) = moments(n, na + nl, |p, out| {
        let noise = noise_row(seed, p, grid);
        let values = flow_values(model, ks, eta, grid, &noise);
        let (a, d) = out.split_at_mut(na);
        perp_path(payoff, &anchors, ks, &values, a, d);
        Ok(())
    })?;
    let build = |v: &[f64]| DaL2Measure::new(anchors.clone(), v[..na].to_vec(), v[na..].to_vec());
    Ok(LagEstimate { mean: build(&mean)?, stderr: build(&se)?, n_paths: n, seed })
}

/// `⟨Du(s, η), h⟩ = D^{δ₀}u·h(0) + ⟨D^⊥u, h⟩`, estimated path by path.
pub fn directional_derivative(
    payoff: &PathPayoff,
    model: &SdeModel,
    s: f64,
    eta: &WindowSlice,
    h: &WindowSlice,
    n: usize,
    seed: u64,
) -> Result<MCEstimate> {
    let ks = check_payoff_grid(payoff, s, eta)?;
    eta.lags().check_compatible(h.lags(), "bump direction")?;
    let grid = payoff.grid();
    check_before_horizon(grid, ks)?;
    let anchors = perp_anchors(payoff, ks)?;
    let lags = *anchors.lag_grid();
    let tw = lags.trapezoid_weights();
    scalar(n, seed, |p| {
        let noise = noise_row(seed, p, grid);
        let values = flow_values(model, ks, eta, grid, &noise);
        let d0 = delta0_path(payoff, model, ks, &values, &noise, false);
        let mut atoms = vec![0.0; anchors.len()];
        let mut density = vec![0.0; lags.len()];
        perp_path(payoff, &anchors, ks, &values, &mut atoms, &mut density);
        let mut acc = d0 * h.present();
        for (i, a) in atoms.iter().enumerate() {
            acc += a * h.at(anchors.node(i));
        }
        for j in 0..lags.len() {
            acc += tw[j] * density[j] * h.at(j);
        }
        Ok(acc)
    })
}

/// Common-random-number central difference `(u(s, η+δh) − u(s, η−δh)) / 2δ`.
#[allow(clippy::too_many_arguments)]
pub fn fd_directional(
    payoff: &PathPayoff,
    model: &SdeModel,
    s: f64,
    eta: &WindowSlice,
    h: &WindowSlice,
    delta: f64,
    n: usize,
    seed: u64,
) -> Result<MCEstimate> {
    let ks = check_payoff_grid(payoff, s, eta)?;
    let up = eta.axpy(delta, h)?;
    let dn = eta.axpy(-delta, h)?;
    let grid = payoff.grid();
    scalar(n, seed, |p| {
        let noise = noise_row(seed, p, grid);
        let a = payoff.value(&flow_values(model, ks, &up, grid, &noise));
        let b = payoff.value(&flow_values(model, ks, &dn, grid, &noise));
        Ok((a - b) / (2.0 * delta))
    })
}

/// Output of the integration-by-parts estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MalliavinResult {
    /// `φ(s)·E[Φ·∫φ dW] / ∫_s^T φ²`; at `s = 0` this is the limit from the
    /// right.
    pub delta0: MCEstimate,
    /// The same with the `−φ(0)` correction applied at `s = 0`.
    pub delta0_literal: MCEstimate,
    /// `E[Φ(Y)·∫₀ᵀ φ dW]`.
    pub expectation: MCEstimate,
    /// Left-point `∫_s^T φ²`.
    pub denominator: f64,
    pub perp: DaL2Measure,
}

/// `D^{δ₀}u` and `D^⊥u` for `Φ = f(∫φ dγ)` under Brownian dynamics without
/// differentiating `f`.
pub fn malliavin_derivatives(payoff: &PathPayoff, s: f64, eta: &WindowSlice, n: usize, seed: u64) -> Result<MalliavinResult> {
    let Some(phi) = payoff.phi().cloned() else {
        return invalid("the integration-by-parts estimator needs a weighted-increment payoff");
    };
    let ks = check_payoff_grid(payoff, s, eta)?;
    let grid = payoff.grid();
    if ks >= grid.steps() {
        return Err(Error::DegenerateDenominator(format!("s = {s} leaves no time for the weight")));
    }
    let phis: Vec<f64> = (0..grid.steps()).map(|k| phi.value(grid.node(k))).collect();
    let denominator: f64 = phis[ks..].iter().map(|p| p * p * grid.dt()).sum();
    if !(denominator > 0.0) {
        return Err(Error::DegenerateDenominator(format!("∫φ² vanishes on [{s}, T]")));
    }
    let model = SdeModel::brownian();
    let expectation = scalar(n, seed, |p| {
        let noise = noise_row(seed, p, grid);
        let values = flow_values(&model, ks, eta, grid, &noise);
        let stoch: f64 = phis.iter().zip(&noise).map(|(f, w)| f * w).sum();
        Ok(payoff.value(&values) * stoch)
    })?;
    let scaled = |c: f64| MCEstimate { value: c * expectation.value, stderr: c.abs() * expectation.stderr, ..expectation };
    let lead = phi.value(s) / denominator;
    let literal = if ks == 0 { (phi.value(s) - phi.value(0.0)) / denominator } else { lead };
    let anchors = perp_anchors(payoff, ks)?;
    let mut atoms = vec![0.0; anchors.len()];
    let mut density = vec![0.0; anchors.lag_grid().len()];
    if ks > 0 {
        let c = expectation.value / denominator;
        atoms[anchors.position(-s).expect("anchor at -s")] = -phi.value(0.0) * c;
        for m in 0..=ks {
            let half = if m == 0 { 0.5 } else { 1.0 };
            density[grid.steps() - ks + m] = -half * phi.derivative(grid.node(m)) * c;
        }
    }
    Ok(MalliavinResult {
        delta0: scaled(lead),
        delta0_literal: scaled(literal),
        expectation,
        denominator,
        perp: DaL2Measure::new(anchors, atoms, density)?,
    })
}

/// One rebalance decision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyPoint {
    pub s: f64,
    pub xi: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HedgeResult {
    /// Outer scenario index, when the path was simulated here.
    pub scenario: Option<u64>,
    pub initial_value: f64,
    pub initial_stderr: f64,
    pub strategy: Vec<StrategyPoint>,
    /// `Σ ξ σ(t_k, X_k) ΔW_k`.
    pub gains: f64,
    pub payoff: f64,
    /// `payoff − initial_value − gains`.
    pub replication_error: f64,
    /// Set when a lattice-based strategy had to clamp a query.
    pub clamped: bool,
}

impl HedgeResult {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        serde_json::to_writer_pretty(BufWriter::new(File::create(path)?), self)?;
        Ok(())
    }

    pub fn write_strategy_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "s,xi,stderr")?;
        for p in &self.strategy {
            writeln!(out, "{},{},{}", p.s, p.xi, p.stderr)?;
        }
        Ok(())
    }
}

const OUTER_TAG: u64 = 0x6f75_7465_72;

/// Outer scenario `X` from the constant window `x0` and its driving noise.
pub fn scenario_path(model: &SdeModel, x0: f64, grid: &TimeGrid, seed: u64, scenario: u64) -> Result<(SampledPath, Vec<f64>)> {
    let noise = noise_row(derive_seed(seed, OUTER_TAG), scenario, grid);
    let eta = WindowSlice::constant(LagGrid::from_steps(grid.dt(), grid.steps())?, x0);
    let values = flow_values(model, 0, &eta, grid, &noise);
    Ok((SampledPath::new(*grid, values)?, noise))
}

/// Seed for the inner estimates of `scenario` at node `k`.
pub fn inner_seed(seed: u64, scenario: u64, k: usize) -> u64 {
    derive_seed(derive_seed(seed, scenario.wrapping_add(1)), k as u64)
}

/// Rebalance nodes `0, stride, 2·stride, … < M`; every anchor before `T` must
/// be one of them.
pub fn rebalance_nodes(payoff: &PathPayoff, stride: usize) -> Result<Vec<usize>> {
    let m = payoff.grid().steps();
    if stride == 0 || stride > m {
        return invalid(format!("rebalance stride {stride} must lie in 1..={m}"));
    }
    let nodes: Vec<usize> = (0..m).step_by(stride).collect();
    for a in payoff.anchor_nodes() {
        if a < m && a % stride != 0 {
            return invalid(format!("anchor {} is not a rebalance node", payoff.grid().node(a)));
        }
    }
    Ok(nodes)
}

/// Delta-hedges `Φ(X)` along one outer scenario with nested Monte Carlo.
#[allow(clippy::too_many_arguments)]
pub fn replicate(
    payoff: &PathPayoff,
    model: &SdeModel,
    x0: f64,
    scenario: u64,
    stride: usize,
    inner_n: usize,
    seed: u64,
) -> Result<HedgeResult> {
    let grid = *payoff.grid();
    let nodes = rebalance_nodes(payoff, stride)?;
    let (x, noise) = scenario_path(model, x0, &grid, seed, scenario)?;
    let lags = LagGrid::from_steps(grid.dt(), grid.steps())?;
    let window = |k: usize| crate::paths::window_at_node(&x, k, &lags);
    let h0 = estimate_u(payoff, model, 0.0, &window(0), inner_n, inner_seed(seed, scenario, 0))?;
    let strategy = nodes
        .par_iter()
        .map(|&k| {
            let s = grid.node(k);
            let d = estimate_delta0_right(payoff, model, s, &window(k), inner_n, inner_seed(seed, scenario, k))?;
            Ok(StrategyPoint { s, xi: d.value, stderr: d.stderr })
        })
        .collect::<Result<Vec<_>>>()?;
    let xv = x.values();
    let mut gains = 0.0;
    for (j, &k0) in nodes.iter().enumerate() {
        let k1 = nodes.get(j + 1).copied().unwrap_or(grid.steps());
        for k in k0..k1 {
            gains += strategy[j].xi * model.sigma(grid.node(k), xv[k]) * noise[k];
        }
    }
    let payoff_value = payoff.value(xv);
    Ok(HedgeResult {
        scenario: Some(scenario),
        initial_value: h0.value,
        initial_stderr: h0.stderr,
        strategy,
        gains,
        payoff: payoff_value,
        replication_error: payoff_value - h0.value - gains,
        clamped: false,
    })
}

/// Root mean square of the replication errors.
pub fn rms_error(results: &[HedgeResult]) -> f64 {
    (results.iter().map(|r| r.replication_error.powi(2)).sum::<f64>() / results.len().max(1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{Diffusion, Drift};
    use crate::measures::pair_lag;
    use crate::paths::window_at_node;

    fn grid(m: usize) -> TimeGrid {
        TimeGrid::new(1.0, m).unwrap()
    }

    fn full_lags(g: &TimeGrid) -> LagGrid {
        LagGrid::from_steps(g.dt(), g.steps()).unwrap()
    }

    fn linear(coeffs: Vec<f64>) -> SmoothMap {
        SmoothMap::Linear { coeffs, constant: 0.0 }
    }

    fn terminal(g: TimeGrid) -> PathPayoff {
        PathPayoff::new(PayoffSpec::Discrete { anchors: vec![1.0], map: linear(vec![1.0]) }, g).unwrap()
    }

    fn eta(g: &TimeGrid) -> WindowSlice {
        WindowSlice::from_fn(full_lags(g), |y| 1.0 + 0.3 * y + 0.1 * (5.0 * y).sin()).unwrap()
    }

    fn gbm(sigma: f64) -> SdeModel {
        SdeModel::new(Diffusion::Affine { sigma }, Drift::Zero)
    }

    #[test]
    fn payoff_validation() {
        let g = grid(10);
        let bad = |spec| PathPayoff::new(spec, g).is_err();
        assert!(bad(PayoffSpec::Discrete { anchors: vec![0.5], map: linear(vec![1.0]) }));
        assert!(bad(PayoffSpec::Discrete { anchors: vec![0.55, 1.0], map: linear(vec![1.0, 1.0]) }));
        assert!(bad(PayoffSpec::Discrete { anchors: vec![0.0, 1.0], map: linear(vec![1.0, 1.0]) }));
        assert!(bad(PayoffSpec::Discrete { anchors: vec![0.5, 1.0], map: linear(vec![1.0]) }));
        assert!(bad(PayoffSpec::WeightedIncrement { map: linear(vec![1.0]), phi: TimeKernel::Linear { intercept: 1.0, slope: -1.0 } }));
        let spec: PayoffSpec = serde_json::from_str(
            r#"{"kind":"integralized","anchors":[0.5,1.0],"map":{"name":"linear","coeffs":[1,1,1]},"kernel":{"shape":"constant","value":1}}"#,
        )
        .unwrap();
        assert!(PathPayoff::new(spec, g).is_ok());
    }

    #[test]
    fn terminal_value_is_a_martingale() {
        let g = grid(64);
        let e = eta(&g);
        let u = estimate_u(&terminal(g), &gbm(0.3), 0.25, &e, 4096, 1).unwrap();
        assert!((u.value - e.present()).abs() < 3.0 * u.stderr, "{u:?}");
    }

    #[test]
    fn terminal_square_second_moment() {
        let g = grid(64);
        let e = eta(&g);
        let p = PathPayoff::new(PayoffSpec::Discrete { anchors: vec![1.0], map: SmoothMap::Power { index: 0, power: 2 } }, g).unwrap();
        let u = estimate_u(&p, &SdeModel::brownian(), 0.25, &e, 8192, 2).unwrap();
        let want = e.present().powi(2) + 0.75;
        assert!((u.value - want).abs() < 3.0 * u.stderr, "{u:?} vs {want}");
    }

    #[test]
    fn frozen_past_is_exact() {
        let g = grid(20);
        let e = eta(&g);
        let p = PathPayoff::new(PayoffSpec::Discrete { anchors: vec![0.25, 1.0], map: linear(vec![1.0, 0.0]) }, g).unwrap();
        let u = estimate_u(&p, &gbm(0.4), 0.5, &e, 100, 3).unwrap();
        assert_eq!(u.value, e.value(-0.25).unwrap());
        assert_eq!(u.stderr, 0.0);
    }

    #[test]
    fn delta0_examples() {
        let g = grid(32);
        let e = eta(&g);
        let d = estimate_delta0(&terminal(g), &SdeModel::brownian(), 0.25, &e, 64, 4).unwrap();
        assert_eq!(d.value, 1.0);
        let p = PathPayoff::new(PayoffSpec::Discrete { anchors: vec![0.25, 1.0], map: linear(vec![1.0, 0.0]) }, g).unwrap();
        let d = estimate_delta0(&p, &gbm(0.3), 0.5, &e, 64, 4).unwrap();
        assert_eq!(d.value, 0.0);
        assert!(estimate_delta0(&p, &gbm(0.3), 1.0, &e, 64, 4).is_err());
        assert!(estimate_u(&p, &gbm(0.3), 0.5, &e, 1, 4).is_err());
    }

    #[test]
    fn perp_examples() {
        let g = grid(32);
        let e = eta(&g);
        let r = estimate_perp(&terminal(g), &gbm(0.3), 0.5, &e, 64, 5).unwrap();
        assert!(r.mean.is_zero());
        let p = PathPayoff::new(PayoffSpec::Discrete { anchors: vec![0.25, 1.0], map: linear(vec![1.0, 0.0]) }, g).unwrap();
        let r = estimate_perp(&p, &gbm(0.3), 0.5, &e, 64, 5).unwrap();
        let i = r.mean.anchors().position(-0.25).unwrap();
        assert_eq!(r.mean.anchor_atom(i), 1.0);
        assert_eq!(r.mean.atoms().iter().map(|a| a.abs()).sum::<f64>(), 1.0);
        let p = PathPayoff::new(
            PayoffSpec::Integralized { anchors: vec![1.0], map: linear(vec![0.0, 1.0]), kernel: TimeKernel::Constant { value: 1.0 } },
            g,
        )
        .unwrap();
        let r = estimate_perp(&p, &gbm(0.3), 0.5, &e, 64, 5).unwrap();
        let dens = r.mean.density();
        let lags = *r.mean.lag_grid();
        for (j, y) in lags.lags().iter().enumerate() {
            let want = if *y < -0.5 - 1e-12 {
                0.0
            } else if (*y + 0.5).abs() < 1e-12 {
                0.5
            } else {
                1.0
            };
            assert_eq!(dens[j], want, "lag {y}");
        }
        assert!(r.mean.atoms().iter().all(|&a| a == 0.0));
    }

    fn catalogue(g: TimeGrid) -> Vec<PathPayoff> {
        payoff_catalogue().into_iter().map(|(_, s)| PathPayoff::new(s, g).unwrap()).collect()
    }

    #[test]
    fn directional_derivative_matches_crn_differences() {
        let g = grid(32);
        let e = eta(&g);
        let model = SdeModel::new(Diffusion::Sinusoidal { sigma0: 0.3, sigma1: 0.1 }, Drift::Linear { beta: 0.2 });
        for p in catalogue(g) {
            for (k, s) in [0.0, 0.375, 0.5].into_iter().enumerate() {
                let h = WindowSlice::new(full_lags(&g), crate::rng::standard_normal_row(9, k as u64, g.len())).unwrap();
                let a = directional_derivative(&p, &model, s, &e, &h, 4096, 11).unwrap();
                let b = fd_directional(&p, &model, s, &e, &h, 1e-3, 4096, 11).unwrap();
                let tol = 3.0 * (a.stderr.powi(2) + b.stderr.powi(2)).sqrt() + 1e-4;
                assert!((a.value - b.value).abs() < tol, "{:?} s={s}: {a:?} vs {b:?}", p.spec());
            }
        }
    }

    #[test]
    fn split_reconstructs_directional_derivative() {
        let g = grid(16);
        let e = eta(&g);
        let model = gbm(0.25);
        let h = WindowSlice::new(full_lags(&g), crate::rng::standard_normal_row(1, 1, g.len())).unwrap();
        for p in catalogue(g) {
            let s = 0.5;
            let d0 = estimate_delta0(&p, &model, s, &e, 512, 3).unwrap();
            let perp = estimate_perp(&p, &model, s, &e, 512, 3).unwrap();
            let joint = directional_derivative(&p, &model, s, &e, &h, 512, 3).unwrap();
            let rebuilt = d0.value * h.present() + pair_lag(&perp.mean, &h).unwrap();
            assert!((rebuilt - joint.value).abs() < 1e-10 * (1.0 + joint.value.abs()));
        }
    }

    #[test]
    fn malliavin_examples() {
        let g = grid(64);
        let e = eta(&g);
        let lin = PathPayoff::new(PayoffSpec::WeightedIncrement { map: linear(vec![1.0]), phi: TimeKernel::Constant { value: 1.0 } }, g).unwrap();
        let r = malliavin_derivatives(&lin, 0.25, &e, 8192, 1).unwrap();
        assert!((r.delta0.value - 1.0).abs() < 3.0 * r.delta0.stderr, "{:?}", r.delta0);
        let zero = WindowSlice::constant(full_lags(&g), 0.0);
        let digital = PathPayoff::new(
            PayoffSpec::WeightedIncrement { map: SmoothMap::Indicator { index: 0, threshold: 0.0 }, phi: TimeKernel::Constant { value: 1.0 } },
            g,
        )
        .unwrap();
        let r = malliavin_derivatives(&digital, 0.0, &zero, 1 << 14, 2).unwrap();
        let want = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        assert!((r.delta0.value - want).abs() < 3.0 * r.delta0.stderr, "{:?}", r.delta0);
        assert_eq!(r.delta0_literal.value, 0.0);
        assert!(matches!(malliavin_derivatives(&digital, 1.0, &zero, 16, 2), Err(Error::DegenerateDenominator(_))));
        assert!(malliavin_derivatives(&terminal(g), 0.0, &zero, 16, 2).is_err());
    }

    #[test]
    fn malliavin_agrees_with_pathwise_estimate() {
        let g = grid(64);
        let e = eta(&g);
        let p = PathPayoff::new(
            PayoffSpec::WeightedIncrement { map: SmoothMap::Power { index: 0, power: 2 }, phi: TimeKernel::Linear { intercept: 1.0, slope: 1.0 } },
            g,
        )
        .unwrap();
        for s in [0.25, 0.5] {
            let m = malliavin_derivatives(&p, s, &e, 1 << 14, 5).unwrap();
            let d = estimate_delta0(&p, &SdeModel::brownian(), s, &e, 1 << 14, 6).unwrap();
            let tol = 3.0 * (m.delta0.stderr.powi(2) + d.stderr.powi(2)).sqrt();
            assert!((m.delta0.value - d.value).abs() < tol, "s={s}: {:?} vs {d:?}", m.delta0);
            let perp = estimate_perp(&p, &SdeModel::brownian(), s, &e, 1 << 14, 6).unwrap();
            let i = perp.mean.anchors().position(-s).unwrap();
            let j = m.perp.anchors().position(-s).unwrap();
            let gap = (perp.mean.anchor_atom(i) - m.perp.anchor_atom(j)).abs();
            let m_se = m.expectation.stderr / m.denominator;
            assert!(gap < 3.0 * (perp.stderr.anchor_atom(i).powi(2) + m_se.powi(2)).sqrt(), "{gap}");
        }
    }

    #[test]
    fn estimates_are_thread_count_independent() {
        let g = grid(32);
        let e = eta(&g);
        let p = &catalogue(g)[0];
        let run = |threads| {
            rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| {
                (
                    estimate_u(p, &gbm(0.2), 0.25, &e, 1000, 7).unwrap(),
                    estimate_delta0(p, &gbm(0.2), 0.25, &e, 1000, 7).unwrap(),
                    estimate_perp(p, &gbm(0.2), 0.75, &e, 1000, 7).unwrap(),
                )
            })
        };
        let a = run(1);
        for t in [4, 8] {
            let b = run(t);
            assert_eq!(a.0.value.to_bits(), b.0.value.to_bits());
            assert_eq!(a.1.stderr.to_bits(), b.1.stderr.to_bits());
            assert_eq!(a.2, b.2);
        }
    }

    #[test]
    fn terminal_value_replicates_exactly() {
        let g = grid(32);
        let r = replicate(&terminal(g), &SdeModel::brownian(), 1.0, 3, 1, 16, 9).unwrap();
        assert!(r.strategy.iter().all(|p| p.xi == 1.0));
        // Only the inner estimate of u(0, ·) is noisy.
        assert!((r.replication_error - (1.0 - r.initial_value)).abs() < 1e-12, "{r:?}");
        // With a state-dependent σ the hedge ratio is 1 only on average.
        let r = replicate(&terminal(g), &gbm(0.2), 1.0, 3, 1, 4096, 9).unwrap();
        assert!(r.replication_error.abs() < 0.01, "{r:?}");
        assert!(rebalance_nodes(&PathPayoff::new(PayoffSpec::Discrete { anchors: vec![0.5, 1.0], map: linear(vec![1.0, 1.0]) }, g).unwrap(), 3).is_err());
    }

    #[test]
    fn hedging_reduces_variance() {
        let g = grid(32);
        let model = gbm(0.3);
        let p = PathPayoff::new(PayoffSpec::Discrete { anchors: vec![0.5, 1.0], map: SmoothMap::Product { indices: vec![0, 1], scale: 1.0 } }, g).unwrap();
        let runs: Vec<HedgeResult> = (0..16).map(|sc| replicate(&p, &model, 1.0, sc, 2, 1024, 4).unwrap()).collect();
        let hedged = rms_error(&runs);
        let mean = runs.iter().map(|r| r.payoff).sum::<f64>() / runs.len() as f64;
        let unhedged = (runs.iter().map(|r| (r.payoff - mean).powi(2)).sum::<f64>() / (runs.len() - 1) as f64).sqrt();
        assert!(hedged * 4.0 < unhedged, "hedged {hedged} unhedged {unhedged}");
    }

    #[test]
    fn tower_property_along_a_scenario() {
        let g = grid(16);
        let model = gbm(0.3);
        let p = PathPayoff::new(PayoffSpec::Discrete { anchors: vec![0.5, 1.0], map: SmoothMap::Product { indices: vec![0, 1], scale: 1.0 } }, g).unwrap();
        let lags = full_lags(&g);
        let mut incs = Vec::new();
        for sc in 0..64 {
            let (x, _) = scenario_path(&model, 1.0, &g, 21, sc).unwrap();
            let a = estimate_u(&p, &model, 0.25, &window_at_node(&x, 4, &lags), 2048, inner_seed(21, sc, 4)).unwrap();
            let b = estimate_u(&p, &model, 0.75, &window_at_node(&x, 12, &lags), 2048, inner_seed(21, sc, 12)).unwrap();
            incs.push(b.value - a.value);
        }
        let n = incs.len() as f64;
        let mean = incs.iter().sum::<f64>() / n;
        let sd = (incs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(mean.abs() < 3.0 * sd / n.sqrt(), "mean {mean} sd {sd}");
    }

    #[test]
    fn strategy_csv_layout() {
        let g = grid(8);
        let r = replicate(&terminal(g), &SdeModel::brownian(), 0.0, 0, 4, 8, 1).unwrap();
        let mut buf = Vec::new();
        r.write_strategy_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("s,xi,stderr\n0,1,0\n"));
    }
}
