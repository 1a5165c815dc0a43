//! Euler–Maruyama flow `Y^{s,η}` restarted from a past window, and its
//! Doléans-exponential first-variation weight.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::paths::{SampledPath, TimeGrid, WindowSlice};
use crate::rng;

/// Diffusion coefficient `σ(t, x)` with its x-derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Diffusion {
    /// `σ(t,x) = sigma`
    Constant { sigma: f64 },
    /// `σ(t,x) = sigma·x`
    Affine { sigma: f64 },
    /// `σ(t,x) = sigma·max(x, 0)`
    Degenerate { sigma: f64 },
    /// `σ(t,x) = sigma0 + sigma1·sin(x)`
    Sinusoidal { sigma0: f64, sigma1: f64 },
}

/// Drift coefficient `b(t, x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Drift {
    Zero,
    /// `b(t,x) = mu`
    Constant { mu: f64 },
    /// `b(t,x) = beta·x`
    Linear { beta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdeModel {
    pub diffusion: Diffusion,
    pub drift: Drift,
}

impl SdeModel {
    pub fn new(diffusion: Diffusion, drift: Drift) -> Self {
        Self { diffusion, drift }
    }

    /// Standard Brownian motion: `σ ≡ 1`, `b ≡ 0`.
    pub fn brownian() -> Self {
        Self::new(Diffusion::Constant { sigma: 1.0 }, Drift::Zero)
    }

    pub fn is_brownian(&self) -> bool {
        matches!(self.diffusion, Diffusion::Constant { sigma } if sigma == 1.0) && self.drift == Drift::Zero
    }

    #[inline]
    pub fn sigma(&self, _t: f64, x: f64) -> f64 {
        match self.diffusion {
            Diffusion::Constant { sigma } => sigma,
            Diffusion::Affine { sigma } => sigma * x,
            Diffusion::Degenerate { sigma } => sigma * x.max(0.0),
            Diffusion::Sinusoidal { sigma0, sigma1 } => sigma0 + sigma1 * x.sin(),
        }
    }

    #[inline]
    pub fn dsigma_dx(&self, _t: f64, x: f64) -> f64 {
        match self.diffusion {
            Diffusion::Constant { .. } => 0.0,
            Diffusion::Affine { sigma } => sigma,
            Diffusion::Degenerate { sigma } => {
                if x > 0.0 {
                    sigma
                } else {
                    0.0
                }
            }
            Diffusion::Sinusoidal { sigma1, .. } => sigma1 * x.cos(),
        }
    }

    #[inline]
    pub fn d2sigma_dx2(&self, _t: f64, x: f64) -> f64 {
        match self.diffusion {
            Diffusion::Sinusoidal { sigma1, .. } => -sigma1 * x.sin(),
            _ => 0.0,
        }
    }

    #[inline]
    pub fn drift(&self, _t: f64, x: f64) -> f64 {
        match self.drift {
            Drift::Zero => 0.0,
            Drift::Constant { mu } => mu,
            Drift::Linear { beta } => beta * x,
        }
    }

    #[inline]
    pub fn ddrift_dx(&self, _t: f64, _x: f64) -> f64 {
        match self.drift {
            Drift::Linear { beta } => beta,
            _ => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = match self.diffusion {
            Diffusion::Constant { sigma } | Diffusion::Affine { sigma } | Diffusion::Degenerate { sigma } => {
                sigma.is_finite()
            }
            Diffusion::Sinusoidal { sigma0, sigma1 } => sigma0.is_finite() && sigma1.is_finite(),
        } && match self.drift {
            Drift::Zero => true,
            Drift::Constant { mu } => mu.is_finite(),
            Drift::Linear { beta } => beta.is_finite(),
        };
        if finite {
            Ok(())
        } else {
            invalid("model parameters must be finite")
        }
    }
}

/// Brownian increments `ΔW ~ N(0, Δ)`, one row per path.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBatch {
    pub seed: u64,
    pub increments: Vec<Vec<f64>>,
}

impl NoiseBatch {
    /// Rows `first..first+count` of the noise keyed by `seed`.
    pub fn generate(seed: u64, grid: &TimeGrid, first: u64, count: usize) -> Self {
        let increments = (0..count as u64)
            .into_par_iter()
            .map(|p| noise_row(seed, first + p, grid))
            .collect();
        Self { seed, increments }
    }
}

/// One path of increments over every grid step.
pub fn noise_row(seed: u64, path: u64, grid: &TimeGrid) -> Vec<f64> {
    let sd = grid.dt().sqrt();
    let mut row = rng::standard_normal_row(seed, path, grid.steps());
    row.iter_mut().for_each(|z| *z *= sd);
    row
}

/// Brownian path started at 0 from [`noise_row`].
pub fn brownian_path(grid: TimeGrid, seed: u64, path: u64) -> SampledPath {
    let mut acc = 0.0;
    let mut values = Vec::with_capacity(grid.len());
    values.push(0.0);
    for dw in noise_row(seed, path, &grid) {
        acc += dw;
        values.push(acc);
    }
    SampledPath::new(grid, values).expect("finite brownian path")
}

/// Node index of `s`, checking `η` spans `[-T, 0]` on the same step.
pub(crate) fn flow_start(grid: &TimeGrid, s: f64, eta: &WindowSlice) -> Result<usize> {
    let k = grid
        .node_index(s)
        .ok_or_else(|| crate::Error::InvalidArgument(format!("start time {s} is not a grid node")))?;
    let lags = eta.lags();
    if lags.span() != grid.steps() || (lags.dt() - grid.dt()).abs() > 1e-12 * grid.dt() {
        return invalid("flow window must span [-T, 0] on the simulation step");
    }
    Ok(k)
}

/// `Y_t = η(t − s)` for `t ≤ s`, Euler–Maruyama afterwards driven by
/// `noise[k]` over `[t_k, t_{k+1}]`.
pub fn simulate_flow(
    model: &SdeModel,
    s: f64,
    eta: &WindowSlice,
    grid: &TimeGrid,
    noise: &[f64],
) -> Result<SampledPath> {
    let ks = flow_start(grid, s, eta)?;
    if noise.len() != grid.steps() {
        return invalid("noise row length must equal the number of steps");
    }
    let values = flow_values(model, ks, eta, grid, noise);
    SampledPath::new(*grid, values)
}

pub(crate) fn flow_values(model: &SdeModel, ks: usize, eta: &WindowSlice, grid: &TimeGrid, noise: &[f64]) -> Vec<f64> {
    let m = grid.steps();
    let dt = grid.dt();
    let mut values = Vec::with_capacity(m + 1);
    // t_j ≤ s ↦ lag t_j − s, i.e. lag-grid index m − (ks − j)
    values.extend((0..=ks).map(|j| eta.at(m - ks + j)));
    let mut y = values[ks];
    for (j, dw) in noise.iter().enumerate().skip(ks) {
        let t = grid.node(j);
        y += model.sigma(t, y) * dw + model.drift(t, y) * dt;
        values.push(y);
    }
    values
}

/// Cumulative log Doléans exponent from node `ks`: entry `j − ks` holds
/// `∫_s^{t_j} ∂σ dW − ½∫(∂σ)² dξ + ∫∂b dξ` (left-point sums).
pub(crate) fn log_weights(model: &SdeModel, values: &[f64], ks: usize, grid: &TimeGrid, noise: &[f64]) -> Vec<f64> {
    let dt = grid.dt();
    let mut out = Vec::with_capacity(grid.len() - ks);
    let mut acc = 0.0;
    out.push(acc);
    for j in ks..grid.steps() {
        let t = grid.node(j);
        let y = values[j];
        let ds = model.dsigma_dx(t, y);
        acc += ds * noise[j] - 0.5 * ds * ds * dt + model.ddrift_dx(t, y) * dt;
        out.push(acc);
    }
    out
}

/// `𝓔{∫_s^ρ ∂ₓσ dW + ∫_s^ρ ∂ₓb dξ}` along a flow path, accumulated in log space.
pub fn variation_weight(model: &SdeModel, y: &SampledPath, s: f64, rho: f64, noise: &[f64]) -> Result<f64> {
    let grid = y.grid();
    let ks = grid
        .node_index(s)
        .ok_or_else(|| crate::Error::InvalidArgument(format!("s = {s} is not a grid node")))?;
    let kr = grid
        .node_index(rho)
        .ok_or_else(|| crate::Error::InvalidArgument(format!("rho = {rho} is not a grid node")))?;
    if kr < ks {
        return invalid(format!("rho = {rho} precedes s = {s}"));
    }
    if noise.len() != grid.steps() {
        return invalid("noise row length must equal the number of steps");
    }
    let logs = log_weights(model, y.values(), ks, grid, noise);
    Ok(logs[kr - ks].exp())
}
