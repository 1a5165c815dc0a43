//! Finite-dimensional maps `f: ℝⁿ → ℝ` with gradients, shared by the
//! functional and payoff registries.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

type ValueFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type GradFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

/// User-supplied smooth map with its gradient.
#[derive(Clone)]
pub struct CustomMap {
    pub arity: usize,
    pub value: Arc<ValueFn>,
    pub gradient: Arc<GradFn>,
}

impl fmt::Debug for CustomMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CustomMap(arity = {})", self.arity)
    }
}

impl PartialEq for CustomMap {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.value, &other.value) && Arc::ptr_eq(&self.gradient, &other.gradient)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum SmoothMap {
    /// `constant + Σ cᵢxᵢ`
    Linear {
        coeffs: Vec<f64>,
        #[serde(default)]
        constant: f64,
    },
    /// `scale · Π x_i` over `indices`
    Product {
        indices: Vec<usize>,
        #[serde(default = "one")]
        scale: f64,
    },
    /// `x_index^power`
    Power { index: usize, power: i32 },
    /// `exp(rate · x_index)`
    Exp { index: usize, rate: f64 },
    /// `sin(x_i) · x_j`
    SinTimes { sin_index: usize, other: usize },
    /// `(x - strike)⁺` with a quadratic blend of total width `width` around the
    /// strike; `width = 0` is the plain call.
    SmoothedCall { index: usize, strike: f64, width: f64 },
    /// `1_{x_index ≥ threshold}`; gradient is reported as 0.
    Indicator { index: usize, threshold: f64 },
    #[serde(skip)]
    Custom(CustomMap),
}

fn one() -> f64 {
    1.0
}

impl SmoothMap {
    /// Smallest admissible input dimension.
    pub fn min_arity(&self) -> usize {
        match self {
            SmoothMap::Linear { coeffs, .. } => coeffs.len(),
            SmoothMap::Product { indices, .. } => indices.iter().map(|i| i + 1).max().unwrap_or(0),
            SmoothMap::Power { index, .. }
            | SmoothMap::Exp { index, .. }
            | SmoothMap::SmoothedCall { index, .. }
            | SmoothMap::Indicator { index, .. } => index + 1,
            SmoothMap::SinTimes { sin_index, other } => sin_index.max(other) + 1,
            SmoothMap::Custom(c) => c.arity,
        }
    }

    /// Whether the gradient is the true derivative everywhere.
    pub fn is_differentiable(&self) -> bool {
        match self {
            SmoothMap::Indicator { .. } => false,
            SmoothMap::SmoothedCall { width, .. } => *width > 0.0,
            _ => true,
        }
    }

    pub fn check_arity(&self, n: usize) -> Result<()> {
        let need = self.min_arity();
        let exact = matches!(self, SmoothMap::Linear { .. } | SmoothMap::Custom(_));
        if (exact && need != n) || need > n {
            return invalid(format!("map expects {need} inputs but is given {n}"));
        }
        if let SmoothMap::SmoothedCall { width, .. } = self {
            if *width < 0.0 {
                return invalid("smoothing width must be non-negative");
            }
        }
        Ok(())
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            SmoothMap::Linear { coeffs, constant } => {
                constant + coeffs.iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
            }
            SmoothMap::Product { indices, scale } => scale * indices.iter().map(|&i| x[i]).product::<f64>(),
            SmoothMap::Power { index, power } => x[*index].powi(*power),
            SmoothMap::Exp { index, rate } => (rate * x[*index]).exp(),
            SmoothMap::SinTimes { sin_index, other } => x[*sin_index].sin() * x[*other],
            SmoothMap::SmoothedCall { index, strike, width } => smoothed_call(x[*index] - strike, *width).0,
            SmoothMap::Indicator { index, threshold } => {
                if x[*index] >= *threshold {
                    1.0
                } else {
                    0.0
                }
            }
            SmoothMap::Custom(c) => (c.value)(x),
        }
    }

    /// Writes `∇f(x)` into `out` (length = input dimension).
    pub fn gradient(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|g| *g = 0.0);
        match self {
            SmoothMap::Linear { coeffs, .. } => out[..coeffs.len()].copy_from_slice(coeffs),
            SmoothMap::Product { indices, scale } => {
                for (pos, &i) in indices.iter().enumerate() {
                    let rest: f64 = indices
                        .iter()
                        .enumerate()
                        .filter(|&(p, _)| p != pos)
                        .map(|(_, &j)| x[j])
                        .product();
                    out[i] += scale * rest;
                }
            }
            SmoothMap::Power { index, power } => {
                out[*index] = *power as f64 * x[*index].powi(power - 1);
            }
            SmoothMap::Exp { index, rate } => out[*index] = rate * (rate * x[*index]).exp(),
            SmoothMap::SinTimes { sin_index, other } => {
                out[*sin_index] += x[*sin_index].cos() * x[*other];
                out[*other] += x[*sin_index].sin();
            }
            SmoothMap::SmoothedCall { index, strike, width } => {
                out[*index] = smoothed_call(x[*index] - strike, *width).1;
            }
            SmoothMap::Indicator { .. } => {}
            SmoothMap::Custom(c) => (c.gradient)(x, out),
        }
    }

    pub fn gradient_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        self.gradient(x, &mut g);
        g
    }
}

/// Value and slope of the blended call at moneyness `z`.
fn smoothed_call(z: f64, width: f64) -> (f64, f64) {
    let h = 0.5 * width;
    if width <= 0.0 || z >= h {
        if z > 0.0 {
            (z, 1.0)
        } else {
            (0.0, 0.0)
        }
    } else if z <= -h {
        (0.0, 0.0)
    } else {
        ((z + h).powi(2) / (2.0 * width), (z + h) / width)
    }
}
