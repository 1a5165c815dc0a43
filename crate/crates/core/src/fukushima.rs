//! Fukushima-type decomposition `F(t, X_t(·)) = M̄_t + Ā_t` and its
//! diagnostics.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariation::{check_schedule, epsilon_covariation, orthogonality_diagnostic, CovariationCurve, OrthoReport};
use crate::error::Result;
use crate::functionals::{node_lags, predicted_remainder_qv, transform_path, C1Functional};
use crate::paths::{window_at_node, SampledPath};

/// Tolerance for matching a grid node to a breakpoint, in steps.
const BREAKPOINT_SNAP: f64 = 1e-9;

/// `M̄_t = F(0, X_0(·)) + Σ D^{δ₀}F(t_k, X_{t_k}(·))·(M_{t_{k+1}} − M_{t_k})`.
///
/// At a breakpoint of `F` the integrand is the right limit.
pub fn martingale_part(f: &C1Functional, x: &SampledPath, m: &SampledPath) -> Result<SampledPath> {
    x.check_same_grid(m, "martingale_part")?;
    let grid = x.grid();
    let lags = node_lags(f, grid)?;
    let breaks = f.breakpoints();
    let integrand = (0..grid.steps())
        .into_par_iter()
        .map(|k| {
            let t = grid.node(k);
            let eta = window_at_node(x, k, &lags);
            let right = breaks.iter().any(|&b| (b - t).abs() <= BREAKPOINT_SNAP * grid.dt());
            let d = if right { f.derivative_right_limit(t, &eta)? } else { f.derivative(t, &eta)? };
            Ok(d.delta0())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut acc = f.evaluate(0.0, &window_at_node(x, 0, &lags))?;
    let mv = m.values();
    let mut values = Vec::with_capacity(grid.len());
    values.push(acc);
    for (k, h) in integrand.iter().enumerate() {
        acc += h * (mv[k + 1] - mv[k]);
        values.push(acc);
    }
    SampledPath::new(*grid, values)
}

/// Splits `t` as `m + r` exactly in floating point. `r` is `t − m` nudged by
/// a few ulps; when no such `r` exists (heavy cancellation) the returned
/// total is `m + r`, which differs from `t` by at most one ulp of `m`.
fn exact_split(t: f64, m: f64) -> (f64, f64) {
    let mut r = t - m;
    for _ in 0..8 {
        let s = m + r;
        if s == t {
            return (t, r);
        }
        r = if s < t { r.next_up() } else { r.next_down() };
    }
    let r = t - m;
    (m + r, r)
}

/// Comparison of the ε-estimated `[Ā]` with the prediction from the
/// derivative atoms at `a_i`, `i ≥ 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemainderBracket {
    pub schedule: Vec<f64>,
    pub sup_discrepancies: Vec<f64>,
    /// `[Ā]^ε` at the smallest ε.
    pub estimated: CovariationCurve,
    pub predicted: CovariationCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// One report per test martingale.
    pub orthogonality: Vec<OrthoReport>,
    pub remainder_bracket: RemainderBracket,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionResult {
    pub transformed: SampledPath,
    pub martingale_part: SampledPath,
    pub remainder: SampledPath,
    pub diagnostics: Diagnostics,
}

/// Builds `M̄` and `Ā`, sweeps `[Ā, N]^ε` for every test martingale and
/// compares `[Ā]^ε` with its prediction.
pub fn decompose(
    f: &C1Functional,
    x: &SampledPath,
    m: &SampledPath,
    bracket: &CovariationCurve,
    tests: &[SampledPath],
    schedule: &[f64],
    threshold: f64,
) -> Result<DecompositionResult> {
    check_schedule(x.grid(), schedule)?;
    let transformed = transform_path(f, x)?;
    let martingale = martingale_part(f, x, m)?;
    let (totals, remainder_values): (Vec<f64>, Vec<f64>) = transformed
        .values()
        .iter()
        .zip(martingale.values())
        .map(|(&t, &mb)| exact_split(t, mb))
        .unzip();
    let transformed = SampledPath::new(*x.grid(), totals)?;
    let remainder = SampledPath::new(*x.grid(), remainder_values)?;
    let orthogonality = tests
        .iter()
        .map(|n| orthogonality_diagnostic(&remainder, n, schedule, threshold))
        .collect::<Result<Vec<_>>>()?;
    let predicted = predicted_remainder_qv(f, x, bracket)?;
    let mut sup_discrepancies = Vec::with_capacity(schedule.len());
    let mut estimated = None;
    for &eps in schedule {
        let est = epsilon_covariation(&remainder, &remainder, eps)?;
        sup_discrepancies.push(est.sup_distance(&predicted)?);
        estimated = Some(est);
    }
    Ok(DecompositionResult {
        transformed,
        martingale_part: martingale,
        remainder,
        diagnostics: Diagnostics {
            orthogonality,
            remainder_bracket: RemainderBracket {
                schedule: schedule.to_vec(),
                sup_discrepancies,
                estimated: estimated.expect("nonempty schedule"),
                predicted,
            },
        },
    })
}

impl DecompositionResult {
    /// Node-wise `transformed == martingale_part + remainder`.
    pub fn is_additive(&self) -> bool {
        self.transformed
            .values()
            .iter()
            .zip(self.martingale_part.values().iter().zip(self.remainder.values()))
            .all(|(&t, (&m, &r))| m + r == t)
    }

    /// Writes the three paths as CSV plus the diagnostics as JSON; returns
    /// the written files in a fixed order.
    pub fn write_bundle(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut out = Vec::new();
        for (name, path) in [
            ("transformed.csv", &self.transformed),
            ("martingale_part.csv", &self.martingale_part),
            ("remainder.csv", &self.remainder),
        ] {
            let p = dir.join(name);
            path.write_csv(BufWriter::new(File::create(&p)?))?;
            out.push(p);
        }
        let p = dir.join("diagnostics.json");
        serde_json::to_writer_pretty(BufWriter::new(File::create(&p)?), &self.diagnostics)?;
        out.push(p);
        Ok(out)
    }
}
