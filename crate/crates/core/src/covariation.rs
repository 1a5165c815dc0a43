//! Regularized covariation `[X,Y]^ε` and orthogonality diagnostics.
//!
//! All integrals are left-point Riemann sums on the shared grid; `ε` is an
//! integer number of steps and forward values past `T` use `X_T`, so
//! `[X]^ε_T` carries a boundary tail of length `ε`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::paths::{SampledPath, TimeGrid};

/// Multiplicative slack allowed between consecutive sup-norms of a sweep.
pub const MONOTONE_SLACK: f64 = 1.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariationCurve {
    grid: TimeGrid,
    epsilon: f64,
    values: Vec<f64>,
}

impl CovariationCurve {
    pub(crate) fn from_parts(grid: TimeGrid, epsilon: f64, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self { grid, epsilon, values }
    }

    /// A curve given explicitly, e.g. a known bracket such as `[W]_t = t`.
    pub fn new(grid: TimeGrid, epsilon: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return invalid("curve length does not match grid");
        }
        if values.first().copied() != Some(0.0) {
            return invalid("a covariation curve must start at 0");
        }
        if values.iter().any(|v| !v.is_finite()) {
            return invalid("non-finite curve value");
        }
        Ok(Self { grid, epsilon, values })
    }

    /// Curve `t ↦ f(t)` with `f(0) = 0`; `epsilon` is recorded as 0.
    pub fn exact(grid: TimeGrid, f: impl Fn(f64) -> f64) -> Result<Self> {
        let mut values: Vec<f64> = grid.nodes().into_iter().map(f).collect();
        values[0] = 0.0;
        Self::new(grid, 0.0, values)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn last(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Value at a node index using the extension (0 before the origin).
    #[inline]
    pub fn at_index(&self, k: isize) -> f64 {
        self.values[k.clamp(0, self.grid.steps() as isize) as usize]
    }

    pub fn sup_distance(&self, other: &CovariationCurve) -> Result<f64> {
        if !self.grid.same_as(&other.grid) {
            return invalid("curves live on different grids");
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// `Σ c_i · curve_i` node-wise.
    pub fn linear_combination(terms: &[(f64, &CovariationCurve)]) -> Result<Self> {
        let (_, first) = terms
            .first()
            .ok_or_else(|| crate::Error::InvalidArgument("empty combination".into()))?;
        let mut values = vec![0.0; first.values.len()];
        for (c, curve) in terms {
            if !curve.grid.same_as(&first.grid) {
                return invalid("curves live on different grids");
            }
            for (acc, v) in values.iter_mut().zip(&curve.values) {
                *acc += c * v;
            }
        }
        Ok(Self::from_parts(first.grid, first.epsilon, values))
    }

    /// Node-wise mean of several curves, summed in input order.
    pub fn mean(curves: &[CovariationCurve]) -> Result<Self> {
        let w = 1.0 / curves.len().max(1) as f64;
        let terms: Vec<(f64, &CovariationCurve)> = curves.iter().map(|c| (w, c)).collect();
        Self::linear_combination(&terms)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t,estimate")?;
        for (k, v) in self.values.iter().enumerate() {
            writeln!(out, "{},{}", self.grid.node(k), v)?;
        }
        Ok(())
    }
}

/// Steps spanned by `ε`, checked to lie in `1..=M`.
pub(crate) fn epsilon_steps(grid: &TimeGrid, epsilon: f64) -> Result<usize> {
    let k = grid.steps_for(epsilon, "epsilon")?;
    if k == 0 || k > grid.steps() {
        return invalid(format!("epsilon = {epsilon} must span between 1 and M steps"));
    }
    Ok(k)
}

/// Left-point accumulation `Σ_{j<k} Δ/ε · integrand(j)` shared by every
/// regularization estimator so equal integrands give bit-equal curves.
pub(crate) fn accumulate(
    grid: &TimeGrid,
    epsilon: f64,
    mut integrand: impl FnMut(usize) -> f64,
) -> CovariationCurve {
    let scale = grid.dt() / epsilon;
    let mut values = Vec::with_capacity(grid.len());
    let mut acc = 0.0;
    values.push(acc);
    for j in 0..grid.steps() {
        acc += integrand(j) * scale;
        values.push(acc);
    }
    CovariationCurve::from_parts(*grid, epsilon, values)
}

/// `[X,Y]^ε_t = ∫₀ᵗ (X_{s+ε} − X_s)(Y_{s+ε} − Y_s)/ε ds`.
pub fn epsilon_covariation(x: &SampledPath, y: &SampledPath, epsilon: f64) -> Result<CovariationCurve> {
    x.check_same_grid(y, "epsilon_covariation")?;
    let k = epsilon_steps(x.grid(), epsilon)? as isize;
    Ok(accumulate(x.grid(), epsilon, |j| {
        let j = j as isize;
        (x.at_index(j + k) - x.at_index(j)) * (y.at_index(j + k) - y.at_index(j))
    }))
}

/// `∫₀ᵗ H_s (X_{s+ε} − X_s)(Y_{s+ε} − Y_s)/ε ds`.
pub fn weighted_bracket_integral(
    h: &SampledPath,
    x: &SampledPath,
    y: &SampledPath,
    epsilon: f64,
) -> Result<CovariationCurve> {
    x.check_same_grid(y, "weighted_bracket_integral")?;
    h.check_same_grid(x, "weighted_bracket_integral")?;
    let k = epsilon_steps(x.grid(), epsilon)? as isize;
    let hv = h.values();
    Ok(accumulate(x.grid(), epsilon, |j| {
        let i = j as isize;
        hv[j] * ((x.at_index(i + k) - x.at_index(i)) * (y.at_index(i + k) - y.at_index(i)))
    }))
}

/// Result of an ε-sweep of `[A,N]^ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthoReport {
    pub schedule: Vec<f64>,
    pub sup_norms: Vec<f64>,
    pub monotone: bool,
    pub final_magnitude: f64,
    pub threshold: f64,
    pub verdict: bool,
}

impl OrthoReport {
    /// Builds the verdict from per-ε sup-norms.
    pub fn from_sup_norms(schedule: Vec<f64>, sup_norms: Vec<f64>, threshold: f64) -> Self {
        let monotone = sup_norms
            .windows(2)
            .all(|w| w[1] <= MONOTONE_SLACK * w[0] || w[1] <= f64::MIN_POSITIVE);
        let final_magnitude = sup_norms.last().copied().unwrap_or(0.0);
        let verdict = monotone && final_magnitude <= threshold;
        Self { schedule, sup_norms, monotone, final_magnitude, threshold, verdict }
    }
}

pub(crate) fn check_schedule(grid: &TimeGrid, schedule: &[f64]) -> Result<()> {
    if schedule.is_empty() {
        return invalid("empty epsilon schedule");
    }
    if schedule.windows(2).any(|w| !(w[1] < w[0])) {
        return invalid("epsilon schedule must be strictly decreasing");
    }
    for &e in schedule {
        epsilon_steps(grid, e)?;
    }
    Ok(())
}

/// Sup-norm of `[A,N]^ε` along a decreasing schedule, with a verdict that the
/// bracket vanishes: non-increase within [`MONOTONE_SLACK`] and a final
/// magnitude below `threshold`.
pub fn orthogonality_diagnostic(
    a: &SampledPath,
    n: &SampledPath,
    schedule: &[f64],
    threshold: f64,
) -> Result<OrthoReport> {
    a.check_same_grid(n, "orthogonality_diagnostic")?;
    check_schedule(a.grid(), schedule)?;
    let sup_norms = schedule
        .iter()
        .map(|&e| epsilon_covariation(a, n, e).map(|c| c.sup_norm()))
        .collect::<Result<Vec<_>>>()?;
    Ok(OrthoReport::from_sup_norms(schedule.to_vec(), sup_norms, threshold))
}

/// `ε = 2^-p` for each `p`, keeping only grid multiples.
pub fn dyadic_schedule(grid: &TimeGrid, powers: &[i32]) -> Result<Vec<f64>> {
    let schedule: Vec<f64> = powers.iter().map(|&p| 2f64.powi(-p)).collect();
    check_schedule(grid, &schedule)?;
    Ok(schedule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::brownian_path;

    fn linear_path(steps: usize) -> SampledPath {
        SampledPath::from_fn(TimeGrid::new(1.0, steps).unwrap(), |t| t).unwrap()
    }

    /// Exact integral of `(X_{s+ε}-X_s)²/ε` over `[0,1]` for `X_s = s` with the
    /// `X_T` extension.
    fn linear_oracle(eps: f64) -> f64 {
        eps * (1.0 - eps) + eps.powi(3) / 3.0 / eps
    }

    #[test]
    fn linear_path_matches_antiderivative() {
        let x = linear_path(200_000);
        let c = epsilon_covariation(&x, &x, 0.1).unwrap();
        let oracle = linear_oracle(0.1);
        assert!((oracle - 0.093_333_333_333).abs() < 1e-9);
        assert!((c.last() - oracle).abs() < 1e-6, "{} vs {oracle}", c.last());
    }

    #[test]
    fn constant_path_has_zero_bracket() {
        let g = TimeGrid::new(1.0, 64).unwrap();
        let x = SampledPath::constant(g, 3.0).unwrap();
        let y = brownian_path(g, 1, 0);
        let c = epsilon_covariation(&x, &y, 4.0 / 64.0).unwrap();
        assert!(c.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn epsilon_must_be_grid_multiple() {
        let x = linear_path(10);
        assert!(epsilon_covariation(&x, &x, 0.15).is_err());
        assert!(epsilon_covariation(&x, &x, 0.0).is_err());
        assert!(epsilon_covariation(&x, &x, 2.0).is_err());
        let other = linear_path(20);
        assert!(epsilon_covariation(&x, &other, 0.1).is_err());
    }

    #[test]
    fn unit_and_zero_weights() {
        let g = TimeGrid::new(1.0, 256).unwrap();
        let w = brownian_path(g, 3, 0);
        let ones = SampledPath::constant(g, 1.0).unwrap();
        let zeros = SampledPath::constant(g, 0.0).unwrap();
        let eps = 8.0 / 256.0;
        let plain = epsilon_covariation(&w, &w, eps).unwrap();
        let weighted = weighted_bracket_integral(&ones, &w, &w, eps).unwrap();
        assert_eq!(plain, weighted);
        let zero = weighted_bracket_integral(&zeros, &w, &w, eps).unwrap();
        assert!(zero.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weighted_bracket_of_brownian_motion() {
        // ∫₀ᵗ s d[W]_s = t²/2
        let g = TimeGrid::new(1.0, 1 << 14).unwrap();
        let h = SampledPath::from_fn(g, |t| t).unwrap();
        let eps = 16.0 * g.dt();
        let curves: Vec<_> = (0..32)
            .map(|seed| {
                let w = brownian_path(g, seed, 0);
                weighted_bracket_integral(&h, &w, &w, eps).unwrap()
            })
            .collect();
        let mean = CovariationCurve::mean(&curves).unwrap();
        for &t in &[0.25, 0.5, 0.75] {
            let k = g.node_index(t).unwrap();
            let oracle = t * t / 2.0;
            assert!((mean.values()[k] - oracle).abs() <= 0.05 * oracle, "t={t}");
        }
    }

    #[test]
    fn drift_is_orthogonal_to_brownian_motion() {
        let g = TimeGrid::new(1.0, 1 << 16).unwrap();
        let x = SampledPath::from_fn(g, |t| t).unwrap();
        let w = brownian_path(g, 7, 0);
        let schedule = dyadic_schedule(&g, &[4, 6, 8]).unwrap();
        let report = orthogonality_diagnostic(&x, &w, &schedule, 0.05).unwrap();
        assert!(report.sup_norms[2] < report.sup_norms[0]);
        assert!(report.verdict, "{report:?}");
    }

    #[test]
    fn bounded_variation_integral_is_orthogonal() {
        let g = TimeGrid::new(1.0, 1 << 14).unwrap();
        let w = brownian_path(g, 9, 0);
        let dt = g.dt();
        let mut acc = 0.0;
        let mut a = vec![0.0];
        for k in 0..g.steps() {
            acc += 0.5 * dt * (w.values()[k] + w.values()[k + 1]);
            a.push(acc);
        }
        let a = SampledPath::new(g, a).unwrap();
        let schedule = dyadic_schedule(&g, &[4, 6, 8]).unwrap();
        let report = orthogonality_diagnostic(&a, &w, &schedule, 0.05).unwrap();
        assert!(report.verdict, "{report:?}");

        let zero = SampledPath::constant(g, 0.0).unwrap();
        let report = orthogonality_diagnostic(&zero, &w, &schedule, 1e-12).unwrap();
        assert!(report.sup_norms.iter().all(|&s| s == 0.0));
        assert!(report.verdict);
    }

    #[test]
    fn brownian_motion_is_not_self_orthogonal() {
        let g = TimeGrid::new(1.0, 1 << 14).unwrap();
        let w = brownian_path(g, 2, 0);
        let schedule = dyadic_schedule(&g, &[4, 6, 8]).unwrap();
        let report = orthogonality_diagnostic(&w, &w, &schedule, 0.05).unwrap();
        assert!((report.final_magnitude - 1.0).abs() < 0.3);
        assert!(!report.verdict);
        assert!(orthogonality_diagnostic(&w, &w, &[], 0.1).is_err());
    }

    #[test]
    fn brownian_bracket_mean_close_to_horizon() {
        let g = TimeGrid::new(1.0, 1 << 16).unwrap();
        let eps = 16.0 * g.dt();
        let mean: f64 = (0..32)
            .map(|s| {
                let w = brownian_path(g, s, 0);
                epsilon_covariation(&w, &w, eps).unwrap().last()
            })
            .sum::<f64>()
            / 32.0;
        assert!((0.97..=1.03).contains(&mean), "{mean}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn path(vals: Vec<f64>) -> SampledPath {
            SampledPath::new(TimeGrid::new(1.0, vals.len() - 1).unwrap(), vals).unwrap()
        }

        proptest! {
            #[test]
            fn bilinear_symmetric_polarized(
                x1 in prop::collection::vec(-3.0f64..3.0, 17),
                x2 in prop::collection::vec(-3.0f64..3.0, 17),
                y in prop::collection::vec(-3.0f64..3.0, 17),
                a in -2.0f64..2.0, b in -2.0f64..2.0, k in 1usize..16,
            ) {
                let (x1, x2, y) = (path(x1), path(x2), path(y));
                let eps = k as f64 / 16.0;
                let mix = x1.combine(a, &x2, b).unwrap();
                let lhs = epsilon_covariation(&mix, &y, eps).unwrap();
                let c1 = epsilon_covariation(&x1, &y, eps).unwrap();
                let c2 = epsilon_covariation(&x2, &y, eps).unwrap();
                let rhs = CovariationCurve::linear_combination(&[(a, &c1), (b, &c2)]).unwrap();
                prop_assert!(lhs.sup_distance(&rhs).unwrap() < 1e-10);

                prop_assert_eq!(&c1, &epsilon_covariation(&y, &x1, eps).unwrap());

                let sum = x1.combine(1.0, &y, 1.0).unwrap();
                let s = epsilon_covariation(&sum, &sum, eps).unwrap();
                let xx = epsilon_covariation(&x1, &x1, eps).unwrap();
                let yy = epsilon_covariation(&y, &y, eps).unwrap();
                let pol = CovariationCurve::linear_combination(&[(0.5, &s), (-0.5, &xx), (-0.5, &yy)]).unwrap();
                prop_assert!(pol.sup_distance(&c1).unwrap() < 1e-10);
            }

            #[test]
            fn quadratic_variation_is_nondecreasing(x in prop::collection::vec(-3.0f64..3.0, 17), k in 1usize..16) {
                let x = path(x);
                let c = epsilon_covariation(&x, &x, k as f64 / 16.0).unwrap();
                prop_assert!(c.values().windows(2).all(|w| w[1] >= w[0]));
            }
        }
    }
}
