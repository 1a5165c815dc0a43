//! Uniform time grids, sampled paths and window extraction on `[-τ, 0]`.
//!
//! Outside `[0, T]` a path is prolonged by continuity: `X_t = X_0` for
//! `t <= 0` and `X_t = X_T` for `t >= T`. Between nodes it is interpolated
//! linearly.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

const NODE_SNAP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return invalid(format!("horizon must be positive, got {horizon}"));
        }
        if steps < 2 {
            return invalid(format!("grid needs at least 2 steps, got {steps}"));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn node(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.node(k)).collect()
    }

    /// Index of the node at `t`, if `t` is a grid node up to round-off.
    pub fn node_index(&self, t: f64) -> Option<usize> {
        let x = t / self.dt();
        let k = x.round();
        if (x - k).abs() <= NODE_SNAP * x.abs().max(1.0) && k >= 0.0 && k <= self.steps as f64 {
            Some(k as usize)
        } else {
            None
        }
    }

    /// Number of steps spanned by a duration that must be a grid multiple.
    pub fn steps_for(&self, duration: f64, what: &str) -> Result<usize> {
        let x = duration / self.dt();
        let k = x.round();
        if !(duration.is_finite()) || (x - k).abs() > NODE_SNAP * x.abs().max(1.0) || k < 0.0 {
            return invalid(format!(
                "{what} = {duration} is not an integer multiple of the step {}",
                self.dt()
            ));
        }
        Ok(k as usize)
    }

    pub fn same_as(&self, other: &TimeGrid) -> bool {
        self.steps == other.steps
            && (self.horizon - other.horizon).abs() <= 1e-12 * self.horizon.max(other.horizon)
    }
}

/// Real process realization on a uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledPath {
    grid: TimeGrid,
    values: Vec<f64>,
}

impl SampledPath {
    pub fn new(grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return invalid(format!(
                "path has {} values but the grid has {} nodes",
                values.len(),
                grid.len()
            ));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return invalid(format!("non-finite path value at node {k}"));
        }
        Ok(Self { grid, values })
    }

    /// Samples `f` at every grid node.
    pub fn from_fn(grid: TimeGrid, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values = grid.nodes().into_iter().map(f).collect();
        Self::new(grid, values)
    }

    pub fn constant(grid: TimeGrid, value: f64) -> Result<Self> {
        Self::new(grid, vec![value; grid.len()])
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Value at a (possibly out-of-range) node index, using the boundary extension.
    #[inline]
    pub fn at_index(&self, k: isize) -> f64 {
        let last = self.grid.steps as isize;
        self.values[k.clamp(0, last) as usize]
    }

    pub fn value_at(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return self.values[0];
        }
        if t >= self.grid.horizon {
            return self.values[self.grid.steps];
        }
        if let Some(k) = self.grid.node_index(t) {
            return self.values[k];
        }
        let x = t / self.grid.dt();
        let k = (x.floor() as usize).min(self.grid.steps - 1);
        let w = x - k as f64;
        (1.0 - w) * self.values[k] + w * self.values[k + 1]
    }

    /// The lagged path `t ↦ X_{t+lag}` for a non-positive lag that is a grid
    /// multiple; exact node shift with the extension below 0.
    pub fn shifted(&self, lag: f64) -> Result<Self> {
        if lag > 0.0 {
            return invalid(format!("lag must be non-positive, got {lag}"));
        }
        let back = self.grid.steps_for(-lag, "lag")? as isize;
        let values = (0..self.grid.len() as isize)
            .map(|k| self.at_index(k - back))
            .collect();
        Self::new(self.grid, values)
    }

    pub fn check_same_grid(&self, other: &SampledPath, what: &str) -> Result<()> {
        if self.grid.same_as(&other.grid) {
            Ok(())
        } else {
            invalid(format!("{what}: paths live on different grids"))
        }
    }

    /// Node-wise linear combination `a·self + b·other`.
    pub fn combine(&self, a: f64, other: &SampledPath, b: f64) -> Result<Self> {
        self.check_same_grid(other, "combine")?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Self::new(self.grid, values)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t,value")?;
        for (k, v) in self.values.iter().enumerate() {
            writeln!(out, "{},{}", self.grid.node(k), v)?;
        }
        Ok(())
    }

    /// Reads the `t,value` CSV format; spacing must be uniform to 1e-9 relative.
    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty path file".into()))??;
        if header.trim() != "t,value" {
            return Err(Error::Parse(format!("expected header `t,value`, got `{header}`")));
        }
        let mut times = Vec::new();
        let mut values = Vec::new();
        for (row, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let mut next = |name: &str| -> Result<f64> {
                fields
                    .next()
                    .ok_or_else(|| Error::Parse(format!("row {}: missing {name}", row + 2)))?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("row {}: {name}: {e}", row + 2)))
            };
            times.push(next("t")?);
            values.push(next("value")?);
        }
        if times.len() < 3 {
            return Err(Error::Parse("a path needs at least 3 nodes".into()));
        }
        let steps = times.len() - 1;
        let horizon = times[steps] - times[0];
        let dt = horizon / steps as f64;
        if times[0].abs() > 1e-9 * horizon.abs().max(1.0) {
            return Err(Error::Parse(format!("first time must be 0, got {}", times[0])));
        }
        for (k, w) in times.windows(2).enumerate() {
            if !(w[1] > w[0]) {
                return Err(Error::Parse(format!("times not strictly increasing at row {}", k + 3)));
            }
            if ((w[1] - w[0]) - dt).abs() > 1e-9 * dt {
                return Err(Error::Parse(format!("non-uniform spacing at row {}", k + 3)));
            }
        }
        Self::new(TimeGrid::new(horizon, steps)?, values)
    }
}

/// Lag nodes `y_j = -τ + jΔ`, `j = 0..=τ/Δ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagGrid {
    tau: f64,
    dt: f64,
    span: usize,
}

impl LagGrid {
    /// Window of length `tau` on the step of `grid`; `tau` must be a positive
    /// grid multiple no longer than the horizon.
    pub fn new(tau: f64, grid: &TimeGrid) -> Result<Self> {
        if !(tau > 0.0) || tau > grid.horizon() * (1.0 + 1e-12) {
            return invalid(format!("window length must lie in (0, T], got {tau}"));
        }
        let span = grid.steps_for(tau, "window length")?;
        Ok(Self { tau: span as f64 * grid.dt(), dt: grid.dt(), span })
    }

    /// Lag grid described directly by its step and number of steps.
    pub fn from_steps(dt: f64, span: usize) -> Result<Self> {
        if !(dt > 0.0) || span == 0 {
            return invalid("lag grid needs a positive step and at least one step");
        }
        Ok(Self { tau: span as f64 * dt, dt, span })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Number of steps `τ/Δ`; the grid has `span + 1` nodes.
    pub fn span(&self) -> usize {
        self.span
    }

    pub fn len(&self) -> usize {
        self.span + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn lag(&self, j: usize) -> f64 {
        if j == self.span {
            0.0
        } else {
            -self.tau + j as f64 * self.dt
        }
    }

    pub fn lags(&self) -> Vec<f64> {
        (0..self.len()).map(|j| self.lag(j)).collect()
    }

    /// Index of lag `y` (must be a node).
    pub fn index_of(&self, y: f64) -> Result<usize> {
        if y > 1e-12 * self.tau || y < -self.tau * (1.0 + 1e-12) {
            return invalid(format!("lag {y} outside [-{}, 0]", self.tau));
        }
        let back = (-y / self.dt).round();
        if ((-y / self.dt) - back).abs() > NODE_SNAP * back.max(1.0) {
            return invalid(format!("lag {y} is not a multiple of the step {}", self.dt));
        }
        Ok(self.span - back as usize)
    }

    pub fn compatible(&self, other: &LagGrid) -> bool {
        self.span == other.span && (self.dt - other.dt).abs() <= 1e-12 * self.dt
    }

    pub fn check_compatible(&self, other: &LagGrid, what: &str) -> Result<()> {
        if self.compatible(other) {
            Ok(())
        } else {
            invalid(format!("{what}: lag grids differ"))
        }
    }

    /// Trapezoid weights over the whole lag grid.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let mut w = vec![self.dt; self.len()];
        w[0] *= 0.5;
        w[self.span] *= 0.5;
        w
    }
}

/// A window state `η ∈ C([-τ, 0])` sampled on a lag grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSlice {
    lags: LagGrid,
    values: Vec<f64>,
}

impl WindowSlice {
    pub fn new(lags: LagGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != lags.len() {
            return invalid(format!(
                "window has {} values but the lag grid has {} nodes",
                values.len(),
                lags.len()
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return invalid("non-finite window value");
        }
        Ok(Self { lags, values })
    }

    pub fn from_fn(lags: LagGrid, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values = lags.lags().into_iter().map(f).collect();
        Self::new(lags, values)
    }

    pub fn constant(lags: LagGrid, value: f64) -> Self {
        Self { lags, values: vec![value; lags.len()] }
    }

    pub fn lags(&self) -> &LagGrid {
        &self.lags
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Value at lag node index `j`.
    pub fn at(&self, j: usize) -> f64 {
        self.values[j]
    }

    /// `η(0)`.
    pub fn present(&self) -> f64 {
        self.values[self.lags.span]
    }

    /// Value at lag `y` (a node of the lag grid).
    pub fn value(&self, y: f64) -> Result<f64> {
        Ok(self.values[self.lags.index_of(y)?])
    }

    /// `self + scale·other` on the same lag grid.
    pub fn axpy(&self, scale: f64, other: &WindowSlice) -> Result<Self> {
        self.lags.check_compatible(&other.lags, "axpy")?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + scale * b)
            .collect();
        Self::new(self.lags, values)
    }

    pub fn max_abs_diff(&self, other: &WindowSlice) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Window `X_t(·)` of `path` at time `t ∈ [0, T]`.
pub fn window_at(path: &SampledPath, t: f64, lags: &LagGrid) -> Result<WindowSlice> {
    let grid = path.grid();
    if !(t >= -1e-12 && t <= grid.horizon() * (1.0 + 1e-12)) {
        return invalid(format!("window time {t} outside [0, {}]", grid.horizon()));
    }
    if let Some(k) = grid.node_index(t) {
        if (lags.dt() - grid.dt()).abs() <= 1e-12 * grid.dt() {
            return Ok(window_at_node(path, k, lags));
        }
    }
    WindowSlice::from_fn(*lags, |y| path.value_at(t + y))
}

/// Window at grid node `k`, by exact node shifts. The lag grid must share the
/// path's step.
pub fn window_at_node(path: &SampledPath, k: usize, lags: &LagGrid) -> WindowSlice {
    let base = k as isize - lags.span() as isize;
    let values = (0..lags.len()).map(|j| path.at_index(base + j as isize)).collect();
    WindowSlice { lags: *lags, values }
}

/// Lags `a_N < … < a_1 < a_0 = 0` snapped to a lag grid, with `a_N = -τ`.
///
/// Anchor `i` sits `offset(i)` steps back from 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    lags: LagGrid,
    offsets: Vec<usize>,
}

impl AnchorSet {
    /// Builds the anchor set from arbitrary interior lags; `0` and `-τ` are
    /// always included and duplicates are merged.
    pub fn new(lags: LagGrid, interior: &[f64]) -> Result<Self> {
        let mut offsets = vec![0, lags.span()];
        for &y in interior {
            offsets.push(lags.span() - lags.index_of(y)?);
        }
        offsets.sort_unstable();
        offsets.dedup();
        Ok(Self { lags, offsets })
    }

    /// Only the mandatory anchors `{-τ, 0}`.
    pub fn endpoints(lags: LagGrid) -> Self {
        let mut offsets = vec![0, lags.span()];
        offsets.dedup();
        Self { lags, offsets }
    }

    pub fn lag_grid(&self) -> &LagGrid {
        &self.lags
    }

    /// Number of anchors, `N + 1`.
    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn offset(&self, i: usize) -> usize {
        self.offsets[i]
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Lag `a_i`.
    pub fn lag(&self, i: usize) -> f64 {
        -(self.offsets[i] as f64) * self.lags.dt()
    }

    pub fn lag_values(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.lag(i)).collect()
    }

    /// Lag-grid node index of anchor `i`.
    pub fn node(&self, i: usize) -> usize {
        self.lags.span() - self.offsets[i]
    }

    /// Anchor index for lag `y`, if `y` is an anchor.
    pub fn position(&self, y: f64) -> Option<usize> {
        let j = self.lags.index_of(y).ok()?;
        self.offsets.iter().position(|&o| self.lags.span() - o == j)
    }

    /// Smallest anchor set containing both.
    pub fn union(&self, other: &AnchorSet) -> Result<AnchorSet> {
        self.lags.check_compatible(&other.lags, "anchor union")?;
        let mut offsets: Vec<usize> = self.offsets.iter().chain(&other.offsets).copied().collect();
        offsets.sort_unstable();
        offsets.dedup();
        Ok(AnchorSet { lags: self.lags, offsets })
    }

    pub fn check_same(&self, other: &AnchorSet, what: &str) -> Result<()> {
        if self.lags.compatible(&other.lags) && self.offsets == other.offsets {
            Ok(())
        } else {
            invalid(format!("{what}: anchor sets differ"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SampledPath {
        SampledPath::new(TimeGrid::new(1.0, 2).unwrap(), vec![1.0, 2.0, 3.0]).unwrap()
    }

    #[test]
    fn grid_nodes() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        assert_eq!(g.nodes(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        let g = TimeGrid::new(2.0, 2).unwrap();
        assert_eq!(g.nodes(), vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn grid_rejects_bad_input() {
        assert!(matches!(TimeGrid::new(1.0, 1), Err(Error::InvalidArgument(_))));
        assert!(TimeGrid::new(0.0, 4).is_err());
        assert!(TimeGrid::new(-1.0, 4).is_err());
    }

    #[test]
    fn value_at_uses_extension_and_interpolation() {
        let p = small();
        assert_eq!(p.value_at(-0.3), 1.0);
        assert_eq!(p.value_at(1.7), 3.0);
        assert_eq!(p.value_at(0.25), 1.5);
        assert_eq!(p.value_at(0.5), 2.0);
    }

    #[test]
    fn windows_on_small_path() {
        let p = small();
        let lags = LagGrid::new(0.5, p.grid()).unwrap();
        assert_eq!(window_at(&p, 0.5, &lags).unwrap().values(), &[1.0, 2.0]);
        assert_eq!(window_at(&p, 0.25, &lags).unwrap().at(0), 1.0);
        assert_eq!(window_at(&p, 0.25, &lags).unwrap().present(), 1.5);
        assert_eq!(window_at(&p, 1.0, &lags).unwrap().values(), &[2.0, 3.0]);
        assert!(window_at(&p, 1.5, &lags).is_err());
        assert!(window_at(&p, -0.5, &lags).is_err());
    }

    #[test]
    fn lag_grid_alignment() {
        let g = TimeGrid::new(1.0, 8).unwrap();
        assert!(LagGrid::new(0.3, &g).is_err());
        let l = LagGrid::new(0.25, &g).unwrap();
        assert_eq!(l.lags(), vec![-0.25, -0.125, 0.0]);
        assert_eq!(l.index_of(-0.125).unwrap(), 1);
        assert!(l.index_of(-0.1).is_err());
    }

    #[test]
    fn anchors_always_contain_endpoints() {
        let g = TimeGrid::new(1.0, 8).unwrap();
        let l = LagGrid::new(0.5, &g).unwrap();
        let a = AnchorSet::new(l, &[-0.25, -0.25]).unwrap();
        assert_eq!(a.lag_values(), vec![0.0, -0.25, -0.5]);
        assert_eq!(a.position(-0.25), Some(1));
        assert!(AnchorSet::new(l, &[-0.2]).is_err());
    }

    #[test]
    fn shifted_path_uses_extension() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let p = SampledPath::new(g, vec![0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(p.shifted(-0.5).unwrap().values(), &[0.0, 0.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn csv_round_trip_and_validation() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let p = SampledPath::from_fn(g, |t| t * t).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let q = SampledPath::read_csv(&buf[..]).unwrap();
        assert!(q.grid().same_as(p.grid()));
        assert_eq!(q.values(), p.values());

        let bad = "t,value\n0,1\n0.25,1\n0.6,1\n0.75,1\n";
        assert!(SampledPath::read_csv(bad.as_bytes()).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn window_present_equals_value_at(vals in prop::collection::vec(-5.0f64..5.0, 9), t in 0.0f64..1.0) {
                let g = TimeGrid::new(1.0, 8).unwrap();
                let p = SampledPath::new(g, vals).unwrap();
                let lags = LagGrid::new(0.5, &g).unwrap();
                let w = window_at(&p, t, &lags).unwrap();
                prop_assert!((w.present() - p.value_at(t)).abs() < 1e-12);
            }

            #[test]
            fn window_is_lipschitz_in_time(vals in prop::collection::vec(-5.0f64..5.0, 9), t in 0.0f64..1.0, s in 0.0f64..1.0) {
                let g = TimeGrid::new(1.0, 8).unwrap();
                let p = SampledPath::new(g, vals).unwrap();
                let lags = LagGrid::new(0.5, &g).unwrap();
                let a = window_at(&p, t, &lags).unwrap();
                let b = window_at(&p, s, &lags).unwrap();
                let bound = lags.lags().iter()
                    .map(|y| (p.value_at(t + y) - p.value_at(s + y)).abs())
                    .fold(0.0, f64::max);
                prop_assert!(a.max_abs_diff(&b) <= bound + 1e-12);
            }

            #[test]
            fn nodes_reproduce_stored_values(vals in prop::collection::vec(-5.0f64..5.0, 9)) {
                let g = TimeGrid::new(1.0, 8).unwrap();
                let p = SampledPath::new(g, vals.clone()).unwrap();
                for (k, v) in vals.iter().enumerate() {
                    prop_assert_eq!(p.value_at(g.node(k)), *v);
                }
            }
        }
    }
}
