//! χ-covariation of window processes.
//!
//! [`chi_cov_direct`] pairs a `χ²` test measure with the tensor of window
//! increments at every time step. [`chi_cov_closed`] evaluates the limit
//! formula from lagged real brackets: only the atom matrix contributes, the
//! mixed and kernel blocks have zero χ-covariation.

use std::collections::BTreeMap;

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::covariation::{accumulate, epsilon_covariation, epsilon_steps, CovariationCurve};
use crate::error::{invalid, Result};
use crate::measures::{atom_pairing, kernel_pairing, mixed_pairing, Chi2Measure, Kernel};
use crate::paths::{AnchorSet, SampledPath, TimeGrid};

/// Above this many multiply-adds the correlation switches to FFT.
const DIRECT_CORRELATION_LIMIT: usize = 1 << 22;

/// `t ↦ ∫₀ᵗ ⟨μ, (X_{s+ε}(·) − X_s(·)) ⊗ (Y_{s+ε}(·) − Y_s(·))⟩/ε ds`.
pub fn chi_cov_direct(
    x: &SampledPath,
    y: &SampledPath,
    mu: &Chi2Measure,
    epsilon: f64,
) -> Result<CovariationCurve> {
    x.check_same_grid(y, "chi_cov_direct")?;
    let grid = *x.grid();
    let k = epsilon_steps(&grid, epsilon)?;
    let lags = mu.lag_grid();
    if (lags.dt() - grid.dt()).abs() > 1e-12 * grid.dt() {
        return invalid("chi_cov_direct: lag grid step differs from the time step");
    }
    if lags.span() > grid.steps() {
        return invalid("chi_cov_direct: window longer than the horizon");
    }
    let anchors = mu.anchors();
    let n = anchors.len();
    let span = lags.span();
    let offsets: Vec<isize> = anchors.offsets().iter().map(|&o| o as isize).collect();
    let ki = k as isize;

    let w = lags.trapezoid_weights();
    let weighted = |g: &[f64]| -> Vec<f64> { g.iter().zip(&w).map(|(g, w)| g * w).collect() };
    let series = |path: &SampledPath, g: &[f64]| -> Option<Vec<f64>> {
        if g.iter().all(|&v| v == 0.0) {
            None
        } else {
            Some(window_correlation(path, &weighted(g), k))
        }
    };
    let left: Vec<Option<Vec<f64>>> = mu.left().iter().map(|g| series(x, g)).collect();
    let right: Vec<Option<Vec<f64>>> = mu.right().iter().map(|g| series(y, g)).collect();
    let has_mixed = left.iter().chain(&right).any(Option::is_some);
    let factors: Vec<(Vec<f64>, Vec<f64>)> = match mu.kernel() {
        Kernel::Factored(f) => f
            .iter()
            .map(|kf| {
                (
                    window_correlation(x, &weighted(&kf.left), k),
                    window_correlation(y, &weighted(&kf.right), k),
                )
            })
            .collect(),
        _ => Vec::new(),
    };
    let dense = matches!(mu.kernel(), Kernel::Dense(_));

    let mut dx = vec![0.0; n];
    let mut dy = vec![0.0; n];
    let mut ix = vec![0.0; n];
    let mut iy = vec![0.0; n];
    let mut wx = vec![0.0; if dense { span + 1 } else { 0 }];
    let mut wy = wx.clone();

    Ok(accumulate(&grid, epsilon, |j| {
        let j = j as isize;
        for i in 0..n {
            dx[i] = x.at_index(j + ki - offsets[i]) - x.at_index(j - offsets[i]);
            dy[i] = y.at_index(j + ki - offsets[i]) - y.at_index(j - offsets[i]);
        }
        let mut value = atom_pairing(mu.atoms(), &dx, &dy);
        if has_mixed {
            let ju = j as usize;
            for i in 0..n {
                ix[i] = left[i].as_ref().map_or(0.0, |c| c[ju + k] - c[ju]);
                iy[i] = right[i].as_ref().map_or(0.0, |c| c[ju + k] - c[ju]);
            }
            value += mixed_pairing(&ix, &dy) + mixed_pairing(&dx, &iy);
        }
        if !factors.is_empty() {
            let ju = j as usize;
            value += factors
                .iter()
                .map(|(cx, cy)| (cx[ju + k] - cx[ju]) * (cy[ju + k] - cy[ju]))
                .sum::<f64>();
        }
        if dense {
            let base = j - span as isize;
            for l in 0..=span {
                let m = base + l as isize;
                wx[l] = x.at_index(m + ki) - x.at_index(m);
                wy[l] = y.at_index(m + ki) - y.at_index(m);
            }
            value += kernel_pairing(lags, mu.kernel(), &wx, &wy);
        }
        value
    }))
}

/// `C[n] = Σ_l c_l X(t_n + y_l)` for `n = 0..=M+k`, with the path's boundary
/// extension; `c` holds quadrature-weighted density samples on the lag grid.
pub(crate) fn window_correlation(path: &SampledPath, c: &[f64], k: usize) -> Vec<f64> {
    let span = c.len() - 1;
    let out_len = path.grid().steps() + k + 1;
    let ext: Vec<f64> = (0..out_len + span)
        .map(|m| path.at_index(m as isize - span as isize))
        .collect();
    if out_len.saturating_mul(c.len()) <= DIRECT_CORRELATION_LIMIT {
        (0..out_len)
            .map(|n| c.iter().zip(&ext[n..n + c.len()]).map(|(a, b)| a * b).sum())
            .collect()
    } else {
        fft_correlation(&ext, c, out_len)
    }
}

fn fft_correlation(ext: &[f64], c: &[f64], out_len: usize) -> Vec<f64> {
    let size = (ext.len() + c.len()).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let mut a: Vec<Complex<f64>> = ext.iter().map(|&v| Complex::new(v, 0.0)).collect();
    a.resize(size, Complex::new(0.0, 0.0));
    let mut b: Vec<Complex<f64>> = c.iter().rev().map(|&v| Complex::new(v, 0.0)).collect();
    b.resize(size, Complex::new(0.0, 0.0));
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (u, v) in a.iter_mut().zip(&b) {
        *u *= v;
    }
    inv.process(&mut a);
    let span = c.len() - 1;
    let norm = 1.0 / size as f64;
    (0..out_len).map(|n| a[n + span].re * norm).collect()
}

/// Estimated (or supplied) lagged brackets `[X_{·+a_i}, Y_{·+a_j}]`.
#[derive(Debug, Clone)]
pub struct LaggedBrackets {
    grid: TimeGrid,
    curves: BTreeMap<(usize, usize), CovariationCurve>,
}

impl LaggedBrackets {
    pub fn new(grid: TimeGrid) -> Self {
        Self { grid, curves: BTreeMap::new() }
    }

    pub fn insert(&mut self, i: usize, j: usize, curve: CovariationCurve) -> Result<()> {
        if !curve.grid().same_as(&self.grid) {
            return invalid("bracket curve lives on a different grid");
        }
        self.curves.insert((i, j), curve);
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> Option<&CovariationCurve> {
        self.curves.get(&(i, j))
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// ε-estimates for every anchor pair, from exact node shifts of the paths.
    pub fn estimate(x: &SampledPath, y: &SampledPath, anchors: &AnchorSet, epsilon: f64) -> Result<Self> {
        x.check_same_grid(y, "lagged brackets")?;
        let xs: Vec<SampledPath> = anchors.lag_values().iter().map(|&a| x.shifted(a)).collect::<Result<_>>()?;
        let ys: Vec<SampledPath> = anchors.lag_values().iter().map(|&a| y.shifted(a)).collect::<Result<_>>()?;
        let mut out = Self::new(*x.grid());
        for (i, xi) in xs.iter().enumerate() {
            for (j, yj) in ys.iter().enumerate() {
                out.insert(i, j, epsilon_covariation(xi, yj, epsilon)?)?;
            }
        }
        Ok(out)
    }
}

/// `Σ_{i,j} μ({a_i, a_j}) · [X_{·+a_i}, Y_{·+a_j}]`.
pub fn chi_cov_closed(brackets: &LaggedBrackets, mu: &Chi2Measure) -> Result<CovariationCurve> {
    let mut terms = Vec::new();
    for (i, row) in mu.atoms().iter().enumerate() {
        for (j, &l) in row.iter().enumerate() {
            if l != 0.0 {
                let c = brackets.get(i, j).ok_or_else(|| {
                    crate::Error::InvalidArgument(format!("missing bracket for anchor pair ({i}, {j})"))
                })?;
                terms.push((l, c));
            }
        }
    }
    if terms.is_empty() {
        return CovariationCurve::exact(brackets.grid, |_| 0.0);
    }
    CovariationCurve::linear_combination(&terms)
}

/// Direct-vs-closed comparison for one ε.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiComparison {
    pub epsilon: f64,
    pub sup_discrepancy: f64,
}

/// Runs both routes on the same paths and reports their sup-distance.
pub fn compare_direct_closed(
    x: &SampledPath,
    y: &SampledPath,
    mu: &Chi2Measure,
    epsilon: f64,
) -> Result<ChiComparison> {
    let direct = chi_cov_direct(x, y, mu, epsilon)?;
    let brackets = LaggedBrackets::estimate(x, y, mu.anchors(), epsilon)?;
    let closed = chi_cov_closed(&brackets, mu)?;
    Ok(ChiComparison { epsilon, sup_discrepancy: direct.sup_distance(&closed)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariation::dyadic_schedule;
    use crate::flow::brownian_path;
    use crate::measures::{KernelFactor, tensor_product, DaL2Measure, pair_square};
    use crate::paths::{window_at_node, LagGrid};

    fn setup(steps: usize, tau: f64, seed: u64) -> (TimeGrid, AnchorSet, SampledPath) {
        let g = TimeGrid::new(1.0, steps).unwrap();
        let lags = LagGrid::new(tau, &g).unwrap();
        let anchors = AnchorSet::endpoints(lags);
        (g, anchors, brownian_path(g, seed, 0))
    }

    /// Direct estimator computed by materializing windows and calling the
    /// generic pairing at every step.
    fn brute_force(x: &SampledPath, y: &SampledPath, mu: &Chi2Measure, eps: f64) -> Vec<f64> {
        let g = x.grid();
        let k = g.steps_for(eps, "eps").unwrap();
        let lags = mu.lag_grid();
        let window = |p: &SampledPath, j: usize| window_at_node(p, j, lags);
        let mut acc = 0.0;
        let mut out = vec![0.0];
        for j in 0..g.steps() {
            let dxw = window(x, j + k).axpy(-1.0, &window(x, j)).unwrap();
            let dyw = window(y, j + k).axpy(-1.0, &window(y, j)).unwrap();
            acc += pair_square(mu, &dxw, &dyw).unwrap() * (g.dt() / eps);
            out.push(acc);
        }
        out
    }

    #[test]
    fn dirac_at_origin_is_bit_identical_to_real_bracket() {
        let (g, anchors, w) = setup(512, 0.25, 4);
        let v = brownian_path(g, 5, 0);
        let mu = Chi2Measure::dirac(anchors, 0, 0, 1.0).unwrap();
        let eps = 8.0 * g.dt();
        let direct = chi_cov_direct(&w, &v, &mu, eps).unwrap();
        let real = epsilon_covariation(&w, &v, eps).unwrap();
        assert_eq!(direct.values(), real.values());
    }

    #[test]
    fn direct_matches_brute_force_for_all_blocks() {
        let g = TimeGrid::new(1.0, 64).unwrap();
        let lags = LagGrid::new(0.25, &g).unwrap();
        let anchors = AnchorSet::new(lags, &[-0.125]).unwrap();
        let x = brownian_path(g, 1, 0);
        let y = brownian_path(g, 2, 0);
        let dens: Vec<f64> = lags.lags().iter().map(|l| (3.0 * l).cos()).collect();
        let a = DaL2Measure::new(anchors.clone(), vec![1.0, -0.5, 0.25], dens.clone()).unwrap();
        let b = DaL2Measure::new(anchors.clone(), vec![0.3, 0.0, 2.0], dens.iter().map(|v| v * v).collect()).unwrap();
        let mu = tensor_product(&a, &b).unwrap();
        let eps = 4.0 * g.dt();
        let direct = chi_cov_direct(&x, &y, &mu, eps).unwrap();
        let brute = brute_force(&x, &y, &mu, eps);
        for (u, v) in direct.values().iter().zip(&brute) {
            assert!((u - v).abs() < 1e-12, "{u} vs {v}");
        }

        let n = lags.len();
        let dense: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| (i as f64 - j as f64).sin()).collect()).collect();
        let mu = Chi2Measure::from_kernel(anchors, Kernel::Dense(dense)).unwrap();
        let direct = chi_cov_direct(&x, &y, &mu, eps).unwrap();
        let brute = brute_force(&x, &y, &mu, eps);
        for (u, v) in direct.values().iter().zip(&brute) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn fft_and_direct_correlation_agree() {
        let g = TimeGrid::new(1.0, 300).unwrap();
        let p = brownian_path(g, 8, 0);
        let c: Vec<f64> = (0..41).map(|i| (i as f64 * 0.3).sin()).collect();
        let direct = window_correlation(&p, &c, 5);
        let ext: Vec<f64> = (0..direct.len() + 40).map(|m| p.at_index(m as isize - 40)).collect();
        let fft = fft_correlation(&ext, &c, direct.len());
        for (a, b) in direct.iter().zip(&fft) {
            assert!((a - b).abs() < 1e-11);
        }
    }

    #[test]
    fn kernel_part_decays_for_brownian_windows() {
        let (g, anchors, w) = setup(1 << 14, 0.25, 3);
        let lags = *anchors.lag_grid();
        let ones = vec![1.0; lags.len()];
        let mu = Chi2Measure::from_kernel(anchors, Kernel::Factored(vec![KernelFactor { left: ones.clone(), right: ones }])).unwrap();
        let sups: Vec<f64> = dyadic_schedule(&g, &[3, 5, 7])
            .unwrap()
            .into_iter()
            .map(|e| chi_cov_direct(&w, &w, &mu, e).unwrap().sup_norm())
            .collect();
        assert!(sups[2] < sups[1] && sups[1] < sups[0], "{sups:?}");
    }

    #[test]
    fn off_diagonal_atoms_decay() {
        let (g, anchors, w) = setup(1 << 14, 0.25, 6);
        let mu = Chi2Measure::dirac(anchors, 0, 1, 1.0).unwrap();
        let sups: Vec<f64> = dyadic_schedule(&g, &[4, 6, 8])
            .unwrap()
            .into_iter()
            .map(|e| chi_cov_direct(&w, &w, &mu, e).unwrap().sup_norm())
            .collect();
        assert!(sups[2] < sups[0], "{sups:?}");
        assert!(sups[2] < 0.1);
    }

    #[test]
    fn closed_form_examples() {
        let g = TimeGrid::new(1.0, 64).unwrap();
        let lags = LagGrid::new(0.25, &g).unwrap();
        let anchors = AnchorSet::endpoints(lags);
        let mut br = LaggedBrackets::new(g);
        br.insert(0, 0, CovariationCurve::exact(g, |t| t).unwrap()).unwrap();
        let mu = Chi2Measure::dirac(anchors.clone(), 0, 0, 2.0).unwrap();
        let c = chi_cov_closed(&br, &mu).unwrap();
        for (k, v) in c.values().iter().enumerate() {
            assert_eq!(*v, 2.0 * g.node(k));
        }

        // [W]_{·+a} = (t + a)⁺
        br.insert(1, 1, CovariationCurve::exact(g, |t| (t - 0.25).max(0.0)).unwrap()).unwrap();
        let mu = Chi2Measure::dirac(anchors.clone(), 1, 1, 1.0).unwrap();
        let c = chi_cov_closed(&br, &mu).unwrap();
        assert_eq!(c.values()[g.node_index(0.75).unwrap()], 0.5);

        let n = lags.len();
        let mu = Chi2Measure::from_kernel(anchors.clone(), Kernel::Dense(vec![vec![1.0; n]; n])).unwrap();
        assert!(chi_cov_closed(&br, &mu).unwrap().values().iter().all(|&v| v == 0.0));

        let mu = Chi2Measure::dirac(anchors, 0, 1, 1.0).unwrap();
        assert!(chi_cov_closed(&br, &mu).is_err());
    }

    #[test]
    fn direct_and_closed_agree_on_atoms() {
        let (g, anchors, w) = setup(1 << 14, 0.25, 10);
        let mu = Chi2Measure::from_atoms(anchors, vec![vec![1.0, 0.5], vec![-0.3, 2.0]]).unwrap();
        let cmp = compare_direct_closed(&w, &w, &mu, 16.0 * g.dt()).unwrap();
        assert!(cmp.sup_discrepancy < 0.05 * (1.0 + mu.atom_l1()), "{cmp:?}");
    }

    #[test]
    fn both_routes_are_linear_in_the_measure() {
        let (g, anchors, w) = setup(256, 0.25, 12);
        let a = Chi2Measure::from_atoms(anchors.clone(), vec![vec![1.0, 0.5], vec![-0.3, 2.0]]).unwrap();
        let eps = 4.0 * g.dt();
        let d1 = chi_cov_direct(&w, &w, &a, eps).unwrap();
        let d3 = chi_cov_direct(&w, &w, &a.scaled(3.0), eps).unwrap();
        let scaled = CovariationCurve::linear_combination(&[(3.0, &d1)]).unwrap();
        assert!(d3.sup_distance(&scaled).unwrap() < 1e-12);
        let br = LaggedBrackets::estimate(&w, &w, &anchors, eps).unwrap();
        let c1 = chi_cov_closed(&br, &a).unwrap();
        let c3 = chi_cov_closed(&br, &a.scaled(3.0)).unwrap();
        let scaled = CovariationCurve::linear_combination(&[(3.0, &c1)]).unwrap();
        assert!(c3.sup_distance(&scaled).unwrap() < 1e-12);
    }
}
