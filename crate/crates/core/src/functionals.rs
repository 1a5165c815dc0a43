//! Path functionals `F(t, η)` on window states, with Fréchet derivatives
//! reported as atoms at the anchors plus a density on the lag grid.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariation::CovariationCurve;
use crate::error::{invalid, Result};
use crate::maps::SmoothMap;
use crate::measures::{trapezoid, DaL2Measure};
use crate::paths::{window_at_node, AnchorSet, LagGrid, SampledPath, TimeGrid, WindowSlice};

/// Interface for user-supplied functionals. Implementations must be
/// read-only so they can be evaluated from several workers at once.
pub trait PathFunctional: Send + Sync {
    fn anchors(&self) -> &AnchorSet;
    fn evaluate(&self, t: f64, eta: &WindowSlice) -> Result<f64>;
    fn derivative(&self, t: f64, eta: &WindowSlice) -> Result<DaL2Measure>;

    /// Right limit in `t` of the derivative.
    fn derivative_right_limit(&self, t: f64, eta: &WindowSlice) -> Result<DaL2Measure> {
        self.derivative(t, eta)
    }

    /// Times in `(0, T)` where `t ↦ D^{δ₀}F` may jump.
    fn breakpoints(&self) -> Vec<f64> {
        Vec::new()
    }
}

#[derive(Clone)]
enum Node {
    /// `f(η(b_0), …, η(b_k))`; `nodes` are lag-grid indices of the `b_p`.
    Discrete { nodes: Vec<usize>, offsets: Vec<usize>, map: SmoothMap },
    Integral { density: Vec<f64> },
    Constant(f64),
    Sum(Vec<(f64, C1Functional)>),
    Product(Box<C1Functional>, Box<C1Functional>),
    Custom(Arc<dyn PathFunctional>),
}

/// A C¹ path functional built from the registry.
#[derive(Clone)]
pub struct C1Functional {
    anchors: AnchorSet,
    node: Node,
}

impl fmt::Debug for C1Functional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match &self.node {
            Node::Discrete { map, .. } => format!("Discrete({map:?})"),
            Node::Integral { .. } => "Integral".into(),
            Node::Constant(c) => format!("Constant({c})"),
            Node::Sum(t) => format!("Sum({:?})", t),
            Node::Product(a, b) => format!("Product({a:?}, {b:?})"),
            Node::Custom(_) => "Custom".into(),
        };
        write!(f, "C1Functional {{ anchors: {:?}, {kind} }}", self.anchors.lag_values())
    }
}

impl C1Functional {
    /// `f(η(b_0), …, η(b_k))` for lags `b_p` on the lag grid.
    pub fn discrete(lags: LagGrid, at: &[f64], map: SmoothMap) -> Result<Self> {
        if at.is_empty() {
            return invalid("discrete functional needs at least one lag");
        }
        map.check_arity(at.len())?;
        let anchors = AnchorSet::new(lags, at)?;
        let nodes = at.iter().map(|&y| lags.index_of(y)).collect::<Result<Vec<_>>>()?;
        let offsets = nodes.iter().map(|&j| lags.span() - j).collect();
        Ok(Self { anchors, node: Node::Discrete { nodes, offsets, map } })
    }

    /// `η(a)`.
    pub fn point(lags: LagGrid, a: f64) -> Result<Self> {
        Self::discrete(lags, &[a], SmoothMap::Linear { coeffs: vec![1.0], constant: 0.0 })
    }

    /// `η(a)²`.
    pub fn square(lags: LagGrid, a: f64) -> Result<Self> {
        Self::discrete(lags, &[a], SmoothMap::Power { index: 0, power: 2 })
    }

    /// `η(a)·η(b)`.
    pub fn product(lags: LagGrid, a: f64, b: f64) -> Result<Self> {
        Self::discrete(lags, &[a, b], SmoothMap::Product { indices: vec![0, 1], scale: 1.0 })
    }

    /// `∫ g(y) η(y) dy` with `g` sampled on the lag grid.
    pub fn integral(lags: LagGrid, density: Vec<f64>) -> Result<Self> {
        if density.len() != lags.len() {
            return invalid(format!("density has {} samples, lag grid has {}", density.len(), lags.len()));
        }
        if density.iter().any(|v| !v.is_finite()) {
            return invalid("non-finite density sample");
        }
        Ok(Self { anchors: AnchorSet::endpoints(lags), node: Node::Integral { density } })
    }

    pub fn constant(lags: LagGrid, value: f64) -> Self {
        Self { anchors: AnchorSet::endpoints(lags), node: Node::Constant(value) }
    }

    /// `Σ w_j F_j`.
    pub fn sum(terms: Vec<(f64, C1Functional)>) -> Result<Self> {
        let Some(first) = terms.first() else {
            return invalid("empty sum of functionals");
        };
        let mut anchors = first.1.anchors.clone();
        for (_, f) in &terms[1..] {
            anchors = anchors.union(&f.anchors)?;
        }
        Ok(Self { anchors, node: Node::Sum(terms) })
    }

    /// `F·G`.
    pub fn product_of(f: C1Functional, g: C1Functional) -> Result<Self> {
        let anchors = f.anchors.union(&g.anchors)?;
        Ok(Self { anchors, node: Node::Product(Box::new(f), Box::new(g)) })
    }

    pub fn custom(f: Arc<dyn PathFunctional>) -> Self {
        Self { anchors: f.anchors().clone(), node: Node::Custom(f) }
    }

    pub fn anchors(&self) -> &AnchorSet {
        &self.anchors
    }

    pub fn lag_grid(&self) -> &LagGrid {
        self.anchors.lag_grid()
    }

    /// False when some registry map has a kink (derivative only a.e.).
    pub fn is_smooth(&self) -> bool {
        match &self.node {
            Node::Discrete { map, .. } => map.is_differentiable(),
            Node::Sum(t) => t.iter().all(|(_, f)| f.is_smooth()),
            Node::Product(a, b) => a.is_smooth() && b.is_smooth(),
            _ => true,
        }
    }

    fn check(&self, eta: &WindowSlice) -> Result<()> {
        self.lag_grid().check_compatible(eta.lags(), "functional evaluation")
    }

    pub fn evaluate(&self, t: f64, eta: &WindowSlice) -> Result<f64> {
        self.check(eta)?;
        self.value(t, eta)
    }

    fn value(&self, t: f64, eta: &WindowSlice) -> Result<f64> {
        Ok(match &self.node {
            Node::Discrete { nodes, map, .. } => {
                let x: Vec<f64> = nodes.iter().map(|&j| eta.at(j)).collect();
                map.value(&x)
            }
            Node::Integral { density } => trapezoid(self.lag_grid(), density, eta.values()),
            Node::Constant(c) => *c,
            Node::Sum(terms) => {
                let mut acc = 0.0;
                for (w, f) in terms {
                    acc += w * f.value(t, eta)?;
                }
                acc
            }
            Node::Product(a, b) => a.value(t, eta)? * b.value(t, eta)?,
            Node::Custom(f) => f.evaluate(t, eta)?,
        })
    }

    /// Full derivative `DF(t, η)` on this functional's anchors.
    pub fn derivative(&self, t: f64, eta: &WindowSlice) -> Result<DaL2Measure> {
        self.check(eta)?;
        self.grad(t, eta, false)
    }

    pub fn derivative_right_limit(&self, t: f64, eta: &WindowSlice) -> Result<DaL2Measure> {
        self.check(eta)?;
        self.grad(t, eta, true)
    }

    fn grad(&self, t: f64, eta: &WindowSlice, right: bool) -> Result<DaL2Measure> {
        match &self.node {
            Node::Discrete { nodes, offsets, map } => {
                let x: Vec<f64> = nodes.iter().map(|&j| eta.at(j)).collect();
                let g = map.gradient_vec(&x);
                let mut atoms = vec![0.0; self.anchors.len()];
                for (p, &o) in offsets.iter().enumerate() {
                    let i = self.anchors.offsets().iter().position(|&a| a == o).expect("anchor of own lag");
                    atoms[i] += g[p];
                }
                DaL2Measure::new(self.anchors.clone(), atoms, vec![0.0; self.lag_grid().len()])
            }
            Node::Integral { density } => DaL2Measure::from_density(self.anchors.clone(), density.clone()),
            Node::Constant(_) => Ok(DaL2Measure::zero(self.anchors.clone())),
            Node::Sum(terms) => {
                let mut acc = DaL2Measure::zero(self.anchors.clone());
                for (w, f) in terms {
                    let d = f.grad(t, eta, right)?.reanchor(&self.anchors)?;
                    acc = acc.combine(1.0, &d, *w)?;
                }
                Ok(acc)
            }
            Node::Product(a, b) => {
                let (fa, fb) = (a.value(t, eta)?, b.value(t, eta)?);
                let da = a.grad(t, eta, right)?.reanchor(&self.anchors)?;
                let db = b.grad(t, eta, right)?.reanchor(&self.anchors)?;
                da.combine(fb, &db, fa)
            }
            Node::Custom(f) => {
                let d = if right { f.derivative_right_limit(t, eta)? } else { f.derivative(t, eta)? };
                d.anchors().check_same(&self.anchors, "custom functional derivative")?;
                Ok(d)
            }
        }
    }

    /// Ordered, deduplicated breakpoints of every custom component.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut out = match &self.node {
            Node::Sum(t) => t.iter().flat_map(|(_, f)| f.breakpoints()).collect(),
            Node::Product(a, b) => {
                let mut v = a.breakpoints();
                v.extend(b.breakpoints());
                v
            }
            Node::Custom(f) => f.breakpoints(),
            _ => Vec::new(),
        };
        out.sort_by(|a, b| a.total_cmp(b));
        out.dedup();
        out
    }
}

impl PathFunctional for C1Functional {
    fn anchors(&self) -> &AnchorSet {
        &self.anchors
    }

    fn evaluate(&self, t: f64, eta: &WindowSlice) -> Result<f64> {
        C1Functional::evaluate(self, t, eta)
    }

    fn derivative(&self, t: f64, eta: &WindowSlice) -> Result<DaL2Measure> {
        C1Functional::derivative(self, t, eta)
    }

    fn derivative_right_limit(&self, t: f64, eta: &WindowSlice) -> Result<DaL2Measure> {
        C1Functional::derivative_right_limit(self, t, eta)
    }

    fn breakpoints(&self) -> Vec<f64> {
        C1Functional::breakpoints(self)
    }
}

/// `DF(t, η)`; use [`DaL2Measure::delta0`], [`DaL2Measure::anchor_atom`],
/// [`DaL2Measure::density`] and [`DaL2Measure::perp`] for the split.
pub fn derivative_parts(f: &C1Functional, t: f64, eta: &WindowSlice) -> Result<DaL2Measure> {
    f.derivative(t, eta)
}

/// `t ↦ F(t, X_t(·))` at the grid nodes.
pub fn transform_path(f: &C1Functional, x: &SampledPath) -> Result<SampledPath> {
    let lags = node_lags(f, x.grid())?;
    let values = (0..x.grid().len())
        .into_par_iter()
        .map(|k| f.evaluate(x.grid().node(k), &window_at_node(x, k, &lags)))
        .collect::<Result<Vec<_>>>()?;
    SampledPath::new(*x.grid(), values)
}

/// The functional's lag grid, checked to share the path's step.
pub(crate) fn node_lags(f: &C1Functional, grid: &TimeGrid) -> Result<LagGrid> {
    let lags = *f.lag_grid();
    if (lags.dt() - grid.dt()).abs() > 1e-12 * grid.dt() {
        return invalid(format!("lag step {} differs from time step {}", lags.dt(), grid.dt()));
    }
    Ok(lags)
}

/// Predicted `[F(X(·))]`: `Σ_i Σ_k (D^{δ_{a_i}}F)² ([M]_{t_{k+1}+a_i} − [M]_{t_k+a_i})`.
pub fn predicted_transform_qv(f: &C1Functional, x: &SampledPath, bracket: &CovariationCurve) -> Result<CovariationCurve> {
    transform_qv(f, x, bracket, 0)
}

/// The same sum restricted to anchors `i ≥ 1`: the predicted bracket of the
/// remainder in the Fukushima decomposition.
pub fn predicted_remainder_qv(f: &C1Functional, x: &SampledPath, bracket: &CovariationCurve) -> Result<CovariationCurve> {
    transform_qv(f, x, bracket, 1)
}

fn transform_qv(f: &C1Functional, x: &SampledPath, bracket: &CovariationCurve, first: usize) -> Result<CovariationCurve> {
    let grid = x.grid();
    if !grid.same_as(bracket.grid()) {
        return invalid("bracket curve and path use different grids");
    }
    let lags = node_lags(f, grid)?;
    let derivs = (0..grid.steps())
        .into_par_iter()
        .map(|k| f.derivative(grid.node(k), &window_at_node(x, k, &lags)))
        .collect::<Result<Vec<_>>>()?;
    let anchors = f.anchors();
    let mut values = Vec::with_capacity(grid.len());
    let mut acc = 0.0;
    values.push(acc);
    for (k, d) in derivs.iter().enumerate() {
        for i in first..anchors.len() {
            let w = d.anchor_atom(i);
            if w == 0.0 {
                continue;
            }
            let o = anchors.offset(i) as isize;
            let k = k as isize;
            acc += w * w * (bracket.at_index(k + 1 - o) - bracket.at_index(k - o));
        }
        values.push(acc);
    }
    CovariationCurve::new(*grid, bracket.epsilon(), values)
}

/// Growth exponents below this count as a bounded ratio.
pub const SPP_EXPONENT_LIMIT: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportReport {
    pub schedule: Vec<f64>,
    /// `∫ sup_η |D^⊥F|([-ε, 0))` per ε.
    pub quantities: Vec<f64>,
    /// `quantity / ε`.
    pub ratios: Vec<f64>,
    /// `log(r_last / r_first) / log(ε_first / ε_last)`, when both are positive.
    pub growth_exponent: Option<f64>,
    pub bounded: bool,
    pub sample_size: usize,
}

/// Near-zero total-variation mass of `D^⊥F` on `[-e·Δ, 0)`.
fn near_zero_mass(d: &DaL2Measure, e: usize) -> f64 {
    let anchors = d.anchors();
    let atoms: f64 = (1..anchors.len())
        .filter(|&i| anchors.offset(i) <= e)
        .map(|i| d.anchor_atom(i).abs())
        .sum();
    let lags = d.lag_grid();
    let g = d.density();
    let span = lags.span();
    let e = e.min(span);
    let inner: f64 = (span - e + 1..span).map(|j| g[j].abs()).sum();
    atoms + lags.dt() * (inner + 0.5 * (g[span - e].abs() + g[span].abs()))
}

/// Sampled surrogate of the support-predictability condition over `[0, T]`.
pub fn support_predictability_check(
    f: &C1Functional,
    states: &[WindowSlice],
    schedule: &[f64],
    grid: &TimeGrid,
) -> Result<SupportReport> {
    if states.is_empty() {
        return invalid("support check needs at least one sampled state");
    }
    if schedule.is_empty() {
        return invalid("support check needs a nonempty ε schedule");
    }
    let lags = f.lag_grid();
    let mut steps = Vec::with_capacity(schedule.len());
    for (n, &eps) in schedule.iter().enumerate() {
        let e = (eps / lags.dt()).round();
        if !(eps > 0.0) || e < 1.0 || (e * lags.dt() - eps).abs() > 1e-9 * eps.max(1.0) {
            return invalid(format!("ε = {eps} is not a positive multiple of the lag step"));
        }
        if n > 0 && eps >= schedule[n - 1] {
            return invalid("ε schedule must be strictly decreasing");
        }
        steps.push(e as usize);
    }
    let masses = (0..grid.steps())
        .into_par_iter()
        .map(|k| {
            let t = grid.node(k);
            let mut sup = vec![0.0f64; steps.len()];
            for eta in states {
                let d = f.derivative(t, eta)?;
                for (s, &e) in sup.iter_mut().zip(&steps) {
                    *s = s.max(near_zero_mass(&d, e));
                }
            }
            Ok(sup)
        })
        .collect::<Result<Vec<_>>>()?;
    let quantities: Vec<f64> = (0..steps.len())
        .map(|n| masses.iter().map(|m| m[n] * grid.dt()).sum())
        .collect();
    let ratios: Vec<f64> = quantities.iter().zip(schedule).map(|(q, e)| q / e).collect();
    let (r0, r1) = (ratios[0], *ratios.last().unwrap());
    let growth_exponent = if r0 > 0.0 && r1 > 0.0 && schedule.len() > 1 {
        Some((r1 / r0).ln() / (schedule[0] / schedule[schedule.len() - 1]).ln())
    } else {
        None
    };
    let bounded = r1 == 0.0 || growth_exponent.is_some_and(|p| p < SPP_EXPONENT_LIMIT) || (schedule.len() == 1 && r1.is_finite());
    Ok(SupportReport { schedule: schedule.to_vec(), quantities, ratios, growth_exponent, bounded, sample_size: states.len() })
}

/// Density shapes accepted by the integral functional in configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum DensitySpec {
    Constant { value: f64 },
    /// `intercept + slope·y`
    Linear { intercept: f64, slope: f64 },
    /// `scale·exp(rate·y)`
    Exponential { scale: f64, rate: f64 },
    /// `value` on `[from, to]`, zero elsewhere.
    Window { from: f64, to: f64, value: f64 },
    Samples { values: Vec<f64> },
}

impl DensitySpec {
    pub fn sample(&self, lags: &LagGrid) -> Result<Vec<f64>> {
        let ys = lags.lags();
        Ok(match self {
            DensitySpec::Constant { value } => vec![*value; ys.len()],
            DensitySpec::Linear { intercept, slope } => ys.iter().map(|y| intercept + slope * y).collect(),
            DensitySpec::Exponential { scale, rate } => ys.iter().map(|y| scale * (rate * y).exp()).collect(),
            DensitySpec::Window { from, to, value } => {
                if from > to {
                    return invalid("density window has from > to");
                }
                let tol = 1e-9 * lags.dt();
                ys.iter().map(|&y| if y >= from - tol && y <= to + tol { *value } else { 0.0 }).collect()
            }
            DensitySpec::Samples { values } => values.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedSpec {
    pub weight: f64,
    pub functional: FunctionalSpec,
}

/// Registry key plus parameter block, as read from configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FunctionalSpec {
    Point { lag: f64 },
    Square { lag: f64 },
    Product { lags: [f64; 2] },
    Discrete { lags: Vec<f64>, map: SmoothMap },
    Integral { density: DensitySpec },
    Constant { value: f64 },
    Sum { terms: Vec<WeightedSpec> },
    ProductOf { factors: Vec<FunctionalSpec> },
}

impl FunctionalSpec {
    pub fn build(&self, lags: &LagGrid) -> Result<C1Functional> {
        let lags = *lags;
        match self {
            FunctionalSpec::Point { lag } => C1Functional::point(lags, *lag),
            FunctionalSpec::Square { lag } => C1Functional::square(lags, *lag),
            FunctionalSpec::Product { lags: [a, b] } => C1Functional::product(lags, *a, *b),
            FunctionalSpec::Discrete { lags: at, map } => C1Functional::discrete(lags, at, map.clone()),
            FunctionalSpec::Integral { density } => {
                let g = density.sample(&lags)?;
                C1Functional::integral(lags, g)
            }
            FunctionalSpec::Constant { value } => Ok(C1Functional::constant(lags, *value)),
            FunctionalSpec::Sum { terms } => {
                let built = terms
                    .iter()
                    .map(|t| Ok((t.weight, t.functional.build(&lags)?)))
                    .collect::<Result<Vec<_>>>()?;
                C1Functional::sum(built)
            }
            FunctionalSpec::ProductOf { factors } => {
                let mut it = factors.iter();
                let Some(first) = it.next() else {
                    return invalid("product of no functionals");
                };
                let mut acc = first.build(&lags)?;
                for f in it {
                    acc = C1Functional::product_of(acc, f.build(&lags)?)?;
                }
                Ok(acc)
            }
        }
    }
}

/// One instance of every registry entry on the given lag grid, with
/// anchors at `0`, `-τ/2` and `-τ`.
pub fn registry_catalogue(lags: &LagGrid) -> Result<Vec<(String, C1Functional)>> {
    let tau = lags.tau();
    let mid = -((lags.span() / 2) as f64) * lags.dt();
    let specs = vec![
        ("point", FunctionalSpec::Point { lag: mid }),
        ("square", FunctionalSpec::Square { lag: 0.0 }),
        ("product", FunctionalSpec::Product { lags: [0.0, mid] }),
        (
            "discrete_sin",
            FunctionalSpec::Discrete {
                lags: vec![0.0, mid, -tau],
                map: SmoothMap::SinTimes { sin_index: 0, other: 2 },
            },
        ),
        (
            "discrete_exp",
            FunctionalSpec::Discrete { lags: vec![mid], map: SmoothMap::Exp { index: 0, rate: 0.7 } },
        ),
        ("integral", FunctionalSpec::Integral { density: DensitySpec::Exponential { scale: 1.0, rate: 2.0 } }),
        (
            "sum",
            FunctionalSpec::Sum {
                terms: vec![
                    WeightedSpec { weight: 2.0, functional: FunctionalSpec::Square { lag: mid } },
                    WeightedSpec {
                        weight: -0.5,
                        functional: FunctionalSpec::Integral { density: DensitySpec::Linear { intercept: 1.0, slope: 0.5 } },
                    },
                ],
            },
        ),
        (
            "product_of",
            FunctionalSpec::ProductOf {
                factors: vec![
                    FunctionalSpec::Point { lag: 0.0 },
                    FunctionalSpec::Integral { density: DensitySpec::Constant { value: 1.0 } },
                ],
            },
        ),
    ];
    specs.into_iter().map(|(n, s)| Ok((n.to_string(), s.build(lags)?))).collect()
}
