//! Finite-dimensional measures on `[-τ, 0]` and `[-τ, 0]²`.
//!
//! [`DaL2Measure`] holds Dirac atoms at the anchors plus a density sampled on
//! the lag grid. [`Chi2Measure`] holds the four blocks of the square space:
//! atom matrix, density⊗atom, atom⊗density and a kernel. Every L² integral
//! uses the trapezoid rule on the lag grid.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::paths::{AnchorSet, LagGrid, WindowSlice};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DaL2Wire", into = "DaL2Wire")]
pub struct DaL2Measure {
    anchors: AnchorSet,
    atoms: Vec<f64>,
    density: Vec<f64>,
}

impl DaL2Measure {
    pub fn new(anchors: AnchorSet, atoms: Vec<f64>, density: Vec<f64>) -> Result<Self> {
        if atoms.len() != anchors.len() {
            return invalid(format!(
                "{} atoms for {} anchors",
                atoms.len(),
                anchors.len()
            ));
        }
        if density.len() != anchors.lag_grid().len() {
            return invalid(format!(
                "density has {} samples, lag grid has {}",
                density.len(),
                anchors.lag_grid().len()
            ));
        }
        if atoms.iter().chain(&density).any(|v| !v.is_finite()) {
            return invalid("non-finite measure entry");
        }
        Ok(Self { anchors, atoms, density })
    }

    pub fn zero(anchors: AnchorSet) -> Self {
        let n = anchors.len();
        let l = anchors.lag_grid().len();
        Self { anchors, atoms: vec![0.0; n], density: vec![0.0; l] }
    }

    /// `δ_{a_i}` scaled by `weight`.
    pub fn atom(anchors: AnchorSet, i: usize, weight: f64) -> Result<Self> {
        if i >= anchors.len() {
            return invalid(format!("anchor index {i} out of range"));
        }
        let mut m = Self::zero(anchors);
        m.atoms[i] = weight;
        Ok(m)
    }

    pub fn from_density(anchors: AnchorSet, density: Vec<f64>) -> Result<Self> {
        let n = anchors.len();
        Self::new(anchors, vec![0.0; n], density)
    }

    pub fn anchors(&self) -> &AnchorSet {
        &self.anchors
    }

    pub fn lag_grid(&self) -> &LagGrid {
        self.anchors.lag_grid()
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    /// Mass of the atom at lag 0 (`D^{δ₀}`).
    pub fn delta0(&self) -> f64 {
        self.atoms[0]
    }

    /// Atom at anchor `a_i`.
    pub fn anchor_atom(&self, i: usize) -> f64 {
        self.atoms[i]
    }

    /// The measure with its atom at 0 removed (`D^⊥`).
    pub fn perp(&self) -> Self {
        let mut m = self.clone();
        m.atoms[0] = 0.0;
        m
    }

    pub fn is_zero(&self) -> bool {
        self.atoms.iter().chain(&self.density).all(|&v| v == 0.0)
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            anchors: self.anchors.clone(),
            atoms: self.atoms.iter().map(|v| c * v).collect(),
            density: self.density.iter().map(|v| c * v).collect(),
        }
    }

    /// `a·self + b·other`.
    pub fn combine(&self, a: f64, other: &DaL2Measure, b: f64) -> Result<Self> {
        self.anchors.check_same(&other.anchors, "measure combination")?;
        let mix = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| a * x + b * y).collect();
        Ok(Self {
            anchors: self.anchors.clone(),
            atoms: mix(&self.atoms, &other.atoms),
            density: mix(&self.density, &other.density),
        })
    }

    /// The same measure expressed on a larger anchor set.
    pub fn reanchor(&self, target: &AnchorSet) -> Result<Self> {
        self.lag_grid().check_compatible(target.lag_grid(), "reanchor")?;
        let mut atoms = vec![0.0; target.len()];
        for (i, &w) in self.atoms.iter().enumerate() {
            let Some(p) = target.offsets().iter().position(|&o| o == self.anchors.offset(i)) else {
                return invalid(format!("anchor {} missing from target set", self.anchors.lag(i)));
            };
            atoms[p] += w;
        }
        Ok(Self { anchors: target.clone(), atoms, density: self.density.clone() })
    }

    /// Component norms: (ℓ² of atoms, trapezoid L² of the density).
    pub fn component_norms(&self) -> (f64, f64) {
        let a = self.atoms.iter().map(|v| v * v).sum::<f64>().sqrt();
        let w = self.lag_grid().trapezoid_weights();
        let d = self.density.iter().zip(&w).map(|(g, w)| w * g * g).sum::<f64>().sqrt();
        (a, d)
    }
}

/// `Σ_i λ_i η(a_i) + ∫ g(x) η(x) dx`.
pub fn pair_lag(mu: &DaL2Measure, eta: &WindowSlice) -> Result<f64> {
    mu.lag_grid().check_compatible(eta.lags(), "pair_lag")?;
    let atoms: f64 = mu
        .atoms
        .iter()
        .enumerate()
        .map(|(i, l)| l * eta.at(mu.anchors.node(i)))
        .sum();
    Ok(atoms + trapezoid(mu.lag_grid(), &mu.density, eta.values()))
}

/// `∫ g(x) η(x) dx` on the lag grid; an empty density integrates to 0.
pub(crate) fn trapezoid(lags: &LagGrid, g: &[f64], eta: &[f64]) -> f64 {
    if g.is_empty() {
        return 0.0;
    }
    let last = lags.span();
    let inner: f64 = (1..last).map(|j| g[j] * eta[j]).sum();
    lags.dt() * (inner + 0.5 * (g[0] * eta[0] + g[last] * eta[last]))
}

/// Rank-one kernel piece `left(x)·right(y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelFactor {
    pub left: Vec<f64>,
    pub right: Vec<f64>,
}

/// L² part of a [`Chi2Measure`].
///
/// `Factored` keeps a sum of rank-one terms, which is how tensor products
/// arise and what keeps long windows tractable; `Dense` stores the full
/// lag-grid matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    Zero,
    Dense(Vec<Vec<f64>>),
    Factored(Vec<KernelFactor>),
}

impl Kernel {
    fn is_zero(&self) -> bool {
        match self {
            Kernel::Zero => true,
            Kernel::Dense(rows) => rows.iter().flatten().all(|&v| v == 0.0),
            Kernel::Factored(f) => f.is_empty(),
        }
    }

    fn check(&self, len: usize) -> Result<()> {
        let ok = match self {
            Kernel::Zero => true,
            Kernel::Dense(rows) => rows.len() == len && rows.iter().all(|r| r.len() == len),
            Kernel::Factored(f) => f.iter().all(|k| k.left.len() == len && k.right.len() == len),
        };
        if !ok {
            return invalid("kernel shape does not match the lag grid");
        }
        let finite = match self {
            Kernel::Zero => true,
            Kernel::Dense(rows) => rows.iter().flatten().all(|v| v.is_finite()),
            Kernel::Factored(f) => f.iter().all(|k| k.left.iter().chain(&k.right).all(|v| v.is_finite())),
        };
        if finite {
            Ok(())
        } else {
            invalid("non-finite kernel entry")
        }
    }

    fn scaled(&self, c: f64) -> Kernel {
        match self {
            Kernel::Zero => Kernel::Zero,
            Kernel::Dense(rows) => {
                Kernel::Dense(rows.iter().map(|r| r.iter().map(|v| c * v).collect()).collect())
            }
            Kernel::Factored(f) => Kernel::Factored(
                f.iter()
                    .map(|k| KernelFactor {
                        left: k.left.iter().map(|v| c * v).collect(),
                        right: k.right.clone(),
                    })
                    .collect(),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Chi2Wire", into = "Chi2Wire")]
pub struct Chi2Measure {
    anchors: AnchorSet,
    atoms: Vec<Vec<f64>>,
    left: Vec<Vec<f64>>,
    right: Vec<Vec<f64>>,
    kernel: Kernel,
}

impl Chi2Measure {
    /// `left[i]` is the density `g` of `g ⊗ δ_{a_i}`, `right[i]` that of
    /// `δ_{a_i} ⊗ g`; an empty vector stands for the zero density.
    pub fn new(
        anchors: AnchorSet,
        atoms: Vec<Vec<f64>>,
        left: Vec<Vec<f64>>,
        right: Vec<Vec<f64>>,
        kernel: Kernel,
    ) -> Result<Self> {
        let n = anchors.len();
        let l = anchors.lag_grid().len();
        if atoms.len() != n || atoms.iter().any(|r| r.len() != n) {
            return invalid(format!("atom matrix must be {n}x{n}"));
        }
        for (name, block) in [("left", &left), ("right", &right)] {
            if block.len() != n {
                return invalid(format!("{name} mixed block needs one density per anchor"));
            }
            if block.iter().any(|g| !g.is_empty() && g.len() != l) {
                return invalid(format!("{name} mixed density length must be {l}"));
            }
        }
        if atoms.iter().chain(&left).chain(&right).flatten().any(|v| !v.is_finite()) {
            return invalid("non-finite measure entry");
        }
        kernel.check(l)?;
        Ok(Self { anchors, atoms, left, right, kernel })
    }

    pub fn zero(anchors: AnchorSet) -> Self {
        let n = anchors.len();
        Self {
            anchors,
            atoms: vec![vec![0.0; n]; n],
            left: vec![Vec::new(); n],
            right: vec![Vec::new(); n],
            kernel: Kernel::Zero,
        }
    }

    /// Atoms-only measure `Σ λ_ij δ_{(a_i, a_j)}`.
    pub fn from_atoms(anchors: AnchorSet, atoms: Vec<Vec<f64>>) -> Result<Self> {
        let n = anchors.len();
        Self::new(anchors, atoms, vec![Vec::new(); n], vec![Vec::new(); n], Kernel::Zero)
    }

    /// `weight · δ_{(a_i, a_j)}`.
    pub fn dirac(anchors: AnchorSet, i: usize, j: usize, weight: f64) -> Result<Self> {
        let n = anchors.len();
        if i >= n || j >= n {
            return invalid("anchor index out of range");
        }
        let mut atoms = vec![vec![0.0; n]; n];
        atoms[i][j] = weight;
        Self::from_atoms(anchors, atoms)
    }

    pub fn from_kernel(anchors: AnchorSet, kernel: Kernel) -> Result<Self> {
        let n = anchors.len();
        Self::new(anchors, vec![vec![0.0; n]; n], vec![Vec::new(); n], vec![Vec::new(); n], kernel)
    }

    /// Element of the `χ⁰` subspace: only components attached to `a_0 = 0`.
    pub fn chi0(anchors: AnchorSet, atom00: f64, left0: Vec<f64>, right0: Vec<f64>, kernel: Kernel) -> Result<Self> {
        let n = anchors.len();
        let mut atoms = vec![vec![0.0; n]; n];
        atoms[0][0] = atom00;
        let mut left = vec![Vec::new(); n];
        let mut right = vec![Vec::new(); n];
        left[0] = left0;
        right[0] = right0;
        Self::new(anchors, atoms, left, right, kernel)
    }

    pub fn anchors(&self) -> &AnchorSet {
        &self.anchors
    }

    pub fn lag_grid(&self) -> &LagGrid {
        self.anchors.lag_grid()
    }

    pub fn atoms(&self) -> &[Vec<f64>] {
        &self.atoms
    }

    pub fn left(&self) -> &[Vec<f64>] {
        &self.left
    }

    pub fn right(&self) -> &[Vec<f64>] {
        &self.right
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    /// True when only the atom matrix is populated.
    pub fn is_atoms_only(&self) -> bool {
        self.left.iter().chain(&self.right).all(|g| g.iter().all(|&v| v == 0.0)) && self.kernel.is_zero()
    }

    /// `ℓ¹` norm of the atom matrix.
    pub fn atom_l1(&self) -> f64 {
        self.atoms.iter().flatten().map(|v| v.abs()).sum()
    }

    pub fn scaled(&self, c: f64) -> Self {
        let sc = |b: &Vec<Vec<f64>>| b.iter().map(|r| r.iter().map(|v| c * v).collect()).collect();
        Self {
            anchors: self.anchors.clone(),
            atoms: sc(&self.atoms),
            left: sc(&self.left),
            right: sc(&self.right),
            kernel: self.kernel.scaled(c),
        }
    }

    /// Component norms: atoms (Frobenius), left and right mixed blocks, kernel
    /// (all L² by trapezoid).
    pub fn component_norms(&self) -> [f64; 4] {
        let w = self.lag_grid().trapezoid_weights();
        let l2 = |g: &[f64]| g.iter().zip(&w).map(|(g, w)| w * g * g).sum::<f64>();
        let atoms = self.atoms.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        let left = self.left.iter().map(|g| l2(g)).sum::<f64>().sqrt();
        let right = self.right.iter().map(|g| l2(g)).sum::<f64>().sqrt();
        let kernel = match &self.kernel {
            Kernel::Zero => 0.0,
            Kernel::Dense(rows) => rows
                .iter()
                .enumerate()
                .map(|(i, r)| r.iter().enumerate().map(|(j, v)| w[i] * w[j] * v * v).sum::<f64>())
                .sum::<f64>()
                .sqrt(),
            Kernel::Factored(f) => {
                let n = w.len();
                let mut total = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        let v: f64 = f.iter().map(|k| k.left[i] * k.right[j]).sum();
                        total += w[i] * w[j] * v * v;
                    }
                }
                total.sqrt()
            }
        };
        [atoms, left, right, kernel]
    }
}

/// `∫∫ η₁(x) η₂(y) μ(dx, dy)`.
pub fn pair_square(mu: &Chi2Measure, eta1: &WindowSlice, eta2: &WindowSlice) -> Result<f64> {
    let lags = mu.lag_grid();
    lags.check_compatible(eta1.lags(), "pair_square")?;
    lags.check_compatible(eta2.lags(), "pair_square")?;
    let n = mu.anchors.len();
    let at1: Vec<f64> = (0..n).map(|i| eta1.at(mu.anchors.node(i))).collect();
    let at2: Vec<f64> = (0..n).map(|i| eta2.at(mu.anchors.node(i))).collect();
    let integrals1: Vec<f64> = mu.left.iter().map(|g| trapezoid(lags, g, eta1.values())).collect();
    let integrals2: Vec<f64> = mu.right.iter().map(|g| trapezoid(lags, g, eta2.values())).collect();
    let kernel = kernel_pairing(lags, &mu.kernel, eta1.values(), eta2.values());
    Ok(atom_pairing(&mu.atoms, &at1, &at2)
        + mixed_pairing(&integrals1, &at2)
        + mixed_pairing(&at1, &integrals2)
        + kernel)
}

#[inline]
pub(crate) fn atom_pairing(atoms: &[Vec<f64>], x: &[f64], y: &[f64]) -> f64 {
    atoms
        .iter()
        .zip(x)
        .map(|(row, xi)| xi * row.iter().zip(y).map(|(l, yj)| l * yj).sum::<f64>())
        .sum()
}

#[inline]
pub(crate) fn mixed_pairing(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

pub(crate) fn kernel_pairing(lags: &LagGrid, kernel: &Kernel, x: &[f64], y: &[f64]) -> f64 {
    match kernel {
        Kernel::Zero => 0.0,
        Kernel::Dense(rows) => {
            let w = lags.trapezoid_weights();
            rows.iter()
                .enumerate()
                .map(|(i, r)| {
                    w[i] * x[i] * r.iter().enumerate().map(|(j, k)| w[j] * k * y[j]).sum::<f64>()
                })
                .sum()
        }
        Kernel::Factored(f) => f
            .iter()
            .map(|k| trapezoid(lags, &k.left, x) * trapezoid(lags, &k.right, y))
            .sum(),
    }
}

/// Tensor product of two `D_a ⊕ L²` measures, expanded into the four blocks.
pub fn tensor_product(a: &DaL2Measure, b: &DaL2Measure) -> Result<Chi2Measure> {
    a.anchors.check_same(&b.anchors, "tensor_product")?;
    let nonzero = |g: &[f64]| g.iter().any(|&v| v != 0.0);
    let atoms = a
        .atoms
        .iter()
        .map(|la| b.atoms.iter().map(|lb| la * lb).collect())
        .collect();
    let right = a
        .atoms
        .iter()
        .map(|&la| {
            if la != 0.0 && nonzero(&b.density) {
                b.density.iter().map(|g| la * g).collect()
            } else {
                Vec::new()
            }
        })
        .collect();
    let left = b
        .atoms
        .iter()
        .map(|&lb| {
            if lb != 0.0 && nonzero(&a.density) {
                a.density.iter().map(|g| g * lb).collect()
            } else {
                Vec::new()
            }
        })
        .collect();
    let kernel = if nonzero(&a.density) && nonzero(&b.density) {
        Kernel::Factored(vec![KernelFactor { left: a.density.clone(), right: b.density.clone() }])
    } else {
        Kernel::Zero
    };
    Chi2Measure::new(a.anchors.clone(), atoms, left, right, kernel)
}

#[derive(Serialize, Deserialize)]
struct LagWire {
    tau: f64,
    dt: f64,
    anchors: Vec<f64>,
}

impl LagWire {
    fn from_anchors(a: &AnchorSet) -> Self {
        Self { tau: a.lag_grid().tau(), dt: a.lag_grid().dt(), anchors: a.lag_values() }
    }

    fn to_anchors(&self) -> Result<AnchorSet> {
        let span = (self.tau / self.dt).round();
        if !(span >= 1.0) || ((self.tau / self.dt) - span).abs() > 1e-9 * span {
            return Err(Error::Parse("tau must be a positive multiple of dt".into()));
        }
        let lags = LagGrid::from_steps(self.dt, span as usize)?;
        let anchors = AnchorSet::new(lags, &self.anchors)?;
        if anchors.len() != self.anchors.len() {
            return Err(Error::Parse("anchors must list 0 and -tau exactly once each".into()));
        }
        Ok(anchors)
    }
}

#[derive(Serialize, Deserialize)]
struct DaL2Wire {
    #[serde(flatten)]
    lags: LagWire,
    atoms: Vec<f64>,
    density: Vec<f64>,
}

impl TryFrom<DaL2Wire> for DaL2Measure {
    type Error = Error;
    fn try_from(w: DaL2Wire) -> Result<Self> {
        DaL2Measure::new(w.lags.to_anchors()?, w.atoms, w.density)
    }
}

impl From<DaL2Measure> for DaL2Wire {
    fn from(m: DaL2Measure) -> Self {
        Self { lags: LagWire::from_anchors(&m.anchors), atoms: m.atoms, density: m.density }
    }
}

#[derive(Serialize, Deserialize)]
struct Chi2Wire {
    #[serde(flatten)]
    lags: LagWire,
    atoms: Vec<Vec<f64>>,
    left: Vec<Vec<f64>>,
    right: Vec<Vec<f64>>,
    kernel: Kernel,
}

impl TryFrom<Chi2Wire> for Chi2Measure {
    type Error = Error;
    fn try_from(w: Chi2Wire) -> Result<Self> {
        Chi2Measure::new(w.lags.to_anchors()?, w.atoms, w.left, w.right, w.kernel)
    }
}

impl From<Chi2Measure> for Chi2Wire {
    fn from(m: Chi2Measure) -> Self {
        Self {
            lags: LagWire::from_anchors(&m.anchors),
            atoms: m.atoms,
            left: m.left,
            right: m.right,
            kernel: m.kernel,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::TimeGrid;

    fn unit_lags(steps: usize) -> LagGrid {
        LagGrid::new(1.0, &TimeGrid::new(1.0, steps).unwrap()).unwrap()
    }

    #[test]
    fn pair_lag_examples() {
        let lags = unit_lags(10);
        let anchors = AnchorSet::endpoints(lags);
        let eta = WindowSlice::from_fn(lags, |y| if y == 0.0 { 5.0 } else { 0.0 }).unwrap();
        let d0 = DaL2Measure::atom(anchors.clone(), 0, 1.0).unwrap();
        assert_eq!(pair_lag(&d0, &eta).unwrap(), 5.0);

        let ones = DaL2Measure::from_density(anchors.clone(), vec![1.0; lags.len()]).unwrap();
        let two = WindowSlice::constant(lags, 2.0);
        assert!((pair_lag(&ones, &two).unwrap() - 2.0).abs() < 1e-14);

        let diff = DaL2Measure::new(anchors, vec![1.0, -1.0], vec![0.0; lags.len()]).unwrap();
        let id = WindowSlice::from_fn(lags, |y| y).unwrap();
        assert_eq!(pair_lag(&diff, &id).unwrap(), 1.0);
    }

    #[test]
    fn pair_square_examples() {
        let lags = unit_lags(10);
        let anchors = AnchorSet::endpoints(lags);
        let e1 = WindowSlice::from_fn(lags, |y| if y == 0.0 { 2.0 } else { 7.0 }).unwrap();
        let e2 = WindowSlice::from_fn(lags, |y| if y == 0.0 { 3.0 } else { -1.0 }).unwrap();
        let d00 = Chi2Measure::dirac(anchors.clone(), 0, 0, 1.0).unwrap();
        assert_eq!(pair_square(&d00, &e1, &e2).unwrap(), 6.0);

        let n = lags.len();
        let k = Chi2Measure::from_kernel(anchors.clone(), Kernel::Dense(vec![vec![1.0; n]; n])).unwrap();
        let one = WindowSlice::constant(lags, 1.0);
        assert!((pair_square(&k, &one, &one).unwrap() - 1.0).abs() < 1e-14);

        let mixed = Chi2Measure::chi0(anchors, 0.0, vec![1.0; n], Vec::new(), Kernel::Zero).unwrap();
        let e2 = WindowSlice::from_fn(lags, |y| if y == 0.0 { 4.0 } else { 9.0 }).unwrap();
        assert!((pair_square(&mixed, &one, &e2).unwrap() - 4.0).abs() < 1e-14);
    }

    #[test]
    fn tensor_product_blocks() {
        let lags = unit_lags(4);
        let anchors = AnchorSet::endpoints(lags);
        let d0 = DaL2Measure::atom(anchors.clone(), 0, 1.0).unwrap();
        let t = tensor_product(&d0, &d0).unwrap();
        assert_eq!(t.atoms()[0][0], 1.0);
        assert!(t.left().iter().chain(t.right()).all(|g| g.is_empty()));
        assert_eq!(t.kernel(), &Kernel::Zero);

        let g: Vec<f64> = lags.lags().iter().map(|y| 1.0 + y).collect();
        let d0g = DaL2Measure::new(anchors.clone(), vec![1.0, 0.0], g.clone()).unwrap();
        let t = tensor_product(&d0g, &d0).unwrap();
        assert_eq!(t.atoms()[0][0], 1.0);
        assert_eq!(t.left()[0], g);
        assert!(t.left()[1].is_empty() && t.right().iter().all(|r| r.is_empty()));

        let h: Vec<f64> = lags.lags().iter().map(|y| y * y).collect();
        let pg = DaL2Measure::from_density(anchors.clone(), g.clone()).unwrap();
        let ph = DaL2Measure::from_density(anchors, h.clone()).unwrap();
        let t = tensor_product(&pg, &ph).unwrap();
        assert!(t.atoms().iter().flatten().all(|&v| v == 0.0));
        assert_eq!(t.kernel(), &Kernel::Factored(vec![KernelFactor { left: g, right: h }]));
    }

    #[test]
    fn mismatched_grids_are_rejected() {
        let a = AnchorSet::endpoints(unit_lags(4));
        let b = AnchorSet::endpoints(unit_lags(8));
        let ma = DaL2Measure::zero(a);
        let mb = DaL2Measure::zero(b.clone());
        assert!(tensor_product(&ma, &mb).is_err());
        let eta = WindowSlice::constant(*b.lag_grid(), 1.0);
        assert!(pair_lag(&ma, &eta).is_err());
        assert!(DaL2Measure::new(ma.anchors().clone(), vec![1.0], vec![0.0; 5]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let lags = unit_lags(4);
        let anchors = AnchorSet::new(lags, &[-0.5]).unwrap();
        let m = DaL2Measure::new(anchors.clone(), vec![1.0, 2.0, 3.0], vec![0.5; 5]).unwrap();
        let text = serde_json::to_string(&m).unwrap();
        assert!(text.contains("\"anchors\"") && text.contains("\"density\""));
        let back: DaL2Measure = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
        let t = tensor_product(&m, &m).unwrap();
        let back: Chi2Measure = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        assert_eq!(back, t);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn measure(lags: LagGrid, atoms: Vec<f64>, dens: Vec<f64>) -> DaL2Measure {
            let anchors = AnchorSet::new(lags, &[-0.5]).unwrap();
            DaL2Measure::new(anchors, atoms, dens).unwrap()
        }

        proptest! {
            #[test]
            fn tensor_factorizes(
                aa in prop::collection::vec(-2.0f64..2.0, 3), ga in prop::collection::vec(-2.0f64..2.0, 9),
                ab in prop::collection::vec(-2.0f64..2.0, 3), gb in prop::collection::vec(-2.0f64..2.0, 9),
                e1 in prop::collection::vec(-2.0f64..2.0, 9), e2 in prop::collection::vec(-2.0f64..2.0, 9),
            ) {
                let lags = unit_lags(8);
                let ma = measure(lags, aa, ga);
                let mb = measure(lags, ab, gb);
                let e1 = WindowSlice::new(lags, e1).unwrap();
                let e2 = WindowSlice::new(lags, e2).unwrap();
                let lhs = pair_square(&tensor_product(&ma, &mb).unwrap(), &e1, &e2).unwrap();
                let rhs = pair_lag(&ma, &e1).unwrap() * pair_lag(&mb, &e2).unwrap();
                prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
            }

            #[test]
            fn pairings_are_linear(
                aa in prop::collection::vec(-2.0f64..2.0, 3), ga in prop::collection::vec(-2.0f64..2.0, 9),
                ab in prop::collection::vec(-2.0f64..2.0, 3), gb in prop::collection::vec(-2.0f64..2.0, 9),
                e1 in prop::collection::vec(-2.0f64..2.0, 9), e2 in prop::collection::vec(-2.0f64..2.0, 9),
                c in -3.0f64..3.0,
            ) {
                let lags = unit_lags(8);
                let ma = measure(lags, aa, ga);
                let mb = measure(lags, ab, gb);
                let e1 = WindowSlice::new(lags, e1).unwrap();
                let e2 = WindowSlice::new(lags, e2).unwrap();
                let mix = ma.combine(c, &mb, 1.0).unwrap();
                let lhs = pair_lag(&mix, &e1).unwrap();
                let rhs = c * pair_lag(&ma, &e1).unwrap() + pair_lag(&mb, &e1).unwrap();
                prop_assert!((lhs - rhs).abs() < 1e-11);
                let e12 = e1.axpy(c, &e2).unwrap();
                let lhs = pair_lag(&ma, &e12).unwrap();
                let rhs = pair_lag(&ma, &e1).unwrap() + c * pair_lag(&ma, &e2).unwrap();
                prop_assert!((lhs - rhs).abs() < 1e-11);
                // bilinearity of the tensor product in its first argument
                let t_mix = tensor_product(&mix, &mb).unwrap();
                let lhs = pair_square(&t_mix, &e1, &e2).unwrap();
                let rhs = c * pair_square(&tensor_product(&ma, &mb).unwrap(), &e1, &e2).unwrap()
                    + pair_square(&tensor_product(&mb, &mb).unwrap(), &e1, &e2).unwrap();
                prop_assert!((lhs - rhs).abs() < 1e-10);
            }
        }
    }
}
