//! Families of Lagrangian graphs `a ↦ η_a` sampled on a leaf-parameter box,
//! the cohomology map `c`, generating functions `S(q, a)` and foliation-level
//! Lipschitz data.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{leaf_invariance_defect, IntegratorConfig};
use crate::models::HamiltonianModel;
use crate::torus::potential_unchecked;
use crate::torus::{
    closedness_defect, format, ClosednessTolerance, Grid, PeriodicField, PeriodicOneForm,
};

/// Leaves closer than this (sup over the sample grid) count as intersecting.
pub const DISJOINTNESS_TOL: f64 = 1e-12;

/// Condition number of `Dc` above which the cohomology map is degenerate.
pub const CMAP_CONDITION_LIMIT: f64 = 1e6;

/// Regular box grid of leaf parameters, row-major (last axis fastest).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeafGrid {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub counts: Vec<usize>,
}

impl LeafGrid {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, counts: Vec<usize>) -> Result<Self> {
        let g = LeafGrid { lo, hi, counts };
        g.validate()?;
        Ok(g)
    }

    /// `[lo, hi]ⁿ` with `count` nodes per axis.
    pub fn cube(n: usize, lo: f64, hi: f64, count: usize) -> Result<Self> {
        LeafGrid::new(vec![lo; n], vec![hi; n], vec![count; n])
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.lo.len();
        if n == 0 || self.hi.len() != n || self.counts.len() != n {
            return Err(Error::BadParameters(
                "leaf grid bounds and counts must share one nonzero length".into(),
            ));
        }
        for d in 0..n {
            if self.counts[d] == 0 || !(self.lo[d].is_finite() && self.hi[d].is_finite()) {
                return Err(Error::BadParameters(format!(
                    "leaf grid axis {d} is malformed"
                )));
            }
            if self.counts[d] > 1 && self.hi[d] <= self.lo[d] {
                return Err(Error::BadParameters(format!(
                    "leaf grid axis {d} has hi <= lo"
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.counts.len()
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self, d: usize) -> f64 {
        if self.counts[d] > 1 {
            (self.hi[d] - self.lo[d]) / (self.counts[d] - 1) as f64
        } else {
            0.0
        }
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for d in (0..self.dim()).rev() {
            idx[d] = flat % self.counts[d];
            flat /= self.counts[d];
        }
        idx
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.counts)
            .fold(0, |acc, (&i, &c)| acc * c + i)
    }

    pub fn point(&self, flat: usize) -> Vec<f64> {
        self.multi_index(flat)
            .iter()
            .enumerate()
            .map(|(d, &i)| self.lo[d] + i as f64 * self.spacing(d))
            .collect()
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }

    /// Whether the node lies on a face of the box.
    pub fn is_boundary(&self, flat: usize) -> bool {
        self.multi_index(flat)
            .iter()
            .zip(&self.counts)
            .any(|(&i, &c)| i == 0 || i + 1 == c)
    }

    /// Difference stencil along `axis` at `flat`: `(minus, plus, divisor)`,
    /// centered in the interior and one-sided on the faces.
    pub fn stencil(&self, flat: usize, axis: usize) -> Option<(usize, usize, f64)> {
        let c = self.counts[axis];
        if c < 2 {
            return None;
        }
        let idx = self.multi_index(flat);
        let h = self.spacing(axis);
        let at = |i: usize| {
            let mut j = idx.clone();
            j[axis] = i;
            self.flat_index(&j)
        };
        let i = idx[axis];
        Some(if i == 0 {
            (at(0), at(1), h)
        } else if i + 1 == c {
            (at(c - 2), at(c - 1), h)
        } else {
            (at(i - 1), at(i + 1), 2.0 * h)
        })
    }
}

/// Where the leaves came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Oracle(String),
    File(String),
    Data,
}

/// Leaves before validation.
#[derive(Clone, Debug, PartialEq)]
pub struct RawFoliation {
    pub leaf_grid: LeafGrid,
    pub leaves: Vec<PeriodicOneForm>,
    pub provenance: Provenance,
}

impl RawFoliation {
    pub fn new(
        leaf_grid: LeafGrid,
        leaves: Vec<PeriodicOneForm>,
        provenance: Provenance,
    ) -> Result<Self> {
        leaf_grid.validate()?;
        if leaves.len() != leaf_grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} leaves for a leaf grid of {} nodes",
                leaves.len(),
                leaf_grid.len()
            )));
        }
        let Some(first) = leaves.first() else {
            return Err(Error::DimensionMismatch("foliation without leaves".into()));
        };
        let q_grid = first.grid().clone();
        if q_grid.dim() != leaf_grid.dim() || leaves.iter().any(|l| l.grid() != &q_grid) {
            return Err(Error::DimensionMismatch(
                "leaves must share one q-grid of the leaf-grid dimension".into(),
            ));
        }
        Ok(RawFoliation {
            leaf_grid,
            leaves,
            provenance,
        })
    }

    /// Sample the oracle leaves of `model`.
    pub fn from_oracle(
        model: &HamiltonianModel,
        leaf_grid: LeafGrid,
        q_grid: &Grid,
    ) -> Result<Self> {
        let oracle = model.oracle().ok_or_else(|| {
            Error::Precondition(format!("model `{}` has no oracle foliation", model.name()))
        })?;
        if model.dim() != leaf_grid.dim() || q_grid.dim() != model.dim() {
            return Err(Error::DimensionMismatch(
                "model, leaf grid and q-grid dimensions differ".into(),
            ));
        }
        let points = leaf_grid.points();
        let leaves = crate::par::try_map(&points, |a| {
            Ok(PeriodicOneForm::from_fn(q_grid, |q| oracle.leaf(a, q)))
        })?;
        RawFoliation::new(
            leaf_grid,
            leaves,
            Provenance::Oracle(model.name().to_string()),
        )
    }

    /// Sample `η(a, q)` for every leaf parameter.
    pub fn from_fn(
        leaf_grid: LeafGrid,
        q_grid: &Grid,
        eta: impl Fn(&[f64], &[f64]) -> Vec<f64> + Sync,
    ) -> Result<Self> {
        let points = leaf_grid.points();
        let leaves = crate::par::try_map(&points, |a| {
            Ok(PeriodicOneForm::from_fn(q_grid, |q| eta(a, q)))
        })?;
        RawFoliation::new(leaf_grid, leaves, Provenance::Data)
    }

    pub fn q_grid(&self) -> &Grid {
        self.leaves[0].grid()
    }
}

#[derive(Serialize, Deserialize)]
struct FoliationHeader {
    n: usize,
    #[serde(rename = "A_grid")]
    a_grid: LeafGrid,
    q_shape: Vec<usize>,
}

/// Write the foliation file: a JSON header line `{n, A_grid, q_shape}`
/// followed by one `oneform` record per leaf in leaf-grid order.
pub fn write_foliation<W: Write>(w: &mut W, fol: &RawFoliation) -> Result<()> {
    let header = FoliationHeader {
        n: fol.leaf_grid.dim(),
        a_grid: fol.leaf_grid.clone(),
        q_shape: fol.q_grid().shape().to_vec(),
    };
    serde_json::to_writer(&mut *w, &header)?;
    w.write_all(b"\n")?;
    for leaf in &fol.leaves {
        format::write_one_form(w, leaf)?;
    }
    Ok(())
}

pub fn read_foliation<R: BufRead>(r: &mut R, provenance: Provenance) -> Result<RawFoliation> {
    let mut line = String::new();
    if r.read_line(&mut line)? == 0 {
        return Err(Error::FileFormat("empty foliation file".into()));
    }
    let header: FoliationHeader = serde_json::from_str(line.trim_end())?;
    if header.a_grid.dim() != header.n || header.q_shape.len() != header.n {
        return Err(Error::FileFormat(
            "foliation header dimensions disagree".into(),
        ));
    }
    header
        .a_grid
        .validate()
        .map_err(|e| Error::FileFormat(e.to_string()))?;
    let q_grid = Grid::new(header.q_shape.clone())?;
    let mut leaves = Vec::with_capacity(header.a_grid.len());
    for i in 0..header.a_grid.len() {
        let leaf = format::read_one_form(r).map_err(|e| match e {
            Error::FileFormat(m) => Error::FileFormat(format!("leaf {i}: {m}")),
            other => other,
        })?;
        if leaf.grid() != &q_grid {
            return Err(Error::FileFormat(format!(
                "leaf {i} does not use the declared q_shape"
            )));
        }
        leaves.push(leaf);
    }
    RawFoliation::new(header.a_grid, leaves, provenance)
}

pub fn save_foliation(path: &Path, fol: &RawFoliation) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_foliation(&mut w, fol)?;
    w.flush()?;
    Ok(())
}

pub fn load_foliation(path: &Path) -> Result<RawFoliation> {
    let mut r = BufReader::new(File::open(path)?);
    read_foliation(&mut r, Provenance::File(path.display().to_string()))
}

/// A validated foliation: every leaf closed, leaves pairwise disjoint.
#[derive(Clone, Debug)]
pub struct Foliation {
    raw: RawFoliation,
    closedness: Vec<f64>,
    tolerance: ClosednessTolerance,
}

impl Foliation {
    pub fn leaf_grid(&self) -> &LeafGrid {
        &self.raw.leaf_grid
    }

    pub fn leaves(&self) -> &[PeriodicOneForm] {
        &self.raw.leaves
    }

    pub fn leaf(&self, i: usize) -> &PeriodicOneForm {
        &self.raw.leaves[i]
    }

    pub fn q_grid(&self) -> &Grid {
        self.raw.q_grid()
    }

    pub fn dim(&self) -> usize {
        self.raw.leaf_grid.dim()
    }

    pub fn len(&self) -> usize {
        self.raw.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.leaves.is_empty()
    }

    pub fn provenance(&self) -> &Provenance {
        &self.raw.provenance
    }

    pub fn closedness_defects(&self) -> &[f64] {
        &self.closedness
    }

    pub fn tolerance(&self) -> ClosednessTolerance {
        self.tolerance
    }

    pub fn raw(&self) -> &RawFoliation {
        &self.raw
    }
}

/// Source of leaves for [`build_foliation`].
pub enum FoliationSource<'a> {
    Oracle {
        model: &'a HamiltonianModel,
        leaf_grid: LeafGrid,
        q_grid: Grid,
    },
    File(&'a Path),
    Data(RawFoliation),
}

pub fn build_foliation(source: FoliationSource<'_>, tol: ClosednessTolerance) -> Result<Foliation> {
    let raw = match source {
        FoliationSource::Oracle {
            model,
            leaf_grid,
            q_grid,
        } => RawFoliation::from_oracle(model, leaf_grid, &q_grid)?,
        FoliationSource::File(path) => load_foliation(path)?,
        FoliationSource::Data(raw) => raw,
    };
    validate_foliation(raw, tol)
}

/// Check closedness of every leaf, then pairwise disjointness on samples.
pub fn validate_foliation(raw: RawFoliation, tol: ClosednessTolerance) -> Result<Foliation> {
    let idx: Vec<usize> = (0..raw.leaves.len()).collect();
    let closedness = crate::par::try_map(&idx, |&i| tol.check(&raw.leaves[i], Some(i)))?;
    let m = raw.leaves.len();
    let pairs: Vec<(usize, usize)> = (0..m)
        .flat_map(|i| (i + 1..m).map(move |j| (i, j)))
        .collect();
    let separations = crate::par::map(&pairs, |&(i, j)| {
        min_separation(&raw.leaves[i], &raw.leaves[j])
    });
    if let Some((k, &sep)) = separations
        .iter()
        .enumerate()
        .find(|(_, &s)| s <= DISJOINTNESS_TOL)
    {
        return Err(Error::LeavesIntersect {
            first: pairs[k].0,
            second: pairs[k].1,
            separation: sep,
        });
    }
    Ok(Foliation {
        raw,
        closedness,
        tolerance: tol,
    })
}

fn min_separation(a: &PeriodicOneForm, b: &PeriodicOneForm) -> f64 {
    let n = a.dim();
    let len = a.grid().len();
    let mut best = f64::INFINITY;
    for i in 0..len {
        let d2: f64 = (0..n)
            .map(|j| (a.component(j).samples()[i] - b.component(j).samples()[i]).powi(2))
            .sum();
        best = best.min(d2);
    }
    best.sqrt()
}

/// Cohomology classes `c(a)` and their Jacobian on the leaf grid.
#[derive(Clone, Debug)]
pub struct CMap {
    pub leaf_grid: LeafGrid,
    pub c: Vec<Vec<f64>>,
    /// `Dc[i][j] = ∂c_i/∂a_j`.
    pub dc: Vec<DMatrix<f64>>,
    pub condition: Vec<f64>,
    pub boundary: Vec<bool>,
    /// `min ‖c(a) − c(a′)‖ / ‖a − a′‖` over all pairs of leaves.
    pub injectivity: f64,
}

impl CMap {
    pub fn dc_inverse_transpose(&self, leaf: usize) -> Result<DMatrix<f64>> {
        if self.condition[leaf] > CMAP_CONDITION_LIMIT {
            return Err(Error::DegenerateCMap {
                leaf,
                condition: self.condition[leaf],
            });
        }
        self.dc[leaf]
            .clone()
            .try_inverse()
            .map(|m| m.transpose())
            .ok_or(Error::DegenerateCMap {
                leaf,
                condition: f64::INFINITY,
            })
    }
}

pub(crate) fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.singular_values();
    let lo = sv.min();
    if lo == 0.0 {
        f64::INFINITY
    } else {
        sv.max() / lo
    }
}

/// Cohomology classes are the leaf means; `Dc` by differences across leaves.
pub fn c_map(fol: &Foliation) -> Result<CMap> {
    let grid = fol.leaf_grid();
    let n = fol.dim();
    for d in 0..n {
        if grid.counts[d] < 2 {
            return Err(Error::Precondition(format!(
                "leaf grid needs at least two nodes along axis {d} to differentiate c"
            )));
        }
    }
    let c: Vec<Vec<f64>> = fol.leaves().iter().map(|l| l.mean().to_vec()).collect();
    let mut dc = Vec::with_capacity(c.len());
    let mut condition = Vec::with_capacity(c.len());
    let mut boundary = Vec::with_capacity(c.len());
    for leaf in 0..c.len() {
        let mut m = DMatrix::zeros(n, n);
        for j in 0..n {
            let (lo, hi, div) = grid.stencil(leaf, j).expect("axis has two nodes");
            for i in 0..n {
                m[(i, j)] = (c[hi][i] - c[lo][i]) / div;
            }
        }
        let cond = condition_number(&m);
        if !(cond <= CMAP_CONDITION_LIMIT) {
            return Err(Error::DegenerateCMap {
                leaf,
                condition: cond,
            });
        }
        dc.push(m);
        condition.push(cond);
        boundary.push(grid.is_boundary(leaf));
    }
    let points = grid.points();
    let mut injectivity = f64::INFINITY;
    for i in 0..c.len() {
        for j in i + 1..c.len() {
            let da = dist(&points[i], &points[j]);
            if da > 0.0 {
                injectivity = injectivity.min(dist(&c[i], &c[j]) / da);
            }
        }
    }
    Ok(CMap {
        leaf_grid: grid.clone(),
        c,
        dc,
        condition,
        boundary,
        injectivity,
    })
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// `S(q, a)` per leaf with its partial derivatives on the grids.
#[derive(Clone, Debug)]
pub struct GeneratingFunction {
    pub leaf_grid: LeafGrid,
    pub s: Vec<PeriodicField>,
    /// `∂S/∂q` per leaf, spectral.
    pub ds_dq: Vec<PeriodicOneForm>,
    /// `∂S/∂a` per leaf, one field per parameter direction.
    pub ds_da: Vec<Vec<PeriodicField>>,
    pub boundary: Vec<bool>,
    /// `sup ‖∂_a(η_a − c(a)) − ∂_q(∂S/∂a)‖` over interior leaves.
    pub mixed_partial_defect: f64,
}

impl GeneratingFunction {
    pub fn q_grid(&self) -> &Grid {
        self.s[0].grid()
    }
}

pub fn generating_function(fol: &Foliation, cmap: &CMap) -> Result<GeneratingFunction> {
    let grid = fol.leaf_grid();
    let n = fol.dim();
    let tol = fol.tolerance();
    let idx: Vec<usize> = (0..fol.len()).collect();
    let s: Vec<PeriodicField> = crate::par::try_map(&idx, |&i| {
        tol.check(fol.leaf(i), Some(i))?;
        Ok(potential_unchecked(fol.leaf(i)))
    })?;
    let ds_dq: Vec<PeriodicOneForm> = crate::par::try_map(&s, |f| {
        PeriodicOneForm::new((0..n).map(|d| f.derivative(d)).collect())
    })?;
    let mut ds_da = Vec::with_capacity(s.len());
    for leaf in 0..s.len() {
        let mut per_dir = Vec::with_capacity(n);
        for k in 0..n {
            let (lo, hi, div) = grid.stencil(leaf, k).ok_or_else(|| {
                Error::Precondition(format!("leaf grid has a single node along axis {k}"))
            })?;
            per_dir.push(s[hi].zip_with(&s[lo], |a, b| (a - b) / div));
        }
        ds_da.push(per_dir);
    }
    let mut mixed = 0.0f64;
    for leaf in (0..s.len()).filter(|&l| !grid.is_boundary(l)) {
        for k in 0..n {
            let (lo, hi, div) = grid.stencil(leaf, k).expect("interior");
            for j in 0..n {
                let da_of_dq = fol
                    .leaf(hi)
                    .component(j)
                    .zip_with(fol.leaf(lo).component(j), |a, b| (a - b) / div);
                let shift = (cmap.c[hi][j] - cmap.c[lo][j]) / div;
                let dq_of_da = ds_da[leaf][k].derivative(j);
                for (x, y) in da_of_dq.samples().iter().zip(dq_of_da.samples()) {
                    mixed = mixed.max((x - shift - y).abs());
                }
            }
        }
    }
    Ok(GeneratingFunction {
        leaf_grid: grid.clone(),
        boundary: (0..s.len()).map(|l| grid.is_boundary(l)).collect(),
        s,
        ds_dq,
        ds_da,
        mixed_partial_defect: mixed,
    })
}

/// Result of [`foliation_bilipschitz_constant`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BilipschitzReport {
    pub k: f64,
    pub pair: (usize, usize),
    pub node: usize,
}

/// `K = max_{q, a≠a′} max(‖η_a − η_a′‖/‖a − a′‖, ‖a − a′‖/‖η_a − η_a′‖)`.
pub fn foliation_bilipschitz_constant(fol: &Foliation) -> Result<BilipschitzReport> {
    bilipschitz_raw(fol.raw())
}

pub(crate) fn bilipschitz_raw(raw: &RawFoliation) -> Result<BilipschitzReport> {
    let m = raw.leaves.len();
    if m < 2 {
        return Err(Error::Precondition("need at least two leaves".into()));
    }
    let points = raw.leaf_grid.points();
    let n = raw.leaf_grid.dim();
    let len = raw.q_grid().len();
    let pairs: Vec<(usize, usize)> = (0..m)
        .flat_map(|i| (i + 1..m).map(move |j| (i, j)))
        .collect();
    let per_pair = crate::par::map(&pairs, |&(i, j)| {
        let da = dist(&points[i], &points[j]);
        let mut best = (1.0f64, 0usize);
        for node in 0..len {
            let de = (0..n)
                .map(|d| {
                    (raw.leaves[i].component(d).samples()[node]
                        - raw.leaves[j].component(d).samples()[node])
                        .powi(2)
                })
                .sum::<f64>()
                .sqrt();
            let r = (de / da).max(da / de);
            if r > best.0 {
                best = (r, node);
            }
        }
        best
    });
    let mut report = BilipschitzReport {
        k: 1.0,
        pair: pairs[0],
        node: 0,
    };
    for (k, &(r, node)) in per_pair.iter().enumerate() {
        if r > report.k {
            report = BilipschitzReport {
                k: r,
                pair: pairs[k],
                node,
            };
        }
    }
    Ok(report)
}

/// One row of [`lagrangian_report`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LeafRecord {
    pub index: usize,
    pub a: Vec<f64>,
    pub boundary: bool,
    pub closedness_defect: f64,
    pub closed: bool,
    pub cohomology: Vec<f64>,
    pub invariance_defect: Option<f64>,
}

/// Per-leaf closedness, class and (with a model) invariance defect at the
/// given times over `points`.
pub fn lagrangian_report(
    raw: &RawFoliation,
    tol: ClosednessTolerance,
    model: Option<(&HamiltonianModel, &IntegratorConfig)>,
    times: &[f64],
    points: &[Vec<f64>],
) -> Result<Vec<LeafRecord>> {
    let idx: Vec<usize> = (0..raw.leaves.len()).collect();
    crate::par::try_map(&idx, |&i| {
        let leaf = &raw.leaves[i];
        let defect = closedness_defect(leaf);
        let invariance = match model {
            Some((m, cfg)) => Some(leaf_invariance_defect(m, leaf, times, points, cfg)?),
            None => None,
        };
        Ok(LeafRecord {
            index: i,
            a: raw.leaf_grid.point(i),
            boundary: raw.leaf_grid.is_boundary(i),
            closedness_defect: defect,
            closed: defect <= tol.threshold(leaf),
            cohomology: leaf.mean().to_vec(),
            invariance_defect: invariance,
        })
    })
}
