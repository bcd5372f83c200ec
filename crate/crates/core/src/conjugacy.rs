//! Rotation vectors, conjugacies of leaf flows to rigid rotations, invariant
//! measures of torus maps and flows of additional integrals.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{LeafFlow, TorusMap};
use crate::foliation::{CMap, GeneratingFunction};
use crate::models::HamiltonianModel;
use crate::torus::{torus_distance, wrap, Grid, PeriodicField, PeriodicOneForm, TrigInterpolant};

/// Resonances are searched up to this `|k|∞`.
pub const RESONANCE_ORDER: i64 = 8;
/// `|⟨k, ρ⟩ − m|` below this is treated as resonant.
pub const RESONANCE_MARGIN: f64 = 1e-3;

const INVERSE_TOL: f64 = 1e-13;
const INVERSE_CHECK: f64 = 1e-8;
const INVERSE_MAX_ITER: usize = 50;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AveragingMethod {
    /// Smooth-bump weighted Birkhoff average along one orbit.
    #[default]
    Weighted,
    /// Plain displacement average over a `4ⁿ` grid of starting points.
    Cesaro,
}

/// `w(s) = exp(−1/(s(1−s)))` on `(0, 1)`, zero elsewhere.
pub fn bump(s: f64) -> f64 {
    if s <= 0.0 || s >= 1.0 {
        0.0
    } else {
        (-1.0 / (s * (1.0 - s))).exp()
    }
}

/// Bump weights for `count` equally spaced samples, normalized to sum 1.
pub fn bump_weights(count: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..count)
        .map(|j| bump((j + 1) as f64 / (count + 1) as f64))
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

fn uniform_weights(count: usize) -> Vec<f64> {
    vec![1.0 / count as f64; count]
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RotationEstimate {
    pub rho: Vec<f64>,
    pub method: AveragingMethod,
    /// Number of time-1 iterates used.
    pub horizon: usize,
    /// `‖ρ(T) − ρ(T/2)‖`.
    pub error: f64,
}

/// Rotation vector of a leaf flow from `horizon` time-1 iterates.
pub fn rotation_vector(
    leaf: &LeafFlow,
    horizon: usize,
    method: AveragingMethod,
) -> Result<RotationEstimate> {
    if horizon < 2 {
        return Err(Error::Precondition(
            "rotation horizon must be at least 2".into(),
        ));
    }
    let n = leaf.dim();
    let half = horizon / 2;
    let (full, halfway) = match method {
        AveragingMethod::Weighted => {
            let start = vec![0.0; n];
            let orbit = lifted_orbit(leaf, &start, horizon)?;
            let steps: Vec<Vec<f64>> = orbit.windows(2).map(|w| sub(&w[1], &w[0])).collect();
            (
                weighted_sum(&steps, &bump_weights(horizon)),
                weighted_sum(&steps[..half], &bump_weights(half)),
            )
        }
        AveragingMethod::Cesaro => {
            let starts: Vec<Vec<f64>> = Grid::cubic(n, 4)?.nodes().collect();
            let ends = crate::par::try_map(&starts, |q| {
                let mid = leaf.integrate(q, half as f64, |_, _| {})?;
                let end = leaf.integrate(&mid, (horizon - half) as f64, |_, _| {})?;
                Ok((sub(&mid, q), sub(&end, q)))
            })?;
            let mut full = vec![0.0; n];
            let mut halfway = vec![0.0; n];
            for (m, e) in &ends {
                for d in 0..n {
                    full[d] += e[d] / (horizon as f64 * starts.len() as f64);
                    halfway[d] += m[d] / (half as f64 * starts.len() as f64);
                }
            }
            (full, halfway)
        }
    };
    Ok(RotationEstimate {
        error: norm(&sub(&full, &halfway)),
        rho: full,
        method,
        horizon,
    })
}

fn lifted_orbit(leaf: &LeafFlow, start: &[f64], iterates: usize) -> Result<Vec<Vec<f64>>> {
    let mut orbit = Vec::with_capacity(iterates + 1);
    orbit.push(start.to_vec());
    for j in 0..iterates {
        let next = leaf.integrate(&orbit[j], 1.0, |_, _| {})?;
        orbit.push(next);
    }
    Ok(orbit)
}

fn weighted_sum(values: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    let n = values[0].len();
    let mut out = vec![0.0; n];
    for (v, w) in values.iter().zip(weights) {
        for d in 0..n {
            out[d] += w * v[d];
        }
    }
    out
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Fail with [`Error::ResonantRotation`] if `⟨k, ρ⟩` is within
/// [`RESONANCE_MARGIN`] of an integer for some `0 < |k|∞ ≤ 8`.
pub fn check_nonresonant(rho: &[f64]) -> Result<()> {
    let n = rho.len();
    let width = (2 * RESONANCE_ORDER + 1) as usize;
    let total = width.pow(n as u32);
    for flat in 0..total {
        let mut r = flat;
        let k: Vec<i64> = (0..n)
            .map(|_| {
                let v = (r % width) as i64 - RESONANCE_ORDER;
                r /= width;
                v
            })
            .collect();
        // one representative of ±k
        match k.iter().find(|&&v| v != 0) {
            Some(&first) if first > 0 => {}
            _ => continue,
        }
        let dot: f64 = k.iter().zip(rho).map(|(&a, b)| a as f64 * b).sum();
        let margin = (dot - dot.round()).abs();
        if margin <= RESONANCE_MARGIN {
            return Err(Error::ResonantRotation { k, margin });
        }
    }
    Ok(())
}

/// A torus homeomorphism `h(q) = q + d(q)` with `d` sampled on a grid.
#[derive(Clone, Debug)]
pub struct ConjugacyMap {
    displacement: Vec<PeriodicField>,
    interp: TrigInterpolant,
    /// `h⁻¹` at each grid node, on the cover near the node.
    inverse_nodes: Vec<Vec<f64>>,
}

impl ConjugacyMap {
    /// Build from displacement samples and verify `h ∘ h⁻¹ = id` at the nodes.
    pub fn new(displacement: Vec<PeriodicField>) -> Result<Self> {
        let form = PeriodicOneForm::new(displacement)?;
        let spectra: Vec<&[num_complex::Complex64]> =
            form.components().iter().map(|c| c.spectrum()).collect();
        let interp = TrigInterpolant::from_spectra(form.grid(), &spectra);
        let mut map = ConjugacyMap {
            displacement: form.components().to_vec(),
            interp,
            inverse_nodes: Vec::new(),
        };
        let nodes: Vec<Vec<f64>> = map.grid().nodes().collect();
        let inverse = crate::par::try_map(&nodes, |x| {
            let y = map.inverse(x)?;
            let back = map.apply(&y);
            let residual = norm(&sub(&back, x));
            if residual > INVERSE_CHECK {
                return Err(Error::NewtonDivergence {
                    context: "conjugacy inverse check".into(),
                    iterations: INVERSE_MAX_ITER,
                    residual,
                });
            }
            Ok(y)
        })?;
        map.inverse_nodes = inverse;
        Ok(map)
    }

    pub fn identity(grid: &Grid) -> Result<Self> {
        ConjugacyMap::new(
            (0..grid.dim())
                .map(|_| PeriodicField::constant(grid, 0.0))
                .collect(),
        )
    }

    pub fn grid(&self) -> &Grid {
        self.displacement[0].grid()
    }

    pub fn dim(&self) -> usize {
        self.displacement.len()
    }

    pub fn displacement(&self) -> &[PeriodicField] {
        &self.displacement
    }

    pub fn inverse_nodes(&self) -> &[Vec<f64>] {
        &self.inverse_nodes
    }

    /// `h(q)` on the cover.
    pub fn apply(&self, q: &[f64]) -> Vec<f64> {
        let d = self.interp.eval(q);
        q.iter().zip(d).map(|(a, b)| a + b).collect()
    }

    /// `Dh(q)`.
    pub fn jacobian(&self, q: &[f64]) -> DMatrix<f64> {
        let n = self.dim();
        let (_, g) = self.interp.eval_with_gradient(q);
        DMatrix::from_fn(n, n, |i, j| g[i * n + j] + if i == j { 1.0 } else { 0.0 })
    }

    /// `h⁻¹(x)` on the cover by Newton's method seeded at `x − d(x)`.
    pub fn inverse(&self, x: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim();
        let mut y: Vec<f64> = sub(x, &self.interp.eval(x));
        let mut residual = f64::INFINITY;
        for _ in 0..INVERSE_MAX_ITER {
            let (d, g) = self.interp.eval_with_gradient(&y);
            let r = DVector::from_fn(n, |i, _| y[i] + d[i] - x[i]);
            residual = r.amax();
            if residual <= INVERSE_TOL {
                return Ok(y);
            }
            let jac = DMatrix::from_fn(n, n, |i, j| g[i * n + j] + if i == j { 1.0 } else { 0.0 });
            let step = jac.lu().solve(&r).ok_or(Error::NewtonDivergence {
                context: "conjugacy inverse".into(),
                iterations: 0,
                residual,
            })?;
            for i in 0..n {
                y[i] -= step[i];
            }
        }
        if residual <= 10.0 * INVERSE_TOL {
            return Ok(y);
        }
        Err(Error::NewtonDivergence {
            context: "conjugacy inverse".into(),
            iterations: INVERSE_MAX_ITER,
            residual,
        })
    }

    /// Same map with the displacement shifted to zero mean.
    pub fn normalized(&self) -> Result<Self> {
        ConjugacyMap::new(
            self.displacement
                .iter()
                .map(|d| {
                    let m = d.mean();
                    d.map(|v| v - m)
                })
                .collect(),
        )
    }
}

/// Options for [`herman_conjugacy`].
#[derive(Clone, Debug)]
pub struct HermanOptions {
    pub iterates: usize,
    pub method: AveragingMethod,
    /// Grid on which `h` is sampled.
    pub grid: Grid,
    /// Grid on which the time-1 map is sampled before iterating.
    pub map_grid: Grid,
}

/// `h(q) − q` as the weighted orbit average of `F_j(q) − q − jρ`,
/// normalized to zero mean.
pub fn herman_conjugacy(
    leaf: &LeafFlow,
    rho: &[f64],
    opts: &HermanOptions,
) -> Result<ConjugacyMap> {
    let n = leaf.dim();
    if rho.len() != n || opts.grid.dim() != n || opts.map_grid.dim() != n {
        return Err(Error::DimensionMismatch(
            "rotation vector and grids must match the leaf".into(),
        ));
    }
    if opts.iterates < 2 {
        return Err(Error::Precondition("need at least two iterates".into()));
    }
    check_nonresonant(rho)?;
    let map = leaf.sampled_map(1.0, &opts.map_grid)?;
    let weights = match opts.method {
        AveragingMethod::Weighted => bump_weights(opts.iterates),
        AveragingMethod::Cesaro => uniform_weights(opts.iterates),
    };
    let nodes: Vec<Vec<f64>> = opts.grid.nodes().collect();
    let averages = crate::par::map(&nodes, |q| {
        let mut x = q.clone();
        let mut acc = vec![0.0; n];
        for (j, w) in weights.iter().enumerate() {
            for d in 0..n {
                acc[d] += w * (x[d] - q[d] - j as f64 * rho[d]);
            }
            x = map.apply(&x);
        }
        acc
    });
    displacement_map(&opts.grid, &averages, true)
}

/// Continuous-time counterpart of [`herman_conjugacy`]: bump-weighted time
/// average of `F_s(q) − q − sρ` over `[0, T]`, sampled at every integration
/// step.
pub fn herman_conjugacy_continuous(
    leaf: &LeafFlow,
    rho: &[f64],
    horizon: f64,
    grid: &Grid,
) -> Result<ConjugacyMap> {
    let n = leaf.dim();
    if rho.len() != n || grid.dim() != n {
        return Err(Error::DimensionMismatch(
            "rotation vector and grid must match the leaf".into(),
        ));
    }
    if !(horizon > 0.0) {
        return Err(Error::Precondition("horizon must be positive".into()));
    }
    check_nonresonant(rho)?;
    let nodes: Vec<Vec<f64>> = grid.nodes().collect();
    let averages = crate::par::try_map(&nodes, |q| {
        let mut acc = vec![0.0; n];
        let mut total = 0.0;
        leaf.integrate(q, horizon, |t, x| {
            let w = bump(t / horizon);
            total += w;
            for d in 0..n {
                acc[d] += w * (x[d] - q[d] - t * rho[d]);
            }
        })?;
        Ok(acc.into_iter().map(|v| v / total).collect::<Vec<f64>>())
    })?;
    displacement_map(grid, &averages, true)
}

fn displacement_map(grid: &Grid, values: &[Vec<f64>], zero_mean: bool) -> Result<ConjugacyMap> {
    let n = grid.dim();
    let fields = (0..n)
        .map(|d| {
            let mut samples: Vec<f64> = values.iter().map(|v| v[d]).collect();
            if zero_mean {
                let mean = samples.iter().sum::<f64>() / samples.len() as f64;
                samples.iter_mut().for_each(|s| *s -= mean);
            }
            PeriodicField::new(grid.clone(), samples)
        })
        .collect::<Result<Vec<_>>>()?;
    ConjugacyMap::new(fields)
}

/// `g_a(q) = q + Dc(a)^{−T} ∂S/∂a(q, a)` on the q-grid of the foliation.
pub fn generating_conjugacy(
    gen: &GeneratingFunction,
    cmap: &CMap,
    leaf: usize,
) -> Result<ConjugacyMap> {
    if leaf >= gen.s.len() {
        return Err(Error::BadParameters(format!(
            "leaf index {leaf} out of range"
        )));
    }
    let m = cmap.dc_inverse_transpose(leaf)?;
    let n = m.nrows();
    let ds = &gen.ds_da[leaf];
    let fields = (0..n)
        .map(|i| {
            let len = gen.q_grid().len();
            let samples = (0..len)
                .map(|node| (0..n).map(|k| m[(i, k)] * ds[k].samples()[node]).sum())
                .collect();
            PeriodicField::new(gen.q_grid().clone(), samples)
        })
        .collect::<Result<Vec<_>>>()?;
    ConjugacyMap::new(fields)
}

/// `sup_{q, t} d(h(f_t(q)), h(q) + tρ)` over the given points and times.
pub fn conjugacy_defect(
    h: &ConjugacyMap,
    leaf: &LeafFlow,
    rho: &[f64],
    times: &[f64],
    points: &[Vec<f64>],
) -> Result<f64> {
    let per_point = crate::par::try_map(points, |q| {
        let hq = h.apply(q);
        let mut worst = 0.0f64;
        for &t in times {
            let ft = leaf.integrate(q, t, |_, _| {})?;
            let lhs = h.apply(&ft);
            let rhs: Vec<f64> = hq.iter().zip(rho).map(|(a, r)| a + t * r).collect();
            worst = worst.max(torus_distance(&lhs, &rhs));
        }
        Ok(worst)
    })?;
    Ok(per_point.into_iter().fold(0.0, f64::max))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConjugacyComparison {
    /// Mean of `g − h`.
    pub constant: Vec<f64>,
    /// `sup ‖(g − h) − constant‖` over the nodes of `g`'s grid.
    pub defect: f64,
}

/// Compare two conjugacies up to a translation.
pub fn compare_up_to_constant(g: &ConjugacyMap, h: &ConjugacyMap) -> Result<ConjugacyComparison> {
    if g.dim() != h.dim() {
        return Err(Error::DimensionMismatch(
            "conjugacies of different dimension".into(),
        ));
    }
    let n = g.dim();
    let diffs: Vec<Vec<f64>> = g
        .grid()
        .nodes()
        .map(|q| sub(&g.apply(&q), &h.apply(&q)))
        .collect();
    let constant: Vec<f64> = (0..n)
        .map(|d| diffs.iter().map(|v| v[d]).sum::<f64>() / diffs.len() as f64)
        .collect();
    let defect = diffs
        .iter()
        .map(|v| norm(&sub(v, &constant)))
        .fold(0.0, f64::max);
    Ok(ConjugacyComparison { constant, defect })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LipschitzPair {
    pub forward: f64,
    pub inverse: f64,
}

/// Largest difference quotients of `h` and `h⁻¹` over neighboring grid
/// nodes (all `3ⁿ − 1` offsets, periodic wrap-around).
pub fn lipschitz_constants(h: &ConjugacyMap) -> LipschitzPair {
    let grid = h.grid();
    let n = grid.dim();
    let shape = grid.shape().to_vec();
    let offsets: Vec<Vec<i64>> = (0..3usize.pow(n as u32))
        .map(|mut f| {
            (0..n)
                .map(|_| {
                    let v = (f % 3) as i64 - 1;
                    f /= 3;
                    v
                })
                .collect::<Vec<i64>>()
        })
        .filter(|o| o.iter().any(|&v| v != 0))
        .collect();
    let forward_at = |i: usize| -> Vec<f64> {
        let q = grid.node(i);
        let d: Vec<f64> = h.displacement.iter().map(|f| f.samples()[i]).collect();
        q.iter().zip(d).map(|(a, b)| a + b).collect()
    };
    let idx: Vec<usize> = (0..grid.len()).collect();
    let per_node = crate::par::map(&idx, |&i| {
        let mi = grid.multi_index(i);
        let hi = forward_at(i);
        let mut fwd = 0.0f64;
        let mut inv = 0.0f64;
        for off in &offsets {
            // neighbor on the cover: node j shifted by an integer vector
            let mut mj = vec![0usize; n];
            let mut shift = vec![0.0; n];
            let mut dq = vec![0.0; n];
            for d in 0..n {
                let raw = mi[d] as i64 + off[d];
                let s = shape[d] as i64;
                mj[d] = raw.rem_euclid(s) as usize;
                shift[d] = raw.div_euclid(s) as f64;
                dq[d] = off[d] as f64 / s as f64;
            }
            let j = grid.flat_index(&mj);
            let hj: Vec<f64> = forward_at(j)
                .iter()
                .zip(&shift)
                .map(|(a, s)| a + s)
                .collect();
            let step = norm(&dq);
            fwd = fwd.max(norm(&sub(&hj, &hi)) / step);
            let xi = &h.inverse_nodes[i];
            let xj: Vec<f64> = h.inverse_nodes[j]
                .iter()
                .zip(&shift)
                .map(|(a, s)| a + s)
                .collect();
            inv = inv.max(norm(&sub(&xj, xi)) / step);
        }
        (fwd, inv)
    });
    let (forward, inverse) = per_node
        .into_iter()
        .fold((0.0f64, 0.0f64), |(a, b), (x, y)| (a.max(x), b.max(y)));
    LipschitzPair { forward, inverse }
}

/// Rigid rotation `q ↦ q + ρ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Rotation {
    pub rho: Vec<f64>,
}

impl TorusMap for Rotation {
    fn dim(&self) -> usize {
        self.rho.len()
    }

    fn apply(&self, q: &[f64]) -> Vec<f64> {
        q.iter().zip(&self.rho).map(|(a, b)| a + b).collect()
    }
}

/// Histogram estimate of an invariant probability measure on `bins^n` cells.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InvariantMeasure {
    pub bins: usize,
    pub dim: usize,
    /// Density relative to Lebesgue, row-major over cells.
    pub density: Vec<f64>,
    pub samples: usize,
    /// `3/√(samples per cell)`: expected statistical spread of a density.
    pub statistical_tolerance: f64,
}

impl InvariantMeasure {
    pub fn min_density(&self) -> f64 {
        self.density.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_density(&self) -> f64 {
        self.density.iter().copied().fold(0.0, f64::max)
    }
}

/// Krylov–Bogolyubov average: push a seeded uniform cloud of `cloud` points
/// forward, histogramming every iterate until `total` samples are taken.
pub fn kb_measure<M: TorusMap + Sync>(
    map: &M,
    total: usize,
    bins: usize,
    cloud: usize,
    seed: u64,
) -> Result<InvariantMeasure> {
    if total < 10_000 {
        return Err(Error::Precondition(format!(
            "need at least 10^4 samples, got {total}"
        )));
    }
    if bins == 0 || cloud == 0 {
        return Err(Error::BadParameters(
            "bins and cloud size must be positive".into(),
        ));
    }
    let n = map.dim();
    let cells = bins.pow(n as u32);
    let iterates = total.div_ceil(cloud);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let starts: Vec<Vec<f64>> = (0..cloud)
        .map(|_| (0..n).map(|_| rng.gen::<f64>()).collect())
        .collect();
    let per_point = crate::par::map(&starts, |q| {
        let mut hits = Vec::with_capacity(iterates);
        let mut x = q.clone();
        for _ in 0..iterates {
            let cell = x.iter().fold(0usize, |acc, &v| {
                let b = ((wrap(v) * bins as f64) as usize).min(bins - 1);
                acc * bins + b
            });
            hits.push(cell);
            x = map.apply(&x);
        }
        hits
    });
    let mut counts = vec![0usize; cells];
    for hits in &per_point {
        for &c in hits {
            counts[c] += 1;
        }
    }
    let samples = cloud * iterates;
    let per_cell = samples as f64 / cells as f64;
    Ok(InvariantMeasure {
        bins,
        dim: n,
        density: counts.iter().map(|&c| c as f64 / per_cell).collect(),
        samples,
        statistical_tolerance: 3.0 / per_cell.sqrt(),
    })
}

/// Flow of an additional integral `H_i` on one leaf, in conjugated form
/// `q ↦ g⁻¹(g(q) + tγ)`.
#[derive(Clone, Debug)]
pub struct IntegralFlow {
    pub conjugacy: ConjugacyMap,
    pub gamma: Vec<f64>,
    /// `sup ‖γ(q) − mean γ‖` with `γ(q) = Dg(q) ∂H_i/∂p(q, η(q))`.
    pub gamma_defect: f64,
    /// `sup ‖∂H_i/∂q + Dη ∂H_i/∂p‖`: failure of `X_{H_i}` to be tangent to the leaf.
    pub tangency_defect: f64,
}

impl IntegralFlow {
    pub fn apply(&self, q: &[f64], t: f64) -> Result<Vec<f64>> {
        let x: Vec<f64> = self
            .conjugacy
            .apply(q)
            .iter()
            .zip(&self.gamma)
            .map(|(a, g)| a + t * g)
            .collect();
        self.conjugacy.inverse(&x)
    }
}

/// Build the conjugated flow of `integral` on `leaf`, failing with
/// [`Error::NonConstantGamma`] if either defect exceeds `tolerance`.
pub fn integral_flow(
    gen: &GeneratingFunction,
    cmap: &CMap,
    eta: &PeriodicOneForm,
    leaf: usize,
    integral: &HamiltonianModel,
    tolerance: f64,
) -> Result<IntegralFlow> {
    let g = generating_conjugacy(gen, cmap, leaf)?;
    let grid = g.grid().clone();
    let n = grid.dim();
    if integral.dim() != n || eta.grid() != &grid {
        return Err(Error::DimensionMismatch(
            "integral, leaf and conjugacy grids differ".into(),
        ));
    }
    let dd: Vec<Vec<PeriodicField>> = g
        .displacement()
        .iter()
        .map(|f| (0..n).map(|j| f.derivative(j)).collect())
        .collect();
    let deta: Vec<Vec<PeriodicField>> = eta
        .components()
        .iter()
        .map(|f| (0..n).map(|j| f.derivative(j)).collect())
        .collect();
    let idx: Vec<usize> = (0..grid.len()).collect();
    let rows = crate::par::try_map(&idx, |&node| {
        let q = grid.node(node);
        let p = eta.value_at_node(node);
        let (_, grad) = integral.gradient(&q, &p)?;
        let (hq, hp) = grad.split_at(n);
        let gamma: Vec<f64> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| (dd[i][j].samples()[node] + if i == j { 1.0 } else { 0.0 }) * hp[j])
                    .sum()
            })
            .collect();
        let tangency = (0..n)
            .map(|i| {
                let v: f64 = hq[i]
                    + (0..n)
                        .map(|j| deta[i][j].samples()[node] * hp[j])
                        .sum::<f64>();
                v * v
            })
            .sum::<f64>()
            .sqrt();
        Ok((gamma, tangency))
    })?;
    let mean: Vec<f64> = (0..n)
        .map(|d| rows.iter().map(|(g, _)| g[d]).sum::<f64>() / rows.len() as f64)
        .collect();
    let gamma_defect = rows
        .iter()
        .map(|(g, _)| norm(&sub(g, &mean)))
        .fold(0.0, f64::max);
    let tangency_defect = rows.iter().map(|(_, t)| *t).fold(0.0, f64::max);
    if gamma_defect > tolerance || tangency_defect > tolerance {
        return Err(Error::NonConstantGamma {
            gamma_defect,
            tangency_defect,
        });
    }
    Ok(IntegralFlow {
        conjugacy: g,
        gamma: mean,
        gamma_defect,
        tangency_defect,
    })
}

#[cfg(test)]
#[allow(clippy::approx_constant)]
mod tests {
    use super::*;
    use crate::flow::IntegratorConfig;
    use crate::foliation::{
        build_foliation, c_map, generating_function, FoliationSource, LeafGrid,
    };
    use crate::models::{builtin_model, pendulum, twisted, ModelParams, Twist};
    use std::f64::consts::PI;

    fn trivial_leaf(a: &[f64]) -> LeafFlow {
        let m = builtin_model("separable", 2, &ModelParams::default()).unwrap();
        let g = Grid::cubic(2, 8).unwrap();
        LeafFlow::new(
            m,
            PeriodicOneForm::constant(&g, a),
            IntegratorConfig::midpoint(1e-2),
        )
        .unwrap()
    }

    fn twisted_leaf(a: &[f64], step: f64) -> LeafFlow {
        let m = twisted(0.1, 2).unwrap();
        let o = m.oracle().unwrap().clone();
        let g = Grid::cubic(2, 64).unwrap();
        let leaf = PeriodicOneForm::from_fn(&g, |q| o.leaf(a, q));
        LeafFlow::new(m, leaf, IntegratorConfig::midpoint(step)).unwrap()
    }

    #[test]
    fn weights_vanish_at_ends_and_sum_to_one() {
        assert_eq!(bump(0.0), 0.0);
        assert_eq!(bump(1.0), 0.0);
        assert!((bump(0.5) - (-4.0f64).exp()).abs() < 1e-15);
        let w = bump_weights(100);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn trivial_rotation_vector_is_a() {
        let a = [0.31830989, 0.57735027];
        let leaf = trivial_leaf(&a);
        for method in [AveragingMethod::Weighted, AveragingMethod::Cesaro] {
            let r = rotation_vector(&leaf, 64, method).unwrap();
            assert!(norm(&sub(&r.rho, &a)) < 1e-10, "{method:?}: {:?}", r.rho);
            assert!(r.error < 1e-10);
        }
    }

    #[test]
    fn resonance_detection() {
        assert!(matches!(
            check_nonresonant(&[0.5, 0.25]),
            Err(Error::ResonantRotation { .. })
        ));
        check_nonresonant(&[0.31830989, 0.57735027]).unwrap();
    }

    #[test]
    fn resonant_herman_is_rejected() {
        let leaf = trivial_leaf(&[0.5, 0.25]);
        let g = Grid::cubic(2, 8).unwrap();
        let opts = HermanOptions {
            iterates: 64,
            method: AveragingMethod::Weighted,
            grid: g.clone(),
            map_grid: g,
        };
        assert!(matches!(
            herman_conjugacy(&leaf, &[0.5, 0.25], &opts),
            Err(Error::ResonantRotation { .. })
        ));
    }

    #[test]
    fn trivial_herman_is_identity() {
        let a = [0.31830989, 0.57735027];
        let leaf = trivial_leaf(&a);
        let g = Grid::cubic(2, 16).unwrap();
        let opts = HermanOptions {
            iterates: 256,
            method: AveragingMethod::Weighted,
            grid: g.clone(),
            map_grid: Grid::cubic(2, 8).unwrap(),
        };
        let h = herman_conjugacy(&leaf, &a, &opts).unwrap();
        assert!(h.displacement().iter().all(|d| d.sup_norm() < 1e-12));
    }

    #[test]
    fn twisted_herman_matches_oracle_up_to_constant() {
        let a = [0.31830989, 0.57735027];
        let leaf = twisted_leaf(&a, 1e-3);
        let rho = rotation_vector(&leaf, 128, AveragingMethod::Weighted).unwrap();
        assert!(norm(&sub(&rho.rho, &a)) < 1e-6, "{:?}", rho.rho);
        let g = Grid::cubic(2, 32).unwrap();
        let opts = HermanOptions {
            iterates: 512,
            method: AveragingMethod::Weighted,
            grid: g.clone(),
            map_grid: Grid::cubic(2, 32).unwrap(),
        };
        let h = herman_conjugacy(&leaf, &rho.rho, &opts).unwrap();
        let t = Twist::new(0.1).unwrap();
        let oracle = displacement_map(
            &g,
            &g.nodes()
                .map(|q| sub(&t.psi_inv(&q), &q))
                .collect::<Vec<_>>(),
            false,
        )
        .unwrap();
        let cmp = compare_up_to_constant(&h, &oracle).unwrap();
        assert!(cmp.defect < 1e-6, "defect {}", cmp.defect);
        let points: Vec<Vec<f64>> = Grid::cubic(2, 4).unwrap().nodes().collect();
        let defect = conjugacy_defect(&h, &leaf, &rho.rho, &[1.0, 3.0], &points).unwrap();
        assert!(defect < 1e-6, "conjugacy defect {defect}");
    }

    #[test]
    fn continuous_average_agrees_with_discrete() {
        let a = [0.31830989, 0.57735027];
        let leaf = twisted_leaf(&a, 2e-3);
        let g = Grid::cubic(2, 8).unwrap();
        let hc = herman_conjugacy_continuous(&leaf, &a, 100.0, &g).unwrap();
        let t = Twist::new(0.1).unwrap();
        let oracle = displacement_map(
            &g,
            &g.nodes()
                .map(|q| sub(&t.psi_inv(&q), &q))
                .collect::<Vec<_>>(),
            false,
        )
        .unwrap();
        assert!(compare_up_to_constant(&hc, &oracle).unwrap().defect < 1e-5);
    }

    #[test]
    fn lipschitz_of_shear_map() {
        let g = Grid::cubic(2, 64).unwrap();
        let s = 0.1 / (2.0 * PI);
        let h = ConjugacyMap::new(vec![
            PeriodicField::from_fn(&g, |q| s * (2.0 * PI * q[0]).sin()),
            PeriodicField::constant(&g, 0.0),
        ])
        .unwrap();
        let l = lipschitz_constants(&h);
        assert!((l.forward - 1.1).abs() < 1e-3, "{}", l.forward);
        assert!((l.inverse - 1.0 / 0.9).abs() < 1e-3, "{}", l.inverse);
        let q = [0.3, 0.7];
        let y = h.inverse(&h.apply(&q)).unwrap();
        assert!(norm(&sub(&y, &q)) < 1e-12);
    }

    #[test]
    fn rotation_measure_is_uniform() {
        let m = kb_measure(
            &Rotation {
                rho: vec![0.31830989, 0.57735027],
            },
            1_000_000,
            32,
            10_000,
            7,
        )
        .unwrap();
        assert_eq!(m.samples, 1_000_000);
        assert!((m.statistical_tolerance - 0.096).abs() < 1e-3);
        assert!(m.min_density() >= 1.0 - m.statistical_tolerance);
        assert!(m.max_density() <= 1.0 + m.statistical_tolerance);
        let again = kb_measure(
            &Rotation {
                rho: vec![0.31830989, 0.57735027],
            },
            1_000_000,
            32,
            10_000,
            7,
        )
        .unwrap();
        assert_eq!(m, again);
        assert!(matches!(
            kb_measure(&Rotation { rho: vec![0.1] }, 1000, 8, 100, 0),
            Err(Error::Precondition(_))
        ));
    }

    fn fix_b_setup() -> (crate::foliation::Foliation, CMap, GeneratingFunction) {
        let m = twisted(0.1, 2).unwrap();
        let fol = build_foliation(
            FoliationSource::Oracle {
                model: &m,
                leaf_grid: LeafGrid::cube(2, 0.2, 0.8, 5).unwrap(),
                q_grid: Grid::cubic(2, 32).unwrap(),
            },
            Default::default(),
        )
        .unwrap();
        let cm = c_map(&fol).unwrap();
        let gen = generating_function(&fol, &cm).unwrap();
        (fol, cm, gen)
    }

    #[test]
    fn generating_conjugacy_is_psi_inverse() {
        let (fol, cm, gen) = fix_b_setup();
        let g = generating_conjugacy(&gen, &cm, 12).unwrap();
        let t = Twist::new(0.1).unwrap();
        for q in fol.q_grid().nodes() {
            assert!(norm(&sub(&g.apply(&q), &t.psi_inv(&q))) < 1e-8);
        }
        let l = lipschitz_constants(&g);
        assert!(l.forward < 1.06 && l.inverse < 1.06);
    }

    #[test]
    fn integral_flow_reproduces_leaf_flow() {
        let (fol, cm, gen) = fix_b_setup();
        let m = twisted(0.1, 2).unwrap();
        let leaf = 12;
        let f = integral_flow(&gen, &cm, fol.leaf(leaf), leaf, &m, 1e-6).unwrap();
        let a = fol.leaf_grid().point(leaf);
        assert!(norm(&sub(&f.gamma, &a)) < 1e-8);
        let o = m.oracle().unwrap();
        let q = [0.2, 0.4];
        let got = f.apply(&q, 1.0).unwrap();
        let want = o.leaf_flow(&a, &q, 1.0).unwrap();
        assert!(norm(&sub(&got, &want)) < 1e-6);
    }

    #[test]
    fn pendulum_is_not_an_integral_of_the_flat_foliation() {
        let sep = builtin_model("separable", 2, &ModelParams::default()).unwrap();
        let fol = build_foliation(
            FoliationSource::Oracle {
                model: &sep,
                leaf_grid: LeafGrid::cube(2, -0.5, 0.5, 3).unwrap(),
                q_grid: Grid::cubic(2, 16).unwrap(),
            },
            Default::default(),
        )
        .unwrap();
        let cm = c_map(&fol).unwrap();
        let gen = generating_function(&fol, &cm).unwrap();
        let p = pendulum(0.1, 2).unwrap();
        assert!(matches!(
            integral_flow(&gen, &cm, fol.leaf(4), 4, &p, 1e-6),
            Err(Error::NonConstantGamma { .. })
        ));
    }
}
