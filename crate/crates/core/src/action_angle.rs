//! The A-function, Arnol'd–Liouville coordinates built from a generating
//! function, their mollified symplectic approximations and the smooth
//! integrable approximants `H_ε = A_ε ∘ π₂ ∘ φ_ε⁻¹`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{flow_lifted, IntegratorConfig};
use crate::foliation::{dist, CMap, Foliation, GeneratingFunction, LeafGrid};
use crate::models::HamiltonianModel;
use crate::spline::{combine, TensorSpline};
use crate::torus::{torus_distance, ModeSet, PhasePoint};

const NEWTON_TOL: f64 = 1e-13;
const NEWTON_MAX_ITER: usize = 50;
/// Quadrature nodes per axis of the discrete mollifier.
pub const KERNEL_NODES: usize = 64;
/// Spectral coefficients of `S` below this fraction of the largest are dropped.
const MODE_PRUNE: f64 = 1e-15;

/// Local quadratic model of `A` at a point.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticFit {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub hessian: DMatrix<f64>,
}

/// `A` sampled on the image grid `c(a_i)` with moving least-squares
/// derivatives.
#[derive(Clone, Debug)]
pub struct AFunction {
    pub leaf_grid: LeafGrid,
    pub c: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub gradient: Vec<Vec<f64>>,
    pub hessian: Vec<DMatrix<f64>>,
    /// `max_q |H(q, η_a(q)) − A|` per leaf.
    pub energy_variation: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

/// `A(c(a)) = H(0, η_a(0))`, rejecting leaves on which `H` varies by more
/// than `tolerance`.
pub fn a_function(
    fol: &Foliation,
    cmap: &CMap,
    model: &HamiltonianModel,
    tolerance: f64,
) -> Result<AFunction> {
    if model.dim() != fol.dim() {
        return Err(Error::DimensionMismatch(
            "model and foliation dimensions differ".into(),
        ));
    }
    let grid = fol.q_grid();
    let idx: Vec<usize> = (0..fol.len()).collect();
    let rows = crate::par::try_map(&idx, |&leaf| {
        let eta = fol.leaf(leaf);
        let a = model.value(&grid.node(0), &eta.value_at_node(0))?;
        let mut variation = 0.0f64;
        for node in 0..grid.len() {
            let h = model.value(&grid.node(node), &eta.value_at_node(node))?;
            variation = variation.max((h - a).abs());
        }
        Ok((a, variation))
    })?;
    if let Some((leaf, &(_, variation))) =
        rows.iter().enumerate().find(|(_, r)| !(r.1 <= tolerance))
    {
        return Err(Error::NonConstantEnergy { leaf, variation });
    }
    let mut af = AFunction::from_values(
        fol.leaf_grid().clone(),
        cmap.c.clone(),
        rows.iter().map(|r| r.0).collect(),
    )?;
    af.energy_variation = rows.iter().map(|r| r.1).collect();
    Ok(af)
}

impl AFunction {
    /// Build from values on an image grid; derivatives by local quadratic fits.
    pub fn from_values(leaf_grid: LeafGrid, c: Vec<Vec<f64>>, values: Vec<f64>) -> Result<Self> {
        if c.len() != leaf_grid.len() || values.len() != leaf_grid.len() {
            return Err(Error::DimensionMismatch(
                "A-function data does not match the leaf grid".into(),
            ));
        }
        if leaf_grid.counts.iter().any(|&m| m < 3) {
            return Err(Error::Precondition(
                "quadratic fits need at least three leaves per axis".into(),
            ));
        }
        let n = leaf_grid.dim();
        let lo = (0..n)
            .map(|d| c.iter().map(|v| v[d]).fold(f64::INFINITY, f64::min))
            .collect();
        let hi = (0..n)
            .map(|d| c.iter().map(|v| v[d]).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let mut af = AFunction {
            energy_variation: vec![0.0; values.len()],
            gradient: Vec::new(),
            hessian: Vec::new(),
            leaf_grid,
            c,
            values,
            lo,
            hi,
        };
        let fits: Vec<QuadraticFit> = (0..af.c.len())
            .map(|i| af.fit_near(&af.c[i], i))
            .collect::<Result<_>>()?;
        af.gradient = fits.iter().map(|f| f.gradient.clone()).collect();
        af.hessian = fits.into_iter().map(|f| f.hessian).collect();
        Ok(af)
    }

    pub fn dim(&self) -> usize {
        self.leaf_grid.dim()
    }

    /// Quadratic fit of `A` around an arbitrary `c` (window of `5ⁿ` image
    /// nodes around the nearest one).
    pub fn fit_at(&self, c: &[f64]) -> Result<QuadraticFit> {
        let nearest = (0..self.c.len())
            .min_by(|&i, &j| dist(&self.c[i], c).total_cmp(&dist(&self.c[j], c)))
            .expect("nonempty");
        self.fit_near(c, nearest)
    }

    fn fit_near(&self, c: &[f64], center: usize) -> Result<QuadraticFit> {
        let n = self.dim();
        let g = &self.leaf_grid;
        let mid = g.multi_index(center);
        let ranges: Vec<(usize, usize)> = (0..n)
            .map(|d| {
                let m = g.counts[d];
                let w = m.min(5);
                let start = mid[d].saturating_sub(2).min(m - w);
                (start, w)
            })
            .collect();
        let total: usize = ranges.iter().map(|r| r.1).product();
        let nodes: Vec<usize> = (0..total)
            .map(|mut f| {
                let mut idx = vec![0usize; n];
                for d in (0..n).rev() {
                    idx[d] = ranges[d].0 + f % ranges[d].1;
                    f /= ranges[d].1;
                }
                g.flat_index(&idx)
            })
            .collect();
        // columns are built in units of the window radius so that QR sees an
        // O(1) design matrix
        let scale = nodes
            .iter()
            .map(|&j| dist(&self.c[j], c))
            .fold(0.0, f64::max)
            .max(f64::MIN_POSITIVE);
        let unknowns = 1 + n + n * (n + 1) / 2;
        let mut design = DMatrix::zeros(nodes.len(), unknowns);
        let mut rhs = DVector::zeros(nodes.len());
        for (r, &j) in nodes.iter().enumerate() {
            let u: Vec<f64> = self.c[j]
                .iter()
                .zip(c)
                .map(|(a, b)| (a - b) / scale)
                .collect();
            let w = (-norm(&u).powi(2)).exp().sqrt();
            let mut col = 0;
            design[(r, col)] = w;
            col += 1;
            for d in 0..n {
                design[(r, col)] = w * u[d];
                col += 1;
            }
            for d in 0..n {
                for e in d..n {
                    design[(r, col)] = w * if d == e {
                        0.5 * u[d] * u[d]
                    } else {
                        u[d] * u[e]
                    };
                    col += 1;
                }
            }
            rhs[r] = w * self.values[j];
        }
        let qr = design.qr();
        let qtb = qr.q().transpose() * rhs;
        let coef = qr
            .r()
            .solve_upper_triangular(&qtb)
            .filter(|x| x.iter().all(|v| v.is_finite()))
            .ok_or_else(|| Error::Precondition("quadratic fit is rank deficient".into()))?;
        let gradient = (0..n).map(|d| coef[1 + d] / scale).collect();
        let mut hessian = DMatrix::zeros(n, n);
        let mut col = 1 + n;
        for d in 0..n {
            for e in d..n {
                hessian[(d, e)] = coef[col] / (scale * scale);
                hessian[(e, d)] = coef[col] / (scale * scale);
                col += 1;
            }
        }
        Ok(QuadraticFit {
            value: coef[0],
            gradient,
            hessian,
        })
    }

    /// Whether the Hessian estimate is positive definite at every interior leaf.
    pub fn hessian_positive_definite(&self) -> bool {
        (0..self.c.len())
            .filter(|&i| !self.leaf_grid.is_boundary(i))
            .all(|i| self.hessian[i].clone().symmetric_eigenvalues().min() > 0.0)
    }

    /// Midpoint convexity over all pairs of image nodes:
    /// `(A(c₁) + A(c₂))/2 − A((c₁ + c₂)/2)`.
    pub fn convexity_report(&self) -> Result<ConvexityReport> {
        let m = self.c.len();
        let mut report = ConvexityReport {
            pairs: 0,
            violations: 0,
            min_gap: f64::INFINITY,
        };
        for i in 0..m {
            for j in i + 1..m {
                let mid: Vec<f64> = self.c[i]
                    .iter()
                    .zip(&self.c[j])
                    .map(|(a, b)| 0.5 * (a + b))
                    .collect();
                let gap = 0.5 * (self.values[i] + self.values[j]) - self.fit_at(&mid)?.value;
                report.pairs += 1;
                if !(gap > 0.0) {
                    report.violations += 1;
                }
                report.min_gap = report.min_gap.min(gap);
            }
        }
        Ok(report)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvexityReport {
    pub pairs: usize,
    pub violations: usize,
    pub min_gap: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `min_{0<|k|∞≤k_max} |⟨k, v⟩| / ‖k‖`.
pub fn resonance_margin(v: &[f64], k_max: i64) -> f64 {
    let n = v.len();
    let width = (2 * k_max + 1) as usize;
    let mut best = f64::INFINITY;
    for flat in 0..width.pow(n as u32) {
        let mut r = flat;
        let k: Vec<f64> = (0..n)
            .map(|_| {
                let x = (r % width) as i64 - k_max;
                r /= width;
                x as f64
            })
            .collect();
        let kn = norm(&k);
        if kn == 0.0 {
            continue;
        }
        let dot: f64 = k.iter().zip(v).map(|(a, b)| a * b).sum();
        best = best.min(dot.abs() / kn);
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Witness {
    pub c: Vec<f64>,
    pub grad_a: Vec<f64>,
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BallOutcome {
    pub center: Vec<f64>,
    pub radius: f64,
    /// A completely irrational `∇A` value in the ball, if one was found.
    pub witness: Option<Witness>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NondegeneracyReport {
    pub balls: Vec<BallOutcome>,
    pub all_witnessed: bool,
}

/// Search each ball of radius `radius` (centers spaced by `radius` over
/// `[lo, hi]`) for `c` with `|⟨k, ∇A(c)⟩| > δ‖k‖` for all `0 < |k|∞ ≤ k_max`.
pub fn nondegeneracy_scan(
    af: &AFunction,
    lo: &[f64],
    hi: &[f64],
    radius: f64,
    k_max: i64,
    delta: f64,
) -> Result<NondegeneracyReport> {
    let n = af.dim();
    if lo.len() != n || hi.len() != n {
        return Err(Error::DimensionMismatch("scan region dimension".into()));
    }
    if !(radius > 0.0) || k_max < 1 {
        return Err(Error::BadParameters(
            "radius and k_max must be positive".into(),
        ));
    }
    for d in 0..n {
        if lo[d] > hi[d] || lo[d] < af.lo[d] - 1e-12 || hi[d] > af.hi[d] + 1e-12 {
            return Err(Error::Precondition(format!(
                "scan region leaves the A-function domain along axis {d}"
            )));
        }
    }
    let per_axis: Vec<Vec<f64>> = (0..n)
        .map(|d| {
            let count = ((hi[d] - lo[d]) / radius + 1e-9).floor() as usize + 1;
            (0..count).map(|i| lo[d] + i as f64 * radius).collect()
        })
        .collect();
    let centers = cartesian(&per_axis);
    let side = 7usize;
    let offsets = cartesian(
        &(0..n)
            .map(|_| {
                (0..side)
                    .map(|i| {
                        (2.0 * i as f64 / (side - 1) as f64 - 1.0) * radius / (n as f64).sqrt()
                    })
                    .collect()
            })
            .collect::<Vec<_>>(),
    );
    let balls = crate::par::try_map(&centers, |center| {
        for off in &offsets {
            let c: Vec<f64> = center
                .iter()
                .zip(off)
                .enumerate()
                .map(|(d, (a, b))| (a + b).clamp(af.lo[d], af.hi[d]))
                .collect();
            let grad = af.fit_at(&c)?.gradient;
            let margin = resonance_margin(&grad, k_max);
            if margin > delta {
                return Ok(BallOutcome {
                    center: center.clone(),
                    radius,
                    witness: Some(Witness {
                        c,
                        grad_a: grad,
                        margin,
                    }),
                });
            }
        }
        Ok(BallOutcome {
            center: center.clone(),
            radius,
            witness: None,
        })
    })?;
    Ok(NondegeneracyReport {
        all_witnessed: balls.iter().all(|b| b.witness.is_some()),
        balls,
    })
}

fn cartesian(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new()];
    for axis in axes {
        out = out
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |&v| {
                    let mut q = p.clone();
                    q.push(v);
                    q
                })
            })
            .collect();
    }
    out
}

/// `𝒮(q, c)` and its derivatives up to order two.
#[derive(Clone, Debug)]
pub struct SDerivatives {
    pub value: f64,
    pub dq: Vec<f64>,
    pub dc: Vec<f64>,
    pub dqq: DMatrix<f64>,
    /// `dqc[(i, j)] = ∂²𝒮/∂q_i∂c_j`.
    pub dqc: DMatrix<f64>,
    pub dcc: DMatrix<f64>,
}

/// `𝒮(q, c) = Re Σ_k Ŝ_k(c) e^{2πik·q}` with each `Ŝ_k` a tensor spline in `c`.
#[derive(Clone, Debug)]
struct SpectralFamily {
    modes: ModeSet,
    spline: TensorSpline,
    /// `coeffs[node][mode]`.
    coeffs: Vec<Vec<Complex64>>,
}

impl SpectralFamily {
    fn eval(&self, q: &[f64], c: &[f64]) -> SDerivatives {
        let n = self.spline.dim();
        let tw = self.spline.weights(c);
        let mm = self.modes.len();
        let mut co = vec![Complex64::new(0.0, 0.0); mm];
        let mut cd = vec![vec![Complex64::new(0.0, 0.0); mm]; n];
        let mut cdd = vec![vec![vec![Complex64::new(0.0, 0.0); mm]; n]; n];
        for (j, row) in self.coeffs.iter().enumerate() {
            for (k, &z) in row.iter().enumerate() {
                co[k] += tw.w[j] * z;
                for d in 0..n {
                    cd[d][k] += tw.dw[d][j] * z;
                    for e in d..n {
                        cdd[d][e][k] += tw.ddw[d][e][j] * z;
                    }
                }
            }
        }
        let mut basis = Vec::new();
        self.modes.basis_into(q, &mut basis);
        let mut out = SDerivatives {
            value: 0.0,
            dq: vec![0.0; n],
            dc: vec![0.0; n],
            dqq: DMatrix::zeros(n, n),
            dqc: DMatrix::zeros(n, n),
            dcc: DMatrix::zeros(n, n),
        };
        let i2pi = Complex64::new(0.0, 2.0 * PI);
        for k in 0..mm {
            let freq = self.modes.freq(k);
            let e = basis[k];
            let t = co[k] * e;
            out.value += t.re;
            for i in 0..n {
                let ki = freq[i] as f64;
                out.dq[i] += (i2pi * ki * t).re;
                for j in 0..n {
                    out.dqq[(i, j)] -= 4.0 * PI * PI * ki * freq[j] as f64 * t.re;
                    out.dqc[(i, j)] += (i2pi * ki * cd[j][k] * e).re;
                }
            }
            for d in 0..n {
                out.dc[d] += (cd[d][k] * e).re;
                for f in d..n {
                    let v = (cdd[d][f][k] * e).re;
                    out.dcc[(d, f)] += v;
                    if f != d {
                        out.dcc[(f, d)] += v;
                    }
                }
            }
        }
        out
    }

    /// `∂𝒮/∂q(q, c_j)` at one node from the stored coefficients alone.
    fn nodal_dq(&self, q: &[f64], node: usize, basis: &[Complex64]) -> Vec<f64> {
        let n = self.spline.dim();
        let mut dq = vec![0.0; n];
        for (k, &z) in self.coeffs[node].iter().enumerate() {
            let t = z * basis[k];
            for (i, v) in dq.iter_mut().enumerate() {
                *v -= 2.0 * PI * self.modes.freq(k)[i] as f64 * t.im;
            }
        }
        let _ = q;
        dq
    }
}

/// Arnol'd–Liouville coordinates `φ(x, c) = (q, p)` generated by
/// `𝒮(q, c) = S(q, c⁻¹(c))` through `x = q + ∂𝒮/∂c`, `p = c + ∂𝒮/∂q`.
#[derive(Clone, Debug)]
pub struct ALCoordinates {
    family: SpectralFamily,
    /// `A` on the c-grid nodes; evaluated with the same spline as `𝒮`.
    a_values: Vec<f64>,
    /// Leaf parameters `a(c_j)` behind each c-grid node.
    pub leaf_params: Vec<Vec<f64>>,
    /// Box on which the coordinates are valid.
    pub valid_lo: Vec<f64>,
    pub valid_hi: Vec<f64>,
}

/// Resample the generating function and `A` onto a regular grid in `c`.
pub fn build_coordinates(
    gen: &GeneratingFunction,
    cmap: &CMap,
    af: &AFunction,
) -> Result<ALCoordinates> {
    let lg = &gen.leaf_grid;
    let n = lg.dim();
    if af.c.len() != lg.len() || cmap.c.len() != lg.len() {
        return Err(Error::DimensionMismatch(
            "A-function, c-map and generating function use different leaf grids".into(),
        ));
    }
    for leaf in 0..lg.len() {
        cmap.dc_inverse_transpose(leaf)?;
    }
    let a_spline = TensorSpline::regular(&lg.lo, &lg.hi, &lg.counts)?;
    // inner box of the image c(A)
    let mut lo = vec![f64::NEG_INFINITY; n];
    let mut hi = vec![f64::INFINITY; n];
    for leaf in 0..lg.len() {
        let idx = lg.multi_index(leaf);
        for d in 0..n {
            if idx[d] == 0 {
                lo[d] = lo[d].max(cmap.c[leaf][d]);
            }
            if idx[d] + 1 == lg.counts[d] {
                hi[d] = hi[d].min(cmap.c[leaf][d]);
            }
        }
    }
    if (0..n).any(|d| !(hi[d] > lo[d])) {
        return Err(Error::Precondition(
            "image of the leaf box has no interior".into(),
        ));
    }
    let c_spline = TensorSpline::regular(&lo, &hi, &lg.counts)?;
    let spectra: Vec<&[Complex64]> = gen.s.iter().map(|s| s.spectrum()).collect();
    let (modes, kept) = ModeSet::significant(gen.q_grid(), &spectra, MODE_PRUNE);
    let targets: Vec<Vec<f64>> = (0..c_spline.len()).map(|j| c_spline.node(j)).collect();
    let rows = crate::par::try_map(&targets, |target| {
        let a = invert_c_map(&a_spline, cmap, target)?;
        let w = a_spline.weights(&a).w;
        let coeffs: Vec<Complex64> = kept
            .iter()
            .map(|&flat| spectra.iter().zip(&w).map(|(s, wl)| s[flat] * *wl).sum())
            .collect();
        Ok((a.clone(), coeffs, combine(&w, &af.values)))
    })?;
    Ok(ALCoordinates {
        family: SpectralFamily {
            modes,
            spline: c_spline,
            coeffs: rows.iter().map(|r| r.1.clone()).collect(),
        },
        a_values: rows.iter().map(|r| r.2).collect(),
        leaf_params: rows.into_iter().map(|r| r.0).collect(),
        valid_lo: lo,
        valid_hi: hi,
    })
}

fn invert_c_map(a_spline: &TensorSpline, cmap: &CMap, target: &[f64]) -> Result<Vec<f64>> {
    let n = target.len();
    let seed = (0..cmap.c.len())
        .min_by(|&i, &j| dist(&cmap.c[i], target).total_cmp(&dist(&cmap.c[j], target)))
        .expect("nonempty");
    let mut a = cmap.leaf_grid.point(seed);
    let mut residual = f64::INFINITY;
    for _ in 0..NEWTON_MAX_ITER {
        let tw = a_spline.weights(&a);
        let r = DVector::from_fn(n, |i, _| {
            cmap.c.iter().zip(&tw.w).map(|(c, w)| w * c[i]).sum::<f64>() - target[i]
        });
        residual = r.amax();
        if residual <= NEWTON_TOL * (1.0 + norm(target)) {
            return Ok(a);
        }
        let jac = DMatrix::from_fn(n, n, |i, d| {
            cmap.c.iter().zip(&tw.dw[d]).map(|(c, w)| w * c[i]).sum()
        });
        let step = jac.lu().solve(&r).ok_or_else(|| Error::DegenerateCMap {
            leaf: seed,
            condition: f64::INFINITY,
        })?;
        for d in 0..n {
            a[d] -= step[d];
        }
    }
    Err(Error::NewtonDivergence {
        context: "inverse cohomology map".into(),
        iterations: NEWTON_MAX_ITER,
        residual,
    })
}

impl ALCoordinates {
    pub fn dim(&self) -> usize {
        self.family.spline.dim()
    }

    /// Nodes of the regular c-grid.
    pub fn c_nodes(&self) -> Vec<Vec<f64>> {
        (0..self.family.spline.len())
            .map(|j| self.family.spline.node(j))
            .collect()
    }

    pub fn generating(&self, q: &[f64], c: &[f64]) -> SDerivatives {
        self.family.eval(q, c)
    }

    pub fn a_value(&self, c: &[f64]) -> f64 {
        combine(&self.family.spline.weights(c).w, &self.a_values)
    }

    /// `ρ(c) = ∇A(c)`.
    pub fn rho(&self, c: &[f64]) -> Vec<f64> {
        let tw = self.family.spline.weights(c);
        tw.dw.iter().map(|w| combine(w, &self.a_values)).collect()
    }

    pub fn a_hessian(&self, c: &[f64]) -> DMatrix<f64> {
        let n = self.dim();
        let tw = self.family.spline.weights(c);
        DMatrix::from_fn(n, n, |i, j| combine(&tw.ddw[i][j], &self.a_values))
    }

    fn contains(&self, c: &[f64]) -> bool {
        c.iter().enumerate().all(|(d, &v)| {
            let slack = 1e-8 * (1.0 + self.valid_hi[d].abs().max(self.valid_lo[d].abs()));
            v >= self.valid_lo[d] - slack && v <= self.valid_hi[d] + slack
        })
    }

    /// `φ(x, c)`; `q` is returned on the cover next to `x`.
    pub fn phi(&self, x: &[f64], c: &[f64]) -> Result<PhasePoint> {
        Ok(self.phi_with_derivatives(x, c)?.0)
    }

    fn phi_with_derivatives(&self, x: &[f64], c: &[f64]) -> Result<(PhasePoint, SDerivatives)> {
        let n = self.dim();
        let mut q = x.to_vec();
        let mut residual = f64::INFINITY;
        for _ in 0..NEWTON_MAX_ITER {
            let s = self.family.eval(&q, c);
            let r = DVector::from_fn(n, |j, _| q[j] + s.dc[j] - x[j]);
            residual = r.amax();
            if residual <= NEWTON_TOL {
                let p = (0..n).map(|i| c[i] + s.dq[i]).collect();
                return Ok((PhasePoint::new(q, p), s));
            }
            let jac = DMatrix::identity(n, n) + s.dqc.transpose();
            let step = jac
                .lu()
                .solve(&r)
                .ok_or_else(|| newton_failure("φ", residual))?;
            for j in 0..n {
                q[j] -= step[j];
            }
        }
        Err(newton_failure("φ", residual))
    }

    /// `φ(x, c)` with `Dφ` in the variable order `(x, c) → (q, p)`.
    pub fn phi_with_jacobian(&self, x: &[f64], c: &[f64]) -> Result<(PhasePoint, DMatrix<f64>)> {
        let n = self.dim();
        let (pt, s) = self.phi_with_derivatives(x, c)?;
        let a = DMatrix::identity(n, n) + s.dqc.transpose();
        let a_inv = a
            .try_inverse()
            .ok_or_else(|| newton_failure("Dφ", f64::INFINITY))?;
        let dq_dx = a_inv.clone();
        let dq_dc = -&a_inv * &s.dcc;
        let dp_dx = &s.dqq * &a_inv;
        let dp_dc = DMatrix::identity(n, n) + &s.dqc - &s.dqq * &a_inv * &s.dcc;
        let mut jac = DMatrix::zeros(2 * n, 2 * n);
        jac.view_mut((0, 0), (n, n)).copy_from(&dq_dx);
        jac.view_mut((0, n), (n, n)).copy_from(&dq_dc);
        jac.view_mut((n, 0), (n, n)).copy_from(&dp_dx);
        jac.view_mut((n, n), (n, n)).copy_from(&dp_dc);
        Ok((pt, jac))
    }

    /// `φ⁻¹(q, p) = (x, c)`: nearest c-node leaf, then Newton on
    /// `p = c + ∂𝒮/∂q(q, c)`.
    pub fn phi_inv(&self, q: &[f64], p: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.dim();
        let mut basis = Vec::new();
        self.family.modes.basis_into(q, &mut basis);
        let nodes = self.c_nodes();
        let mut best = (f64::INFINITY, 0usize);
        for (j, cj) in nodes.iter().enumerate() {
            let dq = self.family.nodal_dq(q, j, &basis);
            let d = (0..n)
                .map(|i| (p[i] - cj[i] - dq[i]).powi(2))
                .sum::<f64>()
                .sqrt();
            if d < best.0 {
                best = (d, j);
            }
        }
        let mut c = nodes[best.1].clone();
        let mut residual = f64::INFINITY;
        for _ in 0..NEWTON_MAX_ITER {
            let s = self.family.eval(q, &c);
            let r = DVector::from_fn(n, |i, _| c[i] + s.dq[i] - p[i]);
            residual = r.amax();
            if residual <= NEWTON_TOL * (1.0 + norm(p)) {
                if !self.contains(&c) {
                    return Err(Error::LeafLocationFailure(format!(
                        "(q, p) = ({q:?}, {p:?}) lies on no leaf of the domain (nearest class {c:?})"
                    )));
                }
                let x = (0..n).map(|j| q[j] + s.dc[j]).collect();
                return Ok((x, c));
            }
            let jac = DMatrix::identity(n, n) + &s.dqc;
            let Some(step) = jac.lu().solve(&r) else {
                break;
            };
            for i in 0..n {
                c[i] -= step[i];
            }
            if c.iter().any(|v| !v.is_finite()) {
                break;
            }
        }
        Err(Error::LeafLocationFailure(format!(
            "Newton refinement for (q, p) = ({q:?}, {p:?}) stalled at residual {residual:e}"
        )))
    }

    /// Smooth by the bump mollifier of radius `eps` in `q` (periodic) and
    /// `c` (the valid box shrinks by `eps`).
    pub fn mollified(&self, eps: f64) -> Result<MollifiedCoordinates> {
        let n = self.dim();
        let half = (0..n)
            .map(|d| 0.5 * (self.valid_hi[d] - self.valid_lo[d]))
            .fold(f64::INFINITY, f64::min);
        if !(eps >= 0.0) || eps >= half {
            return Err(Error::DomainTooSmall {
                eps,
                half_width: half,
            });
        }
        if eps == 0.0 {
            return Ok(MollifiedCoordinates {
                eps,
                second_moment: 0.0,
                coords: self.clone(),
            });
        }
        let kernel = mollifier_kernel(eps, KERNEL_NODES);
        let second_moment = kernel.iter().map(|(s, w)| w * s * s).sum();
        let multiplier = |k: i32| -> f64 {
            kernel
                .iter()
                .map(|(s, w)| w * (2.0 * PI * k as f64 * s).cos())
                .sum()
        };
        let factors: Vec<f64> = (0..self.family.modes.len())
            .map(|m| {
                self.family
                    .modes
                    .freq(m)
                    .iter()
                    .map(|&k| multiplier(k))
                    .product()
            })
            .collect();
        let coeffs = self
            .family
            .coeffs
            .iter()
            .map(|row| row.iter().zip(&factors).map(|(z, f)| z * f).collect())
            .collect();
        Ok(MollifiedCoordinates {
            eps,
            second_moment,
            coords: ALCoordinates {
                family: SpectralFamily {
                    modes: self.family.modes.clone(),
                    spline: self.family.spline.smoothed(&kernel),
                    coeffs,
                },
                a_values: self.a_values.clone(),
                leaf_params: self.leaf_params.clone(),
                valid_lo: self.valid_lo.iter().map(|v| v + eps).collect(),
                valid_hi: self.valid_hi.iter().map(|v| v - eps).collect(),
            },
        })
    }

    /// Copy with `delta(q)` added to `𝒮`; used to check that corrupted
    /// coordinates are detected.
    pub fn with_added_term(&self, delta: &crate::torus::PeriodicField) -> Self {
        let mut out = self.clone();
        let spec = delta.spectrum();
        let grid = delta.grid();
        for m in 0..out.family.modes.len() {
            let freq = out.family.modes.freq(m);
            let idx: Vec<usize> = freq
                .iter()
                .enumerate()
                .map(|(d, &k)| k.rem_euclid(grid.shape()[d] as i32) as usize)
                .collect();
            let z = spec[grid.flat_index(&idx)];
            for row in &mut out.family.coeffs {
                row[m] += z;
            }
        }
        out
    }
}

fn newton_failure(context: &str, residual: f64) -> Error {
    Error::NewtonDivergence {
        context: context.into(),
        iterations: NEWTON_MAX_ITER,
        residual,
    }
}

/// Normalized discrete bump `exp(−1/(1 − (s/ε)²))` on `(−ε, ε)`, midpoint
/// nodes: `(offset, weight)` pairs summing to one.
pub fn mollifier_kernel(eps: f64, nodes: usize) -> Vec<(f64, f64)> {
    let raw: Vec<(f64, f64)> = (0..nodes)
        .map(|r| {
            let s = -eps + (r as f64 + 0.5) * 2.0 * eps / nodes as f64;
            let u = s / eps;
            (s, (-1.0 / (1.0 - u * u)).exp())
        })
        .collect();
    let total: f64 = raw.iter().map(|r| r.1).sum();
    raw.into_iter().map(|(s, w)| (s, w / total)).collect()
}

/// `φ_ε` generated by `𝒮_ε = 𝒮 * φ_ε(c) * φ_ε(q)`.
#[derive(Clone, Debug)]
pub struct MollifiedCoordinates {
    pub eps: f64,
    /// `∫ s² dκ(s)` of the one-dimensional kernel.
    pub second_moment: f64,
    pub coords: ALCoordinates,
}

pub fn mollified_coordinates(coords: &ALCoordinates, eps: f64) -> Result<MollifiedCoordinates> {
    coords.mollified(eps)
}

/// `max |Dφᵀ J Dφ − J|` (entrywise) over the given `(x, c)` samples.
pub fn symplecticity_defect(
    coords: &ALCoordinates,
    samples: &[(Vec<f64>, Vec<f64>)],
) -> Result<f64> {
    let n = coords.dim();
    let mut j = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        j[(i, n + i)] = 1.0;
        j[(n + i, i)] = -1.0;
    }
    let per = crate::par::try_map(samples, |(x, c)| {
        let (_, d) = coords.phi_with_jacobian(x, c)?;
        Ok((d.transpose() * &j * &d - &j).amax())
    })?;
    Ok(per.into_iter().fold(0.0, f64::max))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConjugationReport {
    pub max_defect: f64,
    /// `(t, max defect at t)`.
    pub per_time: Vec<(f64, f64)>,
}

/// `sup d(φ⁻¹(φ_t(φ(x, c))), (x + t∇A(c), c))` over samples and times.
pub fn coordinates_conjugation_defect(
    coords: &ALCoordinates,
    model: &HamiltonianModel,
    times: &[f64],
    samples: &[(Vec<f64>, Vec<f64>)],
    cfg: &IntegratorConfig,
) -> Result<ConjugationReport> {
    let per_sample = crate::par::try_map(samples, |(x, c)| {
        let start = coords.phi(x, c)?;
        let rho = coords.rho(c);
        times
            .iter()
            .map(|&t| {
                let end = flow_lifted(model, &start, t, cfg)?;
                let (x1, c1) = coords.phi_inv(&end.q, &end.p)?;
                let target: Vec<f64> = x.iter().zip(&rho).map(|(a, r)| a + t * r).collect();
                let dx = torus_distance(&x1, &target);
                Ok((dx * dx + dist(&c1, c).powi(2)).sqrt())
            })
            .collect::<Result<Vec<f64>>>()
    })?;
    let per_time: Vec<(f64, f64)> = times
        .iter()
        .enumerate()
        .map(|(k, &t)| (t, per_sample.iter().map(|v| v[k]).fold(0.0, f64::max)))
        .collect();
    Ok(ConjugationReport {
        max_defect: per_time.iter().map(|p| p.1).fold(0.0, f64::max),
        per_time,
    })
}

/// `‖ρ_i − ∇A(c_i)‖` per leaf.
pub fn rotation_gradient_discrepancy(af: &AFunction, rhos: &[Vec<f64>]) -> Result<Vec<f64>> {
    if rhos.len() != af.c.len() {
        return Err(Error::DimensionMismatch(
            "one rotation vector per leaf expected".into(),
        ));
    }
    Ok(rhos
        .iter()
        .zip(&af.gradient)
        .map(|(r, g)| dist(r, g))
        .collect())
}

/// `H_ε(q, p) = A_ε(π₂ φ_ε⁻¹(q, p))`.
#[derive(Clone, Debug)]
pub struct SmoothApproximant {
    pub mollified: MollifiedCoordinates,
}

impl SmoothApproximant {
    pub fn value(&self, q: &[f64], p: &[f64]) -> Result<f64> {
        let (_, c) = self.mollified.coords.phi_inv(q, p)?;
        Ok(self.mollified.coords.a_value(&c))
    }

    /// `(H_ε, ∇H_ε)` with the gradient ordered `(∂/∂q, ∂/∂p)`.
    pub fn gradient(&self, q: &[f64], p: &[f64]) -> Result<(f64, Vec<f64>)> {
        let coords = &self.mollified.coords;
        let n = coords.dim();
        let (x, c) = coords.phi_inv(q, p)?;
        let (_, jac) = coords.phi_with_jacobian(&x, &c)?;
        let inv = jac
            .try_inverse()
            .ok_or_else(|| newton_failure("Dφ_ε inverse", f64::INFINITY))?;
        let da = coords.rho(&c);
        let grad = (0..2 * n)
            .map(|v| (0..n).map(|d| da[d] * inv[(n + d, v)]).sum())
            .collect();
        Ok((coords.a_value(&c), grad))
    }
}

pub fn smooth_approximant(coords: &ALCoordinates, eps: f64) -> Result<SmoothApproximant> {
    Ok(SmoothApproximant {
        mollified: coords.mollified(eps)?,
    })
}

/// Compact set `{φ(x, c) : x ∈ Tⁿ, c ∈ [c_lo, c_hi]}` sampled on regular grids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Compact {
    pub c_lo: Vec<f64>,
    pub c_hi: Vec<f64>,
    pub c_count: usize,
    pub x_count: usize,
}

impl Compact {
    pub fn samples(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        let n = self.c_lo.len();
        let cs = cartesian(
            &(0..n)
                .map(|d| {
                    (0..self.c_count)
                        .map(|i| {
                            if self.c_count == 1 {
                                0.5 * (self.c_lo[d] + self.c_hi[d])
                            } else {
                                self.c_lo[d]
                                    + i as f64 * (self.c_hi[d] - self.c_lo[d])
                                        / (self.c_count - 1) as f64
                            }
                        })
                        .collect()
                })
                .collect::<Vec<_>>(),
        );
        let xs = cartesian(&vec![
            (0..self.x_count)
                .map(|i| i as f64 / self.x_count as f64)
                .collect();
            n
        ]);
        cs.iter()
            .flat_map(|c| xs.iter().map(move |x| (x.clone(), c.clone())))
            .collect()
    }

    /// `count` seeded uniform samples of `(x, c)`.
    pub fn random_samples(&self, count: usize, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.c_lo.len();
        (0..count)
            .map(|_| {
                let x = (0..n).map(|_| rng.gen::<f64>()).collect();
                let c = (0..n)
                    .map(|d| rng.gen_range(self.c_lo[d]..=self.c_hi[d]))
                    .collect();
                (x, c)
            })
            .collect()
    }
}

/// One row of the convergence ladder.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ApproximationLevel {
    pub eps: f64,
    /// `sup |H_ε − H|` on the compact.
    pub c0_error: f64,
    /// `sup ‖∇H_ε − ∇H‖` on the compact.
    pub c1_error: f64,
    /// `sup |H_ε − ½σ²ΔA − H|`: error left after the kernel's second-moment term.
    pub c0_error_moment_corrected: f64,
    pub sympl_defect: f64,
    /// `sup d(φ_ε, φ)` on the compact.
    pub phi_distance: f64,
}

/// Measure `H_ε` against `model` for every `ε` in the ladder.
pub fn approximation_ladder(
    coords: &ALCoordinates,
    model: &HamiltonianModel,
    eps: &[f64],
    compact: &Compact,
    sympl_samples: &[(Vec<f64>, Vec<f64>)],
) -> Result<Vec<ApproximationLevel>> {
    let n = coords.dim();
    let samples = compact.samples();
    let base: Vec<(PhasePoint, f64)> = crate::par::try_map(&samples, |(x, c)| {
        let pt = coords.phi(x, c)?;
        let lap = coords.a_hessian(c).trace();
        Ok((pt, lap))
    })?;
    eps.iter()
        .map(|&e| {
            let approx = smooth_approximant(coords, e)?;
            let sigma2 = approx.mollified.second_moment;
            let rows = crate::par::try_map(&(0..samples.len()).collect::<Vec<_>>(), |&i| {
                let (pt, lap) = &base[i];
                let (h_eps, g_eps) = approx.gradient(&pt.q, &pt.p)?;
                let (h, g) = model.gradient(&pt.q, &pt.p)?;
                let (x, c) = &samples[i];
                let moved = approx.mollified.coords.phi(x, c)?;
                let dq = torus_distance(&moved.q, &pt.q);
                let dp = dist(&moved.p, &pt.p);
                Ok((
                    (h_eps - h).abs(),
                    dist(&g_eps, &g),
                    (h_eps - 0.5 * sigma2 * lap - h).abs(),
                    (dq * dq + dp * dp).sqrt(),
                ))
            })?;
            let fold = |f: fn(&(f64, f64, f64, f64)) -> f64| rows.iter().map(f).fold(0.0, f64::max);
            let _ = n;
            Ok(ApproximationLevel {
                eps: e,
                c0_error: fold(|r| r.0),
                c1_error: fold(|r| r.1),
                c0_error_moment_corrected: fold(|r| r.2),
                phi_distance: fold(|r| r.3),
                sympl_defect: symplecticity_defect(&approx.mollified.coords, sympl_samples)?,
            })
        })
        .collect()
}
