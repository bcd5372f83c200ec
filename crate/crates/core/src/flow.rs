//! Fixed-step symplectic integration of `X_H`, flows restricted to leaves,
//! invariance checks and Lipschitz rates of leaf flows.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::HamiltonianModel;
use crate::torus::{
    wrap, CoverPoint, Grid, PeriodicOneForm, PhasePoint, TorusPoint, TrigInterpolant,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ImplicitMidpoint,
    Splitting,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegratorConfig {
    pub method: Method,
    pub step: f64,
    pub newton_tol: f64,
    pub max_newton_iter: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            method: Method::ImplicitMidpoint,
            step: 1e-2,
            newton_tol: 1e-14,
            max_newton_iter: 50,
        }
    }
}

impl IntegratorConfig {
    pub fn midpoint(step: f64) -> Self {
        IntegratorConfig {
            step,
            ..Default::default()
        }
    }

    pub fn splitting(step: f64) -> Self {
        IntegratorConfig {
            method: Method::Splitting,
            step,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::BadParameters(format!(
                "step must be positive, got {}",
                self.step
            )));
        }
        if !(self.newton_tol > 0.0) || self.max_newton_iter == 0 {
            return Err(Error::BadParameters(
                "Newton tolerance and iteration cap must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Number of equal substeps covering `t` and their signed length.
    pub fn subdivide(&self, t: f64) -> (usize, f64) {
        if t == 0.0 {
            return (0, 0.0);
        }
        let ratio = t.abs() / self.step;
        // tolerate t/step landing a hair above an integer
        let k = ((ratio - 1e-9).ceil() as usize).max(1);
        (k, t / k as f64)
    }
}

type Field<'a> = dyn Fn(&[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> + 'a;

/// One implicit-midpoint step `x₁ = x₀ + h f((x₀ + x₁)/2)`, solved for the
/// midpoint by Newton. Returns `x₁` and `Df` at the converged midpoint.
fn midpoint_step(
    f: &Field<'_>,
    x: &[f64],
    h: f64,
    cfg: &IntegratorConfig,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let d = x.len();
    let (fx, _) = f(x)?;
    let mut m = DVector::from_iterator(d, x.iter().zip(&fx).map(|(a, b)| a + 0.5 * h * b));
    let x0 = DVector::from_column_slice(x);
    let mut last = f64::INFINITY;
    for _ in 0..cfg.max_newton_iter {
        let (fm, jac) = f(m.as_slice())?;
        let g = &m - &x0 - DVector::from_vec(fm) * (0.5 * h);
        let a = DMatrix::identity(d, d) - &jac * (0.5 * h);
        let delta = a.lu().solve(&(-g)).ok_or_else(|| Error::NewtonDivergence {
            context: "implicit midpoint (singular Jacobian)".into(),
            iterations: 0,
            residual: f64::INFINITY,
        })?;
        m += &delta;
        last = delta.amax();
        if !last.is_finite() {
            break;
        }
        if last <= cfg.newton_tol * (1.0 + m.amax()) {
            let x1: Vec<f64> = m.iter().zip(x).map(|(mi, xi)| 2.0 * mi - xi).collect();
            return Ok((x1, jac));
        }
    }
    Err(Error::NewtonDivergence {
        context: format!("implicit midpoint step h={h}"),
        iterations: cfg.max_newton_iter,
        residual: last,
    })
}

/// `X_H` and its Jacobian on the concatenated state `(q, p)`.
fn hamiltonian_field(
    model: &HamiltonianModel,
) -> impl Fn(&[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> + '_ {
    move |x: &[f64]| {
        let n = model.dim();
        let (_, g, h) = model.hessian(&x[..n], &x[n..])?;
        let m = 2 * n;
        let mut f = vec![0.0; m];
        let mut jac = DMatrix::zeros(m, m);
        for i in 0..n {
            f[i] = g[n + i];
            f[n + i] = -g[i];
            for j in 0..m {
                jac[(i, j)] = h[(n + i) * m + j];
                jac[(n + i, j)] = -h[i * m + j];
            }
        }
        Ok((f, jac))
    }
}

fn strang_step(model: &HamiltonianModel, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let n = model.dim();
    let mut q = x[..n].to_vec();
    let mut p = x[n..].to_vec();
    let (_, g) = model.gradient(&q, &p)?;
    for i in 0..n {
        p[i] -= 0.5 * h * g[i];
    }
    let (_, g) = model.gradient(&q, &p)?;
    for i in 0..n {
        q[i] += h * g[n + i];
    }
    let (_, g) = model.gradient(&q, &p)?;
    for i in 0..n {
        p[i] -= 0.5 * h * g[i];
    }
    q.extend(p);
    Ok(q)
}

/// Integrate `X_H` from `x0` for time `t`, calling `visit(time, state)` after
/// every step. `q` stays in the cover.
pub fn integrate(
    model: &HamiltonianModel,
    x0: &PhasePoint,
    t: f64,
    cfg: &IntegratorConfig,
    mut visit: impl FnMut(f64, &[f64]),
) -> Result<PhasePoint> {
    cfg.validate()?;
    if x0.dim() != model.dim() {
        return Err(Error::DimensionMismatch(format!(
            "point of dimension {} for a model of dimension {}",
            x0.dim(),
            model.dim()
        )));
    }
    let (steps, h) = cfg.subdivide(t);
    let mut x = x0.to_state();
    let field = hamiltonian_field(model);
    if cfg.method == Method::Splitting && !model.is_separable() {
        return Err(Error::NotSeparable(model.name().to_string()));
    }
    for k in 0..steps {
        x = match cfg.method {
            Method::ImplicitMidpoint => midpoint_step(&field, &x, h, cfg)?.0,
            Method::Splitting => strang_step(model, &x, h)?,
        };
        visit((k + 1) as f64 * h, &x);
    }
    Ok(PhasePoint::from_state(&x))
}

/// `φ_t(x0)` with `q` wrapped to `[0, 1)ⁿ`.
pub fn flow_map(
    model: &HamiltonianModel,
    x0: &PhasePoint,
    t: f64,
    cfg: &IntegratorConfig,
) -> Result<PhasePoint> {
    Ok(flow_lifted(model, x0, t, cfg)?.wrapped())
}

/// `φ_t(x0)` on the cover `ℝⁿ × ℝⁿ`.
pub fn flow_lifted(
    model: &HamiltonianModel,
    x0: &PhasePoint,
    t: f64,
    cfg: &IntegratorConfig,
) -> Result<PhasePoint> {
    integrate(model, x0, t, cfg, |_, _| {})
}

/// Every step of the trajectory as `(t, q, p)`, starting with `(0, x0)`.
pub fn trajectory(
    model: &HamiltonianModel,
    x0: &PhasePoint,
    t: f64,
    cfg: &IntegratorConfig,
) -> Result<Vec<(f64, PhasePoint)>> {
    let mut out = vec![(0.0, x0.clone())];
    integrate(model, x0, t, cfg, |s, x| {
        out.push((s, PhasePoint::from_state(x)))
    })?;
    Ok(out)
}

/// Jacobian of `x0 ↦ φ_t(x0)` propagated with the discrete variational
/// equation of the implicit midpoint rule.
pub fn flow_with_jacobian(
    model: &HamiltonianModel,
    x0: &PhasePoint,
    t: f64,
    cfg: &IntegratorConfig,
) -> Result<(PhasePoint, DMatrix<f64>)> {
    cfg.validate()?;
    let m = 2 * model.dim();
    let (steps, h) = cfg.subdivide(t);
    let field = hamiltonian_field(model);
    let mut x = x0.to_state();
    let mut phi = DMatrix::identity(m, m);
    for _ in 0..steps {
        let (x1, jac) = midpoint_step(&field, &x, h, cfg)?;
        phi = propagate(&jac, h, &phi)?;
        x = x1;
    }
    Ok((PhasePoint::from_state(&x), phi))
}

/// `Φ ← (I − h/2 J)⁻¹ (I + h/2 J) Φ`.
fn propagate(jac: &DMatrix<f64>, h: f64, phi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = jac.nrows();
    let half = jac * (0.5 * h);
    let lhs = DMatrix::identity(d, d) - &half;
    let rhs = (DMatrix::identity(d, d) + &half) * phi;
    lhs.lu().solve(&rhs).ok_or_else(|| Error::NewtonDivergence {
        context: "variational step (singular matrix)".into(),
        iterations: 0,
        residual: f64::INFINITY,
    })
}

/// Maximum over `points × times` of `‖π₂ φ_t(q, η(q)) − η(π₁ φ_t(q, η(q)))‖`.
pub fn leaf_invariance_defect(
    model: &HamiltonianModel,
    leaf: &PeriodicOneForm,
    times: &[f64],
    points: &[Vec<f64>],
    cfg: &IntegratorConfig,
) -> Result<f64> {
    let eta = leaf.interpolant();
    let mut sorted: Vec<f64> = times.to_vec();
    sorted.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    let mut worst = 0.0f64;
    for q in points {
        let x0 = PhasePoint::new(q.clone(), eta.eval(q));
        for &t in &sorted {
            let x = flow_lifted(model, &x0, t, cfg)?;
            let e = eta.eval(&x.q);
            let d =
                x.p.iter()
                    .zip(&e)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
            worst = worst.max(d);
        }
    }
    Ok(worst)
}

/// The flow restricted to the graph of one leaf: `q̇ = ∂H/∂p(q, η(q))`.
#[derive(Clone, Debug)]
pub struct LeafFlow {
    model: HamiltonianModel,
    leaf: PeriodicOneForm,
    eta: TrigInterpolant,
    config: IntegratorConfig,
}

impl LeafFlow {
    pub fn new(
        model: HamiltonianModel,
        leaf: PeriodicOneForm,
        config: IntegratorConfig,
    ) -> Result<Self> {
        config.validate()?;
        if leaf.dim() != model.dim() {
            return Err(Error::DimensionMismatch(format!(
                "leaf of dimension {} for a model of dimension {}",
                leaf.dim(),
                model.dim()
            )));
        }
        let eta = leaf.interpolant();
        Ok(LeafFlow {
            model,
            leaf,
            eta,
            config,
        })
    }

    /// Like [`LeafFlow::new`], but rejects the leaf unless its invariance
    /// defect at `t = 1` over a `4ⁿ` sample grid is at most `tolerance`.
    pub fn checked(
        model: HamiltonianModel,
        leaf: PeriodicOneForm,
        config: IntegratorConfig,
        tolerance: f64,
    ) -> Result<Self> {
        let flow = LeafFlow::new(model, leaf, config)?;
        let points: Vec<Vec<f64>> = Grid::cubic(flow.dim(), 4)?.nodes().collect();
        let defect =
            leaf_invariance_defect(&flow.model, &flow.leaf, &[1.0], &points, &flow.config)?;
        if defect > tolerance {
            return Err(Error::Precondition(format!(
                "leaf invariance defect {defect:e} exceeds declared tolerance {tolerance:e}"
            )));
        }
        Ok(flow)
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn model(&self) -> &HamiltonianModel {
        &self.model
    }

    pub fn leaf(&self) -> &PeriodicOneForm {
        &self.leaf
    }

    pub fn eta(&self) -> &TrigInterpolant {
        &self.eta
    }

    pub fn config(&self) -> &IntegratorConfig {
        &self.config
    }

    /// Leaf vector field and its Jacobian `H_pq + H_pp Dη`.
    fn field(&self, q: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let n = self.dim();
        let m = 2 * n;
        let (p, deta) = self.eta.eval_with_gradient(q);
        let (_, g, h) = self.model.hessian(q, &p)?;
        let f = g[n..].to_vec();
        let mut jac = DMatrix::zeros(n, n);
        for i in 0..n {
            for d in 0..n {
                let mut v = h[(n + i) * m + d];
                for j in 0..n {
                    v += h[(n + i) * m + n + j] * deta[j * n + d];
                }
                jac[(i, d)] = v;
            }
        }
        Ok((f, jac))
    }

    /// Lifted flow `F_t(q)`, visiting each step.
    pub fn integrate(
        &self,
        q: &[f64],
        t: f64,
        mut visit: impl FnMut(f64, &[f64]),
    ) -> Result<Vec<f64>> {
        let (steps, h) = self.config.subdivide(t);
        let field = |x: &[f64]| self.field(x);
        let mut x = q.to_vec();
        for k in 0..steps {
            x = midpoint_step(&field, &x, h, &self.config)?.0;
            visit((k + 1) as f64 * h, &x);
        }
        Ok(x)
    }

    /// `F_t(q)` on the cover.
    pub fn lifted(&self, q: &CoverPoint, t: f64) -> Result<CoverPoint> {
        Ok(CoverPoint::new(self.integrate(q.coords(), t, |_, _| {})?))
    }

    /// `f_t(q)` on the torus.
    pub fn step(&self, q: &TorusPoint, t: f64) -> Result<TorusPoint> {
        Ok(TorusPoint::new(self.integrate(q.coords(), t, |_, _| {})?))
    }

    /// `F_t(q)` together with `DF_t(q)` from the discrete variational equation;
    /// `visit(t, Φ)` sees every intermediate Jacobian.
    pub fn integrate_with_jacobian(
        &self,
        q: &[f64],
        t: f64,
        mut visit: impl FnMut(f64, &DMatrix<f64>),
    ) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let n = self.dim();
        let (steps, h) = self.config.subdivide(t);
        let field = |x: &[f64]| self.field(x);
        let mut x = q.to_vec();
        let mut phi = DMatrix::identity(n, n);
        for k in 0..steps {
            let (x1, jac) = midpoint_step(&field, &x, h, &self.config)?;
            phi = propagate(&jac, h, &phi)?;
            x = x1;
            visit((k + 1) as f64 * h, &phi);
        }
        Ok((x, phi))
    }

    /// Sample `q ↦ F_t(q) − q` on `grid` as an evaluable torus map.
    pub fn sampled_map(&self, t: f64, grid: &Grid) -> Result<SampledTorusMap> {
        let nodes: Vec<Vec<f64>> = grid.nodes().collect();
        let images: Vec<Vec<f64>> =
            crate::par::try_map(&nodes, |q| self.integrate(q, t, |_, _| {}))?;
        let n = self.dim();
        let comps: Vec<crate::torus::PeriodicField> = (0..n)
            .map(|d| {
                let samples = nodes
                    .iter()
                    .zip(&images)
                    .map(|(q, x)| x[d] - q[d])
                    .collect();
                crate::torus::PeriodicField::new(grid.clone(), samples).expect("grid size")
            })
            .collect();
        let spectra: Vec<&[num_complex::Complex64]> = comps.iter().map(|c| c.spectrum()).collect();
        Ok(SampledTorusMap {
            displacement: TrigInterpolant::from_spectra_pruned(grid, &spectra, SAMPLED_MAP_PRUNE),
        })
    }
}

/// Spectral coefficients of a sampled map below this fraction of the
/// largest are treated as integration noise.
const SAMPLED_MAP_PRUNE: f64 = 1e-13;

/// A self-map of `Tⁿ` homotopic to the identity, `q ↦ q + d(q)` with `d`
/// periodic. Applying it to a cover point gives the lift.
pub trait TorusMap {
    fn dim(&self) -> usize;
    fn apply(&self, q: &[f64]) -> Vec<f64>;
}

/// A torus map given by a trigonometric interpolant of its displacement.
#[derive(Clone, Debug)]
pub struct SampledTorusMap {
    displacement: TrigInterpolant,
}

impl SampledTorusMap {
    pub fn from_displacement(displacement: TrigInterpolant) -> Self {
        SampledTorusMap { displacement }
    }

    pub fn displacement(&self) -> &TrigInterpolant {
        &self.displacement
    }
}

impl TorusMap for SampledTorusMap {
    fn dim(&self) -> usize {
        self.displacement.dim()
    }

    fn apply(&self, q: &[f64]) -> Vec<f64> {
        let d = self.displacement.eval(q);
        q.iter().zip(d).map(|(a, b)| a + b).collect()
    }
}

/// Result of [`leaf_lipschitz_constant`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LipschitzRate {
    pub k: f64,
    pub sup_norm: f64,
    pub sup_inverse_norm: f64,
}

/// Estimate `K = max(sup ‖Df_t‖, sup ‖Df_t⁻¹‖)` over `t ∈ [−T, T]` (every
/// integration step) and the nodes of `grid`.
pub fn leaf_lipschitz_constant(
    leaf: &LeafFlow,
    horizon: f64,
    grid: &Grid,
) -> Result<LipschitzRate> {
    if horizon < 0.0 {
        return Err(Error::Precondition("horizon must be nonnegative".into()));
    }
    if horizon == 0.0 {
        return Ok(LipschitzRate {
            k: 1.0,
            sup_norm: 1.0,
            sup_inverse_norm: 1.0,
        });
    }
    let nodes: Vec<Vec<f64>> = grid.nodes().collect();
    let per_node = crate::par::try_map(&nodes, |q| {
        let mut hi = 1.0f64;
        let mut inv = 1.0f64;
        for t in [horizon, -horizon] {
            leaf.integrate_with_jacobian(q, t, |_, phi| {
                let sv = phi.singular_values();
                hi = hi.max(sv.max());
                inv = inv.max(1.0 / sv.min());
            })?;
        }
        Ok((hi, inv))
    })?;
    let (hi, inv) = per_node
        .into_iter()
        .fold((1.0f64, 1.0f64), |(a, b), (x, y)| (a.max(x), b.max(y)));
    Ok(LipschitzRate {
        k: hi.max(inv),
        sup_norm: hi,
        sup_inverse_norm: inv,
    })
}

/// Wrap every coordinate of a lifted point.
pub fn project(q: &[f64]) -> Vec<f64> {
    q.iter().copied().map(wrap).collect()
}
