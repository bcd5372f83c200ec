//! Tuples of Hamiltonians that only approximately Poisson-commute: bracket
//! and non-degeneracy reports, leaf extraction by implicit solving, and the
//! skew-defect identity `M (Dp − Dpᵀ) Mᵀ = −P` on an extracted leaf.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{bracket_from_gradients, HamiltonianModel};
use crate::torus::{closedness_defect, Grid, PeriodicField, PeriodicOneForm};

const LEAF_TOL: f64 = 1e-12;
const LEAF_MAX_ITER: usize = 50;
/// `σ_min < SINGULAR_RATIO · σ_max` makes `M` numerically singular.
const SINGULAR_RATIO: f64 = 1e-12;

/// `n` Hamiltonians `H_1..H_n` on `T*Tⁿ`, optionally tagged with their
/// position in a sequence.
#[derive(Clone, Debug)]
pub struct HamiltonianTuple {
    models: Vec<HamiltonianModel>,
    pub index: Option<usize>,
}

impl HamiltonianTuple {
    pub fn new(models: Vec<HamiltonianModel>, index: Option<usize>) -> Result<Self> {
        let n = models.len();
        if n == 0 || models.iter().any(|m| m.dim() != n) {
            return Err(Error::DimensionMismatch(format!(
                "a tuple of {n} Hamiltonians must live on T*T^{n}"
            )));
        }
        Ok(HamiltonianTuple { models, index })
    }

    pub fn from_expressions(exprs: &[impl AsRef<str>], index: Option<usize>) -> Result<Self> {
        let n = exprs.len();
        let models = exprs
            .iter()
            .map(|e| HamiltonianModel::from_expression(e.as_ref(), n))
            .collect::<Result<Vec<_>>>()?;
        HamiltonianTuple::new(models, index)
    }

    pub fn dim(&self) -> usize {
        self.models.len()
    }

    pub fn models(&self) -> &[HamiltonianModel] {
        &self.models
    }

    /// `𝖧(q, p)`.
    pub fn eval(&self, q: &[f64], p: &[f64]) -> Result<Vec<f64>> {
        self.models.iter().map(|m| m.value(q, p)).collect()
    }

    /// Values and full gradients `(∂/∂q, ∂/∂p)` of every member.
    pub fn gradients(&self, q: &[f64], p: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let mut values = Vec::with_capacity(self.dim());
        let mut grads = Vec::with_capacity(self.dim());
        for m in &self.models {
            let (v, g) = m.gradient(q, p)?;
            values.push(v);
            grads.push(g);
        }
        Ok((values, grads))
    }

    /// `M` with rows `∂H_j/∂p` and the bracket matrix `P`.
    fn m_and_p(&self, q: &[f64], p: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>, DMatrix<f64>)> {
        let n = self.dim();
        let (values, grads) = self.gradients(q, p)?;
        let m = DMatrix::from_fn(n, n, |j, k| grads[j][n + k]);
        let mut bracket = DMatrix::zeros(n, n);
        for j in 0..n {
            for k in j + 1..n {
                let b = bracket_from_gradients(&grads[j], &grads[k]);
                bracket[(j, k)] = b;
                bracket[(k, j)] = -b;
            }
        }
        Ok((values, m, bracket))
    }
}

/// Momentum box `[p_lo, p_hi]` with `q` ranging over the whole torus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub p_lo: Vec<f64>,
    pub p_hi: Vec<f64>,
}

impl Window {
    pub fn new(p_lo: Vec<f64>, p_hi: Vec<f64>) -> Result<Self> {
        if p_lo.is_empty()
            || p_lo.len() != p_hi.len()
            || p_lo.iter().zip(&p_hi).any(|(a, b)| !(a <= b))
        {
            return Err(Error::BadParameters(
                "window needs p_lo ≤ p_hi in every coordinate".into(),
            ));
        }
        Ok(Window { p_lo, p_hi })
    }

    pub fn dim(&self) -> usize {
        self.p_lo.len()
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.iter()
            .enumerate()
            .all(|(d, &v)| v >= self.p_lo[d] && v <= self.p_hi[d])
    }

    /// `count` equally spaced samples per axis, endpoints included.
    pub fn samples(&self, count: usize) -> Vec<Vec<f64>> {
        let n = self.dim();
        let total = count.pow(n as u32);
        (0..total)
            .map(|mut f| {
                let mut p = vec![0.0; n];
                for d in (0..n).rev() {
                    let i = f % count;
                    f /= count;
                    p[d] = if count == 1 {
                        0.5 * (self.p_lo[d] + self.p_hi[d])
                    } else {
                        self.p_lo[d] + i as f64 * (self.p_hi[d] - self.p_lo[d]) / (count - 1) as f64
                    };
                }
                p
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BracketReport {
    /// `sup |{H_j, H_k}|` over the sample grid.
    pub brackets: Vec<Vec<f64>>,
    /// Largest off-diagonal entry of `brackets`.
    pub bracket_sup: f64,
    /// `sup ‖P‖₂` over the sample grid.
    pub p_norm_sup: f64,
    /// `sup ‖M⁻¹‖₂ = sup 1/σ_min(M)`.
    pub m_inverse_sup: f64,
    /// `‖P‖ · ‖M⁻¹‖²`.
    pub weaker_criterion: f64,
    pub q_resolution: usize,
    pub p_resolution: usize,
    pub window: Window,
}

/// Brackets and `M⁻¹` over `q`-grid × `p`-samples.
pub fn bracket_report(
    tuple: &HamiltonianTuple,
    window: &Window,
    q_resolution: usize,
    p_resolution: usize,
) -> Result<BracketReport> {
    let n = tuple.dim();
    if window.dim() != n {
        return Err(Error::DimensionMismatch(
            "window and tuple dimensions differ".into(),
        ));
    }
    if p_resolution == 0 {
        return Err(Error::BadParameters("p resolution must be positive".into()));
    }
    let q_grid = Grid::cubic(n, q_resolution)?;
    let qs: Vec<Vec<f64>> = q_grid.nodes().collect();
    let ps = window.samples(p_resolution);
    let per_q = crate::par::try_map(&qs, |q| {
        let mut br = DMatrix::<f64>::zeros(n, n);
        let mut p_norm = 0.0f64;
        let mut m_inv = 0.0f64;
        for p in &ps {
            let (_, m, bracket) = tuple.m_and_p(q, p)?;
            let sv = m.singular_values();
            let (lo, hi) = (sv.min(), sv.max());
            if !(lo > SINGULAR_RATIO * hi) {
                return Err(Error::SingularM {
                    q: q.clone(),
                    p: p.clone(),
                });
            }
            m_inv = m_inv.max(1.0 / lo);
            p_norm = p_norm.max(bracket.singular_values().max());
            br.zip_apply(&bracket, |a, b| *a = a.max(b.abs()));
        }
        Ok((br, p_norm, m_inv))
    })?;
    let mut br = DMatrix::<f64>::zeros(n, n);
    let (mut p_norm, mut m_inv) = (0.0f64, 0.0f64);
    for (b, pn, mi) in per_q {
        br.zip_apply(&b, |a, x| *a = a.max(x));
        p_norm = p_norm.max(pn);
        m_inv = m_inv.max(mi);
    }
    let brackets: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|k| br[(j, k)]).collect())
        .collect();
    Ok(BracketReport {
        bracket_sup: br.amax(),
        brackets,
        p_norm_sup: p_norm,
        m_inverse_sup: m_inv,
        weaker_criterion: p_norm * m_inv * m_inv,
        q_resolution,
        p_resolution,
        window: window.clone(),
    })
}

/// Solve `𝖧(q, p) = a` for `p` by Newton's method from `seed`.
pub fn leaf_solve(
    tuple: &HamiltonianTuple,
    a: &[f64],
    q: &[f64],
    seed: &[f64],
    window: &Window,
) -> Result<Vec<f64>> {
    let n = tuple.dim();
    if a.len() != n || q.len() != n || seed.len() != n || window.dim() != n {
        return Err(Error::DimensionMismatch(
            "leaf_solve arguments must share the tuple dimension".into(),
        ));
    }
    if !window.contains(seed) {
        return Err(Error::OutOfWindow { p: seed.to_vec() });
    }
    let mut p = seed.to_vec();
    let mut residual = f64::INFINITY;
    for _ in 0..LEAF_MAX_ITER {
        let (values, m, _) = tuple.m_and_p(q, &p)?;
        let r = DVector::from_fn(n, |j, _| values[j] - a[j]);
        residual = r.amax();
        if residual <= LEAF_TOL {
            return Ok(p);
        }
        let step = m.lu().solve(&r).ok_or_else(|| Error::SingularM {
            q: q.to_vec(),
            p: p.clone(),
        })?;
        for k in 0..n {
            p[k] -= step[k];
        }
        if p.iter().any(|v| !v.is_finite()) {
            break;
        }
        if !window.contains(&p) {
            return Err(Error::OutOfWindow { p });
        }
    }
    Err(Error::NewtonDivergence {
        context: "leaf_solve".into(),
        iterations: LEAF_MAX_ITER,
        residual,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SkewReport {
    /// `sup ‖M (Dp − Dpᵀ) Mᵀ + P‖` (entrywise max) over the grid.
    pub residual: f64,
    /// `sup ‖P‖₂` on the leaf.
    pub p_norm: f64,
    /// Closedness defect of the extracted leaf one-form.
    pub closedness_defect: f64,
    #[serde(skip)]
    pub leaf: PeriodicOneForm,
}

/// Extract the leaf `𝖧(q, p(q)) = a` on a `resolutionⁿ` grid by continuation
/// from `seed` and compare both sides of the skew-defect identity.
pub fn skew_defect_identity(
    tuple: &HamiltonianTuple,
    a: &[f64],
    resolution: usize,
    seed: &[f64],
    window: &Window,
) -> Result<SkewReport> {
    let n = tuple.dim();
    let grid = Grid::cubic(n, resolution)?;
    let mut leaf: Vec<Vec<f64>> = Vec::with_capacity(grid.len());
    for node in 0..grid.len() {
        let idx = grid.multi_index(node);
        let start = match (0..n).rev().find(|&d| idx[d] > 0) {
            None => seed.to_vec(),
            Some(d) => {
                let mut prev = idx.clone();
                prev[d] -= 1;
                leaf[grid.flat_index(&prev)].clone()
            }
        };
        leaf.push(leaf_solve(tuple, a, &grid.node(node), &start, window)?);
    }
    let form = PeriodicOneForm::new(
        (0..n)
            .map(|l| PeriodicField::new(grid.clone(), leaf.iter().map(|p| p[l]).collect()))
            .collect::<Result<Vec<_>>>()?,
    )?;
    // dp[l][m] = ∂p_l/∂q_m
    let dp: Vec<Vec<PeriodicField>> = form
        .components()
        .iter()
        .map(|f| (0..n).map(|m| f.derivative(m)).collect())
        .collect();
    let mut residual = 0.0f64;
    let mut p_norm = 0.0f64;
    for node in 0..grid.len() {
        let q = grid.node(node);
        let (_, m, bracket) = tuple.m_and_p(&q, &leaf[node])?;
        let skew = DMatrix::from_fn(n, n, |l, k| {
            dp[l][k].samples()[node] - dp[k][l].samples()[node]
        });
        let lhs = &m * skew * m.transpose();
        residual = residual.max((lhs + &bracket).amax());
        p_norm = p_norm.max(bracket.singular_values().max());
    }
    Ok(SkewReport {
        residual,
        p_norm,
        closedness_defect: closedness_defect(&form),
        leaf: form,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InjectivityWitness {
    pub q: Vec<f64>,
    pub p_first: Vec<f64>,
    pub p_second: Vec<f64>,
    pub image_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageWitness {
    pub q_first: Vec<f64>,
    pub q_second: Vec<f64>,
    pub hausdorff: f64,
    pub tolerance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Nondegeneracy2Report {
    pub pass: bool,
    pub injectivity: Option<InjectivityWitness>,
    pub image: Option<ImageWitness>,
}

/// Sampled test that `p ↦ 𝖧(q, p)` is injective on the window grid for each
/// `q`, and that its image does not move with `q` (Hausdorff distance to the
/// image at the first `q` within twice the sampling mesh).
pub fn nondegeneracy2_check(
    tuple: &HamiltonianTuple,
    q_samples: &[Vec<f64>],
    window: &Window,
    p_resolution: usize,
    injectivity_tol: f64,
) -> Result<Nondegeneracy2Report> {
    if q_samples.is_empty() {
        return Err(Error::BadParameters("need at least one q sample".into()));
    }
    let ps = window.samples(p_resolution);
    let images = crate::par::try_map(q_samples, |q| {
        ps.iter()
            .map(|p| tuple.eval(q, p))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut report = Nondegeneracy2Report {
        pass: true,
        injectivity: None,
        image: None,
    };
    'outer: for (q, img) in q_samples.iter().zip(&images) {
        for i in 0..img.len() {
            for j in i + 1..img.len() {
                let gap = crate::foliation::dist(&img[i], &img[j]);
                if gap <= injectivity_tol {
                    report.injectivity = Some(InjectivityWitness {
                        q: q.clone(),
                        p_first: ps[i].clone(),
                        p_second: ps[j].clone(),
                        image_gap: gap,
                    });
                    report.pass = false;
                    break 'outer;
                }
            }
        }
    }
    let mesh = images.iter().map(|img| mesh_size(img)).fold(0.0, f64::max);
    let tolerance = 2.0 * mesh;
    for (k, img) in images.iter().enumerate().skip(1) {
        let h = hausdorff(&images[0], img);
        if h > tolerance {
            report.image = Some(ImageWitness {
                q_first: q_samples[0].clone(),
                q_second: q_samples[k].clone(),
                hausdorff: h,
                tolerance,
            });
            report.pass = false;
            break;
        }
    }
    Ok(report)
}

fn nearest(set: &[Vec<f64>], x: &[f64], skip: Option<usize>) -> f64 {
    set.iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != skip)
        .map(|(_, y)| crate::foliation::dist(x, y))
        .fold(f64::INFINITY, f64::min)
}

fn mesh_size(set: &[Vec<f64>]) -> f64 {
    if set.len() < 2 {
        return 0.0;
    }
    (0..set.len())
        .map(|i| nearest(set, &set[i], Some(i)))
        .fold(0.0, f64::max)
}

fn hausdorff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let ab = a.iter().map(|x| nearest(b, x, None)).fold(0.0, f64::max);
    let ba = b.iter().map(|y| nearest(a, y, None)).fold(0.0, f64::max);
    ab.max(ba)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn commuting() -> HamiltonianTuple {
        HamiltonianTuple::from_expressions(&["0.5*(p1^2+p2^2)", "p2"], None).unwrap()
    }

    fn fix_c() -> HamiltonianTuple {
        HamiltonianTuple::from_expressions(&["p1+sin(2*pi*q2)", "p2"], None).unwrap()
    }

    fn unit_window() -> Window {
        Window::new(vec![0.1, 0.1], vec![1.0, 1.0]).unwrap()
    }

    #[test]
    fn commuting_tuple_report() {
        let r = bracket_report(&commuting(), &unit_window(), 8, 10).unwrap();
        assert!(r.bracket_sup <= 1e-12);
        assert!(r.brackets[0][0] == 0.0 && r.brackets[1][1] == 0.0);
        // M = [[p1, p2], [0, 1]]; ‖M⁻¹‖ is largest at p = (0.1, 1)
        // σ_min² = (T − √(T² − 4 det²))/2 with T = ‖M‖_F²
        let (a, b) = (0.1f64, 1.0f64);
        let t = a * a + b * b + 1.0;
        let oracle = 1.0 / ((t - (t * t - 4.0 * a * a).sqrt()) / 2.0).sqrt();
        assert!(
            (r.m_inverse_sup - oracle).abs() < 1e-9,
            "{} vs {oracle}",
            r.m_inverse_sup
        );
    }

    #[test]
    fn fix_c_report() {
        let w = Window::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let r = bracket_report(&fix_c(), &w, 16, 3).unwrap();
        assert!((r.bracket_sup - 2.0 * PI).abs() < 1e-6);
        assert!((r.brackets[0][1] - r.brackets[1][0]).abs() == 0.0);
        assert!((r.m_inverse_sup - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dependent_rows_are_singular() {
        let t = HamiltonianTuple::from_expressions(&["p1", "2*p1"], None).unwrap();
        assert!(matches!(
            bracket_report(&t, &unit_window(), 4, 3),
            Err(Error::SingularM { .. })
        ));
    }

    #[test]
    fn leaf_solve_examples() {
        let p = leaf_solve(
            &commuting(),
            &[0.29, 0.7],
            &[0.0, 0.0],
            &[0.5, 0.5],
            &unit_window(),
        )
        .unwrap();
        assert!((p[0] - 0.3).abs() < 1e-12 && (p[1] - 0.7).abs() < 1e-12);
        let w = Window::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let p = leaf_solve(&fix_c(), &[1.1, 0.0], &[0.0, 0.25], &[0.0, 0.0], &w).unwrap();
        assert!((p[0] - 0.1).abs() < 1e-12 && p[1].abs() < 1e-12);
        assert!(matches!(
            leaf_solve(
                &commuting(),
                &[5.0, 0.7],
                &[0.0, 0.0],
                &[0.5, 0.5],
                &unit_window()
            ),
            Err(Error::OutOfWindow { .. } | Error::NewtonDivergence { .. })
        ));
    }

    #[test]
    fn skew_identity_on_commuting_and_fix_c() {
        let r = skew_defect_identity(&commuting(), &[0.29, 0.7], 16, &[0.5, 0.5], &unit_window())
            .unwrap();
        assert!(r.residual <= 1e-10 && r.closedness_defect <= 1e-10);
        let w = Window::new(vec![-1.0, -1.0], vec![2.5, 1.0]).unwrap();
        let r = skew_defect_identity(&fix_c(), &[1.1, 0.0], 32, &[1.1, 0.0], &w).unwrap();
        assert!(r.residual <= 1e-6, "{}", r.residual);
        assert!((r.p_norm - 2.0 * PI).abs() < 1e-9);
        // sup |∂p₁/∂q₂ − ∂p₂/∂q₁| = 2π
        assert!(
            (r.closedness_defect - 2.0 * PI).abs() < 1e-6,
            "{}",
            r.closedness_defect
        );
    }

    #[test]
    fn closedness_tracks_bracket_along_sequence() {
        let w = Window::new(vec![-2.0, -2.0], vec![2.0, 2.0]).unwrap();
        let ratios: Vec<f64> = (1..=5)
            .map(|i| {
                let t = HamiltonianTuple::from_expressions(
                    &["p1".to_string(), format!("p2+sin(2*pi*q1)/{i}")],
                    Some(i),
                )
                .unwrap();
                let r = skew_defect_identity(&t, &[0.3, 0.2], 16, &[0.3, 0.2], &w).unwrap();
                r.closedness_defect / r.p_norm
            })
            .collect();
        let first = ratios[0];
        assert!(
            ratios.iter().all(|r| (r / first - 1.0).abs() < 0.2),
            "{ratios:?}"
        );
    }

    #[test]
    fn second_nondegeneracy() {
        let qs: Vec<Vec<f64>> = Grid::cubic(2, 4).unwrap().nodes().collect();
        let r = nondegeneracy2_check(&commuting(), &qs, &unit_window(), 9, 1e-9).unwrap();
        assert!(r.pass);
        let sym = Window::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let r = nondegeneracy2_check(&commuting(), &qs, &sym, 9, 1e-9).unwrap();
        let w = r.injectivity.unwrap();
        assert!(!r.pass && w.p_first[0] == -w.p_second[0] && w.p_first[1] == w.p_second[1]);
        let r = nondegeneracy2_check(&fix_c(), &qs, &sym, 9, 1e-9).unwrap();
        assert!(!r.pass && r.injectivity.is_none() && r.image.is_some());
    }
}
