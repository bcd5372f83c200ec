use std::f64::consts::PI;

use num_complex::Complex64;

use super::{inverse_spectral_transform, PeriodicField, PeriodicOneForm};
use crate::error::{Error, Result};

/// Default relative closedness tolerance.
pub const DEFAULT_CLOSEDNESS_TOL: f64 = 1e-8;

/// Closedness tolerance relative to the sup norm of the form being tested.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClosednessTolerance {
    pub relative: f64,
}

impl Default for ClosednessTolerance {
    fn default() -> Self {
        ClosednessTolerance {
            relative: DEFAULT_CLOSEDNESS_TOL,
        }
    }
}

impl ClosednessTolerance {
    pub fn relative(relative: f64) -> Self {
        ClosednessTolerance { relative }
    }

    /// Absolute threshold for `form`. A tiny floor keeps the all-zero form
    /// acceptable despite round-off in the transform.
    pub fn threshold(&self, form: &PeriodicOneForm) -> f64 {
        self.relative * form.sup_norm().max(f64::MIN_POSITIVE)
    }

    /// `Ok(defect)` when `form` is closed at this tolerance.
    pub fn check(&self, form: &PeriodicOneForm, leaf: Option<usize>) -> Result<f64> {
        let defect = closedness_defect(form);
        let tolerance = self.threshold(form);
        if defect <= tolerance {
            Ok(defect)
        } else {
            Err(Error::NotClosed {
                leaf,
                defect,
                tolerance,
            })
        }
    }
}

/// Largest Fourier-space curl amplitude
/// `4π · max_{k, j<l} |k_j η̂_l(k) − k_l η̂_j(k)|`.
///
/// The factor `4π` turns the complex coefficient at `±k` into the amplitude
/// of the real mode `cos`/`sin(2πk·q)`, so `(−sin 2πq₂, 0)` scores `2π`.
/// Modes that are Nyquist along some axis carry no derivative and are skipped.
pub fn closedness_defect(form: &PeriodicOneForm) -> f64 {
    let grid = form.grid();
    let n = form.dim();
    if n < 2 {
        return 0.0;
    }
    let spectra: Vec<&[Complex64]> = form.components().iter().map(|c| c.spectrum()).collect();
    let mut worst = 0.0f64;
    for flat in 0..grid.len() {
        let idx = grid.multi_index(flat);
        if idx.iter().enumerate().any(|(d, &m)| grid.is_nyquist(d, m)) {
            continue;
        }
        let k: Vec<f64> = (0..n).map(|d| grid.frequency(d, idx[d]) as f64).collect();
        for j in 0..n {
            for l in j + 1..n {
                let curl = spectra[l][flat] * k[j] - spectra[j][flat] * k[l];
                worst = worst.max(curl.norm());
            }
        }
    }
    4.0 * PI * worst
}

/// Cohomology class of a closed form: its mean, which for a closed form is
/// the vector of integrals over the basis cycles.
pub fn cohomology_class(form: &PeriodicOneForm, tol: ClosednessTolerance) -> Result<Vec<f64>> {
    tol.check(form, None)?;
    Ok(form.mean().to_vec())
}

/// Potential `u` with `du = η − mean(η)` and `u(0) = 0`.
pub fn potential_from_form(
    form: &PeriodicOneForm,
    tol: ClosednessTolerance,
) -> Result<PeriodicField> {
    tol.check(form, None)?;
    Ok(potential_unchecked(form))
}

/// Spectral antiderivative without the closedness check. For each mode the
/// component with the largest `|k_j|` is used.
pub(crate) fn potential_unchecked(form: &PeriodicOneForm) -> PeriodicField {
    let grid = form.grid();
    let n = form.dim();
    let spectra: Vec<&[Complex64]> = form.components().iter().map(|c| c.spectrum()).collect();
    let mut u_hat = vec![Complex64::new(0.0, 0.0); grid.len()];
    for (flat, slot) in u_hat.iter_mut().enumerate().skip(1) {
        let idx = grid.multi_index(flat);
        if idx.iter().enumerate().any(|(d, &m)| grid.is_nyquist(d, m)) {
            continue;
        }
        let (j, kj) = (0..n)
            .map(|d| (d, grid.frequency(d, idx[d])))
            .max_by_key(|&(_, k)| k.abs())
            .expect("non-empty");
        if kj == 0 {
            continue;
        }
        *slot = spectra[j][flat] / Complex64::new(0.0, 2.0 * PI * kj as f64);
    }
    let u = inverse_spectral_transform(grid, &u_hat);
    let origin = u.samples()[0];
    u.map(|v| v - origin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::torus::Grid;

    const EPS: f64 = 0.1;

    fn u0(q: &[f64]) -> f64 {
        EPS / (2.0 * PI) * (2.0 * PI * q[0]).cos()
    }

    fn grad_u0(q: &[f64]) -> Vec<f64> {
        vec![-EPS * (2.0 * PI * q[0]).sin(), 0.0]
    }

    #[test]
    fn constant_form_is_closed_with_zero_potential() {
        let g = Grid::cubic(2, 16).unwrap();
        let form = PeriodicOneForm::constant(&g, &[0.3, -0.4]);
        assert_eq!(closedness_defect(&form), 0.0);
        let c = cohomology_class(&form, Default::default()).unwrap();
        assert!((c[0] - 0.3).abs() < 1e-15 && (c[1] + 0.4).abs() < 1e-15);
        let u = potential_from_form(&form, Default::default()).unwrap();
        assert!(u.sup_norm() < 1e-15);
    }

    #[test]
    fn exact_gradient_is_closed_and_integrates_back() {
        let g = Grid::cubic(2, 32).unwrap();
        let form = PeriodicOneForm::from_fn(&g, grad_u0);
        assert!(closedness_defect(&form) <= 1e-12);
        let u = potential_from_form(&form, Default::default()).unwrap();
        let origin = u0(&[0.0, 0.0]);
        for (q, v) in g.nodes().zip(u.samples()) {
            assert!((v - (u0(&q) - origin)).abs() < 1e-12);
        }
        assert_eq!(u.samples()[0], 0.0);
    }

    #[test]
    fn sine_shear_has_defect_two_pi() {
        let g = Grid::cubic(2, 32).unwrap();
        let form = PeriodicOneForm::from_fn(&g, |q| vec![-(2.0 * PI * q[1]).sin(), 0.0]);
        assert!((closedness_defect(&form) - 2.0 * PI).abs() < 1e-10);
        let err = cohomology_class(&form, Default::default()).unwrap_err();
        assert!(matches!(err, Error::NotClosed { .. }));
        assert!(potential_from_form(&form, Default::default()).is_err());
    }

    #[test]
    fn shifted_gradient_has_class_a() {
        let g = Grid::cubic(2, 32).unwrap();
        let form = PeriodicOneForm::from_fn(&g, |q| {
            let d = grad_u0(q);
            vec![0.3 + d[0], 0.5 + d[1]]
        });
        let c = cohomology_class(&form, Default::default()).unwrap();
        assert!((c[0] - 0.3).abs() < 1e-14 && (c[1] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn potential_derivative_converges_like_centered_differences() {
        // spectral vs centered finite differences: error ~ h², ratio ≈ 4
        let f = |q: &[f64]| vec![(2.0 * PI * q[0]).cos() * 0.2, 0.1 * (2.0 * PI * q[1]).sin()];
        let mut errs = Vec::new();
        for n in [16usize, 32, 64] {
            let g = Grid::cubic(2, n).unwrap();
            let form = PeriodicOneForm::from_fn(&g, f);
            let u = potential_from_form(&form, Default::default()).unwrap();
            let spectral = u.derivative(0);
            let s = u.samples();
            let h = 1.0 / n as f64;
            let mut err = 0.0f64;
            for i in 0..g.len() {
                let idx = g.multi_index(i);
                let fwd = g.flat_index(&[(idx[0] + 1) % n, idx[1]]);
                let bwd = g.flat_index(&[(idx[0] + n - 1) % n, idx[1]]);
                let fd = (s[fwd] - s[bwd]) / (2.0 * h);
                err = err.max((fd - spectral.samples()[i]).abs());
            }
            errs.push(err);
        }
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
        }
    }
}
