use std::f64::consts::PI;
use std::sync::OnceLock;

use num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

use super::{Grid, TrigInterpolant};
use crate::error::{Error, Result};

/// Real samples of a `ℤⁿ`-periodic function on a regular grid, with lazily
/// computed, normalised Fourier coefficients
/// `f̂(k) = N⁻¹ Σ_j f(q_j) e^{-2πi k·q_j}`.
#[derive(Debug)]
pub struct PeriodicField {
    grid: Grid,
    samples: Vec<f64>,
    spectrum: OnceLock<Vec<Complex64>>,
}

impl Clone for PeriodicField {
    fn clone(&self) -> Self {
        let spectrum = OnceLock::new();
        if let Some(s) = self.spectrum.get() {
            let _ = spectrum.set(s.clone());
        }
        PeriodicField {
            grid: self.grid.clone(),
            samples: self.samples.clone(),
            spectrum,
        }
    }
}

impl PartialEq for PeriodicField {
    fn eq(&self, other: &Self) -> bool {
        self.grid == other.grid && self.samples == other.samples
    }
}

impl PeriodicField {
    pub fn new(grid: Grid, samples: Vec<f64>) -> Result<Self> {
        if samples.len() != grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} samples for a grid of {} nodes",
                samples.len(),
                grid.len()
            )));
        }
        Ok(PeriodicField {
            grid,
            samples,
            spectrum: OnceLock::new(),
        })
    }

    pub fn from_fn(grid: &Grid, f: impl Fn(&[f64]) -> f64) -> Self {
        let samples = grid.nodes().map(|q| f(&q)).collect();
        PeriodicField {
            grid: grid.clone(),
            samples,
            spectrum: OnceLock::new(),
        }
    }

    pub fn constant(grid: &Grid, value: f64) -> Self {
        PeriodicField {
            grid: grid.clone(),
            samples: vec![value; grid.len()],
            spectrum: OnceLock::new(),
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn spectrum(&self) -> &[Complex64] {
        self.spectrum.get_or_init(|| spectral_transform(self))
    }

    /// Zero Fourier mode, i.e. the average over `Tⁿ`.
    pub fn mean(&self) -> f64 {
        self.spectrum()[0].re
    }

    pub fn sup_norm(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Spectral derivative along `axis`; modes that are Nyquist along any
    /// axis are discarded first.
    pub fn derivative(&self, axis: usize) -> PeriodicField {
        let grid = &self.grid;
        let spec = self.spectrum();
        let mut out = vec![Complex64::new(0.0, 0.0); spec.len()];
        for (flat, c) in spec.iter().enumerate() {
            let idx = grid.multi_index(flat);
            if idx.iter().enumerate().any(|(d, &m)| grid.is_nyquist(d, m)) {
                continue;
            }
            let k = grid.frequency(axis, idx[axis]) as f64;
            out[flat] = c * Complex64::new(0.0, 2.0 * PI * k);
        }
        inverse_spectral_transform(grid, &out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> PeriodicField {
        PeriodicField {
            grid: self.grid.clone(),
            samples: self.samples.iter().map(|&v| f(v)).collect(),
            spectrum: OnceLock::new(),
        }
    }

    pub fn zip_with(&self, other: &PeriodicField, f: impl Fn(f64, f64) -> f64) -> PeriodicField {
        debug_assert_eq!(self.grid, other.grid);
        PeriodicField {
            grid: self.grid.clone(),
            samples: self
                .samples
                .iter()
                .zip(&other.samples)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            spectrum: OnceLock::new(),
        }
    }

    pub fn interpolant(&self) -> TrigInterpolant {
        TrigInterpolant::from_fields(&[self])
    }
}

/// A one-form `η = Σ η_j dq_j` on `Tⁿ` sampled on a common grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PeriodicOneForm {
    components: Vec<PeriodicField>,
    mean: Vec<f64>,
}

impl PeriodicOneForm {
    pub fn new(components: Vec<PeriodicField>) -> Result<Self> {
        let Some(first) = components.first() else {
            return Err(Error::DimensionMismatch(
                "one-form without components".into(),
            ));
        };
        let grid = first.grid().clone();
        if components.len() != grid.dim() {
            return Err(Error::DimensionMismatch(format!(
                "{} components on a {}-dimensional grid",
                components.len(),
                grid.dim()
            )));
        }
        if components.iter().any(|c| c.grid() != &grid) {
            return Err(Error::DimensionMismatch(
                "one-form components live on different grids".into(),
            ));
        }
        let mean = components.iter().map(PeriodicField::mean).collect();
        Ok(PeriodicOneForm { components, mean })
    }

    /// Sample `q ↦ η(q)` on `grid`.
    pub fn from_fn(grid: &Grid, f: impl Fn(&[f64]) -> Vec<f64>) -> Self {
        let n = grid.dim();
        let values: Vec<Vec<f64>> = grid.nodes().map(|q| f(&q)).collect();
        let components = (0..n)
            .map(|j| {
                PeriodicField::new(grid.clone(), values.iter().map(|v| v[j]).collect())
                    .expect("grid length")
            })
            .collect();
        PeriodicOneForm::new(components).expect("consistent components")
    }

    pub fn constant(grid: &Grid, value: &[f64]) -> Self {
        PeriodicOneForm::from_fn(grid, |_| value.to_vec())
    }

    pub fn grid(&self) -> &Grid {
        self.components[0].grid()
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[PeriodicField] {
        &self.components
    }

    pub fn component(&self, j: usize) -> &PeriodicField {
        &self.components[j]
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// `η(q_i)` at grid node `i`.
    pub fn value_at_node(&self, i: usize) -> Vec<f64> {
        self.components.iter().map(|c| c.samples()[i]).collect()
    }

    /// `max_q ‖η(q)‖_∞` over the grid.
    pub fn sup_norm(&self) -> f64 {
        self.components.iter().fold(0.0, |m, c| m.max(c.sup_norm()))
    }

    pub fn interpolant(&self) -> TrigInterpolant {
        let refs: Vec<&PeriodicField> = self.components.iter().collect();
        TrigInterpolant::from_fields(&refs)
    }
}

/// Forward transform, normalised so that a constant field `1` maps to a
/// single zero-mode coefficient `1`.
pub fn spectral_transform(field: &PeriodicField) -> Vec<Complex64> {
    let mut data: Vec<Complex64> = field
        .samples()
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .collect();
    fft_nd(field.grid(), &mut data, FftDirection::Forward);
    let scale = 1.0 / field.grid().len() as f64;
    for c in &mut data {
        *c *= scale;
    }
    data
}

/// Inverse of [`spectral_transform`]; the imaginary residue of the
/// synthesis is dropped, so the input should be conjugate-symmetric.
pub fn inverse_spectral_transform(grid: &Grid, coeffs: &[Complex64]) -> PeriodicField {
    assert_eq!(
        coeffs.len(),
        grid.len(),
        "coefficient count must match grid"
    );
    let mut data = coeffs.to_vec();
    fft_nd(grid, &mut data, FftDirection::Inverse);
    PeriodicField {
        grid: grid.clone(),
        samples: data.into_iter().map(|c| c.re).collect(),
        spectrum: OnceLock::new(),
    }
}

fn fft_nd(grid: &Grid, data: &mut [Complex64], direction: FftDirection) {
    let shape = grid.shape();
    let strides = grid.strides();
    let mut planner = FftPlanner::new();
    for axis in 0..shape.len() {
        let len = shape[axis];
        if len == 1 {
            continue;
        }
        let fft = planner.plan_fft(len, direction);
        let stride = strides[axis];
        let mut line = vec![Complex64::new(0.0, 0.0); len];
        let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        let outer = data.len() / len;
        for line_idx in 0..outer {
            // split line_idx into the parts above and below `axis`
            let low = line_idx % stride;
            let high = line_idx / stride;
            let base = high * stride * len + low;
            for (m, slot) in line.iter_mut().enumerate() {
                *slot = data[base + m * stride];
            }
            fft.process_with_scratch(&mut line, &mut scratch);
            for (m, v) in line.iter().enumerate() {
                data[base + m * stride] = *v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_field_has_single_zero_mode() {
        let g = Grid::cubic(2, 8).unwrap();
        let f = PeriodicField::constant(&g, 1.0);
        let s = f.spectrum();
        assert!((s[0].re - 1.0).abs() < 1e-15);
        assert!(s[1..].iter().all(|c| c.norm() < 1e-15));
    }

    #[test]
    fn cosine_has_half_coefficients_at_first_modes() {
        let g = Grid::cubic(2, 16).unwrap();
        let f = PeriodicField::from_fn(&g, |q| (2.0 * PI * q[0]).cos());
        let s = f.spectrum();
        let plus = g.flat_index(&[1, 0]);
        let minus = g.flat_index(&[15, 0]);
        for (i, c) in s.iter().enumerate() {
            let expected = if i == plus || i == minus { 0.5 } else { 0.0 };
            assert!(
                (c.re - expected).abs() < 1e-14 && c.im.abs() < 1e-14,
                "mode {i}: {c}"
            );
        }
    }

    #[test]
    fn random_field_round_trip_and_parseval() {
        let g = Grid::cubic(2, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let samples: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = PeriodicField::new(g.clone(), samples.clone()).unwrap();
        let back = inverse_spectral_transform(&g, f.spectrum());
        let scale = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = samples
            .iter()
            .zip(back.samples())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err <= 1e-12 * scale, "round trip error {err}");
        let energy: f64 = samples.iter().map(|v| v * v).sum::<f64>() / g.len() as f64;
        let spectral: f64 = f.spectrum().iter().map(|c| c.norm_sqr()).sum();
        assert!((energy - spectral).abs() <= 1e-12 * energy);
    }

    #[test]
    fn derivative_of_sine_is_scaled_cosine() {
        let g = Grid::new(vec![16, 8]).unwrap();
        let f = PeriodicField::from_fn(&g, |q| (2.0 * PI * 3.0 * q[1]).sin());
        let d = f.derivative(1);
        for (q, v) in g.nodes().zip(d.samples()) {
            let expected = 6.0 * PI * (6.0 * PI * q[1]).cos();
            assert!((v - expected).abs() < 1e-11);
        }
        let d0 = f.derivative(0);
        assert!(d0.sup_norm() < 1e-12);
    }

    #[test]
    fn one_form_mean_matches_sample_average() {
        let g = Grid::cubic(2, 16).unwrap();
        let form = PeriodicOneForm::from_fn(&g, |q| {
            vec![
                0.3 + (2.0 * PI * q[1]).sin(),
                -0.2 + 0.1 * (2.0 * PI * q[0]).cos(),
            ]
        });
        for j in 0..2 {
            let avg: f64 = form.component(j).samples().iter().sum::<f64>() / g.len() as f64;
            assert!((form.mean()[j] - avg).abs() < 1e-14);
        }
    }
}
