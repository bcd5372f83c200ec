use std::f64::consts::PI;

use num_complex::Complex64;

use super::{Grid, PeriodicField};

/// Coefficients below this fraction of the largest one are dropped when a
/// sampled field is turned into an evaluable trigonometric polynomial.
const PRUNE_RELATIVE: f64 = 1e-15;

/// A sparse set of integer frequency vectors together with the per-axis
/// frequency bound needed to tabulate `e^{2πi k x}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeSet {
    dim: usize,
    freqs: Vec<i32>,
    kmax: Vec<usize>,
}

impl ModeSet {
    pub fn new(dim: usize, freqs: Vec<i32>) -> Self {
        assert_eq!(freqs.len() % dim.max(1), 0);
        let mut kmax = vec![0usize; dim];
        for mode in freqs.chunks(dim) {
            for (d, &k) in mode.iter().enumerate() {
                kmax[d] = kmax[d].max(k.unsigned_abs() as usize);
            }
        }
        ModeSet { dim, freqs, kmax }
    }

    /// Modes of `grid` whose coefficient in any of `spectra` exceeds
    /// `relative` times the largest one. Nyquist modes are never kept.
    pub fn significant(
        grid: &Grid,
        spectra: &[&[Complex64]],
        relative: f64,
    ) -> (ModeSet, Vec<usize>) {
        let max = spectra
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0f64, |m, c| m.max(c.norm()));
        let threshold = max * relative;
        let n = grid.dim();
        let mut freqs = Vec::new();
        let mut kept = Vec::new();
        for flat in 0..grid.len() {
            let idx = grid.multi_index(flat);
            if idx.iter().enumerate().any(|(d, &m)| grid.is_nyquist(d, m)) {
                continue;
            }
            let big = spectra.iter().any(|s| s[flat].norm() > threshold);
            // keep the zero mode unconditionally so an all-zero field stays representable
            if big || flat == 0 {
                for d in 0..n {
                    freqs.push(grid.frequency(d, idx[d]) as i32);
                }
                kept.push(flat);
            }
        }
        (ModeSet::new(n, freqs), kept)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.freqs.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }

    pub fn freq(&self, m: usize) -> &[i32] {
        &self.freqs[m * self.dim..(m + 1) * self.dim]
    }

    /// Fill `out` with `e^{2πi k·x}` for every mode.
    pub fn basis_into(&self, x: &[f64], out: &mut Vec<Complex64>) {
        let mut tables: Vec<Vec<Complex64>> = Vec::with_capacity(self.dim);
        for d in 0..self.dim {
            let k = self.kmax[d];
            let z = Complex64::from_polar(1.0, 2.0 * PI * x[d]);
            let mut table = vec![Complex64::new(1.0, 0.0); 2 * k + 1];
            let mut w = Complex64::new(1.0, 0.0);
            for j in 1..=k {
                // refresh from the exact phase every 16 powers to bound drift
                w = if j % 16 == 0 {
                    Complex64::from_polar(1.0, 2.0 * PI * x[d] * j as f64)
                } else {
                    w * z
                };
                table[k + j] = w;
                table[k - j] = w.conj();
            }
            tables.push(table);
        }
        out.clear();
        out.reserve(self.len());
        for mode in self.freqs.chunks(self.dim) {
            let mut b = Complex64::new(1.0, 0.0);
            for (d, &k) in mode.iter().enumerate() {
                b *= tables[d][(k + self.kmax[d] as i32) as usize];
            }
            out.push(b);
        }
    }
}

/// Evaluable trigonometric polynomial(s) sharing one sparse mode set.
///
/// Built from sampled fields; reproduces the grid samples up to the pruned
/// coefficients and the discarded Nyquist modes.
#[derive(Clone, Debug)]
pub struct TrigInterpolant {
    modes: ModeSet,
    coeffs: Vec<Vec<Complex64>>,
}

impl TrigInterpolant {
    pub fn from_fields(fields: &[&PeriodicField]) -> Self {
        assert!(!fields.is_empty());
        let grid = fields[0].grid();
        let spectra: Vec<&[Complex64]> = fields.iter().map(|f| f.spectrum()).collect();
        Self::from_spectra(grid, &spectra)
    }

    pub fn from_spectra(grid: &Grid, spectra: &[&[Complex64]]) -> Self {
        Self::from_spectra_pruned(grid, spectra, PRUNE_RELATIVE)
    }

    /// As [`TrigInterpolant::from_spectra`] with a custom pruning level.
    pub fn from_spectra_pruned(grid: &Grid, spectra: &[&[Complex64]], relative: f64) -> Self {
        let (modes, kept) = ModeSet::significant(grid, spectra, relative);
        let coeffs = spectra
            .iter()
            .map(|s| kept.iter().map(|&i| s[i]).collect())
            .collect();
        TrigInterpolant { modes, coeffs }
    }

    pub fn from_parts(modes: ModeSet, coeffs: Vec<Vec<Complex64>>) -> Self {
        assert!(coeffs.iter().all(|c| c.len() == modes.len()));
        TrigInterpolant { modes, coeffs }
    }

    pub fn dim(&self) -> usize {
        self.modes.dim()
    }

    pub fn components(&self) -> usize {
        self.coeffs.len()
    }

    pub fn modes(&self) -> &ModeSet {
        &self.modes
    }

    pub fn coeffs(&self) -> &[Vec<Complex64>] {
        &self.coeffs
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut basis = Vec::new();
        self.modes.basis_into(x, &mut basis);
        self.coeffs
            .iter()
            .map(|c| c.iter().zip(&basis).map(|(a, b)| (a * b).re).sum())
            .collect()
    }

    /// Values and the Jacobian `∂f_i/∂x_d`, stored row-major as `[i][d]`.
    pub fn eval_with_gradient(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.dim();
        let mut basis = Vec::new();
        self.modes.basis_into(x, &mut basis);
        let mut values = vec![0.0; self.coeffs.len()];
        let mut jac = vec![0.0; self.coeffs.len() * n];
        for (i, c) in self.coeffs.iter().enumerate() {
            let mut v = 0.0;
            let mut g = [0.0f64; 8];
            for (m, (a, b)) in c.iter().zip(&basis).enumerate() {
                let t = a * b;
                v += t.re;
                // d/dx e^{2πikx} = 2πik e^{2πikx}; real part of i·t is -t.im
                for (d, &k) in self.modes.freq(m).iter().enumerate() {
                    g[d] -= k as f64 * t.im;
                }
            }
            values[i] = v;
            for d in 0..n {
                jac[i * n + d] = 2.0 * PI * g[d];
            }
        }
        (values, jac)
    }
}
