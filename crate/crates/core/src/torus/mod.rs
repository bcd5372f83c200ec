//! Calculus on the n-torus `Tⁿ = ℝⁿ/ℤⁿ`.
//!
//! Points come in two flavours: [`TorusPoint`] with coordinates reduced to
//! `[0, 1)` and [`CoverPoint`] living in the universal cover `ℝⁿ`. Periodic
//! data is sampled on a regular power-of-two [`Grid`] and handled spectrally
//! (see [`PeriodicField`] and [`PeriodicOneForm`]); trigonometric
//! interpolation is the only interpolation used for periodic data.

mod calculus;
mod field;
pub mod format;
mod interp;

pub(crate) use calculus::potential_unchecked;
pub use calculus::{
    closedness_defect, cohomology_class, potential_from_form, ClosednessTolerance,
    DEFAULT_CLOSEDNESS_TOL,
};
pub use field::{inverse_spectral_transform, spectral_transform, PeriodicField, PeriodicOneForm};
pub use interp::{ModeSet, TrigInterpolant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reduce a real number to `[0, 1)`.
#[inline]
pub fn wrap(x: f64) -> f64 {
    let r = x.rem_euclid(1.0);
    // rem_euclid can round up to exactly 1.0 for tiny negative inputs
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// Signed minimal displacement `d - round(d)` in `[-0.5, 0.5]`.
#[inline]
pub fn minimal_displacement(d: f64) -> f64 {
    d - d.round()
}

/// Euclidean distance on `Tⁿ` between two points given in any lift.
pub fn torus_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| minimal_displacement(x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// A point of `Tⁿ` with every coordinate in `[0, 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TorusPoint(Vec<f64>);

impl TorusPoint {
    /// Wraps arbitrary real coordinates onto the torus.
    pub fn new(coords: Vec<f64>) -> Self {
        TorusPoint(coords.into_iter().map(wrap).collect())
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// The lift lying in the fundamental domain `[0, 1)ⁿ`.
    pub fn unwrap_origin(&self) -> CoverPoint {
        CoverPoint(self.0.clone())
    }
}

/// A point of the universal cover `ℝⁿ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverPoint(pub Vec<f64>);

impl CoverPoint {
    pub fn new(coords: Vec<f64>) -> Self {
        CoverPoint(coords)
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn project(&self) -> TorusPoint {
        TorusPoint::new(self.0.clone())
    }
}

/// A point `(q, p)` of `T*Tⁿ`; `q` is stored as given (any lift).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
}

impl PhasePoint {
    pub fn new(q: Vec<f64>, p: Vec<f64>) -> Self {
        debug_assert_eq!(q.len(), p.len());
        PhasePoint { q, p }
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    /// Same point with `q` reduced to `[0, 1)ⁿ`.
    pub fn wrapped(&self) -> PhasePoint {
        PhasePoint {
            q: self.q.iter().copied().map(wrap).collect(),
            p: self.p.clone(),
        }
    }

    /// Concatenated state `(q, p)`.
    pub fn to_state(&self) -> Vec<f64> {
        let mut s = self.q.clone();
        s.extend_from_slice(&self.p);
        s
    }

    pub fn from_state(state: &[f64]) -> Self {
        let n = state.len() / 2;
        PhasePoint {
            q: state[..n].to_vec(),
            p: state[n..].to_vec(),
        }
    }
}

/// Lift a sampled torus path continuously, starting at `start`.
///
/// Each step uses the minimal displacement between consecutive samples; a
/// displacement of half a period or more in any coordinate is ambiguous and
/// reported as [`Error::StepTooLarge`].
pub fn unwrap_path(points: &[TorusPoint], start: &CoverPoint) -> Result<Vec<CoverPoint>> {
    let Some(first) = points.first() else {
        return Ok(Vec::new());
    };
    if first.dim() != start.0.len() {
        return Err(Error::DimensionMismatch(format!(
            "start has dimension {}, path has {}",
            start.0.len(),
            first.dim()
        )));
    }
    if torus_distance(first.coords(), start.coords()) > 1e-12 {
        return Err(Error::Precondition(
            "start does not project to the first path point".into(),
        ));
    }
    let mut out = Vec::with_capacity(points.len());
    out.push(start.clone());
    for (i, pair) in points.windows(2).enumerate() {
        let prev = out.last().expect("non-empty").0.clone();
        let mut next = Vec::with_capacity(prev.len());
        for (d, &x) in prev.iter().enumerate() {
            let step = minimal_displacement(pair[1].0[d] - pair[0].0[d]);
            if step.abs() >= 0.5 {
                return Err(Error::StepTooLarge {
                    index: i,
                    gap: step.abs(),
                });
            }
            next.push(x + step);
        }
        out.push(CoverPoint(next));
    }
    Ok(out)
}

/// Regular grid on `Tⁿ` with a power-of-two resolution per axis, nodes at
/// `m / N` in row-major order (last axis fastest).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid {
    shape: Vec<usize>,
}

impl Grid {
    pub fn new(shape: Vec<usize>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::BadGrid("grid must have at least one axis".into()));
        }
        for &s in &shape {
            if s == 0 || !s.is_power_of_two() {
                return Err(Error::BadGrid(format!(
                    "resolution {s} is not a power of two"
                )));
            }
        }
        Ok(Grid { shape })
    }

    /// Same resolution on each of `n` axes.
    pub fn cubic(n: usize, resolution: usize) -> Result<Self> {
        Grid::new(vec![resolution; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for d in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[d] = strides[d + 1] * self.shape[d + 1];
        }
        strides
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.shape.len()];
        for d in (0..self.shape.len()).rev() {
            idx[d] = flat % self.shape[d];
            flat /= self.shape[d];
        }
        idx
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &s)| acc * s + (i % s))
    }

    /// Coordinates of node `flat`.
    pub fn node(&self, flat: usize) -> Vec<f64> {
        self.multi_index(flat)
            .iter()
            .zip(&self.shape)
            .map(|(&m, &s)| m as f64 / s as f64)
            .collect()
    }

    pub fn nodes(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        (0..self.len()).map(move |i| self.node(i))
    }

    /// Signed frequency of array index `m` along `axis`.
    pub fn frequency(&self, axis: usize, m: usize) -> i64 {
        let s = self.shape[axis];
        if 2 * m < s || s == 1 {
            m as i64
        } else {
            m as i64 - s as i64
        }
    }

    /// Whether index `m` along `axis` is the unpaired highest mode.
    pub fn is_nyquist(&self, axis: usize, m: usize) -> bool {
        let s = self.shape[axis];
        s > 1 && 2 * m == s
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        1.0 / self.shape[axis] as f64
    }
}
