//! Interpolating cubic splines on regular grids, expressed as cardinal
//! weight vectors so that one set of weights serves every data series on
//! the same grid.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Cubic spline interpolation along one regular axis, optionally convolved
/// with a discrete kernel `Σ ν_r δ(s − s_r)`.
#[derive(Clone, Debug)]
pub struct SplineAxis {
    lo: f64,
    h: f64,
    m: usize,
    /// Node slopes as a linear map of node values.
    slopes: DMatrix<f64>,
    kernel: Vec<(f64, f64)>,
}

/// Values and first two derivatives of the cardinal weights at one point.
#[derive(Clone, Debug, Default)]
pub struct AxisWeights {
    pub w: Vec<f64>,
    pub dw: Vec<f64>,
    pub ddw: Vec<f64>,
}

impl SplineAxis {
    /// Not-a-knot cubic spline for `m ≥ 4`, the interpolating polynomial
    /// below that.
    pub fn new(lo: f64, hi: f64, m: usize) -> Result<Self> {
        if m == 0 || !(lo.is_finite() && hi.is_finite()) || (m > 1 && hi <= lo) {
            return Err(Error::BadParameters(
                "spline axis needs m ≥ 1 and lo < hi".into(),
            ));
        }
        let h = if m > 1 {
            (hi - lo) / (m - 1) as f64
        } else {
            1.0
        };
        let slopes = slope_matrix(m, h);
        Ok(SplineAxis {
            lo,
            h,
            m,
            slopes,
            kernel: vec![(0.0, 1.0)],
        })
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.lo + self.h * (self.m.max(1) - 1) as f64
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }

    pub fn node(&self, i: usize) -> f64 {
        self.lo + i as f64 * self.h
    }

    /// The same axis with its weights convolved by `kernel` (offset, weight).
    pub fn smoothed(&self, kernel: Vec<(f64, f64)>) -> Self {
        SplineAxis {
            kernel,
            ..self.clone()
        }
    }

    pub fn weights(&self, x: f64) -> AxisWeights {
        let mut out = AxisWeights {
            w: vec![0.0; self.m],
            dw: vec![0.0; self.m],
            ddw: vec![0.0; self.m],
        };
        for &(s, nu) in &self.kernel {
            self.accumulate(x - s, nu, &mut out);
        }
        out
    }

    fn accumulate(&self, x: f64, nu: f64, out: &mut AxisWeights) {
        let m = self.m;
        if m == 1 {
            out.w[0] += nu;
            return;
        }
        let h = self.h;
        let i = (((x - self.lo) / h).floor().max(0.0) as usize).min(m - 2);
        let t = (x - self.node(i)) / h;
        let (t2, t3) = (t * t, t * t * t);
        let b = [
            2.0 * t3 - 3.0 * t2 + 1.0,
            t3 - 2.0 * t2 + t,
            -2.0 * t3 + 3.0 * t2,
            t3 - t2,
        ];
        let db = [
            6.0 * t2 - 6.0 * t,
            3.0 * t2 - 4.0 * t + 1.0,
            -6.0 * t2 + 6.0 * t,
            3.0 * t2 - 2.0 * t,
        ];
        let ddb = [
            12.0 * t - 6.0,
            6.0 * t - 4.0,
            -12.0 * t + 6.0,
            6.0 * t - 2.0,
        ];
        out.w[i] += nu * b[0];
        out.w[i + 1] += nu * b[2];
        out.dw[i] += nu * db[0] / h;
        out.dw[i + 1] += nu * db[2] / h;
        out.ddw[i] += nu * ddb[0] / (h * h);
        out.ddw[i + 1] += nu * ddb[2] / (h * h);
        for l in 0..m {
            let (si, sj) = (self.slopes[(i, l)], self.slopes[(i + 1, l)]);
            out.w[l] += nu * h * (b[1] * si + b[3] * sj);
            out.dw[l] += nu * (db[1] * si + db[3] * sj);
            out.ddw[l] += nu * (ddb[1] * si + ddb[3] * sj) / h;
        }
    }
}

fn slope_matrix(m: usize, h: f64) -> DMatrix<f64> {
    match m {
        1 => DMatrix::zeros(1, 1),
        2 => DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, -1.0, 1.0]) / h,
        3 => {
            DMatrix::from_row_slice(3, 3, &[-3.0, 4.0, -1.0, -1.0, 0.0, 1.0, 1.0, -4.0, 3.0])
                / (2.0 * h)
        }
        _ => {
            // C² interior rows plus not-a-knot ends, all in terms of node values
            let mut a = DMatrix::zeros(m, m);
            let mut b = DMatrix::zeros(m, m);
            for i in 1..m - 1 {
                a[(i, i - 1)] = 1.0;
                a[(i, i)] = 4.0;
                a[(i, i + 1)] = 1.0;
                b[(i, i + 1)] = 3.0 / h;
                b[(i, i - 1)] = -3.0 / h;
            }
            // m0 − m2 = 2(δ0 − δ1)
            a[(0, 0)] = 1.0;
            a[(0, 2)] = -1.0;
            b[(0, 0)] = -2.0 / h;
            b[(0, 1)] = 4.0 / h;
            b[(0, 2)] = -2.0 / h;
            // m_{m−1} − m_{m−3} = 2(δ_{m−2} − δ_{m−3})
            a[(m - 1, m - 1)] = 1.0;
            a[(m - 1, m - 3)] = -1.0;
            b[(m - 1, m - 1)] = 2.0 / h;
            b[(m - 1, m - 2)] = -4.0 / h;
            b[(m - 1, m - 3)] = 2.0 / h;
            a.lu().solve(&b).expect("not-a-knot system is regular")
        }
    }
}

/// Tensor product of spline axes over a row-major node grid.
#[derive(Clone, Debug)]
pub struct TensorSpline {
    axes: Vec<SplineAxis>,
}

/// Tensor weights at a point: `w[j]`, `dw[d][j]`, `ddw[d][e][j]`.
#[derive(Clone, Debug)]
pub struct TensorWeights {
    pub w: Vec<f64>,
    pub dw: Vec<Vec<f64>>,
    pub ddw: Vec<Vec<Vec<f64>>>,
}

impl TensorSpline {
    pub fn new(axes: Vec<SplineAxis>) -> Self {
        TensorSpline { axes }
    }

    pub fn regular(lo: &[f64], hi: &[f64], counts: &[usize]) -> Result<Self> {
        let axes = (0..lo.len())
            .map(|d| SplineAxis::new(lo[d], hi[d], counts[d]))
            .collect::<Result<Vec<_>>>()?;
        Ok(TensorSpline { axes })
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[SplineAxis] {
        &self.axes
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn node(&self, mut flat: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        for d in (0..self.dim()).rev() {
            let m = self.axes[d].len();
            x[d] = self.axes[d].node(flat % m);
            flat /= m;
        }
        x
    }

    pub fn smoothed(&self, kernel: &[(f64, f64)]) -> Self {
        TensorSpline {
            axes: self
                .axes
                .iter()
                .map(|a| a.smoothed(kernel.to_vec()))
                .collect(),
        }
    }

    pub fn weights(&self, x: &[f64]) -> TensorWeights {
        let n = self.dim();
        let per_axis: Vec<AxisWeights> = self
            .axes
            .iter()
            .zip(x)
            .map(|(a, &v)| a.weights(v))
            .collect();
        let len = self.len();
        let mut w = vec![0.0; len];
        let mut dw = vec![vec![0.0; len]; n];
        let mut ddw = vec![vec![vec![0.0; len]; n]; n];
        let mut idx = vec![0usize; n];
        for j in 0..len {
            let mut r = j;
            for d in (0..n).rev() {
                let m = self.axes[d].len();
                idx[d] = r % m;
                r /= m;
            }
            let factor = |d: usize, order: usize| match order {
                0 => per_axis[d].w[idx[d]],
                1 => per_axis[d].dw[idx[d]],
                _ => per_axis[d].ddw[idx[d]],
            };
            w[j] = (0..n).map(|d| factor(d, 0)).product();
            for a in 0..n {
                dw[a][j] = (0..n).map(|d| factor(d, usize::from(d == a))).product();
                for b in 0..n {
                    ddw[a][b][j] = (0..n)
                        .map(|d| factor(d, usize::from(d == a) + usize::from(d == b)))
                        .product();
                }
            }
        }
        TensorWeights { w, dw, ddw }
    }
}

/// Evaluate `Σ_j w_j y_j`.
pub fn combine(w: &[f64], y: &[f64]) -> f64 {
    w.iter().zip(y).map(|(a, b)| a * b).sum()
}
