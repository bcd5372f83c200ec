//! Randomized invariant suites shared by the property tests and the
//! acceptance run. Each suite drives a deterministic proptest runner and
//! returns the first failing case as an error string.

#![allow(dead_code)]

use std::f64::consts::PI;
use std::sync::OnceLock;

use liouville::action_angle::{a_function, build_coordinates, ALCoordinates};
use liouville::flow::{flow_lifted, flow_map, IntegratorConfig};
use liouville::foliation::{
    build_foliation, c_map, generating_function, FoliationSource, LeafGrid, RawFoliation,
};
use liouville::models::{
    builtin_model, pendulum, poisson_bracket, twisted, HamiltonianModel, ModelParams,
};
use liouville::torus::{
    closedness_defect, cohomology_class, inverse_spectral_transform, potential_from_form,
    spectral_transform, torus_distance, ClosednessTolerance, Grid, PeriodicField, PeriodicOneForm,
    PhasePoint,
};
use nalgebra::DMatrix;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

pub const CASES: u32 = 100;

fn runner() -> TestRunner {
    let config = Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn run<S: Strategy>(
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String>
where
    S::Value: std::fmt::Debug,
{
    runner().run(&strategy, test).map_err(|e| e.to_string())
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), TestCaseError> {
    if ok {
        Ok(())
    } else {
        Err(TestCaseError::fail(msg()))
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// `u(q) = Σ α_m cos(2π k_m·q + θ_m)` with integer `k_m` and `|k_m|∞ ≤ 8`.
#[derive(Clone, Debug)]
pub struct TrigPoly {
    pub n: usize,
    pub terms: Vec<(Vec<i32>, f64, f64)>,
    pub class: Vec<f64>,
}

impl TrigPoly {
    fn phase(&self, k: &[i32], theta: f64, q: &[f64]) -> f64 {
        2.0 * PI * k.iter().zip(q).map(|(&a, b)| a as f64 * b).sum::<f64>() + theta
    }

    pub fn value(&self, q: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(k, a, th)| a * self.phase(k, *th, q).cos())
            .sum()
    }

    pub fn gradient(&self, q: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|j| {
                self.terms
                    .iter()
                    .map(|(k, a, th)| -a * 2.0 * PI * k[j] as f64 * self.phase(k, *th, q).sin())
                    .sum()
            })
            .collect()
    }
}

fn trig_poly() -> impl Strategy<Value = TrigPoly> {
    (1usize..=3).prop_flat_map(|n| {
        let term = (
            prop::collection::vec(-8i32..=8, n),
            -1.0f64..1.0,
            0.0f64..(2.0 * PI),
        );
        (
            prop::collection::vec(term, 1..6),
            prop::collection::vec(-2.0f64..2.0, n),
        )
            .prop_map(move |(terms, class)| TrigPoly { n, terms, class })
    })
}

/// Spectral round trip, cohomology class and potential recovery for
/// `c + ∇u`, and invariance of the closedness defect under constant shifts.
pub fn spectral_suite() -> Result<(), String> {
    run(trig_poly(), |poly| {
        let grid = Grid::cubic(poly.n, 32).unwrap();
        let u = PeriodicField::from_fn(&grid, |q| poly.value(q));
        let back = inverse_spectral_transform(&grid, &spectral_transform(&u));
        let err = back
            .samples()
            .iter()
            .zip(u.samples())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        check(err <= 1e-12 * u.sup_norm().max(1.0), || {
            format!("round trip error {err:e}")
        })?;

        let form = PeriodicOneForm::from_fn(&grid, |q| {
            poly.gradient(q)
                .iter()
                .zip(&poly.class)
                .map(|(g, c)| g + c)
                .collect()
        });
        let tol = ClosednessTolerance::default();
        let c = cohomology_class(&form, tol).map_err(|e| TestCaseError::fail(e.to_string()))?;
        check(dist(&c, &poly.class) <= 1e-12, || {
            format!("class {c:?} vs {:?}", poly.class)
        })?;
        let pot =
            potential_from_form(&form, tol).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let origin = poly.value(&vec![0.0; poly.n]);
        let err = grid
            .nodes()
            .zip(pot.samples())
            .map(|(q, v)| (v - (poly.value(&q) - origin)).abs())
            .fold(0.0, f64::max);
        check(err <= 1e-10, || format!("potential error {err:e}"))?;

        let shifted = PeriodicOneForm::from_fn(&grid, |q| {
            poly.gradient(q)
                .iter()
                .zip(&poly.class)
                .map(|(g, c)| g + c + 0.75)
                .collect()
        });
        let (d0, d1) = (closedness_defect(&form), closedness_defect(&shifted));
        check((d0 - d1).abs() <= 1e-12 * d0.max(1.0), || {
            format!("defect {d0:e} vs {d1:e} after shift")
        })
    })
}

fn expression() -> impl Strategy<Value = String> {
    let leaf = prop_oneof![
        Just("q1".to_string()),
        Just("q2".to_string()),
        Just("p1".to_string()),
        Just("p2".to_string()),
        (0.1f64..2.0).prop_map(|c| format!("{c:.6}")),
    ];
    leaf.prop_recursive(3, 12, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a}+{b})")),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a}-{b})")),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a}*{b})")),
            inner.clone().prop_map(|a| format!("sin(2*pi*{a})")),
            inner.prop_map(|a| format!("cos({a})")),
        ]
    })
}

fn phase_point() -> impl Strategy<Value = PhasePoint> {
    (
        prop::array::uniform2(0.0f64..1.0),
        prop::array::uniform2(-1.0f64..1.0),
    )
        .prop_map(|(q, p)| PhasePoint::new(q.to_vec(), p.to_vec()))
}

/// `{F,G} = −{G,F}` bit for bit and `{FG,K} = F{G,K} + G{F,K}`.
pub fn bracket_suite() -> Result<(), String> {
    run(
        (expression(), expression(), expression(), phase_point()),
        |(f, g, k, x)| {
            let model = |s: &str| {
                HamiltonianModel::from_expression(s, 2)
                    .map_err(|e| TestCaseError::fail(e.to_string()))
            };
            let (f, g, k) = (model(&f)?, model(&g)?, model(&k)?);
            let br = |a: &HamiltonianModel, b: &HamiltonianModel| {
                poisson_bracket(a, b, &x).map_err(|e| TestCaseError::fail(e.to_string()))
            };
            let (fg, gf) = (br(&f, &g)?, br(&g, &f)?);
            check(fg == -gf, || {
                format!("{{F,G}} = {fg:e} but {{G,F}} = {gf:e}")
            })?;
            let prod = f
                .product(&g)
                .map_err(|e| TestCaseError::fail(e.to_string()))?;
            let lhs = br(&prod, &k)?;
            let fv = f.value(&x.q, &x.p).unwrap();
            let gv = g.value(&x.q, &x.p).unwrap();
            let rhs = fv * br(&g, &k)? + gv * br(&f, &k)?;
            check((lhs - rhs).abs() <= 1e-10, || {
                format!("Leibniz: {lhs:e} vs {rhs:e}")
            })
        },
    )
}

/// `φ_{s+t} = φ_t ∘ φ_s` on the twisted model.
pub fn group_law_suite() -> Result<(), String> {
    let model = twisted(0.1, 2).unwrap();
    let cfg = IntegratorConfig::midpoint(1e-3);
    run((phase_point(), -2.0f64..2.0, -2.0f64..2.0), |(x, s, t)| {
        let direct = flow_lifted(&model, &x, s + t, &cfg).unwrap();
        let mid = flow_lifted(&model, &x, s, &cfg).unwrap();
        let composed = flow_lifted(&model, &mid, t, &cfg).unwrap();
        let err = torus_distance(&direct.q, &composed.q).hypot(dist(&direct.p, &composed.p));
        check(err <= 1e-6, || {
            format!("group law defect {err:e} at s={s}, t={t}")
        })
    })
}

/// `‖Jᵀ Ω J − Ω‖ ≤ 1e-6` for the finite-difference Jacobian of `φ_t`.
pub fn symplecticity_suite() -> Result<(), String> {
    let models = [twisted(0.1, 2).unwrap(), pendulum(0.1, 2).unwrap()];
    let cfg = IntegratorConfig::midpoint(1e-2);
    let delta = 1e-6;
    run((phase_point(), -2.0f64..2.0, 0usize..2), |(x, t, which)| {
        let model = &models[which];
        let state = x.to_state();
        let mut jac = DMatrix::zeros(4, 4);
        for v in 0..4 {
            let mut plus = state.clone();
            let mut minus = state.clone();
            plus[v] += delta;
            minus[v] -= delta;
            let fp = flow_lifted(model, &PhasePoint::from_state(&plus), t, &cfg)
                .unwrap()
                .to_state();
            let fm = flow_lifted(model, &PhasePoint::from_state(&minus), t, &cfg)
                .unwrap()
                .to_state();
            for r in 0..4 {
                jac[(r, v)] = (fp[r] - fm[r]) / (2.0 * delta);
            }
        }
        let mut omega = DMatrix::zeros(4, 4);
        for i in 0..2 {
            omega[(i, 2 + i)] = 1.0;
            omega[(2 + i, i)] = -1.0;
        }
        let defect = (jac.transpose() * &omega * &jac - &omega).amax();
        check(defect <= 1e-6, || {
            format!("symplecticity defect {defect:e} at t={t}")
        })?;
        // flow_map wraps q but leaves the momentum untouched
        let wrapped = flow_map(model, &x, t, &cfg).unwrap();
        check(wrapped.q.iter().all(|v| (0.0..1.0).contains(v)), || {
            "flow_map left [0,1)".into()
        })
    })
}

pub struct CoordinatesFixture {
    pub model: HamiltonianModel,
    pub coords: ALCoordinates,
    pub q_grid: Grid,
}

fn coordinates_fixture(
    model: HamiltonianModel,
    lo: f64,
    hi: f64,
    count: usize,
    res: usize,
) -> CoordinatesFixture {
    let q_grid = Grid::cubic(2, res).unwrap();
    let fol = build_foliation(
        FoliationSource::Oracle {
            model: &model,
            leaf_grid: LeafGrid::cube(2, lo, hi, count).unwrap(),
            q_grid: q_grid.clone(),
        },
        ClosednessTolerance::default(),
    )
    .unwrap();
    let cmap = c_map(&fol).unwrap();
    let gen = generating_function(&fol, &cmap).unwrap();
    let af = a_function(&fol, &cmap, &model, 1e-8).unwrap();
    let coords = build_coordinates(&gen, &cmap, &af).unwrap();
    CoordinatesFixture {
        model,
        coords,
        q_grid,
    }
}

pub fn flat_coordinates() -> &'static CoordinatesFixture {
    static CELL: OnceLock<CoordinatesFixture> = OnceLock::new();
    CELL.get_or_init(|| {
        coordinates_fixture(
            builtin_model("separable", 2, &ModelParams::default()).unwrap(),
            -1.0,
            1.0,
            5,
            16,
        )
    })
}

pub fn twisted_coordinates() -> &'static CoordinatesFixture {
    static CELL: OnceLock<CoordinatesFixture> = OnceLock::new();
    CELL.get_or_init(|| coordinates_fixture(twisted(0.1, 2).unwrap(), 0.0, 1.0, 11, 32))
}

/// `max_q |H(q, c + ∂𝒮/∂q(q, c)) − A(c)| ≤ 1e-8` at random `c` in the
/// valid box, on both oracle fixtures.
pub fn hamilton_jacobi_suite() -> Result<(), String> {
    let fixtures = [flat_coordinates(), twisted_coordinates()];
    let unit = prop::array::uniform2(0.0f64..=1.0);
    run((unit, 0usize..2), |(u, which)| {
        let fx = fixtures[which];
        let co = &fx.coords;
        let c: Vec<f64> = (0..2)
            .map(|d| co.valid_lo[d] + u[d] * (co.valid_hi[d] - co.valid_lo[d]))
            .collect();
        let a = co.a_value(&c);
        let mut worst = 0.0f64;
        for q in fx.q_grid.nodes() {
            let s = co.generating(&q, &c);
            let p: Vec<f64> = c.iter().zip(&s.dq).map(|(a, b)| a + b).collect();
            worst = worst.max((fx.model.value(&q, &p).unwrap() - a).abs());
        }
        check(worst <= 1e-8, || {
            format!("Hamilton-Jacobi residual {worst:e} at c={c:?}")
        })
    })
}

/// Leaf family `η_a = a + ∇u_a` with
/// `u_a(q) = α e^{γa₁} cos(γa₂) sin(2π k·q)`.
#[derive(Clone, Debug)]
pub struct MixedFamily {
    pub alpha: f64,
    pub gamma: f64,
    pub k: [i32; 2],
}

impl MixedFamily {
    fn f(&self, a: &[f64]) -> f64 {
        self.alpha * (self.gamma * a[0]).exp() * (self.gamma * a[1]).cos()
    }

    fn grad_f(&self, a: &[f64]) -> [f64; 2] {
        let e = (self.gamma * a[0]).exp();
        [
            self.alpha * self.gamma * e * (self.gamma * a[1]).cos(),
            -self.alpha * self.gamma * e * (self.gamma * a[1]).sin(),
        ]
    }

    fn arg(&self, q: &[f64]) -> f64 {
        2.0 * PI * (self.k[0] as f64 * q[0] + self.k[1] as f64 * q[1])
    }

    fn eta(&self, a: &[f64], q: &[f64]) -> Vec<f64> {
        let c = self.arg(q).cos() * 2.0 * PI * self.f(a);
        vec![a[0] + c * self.k[0] as f64, a[1] + c * self.k[1] as f64]
    }

    /// `∂²S/∂q_j∂a_l`.
    fn mixed(&self, a: &[f64], q: &[f64], j: usize, l: usize) -> f64 {
        self.grad_f(a)[l] * 2.0 * PI * self.k[j] as f64 * self.arg(q).cos()
    }

    /// `sup |∂_q(∂S/∂a) − exact|` over the leaves at the interior nodes of
    /// the 9×9 grid, with the parameter derivative taken on a grid of
    /// `count` nodes per axis.
    pub fn defect(&self, count: usize) -> f64 {
        let q_grid = Grid::cubic(2, 8).unwrap();
        let lg = LeafGrid::cube(2, 0.0, 1.0, count).unwrap();
        let raw = RawFoliation::from_fn(lg.clone(), &q_grid, |a, q| self.eta(a, q)).unwrap();
        let fol =
            build_foliation(FoliationSource::Data(raw), ClosednessTolerance::default()).unwrap();
        let cmap = c_map(&fol).unwrap();
        let gen = generating_function(&fol, &cmap).unwrap();
        assert!(gen.mixed_partial_defect <= 1e-10);
        let stride = (count - 1) / 8;
        let mut worst = 0.0f64;
        for i in 1..8 {
            for j in 1..8 {
                let leaf = lg.flat_index(&[i * stride, j * stride]);
                let a = lg.point(leaf);
                for l in 0..2 {
                    for d in 0..2 {
                        let num = gen.ds_da[leaf][l].derivative(d);
                        for (q, v) in q_grid.nodes().zip(num.samples()) {
                            worst = worst.max((v - self.mixed(&a, &q, d, l)).abs());
                        }
                    }
                }
            }
        }
        worst
    }
}

fn mixed_family() -> impl Strategy<Value = MixedFamily> {
    (0.02f64..0.1, 0.5f64..2.0, 0i32..=2, 1i32..=2).prop_map(|(alpha, gamma, k1, k2)| MixedFamily {
        alpha,
        gamma,
        k: [k1, k2],
    })
}

/// Centered parameter differences of `∂S/∂a` converge to the exact mixed
/// partials at second order: halving `δa` divides the defect by about 4.
pub fn mixed_partial_suite() -> Result<(), String> {
    run(mixed_family(), |fam| {
        let coarse = fam.defect(9);
        let fine = fam.defect(17);
        let ratio = fine / coarse;
        check((0.2..=0.3).contains(&ratio), || {
            format!("defect {coarse:e} -> {fine:e}, ratio {ratio}")
        })
    })
}

pub type Suite = (&'static str, fn() -> Result<(), String>);

pub const SUITES: [Suite; 6] = [
    ("spectral round trip and potential recovery", spectral_suite),
    ("bracket antisymmetry and Leibniz", bracket_suite),
    ("flow group law", group_law_suite),
    ("integrator symplecticity", symplecticity_suite),
    ("Hamilton-Jacobi residual", hamilton_jacobi_suite),
    ("mixed partials at second order", mixed_partial_suite),
];
