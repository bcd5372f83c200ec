//! Hamiltonian models: user expressions and built-in integrable families
//! with closed-form oracles.

mod expr;

pub use expr::{parse_hamiltonian, ExpressionProgram};

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::torus::PhasePoint;

/// Fixed-point tolerance and iteration cap for inverting `ψ = id + v`.
const PSI_INV_TOL: f64 = 1e-14;
const PSI_INV_MAX_ITER: usize = 200;

/// A Hamiltonian `H(q, p)` on `T*Tⁿ` with exact symbolic derivatives.
#[derive(Clone, Debug)]
pub struct HamiltonianModel {
    name: String,
    program: ExpressionProgram,
    oracle: Option<Oracle>,
}

impl HamiltonianModel {
    pub fn from_expression(text: &str, n: usize) -> Result<Self> {
        Ok(HamiltonianModel {
            name: text.to_string(),
            program: parse_hamiltonian(text, n)?,
            oracle: None,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.program.dim()
    }

    pub fn program(&self) -> &ExpressionProgram {
        &self.program
    }

    pub fn oracle(&self) -> Option<&Oracle> {
        self.oracle.as_ref()
    }

    /// Splits as `T(p) + V(q)`.
    pub fn is_separable(&self) -> bool {
        self.program.is_separable()
    }

    pub fn value(&self, q: &[f64], p: &[f64]) -> Result<f64> {
        self.program.eval(q, p)
    }

    /// Value and `(∂H/∂q, ∂H/∂p)`.
    pub fn gradient(&self, q: &[f64], p: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.program.eval_gradient(q, p)
    }

    /// Value, gradient and row-major `2n × 2n` Hessian.
    pub fn hessian(&self, q: &[f64], p: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        self.program.eval_hessian(q, p)
    }

    /// `X_H = (∂H/∂p, −∂H/∂q)`.
    pub fn vector_field(&self, q: &[f64], p: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim();
        let (_, g) = self.gradient(q, p)?;
        let mut out = g[n..].to_vec();
        out.extend(g[..n].iter().map(|v| -v));
        Ok(out)
    }

    /// The model `self · other`, without oracle.
    pub fn product(&self, other: &HamiltonianModel) -> Result<HamiltonianModel> {
        same_dim(self, other)?;
        let text = format!("({})*({})", self.program.source(), other.program.source());
        HamiltonianModel::from_expression(&text, self.dim())
    }
}

/// Value and `2n` gradient of `model` at `x`.
pub fn eval_model(model: &HamiltonianModel, x: &PhasePoint) -> Result<(f64, Vec<f64>)> {
    model.gradient(&x.q, &x.p)
}

fn same_dim(f: &HamiltonianModel, g: &HamiltonianModel) -> Result<()> {
    if f.dim() != g.dim() {
        return Err(Error::DimensionMismatch(format!(
            "models of dimension {} and {}",
            f.dim(),
            g.dim()
        )));
    }
    Ok(())
}

/// `{F, G} = Σ ∂F/∂q_i ∂G/∂p_i − ∂F/∂p_i ∂G/∂q_i`.
///
/// Each term is formed as a single difference so that swapping `F` and `G`
/// negates the result bit for bit.
pub fn poisson_bracket(f: &HamiltonianModel, g: &HamiltonianModel, x: &PhasePoint) -> Result<f64> {
    same_dim(f, g)?;
    let (_, df) = eval_model(f, x)?;
    let (_, dg) = eval_model(g, x)?;
    Ok(bracket_from_gradients(&df, &dg))
}

pub(crate) fn bracket_from_gradients(df: &[f64], dg: &[f64]) -> f64 {
    let n = df.len() / 2;
    (0..n).map(|i| df[i] * dg[n + i] - df[n + i] * dg[i]).sum()
}

/// Parameters of the built-in families.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Perturbation size for `twisted` and `pendulum`.
    #[serde(default)]
    pub eps: Option<f64>,
    /// Kinetic term `h(p)` for `separable`; defaults to `½‖p‖²`.
    #[serde(default)]
    pub h: Option<String>,
}

/// Built-in families: `separable`, `twisted` and `pendulum`.
pub fn builtin_model(family: &str, n: usize, params: &ModelParams) -> Result<HamiltonianModel> {
    match family {
        "separable" => {
            let h = params.h.clone().unwrap_or_else(|| kinetic(n));
            separable(&h, n)
        }
        "twisted" => twisted(params.eps.unwrap_or(0.1), n),
        "pendulum" => pendulum(params.eps.unwrap_or(0.1), n),
        other => Err(Error::BadParameters(format!(
            "unknown model family `{other}`"
        ))),
    }
}

/// Model configuration document `{n, family | expression, parameters}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n: usize,
    #[serde(default)]
    pub family: Option<String>,
    #[serde(default)]
    pub expression: Option<String>,
    #[serde(default)]
    pub parameters: ModelParams,
}

impl ModelConfig {
    pub fn build(&self) -> Result<HamiltonianModel> {
        match (&self.family, &self.expression) {
            (Some(f), None) => builtin_model(f, self.n, &self.parameters),
            (None, Some(e)) => HamiltonianModel::from_expression(e, self.n),
            _ => Err(Error::BadParameters(
                "model configuration needs exactly one of `family` and `expression`".into(),
            )),
        }
    }
}

fn kinetic(n: usize) -> String {
    let terms: Vec<String> = (1..=n).map(|i| format!("p{i}^2")).collect();
    format!("0.5*({})", terms.join("+"))
}

/// `H = h(p)` with the trivial foliation `η_a = a` as oracle.
pub fn separable(h: &str, n: usize) -> Result<HamiltonianModel> {
    let program = parse_hamiltonian(h, n)?;
    if (0..n).any(|i| !program.structurally_independent_of(i)) {
        return Err(Error::BadParameters(format!(
            "separable kinetic term `{h}` depends on q"
        )));
    }
    Ok(HamiltonianModel {
        name: format!("separable: {h}"),
        oracle: Some(Oracle::Separable { h: program.clone() }),
        program,
    })
}

/// `H = ½‖p‖² + ε cos(2πq₁)`, without oracle.
pub fn pendulum(eps: f64, n: usize) -> Result<HamiltonianModel> {
    if !eps.is_finite() {
        return Err(Error::BadParameters(format!("eps = {eps}")));
    }
    let text = format!("{} + {eps:?}*cos(2*pi*q1)", kinetic(n));
    Ok(HamiltonianModel {
        name: format!("pendulum: eps={eps}"),
        program: parse_hamiltonian(&text, n)?,
        oracle: None,
    })
}

/// The twisted integrable model `H = ½‖p‖² ∘ Ψ⁻¹` on `T*T²`.
///
/// `Ψ(q, p) = (ψ(q), Dψ(q)⁻ᵀ(p + ∇u(q)))` with `ψ(q) = q + (s sin 2πq₂, 0)`,
/// `u(q) = s cos 2πq₁` and `s = ε/2π`. Since `ψ` only shears the first
/// coordinate by a function of the second, `ψ⁻¹(Q) = (Q₁ − s sin 2πQ₂, Q₂)`
/// and `H` is written in closed form.
pub fn twisted(eps: f64, n: usize) -> Result<HamiltonianModel> {
    if n != 2 {
        return Err(Error::BadParameters(format!(
            "twisted family is defined for n = 2, got {n}"
        )));
    }
    let twist = Twist::new(eps)?;
    let s = twist.s;
    let text = format!(
        "0.5*((p1 + {eps:?}*sin(2*pi*(q1 - {s:?}*sin(2*pi*q2))))^2 \
         + ({eps:?}*cos(2*pi*q2)*p1 + p2)^2)"
    );
    Ok(HamiltonianModel {
        name: format!("twisted: eps={eps}"),
        program: parse_hamiltonian(&text, 2)?,
        oracle: Some(Oracle::Twisted(twist)),
    })
}

/// Closed-form data of the twisted family.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Twist {
    pub eps: f64,
    s: f64,
}

impl Twist {
    pub fn new(eps: f64) -> Result<Self> {
        // ‖Dv‖_sup = |ε|; ψ stops being a diffeomorphism at 1
        if !eps.is_finite() || eps.abs() >= 1.0 {
            return Err(Error::BadParameters(format!(
                "twisted family needs |eps| < 1 (sup norm of Dv), got {eps}"
            )));
        }
        Ok(Twist {
            eps,
            s: eps / (2.0 * PI),
        })
    }

    pub fn psi(&self, q: &[f64]) -> Vec<f64> {
        vec![q[0] + self.s * (2.0 * PI * q[1]).sin(), q[1]]
    }

    /// `ψ⁻¹` by the fixed-point iteration `q ← Q − v(q)`; works on any lift.
    pub fn psi_inv(&self, big_q: &[f64]) -> Vec<f64> {
        let mut q = big_q.to_vec();
        for _ in 0..PSI_INV_MAX_ITER {
            let next = vec![big_q[0] - self.s * (2.0 * PI * q[1]).sin(), big_q[1]];
            let change = (next[0] - q[0]).abs().max((next[1] - q[1]).abs());
            q = next;
            if change <= PSI_INV_TOL {
                break;
            }
        }
        q
    }

    /// `Dψ(q)` row-major.
    pub fn dpsi(&self, q: &[f64]) -> [f64; 4] {
        [1.0, self.eps * (2.0 * PI * q[1]).cos(), 0.0, 1.0]
    }

    pub fn u(&self, q: &[f64]) -> f64 {
        self.s * (2.0 * PI * q[0]).cos()
    }

    pub fn grad_u(&self, q: &[f64]) -> [f64; 2] {
        [-self.eps * (2.0 * PI * q[0]).sin(), 0.0]
    }

    /// `Dψ(q)⁻ᵀ w`.
    fn dpsi_inv_t(&self, q: &[f64], w: [f64; 2]) -> Vec<f64> {
        let c = self.eps * (2.0 * PI * q[1]).cos();
        vec![w[0], w[1] - c * w[0]]
    }

    /// `Ψ(q, p)`.
    pub fn phase_map(&self, x: &PhasePoint) -> PhasePoint {
        let du = self.grad_u(&x.q);
        let w = [x.p[0] + du[0], x.p[1] + du[1]];
        PhasePoint::new(self.psi(&x.q), self.dpsi_inv_t(&x.q, w))
    }

    /// `Ψ⁻¹(Q, P) = (q, Dψ(q)ᵀP − ∇u(q))` with `q = ψ⁻¹(Q)`.
    pub fn phase_map_inv(&self, x: &PhasePoint) -> PhasePoint {
        let q = self.psi_inv(&x.q);
        let d = self.dpsi(&q);
        let du = self.grad_u(&q);
        let p = vec![
            d[0] * x.p[0] + d[2] * x.p[1] - du[0],
            d[1] * x.p[0] + d[3] * x.p[1] - du[1],
        ];
        PhasePoint::new(q, p)
    }

    /// Leaf `η'_a(Q) = Dψ(q)⁻ᵀ(a + ∇u(q))`, `q = ψ⁻¹(Q)`.
    pub fn leaf(&self, a: &[f64], big_q: &[f64]) -> Vec<f64> {
        let q = self.psi_inv(big_q);
        let du = self.grad_u(&q);
        self.dpsi_inv_t(&q, [a[0] + du[0], a[1] + du[1]])
    }

    /// Generating function `S(Q, a)`, normalised `S(0, a) = 0`.
    pub fn generating_function(&self, a: &[f64], big_q: &[f64]) -> f64 {
        let raw = |x: &[f64]| {
            let q = self.psi_inv(x);
            a[0] * (q[0] - x[0]) + a[1] * (q[1] - x[1]) + self.u(&q)
        };
        raw(big_q) - raw(&[0.0, 0.0])
    }

    /// `∂S/∂a(Q) = ψ⁻¹(Q) − Q − ψ⁻¹(0)`, independent of `a`.
    pub fn ds_da(&self, big_q: &[f64]) -> Vec<f64> {
        let q = self.psi_inv(big_q);
        let q0 = self.psi_inv(&[0.0, 0.0]);
        vec![q[0] - big_q[0] - q0[0], q[1] - big_q[1] - q0[1]]
    }
}

/// Closed forms attached to a built-in model.
#[derive(Clone, Debug)]
pub enum Oracle {
    /// `H = h(p)`: `η_a = a`, `c(a) = a`, `A = h`, `ρ = ∇h`, `g_a = id`.
    Separable { h: ExpressionProgram },
    /// The twisted family: `c(a) = a`, `A = ½‖c‖²`, `ρ = a`,
    /// `g_a = ψ⁻¹ − ψ⁻¹(0)`.
    Twisted(Twist),
}

impl Oracle {
    fn h_gradient(h: &ExpressionProgram, p: &[f64]) -> Result<(f64, Vec<f64>)> {
        let n = h.dim();
        let (v, g) = h.eval_gradient(&vec![0.0; n], p)?;
        Ok((v, g[n..].to_vec()))
    }

    /// Leaf `η_a(q)`.
    pub fn leaf(&self, a: &[f64], q: &[f64]) -> Vec<f64> {
        match self {
            Oracle::Separable { .. } => a.to_vec(),
            Oracle::Twisted(t) => t.leaf(a, q),
        }
    }

    pub fn c_map(&self, a: &[f64]) -> Vec<f64> {
        a.to_vec()
    }

    pub fn a_function(&self, c: &[f64]) -> Result<f64> {
        match self {
            Oracle::Separable { h } => Ok(Self::h_gradient(h, c)?.0),
            Oracle::Twisted(_) => Ok(0.5 * c.iter().map(|v| v * v).sum::<f64>()),
        }
    }

    pub fn rotation(&self, a: &[f64]) -> Result<Vec<f64>> {
        match self {
            Oracle::Separable { h } => Ok(Self::h_gradient(h, a)?.1),
            Oracle::Twisted(_) => Ok(a.to_vec()),
        }
    }

    /// Conjugacy `g_a(q)` in cover coordinates with `g_a(0) = 0`.
    pub fn conjugacy(&self, _a: &[f64], q: &[f64]) -> Vec<f64> {
        match self {
            Oracle::Separable { .. } => q.to_vec(),
            Oracle::Twisted(t) => {
                let x = t.psi_inv(q);
                let x0 = t.psi_inv(&[0.0, 0.0]);
                vec![x[0] - x0[0], x[1] - x0[1]]
            }
        }
    }

    /// `S(q, a)`.
    pub fn generating_function(&self, a: &[f64], q: &[f64]) -> f64 {
        match self {
            Oracle::Separable { .. } => 0.0,
            Oracle::Twisted(t) => t.generating_function(a, q),
        }
    }

    /// `∂S/∂a(q, a)`.
    pub fn ds_da(&self, a: &[f64], q: &[f64]) -> Vec<f64> {
        match self {
            Oracle::Separable { .. } => vec![0.0; a.len()],
            Oracle::Twisted(t) => t.ds_da(q),
        }
    }

    /// Lifted leaf flow `F_t^a(q)`.
    pub fn leaf_flow(&self, a: &[f64], q: &[f64], t: f64) -> Result<Vec<f64>> {
        match self {
            Oracle::Separable { .. } => {
                let rho = self.rotation(a)?;
                Ok(q.iter().zip(&rho).map(|(x, r)| x + t * r).collect())
            }
            Oracle::Twisted(tw) => {
                let x = tw.psi_inv(q);
                Ok(tw.psi(&[x[0] + t * a[0], x[1] + t * a[1]]))
            }
        }
    }

    /// Hamiltonian flow `φ_t(x)` with `q` left unwrapped.
    pub fn flow(&self, x: &PhasePoint, t: f64) -> Result<PhasePoint> {
        match self {
            Oracle::Separable { h } => {
                let (_, g) = Self::h_gradient(h, &x.p)?;
                let q = x.q.iter().zip(&g).map(|(a, b)| a + t * b).collect();
                Ok(PhasePoint::new(q, x.p.clone()))
            }
            Oracle::Twisted(tw) => {
                let y = tw.phase_map_inv(x);
                let q = vec![y.q[0] + t * y.p[0], y.q[1] + t * y.p[1]];
                Ok(tw.phase_map(&PhasePoint::new(q, y.p)))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pt(q: [f64; 2], p: [f64; 2]) -> PhasePoint {
        PhasePoint::new(q.to_vec(), p.to_vec())
    }

    #[test]
    fn model_config_documents() {
        let m: ModelConfig =
            serde_json::from_str(r#"{"n":2,"family":"twisted","parameters":{"eps":0.1}}"#).unwrap();
        assert!(m.build().unwrap().oracle().is_some());
        let m: ModelConfig =
            serde_json::from_str(r#"{"n":1,"expression":"0.5*p1^2+cos(2*pi*q1)"}"#).unwrap();
        assert_eq!(m.build().unwrap().dim(), 1);
        let m: ModelConfig =
            serde_json::from_str(r#"{"n":1,"family":"separable","expression":"p1"}"#).unwrap();
        assert!(matches!(m.build(), Err(Error::BadParameters(_))));
    }

    #[test]
    fn trivial_family_values() {
        let m = builtin_model("separable", 2, &ModelParams::default()).unwrap();
        let (v, g) = eval_model(&m, &pt([0.0, 0.0], [0.3, 0.7])).unwrap();
        assert!((v - 0.29).abs() < 1e-15);
        assert_eq!(g, vec![0.0, 0.0, 0.3, 0.7]);
        let rho = m.oracle().unwrap().rotation(&[0.3, 0.7]).unwrap();
        assert_eq!(rho, vec![0.3, 0.7]);
        let xh = m.vector_field(&[0.1, 0.2], &[0.3, 0.7]).unwrap();
        assert_eq!(xh, vec![0.3, 0.7, -0.0, -0.0]);
    }

    #[test]
    fn brackets_of_reference_pairs() {
        let h1 = HamiltonianModel::from_expression("p1+sin(2*pi*q2)", 2).unwrap();
        let h2 = HamiltonianModel::from_expression("p2", 2).unwrap();
        let x = pt([0.3, 0.0], [0.1, 0.2]);
        assert!((poisson_bracket(&h1, &h2, &x).unwrap() - 2.0 * PI).abs() < 1e-13);
        assert_eq!(poisson_bracket(&h1, &h1, &x).unwrap(), 0.0);
        let h = builtin_model("separable", 2, &ModelParams::default()).unwrap();
        let p1 = HamiltonianModel::from_expression("p1", 2).unwrap();
        assert_eq!(poisson_bracket(&h, &p1, &x).unwrap(), 0.0);
        let h3 = HamiltonianModel::from_expression("p1", 3).unwrap();
        assert!(matches!(
            poisson_bracket(&h1, &h3, &x),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn twisted_parameter_validation() {
        let bad = ModelParams {
            eps: Some(8.0),
            h: None,
        };
        assert!(matches!(
            builtin_model("twisted", 2, &bad),
            Err(Error::BadParameters(_))
        ));
        assert!(matches!(
            builtin_model("twisted", 3, &ModelParams::default()),
            Err(Error::BadParameters(_))
        ));
        assert!(matches!(
            builtin_model("nonesuch", 2, &ModelParams::default()),
            Err(Error::BadParameters(_))
        ));
        assert!(matches!(
            separable("p1^2 + q1", 1),
            Err(Error::BadParameters(_))
        ));
    }

    #[test]
    fn twisted_hamiltonian_is_kinetic_energy_after_change_of_variables() {
        let m = twisted(0.1, 2).unwrap();
        let Some(Oracle::Twisted(tw)) = m.oracle() else {
            panic!("twisted oracle expected")
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let x = pt(
                [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)],
                [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
            );
            let y = tw.phase_map(&x);
            let h = m.value(&y.q, &y.p).unwrap();
            let k = 0.5 * (x.p[0] * x.p[0] + x.p[1] * x.p[1]);
            assert!((h - k).abs() < 1e-12);
            let back = tw.phase_map_inv(&y);
            for i in 0..2 {
                assert!((back.q[i] - x.q[i]).abs() < 1e-13);
                assert!((back.p[i] - x.p[i]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn twisted_leaves_are_invariant_energy_levels() {
        // H is constant on the oracle leaf and equals A(c) = ½‖a‖²
        let m = twisted(0.1, 2).unwrap();
        let o = m.oracle().unwrap();
        let a = [0.3, 0.5];
        for i in 0..16 {
            for j in 0..16 {
                let q = [i as f64 / 16.0, j as f64 / 16.0];
                let p = o.leaf(&a, &q);
                let h = m.value(&q, &p).unwrap();
                assert!((h - 0.17).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn psi_inverse_and_periodicity() {
        let t = Twist::new(0.1).unwrap();
        for q in [[0.1, 0.2], [0.9, 0.75], [-1.3, 2.6]] {
            let back = t.psi(&t.psi_inv(&q));
            assert!((back[0] - q[0]).abs() < 1e-14 && (back[1] - q[1]).abs() < 1e-14);
        }
        assert_eq!(t.psi_inv(&[0.0, 0.0]), vec![0.0, 0.0]);
        let m = twisted(0.1, 2).unwrap();
        let (v0, _) = m.gradient(&[0.2, 0.3], &[0.4, -0.1]).unwrap();
        let (v1, _) = m.gradient(&[1.2, -0.7], &[0.4, -0.1]).unwrap();
        assert!((v0 - v1).abs() < 1e-13);
    }

    #[test]
    fn twisted_generating_function_derivative_is_leaf_minus_class() {
        let t = Twist::new(0.1).unwrap();
        let a = [0.3, 0.5];
        let d = 1e-5;
        for q in [[0.13, 0.71], [0.5, 0.05], [0.88, 0.4]] {
            let eta = t.leaf(&a, &q);
            for j in 0..2 {
                let mut qp = q;
                let mut qm = q;
                qp[j] += d;
                qm[j] -= d;
                let fd =
                    (t.generating_function(&a, &qp) - t.generating_function(&a, &qm)) / (2.0 * d);
                assert!((fd - (eta[j] - a[j])).abs() < 1e-9);
            }
            let ap = [a[0] + d, a[1]];
            let am = [a[0] - d, a[1]];
            let fd = (t.generating_function(&ap, &q) - t.generating_function(&am, &q)) / (2.0 * d);
            assert!((fd - t.ds_da(&q)[0]).abs() < 1e-9);
        }
    }
}
