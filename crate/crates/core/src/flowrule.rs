//! Von Mises type nonassociative flow rule: yield function, plastic potential,
//! gap, infinitesimal dissipation and the linearized small-strain objects.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::material::{hessian_at_identity, thermo_force, MaterialParams};
use crate::real::Real;
use crate::tensor::Mat3;

/// Flow-rule constants with 𝔾 = g_0 𝕀 and the clamp r ≤ r_max.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConstants<T> {
    pub r_0: T,
    pub g_0: T,
    pub r_max: T,
}

impl<T: Real> Default for FlowConstants<T> {
    fn default() -> Self {
        Self {
            r_0: T::lit(0.02),
            g_0: T::lit(0.25),
            r_max: T::lit(0.05),
        }
    }
}

impl<T: Real> FlowConstants<T> {
    pub fn new(r_0: T, g_0: T, r_max: T) -> Result<Self> {
        let fc = Self { r_0, g_0, r_max };
        fc.validate()?;
        Ok(fc)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r_0 > T::zero()) || !self.r_0.is_finite() {
            return Err(Error::InvalidFlowConstants(format!("r_0 = {} must be positive", self.r_0)));
        }
        if !(self.g_0 > T::zero()) || self.g_0 * T::lit(3.0) > T::one() {
            return Err(Error::InvalidFlowConstants(format!(
                "g_0 = {} must lie in (0, 1/3] so that |G| = 3 g_0 <= 1",
                self.g_0
            )));
        }
        if !(self.r_max >= self.r_0) || !self.r_max.is_finite() {
            return Err(Error::InvalidFlowConstants(format!(
                "r_max = {} must be >= r_0 = {}",
                self.r_max, self.r_0
            )));
        }
        Ok(())
    }

    /// Nondegeneracy constant r_1 = min(r_0, 1/r_max).
    pub fn r1(&self) -> T {
        self.r_0.min(self.r_max.recip())
    }

    /// Constants of the rescaled yield function f_ε (thresholds scaled by ε).
    pub fn scaled(&self, eps: T) -> Self {
        Self {
            r_0: self.r_0 * eps,
            g_0: self.g_0,
            r_max: self.r_max * eps,
        }
    }
}

/// Value of the infinitesimal dissipation: finite on isochoric rates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Rate<T> {
    Finite(T),
    Infinite,
}

impl<T: Real> Rate<T> {
    pub fn finite(self) -> Option<T> {
        match self {
            Rate::Finite(v) => Some(v),
            Rate::Infinite => None,
        }
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, Rate::Infinite)
    }
}

fn stress_deviator<T: Real>(p: &Mat3<T>, n: &Mat3<T>) -> Mat3<T> {
    (*n * p.transpose()).deviator()
}

/// f(P, N) = g_0 |dev(N Pᵀ)| − r_0.
pub fn yield_f<T: Real>(p: &Mat3<T>, n: &Mat3<T>, fc: &FlowConstants<T>) -> T {
    fc.g_0 * stress_deviator(p, n).norm() - fc.r_0
}

/// g(P, N) = |dev(N Pᵀ)|.
pub fn potential_g<T: Real>(p: &Mat3<T>, n: &Mat3<T>) -> T {
    stress_deviator(p, n).norm()
}

/// r(P, N) = min(r_0 + (1 − g_0)|dev(N Pᵀ)|, r_max).
pub fn gap_r<T: Real>(p: &Mat3<T>, n: &Mat3<T>, fc: &FlowConstants<T>) -> T {
    gap_from_norm(stress_deviator(p, n).norm(), fc)
}

pub(crate) fn gap_from_norm<T: Real>(dev_norm: T, fc: &FlowConstants<T>) -> T {
    (fc.r_0 + (T::one() - fc.g_0) * dev_norm).min(fc.r_max)
}

/// Tolerance for the isochoric test tr(L) = 0.
pub(crate) fn trace_tol<T: Real>(l: &Mat3<T>) -> T {
    let base = if std::mem::size_of::<T>() < 8 { 1e-5 } else { 1e-10 };
    T::lit(base) * (T::one() + l.norm())
}

/// R(F, P, Ṗ) = r(P, N(F, P)) |Ṗ P⁻¹| on isochoric rates, infinite otherwise.
#[allow(non_snake_case)]
pub fn infinitesimal_R<T: Real>(
    f: &Mat3<T>,
    p: &Mat3<T>,
    pdot: &Mat3<T>,
    params: &MaterialParams<T>,
) -> Result<Rate<T>> {
    let pinv = p.try_inverse().ok_or(Error::SingularP)?;
    let l = *pdot * pinv;
    if l.trace().abs() > trace_tol(&l) {
        return Ok(Rate::Infinite);
    }
    let ln = l.norm();
    if ln.is_zero() {
        return Ok(Rate::Finite(T::zero()));
    }
    let n = thermo_force(f, p, params)?;
    Ok(Rate::Finite(gap_r(p, &n, &params.flow) * ln))
}

/// ∂_N g(P, N) = S P / |S| with S = dev(N Pᵀ); `None` where g is not differentiable.
pub fn potential_gradient<T: Real>(p: &Mat3<T>, n: &Mat3<T>) -> Option<Mat3<T>> {
    let s = stress_deviator(p, n);
    let sn = s.norm();
    let tol = T::lit(1e-14) * (T::one() + n.norm() * p.norm());
    if sn <= tol {
        None
    } else {
        Some(s * *p * sn.recip())
    }
}

/// Residual of the complementarity system Ṗ = ζ ∂_N g, ζ ≥ 0, f ≤ 0, ζ f = 0:
/// max(f, 0) + |ζ f| + |Ṗ − ζ ∂_N g| with ζ the least-squares multiplier
/// clipped at zero. Vanishes exactly at solutions.
pub fn complementarity_residual<T: Real>(
    p: &Mat3<T>,
    n: &Mat3<T>,
    pdot: &Mat3<T>,
    fc: &FlowConstants<T>,
) -> Result<T> {
    let f = yield_f(p, n, fc);
    let feas = f.max(T::zero());
    if pdot.norm().is_zero() {
        return Ok(feas);
    }
    let dg = potential_gradient(p, n).ok_or(Error::DegenerateGradient)?;
    let zeta = (pdot.dot(&dg) / dg.dot(&dg)).max(T::zero());
    Ok(feas + (zeta * f).abs() + (*pdot - dg * zeta).norm())
}

/// Fourth-order tensor acting on 3×3 matrices (row-major flattened indices).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor4<T> {
    pub c: [[T; 9]; 9],
}

impl<T: Real> Tensor4<T> {
    pub fn apply(&self, m: &Mat3<T>) -> Mat3<T> {
        let x = m.to_array();
        let mut out = [T::zero(); 9];
        for (a, o) in out.iter_mut().enumerate() {
            *o = (0..9).map(|b| self.c[a][b] * x[b]).sum();
        }
        Mat3::from_array(out)
    }

    /// C_{ijkl} with i, j, k, l ∈ 0..3.
    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> T {
        self.c[3 * i + j][3 * k + l]
    }

    pub fn major_asymmetry(&self) -> T {
        let mut worst = T::zero();
        for a in 0..9 {
            for b in 0..9 {
                worst = worst.max((self.c[a][b] - self.c[b][a]).abs());
            }
        }
        worst
    }

    pub fn minor_asymmetry(&self) -> T {
        let mut worst = T::zero();
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    for l in 0..3 {
                        let v = self.get(i, j, k, l);
                        worst = worst
                            .max((v - self.get(j, i, k, l)).abs())
                            .max((v - self.get(i, j, l, k)).abs());
                    }
                }
            }
        }
        worst
    }
}

/// ℂ = ∂²W_e(I), ℍ = ∂²W_p(I) of the small-strain limit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearizedTensors<T> {
    pub c: Tensor4<T>,
    pub h: Tensor4<T>,
}

impl<T: Real> LinearizedTensors<T> {
    /// σ = ℂ (η − p)^s.
    pub fn sigma(&self, eta: &Mat3<T>, p: &Mat3<T>) -> Mat3<T> {
        self.c.apply(&(*eta - *p).sym())
    }

    /// n = σ − ℍ p.
    pub fn n(&self, eta: &Mat3<T>, p: &Mat3<T>) -> Mat3<T> {
        self.sigma(eta, p) - self.h.apply(p)
    }
}

/// Central second differences of the densities at I (step 1e-4).
pub fn linearized_tensors<T: Real>(params: &MaterialParams<T>) -> Result<LinearizedTensors<T>> {
    let step = T::lit(1e-4);
    let c = Tensor4 {
        c: hessian_at_identity(|f| params.elastic_stress(f), step),
    };
    let h = Tensor4 {
        c: hessian_at_identity(|p| params.plastic_stress(p), step),
    };
    let scale = T::one() + c.c.iter().flatten().fold(T::zero(), |m, v| m.max(v.abs()));
    let sym_tol = T::lit(1e-6) * scale;
    if c.major_asymmetry() > sym_tol || c.minor_asymmetry() > sym_tol {
        return Err(Error::IndefiniteHessian("C lacks major/minor symmetry".into()));
    }
    // positivity on the symmetric subspace (6 basis directions suffice via the
    // Gram matrix) and on all of R^{3x3} for H
    let sym_basis: Vec<Mat3<T>> = {
        let mut v = Vec::new();
        for i in 0..3 {
            for j in i..3 {
                let mut m = Mat3::zero();
                m[(i, j)] = T::one();
                m[(j, i)] = T::one();
                v.push(m);
            }
        }
        v
    };
    let full_basis: Vec<Mat3<T>> = (0..9)
        .map(|a| {
            let mut e = [T::zero(); 9];
            e[a] = T::one();
            Mat3::from_array(e)
        })
        .collect();
    if !gram_positive(&c, &sym_basis) {
        return Err(Error::IndefiniteHessian("C not positive on symmetric matrices".into()));
    }
    if !gram_positive(&h, &full_basis) {
        return Err(Error::IndefiniteHessian("H not positive definite".into()));
    }
    Ok(LinearizedTensors { c, h })
}

/// Cholesky test of the Gram matrix ⟨T b_i, b_j⟩ (symmetrized).
fn gram_positive<T: Real>(t: &Tensor4<T>, basis: &[Mat3<T>]) -> bool {
    let n = basis.len();
    let mut g = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        let tb = t.apply(&basis[i]);
        for j in 0..n {
            g[i][j] = tb.dot(&basis[j]).as_f64();
        }
    }
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (g[i][j] + g[j][i]);
            g[i][j] = v;
            g[j][i] = v;
        }
    }
    let mut l = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = g[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            if i == j {
                if s <= 0.0 {
                    return false;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    true
}

/// R_0(n, ṗ) = r(I, n)|ṗ| on traceless rates.
#[allow(non_snake_case)]
pub fn linearized_R0<T: Real>(n: &Mat3<T>, pdot: &Mat3<T>, fc: &FlowConstants<T>) -> Rate<T> {
    if pdot.trace().abs() > trace_tol(pdot) {
        return Rate::Infinite;
    }
    let pn = pdot.norm();
    if pn.is_zero() {
        return Rate::Finite(T::zero());
    }
    Rate::Finite(gap_r(&Mat3::identity(), n, fc) * pn)
}
