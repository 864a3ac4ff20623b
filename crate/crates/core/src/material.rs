//! Energy densities, constitutive forces and the discrete stored energy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowrule::FlowConstants;
use crate::grid::Grid;
use crate::real::Real;
use crate::tensor::{Mat3, Mat33};

/// User-facing coefficients of the polyconvex preset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterialCoefficients<T> {
    /// weight of |F_e|²
    pub alpha: T,
    /// weight of |cof F_e|²
    pub beta: T,
    /// weight of (det F_e − 1)²
    pub gamma_det: T,
    /// weight of |F_e|^{q_e}
    pub delta: T,
    /// quadratic plastic hardening
    pub h_p: T,
    /// weight of |P|^{q_p}
    pub c_p: T,
    /// gradient-plasticity weight μ
    pub mu: T,
    pub q: T,
    pub q_e: T,
    pub q_p: T,
    pub q_r: T,
}

impl<T: Real> Default for MaterialCoefficients<T> {
    fn default() -> Self {
        Self {
            alpha: T::lit(0.5),
            beta: T::lit(0.25),
            gamma_det: T::lit(1.0),
            delta: T::lit(1e-3),
            h_p: T::lit(0.2),
            c_p: T::lit(1e-3),
            mu: T::lit(0.01),
            q: T::lit(4.0),
            q_e: T::lit(8.0),
            q_p: T::lit(8.0),
            q_r: T::lit(4.0),
        }
    }
}

/// Coefficients plus the derived stationarity corrections and flow constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterialParams<T> {
    pub coeffs: MaterialCoefficients<T>,
    pub flow: FlowConstants<T>,
    zeta: T,
    w0: T,
    s_p: T,
    p_offset: T,
}

impl<T: Real> MaterialParams<T> {
    /// Derives ζ, w0, s_p and the plastic offset so both densities vanish with
    /// zero gradient at the identity. Exponents are checked by [`validate_params`].
    pub fn new(coeffs: MaterialCoefficients<T>, flow: FlowConstants<T>) -> Result<Self> {
        flow.validate()?;
        let c = &coeffs;
        let three = T::lit(3.0);
        let two = T::lit(2.0);
        let d = c.delta * c.q_e * three.powf((c.q_e - two) / two);
        let zeta = -(two * c.alpha + T::lit(4.0) * c.beta + d);
        let w0 = -(three * c.alpha + three * c.beta + c.delta * three.powf(c.q_e / two) + zeta);
        let s_p = -c.c_p * three.powf((c.q_p - two) / two);
        let p_offset = -(c.c_p / c.q_p) * three.powf(c.q_p / two) - three * s_p;
        let p = Self {
            coeffs,
            flow,
            zeta,
            w0,
            s_p,
            p_offset,
        };
        if ![zeta, w0, s_p, p_offset].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidExponents("derived coefficients are not finite".into()));
        }
        Ok(p)
    }

    pub fn zeta(&self) -> T {
        self.zeta
    }

    pub fn w0(&self) -> T {
        self.w0
    }

    pub fn s_p(&self) -> T {
        self.s_p
    }

    pub fn plastic_offset(&self) -> T {
        self.p_offset
    }

    /// W_e(F_e).
    pub fn elastic_density(&self, fe: &Mat3<T>) -> T {
        let c = &self.coeffs;
        let n2 = fe.dot(fe);
        let cof = fe.cofactor();
        let det = fe.det();
        let dm1 = det - T::one();
        c.alpha * n2
            + c.beta * cof.dot(&cof)
            + c.gamma_det * dm1 * dm1
            + c.delta * n2.powf(c.q_e / T::lit(2.0))
            + self.zeta * det
            + self.w0
    }

    /// ∂W_e/∂F_e.
    pub fn elastic_stress(&self, fe: &Mat3<T>) -> Mat3<T> {
        let c = &self.coeffs;
        let two = T::lit(2.0);
        let n2 = fe.dot(fe);
        let cof = fe.cofactor();
        let det = fe.det();
        let cof_term = (*fe * n2 - *fe * (fe.transpose() * *fe)) * (two * c.beta);
        let growth = if n2.is_zero() {
            T::zero()
        } else {
            c.delta * c.q_e * n2.powf((c.q_e - two) / two)
        };
        *fe * (two * c.alpha + growth)
            + cof_term
            + cof * (two * c.gamma_det * (det - T::one()) + self.zeta)
    }

    /// W_p(P).
    pub fn plastic_density(&self, p: &Mat3<T>) -> T {
        let c = &self.coeffs;
        let d = *p - Mat3::identity();
        let n2 = p.dot(p);
        c.h_p / T::lit(2.0) * d.dot(&d)
            + c.c_p / c.q_p * n2.powf(c.q_p / T::lit(2.0))
            + self.s_p * p.trace()
            + self.p_offset
    }

    /// ∂W_p/∂P.
    pub fn plastic_stress(&self, p: &Mat3<T>) -> Mat3<T> {
        let c = &self.coeffs;
        let n2 = p.dot(p);
        let growth = if n2.is_zero() {
            T::zero()
        } else {
            c.c_p * n2.powf((c.q_p - T::lit(2.0)) / T::lit(2.0))
        };
        (*p - Mat3::identity()) * c.h_p + *p * growth + Mat3::identity() * self.s_p
    }

    /// (μ/q_r)|∇P|^{q_r}.
    pub fn gradient_density(&self, g: &Mat33<T>) -> T {
        let c = &self.coeffs;
        c.mu / c.q_r * g.dot(g).powf(c.q_r / T::lit(2.0))
    }

    /// μ|∇P|^{q_r−2}∇P.
    pub fn gradient_stress(&self, g: &Mat33<T>) -> Mat33<T> {
        let c = &self.coeffs;
        let n2 = g.dot(g);
        if n2.is_zero() {
            return Mat33::zero();
        }
        g.scale(c.mu * n2.powf((c.q_r - T::lit(2.0)) / T::lit(2.0)))
    }

    /// Local density W_e(F P⁻¹) + W_p(P) without the gradient term; used by
    /// finite-difference oracles, so it accepts any invertible P.
    pub fn local_density(&self, f: &Mat3<T>, p: &Mat3<T>) -> Result<T> {
        let pinv = p.try_inverse().ok_or(Error::SingularP)?;
        Ok(self.elastic_density(&(*f * pinv)) + self.plastic_density(p))
    }

    /// Convex extension 𝕎(F, C, d) with W_e(F) = 𝕎(F, cof F, det F).
    pub fn polyconvex_extension(&self, f: &Mat3<T>, cof: &Mat3<T>, det: T) -> T {
        let c = &self.coeffs;
        let n2 = f.dot(f);
        let dm1 = det - T::one();
        c.alpha * n2
            + c.beta * cof.dot(cof)
            + c.gamma_det * dm1 * dm1
            + c.delta * n2.powf(c.q_e / T::lit(2.0))
            + self.zeta * det
            + self.w0
    }

    /// r_1 = min(r_0, 1/r_max).
    pub fn r1(&self) -> T {
        self.flow.r1()
    }
}

impl MaterialParams<f64> {
    /// Default preset with default flow constants.
    pub fn preset() -> Self {
        Self::new(MaterialCoefficients::default(), FlowConstants::default())
            .expect("default preset is valid")
    }
}

/// W_e(F_e).
pub fn elastic_density<T: Real>(fe: &Mat3<T>, params: &MaterialParams<T>) -> T {
    params.elastic_density(fe)
}

/// W_p(P).
pub fn plastic_density<T: Real>(p: &Mat3<T>, params: &MaterialParams<T>) -> T {
    params.plastic_density(p)
}

fn checked_inverse<T: Real>(p: &Mat3<T>) -> Result<Mat3<T>> {
    let pinv = p.try_inverse().ok_or(Error::SingularP)?;
    p.check_sl3()?;
    Ok(pinv)
}

/// Π = ∂W_e(F P⁻¹) P⁻ᵀ.
pub fn first_piola<T: Real>(f: &Mat3<T>, p: &Mat3<T>, params: &MaterialParams<T>) -> Result<Mat3<T>> {
    let pinv = checked_inverse(p)?;
    Ok(params.elastic_stress(&(*f * pinv)) * pinv.transpose())
}

/// N = P⁻ᵀ Fᵀ ∂W_e(F P⁻¹) P⁻ᵀ − ∂W_p(P), i.e. −∂_P of the local density.
pub fn thermo_force<T: Real>(f: &Mat3<T>, p: &Mat3<T>, params: &MaterialParams<T>) -> Result<Mat3<T>> {
    let pinv = checked_inverse(p)?;
    let pinv_t = pinv.transpose();
    let fe = *f * pinv;
    Ok(pinv_t * f.transpose() * params.elastic_stress(&fe) * pinv_t - params.plastic_stress(p))
}

/// Direction on the nonhomogeneous unit sphere |z_e|^{q_e} + |z_p|^{q_p} + |z_r|^{q_r} = 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecessionDirection<T> {
    pub z_e: Mat3<T>,
    pub z_p: Mat3<T>,
    pub z_r: Mat33<T>,
}

impl<T: Real> RecessionDirection<T> {
    pub fn sphere_value(&self, params: &MaterialParams<T>) -> T {
        let c = &params.coeffs;
        self.z_e.norm().powf(c.q_e) + self.z_p.norm().powf(c.q_p) + self.z_r.norm().powf(c.q_r)
    }
}

/// W̃^∞(z) = δ|z_e|^{q_e} + (c_p/q_p)|z_p|^{q_p} + (μ/q_r)|z_r|^{q_r}.
pub fn recession_density<T: Real>(dir: &RecessionDirection<T>, params: &MaterialParams<T>) -> Result<T> {
    let s = dir.sphere_value(params);
    if (s - T::one()).abs() > T::lit(1e-8) {
        return Err(Error::Precondition(format!(
            "direction not on the nonhomogeneous unit sphere (value {s})"
        )));
    }
    let c = &params.coeffs;
    Ok(c.delta * dir.z_e.norm().powf(c.q_e)
        + c.c_p / c.q_p * dir.z_p.norm().powf(c.q_p)
        + c.mu / c.q_r * dir.z_r.norm().powf(c.q_r))
}

/// Scaled densities Σ W_•(s z_•)/s^{q_•}, term by term. Each term of the
/// nonhomogeneous scaling W(s^{q_p q_r} z_e, s^{q_e q_r} z_p, s^{q_e q_p} z_r)/s^{q_e q_p q_r}
/// equals the corresponding term here with its own scale, so both share the
/// limit W̃^∞ while this form avoids overflowing powers like s^{q_e q_p q_r}.
pub fn scaled_density<T: Real>(dir: &RecessionDirection<T>, params: &MaterialParams<T>, s: T) -> T {
    let c = &params.coeffs;
    params.elastic_density(&(dir.z_e * s)) / s.powf(c.q_e)
        + params.plastic_density(&(dir.z_p * s)) / s.powf(c.q_p)
        + params.gradient_density(&dir.z_r.scale(s)) / s.powf(c.q_r)
}

/// Constants produced by [`validate_params`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    /// W_e(F) ≥ −1/c₁ + c₁|F|^{q_e} and W_e(F) ≤ (1 + |F|^{q_e})/c₁.
    pub c1: f64,
    /// W_p(P) ≥ −1/c₂ + c₂|P|^{q_p}.
    pub c2: f64,
    pub r1: f64,
    /// smallest Rayleigh quotient of ℂ over sampled symmetric directions
    pub min_c_quotient: f64,
    /// smallest Rayleigh quotient of ℍ over sampled directions
    pub min_h_quotient: f64,
}

/// Hessian at the identity from central differences of an analytic gradient,
/// as a 9×9 matrix over row-major flattened indices.
pub fn hessian_at_identity<T: Real>(grad: impl Fn(&Mat3<T>) -> Mat3<T>, step: T) -> [[T; 9]; 9] {
    let mut h = [[T::zero(); 9]; 9];
    for (b, col) in (0..9).map(|b| (b, b)) {
        let mut e = [T::zero(); 9];
        e[b] = step;
        let e = Mat3::from_array(e);
        let d = (grad(&(Mat3::identity() + e)) - grad(&(Mat3::identity() - e))) * (T::lit(0.5) / step);
        for (a, v) in d.to_array().into_iter().enumerate() {
            h[a][col] = v;
        }
    }
    h
}

fn quadratic_form<T: Real>(h: &[[T; 9]; 9], v: &Mat3<T>) -> T {
    let x = v.to_array();
    let mut s = T::zero();
    for a in 0..9 {
        for b in 0..9 {
            s += x[a] * h[a][b] * x[b];
        }
    }
    s
}

/// Checks the exponent chain, stationarity and positivity of ℂ, ℍ at the
/// identity, and reports feasible coercivity constants c₁, c₂.
pub fn validate_params<T: Real>(params: &MaterialParams<T>) -> Result<ValidationReport> {
    let c = &params.coeffs;
    let (q, qe, qp, qr) = (c.q.as_f64(), c.q_e.as_f64(), c.q_p.as_f64(), c.q_r.as_f64());
    if !(qe > 1.0 && qp > 1.0 && q > 1.0) {
        return Err(Error::InvalidExponents(format!(
            "need q, q_e, q_p > 1 (got q={q}, q_e={qe}, q_p={qp})"
        )));
    }
    if 1.0 / qe + 1.0 / qp > 1.0 / q + 1e-12 {
        return Err(Error::InvalidExponents(format!(
            "1/q_e + 1/q_p = {} exceeds 1/q = {}",
            1.0 / qe + 1.0 / qp,
            1.0 / q
        )));
    }
    if 1.0 / q >= 1.0 / 3.0 {
        return Err(Error::InvalidExponents(format!("need 1/q < 1/3 (got q={q})")));
    }
    if qr <= 3.0 {
        return Err(Error::InvalidExponents(format!("need q_r > 3 (got q_r={qr})")));
    }
    if !(c.mu.as_f64() > 0.0) {
        return Err(Error::InvalidExponents("gradient weight mu must be positive".into()));
    }
    let coeffs = [
        ("alpha", c.alpha),
        ("beta", c.beta),
        ("gamma_det", c.gamma_det),
        ("delta", c.delta),
        ("h_p", c.h_p),
        ("c_p", c.c_p),
    ];
    for (name, v) in coeffs {
        if !(v.as_f64() >= 0.0) {
            return Err(Error::InvalidExponents(format!("{name} must be nonnegative")));
        }
    }
    if !(c.delta.as_f64() > 0.0) {
        return Err(Error::InsufficientGrowth(
            "delta = 0: no |F_e|^q_e growth to dominate the determinant terms".into(),
        ));
    }
    if !(c.c_p.as_f64() > 0.0) {
        return Err(Error::InsufficientGrowth("c_p = 0: no |P|^q_p growth".into()));
    }
    if qe < 6.0 && c.gamma_det.as_f64() > 0.0 {
        return Err(Error::InsufficientGrowth(format!(
            "q_e = {qe} < 6 cannot dominate the degree-6 determinant term"
        )));
    }

    let scale = 1.0 + c.alpha.as_f64() + c.beta.as_f64() + c.gamma_det.as_f64() + c.delta.as_f64();
    let ge = params.elastic_stress(&Mat3::identity()).norm().as_f64();
    let we = params.elastic_density(&Mat3::identity()).as_f64();
    let tol = 1e-10 * scale.max(1.0) * if std::mem::size_of::<T>() < 8 { 1e5 } else { 1.0 };
    if ge > tol || we.abs() > tol {
        return Err(Error::NonStationaryIdentity(format!(
            "elastic: |dW_e(I)| = {ge:e}, W_e(I) = {we:e}"
        )));
    }
    let gp = params.plastic_stress(&Mat3::identity()).norm().as_f64();
    let wp = params.plastic_density(&Mat3::identity()).as_f64();
    if gp > tol || wp.abs() > tol {
        return Err(Error::NonStationaryIdentity(format!(
            "plastic: |dW_p(I)| = {gp:e}, W_p(I) = {wp:e}"
        )));
    }

    let step = T::lit(1e-4);
    let hc = hessian_at_identity(|f| params.elastic_stress(f), step);
    let hh = hessian_at_identity(|p| params.plastic_stress(p), step);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut min_c = f64::INFINITY;
    let mut min_h = f64::INFINITY;
    for _ in 0..200 {
        let v = Mat3::<T>::random(&mut rng).sym();
        let v = v * v.norm().recip();
        min_c = min_c.min(quadratic_form(&hc, &v).as_f64());
        let w = Mat3::<T>::random(&mut rng);
        let w = w * w.norm().recip();
        min_h = min_h.min(quadratic_form(&hh, &w).as_f64());
    }
    // the volumetric direction is the weakest for this preset; include it explicitly
    let iso = Mat3::<T>::identity() * T::lit(1.0 / 3f64.sqrt());
    min_c = min_c.min(quadratic_form(&hc, &iso).as_f64());
    min_h = min_h.min(quadratic_form(&hh, &iso).as_f64());
    if !(min_c > 0.0) {
        return Err(Error::IndefiniteHessian(format!("C: min quotient {min_c:e}")));
    }
    if !(min_h > 0.0) {
        return Err(Error::IndefiniteHessian(format!("H: min quotient {min_h:e}")));
    }

    Ok(ValidationReport {
        c1: coercivity_c1(params),
        c2: coercivity_c2(params),
        r1: params.r1().as_f64(),
        min_c_quotient: min_c,
        min_h_quotient: min_h,
    })
}

/// Minimum of `f` over `[0, s_max]` by dense sampling, minus a safety margin.
fn sampled_min(f: impl Fn(f64) -> f64, s_max: f64) -> f64 {
    let n = 20000;
    let mut m = f64::INFINITY;
    for k in 0..=n {
        m = m.min(f(s_max * k as f64 / n as f64));
    }
    m - 1e-3 * m.abs() - 1e-9
}

fn coercivity_c1<T: Real>(params: &MaterialParams<T>) -> f64 {
    let c = &params.coeffs;
    let (a, b, g, d, qe) = (
        c.alpha.as_f64(),
        c.beta.as_f64(),
        c.gamma_det.as_f64(),
        c.delta.as_f64(),
        c.q_e.as_f64(),
    );
    let zeta = params.zeta.as_f64();
    let w0 = params.w0.as_f64();
    let k27 = 27f64.sqrt();
    // lower bound: W_e ≥ δ s^q_e − |ζ| s³/√27 + w0 ≥ (δ/2) s^q_e + m
    let phi = |s: f64| 0.5 * d * s.powf(qe) - zeta.abs() * s.powi(3) / k27 + w0;
    let s_turn = (6.0 * zeta.abs() / (k27 * d * qe)).powf(1.0 / (qe - 3.0));
    let m = sampled_min(phi, 2.0 * s_turn.max(5.0));
    let low = if m >= 0.0 { 0.5 * d } else { (0.5 * d).min(-1.0 / m) };
    // upper bound: W_e ≤ α s² + β s⁴/3 + γ (s³/√27 + 1)² + δ s^q_e + |ζ| s³/√27 + |w0|
    let upper = |s: f64| {
        a * s * s
            + b * s.powi(4) / 3.0
            + g * (s.powi(3) / k27 + 1.0).powi(2)
            + d * s.powf(qe)
            + zeta.abs() * s.powi(3) / k27
            + w0.abs()
    };
    let mut sup: f64 = 0.0;
    for k in 0..=4000 {
        let s = 10f64.powf(-3.0 + 7.0 * k as f64 / 4000.0);
        sup = sup.max(upper(s) / (1.0 + s.powf(qe)));
    }
    sup = sup.max(upper(0.0));
    low.min(1.0 / (sup * 1.001))
}

fn coercivity_c2<T: Real>(params: &MaterialParams<T>) -> f64 {
    let c = &params.coeffs;
    let (cp, qp) = (c.c_p.as_f64(), c.q_p.as_f64());
    let sp = params.s_p.as_f64();
    let off = params.p_offset.as_f64();
    // W_p ≥ (c_p/q_p) s^q_p − √3|s_p| s + off
    let k = cp / qp;
    let phi = |s: f64| 0.5 * k * s.powf(qp) - 3f64.sqrt() * sp.abs() * s + off;
    let s_turn = (2.0 * 3f64.sqrt() * sp.abs() / (k * qp)).powf(1.0 / (qp - 1.0));
    let m = sampled_min(phi, 2.0 * s_turn.max(5.0));
    if m >= 0.0 {
        0.5 * k
    } else {
        (0.5 * k).min(-1.0 / m)
    }
}

/// Grid-sampled admissible state (y, P) with cached gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateField<T> {
    y: Vec<[T; 3]>,
    p: Vec<Mat3<T>>,
    #[serde(skip)]
    grad_y: Vec<Mat3<T>>,
    #[serde(skip)]
    grad_p: Vec<Mat33<T>>,
    #[serde(skip)]
    fresh: bool,
}

impl<T: Real> StateField<T> {
    /// Checks the Dirichlet condition and det P = 1, then fills the caches.
    pub fn new(grid: &Grid<T>, y: Vec<[T; 3]>, p: Vec<Mat3<T>>) -> Result<Self> {
        if y.len() != grid.n_nodes() {
            return Err(Error::SizeMismatch {
                expected: grid.n_nodes(),
                got: y.len(),
            });
        }
        if p.len() != grid.n_cells() {
            return Err(Error::SizeMismatch {
                expected: grid.n_cells(),
                got: p.len(),
            });
        }
        for n in 0..grid.n_nodes() {
            if grid.is_dirichlet(n) && y[n] != grid.node_position(n) {
                return Err(Error::Precondition(format!("y differs from id at clamped node {n}")));
            }
        }
        for pc in &p {
            pc.check_sl3()?;
        }
        let mut s = Self {
            y,
            p,
            grad_y: Vec::new(),
            grad_p: Vec::new(),
            fresh: false,
        };
        s.refresh(grid)?;
        Ok(s)
    }

    /// y = id, P ≡ I.
    pub fn identity(grid: &Grid<T>) -> Self {
        Self::new(grid, grid.identity_y(), vec![Mat3::identity(); grid.n_cells()])
            .expect("identity state is admissible")
    }

    pub fn y(&self) -> &[[T; 3]] {
        &self.y
    }

    pub fn p(&self) -> &[Mat3<T>] {
        &self.p
    }

    /// Replaces y; clamped nodes are reset to the identity. Invalidates caches.
    pub fn set_y(&mut self, grid: &Grid<T>, mut y: Vec<[T; 3]>) -> Result<()> {
        if y.len() != grid.n_nodes() {
            return Err(Error::SizeMismatch {
                expected: grid.n_nodes(),
                got: y.len(),
            });
        }
        for (n, v) in y.iter_mut().enumerate() {
            if grid.is_dirichlet(n) {
                *v = grid.node_position(n);
            }
        }
        self.y = y;
        self.fresh = false;
        Ok(())
    }

    /// Replaces P; each cell must lie in SL(3). Invalidates caches.
    pub fn set_p(&mut self, p: Vec<Mat3<T>>) -> Result<()> {
        if p.len() != self.p.len() {
            return Err(Error::SizeMismatch {
                expected: self.p.len(),
                got: p.len(),
            });
        }
        for pc in &p {
            pc.check_sl3()?;
        }
        self.p = p;
        self.fresh = false;
        Ok(())
    }

    pub fn refresh(&mut self, grid: &Grid<T>) -> Result<()> {
        self.grad_y = grid.gradient_y(&self.y)?;
        self.grad_p = grid.gradient_p(&self.p)?;
        self.fresh = true;
        Ok(())
    }

    pub fn is_fresh(&self) -> bool {
        self.fresh
    }

    pub fn grad_y(&self) -> Result<&[Mat3<T>]> {
        if self.fresh {
            Ok(&self.grad_y)
        } else {
            Err(Error::StaleCache)
        }
    }

    pub fn grad_p(&self) -> Result<&[Mat33<T>]> {
        if self.fresh {
            Ok(&self.grad_p)
        } else {
            Err(Error::StaleCache)
        }
    }
}

/// Energy density of one cell: W_e(∇y P⁻¹) + W_p(P) + (μ/q_r)|∇P|^{q_r}.
pub fn cell_energy<T: Real>(
    params: &MaterialParams<T>,
    grad_y: &Mat3<T>,
    p: &Mat3<T>,
    grad_p: &Mat33<T>,
) -> Result<T> {
    let pinv = p.try_inverse().ok_or(Error::SingularP)?;
    Ok(params.elastic_density(&(*grad_y * pinv))
        + params.plastic_density(p)
        + params.gradient_density(grad_p))
}

/// Stored energy of the medium by one-point quadrature per cell.
pub fn stored_energy<T: Real>(
    state: &StateField<T>,
    grid: &Grid<T>,
    params: &MaterialParams<T>,
) -> Result<T> {
    let gy = state.grad_y()?;
    let gp = state.grad_p()?;
    let p = state.p();
    if gy.len() != grid.n_cells() {
        return Err(Error::GridMismatch);
    }
    let vals: Result<Vec<T>> = (0..grid.n_cells())
        .into_par_iter()
        .map(|c| cell_energy(params, &gy[c], &p[c], &gp[c]))
        .collect();
    Ok(vals?.into_iter().sum::<T>() * grid.cell_volume())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Face;
    use crate::tensor::{mat_exp, TracelessMat3};
    use rand::Rng;

    fn preset() -> MaterialParams<f64> {
        MaterialParams::preset()
    }

    #[test]
    fn densities_vanish_at_identity() {
        let p = preset();
        let i = Mat3::identity();
        assert!(p.elastic_density(&i).abs() < 1e-14);
        assert!(p.plastic_density(&i).abs() < 1e-14);
        assert!(p.elastic_stress(&i).norm() < 1e-12);
        assert!(p.plastic_stress(&i).norm() < 1e-12);
        assert!(first_piola(&i, &i, &p).unwrap().norm() < 1e-12);
        assert!(thermo_force(&i, &i, &p).unwrap().norm() < 1e-12);
    }

    #[test]
    fn elastic_growth_limit() {
        let p = preset();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = Mat3::<f64>::random(&mut rng);
        let lim = p.coeffs.delta * f.norm().powf(p.coeffs.q_e);
        let rel = |s: f64| (p.elastic_density(&(f * s)) / s.powf(p.coeffs.q_e) - lim).abs() / lim;
        assert!(rel(100.0) < 1e-2 && rel(1000.0) < 1e-4);
        assert!(rel(1000.0) < rel(100.0) && rel(100.0) < rel(10.0));
        let pm = Mat3::<f64>::random(&mut rng);
        let limp = p.coeffs.c_p / p.coeffs.q_p * pm.norm().powf(p.coeffs.q_p);
        let relp = |s: f64| (p.plastic_density(&(pm * s)) / s.powf(p.coeffs.q_p) - limp).abs() / limp;
        assert!(relp(1000.0) < 1e-4 && relp(1000.0) < relp(100.0));
    }

    #[test]
    fn stresses_match_finite_differences() {
        let p = preset();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let f = Mat3::identity() + Mat3::<f64>::random(&mut rng) * 0.5;
            let n = TracelessMat3::random(&mut rng, 0.5);
            let pm = mat_exp(&n);
            let pi = first_piola(&f, &pm, &p).unwrap();
            let nn = thermo_force(&f, &pm, &p).unwrap();
            let h = 1e-6;
            for a in 0..3 {
                for b in 0..3 {
                    let mut e = Mat3::zero();
                    e[(a, b)] = h;
                    let df = (p.local_density(&(f + e), &pm).unwrap()
                        - p.local_density(&(f - e), &pm).unwrap())
                        / (2.0 * h);
                    let dp = (p.local_density(&f, &(pm + e)).unwrap()
                        - p.local_density(&f, &(pm - e)).unwrap())
                        / (2.0 * h);
                    assert!((df - pi[(a, b)]).abs() < 1e-6 * (1.0 + pi.norm()));
                    assert!((dp + nn[(a, b)]).abs() < 1e-6 * (1.0 + nn.norm()));
                }
            }
        }
    }

    #[test]
    fn p_identity_reduction_and_np_identity() {
        let p = preset();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = Mat3::identity() + Mat3::<f64>::random(&mut rng) * 0.3;
        let i = Mat3::identity();
        assert!((first_piola(&f, &i, &p).unwrap() - p.elastic_stress(&f)).norm() < 1e-13);
        let pm = mat_exp(&TracelessMat3::random(&mut rng, 0.4));
        let n = thermo_force(&f, &pm, &p).unwrap();
        let fe = f * pm.try_inverse().unwrap();
        let rhs = fe.transpose() * p.elastic_stress(&fe) - p.plastic_stress(&pm) * pm.transpose();
        assert!((n * pm.transpose() - rhs).norm() < 1e-10);
    }

    #[test]
    fn singular_and_non_sl3_plastic_strain_rejected() {
        let p = preset();
        let i = Mat3::identity();
        assert_eq!(first_piola(&i, &Mat3::zero(), &p), Err(Error::SingularP));
        assert!(matches!(
            thermo_force(&i, &Mat3::diag(2.0, 1.0, 1.0), &p),
            Err(Error::NotInSL3(_))
        ));
    }

    #[test]
    fn validator_examples() {
        let r = validate_params(&preset()).unwrap();
        assert!(r.c1 > 0.0 && r.c2 > 0.0 && r.min_c_quotient > 0.0 && r.min_h_quotient > 0.0);
        let mut c = MaterialCoefficients::<f64>::default();
        c.q_r = 3.0;
        let bad = MaterialParams::new(c, FlowConstants::default()).unwrap();
        assert!(matches!(validate_params(&bad), Err(Error::InvalidExponents(_))));
        let mut c = MaterialCoefficients::<f64>::default();
        c.delta = 0.0;
        let bad = MaterialParams::new(c, FlowConstants::default()).unwrap();
        assert!(matches!(
            validate_params(&bad),
            Err(Error::InsufficientGrowth(_) | Error::IndefiniteHessian(_))
        ));
        let mut c = MaterialCoefficients::<f64>::default();
        c.q = 3.0;
        let bad = MaterialParams::new(c, FlowConstants::default()).unwrap();
        assert!(matches!(validate_params(&bad), Err(Error::InvalidExponents(_))));
    }

    #[test]
    fn reported_c1_c2_bound_densities() {
        let p = preset();
        let r = validate_params(&p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..2000 {
            let f = Mat3::<f64>::random(&mut rng);
            let s: f64 = rng.gen_range(0.0..50.0);
            let f = f * (s / f.norm());
            let w = p.elastic_density(&f);
            assert!(w >= -1.0 / r.c1 + r.c1 * s.powf(8.0), "s={s}");
            assert!(w <= (1.0 + s.powf(8.0)) / r.c1 * (1.0 + 1e-9));
            let pm = f;
            assert!(p.plastic_density(&pm) >= -1.0 / r.c2 + r.c2 * s.powf(8.0));
        }
    }

    #[test]
    fn recession_examples() {
        let p = preset();
        let mut ze = Mat3::zero();
        ze[(0, 0)] = 1.0;
        let dir = RecessionDirection {
            z_e: ze,
            z_p: Mat3::zero(),
            z_r: Mat33::zero(),
        };
        assert!((recession_density(&dir, &p).unwrap() - p.coeffs.delta).abs() < 1e-15);
        let mut zr = Mat33::zero();
        zr.t[0][1][2] = 1.0;
        let dir = RecessionDirection {
            z_e: Mat3::zero(),
            z_p: Mat3::zero(),
            z_r: zr,
        };
        assert!((recession_density(&dir, &p).unwrap() - 0.01 / 4.0).abs() < 1e-15);
        // mixed direction on the sphere vs scaled densities
        let a: f64 = 0.5;
        let mut ze = Mat3::zero();
        ze[(1, 2)] = a.powf(1.0 / 8.0);
        let mut zp = Mat3::zero();
        zp[(0, 0)] = 0.3f64.powf(1.0 / 8.0);
        let mut zr = Mat33::zero();
        zr.t[2][2][2] = 0.2f64.powf(1.0 / 4.0);
        let dir = RecessionDirection { z_e: ze, z_p: zp, z_r: zr };
        let exact = recession_density(&dir, &p).unwrap();
        let parts = p.coeffs.delta * 0.5 + p.coeffs.c_p / 8.0 * 0.3 + 0.01 / 4.0 * 0.2;
        assert!((exact - parts).abs() < 1e-14);
        for s in [1e3, 1e4] {
            let v = scaled_density(&dir, &p, s);
            assert!((v - exact).abs() <= 0.01 * exact, "s={s}: {v} vs {exact}");
        }
        let off = RecessionDirection {
            z_e: Mat3::identity(),
            z_p: Mat3::zero(),
            z_r: Mat33::zero(),
        };
        assert!(recession_density(&off, &p).is_err());
    }

    #[test]
    fn stored_energy_examples() {
        let p = preset();
        let g = Grid::new([1.0; 3], [1, 1, 1], &[Face::XMin]).unwrap();
        let s = StateField::identity(&g);
        assert!(stored_energy(&s, &g, &p).unwrap().abs() < 1e-14);
        // simple shear y = x + k x_1 e_2 keeps x_min clamped
        let k = 0.2;
        let y: Vec<_> = (0..g.n_nodes())
            .map(|n| {
                let x = g.node_position(n);
                [x[0], x[1] + k * x[0], x[2]]
            })
            .collect();
        let s = StateField::new(&g, y, vec![Mat3::identity()]).unwrap();
        let mut f = Mat3::identity();
        f[(1, 0)] = k;
        assert!((stored_energy(&s, &g, &p).unwrap() - p.elastic_density(&f)).abs() < 1e-13);
        // stale cache
        let mut s2 = s.clone();
        s2.set_y(&g, g.identity_y()).unwrap();
        assert_eq!(stored_energy(&s2, &g, &p), Err(Error::StaleCache));
        // gradient term
        let g = Grid::new([1.0; 3], [3, 1, 1], &[Face::XMin]).unwrap();
        let ps: Vec<_> = (0..3)
            .map(|c| {
                let x = g.cell_center(c)[0];
                mat_exp(&TracelessMat3::project(Mat3::diag(1.0, -1.0, 0.0) * (0.1 * x)))
            })
            .collect();
        let s = StateField::new(&g, g.identity_y(), ps.clone()).unwrap();
        let gp = g.gradient_p(&ps).unwrap();
        let expect: f64 = (0..3)
            .map(|c| {
                let pinv = ps[c].try_inverse().unwrap();
                p.elastic_density(&pinv) + p.plastic_density(&ps[c]) + p.gradient_density(&gp[c])
            })
            .sum::<f64>()
            * g.cell_volume();
        assert!(gp[1].norm() > 0.1);
        assert!((stored_energy(&s, &g, &p).unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn state_field_preconditions() {
        let g = Grid::<f64>::new([1.0; 3], [2, 2, 2], &[Face::XMin]).unwrap();
        let mut y = g.identity_y();
        y[0][1] += 0.1;
        assert!(matches!(
            StateField::new(&g, y, vec![Mat3::identity(); 8]),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(
            StateField::new(&g, g.identity_y(), vec![Mat3::diag(2.0, 1.0, 1.0); 8]),
            Err(Error::NotInSL3(_))
        ));
    }

    #[test]
    fn works_in_f32() {
        let p = MaterialParams::<f32>::new(MaterialCoefficients::default(), FlowConstants::default())
            .unwrap();
        assert!(p.elastic_density(&Mat3::identity()).abs() < 1e-5);
        assert!(validate_params(&p).is_ok());
    }
}
