//! Dense 3x3 tensor algebra and SL(3) manifold operations.
//!
//! [`Mat3`] is a row-major 3x3 tensor, [`TracelessMat3`] a tangent vector of
//! SL(3) at the identity (an element of sl(3)), and [`Mat33`] a 3-tensor used for
//! gradients of tensor fields. The exponential uses scaling and squaring with a
//! degree-6 Padé approximant; the logarithm uses inverse scaling and squaring with
//! Denman–Beavers square roots.

use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Neg, Sub, SubAssign};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Shared tolerance for SL(3) membership, `|det - 1| <= sl3_tol`.
///
/// `1e-8` in double precision; for single precision it is floored at a few
/// hundred ulps so that freshly exponentiated matrices still qualify.
pub fn sl3_tol<T: Real>() -> T {
    T::lit(1e-8).max(T::epsilon() * T::lit(256.0))
}

/// Dense 3x3 tensor, `m[i][j]` is row `i`, column `j`.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Mat3<T> {
    pub m: [[T; 3]; 3],
}

impl<T: Real> Mat3<T> {
    pub fn zero() -> Self {
        Self {
            m: [[T::zero(); 3]; 3],
        }
    }

    pub fn identity() -> Self {
        Self::diag(T::one(), T::one(), T::one())
    }

    pub fn diag(a: T, b: T, c: T) -> Self {
        let z = T::zero();
        Self {
            m: [[a, z, z], [z, b, z], [z, z, c]],
        }
    }

    pub fn from_rows(m: [[T; 3]; 3]) -> Self {
        Self { m }
    }

    pub fn from_fn(mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut out = Self::zero();
        for i in 0..3 {
            for j in 0..3 {
                out.m[i][j] = f(i, j);
            }
        }
        out
    }

    /// Outer product `a ⊗ b`.
    pub fn outer(a: [T; 3], b: [T; 3]) -> Self {
        Self::from_fn(|i, j| a[i] * b[j])
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(|i, j| self.m[j][i])
    }

    pub fn trace(&self) -> T {
        self.m[0][0] + self.m[1][1] + self.m[2][2]
    }

    pub fn det(&self) -> T {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Cofactor matrix; equals `det(A) A^{-T}` whenever `A` is invertible.
    pub fn cofactor(&self) -> Self {
        let m = &self.m;
        Self {
            m: [
                [
                    m[1][1] * m[2][2] - m[1][2] * m[2][1],
                    m[1][2] * m[2][0] - m[1][0] * m[2][2],
                    m[1][0] * m[2][1] - m[1][1] * m[2][0],
                ],
                [
                    m[0][2] * m[2][1] - m[0][1] * m[2][2],
                    m[0][0] * m[2][2] - m[0][2] * m[2][0],
                    m[0][1] * m[2][0] - m[0][0] * m[2][1],
                ],
                [
                    m[0][1] * m[1][2] - m[0][2] * m[1][1],
                    m[0][2] * m[1][0] - m[0][0] * m[1][2],
                    m[0][0] * m[1][1] - m[0][1] * m[1][0],
                ],
            ],
        }
    }

    pub fn try_inverse(&self) -> Option<Self> {
        let det = self.det();
        let scale = self.norm_inf();
        if !det.is_finite() || det.abs() <= T::epsilon() * scale * scale * scale {
            return None;
        }
        Some(self.cofactor().transpose() * (T::one() / det))
    }

    /// Frobenius contraction `A : B`.
    pub fn dot(&self, other: &Self) -> T {
        let mut s = T::zero();
        for i in 0..3 {
            for j in 0..3 {
                s += self.m[i][j] * other.m[i][j];
            }
        }
        s
    }

    /// Frobenius norm.
    pub fn norm(&self) -> T {
        self.dot(self).sqrt()
    }

    pub fn norm_inf(&self) -> T {
        let mut s = T::zero();
        for row in &self.m {
            for &x in row {
                s = s.max(x.abs());
            }
        }
        s
    }

    /// Max column sum.
    pub fn norm_1(&self) -> T {
        (0..3)
            .map(|j| self.m[0][j].abs() + self.m[1][j].abs() + self.m[2][j].abs())
            .fold(T::zero(), T::max)
    }

    /// `A - (tr A / 3) I`.
    pub fn deviator(&self) -> Self {
        let t = self.trace() / T::lit(3.0);
        let mut out = *self;
        for i in 0..3 {
            out.m[i][i] -= t;
        }
        out
    }

    pub fn sym(&self) -> Self {
        (*self + self.transpose()) * T::lit(0.5)
    }

    pub fn skew(&self) -> Self {
        (*self - self.transpose()) * T::lit(0.5)
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().flatten().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_fn(|i, j| f(self.m[i][j]))
    }

    pub fn mul_vec(&self, v: [T; 3]) -> [T; 3] {
        let mut out = [T::zero(); 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.m[i][0] * v[0] + self.m[i][1] * v[1] + self.m[i][2] * v[2];
        }
        out
    }

    /// `|det - 1| <= sl3_tol`.
    pub fn is_sl3(&self) -> bool {
        (self.det() - T::one()).abs() <= sl3_tol::<T>()
    }

    pub fn check_sl3(&self) -> Result<()> {
        let d = self.det();
        if (d - T::one()).abs() <= sl3_tol::<T>() {
            Ok(())
        } else {
            Err(Error::NotInSL3((d - T::one()).abs().as_f64()))
        }
    }

    /// Row-major flat copy.
    pub fn to_array(&self) -> [T; 9] {
        let mut a = [T::zero(); 9];
        for i in 0..3 {
            for j in 0..3 {
                a[3 * i + j] = self.m[i][j];
            }
        }
        a
    }

    pub fn from_array(a: [T; 9]) -> Self {
        Self::from_fn(|i, j| a[3 * i + j])
    }

    /// Entries uniform in `[-1, 1]`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::from_fn(|_, _| T::lit(rng.gen_range(-1.0..1.0)))
    }

    /// Rotation by `angle` about the (normalized) `axis`, via Rodrigues' formula.
    pub fn rotation(axis: [T; 3], angle: T) -> Self {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        let k = [axis[0] / n, axis[1] / n, axis[2] / n];
        let kx = Self::from_rows([
            [T::zero(), -k[2], k[1]],
            [k[2], T::zero(), -k[0]],
            [-k[1], k[0], T::zero()],
        ]);
        Self::identity() + kx * angle.sin() + (kx * kx) * (T::one() - angle.cos())
    }

    pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let axis = [
            T::lit(rng.gen_range(-1.0..1.0)),
            T::lit(rng.gen_range(-1.0..1.0)),
            T::lit(rng.gen_range(-1.0..1.0)) + T::lit(1e-3),
        ];
        Self::rotation(axis, T::lit(rng.gen_range(-3.1..3.1)))
    }

    /// Lexicographic total order on entries, used to canonicalize argument pairs.
    pub fn lex_cmp(&self, other: &Self) -> std::cmp::Ordering {
        for (a, b) in self.m.iter().flatten().zip(other.m.iter().flatten()) {
            match a.partial_cmp(b) {
                Some(std::cmp::Ordering::Equal) | None => continue,
                Some(o) => return o,
            }
        }
        std::cmp::Ordering::Equal
    }
}

impl<T: Real> Add for Mat3<T> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self::from_fn(|i, j| self.m[i][j] + rhs.m[i][j])
    }
}

impl<T: Real> Sub for Mat3<T> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Self::from_fn(|i, j| self.m[i][j] - rhs.m[i][j])
    }
}

impl<T: Real> AddAssign for Mat3<T> {
    fn add_assign(&mut self, rhs: Self) {
        for i in 0..3 {
            for j in 0..3 {
                self.m[i][j] += rhs.m[i][j];
            }
        }
    }
}

impl<T: Real> SubAssign for Mat3<T> {
    fn sub_assign(&mut self, rhs: Self) {
        for i in 0..3 {
            for j in 0..3 {
                self.m[i][j] -= rhs.m[i][j];
            }
        }
    }
}

impl<T: Real> Neg for Mat3<T> {
    type Output = Self;
    fn neg(self) -> Self {
        self.map(|x| -x)
    }
}

impl<T: Real> Mul for Mat3<T> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        Self::from_fn(|i, j| {
            self.m[i][0] * rhs.m[0][j] + self.m[i][1] * rhs.m[1][j] + self.m[i][2] * rhs.m[2][j]
        })
    }
}

impl<T: Real> Mul<T> for Mat3<T> {
    type Output = Self;
    fn mul(self, s: T) -> Self {
        self.map(|x| x * s)
    }
}

impl<T> Index<(usize, usize)> for Mat3<T> {
    type Output = T;
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.m[i][j]
    }
}

impl<T> IndexMut<(usize, usize)> for Mat3<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.m[i][j]
    }
}

/// Orthonormal basis of traceless 3x3 matrices (Frobenius inner product).
fn traceless_basis<T: Real>() -> [Mat3<T>; 8] {
    let z = Mat3::<T>::zero();
    let mut b = [z; 8];
    let mut k = 0;
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                b[k].m[i][j] = T::one();
                k += 1;
            }
        }
    }
    let s2 = T::lit(2.0).sqrt().recip();
    let s6 = T::lit(6.0).sqrt().recip();
    b[6] = Mat3::diag(s2, -s2, T::zero());
    b[7] = Mat3::diag(s6, s6, -T::lit(2.0) * s6);
    b
}

/// Element of sl(3): a 3x3 matrix with zero trace.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TracelessMat3<T>(Mat3<T>);

impl<T: Real> TracelessMat3<T> {
    pub fn zero() -> Self {
        Self(Mat3::zero())
    }

    /// Projects onto sl(3) by removing the trace.
    pub fn project(a: Mat3<T>) -> Self {
        Self(a.deviator())
    }

    /// Accepts `a` only if `|tr a| <= tol * max(1, |a|_inf)`.
    pub fn try_new(a: Mat3<T>, tol: T) -> Result<Self> {
        if a.trace().abs() <= tol * a.norm_inf().max(T::one()) {
            Ok(Self::project(a))
        } else {
            Err(Error::Precondition(format!(
                "matrix has trace {}, expected traceless",
                a.trace()
            )))
        }
    }

    pub fn as_mat(&self) -> &Mat3<T> {
        &self.0
    }

    pub fn into_mat(self) -> Mat3<T> {
        self.0
    }

    pub fn norm(&self) -> T {
        self.0.norm()
    }

    pub fn scale(&self, s: T) -> Self {
        Self(self.0 * s)
    }

    /// Coordinates in an orthonormal basis; `|coords| = |self|`.
    pub fn coords(&self) -> [T; 8] {
        let basis = traceless_basis::<T>();
        let mut c = [T::zero(); 8];
        for (ck, bk) in c.iter_mut().zip(basis.iter()) {
            *ck = self.0.dot(bk);
        }
        c
    }

    pub fn from_coords(c: &[T; 8]) -> Self {
        let basis = traceless_basis::<T>();
        let mut a = Mat3::zero();
        for (ck, bk) in c.iter().zip(basis.iter()) {
            a += *bk * *ck;
        }
        Self(a)
    }

    /// Uniformly oriented random direction with the given Frobenius norm.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, norm: T) -> Self {
        loop {
            let mut c = [T::zero(); 8];
            for ck in c.iter_mut() {
                *ck = T::lit(rng.gen_range(-1.0..1.0));
            }
            let n = c.iter().map(|&x| x * x).sum::<T>().sqrt();
            if n > T::lit(1e-3) && n <= T::one() {
                for ck in c.iter_mut() {
                    *ck = *ck * norm / n;
                }
                return Self::from_coords(&c);
            }
        }
    }

    /// Random symmetric traceless (deviatoric) direction with the given norm.
    pub fn random_deviatoric<R: Rng + ?Sized>(rng: &mut R, norm: T) -> Self {
        loop {
            let a = Mat3::<T>::random(rng).sym().deviator();
            let n = a.norm();
            if n > T::lit(1e-3) {
                return Self(a * (norm / n));
            }
        }
    }
}

impl<T: Real> Add for TracelessMat3<T> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self(self.0 + rhs.0)
    }
}

impl<T: Real> Sub for TracelessMat3<T> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Self(self.0 - rhs.0)
    }
}

impl<T: Real> Neg for TracelessMat3<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self(-self.0)
    }
}

/// 3-tensor, `t[i][j][k]`; used for `(∇P)_{ijk} = ∂P_ij/∂x_k`.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Mat33<T> {
    pub t: [[[T; 3]; 3]; 3],
}

impl<T: Real> Mat33<T> {
    pub fn zero() -> Self {
        Self {
            t: [[[T::zero(); 3]; 3]; 3],
        }
    }

    /// Triple contraction `A ⋮ B`.
    pub fn dot(&self, other: &Self) -> T {
        let mut s = T::zero();
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    s += self.t[i][j][k] * other.t[i][j][k];
                }
            }
        }
        s
    }

    pub fn norm(&self) -> T {
        self.dot(self).sqrt()
    }

    pub fn scale(&self, s: T) -> Self {
        let mut out = *self;
        out.t.iter_mut().flatten().flatten().for_each(|x| *x *= s);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.t.iter().flatten().flatten().all(|x| x.is_finite())
    }

    /// Slice `k`: the matrix `∂P/∂x_k`.
    pub fn slice(&self, k: usize) -> Mat3<T> {
        Mat3::from_fn(|i, j| self.t[i][j][k])
    }

    pub fn set_slice(&mut self, k: usize, a: &Mat3<T>) {
        for i in 0..3 {
            for j in 0..3 {
                self.t[i][j][k] = a.m[i][j];
            }
        }
    }
}

impl<T: Real> Add for Mat33<T> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        let mut out = self;
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    out.t[i][j][k] += rhs.t[i][j][k];
                }
            }
        }
        out
    }
}

impl<T: Real> Sub for Mat33<T> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        self + rhs.scale(-T::one())
    }
}

/// Cofactor matrix `cof A`.
pub fn cofactor<T: Real>(a: &Mat3<T>) -> Mat3<T> {
    a.cofactor()
}

/// Deviatoric part `A - (tr A / 3) I`.
pub fn deviator<T: Real>(a: &Mat3<T>) -> Mat3<T> {
    a.deviator()
}

const PADE6: [f64; 7] = [
    1.0,
    0.5,
    5.0 / 44.0,
    1.0 / 66.0,
    1.0 / 792.0,
    1.0 / 15840.0,
    1.0 / 665280.0,
];

fn scaling_exponent<T: Real>(a: &Mat3<T>, theta: f64) -> i32 {
    let n = a.norm_1().as_f64();
    if n <= theta || !n.is_finite() {
        0
    } else {
        (n / theta).log2().ceil() as i32
    }
}

/// Matrix exponential of an arbitrary 3x3 matrix (scaling and squaring, Padé(6,6)).
pub fn expm<T: Real>(a: &Mat3<T>) -> Mat3<T> {
    let s = scaling_exponent(a, 0.5);
    let scaled = *a * T::lit(0.5f64.powi(s));
    let id = Mat3::<T>::identity();
    let mut num = id * T::lit(PADE6[0]);
    let mut den = id * T::lit(PADE6[0]);
    let mut pow = id;
    for (k, &c) in PADE6.iter().enumerate().skip(1) {
        pow = pow * scaled;
        let term = pow * T::lit(c);
        num += term;
        if k % 2 == 0 {
            den += term;
        } else {
            den -= term;
        }
    }
    // den is close to I after scaling, so always invertible
    let mut x = den.try_inverse().unwrap_or(id) * num;
    for _ in 0..s {
        x = x * x;
    }
    x
}

/// Exponential of an sl(3) element; the result lies in SL(3).
pub fn mat_exp<T: Real>(a: &TracelessMat3<T>) -> Mat3<T> {
    expm(a.as_mat())
}

/// Rescales `m` by `det(m)^{-1/3}` when the determinant drifted beyond [`sl3_tol`].
pub fn renormalize_sl3<T: Real>(m: &Mat3<T>) -> Mat3<T> {
    let d = m.det();
    if (d - T::one()).abs() > sl3_tol::<T>() && d > T::zero() {
        *m * d.cbrt().recip()
    } else {
        *m
    }
}

/// Exponential and its Fréchet derivative `L(A, E) = d/dt exp(A + tE)|_{t=0}`.
///
/// Taylor recurrence on the scaled pair followed by the squaring rule
/// `(X, L) -> (X^2, XL + LX)`.
pub fn expm_frechet<T: Real>(a: &Mat3<T>, e: &Mat3<T>) -> (Mat3<T>, Mat3<T>) {
    let s = scaling_exponent(a, 0.25);
    let f = T::lit(0.5f64.powi(s));
    let a = *a * f;
    let e = *e * f;
    let mut x = Mat3::<T>::identity();
    let mut l = Mat3::<T>::zero();
    let mut term = Mat3::<T>::identity();
    let mut dterm = Mat3::<T>::zero();
    let tiny = T::epsilon() * T::lit(0.1);
    for k in 1..40 {
        let kk = T::lit(k as f64).recip();
        dterm = (dterm * a + term * e) * kk;
        term = (term * a) * kk;
        x += term;
        l += dterm;
        if term.norm_inf() <= tiny * x.norm_inf() && dterm.norm_inf() <= tiny * l.norm_inf().max(e.norm_inf()) {
            break;
        }
    }
    for _ in 0..s {
        l = x * l + l * x;
        x = x * x;
    }
    (x, l)
}

/// Real and imaginary parts of the eigenvalues of a real 3x3 matrix.
pub fn eigenvalues<T: Real>(m: &Mat3<T>) -> [(f64, f64); 3] {
    let a = Mat3::<f64>::from_fn(|i, j| m.m[i][j].as_f64());
    let c2 = a.trace();
    let c1 = a.cofactor().trace();
    let c0 = a.det();
    // λ = x + c2/3, x^3 + p x + q = 0
    let shift = c2 / 3.0;
    let p = c1 - c2 * c2 / 3.0;
    let q = -c0 + c1 * c2 / 3.0 - 2.0 * c2 * c2 * c2 / 27.0;
    let disc = (q / 2.0) * (q / 2.0) + (p / 3.0) * (p / 3.0) * (p / 3.0);
    if disc > 0.0 {
        let sd = disc.sqrt();
        let u = (-q / 2.0 + sd).cbrt();
        let v = (-q / 2.0 - sd).cbrt();
        let re = -(u + v) / 2.0 + shift;
        let im = 3f64.sqrt() / 2.0 * (u - v);
        [(u + v + shift, 0.0), (re, im), (re, -im)]
    } else {
        let r = (-p / 3.0).max(0.0).sqrt();
        if r == 0.0 {
            return [(shift, 0.0); 3];
        }
        let arg = (-q / (2.0 * r * r * r)).clamp(-1.0, 1.0);
        let phi = arg.acos() / 3.0;
        let tau = std::f64::consts::TAU / 3.0;
        [
            (2.0 * r * phi.cos() + shift, 0.0),
            (2.0 * r * (phi + tau).cos() + shift, 0.0),
            (2.0 * r * (phi - tau).cos() + shift, 0.0),
        ]
    }
}

/// `true` when some eigenvalue sits on (or numerically at) the closed negative real axis.
fn has_nonpositive_real_eigenvalue<T: Real>(m: &Mat3<T>) -> bool {
    let scale = m.norm().as_f64().max(1.0);
    eigenvalues(m).iter().any(|&(re, im)| {
        let mag = (re * re + im * im).sqrt().max(1e-300);
        re <= 1e-12 * scale && im.abs() <= 1e-6 * mag
    })
}

fn sqrtm_db<T: Real>(m: &Mat3<T>) -> Result<Mat3<T>> {
    let mut y = *m;
    let mut z = Mat3::<T>::identity();
    let half = T::lit(0.5);
    let tol = T::epsilon() * T::lit(16.0);
    for _ in 0..60 {
        let yi = y.try_inverse().ok_or(Error::LogUndefined)?;
        let zi = z.try_inverse().ok_or(Error::LogUndefined)?;
        let y_next = (y + zi) * half;
        z = (z + yi) * half;
        let done = (y_next - y).norm_inf() <= tol * y_next.norm_inf();
        y = y_next;
        if done {
            return Ok(y);
        }
    }
    Ok(y)
}

/// Logarithm of a matrix near the identity by the Gregory series
/// `log X = 2 Σ Z^{2j+1}/(2j+1)`, `Z = (X - I)(X + I)^{-1}`.
fn log_near_identity<T: Real>(x: &Mat3<T>) -> Result<Mat3<T>> {
    let id = Mat3::<T>::identity();
    let z = (*x - id) * (*x + id).try_inverse().ok_or(Error::LogUndefined)?;
    let z2 = z * z;
    let mut pow = z;
    let mut acc = z;
    let tiny = T::epsilon() * T::lit(0.1);
    for j in 1..200 {
        pow = pow * z2;
        let term = pow * T::lit(1.0 / (2 * j + 1) as f64);
        acc += term;
        if term.norm_inf() <= tiny * acc.norm_inf().max(tiny) {
            break;
        }
    }
    Ok(acc * T::lit(2.0))
}

/// Principal logarithm of `m` in SL(3), returned as a traceless matrix.
///
/// Fails with [`Error::LogUndefined`] when the spectrum touches the closed
/// negative real axis; callers fall back to a two-segment path.
pub fn mat_log<T: Real>(m: &Mat3<T>) -> Result<TracelessMat3<T>> {
    m.check_sl3()?;
    if has_nonpositive_real_eigenvalue(m) {
        return Err(Error::LogUndefined);
    }
    let id = Mat3::<T>::identity();
    let mut x = *m;
    let mut k = 0;
    while (x - id).norm() > T::lit(0.25) {
        if k >= 40 {
            return Err(Error::LogUndefined);
        }
        x = sqrtm_db(&x)?;
        k += 1;
    }
    let l = log_near_identity(&x)? * T::lit(2f64.powi(k));
    if !l.is_finite() {
        return Err(Error::LogUndefined);
    }
    Ok(TracelessMat3::project(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type M = Mat3<f64>;

    fn rel(a: &M, b: &M) -> f64 {
        (*a - *b).norm() / b.norm().max(1e-300)
    }

    #[test]
    fn cofactor_examples() {
        assert_eq!(M::identity().cofactor(), M::identity());
        assert_eq!(M::diag(2.0, 1.0, 1.0).cofactor(), M::diag(1.0, 2.0, 2.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let a = M::random(&mut rng) + M::identity();
            let expected = a.try_inverse().unwrap().transpose() * a.det();
            assert!(rel(&a.cofactor(), &expected) < 1e-12);
        }
    }

    #[test]
    fn cofactor_is_det_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = 1e-6;
        for _ in 0..50 {
            let a = M::random(&mut rng);
            let d = M::random(&mut rng);
            let fd = ((a + d * h).det() - (a - d * h).det()) / (2.0 * h);
            let an = a.cofactor().dot(&d);
            assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-3), "{fd} vs {an}");
        }
    }

    #[test]
    fn deviator_examples() {
        assert_eq!(M::identity().deviator(), M::zero());
        assert_eq!(M::diag(3.0, 0.0, 0.0).deviator(), M::diag(2.0, -1.0, -1.0));
        let a = M::from_rows([[1.0, 2.0, 0.0], [0.0, -3.0, 1.0], [4.0, 0.0, 2.0]]);
        assert_eq!(a.deviator(), a);
    }

    #[test]
    fn exp_examples() {
        assert_eq!(mat_exp(&TracelessMat3::<f64>::zero()), M::identity());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.gen_range(0.0..2.0);
            let a = TracelessMat3::<f64>::random(&mut rng, n);
            let e = mat_exp(&a);
            assert!((e.det() - 1.0).abs() < 1e-10);
            assert!(rel(&(e * mat_exp(&-a)), &M::identity()) < 1e-10);
        }
    }

    #[test]
    fn exp_matches_taylor_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let a = M::random(&mut rng) * 3.0;
            // oracle: plain Taylor sum with many terms on a = b/2^6, then square
            let b = a * (1.0 / 64.0);
            let mut t = M::identity();
            let mut s = M::identity();
            for k in 1..30 {
                t = t * b * (1.0 / k as f64);
                s += t;
            }
            for _ in 0..6 {
                s = s * s;
            }
            assert!(rel(&expm(&a), &s) < 1e-12);
        }
    }

    #[test]
    fn exp_of_commuting_pair() {
        let a = TracelessMat3::project(M::diag(0.3, -0.1, -0.2));
        let b = TracelessMat3::project(M::diag(-0.5, 0.7, -0.2));
        let lhs = mat_exp(&(a + b));
        let rhs = mat_exp(&a) * mat_exp(&b);
        assert!(rel(&lhs, &rhs) < 1e-13);
    }

    #[test]
    fn log_examples() {
        assert!(mat_log(&M::identity()).unwrap().norm() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.gen_range(0.0..1.0);
            let a = TracelessMat3::<f64>::random(&mut rng, n);
            let l = mat_log(&mat_exp(&a)).unwrap();
            assert!((l - a).norm() < 1e-8, "{:?}", (l - a).norm());
            assert!(l.as_mat().trace().abs() < 1e-10);
        }
        for _ in 0..50 {
            let n = rng.gen_range(0.5..4.0);
            let a = TracelessMat3::<f64>::random(&mut rng, n);
            let m = mat_exp(&a);
            if let Ok(l) = mat_log(&m) {
                assert!(rel(&mat_exp(&l), &m) < 1e-8);
            }
        }
    }

    #[test]
    fn log_of_half_turn_is_undefined() {
        let r = M::rotation([0.0, 0.0, 1.0], std::f64::consts::PI);
        assert_eq!(mat_log(&r), Err(Error::LogUndefined));
        let r = M::rotation([1.0, 2.0, -0.5], std::f64::consts::PI);
        assert_eq!(mat_log(&r), Err(Error::LogUndefined));
        let r = M::rotation([1.0, 2.0, -0.5], 3.0);
        assert!(mat_log(&r).is_ok());
    }

    #[test]
    fn frechet_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let a = M::random(&mut rng) * 1.5;
            let e = M::random(&mut rng);
            let (x, l) = expm_frechet(&a, &e);
            assert!(rel(&x, &expm(&a)) < 1e-12);
            let h = 1e-6;
            let fd = (expm(&(a + e * h)) - expm(&(a - e * h))) * (0.5 / h);
            assert!(rel(&l, &fd) < 1e-7);
            // adjoint identity <L(A,E), G> = <E, L(A^T, G)>
            let g = M::random(&mut rng);
            let (_, lt) = expm_frechet(&a.transpose(), &g);
            assert!((l.dot(&g) - e.dot(&lt)).abs() < 1e-11);
        }
    }

    #[test]
    fn renormalization_restores_unit_determinant() {
        let m = M::diag(1.0, 1.0, 1.0 + 1e-6);
        let r = renormalize_sl3(&m);
        assert!((r.det() - 1.0).abs() < 1e-14);
        let ok = M::identity();
        assert_eq!(renormalize_sl3(&ok), ok);
    }

    #[test]
    fn single_precision_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = TracelessMat3::<f32>::random(&mut rng, 0.5);
        let e = mat_exp(&a);
        assert!((e.det() - 1.0).abs() < 1e-5);
        let l = mat_log(&renormalize_sl3(&e)).unwrap();
        assert!((l - a).norm() < 1e-4);
    }

    #[test]
    fn traceless_coords_are_isometric() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = TracelessMat3::<f64>::random(&mut rng, 0.7);
        let c = a.coords();
        let n = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 0.7).abs() < 1e-14);
        assert!((TracelessMat3::from_coords(&c) - a).norm() < 1e-14);
    }
}
