//! Dissipation distances on SL(3): the state-weighted Finsler-type distance D,
//! its unweighted counterpart D̂, the spatial integral 𝒟 and the accumulated
//! dissipation along a trajectory.
//!
//! Both distances are computed over piecewise-exponential paths
//! P_{k+1} = exp(A_k) P_k. The value returned is the cheaper of the
//! single-exponential candidate and a locally refined m-segment path, hence an
//! upper bound for the exact infimum.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowrule::gap_r;
use crate::grid::Grid;
use crate::material::{thermo_force, MaterialParams};
use crate::real::Real;
use crate::solver::Trajectory;
use crate::tensor::{mat_exp, mat_log, renormalize_sl3, Mat3, TracelessMat3};

/// Discretization of the path minimization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathPolicy {
    /// number of exponential segments m ≥ 1
    pub segments: usize,
    /// descent iterations on the interior nodes
    pub refinement_iterations: usize,
    /// weight quadrature points per segment (1 = midpoint rule)
    pub quadrature_points: usize,
}

impl Default for PathPolicy {
    fn default() -> Self {
        Self {
            segments: 4,
            refinement_iterations: 8,
            quadrature_points: 1,
        }
    }
}

impl PathPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.segments == 0 {
            return Err(Error::config("path.segments", "need at least one segment"));
        }
        if self.quadrature_points == 0 {
            return Err(Error::config("path.quadrature_points", "need at least one point"));
        }
        Ok(())
    }
}

/// Segment weight along a path: `r(P̃, N(F, P̃))` for D, 1 for D̂.
trait Weight<T: Real>: Sync {
    fn at(&self, p: &Mat3<T>) -> Result<T>;
}

struct Unit;

impl<T: Real> Weight<T> for Unit {
    fn at(&self, _p: &Mat3<T>) -> Result<T> {
        Ok(T::one())
    }
}

struct GapWeight<'a, T> {
    f: Mat3<T>,
    params: &'a MaterialParams<T>,
}

impl<T: Real> Weight<T> for GapWeight<'_, T> {
    fn at(&self, p: &Mat3<T>) -> Result<T> {
        let n = thermo_force(&self.f, p, self.params)?;
        Ok(gap_r(p, &n, &self.params.flow))
    }
}

/// Cost and length of the segment `q1 = exp(A) q0`; `None` if the principal
/// log does not exist.
fn segment_cost<T: Real>(q0: &Mat3<T>, q1: &Mat3<T>, w: &dyn Weight<T>, nq: usize) -> Result<Option<(T, T)>> {
    let q0inv = q0.try_inverse().ok_or(Error::SingularP)?;
    let a = match mat_log(&renormalize_sl3(&(*q1 * q0inv))) {
        Ok(a) => a,
        Err(Error::LogUndefined) | Err(Error::NotInSL3(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let len = a.norm();
    if len.is_zero() {
        return Ok(Some((T::zero(), T::zero())));
    }
    let mut wsum = T::zero();
    for j in 0..nq {
        let s = (T::lit(j as f64) + T::lit(0.5)) / T::lit(nq as f64);
        let mid = mat_exp(&a.scale(s)) * *q0;
        wsum += w.at(&mid)?;
    }
    Ok(Some((wsum / T::lit(nq as f64) * len, len)))
}

fn path_costs<T: Real>(nodes: &[Mat3<T>], w: &dyn Weight<T>, nq: usize) -> Result<Option<Vec<(T, T)>>> {
    let mut out = Vec::with_capacity(nodes.len() - 1);
    for k in 0..nodes.len() - 1 {
        match segment_cost(&nodes[k], &nodes[k + 1], w, nq)? {
            Some(c) => out.push(c),
            None => return Ok(None),
        }
    }
    Ok(Some(out))
}

/// Midpoint M = exp(S) p1 of a two-segment detour for pairs without a principal
/// log: best of 50 seeded random candidates by unit-weight cost.
fn detour_midpoint<T: Real>(p1: &Mat3<T>, p2: &Mat3<T>) -> Result<Mat3<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xd70u64);
    let mut best: Option<(T, Mat3<T>)> = None;
    for _ in 0..50 {
        let n = T::lit(rng.gen_range(0.2..3.0));
        let s = if rng.gen_bool(0.5) {
            TracelessMat3::random_deviatoric(&mut rng, n)
        } else {
            TracelessMat3::random(&mut rng, n)
        };
        let m = mat_exp(&s) * *p1;
        if let Some((c2, _)) = segment_cost(&m, p2, &Unit, 1)? {
            let c = s.norm() + c2;
            if best.as_ref().map_or(true, |(b, _)| c < *b) {
                best = Some((c, m));
            }
        }
    }
    best.map(|(_, m)| m).ok_or(Error::LogUndefined)
}

/// Initial m-segment path: uniform subdivision of the single exponential, or
/// of the detour when the principal log does not exist.
fn initial_nodes<T: Real>(p1: &Mat3<T>, p2: &Mat3<T>, m: usize) -> Result<Vec<Mat3<T>>> {
    let p1inv = p1.try_inverse().ok_or(Error::SingularP)?;
    match mat_log(&renormalize_sl3(&(*p2 * p1inv))) {
        Ok(a) => {
            let mut nodes: Vec<Mat3<T>> = (0..m)
                .map(|k| mat_exp(&a.scale(T::lit(k as f64 / m as f64))) * *p1)
                .collect();
            nodes.push(*p2);
            Ok(nodes)
        }
        Err(Error::LogUndefined) => {
            let mid = detour_midpoint(p1, p2)?;
            let m1 = (m / 2).max(1);
            let m2 = (m - m1).max(1);
            let mut first = initial_nodes(p1, &mid, m1)?;
            let second = initial_nodes(&mid, p2, m2)?;
            first.pop();
            first.extend(second);
            Ok(first)
        }
        Err(e) => Err(e),
    }
}

/// Monotone descent on the interior nodes Q_k ← exp(B_k) Q_k with forward
/// difference gradients in the 8 sl(3) coordinates; returns the final cost.
fn refine_path<T: Real>(nodes: &mut [Mat3<T>], w: &dyn Weight<T>, policy: &PathPolicy) -> Result<Option<T>> {
    let nq = policy.quadrature_points;
    let Some(mut seg) = path_costs(nodes, w, nq)? else {
        return Ok(None);
    };
    let mut cost: T = seg.iter().map(|s| s.0).sum();
    let interior = nodes.len().saturating_sub(2);
    if interior == 0 || cost.is_zero() {
        return Ok(Some(cost));
    }
    let h = T::epsilon().sqrt() * T::lit(4.0);
    let mut step_scale = T::one();
    for _ in 0..policy.refinement_iterations {
        // gradient over all interior coordinates
        let mut grad = vec![[T::zero(); 8]; interior];
        for k in 1..=interior {
            let local = seg[k - 1].0 + seg[k].0;
            for c in 0..8 {
                let mut e = [T::zero(); 8];
                e[c] = h;
                let q = mat_exp(&TracelessMat3::from_coords(&e)) * nodes[k];
                let a = segment_cost(&nodes[k - 1], &q, w, nq)?;
                let b = segment_cost(&q, &nodes[k + 1], w, nq)?;
                grad[k - 1][c] = match (a, b) {
                    (Some(a), Some(b)) => (a.0 + b.0 - local) / h,
                    _ => T::zero(),
                };
            }
        }
        let gnorm = grad
            .iter()
            .flatten()
            .map(|g| *g * *g)
            .sum::<T>()
            .sqrt();
        if !(gnorm > T::lit(1e-14)) {
            break;
        }
        // initial trial moves nodes by a fraction of the mean segment length
        let mean_len = seg.iter().map(|s| s.1).sum::<T>() / T::lit((nodes.len() - 1) as f64);
        let mut alpha = step_scale * T::lit(0.5) * mean_len / gnorm;
        let mut accepted = false;
        for _ in 0..30 {
            let trial: Vec<Mat3<T>> = nodes
                .iter()
                .enumerate()
                .map(|(k, q)| {
                    if k == 0 || k == nodes.len() - 1 {
                        *q
                    } else {
                        let b = grad[k - 1].map(|g| -g * alpha);
                        renormalize_sl3(&(mat_exp(&TracelessMat3::from_coords(&b)) * *q))
                    }
                })
                .collect();
            if let Some(tseg) = path_costs(&trial, w, nq)? {
                let tcost: T = tseg.iter().map(|s| s.0).sum();
                if tcost < cost {
                    nodes.copy_from_slice(&trial);
                    seg = tseg;
                    cost = tcost;
                    accepted = true;
                    break;
                }
            }
            alpha *= T::lit(0.5);
            step_scale *= T::lit(0.5);
        }
        if !accepted {
            break;
        }
        step_scale = (step_scale * T::lit(2.0)).min(T::one());
    }
    Ok(Some(cost))
}

/// Lexicographic canonical order makes both distances exactly symmetric.
fn canonical<'a, T: Real>(p1: &'a Mat3<T>, p2: &'a Mat3<T>) -> (&'a Mat3<T>, &'a Mat3<T>) {
    if p2.lex_cmp(p1) == std::cmp::Ordering::Less {
        (p2, p1)
    } else {
        (p1, p2)
    }
}

fn distance<T: Real>(p1: &Mat3<T>, p2: &Mat3<T>, w: &dyn Weight<T>, policy: &PathPolicy) -> Result<T> {
    policy.validate()?;
    p1.check_sl3()?;
    p2.check_sl3()?;
    if p1 == p2 {
        return Ok(T::zero());
    }
    let (a, b) = canonical(p1, p2);
    let single = segment_cost(a, b, w, policy.quadrature_points)?.map(|s| s.0);
    let mut best = single.unwrap_or(T::infinity());
    if policy.segments > 1 || single.is_none() {
        let m = policy.segments.max(2);
        let mut nodes = initial_nodes(a, b, m)?;
        if let Some(c) = refine_path(&mut nodes, w, policy)? {
            best = best.min(c);
        }
    }
    if !best.is_finite() {
        return Err(Error::LogUndefined);
    }
    Ok(best)
}

/// D̂(P1, P2): unweighted right-invariant path distance (default policy).
pub fn dhat_distance<T: Real>(p1: &Mat3<T>, p2: &Mat3<T>) -> Result<T> {
    dhat_distance_with(p1, p2, &PathPolicy::default())
}

pub fn dhat_distance_with<T: Real>(p1: &Mat3<T>, p2: &Mat3<T>, policy: &PathPolicy) -> Result<T> {
    distance(p1, p2, &Unit, policy)
}

/// D(F, P1, P2): path infimum of Σ r(P̃_k, N(F, P̃_k)) |A_k|.
pub fn d_distance<T: Real>(
    f: &Mat3<T>,
    p1: &Mat3<T>,
    p2: &Mat3<T>,
    params: &MaterialParams<T>,
    policy: &PathPolicy,
) -> Result<T> {
    distance(p1, p2, &GapWeight { f: *f, params }, policy)
}

/// Cost of the single segment P = exp(A) P_prev with the midpoint weight; the
/// local model the plastic solver minimizes. `d_distance` never exceeds it.
pub fn one_segment_cost<T: Real>(
    f: &Mat3<T>,
    p_prev: &Mat3<T>,
    a: &TracelessMat3<T>,
    params: &MaterialParams<T>,
) -> Result<T> {
    let len = a.norm();
    if len.is_zero() {
        return Ok(T::zero());
    }
    let mid = mat_exp(&a.scale(T::lit(0.5))) * *p_prev;
    Ok(GapWeight { f: *f, params }.at(&mid)? * len)
}

/// 𝒟(F̂, P1, P2) = Σ_cells D(F̂_c, P1_c, P2_c) · cellvol.
pub fn dissipation_integral<T: Real>(
    grid: &Grid<T>,
    fhat: &[Mat3<T>],
    p1: &[Mat3<T>],
    p2: &[Mat3<T>],
    params: &MaterialParams<T>,
    policy: &PathPolicy,
) -> Result<T> {
    let n = grid.n_cells();
    if fhat.len() != n || p1.len() != n || p2.len() != n {
        return Err(Error::GridMismatch);
    }
    let per_cell: Result<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|c| d_distance(&fhat[c], &p1[c], &p2[c], params, policy))
        .collect();
    Ok(per_cell?.into_iter().sum::<T>() * grid.cell_volume())
}

/// Σ_{i=s+1}^{t} 𝒟_i over the recorded steps of the window [s, t].
pub fn total_dissipation<T: Real>(traj: &Trajectory<T>, s: usize, t: usize) -> Result<T> {
    let last = traj.steps();
    if s > t || t > last {
        return Err(Error::WindowOutOfRange { start: s, end: t, last });
    }
    Ok(traj.records()[s + 1..=t]
        .iter()
        .map(|r| r.dissipation)
        .sum())
}
