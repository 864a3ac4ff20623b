//! Incremental minimization scheme: alternating minimization in y (L-BFGS)
//! and P (proximal gradient on multiplicative sl(3) increments), time loop
//! and trajectory bookkeeping.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dissipation::{dissipation_integral, one_segment_cost, PathPolicy};
use crate::error::{Error, Result};
use crate::flowrule::gap_r;
use crate::grid::{Grid, LoadProgram};
use crate::material::{cell_energy, stored_energy, thermo_force, MaterialParams, StateField};
use crate::mollify::{space_convolve, time_convolve_discrete, Kernels};
use crate::real::Real;
use crate::tensor::{expm_frechet, mat_exp, renormalize_sl3, Mat3, Mat33, TracelessMat3};

/// Iteration limits and tolerances of the inner solvers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverPolicy {
    /// maximal y/P alternations per step
    pub outer_alternations: usize,
    /// stop alternating once the step objective decreases by less than this (energy units)
    pub energy_tolerance: f64,
    pub y_max_iterations: usize,
    /// Euclidean norm of the nodal gradient of the y-objective (force units)
    pub y_gradient_tolerance: f64,
    pub lbfgs_memory: usize,
    pub p_max_iterations: usize,
    /// norm of the proximal gradient mapping (energy per unit increment)
    pub p_tolerance: f64,
    /// competitors per sampled step in the stability test
    pub stability_competitors: usize,
}

impl Default for SolverPolicy {
    fn default() -> Self {
        Self {
            outer_alternations: 60,
            energy_tolerance: 1e-12,
            y_max_iterations: 5000,
            y_gradient_tolerance: 1e-9,
            lbfgs_memory: 10,
            p_max_iterations: 300,
            p_tolerance: 1e-10,
            stability_competitors: 50,
        }
    }
}

impl SolverPolicy {
    pub fn validate(&self) -> Result<()> {
        let tols = [
            ("solver.energy_tolerance", self.energy_tolerance),
            ("solver.y_gradient_tolerance", self.y_gradient_tolerance),
            ("solver.p_tolerance", self.p_tolerance),
        ];
        for (name, v) in tols {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(name, "tolerances must be positive"));
            }
        }
        if self.outer_alternations == 0 || self.y_max_iterations == 0 || self.p_max_iterations == 0 {
            return Err(Error::config("solver", "iteration limits must be positive"));
        }
        if self.lbfgs_memory == 0 {
            return Err(Error::config("solver.lbfgs_memory", "must be positive"));
        }
        Ok(())
    }

    /// The inner tolerance against which stability slack is judged: the
    /// energy-decrease tolerance of the step.
    pub fn inner_tolerance(&self) -> f64 {
        self.energy_tolerance
    }
}

/// Everything a step needs besides the history.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub grid: Grid<T>,
    pub params: MaterialParams<T>,
    pub loads: LoadProgram<T>,
    pub kernels: Kernels<T>,
    pub path: PathPolicy,
    pub policy: SolverPolicy,
}

impl<T: Real> Model<T> {
    /// ℰ(t, y, P) = stored energy − ⟨l(t), y⟩.
    pub fn energy(&self, t: T, state: &StateField<T>) -> Result<T> {
        Ok(stored_energy(state, &self.grid, &self.params)?
            - self.loads.external_work(&self.grid, state.y(), t)?)
    }
}

/// Bit flags recorded per step.
pub mod flags {
    /// the y-solver stopped above its gradient tolerance
    pub const Y_NOT_CONVERGED: u32 = 1;
    /// the P-solver hit its iteration limit
    pub const P_NOT_CONVERGED: u32 = 2;
    /// the alternation hit its limit
    pub const OUTER_NOT_CONVERGED: u32 = 4;
    /// the plastic update was rejected in favor of the frozen plastic strain
    pub const PLASTIC_FALLBACK: u32 = 8;
}

/// Per-step bookkeeping.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord<T> {
    pub step: usize,
    pub time: T,
    /// ℰ(t_i, y_i, P_i)
    pub energy: T,
    /// ⟨l(t_i), y_i⟩
    pub external_work: T,
    /// 𝒟((K_τ∇y)_{i−1}, P_{i−1}, P_i)
    pub dissipation: T,
    pub cumulative_dissipation: T,
    /// Σ_j ∫_{t_{j−1}}^{t_j} ∂_t ℰ(s, y_{j−1}, P_{j−1}) ds = −Σ_j ⟨l(t_j) − l(t_{j−1}), y_{j−1}⟩
    pub work_integral: T,
    /// ℰ_i + Diss_i − ℰ_0 − work_integral (≤ 0 by the discrete upper estimate)
    pub upper_gap: T,
    /// ⟨l̇(t_i), y_i⟩
    pub power: T,
    /// trapezoid rule for ∫_0^{t_i} ⟨l̇, y⟩
    pub power_integral: T,
    /// ℰ_i + Diss_i − ℰ_0 + ∫⟨l̇, y⟩ (energy balance residual)
    pub balance_residual: T,
    pub outer_iterations: usize,
    pub flags: u32,
}

/// Time-indexed discrete solution with the gradient history feeding K_τ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory<T> {
    tau: T,
    states: Vec<StateField<T>>,
    records: Vec<StepRecord<T>>,
    /// φ ⋆ ∇y_j
    #[serde(skip)]
    smoothed: Vec<Vec<Mat3<T>>>,
    /// (K_τ∇y)_j
    #[serde(skip)]
    mollified: Vec<Vec<Mat3<T>>>,
}

impl<T: Real> Trajectory<T> {
    pub fn tau(&self) -> T {
        self.tau
    }

    /// Number of completed steps.
    pub fn steps(&self) -> usize {
        self.records.len() - 1
    }

    pub fn time(&self, i: usize) -> T {
        T::lit(i as f64) * self.tau
    }

    pub fn states(&self) -> &[StateField<T>] {
        &self.states
    }

    pub fn state(&self, i: usize) -> &StateField<T> {
        &self.states[i]
    }

    pub fn records(&self) -> &[StepRecord<T>] {
        &self.records
    }

    /// (K_τ∇y)_i, available for i ≤ steps().
    pub fn mollified(&self, i: usize) -> Result<&[Mat3<T>]> {
        self.mollified
            .get(i)
            .map(|v| v.as_slice())
            .ok_or(Error::HistoryTooShort {
                needed: i + 1,
                have: self.mollified.len(),
            })
    }

    /// Recomputes caches and the mollified history after deserialization.
    pub fn rebuild(&mut self, grid: &Grid<T>, kernels: &Kernels<T>) -> Result<()> {
        self.smoothed.clear();
        self.mollified.clear();
        for i in 0..self.states.len() {
            self.states[i].refresh(grid)?;
            self.push_history(i, grid, kernels)?;
        }
        Ok(())
    }

    fn push_history(&mut self, i: usize, grid: &Grid<T>, kernels: &Kernels<T>) -> Result<()> {
        let gy = self.states[i].grad_y()?.to_vec();
        self.smoothed.push(space_convolve(&gy, grid, kernels)?);
        let m = time_convolve_discrete(&self.smoothed, i, kernels)?;
        self.mollified.push(m);
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Io(e.to_string()))
    }

    /// Reads only the step size from a serialized trajectory, so the
    /// matching kernels can be built before [`Trajectory::from_json`].
    pub fn stored_tau(s: &str) -> Result<T> {
        #[derive(Deserialize)]
        struct Tau<T> {
            tau: T,
        }
        let t: Tau<T> = serde_json::from_str(s).map_err(|e| Error::Io(e.to_string()))?;
        Ok(t.tau)
    }

    pub fn from_json(s: &str, grid: &Grid<T>, kernels: &Kernels<T>) -> Result<Self> {
        let mut t: Self = serde_json::from_str(s).map_err(|e| Error::Io(e.to_string()))?;
        if t.states.is_empty() || t.records.len() != t.states.len() {
            return Err(Error::Io("trajectory file is inconsistent".into()));
        }
        t.rebuild(grid, kernels)?;
        Ok(t)
    }
}

/// Outcome of an inner minimization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InnerReport<T> {
    pub iterations: usize,
    pub converged: bool,
    /// final gradient norm (y) or gradient-mapping norm (P)
    pub residual: T,
    pub objective: T,
}

/// Options of [`lbfgs_minimize`].
#[derive(Clone, Copy, Debug)]
pub struct LbfgsOptions<T> {
    pub max_iterations: usize,
    pub gradient_tolerance: T,
    pub memory: usize,
    /// absolute rounding level of the objective; steps that change f by less
    /// than this are judged by the gradient norm instead
    pub f_noise: T,
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(x, y)| *x * *y).sum()
}

/// Limited-memory BFGS with Armijo backtracking. Every accepted iterate
/// strictly decreases the objective; returns the best point found.
pub fn lbfgs_minimize<T: Real>(
    x0: Vec<T>,
    mut fg: impl FnMut(&[T]) -> Result<(T, Vec<T>)>,
    opts: &LbfgsOptions<T>,
) -> Result<(Vec<T>, InnerReport<T>)> {
    let mut x = x0;
    let (mut f, mut g) = fg(&x)?;
    let mut s_hist: Vec<Vec<T>> = Vec::new();
    let mut y_hist: Vec<Vec<T>> = Vec::new();
    let mut iterations = 0;
    loop {
        let gn = dot(&g, &g).sqrt();
        if gn <= opts.gradient_tolerance {
            return Ok((
                x,
                InnerReport {
                    iterations,
                    converged: true,
                    residual: gn,
                    objective: f,
                },
            ));
        }
        if iterations >= opts.max_iterations {
            return Ok((
                x,
                InnerReport {
                    iterations,
                    converged: false,
                    residual: gn,
                    objective: f,
                },
            ));
        }
        // two-loop recursion
        let mut q = g.clone();
        let k = s_hist.len();
        let mut alphas = vec![T::zero(); k];
        for j in (0..k).rev() {
            let rho = dot(&y_hist[j], &s_hist[j]).recip();
            alphas[j] = rho * dot(&s_hist[j], &q);
            for (qi, yi) in q.iter_mut().zip(&y_hist[j]) {
                *qi -= alphas[j] * *yi;
            }
        }
        let gamma = if k > 0 {
            dot(&s_hist[k - 1], &y_hist[k - 1]) / dot(&y_hist[k - 1], &y_hist[k - 1])
        } else {
            T::one() / gn.max(T::one())
        };
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
        for j in 0..k {
            let rho = dot(&y_hist[j], &s_hist[j]).recip();
            let beta = rho * dot(&y_hist[j], &q);
            for (qi, si) in q.iter_mut().zip(&s_hist[j]) {
                *qi += (alphas[j] - beta) * *si;
            }
        }
        let mut d: Vec<T> = q.iter().map(|v| -*v).collect();
        let mut slope = dot(&g, &d);
        if !(slope < T::zero()) {
            s_hist.clear();
            y_hist.clear();
            d = g.iter().map(|v| -*v / gn.max(T::one())).collect();
            slope = dot(&g, &d);
        }
        let mut step = T::one();
        let mut accepted = None;
        for _ in 0..60 {
            let xt: Vec<T> = x.iter().zip(&d).map(|(xi, di)| *xi + step * *di).collect();
            if let Ok((ft, gt)) = fg(&xt) {
                // sufficient decrease, or (once f stagnates at working precision)
                // no increase together with a smaller gradient
                let armijo = ft <= f + T::lit(1e-4) * step * slope && ft < f;
                let roundoff = opts.f_noise + T::lit(8.0) * T::epsilon() * f.abs();
                let flat = ft <= f + roundoff && dot(&gt, &gt).sqrt() < T::lit(0.9) * gn;
                if ft.is_finite() && (armijo || flat) {
                    accepted = Some((xt, ft, gt));
                    break;
                }
            }
            step *= T::lit(0.5);
        }
        iterations += 1;
        let Some((xt, ft, gt)) = accepted else {
            if !s_hist.is_empty() {
                // retry from a steepest-descent step before giving up
                s_hist.clear();
                y_hist.clear();
                continue;
            }
            // no decrease possible at working precision
            let gn = dot(&g, &g).sqrt();
            return Ok((
                x,
                InnerReport {
                    iterations,
                    converged: gn <= opts.gradient_tolerance,
                    residual: gn,
                    objective: f,
                },
            ));
        };
        let s: Vec<T> = xt.iter().zip(&x).map(|(a, b)| *a - *b).collect();
        let yv: Vec<T> = gt.iter().zip(&g).map(|(a, b)| *a - *b).collect();
        if dot(&s, &yv) > T::epsilon() * dot(&yv, &yv) {
            s_hist.push(s);
            y_hist.push(yv);
            if s_hist.len() > opts.memory {
                s_hist.remove(0);
                y_hist.remove(0);
            }
        }
        x = xt;
        f = ft;
        g = gt;
    }
}

/// Rounding level of the discrete energy: the cell densities are sums of
/// O(1) terms that cancel near the stress-free state.
fn energy_noise<T: Real>(model: &Model<T>) -> T {
    let c = &model.params.coeffs;
    let scale = T::lit(3.0) * (c.alpha + c.beta + c.delta + c.c_p) + c.gamma_det + T::one();
    T::lit(16.0) * T::epsilon() * scale * model.grid.cell_volume() * T::lit(model.grid.n_cells() as f64)
}

/// Free (non-Dirichlet) node indices.
fn free_nodes<T: Real>(grid: &Grid<T>) -> Vec<usize> {
    (0..grid.n_nodes()).filter(|&n| !grid.is_dirichlet(n)).collect()
}

/// Stored energy − work and its nodal gradient at fixed P, inverse of P given.
fn y_objective<T: Real>(
    model: &Model<T>,
    y: &[[T; 3]],
    p: &[Mat3<T>],
    pinv: &[Mat3<T>],
    grad_p_energy: T,
    load: &[[T; 3]],
) -> Result<(T, Vec<[T; 3]>)> {
    let grid = &model.grid;
    let gy = grid.gradient_y(y)?;
    let per_cell: Vec<(T, Mat3<T>)> = (0..grid.n_cells())
        .into_par_iter()
        .map(|c| {
            let fe = gy[c] * pinv[c];
            let w = model.params.elastic_density(&fe) + model.params.plastic_density(&p[c]);
            let s = model.params.elastic_stress(&fe) * pinv[c].transpose();
            (w, s)
        })
        .collect();
    let vol = grid.cell_volume();
    let mut e = T::zero();
    let mut stress = Vec::with_capacity(per_cell.len());
    for (w, s) in per_cell {
        e += w;
        stress.push(s);
    }
    let mut e = e * vol + grad_p_energy;
    let mut g = grid.gradient_y_adjoint(&stress);
    for (n, (gn, l)) in g.iter_mut().zip(load).enumerate() {
        e -= gn_dot(&y[n], l);
        for d in 0..3 {
            gn[d] -= l[d];
        }
    }
    Ok((e, g))
}

fn gn_dot<T: Real>(a: &[T; 3], b: &[T; 3]) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Minimizes ℰ(t, ·, P) over y with clamped Dirichlet nodes (P fixed).
pub fn minimize_y<T: Real>(state: &mut StateField<T>, t: T, model: &Model<T>) -> Result<InnerReport<T>> {
    let grid = &model.grid;
    let p = state.p().to_vec();
    let pinv: Vec<Mat3<T>> = p
        .iter()
        .map(|m| m.try_inverse().ok_or(Error::SingularP))
        .collect::<Result<_>>()?;
    let gp = grid.gradient_p(&p)?;
    let gp_energy: T = gp.iter().map(|g| model.params.gradient_density(g)).sum::<T>() * grid.cell_volume();
    let load = model.loads.load_vector(grid, t)?;
    let free = free_nodes(grid);
    let base = state.y().to_vec();
    let x0: Vec<T> = free.iter().flat_map(|&n| base[n]).collect();
    let assemble = |x: &[T]| {
        let mut y = base.clone();
        for (k, &n) in free.iter().enumerate() {
            y[n] = [x[3 * k], x[3 * k + 1], x[3 * k + 2]];
        }
        y
    };
    let opts = LbfgsOptions {
        max_iterations: model.policy.y_max_iterations,
        gradient_tolerance: T::lit(model.policy.y_gradient_tolerance),
        memory: model.policy.lbfgs_memory,
        f_noise: energy_noise(model),
    };
    let (x, report) = lbfgs_minimize(
        x0,
        |x| {
            let y = assemble(x);
            let (e, g) = y_objective(model, &y, &p, &pinv, gp_energy, &load)?;
            Ok((e, free.iter().flat_map(|&n| g[n]).collect()))
        },
        &opts,
    )?;
    state.set_y(grid, assemble(&x))?;
    state.refresh(grid)?;
    Ok(report)
}

/// Data of the plastic subproblem at fixed y.
struct PlasticProblem<'a, T> {
    model: &'a Model<T>,
    grad_y: &'a [Mat3<T>],
    p_prev: &'a [Mat3<T>],
    fhat: &'a [Mat3<T>],
}

struct PlasticEval<T> {
    smooth: T,
    diss: T,
    p: Vec<Mat3<T>>,
}

impl<T: Real> PlasticProblem<'_, T> {
    fn eval(&self, a: &[TracelessMat3<T>]) -> Result<PlasticEval<T>> {
        let grid = &self.model.grid;
        let prm = &self.model.params;
        let p: Vec<Mat3<T>> = a
            .par_iter()
            .zip(self.p_prev.par_iter())
            .map(|(ac, pp)| renormalize_sl3(&(mat_exp(ac) * *pp)))
            .collect();
        let gp = grid.gradient_p(&p)?;
        let per: Vec<Result<(T, T)>> = (0..grid.n_cells())
            .into_par_iter()
            .map(|c| {
                let w = cell_energy(prm, &self.grad_y[c], &p[c], &gp[c])?;
                let d = one_segment_cost(&self.fhat[c], &self.p_prev[c], &a[c], prm)?;
                Ok((w, d))
            })
            .collect();
        let vol = grid.cell_volume();
        let (mut s, mut d) = (T::zero(), T::zero());
        for r in per {
            let (w, dc) = r?;
            s += w;
            d += dc;
        }
        Ok(PlasticEval {
            smooth: s * vol,
            diss: d * vol,
            p,
        })
    }

    /// Gradient of the smooth part with respect to the increments A_c.
    fn gradient(&self, a: &[TracelessMat3<T>], p: &[Mat3<T>]) -> Result<Vec<TracelessMat3<T>>> {
        let grid = &self.model.grid;
        let prm = &self.model.params;
        let vol = grid.cell_volume();
        let gp = grid.gradient_p(p)?;
        let gstress: Vec<Mat33<T>> = gp.iter().map(|g| prm.gradient_stress(g).scale(vol)).collect();
        let nonlocal = grid.gradient_p_adjoint(&gstress);
        (0..grid.n_cells())
            .into_par_iter()
            .map(|c| {
                // ∂_P [W_e(∇y P⁻¹) + W_p(P)] = −N(∇y, P)
                let n = thermo_force(&self.grad_y[c], &p[c], prm)?;
                let g = nonlocal[c] - n * vol;
                let (_, l) = expm_frechet(&a[c].as_mat().transpose(), &(g * self.p_prev[c].transpose()));
                Ok(TracelessMat3::project(l))
            })
            .collect()
    }

    /// Midpoint gap weights of the one-segment model, lagged at `a`.
    fn weights(&self, a: &[TracelessMat3<T>]) -> Result<Vec<T>> {
        let prm = &self.model.params;
        (0..a.len())
            .into_par_iter()
            .map(|c| {
                let mid = mat_exp(&a[c].scale(T::lit(0.5))) * self.p_prev[c];
                let n = thermo_force(&self.fhat[c], &mid, prm)?;
                Ok(gap_r(&mid, &n, &prm.flow))
            })
            .collect()
    }
}

fn shrink<T: Real>(z: &TracelessMat3<T>, thr: T) -> TracelessMat3<T> {
    let n = z.norm();
    if n <= thr {
        TracelessMat3::zero()
    } else {
        z.scale(T::one() - thr / n)
    }
}

/// Minimizes stored energy + Σ_c vol · r(mid_c)|A_c| over P_c = exp(A_c) P_prev,c
/// by proximal gradient with backtracking; `a` is the warm start and is updated.
/// The model objective never increases.
pub fn minimize_p<T: Real>(
    state: &mut StateField<T>,
    a: &mut [TracelessMat3<T>],
    p_prev: &[Mat3<T>],
    fhat: &[Mat3<T>],
    model: &Model<T>,
) -> Result<InnerReport<T>> {
    let grid = &model.grid;
    let grad_y = state.grad_y()?.to_vec();
    let prob = PlasticProblem {
        model,
        grad_y: &grad_y,
        p_prev,
        fhat,
    };
    let vol = grid.cell_volume();
    let mut cur = prob.eval(a)?;
    let mut obj = cur.smooth + cur.diss;
    // initial step from a stiffness estimate of the elastic energy per cell
    let c = &model.params.coeffs;
    let stiff = T::lit(4.0) * (c.alpha + c.beta + c.gamma_det) + T::lit(2.0) * c.h_p + T::one();
    let mut step = (stiff * vol).recip();
    let tol = T::lit(model.policy.p_tolerance);
    let mut iterations = 0;
    let mut residual = T::infinity();
    let mut converged = false;
    while iterations < model.policy.p_max_iterations {
        iterations += 1;
        let g = prob.gradient(a, &cur.p)?;
        let w = prob.weights(a)?;
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<TracelessMat3<T>> = a
                .iter()
                .zip(&g)
                .zip(&w)
                .map(|((ac, gc), wc)| shrink(&(*ac - gc.scale(step)), step * vol * *wc))
                .collect();
            let diff2: T = trial
                .iter()
                .zip(a.iter())
                .map(|(t, s)| {
                    let d = *t - *s;
                    d.norm() * d.norm()
                })
                .sum();
            residual = diff2.sqrt() / step;
            if diff2.is_zero() {
                converged = true;
                break;
            }
            let ev = prob.eval(&trial)?;
            let lin: T = trial
                .iter()
                .zip(a.iter())
                .zip(&g)
                .map(|((t, s), gc)| (*t - *s).as_mat().dot(gc.as_mat()))
                .sum();
            let majorized = ev.smooth <= cur.smooth + lin + diff2 / (T::lit(2.0) * step);
            let new_obj = ev.smooth + ev.diss;
            if majorized && new_obj <= obj {
                a.copy_from_slice(&trial);
                cur = ev;
                let decrease = obj - new_obj;
                obj = new_obj;
                accepted = true;
                if residual <= tol || decrease <= T::lit(1e-3) * T::lit(model.policy.energy_tolerance) {
                    converged = residual <= tol || decrease.is_zero();
                }
                break;
            }
            step *= T::lit(0.5);
        }
        if converged || !accepted {
            converged = converged || residual <= tol;
            break;
        }
        step *= T::lit(1.5);
    }
    state.set_p(cur.p)?;
    state.refresh(grid)?;
    Ok(InnerReport {
        iterations,
        converged,
        residual,
        objective: obj,
    })
}

/// Initial state: P0 given, y₀ minimizes ℰ(0, ·, P0).
pub fn initial_state<T: Real>(p0: Vec<Mat3<T>>, model: &Model<T>) -> Result<StateField<T>> {
    let grid = &model.grid;
    let mut state = StateField::new(grid, grid.identity_y(), p0)?;
    let t0 = model.loads.start();
    let report = minimize_y(&mut state, t0, model)?;
    if !report.converged && report.residual > T::lit(model.policy.y_gradient_tolerance * 1e3) {
        return Err(Error::NonConvergence(format!(
            "initial y-minimization stopped at gradient norm {} after {} iterations",
            report.residual, report.iterations
        )));
    }
    Ok(state)
}

impl<T: Real> Trajectory<T> {
    /// Starts a trajectory at the given initial state (time 0).
    pub fn start(state: StateField<T>, model: &Model<T>) -> Result<Self> {
        let tau = model.kernels.tau();
        let t0 = T::zero();
        let energy = model.energy(t0, &state)?;
        let work = model.loads.external_work(&model.grid, state.y(), t0)?;
        let power = model.loads.external_power(&model.grid, state.y(), t0)?;
        let rec = StepRecord {
            step: 0,
            time: t0,
            energy,
            external_work: work,
            dissipation: T::zero(),
            cumulative_dissipation: T::zero(),
            work_integral: T::zero(),
            upper_gap: T::zero(),
            power,
            power_integral: T::zero(),
            balance_residual: T::zero(),
            outer_iterations: 0,
            flags: 0,
        };
        let mut traj = Self {
            tau,
            states: vec![state],
            records: vec![rec],
            smoothed: Vec::new(),
            mollified: Vec::new(),
        };
        traj.push_history(0, &model.grid, &model.kernels)?;
        Ok(traj)
    }
}

/// Step objective ℰ(t_i, y, P) + model dissipation for the increments `a`.
fn step_objective<T: Real>(
    model: &Model<T>,
    t: T,
    state: &StateField<T>,
    a: &[TracelessMat3<T>],
    p_prev: &[Mat3<T>],
    fhat: &[Mat3<T>],
) -> Result<T> {
    let diss: Vec<T> = (0..a.len())
        .into_par_iter()
        .map(|c| one_segment_cost(&fhat[c], &p_prev[c], &a[c], &model.params))
        .collect::<Result<_>>()?;
    Ok(model.energy(t, state)? + diss.into_iter().sum::<T>() * model.grid.cell_volume())
}

/// Performs step i (requires steps 0..i−1) and appends it to the trajectory.
pub fn incremental_step<T: Real>(traj: &mut Trajectory<T>, i: usize, model: &Model<T>) -> Result<()> {
    if traj.steps() + 1 != i {
        return Err(Error::Precondition(format!(
            "step {i} requested but {} steps are done",
            traj.steps()
        )));
    }
    let grid = &model.grid;
    let t = traj.time(i);
    let t_prev = traj.time(i - 1);
    let prev = traj.states[i - 1].clone();
    let p_prev = prev.p().to_vec();
    let fhat = traj.mollified(i - 1)?.to_vec();
    let mut a = vec![TracelessMat3::zero(); grid.n_cells()];
    let mut state = prev.clone();
    let start_energy = model.energy(t, &prev)?;
    let mut obj = start_energy;
    let mut flags_set = 0u32;
    let mut outer = 0;
    let mut outer_converged = false;
    while outer < model.policy.outer_alternations {
        outer += 1;
        let ry = minimize_y(&mut state, t, model)?;
        let rp = minimize_p(&mut state, &mut a, &p_prev, &fhat, model)?;
        let new_obj = step_objective(model, t, &state, &a, &p_prev, &fhat)?;
        let decrease = obj - new_obj;
        obj = new_obj.min(obj);
        let last = decrease <= T::lit(model.policy.energy_tolerance);
        if last {
            if !ry.converged {
                flags_set |= flags::Y_NOT_CONVERGED;
            }
            if !rp.converged {
                flags_set |= flags::P_NOT_CONVERGED;
            }
            outer_converged = true;
            break;
        }
    }
    // final smooth solve so y is stationary for the accepted P
    let ry = minimize_y(&mut state, t, model)?;
    if !ry.converged {
        flags_set |= flags::Y_NOT_CONVERGED;
    }
    if !outer_converged {
        flags_set |= flags::OUTER_NOT_CONVERGED;
    }
    let mut diss = dissipation_integral(grid, &fhat, &p_prev, state.p(), &model.params, &model.path)?;
    let mut energy = model.energy(t, &state)?;
    // safeguard of the discrete upper energy estimate ℰ_i + 𝒟_i ≤ ℰ(t_i, y_{i−1}, P_{i−1})
    let slack = T::lit(1e-13) * (T::one() + start_energy.abs());
    if energy + diss > start_energy + slack {
        let mut frozen = prev.clone();
        minimize_y(&mut frozen, t, model)?;
        let e_frozen = model.energy(t, &frozen)?;
        if e_frozen <= start_energy {
            state = frozen;
            energy = e_frozen;
            diss = T::zero();
            flags_set |= flags::PLASTIC_FALLBACK;
        }
    }
    let prev_rec = traj.records[i - 1];
    let load_prev = model.loads.external_work(grid, prev.y(), t)?
        - model.loads.external_work(grid, prev.y(), t_prev)?;
    let work_integral = prev_rec.work_integral - load_prev;
    let cumulative = prev_rec.cumulative_dissipation + diss;
    let e0 = traj.records[0].energy;
    let power = model.loads.external_power(grid, state.y(), t)?;
    let power_integral = prev_rec.power_integral + (prev_rec.power + power) * traj.tau * T::lit(0.5);
    let rec = StepRecord {
        step: i,
        time: t,
        energy,
        external_work: model.loads.external_work(grid, state.y(), t)?,
        dissipation: diss,
        cumulative_dissipation: cumulative,
        work_integral,
        upper_gap: energy + cumulative - e0 - work_integral,
        power,
        power_integral,
        balance_residual: energy + cumulative - e0 + power_integral,
        outer_iterations: outer,
        flags: flags_set,
    };
    traj.states.push(state);
    traj.records.push(rec);
    traj.push_history(i, grid, &model.kernels)
}

/// Runs all steps from the minimized initial state with P0 ≡ I.
pub fn run_model<T: Real>(model: &Model<T>, nsteps: usize) -> Result<Trajectory<T>> {
    let tau = model.kernels.tau();
    let t_end = T::lit(nsteps as f64) * tau;
    if t_end > model.loads.end() * (T::one() + T::lit(1e-12)) {
        return Err(Error::TimeOutOfRange(t_end.as_f64()));
    }
    let p0 = vec![Mat3::identity(); model.grid.n_cells()];
    let s0 = initial_state(p0, model)?;
    let mut traj = Trajectory::start(s0, model)?;
    for i in 1..=nsteps {
        incremental_step(&mut traj, i, model).map_err(|e| match e {
            Error::NonConvergence(m) => Error::NonConvergence(format!("step {i}: {m}")),
            other => other,
        })?;
    }
    Ok(traj)
}
