//! Self-check suite behind the `check` command: parameter validation, metric
//! properties of the dissipation distance, constitutive gradients against
//! central differences, frame indifference, polyconvexity along segments and
//! causality of the mollifier. Every check is seeded and reported in a
//! [`DiagnosticsReport`].

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::diagnostics::{CheckResult, DiagnosticsReport};
use crate::dissipation::{d_distance, dhat_distance_with, PathPolicy};
use crate::error::Result;
use crate::grid::Grid;
use crate::material::{first_piola, thermo_force, validate_params, MaterialParams};
use crate::mollify::{mollified_gradient, Kernels};
use crate::real::Real;
use crate::tensor::{mat_exp, Mat3, TracelessMat3};

/// Sizes of the sampled suites.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SuiteOptions {
    pub metric_samples: usize,
    pub gradient_samples: usize,
    pub frame_samples: usize,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            metric_samples: 50,
            gradient_samples: 100,
            frame_samples: 100,
            seed: 0,
        }
    }
}

fn random_sl3<R: Rng>(rng: &mut R, max_log: f64) -> Mat3<f64> {
    let norm = rng.gen_range(0.0..max_log);
    mat_exp(&TracelessMat3::random(rng, norm))
}

fn random_f<R: Rng>(rng: &mut R) -> Mat3<f64> {
    // det > 0 by construction: rotation · exp(traceless) · positive scaling
    let r = Mat3::random_rotation(rng);
    let norm = rng.gen_range(0.0..0.6);
    let u = mat_exp(&TracelessMat3::random(rng, norm));
    r * u * rng.gen_range(0.8..1.25)
}

fn result(name: &str, passed: bool, measured: f64, constants: Vec<(String, f64)>, clock: Instant, detail: String) -> CheckResult {
    CheckResult {
        name: name.into(),
        passed,
        measured,
        constants,
        runtime_seconds: clock.elapsed().as_secs_f64(),
        detail,
    }
}

/// Symmetry, triangle inequality, nondegeneracy and r₁D̂ ≤ D ≤ D̂/r₁ on
/// seeded SL(3) triples with |log| ≤ 2. Returns one check per property.
pub fn metric_checks(params: &MaterialParams<f64>, policy: &PathPolicy, n: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let clock = Instant::now();
    let r1 = params.r1();
    let samples: Vec<(Mat3<f64>, [Mat3<f64>; 3])> = {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let f = random_f(&mut rng);
                (f, [random_sl3(&mut rng, 2.0), random_sl3(&mut rng, 2.0), random_sl3(&mut rng, 2.0)])
            })
            .collect()
    };
    let rows: Vec<[f64; 4]> = samples
        .par_iter()
        .map(|(f, [a, b, c])| {
            let d = |x: &Mat3<f64>, y: &Mat3<f64>| d_distance(f, x, y, params, policy);
            let dab = d(a, b)?;
            let dba = d(b, a)?;
            let dbc = d(b, c)?;
            let dac = d(a, c)?;
            let daa = d(a, a)?;
            let dh = dhat_distance_with(a, b, policy)?;
            let sym = (dab - dba).abs();
            let tri = dac - dab - dbc;
            // nondegeneracy: D(a, a) = 0 and D(a, b) > 0 for a ≠ b
            let nondeg = if (*a - *b).norm() > 1e-8 && dab <= 1e-8 { 1.0 } else { daa };
            let bound = (r1 * dh - dab).max(dab - dh / r1);
            Ok([sym, tri, nondeg, bound])
        })
        .collect::<Result<_>>()?;
    let worst = |k: usize| rows.iter().map(|r| r[k]).fold(f64::NEG_INFINITY, f64::max);
    let detail = format!("{n} triples, |log| ≤ 2, seed {seed}");
    Ok(vec![
        result("metric_symmetry", worst(0) <= 1e-8, worst(0), vec![], clock, detail.clone()),
        result("metric_triangle", worst(1) <= 1e-8, worst(1), vec![], clock, detail.clone()),
        result("metric_nondegeneracy", worst(2) <= 1e-8, worst(2), vec![], clock, detail.clone()),
        result("metric_bounds", worst(3) <= 1e-8, worst(3), vec![("r1".into(), r1)], clock, detail),
    ])
}

/// Relative error of Π and N against central differences of the local density.
pub fn gradient_check(params: &MaterialParams<f64>, n: usize, seed: u64) -> Result<CheckResult> {
    let clock = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let f = random_f(&mut rng);
        let p = random_sl3(&mut rng, 1.0);
        let pi = first_piola(&f, &p, params)?;
        let nf = thermo_force(&f, &p, params)?;
        let h = 1e-5;
        let mut fd_pi = Mat3::zero();
        let mut fd_n = Mat3::zero();
        for i in 0..3 {
            for j in 0..3 {
                let e = Mat3::from_fn(|a, b| if (a, b) == (i, j) { h } else { 0.0 });
                let w = |f: &Mat3<f64>, p: &Mat3<f64>| params.local_density(f, p);
                fd_pi[(i, j)] = (w(&(f + e), &p)? - w(&(f - e), &p)?) / (2.0 * h);
                fd_n[(i, j)] = -(w(&f, &(p + e))? - w(&f, &(p - e))?) / (2.0 * h);
            }
        }
        worst = worst
            .max((pi - fd_pi).norm() / (1.0 + fd_pi.norm()))
            .max((nf - fd_n).norm() / (1.0 + fd_n.norm()));
    }
    Ok(result(
        "constitutive_gradients",
        worst <= 1e-5,
        worst,
        vec![],
        clock,
        format!("{n} states, central differences h = 1e-5"),
    ))
}

/// W(QF, P) = W(F, P) for rotations Q, and convexity of the polyconvex
/// extension along random segments in (F, cof F, det F).
pub fn frame_and_polyconvexity(params: &MaterialParams<f64>, n: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let clock = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frame: f64 = 0.0;
    let mut convex = f64::NEG_INFINITY;
    for _ in 0..n {
        let f = random_f(&mut rng);
        let p = random_sl3(&mut rng, 1.0);
        let q = Mat3::random_rotation(&mut rng);
        let w = params.local_density(&f, &p)?;
        frame = frame.max((params.local_density(&(q * f), &p)? - w).abs() / (1.0 + w.abs()));

        let (f0, f1) = (random_f(&mut rng), random_f(&mut rng));
        let ext = |f: &Mat3<f64>, c: &Mat3<f64>, d: f64| params.polyconvex_extension(f, c, d);
        let (c0, c1) = (f0.cofactor(), f1.cofactor());
        let (d0, d1) = (f0.det(), f1.det());
        let (e0, e1) = (ext(&f0, &c0, d0), ext(&f1, &c1, d1));
        let s: f64 = rng.gen_range(0.0..1.0);
        let mid = ext(&(f0 * (1.0 - s) + f1 * s), &(c0 * (1.0 - s) + c1 * s), d0 * (1.0 - s) + d1 * s);
        convex = convex.max((mid - ((1.0 - s) * e0 + s * e1)) / (1.0 + e0.abs() + e1.abs()));
    }
    Ok(vec![
        result("frame_indifference", frame <= 1e-12, frame, vec![], clock, format!("{n} samples")),
        result("polyconvexity", convex <= 1e-10, convex, vec![], clock, format!("{n} segments")),
    ])
}

/// Mutating gradient history entries after step i never changes (K_τ∇y)_i.
pub fn causality_check<T: Real>(grid: &Grid<T>, kernels: &Kernels<T>, seed: u64) -> Result<CheckResult> {
    let clock = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = kernels.kappa().len() - 1;
    let mut history: Vec<Vec<Mat3<T>>> = (0..=steps)
        .map(|_| (0..grid.n_cells()).map(|_| Mat3::<T>::random(&mut rng)).collect())
        .collect();
    let mut changed = 0usize;
    for i in 0..=steps {
        let before = mollified_gradient(&history, i, grid, kernels)?;
        for later in history.iter_mut().skip(i + 1) {
            for m in later.iter_mut() {
                *m = Mat3::random(&mut rng);
            }
        }
        if mollified_gradient(&history, i, grid, kernels)? != before {
            changed += 1;
        }
    }
    Ok(result(
        "mollifier_causality",
        changed == 0,
        changed as f64,
        vec![],
        clock,
        format!("{} steps mutated after each index", steps + 1),
    ))
}

/// Runs every suite.
pub fn property_suite(
    params: &MaterialParams<f64>,
    policy: &PathPolicy,
    grid: &Grid<f64>,
    kernels: &Kernels<f64>,
    opts: &SuiteOptions,
) -> Result<DiagnosticsReport> {
    let mut report = DiagnosticsReport::new();
    let clock = Instant::now();
    let v = validate_params(params);
    report.push(result(
        "validate_params",
        v.is_ok(),
        v.as_ref().map_or(0.0, |r| r.min_c_quotient.min(r.min_h_quotient)),
        v.as_ref().map_or_else(
            |_| vec![],
            |r| vec![("c1".into(), r.c1), ("c2".into(), r.c2), ("r1".into(), r.r1)],
        ),
        clock,
        v.as_ref().map_or_else(|e| e.to_string(), |_| "stationary identity, positive ℂ and ℍ".into()),
    ));
    for c in metric_checks(params, policy, opts.metric_samples, opts.seed)? {
        report.push(c);
    }
    report.push(gradient_check(params, opts.gradient_samples, opts.seed.wrapping_add(1))?);
    for c in frame_and_polyconvexity(params, opts.frame_samples, opts.seed.wrapping_add(2))? {
        report.push(c);
    }
    report.push(causality_check(grid, kernels, opts.seed.wrapping_add(3))?);
    Ok(report)
}
