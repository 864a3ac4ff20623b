//! Causal space-time mollifier K and its time-discrete version K_τ.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::real::Real;
use crate::tensor::Mat3;

/// Time kernel κ ≥ 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeKernel<T> {
    /// κ(t) = λ e^{−λt}.
    Exponential { rate_per_time: T },
    /// Explicit samples κ_j on the step grid (must cover every step).
    Samples { values_per_time: Vec<T> },
}

impl<T: Real> TimeKernel<T> {
    /// κ(t) for the analytic presets.
    pub fn eval(&self, t: T) -> Option<T> {
        match self {
            TimeKernel::Exponential { rate_per_time } => {
                Some(*rate_per_time * (-*rate_per_time * t).exp())
            }
            TimeKernel::Samples { .. } => None,
        }
    }
}

/// Space kernel φ ≥ 0 with compact support.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpaceKernel {
    /// Discrete delta: φ⋆F = F.
    Delta,
    /// Gaussian truncated at `radius_cells` (ℓ∞ stencil), width `sigma_cells`.
    TruncatedGaussian { radius_cells: usize, sigma_cells: f64 },
}

/// Sampled kernels for one time step size.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernels<T> {
    tau: T,
    kappa: Vec<T>,
    /// stencil offsets and φ values (1/volume), Σ φ · cellvol = 1
    stencil: Vec<([isize; 3], T)>,
    cell_volume: T,
    time: TimeKernel<T>,
    space: SpaceKernel,
}

impl<T: Real> Kernels<T> {
    /// Samples κ at t_j = jτ, j = 0..=nsteps, and φ on the grid stencil.
    pub fn new(time: TimeKernel<T>, space: SpaceKernel, grid: &Grid<T>, tau: T, nsteps: usize) -> Result<Self> {
        if !(tau > T::zero()) {
            return Err(Error::config("time.tau", "step size must be positive"));
        }
        let kappa: Vec<T> = match &time {
            TimeKernel::Exponential { rate_per_time } => {
                if !(*rate_per_time > T::zero()) {
                    return Err(Error::config(
                        "kernels.rate_per_time",
                        "exponential rate must be positive",
                    ));
                }
                (0..=nsteps)
                    .map(|j| time.eval(T::lit(j as f64) * tau).expect("analytic"))
                    .collect()
            }
            TimeKernel::Samples { values_per_time } => {
                if values_per_time.len() < nsteps + 1 {
                    return Err(Error::HistoryTooShort {
                        needed: nsteps + 1,
                        have: values_per_time.len(),
                    });
                }
                values_per_time[..=nsteps].to_vec()
            }
        };
        if kappa.iter().any(|k| !(*k >= T::zero()) || !k.is_finite()) {
            return Err(Error::config("kernels.time", "kappa must be finite and nonnegative"));
        }
        let vol = grid.cell_volume();
        let stencil = match space {
            SpaceKernel::Delta => vec![([0, 0, 0], vol.recip())],
            SpaceKernel::TruncatedGaussian {
                radius_cells,
                sigma_cells,
            } => {
                let cells = grid.cells();
                if cells.iter().any(|&n| radius_cells > n) {
                    return Err(Error::config(
                        "kernels.radius_cells",
                        "stencil radius exceeds the domain size",
                    ));
                }
                if !(sigma_cells > 0.0) {
                    return Err(Error::config("kernels.sigma_cells", "must be positive"));
                }
                let r = radius_cells as isize;
                let sig = T::lit(sigma_cells);
                let mut raw = Vec::new();
                for k in -r..=r {
                    for j in -r..=r {
                        for i in -r..=r {
                            // distance measured in cell units along each axis
                            let d2 = T::lit((i * i + j * j + k * k) as f64);
                            raw.push(([i, j, k], (-d2 / (T::lit(2.0) * sig * sig)).exp()));
                        }
                    }
                }
                let total: T = raw.iter().map(|(_, w)| *w).sum();
                raw.into_iter().map(|(o, w)| (o, w / (total * vol))).collect()
            }
        };
        Ok(Self {
            tau,
            kappa,
            stencil,
            cell_volume: vol,
            time,
            space,
        })
    }

    pub fn tau(&self) -> T {
        self.tau
    }

    pub fn kappa(&self) -> &[T] {
        &self.kappa
    }

    pub fn time_kernel(&self) -> &TimeKernel<T> {
        &self.time
    }

    pub fn space_kernel(&self) -> &SpaceKernel {
        &self.space
    }

    /// Stencil offsets with φ values.
    pub fn stencil(&self) -> &[([isize; 3], T)] {
        &self.stencil
    }

    /// Σ φ · cellvol (equals 1 up to rounding).
    pub fn phi_mass(&self) -> T {
        self.stencil.iter().map(|(_, w)| *w).sum::<T>() * self.cell_volume
    }

    /// τ Σ_j κ_j (discrete ‖κ‖₁).
    pub fn kappa_l1(&self) -> T {
        self.kappa.iter().copied().sum::<T>() * self.tau
    }

    pub fn phi_max(&self) -> T {
        self.stencil.iter().fold(T::zero(), |m, (_, w)| m.max(*w))
    }
}

/// (φ ⋆ F)_c = Σ_o φ_o · cellvol · F_{c+o}, with F extended by zero outside Ω.
pub fn space_convolve<T: Real>(field: &[Mat3<T>], grid: &Grid<T>, kernels: &Kernels<T>) -> Result<Vec<Mat3<T>>> {
    if field.len() != grid.n_cells() {
        return Err(Error::SizeMismatch {
            expected: grid.n_cells(),
            got: field.len(),
        });
    }
    let cells = grid.cells();
    let vol = grid.cell_volume();
    Ok((0..grid.n_cells())
        .into_par_iter()
        .map(|c| {
            let ijk = grid.cell_ijk(c);
            let mut acc = Mat3::zero();
            for (o, w) in kernels.stencil() {
                let mut nb = [0usize; 3];
                let mut inside = true;
                for d in 0..3 {
                    let v = ijk[d] as isize + o[d];
                    if v < 0 || v >= cells[d] as isize {
                        inside = false;
                        break;
                    }
                    nb[d] = v as usize;
                }
                if inside {
                    acc += field[grid.cell_index(nb)] * (*w * vol);
                }
            }
            acc
        })
        .collect())
}

/// (κ ∗_τ w)_i = Σ_{j=0}^{i} τ κ_j w_{i−j}, with (κ ∗_τ w)_0 = 0. Only entries
/// 0..=i of the history are read.
pub fn time_convolve_discrete<T: Real>(
    history: &[Vec<Mat3<T>>],
    i: usize,
    kernels: &Kernels<T>,
) -> Result<Vec<Mat3<T>>> {
    if history.len() < i + 1 {
        return Err(Error::HistoryTooShort {
            needed: i + 1,
            have: history.len(),
        });
    }
    if kernels.kappa.len() < i + 1 {
        return Err(Error::HistoryTooShort {
            needed: i + 1,
            have: kernels.kappa.len(),
        });
    }
    let n = history[0].len();
    if i == 0 {
        return Ok(vec![Mat3::zero(); n]);
    }
    let tau = kernels.tau;
    Ok((0..n)
        .into_par_iter()
        .map(|c| {
            let mut acc = Mat3::zero();
            for j in 0..=i {
                acc += history[i - j][c] * (tau * kernels.kappa[j]);
            }
            acc
        })
        .collect())
}

/// (K_τ ∇y)_i: spatial mollification of each history entry followed by the
/// discrete causal time convolution.
pub fn mollified_gradient<T: Real>(
    grad_history: &[Vec<Mat3<T>>],
    i: usize,
    grid: &Grid<T>,
    kernels: &Kernels<T>,
) -> Result<Vec<Mat3<T>>> {
    if grad_history.len() < i + 1 {
        return Err(Error::HistoryTooShort {
            needed: i + 1,
            have: grad_history.len(),
        });
    }
    if i == 0 {
        return Ok(vec![Mat3::zero(); grid.n_cells()]);
    }
    let smoothed: Result<Vec<_>> = grad_history[..=i]
        .iter()
        .map(|g| space_convolve(g, grid, kernels))
        .collect();
    time_convolve_discrete(&smoothed?, i, kernels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Face;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(n: usize) -> Grid<f64> {
        Grid::new([1.0; 3], [n; 3], &[Face::XMin]).unwrap()
    }

    fn gaussian(g: &Grid<f64>, tau: f64, n: usize) -> Kernels<f64> {
        Kernels::new(
            TimeKernel::Exponential { rate_per_time: 5.0 },
            SpaceKernel::TruncatedGaussian {
                radius_cells: 2,
                sigma_cells: 1.0,
            },
            g,
            tau,
            n,
        )
        .unwrap()
    }

    #[test]
    fn normalization_and_presets() {
        let g = grid(5);
        let k = gaussian(&g, 0.1, 10);
        assert!((k.phi_mass() - 1.0).abs() < 1e-12);
        assert_eq!(k.stencil().len(), 125);
        assert!((k.kappa()[0] - 5.0).abs() < 1e-15);
        assert!(Kernels::new(
            TimeKernel::Exponential { rate_per_time: 5.0 },
            SpaceKernel::TruncatedGaussian {
                radius_cells: 6,
                sigma_cells: 1.0
            },
            &g,
            0.1,
            10
        )
        .is_err());
    }

    #[test]
    fn space_convolution_examples() {
        let g = grid(6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f: Vec<Mat3<f64>> = (0..g.n_cells()).map(|_| Mat3::random(&mut rng)).collect();
        let delta = Kernels::new(
            TimeKernel::Exponential { rate_per_time: 1.0 },
            SpaceKernel::Delta,
            &g,
            0.1,
            3,
        )
        .unwrap();
        assert_eq!(space_convolve(&f, &g, &delta).unwrap(), f);
        let k = gaussian(&g, 0.1, 3);
        let a = Mat3::from_rows([[1.0, 2.0, 0.0], [0.0, -1.0, 0.5], [0.3, 0.0, 0.2]]);
        let constant = vec![a; g.n_cells()];
        let out = space_convolve(&constant, &g, &k).unwrap();
        let deep = g.cell_index([2, 3, 2]);
        assert!((out[deep] - a).norm() < 1e-12);
        let corner = g.cell_index([0, 0, 0]);
        assert!(out[corner].norm() < 0.9 * a.norm());
        // linearity
        let f2: Vec<Mat3<f64>> = (0..g.n_cells()).map(|_| Mat3::random(&mut rng)).collect();
        let sum: Vec<_> = f.iter().zip(&f2).map(|(x, y)| *x * 2.0 + *y).collect();
        let lhs = space_convolve(&sum, &g, &k).unwrap();
        let (o1, o2) = (space_convolve(&f, &g, &k).unwrap(), space_convolve(&f2, &g, &k).unwrap());
        for c in 0..g.n_cells() {
            assert!((lhs[c] - (o1[c] * 2.0 + o2[c])).norm() < 1e-12);
        }
    }

    #[test]
    fn time_convolution_examples() {
        let g = grid(2);
        let n = 6;
        let tau = 0.1;
        let k = Kernels::new(
            TimeKernel::Samples {
                values_per_time: vec![1.0; n + 1],
            },
            SpaceKernel::Delta,
            &g,
            tau,
            n,
        )
        .unwrap();
        let hist: Vec<Vec<Mat3<f64>>> = (0..=n).map(|_| vec![Mat3::identity(); 8]).collect();
        assert_eq!(time_convolve_discrete(&hist, 0, &k).unwrap()[0], Mat3::zero());
        for i in 1..=n {
            let v = time_convolve_discrete(&hist, i, &k).unwrap()[3];
            assert!((v[(0, 0)] - (i as f64 + 1.0) * tau).abs() < 1e-14);
        }
        assert!(matches!(
            time_convolve_discrete(&hist[..2], 3, &k),
            Err(Error::HistoryTooShort { .. })
        ));
    }

    #[test]
    fn causality_by_mutation() {
        let g = grid(3);
        let k = gaussian(&g, 0.05, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let hist: Vec<Vec<Mat3<f64>>> = (0..=8)
            .map(|_| (0..g.n_cells()).map(|_| Mat3::random(&mut rng)).collect())
            .collect();
        for i in 0..8 {
            let base = mollified_gradient(&hist, i, &g, &k).unwrap();
            let mut mutated = hist.clone();
            for later in mutated.iter_mut().skip(i + 1) {
                for m in later.iter_mut() {
                    *m = Mat3::random(&mut rng) * 1e3;
                }
            }
            assert_eq!(mollified_gradient(&mutated, i, &g, &k).unwrap(), base);
        }
    }

    #[test]
    fn space_and_time_commute() {
        let g = grid(3);
        let k = gaussian(&g, 0.1, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hist: Vec<Vec<Mat3<f64>>> = (0..=5)
            .map(|_| (0..g.n_cells()).map(|_| Mat3::random(&mut rng)).collect())
            .collect();
        let a = mollified_gradient(&hist, 5, &g, &k).unwrap();
        let t = time_convolve_discrete(&hist, 5, &k).unwrap();
        let b = space_convolve(&t, &g, &k).unwrap();
        for c in 0..g.n_cells() {
            assert!((a[c] - b[c]).norm() < 1e-12);
        }
    }

    #[test]
    fn delta_kernels_give_lagged_copy() {
        let g = grid(2);
        let n = 4;
        let tau = 0.5;
        // κ_0 = 1/τ, κ_j = 0 otherwise: (κ ∗_τ w)_i = w_i
        let mut vals = vec![0.0; n + 1];
        vals[0] = 1.0 / tau;
        let k = Kernels::new(
            TimeKernel::Samples {
                values_per_time: vals,
            },
            SpaceKernel::Delta,
            &g,
            tau,
            n,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let hist: Vec<Vec<Mat3<f64>>> = (0..=n)
            .map(|_| (0..8).map(|_| Mat3::random(&mut rng)).collect())
            .collect();
        for i in 1..=n {
            let out = mollified_gradient(&hist, i, &g, &k).unwrap();
            for c in 0..8 {
                assert!((out[c] - hist[i][c]).norm() < 1e-14);
            }
        }
        let zero: Vec<Vec<Mat3<f64>>> = vec![vec![Mat3::zero(); 8]; n + 1];
        assert!(mollified_gradient(&zero, 3, &g, &k)
            .unwrap()
            .iter()
            .all(|m| m.norm() == 0.0));
    }
}
