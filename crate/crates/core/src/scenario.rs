//! Scenario configuration (TOML with units in field names) and the
//! end-to-end evolution driver.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diagnostics::{gronwall_check, GronwallReport};
use crate::dissipation::PathPolicy;
use crate::error::{Error, Result};
use crate::flowrule::FlowConstants;
use crate::grid::{Face, Grid, LoadInterpolation, LoadProgram};
use crate::material::{validate_params, MaterialCoefficients, MaterialParams, ValidationReport};
use crate::mollify::{Kernels, SpaceKernel, TimeKernel};
use crate::real::Real;
use crate::solver::{run_model, Model, SolverPolicy, Trajectory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub extent_m: [f64; 3],
    pub cells: [usize; 3],
    /// faces with clamped deformation, e.g. `["x_min"]`
    pub dirichlet_faces: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaterialConfig {
    pub alpha_pa: f64,
    pub beta_pa: f64,
    pub gamma_det_pa: f64,
    pub delta_pa: f64,
    pub hardening_h_p_pa: f64,
    pub c_p_pa: f64,
    /// μ in Pa·m^{q_r}
    pub mu_gradient_weight_pa_m_qr: f64,
    pub q_deformation_exponent: f64,
    pub q_elastic_exponent: f64,
    pub q_plastic_exponent: f64,
    pub q_gradient_exponent: f64,
}

impl Default for MaterialConfig {
    fn default() -> Self {
        let c = MaterialCoefficients::<f64>::default();
        Self {
            alpha_pa: c.alpha,
            beta_pa: c.beta,
            gamma_det_pa: c.gamma_det,
            delta_pa: c.delta,
            hardening_h_p_pa: c.h_p,
            c_p_pa: c.c_p,
            mu_gradient_weight_pa_m_qr: c.mu,
            q_deformation_exponent: c.q,
            q_elastic_exponent: c.q_e,
            q_plastic_exponent: c.q_p,
            q_gradient_exponent: c.q_r,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub r0_pa: f64,
    pub g0_dimensionless: f64,
    pub rmax_pa: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        let f = FlowConstants::<f64>::default();
        Self {
            r0_pa: f.r_0,
            g0_dimensionless: f.g_0,
            rmax_pa: f.r_max,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimeKernelConfig {
    Exponential { rate_per_s: f64 },
    Samples { values_per_s: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpaceKernelConfig {
    Delta,
    TruncatedGaussian { radius_cells: usize, sigma_cells: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelConfig {
    pub time: TimeKernelConfig,
    pub space: SpaceKernelConfig,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            time: TimeKernelConfig::Exponential { rate_per_s: 5.0 },
            space: SpaceKernelConfig::TruncatedGaussian {
                radius_cells: 2,
                sigma_cells: 1.0,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TractionConfig {
    pub face: String,
    /// one value per knot
    pub values_pa: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadConfig {
    #[serde(default)]
    pub interpolation: LoadInterpolation,
    pub times_s: Vec<f64>,
    /// uniform body force, one value per knot (all zero if omitted)
    #[serde(default)]
    pub body_force_n_per_m3: Vec<[f64; 3]>,
    #[serde(default)]
    pub traction: Vec<TractionConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub end_time_s: f64,
    pub nsteps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub outer_alternations: usize,
    pub energy_tolerance_j: f64,
    pub y_max_iterations: usize,
    pub y_gradient_tolerance_n: f64,
    pub lbfgs_memory: usize,
    pub p_max_iterations: usize,
    pub p_tolerance_j: f64,
    pub stability_competitors: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverPolicy::default().into()
    }
}

impl From<SolverPolicy> for SolverConfig {
    fn from(p: SolverPolicy) -> Self {
        Self {
            outer_alternations: p.outer_alternations,
            energy_tolerance_j: p.energy_tolerance,
            y_max_iterations: p.y_max_iterations,
            y_gradient_tolerance_n: p.y_gradient_tolerance,
            lbfgs_memory: p.lbfgs_memory,
            p_max_iterations: p.p_max_iterations,
            p_tolerance_j: p.p_tolerance,
            stability_competitors: p.stability_competitors,
        }
    }
}

impl From<&SolverConfig> for SolverPolicy {
    fn from(c: &SolverConfig) -> Self {
        Self {
            outer_alternations: c.outer_alternations,
            energy_tolerance: c.energy_tolerance_j,
            y_max_iterations: c.y_max_iterations,
            y_gradient_tolerance: c.y_gradient_tolerance_n,
            lbfgs_memory: c.lbfgs_memory,
            p_max_iterations: c.p_max_iterations,
            p_tolerance: c.p_tolerance_j,
            stability_competitors: c.stability_competitors,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub seed: u64,
    pub directory: PathBuf,
    /// per-step flat CSV field dumps
    pub dump_fields: bool,
    /// per-step legacy VTK dumps (only together with `dump_fields`)
    pub vtk: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            directory: PathBuf::from("out"),
            dump_fields: false,
            vtk: false,
        }
    }
}

/// Raw configuration file contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub grid: GridConfig,
    #[serde(default)]
    pub material: MaterialConfig,
    #[serde(default)]
    pub flow: FlowConfig,
    #[serde(default)]
    pub kernels: KernelConfig,
    pub loads: LoadConfig,
    pub time: TimeConfig,
    #[serde(default)]
    pub path: PathPolicy,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

/// Bundled 4³ shear-ramp configuration.
pub const SHEAR_RAMP_TOML: &str = include_str!("../../../configs/shear_ramp.cfg");

impl ScenarioConfig {
    /// Parses TOML; errors name the offending field and position.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let field = field_from_message(e.message());
            let mut msg = e.message().trim().to_string();
            if let Some(span) = e.span() {
                let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
                msg = format!("line {line}: {msg}");
            }
            Error::config(field, msg)
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn shear_ramp() -> Self {
        Self::from_toml(SHEAR_RAMP_TOML).expect("bundled configuration parses")
    }

    pub fn tau(&self) -> f64 {
        self.time.end_time_s / self.time.nsteps as f64
    }

    /// Sets the step size, keeping the end time; τ must divide T.
    pub fn set_tau(&mut self, tau: f64) -> Result<()> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::config("time.tau", "step size must be positive"));
        }
        let n = self.time.end_time_s / tau;
        let rounded = n.round();
        if rounded < 1.0 || (n - rounded).abs() > 1e-9 * n.max(1.0) {
            return Err(Error::config(
                "time.tau",
                format!("τ = {tau} does not divide T = {}", self.time.end_time_s),
            ));
        }
        self.time.nsteps = rounded as usize;
        Ok(())
    }

    /// Builds the typed scenario.
    pub fn build<T: Real>(&self) -> Result<Scenario<T>> {
        Scenario::from_config(self)
    }
}

/// Extracts the field name from a serde message such as "missing field `x`".
fn field_from_message(msg: &str) -> String {
    msg.split('`').nth(1).unwrap_or("config").to_string()
}

/// Validated scenario with typed components.
#[derive(Clone, Debug)]
pub struct Scenario<T> {
    pub config: ScenarioConfig,
    pub grid: Grid<T>,
    pub params: MaterialParams<T>,
    pub validation: ValidationReport,
    pub loads: LoadProgram<T>,
    pub time_kernel: TimeKernel<T>,
    pub space_kernel: SpaceKernel,
    pub path: PathPolicy,
    pub policy: SolverPolicy,
    pub tau: T,
    pub nsteps: usize,
    pub seed: u64,
}

fn lit3<T: Real>(v: [f64; 3]) -> [T; 3] {
    [T::lit(v[0]), T::lit(v[1]), T::lit(v[2])]
}

fn parse_face(name: &str, field: &str) -> Result<Face> {
    Face::parse(name).ok_or_else(|| Error::config(field, format!("unknown face `{name}`")))
}

impl<T: Real> Scenario<T> {
    pub fn from_config(cfg: &ScenarioConfig) -> Result<Self> {
        let faces = cfg
            .grid
            .dirichlet_faces
            .iter()
            .map(|f| parse_face(f, "grid.dirichlet_faces"))
            .collect::<Result<Vec<_>>>()?;
        let grid = Grid::new(lit3(cfg.grid.extent_m), cfg.grid.cells, &faces)?;
        let m = &cfg.material;
        let coeffs = MaterialCoefficients {
            alpha: T::lit(m.alpha_pa),
            beta: T::lit(m.beta_pa),
            gamma_det: T::lit(m.gamma_det_pa),
            delta: T::lit(m.delta_pa),
            h_p: T::lit(m.hardening_h_p_pa),
            c_p: T::lit(m.c_p_pa),
            mu: T::lit(m.mu_gradient_weight_pa_m_qr),
            q: T::lit(m.q_deformation_exponent),
            q_e: T::lit(m.q_elastic_exponent),
            q_p: T::lit(m.q_plastic_exponent),
            q_r: T::lit(m.q_gradient_exponent),
        };
        let flow = FlowConstants::new(
            T::lit(cfg.flow.r0_pa),
            T::lit(cfg.flow.g0_dimensionless),
            T::lit(cfg.flow.rmax_pa),
        )?;
        let params = MaterialParams::new(coeffs, flow)?;
        let validation = validate_params(&params)?;

        let l = &cfg.loads;
        let knots = l.times_s.len();
        let body = if l.body_force_n_per_m3.is_empty() {
            vec![[T::zero(); 3]; knots]
        } else if l.body_force_n_per_m3.len() == knots {
            l.body_force_n_per_m3.iter().map(|b| lit3(*b)).collect()
        } else {
            return Err(Error::config(
                "loads.body_force_n_per_m3",
                format!("expected {knots} values (one per knot), got {}", l.body_force_n_per_m3.len()),
            ));
        };
        let mut traction: Vec<Vec<(Face, [T; 3])>> = vec![Vec::new(); knots];
        for tr in &l.traction {
            let face = parse_face(&tr.face, "loads.traction.face")?;
            if faces.contains(&face) {
                return Err(Error::config(
                    "loads.traction.face",
                    format!("`{}` is a Dirichlet face", tr.face),
                ));
            }
            if tr.values_pa.len() != knots {
                return Err(Error::config(
                    "loads.traction.values_pa",
                    format!("expected {knots} values (one per knot), got {}", tr.values_pa.len()),
                ));
            }
            for (k, v) in tr.values_pa.iter().enumerate() {
                traction[k].push((face, lit3(*v)));
            }
        }
        let times = l.times_s.iter().map(|t| T::lit(*t)).collect();
        let loads = LoadProgram::uniform(&grid, times, body, traction, l.interpolation)?;

        if !(cfg.time.end_time_s > 0.0) || cfg.time.nsteps == 0 {
            return Err(Error::config("time", "need end_time_s > 0 and nsteps ≥ 1"));
        }
        let t_end = T::lit(cfg.time.end_time_s);
        if loads.start() > T::zero() || loads.end() < t_end * (T::one() - T::lit(1e-12)) {
            return Err(Error::config(
                "loads.times_s",
                "load knots must cover [0, end_time_s]",
            ));
        }
        let time_kernel = match &cfg.kernels.time {
            TimeKernelConfig::Exponential { rate_per_s } => TimeKernel::Exponential {
                rate_per_time: T::lit(*rate_per_s),
            },
            TimeKernelConfig::Samples { values_per_s } => TimeKernel::Samples {
                values_per_time: values_per_s.iter().map(|v| T::lit(*v)).collect(),
            },
        };
        let space_kernel = match &cfg.kernels.space {
            SpaceKernelConfig::Delta => SpaceKernel::Delta,
            SpaceKernelConfig::TruncatedGaussian {
                radius_cells,
                sigma_cells,
            } => SpaceKernel::TruncatedGaussian {
                radius_cells: *radius_cells,
                sigma_cells: *sigma_cells,
            },
        };
        cfg.path.validate()?;
        let policy = SolverPolicy::from(&cfg.solver);
        policy.validate()?;
        let scenario = Self {
            config: cfg.clone(),
            grid,
            params,
            validation,
            loads,
            time_kernel,
            space_kernel,
            path: cfg.path,
            policy,
            tau: T::lit(cfg.tau()),
            nsteps: cfg.time.nsteps,
            seed: cfg.output.seed,
        };
        // kernels are validated by building them once
        scenario.kernels()?;
        Ok(scenario)
    }

    pub fn kernels(&self) -> Result<Kernels<T>> {
        Kernels::new(
            self.time_kernel.clone(),
            self.space_kernel.clone(),
            &self.grid,
            self.tau,
            self.nsteps,
        )
    }

    pub fn model(&self) -> Result<Model<T>> {
        Ok(Model {
            grid: self.grid.clone(),
            params: self.params,
            loads: self.loads.clone(),
            kernels: self.kernels()?,
            path: self.path,
            policy: self.policy,
        })
    }

    pub fn end_time(&self) -> T {
        self.tau * T::lit(self.nsteps as f64)
    }
}

/// Output of [`run_evolution`].
#[derive(Clone, Debug)]
pub struct Evolution<T> {
    pub model: Model<T>,
    pub trajectory: Trajectory<T>,
    /// the a priori bound on max energy and total dissipation
    pub gronwall: GronwallReport,
}

impl<T: Real> Evolution<T> {
    /// Whether the discrete Gronwall bound on energy and dissipation held.
    pub fn bound_holds(&self) -> bool {
        self.gronwall.margin >= 0.0 && self.gronwall.dissipation_bound_margin >= 0.0
    }
}

/// Runs the whole scheme for a validated scenario.
pub fn run_evolution<T: Real>(scenario: &Scenario<T>) -> Result<Evolution<T>> {
    let model = scenario.model()?;
    let trajectory = run_model(&model, scenario.nsteps)?;
    let gronwall = gronwall_check(&trajectory, &model)?;
    Ok(Evolution {
        model,
        trajectory,
        gronwall,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_config_builds() {
        let cfg = ScenarioConfig::shear_ramp();
        let s: Scenario<f64> = cfg.build().unwrap();
        assert_eq!(s.grid.cells(), [4, 4, 4]);
        assert_eq!(s.nsteps, 20);
        assert!((s.tau - 0.05).abs() < 1e-15);
        // round trip through TOML
        let back = ScenarioConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn malformed_config_names_the_field() {
        let text = SHEAR_RAMP_TOML.replace("end_time_s", "end_time");
        match ScenarioConfig::from_toml(&text) {
            Err(Error::Config { field, message }) => {
                assert!(field == "end_time" || field == "end_time_s", "{field}: {message}");
                assert!(message.contains("line"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        let text = SHEAR_RAMP_TOML.replace("g0_dimensionless = 0.25", "g0_dimensionless = 0.4");
        let cfg = ScenarioConfig::from_toml(&text).unwrap();
        assert!(cfg.build::<f64>().is_err());
        let mut cfg = ScenarioConfig::shear_ramp();
        cfg.flow.rmax_pa = 0.001;
        assert!(cfg.build::<f64>().is_err());
        let mut cfg = ScenarioConfig::shear_ramp();
        cfg.grid.dirichlet_faces = vec!["top".into()];
        assert!(matches!(cfg.build::<f64>(), Err(Error::Config { .. })));
    }

    #[test]
    fn tau_must_divide_end_time() {
        let mut cfg = ScenarioConfig::shear_ramp();
        cfg.set_tau(0.025).unwrap();
        assert_eq!(cfg.time.nsteps, 40);
        assert!(cfg.set_tau(0.3).is_err());
        assert!(cfg.set_tau(0.0).is_err());
    }

    #[test]
    fn loads_must_cover_the_horizon() {
        let mut cfg = ScenarioConfig::shear_ramp();
        cfg.time.end_time_s = 2.0;
        assert!(cfg.build::<f64>().is_err());
    }

    #[test]
    fn zero_load_evolution_is_flat_and_bounded() {
        let mut cfg = ScenarioConfig::shear_ramp();
        cfg.grid.cells = [2, 2, 2];
        for t in cfg.loads.traction.iter_mut() {
            for v in t.values_pa.iter_mut() {
                *v = [0.0; 3];
            }
        }
        cfg.time.nsteps = 4;
        let s: Scenario<f64> = cfg.build().unwrap();
        let ev = run_evolution(&s).unwrap();
        assert!(ev.bound_holds());
        for r in ev.trajectory.records() {
            assert_eq!(r.energy, 0.0);
            assert_eq!(r.cumulative_dissipation, 0.0);
        }
    }
}
