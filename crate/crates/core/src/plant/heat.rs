//! One-dimensional nonlinear heat slab.
//!
//! `dT/dt = K(T) d2T/dx2 - eta T + u`, with `K(T) = kappa0 (1 + kappa1 T)`,
//! an insulated left end and a fixed temperature at the right end. Point
//! sources and point sensors sit at the grid nodes nearest their positions.
//!
//! Each time step is split into `substeps` semi-implicit backward-Euler
//! sub-steps: diffusion and convection are implicit with the diffusivity
//! lagged at the start of the sub-step, so every sub-step is one tridiagonal
//! solve.

use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use super::{check_len, Plant, PlantError, PlantSpec};
use nalgebra::DMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceModel {
    /// Source strength divided by the grid spacing (a point-source density).
    Density,
    /// Source strength added directly to the node's rate of change.
    Nodal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RightBoundary {
    /// Last node pinned to `t_right`.
    Dirichlet,
    /// Zero-flux mirror, like the left end.
    Neumann,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeatPlantConfig {
    /// Slab length in metres.
    pub length: f64,
    pub n_grid: usize,
    /// Diffusivity scale (m^2/s).
    pub kappa0: f64,
    /// Diffusivity temperature coefficient (1/degree).
    pub kappa1: f64,
    /// Convective loss coefficient (1/s).
    pub eta: f64,
    /// Source positions as fractions of `length`.
    pub source_positions: Vec<f64>,
    /// Sensor positions as fractions of `length`.
    pub sensor_positions: Vec<f64>,
    pub t_init: f64,
    pub t_right: f64,
    /// Implicit sub-steps per plant step.
    pub substeps: usize,
    pub source_model: SourceModel,
    pub right_boundary: RightBoundary,
}

impl Default for HeatPlantConfig {
    fn default() -> Self {
        let positions = vec![0.1, 0.3, 0.5, 0.7, 0.9];
        Self {
            length: 0.6,
            n_grid: 100,
            kappa0: 1e-3,
            kappa1: 1e-3,
            eta: 0.005,
            source_positions: positions.clone(),
            sensor_positions: positions,
            t_init: 100.0,
            t_right: 150.0,
            substeps: 1,
            source_model: SourceModel::Density,
            right_boundary: RightBoundary::Dirichlet,
        }
    }
}

impl HeatPlantConfig {
    pub fn dx(&self) -> f64 {
        self.length / (self.n_grid - 1) as f64
    }

    /// Grid node nearest to `fraction * length`.
    pub fn nearest_node(&self, fraction: f64) -> usize {
        (fraction * (self.n_grid - 1) as f64).round() as usize
    }

    pub fn diffusivity(&self, temperature: f64) -> f64 {
        self.kappa0 * (1.0 + self.kappa1 * temperature)
    }

    /// Range checks; each violation is reported with its field name.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.length > 0.0) {
            out.push(format!("length must be positive (got {})", self.length));
        }
        if self.n_grid < 3 {
            out.push(format!("n_grid must be at least 3 (got {})", self.n_grid));
        }
        if self.kappa0 < 0.0 {
            out.push(format!("kappa0 must be non-negative (got {})", self.kappa0));
        }
        if self.eta < 0.0 {
            out.push(format!("eta must be non-negative (got {})", self.eta));
        }
        if self.substeps == 0 {
            out.push("substeps must be at least 1".to_string());
        }
        for (name, list) in [
            ("source_positions", &self.source_positions),
            ("sensor_positions", &self.sensor_positions),
        ] {
            if list.is_empty() {
                out.push(format!("{name} must not be empty"));
            }
            for (i, f) in list.iter().enumerate() {
                if !(*f > 0.0 && *f < 1.0) {
                    out.push(format!("{name}[{i}] must lie strictly inside (0, 1) (got {f})"));
                }
            }
        }
        if self.n_grid >= 3
            && self.right_boundary == RightBoundary::Dirichlet
            && self
                .source_positions
                .iter()
                .any(|f| *f > 0.0 && *f < 1.0 && self.nearest_node(*f) == self.n_grid - 1)
        {
            out.push("a source maps onto the fixed-temperature node".to_string());
        }
        // K must stay positive over the temperatures the slab can reach.
        if self.kappa0 > 0.0 {
            let lo = self.t_init.min(self.t_right);
            let hi = self.t_init.max(self.t_right);
            if self.diffusivity(lo) <= 0.0 || self.diffusivity(hi) <= 0.0 {
                out.push("diffusivity K(T) must be positive over the operating range".to_string());
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct HeatPlant {
    config: HeatPlantConfig,
    spec: PlantSpec,
    dx: f64,
    source_nodes: Vec<usize>,
    sensor_nodes: Vec<usize>,
}

thread_local! {
    static SCRATCH: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

impl HeatPlant {
    pub fn new(
        config: HeatPlantConfig,
        dt: f64,
        horizon: usize,
        process_noise: DMatrix<f64>,
        measurement_noise: DMatrix<f64>,
    ) -> Result<Self, PlantError> {
        let problems = config.violations();
        if !problems.is_empty() {
            return Err(PlantError::Config(problems.join("; ")));
        }
        let spec = PlantSpec {
            n_x: config.n_grid,
            n_u: config.source_positions.len(),
            n_y: config.sensor_positions.len(),
            process_noise,
            measurement_noise,
            dt,
            horizon,
        };
        spec.validate()?;
        let source_nodes = config
            .source_positions
            .iter()
            .map(|f| config.nearest_node(*f))
            .collect();
        let sensor_nodes = config
            .sensor_positions
            .iter()
            .map(|f| config.nearest_node(*f))
            .collect();
        Ok(Self {
            dx: config.dx(),
            config,
            spec,
            source_nodes,
            sensor_nodes,
        })
    }

    pub fn config(&self) -> &HeatPlantConfig {
        &self.config
    }

    pub fn source_nodes(&self) -> &[usize] {
        &self.source_nodes
    }

    pub fn sensor_nodes(&self) -> &[usize] {
        &self.sensor_nodes
    }

    /// Initial field: `t_init` everywhere.
    pub fn initial_state(&self) -> nalgebra::DVector<f64> {
        nalgebra::DVector::from_element(self.config.n_grid, self.config.t_init)
    }

    /// Source rate added to each node for the total input `u + w`.
    fn source_rates(&self, control: &[f64], noise: &[f64], rates: &mut [f64]) {
        rates.iter_mut().for_each(|r| *r = 0.0);
        let scale = match self.config.source_model {
            SourceModel::Density => 1.0 / self.dx,
            SourceModel::Nodal => 1.0,
        };
        for (c, node) in self.source_nodes.iter().enumerate() {
            rates[*node] += scale * (control[c] + noise[c]);
        }
    }

    fn substep(&self, t: &mut [f64], rates: &[f64], h: f64, buf: &mut [f64]) {
        let n = t.len();
        let cfg = &self.config;
        let inv_dx2 = 1.0 / (self.dx * self.dx);
        let (lower, rest) = buf.split_at_mut(n);
        let (diag, rest) = rest.split_at_mut(n);
        let (upper, rest) = rest.split_at_mut(n);
        let (rhs, rest) = rest.split_at_mut(n);
        let work = &mut rest[..n];
        for i in 0..n {
            let r = h * cfg.diffusivity(t[i]) * inv_dx2;
            diag[i] = 1.0 + h * cfg.eta + 2.0 * r;
            rhs[i] = t[i] + h * rates[i];
            if i == 0 {
                // mirrored ghost node: T_{-1} = T_1
                lower[i] = 0.0;
                upper[i] = -2.0 * r;
            } else if i == n - 1 {
                upper[i] = 0.0;
                match cfg.right_boundary {
                    RightBoundary::Dirichlet => {
                        lower[i] = 0.0;
                        diag[i] = 1.0;
                        rhs[i] = cfg.t_right;
                    }
                    RightBoundary::Neumann => lower[i] = -2.0 * r,
                }
            } else {
                lower[i] = -r;
                upper[i] = -r;
            }
        }
        solve_tridiagonal(lower, diag, upper, rhs, work, t);
    }
}

/// Thomas algorithm for a diagonally dominant tridiagonal system.
/// `lower[0]` and `upper[n-1]` are ignored.
pub(crate) fn solve_tridiagonal(
    lower: &[f64],
    diag: &[f64],
    upper: &[f64],
    rhs: &[f64],
    work: &mut [f64],
    out: &mut [f64],
) {
    let n = diag.len();
    let mut denom = diag[0];
    work[0] = upper[0] / denom;
    out[0] = rhs[0] / denom;
    for i in 1..n {
        denom = diag[i] - lower[i] * work[i - 1];
        work[i] = if i + 1 < n { upper[i] / denom } else { 0.0 };
        out[i] = (rhs[i] - lower[i] * out[i - 1]) / denom;
    }
    for i in (0..n - 1).rev() {
        out[i] -= work[i] * out[i + 1];
    }
}

impl Plant for HeatPlant {
    fn spec(&self) -> &PlantSpec {
        &self.spec
    }

    fn step_into(
        &self,
        state: &[f64],
        control: &[f64],
        process_noise: &[f64],
        next: &mut [f64],
    ) -> Result<(), PlantError> {
        let n = self.spec.n_x;
        check_len("state", n, state.len())?;
        check_len("control", self.spec.n_u, control.len())?;
        check_len("process noise", self.spec.n_u, process_noise.len())?;
        check_len("next state", n, next.len())?;
        next.copy_from_slice(state);
        let h = self.spec.dt / self.config.substeps as f64;
        SCRATCH.with(|cell| {
            let mut buf = cell.borrow_mut();
            buf.resize(6 * n, 0.0);
            let (rates, rest) = buf.split_at_mut(n);
            self.source_rates(control, process_noise, rates);
            for _ in 0..self.config.substeps {
                self.substep(next, rates, h, rest);
            }
        });
        if next.iter().any(|v| !v.is_finite()) {
            return Err(PlantError::Divergence { step: None });
        }
        Ok(())
    }

    fn observe_into(
        &self,
        state: &[f64],
        measurement_noise: &[f64],
        out: &mut [f64],
    ) -> Result<(), PlantError> {
        check_len("state", self.spec.n_x, state.len())?;
        check_len("measurement noise", self.spec.n_y, measurement_noise.len())?;
        check_len("output", self.spec.n_y, out.len())?;
        for ((o, node), v) in out.iter_mut().zip(&self.sensor_nodes).zip(measurement_noise) {
            *o = state[*node] + v;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn plant(cfg: HeatPlantConfig) -> HeatPlant {
        let n_u = cfg.source_positions.len();
        let n_y = cfg.sensor_positions.len();
        HeatPlant::new(
            cfg,
            0.25,
            250,
            DMatrix::identity(n_u, n_u),
            DMatrix::identity(n_y, n_y),
        )
        .unwrap()
    }

    /// Explicit Euler on the same semi-discrete system with `fine` sub-steps.
    fn explicit_oracle(cfg: &HeatPlantConfig, t0: &[f64], u: &[f64], dt: f64, fine: usize) -> Vec<f64> {
        let n = cfg.n_grid;
        let dx = cfg.dx();
        let h = dt / fine as f64;
        let mut t = t0.to_vec();
        let scale = match cfg.source_model {
            SourceModel::Density => 1.0 / dx,
            SourceModel::Nodal => 1.0,
        };
        let mut src = vec![0.0; n];
        for (c, f) in cfg.source_positions.iter().enumerate() {
            src[cfg.nearest_node(*f)] += scale * u[c];
        }
        if cfg.right_boundary == RightBoundary::Dirichlet {
            t[n - 1] = cfg.t_right;
        }
        for _ in 0..fine {
            let mut next = t.clone();
            for i in 0..n {
                let left = if i == 0 { t[1] } else { t[i - 1] };
                let right = if i == n - 1 { t[n - 2] } else { t[i + 1] };
                let lap = (left - 2.0 * t[i] + right) / (dx * dx);
                next[i] = t[i] + h * (cfg.diffusivity(t[i]) * lap - cfg.eta * t[i] + src[i]);
            }
            if cfg.right_boundary == RightBoundary::Dirichlet {
                next[n - 1] = cfg.t_right;
            }
            t = next;
        }
        t
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        num / den
    }

    #[test]
    fn uniform_boundary_temperature_is_steady() {
        let cfg = HeatPlantConfig {
            eta: 0.0,
            ..Default::default()
        };
        let p = plant(cfg);
        let x = DVector::from_element(100, 150.0);
        let next = p.step(&x, &DVector::zeros(5), &DVector::zeros(5)).unwrap();
        assert!((next - x).amax() < 1e-12);
    }

    #[test]
    fn diffusion_off_integrates_sources() {
        for model in [SourceModel::Nodal, SourceModel::Density] {
            let cfg = HeatPlantConfig {
                kappa0: 0.0,
                eta: 0.0,
                source_model: model,
                ..Default::default()
            };
            let dx = cfg.dx();
            let p = plant(cfg);
            let x = DVector::from_element(100, 150.0);
            let u = DVector::from_vec(vec![1.0, 0.0, 2.0, 0.0, 0.0]);
            let next = p.step(&x, &u, &DVector::zeros(5)).unwrap();
            let scale = if model == SourceModel::Density { 1.0 / dx } else { 1.0 };
            for i in 0..100 {
                let expected = match i {
                    10 => 150.0 + 0.25 * scale,
                    50 => 150.0 + 0.25 * 2.0 * scale,
                    _ => 150.0,
                };
                assert!((next[i] - expected).abs() < 1e-9, "node {i}");
            }
        }
    }

    #[test]
    fn noise_enters_through_control_channel() {
        let p = plant(HeatPlantConfig::default());
        let x = p.initial_state();
        let a = p
            .step(&x, &DVector::from_element(5, 0.3), &DVector::from_element(5, 0.2))
            .unwrap();
        let b = p
            .step(&x, &DVector::from_element(5, 0.5), &DVector::zeros(5))
            .unwrap();
        assert!((a - b).amax() < 1e-12);
    }

    #[test]
    fn one_step_matches_fine_explicit_oracle() {
        // The first step from a uniform field meets the fixed right boundary as
        // a 50-degree jump, which is stiff (K dt / dx^2 ~ 7.5). Backward Euler
        // needs ~256 sub-steps to reach 1e-4 of the dt/1000 explicit solution.
        let cfg = HeatPlantConfig {
            substeps: 256,
            ..Default::default()
        };
        let p = plant(cfg.clone());
        let x = p.initial_state();
        let next = p.step(&x, &DVector::zeros(5), &DVector::zeros(5)).unwrap();
        let oracle = explicit_oracle(&cfg, x.as_slice(), &[0.0; 5], 0.25, 1000);
        let err = rel_err(next.as_slice(), &oracle);
        assert!(err <= 1e-4, "relative error {err}");
    }

    #[test]
    fn one_step_on_smooth_field_matches_oracle() {
        let cfg = HeatPlantConfig {
            substeps: 8,
            ..Default::default()
        };
        let p = plant(cfg.clone());
        // a smooth profile consistent with both boundary conditions
        let x: Vec<f64> = (0..100)
            .map(|i| {
                let s = i as f64 / 99.0;
                150.0 - 20.0 * (std::f64::consts::FRAC_PI_2 * s).cos()
            })
            .collect();
        let u = [0.1, -0.05, 0.2, 0.0, 0.1];
        let next = p
            .step(&DVector::from_column_slice(&x), &DVector::from_column_slice(&u), &DVector::zeros(5))
            .unwrap();
        let oracle = explicit_oracle(&cfg, &x, &u, 0.25, 1000);
        let err = rel_err(next.as_slice(), &oracle);
        assert!(err <= 1e-4, "relative error {err}");
    }

    #[test]
    fn halving_substep_refines_monotonically() {
        let base = HeatPlantConfig::default();
        let x = vec![100.0; 100];
        let oracle = explicit_oracle(&base, &x, &[0.0; 5], 0.25, 1000);
        let mut last = f64::INFINITY;
        for substeps in [1, 2, 4, 8, 16, 32] {
            let p = plant(HeatPlantConfig {
                substeps,
                ..base.clone()
            });
            let next = p
                .step(&DVector::from_column_slice(&x), &DVector::zeros(5), &DVector::zeros(5))
                .unwrap();
            let err = rel_err(next.as_slice(), &oracle);
            assert!(err < last, "substeps {substeps}: {err} !< {last}");
            last = err;
        }
    }

    #[test]
    fn insulated_slab_conserves_heat() {
        // The diffusion term is K(T) d2T/dx2 (non-conservative form), so the
        // integral is only conserved for a constant diffusivity.
        let cfg = HeatPlantConfig {
            eta: 0.0,
            kappa1: 0.0,
            right_boundary: RightBoundary::Neumann,
            ..Default::default()
        };
        let p = plant(cfg);
        let x: Vec<f64> = (0..100).map(|i| 100.0 + 30.0 * ((i as f64) * 0.17).sin()).collect();
        let next = p
            .step(&DVector::from_column_slice(&x), &DVector::zeros(5), &DVector::zeros(5))
            .unwrap();
        // trapezoid weights: half weight on the two mirrored end nodes
        let integral = |v: &[f64]| v.iter().sum::<f64>() - 0.5 * (v[0] + v[v.len() - 1]);
        let before = integral(&x);
        let after = integral(next.as_slice());
        assert!(((after - before) / before).abs() < 1e-10);
        assert!((next.as_slice()[40] - x[40]).abs() > 1e-6);
    }

    #[test]
    fn step_is_pure() {
        let p = plant(HeatPlantConfig::default());
        let x = p.initial_state();
        let u = DVector::from_element(5, 0.7);
        let w = DVector::from_element(5, -0.1);
        let a = p.step(&x, &u, &w).unwrap();
        let b = p.step(&x, &u, &w).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn observation_samples_nearest_nodes() {
        let p = plant(HeatPlantConfig::default());
        let x = p.initial_state();
        let y = p.observe(&x, &DVector::zeros(5)).unwrap();
        assert_eq!(y.as_slice(), &[100.0; 5]);
        let y = p
            .observe(&x, &DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0, 0.0]))
            .unwrap();
        assert_eq!(y[0], 101.0);
        // 0.9 * 99 = 89.1 rounds to node 89
        assert_eq!(p.sensor_nodes()[4], 89);
        let mut ramp = DVector::zeros(100);
        for i in 0..100 {
            ramp[i] = i as f64;
        }
        let y = p.observe(&ramp, &DVector::zeros(5)).unwrap();
        assert_eq!(y.as_slice(), &[10.0, 30.0, 50.0, 69.0, 89.0]);
    }

    #[test]
    fn config_violations_are_named() {
        let cfg = HeatPlantConfig {
            n_grid: 2,
            source_positions: vec![0.0, 0.5],
            ..Default::default()
        };
        let v = cfg.violations();
        assert!(v.iter().any(|s| s.contains("n_grid")));
        assert!(v.iter().any(|s| s.contains("source_positions[0]")));
    }

    #[test]
    fn tridiagonal_solver_matches_dense() {
        let lower = [0.0, -1.0, -0.5, -2.0];
        let diag = [4.0, 5.0, 3.0, 6.0];
        let upper = [-1.0, -2.0, -0.5, 0.0];
        let rhs = [1.0, 2.0, 3.0, 4.0];
        let mut work = [0.0; 4];
        let mut out = [0.0; 4];
        solve_tridiagonal(&lower, &diag, &upper, &rhs, &mut work, &mut out);
        let mut m = DMatrix::zeros(4, 4);
        for i in 0..4 {
            m[(i, i)] = diag[i];
            if i > 0 {
                m[(i, i - 1)] = lower[i];
            }
            if i < 3 {
                m[(i, i + 1)] = upper[i];
            }
        }
        let x = DVector::from_column_slice(&out);
        assert!((m * x - DVector::from_column_slice(&rhs)).amax() < 1e-12);
    }
}
