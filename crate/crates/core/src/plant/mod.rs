//! Black-box simulator contract.
//!
//! A plant is a pure pair of maps `x' = f(x, u + w)` and `y = h(x) + v`. All
//! randomness is supplied by the caller, so the same arguments always give
//! bit-identical results and plants can be shared freely across threads.

mod heat;

pub use heat::{HeatPlant, HeatPlantConfig, RightBoundary, SourceModel};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("plant state became non-finite{}", step.map(|k| format!(" at step {k}")).unwrap_or_default())]
    Divergence { step: Option<usize> },
    #[error("invalid plant configuration: {0}")]
    Config(String),
}

impl PlantError {
    /// Attach the time step to a divergence error.
    pub fn at_step(self, k: usize) -> Self {
        match self {
            PlantError::Divergence { .. } => PlantError::Divergence { step: Some(k) },
            other => other,
        }
    }
}

/// Dimensions, noise statistics and timing of a plant.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantSpec {
    pub n_x: usize,
    pub n_u: usize,
    pub n_y: usize,
    /// Process-noise covariance; enters through the input channel.
    pub process_noise: DMatrix<f64>,
    /// Measurement-noise covariance.
    pub measurement_noise: DMatrix<f64>,
    pub dt: f64,
    pub horizon: usize,
}

impl PlantSpec {
    pub fn validate(&self) -> Result<(), PlantError> {
        if self.n_x == 0 {
            return Err(PlantError::Config("n_x must be at least 1".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(PlantError::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.horizon == 0 {
            return Err(PlantError::Config("horizon must be at least 1".into()));
        }
        check_psd("process noise W", &self.process_noise, self.n_u)?;
        check_psd("measurement noise V", &self.measurement_noise, self.n_y)?;
        Ok(())
    }

    /// Copy of the spec with both noise covariances multiplied by `scale`.
    pub fn scaled_noise(&self, scale: f64) -> Self {
        let mut s = self.clone();
        s.process_noise *= scale;
        s.measurement_noise *= scale;
        s
    }
}

fn check_psd(name: &str, m: &DMatrix<f64>, dim: usize) -> Result<(), PlantError> {
    if m.nrows() != dim || m.ncols() != dim {
        return Err(PlantError::Config(format!(
            "{name} must be {dim}x{dim}, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if crate::linalg::asymmetry(m) > 1e-12 * (1.0 + m.amax()) {
        return Err(PlantError::Config(format!("{name} must be symmetric")));
    }
    if dim > 0 && crate::linalg::min_eigenvalue(m) < -1e-10 * (1.0 + m.amax()) {
        return Err(PlantError::Config(format!("{name} must be positive semi-definite")));
    }
    Ok(())
}

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), PlantError> {
    if expected != got {
        return Err(PlantError::Dimension { what, expected, got });
    }
    Ok(())
}

pub trait Plant: Send + Sync {
    fn spec(&self) -> &PlantSpec;

    /// `next = f(state, control + process_noise)`.
    fn step_into(
        &self,
        state: &[f64],
        control: &[f64],
        process_noise: &[f64],
        next: &mut [f64],
    ) -> Result<(), PlantError>;

    /// `out = h(state) + measurement_noise`.
    fn observe_into(
        &self,
        state: &[f64],
        measurement_noise: &[f64],
        out: &mut [f64],
    ) -> Result<(), PlantError>;

    fn step(
        &self,
        state: &DVector<f64>,
        control: &DVector<f64>,
        process_noise: &DVector<f64>,
    ) -> Result<DVector<f64>, PlantError> {
        let mut next = DVector::zeros(self.spec().n_x);
        self.step_into(
            state.as_slice(),
            control.as_slice(),
            process_noise.as_slice(),
            next.as_mut_slice(),
        )?;
        Ok(next)
    }

    fn observe(
        &self,
        state: &DVector<f64>,
        measurement_noise: &DVector<f64>,
    ) -> Result<DVector<f64>, PlantError> {
        let mut out = DVector::zeros(self.spec().n_y);
        self.observe_into(state.as_slice(), measurement_noise.as_slice(), out.as_mut_slice())?;
        Ok(out)
    }

    /// Noise-free trajectory `x_0 .. x_N` under `controls` starting at `x0`.
    fn simulate_noiseless(
        &self,
        x0: &DVector<f64>,
        controls: &[DVector<f64>],
    ) -> Result<Vec<DVector<f64>>, PlantError> {
        let zero_w = DVector::zeros(self.spec().n_u);
        let mut states = Vec::with_capacity(controls.len() + 1);
        states.push(x0.clone());
        for (k, u) in controls.iter().enumerate() {
            let next = self
                .step(&states[k], u, &zero_w)
                .map_err(|e| e.at_step(k))?;
            states.push(next);
        }
        Ok(states)
    }

    /// `h(x, 0)` for every state.
    fn observe_noiseless(&self, states: &[DVector<f64>]) -> Result<Vec<DVector<f64>>, PlantError> {
        let zero_v = DVector::zeros(self.spec().n_y);
        states.iter().map(|x| self.observe(x, &zero_v)).collect()
    }
}

/// Time-invariant linear plant `x' = A x + B (u + w)`, `y = C x + v`.
#[derive(Debug, Clone)]
pub struct LinearPlant {
    spec: PlantSpec,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

impl LinearPlant {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        process_noise: DMatrix<f64>,
        measurement_noise: DMatrix<f64>,
        dt: f64,
        horizon: usize,
    ) -> Result<Self, PlantError> {
        let n_x = a.nrows();
        if a.ncols() != n_x || b.nrows() != n_x || c.ncols() != n_x {
            return Err(PlantError::Config(format!(
                "inconsistent linear plant shapes: A {}x{}, B {}x{}, C {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols(),
                c.nrows(),
                c.ncols()
            )));
        }
        let spec = PlantSpec {
            n_x,
            n_u: b.ncols(),
            n_y: c.nrows(),
            process_noise,
            measurement_noise,
            dt,
            horizon,
        };
        spec.validate()?;
        Ok(Self { spec, a, b, c })
    }

    /// Scalar plant `x' = a x + b (u + w)`, `y = c x + v`.
    pub fn scalar(a: f64, b: f64, c: f64, w: f64, v: f64, horizon: usize) -> Result<Self, PlantError> {
        let m = |x: f64| DMatrix::from_element(1, 1, x);
        Self::new(m(a), m(b), m(c), m(w), m(v), 1.0, horizon)
    }
}

impl Plant for LinearPlant {
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
        let s = &self.spec;
        check_len("state", s.n_x, state.len())?;
        check_len("control", s.n_u, control.len())?;
        check_len("process noise", s.n_u, process_noise.len())?;
        check_len("next state", s.n_x, next.len())?;
        for (i, out) in next.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, xj) in state.iter().enumerate() {
                acc += self.a[(i, j)] * xj;
            }
            for j in 0..s.n_u {
                acc += self.b[(i, j)] * (control[j] + process_noise[j]);
            }
            *out = acc;
        }
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
        let s = &self.spec;
        check_len("state", s.n_x, state.len())?;
        check_len("measurement noise", s.n_y, measurement_noise.len())?;
        check_len("output", s.n_y, out.len())?;
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = measurement_noise[i];
            for (j, xj) in state.iter().enumerate() {
                acc += self.c[(i, j)] * xj;
            }
            *o = acc;
        }
        Ok(())
    }
}
