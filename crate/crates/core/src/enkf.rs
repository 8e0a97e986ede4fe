//! Ensemble Kalman filter belief propagation.
//!
//! Given an initial Gaussian belief and a control sequence, the filter
//! propagates an `m`-member ensemble through the black-box plant and corrects
//! it against the measurements of the noise-free system, producing the belief
//! trajectory `b_0 .. b_N`. With the measurements fixed this way the belief
//! evolution is a deterministic function of the controls and the seed.
//!
//! All sample covariances use the `1/(m-1)` normalization. Noise draws are
//! keyed by `(seed, step, member)`; see [`crate::noise`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, min_eigenvalue, symmetrize};
use crate::noise::{GaussianSampler, Stream};
use crate::plant::{Plant, PlantError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnkfError {
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error("ensemble size must be at least 2, got {0}")]
    EnsembleTooSmall(usize),
    #[error("expected {expected} controls, got {got}")]
    ControlCount { expected: usize, got: usize },
    #[error("invalid initial belief: {0}")]
    InvalidBelief(String),
    #[error("ensemble became non-finite at step {step}")]
    Divergence { step: usize },
}

/// Mean and covariance of a Gaussian belief.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self, EnkfError> {
        let belief = Self { mean, covariance };
        belief.validate()?;
        Ok(belief)
    }

    /// A point mass at `mean`.
    pub fn deterministic(mean: DVector<f64>) -> Self {
        let n = mean.len();
        Self {
            mean,
            covariance: DMatrix::zeros(n, n),
        }
    }

    pub fn validate(&self) -> Result<(), EnkfError> {
        let n = self.mean.len();
        if self.covariance.nrows() != n || self.covariance.ncols() != n {
            return Err(EnkfError::InvalidBelief(format!(
                "covariance is {}x{} for a mean of length {n}",
                self.covariance.nrows(),
                self.covariance.ncols()
            )));
        }
        let scale = 1.0 + self.covariance.amax();
        if linalg::asymmetry(&self.covariance) > 1e-10 * scale {
            return Err(EnkfError::InvalidBelief("covariance is not symmetric".into()));
        }
        if min_eigenvalue(&self.covariance) < -1e-10 * scale {
            return Err(EnkfError::InvalidBelief(
                "covariance is not positive semi-definite".into(),
            ));
        }
        Ok(())
    }

    pub fn summary(&self) -> BeliefSummary {
        BeliefSummary {
            mean: self.mean.clone(),
            cov_trace: self.covariance.trace(),
        }
    }
}

/// The parts of a belief the cost function needs: the mean and the trace of
/// the covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefSummary {
    pub mean: DVector<f64>,
    pub cov_trace: f64,
}

pub trait BeliefMoments {
    fn mean(&self) -> &[f64];
    fn cov_trace(&self) -> f64;
}

impl BeliefMoments for GaussianBelief {
    fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }
    fn cov_trace(&self) -> f64 {
        self.covariance.trace()
    }
}

impl BeliefMoments for BeliefSummary {
    fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }
    fn cov_trace(&self) -> f64 {
        self.cov_trace
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnkfConfig {
    pub ensemble_size: usize,
    pub seed: u64,
    /// Added to the diagonal of a singular innovation covariance.
    pub regularization: f64,
}

impl Default for EnkfConfig {
    fn default() -> Self {
        Self {
            ensemble_size: 200,
            seed: 0,
            regularization: 1e-8,
        }
    }
}

/// `m` state vectors stored member-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    data: Vec<f64>,
    m: usize,
    n_x: usize,
}

impl Ensemble {
    pub fn from_members(members: &[DVector<f64>]) -> Result<Self, EnkfError> {
        let m = members.len();
        if m < 2 {
            return Err(EnkfError::EnsembleTooSmall(m));
        }
        let n_x = members[0].len();
        let mut data = Vec::with_capacity(m * n_x);
        for x in members {
            if x.len() != n_x {
                return Err(EnkfError::InvalidBelief("members differ in dimension".into()));
            }
            data.extend_from_slice(x.as_slice());
        }
        Ok(Self { data, m, n_x })
    }

    pub fn size(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.n_x
    }

    pub fn member(&self, j: usize) -> &[f64] {
        &self.data[j * self.n_x..(j + 1) * self.n_x]
    }

    fn member_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.n_x..(j + 1) * self.n_x]
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut mean = DVector::zeros(self.n_x);
        for j in 0..self.m {
            for (acc, x) in mean.iter_mut().zip(self.member(j)) {
                *acc += x;
            }
        }
        mean / self.m as f64
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let mean = self.mean();
        let mut cov = DMatrix::zeros(self.n_x, self.n_x);
        for j in 0..self.m {
            let d = DVector::from_column_slice(self.member(j)) - &mean;
            cov.ger(1.0, &d, &d, 1.0);
        }
        cov / (self.m - 1) as f64
    }
}

/// Posterior ensemble plus the noise-free "true" state that supplies the
/// measurements, at one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub ensemble: Ensemble,
    pub truth: Vec<f64>,
}

/// Output of one forecast/update cycle.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub mean: DVector<f64>,
    pub cov_trace: f64,
    /// Trace of the forecast (prior) covariance.
    pub forecast_trace: f64,
    /// Present when the full covariance was requested.
    pub covariance: Option<DMatrix<f64>>,
    /// Kalman gain `P^xy (P^y)^-1`.
    pub gain: DMatrix<f64>,
    /// True when `P^y` had to be regularized.
    pub regularized: bool,
}

#[derive(Debug, Clone)]
pub struct BeliefTrajectory {
    pub beliefs: Vec<GaussianBelief>,
    /// Steps at which the innovation covariance was regularized.
    pub regularized_steps: Vec<usize>,
}

/// Reusable EnKF for one plant, initial belief and seed.
pub struct EnkfPropagator<'a> {
    plant: &'a dyn Plant,
    b0: GaussianBelief,
    cfg: EnkfConfig,
    process: GaussianSampler,
    measurement: GaussianSampler,
}

impl<'a> EnkfPropagator<'a> {
    pub fn new(plant: &'a dyn Plant, b0: GaussianBelief, cfg: EnkfConfig) -> Result<Self, EnkfError> {
        if cfg.ensemble_size < 2 {
            return Err(EnkfError::EnsembleTooSmall(cfg.ensemble_size));
        }
        b0.validate()?;
        let spec = plant.spec();
        if b0.mean.len() != spec.n_x {
            return Err(EnkfError::InvalidBelief(format!(
                "mean has length {}, plant state has {}",
                b0.mean.len(),
                spec.n_x
            )));
        }
        Ok(Self {
            process: GaussianSampler::new(&spec.process_noise),
            measurement: GaussianSampler::new(&spec.measurement_noise),
            plant,
            b0,
            cfg,
        })
    }

    pub fn config(&self) -> &EnkfConfig {
        &self.cfg
    }

    pub fn initial_belief(&self) -> &GaussianBelief {
        &self.b0
    }

    /// Ensemble drawn from `N(mu_0, Sigma_0)`; the truth starts at `mu_0`.
    pub fn initial_state(&self) -> FilterState {
        let n = self.b0.mean.len();
        let m = self.cfg.ensemble_size;
        let sampler = GaussianSampler::new(&self.b0.covariance);
        let mut data = Vec::with_capacity(m * n);
        let mut z = vec![0.0; n];
        for j in 0..m {
            sampler.fill(self.cfg.seed, Stream::EnsembleInit, 0, j, &mut z);
            data.extend(self.b0.mean.iter().zip(&z).map(|(mu, d)| mu + d));
        }
        FilterState {
            ensemble: Ensemble { data, m, n_x: n },
            truth: self.b0.mean.as_slice().to_vec(),
        }
    }

    /// Advance `state` from step `k` to `k + 1` under control `u_k`.
    pub fn advance(
        &self,
        state: &mut FilterState,
        k: usize,
        control: &[f64],
        full_covariance: bool,
    ) -> Result<StepOutput, EnkfError> {
        let spec = self.plant.spec();
        let (n, ny, nu) = (spec.n_x, spec.n_y, spec.n_u);
        let m = state.ensemble.m;
        let seed = self.cfg.seed;
        let mut w = vec![0.0; nu];
        let mut v = vec![0.0; ny];
        let mut tmp = vec![0.0; n];
        let mut y_members = vec![0.0; m * ny];

        // forecast ensemble and perturbed predicted measurements
        for j in 0..m {
            self.process.fill(seed, Stream::EnsembleProcess, k, j, &mut w);
            self.plant
                .step_into(state.ensemble.member(j), control, &w, &mut tmp)
                .map_err(|e| match e {
                    PlantError::Divergence { .. } => EnkfError::Divergence { step: k },
                    other => other.into(),
                })?;
            state.ensemble.member_mut(j).copy_from_slice(&tmp);
            self.measurement
                .fill(seed, Stream::EnsembleMeasurement, k + 1, j, &mut v);
            self.plant
                .observe_into(&tmp, &v, &mut y_members[j * ny..(j + 1) * ny])?;
        }

        // noise-free system supplies the measurement
        w.iter_mut().for_each(|x| *x = 0.0);
        self.plant
            .step_into(&state.truth, control, &w, &mut tmp)
            .map_err(|e| e.at_step(k))?;
        state.truth.copy_from_slice(&tmp);
        v.iter_mut().for_each(|x| *x = 0.0);
        let mut y = vec![0.0; ny];
        self.plant.observe_into(&state.truth, &v, &mut y)?;

        let x_mean = state.ensemble.mean();
        let mut y_mean = vec![0.0; ny];
        for j in 0..m {
            for (acc, yj) in y_mean.iter_mut().zip(&y_members[j * ny..(j + 1) * ny]) {
                *acc += yj;
            }
        }
        y_mean.iter_mut().for_each(|a| *a /= m as f64);

        let norm = 1.0 / (m - 1) as f64;
        let mut p_y = DMatrix::<f64>::zeros(ny, ny);
        let mut p_xy = DMatrix::<f64>::zeros(n, ny);
        let mut forecast_trace = 0.0;
        let mut dy = vec![0.0; ny];
        for j in 0..m {
            let xj = state.ensemble.member(j);
            for (c, d) in dy.iter_mut().enumerate() {
                *d = y_members[j * ny + c] - y_mean[c];
            }
            for r in 0..ny {
                for c in 0..ny {
                    p_y[(r, c)] += dy[r] * dy[c];
                }
            }
            for i in 0..n {
                let dx = xj[i] - x_mean[i];
                forecast_trace += dx * dx;
                for c in 0..ny {
                    p_xy[(i, c)] += dx * dy[c];
                }
            }
        }
        p_y *= norm;
        p_xy *= norm;
        forecast_trace *= norm;
        symmetrize(&mut p_y);

        let mut regularized = false;
        if min_eigenvalue(&p_y) <= self.cfg.regularization {
            for i in 0..ny {
                p_y[(i, i)] += self.cfg.regularization;
            }
            regularized = true;
        }
        let gain = linalg::right_solve_spd(&p_xy, &p_y)
            .or_else(|| p_y.clone().try_inverse().map(|inv| &p_xy * inv))
            .ok_or(EnkfError::Divergence { step: k })?;

        // b+ = b- + K (y - y-),  Sigma+ = Sigma- - P^xy (P^y)^-1 P^yx
        let innovation = DVector::from_iterator(ny, y.iter().zip(&y_mean).map(|(a, b)| a - b));
        let mean = &x_mean + &gain * innovation;
        let mut reduction = 0.0;
        for i in 0..n {
            for c in 0..ny {
                reduction += gain[(i, c)] * p_xy[(i, c)];
            }
        }
        let cov_trace = forecast_trace - reduction;
        let covariance = if full_covariance {
            let mut cov = state.ensemble.covariance() - &gain * p_xy.transpose();
            symmetrize(&mut cov);
            Some(cov)
        } else {
            None
        };

        // move each member with its own perturbed innovation
        for j in 0..m {
            let yj = &y_members[j * ny..(j + 1) * ny];
            for (c, d) in dy.iter_mut().enumerate() {
                *d = y[c] - yj[c];
            }
            let xj = state.ensemble.member_mut(j);
            for (i, xi) in xj.iter_mut().enumerate() {
                let mut acc = 0.0;
                for c in 0..ny {
                    acc += gain[(i, c)] * dy[c];
                }
                *xi += acc;
            }
        }
        if mean.iter().any(|v| !v.is_finite()) || !cov_trace.is_finite() {
            return Err(EnkfError::Divergence { step: k });
        }
        Ok(StepOutput {
            mean,
            cov_trace,
            forecast_trace,
            covariance,
            gain,
            regularized,
        })
    }

    fn check_controls(&self, controls: &[DVector<f64>]) -> Result<(), EnkfError> {
        let horizon = self.plant.spec().horizon;
        if controls.len() != horizon {
            return Err(EnkfError::ControlCount {
                expected: horizon,
                got: controls.len(),
            });
        }
        Ok(())
    }

    /// Full belief trajectory `b_0 .. b_N` with covariance matrices.
    pub fn propagate(&self, controls: &[DVector<f64>]) -> Result<BeliefTrajectory, EnkfError> {
        self.check_controls(controls)?;
        let mut state = self.initial_state();
        let mut beliefs = Vec::with_capacity(controls.len() + 1);
        beliefs.push(self.b0.clone());
        let mut regularized_steps = Vec::new();
        for (k, u) in controls.iter().enumerate() {
            let out = self.advance(&mut state, k, u.as_slice(), true)?;
            if out.regularized {
                regularized_steps.push(k + 1);
            }
            beliefs.push(GaussianBelief {
                mean: out.mean,
                covariance: out.covariance.expect("requested"),
            });
        }
        Ok(BeliefTrajectory {
            beliefs,
            regularized_steps,
        })
    }

    /// Mean/trace trajectory, continuing from `state` at step `start`.
    /// `controls` holds the full sequence; only `controls[start..]` is used.
    /// When `checkpoints` is given it receives the filter state at every
    /// step from `start` to `N - 1`.
    pub fn summaries_from(
        &self,
        mut state: FilterState,
        start: usize,
        controls: &[DVector<f64>],
        mut checkpoints: Option<&mut Vec<FilterState>>,
    ) -> Result<Vec<BeliefSummary>, EnkfError> {
        self.check_controls(controls)?;
        let mut out = Vec::with_capacity(controls.len() + 1 - start);
        for (k, u) in controls.iter().enumerate().skip(start) {
            if let Some(cp) = checkpoints.as_deref_mut() {
                cp.push(state.clone());
            }
            let step = self.advance(&mut state, k, u.as_slice(), false)?;
            out.push(BeliefSummary {
                mean: step.mean,
                cov_trace: step.cov_trace,
            });
        }
        Ok(out)
    }

    /// Mean/trace trajectory `b_0 .. b_N`.
    pub fn summaries(&self, controls: &[DVector<f64>]) -> Result<Vec<BeliefSummary>, EnkfError> {
        let mut out = vec![self.b0.summary()];
        out.extend(self.summaries_from(self.initial_state(), 0, controls, None)?);
        Ok(out)
    }
}

/// Belief trajectory `b_0 .. b_N` for `controls`, deterministic in
/// `(b0, controls, cfg)`.
pub fn enkf_propagate(
    plant: &dyn Plant,
    b0: &GaussianBelief,
    controls: &[DVector<f64>],
    cfg: &EnkfConfig,
) -> Result<BeliefTrajectory, EnkfError> {
    EnkfPropagator::new(plant, b0.clone(), *cfg)?.propagate(controls)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::LinearPlant;

    fn scalar_plant(w: f64, v: f64, horizon: usize) -> LinearPlant {
        LinearPlant::scalar(0.9, 1.0, 1.0, w, v, horizon).unwrap()
    }

    fn controls(n: usize) -> Vec<DVector<f64>> {
        (0..n)
            .map(|k| DVector::from_element(1, (k as f64 * 0.3).sin()))
            .collect()
    }

    #[test]
    fn identical_members_give_zero_gain() {
        let plant = scalar_plant(0.0, 0.04, 5);
        let b0 = GaussianBelief::deterministic(DVector::from_element(1, 2.0));
        let prop = EnkfPropagator::new(&plant, b0, EnkfConfig { ensemble_size: 8, ..Default::default() }).unwrap();
        let mut state = prop.initial_state();
        let out = prop.advance(&mut state, 0, &[0.5], true).unwrap();
        assert!(out.gain.amax() < 1e-12);
        assert!(out.covariance.unwrap().amax() < 1e-24);
        assert!((out.mean[0] - (0.9 * 2.0 + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn update_matches_textbook_formulas() {
        let plant = scalar_plant(0.01, 0.04, 3);
        let b0 = GaussianBelief::new(DVector::from_element(1, 1.0), DMatrix::from_element(1, 1, 0.2)).unwrap();
        let prop = EnkfPropagator::new(&plant, b0, EnkfConfig { ensemble_size: 50, seed: 3, ..Default::default() }).unwrap();
        let mut state = prop.initial_state();
        let before = state.clone();
        let out = prop.advance(&mut state, 0, &[0.1], true).unwrap();
        // recompute forecast statistics by hand from the same draws
        let w = GaussianSampler::new(&plant.spec().process_noise);
        let v = GaussianSampler::new(&plant.spec().measurement_noise);
        let m = 50;
        let xs: Vec<f64> = (0..m)
            .map(|j| 0.9 * before.ensemble.member(j)[0] + 0.1 + w.sample(3, Stream::EnsembleProcess, 0, j)[0])
            .collect();
        let ys: Vec<f64> = (0..m)
            .map(|j| xs[j] + v.sample(3, Stream::EnsembleMeasurement, 1, j)[0])
            .collect();
        let xb = xs.iter().sum::<f64>() / m as f64;
        let yb = ys.iter().sum::<f64>() / m as f64;
        let pxx: f64 = xs.iter().map(|x| (x - xb).powi(2)).sum::<f64>() / (m - 1) as f64;
        let pyy: f64 = ys.iter().map(|y| (y - yb).powi(2)).sum::<f64>() / (m - 1) as f64;
        let pxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xb) * (y - yb)).sum::<f64>() / (m - 1) as f64;
        let y_true = 0.9 * 1.0 + 0.1;
        let k = pxy / pyy;
        assert!((out.gain[0] - k).abs() < 1e-12);
        assert!((out.mean[0] - (xb + k * (y_true - yb))).abs() < 1e-12);
        assert!((out.cov_trace - (pxx - pxy * pxy / pyy)).abs() < 1e-12);
        // the updated members carry exactly that posterior covariance
        let post = state.ensemble.covariance()[(0, 0)];
        assert!((post - out.covariance.unwrap()[(0, 0)]).abs() < 1e-12);
    }

    #[test]
    fn gain_is_scale_invariant() {
        let p_xy = DMatrix::from_row_slice(3, 2, &[1.0, 0.2, -0.3, 0.5, 0.7, 0.1]);
        let p_y = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let k1 = linalg::right_solve_spd(&p_xy, &p_y).unwrap();
        let k2 = linalg::right_solve_spd(&(&p_xy * 7.5), &(&p_y * 7.5)).unwrap();
        assert!((k1 - k2).amax() < 1e-14);
    }

    #[test]
    fn seed_determinism() {
        let plant = scalar_plant(0.01, 0.04, 20);
        let b0 = GaussianBelief::new(DVector::from_element(1, 1.0), DMatrix::from_element(1, 1, 0.1)).unwrap();
        let cfg = EnkfConfig { ensemble_size: 30, seed: 11, ..Default::default() };
        let a = enkf_propagate(&plant, &b0, &controls(20), &cfg).unwrap();
        let b = enkf_propagate(&plant, &b0, &controls(20), &cfg).unwrap();
        assert_eq!(a.beliefs, b.beliefs);
        let c = enkf_propagate(&plant, &b0, &controls(20), &EnkfConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a.beliefs, c.beliefs);
    }

    #[test]
    fn summaries_agree_with_full_propagation() {
        let plant = scalar_plant(0.01, 0.04, 10);
        let b0 = GaussianBelief::new(DVector::from_element(1, 1.0), DMatrix::from_element(1, 1, 0.1)).unwrap();
        let prop = EnkfPropagator::new(&plant, b0, EnkfConfig { ensemble_size: 20, ..Default::default() }).unwrap();
        let full = prop.propagate(&controls(10)).unwrap();
        let sum = prop.summaries(&controls(10)).unwrap();
        for (f, s) in full.beliefs.iter().zip(&sum) {
            assert_eq!(f.mean, s.mean);
            assert!((f.covariance.trace() - s.cov_trace).abs() < 1e-12);
        }
    }

    #[test]
    fn restart_from_checkpoint_is_bit_identical() {
        let plant = scalar_plant(0.01, 0.04, 12);
        let b0 = GaussianBelief::new(DVector::from_element(1, 1.0), DMatrix::from_element(1, 1, 0.1)).unwrap();
        let prop = EnkfPropagator::new(&plant, b0, EnkfConfig { ensemble_size: 20, seed: 5, ..Default::default() }).unwrap();
        let u = controls(12);
        let mut cps = Vec::new();
        let base = prop.summaries_from(prop.initial_state(), 0, &u, Some(&mut cps)).unwrap();
        let tail = prop.summaries_from(cps[7].clone(), 7, &u, None).unwrap();
        assert_eq!(&base[7..], &tail[..]);
    }

    #[test]
    fn posterior_trace_never_exceeds_forecast() {
        let plant = LinearPlant::new(
            DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.8]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::from_element(1, 1, 0.3),
            DMatrix::from_element(1, 1, 0.1),
            1.0,
            15,
        )
        .unwrap();
        let b0 = GaussianBelief::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let prop = EnkfPropagator::new(&plant, b0, EnkfConfig { ensemble_size: 40, ..Default::default() }).unwrap();
        let mut state = prop.initial_state();
        for k in 0..15 {
            let out = prop.advance(&mut state, k, &[0.2], true).unwrap();
            let cov = out.covariance.unwrap();
            let eig_min = min_eigenvalue(&cov);
            assert!(eig_min > -1e-10);
            assert!((out.cov_trace - cov.trace()).abs() < 1e-10);
            assert!(out.cov_trace <= out.forecast_trace + 1e-9);
        }
    }

    #[test]
    fn rejects_tiny_ensembles_and_wrong_horizons() {
        let plant = scalar_plant(0.01, 0.04, 4);
        let b0 = GaussianBelief::deterministic(DVector::zeros(1));
        assert_eq!(
            EnkfPropagator::new(&plant, b0.clone(), EnkfConfig { ensemble_size: 1, ..Default::default() }).err(),
            Some(EnkfError::EnsembleTooSmall(1))
        );
        let err = enkf_propagate(&plant, &b0, &controls(3), &EnkfConfig::default()).unwrap_err();
        assert_eq!(err, EnkfError::ControlCount { expected: 4, got: 3 });
    }
}
