//! Open-loop trajectory optimization in belief space.
//!
//! The cost of a control sequence is evaluated on the EnKF belief trajectory
//! it produces. Gradients are forward differences over every scalar control
//! channel at every step, with common random numbers so that the stochastic
//! cost is a deterministic function of the controls. Perturbing `u_i` leaves
//! beliefs `b_0..b_i` untouched, so each perturbed evaluation restarts the
//! filter from a cached checkpoint at step `i`; the running cost is summed in
//! the same order as a full evaluation, which keeps the result bit-identical.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::enkf::{
    BeliefMoments, BeliefSummary, EnkfConfig, EnkfError, EnkfPropagator, FilterState, GaussianBelief,
};
use crate::linalg::{min_eigenvalue, QuadForm};
use crate::plant::{Plant, PlantError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajoptError {
    #[error(transparent)]
    Filter(#[from] EnkfError),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error("invalid cost: {0}")]
    InvalidCost(String),
    #[error("invalid optimizer settings: {0}")]
    InvalidConfig(String),
    #[error("cost is not finite")]
    NonFiniteCost,
    #[error("perturbed cost for control index {index} (step {step}, channel {channel}) is not finite: {detail}")]
    Perturbation {
        index: usize,
        step: usize,
        channel: usize,
        detail: String,
    },
    #[error("line search stalled at iteration {iteration}: no decrease after 30 halvings")]
    Stall { iteration: usize },
}

/// Quadratic belief-space cost
/// `sum_{k >= hold_from} [(mu_k - t)' Q (mu_k - t) + q_cov tr(Sigma_k)] + sum_k u_k' R u_k`
/// plus the terminal term `(mu_N - t)' Q_N (mu_N - t) + q_cov tr(Sigma_N)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    pub q_track: DMatrix<f64>,
    pub q_cov: f64,
    pub r_ctrl: DMatrix<f64>,
    pub q_term: DMatrix<f64>,
    pub target: DVector<f64>,
    pub hold_from: usize,
}

impl CostSpec {
    pub fn validate(&self, n_x: usize, n_u: usize, horizon: usize) -> Result<(), TrajoptError> {
        let square = |name: &str, m: &DMatrix<f64>, n: usize| {
            if m.nrows() != n || m.ncols() != n {
                return Err(TrajoptError::InvalidCost(format!(
                    "{name} must be {n}x{n}, got {}x{}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(TrajoptError::InvalidCost(format!("{name} has non-finite entries")));
            }
            Ok(())
        };
        square("q_track", &self.q_track, n_x)?;
        square("q_term", &self.q_term, n_x)?;
        square("r_ctrl", &self.r_ctrl, n_u)?;
        if self.target.len() != n_x {
            return Err(TrajoptError::InvalidCost(format!(
                "target has length {}, expected {n_x}",
                self.target.len()
            )));
        }
        if min_eigenvalue(&self.q_track) < -1e-12 || min_eigenvalue(&self.q_term) < -1e-12 {
            return Err(TrajoptError::InvalidCost("tracking weights must be PSD".into()));
        }
        if min_eigenvalue(&self.r_ctrl) < 0.0 {
            return Err(TrajoptError::InvalidCost("r_ctrl must be positive semi-definite".into()));
        }
        if !(self.q_cov >= 0.0 && self.q_cov.is_finite()) {
            return Err(TrajoptError::InvalidCost("q_cov must be non-negative".into()));
        }
        if self.hold_from > horizon {
            return Err(TrajoptError::InvalidCost(format!(
                "hold_from {} exceeds horizon {horizon}",
                self.hold_from
            )));
        }
        Ok(())
    }

    /// Copy with every weight multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            q_track: &self.q_track * factor,
            q_cov: self.q_cov * factor,
            r_ctrl: &self.r_ctrl * factor,
            q_term: &self.q_term * factor,
            ..self.clone()
        }
    }
}

/// Precomputed quadratic forms for repeated cost evaluation.
#[derive(Debug, Clone)]
pub struct CostEvaluator {
    spec: CostSpec,
    track: QuadForm,
    term: QuadForm,
    ctrl: QuadForm,
}

impl CostEvaluator {
    pub fn new(spec: CostSpec) -> Self {
        Self {
            track: QuadForm::new(&spec.q_track),
            term: QuadForm::new(&spec.q_term),
            ctrl: QuadForm::new(&spec.r_ctrl),
            spec,
        }
    }

    pub fn spec(&self) -> &CostSpec {
        &self.spec
    }

    /// `c_k(b_k, u_k)`.
    pub fn stage(&self, k: usize, mean: &[f64], cov_trace: f64, control: &[f64]) -> f64 {
        let effort = self.ctrl.eval(control, &[]);
        if k >= self.spec.hold_from {
            self.track.eval(mean, self.spec.target.as_slice()) + self.spec.q_cov * cov_trace + effort
        } else {
            effort
        }
    }

    /// `c_N(b_N)`.
    pub fn terminal(&self, mean: &[f64], cov_trace: f64) -> f64 {
        self.term.eval(mean, self.spec.target.as_slice()) + self.spec.q_cov * cov_trace
    }

    /// Total cost of a belief trajectory `b_0..b_N` under `u_0..u_{N-1}`.
    pub fn total<B: BeliefMoments>(&self, beliefs: &[B], controls: &[DVector<f64>]) -> f64 {
        let mut acc = 0.0;
        for (k, u) in controls.iter().enumerate() {
            acc += self.stage(k, beliefs[k].mean(), beliefs[k].cov_trace(), u.as_slice());
        }
        let last = &beliefs[controls.len()];
        acc + self.terminal(last.mean(), last.cov_trace())
    }
}

/// Nominal cost `J(b_0..b_N, u_0..u_{N-1})`.
pub fn nominal_cost<B: BeliefMoments>(
    beliefs: &[B],
    controls: &[DVector<f64>],
    cost: &CostSpec,
) -> Result<f64, TrajoptError> {
    if beliefs.len() != controls.len() + 1 {
        return Err(TrajoptError::InvalidCost(format!(
            "{} beliefs for {} controls",
            beliefs.len(),
            controls.len()
        )));
    }
    let n_x = beliefs[0].mean().len();
    let n_u = controls.first().map_or(cost.r_ctrl.nrows(), |u| u.len());
    cost.validate(n_x, n_u, controls.len())?;
    let finite = beliefs
        .iter()
        .all(|b| b.mean().iter().all(|v| v.is_finite()) && b.cov_trace().is_finite())
        && controls.iter().all(|u| u.iter().all(|v| v.is_finite()));
    if !finite {
        return Err(TrajoptError::NonFiniteCost);
    }
    let total = CostEvaluator::new(cost.clone()).total(beliefs, controls);
    if !total.is_finite() {
        return Err(TrajoptError::NonFiniteCost);
    }
    Ok(total)
}

/// A base evaluation with everything needed to restart from any step.
#[derive(Debug, Clone)]
pub struct Baseline {
    pub cost: f64,
    pub beliefs: Vec<BeliefSummary>,
    /// `checkpoints[i]`: filter state at step `i`, before `u_i` is applied.
    pub checkpoints: Vec<FilterState>,
    /// `prefix[i] = sum_{k < i} c_k`, accumulated in evaluation order.
    pub prefix: Vec<f64>,
}

/// The belief-space cost as a function of the control sequence.
pub struct BeliefCost<'a> {
    filter: EnkfPropagator<'a>,
    cost: CostEvaluator,
    n_u: usize,
}

impl<'a> BeliefCost<'a> {
    pub fn new(
        plant: &'a dyn Plant,
        b0: GaussianBelief,
        cost: CostSpec,
        enkf: EnkfConfig,
    ) -> Result<Self, TrajoptError> {
        let spec = plant.spec();
        cost.validate(spec.n_x, spec.n_u, spec.horizon)?;
        Ok(Self {
            filter: EnkfPropagator::new(plant, b0, enkf)?,
            cost: CostEvaluator::new(cost),
            n_u: spec.n_u,
        })
    }

    pub fn filter(&self) -> &EnkfPropagator<'a> {
        &self.filter
    }

    pub fn evaluator(&self) -> &CostEvaluator {
        &self.cost
    }

    fn check(&self, controls: &[DVector<f64>]) -> Result<(), TrajoptError> {
        if let Some(u) = controls.iter().find(|u| u.len() != self.n_u) {
            return Err(PlantError::Dimension {
                what: "control",
                expected: self.n_u,
                got: u.len(),
            }
            .into());
        }
        Ok(())
    }

    /// Full evaluation, recording checkpoints and running sums.
    pub fn baseline(&self, controls: &[DVector<f64>]) -> Result<Baseline, TrajoptError> {
        self.check(controls)?;
        let mut state = self.filter.initial_state();
        let b0 = self.filter.initial_belief().summary();
        let mut beliefs = Vec::with_capacity(controls.len() + 1);
        let mut checkpoints = Vec::with_capacity(controls.len());
        let mut prefix = Vec::with_capacity(controls.len() + 1);
        let mut acc = 0.0;
        beliefs.push(b0);
        for (k, u) in controls.iter().enumerate() {
            prefix.push(acc);
            checkpoints.push(state.clone());
            let b = &beliefs[k];
            acc += self.cost.stage(k, b.mean.as_slice(), b.cov_trace, u.as_slice());
            let out = self.filter.advance(&mut state, k, u.as_slice(), false)?;
            beliefs.push(BeliefSummary {
                mean: out.mean,
                cov_trace: out.cov_trace,
            });
        }
        prefix.push(acc);
        let last = beliefs.last().expect("b_0 present");
        let cost = acc + self.cost.terminal(last.mean.as_slice(), last.cov_trace);
        if !cost.is_finite() {
            return Err(TrajoptError::NonFiniteCost);
        }
        Ok(Baseline {
            cost,
            beliefs,
            checkpoints,
            prefix,
        })
    }

    pub fn evaluate(&self, controls: &[DVector<f64>]) -> Result<f64, TrajoptError> {
        Ok(self.baseline(controls)?.cost)
    }

    /// Cost with `controls[step][channel] += delta`, resumed from the
    /// baseline checkpoint at `step`.
    pub fn evaluate_perturbed(
        &self,
        base: &Baseline,
        controls: &[DVector<f64>],
        step: usize,
        channel: usize,
        delta: f64,
    ) -> Result<f64, EnkfError> {
        let mut state = base.checkpoints[step].clone();
        let mut acc = base.prefix[step];
        let mut mean = base.beliefs[step].mean.clone();
        let mut trace = base.beliefs[step].cov_trace;
        let mut u = controls[step].clone();
        u[channel] += delta;
        for k in step..controls.len() {
            let uk = if k == step { u.as_slice() } else { controls[k].as_slice() };
            acc += self.cost.stage(k, mean.as_slice(), trace, uk);
            let out = self.filter.advance(&mut state, k, uk, false)?;
            mean = out.mean;
            trace = out.cov_trace;
        }
        Ok(acc + self.cost.terminal(mean.as_slice(), trace))
    }

    /// Forward-difference gradient, flattened as `index = step * n_u + channel`,
    /// together with the base evaluation.
    pub fn gradient(&self, controls: &[DVector<f64>], h: f64) -> Result<(Vec<f64>, Baseline), TrajoptError> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(TrajoptError::InvalidConfig(format!("h must be positive, got {h}")));
        }
        let base = self.baseline(controls)?;
        let n_u = self.n_u;
        let grad = (0..controls.len() * n_u)
            .into_par_iter()
            .map(|index| {
                let (step, channel) = (index / n_u, index % n_u);
                let fail = |detail: String| TrajoptError::Perturbation {
                    index,
                    step,
                    channel,
                    detail,
                };
                let j = self
                    .evaluate_perturbed(&base, controls, step, channel, h)
                    .map_err(|e| fail(e.to_string()))?;
                if !j.is_finite() {
                    return Err(fail("cost is not finite".into()));
                }
                Ok((j - base.cost) / h)
            })
            .collect::<Result<Vec<f64>, _>>()?;
        Ok((grad, base))
    }
}

/// Forward-difference gradient of the belief-space cost.
pub fn fd_gradient(
    plant: &dyn Plant,
    b0: &GaussianBelief,
    controls: &[DVector<f64>],
    cost: &CostSpec,
    h: f64,
    enkf: &EnkfConfig,
) -> Result<Vec<f64>, TrajoptError> {
    let model = BeliefCost::new(plant, b0.clone(), cost.clone(), *enkf)?;
    Ok(model.gradient(controls, h)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradientConfig {
    pub alpha: f64,
    pub h: f64,
    pub epsilon: f64,
    pub max_iters: usize,
    pub line_search: bool,
}

impl Default for GradientConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            h: 1e-4,
            epsilon: 1e-6,
            max_iters: 100,
            line_search: true,
        }
    }
}

impl GradientConfig {
    pub fn validate(&self) -> Result<(), TrajoptError> {
        for (name, v) in [("alpha", self.alpha), ("h", self.h), ("epsilon", self.epsilon)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TrajoptError::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if self.max_iters == 0 {
            return Err(TrajoptError::InvalidConfig("max_iters must be at least 1".into()));
        }
        Ok(())
    }
}

/// Result of the open-loop optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NominalTrajectory {
    /// `u_0 .. u_{N-1}`.
    pub controls: Vec<DVector<f64>>,
    /// EnKF beliefs `b_0 .. b_N` (mean and covariance trace).
    pub beliefs: Vec<BeliefSummary>,
    /// Noise-free states `mu_0 .. mu_N` under the optimized controls; the
    /// linearization point for identification and feedback.
    pub nominal_states: Vec<DVector<f64>>,
    /// `h(mu_k, 0)` for `k = 0 .. N`.
    pub nominal_observations: Vec<DVector<f64>>,
    /// Belief-space cost.
    pub cost: f64,
    /// Cost evaluated on the noise-free states with the belief covariance
    /// traces; the reference for realized closed-loop costs.
    pub state_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm: f64,
    /// Accepted cost after every iteration, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

impl NominalTrajectory {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    /// Assemble a nominal trajectory from controls and beliefs.
    pub fn from_controls(
        plant: &dyn Plant,
        controls: Vec<DVector<f64>>,
        beliefs: Vec<BeliefSummary>,
        cost: &CostEvaluator,
        belief_cost: f64,
    ) -> Result<Self, TrajoptError> {
        let x0 = beliefs[0].mean.clone();
        let nominal_states = plant.simulate_noiseless(&x0, &controls)?;
        let nominal_observations = plant.observe_noiseless(&nominal_states)?;
        let state_cost = state_cost(cost, &nominal_states, &beliefs, &controls);
        Ok(Self {
            controls,
            beliefs,
            nominal_states,
            nominal_observations,
            cost: belief_cost,
            state_cost,
            iterations: 0,
            converged: false,
            gradient_norm: f64::NAN,
            cost_history: vec![belief_cost],
        })
    }
}

/// Cost of a state trajectory, using the given belief covariance traces for
/// the uncertainty term.
pub fn state_cost(
    cost: &CostEvaluator,
    states: &[DVector<f64>],
    beliefs: &[BeliefSummary],
    controls: &[DVector<f64>],
) -> f64 {
    let mut acc = 0.0;
    for (k, u) in controls.iter().enumerate() {
        acc += cost.stage(k, states[k].as_slice(), beliefs[k].cov_trace, u.as_slice());
    }
    let n = controls.len();
    acc + cost.terminal(states[n].as_slice(), beliefs[n].cov_trace)
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

fn step_controls(controls: &[DVector<f64>], grad: &[f64], alpha: f64) -> Vec<DVector<f64>> {
    let n_u = controls.first().map_or(0, |u| u.len());
    controls
        .iter()
        .enumerate()
        .map(|(k, u)| {
            DVector::from_iterator(n_u, u.iter().enumerate().map(|(c, v)| v - alpha * grad[k * n_u + c]))
        })
        .collect()
}

/// Gradient descent on the belief-space cost starting at `u0` (zeros when
/// `None`).
pub fn optimize_open_loop(
    plant: &dyn Plant,
    b0: &GaussianBelief,
    u0: Option<Vec<DVector<f64>>>,
    cost: &CostSpec,
    cfg: &GradientConfig,
    enkf: &EnkfConfig,
) -> Result<NominalTrajectory, TrajoptError> {
    cfg.validate()?;
    let spec = plant.spec();
    let mut controls = u0.unwrap_or_else(|| vec![DVector::zeros(spec.n_u); spec.horizon]);
    if controls.len() != spec.horizon {
        return Err(EnkfError::ControlCount {
            expected: spec.horizon,
            got: controls.len(),
        }
        .into());
    }
    let model = BeliefCost::new(plant, b0.clone(), cost.clone(), *enkf)?;

    let (mut grad, mut base) = model.gradient(&controls, cfg.h)?;
    let mut history = vec![base.cost];
    let mut alpha = cfg.alpha;
    let mut iterations = 0;
    let mut converged = inf_norm(&grad) < cfg.epsilon;
    // best iterate for the fixed-step variant, which may go uphill
    let mut best: Option<(f64, Vec<DVector<f64>>, Baseline, f64)> = None;

    while !converged && iterations < cfg.max_iters {
        iterations += 1;
        if cfg.line_search {
            let mut trial_alpha = alpha;
            let mut accepted = None;
            for _ in 0..=30 {
                let trial = step_controls(&controls, &grad, trial_alpha);
                let j = model.evaluate(&trial).unwrap_or(f64::INFINITY);
                if j < base.cost {
                    accepted = Some(trial);
                    break;
                }
                trial_alpha *= 0.5;
            }
            let Some(next) = accepted else {
                return Err(TrajoptError::Stall { iteration: iterations });
            };
            controls = next;
            // let the step grow again after a successful iteration
            alpha = 2.0 * trial_alpha;
        } else {
            if best.as_ref().is_none_or(|b| base.cost < b.0) {
                best = Some((base.cost, controls.clone(), base.clone(), inf_norm(&grad)));
            }
            controls = step_controls(&controls, &grad, alpha);
        }
        let (g, b) = model.gradient(&controls, cfg.h)?;
        grad = g;
        base = b;
        history.push(base.cost);
        log::info!(
            "open-loop iteration {iterations}: cost {:.6e}, |grad|_inf {:.3e}",
            base.cost,
            inf_norm(&grad)
        );
        converged = inf_norm(&grad) < cfg.epsilon;
    }

    let mut gradient_norm = inf_norm(&grad);
    if let Some((j, u, b, g)) = best {
        if j < base.cost {
            controls = u;
            base = b;
            gradient_norm = g;
            converged = false;
        }
    }

    let mut nominal = NominalTrajectory::from_controls(plant, controls, base.beliefs, model.evaluator(), base.cost)?;
    nominal.iterations = iterations;
    nominal.converged = converged;
    nominal.gradient_norm = gradient_norm;
    nominal.cost_history = history;
    Ok(nominal)
}
