//! Closed-loop execution of the separated controller on the stochastic plant
//! and Monte Carlo evaluation.
//!
//! The policy applies `u_k = ubar_k - L_k da_hat_k`, where the reduced state
//! estimate is driven by `dy_k = y_k - h(mu_bar_k, 0)`. Open-loop comparison
//! runs use the same seeds with `L = 0`, so paired differences reflect only
//! the feedback.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::enkf::GaussianBelief;
use crate::lqg::LqgController;
use crate::noise::{GaussianSampler, Stream};
use crate::plant::{Plant, PlantError};
use crate::trajopt::{state_cost, CostEvaluator, CostSpec, NominalTrajectory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error("rollout with seed {seed} failed: {source}")]
    Rollout { seed: u64, source: PlantError },
    #[error("horizon mismatch: {0}")]
    Horizon(String),
    #[error("need at least {needed} successful rollouts, got {got}")]
    TooFewRuns { needed: usize, got: usize },
    #[error("invalid harness settings: {0}")]
    Config(String),
}

/// One executed closed- or open-loop trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub seed: u64,
    /// `x_0 .. x_N`.
    pub states: Vec<DVector<f64>>,
    /// Applied `u_0 .. u_{N-1}`.
    pub controls: Vec<DVector<f64>>,
    /// `y_1 .. y_N`.
    pub observations: Vec<DVector<f64>>,
    /// ROM estimates `da_hat_0 .. da_hat_N` (all zero in open loop).
    pub estimates: Vec<DVector<f64>>,
    /// Realized cost: the stage and terminal costs evaluated on the realized
    /// states and applied controls, with the nominal covariance traces.
    pub cost: f64,
    /// `cost` minus the nominal state cost.
    pub delta_cost: f64,
    /// `max_k |x_k - mu_bar_k| / |mu_bar_k|`; large values mean the
    /// linearization is being stretched and replanning would be warranted.
    pub max_relative_deviation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutOptions {
    /// Multiplies `W`, `V` and `Sigma_0`.
    pub noise_scale: f64,
    /// Start at `mu_0` instead of sampling from `N(mu_0, s Sigma_0)`.
    pub exact_initial_state: bool,
    /// Apply the LQG correction; `false` gives the paired open-loop run.
    pub feedback: bool,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        Self {
            noise_scale: 1.0,
            exact_initial_state: false,
            feedback: true,
        }
    }
}

/// Immutable bundle of everything a rollout needs.
pub struct ClosedLoop<'a> {
    plant: &'a dyn Plant,
    nominal: &'a NominalTrajectory,
    controller: &'a LqgController,
    b0: &'a GaussianBelief,
    cost: CostEvaluator,
}

struct Samplers {
    init: GaussianSampler,
    process: GaussianSampler,
    measurement: GaussianSampler,
}

impl<'a> ClosedLoop<'a> {
    pub fn new(
        plant: &'a dyn Plant,
        nominal: &'a NominalTrajectory,
        controller: &'a LqgController,
        b0: &'a GaussianBelief,
        cost: &CostSpec,
    ) -> Result<Self, HarnessError> {
        let n = plant.spec().horizon;
        if nominal.horizon() != n || controller.horizon() != n || nominal.nominal_states.len() != n + 1 {
            return Err(HarnessError::Horizon(format!(
                "plant {n}, nominal {}, controller {}",
                nominal.horizon(),
                controller.horizon()
            )));
        }
        Ok(Self {
            plant,
            nominal,
            controller,
            b0,
            cost: CostEvaluator::new(cost.clone()),
        })
    }

    pub fn nominal(&self) -> &NominalTrajectory {
        self.nominal
    }

    fn samplers(&self, scale: f64) -> Samplers {
        let spec = self.plant.spec();
        Samplers {
            init: GaussianSampler::new(&(&self.b0.covariance * scale)),
            process: GaussianSampler::new(&(&spec.process_noise * scale)),
            measurement: GaussianSampler::new(&(&spec.measurement_noise * scale)),
        }
    }

    /// Execute the policy once.
    pub fn rollout(&self, seed: u64, opts: &RolloutOptions) -> Result<RolloutRecord, HarnessError> {
        self.rollout_with(seed, opts, &self.samplers(opts.noise_scale))
    }

    fn rollout_with(&self, seed: u64, opts: &RolloutOptions, noise: &Samplers) -> Result<RolloutRecord, HarnessError> {
        let spec = self.plant.spec();
        let (n, n_x, n_u, n_y) = (spec.horizon, spec.n_x, spec.n_u, spec.n_y);
        let nominal = self.nominal;
        let fail = |source: PlantError| HarnessError::Rollout { seed, source };

        let mut x0 = self.b0.mean.clone();
        if !opts.exact_initial_state {
            let mut z = vec![0.0; n_x];
            noise.init.fill(seed, Stream::RolloutInit, 0, 0, &mut z);
            for (xi, zi) in x0.iter_mut().zip(&z) {
                *xi += zi;
            }
        }
        let mut states = Vec::with_capacity(n + 1);
        let mut controls = Vec::with_capacity(n);
        let mut observations = Vec::with_capacity(n);
        let mut estimates = Vec::with_capacity(n + 1);
        states.push(x0);
        let mut a_hat = self.controller.a_hat0.clone();
        estimates.push(a_hat.clone());
        let mut w = DVector::zeros(n_u);
        let mut v = DVector::zeros(n_y);
        for k in 0..n {
            let du = if opts.feedback {
                self.controller.feedback(k, &a_hat)
            } else {
                DVector::zeros(n_u)
            };
            let u = &nominal.controls[k] + &du;
            noise.process.fill(seed, Stream::RolloutProcess, k, 0, w.as_mut_slice());
            let next = self.plant.step(&states[k], &u, &w).map_err(|e| fail(e.at_step(k)))?;
            noise
                .measurement
                .fill(seed, Stream::RolloutMeasurement, k + 1, 0, v.as_mut_slice());
            let y = self.plant.observe(&next, &v).map_err(fail)?;
            if opts.feedback {
                let dy = &y - &nominal.nominal_observations[k + 1];
                a_hat = self.controller.estimate(k, &a_hat, &du, &dy);
            }
            estimates.push(a_hat.clone());
            states.push(next);
            controls.push(u);
            observations.push(y);
        }
        let cost = state_cost(&self.cost, &states, &nominal.beliefs, &controls);
        let max_relative_deviation = states
            .iter()
            .zip(&nominal.nominal_states)
            .map(|(x, m)| (x - m).norm() / m.norm().max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max);
        Ok(RolloutRecord {
            seed,
            states,
            controls,
            observations,
            estimates,
            cost,
            delta_cost: cost - nominal.state_cost,
            max_relative_deviation,
        })
    }

    /// Rollouts for seeds `base_seed .. base_seed + n_runs`, in seed order.
    pub fn rollouts(
        &self,
        n_runs: usize,
        base_seed: u64,
        opts: &RolloutOptions,
    ) -> Vec<Result<RolloutRecord, HarnessError>> {
        let noise = self.samplers(opts.noise_scale);
        (0..n_runs as u64)
            .into_par_iter()
            .map(|r| self.rollout_with(base_seed + r, opts, &noise))
            .collect()
    }
}

/// A scalar state component tracked separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub name: String,
    pub index: usize,
}

/// Target band on the Monte Carlo mean field, checked at given steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandSpec {
    pub target: f64,
    pub half_width: f64,
    pub steps: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeStats {
    pub name: String,
    pub index: usize,
    /// RMS of `x_k[index] - mu_bar_k[index]` over runs and steps.
    pub closed_loop_rms: f64,
    pub open_loop_rms: f64,
    /// Per-step RMS over runs, `k = 0..N`.
    pub closed_loop_rms_by_step: Vec<f64>,
    pub open_loop_rms_by_step: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandCheck {
    pub step: usize,
    pub time: f64,
    /// Fraction of state components of the closed-loop mean inside the band.
    pub closed_loop_fraction: f64,
    pub open_loop_fraction: f64,
    pub nominal_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStats {
    /// Per-step mean state.
    pub mean: Vec<DVector<f64>>,
    /// Per-step unbiased standard deviation.
    pub std: Vec<DVector<f64>>,
    pub mean_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloStats {
    pub n_runs: usize,
    pub n_succeeded: usize,
    pub failures: Vec<(u64, String)>,
    pub closed_loop: TrajectoryStats,
    pub open_loop: TrajectoryStats,
    pub probes: Vec<ProbeStats>,
    pub band: Vec<BandCheck>,
    pub mean_delta_cost: f64,
    pub std_error_delta_cost: f64,
    pub max_relative_deviation: f64,
    pub n_x: usize,
    pub n_r: usize,
    /// `n_x^4 / n_r^2`.
    pub complexity_ratio: f64,
}

pub fn complexity_ratio(n_x: usize, n_r: usize) -> f64 {
    (n_x as f64).powi(4) / (n_r as f64).powi(2)
}

/// Mean and unbiased standard deviation per step.
fn trajectory_stats(records: &[&RolloutRecord]) -> TrajectoryStats {
    let runs = records.len() as f64;
    let steps = records[0].states.len();
    let mut mean = Vec::with_capacity(steps);
    let mut std = Vec::with_capacity(steps);
    for k in 0..steps {
        let m = records.iter().fold(DVector::zeros(records[0].states[k].len()), |acc, r| acc + &r.states[k]) / runs;
        let var = records.iter().fold(DVector::zeros(m.len()), |acc: DVector<f64>, r| {
            let d = &r.states[k] - &m;
            acc + d.component_mul(&d)
        }) / (runs - 1.0);
        std.push(var.map(f64::sqrt));
        mean.push(m);
    }
    TrajectoryStats {
        mean,
        std,
        mean_cost: records.iter().map(|r| r.cost).sum::<f64>() / runs,
    }
}

fn band_fraction(x: &DVector<f64>, band: &BandSpec) -> f64 {
    x.iter().filter(|v| (*v - band.target).abs() <= band.half_width).count() as f64 / x.len() as f64
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonteCarloConfig {
    pub n_runs: usize,
    pub base_seed: u64,
    pub exact_initial_state: bool,
    pub noise_scale: f64,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        Self {
            n_runs: 100,
            base_seed: 1000,
            exact_initial_state: false,
            noise_scale: 1.0,
        }
    }
}

/// Outcome of a Monte Carlo evaluation: statistics plus the successful
/// closed-loop and open-loop records (paired by position).
pub struct MonteCarloResult {
    pub stats: MonteCarloStats,
    pub closed_loop: Vec<RolloutRecord>,
    pub open_loop: Vec<RolloutRecord>,
}

/// Paired closed-/open-loop Monte Carlo. A seed whose closed- or open-loop
/// rollout fails is excluded from both and listed in `failures`.
pub fn monte_carlo(
    system: &ClosedLoop,
    cfg: &MonteCarloConfig,
    probes: &[Probe],
    band: Option<&BandSpec>,
    n_r: usize,
) -> Result<MonteCarloResult, HarnessError> {
    if cfg.n_runs < 2 {
        return Err(HarnessError::Config(format!("n_runs must be at least 2, got {}", cfg.n_runs)));
    }
    let spec = system.plant.spec();
    if let Some(p) = probes.iter().find(|p| p.index >= spec.n_x) {
        return Err(HarnessError::Config(format!("probe {} index {} exceeds state size {}", p.name, p.index, spec.n_x)));
    }
    if let Some(b) = band {
        if let Some(s) = b.steps.iter().find(|s| **s > spec.horizon) {
            return Err(HarnessError::Config(format!("band step {s} exceeds horizon {}", spec.horizon)));
        }
    }
    let closed_opts = RolloutOptions {
        noise_scale: cfg.noise_scale,
        exact_initial_state: cfg.exact_initial_state,
        feedback: true,
    };
    let open_opts = RolloutOptions { feedback: false, ..closed_opts };
    let closed = system.rollouts(cfg.n_runs, cfg.base_seed, &closed_opts);
    let open = system.rollouts(cfg.n_runs, cfg.base_seed, &open_opts);

    let mut failures = Vec::new();
    let mut ok_closed = Vec::new();
    let mut ok_open = Vec::new();
    for (r, (c, o)) in closed.into_iter().zip(open).enumerate() {
        let seed = cfg.base_seed + r as u64;
        match (c, o) {
            (Ok(c), Ok(o)) => {
                ok_closed.push(c);
                ok_open.push(o);
            }
            (Err(e), _) | (_, Err(e)) => {
                log::warn!("excluding seed {seed}: {e}");
                failures.push((seed, e.to_string()));
            }
        }
    }
    if ok_closed.len() < 2 {
        return Err(HarnessError::TooFewRuns {
            needed: 2,
            got: ok_closed.len(),
        });
    }

    let closed_refs: Vec<&RolloutRecord> = ok_closed.iter().collect();
    let open_refs: Vec<&RolloutRecord> = ok_open.iter().collect();
    let closed_stats = trajectory_stats(&closed_refs);
    let open_stats = trajectory_stats(&open_refs);
    let nominal = &system.nominal.nominal_states;

    let probe_rms = |records: &[RolloutRecord], index: usize| {
        let by_step: Vec<f64> = (0..nominal.len())
            .map(|k| {
                let ss: f64 = records.iter().map(|r| (r.states[k][index] - nominal[k][index]).powi(2)).sum();
                (ss / records.len() as f64).sqrt()
            })
            .collect();
        let overall = (by_step.iter().map(|v| v * v).sum::<f64>() / by_step.len() as f64).sqrt();
        (overall, by_step)
    };
    let probes = probes
        .iter()
        .map(|p| {
            let (closed_loop_rms, closed_loop_rms_by_step) = probe_rms(&ok_closed, p.index);
            let (open_loop_rms, open_loop_rms_by_step) = probe_rms(&ok_open, p.index);
            ProbeStats {
                name: p.name.clone(),
                index: p.index,
                closed_loop_rms,
                open_loop_rms,
                closed_loop_rms_by_step,
                open_loop_rms_by_step,
            }
        })
        .collect();

    let band = band
        .map(|b| {
            b.steps
                .iter()
                .map(|&step| BandCheck {
                    step,
                    time: step as f64 * spec.dt,
                    closed_loop_fraction: band_fraction(&closed_stats.mean[step], b),
                    open_loop_fraction: band_fraction(&open_stats.mean[step], b),
                    nominal_fraction: band_fraction(&nominal[step], b),
                })
                .collect()
        })
        .unwrap_or_default();

    let deltas: Vec<f64> = ok_closed.iter().map(|r| r.delta_cost).collect();
    let (mean_delta_cost, std_error_delta_cost) = mean_and_se(&deltas);
    let max_relative_deviation = ok_closed.iter().map(|r| r.max_relative_deviation).fold(0.0, f64::max);
    if max_relative_deviation > 0.5 {
        log::warn!("closed-loop deviation reached {max_relative_deviation:.2} of the nominal norm; replanning would be advisable");
    }

    let stats = MonteCarloStats {
        n_runs: cfg.n_runs,
        n_succeeded: ok_closed.len(),
        failures,
        closed_loop: closed_stats,
        open_loop: open_stats,
        probes,
        band,
        mean_delta_cost,
        std_error_delta_cost,
        max_relative_deviation,
        n_x: spec.n_x,
        n_r,
        complexity_ratio: complexity_ratio(spec.n_x, n_r),
    };
    Ok(MonteCarloResult {
        stats,
        closed_loop: ok_closed,
        open_loop: ok_open,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleResult {
    pub scale: f64,
    pub mean_delta_cost: f64,
    pub std_error: f64,
    /// Standard deviation of the individual `delta J` values.
    pub spread: f64,
    pub n_succeeded: usize,
    pub n_failed: usize,
}

/// Closed-loop cost deviations `J_realized - J_nominal` at each noise scale,
/// with the same seeds at every scale.
pub fn noise_scaling_check(
    system: &ClosedLoop,
    noise_scales: &[f64],
    n_runs: usize,
    base_seed: u64,
) -> Result<Vec<ScaleResult>, HarnessError> {
    if n_runs < 2 {
        return Err(HarnessError::Config(format!("n_runs must be at least 2, got {n_runs}")));
    }
    noise_scales
        .iter()
        .map(|&scale| {
            if !(scale >= 0.0 && scale.is_finite()) {
                return Err(HarnessError::Config(format!("noise scale must be non-negative, got {scale}")));
            }
            let opts = RolloutOptions {
                noise_scale: scale,
                ..Default::default()
            };
            let runs = system.rollouts(n_runs, base_seed, &opts);
            let deltas: Vec<f64> = runs.iter().filter_map(|r| r.as_ref().ok().map(|r| r.delta_cost)).collect();
            if deltas.len() < 2 {
                return Err(HarnessError::TooFewRuns {
                    needed: 2,
                    got: deltas.len(),
                });
            }
            let (mean, se) = mean_and_se(&deltas);
            Ok(ScaleResult {
                scale,
                mean_delta_cost: mean,
                std_error: se,
                spread: se * (deltas.len() as f64).sqrt(),
                n_succeeded: deltas.len(),
                n_failed: n_runs - deltas.len(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use crate::enkf::EnkfConfig;
    use crate::lqg::LqrWeights;
    use crate::plant::LinearPlant;
    use crate::trajopt::{optimize_open_loop, GradientConfig};
    use crate::tvera::{era_realize, estimate_markov, run_impulse_experiments, HankelConfig};

    struct Fixture {
        plant: LinearPlant,
        nominal: NominalTrajectory,
        controller: LqgController,
        b0: GaussianBelief,
        cost: CostSpec,
        n_r: usize,
    }

    /// Full pipeline on a small unstable LTI plant.
    fn fixture(noise: f64) -> Fixture {
        let n = 30;
        let plant = LinearPlant::new(
            DMatrix::from_row_slice(2, 2, &[1.02, 0.1, 0.0, 0.97]),
            DMatrix::from_row_slice(2, 1, &[0.0, 0.5]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::from_element(1, 1, noise),
            DMatrix::from_element(1, 1, noise),
            1.0,
            n,
        )
        .unwrap();
        let b0 = GaussianBelief::new(DVector::from_vec(vec![1.0, 0.0]), DMatrix::identity(2, 2) * 0.01 * noise).unwrap();
        let cost = CostSpec {
            q_track: DMatrix::identity(2, 2),
            q_cov: 0.0,
            r_ctrl: DMatrix::from_element(1, 1, 0.1),
            q_term: DMatrix::identity(2, 2),
            target: DVector::from_vec(vec![2.0, 0.0]),
            hold_from: 0,
        };
        let nominal = optimize_open_loop(
            &plant,
            &b0,
            None,
            &cost,
            &GradientConfig { max_iters: 200, epsilon: 1e-4, ..Default::default() },
            &EnkfConfig { ensemble_size: 20, seed: 3, ..Default::default() },
        )
        .unwrap();
        let hankel = HankelConfig { p: 4, q: 4, rank_tol: 1e-8, n_r_fixed: None };
        let archive = run_impulse_experiments(&plant, &nominal, 0.01, hankel.p - 1).unwrap();
        let model = era_realize(&estimate_markov(&archive).unwrap(), &hankel).unwrap();
        let weights = LqrWeights::from_output_weights(&model, &DMatrix::from_element(1, 1, 1.0), &cost.r_ctrl, &DMatrix::from_element(1, 1, 1.0), n);
        let controller = LqgController::synthesize(
            &model,
            &weights,
            &plant.spec().process_noise.map(|v| v.max(1e-6)),
            &plant.spec().measurement_noise.map(|v| v.max(1e-6)),
            DMatrix::identity(model.n_r, model.n_r),
        )
        .unwrap();
        Fixture {
            n_r: model.n_r,
            plant,
            nominal,
            controller,
            b0,
            cost,
        }
    }

    #[test]
    fn noise_free_rollout_is_the_nominal() {
        let f = fixture(0.0);
        let sys = ClosedLoop::new(&f.plant, &f.nominal, &f.controller, &f.b0, &f.cost).unwrap();
        let r = sys
            .rollout(5, &RolloutOptions { exact_initial_state: true, ..Default::default() })
            .unwrap();
        assert_eq!(r.controls, f.nominal.controls);
        assert_eq!(r.states, f.nominal.nominal_states);
        assert_eq!(r.delta_cost, 0.0);
        assert!(r.estimates.iter().all(|a| a.amax() == 0.0));
    }

    #[test]
    fn zero_scale_gives_zero_delta_cost() {
        let f = fixture(0.1);
        let sys = ClosedLoop::new(&f.plant, &f.nominal, &f.controller, &f.b0, &f.cost).unwrap();
        let res = noise_scaling_check(&sys, &[0.0], 4, 0).unwrap();
        assert_eq!(res[0].mean_delta_cost, 0.0);
        assert_eq!(res[0].std_error, 0.0);
    }

    #[test]
    fn feedback_beats_open_loop_on_unstable_plant() {
        let f = fixture(0.05);
        let sys = ClosedLoop::new(&f.plant, &f.nominal, &f.controller, &f.b0, &f.cost).unwrap();
        let probes = [Probe { name: "x0".into(), index: 0 }];
        let res = monte_carlo(&sys, &MonteCarloConfig { n_runs: 100, ..Default::default() }, &probes, None, f.n_r).unwrap();
        let p = &res.stats.probes[0];
        assert!(p.closed_loop_rms < p.open_loop_rms, "{} vs {}", p.closed_loop_rms, p.open_loop_rms);
        let closed_mean: f64 = res.closed_loop.iter().map(|r| r.cost).sum::<f64>() / 100.0;
        let open_mean: f64 = res.open_loop.iter().map(|r| r.cost).sum::<f64>() / 100.0;
        assert!(closed_mean < open_mean);
        assert_eq!(res.stats.n_succeeded, 100);
    }

    #[test]
    fn monte_carlo_is_reproducible_and_identical_seeds_have_no_spread() {
        let f = fixture(0.05);
        let sys = ClosedLoop::new(&f.plant, &f.nominal, &f.controller, &f.b0, &f.cost).unwrap();
        let cfg = MonteCarloConfig { n_runs: 6, ..Default::default() };
        let a = monte_carlo(&sys, &cfg, &[], None, f.n_r).unwrap();
        let b = monte_carlo(&sys, &cfg, &[], None, f.n_r).unwrap();
        assert_eq!(a.stats, b.stats);
        let same = sys.rollout(7, &RolloutOptions::default()).unwrap();
        let recs = [&same, &same];
        let st = trajectory_stats(&recs);
        assert!(st.std.iter().all(|s| s.amax() == 0.0));
    }

    #[test]
    fn band_and_complexity_reporting() {
        assert_eq!(complexity_ratio(100, 20), 2.5e5);
        let band = BandSpec { target: 150.0, half_width: 3.0, steps: vec![0] };
        let x = DVector::from_vec(vec![147.0, 153.0, 153.1, 150.0]);
        assert_eq!(band_fraction(&x, &band), 0.75);
    }

    #[test]
    fn rejects_bad_settings() {
        let f = fixture(0.05);
        let sys = ClosedLoop::new(&f.plant, &f.nominal, &f.controller, &f.b0, &f.cost).unwrap();
        let err = monte_carlo(&sys, &MonteCarloConfig { n_runs: 1, ..Default::default() }, &[], None, 2).err().unwrap();
        assert!(matches!(err, HarnessError::Config(_)));
        let probes = [Probe { name: "bad".into(), index: 7 }];
        assert!(monte_carlo(&sys, &MonteCarloConfig::default(), &probes, None, 2).is_err());
    }

    /// Fails whenever the process-noise draw is large.
    struct Fragile(LinearPlant);

    impl Plant for Fragile {
        fn spec(&self) -> &crate::plant::PlantSpec {
            self.0.spec()
        }
        fn step_into(&self, x: &[f64], u: &[f64], w: &[f64], next: &mut [f64]) -> Result<(), PlantError> {
            if w[0].abs() > 2.5 * self.0.spec().process_noise[(0, 0)].sqrt() {
                return Err(PlantError::Divergence { step: None });
            }
            self.0.step_into(x, u, w, next)
        }
        fn observe_into(&self, x: &[f64], v: &[f64], out: &mut [f64]) -> Result<(), PlantError> {
            self.0.observe_into(x, v, out)
        }
    }

    #[test]
    fn failed_rollouts_are_excluded_and_counted() {
        let f = fixture(0.05);
        let fragile = Fragile(f.plant.clone());
        let sys = ClosedLoop::new(&fragile, &f.nominal, &f.controller, &f.b0, &f.cost).unwrap();
        let res = monte_carlo(&sys, &MonteCarloConfig { n_runs: 40, ..Default::default() }, &[], None, f.n_r).unwrap();
        // P(|z| > 2.5) over 30 steps is about 0.31 per run
        assert!(!res.stats.failures.is_empty());
        assert_eq!(res.stats.n_succeeded + res.stats.failures.len(), 40);
        assert!(res.stats.failures[0].1.contains("at step"));
    }
}
