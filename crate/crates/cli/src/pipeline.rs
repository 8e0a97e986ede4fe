//! Stage orchestration: optimize → identify → synthesize → evaluate, with
//! artifact persistence and resumption from cached upstream artifacts.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use soc_core::harness::{monte_carlo, noise_scaling_check, ClosedLoop, MonteCarloResult, RolloutOptions, ScaleResult};
use soc_core::lqg::{LqgController, LqrWeights};
use soc_core::trajopt::{optimize_open_loop, CostEvaluator, NominalTrajectory};
use soc_core::tvera::{
    era_realize, estimate_markov, reconstruction_error_at, run_impulse_experiments, LtvModel, MarkovParameterSet,
};

use crate::config::{ExperimentConfig, ParseError, Resolved, Violation};
use crate::io::{self, ControllerRecord, IoError, LtvRecord, MarkovRecord, NominalMeta, NominalTable, ProbeSummary, RunMeta, Stamp, Summary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Optimize,
    Identify,
    Synthesize,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Optimize, Stage::Identify, Stage::Synthesize, Stage::Evaluate];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Optimize => "optimize",
            Stage::Identify => "identify",
            Stage::Synthesize => "synthesize",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("cannot read configuration {path}: {source}")]
    ConfigRead { path: PathBuf, source: std::io::Error },
    #[error("configuration {path}, {error}")]
    Parse { path: PathBuf, error: ParseError },
    #[error("invalid configuration:\n{}", .0.iter().map(|v| format!("  {v}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<Violation>),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: Stage, message: String },
}

impl PipelineError {
    /// 1 validation, 2 I/O, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Parse { .. } | PipelineError::Invalid(_) => 1,
            PipelineError::ConfigRead { .. } | PipelineError::Io(_) => 2,
            PipelineError::Stage { .. } => 3,
        }
    }

    fn stage(stage: Stage, err: impl ToString) -> Self {
        PipelineError::Stage {
            stage,
            message: err.to_string(),
        }
    }
}

/// Output of the identification stage.
pub struct Identification {
    pub markov: MarkovParameterSet,
    pub model: LtvModel,
    /// `(k, worst relative block error)` at the middle and end of the
    /// realized window.
    pub reconstruction_error: Vec<(usize, f64)>,
}

/// Output of the evaluation stage.
pub struct Evaluation {
    pub monte_carlo: MonteCarloResult,
    pub noise_scaling: Vec<ScaleResult>,
    pub zero_noise_state_error: f64,
}

/// Optimize the open-loop nominal trajectory.
pub fn optimize(r: &Resolved) -> Result<NominalTrajectory, PipelineError> {
    optimize_open_loop(
        r.plant.as_ref(),
        &r.b0,
        r.initial_controls.clone(),
        &r.cost,
        &r.gradient,
        &r.enkf,
    )
    .map_err(|e| PipelineError::stage(Stage::Optimize, e))
}

/// Impulse experiments around the nominal, Markov parameters and ERA.
///
/// Outputs are recorded `p - 1` steps past the horizon so the Hankel window
/// reaches the final step.
pub fn identify(r: &Resolved, nominal: &NominalTrajectory) -> Result<Identification, PipelineError> {
    let fail = |e: soc_core::tvera::TveraError| PipelineError::stage(Stage::Identify, e);
    let archive = run_impulse_experiments(r.plant.as_ref(), nominal, r.impulse_magnitude, r.hankel.p - 1).map_err(fail)?;
    let markov = estimate_markov(&archive).map_err(fail)?;
    let model = era_realize(&markov, &r.hankel).map_err(fail)?;
    let mid = (model.k_lo + model.k_hi) / 2;
    let reconstruction_error = [mid, model.k_hi]
        .into_iter()
        .map(|k| reconstruction_error_at(&model, &markov, k).map(|e| (k, e)))
        .collect::<Result<_, _>>()
        .map_err(fail)?;
    Ok(Identification {
        markov,
        model,
        reconstruction_error,
    })
}

/// LQG synthesis on the identified model.
pub fn synthesize(r: &Resolved, model: &LtvModel) -> Result<LqgController, PipelineError> {
    let horizon = r.plant.spec().horizon;
    let weights = LqrWeights::from_output_weights(model, &r.output_weight, &r.control_weight, &r.terminal_output_weight, horizon);
    let p0 = DMatrix::identity(model.n_r, model.n_r) * r.p0_scale;
    LqgController::synthesize(model, &weights, &r.filter_process_noise, &r.filter_measurement_noise, p0)
        .map_err(|e| PipelineError::stage(Stage::Synthesize, e))
}

/// Paired Monte Carlo, noise-scaling check and zero-noise consistency.
pub fn evaluate(
    r: &Resolved,
    nominal: &NominalTrajectory,
    controller: &LqgController,
) -> Result<Evaluation, PipelineError> {
    let fail = |e: soc_core::harness::HarnessError| PipelineError::stage(Stage::Evaluate, e);
    let system = ClosedLoop::new(r.plant.as_ref(), nominal, controller, &r.b0, &r.cost).map_err(fail)?;
    let monte_carlo = monte_carlo(&system, &r.monte_carlo, &r.probes, r.band.as_ref(), controller.n_r()).map_err(fail)?;
    let noise_scaling = if r.noise_scales.is_empty() {
        Vec::new()
    } else {
        noise_scaling_check(&system, &r.noise_scales, r.scaling_runs, r.monte_carlo.base_seed).map_err(fail)?
    };
    let quiet = RolloutOptions {
        noise_scale: 0.0,
        exact_initial_state: true,
        feedback: true,
    };
    let record = system.rollout(r.monte_carlo.base_seed, &quiet).map_err(fail)?;
    let zero_noise_state_error = record
        .states
        .iter()
        .zip(&nominal.nominal_states)
        .map(|(x, mu)| (x - mu).norm() / mu.norm().max(1e-300))
        .fold(0.0, f64::max);
    Ok(Evaluation {
        monte_carlo,
        noise_scaling,
        zero_noise_state_error,
    })
}

/// Fixed artifact names inside the output directory.
pub mod files {
    pub const NOMINAL_CSV: &str = "nominal.csv";
    pub const NOMINAL_JSON: &str = "nominal.json";
    pub const MARKOV: &str = "markov.json";
    pub const MODEL: &str = "ltv_model.json";
    pub const CONTROLLER: &str = "controller.json";
    pub const ROLLOUTS: &str = "rollouts";
    pub const SUMMARY: &str = "summary.json";
    pub const RUN_META: &str = "run_meta.json";
}

/// `ltv_model.json` payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub model: LtvRecord,
    pub reconstruction_error: Vec<(usize, f64)>,
}

/// Runs stages against an output directory.
pub struct Runner {
    pub config: ExperimentConfig,
    pub resolved: Resolved,
    pub out: PathBuf,
    timings: Vec<(String, f64)>,
}

impl Runner {
    /// Load and validate a configuration file. `seed` and `out` override the
    /// file's values.
    pub fn from_path(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|source| PipelineError::ConfigRead {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = ExperimentConfig::from_json(&text).map_err(|error| PipelineError::Parse {
            path: path.to_path_buf(),
            error,
        })?;
        if let Some(seed) = seed {
            config.seed = seed;
        }
        let out = out.or_else(|| config.output_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
        Self::new(config, out)
    }

    pub fn new(config: ExperimentConfig, out: PathBuf) -> Result<Self, PipelineError> {
        let resolved = config.resolve().map_err(PipelineError::Invalid)?;
        Ok(Self {
            config,
            resolved,
            out,
            timings: Vec::new(),
        })
    }

    fn stamp(&self, stage: Stage) -> Stamp {
        Stamp {
            config_hash: self.config.hash(),
            stage_hash: self.config.stage_hash(stage),
            seed: self.config.seed,
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn timed<T>(&mut self, stage: Stage, f: impl FnOnce(&Self) -> Result<T, PipelineError>) -> Result<T, PipelineError> {
        log::info!("stage {stage}: start");
        let t0 = Instant::now();
        let result = f(self);
        let secs = t0.elapsed().as_secs_f64();
        log::info!("stage {stage}: {} after {secs:.1} s", if result.is_ok() { "done" } else { "failed" });
        self.timings.push((stage.name().to_string(), secs));
        result
    }

    pub fn save_nominal(&self, nominal: &NominalTrajectory) -> Result<(), PipelineError> {
        let stamp = self.stamp(Stage::Optimize);
        let table = NominalTable {
            controls: nominal.controls.clone(),
            beliefs: nominal.beliefs.clone(),
        };
        io::write_nominal_csv(&self.path(files::NOMINAL_CSV), &stamp, &table)?;
        let meta = NominalMeta {
            horizon: nominal.horizon(),
            n_x: nominal.beliefs[0].mean.len(),
            n_u: nominal.controls.first().map_or(0, |u| u.len()),
            cost: nominal.cost,
            state_cost: nominal.state_cost,
            iterations: nominal.iterations,
            converged: nominal.converged,
            gradient_norm: nominal.gradient_norm.is_finite().then_some(nominal.gradient_norm),
            cost_history: nominal.cost_history.clone(),
            config: serde_json::to_value(&self.config).expect("config serializes"),
        };
        io::write_artifact(&self.path(files::NOMINAL_JSON), &stamp, meta, true)?;
        Ok(())
    }

    pub fn load_nominal(&self) -> Result<NominalTrajectory, PipelineError> {
        let hash = self.config.stage_hash(Stage::Optimize);
        let table = io::read_nominal_csv(&self.path(files::NOMINAL_CSV), &hash)?;
        let meta: NominalMeta = io::read_artifact(&self.path(files::NOMINAL_JSON), &hash)?;
        let evaluator = CostEvaluator::new(self.resolved.cost.clone());
        let mut nominal =
            NominalTrajectory::from_controls(self.resolved.plant.as_ref(), table.controls, table.beliefs, &evaluator, meta.cost)
                .map_err(|e| PipelineError::stage(Stage::Identify, format!("replaying cached nominal: {e}")))?;
        nominal.iterations = meta.iterations;
        nominal.converged = meta.converged;
        nominal.gradient_norm = meta.gradient_norm.unwrap_or(f64::NAN);
        nominal.cost_history = meta.cost_history;
        Ok(nominal)
    }

    pub fn save_identification(&self, id: &Identification) -> Result<(), PipelineError> {
        let stamp = self.stamp(Stage::Identify);
        io::write_artifact(&self.path(files::MARKOV), &stamp, MarkovRecord::from(&id.markov), false)?;
        let file = ModelFile {
            model: LtvRecord::from(&id.model),
            reconstruction_error: id.reconstruction_error.clone(),
        };
        io::write_artifact(&self.path(files::MODEL), &stamp, file, false)?;
        Ok(())
    }

    pub fn load_model(&self) -> Result<ModelFile, PipelineError> {
        Ok(io::read_artifact(&self.path(files::MODEL), &self.config.stage_hash(Stage::Identify))?)
    }

    pub fn load_markov(&self) -> Result<MarkovParameterSet, PipelineError> {
        let path = self.path(files::MARKOV);
        let rec: MarkovRecord = io::read_artifact(&path, &self.config.stage_hash(Stage::Identify))?;
        rec.to_markov().map_err(|message| IoError::Malformed { path, message }.into())
    }

    pub fn save_controller(&self, controller: &LqgController) -> Result<(), PipelineError> {
        let stamp = self.stamp(Stage::Synthesize);
        io::write_artifact(&self.path(files::CONTROLLER), &stamp, ControllerRecord::from(controller), false)?;
        Ok(())
    }

    pub fn load_controller(&self) -> Result<LqgController, PipelineError> {
        let path = self.path(files::CONTROLLER);
        let rec: ControllerRecord = io::read_artifact(&path, &self.config.stage_hash(Stage::Synthesize))?;
        rec.to_controller().map_err(|message| IoError::Malformed { path, message }.into())
    }

    fn summary(&self, nominal: &NominalTrajectory, model: &ModelFile, eval: &Evaluation) -> Summary {
        let s = &eval.monte_carlo.stats;
        Summary {
            nominal_cost: nominal.cost,
            nominal_state_cost: nominal.state_cost,
            optimizer_iterations: nominal.iterations,
            optimizer_converged: nominal.converged,
            n_r: model.model.n_r,
            era_window: (model.model.k_lo, model.model.k_hi),
            reconstruction_error: model.reconstruction_error.clone(),
            n_runs: s.n_runs,
            n_succeeded: s.n_succeeded,
            failures: s.failures.clone(),
            probes: s
                .probes
                .iter()
                .map(|p| ProbeSummary {
                    name: p.name.clone(),
                    index: p.index,
                    closed_loop_rms: p.closed_loop_rms,
                    open_loop_rms: p.open_loop_rms,
                })
                .collect(),
            band: s.band.clone(),
            mean_delta_cost: s.mean_delta_cost,
            std_error_delta_cost: s.std_error_delta_cost,
            max_relative_deviation: s.max_relative_deviation,
            noise_scaling: eval.noise_scaling.clone(),
            zero_noise_state_error: eval.zero_noise_state_error,
            n_x: s.n_x,
            complexity_ratio: s.complexity_ratio,
        }
    }

    /// Run `from ..= to`, loading the artifacts of earlier stages from the
    /// output directory. Returns the summary when evaluation ran.
    pub fn run(&mut self, from: Stage, to: Stage) -> Result<Option<Summary>, PipelineError> {
        io::ensure_dir(&self.out)?;
        let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let active = |s: Stage| from <= s && s <= to;

        let mut nominal = None;
        if active(Stage::Optimize) {
            let n = self.timed(Stage::Optimize, |me| optimize(&me.resolved))?;
            log::info!(
                "nominal cost {:.6e} after {} iterations (converged: {})",
                n.cost,
                n.iterations,
                n.converged
            );
            self.save_nominal(&n)?;
            nominal = Some(n);
        }
        let needs_nominal = to >= Stage::Identify && (active(Stage::Identify) || active(Stage::Evaluate));
        let nominal = match nominal {
            Some(n) => Some(n),
            None if needs_nominal => Some(self.load_nominal()?),
            None => None,
        };

        let mut model_file = None;
        let mut model = None;
        if active(Stage::Identify) {
            let nominal = nominal.as_ref().expect("loaded above");
            let id = self.timed(Stage::Identify, |me| identify(&me.resolved, nominal))?;
            log::info!("identified n_r = {} on window {:?}", id.model.n_r, id.model.valid_range());
            self.save_identification(&id)?;
            model_file = Some(ModelFile {
                model: LtvRecord::from(&id.model),
                reconstruction_error: id.reconstruction_error.clone(),
            });
            model = Some(id.model);
        } else if to >= Stage::Synthesize {
            let file = self.load_model()?;
            let path = self.path(files::MODEL);
            model = Some(file.model.to_model().map_err(|message| IoError::Malformed { path, message })?);
            model_file = Some(file);
        }

        let mut controller = None;
        if active(Stage::Synthesize) {
            let m = model.as_ref().expect("loaded above");
            let c = self.timed(Stage::Synthesize, |me| synthesize(&me.resolved, m))?;
            self.save_controller(&c)?;
            controller = Some(c);
        }

        let mut summary = None;
        if active(Stage::Evaluate) {
            let controller = match controller {
                Some(c) => c,
                None => self.load_controller()?,
            };
            let nominal = nominal.as_ref().expect("loaded above");
            let eval = self.timed(Stage::Evaluate, |me| evaluate(&me.resolved, nominal, &controller))?;
            let stamp = self.stamp(Stage::Evaluate);
            io::write_rollouts(&self.path(files::ROLLOUTS), &stamp, &eval.monte_carlo, self.resolved.plant.spec().dt)?;
            let s = self.summary(nominal, model_file.as_ref().expect("loaded above"), &eval);
            io::write_artifact(&self.path(files::SUMMARY), &stamp, &s, true)?;
            summary = Some(s);
        }

        let meta = RunMeta {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: self.config.hash(),
            seed: self.config.seed,
            threads: rayon::current_num_threads(),
            started_unix,
            stages: self.timings.clone(),
        };
        io::write_run_meta(&self.path(files::RUN_META), &meta)?;
        Ok(summary)
    }
}
