//! Experiment configuration: JSON schema, defaults, validation with field
//! paths, and resolution into the library types.

use std::fmt;
use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use soc_core::enkf::{EnkfConfig, GaussianBelief};
use soc_core::harness::{BandSpec, MonteCarloConfig, Probe};
use soc_core::linalg::{asymmetry, min_eigenvalue};
use soc_core::plant::{HeatPlant, HeatPlantConfig, LinearPlant, Plant};
use soc_core::trajopt::{CostSpec, GradientConfig};
use soc_core::tvera::HankelConfig;

use crate::pipeline::Stage;

/// A square matrix given as a scalar multiple of the identity, a diagonal,
/// or in full (row by row).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Scalar(f64),
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl MatrixSpec {
    pub fn resolve(&self, n: usize) -> Result<DMatrix<f64>, String> {
        match self {
            MatrixSpec::Scalar(s) => Ok(DMatrix::identity(n, n) * *s),
            MatrixSpec::Diagonal(d) if d.len() == n => Ok(DMatrix::from_diagonal(&DVector::from_column_slice(d))),
            MatrixSpec::Diagonal(d) => Err(format!("diagonal has {} entries, expected {n}", d.len())),
            MatrixSpec::Full(rows) => {
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return Err(format!("expected a {n}x{n} matrix"));
                }
                Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
            }
        }
    }
}

/// A vector given as a single value (repeated) or in full.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VectorSpec {
    Scalar(f64),
    Full(Vec<f64>),
}

impl VectorSpec {
    pub fn resolve(&self, n: usize) -> Result<DVector<f64>, String> {
        match self {
            VectorSpec::Scalar(s) => Ok(DVector::from_element(n, *s)),
            VectorSpec::Full(v) if v.len() == n => Ok(DVector::from_column_slice(v)),
            VectorSpec::Full(v) => Err(format!("has {} entries, expected {n}", v.len())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearSection {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantSection {
    pub dt: f64,
    /// Number of control steps `N`.
    pub horizon: usize,
    pub process_noise: MatrixSpec,
    pub measurement_noise: MatrixSpec,
    pub initial_covariance: MatrixSpec,
    /// Defaults to the heat plant's initial profile; required for linear plants.
    pub initial_state: Option<VectorSpec>,
    pub heat: Option<HeatPlantConfig>,
    pub linear: Option<LinearSection>,
}

impl Default for PlantSection {
    fn default() -> Self {
        Self {
            dt: 0.25,
            horizon: 250,
            process_noise: MatrixSpec::Scalar(1.0),
            measurement_noise: MatrixSpec::Scalar(1.0),
            initial_covariance: MatrixSpec::Scalar(0.0),
            initial_state: None,
            heat: Some(HeatPlantConfig::default()),
            linear: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostSection {
    pub q_track: MatrixSpec,
    pub q_cov: f64,
    pub r_ctrl: MatrixSpec,
    pub q_term: MatrixSpec,
    pub target: VectorSpec,
    pub hold_from: usize,
}

impl Default for CostSection {
    fn default() -> Self {
        Self {
            q_track: MatrixSpec::Scalar(1.0),
            q_cov: 0.0,
            r_ctrl: MatrixSpec::Scalar(1e-3),
            q_term: MatrixSpec::Scalar(1.0),
            target: VectorSpec::Scalar(150.0),
            hold_from: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub alpha: f64,
    pub h: f64,
    pub epsilon: f64,
    pub max_iters: usize,
    pub line_search: bool,
    pub ensemble_size: usize,
    pub regularization: f64,
    /// Constant initial control per channel; zero when absent.
    pub initial_controls: Option<VectorSpec>,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let g = GradientConfig::default();
        let e = EnkfConfig::default();
        Self {
            alpha: g.alpha,
            h: g.h,
            epsilon: g.epsilon,
            max_iters: g.max_iters,
            line_search: g.line_search,
            ensemble_size: e.ensemble_size,
            regularization: e.regularization,
            initial_controls: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SysidSection {
    pub magnitude: f64,
    pub p: usize,
    pub q: usize,
    pub rank_tol: f64,
    pub n_r_fixed: Option<usize>,
}

impl Default for SysidSection {
    fn default() -> Self {
        let h = HankelConfig::default();
        Self {
            magnitude: 0.01,
            p: h.p,
            q: h.q,
            rank_tol: h.rank_tol,
            n_r_fixed: h.n_r_fixed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LqgSection {
    /// Output tracking weight `Q_y` (n_y x n_y).
    pub output_weight: MatrixSpec,
    pub control_weight: MatrixSpec,
    pub terminal_output_weight: MatrixSpec,
    /// `P_0 = p0_scale * I` in ROM coordinates.
    pub p0_scale: f64,
    /// Filter noise overrides; the plant's W and V when absent.
    pub process_noise: Option<MatrixSpec>,
    pub measurement_noise: Option<MatrixSpec>,
}

impl Default for LqgSection {
    fn default() -> Self {
        Self {
            output_weight: MatrixSpec::Scalar(1.0),
            control_weight: MatrixSpec::Scalar(1e-2),
            terminal_output_weight: MatrixSpec::Scalar(1.0),
            p0_scale: 1.0,
            process_noise: None,
            measurement_noise: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandSection {
    pub target: f64,
    pub half_width: f64,
    /// Check times in seconds.
    pub times: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    pub n_runs: usize,
    /// Defaults to the experiment seed.
    pub base_seed: Option<u64>,
    pub exact_initial_state: bool,
    pub noise_scales: Vec<f64>,
    pub scaling_runs: usize,
    /// Probe locations as fractions of the state index range (of the slab
    /// length for the heat plant).
    pub probes: Vec<f64>,
    pub band: Option<BandSection>,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            n_runs: 100,
            base_seed: None,
            exact_initial_state: false,
            noise_scales: vec![0.01, 1.0],
            scaling_runs: 200,
            probes: vec![0.4, 0.9],
            band: Some(BandSection {
                target: 150.0,
                half_width: 3.0,
                times: vec![37.5, 62.5],
            }),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Not part of the configuration hash.
    pub output_dir: Option<PathBuf>,
    pub plant: PlantSection,
    pub cost: CostSection,
    pub optimizer: OptimizerSection,
    pub sysid: SysidSection,
    pub lqg: LqgSection,
    pub evaluation: EvaluationSection,
}

/// One failed check, addressed by its dotted field path.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// JSON syntax or schema error with its position in the file.
#[derive(Debug, Clone, PartialEq)]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}, column {}: {}", self.line, self.column, self.message)
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ParseError> {
        serde_json::from_str(text).map_err(|e| ParseError {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    /// SHA-256 of the canonical JSON form, excluding the output directory.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = None;
        let text = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// Hash of the sections a pipeline stage depends on (the seed and every
    /// section up to and including the stage's own).
    pub fn stage_hash(&self, stage: Stage) -> String {
        let mut parts = vec![
            serde_json::to_value(self.seed),
            serde_json::to_value(&self.plant),
            serde_json::to_value(&self.cost),
            serde_json::to_value(&self.optimizer),
        ];
        if stage >= Stage::Identify {
            parts.push(serde_json::to_value(&self.sysid));
        }
        if stage >= Stage::Synthesize {
            parts.push(serde_json::to_value(&self.lqg));
        }
        if stage >= Stage::Evaluate {
            parts.push(serde_json::to_value(&self.evaluation));
        }
        let parts: Vec<serde_json::Value> = parts.into_iter().map(|p| p.expect("config serializes")).collect();
        let text = serde_json::to_string(&parts).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// Check every invariant and resolve into library types.
    pub fn resolve(&self) -> Result<Resolved, Vec<Violation>> {
        let mut v = Checker::default();
        let p = &self.plant;

        if !(p.dt > 0.0 && p.dt.is_finite()) {
            v.push("plant.dt", format!("must be positive (got {})", p.dt));
        }
        if p.horizon == 0 {
            v.push("plant.horizon", "must be at least 1");
        }
        let dims = match (&p.heat, &p.linear) {
            (Some(h), None) => {
                for msg in h.violations() {
                    let field = msg.split_whitespace().next().unwrap_or("").split('[').next().unwrap_or("");
                    let known = ["length", "n_grid", "kappa0", "eta", "substeps", "source_positions", "sensor_positions"];
                    let path = if known.contains(&field) { format!("plant.heat.{field}") } else { "plant.heat".into() };
                    v.push(&path, msg);
                }
                Some((h.n_grid, h.source_positions.len(), h.sensor_positions.len()))
            }
            (None, Some(l)) => {
                let n = l.a.len();
                let (n_u, n_y) = (l.b.first().map_or(0, |r| r.len()), l.c.len());
                if n == 0 || l.a.iter().any(|r| r.len() != n) {
                    v.push("plant.linear.a", "must be a non-empty square matrix");
                }
                if l.b.len() != n || n_u == 0 || l.b.iter().any(|r| r.len() != n_u) {
                    v.push("plant.linear.b", format!("must have {n} rows of equal, non-zero length"));
                }
                if n_y == 0 || l.c.iter().any(|r| r.len() != n) {
                    v.push("plant.linear.c", format!("must have rows of length {n}"));
                }
                if p.initial_state.is_none() {
                    v.push("plant.initial_state", "is required for a linear plant");
                }
                Some((n, n_u, n_y))
            }
            _ => {
                v.push("plant", "exactly one of `heat` or `linear` must be given");
                None
            }
        };
        let Some((n_x, n_u, n_y)) = dims else {
            return Err(v.0);
        };

        let w = v.psd("plant.process_noise", &p.process_noise, n_u);
        let vn = v.psd("plant.measurement_noise", &p.measurement_noise, n_y);
        let sigma0 = v.psd("plant.initial_covariance", &p.initial_covariance, n_x);

        let c = &self.cost;
        let q_track = v.psd("cost.q_track", &c.q_track, n_x);
        let r_ctrl = v.psd("cost.r_ctrl", &c.r_ctrl, n_u);
        let q_term = v.psd("cost.q_term", &c.q_term, n_x);
        let target = v.vector("cost.target", &c.target, n_x);
        if !(c.q_cov >= 0.0 && c.q_cov.is_finite()) {
            v.push("cost.q_cov", format!("must be non-negative (got {})", c.q_cov));
        }
        if c.hold_from > p.horizon {
            v.push("cost.hold_from", format!("must not exceed plant.horizon = {} (got {})", p.horizon, c.hold_from));
        }

        let o = &self.optimizer;
        for (name, val) in [("alpha", o.alpha), ("h", o.h), ("epsilon", o.epsilon), ("regularization", o.regularization)] {
            if !(val > 0.0 && val.is_finite()) {
                v.push(&format!("optimizer.{name}"), format!("must be positive (got {val})"));
            }
        }
        if o.max_iters == 0 {
            v.push("optimizer.max_iters", "must be at least 1");
        }
        if o.ensemble_size < 2 {
            v.push("optimizer.ensemble_size", format!("must be at least 2 (got {})", o.ensemble_size));
        }
        let u0 = o
            .initial_controls
            .as_ref()
            .and_then(|spec| v.vector("optimizer.initial_controls", spec, n_u));

        let s = &self.sysid;
        if !(s.magnitude > 0.0 && s.magnitude.is_finite()) {
            v.push("sysid.magnitude", format!("must be positive (got {})", s.magnitude));
        }
        if s.p < 2 {
            v.push("sysid.p", format!("must be at least 2 (got {})", s.p));
        }
        if s.q < 1 {
            v.push("sysid.q", format!("must be at least 1 (got {})", s.q));
        }
        if !(s.rank_tol > 0.0 && s.rank_tol < 1.0) {
            v.push("sysid.rank_tol", format!("must lie in (0, 1) (got {})", s.rank_tol));
        }
        if s.q + 1 > p.horizon {
            v.push("sysid.q", format!("leaves no feasible Hankel window for plant.horizon = {}", p.horizon));
        }
        if let Some(n_r) = s.n_r_fixed {
            let cap = (s.p * n_y).min(s.q * n_u);
            if n_r == 0 || n_r > cap {
                v.push(
                    "sysid.n_r_fixed",
                    format!(
                        "Hankel rank constraint violated: n_r = {n_r} must be in [1, min(p*n_y, q*n_u)] = [1, {cap}] (p*n_y = {}, q*n_u = {})",
                        s.p * n_y,
                        s.q * n_u
                    ),
                );
            }
        }

        let l = &self.lqg;
        let q_y = v.psd("lqg.output_weight", &l.output_weight, n_y);
        let r_lqg = v.psd("lqg.control_weight", &l.control_weight, n_u);
        let q_y_final = v.psd("lqg.terminal_output_weight", &l.terminal_output_weight, n_y);
        if !(l.p0_scale >= 0.0 && l.p0_scale.is_finite()) {
            v.push("lqg.p0_scale", format!("must be non-negative (got {})", l.p0_scale));
        }
        let w_filter = match &l.process_noise {
            Some(m) => v.psd("lqg.process_noise", m, n_u),
            None => w.clone(),
        };
        let v_filter = match &l.measurement_noise {
            Some(m) => v.psd("lqg.measurement_noise", m, n_y),
            None => vn.clone(),
        };

        let e = &self.evaluation;
        if e.n_runs < 2 {
            v.push("evaluation.n_runs", format!("must be at least 2 (got {})", e.n_runs));
        }
        if !e.noise_scales.is_empty() && e.scaling_runs < 2 {
            v.push("evaluation.scaling_runs", format!("must be at least 2 (got {})", e.scaling_runs));
        }
        for (i, s) in e.noise_scales.iter().enumerate() {
            if !(*s >= 0.0 && s.is_finite()) {
                v.push(&format!("evaluation.noise_scales[{i}]"), format!("must be non-negative (got {s})"));
            }
        }
        for (i, f) in e.probes.iter().enumerate() {
            if !(0.0..=1.0).contains(f) {
                v.push(&format!("evaluation.probes[{i}]"), format!("must lie in [0, 1] (got {f})"));
            }
        }
        let band = e.band.as_ref().map(|b| {
            if !(b.half_width >= 0.0) {
                v.push("evaluation.band.half_width", format!("must be non-negative (got {})", b.half_width));
            }
            let steps = b
                .times
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let step = (t / p.dt).round();
                    if !(step >= 0.0 && step as usize <= p.horizon && ((step * p.dt) - t).abs() < 1e-9 * t.max(1.0)) {
                        v.push(
                            &format!("evaluation.band.times[{i}]"),
                            format!("must be a multiple of plant.dt within the horizon (got {t})"),
                        );
                    }
                    step.max(0.0) as usize
                })
                .collect();
            BandSpec {
                target: b.target,
                half_width: b.half_width,
                steps,
            }
        });

        if !v.0.is_empty() {
            return Err(v.0);
        }

        let plant: Box<dyn Plant> = match (&p.heat, &p.linear) {
            (Some(h), _) => match HeatPlant::new(h.clone(), p.dt, p.horizon, w.clone(), vn.clone()) {
                Ok(plant) => Box::new(plant),
                Err(err) => return Err(vec![violation("plant", err.to_string())]),
            },
            (_, Some(lin)) => {
                let m = |rows: &Vec<Vec<f64>>| DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j]);
                match LinearPlant::new(m(&lin.a), m(&lin.b), m(&lin.c), w.clone(), vn.clone(), p.dt, p.horizon) {
                    Ok(plant) => Box::new(plant),
                    Err(err) => return Err(vec![violation("plant.linear", err.to_string())]),
                }
            }
            _ => unreachable!("checked above"),
        };
        let mean = match (&p.initial_state, &p.heat) {
            (Some(spec), _) => match spec.resolve(n_x) {
                Ok(x) => x,
                Err(m) => return Err(vec![violation("plant.initial_state", m)]),
            },
            (None, Some(h)) => heat_initial_state(h),
            (None, None) => unreachable!("checked above"),
        };
        let b0 = match GaussianBelief::new(mean, sigma0) {
            Ok(b) => b,
            Err(err) => return Err(vec![violation("plant.initial_covariance", err.to_string())]),
        };

        let probes = e
            .probes
            .iter()
            .map(|f| {
                let index = (f * (n_x - 1) as f64).round() as usize;
                Probe {
                    name: format!("x={f}L"),
                    index,
                }
            })
            .collect();

        Ok(Resolved {
            plant,
            b0,
            cost: CostSpec {
                q_track,
                q_cov: c.q_cov,
                r_ctrl,
                q_term,
                target: target.expect("checked"),
                hold_from: c.hold_from,
            },
            gradient: GradientConfig {
                alpha: o.alpha,
                h: o.h,
                epsilon: o.epsilon,
                max_iters: o.max_iters,
                line_search: o.line_search,
            },
            enkf: EnkfConfig {
                ensemble_size: o.ensemble_size,
                seed: self.seed,
                regularization: o.regularization,
            },
            initial_controls: u0.map(|u| vec![u; p.horizon]),
            hankel: HankelConfig {
                p: s.p,
                q: s.q,
                rank_tol: s.rank_tol,
                n_r_fixed: s.n_r_fixed,
            },
            impulse_magnitude: s.magnitude,
            output_weight: q_y,
            control_weight: r_lqg,
            terminal_output_weight: q_y_final,
            p0_scale: l.p0_scale,
            filter_process_noise: w_filter,
            filter_measurement_noise: v_filter,
            monte_carlo: MonteCarloConfig {
                n_runs: e.n_runs,
                base_seed: e.base_seed.unwrap_or(self.seed),
                exact_initial_state: e.exact_initial_state,
                noise_scale: 1.0,
            },
            noise_scales: e.noise_scales.clone(),
            scaling_runs: e.scaling_runs,
            probes,
            band,
        })
    }

    /// Resolved parameters as `(name, value)` rows for display.
    pub fn table(&self) -> Vec<(String, String)> {
        let mut rows = Vec::new();
        let mut add = |k: &str, v: String| rows.push((k.to_string(), v));
        let p = &self.plant;
        add("seed", self.seed.to_string());
        add("N", p.horizon.to_string());
        add("dt", p.dt.to_string());
        add("total time", format!("{}", p.dt * p.horizon as f64));
        if let Some(h) = &p.heat {
            add("plant", "heat".into());
            add("n_x (n_grid)", h.n_grid.to_string());
            add("length", h.length.to_string());
            add("kappa0", h.kappa0.to_string());
            add("kappa1", h.kappa1.to_string());
            add("eta", h.eta.to_string());
            add("sources", format!("{:?}", h.source_positions));
            add("sensors", format!("{:?}", h.sensor_positions));
            add("substeps", h.substeps.to_string());
        } else if let Some(l) = &p.linear {
            add("plant", "linear".into());
            add("n_x", l.a.len().to_string());
        }
        add("W", format!("{:?}", p.process_noise));
        add("V", format!("{:?}", p.measurement_noise));
        add("Sigma_0", format!("{:?}", p.initial_covariance));
        let o = &self.optimizer;
        add("ensemble size m", o.ensemble_size.to_string());
        add("alpha", o.alpha.to_string());
        add("h", o.h.to_string());
        add("epsilon", o.epsilon.to_string());
        add("max_iters", o.max_iters.to_string());
        add("line_search", o.line_search.to_string());
        let s = &self.sysid;
        add("impulse magnitude", s.magnitude.to_string());
        add("p", s.p.to_string());
        add("q", s.q.to_string());
        add("rank_tol", s.rank_tol.to_string());
        add("n_r_fixed", s.n_r_fixed.map_or("auto".into(), |n| n.to_string()));
        let l = &self.lqg;
        add("Q_y", format!("{:?}", l.output_weight));
        add("R", format!("{:?}", l.control_weight));
        add("P0 scale", l.p0_scale.to_string());
        let e = &self.evaluation;
        add("n_runs", e.n_runs.to_string());
        add("noise_scales", format!("{:?}", e.noise_scales));
        add("scaling_runs", e.scaling_runs.to_string());
        add("probes", format!("{:?}", e.probes));
        add("config hash", self.hash());
        rows
    }
}

/// Uniform initial temperature with the fixed right-end value.
fn heat_initial_state(h: &HeatPlantConfig) -> DVector<f64> {
    let mut x = DVector::from_element(h.n_grid, h.t_init);
    if h.right_boundary == soc_core::plant::RightBoundary::Dirichlet {
        x[h.n_grid - 1] = h.t_right;
    }
    x
}

fn violation(path: &str, message: impl Into<String>) -> Violation {
    Violation {
        path: path.to_string(),
        message: message.into(),
    }
}

#[derive(Default)]
struct Checker(Vec<Violation>);

impl Checker {
    fn push(&mut self, path: &str, message: impl Into<String>) {
        self.0.push(violation(path, message));
    }

    /// Resolve a symmetric PSD matrix, recording problems (returns a zero
    /// placeholder when invalid).
    fn psd(&mut self, path: &str, spec: &MatrixSpec, n: usize) -> DMatrix<f64> {
        match spec.resolve(n) {
            Ok(m) => {
                if m.iter().any(|x| !x.is_finite()) {
                    self.push(path, "has non-finite entries");
                } else if asymmetry(&m) > 1e-12 * (1.0 + m.amax()) {
                    self.push(path, "must be symmetric");
                } else if n > 0 && min_eigenvalue(&m) < -1e-10 * (1.0 + m.amax()) {
                    self.push(path, "must be positive semi-definite");
                }
                m
            }
            Err(msg) => {
                self.push(path, msg);
                DMatrix::zeros(n, n)
            }
        }
    }

    fn vector(&mut self, path: &str, spec: &VectorSpec, n: usize) -> Option<DVector<f64>> {
        match spec.resolve(n) {
            Ok(v) => Some(v),
            Err(msg) => {
                self.push(path, msg);
                None
            }
        }
    }
}

/// Library-level objects built from a valid configuration.
pub struct Resolved {
    pub plant: Box<dyn Plant>,
    pub b0: GaussianBelief,
    pub cost: CostSpec,
    pub gradient: GradientConfig,
    pub enkf: EnkfConfig,
    pub initial_controls: Option<Vec<DVector<f64>>>,
    pub hankel: HankelConfig,
    pub impulse_magnitude: f64,
    pub output_weight: DMatrix<f64>,
    pub control_weight: DMatrix<f64>,
    pub terminal_output_weight: DMatrix<f64>,
    pub p0_scale: f64,
    pub filter_process_noise: DMatrix<f64>,
    pub filter_measurement_noise: DMatrix<f64>,
    pub monte_carlo: MonteCarloConfig,
    pub noise_scales: Vec<f64>,
    pub scaling_runs: usize,
    pub probes: Vec<Probe>,
    pub band: Option<BandSpec>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let cfg = ExperimentConfig::default();
        let r = cfg.resolve().unwrap();
        assert_eq!(r.plant.spec().n_x, 100);
        assert_eq!(r.band.unwrap().steps, vec![150, 250]);
        assert_eq!(r.probes[0].index, 40);
        assert_eq!(r.probes[1].index, 89);
        assert_eq!(r.b0.mean[99], 150.0);
        assert_eq!(r.b0.mean[0], 100.0);
    }

    #[test]
    fn unknown_keys_are_rejected_with_position() {
        let err = ExperimentConfig::from_json("{\n  \"seed\": 1,\n  \"plantt\": {}\n}").unwrap_err();
        assert_eq!(err.line, 3);
        assert!(err.message.contains("plantt"));
        let err = ExperimentConfig::from_json(r#"{"plant": {"heat": {"kapa0": 1}}}"#).unwrap_err();
        assert!(err.message.contains("kapa0"));
    }

    #[test]
    fn violations_carry_field_paths() {
        let mut cfg = ExperimentConfig::default();
        cfg.plant.dt = -0.25;
        cfg.sysid.n_r_fixed = Some(80);
        cfg.evaluation.probes = vec![1.5];
        let errs = cfg.resolve().err().unwrap();
        let paths: Vec<&str> = errs.iter().map(|v| v.path.as_str()).collect();
        assert!(paths.contains(&"plant.dt"));
        assert!(paths.contains(&"sysid.n_r_fixed"));
        assert!(paths.contains(&"evaluation.probes[0]"));
        let hankel = errs.iter().find(|v| v.path == "sysid.n_r_fixed").unwrap();
        assert!(hankel.message.contains("Hankel rank"));
    }

    #[test]
    fn heat_field_violations_are_scoped() {
        let mut cfg = ExperimentConfig::default();
        cfg.plant.heat.as_mut().unwrap().n_grid = 2;
        let errs = cfg.resolve().err().unwrap();
        assert!(errs.iter().any(|v| v.path == "plant.heat.n_grid"), "{errs:?}");
    }

    #[test]
    fn matrix_specs() {
        assert_eq!(MatrixSpec::Scalar(2.0).resolve(2).unwrap(), DMatrix::identity(2, 2) * 2.0);
        assert_eq!(
            MatrixSpec::Diagonal(vec![1.0, 3.0]).resolve(2).unwrap(),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 3.0])
        );
        assert!(MatrixSpec::Full(vec![vec![1.0]]).resolve(2).is_err());
        let parsed: MatrixSpec = serde_json::from_str("[[1, 0.5], [0.5, 2]]").unwrap();
        assert_eq!(parsed.resolve(2).unwrap()[(0, 1)], 0.5);
    }

    #[test]
    fn hash_ignores_output_dir_but_not_seed() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output_dir = Some("elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.seed = 9;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn stage_hashes_track_only_upstream_sections() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.lqg.p0_scale = 2.0;
        assert_eq!(a.stage_hash(Stage::Optimize), b.stage_hash(Stage::Optimize));
        assert_eq!(a.stage_hash(Stage::Identify), b.stage_hash(Stage::Identify));
        assert_ne!(a.stage_hash(Stage::Synthesize), b.stage_hash(Stage::Synthesize));
        b.plant.dt = 0.5;
        assert_ne!(a.stage_hash(Stage::Optimize), b.stage_hash(Stage::Optimize));
    }

    #[test]
    fn linear_plant_config() {
        let text = r#"{
            "plant": {"dt": 1, "horizon": 10, "heat": null,
                      "linear": {"a": [[0.9]], "b": [[1]], "c": [[1]]},
                      "initial_state": [1.0], "process_noise": 0.1, "measurement_noise": 0.1},
            "cost": {"target": 2.0},
            "sysid": {"p": 3, "q": 3},
            "evaluation": {"probes": [0.0], "band": null}
        }"#;
        let cfg = ExperimentConfig::from_json(text).unwrap();
        let r = cfg.resolve().unwrap();
        assert_eq!(r.plant.spec().n_x, 1);
        assert_eq!(r.cost.target[0], 2.0);
    }
}
