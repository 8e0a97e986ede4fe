//! Artifact persistence: JSON records with row-major matrices and CSV time
//! series, each stamped with the configuration hash and seed.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use soc_core::enkf::BeliefSummary;
use soc_core::harness::{BandCheck, MonteCarloResult, ScaleResult};
use soc_core::lqg::LqgController;
use soc_core::tvera::{LtvModel, MarkovParameterSet};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error("{path}: malformed artifact: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("{path}: produced by a different configuration (stage hash {found}, expected {expected}); rerun the upstream stage")]
    Stale { path: PathBuf, found: String, expected: String },
}

impl IoError {
    fn file(path: &Path, source: std::io::Error) -> Self {
        IoError::File {
            path: path.to_path_buf(),
            source,
        }
    }

    fn malformed(path: &Path, message: impl ToString) -> Self {
        IoError::Malformed {
            path: path.to_path_buf(),
            message: message.to_string(),
        }
    }
}

/// Provenance stamped into every artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub config_hash: String,
    /// Hash of the configuration sections this artifact depends on.
    pub stage_hash: String,
    pub seed: u64,
}

/// A JSON artifact: stamp plus payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub config_hash: String,
    pub stage_hash: String,
    pub seed: u64,
    pub data: T,
}

/// Dense matrix stored row by row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRecord {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&DMatrix<f64>> for MatrixRecord {
    fn from(m: &DMatrix<f64>) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.transpose().as_slice().to_vec(),
        }
    }
}

impl MatrixRecord {
    pub fn to_matrix(&self) -> Result<DMatrix<f64>, String> {
        if self.data.len() != self.rows * self.cols {
            return Err(format!("{}x{} matrix with {} entries", self.rows, self.cols, self.data.len()));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

fn records(ms: &[DMatrix<f64>]) -> Vec<MatrixRecord> {
    ms.iter().map(MatrixRecord::from).collect()
}

fn matrices(rs: &[MatrixRecord]) -> Result<Vec<DMatrix<f64>>, String> {
    rs.iter().map(MatrixRecord::to_matrix).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovBlock {
    pub k: usize,
    pub j: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Markov parameters `h_{k,j}` with their dimension header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovRecord {
    pub n_u: usize,
    pub n_y: usize,
    pub horizon: usize,
    pub n_out: usize,
    pub blocks: Vec<MarkovBlock>,
}

impl From<&MarkovParameterSet> for MarkovRecord {
    fn from(m: &MarkovParameterSet) -> Self {
        Self {
            n_u: m.n_u,
            n_y: m.n_y,
            horizon: m.horizon,
            n_out: m.n_out,
            blocks: m
                .iter()
                .map(|(k, j, h)| {
                    let r = MatrixRecord::from(h);
                    MarkovBlock {
                        k,
                        j,
                        rows: r.rows,
                        cols: r.cols,
                        data: r.data,
                    }
                })
                .collect(),
        }
    }
}

impl MarkovRecord {
    pub fn to_markov(&self) -> Result<MarkovParameterSet, String> {
        let mut set = MarkovParameterSet::zeros(self.n_u, self.n_y, self.horizon, self.n_out);
        for b in &self.blocks {
            if set.get(b.k, b.j).is_none() || (b.rows, b.cols) != (self.n_y, self.n_u) {
                return Err(format!("block ({}, {}) out of range or misshapen", b.k, b.j));
            }
            let m = MatrixRecord {
                rows: b.rows,
                cols: b.cols,
                data: b.data.clone(),
            };
            set.set(b.k, b.j, m.to_matrix()?);
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LtvRecord {
    pub n_r: usize,
    pub n_u: usize,
    pub n_y: usize,
    pub k_lo: usize,
    pub k_hi: usize,
    pub a: Vec<MatrixRecord>,
    pub b: Vec<MatrixRecord>,
    pub c: Vec<MatrixRecord>,
    pub singular_values: Vec<Vec<f64>>,
}

impl From<&LtvModel> for LtvRecord {
    fn from(m: &LtvModel) -> Self {
        Self {
            n_r: m.n_r,
            n_u: m.n_u,
            n_y: m.n_y,
            k_lo: m.k_lo,
            k_hi: m.k_hi,
            a: records(&m.a),
            b: records(&m.b),
            c: records(&m.c),
            singular_values: m.singular_values.iter().map(|s| s.as_slice().to_vec()).collect(),
        }
    }
}

impl LtvRecord {
    pub fn to_model(&self) -> Result<LtvModel, String> {
        let mut model = LtvModel::from_sequences(self.k_lo, matrices(&self.a)?, matrices(&self.b)?, matrices(&self.c)?)
            .map_err(|e| e.to_string())?;
        if (model.n_r, model.n_u, model.n_y, model.k_hi) != (self.n_r, self.n_u, self.n_y, self.k_hi) {
            return Err("dimension header disagrees with the matrices".into());
        }
        model.singular_values = self.singular_values.iter().map(|s| DVector::from_column_slice(s)).collect();
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerRecord {
    pub n_r: usize,
    pub horizon: usize,
    pub l: Vec<MatrixRecord>,
    pub s: Vec<MatrixRecord>,
    pub kalman_gain: Vec<MatrixRecord>,
    pub p_prior: Vec<MatrixRecord>,
    pub p_post: Vec<MatrixRecord>,
    pub p0: MatrixRecord,
    pub a_hat0: Vec<f64>,
    pub regularized_steps: Vec<usize>,
    pub a: Vec<MatrixRecord>,
    pub b: Vec<MatrixRecord>,
    pub c: Vec<MatrixRecord>,
}

impl From<&LqgController> for ControllerRecord {
    fn from(c: &LqgController) -> Self {
        Self {
            n_r: c.n_r(),
            horizon: c.horizon(),
            l: records(&c.l),
            s: records(&c.s),
            kalman_gain: records(&c.kalman_gain),
            p_prior: records(&c.p_prior),
            p_post: records(&c.p_post),
            p0: MatrixRecord::from(&c.p0),
            a_hat0: c.a_hat0.as_slice().to_vec(),
            regularized_steps: c.regularized_steps.clone(),
            a: records(&c.a),
            b: records(&c.b),
            c: records(&c.c),
        }
    }
}

impl ControllerRecord {
    pub fn to_controller(&self) -> Result<LqgController, String> {
        let n = self.horizon;
        let ctrl = LqgController {
            l: matrices(&self.l)?,
            s: matrices(&self.s)?,
            kalman_gain: matrices(&self.kalman_gain)?,
            p_prior: matrices(&self.p_prior)?,
            p_post: matrices(&self.p_post)?,
            p0: self.p0.to_matrix()?,
            a_hat0: DVector::from_column_slice(&self.a_hat0),
            regularized_steps: self.regularized_steps.clone(),
            a: matrices(&self.a)?,
            b: matrices(&self.b)?,
            c: matrices(&self.c)?,
        };
        let lengths = [ctrl.l.len(), ctrl.a.len(), ctrl.b.len()];
        let lengths_plus = [ctrl.s.len(), ctrl.kalman_gain.len(), ctrl.p_prior.len(), ctrl.p_post.len(), ctrl.c.len()];
        if lengths.iter().any(|l| *l != n) || lengths_plus.iter().any(|l| *l != n + 1) || ctrl.n_r() != self.n_r {
            return Err("sequence lengths disagree with the horizon".into());
        }
        Ok(ctrl)
    }
}

/// Optimizer metadata written next to `nominal.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NominalMeta {
    pub horizon: usize,
    pub n_x: usize,
    pub n_u: usize,
    pub cost: f64,
    pub state_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Absent when no gradient was evaluated.
    pub gradient_norm: Option<f64>,
    pub cost_history: Vec<f64>,
    pub config: serde_json::Value,
}

/// Contents of `nominal.csv`: controls and belief summaries.
#[derive(Debug, Clone, PartialEq)]
pub struct NominalTable {
    pub controls: Vec<DVector<f64>>,
    pub beliefs: Vec<BeliefSummary>,
}

/// Roundtrip-exact decimal text for a float.
fn num(x: f64) -> String {
    format!("{x}")
}

fn header_line(stamp: &Stamp) -> String {
    format!(
        "# config_hash={} stage_hash={} seed={}\n",
        stamp.config_hash, stamp.stage_hash, stamp.seed
    )
}

fn parse_header(path: &Path, text: &str) -> Result<Stamp, IoError> {
    let line = text.lines().next().unwrap_or("");
    let mut fields = std::collections::HashMap::new();
    for part in line.trim_start_matches('#').split_whitespace() {
        if let Some((k, v)) = part.split_once('=') {
            fields.insert(k, v);
        }
    }
    let get = |k: &str| fields.get(k).map(|v| v.to_string()).ok_or_else(|| IoError::malformed(path, format!("missing `{k}` in header")));
    Ok(Stamp {
        config_hash: get("config_hash")?,
        stage_hash: get("stage_hash")?,
        seed: get("seed")?.parse().map_err(|e| IoError::malformed(path, e))?,
    })
}

pub fn ensure_dir(dir: &Path) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(|e| IoError::file(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    let mut f = fs::File::create(path).map_err(|e| IoError::file(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| IoError::file(path, e))
}

fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|e| IoError::file(path, e))
}

/// Write a stamped JSON artifact; `pretty` for small, human-read files.
pub fn write_artifact<T: Serialize>(path: &Path, stamp: &Stamp, data: T, pretty: bool) -> Result<(), IoError> {
    let artifact = Artifact {
        config_hash: stamp.config_hash.clone(),
        stage_hash: stamp.stage_hash.clone(),
        seed: stamp.seed,
        data,
    };
    let text = if pretty {
        serde_json::to_string_pretty(&artifact)
    } else {
        serde_json::to_string(&artifact)
    }
    .map_err(|e| IoError::malformed(path, e))?;
    write_text(path, &(text + "\n"))
}

/// Read a JSON artifact, requiring the given stage hash.
pub fn read_artifact<T: DeserializeOwned>(path: &Path, expected_stage_hash: &str) -> Result<T, IoError> {
    let text = read_text(path)?;
    let artifact: Artifact<T> = serde_json::from_str(&text).map_err(|e| IoError::malformed(path, e))?;
    check_stage(path, &artifact.stage_hash, expected_stage_hash)?;
    Ok(artifact.data)
}

fn check_stage(path: &Path, found: &str, expected: &str) -> Result<(), IoError> {
    if found != expected {
        return Err(IoError::Stale {
            path: path.to_path_buf(),
            found: found.to_string(),
            expected: expected.to_string(),
        });
    }
    Ok(())
}

/// Write `nominal.csv`: `step, u_*, mean_*, trace_cov` for `k = 0..N`
/// (controls are blank at the terminal step).
pub fn write_nominal_csv(path: &Path, stamp: &Stamp, table: &NominalTable) -> Result<(), IoError> {
    let n_u = table.controls.first().map_or(0, |u| u.len());
    let n_x = table.beliefs[0].mean.len();
    let mut out = header_line(stamp);
    let mut cols = vec!["step".to_string()];
    cols.extend((0..n_u).map(|i| format!("u_{i}")));
    cols.extend((0..n_x).map(|i| format!("mean_{i}")));
    cols.push("trace_cov".into());
    out += &cols.join(",");
    out.push('\n');
    for (k, b) in table.beliefs.iter().enumerate() {
        let mut row = vec![k.to_string()];
        match table.controls.get(k) {
            Some(u) => row.extend(u.iter().map(|v| num(*v))),
            None => row.extend(std::iter::repeat_n(String::new(), n_u)),
        }
        row.extend(b.mean.iter().map(|v| num(*v)));
        row.push(num(b.cov_trace));
        out += &row.join(",");
        out.push('\n');
    }
    write_text(path, &out)
}

/// Read `nominal.csv`, requiring the given stage hash.
pub fn read_nominal_csv(path: &Path, expected_stage_hash: &str) -> Result<NominalTable, IoError> {
    let text = read_text(path)?;
    let stamp = parse_header(path, &text)?;
    check_stage(path, &stamp.stage_hash, expected_stage_hash)?;
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| IoError::malformed(path, e))?.clone();
    let n_u = headers.iter().filter(|h| h.starts_with("u_")).count();
    let n_x = headers.iter().filter(|h| h.starts_with("mean_")).count();
    if headers.len() != 2 + n_u + n_x {
        return Err(IoError::malformed(path, "unexpected columns"));
    }
    let parse = |s: &str| s.parse::<f64>().map_err(|e| IoError::malformed(path, e));
    let mut controls = Vec::new();
    let mut beliefs = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| IoError::malformed(path, e))?;
        if rec[0].parse::<usize>().ok() != Some(k) {
            return Err(IoError::malformed(path, format!("row {k} has step `{}`", &rec[0])));
        }
        if !rec[1].is_empty() {
            let u: Result<Vec<f64>, _> = (1..=n_u).map(|i| parse(&rec[i])).collect();
            controls.push(DVector::from_vec(u?));
        }
        let mean: Result<Vec<f64>, _> = (1 + n_u..1 + n_u + n_x).map(|i| parse(&rec[i])).collect();
        beliefs.push(BeliefSummary {
            mean: DVector::from_vec(mean?),
            cov_trace: parse(&rec[1 + n_u + n_x])?,
        });
    }
    if beliefs.len() != controls.len() + 1 {
        return Err(IoError::malformed(path, "expected one more belief row than control rows"));
    }
    Ok(NominalTable { controls, beliefs })
}

fn series_csv(stamp: &Stamp, columns: &[String], rows: impl Iterator<Item = Vec<String>>) -> String {
    let mut out = header_line(stamp);
    out += &columns.join(",");
    out.push('\n');
    for row in rows {
        out += &row.join(",");
        out.push('\n');
    }
    out
}

/// Write per-step statistics and per-run costs under `dir`.
pub fn write_rollouts(dir: &Path, stamp: &Stamp, result: &MonteCarloResult, dt: f64) -> Result<(), IoError> {
    let stats = &result.stats;
    let n_x = stats.n_x;
    let mut state_cols = vec!["step".to_string(), "time".to_string()];
    state_cols.extend((0..n_x).map(|i| format!("x_{i}")));
    let series = [
        ("closed_loop_mean.csv", &stats.closed_loop.mean),
        ("closed_loop_std.csv", &stats.closed_loop.std),
        ("open_loop_mean.csv", &stats.open_loop.mean),
        ("open_loop_std.csv", &stats.open_loop.std),
    ];
    for (name, values) in series {
        let rows = values.iter().enumerate().map(|(k, v)| {
            let mut row = vec![k.to_string(), num(k as f64 * dt)];
            row.extend(v.iter().map(|x| num(*x)));
            row
        });
        write_text(&dir.join(name), &series_csv(stamp, &state_cols, rows))?;
    }

    let mut probe_cols = vec!["step".to_string(), "time".to_string()];
    for p in &stats.probes {
        probe_cols.push(format!("{}_closed_loop_rms", p.name));
        probe_cols.push(format!("{}_open_loop_rms", p.name));
    }
    let steps = stats.closed_loop.mean.len();
    let rows = (0..steps).map(|k| {
        let mut row = vec![k.to_string(), num(k as f64 * dt)];
        for p in &stats.probes {
            row.push(num(p.closed_loop_rms_by_step[k]));
            row.push(num(p.open_loop_rms_by_step[k]));
        }
        row
    });
    write_text(&dir.join("probe_errors.csv"), &series_csv(stamp, &probe_cols, rows))?;

    let band_cols: Vec<String> = ["step", "time", "closed_loop_fraction", "open_loop_fraction", "nominal_fraction"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows = stats.band.iter().map(|b: &BandCheck| {
        vec![
            b.step.to_string(),
            num(b.time),
            num(b.closed_loop_fraction),
            num(b.open_loop_fraction),
            num(b.nominal_fraction),
        ]
    });
    write_text(&dir.join("band_fractions.csv"), &series_csv(stamp, &band_cols, rows))?;

    let cost_cols: Vec<String> = ["seed", "closed_loop_cost", "open_loop_cost", "delta_cost", "max_relative_deviation"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows = result.closed_loop.iter().zip(&result.open_loop).map(|(c, o)| {
        vec![
            c.seed.to_string(),
            num(c.cost),
            num(o.cost),
            num(c.delta_cost),
            num(c.max_relative_deviation),
        ]
    });
    write_text(&dir.join("costs.csv"), &series_csv(stamp, &cost_cols, rows))
}

/// Per-probe summary figures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub name: String,
    pub index: usize,
    pub closed_loop_rms: f64,
    pub open_loop_rms: f64,
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub nominal_cost: f64,
    pub nominal_state_cost: f64,
    pub optimizer_iterations: usize,
    pub optimizer_converged: bool,
    pub n_r: usize,
    pub era_window: (usize, usize),
    pub reconstruction_error: Vec<(usize, f64)>,
    pub n_runs: usize,
    pub n_succeeded: usize,
    pub failures: Vec<(u64, String)>,
    pub probes: Vec<ProbeSummary>,
    pub band: Vec<BandCheck>,
    pub mean_delta_cost: f64,
    pub std_error_delta_cost: f64,
    pub max_relative_deviation: f64,
    pub noise_scaling: Vec<ScaleResult>,
    /// Largest relative state error of a zero-noise closed-loop rollout.
    pub zero_noise_state_error: f64,
    pub n_x: usize,
    pub complexity_ratio: f64,
}

/// Wall-clock information kept apart from the reproducible artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub threads: usize,
    pub started_unix: u64,
    pub stages: Vec<(String, f64)>,
}

pub fn write_run_meta(path: &Path, meta: &RunMeta) -> Result<(), IoError> {
    let text = serde_json::to_string_pretty(meta).map_err(|e| IoError::malformed(path, e))?;
    write_text(path, &(text + "\n"))
}
