//! Reduced-order identification of the deviation dynamics around a nominal
//! trajectory with the time-varying eigensystem realization algorithm.
//!
//! Pipeline: single-channel impulse experiments on the noise-free plant give
//! generalized Markov parameters `h_{k,j}`; for each step `k` a block Hankel
//! matrix `H_k` is factored by SVD into observability and controllability
//! factors, and the triples `(A_k, B_k, C_k)` are read off those factors.
//! Every realization basis depends on `k`, so only basis-invariant quantities
//! (the reconstructed Markov parameters) are meaningful to compare.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{pinv, SortedSvd};
use crate::plant::{Plant, PlantError};
use crate::trajopt::NominalTrajectory;

/// Relative singular-value cutoff for every pseudo-inverse in this module.
pub const PINV_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TveraError {
    #[error("impulse experiment (step {step}, channel {channel}) failed: {source}")]
    Experiment {
        step: usize,
        channel: usize,
        source: PlantError,
    },
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error("invalid experiment archive: {0}")]
    Archive(String),
    #[error("least squares is under-determined; unidentifiable (k, j) blocks: {}", fmt_blocks(.blocks))]
    UnderDetermined { blocks: Vec<(usize, usize)> },
    #[error("step {k} is outside the feasible Hankel window [{lo}, {hi}]")]
    Boundary { k: usize, lo: usize, hi: usize },
    #[error("Hankel matrix at step {k} is zero")]
    ZeroRank { k: usize },
    #[error("invalid realization settings: {0}")]
    Config(String),
    #[error("Markov parameter ({k}, {j}) is outside the identified window [{lo}, {hi}]")]
    OutOfRange { k: usize, j: usize, lo: usize, hi: usize },
}

fn fmt_blocks(blocks: &[(usize, usize)]) -> String {
    let shown: Vec<String> = blocks.iter().take(12).map(|(k, j)| format!("({k}, {j})")).collect();
    if blocks.len() > shown.len() {
        format!("{} ... ({} total)", shown.join(", "), blocks.len())
    } else {
        shown.join(", ")
    }
}

/// One identification experiment: input deviations `du_0..du_{N-1}` and the
/// output deviations `dy_0..dy_{n_out}` they produce.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub inputs: Vec<DVector<f64>>,
    pub outputs: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentArchive {
    pub n_u: usize,
    pub n_y: usize,
    /// Number of input steps `N`.
    pub horizon: usize,
    /// Last recorded output step (`N` plus any tail extension).
    pub n_out: usize,
    pub experiments: Vec<Experiment>,
}

impl ExperimentArchive {
    pub fn validate(&self) -> Result<(), TveraError> {
        if self.n_out < self.horizon {
            return Err(TveraError::Archive(format!(
                "outputs end at step {} before the input horizon {}",
                self.n_out, self.horizon
            )));
        }
        for (e, exp) in self.experiments.iter().enumerate() {
            let ok = exp.inputs.len() == self.horizon
                && exp.outputs.len() == self.n_out + 1
                && exp.inputs.iter().all(|u| u.len() == self.n_u)
                && exp.outputs.iter().all(|y| y.len() == self.n_y);
            if !ok {
                return Err(TveraError::Archive(format!("experiment {e} has inconsistent dimensions")));
            }
            let finite = exp
                .inputs
                .iter()
                .chain(&exp.outputs)
                .all(|v| v.iter().all(|x| x.is_finite()));
            if !finite {
                return Err(TveraError::Archive(format!("experiment {e} has non-finite entries")));
            }
        }
        Ok(())
    }

    /// `(step, channel, magnitude)` when the experiment is a single-channel
    /// impulse.
    fn impulse_of(exp: &Experiment) -> Option<(usize, usize, f64)> {
        let mut found = None;
        for (i, u) in exp.inputs.iter().enumerate() {
            for (c, v) in u.iter().enumerate() {
                if *v != 0.0 {
                    if found.is_some() {
                        return None;
                    }
                    found = Some((i, c, *v));
                }
            }
        }
        found
    }
}

/// Noise-free states and outputs along the nominal, extended `tail` steps
/// past the horizon by holding the last nominal control.
pub fn extended_nominal(
    plant: &dyn Plant,
    nominal: &NominalTrajectory,
    tail: usize,
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>), PlantError> {
    let n = nominal.horizon();
    let mut states = nominal.nominal_states.clone();
    let mut outputs = nominal.nominal_observations.clone();
    let hold = nominal.controls[n - 1].clone();
    let zero_w = DVector::zeros(plant.spec().n_u);
    let zero_v = DVector::zeros(plant.spec().n_y);
    for k in n..n + tail {
        let next = plant.step(&states[k], &hold, &zero_w).map_err(|e| e.at_step(k))?;
        outputs.push(plant.observe(&next, &zero_v)?);
        states.push(next);
    }
    Ok((states, outputs))
}

/// Run the `N * n_u` single-channel impulse experiments around `nominal`.
///
/// Each experiment starts from the nominal state at its impulse step, so the
/// recorded deviations are exactly zero before the impulse. Outputs are
/// recorded through step `N + tail`; past the horizon the last nominal
/// control is held.
pub fn run_impulse_experiments(
    plant: &dyn Plant,
    nominal: &NominalTrajectory,
    magnitude: f64,
    tail: usize,
) -> Result<ExperimentArchive, TveraError> {
    if !magnitude.is_finite() {
        return Err(TveraError::Config(format!("impulse magnitude must be finite, got {magnitude}")));
    }
    let spec = plant.spec();
    let (n_u, n_y) = (spec.n_u, spec.n_y);
    let n = nominal.horizon();
    let n_out = n + tail;
    let (states, outputs) = extended_nominal(plant, nominal, tail)?;
    let control = |k: usize| &nominal.controls[k.min(n - 1)];

    let experiments = (0..n * n_u)
        .into_par_iter()
        .map(|index| {
            let (step, channel) = (index / n_u, index % n_u);
            let fail = |source: PlantError| TveraError::Experiment { step, channel, source };
            let mut inputs = vec![DVector::zeros(n_u); n];
            inputs[step][channel] = magnitude;
            let mut dy = vec![DVector::zeros(n_y); n_out + 1];
            let zero_w = vec![0.0; n_u];
            let zero_v = vec![0.0; n_y];
            let mut x = states[step].as_slice().to_vec();
            let mut next = vec![0.0; x.len()];
            let mut y = vec![0.0; n_y];
            let mut u = control(step).clone();
            u[channel] += magnitude;
            for k in step..n_out {
                let uk = if k == step { u.as_slice() } else { control(k).as_slice() };
                plant
                    .step_into(&x, uk, &zero_w, &mut next)
                    .map_err(|e| fail(e.at_step(k)))?;
                std::mem::swap(&mut x, &mut next);
                plant.observe_into(&x, &zero_v, &mut y).map_err(fail)?;
                for (r, d) in dy[k + 1].iter_mut().enumerate() {
                    *d = y[r] - outputs[k + 1][r];
                }
            }
            Ok(Experiment { inputs, outputs: dy })
        })
        .collect::<Result<Vec<_>, TveraError>>()?;

    Ok(ExperimentArchive {
        n_u,
        n_y,
        horizon: n,
        n_out,
        experiments,
    })
}

/// Generalized Markov parameters `h_{k,j}` for `0 <= j < min(k, N)`,
/// `1 <= k <= n_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovParameterSet {
    pub n_u: usize,
    pub n_y: usize,
    pub horizon: usize,
    pub n_out: usize,
    /// `blocks[k][j]`; `blocks[0]` is empty.
    blocks: Vec<Vec<DMatrix<f64>>>,
}

impl MarkovParameterSet {
    /// All-zero parameter set of the given shape.
    pub fn zeros(n_u: usize, n_y: usize, horizon: usize, n_out: usize) -> Self {
        let blocks = (0..=n_out)
            .map(|k| vec![DMatrix::zeros(n_y, n_u); k.min(horizon)])
            .collect();
        Self {
            n_u,
            n_y,
            horizon,
            n_out,
            blocks,
        }
    }

    /// Build from a generator `h(k, j)`.
    pub fn from_fn(
        n_u: usize,
        n_y: usize,
        horizon: usize,
        n_out: usize,
        mut h: impl FnMut(usize, usize) -> DMatrix<f64>,
    ) -> Self {
        let mut set = Self::zeros(n_u, n_y, horizon, n_out);
        for k in 1..=n_out {
            for j in 0..k.min(horizon) {
                set.blocks[k][j] = h(k, j);
            }
        }
        set
    }

    /// `h_{k,j}`; `None` outside the stored range (including `j >= k`).
    pub fn get(&self, k: usize, j: usize) -> Option<&DMatrix<f64>> {
        self.blocks.get(k).and_then(|row| row.get(j))
    }

    pub fn set(&mut self, k: usize, j: usize, block: DMatrix<f64>) {
        self.blocks[k][j] = block;
    }

    /// Iterate over `(k, j, h_{k,j})`.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, &DMatrix<f64>)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(k, row)| row.iter().enumerate().map(move |(j, h)| (k, j, h)))
    }
}

/// Generalized Markov parameters from an experiment archive.
///
/// A complete set of single-channel impulses reduces the least squares to a
/// division per column; any other design is solved per output step as the
/// stacked least-squares problem with an SVD pseudo-inverse.
pub fn estimate_markov(archive: &ExperimentArchive) -> Result<MarkovParameterSet, TveraError> {
    archive.validate()?;
    let (n_u, n_y, n) = (archive.n_u, archive.n_y, archive.horizon);
    if let Some(set) = estimate_from_impulses(archive) {
        return Ok(set);
    }

    let m = archive.experiments.len();
    let rows: Vec<Result<Vec<DMatrix<f64>>, Vec<(usize, usize)>>> = (0..=archive.n_out)
        .into_par_iter()
        .map(|k| {
            let n_blocks = k.min(n);
            if n_blocks == 0 {
                return Ok(Vec::new());
            }
            // dy_k = [h_{k,0} .. h_{k,n_blocks-1}] [du_0; ..; du_{n_blocks-1}]
            let regressor = DMatrix::from_fn(n_blocks * n_u, m, |r, e| {
                archive.experiments[e].inputs[r / n_u][r % n_u]
            });
            let response = DMatrix::from_fn(n_y, m, |r, e| archive.experiments[e].outputs[k][r]);
            let unidentifiable = null_space_blocks(&regressor, n_u);
            if !unidentifiable.is_empty() {
                return Err(unidentifiable.into_iter().map(|j| (k, j)).collect());
            }
            let h = response * pinv(&regressor, PINV_TOL);
            Ok((0..n_blocks).map(|j| h.columns(j * n_u, n_u).into_owned()).collect())
        })
        .collect();

    let mut blocks = Vec::with_capacity(rows.len());
    let mut missing = Vec::new();
    for row in rows {
        match row {
            Ok(r) => blocks.push(r),
            Err(mut bad) => {
                missing.append(&mut bad);
                blocks.push(Vec::new());
            }
        }
    }
    if !missing.is_empty() {
        return Err(TveraError::UnderDetermined { blocks: missing });
    }
    Ok(MarkovParameterSet {
        n_u,
        n_y,
        horizon: n,
        n_out: archive.n_out,
        blocks,
    })
}

fn estimate_from_impulses(archive: &ExperimentArchive) -> Option<MarkovParameterSet> {
    let (n_u, n) = (archive.n_u, archive.horizon);
    let mut slot: Vec<Option<(usize, f64)>> = vec![None; n * n_u];
    for (e, exp) in archive.experiments.iter().enumerate() {
        let (i, c, mag) = ExperimentArchive::impulse_of(exp)?;
        let cell = &mut slot[i * n_u + c];
        if cell.is_some() {
            return None;
        }
        *cell = Some((e, mag));
    }
    if slot.iter().any(Option::is_none) {
        return None;
    }
    let mut set = MarkovParameterSet::zeros(n_u, archive.n_y, n, archive.n_out);
    for (index, cell) in slot.iter().enumerate() {
        let (e, mag) = cell.expect("checked above");
        let (i, c) = (index / n_u, index % n_u);
        let exp = &archive.experiments[e];
        for k in (i + 1)..=archive.n_out {
            let column = &exp.outputs[k] / mag;
            set.blocks[k][i].set_column(c, &column);
        }
    }
    Some(set)
}

/// Input blocks (indices of `n_u`-row groups) touched by the left null space
/// of the regressor, using the same relative cutoff as the pseudo-inverse.
fn null_space_blocks(regressor: &DMatrix<f64>, n_u: usize) -> Vec<usize> {
    let rows = regressor.nrows();
    // pad to at least square so the thin SVD returns a full left basis
    let cols = regressor.ncols().max(rows);
    let mut padded = DMatrix::zeros(rows, cols);
    padded.columns_mut(0, regressor.ncols()).copy_from(regressor);
    let svd = SortedSvd::new(&padded);
    let rank = svd.rank(PINV_TOL);
    let mut weight = vec![0.0; rows];
    for i in rank..rows {
        for (r, w) in weight.iter_mut().enumerate() {
            *w += svd.u[(r, i)].powi(2);
        }
    }
    (0..rows / n_u)
        .filter(|j| weight[j * n_u..(j + 1) * n_u].iter().sum::<f64>() > 1e-8)
        .collect()
}

/// Generalized Hankel matrix at step `k`: block `(r, c)` is `h_{k+r, k-1-c}`.
pub fn build_hankel(markov: &MarkovParameterSet, k: usize, p: usize, q: usize) -> Result<DMatrix<f64>, TveraError> {
    let (lo, hi) = hankel_window(markov, p, q);
    if k < lo || k > hi || p == 0 || q == 0 {
        return Err(TveraError::Boundary { k, lo, hi });
    }
    let (n_y, n_u) = (markov.n_y, markov.n_u);
    let mut h = DMatrix::zeros(p * n_y, q * n_u);
    for r in 0..p {
        for c in 0..q {
            let block = markov.get(k + r, k - 1 - c).expect("inside the window");
            h.view_mut((r * n_y, c * n_u), (n_y, n_u)).copy_from(block);
        }
    }
    Ok(h)
}

/// Steps `k` for which `H_k^{(p,q)}` is fully populated: `q <= k`,
/// `k + p - 1 <= n_out` and `k <= N`.
pub fn hankel_window(markov: &MarkovParameterSet, p: usize, q: usize) -> (usize, usize) {
    let lo = q.max(1);
    let hi = (markov.n_out + 1).saturating_sub(p).min(markov.horizon);
    (lo, hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HankelConfig {
    pub p: usize,
    pub q: usize,
    pub rank_tol: f64,
    pub n_r_fixed: Option<usize>,
}

impl Default for HankelConfig {
    fn default() -> Self {
        Self {
            p: 15,
            q: 15,
            rank_tol: 1e-6,
            n_r_fixed: None,
        }
    }
}

impl HankelConfig {
    /// Checks that do not need the data. `p >= 2` is required because the
    /// state matrix comes from the shift between consecutive block rows.
    pub fn validate(&self, n_u: usize, n_y: usize) -> Result<(), TveraError> {
        if self.p < 2 || self.q < 1 {
            return Err(TveraError::Config(format!(
                "need p >= 2 and q >= 1, got p = {}, q = {}",
                self.p, self.q
            )));
        }
        if !(self.rank_tol > 0.0 && self.rank_tol < 1.0) {
            return Err(TveraError::Config(format!("rank_tol must be in (0, 1), got {}", self.rank_tol)));
        }
        if let Some(n_r) = self.n_r_fixed {
            self.check_order(n_r, n_u, n_y)?;
        }
        Ok(())
    }

    pub fn check_order(&self, n_r: usize, n_u: usize, n_y: usize) -> Result<(), TveraError> {
        let cap = (self.p * n_y).min(self.q * n_u);
        if n_r == 0 || n_r > cap {
            return Err(TveraError::Config(format!(
                "ROM order {n_r} must be in [1, min(p*n_y, q*n_u)] = [1, {cap}] (p*n_y = {}, q*n_u = {})",
                self.p * n_y,
                self.q * n_u
            )));
        }
        Ok(())
    }
}

/// Identified reduced-order LTV model
/// `da_{k+1} = A_k da_k + B_k du_k`, `dy_k = C_k da_k`.
///
/// Realized on the window `[k_lo, k_hi]`: `C_k` for `k_lo <= k <= k_hi`,
/// `A_k` for `k_lo <= k < k_hi`, `B_j` for `k_lo - 1 <= j < k_hi`. The
/// `*_at` accessors clamp to the nearest realized index outside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LtvModel {
    pub n_r: usize,
    pub n_u: usize,
    pub n_y: usize,
    pub k_lo: usize,
    pub k_hi: usize,
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
    pub c: Vec<DMatrix<f64>>,
    /// Leading singular values of `H_k` for each realized `k`.
    pub singular_values: Vec<DVector<f64>>,
}

impl LtvModel {
    /// Assemble a model from explicit sequences on `[k_lo, k_hi]`.
    pub fn from_sequences(
        k_lo: usize,
        a: Vec<DMatrix<f64>>,
        b: Vec<DMatrix<f64>>,
        c: Vec<DMatrix<f64>>,
    ) -> Result<Self, TveraError> {
        if k_lo == 0 || c.len() < 2 {
            return Err(TveraError::Config("need k_lo >= 1 and at least two realized steps".into()));
        }
        let k_hi = k_lo + c.len() - 1;
        if a.len() != c.len() - 1 || b.len() != c.len() {
            return Err(TveraError::Config(format!(
                "expected {} A, {} B and {} C matrices, got {}, {}, {}",
                c.len() - 1,
                c.len(),
                c.len(),
                a.len(),
                b.len(),
                c.len()
            )));
        }
        let n_r = b[0].nrows();
        let n_u = b[0].ncols();
        let n_y = c[0].nrows();
        let consistent = a.iter().all(|m| m.shape() == (n_r, n_r))
            && b.iter().all(|m| m.shape() == (n_r, n_u))
            && c.iter().all(|m| m.shape() == (n_y, n_r));
        if !consistent {
            return Err(TveraError::Config("inconsistent matrix shapes".into()));
        }
        Ok(Self {
            n_r,
            n_u,
            n_y,
            k_lo,
            k_hi,
            a,
            b,
            c,
            singular_values: Vec::new(),
        })
    }

    pub fn valid_range(&self) -> (usize, usize) {
        (self.k_lo, self.k_hi)
    }

    pub fn a_at(&self, k: usize) -> &DMatrix<f64> {
        &self.a[k.clamp(self.k_lo, self.k_hi - 1) - self.k_lo]
    }

    pub fn b_at(&self, j: usize) -> &DMatrix<f64> {
        &self.b[j.clamp(self.k_lo - 1, self.k_hi - 1) + 1 - self.k_lo]
    }

    pub fn c_at(&self, k: usize) -> &DMatrix<f64> {
        &self.c[k.clamp(self.k_lo, self.k_hi) - self.k_lo]
    }

    /// `C_k A_{k-1} ... A_{j+1} B_j` for `k_lo - 1 <= j < k <= k_hi`.
    pub fn reconstruct_markov(&self, k: usize, j: usize) -> Result<DMatrix<f64>, TveraError> {
        if !(j + 1 >= self.k_lo && j < k && k <= self.k_hi) {
            return Err(TveraError::OutOfRange {
                k,
                j,
                lo: self.k_lo,
                hi: self.k_hi,
            });
        }
        let mut acc = self.b_at(j).clone();
        for i in (j + 1)..k {
            acc = self.a_at(i) * acc;
        }
        Ok(self.c_at(k) * acc)
    }
}

/// Realize an LTV model from Markov parameters.
///
/// The order is chosen once, at the reference step `k = q`, and held over
/// the window.
pub fn era_realize(markov: &MarkovParameterSet, cfg: &HankelConfig) -> Result<LtvModel, TveraError> {
    let (n_u, n_y) = (markov.n_u, markov.n_y);
    cfg.validate(n_u, n_y)?;
    let (p, q) = (cfg.p, cfg.q);
    let (k_lo, k_hi) = hankel_window(markov, p, q);
    if k_hi < k_lo + 1 {
        return Err(TveraError::Config(format!(
            "Hankel window [{k_lo}, {k_hi}] is too short for p = {p}, q = {q} with {} input steps and outputs to step {}",
            markov.horizon, markov.n_out
        )));
    }

    let svds = (k_lo..=k_hi)
        .into_par_iter()
        .map(|k| build_hankel(markov, k, p, q).map(|h| SortedSvd::new(&h)))
        .collect::<Result<Vec<_>, _>>()?;

    let reference = &svds[0];
    let n_r = match cfg.n_r_fixed {
        Some(n) => n,
        None => reference.rank(cfg.rank_tol),
    };
    if n_r == 0 {
        return Err(TveraError::ZeroRank { k: k_lo });
    }
    cfg.check_order(n_r, n_u, n_y)?;
    if let Some(offset) = svds.iter().position(|s| s.singular_values.get(0).is_none_or(|v| !(*v > 0.0))) {
        return Err(TveraError::ZeroRank { k: k_lo + offset });
    }

    // O_k = U Sigma^1/2 and R_{k-1} = Sigma^1/2 V' from the same SVD of H_k
    let factors: Vec<(DMatrix<f64>, DMatrix<f64>)> = svds
        .iter()
        .map(|svd| {
            let root = DVector::from_iterator(n_r, svd.singular_values.iter().take(n_r).map(|s| s.sqrt()));
            let mut o = svd.u.columns(0, n_r).into_owned();
            let mut r = svd.v_t.rows(0, n_r).into_owned();
            for i in 0..n_r {
                o.column_mut(i).scale_mut(root[i]);
                r.row_mut(i).scale_mut(root[i]);
            }
            (o, r)
        })
        .collect();

    // A_k = O_{k+1}^+ H_k^(1) R_{k-1}^+, with H_k^(1) the Hankel whose block
    // rows start at k + 1 and block columns at k - 1.
    let a = (0..factors.len() - 1)
        .into_par_iter()
        .map(|i| {
            let k = k_lo + i;
            let mut shifted = DMatrix::zeros(p * n_y, q * n_u);
            for r in 0..p {
                for c in 0..q {
                    let block = markov.get(k + 1 + r, k - 1 - c).expect("inside the window");
                    shifted.view_mut((r * n_y, c * n_u), (n_y, n_u)).copy_from(block);
                }
            }
            let inv_root = |svd: &SortedSvd| {
                DVector::from_iterator(n_r, svd.singular_values.iter().take(n_r).map(|s| 1.0 / s.sqrt()))
            };
            let mut o_pinv = svds[i + 1].u.columns(0, n_r).transpose();
            for (mut row, w) in o_pinv.row_iter_mut().zip(inv_root(&svds[i + 1]).iter()) {
                row *= *w;
            }
            let mut r_pinv = svds[i].v_t.rows(0, n_r).transpose();
            for (mut col, w) in r_pinv.column_iter_mut().zip(inv_root(&svds[i]).iter()) {
                col *= *w;
            }
            o_pinv * shifted * r_pinv
        })
        .collect();
    let b = factors.iter().map(|(_, r)| r.columns(0, n_u).into_owned()).collect();
    let c = factors.iter().map(|(o, _)| o.rows(0, n_y).into_owned()).collect();
    let singular_values = svds
        .iter()
        .map(|s| s.singular_values.rows(0, n_r.min(s.singular_values.len())).into_owned())
        .collect();

    Ok(LtvModel {
        n_r,
        n_u,
        n_y,
        k_lo,
        k_hi,
        a,
        b,
        c,
        singular_values,
    })
}

/// Worst relative Frobenius error of the reconstructed blocks `h_{k,j}`
/// over `k_lo - 1 <= j < k`, for a given output step `k`.
pub fn reconstruction_error_at(model: &LtvModel, markov: &MarkovParameterSet, k: usize) -> Result<f64, TveraError> {
    let mut worst = 0.0_f64;
    for j in (model.k_lo - 1)..k {
        let exact = markov.get(k, j).ok_or(TveraError::OutOfRange {
            k,
            j,
            lo: model.k_lo,
            hi: model.k_hi,
        })?;
        let approx = model.reconstruct_markov(k, j)?;
        worst = worst.max(crate::linalg::rel_frobenius(&approx, exact));
    }
    Ok(worst)
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use crate::plant::PlantSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// A random LTV system `x_{k+1} = A_k x_k + B_k u_k`, `y_k = C_k x_k`.
    pub struct LtvSystem {
        pub a: Vec<DMatrix<f64>>,
        pub b: Vec<DMatrix<f64>>,
        pub c: Vec<DMatrix<f64>>,
    }

    impl LtvSystem {
        pub fn random(n_x: usize, n_u: usize, n_y: usize, steps: usize, seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut mat = |r: usize, c: usize, s: f64| DMatrix::from_fn(r, c, |_, _| s * rng.gen_range(-1.0..1.0));
            let a = (0..steps)
                .map(|_| {
                    let m = mat(n_x, n_x, 1.0);
                    // keep the spectral radius modest so products stay O(1)
                    let norm = m.clone().svd(false, false).singular_values.max();
                    m * (0.95 / norm)
                })
                .collect();
            let b = (0..steps).map(|_| mat(n_x, n_u, 1.0)).collect();
            let c = (0..=steps).map(|_| mat(n_y, n_x, 1.0)).collect();
            Self { a, b, c }
        }

        /// `C_k A_{k-1} ... A_{j+1} B_j`.
        pub fn markov(&self, k: usize, j: usize) -> DMatrix<f64> {
            let mut acc = self.b[j].clone();
            for i in (j + 1)..k {
                acc = &self.a[i] * acc;
            }
            &self.c[k] * acc
        }

        pub fn markov_set(&self, horizon: usize, n_out: usize) -> MarkovParameterSet {
            let (n_y, n_u) = (self.c[0].nrows(), self.b[0].ncols());
            MarkovParameterSet::from_fn(n_u, n_y, horizon, n_out, |k, j| self.markov(k, j))
        }
    }

    /// The LTV system as a plant. The last state component counts steps so
    /// the otherwise time-invariant `Plant` interface can select `A_k`.
    pub struct LtvPlant {
        pub sys: LtvSystem,
        spec: PlantSpec,
    }

    impl LtvPlant {
        pub fn new(sys: LtvSystem, horizon: usize) -> Self {
            let n_x = sys.a[0].nrows() + 1;
            let spec = PlantSpec {
                n_x,
                n_u: sys.b[0].ncols(),
                n_y: sys.c[0].nrows(),
                process_noise: DMatrix::zeros(sys.b[0].ncols(), sys.b[0].ncols()),
                measurement_noise: DMatrix::zeros(sys.c[0].nrows(), sys.c[0].nrows()),
                dt: 1.0,
                horizon,
            };
            Self { sys, spec }
        }
    }

    impl Plant for LtvPlant {
        fn spec(&self) -> &PlantSpec {
            &self.spec
        }

        fn step_into(&self, state: &[f64], control: &[f64], w: &[f64], next: &mut [f64]) -> Result<(), PlantError> {
            let n = self.spec.n_x - 1;
            let k = state[n].round() as usize;
            let x = DVector::from_column_slice(&state[..n]);
            let u = DVector::from_iterator(control.len(), control.iter().zip(w).map(|(a, b)| a + b));
            let x1 = &self.sys.a[k] * x + &self.sys.b[k] * u;
            next[..n].copy_from_slice(x1.as_slice());
            next[n] = state[n] + 1.0;
            Ok(())
        }

        fn observe_into(&self, state: &[f64], v: &[f64], out: &mut [f64]) -> Result<(), PlantError> {
            let n = self.spec.n_x - 1;
            let k = state[n].round() as usize;
            let y = &self.sys.c[k] * DVector::from_column_slice(&state[..n]);
            for (i, o) in out.iter_mut().enumerate() {
                *o = y[i] + v[i];
            }
            Ok(())
        }
    }
}
