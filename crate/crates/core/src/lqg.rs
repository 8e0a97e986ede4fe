//! Time-varying LQG design on the identified reduced-order model: a backward
//! Riccati recursion for the feedback gains and a forward Kalman filter for
//! the reduced state estimate.
//!
//! The ROM is `da_{k+1} = A_k da_k + B_k (du_k + w_k)`, `dy_k = C_k da_k + v_k`,
//! with process noise entering through the input channel like in the plant.
//! The filter is predict-then-correct; gains and covariances do not depend on
//! data and are computed once at synthesis time.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{min_eigenvalue, symmetrize};
use crate::tvera::LtvModel;

/// Added to `C' Q_y C` so the state weight is positive definite.
pub const STATE_WEIGHT_EPS: f64 = 1e-8;
/// Regularization for a singular innovation covariance.
pub const INNOVATION_REG: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LqgError {
    #[error("B'SB + R is singular at step {k}")]
    SingularGain { k: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid weights: {0}")]
    Weights(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqrWeights {
    /// `Q_k` for `k = 0 .. N-1`.
    pub q: Vec<DMatrix<f64>>,
    /// `R_k` for `k = 0 .. N-1`.
    pub r: Vec<DMatrix<f64>>,
    pub q_final: DMatrix<f64>,
}

impl LqrWeights {
    /// Constant weights over `horizon` steps.
    pub fn constant(q: DMatrix<f64>, r: DMatrix<f64>, q_final: DMatrix<f64>, horizon: usize) -> Self {
        Self {
            q: vec![q; horizon],
            r: vec![r; horizon],
            q_final,
        }
    }

    /// Output-tracking weights expressed in ROM coordinates:
    /// `Q_k = C_k' Q_y C_k + eps I`, same for the terminal weight.
    pub fn from_output_weights(
        model: &LtvModel,
        q_y: &DMatrix<f64>,
        r: &DMatrix<f64>,
        q_y_final: &DMatrix<f64>,
        horizon: usize,
    ) -> Self {
        let eye = DMatrix::<f64>::identity(model.n_r, model.n_r) * STATE_WEIGHT_EPS;
        let lift = |c: &DMatrix<f64>, w: &DMatrix<f64>| {
            let mut q = c.transpose() * w * c + &eye;
            symmetrize(&mut q);
            q
        };
        Self {
            q: (0..horizon).map(|k| lift(model.c_at(k), q_y)).collect(),
            r: vec![r.clone(); horizon],
            q_final: lift(model.c_at(horizon), q_y_final),
        }
    }

    pub fn horizon(&self) -> usize {
        self.q.len()
    }

    pub fn validate(&self, n_r: usize, n_u: usize) -> Result<(), LqgError> {
        if self.r.len() != self.q.len() {
            return Err(LqgError::Weights(format!("{} state weights but {} control weights", self.q.len(), self.r.len())));
        }
        let shapes_ok = self.q.iter().all(|q| q.shape() == (n_r, n_r))
            && self.r.iter().all(|r| r.shape() == (n_u, n_u))
            && self.q_final.shape() == (n_r, n_r);
        if !shapes_ok {
            return Err(LqgError::Dimension(format!("weights must be {n_r}x{n_r} (state) and {n_u}x{n_u} (control)")));
        }
        let psd = |m: &DMatrix<f64>| min_eigenvalue(m) >= -1e-12 * (1.0 + m.amax());
        if !(self.q.iter().all(psd) && psd(&self.q_final) && self.r.iter().all(psd)) {
            return Err(LqgError::Weights("weights must be positive semi-definite".into()));
        }
        Ok(())
    }
}

/// Backward Riccati recursion. Returns `L_0..L_{N-1}` and `S_0..S_N`.
pub fn riccati_gains(model: &LtvModel, weights: &LqrWeights) -> Result<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>), LqgError> {
    weights.validate(model.n_r, model.n_u)?;
    let n = weights.horizon();
    let mut s = vec![DMatrix::zeros(0, 0); n + 1];
    let mut l = vec![DMatrix::zeros(0, 0); n];
    s[n] = weights.q_final.clone();
    for k in (0..n).rev() {
        let a = model.a_at(k);
        let b = model.b_at(k);
        let sb = &s[k + 1] * b;
        let g = b.transpose() * &sb + &weights.r[k];
        // L = (B'SB + R)^-1 B'SA
        let bsa = sb.transpose() * a;
        let gain = match g.clone().cholesky() {
            Some(chol) => chol.solve(&bsa),
            None => g.lu().solve(&bsa).ok_or(LqgError::SingularGain { k })?,
        };
        if gain.iter().any(|v| !v.is_finite()) {
            return Err(LqgError::SingularGain { k });
        }
        // S = A'SA + Q - A'SB L
        let mut next = a.transpose() * &s[k + 1] * a + &weights.q[k] - bsa.transpose() * &gain;
        symmetrize(&mut next);
        s[k] = next;
        l[k] = gain;
    }
    Ok((l, s))
}

/// One observer cycle from step `k` to `k + 1`.
#[derive(Debug, Clone)]
pub struct KalmanStep {
    pub a_hat: DVector<f64>,
    /// Posterior covariance at `k + 1`.
    pub p_post: DMatrix<f64>,
    /// Predicted covariance at `k + 1`.
    pub p_prior: DMatrix<f64>,
    pub gain: DMatrix<f64>,
    pub regularized: bool,
}

/// Covariance part of a predict/correct cycle: prior `A P A' + B W B'`,
/// gain `P- C' (C P- C' + V)^-1`, posterior `P- - K (C P- C' + V) K'`.
fn covariance_cycle(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    p_post: &DMatrix<f64>,
    w: &DMatrix<f64>,
    v: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, bool) {
    let mut prior = a * p_post * a.transpose() + b * w * b.transpose();
    symmetrize(&mut prior);
    let pc = &prior * c.transpose();
    let mut innov = c * &pc + v;
    symmetrize(&mut innov);
    let mut regularized = false;
    if innov.nrows() > 0 && min_eigenvalue(&innov) <= INNOVATION_REG {
        for i in 0..innov.nrows() {
            innov[(i, i)] += INNOVATION_REG;
        }
        regularized = true;
    }
    let gain = crate::linalg::right_solve_spd(&pc, &innov)
        .unwrap_or_else(|| &pc * crate::linalg::pinv(&innov, 1e-12));
    let mut post = &prior - &gain * &innov * gain.transpose();
    symmetrize(&mut post);
    (prior, gain, post, regularized)
}

/// Predict with `(A_k, B_k)` and correct with `dy_{k+1}` through `C_{k+1}`.
/// `p` is the posterior covariance at step `k`.
#[allow(clippy::too_many_arguments)]
pub fn kalman_predict_update(
    model: &LtvModel,
    k: usize,
    a_hat: &DVector<f64>,
    p: &DMatrix<f64>,
    du: &DVector<f64>,
    dy: &DVector<f64>,
    w: &DMatrix<f64>,
    v: &DMatrix<f64>,
) -> Result<KalmanStep, LqgError> {
    let (a, b, c) = (model.a_at(k), model.b_at(k), model.c_at(k + 1));
    if a_hat.len() != model.n_r || du.len() != model.n_u || dy.len() != model.n_y {
        return Err(LqgError::Dimension("estimate, input or output deviation".into()));
    }
    let (p_prior, gain, p_post, regularized) = covariance_cycle(a, b, c, p, w, v);
    let predicted = a * a_hat + b * du;
    let a_hat = &predicted + &gain * (dy - c * &predicted);
    Ok(KalmanStep {
        a_hat,
        p_post,
        p_prior,
        gain,
        regularized,
    })
}

/// Synthesized time-varying LQG controller.
///
/// `l[k]` and `s[k]` for `k = 0..N` (`l` has `N` entries, `s` has `N + 1`);
/// `kalman_gain[k]`, `p_prior[k]` are used for the correction at step `k`
/// (`k = 1..N`, index 0 unused and zero); `p_post[k]` for `k = 0..N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqgController {
    pub l: Vec<DMatrix<f64>>,
    pub s: Vec<DMatrix<f64>>,
    pub kalman_gain: Vec<DMatrix<f64>>,
    pub p_prior: Vec<DMatrix<f64>>,
    pub p_post: Vec<DMatrix<f64>>,
    pub p0: DMatrix<f64>,
    pub a_hat0: DVector<f64>,
    /// Steps at which the innovation covariance was regularized.
    pub regularized_steps: Vec<usize>,
    /// Model matrices the observer runs on: `A_k`, `B_k` for `k = 0..N-1`
    /// and `C_k` for `k = 0..N`, with the ERA window already clamped.
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
    pub c: Vec<DMatrix<f64>>,
}

impl LqgController {
    /// Design gains and observer over `weights.horizon()` steps.
    /// `w` and `v` are the plant noise covariances (input and output channel).
    pub fn synthesize(
        model: &LtvModel,
        weights: &LqrWeights,
        w: &DMatrix<f64>,
        v: &DMatrix<f64>,
        p0: DMatrix<f64>,
    ) -> Result<Self, LqgError> {
        let n = weights.horizon();
        let (n_r, n_u, n_y) = (model.n_r, model.n_u, model.n_y);
        if w.shape() != (n_u, n_u) || v.shape() != (n_y, n_y) || p0.shape() != (n_r, n_r) {
            return Err(LqgError::Dimension(format!(
                "W must be {n_u}x{n_u}, V {n_y}x{n_y}, P0 {n_r}x{n_r}"
            )));
        }
        let (l, s) = riccati_gains(model, weights)?;
        let mut kalman_gain = vec![DMatrix::zeros(n_r, n_y)];
        let mut p_prior = vec![p0.clone()];
        let mut p_post = vec![p0.clone()];
        let mut regularized_steps = Vec::new();
        for k in 0..n {
            let (prior, gain, post, reg) =
                covariance_cycle(model.a_at(k), model.b_at(k), model.c_at(k + 1), &p_post[k], w, v);
            if reg {
                regularized_steps.push(k + 1);
            }
            p_prior.push(prior);
            kalman_gain.push(gain);
            p_post.push(post);
        }
        Ok(Self {
            l,
            s,
            kalman_gain,
            p_prior,
            p_post,
            p0,
            a_hat0: DVector::zeros(n_r),
            regularized_steps,
            a: (0..n).map(|k| model.a_at(k).clone()).collect(),
            b: (0..n).map(|k| model.b_at(k).clone()).collect(),
            c: (0..=n).map(|k| model.c_at(k).clone()).collect(),
        })
    }

    pub fn horizon(&self) -> usize {
        self.l.len()
    }

    pub fn n_r(&self) -> usize {
        self.p0.nrows()
    }

    /// `du_k = -L_k da_hat_k`.
    pub fn feedback(&self, k: usize, a_hat: &DVector<f64>) -> DVector<f64> {
        -(&self.l[k] * a_hat)
    }

    /// Observer update from `k` to `k + 1` using the precomputed gain.
    pub fn estimate(&self, k: usize, a_hat: &DVector<f64>, du: &DVector<f64>, dy_next: &DVector<f64>) -> DVector<f64> {
        let predicted = &self.a[k] * a_hat + &self.b[k] * du;
        let innovation = dy_next - &self.c[k + 1] * &predicted;
        predicted + &self.kalman_gain[k + 1] * innovation
    }

    /// Worst asymmetry and most negative eigenvalue over every `S_k` and
    /// `P_k`; useful as a health check after synthesis.
    pub fn health(&self) -> (f64, f64) {
        let mut asym = 0.0_f64;
        let mut min_eig = f64::INFINITY;
        for m in self.s.iter().chain(&self.p_prior).chain(&self.p_post) {
            asym = asym.max(crate::linalg::asymmetry(m));
            min_eig = min_eig.min(min_eigenvalue(m));
        }
        (asym, min_eig)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{GaussianSampler, Stream};

    fn m1(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    /// Time-invariant model on steps `[1, n + 1]`, so clamping covers `0..=n+1`.
    fn lti(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, n: usize) -> LtvModel {
        LtvModel::from_sequences(1, vec![a; n], vec![b; n + 1], vec![c; n + 1]).unwrap()
    }

    #[test]
    fn scalar_hand_recursion() {
        let model = lti(m1(1.0), m1(1.0), m1(1.0), 2);
        let w = LqrWeights::constant(m1(1.0), m1(1.0), m1(1.0), 1);
        let (l, s) = riccati_gains(&model, &w).unwrap();
        assert!((l[0][(0, 0)] - 0.5).abs() < 1e-12);
        assert!((s[0][(0, 0)] - 1.5).abs() < 1e-12);
        assert_eq!(s[1], m1(1.0));
    }

    #[test]
    fn no_actuation_is_pure_lyapunov() {
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.8]);
        let model = lti(a.clone(), DMatrix::zeros(2, 1), DMatrix::identity(1, 2), 5);
        let q = DMatrix::identity(2, 2);
        let w = LqrWeights::constant(q.clone(), m1(1.0), q.clone() * 2.0, 5);
        let (l, s) = riccati_gains(&model, &w).unwrap();
        assert!(l.iter().all(|g| g.amax() == 0.0));
        let mut expect = q.clone() * 2.0;
        for k in (0..5).rev() {
            expect = a.transpose() * &expect * &a + &q;
            assert!((&s[k] - &expect).amax() < 1e-12);
        }
    }

    #[test]
    fn singular_gain_is_reported() {
        let model = lti(m1(1.0), m1(0.0), m1(1.0), 3);
        let w = LqrWeights::constant(m1(1.0), m1(0.0), m1(1.0), 3);
        assert_eq!(riccati_gains(&model, &w).unwrap_err(), LqgError::SingularGain { k: 2 });
    }

    #[test]
    fn lqr_cost_equals_value_function() {
        let (a, b) = (1.1, 0.5);
        let n = 20;
        let model = lti(m1(a), m1(b), m1(1.0), n);
        let (q, r, qn) = (2.0, 0.3, 5.0);
        let w = LqrWeights::constant(m1(q), m1(r), m1(qn), n);
        let (l, s) = riccati_gains(&model, &w).unwrap();
        let mut x = 1.7;
        let mut cost = 0.0;
        for gain in l.iter() {
            let u = -gain[(0, 0)] * x;
            cost += q * x * x + r * u * u;
            x = a * x + b * u;
        }
        cost += qn * x * x;
        let value = 1.7 * s[0][(0, 0)] * 1.7;
        assert!((cost - value).abs() < 1e-8 * value);
    }

    #[test]
    fn unobservable_step_is_pure_prediction() {
        let model = lti(m1(0.9), m1(2.0), m1(0.0), 3);
        let step = kalman_predict_update(
            &model,
            0,
            &DVector::from_element(1, 1.0),
            &m1(1.0),
            &DVector::from_element(1, 0.5),
            &DVector::from_element(1, 100.0),
            &m1(0.1),
            &m1(0.2),
        )
        .unwrap();
        assert_eq!(step.gain, m1(0.0));
        assert!((step.a_hat[0] - (0.9 + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn scalar_filter_reaches_riccati_root() {
        let n = 200;
        let model = lti(m1(1.0), m1(1.0), m1(1.0), n);
        let weights = LqrWeights::constant(m1(1.0), m1(1.0), m1(1.0), n);
        let ctrl = LqgController::synthesize(&model, &weights, &m1(0.1), &m1(0.2), m1(1.0)).unwrap();
        // P = P r / (P + r) + q  =>  P^2 - q P - q r = 0
        let (q, r) = (0.1f64, 0.2f64);
        let root = (q + (q * q + 4.0 * q * r).sqrt()) / 2.0;
        assert!((ctrl.p_prior[n][(0, 0)] - root).abs() < 1e-8);
        assert!((root - 0.2).abs() < 1e-15);
    }

    #[test]
    fn filter_recursion_is_dual_to_control_recursion() {
        let (a, c, q, r) = (0.8, 1.5, 0.3, 0.7);
        let n = 12;
        let x = 2.0;
        // Riccati on (A', C') with Q -> B W B', R -> V, terminal X
        let dual = lti(m1(a), m1(c), m1(1.0), n);
        let (_, s) = riccati_gains(&dual, &LqrWeights::constant(m1(q), m1(r), m1(x), n)).unwrap();
        // filter whose first prior equals the control recursion's S_{N-1}
        let p0 = x - x * x * c * c / (c * c * x + r);
        let model = lti(m1(a), m1(1.0), m1(c), n);
        let ctrl = LqgController::synthesize(&model, &LqrWeights::constant(m1(1.0), m1(1.0), m1(1.0), n), &m1(q), &m1(r), m1(p0)).unwrap();
        for k in 1..=n {
            assert!((ctrl.p_prior[k][(0, 0)] - s[n - k][(0, 0)]).abs() < 1e-12, "step {k}");
        }
    }

    #[test]
    fn precomputed_gains_match_stepwise_update() {
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 0.95]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.5]);
        let model = lti(a, b, c, 10);
        let weights = LqrWeights::from_output_weights(&model, &m1(1.0), &m1(0.1), &m1(2.0), 10);
        let ctrl = LqgController::synthesize(&model, &weights, &m1(0.05), &m1(0.1), DMatrix::identity(2, 2)).unwrap();
        let mut a_hat = DVector::zeros(2);
        let mut p = ctrl.p0.clone();
        for k in 0..10 {
            let du = DVector::from_element(1, 0.1 * k as f64);
            let dy = DVector::from_element(1, (k as f64).sin());
            let step = kalman_predict_update(&model, k, &a_hat, &p, &du, &dy, &m1(0.05), &m1(0.1)).unwrap();
            let fast = ctrl.estimate(k, &a_hat, &du, &dy);
            assert!((&fast - &step.a_hat).amax() < 1e-12);
            assert!((&step.p_post - &ctrl.p_post[k + 1]).amax() < 1e-12);
            a_hat = step.a_hat;
            p = step.p_post;
        }
        let (asym, min_eig) = ctrl.health();
        assert!(asym <= 1e-10 && min_eig >= -1e-9);
    }

    #[test]
    fn empirical_error_matches_filter_covariance() {
        let a = DMatrix::from_row_slice(2, 2, &[0.95, 0.1, -0.1, 0.9]);
        let b = DMatrix::from_row_slice(2, 1, &[0.5, 1.0]);
        let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let n = 30;
        let model = lti(a.clone(), b.clone(), c.clone(), n);
        let (w, v) = (m1(0.2), m1(0.1));
        let p0 = DMatrix::identity(2, 2);
        let weights = LqrWeights::constant(DMatrix::identity(2, 2), m1(1.0), DMatrix::identity(2, 2), n);
        let ctrl = LqgController::synthesize(&model, &weights, &w, &v, p0.clone()).unwrap();
        let runs = 1000;
        let init = GaussianSampler::new(&p0);
        let wn = GaussianSampler::new(&w);
        let vn = GaussianSampler::new(&v);
        let mut sq = vec![0.0; n + 1];
        for run in 0..runs {
            let mut x = DVector::from_vec(init.sample(42, Stream::RolloutInit, 0, run));
            let mut est = DVector::zeros(2);
            for k in 0..n {
                let du = ctrl.feedback(k, &est);
                x = &a * &x + &b * (&du + DVector::from_vec(wn.sample(42, Stream::RolloutProcess, k, run)));
                let dy = &c * &x + DVector::from_vec(vn.sample(42, Stream::RolloutMeasurement, k + 1, run));
                est = ctrl.estimate(k, &est, &du, &dy);
                sq[k + 1] += (&x - &est).norm_squared();
            }
        }
        for k in [5, 15, 30] {
            let mse = sq[k] / runs as f64;
            let tr = ctrl.p_post[k].trace();
            assert!((mse / tr - 1.0).abs() < 0.1, "step {k}: mse {mse} vs trace {tr}");
        }
    }
}
