//! Posterior sampling for the circuit-flow HMM.
//!
//! One iteration sweeps the time steps in order. At each step `i` the latent
//! vector `z_i` gets a MALA update on the log scale, the direction flag
//! `q_i` is drawn exactly from its three-point conditional, and
//! `(rho_i, nu_i, delta_i)` get an adaptive random-walk Metropolis update on
//! the log scale. After the sweep `alpha` gets a log-scale random-walk
//! update unless it is fixed.
//!
//! All adaptation (MALA step sizes and diagonal preconditioners, the
//! transition-parameter proposal covariance and the `alpha` step) runs only
//! during burn-in and is frozen afterwards.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, Ordering};

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::hmm::{gamma_logpdf, obs_loglik, row_vec, trans_logpdf, ModelParams, ObservationSet};
use crate::transition::{propagate, Direction, FlowKernel, TransitionParams};

// ---------------------------------------------------------------------------
// Priors and configuration
// ---------------------------------------------------------------------------

/// How the fixed initial state `z_0` is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum Z0Policy {
    /// `z_0 = 1`.
    Ones,
    /// Explicit per-node values.
    Values { values: Vec<f64> },
    /// `(sum of the first `weeks` counts + c) / (sum of their efforts + c_prime)`.
    Empirical { weeks: usize, c: f64, c_prime: f64 },
}

impl Default for Z0Policy {
    fn default() -> Self {
        Z0Policy::Empirical {
            weeks: 4,
            c: 0.5,
            c_prime: 1.0,
        }
    }
}

impl Z0Policy {
    pub fn resolve(&self, obs: &ObservationSet) -> Result<DVector<f64>> {
        let n = obs.n_node();
        let z0 = match self {
            Z0Policy::Ones => DVector::from_element(n, 1.0),
            Z0Policy::Values { values } => {
                if values.len() != n {
                    return Err(Error::ShapeMismatch(format!("z0 has {} values for {n} nodes", values.len())));
                }
                DVector::from_column_slice(values)
            }
            Z0Policy::Empirical { weeks, c, c_prime } => {
                if !(*c > 0.0) || !(*c_prime > 0.0) {
                    return Err(Error::InvalidConfig("empirical z0 shrinkage must be positive".into()));
                }
                let w = (*weeks).min(obs.n_time()).max(1).min(obs.n_time());
                DVector::from_fn(n, |j, _| {
                    let y: f64 = (0..w).map(|i| obs.y[(i, j)] as f64).sum();
                    let t: f64 = (0..w).map(|i| obs.t[(i, j)]).sum();
                    (y + c) / (t + c_prime)
                })
            }
        };
        if z0.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
            return Err(Error::InvalidConfig("z0 must be strictly positive".into()));
        }
        Ok(z0)
    }
}

/// Gamma (shape, rate) hyperparameters and the direction-flag prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    pub a_alpha: f64,
    pub b_alpha: f64,
    pub a_rho: f64,
    pub b_rho: f64,
    pub a_nu: f64,
    pub b_nu: f64,
    pub a_delta: f64,
    pub b_delta: f64,
    pub p_plus: f64,
    pub p_zero: f64,
    pub p_minus: f64,
    #[serde(default)]
    pub z0: Z0Policy,
    #[serde(default)]
    pub alpha_fixed: Option<f64>,
}

impl PriorSpec {
    /// Generative and fitting priors of the 12x5 lattice simulation study.
    pub fn simulation_study() -> Self {
        PriorSpec {
            a_alpha: 10.0,
            b_alpha: 2.0,
            a_rho: 3.0,
            b_rho: 1.5,
            a_nu: 3.0,
            b_nu: 6.0,
            a_delta: 3.0,
            b_delta: 6.0,
            p_plus: 0.25,
            p_zero: 0.5,
            p_minus: 0.25,
            z0: Z0Policy::Ones,
            alpha_fixed: None,
        }
    }

    /// Hyperparameters used for the county-level field analyses, with
    /// `alpha` fixed at 2.
    pub fn field_default() -> Self {
        PriorSpec {
            a_alpha: 10.0,
            b_alpha: 2.0,
            a_rho: 5.0,
            b_rho: 2.0,
            a_nu: 5.0,
            b_nu: 10.0,
            a_delta: 5.0,
            b_delta: 10.0,
            p_plus: 0.2,
            p_zero: 0.6,
            p_minus: 0.2,
            z0: Z0Policy::default(),
            alpha_fixed: Some(2.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positives = [
            ("a_alpha", self.a_alpha),
            ("b_alpha", self.b_alpha),
            ("a_rho", self.a_rho),
            ("b_rho", self.b_rho),
            ("a_nu", self.a_nu),
            ("b_nu", self.b_nu),
            ("a_delta", self.a_delta),
            ("b_delta", self.b_delta),
        ];
        for (name, x) in positives {
            if !(x > 0.0) || !x.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {x}")));
            }
        }
        let ps = [self.p_plus, self.p_zero, self.p_minus];
        if ps.iter().any(|p| !(0.0..=1.0).contains(p)) || (ps.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidConfig(format!("direction prior {ps:?} must be probabilities summing to 1")));
        }
        if let Some(a) = self.alpha_fixed {
            if !(a > 0.0) || !a.is_finite() {
                return Err(Error::InvalidConfig(format!("alpha_fixed must be positive, got {a}")));
            }
        }
        Ok(())
    }

    /// Prior probability of `q`, in `Direction::ALL` order.
    pub fn direction_probs(&self) -> [f64; 3] {
        [self.p_plus, self.p_zero, self.p_minus]
    }

    pub fn log_prior_theta(&self, rho: f64, nu: f64, delta: f64) -> f64 {
        gamma_logpdf(rho, self.a_rho, self.b_rho)
            + gamma_logpdf(nu, self.a_nu, self.b_nu)
            + gamma_logpdf(delta, self.a_delta, self.b_delta)
    }

    pub fn log_prior_alpha(&self, alpha: f64) -> f64 {
        gamma_logpdf(alpha, self.a_alpha, self.b_alpha)
    }

    pub fn sample_direction<R: Rng + ?Sized>(&self, rng: &mut R) -> Direction {
        sample_categorical(&self.direction_probs(), rng)
    }

    /// Draw transition parameters for `n_time` steps and `alpha` from the
    /// prior (`alpha_fixed` is honoured).
    pub fn sample_params<R: Rng + ?Sized>(&self, n_time: usize, rng: &mut R) -> Result<ModelParams> {
        self.validate()?;
        let gamma = |a: f64, b: f64| Gamma::new(a, 1.0 / b).map_err(|e| Error::InvalidConfig(e.to_string()));
        let (g_rho, g_nu, g_delta) = (
            gamma(self.a_rho, self.b_rho)?,
            gamma(self.a_nu, self.b_nu)?,
            gamma(self.a_delta, self.b_delta)?,
        );
        let thetas = (0..n_time)
            .map(|_| {
                let q = self.sample_direction(rng);
                TransitionParams::new(q, g_rho.sample(rng), g_nu.sample(rng), g_delta.sample(rng))
            })
            .collect::<Result<Vec<_>>>()?;
        let alpha = match self.alpha_fixed {
            Some(a) => a,
            None => gamma(self.a_alpha, self.b_alpha)?.sample(rng),
        };
        Ok(ModelParams { thetas, alpha })
    }
}

fn sample_categorical<R: Rng + ?Sized>(probs: &[f64; 3], rng: &mut R) -> Direction {
    let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc && *p > 0.0 {
            return Direction::ALL[k];
        }
    }
    // u landed on the upper boundary: take the last category with mass
    let k = (0..3).rev().find(|&k| probs[k] > 0.0).unwrap_or(1);
    Direction::ALL[k]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Total iterations, burn-in included.
    pub n_iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Initial MALA step size (log scale), shared by all time steps.
    pub mala_step: f64,
    /// Target MALA acceptance rate during burn-in.
    pub mala_target: f64,
    /// Number of recent chain states used for the proposal covariance.
    pub adapt_window: usize,
    /// Target acceptance rate of the transition-parameter update.
    pub adapt_target: f64,
    /// Initial step of the log-alpha random walk.
    pub alpha_step: f64,
    /// Shrinkage constants for the empirical initial latent rates.
    pub init_c: f64,
    pub init_c_prime: f64,
    pub seed: u64,
    /// Drop the transition-density terms from the `q`, `theta` and `alpha`
    /// targets so they sample their priors. Only for prior-recovery checks.
    pub prior_only: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_iterations: 15_000,
            burn_in: 5_000,
            thin: 1,
            mala_step: 0.1,
            mala_target: 0.57,
            adapt_window: 500,
            adapt_target: 0.3,
            alpha_step: 0.05,
            init_c: 0.5,
            init_c_prime: 1.0,
            seed: 1,
            prior_only: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iterations == 0 {
            return Err(Error::InvalidConfig("n_iterations must be positive".into()));
        }
        if self.burn_in >= self.n_iterations {
            return Err(Error::InvalidConfig(format!(
                "burn_in {} must be below n_iterations {}",
                self.burn_in, self.n_iterations
            )));
        }
        if self.thin == 0 {
            return Err(Error::InvalidConfig("thin must be positive".into()));
        }
        for (name, x) in [("adapt_target", self.adapt_target), ("mala_target", self.mala_target)] {
            if !(x > 0.0 && x < 1.0) {
                return Err(Error::InvalidConfig(format!("{name} must lie in (0, 1), got {x}")));
            }
        }
        if self.adapt_window < 10 {
            return Err(Error::InvalidConfig("adapt_window must be at least 10".into()));
        }
        for (name, x) in [
            ("mala_step", self.mala_step),
            ("alpha_step", self.alpha_step),
            ("init_c", self.init_c),
            ("init_c_prime", self.init_c_prime),
        ] {
            if !(x > 0.0) || !x.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {x}")));
            }
        }
        Ok(())
    }

    /// Number of stored draws.
    pub fn n_draws(&self) -> usize {
        (self.n_iterations - self.burn_in).div_ceil(self.thin)
    }
}

// ---------------------------------------------------------------------------
// Latent-state conditional
// ---------------------------------------------------------------------------

/// Full conditional of `z_i` given its Markov blanket.
#[derive(Debug, Clone)]
pub struct ZConditional<'a> {
    pub y: &'a [u64],
    pub t: &'a [f64],
    /// `M_i z_{i-1}`.
    pub prior_mean: DVector<f64>,
    /// `(M_{i+1}, z_{i+1})`, absent at the final step.
    pub forward: Option<(&'a DMatrix<f64>, &'a DVector<f64>)>,
    pub alpha: f64,
}

impl ZConditional<'_> {
    /// Log density (up to the normalising constant of the conditional) and
    /// its gradient with respect to `z`.
    pub fn log_target(&self, z: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let n = z.len();
        if self.prior_mean.len() != n || self.y.len() != n || self.t.len() != n {
            return Err(Error::ShapeMismatch(format!("conditional for {} nodes, state has {n}", self.prior_mean.len())));
        }
        let alpha = self.alpha;
        let mut value = obs_loglik(self.y, self.t, z)?;
        value += trans_logpdf(z, &self.prior_mean, alpha)?;
        let mut grad = DVector::from_fn(n, |j, _| {
            let obs = if self.t[j] > 0.0 {
                self.y[j] as f64 / z[j] - self.t[j]
            } else {
                0.0
            };
            obs + (alpha - 1.0) / z[j] - alpha / self.prior_mean[j]
        });
        if let Some((m_next, z_next)) = self.forward {
            let mean_next = m_next * z;
            value += trans_logpdf(z_next, &mean_next, alpha)?;
            // d/d mu of log Gamma(z'; alpha, alpha / mu) = alpha (z' - mu) / mu^2
            let g = DVector::from_fn(n, |k, _| alpha * (z_next[k] - mean_next[k]) / (mean_next[k] * mean_next[k]));
            grad.gemv_tr(1.0, m_next, &g, 1.0);
        }
        Ok((value, grad))
    }

    /// Target on `w = log z`, including the Jacobian `sum(w)`.
    pub fn log_target_log_scale(&self, w: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let z = w.map(f64::exp);
        if z.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
            return Ok((f64::NEG_INFINITY, DVector::zeros(w.len())));
        }
        let (v, g) = self.log_target(&z)?;
        let gw = z.component_mul(&g).add_scalar(1.0);
        Ok((v + w.sum(), gw))
    }
}

/// Value and gradient (with respect to `z_i`) of the full conditional of
/// `z_i`: the Poisson term, the Gamma transition from `z_prev`, and the
/// Gamma transition into `z_next` when present.
#[allow(clippy::too_many_arguments)]
pub fn log_target_z(
    z_i: &DVector<f64>,
    y_i: &[u64],
    t_i: &[f64],
    z_prev: &DVector<f64>,
    z_next: Option<&DVector<f64>>,
    m_i: &DMatrix<f64>,
    m_next: Option<&DMatrix<f64>>,
    alpha: f64,
) -> Result<(f64, DVector<f64>)> {
    let forward = match (m_next, z_next) {
        (Some(m), Some(z)) => Some((m, z)),
        (None, None) => None,
        _ => return Err(Error::InvalidInput("z_next and m_next must be given together".into())),
    };
    ZConditional {
        y: y_i,
        t: t_i,
        prior_mean: m_i * z_prev,
        forward,
        alpha,
    }
    .log_target(z_i)
}

/// One MALA step on `w` with diagonal preconditioner `precond`.
///
/// `current` holds the target value and gradient at `w` and is replaced on
/// acceptance. Non-finite proposals are rejected.
pub fn mala_step<R, F>(
    w: &mut DVector<f64>,
    current: &mut (f64, DVector<f64>),
    target: F,
    step: f64,
    precond: &DVector<f64>,
    rng: &mut R,
) -> Result<bool>
where
    R: Rng + ?Sized,
    F: Fn(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    let n = w.len();
    let h = step * step;
    let drift = |x: &DVector<f64>, g: &DVector<f64>| -> DVector<f64> {
        DVector::from_fn(n, |j, _| x[j] + 0.5 * h * precond[j] * g[j])
    };
    let fwd_mean = drift(w, &current.1);
    let proposal = DVector::from_fn(n, |j, _| {
        let xi: f64 = rng.sample(StandardNormal);
        fwd_mean[j] + step * precond[j].sqrt() * xi
    });
    let (lp_new, g_new) = target(&proposal)?;
    if !lp_new.is_finite() || g_new.iter().any(|x| !x.is_finite()) {
        return Ok(false);
    }
    let back_mean = drift(&proposal, &g_new);
    let log_q = |to: &DVector<f64>, mean: &DVector<f64>| -> f64 {
        (0..n)
            .map(|j| {
                let d = to[j] - mean[j];
                -d * d / (2.0 * h * precond[j])
            })
            .sum()
    };
    let log_ratio = lp_new - current.0 + log_q(w, &back_mean) - log_q(&proposal, &fwd_mean);
    let u: f64 = rng.random();
    if log_ratio.is_finite() && u.ln() < log_ratio {
        *w = proposal;
        *current = (lp_new, g_new);
        Ok(true)
    } else {
        Ok(false)
    }
}

// ---------------------------------------------------------------------------
// Direction flag
// ---------------------------------------------------------------------------

/// Normalised conditional probabilities of `q_i` (in `Direction::ALL`
/// order) given `z_i`, `z_{i-1}`, the scaled flow matrices for each
/// direction at the current `rho_i`, and `nu_i`, `delta_i`, `alpha`.
#[allow(clippy::too_many_arguments)]
pub fn q_conditional(
    prior: &PriorSpec,
    z_i: &DVector<f64>,
    z_prev: &DVector<f64>,
    flows: [&DMatrix<f64>; 3],
    nu: f64,
    delta: f64,
    alpha: f64,
    use_likelihood: bool,
) -> Result<[f64; 3]> {
    let probs = prior.direction_probs();
    let mut logp = [f64::NEG_INFINITY; 3];
    for k in 0..3 {
        if probs[k] <= 0.0 {
            continue;
        }
        logp[k] = probs[k].ln();
        if use_likelihood {
            let mean = propagate(flows[k], nu, delta, z_prev);
            logp[k] += trans_logpdf(z_i, &mean, alpha)?;
        }
    }
    let max = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = [0.0; 3];
    let mut total = 0.0;
    for k in 0..3 {
        out[k] = (logp[k] - max).exp();
        total += out[k];
    }
    for p in out.iter_mut() {
        *p /= total;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Adaptive Metropolis for (log rho, log nu, log delta)
// ---------------------------------------------------------------------------

/// Minimum number of stored states before the empirical covariance is used.
const AM_MIN_HISTORY: usize = 100;
const AM_JITTER: f64 = 1e-6;
const AM_INITIAL_SD: f64 = 0.2;

/// Random-walk proposal whose covariance is `lambda * 2.38^2 / 3` times the
/// empirical covariance of recent chain states plus jitter; `lambda` is
/// tuned toward a target acceptance rate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptiveMetropolis {
    history: VecDeque<[f64; 3]>,
    window: usize,
    target: f64,
    log_lambda: f64,
    chol: [[f64; 3]; 3],
    updates: usize,
    pub accepted: usize,
    pub proposed: usize,
}

impl AdaptiveMetropolis {
    pub fn new(window: usize, target: f64) -> Self {
        let mut am = AdaptiveMetropolis {
            history: VecDeque::with_capacity(window),
            window,
            target,
            log_lambda: 0.0,
            chol: [[0.0; 3]; 3],
            updates: 0,
            accepted: 0,
            proposed: 0,
        };
        am.set_covariance(Matrix3::from_diagonal_element(AM_INITIAL_SD * AM_INITIAL_SD));
        am
    }

    fn set_covariance(&mut self, cov: Matrix3<f64>) {
        let chol = cov
            .cholesky()
            .map(|c| c.l())
            .unwrap_or_else(|| Matrix3::from_diagonal_element(AM_INITIAL_SD));
        for r in 0..3 {
            for c in 0..3 {
                self.chol[r][c] = chol[(r, c)];
            }
        }
    }

    pub fn scale(&self) -> f64 {
        self.log_lambda.exp()
    }

    pub fn propose<R: Rng + ?Sized>(&self, x: &[f64; 3], rng: &mut R) -> [f64; 3] {
        let xi = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        let s = self.log_lambda.exp().sqrt();
        let mut out = *x;
        for r in 0..3 {
            let mut d = 0.0;
            for c in 0..=r {
                d += self.chol[r][c] * xi[c];
            }
            out[r] += s * d;
        }
        out
    }

    /// Burn-in adaptation after one update with outcome `accepted` that left
    /// the chain at `x`.
    pub fn adapt(&mut self, x: &[f64; 3], accepted: bool) {
        self.updates += 1;
        let gain = (self.updates as f64).powf(-0.6);
        self.log_lambda += gain * ((accepted as u8 as f64) - self.target);
        self.log_lambda = self.log_lambda.clamp(-12.0, 6.0);
        if self.history.len() == self.window {
            self.history.pop_front();
        }
        self.history.push_back(*x);
        if self.history.len() >= AM_MIN_HISTORY && self.updates % 10 == 0 {
            let m = self.history.len() as f64;
            let mut mean = [0.0; 3];
            for h in &self.history {
                for d in 0..3 {
                    mean[d] += h[d] / m;
                }
            }
            let mut cov = Matrix3::zeros();
            for h in &self.history {
                for a in 0..3 {
                    for b in 0..3 {
                        cov[(a, b)] += (h[a] - mean[a]) * (h[b] - mean[b]) / (m - 1.0);
                    }
                }
            }
            let scaled = cov * (2.38 * 2.38 / 3.0) + Matrix3::from_diagonal_element(AM_JITTER);
            self.set_covariance(scaled);
        }
    }

    pub fn reset_counts(&mut self) {
        self.accepted = 0;
        self.proposed = 0;
    }
}

// ---------------------------------------------------------------------------
// Chain
// ---------------------------------------------------------------------------

/// Burn-in fractions delimiting the window in which MALA preconditioners are
/// estimated.
const PRECOND_START: f64 = 0.25;
const PRECOND_END: f64 = 0.75;

/// Draws and diagnostics from one chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSamples {
    pub n_time: usize,
    pub n_node: usize,
    /// Iteration (1-based, burn-in included) of each stored draw.
    pub iterations: Vec<usize>,
    /// `draw x time x node`, row-major.
    pub z: Vec<f64>,
    /// `draw x time`.
    pub q: Vec<i8>,
    pub rho: Vec<f64>,
    pub nu: Vec<f64>,
    pub delta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub acceptance: AcceptanceRates,
    pub adaptation: AdaptationTrace,
    /// Iterations actually run; below the configured count when interrupted.
    pub completed_iterations: usize,
    pub interrupted: bool,
}

/// Post-burn-in acceptance rates.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceRates {
    pub z: Vec<f64>,
    pub theta: Vec<f64>,
    pub alpha: Option<f64>,
    pub z_rejected_nonfinite: usize,
}

/// Snapshots of the tuning parameters, taken every `TRACE_EVERY`
/// iterations during burn-in and once when adaptation freezes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptationTrace {
    pub iteration: Vec<usize>,
    pub mala_step: Vec<Vec<f64>>,
    pub theta_scale: Vec<Vec<f64>>,
    pub alpha_step: Vec<f64>,
}

const TRACE_EVERY: usize = 100;
pub const PROGRESS_EVERY: usize = 1000;

impl PosteriorSamples {
    pub fn n_draws(&self) -> usize {
        self.alpha.len()
    }

    pub fn z_at(&self, draw: usize, i: usize, j: usize) -> f64 {
        self.z[(draw * self.n_time + i) * self.n_node + j]
    }

    /// All draws of `z_ij`.
    pub fn z_series(&self, i: usize, j: usize) -> Vec<f64> {
        (0..self.n_draws()).map(|d| self.z_at(d, i, j)).collect()
    }

    fn per_time<T: Copy>(v: &[T], n_time: usize, i: usize) -> Vec<T> {
        v.iter().skip(i).step_by(n_time).copied().collect()
    }

    pub fn q_series(&self, i: usize) -> Vec<i8> {
        Self::per_time(&self.q, self.n_time, i)
    }
    pub fn rho_series(&self, i: usize) -> Vec<f64> {
        Self::per_time(&self.rho, self.n_time, i)
    }
    pub fn nu_series(&self, i: usize) -> Vec<f64> {
        Self::per_time(&self.nu, self.n_time, i)
    }
    pub fn delta_series(&self, i: usize) -> Vec<f64> {
        Self::per_time(&self.delta, self.n_time, i)
    }

    /// Posterior mean of `z` as an `n_time x n_node` matrix.
    pub fn z_mean(&self) -> DMatrix<f64> {
        let d = self.n_draws().max(1) as f64;
        let mut out = DMatrix::zeros(self.n_time, self.n_node);
        for draw in 0..self.n_draws() {
            for i in 0..self.n_time {
                for j in 0..self.n_node {
                    out[(i, j)] += self.z_at(draw, i, j) / d;
                }
            }
        }
        out
    }
}

struct StepState {
    z: DVector<f64>,
    w: DVector<f64>,
    q: Direction,
    rho: f64,
    nu: f64,
    delta: f64,
    /// Scaled flow matrices at the current `rho`, by direction slot.
    flows: [Option<DMatrix<f64>>; 3],
    /// `M_i` for the current `(q, rho, nu, delta)`.
    m: DMatrix<f64>,
    mala_step: f64,
    precond: DVector<f64>,
    mala_accepted: usize,
    mala_proposed: usize,
    am: AdaptiveMetropolis,
    // Welford accumulators for the preconditioner
    w_mean: DVector<f64>,
    w_m2: DVector<f64>,
    w_count: usize,
}

impl StepState {
    fn flow(&mut self, kernel: &FlowKernel, q: Direction) -> &DMatrix<f64> {
        let rho = self.rho;
        self.flows[q.slot()].get_or_insert_with(|| kernel.scaled_flow(q, rho))
    }

    fn rebuild_m(&mut self, kernel: &FlowKernel) {
        let (nu, delta, q) = (self.nu, self.delta, self.q);
        let mut m = self.flow(kernel, q) * nu;
        for j in 0..m.nrows() {
            m[(j, j)] += delta;
        }
        self.m = m;
    }
}

/// The posterior sampler. Holds the current state of every block.
pub struct Chain<'a> {
    kernel: &'a FlowKernel,
    obs: &'a ObservationSet,
    priors: PriorSpec,
    config: SamplerConfig,
    z0: DVector<f64>,
    steps: Vec<StepState>,
    alpha: f64,
    alpha_step: f64,
    alpha_accepted: usize,
    alpha_proposed: usize,
    alpha_updates: usize,
    rejected_nonfinite: usize,
    rng: ChaCha8Rng,
    y_rows: Vec<Vec<u64>>,
    t_rows: Vec<Vec<f64>>,
}

impl<'a> Chain<'a> {
    pub fn new(kernel: &'a FlowKernel, obs: &'a ObservationSet, priors: &PriorSpec, config: &SamplerConfig) -> Result<Self> {
        priors.validate()?;
        config.validate()?;
        obs.validate()?;
        if obs.n_node() != kernel.n() {
            return Err(Error::ShapeMismatch(format!(
                "observations cover {} nodes, graph has {}",
                obs.n_node(),
                kernel.n()
            )));
        }
        if obs.n_time() == 0 {
            return Err(Error::ShapeMismatch("observations have no time steps".into()));
        }
        let z0 = priors.z0.resolve(obs)?;
        let n = obs.n_node();
        let rho0 = priors.a_rho / priors.b_rho;
        let nu0 = priors.a_nu / priors.b_nu;
        let delta0 = priors.a_delta / priors.b_delta;
        let mut steps = Vec::with_capacity(obs.n_time());
        for i in 0..obs.n_time() {
            let z = DVector::from_fn(n, |j, _| (obs.y[(i, j)] as f64 + config.init_c) / (obs.t[(i, j)] + config.init_c_prime));
            let q = if priors.p_zero > 0.0 {
                Direction::Zero
            } else {
                Direction::ALL[(0..3).max_by(|&a, &b| priors.direction_probs()[a].total_cmp(&priors.direction_probs()[b])).unwrap()]
            };
            let mut s = StepState {
                w: z.map(f64::ln),
                z,
                q,
                rho: rho0,
                nu: nu0,
                delta: delta0,
                flows: [None, None, None],
                m: DMatrix::zeros(0, 0),
                mala_step: config.mala_step,
                precond: DVector::from_element(n, 1.0),
                mala_accepted: 0,
                mala_proposed: 0,
                am: AdaptiveMetropolis::new(config.adapt_window, config.adapt_target),
                w_mean: DVector::zeros(n),
                w_m2: DVector::zeros(n),
                w_count: 0,
            };
            s.rebuild_m(kernel);
            steps.push(s);
        }
        let alpha = priors.alpha_fixed.unwrap_or(priors.a_alpha / priors.b_alpha);
        Ok(Chain {
            kernel,
            obs,
            priors: priors.clone(),
            config: config.clone(),
            z0,
            steps,
            alpha,
            alpha_step: config.alpha_step,
            alpha_accepted: 0,
            alpha_proposed: 0,
            alpha_updates: 0,
            rejected_nonfinite: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            y_rows: (0..obs.n_time()).map(|i| row_vec(&obs.y, i)).collect(),
            t_rows: (0..obs.n_time()).map(|i| row_vec(&obs.t, i)).collect(),
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn z(&self, i: usize) -> &DVector<f64> {
        &self.steps[i].z
    }

    pub fn params(&self) -> ModelParams {
        ModelParams {
            thetas: self
                .steps
                .iter()
                .map(|s| TransitionParams::new_unchecked(s.q, s.rho, s.nu, s.delta))
                .collect(),
            alpha: self.alpha,
        }
    }

    fn previous(&self, i: usize) -> &DVector<f64> {
        if i == 0 {
            &self.z0
        } else {
            &self.steps[i - 1].z
        }
    }

    /// MALA update of `z_i`. Returns whether the proposal was accepted.
    pub fn update_z(&mut self, i: usize) -> Result<bool> {
        let n_time = self.steps.len();
        let prior_mean = &self.steps[i].m * self.previous(i);
        let (head, tail) = self.steps.split_at_mut(i + 1);
        let step = &mut head[i];
        let forward = if i + 1 < n_time {
            Some((&tail[0].m, &tail[0].z))
        } else {
            None
        };
        let cond = ZConditional {
            y: &self.y_rows[i],
            t: &self.t_rows[i],
            prior_mean,
            forward,
            alpha: self.alpha,
        };
        let mut current = cond.log_target_log_scale(&step.w)?;
        let target = |w: &DVector<f64>| match cond.log_target_log_scale(w) {
            Ok(v) => Ok(v),
            // a proposal that drives a forward mean to zero is just rejected
            Err(Error::DegenerateMean { .. }) => Ok((f64::NEG_INFINITY, DVector::zeros(w.len()))),
            Err(e) => Err(e),
        };
        let before = step.w.clone();
        let accepted = mala_step(&mut step.w, &mut current, target, step.mala_step, &step.precond, &mut self.rng)?;
        step.mala_proposed += 1;
        if accepted {
            let z = step.w.map(f64::exp);
            if z.iter().all(|x| *x > 0.0 && x.is_finite()) {
                step.z = z;
                step.mala_accepted += 1;
            } else {
                step.w = before;
                self.rejected_nonfinite += 1;
                return Ok(false);
            }
        }
        Ok(accepted)
    }

    /// Exact draw of `q_i` from its conditional.
    pub fn update_q(&mut self, i: usize) -> Result<Direction> {
        let kernel = self.kernel;
        for q in Direction::ALL {
            self.steps[i].flow(kernel, q);
        }
        let z_prev = self.previous(i).clone();
        let step = &self.steps[i];
        let flows = [
            step.flows[0].as_ref().unwrap(),
            step.flows[1].as_ref().unwrap(),
            step.flows[2].as_ref().unwrap(),
        ];
        let probs = q_conditional(
            &self.priors,
            &step.z,
            &z_prev,
            flows,
            step.nu,
            step.delta,
            self.alpha,
            !self.config.prior_only,
        )?;
        let q = sample_categorical(&probs, &mut self.rng);
        let step = &mut self.steps[i];
        if q != step.q {
            step.q = q;
            step.rebuild_m(kernel);
        }
        Ok(q)
    }

    fn theta_log_target(&self, i: usize, log_theta: &[f64; 3], flow: &DMatrix<f64>) -> Result<f64> {
        let [rho, nu, delta] = log_theta.map(f64::exp);
        if ![rho, nu, delta].iter().all(|x| *x > 0.0 && x.is_finite()) {
            return Ok(f64::NEG_INFINITY);
        }
        let mut lp = self.priors.log_prior_theta(rho, nu, delta) + log_theta.iter().sum::<f64>();
        if !self.config.prior_only {
            let mean = propagate(flow, nu, delta, self.previous(i));
            lp += match trans_logpdf(&self.steps[i].z, &mean, self.alpha) {
                Ok(v) => v,
                Err(Error::DegenerateMean { .. }) => f64::NEG_INFINITY,
                Err(e) => return Err(e),
            };
        }
        Ok(lp)
    }

    /// Adaptive-Metropolis update of `(rho_i, nu_i, delta_i)`.
    pub fn update_theta(&mut self, i: usize, adapt: bool) -> Result<bool> {
        let kernel = self.kernel;
        let q = self.steps[i].q;
        let x = {
            let s = &self.steps[i];
            [s.rho.ln(), s.nu.ln(), s.delta.ln()]
        };
        let current_flow = self.steps[i].flow(kernel, q).clone();
        let lp_cur = self.theta_log_target(i, &x, &current_flow)?;
        let proposal = self.steps[i].am.propose(&x, &mut self.rng);
        let new_rho = proposal[0].exp();
        let new_flow = if new_rho == self.steps[i].rho {
            current_flow
        } else {
            kernel.scaled_flow(q, new_rho)
        };
        let lp_new = self.theta_log_target(i, &proposal, &new_flow)?;
        let u: f64 = self.rng.random();
        let accepted = lp_new.is_finite() && u.ln() < lp_new - lp_cur;
        let step = &mut self.steps[i];
        step.am.proposed += 1;
        if accepted {
            step.am.accepted += 1;
            if new_rho != step.rho {
                step.flows = [None, None, None];
                step.flows[q.slot()] = Some(new_flow);
            }
            step.rho = new_rho;
            step.nu = proposal[1].exp();
            step.delta = proposal[2].exp();
            step.rebuild_m(kernel);
        }
        if adapt {
            let now = if accepted { proposal } else { x };
            step.am.adapt(&now, accepted);
        }
        Ok(accepted)
    }

    fn alpha_log_target(&self, alpha: f64, sums: (f64, f64, f64)) -> f64 {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return f64::NEG_INFINITY;
        }
        let (cells, a, b) = sums;
        let mut lp = self.priors.log_prior_alpha(alpha) + alpha.ln();
        if !self.config.prior_only {
            lp += cells * (alpha * alpha.ln() - ln_gamma(alpha)) + alpha * a - b;
        }
        lp
    }

    /// Random-walk update of `log alpha`; a no-op when alpha is fixed.
    pub fn update_alpha(&mut self, adapt: bool) -> Result<bool> {
        if self.priors.alpha_fixed.is_some() {
            return Ok(false);
        }
        // sum_ij log Gamma(z; a, a/mu) = N (a ln a - lnG(a)) + a A - B with
        // A = sum(ln z - ln mu - z/mu), B = sum(ln z)
        let mut a = 0.0;
        let mut b = 0.0;
        let mut cells = 0.0;
        for i in 0..self.steps.len() {
            let mean = &self.steps[i].m * self.previous(i);
            let z = &self.steps[i].z;
            for j in 0..z.len() {
                let (zj, mj) = (z[j], mean[j]);
                a += zj.ln() - mj.ln() - zj / mj;
                b += zj.ln();
                cells += 1.0;
            }
        }
        let sums = (cells, a, b);
        let log_alpha = self.alpha.ln();
        let proposal = log_alpha + self.alpha_step * self.rng.sample::<f64, _>(StandardNormal);
        let lp_cur = self.alpha_log_target(self.alpha, sums);
        let lp_new = self.alpha_log_target(proposal.exp(), sums);
        let u: f64 = self.rng.random();
        let accepted = lp_new.is_finite() && u.ln() < lp_new - lp_cur;
        self.alpha_proposed += 1;
        if accepted {
            self.alpha = proposal.exp();
            self.alpha_accepted += 1;
        }
        if adapt {
            self.alpha_updates += 1;
            let gain = (self.alpha_updates as f64).powf(-0.6);
            let log_step = self.alpha_step.ln() + gain * ((accepted as u8 as f64) - 0.44);
            self.alpha_step = log_step.clamp(-10.0, 2.0).exp();
        }
        Ok(accepted)
    }

    fn adapt_mala(&mut self, i: usize, accepted: bool, iteration: usize) {
        let burn_in = self.config.burn_in;
        let target = self.config.mala_target;
        let step = &mut self.steps[i];
        let gain = (iteration as f64).powf(-0.6);
        let log_step = step.mala_step.ln() + gain * ((accepted as u8 as f64) - target);
        step.mala_step = log_step.clamp(-12.0, 1.0).exp();

        let start = (PRECOND_START * burn_in as f64) as usize;
        let end = (PRECOND_END * burn_in as f64) as usize;
        if iteration > start && iteration <= end {
            step.w_count += 1;
            let c = step.w_count as f64;
            for j in 0..step.w.len() {
                let d = step.w[j] - step.w_mean[j];
                step.w_mean[j] += d / c;
                step.w_m2[j] += d * (step.w[j] - step.w_mean[j]);
            }
        }
        if iteration == end && step.w_count >= 20 {
            let c = step.w_count as f64;
            let var = step.w_m2.map(|m2| m2 / (c - 1.0));
            // shrink toward the mean variance so no coordinate collapses
            let avg = var.mean().max(1e-8);
            step.precond = var.map(|v| ((c * v + 5.0 * avg) / (c + 5.0)).max(1e-8) / avg);
        }
    }

    fn snapshot(&self, trace: &mut AdaptationTrace, iteration: usize) {
        trace.iteration.push(iteration);
        trace.mala_step.push(self.steps.iter().map(|s| s.mala_step).collect());
        trace.theta_scale.push(self.steps.iter().map(|s| s.am.scale()).collect());
        trace.alpha_step.push(self.alpha_step);
    }

    /// Run the configured number of iterations. When `cancel` is set the
    /// chain stops at the end of the current iteration and returns the
    /// draws collected so far.
    pub fn run(self, cancel: Option<&AtomicBool>) -> Result<PosteriorSamples> {
        self.run_with_progress(cancel, &mut |_| {})
    }

    /// As [`Chain::run`], calling `progress` with the iteration number
    /// after every `PROGRESS_EVERY` iterations.
    pub fn run_with_progress(mut self, cancel: Option<&AtomicBool>, progress: &mut dyn FnMut(usize)) -> Result<PosteriorSamples> {
        let n_time = self.steps.len();
        let n_node = self.obs.n_node();
        let cfg = self.config.clone();
        let expected = cfg.n_draws();
        let mut out = PosteriorSamples {
            n_time,
            n_node,
            iterations: Vec::with_capacity(expected),
            z: Vec::with_capacity(expected * n_time * n_node),
            q: Vec::with_capacity(expected * n_time),
            rho: Vec::with_capacity(expected * n_time),
            nu: Vec::with_capacity(expected * n_time),
            delta: Vec::with_capacity(expected * n_time),
            alpha: Vec::with_capacity(expected),
            acceptance: AcceptanceRates::default(),
            adaptation: AdaptationTrace::default(),
            completed_iterations: 0,
            interrupted: false,
        };
        for iteration in 1..=cfg.n_iterations {
            if cancel.is_some_and(|c| c.load(Ordering::Relaxed)) {
                out.interrupted = true;
                break;
            }
            let adapting = iteration <= cfg.burn_in;
            for i in 0..n_time {
                let accepted = self.update_z(i)?;
                if adapting {
                    self.adapt_mala(i, accepted, iteration);
                }
                self.update_q(i)?;
                self.update_theta(i, adapting)?;
            }
            self.update_alpha(adapting)?;

            if adapting && (iteration % TRACE_EVERY == 0 || iteration == cfg.burn_in) {
                self.snapshot(&mut out.adaptation, iteration);
            }
            if iteration == cfg.burn_in {
                for s in self.steps.iter_mut() {
                    s.mala_accepted = 0;
                    s.mala_proposed = 0;
                    s.am.reset_counts();
                }
                self.alpha_accepted = 0;
                self.alpha_proposed = 0;
            }
            if !adapting && (iteration - cfg.burn_in - 1) % cfg.thin == 0 {
                out.iterations.push(iteration);
                for s in &self.steps {
                    out.z.extend(s.z.iter());
                    out.q.push(s.q.as_i8());
                    out.rho.push(s.rho);
                    out.nu.push(s.nu);
                    out.delta.push(s.delta);
                }
                out.alpha.push(self.alpha);
            }
            out.completed_iterations = iteration;
            if iteration % PROGRESS_EVERY == 0 {
                progress(iteration);
            }
        }
        let rate = |a: usize, p: usize| if p == 0 { 0.0 } else { a as f64 / p as f64 };
        out.acceptance = AcceptanceRates {
            z: self.steps.iter().map(|s| rate(s.mala_accepted, s.mala_proposed)).collect(),
            theta: self.steps.iter().map(|s| rate(s.am.accepted, s.am.proposed)).collect(),
            alpha: self
                .priors
                .alpha_fixed
                .is_none()
                .then(|| rate(self.alpha_accepted, self.alpha_proposed)),
            z_rejected_nonfinite: self.rejected_nonfinite,
        };
        Ok(out)
    }
}

/// Fit the model to `obs` on the graph behind `kernel`.
pub fn run_chain(
    obs: &ObservationSet,
    kernel: &FlowKernel,
    priors: &PriorSpec,
    config: &SamplerConfig,
    cancel: Option<&AtomicBool>,
) -> Result<PosteriorSamples> {
    Chain::new(kernel, obs, priors, config)?.run(cancel)
}
