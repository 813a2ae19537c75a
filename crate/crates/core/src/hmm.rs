//! Poisson observations over a Gamma-multiplicative latent chain.
//!
//! `y_ij ~ Poisson(z_ij t_ij)` and `z_i = (M_i z_{i-1}) .* eps_i` with
//! `eps_ij ~ Gamma(alpha, alpha)`, i.e. `z_ij ~ Gamma(alpha, alpha / mu_ij)`
//! where `mu_i = M_i z_{i-1}`. Gamma is shape-rate throughout.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Exp, Gamma, Poisson};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::transition::{FlowKernel, TransitionParams};

/// Counts and efforts, `n_time x n_node`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub y: DMatrix<u64>,
    pub t: DMatrix<f64>,
}

impl ObservationSet {
    pub fn new(y: DMatrix<u64>, t: DMatrix<f64>) -> Result<Self> {
        let obs = ObservationSet { y, t };
        obs.validate()?;
        Ok(obs)
    }

    pub fn zeros(n_time: usize, n_node: usize) -> Self {
        ObservationSet {
            y: DMatrix::zeros(n_time, n_node),
            t: DMatrix::zeros(n_time, n_node),
        }
    }

    pub fn n_time(&self) -> usize {
        self.y.nrows()
    }

    pub fn n_node(&self) -> usize {
        self.y.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.y.shape() != self.t.shape() {
            return Err(Error::ShapeMismatch(format!(
                "counts {:?} vs efforts {:?}",
                self.y.shape(),
                self.t.shape()
            )));
        }
        for i in 0..self.n_time() {
            for j in 0..self.n_node() {
                let t = self.t[(i, j)];
                if !(t >= 0.0) || !t.is_finite() {
                    return Err(Error::InvariantViolation(format!("effort {t} at ({i}, {j})")));
                }
                if t == 0.0 && self.y[(i, j)] > 0 {
                    return Err(Error::InvariantViolation(format!(
                        "count {} with zero effort at ({i}, {j})",
                        self.y[(i, j)]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Cells with zero effort.
    pub fn missing_mask(&self) -> DMatrix<bool> {
        self.t.map(|t| t == 0.0)
    }
}

/// Latent rates `z` (`n_time x n_node`) and the initial state `z0`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPath {
    pub z: DMatrix<f64>,
    pub z0: DVector<f64>,
}

impl LatentPath {
    pub fn validate(&self) -> Result<()> {
        if self.z.ncols() != self.z0.len() {
            return Err(Error::ShapeMismatch(format!(
                "z has {} nodes, z0 has {}",
                self.z.ncols(),
                self.z0.len()
            )));
        }
        if self.z.iter().chain(self.z0.iter()).any(|x| !(*x > 0.0) || !x.is_finite()) {
            return Err(Error::InvariantViolation("latent rates must be positive".into()));
        }
        Ok(())
    }

    /// Row `i` of `z` as a column vector; `i = 0` is the first time step.
    pub fn step(&self, i: usize) -> DVector<f64> {
        self.z.row(i).transpose()
    }

    /// State preceding step `i`.
    pub fn previous(&self, i: usize) -> DVector<f64> {
        if i == 0 {
            self.z0.clone()
        } else {
            self.step(i - 1)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub thetas: Vec<TransitionParams>,
    pub alpha: f64,
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidInput(format!("alpha must be positive, got {}", self.alpha)));
        }
        self.thetas.iter().try_for_each(|p| p.validate())
    }
}

/// Log-density of `Gamma(shape, rate)` at `x`.
pub fn gamma_logpdf(x: f64, shape: f64, rate: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

/// Log-pmf of `Poisson(lambda)` at `k`; `lambda = 0` gives 0 at `k = 0`.
pub fn poisson_logpmf(k: u64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return if k == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    let kf = k as f64;
    kf * lambda.ln() - lambda - ln_gamma(kf + 1.0)
}

/// `sum_j log Gamma(z_j; alpha, alpha / mu_j)`.
pub fn trans_logpdf(z_next: &DVector<f64>, mean: &DVector<f64>, alpha: f64) -> Result<f64> {
    if z_next.len() != mean.len() {
        return Err(Error::ShapeMismatch(format!("{} states vs {} means", z_next.len(), mean.len())));
    }
    let lg = ln_gamma(alpha);
    let la = alpha.ln();
    let mut total = 0.0;
    for (node, (&z, &mu)) in z_next.iter().zip(mean.iter()).enumerate() {
        if !(mu > 0.0) || !mu.is_finite() {
            return Err(Error::DegenerateMean { node, mean: mu });
        }
        let rate = alpha / mu;
        total += alpha * (la - mu.ln()) - lg + (alpha - 1.0) * z.ln() - rate * z;
    }
    Ok(total)
}

/// `sum_j log Poisson(y_j; z_j t_j)`; cells with zero effort contribute 0.
pub fn obs_loglik(y: &[u64], t: &[f64], z: &DVector<f64>) -> Result<f64> {
    if y.len() != t.len() || y.len() != z.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} counts, {} efforts, {} rates",
            y.len(),
            t.len(),
            z.len()
        )));
    }
    let mut total = 0.0;
    for j in 0..y.len() {
        if t[j] == 0.0 {
            if y[j] > 0 {
                return Err(Error::InvariantViolation(format!("count {} with zero effort at node {j}", y[j])));
            }
            continue;
        }
        total += poisson_logpmf(y[j], z[j] * t[j]);
    }
    Ok(total)
}

/// Row `i` of a matrix as an owned `Vec`.
pub(crate) fn row_vec<T: nalgebra::Scalar + Copy>(m: &DMatrix<T>, i: usize) -> Vec<T> {
    m.row(i).iter().copied().collect()
}

/// Full log joint density `log p(y, z | theta, alpha)` as the sum of the
/// per-step observation and transition terms.
pub fn log_joint(
    kernel: &FlowKernel,
    params: &ModelParams,
    path: &LatentPath,
    obs: &ObservationSet,
) -> Result<f64> {
    check_dims(kernel, params, path, obs)?;
    let mut total = 0.0;
    for i in 0..obs.n_time() {
        let z = path.step(i);
        let mt = kernel.transition(&params.thetas[i]);
        let mean = mt * path.previous(i);
        total += obs_loglik(&row_vec(&obs.y, i), &row_vec(&obs.t, i), &z)?;
        total += trans_logpdf(&z, &mean, params.alpha)?;
    }
    Ok(total)
}

fn check_dims(kernel: &FlowKernel, params: &ModelParams, path: &LatentPath, obs: &ObservationSet) -> Result<()> {
    if params.thetas.len() != obs.n_time() || path.z.nrows() != obs.n_time() {
        return Err(Error::ShapeMismatch(format!(
            "{} transition steps, {} latent steps, {} observed steps",
            params.thetas.len(),
            path.z.nrows(),
            obs.n_time()
        )));
    }
    if kernel.n() != obs.n_node() || path.z.ncols() != obs.n_node() {
        return Err(Error::ShapeMismatch(format!(
            "graph has {} nodes, observations {}",
            kernel.n(),
            obs.n_node()
        )));
    }
    Ok(())
}

/// Exponential efforts (hours) for every cell.
pub fn simulate_efforts<R: Rng + ?Sized>(n_time: usize, n_node: usize, rate: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    let exp = Exp::new(rate).map_err(|e| Error::InvalidInput(format!("effort rate {rate}: {e}")))?;
    Ok(DMatrix::from_fn(n_time, n_node, |_, _| exp.sample(rng)))
}

/// Forward-simulate latent rates and counts.
pub fn simulate_path<R: Rng + ?Sized>(
    kernel: &FlowKernel,
    params: &ModelParams,
    t: &DMatrix<f64>,
    z0: &DVector<f64>,
    rng: &mut R,
) -> Result<(LatentPath, ObservationSet)> {
    params.validate()?;
    let n_time = params.thetas.len();
    let n = kernel.n();
    if t.shape() != (n_time, n) || z0.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "efforts {:?}, z0 length {}, expected ({n_time}, {n})",
            t.shape(),
            z0.len()
        )));
    }
    if t.iter().any(|x| !(*x >= 0.0)) {
        return Err(Error::InvalidInput("efforts must be nonnegative".into()));
    }
    let noise = Gamma::new(params.alpha, 1.0 / params.alpha)
        .map_err(|e| Error::InvalidInput(format!("alpha {}: {e}", params.alpha)))?;
    let mut z = DMatrix::zeros(n_time, n);
    let mut y = DMatrix::zeros(n_time, n);
    let mut prev = z0.clone();
    for i in 0..n_time {
        let mean = kernel.transition(&params.thetas[i]) * &prev;
        for j in 0..n {
            // guard against underflow to exactly zero for tiny alpha
            let zij = (mean[j] * noise.sample(rng)).max(f64::MIN_POSITIVE);
            z[(i, j)] = zij;
            let lambda = zij * t[(i, j)];
            y[(i, j)] = if lambda > 0.0 {
                Poisson::new(lambda)
                    .map_err(|e| Error::InvalidInput(format!("Poisson rate {lambda}: {e}")))?
                    .sample(rng) as u64
            } else {
                0
            };
        }
        prev = z.row(i).transpose();
    }
    Ok((
        LatentPath { z, z0: z0.clone() },
        ObservationSet { y, t: t.clone() },
    ))
}

/// Observations after random censoring plus the mask of censored cells.
#[derive(Debug, Clone)]
pub struct Censored {
    pub obs: ObservationSet,
    pub mask: DMatrix<bool>,
}

/// Zero out `floor(fraction * cells)` uniformly chosen cells.
pub fn censor<R: Rng + ?Sized>(obs: &ObservationSet, fraction: f64, rng: &mut R) -> Result<Censored> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidInput(format!("censoring fraction {fraction} not in [0, 1)")));
    }
    obs.validate()?;
    let (n_time, n) = (obs.n_time(), obs.n_node());
    let cells = n_time * n;
    let k = (fraction * cells as f64).floor() as usize;
    let mut out = obs.clone();
    let mut mask = DMatrix::from_element(n_time, n, false);
    for cell in sample(rng, cells, k) {
        let (i, j) = (cell / n, cell % n);
        out.y[(i, j)] = 0;
        out.t[(i, j)] = 0.0;
        mask[(i, j)] = true;
    }
    Ok(Censored { obs: out, mask })
}
