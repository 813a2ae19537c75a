//! Time-indexed transition matrices
//! `M(q, rho, nu, delta) = nu * scaleCol(C^q ./ D^rho) + delta * I`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::circuit::DirectionalCurrents;
use crate::error::{Error, Result};
use crate::graph::DistanceMatrix;

/// Direction flag `q`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "i8", into = "i8")]
pub enum Direction {
    /// `q = -1`: flow toward the battery (northward).
    Negative,
    /// `q = 0`: diffusion.
    Zero,
    /// `q = +1`: flow toward the ground (southward).
    Positive,
}

impl Direction {
    pub const ALL: [Direction; 3] = [Direction::Positive, Direction::Zero, Direction::Negative];

    pub fn as_i8(self) -> i8 {
        match self {
            Direction::Negative => -1,
            Direction::Zero => 0,
            Direction::Positive => 1,
        }
    }

    /// Position in `ALL`.
    pub fn slot(self) -> usize {
        match self {
            Direction::Positive => 0,
            Direction::Zero => 1,
            Direction::Negative => 2,
        }
    }
}

impl TryFrom<i8> for Direction {
    type Error = Error;
    fn try_from(q: i8) -> Result<Self> {
        match q {
            -1 => Ok(Direction::Negative),
            0 => Ok(Direction::Zero),
            1 => Ok(Direction::Positive),
            other => Err(Error::InvalidInput(format!("direction flag must be -1, 0 or 1, got {other}"))),
        }
    }
}

impl From<Direction> for i8 {
    fn from(d: Direction) -> i8 {
        d.as_i8()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionParams {
    pub q: Direction,
    pub rho: f64,
    pub nu: f64,
    pub delta: f64,
}

impl TransitionParams {
    pub fn new(q: Direction, rho: f64, nu: f64, delta: f64) -> Result<Self> {
        let p = TransitionParams { q, rho, nu, delta };
        p.validate()?;
        Ok(p)
    }

    /// Skips the strict positivity check so limiting cases (`nu = 0`,
    /// `rho = 0`) can be evaluated. Values must still be finite and
    /// nonnegative.
    pub fn new_unchecked(q: Direction, rho: f64, nu: f64, delta: f64) -> Self {
        assert!(
            [rho, nu, delta].iter().all(|x| x.is_finite() && *x >= 0.0),
            "transition parameters must be finite and nonnegative"
        );
        TransitionParams { q, rho, nu, delta }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, x) in [("rho", self.rho), ("nu", self.nu), ("delta", self.delta)] {
            if !(x > 0.0) || !x.is_finite() {
                return Err(Error::InvalidInput(format!("{name} must be positive, got {x}")));
            }
        }
        Ok(())
    }
}

/// Elementwise `num ./ den` with `0 / 0 = 0`.
pub fn safe_divide(num: &DMatrix<f64>, den: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if num.shape() != den.shape() {
        return Err(Error::ShapeMismatch(format!(
            "numerator {:?} vs denominator {:?}",
            num.shape(),
            den.shape()
        )));
    }
    let mut out = DMatrix::zeros(num.nrows(), num.ncols());
    for k in 0..num.ncols() {
        for j in 0..num.nrows() {
            let (a, b) = (num[(j, k)], den[(j, k)]);
            if b < 0.0 {
                return Err(Error::InvalidInput(format!("negative denominator at ({j}, {k})")));
            }
            out[(j, k)] = if b == 0.0 {
                if a != 0.0 {
                    return Err(Error::DivideByZero(j, k));
                }
                0.0
            } else {
                a / b
            };
        }
    }
    Ok(out)
}

/// Rescale every column to sum to one. All-zero columns stay zero.
pub fn scale_col(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(x) = m.iter().find(|x| !(**x >= 0.0)) {
        return Err(Error::InvalidInput(format!("scale_col needs nonnegative entries, found {x}")));
    }
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        let s = col.sum();
        if s > 0.0 {
            col /= s;
        }
    }
    Ok(out)
}

/// `D` raised elementwise to `rho` via `exp(rho * ln d)` on the positive
/// off-diagonal entries; the diagonal stays zero.
pub fn distance_power(d: &DistanceMatrix, rho: f64) -> DMatrix<f64> {
    let m = d.matrix();
    DMatrix::from_fn(m.nrows(), m.ncols(), |j, k| {
        let x = m[(j, k)];
        if j == k || x <= 0.0 {
            0.0
        } else {
            (rho * x.ln()).exp()
        }
    })
}

fn flow_matrix(dc: &DirectionalCurrents, q: Direction) -> &DMatrix<f64> {
    match q {
        Direction::Positive => &dc.c_pos,
        Direction::Zero => &dc.c_zero,
        Direction::Negative => &dc.c_neg,
    }
}

/// Dense transition matrix for one time step.
pub fn build_transition(p: &TransitionParams, dc: &DirectionalCurrents, d: &DistanceMatrix) -> Result<DMatrix<f64>> {
    if dc.n() != d.n() {
        return Err(Error::ShapeMismatch(format!(
            "currents are {n}x{n}, distances {m}x{m}",
            n = dc.n(),
            m = d.n()
        )));
    }
    let flow = scale_col(&safe_divide(flow_matrix(dc, p.q), &distance_power(d, p.rho))?)?;
    let mut m = flow * p.nu;
    for j in 0..m.nrows() {
        m[(j, j)] += p.delta;
    }
    Ok(m)
}

/// Precomputed log-currents and log-distances for fast evaluation of
/// `scaleCol(C^q ./ D^rho)` at arbitrary `rho`.
///
/// Each column is normalised in log space, so large `rho` or large
/// distances cannot overflow. Results agree with [`build_transition`] to
/// rounding.
#[derive(Debug, Clone)]
pub struct FlowKernel {
    n: usize,
    /// Per direction, per column: `(row, ln c_jk, ln d_jk)` for nonzero `c_jk`.
    columns: [Vec<Vec<(usize, f64, f64)>>; 3],
}

impl FlowKernel {
    pub fn new(dc: &DirectionalCurrents, d: &DistanceMatrix) -> Result<Self> {
        let n = dc.n();
        if n != d.n() {
            return Err(Error::ShapeMismatch(format!("currents are {n}x{n}, distances {m}x{m}", m = d.n())));
        }
        let dm = d.matrix();
        let build = |c: &DMatrix<f64>| -> Result<Vec<Vec<(usize, f64, f64)>>> {
            (0..n)
                .map(|k| {
                    let mut col = Vec::new();
                    for j in 0..n {
                        let x = c[(j, k)];
                        if x < 0.0 {
                            return Err(Error::InvalidInput(format!("negative flow entry at ({j}, {k})")));
                        }
                        if x > 0.0 {
                            if !(dm[(j, k)] > 0.0) {
                                return Err(Error::DivideByZero(j, k));
                            }
                            col.push((j, x.ln(), dm[(j, k)].ln()));
                        }
                    }
                    Ok(col)
                })
                .collect()
        };
        Ok(FlowKernel {
            n,
            columns: [build(&dc.c_pos)?, build(&dc.c_zero)?, build(&dc.c_neg)?],
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// `scaleCol(C^q ./ D^rho)`.
    pub fn scaled_flow(&self, q: Direction, rho: f64) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, self.n);
        let mut buf = Vec::with_capacity(self.n);
        for (k, col) in self.columns[q.slot()].iter().enumerate() {
            if col.is_empty() {
                continue;
            }
            buf.clear();
            buf.extend(col.iter().map(|&(_, lc, ld)| lc - rho * ld));
            let max = buf.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in buf.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for (&(j, _, _), &w) in col.iter().zip(&buf) {
                out[(j, k)] = w / total;
            }
        }
        out
    }

    /// Which columns of the scaled flow matrix are nonzero for direction `q`.
    pub fn active_columns(&self, q: Direction) -> Vec<bool> {
        self.columns[q.slot()].iter().map(|c| !c.is_empty()).collect()
    }

    pub fn transition(&self, p: &TransitionParams) -> DMatrix<f64> {
        let mut m = self.scaled_flow(p.q, p.rho) * p.nu;
        for j in 0..self.n {
            m[(j, j)] += p.delta;
        }
        m
    }
}

/// `M z` evaluated as `nu * S z + delta * z` from a scaled flow matrix `S`.
pub fn propagate(scaled_flow: &DMatrix<f64>, nu: f64, delta: f64, z: &DVector<f64>) -> DVector<f64> {
    let mut out = scaled_flow * z;
    out *= nu;
    out.axpy(delta, z, 1.0);
    out
}
