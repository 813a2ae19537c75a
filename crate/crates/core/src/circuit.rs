//! Electrical solve on the augmented graph: Laplacian pseudoinverse,
//! resistance distances, terminal voltage solve and the effective-currents
//! matrix over the base nodes.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::{Arc, RwLock};

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::graph::{laplacian, AugmentedGraph};

/// Relative cut-off below which Laplacian eigenvalues count as zero.
pub const EIGEN_CUTOFF: f64 = 1e-10;

/// Moore-Penrose inverse of a connected-graph Laplacian.
///
/// Exactly one eigenvalue is expected below `EIGEN_CUTOFF * max eigenvalue`
/// (the constant vector); any other count means the graph is disconnected or
/// the matrix is not a Laplacian.
pub fn pseudoinverse(l: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !l.is_square() || l.nrows() < 2 {
        return Err(Error::ShapeMismatch(format!("Laplacian is {}x{}", l.nrows(), l.ncols())));
    }
    let eig = SymmetricEigen::new(l.clone());
    let max = eig.eigenvalues.iter().cloned().fold(0.0_f64, |a, b| a.max(b.abs()));
    let cutoff = EIGEN_CUTOFF * max;
    let null = eig.eigenvalues.iter().filter(|v| v.abs() <= cutoff).count();
    if null != 1 {
        return Err(Error::IllConditioned(null));
    }
    let n = l.nrows();
    let mut scaled = eig.eigenvectors.clone();
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        let inv = if lambda.abs() <= cutoff { 0.0 } else { 1.0 / lambda };
        scaled.column_mut(k).scale_mut(inv);
    }
    let mut out = &scaled * eig.eigenvectors.transpose();
    for j in 0..n {
        for k in (j + 1)..n {
            let s = 0.5 * (out[(j, k)] + out[(k, j)]);
            out[(j, k)] = s;
            out[(k, j)] = s;
        }
    }
    Ok(out)
}

/// `Omega_jk = (e_j - e_k)' L+ (e_j - e_k)`.
pub fn resistance_distance(l_plus: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l_plus.nrows();
    DMatrix::from_fn(n, n, |j, k| {
        if j == k {
            0.0
        } else {
            (l_plus[(j, j)] + l_plus[(k, k)] - 2.0 * l_plus[(j, k)]).max(0.0)
        }
    })
}

/// Voltages and net injected currents on the augmented graph.
#[derive(Debug, Clone)]
pub struct VoltageSolution {
    pub v: DVector<f64>,
    pub i_net: DVector<f64>,
}

/// Fix the battery at `v_battery` and the ground at 0 and solve Ohm's law
/// `L v = i` for the remaining voltages and the terminal currents.
pub fn solve_voltages(ag: &AugmentedGraph, v_battery: f64) -> Result<VoltageSolution> {
    let l = laplacian(ag.a_star())?;
    let total = l.nrows();
    let known = [ag.battery_index(), ag.ground_index()];
    let unknown: Vec<usize> = (0..total).filter(|j| !known.contains(j)).collect();
    let m = unknown.len();
    let l22 = DMatrix::from_fn(m, m, |a, b| l[(unknown[a], unknown[b])]);
    let l21 = DMatrix::from_fn(m, 2, |a, b| l[(unknown[a], known[b])]);
    let l12 = l21.transpose();
    let l11 = DMatrix::from_fn(2, 2, |a, b| l[(known[a], known[b])]);
    let v_known = DVector::from_vec(vec![v_battery, 0.0]);
    let chol = l22
        .clone()
        .cholesky()
        .ok_or_else(|| Error::SolveFailed("interior Laplacian block is singular".into()))?;
    // current injected at non-terminals is zero
    let rhs = -(&l21 * &v_known);
    let v_unknown = chol.solve(&rhs);
    let l22_inv_l21 = chol.solve(&l21);
    let i_terminal = (&l11 - &l12 * l22_inv_l21) * &v_known;

    let mut v = DVector::zeros(total);
    v[known[0]] = v_battery;
    v[known[1]] = 0.0;
    for (a, &j) in unknown.iter().enumerate() {
        v[j] = v_unknown[a];
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::SolveFailed("non-finite voltage".into()));
    }
    let mut i_net = &l * &v;
    i_net[known[0]] = i_terminal[0];
    i_net[known[1]] = i_terminal[1];
    Ok(VoltageSolution { v, i_net })
}

pub const VOLTAGE_TIE: f64 = 1e-12;

/// `c_jk = (v_k - v_j) / Omega_jk` for `j != k` over the first `n` nodes.
/// Positive `c_jk` is current from node `k` toward node `j`. Voltage gaps
/// within [`VOLTAGE_TIE`] of the voltage range are rounding noise from the
/// solve and give zero current.
pub fn currents_matrix(v: &DVector<f64>, omega: &DMatrix<f64>, n: usize) -> Result<DMatrix<f64>> {
    if v.len() < n || omega.nrows() < n || omega.ncols() < n {
        return Err(Error::ShapeMismatch(format!(
            "need {n} nodes, have {} voltages and a {}x{} resistance matrix",
            v.len(),
            omega.nrows(),
            omega.ncols()
        )));
    }
    let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let tie = VOLTAGE_TIE * (hi - lo).max(f64::MIN_POSITIVE);
    let mut c = DMatrix::zeros(n, n);
    for j in 0..n {
        for k in (j + 1)..n {
            let r = omega[(j, k)];
            if !(r > 0.0) {
                return Err(Error::SolveFailed(format!("zero resistance distance between {j} and {k}")));
            }
            let gap = v[k] - v[j];
            let cur = if gap.abs() <= tie { 0.0 } else { gap / r };
            c[(j, k)] = cur;
            c[(k, j)] = -cur;
        }
    }
    Ok(c)
}

/// Complete electrical solution for one battery/ground configuration.
#[derive(Debug, Clone)]
pub struct CircuitSolution {
    /// Voltage per augmented node; battery at index `n`, ground at `n + 1`.
    pub v: DVector<f64>,
    pub i_net: DVector<f64>,
    /// Resistance distances over the augmented graph.
    pub omega: DMatrix<f64>,
    /// Skew-symmetric currents matrix over the base nodes.
    pub c: DMatrix<f64>,
}

impl CircuitSolution {
    pub fn compute(ag: &AugmentedGraph, v_battery: f64) -> Result<CircuitSolution> {
        let l = laplacian(ag.a_star())?;
        let omega = resistance_distance(&pseudoinverse(&l)?);
        let VoltageSolution { v, i_net } = solve_voltages(ag, v_battery)?;
        let c = currents_matrix(&v, &omega, ag.base().n())?;
        Ok(CircuitSolution { v, i_net, omega, c })
    }

    pub fn n(&self) -> usize {
        self.c.nrows()
    }

    /// Voltages of the base nodes only.
    pub fn base_voltages(&self) -> DVector<f64> {
        self.v.rows(0, self.n()).into_owned()
    }

    /// Largest |net current| over the non-terminal nodes.
    pub fn kirchhoff_residual(&self) -> f64 {
        self.i_net.rows(0, self.n()).amax()
    }

    /// Effective current from the battery toward each base node.
    pub fn battery_currents(&self) -> DVector<f64> {
        let b = self.n();
        DVector::from_fn(self.n(), |j, _| (self.v[b] - self.v[j]) / self.omega[(j, b)])
    }

    /// Current passing through each base node: half the summed magnitude of
    /// the branch currents on its incident edges (terminal edges included).
    pub fn node_throughput(&self, ag: &AugmentedGraph) -> DVector<f64> {
        let a = ag.a_star();
        let total = a.nrows();
        DVector::from_fn(self.n(), |j, _| {
            0.5 * (0..total)
                .map(|k| a[(j, k)] * (self.v[j] - self.v[k]).abs())
                .sum::<f64>()
        })
    }
}

/// Positive-direction, negative-direction and diffusion flow matrices.
#[derive(Debug, Clone)]
pub struct DirectionalCurrents {
    pub c_pos: DMatrix<f64>,
    pub c_neg: DMatrix<f64>,
    pub c_zero: DMatrix<f64>,
}

impl DirectionalCurrents {
    pub fn n(&self) -> usize {
        self.c_pos.nrows()
    }
}

/// `C+ = max(C, 0)`, `C- = max(C', 0)`, `C0 = 11'` with zero diagonal.
pub fn split_directions(c: &DMatrix<f64>) -> Result<DirectionalCurrents> {
    if !c.is_square() {
        return Err(Error::ShapeMismatch(format!("currents matrix is {}x{}", c.nrows(), c.ncols())));
    }
    let n = c.nrows();
    let c_pos = DMatrix::from_fn(n, n, |j, k| if j == k { 0.0 } else { c[(j, k)].max(0.0) });
    let c_neg = DMatrix::from_fn(n, n, |j, k| if j == k { 0.0 } else { c[(k, j)].max(0.0) });
    let c_zero = DMatrix::from_fn(n, n, |j, k| if j == k { 0.0 } else { 1.0 });
    Ok(DirectionalCurrents { c_pos, c_neg, c_zero })
}

/// Memoised circuit solutions keyed by augmented adjacency and battery
/// voltage. Readers share a lock; insertion takes the write lock.
#[derive(Debug, Default)]
pub struct CircuitCache {
    entries: RwLock<HashMap<u64, Arc<CircuitSolution>>>,
}

impl CircuitCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn key(ag: &AugmentedGraph, v_battery: f64) -> u64 {
        let mut h = DefaultHasher::new();
        ag.a_star().nrows().hash(&mut h);
        for x in ag.a_star().iter() {
            x.to_bits().hash(&mut h);
        }
        v_battery.to_bits().hash(&mut h);
        h.finish()
    }

    pub fn get_or_compute(&self, ag: &AugmentedGraph, v_battery: f64) -> Result<Arc<CircuitSolution>> {
        let key = Self::key(ag, v_battery);
        if let Some(hit) = self.entries.read().expect("circuit cache poisoned").get(&key) {
            return Ok(Arc::clone(hit));
        }
        let sol = Arc::new(CircuitSolution::compute(ag, v_battery)?);
        let mut w = self.entries.write().expect("circuit cache poisoned");
        Ok(Arc::clone(w.entry(key).or_insert(sol)))
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("circuit cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
