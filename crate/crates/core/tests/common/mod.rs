#![allow(dead_code)]

use flowhmm::circuit::{split_directions, CircuitSolution};
use flowhmm::graph::{distance_matrix, laplacian, GraphSpec};
use flowhmm::transition::FlowKernel;
use nalgebra::DMatrix;

/// Kolmogorov-Smirnov distance between a sample and a continuous CDF.
pub fn ks_distance(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(k, &x)| {
            let f = cdf(x);
            (f - k as f64 / n).abs().max(((k + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Effective resistance by grounding `k` and injecting a unit current at
/// `j`; a reduced Laplacian solve, no pseudoinverse involved.
pub fn grounded_resistance(adj: &DMatrix<f64>, j: usize, k: usize) -> f64 {
    if j == k {
        return 0.0;
    }
    let l = laplacian(adj).unwrap();
    let n = l.nrows();
    let keep: Vec<usize> = (0..n).filter(|&x| x != k).collect();
    let reduced = DMatrix::from_fn(n - 1, n - 1, |a, b| l[(keep[a], keep[b])]);
    let mut rhs = nalgebra::DVector::zeros(n - 1);
    let pos = keep.iter().position(|&x| x == j).unwrap();
    rhs[pos] = 1.0;
    let v = reduced.lu().solve(&rhs).unwrap();
    v[pos]
}

pub fn kernel_and_solution(spec: &GraphSpec) -> (FlowKernel, CircuitSolution) {
    let sol = CircuitSolution::compute(&spec.augmented().unwrap(), 1.0).unwrap();
    let k = FlowKernel::new(&split_directions(&sol.c).unwrap(), &distance_matrix(&spec.graph).unwrap()).unwrap();
    (k, sol)
}

pub fn verdict(id: u32, name: &str, ok: bool, detail: &str) {
    println!("criterion {id} [{}] {name}: {detail}", if ok { "PASS" } else { "FAIL" });
}
