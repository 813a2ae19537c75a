//! Posterior summaries and the replicate coverage study.
//!
//! Quantiles use the piecewise-linear rule with plotting positions
//! `(k - 0.5) / n` (Hyndman and Fan type 5).

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::AtomicBool;
use std::sync::Mutex;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::circuit::{split_directions, CircuitSolution};
use crate::error::{Error, Result};
use crate::graph::{distance_matrix, GraphSpec};
use crate::hmm::{censor, simulate_efforts, simulate_path, LatentPath, ModelParams};
use crate::sampler::{run_chain, AcceptanceRates, PosteriorSamples, PriorSpec, SamplerConfig};
use crate::transition::{Direction, FlowKernel};

pub const MIN_DRAWS: usize = 100;

/// Type-5 quantile of already sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let h = n as f64 * p + 0.5;
    if h <= 1.0 {
        return sorted[0];
    }
    if h >= n as f64 {
        return sorted[n - 1];
    }
    let lo = h.floor();
    let k = lo as usize - 1;
    sorted[k] + (h - lo) * (sorted[k + 1] - sorted[k])
}

fn check_draws(draws: &[f64]) -> Result<()> {
    if draws.len() < MIN_DRAWS {
        return Err(Error::InsufficientDraws {
            needed: MIN_DRAWS,
            got: draws.len(),
        });
    }
    if draws.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("draws contain non-finite values".into()));
    }
    Ok(())
}

/// Equal-tailed interval at `level`.
pub fn credible_interval(draws: &[f64], level: f64) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidInput(format!("level must lie in (0, 1), got {level}")));
    }
    check_draws(draws)?;
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok((quantile_sorted(&sorted, tail), quantile_sorted(&sorted, 1.0 - tail)))
}

/// Effective sample size by Geyer's initial positive sequence. A constant
/// sequence returns `n`; the estimate is capped at `n`.
pub fn effective_sample_size(draws: &[f64]) -> Result<f64> {
    check_draws(draws)?;
    let n = draws.len();
    let nf = n as f64;
    let mean = draws.iter().sum::<f64>() / nf;
    let centered: Vec<f64> = draws.iter().map(|x| x - mean).collect();
    let acov = |lag: usize| -> f64 { centered[..n - lag].iter().zip(&centered[lag..]).map(|(a, b)| a * b).sum::<f64>() / nf };
    let var = acov(0);
    // constant up to rounding
    if var <= 1e-24 * mean * mean || var == 0.0 {
        return Ok(nf);
    }
    let mut tau = -1.0;
    let mut k = 0;
    while 2 * k + 1 < n {
        let pair = (acov(2 * k) + acov(2 * k + 1)) / var;
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        k += 1;
    }
    Ok((nf / tau.max(1.0 / nf)).min(nf))
}

/// Weighted mean latitude per row of `rates`; `None` where a row has no
/// positive weight.
pub fn average_latitude(rates: &DMatrix<f64>, latitudes: &[f64]) -> Result<Vec<Option<f64>>> {
    if rates.ncols() != latitudes.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} rate columns for {} latitudes",
            rates.ncols(),
            latitudes.len()
        )));
    }
    if rates.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(Error::InvalidInput("rates must be nonnegative and finite".into()));
    }
    Ok((0..rates.nrows())
        .map(|i| {
            let total: f64 = rates.row(i).sum();
            (total > 0.0).then(|| rates.row(i).iter().zip(latitudes).map(|(w, l)| w * l).sum::<f64>() / total)
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Flow classification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowThresholds {
    pub p_min: f64,
    pub rho_min: f64,
    pub ratio_min: f64,
}

impl Default for FlowThresholds {
    fn default() -> Self {
        FlowThresholds {
            p_min: 0.9,
            rho_min: 3.0,
            ratio_min: 0.7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowLabel {
    North,
    South,
    None,
}

impl FlowLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            FlowLabel::North => "north",
            FlowLabel::South => "south",
            FlowLabel::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowStep {
    pub label: FlowLabel,
    /// Posterior `P(q = -1)`: flow against the currents, toward the battery.
    pub p_north: f64,
    pub p_south: f64,
    pub rho_mean: f64,
    /// Posterior mean of `delta / (nu + delta)`.
    pub ratio_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowClassification {
    pub thresholds: FlowThresholds,
    pub steps: Vec<FlowStep>,
}

/// Label each time step north, south or none. Battery terminals sit in the
/// north, so `q = -1` moves mass north and `q = +1` south.
pub fn classify_flow(samples: &PosteriorSamples, thresholds: FlowThresholds) -> Result<FlowClassification> {
    let d = samples.n_draws();
    if d == 0 {
        return Err(Error::InsufficientDraws { needed: 1, got: 0 });
    }
    let df = d as f64;
    let steps = (0..samples.n_time)
        .map(|i| {
            let q = samples.q_series(i);
            let p_north = q.iter().filter(|&&x| x == Direction::Negative.as_i8()).count() as f64 / df;
            let p_south = q.iter().filter(|&&x| x == Direction::Positive.as_i8()).count() as f64 / df;
            let rho_mean = samples.rho_series(i).iter().sum::<f64>() / df;
            let ratio_mean = samples
                .nu_series(i)
                .iter()
                .zip(samples.delta_series(i))
                .map(|(nu, delta)| delta / (nu + delta))
                .sum::<f64>()
                / df;
            let aux = rho_mean > thresholds.rho_min && ratio_mean > thresholds.ratio_min;
            let label = if aux && p_north >= thresholds.p_min {
                FlowLabel::North
            } else if aux && p_south >= thresholds.p_min {
                FlowLabel::South
            } else {
                FlowLabel::None
            };
            FlowStep {
                label,
                p_north,
                p_south,
                rho_mean,
                ratio_mean,
            }
        })
        .collect();
    Ok(FlowClassification { thresholds, steps })
}

// ---------------------------------------------------------------------------
// Coverage
// ---------------------------------------------------------------------------

/// Running sums for one parameter block.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CoverageAccum {
    pub cells: usize,
    pub covered: usize,
    pub width_sum: f64,
    pub bias_sum: f64,
    pub sq_err_sum: f64,
}

impl CoverageAccum {
    fn push(&mut self, covered: bool, width: f64, err: f64) {
        self.cells += 1;
        self.covered += covered as usize;
        self.width_sum += width;
        self.bias_sum += err;
        self.sq_err_sum += err * err;
    }

    pub fn coverage(&self) -> f64 {
        self.covered as f64 / self.cells.max(1) as f64
    }
    pub fn width(&self) -> f64 {
        self.width_sum / self.cells.max(1) as f64
    }
    pub fn bias(&self) -> f64 {
        self.bias_sum / self.cells.max(1) as f64
    }
    pub fn rmse(&self) -> f64 {
        (self.sq_err_sum / self.cells.max(1) as f64).sqrt()
    }
}

pub const BLOCKS: [&str; 7] = ["z_observed", "z_censored", "q", "rho", "nu", "delta", "alpha"];

/// Per-block accumulators for one fitted replicate, in `BLOCKS` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateStats {
    pub blocks: Vec<CoverageAccum>,
}

/// Ground truth of one simulated data set.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub path: LatentPath,
    pub params: ModelParams,
    /// `true` where the cell was censored.
    pub mask: DMatrix<bool>,
}

fn interval_stats(draws: &[f64], truth: f64, level: f64, acc: &mut CoverageAccum) -> Result<()> {
    let (lo, hi) = credible_interval(draws, level)?;
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    acc.push(lo <= truth && truth <= hi, hi - lo, mean - truth);
    Ok(())
}

/// Smallest set of directions, by decreasing posterior mass, whose mass
/// reaches `level`.
pub fn q_credible_set(draws: &[i8], level: f64) -> Vec<i8> {
    let n = draws.len().max(1) as f64;
    let mut mass: Vec<(i8, f64)> = Direction::ALL
        .iter()
        .map(|d| (d.as_i8(), draws.iter().filter(|&&q| q == d.as_i8()).count() as f64 / n))
        .collect();
    mass.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut set = Vec::new();
    let mut cum = 0.0;
    for (q, p) in mass {
        set.push(q);
        cum += p;
        if cum >= level - 1e-12 {
            break;
        }
    }
    set
}

/// Coverage, interval width, bias and squared error of every block of one
/// replicate against its truth.
pub fn coverage_stats(samples: &PosteriorSamples, truth: &Truth, level: f64) -> Result<ReplicateStats> {
    let (n_time, n_node) = (samples.n_time, samples.n_node);
    if truth.path.z.shape() != (n_time, n_node)
        || truth.mask.shape() != (n_time, n_node)
        || truth.params.thetas.len() != n_time
    {
        return Err(Error::ShapeMismatch(format!(
            "truth is {:?} with {} steps, draws are {n_time}x{n_node}",
            truth.path.z.shape(),
            truth.params.thetas.len()
        )));
    }
    let mut blocks = vec![CoverageAccum::default(); BLOCKS.len()];
    for i in 0..n_time {
        for j in 0..n_node {
            let slot = if truth.mask[(i, j)] { 1 } else { 0 };
            interval_stats(&samples.z_series(i, j), truth.path.z[(i, j)], level, &mut blocks[slot])?;
        }
        let theta = &truth.params.thetas[i];
        let q = samples.q_series(i);
        if q.len() < MIN_DRAWS {
            return Err(Error::InsufficientDraws {
                needed: MIN_DRAWS,
                got: q.len(),
            });
        }
        let set = q_credible_set(&q, level);
        let q_mean = q.iter().map(|&x| x as f64).sum::<f64>() / q.len() as f64;
        blocks[2].push(set.contains(&theta.q.as_i8()), set.len() as f64, q_mean - theta.q.as_i8() as f64);
        interval_stats(&samples.rho_series(i), theta.rho, level, &mut blocks[3])?;
        interval_stats(&samples.nu_series(i), theta.nu, level, &mut blocks[4])?;
        interval_stats(&samples.delta_series(i), theta.delta, level, &mut blocks[5])?;
    }
    interval_stats(&samples.alpha, truth.params.alpha, level, &mut blocks[6])?;
    Ok(ReplicateStats { blocks })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub parameter: String,
    pub coverage: f64,
    pub width: f64,
    pub bias: f64,
    pub rmse: f64,
    pub cells: usize,
}

/// Study-level summary. Coverage, width and bias pool all cells; RMSE is
/// computed per replicate and then averaged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageTable {
    pub replicates: usize,
    pub rows: Vec<CoverageRow>,
}

impl CoverageTable {
    pub fn from_replicates(stats: &[ReplicateStats]) -> Result<Self> {
        if stats.is_empty() {
            return Err(Error::InvalidInput("no replicates to summarise".into()));
        }
        let rows = BLOCKS
            .iter()
            .enumerate()
            .map(|(b, name)| {
                let mut pooled = CoverageAccum::default();
                let mut rmse = 0.0;
                let mut with_cells = 0;
                for s in stats {
                    let a = &s.blocks[b];
                    pooled.cells += a.cells;
                    pooled.covered += a.covered;
                    pooled.width_sum += a.width_sum;
                    pooled.bias_sum += a.bias_sum;
                    pooled.sq_err_sum += a.sq_err_sum;
                    if a.cells > 0 {
                        rmse += a.rmse();
                        with_cells += 1;
                    }
                }
                CoverageRow {
                    parameter: name.to_string(),
                    coverage: pooled.coverage(),
                    width: pooled.width(),
                    bias: pooled.bias(),
                    rmse: rmse / with_cells.max(1) as f64,
                    cells: pooled.cells,
                }
            })
            .collect();
        Ok(CoverageTable {
            replicates: stats.len(),
            rows,
        })
    }

    pub fn row(&self, parameter: &str) -> Option<&CoverageRow> {
        self.rows.iter().find(|r| r.parameter == parameter)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        for row in &self.rows {
            w.serialize(row).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("{other:?}"),
        },
    }
}

// ---------------------------------------------------------------------------
// Replicate study
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySpec {
    pub replicates: usize,
    pub rows: usize,
    pub cols: usize,
    pub n_time: usize,
    pub effort_rate: f64,
    pub censor_fraction: f64,
    pub level: f64,
    /// Used both to generate data and to fit it.
    pub priors: PriorSpec,
    pub sampler: SamplerConfig,
    pub seed: u64,
}

impl Default for StudySpec {
    fn default() -> Self {
        StudySpec {
            replicates: 20,
            rows: 12,
            cols: 5,
            n_time: 10,
            effort_rate: 0.1,
            censor_fraction: 0.3,
            level: 0.9,
            priors: PriorSpec::simulation_study(),
            sampler: SamplerConfig {
                n_iterations: 15_000,
                burn_in: 5_000,
                ..Default::default()
            },
            seed: 20_170_220,
        }
    }
}

impl StudySpec {
    pub fn validate(&self) -> Result<()> {
        self.priors.validate()?;
        self.sampler.validate()?;
        if self.replicates == 0 || self.n_time == 0 {
            return Err(Error::InvalidConfig("replicates and n_time must be positive".into()));
        }
        if !(self.effort_rate > 0.0) || !(0.0..1.0).contains(&self.censor_fraction) {
            return Err(Error::InvalidConfig("effort_rate must be positive and censor_fraction in [0, 1)".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidConfig("level must lie in (0, 1)".into()));
        }
        if self.sampler.n_draws() < MIN_DRAWS {
            return Err(Error::InvalidConfig(format!("study needs at least {MIN_DRAWS} stored draws per chain")));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form; keys resumable records.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serialises");
        format!("{:x}", Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub spec_hash: String,
    pub replicate: usize,
    pub sampler_seed: u64,
    pub stats: ReplicateStats,
    pub acceptance: AcceptanceRates,
    pub truth_params: ModelParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyResult {
    pub table: CoverageTable,
    /// Sorted by replicate.
    pub records: Vec<ReplicateRecord>,
    /// Replicates still missing after an interrupt.
    pub pending: Vec<usize>,
}

/// Simulate replicate `r` and fit it.
pub fn run_replicate(spec: &StudySpec, kernel: &FlowKernel, r: usize, cancel: Option<&AtomicBool>) -> Result<Option<ReplicateRecord>> {
    let n = kernel.n();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(r as u64);
    let params = spec.priors.sample_params(spec.n_time, &mut rng)?;
    let t = simulate_efforts(spec.n_time, n, spec.effort_rate, &mut rng)?;
    let z0 = spec.priors.z0.resolve(&crate::hmm::ObservationSet::zeros(spec.n_time, n))?;
    let (path, obs) = simulate_path(kernel, &params, &t, &z0, &mut rng)?;
    let censored = censor(&obs, spec.censor_fraction, &mut rng)?;
    let sampler_seed: u64 = rng.random();
    let config = SamplerConfig {
        seed: sampler_seed,
        ..spec.sampler.clone()
    };
    let samples = run_chain(&censored.obs, kernel, &spec.priors, &config, cancel)?;
    if samples.interrupted {
        return Ok(None);
    }
    let truth = Truth {
        path,
        params,
        mask: censored.mask,
    };
    Ok(Some(ReplicateRecord {
        spec_hash: spec.hash(),
        replicate: r,
        sampler_seed,
        stats: coverage_stats(&samples, &truth, spec.level)?,
        acceptance: samples.acceptance,
        truth_params: truth.params,
    }))
}

fn load_records(path: &Path, hash: &str) -> Result<Vec<ReplicateRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        // a torn final line from an interrupted write is dropped
        let Ok(rec) = serde_json::from_str::<ReplicateRecord>(&line) else {
            eprintln!("warning: {}:{}: unreadable record skipped", path.display(), k + 1);
            continue;
        };
        if rec.spec_hash == hash {
            out.push(rec);
        }
    }
    Ok(out)
}

/// Run the coverage study on `workers` threads. With `records` set, each
/// finished replicate is appended there as one JSON line, and replicates
/// already present for the same spec are not rerun.
pub fn replicate_study(
    spec: &StudySpec,
    workers: usize,
    records: Option<&Path>,
    cancel: Option<&AtomicBool>,
) -> Result<StudyResult> {
    spec.validate()?;
    let graph = GraphSpec::lattice(spec.rows, spec.cols)?;
    let solution = CircuitSolution::compute(&graph.augmented()?, 1.0)?;
    let kernel = FlowKernel::new(&split_directions(&solution.c)?, &distance_matrix(&graph.graph)?)?;
    let hash = spec.hash();

    let mut done = match records {
        Some(p) => load_records(p, &hash)?,
        None => Vec::new(),
    };
    let mut seen = HashSet::new();
    done.retain(|r| r.replicate < spec.replicates && seen.insert(r.replicate));
    let todo: Vec<usize> = (0..spec.replicates).filter(|r| !seen.contains(r)).collect();

    let sink = match records {
        Some(p) => Some(Mutex::new(
            OpenOptions::new().create(true).append(true).open(p).map_err(|e| Error::io(p, e))?,
        )),
        None => None,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let fresh: Vec<Option<ReplicateRecord>> = pool.install(|| {
        todo.par_iter()
            .map(|&r| {
                let rec = run_replicate(spec, &kernel, r, cancel)?;
                if let (Some(rec), Some(sink), Some(p)) = (&rec, &sink, records) {
                    let line = serde_json::to_string(rec)?;
                    let mut f = sink.lock().expect("record sink poisoned");
                    writeln!(f, "{line}").and_then(|_| f.flush()).map_err(|e| Error::io(p, e))?;
                }
                Ok(rec)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    done.extend(fresh.into_iter().flatten());
    done.sort_by_key(|r| r.replicate);
    let finished: HashSet<usize> = done.iter().map(|r| r.replicate).collect();
    let pending = (0..spec.replicates).filter(|r| !finished.contains(r)).collect();
    let stats: Vec<ReplicateStats> = done.iter().map(|r| r.stats.clone()).collect();
    let table = if stats.is_empty() {
        CoverageTable {
            replicates: 0,
            rows: Vec::new(),
        }
    } else {
        CoverageTable::from_replicates(&stats)?
    };
    Ok(StudyResult {
        table,
        records: done,
        pending,
    })
}

/// Posterior mean `z` weighted latitude series, used by the field summaries.
pub fn posterior_latitude(samples: &PosteriorSamples, latitudes: &[f64]) -> Result<Vec<Option<f64>>> {
    average_latitude(&samples.z_mean(), latitudes)
}

/// ESS of every scalar block: one entry per time step for `rho`, `nu`,
/// `delta`, the mean over nodes for `z`, and `alpha`.
pub fn ess_table(samples: &PosteriorSamples) -> Result<Vec<(String, usize, f64)>> {
    let mut out = Vec::new();
    for i in 0..samples.n_time {
        let mut z_ess = 0.0;
        for j in 0..samples.n_node {
            z_ess += effective_sample_size(&samples.z_series(i, j))?;
        }
        out.push(("z_mean_over_nodes".to_string(), i, z_ess / samples.n_node.max(1) as f64));
        out.push(("rho".to_string(), i, effective_sample_size(&samples.rho_series(i))?));
        out.push(("nu".to_string(), i, effective_sample_size(&samples.nu_series(i))?));
        out.push(("delta".to_string(), i, effective_sample_size(&samples.delta_series(i))?));
    }
    out.push(("alpha".to_string(), 0, effective_sample_size(&samples.alpha)?));
    Ok(out)
}
