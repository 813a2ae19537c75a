//! Command-line front end.
//!
//! Exit codes: 0 success, 2 usage, 3 data error, 4 numerical failure,
//! 130 interrupted (partial output is kept).

use std::collections::HashSet;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::circuit::{split_directions, CircuitSolution};
use crate::error::{Error, ErrorKind, Result};
use crate::graph::{distance_matrix, lattice_id, GraphSpec};
use crate::hmm::{censor, simulate_efforts, simulate_path, ObservationSet};
use crate::ingest::{
    aggregate_checklists, load_counts, read_checklists, read_draws, read_json, save_counts, save_truth, write_draws, write_json,
    RunManifest,
};
use crate::sampler::{Chain, PriorSpec, SamplerConfig};
use crate::summary::{
    average_latitude, classify_flow, credible_interval, ess_table, replicate_study, FlowThresholds, StudySpec,
};
use crate::transition::{Direction, FlowKernel, TransitionParams};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;
pub const EXIT_INTERRUPTED: i32 = 130;

#[derive(Parser, Debug)]
#[command(name = "flowhmm", version, about = "Circuit-flow hidden Markov models for spatiotemporal counts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GraphArg {
    /// Graph JSON file, or `lattice:RxC` for a lattice with battery on the
    /// top row and ground on the bottom row
    #[arg(long)]
    pub graph: String,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Solve the circuit: voltages, battery currents and the currents matrix
    Currents {
        #[command(flatten)]
        graph: GraphArg,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Battery voltage
        #[arg(long, default_value_t = 1.0)]
        voltage: f64,
    },
    /// Write one transition matrix as CSV (row = destination, column = source)
    Transition {
        #[command(flatten)]
        graph: GraphArg,
        #[arg(long, allow_hyphen_values = true)]
        q: i8,
        #[arg(long)]
        rho: f64,
        #[arg(long)]
        nu: f64,
        #[arg(long)]
        delta: f64,
        /// Output CSV file
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate latent rates and counts from the prior
    Simulate {
        #[command(flatten)]
        graph: GraphArg,
        /// Number of time steps
        #[arg(long, default_value_t = 10)]
        steps: usize,
        /// JSON file with a `priors` object; defaults to the lattice study priors
        #[arg(long)]
        config: Option<PathBuf>,
        /// Rate of the exponential effort distribution
        #[arg(long, default_value_t = 0.1)]
        effort_rate: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output directory (counts.csv, truth.csv, params.json)
        #[arg(long)]
        out: PathBuf,
    },
    /// Zero out a random fraction of cells in a counts file
    Censor {
        #[command(flatten)]
        graph: GraphArg,
        #[arg(long)]
        counts: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        fraction: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output directory (counts.csv, mask.csv)
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the model by MCMC
    Fit {
        #[command(flatten)]
        graph: GraphArg,
        #[arg(long)]
        counts: PathBuf,
        /// JSON with optional `priors` and `sampler` objects
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the sampler seed in the config
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the iteration count; burn-in becomes a third of it
        #[arg(long)]
        iterations: Option<usize>,
        /// Output directory for draws and manifest.json
        #[arg(long)]
        out: PathBuf,
    },
    /// Replicated simulation study with coverage summaries
    Study {
        /// Study spec JSON; defaults to the 20-replicate 12x5 lattice protocol
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        replicates: Option<usize>,
        /// Overrides the iteration count; burn-in becomes a third of it
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Output directory (coverage.csv, replicates.jsonl)
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarise a fit: latitude series, flow labels, ESS and z intervals
    Summarize {
        #[command(flatten)]
        graph: GraphArg,
        /// Directory written by `fit`
        #[arg(long)]
        draws: PathBuf,
        /// Counts file, for the empirical latitude series
        #[arg(long)]
        counts: Option<PathBuf>,
        #[arg(long, default_value_t = 0.9)]
        p_min: f64,
        #[arg(long, default_value_t = 3.0)]
        rho_min: f64,
        #[arg(long, default_value_t = 0.7)]
        ratio_min: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Current map of a lattice with high-resistance cells
    DemoResistance {
        #[arg(long, default_value_t = 24)]
        rows: usize,
        #[arg(long, default_value_t = 12)]
        cols: usize,
        /// Comma-separated cells or rectangles, `R:C` or `R1-R2:C1-C2`, 0-based
        #[arg(long, default_value = "6-9:2-5,14-17:6-9")]
        blocked: String,
        /// Conductance multiplier for edges touching blocked cells
        #[arg(long, default_value_t = 0.01)]
        factor: f64,
        /// Output CSV file
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate a checklist CSV into a weekly counts file
    Aggregate {
        #[command(flatten)]
        graph: GraphArg,
        #[arg(long)]
        checklists: PathBuf,
        #[arg(long)]
        species: String,
        /// First day of week 0, YYYY-MM-DD
        #[arg(long)]
        epoch: String,
        #[arg(long)]
        weeks: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parse, run, and map the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cancel = Arc::new(AtomicBool::new(false));
    {
        let c = cancel.clone();
        // a second registration in the same process fails; the flag is then
        // simply never set
        let _ = ctrlc::set_handler(move || c.store(true, Ordering::SeqCst));
    }
    match run(cli.command, &cancel) {
        Ok(Outcome::Done) => 0,
        Ok(Outcome::Interrupted) => {
            eprintln!("interrupted: partial output written");
            EXIT_INTERRUPTED
        }
        Err(e) => {
            let (kind, code) = match e.kind() {
                ErrorKind::Data => ("data", EXIT_DATA),
                ErrorKind::Numerical => ("numerical", EXIT_NUMERICAL),
            };
            let msg = serde_json::json!({ "error": kind, "message": e.to_string() });
            eprintln!("{msg}");
            code
        }
    }
}

pub enum Outcome {
    Done,
    Interrupted,
}

fn kernel_for(spec: &GraphSpec) -> Result<(CircuitSolution, FlowKernel)> {
    let sol = CircuitSolution::compute(&spec.augmented()?, 1.0)?;
    let kernel = FlowKernel::new(&split_directions(&sol.c)?, &distance_matrix(&spec.graph)?)?;
    Ok((sol, kernel))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(d)?;
    }
    csv::Writer::from_path(path).map_err(|e| crate::summary::csv_err(path, e))
}

fn write_rows<S: Serialize>(path: &Path, rows: impl IntoIterator<Item = S>) -> Result<()> {
    let mut w = csv_writer(path)?;
    for r in rows {
        w.serialize(r).map_err(|e| crate::summary::csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    #[serde(default = "PriorSpec::field_default")]
    pub priors: PriorSpec,
    #[serde(default)]
    pub sampler: SamplerConfig,
}

#[derive(Debug, Deserialize)]
struct PriorsOnly {
    #[serde(default = "PriorSpec::simulation_study")]
    priors: PriorSpec,
}

fn override_iterations(cfg: &mut SamplerConfig, iterations: Option<usize>) {
    if let Some(n) = iterations {
        cfg.n_iterations = n;
        cfg.burn_in = n / 3;
    }
}

fn hash_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    format!("{:x}", h.finalize())
}

pub fn run(command: Command, cancel: &AtomicBool) -> Result<Outcome> {
    match command {
        Command::Currents { graph, out, voltage } => {
            let spec = GraphSpec::from_arg(&graph.graph)?;
            let ag = spec.augmented()?;
            let sol = CircuitSolution::compute(&ag, voltage)?;
            create_dir(&out)?;
            let ids = spec.graph.node_ids();
            let battery = sol.battery_currents();
            let through = sol.node_throughput(&ag);
            #[derive(Serialize)]
            struct NodeRow<'a> {
                node_id: &'a str,
                voltage: f64,
                battery_current: f64,
                throughput: f64,
            }
            write_rows(
                &out.join("nodes.csv"),
                (0..ids.len()).map(|j| NodeRow {
                    node_id: &ids[j],
                    voltage: sol.v[j],
                    battery_current: battery[j],
                    throughput: through[j],
                }),
            )?;
            #[derive(Serialize)]
            struct CurrentRow<'a> {
                from: &'a str,
                to: &'a str,
                current: f64,
                resistance: f64,
            }
            let n = ids.len();
            let rows = (0..n).flat_map(|j| (0..n).map(move |k| (j, k))).filter(|&(j, k)| sol.c[(j, k)] > 0.0);
            write_rows(
                &out.join("currents.csv"),
                rows.map(|(j, k)| CurrentRow {
                    from: &ids[j],
                    to: &ids[k],
                    current: sol.c[(j, k)],
                    resistance: sol.omega[(j, k)],
                }),
            )?;
            eprintln!("kirchhoff residual {:.3e}", sol.kirchhoff_residual());
            Ok(Outcome::Done)
        }
        Command::Transition {
            graph,
            q,
            rho,
            nu,
            delta,
            out,
        } => {
            let spec = GraphSpec::from_arg(&graph.graph)?;
            let (_, kernel) = kernel_for(&spec)?;
            let q = Direction::try_from(q).map_err(|e| Error::InvalidInput(e.to_string()))?;
            let m = kernel.transition(&TransitionParams::new(q, rho, nu, delta)?);
            write_matrix(&out, spec.graph.node_ids(), &m)?;
            Ok(Outcome::Done)
        }
        Command::Simulate {
            graph,
            steps,
            config,
            effort_rate,
            seed,
            out,
        } => {
            let spec = GraphSpec::from_arg(&graph.graph)?;
            let priors = match config {
                Some(p) => read_json::<PriorsOnly>(&p)?.priors,
                None => PriorSpec::simulation_study(),
            };
            let (_, kernel) = kernel_for(&spec)?;
            let n = spec.graph.n();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = priors.sample_params(steps, &mut rng)?;
            let t = simulate_efforts(steps, n, effort_rate, &mut rng)?;
            let z0 = priors.z0.resolve(&ObservationSet::zeros(steps, n))?;
            let (path, obs) = simulate_path(&kernel, &params, &t, &z0, &mut rng)?;
            create_dir(&out)?;
            let ids = spec.graph.node_ids();
            save_counts(&obs, ids, &out.join("counts.csv"))?;
            save_truth(&path.z, ids, &out.join("truth.csv"))?;
            write_json(&params, &out.join("params.json"))?;
            Ok(Outcome::Done)
        }
        Command::Censor {
            graph,
            counts,
            fraction,
            seed,
            out,
        } => {
            let spec = GraphSpec::from_arg(&graph.graph)?;
            let ids = spec.graph.node_ids();
            let obs = load_counts(&counts, ids, None)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = censor(&obs, fraction, &mut rng)?;
            create_dir(&out)?;
            save_counts(&c.obs, ids, &out.join("counts.csv"))?;
            #[derive(Serialize)]
            struct MaskRow<'a> {
                time_index: usize,
                node_id: &'a str,
                censored: bool,
            }
            write_rows(
                &out.join("mask.csv"),
                (0..c.obs.n_time()).flat_map(|i| {
                    let mask = &c.mask;
                    ids.iter().enumerate().map(move |(j, id)| MaskRow {
                        time_index: i,
                        node_id: id,
                        censored: mask[(i, j)],
                    })
                }),
            )?;
            Ok(Outcome::Done)
        }
        Command::Fit {
            graph,
            counts,
            config,
            seed,
            iterations,
            out,
        } => fit(&graph.graph, &counts, config.as_deref(), seed, iterations, &out, cancel),
        Command::Study {
            config,
            replicates,
            iterations,
            seed,
            workers,
            out,
        } => {
            let mut spec: StudySpec = match config {
                Some(p) => read_json(&p)?,
                None => StudySpec::default(),
            };
            if let Some(r) = replicates {
                spec.replicates = r;
            }
            if let Some(s) = seed {
                spec.seed = s;
            }
            override_iterations(&mut spec.sampler, iterations);
            create_dir(&out)?;
            let records = out.join("replicates.jsonl");
            eprintln!("study {}: {} replicates on {} workers", &spec.hash()[..12], spec.replicates, workers);
            let result = replicate_study(&spec, workers, Some(&records), Some(cancel))?;
            if !result.table.rows.is_empty() {
                result.table.write_csv(&out.join("coverage.csv"))?;
            }
            write_json(&spec, &out.join("study.json"))?;
            if result.pending.is_empty() {
                Ok(Outcome::Done)
            } else {
                Ok(Outcome::Interrupted)
            }
        }
        Command::Summarize {
            graph,
            draws,
            counts,
            p_min,
            rho_min,
            ratio_min,
            out,
        } => {
            let spec = GraphSpec::from_arg(&graph.graph)?;
            let obs = match counts {
                Some(p) => Some(load_counts(&p, spec.graph.node_ids(), None)?),
                None => None,
            };
            summarize(
                &spec,
                &draws,
                obs.as_ref(),
                FlowThresholds {
                    p_min,
                    rho_min,
                    ratio_min,
                },
                &out,
            )?;
            Ok(Outcome::Done)
        }
        Command::DemoResistance {
            rows,
            cols,
            blocked,
            factor,
            out,
        } => {
            let cells = parse_cells(&blocked, rows, cols)?;
            let demo = demo_resistance(rows, cols, &cells, factor)?;
            demo.write_csv(&out)?;
            Ok(Outcome::Done)
        }
        Command::Aggregate {
            graph,
            checklists,
            species,
            epoch,
            weeks,
            out,
        } => {
            let spec = GraphSpec::from_arg(&graph.graph)?;
            let epoch = NaiveDate::parse_from_str(&epoch, "%Y-%m-%d")
                .map_err(|e| Error::InvalidInput(format!("epoch `{epoch}`: {e}")))?;
            let records = read_checklists(&checklists)?;
            let agg = aggregate_checklists(records, &species, epoch, weeks, spec.graph.node_ids())?;
            if agg.skipped_out_of_range > 0 {
                eprintln!("warning: {} checklists outside the date range were skipped", agg.skipped_out_of_range);
            }
            save_counts(&agg.obs, spec.graph.node_ids(), &out)?;
            Ok(Outcome::Done)
        }
    }
}

fn write_matrix(path: &Path, ids: &[String], m: &DMatrix<f64>) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["node_id".to_string()];
    header.extend(ids.iter().cloned());
    let err = |e| crate::summary::csv_err(path, e);
    w.write_record(&header).map_err(err)?;
    for (j, id) in ids.iter().enumerate() {
        let mut rec = vec![id.clone()];
        rec.extend(m.row(j).iter().map(|x| format!("{x:?}")));
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Fit a counts file and write draws plus manifest into `out`. A complete
/// run with the same inputs and configuration is not repeated.
pub fn fit(
    graph: &str,
    counts: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
    iterations: Option<usize>,
    out: &Path,
    cancel: &AtomicBool,
) -> Result<Outcome> {
    let spec = GraphSpec::from_arg(graph)?;
    let ids = spec.graph.node_ids().to_vec();
    let obs = load_counts(counts, &ids, None)?;
    let mut cfg: FitConfig = match config {
        Some(p) => read_json(p)?,
        None => FitConfig {
            priors: PriorSpec::field_default(),
            sampler: SamplerConfig::default(),
        },
    };
    if let Some(s) = seed {
        cfg.sampler.seed = s;
    }
    override_iterations(&mut cfg.sampler, iterations);
    cfg.priors.validate()?;
    cfg.sampler.validate()?;

    let counts_bytes = std::fs::read(counts).map_err(|e| Error::io(counts, e))?;
    let graph_json = serde_json::to_vec(&spec.to_file())?;
    let cfg_json = serde_json::to_vec(&cfg)?;
    let config_hash = hash_hex(&[&cfg_json, &graph_json, &counts_bytes]);

    let manifest_path = out.join("manifest.json");
    if manifest_path.exists() {
        if let Ok(old) = read_json::<RunManifest>(&manifest_path) {
            if old.config_hash == config_hash && old.is_complete() {
                eprintln!("{} is up to date", out.display());
                return Ok(Outcome::Done);
            }
        }
    }
    let (_, kernel) = kernel_for(&spec)?;
    let total = cfg.sampler.n_iterations;
    let mut heartbeat = |it: usize| {
        eprintln!("iteration {it}/{total}");
        let _ = std::io::stderr().flush();
    };
    let samples = Chain::new(&kernel, &obs, &cfg.priors, &cfg.sampler)?.run_with_progress(Some(cancel), &mut heartbeat)?;
    let manifest = RunManifest {
        seed: cfg.sampler.seed,
        config_hash,
        node_ids: ids,
        n_time: samples.n_time,
        n_draws: samples.n_draws(),
        completed_iterations: samples.completed_iterations,
        n_iterations: total,
        interrupted: samples.interrupted,
        acceptance: samples.acceptance.clone(),
        adaptation: samples.adaptation.clone(),
    };
    write_draws(out, &samples, &manifest)?;
    write_json(&cfg, &out.join("config.json"))?;
    Ok(if samples.interrupted {
        Outcome::Interrupted
    } else {
        Outcome::Done
    })
}

/// Write `latitude.csv`, `flow.csv`, `ess.csv` and `z_summary.csv`.
pub fn summarize(spec: &GraphSpec, draws: &Path, obs: Option<&ObservationSet>, thresholds: FlowThresholds, out: &Path) -> Result<()> {
    let (samples, manifest) = read_draws(draws)?;
    if manifest.node_ids != spec.graph.node_ids() {
        return Err(Error::ShapeMismatch("draws were fitted on a different graph".into()));
    }
    create_dir(out)?;
    let lat = spec.graph.latitudes();
    let posterior = average_latitude(&samples.z_mean(), &lat)?;
    let empirical = match obs {
        Some(o) => {
            if o.n_time() != samples.n_time {
                return Err(Error::ShapeMismatch(format!("counts have {} steps, draws {}", o.n_time(), samples.n_time)));
            }
            let rates = DMatrix::from_fn(o.n_time(), o.n_node(), |i, j| {
                if o.t[(i, j)] > 0.0 {
                    o.y[(i, j)] as f64 / o.t[(i, j)]
                } else {
                    0.0
                }
            });
            average_latitude(&rates, &lat)?
        }
        None => vec![None; samples.n_time],
    };
    #[derive(Serialize)]
    struct LatRow {
        time_index: usize,
        posterior_latitude: Option<f64>,
        empirical_latitude: Option<f64>,
    }
    write_rows(
        &out.join("latitude.csv"),
        (0..samples.n_time).map(|i| LatRow {
            time_index: i,
            posterior_latitude: posterior[i],
            empirical_latitude: empirical[i],
        }),
    )?;

    let flow = classify_flow(&samples, thresholds)?;
    #[derive(Serialize)]
    struct FlowRow {
        time_index: usize,
        label: &'static str,
        p_north: f64,
        p_south: f64,
        rho_mean: f64,
        ratio_mean: f64,
    }
    write_rows(
        &out.join("flow.csv"),
        flow.steps.iter().enumerate().map(|(i, s)| FlowRow {
            time_index: i,
            label: s.label.as_str(),
            p_north: s.p_north,
            p_south: s.p_south,
            rho_mean: s.rho_mean,
            ratio_mean: s.ratio_mean,
        }),
    )?;

    #[derive(Serialize)]
    struct EssRow {
        parameter: String,
        time_index: usize,
        ess: f64,
    }
    write_rows(
        &out.join("ess.csv"),
        ess_table(&samples)?.into_iter().map(|(parameter, time_index, ess)| EssRow {
            parameter,
            time_index,
            ess,
        }),
    )?;

    #[derive(Serialize)]
    struct ZRow<'a> {
        time_index: usize,
        node_id: &'a str,
        mean: f64,
        lo90: f64,
        hi90: f64,
    }
    let mean = samples.z_mean();
    let mut rows = Vec::with_capacity(samples.n_time * samples.n_node);
    for i in 0..samples.n_time {
        for (j, id) in manifest.node_ids.iter().enumerate() {
            let (lo, hi) = credible_interval(&samples.z_series(i, j), 0.9)?;
            rows.push(ZRow {
                time_index: i,
                node_id: id,
                mean: mean[(i, j)],
                lo90: lo,
                hi90: hi,
            });
        }
    }
    write_rows(&out.join("z_summary.csv"), rows)
}

// ---------------------------------------------------------------------------
// High-resistance demo
// ---------------------------------------------------------------------------

/// Parse `R:C` and `R1-R2:C1-C2` items separated by commas. An empty
/// string means no blocked cells.
pub fn parse_cells(spec: &str, rows: usize, cols: usize) -> Result<Vec<(usize, usize)>> {
    let range = |s: &str, limit: usize| -> Result<(usize, usize)> {
        let bad = || Error::InvalidInput(format!("bad cell range `{s}`"));
        let (a, b) = match s.split_once('-') {
            Some((a, b)) => (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?),
            None => {
                let v = s.trim().parse().map_err(|_| bad())?;
                (v, v)
            }
        };
        if a > b || b >= limit {
            return Err(Error::InvalidInput(format!("cell range `{s}` outside 0..{limit}")));
        }
        Ok((a, b))
    };
    let mut out = Vec::new();
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (r, c) = item
            .split_once(':')
            .ok_or_else(|| Error::InvalidInput(format!("cell `{item}` must look like R:C")))?;
        let (r0, r1) = range(r, rows)?;
        let (c0, c1) = range(c, cols)?;
        for row in r0..=r1 {
            for col in c0..=c1 {
                if !out.contains(&(row, col)) {
                    out.push((row, col));
                }
            }
        }
    }
    Ok(out)
}

/// Per-cell results of the high-resistance demo, `rows x cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoResult {
    pub blocked: DMatrix<bool>,
    pub voltage: DMatrix<f64>,
    /// Effective current relative to the battery, `(v* - v_j) / Omega_jb`.
    pub battery_current: DMatrix<f64>,
    /// Half the absolute edge current incident on the cell.
    pub throughput: DMatrix<f64>,
}

/// Lattice with battery on the top row and ground on the bottom row, edges
/// touching `blocked` cells scaled by `factor`.
pub fn demo_resistance(rows: usize, cols: usize, blocked: &[(usize, usize)], factor: f64) -> Result<DemoResult> {
    let base = GraphSpec::lattice(rows, cols)?;
    let mut set = HashSet::new();
    let mut mask = DMatrix::from_element(rows, cols, false);
    for &(r, c) in blocked {
        if r >= rows || c >= cols {
            return Err(Error::InvalidInput(format!("blocked cell ({r}, {c}) outside {rows}x{cols}")));
        }
        set.insert(base.graph.index_of(&lattice_id(r, c))?);
        mask[(r, c)] = true;
    }
    let spec = GraphSpec {
        graph: base.graph.scale_conductances(&set, factor)?,
        ..base
    };
    let ag = spec.augmented()?;
    let sol = CircuitSolution::compute(&ag, 1.0)?;
    let bc: DVector<f64> = sol.battery_currents();
    let tp = sol.node_throughput(&ag);
    let at = |v: &DVector<f64>| -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m[(r, c)] = v[spec.graph.index_of(&lattice_id(r, c))?];
            }
        }
        Ok(m)
    };
    Ok(DemoResult {
        blocked: mask,
        voltage: at(&sol.base_voltages())?,
        battery_current: at(&bc)?,
        throughput: at(&tp)?,
    })
}

impl DemoResult {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Row {
            row: usize,
            col: usize,
            blocked: bool,
            voltage: f64,
            battery_current: f64,
            throughput: f64,
        }
        let (rows, cols) = self.blocked.shape();
        write_rows(
            path,
            (0..rows).flat_map(|r| {
                (0..cols).map(move |c| Row {
                    row: r,
                    col: c,
                    blocked: self.blocked[(r, c)],
                    voltage: self.voltage[(r, c)],
                    battery_current: self.battery_current[(r, c)],
                    throughput: self.throughput[(r, c)],
                })
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_specs() {
        assert_eq!(parse_cells("1:2", 4, 4).unwrap(), vec![(1, 2)]);
        assert_eq!(parse_cells("0-1:2-3", 4, 4).unwrap().len(), 4);
        assert!(parse_cells("", 4, 4).unwrap().is_empty());
        assert!(parse_cells("5:1", 4, 4).is_err());
        assert!(parse_cells("1", 4, 4).is_err());
        assert!(parse_cells("2-1:0", 4, 4).is_err());
    }

    #[test]
    fn unit_factor_matches_plain_lattice() {
        let plain = demo_resistance(6, 4, &[], 0.01).unwrap();
        let unit = demo_resistance(6, 4, &[(2, 1), (3, 1)], 1.0).unwrap();
        assert!((plain.throughput.clone() - unit.throughput).abs().max() < 1e-12);
        assert!((plain.battery_current - unit.battery_current).abs().max() < 1e-12);
    }

    #[test]
    fn blocked_cells_carry_less() {
        let cells = parse_cells("3-5:2", 10, 6).unwrap();
        let d = demo_resistance(10, 6, &cells, 0.01).unwrap();
        for &(r, c) in &cells {
            for peer in (0..6).filter(|&p| p != c) {
                assert!(d.throughput[(r, c)] < d.throughput[(r, peer)]);
            }
        }
    }
}
