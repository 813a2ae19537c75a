//! File formats and checklist aggregation.
//!
//! Counts CSV: `time_index,node_id,count,effort_hours`, 0-based time index,
//! absent cells read as zero. Checklist CSV:
//! `node_id,date,species,count,effort_hours` with ISO dates. Draws are
//! written as one gzip CSV per parameter block, one row per stored draw.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::ObservationSet;
use crate::sampler::{AcceptanceRates, AdaptationTrace, PosteriorSamples};
use crate::summary::csv_err;

#[derive(Debug, Clone, PartialEq)]
pub struct ChecklistRecord {
    pub node_id: String,
    pub date: NaiveDate,
    pub species: String,
    pub count: u64,
    pub effort_hours: f64,
}

#[derive(Deserialize)]
struct ChecklistRow {
    node_id: String,
    date: String,
    species: String,
    count: u64,
    effort_hours: f64,
}

fn parse_error(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn reader(path: &Path) -> Result<csv::Reader<Box<dyn Read>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let inner: Box<dyn Read> = if path.extension().is_some_and(|e| e == "gz") {
        Box::new(GzDecoder::new(BufReader::new(file)))
    } else {
        Box::new(BufReader::new(file))
    };
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(inner))
}

fn require_headers<R: Read>(rdr: &mut csv::Reader<R>, path: &Path, want: &[&str]) -> Result<()> {
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    for w in want {
        if !headers.iter().any(|h| h == *w) {
            return Err(parse_error(path, 1, format!("missing column `{w}`")));
        }
    }
    Ok(())
}

pub fn read_checklists(path: &Path) -> Result<Vec<ChecklistRecord>> {
    let mut rdr = reader(path)?;
    require_headers(&mut rdr, path, &["node_id", "date", "species", "count", "effort_hours"])?;
    let mut out = Vec::new();
    for row in rdr.deserialize::<ChecklistRow>() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let line = out.len() as u64 + 2;
        let date = NaiveDate::parse_from_str(&row.date, "%Y-%m-%d")
            .map_err(|e| parse_error(path, line, format!("bad date `{}`: {e}", row.date)))?;
        if !(row.effort_hours > 0.0) || !row.effort_hours.is_finite() {
            return Err(parse_error(path, line, format!("effort_hours must be positive, got {}", row.effort_hours)));
        }
        out.push(ChecklistRecord {
            node_id: row.node_id,
            date,
            species: row.species,
            count: row.count,
            effort_hours: row.effort_hours,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregation {
    pub obs: ObservationSet,
    /// Records dated outside `[epoch, epoch + 7 n_weeks)`.
    pub skipped_out_of_range: usize,
}

/// Week x node counts of `species` and total effort of all checklists.
/// Weeks are consecutive 7-day blocks starting at `epoch`.
pub fn aggregate_checklists<I>(records: I, species: &str, epoch: NaiveDate, n_weeks: usize, node_ids: &[String]) -> Result<Aggregation>
where
    I: IntoIterator<Item = ChecklistRecord>,
{
    let index: HashMap<&str, usize> = node_ids.iter().enumerate().map(|(k, id)| (id.as_str(), k)).collect();
    let mut y = DMatrix::<u64>::zeros(n_weeks, node_ids.len());
    let mut t = DMatrix::<f64>::zeros(n_weeks, node_ids.len());
    let mut skipped = 0;
    for r in records {
        let j = *index.get(r.node_id.as_str()).ok_or_else(|| Error::UnknownNode(r.node_id.clone()))?;
        if !(r.effort_hours > 0.0) || !r.effort_hours.is_finite() {
            return Err(Error::InvalidInput(format!("effort_hours must be positive, got {}", r.effort_hours)));
        }
        let days = (r.date - epoch).num_days();
        if days < 0 || days as usize >= 7 * n_weeks {
            skipped += 1;
            continue;
        }
        let i = days as usize / 7;
        t[(i, j)] += r.effort_hours;
        if r.species == species {
            y[(i, j)] += r.count;
        }
    }
    Ok(Aggregation {
        obs: ObservationSet::new(y, t)?,
        skipped_out_of_range: skipped,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CountRow {
    time_index: usize,
    node_id: String,
    count: u64,
    effort_hours: f64,
}

/// Read a counts file onto the node order of `node_ids`. With `n_time`
/// unset the number of steps is one past the largest time index. Every
/// node needs at least one row; absent cells are unobserved.
pub fn load_counts(path: &Path, node_ids: &[String], n_time: Option<usize>) -> Result<ObservationSet> {
    let index: HashMap<&str, usize> = node_ids.iter().enumerate().map(|(k, id)| (id.as_str(), k)).collect();
    let mut rdr = reader(path)?;
    require_headers(&mut rdr, path, &["time_index", "node_id", "count", "effort_hours"])?;
    let mut rows = Vec::new();
    for (k, row) in rdr.deserialize::<CountRow>().enumerate() {
        let row = row.map_err(|e| csv_err(path, e))?;
        rows.push((k as u64 + 2, row));
    }
    let steps = n_time.unwrap_or_else(|| rows.iter().map(|(_, r)| r.time_index + 1).max().unwrap_or(0));
    let mut y = DMatrix::<u64>::zeros(steps, node_ids.len());
    let mut t = DMatrix::<f64>::zeros(steps, node_ids.len());
    let mut seen = HashSet::new();
    for (line, r) in rows {
        let j = *index.get(r.node_id.as_str()).ok_or_else(|| Error::UnknownNode(r.node_id.clone()))?;
        if r.time_index >= steps {
            return Err(parse_error(path, line, format!("time_index {} beyond {steps} steps", r.time_index)));
        }
        if !seen.insert((r.time_index, j)) {
            return Err(parse_error(path, line, format!("duplicate cell ({}, {})", r.time_index, r.node_id)));
        }
        if !(r.effort_hours >= 0.0) || !r.effort_hours.is_finite() {
            return Err(Error::InvariantViolation(format!("line {line}: effort {}", r.effort_hours)));
        }
        if r.effort_hours == 0.0 && r.count > 0 {
            return Err(Error::InvariantViolation(format!("line {line}: count {} with zero effort", r.count)));
        }
        y[(r.time_index, j)] = r.count;
        t[(r.time_index, j)] = r.effort_hours;
    }
    // a graph node the file never mentions means the file belongs to another graph
    let covered: HashSet<usize> = seen.iter().map(|&(_, j)| j).collect();
    if let Some(missing) = node_ids.iter().enumerate().find(|(j, _)| !covered.contains(j)) {
        return Err(Error::ShapeMismatch(format!(
            "counts cover {} of {} graph nodes; no rows for {:?}",
            covered.len(),
            node_ids.len(),
            missing.1
        )));
    }
    ObservationSet::new(y, t)
}

fn writer(path: &Path) -> Result<csv::Writer<Box<dyn Write>>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    let inner: Box<dyn Write> = if path.extension().is_some_and(|e| e == "gz") {
        // fixed header fields keep the bytes reproducible
        Box::new(GzEncoder::new(file, Compression::default()))
    } else {
        Box::new(file)
    };
    Ok(csv::Writer::from_writer(inner))
}

fn finish(w: csv::Writer<Box<dyn Write>>, path: &Path) -> Result<()> {
    let mut inner = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    inner.flush().map_err(|e| Error::io(path, e))
}

/// Write every cell, zeros included.
pub fn save_counts(obs: &ObservationSet, node_ids: &[String], path: &Path) -> Result<()> {
    if node_ids.len() != obs.n_node() {
        return Err(Error::ShapeMismatch(format!("{} node ids for {} columns", node_ids.len(), obs.n_node())));
    }
    let mut w = writer(path)?;
    for i in 0..obs.n_time() {
        for (j, id) in node_ids.iter().enumerate() {
            w.serialize(CountRow {
                time_index: i,
                node_id: id.clone(),
                count: obs.y[(i, j)],
                effort_hours: obs.t[(i, j)],
            })
            .map_err(|e| csv_err(path, e))?;
        }
    }
    finish(w, path)
}

#[derive(Debug, Serialize, Deserialize)]
struct TruthRow {
    time_index: usize,
    node_id: String,
    z_true: f64,
}

pub fn save_truth(z: &DMatrix<f64>, node_ids: &[String], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    for i in 0..z.nrows() {
        for (j, id) in node_ids.iter().enumerate() {
            w.serialize(TruthRow {
                time_index: i,
                node_id: id.clone(),
                z_true: z[(i, j)],
            })
            .map_err(|e| csv_err(path, e))?;
        }
    }
    finish(w, path)
}

pub fn load_truth(path: &Path, node_ids: &[String]) -> Result<DMatrix<f64>> {
    let index: HashMap<&str, usize> = node_ids.iter().enumerate().map(|(k, id)| (id.as_str(), k)).collect();
    let mut rdr = reader(path)?;
    require_headers(&mut rdr, path, &["time_index", "node_id", "z_true"])?;
    let rows: Vec<TruthRow> = rdr
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| csv_err(path, e))?;
    let steps = rows.iter().map(|r| r.time_index + 1).max().unwrap_or(0);
    let mut z = DMatrix::from_element(steps, node_ids.len(), f64::NAN);
    for r in rows {
        let j = *index.get(r.node_id.as_str()).ok_or_else(|| Error::UnknownNode(r.node_id.clone()))?;
        z[(r.time_index, j)] = r.z_true;
    }
    if z.iter().any(|v| v.is_nan()) {
        return Err(parse_error(path, 0, "truth file does not cover every cell"));
    }
    Ok(z)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&s)?)
}

// ---------------------------------------------------------------------------
// Draws
// ---------------------------------------------------------------------------

/// Run metadata written next to the draw files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub config_hash: String,
    pub node_ids: Vec<String>,
    pub n_time: usize,
    pub n_draws: usize,
    pub completed_iterations: usize,
    pub n_iterations: usize,
    pub interrupted: bool,
    pub acceptance: AcceptanceRates,
    pub adaptation: AdaptationTrace,
}

impl RunManifest {
    pub fn is_complete(&self) -> bool {
        !self.interrupted && self.completed_iterations == self.n_iterations
    }
}

pub const DRAW_FILES: [&str; 6] = ["z.csv.gz", "q.csv.gz", "rho.csv.gz", "nu.csv.gz", "delta.csv.gz", "alpha.csv.gz"];

fn write_block<F>(path: &Path, header: Vec<String>, samples: &PosteriorSamples, row: F) -> Result<()>
where
    F: Fn(usize) -> Vec<String>,
{
    let mut w = writer(path)?;
    let mut h = vec!["iteration".to_string()];
    h.extend(header);
    w.write_record(&h).map_err(|e| csv_err(path, e))?;
    for d in 0..samples.n_draws() {
        let mut rec = vec![samples.iterations[d].to_string()];
        rec.extend(row(d));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    finish(w, path)
}

fn fmt(x: f64) -> String {
    // shortest representation that parses back to the same value
    format!("{x:?}")
}

/// Write the six draw files and `manifest.json` into `dir`.
pub fn write_draws(dir: &Path, samples: &PosteriorSamples, manifest: &RunManifest) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (nt, nn) = (samples.n_time, samples.n_node);
    if manifest.node_ids.len() != nn {
        return Err(Error::ShapeMismatch(format!("{} node ids for {nn} nodes", manifest.node_ids.len())));
    }
    let steps: Vec<String> = (0..nt).map(|i| format!("t{i}")).collect();
    let cells: Vec<String> = (0..nt)
        .flat_map(|i| manifest.node_ids.iter().map(move |id| format!("t{i}:{id}")))
        .collect();
    let per_cell = nt * nn;
    write_block(&dir.join(DRAW_FILES[0]), cells, samples, |d| {
        samples.z[d * per_cell..(d + 1) * per_cell].iter().map(|&x| fmt(x)).collect()
    })?;
    write_block(&dir.join(DRAW_FILES[1]), steps.clone(), samples, |d| {
        samples.q[d * nt..(d + 1) * nt].iter().map(|q| q.to_string()).collect()
    })?;
    for (name, v) in [(DRAW_FILES[2], &samples.rho), (DRAW_FILES[3], &samples.nu), (DRAW_FILES[4], &samples.delta)] {
        write_block(&dir.join(name), steps.clone(), samples, |d| v[d * nt..(d + 1) * nt].iter().map(|&x| fmt(x)).collect())?;
    }
    write_block(&dir.join(DRAW_FILES[5]), vec!["alpha".into()], samples, |d| vec![fmt(samples.alpha[d])])?;
    write_json(manifest, &dir.join("manifest.json"))
}

fn read_block(path: &Path, width: usize) -> Result<(Vec<usize>, Vec<String>)> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.len() != width + 1 || &headers[0] != "iteration" {
        return Err(parse_error(path, 1, format!("expected iteration plus {width} columns, got {}", headers.len())));
    }
    let mut iterations = Vec::new();
    let mut values = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = k as u64 + 2;
        iterations.push(rec[0].parse().map_err(|e| parse_error(path, line, format!("{e}")))?);
        values.extend(rec.iter().skip(1).map(str::to_string));
    }
    Ok((iterations, values))
}

fn parse_all<T: std::str::FromStr>(path: &Path, values: Vec<String>) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    values
        .into_iter()
        .map(|v| v.parse::<T>().map_err(|e| parse_error(path, 0, format!("`{v}`: {e}"))))
        .collect()
}

/// Read back a directory produced by [`write_draws`].
pub fn read_draws(dir: &Path) -> Result<(PosteriorSamples, RunManifest)> {
    let manifest: RunManifest = read_json(&dir.join("manifest.json"))?;
    let (nt, nn) = (manifest.n_time, manifest.node_ids.len());
    let path = |k: usize| -> PathBuf { dir.join(DRAW_FILES[k]) };
    let (iterations, z) = read_block(&path(0), nt * nn)?;
    let z = parse_all::<f64>(&path(0), z)?;
    let mut blocks = Vec::new();
    for k in 1..6 {
        let width = if k == 5 { 1 } else { nt };
        let (its, v) = read_block(&path(k), width)?;
        if its != iterations {
            return Err(parse_error(&path(k), 0, "iterations differ from z.csv.gz"));
        }
        blocks.push(v);
    }
    let mut blocks = blocks.into_iter();
    let q = parse_all::<i8>(&path(1), blocks.next().unwrap())?;
    if q.iter().any(|q| !(-1..=1).contains(q)) {
        return Err(parse_error(&path(1), 0, "q draws must lie in {-1, 0, 1}"));
    }
    let rho = parse_all::<f64>(&path(2), blocks.next().unwrap())?;
    let nu = parse_all::<f64>(&path(3), blocks.next().unwrap())?;
    let delta = parse_all::<f64>(&path(4), blocks.next().unwrap())?;
    let alpha = parse_all::<f64>(&path(5), blocks.next().unwrap())?;
    let samples = PosteriorSamples {
        n_time: nt,
        n_node: nn,
        iterations,
        z,
        q,
        rho,
        nu,
        delta,
        alpha,
        acceptance: manifest.acceptance.clone(),
        adaptation: manifest.adaptation.clone(),
        completed_iterations: manifest.completed_iterations,
        interrupted: manifest.interrupted,
    };
    Ok((samples, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|k| format!("n{k}")).collect()
    }

    fn rec(node: &str, date: &str, species: &str, count: u64, effort: f64) -> ChecklistRecord {
        ChecklistRecord {
            node_id: node.into(),
            date: NaiveDate::parse_from_str(date, "%Y-%m-%d").unwrap(),
            species: species.into(),
            count,
            effort_hours: effort,
        }
    }

    #[test]
    fn aggregation_examples() {
        let epoch = NaiveDate::from_ymd_opt(2017, 2, 20).unwrap();
        let nodes = ids(2);
        let records = vec![
            rec("n0", "2017-02-20", "oriole", 2, 1.0),
            rec("n0", "2017-02-26", "oriole", 3, 0.5),
            rec("n1", "2017-02-27", "jay", 4, 2.0),
            rec("n1", "2018-01-01", "oriole", 4, 2.0),
        ];
        let agg = aggregate_checklists(records.clone(), "oriole", epoch, 2, &nodes).unwrap();
        assert_eq!(agg.obs.y[(0, 0)], 5);
        assert_eq!(agg.obs.t[(0, 0)], 1.5);
        assert_eq!(agg.obs.y[(1, 1)], 0);
        assert_eq!(agg.obs.t[(1, 1)], 2.0);
        assert_eq!(agg.skipped_out_of_range, 1);
        let mut rev = records;
        rev.reverse();
        assert_eq!(aggregate_checklists(rev, "oriole", epoch, 2, &nodes).unwrap(), agg);
        let empty = aggregate_checklists(Vec::new(), "oriole", epoch, 3, &nodes).unwrap();
        assert_eq!(empty.obs, ObservationSet::zeros(3, 2));
        assert!(matches!(
            aggregate_checklists(vec![rec("zz", "2017-02-20", "oriole", 1, 1.0)], "oriole", epoch, 1, &nodes),
            Err(Error::UnknownNode(_))
        ));
    }

    #[test]
    fn counts_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let nodes = ids(3);
        let obs = ObservationSet::new(
            DMatrix::from_row_slice(2, 3, &[1, 0, 4, 0, 2, 0]),
            DMatrix::from_row_slice(2, 3, &[0.5, 0.0, 3.25, 1.0, 0.1, 0.0]),
        )
        .unwrap();
        let p = dir.path().join("counts.csv");
        save_counts(&obs, &nodes, &p).unwrap();
        assert_eq!(load_counts(&p, &nodes, None).unwrap(), obs);

        std::fs::write(&p, "time_index,node_id,count,effort_hours\n0,n0,3,0\n").unwrap();
        assert!(matches!(load_counts(&p, &nodes, None), Err(Error::InvariantViolation(_))));
        std::fs::write(&p, "time_index,node_id,count\n0,n0,3\n").unwrap();
        assert!(matches!(load_counts(&p, &nodes, None), Err(Error::Parse { .. })));
        std::fs::write(&p, "time_index,node_id,count,effort_hours\n0,n0,3,1\n0,n1,x,1\n").unwrap();
        match load_counts(&p, &nodes, None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn checklist_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        std::fs::write(&p, "node_id,date,species,count,effort_hours\nn0,2017-02-21,oriole,2,1.5\nn1,2017-03-01,jay,0,0.5\n").unwrap();
        let recs = read_checklists(&p).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].date, NaiveDate::from_ymd_opt(2017, 3, 1).unwrap());
        std::fs::write(&p, "node_id,date,species,count,effort_hours\nn0,2017-02-31,oriole,2,1.5\n").unwrap();
        assert!(matches!(read_checklists(&p), Err(Error::Parse { line: 2, .. })));
    }
}
