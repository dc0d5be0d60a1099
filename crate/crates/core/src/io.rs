//! CSV and JSON interchange.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::SeparatorPartition;
use crate::model::{CellRecord, ChainState, CutPoints, Dataset, ParameterState, SiteRecord};
use crate::oracle::ReportRow;
use crate::sampler::SweepReport;
use crate::schedule::BenchRow;
use crate::sim::SimOutput;
use crate::summary::{CellSummary, CoefficientRow, Interval};

fn location(path: &Path, line: Option<u64>) -> String {
    match line {
        Some(l) => format!("{} line {l}", path.display()),
        None => path.display().to_string(),
    }
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?)
}

fn parse<T: std::str::FromStr>(path: &Path, line: Option<u64>, column: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::data(location(path, line), format!("column `{column}`: cannot parse `{raw}`")))
}

/// Reads `cell_id,x,y,u,<covariate columns>`; returns the cells and the
/// covariate names.
pub fn read_cells(path: &Path) -> Result<(Vec<CellRecord>, Vec<String>)> {
    let mut rdr = reader(path)?;
    let header = rdr.headers()?.clone();
    let fixed = ["cell_id", "x", "y", "u"];
    if header.len() < 4 || header.iter().take(4).ne(fixed.iter().copied()) {
        return Err(Error::data(
            location(path, Some(1)),
            format!("header must start with cell_id,x,y,u; found `{}`", header.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let names: Vec<String> = header.iter().skip(4).map(str::to_string).collect();
    let mut cells = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line());
        if rec.len() != header.len() {
            return Err(Error::data(location(path, line), format!("expected {} fields, found {}", header.len(), rec.len())));
        }
        let id = parse(path, line, "cell_id", &rec[0])?;
        let x: f64 = parse(path, line, "x", &rec[1])?;
        let y: f64 = parse(path, line, "y", &rec[2])?;
        let u: f64 = parse(path, line, "u", &rec[3])?;
        if !(0.0..=1.0).contains(&u) {
            return Err(Error::data(location(path, line), format!("u = {u} outside [0, 1]")));
        }
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::data(location(path, line), "non-finite coordinate"));
        }
        let mut covariates = Vec::with_capacity(names.len());
        for (k, name) in names.iter().enumerate() {
            let v: f64 = parse(path, line, name, &rec[4 + k])?;
            if !v.is_finite() {
                return Err(Error::data(location(path, line), format!("non-finite covariate `{name}`")));
            }
            covariates.push(v);
        }
        cells.push(CellRecord { id, x, y, u, covariates });
    }
    Ok((cells, names))
}

pub fn write_cells(path: &Path, cells: &[CellRecord], names: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["cell_id".to_string(), "x".into(), "y".into(), "u".into()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for c in cells {
        let mut row = vec![c.id.to_string(), c.x.to_string(), c.y.to_string(), c.u.to_string()];
        row.extend(c.covariates.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `cell_id,y`. Unknown cell ids are checked when the dataset is built.
pub fn read_sites(path: &Path) -> Result<Vec<SiteRecord>> {
    let mut rdr = reader(path)?;
    let header = rdr.headers()?.clone();
    if header.iter().ne(["cell_id", "y"]) {
        return Err(Error::data(location(path, Some(1)), "header must be cell_id,y"));
    }
    let mut sites = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line());
        let cell_id = parse(path, line, "cell_id", &rec[0])?;
        let y: u8 = parse(path, line, "y", &rec[1])?;
        if y > 3 {
            return Err(Error::data(location(path, line), format!("category {y} outside 0..=3")));
        }
        sites.push(SiteRecord { cell_id, y });
    }
    Ok(sites)
}

pub fn write_sites(path: &Path, sites: &[SiteRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["cell_id", "y"])?;
    for s in sites {
        w.write_record([s.cell_id.to_string(), s.y.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `cell_id,role` with role `boundary` or `block_k`.
pub fn write_partition(path: &Path, data: &Dataset, partition: &SeparatorPartition) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["cell_id", "role"])?;
    for (cell, role) in partition.roles(data.n_cells()).iter().enumerate() {
        w.write_record([data.cell_label(cell).to_string(), role.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the simulated tables: `cells.csv`, `sites.csv`, and the ground
/// truth in `truth_cells.csv`, `truth_sites.csv`, `truth_params.csv`.
pub fn write_simulation(dir: &Path, out: &SimOutput) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_cells(&dir.join("cells.csv"), &out.cells, &out.covariate_names)?;
    write_sites(&dir.join("sites.csv"), &out.sites)?;
    let t = &out.truth;

    let mut w = csv::Writer::from_path(dir.join("truth_cells.csv"))?;
    w.write_record(["cell_id", "x", "y", "u", "theta", "mu", "held_out"])?;
    let held: HashMap<u64, bool> = t.sites.iter().map(|s| (s.cell_id, s.held_out)).collect();
    for (c, theta) in out.cells.iter().zip(&t.theta) {
        let mu: f64 = c.covariates.iter().zip(&t.beta).map(|(v, b)| v * b).sum::<f64>() + theta;
        w.write_record([
            c.id.to_string(),
            c.x.to_string(),
            c.y.to_string(),
            c.u.to_string(),
            theta.to_string(),
            mu.to_string(),
            held.get(&c.id).copied().unwrap_or(false).to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("truth_sites.csv"))?;
    w.write_record(["cell_id", "y", "z_p", "z_t", "z_o", "transformed", "case", "held_out"])?;
    for s in &t.sites {
        let d = &s.draw;
        let case = match d.latent() {
            crate::model::SiteLatent::Observed { .. } => "observed",
            crate::model::SiteLatent::Zero(z) => z.label(),
        };
        w.write_record([
            s.cell_id.to_string(),
            d.y.to_string(),
            d.z_p.to_string(),
            d.z_t.to_string(),
            d.z_o.to_string(),
            d.transformed.to_string(),
            case.to_string(),
            s.held_out.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("truth_params.csv"))?;
    w.write_record(["name", "value"])?;
    w.write_record(["alpha1".to_string(), t.alpha[0].to_string()])?;
    w.write_record(["alpha2".to_string(), t.alpha[1].to_string()])?;
    for (name, b) in out.covariate_names.iter().zip(&t.beta) {
        w.write_record([format!("beta_{name}"), b.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `truth_cells.csv` into `(cell_id, theta)` pairs.
pub fn read_truth_theta(path: &Path) -> Result<Vec<(u64, f64)>> {
    let mut rdr = reader(path)?;
    let header = rdr.headers()?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::data(location(path, Some(1)), format!("missing column `{name}`")))
    };
    let (ci, ti) = (col("cell_id")?, col("theta")?);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line());
        out.push((parse(path, line, "cell_id", &rec[ci])?, parse(path, line, "theta", &rec[ti])?));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// chains

fn chain_header(data: &Dataset) -> Vec<String> {
    let mut h = vec!["sweep".to_string(), "alpha1".into(), "alpha2".into()];
    h.extend(data.covariate_names().iter().map(|n| format!("beta_{n}")));
    h.extend((0..data.n_cells()).map(|c| format!("theta_{}", data.cell_label(c))));
    h
}

/// Appends retained draws as `sweep,alpha1,alpha2,beta_<name>…,theta_<id>…`.
pub struct ChainWriter {
    inner: csv::Writer<BufWriter<File>>,
}

impl ChainWriter {
    /// `append` continues an existing file (after a resume) without a
    /// second header.
    pub fn create(path: &Path, data: &Dataset, append: bool) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)?;
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(BufWriter::new(file));
        if !append {
            inner.write_record(chain_header(data))?;
        }
        Ok(Self { inner })
    }

    pub fn push(&mut self, sweep: u64, params: &ParameterState) -> Result<()> {
        let mut row = Vec::with_capacity(3 + params.beta.len() + params.theta.len());
        row.push(sweep.to_string());
        row.push(format!("{:?}", params.alpha.a1));
        row.push(format!("{:?}", params.alpha.a2));
        row.extend(params.beta.iter().map(|v| format!("{v:?}")));
        row.extend(params.theta.iter().map(|v| format!("{v:?}")));
        self.inner.write_record(&row)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

/// Retained draws read back from a chain file, in dataset cell order.
#[derive(Clone, Debug)]
pub struct Chain {
    pub sweeps: Vec<u64>,
    pub draws: Vec<ParameterState>,
}

/// Reads a chain written for `data`, matching columns by name.
pub fn read_chain(path: &Path, data: &Dataset) -> Result<Chain> {
    let mut rdr = reader(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let expected = chain_header(data);
    let index: HashMap<&str, usize> = header.iter().enumerate().map(|(i, h)| (h.as_str(), i)).collect();
    let mut columns = Vec::with_capacity(expected.len());
    for name in &expected {
        columns.push(*index.get(name.as_str()).ok_or_else(|| {
            Error::data(location(path, Some(1)), format!("chain has no column `{name}` required by the dataset"))
        })?);
    }
    if header.len() != expected.len() {
        return Err(Error::data(
            location(path, Some(1)),
            format!("chain has {} columns, dataset implies {}", header.len(), expected.len()),
        ));
    }
    let p = data.n_covariates();
    let mut out = Chain { sweeps: Vec::new(), draws: Vec::new() };
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line());
        let get = |k: usize| -> Result<f64> { parse(path, line, &expected[k], &rec[columns[k]]) };
        let sweep: u64 = parse(path, line, "sweep", &rec[columns[0]])?;
        let alpha = CutPoints { a1: get(1)?, a2: get(2)? };
        let beta = (0..p).map(|k| get(3 + k)).collect::<Result<Vec<_>>>()?;
        let theta = (0..data.n_cells()).map(|k| get(3 + p + k)).collect::<Result<Vec<_>>>()?;
        out.sweeps.push(sweep);
        out.draws.push(ParameterState { alpha, beta, theta });
    }
    Ok(out)
}

/// Per-sweep diagnostics log.
pub struct SweepLog {
    inner: csv::Writer<BufWriter<File>>,
}

impl SweepLog {
    pub fn create(path: &Path, append: bool) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)?;
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(BufWriter::new(file));
        if !append {
            inner.write_record([
                "sweep",
                "mh_accept_rate",
                "mh_proposals",
                "alpha1_width",
                "alpha2_width",
                "theta_center_shift",
            ])?;
        }
        Ok(Self { inner })
    }

    pub fn push(&mut self, r: &SweepReport) -> Result<()> {
        self.inner.write_record([
            r.sweep.to_string(),
            r.mh_accept_rate.to_string(),
            r.mh_proposals.to_string(),
            r.alpha_interval_widths[0].to_string(),
            r.alpha_interval_widths[1].to_string(),
            r.theta_center_shift.to_string(),
        ])?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

/// Resumable sampler state: the last completed sweep and the full state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub sweep: u64,
    pub seed: u64,
    pub retained: usize,
    pub state: ChainState,
}

impl Checkpoint {
    /// Written to a temporary file and renamed, so a crash never leaves a
    /// truncated checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            serde_json::to_writer(&mut w, self)?;
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path)?;
        Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
    }
}

/// Drops rows whose leading `sweep` field exceeds `last`, so a resumed run
/// can append without duplicating sweeps written after the checkpoint.
pub fn truncate_rows_after(path: &Path, last: u64) -> Result<()> {
    let text = std::fs::read_to_string(path)?;
    let mut out = String::with_capacity(text.len());
    for (k, line) in text.lines().enumerate() {
        let keep = k == 0
            || line
                .split(',')
                .next()
                .and_then(|f| f.trim().parse::<u64>().ok())
                .is_some_and(|s| s <= last);
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// products

/// `cell_id,x,y,value,lo95,hi95`.
pub fn write_product(path: &Path, cells: &[CellSummary], values: &[Interval]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["cell_id", "x", "y", "value", "lo95", "hi95"])?;
    for (c, v) in cells.iter().zip(values) {
        w.write_record([
            c.cell_id.to_string(),
            c.x.to_string(),
            c.y.to_string(),
            v.mean.to_string(),
            v.lo95.to_string(),
            v.hi95.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Coefficient table; `table` renders `mean (width)`.
pub fn write_coefficients(path: &Path, rows: &[CoefficientRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["covariate", "mean", "ci_width", "lo95", "hi95", "significant", "table"])?;
    for r in rows {
        w.write_record([
            r.name.clone(),
            r.mean.to_string(),
            r.width.to_string(),
            r.lo95.to_string(),
            r.hi95.to_string(),
            r.significant.to_string(),
            format!("{:.3} ({:.3})", r.mean, r.width),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_serialized<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_bench(path: &Path, rows: &[BenchRow]) -> Result<()> {
    write_serialized(path, rows)
}

pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    write_serialized(path, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{simulate_dataset, SimConfig};

    #[test]
    fn simulated_tables_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let out = simulate_dataset(&SimConfig { nx: 5, ny: 4, ..Default::default() }).unwrap();
        write_simulation(dir.path(), &out).unwrap();
        let (cells, names) = read_cells(&dir.path().join("cells.csv")).unwrap();
        let sites = read_sites(&dir.path().join("sites.csv")).unwrap();
        assert_eq!(cells, out.cells);
        assert_eq!(names, out.covariate_names);
        assert_eq!(sites, out.sites);
        let theta = read_truth_theta(&dir.path().join("truth_cells.csv")).unwrap();
        assert_eq!(theta.iter().map(|t| t.1).collect::<Vec<_>>(), out.truth.theta);
    }

    #[test]
    fn bad_rows_report_their_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cells.csv");
        std::fs::write(&p, "cell_id,x,y,u,v1\n0,0,0,0.5,1\n1,1,0,1.5,2\n").unwrap();
        let err = read_cells(&p).unwrap_err().to_string();
        assert!(err.contains("line 3") && err.contains("u = 1.5"), "{err}");
        std::fs::write(&p, "cell_id,x,y,u,v1\n0,0,0,0.5,nan\n").unwrap();
        assert!(read_cells(&p).unwrap_err().to_string().contains("non-finite"));
        let s = dir.path().join("sites.csv");
        std::fs::write(&s, "cell_id,y\n0,1\n0,7\n").unwrap();
        assert!(read_sites(&s).unwrap_err().to_string().contains("line 3"));
    }

    #[test]
    fn chain_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let out = simulate_dataset(&SimConfig { nx: 4, ny: 3, ..Default::default() }).unwrap();
        let data = out.dataset(1.5).unwrap();
        let p = dir.path().join("chain.csv");
        let params = ParameterState {
            alpha: CutPoints { a1: 0.1 + 0.2, a2: std::f64::consts::PI },
            beta: vec![1.0 / 3.0, -2e-17],
            theta: (0..12).map(|k| (k as f64).sin()).collect(),
        };
        let mut w = ChainWriter::create(&p, &data, false).unwrap();
        w.push(5, &params).unwrap();
        w.flush().unwrap();
        drop(w);
        let mut w = ChainWriter::create(&p, &data, true).unwrap();
        w.push(10, &params).unwrap();
        w.flush().unwrap();
        let chain = read_chain(&p, &data).unwrap();
        assert_eq!(chain.sweeps, vec![5, 10]);
        assert_eq!(chain.draws[1], params);
    }
}
