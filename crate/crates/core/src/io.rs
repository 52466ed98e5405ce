//! File formats.
//!
//! - profile CSV: `sigma,sigma_lo,sigma_hi,<column>...`, one row per grid cell;
//! - density / schedule JSON: grid description plus tabulated arrays;
//! - dataset CSV: one point per row, no header (a non-numeric first line is
//!   skipped as a header), `#` comments allowed;
//! - grid CSV: `index,sigma`;
//! - JSON-lines logs, one serialized record per line.
//!
//! Floats are written in shortest round-trip form so that re-reading a file
//! reproduces the in-memory values bit for bit.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::allocate::{Allocation, GateParams, PivotMethod, Schedule, ScheduleSpec, Weighting};
use crate::error::{Error, Result};
use crate::grid::{LogGrid, Profile, SigmaRange, TabulatedDensity};
use crate::infer::InferenceGrid;
use crate::oracle::Dataset;
use crate::toy::ToyRow;
use crate::train::TrainLogRow;

/// Opens `path` for buffered writing, creating parent directories.
pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| with_path(e, dir))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| with_path(e, path))?))
}

pub fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| with_path(e, path))?))
}

fn with_path(e: std::io::Error, path: &Path) -> std::io::Error {
    std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse { line, msg: format!("{other:?}") },
    }
}

fn parse_field(field: &str, line: usize, what: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::Parse { line, msg: format!("{what}: cannot parse {field:?} as a number") })
}

// ---------------------------------------------------------------- profiles

/// Writes profiles sharing one grid as named columns.
pub fn write_profiles_csv<W: Write>(out: W, columns: &[(&str, &Profile<f64>)]) -> Result<()> {
    let Some((_, first)) = columns.first() else {
        return Err(Error::Config("no columns to write".into()));
    };
    let grid = first.grid();
    if columns.iter().any(|(_, p)| p.grid() != grid) {
        return Err(Error::Config("profiles must share a grid".into()));
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["sigma", "sigma_lo", "sigma_hi"];
    header.extend(columns.iter().map(|(name, _)| *name));
    w.write_record(&header).map_err(csv_error)?;
    for k in 0..grid.len() {
        let (lo, hi) = grid.interval(k);
        let mut row = vec![grid.centers()[k].to_string(), lo.to_string(), hi.to_string()];
        row.extend(columns.iter().map(|(_, p)| p.values()[k].to_string()));
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads column `column` of a profile CSV. The grid is rebuilt from the first
/// lower and last upper cell edge (or, when those columns are missing, from
/// the first and last centers) and checked against every listed center.
pub fn read_profile_csv<R: Read>(input: R, column: &str) -> Result<Profile<f64>> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(input);
    let headers = r.headers().map_err(csv_error)?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let sigma_col = find("sigma").ok_or_else(|| Error::Parse { line: 1, msg: "missing `sigma` column".into() })?;
    let value_col = find(column).ok_or_else(|| Error::Parse { line: 1, msg: format!("missing `{column}` column") })?;
    let (lo_col, hi_col) = (find("sigma_lo"), find("sigma_hi"));

    let (mut centers, mut values, mut lows, mut highs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let get = |i: usize, what: &str| parse_field(rec.get(i).unwrap_or(""), line, what);
        centers.push(get(sigma_col, "sigma")?);
        values.push(get(value_col, column)?);
        if let (Some(lo), Some(hi)) = (lo_col, hi_col) {
            lows.push(get(lo, "sigma_lo")?);
            highs.push(get(hi, "sigma_hi")?);
        }
    }
    let k = centers.len();
    if k < 2 {
        return Err(Error::Data(format!("a profile needs at least 2 rows, got {k}")));
    }
    let range = if lows.is_empty() {
        let half = (centers[k - 1] / centers[0]).ln() / (2.0 * (k - 1) as f64);
        SigmaRange::new(centers[0] * (-half).exp(), centers[k - 1] * half.exp())
    } else {
        SigmaRange::new(lows[0], highs[k - 1])
    }
    .map_err(|e| Error::Data(format!("profile sigma range: {e}")))?;
    let grid = LogGrid::new(range, k)?;
    for (i, (&c, &g)) in centers.iter().zip(grid.centers()).enumerate() {
        if ((c - g) / g).abs() > 1e-9 {
            return Err(Error::Data(format!("row {} sigma {c} is not on a log grid (expected {g})", i + 2)));
        }
    }
    Profile::new(grid, values).map_err(|e| Error::Data(e.to_string()))
}

pub fn read_profile_file(path: &Path, column: &str) -> Result<Profile<f64>> {
    read_profile_csv(open(path)?, column)
}

// ------------------------------------------------------------ densities

/// Serialized grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFile {
    pub sigma_min: f64,
    pub sigma_max: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub edges: Vec<f64>,
    pub centers: Vec<f64>,
}

impl GridFile {
    pub fn new(grid: &LogGrid<f64>) -> Self {
        let range = grid.range();
        Self {
            sigma_min: range.min(),
            sigma_max: range.max(),
            k: grid.len(),
            edges: grid.edges().to_vec(),
            centers: grid.centers().to_vec(),
        }
    }

    pub fn to_grid(&self) -> Result<LogGrid<f64>> {
        let grid = LogGrid::new(SigmaRange::new(self.sigma_min, self.sigma_max)?, self.k)?;
        if grid.edges() != self.edges.as_slice() || grid.centers() != self.centers.as_slice() {
            return Err(Error::Data("stored edges/centers disagree with sigma_min, sigma_max, K".into()));
        }
        Ok(grid)
    }
}

/// Serialized tabulated density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityFile {
    #[serde(flatten)]
    pub grid: GridFile,
    pub density: Vec<f64>,
    pub cdf: Vec<f64>,
}

impl DensityFile {
    pub fn new(d: &TabulatedDensity<f64>) -> Self {
        Self { grid: GridFile::new(d.grid()), density: d.density().to_vec(), cdf: d.cdf().to_vec() }
    }

    pub fn to_density(&self) -> Result<TabulatedDensity<f64>> {
        TabulatedDensity::from_parts(self.grid.to_grid()?, self.density.clone(), self.cdf.clone())
    }
}

/// Serialized output of the offline schedule pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleFile {
    #[serde(flatten)]
    pub grid: GridFile,
    pub weighting: Weighting<f64>,
    pub gate: GateParams<f64>,
    pub pivot_method: PivotMethod<f64>,
    pub pivot_c: f64,
    pub smoothing: bool,
    /// Ungated rate at the centers.
    pub rate: Vec<f64>,
    /// Gated (and optionally smoothed) rate at the centers.
    pub rate_gated: Vec<f64>,
    /// Target allocation density at the centers.
    pub rho: Vec<f64>,
    /// Entropic time at the edges.
    pub u_cdf: Vec<f64>,
    /// Sampling density at the centers.
    pub pi: Vec<f64>,
    pub pi_cdf: Vec<f64>,
    /// Effective emphasis at the centers.
    pub phi: Vec<f64>,
}

impl ScheduleFile {
    pub fn new(s: &Schedule<f64>, spec: &ScheduleSpec<f64>) -> Self {
        let rho = s.allocation.rho();
        Self {
            grid: GridFile::new(s.rate.grid()),
            weighting: spec.weighting,
            gate: s.gate,
            pivot_method: spec.pivot,
            pivot_c: s.gate.c,
            smoothing: spec.smoothing,
            rate: s.rate.values().to_vec(),
            rate_gated: s.gated.values().to_vec(),
            rho: rho.density().to_vec(),
            u_cdf: rho.cdf().to_vec(),
            pi: s.pi.density().to_vec(),
            pi_cdf: s.pi.cdf().to_vec(),
            phi: s.phi.values().to_vec(),
        }
    }

    pub fn allocation(&self) -> Result<Allocation<f64>> {
        let rho = TabulatedDensity::from_parts(self.grid.to_grid()?, self.rho.clone(), self.u_cdf.clone())?;
        Ok(Allocation::from_rho(rho))
    }

    pub fn sampler(&self) -> Result<TabulatedDensity<f64>> {
        TabulatedDensity::from_parts(self.grid.to_grid()?, self.pi.clone(), self.pi_cdf.clone())
    }
}

pub fn write_json<T: Serialize, W: Write>(mut out: W, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned, R: Read>(input: R) -> Result<T> {
    serde_json::from_reader(input).map_err(|e| Error::Parse { line: e.line(), msg: e.to_string() })
}

pub fn write_jsonl<T: Serialize, W: Write>(mut out: W, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned, R: BufRead>(input: R) -> Result<Vec<T>> {
    let mut items = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?);
    }
    Ok(items)
}

// ------------------------------------------------------------- datasets

/// Reads one point per row. Blank lines and `#` comments are ignored; a first
/// row that does not parse as numbers is taken to be a header.
pub fn read_dataset_csv<R: Read>(input: R) -> Result<Dataset<f64>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(input);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(|f| f.parse::<f64>()).collect();
        let row = match parsed {
            Ok(row) => row,
            Err(_) if i == 0 => continue,
            Err(_) => {
                let bad = rec.iter().find(|f| f.parse::<f64>().is_err()).unwrap_or("");
                return Err(Error::Parse { line, msg: format!("cannot parse {bad:?} as a number") });
            }
        };
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse { line, msg: "non-finite value".into() });
        }
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected {} fields, found {}", first.len(), row.len()),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Data("dataset has no rows".into()));
    }
    Dataset::from_rows(&rows)
}

pub fn read_dataset_file(path: &Path) -> Result<Dataset<f64>> {
    read_dataset_csv(open(path)?)
}

pub fn write_points_csv<W: Write>(out: W, points: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
    for p in points {
        w.write_record(p.iter().map(|v| v.to_string())).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------- grids

pub fn write_grid_csv<W: Write>(out: W, grid: &InferenceGrid<f64>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["index", "sigma"]).map_err(csv_error)?;
    for (i, s) in grid.nodes().iter().enumerate() {
        w.write_record([i.to_string(), s.to_string()]).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_grid_csv<R: Read>(input: R) -> Result<InferenceGrid<f64>> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let mut nodes = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        nodes.push(parse_field(rec.get(1).unwrap_or(""), line, "sigma")?);
    }
    InferenceGrid::new(nodes).map_err(|e| Error::Data(e.to_string()))
}

// ------------------------------------------------------------ other logs

pub fn write_toy_csv<W: Write>(out: W, rows: &[ToyRow<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sigma", "mmse", "entropy_rate", "x_star_pos", "hessian_at_zero"]).map_err(csv_error)?;
    for r in rows {
        w.write_record([
            r.sigma.to_string(),
            r.mmse.to_string(),
            r.entropy_rate.to_string(),
            r.x_star_pos.to_string(),
            r.hessian_at_zero.to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_train_log_csv<W: Write>(out: W, rows: &[TrainLogRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "mean_loss", "snapshot_version"]).map_err(csv_error)?;
    for r in rows {
        w.write_record([r.step.to_string(), r.mean_loss.to_string(), r.snapshot_version.to_string()])
            .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocate::build_schedule;

    fn grid() -> LogGrid<f64> {
        LogGrid::new(SigmaRange::new(0.002, 80.0).unwrap(), 16).unwrap()
    }

    #[test]
    fn profile_round_trip_is_exact() {
        let a = Profile::from_fn(grid(), |s| s.sin().abs() / 3.0).unwrap();
        let b = Profile::from_fn(grid(), |s| 1.0 / s).unwrap();
        let mut buf = Vec::new();
        write_profiles_csv(&mut buf, &[("mmse", &a), ("entropy_rate", &b)]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("sigma,sigma_lo,sigma_hi,mmse,entropy_rate\n"));
        assert_eq!(read_profile_csv(buf.as_slice(), "mmse").unwrap(), a);
        assert_eq!(read_profile_csv(buf.as_slice(), "entropy_rate").unwrap(), b);
        assert!(read_profile_csv(buf.as_slice(), "nope").is_err());
    }

    #[test]
    fn profile_from_centers_only() {
        let g = grid();
        let mut text = String::from("sigma,value\n");
        for c in g.centers() {
            text.push_str(&format!("{c},1\n"));
        }
        let p = read_profile_csv(text.as_bytes(), "value").unwrap();
        for (x, y) in p.grid().edges().iter().zip(g.edges()) {
            assert!(((x - y) / y).abs() < 1e-12);
        }
        let bad = "sigma,value\n1,1\n2,1\n5,1\n";
        assert!(matches!(read_profile_csv(bad.as_bytes(), "value"), Err(Error::Data(_))));
        let unparsable = "sigma,value\n1,1\n2,x\n";
        assert!(matches!(read_profile_csv(unparsable.as_bytes(), "value"), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn density_and_schedule_round_trip() {
        let rate = Profile::from_fn(grid(), |s| (-(s.ln() + 0.5).powi(2)).exp() / s).unwrap();
        let spec = ScheduleSpec { weighting: Weighting::Edm { sigma_data: 0.5 }, ..ScheduleSpec::default() };
        let sched = build_schedule(&rate, &spec).unwrap();

        let text = serde_json::to_string(&DensityFile::new(&sched.pi)).unwrap();
        let back: DensityFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back.to_density().unwrap(), sched.pi);
        assert!(text.contains("\"K\":16"));

        let file = ScheduleFile::new(&sched, &spec);
        let text = serde_json::to_string(&file).unwrap();
        let back: ScheduleFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back, file);
        assert_eq!(back.allocation().unwrap(), sched.allocation);
        assert_eq!(back.sampler().unwrap(), sched.pi);
    }

    #[test]
    fn dataset_parsing() {
        let d = read_dataset_csv("x,y\n1,2\n# comment\n\n3, 4\n".as_bytes()).unwrap();
        assert_eq!((d.len(), d.dim()), (2, 2));
        assert_eq!(d.row(1), &[3.0, 4.0]);
        let one = read_dataset_csv("-1\n1\n".as_bytes()).unwrap();
        assert_eq!((one.len(), one.dim()), (2, 1));
        match read_dataset_csv("1,2\n3,4\n5\n".as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        match read_dataset_csv("1,2\n3,oops\n".as_bytes()) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("oops"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(read_dataset_csv("".as_bytes()).is_err());
        assert!(read_dataset_csv("1\nNaN\n".as_bytes()).is_err());
    }

    #[test]
    fn points_and_grids_round_trip() {
        let pts = vec![vec![0.1, -2.5], vec![1e-300, 3.0]];
        let mut buf = Vec::new();
        write_points_csv(&mut buf, &pts).unwrap();
        let d = read_dataset_csv(buf.as_slice()).unwrap();
        assert_eq!(d.rows().map(|r| r.to_vec()).collect::<Vec<_>>(), pts);

        let g = InferenceGrid::new(vec![80.0, 1.5, 0.002]).unwrap();
        let mut buf = Vec::new();
        write_grid_csv(&mut buf, &g).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "index,sigma\n0,80\n1,1.5\n2,0.002\n");
        assert_eq!(read_grid_csv(buf.as_slice()).unwrap(), g);
    }

    #[test]
    fn jsonl_round_trip() {
        let rows = vec![
            TrainLogRow { step: 1, mean_loss: 0.5, snapshot_version: 0 },
            TrainLogRow { step: 2, mean_loss: 0.25, snapshot_version: 1 },
        ];
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &rows).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 2);
        assert_eq!(read_jsonl::<TrainLogRow, _>(buf.as_slice()).unwrap(), rows);
        assert!(matches!(read_jsonl::<TrainLogRow, _>("{}\n{bad".as_bytes()), Err(Error::Parse { line: 1, .. })));
    }
}
