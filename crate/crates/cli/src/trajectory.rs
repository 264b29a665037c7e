//! Per-run trajectory files.

use std::fs::File;
use std::path::{Path, PathBuf};

use lysep::solver::LogRow;

use crate::config::Model;
use crate::error::{CliError, Result};

pub const HEADER: [&str; 6] = ["iter", "loss_sep", "loss_orig", "bound", "bound_ok", "test_error"];

/// Marker written next to a trajectory whose run failed; holds the reason.
pub const FAILED_EXT: &str = "failed";
pub const PARAMS_EXT: &str = "params";

/// Identity of one run, encoded in its file name.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RunKey {
    pub problem: String,
    pub model: Model,
    pub width: usize,
    pub seed: u64,
}

impl RunKey {
    pub fn stem(&self) -> String {
        format!("{}_{}_M{}_seed{}", self.problem, self.model.as_str(), self.width, self.seed)
    }

    pub fn csv_path(&self, dir: &Path) -> PathBuf {
        dir.join(format!("{}.csv", self.stem()))
    }

    pub fn sidecar(&self, dir: &Path, ext: &str) -> PathBuf {
        dir.join(format!("{}.{ext}", self.stem()))
    }

    /// Inverse of [`RunKey::stem`]; problem names may contain underscores.
    pub fn parse_stem(stem: &str) -> Option<RunKey> {
        let (rest, seed) = stem.rsplit_once("_seed")?;
        let (rest, width) = rest.rsplit_once("_M")?;
        let (problem, model) = rest.rsplit_once('_')?;
        Some(RunKey {
            problem: problem.to_string(),
            model: Model::parse(model)?,
            width: width.parse().ok()?,
            seed: seed.parse().ok()?,
        })
    }
}

/// 17 significant digits, enough for an exact round trip.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn row_record(r: &LogRow) -> [String; 6] {
    [
        r.iter.to_string(),
        fmt_opt(r.loss_sep),
        fmt_f64(r.loss_orig),
        fmt_opt(r.bound),
        r.bound_ok.map(|b| b.to_string()).unwrap_or_default(),
        fmt_opt(r.test_error),
    ]
}

/// Writes rows as they arrive, flushing after each.
pub struct TrajectoryWriter {
    path: PathBuf,
    inner: csv::Writer<File>,
}

impl TrajectoryWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut inner = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        inner.write_record(HEADER).map_err(|e| csv_err(path, e))?;
        Ok(TrajectoryWriter {
            path: path.to_path_buf(),
            inner,
        })
    }

    pub fn push(&mut self, row: &LogRow) -> Result<()> {
        self.inner.write_record(row_record(row)).map_err(|e| csv_err(&self.path, e))?;
        self.inner.flush().map_err(|e| CliError::Io {
            path: self.path.clone(),
            source: e,
        })
    }
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    CliError::Csv {
        path: path.to_path_buf(),
        source: e,
    }
}

pub fn read_trajectory(path: &Path) -> Result<Vec<LogRow>> {
    let bad = |reason: String| CliError::Trajectory {
        path: path.to_path_buf(),
        reason,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().ne(HEADER.iter().copied()) {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let num = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| bad(format!("not a number: {s:?}")))
        }
    };
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let iter = rec[0].parse().map_err(|_| bad(format!("bad iteration {:?}", &rec[0])))?;
        let bound_ok = match &rec[4] {
            "" => None,
            "true" => Some(true),
            "false" => Some(false),
            other => return Err(bad(format!("bad bound_ok {other:?}"))),
        };
        rows.push(LogRow {
            iter,
            loss_sep: num(&rec[1])?,
            loss_orig: num(&rec[2])?.ok_or_else(|| bad("missing loss_orig".into()))?,
            bound: num(&rec[3])?,
            bound_ok,
            test_error: num(&rec[5])?,
        });
    }
    Ok(rows)
}
