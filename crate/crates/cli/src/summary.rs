//! Mean ± std tables over seeds, one row per (model, width).

use std::collections::BTreeMap;
use std::path::Path;

use lysep::solver::LogRow;

use crate::config::Model;
use crate::error::{CliError, Result};
use crate::trajectory::{fmt_f64, RunKey};

pub const SUMMARY_HEADER: [&str; 10] = [
    "model",
    "width",
    "n_ok",
    "failed_seeds",
    "actual_loss_mean",
    "actual_loss_std",
    "loss_mean",
    "loss_std",
    "error_mean",
    "error_std",
];

/// Final state of one run as the summary sees it.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub key: RunKey,
    pub last: Option<LogRow>,
    pub failed: bool,
}

impl RunResult {
    /// The model's own objective: `J_S` for LySep, `J` for the PINN.
    fn loss(&self) -> Option<f64> {
        let r = self.last.as_ref()?;
        match self.key.model {
            Model::Lysep => r.loss_sep,
            Model::Pinn => Some(r.loss_orig),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; absent with fewer than two values.
    pub std: Option<f64>,
}

pub fn stat(values: &[f64]) -> Option<Stat> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    Some(Stat { mean, std })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub model: Model,
    pub width: usize,
    pub n_ok: usize,
    pub failed_seeds: Vec<u64>,
    pub actual_loss: Option<Stat>,
    pub loss: Option<Stat>,
    pub error: Option<Stat>,
}

/// Groups by (model, width) and averages over the successful seeds in
/// ascending seed order.
pub fn summarize(results: &[RunResult]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(Model, usize), Vec<&RunResult>> = BTreeMap::new();
    for r in results {
        groups.entry((r.key.model, r.key.width)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((model, width), mut runs)| {
            runs.sort_by_key(|r| r.key.seed);
            let ok: Vec<&RunResult> = runs.iter().copied().filter(|r| !r.failed).collect();
            let collect = |f: &dyn Fn(&RunResult) -> Option<f64>| -> Option<Stat> {
                let v: Option<Vec<f64>> = ok.iter().map(|r| f(r)).collect();
                v.and_then(|v| stat(&v))
            };
            SummaryRow {
                model,
                width,
                n_ok: ok.len(),
                failed_seeds: runs.iter().filter(|r| r.failed).map(|r| r.key.seed).collect(),
                actual_loss: collect(&|r| r.last.as_ref().map(|l| l.loss_orig)),
                loss: collect(&|r| r.loss()),
                error: collect(&|r| r.last.as_ref().and_then(|l| l.test_error)),
            }
        })
        .collect()
}

fn stat_fields(s: Option<Stat>) -> [String; 2] {
    match s {
        Some(s) => [fmt_f64(s.mean), s.std.map(fmt_f64).unwrap_or_default()],
        None => [String::new(), String::new()],
    }
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let err = |e: csv::Error| CliError::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(SUMMARY_HEADER).map_err(err)?;
    for r in rows {
        let failed = r.failed_seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";");
        let mut rec = vec![r.model.as_str().to_string(), r.width.to_string(), r.n_ok.to_string(), failed];
        for s in [r.actual_loss, r.loss, r.error] {
            rec.extend(stat_fields(s));
        }
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// `mean ± std` in the style of the result tables.
pub fn pm(s: Option<Stat>) -> String {
    match s {
        Some(Stat { mean, std: Some(sd) }) => format!("{mean:.2e} ± {sd:.2e}"),
        Some(Stat { mean, std: None }) => format!("{mean:.2e}"),
        None => "-".into(),
    }
}
