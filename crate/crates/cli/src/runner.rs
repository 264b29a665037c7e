//! Executes the configured runs and rebuilds summaries from trajectory files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use lysep::pinn::is_diverged;
use lysep::sampling::train_test_sets;
use lysep::solver::{run_lysep, test_error, LogRow};
use lysep::{
    init_params, make_sin_activation, manufactured_problem, train_pinn_gd, ActivationBundle, BallMapping, Dataset,
    NetworkParams, PdeProblem, SampledSet,
};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, Model};
use crate::error::{CliError, Result};
use crate::summary::{pm, summarize, write_summary, RunResult, SummaryRow};
use crate::trajectory::{read_trajectory, RunKey, TrajectoryWriter, FAILED_EXT, PARAMS_EXT};

pub struct Experiment {
    pub results: Vec<RunResult>,
    pub summary: Vec<SummaryRow>,
    pub summary_path: PathBuf,
}

pub fn summary_path(dir: &Path, problem: &str) -> PathBuf {
    dir.join(format!("{problem}_summary.csv"))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

struct Shared<'a> {
    cfg: &'a ExperimentConfig,
    prob: &'a PdeProblem,
    act: ActivationBundle,
    ds: &'a Dataset,
    test: &'a SampledSet,
    dir: &'a Path,
}

/// Runs every (model, seed) pair and writes trajectories, parameter
/// snapshots and the summary table.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Experiment> {
    cfg.validate()?;
    let prob = manufactured_problem(&cfg.problem)?;
    let (train, test) = train_test_sets(&prob, cfg.n_train, cfg.n_test, BallMapping::default())?;
    let ds = Dataset::from_sampled(&prob, &train)?;
    let dir = cfg.output_dir.as_path();
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;

    let mut keys = Vec::new();
    for model in cfg.model.models() {
        for &seed in &cfg.seeds {
            keys.push(RunKey {
                problem: cfg.problem.clone(),
                model,
                width: cfg.width,
                seed,
            });
        }
    }
    let shared = Shared {
        cfg,
        prob: &prob,
        act: make_sin_activation(),
        ds: &ds,
        test: &test,
        dir,
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cfg.workers {
        pool = pool.num_threads(w);
    }
    let pool = pool.build().map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let results: Vec<RunResult> = pool.install(|| keys.par_iter().map(|k| run_one(&shared, k)).collect::<Result<_>>())?;

    let summary = summarize(&results);
    let summary_path = summary_path(dir, &cfg.problem);
    write_summary(&summary_path, &summary)?;
    Ok(Experiment {
        results,
        summary,
        summary_path,
    })
}

fn run_one(sh: &Shared, key: &RunKey) -> Result<RunResult> {
    let failed_marker = key.sidecar(sh.dir, FAILED_EXT);
    if failed_marker.exists() {
        std::fs::remove_file(&failed_marker).map_err(io_err(&failed_marker))?;
    }
    let csv_path = key.csv_path(sh.dir);
    let mut writer = TrajectoryWriter::create(&csv_path)?;
    let mut last = None;
    let mut write_err = None;
    let mut push = |row: &LogRow| {
        if write_err.is_none() {
            if let Err(e) = writer.push(row) {
                write_err = Some(e);
            }
        }
        last = Some(*row);
    };
    let p0 = init_params(sh.cfg.width, sh.prob.input_dim(), key.seed);
    let (params, failure) = match key.model {
        Model::Pinn => pinn_run(sh, &p0, &mut push)?,
        Model::Lysep => {
            let run = run_lysep(sh.prob, &p0, &sh.act, sh.ds, Some(sh.test), &sh.cfg.solver_config(), &mut push)?;
            let failure = match (&run.failure, &run.diverged) {
                (Some(reason), Some(d)) => Some(format!("iteration {}: {reason}", d.iter)),
                (None, Some(d)) => Some(format!("diverged at iteration {} (J_S = {})", d.iter, d.value)),
                (Some(reason), None) => Some(reason.clone()),
                (None, None) => None,
            };
            (run.params, failure)
        }
    };
    if let Some(e) = write_err {
        return Err(e);
    }
    let params_path = key.sidecar(sh.dir, PARAMS_EXT);
    std::fs::write(&params_path, params.to_text()).map_err(io_err(&params_path))?;
    if let Some(reason) = &failure {
        std::fs::write(&failed_marker, format!("{reason}\n")).map_err(io_err(&failed_marker))?;
    }
    Ok(RunResult {
        key: key.clone(),
        last,
        failed: failure.is_some(),
    })
}

fn pinn_run(sh: &Shared, p0: &NetworkParams, push: &mut impl FnMut(&LogRow)) -> Result<(NetworkParams, Option<String>)> {
    let iters = sh.cfg.iters;
    let every = sh.cfg.log_every;
    let mut err = None;
    let run = train_pinn_gd(sh.prob, p0, &sh.act, sh.ds, iters, sh.cfg.pinn_schedule(), |k, p, loss| {
        if k.is_multiple_of(every) || k == iters || is_diverged(loss) {
            let e = match test_error(sh.prob, p, &sh.act, sh.test) {
                Ok(e) => Some(e),
                Err(e) => {
                    err.get_or_insert(e);
                    None
                }
            };
            push(&LogRow {
                iter: k,
                loss_sep: None,
                loss_orig: loss,
                bound: None,
                bound_ok: None,
                test_error: e,
            });
        }
    })?;
    if let Some(e) = err {
        return Err(e.into());
    }
    let failure = run.diverged.map(|d| format!("diverged at iteration {} (J = {})", d.iter, d.value));
    Ok((run.params, failure))
}

/// Trajectory files found in `dir`, grouped by problem.
pub fn collect_runs(dir: &Path) -> Result<BTreeMap<String, Vec<RunResult>>> {
    let mut out: BTreeMap<String, Vec<RunResult>> = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("csv") {
            continue;
        }
        let Some(key) = path.file_stem().and_then(|s| s.to_str()).and_then(RunKey::parse_stem) else {
            continue;
        };
        let rows = read_trajectory(&path)?;
        let failed = key.sidecar(dir, FAILED_EXT).exists();
        out.entry(key.problem.clone()).or_default().push(RunResult {
            key,
            last: rows.last().copied(),
            failed,
        });
    }
    for runs in out.values_mut() {
        runs.sort_by(|a, b| a.key.cmp(&b.key));
    }
    Ok(out)
}

/// Rebuilds every summary table in `dir` from its trajectories and returns a
/// printable report including the consistency-bound status of each run.
pub fn report(dir: &Path) -> Result<String> {
    let groups = collect_runs(dir)?;
    if groups.is_empty() {
        return Err(CliError::Config(format!("no trajectory files in {}", dir.display())));
    }
    let mut text = String::new();
    for (problem, runs) in &groups {
        let summary = summarize(runs);
        write_summary(&summary_path(dir, problem), &summary)?;
        let _ = writeln!(text, "{problem}");
        let _ = writeln!(text, "  {:<6} {:>5} {:>4}  {:<22} {:<22} {:<22}", "model", "M", "ok", "J", "objective", "error");
        for row in &summary {
            let _ = writeln!(
                text,
                "  {:<6} {:>5} {:>4}  {:<22} {:<22} {:<22}{}",
                row.model.as_str(),
                row.width,
                row.n_ok,
                pm(row.actual_loss),
                pm(row.loss),
                pm(row.error),
                if row.failed_seeds.is_empty() {
                    String::new()
                } else {
                    format!("  failed seeds: {:?}", row.failed_seeds)
                }
            );
        }
        for run in runs.iter().filter(|r| r.key.model == Model::Lysep) {
            let rows = read_trajectory(&run.key.csv_path(dir))?;
            let checked: Vec<bool> = rows.iter().filter_map(|r| r.bound_ok).collect();
            let ok = checked.iter().filter(|b| **b).count();
            let _ = writeln!(
                text,
                "  consistency {}: bound held at {ok}/{} logged iterations{}",
                run.key.stem(),
                checked.len(),
                if run.failed { " (run failed)" } else { "" }
            );
        }
    }
    Ok(text)
}
