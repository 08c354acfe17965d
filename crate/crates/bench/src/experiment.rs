//! Problem construction and repeated seeded runs.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tsg_core::adv_hpt::{load_csv, noisy_test_mse, AdvHptParams, AdvHptProblem};
use tsg_core::driver::{run_bsg, run_tsg, Reduction, RunOptions};
use tsg_core::oracle::{DeterministicSampler, GaussianNoise, MinibatchSampler, NoiseSampler, Point, ProblemOracle, Sampler};
use tsg_core::synthetic::{paper_default_quadratic, paper_default_quartic, paper_init_points, LowerLevel, SyntheticProblem, SyntheticSpec};
use tsg_core::trace::{write_trace_csv, RunTrace};

use crate::aggregate::{self, AggregateRow, WallBucketRow};
use crate::config::{ExperimentConfig, ProblemConfig, ReductionConfig};

/// A constructed problem together with its initial point.
pub enum Built {
    Synthetic { spec: SyntheticSpec, problem: SyntheticProblem, init: Point },
    AdvHpt { problem: Box<AdvHptProblem>, init: Point, batch_size: usize },
}

impl Built {
    pub fn new(problem: &ProblemConfig) -> Result<Built> {
        let synthetic = |lower, spec: tsg_core::Result<SyntheticSpec>, init_seed| -> Result<Built> {
            let spec = spec?;
            let problem = SyntheticProblem::new(spec.clone())?;
            let init = paper_init_points(lower, problem.dims(), init_seed);
            Ok(Built::Synthetic { spec, problem, init })
        };
        match problem {
            ProblemConfig::Quadratic { n, m, t, instance_seed, init_seed } => {
                synthetic(LowerLevel::Quadratic, paper_default_quadratic(*n, *m, *t, *instance_seed), *init_seed)
            }
            ProblemConfig::Quartic { n, m, t, instance_seed, init_seed } => {
                synthetic(LowerLevel::Quartic, paper_default_quartic(*n, *m, *t, *instance_seed), *init_seed)
            }
            ProblemConfig::SpecJson { path, init_seed } => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let spec = SyntheticSpec::from_json(&text).with_context(|| format!("spec {}", path.display()));
                let spec = spec?;
                synthetic(spec.lower, Ok(spec), *init_seed)
            }
            ProblemConfig::AdvHpt { csv, target, c, mu, split, batch_size, .. } => {
                let ds = load_csv(csv, target.as_deref()).with_context(|| format!("loading {}", csv.display()))?;
                let params = AdvHptParams { c: *c, mu: *mu, split: split.clone() };
                let problem = Box::new(AdvHptProblem::new(&ds, &params)?);
                let init = problem.default_init();
                Ok(Built::AdvHpt { problem, init, batch_size: *batch_size })
            }
        }
    }

    pub fn oracle(&self) -> &dyn ProblemOracle {
        match self {
            Built::Synthetic { problem, .. } => problem,
            Built::AdvHpt { problem, .. } => problem.as_ref(),
        }
    }

    pub fn init(&self) -> &Point {
        match self {
            Built::Synthetic { init, .. } | Built::AdvHpt { init, .. } => init,
        }
    }
}

/// Noisy-test summary of one adv-hpt run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisyTestRow {
    pub run_id: u64,
    pub seed: u64,
    pub noise_std: f64,
    pub realizations: usize,
    pub clean_test_mse: f64,
    pub mean_noisy_test_mse: f64,
}

pub struct RunOutcome {
    pub run_id: u64,
    pub seed: u64,
    pub trace: RunTrace,
    pub error: Option<String>,
    pub noisy: Option<NoisyTestRow>,
}

pub struct ExperimentReport {
    pub runs: Vec<RunOutcome>,
    pub aggregate: Vec<AggregateRow>,
    pub wall: Vec<WallBucketRow>,
}

impl ExperimentReport {
    pub fn failures(&self) -> Vec<String> {
        self.runs
            .iter()
            .filter_map(|r| r.error.as_ref().map(|e| format!("run {} (seed {}): {e}", r.run_id, r.seed)))
            .collect()
    }
}

/// One run with seed `cfg.run.base_seed + run_id`.
pub fn run_once(cfg: &ExperimentConfig, built: &Built, run_id: u64) -> RunOutcome {
    let seed = cfg.run.base_seed.wrapping_add(run_id);
    let adjoint = cfg.adjoint_config();
    let schedule = cfg.schedule();
    let init = built.init();
    let go = |oracle: &dyn ProblemOracle, sampler: &dyn Sampler| {
        let opts = RunOptions { run_id, ..Default::default() };
        match cfg.run.reduction {
            ReductionConfig::Trilevel => run_tsg(oracle, init, &schedule, &cfg.budget, &adjoint, sampler, opts),
            ReductionConfig::WithoutUl => run_bsg(oracle, Reduction::WithoutUl, init, &schedule, &cfg.budget, &adjoint, sampler, opts),
            ReductionConfig::WithoutLl => run_bsg(oracle, Reduction::WithoutLl, init, &schedule, &cfg.budget, &adjoint, sampler, opts),
        }
    };
    let result = match (built, cfg.noise_levels()) {
        (Built::Synthetic { problem, .. }, Some(levels)) => match GaussianNoise::new(problem, levels.std_grad, levels.std_hess, seed) {
            Ok(noisy) => go(&noisy, &NoiseSampler { run_seed: seed }),
            Err(e) => return failed(run_id, seed, init, e.to_string()),
        },
        (Built::Synthetic { problem, .. }, None) => go(problem, &DeterministicSampler),
        (Built::AdvHpt { problem, batch_size, .. }, _) => {
            let batch_size = if cfg.is_stochastic() { *batch_size } else { problem.n_train() };
            go(problem.as_ref(), &MinibatchSampler { run_seed: seed, population: problem.n_train(), batch_size })
        }
    };
    let (trace, error) = match result {
        Ok(t) => (t, None),
        Err(e) => {
            let msg = e.error.to_string();
            (*e.partial, Some(msg))
        }
    };
    let mut outcome = RunOutcome { run_id, seed, trace, error, noisy: None };
    if let (Built::AdvHpt { problem, .. }, ProblemConfig::AdvHpt { test_noise_std, test_realizations, .. }) = (built, &cfg.problem) {
        if outcome.error.is_none() {
            let theta = &outcome.trace.final_point.y;
            match noisy_test_mse(problem, theta, *test_noise_std, *test_realizations, seed) {
                Ok((mean, _)) => {
                    outcome.noisy = Some(NoisyTestRow {
                        run_id,
                        seed,
                        noise_std: *test_noise_std,
                        realizations: *test_realizations,
                        clean_test_mse: problem.mse(problem.test(), theta),
                        mean_noisy_test_mse: mean,
                    })
                }
                Err(e) => outcome.error = Some(format!("noisy test evaluation: {e}")),
            }
        }
    }
    outcome
}

fn failed(run_id: u64, seed: u64, init: &Point, msg: String) -> RunOutcome {
    let trace = RunTrace { records: Vec::new(), final_point: init.clone(), curvature_events: 0 };
    RunOutcome { run_id, seed, trace, error: Some(msg), noisy: None }
}

/// Runs every repetition on a pool of `jobs` threads and aggregates. No files are written.
pub fn execute(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentReport> {
    for w in cfg.validate()? {
        warn!("{w}");
    }
    let built = Built::new(&cfg.problem)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?;
    let reps = cfg.run.repetitions as u64;
    let runs: Vec<RunOutcome> = pool.install(|| {
        (0..reps)
            .into_par_iter()
            .map(|r| {
                let out = run_once(cfg, &built, r);
                info!("run {r} finished: {} iterations{}", out.trace.records.len(), if out.error.is_some() { " (aborted)" } else { "" });
                out
            })
            .collect()
    });
    let traces: Vec<&[_]> = runs.iter().map(|r| r.trace.records.as_slice()).collect();
    let aggregate = aggregate::by_iteration(&traces);
    let wall = aggregate::by_wall_time(&traces, cfg.run.wall_buckets);
    Ok(ExperimentReport { runs, aggregate, wall })
}

/// Paths of the files written by [`write_outputs`].
pub fn trace_path(dir: &Path, run_id: u64) -> PathBuf {
    dir.join("traces").join(format!("run_{run_id:03}.csv"))
}

pub fn write_outputs(cfg: &ExperimentConfig, report: &ExperimentReport) -> Result<()> {
    let dir = &cfg.run.output_dir;
    fs::create_dir_all(dir.join("traces")).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    for r in &report.runs {
        let path = trace_path(dir, r.run_id);
        write_trace_csv(BufWriter::new(File::create(&path)?), &r.trace.records).with_context(|| format!("writing {}", path.display()))?;
    }
    aggregate::write_rows(File::create(dir.join("aggregate.csv"))?, &report.aggregate)?;
    aggregate::write_rows(File::create(dir.join("wall_time.csv"))?, &report.wall)?;
    if matches!(cfg.problem, ProblemConfig::AdvHpt { .. }) {
        let rows: Vec<NoisyTestRow> = report.runs.iter().filter_map(|r| r.noisy.clone()).collect();
        aggregate::write_rows(File::create(dir.join("noisy_test.csv"))?, &rows)?;
    }
    Ok(())
}

/// `execute` plus `write_outputs`; fails after writing if any run aborted.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentReport> {
    let report = execute(cfg, jobs)?;
    write_outputs(cfg, &report)?;
    let failures = report.failures();
    if !failures.is_empty() {
        bail!("{} of {} runs aborted:\n  {}", failures.len(), report.runs.len(), failures.join("\n  "));
    }
    Ok(report)
}

/// Dataset and split sizes of an adv-hpt config.
pub fn split_info(cfg: &ExperimentConfig) -> Result<String> {
    let ProblemConfig::AdvHpt { csv, target, split, .. } = &cfg.problem else {
        bail!("split-info needs an adv-hpt problem, got {}", cfg.problem.name());
    };
    let ds = load_csv(csv, target.as_deref()).with_context(|| format!("loading {}", csv.display()))?;
    let s = tsg_core::adv_hpt::split_dataset(ds.len(), split)?;
    Ok(format!(
        "dataset {}\nrows {}, features {} ({}), target {}\nsplit seed {}: train {}, val {}, test {}\n",
        csv.display(),
        ds.len(),
        ds.n_features(),
        ds.feature_names.join(", "),
        ds.target_name,
        split.seed,
        s.train.len(),
        s.val.len(),
        s.test.len()
    ))
}
