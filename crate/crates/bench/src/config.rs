//! Experiment configuration.
//!
//! A config is a TOML file with one table per concern:
//!
//! ```toml
//! [problem]
//! kind = "quadratic"      # quadratic | quartic | adv-hpt
//! n = 10
//! m = 10
//! t = 10
//!
//! [engine]
//! kind = "H"              # H | NFD | AD
//!
//! [mode]
//! kind = "stochastic"     # deterministic | stochastic
//! std_grad = 1.0
//! std_hess = 0.1
//!
//! [schedule]              # optional; defaults follow the tuned step-size rows
//! kind = "decaying"
//! alpha = 0.1
//! beta = 0.1
//! gamma = 0.1
//!
//! [budget]
//! iters = 300
//! adaptive = true
//!
//! [run]
//! repetitions = 10
//! base_seed = 0
//! output_dir = "results/quadratic-h"
//! ```
//!
//! Every field has a default, so an empty file is a valid deterministic
//! quadratic TSG-H experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tsg_core::adjoint::{AdjointConfig, Engine};
use tsg_core::adv_hpt::{AdvHptProblem, SplitSpec};
use tsg_core::driver::{IterationBudget, StepSchedule};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Gaussian oracle noise used when a stochastic synthetic run gives no levels.
pub const LOW_NOISE: (f64, f64) = (0.01, 0.01);
/// The heavier setting shipped in the example configs.
pub const HIGH_NOISE: (f64, f64) = (1.0, 0.1);
/// Above this Hessian noise the H engine is known to degrade badly.
pub const H_NOISE_WARNING: f64 = 0.1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub problem: ProblemConfig,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub mode: ModeConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<StepSchedule>,
    #[serde(default)]
    pub budget: IterationBudget,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProblemConfig {
    Quadratic {
        #[serde(default = "ten")]
        n: usize,
        #[serde(default = "ten")]
        m: usize,
        #[serde(default = "ten")]
        t: usize,
        /// Seed of the random linear terms.
        #[serde(default)]
        instance_seed: u64,
        /// Seed of the initial point. Run seeds only drive the noise.
        #[serde(default)]
        init_seed: u64,
    },
    Quartic {
        #[serde(default = "five")]
        n: usize,
        #[serde(default = "five")]
        m: usize,
        #[serde(default = "one")]
        t: usize,
        #[serde(default)]
        instance_seed: u64,
        #[serde(default)]
        init_seed: u64,
    },
    /// A full synthetic spec in JSON. Defaults use the quadratic step rows.
    SpecJson {
        path: PathBuf,
        #[serde(default)]
        init_seed: u64,
    },
    AdvHpt {
        /// Relative paths are resolved against the config file's directory.
        csv: PathBuf,
        /// Defaults to the last column.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target: Option<String>,
        #[serde(default = "adv_c")]
        c: f64,
        #[serde(default = "adv_mu")]
        mu: f64,
        #[serde(default)]
        split: SplitSpec,
        /// Minibatch size in stochastic mode.
        #[serde(default = "batch")]
        batch_size: usize,
        #[serde(default = "test_noise")]
        test_noise_std: f64,
        #[serde(default = "realizations")]
        test_realizations: usize,
    },
}

fn one() -> usize {
    1
}
fn five() -> usize {
    5
}
fn ten() -> usize {
    10
}
fn adv_c() -> f64 {
    0.1
}
fn adv_mu() -> f64 {
    0.25
}
fn batch() -> usize {
    64
}
fn test_noise() -> f64 {
    5.0
}
fn realizations() -> usize {
    100
}

impl Default for ProblemConfig {
    fn default() -> Self {
        ProblemConfig::Quadratic { n: 10, m: 10, t: 10, instance_seed: 0, init_seed: 0 }
    }
}

impl ProblemConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ProblemConfig::Quadratic { .. } => "quadratic",
            ProblemConfig::Quartic { .. } => "quartic",
            ProblemConfig::SpecJson { .. } => "spec-json",
            ProblemConfig::AdvHpt { .. } => "adv-hpt",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    pub kind: Engine,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fd_eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neumann_q: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cg_tol: Option<f64>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig { kind: Engine::H, fd_eps: None, neumann_q: None, c0: None, c1: None, cg_tol: None }
    }
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModeConfig {
    #[default]
    Deterministic,
    /// Gaussian oracle noise for synthetic problems, minibatches for adv-hpt.
    Stochastic {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        std_grad: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        std_hess: Option<f64>,
    },
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReductionConfig {
    #[default]
    Trilevel,
    WithoutUl,
    WithoutLl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub repetitions: usize,
    pub base_seed: u64,
    pub output_dir: PathBuf,
    pub reduction: ReductionConfig,
    /// Number of equal-width wall-clock buckets in `wall_time.csv`.
    pub wall_buckets: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            repetitions: 10,
            base_seed: 0,
            output_dir: PathBuf::from("results"),
            reduction: ReductionConfig::Trilevel,
            wall_buckets: 20,
        }
    }
}

/// Tolerances of the `verify` subcommand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    /// Largest allowed relative error of any pair involving an approximate
    /// engine. NFD at eps = 0.1 is off by about 3e-3 on the quartic.
    pub agreement_tol: f64,
    /// Largest allowed relative error between TSG-H and the FD referee.
    pub referee_tol: f64,
    /// Smallest allowed error ratio between the two FD steps of the derivative checks.
    pub min_fd_ratio: f64,
    pub fd_eps_coarse: f64,
    pub fd_eps_fine: f64,
    /// Outer step of the FD referee for the reduced gradient.
    pub referee_eps: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig { agreement_tol: 1e-2, referee_tol: 1e-6, min_fd_ratio: 50.0, fd_eps_coarse: 1e-2, fd_eps_fine: 1e-3, referee_eps: 1e-4 }
    }
}

/// Noise levels after defaults are applied. `None` means deterministic or minibatch.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct NoiseLevels {
    pub std_grad: f64,
    pub std_hess: f64,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        Ok(cfg)
    }

    /// Parses the file and resolves a relative dataset path against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let mut cfg = Self::from_toml(&text)?;
        if let ProblemConfig::AdvHpt { csv: file, .. } | ProblemConfig::SpecJson { path: file, .. } = &mut cfg.problem {
            if file.is_relative() {
                if let Some(dir) = path.parent() {
                    *file = dir.join(&*file);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable as TOML")
    }

    /// Checks everything that does not need the dataset. Returns warnings.
    pub fn validate(&self) -> Result<Vec<String>, ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let mut warnings = Vec::new();
        match &self.problem {
            ProblemConfig::Quadratic { n, m, t, .. } | ProblemConfig::Quartic { n, m, t, .. } => {
                if *n == 0 || *m == 0 || *t == 0 {
                    return bad("problem dimensions must be positive".into());
                }
            }
            ProblemConfig::SpecJson { .. } => {}
            ProblemConfig::AdvHpt { c, mu, batch_size, test_noise_std, test_realizations, .. } => {
                if !(*c > 0.0) || !(*mu > 0.0) {
                    return bad("adv-hpt needs c > 0 and mu > 0".into());
                }
                if *batch_size == 0 || *test_realizations == 0 || !(*test_noise_std >= 0.0) {
                    return bad("adv-hpt needs positive batch_size and test_realizations and test_noise_std >= 0".into());
                }
                if let ModeConfig::Stochastic { std_grad, std_hess } = self.mode {
                    if std_grad.is_some() || std_hess.is_some() {
                        return bad("adv-hpt stochasticity comes from minibatches; drop std_grad and std_hess".into());
                    }
                }
            }
        }
        if let Some(levels) = self.noise_levels() {
            if !(levels.std_grad >= 0.0 && levels.std_hess >= 0.0) {
                return bad("noise levels must be nonnegative".into());
            }
            if self.engine.kind == Engine::H && levels.std_hess > H_NOISE_WARNING {
                warnings.push(format!(
                    "TSG-H with std_hess = {} > {H_NOISE_WARNING}: expect strongly degraded progress",
                    levels.std_hess
                ));
            }
        }
        self.adjoint_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.schedule().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.budget.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.run.repetitions == 0 {
            return bad("repetitions must be at least 1".into());
        }
        if self.run.wall_buckets == 0 {
            return bad("wall_buckets must be at least 1".into());
        }
        let v = &self.verify;
        if !(v.agreement_tol > 0.0 && v.referee_tol > 0.0 && v.min_fd_ratio > 0.0 && v.fd_eps_fine > 0.0 && v.fd_eps_coarse > v.fd_eps_fine && v.referee_eps > 0.0) {
            return bad("verify needs positive tolerances and fd_eps_coarse > fd_eps_fine".into());
        }
        Ok(warnings)
    }

    /// Gaussian noise for stochastic synthetic runs.
    pub fn noise_levels(&self) -> Option<NoiseLevels> {
        match (&self.problem, self.mode) {
            (ProblemConfig::AdvHpt { .. }, _) | (_, ModeConfig::Deterministic) => None,
            (_, ModeConfig::Stochastic { std_grad, std_hess }) => Some(NoiseLevels {
                std_grad: std_grad.unwrap_or(LOW_NOISE.0),
                std_hess: std_hess.unwrap_or(LOW_NOISE.1),
            }),
        }
    }

    pub fn is_stochastic(&self) -> bool {
        matches!(self.mode, ModeConfig::Stochastic { .. })
    }

    pub fn adjoint_config(&self) -> AdjointConfig {
        let e = &self.engine;
        let mut cfg = match self.problem {
            ProblemConfig::AdvHpt { .. } => AdvHptProblem::default_adjoint_config(e.kind),
            _ => AdjointConfig::with_engine(e.kind),
        };
        if let Some(v) = e.fd_eps {
            cfg.fd_eps = v;
        }
        if let Some(v) = e.neumann_q {
            cfg.neumann_q = v;
        }
        if e.c0.is_some() {
            cfg.c0 = e.c0;
        }
        if e.c1.is_some() {
            cfg.c1 = e.c1;
        }
        if let Some(v) = e.cg_tol {
            cfg.cg_tol = v;
        }
        cfg
    }

    /// The explicit schedule, or the tuned decaying row for this problem, engine and mode.
    pub fn schedule(&self) -> StepSchedule {
        if let Some(s) = &self.schedule {
            return s.clone();
        }
        let (alpha, beta, gamma) = default_steps(&self.problem, self.engine.kind, self.is_stochastic(), self.run.reduction);
        StepSchedule::Decaying { alpha, beta, gamma }
    }
}

/// Tuned `(alpha, beta, gamma)` for decaying steps. Levels a reduction does not
/// use get a placeholder of 0.1.
pub fn default_steps(problem: &ProblemConfig, engine: Engine, stochastic: bool, reduction: ReductionConfig) -> (f64, f64, f64) {
    match problem {
        ProblemConfig::Quadratic { .. } | ProblemConfig::SpecJson { .. } => match (engine, stochastic) {
            (Engine::H, false) => (0.3, 0.2, 0.1),
            (Engine::Nfd, false) => (0.01, 0.1, 0.05),
            (Engine::Ad, false) => (0.01, 0.1, 0.1),
            (Engine::H, true) => (0.1, 0.1, 0.1),
            (_, true) => (0.01, 0.1, 0.1),
        },
        ProblemConfig::Quartic { .. } => match (engine, stochastic) {
            (Engine::H, _) => (0.3, 0.2, 0.1),
            (Engine::Nfd, true) => (0.01, 0.01, 0.001),
            _ => (0.3, 0.2, 0.0001),
        },
        ProblemConfig::AdvHpt { .. } => match (engine, reduction) {
            (_, ReductionConfig::WithoutUl) => (0.1, 0.01, 0.1),
            (_, ReductionConfig::WithoutLl) => (0.1, 0.01, 0.1),
            (Engine::Nfd, _) => (0.1, 0.1, 0.1),
            _ => (0.1, 0.01, 0.1),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.schedule(), StepSchedule::Decaying { alpha: 0.3, beta: 0.2, gamma: 0.1 });
        assert!(cfg.validate().unwrap().is_empty());
    }

    #[test]
    fn round_trip_keeps_every_field() {
        let text = r#"
            [problem]
            kind = "adv-hpt"
            csv = "data.csv"
            target = "y"
            batch_size = 32
            [problem.split]
            seed = 4
            [engine]
            kind = "AD"
            neumann_q = 12
            [mode]
            kind = "stochastic"
            [schedule]
            kind = "constant"
            alpha = 0.1
            beta = 0.01
            gamma = 0.1
            [budget]
            iters = 50
            adaptive = true
            [run]
            repetitions = 3
            base_seed = 99
            reduction = "without-ll"
        "#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.run.reduction, ReductionConfig::WithoutLl);
        assert_eq!(cfg.adjoint_config().c0, Some(1.0));
        assert_eq!(cfg.adjoint_config().neumann_q, 12);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("[run]\nrepetition = 3").is_err());
        assert!(ExperimentConfig::from_toml("[problem]\nkind = \"quartic\"\ncsv = \"a.csv\"").is_err());
    }

    #[test]
    fn zero_repetitions_fail_validation() {
        let cfg = ExperimentConfig::from_toml("[run]\nrepetitions = 0").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn noisy_hessians_with_h_only_warn() {
        let cfg = ExperimentConfig::from_toml("[mode]\nkind = \"stochastic\"\nstd_grad = 1.0\nstd_hess = 0.5").unwrap();
        let w = cfg.validate().unwrap();
        assert_eq!(w.len(), 1, "{w:?}");
        let cfg = ExperimentConfig::from_toml("[mode]\nkind = \"stochastic\"").unwrap();
        assert_eq!(cfg.noise_levels(), Some(NoiseLevels { std_grad: 0.01, std_hess: 0.01 }));
        assert!(cfg.validate().unwrap().is_empty());
    }

    #[test]
    fn adv_hpt_rejects_gaussian_levels() {
        let cfg = ExperimentConfig::from_toml("[problem]\nkind = \"adv-hpt\"\ncsv = \"x.csv\"\n[mode]\nkind = \"stochastic\"\nstd_grad = 0.1").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn defaults_follow_step_rows() {
        let quartic = ProblemConfig::Quartic { n: 5, m: 5, t: 1, instance_seed: 0, init_seed: 0 };
        assert_eq!(default_steps(&quartic, Engine::Nfd, true, ReductionConfig::Trilevel), (0.01, 0.01, 0.001));
        assert_eq!(default_steps(&ProblemConfig::default(), Engine::Nfd, false, ReductionConfig::Trilevel), (0.01, 0.1, 0.05));
    }
}
