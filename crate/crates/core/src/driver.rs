//! The nested LL / ML / UL stochastic-gradient loops.
//!
//! Iterates are threaded between cycles: each LL cycle starts from the LL
//! point the previous one returned, each ML call starts from the previous
//! `y`, and the UL step uses the `(y, z)` produced in the same iteration.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adjoint::{calibrated, ml_adjoint_gradient, ul_adjoint_gradient, AdjointConfig};
use crate::error::{check_dim, Result, TsgError};
use crate::linalg::{Matrix, Vector};
use crate::oracle::{
    Block, Dims, Level, OracleCapabilities, Point, ProblemOracle, SampleKey, SampleSpec, Sampler,
};
use crate::trace::{RunTrace, TraceRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepSchedule {
    /// `alpha = 1/sqrt(I)`, `beta = alpha/sqrt(J)`, `gamma = beta/sqrt(K)`.
    TheoremConstant { i: usize, j: usize, k: usize },
    /// `alpha_i = alpha/i` over UL iterations; `beta_j = beta/j` and
    /// `gamma_k = gamma/k` restart at 1 in every ML and LL cycle.
    Decaying { alpha: f64, beta: f64, gamma: f64 },
    Constant { alpha: f64, beta: f64, gamma: f64 },
}

impl StepSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            StepSchedule::TheoremConstant { i, j, k } => {
                if i == 0 || j == 0 || k == 0 {
                    return Err(TsgError::InvalidArgument(
                        "theorem schedule needs positive I, J, K".into(),
                    ));
                }
            }
            StepSchedule::Decaying { alpha, beta, gamma }
            | StepSchedule::Constant { alpha, beta, gamma } => {
                for (name, v) in [("alpha", alpha), ("beta", beta), ("gamma", gamma)] {
                    if !(v > 0.0 && v <= 1.0) {
                        return Err(TsgError::InvalidArgument(format!(
                            "step {name} = {v} outside (0, 1]"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn theorem(i: usize, j: usize, k: usize) -> (f64, f64, f64) {
        let a = 1.0 / (i as f64).sqrt();
        let b = a / (j as f64).sqrt();
        (a, b, b / (k as f64).sqrt())
    }

    /// UL step at 1-based iteration `i`.
    pub fn alpha(&self, i: usize) -> f64 {
        match *self {
            StepSchedule::TheoremConstant { i: ii, j, k } => Self::theorem(ii, j, k).0,
            StepSchedule::Decaying { alpha, .. } => alpha / i.max(1) as f64,
            StepSchedule::Constant { alpha, .. } => alpha,
        }
    }

    /// ML step at 1-based position `j` within a cycle.
    pub fn beta(&self, j: usize) -> f64 {
        match *self {
            StepSchedule::TheoremConstant { i, j: jj, k } => Self::theorem(i, jj, k).1,
            StepSchedule::Decaying { beta, .. } => beta / j.max(1) as f64,
            StepSchedule::Constant { beta, .. } => beta,
        }
    }

    /// LL step at 1-based position `k` within a cycle.
    pub fn gamma(&self, k: usize) -> f64 {
        match *self {
            StepSchedule::TheoremConstant { i, j, k: kk } => Self::theorem(i, j, kk).2,
            StepSchedule::Decaying { gamma, .. } => gamma / k.max(1) as f64,
            StepSchedule::Constant { gamma, .. } => gamma,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IterationBudget {
    pub iters: usize,
    pub j0: usize,
    pub k0: usize,
    pub adaptive: bool,
    pub ul_threshold: f64,
    pub ml_threshold: f64,
}

impl Default for IterationBudget {
    fn default() -> Self {
        IterationBudget {
            iters: 100,
            j0: 1,
            k0: 1,
            adaptive: false,
            ul_threshold: 1e-2,
            ml_threshold: 1e-1,
        }
    }
}

impl IterationBudget {
    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 || self.j0 == 0 || self.k0 == 0 {
            return Err(TsgError::InvalidArgument(
                "iteration budgets must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn initial_state(&self) -> BudgetState {
        BudgetState {
            j: self.j0,
            k: self.k0,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct BudgetState {
    pub j: usize,
    pub k: usize,
}

/// Increasing-accuracy rule: `J += 1` when `|cur_f1 - prev_f1| < ul_threshold`,
/// `K += 1` when `|cur_f2 - prev_f2| < ml_threshold`. No-op unless adaptive.
pub fn adaptive_update(
    budget: &IterationBudget,
    state: BudgetState,
    prev_f1: f64,
    cur_f1: f64,
    prev_f2: f64,
    cur_f2: f64,
) -> BudgetState {
    if !budget.adaptive {
        return state;
    }
    let mut next = state;
    if (cur_f1 - prev_f1).abs() < budget.ul_threshold {
        next.j += 1;
    }
    if (cur_f2 - prev_f2).abs() < budget.ml_threshold {
        next.k += 1;
    }
    next
}

/// Observation hooks for tests and diagnostics. `j` is the 0-based ML index;
/// the extra LL pass after the ML loop reports `j = J`.
pub trait Instrument {
    fn ll_cycle(&mut self, _i: usize, _j: usize, _z_in: &Vector, _z_out: &Vector) {}
    fn ml_step(&mut self, _i: usize, _j: usize, _y_out: &Vector) {}
    fn ul_step(&mut self, _i: usize, _at: &Point, _x_next: &Vector) {}
}

/// Replaces the inner loops by a map `x -> (y(x), z(x, y(x)))`.
pub type ExactInner<'a> = &'a dyn Fn(&Vector) -> Result<(Vector, Vector)>;

#[derive(Default)]
pub struct RunOptions<'a> {
    pub run_id: u64,
    pub instrument: Option<&'a mut dyn Instrument>,
    pub exact_inner: Option<ExactInner<'a>>,
    /// Receives each trace record as soon as it is produced.
    pub sink: Option<&'a mut dyn FnMut(&TraceRecord)>,
}

#[derive(Debug, thiserror::Error)]
#[error("run aborted after {} recorded iterations: {error}", partial.records.len())]
pub struct RunError {
    pub error: TsgError,
    pub partial: Box<RunTrace>,
}

/// `K` steps of `z <- z - gamma_k grad_z f3(x, y, z; xi^{i,j,k})`.
#[allow(clippy::too_many_arguments)]
pub fn ll_sg(
    oracle: &dyn ProblemOracle,
    x: &Vector,
    y: &Vector,
    z0: &Vector,
    schedule: &StepSchedule,
    k_steps: usize,
    sampler: &dyn Sampler,
    (i, j): (usize, usize),
) -> Result<Vector> {
    if k_steps == 0 {
        return Err(TsgError::InvalidArgument("LL budget K must be at least 1".into()));
    }
    let mut p = Point::new(x.clone(), y.clone(), z0.clone());
    p.check(oracle.dims())?;
    for k in 0..k_steps {
        let s = sampler.draw(SampleKey::lower(i, j, k));
        let g = oracle.grad(Level::F3, Block::Z, &p, &s)?;
        if !g.is_finite() {
            return Err(TsgError::NonFinite(format!("LL gradient at (i, j, k) = ({i}, {j}, {k})")));
        }
        p.z.axpy(-schedule.gamma(k + 1), &g);
    }
    Ok(p.z)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlOutcome {
    pub y: Vector,
    pub z: Vector,
    pub last_grad_norm: f64,
    /// Deterministic `f2` before and after the last ML update, both at the final LL point.
    pub f2_prev: f64,
    pub f2_cur: f64,
    pub curvature_events: usize,
}

/// `J` bilevel steps on the ML problem, each preceded by a `K`-step LL cycle.
#[allow(clippy::too_many_arguments)]
pub fn ml_bsg<'i>(
    oracle: &dyn ProblemOracle,
    x: &Vector,
    y0: &Vector,
    z0: &Vector,
    schedule: &StepSchedule,
    (j_steps, k_steps): (usize, usize),
    cfg: &AdjointConfig,
    sampler: &dyn Sampler,
    i: usize,
    mut instrument: Option<&mut (dyn Instrument + 'i)>,
) -> Result<MlOutcome> {
    if j_steps == 0 {
        return Err(TsgError::InvalidArgument("ML budget J must be at least 1".into()));
    }
    let mut p = Point::new(x.clone(), y0.clone(), z0.clone());
    let mut out = MlOutcome {
        y: Vector::zeros(0),
        z: Vector::zeros(0),
        last_grad_norm: 0.0,
        f2_prev: 0.0,
        f2_cur: 0.0,
        curvature_events: 0,
    };
    for j in 0..j_steps {
        let z = ll_sg(oracle, &p.x, &p.y, &p.z, schedule, k_steps, sampler, (i, j))?;
        if let Some(ins) = instrument.as_deref_mut() {
            ins.ll_cycle(i, j, &p.z, &z);
        }
        p.z = z;
        let g = ml_adjoint_gradient(oracle, &p, &sampler.draw(SampleKey::middle(i, j)), cfg)?;
        out.curvature_events += g.curvature_events;
        out.last_grad_norm = g.grad.norm();
        let last = j + 1 == j_steps;
        if last {
            out.f2_prev = oracle.value(Level::F2, &p, &SampleSpec::Deterministic)?;
        }
        p.y.axpy(-schedule.beta(j + 1), &g.grad);
        if last {
            out.f2_cur = oracle.value(Level::F2, &p, &SampleSpec::Deterministic)?;
        }
        if let Some(ins) = instrument.as_deref_mut() {
            ins.ml_step(i, j, &p.y);
        }
    }
    out.y = p.y;
    out.z = p.z;
    Ok(out)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
enum Upper {
    Optimize,
    Fixed,
}

/// Runs `budget.iters` TSG iterations from `init`.
pub fn run_tsg(
    oracle: &dyn ProblemOracle,
    init: &Point,
    schedule: &StepSchedule,
    budget: &IterationBudget,
    cfg: &AdjointConfig,
    sampler: &dyn Sampler,
    opts: RunOptions<'_>,
) -> std::result::Result<RunTrace, RunError> {
    run_nested(oracle, init, schedule, budget, cfg, sampler, opts, Upper::Optimize)
}

/// The two bilevel problems obtained by removing one level.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    /// `x` stays at its initial value; only the ML/LL pair is optimized.
    WithoutUl,
    /// `z` is pinned at zero and the UL/ML pair forms the bilevel problem.
    WithoutLl,
}

/// Runs a bilevel reduction with the same trace schema as [`run_tsg`].
#[allow(clippy::too_many_arguments)]
pub fn run_bsg(
    oracle: &dyn ProblemOracle,
    reduction: Reduction,
    init: &Point,
    schedule: &StepSchedule,
    budget: &IterationBudget,
    cfg: &AdjointConfig,
    sampler: &dyn Sampler,
    opts: RunOptions<'_>,
) -> std::result::Result<RunTrace, RunError> {
    match reduction {
        Reduction::WithoutUl => run_nested(oracle, init, schedule, budget, cfg, sampler, opts, Upper::Fixed),
        Reduction::WithoutLl => {
            let pinned = PinnedLower { inner: oracle };
            let start = Point::new(init.x.clone(), init.y.clone(), Vector::zeros(init.z.dim()));
            run_nested(&pinned, &start, schedule, budget, cfg, sampler, opts, Upper::Optimize)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_nested(
    oracle: &dyn ProblemOracle,
    init: &Point,
    schedule: &StepSchedule,
    budget: &IterationBudget,
    cfg: &AdjointConfig,
    sampler: &dyn Sampler,
    mut opts: RunOptions<'_>,
    upper: Upper,
) -> std::result::Result<RunTrace, RunError> {
    let start = Instant::now();
    let mut trace = RunTrace {
        records: Vec::with_capacity(budget.iters),
        final_point: init.clone(),
        curvature_events: 0,
    };
    let fail = |trace: RunTrace, error: TsgError| RunError {
        error,
        partial: Box::new(trace),
    };
    let setup = || -> Result<AdjointConfig> {
        schedule.validate()?;
        budget.validate()?;
        init.check(oracle.dims())?;
        calibrated(oracle, init, &SampleSpec::Deterministic, cfg)
    };
    let cfg = match setup() {
        Ok(c) => c,
        Err(e) => return Err(fail(trace, e)),
    };
    if let (Some(c0), Some(c1)) = (cfg.c0, cfg.c1) {
        log::debug!("Neumann scales c0 = {c0:.4e}, c1 = {c1:.4e}");
    }

    let det = SampleSpec::Deterministic;
    let mut p = init.clone();
    let mut state = budget.initial_state();
    let mut prev_f1 = match oracle.value(Level::F1, &p, &det) {
        Ok(v) => v,
        Err(e) => return Err(fail(trace, e)),
    };
    let (mut cum_ml, mut cum_ll) = (0usize, 0usize);

    for i in 1..=budget.iters {
        let alpha = schedule.alpha(i);
        let step = |p: &mut Point, opts: &mut RunOptions<'_>| -> Result<(f64, f64, f64, usize)> {
            let (ml_f2, mut gnorm, mut curv);
            if let Some(exact) = opts.exact_inner {
                let (y, z) = exact(&p.x)?;
                check_dim("exact inner y", p.y.dim(), y.dim())?;
                check_dim("exact inner z", p.z.dim(), z.dim())?;
                p.y = y;
                p.z = z;
                let f2 = oracle.value(Level::F2, p, &det)?;
                ml_f2 = (f2, f2);
                gnorm = 0.0;
                curv = 0;
            } else {
                let ml = ml_bsg(
                    oracle,
                    &p.x,
                    &p.y,
                    &p.z,
                    schedule,
                    (state.j, state.k),
                    &cfg,
                    sampler,
                    i,
                    opts.instrument.as_deref_mut(),
                )?;
                let z = ll_sg(oracle, &p.x, &ml.y, &ml.z, schedule, state.k, sampler, (i, state.j))?;
                if let Some(ins) = opts.instrument.as_deref_mut() {
                    ins.ll_cycle(i, state.j, &ml.z, &z);
                }
                p.y = ml.y;
                p.z = z;
                ml_f2 = (ml.f2_prev, ml.f2_cur);
                gnorm = ml.last_grad_norm;
                curv = ml.curvature_events;
            }
            if upper == Upper::Optimize {
                let g = ul_adjoint_gradient(oracle, p, &sampler.draw(SampleKey::upper(i)), &cfg)?;
                curv += g.curvature_events;
                gnorm = g.grad.norm();
                let x_next = p.x.plus_scaled(-alpha, &g.grad);
                if let Some(ins) = opts.instrument.as_deref_mut() {
                    ins.ul_step(i, p, &x_next);
                }
                p.x = x_next;
            }
            Ok((ml_f2.0, ml_f2.1, gnorm, curv))
        };
        let (f2_prev, f2_cur, gnorm, curv) = match step(&mut p, &mut opts) {
            Ok(v) => v,
            Err(e) => {
                trace.final_point = p;
                return Err(fail(trace, e));
            }
        };
        trace.curvature_events += curv;
        if opts.exact_inner.is_none() {
            cum_ml += state.j;
            cum_ll += (state.j + 1) * state.k;
        }
        let values = (|| -> Result<(f64, f64, f64)> {
            Ok((
                oracle.value(Level::F1, &p, &det)?,
                oracle.value(Level::F2, &p, &det)?,
                oracle.value(Level::F3, &p, &det)?,
            ))
        })();
        let (f1, f2, f3) = match values {
            Ok(v) => v,
            Err(e) => {
                trace.final_point = p;
                return Err(fail(trace, e));
            }
        };
        if !f1.is_finite() {
            trace.final_point = p;
            return Err(fail(trace, TsgError::NonFinite(format!("f1 at UL iteration {i}"))));
        }
        let rec = TraceRecord {
            run_id: opts.run_id,
            i,
            cum_ml,
            cum_ll,
            wall_s: start.elapsed().as_secs_f64(),
            f1,
            f2,
            f3,
            gnorm,
            j: state.j,
            k: state.k,
            alpha,
            beta: schedule.beta(1),
            gamma: schedule.gamma(1),
        };
        log::trace!("iteration {i}: f1 = {f1:.6e}, |g| = {gnorm:.3e}, J = {}, K = {}", state.j, state.k);
        if let Some(sink) = opts.sink.as_deref_mut() {
            sink(&rec);
        }
        trace.records.push(rec);
        state = adaptive_update(budget, state, prev_f1, f1, f2_prev, f2_cur);
        prev_f1 = f1;
    }
    log::debug!(
        "finished {} UL iterations in {:.3}s",
        budget.iters,
        start.elapsed().as_secs_f64()
    );
    trace.final_point = p;
    Ok(trace)
}

/// Replaces the LL objective by `0.5 ||z||^2`, pinning its solution at zero.
struct PinnedLower<'a> {
    inner: &'a dyn ProblemOracle,
}

impl ProblemOracle for PinnedLower<'_> {
    fn dims(&self) -> Dims {
        self.inner.dims()
    }

    fn capabilities(&self) -> OracleCapabilities {
        let c = self.inner.capabilities();
        OracleCapabilities {
            has_hessians: c.has_hessians,
            has_third_order: c.has_hessians,
            has_hvp: c.has_hvp,
        }
    }

    fn value(&self, level: Level, p: &Point, s: &SampleSpec) -> Result<f64> {
        match level {
            Level::F3 => Ok(0.5 * p.z.norm_sq()),
            _ => self.inner.value(level, p, s),
        }
    }

    fn grad(&self, level: Level, wrt: Block, p: &Point, s: &SampleSpec) -> Result<Vector> {
        match (level, wrt) {
            (Level::F3, Block::Z) => Ok(p.z.clone()),
            (Level::F3, b) => Ok(Vector::zeros(self.dims().of(b))),
            _ => self.inner.grad(level, wrt, p, s),
        }
    }

    fn hess(&self, level: Level, row: Block, col: Block, p: &Point, s: &SampleSpec) -> Result<Matrix> {
        match (level, row, col) {
            (Level::F3, Block::Z, Block::Z) => Ok(Matrix::identity(p.z.dim())),
            (Level::F3, r, c) => Ok(Matrix::zeros(self.dims().of(r), self.dims().of(c))),
            _ => self.inner.hess(level, row, col, p, s),
        }
    }

    fn hvp(&self, level: Level, row: Block, col: Block, p: &Point, s: &SampleSpec, v: &Vector) -> Result<Vector> {
        match (level, row, col) {
            (Level::F3, Block::Z, Block::Z) => Ok(v.clone()),
            (Level::F3, r, _) => Ok(Vector::zeros(self.dims().of(r))),
            _ => self.inner.hvp(level, row, col, p, s, v),
        }
    }

    fn third_contract(&self, row: Block, col: Block, _p: &Point, _s: &SampleSpec, _v: &Vector) -> Result<Matrix> {
        Ok(Matrix::zeros(self.dims().of(row), self.dims().of(col)))
    }
}
