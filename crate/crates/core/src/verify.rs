//! Brute-force referees: a finite-difference oracle for the reduced UL
//! gradient, pairwise engine agreement, and derivative/Neumann error probes.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::adjoint::{calibrated, exact_fbar_hessians, ml_adjoint_gradient, neumann_inverse_apply, AdjointConfig, Engine};
use crate::error::{Result, TsgError};
use crate::linalg::{power_iteration, Matrix, Vector};
use crate::oracle::{fd_hvp, Block, Level, OracleExt, Point, ProblemOracle, SampleSpec};
use crate::synthetic::{LowerLevel, SyntheticSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FdOracleConfig {
    pub outer_eps: f64,
    /// Gradient-norm target for both inner descents.
    pub inner_tol: f64,
    pub inner_max_iters: usize,
    /// Take `y(x)`, `z(x, y)` from the closed forms (quadratic specs only).
    pub use_closed_form: bool,
}

impl Default for FdOracleConfig {
    fn default() -> Self {
        FdOracleConfig {
            outer_eps: 1e-4,
            inner_tol: 1e-10,
            inner_max_iters: 200_000,
            use_closed_form: false,
        }
    }
}

impl FdOracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.outer_eps > 0.0) || !(self.inner_tol > 0.0) || self.inner_max_iters == 0 {
            return Err(TsgError::InvalidArgument(format!("invalid FD referee config {self:?}")));
        }
        Ok(())
    }
}

/// How the referee obtains inner solutions.
#[derive(Clone, Copy, Debug)]
pub enum InnerSource<'a> {
    ClosedForm(&'a SyntheticSpec),
    /// Deterministic gradient descent warm-started from the given point.
    Descent(&'a Point),
}

/// Relative increase tolerated before a descent step is halved: large
/// enough to ignore rounding and inner-solve noise in the objective, small
/// enough to catch a step that overshoots.
const BACKTRACK_SLACK: f64 = 1e-9;

fn descent_step(l_hat: f64) -> f64 {
    let l = if l_hat.is_finite() && l_hat > 0.0 { l_hat } else { 1.0 };
    0.5 / l
}

/// Gradient descent on `f3(x, y, .)` until `||grad_z f3|| <= tol`. The step
/// starts at `1 / (2 L)` from a power-iteration curvature estimate and is
/// halved whenever a step would increase `f3`.
pub fn solve_lower(oracle: &dyn ProblemOracle, x: &Vector, y: &Vector, z0: &Vector, cfg: &FdOracleConfig) -> Result<Vector> {
    let s = SampleSpec::Deterministic;
    let mut p = Point::new(x.clone(), y.clone(), z0.clone());
    let mut val = oracle.f3(&p, &s)?;
    let mut step = 0.0;
    for it in 0..cfg.inner_max_iters {
        let g = oracle.grad_z_f3(&p, &s)?;
        let r = g.norm();
        if !r.is_finite() {
            return Err(TsgError::NonFinite("lower-level descent".into()));
        }
        if r <= cfg.inner_tol {
            return Ok(p.z);
        }
        if it % 500 == 0 {
            let l = power_iteration(|v| oracle.hvp_zz_f3(&p, &s, v), p.z.dim(), 20)?;
            step = descent_step(l);
        }
        loop {
            let trial = p.shifted(Block::Z, -step, &g);
            let tv = oracle.f3(&trial, &s)?;
            if tv <= val + BACKTRACK_SLACK * (1.0 + val.abs()) || step < 1e-300 {
                p = trial;
                val = tv;
                break;
            }
            step *= 0.5;
        }
    }
    let r = oracle.grad_z_f3(&p, &s)?.norm();
    Err(TsgError::InnerNotConverged { residual: r, tol: cfg.inner_tol })
}

fn h_cfg() -> AdjointConfig {
    AdjointConfig::with_engine(Engine::H)
}

fn fbar_grad_y(oracle: &dyn ProblemOracle, p: &Point) -> Result<Vector> {
    Ok(ml_adjoint_gradient(oracle, p, &SampleSpec::Deterministic, &h_cfg())?.grad)
}

fn fbar_curvature(oracle: &dyn ProblemOracle, p: &Point, cfg: &FdOracleConfig) -> Result<f64> {
    if oracle.capabilities().has_third_order {
        let (_, hyy) = exact_fbar_hessians(oracle, p, &SampleSpec::Deterministic)?;
        return power_iteration(|v| hyy.matvec(v), p.y.dim(), 20);
    }
    let grad_at = |y: &Vector| -> Result<Vector> {
        let z = solve_lower(oracle, &p.x, y, &p.z, cfg)?;
        fbar_grad_y(oracle, &Point::new(p.x.clone(), y.clone(), z))
    };
    power_iteration(|v| fd_hvp(grad_at, &p.y, v, 1e-5), p.y.dim(), 10)
}

/// `(y(x), z(x, y(x)))` by nested deterministic descent from `warm`, with
/// the same step rule as [`solve_lower`] applied to `fbar(x, .)`.
pub fn solve_inner(oracle: &dyn ProblemOracle, x: &Vector, warm: &Point, cfg: &FdOracleConfig) -> Result<Point> {
    let s = SampleSpec::Deterministic;
    // The reduced gradient inherits the LL error, so solve the LL tighter.
    let ll = FdOracleConfig {
        inner_tol: cfg.inner_tol * 1e-2,
        ..cfg.clone()
    };
    let z = solve_lower(oracle, x, &warm.y, &warm.z, &ll)?;
    let mut p = Point::new(x.clone(), warm.y.clone(), z);
    let mut val = oracle.f2(&p, &s)?;
    let mut step = 0.0;
    for it in 0..cfg.inner_max_iters {
        let g = fbar_grad_y(oracle, &p)?;
        let r = g.norm();
        if !r.is_finite() {
            return Err(TsgError::NonFinite("middle-level descent".into()));
        }
        if r <= cfg.inner_tol {
            return Ok(p);
        }
        if it % 500 == 0 {
            step = descent_step(fbar_curvature(oracle, &p, &ll)?);
        }
        loop {
            let y = p.y.plus_scaled(-step, &g);
            let z = solve_lower(oracle, x, &y, &p.z, &ll)?;
            let trial = Point::new(x.clone(), y, z);
            let tv = oracle.f2(&trial, &s)?;
            if tv <= val + BACKTRACK_SLACK * (1.0 + val.abs()) || step < 1e-300 {
                p = trial;
                val = tv;
                break;
            }
            step *= 0.5;
        }
    }
    let r = fbar_grad_y(oracle, &p)?.norm();
    Err(TsgError::InnerNotConverged { residual: r, tol: cfg.inner_tol })
}

fn reduced_value(oracle: &dyn ProblemOracle, src: InnerSource<'_>, x: &Vector, cfg: &FdOracleConfig) -> Result<f64> {
    let p = match src {
        InnerSource::ClosedForm(spec) => spec.solution_path(x)?,
        InnerSource::Descent(warm) => solve_inner(oracle, x, warm, cfg)?,
    };
    oracle.f1(&p, &SampleSpec::Deterministic)
}

/// Central differences of `f(x) = f1(x, y(x), z(x, y(x)))`.
pub fn fd_grad_f(oracle: &dyn ProblemOracle, src: InnerSource<'_>, x: &Vector, cfg: &FdOracleConfig) -> Result<Vector> {
    cfg.validate()?;
    if let InnerSource::ClosedForm(spec) = src {
        if spec.lower != LowerLevel::Quadratic {
            return Err(TsgError::InvalidArgument("closed-form inner solutions need a quadratic spec".into()));
        }
    }
    if cfg.use_closed_form != matches!(src, InnerSource::ClosedForm(_)) {
        return Err(TsgError::InvalidArgument("use_closed_form does not match the inner source".into()));
    }
    // Warm-start every perturbed solve from the solution at x so all of them
    // track the same inner branch.
    let center;
    let src = match src {
        InnerSource::Descent(warm) => {
            center = solve_inner(oracle, x, warm, cfg)?;
            InnerSource::Descent(&center)
        }
        cf => cf,
    };
    let h = cfg.outer_eps;
    let mut g = Vector::zeros(x.dim());
    for a in 0..x.dim() {
        let e = Vector::basis(x.dim(), a);
        let fp = reduced_value(oracle, src, &x.plus_scaled(h, &e), cfg)?;
        let fm = reduced_value(oracle, src, &x.plus_scaled(-h, &e), cfg)?;
        g[a] = (fp - fm) / (2.0 * h);
    }
    Ok(g)
}

#[derive(Clone, Debug)]
pub struct AgreementReport {
    pub labels: Vec<String>,
    pub gradients: Vec<Vector>,
    /// `errors[(a, b)]` is the relative discrepancy between outputs `a` and `b`.
    pub errors: Matrix,
}

impl AgreementReport {
    pub fn max_error(&self) -> f64 {
        self.errors.max_abs()
    }

    pub fn error(&self, a: &str, b: &str) -> Option<f64> {
        let ia = self.labels.iter().position(|l| l == a)?;
        let ib = self.labels.iter().position(|l| l == b)?;
        Some(self.errors[(ia, ib)])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("a,b,rel_error\n");
        for a in 0..self.labels.len() {
            for b in a + 1..self.labels.len() {
                out.push_str(&format!("{},{},{:e}\n", self.labels[a], self.labels[b], self.errors[(a, b)]));
            }
        }
        out
    }
}

impl fmt::Display for AgreementReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.labels.iter().map(String::len).max().unwrap_or(0).max(10);
        write!(f, "{:w$}", "")?;
        for l in &self.labels {
            write!(f, "  {l:>w$}")?;
        }
        writeln!(f)?;
        for (a, l) in self.labels.iter().enumerate() {
            write!(f, "{l:w$}")?;
            for b in 0..self.labels.len() {
                write!(f, "  {:>w$.3e}", self.errors[(a, b)])?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

pub fn config_label(cfg: &AdjointConfig) -> String {
    match cfg.engine {
        Engine::H => "TSG-H".into(),
        Engine::Nfd => format!("TSG-N-FD(eps={})", cfg.fd_eps),
        Engine::Ad => format!("TSG-AD(Q={})", cfg.neumann_q),
    }
}

/// Reduced UL gradients from every config at `p` (plus an optional referee
/// vector), with all pairwise relative discrepancies.
pub fn engine_agreement_report(
    oracle: &dyn ProblemOracle,
    p: &Point,
    s: &SampleSpec,
    cfgs: &[AdjointConfig],
    referee: Option<&Vector>,
) -> Result<AgreementReport> {
    if cfgs.len() + usize::from(referee.is_some()) < 2 {
        return Err(TsgError::InvalidArgument("agreement report needs at least two outputs".into()));
    }
    let mut labels: Vec<String> = Vec::new();
    let mut gradients = Vec::new();
    for cfg in cfgs {
        let cfg = calibrated(oracle, p, s, cfg)?;
        gradients.push(crate::adjoint::ul_adjoint_gradient(oracle, p, s, &cfg)?.grad);
        let base = config_label(&cfg);
        let dup = labels.iter().filter(|l| l.split('#').next() == Some(base.as_str())).count();
        labels.push(if dup == 0 { base } else { format!("{base}#{}", dup + 1) });
    }
    if let Some(r) = referee {
        labels.push("FD-referee".into());
        gradients.push(r.clone());
    }
    let k = gradients.len();
    let errors = Matrix::from_fn(k, k, |a, b| gradients[a].relative_error(&gradients[b]));
    Ok(AgreementReport { labels, gradients, errors })
}

/// One analytic-versus-FD comparison at two step sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct DerivativeCheck {
    pub label: String,
    pub err_coarse: f64,
    pub err_fine: f64,
    /// Largest magnitude in the analytic quantity.
    pub scale: f64,
}

/// Below this (relative to `1 + scale`) the coarse FD already matches to
/// rounding, as it does for derivatives of polynomials of low degree.
pub const FD_EXACT_FLOOR: f64 = 1e-9;

impl DerivativeCheck {
    pub fn ratio(&self) -> f64 {
        self.err_coarse / self.err_fine
    }

    pub fn exact(&self) -> bool {
        self.err_coarse <= FD_EXACT_FLOOR * (1.0 + self.scale)
    }

    pub fn passed(&self, min_ratio: f64) -> bool {
        self.exact() || self.ratio() >= min_ratio
    }
}

const BLOCKS: [Block; 3] = [Block::X, Block::Y, Block::Z];

fn probe_direction(dim: usize, salt: usize) -> Vector {
    Vector::from_fn(dim, |i| ((i * 7 + salt * 13 + 3) as f64 * 0.618_034).sin())
}

/// Every Hessian block of every level against central differences of the
/// gradient (all columns), and every third-order contraction of `f3`
/// against central differences of the Hessian along `z`, at steps `eps.0`
/// and `eps.1`.
pub fn derivative_checks(oracle: &dyn ProblemOracle, p: &Point, s: &SampleSpec, eps: (f64, f64)) -> Result<Vec<DerivativeCheck>> {
    let caps = oracle.capabilities();
    if !caps.has_hessians {
        return Err(TsgError::Unsupported("derivative checks need analytic Hessians".into()));
    }
    let dims = oracle.dims();
    let mut out = Vec::new();
    for level in [Level::F1, Level::F2, Level::F3] {
        for row in BLOCKS {
            for col in BLOCKS {
                let h = oracle.hess(level, row, col, p, s)?;
                let fd = |e: f64| -> Result<f64> {
                    let mut err: f64 = 0.0;
                    for c in 0..dims.of(col) {
                        let dir = Vector::basis(dims.of(col), c);
                        let gp = oracle.grad(level, row, &p.shifted(col, e, &dir), s)?;
                        let gm = oracle.grad(level, row, &p.shifted(col, -e, &dir), s)?;
                        let col_fd = (&gp - &gm).scaled(0.5 / e);
                        err = err.max((&col_fd - &h.column(c)).max_abs());
                    }
                    Ok(err)
                };
                out.push(DerivativeCheck {
                    label: format!("hess {level:?} {row:?}{col:?}"),
                    err_coarse: fd(eps.0)?,
                    err_fine: fd(eps.1)?,
                    scale: h.max_abs(),
                });
            }
        }
    }
    if caps.has_third_order {
        for row in BLOCKS {
            for col in BLOCKS {
                for salt in 0..2 {
                    let v = probe_direction(dims.t, salt);
                    let t = oracle.third_contract(row, col, p, s, &v)?;
                    let fd = |e: f64| -> Result<f64> {
                        let hp = oracle.hess(Level::F3, row, col, &p.shifted(Block::Z, e, &v), s)?;
                        let hm = oracle.hess(Level::F3, row, col, &p.shifted(Block::Z, -e, &v), s)?;
                        Ok((&(&hp - &hm).scaled(0.5 / e) - &t).max_abs())
                    };
                    out.push(DerivativeCheck {
                        label: format!("third {row:?}{col:?} dir{salt}"),
                        err_coarse: fd(eps.0)?,
                        err_fine: fd(eps.1)?,
                        scale: t.max_abs(),
                    });
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeumannProbe {
    pub q: usize,
    pub error: f64,
    pub bound: f64,
}

/// Truncation error of the Neumann series for `diag(a)` against the
/// geometric bound `scale rho^{Q+1} / (1 - rho) ||b||`.
pub fn neumann_decay_probe(a: &Vector, b: &Vector, scale: f64, qs: impl IntoIterator<Item = usize>) -> Result<Vec<NeumannProbe>> {
    if a.dim() != b.dim() || a.iter().any(|&ai| !(ai > 0.0)) {
        return Err(TsgError::InvalidArgument("need a positive diagonal matching b".into()));
    }
    let rho = a.iter().map(|ai| (1.0 - scale * ai).abs()).fold(0.0, f64::max);
    if rho >= 1.0 {
        return Err(TsgError::InvalidArgument(format!("contraction factor {rho} is not below 1")));
    }
    let exact = Vector::from_fn(a.dim(), |i| b[i] / a[i]);
    qs.into_iter()
        .map(|q| {
            let approx = neumann_inverse_apply(|v| Ok(Vector::from_fn(v.dim(), |i| a[i] * v[i])), b, q, scale)?;
            Ok(NeumannProbe {
                q,
                error: (&approx - &exact).norm(),
                bound: scale * rho.powi(q as i32 + 1) / (1.0 - rho) * b.norm(),
            })
        })
        .collect()
}
