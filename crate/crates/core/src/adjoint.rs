//! ML and UL adjoint gradients under three backends.
//!
//! With `w = Hzz^-1 grad_z f2` (all `H..` below are blocks of `f3`):
//!
//! ```text
//! grad_y fbar = grad_y f2 - Hyz w
//! grad_x fbar = grad_x f2 - Hxz w
//! ```
//!
//! and the reduced UL gradient is
//!
//! ```text
//! lz = Hzz^-1 grad_z f1
//! a  = grad_x f1 - Hxz lz
//! b  = grad_y f1 - Hyz lz
//! ly = (hess_yy fbar)^-1 b
//! grad f = a - hess_xy fbar ly
//! ```
//!
//! * [`Engine::H`] assembles every block densely (third-order terms included)
//!   and uses LU solves.
//! * [`Engine::Nfd`] replaces every Hessian-vector product by a central finite
//!   difference of gradients and solves the linear systems with CG.
//! * [`Engine::Ad`] uses the oracle's Hessian-vector products and truncated
//!   Neumann series for both inverses.
//!
//! For the two matrix-free engines, products with `hess_yy fbar` and
//! `hess_xy fbar` are central differences of `grad fbar` along `y`. The LL
//! point is moved with `y` along the tangent of its optimality condition,
//! `dz = -Hzz^-1 Hzy dy`, unless [`ZResponse::Frozen`] is selected.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result, TsgError};
use crate::linalg::{cg_solve, power_iteration, solve_dense, Lu, Matrix, Vector};
use crate::oracle::{fd_block_hvp, Block, Level, Point, ProblemOracle, SampleSpec};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Engine {
    #[serde(rename = "H", alias = "h")]
    H,
    #[serde(rename = "NFD", alias = "nfd")]
    Nfd,
    #[serde(rename = "AD", alias = "ad")]
    Ad,
}

impl Engine {
    pub fn label(self) -> &'static str {
        match self {
            Engine::H => "TSG-H",
            Engine::Nfd => "TSG-N-FD",
            Engine::Ad => "TSG-AD",
        }
    }
}

/// How the LL point follows a `y` perturbation inside finite differences of `grad fbar`.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ZResponse {
    #[default]
    Tangent,
    Frozen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdjointConfig {
    pub engine: Engine,
    pub fd_eps: f64,
    pub cg_tol: f64,
    /// `None` means ten times the system dimension.
    pub cg_max_iters: Option<usize>,
    pub neumann_q: usize,
    pub c0: Option<f64>,
    pub c1: Option<f64>,
    /// Step of the directional differences of `grad fbar` in the AD engine.
    pub jvp_eps: f64,
    pub z_response: ZResponse,
}

impl Default for AdjointConfig {
    fn default() -> Self {
        AdjointConfig {
            engine: Engine::H,
            fd_eps: 0.1,
            cg_tol: 1e-8,
            cg_max_iters: None,
            neumann_q: 26,
            c0: None,
            c1: None,
            jvp_eps: 1e-5,
            z_response: ZResponse::Tangent,
        }
    }
}

impl AdjointConfig {
    pub fn with_engine(engine: Engine) -> Self {
        AdjointConfig {
            engine,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(TsgError::InvalidArgument(format!("{name} must be positive, got {v}")))
            }
        };
        positive("fd_eps", self.fd_eps)?;
        positive("cg_tol", self.cg_tol)?;
        positive("jvp_eps", self.jvp_eps)?;
        if self.cg_max_iters == Some(0) {
            return Err(TsgError::InvalidArgument("cg_max_iters must be positive".into()));
        }
        for (name, c) in [("c0", self.c0), ("c1", self.c1)] {
            if let Some(c) = c {
                positive(name, c)?;
            }
        }
        Ok(())
    }

    fn scales(&self) -> Result<(f64, f64)> {
        match (self.c0, self.c1) {
            (Some(c0), Some(c1)) => Ok((1.0 / c0, 1.0 / c1)),
            _ => Err(TsgError::InvalidArgument(
                "the AD engine needs c0 and c1 (see adjoint::calibrate)".into(),
            )),
        }
    }
}

/// A gradient plus the number of CG solves that stopped on non-positive curvature.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjointResult {
    pub grad: Vector,
    pub curvature_events: usize,
}

/// `scale * sum_{h=0}^{Q} r_h` with `r_0 = b`, `r_{h+1} = r_h - scale * A r_h`.
///
/// Approximates `A^-1 b` when `||I - scale A|| < 1`; this is not checked.
pub fn neumann_inverse_apply<F>(mut hvp: F, b: &Vector, q: usize, scale: f64) -> Result<Vector>
where
    F: FnMut(&Vector) -> Result<Vector>,
{
    if !(scale > 0.0) {
        return Err(TsgError::InvalidArgument(format!(
            "Neumann scale must be positive, got {scale}"
        )));
    }
    let mut r = b.clone();
    let mut acc = b.clone();
    for _ in 0..q {
        let ar = hvp(&r)?;
        check_dim("neumann operator output", b.dim(), ar.dim())?;
        r.axpy(-scale, &ar);
        acc += &r;
    }
    acc.scale_mut(scale);
    Ok(acc)
}

/// Smallest `Q` with `rho^(Q+1) <= tol`.
pub fn neumann_depth_for(rho: f64, tol: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&rho) || !(tol > 0.0) {
        return Err(TsgError::InvalidArgument(format!(
            "need 0 <= rho < 1 and tol > 0, got rho = {rho}, tol = {tol}"
        )));
    }
    if rho == 0.0 || tol >= 1.0 {
        return Ok(0);
    }
    let q = (tol.ln() / rho.ln()).ceil() as usize;
    Ok(q.saturating_sub(1))
}

struct Ctx<'a> {
    o: &'a dyn ProblemOracle,
    s: &'a SampleSpec,
    cfg: &'a AdjointConfig,
    curvature: Cell<usize>,
}

impl<'a> Ctx<'a> {
    fn new(o: &'a dyn ProblemOracle, s: &'a SampleSpec, cfg: &'a AdjointConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.engine == Engine::Ad {
            cfg.scales()?;
        }
        Ok(Ctx {
            o,
            s,
            cfg,
            curvature: Cell::new(0),
        })
    }

    fn grad(&self, level: Level, b: Block, p: &Point) -> Result<Vector> {
        self.o.grad(level, b, p, self.s)
    }

    /// `hess(level, row, col) * v` through the engine's HVP mechanism.
    fn hvp(&self, level: Level, row: Block, col: Block, p: &Point, v: &Vector) -> Result<Vector> {
        match self.cfg.engine {
            Engine::H => self.o.hess(level, row, col, p, self.s)?.matvec(v),
            Engine::Nfd => self.fd(level, row, col, p, v),
            Engine::Ad => {
                if self.o.capabilities().has_hvp {
                    self.o.hvp(level, row, col, p, self.s, v)
                } else {
                    self.fd(level, row, col, p, v)
                }
            }
        }
    }

    fn fd(&self, level: Level, row: Block, col: Block, p: &Point, v: &Vector) -> Result<Vector> {
        fd_block_hvp(self.o, level, row, col, p, self.s, v, self.cfg.fd_eps)
    }

    fn cg(&self, apply: impl FnMut(&Vector) -> Result<Vector>, b: &Vector) -> Result<Vector> {
        let max_iters = self.cfg.cg_max_iters.unwrap_or(10 * b.dim().max(1));
        let rep = cg_solve(apply, b, self.cfg.cg_tol, max_iters)?;
        if rep.terminated_on_curvature {
            self.curvature.set(self.curvature.get() + 1);
            log::debug!("cg stopped on non-positive curvature after {} iterations", rep.iterations);
        }
        Ok(rep.solution)
    }

    /// Lower-level Hessian solve `Hzz^-1 b`.
    fn solve_zz(&self, p: &Point, b: &Vector) -> Result<Vector> {
        match self.cfg.engine {
            Engine::H => solve_dense(&self.o.hess(Level::F3, Block::Z, Block::Z, p, self.s)?, b),
            Engine::Nfd => self.cg(|v| self.hvp(Level::F3, Block::Z, Block::Z, p, v), b),
            Engine::Ad => {
                let (scale, _) = self.cfg.scales()?;
                neumann_inverse_apply(
                    |v| self.hvp(Level::F3, Block::Z, Block::Z, p, v),
                    b,
                    self.cfg.neumann_q,
                    scale,
                )
            }
        }
    }

    /// `grad_b fbar = grad_b f2 - H_bz Hzz^-1 grad_z f2` for each requested block.
    fn fbar_grads(&self, p: &Point, blocks: &[Block]) -> Result<Vec<Vector>> {
        let w = self.solve_zz(p, &self.grad(Level::F2, Block::Z, p)?)?;
        blocks
            .iter()
            .map(|&b| Ok(self.grad(Level::F2, b, p)? - self.hvp(Level::F3, b, Block::Z, p, &w)?))
            .collect()
    }

    /// LL response to a unit `y` move along `v`.
    fn z_tangent(&self, p: &Point, v: &Vector) -> Result<Vector> {
        match self.cfg.z_response {
            ZResponse::Frozen => Ok(Vector::zeros(p.z.dim())),
            ZResponse::Tangent => {
                let hzy_v = self.hvp(Level::F3, Block::Z, Block::Y, p, v)?;
                Ok(-self.solve_zz(p, &hzy_v)?)
            }
        }
    }

    /// Central differences of `grad_b fbar` along `y` in direction `v`.
    fn fbar_directional(&self, p: &Point, v: &Vector, blocks: &[Block]) -> Result<Vec<Vector>> {
        let eps = match self.cfg.engine {
            Engine::Ad => self.cfg.jvp_eps,
            _ => self.cfg.fd_eps,
        };
        let dz = self.z_tangent(p, v)?;
        let shifted = |sign: f64| {
            let mut q = p.shifted(Block::Y, sign * eps, v);
            q.z.axpy(sign * eps, &dz);
            q
        };
        let plus = self.fbar_grads(&shifted(1.0), blocks)?;
        let minus = self.fbar_grads(&shifted(-1.0), blocks)?;
        Ok(plus
            .into_iter()
            .zip(minus)
            .map(|(a, b)| {
                let mut d = a - b;
                d.scale_mut(0.5 / eps);
                d
            })
            .collect())
    }

    fn fbar_hvp_yy(&self, p: &Point, v: &Vector) -> Result<Vector> {
        Ok(self.fbar_directional(p, v, &[Block::Y])?.remove(0))
    }

    fn result(&self, grad: Vector) -> Result<AdjointResult> {
        if !grad.is_finite() {
            return Err(TsgError::NonFinite("adjoint gradient".into()));
        }
        Ok(AdjointResult {
            grad,
            curvature_events: self.curvature.get(),
        })
    }
}

/// Inexact gradient of the reduced ML objective in `y` at the current LL point.
pub fn ml_adjoint_gradient(
    oracle: &dyn ProblemOracle,
    p: &Point,
    s: &SampleSpec,
    cfg: &AdjointConfig,
) -> Result<AdjointResult> {
    p.check(oracle.dims())?;
    let ctx = Ctx::new(oracle, s, cfg)?;
    let g = ctx.fbar_grads(p, &[Block::Y])?.remove(0);
    ctx.result(g)
}

/// Gradient of the reduced ML objective in `x`.
pub fn grad_x_fbar(
    oracle: &dyn ProblemOracle,
    p: &Point,
    s: &SampleSpec,
    cfg: &AdjointConfig,
) -> Result<AdjointResult> {
    p.check(oracle.dims())?;
    let ctx = Ctx::new(oracle, s, cfg)?;
    let g = ctx.fbar_grads(p, &[Block::X])?.remove(0);
    ctx.result(g)
}

/// Dense `(hess_yx fbar, hess_yy fbar)` from second- and third-order blocks.
pub fn exact_fbar_hessians(
    oracle: &dyn ProblemOracle,
    p: &Point,
    s: &SampleSpec,
) -> Result<(Matrix, Matrix)> {
    let caps = oracle.capabilities();
    if !caps.has_third_order || !caps.has_hessians {
        return Err(TsgError::Unsupported(
            "third-order contractions (required by the H engine)".into(),
        ));
    }
    let h = |l, a, b| oracle.hess(l, a, b, p, s);
    let lu = Lu::factor(&h(Level::F3, Block::Z, Block::Z)?)?;
    let w = lu.solve(&oracle.grad(Level::F2, Block::Z, p, s)?)?;
    let hyz3 = h(Level::F3, Block::Y, Block::Z)?;
    let t3 = |a, c| oracle.third_contract(a, c, p, s, &w);
    let t3_yz = t3(Block::Y, Block::Z)?;
    let t3_zz = t3(Block::Z, Block::Z)?;
    let block = |c: Block| -> Result<Matrix> {
        // dz/dc along the LL solution
        let jc = lu.solve_matrix(&h(Level::F3, Block::Z, c)?)?.scaled(-1.0);
        let mut direct = &h(Level::F2, Block::Y, c)? + &h(Level::F2, Block::Y, Block::Z)?.matmul(&jc)?;
        direct = &direct - &(&t3(Block::Y, c)? + &t3_yz.matmul(&jc)?);
        let mut inner = &h(Level::F2, Block::Z, c)? + &h(Level::F2, Block::Z, Block::Z)?.matmul(&jc)?;
        inner = &inner - &(&t3(Block::Z, c)? + &t3_zz.matmul(&jc)?);
        Ok(&direct - &hyz3.matmul(&lu.solve_matrix(&inner)?)?)
    };
    Ok((block(Block::X)?, block(Block::Y)?))
}

/// Inexact reduced UL gradient at `(x^i, y^{i+1}, z^{i+1})`.
pub fn ul_adjoint_gradient(
    oracle: &dyn ProblemOracle,
    p: &Point,
    s: &SampleSpec,
    cfg: &AdjointConfig,
) -> Result<AdjointResult> {
    p.check(oracle.dims())?;
    let ctx = Ctx::new(oracle, s, cfg)?;
    let lz = ctx.solve_zz(p, &ctx.grad(Level::F1, Block::Z, p)?)?;
    let a = ctx.grad(Level::F1, Block::X, p)? - ctx.hvp(Level::F3, Block::X, Block::Z, p, &lz)?;
    let b = ctx.grad(Level::F1, Block::Y, p)? - ctx.hvp(Level::F3, Block::Y, Block::Z, p, &lz)?;
    let correction = match cfg.engine {
        Engine::H => {
            let (hyx, hyy) = exact_fbar_hessians(oracle, p, s)?;
            let ly = solve_dense(&hyy, &b)?;
            hyx.matvec_t(&ly)?
        }
        Engine::Nfd => {
            let ly = ctx.cg(|v| ctx.fbar_hvp_yy(p, v), &b)?;
            ctx.fbar_directional(p, &ly, &[Block::X])?.remove(0)
        }
        Engine::Ad => {
            let (_, scale) = cfg.scales()?;
            let ly = neumann_inverse_apply(|v| ctx.fbar_hvp_yy(p, v), &b, cfg.neumann_q, scale)?;
            ctx.fbar_directional(p, &ly, &[Block::X])?.remove(0)
        }
    };
    ctx.result(a - correction)
}

/// Largest `t` for which calibration forms `Hzz` densely.
pub const DENSE_CALIBRATION_MAX_DIM: usize = 2048;

/// `(c0, c1)`: twice the row-sum norm of `Hzz` (a power-iteration estimate
/// without Hessians or for large `t`) and twice a 5-step power-iteration
/// estimate of `hess_yy fbar`, both at `p`.

pub fn calibrate(
    oracle: &dyn ProblemOracle,
    p: &Point,
    s: &SampleSpec,
    cfg: &AdjointConfig,
) -> Result<(f64, f64)> {
    let caps = oracle.capabilities();
    let c0 = match cfg.c0 {
        Some(c) => c,
        None => {
            let est = if caps.has_hessians && p.z.dim() <= DENSE_CALIBRATION_MAX_DIM {
                oracle.hess(Level::F3, Block::Z, Block::Z, p, s)?.norm_inf()
            } else {
                power_iteration(|v| oracle.hvp(Level::F3, Block::Z, Block::Z, p, s, v), p.z.dim(), 20)?
            };
            2.0 * positive_or_one(est)
        }
    };
    let c1 = match cfg.c1 {
        Some(c) => c,
        None => {
            let probe = AdjointConfig {
                engine: Engine::Ad,
                c0: Some(c0),
                c1: Some(1.0),
                ..cfg.clone()
            };
            let ctx = Ctx::new(oracle, s, &probe)?;
            let est = power_iteration(|v| ctx.fbar_hvp_yy(p, v), p.y.dim(), 5)?;
            2.0 * positive_or_one(est)
        }
    };
    Ok((c0, c1))
}

fn positive_or_one(v: f64) -> f64 {
    if v > 0.0 && v.is_finite() {
        v
    } else {
        1.0
    }
}

/// `cfg` with missing AD constants filled in by [`calibrate`]; other engines are returned unchanged.
pub fn calibrated(
    oracle: &dyn ProblemOracle,
    p: &Point,
    s: &SampleSpec,
    cfg: &AdjointConfig,
) -> Result<AdjointConfig> {
    if cfg.engine != Engine::Ad || (cfg.c0.is_some() && cfg.c1.is_some()) {
        return Ok(cfg.clone());
    }
    let (c0, c1) = calibrate(oracle, p, s, cfg)?;
    Ok(AdjointConfig {
        c0: Some(c0),
        c1: Some(c1),
        ..cfg.clone()
    })
}
