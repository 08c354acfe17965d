//! Quadratic and quartic synthetic trilevel problems.
//!
//! Both share
//!
//! ```text
//! f1 = hx.x + hy.y + hz.z + 0.5 x'Hxx x + x'Hxy y + x'Hxz z
//! f2 = 0.5 y'Hyy y - y'Hyx x - y'Hyz z
//! ```
//!
//! and differ in the lower level:
//!
//! ```text
//! quadratic: f3 = 0.5 z'Hzz z - z'Hzx x - z'Hzy y
//! quartic:   f3 = 0.5 g^2,  g = z'Hzz z - z'(Hzx x + Hzy y)
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result, TsgError};
use crate::linalg::{is_positive_definite, solve_dense, Lu, Matrix, Vector};
use crate::oracle::{Block, Dims, Level, OracleCapabilities, Point, ProblemOracle, SampleSpec};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LowerLevel {
    Quadratic,
    Quartic,
}

/// Matrix and vector data of a synthetic instance. The transposed blocks
/// `hyx`, `hzx`, `hzy` are stored explicitly and checked against their
/// partners on construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub lower: LowerLevel,
    pub n: usize,
    pub m: usize,
    pub t: usize,
    pub h_x: Vector,
    pub h_y: Vector,
    pub h_z: Vector,
    pub hxx: Matrix,
    pub hyy: Matrix,
    pub hzz: Matrix,
    pub hxy: Matrix,
    pub hxz: Matrix,
    pub hyz: Matrix,
    pub hyx: Matrix,
    pub hzx: Matrix,
    pub hzy: Matrix,
    #[serde(default)]
    pub seed: Option<u64>,
}

pub type QuadraticSpec = SyntheticSpec;
pub type QuarticSpec = SyntheticSpec;

fn check_shape(name: &str, m: &Matrix, rows: usize, cols: usize) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(TsgError::InvalidArgument(format!(
            "{name} has shape {:?}, expected ({rows}, {cols})",
            m.shape()
        )));
    }
    Ok(())
}

fn check_transpose(name: &str, a: &Matrix, b: &Matrix) -> Result<()> {
    let bt = b.transpose();
    if a.shape() != bt.shape() {
        return Err(TsgError::InvalidArgument(format!("{name} is not a transpose pairing")));
    }
    for (u, v) in a.as_slice().iter().zip(bt.as_slice()) {
        if (u - v).abs() > 1e-12 * u.abs().max(1.0) {
            return Err(TsgError::InvalidArgument(format!(
                "{name} is not a transpose pairing"
            )));
        }
    }
    Ok(())
}

impl SyntheticSpec {
    /// Assembles a spec from the independent blocks, filling in the transposes.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        lower: LowerLevel,
        h: (Vector, Vector, Vector),
        hxx: Matrix,
        hyy: Matrix,
        hzz: Matrix,
        hxy: Matrix,
        hxz: Matrix,
        hyz: Matrix,
    ) -> Result<Self> {
        let spec = SyntheticSpec {
            lower,
            n: h.0.dim(),
            m: h.1.dim(),
            t: h.2.dim(),
            h_x: h.0,
            h_y: h.1,
            h_z: h.2,
            hyx: hxy.transpose(),
            hzx: hxz.transpose(),
            hzy: hyz.transpose(),
            hxx,
            hyy,
            hzz,
            hxy,
            hxz,
            hyz,
            seed: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m, t) = (self.n, self.m, self.t);
        if n == 0 || m == 0 || t == 0 {
            return Err(TsgError::InvalidArgument("dimensions must be positive".into()));
        }
        check_dim("h_x", n, self.h_x.dim())?;
        check_dim("h_y", m, self.h_y.dim())?;
        check_dim("h_z", t, self.h_z.dim())?;
        check_shape("Hxx", &self.hxx, n, n)?;
        check_shape("Hyy", &self.hyy, m, m)?;
        check_shape("Hzz", &self.hzz, t, t)?;
        check_shape("Hxy", &self.hxy, n, m)?;
        check_shape("Hxz", &self.hxz, n, t)?;
        check_shape("Hyz", &self.hyz, m, t)?;
        check_transpose("Hyx/Hxy", &self.hyx, &self.hxy)?;
        check_transpose("Hzx/Hxz", &self.hzx, &self.hxz)?;
        check_transpose("Hzy/Hyz", &self.hzy, &self.hyz)?;
        for (name, mat) in [("Hxx", &self.hxx), ("Hyy", &self.hyy), ("Hzz", &self.hzz)] {
            if !is_positive_definite(mat) {
                return Err(TsgError::InvalidArgument(format!(
                    "{name} must be symmetric positive definite"
                )));
            }
        }
        if self.lower == LowerLevel::Quadratic && !is_positive_definite(&self.fbar_hessian()?) {
            return Err(TsgError::InvalidArgument(
                "Hyy - 2 Hyz Hzz^-1 Hzy must be positive definite".into(),
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: SyntheticSpec =
            serde_json::from_str(text).map_err(|e| TsgError::Parse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn dims(&self) -> Dims {
        Dims {
            n: self.n,
            m: self.m,
            t: self.t,
        }
    }

    fn hzz_solve_matrix(&self, b: &Matrix) -> Result<Matrix> {
        Lu::factor(&self.hzz)?.solve_matrix(b)
    }

    /// `Hyy - 2 Hyz Hzz^-1 Hzy`, the constant Hessian of the reduced ML objective.
    pub fn fbar_hessian(&self) -> Result<Matrix> {
        let s = self.hyz.matmul(&self.hzz_solve_matrix(&self.hzy)?)?;
        Ok(&self.hyy - &s.scaled(2.0))
    }

    /// `Hzz^-1 (Hzx x + Hzy y)`: the LL solution of the quadratic problem and
    /// the nonzero LL root of the quartic one.
    pub fn closed_form_z(&self, x: &Vector, y: &Vector) -> Result<Vector> {
        let w = self.hzx.matvec(x)? + self.hzy.matvec(y)?;
        solve_dense(&self.hzz, &w)
    }

    fn require_quadratic(&self, what: &str) -> Result<()> {
        match self.lower {
            LowerLevel::Quadratic => Ok(()),
            LowerLevel::Quartic => Err(TsgError::Unsupported(format!(
                "{what} for the quartic problem"
            ))),
        }
    }

    /// `(Hyy - 2 Hyz Hzz^-1 Hzy)^-1 (Hyx + Hyz Hzz^-1 Hzx) x`.
    pub fn closed_form_y(&self, x: &Vector) -> Result<Vector> {
        self.require_quadratic("closed-form y(x)")?;
        let rhs = self.hyx.matvec(x)? + self.hyz.matvec(&solve_dense(&self.hzz, &self.hzx.matvec(x)?)?)?;
        solve_dense(&self.fbar_hessian()?, &rhs)
    }

    /// The footnote formula `Hyy y - Hyx x - Hyz Hzz^-1 (Hzx x + 2 Hzy y)`.
    pub fn closed_form_grad_fbar(&self, x: &Vector, y: &Vector) -> Result<Vector> {
        self.require_quadratic("closed-form grad fbar")?;
        let inner = self.hzx.matvec(x)? + self.hzy.matvec(y)?.scaled(2.0);
        let corr = self.hyz.matvec(&solve_dense(&self.hzz, &inner)?)?;
        Ok(self.hyy.matvec(y)? - self.hyx.matvec(x)? - corr)
    }

    /// The point `(x, y(x), z(x, y(x)))` on the exact solution path.
    pub fn solution_path(&self, x: &Vector) -> Result<Point> {
        let y = self.closed_form_y(x)?;
        let z = self.closed_form_z(x, &y)?;
        Ok(Point::new(x.clone(), y, z))
    }

    /// Reduced UL objective `f(x) = f1(x, y(x), z(x, y(x)))`.
    pub fn f_of_x(&self, x: &Vector) -> Result<f64> {
        let p = self.solution_path(x)?;
        Ok(self.f1(&p))
    }

    /// Chain-rule gradient of `f(x)` through the closed forms.
    pub fn closed_form_grad_f(&self, x: &Vector) -> Result<Vector> {
        let p = self.solution_path(x)?;
        let gx = self.grad_f1(Block::X, &p);
        let gy = self.grad_f1(Block::Y, &p);
        let gz = self.grad_f1(Block::Z, &p);
        // y(x) = A x, z = Bx x + By y
        let hzz = Lu::factor(&self.hzz)?;
        let bx = hzz.solve_matrix(&self.hzx)?;
        let by = hzz.solve_matrix(&self.hzy)?;
        let a = Lu::factor(&self.fbar_hessian()?)?
            .solve_matrix(&(&self.hyx + &self.hyz.matmul(&bx)?))?;
        let dz = &bx + &by.matmul(&a)?;
        Ok(gx + a.matvec_t(&gy)? + dz.matvec_t(&gz)?)
    }

    /// Hessian of the reduced objective `f`, constant for the quadratic problem.
    pub fn reduced_hessian(&self) -> Result<Matrix> {
        let g0 = self.closed_form_grad_f(&Vector::zeros(self.n))?;
        let mut p = Matrix::zeros(self.n, self.n);
        for j in 0..self.n {
            let gj = self.closed_form_grad_f(&Vector::basis(self.n, j))? - g0.clone();
            for i in 0..self.n {
                p[(i, j)] = gj[i];
            }
        }
        Ok(p)
    }

    /// Minimizer of the reduced objective.
    pub fn optimal_x(&self) -> Result<Vector> {
        let g0 = self.closed_form_grad_f(&Vector::zeros(self.n))?;
        Ok(-solve_dense(&self.reduced_hessian()?, &g0)?)
    }

    pub fn lyapunov_diag(&self, p: &Point) -> Result<LyapunovDiag> {
        self.require_quadratic("Lyapunov diagnostics")?;
        let yx = self.closed_form_y(&p.x)?;
        let zx = self.closed_form_z(&p.x, &yx)?;
        let zxy = self.closed_form_z(&p.x, &p.y)?;
        Ok(LyapunovDiag {
            f_val: self.f_of_x(&p.x)?,
            y_err_sq: (&p.y - &yx).norm_sq(),
            z_err_sq: (&p.z - &zx).norm_sq(),
            z_xy_err_sq: (&p.z - &zxy).norm_sq(),
        })
    }

    fn f1(&self, p: &Point) -> f64 {
        let hxx_x = self.hxx.matvec(&p.x).expect("dims checked");
        self.h_x.dot(&p.x)
            + self.h_y.dot(&p.y)
            + self.h_z.dot(&p.z)
            + 0.5 * p.x.dot(&hxx_x)
            + p.x.dot(&self.hxy.matvec(&p.y).expect("dims checked"))
            + p.x.dot(&self.hxz.matvec(&p.z).expect("dims checked"))
    }

    fn grad_f1(&self, b: Block, p: &Point) -> Vector {
        let mv = |m: &Matrix, v: &Vector| m.matvec(v).expect("dims checked");
        match b {
            Block::X => &(&self.h_x + &mv(&self.hxx, &p.x)) + &(mv(&self.hxy, &p.y) + mv(&self.hxz, &p.z)),
            Block::Y => &self.h_y + &mv(&self.hyx, &p.x),
            Block::Z => &self.h_z + &mv(&self.hzx, &p.x),
        }
    }

    fn f2(&self, p: &Point) -> f64 {
        let mv = |m: &Matrix, v: &Vector| m.matvec(v).expect("dims checked");
        0.5 * p.y.dot(&mv(&self.hyy, &p.y)) - p.y.dot(&mv(&self.hyx, &p.x)) - p.y.dot(&mv(&self.hyz, &p.z))
    }

    fn grad_f2(&self, b: Block, p: &Point) -> Vector {
        let mv = |m: &Matrix, v: &Vector| m.matvec(v).expect("dims checked");
        match b {
            Block::X => -mv(&self.hxy, &p.y),
            Block::Y => mv(&self.hyy, &p.y) - mv(&self.hyx, &p.x) - mv(&self.hyz, &p.z),
            Block::Z => -mv(&self.hzy, &p.y),
        }
    }

    fn hess_f1(&self, row: Block, col: Block) -> Matrix {
        match (row, col) {
            (Block::X, Block::X) => self.hxx.clone(),
            (Block::X, Block::Y) => self.hxy.clone(),
            (Block::Y, Block::X) => self.hyx.clone(),
            (Block::X, Block::Z) => self.hxz.clone(),
            (Block::Z, Block::X) => self.hzx.clone(),
            _ => Matrix::zeros(self.dims().of(row), self.dims().of(col)),
        }
    }

    fn hess_f2(&self, row: Block, col: Block) -> Matrix {
        match (row, col) {
            (Block::Y, Block::Y) => self.hyy.clone(),
            (Block::Y, Block::X) => self.hyx.scaled(-1.0),
            (Block::X, Block::Y) => self.hxy.scaled(-1.0),
            (Block::Y, Block::Z) => self.hyz.scaled(-1.0),
            (Block::Z, Block::Y) => self.hzy.scaled(-1.0),
            _ => Matrix::zeros(self.dims().of(row), self.dims().of(col)),
        }
    }

    /// `w = Hzx x + Hzy y`.
    fn ll_shift(&self, p: &Point) -> Vector {
        self.hzx.matvec(&p.x).expect("dims checked") + self.hzy.matvec(&p.y).expect("dims checked")
    }

    /// First derivatives of the quartic inner scalar `g` and `g` itself.
    fn quartic_g(&self, p: &Point) -> QuarticParts {
        let w = self.ll_shift(p);
        let hz = self.hzz.matvec(&p.z).expect("dims checked");
        let g = p.z.dot(&hz) - p.z.dot(&w);
        QuarticParts {
            g,
            gz: hz.scaled(2.0) - w,
            gx: -self.hxz.matvec(&p.z).expect("dims checked"),
            gy: -self.hyz.matvec(&p.z).expect("dims checked"),
        }
    }

    /// Constant second derivatives of `g` (zero for x-x, x-y, y-y pairs).
    fn quartic_gg(&self, row: Block, col: Block) -> Matrix {
        match (row, col) {
            (Block::Z, Block::Z) => self.hzz.scaled(2.0),
            (Block::Z, Block::X) => self.hzx.scaled(-1.0),
            (Block::X, Block::Z) => self.hxz.scaled(-1.0),
            (Block::Z, Block::Y) => self.hzy.scaled(-1.0),
            (Block::Y, Block::Z) => self.hyz.scaled(-1.0),
            _ => Matrix::zeros(self.dims().of(row), self.dims().of(col)),
        }
    }
}

struct QuarticParts {
    g: f64,
    gz: Vector,
    gx: Vector,
    gy: Vector,
}

impl QuarticParts {
    fn of(&self, b: Block) -> &Vector {
        match b {
            Block::X => &self.gx,
            Block::Y => &self.gy,
            Block::Z => &self.gz,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct LyapunovDiag {
    pub f_val: f64,
    pub y_err_sq: f64,
    pub z_err_sq: f64,
    pub z_xy_err_sq: f64,
}

/// Identity blocks except `Hyy = 4 I`; `h` entries i.i.d. `U(0, h_max)`.
fn paper_default(lower: LowerLevel, n: usize, m: usize, t: usize, h_max: f64, seed: u64) -> Result<SyntheticSpec> {
    let mut rng = crate::rng::keyed_rng(&[seed, 0x5eed]);
    let mut h = |d: usize| Vector::from_fn(d, |_| rng.gen_range(0.0..h_max));
    let hs = (h(n), h(m), h(t));
    let mut spec = SyntheticSpec::new(
        lower,
        hs,
        Matrix::identity(n),
        Matrix::scaled_identity(m, 4.0),
        Matrix::identity(t),
        Matrix::eye(n, m),
        Matrix::eye(n, t),
        Matrix::eye(m, t),
    )?;
    spec.seed = Some(seed);
    Ok(spec)
}

/// The quadratic instance with `h ~ U(0, 10)`.
pub fn paper_default_quadratic(n: usize, m: usize, t: usize, seed: u64) -> Result<SyntheticSpec> {
    paper_default(LowerLevel::Quadratic, n, m, t, 10.0, seed)
}

/// The quartic instance with `h ~ U(0, 0.1)`. Rectangular identity blocks
/// are the leading-diagonal embeddings (`Hzx x = x[..t]` for `t <= n`).
pub fn paper_default_quartic(n: usize, m: usize, t: usize, seed: u64) -> Result<SyntheticSpec> {
    paper_default(LowerLevel::Quartic, n, m, t, 0.1, seed)
}

/// Uniform initial point: `[0, 20]` for every block of the quadratic problem,
/// `[-0.4, 0] x [-0.2, 0] x [-0.6, 0]` for the quartic one.
pub fn paper_init_points(lower: LowerLevel, dims: Dims, seed: u64) -> Point {
    let mut rng = crate::rng::keyed_rng(&[seed, 0x1417]);
    let mut draw = |d: usize, lo: f64, hi: f64| Vector::from_fn(d, |_| rng.gen_range(lo..=hi));
    match lower {
        LowerLevel::Quadratic => Point::new(draw(dims.n, 0.0, 20.0), draw(dims.m, 0.0, 20.0), draw(dims.t, 0.0, 20.0)),
        LowerLevel::Quartic => Point::new(draw(dims.n, -0.4, 0.0), draw(dims.m, -0.2, 0.0), draw(dims.t, -0.6, 0.0)),
    }
}

/// Derivative oracle for a [`SyntheticSpec`]. All evaluations are exact and
/// ignore the sample descriptor (stochasticity comes from wrapping it in
/// [`crate::oracle::GaussianNoise`]).
#[derive(Clone, Debug)]
pub struct SyntheticProblem {
    spec: SyntheticSpec,
}

impl SyntheticProblem {
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        Ok(SyntheticProblem { spec })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }
}

impl ProblemOracle for SyntheticProblem {
    fn dims(&self) -> Dims {
        self.spec.dims()
    }

    fn capabilities(&self) -> OracleCapabilities {
        OracleCapabilities::FULL
    }

    fn value(&self, level: Level, p: &Point, _s: &SampleSpec) -> Result<f64> {
        p.check(self.dims())?;
        let s = &self.spec;
        Ok(match level {
            Level::F1 => s.f1(p),
            Level::F2 => s.f2(p),
            Level::F3 => match s.lower {
                LowerLevel::Quadratic => {
                    0.5 * p.z.dot(&s.hzz.matvec(&p.z)?) - p.z.dot(&s.ll_shift(p))
                }
                LowerLevel::Quartic => 0.5 * s.quartic_g(p).g.powi(2),
            },
        })
    }

    fn grad(&self, level: Level, wrt: Block, p: &Point, _s: &SampleSpec) -> Result<Vector> {
        p.check(self.dims())?;
        let s = &self.spec;
        Ok(match level {
            Level::F1 => s.grad_f1(wrt, p),
            Level::F2 => s.grad_f2(wrt, p),
            Level::F3 => match s.lower {
                LowerLevel::Quadratic => match wrt {
                    Block::Z => s.hzz.matvec(&p.z)? - s.ll_shift(p),
                    Block::X => -s.hxz.matvec(&p.z)?,
                    Block::Y => -s.hyz.matvec(&p.z)?,
                },
                LowerLevel::Quartic => {
                    let q = s.quartic_g(p);
                    q.of(wrt).scaled(q.g)
                }
            },
        })
    }

    fn hess(&self, level: Level, row: Block, col: Block, p: &Point, _s: &SampleSpec) -> Result<Matrix> {
        p.check(self.dims())?;
        let s = &self.spec;
        Ok(match level {
            Level::F1 => s.hess_f1(row, col),
            Level::F2 => s.hess_f2(row, col),
            Level::F3 => match s.lower {
                LowerLevel::Quadratic => match (row, col) {
                    (Block::Z, Block::Z) => s.hzz.clone(),
                    _ => s.quartic_gg(row, col),
                },
                LowerLevel::Quartic => {
                    let q = s.quartic_g(p);
                    let mut h = Matrix::outer(q.of(row), q.of(col));
                    h.axpy(q.g, &s.quartic_gg(row, col));
                    h
                }
            },
        })
    }

    fn third_contract(&self, row: Block, col: Block, p: &Point, _s: &SampleSpec, v: &Vector) -> Result<Matrix> {
        p.check(self.dims())?;
        check_dim("third_contract direction", self.spec.t, v.dim())?;
        let s = &self.spec;
        let d = self.dims();
        match s.lower {
            LowerLevel::Quadratic => Ok(Matrix::zeros(d.of(row), d.of(col))),
            LowerLevel::Quartic => {
                // d^3 f3 / (da dz dc) . v = G_ac (gz.v) + g_a (G_cz v)' + (G_az v) g_c'
                let q = s.quartic_g(p);
                let mut out = s.quartic_gg(row, col).scaled(q.gz.dot(v));
                let gcz_v = s.quartic_gg(col, Block::Z).matvec(v)?;
                let gaz_v = s.quartic_gg(row, Block::Z).matvec(v)?;
                out.axpy(1.0, &Matrix::outer(q.of(row), &gcz_v));
                out.axpy(1.0, &Matrix::outer(&gaz_v, q.of(col)));
                Ok(out)
            }
        }
    }
}
