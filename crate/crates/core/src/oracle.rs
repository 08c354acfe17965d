//! The derivative-evaluation contract every trilevel problem implements.
//!
//! A problem exposes the three objectives `f1` (upper), `f2` (middle) and `f3`
//! (lower) over the blocks `x`, `y`, `z`. Gradients are mandatory; Hessian
//! blocks, Hessian-vector products and third-order contractions of `f3` are
//! optional and advertised through [`OracleCapabilities`].
//!
//! Block conventions:
//! * `hess(level, a, b)` is the `dim(a) x dim(b)` matrix of mixed partials
//!   `d^2 f / (d a_i d b_j)`, so `hess(F3, X, Z)` is `n x t`.
//! * `hvp(level, a, b, v)` is `hess(level, a, b) * v` with `v` in block `b`.
//! * `third_contract(a, c, v)` contracts the `d^3 f3 / (d a d z d c)` tensor
//!   over its middle `z` index with `v`, giving a `dim(a) x dim(c)` matrix.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result, TsgError};
use crate::linalg::{Matrix, Vector};
use crate::rng::{keyed_rng, mix};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum Level {
    F1,
    F2,
    F3,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum Block {
    X,
    Y,
    Z,
}

impl Level {
    fn tag(self) -> u64 {
        match self {
            Level::F1 => 1,
            Level::F2 => 2,
            Level::F3 => 3,
        }
    }
}

impl Block {
    fn tag(self) -> u64 {
        match self {
            Block::X => 11,
            Block::Y => 12,
            Block::Z => 13,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    pub m: usize,
    pub t: usize,
}

impl Dims {
    pub fn of(&self, block: Block) -> usize {
        match block {
            Block::X => self.n,
            Block::Y => self.m,
            Block::Z => self.t,
        }
    }
}

/// The `(x, y, z)` iterate triple.
#[derive(Clone, Debug, PartialEq)]
pub struct Point {
    pub x: Vector,
    pub y: Vector,
    pub z: Vector,
}

impl Point {
    pub fn new(x: Vector, y: Vector, z: Vector) -> Self {
        Point { x, y, z }
    }

    pub fn zeros(dims: Dims) -> Self {
        Point::new(
            Vector::zeros(dims.n),
            Vector::zeros(dims.m),
            Vector::zeros(dims.t),
        )
    }

    pub fn block(&self, b: Block) -> &Vector {
        match b {
            Block::X => &self.x,
            Block::Y => &self.y,
            Block::Z => &self.z,
        }
    }

    pub fn block_mut(&mut self, b: Block) -> &mut Vector {
        match b {
            Block::X => &mut self.x,
            Block::Y => &mut self.y,
            Block::Z => &mut self.z,
        }
    }

    /// Copy of `self` with block `b` moved by `alpha * dir`.
    pub fn shifted(&self, b: Block, alpha: f64, dir: &Vector) -> Point {
        let mut p = self.clone();
        p.block_mut(b).axpy(alpha, dir);
        p
    }

    pub fn dims(&self) -> Dims {
        Dims {
            n: self.x.dim(),
            m: self.y.dim(),
            t: self.z.dim(),
        }
    }

    pub fn check(&self, dims: Dims) -> Result<()> {
        check_dim("Point.x", dims.n, self.x.dim())?;
        check_dim("Point.y", dims.m, self.y.dim())?;
        check_dim("Point.z", dims.t, self.z.dim())
    }

    fn bits_hash(&self) -> u64 {
        let words: Vec<u64> = self
            .x
            .iter()
            .chain(self.y.iter())
            .chain(self.z.iter())
            .map(|v| v.to_bits())
            .collect();
        mix(&words)
    }
}

/// Which realization of the random data an evaluation uses.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum SampleSpec {
    Deterministic,
    /// Row positions into the owning dataset's training split.
    MinibatchIndices(Vec<usize>),
    NoiseDraw { stream: u64, counter: u64 },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct OracleCapabilities {
    pub has_hessians: bool,
    pub has_third_order: bool,
    pub has_hvp: bool,
}

impl OracleCapabilities {
    pub const FIRST_ORDER: Self = OracleCapabilities {
        has_hessians: false,
        has_third_order: false,
        has_hvp: false,
    };

    pub const FULL: Self = OracleCapabilities {
        has_hessians: true,
        has_third_order: true,
        has_hvp: true,
    };

    pub fn is_consistent(&self) -> bool {
        !self.has_third_order || self.has_hessians
    }
}

pub trait ProblemOracle: Send + Sync {
    fn dims(&self) -> Dims;

    fn capabilities(&self) -> OracleCapabilities;

    fn value(&self, level: Level, p: &Point, s: &SampleSpec) -> Result<f64>;

    fn grad(&self, level: Level, wrt: Block, p: &Point, s: &SampleSpec) -> Result<Vector>;

    fn hess(
        &self,
        level: Level,
        row: Block,
        col: Block,
        _p: &Point,
        _s: &SampleSpec,
    ) -> Result<Matrix> {
        Err(TsgError::Unsupported(format!(
            "Hessian block {row:?}{col:?} of {level:?}"
        )))
    }

    fn hvp(
        &self,
        level: Level,
        row: Block,
        col: Block,
        p: &Point,
        s: &SampleSpec,
        v: &Vector,
    ) -> Result<Vector> {
        if self.capabilities().has_hessians {
            self.hess(level, row, col, p, s)?.matvec(v)
        } else {
            Err(TsgError::Unsupported(format!(
                "Hessian-vector product {row:?}{col:?} of {level:?}"
            )))
        }
    }

    fn third_contract(
        &self,
        row: Block,
        col: Block,
        _p: &Point,
        _s: &SampleSpec,
        _v: &Vector,
    ) -> Result<Matrix> {
        Err(TsgError::Unsupported(format!(
            "third-order contraction {row:?}Z{col:?} of F3"
        )))
    }
}

/// Named accessors for the most common evaluations.
pub trait OracleExt: ProblemOracle {
    fn f1(&self, p: &Point, s: &SampleSpec) -> Result<f64> {
        self.value(Level::F1, p, s)
    }
    fn f2(&self, p: &Point, s: &SampleSpec) -> Result<f64> {
        self.value(Level::F2, p, s)
    }
    fn f3(&self, p: &Point, s: &SampleSpec) -> Result<f64> {
        self.value(Level::F3, p, s)
    }
    fn grad_z_f3(&self, p: &Point, s: &SampleSpec) -> Result<Vector> {
        self.grad(Level::F3, Block::Z, p, s)
    }
    fn hess_zz_f3(&self, p: &Point, s: &SampleSpec) -> Result<Matrix> {
        self.hess(Level::F3, Block::Z, Block::Z, p, s)
    }
    fn hvp_zz_f3(&self, p: &Point, s: &SampleSpec, v: &Vector) -> Result<Vector> {
        self.hvp(Level::F3, Block::Z, Block::Z, p, s, v)
    }
    fn hvp_xz_f3(&self, p: &Point, s: &SampleSpec, v: &Vector) -> Result<Vector> {
        self.hvp(Level::F3, Block::X, Block::Z, p, s, v)
    }
    fn hvp_yz_f3(&self, p: &Point, s: &SampleSpec, v: &Vector) -> Result<Vector> {
        self.hvp(Level::F3, Block::Y, Block::Z, p, s, v)
    }
}

impl<T: ProblemOracle + ?Sized> OracleExt for T {}

impl<T: ProblemOracle + ?Sized> ProblemOracle for &T {
    fn dims(&self) -> Dims {
        (**self).dims()
    }
    fn capabilities(&self) -> OracleCapabilities {
        (**self).capabilities()
    }
    fn value(&self, level: Level, p: &Point, s: &SampleSpec) -> Result<f64> {
        (**self).value(level, p, s)
    }
    fn grad(&self, level: Level, wrt: Block, p: &Point, s: &SampleSpec) -> Result<Vector> {
        (**self).grad(level, wrt, p, s)
    }
    fn hess(&self, level: Level, row: Block, col: Block, p: &Point, s: &SampleSpec) -> Result<Matrix> {
        (**self).hess(level, row, col, p, s)
    }
    fn hvp(
        &self,
        level: Level,
        row: Block,
        col: Block,
        p: &Point,
        s: &SampleSpec,
        v: &Vector,
    ) -> Result<Vector> {
        (**self).hvp(level, row, col, p, s, v)
    }
    fn third_contract(
        &self,
        row: Block,
        col: Block,
        p: &Point,
        s: &SampleSpec,
        v: &Vector,
    ) -> Result<Matrix> {
        (**self).third_contract(row, col, p, s, v)
    }
}

/// Central-difference Hessian-vector product of a gradient map:
/// `[grad(at + eps v) - grad(at - eps v)] / (2 eps)`.
pub fn fd_hvp<G>(grad: G, at: &Vector, v: &Vector, eps: f64) -> Result<Vector>
where
    G: Fn(&Vector) -> Result<Vector>,
{
    if !(eps > 0.0) {
        return Err(TsgError::InvalidArgument(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    check_dim("fd_hvp direction", at.dim(), v.dim())?;
    let plus = grad(&at.plus_scaled(eps, v))?;
    let minus = grad(&at.plus_scaled(-eps, v))?;
    let mut out = plus - minus;
    out.scale_mut(0.5 / eps);
    Ok(out)
}

/// `hess(level, grad_block, dir_block) * v` by central differences of the
/// `grad_block` gradient while perturbing `dir_block`.
pub fn fd_block_hvp(
    oracle: &dyn ProblemOracle,
    level: Level,
    grad_block: Block,
    dir_block: Block,
    p: &Point,
    s: &SampleSpec,
    v: &Vector,
    eps: f64,
) -> Result<Vector> {
    fd_hvp(
        |b| {
            let mut q = p.clone();
            *q.block_mut(dir_block) = b.clone();
            oracle.grad(level, grad_block, &q, s)
        },
        p.block(dir_block),
        v,
        eps,
    )
}

/// Adds i.i.d. Gaussian noise to every gradient and second-order quantity of an
/// inner oracle when evaluated on a [`SampleSpec::NoiseDraw`].
///
/// A draw is addressed by `(seed, stream, counter, quantity, point)`: repeating
/// an evaluation reproduces it exactly, while distinct quantities or points get
/// independent noise. Hessian blocks receive an elementwise noise matrix `E`
/// and Hessian-vector products return `(H + E) v` for the same `E`, so a noisy
/// HVP stays linear in `v`. Values and third-order contractions are never
/// perturbed.
pub struct GaussianNoise<O> {
    inner: O,
    std_grad: f64,
    std_hess: f64,
    seed: u64,
}

impl<O: ProblemOracle> GaussianNoise<O> {
    pub fn new(inner: O, std_grad: f64, std_hess: f64, seed: u64) -> Result<Self> {
        if !(std_grad >= 0.0) || !(std_hess >= 0.0) {
            return Err(TsgError::InvalidArgument(format!(
                "noise standard deviations must be nonnegative, got ({std_grad}, {std_hess})"
            )));
        }
        Ok(GaussianNoise {
            inner,
            std_grad,
            std_hess,
            seed,
        })
    }

    pub fn inner(&self) -> &O {
        &self.inner
    }

    fn draw_key(&self, s: &SampleSpec, quantity: &[u64], p: &Point) -> Option<Vec<u64>> {
        match s {
            SampleSpec::NoiseDraw { stream, counter } => {
                let mut key = vec![self.seed, *stream, *counter, p.bits_hash()];
                key.extend_from_slice(quantity);
                Some(key)
            }
            _ => None,
        }
    }

    fn noise_matrix(&self, key: &[u64], rows: usize, cols: usize) -> Matrix {
        let mut rng = keyed_rng(key);
        Matrix::from_fn(rows, cols, |_, _| {
            self.std_hess * rng.sample::<f64, _>(StandardNormal)
        })
    }
}

fn to_inner(s: &SampleSpec) -> &SampleSpec {
    match s {
        SampleSpec::NoiseDraw { .. } => &SampleSpec::Deterministic,
        other => other,
    }
}

impl<O: ProblemOracle> ProblemOracle for GaussianNoise<O> {
    fn dims(&self) -> Dims {
        self.inner.dims()
    }

    fn capabilities(&self) -> OracleCapabilities {
        self.inner.capabilities()
    }

    fn value(&self, level: Level, p: &Point, s: &SampleSpec) -> Result<f64> {
        self.inner.value(level, p, to_inner(s))
    }

    fn grad(&self, level: Level, wrt: Block, p: &Point, s: &SampleSpec) -> Result<Vector> {
        let mut g = self.inner.grad(level, wrt, p, to_inner(s))?;
        if self.std_grad > 0.0 {
            if let Some(key) = self.draw_key(s, &[1, level.tag(), wrt.tag()], p) {
                let mut rng = keyed_rng(&key);
                for v in g.as_mut_slice() {
                    *v += self.std_grad * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        Ok(g)
    }

    fn hess(&self, level: Level, row: Block, col: Block, p: &Point, s: &SampleSpec) -> Result<Matrix> {
        let mut h = self.inner.hess(level, row, col, p, to_inner(s))?;
        if self.std_hess > 0.0 {
            if let Some(key) = self.draw_key(s, &[2, level.tag(), row.tag(), col.tag()], p) {
                let e = self.noise_matrix(&key, h.rows(), h.cols());
                h.axpy(1.0, &e);
            }
        }
        Ok(h)
    }

    fn hvp(
        &self,
        level: Level,
        row: Block,
        col: Block,
        p: &Point,
        s: &SampleSpec,
        v: &Vector,
    ) -> Result<Vector> {
        let mut hv = self.inner.hvp(level, row, col, p, to_inner(s), v)?;
        if self.std_hess > 0.0 {
            if let Some(key) = self.draw_key(s, &[2, level.tag(), row.tag(), col.tag()], p) {
                let e = self.noise_matrix(&key, hv.dim(), v.dim());
                hv += &e.matvec(v)?;
            }
        }
        Ok(hv)
    }

    fn third_contract(
        &self,
        row: Block,
        col: Block,
        p: &Point,
        s: &SampleSpec,
        v: &Vector,
    ) -> Result<Matrix> {
        self.inner.third_contract(row, col, p, to_inner(s), v)
    }
}

/// Which loop of the nested method a sample belongs to.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum LevelTag {
    Upper,
    Middle,
    Lower,
}

/// Address of one stochastic evaluation: UL iteration `i`, ML iteration `j`,
/// LL iteration `k` (unused counters are zero).
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct SampleKey {
    pub tag: LevelTag,
    pub i: u64,
    pub j: u64,
    pub k: u64,
}

impl SampleKey {
    pub fn upper(i: usize) -> Self {
        SampleKey {
            tag: LevelTag::Upper,
            i: i as u64,
            j: 0,
            k: 0,
        }
    }
    pub fn middle(i: usize, j: usize) -> Self {
        SampleKey {
            tag: LevelTag::Middle,
            i: i as u64,
            j: j as u64,
            k: 0,
        }
    }
    pub fn lower(i: usize, j: usize, k: usize) -> Self {
        SampleKey {
            tag: LevelTag::Lower,
            i: i as u64,
            j: j as u64,
            k: k as u64,
        }
    }

    fn tag_word(&self) -> u64 {
        match self.tag {
            LevelTag::Upper => 0x75,
            LevelTag::Middle => 0x6d,
            LevelTag::Lower => 0x6c,
        }
    }
}

/// Produces the [`SampleSpec`] used at each address of a run.
pub trait Sampler: Send + Sync {
    fn draw(&self, key: SampleKey) -> SampleSpec;
}

#[derive(Copy, Clone, Debug, Default)]
pub struct DeterministicSampler;

impl Sampler for DeterministicSampler {
    fn draw(&self, _key: SampleKey) -> SampleSpec {
        SampleSpec::Deterministic
    }
}

/// Noise draws keyed by `(run seed, level tag)` with the counter packed from `(i, j, k)`.
#[derive(Copy, Clone, Debug)]
pub struct NoiseSampler {
    pub run_seed: u64,
}

impl Sampler for NoiseSampler {
    fn draw(&self, key: SampleKey) -> SampleSpec {
        SampleSpec::NoiseDraw {
            stream: mix(&[self.run_seed, key.tag_word()]),
            counter: mix(&[key.i, key.j, key.k]),
        }
    }
}

/// Uniform minibatches (without replacement) over `population` rows.
#[derive(Copy, Clone, Debug)]
pub struct MinibatchSampler {
    pub run_seed: u64,
    pub population: usize,
    pub batch_size: usize,
}

impl Sampler for MinibatchSampler {
    fn draw(&self, key: SampleKey) -> SampleSpec {
        if self.batch_size >= self.population {
            return SampleSpec::Deterministic;
        }
        let mut rng = keyed_rng(&[self.run_seed, key.tag_word(), key.i, key.j, key.k]);
        let mut idx = rand::seq::index::sample(&mut rng, self.population, self.batch_size).into_vec();
        idx.sort_unstable();
        SampleSpec::MinibatchIndices(idx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// f3 = 0.5 ||z||^2 + x.z ; everything else zero; full second-order info.
    struct Toy;

    impl ProblemOracle for Toy {
        fn dims(&self) -> Dims {
            Dims { n: 2, m: 1, t: 2 }
        }
        fn capabilities(&self) -> OracleCapabilities {
            OracleCapabilities {
                has_hessians: true,
                has_third_order: false,
                has_hvp: true,
            }
        }
        fn value(&self, level: Level, p: &Point, _s: &SampleSpec) -> Result<f64> {
            Ok(match level {
                Level::F3 => 0.5 * p.z.norm_sq() + p.x.dot(&p.z),
                _ => 0.0,
            })
        }
        fn grad(&self, level: Level, wrt: Block, p: &Point, _s: &SampleSpec) -> Result<Vector> {
            let d = self.dims().of(wrt);
            Ok(match (level, wrt) {
                (Level::F3, Block::Z) => &p.z + &p.x,
                (Level::F3, Block::X) => p.z.clone(),
                _ => Vector::zeros(d),
            })
        }
        fn hess(&self, level: Level, row: Block, col: Block, _p: &Point, _s: &SampleSpec) -> Result<Matrix> {
            let d = self.dims();
            Ok(match (level, row, col) {
                (Level::F3, Block::Z, Block::Z) => Matrix::identity(2),
                (Level::F3, Block::X, Block::Z) | (Level::F3, Block::Z, Block::X) => Matrix::identity(2),
                _ => Matrix::zeros(d.of(row), d.of(col)),
            })
        }
    }

    fn point() -> Point {
        Point::new(Vector::from([0.3, -1.0]), Vector::from([2.0]), Vector::from([1.5, 0.25]))
    }

    #[test]
    fn fd_hvp_exact_on_quadratic() {
        let p = point();
        let v = Vector::from([0.7, -0.2]);
        for eps in [1e-3, 0.1, 3.0] {
            let hv = fd_block_hvp(&Toy, Level::F3, Block::Z, Block::Z, &p, &SampleSpec::Deterministic, &v, eps).unwrap();
            assert!((&hv - &v).max_abs() < 1e-12);
        }
    }

    #[test]
    fn fd_hvp_quartic_scalar() {
        // f(z) = 0.5 (z^2 - z)^2, f'(z) = (z^2 - z)(2z - 1)
        let grad = |z: &Vector| Ok(Vector::from([(z[0] * z[0] - z[0]) * (2.0 * z[0] - 1.0)]));
        let hv = fd_hvp(grad, &Vector::from([1.0]), &Vector::from([1.0]), 0.1).unwrap();
        assert!((hv[0] - 1.02).abs() < 1e-12);
    }

    #[test]
    fn fd_hvp_zero_direction_and_bad_eps() {
        let grad = |z: &Vector| Ok(z.scaled(3.0));
        let hv = fd_hvp(grad, &Vector::from([1.0, 2.0]), &Vector::zeros(2), 0.5).unwrap();
        assert_eq!(hv, Vector::zeros(2));
        assert!(fd_hvp(grad, &Vector::from([1.0]), &Vector::from([1.0]), 0.0).is_err());
        assert!(fd_hvp(grad, &Vector::from([1.0]), &Vector::from([1.0]), -1.0).is_err());
    }

    #[test]
    fn noise_zero_std_is_transparent() {
        let noisy = GaussianNoise::new(Toy, 0.0, 0.0, 9).unwrap();
        let p = point();
        let s = SampleSpec::NoiseDraw { stream: 1, counter: 2 };
        assert_eq!(
            noisy.grad(Level::F3, Block::Z, &p, &s).unwrap(),
            Toy.grad(Level::F3, Block::Z, &p, &s).unwrap()
        );
        assert_eq!(
            noisy.hess(Level::F3, Block::Z, Block::Z, &p, &s).unwrap(),
            Matrix::identity(2)
        );
    }

    #[test]
    fn noise_reproducible_and_bypassed_when_deterministic() {
        let noisy = GaussianNoise::new(Toy, 0.5, 0.5, 9).unwrap();
        let p = point();
        let s = SampleSpec::NoiseDraw { stream: 4, counter: 17 };
        let a = noisy.grad(Level::F3, Block::Z, &p, &s).unwrap();
        let b = noisy.grad(Level::F3, Block::Z, &p, &s).unwrap();
        assert_eq!(a, b);
        let other = SampleSpec::NoiseDraw { stream: 4, counter: 18 };
        assert_ne!(a, noisy.grad(Level::F3, Block::Z, &p, &other).unwrap());
        let det = noisy.grad(Level::F3, Block::Z, &p, &SampleSpec::Deterministic).unwrap();
        assert_eq!(det, Toy.grad(Level::F3, Block::Z, &p, &SampleSpec::Deterministic).unwrap());
    }

    #[test]
    fn noisy_hvp_is_linear_and_matches_noisy_hessian() {
        let noisy = GaussianNoise::new(Toy, 0.0, 0.3, 5).unwrap();
        let p = point();
        let s = SampleSpec::NoiseDraw { stream: 1, counter: 1 };
        let h = noisy.hess(Level::F3, Block::Z, Block::Z, &p, &s).unwrap();
        let v = Vector::from([1.0, -2.0]);
        let hv = noisy.hvp(Level::F3, Block::Z, Block::Z, &p, &s, &v).unwrap();
        assert!((&hv - &h.matvec(&v).unwrap()).max_abs() < 1e-14);
    }

    #[test]
    fn negative_std_rejected() {
        assert!(GaussianNoise::new(Toy, -0.1, 0.0, 0).is_err());
        assert!(GaussianNoise::new(Toy, 0.0, -1.0, 0).is_err());
    }

    #[test]
    fn minibatch_sampler_reproducible_and_in_range() {
        let s = MinibatchSampler { run_seed: 3, population: 100, batch_size: 10 };
        let a = s.draw(SampleKey::lower(1, 2, 3));
        assert_eq!(a, s.draw(SampleKey::lower(1, 2, 3)));
        match a {
            SampleSpec::MinibatchIndices(idx) => {
                assert_eq!(idx.len(), 10);
                assert!(idx.iter().all(|&i| i < 100));
                let mut d = idx.clone();
                d.dedup();
                assert_eq!(d.len(), 10);
            }
            other => panic!("unexpected sample {other:?}"),
        }
    }
}
