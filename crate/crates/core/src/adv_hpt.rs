//! Trilevel adversarial hyperparameter tuning with a linear model.
//!
//! Variables: `x = lambda` (scalar), `y = theta = (theta_f, b)` with an
//! unpenalized intercept `b`, and `z = delta`, one perturbation of every
//! training feature vector. With `r_j = (u_j + delta_j).theta_f + b - v_j`
//! and `L = (1/|S|) sum_{j in S} r_j^2` over the sampled training rows `S`:
//!
//! ```text
//! f1 = validation MSE of theta
//! f2 = L + exp(lambda) * sum_i s(theta_f_i) / m,   s(t) = sqrt(t^2 + mu^2)
//! f3 = -L + c ||delta||^2 / (m N_train)
//! ```

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adjoint::{AdjointConfig, Engine};
use crate::error::{check_dim, Result, TsgError};
use crate::linalg::{Matrix, Vector};
use crate::oracle::{Block, Dims, Level, OracleCapabilities, Point, ProblemOracle, SampleSpec};
use crate::rng::keyed_rng;

#[derive(Clone, Debug, PartialEq)]
pub struct TabularDataset {
    /// Raw feature values as read, `N x d`.
    pub features: Matrix,
    pub targets: Vector,
    pub feature_names: Vec<String>,
    pub target_name: String,
}

impl TabularDataset {
    pub fn len(&self) -> usize {
        self.targets.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.dim() == 0
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }
}

/// Reads a comma-separated file with a header row. The target is the column
/// named `target`, or the last column when `None`.
pub fn load_csv(path: impl AsRef<Path>, target: Option<&str>) -> Result<TabularDataset> {
    let file = std::fs::File::open(path.as_ref())?;
    parse_csv(file, target)
}

pub fn parse_csv<R: Read>(input: R, target: Option<&str>) -> Result<TabularDataset> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header: Vec<String> = rd
        .headers()
        .map_err(|e| TsgError::Parse(e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header.len() < 2 || header.iter().all(|h| h.is_empty()) {
        return Err(TsgError::Parse(
            "expected a header with at least one feature and one target column".into(),
        ));
    }
    let target_idx = match target {
        None => header.len() - 1,
        Some(name) => header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| TsgError::Parse(format!("no column named {name:?}")))?,
    };
    let mut feats = Vec::new();
    let mut targets = Vec::new();
    for (row, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| TsgError::Data {
            row: row + 1,
            column: String::new(),
            message: e.to_string(),
        })?;
        if rec.len() != header.len() {
            return Err(TsgError::Data {
                row: row + 1,
                column: String::new(),
                message: format!("expected {} cells, found {}", header.len(), rec.len()),
            });
        }
        for (col, cell) in rec.iter().enumerate() {
            let cell = cell.trim();
            let bad = |message: String| TsgError::Data {
                row: row + 1,
                column: header[col].clone(),
                message,
            };
            if cell.is_empty() {
                return Err(bad("missing value".into()));
            }
            let v: f64 = cell.parse().map_err(|_| bad(format!("cannot parse {cell:?} as a number")))?;
            if !v.is_finite() {
                return Err(bad(format!("non-finite value {cell:?}")));
            }
            if col == target_idx {
                targets.push(v);
            } else {
                feats.push(v);
            }
        }
    }
    if targets.is_empty() {
        return Err(TsgError::Parse("file has no data rows".into()));
    }
    let d = header.len() - 1;
    let mut names = header.clone();
    let target_name = names.remove(target_idx);
    Ok(TabularDataset {
        features: Matrix::from_row_major(targets.len(), d, feats)?,
        targets: Vector::from(targets),
        feature_names: names,
        target_name,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_frac: 0.70,
            val_frac: 0.15,
            test_frac: 0.15,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles `0..n` with the split seed, then takes `floor(train_frac n)`
/// training rows, `floor(val_frac n)` validation rows and the rest for testing.
pub fn split_dataset(n: usize, spec: &SplitSpec) -> Result<Splits> {
    let fracs = [spec.train_frac, spec.val_frac, spec.test_frac];
    if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) || (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(TsgError::InvalidArgument(format!(
            "split fractions must be in [0, 1] and sum to 1, got {fracs:?}"
        )));
    }
    let count = |f: f64| ((f * n as f64) + 1e-9).floor() as usize;
    let n_train = count(spec.train_frac).min(n);
    let n_val = count(spec.val_frac).min(n - n_train);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut keyed_rng(&[spec.seed, 0x5911]));
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok(Splits {
        train: idx,
        val,
        test,
    })
}

/// `(sum_i sqrt(theta_i^2 + mu^2), gradient, Hessian diagonal)`.
pub fn smoothed_l1(theta: &Vector, mu: f64) -> Result<(f64, Vector, Vector)> {
    if !(mu > 0.0) {
        return Err(TsgError::InvalidArgument(format!("mu must be positive, got {mu}")));
    }
    let roots: Vec<f64> = theta.iter().map(|t| (t * t + mu * mu).sqrt()).collect();
    let value = roots.iter().sum();
    let grad = Vector::from_fn(theta.dim(), |i| theta[i] / roots[i]);
    let diag = Vector::from_fn(theta.dim(), |i| mu * mu / roots[i].powi(3));
    Ok((value, grad, diag))
}

/// A feature block standardized with training statistics, plus its targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Block2 {
    pub u: Matrix,
    pub v: Vector,
}

#[derive(Clone, Debug)]
pub struct AdvHptProblem {
    train: Block2,
    val: Block2,
    test: Block2,
    splits: Splits,
    c: f64,
    mu: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdvHptParams {
    pub c: f64,
    pub mu: f64,
    pub split: SplitSpec,
}

impl Default for AdvHptParams {
    fn default() -> Self {
        AdvHptParams {
            c: 0.1,
            mu: 0.25,
            split: SplitSpec::default(),
        }
    }
}

fn standardized(ds: &TabularDataset, rows: &[usize], mean: &[f64], std: &[f64]) -> Block2 {
    let d = ds.n_features();
    Block2 {
        u: Matrix::from_fn(rows.len(), d, |r, c| (ds.features[(rows[r], c)] - mean[c]) / std[c]),
        v: Vector::from_fn(rows.len(), |r| ds.targets[rows[r]]),
    }
}

impl AdvHptProblem {
    pub fn new(ds: &TabularDataset, params: &AdvHptParams) -> Result<Self> {
        if ds.len() < 10 {
            return Err(TsgError::InvalidArgument(format!(
                "need at least 10 rows, dataset has {}",
                ds.len()
            )));
        }
        if !(params.c > 0.0) || !(params.mu > 0.0) {
            return Err(TsgError::InvalidArgument("c and mu must be positive".into()));
        }
        let splits = split_dataset(ds.len(), &params.split)?;
        if splits.train.is_empty() || splits.val.is_empty() {
            return Err(TsgError::InvalidArgument("empty training or validation split".into()));
        }
        let d = ds.n_features();
        let n = splits.train.len() as f64;
        let mut mean = vec![0.0; d];
        let mut std = vec![0.0; d];
        for c in 0..d {
            mean[c] = splits.train.iter().map(|&r| ds.features[(r, c)]).sum::<f64>() / n;
            let var = splits
                .train
                .iter()
                .map(|&r| (ds.features[(r, c)] - mean[c]).powi(2))
                .sum::<f64>()
                / n;
            std[c] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Ok(AdvHptProblem {
            train: standardized(ds, &splits.train, &mean, &std),
            val: standardized(ds, &splits.val, &mean, &std),
            test: standardized(ds, &splits.test, &mean, &std),
            splits,
            c: params.c,
            mu: params.mu,
        })
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn n_train(&self) -> usize {
        self.train.v.dim()
    }

    pub fn n_features(&self) -> usize {
        self.train.u.cols()
    }

    pub fn train(&self) -> &Block2 {
        &self.train
    }

    pub fn test(&self) -> &Block2 {
        &self.test
    }

    /// Engine settings for this problem. For AD the `z` Neumann scale is fixed
    /// at `c0 = 1`: calibrating at `theta = 0` sees only the penalty curvature
    /// `2c / (m N_train)`, and the resulting large scale blows up as soon as
    /// `theta` moves and `f3` gains negative curvature along `theta_f`.
    pub fn default_adjoint_config(engine: Engine) -> AdjointConfig {
        let mut cfg = AdjointConfig::with_engine(engine);
        if engine == Engine::Ad {
            cfg.c0 = Some(1.0);
        }
        cfg
    }

    /// `lambda = 0`, `theta = 0`, `delta = 0`.
    pub fn default_init(&self) -> Point {
        Point::zeros(self.dims())
    }

    /// `c / (m N_train) - ||theta_f||^2 / N_train`; positive iff `f3` is
    /// strongly convex in `delta` on the full training split.
    pub fn ll_convexity_margin(&self, theta: &Vector) -> f64 {
        let d = self.n_features();
        let tf = theta.slice(0, d);
        let n = self.n_train() as f64;
        self.c / ((d + 1) as f64 * n) - tf.norm_sq() / n
    }

    pub fn mse(&self, block: &Block2, theta: &Vector) -> f64 {
        let d = self.n_features();
        let n = block.v.dim();
        (0..n)
            .map(|j| {
                let r = (0..d).map(|k| block.u[(j, k)] * theta[k]).sum::<f64>() + theta[d] - block.v[j];
                r * r
            })
            .sum::<f64>()
            / n as f64
    }

    fn rows(&self, s: &SampleSpec) -> Result<(Vec<usize>, f64)> {
        let n = self.n_train();
        match s {
            SampleSpec::MinibatchIndices(idx) => {
                if idx.is_empty() {
                    return Err(TsgError::InvalidArgument("empty minibatch".into()));
                }
                if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
                    return Err(TsgError::InvalidArgument(format!(
                        "minibatch index {bad} out of range for {n} training rows"
                    )));
                }
                Ok((idx.clone(), 1.0 / idx.len() as f64))
            }
            _ => Ok(((0..n).collect(), 1.0 / n as f64)),
        }
    }

    fn m(&self) -> usize {
        self.n_features() + 1
    }

    fn psi_coef(&self) -> f64 {
        self.c / (self.m() as f64 * self.n_train() as f64)
    }

    fn batch<'a>(&'a self, p: &'a Point, s: &SampleSpec) -> Result<Batch<'a>> {
        p.check(self.dims())?;
        let (rows, w) = self.rows(s)?;
        let d = self.n_features();
        let a: Vec<Vec<f64>> = rows
            .iter()
            .map(|&j| (0..d).map(|k| self.train.u[(j, k)] + p.z[j * d + k]).collect())
            .collect();
        let r = rows
            .iter()
            .zip(&a)
            .map(|(&j, aj)| aj.iter().zip(p.y.iter()).map(|(x, t)| x * t).sum::<f64>() + p.y[d] - self.train.v[j])
            .collect();
        Ok(Batch {
            d,
            rows,
            w,
            a,
            r,
            theta: &p.y,
            t: p.z.dim(),
        })
    }

    fn penalty(&self, p: &Point) -> Result<(f64, Vector, Vector)> {
        let d = self.n_features();
        let (v, g, h) = smoothed_l1(&p.y.slice(0, d), self.mu)?;
        let k = p.x[0].exp() / self.m() as f64;
        let pad = |u: Vector| u.scaled(k).concat(&Vector::zeros(1));
        Ok((k * v, pad(g), pad(h)))
    }
}

/// Per-sample quantities of `L` on one row set.
struct Batch<'a> {
    d: usize,
    rows: Vec<usize>,
    w: f64,
    /// perturbed features `u_j + delta_j`
    a: Vec<Vec<f64>>,
    r: Vec<f64>,
    theta: &'a Vector,
    t: usize,
}

impl Batch<'_> {
    fn loss(&self) -> f64 {
        self.w * self.r.iter().map(|r| r * r).sum::<f64>()
    }

    fn a1(&self, s: usize) -> Vector {
        Vector::from_fn(self.d + 1, |k| if k < self.d { self.a[s][k] } else { 1.0 })
    }

    fn tf_dot(&self, v: &[f64]) -> f64 {
        v.iter().zip(self.theta.iter()).map(|(x, t)| x * t).sum()
    }

    fn grad_theta(&self) -> Vector {
        let mut g = Vector::zeros(self.d + 1);
        for s in 0..self.rows.len() {
            g.axpy(2.0 * self.w * self.r[s], &self.a1(s));
        }
        g
    }

    fn grad_delta(&self) -> Vector {
        let mut g = Vector::zeros(self.t);
        for (s, &j) in self.rows.iter().enumerate() {
            for k in 0..self.d {
                g[j * self.d + k] += 2.0 * self.w * self.r[s] * self.theta[k];
            }
        }
        g
    }

    fn hvp_tt(&self, u: &Vector) -> Vector {
        let mut out = Vector::zeros(self.d + 1);
        for s in 0..self.rows.len() {
            let a1 = self.a1(s);
            out.axpy(2.0 * self.w * a1.dot(u), &a1);
        }
        out
    }

    /// theta-row, delta-column block times `v` (dim t).
    fn hvp_td(&self, v: &Vector) -> Vector {
        let mut out = Vector::zeros(self.d + 1);
        for (s, &j) in self.rows.iter().enumerate() {
            let vj = &v.as_slice()[j * self.d..(j + 1) * self.d];
            out.axpy(2.0 * self.w * self.tf_dot(vj), &self.a1(s));
            for k in 0..self.d {
                out[k] += 2.0 * self.w * self.r[s] * vj[k];
            }
        }
        out
    }

    /// delta-row, theta-column block times `u` (dim d+1).
    fn hvp_dt(&self, u: &Vector) -> Vector {
        let mut out = Vector::zeros(self.t);
        for (s, &j) in self.rows.iter().enumerate() {
            let au = self.a1(s).dot(u);
            for k in 0..self.d {
                out[j * self.d + k] += 2.0 * self.w * (self.theta[k] * au + self.r[s] * u[k]);
            }
        }
        out
    }

    fn hvp_dd(&self, v: &Vector) -> Vector {
        let mut out = Vector::zeros(self.t);
        for &j in &self.rows {
            let tv = self.tf_dot(&v.as_slice()[j * self.d..(j + 1) * self.d]);
            for k in 0..self.d {
                out[j * self.d + k] += 2.0 * self.w * self.theta[k] * tv;
            }
        }
        out
    }

    fn hvp(&self, row: Block, col: Block, v: &Vector, dims: Dims) -> Vector {
        match (row, col) {
            (Block::Y, Block::Y) => self.hvp_tt(v),
            (Block::Y, Block::Z) => self.hvp_td(v),
            (Block::Z, Block::Y) => self.hvp_dt(v),
            (Block::Z, Block::Z) => self.hvp_dd(v),
            _ => Vector::zeros(dims.of(row)),
        }
    }

    fn hess(&self, row: Block, col: Block, dims: Dims) -> Matrix {
        let (nr, nc) = (dims.of(row), dims.of(col));
        let mut out = Matrix::zeros(nr, nc);
        match (row, col) {
            (Block::Y, Block::Y) => {
                for s in 0..self.rows.len() {
                    out.axpy(2.0 * self.w, &Matrix::outer(&self.a1(s), &self.a1(s)));
                }
            }
            (Block::Y, Block::Z) | (Block::Z, Block::Y) => {
                let m = self.d + 1;
                let mut h = Matrix::zeros(m, self.t);
                for (s, &j) in self.rows.iter().enumerate() {
                    let a1 = self.a1(s);
                    for i in 0..m {
                        for k in 0..self.d {
                            let mut v = a1[i] * self.theta[k];
                            if i == k {
                                v += self.r[s];
                            }
                            h[(i, j * self.d + k)] += 2.0 * self.w * v;
                        }
                    }
                }
                out = if row == Block::Y { h } else { h.transpose() };
            }
            (Block::Z, Block::Z) => {
                for &j in &self.rows {
                    for a in 0..self.d {
                        for b in 0..self.d {
                            out[(j * self.d + a, j * self.d + b)] +=
                                2.0 * self.w * self.theta[a] * self.theta[b];
                        }
                    }
                }
            }
            _ => {}
        }
        out
    }

    /// Contraction of the third derivative of `L` over its middle delta index.
    fn third(&self, row: Block, col: Block, v: &Vector, dims: Dims) -> Matrix {
        let m = self.d + 1;
        let d = self.d;
        let mut out = Matrix::zeros(dims.of(row), dims.of(col));
        match (row, col) {
            (Block::Y, Block::Y) => {
                for (s, &j) in self.rows.iter().enumerate() {
                    let a1 = self.a1(s);
                    let vj = Vector::from_fn(m, |k| if k < d { v[j * d + k] } else { 0.0 });
                    out.axpy(2.0 * self.w, &Matrix::outer(&a1, &vj));
                    out.axpy(2.0 * self.w, &Matrix::outer(&vj, &a1));
                }
            }
            (Block::Y, Block::Z) | (Block::Z, Block::Y) => {
                let mut h = Matrix::zeros(m, self.t);
                for &j in &self.rows {
                    let vj = &v.as_slice()[j * d..(j + 1) * d];
                    let tv = self.tf_dot(vj);
                    for k in 0..d {
                        h[(k, j * d + k)] += 2.0 * self.w * tv;
                        for i in 0..d {
                            h[(i, j * d + k)] += 2.0 * self.w * vj[i] * self.theta[k];
                        }
                    }
                }
                out = if row == Block::Y { h } else { h.transpose() };
            }
            _ => {}
        }
        out
    }
}

impl ProblemOracle for AdvHptProblem {
    fn dims(&self) -> Dims {
        Dims {
            n: 1,
            m: self.m(),
            t: self.n_train() * self.n_features(),
        }
    }

    fn capabilities(&self) -> OracleCapabilities {
        OracleCapabilities::FULL
    }

    fn value(&self, level: Level, p: &Point, s: &SampleSpec) -> Result<f64> {
        p.check(self.dims())?;
        Ok(match level {
            Level::F1 => self.mse(&self.val, &p.y),
            Level::F2 => self.batch(p, s)?.loss() + self.penalty(p)?.0,
            Level::F3 => -self.batch(p, s)?.loss() + self.psi_coef() * p.z.norm_sq(),
        })
    }

    fn grad(&self, level: Level, wrt: Block, p: &Point, s: &SampleSpec) -> Result<Vector> {
        p.check(self.dims())?;
        let dims = self.dims();
        Ok(match (level, wrt) {
            (Level::F1, Block::Y) => {
                let n = self.val.v.dim();
                let d = self.n_features();
                let mut g = Vector::zeros(d + 1);
                for j in 0..n {
                    let u1 = Vector::from_fn(d + 1, |k| if k < d { self.val.u[(j, k)] } else { 1.0 });
                    g.axpy(2.0 * (u1.dot(&p.y) - self.val.v[j]) / n as f64, &u1);
                }
                g
            }
            (Level::F1, b) => Vector::zeros(dims.of(b)),
            (Level::F2, Block::X) => Vector::from([self.penalty(p)?.0]),
            (Level::F2, Block::Y) => self.batch(p, s)?.grad_theta() + self.penalty(p)?.1,
            (Level::F2, Block::Z) => self.batch(p, s)?.grad_delta(),
            (Level::F3, Block::X) => Vector::zeros(1),
            (Level::F3, Block::Y) => -self.batch(p, s)?.grad_theta(),
            (Level::F3, Block::Z) => {
                let mut g = -self.batch(p, s)?.grad_delta();
                g.axpy(2.0 * self.psi_coef(), &p.z);
                g
            }
        })
    }

    fn hess(&self, level: Level, row: Block, col: Block, p: &Point, s: &SampleSpec) -> Result<Matrix> {
        p.check(self.dims())?;
        let dims = self.dims();
        Ok(match level {
            Level::F1 => {
                let mut h = Matrix::zeros(dims.of(row), dims.of(col));
                if (row, col) == (Block::Y, Block::Y) {
                    let n = self.val.v.dim();
                    let d = self.n_features();
                    for j in 0..n {
                        let u1 = Vector::from_fn(d + 1, |k| if k < d { self.val.u[(j, k)] } else { 1.0 });
                        h.axpy(2.0 / n as f64, &Matrix::outer(&u1, &u1));
                    }
                }
                h
            }
            Level::F2 => {
                let mut h = self.batch(p, s)?.hess(row, col, dims);
                let (v, g, diag) = self.penalty(p)?;
                match (row, col) {
                    (Block::X, Block::X) => h[(0, 0)] += v,
                    (Block::X, Block::Y) => h.axpy(1.0, &g.to_column().transpose()),
                    (Block::Y, Block::X) => h.axpy(1.0, &g.to_column()),
                    (Block::Y, Block::Y) => h.axpy(1.0, &Matrix::diag(&diag)),
                    _ => {}
                }
                h
            }
            Level::F3 => {
                let mut h = self.batch(p, s)?.hess(row, col, dims).scaled(-1.0);
                if (row, col) == (Block::Z, Block::Z) {
                    h.axpy(2.0 * self.psi_coef(), &Matrix::identity(dims.t));
                }
                h
            }
        })
    }

    fn hvp(&self, level: Level, row: Block, col: Block, p: &Point, s: &SampleSpec, v: &Vector) -> Result<Vector> {
        p.check(self.dims())?;
        let dims = self.dims();
        check_dim("hvp direction", dims.of(col), v.dim())?;
        Ok(match level {
            Level::F1 => self.hess(level, row, col, p, s)?.matvec(v)?,
            Level::F2 => {
                let mut out = self.batch(p, s)?.hvp(row, col, v, dims);
                let (val, g, diag) = self.penalty(p)?;
                match (row, col) {
                    (Block::X, Block::X) => out[0] += val * v[0],
                    (Block::X, Block::Y) => out[0] += g.dot(v),
                    (Block::Y, Block::X) => out.axpy(v[0], &g),
                    (Block::Y, Block::Y) => {
                        for i in 0..out.dim() {
                            out[i] += diag[i] * v[i];
                        }
                    }
                    _ => {}
                }
                out
            }
            Level::F3 => {
                let mut out = -self.batch(p, s)?.hvp(row, col, v, dims);
                if (row, col) == (Block::Z, Block::Z) {
                    out.axpy(2.0 * self.psi_coef(), v);
                }
                out
            }
        })
    }

    fn third_contract(&self, row: Block, col: Block, p: &Point, s: &SampleSpec, v: &Vector) -> Result<Matrix> {
        p.check(self.dims())?;
        check_dim("third_contract direction", self.dims().t, v.dim())?;
        Ok(self.batch(p, s)?.third(row, col, v, self.dims()).scaled(-1.0))
    }
}

/// Test MSE under i.i.d. `N(0, noise_std^2)` perturbations of the
/// standardized test features, one independent draw per realization.
pub fn noisy_test_mse(
    problem: &AdvHptProblem,
    theta: &Vector,
    noise_std: f64,
    realizations: usize,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    if realizations == 0 {
        return Err(TsgError::InvalidArgument("need at least one realization".into()));
    }
    if !(noise_std >= 0.0) {
        return Err(TsgError::InvalidArgument(format!("noise std must be nonnegative, got {noise_std}")));
    }
    check_dim("theta", problem.n_features() + 1, theta.dim())?;
    let test = problem.test();
    if test.v.dim() == 0 {
        return Err(TsgError::InvalidArgument("empty test split".into()));
    }
    let values: Vec<f64> = (0..realizations)
        .map(|r| {
            let mut rng = keyed_rng(&[seed, 0x7e57, r as u64]);
            let mut noisy = test.clone();
            for j in 0..noisy.u.rows() {
                for k in 0..noisy.u.cols() {
                    noisy.u[(j, k)] += noise_std * rng.sample::<f64, _>(StandardNormal);
                }
            }
            problem.mse(&noisy, theta)
        })
        .collect();
    let mean = values.iter().sum::<f64>() / realizations as f64;
    Ok((mean, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::fd_block_hvp;

    fn toy(n: usize, d: usize) -> TabularDataset {
        let mut rng = crate::rng::seeded_rng(42);
        let features = Matrix::from_fn(n, d, |_, _| rng.gen_range(-2.0..3.0));
        let targets = Vector::from_fn(n, |j| 1.0 + features[(j, 0)] - 0.5 * features[(j, d - 1)]);
        TabularDataset {
            features,
            targets,
            feature_names: (0..d).map(|k| format!("f{k}")).collect(),
            target_name: "y".into(),
        }
    }

    #[test]
    fn csv_shapes_and_errors() {
        let ds = parse_csv("a,b,t\n1,2,3\n4,5,6\n7,8,9\n".as_bytes(), None).unwrap();
        assert_eq!((ds.len(), ds.n_features()), (3, 2));
        assert_eq!(ds.targets, Vector::from([3.0, 6.0, 9.0]));
        let by_name = parse_csv("a,b,t\n1,2,3\n".as_bytes(), Some("a")).unwrap();
        assert_eq!(by_name.targets, Vector::from([1.0]));
        assert_eq!(by_name.feature_names, vec!["b", "t"]);
        match parse_csv("a,b,t\n1,,3\n".as_bytes(), None) {
            Err(TsgError::Data { row, column, .. }) => assert_eq!((row, column.as_str()), (1, "b")),
            other => panic!("{other:?}"),
        }
        assert!(parse_csv("a,b,t\n1,x,3\n".as_bytes(), None).is_err());
        assert!(parse_csv("".as_bytes(), None).is_err());
        assert!(parse_csv("a,b\n".as_bytes(), None).is_err());
    }

    #[test]
    fn split_sizes() {
        let s = split_dataset(100, &SplitSpec::default()).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 15, 15));
        let s = split_dataset(20_640, &SplitSpec::default()).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (14_448, 3_096, 3_096));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..20_640).collect::<Vec<_>>());
        assert_eq!(s, split_dataset(20_640, &SplitSpec::default()).unwrap());
    }

    #[test]
    fn smoothed_l1_examples() {
        let (v, g, _) = smoothed_l1(&Vector::zeros(4), 0.25).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
        assert_eq!(g, Vector::zeros(4));
        let (v, _, _) = smoothed_l1(&Vector::from([10.0]), 0.25).unwrap();
        assert!((v - 10.0).abs() <= 0.003125);
        assert!(smoothed_l1(&Vector::zeros(1), 0.0).is_err());
    }

    #[test]
    fn single_sample_hand_values() {
        // u = 1, v = 0, intercept pinned at zero, theta_f = 1, delta = 0
        let ds = TabularDataset {
            features: Matrix::from_fn(10, 1, |j, _| if j == 0 { 1.0 } else { 1.0 + j as f64 }),
            targets: Vector::zeros(10),
            feature_names: vec!["u".into()],
            target_name: "v".into(),
        };
        let prob = AdvHptProblem::new(&ds, &AdvHptParams::default()).unwrap();
        let j0 = 0usize;
        let tr = prob.train();
        let u0 = tr.u[(j0, 0)];
        let v0 = tr.v[j0];
        // Shift delta so the perturbed standardized feature equals 1 for row 0.
        let mut p = prob.default_init();
        p.y = Vector::from([1.0, 0.0]);
        p.z[j0] = 1.0 - u0;
        let s = SampleSpec::MinibatchIndices(vec![j0]);
        let psi = prob.psi_coef() * p.z.norm_sq();
        assert!((prob.value(Level::F3, &p, &s).unwrap() - (-(1.0 - v0).powi(2) + psi)).abs() < 1e-12);
        let g = prob.grad(Level::F3, Block::Z, &p, &s).unwrap();
        let expect = -2.0 * (1.0 - v0) + 2.0 * prob.psi_coef() * p.z[j0];
        assert!((g[j0] - expect).abs() < 1e-12);
    }

    #[test]
    fn lambda_limit_and_monotone_penalty() {
        let prob = AdvHptProblem::new(&toy(20, 3), &AdvHptParams::default()).unwrap();
        let mut p = prob.default_init();
        p.y = Vector::from([0.3, -0.2, 0.1, 1.0]);
        p.x = Vector::from([-20.0]);
        let f2 = prob.value(Level::F2, &p, &SampleSpec::Deterministic).unwrap();
        assert!((f2 - prob.mse(prob.train(), &p.y)).abs() < 1e-8);
        p.x = Vector::from([0.5]);
        assert!(prob.grad(Level::F2, Block::X, &p, &SampleSpec::Deterministic).unwrap()[0] > 0.0);
    }

    #[test]
    fn delta_gradients_share_the_loss() {
        let prob = AdvHptProblem::new(&toy(20, 3), &AdvHptParams::default()).unwrap();
        let mut p = prob.default_init();
        p.y = Vector::from([0.3, -0.2, 0.1, 1.0]);
        p.z = Vector::from_fn(p.z.dim(), |i| 0.01 * i as f64);
        let s = SampleSpec::Deterministic;
        let g2 = prob.grad(Level::F2, Block::Z, &p, &s).unwrap();
        let g3 = prob.grad(Level::F3, Block::Z, &p, &s).unwrap();
        let psi = p.z.scaled(2.0 * prob.psi_coef());
        assert!((&g3 - &(&psi - &g2)).max_abs() < 1e-14);
    }

    #[test]
    fn hvps_match_dense_and_fd() {
        let prob = AdvHptProblem::new(&toy(12, 2), &AdvHptParams::default()).unwrap();
        let mut p = prob.default_init();
        p.x = Vector::from([0.2]);
        p.y = Vector::from([0.5, -0.4, 0.7]);
        p.z = Vector::from_fn(p.z.dim(), |i| 0.05 * (i as f64).sin());
        let dims = prob.dims();
        let blocks = [Block::X, Block::Y, Block::Z];
        for s in [SampleSpec::Deterministic, SampleSpec::MinibatchIndices(vec![1, 3, 4])] {
            for level in [Level::F1, Level::F2, Level::F3] {
                for &row in &blocks {
                    for &col in &blocks {
                        let v = Vector::from_fn(dims.of(col), |i| 0.3 - 0.1 * i as f64);
                        let hv = prob.hvp(level, row, col, &p, &s, &v).unwrap();
                        let dense = prob.hess(level, row, col, &p, &s).unwrap().matvec(&v).unwrap();
                        let fd = fd_block_hvp(&prob, level, row, col, &p, &s, &v, 1e-4).unwrap();
                        assert!((&hv - &dense).max_abs() < 1e-12, "{level:?} {row:?}{col:?}");
                        assert!((&hv - &fd).max_abs() < 1e-6, "{level:?} {row:?}{col:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn minibatch_mean_is_full_gradient() {
        // Average over all batches of size 2 from 6 rows equals the full-split gradient.
        let split = SplitSpec { train_frac: 0.6, val_frac: 0.2, test_frac: 0.2, seed: 1 };
        let prob = AdvHptProblem::new(&toy(10, 2), &AdvHptParams { split, ..Default::default() }).unwrap();
        assert_eq!(prob.n_train(), 6);
        let mut p = prob.default_init();
        p.y = Vector::from([0.5, -0.4, 0.7]);
        p.z = Vector::from_fn(p.z.dim(), |i| 0.1 * i as f64);
        let full = prob.grad(Level::F2, Block::Y, &p, &SampleSpec::Deterministic).unwrap();
        let full_z = prob.grad(Level::F3, Block::Z, &p, &SampleSpec::Deterministic).unwrap();
        let mut acc = Vector::zeros(3);
        let mut acc_z = Vector::zeros(p.z.dim());
        let mut count = 0.0;
        for a in 0..6 {
            for b in a + 1..6 {
                let s = SampleSpec::MinibatchIndices(vec![a, b]);
                acc += &prob.grad(Level::F2, Block::Y, &p, &s).unwrap();
                acc_z += &prob.grad(Level::F3, Block::Z, &p, &s).unwrap();
                count += 1.0;
            }
        }
        assert!((&acc.scaled(1.0 / count) - &full).max_abs() < 1e-12);
        assert!((&acc_z.scaled(1.0 / count) - &full_z).max_abs() < 1e-12);
        assert!(prob.grad(Level::F2, Block::Y, &p, &SampleSpec::MinibatchIndices(vec![6])).is_err());
    }

    #[test]
    fn noisy_test_mse_defaults() {
        let prob = AdvHptProblem::new(&toy(40, 3), &AdvHptParams::default()).unwrap();
        let theta = Vector::from([0.1, 0.2, 0.3, 1.0]);
        let (mean, vals) = noisy_test_mse(&prob, &theta, 5.0, 100, 7).unwrap();
        assert_eq!(vals.len(), 100);
        assert_eq!(mean, noisy_test_mse(&prob, &theta, 5.0, 100, 7).unwrap().0);
        let (clean, vals) = noisy_test_mse(&prob, &theta, 0.0, 3, 7).unwrap();
        assert!(vals.iter().all(|&v| v == clean));
        assert_eq!(clean, prob.mse(prob.test(), &theta));
        assert!(noisy_test_mse(&prob, &theta, 5.0, 0, 7).is_err());
    }

    #[test]
    fn delta_hessian_blocks() {
        let prob = AdvHptProblem::new(&toy(10, 2), &AdvHptParams::default()).unwrap();
        let mut p = prob.default_init();
        p.y = Vector::from([0.5, -0.4, 0.7]);
        let h = prob.hess(Level::F2, Block::Z, Block::Z, &p, &SampleSpec::Deterministic).unwrap();
        let n = prob.n_train() as f64;
        let tf = Vector::from([0.5, -0.4]);
        let blk = Matrix::outer(&tf, &tf).scaled(2.0 / n);
        for j in 0..prob.n_train() {
            for a in 0..2 {
                for b in 0..2 {
                    assert!((h[(2 * j + a, 2 * j + b)] - blk[(a, b)]).abs() < 1e-14);
                }
            }
        }
        assert_eq!(h[(0, 2)], 0.0);
    }

    #[test]
    fn third_contract_is_hessian_derivative_along_delta() {
        let prob = AdvHptProblem::new(&toy(12, 2), &AdvHptParams::default()).unwrap();
        let mut p = prob.default_init();
        p.y = Vector::from([0.5, -0.4, 0.7]);
        p.z = Vector::from_fn(p.z.dim(), |i| 0.05 * (i as f64).cos());
        let v = Vector::from_fn(p.z.dim(), |i| 0.2 - 0.03 * i as f64);
        let s = SampleSpec::MinibatchIndices(vec![0, 2, 5]);
        let eps = 1e-5;
        for row in [Block::X, Block::Y, Block::Z] {
            for col in [Block::X, Block::Y, Block::Z] {
                let hp = prob.hess(Level::F3, row, col, &p.shifted(Block::Z, eps, &v), &s).unwrap();
                let hm = prob.hess(Level::F3, row, col, &p.shifted(Block::Z, -eps, &v), &s).unwrap();
                let fd = (&hp - &hm).scaled(0.5 / eps);
                let t = prob.third_contract(row, col, &p, &s, &v).unwrap();
                assert!((&t - &fd).max_abs() < 1e-7, "{row:?}{col:?}");
            }
        }
    }
}
