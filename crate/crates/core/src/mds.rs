//! Metric MDS with elliptical measures: minimize
//! `Σ_{i≠j} (D_ij − W₂(μ_i, μ_j))²` over means and scale factors.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bures::{w2_sq_iters, EllipticalPoint, GradientPair, DEFAULT_NS_ITERS};
use crate::error::{EllError, Result};
use crate::optim::{w2_sq_with_grads, Optimizer, OptimizerKind, PreparedPoint};
use crate::sampling::{normal_matrix, normal_vector};

/// Floor added under the square root of `W₂²` when differentiating the stress.
pub const DISTANCE_FLOOR: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct MdsProblem {
    dissimilarities: DMatrix<f64>,
    pub target_dim: usize,
    pub tau: f64,
}

impl MdsProblem {
    pub fn new(dissimilarities: DMatrix<f64>, target_dim: usize, tau: f64) -> Result<Self> {
        let n = dissimilarities.nrows();
        validate_dissimilarities(&dissimilarities)?;
        if n < 2 {
            return Err(EllError::DegenerateProblem(format!("need at least 2 items, got {n}")));
        }
        if target_dim == 0 {
            return Err(EllError::Domain("target dimension must be positive".into()));
        }
        if !(tau > 0.0) {
            return Err(EllError::Domain(format!("tau must be positive, got {tau}")));
        }
        Ok(Self { dissimilarities, target_dim, tau })
    }

    pub fn dissimilarities(&self) -> &DMatrix<f64> {
        &self.dissimilarities
    }

    pub fn len(&self) -> usize {
        self.dissimilarities.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn validate_dissimilarities(d: &DMatrix<f64>) -> Result<()> {
    let n = d.nrows();
    if d.ncols() != n {
        return Err(EllError::Shape(format!("dissimilarity matrix is {}x{}", n, d.ncols())));
    }
    for i in 0..n {
        if d[(i, i)] != 0.0 {
            return Err(EllError::Data(format!("nonzero diagonal entry at {i}")));
        }
        for j in 0..n {
            let v = d[(i, j)];
            if !(v >= 0.0) || !v.is_finite() {
                return Err(EllError::Data(format!("invalid dissimilarity {v} at ({i}, {j})")));
            }
            if (v - d[(j, i)]).abs() > 1e-12 * v.abs().max(1.0) {
                return Err(EllError::Data(format!("dissimilarities are not symmetric at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

/// Parse a whitespace-delimited numeric table; `#` starts a comment.
pub fn parse_table(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| EllError::Format { line: i + 1, msg: format!("not a number: `{s}`") })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first().map(Vec::len) {
            if row.len() != first {
                return Err(EllError::Format {
                    line: i + 1,
                    msg: format!("expected {first} columns, found {}", row.len()),
                });
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Pairwise Euclidean distances between table rows.
pub fn euclidean_dissimilarities(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    DMatrix::from_fn(n, n, |i, j| {
        rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    })
}

/// Interpret a parsed table as a full dissimilarity matrix.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(EllError::Shape(format!("dissimilarity file must be square, found {n} rows")));
    }
    let m = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
    validate_dissimilarities(&m)?;
    Ok(m)
}

fn check_points(points: &[EllipticalPoint], d: &DMatrix<f64>) -> Result<()> {
    if points.len() != d.nrows() || d.ncols() != d.nrows() {
        return Err(EllError::Shape(format!(
            "{} points for a {}x{} dissimilarity matrix",
            points.len(),
            d.nrows(),
            d.ncols()
        )));
    }
    Ok(())
}

fn upper_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).collect()
}

/// Stress summed over ordered pairs (twice the sum over `i < j`).
pub fn stress(points: &[EllipticalPoint], d: &DMatrix<f64>) -> Result<f64> {
    stress_iters(points, d, DEFAULT_NS_ITERS)
}

pub fn stress_iters(points: &[EllipticalPoint], d: &DMatrix<f64>, iters: usize) -> Result<f64> {
    check_points(points, d)?;
    let terms = upper_pairs(points.len())
        .into_par_iter()
        .map(|(i, j)| {
            let w = w2_sq_iters(&points[i], &points[j], iters)?.max(0.0).sqrt();
            Ok((d[(i, j)] - w).powi(2))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(2.0 * terms.iter().sum::<f64>())
}

/// Stress divided by `Σ_ij D_ij²`.
pub fn normalized_stress(points: &[EllipticalPoint], d: &DMatrix<f64>) -> Result<f64> {
    normalized_stress_iters(points, d, DEFAULT_NS_ITERS)
}

pub fn normalized_stress_iters(points: &[EllipticalPoint], d: &DMatrix<f64>, iters: usize) -> Result<f64> {
    let denom = d.norm_squared();
    if denom == 0.0 {
        return Err(EllError::DegenerateProblem("all dissimilarities are zero".into()));
    }
    Ok(stress_iters(points, d, iters)? / denom)
}

/// Stress together with its gradient for every point.
pub fn stress_and_grad(
    points: &[EllipticalPoint],
    d: &DMatrix<f64>,
    iters: usize,
) -> Result<(f64, Vec<GradientPair>)> {
    check_points(points, d)?;
    let prepared = points
        .par_iter()
        .map(|p| PreparedPoint::new(p, iters))
        .collect::<Result<Vec<_>>>()?;
    let pairs = upper_pairs(points.len());
    let terms = pairs
        .par_iter()
        .map(|&(i, j)| {
            let pg = w2_sq_with_grads(&prepared[i], &points[j], iters)?;
            let w_sq = pg.value.max(0.0);
            let resid = d[(i, j)] - w_sq.sqrt();
            // d/dθ 2(D − W)² = −2(D − W)/W · dW²/dθ
            let coeff = -2.0 * resid / (w_sq + DISTANCE_FLOOR).sqrt();
            Ok((2.0 * resid * resid, pg.left.scaled(coeff), pg.right.scaled(coeff)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grads: Vec<GradientPair> = points.iter().map(GradientPair::zeros_like).collect();
    let mut total = 0.0;
    for (&(i, j), (value, gl, gr)) in pairs.iter().zip(&terms) {
        total += value;
        grads[i].add_scaled(gl, 1.0);
        grads[j].add_scaled(gr, 1.0);
    }
    Ok((total, grads))
}

/// Random elliptical points whose factors are `d × dof` standard normal
/// matrices, so that `L·Lᵀ` follows a standard Wishart with `dof` degrees of
/// freedom. Means are standard normal.
pub fn wishart_init(n: usize, d: usize, dof: usize, epsilon: f64, tau: f64, seed: u64) -> Result<Vec<EllipticalPoint>> {
    if dof < d && epsilon == 0.0 {
        warn!("Wishart initialization with {dof} < {d} degrees of freedom and zero epsilon gives singular scales");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let factor = normal_matrix(&mut rng, d, dof, 1.0);
            let mean = normal_vector(&mut rng, d, 1.0);
            EllipticalPoint::new(mean, factor, epsilon, tau)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct MdsConfig {
    pub iters: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Degrees of freedom of the Wishart initialization (also the factor rank).
    pub dof: usize,
    pub epsilon: f64,
    pub ns_iters: usize,
    pub seed: u64,
    /// Fit on dissimilarities rescaled to unit root-mean-square and map the
    /// result back, which makes the learning rate independent of data units.
    pub normalize: bool,
}

impl Default for MdsConfig {
    fn default() -> Self {
        Self {
            iters: 1000,
            lr: 0.01,
            optimizer: OptimizerKind::Adagrad,
            dof: 4,
            epsilon: 1e-4,
            ns_iters: DEFAULT_NS_ITERS,
            seed: 0,
            normalize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FitStatus {
    Completed,
    /// The loss or the iterate became non-finite at `iteration`; the returned
    /// points are the last finite iterate.
    Aborted { iteration: usize, reason: String },
}

#[derive(Clone, Debug)]
pub struct MdsFit {
    pub points: Vec<EllipticalPoint>,
    /// Normalized stress before each update, then once more at the end.
    pub stress_log: Vec<f64>,
    pub status: FitStatus,
}

impl MdsFit {
    pub fn final_stress(&self) -> f64 {
        self.stress_log.last().copied().unwrap_or(f64::NAN)
    }
}

fn rescale(points: &mut [EllipticalPoint], s: f64) {
    for p in points {
        p.mean *= s;
        p.factor *= s;
        p.epsilon *= s * s;
    }
}

/// Full-gradient descent on the stress, starting from a Wishart draw.
/// `init_means` optionally replaces the random initial means.
pub fn fit_mds(problem: &MdsProblem, config: &MdsConfig, init_means: Option<&[DVector<f64>]>) -> Result<MdsFit> {
    let n = problem.len();
    let dim = problem.target_dim;
    let raw = problem.dissimilarities();
    let denom = raw.norm_squared();
    if denom == 0.0 {
        return Err(EllError::DegenerateProblem("all dissimilarities are zero".into()));
    }
    let unit = if config.normalize { (denom / (n * (n - 1)) as f64).sqrt() } else { 1.0 };
    let target = raw / unit;

    let mut points = wishart_init(n, dim, config.dof, config.epsilon / (unit * unit), problem.tau, config.seed)?;
    if let Some(means) = init_means {
        if means.len() != n || means.iter().any(|m| m.len() != dim) {
            return Err(EllError::Shape(format!("expected {n} initial means of length {dim}")));
        }
        for (p, m) in points.iter_mut().zip(means) {
            p.mean = m / unit;
        }
    }

    let target_denom = target.norm_squared();
    let mut opt = Optimizer::new(config.optimizer, &points, config.lr)?;
    let mut log = Vec::with_capacity(config.iters + 1);
    let mut status = FitStatus::Completed;
    for it in 0..config.iters {
        let (value, grads) = match stress_and_grad(&points, &target, config.ns_iters) {
            Ok(v) => v,
            Err(e) if e.is_numerical() => {
                status = FitStatus::Aborted { iteration: it, reason: e.to_string() };
                break;
            }
            Err(e) => return Err(e),
        };
        if !value.is_finite() {
            status = FitStatus::Aborted { iteration: it, reason: format!("stress became {value}") };
            break;
        }
        log.push(value / target_denom);
        let previous = points.clone();
        let stepped = opt.step(&mut points, &grads);
        if stepped.is_err() || points.iter().any(|p| !p.is_finite()) {
            points = previous;
            let reason = match stepped {
                Err(e) => e.to_string(),
                Ok(()) => "iterate became non-finite".into(),
            };
            status = FitStatus::Aborted { iteration: it, reason };
            break;
        }
    }
    if status == FitStatus::Completed {
        log.push(normalized_stress_iters(&points, &target, config.ns_iters)?);
    }
    rescale(&mut points, unit);
    Ok(MdsFit { points, stress_log: log, status })
}
