//! Closed-form geometry of elliptical measures under the 2-Wasserstein metric.
//!
//! An elliptical measure is stored as a mean `a` and a factor `L`; its scale
//! matrix is always the regularized product `A = L·Lᵀ + ε·I`. The squared
//! distance between two measures of the same family is
//!
//! ```text
//! W₂²(α, β) = ‖a − b‖² + τ · B²(A, B)
//! B²(A, B)  = Tr(A + B − 2 (A^½ B A^½)^½)
//! ```
//!
//! All matrix square roots in this module come from [`newton_schulz`], which only
//! needs matrix products. Exact eigendecompositions are used solely for the
//! rank-deficient gradient corner case, where Newton-Schulz cannot produce an
//! inverse root.

use std::cell::Cell;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{EllError, Result};

/// Iteration count used when the caller does not choose one.
pub const DEFAULT_NS_ITERS: usize = 20;
/// Iteration count used by the trainers.
pub const TRAINING_NS_ITERS: usize = 6;
/// Normalization slack of the Newton-Schulz iteration.
pub const DEFAULT_NS_EPS: f64 = 1e-6;
/// Default shared regularizer added to every factor product during training.
pub const DEFAULT_EPSILON: f64 = 0.01;

const SYMMETRY_TOL: f64 = 1e-9;
const SINGULAR_RCOND: f64 = 1e-12;

thread_local! {
    static NS_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`newton_schulz`] invocations made so far on the current thread.
pub fn newton_schulz_calls() -> u64 {
    NS_CALLS.with(|c| c.get())
}

/// Family of the characteristic generator. Only the constant `τ` linking scale
/// and covariance matters to the geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Gaussian,
    /// Uniform measure on the ellipsoid `{c + C·x : ‖x‖ ≤ 1}`.
    Uniform,
}

impl Family {
    pub fn tau(self, dim: usize) -> f64 {
        match self {
            Family::Gaussian => 1.0,
            Family::Uniform => 1.0 / (dim as f64 + 2.0),
        }
    }
}

/// One embedded object: an elliptical measure in factor form.
#[derive(Clone, Debug, PartialEq)]
pub struct EllipticalPoint {
    pub mean: DVector<f64>,
    /// `d × k` factor; `k = 0` encodes a Dirac (up to `epsilon`).
    pub factor: DMatrix<f64>,
    pub epsilon: f64,
    pub tau: f64,
}

impl EllipticalPoint {
    pub fn new(mean: DVector<f64>, factor: DMatrix<f64>, epsilon: f64, tau: f64) -> Result<Self> {
        if factor.nrows() != mean.len() {
            return Err(EllError::Shape(format!(
                "factor has {} rows but mean has length {}",
                factor.nrows(),
                mean.len()
            )));
        }
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(EllError::Domain(format!("epsilon must be nonnegative, got {epsilon}")));
        }
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(EllError::Domain(format!("tau must be positive, got {tau}")));
        }
        Ok(Self { mean, factor, epsilon, tau })
    }

    pub fn gaussian(mean: DVector<f64>, factor: DMatrix<f64>, epsilon: f64) -> Result<Self> {
        Self::new(mean, factor, epsilon, 1.0)
    }

    pub fn uniform(mean: DVector<f64>, factor: DMatrix<f64>, epsilon: f64) -> Result<Self> {
        let tau = Family::Uniform.tau(mean.len());
        Self::new(mean, factor, epsilon, tau)
    }

    /// Point mass at `mean`.
    pub fn dirac(mean: DVector<f64>, tau: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, DMatrix::zeros(d, 0), 0.0, tau)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn rank(&self) -> usize {
        self.factor.ncols()
    }

    /// Effective scale `L·Lᵀ + ε·I`.
    pub fn scale(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut a = &self.factor * self.factor.transpose();
        for i in 0..d {
            a[(i, i)] += self.epsilon;
        }
        a
    }

    /// A factor `F` with `F·Fᵀ` equal to the effective scale (the regularizer is
    /// folded in as extra columns `√ε·I`).
    pub fn full_factor(&self) -> DMatrix<f64> {
        if self.epsilon == 0.0 {
            return self.factor.clone();
        }
        let d = self.dim();
        let k = self.rank();
        let mut f = DMatrix::zeros(d, k + d);
        f.view_mut((0, 0), (d, k)).copy_from(&self.factor);
        let s = self.epsilon.sqrt();
        for i in 0..d {
            f[(i, k + i)] = s;
        }
        f
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().chain(self.factor.iter()).all(|v| v.is_finite())
    }
}

/// Linear part of the optimal map between two centered elliptical measures.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportMap {
    pub t: DMatrix<f64>,
}

impl TransportMap {
    /// `T·A·T`, which equals the target scale for an exact map.
    pub fn push_forward(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        symmetrize(&(&self.t * a * &self.t))
    }
}

/// Square root and inverse square root produced by [`newton_schulz`].
#[derive(Clone, Debug)]
pub struct SqrtPair {
    pub y: DMatrix<f64>,
    pub z: DMatrix<f64>,
    /// `‖Y·Z − I‖_F` at exit.
    pub residual: f64,
}

/// Gradient of a scalar loss with respect to one point's mean and factor.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientPair {
    pub d_mean: DVector<f64>,
    pub d_factor: DMatrix<f64>,
}

impl GradientPair {
    pub fn zeros(dim: usize, rank: usize) -> Self {
        Self { d_mean: DVector::zeros(dim), d_factor: DMatrix::zeros(dim, rank) }
    }

    pub fn zeros_like(p: &EllipticalPoint) -> Self {
        Self::zeros(p.dim(), p.rank())
    }

    pub fn add_scaled(&mut self, other: &GradientPair, s: f64) {
        self.d_mean.axpy(s, &other.d_mean, 1.0);
        self.d_factor += &other.d_factor * s;
    }

    pub fn scaled(mut self, s: f64) -> Self {
        self.d_mean *= s;
        self.d_factor *= s;
        self
    }

    pub fn is_finite(&self) -> bool {
        self.d_mean.iter().chain(self.d_factor.iter()).all(|v| v.is_finite())
    }
}

/// Which closed form to use for the transport map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapFormula {
    /// `A^-½ (A^½ B A^½)^½ A^-½`
    Primal,
    /// `B^½ (B^½ A B^½)^-½ B^½`
    Alternative,
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn check_square(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(EllError::Shape(format!("{what} is {}x{}, expected square", m.nrows(), m.ncols())));
    }
    Ok(())
}

fn check_same_dim(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    check_square(a, "A")?;
    check_square(b, "B")?;
    if a.nrows() != b.nrows() {
        return Err(EllError::Shape(format!("A is {0}x{0} but B is {1}x{1}", a.nrows(), b.nrows())));
    }
    Ok(())
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    let scale = m.amax();
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    if worst > SYMMETRY_TOL * scale.max(f64::MIN_POSITIVE) {
        return Err(EllError::Shape(format!("matrix is not symmetric (asymmetry {worst:e})")));
    }
    Ok(())
}

/// Coupled Newton-Schulz iteration for `M^½` and `M^-½`.
///
/// `M` is scaled by `(1 + eps)·‖M‖_F` so its spectrum lies in `(0, 1)`, iterated
/// a fixed number of times with `T ← (3I − ZY)/2, Y ← YT, Z ← TZ`, then scaled
/// back. For a singular `M` the returned `Y` is still the square root but `Z`
/// is meaningless and `residual` stays at or above 1.
pub fn newton_schulz(m: &DMatrix<f64>, iters: usize, eps: f64) -> Result<SqrtPair> {
    check_square(m, "input")?;
    if iters == 0 {
        return Err(EllError::Domain("Newton-Schulz needs at least one iteration".into()));
    }
    if !(eps > 0.0) {
        return Err(EllError::Domain(format!("Newton-Schulz eps must be positive, got {eps}")));
    }
    if !m.iter().all(|v| v.is_finite()) {
        return Err(EllError::NonFinite("Newton-Schulz input".into()));
    }
    check_symmetric(m)?;
    let norm = m.norm();
    if norm == 0.0 {
        return Err(EllError::Singular("Newton-Schulz input is the zero matrix".into()));
    }
    NS_CALLS.with(|c| c.set(c.get() + 1));

    let d = m.nrows();
    let eye = DMatrix::<f64>::identity(d, d);
    let s = (1.0 + eps) * norm;
    let mut y = m / s;
    let mut z = eye.clone();
    let mut zy = y.clone();
    let mut prev = (&zy - &eye).norm();
    for k in 1..=iters {
        let t = (&eye * 3.0 - &zy) * 0.5;
        y = &y * &t;
        z = &t * &z;
        zy = &z * &y;
        let res = (&zy - &eye).norm();
        if !res.is_finite() || (res > 2.0 * prev && res > 1e-6) {
            return Err(EllError::Convergence { iteration: k, residual: res });
        }
        prev = res;
    }
    let root = s.sqrt();
    let y = symmetrize(&(y * root));
    let z = symmetrize(&(z / root));
    let residual = (&y * &z - &eye).norm();
    if !residual.is_finite() {
        return Err(EllError::Convergence { iteration: iters, residual });
    }
    Ok(SqrtPair { y, z, residual })
}

/// `M^½`, with the zero matrix mapped to itself.
pub fn sqrt_psd(m: &DMatrix<f64>, iters: usize) -> Result<DMatrix<f64>> {
    check_square(m, "input")?;
    if m.norm() == 0.0 {
        return Ok(m.clone());
    }
    Ok(newton_schulz(m, iters, DEFAULT_NS_EPS)?.y)
}

fn is_singular(a: &DMatrix<f64>) -> bool {
    let d = a.nrows();
    if d == 0 {
        return false;
    }
    let max_diag = (0..d).map(|i| a[(i, i)]).fold(0.0f64, f64::max);
    if !(max_diag > 0.0) {
        return true;
    }
    match a.clone().cholesky() {
        None => true,
        Some(ch) => {
            let l = ch.l();
            let min_pivot = (0..d).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
            min_pivot / max_diag < SINGULAR_RCOND
        }
    }
}

/// `Tr (A^½ B A^½)^½`, the cross term shared by the metric and the pseudo-dot-product.
pub fn cross_root_trace(a: &DMatrix<f64>, b: &DMatrix<f64>, iters: usize) -> Result<f64> {
    check_same_dim(a, b)?;
    let ya = sqrt_psd(a, iters)?;
    let c = symmetrize(&(&ya * b * &ya));
    Ok(sqrt_psd(&c, iters)?.trace())
}

/// Squared Bures metric `Tr(A + B − 2 (A^½ B A^½)^½)`, clamped at zero.
pub fn bures_sq(a: &DMatrix<f64>, b: &DMatrix<f64>, iters: usize) -> Result<f64> {
    let cross = cross_root_trace(a, b, iters)?;
    Ok((a.trace() + b.trace() - 2.0 * cross).max(0.0))
}

fn check_pair(alpha: &EllipticalPoint, beta: &EllipticalPoint) -> Result<()> {
    if alpha.dim() != beta.dim() {
        return Err(EllError::Shape(format!(
            "points have dimensions {} and {}",
            alpha.dim(),
            beta.dim()
        )));
    }
    if (alpha.tau - beta.tau).abs() > 1e-12 * alpha.tau.max(beta.tau) {
        return Err(EllError::Family(alpha.tau, beta.tau));
    }
    Ok(())
}

/// Squared 2-Wasserstein distance between two measures of the same family.
pub fn w2_sq(alpha: &EllipticalPoint, beta: &EllipticalPoint) -> Result<f64> {
    w2_sq_iters(alpha, beta, DEFAULT_NS_ITERS)
}

pub fn w2_sq_iters(alpha: &EllipticalPoint, beta: &EllipticalPoint, iters: usize) -> Result<f64> {
    check_pair(alpha, beta)?;
    let dm = (&alpha.mean - &beta.mean).norm_squared();
    Ok(dm + alpha.tau * bures_sq(&alpha.scale(), &beta.scale(), iters)?)
}

/// Covariance `τ·A` of the measure.
pub fn variance_of(p: &EllipticalPoint) -> DMatrix<f64> {
    p.scale() * p.tau
}

/// The optimal transport map `T` with `T·A·T = B`.
pub fn transport_map(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    formula: MapFormula,
    iters: usize,
) -> Result<TransportMap> {
    check_same_dim(a, b)?;
    match formula {
        MapFormula::Primal => {
            if is_singular(a) {
                return Err(EllError::Singular("source scale A is singular".into()));
            }
            let ra = newton_schulz(a, iters, DEFAULT_NS_EPS)?;
            let c = symmetrize(&(&ra.y * b * &ra.y));
            let y2 = sqrt_psd(&c, iters)?;
            Ok(TransportMap { t: symmetrize(&(&ra.z * y2 * &ra.z)) })
        }
        MapFormula::Alternative => {
            if is_singular(a) || is_singular(b) {
                return Err(EllError::Singular(
                    "the alternative formula needs nonsingular A and B".into(),
                ));
            }
            let yb = sqrt_psd(b, iters)?;
            let c = symmetrize(&(&yb * a * &yb));
            let rc = newton_schulz(&c, iters, DEFAULT_NS_EPS)?;
            Ok(TransportMap { t: symmetrize(&(&yb * rc.z * &yb)) })
        }
    }
}

/// Roots of one scale matrix, computed once and reused across many partners.
#[derive(Clone, Debug)]
pub struct ScaleRoots {
    pub scale: DMatrix<f64>,
    pub sqrt: DMatrix<f64>,
    pub inv_sqrt: DMatrix<f64>,
}

impl ScaleRoots {
    /// One Newton-Schulz run on `A`.
    pub fn new(a: DMatrix<f64>, iters: usize) -> Result<Self> {
        check_square(&a, "A")?;
        if is_singular(&a) {
            return Err(EllError::Singular("scale matrix is singular".into()));
        }
        let r = newton_schulz(&a, iters, DEFAULT_NS_EPS)?;
        Ok(Self { scale: a, sqrt: r.y, inv_sqrt: r.z })
    }
}

/// Everything a pairwise loss needs from two scales: the root trace and both maps.
#[derive(Clone, Debug)]
pub struct CrossTerms {
    pub root_trace: f64,
    pub t_ab: DMatrix<f64>,
    pub t_ba: DMatrix<f64>,
}

/// One Newton-Schulz run on `A^½ B A^½`, giving `T^AB = Z₁Y₂Z₁` and `T^BA = Y₁Z₂Y₁`.
pub fn cross_terms(a: &ScaleRoots, b: &DMatrix<f64>, iters: usize) -> Result<CrossTerms> {
    check_same_dim(&a.scale, b)?;
    let c = symmetrize(&(&a.sqrt * b * &a.sqrt));
    let rc = newton_schulz(&c, iters, DEFAULT_NS_EPS)?;
    Ok(CrossTerms {
        root_trace: rc.y.trace(),
        t_ab: symmetrize(&(&a.inv_sqrt * &rc.y * &a.inv_sqrt)),
        t_ba: symmetrize(&(&a.sqrt * &rc.z * &a.sqrt)),
    })
}

/// Both transport maps between `A` and `B` from exactly two Newton-Schulz runs.
pub fn transport_pair(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    iters: usize,
) -> Result<(TransportMap, TransportMap)> {
    check_same_dim(a, b)?;
    if is_singular(b) {
        return Err(EllError::Singular("target scale B is singular".into()));
    }
    let ra = ScaleRoots::new(a.clone(), iters)?;
    let ct = cross_terms(&ra, b, iters)?;
    Ok((TransportMap { t: ct.t_ab }, TransportMap { t: ct.t_ba }))
}

fn blend(t: &DMatrix<f64>, s: f64) -> DMatrix<f64> {
    let d = t.nrows();
    DMatrix::<f64>::identity(d, d) * (1.0 - s) + t * s
}

/// Point at time `t` on the McCann interpolation from `alpha` to `beta`.
///
/// The returned point carries the exact interpolated scale in its factor
/// (`((1−t)I + tT)·F` with `F` a full factor of `A`) and `epsilon = 0`.
/// Times outside `[0, 1]` extrapolate; the scale stays PSD but the curve is
/// no longer a geodesic there.
pub fn geodesic_point(alpha: &EllipticalPoint, beta: &EllipticalPoint, t: f64) -> Result<EllipticalPoint> {
    check_pair(alpha, beta)?;
    let map = transport_map(&alpha.scale(), &beta.scale(), MapFormula::Primal, DEFAULT_NS_ITERS)?;
    let mean = &alpha.mean * (1.0 - t) + &beta.mean * t;
    let factor = blend(&map.t, t) * alpha.full_factor();
    EllipticalPoint::new(mean, factor, 0.0, alpha.tau)
}

/// Riemannian gradient step of `½B²(·, B)` from `A` with step `eta`.
pub fn riemannian_step(a: &DMatrix<f64>, b: &DMatrix<f64>, eta: f64) -> Result<DMatrix<f64>> {
    let map = transport_map(a, b, MapFormula::Primal, DEFAULT_NS_ITERS)?;
    let m = blend(&map.t, eta);
    Ok(symmetrize(&(&m * a * &m)))
}

/// `T^{A B}` for `A = L·Lᵀ + ε·I`, including the rank-deficient `ε = 0` case
/// where the map only exists on `Image A`.
fn factor_transport(l: &DMatrix<f64>, b: &DMatrix<f64>, eps: f64, iters: usize) -> Result<DMatrix<f64>> {
    let d = l.nrows();
    check_square(b, "B")?;
    if b.nrows() != d {
        return Err(EllError::Shape(format!("factor has {d} rows but B is {0}x{0}", b.nrows())));
    }
    let mut a = l * l.transpose();
    for i in 0..d {
        a[(i, i)] += eps;
    }
    if !is_singular(&a) {
        return Ok(transport_map(&a, b, MapFormula::Primal, iters)?.t);
    }
    if eps > 0.0 {
        return Err(EllError::Singular("regularized scale is numerically singular".into()));
    }

    let eig = SymmetricEigen::new(a);
    let top = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let cutoff = top * 1e-10 * d as f64;
    let b_scale = b.amax().max(1.0);
    let mut half = DMatrix::zeros(d, d);
    let mut half_pinv = DMatrix::zeros(d, d);
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        let u = eig.eigenvectors.column(i);
        if lambda > cutoff && lambda > 0.0 {
            let r = lambda.sqrt();
            half += u * u.transpose() * r;
            half_pinv += u * u.transpose() / r;
        } else if (b * u).norm() > 1e-8 * b_scale {
            return Err(EllError::NonDifferentiable(
                "Image(B) is not contained in Image(A) and epsilon is zero".into(),
            ));
        }
    }
    let c = symmetrize(&(&half * b * &half));
    let y2 = sqrt_psd(&c, iters)?;
    Ok(symmetrize(&(&half_pinv * y2 * &half_pinv)))
}

/// `∇_L ½B²(L·Lᵀ + ε·I, B) = (I − T)·L`.
pub fn grad_bures_factor(l: &DMatrix<f64>, b: &DMatrix<f64>, eps: f64, iters: usize) -> Result<DMatrix<f64>> {
    let t = factor_transport(l, b, eps, iters)?;
    Ok(l - t * l)
}

/// `∇_L` of `τ·Tr(A^½ B A^½)^½` with `A = L·Lᵀ + ε·I`, which is `τ·T·L`.
pub fn grad_polarization_factor(
    l: &DMatrix<f64>,
    b: &DMatrix<f64>,
    eps: f64,
    tau: f64,
    iters: usize,
) -> Result<DMatrix<f64>> {
    let t = factor_transport(l, b, eps, iters)?;
    Ok(t * l * tau)
}

/// Wasserstein-Bures pseudo-dot-product `⟨a,b⟩ + τ·Tr(A^½ B A^½)^½`.
pub fn polarization(alpha: &EllipticalPoint, beta: &EllipticalPoint) -> Result<f64> {
    polarization_iters(alpha, beta, DEFAULT_NS_ITERS)
}

pub fn polarization_iters(alpha: &EllipticalPoint, beta: &EllipticalPoint, iters: usize) -> Result<f64> {
    check_pair(alpha, beta)?;
    let dot = alpha.mean.dot(&beta.mean);
    Ok(dot + alpha.tau * cross_root_trace(&alpha.scale(), &beta.scale(), iters)?)
}

/// Sum of the Euclidean cosine of the means and `ρ` times the trace-normalized
/// cross term (which lies in `[0, 1]`).
pub fn cosine_mixture(alpha: &EllipticalPoint, beta: &EllipticalPoint, rho: f64) -> Result<f64> {
    check_pair(alpha, beta)?;
    let na = alpha.mean.norm();
    let nb = beta.mean.norm();
    if na == 0.0 || nb == 0.0 {
        return Err(EllError::DegenerateSimilarity("zero mean vector".into()));
    }
    let (a, b) = (alpha.scale(), beta.scale());
    let (ta, tb) = (a.trace(), b.trace());
    if !(ta > 0.0) || !(tb > 0.0) {
        return Err(EllError::DegenerateSimilarity("zero-trace scale".into()));
    }
    let cross = cross_root_trace(&a, &b, DEFAULT_NS_ITERS)?;
    Ok(alpha.mean.dot(&beta.mean) / (na * nb) + rho * cross / (ta * tb).sqrt())
}

/// Pseudo-dot-product normalized jointly over means and scales.
pub fn bures_cosine(alpha: &EllipticalPoint, beta: &EllipticalPoint, rho: f64) -> Result<f64> {
    check_pair(alpha, beta)?;
    let (a, b) = (alpha.scale(), beta.scale());
    let left = alpha.mean.norm_squared() + rho * a.trace();
    let right = beta.mean.norm_squared() + rho * b.trace();
    if !(left > 0.0) || !(right > 0.0) {
        return Err(EllError::DegenerateSimilarity("both mean and scale are zero".into()));
    }
    let cross = cross_root_trace(&a, &b, DEFAULT_NS_ITERS)?;
    Ok((alpha.mean.dot(&beta.mean) + rho * cross) / (left.sqrt() * right.sqrt()))
}

/// Squared Hellinger distance between two nonnegative diagonals.
pub fn hellinger_sq(da: &[f64], db: &[f64]) -> Result<f64> {
    if da.len() != db.len() {
        return Err(EllError::Shape(format!("diagonals have lengths {} and {}", da.len(), db.len())));
    }
    if let Some(v) = da.iter().chain(db).find(|v| !(**v >= 0.0)) {
        return Err(EllError::Domain(format!("negative diagonal entry {v}")));
    }
    Ok(da.iter().zip(db).map(|(x, y)| (x.sqrt() - y.sqrt()).powi(2)).sum())
}
