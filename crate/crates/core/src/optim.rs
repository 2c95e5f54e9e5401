//! First-order optimizers over collections of elliptical points, plus the
//! assembly of pairwise losses (value and gradient for both arguments) from
//! one shared set of matrix roots.

use nalgebra::{DMatrix, DVector};

use crate::bures::{cross_terms, CrossTerms, EllipticalPoint, GradientPair, ScaleRoots};
use crate::error::{EllError, Result};

pub const ADAGRAD_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adagrad,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = EllError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adagrad" => Ok(OptimizerKind::Adagrad),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(EllError::Data(format!("unknown optimizer `{other}`"))),
        }
    }
}

fn check_update(point: &EllipticalPoint, grad: &GradientPair, idx: usize) -> Result<()> {
    if grad.d_mean.len() != point.dim()
        || grad.d_factor.nrows() != point.factor.nrows()
        || grad.d_factor.ncols() != point.factor.ncols()
    {
        return Err(EllError::Shape(format!(
            "gradient for parameter block {idx} does not match its point ({}x{})",
            point.dim(),
            point.rank()
        )));
    }
    if !grad.is_finite() {
        return Err(EllError::NonFinite(format!("gradient for parameter block {idx}")));
    }
    Ok(())
}

fn check_all(params: &[EllipticalPoint], grads: &[GradientPair]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(EllError::Shape(format!("{} parameter blocks but {} gradients", params.len(), grads.len())));
    }
    params.iter().zip(grads).enumerate().try_for_each(|(i, (p, g))| check_update(p, g, i))
}

/// Diagonal Adagrad with one accumulator per parameter entry.
#[derive(Clone, Debug)]
pub struct AdagradState {
    pub accum_mean: Vec<DVector<f64>>,
    pub accum_factor: Vec<DMatrix<f64>>,
    pub lr: f64,
    pub eps: f64,
}

impl AdagradState {
    pub fn new(params: &[EllipticalPoint], lr: f64, eps: f64) -> Self {
        Self {
            accum_mean: params.iter().map(|p| DVector::zeros(p.dim())).collect(),
            accum_factor: params.iter().map(|p| DMatrix::zeros(p.dim(), p.rank())).collect(),
            lr,
            eps,
        }
    }

    /// Update every block. Nothing is modified if any gradient is malformed.
    pub fn step(&mut self, params: &mut [EllipticalPoint], grads: &[GradientPair]) -> Result<()> {
        check_all(params, grads)?;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            self.apply(i, p, g);
        }
        Ok(())
    }

    /// Update the single block `idx`.
    pub fn step_one(&mut self, idx: usize, point: &mut EllipticalPoint, grad: &GradientPair) -> Result<()> {
        check_update(point, grad, idx)?;
        if self.accum_mean[idx].len() != point.dim() || self.accum_factor[idx].shape() != point.factor.shape() {
            return Err(EllError::Shape(format!("accumulator {idx} does not match its point")));
        }
        self.apply(idx, point, grad);
        Ok(())
    }

    fn apply(&mut self, idx: usize, point: &mut EllipticalPoint, grad: &GradientPair) {
        let (lr, eps) = (self.lr, self.eps);
        for ((p, acc), g) in point.mean.iter_mut().zip(self.accum_mean[idx].iter_mut()).zip(grad.d_mean.iter()) {
            *acc += g * g;
            *p -= lr * g / (*acc + eps).sqrt();
        }
        for ((p, acc), g) in point.factor.iter_mut().zip(self.accum_factor[idx].iter_mut()).zip(grad.d_factor.iter()) {
            *acc += g * g;
            *p -= lr * g / (*acc + eps).sqrt();
        }
    }
}

/// Plain gradient descent.
#[derive(Clone, Copy, Debug)]
pub struct SgdState {
    pub lr: f64,
}

impl SgdState {
    pub fn new(lr: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(EllError::Domain(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Self { lr })
    }

    pub fn step(&self, params: &mut [EllipticalPoint], grads: &[GradientPair]) -> Result<()> {
        check_all(params, grads)?;
        for (p, g) in params.iter_mut().zip(grads) {
            self.apply(p, g);
        }
        Ok(())
    }

    pub fn step_one(&self, idx: usize, point: &mut EllipticalPoint, grad: &GradientPair) -> Result<()> {
        check_update(point, grad, idx)?;
        self.apply(point, grad);
        Ok(())
    }

    fn apply(&self, point: &mut EllipticalPoint, grad: &GradientPair) {
        point.mean.axpy(-self.lr, &grad.d_mean, 1.0);
        point.factor -= &grad.d_factor * self.lr;
    }
}

/// Either optimizer behind one interface, as chosen by a task config.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Adagrad(AdagradState),
    Sgd(SgdState),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &[EllipticalPoint], lr: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(EllError::Domain(format!("learning rate must be positive, got {lr}")));
        }
        Ok(match kind {
            OptimizerKind::Adagrad => Optimizer::Adagrad(AdagradState::new(params, lr, ADAGRAD_EPS)),
            OptimizerKind::Sgd => Optimizer::Sgd(SgdState::new(lr)?),
        })
    }

    pub fn step(&mut self, params: &mut [EllipticalPoint], grads: &[GradientPair]) -> Result<()> {
        match self {
            Optimizer::Adagrad(s) => s.step(params, grads),
            Optimizer::Sgd(s) => s.step(params, grads),
        }
    }

    pub fn step_one(&mut self, idx: usize, point: &mut EllipticalPoint, grad: &GradientPair) -> Result<()> {
        match self {
            Optimizer::Adagrad(s) => s.step_one(idx, point, grad),
            Optimizer::Sgd(s) => s.step_one(idx, point, grad),
        }
    }
}

/// A point together with the roots of its scale, so that one Newton-Schulz run
/// per point can be shared by all pairs the point takes part in. `roots` is
/// `None` for an exact Dirac (zero scale).
#[derive(Clone, Debug)]
pub struct PreparedPoint<'a> {
    pub point: &'a EllipticalPoint,
    pub roots: Option<ScaleRoots>,
}

impl<'a> PreparedPoint<'a> {
    pub fn new(point: &'a EllipticalPoint, iters: usize) -> Result<Self> {
        let scale = point.scale();
        let roots = if scale.iter().all(|v| *v == 0.0) { None } else { Some(ScaleRoots::new(scale, iters)?) };
        Ok(Self { point, roots })
    }
}

/// Value and gradients of a pairwise loss with respect to both arguments.
#[derive(Clone, Debug)]
pub struct PairGrad {
    pub value: f64,
    pub left: GradientPair,
    pub right: GradientPair,
}

fn check_family(a: &EllipticalPoint, b: &EllipticalPoint) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(EllError::Shape(format!("points have dimensions {} and {}", a.dim(), b.dim())));
    }
    if (a.tau - b.tau).abs() > 1e-12 * a.tau.max(b.tau) {
        return Err(EllError::Family(a.tau, b.tau));
    }
    Ok(())
}

fn zero_scale(p: &EllipticalPoint) -> bool {
    p.epsilon == 0.0 && p.factor.iter().all(|v| *v == 0.0)
}

fn dirac_factor_check(p: &EllipticalPoint) -> Result<()> {
    if p.rank() > 0 {
        return Err(EllError::NonDifferentiable("scale gradient at a zero factor with epsilon = 0".into()));
    }
    Ok(())
}

/// Root trace and both maps, or `None` when either scale is exactly zero.
fn pair_terms(alpha: &PreparedPoint, beta: &EllipticalPoint, iters: usize) -> Result<Option<CrossTerms>> {
    match &alpha.roots {
        Some(roots) if !zero_scale(beta) => Ok(Some(cross_terms(roots, &beta.scale(), iters)?)),
        _ => Ok(None),
    }
}

/// `W₂²(α, β)` with gradients `2(a − b)` on the means and `2τ(I − T)L` on the factors.
pub fn w2_sq_with_grads(alpha: &PreparedPoint, beta: &EllipticalPoint, iters: usize) -> Result<PairGrad> {
    let a = alpha.point;
    check_family(a, beta)?;
    let diff = &a.mean - &beta.mean;
    let tau = a.tau;
    let (bures, left_factor, right_factor) = match pair_terms(alpha, beta, iters)? {
        Some(ct) => {
            let tr_a = alpha.roots.as_ref().map_or(0.0, |r| r.scale.trace());
            let bures = (tr_a + beta.scale().trace() - 2.0 * ct.root_trace).max(0.0);
            let lf = (&a.factor - &ct.t_ab * &a.factor) * (2.0 * tau);
            let rf = (&beta.factor - &ct.t_ba * &beta.factor) * (2.0 * tau);
            (bures, lf, rf)
        }
        None => {
            // B²(0, B) = Tr B, whose factor gradient is 2L.
            let (za, zb) = (alpha.roots.is_none(), zero_scale(beta));
            if za {
                dirac_factor_check(a)?;
            }
            if zb {
                dirac_factor_check(beta)?;
            }
            let bures = if za { 0.0 } else { a.scale().trace() } + if zb { 0.0 } else { beta.scale().trace() };
            (bures, &a.factor * (2.0 * tau), &beta.factor * (2.0 * tau))
        }
    };
    let left = GradientPair { d_mean: &diff * 2.0, d_factor: left_factor };
    let right = GradientPair { d_mean: &diff * -2.0, d_factor: right_factor };
    Ok(PairGrad { value: diff.norm_squared() + tau * bures, left, right })
}

/// `[α : β] = ⟨a, b⟩ + τ·Tr(A^½ B A^½)^½` with gradients `b`, `τ·T^{AB}·L_a` for
/// the left argument and `a`, `τ·T^{BA}·L_b` for the right one.
pub fn polarization_with_grads(alpha: &PreparedPoint, beta: &EllipticalPoint, iters: usize) -> Result<PairGrad> {
    let a = alpha.point;
    check_family(a, beta)?;
    let tau = a.tau;
    let (trace, lf, rf) = match pair_terms(alpha, beta, iters)? {
        Some(ct) => (ct.root_trace, &ct.t_ab * &a.factor * tau, &ct.t_ba * &beta.factor * tau),
        None => (0.0, a.factor.map(|_| 0.0), beta.factor.map(|_| 0.0)),
    };
    let left = GradientPair { d_mean: beta.mean.clone(), d_factor: lf };
    let right = GradientPair { d_mean: a.mean.clone(), d_factor: rf };
    Ok(PairGrad { value: a.mean.dot(&beta.mean) + tau * trace, left, right })
}
