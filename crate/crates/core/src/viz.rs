//! 2-D ellipse views of elliptical measures and SVG export.

use std::f64::consts::PI;
use std::fmt::Write;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};

use crate::bures::EllipticalPoint;
use crate::error::{EllError, Result};

pub const POWER_TOL: f64 = 1e-9;
pub const POWER_MAX_ITER: usize = 10_000;

/// Two leading eigenvectors of a PSD matrix by power iteration with deflation.
///
/// With a repeated leading eigenvalue any orthonormal basis of the invariant
/// subspace is acceptable; convergence is measured by the residual
/// `‖C v − (vᵀCv) v‖`.
pub fn top2_eigvecs(c: &DMatrix<f64>, tol: f64, max_iter: usize) -> Result<DMatrix<f64>> {
    let d = c.nrows();
    if c.ncols() != d || d < 2 {
        return Err(EllError::Shape(format!("need a square matrix of size >= 2, got {}x{}", d, c.ncols())));
    }
    if c.iter().any(|v| !v.is_finite()) {
        return Err(EllError::NonFinite("matrix to project".into()));
    }
    let c = (c + c.transpose()) * 0.5;
    let scale = c.amax();
    if scale == 0.0 {
        return Err(EllError::DegeneratePlane("zero matrix".into()));
    }
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(2);
    for _ in 0..2 {
        let mut v = start_vector(d, &basis);
        let mut converged = false;
        for _ in 0..max_iter {
            let mut w = &c * &v;
            orthogonalize(&mut w, &basis);
            let lambda = v.dot(&w);
            let resid = (&w - &v * lambda).norm();
            if resid <= tol * scale {
                converged = true;
                break;
            }
            let n = w.norm();
            if n <= tol * scale {
                break;
            }
            v = w / n;
        }
        let lambda = v.dot(&(&c * &v));
        if lambda <= tol * scale {
            return Err(EllError::DegeneratePlane(format!("matrix has fewer than 2 positive eigenvalues (found {})", basis.len())));
        }
        if !converged {
            return Err(EllError::NoConvergence(max_iter));
        }
        basis.push(v);
    }
    Ok(DMatrix::from_columns(&basis))
}

/// Deterministic unit start vector orthogonal to `basis`. A generic vector is
/// tried first; if deflation nearly annihilates it, the coordinate axis with
/// the largest remaining component is used.
fn start_vector(d: usize, basis: &[DVector<f64>]) -> DVector<f64> {
    let mut v = DVector::from_fn(d, |i, _| 1.0 + (i as f64 + 1.0).sqrt() * 0.1);
    v.normalize_mut();
    orthogonalize(&mut v, basis);
    if v.norm() < 0.1 {
        v = (0..d)
            .map(|i| {
                let mut e = DVector::zeros(d);
                e[i] = 1.0;
                orthogonalize(&mut e, basis);
                e
            })
            .max_by(|a, b| a.norm().total_cmp(&b.norm()))
            .expect("d >= 2");
    }
    v.normalize_mut();
    v
}

fn orthogonalize(v: &mut DVector<f64>, basis: &[DVector<f64>]) {
    for _ in 0..2 {
        for b in basis {
            let p = b.dot(v);
            v.axpy(-p, b, 1.0);
        }
    }
}

/// Mean and scale of a point restricted to the plane spanned by `basis` (d×2, orthonormal).
pub fn project(point: &EllipticalPoint, basis: &DMatrix<f64>) -> Result<(Vector2<f64>, Matrix2<f64>)> {
    if basis.nrows() != point.dim() || basis.ncols() != 2 {
        return Err(EllError::Shape(format!("basis is {}x{}, expected {}x2", basis.nrows(), basis.ncols(), point.dim())));
    }
    let gram = basis.transpose() * basis;
    if (gram - DMatrix::identity(2, 2)).amax() > 1e-8 {
        return Err(EllError::Shape("projection basis is not orthonormal".into()));
    }
    let m = basis.transpose() * &point.mean;
    let s = basis.transpose() * point.scale() * basis;
    let s = Matrix2::new(s[(0, 0)], 0.5 * (s[(0, 1)] + s[(1, 0)]), 0.5 * (s[(0, 1)] + s[(1, 0)]), s[(1, 1)]);
    Ok((Vector2::new(m[0], m[1]), s))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EllipseMode {
    /// The image of the unit circle under the scale matrix.
    Covariance,
    /// Same axes with inverted eigenvalues.
    Precision,
}

impl std::str::FromStr for EllipseMode {
    type Err = EllError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "covariance" => Ok(Self::Covariance),
            "precision" => Ok(Self::Precision),
            other => Err(EllError::Data(format!("unknown ellipse mode `{other}`"))),
        }
    }
}

/// Whether semi-axes are the eigenvalues themselves or their square roots.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RadiusConvention {
    #[default]
    Eigenvalue,
    Sqrt,
}

impl std::str::FromStr for RadiusConvention {
    type Err = EllError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eigenvalue" => Ok(Self::Eigenvalue),
            "sqrt" => Ok(Self::Sqrt),
            other => Err(EllError::Data(format!("unknown radius convention `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    /// Major semi-axis.
    pub r1: f64,
    pub r2: f64,
    /// Angle of the major axis in radians, in `[0, π)`.
    pub angle: f64,
}

/// Closed-form eigendecomposition of a symmetric 2×2 matrix: eigenvalues in
/// decreasing order and the angle of the leading eigenvector in `[0, π)`.
fn sym2_eigen(s: &Matrix2<f64>) -> (f64, f64, f64) {
    let (a, b, c) = (s[(0, 0)], 0.5 * (s[(0, 1)] + s[(1, 0)]), s[(1, 1)]);
    let mid = 0.5 * (a + c);
    let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let angle = 0.5 * (2.0 * b).atan2(a - c);
    (mid + rad, mid - rad, wrap_angle(angle))
}

fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(PI);
    if w >= PI - 1e-15 {
        0.0
    } else {
        w
    }
}

pub fn ellipse_params(scale2: &Matrix2<f64>, mode: EllipseMode, radii: RadiusConvention) -> Result<Ellipse> {
    if scale2.iter().any(|v| !v.is_finite()) {
        return Err(EllError::NonFinite("2x2 scale".into()));
    }
    let (l1, l2, angle) = sym2_eigen(scale2);
    let tol = 1e-12 * l1.abs().max(1.0);
    if l2 < -tol {
        return Err(EllError::Domain(format!("scale is not PSD (eigenvalue {l2:e})")));
    }
    let l2 = l2.max(0.0);
    let shape = |x: f64| match radii {
        RadiusConvention::Eigenvalue => x,
        RadiusConvention::Sqrt => x.sqrt(),
    };
    match mode {
        EllipseMode::Covariance => Ok(Ellipse { r1: shape(l1), r2: shape(l2), angle }),
        EllipseMode::Precision => {
            if l2 <= tol {
                return Err(EllError::Singular("precision view of a singular scale".into()));
            }
            // the smallest eigenvalue becomes the major axis
            Ok(Ellipse { r1: shape(1.0 / l2), r2: shape(1.0 / l1), angle: wrap_angle(angle + PI / 2.0) })
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SvgItem {
    pub label: String,
    pub center: Vector2<f64>,
    pub ellipse: Ellipse,
    /// CSS color used for the outline and fill.
    pub color: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Canvas {
    pub width: f64,
    pub height: f64,
    /// Data-space window `[xmin, xmax] × [ymin, ymax]`; `None` fits the items.
    pub window: Option<[f64; 4]>,
    pub margin: f64,
}

impl Default for Canvas {
    fn default() -> Self {
        Self { width: 800.0, height: 800.0, window: None, margin: 0.05 }
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

fn fit_window(items: &[SvgItem]) -> [f64; 4] {
    if items.is_empty() {
        return [-1.0, 1.0, -1.0, 1.0];
    }
    let mut w = [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY];
    for it in items {
        let r = it.ellipse.r1;
        w[0] = w[0].min(it.center.x - r);
        w[1] = w[1].max(it.center.x + r);
        w[2] = w[2].min(it.center.y - r);
        w[3] = w[3].max(it.center.y + r);
    }
    // keep a square aspect ratio so that circles stay circles
    let cx = 0.5 * (w[0] + w[1]);
    let cy = 0.5 * (w[2] + w[3]);
    let half = 0.5 * (w[1] - w[0]).max(w[3] - w[2]).max(1e-9);
    [cx - half, cx + half, cy - half, cy + half]
}

/// SVG 1.1 document with one rotated `<ellipse>` and one `<text>` per item.
/// The y axis points up in data space.
pub fn render_svg(items: &[SvgItem], canvas: &Canvas) -> Result<String> {
    for it in items {
        let vals = [it.center.x, it.center.y, it.ellipse.r1, it.ellipse.r2, it.ellipse.angle];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(EllError::NonFinite(format!("ellipse for `{}`", it.label)));
        }
    }
    let [x0, x1, y0, y1] = canvas.window.unwrap_or_else(|| fit_window(items));
    let inner_w = canvas.width * (1.0 - 2.0 * canvas.margin);
    let inner_h = canvas.height * (1.0 - 2.0 * canvas.margin);
    let sx = inner_w / (x1 - x0);
    let sy = inner_h / (y1 - y0);
    let s = sx.min(sy);
    let (ox, oy) = (canvas.width * canvas.margin, canvas.height * canvas.margin);
    let px = |x: f64| ox + (x - x0) * s;
    let py = |y: f64| oy + (y1 - y) * s;

    let mut out = String::new();
    let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        w = canvas.width,
        h = canvas.height
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for it in items {
        let (cx, cy) = (px(it.center.x), py(it.center.y));
        // y flips, so a counter-clockwise data angle is a negative SVG rotation
        let deg = -it.ellipse.angle.to_degrees();
        let color = escape(&it.color);
        let _ = writeln!(
            out,
            r#"<ellipse cx="{cx:.3}" cy="{cy:.3}" rx="{:.3}" ry="{:.3}" transform="rotate({deg:.4} {cx:.3} {cy:.3})" fill="{color}" fill-opacity="0.25" stroke="{color}" stroke-width="1.5"/>"#,
            it.ellipse.r1 * s,
            it.ellipse.r2 * s,
        );
        let _ = writeln!(
            out,
            r#"<text x="{cx:.3}" y="{cy:.3}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
            escape(&it.label)
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// A fixed palette cycled over items.
pub fn palette(i: usize) -> &'static str {
    const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];
    COLORS[i % COLORS.len()]
}
