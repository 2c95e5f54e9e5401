//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use ellembed::hypernym::RelationGraph;
use ellembed::sampling::{normal_vector, random_factor};
use ellembed::EllipticalPoint;
use nalgebra::DMatrix;
use rand::Rng;

pub fn data_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("data").join(name)
}

pub fn read_data(name: &str) -> String {
    std::fs::read_to_string(data_path(name)).expect("bundled test data")
}

/// A rooted tree with the given branching per level (root excluded), e.g.
/// `[4, 4, 5]` gives 1 + 4 + 16 + 80 nodes.
pub fn tree_edges(branching: &[usize]) -> Vec<(String, String)> {
    let mut edges = Vec::new();
    let mut level = vec!["root".to_string()];
    for (depth, &b) in branching.iter().enumerate() {
        let mut next = Vec::new();
        for parent in &level {
            for _ in 0..b {
                let child = format!("n{}_{}", depth + 1, next.len());
                edges.push((child.clone(), parent.clone()));
                next.push(child);
            }
        }
        level = next;
    }
    edges
}

pub fn tree_graph(branching: &[usize]) -> RelationGraph {
    RelationGraph::from_edges(&tree_edges(branching), true).expect("tree is acyclic")
}

/// Random Gaussian point with a well-conditioned full-rank factor.
pub fn random_point<R: Rng>(rng: &mut R, d: usize, epsilon: f64) -> EllipticalPoint {
    EllipticalPoint::gaussian(normal_vector(rng, d, 1.0), random_factor(rng, d, d, 10.0), epsilon).unwrap()
}

/// Flattened view of the parameters of a list of points: means then factors.
pub fn param_count(points: &[EllipticalPoint]) -> usize {
    points.iter().map(|p| p.dim() + p.factor.len()).sum()
}

pub fn param_mut(points: &mut [EllipticalPoint], mut idx: usize) -> &mut f64 {
    for p in points.iter_mut() {
        let n = p.dim() + p.factor.len();
        if idx < n {
            let d = p.dim();
            return if idx < d { &mut p.mean[idx] } else { &mut p.factor.as_mut_slice()[idx - d] };
        }
        idx -= n;
    }
    panic!("parameter index out of range")
}

/// Central finite-difference gradient of `f` over every parameter of `points`.
pub fn fd_gradient<F: Fn(&[EllipticalPoint]) -> f64>(points: &[EllipticalPoint], h: f64, f: F) -> Vec<f64> {
    let mut work = points.to_vec();
    (0..param_count(points))
        .map(|i| {
            let x = *param_mut(&mut work, i);
            *param_mut(&mut work, i) = x + h;
            let up = f(&work);
            *param_mut(&mut work, i) = x - h;
            let down = f(&work);
            *param_mut(&mut work, i) = x;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn flatten(grads: &[&ellembed::GradientPair]) -> Vec<f64> {
    let mut out = Vec::new();
    for g in grads {
        out.extend(g.d_mean.iter());
        out.extend(g.d_factor.iter());
    }
    out
}

/// `‖a − b‖ / max(‖b‖, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(floor)
}

pub fn rel_err_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}
