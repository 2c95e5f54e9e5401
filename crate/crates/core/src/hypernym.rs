//! Hypernymy graph embedding: softmax loss over the pseudo-dot-product,
//! SGD training with a single embedding set, and link reconstruction metrics.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bures::{polarization_iters, EllipticalPoint, GradientPair, DEFAULT_EPSILON, DEFAULT_NS_ITERS, TRAINING_NS_ITERS};
use crate::error::{EllError, Result};
use crate::optim::{polarization_with_grads, PreparedPoint, SgdState};
use crate::sampling::{normal_matrix, normal_vector};
use crate::store::{Collection, EmbeddingStore};

/// Parse `child<TAB>hypernym` lines; blank lines and `#` comments are skipped.
pub fn parse_edges(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let mut parts = line.split('\t');
        let (child, parent) = match (parts.next(), parts.next(), parts.next()) {
            (Some(c), Some(p), None) => (c.trim(), p.trim()),
            _ => return Err(EllError::Format { line: i + 1, msg: "expected `child<TAB>hypernym`".into() }),
        };
        if child.is_empty() || parent.is_empty() || child.contains(char::is_whitespace) || parent.contains(char::is_whitespace)
        {
            return Err(EllError::Format { line: i + 1, msg: "node names must be nonempty and contain no whitespace".into() });
        }
        out.push((child.to_string(), parent.to_string()));
    }
    Ok(out)
}

/// Reachability closure of a directed graph on `n` nodes, including every
/// self-loop. Fails on a cycle through two or more nodes.
pub fn transitive_closure(n: usize, edges: &[(usize, usize)]) -> Result<Vec<(usize, usize)>> {
    let mut adj = vec![BTreeSet::new(); n];
    for &(u, v) in edges {
        if u >= n || v >= n {
            return Err(EllError::Graph(format!("edge ({u}, {v}) outside {n} nodes")));
        }
        if u != v {
            adj[u].insert(v);
        }
    }
    // iterative DFS post-order; gray nodes on the stack reveal cycles
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        White,
        Gray,
        Black,
    }
    let mut mark = vec![Mark::White; n];
    let mut reach: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for root in 0..n {
        if mark[root] != Mark::White {
            continue;
        }
        let mut stack: Vec<(usize, Vec<usize>)> = vec![(root, adj[root].iter().copied().collect())];
        mark[root] = Mark::Gray;
        while let Some((u, pending)) = stack.last_mut() {
            let u = *u;
            match pending.pop() {
                Some(v) => match mark[v] {
                    Mark::Gray => return Err(EllError::Graph(format!("cycle through nodes {u} and {v}"))),
                    Mark::White => {
                        mark[v] = Mark::Gray;
                        stack.push((v, adj[v].iter().copied().collect()));
                    }
                    Mark::Black => {}
                },
                None => {
                    let mut r = BTreeSet::from([u]);
                    for &v in &adj[u] {
                        r.extend(reach[v].iter().copied());
                    }
                    reach[u] = r;
                    mark[u] = Mark::Black;
                    stack.pop();
                }
            }
        }
    }
    Ok(reach.into_iter().enumerate().flat_map(|(u, r)| r.into_iter().map(move |v| (u, v))).collect())
}

/// Positive pairs `(u, v)` meaning "v is a hypernym of u", always containing
/// `(u, u)` for every node.
#[derive(Clone, Debug)]
pub struct RelationGraph {
    names: Vec<String>,
    index: HashMap<String, usize>,
    pairs: Vec<(usize, usize)>,
    positives: Vec<BTreeSet<usize>>,
    pub closed: bool,
}

impl RelationGraph {
    pub fn from_edges(edges: &[(String, String)], closure: bool) -> Result<Self> {
        let mut names = Vec::new();
        let mut index = HashMap::new();
        let mut id = |s: &str| -> usize {
            if let Some(&i) = index.get(s) {
                return i;
            }
            names.push(s.to_string());
            index.insert(s.to_string(), names.len() - 1);
            names.len() - 1
        };
        let ids: Vec<(usize, usize)> = edges.iter().map(|(c, p)| (id(c), id(p))).collect();
        if names.is_empty() {
            return Err(EllError::Graph("empty relation set".into()));
        }
        let n = names.len();
        let pairs: Vec<(usize, usize)> = if closure {
            transitive_closure(n, &ids)?
        } else {
            let mut set: BTreeSet<(usize, usize)> = ids.into_iter().collect();
            set.extend((0..n).map(|u| (u, u)));
            set.into_iter().collect()
        };
        let mut positives = vec![BTreeSet::new(); n];
        for &(u, v) in &pairs {
            positives[u].insert(v);
        }
        Ok(Self { names, index, pairs, positives, closed: closure })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// All positive pairs in lexicographic order, self-loops included.
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn positives(&self, u: usize) -> &BTreeSet<usize> {
        &self.positives[u]
    }

    pub fn is_positive(&self, u: usize, v: usize) -> bool {
        self.positives[u].contains(&v)
    }
}

#[derive(Clone, Debug)]
pub struct SoftmaxOutput {
    pub loss: f64,
    pub grad_u: GradientPair,
    pub grad_v: GradientPair,
    pub grad_negatives: Vec<GradientPair>,
}

/// Negative log-softmax of `[u : v]` against `[u : v'ᵢ]`.
pub fn softmax_loss(u: &EllipticalPoint, v: &EllipticalPoint, negatives: &[&EllipticalPoint], iters: usize) -> Result<SoftmaxOutput> {
    let pu = PreparedPoint::new(u, iters)?;
    softmax_prepared(&pu, v, negatives, iters)
}

fn softmax_prepared(pu: &PreparedPoint, v: &EllipticalPoint, negatives: &[&EllipticalPoint], iters: usize) -> Result<SoftmaxOutput> {
    if negatives.is_empty() {
        return Err(EllError::Data("softmax loss needs at least one negative".into()));
    }
    let terms = std::iter::once(v)
        .chain(negatives.iter().copied())
        .map(|x| polarization_with_grads(pu, x, iters))
        .collect::<Result<Vec<_>>>()?;
    let shift = terms.iter().map(|t| t.value).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = terms.iter().map(|t| (t.value - shift).exp()).collect();
    let z: f64 = weights.iter().sum();
    let loss = shift + z.ln() - terms[0].value;

    // d loss / d s_j = p_j − [j = 0]
    let mut grad_u = GradientPair::zeros_like(pu.point);
    let mut grads = Vec::with_capacity(terms.len());
    for (j, (t, w)) in terms.into_iter().zip(&weights).enumerate() {
        let coef = w / z - if j == 0 { 1.0 } else { 0.0 };
        grad_u.add_scaled(&t.left, coef);
        grads.push(t.right.scaled(coef));
    }
    let grad_v = grads.remove(0);
    Ok(SoftmaxOutput { loss: loss.max(0.0), grad_u, grad_v, grad_negatives: grads })
}

/// Learning rate used when none is given: 0.02 in dimensions 3 and 4, else 0.01.
pub fn default_hypernym_lr(dim: usize) -> f64 {
    if dim == 3 || dim == 4 {
        0.02
    } else {
        0.01
    }
}

#[derive(Clone, Debug)]
pub struct HypernymConfig {
    pub dim: usize,
    pub rank: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub negatives: usize,
    pub lr: Option<f64>,
    pub ns_iters: usize,
    pub epsilon: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for HypernymConfig {
    fn default() -> Self {
        Self {
            dim: 5,
            rank: None,
            epochs: 200,
            batch_size: 1000,
            negatives: 50,
            lr: None,
            ns_iters: TRAINING_NS_ITERS,
            epsilon: DEFAULT_EPSILON,
            init_std: 0.1,
            seed: 0,
        }
    }
}

impl HypernymConfig {
    pub fn learning_rate(&self) -> f64 {
        self.lr.unwrap_or_else(|| default_hypernym_lr(self.dim))
    }
}

#[derive(Clone, Debug)]
pub struct HypernymFit {
    pub store: EmbeddingStore,
    /// Mean softmax loss over the relations trained in each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Sample `k` nodes uniformly (with replacement) among those that are not positives of `u`.
fn sample_negatives(rng: &mut ChaCha8Rng, graph: &RelationGraph, u: usize, k: usize) -> Option<Vec<usize>> {
    let n = graph.len();
    if graph.positives(u).len() >= n {
        return None;
    }
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let x = rng.random_range(0..n);
        if !graph.is_positive(u, x) {
            out.push(x);
        }
    }
    Some(out)
}

pub fn train_hypernym(graph: &RelationGraph, cfg: &HypernymConfig) -> Result<HypernymFit> {
    if graph.pairs().is_empty() {
        return Err(EllError::Graph("empty relation set".into()));
    }
    if cfg.dim == 0 || cfg.batch_size == 0 || cfg.negatives == 0 || cfg.ns_iters == 0 || cfg.rank == Some(0) {
        return Err(EllError::Domain("dim, rank, batch size, negatives and ns iterations must be positive".into()));
    }
    let sgd = SgdState::new(cfg.learning_rate())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.rank.unwrap_or(cfg.dim);
    let mut points = (0..graph.len())
        .map(|_| {
            let mean = normal_vector(&mut rng, cfg.dim, cfg.init_std);
            let factor = normal_matrix(&mut rng, cfg.dim, k, cfg.init_std);
            EllipticalPoint::gaussian(mean, factor, cfg.epsilon)
        })
        .collect::<Result<Vec<_>>>()?;

    let trainable: Vec<(usize, usize)> =
        graph.pairs().iter().copied().filter(|&(u, _)| graph.positives(u).len() < graph.len()).collect();
    if trainable.len() < graph.pairs().len() {
        warn!("{} relations have no admissible negative and are skipped", graph.pairs().len() - trainable.len());
    }

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order = trainable.clone();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let jobs: Vec<(usize, usize, Vec<usize>)> = batch
                .iter()
                .filter_map(|&(u, v)| sample_negatives(&mut rng, graph, u, cfg.negatives).map(|n| (u, v, n)))
                .collect();
            let outputs = jobs
                .par_iter()
                .map(|(u, v, negs)| {
                    let pu = PreparedPoint::new(&points[*u], cfg.ns_iters)?;
                    let negs: Vec<&EllipticalPoint> = negs.iter().map(|&n| &points[n]).collect();
                    softmax_prepared(&pu, &points[*v], &negs, cfg.ns_iters)
                })
                .collect::<Vec<_>>();
            let mut grads: BTreeMap<usize, GradientPair> = BTreeMap::new();
            for ((u, v, negs), out) in jobs.iter().zip(outputs) {
                let name = |i: usize| graph.names()[i].as_str();
                let out = out.map_err(|e| abort(e, name(*u), name(*v), epoch, b))?;
                if !out.loss.is_finite() {
                    return Err(abort(EllError::NonFinite(format!("loss {}", out.loss)), name(*u), name(*v), epoch, b));
                }
                total += out.loss;
                let mut add = |i: usize, g: &GradientPair| {
                    grads.entry(i).or_insert_with(|| GradientPair::zeros_like(&points[i])).add_scaled(g, 1.0);
                };
                add(*u, &out.grad_u);
                add(*v, &out.grad_v);
                for (&n, g) in negs.iter().zip(&out.grad_negatives) {
                    add(n, g);
                }
            }
            for (i, g) in &grads {
                sgd.step_one(*i, &mut points[*i], g)?;
            }
        }
        let mean = if order.is_empty() { 0.0 } else { total / order.len() as f64 };
        info!("epoch {}: mean softmax loss {mean:.6}", epoch + 1);
        epoch_losses.push(mean);
    }
    let store = EmbeddingStore::single(Collection::from_parts(graph.names().to_vec(), points)?);
    Ok(HypernymFit { store, epoch_losses })
}

fn abort(e: EllError, u: &str, v: &str, epoch: usize, batch: usize) -> EllError {
    let at = format!("pair ({u}, {v}), epoch {}, batch {batch}", epoch + 1);
    match e {
        EllError::NonFinite(msg) => EllError::NonFinite(format!("{msg} at {at}")),
        other => {
            log::error!("training failed at {at}: {other}");
            other
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Reconstruction {
    pub mean_rank: f64,
    pub map: f64,
}

/// Rank-based link reconstruction for an arbitrary score `score(u, x)`.
///
/// For each query `u` the candidates are all nodes except `u`. A positive
/// `v ≠ u` has rank `1 + #{negatives x : score(u, x) ≥ score(u, v)}`; the
/// average precision of `u` ranks candidates by decreasing score with ties
/// resolved against the positives. Queries without a positive other than
/// themselves are skipped.
pub fn eval_reconstruction_by<F>(graph: &RelationGraph, score: F) -> Result<Reconstruction>
where
    F: Fn(usize, usize) -> Result<f64> + Sync,
{
    let n = graph.len();
    let per_query = (0..n)
        .into_par_iter()
        .map(|u| -> Result<Option<(f64, usize, f64)>> {
            let pos: Vec<usize> = graph.positives(u).iter().copied().filter(|&v| v != u).collect();
            if pos.is_empty() {
                return Ok(None);
            }
            let mut cands = Vec::with_capacity(n - 1);
            for x in (0..n).filter(|&x| x != u) {
                let s = score(u, x)?;
                if s.is_nan() {
                    return Err(EllError::NonFinite(format!("score({}, {})", graph.names()[u], graph.names()[x])));
                }
                cands.push((s, graph.is_positive(u, x), x));
            }
            // decreasing score, negatives before positives on ties, then id
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut negatives_seen = 0usize;
            let mut hits = 0usize;
            let (mut rank_sum, mut ap) = (0.0, 0.0);
            for (k, &(_, is_pos, _)) in cands.iter().enumerate() {
                if is_pos {
                    hits += 1;
                    rank_sum += (1 + negatives_seen) as f64;
                    ap += hits as f64 / (k + 1) as f64;
                } else {
                    negatives_seen += 1;
                }
            }
            Ok(Some((rank_sum, pos.len(), ap / pos.len() as f64)))
        })
        .collect::<Result<Vec<_>>>()?;
    let (mut rank_sum, mut count, mut ap_sum, mut queries) = (0.0, 0usize, 0.0, 0usize);
    for (r, c, ap) in per_query.into_iter().flatten() {
        rank_sum += r;
        count += c;
        ap_sum += ap;
        queries += 1;
    }
    if queries == 0 {
        return Err(EllError::Graph("no node has a hypernym other than itself".into()));
    }
    Ok(Reconstruction { mean_rank: rank_sum / count as f64, map: ap_sum / queries as f64 })
}

/// Reconstruction scored by the pseudo-dot-product of the stored embeddings.
pub fn eval_reconstruction(store: &EmbeddingStore, graph: &RelationGraph) -> Result<Reconstruction> {
    let coll = store.primary();
    let points = graph
        .names()
        .iter()
        .map(|name| coll.get(name).ok_or_else(|| EllError::MissingToken(name.clone())))
        .collect::<Result<Vec<_>>>()?;
    eval_reconstruction_by(graph, |u, x| polarization_iters(points[u], points[x], DEFAULT_NS_ITERS))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    fn edges(list: &[(&str, &str)]) -> Vec<(String, String)> {
        list.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn parse_edge_lines() {
        let e = parse_edges("# nouns\ndog\tanimal\n\ncat\tanimal\r\n").unwrap();
        assert_eq!(e, edges(&[("dog", "animal"), ("cat", "animal")]));
        assert!(matches!(parse_edges("dog animal\n"), Err(EllError::Format { line: 1, .. })));
        assert!(matches!(parse_edges("ok\tfine\na\tb\tc\n"), Err(EllError::Format { line: 2, .. })));
    }

    #[test]
    fn chain_closure() {
        let c = transitive_closure(3, &[(0, 1), (1, 2)]).unwrap();
        assert_eq!(c, vec![(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]);
        assert_eq!(transitive_closure(3, &c).unwrap(), c);
    }

    #[test]
    fn cycles_are_rejected_but_self_loops_allowed() {
        assert!(matches!(transitive_closure(2, &[(0, 1), (1, 0)]), Err(EllError::Graph(_))));
        assert!(matches!(transitive_closure(3, &[(0, 1), (1, 2), (2, 0)]), Err(EllError::Graph(_))));
        assert_eq!(transitive_closure(1, &[(0, 0)]).unwrap(), vec![(0, 0)]);
    }

    #[test]
    fn binary_tree_closure_matches_floyd_warshall() {
        // node i has parent (i - 1) / 2
        let n = 15;
        let e: Vec<(usize, usize)> = (1..n).map(|i| (i, (i - 1) / 2)).collect();
        let c = transitive_closure(n, &e).unwrap();
        let mut reach = vec![vec![false; n]; n];
        for i in 0..n {
            reach[i][i] = true;
        }
        for &(u, v) in &e {
            reach[u][v] = true;
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    reach[i][j] |= reach[i][k] && reach[k][j];
                }
            }
        }
        let oracle: Vec<(usize, usize)> =
            (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|&(i, j)| reach[i][j]).collect();
        assert_eq!(c, oracle);
        assert_eq!(c.len(), 49);
    }

    #[test]
    fn graph_adds_self_loops_and_dedups() {
        let g = RelationGraph::from_edges(&edges(&[("a", "b"), ("a", "b"), ("b", "c")]), false).unwrap();
        assert_eq!(g.len(), 3);
        assert_eq!(g.pairs().len(), 2 + 3);
        assert!(g.is_positive(0, 0) && g.is_positive(2, 2));
        assert!(!g.is_positive(0, 2));
        let closed = RelationGraph::from_edges(&edges(&[("a", "b"), ("b", "c")]), true).unwrap();
        assert!(closed.is_positive(0, 2));
    }

    fn dirac(v: &[f64]) -> EllipticalPoint {
        EllipticalPoint::dirac(DVector::from_column_slice(v), 1.0).unwrap()
    }

    #[test]
    fn uniform_scores_give_log_n_plus_one() {
        let u = dirac(&[0.0, 0.0]);
        let v = dirac(&[1.0, 0.0]);
        let negs = [&v, &v, &v];
        let out = softmax_loss(&u, &v, &negs, 20).unwrap();
        assert!((out.loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_monotone_in_positive_score() {
        let u = dirac(&[1.0]);
        let neg = dirac(&[0.5]);
        let mut last = f64::INFINITY;
        for s in [0.0, 1.0, 5.0, 20.0, 200.0] {
            let out = softmax_loss(&u, &dirac(&[s]), &[&neg], 20).unwrap();
            assert!(out.loss < last);
            last = out.loss;
        }
        assert!(last < 1e-12);
        // the stable form survives scores that would overflow exp
        let big = softmax_loss(&u, &dirac(&[1e4]), &[&dirac(&[1e4 - 1.0])], 20).unwrap();
        assert!((big.loss - (1.0 + (-1f64).exp()).ln()).abs() < 1e-9);
    }

    #[test]
    fn single_node_graph_trains() {
        let g = RelationGraph::from_edges(&edges(&[("x", "x")]), true).unwrap();
        let fit = train_hypernym(&g, &HypernymConfig { epochs: 3, ..Default::default() }).unwrap();
        assert_eq!(fit.store.primary().len(), 1);
        assert_eq!(fit.epoch_losses, vec![0.0; 3]);
    }

    #[test]
    fn default_learning_rates() {
        assert_eq!(default_hypernym_lr(3), 0.02);
        assert_eq!(default_hypernym_lr(4), 0.02);
        assert_eq!(default_hypernym_lr(5), 0.01);
        let c = HypernymConfig::default();
        assert_eq!((c.batch_size, c.negatives, c.ns_iters, c.epsilon), (1000, 50, 6, 0.01));
    }

    fn star() -> RelationGraph {
        RelationGraph::from_edges(&edges(&[("a", "r"), ("b", "r"), ("c", "r")]), true).unwrap()
    }

    #[test]
    fn perfect_scores() {
        let g = star();
        let r = g.id("r").unwrap();
        let rep = eval_reconstruction_by(&g, |_, x| Ok(if x == r { 1.0 } else { 0.0 })).unwrap();
        assert_eq!(rep, Reconstruction { mean_rank: 1.0, map: 1.0 });
    }

    #[test]
    fn average_precision_by_hand() {
        // one query q with positives p1, p2; candidate order p1, n1, p2, n2
        let g = RelationGraph::from_edges(&edges(&[("q", "p1"), ("q", "p2"), ("n1", "n2")]), false).unwrap();
        let rank: HashMap<&str, f64> = [("p1", 4.0), ("n1", 3.0), ("p2", 2.0), ("n2", 1.0), ("q", 0.0)].into();
        let q = g.id("q").unwrap();
        let names = g.names().to_vec();
        // only score query q meaningfully; n1's own query sees n2 below nothing else
        let rep = eval_reconstruction_by(&g, |u, x| Ok(if u == q { rank[names[x].as_str()] } else { 0.0 })).unwrap();
        // q: AP 5/6, ranks 1 and 2; n1: one positive tied with all negatives, rank 4, AP 1/4
        assert!((rep.map - (5.0 / 6.0 + 0.25) / 2.0).abs() < 1e-12);
        assert!((rep.mean_rank - (1.0 + 2.0 + 4.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_needs_every_node() {
        let g = star();
        let mut c = Collection::new();
        c.push("a".into(), EllipticalPoint::gaussian(DVector::zeros(2), DMatrix::identity(2, 2), 0.0).unwrap()).unwrap();
        assert!(matches!(eval_reconstruction(&EmbeddingStore::single(c), &g), Err(EllError::MissingToken(_))));
    }
}
