//! Skipgram training of elliptical word embeddings with a margin loss on the
//! pseudo-dot-product, and word-similarity evaluation.
//!
//! Every word has an input measure `μ_w` and a context measure `ν_w`. For a
//! positive pair `(w, c)` with negatives `c'₁..c'ₙ` the loss is
//!
//! ```text
//! [M − [μ_w : ν_c] + (1/n) Σ [μ_w : ν_c'ᵢ]]₊
//! ```

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;

use log::info;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bures::{
    bures_cosine, cosine_mixture, polarization, EllipticalPoint, GradientPair, DEFAULT_EPSILON, TRAINING_NS_ITERS,
};
use crate::error::{EllError, Result};
use crate::optim::{polarization_with_grads, AdagradState, PreparedPoint, ADAGRAD_EPS};
use crate::sampling::{normal_matrix, normal_vector};
use crate::store::{Collection, EmbeddingStore, Side};

/// Lowercase and drop every non-alphanumeric character.
pub fn normalize_token(raw: &str) -> String {
    raw.chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_lowercase).collect()
}

pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(normalize_token).filter(|t| !t.is_empty())
}

#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, usize>,
    total: u64,
    pub min_count: u64,
}

impl Vocabulary {
    /// Ids are assigned by decreasing count, ties broken alphabetically.
    pub fn from_counts(raw: HashMap<String, u64>, min_count: u64) -> Result<Self> {
        let mut kept: Vec<(String, u64)> = raw.into_iter().filter(|(_, c)| *c >= min_count.max(1)).collect();
        if kept.is_empty() {
            return Err(EllError::EmptyVocabulary(format!("no token appears at least {min_count} times")));
        }
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let total = kept.iter().map(|(_, c)| c).sum();
        let index = kept.iter().enumerate().map(|(i, (t, _))| (t.clone(), i)).collect();
        let (tokens, counts) = kept.into_iter().unzip();
        Ok(Self { tokens, counts, index, total, min_count })
    }

    pub fn from_text(text: &str, min_count: u64) -> Result<Self> {
        let mut counts = HashMap::new();
        for t in tokenize(text) {
            *counts.entry(t).or_insert(0) += 1;
        }
        Self::from_counts(counts, min_count)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Sum of the retained counts.
    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn frequency(&self, id: usize) -> f64 {
        self.counts[id] as f64 / self.total as f64
    }

    /// Map a text to ids, dropping tokens outside the vocabulary.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).filter_map(|t| self.id(&t)).collect()
    }
}

/// Count normalized tokens from a reader and keep those seen at least `min_count` times.
pub fn build_vocab<R: BufRead>(reader: R, min_count: u64) -> Result<Vocabulary> {
    let mut counts = HashMap::new();
    for line in reader.lines() {
        for t in tokenize(&line?) {
            *counts.entry(t).or_insert(0) += 1;
        }
    }
    Vocabulary::from_counts(counts, min_count)
}

/// Probability of discarding an occurrence of a word with frequency `f`.
pub fn discard_prob(f: f64, t: f64) -> Result<f64> {
    if !(f > 0.0) || f > 1.0 {
        return Err(EllError::Domain(format!("frequency must lie in (0, 1], got {f}")));
    }
    if !(t > 0.0) {
        return Err(EllError::Domain(format!("subsampling threshold must be positive, got {t}")));
    }
    Ok((1.0 - (t / f).sqrt()).max(0.0))
}

/// Draws ids with probability proportional to `count^power`.
#[derive(Clone, Debug)]
pub struct NegativeSampler {
    dist: WeightedIndex<f64>,
    probs: Vec<f64>,
}

impl NegativeSampler {
    pub fn new(counts: &[u64], power: f64) -> Result<Self> {
        if counts.is_empty() {
            return Err(EllError::EmptyVocabulary("negative sampler over zero words".into()));
        }
        let weights: Vec<f64> = counts.iter().map(|&c| (c as f64).powf(power)).collect();
        let z: f64 = weights.iter().sum();
        let dist = WeightedIndex::new(&weights).map_err(|e| EllError::Domain(format!("sampler weights: {e}")))?;
        Ok(Self { dist, probs: weights.iter().map(|w| w / z).collect() })
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.dist.sample(rng)
    }

    /// Sample an id different from `exclude` (unless the vocabulary has a single word).
    pub fn sample_excluding<R: Rng + ?Sized>(&self, rng: &mut R, exclude: usize) -> usize {
        if self.probs.len() == 1 {
            return 0;
        }
        loop {
            let id = self.sample(rng);
            if id != exclude {
                return id;
            }
        }
    }
}

/// Context positions paired with position `i`: up to `window / 2` on each side.
pub fn context_positions(i: usize, len: usize, window: usize) -> impl Iterator<Item = usize> {
    let half = window / 2;
    let lo = i.saturating_sub(half);
    let hi = (i + half).min(len.saturating_sub(1));
    (lo..=hi).filter(move |&j| j != i && j < len)
}

#[derive(Clone, Debug)]
pub struct HingeOutput {
    pub loss: f64,
    pub grad_word: GradientPair,
    pub grad_context: GradientPair,
    pub grad_negatives: Vec<GradientPair>,
}

/// Margin loss of one positive pair against its negatives; gradients are zero
/// when the hinge is inactive.
pub fn hinge_loss(
    word: &EllipticalPoint,
    context: &EllipticalPoint,
    negatives: &[&EllipticalPoint],
    margin: f64,
    iters: usize,
) -> Result<HingeOutput> {
    if negatives.is_empty() {
        return Err(EllError::Data("hinge loss needs at least one negative".into()));
    }
    let pw = PreparedPoint::new(word, iters)?;
    hinge_prepared(&pw, context, negatives, margin, iters)
}

fn hinge_prepared(
    pw: &PreparedPoint,
    context: &EllipticalPoint,
    negatives: &[&EllipticalPoint],
    margin: f64,
    iters: usize,
) -> Result<HingeOutput> {
    let n = negatives.len() as f64;
    let pos = polarization_with_grads(pw, context, iters)?;
    let negs = negatives
        .iter()
        .map(|c| polarization_with_grads(pw, c, iters))
        .collect::<Result<Vec<_>>>()?;
    let raw = margin - pos.value + negs.iter().map(|g| g.value).sum::<f64>() / n;
    let word = pw.point;
    if raw <= 0.0 {
        return Ok(HingeOutput {
            loss: 0.0,
            grad_word: GradientPair::zeros_like(word),
            grad_context: GradientPair::zeros_like(context),
            grad_negatives: negatives.iter().map(|c| GradientPair::zeros_like(c)).collect(),
        });
    }
    let mut grad_word = pos.left.scaled(-1.0);
    for g in &negs {
        grad_word.add_scaled(&g.left, 1.0 / n);
    }
    Ok(HingeOutput {
        loss: raw,
        grad_word,
        grad_context: pos.right.scaled(-1.0),
        grad_negatives: negs.into_iter().map(|g| g.right.scaled(1.0 / n)).collect(),
    })
}

#[derive(Clone, Debug)]
pub struct SkipgramConfig {
    pub dim: usize,
    /// Factor rank; `None` means full rank (`dim`).
    pub rank: Option<usize>,
    pub margin: f64,
    pub window: usize,
    pub negatives: usize,
    pub subsample: f64,
    pub power: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub ns_iters: usize,
    pub epsilon: f64,
    pub min_count: u64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for SkipgramConfig {
    fn default() -> Self {
        Self {
            dim: 12,
            rank: None,
            margin: 10.0,
            window: 10,
            negatives: 1,
            subsample: 1e-5,
            power: 0.75,
            epochs: 5,
            batch_size: 10_000,
            lr: 0.01,
            ns_iters: TRAINING_NS_ITERS,
            epsilon: DEFAULT_EPSILON,
            min_count: 100,
            init_std: 0.1,
            seed: 0,
        }
    }
}

impl SkipgramConfig {
    fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("window", self.window),
            ("negatives", self.negatives),
            ("epochs", self.epochs),
            ("batch size", self.batch_size),
            ("ns iterations", self.ns_iters),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(EllError::Domain(format!("{name} must be positive")));
        }
        if self.rank == Some(0) {
            return Err(EllError::Domain("rank must be positive".into()));
        }
        if !(self.lr > 0.0 && self.subsample > 0.0 && self.margin >= 0.0 && self.epsilon >= 0.0) {
            return Err(EllError::Domain("lr and subsample must be positive, margin and epsilon nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SkipgramFit {
    pub store: EmbeddingStore,
    pub vocab: Vocabulary,
    /// Mean hinge loss over the positive pairs of each epoch.
    pub epoch_losses: Vec<f64>,
}

fn init_points(rng: &mut ChaCha8Rng, n: usize, cfg: &SkipgramConfig) -> Result<Vec<EllipticalPoint>> {
    let k = cfg.rank.unwrap_or(cfg.dim);
    (0..n)
        .map(|_| {
            let mean = normal_vector(rng, cfg.dim, cfg.init_std);
            let factor = normal_matrix(rng, cfg.dim, k, cfg.init_std);
            EllipticalPoint::gaussian(mean, factor, cfg.epsilon)
        })
        .collect()
}

struct Example {
    word: usize,
    context: usize,
    negatives: Vec<usize>,
}

fn epoch_examples(
    ids: &[usize],
    vocab: &Vocabulary,
    sampler: &NegativeSampler,
    cfg: &SkipgramConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Example>> {
    let discard: Vec<f64> =
        (0..vocab.len()).map(|i| discard_prob(vocab.frequency(i), cfg.subsample)).collect::<Result<_>>()?;
    let kept: Vec<usize> = ids.iter().copied().filter(|&id| rng.random::<f64>() >= discard[id]).collect();
    let mut out = Vec::new();
    for i in 0..kept.len() {
        for j in context_positions(i, kept.len(), cfg.window) {
            let context = kept[j];
            let negatives = (0..cfg.negatives).map(|_| sampler.sample_excluding(rng, context)).collect();
            out.push(Example { word: kept[i], context, negatives });
        }
    }
    Ok(out)
}

/// Train both embedding sets on a text corpus.
pub fn train_skipgram(corpus: &str, cfg: &SkipgramConfig) -> Result<SkipgramFit> {
    cfg.validate()?;
    let vocab = Vocabulary::from_text(corpus, cfg.min_count)?;
    let ids = vocab.encode(corpus);
    train_skipgram_ids(&ids, vocab, cfg)
}

/// Train on an already-encoded token stream.
pub fn train_skipgram_ids(ids: &[usize], vocab: Vocabulary, cfg: &SkipgramConfig) -> Result<SkipgramFit> {
    cfg.validate()?;
    if vocab.is_empty() {
        return Err(EllError::EmptyVocabulary("vocabulary is empty".into()));
    }
    let v = vocab.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut input = init_points(&mut rng, v, cfg)?;
    let mut context = init_points(&mut rng, v, cfg)?;
    let sampler = NegativeSampler::new(vocab.counts(), cfg.power)?;
    let mut opt_in = AdagradState::new(&input, cfg.lr, ADAGRAD_EPS);
    let mut opt_ctx = AdagradState::new(&context, cfg.lr, ADAGRAD_EPS);

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let examples = epoch_examples(ids, &vocab, &sampler, cfg, &mut rng)?;
        let mut total = 0.0;
        for (b, batch) in examples.chunks(cfg.batch_size).enumerate() {
            let outputs = batch
                .par_iter()
                .map(|ex| {
                    let negs: Vec<&EllipticalPoint> = ex.negatives.iter().map(|&n| &context[n]).collect();
                    let pw = PreparedPoint::new(&input[ex.word], cfg.ns_iters)?;
                    hinge_prepared(&pw, &context[ex.context], &negs, cfg.margin, cfg.ns_iters)
                })
                .collect::<Vec<_>>();
            let mut g_in: BTreeMap<usize, GradientPair> = BTreeMap::new();
            let mut g_ctx: BTreeMap<usize, GradientPair> = BTreeMap::new();
            for (ex, out) in batch.iter().zip(outputs) {
                let out = out.map_err(|e| diagnose(e, ex, epoch, b))?;
                if !out.loss.is_finite() {
                    return Err(diagnose(EllError::NonFinite(format!("hinge loss {}", out.loss)), ex, epoch, b));
                }
                total += out.loss;
                if out.loss == 0.0 {
                    continue;
                }
                accumulate(&mut g_in, ex.word, &out.grad_word, &input[ex.word]);
                accumulate(&mut g_ctx, ex.context, &out.grad_context, &context[ex.context]);
                for (&n, g) in ex.negatives.iter().zip(&out.grad_negatives) {
                    accumulate(&mut g_ctx, n, g, &context[n]);
                }
            }
            for (id, g) in &g_in {
                opt_in.step_one(*id, &mut input[*id], g)?;
            }
            for (id, g) in &g_ctx {
                opt_ctx.step_one(*id, &mut context[*id], g)?;
            }
        }
        let mean = if examples.is_empty() { 0.0 } else { total / examples.len() as f64 };
        info!("epoch {}: {} pairs, mean hinge loss {mean:.6}", epoch + 1, examples.len());
        epoch_losses.push(mean);
    }

    let tokens = vocab.tokens().to_vec();
    let store = EmbeddingStore::two_sided(
        Collection::from_parts(tokens.clone(), input)?,
        Collection::from_parts(tokens, context)?,
    )?;
    Ok(SkipgramFit { store, vocab, epoch_losses })
}

fn accumulate(map: &mut BTreeMap<usize, GradientPair>, id: usize, g: &GradientPair, p: &EllipticalPoint) {
    map.entry(id).or_insert_with(|| GradientPair::zeros_like(p)).add_scaled(g, 1.0);
}

fn diagnose(e: EllError, ex: &Example, epoch: usize, batch: usize) -> EllError {
    let at = format!("word id {}, context id {}, epoch {}, batch {batch}", ex.word, ex.context, epoch + 1);
    match e {
        EllError::NonFinite(msg) => EllError::NonFinite(format!("{msg} ({at})")),
        other => {
            log::error!("training failed at {at}: {other}");
            other
        }
    }
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman correlation: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(EllError::Shape(format!("score vectors have lengths {} and {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(EllError::UndefinedCorrelation(format!("need at least 2 pairs, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(EllError::NonFinite("score vector".into()));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EllError::UndefinedCorrelation("constant score vector".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// One row of a word-similarity benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityPair {
    pub first: String,
    pub second: String,
    pub score: f64,
}

/// Parse `word1 word2 score` lines (tab or space separated, `#` comments).
pub fn parse_similarity_dataset(text: &str) -> Result<Vec<SimilarityPair>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(EllError::Format { line: i + 1, msg: format!("expected 3 fields, found {}", fields.len()) });
        }
        let score = fields[2]
            .parse()
            .map_err(|_| EllError::Format { line: i + 1, msg: format!("bad score `{}`", fields[2]) })?;
        out.push(SimilarityPair { first: fields[0].to_string(), second: fields[1].to_string(), score });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Measure {
    CosineMixture,
    BuresCosine,
    Polarization,
}

impl std::str::FromStr for Measure {
    type Err = EllError;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "cosine_mixture" => Ok(Measure::CosineMixture),
            "bures_cosine" => Ok(Measure::BuresCosine),
            "polarization" => Ok(Measure::Polarization),
            other => Err(EllError::Data(format!("unknown similarity measure `{other}`"))),
        }
    }
}

pub fn similarity(a: &EllipticalPoint, b: &EllipticalPoint, measure: Measure, rho: f64) -> Result<f64> {
    match measure {
        Measure::CosineMixture => cosine_mixture(a, b, rho),
        Measure::BuresCosine => bures_cosine(a, b, rho),
        Measure::Polarization => polarization(a, b),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityReport {
    pub spearman: f64,
    pub covered: usize,
    pub skipped: usize,
}

/// Spearman correlation between human scores and model similarities on the
/// pairs whose words are both in the store; words are normalized like corpus tokens.
pub fn eval_similarity(
    store: &EmbeddingStore,
    dataset: &[SimilarityPair],
    measure: Measure,
    rho: f64,
    side: Side,
) -> Result<SimilarityReport> {
    let coll = store.side_or_single(side)?;
    let mut human = Vec::new();
    let mut model = Vec::new();
    let mut skipped = 0;
    for pair in dataset {
        let (a, b) = (coll.get(&normalize_token(&pair.first)), coll.get(&normalize_token(&pair.second)));
        match (a, b) {
            (Some(a), Some(b)) => {
                human.push(pair.score);
                model.push(similarity(a, b, measure, rho)?);
            }
            _ => skipped += 1,
        }
    }
    if human.is_empty() {
        return Err(EllError::UndefinedCorrelation("no dataset pair is covered by the store".into()));
    }
    Ok(SimilarityReport { spearman: spearman(&human, &model)?, covered: human.len(), skipped })
}

/// Free parameters of an elliptical embedding in dimension `d`.
pub fn elliptical_param_count(d: usize) -> usize {
    d + d * (d + 1) / 2
}

/// Free parameters of a diagonal Gaussian embedding in dimension `d`.
pub fn diagonal_param_count(d: usize) -> usize {
    2 * d
}

/// Largest elliptical dimension whose parameter count fits the budget of a
/// diagonal Gaussian embedding of dimension `diag_dim`.
pub fn matched_elliptical_dim(diag_dim: usize) -> usize {
    let budget = diagonal_param_count(diag_dim);
    (0..).take_while(|&d| elliptical_param_count(d) <= budget).last().unwrap_or(0)
}
