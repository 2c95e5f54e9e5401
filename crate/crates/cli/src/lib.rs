//! Command-line front end. [`run`] parses arguments, dispatches to a
//! subcommand and maps failures to exit codes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use nalgebra::DVector;

use ellembed::hypernym::{eval_reconstruction, parse_edges, train_hypernym, HypernymConfig, RelationGraph};
use ellembed::mds::{euclidean_dissimilarities, fit_mds, matrix_from_rows, parse_table, FitStatus, MdsConfig, MdsProblem};
use ellembed::optim::OptimizerKind;
use ellembed::viz::{
    ellipse_params, palette, project, render_svg, top2_eigvecs, Canvas, EllipseMode, RadiusConvention, SvgItem,
    POWER_MAX_ITER, POWER_TOL,
};
use ellembed::wordvec::{eval_similarity, parse_similarity_dataset, train_skipgram, Measure, SkipgramConfig};
use ellembed::{Collection, EllError, EmbeddingStore, Family, Side};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

const SUBCOMMANDS: [&str; 5] = ["mds", "skipgram", "hypernym", "eval", "viz"];

#[derive(Parser, Debug)]
#[command(name = "ellembed", version, about = "Train and inspect elliptical embeddings under the Wasserstein-Bures geometry")]
#[command(args_override_self = true, arg_required_else_help = true)]
struct Cli {
    /// Seed for every random choice
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// File of `key = value` lines used as defaults for the subcommand flags
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Worker threads (defaults to the number of cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Embed a dissimilarity matrix as elliptical measures by stress minimization
    Mds(MdsArgs),
    /// Train word embeddings on a text corpus
    Skipgram(SkipgramArgs),
    /// Train embeddings of a hypernymy graph
    Hypernym(HypernymArgs),
    /// Evaluate a store on word similarity or link reconstruction
    Eval(EvalArgs),
    /// Draw embeddings as ellipses in SVG
    Viz(VizArgs),
}

#[derive(Args, Debug)]
struct MdsArgs {
    /// Numeric table (rows are items) or, with `--format matrix`, an n×n dissimilarity matrix
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "table", value_parser = ["table", "matrix"])]
    format: String,
    /// Optional item names, one per line
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Optional initial means: a table with one row of `dim` values per item
    #[arg(long)]
    init_means: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value = "adagrad")]
    optimizer: String,
    /// Wishart degrees of freedom (factor rank)
    #[arg(long, default_value_t = 4)]
    dof: usize,
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
    #[arg(long, default_value_t = 20)]
    ns_iters: usize,
    #[arg(long, default_value = "gaussian", value_parser = ["gaussian", "uniform"])]
    family: String,
    /// Fit the raw dissimilarities instead of unit-RMS rescaled ones
    #[arg(long)]
    no_normalize: bool,
    /// Stress log destination (`iter value` lines); stdout when absent
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SkipgramArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 12)]
    dim: usize,
    /// Factor rank (full rank when absent)
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long, default_value_t = 10.0)]
    margin: f64,
    #[arg(long, default_value_t = 10)]
    window: usize,
    #[arg(long, default_value_t = 1)]
    negatives: usize,
    #[arg(long, default_value_t = 1e-5)]
    subsample: f64,
    #[arg(long, default_value_t = 0.75)]
    power: f64,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 10_000)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 6)]
    ns_iters: usize,
    #[arg(long, default_value_t = 0.01)]
    epsilon: f64,
    #[arg(long, default_value_t = 100)]
    min_count: u64,
    #[arg(long, default_value_t = 0.1)]
    init_std: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct HypernymArgs {
    /// `child<TAB>hypernym` lines
    #[arg(long)]
    edges: PathBuf,
    /// Use the edges as given instead of their transitive closure
    #[arg(long)]
    no_closure: bool,
    #[arg(long, default_value_t = 5)]
    dim: usize,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 1000)]
    batch_size: usize,
    #[arg(long, default_value_t = 50)]
    negatives: usize,
    /// Defaults to 0.02 in dimensions 3 and 4 and 0.01 otherwise
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 6)]
    ns_iters: usize,
    #[arg(long, default_value_t = 0.01)]
    epsilon: f64,
    #[arg(long, default_value_t = 0.1)]
    init_std: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    store: PathBuf,
    /// Word-similarity dataset (`word1 word2 score` lines)
    #[arg(long, conflicts_with = "edges", required_unless_present = "edges")]
    dataset: Option<PathBuf>,
    /// Hypernymy edges for link reconstruction
    #[arg(long)]
    edges: Option<PathBuf>,
    #[arg(long)]
    no_closure: bool,
    #[arg(long, default_value = "cosine_mixture", value_parser = ["cosine_mixture", "bures_cosine", "polarization"])]
    measure: String,
    #[arg(long, default_value_t = 1.0)]
    rho: f64,
    #[arg(long, default_value = "context")]
    side: String,
}

#[derive(Args, Debug)]
struct VizArgs {
    #[arg(long)]
    store: PathBuf,
    /// Comma-separated tokens to draw (all when absent)
    #[arg(long, value_delimiter = ',')]
    words: Vec<String>,
    /// Token whose scale defines the projection plane when the dimension exceeds 2
    #[arg(long)]
    reference: Option<String>,
    #[arg(long, default_value = "covariance", value_parser = ["covariance", "precision"])]
    mode: String,
    #[arg(long, default_value = "eigenvalue", value_parser = ["eigenvalue", "sqrt"])]
    radius: String,
    #[arg(long, default_value = "context")]
    side: String,
    #[arg(long, default_value_t = 800.0)]
    width: f64,
    #[arg(long, default_value_t = 800.0)]
    height: f64,
    /// Output file; stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure of a subcommand, carrying its exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Lib(EllError),
}

impl From<EllError> for CliError {
    fn from(e: EllError) -> Self {
        CliError::Lib(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Lib(EllError::Domain(_)) => EXIT_USAGE,
            CliError::Lib(e) if e.is_numerical() => EXIT_NUMERICAL,
            CliError::Lib(_) => EXIT_DATA,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn parse_enum<T: std::str::FromStr<Err = EllError>>(s: &str) -> CliResult<T> {
    s.parse().map_err(|e: EllError| CliError::Usage(e.to_string()))
}

/// Turn a `key = value` file into flags. `true` and `false` switch boolean
/// flags; lists are written as in the command line.
pub fn config_to_args(text: &str) -> std::result::Result<Vec<String>, String> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| format!("config line {}: expected `key = value`", i + 1))?;
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(format!("config line {}: bad key", i + 1));
        }
        if ["seed", "config", "threads"].contains(&key.as_str()) {
            return Err(format!("config line {}: `{key}` can only be given on the command line", i + 1));
        }
        match value {
            "true" => out.push(format!("--{key}")),
            "false" => {}
            v => {
                out.push(format!("--{key}"));
                out.push(v.trim_matches('"').to_string());
            }
        }
    }
    Ok(out)
}

/// Splice config-file flags in right after the subcommand so that flags given
/// on the command line come later and take precedence.
fn expand_config(argv: Vec<String>) -> std::result::Result<Vec<String>, String> {
    let mut path = None;
    let mut it = argv.iter().enumerate().skip(1);
    while let Some((_, a)) = it.next() {
        if a == "--config" {
            path = it.next().map(|(_, p)| p.clone());
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else { return Ok(argv) };
    let text = fs::read_to_string(&path).map_err(|e| format!("cannot read config file {path}: {e}"))?;
    let extra = config_to_args(&text)?;
    // the subcommand is the first bare word that is not a value of a global flag
    let mut pos = None;
    let mut i = 1;
    while i < argv.len() {
        let a = argv[i].as_str();
        if ["--seed", "--config", "--threads"].contains(&a) {
            i += 2;
            continue;
        }
        if SUBCOMMANDS.contains(&a) {
            pos = Some(i);
            break;
        }
        i += 1;
    }
    let Some(pos) = pos else { return Ok(argv) };
    let mut out = argv[..=pos].to_vec();
    out.extend(extra);
    out.extend_from_slice(&argv[pos + 1..]);
    Ok(out)
}

/// Parse `argv` (including the program name), run the subcommand and return the exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads.unwrap_or(0)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker threads: {e}");
            return EXIT_USAGE;
        }
    };
    match pool.install(|| dispatch(&cli)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Mds(a) => run_mds(a, cli.seed),
        Command::Skipgram(a) => run_skipgram(a, cli.seed),
        Command::Hypernym(a) => run_hypernym(a, cli.seed),
        Command::Eval(a) => run_eval(a),
        Command::Viz(a) => run_viz(a),
    }
}

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Lib(EllError::Data(format!("cannot read {}: {e}", path.display()))))
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::Lib(EllError::Data(format!("cannot write {}: {e}", path.display()))))
}

fn run_mds(a: &MdsArgs, seed: u64) -> CliResult<()> {
    let rows = parse_table(&read(&a.input)?)?;
    let d = match a.format.as_str() {
        "matrix" => matrix_from_rows(&rows)?,
        _ => euclidean_dissimilarities(&rows),
    };
    let n = d.nrows();
    let family: Family = match a.family.as_str() {
        "uniform" => Family::Uniform,
        _ => Family::Gaussian,
    };
    let problem = MdsProblem::new(d, a.dim, family.tau(a.dim))?;
    let labels: Vec<String> = match &a.labels {
        Some(p) => read(p)?.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect(),
        None => (0..n).map(|i| format!("item{i}")).collect(),
    };
    if labels.len() != n {
        return Err(EllError::Data(format!("{} labels for {n} items", labels.len())).into());
    }
    let init: Option<Vec<DVector<f64>>> = match &a.init_means {
        Some(p) => Some(parse_table(&read(p)?)?.into_iter().map(DVector::from_vec).collect()),
        None => None,
    };
    let config = MdsConfig {
        iters: a.iters,
        lr: a.lr,
        optimizer: parse_enum::<OptimizerKind>(&a.optimizer)?,
        dof: a.dof,
        epsilon: a.epsilon,
        ns_iters: a.ns_iters,
        seed,
        normalize: !a.no_normalize,
    };
    let fit = fit_mds(&problem, &config, init.as_deref())?;
    let mut log = String::new();
    for (i, s) in fit.stress_log.iter().enumerate() {
        log.push_str(&format!("{i} {s:?}\n"));
    }
    match &a.log {
        Some(p) => write_file(p, &log)?,
        None => print!("{log}"),
    }
    if let FitStatus::Aborted { iteration, reason } = &fit.status {
        log::warn!("optimization stopped at iteration {iteration}: {reason}");
    }
    let final_stress = fit.final_stress();
    let store = EmbeddingStore::single(Collection::from_parts(labels, fit.points)?);
    store.save(&a.out)?;
    eprintln!("normalized_stress={final_stress}");
    Ok(())
}

fn print_losses(losses: &[f64]) {
    let mut out = std::io::stdout().lock();
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(out, "{} {l:?}", i + 1);
    }
}

fn run_skipgram(a: &SkipgramArgs, seed: u64) -> CliResult<()> {
    let corpus = read(&a.corpus)?;
    let cfg = SkipgramConfig {
        dim: a.dim,
        rank: a.rank,
        margin: a.margin,
        window: a.window,
        negatives: a.negatives,
        subsample: a.subsample,
        power: a.power,
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        ns_iters: a.ns_iters,
        epsilon: a.epsilon,
        min_count: a.min_count,
        init_std: a.init_std,
        seed,
    };
    let fit = train_skipgram(&corpus, &cfg)?;
    info!("vocabulary of {} words", fit.vocab.len());
    print_losses(&fit.epoch_losses);
    fit.store.save(&a.out)?;
    Ok(())
}

fn load_graph(path: &Path, no_closure: bool) -> CliResult<RelationGraph> {
    let edges = parse_edges(&read(path)?)?;
    Ok(RelationGraph::from_edges(&edges, !no_closure)?)
}

fn run_hypernym(a: &HypernymArgs, seed: u64) -> CliResult<()> {
    let graph = load_graph(&a.edges, a.no_closure)?;
    let cfg = HypernymConfig {
        dim: a.dim,
        rank: a.rank,
        epochs: a.epochs,
        batch_size: a.batch_size,
        negatives: a.negatives,
        lr: a.lr,
        ns_iters: a.ns_iters,
        epsilon: a.epsilon,
        init_std: a.init_std,
        seed,
    };
    let fit = train_hypernym(&graph, &cfg)?;
    print_losses(&fit.epoch_losses);
    fit.store.save(&a.out)?;
    match eval_reconstruction(&fit.store, &graph) {
        Ok(r) => println!("mean_rank={} map={}", r.mean_rank, r.map),
        Err(EllError::Graph(_)) => info!("no relation to evaluate"),
        Err(e) => return Err(e.into()),
    }
    Ok(())
}

fn run_eval(a: &EvalArgs) -> CliResult<()> {
    let store = EmbeddingStore::load(&a.store)?;
    if let Some(edges) = &a.edges {
        let graph = load_graph(edges, a.no_closure)?;
        let r = eval_reconstruction(&store, &graph)?;
        println!("mean_rank={} map={}", r.mean_rank, r.map);
        return Ok(());
    }
    let path = a.dataset.as_ref().ok_or_else(|| CliError::Usage("either --dataset or --edges is required".into()))?;
    let data = parse_similarity_dataset(&read(path)?)?;
    let measure: Measure = parse_enum(&a.measure)?;
    let side: Side = parse_enum(&a.side)?;
    let rep = eval_similarity(&store, &data, measure, a.rho, side)?;
    println!("spearman={} covered={} skipped={}", rep.spearman, rep.covered, rep.skipped);
    Ok(())
}

/// Leading eigenplane; a full eigendecomposition stands in when power
/// iteration stalls on a tight spectral gap.
fn projection_plane(scale: &nalgebra::DMatrix<f64>) -> CliResult<nalgebra::DMatrix<f64>> {
    match top2_eigvecs(scale, POWER_TOL, POWER_MAX_ITER) {
        Err(EllError::NoConvergence(n)) => {
            log::warn!("power iteration did not converge in {n} steps; using a full eigendecomposition");
            let eig = nalgebra::SymmetricEigen::new(scale.clone());
            let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
            order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
            Ok(nalgebra::DMatrix::from_columns(&[eig.eigenvectors.column(order[0]), eig.eigenvectors.column(order[1])]))
        }
        other => Ok(other?),
    }
}

fn run_viz(a: &VizArgs) -> CliResult<()> {
    let store = EmbeddingStore::load(&a.store)?;
    let coll = store.side_or_single(parse_enum(&a.side)?)?;
    let words: Vec<&str> =
        if a.words.is_empty() { coll.tokens().iter().map(String::as_str).collect() } else { a.words.iter().map(String::as_str).collect() };
    let points = words
        .iter()
        .map(|w| coll.get(w).ok_or_else(|| EllError::MissingToken(w.to_string())))
        .collect::<ellembed::Result<Vec<_>>>()?;
    let dim = coll.points().first().map_or(2, |p| p.dim());
    let basis = if dim == 2 && a.reference.is_none() {
        nalgebra::DMatrix::identity(2, 2)
    } else {
        let reference = a.reference.as_deref().or(words.first().copied()).ok_or_else(|| CliError::Usage("no word to draw".into()))?;
        let p = coll.get(reference).ok_or_else(|| EllError::MissingToken(reference.to_string()))?;
        projection_plane(&p.scale())?
    };
    let mode: EllipseMode = parse_enum(&a.mode)?;
    let radius: RadiusConvention = parse_enum(&a.radius)?;
    let mut items = Vec::with_capacity(points.len());
    for (i, (w, p)) in words.iter().zip(points).enumerate() {
        let (center, s2) = project(p, &basis)?;
        items.push(SvgItem {
            label: w.to_string(),
            center,
            ellipse: ellipse_params(&s2, mode, radius)?,
            color: palette(i).to_string(),
        });
    }
    let svg = render_svg(&items, &Canvas { width: a.width, height: a.height, ..Default::default() })?;
    match &a.out {
        Some(p) => write_file(p, &svg),
        None => {
            print!("{svg}");
            Ok(())
        }
    }
}
