use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn ellembed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ellembed")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_table(dir: &TempDir) -> std::path::PathBuf {
    let mut text = String::from("# ten items, three features\n");
    for i in 0..10 {
        let x = i as f64;
        text.push_str(&format!("{} {} {}\n", x, (x * 0.7).sin() * 3.0, (x * x) % 5.0));
    }
    let p = dir.path().join("table.txt");
    fs::write(&p, text).unwrap();
    p
}

fn write_edges(dir: &TempDir) -> std::path::PathBuf {
    let mut text = String::new();
    for a in 0..3 {
        text.push_str(&format!("a{a}\troot\n"));
        for b in 0..3 {
            text.push_str(&format!("b{a}{b}\ta{a}\n"));
        }
    }
    let p = dir.path().join("edges.tsv");
    fs::write(&p, text).unwrap();
    p
}

fn write_corpus(dir: &TempDir) -> std::path::PathBuf {
    let topics = [["cat", "dog", "mouse", "pet"], ["car", "road", "wheel", "drive"], ["sun", "moon", "star", "sky"]];
    let mut text = String::new();
    for rep in 0..150 {
        let t = &topics[rep % 3];
        for k in 0..12 {
            text.push_str(t[(k * 7 + rep) % 4]);
            text.push(' ');
        }
        text.push_str(".\n");
    }
    let p = dir.path().join("corpus.txt");
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn no_arguments_is_a_usage_error() {
    let out = ellembed(&[]);
    assert_eq!(code(&out), 1);
}

#[test]
fn help_and_bad_flags() {
    let out = ellembed(&["viz", "--help"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("--reference"));
    assert_eq!(code(&ellembed(&["mds", "--bogus"])), 1);
    assert_eq!(code(&ellembed(&["frobnicate"])), 1);
}

#[test]
fn missing_input_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out.txt");
    let res = ellembed(&["mds", "--input", "/nonexistent/table.txt", "--out", path_str(&out)]);
    assert_eq!(code(&res), 2);
    assert!(String::from_utf8_lossy(&res.stderr).starts_with("error:"));
}

#[test]
fn mds_end_to_end_is_seeded() {
    let dir = TempDir::new().unwrap();
    let table = write_table(&dir);
    let store = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let log = dir.path().join(format!("{name}.log"));
        let res = ellembed(&[
            "--seed", seed, "mds", "--input", path_str(&table), "--iters", "200", "--lr", "0.05",
            "--log", path_str(&log), "--out", path_str(&out),
        ]);
        assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
        assert!(String::from_utf8_lossy(&res.stderr).contains("normalized_stress="));
        (fs::read_to_string(out).unwrap(), fs::read_to_string(log).unwrap())
    };
    let (a, log) = store("a.txt", "3");
    let (b, _) = store("b.txt", "3");
    let (c, _) = store("c.txt", "4");
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(a.starts_with("ellembed 1 2 4 "));
    assert_eq!(a.lines().count(), 11);

    let values: Vec<f64> = log.lines().map(|l| l.split_whitespace().nth(1).unwrap().parse().unwrap()).collect();
    assert!(values.len() > 100);
    assert!(values.last().unwrap() < &values[0]);
}

#[test]
fn config_file_matches_flags() {
    let dir = TempDir::new().unwrap();
    let table = write_table(&dir);
    let cfg = dir.path().join("mds.cfg");
    fs::write(&cfg, "# short run\niters = 25\nlr = 0.05\noptimizer = sgd\n").unwrap();
    let via_cfg = dir.path().join("cfg.txt");
    let via_flags = dir.path().join("flags.txt");
    let r1 = ellembed(&["--config", path_str(&cfg), "mds", "--input", path_str(&table), "--out", path_str(&via_cfg)]);
    let r2 = ellembed(&[
        "mds", "--input", path_str(&table), "--iters", "25", "--lr", "0.05", "--optimizer", "sgd",
        "--out", path_str(&via_flags),
    ]);
    assert_eq!(code(&r1), 0, "{}", String::from_utf8_lossy(&r1.stderr));
    assert_eq!(code(&r2), 0);
    assert_eq!(r1.stdout, r2.stdout);
    assert_eq!(fs::read(&via_cfg).unwrap(), fs::read(&via_flags).unwrap());

    // command-line flags win over the file
    let r3 = ellembed(&["--config", path_str(&cfg), "mds", "--input", path_str(&table), "--iters", "3", "--out", path_str(&via_flags)]);
    assert_eq!(code(&r3), 0);
    assert_eq!(String::from_utf8_lossy(&r3.stdout).lines().count(), 4);

    fs::write(&cfg, "seed = 3\n").unwrap();
    let r4 = ellembed(&["--config", path_str(&cfg), "mds", "--input", path_str(&table), "--out", path_str(&via_flags)]);
    assert_eq!(code(&r4), 1);
}

#[test]
fn hypernym_then_eval_reconstruction() {
    let dir = TempDir::new().unwrap();
    let edges = write_edges(&dir);
    let store = dir.path().join("hyp.txt");
    let res = ellembed(&[
        "hypernym", "--edges", path_str(&edges), "--epochs", "60", "--negatives", "5", "--out", path_str(&store),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let stdout = String::from_utf8_lossy(&res.stdout).to_string();
    assert_eq!(stdout.lines().filter(|l| !l.starts_with("mean_rank")).count(), 60);
    let summary = stdout.lines().last().unwrap().to_string();
    assert!(summary.starts_with("mean_rank="));

    let eval = ellembed(&["eval", "--store", path_str(&store), "--edges", path_str(&edges)]);
    assert_eq!(code(&eval), 0);
    assert_eq!(String::from_utf8_lossy(&eval.stdout).trim(), summary);

    let both = ellembed(&["eval", "--store", path_str(&store), "--edges", path_str(&edges), "--dataset", path_str(&edges)]);
    assert_eq!(code(&both), 1);
}

#[test]
fn skipgram_eval_and_viz() {
    let dir = TempDir::new().unwrap();
    let corpus = write_corpus(&dir);
    let store = dir.path().join("sg.txt");
    let res = ellembed(&[
        "--threads", "2", "skipgram", "--corpus", path_str(&corpus), "--dim", "3", "--min-count", "5",
        "--epochs", "2", "--batch-size", "200", "--subsample", "0.5", "--out", path_str(&store),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(String::from_utf8_lossy(&res.stdout).lines().count(), 2);
    let text = fs::read_to_string(&store).unwrap();
    assert!(text.lines().any(|l| l.ends_with(" input")) && text.lines().any(|l| l.ends_with(" context")));

    let data = dir.path().join("pairs.txt");
    fs::write(&data, "cat dog 9\ncat car 1\nsun moon 8\nroad sky 2\ncat unicorn 5\n").unwrap();
    let eval = ellembed(&["eval", "--store", path_str(&store), "--dataset", path_str(&data), "--measure", "bures_cosine"]);
    assert_eq!(code(&eval), 0, "{}", String::from_utf8_lossy(&eval.stderr));
    let line = String::from_utf8_lossy(&eval.stdout).to_string();
    assert!(line.starts_with("spearman=") && line.contains("covered=4") && line.contains("skipped=1"), "{line}");

    let svg = dir.path().join("words.svg");
    let viz = ellembed(&[
        "viz", "--store", path_str(&store), "--words", "cat,dog,car", "--reference", "cat", "--mode", "precision",
        "--out", path_str(&svg),
    ]);
    assert_eq!(code(&viz), 0, "{}", String::from_utf8_lossy(&viz.stderr));
    let svg = fs::read_to_string(svg).unwrap();
    assert!(svg.starts_with("<?xml"));
    assert_eq!(svg.matches("<ellipse").count(), 3);

    let missing = ellembed(&["viz", "--store", path_str(&store), "--words", "cat,unicorn"]);
    assert_eq!(code(&missing), 2);
}
