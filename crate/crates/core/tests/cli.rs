use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use longrank::data::{load_candidates, load_run, load_qrels};
use longrank::evaluation::evaluate_run;

fn longrank(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_longrank"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = longrank(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    longrank(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &[&str] = &[
    "--model-set",
    "hidden_dim=16",
    "--model-set",
    "num_layers=1",
    "--model-set",
    "num_heads=2",
    "--model-set",
    "window=8",
    "--model-set",
    "max_len=40",
    "--model-set",
    "classifier_hidden_dim=8",
    "--model-set",
    "vocab_size=256",
];

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        ok(&["--seed", "3", "synth", "--out", s(&root.join("syn"))]);
        ok(&["index", "--docs", s(&root.join("syn/docs.tsv")), "--out", s(&root.join("idx"))]);
        ok(&[
            "retrieve",
            "--index",
            s(&root.join("idx")),
            "--queries",
            s(&root.join("syn/queries.tsv")),
            "--out",
            s(&root.join("bm25.run")),
        ]);
        Fixture { _dir: dir, root }
    }

    fn p(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let mut args: Vec<String> = [
            "--seed",
            "5",
            "train",
            "--docs",
            s(&self.p("syn/docs.tsv")),
            "--queries",
            s(&self.p("syn/train_queries.tsv")),
            "--qrels",
            s(&self.p("syn/qrels.txt")),
            "--candidates",
            s(&self.p("bm25.run")),
            "--out",
            s(&self.p(out)),
            "--train-set",
            "batch_size=2",
            "--train-set",
            "warmup_steps=2",
            "--train-set",
            "total_steps=6",
            "--train-set",
            "checkpoint_interval=3",
            "--train-set",
            "learning_rate=0.001",
        ]
        .iter()
        .map(|x| x.to_string())
        .collect();
        args.extend(TINY.iter().map(|x| x.to_string()));
        args.extend(extra.iter().map(|x| x.to_string()));
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        longrank(&refs)
    }

    fn rerank(&self, ckpt: &str, out: &str) -> Output {
        longrank(&[
            "rerank",
            "--docs",
            s(&self.p("syn/docs.tsv")),
            "--queries",
            s(&self.p("syn/heldout_queries.tsv")),
            "--candidates",
            s(&self.p("bm25.run")),
            "--checkpoint",
            s(&self.p(ckpt)),
            "--out",
            s(&self.p(out)),
        ])
    }
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap()
}

#[test]
fn index_prints_counts_and_is_reproducible() {
    let f = Fixture::new();
    let out = ok(&["index", "--docs", s(&f.p("syn/docs.tsv")), "--out", s(&f.p("idx2"))]);
    assert!(out.starts_with("documents\t200\n"), "{out}");
    for file in ["meta.txt", "docs.tsv", "postings.tsv"] {
        assert_eq!(read(&f.p("idx").join(file)), read(&f.p("idx2").join(file)), "{file}");
    }
}

#[test]
fn missing_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.tsv");
    assert_eq!(code(&["index", "--docs", s(&missing), "--out", s(&dir.path().join("i"))]), 2);
    assert_eq!(code(&["eval", "--run", s(&missing), "--qrels", s(&missing)]), 2);
    assert_eq!(code(&["no-such-command"]), 2);
    assert_eq!(code(&["index", "--docs"]), 2);
    assert_eq!(code(&["--help"]), 0);
}

#[test]
fn retrieve_line_counts_and_empty_queries() {
    let f = Fixture::new();
    let run = load_run(f.p("bm25.run")).unwrap();
    let cands = load_candidates(f.p("bm25.run")).unwrap();
    assert_eq!(run.len(), cands.values().map(|c| c.len()).sum::<usize>());
    ok(&[
        "retrieve",
        "--index",
        s(&f.p("idx")),
        "--queries",
        s(&f.p("syn/queries.tsv")),
        "--k",
        "2",
        "--out",
        s(&f.p("k2.run")),
    ]);
    let k2 = load_candidates(f.p("k2.run")).unwrap();
    for (q, set) in &k2 {
        assert_eq!(set.len(), cands[q].len().min(2));
        assert_eq!(set.candidates[..], cands[q].candidates[..set.len()]);
    }
    fs::write(f.p("empty.tsv"), "").unwrap();
    let out = ok(&[
        "retrieve",
        "--index",
        s(&f.p("idx")),
        "--queries",
        s(&f.p("empty.tsv")),
        "--out",
        s(&f.p("empty.run")),
    ]);
    assert!(out.contains("lines\t0"));
    assert_eq!(read(&f.p("empty.run")), b"");
}

#[test]
fn train_is_deterministic_and_rerank_permutes() {
    let f = Fixture::new();
    for out in ["m1", "m2"] {
        let o = f.train(out, &[]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for file in ["metrics.tsv", "model.ckpt", "checkpoint-000003.ckpt", "vocab.txt", "model.cfg"] {
        assert_eq!(read(&f.p("m1").join(file)), read(&f.p("m2").join(file)), "{file}");
    }
    let metrics = String::from_utf8(read(&f.p("m1/metrics.tsv"))).unwrap();
    assert_eq!(metrics.lines().count(), 6);
    assert!(metrics.starts_with("0\t0.000000\t"));

    assert!(f.rerank("m1/model.ckpt", "a.run").status.success());
    assert!(f.rerank("m1/model.ckpt", "b.run").status.success());
    assert_eq!(read(&f.p("a.run")), read(&f.p("b.run")));
    let reranked = load_candidates(f.p("a.run")).unwrap();
    let bm25 = load_candidates(f.p("bm25.run")).unwrap();
    assert_eq!(reranked.len(), 10);
    for (q, set) in &reranked {
        let mut a: Vec<&str> = set.doc_ids().collect();
        let mut b: Vec<&str> = bm25[q].doc_ids().collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }
    // intermediate checkpoints carry optimizer state and still load
    assert!(f.rerank("m1/checkpoint-000003.ckpt", "c.run").status.success());
}

#[test]
fn train_rejects_bad_config_before_starting() {
    let f = Fixture::new();
    let o = f.train("bad", &["--train-set", "warmup_steps=10"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!f.p("bad").exists());
    let o = f.train("bad2", &["--model-set", "num_heads=3"]);
    assert_eq!(o.status.code(), Some(2));
    let o = f.train("bad3", &["--train-set", "no_such_key=1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn flag_overrides_file() {
    let f = Fixture::new();
    fs::write(f.p("t.cfg"), "total_steps = 50\nbatch_size = 1\n").unwrap();
    // file says 50 steps, the flag in `train` says 6
    let o = f.train("m", &["--train-config", s(&f.p("t.cfg"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = fs::read_to_string(f.p("m/train.cfg")).unwrap();
    assert!(cfg.contains("total_steps = 6\n"));
    assert!(cfg.contains("batch_size = 2\n"));
    assert!(cfg.contains("seed = 5\n"));
}

#[test]
fn rerank_config_mismatch_exits_2() {
    let f = Fixture::new();
    assert!(f.train("m", &[]).status.success());
    let cfg = fs::read_to_string(f.p("m/model.cfg")).unwrap();
    fs::write(f.p("m/model.cfg"), cfg.replace("hidden_dim = 16", "hidden_dim = 32")).unwrap();
    assert_eq!(f.rerank("m/model.ckpt", "x.run").status.code(), Some(2));
    fs::write(f.p("m/model.cfg"), cfg).unwrap();
    fs::write(f.p("m/model.ckpt"), b"garbage").unwrap();
    assert_eq!(f.rerank("m/model.ckpt", "x.run").status.code(), Some(2));
}

#[test]
fn eval_reports_known_values() {
    let f = Fixture::new();
    let out = ok(&["eval", "--run", s(&f.p("bm25.run")), "--qrels", s(&f.p("syn/qrels.txt"))]);
    let run = load_run(f.p("bm25.run")).unwrap();
    let qrels = load_qrels(f.p("syn/qrels.txt")).unwrap();
    let expected = evaluate_run(&run, &qrels, 100).unwrap();
    assert_eq!(out, format!("mrr@100\t{:.6}\n", expected.mrr));

    let top1 = ok(&[
        "eval",
        "--run",
        s(&f.p("bm25.run")),
        "--qrels",
        s(&f.p("syn/qrels.txt")),
        "--cutoff",
        "1",
    ]);
    let groups = load_candidates(f.p("bm25.run")).unwrap();
    let hits = groups
        .iter()
        .filter(|(q, set)| qrels.is_relevant(q, &set.candidates[0].doc_id))
        .count();
    assert_eq!(top1, format!("mrr@1\t{:.6}\n", hits as f64 / groups.len() as f64));

    fs::write(f.p("other.qrels"), "X 0 D0000 1\n").unwrap();
    assert_eq!(code(&["eval", "--run", s(&f.p("bm25.run")), "--qrels", s(&f.p("other.qrels"))]), 2);
    fs::write(f.p("bad.run"), "Q000 Q0 D0001 1 1.0 t\nQ000 Q0 D0002 1 0.5 t\n").unwrap();
    assert_eq!(code(&["eval", "--run", s(&f.p("bad.run")), "--qrels", s(&f.p("syn/qrels.txt"))]), 2);
}

#[test]
fn gradcheck_passes_on_a_short_sequence() {
    let out = ok(&["--seed", "2", "gradcheck", "--seq-len", "12", "--query-len", "3"]);
    assert!(out.trim_end().ends_with("PASS"), "{out}");
    assert_eq!(code(&["gradcheck", "--seq-len", "99"]), 2);
}
