use std::fs;
use std::path::Path;
use std::process::Command;

use race::corpus::{self, PreparedRecord};
use race::pipeline::{load_model, ExemplarLine, Provenance, Workdir};
use race::synth;

const TINY: &[&str] = &[
    "--set",
    "ret_d_model=16",
    "--set",
    "ret_heads=2",
    "--set",
    "ret_ffn_dim=32",
    "--set",
    "ret_epochs=3",
    "--set",
    "gen_d_model=16",
    "--set",
    "gen_heads=2",
    "--set",
    "gen_ffn_dim=32",
    "--set",
    "gen_epochs=2",
    "--set",
    "batch_size=8",
    "--set",
    "lr=1e-3",
    "--set",
    "warmup_steps=5",
];

fn race(workdir: &Path, args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_race"))
        .arg("--workdir")
        .arg(workdir)
        .args(TINY)
        .args(args)
        .output()
        .expect("binary runs");
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn ok(workdir: &Path, args: &[&str]) {
    let (code, err) = race(workdir, args);
    assert_eq!(code, 0, "race {args:?} failed: {err}");
}

/// Runs the stages up to exemplar retrieval on a 32-commit toy corpus.
fn staged(dir: &Path) -> std::path::PathBuf {
    let wd = dir.join("w");
    let corpus_path = dir.join("toy.jsonl");
    corpus::write_corpus(&corpus_path, &synth::toy_corpus(32, 1)).unwrap();
    ok(&wd, &["preprocess", "--corpus", corpus_path.to_str().unwrap()]);
    ok(&wd, &["vocab"]);
    ok(&wd, &["train-retriever"]);
    ok(&wd, &["index"]);
    ok(&wd, &["retrieve", "--split", "train", "--exclude-self", "--k", "3"]);
    ok(&wd, &["retrieve", "--split", "test", "--k", "3"]);
    wd
}

#[test]
fn missing_corpus_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let (code, err) = race(&dir.path().join("w"), &["preprocess", "--corpus", "/nonexistent/corpus.jsonl"]);
    assert_eq!(code, 2);
    assert!(err.contains("\"event\":\"error\""));
}

#[test]
fn bad_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _) = race(dir.path(), &["--set", "no_such_key=1", "vocab"]);
    assert_eq!(code, 2);
}

#[test]
fn diverging_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let wd = dir.path().join("w");
    let corpus_path = dir.path().join("toy.jsonl");
    corpus::write_corpus(&corpus_path, &synth::toy_corpus(16, 2)).unwrap();
    ok(&wd, &["preprocess", "--corpus", corpus_path.to_str().unwrap()]);
    ok(&wd, &["vocab"]);
    let (code, err) = race(&wd, &["--set", "lr=1e38", "--set", "warmup_steps=0", "--set", "ret_epochs=5", "train-retriever"]);
    assert_eq!(code, 3, "{err}");
}

#[test]
fn staged_run_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let wd_path = staged(dir.path());
    let wd = Workdir::new(&wd_path);

    // Retriever: one loss line per epoch, loss goes down.
    let log = fs::read_to_string(wd.retriever_log()).unwrap();
    let losses: Vec<f64> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["loss"].as_f64().unwrap())
        .collect();
    assert_eq!(losses.len(), 3);
    assert!(losses[2] < losses[0]);

    // Rerunning a stage reproduces its outputs byte for byte.
    let ckpt = fs::read(wd.retriever()).unwrap();
    ok(&wd_path, &["train-retriever"]);
    assert_eq!(fs::read(wd.retriever()).unwrap(), ckpt);
    assert_eq!(fs::read_to_string(wd.retriever_log()).unwrap(), log);

    let lines: Vec<ExemplarLine> = corpus::read_jsonl(&wd.exemplars("train")).unwrap();
    assert!(lines.iter().all(|l| l.exemplars.len() == 3 && l.exemplars.iter().all(|e| e.id != l.id)));

    // Ablation checkpoint has no guider parameters.
    ok(&wd_path, &["train-generator", "--no-guider"]);
    let (m, _) = load_model(&wd.generator()).unwrap();
    assert!(!m.params.contains("guider.w") && !m.params.contains("guider.b"));

    // k = 3 plumbs three exemplars through to the model and provenance.
    ok(&wd_path, &["train-generator", "--k", "3"]);
    let (m, _) = load_model(&wd.generator()).unwrap();
    assert_eq!(m.config().num_exemplars, 3);
    assert!(m.params.contains("guider.w"));
    ok(&wd_path, &["generate", "--split", "test"]);
    let prov: Vec<Provenance> = corpus::read_jsonl(&wd.provenance("test")).unwrap();
    assert!(!prov.is_empty());
    for p in &prov {
        assert_eq!(p.exemplar_ids.len(), 3);
        assert_eq!(p.lambdas.len(), 3);
        assert!(p.lambdas.iter().all(|&l| l > 0.0 && l < 1.0));
    }
    assert!(!wd.hypotheses("test", "nngen").exists());
    assert!(!wd.report("test", "tfidf").exists());

    let hyps = fs::read(wd.hypotheses("test", "race")).unwrap();
    ok(&wd_path, &["generate", "--split", "test", "--baselines"]);
    assert_eq!(fs::read(wd.hypotheses("test", "race")).unwrap(), hyps);
    assert!(wd.hypotheses("test", "nngen").exists() && wd.report("test", "tfidf").exists());

    // Standalone eval matches the report written by generate.
    let out = wd_path.join("again.json");
    ok(
        &wd_path,
        &[
            "eval",
            "--hyps",
            wd.hypotheses("test", "race").to_str().unwrap(),
            "--refs",
            wd.split("test").to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
    );
    assert_eq!(fs::read(&out).unwrap(), fs::read(wd.report("test", "race")).unwrap());
}

#[test]
fn exemplar_id_mismatch_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let wd_path = staged(dir.path());
    let wd = Workdir::new(&wd_path);
    // Test-split exemplars do not cover the training ids.
    let (code, err) = race(
        &wd_path,
        &["train-generator", "--exemplars", wd.exemplars("test").to_str().unwrap()],
    );
    assert_eq!(code, 2, "{err}");
    let train: Vec<PreparedRecord> = corpus::read_jsonl(&wd.split("train")).unwrap();
    assert!(!train.is_empty());
}

#[test]
fn synth_writes_loadable_corpora() {
    let dir = tempfile::tempdir().unwrap();
    let toy = dir.path().join("toy.jsonl");
    ok(dir.path(), &["synth", "toy", "--out", toy.to_str().unwrap(), "--n", "10"]);
    assert_eq!(corpus::load_corpus(&toy, true).unwrap().len(), 10);
    let ex = dir.path().join("ex.jsonl");
    let wd = dir.path().join("w");
    ok(&wd, &["synth", "exemplar", "--out", ex.to_str().unwrap(), "--n", "20", "--prepare"]);
    assert_eq!(corpus::load_corpus(&ex, true).unwrap().len(), 40);
    let test: Vec<PreparedRecord> = corpus::read_jsonl(&Workdir::new(&wd).split("test")).unwrap();
    assert_eq!(test.len(), 4);
}
