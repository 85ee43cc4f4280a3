use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn see(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_see"))
        .current_dir(cwd)
        .env_remove("SEE_ADAPTER_ENDPOINT")
        .args(args)
        .output()
        .expect("see binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const MOCK: &str = r#"
seeds = [0, 1]

[cets.UCE]
kind = "mock"
scope = "subtree"

[corpus]
objects = ["cup", "bowl", "fork"]
"#;

fn only_run_dir(runs: &Path) -> PathBuf {
    let dirs: Vec<_> = std::fs::read_dir(runs).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs[0].clone()
}

#[test]
fn gen_corpus_writes_5056_prompts() {
    let dir = tempfile::tempdir().unwrap();
    let o = see(dir.path(), &["gen-corpus", "--out", "corpus"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("corpus/corpus.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 5056);
    assert!(stdout(&o).contains("5056"));
}

#[test]
fn run_then_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), MOCK).unwrap();
    let o = see(dir.path(), &["run", "--config", "run.toml", "--dimension", "neighbors"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let run = only_run_dir(&dir.path().join("runs"));
    for f in ["manifest.json", "records.jsonl", "summary.csv"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let id = run.file_name().unwrap().to_str().unwrap().to_string();
    assert!(id.starts_with("neighbors-"));

    let o = see(dir.path(), &["report", "--run", &id, "--format", "csv"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let accuracy = std::fs::read_to_string(run.join("report/accuracy_preserve.csv")).unwrap();
    assert_eq!(accuracy.lines().next().unwrap(), "model,CLIP,QWEN2.5VL,BLIP,Florence-2-base");

    // re-rendering gives identical bytes
    for format in ["md", "plots"] {
        let first = see(dir.path(), &["report", "--run", &id, "--format", format]);
        assert_eq!(first.status.code(), Some(0), "{}", stderr(&first));
        let paths: Vec<PathBuf> = stdout(&first).lines().map(|l| dir.path().join(l)).collect();
        assert!(!paths.is_empty());
        let before: Vec<Vec<u8>> = paths.iter().map(|p| std::fs::read(p).unwrap()).collect();
        let again = see(dir.path(), &["report", "--run", run.to_str().unwrap(), "--format", format]);
        assert_eq!(again.status.code(), Some(0));
        let after: Vec<Vec<u8>> = paths.iter().map(|p| std::fs::read(p).unwrap()).collect();
        assert_eq!(before, after, "{format} report changed between renders");
    }
}

#[test]
fn config_errors_exit_1_with_the_key() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[verfier]\nids = [\"CLIP\"]\n").unwrap();
    let o = see(dir.path(), &["run", "--config", "bad.toml", "--dimension", "neighbors"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("verifier"), "{}", stderr(&o));

    let o = see(dir.path(), &["run", "--config", "missing.toml", "--dimension", "neighbors"]);
    assert_eq!(o.status.code(), Some(1));

    let o = see(dir.path(), &["report", "--run", "nope", "--format", "md"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no run `nope`"), "{}", stderr(&o));
}

#[test]
fn external_backend_without_endpoint_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("ext.toml"), "[backend]\nkind = \"external\"\n").unwrap();
    let o = see(dir.path(), &["run", "--config", "ext.toml", "--dimension", "neighbors"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("SEE_ADAPTER_ENDPOINT"), "{}", stderr(&o));
}

#[test]
fn partial_backend_failure_exits_2_and_keeps_results() {
    if Command::new("python3").arg("--version").output().is_err() {
        eprintln!("python3 not available, skipping");
        return;
    }
    let adapter = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data/fake_adapter.py");
    let dir = tempfile::tempdir().unwrap();
    let toml = format!(
        r#"
[backend]
kind = "external"
base_model = "fake-t2i"
command = ["python3", "{}"]

[cets.Ext]
kind = "external"
settings = {{ strength = 1.0 }}

[verifier]
ids = ["CLIP"]

[corpus]
objects = ["cup", "bowl"]
"#,
        adapter.display()
    );
    std::fs::write(dir.path().join("ext.toml"), toml).unwrap();
    let o = see(dir.path(), &["run", "--config", "ext.toml", "--dimension", "neighbors"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("sampler diverged"), "{}", stderr(&o));
    let run = only_run_dir(&dir.path().join("runs"));
    assert_eq!(std::fs::read_to_string(run.join("gaps.jsonl")).unwrap().lines().count(), 2);
    assert!(run.join("summary.csv").is_file());
}

#[test]
fn unknown_dimension_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = see(dir.path(), &["run", "--config", "x.toml", "--dimension", "fidelity"]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("neighbors"));
}
