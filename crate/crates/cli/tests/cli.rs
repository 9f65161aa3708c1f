use std::path::Path;
use std::process::{Command, Output};

fn searchrel(work: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_searchrel"))
        .arg("--work-dir")
        .arg(work)
        .args(args)
        .env_remove("SEARCHREL_CONFIG")
        .env_remove("SEARCHREL_LISTEN")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn no_arguments_prints_usage() {
    let o = Command::new(env!("CARGO_BIN_EXE_searchrel")).output().unwrap();
    assert!(!o.status.success());
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn unknown_subcommand_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = searchrel(dir.path(), &["frobnicate"]);
    assert!(!o.status.success());
}

#[test]
fn missing_checkpoint_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = searchrel(dir.path(), &["eval", "--student", "nowhere/student.json"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.starts_with("error: "), "{err}");
    assert!(err.contains("nowhere/student.json"), "{err}");
}

#[test]
fn bad_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"sed": 1}"#).unwrap();
    let o = searchrel(dir.path(), &["--config", cfg.to_str().unwrap(), "build-index"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("c.json"));
}

#[test]
fn generate_ingest_and_index() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    let o = searchrel(w, &["--seed", "3", "synth-gen", "--n-queries", "30", "--n-pins", "80"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = searchrel(w, &["--seed", "3", "ingest"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = searchrel(w, &["--seed", "3", "build-index"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["corpus/pins.jsonl", "corpus/queries.jsonl", "corpus/vocab.jsonl", "index.json"] {
        assert!(w.join(f).is_file(), "{f}");
    }
    let pins = std::fs::read_to_string(w.join("corpus/pins.jsonl")).unwrap();
    assert_eq!(pins.lines().count(), 80);
}
