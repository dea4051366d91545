use std::path::Path;
use std::process::{Command, Output};

fn apa(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_apa"))
        .args(args)
        .current_dir(cwd)
        .env_remove("APA_CONFIG")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn selftest_passes_without_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let out = apa(&["selftest"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("checks passed"), "{text}");
}

#[test]
fn failures_have_exit_codes_and_categories() {
    let dir = tempfile::tempdir().unwrap();
    let out = apa(
        &["edit", "--base", "missing.ckpt", "--adapter", "missing.ckpt", "--input", "x", "--task", "timbre", "--target", "bright", "--out", "y"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error[io]"), "{}", stderr(&out));
    assert_eq!(stderr(&out).lines().count(), 1);

    let out = apa(&["gen-data", "--bogus"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).starts_with("error[usage]"));
    assert_eq!(apa(&["frobnicate"], dir.path()).status.code(), Some(2));

    std::fs::write(dir.path().join("bad.toml"), "seed = 1\nsede = 2\n").unwrap();
    let out = apa(&["--config", "bad.toml", "gen-data", "--out", "d.bin"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error[config]"), "{}", stderr(&out));

    let out = Command::new(env!("CARGO_BIN_EXE_apa"))
        .args(["gen-data", "--out", "d.bin"])
        .current_dir(dir.path())
        .env("APA_CONFIG", "bad.toml")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "config path comes from the environment");
}

#[test]
fn gen_data_is_reproducible_and_records_its_config() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a.bin", "b.bin"] {
        let out = apa(&["gen-data", "--n", "64", "--seed", "7", "--out", name], dir.path());
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    }
    let a = std::fs::read(dir.path().join("a.bin")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.bin")).unwrap());
    let record = std::fs::read_to_string(dir.path().join("a.bin.run.toml")).unwrap();
    assert!(record.contains("seed = 7"));
    assert!(record.contains("clips = 64"));
    assert!(record.contains("dataset_format_version = 1"));
    assert_eq!(apa_core::synthdata::read_dataset(dir.path().join("a.bin")).unwrap().len(), 64);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), "seed = 3\n[data]\nclips = 5\n").unwrap();
    let out = apa(&["--config", "run.toml", "gen-data", "--out", "a.bin"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(apa_core::synthdata::read_dataset(dir.path().join("a.bin")).unwrap().len(), 5);
    let out = apa(&["--config", "run.toml", "--seed", "4", "gen-data", "--n", "6", "--out", "b.bin"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let record = std::fs::read_to_string(dir.path().join("b.bin.run.toml")).unwrap();
    assert!(record.contains("seed = 4") && record.contains("clips = 6"), "{record}");
}
