use std::path::Path;
use std::process::{Command, Output};

fn s3sharp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_s3sharp"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = s3sharp(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn small_scene(dir: &Path, name: &str, seed: &str) {
    ok(
        dir,
        &["synth", "--out", name, "--size", "32x32", "--window", "7", "--shift", "2,0", "--seed", seed, "--pair"],
    );
}

#[test]
fn synth_writes_scene_directory() {
    let dir = tempfile::tempdir().unwrap();
    small_scene(dir.path(), "a", "1");
    for f in ["scene.json", "p0.raw", "m1.raw", "p1.raw", "m2.raw", "aligned_ms0.raw"] {
        assert!(dir.path().join("a").join(f).exists(), "missing {f}");
    }
}

#[test]
fn loss_prints_three_terms() {
    let dir = tempfile::tempdir().unwrap();
    small_scene(dir.path(), "a", "1");
    let text = ok(
        dir.path(),
        &["loss", "--g", "a/m1.raw", "--ms", "a/m1.raw", "--pan", "a/p1.raw", "--window", "7"],
    );
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("l_c,l_a,l_s3"));
    let v: Vec<f64> = lines.next().unwrap().split(',').map(|c| c.parse().unwrap()).collect();
    assert_eq!(v.len(), 3);
    assert_eq!(v[2], v[0] + v[1]);
}

#[test]
fn no_corr_map_never_lowers_the_spectral_term() {
    let dir = tempfile::tempdir().unwrap();
    small_scene(dir.path(), "a", "1");
    small_scene(dir.path(), "b", "2");
    let base = ["loss", "--g", "b/m1.raw", "--ms", "a/m1.raw", "--pan", "a/p1.raw", "--window", "7"];
    let parse = |t: String| -> Vec<f64> { t.lines().nth(1).unwrap().split(',').map(|c| c.parse().unwrap()).collect() };
    let with = parse(ok(dir.path(), &base));
    let mut args = base.to_vec();
    args.push("--no-corr-map");
    let without = parse(ok(dir.path(), &args));
    assert!(without[0] >= with[0]);
}

#[test]
fn eval_writes_metric_table() {
    let dir = tempfile::tempdir().unwrap();
    small_scene(dir.path(), "a", "1");
    small_scene(dir.path(), "b", "2");
    let text = ok(dir.path(), &["eval", "--scene", "a", "--scene", "b", "--g0", "aligned_ms0.raw", "--max-shift", "2"]);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "scene,ergas1,scc1,scc0,n_ergas1");
    assert!(lines[1].starts_with("a,"));
    assert!(lines[3].starts_with("mean,"));
    assert!(lines[4].starts_with("stderr,"));
}

#[test]
fn missing_input_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = s3sharp(dir.path(), &["degrade", "--input", "nope.raw", "--out", "x.raw"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error[io]"), "{err}");
    assert!(err.contains("nope."), "{err}");
}

#[test]
fn bad_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    small_scene(dir.path(), "a", "1");
    std::fs::write(dir.path().join("t.toml"), "iterations = \"many\"\n").unwrap();
    let out = s3sharp(dir.path(), &["train-toy", "--config", "t.toml", "--scene", "a", "--out", "m.params"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error[config]") && err.contains("t.toml"), "{err}");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = s3sharp(dir.path(), &["corr-map", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[usage]"));
}

#[test]
fn help_lists_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(dir.path(), &["loss", "--help"]);
    assert!(text.contains("[default: 31]"));
    assert!(text.contains("[default: 4]"));
    assert!(text.contains("--no-corr-map"));
}

#[test]
fn report_summarizes_tables() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("t.csv"), "scene,x\na,1\nb,3\nmean,2\nstderr,1\n").unwrap();
    let text = ok(dir.path(), &["report", "--input", "t.csv"]);
    assert_eq!(text, "source,column,n,mean,stderr\nt.csv,x,2,2.000000,1.000000\n");
}
