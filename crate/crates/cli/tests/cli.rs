use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn deepsd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deepsd")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = deepsd(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    deepsd(dir, args).status.code().unwrap()
}

/// Relative path -> contents for every file under `root`.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

const SMALL: &[&str] = &["--rows", "48", "--cols", "64"];

fn synth_small(dir: &Path, out: &str, days: &str) {
    let mut args = vec!["synth", "--days", days, "--seed", "7", "--out", out];
    args.extend_from_slice(SMALL);
    ok(dir, &args);
}

#[test]
fn synth_twice_is_byte_identical() {
    let t = tempfile::tempdir().unwrap();
    synth_small(t.path(), "a", "40");
    synth_small(t.path(), "b", "40");
    let (a, b) = (tree(&t.path().join("a")), tree(&t.path().join("b")));
    assert_eq!(a.len(), 40 + 3); // days, manifest, elevation, provenance
    assert_eq!(a, b);
}

#[test]
fn train_writes_checkpoint_and_loss_rows() {
    let t = tempfile::tempdir().unwrap();
    synth_small(t.path(), "data", "10");
    ok(
        t.path(),
        &[
            "train", "--precip", "data/precip", "--elevation", "data/elevation.grd", "--iterations", "500", "--batch",
            "2", "--patch", "21", "--stride", "10", "--n1", "8", "--n2", "4", "--out", "model",
        ],
    );
    let m = t.path().join("model");
    assert!(fs::metadata(m.join("level1.src")).unwrap().len() > 0);
    let csv = fs::read_to_string(m.join("level1_loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 500);
    assert_eq!(csv.lines().next(), Some("iteration,loss"));
    let prov: serde_json::Value = serde_json::from_slice(&fs::read(m.join("provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["command"], "train");
    assert_eq!(prov["settings"]["iterations"], "500");
}

#[test]
fn evaluate_identity_reports_perfect_scores() {
    let t = tempfile::tempdir().unwrap();
    synth_small(t.path(), "data", "30");
    ok(t.path(), &["evaluate", "--obs", "data/precip", "--pred", "data/precip", "--min-events", "2", "--out", "ev"]);
    let report = fs::read_to_string(t.path().join("ev/report.csv")).unwrap();
    let all = report.lines().find(|l| l.starts_with("all,")).unwrap();
    let f: Vec<&str> = all.split(',').collect();
    assert_eq!((f[2], f[3], f[4], f[5]), ("0.000000", "1.000000", "0.000000", "1.000000"));
    for line in report.lines().filter(|l| l.starts_with("extreme,")) {
        let f: Vec<&str> = line.split(',').collect();
        if !f[4].is_empty() {
            assert_eq!((f[4], f[5]), ("0.000000", "1.000000"), "{line}");
        }
    }
}

#[test]
fn exit_codes_separate_failure_classes() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    assert_eq!(code(d, &["frobnicate"]), 1);
    assert_eq!(code(d, &["train", "--out", "x"]), 1);
    assert_eq!(code(d, &["synth", "--threads", "0"]), 1);
    assert_eq!(code(d, &["synth", "--rows", "7"]), 1);
    assert_eq!(code(d, &["bcsd", "--train", "a", "--model", "b"]), 1);
    assert_eq!(code(d, &["infer", "--stack", "missing.txt", "--input", "missing"]), 2);
    assert_eq!(code(d, &["benchmark", "--stack", "missing.txt", "--input", "missing"]), 2);
    assert_eq!(code(d, &["--help"]), 0);

    synth_small(d, "data", "4");
    fs::write(d.join("stack.txt"), "elevation data/elevation.grd\nlevel 2 nowhere.src\n").unwrap();
    ok(d, &["coarsen", "--input", "data/precip", "--factor", "2", "--out", "lr"]);
    assert_eq!(code(d, &["benchmark", "--stack", "stack.txt", "--input", "lr/precip", "--out", "bm"]), 2);
    fs::write(d.join("bad.grd"), b"NOPE").unwrap();
    assert_eq!(code(d, &["coarsen", "--input", "bad.grd", "--factor", "2", "--out", "c"]), 2);

    let diverge = [
        "train", "--precip", "data/precip", "--elevation", "data/elevation.grd", "--iterations", "200", "--batch", "2",
        "--patch", "21", "--stride", "10", "--n1", "4", "--n2", "2", "--lr1", "1e6", "--lr2", "1e6", "--lr3", "1e6",
        "--out", "div",
    ];
    let out = deepsd(d, &diverge);
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.lines().filter(|l| l.starts_with("deepsd:")).count(), 1);
}

#[test]
fn config_file_is_overridden_by_flags_and_checked() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    fs::write(d.join("run.cfg"), "# small run\ndays = 3\nrows = 16\ncols = 16\nseed = 5\n").unwrap();
    ok(d, &["synth", "--config", "run.cfg", "--days", "2", "--out", "s"]);
    let prov: serde_json::Value = serde_json::from_slice(&fs::read(d.join("s/provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["settings"]["days"], "2");
    assert_eq!(prov["settings"]["rows"], "16");
    assert_eq!(prov["seed"], 5);
    assert_eq!(tree(&d.join("s/precip")).len(), 3);

    fs::write(d.join("typo.cfg"), "dayz = 3\n").unwrap();
    assert_eq!(code(d, &["synth", "--config", "typo.cfg", "--out", "z"]), 1);
    assert!(!d.join("z").exists(), "nothing is written before validation");
    fs::write(d.join("junk.cfg"), "this is not a config\n").unwrap();
    assert_eq!(code(d, &["synth", "--config", "junk.cfg", "--out", "z"]), 2);
}

#[test]
fn outputs_stay_inside_the_output_directory() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    synth_small(d, "data", "40");
    let before = tree(d);
    ok(d, &["coarsen", "--input", "data/precip", "--factor", "8", "--out", "lr"]);
    ok(d, &["bcsd", "--train", "data/precip", "--input", "lr/precip", "--out", "bcsd"]);
    fs::write(d.join("locs.txt"), "3 4\n40 60\n").unwrap();
    ok(d, &["asd", "--train", "data/precip", "--input", "lr/precip", "--locations", "locs.txt", "--rain-threshold", "0.1", "--out", "asd"]);
    let after = tree(d);
    for path in after.keys().filter(|p| !before.contains_key(*p)) {
        let top = path.components().next().unwrap().as_os_str().to_str().unwrap();
        assert!(["lr", "bcsd", "asd", "locs.txt"].contains(&top), "stray output {}", path.display());
    }
    assert!(after.contains_key(Path::new("bcsd/model/bcsd.json")));
    assert_eq!(fs::read_to_string(d.join("asd/predictions.csv")).unwrap().lines().count(), 1 + 40 * 2);
}
