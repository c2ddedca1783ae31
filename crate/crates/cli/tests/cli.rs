use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lungseg::unet::{build_unet, save_weights, UNetConfig};
use lungseg::volume_io::load_bundle;

fn lungseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lungseg")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_owned()
}

const SMALL: [&str; 10] =
    ["--slides", "8", "--height", "64", "--width", "64", "--lesion-radius-min", "2", "--lesion-radius-max", "4"];

/// Small phantom; flags in `extra` replace the defaults of the same name.
fn synth(dir: &Path, name: &str, extra: &[&str]) -> String {
    let out = path(dir, name);
    let mut args = vec!["synth", "--out", &out];
    for pair in SMALL.chunks(2) {
        if !extra.contains(&pair[0]) {
            args.extend_from_slice(pair);
        }
    }
    args.extend_from_slice(extra);
    let o = lungseg(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

fn read_echo(output: &str) -> String {
    fs::read_to_string(format!("{output}.run.txt")).unwrap()
}

fn train_small(dir: &Path, data: &str, name: &str, extra: &[&str]) -> (String, Output) {
    let out = path(dir, name);
    let mut args = vec!["train", "--data", data, "--out", &out, "--input-size", "32", "--depth", "2", "--base-filters", "2"];
    if !extra.contains(&"--max-epochs") {
        args.extend_from_slice(&["--max-epochs", "2"]);
    }
    args.extend_from_slice(extra);
    let o = lungseg(&args);
    (out, o)
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "a", &["--seed", "7"]);
    let b = synth(dir.path(), "b", &["--seed", "7"]);
    for f in ["manifest.txt", "ct.raw", "lung.raw", "covid.raw"] {
        assert_eq!(fs::read(Path::new(&a).join(f)).unwrap(), fs::read(Path::new(&b).join(f)).unwrap(), "{f}");
    }
    assert!(read_echo(&a).contains("seed=7\n"));
    // The echo file sits beside the bundle, not inside it.
    assert_eq!(fs::read_dir(&a).unwrap().count(), 4);
}

#[test]
fn synth_usage_and_spec_errors() {
    let o = lungseg(&["synth", "--slides", "4"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--out"));

    let dir = tempfile::tempdir().unwrap();
    let out = path(dir.path(), "x");
    let o = lungseg(&["synth", "--out", &out, "--height", "64", "--width", "64", "--lesion-radius-max", "40"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("infeasible phantom spec"), "{}", stderr(&o));
}

#[test]
fn train_and_retrain_protocol() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "ph", &[]);
    let (w, o) = train_small(dir.path(), &data, "w.bin", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let history = fs::read_to_string(format!("{w}.history.csv")).unwrap();
    assert!(history.starts_with("epoch,train_loss,val_loss,val_f1\n"));
    assert!(history.lines().count() >= 2);
    let echo = read_echo(&w);
    assert!(echo.contains("lr=0.0001\n") && echo.contains("batch=45\n"), "{echo}");

    let out = path(dir.path(), "w2.bin");
    let o = lungseg(&["retrain", "--data", &data, "--out", &out, "--input-size", "32", "--max-epochs", "3", "--weights", &w]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let records = fs::read_to_string(format!("{out}.history.csv")).unwrap().lines().count() - 1;
    assert!((1..=3).contains(&records));
    let echo = read_echo(&out);
    assert!(echo.contains("max_epochs=3\n"));
    assert!(echo.contains(&format!("training_epochs_consumed={}\n", 2 + records)), "{echo}");

    let o = lungseg(&["retrain", "--data", &data, "--out", &out]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--weights"));
}

#[test]
fn retrain_defaults_to_fifty_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "ph", &[]);
    let (w, o) = train_small(dir.path(), &data, "w.bin", &["--max-epochs", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    // Patience 1 keeps the run short; the echo records the default budget.
    let out = path(dir.path(), "r.bin");
    let o = lungseg(&["retrain", "--data", &data, "--out", &out, "--input-size", "32", "--weights", &w, "--patience", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(read_echo(&out).contains("max_epochs=50\n"));
}

#[test]
fn training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "ph", &[]);
    let (a, _) = train_small(dir.path(), &data, "a.bin", &["--seed", "3"]);
    let (b, _) = train_small(dir.path(), &data, "b.bin", &["--seed", "3"]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(fs::read(format!("{a}.history.csv")).unwrap(), fs::read(format!("{b}.history.csv")).unwrap());
}

/// Weights whose head bias drowns every activation: predicts background.
fn background_weights(dir: &Path) -> PathBuf {
    let mut m = build_unet(&UNetConfig::new(1, 1, 32), 0).unwrap();
    for t in &mut m.tensors {
        if t.name.starts_with("head") {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    m.tensors.last_mut().unwrap().data[0] = -20.0;
    let p = dir.join("oracle.bin");
    save_weights(&m, &p).unwrap();
    p
}

fn parse_rows(report: &str) -> Vec<Vec<String>> {
    report.lines().skip(1).map(|l| l.split(',').map(str::to_owned).collect()).collect()
}

#[test]
fn evaluate_oracle_fixture_and_f1_modes() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "clean", &["--covid-fraction", "0"]);
    let w = background_weights(dir.path());
    let w = w.to_str().unwrap();

    let std_out = path(dir.path(), "std.csv");
    let o = lungseg(&["evaluate", "--data", &data, "--weights", w, "--out", &std_out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = parse_rows(&fs::read_to_string(&std_out).unwrap());
    assert_eq!(rows.len(), 8 + 2);
    for r in &rows {
        assert_eq!(&r[6..], ["1.000000"; 4], "{r:?}");
    }

    let paper_out = path(dir.path(), "paper.csv");
    let o = lungseg(&["evaluate", "--data", &data, "--weights", w, "--out", &paper_out, "--f1-formula", "paper"]);
    assert_eq!(code(&o), 0);
    let paper = parse_rows(&fs::read_to_string(&paper_out).unwrap());
    for (s, p) in rows.iter().zip(&paper) {
        // Precision equals recall on every row, so the literal formula halves F1.
        assert_eq!(s[7], s[8]);
        let (fs_, fp): (f64, f64) = (s[9].parse().unwrap(), p[9].parse().unwrap());
        assert_eq!(fp, fs_ / 2.0);
    }

    let o = lungseg(&["evaluate", "--data", &data, "--weights", &path(dir.path(), "missing.bin"), "--out", &std_out]);
    assert_eq!(code(&o), 1);
}

#[test]
fn export3d_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "one", &["--slides", "1", "--covid-fraction", "0"]);
    let lung_pixels = load_bundle(&data).unwrap().lung_masks().as_slice().iter().filter(|&&v| v == 1).count();

    let out = path(dir.path(), "ct.csv");
    let o = lungseg(&["export3d", "--data", &data, "--kind", "ct", "--out", &out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("x,y,z,value\n"));
    assert_eq!(text.lines().count() - 1, lung_pixels);

    let o = lungseg(&["export3d", "--data", &data, "--kind", "prediction", "--out", &out]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--weights"));

    let o = lungseg(&["export3d", "--data", &data, "--z-step", "0", "--out", &out]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("invalid argument"), "{}", stderr(&o));

    let w = background_weights(dir.path());
    let o = lungseg(&["export3d", "--data", &data, "--kind", "prediction", "--weights", w.to_str().unwrap(), "--out", &out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&out).unwrap(), "x,y,z,value\n");
}

#[test]
fn qa_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let clean = synth(dir.path(), "clean", &[]);
    let o = lungseg(&["qa", "--data", &clean]);
    assert_eq!(code(&o), 0);
    assert!(o.stdout.is_empty());

    let bad = synth(dir.path(), "bad", &["--inject-outside-lung", "5:3"]);
    let o = lungseg(&["qa", "--data", &bad]);
    assert_eq!(code(&o), 2);
    assert_eq!(String::from_utf8(o.stdout).unwrap(), "covid_outside_lung,phantom,5,3\n");

    fs::write(Path::new(&clean).join("ct.raw"), [0u8; 3]).unwrap();
    let o = lungseg(&["qa", "--data", &clean]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("corrupt bundle"), "{}", stderr(&o));
}

#[test]
fn split_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "ph", &[]);
    let out = path(dir.path(), "split.csv");
    let run = || lungseg(&["split", "--data", &data, "--train", "4", "--val", "2", "--split-seed", "5", "--out", &out, "--input-size", "32"]);
    assert_eq!(code(&run()), 0);
    let first = fs::read_to_string(&out).unwrap();
    assert_eq!(code(&run()), 0);
    assert_eq!(fs::read_to_string(&out).unwrap(), first);
    let parts: Vec<&str> = first.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
    assert_eq!(parts.iter().filter(|p| **p == "train").count(), 4);
    assert_eq!(parts.iter().filter(|p| **p == "validation").count(), 2);
    assert_eq!(parts.iter().filter(|p| **p == "test").count(), 2);

    let (w, o) = train_small(dir.path(), &data, "w.bin", &["--split", &out, "--max-epochs", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = path(dir.path(), "test.csv");
    let o = lungseg(&["evaluate", "--data", &data, "--weights", &w, "--split", &out, "--out", &report]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&report).unwrap().lines().count(), 1 + 2 + 2);
}
