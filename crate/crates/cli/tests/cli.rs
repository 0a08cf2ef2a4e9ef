use std::path::Path;
use std::process::{Command, Output};

use specdet::model::{load_checkpoint, DetectorModel, PipelineConfig};

fn specdet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_specdet"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn corpus(dir: &Path) {
    ok(&specdet(&["synth", "--out", "corpus", "--per-domain", "40", "--seed", "1"], dir));
}

const SPLIT: [&str; 10] = [
    "--manifest",
    "corpus/manifest.json",
    "--held-out",
    "d3",
    "--train-cap",
    "60",
    "--valid-cap",
    "20",
    "--test-cap",
    "40",
];

#[test]
fn synth_output_validates() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    let out = ok(&specdet(&["validate", "corpus/d0_human.mgpr", "corpus/d3_machine.mgpr"], dir.path()));
    assert_eq!(out.lines().count(), 2);
    assert!(out.lines().all(|l| l.ends_with("ok, 20 records")));
}

#[test]
fn corrupt_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    let p = dir.path().join("corpus/d0_human.mgpr");
    let mut bytes = std::fs::read(&p).unwrap();
    bytes.truncate(bytes.len() - 5);
    std::fs::write(dir.path().join("bad.mgpr"), bytes).unwrap();
    let out = specdet(&["validate", "bad.mgpr"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_flag_is_a_usage_error_naming_the_token() {
    let dir = tempfile::tempdir().unwrap();
    let out = specdet(&["train", "--out", "x", "--learning-rate", "1"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--learning-rate"));
    let out = specdet(&["train", "--out", "x", "--band-keep", "low"], dir.path());
    assert_eq!(out.status.code(), Some(1), "band-keep without --no-lff");
}

#[test]
fn zero_epochs_saves_the_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    let mut args = vec!["train", "--epochs", "0", "--out", "run", "--no-fsr"];
    args.extend(SPLIT);
    ok(&specdet(&args, dir.path()));
    let (model, opt) = load_checkpoint(&dir.path().join("run/model.ckpt")).unwrap();
    assert!(opt.is_none());
    let expected = DetectorModel::new(64, PipelineConfig::with_modules(true, false, true)).unwrap();
    assert_eq!(model, expected);
    let history = std::fs::read_to_string(dir.path().join("run/history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 1);
    assert!(history.starts_with("{\"config\":"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    std::fs::write(dir.path().join("run.cfg"), "epochs=1\nxi=3.5\nlr=0.5\n").unwrap();
    let mut args = vec!["train", "--config", "run.cfg", "--lr", "0.0001", "--out", "run"];
    args.extend(SPLIT);
    ok(&specdet(&args, dir.path()));
    let history = std::fs::read_to_string(dir.path().join("run/history.jsonl")).unwrap();
    let header: serde_json::Value = serde_json::from_str(history.lines().next().unwrap()).unwrap();
    assert_eq!(header["config"]["lr"], "0.0001");
    assert_eq!(header["config"]["xi"], "3.5");
    assert_eq!(history.lines().count(), 2);

    std::fs::write(dir.path().join("bad.cfg"), "epoch=1\n").unwrap();
    let mut args = vec!["train", "--config", "bad.cfg", "--out", "run2"];
    args.extend(SPLIT);
    assert_eq!(specdet(&args, dir.path()).status.code(), Some(1));
}

#[test]
fn train_evaluate_and_dump() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    let mut args = vec!["train", "--epochs", "2", "--xi", "200", "--out", "run"];
    args.extend(SPLIT);
    ok(&specdet(&args, dir.path()));
    let mut args = vec!["evaluate", "--checkpoint", "run/model.ckpt", "--stats", "run/stats.txt"];
    args.extend(SPLIT);
    let report: serde_json::Value = serde_json::from_str(&ok(&specdet(&args, dir.path()))).unwrap();
    let f1 = report["report"]["f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f1));
    assert_eq!(report["config"]["fsr_inference"], "batch");

    let csv = ok(&specdet(
        &[
            "dump-features",
            "--checkpoint",
            "run/model.ckpt",
            "--stats",
            "run/stats.txt",
            "--input",
            "corpus/d3_human.mgpr",
        ],
        dir.path(),
    ));
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 21);
    let header: Vec<&str> = rows[0].split(',').collect();
    assert_eq!(header.len(), 5 + 64 + 3);
    for row in &rows[1..] {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells.len(), header.len());
        // LFF zeroes the low band
        assert_eq!(cells[header.len() - 3], "0.0");
    }
}

#[test]
fn theme_shift_csv_has_zero_mid_and_high() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    let csv = ok(&specdet(
        &["mae-shift", "--input", "corpus/d1_machine.mgpr", "--kind", "theme_shift"],
        dir.path(),
    ));
    let mut lines = csv.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    for col in ["mean_mid", "mean_high", "median_mid", "median_high"] {
        let i = header.iter().position(|h| *h == col).unwrap();
        assert_eq!(row[i].parse::<f64>().unwrap(), 0.0, "{col}");
    }
    let i = header.iter().position(|h| *h == "mean_low").unwrap();
    assert!(row[i].parse::<f64>().unwrap() > 0.0);
}

#[test]
fn perturb_writes_a_valid_corpus() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    ok(&specdet(
        &["perturb", "--input", "corpus/d0_machine.mgpr", "--kind", "token_delete", "--seed", "4", "--out", "p.mgpr"],
        dir.path(),
    ));
    ok(&specdet(&["validate", "p.mgpr"], dir.path()));
    let echo = std::fs::read_to_string(dir.path().join("p.mgpr.config")).unwrap();
    assert!(echo.contains("# rate=0.15"));
    assert!(echo.contains("# seed=4"));
}

#[test]
fn stats_and_ablate_run() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    let mut args = vec!["stats", "--out", "stats.txt"];
    args.extend(SPLIT);
    ok(&specdet(&args, dir.path()));
    let stats = std::fs::read_to_string(dir.path().join("stats.txt")).unwrap();
    assert!(stats.contains("mu_bar_mid="));

    let mut args = vec!["ablate", "--grid", "bands", "--seeds", "0,1", "--epochs", "1", "--threads", "2"];
    args.extend(SPLIT);
    let csv = ok(&specdet(&args, dir.path()));
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 5);
    assert!(rows[0].ends_with("f1_seed0,f1_seed1"));
}
