use std::fs;
use std::path::{Path, PathBuf};

use sanet_cli::run;

fn sanet(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("sanet").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

const HELP_PAGES: &[(&str, &[&str])] = &[
    ("help.txt", &["--help"]),
    ("help_synth_data.txt", &["synth-data", "--help"]),
    ("help_train.txt", &["train", "--help"]),
    ("help_eval.txt", &["eval", "--help"]),
    ("help_analyze.txt", &["analyze", "--help"]),
    ("help_gradcheck.txt", &["gradcheck", "--help"]),
    ("help_export_maps.txt", &["export-maps", "--help"]),
];

/// Set `UPDATE_GOLDEN=1` to rewrite the expected pages.
#[test]
fn help_pages_match_golden_files() {
    for (file, args) in HELP_PAGES {
        let (code, out, _) = sanet(args);
        assert_eq!(code, 0, "{args:?}");
        let path = golden_dir().join(file);
        if std::env::var_os("UPDATE_GOLDEN").is_some() {
            fs::write(&path, &out).unwrap();
        }
        let want = fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(out, want, "help for {args:?} differs from {file}");
    }
}

#[test]
fn every_documented_flag_is_in_help() {
    let all: String = HELP_PAGES.iter().map(|(_, a)| sanet(a).1).collect();
    for flag in [
        "--config",
        "--seed",
        "--out",
        "--model",
        "--dataset",
        "--epochs",
        "--alpha",
        "--beta",
        "--sa-activation",
        "--sa-pool",
        "--input-size <H> <W>",
        "--report",
        "--count",
        "--classes",
        "--checkpoint",
        "--index",
    ] {
        assert!(all.contains(flag), "{flag} missing from help");
    }
    let (_, train, _) = sanet(&["train", "--help"]);
    assert!(train.contains("[possible values: relu, sigmoid]"));
    assert!(train.contains("[possible values: avg, max]"));
}

#[test]
fn no_arguments_prints_usage_and_exits_1() {
    let (code, out, err) = sanet(&[]);
    assert_eq!(code, 1);
    assert!(out.is_empty());
    assert!(err.contains("Usage: sanet <COMMAND>"));
}

#[test]
fn usage_errors_exit_1() {
    for args in [
        &["train", "--bogus"][..],
        &["frobnicate"],
        &["analyze", "--input-size", "512"],
        &["analyze", "--sa-pool", "median"],
        &["gradcheck", "--seed", "x"],
    ] {
        let (code, _, err) = sanet(args);
        assert_eq!(code, 1, "{args:?}");
        assert!(err.contains("error"), "{args:?}: {err}");
    }
}

#[test]
fn validation_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    for args in [
        vec!["analyze", "--model", "unet-desk"],
        vec!["analyze", "--model", "sanet-desk", "--classes", "1"],
        vec!["analyze", "--model", "sanet-desk", "--input-size", "60", "64"],
        vec!["synth-data", "--out", d, "--size", "20"],
        vec!["train", "--dataset", d, "--out", d, "--alpha", "-1"],
        vec!["train", "--out", d],
        vec!["eval", "--checkpoint", d, "--dataset", d],
    ] {
        let (code, _, err) = sanet(&args);
        assert_eq!(code, 1, "{args:?}: {err}");
        assert!(err.starts_with("error: "), "{args:?}: {err}");
    }
}

#[test]
fn io_failure_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let target = blocker.join("data");
    let (code, _, err) = sanet(&["synth-data", "--out", target.to_str().unwrap(), "--count", "1"]);
    assert_eq!(code, 2, "{err}");
}

fn total_line(report: &str) -> (f64, f64) {
    let line = report.lines().last().unwrap();
    let f: Vec<&str> = line.split_whitespace().collect();
    assert_eq!(f[0], "TOTAL");
    (f[1].parse().unwrap(), f[2].parse().unwrap())
}

#[test]
fn analyze_catalog_sanet_total() {
    let args = ["analyze", "--model", "sanet-resnet101", "--input-size", "512", "512"];
    let (code, out, _) = sanet(&args);
    assert_eq!(code, 0);
    let (params, macs) = total_line(&out);
    assert!((params / 55.5e6 - 1.0).abs() <= 0.10, "{params}");
    assert!((macs / 204.7e9 - 1.0).abs() <= 0.15, "{macs}");
    assert_eq!(sanet(&args).1, out);
}

#[test]
fn analyze_reads_model_keys_from_config_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "model.kind = fcn\nbackbone.variant = desk\nmodel.classes = 3\n").unwrap();
    let report = dir.path().join("report.txt");
    let (code, out, err) = sanet(&[
        "analyze",
        "--config",
        cfg.to_str().unwrap(),
        "--input-size",
        "64",
        "64",
        "--report",
        report.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(fs::read_to_string(&report).unwrap(), out);
    assert!(!out.contains("sa1"));
    let (_, with_flag, _) = sanet(&["analyze", "--config", cfg.to_str().unwrap(), "--model", "sanet-desk", "--input-size", "64", "64"]);
    assert!(with_flag.contains("sa1"));
}

#[test]
fn gradcheck_passes_and_is_reproducible() {
    let (code, out, err) = sanet(&["gradcheck", "--seed", "7"]);
    assert_eq!(code, 0, "{err}");
    let mut rows = 0;
    for line in out.lines().skip(1) {
        let f: Vec<&str> = line.split_whitespace().collect();
        let rel: f64 = f[2].parse().unwrap();
        assert!(rel < 1e-4, "{line}");
        rows += 1;
    }
    assert!(rows >= 20);
    assert_eq!(sanet(&["gradcheck", "--seed", "7"]).1, out);
}

#[test]
fn synth_train_eval_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run_dir = dir.path().join("run");
    let d = data.to_str().unwrap();
    let r = run_dir.to_str().unwrap();
    assert_eq!(sanet(&["synth-data", "--out", d, "--count", "10", "--seed", "3"]).0, 0);

    // The file asks for 3 epochs; the flag wins.
    let cfg = dir.path().join("train.cfg");
    fs::write(&cfg, "train.epochs = 3\ntrain.batch_size = 4\nloss.alpha = 0.3\n").unwrap();
    let (code, out, err) = sanet(&[
        "train", "--config", cfg.to_str().unwrap(), "--dataset", d, "--out", r, "--model", "sanet-desk",
        "--epochs", "1", "--seed", "5",
    ]);
    assert_eq!(code, 0, "{err}");
    let log = fs::read_to_string(run_dir.join("metrics.log")).unwrap();
    assert_eq!(log.lines().count(), 1);
    assert!(out.starts_with(&log));
    let saved = fs::read_to_string(run_dir.join("config.txt")).unwrap();
    assert!(saved.contains("train.epochs = 1\n"));
    assert!(saved.contains("train.batch_size = 4\n"));
    assert!(saved.contains("loss.alpha = 0.3\n"));
    assert!(saved.contains("seed = 5\n"));

    let ck = run_dir.join("checkpoint_final");
    let report = dir.path().join("eval.txt");
    let (code, out, err) = sanet(&[
        "eval", "--checkpoint", ck.to_str().unwrap(), "--dataset", d, "--report", report.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    let miou_line = out.lines().find(|l| l.starts_with("miou ")).unwrap();
    let logged: Vec<&str> = log.split_whitespace().collect();
    // The report rounds to 4 decimals, the log to 6.
    let evaluated: f64 = miou_line[5..].parse().unwrap();
    let logged: f64 = logged[5].parse().unwrap();
    assert!((evaluated - logged).abs() <= 5.1e-5, "{evaluated} vs {logged}");
    assert_eq!(fs::read_to_string(&report).unwrap(), out);

    let prefix = dir.path().join("maps");
    let (code, out, err) = sanet(&[
        "export-maps", "--checkpoint", ck.to_str().unwrap(), "--dataset", d, "--index", "2", "--out",
        prefix.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(out.lines().count(), 13);
    for p in out.lines() {
        assert!(Path::new(p).exists(), "{p}");
    }
    let (code, _, _) = sanet(&[
        "export-maps", "--checkpoint", ck.to_str().unwrap(), "--dataset", d, "--index", "10", "--out",
        prefix.to_str().unwrap(),
    ]);
    assert_eq!(code, 1);
}
