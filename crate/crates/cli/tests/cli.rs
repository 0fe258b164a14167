use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use gearfault::dataset::load_csv;
use gearfault::eda::read_stats;
use gearfault::ensemble::ProbabilityTable;
use gearfault::eval::{read_summary_csv, FoldReport};

fn gearfault(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gearfault")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = gearfault(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen_data(dir: &Path, per_class: usize) -> PathBuf {
    let data = dir.join("data.csv");
    ok(&["gen", "--classes", "5", "--per-class", &per_class.to_string(), "--seed", "7", "-o", s(&data)]);
    data
}

#[test]
fn gen_writes_rows_and_sidecar_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path(), 100);
    let text = std::fs::read_to_string(&data).unwrap();
    assert_eq!(text.lines().count(), 501);
    assert!(dir.path().join("data.config.json").exists());
    let again = dir.path().join("again.csv");
    ok(&["gen", "--classes", "5", "--per-class", "100", "--seed", "7", "-o", s(&again)]);
    assert_eq!(std::fs::read(&data).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn missing_flag_is_a_usage_error() {
    let out = gearfault(&["gen", "--per-class", "10", "-o", "x.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--classes"));
}

#[test]
fn invalid_model_is_a_usage_error() {
    let out = gearfault(&["train", "--model", "resnet", "--data", "x.csv", "--fold", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_data_file_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = gearfault(&["--out", s(dir.path()), "eda", "--data", s(&dir.path().join("absent.csv"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn eda_writes_readable_stats() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path(), 4);
    ok(&["--out", s(dir.path()), "eda", "--data", s(&data)]);
    let rows = read_stats(&dir.path().join("eda_samples.csv")).unwrap();
    assert_eq!(rows.len(), 20 * 3 * 3);
    let rows = read_stats(&dir.path().join("eda_classes.csv")).unwrap();
    assert_eq!(rows.len(), 5 * 3 * 200 * 2);
    assert!(dir.path().join("resolved_config.json").exists());
}

#[test]
fn minirocket_folds_cover_the_data_and_ensemble_matches() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path(), 100);
    let before = std::fs::read(&data).unwrap();
    let out = dir.path().join("run");
    let start = Instant::now();
    ok(&["--out", s(&out), "train", "--model", "minirocket", "--data", s(&data), "--plan-seed", "3", "--fold", "0"]);
    assert!(start.elapsed().as_secs_f64() < 60.0);
    for f in ["probs_minirocket_0.csv", "model_minirocket_0.json", "report_minirocket_0.json", "resolved_config.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    for fold in 1..5 {
        ok(&["--out", s(&out), "train", "--model", "minirocket", "--data", s(&data), "--plan-seed", "3", "--fold", &fold.to_string()]);
    }
    assert_eq!(std::fs::read(&data).unwrap(), before, "input file changed");

    let n = load_csv(&data, 200, 3).unwrap().len();
    let mut seen = vec![0; n];
    for fold in 0..5 {
        let table = ProbabilityTable::read(&out.join(format!("probs_minirocket_{fold}.csv"))).unwrap();
        for &i in &table.sample_indices {
            seen[i] += 1;
        }
        let report = FoldReport::load(&out.join(format!("report_minirocket_{fold}.json"))).unwrap();
        assert_eq!(report.accuracy_percent, table.accuracy_percent());
    }
    assert!(seen.iter().all(|&c| c == 1), "test predictions must be disjoint and cover the data");

    // single input, average rule: the input comes back unchanged
    let p0 = out.join("probs_minirocket_0.csv");
    let ens = dir.path().join("ens");
    ok(&["--out", s(&ens), "ensemble", "--rule", "average", "--inputs", s(&p0)]);
    let single = ProbabilityTable::read(&ens.join("probs_ensemble_average_0.csv")).unwrap();
    let input = ProbabilityTable::read(&p0).unwrap();
    assert_eq!(single.values, input.values);
    assert_eq!(single.predictions, input.predictions);

    // three inputs: printed accuracy equals a recomputation from the output
    let stdout = ok(&["--out", s(&ens), "ensemble", "--rule", "max", "--inputs", s(&p0), s(&p0), s(&p0)]).stdout;
    let combined = ProbabilityTable::read(&ens.join("probs_ensemble_max_0.csv")).unwrap();
    let printed = String::from_utf8(stdout).unwrap();
    assert!(printed.contains(&format!("accuracy {}%", combined.accuracy_percent())), "{printed}");

    let p1 = out.join("probs_minirocket_1.csv");
    let bad = gearfault(&["--out", s(&ens), "ensemble", "--rule", "average", "--inputs", s(&p0), s(&p1)]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("dimension"));

    // report over the five fold reports
    let rep = dir.path().join("rep");
    ok(&["--out", s(&rep), "report", "--inputs", s(&out)]);
    let first = std::fs::read(rep.join("summary.csv")).unwrap();
    ok(&["--out", s(&rep), "report", "--inputs", s(&out)]);
    assert_eq!(std::fs::read(rep.join("summary.csv")).unwrap(), first);
    let summaries = read_summary_csv(&rep.join("summary.csv")).unwrap();
    assert_eq!(summaries.len(), 1);
    for fold in 0..5 {
        let r = FoldReport::load(&out.join(format!("report_minirocket_{fold}.json"))).unwrap();
        assert_eq!(summaries[0].fold_accuracies[fold], r.accuracy_percent);
        assert!(rep.join(format!("confusion_minirocket_{fold}.csv")).exists());
    }
}
