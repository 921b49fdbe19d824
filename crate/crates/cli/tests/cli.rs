use std::path::Path;
use std::process::{Command, Output};

fn softreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_softreg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path, count: usize) {
    let o = softreg(&["synth", "--out", dir.to_str().unwrap(), "--count", &count.to_string(), "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = softreg(&["benchmark", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--frobnicate"));
    assert_eq!(softreg(&["--mode", "fuzzy", "benchmark"]).status.code(), Some(1));
    assert_eq!(softreg(&[]).status.code(), Some(1));
}

#[test]
fn benchmark_on_empty_dir_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = softreg(&["benchmark", "--dataset", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("EmptyDataset"), "{}", stderr(&o));
}

#[test]
fn malformed_pair_list_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("pairs.csv"), "src_path,tgt_path,gt_pose_line\na.bin,b.bin,1 0 0\n").unwrap();
    let o = softreg(&["benchmark", "--dataset", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn register_prints_metrics_json() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 1);
    let dump = dir.path().join("dump");
    let o = softreg(&[
        "register",
        "--dataset",
        dir.path().to_str().unwrap(),
        "--index",
        "0",
        "--mode",
        "deterministic",
        "--dump",
        dump.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["rte_m"].as_f64().unwrap() < 2.0);
    assert!(v["rre_deg"].as_f64().unwrap() < 5.0);
    assert_eq!(v["stages"].as_array().unwrap().len(), 3);
    for l in 1..=3 {
        assert!(dump.join(format!("src_level{l}.ply")).exists());
    }
}

#[test]
fn benchmark_is_reproducible_and_eval_only_agrees() {
    let data = tempfile::tempdir().unwrap();
    synth(data.path(), 2);
    let d = data.path().to_str().unwrap();
    let out_a = data.path().join("a");
    let out_b = data.path().join("b");
    let out_c = data.path().join("c");
    for out in [&out_a, &out_b] {
        let o = softreg(&["benchmark", "--dataset", d, "--out", out.to_str().unwrap(), "--no-timing"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["results.csv", "recall_rte.csv", "recall_rre.csv", "estimates.csv"] {
        assert_eq!(
            std::fs::read(out_a.join(f)).unwrap(),
            std::fs::read(out_b.join(f)).unwrap(),
            "{f}"
        );
    }
    let est = out_a.join("estimates.csv");
    let o = softreg(&["eval-only", "--dataset", d, "--estimates", est.to_str().unwrap(), "--out", out_c.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = |p: &Path| -> Vec<(f64, f64)> {
        let mut r = csv::Reader::from_path(p).unwrap();
        r.records().map(|x| { let x = x.unwrap(); (x[1].parse().unwrap(), x[2].parse().unwrap()) }).collect()
    };
    for ((a, b), (c, d)) in rows(&out_a.join("results.csv")).into_iter().zip(rows(&out_c.join("results.csv"))) {
        assert!((a - c).abs() < 1e-9 && (b - d).abs() < 1e-6, "{a} {c} {b} {d}");
    }
}

#[test]
fn ablate_writes_one_row_per_variant() {
    let data = tempfile::tempdir().unwrap();
    synth(data.path(), 1);
    let out = data.path().join("out");
    let o = softreg(&["ablate", "--dataset", data.path().to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert!(text.starts_with("variant,rte_mean,rte_std,rre_mean,rre_std,recall,ms_mean\n"));
    assert_eq!(text.lines().count(), 6);
}

#[test]
fn train_writes_curve_and_parameters() {
    let data = tempfile::tempdir().unwrap();
    synth(data.path(), 2);
    let out = data.path().join("run");
    let o = softreg(&[
        "train",
        "--dataset",
        data.path().to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--epochs",
        "1",
        "--batch-size",
        "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let curve = std::fs::read_to_string(out.join("loss_curve.csv")).unwrap();
    assert!(curve.starts_with("epoch,loss,lr\n"));
    assert_eq!(curve.lines().count(), 3);
    assert_eq!(&std::fs::read(out.join("model.hdmn")).unwrap()[..4], b"HDMN");
}

#[test]
fn config_file_drives_the_run() {
    let data = tempfile::tempdir().unwrap();
    synth(data.path(), 1);
    let cfg = data.path().join("run.cfg");
    std::fs::write(&cfg, "paths.dataset = .\npaths.output = report\nflags.mask = false\n").unwrap();
    let o = softreg(&["benchmark", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(data.path().join("report/results.csv").exists());
    std::fs::write(&cfg, "k1 = many\n").unwrap();
    assert_eq!(softreg(&["benchmark", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
}
