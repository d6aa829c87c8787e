//! End-to-end CLI test: phantom generation, training, segmentation,
//! evaluation and a tiny experiment run through the actual binary.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tissuebench"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn tissuebench");
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(
        out.status.success(),
        "command failed\nstdout:\n{stdout}\nstderr:\n{stderr}"
    );
    stdout
}

#[test]
fn phantom_train_segment_evaluate_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let runs = dir.path().join("runs");

    run_ok(bin().args([
        "phantom",
        "--count",
        "3",
        "--dims",
        "32",
        "--sigma",
        "4",
        "--seed",
        "20",
        "--output",
    ])
    .arg(&data));
    assert!(data.join("phantom-0020_t1w0.nii.gz").exists());
    assert!(data.join("phantom-0022_gt.nii.gz").exists());

    run_ok(bin()
        .args([
            "train",
            "--family",
            "dm",
            "--dim",
            "2d",
            "--overlap-train",
            "null",
            "--max-epochs",
            "2",
            "--batch-size",
            "16",
            "--max-samples-per-epoch",
            "32",
            "--seed",
            "3",
            "--dataset",
        ])
        .arg(&data)
        .arg("--output")
        .arg(&runs));
    let ckpt = runs.join("dm_2d.tbm");
    assert!(ckpt.exists());
    assert!(runs.join("train_report.json").exists());

    run_ok(bin()
        .args(["segment", "--case-id", "phantom-0022", "--overlap", "medium", "--model"])
        .arg(&ckpt)
        .arg("--dataset")
        .arg(&data)
        .arg("--output")
        .arg(&runs));
    let seg = runs.join("phantom-0022_seg.nii.gz");
    assert!(seg.exists());

    let stdout = run_ok(bin()
        .args(["evaluate", "--gt"])
        .arg(data.join("phantom-0022_gt.nii.gz"))
        .arg("--seg")
        .arg(&seg));
    assert!(stdout.contains("per_class"), "stdout: {stdout}");
}

#[test]
fn experiment_runs_from_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("exp.toml");
    std::fs::write(
        &config_path,
        r#"
study = "single_run"
families = ["dm"]
dims = ["2d"]
overlap_train = "null"
overlap_test = "medium"
seed = 5
output_dir = "overridden-below"

[dataset]
kind = "phantom"
count = 3
dims = [32, 32, 32]
noise_sigma = 5.0
modalities = 1

[train]
max_epochs = 2
val_fraction = 0.34
batch_size = 16
max_samples_per_epoch = 32

[evaluation]
scheme = "fixed_split"
test_cases = 1
"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    run_ok(bin()
        .args(["experiment", "--config"])
        .arg(&config_path)
        .arg("--output")
        .arg(&out));
    for file in ["metrics.csv", "summary.json"] {
        assert!(out.join(file).exists(), "{file} missing");
    }
    assert!(out.join("plots/dsc_boxplot.svg").exists());
    assert!(out.join("provenance/architectures.json").exists());
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "case_id,family,dim,overlap_train,overlap_test,modalities,class,dsc"
    );
    // one test case, three classes
    assert_eq!(lines.count(), 3);
    // every reported summary number must be recomputable from the rows
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let settings = summary["settings"].as_array().unwrap();
    assert_eq!(settings.len(), 1);
    for class in ["csf", "gm", "wm"] {
        let mean = settings[0]["dsc"][class]["mean"].as_f64().unwrap();
        let from_rows: Vec<f64> = csv
            .lines()
            .skip(1)
            .filter(|l| l.contains(&format!(",{class},")))
            .map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap())
            .collect();
        let recomputed = from_rows.iter().sum::<f64>() / from_rows.len() as f64;
        assert!((mean - recomputed).abs() < 1e-9, "{class}: {mean} vs {recomputed}");
    }
    let _ = Path::new("unused");
}
