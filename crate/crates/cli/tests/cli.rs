use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;
use vpr_augment::dataset::load_manifest;
use vpr_augment::evaluation::read_recall_csv;

const BIN: &str = env!("CARGO_BIN_EXE_vpr-augment");

/// Small toy scene and short schedules so each command finishes in seconds.
const TINY: &[&str] = &[
    "--toy.train_poses=48",
    "--toy.val_queries=8",
    "--toy.test_queries=8",
    "--pipeline.warmup_epochs=1",
    "--pipeline.epochs=2",
    "--pipeline.train.ue.epochs=3",
];

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .current_dir(dir)
        .args(args)
        .env_remove("VPR_AUGMENT_OUTPUT_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn run_tiny(dir: &Path, cmd: &str, extra: &[&str]) -> Output {
    let mut args = vec![cmd];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    run(dir, &args)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn first_loss(metrics: &Path) -> f64 {
    let text = fs::read_to_string(metrics).unwrap();
    let line: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    line["loss"].as_f64().unwrap()
}

#[test]
fn train_vpr_writes_checkpoint_metrics_and_seed() {
    let tmp = TempDir::new().unwrap();
    let o = run_tiny(
        tmp.path(),
        "train-vpr",
        &["--paths.output_dir=out", "--seed=7"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let out = tmp.path().join("out");
    for f in [
        "vpr.ckpt",
        "vpr.ckpt.meta.json",
        "metrics.jsonl",
        "recall.csv",
        "summary.json",
        "run_config.toml",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    assert_eq!(json(&out.join("summary.json"))["seed"], 7);
    assert_eq!(json(&out.join("vpr.ckpt.meta.json"))["seed"], 7);
    assert!(fs::read_to_string(out.join("run_config.toml"))
        .unwrap()
        .contains("seed = 7"));
    let metrics = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert!(metrics.lines().all(|l| l.contains("\"seed\":7")));
}

#[test]
fn same_seed_reproduces_first_epoch_loss() {
    let tmp = TempDir::new().unwrap();
    for dir in ["a", "b"] {
        let o = run_tiny(
            tmp.path(),
            "train-vpr",
            &[&format!("--paths.output_dir={dir}")],
        );
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = first_loss(&tmp.path().join("a/metrics.jsonl"));
    let b = first_loss(&tmp.path().join("b/metrics.jsonl"));
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn missing_manifest_fails_before_writing_outputs() {
    let tmp = TempDir::new().unwrap();
    let o = run(
        tmp.path(),
        &[
            "train-vpr",
            "--paths.manifest=nowhere/manifest.json",
            "--paths.output_dir=out",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere/manifest.json"));
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn invalid_config_values_exit_with_config_code() {
    let tmp = TempDir::new().unwrap();
    for args in [
        vec!["pipeline", "--pipeline.bogus=1"],
        vec!["pipeline", "--pipeline.epochs=many"],
        vec!["pipeline", "--pipeline.augment.top_k=50"],
        vec!["pipeline", "--renderer.kind=external"],
        vec!["pipeline", "--pipeline.negative_threshold=0.1"],
    ] {
        let mut full = args.clone();
        full.push("--paths.output_dir=out");
        let o = run(tmp.path(), &full);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
        assert!(!tmp.path().join("out").exists(), "{args:?} wrote outputs");
    }
}

#[test]
fn train_ue_without_backbone_is_missing_dependency() {
    let tmp = TempDir::new().unwrap();
    let o = run(tmp.path(), &["train-ue", "--paths.output_dir=out"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("train-vpr"));
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn augment_without_ue_checkpoint_is_missing_dependency() {
    let tmp = TempDir::new().unwrap();
    assert!(
        run_tiny(tmp.path(), "train-vpr", &["--paths.output_dir=out"])
            .status
            .success()
    );
    let o = run_tiny(tmp.path(), "augment", &["--paths.output_dir=out"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("train-ue"));
}

#[test]
fn staged_commands_chain_through_checkpoints() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    assert!(run_tiny(dir, "train-vpr", &["--paths.output_dir=out"])
        .status
        .success());
    let o = run_tiny(dir, "train-ue", &["--paths.output_dir=out"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.join("out/ue.ckpt").exists());
    assert_eq!(json(&dir.join("out/ue.ckpt.meta.json"))["seed"], 0);

    let o = run_tiny(
        dir,
        "augment",
        &[
            "--paths.output_dir=aug",
            "--paths.vpr_checkpoint=out/vpr.ckpt",
            "--paths.ue_checkpoint=out/ue.ckpt",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = json(&dir.join("aug/augment_summary.json"));
    let failures = summary["failures"].as_array().unwrap().len();
    assert_eq!(summary["inserted"].as_u64().unwrap() as usize, 3 * failures);
    let records = load_manifest(&dir.join("aug/manifest_augmented.json")).unwrap();
    assert_eq!(
        records.iter().filter(|r| r.is_synthetic).count(),
        3 * failures
    );

    let o = run(
        dir,
        &[
            "eval",
            "--paths.output_dir=ev",
            "--paths.vpr_checkpoint=out/vpr.ckpt",
            "--paths.manifest=aug/manifest_augmented.json",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn eval_csv_round_trips_against_summary() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    assert!(run_tiny(dir, "train-vpr", &["--paths.output_dir=out"])
        .status
        .success());
    let o = run_tiny(
        dir,
        "eval",
        &[
            "--paths.output_dir=ev",
            "--paths.vpr_checkpoint=out/vpr.ckpt",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_recall_csv(&dir.join("ev/recall.csv")).unwrap();
    let summary = json(&dir.join("ev/eval_summary.json"));
    let recall = summary["report"]["recall_at"].as_object().unwrap();
    assert_eq!(rows.len(), recall.len());
    for row in &rows {
        assert_eq!(row.label, "model");
        assert_eq!(row.dataset, "toy");
        assert_eq!(recall[&row.n.to_string()].as_f64().unwrap(), row.recall);
    }
    assert!(dir.join("ev/recall_toy.png").exists());
}

#[test]
fn self_retrieval_has_perfect_recall() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    assert!(run_tiny(dir, "train-vpr", &["--paths.output_dir=out"])
        .status
        .success());
    let o = run_tiny(
        dir,
        "eval",
        &[
            "--paths.output_dir=ev",
            "--paths.vpr_checkpoint=out/vpr.ckpt",
            "--eval.split=train",
            "--eval.curve_plot=false",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_recall_csv(&dir.join("ev/recall.csv")).unwrap();
    assert!(rows.iter().all(|r| r.recall == 1.0));
}

#[test]
fn eval_rejects_descriptor_dimension_mismatch() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    assert!(run_tiny(dir, "train-vpr", &["--paths.output_dir=out"])
        .status
        .success());
    let o = run_tiny(
        dir,
        "eval",
        &[
            "--paths.output_dir=ev",
            "--paths.vpr_checkpoint=out/vpr.ckpt",
            "--pipeline.backbone.descriptor_dim=16",
            "--pipeline.ue.descriptor_dim=16",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("32-d"));
}

#[test]
fn config_file_is_overridden_by_flags_and_env() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    fs::write(
        dir.join("run.toml"),
        "seed = 3\n[paths]\noutput_dir = \"from_file\"\n[toy]\ntrain_poses = 48\nval_queries = 8\ntest_queries = 8\n\
         [pipeline]\nwarmup_epochs = 1\nepochs = 1\n",
    )
    .unwrap();
    let o = run(dir, &["train-vpr", "--config", "run.toml", "--seed=5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(json(&dir.join("from_file/summary.json"))["seed"], 5);

    let o = Command::new(BIN)
        .current_dir(dir)
        .args(["train-vpr", "--config", "run.toml"])
        .env("VPR_AUGMENT_OUTPUT_DIR", dir.join("from_env"))
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(json(&dir.join("from_env/summary.json"))["seed"], 3);

    fs::write(dir.join("bad.toml"), "[pipeline]\nepoch = 1\n").unwrap();
    let o = run(dir, &["train-vpr", "--config", "bad.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("pipeline.epoch"));
}

#[test]
fn pipeline_runs_and_m_sweep_emits_four_rows() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let o = run_tiny(dir, "pipeline", &["--paths.output_dir=pl"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = json(&dir.join("pl/summary.json"));
    assert_eq!(summary["invariants_clean"], true);
    assert!(dir.join("pl/ue.ckpt").exists());

    let o = run_tiny(
        dir,
        "pipeline",
        &[
            "--paths.output_dir=sw",
            "--sweep.mode=m",
            "--sweep.seeds=[0]",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(dir.join("sw/recall_table.txt")).unwrap();
    let labels: Vec<&str> = table
        .lines()
        .skip(1)
        .filter_map(|l| l.split_whitespace().next())
        .collect();
    assert_eq!(labels, ["M=0", "M=10", "M=20", "M=30"]);
}

#[test]
fn import_transforms_writes_a_manifest() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let frame = |i: usize, z: f64| {
        format!(
            "{{\"file_path\": \"images/{i:03}.png\", \"transform_matrix\": \
             [[1,0,0,0],[0,1,0,0],[0,0,1,{z}],[0,0,0,1]]}}"
        )
    };
    let frames: Vec<String> = (0..4).map(|i| frame(i, i as f64)).collect();
    fs::write(
        dir.join("transforms.json"),
        format!("{{\"fl_x\": 20, \"fl_y\": 20, \"cx\": 16, \"cy\": 16, \"w\": 32, \"h\": 32, \"frames\": [{}]}}", frames.join(",")),
    )
    .unwrap();
    let o = run(
        dir,
        &[
            "import-transforms",
            "--input",
            "transforms.json",
            "--output",
            "m/manifest.json",
            "--scene-id",
            "lab",
            "--query-every",
            "2",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let m = json(&dir.join("m/manifest.json"));
    assert_eq!(m["scene_id"], "lab");
    let records = m["records"].as_array().unwrap();
    assert_eq!(records.len(), 4);
    assert_eq!(records.iter().filter(|r| r["role"] == "query").count(), 2);

    let o = run(
        dir,
        &[
            "import-transforms",
            "--input",
            "none.json",
            "--output",
            "x.json",
            "--scene-id",
            "lab",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.join("x.json").exists());
}
