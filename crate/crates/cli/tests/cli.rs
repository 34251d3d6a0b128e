//! The `cdcl-lab` binary end to end on toy configurations.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

const BIN: &str = env!("CARGO_BIN_EXE_cdcl-lab");

fn base() -> Value {
    json!({
        "generator": {
            "height": 12, "width": 12, "n_batches": 6, "n_treatments": 6,
            "n_control_treatments": 2, "n_moa_classes": 2, "replicates_per_batch": 3
        },
        "arch": {"extractor_hidden": [16], "embed_dim": 8, "head_hidden": [16], "out_dim": 8, "predictor_hidden": [8]},
        "augment": {"output_size": [6, 6]},
        "train": {"total_iters": 10, "mini_batch_size": 4, "checkpoint_every": 4},
        "method": "CDCL"
    })
}

fn merge(into: &mut Value, patch: &Value) {
    match (into, patch) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                merge(a.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

/// A scratch directory holding a config built from `base()` and `patch`.
struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new(patch: Value) -> Self {
        let mut cfg = base();
        merge(&mut cfg, &patch);
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("cfg.json"), serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        self.run_env(args, &[])
    }

    fn run_env(&self, args: &[&str], env: &[(&str, &Path)]) -> Output {
        let mut cmd = Command::new(BIN);
        cmd.args(args)
            .arg("--config")
            .arg(self.path("cfg.json"))
            .env_remove("CDCL_LAB_OUT")
            .env("RUST_LOG", "warn");
        if !args.contains(&"--out") && !env.iter().any(|(k, _)| *k == "CDCL_LAB_OUT") {
            cmd.arg("--out").arg(self.path("out"));
        }
        for (k, v) in env {
            cmd.env(k, v);
        }
        cmd.output().unwrap()
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "stderr: {}", stderr(&o));
    o
}

fn experiment_dir(root: &Path) -> PathBuf {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with("experiment-"))
        .collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.pop().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn validate(schema_file: &str, instance: &Value) {
    let schema_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schema").join(schema_file);
    let schema = read_json(&schema_path);
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator
        .iter_errors(instance)
        .map(|e| format!("{} at {}", e, e.instance_path))
        .collect();
    assert!(errors.is_empty(), "{schema_file}: {errors:?}");
}

// ---------------------------------------------------------------- errors

#[test]
fn invalid_config_exits_2_naming_the_field() {
    let f = Fixture::new(json!({"generator": {"n_batches": 0}}));
    let o = f.run(&["generate"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("generator.n_batches"), "{}", stderr(&o));

    let f = Fixture::new(json!({"train": {"total_iterz": 5}}));
    let o = f.run(&["train"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("train"), "{}", stderr(&o));
}

#[test]
fn eval_without_checkpoint_exits_3() {
    let f = Fixture::new(json!({}));
    let o = f.run(&["eval"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn divergence_exits_4_and_leaves_a_dump() {
    let f = Fixture::new(json!({"train": {"base_lr": 1e200, "warmup_iters": 0}}));
    let o = f.run(&["train"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    let dump = read_json(&f.path("out/runs/CDCL-s0-f0/nonfinite_dump.json"));
    assert!(dump["iteration"].is_u64());
    assert!(!dump["sample_ids"].as_array().unwrap().is_empty());
}

#[test]
fn whitening_without_controls_exits_5_and_fails_cells_with_6() {
    let f = Fixture::new(json!({
        "generator": {"n_control_treatments": 0},
        "matrix": {"methods": ["CDCL"], "seeds": [0], "folds": [0]}
    }));
    ok(f.run(&["train"]));
    let o = f.run(&["eval"]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
    let o = f.run(&["experiment"]);
    assert_eq!(code(&o), 6, "{}", stderr(&o));
    let manifest = read_json(&experiment_dir(&f.path("out")).join("manifest.json"));
    assert_eq!(manifest["cells"][0]["status"], "failed");
    assert_eq!(manifest["cells"][0]["exit_code"], 5);
}

// ---------------------------------------------------------------- generate / train / eval

#[test]
fn regeneration_is_byte_identical() {
    let f = Fixture::new(json!({}));
    ok(f.run(&["generate", "--out", f.path("a").to_str().unwrap()]));
    ok(f.run(&["generate", "--out", f.path("b").to_str().unwrap()]));
    for file in ["manifest.json", "images.bin"] {
        assert_eq!(
            fs::read(f.path("a/dataset").join(file)).unwrap(),
            fs::read(f.path("b/dataset").join(file)).unwrap()
        );
    }
    ok(f.run(&["generate", "--seed", "1", "--out", f.path("c").to_str().unwrap()]));
    assert_ne!(
        fs::read(f.path("a/dataset/images.bin")).unwrap(),
        fs::read(f.path("c/dataset/images.bin")).unwrap()
    );
}

#[test]
fn output_root_precedence() {
    let f = Fixture::new(json!({}));
    let env_root = f.path("from_env");
    ok(f.run_env(&["generate"], &[("CDCL_LAB_OUT", &env_root)]));
    assert!(env_root.join("dataset/manifest.json").exists());
    let flag_root = f.path("from_flag");
    ok(f.run_env(
        &["generate", "--out", flag_root.to_str().unwrap()],
        &[("CDCL_LAB_OUT", &env_root)],
    ));
    assert!(flag_root.join("dataset/manifest.json").exists());
}

#[test]
fn training_log_has_one_record_per_window() {
    let f = Fixture::new(json!({}));
    ok(f.run(&["train"]));
    let log = fs::read_to_string(f.path("out/runs/CDCL-s0-f0/train_log.jsonl")).unwrap();
    let records: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0]["iter"], 10);

    let f = Fixture::new(json!({"train": {"total_iters": 120}}));
    ok(f.run(&["train"]));
    let log = fs::read_to_string(f.path("out/runs/CDCL-s0-f0/train_log.jsonl")).unwrap();
    let iters: Vec<u64> = log
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["iter"].as_u64().unwrap())
        .collect();
    assert_eq!(iters, vec![50, 100, 120]);
}

#[test]
fn resumed_training_is_bit_identical() {
    let f = Fixture::new(json!({}));
    let a = f.path("a");
    let b = f.path("b");
    ok(f.run(&["train", "--out", a.to_str().unwrap()]));
    let o = ok(f.run(&["train", "--out", b.to_str().unwrap(), "--stop-after", "5"]));
    assert!(String::from_utf8_lossy(&o.stdout).contains("stopped at iteration 5"));
    ok(f.run(&["train", "--out", b.to_str().unwrap(), "--resume"]));
    for file in ["checkpoint.bin", "train_log.jsonl"] {
        assert_eq!(
            fs::read(a.join("runs/CDCL-s0-f0").join(file)).unwrap(),
            fs::read(b.join("runs/CDCL-s0-f0").join(file)).unwrap(),
            "{file}"
        );
    }
    ok(f.run(&["train", "--out", a.to_str().unwrap(), "--seed", "1"]));
    assert_ne!(
        fs::read(a.join("runs/CDCL-s0-f0/checkpoint.bin")).unwrap(),
        fs::read(a.join("runs/CDCL-s1-f0/checkpoint.bin")).unwrap()
    );
}

#[test]
fn evaluation_outputs_are_valid_and_reproducible() {
    let f = Fixture::new(json!({}));
    ok(f.run(&["train", "--fold", "2"]));
    ok(f.run(&["eval", "--fold", "2"]));
    let run = f.path("out/runs/CDCL-s0-f2");
    let first = fs::read(run.join("metrics.json")).unwrap();
    let metrics: Value = serde_json::from_slice(&first).unwrap();
    validate("metrics.v1.schema.json", &metrics);
    assert_eq!(metrics["fold"], 2);
    assert_eq!(metrics["method"], "CDCL");

    for file in ["embeddings_train.csv", "embeddings_test.csv"] {
        let text = fs::read_to_string(run.join(file)).unwrap();
        let header = text.lines().next().unwrap();
        let expected: Vec<String> = ["sample_id", "batch_id", "treatment_id", "is_control", "moa_id"]
            .iter()
            .map(|s| s.to_string())
            .chain((0..8).map(|j| format!("f{j}")))
            .collect();
        assert_eq!(header, expected.join(","));
    }
    // Four training batches, two held-out batches, 6 treatments × 3 replicates each.
    let rows = |file: &str| fs::read_to_string(run.join(file)).unwrap().lines().count() - 1;
    assert_eq!(rows("embeddings_train.csv"), 4 * 18);
    assert_eq!(rows("embeddings_test.csv"), 2 * 18);
    assert_eq!(rows("pca_test.csv"), 2 * 18);

    ok(f.run(&["eval", "--fold", "2"]));
    assert_eq!(fs::read(run.join("metrics.json")).unwrap(), first);
}

// ---------------------------------------------------------------- experiments

#[test]
fn experiment_bookkeeping_and_report() {
    let f = Fixture::new(json!({"matrix": {"methods": ["SSL-DINO", "CDCL"], "seeds": [0], "folds": [0, 3]}}));
    let o = ok(f.run(&["experiment"]));
    assert!(String::from_utf8_lossy(&o.stdout).contains("4 cells, 0 reused, 0 failed"));
    let dir = experiment_dir(&f.path("out"));
    let manifest = read_json(&dir.join("manifest.json"));
    assert_eq!(manifest["cells"].as_array().unwrap().len(), 4);
    assert!(manifest["cells"]
        .as_array()
        .unwrap()
        .iter()
        .all(|c| c["status"] == "done"));

    let report = read_json(&dir.join("report.json"));
    validate("report.v1.schema.json", &report);
    for cell in fs::read_dir(dir.join("cells")).unwrap() {
        validate(
            "metrics.v1.schema.json",
            &read_json(&cell.unwrap().path().join("metrics.json")),
        );
    }
    let subsets = report["subsets"].as_array().unwrap();
    assert_eq!(subsets.len(), 1);
    assert_eq!(subsets[0]["subset"], "full_data");
    let methods = subsets[0]["methods"].as_array().unwrap();
    assert_eq!(methods.len(), 2);
    for m in methods {
        assert_eq!(m["metrics"]["knn_acc"]["n_folds"], 2);
    }
    let table = fs::read_to_string(dir.join("table.txt")).unwrap();
    assert!(table.contains("SSL-DINO") && table.contains("CDCL"));
    let csv = fs::read_to_string(dir.join("table.csv")).unwrap();
    assert!(csv.lines().next().unwrap().contains("knn_acc_mean"));

    let o = ok(f.run(&["report", dir.to_str().unwrap()]));
    assert!(String::from_utf8_lossy(&o.stdout).contains("[full_data]"));
}

#[test]
fn single_fold_has_zero_spread() {
    let f = Fixture::new(json!({"matrix": {"methods": ["Supervised"], "seeds": [0], "folds": [1]}}));
    ok(f.run(&["experiment"]));
    let report = read_json(&experiment_dir(&f.path("out")).join("report.json"));
    let metrics = report["subsets"][0]["methods"][0]["metrics"].as_object().unwrap();
    assert!(!metrics.is_empty());
    for (k, s) in metrics {
        assert_eq!(s["std"], 0.0, "{k}");
        assert_eq!(s["n_folds"], 1, "{k}");
    }
}

#[test]
fn scenario_matrix_gives_one_table_per_scenario() {
    let f = Fixture::new(json!({"matrix": {
        "methods": ["CDCL"], "seeds": [0], "folds": [0], "full_data": false,
        "scenarios": [
            {"kind": "controls_only"},
            {"kind": "few_per_class", "k": 2},
            {"kind": "treatment_fraction", "p": 0.5}
        ]
    }}));
    ok(f.run(&["experiment"]));
    let dir = experiment_dir(&f.path("out"));
    let report = read_json(&dir.join("report.json"));
    let labels: Vec<&str> = report["subsets"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["subset"].as_str().unwrap())
        .collect();
    assert_eq!(labels, ["controls_only", "few_per_class_2", "treatment_fraction_0.5"]);
    for l in &labels {
        assert!(dir.join(format!("table-{l}.txt")).exists(), "{l}");
    }
    let tf = &report["subsets"][2]["methods"][0]["metrics"];
    assert!(tf["unseen_znorm_knn_acc"]["mean"].is_f64());
}

#[test]
fn resume_reruns_only_unfinished_cells() {
    let f = Fixture::new(json!({"matrix": {"methods": ["SSL-BYOL", "Supervised"], "seeds": [0], "folds": [0, 1]}}));
    ok(f.run(&["experiment"]));
    let dir = experiment_dir(&f.path("out"));
    let report = fs::read(dir.join("report.json")).unwrap();

    let mut manifest = read_json(&dir.join("manifest.json"));
    manifest["cells"][1]["status"] = json!("pending");
    fs::write(dir.join("manifest.json"), serde_json::to_vec(&manifest).unwrap()).unwrap();
    let victim = manifest["cells"][1]["id"].as_str().unwrap().to_string();
    fs::remove_dir_all(dir.join("cells").join(&victim)).unwrap();
    let kept = manifest["cells"][0]["id"].as_str().unwrap().to_string();
    let kept_metrics = dir.join("cells").join(&kept).join("metrics.json");
    let stamp = fs::metadata(&kept_metrics).unwrap().modified().unwrap();

    let o = ok(f.run(&["experiment", "--resume"]));
    assert!(String::from_utf8_lossy(&o.stdout).contains("4 cells, 3 reused, 0 failed"));
    assert_eq!(fs::metadata(&kept_metrics).unwrap().modified().unwrap(), stamp);
    assert!(dir.join("cells").join(&victim).join("metrics.json").exists());
    assert_eq!(fs::read(dir.join("report.json")).unwrap(), report);
}

#[test]
fn worker_count_does_not_change_results() {
    let f = Fixture::new(json!({"matrix": {"methods": ["SSL-DINO-CB", "SSL-BYOL-BL"], "seeds": [0, 1], "folds": [0]}}));
    let one = f.path("one");
    let two = f.path("two");
    ok(f.run(&["experiment", "--out", one.to_str().unwrap(), "--workers", "1"]));
    ok(f.run(&["experiment", "--out", two.to_str().unwrap(), "--workers", "2"]));
    assert_eq!(
        fs::read(experiment_dir(&one).join("report.json")).unwrap(),
        fs::read(experiment_dir(&two).join("report.json")).unwrap()
    );
}
