use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use calib2stage::nn::{load_checkpoint, Group};
use calib2stage::Model;
use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_calib2stage"))
}

fn tiny_config() -> Value {
    json!({
        "output_dir": "out",
        "data": {"kind": "blobs", "n_train": 300, "n_test": 120, "num_classes": 3,
                 "radius": 3.0, "noise_sd": 0.6, "label_noise_frac": 0.1, "seed": 3},
        "ood": [{"kind": "blobs", "n_train": 10, "n_test": 60, "num_classes": 2,
                 "radius": 9.0, "noise_sd": 0.5, "seed": 9}],
        "shift": {"degrees": [0.0, 90.0]},
        "model": {"extractor": {"kind": "dense", "input_dim": 2, "hidden": [12, 12]}},
        "stage1": {"learning_rate": 0.005, "batch_size": 32, "max_epochs": 8},
        "stage2": {"learning_rate": 0.005, "batch_size": 32, "max_epochs": 4},
        "e2e": {"learning_rate": 0.005, "batch_size": 32, "max_epochs": 4},
        "z_dims": [3],
        "seeds": [0, 1, 2],
        "m_values": [1, 4]
    })
}

fn write_config(dir: &Path, cfg: &Value) -> PathBuf {
    let p = dir.join("cfg.json");
    fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

fn run(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = bin();
    cmd.args(args);
    match threads {
        Some(t) => cmd.env("CALIB2STAGE_THREADS", t),
        None => cmd.env_remove("CALIB2STAGE_THREADS"),
    };
    cmd.output().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn train(cfg: &Path, stage: &str, threads: Option<&str>) -> Output {
    run(&["train", "--config", cfg.to_str().unwrap(), "--stage", stage], threads)
}

/// Contents of every non-log file in `dir`, keyed by name.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x != "log"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

fn full_pipeline(dir: &Path, threads: &str) -> BTreeMap<String, Vec<u8>> {
    let cfg = write_config(dir, &tiny_config());
    for stage in ["stage1", "tst", "vtst", "e2e", "var_e2e"] {
        ok(&train(&cfg, stage, Some(threads)));
    }
    ok(&run(&["eval", "--config", cfg.to_str().unwrap()], Some(threads)));
    let pattern = format!("{}/out/*_eval.csv", dir.display());
    ok(&run(&["report", "--inputs", &pattern], Some(threads)));
    snapshot(&dir.join("out"))
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = full_pipeline(a.path(), "1");
    let second = full_pipeline(b.path(), "4");
    assert_eq!(first.keys().collect::<Vec<_>>(), second.keys().collect::<Vec<_>>());
    for (name, bytes) in &first {
        assert!(bytes == &second[name], "{name} differs between runs");
    }
    // 1 stage-1 + 4 stages × 1 width × 3 seeds
    let checkpoints = first
        .keys()
        .filter(|k| k.ends_with(".json") && !k.ends_with("_eval.json"))
        .count();
    assert_eq!(checkpoints, 13);
    assert!(first.contains_key("report.csv") && first.contains_key("report.txt"));

    // TST checkpoints share the stage-1 feature extractor exactly
    let out = a.path().join("out");
    let s1: Model = load_checkpoint(out.join("stage1_seed0.json")).unwrap();
    for seed in 0..3 {
        for tag in ["tst", "vtst"] {
            let m: Model = load_checkpoint(out.join(format!("{tag}_z3_seed{seed}.json"))).unwrap();
            assert_eq!(m.group(Group::Beta).digest(), s1.group(Group::Beta).digest(), "{tag} seed {seed}");
            assert!(!m.group(Group::Beta).trainable);
        }
    }
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let head = r.headers().unwrap().iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|x| x.unwrap().iter().map(str::to_string).collect())
        .collect();
    (head, rows)
}

#[test]
fn eval_matrix_and_column_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg["seeds"] = json!([0]);
    let path = write_config(dir.path(), &cfg);
    ok(&train(&path, "stage1", None));
    ok(&train(&path, "tst", None));
    ok(&train(&path, "vtst", None));
    ok(&run(&["eval", "--config", path.to_str().unwrap(), "--m", "1,2,5"], None));

    let out = dir.path().join("out");
    // eval sets: test, train, rot0, rot90, ood0
    let (head, tst) = read_csv(&out.join("tst_z3_seed0_eval.csv"));
    assert_eq!(tst.len(), 3 * 5);
    let col = |name: &str| head.iter().position(|h| h == name).unwrap();
    let metric_cols = col("n")..col("temperature");
    // deterministic head: identical metrics for every m
    for set in 0..5 {
        let a = &tst[set][metric_cols.clone()];
        for m in 1..3 {
            assert_eq!(&tst[m * 5 + set][metric_cols.clone()], a);
        }
    }
    // OOD columns only on OOD rows
    for row in &tst {
        let is_ood = row[col("eval_set")].starts_with("ood");
        assert_eq!(!row[col("auroc")].is_empty(), is_ood);
        assert_eq!(!row[col("fpr95")].is_empty(), is_ood);
        assert_eq!(row[col("accuracy")].is_empty(), is_ood);
    }
    // temperature-scaled rows in their own file, same shape
    let (_, ts) = read_csv(&out.join("tst_z3_seed0_ts_eval.csv"));
    assert_eq!(ts.len(), tst.len());
    assert!(ts.iter().all(|r| r[0] == "tst_ts" && !r[col("temperature")].is_empty()));
    assert!(!out.join("vtst_z3_seed0_ts_eval.csv").exists());

    let sidecar: Value = serde_json::from_slice(&fs::read(out.join("vtst_z3_seed0_eval.json")).unwrap()).unwrap();
    assert_eq!(sidecar.as_array().unwrap().len(), 15);
    assert_eq!(sidecar[0]["reliability_bins"]["bins"].as_array().unwrap().len(), 10);
    assert_eq!(sidecar[4]["eval_set"], "ood0");
    assert!(sidecar[4]["reliability_bins"].is_null());
}

fn code(out: &Output) -> Option<i32> {
    out.status.code()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let mut cfg = tiny_config();
    cfg["model"]["extractor"]["widths"] = json!([3]);
    let p = write_config(d, &cfg);
    let out = train(&p, "stage1", None);
    assert_eq!(code(&out), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.extractor"));

    let p = write_config(d, &tiny_config());
    assert_eq!(code(&train(&p, "tst", None)), Some(1), "missing stage-1 checkpoint");
    assert_eq!(code(&train(&p, "stage3", None)), Some(1));
    assert_eq!(code(&run(&["eval", "--config", p.to_str().unwrap()], None)), Some(1));
    assert_eq!(code(&train(&p, "stage1", Some("zero"))), Some(1));

    let mut cfg = tiny_config();
    cfg["z_dims"] = json!([]);
    assert_eq!(code(&train(&write_config(d, &cfg), "stage1", None)), Some(1));

    fs::write(d.join("bad.idx"), b"not an idx file").unwrap();
    let mut cfg = tiny_config();
    cfg["data"] = json!({"kind": "idx", "train_images": "bad.idx", "train_labels": "bad.idx",
                         "test_images": "bad.idx", "test_labels": "bad.idx"});
    assert_eq!(code(&train(&write_config(d, &cfg), "stage1", None)), Some(2));

    let mut cfg = tiny_config();
    cfg["stage1"]["learning_rate"] = json!(1e200);
    assert_eq!(code(&train(&write_config(d, &cfg), "stage1", None)), Some(3));
}

#[test]
fn e2e_warns_about_stage1_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg["seeds"] = json!([0]);
    cfg["stage1_checkpoint"] = json!("nowhere.json");
    let out = train(&write_config(dir.path(), &cfg), "e2e", None);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning: stage1_checkpoint is ignored"));
    assert!(dir.path().join("out/e2e_z3_seed0.json").is_file());
}

const HEADER: &str = "tag,z,seed,m,eval_set,n,accuracy,ece,mce,nll,mean_confidence,mean_entropy,auroc,fpr95,temperature";

#[test]
fn report_mean_sem_and_best_marking() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("a_eval.csv"),
        format!("{HEADER}\ntst,8,0,1,test,10,90,1,5,0.3,90,0.2,,,\nvtst,8,0,1,test,10,92,4,6,0.4,88,0.3,,,\n"),
    )
    .unwrap();
    fs::write(
        d.join("b_eval.csv"),
        format!("{HEADER}\ntst,8,1,1,test,10,94,3,5,0.3,90,0.2,,,\nvtst,8,1,1,test,10,92,4,6,0.2,88,0.3,,,\n"),
    )
    .unwrap();
    let out_dir = d.join("agg");
    ok(&run(
        &[
            "report",
            "--inputs",
            &format!("{}/*_eval.csv", d.display()),
            "--out-dir",
            out_dir.to_str().unwrap(),
        ],
        None,
    ));
    let (head, rows) = read_csv(&out_dir.join("report.csv"));
    let col = |name: &str| head.iter().position(|h| h == name).unwrap();
    assert_eq!(rows.len(), 2);
    let tst = &rows[0];
    assert_eq!(tst[col("ece_mean")], "2");
    assert_eq!(tst[col("ece_sem")], "1");
    assert_eq!(tst[col("accuracy_mean")], "92");
    assert_eq!(tst[col("accuracy_sem")], "2");
    // accuracy ties at 92: the first group wins; nll 0.3 vs 0.3 also ties
    assert_eq!(tst[col("best")], "accuracy;ece;mce;nll");
    assert_eq!(rows[1][col("best")], "");
    assert_eq!(rows[1][col("auroc_mean")], "");
    let txt = fs::read_to_string(out_dir.join("report.txt")).unwrap();
    assert!(txt.contains("**2 ± 1**"), "{txt}");
    assert_eq!(txt.matches("**").count() / 2, 4);
}

#[test]
fn report_single_seed_and_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("a_eval.csv"), format!("{HEADER}\ntst,8,0,1,test,10,90,1,5,0.3,90,0.2,,,\n")).unwrap();
    let pattern = format!("{}/*_eval.csv", d.display());
    ok(&run(&["report", "--inputs", &pattern], None));
    let (head, rows) = read_csv(&d.join("report.csv"));
    assert_eq!(rows[0][head.iter().position(|h| h == "ece_sem").unwrap()], "");

    assert_eq!(code(&run(&["report", "--inputs", &format!("{}/*.nothing", d.display())], None)), Some(1));

    fs::write(d.join("b_eval.csv"), "tag,z,seed,m,eval_set,n,ece\ntst,8,1,1,test,10,2\n").unwrap();
    assert_eq!(code(&run(&["report", "--inputs", &pattern], None)), Some(2));
}
