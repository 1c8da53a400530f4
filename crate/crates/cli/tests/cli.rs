//! End-to-end runs of the `ctrlab` binary on a tiny generated bundle.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn ctrlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctrlab")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn ok(args: &[&str]) -> String {
    let out = ctrlab(args);
    assert_eq!(code(&out), 0, "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: [&str; 10] = ["--n-users", "40", "--n-items", "60", "--n-categories", "6", "--n-train", "400", "--n-test", "200"];

fn gen_tiny(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    let mut args = vec!["gen-data", "--out", s(&data), "--seed", "3"];
    args.extend(TINY);
    ok(&args);
    data
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn pretrain_tiny(dir: &Path, data: &Path, mode: &str) -> PathBuf {
    let out = dir.join(format!("pre-{mode}"));
    ok(&["pretrain", "--data", s(data), "--out", s(&out), "--mode", mode, "--epochs", "1", "--dim", "8", "--ffn-dim", "16"]);
    out
}

#[test]
fn gen_data_writes_bundle_stats_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny(dir.path());
    for f in ["train.txt", "test.txt", "pretrain.txt", "cat_item_table.txt", "stats.json", "manifest.json"] {
        assert!(data.join(f).exists(), "missing {f}");
    }
    let m = manifest(&data);
    assert_eq!(m["tool"], "ctrlab");
    assert_eq!(m["run"]["command"], "gen-data");
    assert_eq!(m["run"]["generator"]["n_users"], 40);
    let stats: Value = serde_json::from_str(&fs::read_to_string(data.join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["n_train"], 400);
    assert!(stats["oracle_test_auc"].as_f64().unwrap() > 0.5);
}

#[test]
fn gen_data_is_deterministic_and_rerunnable() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny(dir.path());
    let again = dir.path().join("again");
    let stdout = ok(&["rerun", s(&data.join("manifest.json")), "--out", s(&again), "--check"]);
    assert!(stdout.contains("bit-exactly"), "{stdout}");
    assert_eq!(fs::read(data.join("train.txt")).unwrap(), fs::read(again.join("train.txt")).unwrap());
}

#[test]
fn full_pipeline_reruns_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny(dir.path());
    let pre = pretrain_tiny(dir.path(), &data, "cs+cd");
    assert!(pre.join("pretrained.ckpt").exists());
    assert_eq!(fs::read_to_string(pre.join("pretrain_log.jsonl")).unwrap().lines().count(), 1);

    let train = dir.path().join("train");
    let ckpt = pre.join("pretrained.ckpt");
    let stdout = ok(&[
        "train", "--data", s(&data), "--out", s(&train), "--backbone", "dcnv2", "--ps", "--mi", "--pretrained", s(&ckpt),
        "--hidden", "8,4", "--experts", "2", "--cross-depth", "1", "--cross-rank", "2", "--seed", "4",
    ]);
    assert!(stdout.contains("AUC"), "{stdout}");
    let m = manifest(&train);
    assert_eq!(m["run"]["integration"]["mi"], true);
    assert_eq!(m["run"]["integration"]["decoder_attached"], true);
    assert_eq!(m["run"]["integration"]["pretrain_mode"], "CsCd");
    assert_eq!(m["run"]["model"]["decoder"]["model_dim"], 8, "decoder shape follows the checkpoint");
    let metrics: Value = serde_json::from_str(&fs::read_to_string(train.join("metrics.json")).unwrap()).unwrap();
    let auc = metrics["test"]["auc"].as_f64().unwrap();

    let eval = dir.path().join("eval");
    ok(&["eval", "--data", s(&data), "--model", s(&train.join("model.ckpt")), "--out", s(&eval)]);
    let e: Value = serde_json::from_str(&fs::read_to_string(eval.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(e["metrics"]["auc"].as_f64().unwrap(), auc, "eval reproduces the training-time score");
    let line = ok(&["eval", "--data", s(&data), "--model", s(&train.join("model.ckpt")), "--split", "train"]);
    assert!(line.contains("\"split\":\"train\""), "{line}");

    for run in [&pre, &train, &eval] {
        let again = dir.path().join(format!("{}-again", run.file_name().unwrap().to_str().unwrap()));
        ok(&["rerun", s(&run.join("manifest.json")), "--out", s(&again), "--check"]);
    }
}

#[test]
fn ablate_emits_table_tsv_and_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny(dir.path());
    let out = dir.path().join("ablate");
    let stdout = ok(&[
        "ablate", "--data", s(&data), "--out", s(&out), "--rows", "1,3,5", "--backbones", "dnn,dcnv2_ta", "--seeds", "2",
        "--hidden", "8,4", "--dim", "8", "--ffn-dim", "16", "--pretrain-epochs", "1", "--checkpoints",
    ]);
    assert!(stdout.contains("dcnv2_ta"), "{stdout}");
    let tsv = fs::read_to_string(out.join("cells.tsv")).unwrap();
    let mut lines = tsv.lines();
    let header: Vec<&str> = lines.next().unwrap().split('\t').collect();
    assert_eq!(&header[..7], ["row_no", "config", "backbone", "auc_mean", "auc_std", "logloss_mean", "logloss_std"]);
    assert_eq!(lines.count(), 3 * 2);
    assert_eq!(fs::read_to_string(out.join("results.jsonl")).unwrap().lines().count(), 3 * 2 * 2);
    assert_eq!(fs::read_to_string(out.join("pretrain.jsonl")).unwrap().lines().count(), 2);
    assert_eq!(fs::read_dir(out.join("checkpoints")).unwrap().count(), 12);
    let again = dir.path().join("again");
    ok(&["rerun", s(&out.join("manifest.json")), "--out", s(&again), "--check", ]);
}

#[test]
fn config_file_merges_under_flags() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny(dir.path());
    let conf = dir.path().join("run.conf");
    fs::write(&conf, format!("# pre-training\ndata = {}\nepochs = 2\nnegatives = 3\ndim = 8\nffn_dim = 16\n", s(&data))).unwrap();
    let out = dir.path().join("pre");
    ok(&["pretrain", "--config", s(&conf), "--out", s(&out), "--epochs", "1"]);
    let m = manifest(&out);
    assert_eq!(m["run"]["pretrain"]["epochs"], 1, "flag wins");
    assert_eq!(m["run"]["pretrain"]["negatives"], 3, "file fills the rest");

    fs::write(&conf, "epochs = 1\nlayerz = 2\n").unwrap();
    let out = ctrlab(&["pretrain", "--config", s(&conf), "--data", s(&data), "--out", s(&dir.path().join("x"))]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("layerz"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(dir.path());
    assert_eq!(code(&ctrlab(&["--help"])), 0);
    assert_eq!(code(&ctrlab(&["--version"])), 0);
    assert_eq!(code(&ctrlab(&[])), 1);
    assert_eq!(code(&ctrlab(&["train", "--bogus"])), 1);
    assert_eq!(code(&ctrlab(&["gen-data", "--out", out, "--set", "nonsense=1"])), 1);
    assert_eq!(code(&ctrlab(&["gen-data", "--out", out, "--n-items", "2", "--n-categories", "5"])), 1);

    let missing = dir.path().join("nowhere");
    let r = ctrlab(&["train", "--data", s(&missing), "--out", out, "--ps", "--mi"]);
    assert_eq!(code(&r), 1, "PS+MI without a checkpoint is a config error");
    assert!(String::from_utf8_lossy(&r.stderr).contains("--pretrained"));
    assert_eq!(code(&ctrlab(&["train", "--data", s(&missing), "--out", out])), 2, "missing data is a data error");
    assert_eq!(code(&ctrlab(&["rerun", s(&missing.join("manifest.json")), "--out", out])), 2);
}

#[test]
fn incompatible_checkpoint_and_changed_inputs_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny(dir.path());
    let pre = pretrain_tiny(dir.path(), &data, "rs+sd");

    let other = dir.path().join("other");
    let mut args = vec!["gen-data", "--out", s(&other), "--seed", "3"];
    args.extend(TINY);
    let n_categories = args.len() - 5;
    args[n_categories] = "7";
    ok(&args);
    let r = ctrlab(&[
        "train", "--data", s(&other), "--out", s(&dir.path().join("t")), "--ps", "--pretrained",
        s(&pre.join("pretrained.ckpt")), "--hidden", "4",
    ]);
    assert_eq!(code(&r), 2, "{}", String::from_utf8_lossy(&r.stderr));

    fs::write(data.join("test.txt"), "tampered\n").unwrap();
    let r = ctrlab(&["rerun", s(&pre.join("manifest.json")), "--out", s(&dir.path().join("again"))]);
    assert_eq!(code(&r), 2);
    assert!(String::from_utf8_lossy(&r.stderr).contains("changed"));
}
