use std::fs;
use std::path::{Path, PathBuf};

use pointabm::model::{Checkpoint, CheckpointKind};
use pointabm_cli::run;

const TINY: &str = r#"{
  "points_per_cloud": 64, "n_patches": 8, "patch_size": 8, "width": 16, "heads": 2,
  "bissm_layers": 2, "d_state": 4, "embed_point_hidden": 16, "embed_point_out": 16,
  "embed_token_hidden": 16, "pos_hidden": 16, "head_hidden": 16, "decoder_layers": 1,
  "shapes": ["sphere", "cube", "torus"], "n_per_class": 10, "epochs": 2, "batch_size": 4
}"#;

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

fn cli(args: &[&str]) -> i32 {
    run(std::iter::once("pointabm").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_outputs_and_eval_reads_them() {
    let (dir, cfg) = setup();
    let out = dir.path().join("run");
    assert_eq!(
        cli(&[
            "train",
            "--config",
            s(&cfg),
            "--out",
            s(&out),
            "--seed",
            "5",
            "--save-every",
            "1"
        ]),
        0
    );
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,step,lr,loss,train_acc,val_acc");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("0,0,,,"));
    assert!(out.join("checkpoint_epoch0001.pabm").exists());
    let ck = Checkpoint::load(&out.join("checkpoint.pabm")).unwrap();
    assert_eq!(ck.meta.kind, CheckpointKind::Classifier);
    assert_eq!((ck.meta.seed, ck.meta.epoch, ck.config.num_classes), (5, 2, 3));
    assert_eq!(ck.meta.class_names, ["sphere", "cube", "torus"]);
    let ck_path = out.join("checkpoint.pabm");
    assert_eq!(
        cli(&["eval", "--config", s(&cfg), "--checkpoint", s(&ck_path), "--json"]),
        0
    );
    assert_eq!(cli(&["eval", "--checkpoint", s(&ck_path), "--set", "width=32"]), 2);
}

#[test]
fn pretrain_then_finetune() {
    let (dir, cfg) = setup();
    let pre = dir.path().join("pre");
    assert_eq!(
        cli(&["pretrain", "--config", s(&cfg), "--out", s(&pre), "--epochs", "1"]),
        0
    );
    let enc = pre.join("encoder.pabm");
    let ck = Checkpoint::load(&enc).unwrap();
    assert_eq!(ck.meta.kind, CheckpointKind::Encoder);
    assert!(ck.params.names().iter().all(|n| n.starts_with("encoder.")));
    let ft = dir.path().join("ft");
    assert_eq!(
        cli(&[
            "train",
            "--config",
            s(&cfg),
            "--out",
            s(&ft),
            "--init",
            s(&enc),
            "--epochs",
            "1"
        ]),
        0
    );
    // Encoder-only checkpoints cannot be evaluated.
    assert_eq!(cli(&["eval", "--config", s(&cfg), "--checkpoint", s(&enc)]), 2);
}

#[test]
fn generated_dataset_trains_from_manifests() {
    let (dir, cfg) = setup();
    let data = dir.path().join("data");
    assert_eq!(cli(&["gen", "--config", s(&cfg), "--out", s(&data)]), 0);
    assert!(data.join("train_manifest.tsv").exists() && data.join("test_manifest.tsv").exists());
    let out = dir.path().join("run");
    let set = format!("data={}", s(&data));
    assert_eq!(
        cli(&[
            "train",
            "--config",
            s(&cfg),
            "--set",
            &set,
            "--out",
            s(&out),
            "--epochs",
            "1"
        ]),
        0
    );
}

#[test]
fn exit_codes() {
    let (dir, cfg) = setup();
    let out = dir.path().join("x");
    assert_eq!(
        cli(&["train", "--config", s(&cfg), "--out", s(&out), "--set", "num_classes=4"]),
        2
    );
    assert_eq!(cli(&["train", "--config", s(&cfg), "--set", "epochz=1"]), 2);
    assert_eq!(cli(&["train", "--config", s(&dir.path().join("missing.json"))]), 1);
    assert_eq!(cli(&["eval", "--checkpoint", s(&dir.path().join("missing.pabm"))]), 1);
    let junk = dir.path().join("junk.pabm");
    fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(cli(&["eval", "--checkpoint", s(&junk)]), 2);
    assert_eq!(cli(&["frobnicate"]), 2);
    assert_eq!(cli(&["inspect", "--json"]), 0);
}
