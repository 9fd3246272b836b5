use std::path::Path;
use std::process::{Command, Output};

fn synthface(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_synthface"))
        .args(args)
        .current_dir(dir)
        .env_remove("SYNTHFACE_CONFIG")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = synthface(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed with {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY_TRAIN: [&str; 14] = [
    "--set",
    "train.encoder.input_pool=16",
    "--set",
    "train.encoder.stem_width=4",
    "--set",
    "train.encoder.stages=[{width = 4, blocks = 1}]",
    "--set",
    "train.encoder.embedding_dim=8",
    "--set",
    "train.epochs=1",
    "--set",
    "train.milestones=[]",
    "--set",
    "train.batch_size=8",
];

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = synthface(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("Usage"), "{}", stderr(&out));
    let help = synthface(dir.path(), &["--help"]);
    assert_eq!(help.status.code(), Some(0));
    for cmd in ["sample-manifest", "validate-manifest", "summarize-manifest", "align", "train", "finetune", "evaluate", "swap", "probe", "finetune-sweep", "report"] {
        assert!(String::from_utf8_lossy(&help.stdout).contains(cmd), "{cmd}");
    }
}

#[test]
fn evaluate_with_missing_checkpoint_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("pairs.txt"), "2 1\na 1 2\na 1 b 1\nc 1 2\nc 1 d 1\n").unwrap();
    let out = synthface(
        dir.path(),
        &["evaluate", "--ckpt", "no_such_ckpt", "--pairs", "pairs.txt", "--images", ".", "--out", "eval"],
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("no_such_ckpt"), "{}", stderr(&out));
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "[margin]\nmragin = 0.3\n").unwrap();
    let out = synthface(dir.path(), &["--config", "c.toml", "sample-manifest", "--out", "m.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("mragin"), "{}", stderr(&out));

    let out = synthface(dir.path(), &["train", "--data", "."]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("paths.output"), "{}", stderr(&out));

    // Config from the environment.
    let out = Command::new(env!("CARGO_BIN_EXE_synthface"))
        .args(["sample-manifest", "--out", "m.jsonl"])
        .current_dir(dir.path())
        .env("SYNTHFACE_CONFIG", dir.path().join("c.toml"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn manifests_replay_from_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--seed", "11", "sample-manifest", "--identities", "6", "--samples", "4", "--out", "a/m.jsonl"]);
    ok(d, &["--seed", "11", "sample-manifest", "--identities", "6", "--samples", "4", "--out", "b/m.jsonl"]);
    let a = std::fs::read(d.join("a/m.jsonl")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b/m.jsonl")).unwrap());
    ok(d, &["--config", "a/m.jsonl.config.toml", "sample-manifest", "--identities", "6", "--samples", "4", "--out", "c/m.jsonl"]);
    assert_eq!(a, std::fs::read(d.join("c/m.jsonl")).unwrap());
    ok(d, &["--seed", "12", "sample-manifest", "--identities", "6", "--samples", "4", "--out", "d/m.jsonl"]);
    assert_ne!(a, std::fs::read(d.join("d/m.jsonl")).unwrap());

    assert!(ok(d, &["validate-manifest", "a/m.jsonl"]).contains("24 records valid"));
    assert!(!ok(d, &["summarize-manifest", "a/m.jsonl"]).is_empty());
    let json = ok(d, &["summarize-manifest", "a/m.jsonl", "--json"]);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["records"], 24);

    let text = std::fs::read_to_string(d.join("a/m.jsonl")).unwrap();
    let broken: String = text.lines().take(5).map(|l| format!("{l}\n")).collect();
    std::fs::write(d.join("broken.jsonl"), broken).unwrap();
    assert_eq!(synthface(d, &["validate-manifest", "broken.jsonl"]).status.code(), Some(2));
}

#[test]
fn swap_keeps_identity_counts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["sample-manifest", "--identities", "40", "--samples", "20", "--out", "base.jsonl"]);
    ok(d, &["derive-variants", "--baseline", "base.jsonl", "--axis", "hat", "--out", "hat.jsonl"]);
    let args = ["swap", "--baseline", "base.jsonl", "--variants", "hat.jsonl", "--fraction", "0.25", "--axes", "accessories.hat", "--out", "swapped.jsonl"];
    ok(d, &args);
    let plan: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("swap_plan.json")).unwrap()).unwrap();
    assert_eq!(plan["swapped"], 200);
    let first = std::fs::read(d.join("swap_plan.json")).unwrap();
    ok(d, &args);
    assert_eq!(first, std::fs::read(d.join("swap_plan.json")).unwrap());
    let wrong = synthface(d, &["swap", "--baseline", "base.jsonl", "--variants", "hat.jsonl", "--fraction", "0.25", "--axes", "accessories.glasses", "--out", "x.jsonl"]);
    assert_eq!(wrong.status.code(), Some(2));
}

#[test]
fn toy_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["sample-manifest", "--identities", "20", "--samples", "3", "--out", "m.jsonl"]);
    ok(d, &["render-toy", "--manifest", "m.jsonl", "--out", "render", "--size", "112"]);
    ok(d, &["make-pairs", "--manifest", "m.jsonl", "--per-fold", "2", "--out", "pairs.txt"]);
    let aligned = ok(d, &["align", "--landmarks", "render/landmarks.csv", "--out", "aligned", "--manifest", "m.jsonl"]);
    assert!(aligned.contains("aligned 60 images (0 reused)"), "{aligned}");
    let again = ok(d, &["align", "--landmarks", "render/landmarks.csv", "--out", "aligned"]);
    assert!(again.contains("(60 reused)"), "{again}");

    let mut train = TINY_TRAIN.to_vec();
    train.extend(["train", "--data", "aligned", "--out", "run/train"]);
    ok(d, &train);
    assert!(d.join("run/train/checkpoints/epoch_1/state.json").exists());
    assert!(d.join("run/train/config.snapshot.toml").exists());
    let mut resume = TINY_TRAIN.to_vec();
    resume.extend(["train", "--data", "aligned", "--out", "run/train", "--resume"]);
    assert!(ok(d, &resume).contains("epoch 1"));

    let ckpt = "run/train/checkpoints/epoch_1";
    let eval = ok(d, &["evaluate", "--ckpt", ckpt, "--pairs", "pairs.txt", "--landmarks", "render/landmarks.csv", "--out", "run/eval", "--save-embeddings", "run/emb.bin"]);
    assert!(eval.contains("accuracy"), "{eval}");
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("run/eval/report.json")).unwrap()).unwrap();
    assert_eq!(report["folds"].as_array().unwrap().len(), 10);
    // The stored embeddings reproduce the report exactly.
    ok(d, &["evaluate", "--embeddings", "run/emb.bin", "--pairs", "pairs.txt", "--out", "run/eval_cached"]);
    assert_eq!(
        std::fs::read(d.join("run/eval/report.json")).unwrap(),
        std::fs::read(d.join("run/eval_cached/report.json")).unwrap()
    );

    let mut ft = TINY_TRAIN.to_vec();
    ft.extend(["finetune", "--ckpt", ckpt, "--data", "aligned", "--out", "run/finetune"]);
    ok(d, &ft);
    let state: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("run/finetune/checkpoints/epoch_1/state.json")).unwrap()).unwrap();
    let lrs: Vec<f64> = state["groups"].as_array().unwrap().iter().map(|g| g["base_lr"].as_f64().unwrap()).collect();
    assert_eq!(lrs, vec![0.1 / 100.0, 0.1 / 10.0]);

    let probe_args = ["--set", "probe.swaps=2", "--set", "probe.yaw_degrees=[0.0, 20.0]", "--set", "probe.intensities=[0.0, 0.5]"];
    let mut mk = probe_args.to_vec();
    mk.extend(["make-probe", "--manifest", "m.jsonl", "--identity", "3", "--out", "probe"]);
    ok(d, &mk);
    ok(d, &["probe", "--reference", "probe_reference", "--conditions", "probe/yaw.json", "--ckpt", ckpt, "--images", "probe/images", "--out", "run/probe"]);
    let probe: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("run/probe/probe.json")).unwrap()).unwrap();
    assert_eq!(probe["conditions"].as_array().unwrap().len(), 4);
    assert_eq!(probe["difference"]["values"].as_array().unwrap().len(), 2);

    let mut sweep = TINY_TRAIN.to_vec();
    sweep.extend(["finetune-sweep", "--ckpt", ckpt, "--real", "aligned", "--batches", "0,2", "--pairs", "pairs.txt", "--landmarks", "render/landmarks.csv", "--out", "run/sweep"]);
    ok(d, &sweep);
    let rows: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("run/sweep/sweep.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 2);
    assert!(rows[0]["scratch"].is_null());
    let too_many = synthface(d, &["finetune-sweep", "--ckpt", ckpt, "--real", "aligned", "--batches", "21", "--pairs", "pairs.txt", "--landmarks", "render/landmarks.csv", "--out", "run/sweep2"]);
    assert_eq!(too_many.status.code(), Some(2));

    ok(d, &["report", "run"]);
    let summary = std::fs::read_to_string(d.join("run/summary.md")).unwrap();
    assert!(summary.contains("eval_cached"), "{summary}");
    assert!(summary.contains("Sensitivity probe"));
    assert!(summary.contains("Fine-tuning sweep"));
    let probe_tsv = std::fs::read_to_string(d.join("run/probe.tsv")).unwrap();
    assert_eq!(probe_tsv.lines().count(), 1 + 4);
}

#[test]
fn report_on_empty_dir_warns() {
    let dir = tempfile::tempdir().unwrap();
    let out = synthface(dir.path(), &["report", "."]);
    assert!(out.status.success());
    assert!(stderr(&out).contains("no results"), "{}", stderr(&out));
    let missing = synthface(dir.path(), &["report", "nowhere"]);
    assert_eq!(missing.status.code(), Some(3));
}
