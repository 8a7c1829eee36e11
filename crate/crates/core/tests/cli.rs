use std::path::Path;
use std::process::{Command, Output};

fn halomesh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_halomesh"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&halomesh(&["no-such-command"])), 2);
    assert_eq!(code(&halomesh(&["verify", "--mesh", "x=two"])), 2);
    assert_eq!(code(&halomesh(&["train"])), 2);
    assert_eq!(code(&halomesh(&["train", "--data", "d", "--steps", "-3"])), 2);
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    let o = halomesh(&["train", "--data", s(&missing), "--steps", "1"]);
    assert_eq!(code(&o), 1);
    assert!(!o.stderr.is_empty());
    // extent not divisible by the mesh
    let o = halomesh(&["bench", "--mesh", "x=3", "--extent", "16", "--steps", "1", "--warmup", "0"]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn verify_passes_on_a_split_mesh() {
    let o = halomesh(&["verify", "--mesh", "x=2,y=2", "--seeds", "2"]);
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{out}");
    assert!(out.lines().all(|l| !l.starts_with("FAIL")));
}

#[test]
fn synth_train_eval_augment_bench() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = halomesh(&["synth-data", "--n", "4", "--extent", "16", "--seed", "2", "--out", s(&data)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(data.join("manifest.tsv").is_file());

    let run = dir.path().join("run");
    let o = halomesh(&[
        "train", "--data", s(&data), "--mesh", "b=2", "--blocks", "4,8", "--convs-per-block", "1", "--steps", "4",
        "--checkpoint-every", "2", "--optimizer", "adam", "--augment", "--augment-sigma", "0", "--out", s(&run),
    ]);
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.contains("step,loss,dice_loss,ce_loss,lr,wall_ms"));
    assert!(out.contains("dice_per_case"));
    assert!(run.join("metrics.csv").is_file());
    assert!(run.join("checkpoints").join("step_000004").is_dir() || run.join("step_000004").is_dir());

    let o = halomesh(&["eval", "--run", s(&run), "--data", s(&data)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("dice_per_case"));

    // resuming continues the metrics log
    let o = halomesh(&[
        "train", "--data", s(&data), "--mesh", "b=2", "--blocks", "4,8", "--convs-per-block", "1", "--steps", "6",
        "--checkpoint-every", "2", "--optimizer", "adam", "--augment", "--augment-sigma", "0", "--out", s(&run), "--resume",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    let steps: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["1", "2", "3", "4", "5", "6"]);
    // a checkpoint written by adam cannot seed an sgd run
    let o = halomesh(&[
        "train", "--data", s(&data), "--mesh", "b=2", "--blocks", "4,8", "--convs-per-block", "1", "--steps", "8",
        "--out", s(&run), "--resume",
    ]);
    assert_eq!(code(&o), 1);

    let aug = dir.path().join("aug");
    let o = halomesh(&["augment", "--input", s(&data), "--output", s(&aug), "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(aug.join("manifest.tsv").is_file());

    let csv_path = dir.path().join("bench.csv");
    let o = halomesh(&[
        "bench", "--mesh", "x=2,y=2", "--extent", "16", "--blocks", "4,8", "--convs-per-block", "1", "--steps", "1",
        "--warmup", "0", "--csv", s(&csv_path),
    ]);
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{out}");
    assert!(out.contains("halo bytes match"));
    assert!(std::fs::read_to_string(&csv_path).unwrap().starts_with("layer,phase,wall_ms,bytes"));
}
