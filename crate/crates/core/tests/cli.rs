use std::path::Path;
use std::process::Command;

fn kflow(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_kflow")).args(args).output().unwrap();
    assert!(out.status.success(), "kflow {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn header(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn every_subcommand_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    let s = |name: &str| p(name).to_str().unwrap().to_string();

    std::fs::write(p("spec.kv"), "seed = 5\nnoise_std = 0.2\n").unwrap();
    kflow(&["gen", "--spec", &s("spec.kv"), "--out", &s("data.kf"), "--count", "24"]);
    let data = koopflow::synthbench::load_dataset(p("data.kf")).unwrap();
    assert_eq!(data.len(), 24);

    std::fs::write(p("run.kv"), "steps = 4\nbatch = 8\nmodel.hidden = 16\nmodel.blocks = 1\n").unwrap();
    kflow(&[
        "train", "--data", &s("data.kf"), "--config", &s("run.kv"), "--out", &s("model.kf"),
        "--log", &s("log.csv"), "--checkpoint-every", "2",
    ]);
    let log = std::fs::read_to_string(p("log.csv")).unwrap();
    assert!(log.starts_with("step,fm,ct,"));
    assert_eq!(log.lines().count(), 5);
    let ckpt = koopflow::checkpoint::Checkpoint::load(p("model.kf")).unwrap();
    assert_eq!(ckpt.train.unwrap().steps, 4);
    assert_eq!(ckpt.model.config.hidden, 16);

    kflow(&["sample", "--ckpt", &s("model.kf"), "--nfe", "2", "--out", &s("sample.csv"), "--data", &s("data.kf"), "--count", "3"]);
    assert_eq!(header(&p("sample.csv")), "trajectory,tau,a0,a1,v_inv_norm,v_var_norm");
    assert_eq!(std::fs::read_to_string(p("sample.csv")).unwrap().lines().count(), 1 + 3 * 16);

    let summary = kflow(&["analyze", "--ckpt", &s("model.kf"), "--data", &s("data.kf"), "--out", &s("analysis.csv"), "--draws", "2"]);
    assert!(summary.contains("v_var energy"));
    assert_eq!(header(&p("analysis.csv")), "trajectory,tau,event,dilated_event,v_inv_energy,v_var_energy,naive_energy");

    std::fs::write(p("small.kv"), "steps = 2\nbatch = 8\nmodel.hidden = 16\nmodel.blocks = 1\n").unwrap();
    kflow(&[
        "ablate", "--axis", "nfe", "--values", "1,2", "--out", &s("ablate.csv"), "--config", &s("small.kv"),
        "--train-count", "16", "--heldout-count", "4",
    ]);
    assert_eq!(header(&p("ablate.csv")), "value,trajectory_mse,event_r,naive_r,inv_stability,error");

    let bench = kflow(&["bench-dmd", "--d", "16", "--window", "4", "--iters", "50"]);
    assert!(bench.contains("median"));
}

#[test]
fn bad_input_fails_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.kf");
    let out = Command::new(env!("CARGO_BIN_EXE_kflow"))
        .args(["sample", "--ckpt", missing.to_str().unwrap(), "--out", "x.csv"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("kflow:"));

    let out = Command::new(env!("CARGO_BIN_EXE_kflow"))
        .args(["ablate", "--axis", "depth", "--values", "1", "--out", "x.csv"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
