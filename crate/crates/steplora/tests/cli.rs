//! End-to-end checks of the command-line surface: exit codes, artifact
//! layout, and checkpoint structure.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use steplora::checkpoint;
use steplora::config::Stage;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_steplora")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn write_config(dir: &Path, name: &str, edit: impl Fn(&mut serde_json::Value)) -> PathBuf {
    let mut cfg = serde_json::json!({
        "seed": 5,
        "model": { "data_dim": 2, "hidden_width": 16, "hidden_layers": 3, "time_embed_dim": 8 },
        "schedule": { "timesteps": 24, "kind": "linear", "beta_min": 1e-3, "beta_max": 0.15 },
        "dataset": { "kind": "gauss_circle", "modes": 8, "radius": 4.0, "sigma": 0.15 },
        "adapters": { "scales": [8, 1], "rank": 4, "alpha": 4.0 },
        "train": { "stage": "base", "steps": 30, "batch": 8, "lr": 1e-3 },
        "sample": { "count": 20, "mode": "base" },
        "eval": { "intervals": 4, "samples_per_interval": 30, "generated": 30,
                  "drift_layer": 1, "drift_probes": 8 }
    });
    edit(&mut cfg);
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

struct Pipeline {
    dir: tempfile::TempDir,
    base_cfg: PathBuf,
    foster_cfg: PathBuf,
    assemble_cfg: PathBuf,
}

fn build_pipeline() -> Pipeline {
    let dir = tempfile::tempdir().unwrap();
    let base_cfg = write_config(dir.path(), "base.json", |_| {});
    let foster_cfg = write_config(dir.path(), "foster.json", |c| {
        c["train"]["stage"] = serde_json::json!("foster");
        c["train"]["steps"] = serde_json::json!(8);
        c["sample"]["mode"] = serde_json::json!("foster");
    });
    let assemble_cfg = write_config(dir.path(), "assemble.json", |c| {
        c["train"]["stage"] = serde_json::json!("assemble");
        c["train"]["steps"] = serde_json::json!(8);
        c["sample"]["mode"] = serde_json::json!("assembled");
    });
    Pipeline {
        dir,
        base_cfg,
        foster_cfg,
        assemble_cfg,
    }
}

impl Pipeline {
    fn path(&self, suffix: &str) -> String {
        self.dir.path().join(suffix).to_str().unwrap().to_string()
    }
}

#[test]
fn full_pipeline_artifacts_and_checkpoint_structure() {
    let p = build_pipeline();
    let out = run(&[
        "train-base",
        "--config",
        p.base_cfg.to_str().unwrap(),
        "--out",
        &p.path("base"),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(Path::new(&p.path("base/ckpt/manifest.json")).exists());
    assert!(Path::new(&p.path("base/ckpt/tensors.bin")).exists());
    assert!(Path::new(&p.path("base/loss.csv")).exists());
    assert!(Path::new(&p.path("base/report.json")).exists());

    let out = run(&[
        "train-foster",
        "--config",
        p.foster_cfg.to_str().unwrap(),
        "--ckpt",
        &p.path("base/ckpt"),
        "--out",
        &p.path("foster"),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    // scales (8, 1) on 3 adapted layers: 8 intervals -> 3 * 8 * 2 tensors for
    // the fine scale, 9 adapters per layer overall
    let (store, manifest) = checkpoint::load(Path::new(&p.path("foster/ckpt"))).unwrap();
    assert_eq!(manifest.stage, Stage::Foster);
    let n8_tensors = store.names().filter(|n| n.starts_with("expert.n8.")).count();
    assert_eq!(n8_tensors, 3 * 8 * 2);
    let adapters_per_layer = store
        .names()
        .filter(|n| n.starts_with("expert.") && n.contains(".layer1.") && n.ends_with(".a"))
        .count();
    assert_eq!(adapters_per_layer, 9);

    let out = run(&[
        "assemble",
        "--config",
        p.assemble_cfg.to_str().unwrap(),
        "--ckpt",
        &p.path("foster/ckpt"),
        "--out",
        &p.path("asm"),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    // router embedding table is timesteps x (m-1)
    let (store, manifest) = checkpoint::load(Path::new(&p.path("asm/ckpt"))).unwrap();
    assert_eq!(manifest.stage, Stage::Assemble);
    let e = store.value("router.layer1.e").unwrap();
    assert_eq!((e.rows(), e.cols()), (24, 1));
    let fw = store.value("router.layer1.fw").unwrap();
    assert_eq!((fw.rows(), fw.cols()), (1, 16));

    // sampling in assembled mode emits expert and gate logs
    let out = run(&[
        "sample",
        "--config",
        p.assemble_cfg.to_str().unwrap(),
        "--ckpt",
        &p.path("asm/ckpt"),
        "--out",
        &p.path("samples"),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let samples = std::fs::read_to_string(p.path("samples/samples.csv")).unwrap();
    assert_eq!(samples.lines().count(), 21); // header + one row per sample
    assert!(samples.starts_with("x0,x1\n"));
    let gates = std::fs::read_to_string(p.path("samples/gates.csv")).unwrap();
    assert!(gates.starts_with("t,layer,g2\n"));
    assert_eq!(gates.lines().count(), 1 + 24 * 3); // every step x adapted layer
    let experts = std::fs::read_to_string(p.path("samples/experts.csv")).unwrap();
    assert_eq!(experts.lines().count(), 1 + 24 * 2); // every step x scale

    // eval emits its three artifacts
    let out = run(&[
        "eval",
        "--config",
        p.assemble_cfg.to_str().unwrap(),
        "--ckpt",
        &p.path("asm/ckpt"),
        "--out",
        &p.path("eval"),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for artifact in ["eval/eval.json", "eval/interval_loss.csv", "eval/drift.csv"] {
        assert!(Path::new(&p.path(artifact)).exists(), "{artifact} missing");
    }

    // grad-check on the assembled checkpoint passes and exits 0
    let out = run(&[
        "grad-check",
        "--config",
        p.assemble_cfg.to_str().unwrap(),
        "--ckpt",
        &p.path("asm/ckpt"),
        "--out",
        &p.path("gc"),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("foster loss"), "{stdout}");
    assert!(stdout.contains("assemble loss"), "{stdout}");
}

#[test]
fn usage_errors_exit_2() {
    let p = build_pipeline();
    // missing config file, path reported
    let out = run(&["train-base", "--config", "/no/such/config.json", "--out", &p.path("x")]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("/no/such/config.json"));

    // unknown command and unknown flag
    assert_eq!(code(&run(&["frobnicate", "--config", p.base_cfg.to_str().unwrap()])), 2);
    assert_eq!(code(&run(&["train-base", "--wat"])), 2);
    assert_eq!(code(&run(&[])), 2);

    // config with unknown key
    let bad = write_config(p.dir.path(), "bad.json", |c| {
        c["unexpected"] = serde_json::json!(true);
    });
    let out = run(&["train-base", "--config", bad.to_str().unwrap(), "--out", &p.path("x")]);
    assert_eq!(code(&out), 2);

    // stage not matching the command
    let out = run(&[
        "train-base",
        "--config",
        p.foster_cfg.to_str().unwrap(),
        "--out",
        &p.path("x"),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn divergence_exits_3() {
    let p = build_pipeline();
    let diverge = write_config(p.dir.path(), "diverge.json", |c| {
        c["train"]["lr"] = serde_json::json!(100.0);
        c["train"]["steps"] = serde_json::json!(10);
    });
    let out = run(&["train-base", "--config", diverge.to_str().unwrap(), "--out", &p.path("x")]);
    assert_eq!(
        code(&out),
        3,
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn stage_mismatches_exit_4() {
    let p = build_pipeline();
    let out = run(&[
        "train-base",
        "--config",
        p.base_cfg.to_str().unwrap(),
        "--out",
        &p.path("base"),
    ]);
    assert_eq!(code(&out), 0);

    // fostering on top of a foster checkpoint
    let out = run(&[
        "train-foster",
        "--config",
        p.foster_cfg.to_str().unwrap(),
        "--ckpt",
        &p.path("base/ckpt"),
        "--out",
        &p.path("foster"),
    ]);
    assert_eq!(code(&out), 0);
    let out = run(&[
        "train-foster",
        "--config",
        p.foster_cfg.to_str().unwrap(),
        "--ckpt",
        &p.path("foster/ckpt"),
        "--out",
        &p.path("y"),
    ]);
    assert_eq!(code(&out), 4);

    // assembling straight from a base checkpoint
    let out = run(&[
        "assemble",
        "--config",
        p.assemble_cfg.to_str().unwrap(),
        "--ckpt",
        &p.path("base/ckpt"),
        "--out",
        &p.path("y"),
    ]);
    assert_eq!(code(&out), 4);

    // assembling when the checkpoint lacks a configured scale
    let foster_single = write_config(p.dir.path(), "foster_single.json", |c| {
        c["train"]["stage"] = serde_json::json!("foster");
        c["train"]["steps"] = serde_json::json!(4);
        c["adapters"]["scales"] = serde_json::json!([8]);
    });
    let out = run(&[
        "train-foster",
        "--config",
        foster_single.to_str().unwrap(),
        "--ckpt",
        &p.path("base/ckpt"),
        "--out",
        &p.path("foster8"),
    ]);
    assert_eq!(code(&out), 0);
    let out = run(&[
        "assemble",
        "--config",
        p.assemble_cfg.to_str().unwrap(),
        "--ckpt",
        &p.path("foster8/ckpt"),
        "--out",
        &p.path("y"),
    ]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));

    // sampling in assembled mode from a checkpoint without routers
    let out = run(&[
        "sample",
        "--config",
        p.assemble_cfg.to_str().unwrap(),
        "--ckpt",
        &p.path("foster/ckpt"),
        "--out",
        &p.path("y"),
    ]);
    assert_eq!(code(&out), 4);

    // architecture mismatch between config and checkpoint
    let wider = write_config(p.dir.path(), "wider.json", |c| {
        c["model"]["hidden_width"] = serde_json::json!(32);
    });
    let out = run(&[
        "sample",
        "--config",
        wider.to_str().unwrap(),
        "--ckpt",
        &p.path("base/ckpt"),
        "--out",
        &p.path("y"),
    ]);
    assert_eq!(code(&out), 4);
}

#[test]
fn seed_flag_overrides_config() {
    let p = build_pipeline();
    for (out_dir, seed) in [("s1", "77"), ("s2", "78"), ("s3", "77")] {
        let out = run(&[
            "train-base",
            "--config",
            p.base_cfg.to_str().unwrap(),
            "--out",
            &p.path(out_dir),
            "--seed",
            seed,
        ]);
        assert_eq!(code(&out), 0);
    }
    let blob = |s: &str| std::fs::read(p.path(s)).unwrap();
    assert_eq!(blob("s1/ckpt/tensors.bin"), blob("s3/ckpt/tensors.bin"));
    assert_ne!(blob("s1/ckpt/tensors.bin"), blob("s2/ckpt/tensors.bin"));
}
