use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_prefixprop"));
    c.env_remove("PREFIXPROP_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

const TINY: &str = r#"{
  "task": {"generator": "needle", "seq_len": 24, "n_classes": 2, "n_train": 16, "n_dev": 8, "n_test": 8},
  "model": {"vocab_size": 60, "d_model": 8, "n_heads": 2, "n_layers": 1, "d_ff": 16, "max_len": 24,
            "window": 4, "prefix_len": 2, "n_classes": 2},
  "train": {"epochs": 2, "batch_size": 8},
  "warm": {"seq_len": 24, "n_examples": 34, "epochs": 1},
  "seeds": [0, 1]
}"#;

fn write_config(dir: &Path) -> String {
    let p = dir.join("cfg.json");
    fs::write(&p, TINY).unwrap();
    p.display().to_string()
}

#[test]
fn verify_kernel_passes_and_strict_tolerance_fails() {
    let ok = run(&["verify-kernel", "--trials", "30"]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stderr));
    let report: serde_json::Value = serde_json::from_slice(&ok.stdout).unwrap();
    assert_eq!(report["passed"], true);
    assert!(report["max_error"].as_f64().unwrap() < 1e-10);

    let strict = run(&["verify-kernel", "--trials", "5", "--tol", "0"]);
    assert_eq!(code(&strict), 2);
    let report: serde_json::Value = serde_json::from_slice(&strict.stdout).unwrap();
    assert!(report["max_error"].as_f64().unwrap() > 0.0);
}

#[test]
fn config_errors_exit_one_with_field_path() {
    let o = run(&["gen-data", "--set", "model.d_model=\"wide\""]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("model.d_model"));
    assert_eq!(code(&run(&["train", "--bogus"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn train_rerun_is_byte_identical_and_report_works() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let mut outputs = Vec::new();
    for run_name in ["a", "b"] {
        let out = dir.path().join(run_name);
        let o = run(&["train", "--config", &cfg, "--outdir", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        outputs.push(out);
    }
    for mode in ["prefix_tuning", "prefix_propagation"] {
        for seed in ["0", "1"] {
            for file in ["metrics.jsonl", "reliability.csv", "model.ckpt"] {
                let a = fs::read(outputs[0].join(mode).join(seed).join(file)).unwrap();
                let b = fs::read(outputs[1].join(mode).join(seed).join(file)).unwrap();
                assert!(!a.is_empty());
                assert_eq!(a, b, "{mode}/{seed}/{file}");
            }
        }
    }
    assert_eq!(
        fs::read(outputs[0].join("summary.json")).unwrap(),
        fs::read(outputs[1].join("summary.json")).unwrap()
    );
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(outputs[0].join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["comparison"]["prefix_param_ratio"], 0.5);
    assert_eq!(summary["modes"][0]["runs"].as_array().unwrap().len(), 2);

    // The saved config reproduces the run.
    let saved = outputs[0].join("config.json");
    let c = dir.path().join("c");
    let o = run(&["train", "--config", saved.to_str().unwrap(), "--outdir", c.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert_eq!(
        fs::read(c.join("prefix_propagation/1/metrics.jsonl")).unwrap(),
        fs::read(outputs[0].join("prefix_propagation/1/metrics.jsonl")).unwrap()
    );

    let report = run(&["report", "--outdir", outputs[0].to_str().unwrap()]);
    assert_eq!(code(&report), 0);
    assert!(String::from_utf8_lossy(&report.stdout).contains("prefix_propagation"));
    let csv = run(&["report", "--outdir", outputs[0].to_str().unwrap(), "--mode", "prefix_tuning", "--seed", "0"]);
    assert!(String::from_utf8_lossy(&csv.stdout).starts_with("bin_low,bin_high,count,mean_confidence,accuracy"));

    let ckpt = outputs[0].join("prefix_tuning/0/model.ckpt");
    let ev = run(&["eval", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(code(&ev), 0, "{}", String::from_utf8_lossy(&ev.stderr));
    let m: serde_json::Value = serde_json::from_slice(&ev.stdout).unwrap();
    assert!(m["accuracy"].as_f64().unwrap() >= 0.0);
}

#[test]
fn divergence_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("d");
    let o = run(&[
        "train", "--config", &cfg, "--outdir", out.to_str().unwrap(), "--modes", "fine_tuning",
        "--seeds", "0", "--set", "train.lr=1e300", "--set", "train.warmup_fraction=0", "--set", "warm=null",
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("step"));
}

#[test]
fn gen_data_is_deterministic_and_honours_seed_env() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let a = run(&["gen-data", "--config", &cfg, "--split", "dev"]);
    let b = run(&["gen-data", "--config", &cfg, "--split", "dev"]);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    let lines: Vec<&str> = std::str::from_utf8(&a.stdout).unwrap().lines().collect();
    assert_eq!(lines.len(), 8);
    let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(first["tokens"].as_array().unwrap().len(), 24);

    let bad = bin().args(["verify-kernel", "--trials", "2"]).env("PREFIXPROP_SEED", "x").output().unwrap();
    assert_eq!(code(&bad), 1);
    let env = bin().args(["verify-kernel", "--trials", "2"]).env("PREFIXPROP_SEED", "5").output().unwrap();
    let flag = run(&["verify-kernel", "--trials", "2", "--seed", "5"]);
    assert_eq!(env.stdout, flag.stdout);
}

#[test]
fn bench_reports_three_modes() {
    let o = run(&[
        "bench", "--set", "model.d_model=8", "--set", "model.d_ff=16", "--set", "model.max_len=32",
        "--set", "task.seq_len=32", "--set", "warm=null", "--seq-len", "32", "--inputs", "2", "--repeats", "5",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["modes"].as_array().unwrap().len(), 3);
    assert!(r["ratio"].as_f64().unwrap() > 0.0);
    assert_eq!(code(&run(&["bench", "--repeats", "3"])), 1);
}
