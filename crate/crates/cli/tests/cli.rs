use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dynroute_core::trainer::{Checkpoint, Trainer};
use tempfile::TempDir;

fn dynroute(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynroute"))
        .args(args)
        .current_dir(dir)
        .env_remove("DYNROUTE_OUT")
        .output()
        .expect("spawn dynroute")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn value(text: &str, key: &str) -> u64 {
    let prefix = format!("{key} = ");
    text.lines().find_map(|l| l.strip_prefix(&prefix)).unwrap_or_else(|| panic!("no {key} in {text}")).parse().unwrap()
}

#[test]
fn cost_fcn32s_matches_table_and_writes_file() {
    let d = TempDir::new().unwrap();
    let o = dynroute(d.path(), &["cost", "--preset", "fcn32s", "--input", "3x1024x2048", "--out", "r"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let gflops = value(&text, "total_macs") as f64 / 1e9;
    assert!((gflops - 35.1).abs() / 35.1 < 0.35, "{gflops}");
    assert_eq!(value(&text, "total_macs"), 24_844_959_744);
    assert_eq!(fs::read_to_string(d.path().join("r/cost_fcn32s.txt")).unwrap(), text);

    let again = dynroute(d.path(), &["cost", "--preset", "fcn32s", "--out", "r"]);
    assert_eq!(stdout(&again), text);

    let flops = dynroute(d.path(), &["cost", "--preset", "fcn32s", "--convention", "2macs", "--out", "r"]);
    assert_eq!(value(&stdout(&flops), "total_flops"), 2 * 24_844_959_744);
}

#[test]
fn params_only_prints_both_counts() {
    let d = TempDir::new().unwrap();
    let o = dynroute(d.path(), &["cost", "--preset", "full", "--params-only", "--out", "r"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let (without, with) = (value(&text, "params_without_gates"), value(&text, "params_with_gates"));
    assert!((without as f64 / 1e6 - 15.3).abs() / 15.3 < 0.15);
    assert!((with as f64 / 1e6 - 17.8).abs() / 17.8 < 0.15);
    assert!(with > without);
}

#[test]
fn mask_file_and_env_out_dir() {
    let d = TempDir::new().unwrap();
    assert!(dynroute(d.path(), &["space", "--preset", "unet", "--out", "m"]).status.success());
    let o = Command::new(env!("CARGO_BIN_EXE_dynroute"))
        .args(["cost", "--mask", "m/unet.mask"])
        .current_dir(d.path())
        .env("DYNROUTE_OUT", "env_out")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(value(&stdout(&o), "total_macs"), 37_866_176_512);
    assert!(d.path().join("env_out/cost_unet.txt").exists());
}

#[test]
fn bad_inputs_exit_nonzero() {
    let d = TempDir::new().unwrap();
    let o = dynroute(d.path(), &["cost", "--preset", "fcn64s"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("fcn64s"));

    assert_eq!(dynroute(d.path(), &["cost"]).status.code(), Some(1));
    assert_eq!(dynroute(d.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(dynroute(d.path(), &["cost", "--preset", "full", "--input", "3x100x100"]).status.code(), Some(2));
    assert_eq!(dynroute(d.path(), &["train", "--config", "missing.toml"]).status.code(), Some(3));
    assert!(dynroute(d.path(), &["--help"]).status.success());
}

#[test]
fn malformed_config_names_the_line() {
    let d = TempDir::new().unwrap();
    fs::write(d.path().join("c.toml"), "[run]\nseed = 1\n\n[train]\nmax_iter 5\n").unwrap();
    let o = dynroute(d.path(), &["train", "--config", "c.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 5"), "{}", stderr(&o));

    fs::write(d.path().join("c.toml"), "[train]\nmax_iter = 5\nlearnig_rate = 0.1\n").unwrap();
    let o = dynroute(d.path(), &["train", "--config", "c.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn budget_b_run_is_complete_and_deterministic() {
    let d = TempDir::new().unwrap();
    fs::write(d.path().join("b.toml"), "[run]\nseed = 3\nout_dir = \"first\"\n[train]\nbudget = \"B\"\nmax_iter = 500\n").unwrap();
    let a = dynroute(d.path(), &["train", "--config", "b.toml"]);
    assert!(a.status.success(), "{}", stderr(&a));
    let b = dynroute(d.path(), &["train", "--config", "b.toml", "--out", "second"]);
    assert!(b.status.success(), "{}", stderr(&b));

    let m1 = fs::read(d.path().join("first/metrics.jsonl")).unwrap();
    let m2 = fs::read(d.path().join("second/metrics.jsonl")).unwrap();
    assert_eq!(String::from_utf8_lossy(&m1).lines().count(), 500);
    assert_eq!(m1, m2);
    for f in ["checkpoint.json", "routes.jsonl"] {
        assert_eq!(fs::read(d.path().join("first").join(f)).unwrap(), fs::read(d.path().join("second").join(f)).unwrap(), "{f}");
    }

    let c = dynroute(d.path(), &["train", "--config", "b.toml", "--seed", "4", "--out", "third"]);
    assert!(c.status.success());
    assert_ne!(fs::read(d.path().join("third/metrics.jsonl")).unwrap(), m1);
}

#[test]
fn resume_reproduces_uninterrupted_metrics() {
    let d = TempDir::new().unwrap();
    let cfg_text = "[run]\nseed = 5\n[space]\nlayers = 3\n[data]\nimage_size = 32\nbatch = 2\n[train]\nbudget = \"A\"\nmax_iter = 12\n";
    fs::write(d.path().join("c.toml"), cfg_text).unwrap();
    assert!(dynroute(d.path(), &["train", "--config", "c.toml", "--out", "whole"]).status.success());
    let whole = fs::read_to_string(d.path().join("whole/metrics.jsonl")).unwrap();

    // An interrupted run: checkpoint at 5, plus two records written after it.
    let done: Checkpoint = serde_json::from_str(&fs::read_to_string(d.path().join("whole/checkpoint.json")).unwrap()).unwrap();
    let mut t = Trainer::new(done.config).unwrap();
    for _ in 0..5 {
        t.step().unwrap();
    }
    fs::create_dir_all(d.path().join("part")).unwrap();
    fs::write(d.path().join("part/ck.json"), serde_json::to_string(&t.checkpoint()).unwrap()).unwrap();
    let partial: Vec<&str> = whole.lines().take(7).collect();
    fs::write(d.path().join("part/metrics.jsonl"), partial.join("\n") + "\n").unwrap();

    let o = dynroute(d.path(), &["train", "--config", "c.toml", "--out", "part", "--resume", "part/ck.json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(d.path().join("part/metrics.jsonl")).unwrap(), whole);

    fs::write(d.path().join("other.toml"), cfg_text.replace("seed = 5", "seed = 6")).unwrap();
    let o = dynroute(d.path(), &["train", "--config", "other.toml", "--out", "part", "--resume", "part/ck.json"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_exits_with_runtime_error() {
    let d = TempDir::new().unwrap();
    fs::write(d.path().join("c.toml"), "[space]\nlayers = 2\n[data]\nimage_size = 32\nbatch = 2\n[train]\nbase_lr = 1e12\nmax_iter = 50\n").unwrap();
    let o = dynroute(d.path(), &["train", "--config", "c.toml", "--out", "r"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
    assert!(d.path().join("r/divergence.txt").exists());
}

#[test]
fn frozen_mask_run_round_trips_through_extract() {
    let d = TempDir::new().unwrap();
    for preset in ["fcn32s", "common_b"] {
        assert!(dynroute(d.path(), &["space", "--preset", preset, "--out", "masks"]).status.success());
        let cfg = format!(
            "[run]\nroute_samples = 6\n[space]\nlayers = 16\nbase_channels = 2\nmask = \"masks/{preset}.mask\"\n[data]\nimage_size = 32\nbatch = 2\n[train]\nmax_iter = 3\n"
        );
        fs::write(d.path().join("f.toml"), cfg).unwrap();
        let t = dynroute(d.path(), &["train", "--config", "f.toml", "--out", "run"]);
        assert!(t.status.success(), "{}", stderr(&t));
        let e = dynroute(d.path(), &["extract", "--log", "run/routes.jsonl", "--out", "ex"]);
        assert!(e.status.success(), "{}", stderr(&e));
        let original = fs::read(d.path().join(format!("masks/{preset}.mask"))).unwrap();
        assert_eq!(fs::read(d.path().join(format!("ex/{preset}.mask"))).unwrap(), original);
        assert_eq!(e.stdout, original);

        let hist = fs::read_to_string(d.path().join("ex/histogram.txt")).unwrap();
        let last = hist.lines().last().unwrap();
        assert!(last.starts_with("0.9500 1.0000 "), "{last}");
    }
}

#[test]
fn threshold_one_keeps_only_always_open_paths() {
    let d = TempDir::new().unwrap();
    let log = "{\"kind\":\"header\",\"layers\":2,\"base_channels\":8}\n\
{\"kind\":\"route\",\"forward\":0,\"sample\":0,\"layer\":1,\"scale\":0,\"alpha\":[0.0,0.9,0.4]}\n\
{\"kind\":\"route\",\"forward\":0,\"sample\":1,\"layer\":1,\"scale\":0,\"alpha\":[0.0,0.7,0.0]}\n";
    fs::write(d.path().join("r.jsonl"), log).unwrap();
    let o = dynroute(d.path(), &["extract", "--log", "r.jsonl", "--threshold", "1.0", "--name", "n", "--out", "x"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mask = dynroute_core::space::ArchMask::parse(&stdout(&o)).unwrap();
    let entry = dynroute_core::space::NodeId::ENTRY;
    assert_eq!(mask.get(entry), [0.0, 1.0, 0.0]);
    assert_eq!(mask.name.as_deref(), Some("n"));
}

#[test]
fn empty_log_fails() {
    let d = TempDir::new().unwrap();
    fs::write(d.path().join("empty.jsonl"), "").unwrap();
    assert_ne!(dynroute(d.path(), &["extract", "--log", "empty.jsonl"]).status.code(), Some(0));
    fs::write(d.path().join("header.jsonl"), "{\"kind\":\"header\",\"layers\":2,\"base_channels\":8}\n").unwrap();
    assert_ne!(dynroute(d.path(), &["extract", "--log", "header.jsonl"]).status.code(), Some(0));
}

#[test]
fn verify_fast_passes_and_corruption_is_named() {
    let d = TempDir::new().unwrap();
    let start = std::time::Instant::now();
    let o = dynroute(d.path(), &["verify", "--fast"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(start.elapsed().as_secs() < 60);
    for suite in ["gradient_check", "pruning_equivalence", "cost_consistency", "preset_ordering"] {
        assert!(stdout(&o).contains(&format!("PASS {suite}")), "{suite}");
    }

    let bad = dynroute(d.path(), &["verify", "--fast", "--corrupt-gradient"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(stdout(&bad).contains("FAIL gradient_check"));
    assert!(stderr(&bad).contains("gradient_check"));
}
