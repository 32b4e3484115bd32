//! End-to-end runs of the `lorafed` binary on small configurations.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lorafed::config::ExperimentConfig;
use lorafed::report::RunManifest;
use serde_json::Value;
use tempfile::TempDir;

const SMALL: &[&str] = &[
    "--set",
    "dataset.train_per_class=12",
    "--set",
    "dataset.test_per_class=6",
    "--set",
    "model.depth=1",
    "--set",
    "train.rounds=2",
    "--set",
    "train.local_epochs=1",
];

fn lorafed(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lorafed"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn lorafed")
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(SMALL);
    v
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn minimal_config_runs() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("min.toml"), "seeds = [5]\n[train]\nrounds = 1\n").unwrap();
    let out = lorafed(&with_small(&["run", "min.toml", "--out", "res"]), dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let res = dir.path().join("res");
    for f in ["config.toml", "manifest.json", "metrics.json", "trace.csv", "timing.json"] {
        assert!(res.join(f).is_file(), "missing {f}");
    }
    assert!(!res.join(".lock").exists());
    let m = read_json(&res.join("metrics.json"));
    assert_eq!(m["strategy"], "reswu");
    let s = m["per_seed"]["5"]["S"].as_array().unwrap();
    assert_eq!(s.len(), 5);
    assert!(m["mean"]["FAA"].is_f64());

    let trace = fs::read_to_string(res.join("trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert!(lines.next().unwrap().starts_with("seed,task,round,"));
    // five tasks, two rounds each
    assert_eq!(lines.count(), 10);
}

#[test]
fn manifest_config_round_trips() {
    let dir = TempDir::new().unwrap();
    let out = lorafed(&with_small(&["run", "--seed", "2", "--out", "r"]), dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let manifest = RunManifest::from_json(&fs::read_to_string(dir.path().join("r/manifest.json")).unwrap()).unwrap();
    let snapshot = ExperimentConfig::load(&dir.path().join("r/config.toml")).unwrap();
    assert_eq!(manifest.config, snapshot);
    assert_eq!(manifest.seeds, vec![2]);
}

#[test]
fn dual_rate_violation_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let out = lorafed(
        &["run", "--set", "train.lr_lora=0.5", "--set", "train.lr_head=0.5", "--out", "r"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("dual-rate"), "{}", stderr(&out));
    assert!(!dir.path().join("r").exists());
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let out = lorafed(&["run", "--set", "train.bogus=1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn strategy_flag_changes_only_the_strategy() {
    let dir = TempDir::new().unwrap();
    let a = lorafed(&with_small(&["run", "--seed", "1", "--out", "a"]), dir.path());
    let b = lorafed(&with_small(&["run", "--seed", "1", "--strategy", "naive", "--out", "b"]), dir.path());
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    assert_eq!(b.status.code(), Some(0), "{}", stderr(&b));
    let mut ma = read_json(&dir.path().join("a/manifest.json"));
    let mut mb = read_json(&dir.path().join("b/manifest.json"));
    assert_eq!(ma["config"]["strategy"], "reswu");
    assert_eq!(mb["config"]["strategy"], "naive");
    for m in [&mut ma, &mut mb] {
        m["config"]["strategy"] = Value::Null;
        m["output_dir"] = Value::Null;
    }
    assert_eq!(ma, mb);
}

#[test]
fn held_lock_blocks_a_second_run() {
    let dir = TempDir::new().unwrap();
    fs::create_dir(dir.path().join("r")).unwrap();
    fs::write(dir.path().join("r/.lock"), "").unwrap();
    let out = lorafed(&with_small(&["run", "--out", "r"]), dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("locked"));
}

#[test]
fn sweep_writes_one_directory_per_variant() {
    let dir = TempDir::new().unwrap();
    fs::write(
        dir.path().join("sweep.toml"),
        "seeds = [1]\n[sweep]\nblocks = [\"first\", \"last\"]\nmatrices = [[\"q\", \"v\"]]\n",
    )
    .unwrap();
    let out = lorafed(
        &with_small(&["run", "sweep.toml", "--sweep", "--out", "s", "--set", "train.rounds=1"]),
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let mut names: Vec<String> = fs::read_dir(dir.path().join("s"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["00_first_q-v", "01_last_q-v"]);
    assert!(dir.path().join("s/01_last_q-v/metrics.json").is_file());
}

#[test]
fn verify_passes_and_catches_an_injected_fault() {
    let dir = TempDir::new().unwrap();
    let args = ["verify", "--trials", "15", "--max-k", "6", "--model-configs", "2"];
    let ok = lorafed(&args, dir.path());
    assert_eq!(ok.status.code(), Some(0), "{}", stderr(&ok));
    let table = String::from_utf8_lossy(&ok.stdout);
    assert!(table.contains("reswu exactness") && !table.contains("FAIL"));

    let mut faulty = args.to_vec();
    faulty.push("--inject-fault");
    let bad = lorafed(&faulty, dir.path());
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("FAILED reswu exactness"));
}

fn read_counts(path: &Path) -> Vec<Vec<u64>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("client,class_0"));
    lines
        .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn quantity_preview_gives_each_client_alpha_classes() {
    let dir = TempDir::new().unwrap();
    let out = lorafed(
        &[
            "partition-preview",
            "--set",
            "clients.partition=\"quantity\"",
            "--set",
            "clients.alpha=2",
            "--set",
            "clients.count=5",
            "--set",
            "tasks.count=2",
            "--out",
            "p",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    for t in 1..=2 {
        let counts = read_counts(&dir.path().join(format!("p/partition_t{t}.csv")));
        assert_eq!(counts.len(), 5);
        for row in &counts {
            assert_eq!(row.iter().filter(|&&c| c > 0).count(), 2, "{row:?}");
        }
    }
}

#[test]
fn huge_beta_preview_is_near_uniform() {
    let dir = TempDir::new().unwrap();
    let out = lorafed(
        &["partition-preview", "--set", "clients.beta=1e6", "--set", "clients.count=4", "--out", "p"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let mut grand = None;
    for t in 1..=5 {
        let counts = read_counts(&dir.path().join(format!("p/partition_t{t}.csv")));
        let total: u64 = counts.iter().flatten().sum();
        assert_eq!(*grand.get_or_insert(total), total, "task sizes differ");
        for c in 0..counts[0].len() {
            let col: Vec<u64> = counts.iter().map(|r| r[c]).collect();
            let sum: u64 = col.iter().sum();
            if sum == 0 {
                continue;
            }
            let even = sum as f64 / col.len() as f64;
            for &n in &col {
                assert!((n as f64 - even).abs() <= 0.05 * even + 1.0, "{col:?}");
            }
        }
    }
}

fn ablation_rows(dir: &Path) -> Vec<(String, String, f64, f64)> {
    let text = fs::read_to_string(dir.join("ablation.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("variant,seed,faa,aia"));
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            assert_eq!(f.len(), 4);
            (f[0].to_string(), f[1].to_string(), f[2].parse().unwrap(), f[3].parse().unwrap())
        })
        .collect()
}

fn faa_of(rows: &[(String, String, f64, f64)], variant: &str, seed: &str) -> f64 {
    rows.iter()
        .find(|r| r.0 == variant && r.1 == seed)
        .unwrap_or_else(|| panic!("no row {variant}/{seed}"))
        .2
}

#[test]
fn ablation_schema_and_dense_agreement() {
    let dir = TempDir::new().unwrap();
    let out = lorafed(
        &with_small(&["ablate", "--seed", "4", "--seed", "9", "--out", "ab", "--workers", "2"]),
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let rows = ablation_rows(&dir.path().join("ab"));
    let variants = ["reswu", "naive", "ffa", "dense", "head_only", "full"];
    assert_eq!(rows.len(), variants.len() * 3);
    for v in variants {
        for s in ["4", "9", "mean"] {
            let f = faa_of(&rows, v, s);
            assert!((0.0..=1.0).contains(&f));
        }
    }
    for s in ["4", "9", "mean"] {
        assert!((faa_of(&rows, "reswu", s) - faa_of(&rows, "dense", s)).abs() <= 1e-6);
    }
}

#[test]
fn single_client_collapses_the_lora_variants() {
    let dir = TempDir::new().unwrap();
    let out = lorafed(
        &with_small(&["ablate", "--seed", "3", "--set", "clients.count=1", "--out", "ab"]),
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let rows = ablation_rows(&dir.path().join("ab"));
    let pick = |v: &str| {
        rows.iter()
            .filter(|r| r.0 == v)
            .map(|r| (r.1.clone(), r.2, r.3))
            .collect::<Vec<_>>()
    };
    assert_eq!(pick("reswu"), pick("naive"));
    assert_eq!(pick("reswu"), pick("dense"));
}

#[test]
fn outputs_are_identical_across_invocations_and_workers() {
    let dir = TempDir::new().unwrap();
    for (name, workers) in [("w1", "1"), ("w4", "4"), ("w4b", "4")] {
        let out = lorafed(&with_small(&["run", "--seed", "8", "--workers", workers, "--out", name]), dir.path());
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    }
    for f in ["metrics.json", "trace.csv"] {
        let a = fs::read(dir.path().join("w1").join(f)).unwrap();
        for other in ["w4", "w4b"] {
            assert_eq!(a, fs::read(dir.path().join(other).join(f)).unwrap(), "{f} differs in {other}");
        }
    }
}
