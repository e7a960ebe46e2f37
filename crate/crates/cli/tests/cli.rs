use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"{"enc_layers":2,"dec_layers":2,"d_model":16,"d_ff":32,"n_heads":2,"vocab_size":32,"prompt_len":4,"max_len":24}"#;

fn fastpt(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fastpt"))
        .args(args)
        .current_dir(cwd)
        .env_remove("FASTPT_SEED")
        .output()
        .unwrap()
}

fn fastpt_env(args: &[&str], cwd: &Path, seed: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fastpt"))
        .args(args)
        .current_dir(cwd)
        .env("FASTPT_SEED", seed)
        .output()
        .unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), SMALL).unwrap();
    dir
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

const FPT: &[&str] = &[
    "fpt", "--config", "c.json", "--preset", "cr-4stage", "--steps", "8", "--batch-size", "4", "--train-size", "40",
    "--dev-size", "8",
];

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let d = setup();
    let o = fastpt(&["bogus"], d.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    assert_eq!(fastpt(&[], d.path()).status.code(), Some(1));
    assert_eq!(fastpt(&["tune", "--out", "x", "--task", "nope"], d.path()).status.code(), Some(1));
    assert_eq!(fastpt(&["--help"], d.path()).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_with_two() {
    let d = setup();
    let o = fastpt(&["tune", "--backbone", "missing", "--out", "o"], d.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = fastpt(&["flops", "--config", "missing.json", "--preset", "ld-4stage"], d.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn progressive_runs_are_reproducible() {
    let d = setup();
    let mut a = FPT.to_vec();
    a.extend(["--seed", "7", "--out", "a"]);
    let o = fastpt(&a, d.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let mut b = FPT.to_vec();
    b.extend(["--seed", "7", "--out", "b"]);
    assert_eq!(fastpt(&b, d.path()).status.code(), Some(0));
    let ta = tree(&d.path().join("a"));
    assert_eq!(ta, tree(&d.path().join("b")));
    for f in ["config.json", "schedule.json", "weights.bin", "record.csv", "metrics.csv", "task.json", "cost.csv"] {
        assert!(ta.contains_key(Path::new(f)), "{f}");
    }
    for i in 1..=4 {
        assert!(ta.contains_key(Path::new(&format!("prompt_stage{i}.bin"))));
    }
    let record = String::from_utf8(ta[Path::new("record.csv")].clone()).unwrap();
    assert_eq!(record.lines().count(), 9);
}

#[test]
fn seed_flag_overrides_environment() {
    let d = setup();
    let run = |extra: &[&str], out: &str, env: Option<&str>| {
        let mut a = FPT.to_vec();
        a.extend(extra);
        a.extend(["--out", out]);
        let o = match env {
            Some(s) => fastpt_env(&a, d.path(), s),
            None => fastpt(&a, d.path()),
        };
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        tree(&d.path().join(out))
    };
    let flag = run(&["--seed", "3"], "flag", None);
    assert_eq!(run(&[], "env", Some("3")), flag);
    assert_eq!(run(&["--seed", "3"], "both", Some("9")), flag);
    assert_ne!(run(&[], "other", Some("9")), flag);
    let o = fastpt_env(&["flops", "--preset", "ld-4stage"], d.path(), "x1");
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn flops_reads_a_written_schedule() {
    let d = setup();
    let mut a = FPT.to_vec();
    a.extend(["--out", "run"]);
    assert_eq!(fastpt(&a, d.path()).status.code(), Some(0));
    let o = fastpt(&["flops", "--config", "c.json", "--schedule", "run/schedule.json"], d.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.starts_with("stage,label,steps,fraction,flops_per_example,relative\n"));
    assert_eq!(out.lines().count(), 6);
    assert!(out.lines().last().unwrap().starts_with("weighted,"));
}

#[test]
fn dry_run_prints_cost_and_writes_nothing() {
    let d = setup();
    let mut a = FPT.to_vec();
    a.extend(["--out", "dry", "--dry-run"]);
    let o = fastpt(&a, d.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("weighted,"));
    assert!(!d.path().join("dry").exists());
    let o = fastpt(&["tune", "--config", "c.json", "--width", "0.5", "--out", "dry", "--dry-run"], d.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(!d.path().join("dry").exists());
}

#[test]
fn writes_stay_inside_out() {
    let d = setup();
    let o = fastpt(
        &["pretrain", "--config", "c.json", "--steps", "3", "--corpus-size", "50", "--batch-size", "4", "--out", "bb"],
        d.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = fastpt(
        &[
            "tune", "--backbone", "bb", "--steps", "3", "--batch-size", "4", "--train-size", "20", "--dev-size", "4",
            "--seeds", "1,2", "--out", "tuned",
        ],
        d.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 2);
    let top: Vec<String> = std::fs::read_dir(d.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    assert_eq!(top, ["bb", "c.json", "tuned"]);
    assert!(d.path().join("tuned/seed1/prompt_stage1.bin").is_file());
    assert!(d.path().join("tuned/seed2/metrics.csv").is_file());
    assert!(d.path().join("bb/pretrain_losses.csv").is_file());
}

#[test]
fn analyze_builds_similarity_and_embeddings() {
    let d = setup();
    for task in ["copy", "reverse"] {
        let mut a = FPT.to_vec();
        let out = format!("runs/{task}");
        a.extend(["--task", task, "--out", &out]);
        assert_eq!(fastpt(&a, d.path()).status.code(), Some(0));
    }
    let o = fastpt(&["analyze", "--runs", "runs/copy,runs/reverse", "--out", "an"], d.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let sim = std::fs::read_to_string(d.path().join("an/similarity.csv")).unwrap();
    assert_eq!(sim.lines().next(), Some("task,copy,reverse"));
    for line in sim.lines().skip(1) {
        for v in line.split(',').skip(1) {
            let v: f64 = v.parse().unwrap();
            assert!((-1.0..=1.0).contains(&v));
        }
    }
    let emb = std::fs::read_to_string(d.path().join("an/embeddings.csv")).unwrap();
    assert_eq!(emb.lines().count(), 1 + 2 * 4);
    assert!(emb.starts_with("task,model_label,seed,c0,"));
    assert!(stdout(&o).contains("diagonal wins"));
}

#[test]
fn ablate_and_sweep_emit_tables() {
    let d = setup();
    let common = ["--config", "c.json", "--steps", "3", "--batch-size", "4", "--seeds", "1,2"];
    let mut a = vec!["ablate", "--tasks", "copy", "--out", "ab"];
    a.extend(common);
    let o = fastpt(&a, d.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let t = std::fs::read_to_string(d.path().join("ab/ablation.csv")).unwrap();
    assert_eq!(t.lines().next(), Some("task,strategy,seed,em"));
    assert_eq!(t.lines().count(), 1 + 2 * 3);
    assert!(t.contains("copy,activation,mean,"));
    assert!(t.contains("copy,random,2,"));

    let mut s = vec!["sweep-stages", "--fractions", "0.25,0.5", "--out", "sw"];
    s.extend(common);
    let o = fastpt(&s, d.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let t = std::fs::read_to_string(d.path().join("sw/sweep.csv")).unwrap();
    assert_eq!(t.lines().count(), 1 + 4);
    let o = fastpt(&["sweep-stages", "--fractions", "1.5", "--out", "sw2"], d.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn profile_writes_scores() {
    let d = setup();
    let o = fastpt(&["profile", "--config", "c.json", "--samples", "16", "--out", "p"], d.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.path().join("p/profile.json")).unwrap()).unwrap();
    assert_eq!(v["enc"].as_array().unwrap().len(), 2);
    assert_eq!(v["enc"][0].as_array().unwrap().len(), 32);
}
