use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hytrec_cli::RunConfig;

const TINY: &str = r#"
[synthetic]
n_users = 30
n_items = 40
seq_len = 12
n_clusters = 4

[data]
mode = "synthetic"
min_user_events = 2
min_item_count = 1

[model]
d_model = 8
n_heads = 2
short_window_k = 3
decay_period = 3.0
max_seq_len = 32

[train]
epochs = 2
batch_size = 8
learning_rate = 0.01

[eval]
ks = [1, 5, 50]

[bench]
variants = ["FULL"]
lengths = [16]
d_model = 8
n_heads = 2
vocab_size = 50
repeats = 1
"#;

struct Env {
    root: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        let env = Env {
            root: tempfile::tempdir().unwrap(),
        };
        fs::write(env.path("tiny.toml"), TINY).unwrap();
        env
    }

    fn path(&self, rel: &str) -> std::path::PathBuf {
        self.root.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        let config = self.path("tiny.toml");
        Command::new(env!("CARGO_BIN_EXE_hytrec"))
            .args(args)
            .arg("--config")
            .arg(&config)
            .env("HYTREC_OUT_ROOT", self.root.path())
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let o = self.run(args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn dir_contents(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().unwrap().is_file())
        .map(|e| (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap()))
        .collect()
}

fn jsonl(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn prepare_is_byte_identical_on_rerun() {
    let env = Env::new();
    env.ok(&["prepare"]);
    let first = dir_contents(&env.path("prepared"));
    for f in ["train.jsonl", "valid.jsonl", "test.jsonl", "vocab.txt", "summary.json", "interactions.tsv", "config.toml"] {
        assert!(first.contains_key(f), "missing {f}");
    }
    env.ok(&["prepare"]);
    assert_eq!(first, dir_contents(&env.path("prepared")));

    let summary: serde_json::Value = serde_json::from_slice(&first["summary.json"]).unwrap();
    assert_eq!(summary["users"], 30);
    let hist = summary["length_histogram"].as_array().unwrap();
    assert_eq!(hist.iter().map(|b| b["users"].as_u64().unwrap()).sum::<u64>(), 30);
}

#[test]
fn prepare_from_a_log_leaves_it_untouched() {
    let env = Env::new();
    let log = env.path("log.csv");
    let mut text = String::from("user,item,rating,ts\n");
    for u in 0..6 {
        for t in 0..5 {
            text.push_str(&format!("user{u},item{},4,{}\n", (u + t) % 4, 100 * t));
        }
    }
    fs::write(&log, &text).unwrap();
    let out = env.ok(&[
        "prepare",
        "--override",
        "data.mode=\"log\"",
        "--override",
        &format!("data.input=\"{}\"", log.display()),
        "--override",
        "data.format={ delimiter = \",\", user_column = 0, item_column = 1, rating_column = 2, timestamp_column = 3, has_header = true }",
    ]);
    assert!(out.contains("6 users, 4 items, 30 events"), "{out}");
    assert_eq!(fs::read_to_string(&log).unwrap(), text);
}

#[test]
fn high_thresholds_are_a_data_error() {
    let env = Env::new();
    let o = env.run(&["prepare", "--override", "data.min_user_events=1000"]);
    assert_eq!(code(&o), 3);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("30 users") && err.contains("min_user_events=1000"), "{err}");
}

#[test]
fn config_errors_exit_with_their_class() {
    let env = Env::new();
    let o = env.run(&["prepare", "--override", "model.d_modle=3"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("d_modle"));
    let o = env.run(&["train"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("hytrec prepare"));
}

#[test]
fn flags_win_over_the_file_and_the_config_is_echoed() {
    let env = Env::new();
    env.ok(&["prepare", "--out", "p2", "--seed", "9", "--override", "model.short_window_k=4"]);
    let echoed: RunConfig = toml::from_str(&fs::read_to_string(env.path("p2/config.toml")).unwrap()).unwrap();
    assert_eq!(echoed.model.short_window_k, 4);
    assert_eq!(echoed.model.d_model, 8);
    assert_eq!((echoed.synthetic.seed, echoed.train.shuffle_seed), (9, 9));
    assert!(!env.path("prepared").exists());
}

#[test]
fn zero_epochs_writes_only_the_initial_checkpoint() {
    let env = Env::new();
    env.ok(&["prepare"]);
    env.ok(&["train", "--override", "train.epochs=0"]);
    assert!(env.path("train/best.ckpt").is_file() && env.path("train/last.ckpt").is_file());
    assert!(!env.path("train/train_report.jsonl").exists());
}

#[test]
fn train_then_eval() {
    let env = Env::new();
    env.ok(&["prepare"]);
    env.ok(&["train"]);
    let report = jsonl(&env.path("train/train_report.jsonl"));
    assert_eq!(report.len(), 2);
    // rerunning replaces the report rather than appending
    env.ok(&["train"]);
    assert_eq!(jsonl(&env.path("train/train_report.jsonl")).len(), 2);

    let table = env.ok(&["eval"]);
    assert!(table.contains("hr@50"), "{table}");
    let m = &jsonl(&env.path("eval/metrics.jsonl"))[0];
    assert_eq!(m["predictions"], 30);
    // K beyond the catalogue always hits
    assert_eq!(m["hr"]["50"], 1.0);
    assert!(m["hr"]["1"].as_f64().unwrap() <= m["hr"]["5"].as_f64().unwrap());
}

#[test]
fn eval_refuses_a_mismatched_checkpoint() {
    let env = Env::new();
    env.ok(&["prepare"]);
    env.ok(&["train", "--override", "train.epochs=0"]);
    let o = env.run(&["eval", "--override", "model.n_heads=4"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("n_heads"));
}

#[test]
fn single_value_sweep_matches_train_and_eval() {
    let env = Env::new();
    env.ok(&["prepare"]);
    env.ok(&["train"]);
    env.ok(&["eval"]);
    env.ok(&["sweep", "--override", "sweep.axis=\"ratio\"", "--override", "sweep.values=[\"3\"]"]);
    let cell = &jsonl(&env.path("sweep/sweep.jsonl"))[0]["metrics"];
    let direct = &jsonl(&env.path("eval/metrics.jsonl"))[0];
    for key in ["hr", "ndcg", "auc", "predictions"] {
        assert_eq!(cell[key], direct[key], "{key}");
    }
}

#[test]
fn sweep_marks_failed_cells_and_continues() {
    let env = Env::new();
    env.ok(&["prepare"]);
    let out = env.ok(&[
        "sweep",
        "--override",
        "train.epochs=1",
        "--override",
        "sweep.axis=\"heads\"",
        "--override",
        "sweep.values=[\"2\", \"3\", \"4\"]",
    ]);
    let rows = jsonl(&env.path("sweep/sweep.jsonl"));
    let ok: Vec<bool> = rows.iter().map(|r| r["ok"].as_bool().unwrap()).collect();
    assert_eq!(ok, [true, false, true]);
    assert!(rows[0]["hr_per_ms"].is_null());
    assert!(out.contains("FAILED") && out.contains("3 failed"), "{out}");
}

#[test]
fn gradcheck_passes_and_fault_fails_one_group() {
    let env = Env::new();
    let out = env.ok(&["gradcheck"]);
    assert!(!out.contains("FAIL"), "{out}");

    let o = env.run(&["gradcheck", "--out", "faulty", "--override", "gradcheck.fault=\"gather:1.01\""]);
    assert_eq!(code(&o), 5);
    let failed: Vec<String> = jsonl(&env.path("faulty/gradcheck.jsonl"))
        .iter()
        .filter(|g| !g["passed"].as_bool().unwrap())
        .map(|g| g["group"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(failed, ["item_embedding"]);

    let o = env.run(&["gradcheck", "--override", "gradcheck.model.vocab_size=5000"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("refuses"));
}

#[test]
fn bench_writes_one_row_per_cell() {
    let env = Env::new();
    env.ok(&["bench"]);
    let rows = jsonl(&env.path("bench/bench.jsonl"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["seq_len"], 16);
    let table = fs::read_to_string(env.path("bench/bench.tsv")).unwrap();
    assert_eq!(table.lines().next().unwrap(), "seq_len\tFULL");
}
