//! One function per subcommand. Each resolves its output directory, echoes
//! the config there, and writes JSON-lines reports plus a TSV table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use hytrec::autograd::{GradFault, OpKind};
use hytrec::data::{
    build_sequences, compact_vocabulary, decompose_context, filter_sequences, generate_synthetic_drift, leave_one_out,
    parse_interaction_log, parse_interaction_text, read_examples, to_log_text, write_examples, DatasetSplit,
    DecomposedSequence, LogFormat, UserSequence, Vocabulary,
};
use hytrec::eval::{evaluate, run_ablation, throughput_bench, build_variant, EvalReport, Variant};
use hytrec::model::{Checkpoint, HyTRecModel, ModelConfig, ModelInput};
use hytrec::train::{gradcheck_model, Trainer, BEST_CHECKPOINT, LAST_CHECKPOINT, REPORT_FILE};
use hytrec::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{under_root, DataMode, RunConfig, SweepAxis, ECHO_FILE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Prepare,
    Train,
    Eval,
    Sweep,
    Gradcheck,
    Bench,
    Ablate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Prepare => "prepare",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Sweep => "sweep",
            Command::Gradcheck => "gradcheck",
            Command::Bench => "bench",
            Command::Ablate => "ablate",
        }
    }

    fn default_out(self) -> &'static str {
        match self {
            Command::Prepare => "prepared",
            Command::Ablate => "ablation",
            c => c.name(),
        }
    }
}

/// What a command produced. `failed` is set when the command ran to
/// completion but its checks did not pass (gradcheck).
#[derive(Debug)]
pub struct Outcome {
    pub out_dir: PathBuf,
    pub summary: String,
    pub failed: bool,
}

pub const SUMMARY_FILE: &str = "summary.json";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const LOG_FILE: &str = "interactions.tsv";

pub fn run(cmd: Command, cfg: &RunConfig) -> Result<Outcome> {
    let out = under_root(if cfg.out_dir.is_empty() { cmd.default_out() } else { &cfg.out_dir });
    fs::create_dir_all(&out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    write(&out.join(ECHO_FILE), &cfg.to_toml()?)?;
    let (summary, failed) = match cmd {
        Command::Prepare => (prepare(cfg, &out)?, false),
        Command::Train => (train(cfg, &out)?, false),
        Command::Eval => (eval(cfg, &out)?, false),
        Command::Sweep => (sweep(cfg, &out)?, false),
        Command::Gradcheck => gradcheck(cfg, &out)?,
        Command::Bench => (bench(cfg, &out)?, false),
        Command::Ablate => (ablate(cfg, &out)?, false),
    };
    Ok(Outcome {
        out_dir: out,
        summary,
        failed,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Data(e.to_string()))
}

fn jsonl<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&json(r)?);
        s.push('\n');
    }
    Ok(s)
}

// ---- prepare ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthBin {
    pub min: usize,
    pub max: usize,
    pub users: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub users: usize,
    pub items: usize,
    pub events: usize,
    pub short_window_k: usize,
    pub train_examples: usize,
    pub valid_examples: usize,
    pub test_examples: usize,
    /// Sequence lengths in power-of-two bins.
    pub length_histogram: Vec<LengthBin>,
}

fn length_histogram(sequences: &[UserSequence]) -> Vec<LengthBin> {
    let mut bins: BTreeMap<u32, usize> = BTreeMap::new();
    for s in sequences {
        *bins.entry(s.len().max(1).ilog2()).or_default() += 1;
    }
    bins.into_iter()
        .map(|(b, users)| LengthBin {
            min: 1 << b,
            max: (1 << (b + 1)) - 1,
            users,
        })
        .collect()
}

fn prepare(cfg: &RunConfig, out: &Path) -> Result<String> {
    let d = &cfg.data;
    let parsed = match d.mode {
        DataMode::Log => {
            if d.input.is_empty() {
                return Err(Error::Config("data.input is empty; point it at an interaction log or set data.mode = \"synthetic\"".into()));
            }
            parse_interaction_log(Path::new(&d.input), &d.format)?
        }
        DataMode::Synthetic => {
            // written out and re-read so both modes go through the same parser
            let ds = generate_synthetic_drift(&cfg.synthetic)?;
            let text = to_log_text(&ds.sequences, &ds.vocab)?;
            let path = out.join(LOG_FILE);
            write(&path, &text)?;
            parse_interaction_text(&text, &LogFormat::default(), &path)?
        }
    };
    let sequences = build_sequences(&parsed.events);
    let filtered = filter_sequences(&sequences, d.min_user_events, d.min_item_count)?;
    let (sequences, vocab) = compact_vocabulary(&filtered, &parsed.vocab)?;
    let split = leave_one_out(&sequences, cfg.model.short_window_k, d.train_targets_per_user)?;
    write_examples(&out.join("train.jsonl"), &split.train)?;
    write_examples(&out.join("valid.jsonl"), &split.valid)?;
    write_examples(&out.join("test.jsonl"), &split.test)?;
    vocab.write(&out.join(VOCAB_FILE))?;
    let summary = DatasetSummary {
        users: sequences.len(),
        items: vocab.len(),
        events: sequences.iter().map(UserSequence::len).sum(),
        short_window_k: cfg.model.short_window_k,
        train_examples: split.train.len(),
        valid_examples: split.valid.len(),
        test_examples: split.test.len(),
        length_histogram: length_histogram(&sequences),
    };
    let pretty = serde_json::to_string_pretty(&summary).map_err(|e| Error::Data(e.to_string()))?;
    write(&out.join(SUMMARY_FILE), &(pretty + "\n"))?;
    let mut s = format!(
        "{} users, {} items, {} events; {} train / {} valid / {} test examples\nlength\tusers\n",
        summary.users, summary.items, summary.events, summary.train_examples, summary.valid_examples, summary.test_examples
    );
    for b in &summary.length_histogram {
        writeln!(s, "{}-{}\t{}", b.min, b.max, b.users).expect("writing to a String");
    }
    Ok(s)
}

// ---- loading a prepared dataset ----

struct Dataset {
    vocab: Vocabulary,
    split: DatasetSplit,
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let dir = under_root(&cfg.data.dataset_dir);
    if !dir.join(VOCAB_FILE).is_file() {
        return Err(Error::Data(format!(
            "no prepared dataset in {}; run `hytrec prepare` first or set data.dataset_dir",
            dir.display()
        )));
    }
    let k = cfg.model.short_window_k;
    let read = |name: &str| -> Result<Vec<DecomposedSequence>> {
        let path = dir.join(name);
        if !path.is_file() {
            return Ok(Vec::new());
        }
        // the split may have been written with another window size
        Ok(read_examples(&path)?.into_iter().map(|ex| rewindow(ex, k)).collect())
    };
    Ok(Dataset {
        vocab: Vocabulary::read(&dir.join(VOCAB_FILE))?,
        split: DatasetSplit {
            train: read("train.jsonl")?,
            valid: read("valid.jsonl")?,
            test: read("test.jsonl")?,
        },
    })
}

fn rewindow(ex: DecomposedSequence, k: usize) -> DecomposedSequence {
    let context: Vec<_> = ex.context().cloned().collect();
    let (long_part, short_part) = decompose_context(&context, k);
    DecomposedSequence {
        long_part,
        short_part,
        ..ex
    }
}

/// The `[model]` section with its vocabulary taken from the dataset.
fn resolved_model(cfg: &RunConfig, vocab: &Vocabulary) -> Result<ModelConfig> {
    let mut m = cfg.model.clone();
    if m.vocab_size == 0 {
        m.vocab_size = vocab.len();
    } else if m.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "model.vocab_size is {} but the dataset has {} items; set it to 0 to follow the dataset",
            m.vocab_size,
            vocab.len()
        )));
    }
    m.validate()?;
    Ok(m)
}

fn init_model(model: ModelConfig, cfg: &RunConfig) -> Result<HyTRecModel> {
    if cfg.train.init_scale > 0.0 {
        HyTRecModel::with_init_scale(model, cfg.train.init_seed, cfg.train.init_scale)
    } else {
        HyTRecModel::new(model, cfg.train.init_seed)
    }
}

// ---- train ----

/// Trains into `out`; returns the per-epoch table.
fn train_into(model: ModelConfig, cfg: &RunConfig, split: &DatasetSplit, out: &Path) -> Result<String> {
    let mut trainer = Trainer::new(init_model(model, cfg)?, cfg.train.clone())?;
    let report_path = out.join(REPORT_FILE);
    if report_path.exists() {
        fs::remove_file(&report_path).map_err(|e| Error::io(format!("removing stale {}", report_path.display()), e))?;
    }
    if cfg.train.epochs == 0 {
        let ck = trainer.checkpoint();
        ck.save(&out.join(LAST_CHECKPOINT))?;
        ck.save(&out.join(BEST_CHECKPOINT))?;
        return Ok(format!("epochs = 0: wrote the initial checkpoint ({} parameters)\n", trainer.model.param_count()));
    }
    if split.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let report = trainer.run(split, Some(out))?;
    let k = cfg.train.eval_k;
    let mut s = format!("epoch\ttrain_loss\tvalid_hr@{k}\tvalid_ndcg@{k}\tseconds\n");
    let opt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.4}"));
    for r in &report.records {
        writeln!(
            s,
            "{}\t{:.4}\t{}\t{}\t{:.1}",
            r.epoch,
            r.train_loss,
            opt(r.valid_hr_at_k),
            opt(r.valid_ndcg_at_k),
            r.wall_seconds
        )
        .expect("writing to a String");
    }
    if let Some(b) = report.best_epoch {
        writeln!(s, "best epoch {b}").expect("writing to a String");
    }
    Ok(s)
}

fn train(cfg: &RunConfig, out: &Path) -> Result<String> {
    let ds = load_dataset(cfg)?;
    let model = resolved_model(cfg, &ds.vocab)?;
    train_into(model, cfg, &ds.split, out)
}

// ---- eval ----

fn eval_table(ks: &[usize], rows: &[(String, &EvalReport)]) -> String {
    let mut s = String::from("setting");
    for k in ks {
        write!(s, "\thr@{k}\tndcg@{k}").expect("writing to a String");
    }
    s.push_str("\tauc\tlatency_ms\n");
    for (name, r) in rows {
        s.push_str(name);
        for k in ks {
            write!(s, "\t{:.4}\t{:.4}", r.hr[k], r.ndcg[k]).expect("writing to a String");
        }
        writeln!(s, "\t{:.4}\t{:.3}", r.auc, r.mean_latency_ms).expect("writing to a String");
    }
    s
}

fn eval_split<'a>(cfg: &RunConfig, ds: &'a Dataset) -> Result<&'a [DecomposedSequence]> {
    match cfg.eval.split.as_str() {
        "test" => Ok(&ds.split.test),
        "valid" => Ok(&ds.split.valid),
        other => Err(Error::Config(format!("eval.split must be \"test\" or \"valid\", got {other:?}"))),
    }
}

fn eval(cfg: &RunConfig, out: &Path) -> Result<String> {
    if cfg.eval.ks.is_empty() {
        return Err(Error::Config("eval.ks is empty".into()));
    }
    let ds = load_dataset(cfg)?;
    let model_cfg = resolved_model(cfg, &ds.vocab)?;
    let path = under_root(&cfg.eval.checkpoint);
    let ck = Checkpoint::load(&path)?;
    ck.check_config(&model_cfg)?;
    let model = ck.to_model()?;
    let report = evaluate(&model, eval_split(cfg, &ds)?, &cfg.eval.ks)?;
    write(&out.join("metrics.jsonl"), &jsonl(&[&report])?)?;
    let table = eval_table(&cfg.eval.ks, &[(cfg.eval.split.clone(), &report)]);
    write(&out.join("metrics.tsv"), &table)?;
    Ok(format!("{} predictions\n{table}", report.predictions))
}

// ---- sweep ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub setting: String,
    pub ok: bool,
    pub error: Option<String>,
    pub params: Option<usize>,
    pub metrics: Option<EvalReport>,
    /// `(HR − HR₀) / (latency − latency₀)` at the first K, against the first
    /// setting; absent for the first row, failed rows, or equal latencies.
    pub hr_per_ms: Option<f64>,
    pub ndcg_per_ms: Option<f64>,
}

fn sweep_model(base: &ModelConfig, axis: SweepAxis, value: &str) -> Result<ModelConfig> {
    let int = || -> Result<usize> {
        value
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("sweep value {value:?} is not a non-negative integer")))
    };
    let mut m = base.clone();
    match axis {
        SweepAxis::Ratio => m.hybrid_ratio = int()?,
        SweepAxis::Heads => m.n_heads = int()?,
        SweepAxis::Variant => m = build_variant(base, value.parse::<Variant>()?),
    }
    m.validate()?;
    Ok(m)
}

fn sweep(cfg: &RunConfig, out: &Path) -> Result<String> {
    if cfg.sweep.values.is_empty() {
        return Err(Error::Config("sweep.values is empty".into()));
    }
    if cfg.eval.ks.is_empty() {
        return Err(Error::Config("eval.ks is empty".into()));
    }
    let ds = load_dataset(cfg)?;
    let base = resolved_model(cfg, &ds.vocab)?;
    let examples = eval_split(cfg, &ds)?;
    let mut rows: Vec<SweepRow> = Vec::new();
    for (i, value) in cfg.sweep.values.iter().enumerate() {
        let cell = out.join(format!("cell{i}"));
        let result = (|| -> Result<(usize, EvalReport)> {
            let m = sweep_model(&base, cfg.sweep.axis, value)?;
            fs::create_dir_all(&cell).map_err(|e| Error::io(format!("creating {}", cell.display()), e))?;
            train_into(m, cfg, &ds.split, &cell)?;
            let model = Checkpoint::load(&cell.join(BEST_CHECKPOINT))?.to_model()?;
            Ok((model.param_count(), evaluate(&model, examples, &cfg.eval.ks)?))
        })();
        rows.push(match result {
            Ok((params, report)) => SweepRow {
                setting: value.clone(),
                ok: true,
                error: None,
                params: Some(params),
                metrics: Some(report),
                hr_per_ms: None,
                ndcg_per_ms: None,
            },
            Err(e) => SweepRow {
                setting: value.clone(),
                ok: false,
                error: Some(e.to_string()),
                params: None,
                metrics: None,
                hr_per_ms: None,
                ndcg_per_ms: None,
            },
        });
    }
    let k = cfg.eval.ks[0];
    if let Some(first) = rows[0].metrics.clone() {
        for r in rows.iter_mut().skip(1) {
            if let Some(m) = &r.metrics {
                let dl = m.mean_latency_ms - first.mean_latency_ms;
                if dl != 0.0 {
                    r.hr_per_ms = Some((m.hr[&k] - first.hr[&k]) / dl);
                    r.ndcg_per_ms = Some((m.ndcg[&k] - first.ndcg[&k]) / dl);
                }
            }
        }
    }
    write(&out.join("sweep.jsonl"), &jsonl(&rows)?)?;

    let axis = format!("{:?}", cfg.sweep.axis).to_lowercase();
    let mut s = format!("{axis}\tstatus\tparams\thr@{k}\tndcg@{k}\tauc\tlatency_ms\thr/ms\tndcg/ms\n");
    let opt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.4}"));
    for r in &rows {
        match &r.metrics {
            Some(m) => writeln!(
                s,
                "{}\tok\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.3}\t{}\t{}",
                r.setting,
                r.params.unwrap_or(0),
                m.hr[&k],
                m.ndcg[&k],
                m.auc,
                m.mean_latency_ms,
                opt(r.hr_per_ms),
                opt(r.ndcg_per_ms)
            ),
            None => writeln!(s, "{}\tFAILED\tNA\tNA\tNA\tNA\tNA\tNA\tNA", r.setting),
        }
        .expect("writing to a String");
    }
    write(&out.join("sweep.tsv"), &s)?;
    let lat: Vec<f64> = rows.iter().filter_map(|r| r.metrics.as_ref().map(|m| m.mean_latency_ms)).collect();
    if cfg.sweep.axis != SweepAxis::Variant && lat.len() > 1 {
        let up = lat.windows(2).all(|w| w[0] <= w[1]);
        let down = lat.windows(2).all(|w| w[0] >= w[1]);
        let shape = if up { "non-decreasing" } else if down { "non-increasing" } else { "not monotone" };
        writeln!(s, "latency across settings: {shape}").expect("writing to a String");
    }
    for r in rows.iter().filter(|r| !r.ok) {
        writeln!(s, "{} failed: {}", r.setting, r.error.as_deref().unwrap_or("")).expect("writing to a String");
    }
    Ok(s)
}

// ---- gradcheck ----

fn parse_fault(spec: &str) -> Result<Option<GradFault>> {
    if spec.trim().is_empty() {
        return Ok(None);
    }
    let (op, factor) = spec
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("gradcheck.fault {spec:?} is not OP:FACTOR")))?;
    let factor: f64 = factor
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("gradcheck.fault factor {factor:?} is not a number")))?;
    Ok(Some(GradFault {
        kind: op.trim().parse::<OpKind>()?,
        factor,
    }))
}

fn gradcheck(cfg: &RunConfig, out: &Path) -> Result<(String, bool)> {
    let g = &cfg.gradcheck;
    if g.seq_len == 0 || g.examples == 0 {
        return Err(Error::Config("gradcheck needs seq_len >= 1 and examples >= 1".into()));
    }
    let fault = parse_fault(&g.fault)?;
    let model = HyTRecModel::new(g.model.clone(), g.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
    let vocab = g.model.vocab_size;
    let examples: Vec<(ModelInput, usize)> = (0..g.examples)
        .map(|_| {
            let mut t = 0.0;
            let times: Vec<f64> = (0..g.seq_len)
                .map(|_| {
                    t += rng.gen_range(0.0..2.0);
                    t
                })
                .collect();
            let items = (0..g.seq_len).map(|_| rng.gen_range(0..vocab)).collect();
            let now = t + rng.gen_range(0.0..2.0);
            Ok((ModelInput::new(items, times, now)?, rng.gen_range(0..vocab)))
        })
        .collect::<Result<_>>()?;
    let groups = gradcheck_model(&model, &examples, &g.options, fault)?;
    write(&out.join("gradcheck.jsonl"), &jsonl(&groups)?)?;
    let mut s = String::from("group\telements\tnorm_rel_err\tmax_rel_err\tstatus\n");
    for r in &groups {
        writeln!(
            s,
            "{}\t{}\t{:.2e}\t{:.2e}\t{}",
            r.group,
            r.elements,
            r.norm_relative_error,
            r.max_relative_error,
            if r.passed { "ok" } else { "FAIL" }
        )
        .expect("writing to a String");
    }
    write(&out.join("gradcheck.tsv"), &s)?;
    let failed = groups.iter().filter(|r| !r.passed).count();
    writeln!(s, "{} of {} groups passed at tolerance {:e}", groups.len() - failed, groups.len(), g.options.tolerance)
        .expect("writing to a String");
    Ok((s, failed > 0))
}

// ---- bench ----

fn bench(cfg: &RunConfig, out: &Path) -> Result<String> {
    let report = throughput_bench(&cfg.bench)?;
    write(&out.join("bench.jsonl"), &report.to_jsonl()?)?;
    let table = report.to_table();
    write(&out.join("bench.tsv"), &table)?;
    Ok(format!("tokens per second\n{table}"))
}

// ---- ablate ----

fn ablate(cfg: &RunConfig, out: &Path) -> Result<String> {
    let a = &cfg.ablation;
    let report = run_ablation(a, |r| {
        eprintln!("{} seed {}: test HR@{} {:.4} (epoch {})", r.variant, r.seed, a.k, r.test_hr, r.best_epoch)
    })?;
    write(&out.join("ablation_runs.jsonl"), &jsonl(&report.runs)?)?;
    write(&out.join("ablation.jsonl"), &jsonl(&report.summary)?)?;
    let mut s = format!("variant\truns\tmean_hr@{}\tstd_hr@{}\n", a.k, a.k);
    for v in &report.summary {
        writeln!(s, "{}\t{}\t{:.4}\t{:.4}", v.variant, v.runs, v.mean_hr, v.std_hr).expect("writing to a String");
    }
    write(&out.join("ablation.tsv"), &s)?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_bins_are_powers_of_two() {
        let seq = |n: usize| UserSequence {
            user_id: "u".into(),
            events: vec![
                hytrec::data::InteractionEvent {
                    user_id: "u".into(),
                    item_id: 0,
                    timestamp: 0
                };
                n
            ],
        };
        let h = length_histogram(&[seq(2), seq(3), seq(4), seq(9)]);
        let got: Vec<(usize, usize, usize)> = h.iter().map(|b| (b.min, b.max, b.users)).collect();
        assert_eq!(got, [(2, 3, 2), (4, 7, 1), (8, 15, 1)]);
    }

    #[test]
    fn faults_parse() {
        let f = parse_fault("gather:1.01").unwrap().unwrap();
        assert_eq!(f.factor, 1.01);
        assert!(parse_fault("").unwrap().is_none());
        assert!(parse_fault("gather").is_err());
        assert!(parse_fault("nosuchop:2").is_err());
    }

    #[test]
    fn sweep_values_validate() {
        let base = ModelConfig {
            vocab_size: 10,
            ..Default::default()
        };
        assert_eq!(sweep_model(&base, SweepAxis::Ratio, "2").unwrap().hybrid_ratio, 2);
        assert!(sweep_model(&base, SweepAxis::Heads, "3").is_err());
        assert!(!sweep_model(&base, SweepAxis::Variant, "no_short").unwrap().use_short_branch);
        assert!(sweep_model(&base, SweepAxis::Variant, "other").is_err());
    }
}
