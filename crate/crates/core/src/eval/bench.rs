//! Forward-pass throughput across sequence lengths.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::eval::variant::{build_variant, Variant};
use crate::model::{HyTRecModel, ModelConfig, ModelInput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub variants: Vec<Variant>,
    pub lengths: Vec<usize>,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers_long: usize,
    pub hybrid_ratio: usize,
    pub short_window_k: usize,
    /// Large enough that the embedding table dominates and the variants'
    /// parameter counts stay within `param_tolerance` of each other.
    pub vocab_size: usize,
    pub repeats: usize,
    pub param_tolerance: f64,
    /// Cells whose estimated footprint exceeds this are skipped.
    pub memory_limit_mb: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            variants: vec![Variant::PureSoftmax, Variant::PureLinear, Variant::Full],
            lengths: vec![128, 512, 2048, 4096, 8192, 12288],
            d_model: 64,
            n_heads: 4,
            n_layers_long: 4,
            hybrid_ratio: 3,
            short_window_k: 16,
            vocab_size: 10_000,
            repeats: 3,
            param_tolerance: 0.05,
            memory_limit_mb: 3072,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn model_config(&self, variant: Variant) -> ModelConfig {
        let base = ModelConfig {
            vocab_size: self.vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers_long: self.n_layers_long,
            hybrid_ratio: self.hybrid_ratio,
            short_window_k: self.short_window_k,
            max_seq_len: self.lengths.iter().copied().max().unwrap_or(1).max(1),
            ..Default::default()
        };
        build_variant(&base, variant)
    }

    fn estimate_bytes(&self, params: usize, len: usize) -> usize {
        // recorded [L × d] activations per layer plus headroom for the rest
        8 * (len * self.d_model * (32 * self.n_layers_long + 40) + params)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchStatus {
    Ok,
    SkippedMemory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub variant: Variant,
    pub seq_len: usize,
    pub params: usize,
    pub status: BenchStatus,
    /// Median forward time over the repeats.
    pub wall_seconds: f64,
    pub tokens_per_second: f64,
    /// `seq_len × repeats`.
    pub tokens_processed: usize,
    pub peak_memory_estimate_bytes: usize,
    pub repeat_seconds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn bench_input(len: usize, vocab: usize, rng: &mut ChaCha8Rng) -> ModelInput {
    ModelInput {
        items: (0..len).map(|_| rng.gen_range(0..vocab)).collect(),
        times: (0..len).map(|t| t as f64).collect(),
        current_time: len as f64,
    }
}

/// Times one forward pass of a fresh model per (variant, length), after a
/// warmup pass, and reports the median of `repeats` passes.
pub fn throughput_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.repeats == 0 || cfg.variants.is_empty() || cfg.lengths.is_empty() {
        return Err(Error::Config("benchmark needs repeats >= 1 and non-empty variants and lengths".into()));
    }
    if cfg.lengths.contains(&0) {
        return Err(Error::Config("benchmark lengths must be positive".into()));
    }
    let models = cfg
        .variants
        .iter()
        .map(|&v| HyTRecModel::new(cfg.model_config(v), cfg.seed).map(|m| (v, m)))
        .collect::<Result<Vec<_>>>()?;
    let counts: Vec<usize> = models.iter().map(|(_, m)| m.param_count()).collect();
    let (lo, hi) = (*counts.iter().min().expect("non-empty"), *counts.iter().max().expect("non-empty"));
    if hi as f64 > lo as f64 * (1.0 + cfg.param_tolerance) {
        return Err(Error::Config(format!(
            "variant parameter counts {counts:?} differ by more than {:.0}%; raise vocab_size",
            cfg.param_tolerance * 100.0
        )));
    }

    let mut rows = Vec::new();
    for &len in &cfg.lengths {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ len as u64);
        let input = bench_input(len, cfg.vocab_size, &mut rng);
        for (variant, model) in &models {
            let params = model.param_count();
            let estimate = cfg.estimate_bytes(params, len);
            if estimate > cfg.memory_limit_mb << 20 {
                rows.push(BenchRow {
                    variant: *variant,
                    seq_len: len,
                    params,
                    status: BenchStatus::SkippedMemory,
                    wall_seconds: f64::NAN,
                    tokens_per_second: 0.0,
                    tokens_processed: 0,
                    peak_memory_estimate_bytes: estimate,
                    repeat_seconds: Vec::new(),
                });
                continue;
            }
            let run = || -> Result<(f64, usize)> {
                let start = Instant::now();
                let mut tape = Tape::inference();
                let out = model.forward(&mut tape, &input)?;
                std::hint::black_box(tape.value(out).data()[0]);
                Ok((start.elapsed().as_secs_f64(), tape.bytes()))
            };
            let (_, mut peak) = run()?;
            let mut times = Vec::with_capacity(cfg.repeats);
            for _ in 0..cfg.repeats {
                let (t, bytes) = run()?;
                times.push(t);
                peak = peak.max(bytes);
            }
            let wall = median(&times);
            rows.push(BenchRow {
                variant: *variant,
                seq_len: len,
                params,
                status: BenchStatus::Ok,
                wall_seconds: wall,
                tokens_per_second: len as f64 / wall,
                tokens_processed: len * cfg.repeats,
                peak_memory_estimate_bytes: peak + 8 * params,
                repeat_seconds: times,
            });
        }
    }
    Ok(BenchReport { rows })
}

impl BenchReport {
    pub fn row(&self, variant: Variant, seq_len: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.variant == variant && r.seq_len == seq_len)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.rows {
            // NaN is not JSON; skipped cells carry null wall time
            let mut v = serde_json::to_value(r).map_err(|e| Error::Data(e.to_string()))?;
            if !r.wall_seconds.is_finite() {
                v["wall_seconds"] = serde_json::Value::Null;
            }
            writeln!(out, "{v}").expect("writing to a String");
        }
        Ok(out)
    }

    /// Length × variant table of tokens per second, tab-separated.
    pub fn to_table(&self) -> String {
        let mut variants: Vec<Variant> = Vec::new();
        let mut lengths: Vec<usize> = Vec::new();
        for r in &self.rows {
            if !variants.contains(&r.variant) {
                variants.push(r.variant);
            }
            if !lengths.contains(&r.seq_len) {
                lengths.push(r.seq_len);
            }
        }
        let mut out = String::from("seq_len");
        for v in &variants {
            write!(out, "\t{v}").expect("writing to a String");
        }
        out.push('\n');
        for l in lengths {
            write!(out, "{l}").expect("writing to a String");
            for &v in &variants {
                match self.row(v, l) {
                    Some(r) if r.status == BenchStatus::Ok => write!(out, "\t{:.1}", r.tokens_per_second),
                    _ => write!(out, "\tNA"),
                }
                .expect("writing to a String");
            }
            out.push('\n');
        }
        out
    }
}
