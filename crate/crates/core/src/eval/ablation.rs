//! Branch ablation on synthetic interest-drift data: every variant trained
//! from scratch on every seed, scored by test HR@K at the epoch with the
//! best validation NDCG@K.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic_drift, leave_one_out, SyntheticConfig};
use crate::error::{Error, Result};
use crate::eval::metrics::{hit_rate_at_k, ndcg_at_k, rank_examples};
use crate::eval::variant::{build_variant, Variant};
use crate::model::{HyTRecModel, ModelConfig};
use crate::train::{TrainConfig, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// The seed field is replaced by each run's seed.
    pub synthetic: SyntheticConfig,
    /// `vocab_size` is taken from the synthetic catalogue.
    pub model: ModelConfig,
    /// `shuffle_seed` is replaced by each run's seed.
    pub train: TrainConfig,
    pub train_targets_per_user: usize,
    pub k: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        let synthetic = SyntheticConfig::default();
        AblationConfig {
            variants: vec![Variant::Full, Variant::NoTadn, Variant::NoShort, Variant::Neither],
            seeds: (0..5).collect(),
            model: ModelConfig {
                d_model: 32,
                n_heads: 4,
                short_window_k: 16,
                decay_period: synthetic.seq_len as f64 / 4.0,
                max_seq_len: 128,
                ..Default::default()
            },
            synthetic,
            train: TrainConfig {
                learning_rate: 3e-3,
                epochs: 3,
                ..Default::default()
            },
            train_targets_per_user: 5,
            k: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub best_epoch: usize,
    pub valid_ndcg: f64,
    pub test_hr: f64,
    pub test_ndcg: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub runs: usize,
    pub mean_hr: f64,
    /// Sample standard deviation across seeds; 0 for a single run.
    pub std_hr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
    pub summary: Vec<VariantSummary>,
}

impl AblationReport {
    pub fn summary_for(&self, variant: Variant) -> Option<&VariantSummary> {
        self.summary.iter().find(|s| s.variant == variant)
    }
}

pub fn mean_and_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs every (seed, variant) pair; `progress` sees each run as it finishes.
pub fn run_ablation(cfg: &AblationConfig, mut progress: impl FnMut(&AblationRun)) -> Result<AblationReport> {
    if cfg.variants.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one variant and one seed".into()));
    }
    if cfg.k == 0 || cfg.train.epochs == 0 {
        return Err(Error::Config("ablation needs k >= 1 and epochs >= 1".into()));
    }
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let data = generate_synthetic_drift(&SyntheticConfig {
            seed,
            ..cfg.synthetic.clone()
        })?;
        let split = leave_one_out(&data.sequences, cfg.model.short_window_k, cfg.train_targets_per_user)?;
        if split.valid.is_empty() {
            return Err(Error::Data("ablation needs validation examples".into()));
        }
        let base = ModelConfig {
            vocab_size: data.vocab.len(),
            ..cfg.model.clone()
        };
        for &variant in &cfg.variants {
            let start = Instant::now();
            let model = HyTRecModel::new(build_variant(&base, variant), seed)?;
            let mut trainer = Trainer::new(
                model,
                TrainConfig {
                    shuffle_seed: seed,
                    ..cfg.train.clone()
                },
            )?;
            let mut best: Option<(usize, f64, f64, f64)> = None;
            for epoch in 1..=cfg.train.epochs {
                trainer.train_epoch(&split.train)?;
                let (valid, _) = rank_examples(&trainer.model, &split.valid)?;
                let v = ndcg_at_k(&valid, cfg.k)?;
                if best.map_or(true, |(_, b, _, _)| v > b) {
                    let (test, _) = rank_examples(&trainer.model, &split.test)?;
                    best = Some((epoch, v, hit_rate_at_k(&test, cfg.k)?, ndcg_at_k(&test, cfg.k)?));
                }
            }
            let (best_epoch, valid_ndcg, test_hr, test_ndcg) = best.expect("at least one epoch");
            let run = AblationRun {
                variant,
                seed,
                best_epoch,
                valid_ndcg,
                test_hr,
                test_ndcg,
                wall_seconds: start.elapsed().as_secs_f64(),
            };
            progress(&run);
            runs.push(run);
        }
    }
    let summary = cfg
        .variants
        .iter()
        .map(|&variant| {
            let hrs: Vec<f64> = runs.iter().filter(|r| r.variant == variant).map(|r| r.test_hr).collect();
            let (mean_hr, std_hr) = mean_and_std(&hrs);
            VariantSummary {
                variant,
                runs: hrs.len(),
                mean_hr,
                std_hr,
            }
        })
        .collect();
    Ok(AblationReport { runs, summary })
}
