//! Ranking metrics, ablation variants and the throughput benchmark.

mod ablation;
mod bench;
mod metrics;
mod variant;

pub use ablation::{mean_and_std, run_ablation, AblationConfig, AblationReport, AblationRun, VariantSummary};
pub use bench::{median, throughput_bench, BenchConfig, BenchReport, BenchRow, BenchStatus};
pub use metrics::{auc, evaluate, hit_rate_at_k, ndcg_at_k, rank_examples, rank_target, report, EvalReport, RankingResult};
pub use variant::{build_variant, Variant};
