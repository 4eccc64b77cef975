//! Synthetic users whose interest drifts from a long-term item cluster to a
//! second cluster late in their history.
//!
//! Items are split into equal contiguous clusters. A user draws a long-term
//! cluster `A` and a different drift cluster `B`. Before the drift point
//! every event comes from `A` with widely spaced timestamps. From the drift
//! point on, each event (including the final one, which is the test target)
//! comes from `B` with probability `drift_strength` and from `A` otherwise,
//! at short time gaps, so the temporal decay tells the two regimes apart.
//!
//! Popularity inside a cluster is Zipf-like. For the drift cluster the
//! ranking is global, shared by every user; for the long-term cluster each
//! user has a private ranking, which only a long history reveals.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::log::{InteractionEvent, Vocabulary};
use crate::data::sequence::UserSequence;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub seq_len: usize,
    pub drift_point_fraction: f64,
    pub drift_strength: f64,
    pub seed: u64,
    pub n_clusters: usize,
    /// Popularity exponent inside a cluster; 0 is uniform.
    pub zipf_exponent: f64,
    /// Time gap range (inclusive) before the drift point.
    pub gap_before: (u64, u64),
    /// Time gap range (inclusive) from the drift point on.
    pub gap_after: (u64, u64),
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_users: 2000,
            n_items: 500,
            seq_len: 100,
            drift_point_fraction: 0.8,
            drift_strength: 0.8,
            seed: 0,
            n_clusters: 10,
            zipf_exponent: 1.0,
            gap_before: (3, 8),
            gap_after: (0, 1),
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_users == 0 || self.seq_len < 2 {
            return fail(format!(
                "synthetic data needs n_users >= 1 and seq_len >= 2, got {} and {}",
                self.n_users, self.seq_len
            ));
        }
        if self.n_clusters < 2 || self.n_items < self.n_clusters {
            return fail(format!(
                "synthetic data needs at least 2 clusters and one item per cluster, got {} clusters for {} items",
                self.n_clusters, self.n_items
            ));
        }
        if !(0.0..=1.0).contains(&self.drift_strength) {
            return fail(format!("drift_strength {} must lie in [0, 1]", self.drift_strength));
        }
        if !(0.0..=1.0).contains(&self.drift_point_fraction) {
            return fail(format!("drift_point_fraction {} must lie in [0, 1]", self.drift_point_fraction));
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return fail(format!("zipf_exponent {} must be non-negative", self.zipf_exponent));
        }
        if self.gap_before.0 > self.gap_before.1 || self.gap_after.0 > self.gap_after.1 {
            return fail("time gap ranges must be (low, high) with low <= high".into());
        }
        Ok(())
    }

    /// Index of the first post-drift event.
    pub fn drift_index(&self) -> usize {
        ((self.drift_point_fraction * self.seq_len as f64).round() as usize).clamp(1, self.seq_len - 1)
    }

    /// Items `[start, end)` of cluster `c`.
    pub fn cluster_range(&self, c: usize) -> (usize, usize) {
        let base = self.n_items / self.n_clusters;
        let extra = self.n_items % self.n_clusters;
        let start = c * base + c.min(extra);
        (start, start + base + usize::from(c < extra))
    }

    pub fn cluster_of(&self, item: usize) -> usize {
        (0..self.n_clusters)
            .find(|&c| {
                let (s, e) = self.cluster_range(c);
                (s..e).contains(&item)
            })
            .expect("item inside the catalogue")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub sequences: Vec<UserSequence>,
    pub vocab: Vocabulary,
    /// `(long-term cluster, drift cluster)` per user.
    pub clusters: Vec<(usize, usize)>,
}

/// Cluster members in popularity order.
#[derive(Clone)]
struct ClusterSampler {
    members: Vec<usize>,
}

impl ClusterSampler {
    fn sample(&self, cumulative: &[f64], rng: &mut ChaCha8Rng) -> usize {
        let total = *cumulative.last().expect("non-empty cluster");
        let u = rng.gen::<f64>() * total;
        let i = cumulative.partition_point(|&c| c <= u).min(self.members.len() - 1);
        self.members[i]
    }
}

fn item_name(i: usize, n: usize) -> String {
    let width = (n.max(2) - 1).to_string().len();
    format!("i{i:0width$}")
}

/// Deterministic for a fixed config; item names are zero-padded so the
/// sorted vocabulary keeps the generator's item order.
pub fn generate_synthetic_drift(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let samplers: Vec<ClusterSampler> = (0..cfg.n_clusters)
        .map(|c| {
            let (s, e) = cfg.cluster_range(c);
            let mut members: Vec<usize> = (s..e).collect();
            members.shuffle(&mut rng);
            ClusterSampler { members }
        })
        .collect();
    let largest = (0..cfg.n_clusters).map(|c| cfg.cluster_range(c)).map(|(s, e)| e - s).max().unwrap_or(0);
    let mut acc = 0.0;
    let zipf: Vec<f64> = (0..largest)
        .map(|r| {
            acc += 1.0 / ((r + 1) as f64).powf(cfg.zipf_exponent);
            acc
        })
        .collect();

    let drift_at = cfg.drift_index();
    let user_width = (cfg.n_users.max(2) - 1).to_string().len();
    let mut sequences = Vec::with_capacity(cfg.n_users);
    let mut clusters = Vec::with_capacity(cfg.n_users);
    for u in 0..cfg.n_users {
        let user_id = format!("u{u:0user_width$}");
        let a = rng.gen_range(0..cfg.n_clusters);
        let b = (a + rng.gen_range(1..cfg.n_clusters)) % cfg.n_clusters;
        let mut home = samplers[a].clone();
        home.members.shuffle(&mut rng);
        let (home_cdf, drift_cdf) = (&zipf[..home.members.len()], &zipf[..samplers[b].members.len()]);
        let mut t = 0u64;
        let mut events = Vec::with_capacity(cfg.seq_len);
        for pos in 0..cfg.seq_len {
            let after = pos >= drift_at;
            if pos > 0 {
                let (lo, hi) = if after { cfg.gap_after } else { cfg.gap_before };
                t += rng.gen_range(lo..=hi);
            }
            let from_b = after && rng.gen::<f64>() < cfg.drift_strength;
            let item = if from_b {
                samplers[b].sample(drift_cdf, &mut rng)
            } else {
                home.sample(home_cdf, &mut rng)
            };
            events.push(InteractionEvent {
                user_id: user_id.clone(),
                item_id: item,
                timestamp: t,
            });
        }
        sequences.push(UserSequence { user_id, events });
        clusters.push((a, b));
    }
    let vocab = Vocabulary::from_items((0..cfg.n_items).map(|i| item_name(i, cfg.n_items)));
    Ok(SyntheticDataset {
        sequences,
        vocab,
        clusters,
    })
}
