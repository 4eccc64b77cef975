use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::schedule::{build_layer_schedule, LayerKind, LayerSchedule};

/// How the long-branch stack is laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `hybrid_ratio` linear layers per softmax layer.
    Hybrid,
    AllSoftmax,
    AllLinear,
}

/// Which linear-time layer fills the linear slots of the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearKind {
    Tadn,
    /// Normalised linear attention with an `elu + 1` feature map.
    Baseline,
}

/// Timestamps of one week, in seconds.
pub const DEFAULT_DECAY_PERIOD: f64 = 86400.0 * 7.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// 0 means "take it from the dataset".
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers_long: usize,
    pub hybrid_ratio: usize,
    pub n_heads: usize,
    pub short_window_k: usize,
    pub n_layers_short: usize,
    pub ffn_mult: usize,
    pub alpha: f64,
    pub decay_period: f64,
    pub max_seq_len: usize,
    pub schedule: ScheduleKind,
    pub linear_kind: LinearKind,
    pub use_short_branch: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            d_model: 64,
            n_layers_long: 4,
            hybrid_ratio: 3,
            n_heads: 4,
            short_window_k: 16,
            n_layers_short: 1,
            ffn_mult: 2,
            alpha: 0.5,
            decay_period: DEFAULT_DECAY_PERIOD,
            max_seq_len: 512,
            schedule: ScheduleKind::Hybrid,
            linear_kind: LinearKind::Tadn,
            use_short_branch: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 {
            return fail("vocab_size must be at least 1".into());
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads));
        }
        if self.n_layers_long == 0 {
            return fail("n_layers_long must be at least 1".into());
        }
        if self.hybrid_ratio == 0 {
            return fail("hybrid_ratio must be at least 1".into());
        }
        if self.short_window_k == 0 {
            return fail("short_window_k must be at least 1".into());
        }
        if self.ffn_mult == 0 {
            return fail("ffn_mult must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("alpha {} must lie in [0, 1]", self.alpha));
        }
        if !(self.decay_period > 0.0 && self.decay_period.is_finite()) {
            return fail(format!("decay_period {} must be positive", self.decay_period));
        }
        if self.max_seq_len == 0 {
            return fail("max_seq_len must be at least 1".into());
        }
        Ok(())
    }

    pub fn layer_schedule(&self) -> Result<LayerSchedule> {
        match self.schedule {
            ScheduleKind::Hybrid => build_layer_schedule(self.n_layers_long, self.hybrid_ratio),
            ScheduleKind::AllSoftmax => LayerSchedule::uniform(self.n_layers_long, LayerKind::Softmax),
            ScheduleKind::AllLinear => LayerSchedule::uniform(self.n_layers_long, LayerKind::Linear),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn init_scale(&self) -> f64 {
        1.0 / (self.d_model as f64).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_need_only_a_vocabulary() {
        let mut c = ModelConfig::default();
        assert!(c.validate().is_err());
        c.vocab_size = 10;
        c.validate().unwrap();
        assert_eq!(c.layer_schedule().unwrap().to_string(), "[L,L,L,S]");
    }

    #[test]
    fn rejects_bad_values() {
        let base = ModelConfig {
            vocab_size: 5,
            ..Default::default()
        };
        for c in [
            ModelConfig { d_model: 30, ..base.clone() },
            ModelConfig { alpha: 1.5, ..base.clone() },
            ModelConfig { decay_period: 0.0, ..base.clone() },
            ModelConfig { hybrid_ratio: 0, ..base.clone() },
            ModelConfig { short_window_k: 0, ..base.clone() },
        ] {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<ModelConfig>("d_modle = 3").is_err());
        let c: ModelConfig = toml::from_str("d_model = 8\nschedule = \"all_linear\"").unwrap();
        assert_eq!(c.schedule, ScheduleKind::AllLinear);
    }
}
