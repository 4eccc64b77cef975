//! Ablation and benchmark variants of a base configuration.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LinearKind, ModelConfig, ScheduleKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Variant {
    Full,
    /// TADN layers replaced by normalised linear attention.
    NoTadn,
    /// No short branch; the long branch reads the whole context.
    NoShort,
    Neither,
    PureSoftmax,
    PureLinear,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoTadn,
        Variant::NoShort,
        Variant::Neither,
        Variant::PureSoftmax,
        Variant::PureLinear,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "FULL",
            Variant::NoTadn => "NO_TADN",
            Variant::NoShort => "NO_SHORT",
            Variant::Neither => "NEITHER",
            Variant::PureSoftmax => "PURE_SOFTMAX",
            Variant::PureLinear => "PURE_LINEAR",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}; expected one of FULL, NO_TADN, NO_SHORT, NEITHER, PURE_SOFTMAX, PURE_LINEAR")))
    }
}

pub fn build_variant(base: &ModelConfig, variant: Variant) -> ModelConfig {
    let mut c = base.clone();
    match variant {
        Variant::Full => {}
        Variant::NoTadn => c.linear_kind = LinearKind::Baseline,
        Variant::NoShort => c.use_short_branch = false,
        Variant::Neither => {
            c.linear_kind = LinearKind::Baseline;
            c.use_short_branch = false;
        }
        Variant::PureSoftmax => c.schedule = ScheduleKind::AllSoftmax,
        Variant::PureLinear => c.schedule = ScheduleKind::AllLinear,
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HyTRecModel;

    fn base() -> ModelConfig {
        ModelConfig {
            vocab_size: 30,
            d_model: 8,
            n_heads: 2,
            short_window_k: 3,
            ..Default::default()
        }
    }

    #[test]
    fn full_is_identity() {
        assert_eq!(build_variant(&base(), Variant::Full), base());
    }

    #[test]
    fn no_short_drops_the_branch() {
        let m = HyTRecModel::new(build_variant(&base(), Variant::NoShort), 0).unwrap();
        assert_eq!(m.short_branch_param_count(), 0);
        assert_eq!(m.split_lengths(9), (9, 0));
    }

    #[test]
    fn pure_softmax_schedule() {
        let c = build_variant(&base(), Variant::PureSoftmax);
        assert_eq!(c.layer_schedule().unwrap().to_string(), "[S,S,S,S]");
    }

    #[test]
    fn parses_names() {
        assert_eq!("no_tadn".parse::<Variant>().unwrap(), Variant::NoTadn);
        assert_eq!("PURE-LINEAR".parse::<Variant>().unwrap(), Variant::PureLinear);
        assert!("half".parse::<Variant>().is_err());
    }
}
