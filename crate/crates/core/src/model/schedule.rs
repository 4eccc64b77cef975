//! Which long-branch layers are linear and which are softmax.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Linear,
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSchedule {
    kinds: Vec<LayerKind>,
}

/// Every `(ratio + 1)`-th layer counted from the top is softmax, so the last
/// layer always is.
pub fn build_layer_schedule(n_layers: usize, ratio: usize) -> Result<LayerSchedule> {
    if n_layers == 0 || ratio == 0 {
        return Err(Error::Config(format!(
            "layer schedule needs n_layers >= 1 and ratio >= 1, got {n_layers} and {ratio}"
        )));
    }
    let kinds = (0..n_layers)
        .map(|i| {
            if (n_layers - 1 - i) % (ratio + 1) == 0 {
                LayerKind::Softmax
            } else {
                LayerKind::Linear
            }
        })
        .collect();
    Ok(LayerSchedule { kinds })
}

impl LayerSchedule {
    pub fn uniform(n_layers: usize, kind: LayerKind) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::Config("layer schedule needs at least one layer".into()));
        }
        Ok(LayerSchedule {
            kinds: vec![kind; n_layers],
        })
    }

    pub fn kinds(&self) -> &[LayerKind] {
        &self.kinds
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn count(&self, kind: LayerKind) -> usize {
        self.kinds.iter().filter(|&&k| k == kind).count()
    }

    pub fn softmax_positions(&self) -> Vec<usize> {
        (0..self.kinds.len()).filter(|&i| self.kinds[i] == LayerKind::Softmax).collect()
    }
}

impl fmt::Display for LayerSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: Vec<&str> = self
            .kinds
            .iter()
            .map(|k| match k {
                LayerKind::Linear => "L",
                LayerKind::Softmax => "S",
            })
            .collect();
        write!(f, "[{}]", s.join(","))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_layers_seven_to_one() {
        assert_eq!(build_layer_schedule(8, 7).unwrap().to_string(), "[L,L,L,L,L,L,L,S]");
    }

    #[test]
    fn four_layers_three_to_one() {
        assert_eq!(build_layer_schedule(4, 3).unwrap().to_string(), "[L,L,L,S]");
    }

    #[test]
    fn single_layer_is_softmax() {
        for r in 1..10 {
            assert_eq!(build_layer_schedule(1, r).unwrap().kinds(), &[LayerKind::Softmax]);
        }
    }

    #[test]
    fn invalid_counts() {
        assert!(build_layer_schedule(0, 3).is_err());
        assert!(build_layer_schedule(4, 0).is_err());
    }
}
