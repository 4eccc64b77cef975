use crate::error::{Error, Result};
use crate::math::Tensor;

/// `−log softmax(scores)[target]`, via log-sum-exp.
pub fn next_item_loss(scores: &Tensor, target: usize) -> Result<f64> {
    let z = scores.data();
    if target >= z.len() {
        return Err(Error::InvalidArgument(format!(
            "target {target} out of range for {} scores",
            z.len()
        )));
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::NonFinite { op: "next_item_loss" });
    }
    let lse = max + z.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    Ok(lse - z[target])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_scores_give_log_vocab() {
        let v = 37;
        let l = next_item_loss(&Tensor::filled(&[v], 0.3), 5).unwrap();
        assert!((l - (v as f64).ln()).abs() < 1e-14);
    }

    #[test]
    fn dominant_target_gives_zero() {
        let mut s = vec![0.0; 10];
        s[2] = 800.0;
        assert_eq!(next_item_loss(&Tensor::from_vec(s), 2).unwrap(), 0.0);
    }

    #[test]
    fn matches_direct_evaluation() {
        let s = [0.3, -1.2, 2.5, 0.0, 1.1];
        let denom: f64 = s.iter().map(|x: &f64| x.exp()).sum();
        for t in 0..5 {
            let direct = -(s[t].exp() / denom).ln();
            let l = next_item_loss(&Tensor::from_vec(s.to_vec()), t).unwrap();
            assert!((l - direct).abs() < 1e-14);
        }
        assert!(next_item_loss(&Tensor::from_vec(s.to_vec()), 5).is_err());
    }
}
