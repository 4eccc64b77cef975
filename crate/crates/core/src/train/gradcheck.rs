//! Central finite-difference verification of the analytic gradients.

use serde::{Deserialize, Serialize};

use crate::autograd::{GradFault, Tape};
use crate::error::{Error, Result};
use crate::model::{HyTRecModel, ModelInput};

/// Largest model the checker accepts, in parameter scalars.
pub const MAX_GRADCHECK_PARAMS: usize = 20_000;
/// Longest context the checker accepts.
pub const MAX_GRADCHECK_LEN: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the elementwise relative error, so entries whose
    /// true gradient is (near) zero are judged on absolute error.
    pub floor: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub group: String,
    pub elements: usize,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, floor)`.
    pub norm_relative_error: f64,
    /// Largest `|a − n| / max(|a|, |n|, floor)` over the group.
    pub max_relative_error: f64,
    pub passed: bool,
}

/// Checks every parameter tensor of `model` for the summed next-item loss
/// over `examples`. `fault` corrupts one derivative rule, for testing the
/// checker itself.
pub fn gradcheck_model(
    model: &HyTRecModel,
    examples: &[(ModelInput, usize)],
    opts: &GradcheckOptions,
    fault: Option<GradFault>,
) -> Result<Vec<GroupCheck>> {
    let count = model.param_count();
    if count > MAX_GRADCHECK_PARAMS {
        return Err(Error::Config(format!(
            "gradient check refuses a model with {count} parameters (limit {MAX_GRADCHECK_PARAMS}); \
             shrink vocab_size, d_model or the layer counts"
        )));
    }
    if let Some(long) = examples.iter().map(|(x, _)| x.items.len()).max().filter(|&n| n > MAX_GRADCHECK_LEN) {
        return Err(Error::Config(format!(
            "gradient check refuses contexts of length {long} (limit {MAX_GRADCHECK_LEN})"
        )));
    }
    if examples.is_empty() {
        return Err(Error::InvalidArgument("gradient check needs at least one example".into()));
    }

    let total_loss = |m: &HyTRecModel, tape: &mut Tape| -> Result<crate::autograd::Var> {
        let mut acc = None;
        for (input, target) in examples {
            let l = m.loss(tape, input, *target)?;
            acc = Some(match acc {
                None => l,
                Some(a) => tape.add(a, l)?,
            });
        }
        Ok(acc.expect("at least one example"))
    };

    let mut tape = Tape::new();
    if let Some(f) = fault {
        tape = tape.with_fault(f);
    }
    let loss = total_loss(model, &mut tape)?;
    let analytic = tape.backward(loss)?.into_dense(model.params());

    let eval = |m: &HyTRecModel| -> Result<f64> {
        let mut t = Tape::inference();
        let l = total_loss(m, &mut t)?;
        Ok(t.value(l).data()[0])
    };

    let mut probe = model.clone();
    let ids: Vec<_> = model.params().iter().map(|(id, name, _)| (id, name.to_string())).collect();
    let mut out = Vec::with_capacity(ids.len());
    for (gi, (id, name)) in ids.into_iter().enumerate() {
        let n = model.params().get(id).len();
        let mut numeric = vec![0.0; n];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let orig = model.params().get(id).data()[e];
            probe.params_mut().get_mut(id).data_mut()[e] = orig + opts.step;
            let up = eval(&probe)?;
            probe.params_mut().get_mut(id).data_mut()[e] = orig - opts.step;
            let down = eval(&probe)?;
            probe.params_mut().get_mut(id).data_mut()[e] = orig;
            *slot = (up - down) / (2.0 * opts.step);
        }
        let a = analytic[gi].data();
        let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
        let diff = norm(&mut a.iter().zip(&numeric).map(|(x, y)| x - y));
        let scale = norm(&mut a.iter().copied()).max(norm(&mut numeric.iter().copied())).max(opts.floor);
        let norm_rel = diff / scale;
        let max_rel = a
            .iter()
            .zip(&numeric)
            .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(opts.floor))
            .fold(0.0, f64::max);
        out.push(GroupCheck {
            group: name,
            elements: n,
            norm_relative_error: norm_rel,
            max_relative_error: max_rel,
            passed: norm_rel <= opts.tolerance && max_rel <= opts.tolerance,
        });
    }
    Ok(out)
}
