//! Checks shared by the integration tests and the acceptance runner. Each
//! returns a one-line summary on success and a diagnostic on failure.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hytrec::autograd::GradFault;
use hytrec::data::{DatasetSplit, DecomposedSequence, InteractionEvent};
use hytrec::eval::{auc, hit_rate_at_k, ndcg_at_k, rank_examples, rank_target, RankingResult};
use hytrec::math::{LinearLayer, Tensor};
use hytrec::model::{build_layer_schedule, HyTRecModel, LayerKind, ModelConfig, ModelInput, ScheduleKind};
use hytrec::tadn::{
    compute_gates, compute_temporal_decay, fuse_features, tadn_closed_form, tadn_scan, TadnLayerParams, TadnState,
};
use hytrec::train::{gradcheck_model, GradcheckOptions, GroupCheck, TrainConfig, Trainer};

pub type Check = Result<String, String>;

pub fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

pub fn random_linear(i: usize, o: usize, rng: &mut impl Rng) -> LinearLayer {
    let w = random_matrix(i, o, 1.0 / (i as f64).sqrt(), rng);
    let b = Tensor::from_vec((0..o).map(|_| rng.gen_range(-0.5..0.5)).collect());
    LinearLayer::new(w, b).unwrap()
}

pub fn random_tadn_params(d: usize, heads: usize, rng: &mut impl Rng) -> TadnLayerParams {
    TadnLayerParams {
        norm_gain: Tensor::from_vec((0..d).map(|_| rng.gen_range(0.5..1.5)).collect()),
        norm_shift: Tensor::from_vec((0..d).map(|_| rng.gen_range(-0.3..0.3)).collect()),
        gate_proj: random_linear(2 * d, d, rng),
        gate_scalar_proj: random_linear(d, 1, rng),
        q_proj: random_linear(d, d, rng),
        k_proj: random_linear(d, d, rng),
        v_proj: random_linear(d, d, rng),
        beta_proj: random_linear(d, 1, rng),
        out_proj: random_linear(d, d, rng),
        alpha: rng.gen_range(0.0..=1.0),
        decay_period: rng.gen_range(0.5..20.0),
        n_heads: heads,
    }
}

/// Increasing event times ending no later than the returned prediction time.
pub fn random_times(l: usize, rng: &mut impl Rng) -> (Tensor, f64) {
    let mut t = 0.0;
    let times: Vec<f64> = (0..l)
        .map(|_| {
            t += rng.gen_range(0.0..5.0);
            t
        })
        .collect();
    (Tensor::from_vec(times), t + rng.gen_range(0.0..5.0))
}

fn divisors(d: usize) -> Vec<usize> {
    (1..=d).filter(|h| d % h == 0).collect()
}

/// Recurrence against the unrolled sum over random layers, lengths, widths,
/// head splits, timestamps and gates. Returns the worst relative error.
pub fn scan_vs_closed_form(configs: usize, seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for c in 0..configs {
        // make sure both ends of the ranges are visited
        let l = match c {
            0 => 1,
            1 => 64,
            _ => rng.gen_range(1..=64),
        };
        let d = match c {
            0 => 2,
            1 => 16,
            _ => rng.gen_range(2..=16),
        };
        let hs = divisors(d);
        let heads = hs[rng.gen_range(0..hs.len())];
        let params = random_tadn_params(d, heads, &mut rng);
        let x = random_matrix(l, d, 2.0, &mut rng);
        let (times, now) = random_times(l, &mut rng);
        let tau = compute_temporal_decay(&times, now, params.decay_period).map_err(|e| e.to_string())?;
        let gates = compute_gates(&x, &tau, &params).map_err(|e| e.to_string())?;
        let fused = fuse_features(&x, &gates).map_err(|e| e.to_string())?;
        let a = tadn_scan(&fused, &gates, &params).map_err(|e| e.to_string())?;
        let b = tadn_closed_form(&fused, &gates, &params).map_err(|e| e.to_string())?;
        let err = a.relative_error(&b);
        if !(err <= 1e-8) {
            return Err(format!("config {c} (L={l}, d={d}, H={heads}): relative error {err:.3e}"));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 20,
        d_model: 8,
        n_heads: 2,
        n_layers_long: 4,
        hybrid_ratio: 3,
        short_window_k: 3,
        decay_period: 3.0,
        ..Default::default()
    }
}

pub fn tiny_gradcheck_input() -> (ModelInput, usize) {
    let items = (0..12).map(|i| (i * 7 + 3) % 20).collect();
    let times = (0..12).map(|t| (t * t) as f64 / 8.0).collect();
    (ModelInput::new(items, times, 19.0).unwrap(), 5)
}

pub fn tiny_gradcheck(fault: Option<GradFault>) -> Result<Vec<GroupCheck>, String> {
    let model = HyTRecModel::new(tiny_model_config(), 1).map_err(|e| e.to_string())?;
    gradcheck_model(&model, &[tiny_gradcheck_input()], &GradcheckOptions::default(), fault).map_err(|e| e.to_string())
}

pub fn summarise_gradcheck(groups: &[GroupCheck]) -> Check {
    let failed: Vec<&GroupCheck> = groups.iter().filter(|g| !g.passed).collect();
    let worst = groups
        .iter()
        .map(|g| g.norm_relative_error.max(g.max_relative_error))
        .fold(0.0, f64::max);
    if failed.is_empty() {
        Ok(format!("{} groups, worst relative error {worst:.2e}", groups.len()))
    } else {
        Err(format!(
            "{} of {} groups failed, first {} ({:.2e} / {:.2e})",
            failed.len(),
            groups.len(),
            failed[0].group,
            failed[0].norm_relative_error,
            failed[0].max_relative_error
        ))
    }
}

pub fn causality_model() -> HyTRecModel {
    let cfg = ModelConfig {
        vocab_size: 40,
        d_model: 16,
        n_heads: 4,
        n_layers_long: 4,
        hybrid_ratio: 3,
        short_window_k: 5,
        decay_period: 10.0,
        max_seq_len: 32,
        ..Default::default()
    };
    HyTRecModel::new(cfg, 7).unwrap()
}

/// For random prefixes, perturbs each later position in turn (item and
/// timestamp) and demands bitwise-identical logits; also compares against
/// the forward pass on the truncated context.
pub fn causality(model: &HyTRecModel, prefixes: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = model.config().vocab_size;
    let mut perturbations = 0;
    for p in 0..prefixes {
        let n = rng.gen_range(2..=48);
        let items: Vec<usize> = (0..n).map(|_| rng.gen_range(0..v)).collect();
        let (times, _) = random_times(n, &mut rng);
        let times = times.into_data();
        let t = rng.gen_range(1..n);
        let now = times[t - 1] + rng.gen_range(0.0..3.0);
        let run = |items: &[usize], times: &[f64], len: usize| {
            let mut tape = hytrec::autograd::Tape::inference();
            let out = model.forward_masked(&mut tape, items, times, len, now).unwrap();
            tape.value(out).data().to_vec()
        };
        let base = run(&items, &times, t);
        let truncated = run(&items[..t], &times[..t], t);
        if bits(&base) != bits(&truncated) {
            return Err(format!("prefix {p} (n={n}, t={t}): masked and truncated passes differ"));
        }
        for pos in t..n {
            let mut it = items.clone();
            let mut ts = times.clone();
            it[pos] = (it[pos] + rng.gen_range(1..v)) % v;
            ts[pos] += rng.gen_range(-2.0..50.0);
            perturbations += 1;
            if bits(&run(&it, &ts, t)) != bits(&base) {
                return Err(format!("prefix {p} (n={n}, t={t}): perturbing position {pos} changed the output"));
            }
        }
    }
    Ok(format!("{prefixes} prefixes, {perturbations} suffix perturbations, all bitwise identical"))
}

fn bits(xs: &[f64]) -> Vec<u64> {
    xs.iter().map(|x| x.to_bits()).collect()
}

/// Decay range and strict monotonicity over random elapsed times.
pub fn decay_invariants(draws: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..draws {
        let period = rng.gen_range(0.1..1e6);
        let e1 = rng.gen_range(0.0..40.0 * period);
        let e2 = e1 + rng.gen_range(1e-6..5.0) * period;
        let tau = compute_temporal_decay(&Tensor::from_vec(vec![-e1, -e2]), 0.0, period).map_err(|e| e.to_string())?;
        let (a, b) = (tau.data()[0], tau.data()[1]);
        if !(a > 0.0 && a <= 1.0 && b > 0.0 && b <= 1.0) {
            return Err(format!("draw {i}: tau {a} / {b} outside (0, 1]"));
        }
        if !(a > b) {
            return Err(format!("draw {i}: elapsed {e1} -> {a}, {e2} -> {b} not strictly decreasing"));
        }
    }
    let zero = compute_temporal_decay(&Tensor::from_vec(vec![5.0]), 5.0, 3.0).map_err(|e| e.to_string())?;
    if zero.data()[0] != 1.0 {
        return Err("zero elapsed time must give tau = 1".into());
    }
    Ok(format!("{draws} draws"))
}

/// Gate ranges, fusion bounds and the temporal ordering of the learned gate.
pub fn gate_invariants(draws: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = 0usize;
    for i in 0..draws {
        let l = rng.gen_range(1..=12);
        let d = rng.gen_range(2..=8);
        let mut params = random_tadn_params(d, 1, &mut rng);
        let x = random_matrix(l, d, rng.gen_range(0.1..6.0), &mut rng);
        let (times, now) = random_times(l, &mut rng);
        let tau = compute_temporal_decay(&times, now, params.decay_period).map_err(|e| e.to_string())?;
        let g = compute_gates(&x, &tau, &params).map_err(|e| e.to_string())?;
        for (name, t) in [("g_vec", &g.g_vec), ("g_scalar", &g.g_scalar), ("g_static", &g.g_static)] {
            if let Some(bad) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(format!("draw {i}: {name} value {bad} outside [0, 1]"));
            }
            values += t.len();
        }
        let fused = fuse_features(&x, &g).map_err(|e| e.to_string())?;
        for ((&f, &h), &dh) in fused.data().iter().zip(x.data()).zip(g.delta_h.data()) {
            // a convex combination can round one ulp past its endpoints
            let slack = 4.0 * f64::EPSILON * (h.abs() + dh.abs());
            if f < h.min(dh) - slack || f > h.max(dh) + slack {
                return Err(format!("draw {i}: fused {f} outside [{}, {}]", h.min(dh), h.max(dh)));
            }
        }

        // identical rows, so only the elapsed time separates two positions
        params.alpha = 1.0;
        let row: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let same = Tensor::from_rows(&[row.clone(), row]).unwrap();
        let t0 = rng.gen_range(0.0..10.0);
        let t1 = t0 + rng.gen_range(0.01..10.0);
        let tau = compute_temporal_decay(&Tensor::from_vec(vec![t0, t1]), t1, params.decay_period)
            .map_err(|e| e.to_string())?;
        let g = compute_gates(&same, &tau, &params).map_err(|e| e.to_string())?;
        if !(g.g_scalar.data()[1] > g.g_scalar.data()[0]) {
            return Err(format!("draw {i}: the more recent position has no larger scalar gate"));
        }
        if (0..d).any(|j| !(g.g_vec.get2(1, j) > g.g_vec.get2(0, j))) {
            return Err(format!("draw {i}: the more recent position has no larger vector gate"));
        }
    }
    Ok(format!("{draws} draws, {values} gate values"))
}

/// `‖S_t‖_F ≤ Σ_{i≤t} β_i ‖v_i‖` along random unit-key trajectories.
pub fn state_norm_bound(draws: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut steps = 0;
    for i in 0..draws {
        let dh = rng.gen_range(1..=8);
        let mut state = TadnState::new(1, dh);
        let mut bound = 0.0;
        for t in 0..rng.gen_range(1..=30) {
            let mut k: Vec<f64> = (0..dh).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = k.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            k.iter_mut().for_each(|x| *x /= n);
            let q: Vec<f64> = (0..dh).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let scale = rng.gen_range(0.01..10.0);
            let v: Vec<f64> = (0..dh).map(|_| rng.gen_range(-scale..scale)).collect();
            let beta: f64 = rng.gen_range(0.0..1.0);
            let gate: f64 = rng.gen_range(0.0..=1.0);
            state.step(&q, &k, &v, beta, gate);
            bound += beta * v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let norm = state.frobenius_norm(0);
            steps += 1;
            if norm > bound * (1.0 + 1e-12) + 1e-300 {
                return Err(format!("draw {i}, step {t}: ||S|| = {norm} exceeds bound {bound}"));
            }
        }
    }
    Ok(format!("{draws} trajectories, {steps} steps"))
}

/// Pairwise ranking oracle: sorts every item by (score desc, id asc) with an
/// O(V²) comparison count, then reads off the target's position and the
/// fraction of negatives it beats.
pub fn pairwise_oracle(scores: &[f64], target: usize) -> (usize, f64) {
    let v = scores.len();
    let mut position = vec![0usize; v];
    for i in 0..v {
        position[i] = (0..v)
            .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
            .count()
            + 1;
    }
    let mut wins = 0.0;
    for j in 0..v {
        if j != target {
            if scores[target] > scores[j] {
                wins += 1.0;
            } else if scores[target] == scores[j] {
                wins += 0.5;
            }
        }
    }
    let auc = if v < 2 { 1.0 } else { wins / (v - 1) as f64 };
    (position[target], auc)
}

pub fn metric_oracles(seed: u64) -> Check {
    let hand = |scores: &[f64], target: usize| rank_target(scores, target).map_err(|e| e.to_string());
    // hand-enumerated cases
    let r1 = hand(&[0.1, 0.9, 0.3], 1)?;
    let r3 = hand(&[0.5, 0.9, 0.1, 0.7], 0)?;
    if ndcg_at_k(&[r1.clone()], 10).unwrap() != 1.0 || hit_rate_at_k(&[r1.clone()], 1).unwrap() != 1.0 {
        return Err("rank 1 must give NDCG 1 and HR@1 1".into());
    }
    if r3.rank != 3 || ndcg_at_k(&[r3.clone()], 10).unwrap() != 0.5 {
        return Err(format!("rank-3 case gave rank {} and NDCG {}", r3.rank, ndcg_at_k(&[r3.clone()], 10).unwrap()));
    }
    if hit_rate_at_k(&[r3.clone()], 2).unwrap() != 0.0 || hit_rate_at_k(&[r3.clone()], 3).unwrap() != 1.0 {
        return Err("HR cutoff at rank 3 is wrong".into());
    }
    let flat = hand(&[1.5; 7], 3)?;
    if auc(&[flat]).unwrap() != 0.5 {
        return Err("all-ties AUC must be 0.5".into());
    }
    if auc(&[r1.clone()]).unwrap() != 1.0 || auc(&[hand(&[0.0, 1.0, 2.0], 0)?]).unwrap() != 0.0 {
        return Err("AUC extremes are wrong".into());
    }
    // two users: mean of per-user metrics
    let pair = [r1, r3];
    if hit_rate_at_k(&pair, 1).unwrap() != 0.5 || ndcg_at_k(&pair, 10).unwrap() != 0.75 {
        return Err("metrics must average over users".into());
    }

    // random cases against the pairwise oracle, ties included
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results: Vec<RankingResult> = Vec::new();
    let mut oracle: Vec<(usize, f64)> = Vec::new();
    for _ in 0..300 {
        let v = rng.gen_range(1..60);
        let levels = rng.gen_range(1..8);
        let scores: Vec<f64> = (0..v).map(|_| rng.gen_range(0..levels) as f64 * 0.25).collect();
        let target = rng.gen_range(0..v);
        results.push(hand(&scores, target)?);
        oracle.push(pairwise_oracle(&scores, target));
    }
    for k in [1, 5, 10, 50] {
        let hr = oracle.iter().filter(|(r, _)| *r <= k).count() as f64 / oracle.len() as f64;
        let nd = oracle
            .iter()
            .filter(|(r, _)| *r <= k)
            .map(|(r, _)| 1.0 / ((r + 1) as f64).log2())
            .sum::<f64>()
            / oracle.len() as f64;
        if hit_rate_at_k(&results, k).unwrap() != hr || ndcg_at_k(&results, k).unwrap() != nd {
            return Err(format!("HR/NDCG@{k} disagree with the pairwise oracle"));
        }
    }
    let a = oracle.iter().map(|(_, a)| a).sum::<f64>() / oracle.len() as f64;
    if auc(&results).unwrap() != a {
        return Err(format!("AUC {} differs from pairwise oracle {a}", auc(&results).unwrap()));
    }
    Ok("hand cases and 300 random tied cases match exactly".into())
}

fn event(user: &str, item: usize, t: u64) -> InteractionEvent {
    InteractionEvent {
        user_id: user.to_string(),
        item_id: item,
        timestamp: t,
    }
}

/// 32 short random sequences over a small catalogue.
pub fn overfit_split(seed: u64) -> DatasetSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = 4;
    let examples: Vec<DecomposedSequence> = (0..32)
        .map(|u| {
            let user = format!("u{u:02}");
            let n = rng.gen_range(6..=12);
            let events: Vec<InteractionEvent> = (0..n).map(|t| event(&user, rng.gen_range(0..30), t as u64 * 2)).collect();
            let cut = n - k;
            DecomposedSequence {
                user_id: user,
                long_part: events[..cut].to_vec(),
                short_part: events[cut..].to_vec(),
                target: rng.gen_range(0..30),
                target_time: 2 * n as u64,
            }
        })
        .collect();
    DatasetSplit {
        train: examples.clone(),
        valid: Vec::new(),
        test: examples,
    }
}

pub fn overfit_config() -> (ModelConfig, TrainConfig) {
    let model = ModelConfig {
        vocab_size: 30,
        d_model: 16,
        n_heads: 2,
        n_layers_long: 4,
        hybrid_ratio: 3,
        short_window_k: 4,
        decay_period: 6.0,
        ..Default::default()
    };
    let train = TrainConfig {
        learning_rate: 1e-2,
        batch_size: 32,
        epochs: 200,
        ..Default::default()
    };
    (model, train)
}

/// Trains until the loss drops below a tenth of its initial value, then
/// checks that a saved and reloaded checkpoint ranks every example
/// identically.
pub fn overfit_and_round_trip(dir: &std::path::Path) -> Check {
    let split = overfit_split(3);
    let (mcfg, tcfg) = overfit_config();
    let model = HyTRecModel::new(mcfg, 0).map_err(|e| e.to_string())?;
    let epochs = tcfg.epochs;
    let mut trainer = Trainer::new(model, tcfg).map_err(|e| e.to_string())?;
    let initial = trainer.mean_loss(&split.train).map_err(|e| e.to_string())?;
    let mut reached = None;
    for e in 1..=epochs {
        trainer.train_epoch(&split.train).map_err(|e| e.to_string())?;
        let loss = trainer.mean_loss(&split.train).map_err(|e| e.to_string())?;
        if loss < 0.1 * initial {
            reached = Some((e, loss));
            break;
        }
    }
    let Some((epoch, loss)) = reached else {
        let last = trainer.mean_loss(&split.train).unwrap_or(f64::NAN);
        return Err(format!("loss {last:.4} after {epochs} epochs, initial {initial:.4}"));
    };

    let path = dir.join("overfit.ckpt");
    trainer.checkpoint().save(&path).map_err(|e| e.to_string())?;
    let reloaded = hytrec::model::Checkpoint::load(&path)
        .and_then(|c| c.to_model())
        .map_err(|e| e.to_string())?;
    let (before, _) = rank_examples(&trainer.model, &split.test).map_err(|e| e.to_string())?;
    let (after, _) = rank_examples(&reloaded, &split.test).map_err(|e| e.to_string())?;
    let same = before.len() == after.len()
        && before
            .iter()
            .zip(&after)
            .all(|(a, b)| a.rank == b.rank && a.target_score.to_bits() == b.target_score.to_bits());
    if !same {
        return Err("reloaded checkpoint ranks differently".into());
    }
    Ok(format!(
        "loss {initial:.3} -> {loss:.4} at epoch {epoch}; reloaded ranking bitwise identical"
    ))
}

/// Counts, spacing and final-layer rule for every n ≤ 32, r ≤ 8, plus the
/// two named patterns.
pub fn schedule_checks() -> Check {
    use LayerKind::{Linear as L, Softmax as S};
    let s = build_layer_schedule(8, 7).map_err(|e| e.to_string())?;
    if s.kinds() != [L, L, L, L, L, L, L, S] {
        return Err(format!("8 layers at 7:1 gave {s}"));
    }
    let s = build_layer_schedule(4, 3).map_err(|e| e.to_string())?;
    if s.kinds() != [L, L, L, S] {
        return Err(format!("4 layers at 3:1 gave {s}"));
    }
    for n in 1..=32 {
        for r in 1..=8 {
            let s = build_layer_schedule(n, r).map_err(|e| e.to_string())?;
            if s.len() != n || s.kinds()[n - 1] != S {
                return Err(format!("n={n}, r={r}: {s} does not end in softmax"));
            }
            let pos = s.softmax_positions();
            if pos.windows(2).any(|w| w[1] - w[0] != r + 1) {
                return Err(format!("n={n}, r={r}: softmax positions {pos:?} not spaced {}", r + 1));
            }
            if n % (r + 1) == 0 && pos.len() != n / (r + 1) {
                return Err(format!("n={n}, r={r}: {} softmax layers", pos.len()));
            }
            if pos[0] > r {
                return Err(format!("n={n}, r={r}: first softmax at {} leaves a gap", pos[0]));
            }
        }
    }
    if build_layer_schedule(0, 3).is_ok() || build_layer_schedule(4, 0).is_ok() {
        return Err("invalid counts accepted".into());
    }
    Ok("named patterns and 256 (n, r) pairs".into())
}

/// One TADN layer over raw embeddings, for comparing the taped model with
/// the standalone layer.
pub fn single_tadn_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 25,
        d_model: 8,
        n_heads: 2,
        n_layers_long: 1,
        schedule: ScheduleKind::AllLinear,
        decay_period: 4.0,
        alpha: 0.3,
        ..Default::default()
    }
}
