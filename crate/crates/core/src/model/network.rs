//! The dual-branch network: a long hybrid stack over the older history, a
//! short softmax stack over the most recent window, a gated fusion of the two
//! and a tied-embedding scoring head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::math::{LinearLayer, Tensor};
use crate::model::config::{LinearKind, ModelConfig};
use crate::model::schedule::{LayerKind, LayerSchedule};
use crate::params::{ParamId, ParamStore};
use crate::tadn::{compute_temporal_decay, TadnLayerParams};

#[derive(Debug, Clone, Copy)]
struct Proj {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: ParamId,
    shift: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Attn {
    q: Proj,
    k: Proj,
    v: Proj,
    out: Proj,
}

#[derive(Debug, Clone, Copy)]
enum LongLayer {
    Tadn {
        norm: Norm,
        gate: Proj,
        gate_scalar: Proj,
        beta: Proj,
        attn: Attn,
    },
    Softmax {
        norm: Norm,
        attn: Attn,
    },
    Linear {
        norm: Norm,
        attn: Attn,
    },
}

#[derive(Debug, Clone, Copy)]
struct ShortBlock {
    norm1: Norm,
    attn: Attn,
    norm2: Norm,
    ffn_in: Proj,
    ffn_out: Proj,
}

/// A user's context, oldest first, and the time at which the next item is
/// predicted.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub items: Vec<usize>,
    pub times: Vec<f64>,
    pub current_time: f64,
}

impl ModelInput {
    pub fn new(items: Vec<usize>, times: Vec<f64>, current_time: f64) -> Result<Self> {
        if items.len() != times.len() {
            return Err(Error::InvalidArgument(format!(
                "{} items but {} timestamps",
                items.len(),
                times.len()
            )));
        }
        Ok(ModelInput {
            items,
            times,
            current_time,
        })
    }
}

#[derive(Debug, Clone)]
pub struct HyTRecModel {
    config: ModelConfig,
    schedule: LayerSchedule,
    store: ParamStore,
    item_embedding: ParamId,
    position: Option<ParamId>,
    long: Vec<LongLayer>,
    short: Vec<ShortBlock>,
    branch_gate: Option<Proj>,
}

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut ChaCha8Rng,
    scale: f64,
}

impl Builder<'_> {
    fn weight(&mut self, name: String, shape: &[usize]) -> Result<ParamId> {
        let scale = self.scale;
        self.store.add_uniform(name, shape, scale, self.rng)
    }

    fn proj(&mut self, name: &str, d_in: usize, d_out: usize) -> Result<Proj> {
        Ok(Proj {
            w: self.weight(format!("{name}.weight"), &[d_in, d_out])?,
            b: self.store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]))?,
        })
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<Norm> {
        Ok(Norm {
            gain: self.store.add(format!("{name}.gain"), Tensor::filled(&[d], 1.0))?,
            shift: self.store.add(format!("{name}.shift"), Tensor::zeros(&[d]))?,
        })
    }

    fn attn(&mut self, name: &str, d: usize) -> Result<Attn> {
        Ok(Attn {
            q: self.proj(&format!("{name}.q_proj"), d, d)?,
            k: self.proj(&format!("{name}.k_proj"), d, d)?,
            v: self.proj(&format!("{name}.v_proj"), d, d)?,
            out: self.proj(&format!("{name}.out_proj"), d, d)?,
        })
    }
}

impl HyTRecModel {
    /// Weights uniform in `±1/√d_model`, biases and norm shifts zero, norm
    /// gains one.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let scale = config.init_scale();
        Self::with_init_scale(config, seed, scale)
    }

    pub fn with_init_scale(config: ModelConfig, seed: u64, init_scale: f64) -> Result<Self> {
        config.validate()?;
        if !(init_scale >= 0.0 && init_scale.is_finite()) {
            return Err(Error::Config(format!("init_scale {init_scale} must be non-negative")));
        }
        let schedule = config.layer_schedule()?;
        let d = config.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: ParamStore::new(),
            rng: &mut rng,
            scale: init_scale,
        };
        let item_embedding = b.weight("item_embedding".into(), &[config.vocab_size, d])?;

        let mut long = Vec::with_capacity(schedule.len());
        for (i, kind) in schedule.kinds().iter().enumerate() {
            let layer = match (kind, config.linear_kind) {
                (LayerKind::Softmax, _) => {
                    let p = format!("long.{i}.softmax");
                    LongLayer::Softmax {
                        norm: b.norm(&format!("{p}.norm"), d)?,
                        attn: b.attn(&p, d)?,
                    }
                }
                (LayerKind::Linear, LinearKind::Tadn) => {
                    let p = format!("long.{i}.tadn");
                    LongLayer::Tadn {
                        norm: b.norm(&format!("{p}.norm"), d)?,
                        gate: b.proj(&format!("{p}.gate_proj"), 2 * d, d)?,
                        gate_scalar: b.proj(&format!("{p}.gate_scalar_proj"), d, 1)?,
                        beta: b.proj(&format!("{p}.beta_proj"), d, 1)?,
                        attn: b.attn(&p, d)?,
                    }
                }
                (LayerKind::Linear, LinearKind::Baseline) => {
                    let p = format!("long.{i}.linear");
                    LongLayer::Linear {
                        norm: b.norm(&format!("{p}.norm"), d)?,
                        attn: b.attn(&p, d)?,
                    }
                }
            };
            long.push(layer);
        }

        let (position, short, branch_gate) = if config.use_short_branch {
            let position = b.weight("short.position_embedding".into(), &[config.short_window_k, d])?;
            let mut short = Vec::with_capacity(config.n_layers_short);
            for i in 0..config.n_layers_short {
                let p = format!("short.{i}");
                short.push(ShortBlock {
                    norm1: b.norm(&format!("{p}.attn_norm"), d)?,
                    attn: b.attn(&format!("{p}.attn"), d)?,
                    norm2: b.norm(&format!("{p}.ffn_norm"), d)?,
                    ffn_in: b.proj(&format!("{p}.ffn_in"), d, config.ffn_mult * d)?,
                    ffn_out: b.proj(&format!("{p}.ffn_out"), config.ffn_mult * d, d)?,
                });
            }
            let gate = b.proj("branch_gate", 2 * d, d)?;
            (Some(position), short, Some(gate))
        } else {
            (None, Vec::new(), None)
        };

        let store = b.store;
        Ok(HyTRecModel {
            config,
            schedule,
            store,
            item_embedding,
            position,
            long,
            short,
            branch_gate,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schedule(&self) -> &LayerSchedule {
        &self.schedule
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Replaces every parameter; names and shapes must match this model's.
    pub fn load_params(&mut self, store: ParamStore) -> Result<()> {
        if store.len() != self.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                store.len(),
                self.store.len()
            )));
        }
        for ((_, n_new, t_new), (_, n_old, t_old)) in store.iter().zip(self.store.iter()) {
            if n_new != n_old || t_new.shape() != t_old.shape() {
                return Err(Error::Checkpoint(format!(
                    "checkpoint tensor {n_new} {:?} does not match model tensor {n_old} {:?}",
                    t_new.shape(),
                    t_old.shape()
                )));
            }
        }
        self.store = store;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    /// Scalars in the short branch, including the branch gate.
    pub fn short_branch_param_count(&self) -> usize {
        self.store.count_prefix("short.") + self.store.count_prefix("branch_gate.")
    }

    /// Split of a context of length `n` into (long, short) lengths.
    pub fn split_lengths(&self, n: usize) -> (usize, usize) {
        if self.config.use_short_branch {
            let s = n.min(self.config.short_window_k);
            (n - s, s)
        } else {
            (n, 0)
        }
    }

    /// Copies one layer's TADN parameters out of the store.
    pub fn tadn_layer_params(&self, layer: usize) -> Option<TadnLayerParams> {
        let LongLayer::Tadn {
            norm,
            gate,
            gate_scalar,
            beta,
            attn,
        } = *self.long.get(layer)?
        else {
            return None;
        };
        let lin = |p: Proj| LinearLayer::new(self.store.get(p.w).clone(), self.store.get(p.b).clone()).ok();
        Some(TadnLayerParams {
            norm_gain: self.store.get(norm.gain).clone(),
            norm_shift: self.store.get(norm.shift).clone(),
            gate_proj: lin(gate)?,
            gate_scalar_proj: lin(gate_scalar)?,
            q_proj: lin(attn.q)?,
            k_proj: lin(attn.k)?,
            v_proj: lin(attn.v)?,
            beta_proj: lin(beta)?,
            out_proj: lin(attn.out)?,
            alpha: self.config.alpha,
            decay_period: self.config.decay_period,
            n_heads: self.config.n_heads,
        })
    }

    fn proj(&self, tape: &mut Tape, x: Var, p: Proj) -> Result<Var> {
        let w = tape.param(&self.store, p.w)?;
        let b = tape.param(&self.store, p.b)?;
        tape.linear(x, w, b)
    }

    fn norm(&self, tape: &mut Tape, x: Var, n: Norm) -> Result<Var> {
        let g = tape.param(&self.store, n.gain)?;
        let s = tape.param(&self.store, n.shift)?;
        tape.layer_norm(x, g, s)
    }

    fn embed(&self, tape: &mut Tape, items: &[usize]) -> Result<Var> {
        let v = self.config.vocab_size;
        if let Some(&bad) = items.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidArgument(format!("item id {bad} outside vocabulary of {v}")));
        }
        let table = tape.param(&self.store, self.item_embedding)?;
        tape.gather(table, items)
    }

    fn tadn_layer(&self, tape: &mut Tape, h: Var, tau: Var, layer: &LongLayer) -> Result<Var> {
        let LongLayer::Tadn {
            norm,
            gate,
            gate_scalar,
            beta,
            attn,
        } = *layer
        else {
            unreachable!("tadn_layer called on a non-TADN layer")
        };
        let d = self.config.d_model;
        let alpha = self.config.alpha;
        let x = self.norm(tape, h, norm)?;
        let h_bar = tape.causal_mean(x)?;
        let delta = tape.sub(x, h_bar)?;
        let sim = tape.row_dot(x, h_bar)?;
        let sim = tape.scale(sim, 1.0 / (d as f64).sqrt())?;
        let g_static = tape.sigmoid(sim)?;
        let g_static = tape.scale(g_static, 1.0 - alpha)?;

        let cat = tape.concat(x, delta)?;
        let learned = self.proj(tape, cat, gate)?;
        let learned = tape.sigmoid(learned)?;
        let learned = tape.mul_col(learned, tau)?;
        let learned = tape.scale(learned, alpha)?;
        let g_vec = tape.add_col(learned, g_static)?;

        let learned_s = self.proj(tape, x, gate_scalar)?;
        let learned_s = tape.sigmoid(learned_s)?;
        let learned_s = tape.mul(learned_s, tau)?;
        let learned_s = tape.scale(learned_s, alpha)?;
        let g_scalar = tape.add(learned_s, g_static)?;

        let fused = tape.mix(g_vec, delta, x)?;
        let q = self.proj(tape, fused, attn.q)?;
        let k = self.proj(tape, fused, attn.k)?;
        let k = tape.l2_normalize_heads(k, self.config.n_heads)?;
        let v = self.proj(tape, fused, attn.v)?;
        let b = self.proj(tape, fused, beta)?;
        let b = tape.sigmoid(b)?;
        let o = tape.delta_scan(q, k, v, b, g_scalar, self.config.n_heads)?;
        let o = self.proj(tape, o, attn.out)?;
        tape.add(h, o)
    }

    fn attention_layer(&self, tape: &mut Tape, h: Var, norm: Norm, attn: Attn, softmax: bool) -> Result<Var> {
        let x = self.norm(tape, h, norm)?;
        let mut q = self.proj(tape, x, attn.q)?;
        let mut k = self.proj(tape, x, attn.k)?;
        let v = self.proj(tape, x, attn.v)?;
        let o = if softmax {
            tape.softmax_attention(q, k, v, self.config.n_heads)?
        } else {
            q = tape.elu_plus_one(q)?;
            k = tape.elu_plus_one(k)?;
            tape.linear_attention(q, k, v, self.config.n_heads)?
        };
        let o = self.proj(tape, o, attn.out)?;
        tape.add(h, o)
    }

    /// Hidden states of the long stack at every position, `[L × d]`.
    pub fn long_branch_states(&self, tape: &mut Tape, items: &[usize], times: &[f64], current_time: f64) -> Result<Var> {
        if items.len() != times.len() {
            return Err(Error::InvalidArgument(format!("{} items but {} timestamps", items.len(), times.len())));
        }
        let tau = compute_temporal_decay(&Tensor::from_vec(times.to_vec()), current_time, self.config.decay_period)?;
        self.long_states_with_decay(tape, items, tau)
    }

    fn long_states_with_decay(&self, tape: &mut Tape, items: &[usize], tau: Tensor) -> Result<Var> {
        if items.is_empty() {
            return Err(Error::InvalidArgument("long branch states need at least one item".into()));
        }
        let mut h = self.embed(tape, items)?;
        let tau = tape.constant(tau.reshape(&[items.len(), 1])?)?;
        for layer in &self.long {
            h = match *layer {
                LongLayer::Tadn { .. } => self.tadn_layer(tape, h, tau, layer)?,
                LongLayer::Softmax { norm, attn } => self.attention_layer(tape, h, norm, attn, true)?,
                LongLayer::Linear { norm, attn } => self.attention_layer(tape, h, norm, attn, false)?,
            };
        }
        Ok(h)
    }

    /// Last-position hidden state of the long stack, `[1 × d]`; the zero
    /// vector for an empty history.
    pub fn long_branch_forward(&self, tape: &mut Tape, items: &[usize], times: &[f64], current_time: f64) -> Result<Var> {
        if items.is_empty() {
            return tape.constant(Tensor::zeros(&[1, self.config.d_model]));
        }
        let h = self.long_branch_states(tape, items, times, current_time)?;
        tape.slice_rows(h, items.len() - 1, 1)
    }

    /// Last-position hidden state of the short stack, `[1 × d]`.
    pub fn short_branch_forward(&self, tape: &mut Tape, items: &[usize]) -> Result<Var> {
        let pos = self
            .position
            .ok_or_else(|| Error::InvalidArgument("this model has no short branch".into()))?;
        let k = self.config.short_window_k;
        if items.is_empty() || items.len() > k {
            return Err(Error::InvalidArgument(format!(
                "short branch takes 1..={k} items, got {}",
                items.len()
            )));
        }
        let e = self.embed(tape, items)?;
        let table = tape.param(&self.store, pos)?;
        let p = tape.slice_rows(table, 0, items.len())?;
        let mut h = tape.add(e, p)?;
        for block in &self.short {
            h = self.attention_layer(tape, h, block.norm1, block.attn, true)?;
            let x = self.norm(tape, h, block.norm2)?;
            let x = self.proj(tape, x, block.ffn_in)?;
            let x = tape.silu(x)?;
            let x = self.proj(tape, x, block.ffn_out)?;
            h = tape.add(h, x)?;
        }
        tape.slice_rows(h, items.len() - 1, 1)
    }

    /// `g ⊙ short + (1 − g) ⊙ long` with `g = σ(W·[long, short] + b)`.
    pub fn fuse_branches(&self, tape: &mut Tape, long: Var, short: Var) -> Result<Var> {
        let gate = self
            .branch_gate
            .ok_or_else(|| Error::InvalidArgument("this model has no short branch".into()))?;
        let cat = tape.concat(long, short)?;
        let g = self.proj(tape, cat, gate)?;
        let g = tape.sigmoid(g)?;
        tape.mix(g, short, long)
    }

    /// Logits over the vocabulary, `[1 × V]`, scored against the item
    /// embedding table.
    pub fn predict_scores(&self, tape: &mut Tape, fused: Var) -> Result<Var> {
        let table = tape.param(&self.store, self.item_embedding)?;
        tape.matmul_bt(fused, table)
    }

    /// Logits for the next item after `input`.
    pub fn forward(&self, tape: &mut Tape, input: &ModelInput) -> Result<Var> {
        let n = input.items.len();
        if input.times.len() != n {
            return Err(Error::InvalidArgument(format!("{n} items but {} timestamps", input.times.len())));
        }
        self.forward_masked(tape, &input.items, &input.times, n, input.current_time)
    }

    /// Logits for the next item after the first `prefix_len` events, with
    /// any later events still present in the long-branch input. Later
    /// positions only ever pass through causal layers and are never read
    /// out, so the result equals the forward pass on the truncated context.
    pub fn forward_masked(
        &self,
        tape: &mut Tape,
        items: &[usize],
        times: &[f64],
        prefix_len: usize,
        current_time: f64,
    ) -> Result<Var> {
        if prefix_len == 0 || prefix_len > items.len() || items.len() != times.len() {
            return Err(Error::InvalidArgument(format!(
                "prefix of {prefix_len} invalid for {} items and {} timestamps",
                items.len(),
                times.len()
            )));
        }
        let start = prefix_len.saturating_sub(self.config.max_seq_len);
        let (n_long, _) = self.split_lengths(prefix_len - start);
        let long_end = start + n_long;

        let long = if n_long == 0 {
            tape.constant(Tensor::zeros(&[1, self.config.d_model]))?
        } else {
            let mut tau =
                compute_temporal_decay(&Tensor::from_vec(times[start..long_end].to_vec()), current_time, self.config.decay_period)?
                    .into_data();
            // placeholder decay for positions that are never read out
            tau.resize(items.len() - start, 1.0);
            let h = self.long_states_with_decay(tape, &items[start..], Tensor::from_vec(tau))?;
            tape.slice_rows(h, n_long - 1, 1)?
        };
        let fused = if self.config.use_short_branch {
            let short = self.short_branch_forward(tape, &items[long_end..prefix_len])?;
            self.fuse_branches(tape, long, short)?
        } else {
            long
        };
        self.predict_scores(tape, fused)
    }

    /// `−log softmax(logits)[target]`.
    pub fn loss(&self, tape: &mut Tape, input: &ModelInput, target: usize) -> Result<Var> {
        let logits = self.forward(tape, input)?;
        tape.cross_entropy(logits, target)
    }

    /// Logits without recording a backward graph.
    pub fn scores(&self, input: &ModelInput) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let v = self.forward(&mut tape, input)?;
        Ok(tape.value(v).clone())
    }
}
