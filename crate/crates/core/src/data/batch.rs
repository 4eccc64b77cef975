//! Padded mini-batches.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::split::DecomposedSequence;
use crate::model::ModelInput;

/// Left-padded rows of equal width; `mask[r][c]` is true for real events.
/// Padded slots hold item 0 and time 0 and are never read.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub items: Vec<Vec<usize>>,
    pub times: Vec<Vec<f64>>,
    pub mask: Vec<Vec<bool>>,
    pub targets: Vec<usize>,
    pub target_times: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn width(&self) -> usize {
        self.items.first().map_or(0, Vec::len)
    }

    /// Row `r` with the padding stripped.
    pub fn input(&self, r: usize) -> ModelInput {
        let keep = |c: &usize| self.mask[r][*c];
        let cols: Vec<usize> = (0..self.width()).filter(keep).collect();
        ModelInput {
            items: cols.iter().map(|&c| self.items[r][c]).collect(),
            times: cols.iter().map(|&c| self.times[r][c]).collect(),
            current_time: self.target_times[r],
        }
    }
}

/// Keeps the most recent `max_len` context events of every example and pads
/// on the left. With a shuffle seed the example order is a seeded
/// permutation, otherwise input order.
pub fn make_batches(
    examples: &[DecomposedSequence],
    batch_size: usize,
    max_len: usize,
    shuffle_seed: Option<u64>,
) -> Vec<Batch> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size.max(1))
        .map(|chunk| {
            let rows: Vec<ModelInput> = chunk
                .iter()
                .map(|&i| {
                    let mut inp = examples[i].to_input();
                    let start = inp.items.len().saturating_sub(max_len);
                    inp.items.drain(..start);
                    inp.times.drain(..start);
                    inp
                })
                .collect();
            let width = rows.iter().map(|r| r.items.len()).max().unwrap_or(0);
            let mut b = Batch {
                items: Vec::new(),
                times: Vec::new(),
                mask: Vec::new(),
                targets: chunk.iter().map(|&i| examples[i].target).collect(),
                target_times: rows.iter().map(|r| r.current_time).collect(),
            };
            for r in rows {
                let pad = width - r.items.len();
                b.items.push(std::iter::repeat(0).take(pad).chain(r.items).collect());
                b.times.push(std::iter::repeat(0.0).take(pad).chain(r.times).collect());
                b.mask.push((0..width).map(|c| c >= pad).collect());
            }
            b
        })
        .collect()
}
