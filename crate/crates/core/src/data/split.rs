//! Long/short decomposition and the leave-one-out split.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::log::InteractionEvent;
use crate::data::sequence::UserSequence;
use crate::error::{Error, Result};
use crate::model::ModelInput;

/// One prediction: the context split into its older and most recent parts,
/// and the held-out next item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecomposedSequence {
    pub user_id: String,
    pub long_part: Vec<InteractionEvent>,
    pub short_part: Vec<InteractionEvent>,
    pub target: usize,
    pub target_time: u64,
}

/// Splits a context into `(long, short)` with `|short| = min(k, n)`.
pub fn decompose_context(context: &[InteractionEvent], k: usize) -> (Vec<InteractionEvent>, Vec<InteractionEvent>) {
    let cut = context.len().saturating_sub(k);
    (context[..cut].to_vec(), context[cut..].to_vec())
}

/// The last event becomes the target; the rest is the context.
pub fn decompose(seq: &UserSequence, k: usize) -> Result<DecomposedSequence> {
    if k == 0 {
        return Err(Error::Config("short window must be at least 1".into()));
    }
    let n = seq.len();
    if n < 2 {
        return Err(Error::Data(format!(
            "user {} has {n} events; a prediction needs at least 2",
            seq.user_id
        )));
    }
    let (long_part, short_part) = decompose_context(&seq.events[..n - 1], k);
    let last = &seq.events[n - 1];
    Ok(DecomposedSequence {
        user_id: seq.user_id.clone(),
        long_part,
        short_part,
        target: last.item_id,
        target_time: last.timestamp,
    })
}

impl DecomposedSequence {
    pub fn context_len(&self) -> usize {
        self.long_part.len() + self.short_part.len()
    }

    pub fn context(&self) -> impl Iterator<Item = &InteractionEvent> {
        self.long_part.iter().chain(&self.short_part)
    }

    pub fn context_items(&self) -> Vec<usize> {
        self.context().map(|e| e.item_id).collect()
    }

    /// Context in model form; the prediction time is the target's timestamp.
    pub fn to_input(&self) -> ModelInput {
        ModelInput {
            items: self.context_items(),
            times: self.context().map(|e| e.timestamp as f64).collect(),
            current_time: self.target_time as f64,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    user: String,
    items: Vec<usize>,
    times: Vec<u64>,
    short_len: usize,
    target: usize,
    target_time: u64,
}

impl From<&DecomposedSequence> for Record {
    fn from(d: &DecomposedSequence) -> Self {
        Record {
            user: d.user_id.clone(),
            items: d.context_items(),
            times: d.context().map(|e| e.timestamp).collect(),
            short_len: d.short_part.len(),
            target: d.target,
            target_time: d.target_time,
        }
    }
}

impl TryFrom<Record> for DecomposedSequence {
    type Error = String;

    fn try_from(r: Record) -> std::result::Result<Self, String> {
        if r.items.len() != r.times.len() || r.short_len > r.items.len() || r.items.is_empty() {
            return Err("inconsistent record lengths".into());
        }
        let events: Vec<InteractionEvent> = r
            .items
            .iter()
            .zip(&r.times)
            .map(|(&item_id, &timestamp)| InteractionEvent {
                user_id: r.user.clone(),
                item_id,
                timestamp,
            })
            .collect();
        let cut = events.len() - r.short_len;
        Ok(DecomposedSequence {
            user_id: r.user,
            long_part: events[..cut].to_vec(),
            short_part: events[cut..].to_vec(),
            target: r.target,
            target_time: r.target_time,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetSplit {
    pub train: Vec<DecomposedSequence>,
    pub valid: Vec<DecomposedSequence>,
    pub test: Vec<DecomposedSequence>,
}

/// Last event is the test target, the one before it the validation target,
/// and the `train_targets_per_user` events before that are training targets.
/// Each prediction sees only events strictly before its target.
pub fn leave_one_out(sequences: &[UserSequence], k: usize, train_targets_per_user: usize) -> Result<DatasetSplit> {
    let mut split = DatasetSplit::default();
    for s in sequences {
        let n = s.len();
        let prefix = |len: usize| UserSequence {
            user_id: s.user_id.clone(),
            events: s.events[..len].to_vec(),
        };
        if n >= 2 {
            split.test.push(decompose(s, k)?);
        }
        if n >= 3 {
            split.valid.push(decompose(&prefix(n - 1), k)?);
        }
        for j in 0..train_targets_per_user {
            let len = n.saturating_sub(2 + j);
            if len < 2 {
                break;
            }
            split.train.push(decompose(&prefix(len), k)?);
        }
    }
    if split.test.is_empty() {
        return Err(Error::Data("no user has the two events needed for a prediction".into()));
    }
    Ok(split)
}

pub fn write_examples(path: &Path, examples: &[DecomposedSequence]) -> Result<()> {
    let ctx = || format!("writing {}", path.display());
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(ctx(), e))?);
    for ex in examples {
        let line = serde_json::to_string(&Record::from(ex)).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(ctx(), e))?;
    }
    f.flush().map_err(|e| Error::io(ctx(), e))
}

pub fn read_examples(path: &Path) -> Result<Vec<DecomposedSequence>> {
    let f = fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let rec: Record = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        out.push(DecomposedSequence::try_from(rec).map_err(err)?);
    }
    Ok(out)
}
