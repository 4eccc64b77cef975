//! Per-user sequences and frequency filtering.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::data::log::{InteractionEvent, Vocabulary};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSequence {
    pub user_id: String,
    /// Non-decreasing timestamps; equal timestamps keep input order.
    pub events: Vec<InteractionEvent>,
}

impl UserSequence {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn items(&self) -> Vec<usize> {
        self.events.iter().map(|e| e.item_id).collect()
    }
}

/// Groups events by user (users in sorted id order) and orders each user's
/// events by timestamp with a stable sort.
pub fn build_sequences(events: &[InteractionEvent]) -> Vec<UserSequence> {
    let mut by_user: BTreeMap<&str, Vec<InteractionEvent>> = BTreeMap::new();
    for e in events {
        by_user.entry(&e.user_id).or_default().push(e.clone());
    }
    by_user
        .into_iter()
        .map(|(u, mut ev)| {
            ev.sort_by_key(|e| e.timestamp);
            UserSequence {
                user_id: u.to_string(),
                events: ev,
            }
        })
        .collect()
}

/// Repeatedly drops events of items seen fewer than `min_item_count` times
/// and users with fewer than `min_user_events` events, until neither rule
/// removes anything.
pub fn filter_sequences(sequences: &[UserSequence], min_user_events: usize, min_item_count: usize) -> Result<Vec<UserSequence>> {
    if min_user_events == 0 || min_item_count == 0 {
        return Err(Error::Config("filter thresholds must be at least 1".into()));
    }
    let mut current: Vec<UserSequence> = sequences.to_vec();
    loop {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for s in &current {
            for e in &s.events {
                *counts.entry(e.item_id).or_default() += 1;
            }
        }
        let before: usize = current.iter().map(UserSequence::len).sum::<usize>() + current.len();
        current = current
            .into_iter()
            .map(|mut s| {
                s.events.retain(|e| counts[&e.item_id] >= min_item_count);
                s
            })
            .filter(|s| s.len() >= min_user_events)
            .collect();
        let after: usize = current.iter().map(UserSequence::len).sum::<usize>() + current.len();
        if after == before {
            break;
        }
    }
    if current.is_empty() {
        let users = sequences.len();
        let items: std::collections::BTreeSet<usize> = sequences.iter().flat_map(|s| s.items()).collect();
        return Err(Error::Data(format!(
            "no users survive filtering with min_user_events={min_user_events}, min_item_count={min_item_count} \
             (input had {users} users and {} distinct items)",
            items.len()
        )));
    }
    Ok(current)
}

/// Renumbers items so only those still present get (dense, sorted) ids.
pub fn compact_vocabulary(sequences: &[UserSequence], vocab: &Vocabulary) -> Result<(Vec<UserSequence>, Vocabulary)> {
    let mut names = Vec::new();
    for s in sequences {
        for e in &s.events {
            let name = vocab
                .item(e.item_id)
                .ok_or_else(|| Error::Data(format!("item id {} missing from vocabulary", e.item_id)))?;
            names.push(name.to_string());
        }
    }
    let compact = Vocabulary::from_items(names);
    let out = sequences
        .iter()
        .map(|s| UserSequence {
            user_id: s.user_id.clone(),
            events: s
                .events
                .iter()
                .map(|e| InteractionEvent {
                    item_id: compact.id(vocab.item(e.item_id).expect("checked above")).expect("collected above"),
                    ..e.clone()
                })
                .collect(),
        })
        .collect();
    Ok((out, compact))
}

/// Writes sequences as a tab-separated `user item timestamp` log.
pub fn to_log_text(sequences: &[UserSequence], vocab: &Vocabulary) -> Result<String> {
    let mut out = String::new();
    for s in sequences {
        for e in &s.events {
            let item = vocab
                .item(e.item_id)
                .ok_or_else(|| Error::Data(format!("item id {} missing from vocabulary", e.item_id)))?;
            writeln!(out, "{}\t{}\t{}", s.user_id, item, e.timestamp).expect("writing to a String");
        }
    }
    Ok(out)
}
