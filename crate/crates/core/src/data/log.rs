//! Delimiter-separated interaction logs and the item vocabulary.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct InteractionEvent {
    pub user_id: String,
    pub item_id: usize,
    pub timestamp: u64,
}

/// Column layout of a log file. Columns are zero-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogFormat {
    pub delimiter: char,
    pub user_column: usize,
    pub item_column: usize,
    /// Read past but otherwise ignored.
    pub rating_column: Option<usize>,
    pub timestamp_column: usize,
    pub has_header: bool,
}

impl Default for LogFormat {
    fn default() -> Self {
        LogFormat {
            delimiter: '\t',
            user_column: 0,
            item_column: 1,
            rating_column: None,
            timestamp_column: 2,
            has_header: false,
        }
    }
}

/// Dense item ids assigned in sorted order of the item strings, so the
/// mapping does not depend on line order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vocabulary {
    items: Vec<String>,
}

impl Vocabulary {
    pub fn from_items<I: IntoIterator<Item = String>>(items: I) -> Self {
        let set: BTreeSet<String> = items.into_iter().collect();
        Vocabulary {
            items: set.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn id(&self, item: &str) -> Option<usize> {
        self.items.binary_search_by(|s| s.as_str().cmp(item)).ok()
    }

    pub fn item(&self, id: usize) -> Option<&str> {
        self.items.get(id).map(String::as_str)
    }

    /// One `item<TAB>id` line per entry.
    pub fn to_text(&self) -> String {
        self.items.iter().enumerate().map(|(i, s)| format!("{s}\t{i}\n")).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut items = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let parse_err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg,
            };
            let (item, id) = line.rsplit_once('\t').ok_or_else(|| parse_err("expected item<TAB>id".into()))?;
            let id: usize = id.parse().map_err(|_| parse_err(format!("bad id {id:?}")))?;
            if id != items.len() {
                return Err(parse_err(format!("ids must be dense and ordered, found {id}")));
            }
            items.push(item.to_string());
        }
        let vocab = Vocabulary::from_items(items.clone());
        if vocab.items != items {
            return Err(Error::Data(format!("vocabulary {} is not sorted or has duplicates", path.display())));
        }
        Ok(vocab)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedLog {
    pub events: Vec<InteractionEvent>,
    pub vocab: Vocabulary,
}

/// Parses log text; `source` only labels error messages. Blank lines are
/// skipped, every other malformed line is an error.
pub fn parse_interaction_text(text: &str, format: &LogFormat, source: &Path) -> Result<ParsedLog> {
    let needed = [
        Some(format.user_column),
        Some(format.item_column),
        format.rating_column,
        Some(format.timestamp_column),
    ]
    .into_iter()
    .flatten()
    .max()
    .unwrap_or(0);
    let mut raw = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if n == 0 && format.has_header {
            continue;
        }
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: source.to_path_buf(),
            line: n + 1,
            msg,
        };
        let fields: Vec<&str> = line.split(format.delimiter).collect();
        if fields.len() <= needed {
            return Err(err(format!("expected at least {} fields, found {}", needed + 1, fields.len())));
        }
        let user = fields[format.user_column].trim();
        let item = fields[format.item_column].trim();
        if user.is_empty() || item.is_empty() {
            return Err(err("empty user or item field".into()));
        }
        let ts_field = fields[format.timestamp_column].trim();
        let timestamp: u64 = ts_field
            .parse()
            .map_err(|_| err(format!("unparseable timestamp {ts_field:?} (expected non-negative integer seconds)")))?;
        raw.push((user.to_string(), item.to_string(), timestamp));
    }
    let vocab = Vocabulary::from_items(raw.iter().map(|(_, i, _)| i.clone()));
    let events = raw
        .into_iter()
        .map(|(user_id, item, timestamp)| InteractionEvent {
            user_id,
            item_id: vocab.id(&item).expect("item collected into vocabulary"),
            timestamp,
        })
        .collect();
    Ok(ParsedLog { events, vocab })
}

pub fn parse_interaction_log(path: &Path, format: &LogFormat) -> Result<ParsedLog> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading interaction log {}", path.display()), e))?;
    parse_interaction_text(&text, format, path)
}
