//! JSONL commit corpora: loading, filtering and splitting.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffscript;
use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitRecord {
    pub id: String,
    pub language: String,
    pub old_text: String,
    pub new_text: String,
    pub message: String,
    pub repo: String,
    pub timestamp: i64,
}

/// Line schema with the metadata fields optional; unknown keys are ignored.
#[derive(Deserialize)]
struct RawRecord {
    id: String,
    language: Option<String>,
    old_text: String,
    new_text: String,
    message: String,
    repo: Option<String>,
    timestamp: Option<i64>,
}

impl CommitRecord {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(invalid!("record with empty id"));
        }
        if normalize_message(&self.message).is_empty() {
            return Err(invalid!("record {}: empty message", self.id));
        }
        if self.old_text.is_empty() && self.new_text.is_empty() {
            return Err(invalid!("record {}: old_text and new_text both empty", self.id));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CorpusSplit {
    pub train: Vec<CommitRecord>,
    pub validation: Vec<CommitRecord>,
    pub test: Vec<CommitRecord>,
}

/// A record after diff rendering and message tokenization; one line of a
/// preprocessed JSONL file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreparedRecord {
    pub id: String,
    pub action_tokens: Vec<String>,
    pub msg_tokens: Vec<String>,
}

impl PreparedRecord {
    pub fn from_commit(r: &CommitRecord) -> Self {
        Self {
            id: r.id.clone(),
            action_tokens: diffscript::diff_texts(&r.old_text, &r.new_text),
            msg_tokens: message_tokens(&r.message),
        }
    }
}

pub fn write_jsonl<S: Serialize>(path: &Path, items: &[S]) -> Result<()> {
    let mut buf = Vec::new();
    for it in items {
        serde_json::to_writer(&mut buf, it).map_err(|e| invalid!("serialization: {e}"))?;
        buf.push(b'\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}

/// Reads one JSON value per non-blank line.
pub fn read_jsonl<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<S>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Trims, collapses whitespace runs and keeps only the first line.
pub fn normalize_message(message: &str) -> String {
    let first = message.trim().lines().next().unwrap_or("");
    first.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Whitespace tokens of the normalized message.
pub fn message_tokens(message: &str) -> Vec<String> {
    normalize_message(message)
        .split(' ')
        .filter(|t| !t.is_empty())
        .map(String::from)
        .collect()
}

/// Reads a JSONL corpus. With `schema_check` every field must be present;
/// without it `language`, `repo` and `timestamp` default to empty/zero.
/// Blank lines are skipped.
pub fn load_corpus(path: &Path, schema_check: bool) -> Result<Vec<CommitRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, schema_check).map_err(|e| match e {
        Error::Parse { line, message, .. } => Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        },
        other => other,
    })
}

pub(crate) fn parse_corpus(text: &str, schema_check: bool) -> Result<Vec<CommitRecord>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: Default::default(),
            line: i + 1,
            message,
        };
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        if schema_check {
            let missing: Vec<&str> = [
                ("language", raw.language.is_none()),
                ("repo", raw.repo.is_none()),
                ("timestamp", raw.timestamp.is_none()),
            ]
            .into_iter()
            .filter_map(|(k, m)| m.then_some(k))
            .collect();
            if !missing.is_empty() {
                return Err(parse_err(format!("missing field(s) {}", missing.join(", "))));
            }
        }
        let rec = CommitRecord {
            id: raw.id,
            language: raw.language.unwrap_or_default(),
            old_text: raw.old_text,
            new_text: raw.new_text,
            message: raw.message,
            repo: raw.repo.unwrap_or_default(),
            timestamp: raw.timestamp.unwrap_or(0),
        };
        rec.validate()
            .map_err(|e| parse_err(e.to_string()))?;
        if !seen.insert(rec.id.clone()) {
            return Err(invalid!("duplicate id {:?} on line {}", rec.id, i + 1));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_corpus(path: &Path, records: &[CommitRecord]) -> Result<()> {
    write_jsonl(path, records)
}

/// Keeps records with a non-empty message, an actual change, and a rendered
/// action sequence and message within the token limits.
pub fn filter_records(
    records: &[CommitRecord],
    max_diff_tokens: usize,
    max_msg_tokens: usize,
) -> Vec<CommitRecord> {
    records
        .iter()
        .filter(|r| {
            let msg = message_tokens(&r.message);
            if msg.is_empty() || msg.len() > max_msg_tokens || r.old_text == r.new_text {
                return false;
            }
            diffscript::diff_texts(&r.old_text, &r.new_text).len() <= max_diff_tokens
        })
        .cloned()
        .collect()
}

/// Shuffles with `seed`, then takes `floor(n * ratio)` records for validation
/// and test; train gets the rest. Each split keeps the input order.
pub fn split_corpus(records: &[CommitRecord], ratios: [f64; 3], seed: u64) -> Result<CorpusSplit> {
    if ratios.iter().any(|r| !(*r >= 0.0)) {
        return Err(invalid!("split ratios must be non-negative, got {ratios:?}"));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(invalid!("split ratios sum to {sum}, expected 1"));
    }
    let n = records.len();
    let n_val = (n as f64 * ratios[1]).floor() as usize;
    let n_test = ((n as f64 * ratios[2]).floor() as usize).min(n - n_val);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    // 0 = train, 1 = validation, 2 = test
    let mut assign = vec![0u8; n];
    for &i in &order[..n_val] {
        assign[i] = 1;
    }
    for &i in &order[n_val..n_val + n_test] {
        assign[i] = 2;
    }
    let mut split = CorpusSplit::default();
    for (r, a) in records.iter().zip(assign) {
        match a {
            0 => split.train.push(r.clone()),
            1 => split.validation.push(r.clone()),
            _ => split.test.push(r.clone()),
        }
    }
    Ok(split)
}
