//! JSON-lines datasets, deterministic splits and comment stripping.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Share of malformed lines above which loading fails outright.
pub const MAX_MALFORMED_FRACTION: f64 = 0.01;

pub trait Record: Serialize + DeserializeOwned + Clone {
    const KIND: &'static str;

    /// Key used for splitting.
    fn key(&self) -> String;

    fn validate(&self) -> std::result::Result<(), String>;
}

/// Unlabelled text or code.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub language: String,
    pub code: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nl: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

impl Record for CorpusRecord {
    const KIND: &'static str = "corpus";

    fn key(&self) -> String {
        self.id.clone()
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.language.is_empty() {
            return Err("empty language tag".into());
        }
        Ok(())
    }
}

/// One cloze probe. `tokens` are vocabulary tokens, including `<mask>` at
/// `mask_index`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClozeRecord {
    pub id: String,
    pub tokens: Vec<String>,
    pub mask_index: usize,
    pub candidates: Vec<String>,
    pub answer: String,
    pub language: String,
    pub has_nl: bool,
}

impl Record for ClozeRecord {
    const KIND: &'static str = "cloze";

    fn key(&self) -> String {
        self.id.clone()
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.mask_index >= self.tokens.len() {
            return Err(format!("mask_index {} outside {} tokens", self.mask_index, self.tokens.len()));
        }
        if self.tokens.iter().filter(|t| *t == crate::tokenizer::MASK_TOKEN).count() != 1
            || self.tokens[self.mask_index] != crate::tokenizer::MASK_TOKEN
        {
            return Err("expected exactly one mask token, at mask_index".into());
        }
        if !self.candidates.contains(&self.answer) {
            return Err(format!("answer `{}` not among candidates", self.answer));
        }
        Ok(())
    }
}

/// One program of a clone-retrieval set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalRecord {
    pub id: String,
    pub label: String,
    pub code: String,
    pub language: String,
}

impl Record for RetrievalRecord {
    const KIND: &'static str = "retrieval";

    fn key(&self) -> String {
        self.id.clone()
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.label.is_empty() {
            return Err("empty label".into());
        }
        Ok(())
    }
}

/// Labelled program pair; `label` is 1 for clones.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id_a: String,
    pub id_b: String,
    pub code_a: String,
    pub code_b: String,
    pub label: u8,
}

impl Record for PairRecord {
    const KIND: &'static str = "pair";

    fn key(&self) -> String {
        format!("{}|{}", self.id_a, self.id_b)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.label > 1 {
            return Err(format!("label {} is not 0 or 1", self.label));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Loaded<R> {
    pub records: Vec<R>,
    /// `(line number, reason)` for skipped lines.
    pub malformed: Vec<(usize, String)>,
}

/// Reads one JSON object per non-blank line. Malformed lines are collected;
/// more than 1% of them is an error.
pub fn load_jsonl<R: Record>(path: &Path) -> Result<Loaded<R>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut malformed = Vec::new();
    let mut lines = 0usize;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        lines += 1;
        match serde_json::from_str::<R>(&line) {
            Ok(r) => match r.validate() {
                Ok(()) => records.push(r),
                Err(why) => malformed.push((i + 1, why)),
            },
            Err(e) => malformed.push((i + 1, e.to_string())),
        }
    }
    if lines == 0 {
        return Err(Error::Dataset(format!("{} has no {} records", path.display(), R::KIND)));
    }
    if malformed.len() as f64 > MAX_MALFORMED_FRACTION * lines as f64 {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            lines: malformed,
        });
    }
    for (n, why) in &malformed {
        log::warn!("{}:{n}: skipped malformed {} record: {why}", path.display(), R::KIND);
    }
    Ok(Loaded { records, malformed })
}

pub fn write_jsonl<R: Record>(path: &Path, records: &[R]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn split_key(seed: u64, key: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    h.finalize().into()
}

/// 90/10 train/validation split keyed on a hash of `(seed, record key)`, so
/// the partition does not depend on input order. The training share is
/// `round(0.9·N)` with halves rounded up.
pub fn split_90_10<R: Record>(records: &[R], seed: u64) -> Result<(Vec<R>, Vec<R>)> {
    let n = records.len();
    if n < 10 {
        return Err(Error::Dataset(format!("need at least 10 records to split, got {n}")));
    }
    let mut keyed: Vec<([u8; 32], String, &R)> = records
        .iter()
        .map(|r| {
            let k = r.key();
            (split_key(seed, &k), k, r)
        })
        .collect();
    keyed.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
    let n_train = (9 * n + 5) / 10;
    let train = keyed[..n_train].iter().map(|(_, _, r)| (*r).clone()).collect();
    let val = keyed[n_train..].iter().map(|(_, _, r)| (*r).clone()).collect();
    Ok((train, val))
}

/// Comment prefixes per language tag.
pub type CommentRules = BTreeMap<String, Vec<String>>;

/// Drops the NL field and every line whose first non-blank characters match
/// one of the language's comment prefixes. Returns `None` when nothing but
/// whitespace is left.
pub fn strip_nl(record: &CorpusRecord, rules: &CommentRules) -> Result<Option<CorpusRecord>> {
    let prefixes = rules
        .get(&record.language)
        .ok_or_else(|| Error::Config(format!("no comment rules for language `{}`", record.language)))?;
    let code: String = record
        .code
        .split_inclusive('\n')
        .filter(|line| {
            let t = line.trim_start();
            !prefixes.iter().any(|p| !p.is_empty() && t.starts_with(p.as_str()))
        })
        .collect();
    if code.trim().is_empty() {
        return Ok(None);
    }
    Ok(Some(CorpusRecord {
        code,
        nl: None,
        ..record.clone()
    }))
}

/// Applies [`strip_nl`] to every record; returns kept records and the number
/// excluded for becoming empty.
pub fn strip_corpus(records: &[CorpusRecord], rules: &CommentRules) -> Result<(Vec<CorpusRecord>, usize)> {
    let mut kept = Vec::with_capacity(records.len());
    let mut excluded = 0;
    for r in records {
        match strip_nl(r, rules)? {
            Some(s) => kept.push(s),
            None => {
                log::warn!("record `{}` is empty after stripping comments; excluded", r.id);
                excluded += 1;
            }
        }
    }
    Ok((kept, excluded))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub path: PathBuf,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub language: String,
    /// `corpus`, `cloze`, `retrieval` or `pair`.
    pub kind: String,
    pub splits: BTreeMap<String, SplitEntry>,
    #[serde(default)]
    pub comment_prefixes: CommentRules,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    /// Split path resolved against the manifest's directory.
    pub fn split_path(&self, base: &Path, split: &str) -> Result<PathBuf> {
        let entry = self
            .splits
            .get(split)
            .ok_or_else(|| Error::Dataset(format!("manifest has no `{split}` split")))?;
        Ok(base.join(&entry.path))
    }

    /// Loads a split and checks its record count against the manifest.
    pub fn load_split<R: Record>(&self, base: &Path, split: &str) -> Result<Vec<R>> {
        if R::KIND != self.kind {
            return Err(Error::Dataset(format!("manifest holds {} records, not {}", self.kind, R::KIND)));
        }
        let path = self.split_path(base, split)?;
        let loaded = load_jsonl::<R>(&path)?;
        let expected = self.splits[split].count;
        if loaded.records.len() != expected {
            return Err(Error::Dataset(format!(
                "{}: manifest declares {expected} records, found {}",
                path.display(),
                loaded.records.len()
            )));
        }
        Ok(loaded.records)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, code: &str) -> CorpusRecord {
        CorpusRecord {
            id: id.into(),
            language: "py".into(),
            code: code.into(),
            nl: Some("doc".into()),
            split: None,
        }
    }

    fn rules() -> CommentRules {
        [("py".to_string(), vec!["#".to_string()])].into_iter().collect()
    }

    #[test]
    fn strip_removes_exactly_comment_lines() {
        let r = rec("a", "x = 1\n  # note\ny = 2  # trailing stays\n#end");
        let s = strip_nl(&r, &rules()).unwrap().unwrap();
        assert_eq!(s.code, "x = 1\ny = 2  # trailing stays\n");
        assert_eq!(s.nl, None);
        assert_eq!(strip_nl(&rec("b", "z = 3\n"), &rules()).unwrap().unwrap().code, "z = 3\n");
        assert!(strip_nl(&rec("c", "# a\n# b\n"), &rules()).unwrap().is_none());
        let mut other = rec("d", "x");
        other.language = "go".into();
        assert!(strip_nl(&other, &rules()).is_err());
    }

    #[test]
    fn split_sizes_and_order_independence() {
        let recs: Vec<_> = (0..101).map(|i| rec(&format!("r{i}"), "x")).collect();
        let (t, v) = split_90_10(&recs, 7).unwrap();
        assert_eq!((t.len(), v.len()), (91, 10));
        let mut rev = recs.clone();
        rev.reverse();
        let (t2, v2) = split_90_10(&rev, 7).unwrap();
        assert_eq!((t, v), (t2, v2));
        assert!(split_90_10(&recs[..9], 7).is_err());
    }
}
