//! Byte-pair-encoding subword tokenizer and masked-language-model corruption.
//!
//! Text is first split into chunks (letter runs, digit runs, punctuation runs,
//! whitespace runs; a single space sticks to the chunk after it), then each
//! chunk is merged bottom-up from characters. Merges never cross chunks.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const BOS_ID: u32 = 0;
pub const PAD_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const MASK_ID: u32 = 4;

pub const SPECIAL_TOKENS: [&str; 5] = ["<s>", "<pad>", "</s>", "<unk>", "<mask>"];
pub const MASK_TOKEN: &str = "<mask>";
const NUM_SPECIAL: u32 = SPECIAL_TOKENS.len() as u32;

const VOCAB_HEADER: &str = "adapterlab-vocab v1";
const MERGES_MARKER: &str = "#merges";

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    merges: Vec<(u32, u32)>,
    merge_rank: HashMap<(u32, u32), (usize, u32)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum CharClass {
    Letter,
    Digit,
    Space,
    Punct,
}

fn class_of(c: char) -> CharClass {
    if c.is_alphabetic() || c == '_' {
        CharClass::Letter
    } else if c.is_numeric() {
        CharClass::Digit
    } else if c.is_whitespace() {
        CharClass::Space
    } else {
        CharClass::Punct
    }
}

/// Splits text into merge domains. Concatenating the chunks gives back the
/// input exactly.
pub fn pre_tokenize(text: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let start = chars[i].0;
        let cls = class_of(chars[i].1);
        let mut j = i + 1;
        if cls == CharClass::Space {
            while j < chars.len() && class_of(chars[j].1) == CharClass::Space {
                j += 1;
            }
            // a trailing single space joins the following chunk
            if j < chars.len() && chars[j - 1].1 == ' ' {
                if j - 1 > i {
                    out.push(&text[start..chars[j - 1].0]);
                }
                let word_start = chars[j - 1].0;
                let word_cls = class_of(chars[j].1);
                let mut k = j + 1;
                while k < chars.len() && class_of(chars[k].1) == word_cls {
                    k += 1;
                }
                let end = chars.get(k).map_or(text.len(), |c| c.0);
                out.push(&text[word_start..end]);
                i = k;
                continue;
            }
        } else {
            while j < chars.len() && class_of(chars[j].1) == cls {
                j += 1;
            }
        }
        let end = chars.get(j).map_or(text.len(), |c| c.0);
        out.push(&text[start..end]);
        i = j;
    }
    out
}

/// Characters always present in the base alphabet: printable ASCII, tab and
/// newline.
fn default_alphabet() -> impl Iterator<Item = char> {
    (0x20u8..0x7f).map(char::from).chain(['\t', '\n'])
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>, merges: Vec<(u32, u32)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Tokenizer(format!("duplicate token {t:?}")));
            }
        }
        let mut merge_rank = HashMap::with_capacity(merges.len());
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let merged = format!(
                "{}{}",
                tokens.get(a as usize).ok_or_else(|| Error::Tokenizer(format!("merge refers to id {a}")))?,
                tokens.get(b as usize).ok_or_else(|| Error::Tokenizer(format!("merge refers to id {b}")))?
            );
            let id = *index
                .get(&merged)
                .ok_or_else(|| Error::Tokenizer(format!("merge result {merged:?} not in vocabulary")))?;
            merge_rank.insert((a, b), (rank, id));
        }
        Ok(Vocabulary {
            tokens,
            index,
            merges,
            merge_rank,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn merges(&self) -> impl Iterator<Item = (&str, &str)> {
        self.merges
            .iter()
            .map(|&(a, b)| (self.tokens[a as usize].as_str(), self.tokens[b as usize].as_str()))
    }

    pub fn is_special(id: u32) -> bool {
        id < NUM_SPECIAL
    }

    /// Token ids without begin/end markers.
    pub fn encode_raw(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for chunk in pre_tokenize(text) {
            self.encode_chunk(chunk, &mut out);
        }
        out
    }

    /// `[begin] + tokens + [end]`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = vec![BOS_ID];
        out.extend(self.encode_raw(text));
        out.push(EOS_ID);
        out
    }

    fn encode_chunk(&self, chunk: &str, out: &mut Vec<u32>) {
        let mut syms: Vec<u32> = chunk
            .chars()
            .map(|c| {
                let mut buf = [0u8; 4];
                self.index.get(&*c.encode_utf8(&mut buf)).copied().unwrap_or(UNK_ID)
            })
            .collect();
        loop {
            let best = syms
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.merge_rank.get(&(w[0], w[1])).map(|&(r, id)| (r, i, id)))
                .min();
            match best {
                Some((_, i, id)) => {
                    syms[i] = id;
                    syms.remove(i + 1);
                }
                None => break,
            }
        }
        out.extend(syms);
    }

    /// Concatenates token strings. Begin, end and pad markers render as
    /// nothing; unknown and mask render as their literal names.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self
                .token(id)
                .ok_or_else(|| Error::Tokenizer(format!("id {id} out of range for {} tokens", self.len())))?;
            if matches!(id, BOS_ID | EOS_ID | PAD_ID) {
                continue;
            }
            out.push_str(tok);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(VOCAB_HEADER);
        s.push('\n');
        for (i, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(s, "{}\t{i}", escape(t));
        }
        s.push_str(MERGES_MARKER);
        s.push('\n');
        for (a, b) in self.merges() {
            let _ = writeln!(s, "{}\t{}", escape(a), escape(b));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(VOCAB_HEADER) {
            return Err(Error::Tokenizer(format!("missing `{VOCAB_HEADER}` header")));
        }
        let mut tokens = Vec::new();
        let mut in_merges = false;
        let mut merges = Vec::new();
        let mut index: HashMap<String, u32> = HashMap::new();
        for (n, line) in lines.enumerate() {
            let lineno = n + 2;
            if !in_merges && line == MERGES_MARKER {
                in_merges = true;
                index = tokens.iter().enumerate().map(|(i, t): (usize, &String)| (t.clone(), i as u32)).collect();
                continue;
            }
            let (left, right) = line
                .split_once('\t')
                .ok_or_else(|| Error::Tokenizer(format!("line {lineno}: expected a tab-separated pair")))?;
            if in_merges {
                let look = |t: &str| {
                    let t = unescape(t)?;
                    index
                        .get(&t)
                        .copied()
                        .ok_or_else(|| Error::Tokenizer(format!("line {lineno}: unknown merge token {t:?}")))
                };
                merges.push((look(left)?, look(right)?));
            } else {
                let id: usize = right
                    .parse()
                    .map_err(|_| Error::Tokenizer(format!("line {lineno}: bad id {right:?}")))?;
                if id != tokens.len() {
                    return Err(Error::Tokenizer(format!("line {lineno}: ids must be dense, expected {}", tokens.len())));
                }
                tokens.push(unescape(left)?);
            }
        }
        if !in_merges {
            return Err(Error::Tokenizer(format!("missing `{MERGES_MARKER}` section")));
        }
        for (i, sp) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*sp) {
                return Err(Error::Tokenizer(format!("special token {sp} must have id {i}")));
            }
        }
        Self::from_tokens(tokens, merges)
    }
}

fn escape(t: &str) -> String {
    let mut s = String::with_capacity(t.len());
    for c in t.chars() {
        match c {
            '\\' => s.push_str("\\\\"),
            '\t' => s.push_str("\\t"),
            '\n' => s.push_str("\\n"),
            '\r' => s.push_str("\\r"),
            c => s.push(c),
        }
    }
    s
}

fn unescape(t: &str) -> Result<String> {
    let mut s = String::with_capacity(t.len());
    let mut it = t.chars();
    while let Some(c) = it.next() {
        if c == '\\' {
            match it.next() {
                Some('\\') => s.push('\\'),
                Some('t') => s.push('\t'),
                Some('n') => s.push('\n'),
                Some('r') => s.push('\r'),
                other => return Err(Error::Tokenizer(format!("bad escape \\{other:?}"))),
            }
        } else {
            s.push(c);
        }
    }
    Ok(s)
}

/// Learns a vocabulary of at most `vocab_size` entries. Pairs are merged by
/// descending frequency, ties broken by the lexicographically smallest
/// `(left, right)` token strings; merging stops when no pair occurs twice.
pub fn train_bpe<I, S>(corpus: I, vocab_size: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut chunk_counts: HashMap<String, u64> = HashMap::new();
    let mut alphabet: std::collections::BTreeSet<char> = default_alphabet().collect();
    let mut any = false;
    for text in corpus {
        let text = text.as_ref();
        any = true;
        alphabet.extend(text.chars());
        for chunk in pre_tokenize(text) {
            *chunk_counts.entry(chunk.to_string()).or_default() += 1;
        }
    }
    if !any || chunk_counts.is_empty() {
        return Err(Error::Tokenizer("empty training corpus".into()));
    }
    let base = SPECIAL_TOKENS.len() + alphabet.len();
    if vocab_size <= base {
        return Err(Error::Tokenizer(format!(
            "vocab_size {vocab_size} must exceed the {base} special and base symbols"
        )));
    }

    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(alphabet.iter().map(|c| c.to_string()));
    let mut index: HashMap<String, u32> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();

    // sorted so that pair counting is order-independent
    let mut words: Vec<(Vec<u32>, u64)> = chunk_counts
        .into_iter()
        .map(|(w, c)| (w.chars().map(|ch| index[&ch.to_string()]).collect(), c))
        .collect();
    words.sort();

    let mut merges = Vec::new();
    while tokens.len() < vocab_size {
        let mut pairs: HashMap<(u32, u32), u64> = HashMap::new();
        for (syms, c) in &words {
            for w in syms.windows(2) {
                *pairs.entry((w[0], w[1])).or_default() += c;
            }
        }
        let best = pairs
            .into_iter()
            .filter(|&(_, c)| c >= 2)
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let ka = (&tokens[pa.0 as usize], &tokens[pa.1 as usize]);
                    let kb = (&tokens[pb.0 as usize], &tokens[pb.1 as usize]);
                    kb.cmp(&ka)
                })
            });
        let Some(((a, b), _)) = best else { break };
        let merged = format!("{}{}", tokens[a as usize], tokens[b as usize]);
        let new_id = tokens.len() as u32;
        // the concatenation may already exist via a different split
        let target = match index.get(&merged) {
            Some(&id) => id,
            None => {
                index.insert(merged.clone(), new_id);
                tokens.push(merged);
                new_id
            }
        };
        merges.push((a, b));
        for (syms, _) in words.iter_mut() {
            let mut i = 0;
            while i + 1 < syms.len() {
                if syms[i] == a && syms[i + 1] == b {
                    syms[i] = target;
                    syms.remove(i + 1);
                }
                i += 1;
            }
        }
    }
    Vocabulary::from_tokens(tokens, merges)
}

/// Corruption recipe for masked-language-model training.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MaskingConfig {
    /// Probability that an eligible token is selected for corruption.
    pub mask_rate: f64,
    /// Selected tokens become `<mask>` with this probability...
    pub mask_token_prob: f64,
    /// ...a random vocabulary token with this one, and stay unchanged otherwise.
    pub random_token_prob: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            mask_rate: 0.15,
            mask_token_prob: 0.8,
            random_token_prob: 0.1,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.mask_rate) {
            return Err(Error::Config(format!("mask_rate {} outside [0, 1]", self.mask_rate)));
        }
        if !unit(self.mask_token_prob)
            || !unit(self.random_token_prob)
            || self.mask_token_prob + self.random_token_prob > 1.0 + 1e-12
        {
            return Err(Error::Config("substitution probabilities must form a sub-distribution".into()));
        }
        Ok(())
    }
}

/// Right-padded batch of token sequences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedBatch {
    pub batch: usize,
    pub len: usize,
    /// `[batch × len]`, row-major.
    pub input_ids: Vec<u32>,
    /// 1 at real tokens, 0 at padding.
    pub attention_mask: Vec<u8>,
    /// Original id at corrupted positions, `None` elsewhere.
    pub labels: Vec<Option<u32>>,
}

impl MaskedBatch {
    /// Padded batch with no corruption.
    pub fn unmasked(sequences: &[Vec<u32>]) -> Result<Self> {
        let len = sequences.iter().map(Vec::len).max().unwrap_or(0);
        if sequences.is_empty() || len == 0 {
            return Err(Error::Contract("cannot batch empty sequences".into()));
        }
        let batch = sequences.len();
        let mut input_ids = vec![PAD_ID; batch * len];
        let mut attention_mask = vec![0u8; batch * len];
        for (b, s) in sequences.iter().enumerate() {
            input_ids[b * len..b * len + s.len()].copy_from_slice(s);
            attention_mask[b * len..b * len + s.len()].fill(1);
        }
        Ok(MaskedBatch {
            batch,
            len,
            input_ids,
            attention_mask,
            labels: vec![None; batch * len],
        })
    }

    pub fn num_targets(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }
}

/// Pads `sequences` and corrupts eligible (non-special) tokens.
pub fn apply_mlm_mask(
    sequences: &[Vec<u32>],
    vocab_size: usize,
    cfg: &MaskingConfig,
    seed: u64,
) -> Result<MaskedBatch> {
    cfg.validate()?;
    if vocab_size <= NUM_SPECIAL as usize {
        return Err(Error::Config(format!("vocabulary of {vocab_size} has no ordinary tokens")));
    }
    let mut batch = MaskedBatch::unmasked(sequences)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..batch.input_ids.len() {
        let id = batch.input_ids[i];
        if batch.attention_mask[i] == 0 || Vocabulary::is_special(id) {
            continue;
        }
        if rng.random::<f64>() >= cfg.mask_rate {
            continue;
        }
        batch.labels[i] = Some(id);
        let r: f64 = rng.random();
        if r < cfg.mask_token_prob {
            batch.input_ids[i] = MASK_ID;
        } else if r < cfg.mask_token_prob + cfg.random_token_prob {
            batch.input_ids[i] = rng.random_range(NUM_SPECIAL..vocab_size as u32);
        }
    }
    Ok(batch)
}
