//! Seeded generators for small synthetic corpora: English-like prose, two toy
//! programming languages, cloze probes over `max`/`min`, and a clone set of
//! renamed and reordered programs.
//!
//! In both toy languages the choice between `max` and `min` is signalled only
//! by the name of the variable receiving the result (`peak = max(..)`,
//! `floor = min(..)`). The prose mentions `max` and `min` freely but never
//! pairs them with those names.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CommentRules, CorpusRecord, PairRecord, RetrievalRecord, ClozeRecord};
use crate::error::{Error, Result};
use crate::tokenizer::{Vocabulary, MASK_TOKEN, SPECIAL_TOKENS};

pub const MAX_TOKEN: &str = " max";
pub const MIN_TOKEN: &str = " min";

const MAX_CUES: &[&str] = &["peak", "top", "ceil", "upper", "highest", "most", "biggest", "hi"];
const MIN_CUES: &[&str] = &["floor", "bottom", "lower", "lowest", "least", "smallest", "tiny", "lo"];

const IDENTS: &[&str] = &[
    "x", "y", "z", "n", "m", "k", "count", "total", "items", "data", "value", "result", "idx", "acc", "buf", "node",
    "key", "val", "arr", "seq", "num", "cur", "prev", "nxt", "tmp", "res", "ans", "cnt", "pos", "step", "left",
    "right", "mid", "head", "tail", "size", "length", "width", "row", "col", "score", "weight", "rate", "price",
    "limit", "flag", "state", "mode", "word", "text", "line", "char", "item", "elem", "part", "chunk", "block", "unit",
    "alpha", "beta", "gamma", "delta", "first", "second", "other", "base", "offset", "span",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyLanguage {
    /// Indentation-based, `#` comments.
    A,
    /// Brace-based, `//` comments.
    B,
}

impl ToyLanguage {
    pub fn tag(self) -> &'static str {
        match self {
            ToyLanguage::A => "toy_a",
            ToyLanguage::B => "toy_b",
        }
    }

    pub fn comment_prefix(self) -> &'static str {
        match self {
            ToyLanguage::A => "#",
            ToyLanguage::B => "//",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "toy_a" | "a" => Ok(ToyLanguage::A),
            "toy_b" | "b" => Ok(ToyLanguage::B),
            other => Err(Error::Config(format!("unknown toy language `{other}`"))),
        }
    }
}

pub fn comment_rules() -> CommentRules {
    [ToyLanguage::A, ToyLanguage::B]
        .into_iter()
        .map(|l| (l.tag().to_string(), vec![l.comment_prefix().to_string()]))
        .collect()
}

// --------------------------------------------------------------- prose

const SUBJECTS: &[&str] = &[
    "the engineer", "a student", "the team", "my friend", "the old man", "our teacher", "the river", "this city",
    "the farmer", "a traveler", "the committee", "her brother", "the market", "every child", "the author", "the crew",
];
const VERBS: &[&str] = &[
    "visited", "described", "carried", "opened", "painted", "followed", "measured", "repaired", "noticed", "built",
    "watched", "counted", "cleaned", "shared", "found", "crossed",
];
const OBJECTS: &[&str] = &[
    "the bridge", "a small boat", "the garden", "an old map", "the letters", "a quiet room", "the mountain path",
    "the wooden table", "a bright lamp", "the harbor", "the long road", "a green field", "the station", "the library",
];
const ADVERBS: &[&str] = &[
    "slowly", "in the morning", "after dinner", "with care", "again", "before the storm", "at noon", "without a word",
    "last summer", "every week", "by the window", "near the coast",
];
const PROSE_NOUNS: &[&str] = &["speed", "price", "wage", "load", "budget", "distance", "volume", "temperature", "level", "rent"];
/// Fixed unit for each entry of `PROSE_NOUNS`, used in `noun = unit` notes.
const UNITS: &[&str] = &["knots", "dollars", "euros", "tons", "pounds", "miles", "liters", "degrees", "meters", "coins"];

const PLACES: &[&str] = &[
    "the peak", "the top shelf", "the ceil", "the upper deck", "the highest hill", "the floor", "the bottom step",
    "the lower field", "the lowest valley", "a tiny room", "the biggest tree", "the smallest house",
];
const CLAUSES: &[&str] = &[
    "the count was right", "the total was small", "the result came back", "the value of the key changed",
    "the first line of the text", "the second part of the data", "the state of the node", "the rate and the price",
    "the score of each item", "the length and width of the block", "we print the list and return", "for a while, in range",
    "if the flag is set", "the head and the tail", "a step to the left and right", "the base and the offset",
];

fn sentence(rng: &mut ChaCha8Rng) -> String {
    let s = SUBJECTS.choose(rng).unwrap();
    let v = VERBS.choose(rng).unwrap();
    let o = OBJECTS.choose(rng).unwrap();
    let a = ADVERBS.choose(rng).unwrap();
    let p = PLACES.choose(rng).unwrap();
    let c = CLAUSES.choose(rng).unwrap();
    let noun = PROSE_NOUNS.choose(rng).unwrap();
    let mm = if rng.random_bool(0.5) { "max" } else { "min" };
    let n = rng.random_range(2..200);
    let (noun2, unit) = {
        let i = rng.random_range(0..PROSE_NOUNS.len());
        (PROSE_NOUNS[i], UNITS[i])
    };
    let text = match rng.random_range(0..13) {
        0 => format!("{s} {v} {o} {a}."),
        1 => format!("{s} {v} {o}, and then {v2} {o2}.", v2 = VERBS.choose(rng).unwrap(), o2 = OBJECTS.choose(rng).unwrap()),
        2 => format!("{s} set the {mm} {noun} to {n} {a}."),
        3 => format!("the {mm} {noun} was {n}, so {s} {v} {o}."),
        4 => format!("{s} kept the {noun} at a {mm} while it {v} {o}."),
        5 => format!("when {s} {v} {o}, the {noun} reached its {mm}."),
        6 => format!("{s} asked (again) whether the {noun} was {n}: nobody knew."),
        7 => format!("{s} {v} {p} {a}."),
        8 => format!("{s} said that {c}."),
        9 => format!("near {p}, {c}; {s} {v} {o}."),
        10 => format!("{s} wrote {noun2} = {unit} and {noun} = {n}."),
        11 => format!("in the notes, {noun2} = {unit} {a}."),
        _ => format!("{s} {v} {o} {a}; it took {n} minutes."),
    };
    let mut c = text.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => text,
    }
}

fn paragraph(rng: &mut ChaCha8Rng) -> String {
    if rng.random_bool(0.3) {
        // a list of `noun = unit` notes
        let k = rng.random_range(3..8);
        let notes: Vec<String> = (0..k)
            .map(|_| {
                let i = rng.random_range(0..PROSE_NOUNS.len());
                format!("{} = {}", PROSE_NOUNS[i], UNITS[i])
            })
            .collect();
        return format!("Notes: {}.", notes.join("; "));
    }
    let k = rng.random_range(4..10);
    (0..k).map(|_| sentence(rng)).collect::<Vec<_>>().join(" ")
}

/// English-like prose records totalling about `target_bytes`.
pub fn prose_corpus(target_bytes: usize, seed: u64) -> Vec<CorpusRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut bytes = 0;
    while bytes < target_bytes {
        let text = paragraph(&mut rng);
        bytes += text.len();
        out.push(CorpusRecord {
            id: format!("en-{}", out.len()),
            language: "en".into(),
            code: text,
            nl: None,
            split: None,
        });
    }
    out
}

// ------------------------------------------------------------ toy code

struct Names {
    pool: Vec<&'static str>,
}

impl Names {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let mut pool: Vec<&'static str> = IDENTS.to_vec();
        pool.shuffle(rng);
        Names { pool }
    }

    fn take(&mut self) -> &'static str {
        self.pool.pop().expect("identifier pool exhausted")
    }
}

/// One statement at the given nesting depth, language-specific.
fn filler(lang: ToyLanguage, rng: &mut ChaCha8Rng, a: &str, b: &str, v: &str, ind: &str) -> String {
    let n = rng.random_range(1..20);
    match (lang, rng.random_range(0..5)) {
        (ToyLanguage::A, 0) => format!("{ind}{v} = {a} + {n}\n"),
        (ToyLanguage::A, 1) => format!("{ind}for i in range({n}):\n{ind} {v} += i * {b}\n"),
        (ToyLanguage::A, 2) => format!("{ind}if {a} > {b}:\n{ind} {v} = {a} - {b}\n"),
        (ToyLanguage::A, 3) => format!("{ind}{v} = [t * {n} for t in range({b})]\n"),
        (ToyLanguage::A, _) => format!("{ind}print({v}, {a})\n"),
        (ToyLanguage::B, 0) => format!("{ind}{v} = {a} + {n};\n"),
        (ToyLanguage::B, 1) => format!("{ind}for (int i = 0; i < {n}; i++) {{\n{ind} {v} += i * {b};\n{ind}}}\n"),
        (ToyLanguage::B, 2) => format!("{ind}if ({a} > {b}) {{\n{ind} {v} = {a} - {b};\n{ind}}}\n"),
        (ToyLanguage::B, 3) => format!("{ind}{v} = {a} * {n} % {b};\n"),
        (ToyLanguage::B, _) => format!("{ind}printf(\"%d\", {v});\n"),
    }
}

/// A toy function whose body contains a few `cue = max/min(..)` lines. Holds
/// the code split around one `max`/`min` token (prefix ends with `" ="`,
/// suffix starts with `"("`) and whether the answer is `max`.
struct ToyFunction {
    prefix: String,
    suffix: String,
    is_max: bool,
}

impl ToyFunction {
    fn code(&self) -> String {
        let mm = if self.is_max { "max" } else { "min" };
        format!("{} {mm}{}", self.prefix, self.suffix)
    }
}

fn toy_function(lang: ToyLanguage, rng: &mut ChaCha8Rng, comment: Option<&str>) -> ToyFunction {
    let mut names = Names::new(rng);
    let f = format!("{}_{}", names.take(), rng.random_range(0..100));
    let (a, b, v) = (names.take(), names.take(), names.take());
    let ind = " ";
    let mut lines = Vec::new();
    match lang {
        ToyLanguage::A => {
            lines.push(format!("def {f}({a}, {b}):\n"));
            if let Some(c) = comment {
                lines.push(format!("{ind}# {c}\n"));
            }
            lines.push(format!("{ind}{v} = 0\n"));
        }
        ToyLanguage::B => {
            lines.push(format!("int {f}(int {a}, int {b}) {{\n"));
            if let Some(c) = comment {
                lines.push(format!("{ind}// {c}\n"));
            }
            lines.push(format!("{ind}int {v} = 0;\n"));
        }
    }
    // several independent cue lines; one of them is the split point
    let cue_lines = rng.random_range(3..7);
    let target = rng.random_range(0..cue_lines);
    let mut split = (String::new(), String::new(), false, "");
    for k in 0..cue_lines {
        if rng.random_bool(0.25) {
            lines.push(filler(lang, rng, a, b, v, ind));
        }
        let is_max = rng.random_bool(0.5);
        let cue = if is_max { MAX_CUES.choose(rng).unwrap() } else { MIN_CUES.choose(rng).unwrap() };
        let (x, y) = if rng.random_bool(0.5) { (a, v) } else { (v, b) };
        let (lhs, end) = match lang {
            ToyLanguage::A => (format!("{ind}{cue} ="), ""),
            ToyLanguage::B => (format!("{ind}int {cue} ="), ";"),
        };
        let rhs = format!("({x}, {y}){end}\n");
        if k == target {
            split = (lines.concat() + &lhs, rhs, is_max, cue);
            lines.clear();
        } else {
            let mm = if is_max { "max" } else { "min" };
            lines.push(format!("{lhs} {mm}{rhs}"));
        }
    }
    if rng.random_bool(0.5) {
        lines.push(filler(lang, rng, a, b, v, ind));
    }
    let (prefix, mut suffix, is_max, cue) = split;
    suffix += &lines.concat();
    match lang {
        ToyLanguage::A => suffix += &format!("{ind}return {cue}\n"),
        ToyLanguage::B => suffix += &format!("{ind}return {cue};\n}}\n"),
    }
    ToyFunction { prefix, suffix, is_max }
}

/// Toy-language code records totalling about `target_bytes`. Roughly half of
/// the functions carry a one-line prose comment (also stored as `nl`).
pub fn code_corpus(lang: ToyLanguage, target_bytes: usize, seed: u64) -> Vec<CorpusRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut bytes = 0;
    while bytes < target_bytes {
        let nl = rng.random_bool(0.5).then(|| sentence(&mut rng).to_lowercase());
        let code = toy_function(lang, &mut rng, nl.as_deref()).code();
        bytes += code.len();
        out.push(CorpusRecord {
            id: format!("{}-{}", lang.tag(), out.len()),
            language: lang.tag().into(),
            code,
            nl,
            split: None,
        });
    }
    out
}

/// `<s>`, prefix, `<mask>`, suffix, `</s>` as token strings, clipped to
/// `max_tokens`: the nearest prefix tokens are kept first, then whatever
/// suffix still fits (at least 8 tokens when available).
fn clipped_probe(vocab: &Vocabulary, prefix: &[u32], suffix: &[u32], max_tokens: usize) -> (Vec<String>, usize) {
    let token = |id: &u32| vocab.token(*id).expect("id from this vocabulary").to_string();
    let room = max_tokens - 3;
    let keep_prefix = prefix.len().min(room - suffix.len().min(8));
    let keep_suffix = suffix.len().min(room - keep_prefix);
    let mut tokens = vec![SPECIAL_TOKENS[0].to_string()];
    tokens.extend(prefix[prefix.len() - keep_prefix..].iter().map(token));
    let mask_index = tokens.len();
    tokens.push(MASK_TOKEN.to_string());
    tokens.extend(suffix[..keep_suffix].iter().map(token));
    tokens.push(SPECIAL_TOKENS[2].to_string());
    (tokens, mask_index)
}

fn check_window(max_tokens: usize) -> Result<()> {
    if max_tokens < 12 {
        return Err(Error::Config(format!("max_tokens {max_tokens} leaves no room for context")));
    }
    Ok(())
}

/// Two-candidate `max`/`min` cloze probes over fresh toy functions, clipped
/// to `max_tokens` around the mask.
pub fn cloze_probes(lang: ToyLanguage, vocab: &Vocabulary, n: usize, with_nl: bool, max_tokens: usize, seed: u64) -> Result<Vec<ClozeRecord>> {
    for t in [MAX_TOKEN, MIN_TOKEN] {
        if vocab.id(t).is_none() {
            return Err(Error::Tokenizer(format!("vocabulary lacks the single token `{t}`")));
        }
    }
    check_window(max_tokens)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let comment = with_nl.then(|| sentence(&mut rng).to_lowercase());
        let f = toy_function(lang, &mut rng, comment.as_deref());
        let (tokens, mask_index) = clipped_probe(vocab, &vocab.encode_raw(&f.prefix), &vocab.encode_raw(&f.suffix), max_tokens);
        out.push(ClozeRecord {
            id: format!("{}-cloze-{}", lang.tag(), out.len()),
            tokens,
            mask_index,
            candidates: vec![MAX_TOKEN.into(), MIN_TOKEN.into()],
            answer: if f.is_max { MAX_TOKEN } else { MIN_TOKEN }.into(),
            language: lang.tag().into(),
            has_nl: with_nl,
        });
    }
    Ok(out)
}

/// Declared candidate vocabulary for keyword probes: keywords, builtins and
/// punctuation of the toy languages.
pub const KEYWORD_CANDIDATES: &[&str] = &[
    " return", " for", " in", " if", " range", " print", " int", " max", " min", " =", " +", " -", " *", " >", " <",
    "(", ")", ",", ":", ";", "\n", " 0",
];

/// Two-candidate probes over the declared keyword vocabulary: one keyword
/// occurrence in a fresh toy function is masked and paired with a distractor
/// drawn from the rest of the vocabulary, in random order.
pub fn keyword_probes(lang: ToyLanguage, vocab: &Vocabulary, n: usize, max_tokens: usize, seed: u64) -> Result<Vec<ClozeRecord>> {
    check_window(max_tokens)?;
    let candidates: Vec<u32> = KEYWORD_CANDIDATES.iter().filter_map(|t| vocab.id(t)).collect();
    if candidates.len() < 2 {
        return Err(Error::Tokenizer("fewer than two keyword candidates are single tokens".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let code = toy_function(lang, &mut rng, None).code();
        let ids = vocab.encode_raw(&code);
        let sites: Vec<usize> = (0..ids.len()).filter(|&i| candidates.contains(&ids[i])).collect();
        let Some(&site) = sites.choose(&mut rng) else { continue };
        let answer = ids[site];
        let distractor = *candidates.iter().filter(|&&c| c != answer).collect::<Vec<_>>().choose(&mut rng).unwrap();
        let (tokens, mask_index) = clipped_probe(vocab, &ids[..site], &ids[site + 1..], max_tokens);
        let name = |id: u32| vocab.token(id).expect("candidate id").to_string();
        let mut pair = vec![name(answer), name(*distractor)];
        pair.shuffle(&mut rng);
        out.push(ClozeRecord {
            id: format!("{}-keyword-{}", lang.tag(), out.len()),
            tokens,
            mask_index,
            candidates: pair,
            answer: name(answer),
            language: lang.tag().into(),
            has_nl: false,
        });
    }
    Ok(out)
}

// ----------------------------------------------------------- clone set

/// Program templates in toy language A. `{f}` is the function name and
/// `{0}`..`{5}` identifiers; a line starting with `~` belongs to the
/// reorderable block of independent initializations.
const TEMPLATES: &[&str] = &[
    "def {f}({0}):\n~    {1} = 0\n~    {2} = 0\n    for {3} in {0}:\n        {1} += {3}\n        {2} += 1\n    return {1}\n",
    "def {f}({0}):\n~    {1} = 0\n    for {3} in {0}:\n        if {3} % 2 == 0:\n            {1} += 1\n    return {1}\n",
    "def {f}({0}):\n~    {1} = {0}[0]\n    for {3} in {0}:\n        if {3} > {1}:\n            {1} = {3}\n    return {1}\n",
    "def {f}({0}):\n~    {1} = \"\"\n    for {3} in {0}:\n        {1} = {3} + {1}\n    return {1}\n",
    "def {f}({0}):\n~    {1} = 1\n    for {3} in range(2, {0} + 1):\n        {1} *= {3}\n    return {1}\n",
    "def {f}({0}):\n~    {1} = 0\n~    {2} = 1\n    for _ in range({0}):\n        {1}, {2} = {2}, {1} + {2}\n    return {1}\n",
    "def {f}({0}):\n    if {0} < 2:\n        return False\n    for {3} in range(2, {0}):\n        if {0} % {3} == 0:\n            return False\n    return True\n",
    "def {f}({0}, {1}):\n    while {1} != 0:\n        {0}, {1} = {1}, {0} % {1}\n    return {0}\n",
    "def {f}({0}, {1}):\n~    {2} = 0\n~    {4} = len({0}) - 1\n    while {2} <= {4}:\n        {5} = ({2} + {4}) // 2\n        if {0}[{5}] < {1}:\n            {2} = {5} + 1\n        else:\n            {4} = {5} - 1\n    return {2}\n",
    "def {f}({0}):\n~    {1} = len({0})\n    for {2} in range({1}):\n        for {3} in range({1} - {2} - 1):\n            if {0}[{3}] > {0}[{3} + 1]:\n                {0}[{3}], {0}[{3} + 1] = {0}[{3} + 1], {0}[{3}]\n    return {0}\n",
    "def {f}({0}):\n~    {1} = 0\n    for {3} in {0}:\n        if {3} in \"aeiou\":\n            {1} += 1\n    return {1}\n",
    "def {f}({0}):\n~    {1} = 0\n~    {2} = 0\n    for {3} in {0}:\n        {1} += {3}\n        {2} += 1\n    return {1} / {2}\n",
    "def {f}({0}, {1}):\n~    {2} = 1\n    for _ in range({1}):\n        {2} *= {0}\n    return {2}\n",
    "def {f}({0}, {1}):\n~    {2} = 0\n    for {3} in range(len({0})):\n        {2} += {0}[{3}] * {1}[{3}]\n    return {2}\n",
    "def {f}({0}):\n~    {1} = []\n    for {3} in {0}:\n        if {3} > 0:\n            {1}.append({3})\n    return {1}\n",
    "def {f}({0}, {1}):\n~    {2} = \"\"\n    for {3} in {0}:\n        {2} += str({3}) + {1}\n    return {2}[:-1]\n",
    "def {f}({0}):\n~    {1} = []\n    for {3} in range(len({0}[0])):\n        {1}.append([{2}[{3}] for {2} in {0}])\n    return {1}\n",
    "def {f}({0}):\n~    {1} = 0\n    while {0} > 0:\n        {1} += {0} % 10\n        {0} //= 10\n    return {1}\n",
    "def {f}({0}):\n~    {1} = 0\n~    {2} = len({0}) - 1\n    while {1} < {2}:\n        if {0}[{1}] != {0}[{2}]:\n            return False\n        {1} += 1\n        {2} -= 1\n    return True\n",
    "def {f}({0}):\n~    {1} = 0\n    for {3} in range(1, len({0})):\n        if {0}[{3}] < {0}[{1}]:\n            {1} = {3}\n    return {1}\n",
];

pub fn num_templates() -> usize {
    TEMPLATES.len()
}

fn instantiate(template: &str, rng: &mut ChaCha8Rng) -> String {
    let mut names = Names::new(rng);
    let idents: Vec<&str> = (0..6).map(|_| names.take()).collect();
    let fname = format!("{}_{}", names.take(), names.take());
    let mut lines: Vec<&str> = template.lines().collect();
    // shuffle the reorderable block in place
    let start = lines.iter().position(|l| l.starts_with('~'));
    if let Some(s) = start {
        let end = s + lines[s..].iter().take_while(|l| l.starts_with('~')).count();
        lines[s..end].shuffle(rng);
    }
    let mut code = String::new();
    for l in lines {
        // templates are written with 4-space indents; the toy language uses 1
        let mut l = l.trim_start_matches('~').replace("    ", " ").replace("{f}", &fname);
        for (i, id) in idents.iter().enumerate() {
            l = l.replace(&format!("{{{i}}}"), id);
        }
        code += &l;
        code.push('\n');
    }
    code
}

/// `classes × per_class` renamed/reordered programs in toy language A.
pub fn clone_set(classes: usize, per_class: usize, seed: u64) -> Result<Vec<RetrievalRecord>> {
    if classes > TEMPLATES.len() {
        return Err(Error::Config(format!("at most {} clone classes available", TEMPLATES.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(classes * per_class);
    for (c, template) in TEMPLATES.iter().take(classes).enumerate() {
        for k in 0..per_class {
            out.push(RetrievalRecord {
                id: format!("p{c:02}-{k:02}"),
                label: format!("problem-{c:02}"),
                code: instantiate(template, &mut rng),
                language: ToyLanguage::A.tag().into(),
            });
        }
    }
    Ok(out)
}

/// Splits a clone set per class into train/validation/test by position.
pub fn split_per_class(records: &[RetrievalRecord], train: usize, val: usize) -> (Vec<RetrievalRecord>, Vec<RetrievalRecord>, Vec<RetrievalRecord>) {
    let mut by_class: BTreeMap<&str, Vec<&RetrievalRecord>> = BTreeMap::new();
    for r in records {
        by_class.entry(&r.label).or_default().push(r);
    }
    let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
    for members in by_class.values() {
        for (i, r) in members.iter().enumerate() {
            let dest = if i < train {
                &mut tr
            } else if i < train + val {
                &mut va
            } else {
                &mut te
            };
            dest.push((*r).clone());
        }
    }
    (tr, va, te)
}

/// Balanced clone / non-clone pairs drawn from a clone set.
pub fn clone_pairs(records: &[RetrievalRecord], n: usize, seed: u64) -> Result<Vec<PairRecord>> {
    let mut by_class: BTreeMap<&str, Vec<&RetrievalRecord>> = BTreeMap::new();
    for r in records {
        by_class.entry(&r.label).or_default().push(r);
    }
    let classes: Vec<&Vec<&RetrievalRecord>> = by_class.values().filter(|m| m.len() >= 2).collect();
    if classes.len() < 2 {
        return Err(Error::Dataset("pairs need two classes with two members each".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let clone = i % 2 == 0;
        let (a, b) = if clone {
            let m = classes.choose(&mut rng).unwrap();
            let two: Vec<&&RetrievalRecord> = m.choose_multiple(&mut rng, 2).collect();
            (*two[0], *two[1])
        } else {
            let two: Vec<&&Vec<&RetrievalRecord>> = classes.choose_multiple(&mut rng, 2).collect();
            (*two[0].choose(&mut rng).unwrap(), *two[1].choose(&mut rng).unwrap())
        };
        out.push(PairRecord {
            id_a: a.id.clone(),
            id_b: b.id.clone(),
            code_a: a.code.clone(),
            code_b: b.code.clone(),
            label: u8::from(clone),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpora_reach_target_size() {
        let p = prose_corpus(5_000, 1);
        assert!(p.iter().map(|r| r.code.len()).sum::<usize>() >= 5_000);
        let c = code_corpus(ToyLanguage::B, 5_000, 1);
        assert!(c.iter().all(|r| r.code.contains(" max(") || r.code.contains(" min(")));
    }

    #[test]
    fn cue_names_decide_the_answer() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let f = toy_function(ToyLanguage::A, &mut rng, None);
            let cue = f.prefix.rsplit(' ').nth(1).unwrap().trim();
            assert_eq!(MAX_CUES.contains(&cue), f.is_max, "{}", f.prefix);
        }
    }

    #[test]
    fn clone_set_shape() {
        let s = clone_set(20, 20, 3).unwrap();
        assert_eq!(s.len(), 400);
        let (tr, va, te) = split_per_class(&s, 12, 4);
        assert_eq!((tr.len(), va.len(), te.len()), (240, 80, 80));
        assert!(s.iter().all(|r| !r.code.contains('{') && !r.code.contains('~')));
    }
}
