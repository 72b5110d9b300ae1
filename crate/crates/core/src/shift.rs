//! Corpus ingestion, shift-split construction, shift intensity and a
//! synthetic drift generator.
//!
//! A corpus file holds one snippet per line:
//! `id TAB timestamp TAB project TAB author TAB tokens`, where the tokens are
//! space separated and the last one is the prediction target.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prob::{SequenceMeta, TokenSequence};
use crate::refmodel::Checkpoint;
use crate::serial;

pub const UNK: &str = "<UNK>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const STR_LIT: &str = "<STR_LIT>";
pub const NUM_LIT: &str = "<NUM_LIT>";
pub const DEFAULT_KEEP_STR: usize = 200;
pub const DEFAULT_KEEP_NUM: usize = 30;
/// Share of the training window carved out as dev, in percent.
pub const DEV_PERCENT: u64 = 10;

pub const MANIFEST_FILE: &str = "corpus.json";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const SHIFT_REPORT_FILE: &str = "shift_report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Timeline,
    Project,
    Author,
    Paradigm,
    Synthetic,
}

impl Pattern {
    pub fn name(self) -> &'static str {
        match self {
            Pattern::Timeline => "timeline",
            Pattern::Project => "project",
            Pattern::Author => "author",
            Pattern::Paradigm => "paradigm",
            Pattern::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Pattern::Timeline,
            Pattern::Project,
            Pattern::Author,
            Pattern::Paradigm,
            Pattern::Synthetic,
        ]
        .into_iter()
        .find(|p| p.name().eq_ignore_ascii_case(s))
        .ok_or_else(|| Error::invalid(format!("unknown shift pattern {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Dev,
    Shift1,
    Shift2,
    Shift3,
    Ood,
}

impl SplitName {
    pub const ALL: [SplitName; 6] = [
        SplitName::Train,
        SplitName::Dev,
        SplitName::Shift1,
        SplitName::Shift2,
        SplitName::Shift3,
        SplitName::Ood,
    ];
    pub const SHIFTS: [SplitName; 3] = [SplitName::Shift1, SplitName::Shift2, SplitName::Shift3];

    pub fn name(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Dev => "dev",
            SplitName::Shift1 => "shift1",
            SplitName::Shift2 => "shift2",
            SplitName::Shift3 => "shift3",
            SplitName::Ood => "ood",
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SplitName::ALL
            .into_iter()
            .find(|n| n.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown split {s:?}")))
    }
}

/// Non-fatal condition found while building splits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Warning {
    pub kind: String,
    pub split: Option<SplitName>,
    pub message: String,
}

impl Warning {
    fn empty_split(split: SplitName) -> Self {
        Warning {
            kind: "empty_split".into(),
            split: Some(split),
            message: format!("split {split} received no sequences"),
        }
    }
}

/// Token table; index 0 is always `<UNK>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(UNK) {
            return Err(Error::format(format!("vocabulary must start with {UNK}")));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::format(format!("bad vocabulary entry {t:?} at line {}", i + 1)));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::format(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, i: u32) -> &str {
        &self.tokens[i as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Index of `token`, or `<UNK>` when it is out of vocabulary.
    pub fn encode(&self, token: &str) -> u32 {
        self.get(token).unwrap_or(0)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocab::new(text.lines().map(str::to_string).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Literal<'a> {
    Str(&'a str),
    Num(&'a str),
}

/// Recognizes quoted string literals and numeric literals.
pub fn classify_literal(token: &str) -> Option<Literal<'_>> {
    let b = token.as_bytes();
    if b.len() >= 2 && (b[0] == b'"' || b[0] == b'\'') && b[b.len() - 1] == b[0] {
        return Some(Literal::Str(&token[1..token.len() - 1]));
    }
    let starts_numeric =
        b.first().is_some_and(u8::is_ascii_digit) || (b.len() >= 2 && b[0] == b'.' && b[1].is_ascii_digit());
    if starts_numeric
        && b.iter()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, b'.' | b'_' | b'+' | b'-'))
    {
        return Some(Literal::Num(token));
    }
    None
}

/// Literals frequent enough in the training split to keep their value.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LiteralTable {
    pub strings: HashSet<String>,
    pub numbers: HashSet<String>,
}

impl LiteralTable {
    pub fn fit<'a, I>(train: I, keep_str: usize, keep_num: usize) -> Self
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut strs: HashMap<&str, usize> = HashMap::new();
        let mut nums: HashMap<&str, usize> = HashMap::new();
        for seq in train {
            for t in seq {
                match classify_literal(t) {
                    Some(Literal::Str(s)) => *strs.entry(s).or_default() += 1,
                    Some(Literal::Num(n)) => *nums.entry(n).or_default() += 1,
                    None => {}
                }
            }
        }
        fn top(counts: HashMap<&str, usize>, keep: usize) -> HashSet<String> {
            let mut v: Vec<(&str, usize)> = counts.into_iter().collect();
            v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
            v.into_iter().take(keep).map(|(s, _)| s.to_string()).collect()
        }
        LiteralTable {
            strings: top(strs, keep_str),
            numbers: top(nums, keep_num),
        }
    }

    pub fn normalize_token(&self, token: &str) -> String {
        match classify_literal(token) {
            Some(Literal::Str(s)) if self.strings.contains(s) => format!("<STR_LIT:{s}>"),
            Some(Literal::Str(_)) => STR_LIT.to_string(),
            Some(Literal::Num(n)) if self.numbers.contains(n) => format!("<NUM_LIT:{n}>"),
            Some(Literal::Num(_)) => NUM_LIT.to_string(),
            None => token.to_string(),
        }
    }
}

/// Replaces literals by placeholder tokens and wraps the sequence in
/// `<s>` ... `</s>`. Already wrapped input is not wrapped again.
pub fn normalize_literals(raw: &[String], table: &LiteralTable) -> Vec<String> {
    let wrapped = raw.len() >= 2 && raw[0] == BOS && raw[raw.len() - 1] == EOS;
    let inner = if wrapped { &raw[1..raw.len() - 1] } else { raw };
    let mut out = Vec::with_capacity(inner.len() + 2);
    out.push(BOS.to_string());
    out.extend(inner.iter().map(|t| table.normalize_token(t)));
    out.push(EOS.to_string());
    out
}

/// One line of a corpus file before vocabulary mapping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawRecord {
    pub id: String,
    pub meta: SequenceMeta,
    /// Context tokens followed by the target.
    pub tokens: Vec<String>,
}

pub fn parse_corpus_line(line: &str, lineno: usize) -> Result<RawRecord> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 5 {
        return Err(Error::format(format!(
            "line {lineno}: expected 5 tab-separated fields (id, timestamp, project, author, tokens), got {}",
            fields.len()
        )));
    }
    let timestamp = fields[1]
        .trim()
        .parse::<i64>()
        .map_err(|_| Error::format(format!("line {lineno}: bad timestamp {:?}", fields[1])))?;
    let tokens: Vec<String> = fields[4].split_whitespace().map(str::to_string).collect();
    if tokens.len() < 2 {
        return Err(Error::format(format!(
            "line {lineno}: need at least one context token and a target"
        )));
    }
    if fields[0].is_empty() {
        return Err(Error::format(format!("line {lineno}: empty id")));
    }
    Ok(RawRecord {
        id: fields[0].to_string(),
        meta: SequenceMeta {
            timestamp,
            project: fields[2].to_string(),
            author: fields[3].to_string(),
        },
        tokens,
    })
}

pub fn parse_corpus(text: &str) -> Result<Vec<RawRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_corpus_line(l.trim_end_matches('\r'), i + 1))
        .collect()
}

pub fn read_corpus(path: &Path) -> Result<Vec<RawRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text).map_err(|e| match e {
        Error::Format(m) => Error::format(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn format_line(id: &str, meta: &SequenceMeta, tokens: impl Iterator<Item = String>) -> Result<String> {
    for f in [id, &meta.project, &meta.author] {
        if f.contains(['\t', '\n', '\r']) {
            return Err(Error::invalid(format!("field {f:?} contains a tab or newline")));
        }
    }
    let toks: Vec<String> = tokens.collect();
    Ok(format!(
        "{id}\t{}\t{}\t{}\t{}\n",
        meta.timestamp,
        meta.project,
        meta.author,
        toks.join(" ")
    ))
}

/// 64-bit FNV-1a; stable across platforms and releases.
pub fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn is_dev(id: &str) -> bool {
    stable_hash(id) % 100 < DEV_PERCENT
}

/// Unigram counts of context tokens.
pub fn token_histogram(split: &[TokenSequence], vocab_size: usize) -> Result<Vec<u64>> {
    let mut h = vec![0u64; vocab_size];
    for s in split {
        for &t in &s.tokens {
            *h.get_mut(t as usize).ok_or_else(|| {
                Error::invalid(format!("token {t} in {} outside vocabulary of {vocab_size}", s.id))
            })? += 1;
        }
    }
    Ok(h)
}

/// `KL(P || Q)` between add-one-smoothed histograms, natural log.
pub fn kl_from_counts(p: &[u64], q: &[u64]) -> f64 {
    let v = p.len() as f64;
    let np = p.iter().sum::<u64>() as f64 + v;
    let nq = q.iter().sum::<u64>() as f64 + v;
    let kl: f64 = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| {
            let pa = (a as f64 + 1.0) / np;
            let qb = (b as f64 + 1.0) / nq;
            pa * (pa / qb).ln()
        })
        .sum();
    kl.max(0.0)
}

pub fn kl_intensity(a: &[TokenSequence], b: &[TokenSequence], vocab_size: usize) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("kl intensity needs two non-empty splits"));
    }
    Ok(kl_from_counts(
        &token_histogram(a, vocab_size)?,
        &token_histogram(b, vocab_size)?,
    ))
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::invalid(format!(
            "vector lengths differ: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::undefined("cosine of a zero-norm vector"));
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Mean last-hidden-layer activation over a split.
pub fn mean_embedding(split: &[TokenSequence], ckpt: &Checkpoint) -> Result<Vec<f64>> {
    if split.is_empty() {
        return Err(Error::invalid("cannot embed an empty split"));
    }
    let acts = ckpt.activations(split)?;
    let last = acts
        .last()
        .ok_or_else(|| Error::invalid("encoder has no hidden layers"))?;
    let mut mean = vec![0.0; last[0].len()];
    for a in last {
        for (m, x) in mean.iter_mut().zip(a) {
            *m += x;
        }
    }
    let n = split.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

pub fn cosine_intensity(a: &[TokenSequence], b: &[TokenSequence], ckpt: &Checkpoint) -> Result<f64> {
    cosine(&mean_embedding(a, ckpt)?, &mean_embedding(b, ckpt)?)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitOptions {
    /// Timeline window starts `t1 <= t2 <= t3 <= t4`. Window `i` covers
    /// `[t_i, t_{i+1})`, the first also takes everything before `t1` and the
    /// last everything after `t4`. Defaults to the 0, 1/2, 2/3 and 5/6
    /// timestamp quantiles.
    pub boundaries: Option<[i64; 4]>,
    /// Projects moved to the OOD split before any other splitting.
    pub ood_projects: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub splits: BTreeMap<SplitName, Vec<TokenSequence>>,
    pub warnings: Vec<Warning>,
}

fn require_meta(
    seqs: &[TokenSequence],
    pattern: Pattern,
    field: &str,
    get: impl Fn(&SequenceMeta) -> &str,
) -> Result<()> {
    match seqs.iter().find(|s| get(&s.meta).is_empty()) {
        Some(s) => Err(Error::invalid(format!(
            "sequence {} lacks the {field} metadata required by the {pattern} pattern",
            s.id
        ))),
        None => Ok(()),
    }
}

fn group_by(seqs: &[TokenSequence], key: impl Fn(&SequenceMeta) -> &str) -> BTreeMap<String, Vec<&TokenSequence>> {
    let mut groups: BTreeMap<String, Vec<&TokenSequence>> = BTreeMap::new();
    for s in seqs {
        groups.entry(key(&s.meta).to_string()).or_default().push(s);
    }
    groups
}

fn histogram_of(seqs: &[&TokenSequence], vocab_size: usize) -> Result<Vec<u64>> {
    let owned: Vec<TokenSequence> = seqs.iter().map(|s| (*s).clone()).collect();
    token_histogram(&owned, vocab_size)
}

/// Symmetrized KL between every pair of histograms.
pub fn divergence_matrix(hists: &[Vec<u64>]) -> Vec<Vec<f64>> {
    let n = hists.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (kl_from_counts(&hists[i], &hists[j]) + kl_from_counts(&hists[j], &hists[i]));
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

/// Picks the `n - 3` groups whose mean pairwise divergence is smallest,
/// returning their indices in ascending order. With four groups the single
/// group closest on average to the other three is chosen. Ties keep the
/// first candidate in lexicographic order of held-out indices.
pub fn select_training_groups(d: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = d.len();
    if n < 4 {
        return Err(Error::invalid(format!("need at least 4 groups, found {n}")));
    }
    let row: Vec<f64> = d.iter().map(|r| r.iter().sum()).collect();
    let held_out = if n == 4 {
        let keep = (0..n)
            .min_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)))
            .expect("non-empty");
        (0..n).filter(|&i| i != keep).collect::<Vec<_>>()
    } else {
        let total: f64 = row.iter().sum::<f64>() / 2.0;
        let mut best: Option<(f64, [usize; 3])> = None;
        for a in 0..n {
            for b in a + 1..n {
                for c in b + 1..n {
                    let kept = total - row[a] - row[b] - row[c] + d[a][b] + d[a][c] + d[b][c];
                    if best.is_none_or(|(v, _)| kept < v) {
                        best = Some((kept, [a, b, c]));
                    }
                }
            }
        }
        best.expect("n >= 5").1.to_vec()
    };
    Ok((0..n).filter(|i| !held_out.contains(i)).collect())
}

fn default_boundaries(seqs: &[TokenSequence]) -> [i64; 4] {
    let mut ts: Vec<i64> = seqs.iter().map(|s| s.meta.timestamp).collect();
    ts.sort_unstable();
    let n = ts.len();
    let q = |num: usize, den: usize| ts[(n * num / den).min(n - 1)];
    [ts[0], q(1, 2), q(2, 3), q(5, 6)]
}

fn carve_dev(window: Vec<TokenSequence>, out: &mut BTreeMap<SplitName, Vec<TokenSequence>>) {
    let (dev, train): (Vec<_>, Vec<_>) = window.into_iter().partition(|s| is_dev(&s.id));
    out.insert(SplitName::Train, train);
    out.insert(SplitName::Dev, dev);
}

/// Partitions `seqs` into train, dev, three shift splits and, when OOD
/// projects are named, an OOD split.
pub fn build_splits(
    seqs: Vec<TokenSequence>,
    pattern: Pattern,
    opts: &SplitOptions,
    vocab_size: usize,
) -> Result<Splits> {
    let mut seen = HashSet::new();
    if let Some(s) = seqs.iter().find(|s| !seen.insert(s.id.as_str())) {
        return Err(Error::invalid(format!("duplicate sequence id {}", s.id)));
    }
    if seqs.is_empty() {
        return Err(Error::invalid("no sequences to split"));
    }
    match pattern {
        Pattern::Project => require_meta(&seqs, pattern, "project", |m| &m.project)?,
        Pattern::Author => require_meta(&seqs, pattern, "author", |m| &m.author)?,
        Pattern::Paradigm => {
            require_meta(&seqs, pattern, "project", |m| &m.project)?;
            if opts.ood_projects.is_empty() {
                return Err(Error::invalid("the paradigm pattern needs at least one OOD project"));
            }
        }
        Pattern::Timeline | Pattern::Synthetic => {}
    }

    let mut warnings = Vec::new();
    let mut out = BTreeMap::new();
    let (ood, rest): (Vec<_>, Vec<_>) = seqs
        .into_iter()
        .partition(|s| opts.ood_projects.contains(&s.meta.project));
    if !opts.ood_projects.is_empty() {
        out.insert(SplitName::Ood, ood);
    }
    if rest.is_empty() {
        return Err(Error::invalid("every sequence belongs to an OOD project"));
    }

    match pattern {
        Pattern::Timeline | Pattern::Paradigm | Pattern::Synthetic => {
            let b = match opts.boundaries {
                Some(b) => {
                    if b.windows(2).any(|w| w[0] > w[1]) {
                        return Err(Error::invalid(format!("timeline boundaries must ascend: {b:?}")));
                    }
                    b
                }
                None => default_boundaries(&rest),
            };
            let mut windows: [Vec<TokenSequence>; 4] = Default::default();
            for s in rest {
                let w = b[1..].iter().filter(|&&t| s.meta.timestamp >= t).count();
                windows[w].push(s);
            }
            let [first, s1, s2, s3] = windows;
            carve_dev(first, &mut out);
            out.insert(SplitName::Shift1, s1);
            out.insert(SplitName::Shift2, s2);
            out.insert(SplitName::Shift3, s3);
        }
        Pattern::Project | Pattern::Author => {
            let key = |m: &SequenceMeta| -> String {
                if pattern == Pattern::Project {
                    m.project.clone()
                } else {
                    m.author.clone()
                }
            };
            let groups = group_by(&rest, |m| {
                if pattern == Pattern::Project {
                    &m.project
                } else {
                    &m.author
                }
            });
            let names: Vec<&String> = groups.keys().collect();
            let needed = 4;
            if names.len() < needed {
                return Err(Error::invalid(format!(
                    "the {pattern} pattern needs at least {needed} groups, found {}",
                    names.len()
                )));
            }
            let train_groups: BTreeSet<String> = if pattern == Pattern::Project {
                let hists = groups
                    .values()
                    .map(|g| histogram_of(g, vocab_size))
                    .collect::<Result<Vec<_>>>()?;
                select_training_groups(&divergence_matrix(&hists))?
                    .into_iter()
                    .map(|i| names[i].clone())
                    .collect()
            } else {
                let main = groups
                    .iter()
                    .max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.0.cmp(a.0)))
                    .map(|(k, _)| k.clone())
                    .expect("non-empty");
                BTreeSet::from([main])
            };
            let (window, others): (Vec<_>, Vec<_>) =
                rest.into_iter().partition(|s| train_groups.contains(&key(&s.meta)));
            carve_dev(window, &mut out);
            let dev = &out[&SplitName::Dev];
            if dev.is_empty() {
                return Err(Error::invalid("training window too small to carve a dev split"));
            }
            let dev_hist = token_histogram(dev, vocab_size)?;
            let other_groups = group_by(&others, |m| {
                if pattern == Pattern::Project {
                    &m.project
                } else {
                    &m.author
                }
            });
            let mut ranked: Vec<(f64, String)> = other_groups
                .iter()
                .map(|(name, g)| Ok((kl_from_counts(&histogram_of(g, vocab_size)?, &dev_hist), name.clone())))
                .collect::<Result<_>>()?;
            ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let m = ranked.len();
            let bucket_of: HashMap<String, usize> = ranked
                .iter()
                .enumerate()
                .map(|(i, (_, name))| (name.clone(), i * 3 / m))
                .collect();
            let mut buckets: [Vec<TokenSequence>; 3] = Default::default();
            for s in others {
                buckets[bucket_of[&key(&s.meta)]].push(s);
            }
            for (name, b) in SplitName::SHIFTS.into_iter().zip(buckets) {
                out.insert(name, b);
            }
        }
    }

    for (name, split) in &out {
        if split.is_empty() {
            warnings.push(Warning::empty_split(*name));
        }
    }
    Ok(Splits { splits: out, warnings })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftedCorpus {
    pub pattern: Pattern,
    pub vocab: Vocab,
    /// Head width: `<UNK>` plus every target seen in training.
    pub class_count: usize,
    pub splits: BTreeMap<SplitName, Vec<TokenSequence>>,
    pub warnings: Vec<Warning>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitEntry {
    pub split: SplitName,
    pub file: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub pattern: Pattern,
    pub vocab_size: usize,
    pub class_count: usize,
    pub splits: Vec<SplitEntry>,
    pub warnings: Vec<Warning>,
}

impl ShiftedCorpus {
    pub fn split(&self, name: SplitName) -> &[TokenSequence] {
        self.splits.get(&name).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn has(&self, name: SplitName) -> bool {
        !self.split(name).is_empty()
    }

    /// Writes `corpus.json`, `vocab.txt` and one `<split>.tsv` per split.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.vocab.write(&dir.join(VOCAB_FILE))?;
        let mut entries = Vec::new();
        for (name, seqs) in &self.splits {
            let file = format!("{name}.tsv");
            let mut text = String::new();
            for s in seqs {
                let toks = s
                    .tokens
                    .iter()
                    .chain([&s.target])
                    .map(|&t| self.vocab.token(t).to_string());
                text.push_str(&format_line(&s.id, &s.meta, toks)?);
            }
            let path = dir.join(&file);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            entries.push(SplitEntry {
                split: *name,
                file,
                count: seqs.len(),
            });
        }
        let manifest = Manifest {
            pattern: self.pattern,
            vocab_size: self.vocab.len(),
            class_count: self.class_count,
            splits: entries,
            warnings: self.warnings.clone(),
        };
        let path = dir.join(MANIFEST_FILE);
        let mut json = serde_json::to_string_pretty(&manifest)?;
        json.push('\n');
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        let vocab = Vocab::read(&dir.join(VOCAB_FILE))?;
        if vocab.len() != manifest.vocab_size || manifest.class_count > vocab.len() || manifest.class_count < 2 {
            return Err(Error::format(format!(
                "{}: vocab_size {} / class_count {} inconsistent with {} vocabulary entries",
                path.display(),
                manifest.vocab_size,
                manifest.class_count,
                vocab.len()
            )));
        }
        let mut splits = BTreeMap::new();
        for entry in &manifest.splits {
            let p = dir.join(&entry.file);
            let records = read_corpus(&p)?;
            let mut seqs = Vec::with_capacity(records.len());
            for r in records {
                let mut ids = Vec::with_capacity(r.tokens.len());
                for t in &r.tokens {
                    ids.push(vocab.get(t).ok_or_else(|| {
                        Error::format(format!("{}: token {t:?} of {} not in vocabulary", p.display(), r.id))
                    })?);
                }
                let target = ids.pop().expect("at least two tokens");
                seqs.push(TokenSequence {
                    id: r.id,
                    tokens: ids,
                    meta: r.meta,
                    target,
                });
            }
            if seqs.len() != entry.count {
                return Err(Error::format(format!(
                    "{}: expected {} sequences, found {}",
                    p.display(),
                    entry.count,
                    seqs.len()
                )));
            }
            splits.insert(entry.split, seqs);
        }
        Ok(ShiftedCorpus {
            pattern: manifest.pattern,
            vocab,
            class_count: manifest.class_count,
            splits,
            warnings: manifest.warnings,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IngestOptions {
    pub pattern: Pattern,
    pub split: SplitOptions,
    pub keep_str: usize,
    pub keep_num: usize,
}

impl IngestOptions {
    pub fn new(pattern: Pattern) -> Self {
        Self {
            pattern,
            split: SplitOptions::default(),
            keep_str: DEFAULT_KEEP_STR,
            keep_num: DEFAULT_KEEP_NUM,
        }
    }
}

/// Turns raw records into a shifted corpus: splits by metadata, normalizes
/// literals with a table fitted on train, and builds the vocabulary from
/// train (`<UNK>`, sorted training targets, then context tokens by
/// descending frequency). Tokens unseen in train map to `<UNK>`.
pub fn ingest(records: Vec<RawRecord>, opts: &IngestOptions) -> Result<ShiftedCorpus> {
    if opts.pattern == Pattern::Synthetic {
        return Err(Error::invalid("the synthetic pattern is generated, not ingested"));
    }
    // Provisional ids over every raw token, only used to split.
    let distinct: BTreeSet<&str> = records
        .iter()
        .flat_map(|r| r.tokens.iter().map(String::as_str))
        .collect();
    let provisional: HashMap<&str, u32> = distinct.iter().enumerate().map(|(i, t)| (*t, i as u32)).collect();
    let by_id: HashMap<&str, &RawRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let seqs: Vec<TokenSequence> = records
        .iter()
        .map(|r| {
            let mut ids: Vec<u32> = r.tokens.iter().map(|t| provisional[t.as_str()]).collect();
            let target = ids.pop().expect("parsed records hold two tokens");
            TokenSequence {
                id: r.id.clone(),
                tokens: ids,
                meta: r.meta.clone(),
                target,
            }
        })
        .collect();
    let splits = build_splits(seqs, opts.pattern, &opts.split, distinct.len())?;

    let context = |r: &RawRecord| r.tokens[..r.tokens.len() - 1].to_vec();
    let train_raw: Vec<&RawRecord> = splits.splits[&SplitName::Train]
        .iter()
        .map(|s| by_id[s.id.as_str()])
        .collect();
    if train_raw.is_empty() {
        return Err(Error::invalid("the training split is empty"));
    }
    let train_ctx: Vec<Vec<String>> = train_raw.iter().map(|r| context(r)).collect();
    let table = LiteralTable::fit(train_ctx.iter().map(Vec::as_slice), opts.keep_str, opts.keep_num);
    let normalized = |r: &RawRecord| -> (Vec<String>, String) {
        (
            normalize_literals(&context(r), &table),
            table.normalize_token(r.tokens.last().expect("target")),
        )
    };

    let mut targets = BTreeSet::new();
    let mut freq: HashMap<String, usize> = HashMap::new();
    for r in &train_raw {
        let (ctx, target) = normalized(r);
        targets.insert(target);
        for t in ctx {
            *freq.entry(t).or_default() += 1;
        }
    }
    targets.remove(UNK);
    let mut tokens = vec![UNK.to_string()];
    tokens.extend(targets.iter().cloned());
    let mut ctx_tokens: Vec<(String, usize)> = freq
        .into_iter()
        .filter(|(t, _)| !targets.contains(t) && t != UNK)
        .collect();
    ctx_tokens.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    tokens.extend(ctx_tokens.into_iter().map(|(t, _)| t));
    let vocab = Vocab::new(tokens)?;
    let class_count = targets.len() + 1;
    if class_count < 2 {
        return Err(Error::invalid("training split has no targets"));
    }

    let encoded = splits
        .splits
        .into_iter()
        .map(|(name, seqs)| {
            let seqs = seqs
                .into_iter()
                .map(|s| {
                    let (ctx, target) = normalized(by_id[s.id.as_str()]);
                    let target = vocab.encode(&target);
                    TokenSequence {
                        id: s.id,
                        tokens: ctx.iter().map(|t| vocab.encode(t)).collect(),
                        meta: s.meta,
                        // Targets never seen in training are out of the label space.
                        target: if (target as usize) < class_count { target } else { 0 },
                    }
                })
                .collect();
            (name, seqs)
        })
        .collect();
    Ok(ShiftedCorpus {
        pattern: opts.pattern,
        vocab,
        class_count,
        splits: encoded,
        warnings: splits.warnings,
    })
}

/// Parameters of the synthetic drift corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub vocab_size: usize,
    pub sequence_count: usize,
    /// Mixture weight of the alternate distribution for shift1..3.
    pub drift_levels: Vec<f64>,
    /// Mixture weight for the OOD split; `None` omits it.
    pub ood_weight: Option<f64>,
    pub label_count: usize,
    /// Share of a class's tokens drawn from its signature tokens.
    pub signal: f64,
    pub signature_size: usize,
    /// Share of the alternate distribution placed on base-region signature
    /// tokens, chosen without regard to the class.
    pub decoy: f64,
    pub label_noise: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            vocab_size: 200,
            sequence_count: 20_000,
            drift_levels: vec![0.1, 0.3, 0.5],
            ood_weight: None,
            label_count: 20,
            signal: 0.3,
            signature_size: 3,
            decoy: 0.8,
            label_noise: 0.1,
            min_len: 8,
            max_len: 24,
            seed: 0,
        }
    }
}

const VERBS: [&str; 8] = ["get", "set", "add", "remove", "find", "is", "has", "create"];
const NOUNS: [&str; 8] = ["count", "name", "size", "value", "item", "line", "path", "type"];

/// Synthetic method names built from shared sub-tokens, e.g. `getCount`.
pub fn synth_label_names(count: usize) -> Vec<String> {
    (0..count)
        .map(|j| {
            let verb = VERBS[j / NOUNS.len()];
            let noun = NOUNS[j % NOUNS.len()];
            let mut cap = noun.to_string();
            cap[..1].make_ascii_uppercase();
            format!("{verb}{cap}")
        })
        .collect()
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let levels = &self.drift_levels;
        if levels.len() != 3 {
            return Err(Error::invalid(format!("need 3 drift levels, got {}", levels.len())));
        }
        if levels.iter().chain(&self.ood_weight).any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::invalid("drift weights must lie in [0, 1]"));
        }
        if levels.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::invalid(format!("drift levels must ascend: {levels:?}")));
        }
        if !(2..=VERBS.len() * NOUNS.len()).contains(&self.label_count) {
            return Err(Error::invalid(format!(
                "label_count must be in 2..=64, got {}",
                self.label_count
            )));
        }
        let ctx = self.vocab_size.saturating_sub(self.label_count + 1);
        let (base, alt) = Self::regions(ctx);
        if alt < 1 || base < self.label_count * self.signature_size {
            return Err(Error::invalid(format!(
                "vocab_size {} too small for {} labels with {} signature tokens each",
                self.vocab_size, self.label_count, self.signature_size
            )));
        }
        if [self.signal, self.label_noise, self.decoy]
            .iter()
            .any(|x| !(0.0..=1.0).contains(x))
        {
            return Err(Error::invalid("signal, decoy and label_noise must lie in [0, 1]"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::invalid("need 1 <= min_len <= max_len"));
        }
        let parts = 1 + levels.len() + self.ood_weight.is_some() as usize;
        if self.sequence_count < 20 * parts {
            return Err(Error::invalid(format!(
                "sequence_count {} too small",
                self.sequence_count
            )));
        }
        Ok(())
    }

    /// Sizes of the base and alternate context regions.
    fn regions(context_tokens: usize) -> (usize, usize) {
        let base = context_tokens * 3 / 5;
        (base, context_tokens - base)
    }
}

/// Zipf weights `1 / rank` over `n` items in a seeded random rank order.
fn zipf_weights(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut ranks: Vec<usize> = (1..=n).collect();
    ranks.shuffle(rng);
    ranks.into_iter().map(|r| 1.0 / r as f64).collect()
}

/// Generates train/dev from per-class base distributions and the shift and
/// OOD splits from `(1 - w) * base + w * alternate`. The alternate
/// distribution puts `decoy` of its mass on signature tokens regardless of
/// class and the rest on context tokens the base never uses. Metadata is
/// consistent with the splits: each level has its own timestamp window,
/// project and author.
pub fn synth_corpus(spec: &SynthSpec) -> Result<ShiftedCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let labels = synth_label_names(spec.label_count);
    let first_ctx = spec.label_count + 1;
    let (base_n, alt_n) = SynthSpec::regions(spec.vocab_size - first_ctx);

    let mut tokens = vec![UNK.to_string()];
    tokens.extend(labels.iter().cloned());
    tokens.extend((first_ctx..spec.vocab_size).map(|i| format!("t{i:03}")));
    let vocab = Vocab::new(tokens)?;

    let background = zipf_weights(base_n, &mut rng);
    let bg_total: f64 = background.iter().sum();
    let mut slots: Vec<usize> = (0..base_n).collect();
    slots.shuffle(&mut rng);
    let class_dists = (0..spec.label_count)
        .map(|k| {
            let mut w: Vec<f64> = background.iter().map(|b| (1.0 - spec.signal) * b / bg_total).collect();
            for &s in &slots[k * spec.signature_size..(k + 1) * spec.signature_size] {
                w[s] += spec.signal / spec.signature_size as f64;
            }
            WeightedIndex::new(&w).map_err(|e| Error::invalid(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let signature_slots = &slots[..spec.label_count * spec.signature_size];
    let mut alt_weights = vec![0.0; base_n + alt_n];
    for &s in signature_slots {
        alt_weights[s] += spec.decoy / signature_slots.len() as f64;
    }
    let tail = zipf_weights(alt_n, &mut rng);
    let tail_total: f64 = tail.iter().sum();
    for (w, t) in alt_weights[base_n..].iter_mut().zip(&tail) {
        *w += (1.0 - spec.decoy) * t / tail_total;
    }
    let alternate = WeightedIndex::new(&alt_weights).map_err(|e| Error::invalid(e.to_string()))?;

    let levels: Vec<(Option<SplitName>, f64)> = std::iter::once((None, 0.0))
        .chain(
            SplitName::SHIFTS
                .into_iter()
                .map(Some)
                .zip(spec.drift_levels.iter().copied()),
        )
        .chain(spec.ood_weight.map(|w| (Some(SplitName::Ood), w)))
        .collect();
    let window = spec.sequence_count / 2;
    let per_level = (spec.sequence_count - window) / (levels.len() - 1);

    let mut splits: BTreeMap<SplitName, Vec<TokenSequence>> = BTreeMap::new();
    let mut next_id = 0usize;
    for (level, (split, w)) in levels.iter().enumerate() {
        let n = if level == 0 { window } else { per_level };
        let (project_prefix, author) = match split {
            None => ("base", "author-main".to_string()),
            Some(SplitName::Ood) => ("paradigm", "author-ood".to_string()),
            Some(_) => ("drift", format!("author-{level}")),
        };
        for i in 0..n {
            let k = rng.random_range(0..spec.label_count);
            let len = rng.random_range(spec.min_len..=spec.max_len);
            let toks = (0..len)
                .map(|_| {
                    if rng.random::<f64>() < *w {
                        (first_ctx + alternate.sample(&mut rng)) as u32
                    } else {
                        (first_ctx + class_dists[k].sample(&mut rng)) as u32
                    }
                })
                .collect();
            let label = if rng.random::<f64>() < spec.label_noise {
                rng.random_range(0..spec.label_count)
            } else {
                k
            };
            let project = match split {
                None => format!("{project_prefix}-{}", i % 4),
                Some(SplitName::Ood) => format!("{project_prefix}-ood"),
                Some(_) => format!("{project_prefix}-{level}"),
            };
            let seq = TokenSequence {
                id: format!("syn-{next_id:06}"),
                tokens: toks,
                meta: SequenceMeta {
                    timestamp: level.min(3) as i64 * 1_000_000 + i as i64,
                    project,
                    author: author.clone(),
                },
                target: (1 + label) as u32,
            };
            next_id += 1;
            let name = match split {
                None if is_dev(&seq.id) => SplitName::Dev,
                None => SplitName::Train,
                Some(s) => *s,
            };
            splits.entry(name).or_default().push(seq);
        }
    }
    for name in [SplitName::Train, SplitName::Dev] {
        splits.entry(name).or_default();
    }
    Ok(ShiftedCorpus {
        pattern: Pattern::Synthetic,
        vocab,
        class_count: spec.label_count + 1,
        splits,
        warnings: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitStats {
    pub split: SplitName,
    /// `KL(split || dev)`.
    #[serde(serialize_with = "serial::f64_17")]
    pub kl: f64,
    /// Cosine between mean encoder states of the split and dev; missing when
    /// no encoder was given or a mean state has zero norm.
    #[serde(serialize_with = "serial::opt_f64_17")]
    pub cosine: Option<f64>,
    /// Mean context length in tokens.
    #[serde(serialize_with = "serial::f64_17")]
    pub snippet_size: f64,
    pub snippet_count: usize,
    /// Distinct token types occurring in the split.
    pub vocab_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftReport {
    pub pattern: Pattern,
    pub rows: Vec<SplitStats>,
    pub warnings: Vec<Warning>,
}

impl ShiftReport {
    pub fn row(&self, split: SplitName) -> Option<&SplitStats> {
        self.rows.iter().find(|r| r.split == split)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Shift statistics of every non-empty split against dev.
pub fn shift_report(corpus: &ShiftedCorpus, encoder: Option<&Checkpoint>) -> Result<ShiftReport> {
    let dev = corpus.split(SplitName::Dev);
    if dev.is_empty() {
        return Err(Error::invalid("the dev split is empty"));
    }
    let v = corpus.vocab.len();
    let dev_hist = token_histogram(dev, v)?;
    let dev_mean = encoder.map(|e| mean_embedding(dev, e)).transpose()?;
    let mut rows = Vec::new();
    for (name, seqs) in &corpus.splits {
        if seqs.is_empty() {
            continue;
        }
        let hist = token_histogram(seqs, v)?;
        let cosine = match (encoder, &dev_mean) {
            (Some(e), Some(d)) => match cosine(&mean_embedding(seqs, e)?, d) {
                Ok(c) => Some(c),
                Err(Error::UndefinedMetric(_)) => None,
                Err(err) => return Err(err),
            },
            _ => None,
        };
        rows.push(SplitStats {
            split: *name,
            kl: kl_from_counts(&hist, &dev_hist),
            cosine,
            snippet_size: seqs.iter().map(|s| s.tokens.len()).sum::<usize>() as f64 / seqs.len() as f64,
            snippet_count: seqs.len(),
            vocab_size: hist.iter().filter(|&&c| c > 0).count(),
        });
    }
    Ok(ShiftReport {
        pattern: corpus.pattern,
        rows,
        warnings: corpus.warnings.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, prop_oneof, proptest, Just, Strategy};

    fn seq(id: &str, ts: i64, project: &str, author: &str, tokens: Vec<u32>) -> TokenSequence {
        TokenSequence {
            id: id.into(),
            tokens,
            meta: SequenceMeta {
                timestamp: ts,
                project: project.into(),
                author: author.into(),
            },
            target: 1,
        }
    }

    fn strings(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn literal_normalization() {
        let train = [strings(&["x", "=", "\"utf-8\"", ";", "\"utf-8\"", "42", "7"])];
        let table = LiteralTable::fit(train.iter().map(Vec::as_slice), 1, 1);
        let out = normalize_literals(&strings(&["\"utf-8\"", "\"rare\"", "42", "999", "0x1F", "foo"]), &table);
        assert_eq!(
            out,
            strings(&[
                "<s>",
                "<STR_LIT:utf-8>",
                "<STR_LIT>",
                "<NUM_LIT:42>",
                "<NUM_LIT>",
                "<NUM_LIT>",
                "foo",
                "</s>"
            ])
        );
        let empty = LiteralTable::default();
        assert_eq!(
            normalize_literals(&strings(&["a", "b"]), &empty),
            strings(&["<s>", "a", "b", "</s>"])
        );
        assert_eq!(normalize_literals(&out, &table), out);
        assert_eq!(classify_literal("x1"), None);
        assert_eq!(classify_literal("'a'"), Some(Literal::Str("a")));
        assert_eq!(classify_literal("1e-5"), Some(Literal::Num("1e-5")));
    }

    #[test]
    fn kl_cases() {
        let a = vec![seq("a", 0, "p", "u", vec![0, 1, 1, 2])];
        assert_eq!(kl_intensity(&a, &a, 3).unwrap(), 0.0);
        let p = [5_000u64, 5_000];
        let q = [9_000u64, 1_000];
        let exact = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((exact - 0.5108).abs() < 1e-4);
        assert!((kl_from_counts(&p, &q) - exact).abs() < 1e-3);
        let skew = [[90u64, 5, 5], [30, 30, 40]];
        assert!((kl_from_counts(&skew[0], &skew[1]) - kl_from_counts(&skew[1], &skew[0])).abs() > 1e-3);
        assert!(matches!(kl_intensity(&a, &[], 3), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine(&[1.0, 2.0], &[2.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert!(matches!(
            cosine(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn cosine_of_identical_splits() {
        let data = crate::testutil::toy_split(60, 1);
        let ckpt = crate::refmodel::train(&crate::testutil::toy_config(0), &data, &data[..10]).unwrap();
        let c = cosine_intensity(&data, &data, &ckpt).unwrap();
        assert!((c - 1.0).abs() < 1e-12);
    }

    #[test]
    fn timeline_boundaries() {
        let seqs: Vec<TokenSequence> = (0..400).map(|i| seq(&format!("s{i}"), i, "p", "a", vec![1])).collect();
        let opts = SplitOptions {
            boundaries: Some([0, 100, 200, 300]),
            ..Default::default()
        };
        let s = build_splits(seqs.clone(), Pattern::Timeline, &opts, 3).unwrap();
        assert_eq!(s.splits[&SplitName::Shift1].len(), 100);
        assert_eq!(s.splits[&SplitName::Shift3][0].meta.timestamp, 300);
        assert_eq!(s.splits[&SplitName::Train].len() + s.splits[&SplitName::Dev].len(), 100);
        assert!(s.warnings.is_empty());

        let late = SplitOptions {
            boundaries: Some([0, 1000, 2000, 3000]),
            ..Default::default()
        };
        let s = build_splits(seqs.clone(), Pattern::Timeline, &late, 3).unwrap();
        let empty: Vec<_> = s.warnings.iter().filter_map(|w| w.split).collect();
        assert_eq!(empty, SplitName::SHIFTS);
        assert!(s.warnings.iter().all(|w| w.kind == "empty_split"));

        let bad = SplitOptions {
            boundaries: Some([0, 300, 200, 400]),
            ..Default::default()
        };
        assert!(matches!(
            build_splits(seqs, Pattern::Timeline, &bad, 3),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn dev_split_is_stable() {
        assert_eq!(stable_hash(""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(stable_hash("a"), 0xaf63_dc4c_8601_ec8c);
        let ids: Vec<String> = (0..10_000).map(|i| format!("id{i}")).collect();
        let dev = ids.iter().filter(|i| is_dev(i)).count();
        assert!((900..1100).contains(&dev), "{dev}");
    }

    #[test]
    fn author_requires_metadata() {
        let seqs = vec![seq("a", 0, "p", "", vec![1])];
        let err = build_splits(seqs, Pattern::Author, &SplitOptions::default(), 3).unwrap_err();
        assert!(err.to_string().contains("author"));
    }

    #[test]
    fn too_few_groups() {
        let seqs: Vec<_> = (0..30)
            .map(|i| seq(&format!("s{i}"), 0, &format!("p{}", i % 3), "a", vec![1]))
            .collect();
        assert!(matches!(
            build_splits(seqs, Pattern::Project, &SplitOptions::default(), 3),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn author_buckets_ordered_by_kl() {
        let mut seqs = Vec::new();
        // Main author: tokens 0..4 uniformly; others skew toward token 5 by
        // an increasing amount.
        for i in 0..300 {
            seqs.push(seq(
                &format!("m{i}"),
                0,
                "p",
                "main",
                vec![(i % 4) as u32, ((i + 1) % 4) as u32],
            ));
        }
        for (a, skew) in [("w", 1u32), ("x", 2), ("y", 3), ("z", 4), ("v", 5), ("u", 6)] {
            for i in 0..20u32 {
                let t = if i % 6 < skew { 5 } else { i % 4 };
                seqs.push(seq(&format!("{a}{i}"), 0, "p", a, vec![t, t]));
            }
        }
        let s = build_splits(seqs, Pattern::Author, &SplitOptions::default(), 6).unwrap();
        let authors = |n: SplitName| {
            s.splits[&n]
                .iter()
                .map(|q| q.meta.author.clone())
                .collect::<BTreeSet<_>>()
        };
        assert_eq!(authors(SplitName::Train), BTreeSet::from(["main".to_string()]));
        assert_eq!(authors(SplitName::Shift1), BTreeSet::from(["w".into(), "x".into()]));
        assert_eq!(authors(SplitName::Shift3), BTreeSet::from(["u".into(), "v".into()]));
    }

    #[test]
    fn paradigm_moves_named_projects() {
        let seqs: Vec<_> = (0..200)
            .map(|i| {
                seq(
                    &format!("s{i}"),
                    i,
                    if i % 10 == 0 { "ood" } else { "main" },
                    "a",
                    vec![1],
                )
            })
            .collect();
        let opts = SplitOptions {
            ood_projects: vec!["ood".into()],
            ..Default::default()
        };
        let s = build_splits(seqs.clone(), Pattern::Paradigm, &opts, 3).unwrap();
        assert_eq!(s.splits[&SplitName::Ood].len(), 20);
        assert!(build_splits(seqs, Pattern::Paradigm, &SplitOptions::default(), 3).is_err());
    }

    #[test]
    fn ingest_builds_vocab_from_train() {
        let text = "\
a1\t0\tp\tu\tint x = 42 ; getCount
a2\t1\tp\tu\tint y = \"hi\" ; getName
a3\t2\tp\tu\tint x = 42 ; getCount
b1\t5\tp\tu\tfloat z = 1 ; setSize
c1\t6\tp\tu\tint x ; getCount
d1\t7\tp\tu\tint x ; getName
";
        let records = parse_corpus(text).unwrap();
        let mut opts = IngestOptions::new(Pattern::Timeline);
        opts.split.boundaries = Some([0, 5, 6, 7]);
        let c = ingest(records, &opts).unwrap();
        assert_eq!(c.vocab.token(0), UNK);
        let train_targets: BTreeSet<&str> = (1..c.class_count as u32).map(|i| c.vocab.token(i)).collect();
        assert!(train_targets.is_subset(&BTreeSet::from(["getCount", "getName"])));
        let shift1 = &c.split(SplitName::Shift1)[0];
        // `float` and `setSize` never occur in training.
        assert_eq!(shift1.target, 0);
        assert_eq!(shift1.tokens[1], 0);
        assert_eq!(c.vocab.token(shift1.tokens[0]), BOS);
    }

    #[test]
    fn bad_lines_are_format_errors() {
        assert!(matches!(parse_corpus("a\t0\tp\tu"), Err(Error::Format(_))));
        assert!(matches!(parse_corpus("a\tnope\tp\tu\tx y"), Err(Error::Format(_))));
        assert!(matches!(parse_corpus("a\t0\tp\tu\tx"), Err(Error::Format(_))));
    }

    #[test]
    fn corpus_files_round_trip() {
        let spec = SynthSpec {
            sequence_count: 400,
            ..SynthSpec::default()
        };
        let c = synth_corpus(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        c.save(dir.path()).unwrap();
        let back = ShiftedCorpus::load(dir.path()).unwrap();
        assert_eq!(back, c);
        fs::write(dir.path().join("dev.tsv"), "x\t0\tp\tu\tnot_a_token getCount\n").unwrap();
        assert!(matches!(ShiftedCorpus::load(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn synth_is_deterministic_and_validated() {
        let spec = SynthSpec {
            sequence_count: 1000,
            ..SynthSpec::default()
        };
        assert_eq!(synth_corpus(&spec).unwrap(), synth_corpus(&spec).unwrap());
        let c = synth_corpus(&spec).unwrap();
        for s in c.splits.values().flatten() {
            s.validate(c.vocab.len()).unwrap();
            assert!((1..c.class_count as u32).contains(&s.target));
        }
        let bad = SynthSpec {
            drift_levels: vec![0.5, 0.3, 0.1],
            ..SynthSpec::default()
        };
        assert!(matches!(synth_corpus(&bad), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn synth_drift_orders_kl() {
        let spec = SynthSpec {
            ood_weight: Some(0.9),
            ..SynthSpec::default()
        };
        let c = synth_corpus(&spec).unwrap();
        let r = shift_report(&c, None).unwrap();
        let kl = |s| r.row(s).unwrap().kl;
        assert_eq!(kl(SplitName::Dev), 0.0);
        assert!(kl(SplitName::Shift1) < kl(SplitName::Shift2));
        assert!(kl(SplitName::Shift2) < kl(SplitName::Shift3));
        assert!(kl(SplitName::Shift3) < kl(SplitName::Ood));
    }

    #[test]
    fn synth_without_drift_matches_dev() {
        // About 1e5 context tokens in the shift split.
        let spec = SynthSpec {
            sequence_count: 40_000,
            drift_levels: vec![0.0, 0.0, 0.0],
            ood_weight: None,
            ..SynthSpec::default()
        };
        let c = synth_corpus(&spec).unwrap();
        let tokens: usize = c.split(SplitName::Shift1).iter().map(|s| s.tokens.len()).sum();
        assert!(tokens >= 100_000, "{tokens}");
        let kl = kl_intensity(c.split(SplitName::Shift1), c.split(SplitName::Train), c.vocab.len()).unwrap();
        assert!(kl < 0.01, "{kl}");
    }

    fn timeline_input() -> impl Strategy<Value = Vec<TokenSequence>> {
        prop::collection::vec((0i64..1000, 0u32..5, 0usize..6), 1..200).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (ts, t, a))| {
                    seq(
                        &format!("q{i}"),
                        ts,
                        &format!("p{a}"),
                        &format!("a{a}"),
                        vec![t, (t + 1) % 5],
                    )
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn splits_partition_input(seqs in timeline_input(), pattern in 0usize..3) {
            let pattern = [Pattern::Timeline, Pattern::Project, Pattern::Author][pattern];
            let ids: BTreeSet<String> = seqs.iter().map(|s| s.id.clone()).collect();
            if let Ok(s) = build_splits(seqs, pattern, &SplitOptions::default(), 5) {
                let mut out = BTreeSet::new();
                for split in s.splits.values() {
                    for q in split {
                        prop_assert!(out.insert(q.id.clone()), "duplicate {}", q.id);
                    }
                }
                prop_assert_eq!(out, ids);
            }
        }

        #[test]
        fn kl_non_negative(p in prop::collection::vec(0u64..50, 2..20), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q: Vec<u64> = p.iter().map(|_| rng.random_range(0..50)).collect();
            let kl = kl_from_counts(&p, &q);
            prop_assert!(kl >= 0.0);
            prop_assert_eq!(kl_from_counts(&p, &p), 0.0);
        }

        #[test]
        fn literal_normalization_idempotent(toks in prop::collection::vec(prop_oneof![
            Just("\"a\"".to_string()), Just("'b'".to_string()), Just("12".to_string()),
            Just("3.5".to_string()), Just("x".to_string()), Just("<s>".to_string()), Just("</s>".to_string()),
        ], 0..12)) {
            let train = [vec!["\"a\"".to_string(), "12".to_string()]];
            let table = LiteralTable::fit(train.iter().map(Vec::as_slice), 1, 1);
            let once = normalize_literals(&toks, &table);
            prop_assert_eq!(normalize_literals(&once, &table), once);
        }
    }
}
