//! Synthetic long-sequence classification tasks and a small CSV corpus loader.
//!
//! Token ids follow the model's layout: `0` pad, `1` `[CLS]`, `2` unknown,
//! then [`CLASS_TOKENS`] ids reserved for class-marker tokens, then filler.
//! Each example `i` of a split is drawn from its own SplitMix64 stream, so
//! generating shards independently and concatenating them gives the same
//! dataset as generating serially.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CLS_ID, FIRST_FREE_ID, UNK_ID};
use crate::rng::SplitMix64;

/// Number of ids reserved for class-marker tokens.
pub const CLASS_TOKENS: usize = 16;
pub const DEFAULT_VOCAB: usize = 1000;

const LABEL_SALT: u64 = 0x6c61_6265_6c73;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    fn stream_id(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Dev => 2,
            Split::Test => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub n_classes: usize,
    pub split: Split,
    pub seed: u64,
    /// Label strings for corpora loaded from text, indexed by label id.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub label_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn pairs(&self) -> Vec<(Vec<usize>, usize)> {
        self.examples.iter().map(|e| (e.tokens.clone(), e.label)).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for e in &self.examples {
            counts[e.label] += 1;
        }
        counts
    }

    /// One `{"tokens": [...], "label": k}` object per line.
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            tokens: &'a [usize],
            label: usize,
        }
        for e in &self.examples {
            serde_json::to_writer(&mut out, &Line {
                tokens: &e.tokens,
                label: e.label,
            })?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Shape of a synthetic task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTask {
    pub seq_len: usize,
    pub n_classes: usize,
    pub vocab_size: usize,
    /// Needle positions are strictly greater than this (distance from `[CLS]`).
    pub min_offset: usize,
}

impl SyntheticTask {
    pub fn new(seq_len: usize, n_classes: usize) -> Self {
        Self {
            seq_len,
            n_classes,
            vocab_size: DEFAULT_VOCAB,
            min_offset: seq_len / 4,
        }
    }

    fn validate(&self) -> Result<()> {
        self.validate_shape()?;
        if self.n_classes < 2 || self.n_classes > CLASS_TOKENS {
            return Err(Error::Config(format!(
                "n_classes {} outside 2..={CLASS_TOKENS} (one marker token per class)",
                self.n_classes
            )));
        }
        Ok(())
    }

    fn validate_shape(&self) -> Result<()> {
        if self.seq_len < 16 {
            return Err(Error::Config(format!("seq_len {} < 16", self.seq_len)));
        }
        if self.vocab_size <= FIRST_FREE_ID + CLASS_TOKENS + 1 {
            return Err(Error::Config(format!("vocab_size {} leaves no filler tokens", self.vocab_size)));
        }
        if self.min_offset + 1 >= self.seq_len {
            return Err(Error::Config(format!(
                "min_offset {} leaves no needle positions in seq_len {}",
                self.min_offset, self.seq_len
            )));
        }
        Ok(())
    }

    fn filler(&self, rng: &mut SplitMix64) -> usize {
        let first = FIRST_FREE_ID + CLASS_TOKENS;
        first + rng.below(self.vocab_size - first)
    }
}

pub fn class_token(class: usize) -> usize {
    FIRST_FREE_ID + class
}

/// Class of a class-marker token, if it is one.
pub fn token_class(token: usize) -> Option<usize> {
    (FIRST_FREE_ID..FIRST_FREE_ID + CLASS_TOKENS)
        .contains(&token)
        .then(|| token - FIRST_FREE_ID)
}

/// Balanced labels: each block of `n_classes` consecutive examples is a
/// seeded permutation of all classes.
fn balanced_label(seed: u64, index: usize, n_classes: usize) -> usize {
    let block = index / n_classes;
    let mut perm: Vec<usize> = (0..n_classes).collect();
    SplitMix64::stream(seed ^ LABEL_SALT, block as u64).shuffle(&mut perm);
    perm[index % n_classes]
}

fn split_seed(seed: u64, split: Split) -> u64 {
    SplitMix64::stream(seed, split.stream_id()).next_u64()
}

fn needle_example(task: &SyntheticTask, seed: u64, index: usize) -> Example {
    let label = balanced_label(seed, index, task.n_classes);
    let mut rng = SplitMix64::stream(seed, index as u64);
    let mut tokens = Vec::with_capacity(task.seq_len);
    tokens.push(CLS_ID);
    for _ in 1..task.seq_len {
        tokens.push(task.filler(&mut rng));
    }
    let lo = task.min_offset + 1;
    let pos = lo + rng.below(task.seq_len - lo);
    tokens[pos] = class_token(label);
    Example { tokens, label }
}

fn identify_example(task: &SyntheticTask, seed: u64, index: usize) -> Example {
    let label = balanced_label(seed, index, CLASS_TOKENS + 1);
    let mut rng = SplitMix64::stream(seed, index as u64);
    let mut tokens = Vec::with_capacity(task.seq_len);
    tokens.push(CLS_ID);
    for _ in 1..task.seq_len {
        tokens.push(task.filler(&mut rng));
    }
    if label > 0 {
        let pos = 1 + rng.below(task.seq_len - 1);
        tokens[pos] = class_token(label - 1);
    }
    Example { tokens, label }
}

/// Label of a majority-task sequence: the class whose marker occurs most
/// often, or `None` on a tie or when no marker is present.
pub fn majority_label(tokens: &[usize], n_classes: usize) -> Option<usize> {
    let mut counts = vec![0usize; n_classes];
    for &t in tokens {
        if let Some(c) = token_class(t).filter(|&c| c < n_classes) {
            counts[c] += 1;
        }
    }
    let best = *counts.iter().max()?;
    if best == 0 || counts.iter().filter(|&&c| c == best).count() > 1 {
        return None;
    }
    counts.iter().position(|&c| c == best)
}

fn majority_example(task: &SyntheticTask, seed: u64, index: usize) -> Example {
    let target = balanced_label(seed, index, task.n_classes);
    let mut rng = SplitMix64::stream(seed, index as u64);
    let max_count = (task.seq_len / (2 * task.n_classes)).max(2);
    loop {
        let mut tokens = Vec::with_capacity(task.seq_len);
        tokens.push(CLS_ID);
        for _ in 1..task.seq_len {
            tokens.push(task.filler(&mut rng));
        }
        let mut positions: Vec<usize> = (1..task.seq_len).collect();
        rng.shuffle(&mut positions);
        let mut next = positions.into_iter();
        for class in 0..task.n_classes {
            let count = 1 + rng.below(max_count);
            for _ in 0..count {
                if let Some(p) = next.next() {
                    tokens[p] = class_token(class);
                }
            }
        }
        if majority_label(&tokens, task.n_classes) == Some(target) {
            return Example { tokens, label: target };
        }
    }
}

fn generate(
    task: &SyntheticTask,
    n: usize,
    seed: u64,
    split: Split,
    range: std::ops::Range<usize>,
    make: fn(&SyntheticTask, u64, usize) -> Example,
) -> Result<Dataset> {
    task.validate()?;
    let s = split_seed(seed, split);
    Ok(Dataset {
        examples: range.filter(|&i| i < n).map(|i| make(task, s, i)).collect(),
        n_classes: task.n_classes,
        split,
        seed,
        label_names: Vec::new(),
    })
}

/// Needle task with default vocabulary and `min_offset = seq_len / 4`.
pub fn gen_needle(seq_len: usize, n_classes: usize, n: usize, seed: u64) -> Result<Dataset> {
    gen_needle_split(&SyntheticTask::new(seq_len, n_classes), n, seed, Split::Train)
}

/// Filler tokens with one class marker planted beyond `min_offset`.
pub fn gen_needle_split(task: &SyntheticTask, n: usize, seed: u64, split: Split) -> Result<Dataset> {
    generate(task, n, seed, split, 0..n, needle_example)
}

/// Examples `range` of the split; concatenating shards reproduces the full split.
pub fn gen_needle_shard(task: &SyntheticTask, n: usize, seed: u64, split: Split, range: std::ops::Range<usize>) -> Result<Dataset> {
    generate(task, n, seed, split, range, needle_example)
}

pub fn gen_majority(seq_len: usize, n_classes: usize, n: usize, seed: u64) -> Result<Dataset> {
    gen_majority_split(&SyntheticTask::new(seq_len, n_classes), n, seed, Split::Train)
}

/// Class markers scattered through filler; the most frequent marker wins.
pub fn gen_majority_split(task: &SyntheticTask, n: usize, seed: u64, split: Split) -> Result<Dataset> {
    generate(task, n, seed, split, 0..n, majority_example)
}

/// Marker identification over all [`CLASS_TOKENS`] markers: label 0 means
/// no marker, label `k + 1` means marker `k` sits at a uniform position.
/// `task.n_classes` and `min_offset` are ignored.
pub fn gen_identify_split(task: &SyntheticTask, n: usize, seed: u64, split: Split) -> Result<Dataset> {
    let task = SyntheticTask {
        n_classes: CLASS_TOKENS + 1,
        min_offset: 0,
        ..task.clone()
    };
    task.validate_shape()?;
    let s = split_seed(seed, split);
    Ok(Dataset {
        examples: (0..n).map(|i| identify_example(&task, s, i)).collect(),
        n_classes: task.n_classes,
        split,
        seed,
        label_names: Vec::new(),
    })
}

/// Whitespace tokenizer over a fixed vocabulary file (one token per line).
///
/// Token `k` of the file gets id `FIRST_FREE_ID + k`; anything else maps to
/// the unknown id. Text is lower-cased before splitting.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    vocab: BTreeMap<String, usize>,
    pub max_len: usize,
}

impl Tokenizer {
    pub fn new<I, S>(words: I, max_len: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        if max_len == 0 {
            return Err(Error::Config("tokenizer max_len must be positive".into()));
        }
        let mut vocab = BTreeMap::new();
        for (k, w) in words.into_iter().enumerate() {
            vocab.entry(w.into()).or_insert(FIRST_FREE_ID + k);
        }
        Ok(Self { vocab, max_len })
    }

    pub fn from_file(path: impl AsRef<Path>, max_len: usize) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::new(text.lines().map(str::trim).filter(|l| !l.is_empty()), max_len)
    }

    /// Smallest model vocabulary that covers every id this tokenizer emits.
    pub fn vocab_size(&self) -> usize {
        self.vocab.values().max().map_or(FIRST_FREE_ID, |&m| m + 1)
    }

    /// `[CLS]` followed by token ids, truncated to `max_len` in total.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let lower = text.to_lowercase();
        std::iter::once(CLS_ID)
            .chain(
                lower
                    .split_whitespace()
                    .map(|w| self.vocab.get(w).copied().unwrap_or(UNK_ID)),
            )
            .take(self.max_len)
            .collect()
    }
}

/// Loads a `text,label` CSV. Labels are indexed in sorted order unless
/// `labels` is given, in which case any label outside it is an error.
pub fn load_labeled_text(
    path: impl AsRef<Path>,
    tokenizer: &Tokenizer,
    labels: Option<&[String]>,
    split: Split,
) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path.as_ref())
        .map_err(|e| csv_error(&e))?;
    let headers = reader.headers().map_err(|e| csv_error(&e))?.clone();
    let text_col = headers.iter().position(|h| h == "text");
    let label_col = headers.iter().position(|h| h == "label");
    let (Some(text_col), Some(label_col)) = (text_col, label_col) else {
        return Err(Error::Parse {
            line: 1,
            message: "header must contain `text` and `label`".into(),
        });
    };

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(&e))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != headers.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        rows.push((record[text_col].to_string(), record[label_col].to_string(), line));
    }

    let names: Vec<String> = match labels {
        Some(l) => l.to_vec(),
        None => {
            let set: std::collections::BTreeSet<&str> = rows.iter().map(|(_, l, _)| l.as_str()).collect();
            set.into_iter().map(String::from).collect()
        }
    };
    let examples = rows
        .iter()
        .map(|(text, label, line)| {
            let id = names.iter().position(|n| n == label).ok_or_else(|| {
                Error::Label(format!("unknown label {label:?} at line {line}"))
            })?;
            Ok(Example {
                tokens: tokenizer.encode(text),
                label: id,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        examples,
        n_classes: names.len(),
        split,
        seed: 0,
        label_names: names,
    })
}

fn csv_error(e: &csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn needle_is_deterministic_and_labelled_by_its_marker() {
        let a = gen_needle(64, 4, 200, 7).unwrap();
        assert_eq!(a, gen_needle(64, 4, 200, 7).unwrap());
        assert_ne!(a, gen_needle(64, 4, 200, 8).unwrap());
        for e in &a.examples {
            assert_eq!(e.tokens.len(), 64);
            assert_eq!(e.tokens[0], CLS_ID);
            let markers: Vec<(usize, usize)> = e
                .tokens
                .iter()
                .enumerate()
                .filter_map(|(p, &t)| token_class(t).map(|c| (p, c)))
                .collect();
            assert_eq!(markers.len(), 1);
            assert_eq!(markers[0].1, e.label);
        }
    }

    #[test]
    fn needle_positions_lie_beyond_offset() {
        let task = SyntheticTask {
            min_offset: 32,
            ..SyntheticTask::new(256, 4)
        };
        let data = gen_needle_split(&task, 10_000, 3, Split::Train).unwrap();
        let beyond = data
            .examples
            .iter()
            .filter(|e| e.tokens.iter().position(|&t| token_class(t).is_some()).unwrap() > 32)
            .count();
        assert!(beyond as f64 >= 0.99 * 10_000.0);
        assert_eq!(beyond, 10_000);
    }

    #[test]
    fn too_many_classes_is_a_config_error() {
        assert!(matches!(gen_needle(64, CLASS_TOKENS + 1, 10, 0), Err(Error::Config(_))));
        assert!(matches!(gen_needle(8, 2, 10, 0), Err(Error::Config(_))));
    }

    #[test]
    fn majority_label_cases() {
        let all_one: Vec<usize> = std::iter::once(CLS_ID).chain(std::iter::repeat(class_token(2)).take(20)).collect();
        assert_eq!(majority_label(&all_one, 4), Some(2));
        let tie = vec![CLS_ID, class_token(0), class_token(1)];
        assert_eq!(majority_label(&tie, 2), None);
    }

    #[test]
    fn majority_matches_recount_oracle() {
        let a = gen_majority(64, 3, 1000, 5).unwrap();
        assert_eq!(a, gen_majority(64, 3, 1000, 5).unwrap());
        for e in &a.examples {
            let mut counts = [0usize; 3];
            for &t in &e.tokens {
                if (FIRST_FREE_ID..FIRST_FREE_ID + 3).contains(&t) {
                    counts[t - FIRST_FREE_ID] += 1;
                }
            }
            let best = counts.iter().enumerate().max_by_key(|&(_, c)| *c).unwrap().0;
            assert_eq!(best, e.label);
            assert_eq!(counts.iter().filter(|&&c| c == counts[best]).count(), 1);
        }
    }

    #[test]
    fn splits_are_balanced_and_disjoint() {
        let task = SyntheticTask::new(32, 4);
        let train = gen_needle_split(&task, 1000, 1, Split::Train).unwrap();
        let dev = gen_needle_split(&task, 1000, 1, Split::Dev).unwrap();
        for c in train.class_counts() {
            assert!((c as f64 / 1000.0 - 0.25).abs() <= 0.02);
        }
        let train_set: std::collections::HashSet<_> = train.examples.iter().map(|e| &e.tokens).collect();
        assert!(dev.examples.iter().all(|e| !train_set.contains(&e.tokens)));
    }

    #[test]
    fn shards_concatenate_to_serial() {
        let task = SyntheticTask::new(40, 3);
        let full = gen_needle_split(&task, 50, 9, Split::Dev).unwrap();
        let mut joined = Vec::new();
        for start in (0..50).step_by(16) {
            joined.extend(gen_needle_shard(&task, 50, 9, Split::Dev, start..start + 16).unwrap().examples);
        }
        assert_eq!(joined, full.examples);
    }

    #[test]
    fn identification_labels_name_the_marker() {
        let task = SyntheticTask::new(32, 2);
        let data = gen_identify_split(&task, 340, 4, Split::Train).unwrap();
        assert_eq!(data.n_classes, CLASS_TOKENS + 1);
        assert!(data.class_counts().iter().all(|&c| c == 20));
        for e in &data.examples {
            let markers: Vec<usize> = e.tokens.iter().filter_map(|&t| token_class(t)).collect();
            match e.label {
                0 => assert!(markers.is_empty()),
                k => assert_eq!(markers, vec![k - 1]),
            }
        }
    }

    #[test]
    fn jsonl_export() {
        let data = gen_needle(16, 2, 2, 0).unwrap();
        let mut buf = Vec::new();
        data.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let v: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(v["label"], data.examples[0].label);
        assert_eq!(v["tokens"].as_array().unwrap().len(), 16);
    }

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn csv_loading() {
        let dir = tempfile::tempdir().unwrap();
        let tok = Tokenizer::new(["hello", "world", "foo"], 4).unwrap();
        let path = write(dir.path(), "a.csv", "text,label\nhello world,b\nfoo bar baz qux quux,a\n");
        let data = load_labeled_text(&path, &tok, None, Split::Train).unwrap();
        assert_eq!(data.n_classes, 2);
        assert_eq!(data.label_names, vec!["a", "b"]);
        assert_eq!(data.examples[0].label, 1);
        assert_eq!(data.examples[0].tokens, vec![CLS_ID, FIRST_FREE_ID, FIRST_FREE_ID + 1]);
        assert_eq!(data.examples[1].tokens, vec![CLS_ID, FIRST_FREE_ID + 2, UNK_ID, UNK_ID]);
        assert_eq!(data, load_labeled_text(&path, &tok, None, Split::Train).unwrap());

        let dev = write(dir.path(), "dev.csv", "text,label\nhello,c\n");
        let err = load_labeled_text(&dev, &tok, Some(&data.label_names), Split::Dev).unwrap_err();
        assert!(matches!(err, Error::Label(_)));

        let bad = write(dir.path(), "bad.csv", "text,label\nok,a\nbroken\n");
        match load_labeled_text(&bad, &tok, None, Split::Train) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }
}
