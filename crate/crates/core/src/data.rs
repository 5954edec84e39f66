//! Task datasets: JSONL ingestion, vocabulary, input encoding and the
//! synthetic stand-in tasks.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const SEP: usize = 2;
pub const EOS: usize = 3;
const SPECIALS: [&str; 4] = ["[PAD]", "[UNK]", "[SEP]", "[EOS]"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub id: String,
    pub s1: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s2: Option<String>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    AccF1Mean,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Whitespace vocabulary over `texts`, most frequent first (ties by
    /// lexical order), after the four reserved specials.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for text in texts {
            for w in text.split_whitespace() {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(w, _)| !SPECIALS.contains(w))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w.to_string()))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    /// Rebuilds the lookup table after deserialisation.
    pub fn reindex(&mut self) {
        *self = Self::from_tokens(std::mem::take(&mut self.tokens));
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }
}

/// `[SEP] s1 [EOS]` or `[SEP] s1 [SEP] s2 [EOS]`, right-truncated to `max_len`.
pub fn encode_example(example: &Example, vocab: &Vocab, max_len: usize) -> Result<Vec<usize>> {
    let s1 = vocab.tokenize(&example.s1);
    if s1.is_empty() {
        return Err(Error::EmptySequence);
    }
    if max_len == 0 {
        return Err(Error::Config("encoding budget is zero tokens".into()));
    }
    let mut ids = Vec::with_capacity(s1.len() + 4);
    ids.push(SEP);
    ids.extend(s1);
    if let Some(s2) = &example.s2 {
        ids.push(SEP);
        ids.extend(vocab.tokenize(s2));
    }
    ids.push(EOS);
    ids.truncate(max_len);
    Ok(ids)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub name: String,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
    pub num_classes: usize,
    pub vocab: Vocab,
    pub metric_kind: MetricKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl TaskDataset {
    pub fn new(
        name: impl Into<String>,
        mut train: Vec<Example>,
        mut dev: Vec<Example>,
        mut test: Vec<Example>,
        num_classes: usize,
        metric_kind: MetricKind,
    ) -> Result<Self> {
        let name = name.into();
        if train.is_empty() {
            return Err(Error::NoExamples);
        }
        for (split, examples) in [
            ("train", &mut train),
            ("dev", &mut dev),
            ("test", &mut test),
        ] {
            for (i, e) in examples.iter_mut().enumerate() {
                if e.label >= num_classes {
                    return Err(Error::LabelOutOfRange {
                        label: e.label,
                        num_classes,
                    });
                }
                if e.s1.split_whitespace().next().is_none() {
                    return Err(Error::Config(format!("{split} example {i} has empty s1")));
                }
                if e.id.is_empty() {
                    e.id = format!("{name}/{split}/{i}");
                }
            }
        }
        let mut seen = HashSet::new();
        for e in train.iter().chain(&dev).chain(&test) {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Config(format!("duplicate example id {}", e.id)));
            }
        }
        let observed: HashSet<usize> = train.iter().map(|e| e.label).collect();
        if let Some(missing) = (0..num_classes).find(|c| !observed.contains(c)) {
            return Err(Error::Config(format!(
                "label {missing} never observed in train"
            )));
        }
        let vocab = Vocab::build(
            train
                .iter()
                .flat_map(|e| std::iter::once(e.s1.as_str()).chain(e.s2.as_deref())),
        );
        Ok(Self {
            name,
            train,
            dev,
            test,
            num_classes,
            vocab,
            metric_kind,
        })
    }

    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn example_ids(&self) -> HashSet<&str> {
        self.train
            .iter()
            .chain(&self.dev)
            .chain(&self.test)
            .map(|e| e.id.as_str())
            .collect()
    }

    /// Longest encoded example across all splits, before truncation.
    pub fn max_encoded_len(&self) -> usize {
        self.train
            .iter()
            .chain(&self.dev)
            .chain(&self.test)
            .map(|e| {
                let n2 =
                    e.s2.as_deref()
                        .map_or(0, |s| s.split_whitespace().count() + 1);
                e.s1.split_whitespace().count() + n2 + 2
            })
            .max()
            .unwrap_or(0)
    }

    /// Writes `train.jsonl`, `dev.jsonl`, `test.jsonl` and `manifest.json`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (file, examples) in [
            ("train.jsonl", &self.train),
            ("dev.jsonl", &self.dev),
            ("test.jsonl", &self.test),
        ] {
            let path = dir.join(file);
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            for e in examples {
                let line = serde_json::to_string(e)?;
                writeln!(f, "{line}").map_err(|err| Error::io(&path, err))?;
            }
        }
        let manifest = Manifest {
            name: self.name.clone(),
            num_classes: self.num_classes,
            metric_kind: self.metric_kind,
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    /// Reads a task directory written by [`TaskDataset::write_dir`] (or by hand).
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let train = load_jsonl(&dir.join("train.jsonl"), manifest.num_classes)?;
        let dev = load_jsonl(&dir.join("dev.jsonl"), manifest.num_classes)?;
        let test_path = dir.join("test.jsonl");
        let test = if test_path.exists() {
            load_jsonl(&test_path, manifest.num_classes)?
        } else {
            Vec::new()
        };
        Self::new(
            manifest.name,
            train,
            dev,
            test,
            manifest.num_classes,
            manifest.metric_kind,
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub num_classes: usize,
    pub metric_kind: MetricKind,
}

/// One example per line: `{"s1": .., "s2": .. (optional), "label": ..}`.
pub fn load_jsonl(path: &Path, num_classes: usize) -> Result<Vec<Example>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let e: Example = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if e.label >= num_classes {
            return Err(parse_err(format!(
                "label {} outside 0..{num_classes}",
                e.label
            )));
        }
        if e.s1.trim().is_empty() {
            return Err(parse_err("empty s1".into()));
        }
        out.push(e);
    }
    if out.is_empty() {
        return Err(Error::NoExamples);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Label 1 iff the trigger word appears among distractors.
    Keyword,
    /// Label 1 iff both sentences contain the same marker word.
    PairMatch,
    /// The keyword task with part of the content vocabulary renamed.
    VocabShifted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub seed: u64,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    /// Number of content words (trigger/markers included).
    #[serde(default = "default_content_words")]
    pub content_words: usize,
    #[serde(default = "default_min_len")]
    pub min_len: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    /// Fraction of content words shared with the keyword task (vocab_shifted only).
    #[serde(default = "default_overlap")]
    pub overlap: f64,
}

fn default_content_words() -> usize {
    24
}
fn default_min_len() -> usize {
    4
}
fn default_max_len() -> usize {
    8
}
fn default_overlap() -> f64 {
    0.5
}

impl SyntheticSpec {
    pub fn new(kind: SyntheticKind, seed: u64, train: usize, dev: usize, test: usize) -> Self {
        Self {
            kind,
            seed,
            train,
            dev,
            test,
            content_words: default_content_words(),
            min_len: default_min_len(),
            max_len: default_max_len(),
            overlap: default_overlap(),
        }
    }

    pub fn with_overlap(mut self, overlap: f64) -> Self {
        self.overlap = overlap;
        self
    }
}

/// Number of pair-match marker words.
const PAIR_MARKERS: usize = 4;

/// Content word `i` as spelled in the keyword task.
pub fn content_word(i: usize) -> String {
    format!("w{i:03}")
}

fn shifted_word(i: usize, shared: usize) -> String {
    if i < shared {
        content_word(i)
    } else {
        format!("v{i:03}")
    }
}

/// Word id sequences per example, independent of spelling.
fn keyword_sentence(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, label: usize) -> Vec<usize> {
    let len = rng.random_range(spec.min_len..=spec.max_len);
    let mut words: Vec<usize> = (0..len)
        .map(|_| rng.random_range(1..spec.content_words))
        .collect();
    if label == 1 {
        let pos = rng.random_range(0..len);
        words[pos] = 0;
    }
    words
}

fn pair_sentences(
    rng: &mut ChaCha8Rng,
    spec: &SyntheticSpec,
    label: usize,
) -> (Vec<usize>, Vec<usize>) {
    let filler = |rng: &mut ChaCha8Rng| {
        let len = rng.random_range(spec.min_len.saturating_sub(1).max(1)..spec.max_len.max(2));
        (0..len)
            .map(|_| rng.random_range(PAIR_MARKERS..spec.content_words))
            .collect::<Vec<_>>()
    };
    let mut a = filler(rng);
    let mut b = filler(rng);
    let (ma, mb) = if label == 1 {
        let m = rng.random_range(0..PAIR_MARKERS);
        (m, m)
    } else {
        let m = rng.random_range(0..PAIR_MARKERS);
        let other = (m + rng.random_range(1..PAIR_MARKERS)) % PAIR_MARKERS;
        (m, other)
    };
    let pa = rng.random_range(0..=a.len());
    a.insert(pa, ma);
    let pb = rng.random_range(0..=b.len());
    b.insert(pb, mb);
    (a, b)
}

/// Deterministic, label-balanced synthetic task. Examples are unique across
/// all splits.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<TaskDataset> {
    if spec.train == 0 || spec.dev == 0 || spec.test == 0 {
        return Err(Error::Config("synthetic split sizes must be >= 1".into()));
    }
    let min_words = match spec.kind {
        SyntheticKind::PairMatch => PAIR_MARKERS + 2,
        _ => 3,
    };
    if spec.content_words < min_words || spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::Config(format!("degenerate synthetic spec {spec:?}")));
    }
    if !(0.0..=1.0).contains(&spec.overlap) {
        return Err(Error::Config(format!(
            "overlap {} outside [0, 1]",
            spec.overlap
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shared = (spec.overlap * spec.content_words as f64).round() as usize;
    let spell = |ids: &[usize]| -> String {
        ids.iter()
            .map(|&i| match spec.kind {
                SyntheticKind::VocabShifted => shifted_word(i, shared),
                _ => content_word(i),
            })
            .collect::<Vec<_>>()
            .join(" ")
    };
    let name = match spec.kind {
        SyntheticKind::Keyword => "keyword".to_string(),
        SyntheticKind::PairMatch => "pair_match".to_string(),
        SyntheticKind::VocabShifted => format!("vocab_shifted_{:.2}", spec.overlap),
    };

    let mut seen: HashSet<(Vec<usize>, Vec<usize>)> = HashSet::new();
    let mut splits = Vec::with_capacity(3);
    for (split, size) in [
        ("train", spec.train),
        ("dev", spec.dev),
        ("test", spec.test),
    ] {
        let mut labels: Vec<usize> = (0..size).map(|i| i % 2).collect();
        labels.shuffle(&mut rng);
        let mut examples = Vec::with_capacity(size);
        for (i, label) in labels.into_iter().enumerate() {
            let mut attempts = 0;
            let (a, b) = loop {
                let cand = match spec.kind {
                    SyntheticKind::PairMatch => pair_sentences(&mut rng, spec, label),
                    _ => (keyword_sentence(&mut rng, spec, label), Vec::new()),
                };
                if seen.insert(cand.clone()) {
                    break cand;
                }
                attempts += 1;
                if attempts > 10_000 {
                    return Err(Error::Config(
                        "synthetic space too small for the requested sizes".into(),
                    ));
                }
            };
            examples.push(Example {
                id: format!("{name}/{split}/{i}"),
                s1: spell(&a),
                s2: (!b.is_empty()).then(|| spell(&b)),
                label,
            });
        }
        splits.push(examples);
    }
    let test = splits.pop().unwrap_or_default();
    let dev = splits.pop().unwrap_or_default();
    let train = splits.pop().unwrap_or_default();
    let metric_kind = match spec.kind {
        SyntheticKind::PairMatch => MetricKind::AccF1Mean,
        _ => MetricKind::Accuracy,
    };
    TaskDataset::new(name, train, dev, test, 2, metric_kind)
}

/// Ground-truth rule for a synthetic example, from the surface text.
pub fn synthetic_rule(kind: SyntheticKind, example: &Example) -> usize {
    match kind {
        SyntheticKind::Keyword | SyntheticKind::VocabShifted => {
            usize::from(example.s1.split_whitespace().any(|w| w == content_word(0)))
        }
        SyntheticKind::PairMatch => {
            let markers: BTreeMap<String, ()> =
                (0..PAIR_MARKERS).map(|i| (content_word(i), ())).collect();
            let a: HashSet<&str> = example
                .s1
                .split_whitespace()
                .filter(|w| markers.contains_key(*w))
                .collect();
            let hit = example
                .s2
                .as_deref()
                .unwrap_or("")
                .split_whitespace()
                .any(|w| a.contains(w));
            usize::from(hit)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(words: &[&str]) -> Vocab {
        Vocab::build(words.iter().copied())
    }

    #[test]
    fn encode_single_and_pair() {
        let v = vocab(&["a b"]);
        let (a, b) = (v.id("a"), v.id("b"));
        let single = Example {
            id: String::new(),
            s1: "a b".into(),
            s2: None,
            label: 0,
        };
        assert_eq!(
            encode_example(&single, &v, 32).unwrap(),
            vec![SEP, a, b, EOS]
        );
        let pair = Example {
            s1: "a".into(),
            s2: Some("b".into()),
            ..single.clone()
        };
        assert_eq!(
            encode_example(&pair, &v, 32).unwrap(),
            vec![SEP, a, SEP, b, EOS]
        );
    }

    #[test]
    fn encode_truncates_from_the_right() {
        let v = vocab(&["a b c d e f g"]);
        let e = Example {
            id: String::new(),
            s1: "a b c d e f g".into(),
            s2: None,
            label: 0,
        };
        let ids = encode_example(&e, &v, 5).unwrap();
        assert_eq!(ids.len(), 5);
        assert_eq!(ids[..2], [SEP, v.id("a")]);
    }

    #[test]
    fn encode_rejects_empty() {
        let v = vocab(&["a"]);
        let e = Example {
            id: String::new(),
            s1: "   ".into(),
            s2: None,
            label: 0,
        };
        assert!(encode_example(&e, &v, 8).is_err());
    }

    #[test]
    fn oov_maps_to_unk() {
        let v = vocab(&["a a b"]);
        assert_eq!(v.id("zzz"), UNK);
        // frequency order: a before b
        assert!(v.id("a") < v.id("b"));
        assert_eq!(v.token(SEP), Some("[SEP]"));
    }

    #[test]
    fn synthetic_is_balanced_deterministic_and_solvable() {
        for kind in [
            SyntheticKind::Keyword,
            SyntheticKind::PairMatch,
            SyntheticKind::VocabShifted,
        ] {
            let spec = SyntheticSpec::new(kind, 7, 512, 128, 128);
            let d = make_synthetic(&spec).unwrap();
            assert_eq!(d, make_synthetic(&spec).unwrap());
            for split in [&d.train, &d.dev, &d.test] {
                let ones = split.iter().filter(|e| e.label == 1).count() as i64;
                assert!((2 * ones - split.len() as i64).abs() <= 1);
                assert!(split.iter().all(|e| synthetic_rule(kind, e) == e.label));
            }
        }
    }

    #[test]
    fn vocab_shifted_shares_exactly_the_overlap() {
        let words = |d: &TaskDataset| -> HashSet<String> {
            d.train
                .iter()
                .chain(&d.dev)
                .chain(&d.test)
                .flat_map(|e| {
                    e.s1.split_whitespace()
                        .map(str::to_string)
                        .collect::<Vec<_>>()
                })
                .collect()
        };
        let kw = make_synthetic(&SyntheticSpec::new(
            SyntheticKind::Keyword,
            7,
            512,
            128,
            128,
        ))
        .unwrap();
        let shifted = make_synthetic(
            &SyntheticSpec::new(SyntheticKind::VocabShifted, 7, 512, 128, 128).with_overlap(0.5),
        )
        .unwrap();
        let (a, b) = (words(&kw), words(&shifted));
        assert_eq!(a.len(), 24);
        assert_eq!(a.intersection(&b).count(), 12);

        let same = make_synthetic(
            &SyntheticSpec::new(SyntheticKind::VocabShifted, 7, 512, 128, 128).with_overlap(1.0),
        )
        .unwrap();
        let strip = |d: &TaskDataset| {
            d.dev
                .iter()
                .map(|e| (e.s1.clone(), e.label))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&same), strip(&kw));
        assert!(kw.example_ids().is_disjoint(&same.example_ids()));
    }

    #[test]
    fn dataset_validates_labels() {
        let e = |label| Example {
            id: String::new(),
            s1: "x".into(),
            s2: None,
            label,
        };
        assert!(TaskDataset::new(
            "t",
            vec![e(0), e(1)],
            vec![],
            vec![],
            2,
            MetricKind::Accuracy
        )
        .is_ok());
        assert!(TaskDataset::new(
            "t",
            vec![e(0), e(2)],
            vec![],
            vec![],
            2,
            MetricKind::Accuracy
        )
        .is_err());
        assert!(TaskDataset::new(
            "t",
            vec![e(0), e(0)],
            vec![],
            vec![],
            2,
            MetricKind::Accuracy
        )
        .is_err());
        assert!(matches!(
            TaskDataset::new("t", vec![], vec![], vec![], 2, MetricKind::Accuracy),
            Err(Error::NoExamples)
        ));
    }
}
