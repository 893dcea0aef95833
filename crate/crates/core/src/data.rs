//! Vocabulary, corpus files, seeded synthetic tasks and batching.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const BLANK: usize = 4;
pub const RESERVED: [&str; 5] = ["<pad>", "<s>", "</s>", "<unk>", "<blank>"];

/// Token ↔ id bijection. Ids `0..5` are the reserved symbols; text tokens
/// follow in file order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// `text_tokens` must be unique and must not collide with a reserved
    /// symbol.
    pub fn from_text_tokens<S: AsRef<str>>(text_tokens: &[S]) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(text_tokens.iter().map(|s| s.as_ref().to_string()));
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Corpus(format!("invalid vocabulary token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Corpus(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Frequency-ranked vocabulary over both sides of `corpus`, ties broken
    /// lexicographically. `max_size` bounds the total size including the
    /// reserved symbols.
    pub fn build(corpus: &ParallelCorpus, max_size: Option<usize>) -> Result<Self> {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for pair in &corpus.pairs {
            for t in pair.src.iter().chain(&pair.tgt) {
                if !RESERVED.contains(&t.as_str()) {
                    *counts.entry(t.as_str()).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let keep = max_size.map_or(ranked.len(), |m| m.saturating_sub(RESERVED.len()));
        let text: Vec<&str> = ranked.into_iter().take(keep).map(|(t, _)| t).collect();
        Self::from_text_tokens(&text)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    pub fn text_tokens(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    /// One text token per line; id = reserved count + line index.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = self.text_tokens().join("\n");
        out.push('\n');
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
        Self::from_text_tokens(&tokens)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub pairs: Vec<SentencePair>,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> Vec<Vec<String>> {
        self.pairs.iter().map(|p| p.src.clone()).collect()
    }

    pub fn targets(&self) -> Vec<Vec<String>> {
        self.pairs.iter().map(|p| p.tgt.clone()).collect()
    }

    pub fn encode(&self, vocab: &Vocab) -> Vec<EncodedPair> {
        self.pairs
            .iter()
            .map(|p| EncodedPair {
                src: vocab.encode(&p.src),
                tgt: vocab.encode(&p.tgt),
            })
            .collect()
    }

    /// Writes `<stem>.src` and `<stem>.tgt` next to each other.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let src: Vec<String> = self.pairs.iter().map(|p| p.src.join(" ")).collect();
        let tgt: Vec<String> = self.pairs.iter().map(|p| p.tgt.join(" ")).collect();
        write_lines(&dir.join(format!("{stem}.src")), &src)?;
        write_lines(&dir.join(format!("{stem}.tgt")), &tgt)
    }

    /// Number of distinct targets for each source that occurs more than
    /// once, keyed by the source line.
    pub fn targets_per_repeated_source(&self) -> HashMap<String, usize> {
        let mut seen: HashMap<String, (usize, Vec<String>)> = HashMap::new();
        for p in &self.pairs {
            let entry = seen.entry(p.src.join(" ")).or_default();
            entry.0 += 1;
            let t = p.tgt.join(" ");
            if !entry.1.contains(&t) {
                entry.1.push(t);
            }
        }
        seen.into_iter()
            .filter(|(_, (n, _))| *n > 1)
            .map(|(s, (_, ts))| (s, ts.len()))
            .collect()
    }
}

pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut out = lines.join("\n");
    if !lines.is_empty() {
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_string).collect()
}

/// Reads two aligned files. Pairs with an empty side are skipped with a
/// warning.
pub fn load_corpus(src_path: &Path, tgt_path: &Path) -> Result<ParallelCorpus> {
    let src = read_lines(src_path)?;
    let tgt = read_lines(tgt_path)?;
    if src.len() != tgt.len() {
        return Err(Error::Corpus(format!(
            "line count mismatch: {} has {} lines, {} has {}",
            src_path.display(),
            src.len(),
            tgt_path.display(),
            tgt.len()
        )));
    }
    let mut pairs = Vec::with_capacity(src.len());
    for (i, (s, t)) in src.iter().zip(&tgt).enumerate() {
        let (s, t) = (tokenize(s), tokenize(t));
        if s.is_empty() || t.is_empty() {
            log::warn!("skipping empty line {} of {}", i + 1, src_path.display());
            continue;
        }
        pairs.push(SentencePair { src: s, tgt: t });
    }
    Ok(ParallelCorpus { pairs })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Copy,
    Reverse,
    TwoModeReorder,
    ToyTranslation,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Task::Copy),
            "reverse" => Ok(Task::Reverse),
            "two_mode_reorder" => Ok(Task::TwoModeReorder),
            "toy_translation" => Ok(Task::ToyTranslation),
            other => Err(Error::Config(format!(
                "unknown task `{other}` (expected copy, reverse, two_mode_reorder, toy_translation)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTaskSpec {
    pub task: Task,
    /// Total vocabulary size, reserved symbols included.
    pub vocab_size: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub n_pairs: usize,
    pub seed: u64,
    /// Each distinct source is emitted this many times (with independently
    /// drawn targets), so repeated-source statistics are observable.
    pub source_repeats: usize,
}

impl SyntheticTaskSpec {
    pub fn new(task: Task, vocab_size: usize, n_pairs: usize, seed: u64) -> Self {
        SyntheticTaskSpec {
            task,
            vocab_size,
            len_min: 4,
            len_max: 16,
            n_pairs,
            seed,
            source_repeats: 1,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.vocab_size <= RESERVED.len() {
            return Err(Error::Config(format!(
                "vocab_size {} must exceed the {} reserved symbols",
                self.vocab_size,
                RESERVED.len()
            )));
        }
        if self.vocab_size - RESERVED.len() < 3 {
            return Err(Error::Config(
                "synthetic tasks need at least 3 text tokens".into(),
            ));
        }
        if self.len_min < 2 || self.len_min > self.len_max {
            return Err(Error::Config(format!(
                "length range [{}, {}] invalid (minimum 2)",
                self.len_min, self.len_max
            )));
        }
        if self.source_repeats == 0 {
            return Err(Error::Config("source_repeats must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn text_token(i: usize) -> String {
    format!("w{i}")
}

/// The task's fixed token substitution. Depends only on the vocabulary
/// size, so every split of a task shares it.
pub fn substitution(n_text: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n_text).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_7a5c ^ n_text as u64);
    perm.shuffle(&mut rng);
    perm
}

/// Source sentence with no two cyclically adjacent equal tokens, so the
/// reference side never contains repeats (not even across the
/// half-swap boundary of `two_mode_reorder`).
fn sample_source(rng: &mut ChaCha8Rng, n_text: usize, len: usize) -> Vec<usize> {
    let mut s = Vec::with_capacity(len);
    s.push(rng.gen_range(0..n_text));
    for i in 1..len {
        let prev = s[i - 1];
        loop {
            let t = rng.gen_range(0..n_text);
            let closes_cycle = i == len - 1 && t == s[0];
            if t != prev && !closes_cycle {
                s.push(t);
                break;
            }
        }
    }
    s
}

/// Generates a parallel corpus; a pure function of `spec`.
pub fn generate(spec: &SyntheticTaskSpec) -> Result<ParallelCorpus> {
    spec.validate()?;
    let n_text = spec.vocab_size - RESERVED.len();
    let sub = substitution(n_text);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_unique = spec.n_pairs.div_ceil(spec.source_repeats);
    let mut pairs = Vec::with_capacity(spec.n_pairs);
    'outer: for _ in 0..n_unique {
        let len = rng.gen_range(spec.len_min..=spec.len_max);
        let src = sample_source(&mut rng, n_text, len);
        for _ in 0..spec.source_repeats {
            if pairs.len() == spec.n_pairs {
                break 'outer;
            }
            let mapped: Vec<usize> = src.iter().map(|&t| sub[t]).collect();
            let tgt = match spec.task {
                Task::Copy => src.clone(),
                Task::Reverse => src.iter().rev().copied().collect(),
                Task::TwoModeReorder => {
                    if rng.gen_bool(0.5) {
                        let h = mapped.len() / 2;
                        mapped[h..].iter().chain(&mapped[..h]).copied().collect()
                    } else {
                        mapped
                    }
                }
                Task::ToyTranslation => {
                    let mut out = mapped;
                    for chunk in out.chunks_mut(2) {
                        chunk.reverse();
                    }
                    out
                }
            };
            pairs.push(SentencePair {
                src: src.iter().map(|&t| text_token(t)).collect(),
                tgt: tgt.iter().map(|&t| text_token(t)).collect(),
            });
        }
    }
    pairs.shuffle(&mut rng);

    let unrepresentable = pairs
        .iter()
        .filter(|p| ctc_min_frames(&p.tgt) > 2 * p.src.len())
        .count();
    if unrepresentable * 100 >= pairs.len().max(1) {
        return Err(Error::Corpus(format!(
            "{unrepresentable} of {} generated targets cannot be aligned with upsample factor 2",
            pairs.len()
        )));
    }
    Ok(ParallelCorpus { pairs })
}

/// Frames needed to emit `tgt` under CTC: one per token plus a blank
/// between each adjacent repeat.
pub fn ctc_min_frames<T: PartialEq>(tgt: &[T]) -> usize {
    tgt.len() + tgt.windows(2).filter(|w| w[0] == w[1]).count()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

/// A padded minibatch. Rows are stored unpadded; the accessors pad with
/// [`PAD`] to the batch maximum.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub src: Vec<Vec<usize>>,
    pub tgt: Vec<Vec<usize>>,
}

impl Batch {
    pub fn new(pairs: &[EncodedPair]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        if pairs.iter().any(|p| p.src.is_empty()) {
            return Err(Error::contract("empty source sentence"));
        }
        Ok(Batch {
            src: pairs.iter().map(|p| p.src.clone()).collect(),
            tgt: pairs.iter().map(|p| p.tgt.clone()).collect(),
        })
    }

    pub fn from_sources(src: &[Vec<usize>]) -> Result<Self> {
        if src.is_empty() || src.iter().any(Vec::is_empty) {
            return Err(Error::contract("empty source batch or sentence"));
        }
        Ok(Batch {
            src: src.to_vec(),
            tgt: vec![Vec::new(); src.len()],
        })
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn src_lens(&self) -> Vec<usize> {
        self.src.iter().map(Vec::len).collect()
    }

    pub fn tgt_lens(&self) -> Vec<usize> {
        self.tgt.iter().map(Vec::len).collect()
    }

    pub fn max_src(&self) -> usize {
        self.src.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn max_tgt(&self) -> usize {
        self.tgt.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn padded_src(&self) -> Vec<usize> {
        pad_rows(&self.src, self.max_src())
    }

    pub fn padded_tgt(&self) -> Vec<usize> {
        pad_rows(&self.tgt, self.max_tgt())
    }

    /// Row-validity mask of the padded target matrix.
    pub fn tgt_mask(&self) -> Vec<bool> {
        let n = self.max_tgt();
        self.tgt
            .iter()
            .flat_map(|t| (0..n).map(move |j| j < t.len()))
            .collect()
    }

    pub fn subset(&self, keep: &[usize]) -> Batch {
        Batch {
            src: keep.iter().map(|&i| self.src[i].clone()).collect(),
            tgt: keep.iter().map(|&i| self.tgt[i].clone()).collect(),
        }
    }
}

pub fn pad_rows(rows: &[Vec<usize>], width: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(rows.len() * width);
    for r in rows {
        out.extend_from_slice(r);
        out.extend(std::iter::repeat_n(PAD, width - r.len()));
    }
    out
}

/// Token-budget batches over length-sorted data, reshuffled every epoch.
pub struct Batcher {
    pairs: Vec<EncodedPair>,
    max_tokens: usize,
    rng: ChaCha8Rng,
    queue: Vec<Vec<usize>>,
    epoch: usize,
}

impl Batcher {
    pub fn new(pairs: Vec<EncodedPair>, max_tokens: usize, rng: ChaCha8Rng) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Corpus("no training pairs".into()));
        }
        Ok(Batcher {
            pairs,
            max_tokens: max_tokens.max(1),
            rng,
            queue: Vec::new(),
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    fn refill(&mut self) {
        let mut order: Vec<usize> = (0..self.pairs.len()).collect();
        order.shuffle(&mut self.rng);
        order.sort_by_key(|&i| (self.pairs[i].src.len(), self.pairs[i].tgt.len()));
        let mut batches = Vec::new();
        let mut current: Vec<usize> = Vec::new();
        let mut width = 0;
        for i in order {
            let w = self.pairs[i].src.len().max(self.pairs[i].tgt.len());
            let new_width = width.max(w);
            if !current.is_empty() && new_width * (current.len() + 1) > self.max_tokens {
                batches.push(std::mem::take(&mut current));
                width = w;
            } else {
                width = new_width;
            }
            current.push(i);
        }
        if !current.is_empty() {
            batches.push(current);
        }
        batches.shuffle(&mut self.rng);
        batches.reverse();
        self.queue = batches;
        self.epoch += 1;
    }

    pub fn next_batch(&mut self) -> Batch {
        if self.queue.is_empty() {
            self.refill();
        }
        let idx = self
            .queue
            .pop()
            .expect("refill produces at least one batch");
        Batch {
            src: idx.iter().map(|&i| self.pairs[i].src.clone()).collect(),
            tgt: idx.iter().map(|&i| self.pairs[i].tgt.clone()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(task: Task) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            source_repeats: 3,
            ..SyntheticTaskSpec::new(task, 32, 600, 17)
        }
    }

    #[test]
    fn reserved_ids_are_stable() {
        let v = Vocab::from_text_tokens(&["x", "y"]).unwrap();
        assert_eq!(v.id("<pad>"), PAD);
        assert_eq!(v.id("<s>"), BOS);
        assert_eq!(v.id("</s>"), EOS);
        assert_eq!(v.id("<unk>"), UNK);
        assert_eq!(v.id("<blank>"), BLANK);
        assert_eq!(v.id("x"), 5);
        assert_eq!(v.id("zzz"), UNK);
    }

    #[test]
    fn vocab_round_trip_and_ranking() {
        let corpus = ParallelCorpus {
            pairs: vec![SentencePair {
                src: tokenize("b a c a"),
                tgt: tokenize("c b a"),
            }],
        };
        let v = Vocab::build(&corpus, None).unwrap();
        assert_eq!(v.text_tokens(), &["a", "b", "c"]);
        let s = tokenize("c a b");
        assert_eq!(v.decode(&v.encode(&s)), s);
        let small = Vocab::build(&corpus, Some(6)).unwrap();
        assert_eq!(small.text_tokens(), &["a"]);
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = Vocab::from_text_tokens(&["q", "r", "s"]).unwrap();
        let path = dir.path().join("vocab.txt");
        v.write(&path).unwrap();
        assert_eq!(Vocab::read(&path).unwrap(), v);
    }

    #[test]
    fn copy_and_reverse_tasks() {
        let c = generate(&spec(Task::Copy)).unwrap();
        assert!(c.pairs.iter().all(|p| p.src == p.tgt));
        let r = generate(&spec(Task::Reverse)).unwrap();
        assert!(r.pairs.iter().all(|p| p.src.iter().rev().eq(p.tgt.iter())));
        assert!(c.pairs.iter().all(|p| (4..=16).contains(&p.src.len())));
    }

    #[test]
    fn two_mode_has_at_most_two_targets_per_source() {
        let c = generate(&spec(Task::TwoModeReorder)).unwrap();
        let per = c.targets_per_repeated_source();
        assert!(!per.is_empty());
        assert!(per.values().all(|&k| (1..=2).contains(&k)));
        assert!(per.values().any(|&k| k == 2));
    }

    #[test]
    fn toy_translation_is_single_valued() {
        let c = generate(&spec(Task::ToyTranslation)).unwrap();
        assert!(c.targets_per_repeated_source().values().all(|&k| k == 1));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&spec(Task::TwoModeReorder)).unwrap();
        let b = generate(&spec(Task::TwoModeReorder)).unwrap();
        assert_eq!(a, b);
        let mut other = spec(Task::TwoModeReorder);
        other.seed += 1;
        assert_ne!(a, generate(&other).unwrap());
    }

    #[test]
    fn tiny_vocab_is_config_error() {
        let s = SyntheticTaskSpec::new(Task::Copy, 5, 10, 0);
        assert!(matches!(generate(&s), Err(Error::Config(_))));
    }

    #[test]
    fn references_have_no_adjacent_repeats() {
        let c = generate(&spec(Task::TwoModeReorder)).unwrap();
        assert!(c
            .pairs
            .iter()
            .all(|p| p.tgt.windows(2).all(|w| w[0] != w[1])));
    }

    #[test]
    fn load_corpus_checks_line_counts_and_skips_empty_lines() {
        let dir = tempfile::tempdir().unwrap();
        let s = dir.path().join("a.src");
        let t = dir.path().join("a.tgt");
        fs::write(&s, "x y\n\nz\n").unwrap();
        fs::write(&t, "y x\nq\nz\n").unwrap();
        let c = load_corpus(&s, &t).unwrap();
        assert_eq!(c.len(), 2);
        fs::write(&t, "y x\n").unwrap();
        let err = load_corpus(&s, &t).unwrap_err().to_string();
        assert!(err.contains('3') && err.contains('1'), "{err}");
        let missing = load_corpus(&dir.path().join("nope.src"), &t)
            .unwrap_err()
            .to_string();
        assert!(missing.contains("nope.src"));
    }

    #[test]
    fn batcher_respects_budget_and_covers_epoch() {
        let pairs: Vec<EncodedPair> = (0..50)
            .map(|i| EncodedPair {
                src: vec![5; 2 + i % 7],
                tgt: vec![6; 2 + i % 5],
            })
            .collect();
        let mut b = Batcher::new(pairs, 40, ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut seen = 0;
        while b.epoch() <= 1 && seen < 50 {
            let batch = b.next_batch();
            let w = batch.max_src().max(batch.max_tgt());
            assert!(batch.len() == 1 || w * batch.len() <= 40);
            seen += batch.len();
        }
        assert_eq!(seen, 50);
    }

    #[test]
    fn batch_padding() {
        let b = Batch::new(&[
            EncodedPair {
                src: vec![5, 6],
                tgt: vec![7],
            },
            EncodedPair {
                src: vec![8],
                tgt: vec![9, 10],
            },
        ])
        .unwrap();
        assert_eq!(b.padded_src(), vec![5, 6, 8, PAD]);
        assert_eq!(b.tgt_mask(), vec![true, false, true, true]);
    }
}
