//! Corpus ingestion (byte- or word-level), contiguous-chunk batching and
//! evaluation segmentation.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Tokenization;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SPLIT_FRACS: [f64; 3] = [0.90, 0.05, 0.05];

/// Dense id assignment for the symbols that occur in the corpus.
#[derive(Clone, Debug, PartialEq)]
pub enum Vocab {
    /// `symbols[id]` is the byte for `id`.
    Bytes {
        symbols: Vec<u8>,
        separator: Option<u32>,
    },
    /// `words[id]`; id 0 is the unknown-word token.
    Words {
        words: Vec<String>,
        separator: Option<u32>,
    },
}

pub const UNK: &str = "<unk>";
pub const SEP: &str = "<s>";

impl Vocab {
    pub fn len(&self) -> usize {
        let (n, sep) = match self {
            Vocab::Bytes { symbols, separator } => (symbols.len(), separator),
            Vocab::Words { words, separator } => (words.len(), separator),
        };
        n + usize::from(sep.is_some())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn separator(&self) -> Option<u32> {
        match self {
            Vocab::Bytes { separator, .. } | Vocab::Words { separator, .. } => *separator,
        }
    }

    /// Maps raw bytes to ids (byte vocabularies only).
    pub fn encode_bytes(&self, bytes: &[u8]) -> Result<Vec<u32>> {
        let Vocab::Bytes { symbols, .. } = self else {
            return Err(Error::Data("byte encoding needs a byte vocabulary".into()));
        };
        let mut table = [u32::MAX; 256];
        for (id, &b) in symbols.iter().enumerate() {
            table[b as usize] = id as u32;
        }
        bytes
            .iter()
            .map(|&b| match table[b as usize] {
                u32::MAX => Err(Error::Data(format!(
                    "byte {b:#04x} is not in the vocabulary"
                ))),
                id => Ok(id),
            })
            .collect()
    }

    /// Inverse mapping; the separator decodes to a newline.
    pub fn decode(&self, ids: &[u32]) -> Vec<u8> {
        let mut out = Vec::new();
        for &id in ids {
            if Some(id) == self.separator() {
                out.push(b'\n');
                continue;
            }
            match self {
                Vocab::Bytes { symbols, .. } => out.extend(symbols.get(id as usize)),
                Vocab::Words { words, .. } => {
                    if !out.is_empty() {
                        out.push(b' ');
                    }
                    out.extend_from_slice(
                        words
                            .get(id as usize)
                            .map_or(UNK, |w| w.as_str())
                            .as_bytes(),
                    );
                }
            }
        }
        out
    }
}

/// Checkpoint records describing a byte vocabulary; word vocabularies are
/// not stored.
pub fn vocab_records(vocab: &Vocab) -> Vec<(String, Tensor<f32>)> {
    let Vocab::Bytes { symbols, separator } = vocab else {
        return Vec::new();
    };
    let mut out = vec![(
        "vocab.bytes".to_string(),
        Tensor::from_fn([symbols.len()], |i| symbols[i] as f32),
    )];
    if let Some(s) = separator {
        out.push(("vocab.separator".to_string(), Tensor::full([1], *s as f32)));
    }
    out
}

pub fn vocab_from_records(records: &[(String, Tensor<f32>)]) -> Option<Vocab> {
    let find = |name: &str| records.iter().find(|(n, _)| n == name).map(|(_, t)| t);
    let symbols = find("vocab.bytes")?
        .data()
        .iter()
        .map(|&v| v as u8)
        .collect();
    let separator = find("vocab.separator").map(|t| t.item() as u32);
    Some(Vocab::Bytes { symbols, separator })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<u32>,
    pub dev: Vec<u32>,
    pub test: Vec<u32>,
    pub vocab: Vocab,
}

#[derive(Clone, Debug)]
pub struct IngestOptions {
    pub tokenization: Tokenization,
    pub split_fracs: [f64; 3],
    /// Word mode: keep at most this many ids, including `<unk>`.
    pub word_vocab_cap: usize,
    /// Shuffle newline-separated documents with this seed and join them
    /// with a reserved separator id.
    pub shuffle_docs: Option<u64>,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            tokenization: Tokenization::Byte,
            split_fracs: SPLIT_FRACS,
            word_vocab_cap: 10_000,
            shuffle_docs: None,
        }
    }
}

pub fn ingest(path: &Path, opts: &IngestOptions) -> Result<Corpus> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ingest_bytes(&bytes, opts)
}

fn split_points(n: usize, fracs: [f64; 3]) -> Result<(usize, usize)> {
    let total: f64 = fracs.iter().sum();
    if fracs.iter().any(|f| *f <= 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Data(format!(
            "split fractions {fracs:?} must be positive and sum to 1"
        )));
    }
    let n_train = (n as f64 * fracs[0]).round() as usize;
    let n_dev = (n as f64 * fracs[1]).round() as usize;
    if n_train == 0 || n_dev == 0 || n_train + n_dev >= n {
        return Err(Error::Data(format!(
            "corpus of {n} tokens leaves an empty split"
        )));
    }
    Ok((n_train, n_train + n_dev))
}

fn split(ids: Vec<u32>, fracs: [f64; 3], vocab: Vocab) -> Result<Corpus> {
    let (a, b) = split_points(ids.len(), fracs)?;
    Ok(Corpus {
        test: ids[b..].to_vec(),
        dev: ids[a..b].to_vec(),
        train: {
            let mut ids = ids;
            ids.truncate(a);
            ids
        },
        vocab,
    })
}

fn documents(bytes: &[u8], seed: u64) -> Vec<&[u8]> {
    let mut docs: Vec<&[u8]> = bytes
        .split(|&b| b == b'\n')
        .filter(|d| !d.is_empty())
        .collect();
    docs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    docs
}

pub fn ingest_bytes(bytes: &[u8], opts: &IngestOptions) -> Result<Corpus> {
    if bytes.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    match opts.tokenization {
        Tokenization::Byte => {
            let mut seen = [false; 256];
            bytes.iter().for_each(|&b| seen[b as usize] = true);
            let docs = opts.shuffle_docs.map(|seed| documents(bytes, seed));
            if docs.is_some() {
                // Newlines are replaced by the separator id.
                seen[b'\n' as usize] = false;
            }
            let symbols: Vec<u8> = (0..=255u8).filter(|&b| seen[b as usize]).collect();
            let separator = docs.as_ref().map(|_| symbols.len() as u32);
            let vocab = Vocab::Bytes { symbols, separator };
            let ids = match docs {
                None => vocab.encode_bytes(bytes)?,
                Some(docs) => {
                    let mut ids = Vec::with_capacity(bytes.len());
                    for (i, d) in docs.iter().enumerate() {
                        if i > 0 {
                            ids.push(separator.expect("set with docs"));
                        }
                        ids.extend(vocab.encode_bytes(d)?);
                    }
                    ids
                }
            };
            split(ids, opts.split_fracs, vocab)
        }
        Tokenization::Word => {
            let text = String::from_utf8_lossy(bytes);
            let docs: Vec<Vec<&str>> = match opts.shuffle_docs {
                None => vec![text.split_whitespace().collect()],
                Some(seed) => {
                    let mut lines: Vec<&str> =
                        text.lines().filter(|l| !l.trim().is_empty()).collect();
                    lines.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                    lines
                        .iter()
                        .map(|l| l.split_whitespace().collect())
                        .collect()
                }
            };
            let mut freq: HashMap<&str, usize> = HashMap::new();
            for w in docs.iter().flatten() {
                *freq.entry(w).or_default() += 1;
            }
            let mut ranked: Vec<(&str, usize)> = freq.into_iter().collect();
            ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
            let keep = opts.word_vocab_cap.max(1) - 1;
            let mut words = vec![UNK.to_string()];
            words.extend(ranked.iter().take(keep).map(|(w, _)| w.to_string()));
            let index: HashMap<&str, u32> = words
                .iter()
                .enumerate()
                .map(|(i, w)| (w.as_str(), i as u32))
                .collect();
            let separator = opts.shuffle_docs.map(|_| words.len() as u32);
            let mut ids = Vec::new();
            for (i, doc) in docs.iter().enumerate() {
                if i > 0 {
                    if let Some(s) = separator {
                        ids.push(s);
                    }
                }
                ids.extend(doc.iter().map(|w| index.get(w).copied().unwrap_or(0)));
            }
            split(ids, opts.split_fracs, Vocab::Words { words, separator })
        }
    }
}

/// `B` contiguous chunks of a token sequence, read `M` tokens at a time.
#[derive(Clone, Debug)]
pub struct BatchStream {
    chunks: Vec<Vec<u32>>,
    unroll: usize,
    cursor: usize,
    epoch: usize,
}

/// One training segment, time-major (`index = t * B + b`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub batch: usize,
    pub len: usize,
}

pub fn batchify(tokens: &[u32], batch: usize, unroll: usize) -> Result<BatchStream> {
    if batch == 0 || unroll == 0 {
        return Err(Error::Usage(
            "batch size and unroll must be positive".into(),
        ));
    }
    if tokens.len() < batch * (unroll + 1) {
        return Err(Error::Data(format!(
            "training split of {} tokens is too small for B={batch}, M={unroll} (needs {})",
            tokens.len(),
            batch * (unroll + 1)
        )));
    }
    let chunk = tokens.len() / batch;
    Ok(BatchStream {
        chunks: (0..batch)
            .map(|b| tokens[b * chunk..(b + 1) * chunk].to_vec())
            .collect(),
        unroll,
        cursor: 0,
        epoch: 0,
    })
}

impl BatchStream {
    pub fn batch_size(&self) -> usize {
        self.chunks.len()
    }

    pub fn chunk_len(&self) -> usize {
        self.chunks[0].len()
    }

    pub fn batches_per_epoch(&self) -> usize {
        (self.chunk_len() - 1) / self.unroll
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Position of the next batch within the epoch.
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// True when the next batch starts a new pass (state should be reset).
    pub fn at_epoch_start(&self) -> bool {
        self.cursor == 0
    }

    pub fn get(&self, i: usize) -> Batch {
        let (b, m) = (self.batch_size(), self.unroll);
        let mut inputs = Vec::with_capacity(m * b);
        let mut targets = Vec::with_capacity(m * b);
        for t in 0..m {
            for chunk in &self.chunks {
                inputs.push(chunk[i * m + t]);
                targets.push(chunk[i * m + t + 1]);
            }
        }
        Batch {
            inputs,
            targets,
            batch: b,
            len: m,
        }
    }

    /// Sets the position (used when resuming).
    pub fn seek(&mut self, global_batch: u64) {
        let per = self.batches_per_epoch() as u64;
        self.epoch = (global_batch / per) as usize;
        self.cursor = (global_batch % per) as usize;
    }
}

impl Iterator for BatchStream {
    type Item = Batch;

    /// Never ends: wraps around to the first batch after each pass.
    fn next(&mut self) -> Option<Batch> {
        let b = self.get(self.cursor);
        self.cursor += 1;
        if self.cursor == self.batches_per_epoch() {
            self.cursor = 0;
            self.epoch += 1;
        }
        Some(b)
    }
}

/// Non-overlapping `[start, end)` input ranges covering a sequence for
/// next-token scoring; the last one may be shorter.
pub fn eval_segments(len: usize, unroll: usize) -> Vec<(usize, usize)> {
    if len < 2 || unroll == 0 {
        return Vec::new();
    }
    let scored = len - 1;
    (0..scored)
        .step_by(unroll)
        .map(|s| (s, (s + unroll).min(scored)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn split_sizes() {
        let bytes: Vec<u8> = (0..100).map(|i| (i % 7) as u8 + b'a').collect();
        let c = ingest_bytes(&bytes, &IngestOptions::default()).unwrap();
        assert_eq!((c.train.len(), c.dev.len(), c.test.len()), (90, 5, 5));
        let joined: Vec<u32> = c
            .train
            .iter()
            .chain(&c.dev)
            .chain(&c.test)
            .copied()
            .collect();
        assert_eq!(c.vocab.decode(&joined), bytes);
    }

    #[test]
    fn single_symbol_vocab() {
        let c = ingest_bytes(&[b'z'; 40], &IngestOptions::default()).unwrap();
        assert_eq!(c.vocab.len(), 1);
        assert!(c.train.iter().all(|&i| i == 0));
    }

    #[test]
    fn tiny_or_empty_rejected() {
        assert!(ingest_bytes(b"", &IngestOptions::default()).is_err());
        assert!(ingest_bytes(b"abc", &IngestOptions::default()).is_err());
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            ingest(&dir.path().join("missing"), &IngestOptions::default()),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn batchify_examples() {
        let toks: Vec<u32> = (0..10).collect();
        let s = batchify(&toks, 2, 2).unwrap();
        assert_eq!(s.chunk_len(), 5);
        assert_eq!(s.batches_per_epoch(), 2);
        let b0 = s.get(0);
        assert_eq!(b0.inputs, vec![0, 5, 1, 6]);
        assert_eq!(b0.targets, vec![1, 6, 2, 7]);
        let b1 = s.get(1);
        assert_eq!(b1.inputs, vec![2, 7, 3, 8]);
        assert_eq!(b1.targets, vec![3, 8, 4, 9]);

        // 11 tokens: the remainder token is dropped.
        let toks: Vec<u32> = (0..11).collect();
        let s = batchify(&toks, 2, 2).unwrap();
        assert_eq!(s.chunk_len(), 5);
        assert!(batchify(&toks[..5], 2, 2).is_err());
    }

    #[test]
    fn stream_wraps_and_replays() {
        let toks: Vec<u32> = (0..50).collect();
        let a: Vec<Batch> = batchify(&toks, 3, 4).unwrap().take(9).collect();
        let b: Vec<Batch> = batchify(&toks, 3, 4).unwrap().take(9).collect();
        assert_eq!(a, b);
        let s = batchify(&toks, 3, 4).unwrap();
        let per = s.batches_per_epoch();
        assert_eq!(a[per], a[0]);
        let mut resumed = batchify(&toks, 3, 4).unwrap();
        resumed.seek(5);
        assert_eq!(resumed.next().unwrap(), a[5]);
    }

    #[test]
    fn shuffled_docs_use_separator() {
        let text =
            b"aa\nbb\ncc\ndd\nee\nff\ngg\nhh\nii\njj\nkk\nll\nmm\nnn\noo\npp\nqq\nrr\nss\ntt\n";
        let opts = IngestOptions {
            shuffle_docs: Some(3),
            ..Default::default()
        };
        let c = ingest_bytes(text, &opts).unwrap();
        let sep = c.vocab.separator().unwrap();
        assert_eq!(sep as usize, c.vocab.len() - 1);
        let all: Vec<u32> = c
            .train
            .iter()
            .chain(&c.dev)
            .chain(&c.test)
            .copied()
            .collect();
        assert_eq!(all.iter().filter(|&&i| i == sep).count(), 19);
        let again = ingest_bytes(text, &opts).unwrap();
        assert_eq!(c, again);
        let other = ingest_bytes(
            text,
            &IngestOptions {
                shuffle_docs: Some(4),
                ..opts
            },
        )
        .unwrap();
        assert_ne!(c.train, other.train);
    }

    #[test]
    fn word_level_vocab_cap() {
        let text = "the cat the dog the end a cat ".repeat(20);
        let opts = IngestOptions {
            tokenization: Tokenization::Word,
            word_vocab_cap: 3,
            ..Default::default()
        };
        let c = ingest_bytes(text.as_bytes(), &opts).unwrap();
        let Vocab::Words { words, .. } = &c.vocab else {
            panic!()
        };
        assert_eq!(words, &["<unk>", "the", "cat"]);
        assert_eq!(c.train.len() + c.dev.len() + c.test.len(), 160);
        assert_eq!(c.vocab.decode(&c.train[..3]), b"the cat the");
        assert_eq!(c.vocab.decode(&[0]), b"<unk>");
    }

    #[test]
    fn vocab_records_roundtrip() {
        let v = Vocab::Bytes {
            symbols: vec![b'\n', b'a', 0xff],
            separator: Some(3),
        };
        assert_eq!(vocab_from_records(&vocab_records(&v)), Some(v));
        assert_eq!(vocab_from_records(&[]), None);
    }

    #[test]
    fn segments_cover_targets() {
        assert_eq!(eval_segments(10, 4), vec![(0, 4), (4, 8), (8, 9)]);
        assert_eq!(eval_segments(1, 4), vec![]);
    }

    proptest! {
        #[test]
        fn partition_and_bijection(bytes in prop::collection::vec(any::<u8>(), 40..400)) {
            let c = ingest_bytes(&bytes, &IngestOptions::default()).unwrap();
            let joined: Vec<u32> = c.train.iter().chain(&c.dev).chain(&c.test).copied().collect();
            prop_assert_eq!(c.vocab.decode(&joined), bytes.clone());
            prop_assert!(joined.iter().all(|&i| (i as usize) < c.vocab.len()));
            let mut distinct = bytes.clone();
            distinct.sort_unstable();
            distinct.dedup();
            prop_assert_eq!(distinct.len(), c.vocab.len());
        }

        #[test]
        fn batches_are_aligned(n in 20usize..200, b in 1usize..4, m in 1usize..6) {
            let toks: Vec<u32> = (0..n as u32).collect();
            if let Ok(s) = batchify(&toks, b, m) {
                for i in 0..s.batches_per_epoch() {
                    let batch = s.get(i);
                    prop_assert_eq!(batch.inputs.len(), b * m);
                    for (x, y) in batch.inputs.iter().zip(&batch.targets) {
                        prop_assert_eq!(x + 1, *y);
                    }
                }
            }
        }
    }
}
