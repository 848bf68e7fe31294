//! Synthetic and corpus-backed task streams.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{TokenBatch, BOS, EOS};

/// First id available to task vocabularies; `PAD`, `BOS`, `EOS` come before it.
pub const FIRST_DATA_ID: usize = 3;

/// One minibatch. Padding positions carry `None` targets and never reach the
/// loss or the metrics.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskBatch {
    /// Encoder input, decoder input (`BOS` + target) and decoder targets
    /// (target + `EOS`), flattened row-major over the decoder width.
    Seq2Seq {
        source: TokenBatch,
        decoder_input: TokenBatch,
        targets: Vec<Option<usize>>,
    },
    Classify { inputs: TokenBatch, labels: Vec<usize> },
    /// Targets are the inputs shifted by one, flattened row-major.
    LanguageModel {
        inputs: TokenBatch,
        targets: Vec<Option<usize>>,
    },
}

impl TaskBatch {
    pub fn size(&self) -> usize {
        match self {
            TaskBatch::Seq2Seq { source, .. } => source.batch(),
            TaskBatch::Classify { inputs, .. } | TaskBatch::LanguageModel { inputs, .. } => inputs.batch(),
        }
    }

    /// Whether position `(b, t)` of the flattened targets is real.
    pub fn pad_mask(&self) -> Vec<bool> {
        match self {
            TaskBatch::Seq2Seq { targets, .. } | TaskBatch::LanguageModel { targets, .. } => {
                targets.iter().map(Option::is_some).collect()
            }
            TaskBatch::Classify { labels, .. } => vec![true; labels.len()],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of batch `index` in `split`. Training seeds are even and evaluation
/// seeds odd, so the two streams never share a generator state.
pub fn batch_seed(seed: u64, split: Split, index: u64) -> u64 {
    let h = splitmix(splitmix(seed) ^ index.wrapping_mul(0xd134_2543_de82_ef95));
    match split {
        Split::Train => h & !1,
        Split::Eval => h | 1,
    }
}

/// Random sequences over `FIRST_DATA_ID..vocab`; the target is the source.
#[derive(Clone, Debug, PartialEq)]
pub struct CopyTask {
    vocab: usize,
    min_len: usize,
    max_len: usize,
}

impl CopyTask {
    pub fn new(vocab: usize, min_len: usize, max_len: usize) -> Result<Self> {
        if vocab <= FIRST_DATA_ID {
            return Err(Error::Config(format!("copy vocabulary {vocab} must exceed {FIRST_DATA_ID}")));
        }
        if min_len == 0 || min_len > max_len {
            return Err(Error::Config(format!("empty copy length range {min_len}..={max_len}")));
        }
        Ok(Self { vocab, min_len, max_len })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn sequences(&self, rng: &mut impl Rng, batch: usize) -> Vec<Vec<usize>> {
        (0..batch)
            .map(|_| {
                let len = rng.gen_range(self.min_len..=self.max_len);
                (0..len).map(|_| rng.gen_range(FIRST_DATA_ID..self.vocab)).collect()
            })
            .collect()
    }

    pub fn batch(&self, rng: &mut impl Rng, batch: usize) -> Result<TaskBatch> {
        seq2seq_batch(&self.sequences(rng, batch))
    }
}

/// Copy-style batch whose targets equal the sources.
pub fn seq2seq_batch(seqs: &[Vec<usize>]) -> Result<TaskBatch> {
    let source = TokenBatch::from_sequences(seqs)?;
    let inputs: Vec<Vec<usize>> = seqs
        .iter()
        .map(|s| std::iter::once(BOS).chain(s.iter().copied()).collect())
        .collect();
    let decoder_input = TokenBatch::from_sequences(&inputs)?;
    let width = decoder_input.width();
    let mut targets = Vec::with_capacity(seqs.len() * width);
    for s in seqs {
        targets.extend(s.iter().map(|&t| Some(t)));
        targets.push(Some(EOS));
        targets.resize(targets.len() + width - s.len() - 1, None);
    }
    Ok(TaskBatch::Seq2Seq {
        source,
        decoder_input,
        targets,
    })
}

/// Token layout of the agreement task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SvaVocab;

impl SvaVocab {
    pub const NOUNS: usize = 4;
    pub const VERBS: usize = 3;
    pub const ATTRS: usize = 4;
    pub const MAX_ATTRS: usize = 2;

    pub fn noun(plural: bool, i: usize) -> usize {
        FIRST_DATA_ID + usize::from(plural) * Self::NOUNS + i
    }

    pub fn verb(plural: bool, i: usize) -> usize {
        FIRST_DATA_ID + 2 * Self::NOUNS + usize::from(plural) * Self::VERBS + i
    }

    pub fn attr(i: usize) -> usize {
        FIRST_DATA_ID + 2 * Self::NOUNS + 2 * Self::VERBS + i
    }

    pub fn size() -> usize {
        FIRST_DATA_ID + 2 * Self::NOUNS + 2 * Self::VERBS + Self::ATTRS
    }

    /// Grammatical number of a verb token.
    pub fn verb_is_plural(token: usize) -> Option<bool> {
        let base = FIRST_DATA_ID + 2 * Self::NOUNS;
        (base..base + 2 * Self::VERBS)
            .contains(&token)
            .then(|| token >= base + Self::VERBS)
    }

    /// The same verb with the opposite number.
    pub fn flip_verb(token: usize) -> Option<usize> {
        let plural = Self::verb_is_plural(token)?;
        let base = FIRST_DATA_ID + 2 * Self::NOUNS;
        let i = (token - base) % Self::VERBS;
        Some(Self::verb(!plural, i))
    }
}

/// `SUBJ ATTR* NOUN^depth VERB`, labelled 1 when subject and verb agree in
/// number. Distractor nouns draw from the subject pool with random number.
#[derive(Clone, Debug, PartialEq)]
pub struct SvaTask {
    depth: usize,
}

impl SvaTask {
    pub fn new(depth: usize) -> Self {
        Self { depth }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Labels alternate 1, 0, 1, ... within the batch.
    pub fn examples(&self, rng: &mut impl Rng, batch: usize) -> Vec<(Vec<usize>, usize)> {
        (0..batch)
            .map(|i| {
                let label = usize::from(i % 2 == 0);
                let plural = rng.gen::<bool>();
                let mut seq = vec![SvaVocab::noun(plural, rng.gen_range(0..SvaVocab::NOUNS))];
                for _ in 0..rng.gen_range(0..=SvaVocab::MAX_ATTRS) {
                    seq.push(SvaVocab::attr(rng.gen_range(0..SvaVocab::ATTRS)));
                }
                for _ in 0..self.depth {
                    seq.push(SvaVocab::noun(rng.gen(), rng.gen_range(0..SvaVocab::NOUNS)));
                }
                let verb_plural = if label == 1 { plural } else { !plural };
                seq.push(SvaVocab::verb(verb_plural, rng.gen_range(0..SvaVocab::VERBS)));
                (seq, label)
            })
            .collect()
    }

    pub fn batch(&self, rng: &mut impl Rng, batch: usize) -> Result<TaskBatch> {
        let (seqs, labels): (Vec<_>, Vec<_>) = self.examples(rng, batch).into_iter().unzip();
        Ok(TaskBatch::Classify {
            inputs: TokenBatch::from_sequences(&seqs)?,
            labels,
        })
    }
}

/// A character corpus mapped to ids, split into a training head and a
/// held-out tail.
#[derive(Clone, Debug, PartialEq)]
pub struct CharCorpus {
    alphabet: Vec<char>,
    train: Vec<usize>,
    held_out: Vec<usize>,
    invalid_sequences: usize,
}

impl CharCorpus {
    pub fn load(path: &Path, holdout_fraction: f64) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, holdout_fraction)
    }

    /// Decodes UTF-8, replacing each invalid byte sequence with U+FFFD and
    /// counting it. The alphabet is the sorted set of distinct characters.
    pub fn from_bytes(bytes: &[u8], holdout_fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&holdout_fraction) || holdout_fraction == 0.0 {
            return Err(Error::Config(format!("holdout fraction {holdout_fraction} outside (0, 1)")));
        }
        let mut text = String::with_capacity(bytes.len());
        let mut invalid_sequences = 0;
        for chunk in bytes.utf8_chunks() {
            text.push_str(chunk.valid());
            if !chunk.invalid().is_empty() {
                invalid_sequences += 1;
                text.push(char::REPLACEMENT_CHARACTER);
            }
        }
        let chars: Vec<char> = text.chars().collect();
        let mut alphabet = chars.clone();
        alphabet.sort_unstable();
        alphabet.dedup();
        let index: BTreeMap<char, usize> = alphabet
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, FIRST_DATA_ID + i))
            .collect();
        let ids: Vec<usize> = chars.iter().map(|c| index[c]).collect();
        let cut = ids.len() - (ids.len() as f64 * holdout_fraction).round() as usize;
        Ok(Self {
            alphabet,
            held_out: ids[cut..].to_vec(),
            train: ids[..cut].to_vec(),
            invalid_sequences,
        })
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    pub fn alphabet_string(&self) -> String {
        self.alphabet.iter().collect()
    }

    /// Reserved ids plus one id per distinct character.
    pub fn vocab_size(&self) -> usize {
        FIRST_DATA_ID + self.alphabet.len()
    }

    pub fn train_ids(&self) -> &[usize] {
        &self.train
    }

    pub fn held_out_ids(&self) -> &[usize] {
        &self.held_out
    }

    pub fn invalid_sequences(&self) -> usize {
        self.invalid_sequences
    }

    /// Perplexity on `targets` of add-one smoothed unigram frequencies of the
    /// training split, over the data ids.
    pub fn unigram_perplexity(&self, targets: &[usize]) -> f64 {
        let mut counts = vec![1.0; self.alphabet.len()];
        for &t in &self.train {
            counts[t - FIRST_DATA_ID] += 1.0;
        }
        let total: f64 = counts.iter().sum();
        let nll: f64 = targets
            .iter()
            .map(|&t| -(counts[t - FIRST_DATA_ID] / total).ln())
            .sum();
        (nll / targets.len() as f64).exp()
    }
}

/// Language-model windows: inputs of `seq_len` tokens with targets shifted by
/// one. Training windows tile the training split from offset 0 with stride
/// `seq_len`; each epoch visits every window once in shuffled order.
#[derive(Clone, Debug)]
pub struct CharLmTask {
    corpus: CharCorpus,
    seq_len: usize,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    seed: u64,
}

impl CharLmTask {
    pub fn new(corpus: CharCorpus, seq_len: usize, seed: u64) -> Result<Self> {
        if seq_len < 2 {
            return Err(Error::Config(format!("sequence length {seq_len} is below 2")));
        }
        for (split, len, need) in [
            ("training", corpus.train.len(), 10 * seq_len),
            ("held-out", corpus.held_out.len(), seq_len + 1),
        ] {
            if len < need {
                return Err(Error::Config(format!(
                    "{split} text has {len} characters; at least {need} needed for windows of {seq_len}"
                )));
            }
        }
        let mut task = Self {
            corpus,
            seq_len,
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
            seed,
        };
        task.shuffle();
        Ok(task)
    }

    pub fn corpus(&self) -> &CharCorpus {
        &self.corpus
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// Number of training windows per epoch.
    pub fn windows(&self) -> usize {
        (self.corpus.train.len() - 1) / self.seq_len
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    fn shuffle(&mut self) {
        self.order = (0..self.windows()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(batch_seed(self.seed, Split::Train, self.epoch));
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    /// Start offsets of the next `batch` training windows.
    pub fn next_starts(&mut self, batch: usize) -> Vec<usize> {
        (0..batch)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.epoch += 1;
                    self.shuffle();
                }
                self.cursor += 1;
                self.order[self.cursor - 1] * self.seq_len
            })
            .collect()
    }

    pub fn train_batch(&mut self, batch: usize) -> Result<TaskBatch> {
        let starts = self.next_starts(batch);
        lm_batch(&self.corpus.train, &starts, self.seq_len)
    }

    /// Training-split windows at explicit offsets.
    pub fn train_split_batch(&self, starts: &[usize]) -> Result<TaskBatch> {
        lm_batch(&self.corpus.train, starts, self.seq_len)
    }

    /// Consecutive held-out windows from the start of the tail, at most
    /// `limit` of them.
    pub fn held_out_starts(&self, limit: usize) -> Vec<usize> {
        let n = (self.corpus.held_out.len() - 1) / self.seq_len;
        (0..n.min(limit)).map(|i| i * self.seq_len).collect()
    }

    pub fn held_out_batch(&self, starts: &[usize]) -> Result<TaskBatch> {
        lm_batch(&self.corpus.held_out, starts, self.seq_len)
    }
}

fn lm_batch(ids: &[usize], starts: &[usize], seq_len: usize) -> Result<TaskBatch> {
    let seqs: Vec<Vec<usize>> = starts.iter().map(|&s| ids[s..s + seq_len].to_vec()).collect();
    let targets = starts
        .iter()
        .flat_map(|&s| ids[s + 1..s + seq_len + 1].iter().map(|&t| Some(t)))
        .collect();
    Ok(TaskBatch::LanguageModel {
        inputs: TokenBatch::from_sequences(&seqs)?,
        targets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_targets_equal_sources() {
        let task = CopyTask::new(12, 4, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let TaskBatch::Seq2Seq {
            source,
            decoder_input,
            targets,
        } = task.batch(&mut rng, 8).unwrap()
        else {
            panic!("wrong batch kind")
        };
        let w = decoder_input.width();
        for b in 0..8 {
            let src = source.sequence(b);
            assert!((4..=16).contains(&src.len()));
            assert!(src.iter().all(|&t| (FIRST_DATA_ID..12).contains(&t)));
            assert_eq!(decoder_input.sequence(b)[0], BOS);
            assert_eq!(&decoder_input.sequence(b)[1..], src);
            let row = &targets[b * w..(b + 1) * w];
            for (t, &x) in src.iter().enumerate() {
                assert_eq!(row[t], Some(x));
            }
            assert_eq!(row[src.len()], Some(EOS));
            assert!(row[src.len() + 1..].iter().all(Option::is_none));
        }
        assert!(CopyTask::new(12, 5, 4).is_err());
        assert!(CopyTask::new(3, 1, 4).is_err());
    }

    #[test]
    fn sva_verb_flip_changes_agreement() {
        let task = SvaTask::new(2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (seq, label) in task.examples(&mut rng, 50) {
            let subject_plural = seq[0] >= SvaVocab::noun(true, 0);
            let verb = *seq.last().unwrap();
            let agree = SvaVocab::verb_is_plural(verb) == Some(subject_plural);
            assert_eq!(usize::from(agree), label);
            let flipped = SvaVocab::flip_verb(verb).unwrap();
            let flipped_agrees = SvaVocab::verb_is_plural(flipped) == Some(subject_plural);
            assert_eq!(flipped_agrees, !agree);
            assert!(seq.iter().all(|&t| t < SvaVocab::size()));
        }
    }

    #[test]
    fn seed_partitions_are_disjoint() {
        for seed in 0..20 {
            for i in 0..50 {
                assert_ne!(batch_seed(seed, Split::Train, i) & 1, batch_seed(seed, Split::Eval, i) & 1);
            }
        }
    }

    #[test]
    fn corpus_decoding_counts_invalid_bytes() {
        let c = CharCorpus::from_bytes(b"ab\xffcd\xfe\xfeba", 0.25).unwrap();
        // Each lone continuation-less 0xfe byte is its own invalid sequence.
        assert_eq!(c.invalid_sequences(), 3);
        assert_eq!(c.alphabet_string(), "abcd\u{fffd}");
        assert_eq!(c.train_ids().len() + c.held_out_ids().len(), 9);
        assert!(CharCorpus::from_bytes(b"abc", 0.0).is_err());
    }

    #[test]
    fn windows_tile_and_shift() {
        let text: Vec<u8> = (0..1000).map(|i| b'a' + (i % 7) as u8).collect();
        let corpus = CharCorpus::from_bytes(&text, 0.2).unwrap();
        let mut task = CharLmTask::new(corpus, 16, 3).unwrap();
        let n = task.windows();
        let mut starts = task.next_starts(n);
        starts.sort_unstable();
        assert_eq!(starts, (0..n).map(|i| i * 16).collect::<Vec<_>>());
        assert_eq!(task.epoch(), 0);
        task.next_starts(1);
        assert_eq!(task.epoch(), 1);
        let TaskBatch::LanguageModel { inputs, targets } = task.train_batch(2).unwrap() else {
            panic!("wrong batch kind")
        };
        for b in 0..2 {
            let row = inputs.sequence(b);
            for t in 0..15 {
                assert_eq!(targets[b * 16 + t], Some(row[t + 1]));
            }
        }
        let small = CharCorpus::from_bytes(&text[..100], 0.2).unwrap();
        assert!(CharLmTask::new(small, 16, 0).is_err());
    }

    #[test]
    fn padding_has_no_targets() {
        let batch = seq2seq_batch(&[vec![3, 4, 5], vec![6]]).unwrap();
        assert_eq!(batch.pad_mask(), vec![true, true, true, true, true, true, false, false]);
        assert_eq!(batch.size(), 2);
    }
}
