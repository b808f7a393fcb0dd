//! Encoded corpora and padded batching.

use rand::seq::SliceRandom;

use crate::rng::{seed_rng, SeedRng};
use crate::vocab::{Vocabulary, EOS, PAD};

/// Padded id matrix with per-sequence true lengths (EOS position inclusive).
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    pub ids: Vec<usize>,
    pub n: usize,
    pub t_max: usize,
    pub lengths: Vec<usize>,
}

impl SequenceBatch {
    /// Pack encoded sentences (content + EOS) into a padded batch. Sentences
    /// longer than `t_max` are truncated to `t_max - 1` tokens plus EOS.
    pub fn from_sentences(sentences: &[Vec<usize>], t_max: usize) -> Self {
        let n = sentences.len();
        let mut ids = vec![PAD; n * t_max];
        let mut lengths = Vec::with_capacity(n);
        for (i, s) in sentences.iter().enumerate() {
            let mut row: Vec<usize> = s.clone();
            if row.len() > t_max {
                row.truncate(t_max - 1);
                row.push(EOS);
            }
            lengths.push(row.len());
            ids[i * t_max..i * t_max + row.len()].copy_from_slice(&row);
        }
        SequenceBatch { ids, n, t_max, lengths }
    }

    pub fn token_at(&self, row: usize, t: usize) -> usize {
        self.ids[row * self.t_max + t]
    }

    pub fn row(&self, row: usize) -> &[usize] {
        &self.ids[row * self.t_max..(row + 1) * self.t_max]
    }

    /// Total number of valid tokens (EOS included).
    pub fn token_count(&self) -> usize {
        self.lengths.iter().sum()
    }
}

/// Ordered list of encoded sentences.
#[derive(Clone, Debug)]
pub struct Corpus {
    sentences: Vec<Vec<usize>>,
}

impl Corpus {
    pub fn from_lines(vocab: &Vocabulary, lines: &[impl AsRef<str>]) -> Self {
        let sentences = lines.iter().map(|l| vocab.encode(l.as_ref())).collect();
        Corpus { sentences }
    }

    pub fn from_sentences(sentences: Vec<Vec<usize>>) -> Self {
        Corpus { sentences }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn sentences(&self) -> &[Vec<usize>] {
        &self.sentences
    }

    /// Endless stream of shuffled batches; reshuffles each epoch with the
    /// seeded RNG so iteration order is reproducible.
    pub fn batch_iter(&self, n: usize, t_max: usize, seed: u64) -> BatchIter<'_> {
        assert!(n >= 1, "batch size must be at least 1");
        BatchIter {
            corpus: self,
            order: (0..self.sentences.len()).collect(),
            cursor: usize::MAX,
            n,
            t_max,
            rng: seed_rng(seed),
        }
    }
}

pub struct BatchIter<'a> {
    corpus: &'a Corpus,
    order: Vec<usize>,
    cursor: usize,
    n: usize,
    t_max: usize,
    rng: SeedRng,
}

impl Iterator for BatchIter<'_> {
    type Item = SequenceBatch;

    fn next(&mut self) -> Option<SequenceBatch> {
        if self.corpus.is_empty() {
            return None;
        }
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.n).min(self.order.len());
        let chosen: Vec<Vec<usize>> = self.order[self.cursor..end]
            .iter()
            .map(|&i| self.corpus.sentences[i].clone())
            .collect();
        self.cursor = end;
        Some(SequenceBatch::from_sentences(&chosen, self.t_max))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::build(&["a b c d e f g h"], 20).unwrap()
    }

    #[test]
    fn batch_sizes_split_two_and_one() {
        let v = vocab();
        let c = Corpus::from_lines(&v, &["a b", "c", "d e f"]);
        let mut it = c.batch_iter(2, 10, 0);
        let b1 = it.next().unwrap();
        let b2 = it.next().unwrap();
        assert_eq!(b1.n, 2);
        assert_eq!(b2.n, 1);
    }

    #[test]
    fn same_seed_same_order() {
        let v = vocab();
        let c = Corpus::from_lines(&v, &["a", "b", "c", "d", "e"]);
        let batches1: Vec<_> = c.batch_iter(2, 5, 7).take(6).collect();
        let batches2: Vec<_> = c.batch_iter(2, 5, 7).take(6).collect();
        assert_eq!(batches1, batches2);
    }

    #[test]
    fn truncation_keeps_eos_at_cap() {
        let long: Vec<usize> = (0..60).map(|i| 3 + (i % 4)).chain([EOS]).collect();
        let b = SequenceBatch::from_sentences(&[long], 50);
        assert_eq!(b.lengths[0], 50);
        assert_eq!(b.token_at(0, 49), EOS);
    }

    #[test]
    fn padding_beyond_length_is_pad() {
        let v = vocab();
        let c = Corpus::from_lines(&v, &["a b"]);
        let b = c.batch_iter(1, 6, 0).next().unwrap();
        assert_eq!(b.lengths[0], 3); // a b EOS
        for t in 3..6 {
            assert_eq!(b.token_at(0, t), PAD);
        }
    }
}
