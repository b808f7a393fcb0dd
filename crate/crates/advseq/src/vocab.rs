//! Vocabulary construction and token/id codecs.

use std::collections::HashMap;
use std::io::BufRead;

use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::rng::SeedRng;
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const RESERVED: [&str; 3] = ["<pad>", "<sos>", "<eos>"];

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("vocabulary capacity {0} is too small (needs room for reserved tokens)")]
    CapacityTooSmall(usize),
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: usize, size: usize },
    #[error("malformed word-vector line {line}: {detail}")]
    MalformedVectorLine { line: usize, detail: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Token/id bijection with fixed reserved ids: PAD = 0, SOS = 1, EOS = 2.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Frequency-ranked vocabulary over lowercased whitespace tokens.
    ///
    /// `max_size` caps the total size including the three reserved tokens;
    /// ties in frequency break lexicographically. Tokens that collide with
    /// reserved token strings are skipped.
    pub fn build(lines: &[impl AsRef<str>], max_size: usize) -> Result<Self, VocabError> {
        if max_size < 4 {
            return Err(VocabError::CapacityTooSmall(max_size));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        let mut any = false;
        for line in lines {
            for tok in line.as_ref().split_whitespace() {
                any = true;
                let lower = tok.to_lowercase();
                if RESERVED.contains(&lower.as_str()) {
                    continue;
                }
                *counts.entry(lower).or_insert(0) += 1;
            }
        }
        if !any {
            return Err(VocabError::EmptyCorpus);
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - RESERVED.len());

        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().map(|(t, _)| t));
        Ok(Self::from_tokens(tokens))
    }

    /// Rebuild from an ordered token list (checkpoint loading). The first
    /// three entries must be the reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        assert!(tokens.len() >= RESERVED.len(), "missing reserved tokens");
        for (i, r) in RESERVED.iter().enumerate() {
            assert_eq!(tokens[i], *r, "reserved token order violated");
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token_of(&self, id: usize) -> Result<&str, VocabError> {
        self.tokens
            .get(id)
            .map(|s| s.as_str())
            .ok_or(VocabError::IdOutOfRange { id, size: self.tokens.len() })
    }

    /// Lowercase, tokenize, drop out-of-vocabulary tokens, append EOS.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids: Vec<usize> = text
            .split_whitespace()
            .filter_map(|t| self.index.get(&t.to_lowercase()).copied())
            .collect();
        ids.push(EOS);
        ids
    }

    /// Inverse of `encode` for in-vocabulary text: strips PAD and EOS.
    pub fn decode(&self, ids: &[usize]) -> Result<String, VocabError> {
        let mut words = Vec::new();
        for &id in ids {
            if id == PAD || id == EOS {
                continue;
            }
            words.push(self.token_of(id)?);
        }
        Ok(words.join(" "))
    }
}

/// Load textual word vectors ("token v1 ... v_d" per line) into a
/// |V| x d_e matrix. Rows for tokens absent from the file (and for the
/// reserved tokens) are drawn from N(0, 0.01^2). Returns the matrix and the
/// number of vocabulary tokens found in the file.
pub fn load_word_vectors(
    reader: impl BufRead,
    vocab: &Vocabulary,
    d_e: usize,
    rng: &mut SeedRng,
) -> Result<(Tensor, usize), VocabError> {
    let noise = Normal::new(0.0, 0.01).unwrap();
    let mut matrix = Tensor::zeros(&[vocab.size(), d_e]);
    for x in matrix.data_mut() {
        *x = noise.sample(rng);
    }
    let mut hits = 0usize;
    let mut seen = vec![false; vocab.size()];
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts.next().ok_or(VocabError::MalformedVectorLine {
            line: lineno + 1,
            detail: "missing token".into(),
        })?;
        let values: Vec<f64> = parts
            .map(|p| {
                p.parse::<f64>().map_err(|e| VocabError::MalformedVectorLine {
                    line: lineno + 1,
                    detail: e.to_string(),
                })
            })
            .collect::<Result<_, _>>()?;
        if values.len() != d_e {
            return Err(VocabError::MalformedVectorLine {
                line: lineno + 1,
                detail: format!("expected {} values, got {}", d_e, values.len()),
            });
        }
        if let Some(id) = vocab.id_of(&token.to_lowercase()) {
            if id >= RESERVED.len() && !seen[id] {
                matrix.data_mut()[id * d_e..(id + 1) * d_e].copy_from_slice(&values);
                seen[id] = true;
                hits += 1;
            }
        }
    }
    Ok((matrix, hits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seed_rng;
    use proptest::prelude::*;

    #[test]
    fn build_counts_reserved_tokens() {
        let v = Vocabulary::build(&["a b", "a"], 10).unwrap();
        assert_eq!(v.size(), 5);
        assert_eq!(v.token_of(PAD).unwrap(), "<pad>");
        assert_eq!(v.token_of(SOS).unwrap(), "<sos>");
        assert_eq!(v.token_of(EOS).unwrap(), "<eos>");
        // "a" has frequency 2 and ranks before "b".
        assert_eq!(v.id_of("a"), Some(3));
        assert_eq!(v.id_of("b"), Some(4));
    }

    #[test]
    fn build_lowercases() {
        let v = Vocabulary::build(&["B b"], 10).unwrap();
        assert_eq!(v.size(), 4);
        assert!(v.id_of("b").is_some());
        assert!(v.id_of("B").is_none());
    }

    #[test]
    fn build_cap_and_tie_break() {
        // Same frequency: lexicographic order decides who survives the cap.
        let v = Vocabulary::build(&["c a b"], 5).unwrap();
        assert_eq!(v.size(), 5);
        assert!(v.id_of("a").is_some());
        assert!(v.id_of("b").is_some());
        assert!(v.id_of("c").is_none());
    }

    #[test]
    fn build_rejects_empty() {
        assert!(matches!(
            Vocabulary::build(&[""; 0], 10),
            Err(VocabError::EmptyCorpus)
        ));
        assert!(matches!(
            Vocabulary::build(&["   "], 10),
            Err(VocabError::EmptyCorpus)
        ));
    }

    #[test]
    fn encode_appends_eos_and_drops_oov() {
        let v = Vocabulary::build(&["a b"], 10).unwrap();
        let ids = v.encode("a zzz b");
        assert_eq!(ids, vec![3, 4, EOS]);
    }

    #[test]
    fn empty_round_trip() {
        let v = Vocabulary::build(&["a"], 10).unwrap();
        let ids = v.encode("");
        assert_eq!(ids, vec![EOS]);
        assert_eq!(v.decode(&ids).unwrap(), "");
    }

    #[test]
    fn decode_rejects_out_of_range() {
        let v = Vocabulary::build(&["a"], 10).unwrap();
        assert!(v.decode(&[99]).is_err());
    }

    #[test]
    fn word_vectors_copy_and_count() {
        let v = Vocabulary::build(&["cat dog"], 10).unwrap();
        let file = "cat 0.1 0.2\n";
        let (m, hits) = load_word_vectors(file.as_bytes(), &v, 2, &mut seed_rng(0)).unwrap();
        assert_eq!(hits, 1);
        let cat = v.id_of("cat").unwrap();
        assert_eq!(m.at2(cat, 0), 0.1);
        assert_eq!(m.at2(cat, 1), 0.2);
    }

    #[test]
    fn word_vectors_full_coverage_excludes_reserved() {
        let v = Vocabulary::build(&["cat dog"], 10).unwrap();
        let file = "cat 1 2\ndog 3 4\n<eos> 9 9\n";
        let (_, hits) = load_word_vectors(file.as_bytes(), &v, 2, &mut seed_rng(0)).unwrap();
        assert_eq!(hits, v.size() - 3);
    }

    #[test]
    fn word_vectors_empty_file() {
        let v = Vocabulary::build(&["cat"], 10).unwrap();
        let (m, hits) = load_word_vectors("".as_bytes(), &v, 3, &mut seed_rng(1)).unwrap();
        assert_eq!(hits, 0);
        // Random-initialized, small scale.
        assert!(m.data().iter().all(|x| x.abs() < 0.1));
    }

    #[test]
    fn word_vectors_dimension_mismatch() {
        let v = Vocabulary::build(&["cat"], 10).unwrap();
        assert!(load_word_vectors("cat 1 2 3".as_bytes(), &v, 2, &mut seed_rng(0)).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_in_vocab_sentences(words in proptest::collection::vec("[a-e]{1,3}", 0..8)) {
            let v = Vocabulary::build(&["a b c d e aa bb cc dd ee aaa bbb"], 40).unwrap();
            let sentence = words.join(" ");
            let in_vocab: Vec<&str> = sentence
                .split_whitespace()
                .filter(|w| v.id_of(w).is_some())
                .collect();
            let ids = v.encode(&sentence);
            prop_assert_eq!(v.decode(&ids).unwrap(), in_vocab.join(" "));
        }
    }
}
