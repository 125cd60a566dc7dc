//! Byte-level training text: loading, splitting and window sampling, plus a
//! synthetic generator with long-range lookups.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::RandomStream;

/// Tokens are bytes.
pub const BYTE_VOCAB: usize = 256;

#[derive(Clone, Debug)]
pub struct Corpus {
    tokens: Vec<usize>,
    split: usize,
    /// Window starts are multiples of this stride.
    align: usize,
}

impl Corpus {
    /// Holds out the last `holdout` fraction (by aligned windows) for evaluation.
    pub fn from_bytes(bytes: &[u8], align: usize, holdout: f64) -> Result<Self, String> {
        let align = align.max(1);
        if !(0.0..1.0).contains(&holdout) {
            return Err(format!("holdout fraction {holdout} must be in [0, 1)"));
        }
        let blocks = bytes.len() / align;
        let held = ((blocks as f64) * holdout).ceil() as usize;
        if blocks < 2 || held == 0 || held >= blocks {
            return Err(format!(
                "corpus of {} bytes is too small for aligned windows of {align} with a held-out split",
                bytes.len()
            ));
        }
        Ok(Self {
            tokens: bytes.iter().map(|&b| b as usize).collect(),
            split: (blocks - held) * align,
            align,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn train_len(&self) -> usize {
        self.split
    }

    fn starts(&self, lo: usize, hi: usize, len: usize) -> Vec<usize> {
        let mut s = Vec::new();
        let mut p = lo;
        while p + len <= hi {
            s.push(p);
            p += self.align;
        }
        s
    }

    /// A random training window of `len` tokens.
    pub fn sample(&self, rng: &mut RandomStream, len: usize) -> Result<&[usize], String> {
        let starts = self.starts(0, self.split, len);
        if starts.is_empty() {
            return Err(format!("training split shorter than one window of {len}"));
        }
        let s = starts[rng.gen_range(0..starts.len())];
        Ok(&self.tokens[s..s + len])
    }

    /// Up to `max` consecutive held-out windows of `len` tokens.
    pub fn heldout(&self, len: usize, max: usize) -> Vec<&[usize]> {
        self.starts(self.split, self.tokens.len(), len)
            .into_iter()
            .take(max)
            .map(|s| &self.tokens[s..s + len])
            .collect()
    }
}

/// Parameters of [`synthetic_corpus`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub documents: usize,
    pub doc_len: usize,
    /// Distinct keys per document; at most 16.
    pub keys: usize,
    /// Values per key; at most 8.
    pub values: usize,
    pub pair_rate: f64,
    pub query_rate: f64,
    pub min_distance: usize,
    pub max_distance: usize,
    /// Size of each document's favoured filler subset.
    pub topic_letters: usize,
    /// Probability that a filler is drawn from the document subset
    /// instead of following the shared chain.
    pub topic_rate: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            documents: 600,
            doc_len: 256,
            keys: 4,
            values: 4,
            pair_rate: 0.06,
            query_rate: 0.04,
            min_distance: 20,
            max_distance: 200,
            topic_letters: 5,
            topic_rate: 0.5,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), String> {
        if !(1..=16).contains(&self.keys) || !(1..=8).contains(&self.values) {
            return Err(format!("keys must be in 1..=16 and values in 1..=8, got {} and {}", self.keys, self.values));
        }
        if !(1..=FILLERS as usize).contains(&self.topic_letters) {
            return Err(format!("topic_letters must be in 1..={FILLERS}, got {}", self.topic_letters));
        }
        for (name, r) in [("pair_rate", self.pair_rate), ("query_rate", self.query_rate), ("topic_rate", self.topic_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(format!("{name} must be in [0, 1], got {r}"));
            }
        }
        if self.pair_rate + self.query_rate > 1.0 {
            return Err("pair_rate + query_rate must be <= 1".into());
        }
        if self.min_distance > self.max_distance {
            return Err("min_distance must be <= max_distance".into());
        }
        Ok(())
    }

    /// Pair token of `key` and `value`.
    pub fn pair_token(&self, key: usize, value: usize) -> u8 {
        0x80 + (key * self.values + value) as u8
    }
}

const FILLERS: u8 = 20;

/// Documents of filler letters `g..z` interleaved with pair tokens
/// ([`SyntheticSpec::pair_token`]) and lookups: a query letter `A + key`
/// naming a key set 20-200 tokens earlier in the same document, followed by
/// the value digit `0 + value`. Fillers follow a sparse chain shared by all
/// documents, or with probability `topic_rate` come from a subset drawn per
/// document.
pub fn synthetic_corpus(spec: &SyntheticSpec, rng: &mut RandomStream) -> Vec<u8> {
    let successors: Vec<[u8; 3]> = (0..FILLERS)
        .map(|_| [rng.gen_range(0..FILLERS), rng.gen_range(0..FILLERS), rng.gen_range(0..FILLERS)])
        .collect();
    let topic_letters = spec.topic_letters.clamp(1, FILLERS as usize);
    let mut out = Vec::with_capacity(spec.documents * spec.doc_len);
    for _ in 0..spec.documents {
        let mut doc: Vec<u8> = Vec::with_capacity(spec.doc_len);
        let mut set_at: Vec<Option<(usize, usize)>> = vec![None; spec.keys];
        let mut letters: Vec<u8> = (0..FILLERS).collect();
        letters.shuffle(rng);
        let topic = &letters[..topic_letters];
        let mut filler = rng.gen_range(0..FILLERS);
        while doc.len() < spec.doc_len {
            let pos = doc.len();
            let u: f64 = rng.gen();
            if u < spec.pair_rate {
                let free: Vec<usize> = (0..spec.keys).filter(|&k| set_at[k].is_none()).collect();
                if !free.is_empty() {
                    let k = free[rng.gen_range(0..free.len())];
                    let v = rng.gen_range(0..spec.values);
                    set_at[k] = Some((pos, v));
                    doc.push(spec.pair_token(k, v));
                    continue;
                }
            } else if u < spec.pair_rate + spec.query_rate && pos + 1 < spec.doc_len {
                let ready: Vec<(usize, usize)> = set_at
                    .iter()
                    .enumerate()
                    .filter_map(|(k, s)| s.map(|(p, v)| (k, p, v)))
                    .filter(|&(_, p, _)| (spec.min_distance..=spec.max_distance).contains(&(pos - p)))
                    .map(|(k, _, v)| (k, v))
                    .collect();
                if !ready.is_empty() {
                    let (k, v) = ready[rng.gen_range(0..ready.len())];
                    doc.push(b'A' + k as u8);
                    doc.push(b'0' + v as u8);
                    continue;
                }
            }
            filler = if rng.gen::<f64>() < spec.topic_rate {
                topic[rng.gen_range(0..topic.len())]
            } else {
                successors[filler as usize][rng.gen_range(0..3)]
            };
            doc.push(b'g' + filler);
        }
        out.extend_from_slice(&doc);
    }
    out
}

/// Whether a byte of [`synthetic_corpus`] is a pair token.
pub fn is_pair_token(b: usize) -> bool {
    b >= 0x80
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn queries_are_answerable_within_their_document() {
        let spec = SyntheticSpec {
            documents: 20,
            ..SyntheticSpec::default()
        };
        let bytes = synthetic_corpus(&spec, &mut stream(3, "corpus"));
        assert_eq!(bytes.len(), 20 * 256);
        let mut queries = 0;
        for doc in bytes.chunks(256) {
            for i in 0..doc.len() {
                if doc[i].is_ascii_uppercase() {
                    let k = (doc[i] - b'A') as usize;
                    let v = doc[i + 1] - b'0';
                    let pair = (0..i).rev().find(|&j| doc[j] >= 0x80 && (doc[j] as usize - 0x80) / 4 == k);
                    let j = pair.expect("pair precedes query");
                    assert_eq!(doc[j], spec.pair_token(k, v as usize));
                    assert!((20..=200).contains(&(i - j)));
                    queries += 1;
                }
            }
        }
        assert!(queries > 40, "{queries}");
    }

    #[test]
    fn documents_favour_their_topic_letters() {
        let spec = SyntheticSpec {
            documents: 50,
            ..SyntheticSpec::default()
        };
        let bytes = synthetic_corpus(&spec, &mut stream(4, "corpus"));
        let mut top_share = 0.0;
        for doc in bytes.chunks(256) {
            let mut counts = [0usize; 20];
            for &b in doc.iter().filter(|b| (b'g'..=b'z').contains(b)) {
                counts[(b - b'g') as usize] += 1;
            }
            let total: usize = counts.iter().sum();
            counts.sort_unstable_by(|a, b| b.cmp(a));
            top_share += counts[..5].iter().sum::<usize>() as f64 / total as f64;
        }
        assert!(top_share / 50.0 > 0.6, "{}", top_share / 50.0);
        assert!(SyntheticSpec { keys: 17, ..spec.clone() }.validate().is_err());
        assert!(SyntheticSpec { topic_rate: 1.5, ..spec }.validate().is_err());
    }

    #[test]
    fn split_and_sampling() {
        let bytes: Vec<u8> = (0..1000u32).map(|i| (i % 251) as u8).collect();
        let c = Corpus::from_bytes(&bytes, 100, 0.1).unwrap();
        assert_eq!(c.train_len(), 900);
        let mut rng = stream(1, "s");
        for _ in 0..20 {
            let w = c.sample(&mut rng, 100).unwrap();
            assert_eq!(w[0] as u32 % 100 % 251, w[0] as u32 % 251 % 100 % 251);
        }
        assert_eq!(c.heldout(100, 5).len(), 1);
        assert!(Corpus::from_bytes(&bytes[..50], 100, 0.1).is_err());
    }
}
