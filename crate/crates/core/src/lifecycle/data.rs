//! Corpora and the stream layout used to batch them.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::SegmentCache;
use crate::error::{config_err, Error, Result};
use crate::model::byte_tokenize;

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() {
        return Err(config_err!("corpus {} is empty", path.display()));
    }
    Ok(byte_tokenize(&bytes))
}

/// Splits off the trailing `frac` of `tokens` as held-out data.
pub fn split_holdout(tokens: &[usize], frac: f64) -> (Vec<usize>, Vec<usize>) {
    let cut = tokens.len() - ((tokens.len() as f64 * frac).round() as usize).min(tokens.len());
    (tokens[..cut].to_vec(), tokens[cut..].to_vec())
}

fn expression<R: Rng>(rng: &mut R, depth: u32, out: &mut String) -> i64 {
    if depth == 0 || rng.random_bool(0.35) {
        let v = rng.random_range(0..10);
        out.push_str(&v.to_string());
        return v;
    }
    let op = ['+', '-', '*'][rng.random_range(0..3)];
    out.push('(');
    let a = expression(rng, depth - 1, out);
    out.push(op);
    let b = expression(rng, depth - 1, out);
    out.push(')');
    match op {
        '+' => a + b,
        '-' => a - b,
        _ => a * b,
    }
}

/// Bracketed integer arithmetic, one `expr=value` per line.
pub fn arithmetic_corpus(n_bytes: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = String::with_capacity(n_bytes + 64);
    while s.len() < n_bytes {
        let mut line = String::new();
        let v = expression(&mut rng, 3, &mut line);
        s.push_str(&line);
        s.push('=');
        s.push_str(&v.to_string());
        s.push('\n');
    }
    s.truncate(n_bytes);
    s.into_bytes()
}

/// Templated whaling-ship log entries: a small vocabulary with fixed
/// structure.
pub fn ship_log_corpus(n_bytes: usize, seed: u64) -> Vec<u8> {
    const WIND: [&str; 8] = ["N", "NE", "E", "SE", "S", "SW", "W", "NW"];
    const SKY: [&str; 4] = ["clear", "overcast", "squalls", "fog"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = String::with_capacity(n_bytes + 128);
    let mut day = 1;
    while s.len() < n_bytes {
        let whales = rng.random_range(0..5);
        s.push_str(&format!(
            "Day {day}. Wind {} force {}. Sky {}. Lat {} N, Long {} W. Whales sighted {whales}.\n",
            WIND[rng.random_range(0..WIND.len())],
            rng.random_range(1..9),
            SKY[rng.random_range(0..SKY.len())],
            rng.random_range(10..60),
            rng.random_range(100..180),
        ));
        day += 1;
    }
    s.truncate(n_bytes);
    s.into_bytes()
}

/// The corpus cut into `n` contiguous shards, each read sequentially one
/// segment at a time. A stream that reaches the end of its shard wraps to
/// the start and drops its cache.
#[derive(Debug, Clone)]
pub struct TokenStreams {
    shard_len: usize,
    seg_len: usize,
    pos: Vec<usize>,
    pub caches: Vec<SegmentCache>,
}

/// Inputs and next-token targets of one segment per stream, stacked.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamBatch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

impl TokenStreams {
    /// Stream start positions are drawn from `seed`.
    pub fn new(corpus_len: usize, n_streams: usize, seg_len: usize, n_layer: usize, seed: u64) -> Result<Self> {
        let shard_len = corpus_len / n_streams.max(1);
        if n_streams == 0 || shard_len < seg_len + 1 {
            return Err(config_err!(
                "corpus of {corpus_len} tokens is too small for {n_streams} streams of {seg_len}-token segments"
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slots = shard_len - seg_len;
        let pos = (0..n_streams).map(|_| rng.random_range(0..slots)).collect();
        Ok(TokenStreams {
            shard_len,
            seg_len,
            pos,
            caches: vec![SegmentCache::empty(n_layer); n_streams],
        })
    }

    pub fn n_streams(&self) -> usize {
        self.pos.len()
    }

    /// Next segment of streams `range`, advancing them.
    pub fn next(&mut self, corpus: &[usize], range: std::ops::Range<usize>) -> StreamBatch {
        let mut batch = StreamBatch {
            inputs: Vec::with_capacity(range.len() * self.seg_len),
            targets: Vec::with_capacity(range.len() * self.seg_len),
        };
        for b in range {
            if self.pos[b] + self.seg_len + 1 > self.shard_len {
                self.pos[b] = 0;
                self.caches[b] = SegmentCache::empty(self.caches[b].layers.len());
            }
            let start = b * self.shard_len + self.pos[b];
            batch.inputs.extend_from_slice(&corpus[start..start + self.seg_len]);
            batch.targets.extend_from_slice(&corpus[start + 1..start + self.seg_len + 1]);
            self.pos[b] += self.seg_len;
        }
        batch
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_corpora_are_seeded() {
        assert_eq!(arithmetic_corpus(500, 3), arithmetic_corpus(500, 3));
        assert_ne!(arithmetic_corpus(500, 3), arithmetic_corpus(500, 4));
        assert_eq!(arithmetic_corpus(500, 3).len(), 500);
        assert_eq!(ship_log_corpus(700, 1).len(), 700);
        let text = String::from_utf8(arithmetic_corpus(2000, 0)).unwrap();
        for line in text.lines().take(10) {
            let (lhs, rhs) = line.split_once('=').unwrap();
            assert!(!lhs.is_empty());
            rhs.parse::<i64>().unwrap();
        }
    }

    #[test]
    fn holdout_split() {
        let t: Vec<usize> = (0..100).collect();
        let (a, b) = split_holdout(&t, 0.1);
        assert_eq!(a.len(), 90);
        assert_eq!(b, (90..100).collect::<Vec<_>>());
    }

    #[test]
    fn streams_are_contiguous_and_wrap() {
        let corpus: Vec<usize> = (0..40).collect();
        let mut s = TokenStreams::new(40, 2, 4, 1, 0).unwrap();
        s.pos = vec![0, 0];
        let b = s.next(&corpus, 0..2);
        assert_eq!(b.inputs, vec![0, 1, 2, 3, 20, 21, 22, 23]);
        assert_eq!(b.targets, vec![1, 2, 3, 4, 21, 22, 23, 24]);
        let b = s.next(&corpus, 1..2);
        assert_eq!(b.inputs, vec![24, 25, 26, 27]);
        s.next(&corpus, 1..2);
        s.next(&corpus, 1..2);
        // 16 + 4 + 1 > 20: wrap
        let b = s.next(&corpus, 1..2);
        assert_eq!(b.inputs, vec![20, 21, 22, 23]);
        assert!(TokenStreams::new(9, 2, 4, 1, 0).is_err());
    }
}
