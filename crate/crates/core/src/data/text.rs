use std::collections::HashSet;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};

/// Filler symbols: lowercase letters, space, comma and period. Digits,
/// uppercase letters and braces are reserved for records.
pub const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz ,.";

/// Window length that novel text never repeats.
pub const NOVEL_WINDOW: usize = 32;

const REPEATED: &[u8] = b"the grass is green. the sky is blue. the sun is yellow. here we go. there and back again. ";

/// Order-2 character chain shared by all generated prose, built once from a
/// fixed seed so every corpus speaks the same "language".
struct CharChain {
    /// `[a * n + b]` -> cumulative distribution over the next symbol.
    cdf: Vec<Vec<f64>>,
}

fn chain() -> &'static CharChain {
    static CHAIN: OnceLock<CharChain> = OnceLock::new();
    CHAIN.get_or_init(|| {
        let n = ALPHABET.len();
        let mut rng = ChaCha8Rng::seed_from_u64(0x6b76_6d5f_6c61_6e67);
        let gamma = Gamma::new(0.25, 1.0).expect("gamma");
        let cdf = (0..n * n)
            .map(|_| {
                let w: Vec<f64> = (0..n).map(|_| gamma.sample(&mut rng) + 1e-3).collect();
                let total: f64 = w.iter().sum();
                w.iter()
                    .scan(0.0, |acc, x| {
                        *acc += x / total;
                        Some(*acc)
                    })
                    .collect()
            })
            .collect();
        CharChain { cdf }
    })
}

fn symbol_index(b: u8) -> usize {
    ALPHABET.iter().position(|&a| a == b).unwrap_or(0)
}

impl CharChain {
    fn sample<R: Rng + ?Sized>(&self, a: u8, b: u8, rng: &mut R) -> usize {
        let row = &self.cdf[symbol_index(a) * ALPHABET.len() + symbol_index(b)];
        let u: f64 = rng.gen();
        row.iter().position(|&c| u < c).unwrap_or(ALPHABET.len() - 1)
    }
}

/// Character-chain prose in which no `NOVEL_WINDOW`-byte window occurs
/// twice. A symbol that would complete a repeated window is resampled.
pub fn novel_text<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Result<Vec<u8>> {
    let ch = chain();
    let mut out: Vec<u8> = Vec::with_capacity(len);
    let mut seen: HashSet<Vec<u8>> = HashSet::new();
    while out.len() < len {
        let (a, b) = match out.len() {
            0 => (b' ', b' '),
            1 => (b' ', out[0]),
            n => (out[n - 2], out[n - 1]),
        };
        let first = ch.sample(a, b, rng);
        let mut placed = false;
        for k in 0..ALPHABET.len() {
            let sym = ALPHABET[(first + k) % ALPHABET.len()];
            out.push(sym);
            if out.len() < NOVEL_WINDOW {
                placed = true;
                break;
            }
            let window = out[out.len() - NOVEL_WINDOW..].to_vec();
            if seen.insert(window) {
                placed = true;
                break;
            }
            out.pop();
        }
        if !placed {
            return Err(Error::Invalid("could not extend novel text without repeating a window".into()));
        }
    }
    Ok(out)
}

/// The same short passage repeated to length.
pub fn repeated_text(len: usize) -> Vec<u8> {
    REPEATED.iter().copied().cycle().take(len).collect()
}

/// A document-specific vocabulary of invented words whose order follows a
/// sparse first-order chain, so phrases recur across the whole document.
pub struct Lexicon {
    words: Vec<Vec<u8>>,
    next: Vec<Vec<usize>>,
}

impl Lexicon {
    pub fn new<R: Rng + ?Sized>(n_words: usize, rng: &mut R) -> Self {
        let letters = &ALPHABET[..26];
        let words = (0..n_words.max(1))
            .map(|_| {
                let len = rng.gen_range(2..=7);
                (0..len).map(|_| *letters.choose(rng).unwrap()).collect()
            })
            .collect::<Vec<Vec<u8>>>();
        let n = words.len();
        let next = (0..n)
            .map(|_| (0..rng.gen_range(2..=4)).map(|_| rng.gen_range(0..n)).collect())
            .collect();
        Self { words, next }
    }

    pub fn text<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Vec<u8> {
        let mut out = Vec::with_capacity(len + 8);
        let mut w = rng.gen_range(0..self.words.len());
        while out.len() < len {
            out.extend_from_slice(&self.words[w]);
            out.push(if rng.gen_bool(0.1) { b'.' } else { b' ' });
            w = if rng.gen_bool(0.15) {
                rng.gen_range(0..self.words.len())
            } else {
                *self.next[w].choose(rng).unwrap()
            };
        }
        out.truncate(len);
        out
    }
}

/// A random printable-ASCII string of length `period` tiled to `len` bytes.
pub fn periodic_text<R: Rng + ?Sized>(len: usize, period: usize, rng: &mut R) -> Vec<u8> {
    let unit: Vec<u8> = (0..period.max(1)).map(|_| rng.gen_range(b' '..=b'~')).collect();
    unit.iter().copied().cycle().take(len).collect()
}

/// `{KEY:1234}` records: three uppercase letters and four digits.
pub fn random_key<R: Rng + ?Sized>(rng: &mut R) -> Vec<u8> {
    (0..3).map(|_| rng.gen_range(b'A'..=b'Z')).collect()
}

pub fn random_value<R: Rng + ?Sized>(rng: &mut R) -> Vec<u8> {
    (0..4).map(|_| rng.gen_range(b'0'..=b'9')).collect()
}

pub fn record(key: &[u8], value: &[u8]) -> Vec<u8> {
    let mut r = Vec::with_capacity(key.len() + value.len() + 3);
    r.push(b'{');
    r.extend_from_slice(key);
    r.push(b':');
    r.extend_from_slice(value);
    r.push(b'}');
    r
}

/// The query prefix `{KEY:` whose continuation is the value.
pub fn query(key: &[u8]) -> Vec<u8> {
    let mut q = Vec::with_capacity(key.len() + 2);
    q.push(b'{');
    q.extend_from_slice(key);
    q.push(b':');
    q
}

/// True when some window of `width` bytes occurs twice.
pub fn has_repeated_window(bytes: &[u8], width: usize) -> bool {
    let mut seen = HashSet::new();
    bytes.windows(width).any(|w| !seen.insert(w))
}
