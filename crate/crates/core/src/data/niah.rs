use serde::{Deserialize, Serialize};

use crate::data::{byte_tokenize, stream_rng, text};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistractorKind {
    /// One short passage repeated.
    Repeated,
    /// Prose that never repeats a 32-byte window.
    NovelText,
}

/// A single-needle retrieval prompt. `context` ends with the query prefix
/// `{KEY:`; the expected continuation is `answer`.
#[derive(Clone, Debug, PartialEq)]
pub struct NiahSample {
    pub context: Vec<usize>,
    pub key: Vec<u8>,
    pub value: Vec<u8>,
    /// Byte offset of the needle record in `context`.
    pub needle_offset: usize,
    pub depth: f64,
    pub query: Vec<usize>,
    pub answer: Vec<usize>,
    pub distractor: DistractorKind,
}

/// Needle `{KEY:1234}` at `depth` of the filler, then the query `{KEY:`.
/// The context is exactly `context_len` tokens. Samples with the same seed
/// share key, value and needle position regardless of the distractor kind.
pub fn gen_niah(seed: u64, context_len: usize, depth: f64, distractor: DistractorKind) -> Result<NiahSample> {
    if !(0.0..=1.0).contains(&depth) {
        return Err(Error::Invalid(format!("needle depth {depth} outside [0, 1]")));
    }
    let mut rng = stream_rng(seed, 0);
    let key = text::random_key(&mut rng);
    let value = text::random_value(&mut rng);
    let needle = text::record(&key, &value);
    let query = text::query(&key);
    let Some(filler_len) = context_len.checked_sub(needle.len() + query.len()) else {
        return Err(Error::Invalid(format!(
            "context of {context_len} tokens cannot hold a {}-byte needle and a {}-byte query",
            needle.len(),
            query.len()
        )));
    };
    let mut filler_rng = stream_rng(seed, 1);
    let filler = match distractor {
        DistractorKind::Repeated => text::repeated_text(filler_len),
        DistractorKind::NovelText => text::novel_text(filler_len, &mut filler_rng)?,
    };
    let at = (depth * filler_len as f64).round() as usize;
    let mut bytes = Vec::with_capacity(context_len);
    bytes.extend_from_slice(&filler[..at]);
    bytes.extend_from_slice(&needle);
    bytes.extend_from_slice(&filler[at..]);
    bytes.extend_from_slice(&query);
    Ok(NiahSample {
        context: byte_tokenize(&bytes),
        needle_offset: at,
        depth,
        query: byte_tokenize(&query),
        answer: byte_tokenize(&value),
        key,
        value,
        distractor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::text::{has_repeated_window, NOVEL_WINDOW};

    #[test]
    fn needle_depth_anchors() {
        let s = gen_niah(1, 512, 0.0, DistractorKind::NovelText).unwrap();
        assert_eq!(s.needle_offset, 0);
        assert_eq!(s.context.len(), 512);
        let e = gen_niah(1, 512, 1.0, DistractorKind::NovelText).unwrap();
        assert_eq!(e.needle_offset + 10 + 5, 512);
        assert!(e.context.ends_with(&s.query));
    }

    #[test]
    fn answer_occurs_once() {
        for seed in 0..20 {
            let s = gen_niah(seed, 400, 0.3, DistractorKind::NovelText).unwrap();
            let hits = s.context.windows(4).filter(|w| *w == s.answer.as_slice()).count();
            assert_eq!(hits, 1);
            let bytes: Vec<u8> = s.context.iter().map(|&t| t as u8).collect();
            assert!(!has_repeated_window(&bytes, NOVEL_WINDOW));
        }
    }

    #[test]
    fn distractors_differ_only_in_filler() {
        let a = gen_niah(9, 300, 0.4, DistractorKind::NovelText).unwrap();
        let b = gen_niah(9, 300, 0.4, DistractorKind::Repeated).unwrap();
        assert_eq!((a.needle_offset, &a.key, &a.value), (b.needle_offset, &b.key, &b.value));
        assert_ne!(a.context, b.context);
        let n = a.needle_offset;
        assert_eq!(a.context[n..n + 10], b.context[n..n + 10]);
    }

    #[test]
    fn impossible_placement_errors() {
        assert!(gen_niah(0, 14, 0.5, DistractorKind::Repeated).is_err());
        assert!(gen_niah(0, 100, 1.5, DistractorKind::Repeated).is_err());
    }
}
