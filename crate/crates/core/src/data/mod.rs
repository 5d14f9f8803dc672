//! Byte tokenizer, synthetic corpora, needle-in-a-haystack samples and the
//! position-wise evaluations.

mod eval;
mod niah;
mod source;
pub mod text;

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};

pub use eval::{eval_loss_by_position, eval_niah, BlockLoss, NiahResult};
pub use niah::{gen_niah, DistractorKind, NiahSample};
pub use source::{CorpusSampler, GeneratedSource};

pub const BYTE_VOCAB: usize = 256;

pub fn byte_tokenize(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

pub fn byte_detokenize(ids: &[usize]) -> Result<Vec<u8>> {
    ids.iter()
        .map(|&id| {
            u8::try_from(id).map_err(|_| Error::TokenOutOfRange {
                id,
                vocab: BYTE_VOCAB,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusKind {
    /// Prose over a per-document invented vocabulary whose phrases recur.
    MarkovText,
    /// Prose with `{KEY:1234}` records, one per 64 bytes at most, each
    /// repeated later in the document.
    StructuredKv,
    /// Prose with one `{KEY:1234}` record at a uniform depth, closed by the
    /// record again as a query.
    Needle,
    /// A random printable string tiled with a log-uniform period in
    /// `[4, len / 2]`; dense copying practice at every distance.
    Periodic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub id: String,
    pub bytes: Vec<u8>,
    pub meta: Value,
}

impl Document {
    pub fn tokens(&self) -> Vec<usize> {
        byte_tokenize(&self.bytes)
    }
}

/// Per-document generator seeded by `(seed, stream)`.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Writes `record` over `bytes` at `offset`.
fn overwrite(bytes: &mut [u8], offset: usize, record: &[u8]) {
    bytes[offset..offset + record.len()].copy_from_slice(record);
}

/// One document of `len` bytes.
pub fn gen_document<R: Rng + ?Sized>(kind: CorpusKind, len: usize, rng: &mut R) -> Result<(Vec<u8>, Value)> {
    match kind {
        CorpusKind::MarkovText => {
            let n_words = rng.gen_range(16..=48);
            let lex = text::Lexicon::new(n_words, rng);
            Ok((lex.text(len, rng), json!({ "kind": "markov-text", "lexicon": n_words })))
        }
        CorpusKind::StructuredKv => {
            let novel = rng.gen_bool(0.5);
            let mut bytes = if novel {
                text::novel_text(len, rng)?
            } else {
                let lex = text::Lexicon::new(rng.gen_range(16..=48), rng);
                lex.text(len, rng)
            };
            let width = text::record(b"AAA", b"0000").len();
            let mut records = Vec::new();
            if len >= 4 * width {
                let mut used: Vec<std::ops::Range<usize>> = Vec::new();
                let mut keys = BTreeSet::new();
                let free = |used: &[std::ops::Range<usize>], at: usize| used.iter().all(|r| at + width <= r.start || at >= r.end);
                let most = (len / 64).max(1);
                for _ in 0..rng.gen_range((most + 1) / 2..=most) {
                    let key = text::random_key(rng);
                    if !keys.insert(key.clone()) {
                        continue;
                    }
                    let value = text::random_value(rng);
                    let half = (len / 2).max(width + 1) - width;
                    let (mut placed, mut tries) = (None, 0);
                    while placed.is_none() && tries < 64 {
                        tries += 1;
                        let at = rng.gen_range(0..half);
                        let q = rng.gen_range(at + width..=len - width);
                        if free(&used, at) && free(&used, q) && (q >= at + width) {
                            placed = Some((at, q));
                        }
                    }
                    if let Some((at, q)) = placed {
                        let rec = text::record(&key, &value);
                        overwrite(&mut bytes, at, &rec);
                        overwrite(&mut bytes, q, &rec);
                        used.push(at..at + width);
                        used.push(q..q + width);
                        records.push(json!({
                            "key": String::from_utf8_lossy(&key),
                            "value": String::from_utf8_lossy(&value),
                            "offset": at,
                            "query_offset": q,
                        }));
                    }
                }
            }
            let filler = if novel { "novel" } else { "markov" };
            Ok((bytes, json!({ "kind": "structured-kv", "filler": filler, "records": records })))
        }
        CorpusKind::Periodic => {
            let top = (len / 2).max(4) as f64;
            let period = 2f64.powf(rng.gen_range(2.0..=top.log2())).round() as usize;
            Ok((text::periodic_text(len, period, rng), json!({ "kind": "periodic", "period": period })))
        }
        CorpusKind::Needle => {
            let key = text::random_key(rng);
            let value = text::random_value(rng);
            let rec = text::record(&key, &value);
            let Some(filler_len) = len.checked_sub(2 * rec.len()) else {
                let (bytes, _) = gen_document(CorpusKind::MarkovText, len, rng)?;
                return Ok((bytes, json!({ "kind": "needle", "records": [] })));
            };
            let novel = rng.gen_bool(0.5);
            let filler = if novel {
                text::novel_text(filler_len, rng)?
            } else {
                text::Lexicon::new(rng.gen_range(16..=48), rng).text(filler_len, rng)
            };
            let at = rng.gen_range(0..=filler_len);
            let mut bytes = Vec::with_capacity(len);
            bytes.extend_from_slice(&filler[..at]);
            bytes.extend_from_slice(&rec);
            bytes.extend_from_slice(&filler[at..]);
            bytes.extend_from_slice(&rec);
            let record = json!({
                "key": String::from_utf8_lossy(&key),
                "value": String::from_utf8_lossy(&value),
                "offset": at,
                "query_offset": len - rec.len(),
            });
            let filler = if novel { "novel" } else { "markov" };
            Ok((bytes, json!({ "kind": "needle", "filler": filler, "records": [record] })))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_docs: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub kind: CorpusKind,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_docs: 16,
            min_len: 4096,
            max_len: 4096,
            kind: CorpusKind::MarkovText,
        }
    }
}

/// Documents with lengths uniform in `[min_len, max_len]`, a pure function
/// of `seed` and `spec`.
pub fn gen_corpus(seed: u64, spec: &CorpusSpec) -> Result<Vec<Document>> {
    if spec.min_len > spec.max_len {
        return Err(Error::Config("min_len exceeds max_len".into()));
    }
    (0..spec.n_docs)
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            let (bytes, meta) = gen_document(spec.kind, len, &mut rng)?;
            Ok(Document {
                id: format!("doc-{i:05}"),
                bytes,
                meta,
            })
        })
        .collect()
}

const CORPUS_HEADER: &str = "# kvm-corpus v1";

/// One line per document: `id<TAB>hex payload<TAB>metadata JSON`, after a
/// `# kvm-corpus v1` header line.
pub fn write_corpus<W: Write>(docs: &[Document], w: W) -> Result<()> {
    let mut w = BufWriter::new(w);
    writeln!(w, "{CORPUS_HEADER}")?;
    for d in docs {
        if d.id.contains(['\t', '\n']) {
            return Err(Error::Format(format!("document id {:?} contains a tab or newline", d.id)));
        }
        writeln!(w, "{}\t{}\t{}", d.id, hex::encode(&d.bytes), serde_json::to_string(&d.meta)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus<R: Read>(r: R) -> Result<Vec<Document>> {
    let mut lines = BufReader::new(r).lines();
    match lines.next() {
        Some(Ok(h)) if h.trim_end() == CORPUS_HEADER => {}
        _ => return Err(Error::Format("missing corpus header".into())),
    }
    let mut docs = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Format(format!("corpus line {}: {what}", n + 2));
        let mut parts = line.splitn(3, '\t');
        let (Some(id), Some(payload), Some(meta)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(bad("expected three tab-separated fields"));
        };
        docs.push(Document {
            id: id.to_string(),
            bytes: hex::decode(payload).map_err(|e| bad(&e.to_string()))?,
            meta: serde_json::from_str(meta).map_err(|e| bad(&e.to_string()))?,
        });
    }
    Ok(docs)
}

pub fn save_corpus(docs: &[Document], path: impl AsRef<Path>) -> Result<()> {
    write_corpus(docs, File::create(path)?)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Document>> {
    read_corpus(File::open(path)?)
}
