use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::Rng;

use crate::data::{byte_tokenize, gen_document, stream_rng, CorpusKind};
use crate::error::{Error, Result};
use crate::training::BatchSource;

/// Fresh documents every step, drawn from a weighted mixture of kinds. The
/// batch at a given step depends only on the seed and the step.
#[derive(Clone, Debug)]
pub struct GeneratedSource {
    seed: u64,
    kinds: Vec<CorpusKind>,
    pick: WeightedIndex<f64>,
    limit: Option<usize>,
}

impl GeneratedSource {
    pub fn new(seed: u64, mixture: &[(CorpusKind, f64)]) -> Result<Self> {
        let pick = WeightedIndex::new(mixture.iter().map(|m| m.1))
            .map_err(|e| Error::Config(format!("corpus mixture weights: {e}")))?;
        Ok(Self {
            seed,
            kinds: mixture.iter().map(|m| m.0).collect(),
            pick,
            limit: None,
        })
    }

    /// Stop after `steps` batches.
    pub fn with_limit(mut self, steps: usize) -> Self {
        self.limit = Some(steps);
        self
    }
}

impl BatchSource for GeneratedSource {
    fn batch(&self, step: usize, batch_size: usize, seq_len: usize) -> Option<Vec<Vec<usize>>> {
        if self.limit.is_some_and(|n| step >= n) {
            return None;
        }
        let batch = (0..batch_size)
            .map(|b| {
                let mut rng = stream_rng(self.seed, (step * batch_size + b) as u64);
                let kind = self.kinds[self.pick.sample(&mut rng)];
                let (bytes, _) = gen_document(kind, seq_len + 1, &mut rng).expect("document generation");
                byte_tokenize(&bytes)
            })
            .collect();
        Some(batch)
    }
}

/// Random crops of a fixed token corpus.
#[derive(Clone, Debug)]
pub struct CorpusSampler {
    docs: Vec<Vec<usize>>,
    seed: u64,
    limit: Option<usize>,
}

impl CorpusSampler {
    pub fn new(docs: Vec<Vec<usize>>, seed: u64) -> Self {
        Self { docs, seed, limit: None }
    }

    pub fn with_limit(mut self, steps: usize) -> Self {
        self.limit = Some(steps);
        self
    }
}

impl BatchSource for CorpusSampler {
    fn batch(&self, step: usize, batch_size: usize, seq_len: usize) -> Option<Vec<Vec<usize>>> {
        if self.limit.is_some_and(|n| step >= n) {
            return None;
        }
        let long: Vec<&Vec<usize>> = self.docs.iter().filter(|d| d.len() > seq_len).collect();
        if long.is_empty() {
            return None;
        }
        let batch = (0..batch_size)
            .map(|b| {
                let mut rng = stream_rng(self.seed, (step * batch_size + b) as u64);
                let doc = long[rng.gen_range(0..long.len())];
                let at = rng.gen_range(0..=doc.len() - seq_len - 1);
                doc[at..at + seq_len + 1].to_vec()
            })
            .collect();
        Some(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_batches_are_seeded_per_step() {
        let src = GeneratedSource::new(3, &[(CorpusKind::MarkovText, 1.0), (CorpusKind::StructuredKv, 1.0)]).unwrap();
        let a = src.batch(5, 3, 64).unwrap();
        assert_eq!(a.len(), 3);
        assert!(a.iter().all(|s| s.len() == 65));
        assert_eq!(a, src.batch(5, 3, 64).unwrap());
        assert_ne!(a, src.batch(6, 3, 64).unwrap());
        assert!(src.clone().with_limit(5).batch(5, 3, 64).is_none());
        assert!(GeneratedSource::new(0, &[(CorpusKind::MarkovText, 0.0)]).is_err());
    }

    #[test]
    fn sampler_crops_long_documents() {
        let docs = vec![vec![1; 5], (0..100).collect()];
        let s = CorpusSampler::new(docs, 0);
        for step in 0..10 {
            for seq in s.batch(step, 2, 16).unwrap() {
                assert_eq!(seq.len(), 17);
                assert!(seq.windows(2).all(|w| w[1] == w[0] + 1));
            }
        }
        assert!(s.batch(0, 1, 200).is_none());
    }
}
