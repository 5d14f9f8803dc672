use rayon::prelude::*;
use serde::Serialize;

use crate::backbone::{GptAlpha, Session};
use crate::data::NiahSample;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockLoss {
    pub block_start: usize,
    pub mean_loss: f64,
}

/// Mean next-token loss over consecutive blocks of input positions,
/// averaged over documents. Position `t` scores the prediction of token
/// `t + 1`; the last block may be shorter.
pub fn eval_loss_by_position<T: Scalar>(model: &GptAlpha<T>, docs: &[Vec<usize>], block: usize) -> Result<Vec<BlockLoss>> {
    if block == 0 {
        return Err(Error::Invalid("block size must be positive".into()));
    }
    if docs.is_empty() || docs.iter().any(|d| d.len() < block + 1) {
        return Err(Error::Invalid(format!("every document needs at least {} tokens", block + 1)));
    }
    let per_doc: Vec<Vec<f64>> = docs.par_iter().map(|d| model.token_losses(d)).collect::<Result<_>>()?;
    let longest = per_doc.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::new();
    let mut start = 0;
    while start < longest {
        let (mut sum, mut count) = (0.0, 0usize);
        for losses in &per_doc {
            let end = (start + block).min(losses.len());
            if start < end {
                let block_mean = losses[start..end].iter().sum::<f64>() / (end - start) as f64;
                sum += block_mean;
                count += 1;
            }
        }
        out.push(BlockLoss {
            block_start: start,
            mean_loss: sum / count as f64,
        });
        start += block;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NiahResult {
    pub accuracy: f64,
    pub hits: Vec<bool>,
    pub outputs: Vec<Vec<usize>>,
}

/// Greedy decoding of `answer.len()` tokens after each context; a sample
/// counts when the continuation contains the answer.
pub fn eval_niah<T: Scalar>(model: &GptAlpha<T>, samples: &[NiahSample]) -> Result<NiahResult> {
    let outputs: Vec<Vec<usize>> = samples
        .par_iter()
        .map(|s| {
            let mut session = Session::new(model)?;
            let last = session
                .prefill(&s.context)?
                .ok_or_else(|| Error::Invalid("empty NIAH context".into()))?;
            session.greedy(&last, s.answer.len())
        })
        .collect::<Result<_>>()?;
    let hits: Vec<bool> = samples
        .iter()
        .zip(&outputs)
        .map(|(s, out)| !s.answer.is_empty() && out.windows(s.answer.len()).any(|w| w == s.answer.as_slice()))
        .collect();
    let accuracy = if hits.is_empty() {
        0.0
    } else {
        hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64
    };
    Ok(NiahResult { accuracy, hits, outputs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::GptAlphaConfig;
    use crate::data::{gen_niah, DistractorKind};
    use crate::kvm::KvmConfig;

    fn model() -> GptAlpha<f64> {
        GptAlpha::new(
            GptAlphaConfig {
                d_model: 8,
                n_heads: 2,
                n_layers: 1,
                kvm: KvmConfig {
                    chunk_len: 4,
                    rotary_width: 2,
                    ..KvmConfig::default()
                },
                ..GptAlphaConfig::default()
            },
            0,
        )
        .unwrap()
    }

    #[test]
    fn untrained_model_is_uniform_everywhere() {
        let docs = vec![(0..41).map(|i| i * 5 % 256).collect::<Vec<_>>(); 2];
        let blocks = eval_loss_by_position(&model(), &docs, 8).unwrap();
        assert_eq!(blocks.len(), 5);
        for b in &blocks {
            assert!((b.mean_loss - 256f64.ln()).abs() < 1e-12);
        }
        assert!(eval_loss_by_position(&model(), &docs, 64).is_err());
    }

    #[test]
    fn single_block_is_the_overall_mean() {
        let mut m = model();
        m.jitter(0.2, 4);
        let doc: Vec<usize> = (0..33).map(|i| (i * i) % 256).collect();
        let blocks = eval_loss_by_position(&m, &[doc.clone()], 32).unwrap();
        let losses = m.token_losses(&doc).unwrap();
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        assert_eq!(blocks.len(), 1);
        assert!((blocks[0].mean_loss - mean).abs() < 1e-12);
        let tiled = eval_loss_by_position(&m, &[doc], 8).unwrap();
        let avg = tiled.iter().map(|b| b.mean_loss).sum::<f64>() / tiled.len() as f64;
        assert!((avg - mean).abs() < 1e-12);
    }

    #[test]
    fn untrained_niah_is_near_chance() {
        let samples: Vec<_> = (0..4).map(|s| gen_niah(s, 60, 0.5, DistractorKind::NovelText).unwrap()).collect();
        let r = eval_niah(&model(), &samples).unwrap();
        assert_eq!(r.accuracy, 0.0);
        assert!(r.outputs.iter().all(|o| o.len() == 4));
    }
}
