use std::fs::{File, OpenOptions};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backbone::{Checkpoint, GptAlpha};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor};
use crate::scalar::Scalar;
use crate::training::{optimizer_step, AdamState, TrainConfig};

/// Supplies training sequences. Implementations must be pure functions of
/// their construction parameters and `step`, so that runs are reproducible
/// and resumable.
pub trait BatchSource: Sync {
    /// `batch_size` sequences of `seq_len + 1` tokens, or `None` once the
    /// data is exhausted.
    fn batch(&self, step: usize, batch_size: usize, seq_len: usize) -> Option<Vec<Vec<usize>>>;
}

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Tokens consumed so far, counting targets.
    pub tokens: usize,
    /// Cumulative step time. Not written to the CSV, which stays identical
    /// across runs with the same seed.
    #[serde(skip)]
    pub wall_ms: u64,
}

/// Append-only CSV with columns `step,lr,loss,tokens`.
pub struct MetricsLog {
    writer: csv::Writer<File>,
}

impl MetricsLog {
    /// Opens `path` for appending, writing the header only to a new or empty file.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let fresh = file.metadata()?.len() == 0;
        let writer = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        Ok(Self { writer })
    }

    pub fn write(&mut self, m: &StepMetrics) -> Result<()> {
        self.writer.serialize(m).map_err(|e| Error::Format(e.to_string()))?;
        self.writer.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Vec<StepMetrics>> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
        r.deserialize()
            .map(|row| row.map_err(|e| Error::Format(e.to_string())))
            .collect()
    }
}

pub struct Trainer<T> {
    pub model: GptAlpha<T>,
    pub config: TrainConfig,
    pub opt: AdamState<T>,
    /// Optimizer steps taken.
    pub step: usize,
    pub tokens: usize,
    wall_ms: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: GptAlpha<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let opt = AdamState::zeros(&model.params);
        Ok(Self {
            model,
            config,
            opt,
            step: 0,
            tokens: 0,
            wall_ms: 0,
        })
    }

    /// Mean loss over the batch and its gradient for every parameter. Each
    /// sequence runs on its own graph; the sum runs in batch order.
    pub fn gradients(&self, batch: &[Vec<usize>]) -> Result<(f64, Vec<Tensor<T>>)> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let per_seq: Vec<Result<(f64, Vec<Tensor<T>>)>> = batch
            .par_iter()
            .map(|seq| {
                let mut g = Graph::new();
                let vars = self.model.place(&mut g, true)?;
                let loss = self.model.loss(&mut g, &vars, seq)?;
                g.backward(loss)?;
                let grads = (0..vars.all.len())
                    .map(|i| g.take_grad(vars.all[i]).unwrap_or_else(|| Tensor::zeros(self.model.params.value(i).shape().to_vec())))
                    .collect();
                Ok((g.value(loss).data()[0].as_f64(), grads))
            })
            .collect();
        let scale = T::of(1.0 / batch.len() as f64);
        let mut total = 0.0;
        let mut sum: Option<Vec<Tensor<T>>> = None;
        for r in per_seq {
            let (loss, grads) = r?;
            total += loss;
            match sum.as_mut() {
                None => sum = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(grads) {
                        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                            *x += *y;
                        }
                    }
                }
            }
        }
        let mut grads = sum.unwrap_or_default();
        for g in &mut grads {
            for x in g.data_mut() {
                *x *= scale;
            }
        }
        Ok((total / batch.len() as f64, grads))
    }

    pub fn train_step(&mut self, batch: &[Vec<usize>]) -> Result<StepMetrics> {
        let start = Instant::now();
        let (loss, grads) = self.gradients(batch)?;
        let lr = optimizer_step(&mut self.model.params, &grads, &mut self.opt, self.step + 1, &self.config)?;
        self.step += 1;
        self.tokens += batch.iter().map(|s| s.len().saturating_sub(1)).sum::<usize>();
        self.wall_ms += start.elapsed().as_millis() as u64;
        Ok(StepMetrics {
            step: self.step,
            lr,
            loss,
            tokens: self.tokens,
            wall_ms: self.wall_ms,
        })
    }

    /// Trains until `total_steps` or until the source runs dry, reporting
    /// every step to `log`. Returns the number of steps taken in this call.
    pub fn run(&mut self, source: &dyn BatchSource, mut log: impl FnMut(&StepMetrics) -> Result<()>) -> Result<usize> {
        let first = self.step;
        while self.step < self.config.total_steps {
            let Some(batch) = source.batch(self.step, self.config.batch_size, self.config.seq_len) else {
                break;
            };
            let m = self.train_step(&batch)?;
            log(&m)?;
        }
        Ok(self.step - first)
    }

    /// Parameters, Adam moments and progress counters in one container.
    pub fn checkpoint(&self) -> Checkpoint<T> {
        let mut ck = Checkpoint::from_model(&self.model);
        ck.config["train"] = json!(self.config);
        ck.config["step"] = json!(self.step);
        ck.config["tokens"] = json!(self.tokens);
        for i in 0..self.model.params.len() {
            let name = self.model.params.name(i);
            ck.tensors.push((format!("opt.m.{name}"), self.opt.m[i].clone()));
            ck.tensors.push((format!("opt.v.{name}"), self.opt.v[i].clone()));
        }
        ck
    }

    /// Restores a trainer saved by [`Trainer::checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        let model = ck.model()?;
        let config: TrainConfig = serde_json::from_value(
            ck.config
                .get("train")
                .cloned()
                .ok_or_else(|| Error::Format("checkpoint has no training state".into()))?,
        )?;
        let counter = |key: &str| ck.config.get(key).and_then(|v| v.as_u64()).unwrap_or(0);
        let mut opt = AdamState::zeros(&model.params);
        for i in 0..model.params.len() {
            let name = model.params.name(i);
            for (prefix, slot) in [("opt.m", &mut opt.m[i]), ("opt.v", &mut opt.v[i])] {
                let t = ck
                    .get(&format!("{prefix}.{name}"))
                    .ok_or_else(|| Error::Format(format!("checkpoint is missing {prefix}.{name}")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::Format(format!("{prefix}.{name} has shape {:?}", t.shape())));
                }
                *slot = t.clone();
            }
        }
        config.validate()?;
        Ok(Self {
            model,
            config,
            opt,
            step: counter("step") as usize,
            tokens: counter("tokens") as usize,
            wall_ms: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::GptAlphaConfig;
    use crate::kvm::KvmConfig;

    /// Fixed sequences cycled by step; stops after `limit` steps.
    struct Cycle {
        data: Vec<usize>,
        limit: usize,
    }

    impl BatchSource for Cycle {
        fn batch(&self, step: usize, batch_size: usize, seq_len: usize) -> Option<Vec<Vec<usize>>> {
            if step >= self.limit {
                return None;
            }
            Some(
                (0..batch_size)
                    .map(|b| {
                        let start = (step * batch_size + b) * 3 % (self.data.len() - seq_len);
                        self.data[start..start + seq_len + 1].to_vec()
                    })
                    .collect(),
            )
        }
    }

    fn setup(total: usize) -> (GptAlpha<f64>, TrainConfig, Cycle) {
        let cfg = GptAlphaConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            vocab_size: 5,
            kvm: KvmConfig {
                chunk_len: 2,
                n_bswa_chunks: 1,
                rotary_width: 2,
                ..KvmConfig::default()
            },
            ..GptAlphaConfig::default()
        };
        let train = TrainConfig {
            base_lr: 1e-2,
            warmup_steps: 2,
            total_steps: total,
            batch_size: 2,
            seq_len: 8,
            ..TrainConfig::default()
        };
        let data: Vec<usize> = (0..64).map(|i| (i * i + 3 * i) % 5).collect();
        (GptAlpha::new(cfg, 1).unwrap(), train, Cycle { data, limit: usize::MAX })
    }

    #[test]
    fn deterministic_and_resumable() {
        let (model, cfg, src) = setup(8);
        let mut full = Trainer::new(model.clone(), cfg.clone()).unwrap();
        let mut losses = Vec::new();
        full.run(&src, |m| {
            losses.push(m.loss);
            Ok(())
        })
        .unwrap();

        let mut first = Trainer::new(model, cfg).unwrap();
        let mut again = Vec::new();
        for _ in 0..3 {
            let batch = src.batch(first.step, 2, 8).unwrap();
            again.push(first.train_step(&batch).unwrap().loss);
        }
        let bytes = first.checkpoint().to_bytes();
        let mut resumed = Trainer::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        resumed
            .run(&src, |m| {
                again.push(m.loss);
                Ok(())
            })
            .unwrap();
        assert_eq!(losses, again);
        assert_eq!(resumed.model, full.model);
        assert_eq!(resumed.opt, full.opt);
        assert!(losses[7] < losses[0]);
    }

    #[test]
    fn exhaustion_stops_cleanly() {
        let (model, cfg, mut src) = setup(50);
        src.limit = 4;
        let mut t = Trainer::new(model, cfg).unwrap();
        assert_eq!(t.run(&src, |_| Ok(())).unwrap(), 4);
        assert_eq!(t.step, 4);
        assert_eq!(t.tokens, 4 * 2 * 8);
    }

    #[test]
    fn metrics_csv_appends() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let row = |step| StepMetrics {
            step,
            lr: 0.5,
            loss: 1.25,
            tokens: 10 * step,
            wall_ms: 0,
        };
        MetricsLog::open(&path).unwrap().write(&row(1)).unwrap();
        MetricsLog::open(&path).unwrap().write(&row(2)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,lr,loss,tokens\n"));
        assert_eq!(MetricsLog::read(&path).unwrap(), vec![row(1), row(2)]);
    }
}
