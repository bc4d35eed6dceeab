//! Training loop: batching, conditioning dropout, AdamW with linear warmup,
//! codebook maintenance, logging and resumable checkpoints.

use std::collections::BTreeMap;
use std::io::Write;

use perco_nn::{AdamW, AdamWConfig, Checkpoint, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::model::{drop_global, CodecModel, LossInputs, ModelConfig};
use crate::quantization::{self, DeadCodeTracker, DEAD_CODE_STEPS};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub batch: usize,
    pub steps: u64,
    /// Probability of replacing the global token by the null token.
    pub dropout: f64,
    /// Weight of the optional x0-space MSE term; 0 disables it.
    pub aux_weight: f64,
    pub weight_decay: f64,
    pub log_every: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-4,
            warmup_steps: 500,
            batch: 32,
            steps: 5000,
            dropout: 0.1,
            aux_weight: 0.0,
            weight_decay: 0.01,
            log_every: 100,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return invalid("peak learning rate must be positive");
        }
        if self.batch == 0 {
            return invalid("batch size must be positive");
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return invalid("dropout must be in [0, 1]");
        }
        if self.aux_weight < 0.0 || self.weight_decay < 0.0 {
            return invalid("loss and decay weights must be non-negative");
        }
        if self.log_every == 0 {
            return invalid("log interval must be positive");
        }
        Ok(())
    }

    /// Learning rate for 1-based step `k`: linear warmup, then constant.
    pub fn lr_at(&self, k: u64) -> f64 {
        if self.warmup_steps > 0 && k <= self.warmup_steps {
            self.peak_lr * k as f64 / self.warmup_steps as f64
        } else {
            self.peak_lr
        }
    }
}

/// Images `[C,H,W]` with their global token.
pub struct TrainingSet<'a> {
    pub images: &'a [Tensor<f32>],
    pub labels: &'a [usize],
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub prediction: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub lr: f64,
    pub indices: Vec<u32>,
    pub nulls: usize,
}

/// Running statistics between two log lines.
#[derive(Default)]
struct Window {
    steps: u64,
    loss: f64,
    prediction: f64,
    indices: Vec<u32>,
}

pub struct Trainer {
    model: CodecModel<f32>,
    config: TrainConfig,
    opt: AdamW<f32>,
    tracker: Option<DeadCodeTracker>,
    seed: u64,
    null_draws: u64,
    total_draws: u64,
    window: Window,
}

fn meta_get<T: std::str::FromStr>(meta: &BTreeMap<String, String>, k: &str) -> Result<T> {
    let v = meta
        .get(k)
        .ok_or_else(|| Error::Dataset(format!("checkpoint lacks {k}")))?;
    v.parse()
        .map_err(|_| Error::Dataset(format!("checkpoint has bad {k} = {v}")))
}

impl Trainer {
    pub fn new(model_config: ModelConfig, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let model = CodecModel::new(model_config, seed)?;
        Ok(Self::wrap(model, config, seed))
    }

    fn wrap(model: CodecModel<f32>, config: TrainConfig, seed: u64) -> Self {
        let opt = AdamW::new(
            AdamWConfig {
                weight_decay: config.weight_decay,
                ..AdamWConfig::default()
            },
            model.store(),
        );
        let tracker = model
            .codebook_id()
            .map(|_| DeadCodeTracker::new(model.config().quantizer.codebook_size(), DEAD_CODE_STEPS));
        Self {
            model,
            config,
            opt,
            tracker,
            seed,
            null_draws: 0,
            total_draws: 0,
            window: Window::default(),
        }
    }

    pub fn model(&self) -> &CodecModel<f32> {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Completed optimizer steps.
    pub fn step(&self) -> u64 {
        self.opt.step
    }

    /// Fraction of global tokens replaced by the null token so far.
    pub fn null_fraction(&self) -> f64 {
        if self.total_draws == 0 {
            0.0
        } else {
            self.null_draws as f64 / self.total_draws as f64
        }
    }

    pub fn dead_codes_reseeded(&self) -> u64 {
        self.tracker.as_ref().map_or(0, DeadCodeTracker::reseeded)
    }

    /// Generator for step `k`; depends only on the seed and the step.
    fn step_rng(&self, k: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(k);
        rng
    }

    /// One optimizer step on a random batch.
    pub fn train_step(&mut self, data: &TrainingSet<'_>) -> Result<StepReport> {
        if data.images.is_empty() || data.images.len() != data.labels.len() {
            return Err(Error::Dataset("training set is empty or unlabeled".into()));
        }
        let k = self.opt.step + 1;
        let mut rng = self.step_rng(k);
        let mc = self.model.config().clone();
        let b = self.config.batch;
        let picks: Vec<usize> = (0..b).map(|_| rng.random_range(0..data.images.len())).collect();
        let batch: Vec<Tensor<f32>> = picks.iter().map(|&i| data.images[i].clone()).collect();
        let x0 = Tensor::stack(&batch)?;
        let t: Vec<usize> = (0..b).map(|_| rng.random_range(1..=mc.diffusion_steps)).collect();
        let eps = Tensor::<f32>::randn(x0.shape(), &mut rng);
        let ids: Vec<Option<usize>> = picks
            .iter()
            .map(|&i| drop_global(data.labels[i], self.config.dropout, &mut rng))
            .collect();
        let nulls = ids.iter().filter(|i| i.is_none()).count();

        let mut tape = Tape::new();
        let inputs = LossInputs {
            x0: &x0,
            t: &t,
            eps: &eps,
            ids: &ids,
            aux_weight: self.config.aux_weight,
        };
        let terms = self.model.loss_on_tape(&mut tape, &inputs, None)?;
        let value = |v: Option<perco_nn::Var>| v.map_or(0.0, |v| tape.value(v).item() as f64);
        let loss = tape.value(terms.total).item() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: k,
                detail: format!(
                    "prediction={} codebook={} commitment={}",
                    value(Some(terms.prediction)),
                    value(terms.codebook),
                    value(terms.commitment)
                ),
            });
        }
        let report = StepReport {
            step: k,
            loss,
            prediction: value(Some(terms.prediction)),
            codebook: value(terms.codebook),
            commitment: value(terms.commitment),
            lr: self.config.lr_at(k),
            indices: terms.indices.clone(),
            nulls,
        };
        self.model.store_mut().zero_grad();
        tape.backward(terms.total, Some(self.model.store_mut()))?;
        self.opt.step(self.model.store_mut(), report.lr)?;
        self.model.store_mut().zero_grad();

        if let (Some(tracker), Some(id)) = (self.tracker.as_mut(), self.model.codebook_id()) {
            let dead = tracker.observe(&terms.indices);
            if !dead.is_empty() {
                let feats: Tensor<f32> = terms.features.cast();
                let codes = &mut self.model.store_mut().get_mut(id).tensor;
                quantization::reseed_codes(codes, &dead, &feats, &mut rng)?;
            }
        }
        self.model.normalize_codebook()?;
        self.null_draws += nulls as u64;
        self.total_draws += b as u64;
        Ok(report)
    }

    /// Runs until `config.steps` steps are complete, writing one log line per
    /// `log_every` steps and calling `on_checkpoint` at checkpoint intervals.
    pub fn run(
        &mut self,
        data: &TrainingSet<'_>,
        log: &mut dyn Write,
        mut on_checkpoint: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        while self.opt.step < self.config.steps {
            let r = self.train_step(data)?;
            let w = &mut self.window;
            w.steps += 1;
            w.loss += r.loss;
            w.prediction += r.prediction;
            w.indices.extend_from_slice(&r.indices);
            if r.step % self.config.log_every == 0 {
                let line = self.log_line(r.step, r.lr);
                writeln!(log, "{line}").map_err(|e| Error::io("writing training log", e))?;
                self.window = Window::default();
            }
            if self.config.checkpoint_every > 0 && r.step % self.config.checkpoint_every == 0 {
                on_checkpoint(self)?;
            }
        }
        Ok(())
    }

    fn log_line(&self, step: u64, lr: f64) -> String {
        let w = &self.window;
        let n = w.steps.max(1) as f64;
        let v = self.model.config().quantizer.codebook_size();
        let usage = quantization::usage_stats([w.indices.as_slice()], v);
        format!(
            "step={step} loss={:.6} pred={:.6} perplexity={:.3} lr={:.6e} null_frac={:.4} reseeded={}",
            w.loss / n,
            w.prediction / n,
            usage.perplexity,
            lr,
            self.null_fraction(),
            self.dead_codes_reseeded()
        )
    }

    /// Model, optimizer moments and counters needed for exact resumption.
    pub fn to_checkpoint(&self) -> Checkpoint<f32> {
        let mut ck = self.model.to_checkpoint();
        let m = &mut ck.meta;
        m.insert("train.step".into(), self.opt.step.to_string());
        m.insert("train.seed".into(), self.seed.to_string());
        m.insert("train.null_draws".into(), self.null_draws.to_string());
        m.insert("train.total_draws".into(), self.total_draws.to_string());
        if let Some(t) = &self.tracker {
            let idle: Vec<String> = t.idle().iter().map(u64::to_string).collect();
            m.insert("train.idle".into(), idle.join(","));
            m.insert("train.reseeded".into(), t.reseeded().to_string());
        }
        for (p, (mom1, mom2)) in self.model.store().iter().zip(&self.opt.moments) {
            let shape = p.tensor.shape();
            let t1 = Tensor::new(shape, mom1.clone()).expect("moment matches parameter");
            let t2 = Tensor::new(shape, mom2.clone()).expect("moment matches parameter");
            ck.tensors.push((format!("opt.m.{}", p.name), t1));
            ck.tensors.push((format!("opt.v.{}", p.name), t2));
        }
        ck
    }

    /// Restores a trainer written by [`Trainer::to_checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = CodecModel::from_checkpoint(ck)?;
        let seed = meta_get(&ck.meta, "train.seed")?;
        let mut tr = Self::wrap(model, config, seed);
        tr.opt.step = meta_get(&ck.meta, "train.step")?;
        tr.null_draws = meta_get(&ck.meta, "train.null_draws")?;
        tr.total_draws = meta_get(&ck.meta, "train.total_draws")?;
        if tr.tracker.is_some() {
            let idle: String = meta_get(&ck.meta, "train.idle")?;
            let idle = idle
                .split(',')
                .map(|s| s.parse().map_err(|_| Error::Dataset("bad train.idle".into())))
                .collect::<Result<Vec<u64>>>()?;
            if idle.len() != tr.model.config().quantizer.codebook_size() {
                return Err(Error::Dataset("train.idle has the wrong length".into()));
            }
            let reseeded = meta_get(&ck.meta, "train.reseeded")?;
            tr.tracker = Some(DeadCodeTracker::from_parts(idle, DEAD_CODE_STEPS, reseeded));
        }
        let names: Vec<String> = tr.model.store().iter().map(|p| p.name.clone()).collect();
        for (i, name) in names.iter().enumerate() {
            for (slot, prefix) in [(0, "opt.m."), (1, "opt.v.")] {
                let t = ck
                    .tensor(&format!("{prefix}{name}"))
                    .ok_or_else(|| Error::Dataset(format!("checkpoint lacks optimizer state for `{name}`")))?;
                let buf = if slot == 0 {
                    &mut tr.opt.moments[i].0
                } else {
                    &mut tr.opt.moments[i].1
                };
                if t.numel() != buf.len() {
                    return Err(Error::Dataset(format!(
                        "optimizer state for `{name}` has the wrong size"
                    )));
                }
                buf.copy_from_slice(t.data());
            }
        }
        Ok(tr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_is_linear_then_flat() {
        let c = TrainConfig {
            peak_lr: 2e-4,
            warmup_steps: 4,
            ..TrainConfig::default()
        };
        assert_eq!(c.lr_at(1), 5e-5);
        assert_eq!(c.lr_at(4), 2e-4);
        assert_eq!(c.lr_at(100), 2e-4);
        let none = TrainConfig { warmup_steps: 0, ..c };
        assert_eq!(none.lr_at(1), 2e-4);
    }

    #[test]
    fn invalid_configs() {
        let bad = |f: fn(&mut TrainConfig)| {
            let mut c = TrainConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.batch = 0));
        assert!(bad(|c| c.dropout = 1.5));
        assert!(bad(|c| c.peak_lr = 0.0));
        assert!(bad(|c| c.log_every = 0));
    }
}
