#![allow(dead_code)]

use perco_core::diffusion::{NoiseSchedule, PredictionKind, Predictor};
use perco_core::model::{CodecModel, FrozenVq, LossInputs, ModelConfig, QuantizerConfig};
use perco_core::Result;
use perco_nn::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Predictor that knows the clean image and answers with the exact noise or
/// velocity implied by the current sample.
pub struct Oracle {
    pub x0: Tensor<f64>,
    pub schedule: NoiseSchedule,
    pub kind: PredictionKind,
}

impl Predictor<f64> for Oracle {
    fn predict(&mut self, x_t: &Tensor<f64>, t: usize, _conditional: bool) -> Result<Tensor<f64>> {
        let ab: f64 = self.schedule.betas()[..t].iter().map(|b| 1.0 - b).product();
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let data = x_t
            .data()
            .iter()
            .zip(self.x0.data())
            .map(|(&xt, &x0)| {
                let eps = (xt - a * x0) / b;
                match self.kind {
                    PredictionKind::Epsilon => eps,
                    PredictionKind::V => a * eps - b * x0,
                }
            })
            .collect();
        Ok(Tensor::new(x_t.shape(), data)?)
    }
}

/// 16x16 model small enough for tests.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        height: 16,
        width: 16,
        grid_h: 2,
        grid_w: 2,
        quantizer: QuantizerConfig::Vq { codes: 16, dim: 4 },
        encoder_width: 8,
        base_width: 8,
        groups: 4,
        diffusion_steps: 100,
        ..ModelConfig::default()
    }
}

/// Smooth test image in `[-1, 1]`.
pub fn pattern(c: usize, h: usize, w: usize, phase: f64) -> Tensor<f64> {
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        (0.9 * ((x as f64 * 0.4 + phase).sin() * (y as f64 * 0.3 + ch as f64).cos())).clamp(-1.0, 1.0)
    })
}

/// Tiny f64 model with every parameter jittered, so that the conditioning
/// path carries gradient.
pub fn jittered(seed: u64) -> CodecModel<f64> {
    let mut m = CodecModel::<f64>::new(
        ModelConfig {
            diffusion_steps: 100,
            ..tiny_config()
        },
        seed,
    )
    .unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(seed + 1);
    for p in m.store_mut().iter_mut() {
        let noise = Tensor::<f64>::randn(p.tensor.shape(), &mut r);
        for (v, n) in p.tensor.data_mut().iter_mut().zip(noise.data()) {
            *v += 0.1 * n;
        }
    }
    m.normalize_codebook().unwrap();
    m
}

pub struct Batch {
    pub x0: Tensor<f64>,
    pub eps: Tensor<f64>,
    pub t: Vec<usize>,
    pub ids: Vec<Option<usize>>,
}

pub fn batch() -> Batch {
    let x0 = Tensor::stack(&[pattern(3, 16, 16, 0.0), pattern(3, 16, 16, 1.3)]).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(3);
    Batch {
        eps: Tensor::randn(x0.shape(), &mut r),
        x0,
        t: vec![17, 64],
        ids: vec![Some(2), None],
    }
}

pub fn inputs(b: &Batch) -> LossInputs<'_, f64> {
    LossInputs {
        x0: &b.x0,
        t: &b.t,
        eps: &b.eps,
        ids: &b.ids,
        aux_weight: 0.5,
    }
}

/// Assignment and operands of the quantizer at the current parameters.
pub fn freeze(m: &CodecModel<f64>, b: &Batch) -> FrozenVq<f64> {
    let mut tape = Tape::new();
    let terms = m.loss_on_tape(&mut tape, &inputs(b), None).unwrap();
    let cb = m.codebook().unwrap();
    FrozenVq {
        quantized: cb.lookup(&terms.indices).unwrap(),
        features: terms.features.clone(),
        indices: terms.indices,
    }
}
