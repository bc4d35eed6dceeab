//! The trainable codec: hyper-encoder, quantizer and conditional denoiser.

use std::collections::BTreeMap;
use std::fmt;

use perco_nn::{kaiming_uniform, Checkpoint, ParamId, ParamStore, Real, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{NoiseSchedule, PredictionKind, Predictor};
use crate::error::{invalid, Error, Result};
use crate::quantization::{self, Codebook, FsqConfig, IndexGrid};

const GN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum QuantizerConfig {
    /// Learned ℓ2-normalized codebook of `codes` vectors of size `dim`.
    Vq {
        codes: usize,
        dim: usize,
    },
    Fsq(FsqConfig),
}

impl QuantizerConfig {
    pub fn codebook_size(&self) -> usize {
        match self {
            Self::Vq { codes, .. } => *codes,
            Self::Fsq(f) => f.size() as usize,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Vq { dim, .. } => *dim,
            Self::Fsq(f) => f.dim(),
        }
    }

    pub fn log2_v(&self) -> Result<u32> {
        quantization::log2_exact(self.codebook_size())
            .filter(|&b| b <= 16)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "codebook size {} must be 2^k, 1 <= k <= 16",
                    self.codebook_size()
                ))
            })
    }
}

impl fmt::Display for QuantizerConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Vq { codes, dim } => write!(f, "vq:{codes}x{dim}"),
            Self::Fsq(c) => {
                let lv: Vec<String> = c.levels().iter().map(u32::to_string).collect();
                write!(f, "fsq:{}", lv.join(","))
            }
        }
    }
}

impl std::str::FromStr for QuantizerConfig {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("bad quantizer `{s}`"));
        if let Some(rest) = s.strip_prefix("vq:") {
            let (v, d) = rest.split_once('x').ok_or_else(bad)?;
            return Ok(Self::Vq {
                codes: v.parse().map_err(|_| bad())?,
                dim: d.parse().map_err(|_| bad())?,
            });
        }
        if let Some(rest) = s.strip_prefix("fsq:") {
            let levels = rest
                .split(',')
                .map(|x| x.trim().parse().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            return Ok(Self::Fsq(FsqConfig::new(levels)?));
        }
        Err(bad())
    }
}

/// Architecture and geometry of a codec model. Stored in checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub quantizer: QuantizerConfig,
    pub encoder_width: usize,
    /// Base channel count of the denoiser.
    pub base_width: usize,
    pub groups: usize,
    /// Global token vocabulary size `G`.
    pub classes: usize,
    pub prediction: PredictionKind,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            height: 32,
            width: 32,
            grid_h: 4,
            grid_w: 4,
            quantizer: QuantizerConfig::Vq { codes: 256, dim: 8 },
            encoder_width: 32,
            base_width: 32,
            groups: 8,
            classes: 4,
            prediction: PredictionKind::V,
            diffusion_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ModelConfig {
    /// Downsampling factor `H / h`.
    pub fn factor(&self) -> usize {
        self.height / self.grid_h
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return invalid("image geometry must be positive");
        }
        if self.grid_h == 0 || self.grid_w == 0 || self.height % self.grid_h != 0 || self.width % self.grid_w != 0 {
            return Err(Error::Geometry(format!(
                "{}x{} image is not divisible into a {}x{} grid",
                self.height, self.width, self.grid_h, self.grid_w
            )));
        }
        if self.height / self.grid_h != self.width / self.grid_w {
            return Err(Error::Geometry("grid must downsample both axes equally".into()));
        }
        if self.height % 2 != 0 || self.width % 2 != 0 {
            return Err(Error::Geometry("image sides must be even".into()));
        }
        if self.height > u16::MAX as usize || self.width > u16::MAX as usize || self.grid_h > 255 || self.grid_w > 255 {
            return Err(Error::Geometry("geometry exceeds the container limits".into()));
        }
        self.quantizer.log2_v()?;
        if self.quantizer.dim() == 0 {
            return invalid("quantizer dimension must be positive");
        }
        let w = self.base_width;
        if w == 0 || w % 2 != 0 || self.encoder_width == 0 {
            return invalid("widths must be positive and the denoiser width even");
        }
        if self.groups == 0 || [w, 2 * w, 3 * w].iter().any(|c| c % self.groups != 0) {
            return invalid(format!(
                "{} groups do not divide widths {w}/{}/{}",
                self.groups,
                2 * w,
                3 * w
            ));
        }
        if self.classes == 0 || self.classes > 256 {
            return invalid("class count must be in 1..=256");
        }
        self.schedule()?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.diffusion_steps, self.beta_start, self.beta_end)
    }

    pub fn to_meta(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(format!("model.{k}"), v);
        };
        put("channels", self.channels.to_string());
        put("height", self.height.to_string());
        put("width", self.width.to_string());
        put("grid_h", self.grid_h.to_string());
        put("grid_w", self.grid_w.to_string());
        put("quantizer", self.quantizer.to_string());
        put("encoder_width", self.encoder_width.to_string());
        put("base_width", self.base_width.to_string());
        put("groups", self.groups.to_string());
        put("classes", self.classes.to_string());
        put("prediction", self.prediction.to_string());
        put("diffusion_steps", self.diffusion_steps.to_string());
        put("beta_start", format!("{:?}", self.beta_start));
        put("beta_end", format!("{:?}", self.beta_end));
        m
    }

    pub fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self> {
        fn get<T: std::str::FromStr>(meta: &BTreeMap<String, String>, k: &str) -> Result<T> {
            let v = meta
                .get(&format!("model.{k}"))
                .ok_or_else(|| Error::Dataset(format!("checkpoint lacks model.{k}")))?;
            v.parse()
                .map_err(|_| Error::Dataset(format!("checkpoint has bad model.{k} = {v}")))
        }
        let cfg = Self {
            channels: get(meta, "channels")?,
            height: get(meta, "height")?,
            width: get(meta, "width")?,
            grid_h: get(meta, "grid_h")?,
            grid_w: get(meta, "grid_w")?,
            quantizer: get(meta, "quantizer")?,
            encoder_width: get(meta, "encoder_width")?,
            base_width: get(meta, "base_width")?,
            groups: get(meta, "groups")?,
            classes: get(meta, "classes")?,
            prediction: get(meta, "prediction")?,
            diffusion_steps: get(meta, "diffusion_steps")?,
            beta_start: get(meta, "beta_start")?,
            beta_end: get(meta, "beta_end")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Returns `None` with probability `p`, otherwise `Some(id)`.
pub fn drop_global<R: Rng + ?Sized>(id: usize, p: f64, rng: &mut R) -> Option<usize> {
    if rng.random::<f64>() < p {
        None
    } else {
        Some(id)
    }
}

/// Sinusoidal embedding of integer timesteps, `[N, dim]`.
pub fn timestep_embedding<T: Real>(t: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = vec![T::zero(); t.len() * dim];
    for (n, &step) in t.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let arg = step as f64 * freq;
            data[n * dim + i] = T::from_f64(arg.sin());
            data[n * dim + half + i] = T::from_f64(arg.cos());
        }
    }
    Tensor::new(&[t.len(), dim], data).expect("sized above")
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    emb: Linear,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

#[derive(Clone, Debug)]
struct Layout {
    enc_in: Conv,
    enc_down: Vec<Conv>,
    enc_pool: usize,
    enc_out: Conv,
    codebook: Option<ParamId>,
    time1: Linear,
    time2: Linear,
    global: ParamId,
    conv_in: Conv,
    block0: ResBlock,
    down: Conv,
    block1: ResBlock,
    block2: ResBlock,
    norm_out: Norm,
    conv_out: Conv,
}

struct Builder<'a, T: Real> {
    store: ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Real> Builder<'_, T> {
    fn conv(&mut self, name: &str, ci: usize, co: usize, k: usize, stride: usize) -> Result<Conv> {
        let w = kaiming_uniform(&[co, ci, k, k], ci * k * k, self.rng);
        Ok(Conv {
            w: self.store.add(format!("{name}.w"), w)?,
            b: self.store.add(format!("{name}.b"), Tensor::zeros(&[co]))?,
            stride,
            pad: k / 2,
        })
    }

    fn linear(&mut self, name: &str, i: usize, o: usize) -> Result<Linear> {
        let w = kaiming_uniform(&[o, i], i, self.rng);
        Ok(Linear {
            w: self.store.add(format!("{name}.w"), w)?,
            b: self.store.add(format!("{name}.b"), Tensor::zeros(&[o]))?,
        })
    }

    fn norm(&mut self, name: &str, c: usize) -> Result<Norm> {
        Ok(Norm {
            gamma: self.store.add(format!("{name}.gamma"), Tensor::ones(&[c]))?,
            beta: self.store.add(format!("{name}.beta"), Tensor::zeros(&[c]))?,
        })
    }

    fn block(&mut self, name: &str, ci: usize, co: usize, e: usize) -> Result<ResBlock> {
        Ok(ResBlock {
            norm1: self.norm(&format!("{name}.norm1"), ci)?,
            conv1: self.conv(&format!("{name}.conv1"), ci, co, 3, 1)?,
            emb: self.linear(&format!("{name}.emb"), e, co)?,
            norm2: self.norm(&format!("{name}.norm2"), co)?,
            conv2: self.conv(&format!("{name}.conv2"), co, co, 3, 1)?,
            skip: if ci != co {
                Some(self.conv(&format!("{name}.skip"), ci, co, 1, 1)?)
            } else {
                None
            },
        })
    }
}

/// Tape variables produced by quantizing a feature grid.
pub struct LocalTerms {
    /// Quantized grid `[N,d,h,w]` (straight-through).
    pub grid: Var,
    pub codebook_loss: Option<Var>,
    pub commitment_loss: Option<Var>,
    pub indices: Vec<u32>,
    pub zero_norm: usize,
    /// Normalized pre-quantization features `[N*h*w, d]`.
    pub features: Tensor<f64>,
}

/// Quantization frozen at a reference point: fixed code assignment, with
/// stop-gradient operands and the straight-through offset held constant.
/// Its exact derivative equals the straight-through gradient at that point,
/// which makes the composite graph checkable by finite differences.
#[derive(Clone, Debug)]
pub struct FrozenVq<T> {
    pub indices: Vec<u32>,
    pub features: Tensor<T>,
    pub quantized: Tensor<T>,
}

/// Inputs of one diffusion training loss evaluation.
pub struct LossInputs<'a, T> {
    pub x0: &'a Tensor<T>,
    pub t: &'a [usize],
    pub eps: &'a Tensor<T>,
    pub ids: &'a [Option<usize>],
    pub aux_weight: f64,
}

pub struct LossTerms {
    pub total: Var,
    pub prediction: Var,
    pub codebook: Option<Var>,
    pub commitment: Option<Var>,
    pub aux: Option<Var>,
    pub indices: Vec<u32>,
    pub zero_norm: usize,
    pub features: Tensor<f64>,
}

/// Hyper-encoder, quantizer and denoiser with their parameters.
#[derive(Clone, Debug)]
pub struct CodecModel<T: Real> {
    config: ModelConfig,
    schedule: NoiseSchedule,
    store: ParamStore<T>,
    layout: Layout,
}

impl<T: Real> CodecModel<T> {
    /// Freshly initialized model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: ParamStore::new(),
            rng: &mut rng,
        };
        let (c, we, d) = (config.channels, config.encoder_width, config.quantizer.dim());
        let f = config.factor();
        let strided = (f.trailing_zeros() as usize).min(3);
        let enc_in = b.conv("enc.in", c, we, 3, 1)?;
        let enc_down = (0..strided)
            .map(|i| b.conv(&format!("enc.down{i}"), we, we, 3, 2))
            .collect::<Result<Vec<_>>>()?;
        let enc_out = b.conv("enc.out", we, d, 1, 1)?;
        let codebook = match &config.quantizer {
            QuantizerConfig::Vq { codes, dim } => {
                let cb = Codebook::<T>::random(*codes, *dim, b.rng)?;
                Some(b.store.add("quant.codebook", cb.codes().clone())?)
            }
            QuantizerConfig::Fsq(_) => None,
        };
        let w = config.base_width;
        let e = 4 * w;
        let time1 = b.linear("time.fc1", w, e)?;
        let time2 = b.linear("time.fc2", e, e)?;
        let table = Tensor::randn(&[config.classes + 1, e], b.rng);
        let global = b.store.add("global.embedding", table)?;
        let conv_in = b.conv("den.in", c + d, w, 3, 1)?;
        {
            // Extra conditioning channels start switched off.
            let t = &mut b.store.get_mut(conv_in.w).tensor;
            let ci = c + d;
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                if (i / 9) % ci >= c {
                    *v = T::zero();
                }
            }
        }
        let block0 = b.block("den.block0", w, w, e)?;
        let down = b.conv("den.down", w, 2 * w, 3, 2)?;
        let block1 = b.block("den.block1", 2 * w, 2 * w, e)?;
        let block2 = b.block("den.block2", 3 * w, w, e)?;
        let norm_out = b.norm("den.norm_out", w)?;
        let conv_out = b.conv("den.out", w, c, 3, 1)?;
        let layout = Layout {
            enc_in,
            enc_down,
            enc_pool: f >> strided,
            enc_out,
            codebook,
            time1,
            time2,
            global,
            conv_in,
            block0,
            down,
            block1,
            block2,
            norm_out,
            conv_out,
        };
        let store = b.store;
        Ok(Self {
            schedule: config.schedule()?,
            config,
            store,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Same model in another precision.
    pub fn cast<U: Real>(&self) -> CodecModel<U> {
        CodecModel {
            config: self.config.clone(),
            schedule: self.schedule.clone(),
            store: self.store.cast(),
            layout: self.layout.clone(),
        }
    }

    pub fn codebook(&self) -> Option<Codebook<T>> {
        let id = self.layout.codebook?;
        Codebook::from_codes(&self.store.get(id).tensor).ok()
    }

    pub fn codebook_id(&self) -> Option<ParamId> {
        self.layout.codebook
    }

    /// Kernel slice of the first denoiser convolution acting on the
    /// conditioning channels.
    pub fn conditioning_kernel(&self) -> Vec<T> {
        let c = self.config.channels;
        let ci = c + self.config.quantizer.dim();
        self.store
            .get(self.layout.conv_in.w)
            .tensor
            .data()
            .iter()
            .enumerate()
            .filter(|(i, _)| (i / 9) % ci >= c)
            .map(|(_, &v)| v)
            .collect()
    }

    /// Re-projects codebook rows onto the unit sphere.
    pub fn normalize_codebook(&mut self) -> Result<()> {
        if let Some(id) = self.layout.codebook {
            let t = &mut self.store.get_mut(id).tensor;
            let n = quantization::normalize_rows(t)?;
            t.data_mut().copy_from_slice(n.data());
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let mut ck = Checkpoint::new();
        ck.meta = self.config.to_meta();
        for p in self.store.iter() {
            ck.tensors.push((p.name.clone(), p.tensor.clone()));
        }
        ck
    }

    /// Rebuilds a model from checkpoint metadata and loads every parameter.
    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        let config = ModelConfig::from_meta(&ck.meta)?;
        let mut model = Self::new(config, 0)?;
        let names: Vec<String> = model.store.iter().map(|p| p.name.clone()).collect();
        for name in names {
            let t = ck
                .tensor(&name)
                .ok_or_else(|| Error::Dataset(format!("checkpoint lacks parameter `{name}`")))?;
            model.store.load(&name, t)?;
        }
        Ok(model)
    }

    fn conv(&self, tape: &mut Tape<T>, c: Conv, x: Var) -> Result<Var> {
        let w = tape.param(&self.store, c.w);
        let b = tape.param(&self.store, c.b);
        Ok(tape.conv2d(x, w, b, c.stride, c.pad)?)
    }

    fn linear(&self, tape: &mut Tape<T>, l: Linear, x: Var) -> Result<Var> {
        let w = tape.param(&self.store, l.w);
        let b = tape.param(&self.store, l.b);
        Ok(tape.linear(x, w, Some(b))?)
    }

    fn norm(&self, tape: &mut Tape<T>, n: Norm, x: Var) -> Result<Var> {
        let g = tape.param(&self.store, n.gamma);
        let b = tape.param(&self.store, n.beta);
        Ok(tape.group_norm(x, self.config.groups, g, b, GN_EPS)?)
    }

    fn block(&self, tape: &mut Tape<T>, blk: &ResBlock, x: Var, emb: Var) -> Result<Var> {
        let h = self.norm(tape, blk.norm1, x)?;
        let h = tape.silu(h);
        let h = self.conv(tape, blk.conv1, h)?;
        let e = self.linear(tape, blk.emb, emb)?;
        let s = tape.shape(e).to_vec();
        let e = tape.reshape(e, &[s[0], s[1], 1, 1])?;
        let h = tape.add(h, e)?;
        let h = self.norm(tape, blk.norm2, h)?;
        let h = tape.silu(h);
        let h = self.conv(tape, blk.conv2, h)?;
        let skip = match blk.skip {
            Some(c) => self.conv(tape, c, x)?,
            None => x,
        };
        Ok(tape.add(skip, h)?)
    }

    fn check_images(&self, shape: &[usize], what: &str) -> Result<()> {
        let c = &self.config;
        if shape.len() != 4 || shape[1..] != [c.channels, c.height, c.width] {
            return Err(Error::Geometry(format!(
                "{what} {shape:?} does not match model geometry [N,{},{},{}]",
                c.channels, c.height, c.width
            )));
        }
        Ok(())
    }

    /// Hyper-encoder on a batch `[N,C,H,W]`, producing `[N,d,h,w]`.
    pub fn encode_on_tape(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        self.check_images(tape.shape(x), "encoder input")?;
        let l = &self.layout;
        let h = self.conv(tape, l.enc_in, x)?;
        let mut h = tape.silu(h);
        for &c in &l.enc_down {
            let y = self.conv(tape, c, h)?;
            h = tape.silu(y);
        }
        if l.enc_pool > 1 {
            h = tape.avg_pool2d(h, l.enc_pool)?;
        }
        self.conv(tape, l.enc_out, h)
    }

    /// Quantizes `[N,d,h,w]` features. With `frozen`, the assignment and
    /// stop-gradient operands come from the reference point instead.
    pub fn quantize_on_tape(&self, tape: &mut Tape<T>, feats: Var, frozen: Option<&FrozenVq<T>>) -> Result<LocalTerms> {
        let s = tape.shape(feats).to_vec();
        let (n, d, h, w) = (s[0], s[1], s[2], s[3]);
        let p = tape.permute(feats, &[0, 2, 3, 1])?;
        let rows = tape.reshape(p, &[n * h * w, d])?;
        let (out, cb_loss, commit, indices, zero_norm, features) = match (&self.config.quantizer, frozen) {
            (QuantizerConfig::Vq { .. }, None) => {
                let table = tape.param(&self.store, self.layout.codebook.expect("vq has a codebook"));
                let vq = quantization::vq_on_tape(tape, rows, table)?;
                let normed = quantization::normalize_rows_or_zero(tape.value(rows));
                (
                    vq.output,
                    Some(vq.codebook_loss),
                    Some(vq.commitment_loss),
                    vq.indices,
                    vq.zero_norm,
                    normed,
                )
            }
            (QuantizerConfig::Vq { .. }, Some(fz)) => {
                let table = tape.param(&self.store, self.layout.codebook.expect("vq has a codebook"));
                let normed = tape.l2_normalize_rows(rows, quantization::NORM_EPS)?;
                let ids: Vec<usize> = fz.indices.iter().map(|&i| i as usize).collect();
                let q = tape.embedding(table, &ids)?;
                let f0 = tape.constant(fz.features.clone());
                let q0 = tape.constant(fz.quantized.clone());
                let cb = tape.mse(f0, q)?;
                let cm = tape.mse(normed, q0)?;
                let offset = tape.constant(fz.quantized.zip_map(&fz.features, |a, b| a - b)?);
                let out = tape.add(normed, offset)?;
                let normed_val = tape.value(normed).cast();
                (out, Some(cb), Some(cm), fz.indices.clone(), 0, normed_val)
            }
            (QuantizerConfig::Fsq(cfg), _) => {
                let feats64 = tape.value(rows).cast();
                let (out, idx) = quantization::fsq_on_tape(tape, rows, cfg)?;
                (out, None, None, idx, 0, feats64)
            }
        };
        let grid = tape.reshape(out, &[n, h, w, d])?;
        let grid = tape.permute(grid, &[0, 3, 1, 2])?;
        Ok(LocalTerms {
            grid,
            codebook_loss: cb_loss,
            commitment_loss: commit,
            indices,
            zero_norm,
            features,
        })
    }

    /// Bilinear upsampling of a `[N,d,h,w]` grid to the image size.
    pub fn upsample_on_tape(&self, tape: &mut Tape<T>, grid: Var) -> Result<Var> {
        Ok(tape.upsample_bilinear(grid, self.config.height, self.config.width)?)
    }

    /// Denoiser forward pass. `ids[i] = None` selects the null embedding.
    pub fn denoise_on_tape(
        &self,
        tape: &mut Tape<T>,
        x_t: Var,
        t: &[usize],
        local: Var,
        ids: &[Option<usize>],
    ) -> Result<Var> {
        let c = &self.config;
        self.check_images(tape.shape(x_t), "noisy input")?;
        let n = tape.shape(x_t)[0];
        let ls = tape.shape(local);
        if ls != [n, c.quantizer.dim(), c.height, c.width] {
            return Err(Error::Geometry(format!(
                "local conditioning {ls:?} does not match [{n},{},{},{}]",
                c.quantizer.dim(),
                c.height,
                c.width
            )));
        }
        if t.len() != n || ids.len() != n {
            return invalid(format!("batch of {n} needs {n} timesteps and ids"));
        }
        let mut rows = Vec::with_capacity(n);
        for id in ids {
            match *id {
                Some(g) if g >= c.classes => return invalid(format!("global id {g} outside 0..{}", c.classes)),
                Some(g) => rows.push(g),
                None => rows.push(c.classes),
            }
        }
        let l = &self.layout;
        let temb = tape.constant(timestep_embedding(t, c.base_width));
        let e = self.linear(tape, l.time1, temb)?;
        let e = tape.silu(e);
        let e = self.linear(tape, l.time2, e)?;
        let table = tape.param(&self.store, l.global);
        let g = tape.embedding(table, &rows)?;
        let e = tape.add(e, g)?;
        let emb = tape.silu(e);

        let x = tape.concat(&[x_t, local], 1)?;
        let h0 = self.conv(tape, l.conv_in, x)?;
        let h0 = self.block(tape, &l.block0, h0, emb)?;
        let h1 = self.conv(tape, l.down, h0)?;
        let h1 = self.block(tape, &l.block1, h1, emb)?;
        let up = tape.upsample_nearest(h1, 2)?;
        let h = tape.concat(&[up, h0], 1)?;
        let h = self.block(tape, &l.block2, h, emb)?;
        let h = self.norm(tape, l.norm_out, h)?;
        let h = tape.silu(h);
        self.conv(tape, l.conv_out, h)
    }

    /// Full training objective for one batch.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape<T>,
        inp: &LossInputs<'_, T>,
        frozen: Option<&FrozenVq<T>>,
    ) -> Result<LossTerms> {
        let n = inp.x0.shape()[0];
        if inp.eps.shape() != inp.x0.shape() || inp.t.len() != n || inp.ids.len() != n {
            return invalid("loss inputs disagree in batch shape");
        }
        let x0 = tape.constant(inp.x0.clone());
        let feats = self.encode_on_tape(tape, x0)?;
        let local = self.quantize_on_tape(tape, feats, frozen)?;
        let up = self.upsample_on_tape(tape, local.grid)?;

        let per = inp.x0.numel() / n.max(1);
        let mut x_t = Vec::with_capacity(inp.x0.numel());
        let mut target = Vec::with_capacity(inp.x0.numel());
        let mut ab = Vec::with_capacity(n);
        for (i, &t) in inp.t.iter().enumerate() {
            let a = self.schedule.alpha_bar(t)?;
            ab.push(a);
            let (sa, sb) = (T::from_f64(a.sqrt()), T::from_f64((1.0 - a).sqrt()));
            let xs = &inp.x0.data()[i * per..(i + 1) * per];
            let es = &inp.eps.data()[i * per..(i + 1) * per];
            for (&x, &e) in xs.iter().zip(es) {
                x_t.push(sa * x + sb * e);
                target.push(match self.config.prediction {
                    PredictionKind::Epsilon => e,
                    PredictionKind::V => sa * e - sb * x,
                });
            }
        }
        let x_t_val = Tensor::new(inp.x0.shape(), x_t)?;
        let x_t = tape.constant(x_t_val.clone());
        let target = tape.constant(Tensor::new(inp.x0.shape(), target)?);
        let out = self.denoise_on_tape(tape, x_t, inp.t, up, inp.ids)?;
        let prediction = tape.mse(out, target)?;
        let mut total = prediction;
        if let Some(cb) = local.codebook_loss {
            total = tape.add(total, cb)?;
        }
        if let Some(cm) = local.commitment_loss {
            let w = tape.scale(cm, T::from_f64(quantization::COMMITMENT_WEIGHT));
            total = tape.add(total, w)?;
        }
        let mut aux = None;
        if inp.aux_weight > 0.0 {
            // x0_hat is linear in the model output: a * x_t + b * out.
            let (mut ca, mut cb) = (Vec::with_capacity(n), Vec::with_capacity(n));
            for &a in &ab {
                let (x_coef, o_coef) = match self.config.prediction {
                    PredictionKind::V => (a.sqrt(), -(1.0 - a).sqrt()),
                    PredictionKind::Epsilon => (1.0 / a.sqrt(), -((1.0 - a) / a).sqrt()),
                };
                ca.push(T::from_f64(x_coef));
                cb.push(T::from_f64(o_coef));
            }
            let ca = tape.constant(Tensor::new(&[n, 1, 1, 1], ca)?);
            let cb = tape.constant(Tensor::new(&[n, 1, 1, 1], cb)?);
            let xa = tape.mul(x_t, ca)?;
            let ob = tape.mul(out, cb)?;
            let x0_hat = tape.add(xa, ob)?;
            let a = tape.mse(x0_hat, x0)?;
            let wa = tape.scale(a, T::from_f64(inp.aux_weight));
            total = tape.add(total, wa)?;
            aux = Some(a);
        }
        Ok(LossTerms {
            total,
            prediction,
            codebook: local.codebook_loss,
            commitment: local.commitment_loss,
            aux,
            indices: local.indices,
            zero_norm: local.zero_norm,
            features: local.features,
        })
    }

    /// Feature grid `[h,w,d]` of a single `[C,H,W]` image.
    pub fn hyper_encode(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let s = image.shape().to_vec();
        let mut tape = Tape::new();
        let x = tape.constant(image.reshape(&[1, s[0], s[1], s[2]])?);
        let f = self.encode_on_tape(&mut tape, x)?;
        let p = tape.permute(f, &[0, 2, 3, 1])?;
        let fs = tape.shape(p).to_vec();
        Ok(tape.value(p).reshape(&fs[1..])?)
    }

    /// Quantized index grids of a batch `[N,C,H,W]`.
    pub fn encode_indices(&self, images: &Tensor<T>) -> Result<Vec<IndexGrid>> {
        self.check_images(images.shape(), "image batch")?;
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let f = self.encode_on_tape(&mut tape, x)?;
        let p = tape.permute(f, &[0, 2, 3, 1])?;
        let feats = tape.value(p).clone();
        let n = images.shape()[0];
        let cb = match &self.config.quantizer {
            QuantizerConfig::Vq { .. } => Some(
                self.codebook()
                    .ok_or_else(|| Error::InvalidArgument("codebook has a zero row".into()))?,
            ),
            QuantizerConfig::Fsq(_) => None,
        };
        (0..n)
            .map(|i| {
                let one = feats.select(i)?;
                Ok(match (&self.config.quantizer, &cb) {
                    (QuantizerConfig::Fsq(cfg), _) => quantization::fsq_quantize(&one, cfg)?.0,
                    (_, Some(cb)) => quantization::quantize(&one, cb)?.0,
                    (_, None) => unreachable!("vq always has a codebook"),
                })
            })
            .collect()
    }

    /// Code vectors of index grids as a `[N,d,h,w]` tensor.
    pub fn local_from_indices(&self, grids: &[IndexGrid]) -> Result<Tensor<T>> {
        let (h, w, d) = (self.config.grid_h, self.config.grid_w, self.config.quantizer.dim());
        let v = self.config.quantizer.codebook_size();
        let mut data = vec![T::zero(); grids.len() * d * h * w];
        for (n, g) in grids.iter().enumerate() {
            if (g.h, g.w) != (h, w) {
                return Err(Error::Geometry(format!("grid {}x{} vs model {h}x{w}", g.h, g.w)));
            }
            g.check_range(v)?;
            for (p, &idx) in g.indices.iter().enumerate() {
                let code: Vec<T> = match &self.config.quantizer {
                    QuantizerConfig::Vq { .. } => self.store.get(self.layout.codebook.expect("vq")).tensor.data()
                        [idx as usize * d..(idx as usize + 1) * d]
                        .to_vec(),
                    QuantizerConfig::Fsq(cfg) => cfg.code_value(idx)?.into_iter().map(T::from_f64).collect(),
                };
                for (c, &val) in code.iter().enumerate() {
                    data[((n * d + c) * h) * w + p] = val;
                }
            }
        }
        Ok(Tensor::new(&[grids.len(), d, h, w], data)?)
    }

    /// Upsampled conditioning `[N,d,H,W]` for index grids.
    pub fn conditioning(&self, grids: &[IndexGrid]) -> Result<Tensor<T>> {
        let local = self.local_from_indices(grids)?;
        let mut tape = Tape::new();
        let l = tape.constant(local);
        let up = self.upsample_on_tape(&mut tape, l)?;
        Ok(tape.value(up).clone())
    }

    /// Denoiser output without gradient tracking.
    pub fn denoise(&self, x_t: &Tensor<T>, t: &[usize], local: &Tensor<T>, ids: &[Option<usize>]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(x_t.clone());
        let l = tape.constant(local.clone());
        let out = self.denoise_on_tape(&mut tape, x, t, l, ids)?;
        Ok(tape.value(out).clone())
    }
}

/// Denoiser bound to fixed conditioning, as seen by the sampler.
pub struct Conditioned<'a, T: Real> {
    pub model: &'a CodecModel<T>,
    /// Upsampled local conditioning `[N,d,H,W]`.
    pub local: Tensor<T>,
    pub ids: Vec<Option<usize>>,
}

impl<T: Real> Predictor<T> for Conditioned<'_, T> {
    fn predict(&mut self, x_t: &Tensor<T>, t: usize, conditional: bool) -> Result<Tensor<T>> {
        let n = x_t.shape()[0];
        let ids: Vec<Option<usize>> = if conditional { self.ids.clone() } else { vec![None; n] };
        self.model.denoise(x_t, &vec![t; n], &self.local, &ids)
    }

    fn is_guided(&self) -> bool {
        self.ids.iter().any(Option::is_some)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            height: 16,
            width: 16,
            grid_h: 2,
            grid_w: 2,
            quantizer: QuantizerConfig::Vq { codes: 16, dim: 4 },
            encoder_width: 8,
            base_width: 8,
            groups: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn quantizer_round_trips_through_text() {
        for q in ["vq:256x8", "fsq:8,8,8"] {
            assert_eq!(q.parse::<QuantizerConfig>().unwrap().to_string(), q);
        }
        assert!("vq:12".parse::<QuantizerConfig>().is_err());
    }

    #[test]
    fn meta_round_trip() {
        let c = tiny();
        assert_eq!(ModelConfig::from_meta(&c.to_meta()).unwrap(), c);
    }

    #[test]
    fn rejects_indivisible_geometry() {
        let c = ModelConfig {
            grid_h: 3,
            grid_w: 3,
            ..ModelConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Geometry(_))));
    }

    #[test]
    fn extended_kernel_starts_at_zero() {
        let m = CodecModel::<f32>::new(tiny(), 3).unwrap();
        let k = m.conditioning_kernel();
        assert_eq!(k.len(), 8 * 4 * 9);
        assert!(k.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parameter_names_are_unique_and_checkpoint_round_trips() {
        let m = CodecModel::<f32>::new(tiny(), 5).unwrap();
        let ck = m.to_checkpoint();
        let back = CodecModel::<f32>::from_checkpoint(&ck).unwrap();
        for (a, b) in m.store().iter().zip(back.store().iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.data(), b.tensor.data());
        }
    }

    #[test]
    fn drop_probability_extremes() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        assert!((0..1000).all(|_| drop_global(2, 0.0, &mut r) == Some(2)));
        assert!((0..1000).all(|_| drop_global(2, 1.0, &mut r).is_none()));
    }
}
