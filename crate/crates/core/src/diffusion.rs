//! Gaussian diffusion: noise schedules, the forward process, prediction
//! parameterizations, and DDIM / DDPM sampling with classifier-free guidance.
//!
//! Timesteps are 1-based (`1..=T`). Index 0 denotes clean data, where the
//! cumulative signal level is exactly 1.

use std::fmt;
use std::str::FromStr;

use perco_nn::{Real, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};

/// Per-step noise variances and their cumulative signal retention.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    /// `steps` betas linearly interpolated from `beta_start` to `beta_end`
    /// inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return invalid("schedule needs at least one step");
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return invalid(format!(
                "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            ));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return invalid("schedule needs at least one step");
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return invalid(format!("beta {b} outside (0, 1)"));
        }
        let mut acc = 1.0;
        let alphas_cumprod = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alphas_cumprod })
    }

    /// Total number of diffusion steps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return invalid(format!("timestep {t} outside 1..={}", self.len()));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.betas[t - 1])
    }

    /// Cumulative product of `1 - beta` up to `t`; 1 at `t = 0`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check(t)?;
        Ok(self.alphas_cumprod[t - 1])
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }
}

/// What the denoiser predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictionKind {
    Epsilon,
    /// `v = sqrt(abar) * eps - sqrt(1 - abar) * x0`
    V,
}

impl fmt::Display for PredictionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PredictionKind::Epsilon => "epsilon",
            PredictionKind::V => "v",
        })
    }
}

impl FromStr for PredictionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epsilon" | "eps" => Ok(Self::Epsilon),
            "v" => Ok(Self::V),
            _ => invalid(format!("unknown prediction kind `{s}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerKind {
    Ddim,
    Ddpm,
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplerKind::Ddim => "ddim",
            SamplerKind::Ddpm => "ddpm",
        })
    }
}

impl FromStr for SamplerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddim" => Ok(Self::Ddim),
            "ddpm" => Ok(Self::Ddpm),
            _ => invalid(format!("unknown sampler `{s}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    pub kind: SamplerKind,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            cfg_scale: 3.0,
            kind: SamplerKind::Ddim,
            seed: 0,
        }
    }
}

fn lincomb<T: Real>(a: &Tensor<T>, ca: f64, b: &Tensor<T>, cb: f64) -> Result<Tensor<T>> {
    let (ca, cb) = (T::from_f64(ca), T::from_f64(cb));
    Ok(a.zip_map(b, |x, y| ca * x + cb * y)?)
}

/// `sqrt(abar) * x0 + sqrt(1 - abar) * eps` for an explicit signal level.
pub fn forward_marginal_at<T: Real>(x0: &Tensor<T>, eps: &Tensor<T>, alpha_bar: f64) -> Result<Tensor<T>> {
    lincomb(x0, alpha_bar.sqrt(), eps, (1.0 - alpha_bar).sqrt())
}

/// Closed-form sample of `x_t` given `x0` and the noise `eps`.
pub fn forward_marginal<T: Real>(x0: &Tensor<T>, t: usize, eps: &Tensor<T>, s: &NoiseSchedule) -> Result<Tensor<T>> {
    s.check(t)?;
    forward_marginal_at(x0, eps, s.alpha_bar(t)?)
}

/// One ancestral draw `x_t ~ N(sqrt(1 - beta_t) x_{t-1}, beta_t I)`.
pub fn forward_step<T: Real, R: Rng + ?Sized>(
    x_prev: &Tensor<T>,
    t: usize,
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let beta = s.beta(t)?;
    forward_step_with_beta(x_prev, beta, rng)
}

pub fn forward_step_with_beta<T: Real, R: Rng + ?Sized>(
    x_prev: &Tensor<T>,
    beta: f64,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let z = Tensor::randn(x_prev.shape(), rng);
    lincomb(x_prev, (1.0 - beta).sqrt(), &z, beta.sqrt())
}

pub fn v_from_x0_eps_at<T: Real>(x0: &Tensor<T>, eps: &Tensor<T>, alpha_bar: f64) -> Result<Tensor<T>> {
    lincomb(eps, alpha_bar.sqrt(), x0, -(1.0 - alpha_bar).sqrt())
}

pub fn v_from_x0_eps<T: Real>(x0: &Tensor<T>, eps: &Tensor<T>, t: usize, s: &NoiseSchedule) -> Result<Tensor<T>> {
    v_from_x0_eps_at(x0, eps, s.alpha_bar(t)?)
}

/// Recovers `(x0, eps)` from a velocity and the noisy sample it refers to.
pub fn x0_eps_from_v_at<T: Real>(v: &Tensor<T>, x_t: &Tensor<T>, alpha_bar: f64) -> Result<(Tensor<T>, Tensor<T>)> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok((lincomb(x_t, a, v, -b)?, lincomb(x_t, b, v, a)?))
}

pub fn x0_eps_from_v<T: Real>(
    v: &Tensor<T>,
    x_t: &Tensor<T>,
    t: usize,
    s: &NoiseSchedule,
) -> Result<(Tensor<T>, Tensor<T>)> {
    x0_eps_from_v_at(v, x_t, s.alpha_bar(t)?)
}

/// Regression target for the chosen parameterization.
pub fn prediction_target<T: Real>(
    kind: PredictionKind,
    x0: &Tensor<T>,
    eps: &Tensor<T>,
    alpha_bar: f64,
) -> Result<Tensor<T>> {
    match kind {
        PredictionKind::Epsilon => Ok(eps.clone()),
        PredictionKind::V => v_from_x0_eps_at(x0, eps, alpha_bar),
    }
}

/// Mean squared error between prediction and target, recorded on the tape.
pub fn loss_simple<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    Ok(tape.mse(pred, target)?)
}

/// Classifier-free guidance: `uncond + scale * (cond - uncond)`.
///
/// Scales 1 and 0 return the corresponding branch bit-exactly.
pub fn cfg_combine<T: Real>(cond: &Tensor<T>, uncond: &Tensor<T>, scale: f64) -> Result<Tensor<T>> {
    if cond.shape() != uncond.shape() {
        return invalid(format!(
            "cfg branches differ in shape: {:?} vs {:?}",
            cond.shape(),
            uncond.shape()
        ));
    }
    if scale == 1.0 {
        return Ok(cond.clone());
    }
    if scale == 0.0 {
        return Ok(uncond.clone());
    }
    let s = T::from_f64(scale);
    Ok(uncond.zip_map(cond, |u, c| u + s * (c - u))?)
}

/// Lower and upper bound of valid data values.
pub const DATA_RANGE: (f64, f64) = (-1.0, 1.0);

/// Splits a model output into `(x0_hat, eps_hat)`, with `x0_hat` clamped to
/// [`DATA_RANGE`].
pub fn predict_x0_eps<T: Real>(
    x_t: &Tensor<T>,
    model_out: &Tensor<T>,
    kind: PredictionKind,
    alpha_bar: f64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (x0, eps) = match kind {
        PredictionKind::Epsilon => {
            let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
            (lincomb(x_t, 1.0 / a, model_out, -b / a)?, model_out.clone())
        }
        PredictionKind::V => x0_eps_from_v_at(model_out, x_t, alpha_bar)?,
    };
    let (lo, hi) = (T::from_f64(DATA_RANGE.0), T::from_f64(DATA_RANGE.1));
    Ok((x0.map(|v| v.max(lo).min(hi)), eps))
}

/// Deterministic (eta = 0) DDIM transition from `t` to `t_prev < t`.
pub fn ddim_step<T: Real>(
    x_t: &Tensor<T>,
    model_out: &Tensor<T>,
    kind: PredictionKind,
    t: usize,
    t_prev: usize,
    s: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if t_prev >= t {
        return invalid(format!("ddim step requires t_prev < t, got {t_prev} >= {t}"));
    }
    let (x0, eps) = predict_x0_eps(x_t, model_out, kind, s.alpha_bar(t)?)?;
    let ab_prev = s.alpha_bar(t_prev)?;
    if ab_prev == 1.0 {
        return Ok(x0);
    }
    lincomb(&x0, ab_prev.sqrt(), &eps, (1.0 - ab_prev).sqrt())
}

/// Ancestral transition `t -> t_prev` using the Gaussian posterior
/// `q(x_prev | x_t, x0_hat)`. With `t_prev = t - 1` this is the classic DDPM
/// step; larger gaps use the respaced schedule between the two levels.
///
/// `sigma_override` replaces the posterior standard deviation (used to
/// compare against deterministic sampling). No noise is added when
/// `t_prev == 0`.
#[allow(clippy::too_many_arguments)]
pub fn ddpm_step_between<T: Real, R: Rng + ?Sized>(
    x_t: &Tensor<T>,
    model_out: &Tensor<T>,
    kind: PredictionKind,
    t: usize,
    t_prev: usize,
    s: &NoiseSchedule,
    sigma_override: Option<f64>,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if t_prev >= t {
        return invalid(format!("ddpm step requires t_prev < t, got {t_prev} >= {t}"));
    }
    let ab_t = s.alpha_bar(t)?;
    let ab_prev = s.alpha_bar(t_prev)?;
    let (x0, _) = predict_x0_eps(x_t, model_out, kind, ab_t)?;
    let alpha = ab_t / ab_prev;
    let beta = 1.0 - alpha;
    let c_x0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
    let c_xt = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
    let mean = lincomb(&x0, c_x0, x_t, c_xt)?;
    if t_prev == 0 {
        return Ok(mean);
    }
    let sigma = sigma_override.unwrap_or_else(|| ((1.0 - ab_prev) / (1.0 - ab_t) * beta).sqrt());
    if sigma == 0.0 {
        return Ok(mean);
    }
    let z = Tensor::<T>::randn(x_t.shape(), rng);
    lincomb(&mean, 1.0, &z, sigma)
}

pub fn ddpm_step<T: Real, R: Rng + ?Sized>(
    x_t: &Tensor<T>,
    model_out: &Tensor<T>,
    kind: PredictionKind,
    t: usize,
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor<T>> {
    s.check(t)?;
    ddpm_step_between(x_t, model_out, kind, t, t - 1, s, None, rng)
}

/// Evenly spaced evaluation timesteps, descending from `T` to 1.
/// A single step evaluates only at `T`.
pub fn sampling_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return invalid(format!("sampling steps must be in 1..={total}, got {steps}"));
    }
    if steps == 1 {
        return Ok(vec![total]);
    }
    Ok((0..steps).map(|i| total - i * (total - 1) / (steps - 1)).collect())
}

/// A denoiser as seen by the sampler.
pub trait Predictor<T: Real> {
    /// Model output at timestep `t`. `conditional = false` requests the
    /// unconditional (null global conditioning) branch.
    fn predict(&mut self, x_t: &Tensor<T>, t: usize, conditional: bool) -> Result<Tensor<T>>;

    /// Whether the conditional and unconditional branches can differ.
    fn is_guided(&self) -> bool {
        true
    }
}

/// Guided prediction for one step.
pub fn guided_prediction<T: Real, P: Predictor<T> + ?Sized>(
    predictor: &mut P,
    x_t: &Tensor<T>,
    t: usize,
    cfg_scale: f64,
) -> Result<Tensor<T>> {
    let cond = predictor.predict(x_t, t, true)?;
    if cfg_scale == 1.0 || !predictor.is_guided() {
        return Ok(cond);
    }
    let uncond = predictor.predict(x_t, t, false)?;
    cfg_combine(&cond, &uncond, cfg_scale)
}

/// Runs the reverse process from seeded unit Gaussian noise.
pub fn sample<T: Real, P: Predictor<T> + ?Sized>(
    predictor: &mut P,
    shape: &[usize],
    config: &SamplerConfig,
    kind: PredictionKind,
    s: &NoiseSchedule,
) -> Result<Tensor<T>> {
    let timesteps = sampling_timesteps(s.len(), config.steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut x = Tensor::<T>::randn(shape, &mut rng);
    for (i, &t) in timesteps.iter().enumerate() {
        let t_prev = timesteps.get(i + 1).copied().unwrap_or(0);
        let out = guided_prediction(predictor, &x, t, config.cfg_scale)?;
        x = match config.kind {
            SamplerKind::Ddim => ddim_step(&x, &out, kind, t, t_prev, s)?,
            SamplerKind::Ddpm => ddpm_step_between(&x, &out, kind, t, t_prev, s, None, &mut rng)?,
        };
    }
    Ok(x)
}

/// Batched reverse process where element `i` draws its initial noise and
/// any sampler noise from its own stream seeded by `seeds[i]`, so each
/// output is independent of the batch it was decoded in.
pub fn sample_seeded<T: Real, P: Predictor<T> + ?Sized>(
    predictor: &mut P,
    item_shape: &[usize],
    seeds: &[u64],
    config: &SamplerConfig,
    kind: PredictionKind,
    s: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if seeds.is_empty() {
        return invalid("sample_seeded needs at least one seed");
    }
    let timesteps = sampling_timesteps(s.len(), config.steps)?;
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&seed| ChaCha8Rng::seed_from_u64(seed)).collect();
    let noise: Vec<Tensor<T>> = rngs.iter_mut().map(|r| Tensor::randn(item_shape, r)).collect();
    let mut x = Tensor::stack(&noise)?;
    for (i, &t) in timesteps.iter().enumerate() {
        let t_prev = timesteps.get(i + 1).copied().unwrap_or(0);
        let out = guided_prediction(predictor, &x, t, config.cfg_scale)?;
        x = match config.kind {
            SamplerKind::Ddim => ddim_step(&x, &out, kind, t, t_prev, s)?,
            SamplerKind::Ddpm => {
                let parts = rngs
                    .iter_mut()
                    .enumerate()
                    .map(|(n, r)| ddpm_step_between(&x.select(n)?, &out.select(n)?, kind, t, t_prev, s, None, r))
                    .collect::<Result<Vec<_>>>()?;
                Tensor::stack(&parts)?
            }
        };
    }
    Ok(x)
}
