//! Run configuration as a plain-text `key = value` file.
//!
//! Blank lines and text after `#` are ignored. Every key has a default;
//! unknown and repeated keys are errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::diffusion::SamplerConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synth::SyntheticSpec;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    /// Training images; `None` generates the synthetic set.
    pub dataset: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            synthetic: SyntheticSpec {
                size: model.height,
                classes: model.classes,
                ..SyntheticSpec::default()
            },
            model,
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            dataset: None,
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("cannot parse `{value}`"))
}

impl RunConfig {
    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let t = &self.train;
        let s = &self.sampler;
        vec![
            ("seed", self.seed.to_string()),
            ("channels", m.channels.to_string()),
            ("height", m.height.to_string()),
            ("width", m.width.to_string()),
            ("grid_h", m.grid_h.to_string()),
            ("grid_w", m.grid_w.to_string()),
            ("quantizer", m.quantizer.to_string()),
            ("encoder_width", m.encoder_width.to_string()),
            ("base_width", m.base_width.to_string()),
            ("groups", m.groups.to_string()),
            ("classes", m.classes.to_string()),
            ("prediction", m.prediction.to_string()),
            ("diffusion_steps", m.diffusion_steps.to_string()),
            ("beta_start", format!("{:?}", m.beta_start)),
            ("beta_end", format!("{:?}", m.beta_end)),
            ("sampler", s.kind.to_string()),
            ("sample_steps", s.steps.to_string()),
            ("cfg_scale", format!("{:?}", s.cfg_scale)),
            ("peak_lr", format!("{:?}", t.peak_lr)),
            ("warmup_steps", t.warmup_steps.to_string()),
            ("batch", t.batch.to_string()),
            ("steps", t.steps.to_string()),
            ("dropout", format!("{:?}", t.dropout)),
            ("aux_weight", format!("{:?}", t.aux_weight)),
            ("weight_decay", format!("{:?}", t.weight_decay)),
            ("log_every", t.log_every.to_string()),
            ("checkpoint_every", t.checkpoint_every.to_string()),
            (
                "dataset",
                self.dataset
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
            ),
            ("synth_train", self.synthetic.train.to_string()),
            ("synth_heldout", self.synthetic.heldout.to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        let t = &mut self.train;
        let s = &mut self.sampler;
        match key {
            "seed" => self.seed = parse(value)?,
            "channels" => m.channels = parse(value)?,
            "height" => m.height = parse(value)?,
            "width" => m.width = parse(value)?,
            "grid_h" => m.grid_h = parse(value)?,
            "grid_w" => m.grid_w = parse(value)?,
            "quantizer" => m.quantizer = parse(value)?,
            "encoder_width" => m.encoder_width = parse(value)?,
            "base_width" => m.base_width = parse(value)?,
            "groups" => m.groups = parse(value)?,
            "classes" => m.classes = parse(value)?,
            "prediction" => m.prediction = parse(value)?,
            "diffusion_steps" => m.diffusion_steps = parse(value)?,
            "beta_start" => m.beta_start = parse(value)?,
            "beta_end" => m.beta_end = parse(value)?,
            "sampler" => s.kind = parse(value)?,
            "sample_steps" => s.steps = parse(value)?,
            "cfg_scale" => s.cfg_scale = parse(value)?,
            "peak_lr" => t.peak_lr = parse(value)?,
            "warmup_steps" => t.warmup_steps = parse(value)?,
            "batch" => t.batch = parse(value)?,
            "steps" => t.steps = parse(value)?,
            "dropout" => t.dropout = parse(value)?,
            "aux_weight" => t.aux_weight = parse(value)?,
            "weight_decay" => t.weight_decay = parse(value)?,
            "log_every" => t.log_every = parse(value)?,
            "checkpoint_every" => t.checkpoint_every = parse(value)?,
            "dataset" => self.dataset = (!value.is_empty()).then(|| PathBuf::from(value)),
            "synth_train" => self.synthetic.train = parse(value)?,
            "synth_heldout" => self.synthetic.heldout = parse(value)?,
            _ => unreachable!("keys are checked against entries()"),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Config { line: i + 1, msg };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !cfg.entries().iter().any(|(k, _)| *k == key) {
                return Err(err(format!("unknown key `{key}`")));
            }
            if seen.contains(&key) {
                return Err(err(format!("duplicate key `{key}`")));
            }
            seen.push(key);
            cfg.set(key, value).map_err(|m| err(format!("{key}: {m}")))?;
        }
        cfg.synthetic.size = cfg.model.height;
        cfg.synthetic.classes = cfg.model.classes;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config {
            line: 0,
            msg: e.to_string(),
        };
        self.model.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        if self.sampler.steps == 0 || self.sampler.steps > self.model.diffusion_steps {
            return Err(wrap(Error::InvalidArgument(format!(
                "sample_steps must be in 1..={}",
                self.model.diffusion_steps
            ))));
        }
        if !self.sampler.cfg_scale.is_finite() {
            return Err(wrap(Error::InvalidArgument("cfg_scale must be finite".into())));
        }
        if self.dataset.is_none() {
            if self.model.height != self.model.width || self.model.channels != 3 {
                return Err(wrap(Error::InvalidArgument("synthetic images are square RGB".into())));
            }
            self.synthetic.validate().map_err(wrap)?;
        }
        Ok(())
    }

    /// The full configuration in the file format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            writeln!(out, "{k} = {v}").expect("writing to a string");
        }
        out
    }
}
