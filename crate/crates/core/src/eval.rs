//! Rate-distortion evaluation over an image directory.

use std::path::{Path, PathBuf};

use perco_nn::read_checkpoint;
use rayon::prelude::*;

use crate::bitstream::write_container;
use crate::codec::{decode_batch, encode_batch, file_rate, read_for_model};
use crate::dataset::Dataset;
use crate::diffusion::SamplerConfig;
use crate::error::{Error, Result};
use crate::metrics::{ms_ssim, psnr};
use crate::model::CodecModel;

pub const CSV_HEADER: &str = "config,image,bpp,psnr_db,ms_ssim";
pub const THREADS_ENV: &str = "PERCO_MICRO_THREADS";

#[derive(Clone, Debug, PartialEq)]
pub struct RdPoint {
    pub config: String,
    pub image: String,
    pub bpp: f64,
    pub psnr_db: f64,
    pub ms_ssim: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub sampler: SamplerConfig,
    /// Send each image's label as the global token when it has one.
    pub use_global: bool,
    /// Images decoded together.
    pub batch: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig::default(),
            use_global: true,
            batch: 16,
        }
    }
}

/// Worker count: `PERCO_MICRO_THREADS` when set, otherwise all cores.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Seed used for the `i`-th image of a dataset.
pub fn image_seed(base: u64, i: usize) -> u64 {
    base.wrapping_add(i as u64)
}

/// Encodes, stores, re-reads and decodes every image of `data`.
pub fn evaluate(model: &CodecModel<f32>, tag: &str, data: &Dataset, opts: &EvalOptions) -> Result<Vec<RdPoint>> {
    let cfg = model.config();
    data.check_geometry(cfg.channels, cfg.height, cfg.width)?;
    let batch = opts.batch.max(1);
    let chunks: Vec<(usize, &[crate::dataset::Entry])> = data
        .entries
        .chunks(batch)
        .enumerate()
        .map(|(i, c)| (i * batch, c))
        .collect();
    let run = || -> Result<Vec<Vec<RdPoint>>> {
        chunks
            .par_iter()
            .map(|&(start, entries)| {
                let images: Vec<_> = entries.iter().map(|e| &e.image).collect();
                let globals: Vec<_> = entries.iter().map(|e| e.label.filter(|_| opts.use_global)).collect();
                let mut stored = Vec::with_capacity(entries.len());
                let mut rates = Vec::with_capacity(entries.len());
                for ci in encode_batch(model, &images, &globals)? {
                    let bytes = write_container(&ci)?;
                    rates.push(file_rate(&bytes)?.total_bpp);
                    stored.push(read_for_model(&bytes, cfg)?);
                }
                let seeds: Vec<u64> = (start..start + entries.len())
                    .map(|i| image_seed(opts.sampler.seed, i))
                    .collect();
                let decoded = decode_batch(model, &stored, &opts.sampler, &seeds)?;
                entries
                    .iter()
                    .zip(decoded)
                    .zip(rates)
                    .map(|((e, out), bpp)| {
                        let (a, b) = (e.image.to_unit_planar(), out.to_unit_planar());
                        Ok(RdPoint {
                            config: tag.to_string(),
                            image: e.name.clone(),
                            bpp,
                            psnr_db: psnr(&a, &b, 1.0)?,
                            ms_ssim: ms_ssim(&a, &b, cfg.channels, cfg.height, cfg.width, 1.0)?,
                        })
                    })
                    .collect()
            })
            .collect()
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    Ok(pool.install(run)?.into_iter().flatten().collect())
}

/// Tag of a checkpoint: its file stem.
pub fn checkpoint_tag(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

/// One row per (checkpoint, image). All checkpoints must share the image
/// geometry.
pub fn rd_curve(dataset: &Path, checkpoints: &[PathBuf], opts: &EvalOptions) -> Result<Vec<RdPoint>> {
    if checkpoints.is_empty() {
        return Err(Error::InvalidArgument("no checkpoints given".into()));
    }
    let data = Dataset::load(dataset)?;
    let mut models = Vec::with_capacity(checkpoints.len());
    for p in checkpoints {
        if !p.is_file() {
            return Err(Error::Dataset(format!("missing checkpoint {}", p.display())));
        }
        models.push(CodecModel::<f32>::from_checkpoint(&read_checkpoint(p)?)?);
    }
    let first = models[0].config();
    for (m, p) in models.iter().zip(checkpoints) {
        let c = m.config();
        if (c.channels, c.height, c.width) != (first.channels, first.height, first.width) {
            return Err(Error::Geometry(format!(
                "{} has a different image geometry",
                p.display()
            )));
        }
    }
    let mut rows = Vec::new();
    for (m, p) in models.iter().zip(checkpoints) {
        rows.extend(evaluate(m, &checkpoint_tag(p), &data, opts)?);
    }
    Ok(rows)
}

/// `x` with six significant digits, trailing zeros removed.
pub fn format_sig6(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if (-4..6).contains(&exp) {
        trim(&format!("{x:.*}", (5 - exp).max(0) as usize))
    } else {
        format!("{}e{exp}", trim(mantissa))
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn to_csv(rows: &[RdPoint]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            csv_field(&r.config),
            csv_field(&r.image),
            format_sig6(r.bpp),
            format_sig6(r.psnr_db),
            format_sig6(r.ms_ssim)
        ));
    }
    out
}

/// Per-config means of bpp, PSNR and MS-SSIM, in first-seen order.
pub fn summarize(rows: &[RdPoint]) -> Vec<(String, f64, f64, f64)> {
    let mut out: Vec<(String, f64, f64, f64, usize)> = Vec::new();
    for r in rows {
        let i = match out.iter().position(|o| o.0 == r.config) {
            Some(i) => i,
            None => {
                out.push((r.config.clone(), 0.0, 0.0, 0.0, 0));
                out.len() - 1
            }
        };
        let o = &mut out[i];
        o.1 += r.bpp;
        o.2 += r.psnr_db;
        o.3 += r.ms_ssim;
        o.4 += 1;
    }
    out.into_iter()
        .map(|(c, b, p, m, n)| (c, b / n as f64, p / n as f64, m / n as f64))
        .collect()
}
