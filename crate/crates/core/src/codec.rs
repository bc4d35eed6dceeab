//! Image encoding to containers and generative decoding.

use perco_nn::{Real, Tensor};

use crate::arith;
use crate::bitstream::{self, CompressedImage, Geometry};
use crate::diffusion::{sample_seeded, SamplerConfig};
use crate::error::{Error, Result};
use crate::image_io::Image;
use crate::model::{CodecModel, Conditioned, ModelConfig};
use crate::rate::{container_rate, RateReport};

/// Container geometry a model produces and accepts.
pub fn geometry(cfg: &ModelConfig) -> Result<Geometry> {
    let narrow = |what: &str| Error::Geometry(format!("{what} exceeds the container limits"));
    Ok(Geometry {
        height: u16::try_from(cfg.height).map_err(|_| narrow("height"))?,
        width: u16::try_from(cfg.width).map_err(|_| narrow("width"))?,
        grid_h: u8::try_from(cfg.grid_h).map_err(|_| narrow("grid height"))?,
        grid_w: u8::try_from(cfg.grid_w).map_err(|_| narrow("grid width"))?,
        log2_v: cfg.quantizer.log2_v()? as u8,
    })
}

/// Coded payload for a global token; empty when absent.
pub fn token_payload(id: Option<usize>, classes: usize) -> Result<Vec<u8>> {
    match id {
        None => Ok(Vec::new()),
        Some(id) if id < classes && id < 256 => Ok(arith::encode(&[id as u8])?),
        Some(id) => Err(Error::InvalidArgument(format!(
            "global token {id} outside 0..{classes}"
        ))),
    }
}

/// Coded payload carrying free text as UTF-8.
pub fn caption_payload(text: &str) -> Result<Vec<u8>> {
    if text.is_empty() {
        return Ok(Vec::new());
    }
    Ok(arith::encode(text.as_bytes())?)
}

/// Global token carried by a container. A payload that does not decode to a
/// single in-range byte (such as a caption) conditions nothing.
pub fn global_token(ci: &CompressedImage, classes: usize) -> Result<Option<usize>> {
    if !ci.header.has_global() {
        return Ok(None);
    }
    let bytes = arith::decode(&ci.global_payload)?;
    Ok(match bytes.as_slice() {
        [id] if (*id as usize) < classes => Some(*id as usize),
        _ => None,
    })
}

fn check_image(cfg: &ModelConfig, img: &Image) -> Result<()> {
    if (img.channels, img.height, img.width) != (cfg.channels, cfg.height, cfg.width) {
        return Err(Error::Geometry(format!(
            "image is {}x{}x{}, model expects {}x{}x{}",
            img.channels, img.height, img.width, cfg.channels, cfg.height, cfg.width
        )));
    }
    Ok(())
}

/// Encodes a batch of images with their optional global tokens.
pub fn encode_batch<T: Real>(
    model: &CodecModel<T>,
    images: &[&Image],
    globals: &[Option<usize>],
) -> Result<Vec<CompressedImage>> {
    if images.len() != globals.len() || images.is_empty() {
        return Err(Error::InvalidArgument("encode needs one global entry per image".into()));
    }
    let cfg = model.config();
    let geo = geometry(cfg)?;
    for img in images {
        check_image(cfg, img)?;
    }
    let batch = Tensor::stack(&images.iter().map(|i| i.to_tensor::<T>()).collect::<Vec<_>>())?;
    let grids = model.encode_indices(&batch)?;
    grids
        .into_iter()
        .zip(globals)
        .map(|(grid, &g)| {
            let payload = token_payload(g, cfg.classes)?;
            Ok(CompressedImage::new(geo.height, geo.width, grid, geo.log2_v, payload)?)
        })
        .collect()
}

pub fn encode_image<T: Real>(model: &CodecModel<T>, image: &Image, global: Option<usize>) -> Result<CompressedImage> {
    Ok(encode_batch(model, &[image], &[global])?.remove(0))
}

/// Decodes a batch; element `i` samples with `seeds[i]`.
pub fn decode_batch<T: Real>(
    model: &CodecModel<T>,
    containers: &[CompressedImage],
    sampler: &SamplerConfig,
    seeds: &[u64],
) -> Result<Vec<Image>> {
    if containers.len() != seeds.len() || containers.is_empty() {
        return Err(Error::InvalidArgument("decode needs one seed per container".into()));
    }
    let cfg = model.config();
    let geo = geometry(cfg)?;
    let mut ids = Vec::with_capacity(containers.len());
    for ci in containers {
        geo.check(&ci.header)?;
        ids.push(global_token(ci, cfg.classes)?);
    }
    let grids: Vec<_> = containers.iter().map(|c| c.grid.clone()).collect();
    let mut pred = Conditioned {
        model,
        local: model.conditioning(&grids)?,
        ids,
    };
    let item = [cfg.channels, cfg.height, cfg.width];
    let x = sample_seeded(&mut pred, &item, seeds, sampler, cfg.prediction, model.schedule())?;
    (0..containers.len())
        .map(|i| Image::from_tensor(&x.select(i)?))
        .collect()
}

/// Decodes one container with `sampler.seed`.
pub fn decode_image<T: Real>(model: &CodecModel<T>, ci: &CompressedImage, sampler: &SamplerConfig) -> Result<Image> {
    Ok(decode_batch(model, std::slice::from_ref(ci), sampler, &[sampler.seed])?.remove(0))
}

/// Reads container bytes and checks them against the model geometry.
pub fn read_for_model(bytes: &[u8], cfg: &ModelConfig) -> Result<CompressedImage> {
    Ok(bitstream::read_container_expecting(bytes, &geometry(cfg)?)?)
}

/// Rate of container bytes as stored on disk; the header is fixed overhead
/// and not counted.
pub fn file_rate(bytes: &[u8]) -> Result<RateReport> {
    Ok(container_rate(&bitstream::read_container(bytes)?, false))
}
