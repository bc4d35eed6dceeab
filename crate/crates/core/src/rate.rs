//! Bit-rate accounting in bits per pixel.

use crate::bitstream::{CompressedImage, HEADER_LEN};

/// `h * w * log2(V) / (H * W)`; `v` must be a power of two.
pub fn spatial_rate(h: usize, w: usize, v: usize, height: usize, width: usize) -> f64 {
    let bits = (h * w) as f64 * (v as f64).log2();
    bits / (height * width) as f64
}

/// Spatial rate plus the bytes of the global payload and, when reported,
/// the container header.
pub fn total_rate(
    spatial_bpp: f64,
    global_payload_bytes: usize,
    header_bytes: usize,
    height: usize,
    width: usize,
) -> f64 {
    spatial_bpp + 8.0 * (global_payload_bytes + header_bytes) as f64 / (height * width) as f64
}

/// Byte budget that yields `bpp` over an `H x W` image.
pub fn bytes_for_rate(bpp: f64, height: usize, width: usize) -> f64 {
    bpp * (height * width) as f64 / 8.0
}

/// Per-file rate breakdown.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateReport {
    pub spatial_bpp: f64,
    pub global_bpp: f64,
    pub total_bpp: f64,
}

/// Rates of a container. `include_header` adds the fixed header bytes.
pub fn container_rate(ci: &CompressedImage, include_header: bool) -> RateReport {
    let h = &ci.header;
    let (height, width) = (h.height as usize, h.width as usize);
    let spatial = spatial_rate(h.grid_h as usize, h.grid_w as usize, 1 << h.log2_v, height, width);
    let header = if include_header { HEADER_LEN } else { 0 };
    let total = total_rate(spatial, ci.global_payload.len(), header, height, width);
    RateReport {
        spatial_bpp: spatial,
        global_bpp: total_rate(0.0, ci.global_payload.len(), header, height, width),
        total_bpp: total,
    }
}
