//! PSNR and multi-scale SSIM over planar `[C,H,W]` images.

use std::sync::atomic::{AtomicBool, Ordering};

use crate::error::{invalid, Result};

pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

static WARNED: AtomicBool = AtomicBool::new(false);

/// `10 log10(peak^2 / MSE)`; infinite when the images are identical.
pub fn psnr(a: &[f64], b: &[f64], peak: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return invalid(format!(
            "psnr needs equal non-empty inputs, got {} and {}",
            a.len(),
            b.len()
        ));
    }
    if peak <= 0.0 {
        return invalid("psnr peak must be positive");
    }
    let m = mse(a, b);
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

fn gaussian_window() -> [f64; WINDOW] {
    let mut g = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable valid-mode filtering of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64; WINDOW]) -> Vec<f64> {
    let (ho, wo) = (h - WINDOW + 1, w - WINDOW + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for xo in 0..wo {
            rows[y * wo + xo] = (0..WINDOW).map(|k| g[k] * x[y * w + xo + k]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for yo in 0..ho {
        for xo in 0..wo {
            out[yo * wo + xo] = (0..WINDOW).map(|k| g[k] * rows[(yo + k) * wo + xo]).sum();
        }
    }
    out
}

/// Mean luminance-contrast-structure and contrast-structure terms of one
/// plane at one scale.
fn ssim_terms(a: &[f64], b: &[f64], h: usize, w: usize, peak: f64) -> (f64, f64) {
    let g = gaussian_window();
    let c1 = (K1 * peak).powi(2);
    let c2 = (K2 * peak).powi(2);
    let sq = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = filter_valid(a, h, w, &g);
    let mu_b = filter_valid(b, h, w, &g);
    let aa = filter_valid(&sq(a, a), h, w, &g);
    let bb = filter_valid(&sq(b, b), h, w, &g);
    let ab = filter_valid(&sq(a, b), h, w, &g);
    let n = mu_a.len() as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        let c = (2.0 * cov + c2) / (va + vb + c2);
        let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        cs += c;
        ssim += l * c;
    }
    (ssim / n, cs / n)
}

fn pool2(x: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for xx in 0..wo {
            let i = 2 * y * w + 2 * xx;
            out[y * wo + xx] = 0.25 * (x[i] + x[i + 1] + x[i + w] + x[i + w + 1]);
        }
    }
    (out, ho, wo)
}

/// Number of scales usable for a `h x w` image (at most 5).
pub fn ms_ssim_scales(h: usize, w: usize) -> usize {
    let m = h.min(w);
    (1..=MS_SSIM_WEIGHTS.len())
        .take_while(|&s| m >= (1 << (s - 1)) * WINDOW)
        .last()
        .unwrap_or(0)
}

/// Single-scale SSIM averaged over channels.
pub fn ssim(a: &[f64], b: &[f64], channels: usize, h: usize, w: usize, peak: f64) -> Result<f64> {
    check_planes(a, b, channels, h, w)?;
    let plane = h * w;
    let total: f64 = (0..channels)
        .map(|c| {
            ssim_terms(
                &a[c * plane..(c + 1) * plane],
                &b[c * plane..(c + 1) * plane],
                h,
                w,
                peak,
            )
            .0
        })
        .sum();
    Ok(total / channels as f64)
}

fn check_planes(a: &[f64], b: &[f64], channels: usize, h: usize, w: usize) -> Result<()> {
    if a.len() != channels * h * w || b.len() != a.len() || channels == 0 {
        return invalid(format!(
            "expected two {channels}x{h}x{w} images, got {} and {} values",
            a.len(),
            b.len()
        ));
    }
    if h.min(w) < WINDOW {
        return invalid(format!("image {h}x{w} is smaller than the {WINDOW}x{WINDOW} window"));
    }
    Ok(())
}

/// Multi-scale SSIM averaged over channels.
///
/// Images too small for five scales use as many as fit, with the leading
/// weights renormalized to sum to one. Negative contrast-structure terms are
/// clamped to zero before exponentiation.
pub fn ms_ssim(a: &[f64], b: &[f64], channels: usize, h: usize, w: usize, peak: f64) -> Result<f64> {
    check_planes(a, b, channels, h, w)?;
    let scales = ms_ssim_scales(h, w);
    if scales < MS_SSIM_WEIGHTS.len() && !WARNED.swap(true, Ordering::Relaxed) {
        log::warn!("ms-ssim: {h}x{w} image supports only {scales} scale(s)");
    }
    let wsum: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let weights: Vec<f64> = MS_SSIM_WEIGHTS[..scales].iter().map(|x| x / wsum).collect();
    let plane = h * w;
    let mut total = 0.0;
    for c in 0..channels {
        let mut pa = a[c * plane..(c + 1) * plane].to_vec();
        let mut pb = b[c * plane..(c + 1) * plane].to_vec();
        let (mut ph, mut pw) = (h, w);
        let mut value = 1.0;
        for (s, &wt) in weights.iter().enumerate() {
            let (full, cs) = ssim_terms(&pa, &pb, ph, pw, peak);
            let term = if s + 1 == scales { full } else { cs };
            value *= term.max(0.0).powf(wt);
            if s + 1 < scales {
                let (na, nh, nw) = pool2(&pa, ph, pw);
                pb = pool2(&pb, ph, pw).0;
                pa = na;
                (ph, pw) = (nh, nw);
            }
        }
        total += value;
    }
    Ok(total / channels as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_images() {
        let a: Vec<f64> = (0..3 * 32 * 32).map(|i| (i % 17) as f64 / 16.0).collect();
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        assert!((ms_ssim(&a, &a, 3, 32, 32, 1.0).unwrap() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn constant_offset_gives_twenty_db() {
        let a = vec![0.2; 64];
        let b = vec![0.3; 64];
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn scale_count() {
        assert_eq!(ms_ssim_scales(32, 32), 2);
        assert_eq!(ms_ssim_scales(176, 200), 5);
        assert_eq!(ms_ssim_scales(11, 11), 1);
        assert_eq!(ms_ssim_scales(10, 64), 0);
    }

    #[test]
    fn too_small_is_an_error() {
        let a = vec![0.0; 100];
        assert!(ms_ssim(&a, &a, 1, 10, 10, 1.0).is_err());
        assert!(psnr(&a, &a[..50], 1.0).is_err());
    }
}
