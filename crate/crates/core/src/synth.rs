//! Synthetic labelled dataset of colored geometric primitives.
//!
//! Each image shows one shape on a two-tone background; the shape class is
//! the label and doubles as the global token.

use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::dataset::{write_labels, LABELS_FILE};
use crate::error::{invalid, Error, Result};
use crate::image_io::Image;

pub const SHAPES: [&str; 4] = ["square", "disk", "triangle", "cross"];
pub const TRAIN_DIR: &str = "train";
pub const HELDOUT_DIR: &str = "heldout";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub size: usize,
    pub classes: usize,
    pub train: usize,
    pub heldout: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            size: 32,
            classes: 4,
            train: 2048,
            heldout: 256,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=SHAPES.len()).contains(&self.classes) {
            return invalid(format!("class count must be in 1..={}", SHAPES.len()));
        }
        if !(8..=1024).contains(&self.size) {
            return invalid("synthetic image size must be in 8..=1024");
        }
        if self.train == 0 {
            return invalid("synthetic training split is empty");
        }
        Ok(())
    }
}

/// One labelled sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub name: String,
    pub label: usize,
    pub image: Image,
}

/// Both splits of a generated dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub heldout: Vec<Sample>,
}

fn color<R: Rng>(rng: &mut R, lo: u8, hi: u8) -> [f64; 3] {
    [0, 1, 2].map(|_| rng.random_range(lo..=hi) as f64)
}

/// Coverage test in shape-local coordinates, unit half-extent.
fn inside(class: usize, u: f64, v: f64) -> bool {
    match class {
        0 => u.abs() <= 1.0 && v.abs() <= 1.0,
        1 => u * u + v * v <= 1.0,
        2 => v <= 1.0 && v >= 2.0 * u.abs() - 1.0,
        _ => (u.abs() <= 0.35 && v.abs() <= 1.0) || (v.abs() <= 0.35 && u.abs() <= 1.0),
    }
}

/// Draws one image of `class`.
pub fn render<R: Rng>(class: usize, size: usize, rng: &mut R) -> Image {
    let s = size as f64;
    let bg_a = color(rng, 0, 110);
    let bg_b = color(rng, 0, 110);
    let fg = color(rng, 120, 255);
    let radius = s * rng.random_range(0.18..0.32);
    let cx = s * 0.5 + rng.random_range(-0.15..0.15) * s;
    let cy = s * 0.5 + rng.random_range(-0.15..0.15) * s;
    let angle: f64 = rng.random_range(-0.4..0.4);
    let (sin, cos) = angle.sin_cos();
    let vertical = rng.random_bool(0.5);
    const SUB: usize = 4;
    let mut pixels = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let mut cover = 0usize;
            for sy in 0..SUB {
                for sx in 0..SUB {
                    let px = x as f64 + (sx as f64 + 0.5) / SUB as f64 - cx;
                    let py = y as f64 + (sy as f64 + 0.5) / SUB as f64 - cy;
                    let u = (cos * px + sin * py) / radius;
                    let v = (-sin * px + cos * py) / radius;
                    cover += inside(class, u, v) as usize;
                }
            }
            let a = cover as f64 / (SUB * SUB) as f64;
            let g = if vertical {
                y as f64 / (s - 1.0)
            } else {
                x as f64 / (s - 1.0)
            };
            for c in 0..3 {
                let bg = bg_a[c] * (1.0 - g) + bg_b[c] * g;
                pixels.push((bg * (1.0 - a) + fg[c] * a).round() as u8);
            }
        }
    }
    Image::new(3, size, size, pixels).expect("rendered buffer matches geometry")
}

fn digest(img: &Image) -> [u8; 32] {
    Sha256::digest(&img.pixels).into()
}

/// Generates both splits. Labels are uniform over the classes and held-out
/// images never repeat a training image's content.
pub fn generate(spec: &SyntheticSpec, seed: u64) -> Result<Splits> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut draw = |prefix: &str, count: usize, seen: &mut HashSet<[u8; 32]>, unique: bool| {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let label = rng.random_range(0..spec.classes);
            let image = render(label, spec.size, &mut rng);
            let fresh = seen.insert(digest(&image));
            if unique && !fresh {
                continue;
            }
            out.push(Sample {
                name: format!("{prefix}_{:05}.ppm", out.len()),
                label,
                image,
            });
        }
        out
    };
    let train = draw("train", spec.train, &mut seen, false);
    let heldout = draw("heldout", spec.heldout, &mut seen, true);
    Ok(Splits { train, heldout })
}

fn write_split(dir: &Path, samples: &[Sample]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    for s in samples {
        s.image.write(&dir.join(&s.name))?;
    }
    let labels: Vec<(String, usize)> = samples.iter().map(|s| (s.name.clone(), s.label)).collect();
    write_labels(&dir.join(LABELS_FILE), &labels)
}

/// Writes `train/` and `heldout/` under `out`, each with a labels file.
pub fn make_synthetic(spec: &SyntheticSpec, seed: u64, out: &Path) -> Result<Splits> {
    let splits = generate(spec, seed)?;
    write_split(&out.join(TRAIN_DIR), &splits.train)?;
    write_split(&out.join(HELDOUT_DIR), &splits.heldout)?;
    Ok(splits)
}
