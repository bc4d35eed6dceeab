//! Vector quantization against an ℓ2-normalized codebook, and finite scalar
//! quantization (FSQ).

use perco_nn::{Real, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Result};

/// Weight of the commitment term in the training loss.
pub const COMMITMENT_WEIGHT: f64 = 0.25;

/// Steps a code may go unused before it is reseeded.
pub const DEAD_CODE_STEPS: u64 = 1000;

/// Norms at or below this are treated as zero.
pub const NORM_EPS: f64 = 1e-12;

/// A grid of codebook indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexGrid {
    pub h: usize,
    pub w: usize,
    pub indices: Vec<u32>,
}

impl IndexGrid {
    pub fn new(h: usize, w: usize, indices: Vec<u32>) -> Result<Self> {
        if indices.len() != h * w {
            return invalid(format!(
                "{}x{} grid needs {} indices, got {}",
                h,
                w,
                h * w,
                indices.len()
            ));
        }
        Ok(Self { h, w, indices })
    }

    pub fn check_range(&self, v: usize) -> Result<()> {
        match self.indices.iter().find(|&&i| i as usize >= v) {
            Some(i) => invalid(format!("index {i} out of range for {v} codes")),
            None => Ok(()),
        }
    }
}

/// Returns `log2(v)` when `v` is a power of two of at least 2.
pub fn log2_exact(v: usize) -> Option<u32> {
    (v >= 2 && v.is_power_of_two()).then(|| v.trailing_zeros())
}

/// Divides every row of `[V,d]` by its ℓ2 norm.
pub fn normalize_rows<T: Real>(codes: &Tensor<T>) -> Result<Tensor<T>> {
    if codes.ndim() != 2 {
        return invalid(format!("expected [V,d] codes, got {:?}", codes.shape()));
    }
    let d = codes.shape()[1];
    let mut out = codes.clone();
    for (r, row) in out.data_mut().chunks_mut(d).enumerate() {
        let norm = row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
        if norm <= NORM_EPS {
            return invalid(format!("code {r} has zero norm"));
        }
        row.iter_mut().for_each(|v| *v = T::from_f64(v.as_f64() / norm));
    }
    Ok(out)
}

/// Rows of `[M,d]` scaled to unit norm in double precision; zero rows stay
/// zero.
pub fn normalize_rows_or_zero<T: Real>(x: &Tensor<T>) -> Tensor<f64> {
    let d = x.shape().get(1).copied().unwrap_or(1).max(1);
    let mut out = x.cast::<f64>();
    for row in out.data_mut().chunks_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > NORM_EPS {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

/// A `V x d` table of unit-norm code vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<T> {
    codes: Tensor<T>,
}

impl<T: Real> Codebook<T> {
    /// Rows drawn uniformly on the unit sphere.
    pub fn random<R: Rng + ?Sized>(v: usize, d: usize, rng: &mut R) -> Result<Self> {
        if log2_exact(v).is_none() {
            return invalid(format!("codebook size {v} is not a power of two >= 2"));
        }
        if d == 0 {
            return invalid("code dimension must be positive");
        }
        let raw = Tensor::<f64>::from_fn(&[v, d], |_| rng.sample(StandardNormal));
        Ok(Self {
            codes: normalize_rows(&raw)?.cast(),
        })
    }

    /// Wraps and normalizes an existing table.
    pub fn from_codes(codes: &Tensor<T>) -> Result<Self> {
        let codes = normalize_rows(codes)?;
        if log2_exact(codes.shape()[0]).is_none() {
            return invalid(format!("codebook size {} is not a power of two >= 2", codes.shape()[0]));
        }
        Ok(Self { codes })
    }

    pub fn len(&self) -> usize {
        self.codes.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.codes.shape()[1]
    }

    pub fn codes(&self) -> &Tensor<T> {
        &self.codes
    }

    pub fn code(&self, k: usize) -> &[T] {
        let d = self.dim();
        &self.codes.data()[k * d..(k + 1) * d]
    }

    /// Returns the normalized codebook.
    pub fn normalize_codes(&self) -> Result<Self> {
        Ok(Self {
            codes: normalize_rows(&self.codes)?,
        })
    }

    /// Gathers the code rows for `indices` into `[indices.len(), d]`.
    pub fn lookup(&self, indices: &[u32]) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(indices.len() * self.dim());
        for &i in indices {
            if i as usize >= self.len() {
                return invalid(format!("index {i} out of range for {} codes", self.len()));
            }
            data.extend_from_slice(self.code(i as usize));
        }
        Ok(Tensor::new(&[indices.len(), self.dim()], data)?)
    }
}

/// Result of nearest-code assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment<T> {
    pub indices: Vec<u32>,
    /// Selected codes, `[M,d]`.
    pub quantized: Tensor<T>,
    /// Feature rows with zero norm, mapped to index 0.
    pub zero_norm: usize,
}

/// Assigns every row of `features[M,d]` to the code of highest cosine
/// similarity. Ties go to the lowest index.
pub fn assign<T: Real>(features: &Tensor<T>, cb: &Codebook<T>) -> Result<Assignment<T>> {
    let d = cb.dim();
    if features.ndim() != 2 || features.shape()[1] != d {
        return invalid(format!(
            "features {:?} do not match code dimension {d}",
            features.shape()
        ));
    }
    let mut indices = Vec::with_capacity(features.shape()[0]);
    let mut zero_norm = 0;
    for row in features.data().chunks(d) {
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm.as_f64() <= NORM_EPS {
            zero_norm += 1;
            indices.push(0);
            continue;
        }
        let mut best = (0u32, T::neg_infinity());
        for k in 0..cb.len() {
            let sim = row.iter().zip(cb.code(k)).map(|(&a, &b)| a * b).sum::<T>() / norm;
            if sim > best.1 {
                best = (k as u32, sim);
            }
        }
        indices.push(best.0);
    }
    let quantized = cb.lookup(&indices)?;
    Ok(Assignment {
        indices,
        quantized,
        zero_norm,
    })
}

/// Quantizes a `[h,w,d]` feature grid.
pub fn quantize<T: Real>(features: &Tensor<T>, cb: &Codebook<T>) -> Result<(IndexGrid, Tensor<T>)> {
    let s = features.shape();
    if s.len() != 3 {
        return invalid(format!("expected [h,w,d] features, got {s:?}"));
    }
    let (h, w, d) = (s[0], s[1], s[2]);
    let a = assign(&features.reshape(&[h * w, d])?, cb)?;
    Ok((IndexGrid::new(h, w, a.indices)?, a.quantized.reshape(&[h, w, d])?))
}

/// `(codebook_loss, commitment_loss)` values, both mean-reduced.
pub fn vq_losses<T: Real>(features: &Tensor<T>, quantized: &Tensor<T>) -> Result<(f64, f64)> {
    if features.shape() != quantized.shape() {
        return invalid(format!("{:?} vs {:?}", features.shape(), quantized.shape()));
    }
    let n = features.numel().max(1) as f64;
    let sq = features
        .data()
        .iter()
        .zip(quantized.data())
        .map(|(&a, &b)| (a - b).as_f64().powi(2))
        .sum::<f64>()
        / n;
    Ok((sq, sq))
}

/// Differentiable VQ terms recorded on a tape.
pub struct VqTerms {
    /// Straight-through output: value of the codes, gradient to features.
    pub output: Var,
    pub codebook_loss: Var,
    pub commitment_loss: Var,
    pub indices: Vec<u32>,
    pub zero_norm: usize,
}

/// Normalizes `features[M,d]`, assigns codes from `table[V,d]` (a tape
/// variable holding normalized codes) and records both VQ losses.
pub fn vq_on_tape<T: Real>(tape: &mut Tape<T>, features: Var, table: Var) -> Result<VqTerms> {
    let normed = tape.l2_normalize_rows(features, NORM_EPS)?;
    let cb = Codebook {
        codes: tape.value(table).clone(),
    };
    let a = assign(tape.value(normed), &cb)?;
    let ids: Vec<usize> = a.indices.iter().map(|&i| i as usize).collect();
    let q = tape.embedding(table, &ids)?;
    let f_sg = tape.detach(normed);
    let q_sg = tape.detach(q);
    let codebook_loss = tape.mse(f_sg, q)?;
    let commitment_loss = tape.mse(normed, q_sg)?;
    let output = tape.straight_through(normed, &a.quantized)?;
    Ok(VqTerms {
        output,
        codebook_loss,
        commitment_loss,
        indices: a.indices,
        zero_norm: a.zero_norm,
    })
}

/// Per-index counts and perplexity.
#[derive(Clone, Debug, PartialEq)]
pub struct UsageStats {
    pub counts: Vec<u64>,
    pub perplexity: f64,
}

pub fn usage_stats<'a>(grids: impl IntoIterator<Item = &'a [u32]>, v: usize) -> UsageStats {
    let mut counts = vec![0u64; v];
    for grid in grids {
        for &i in grid {
            if let Some(c) = counts.get_mut(i as usize) {
                *c += 1;
            }
        }
    }
    UsageStats {
        perplexity: perplexity(&counts),
        counts,
    }
}

/// `exp(-Σ p log p)` of a histogram; 0 for an empty one.
pub fn perplexity(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    h.exp()
}

/// Counts consecutive unused steps per code.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeadCodeTracker {
    idle: Vec<u64>,
    threshold: u64,
    reseeded: u64,
}

impl DeadCodeTracker {
    pub fn new(v: usize, threshold: u64) -> Self {
        Self {
            idle: vec![0; v],
            threshold,
            reseeded: 0,
        }
    }

    pub fn from_parts(idle: Vec<u64>, threshold: u64, reseeded: u64) -> Self {
        Self {
            idle,
            threshold,
            reseeded,
        }
    }

    pub fn idle(&self) -> &[u64] {
        &self.idle
    }

    pub fn reseeded(&self) -> u64 {
        self.reseeded
    }

    /// Records the indices used in one step and returns codes that reached
    /// the idle threshold. Their counters restart.
    pub fn observe(&mut self, used: &[u32]) -> Vec<usize> {
        let mut hit = vec![false; self.idle.len()];
        for &i in used {
            if let Some(h) = hit.get_mut(i as usize) {
                *h = true;
            }
        }
        let mut dead = Vec::new();
        for (k, (idle, &h)) in self.idle.iter_mut().zip(&hit).enumerate() {
            *idle = if h { 0 } else { *idle + 1 };
            if *idle >= self.threshold {
                *idle = 0;
                dead.push(k);
            }
        }
        self.reseeded += dead.len() as u64;
        dead
    }
}

/// Overwrites `dead` rows of `codes[V,d]` with randomly chosen normalized
/// rows of `features[M,d]`.
pub fn reseed_codes<T: Real, R: Rng + ?Sized>(
    codes: &mut Tensor<T>,
    dead: &[usize],
    features: &Tensor<T>,
    rng: &mut R,
) -> Result<()> {
    let d = codes.shape()[1];
    if features.ndim() != 2 || features.shape()[1] != d || features.shape()[0] == 0 {
        return invalid("reseeding needs a non-empty [M,d] feature batch");
    }
    for &k in dead {
        let m = rng.random_range(0..features.shape()[0]);
        let row = &features.data()[m * d..(m + 1) * d];
        let norm = row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
        let dst = &mut codes.data_mut()[k * d..(k + 1) * d];
        if norm <= NORM_EPS {
            continue;
        }
        for (o, &s) in dst.iter_mut().zip(row) {
            *o = T::from_f64(s.as_f64() / norm);
        }
    }
    Ok(())
}

/// Per-channel level counts for finite scalar quantization.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FsqConfig {
    levels: Vec<u32>,
}

impl Default for FsqConfig {
    fn default() -> Self {
        Self { levels: vec![8, 8, 8] }
    }
}

impl FsqConfig {
    pub fn new(levels: Vec<u32>) -> Result<Self> {
        if levels.is_empty() {
            return invalid("FSQ needs at least one channel");
        }
        if let Some(l) = levels.iter().find(|&&l| l < 2) {
            return invalid(format!("FSQ level {l} < 2"));
        }
        if levels
            .iter()
            .try_fold(1u64, |acc, &l| acc.checked_mul(l as u64).filter(|&p| p <= 1 << 32))
            .is_none()
        {
            return invalid("FSQ codebook size exceeds 2^32");
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[u32] {
        &self.levels
    }

    pub fn dim(&self) -> usize {
        self.levels.len()
    }

    /// Implied codebook size.
    pub fn size(&self) -> u64 {
        self.levels.iter().map(|&l| l as u64).product()
    }

    /// Mixed-radix index; the first channel is least significant.
    pub fn index(&self, digits: &[u32]) -> Result<u32> {
        if digits.len() != self.levels.len() {
            return invalid(format!("expected {} digits, got {}", self.levels.len(), digits.len()));
        }
        let mut idx = 0u64;
        for (&dgt, &l) in digits.iter().zip(&self.levels).rev() {
            if dgt >= l {
                return invalid(format!("digit {dgt} outside 0..{l}"));
            }
            idx = idx * l as u64 + dgt as u64;
        }
        Ok(idx as u32)
    }

    pub fn digits(&self, index: u32) -> Result<Vec<u32>> {
        if index as u64 >= self.size() {
            return invalid(format!("index {index} outside FSQ space of {}", self.size()));
        }
        let mut rem = index;
        Ok(self
            .levels
            .iter()
            .map(|&l| {
                let d = rem % l;
                rem /= l;
                d
            })
            .collect())
    }

    /// Quantized value of a code in `[-1,1]^d`.
    pub fn code_value(&self, index: u32) -> Result<Vec<f64>> {
        Ok(self
            .digits(index)?
            .iter()
            .zip(&self.levels)
            .map(|(&d, &l)| 2.0 * d as f64 / (l - 1) as f64 - 1.0)
            .collect())
    }

    /// Integer level of one channel value.
    pub fn level_of(&self, channel: usize, x: f64) -> u32 {
        let l = self.levels[channel];
        let scaled = (x.tanh() + 1.0) * 0.5 * (l - 1) as f64;
        (scaled.round() as u32).min(l - 1)
    }
}

/// FSQ of a `[h,w,d_f]` feature grid without gradient tracking.
pub fn fsq_quantize<T: Real>(features: &Tensor<T>, cfg: &FsqConfig) -> Result<(IndexGrid, Tensor<T>)> {
    let s = features.shape();
    if s.len() != 3 || s[2] != cfg.dim() {
        return invalid(format!("expected [h,w,{}] features, got {s:?}", cfg.dim()));
    }
    let mut indices = Vec::with_capacity(s[0] * s[1]);
    let mut values = Vec::with_capacity(features.numel());
    for row in features.data().chunks(cfg.dim()) {
        let digits: Vec<u32> = row
            .iter()
            .enumerate()
            .map(|(c, v)| cfg.level_of(c, v.as_f64()))
            .collect();
        let idx = cfg.index(&digits)?;
        values.extend(cfg.code_value(idx)?.into_iter().map(T::from_f64));
        indices.push(idx);
    }
    Ok((IndexGrid::new(s[0], s[1], indices)?, Tensor::new(s, values)?))
}

/// FSQ of `features[M,d_f]` on a tape: tanh bound, affine map to
/// `[0, L-1]`, straight-through rounding, and back to `[-1,1]`.
pub fn fsq_on_tape<T: Real>(tape: &mut Tape<T>, features: Var, cfg: &FsqConfig) -> Result<(Var, Vec<u32>)> {
    let s = tape.shape(features).to_vec();
    if s.len() != 2 || s[1] != cfg.dim() {
        return invalid(format!("expected [M,{}] features, got {s:?}", cfg.dim()));
    }
    let half: Vec<T> = cfg.levels.iter().map(|&l| T::from_f64((l - 1) as f64 * 0.5)).collect();
    let half = tape.constant(Tensor::new(&[cfg.dim()], half)?);
    let bounded = tape.tanh(features);
    let shifted = tape.add_scalar(bounded, T::one());
    let scaled = tape.mul(shifted, half)?;
    let rounded = tape.round_ste(scaled);
    let mut indices = Vec::with_capacity(s[0]);
    for row in tape.value(rounded).data().chunks(cfg.dim()) {
        let digits: Vec<u32> = row.iter().map(|v| v.as_f64() as u32).collect();
        indices.push(cfg.index(&digits)?);
    }
    let inv: Vec<T> = cfg.levels.iter().map(|&l| T::from_f64(2.0 / (l - 1) as f64)).collect();
    let inv = tape.constant(Tensor::new(&[cfg.dim()], inv)?);
    let unit = tape.mul(rounded, inv)?;
    let out = tape.add_scalar(unit, -T::one());
    Ok((out, indices))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn three_four_five() {
        let t = Tensor::<f64>::new(&[1, 2], vec![3.0, 4.0]).unwrap();
        assert_eq!(normalize_rows(&t).unwrap().data(), &[0.6, 0.8]);
    }

    #[test]
    fn zero_row_is_rejected() {
        let t = Tensor::<f64>::new(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(normalize_rows(&t).is_err());
    }

    #[test]
    fn normalization_is_idempotent() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let cb = Codebook::<f32>::random(16, 4, &mut r).unwrap();
        let again = cb.normalize_codes().unwrap();
        assert!(cb.codes().max_abs_diff(again.codes()) <= 1e-7);
    }

    #[test]
    fn codebook_size_must_be_power_of_two() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        assert!(Codebook::<f32>::random(12, 4, &mut r).is_err());
        assert!(Codebook::<f32>::random(1, 4, &mut r).is_err());
    }

    #[test]
    fn tie_goes_to_lowest_index() {
        let mut codes = vec![0.0; 8 * 2];
        for k in 0..8 {
            codes[2 * k] = -1.0;
        }
        codes[4..6].copy_from_slice(&[1.0, 0.0]);
        codes[10..12].copy_from_slice(&[0.0, 1.0]);
        let cb = Codebook::from_codes(&Tensor::<f64>::new(&[8, 2], codes).unwrap()).unwrap();
        let f = Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap();
        assert_eq!(assign(&f, &cb).unwrap().indices, vec![2]);
    }

    #[test]
    fn zero_feature_maps_to_index_zero() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let cb = Codebook::<f64>::random(4, 3, &mut r).unwrap();
        let a = assign(&Tensor::zeros(&[2, 3]), &cb).unwrap();
        assert_eq!(a.indices, vec![0, 0]);
        assert_eq!(a.zero_norm, 2);
    }

    #[test]
    fn vq_loss_scalar_case() {
        let f = Tensor::<f64>::scalar(1.0);
        let q = Tensor::<f64>::scalar(0.0);
        assert_eq!(vq_losses(&f, &q).unwrap(), (1.0, 1.0));
        assert_eq!(vq_losses(&f, &f).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn perplexity_extremes() {
        assert!((perplexity(&[5; 16]) - 16.0).abs() < 1e-12);
        let mut one = vec![0; 16];
        one[3] = 9;
        assert_eq!(perplexity(&one), 1.0);
    }

    #[test]
    fn dead_codes_fire_at_threshold() {
        let mut t = DeadCodeTracker::new(3, 2);
        assert!(t.observe(&[0]).is_empty());
        assert_eq!(t.observe(&[0, 1]), vec![2]);
        assert_eq!(t.idle(), &[0, 0, 0]);
        assert_eq!(t.reseeded(), 1);
    }

    #[test]
    fn fsq_saturation_and_symmetry() {
        let two = FsqConfig::new(vec![2]).unwrap();
        assert_eq!(two.level_of(0, 10.0), 1);
        let three = FsqConfig::new(vec![3]).unwrap();
        assert_eq!(three.level_of(0, 0.0), 1);
        assert!(FsqConfig::new(vec![1, 4]).is_err());
    }

    #[test]
    fn fsq_first_channel_is_least_significant() {
        let cfg = FsqConfig::new(vec![8, 4]).unwrap();
        assert_eq!(cfg.index(&[3, 2]).unwrap(), 3 + 8 * 2);
        assert_eq!(cfg.digits(19).unwrap(), vec![3, 2]);
        assert!(cfg.digits(32).is_err());
    }
}
