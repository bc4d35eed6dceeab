//! Define-by-run tape.
//!
//! Nodes are appended in execution order, so reverse index order is a valid
//! reverse topological order for the backward sweep.

use crate::error::{shape_err, NnError, Result};
use crate::kernels::{self, bilinear_taps, ConvGeom};
use crate::param::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Matmul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Silu(Var),
    Tanh(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    AvgPool {
        x: Var,
        k: usize,
    },
    UpsampleNearest {
        x: Var,
        k: usize,
    },
    UpsampleBilinear(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    /// Forward value taken from a constant; gradient passed to `features`.
    StraightThrough(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Maps every flat index of `out_shape` to the flat index of a tensor of shape
/// `in_shape` broadcast against it.
fn broadcast_index(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let n = out_shape.len();
    let offset = n - in_shape.len();
    let mut in_strides = vec![0usize; n];
    let mut stride = 1;
    for i in (0..in_shape.len()).rev() {
        in_strides[i + offset] = if in_shape[i] == 1 { 0 } else { stride };
        stride *= in_shape[i];
    }
    let numel: usize = out_shape.iter().product();
    let mut idx = vec![0usize; numel];
    let mut counter = vec![0usize; n];
    let mut cur = 0usize;
    for slot in idx.iter_mut() {
        *slot = cur;
        for d in (0..n).rev() {
            counter[d] += 1;
            cur += in_strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            cur -= in_strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

fn permuted_strides(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape = perm.iter().map(|&p| shape[p]).collect();
    let src_strides = perm.iter().map(|&p| strides[p]).collect();
    (out_shape, src_strides)
}

/// For each output flat index, the source flat index of a permutation.
fn permute_index(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let (out_shape, src_strides) = permuted_strides(shape, perm);
    let numel: usize = shape.iter().product();
    let n = out_shape.len();
    let mut idx = Vec::with_capacity(numel);
    let mut counter = vec![0usize; n];
    let mut cur = 0usize;
    for _ in 0..numel {
        idx.push(cur);
        for d in (0..n).rev() {
            counter[d] += 1;
            cur += src_strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            cur -= src_strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    (out_shape, idx)
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: value.with_requires_grad(requires_grad),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient computed for `v` by the last [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    /// Records an input. Gradients are computed for it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Records the current value of a parameter. Gradients flow back into
    /// the store on [`Tape::backward`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let t = &store.get(id).tensor;
        let requires = t.requires_grad();
        let mut value = t.clone();
        value.zero_grad();
        self.push(value, Op::Param(id), requires)
    }

    /// Copies the value of `v` as a constant: the stop-gradient operator.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let rg = self.rg(a) || self.rg(b);
        if sa == sb {
            return Ok((self.value(a).zip_map(self.value(b), f)?, rg));
        }
        let Some(out_shape) = broadcast_shape(sa, sb) else {
            return shape_err(name, format!("cannot broadcast {sa:?} with {sb:?}"));
        };
        let ia = broadcast_index(&out_shape, sa);
        let ib = broadcast_index(&out_shape, sb);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data = ia.iter().zip(&ib).map(|(&i, &j)| f(da[i], db[j])).collect();
        Ok((Tensor::new(&out_shape, data)?, rg))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err("matmul", format!("{sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::Matmul(a, b), rg))
    }

    /// Affine map `x[N,in] * w[out,in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return shape_err("linear", format!("input {sx:?}, weight {sw:?}"));
        }
        let (n, k, o) = (sx[0], sx[1], sw[0]);
        let mut out = vec![T::zero(); n * o];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [o] {
                return shape_err("linear", format!("bias {:?}, expected [{o}]", bv.shape()));
            }
            for row in out.chunks_mut(o) {
                row.copy_from_slice(bv.data());
            }
        }
        kernels::gemm(
            n,
            k,
            o,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            true,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(&[n, o], out)?, Op::Linear { x, w, b }, rg))
    }

    /// 2-D convolution with square stride and symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return shape_err("conv2d", format!("input {sx:?}, kernel {sw:?}"));
        }
        if sx[1] != sw[1] {
            return shape_err(
                "conv2d",
                format!("input has {} channels, kernel expects {}", sx[1], sw[1]),
            );
        }
        if sb != [sw[0]] {
            return shape_err("conv2d", format!("bias {sb:?}, expected [{}]", sw[0]));
        }
        if sw[2] % 2 == 0 || sw[3] % 2 == 0 {
            return shape_err("conv2d", format!("kernel size {}x{} must be odd", sw[2], sw[3]));
        }
        let (Some(ho), Some(wo)) = (
            kernels::conv2d_output_size(sx[2], sw[2], stride, padding),
            kernels::conv2d_output_size(sx[3], sw[3], stride, padding),
        ) else {
            return shape_err("conv2d", format!("kernel {sw:?} larger than padded input {sx:?}"));
        };
        let geom = ConvGeom {
            c: sx[1],
            h: sx[2],
            w: sx[3],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad: padding,
            ho,
            wo,
        };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            sx[0],
            sw[0],
            &geom,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            Tensor::new(&[sx[0], sw[0], ho, wo], out)?,
            Op::Conv2d { x, w, b, geom },
            rg,
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|z| z * sigmoid(z));
        let rg = self.rg(x);
        self.push(v, Op::Silu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|z| z.tanh());
        let rg = self.rg(x);
        self.push(v, Op::Tanh(x), rg)
    }

    /// Group normalization over `[N,C,...]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 || groups == 0 || sx[1] % groups != 0 {
            return shape_err("group_norm", format!("{groups} groups for input {sx:?}"));
        }
        let c = sx[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err("group_norm", format!("affine parameters must be [{c}]"));
        }
        let n = sx[0];
        let spatial: usize = sx[2..].iter().product();
        let cg = c / groups;
        let glen = cg * spatial;
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let eps = T::from_f64(eps);
        let mut out = vec![T::zero(); xd.len()];
        let mut mean = Vec::with_capacity(n * groups);
        let mut rstd = Vec::with_capacity(n * groups);
        let inv_len = T::one() / T::from_f64(glen as f64);
        for s in 0..n {
            for g in 0..groups {
                let base = (s * groups + g) * glen;
                let seg = &xd[base..base + glen];
                let mu = seg.iter().copied().sum::<T>() * inv_len;
                let var = seg.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_len;
                let r = T::one() / (var + eps).sqrt();
                mean.push(mu);
                rstd.push(r);
                for ci in 0..cg {
                    let ch = g * cg + ci;
                    let off = base + ci * spatial;
                    for j in 0..spatial {
                        out[off + j] = (xd[off + j] - mu) * r * gd[ch] + bd[ch];
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(&sx, out)?,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            },
            rg,
        ))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean of all elements as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::from_f64(v.numel().max(1) as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean squared difference between `a` and `b`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err("mse", format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        if perm.len() != sx.len()
            || perm
                .iter()
                .any(|&p| p >= sx.len() || std::mem::replace(&mut seen[p], true))
        {
            return shape_err("permute", format!("permutation {perm:?} for shape {sx:?}"));
        }
        let (out_shape, idx) = permute_index(&sx, perm);
        let d = self.value(x).data();
        let data = idx.iter().map(|&i| d[i]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&out_shape, data)?, Op::Permute(x, perm.to_vec()), rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return shape_err("concat", "no inputs");
        };
        let s0 = self.shape(first).to_vec();
        if axis >= s0.len() {
            return shape_err("concat", format!("axis {axis} for shape {s0:?}"));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != s0.len() || s[..axis] != s0[..axis] || s[axis + 1..] != s0[axis + 1..] {
                return shape_err("concat", format!("{s:?} vs {s0:?} along axis {axis}"));
            }
            total += s[axis];
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = s0.clone();
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Non-overlapping `k x k` average pooling of `[N,C,H,W]`.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k == 0 || s[2] % k != 0 || s[3] % k != 0 {
            return shape_err("avg_pool2d", format!("window {k} for shape {s:?}"));
        }
        let (ho, wo) = (s[2] / k, s[3] / k);
        let d = self.value(x).data();
        let inv = T::one() / T::from_f64((k * k) as f64);
        let mut out = vec![T::zero(); s[0] * s[1] * ho * wo];
        for p in 0..s[0] * s[1] {
            for y in 0..s[2] {
                for xx in 0..s[3] {
                    out[p * ho * wo + (y / k) * wo + xx / k] += d[(p * s[2] + y) * s[3] + xx] * inv;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[s[0], s[1], ho, wo], out)?, Op::AvgPool { x, k }, rg))
    }

    /// Nearest-neighbour upsampling of `[N,C,H,W]` by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k == 0 {
            return shape_err("upsample_nearest", format!("factor {k} for shape {s:?}"));
        }
        let (ho, wo) = (s[2] * k, s[3] * k);
        let d = self.value(x).data();
        let mut out = vec![T::zero(); s[0] * s[1] * ho * wo];
        for p in 0..s[0] * s[1] {
            for y in 0..ho {
                for xx in 0..wo {
                    out[(p * ho + y) * wo + xx] = d[(p * s[2] + y / k) * s[3] + xx / k];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&[s[0], s[1], ho, wo], out)?,
            Op::UpsampleNearest { x, k },
            rg,
        ))
    }

    /// Align-corners-false bilinear resize of `[N,C,h,w]` to `[N,C,height,width]`.
    pub fn upsample_bilinear(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] == 0 || s[3] == 0 || s[2] > height || s[3] > width {
            return shape_err("upsample_bilinear", format!("cannot resize {s:?} to {height}x{width}"));
        }
        let (ty, tx) = (bilinear_taps(s[2], height), bilinear_taps(s[3], width));
        let d = self.value(x).data();
        let mut out = vec![T::zero(); s[0] * s[1] * height * width];
        for p in 0..s[0] * s[1] {
            let src = &d[p * s[2] * s[3]..(p + 1) * s[2] * s[3]];
            for (y, &(y0, y1, ly)) in ty.iter().enumerate() {
                let ly = T::from_f64(ly);
                for (xx, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let lx = T::from_f64(lx);
                    let top = src[y0 * s[3] + x0] * (T::one() - lx) + src[y0 * s[3] + x1] * lx;
                    let bot = src[y1 * s[3] + x0] * (T::one() - lx) + src[y1 * s[3] + x1] * lx;
                    out[(p * height + y) * width + xx] = top * (T::one() - ly) + bot * ly;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&[s[0], s[1], height, width], out)?,
            Op::UpsampleBilinear(x),
            rg,
        ))
    }

    /// Gathers rows of `table[R,e]`, producing `[ids.len(), e]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return shape_err("embedding", format!("table must be 2-D, got {s:?}"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= s[0]) {
            return shape_err("embedding", format!("row {bad} out of range for {} rows", s[0]));
        }
        let e = s[1];
        let d = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * e);
        for &i in ids {
            out.extend_from_slice(&d[i * e..(i + 1) * e]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(&[ids.len(), e], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Divides each row of a `[M,d]` tensor by `max(norm, eps)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return shape_err("l2_normalize_rows", format!("expected [M,d], got {s:?}"));
        }
        let eps = T::from_f64(eps);
        let d = self.value(x).data();
        let mut norms = Vec::with_capacity(s[0]);
        let mut out = Vec::with_capacity(d.len());
        for row in d.chunks(s[1].max(1)).take(s[0]) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
            norms.push(n);
            out.extend(row.iter().map(|&v| v / n));
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&s, out)?, Op::L2Normalize { x, norms }, rg))
    }

    /// Forward value `quantized`; the backward pass hands the incoming
    /// gradient to `features` unchanged.
    pub fn straight_through(&mut self, features: Var, quantized: &Tensor<T>) -> Result<Var> {
        if self.shape(features) != quantized.shape() {
            return shape_err(
                "straight_through",
                format!("{:?} vs {:?}", self.shape(features), quantized.shape()),
            );
        }
        let rg = self.rg(features);
        let mut v = quantized.clone();
        v.zero_grad();
        Ok(self.push(v, Op::StraightThrough(features), rg))
    }

    /// Rounds to the nearest integer with an identity gradient.
    pub fn round_ste(&mut self, x: Var) -> Var {
        let q = self.value(x).map(|v| v.round());
        let rg = self.rg(x);
        self.push(q, Op::StraightThrough(x), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every reachable `requires_grad` node receives a gradient buffer
    /// (readable via [`Tape::grad`]); parameter gradients are additionally
    /// accumulated into `store`, so calling this repeatedly without
    /// [`ParamStore::zero_grad`] sums them.
    pub fn backward(&mut self, loss: Var, store: Option<&mut ParamStore<T>>) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(NnError::NonScalarLoss(lv.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
            self.nodes[i].value.accumulate_grad(&g);
        }
        if let Some(store) = store {
            for node in &self.nodes[..n] {
                if let (Op::Param(id), Some(g)) = (&node.op, node.value.grad()) {
                    store.get_mut(*id).tensor.accumulate_grad(g);
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let nodes = &self.nodes;
        let out_shape = nodes[i].value.shape();
        let mut send = |v: Var, contrib: Vec<T>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &b)| *a += b),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| nodes[v.0].value.data();
        let shp = |v: Var| nodes[v.0].value.shape();
        let reduce = |v: Var, full: Vec<T>| -> Vec<T> {
            if shp(v) == out_shape {
                full
            } else {
                let map = broadcast_index(out_shape, shp(v));
                let mut out = vec![T::zero(); nodes[v.0].value.numel()];
                for (gv, &j) in full.iter().zip(&map) {
                    out[j] += *gv;
                }
                out
            }
        };
        let expand = |v: Var| -> Vec<T> {
            if shp(v) == out_shape {
                val(v).to_vec()
            } else {
                let d = val(v);
                broadcast_index(out_shape, shp(v)).iter().map(|&j| d[j]).collect()
            }
        };
        match &nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                send(*a, reduce(*a, g.to_vec()));
                send(*b, reduce(*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                send(*a, reduce(*a, g.to_vec()));
                send(*b, reduce(*b, g.iter().map(|&x| -x).collect()));
            }
            Op::Mul(a, b) => {
                if nodes[a.0].requires_grad {
                    let eb = expand(*b);
                    send(*a, reduce(*a, g.iter().zip(&eb).map(|(&x, &y)| x * y).collect()));
                }
                if nodes[b.0].requires_grad {
                    let ea = expand(*a);
                    send(*b, reduce(*b, g.iter().zip(&ea).map(|(&x, &y)| x * y).collect()));
                }
            }
            Op::Scale(a, s) => send(*a, g.iter().map(|&x| x * *s).collect()),
            Op::AddScalar(a) | Op::Reshape(a) | Op::StraightThrough(a) => send(*a, g.to_vec()),
            Op::Matmul(a, b) => {
                let (m, k) = (shp(*a)[0], shp(*a)[1]);
                let n = shp(*b)[1];
                if nodes[a.0].requires_grad {
                    let mut da = vec![T::zero(); m * k];
                    kernels::gemm(m, n, k, g, false, val(*b), true, &mut da, false);
                    send(*a, da);
                }
                if nodes[b.0].requires_grad {
                    let mut db = vec![T::zero(); k * n];
                    kernels::gemm(k, m, n, val(*a), true, g, false, &mut db, false);
                    send(*b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let (n, k) = (shp(*x)[0], shp(*x)[1]);
                let o = shp(*w)[0];
                if nodes[x.0].requires_grad {
                    let mut dx = vec![T::zero(); n * k];
                    kernels::gemm(n, o, k, g, false, val(*w), false, &mut dx, false);
                    send(*x, dx);
                }
                if nodes[w.0].requires_grad {
                    let mut dw = vec![T::zero(); o * k];
                    kernels::gemm(o, n, k, g, true, val(*x), false, &mut dw, false);
                    send(*w, dw);
                }
                if let Some(b) = b {
                    let mut db = vec![T::zero(); o];
                    for row in g.chunks(o) {
                        db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    send(*b, db);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let n = shp(*x)[0];
                let o = shp(*w)[0];
                let mut dx = nodes[x.0]
                    .requires_grad
                    .then(|| vec![T::zero(); nodes[x.0].value.numel()]);
                let mut dw = nodes[w.0]
                    .requires_grad
                    .then(|| vec![T::zero(); nodes[w.0].value.numel()]);
                let mut db = nodes[b.0].requires_grad.then(|| vec![T::zero(); o]);
                kernels::conv2d_backward(
                    val(*x),
                    val(*w),
                    g,
                    n,
                    o,
                    geom,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    send(*x, dx);
                }
                if let Some(dw) = dw {
                    send(*w, dw);
                }
                if let Some(db) = db {
                    send(*b, db);
                }
            }
            Op::Silu(x) => {
                let d = val(*x)
                    .iter()
                    .zip(g)
                    .map(|(&z, &gv)| {
                        let s = sigmoid(z);
                        gv * s * (T::one() + z * (T::one() - s))
                    })
                    .collect();
                send(*x, d);
            }
            Op::Tanh(x) => {
                let y = nodes[i].value.data();
                send(*x, y.iter().zip(g).map(|(&t, &gv)| gv * (T::one() - t * t)).collect());
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let s = shp(*x);
                let (n, c) = (s[0], s[1]);
                let spatial: usize = s[2..].iter().product();
                let cg = c / groups;
                let glen = cg * spatial;
                let xd = val(*x);
                let gd = val(*gamma);
                let mut dx = vec![T::zero(); xd.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let inv_len = T::one() / T::from_f64(glen as f64);
                for smp in 0..n {
                    for grp in 0..*groups {
                        let gi = smp * groups + grp;
                        let base = gi * glen;
                        let (mu, r) = (mean[gi], rstd[gi]);
                        let mut sum_dxhat = T::zero();
                        let mut sum_dxhat_xhat = T::zero();
                        for ci in 0..cg {
                            let ch = grp * cg + ci;
                            let off = base + ci * spatial;
                            for j in 0..spatial {
                                let xhat = (xd[off + j] - mu) * r;
                                let gv = g[off + j];
                                dbeta[ch] += gv;
                                dgamma[ch] += gv * xhat;
                                let dxhat = gv * gd[ch];
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += dxhat * xhat;
                            }
                        }
                        let m1 = sum_dxhat * inv_len;
                        let m2 = sum_dxhat_xhat * inv_len;
                        for ci in 0..cg {
                            let ch = grp * cg + ci;
                            let off = base + ci * spatial;
                            for j in 0..spatial {
                                let xhat = (xd[off + j] - mu) * r;
                                let dxhat = g[off + j] * gd[ch];
                                dx[off + j] = r * (dxhat - m1 - xhat * m2);
                            }
                        }
                    }
                }
                send(*x, dx);
                send(*gamma, dgamma);
                send(*beta, dbeta);
            }
            Op::Sum(x) => send(*x, vec![g[0]; nodes[x.0].value.numel()]),
            Op::Mean(x) => {
                let n = nodes[x.0].value.numel();
                send(*x, vec![g[0] / T::from_f64(n.max(1) as f64); n]);
            }
            Op::Permute(x, perm) => {
                let (_, idx) = permute_index(shp(*x), perm);
                let mut d = vec![T::zero(); g.len()];
                for (&gv, &j) in g.iter().zip(&idx) {
                    d[j] = gv;
                }
                send(*x, d);
            }
            Op::Concat { inputs, axis } => {
                let s0 = out_shape;
                let outer: usize = s0[..*axis].iter().product();
                let inner: usize = s0[axis + 1..].iter().product();
                let row = s0[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let len = shp(v)[*axis] * inner;
                    if nodes[v.0].requires_grad {
                        let mut d = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            d.extend_from_slice(&g[o * row + offset..o * row + offset + len]);
                        }
                        send(v, d);
                    }
                    offset += len;
                }
            }
            Op::AvgPool { x, k } => {
                let s = shp(*x);
                let (ho, wo) = (s[2] / k, s[3] / k);
                let inv = T::one() / T::from_f64((k * k) as f64);
                let mut d = vec![T::zero(); nodes[x.0].value.numel()];
                for p in 0..s[0] * s[1] {
                    for y in 0..s[2] {
                        for xx in 0..s[3] {
                            d[(p * s[2] + y) * s[3] + xx] = g[p * ho * wo + (y / k) * wo + xx / k] * inv;
                        }
                    }
                }
                send(*x, d);
            }
            Op::UpsampleNearest { x, k } => {
                let s = shp(*x);
                let (ho, wo) = (s[2] * k, s[3] * k);
                let mut d = vec![T::zero(); nodes[x.0].value.numel()];
                for p in 0..s[0] * s[1] {
                    for y in 0..ho {
                        for xx in 0..wo {
                            d[(p * s[2] + y / k) * s[3] + xx / k] += g[(p * ho + y) * wo + xx];
                        }
                    }
                }
                send(*x, d);
            }
            Op::UpsampleBilinear(x) => {
                let s = shp(*x);
                let (height, width) = (out_shape[2], out_shape[3]);
                let (ty, tx) = (bilinear_taps(s[2], height), bilinear_taps(s[3], width));
                let mut d = vec![T::zero(); nodes[x.0].value.numel()];
                for p in 0..s[0] * s[1] {
                    let dst = &mut d[p * s[2] * s[3]..(p + 1) * s[2] * s[3]];
                    for (y, &(y0, y1, ly)) in ty.iter().enumerate() {
                        let ly = T::from_f64(ly);
                        for (xx, &(x0, x1, lx)) in tx.iter().enumerate() {
                            let lx = T::from_f64(lx);
                            let gv = g[(p * height + y) * width + xx];
                            let top = gv * (T::one() - ly);
                            let bot = gv * ly;
                            dst[y0 * s[3] + x0] += top * (T::one() - lx);
                            dst[y0 * s[3] + x1] += top * lx;
                            dst[y1 * s[3] + x0] += bot * (T::one() - lx);
                            dst[y1 * s[3] + x1] += bot * lx;
                        }
                    }
                }
                send(*x, d);
            }
            Op::Embedding { table, ids } => {
                let e = shp(*table)[1];
                let mut d = vec![T::zero(); nodes[table.0].value.numel()];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..e {
                        d[id * e + j] += g[row * e + j];
                    }
                }
                send(*table, d);
            }
            Op::L2Normalize { x, norms } => {
                let dim = shp(*x)[1];
                let y = nodes[i].value.data();
                let mut d = vec![T::zero(); y.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let yr = &y[r * dim..(r + 1) * dim];
                    let gr = &g[r * dim..(r + 1) * dim];
                    let raw_norm = val(*x)[r * dim..(r + 1) * dim].iter().map(|&v| v * v).sum::<T>().sqrt();
                    if raw_norm < n {
                        // clamped by eps: y = x / eps
                        for j in 0..dim {
                            d[r * dim + j] = gr[j] / n;
                        }
                    } else {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..dim {
                            d[r * dim + j] = (gr[j] - yr[j] * dot) / n;
                        }
                    }
                }
                send(*x, d);
            }
        }
        Ok(())
    }
}
