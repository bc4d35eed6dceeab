//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use common::{batch, freeze, inputs, jittered, Oracle};
use perco_core::arith;
use perco_core::bitstream::{read_container_expecting, write_container, CompressedImage, Geometry, HEADER_LEN};
use perco_core::codec::{decode_batch, decode_image, encode_image};
use perco_core::dataset::Dataset;
use perco_core::diffusion::*;
use perco_core::eval::{rd_curve, summarize, to_csv, EvalOptions};
use perco_core::image_io::Image;
use perco_core::model::{CodecModel, ModelConfig, QuantizerConfig};
use perco_core::quantization::{assign, Codebook, FsqConfig, IndexGrid};
use perco_core::rate::{bytes_for_rate, spatial_rate, total_rate};
use perco_core::synth::{generate, make_synthetic, SyntheticSpec, HELDOUT_DIR, TRAIN_DIR};
use perco_core::train::{TrainConfig, Trainer, TrainingSet};
use perco_nn::gradcheck::{check_inputs, check_params};
use perco_nn::{write_checkpoint, NnError, Tape, Tensor, Var};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

/// Runs `f`, turning a panic into a failure.
fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(format!(
            "panicked: {}",
            p.downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default()
        )),
    }
}

fn rate_arithmetic() -> Outcome {
    let bytes = bytes_for_rate(0.003, 480, 640);
    ensure!((bytes - 115.2).abs() <= 1e-9, "0.003 bpp at 480x640 is {bytes} bytes");
    ensure!(bytes.round() == 115.0, "{bytes} does not round to 115 bytes");
    let back = total_rate(0.0, 115, 0, 480, 640);
    ensure!((back * 1e3).round() == 3.0, "115 bytes at 480x640 is {back} bpp");

    let spatial = spatial_rate(8, 12, 256, 512, 768);
    ensure!(spatial == 0.001953125, "spatial rate {spatial}");
    ensure!((spatial * 1e4).floor() == 19.0, "{spatial} does not read as 0.0019");
    let total = spatial + 0.00165;
    ensure!((total * 1e4).round() == 36.0, "{total} does not round to 0.0036");
    let stated: f64 = 0.0019 + 0.00165;
    ensure!((stated - 0.0036).abs() <= 0.5e-4 + 1e-12, "0.0019 + 0.00165 = {stated}");
    Ok(format!("115.2 bytes; spatial {spatial}; total {total:.6}"))
}

fn random_container(r: &mut ChaCha8Rng) -> Result<(CompressedImage, Vec<u8>), String> {
    let height = r.random_range(1..=4096u16);
    let width = r.random_range(1..=4096u16);
    let gh = r.random_range(1..=height.min(32)) as usize;
    let gw = r.random_range(1..=width.min(32)) as usize;
    let log2_v = r.random_range(1..=16u8);
    let indices = (0..gh * gw).map(|_| r.random_range(0..1u32 << log2_v)).collect();
    let grid = ok(IndexGrid::new(gh, gw, indices))?;
    let text: Vec<u8> = if r.random_bool(0.5) {
        Vec::new()
    } else {
        (0..r.random_range(1..=64)).map(|_| r.random()).collect()
    };
    let payload = if text.is_empty() {
        Vec::new()
    } else {
        ok(arith::encode(&text))?
    };
    Ok((ok(CompressedImage::new(height, width, grid, log2_v, payload))?, text))
}

fn geometry_of(ci: &CompressedImage) -> Geometry {
    let h = ci.header;
    Geometry {
        height: h.height,
        width: h.width,
        grid_h: h.grid_h,
        grid_w: h.grid_w,
        log2_v: h.log2_v,
    }
}

fn bitstream_losslessness() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let mut files = Vec::new();
    for i in 0..1000 {
        let (ci, text) = random_container(&mut r)?;
        let bytes = ok(write_container(&ci))?;
        let bits = ci.grid.indices.len() * ci.header.log2_v as usize;
        ensure!(
            ci.payload_bits() == bits + 8 * ci.global_payload.len(),
            "container {i}: payload bits"
        );
        ensure!(
            bytes.len() == HEADER_LEN + bits.div_ceil(8) + ci.global_payload.len(),
            "container {i}: size"
        );
        let back = ok(read_container_expecting(&bytes, &geometry_of(&ci)))?;
        ensure!(back == ci, "container {i} changed in a round trip");
        ensure!(
            ok(write_container(&back))? == bytes,
            "container {i} re-encodes differently"
        );
        if back.header.has_global() {
            ensure!(
                ok(arith::decode(&back.global_payload))? == text,
                "container {i}: payload text"
            );
        }
        files.push((ci, bytes));
    }
    let mut panics = 0;
    let mut accepted = 0;
    for _ in 0..10_000 {
        let (ci, bytes) = &files[r.random_range(0..files.len())];
        let mut bad = bytes.clone();
        match r.random_range(0..3) {
            0 => {
                for _ in 0..r.random_range(1..=3) {
                    let bit = r.random_range(0..HEADER_LEN * 8);
                    bad[bit / 8] ^= 1 << (bit % 8);
                }
            }
            1 => {
                for _ in 0..r.random_range(1..=4) {
                    bad[r.random_range(0..HEADER_LEN)] = r.random();
                }
            }
            _ => bad.truncate(r.random_range(0..HEADER_LEN)),
        }
        if bad[..HEADER_LEN.min(bad.len())] == bytes[..HEADER_LEN.min(bad.len())] && bad.len() == bytes.len() {
            bad[0] ^= 0x80;
        }
        match catch_unwind(|| read_container_expecting(&bad, &geometry_of(ci))) {
            Ok(Ok(_)) => accepted += 1,
            Ok(Err(_)) => {}
            Err(_) => panics += 1,
        }
    }
    ensure!(
        panics == 0 && accepted == 0,
        "{panics} panics, {accepted} corrupt headers accepted"
    );
    Ok("1000 round trips; 10000 corrupt headers rejected".into())
}

fn empirical_entropy(data: &[u8]) -> f64 {
    let mut counts = [0usize; 256];
    for &b in data {
        counts[b as usize] += 1;
    }
    let n = data.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| -(c as f64 / n) * (c as f64 / n).log2())
        .sum()
}

/// Weights `exp(-lambda * i / 255)` over 256 symbols with entropy `target`.
fn weights_with_entropy(target: f64) -> Vec<f64> {
    let weights = |lambda: f64| -> Vec<f64> { (0..256).map(|i| (-lambda * i as f64 / 255.0).exp()).collect() };
    let entropy = |w: &[f64]| {
        let z: f64 = w.iter().sum();
        w.iter().map(|&x| -(x / z) * (x / z).log2()).sum::<f64>()
    };
    let (mut lo, mut hi) = (0.0, 50.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if entropy(&weights(mid)) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    weights(0.5 * (lo + hi))
}

fn arith_optimality() -> Outcome {
    let n = 100_000;
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let mut report = Vec::new();
    for target in [1.0, 4.0, 7.9] {
        let data: Vec<u8> = if target == 1.0 {
            (0..n).map(|_| r.random_range(0..2)).collect()
        } else if target == 4.0 {
            (0..n).map(|_| r.random_range(0..16)).collect()
        } else {
            let dist = ok(WeightedIndex::new(weights_with_entropy(target)))?;
            (0..n).map(|_| dist.sample(&mut r) as u8).collect()
        };
        let h = empirical_entropy(&data);
        ensure!((h - target).abs() < 0.01, "source entropy {h} vs {target}");
        let mut enc = arith::Encoder::new();
        for &b in &data {
            enc.push(b);
        }
        let coded = enc.finish();
        let mut dec = arith::Decoder::new(&coded);
        let mut back = Vec::with_capacity(n);
        while let Some(b) = ok(dec.next_symbol())? {
            back.push(b);
        }
        ensure!(back == data, "H={target}: round trip failed");
        let bits = 8.0 * coded.len() as f64;
        let bound = n as f64 * h + 0.02 * n as f64 + 128.0;
        ensure!(bits <= bound, "H={target}: {bits} bits > bound {bound:.0}");
        report.push(format!("H={target}: {:+.0} bits over n*H", bits - n as f64 * h));
    }
    Ok(report.join(", "))
}

struct Split;

impl Predictor<f64> for Split {
    fn predict(&mut self, x_t: &Tensor<f64>, t: usize, conditional: bool) -> perco_core::Result<Tensor<f64>> {
        let s = t as f64 * 1e-3;
        Ok(x_t.map(|v| if conditional { (0.3 + s) * v + 0.1 } else { -0.2 * v + s }))
    }
}

/// Bit patterns of every quantity the suite computes, for determinism checks.
type Fingerprint = Vec<u64>;

fn diffusion_suite() -> Result<(String, Fingerprint), String> {
    let mut fp = Vec::new();
    let mut r = ChaCha8Rng::seed_from_u64(4);
    for i in 0..100 {
        let steps = r.random_range(2..=1000);
        let s = if i % 2 == 0 {
            let a = r.random_range(1e-6..1e-2);
            ok(NoiseSchedule::linear(steps, a, r.random_range(a..0.2)))?
        } else {
            ok(NoiseSchedule::from_betas(
                (0..steps).map(|_| r.random_range(1e-6..0.3)).collect(),
            ))?
        };
        ensure!(ok(s.alpha_bar(0))? == 1.0, "schedule {i}: alpha_bar(0) != 1");
        let mut prod = 1.0f64;
        let mut prev = 1.0;
        for t in 1..=steps {
            prod *= 1.0 - s.betas()[t - 1];
            let ab = ok(s.alpha_bar(t))?;
            ensure!(ab < prev && ab > 0.0, "schedule {i}: alpha_bar not decreasing at t={t}");
            ensure!(
                (ab - prod).abs() <= 1e-12 * prod.max(1e-300) + 1e-300,
                "schedule {i}: alpha_bar({t}) = {ab}, product {prod}"
            );
            prev = ab;
            fp.push(ab.to_bits());
        }
    }

    let s = ok(NoiseSchedule::linear(50, 1e-3, 0.05))?;
    let n = 100_000;
    let x0v = 0.6;
    let mut x = Tensor::<f64>::full(&[n], x0v);
    for t in 1..=50 {
        x = ok(forward_step(&x, t, &s, &mut r))?;
    }
    let ab: f64 = s.betas().iter().map(|b| 1.0 - b).product();
    let mean = x.data().iter().sum::<f64>() / n as f64;
    let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let (m_want, v_want) = (ab.sqrt() * x0v, 1.0 - ab);
    let z_mean = (mean - m_want) / (v_want / n as f64).sqrt();
    let z_var = (var - v_want) / (v_want * (2.0 / (n - 1) as f64).sqrt());
    ensure!(
        z_mean.abs() <= 3.0 && z_var.abs() <= 3.0,
        "marginal z-scores {z_mean:.2}, {z_var:.2}"
    );
    fp.extend([mean.to_bits(), var.to_bits()]);

    let mut worst_v = 0.0f64;
    for _ in 0..200 {
        let ab = r.random_range(1e-5..1.0);
        let x0 = Tensor::<f64>::uniform(&[4, 8], -1.0, 1.0, &mut r);
        let eps = Tensor::<f64>::randn(&[4, 8], &mut r);
        let x_t = ok(forward_marginal_at(&x0, &eps, ab))?;
        let v = ok(v_from_x0_eps_at(&x0, &eps, ab))?;
        let (x0b, epsb) = ok(x0_eps_from_v_at(&v, &x_t, ab))?;
        worst_v = worst_v.max(x0b.max_abs_diff(&x0)).max(epsb.max_abs_diff(&eps));
        fp.extend(v.data().iter().map(|v| v.to_bits()));
    }
    ensure!(worst_v <= 1e-6, "v round trip error {worst_v}");

    for t in [1, 10, 500] {
        let x = Tensor::<f64>::randn(&[2, 3, 4], &mut r);
        let cond = ok(Split.predict(&x, t, true))?;
        let g = ok(guided_prediction(&mut Split, &x, t, 1.0))?;
        ensure!(
            g.data()
                .iter()
                .zip(cond.data())
                .all(|(a, b)| a.to_bits() == b.to_bits()),
            "guidance at scale 1 is not the conditional prediction"
        );
    }
    let m = ok(CodecModel::<f32>::new(common::tiny_config(), 3))?;
    let grid = ok(IndexGrid::new(2, 2, vec![1, 5, 9, 14]))?;
    let mut pred = perco_core::model::Conditioned {
        model: &m,
        local: ok(m.conditioning(&[grid]))?,
        ids: vec![Some(1)],
    };
    let x = Tensor::<f32>::randn(&[1, 3, 16, 16], &mut r);
    let cond = ok(pred.predict(&x, 40, true))?;
    let g = ok(guided_prediction(&mut pred, &x, 40, 1.0))?;
    ensure!(
        g == cond,
        "model guidance at scale 1 differs from the conditional branch"
    );

    let s = ok(NoiseSchedule::linear(1000, 1e-4, 0.02))?;
    let mut worst_ddim = 0.0f64;
    for kind in [PredictionKind::Epsilon, PredictionKind::V] {
        for steps in [1, 5, 20, 50] {
            let x0 = Tensor::<f64>::uniform(&[2, 3, 8, 8], -0.95, 0.95, &mut r);
            let mut oracle = Oracle {
                x0: x0.clone(),
                schedule: s.clone(),
                kind,
            };
            let cfg = SamplerConfig {
                steps,
                cfg_scale: 1.0,
                kind: SamplerKind::Ddim,
                seed: steps as u64,
            };
            let out = ok(sample(&mut oracle, x0.shape(), &cfg, kind, &s))?;
            let err = out.max_abs_diff(&x0);
            ensure!(err <= 1e-4, "{kind} DDIM with {steps} steps misses x0 by {err}");
            worst_ddim = worst_ddim.max(err);
            fp.extend(out.data().iter().map(|v| v.to_bits()));
        }
    }
    Ok((
        format!("marginal z {z_mean:.2}/{z_var:.2}; v error {worst_v:.1e}; DDIM error {worst_ddim:.1e}"),
        fp,
    ))
}

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

type Graph = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> perco_nn::Result<Var>>;

fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> perco_nn::Result<Var> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(Tensor::randn(tape.shape(y), &mut r));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn op_cases(r: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor<f64>>, Graph)> {
    let mut d = |lo: usize, hi: usize| r.random_range(lo..=hi);
    let (n, c, h, w) = (d(1, 2), d(1, 3), d(3, 5), d(3, 5));
    let (m, k, o) = (d(1, 4), d(1, 5), d(1, 4));
    let g = d(1, 2);
    let cg = g * d(1, 2);
    let c2 = d(1, 3);
    let stride = d(1, 2);
    let (bh, bw) = (h + d(0, 3), w + d(0, 3));
    let rows = d(2, 5);
    let ids: Vec<usize> = (0..d(1, 5)).map(|i| (i * 7 + 1) % rows).collect();
    let mut t = |shape: &[usize]| Tensor::<f64>::randn(shape, r);
    let x = t(&[n, c, h, w]);
    vec![
        (
            "add",
            vec![x.clone(), t(&[n, c, 1, 1])],
            Box::new(|tp, v| {
                let y = tp.add(v[0], v[1])?;
                weighted_sum(tp, y, 1)
            }),
        ),
        (
            "sub",
            vec![x.clone(), t(&[w])],
            Box::new(|tp, v| {
                let y = tp.sub(v[0], v[1])?;
                weighted_sum(tp, y, 2)
            }),
        ),
        (
            "mul",
            vec![x.clone(), t(&[n, c, h, w])],
            Box::new(|tp, v| {
                let y = tp.mul(v[0], v[1])?;
                weighted_sum(tp, y, 3)
            }),
        ),
        (
            "scale",
            vec![x.clone()],
            Box::new(|tp, v| {
                let y = tp.scale(v[0], -1.7);
                weighted_sum(tp, y, 4)
            }),
        ),
        (
            "add_scalar",
            vec![x.clone()],
            Box::new(|tp, v| {
                let y = tp.add_scalar(v[0], 0.4);
                weighted_sum(tp, y, 5)
            }),
        ),
        (
            "matmul",
            vec![t(&[m, k]), t(&[k, o])],
            Box::new(|tp, v| {
                let y = tp.matmul(v[0], v[1])?;
                weighted_sum(tp, y, 6)
            }),
        ),
        (
            "linear",
            vec![t(&[m, k]), t(&[o, k]), t(&[o])],
            Box::new(|tp, v| {
                let y = tp.linear(v[0], v[1], Some(v[2]))?;
                weighted_sum(tp, y, 7)
            }),
        ),
        (
            "conv2d",
            vec![x.clone(), t(&[o, c, 3, 3]), t(&[o])],
            Box::new(move |tp, v| {
                let y = tp.conv2d(v[0], v[1], v[2], stride, 1)?;
                weighted_sum(tp, y, 8)
            }),
        ),
        (
            "silu",
            vec![x.clone()],
            Box::new(|tp, v| {
                let y = tp.silu(v[0]);
                weighted_sum(tp, y, 9)
            }),
        ),
        (
            "tanh",
            vec![x.clone()],
            Box::new(|tp, v| {
                let y = tp.tanh(v[0]);
                weighted_sum(tp, y, 10)
            }),
        ),
        (
            "group_norm",
            vec![t(&[n, cg, h, w]), t(&[cg]), t(&[cg])],
            Box::new(move |tp, v| {
                let y = tp.group_norm(v[0], g, v[1], v[2], 1e-5)?;
                weighted_sum(tp, y, 11)
            }),
        ),
        (
            "sum",
            vec![x.clone()],
            Box::new(|tp, v| {
                let sq = tp.mul(v[0], v[0])?;
                Ok(tp.sum(sq))
            }),
        ),
        (
            "mean",
            vec![x.clone()],
            Box::new(|tp, v| {
                let sq = tp.mul(v[0], v[0])?;
                Ok(tp.mean(sq))
            }),
        ),
        (
            "mse",
            vec![x.clone(), t(&[n, c, h, w])],
            Box::new(|tp, v| tp.mse(v[0], v[1])),
        ),
        (
            "reshape",
            vec![x.clone()],
            Box::new(move |tp, v| {
                let y = tp.reshape(v[0], &[n * c, h * w])?;
                weighted_sum(tp, y, 12)
            }),
        ),
        (
            "permute",
            vec![x.clone()],
            Box::new(|tp, v| {
                let y = tp.permute(v[0], &[0, 2, 3, 1])?;
                weighted_sum(tp, y, 13)
            }),
        ),
        (
            "concat",
            vec![x.clone(), t(&[n, c2, h, w])],
            Box::new(|tp, v| {
                let y = tp.concat(&[v[0], v[1]], 1)?;
                weighted_sum(tp, y, 14)
            }),
        ),
        (
            "avg_pool2d",
            vec![t(&[n, c, 2 * h, 2 * w])],
            Box::new(|tp, v| {
                let y = tp.avg_pool2d(v[0], 2)?;
                weighted_sum(tp, y, 15)
            }),
        ),
        (
            "upsample_nearest",
            vec![x.clone()],
            Box::new(|tp, v| {
                let y = tp.upsample_nearest(v[0], 2)?;
                weighted_sum(tp, y, 16)
            }),
        ),
        (
            "upsample_bilinear",
            vec![x.clone()],
            Box::new(move |tp, v| {
                let y = tp.upsample_bilinear(v[0], bh, bw)?;
                weighted_sum(tp, y, 17)
            }),
        ),
        (
            "embedding",
            vec![t(&[rows, k])],
            Box::new(move |tp, v| {
                let y = tp.embedding(v[0], &ids)?;
                weighted_sum(tp, y, 18)
            }),
        ),
        (
            "l2_normalize_rows",
            vec![t(&[m, k])],
            Box::new(|tp, v| {
                let y = tp.l2_normalize_rows(v[0], 1e-12)?;
                weighted_sum(tp, y, 19)
            }),
        ),
    ]
}

/// Ops that reshape the gradient on purpose (detach and the straight-through
/// estimators) are checked against their defined gradients rather than
/// finite differences.
fn surrogate_grads(r: &mut ChaCha8Rng) -> Result<(), String> {
    let x = Tensor::<f64>::randn(&[3, 4], r);
    let q = Tensor::<f64>::randn(&[3, 4], r);
    let mut wr = ChaCha8Rng::seed_from_u64(21);
    let weights = Tensor::<f64>::randn(&[3, 4], &mut wr);
    for op in 0..2 {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), true);
        let y = if op == 0 {
            ok(tape.straight_through(v, &q))?
        } else {
            tape.round_ste(v)
        };
        let want = if op == 0 { q.clone() } else { x.map(f64::round) };
        ensure!(
            tape.value(y).max_abs_diff(&want) <= 1e-12,
            "straight-through op {op} forward value"
        );
        let l = ok(weighted_sum(&mut tape, y, 21))?;
        ok(tape.backward(l, None))?;
        ensure!(
            tape.grad(v) == Some(weights.data()),
            "straight-through op {op} gradient is not the identity"
        );
    }
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let d = tape.detach(v);
    let y = ok(tape.mul(v, d))?;
    let l = ok(weighted_sum(&mut tape, y, 21))?;
    ok(tape.backward(l, None))?;
    ensure!(tape.value(d) == &x, "detach changes its value");
    let want: Vec<f64> = weights.data().iter().zip(x.data()).map(|(w, x)| w * x).collect();
    ensure!(tape.grad(v) == Some(want.as_slice()), "gradient flows through detach");
    Ok(())
}

fn gradient_checks() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut names = 0;
    for round in 0..5 {
        let cases = op_cases(&mut r);
        names = cases.len();
        for (name, inputs, f) in cases {
            let rep = ok(check_inputs(&inputs, FD_STEP, |t, v| f(t, v)))?;
            ensure!(
                rep.max_rel_error <= FD_TOL,
                "{name} (round {round}): relative error {}",
                rep.max_rel_error
            );
            worst = worst.max(rep.max_rel_error);
        }
    }
    surrogate_grads(&mut r)?;

    let m = jittered(2);
    let b = batch();
    let fz = freeze(&m, &b);
    let rep = ok(check_params(m.store(), FD_STEP, 8, |tape, store| {
        let mut probe = m.clone();
        *probe.store_mut() = store.clone();
        Ok(probe
            .loss_on_tape(tape, &inputs(&b), Some(&fz))
            .map_err(|e| NnError::InvalidArgument(e.to_string()))?
            .total)
    }))?;
    ensure!(
        rep.max_rel_error <= FD_TOL,
        "composite graph: relative error {}",
        rep.max_rel_error
    );
    Ok(format!(
        "{names} ops x 5 shapes, worst {worst:.1e}; composite graph worst {:.1e} over {} entries",
        rep.max_rel_error, rep.checked
    ))
}

fn brute_force_nearest(row: &[f64], cb: &Codebook<f64>) -> u32 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut best = (0u32, f64::NEG_INFINITY);
    for k in 0..cb.len() {
        let code = cb.code(k);
        let cos = row.iter().zip(code).map(|(a, b)| a * b).sum::<f64>() / (norm(row) * norm(code));
        if cos > best.1 {
            best = (k as u32, cos);
        }
    }
    best.0
}

fn vq_suite() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let mut checked = 0;
    for v in [2, 4, 8, 16, 32, 64, 128, 256] {
        for d in [1, 4, 8] {
            let cb = ok(Codebook::<f64>::random(v, d, &mut r))?;
            let feats = Tensor::<f64>::randn(&[64, d], &mut r);
            let a = ok(assign(&feats, &cb))?;
            for (i, row) in feats.data().chunks(d).enumerate() {
                let want = brute_force_nearest(row, &cb);
                ensure!(
                    a.indices[i] == want,
                    "V={v} d={d} row {i}: {} vs brute force {want}",
                    a.indices[i]
                );
                checked += 1;
            }
        }
    }

    let spec = SyntheticSpec {
        size: 16,
        classes: 4,
        train: 32,
        heldout: 0,
    };
    let s = ok(generate(&spec, 1))?;
    let images: Vec<_> = s.train.iter().map(|x| x.image.to_tensor()).collect();
    let labels: Vec<_> = s.train.iter().map(|x| x.label).collect();
    let data = TrainingSet {
        images: &images,
        labels: &labels,
    };
    let tc = TrainConfig {
        peak_lr: 1e-3,
        warmup_steps: 20,
        batch: 4,
        steps: 500,
        ..TrainConfig::default()
    };
    let mut tr = ok(Trainer::new(common::tiny_config(), tc, 6))?;
    let mut worst = 0.0f64;
    for step in 1..=500 {
        ok(tr.train_step(&data))?;
        let cb = tr.model().codebook().ok_or("model has no codebook")?;
        for k in 0..cb.len() {
            let n = cb.code(k).iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            worst = worst.max((n - 1.0).abs());
        }
        ensure!(worst <= 1e-5, "step {step}: codebook row norm off by {worst}");
    }

    let fsq = ok(FsqConfig::new(vec![8, 8]))?;
    ensure!(fsq.size() == 64, "FSQ [8,8] size {}", fsq.size());
    let mut seen = std::collections::BTreeSet::new();
    for idx in 0..64u32 {
        let digits = ok(fsq.digits(idx))?;
        ensure!(idx == digits[0] + 8 * digits[1], "index {idx} has digits {digits:?}");
        ensure!(ok(fsq.index(&digits))? == idx, "index {idx} does not round trip");
        let values = ok(fsq.code_value(idx))?;
        ensure!(
            values.iter().all(|v| (-1.0..=1.0).contains(v)),
            "code {idx} leaves [-1,1]"
        );
        ensure!(
            seen.insert(values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()),
            "code {idx} repeats a value"
        );
        let pre = values.iter().map(|v| v.atanh()).collect::<Vec<_>>();
        let feats = ok(Tensor::new(&[1, 1, 2], pre))?;
        let (grid, q) = ok(perco_core::quantization::fsq_quantize(&feats, &fsq))?;
        ensure!(grid.indices == [idx], "code {idx} re-quantizes to {:?}", grid.indices);
        ensure!(
            q.data() == values.as_slice(),
            "code {idx} changes value on re-quantization"
        );
    }
    Ok(format!(
        "{checked} assignments; norm drift {worst:.1e} over 500 steps; 64 FSQ codes"
    ))
}

const TOY_SIZE: usize = 32;
const TOY_STEPS: u64 = 1000;
const TOY_BATCH: usize = 16;
const GRIDS: [usize; 3] = [1, 2, 4];
const UNTRAINED: &str = "untrained-4x4";

fn toy_model(grid: usize) -> ModelConfig {
    ModelConfig {
        height: TOY_SIZE,
        width: TOY_SIZE,
        grid_h: grid,
        grid_w: grid,
        quantizer: QuantizerConfig::Vq { codes: 256, dim: 8 },
        encoder_width: 16,
        base_width: 16,
        groups: 8,
        ..ModelConfig::default()
    }
}

fn toy_training() -> TrainConfig {
    TrainConfig {
        peak_lr: 1e-3,
        warmup_steps: 100,
        batch: TOY_BATCH,
        steps: TOY_STEPS,
        log_every: 100,
        checkpoint_every: 500,
        ..TrainConfig::default()
    }
}

/// Everything the toy run produces, plus the per-criterion verdicts drawn
/// from it.
struct ToyRun {
    logs: Vec<String>,
    checkpoints: Vec<Vec<u8>>,
    csv: String,
    images: Vec<Vec<u8>>,
    conditioning: Outcome,
    codec: Outcome,
    dropout_diversity: Outcome,
}

fn grid_tag(g: usize) -> String {
    format!("grid-{g}x{g}")
}

/// Decodes two different encoded grids with one seed; `true` when the
/// outputs are bit-identical.
fn same_output_for_different_grids(
    m: &CodecModel<f32>,
    a: &Image,
    b: &Image,
    images: &mut Vec<Vec<u8>>,
) -> Result<bool, String> {
    let ca = ok(encode_image(m, a, None))?;
    let cb = ok(encode_image(m, b, None))?;
    if ca.grid == cb.grid {
        return Err("the two images encode to the same grid".into());
    }
    let sampler = SamplerConfig::default();
    let out = ok(decode_batch(m, &[ca, cb], &sampler, &[7, 7]))?;
    images.extend(out.iter().map(Image::encode));
    Ok(out[0] == out[1])
}

fn toy_run(dir: &Path) -> Result<ToyRun, String> {
    let spec = SyntheticSpec {
        size: TOY_SIZE,
        classes: 4,
        train: 2048,
        heldout: 256,
    };
    ok(make_synthetic(&spec, 0, dir))?;
    let train = ok(Dataset::load(&dir.join(TRAIN_DIR)))?;
    let held = ok(Dataset::load(&dir.join(HELDOUT_DIR)))?;
    ensure!(
        train.len() == 2048 && held.len() == 256,
        "dataset has {} / {} images",
        train.len(),
        held.len()
    );
    let (images, labels) = ok(train.training_tensors(4))?;
    let data = TrainingSet {
        images: &images,
        labels: &labels,
    };
    let (probe_a, probe_b) = (&held.entries[0].image, &held.entries[1].image);

    let mut logs = Vec::new();
    let mut checkpoints = Vec::new();
    let mut outputs = Vec::new();
    let mut paths: Vec<PathBuf> = Vec::new();
    let mut identical_before = false;
    let mut identical_after = true;
    let mut null_report = Vec::new();
    let mut nulls_ok = true;
    let mut trained = Vec::new();
    for g in GRIDS {
        let mut tr = ok(Trainer::new(toy_model(g), toy_training(), 0))?;
        if g == 4 {
            let p = dir.join(format!("{UNTRAINED}.pmck"));
            ok(write_checkpoint(&p, &tr.model().to_checkpoint()))?;
            paths.push(p);
            identical_before = same_output_for_different_grids(tr.model(), probe_a, probe_b, &mut outputs)?;
        }
        let mut log = Vec::new();
        ok(tr.run(&data, &mut log, |t| {
            checkpoints.push(t.to_checkpoint().to_bytes()?);
            Ok(())
        }))?;
        let p = dir.join(format!("{}.pmck", grid_tag(g)));
        ok(write_checkpoint(&p, &tr.to_checkpoint()))?;
        checkpoints.push(ok(std::fs::read(&p))?);
        paths.push(p);
        let log = ok(String::from_utf8(log))?;
        let frac: f64 = log
            .lines()
            .last()
            .and_then(|l| l.split_whitespace().find_map(|f| f.strip_prefix("null_frac=")))
            .and_then(|v| v.parse().ok())
            .ok_or("no null fraction in the training log")?;
        let sigma = (0.1 * 0.9 / (TOY_STEPS as f64 * TOY_BATCH as f64)).sqrt();
        nulls_ok &= (frac - 0.1).abs() <= 3.0 * sigma;
        null_report.push(format!("{frac:.4}"));
        if g == 4 {
            identical_after = same_output_for_different_grids(tr.model(), probe_a, probe_b, &mut outputs)?;
        }
        logs.push(log);
        trained.push(tr);
    }

    let m1 = trained[0].model();
    let e = &held.entries[0];
    let ci = ok(encode_image(
        m1,
        &e.image,
        Some(e.label.ok_or("unlabelled held-out image")?),
    ))?;
    let mut diverse = Vec::new();
    for seed in 1..=4 {
        let sampler = SamplerConfig {
            seed,
            ..SamplerConfig::default()
        };
        diverse.push(ok(decode_image(m1, &ci, &sampler))?);
    }
    let distinct = (0..4).all(|i| (i + 1..4).all(|j| diverse[i] != diverse[j]));
    outputs.extend(diverse.iter().map(Image::encode));

    let rows = ok(rd_curve(&dir.join(HELDOUT_DIR), &paths, &EvalOptions::default()))?;
    let csv = to_csv(&rows);
    let summary = summarize(&rows);
    let lookup = |tag: &str| {
        summary
            .iter()
            .find(|s| s.0 == tag)
            .cloned()
            .ok_or(format!("no rows for {tag}"))
    };
    let untrained = lookup(UNTRAINED)?;
    let points = GRIDS
        .iter()
        .map(|&g| lookup(&grid_tag(g)))
        .collect::<Result<Vec<_>, _>>()?;
    let describe: Vec<String> = points
        .iter()
        .map(|p| format!("{} bpp={:.6} ms-ssim={:.4}", p.0, p.1, p.3))
        .collect();

    let codec = (|| {
        let gain = points[2].3 - untrained.3;
        ensure!(
            gain >= 0.15,
            "4x4 MS-SSIM {:.4} vs untrained {:.4} (gain {gain:.4})",
            points[2].3,
            untrained.3
        );
        ensure!(
            points.windows(2).all(|w| w[0].3 <= w[1].3),
            "MS-SSIM decreases: {describe:?}"
        );
        ensure!(
            points.windows(2).all(|w| w[0].1 < w[1].1),
            "bpp not increasing: {describe:?}"
        );
        for &g in &GRIDS {
            let want = spatial_rate(g, g, 256, TOY_SIZE, TOY_SIZE) + 8.0 * 3.0 / (TOY_SIZE * TOY_SIZE) as f64;
            let tag = grid_tag(g);
            ensure!(
                rows.iter().filter(|r| r.config == tag).all(|r| r.bpp == want),
                "{tag}: bpp differs from the container size"
            );
        }
        Ok(format!("untrained {:.4}; {}", untrained.3, describe.join("; ")))
    })();
    let conditioning = if !identical_before {
        Err("untrained decoder depends on the index grid".into())
    } else if identical_after {
        Err("trained decoder ignores the index grid".into())
    } else {
        Ok("identical before training, different after".into())
    };
    let dropout_diversity = if !nulls_ok {
        Err(format!("null fractions {null_report:?}"))
    } else if !distinct {
        Err("decode seeds collide".into())
    } else {
        Ok(format!("null fractions {}; 4 distinct decodes", null_report.join(", ")))
    };
    Ok(ToyRun {
        logs,
        checkpoints,
        csv,
        images: outputs,
        conditioning,
        codec,
        dropout_diversity,
    })
}

fn determinism(first: &ToyRun, second: &ToyRun, fp_a: &Fingerprint, fp_b: &Fingerprint) -> Outcome {
    ensure!(fp_a == fp_b, "diffusion suite outputs differ between runs");
    ensure!(first.logs == second.logs, "training logs differ");
    ensure!(first.checkpoints == second.checkpoints, "checkpoints differ");
    ensure!(first.csv == second.csv, "CSVs differ");
    ensure!(first.images == second.images, "decoded images differ");
    Ok(format!(
        "{} logs, {} checkpoints, {} CSV bytes, {} images identical",
        first.logs.len(),
        first.checkpoints.len(),
        first.csv.len(),
        first.images.len()
    ))
}

fn report(results: &mut Vec<(usize, &'static str, Outcome)>, n: usize, name: &'static str, r: Outcome) {
    let line = match &r {
        Ok(d) => format!("criterion {n:>2} PASS {name}: {d}"),
        Err(e) => format!("criterion {n:>2} FAIL {name}: {e}"),
    };
    // Bypasses the harness capture so the line shows in plain `cargo test` output.
    let _ = writeln!(std::io::stderr(), "{line}");
    results.push((n, name, r));
}

#[test]
fn acceptance() {
    let mut results = Vec::new();
    report(&mut results, 1, "rate arithmetic", guarded(rate_arithmetic));
    report(
        &mut results,
        2,
        "bitstream losslessness",
        guarded(bitstream_losslessness),
    );
    report(
        &mut results,
        3,
        "arithmetic coder optimality",
        guarded(arith_optimality),
    );
    let mut fp_first = None;
    report(
        &mut results,
        4,
        "diffusion math",
        guarded(|| {
            diffusion_suite().map(|(d, fp)| {
                fp_first = Some(fp);
                d
            })
        }),
    );
    report(&mut results, 5, "gradient correctness", guarded(gradient_checks));
    report(&mut results, 6, "vector quantization", guarded(vq_suite));

    let dir_a = tempfile::tempdir().expect("temp dir");
    let dir_b = tempfile::tempdir().expect("temp dir");
    let first = catch_unwind(AssertUnwindSafe(|| toy_run(dir_a.path())));
    let first = match first {
        Ok(Ok(run)) => Ok(run),
        Ok(Err(e)) => Err(e),
        Err(_) => Err("toy run panicked".to_string()),
    };
    let (c7, c8, c9) = match &first {
        Ok(run) => (
            run.conditioning.clone(),
            run.codec.clone(),
            run.dropout_diversity.clone(),
        ),
        Err(e) => (Err(e.clone()), Err(e.clone()), Err(e.clone())),
    };
    report(&mut results, 7, "zero-init conditioning", c7);
    report(&mut results, 8, "end-to-end toy codec", c8);
    report(&mut results, 9, "dropout and diversity", c9);

    let repeat = guarded(|| {
        let (_, fp_second) = diffusion_suite()?;
        let second = toy_run(dir_b.path())?;
        let first = first.as_ref().map_err(|e| e.clone())?;
        let fp_first = fp_first.as_ref().ok_or("first diffusion run failed")?;
        determinism(first, &second, fp_first, &fp_second)
    });
    report(&mut results, 10, "determinism", repeat);

    let mut err = std::io::stderr().lock();
    let _ = writeln!(err);
    for (n, name, r) in &results {
        let _ = writeln!(
            err,
            "criterion {n:>2} {} {name}",
            if r.is_ok() { "PASS" } else { "FAIL" }
        );
    }
    drop(err);
    let failed: Vec<_> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
