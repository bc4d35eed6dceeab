use perco_core::arith;
use perco_core::bitstream::*;
use perco_core::diffusion::*;
use perco_core::image_io::{byte_to_unit, unit_to_byte, Image};
use perco_core::metrics::{ms_ssim, mse, psnr};
use perco_core::quantization::{assign, Codebook, FsqConfig, IndexGrid};
use perco_nn::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn grid_strategy() -> impl Strategy<Value = (IndexGrid, u32)> {
    (1usize..=8, 1usize..=8, 1u32..=16).prop_flat_map(|(h, w, bits)| {
        let max = (1u32 << bits) - 1;
        prop::collection::vec(0..=max, h * w).prop_map(move |ix| (IndexGrid::new(h, w, ix).unwrap(), bits))
    })
}

proptest! {
    #[test]
    fn index_packing_round_trips((grid, bits) in grid_strategy()) {
        let packed = pack_indices(&grid, bits).unwrap();
        prop_assert_eq!(packed.len(), (grid.h * grid.w * bits as usize).div_ceil(8));
        prop_assert_eq!(unpack_indices(&packed, grid.h, grid.w, bits).unwrap(), grid);
    }

    #[test]
    fn containers_round_trip(
        (grid, bits) in grid_strategy(),
        height in 8u16..=2048,
        width in 8u16..=2048,
        payload in prop::collection::vec(any::<u8>(), 0..64),
    ) {
        let coded = if payload.is_empty() { Vec::new() } else { arith::encode(&payload).unwrap() };
        let ci = CompressedImage::new(height, width, grid, bits as u8, coded).unwrap();
        let bytes = write_container(&ci).unwrap();
        prop_assert_eq!(bytes.len(), ci.header.file_len());
        let back = read_container(&bytes).unwrap();
        prop_assert_eq!(&back, &ci);
        if !payload.is_empty() {
            prop_assert_eq!(arith::decode(&back.global_payload).unwrap(), payload);
        }
    }

    #[test]
    fn corrupted_headers_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..40)) {
        let _ = read_container(&bytes);
    }

    #[test]
    fn arithmetic_coding_round_trips(payload in prop::collection::vec(any::<u8>(), 0..2000)) {
        let coded = arith::encode(&payload).unwrap();
        prop_assert_eq!(arith::decode(&coded).unwrap(), payload);
    }

    #[test]
    fn alpha_bar_strictly_decreases(betas in prop::collection::vec(1e-6f64..0.999, 1..200)) {
        let s = NoiseSchedule::from_betas(betas).unwrap();
        let ab = s.alphas_cumprod();
        prop_assert!(ab[0] < 1.0 && ab[0] > 0.0);
        prop_assert!(ab.windows(2).all(|w| w[1] < w[0] || w[1] == 0.0));
        prop_assert!(ab.iter().all(|&a| (0.0..1.0).contains(&a)));
    }

    #[test]
    fn velocity_inverts(ab in 1e-6f64..1.0, x0 in -1.0f64..1.0, eps in -4.0f64..4.0) {
        let (x0t, et) = (Tensor::scalar(x0), Tensor::scalar(eps));
        let x_t = forward_marginal_at(&x0t, &et, ab).unwrap();
        let v = v_from_x0_eps_at(&x0t, &et, ab).unwrap();
        let (a, b) = x0_eps_from_v_at(&v, &x_t, ab).unwrap();
        prop_assert!((a.item() - x0).abs() <= 1e-9);
        prop_assert!((b.item() - eps).abs() <= 1e-9);
    }

    #[test]
    fn fsq_index_is_a_bijection(levels in prop::collection::vec(2u32..=9, 1..=4)) {
        let cfg = FsqConfig::new(levels).unwrap();
        let mut seen = vec![false; cfg.size() as usize];
        for i in 0..cfg.size() as u32 {
            let d = cfg.digits(i).unwrap();
            prop_assert_eq!(cfg.index(&d).unwrap(), i);
            prop_assert!(!std::mem::replace(&mut seen[i as usize], true));
        }
    }

    #[test]
    fn nearest_code_matches_brute_force(seed in any::<u64>(), log2_v in 1u32..=8, d in 1usize..=6) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let cb = Codebook::<f64>::random(1 << log2_v, d, &mut r).unwrap();
        let feats = Tensor::<f64>::randn(&[20, d], &mut r);
        let a = assign(&feats, &cb).unwrap();
        for (row, &got) in feats.data().chunks(d).zip(&a.indices) {
            let dist = |k: usize| cb.code(k).iter().zip(row).map(|(c, x)| (c - x) * (c - x)).sum::<f64>();
            let best = (0..cb.len()).min_by(|&i, &j| dist(i).partial_cmp(&dist(j)).unwrap()).unwrap();
            prop_assert!((dist(best) - dist(got as usize)).abs() <= 1e-12);
        }
    }

    #[test]
    fn ms_ssim_is_symmetric(seed in any::<u64>(), sigma in 0.01f64..0.3) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let a: Tensor<f64> = Tensor::uniform(&[3 * 24 * 24], 0.0, 1.0, &mut r);
        let n: Tensor<f64> = Tensor::randn(&[3 * 24 * 24], &mut r);
        let b: Vec<f64> = a.data().iter().zip(n.data()).map(|(x, e)| (x + sigma * e).clamp(0.0, 1.0)).collect();
        let ab = ms_ssim(a.data(), &b, 3, 24, 24, 1.0).unwrap();
        let ba = ms_ssim(&b, a.data(), 3, 24, 24, 1.0).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-9);
        prop_assert!(ab <= 1.0 + 1e-12 && ab >= 0.0);
    }

    #[test]
    fn psnr_inverts_to_mse(a in prop::collection::vec(0.0f64..1.0, 1..64), shift in 0.001f64..0.5) {
        let b: Vec<f64> = a.iter().map(|x| x + shift).collect();
        let p = psnr(&a, &b, 1.0).unwrap();
        prop_assert!((10f64.powf(-p / 10.0) - mse(&a, &b)).abs() <= 1e-12);
    }

    #[test]
    fn pixel_mapping_round_trips(v in any::<u8>(), x in -1.0f64..=1.0) {
        prop_assert_eq!(unit_to_byte(byte_to_unit(v)), v);
        prop_assert!((byte_to_unit(unit_to_byte(x)) - x).abs() <= 1.0 / 255.0 + 1e-12);
    }

    #[test]
    fn ppm_files_round_trip(gray in any::<bool>(), h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let c = if gray { 1 } else { 3 };
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let px: Vec<u8> = (0..c * h * w).map(|_| rand::Rng::random(&mut r)).collect();
        let img = Image::new(c, h, w, px).unwrap();
        let bytes = img.encode();
        let back = Image::decode(&bytes).unwrap();
        prop_assert_eq!(back.encode(), bytes);
        prop_assert_eq!(back, img);
    }
}
