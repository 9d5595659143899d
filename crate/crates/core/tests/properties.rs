use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use isp_align::backbone::{dwt_haar, iwt_haar};
use isp_align::flowalign::{upsample_flow, valid_mask, warp, FlowField, ValidityMask};
use isp_align::gcm::{coords_batch, init_gcm, spn_forward, GcmConfig};
use isp_align::losses::masked_l1;
use isp_align::metrics::{psnr, ssim};
use isp_align::nn::Tape;
use isp_align::rawdata::{coordinate_map, demosaic_simple, pack_bayer, BayerPattern, RawFrame};
use isp_align::Tensor;

fn random<T: isp_align::Real>(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(lo..hi)).unwrap())
}

fn random_mask(h: usize, w: usize, seed: u64, p: f64) -> ValidityMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ValidityMask::from_tensor(Tensor::from_fn(
        &[1, h, w],
        |_| if rng.random_bool(p) { 1.0 } else { 0.0 },
    ))
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn wavelet_round_trip_and_energy(n in 1usize..3, c in 1usize..4, h in 1usize..9, w in 1usize..9, seed: u64) {
        let x: Tensor<f64> = random(&[n, c, 2 * h, 2 * w], seed, -4.0, 4.0);
        let y = dwt_haar(&x).unwrap();
        prop_assert_eq!(y.shape(), &[n, 4 * c, h, w]);
        let back = iwt_haar(&y).unwrap();
        prop_assert!(back.max_abs_diff(&x) <= 1e-12);
        let e = |t: &Tensor<f64>| t.data().iter().map(|v| v * v).sum::<f64>();
        prop_assert!((e(&y) - e(&x)).abs() <= 1e-12 * e(&x).max(1.0));
    }

    #[test]
    fn warp_zero_flow_is_identity_and_linear(h in 2usize..12, w in 2usize..12, seed: u64, a in -3.0f64..3.0) {
        let img: Tensor<f64> = random(&[3, h, w], seed, 0.0, 1.0);
        prop_assert_eq!(warp(&img, &FlowField::zeros(h, w)).unwrap(), img.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let d: Vec<(f32, f32)> = (0..h * w).map(|_| (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0))).collect();
        let flow = FlowField::from_fn(h, w, |y, x| d[y * w + x]);
        let other: Tensor<f64> = random(&[3, h, w], seed ^ 2, 0.0, 1.0);
        let combo = img.zip_map(&other, |p, q| a * p + q).unwrap();
        let lhs = warp(&combo, &flow).unwrap();
        let rhs = warp(&img, &flow).unwrap().zip_map(&warp(&other, &flow).unwrap(), |p, q| a * p + q).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn integer_translation_matches_index_shift(h in 3usize..14, w in 3usize..14, u in -4i32..5, v in -4i32..5, seed: u64) {
        let img: Tensor<f32> = random(&[2, h, w], seed, 0.0, 1.0);
        let flow = FlowField::constant(h, w, u as f32, v as f32);
        let out = warp(&img, &flow).unwrap();
        let m = valid_mask(&flow, 1e-3);
        prop_assert!(m.tensor().data().iter().all(|&x| x == 0.0 || x == 1.0));
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = (y as i32 + v, x as i32 + u);
                let inside = sy >= 0 && sx >= 0 && sy < h as i32 && sx < w as i32;
                prop_assert_eq!(m.is_valid(y, x), inside);
                if inside {
                    for c in 0..2 {
                        prop_assert_eq!(out.at3(c, y, x), img.at3(c, sy as usize, sx as usize));
                    }
                }
            }
        }
    }

    #[test]
    fn constant_flow_upsamples_by_scale(h in 1usize..8, w in 1usize..8, s in 2usize..5, u in -5.0f32..5.0, v in -5.0f32..5.0) {
        let up = upsample_flow(&FlowField::constant(h, w, u, v), s).unwrap();
        prop_assert_eq!((up.height(), up.width()), (h * s, w * s));
        for y in 0..h * s {
            for x in 0..w * s {
                prop_assert_eq!((up.u(y, x), up.v(y, x)), (u * s as f32, v * s as f32));
            }
        }
    }

    #[test]
    fn spn_commutes_with_pixel_permutations(seed: u64, h in 2usize..7, w in 2usize..7) {
        let cfg = GcmConfig::default();
        let store = init_gcm::<f32>(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let x: Tensor<f32> = random(&[1, 3, h, w], seed ^ 7, 0.0, 1.0);
        let tau: Tensor<f32> = coords_batch(1, h, w).unwrap();
        let g: Tensor<f32> = random(&[1, 64, 1, 1], seed ^ 8, -1.0, 1.0);
        let mut perm: Vec<usize> = (0..h * w).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 9);
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let permute = |t: &Tensor<f32>| {
            let c = t.dim(1);
            Tensor::from_fn(t.shape(), |i| t.data()[(i / (h * w)) * h * w + perm[i % (h * w)]]).reshape(&[1, c, h, w]).unwrap()
        };
        let run = |x: &Tensor<f32>, tau: &Tensor<f32>| {
            let mut t = Tape::inference();
            let b = store.bind(&mut t, false);
            let (xv, tv, gv) = (t.constant(x.clone()), t.constant(tau.clone()), t.constant(g.clone()));
            let out = spn_forward(&mut t, &b, &cfg, xv, Some(tv), Some(gv)).unwrap();
            t.take_value(out)
        };
        let direct = permute(&run(&x, &tau));
        let moved = run(&permute(&x), &permute(&tau));
        prop_assert_eq!(direct, moved);
    }

    #[test]
    fn masked_l1_ignores_masked_out_values(seed: u64, h in 2usize..10, w in 2usize..10, k in -3.0f64..3.0) {
        let a: Tensor<f64> = random(&[2, 3, h, w], seed, 0.0, 1.0);
        let b: Tensor<f64> = random(&[2, 3, h, w], seed ^ 1, 0.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let m = Tensor::from_fn(&[2, 1, h, w], |_| if rng.random_bool(0.6) { 1.0 } else { 0.0 });
        let (base, _) = masked_l1(&a, &b, &m).unwrap();
        // scribble over the masked-out sites
        let mut c = a.clone();
        let hw = h * w;
        for (i, v) in c.data_mut().iter_mut().enumerate() {
            let (n, p) = (i / (3 * hw), i % hw);
            if m.data()[n * hw + p] == 0.0 {
                *v = rng.random_range(-5.0..5.0);
            }
        }
        prop_assert_eq!(masked_l1(&c, &b, &m).unwrap().0, base);
        // absolute homogeneity of the residual
        let scaled = b.zip_map(&a, |bv, av| bv + k * (av - bv)).unwrap();
        let (s, _) = masked_l1(&scaled, &b, &m).unwrap();
        prop_assert!((s - k.abs() * base).abs() < 1e-12);
        prop_assert!(base >= 0.0);
        prop_assert_eq!(masked_l1(&a, &a, &m).unwrap().0, 0.0);
    }

    #[test]
    fn psnr_symmetric_and_offset_invariant(seed: u64, off in -0.2f32..0.2) {
        let a: Tensor<f32> = random(&[3, 12, 12], seed, 0.25, 0.75);
        let b: Tensor<f32> = random(&[3, 12, 12], seed ^ 3, 0.25, 0.75);
        let p = psnr(&a, &b, None).unwrap();
        prop_assert_eq!(p, psnr(&b, &a, None).unwrap());
        let (a2, b2) = (a.map(|v| v + off), b.map(|v| v + off));
        prop_assert!((psnr(&a2, &b2, None).unwrap() - p).abs() < 1e-3);
    }

    #[test]
    fn ssim_identity_and_symmetry(seed: u64, h in 11usize..20, w in 11usize..20) {
        let a: Tensor<f32> = random(&[3, h, w], seed, 0.0, 1.0);
        let b: Tensor<f32> = random(&[3, h, w], seed ^ 5, 0.0, 1.0);
        prop_assert_eq!(ssim(&a, &a, None).unwrap(), 1.0);
        prop_assert!((ssim(&a, &b, None).unwrap() - ssim(&b, &a, None).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn masked_metrics_ignore_invalid_pixels(seed: u64) {
        let (h, w) = (24, 24);
        let a: Tensor<f32> = random(&[3, h, w], seed, 0.0, 1.0);
        let b: Tensor<f32> = random(&[3, h, w], seed ^ 4, 0.0, 1.0);
        // a solid valid block keeps some SSIM windows alive
        let m = ValidityMask::from_tensor(Tensor::from_fn(&[1, h, w], |i| if i / w < 16 && i % w < 16 { 1.0 } else { 0.0 })).unwrap();
        let noise = random_mask(h, w, seed ^ 6, 0.5);
        let mut c = a.clone();
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    if !m.is_valid(y, x) {
                        c.set3(ch, y, x, if noise.is_valid(y, x) { 1.0 } else { 0.0 });
                    }
                }
            }
        }
        prop_assert_eq!(psnr(&a, &b, Some(&m)).unwrap(), psnr(&c, &b, Some(&m)).unwrap());
        prop_assert_eq!(ssim(&a, &b, Some(&m)).unwrap(), ssim(&c, &b, Some(&m)).unwrap());
    }

    #[test]
    fn demosaic_exact_on_constants(level in 0u16..=1023, h in 1usize..6, w in 1usize..6, pi in 0usize..4) {
        let pattern = BayerPattern::ALL[pi];
        let raw = RawFrame::new(vec![level; 4 * h * w], 2 * h, 2 * w, pattern, 0, 1023).unwrap();
        let d = demosaic_simple(&raw).unwrap();
        let expect = level as f32 / 1023.0;
        prop_assert!(d.data().iter().all(|&v| v == expect));
    }

    #[test]
    fn packing_samples_the_lattice(seed: u64, h in 1usize..6, w in 1usize..6, pi in 0usize..4) {
        let pattern = BayerPattern::ALL[pi];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mosaic: Vec<u16> = (0..4 * h * w).map(|_| rng.random_range(64..=1023)).collect();
        let raw = RawFrame::new(mosaic, 2 * h, 2 * w, pattern, 64, 1023).unwrap();
        let packed = pack_bayer(&raw).unwrap();
        for (k, (oy, ox)) in pattern.packing_offsets().into_iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    prop_assert_eq!(packed.at3(k, y, x), raw.normalized(2 * y + oy, 2 * x + ox));
                }
            }
        }
    }

    #[test]
    fn coordinate_map_flips_negate(h in 2usize..20, w in 2usize..20) {
        let t = coordinate_map(h, w).unwrap().into_tensor();
        for y in 0..h {
            for x in 0..w {
                prop_assert_eq!(t.at3(0, y, w - 1 - x), -t.at3(0, y, x));
                prop_assert_eq!(t.at3(1, h - 1 - y, x), -t.at3(1, y, x));
            }
        }
    }
}
