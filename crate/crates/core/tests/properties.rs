mod common;

use common::*;
use hdrmask::io::{decode_pfm, decode_ppm, decode_rgbe, decode_shard, CheckpointFile};
use hdrmask::losses::{
    blend_with_ground_truth, gram_matrix, perceptual_loss, reconstruction_loss, total_loss,
    BlendDomain, FeatureExtractor, LossWeights,
};
use hdrmask::network::{
    exposure_mask, masked_conv_layer, predict, propagate_mask, ForwardOptions, MaskedFeature,
    MaskingMode, SoftMask, UNetConfig,
};
use hdrmask::pipeline::{
    compose_hdr, mu_law_compress, simulate_ldr, CameraCurve, HdrImage, LdrImage,
};
use hdrmask::sampler::{bilateral_filter, patch_metric, sample_patches, SamplerConfig};
use hdrmask::tensor::kernels::conv2d;
use hdrmask::tensor::{Activation, ConvSpec, Graph};
use hdrmask::trainer::{
    initialize_parameters, train_inpainting, PlateauScheduler, TrainConfig, TrainerState,
};
use hdrmask::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn small_unet() -> UNetConfig {
    UNetConfig {
        levels: 2,
        base_channels: 4,
        ..UNetConfig::default()
    }
}

fn conv_case(seed: u64) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, usize, usize) {
    let mut r = rng(seed);
    let cin = r.gen_range(1..=4);
    let cout = r.gen_range(1..=4);
    let k = [1, 3, 5][r.gen_range(0..3)];
    let h = r.gen_range(k..=8);
    let w = r.gen_range(k..=8);
    let stride = r.gen_range(1..=2);
    let padding = r.gen_range(0..=k / 2);
    let n = r.gen_range(1..=2);
    let x = random_tensor(&mut r, &[n, cin, h, w], -2.0, 2.0);
    let wt = random_tensor(&mut r, &[cout, cin, k, k], -1.0, 1.0);
    let b = random_tensor(&mut r, &[cout], -0.5, 0.5);
    (x, wt, b, stride, padding)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv2d_matches_direct_summation(seed in any::<u64>(), pad_value in -1.0f64..1.0) {
        let (x, w, b, stride, padding) = conv_case(seed);
        let spec = ConvSpec::new(stride, padding).with_pad_value(pad_value);
        let oracle = conv2d_oracle(&x, &w, Some(&b), stride, padding, pad_value);
        let y64 = conv2d(&x, &w, Some(&b), &spec).unwrap();
        prop_assert_eq!(y64.shape(), oracle.shape());
        prop_assert!(normwise_rel_error(y64.data(), oracle.data()) <= 1e-12);
        let y32 = conv2d(&x.cast::<f32>(), &w.cast::<f32>(), Some(&b.cast::<f32>()), &spec).unwrap();
        let oracle32 = conv2d_oracle(&x.cast::<f32>().cast(), &w.cast::<f32>().cast(), Some(&b.cast::<f32>().cast()), stride, padding, pad_value);
        prop_assert!(normwise_rel_error(y32.cast::<f64>().data(), oracle32.data()) <= 1e-6);
        // Repeated evaluation is bit-identical.
        let again = conv2d(&x, &w, Some(&b), &spec).unwrap();
        prop_assert!(again.data().iter().zip(y64.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients(seed in any::<u64>()) {
        let (x, w, b, stride, padding) = conv_case(seed);
        let mut r = rng(seed ^ 1);
        let shape = conv2d(&x, &w, Some(&b), &ConvSpec::new(stride, padding)).unwrap().shape().to_vec();
        let c1 = random_tensor(&mut r, &shape, -1.0, 1.0);
        let c2 = random_tensor(&mut r, &shape, -1.0, 1.0);
        let grads = |weights: &[&Tensor<f64>]| {
            let mut g = Graph::new();
            let xv = g.param(x.clone());
            let wv = g.param(w.clone());
            let y = g.conv2d(xv, wv, None, ConvSpec::new(stride, padding)).unwrap();
            let y = g.activation(y, Activation::leaky()).unwrap();
            let mut total = None;
            for c in weights {
                let t = g.mul_const(y, c).unwrap();
                let t = g.sum(t).unwrap();
                total = Some(match total {
                    None => t,
                    Some(s) => g.add(s, t).unwrap(),
                });
            }
            let gr = g.backward(total.unwrap()).unwrap();
            (gr.wrt(xv, &x), gr.wrt(wv, &w))
        };
        let (ax, aw) = grads(&[&c1, &c2]);
        let (bx, bw) = grads(&[&c1]);
        let (cx, cw) = grads(&[&c2]);
        for (s, (p, q)) in ax.data().iter().zip(bx.data().iter().zip(cx.data())) {
            prop_assert!((s - (p + q)).abs() <= 1e-12 * (1.0 + s.abs()));
        }
        for (s, (p, q)) in aw.data().iter().zip(bw.data().iter().zip(cw.data())) {
            prop_assert!((s - (p + q)).abs() <= 1e-12 * (1.0 + s.abs()));
        }
    }

    #[test]
    fn propagated_masks_are_bounded_and_monotone(seed in any::<u64>(), layers in 1usize..6) {
        let mut r = rng(seed);
        let c = r.gen_range(1..=3);
        let mut lo: Tensor<f64> = Tensor::from_fn([1, c, 8, 8], |_| r.gen_range(0.0..1.0));
        let bump = random_tensor(&mut r, &[1, c, 8, 8], 0.0, 0.5);
        let mut hi = lo.zip_map(&bump, |v, d| (v + d).min(1.0)).unwrap();
        let mut cin = c;
        for _ in 0..layers {
            let cout = r.gen_range(1..=3);
            let w = random_tensor(&mut r, &[cout, cin, 3, 3], -1.0, 1.0);
            let stride = r.gen_range(1..=2);
            lo = propagate_mask(&lo, &w, stride, 1).unwrap();
            hi = propagate_mask(&hi, &w, stride, 1).unwrap();
            for (a, b) in lo.data().iter().zip(hi.data()) {
                prop_assert!((0.0..=1.0).contains(a) && (0.0..=1.0).contains(b));
                prop_assert!(a <= b);
            }
            cin = cout;
        }
    }

    #[test]
    fn exposure_mask_stays_in_unit_range(values in prop::collection::vec(0.0f64..=1.0, 12), alpha in 0.01f64..0.99) {
        let img = LdrImage::new(Tensor::new(vec![3, 2, 2], values.clone()).unwrap()).unwrap();
        let m = exposure_mask(&img, alpha).unwrap();
        for (v, t) in m.values().data().iter().zip(&values) {
            prop_assert!((0.0..=1.0).contains(v));
            if *t <= alpha { prop_assert_eq!(*v, 1.0); }
            if *t == 1.0 { prop_assert_eq!(*v, 0.0); }
        }
    }

    #[test]
    fn zero_mask_leaves_only_the_bias(seed in any::<u64>()) {
        let mut r = rng(seed);
        let features = random_tensor(&mut r, &[1, 3, 6, 6], -5.0, 5.0);
        let w = random_tensor(&mut r, &[4, 3, 3, 3], -1.0, 1.0);
        let b = random_tensor(&mut r, &[4], -1.0, 1.0);
        let input = MaskedFeature { features, mask: SoftMask::new(Tensor::zeros([1, 3, 6, 6])).unwrap() };
        let out = masked_conv_layer(&input, &w, &b, 1, 1, Activation::Identity).unwrap();
        for (i, v) in out.features.data().iter().enumerate() {
            prop_assert_eq!(*v, b.data()[i / 36]);
        }
    }

    #[test]
    fn compose_hdr_at_mask_extremes(seed in any::<u64>()) {
        let mut r = rng(seed);
        let t = LdrImage::new(random_tensor(&mut r, &[3, 4, 5], 0.0, 1.0)).unwrap();
        let y = random_tensor(&mut r, &[1, 3, 4, 5], 0.0, 5.0);
        let ones = SoftMask::new(Tensor::ones([3, 4, 5])).unwrap();
        let zeros = SoftMask::new(Tensor::zeros([3, 4, 5])).unwrap();
        let a = compose_hdr(&t, &ones, &y, 2.0).unwrap();
        // Opaque exponent, so the reference is not folded into `tv * tv`.
        let gamma = std::hint::black_box(2.0f64);
        for (h, tv) in a.pixels().data().iter().zip(t.pixels().data()) {
            prop_assert_eq!(*h, tv.powf(gamma));
        }
        let b = compose_hdr(&t, &zeros, &y, 2.0).unwrap();
        for (h, yv) in b.pixels().data().iter().zip(y.data()) {
            prop_assert_eq!(*h, yv.exp() - 1.0);
        }
    }

    #[test]
    fn mu_law_is_strictly_monotone_and_fixes_endpoints(mut xs in prop::collection::vec(0.0f64..=1.0, 2..20), mu in 1.0f64..1000.0) {
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        let t: Tensor<f64> = mu_law_compress(&Tensor::new(vec![xs.len()], xs.clone()).unwrap(), mu).unwrap();
        for p in t.data().windows(2) {
            prop_assert!(p[0] < p[1]);
        }
        let ends: Tensor<f64> = mu_law_compress(&Tensor::new(vec![2], vec![0.0, 1.0]).unwrap(), mu).unwrap();
        prop_assert_eq!(ends.data()[0], 0.0);
        prop_assert!((ends.data()[1] - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn unquantized_capture_linearizes_to_clipped_radiance(seed in any::<u64>(), pct in 50.0f64..99.0) {
        let mut r = rng(seed);
        let h = HdrImage::new(random_tensor(&mut r, &[3, 6, 6], 0.0, 40.0)).unwrap();
        let cap = simulate_ldr(&h, pct, &CameraCurve::default(), 0).unwrap();
        let scaled = cap.scaled_hdr(&h);
        let m = exposure_mask(&cap.ldr, 0.96).unwrap();
        let rec = compose_hdr(&cap.ldr, &m, &Tensor::zeros([1, 3, 6, 6]), 2.0).unwrap();
        for (((t, s), mv), o) in cap.ldr.pixels().data().iter().zip(scaled.pixels().data()).zip(m.values().data()).zip(rec.pixels().data()) {
            let clipped = s.min(1.0);
            prop_assert!((t.powf(2.0) - clipped).abs() <= 1e-12 * (1.0 + clipped));
            if *mv == 1.0 {
                prop_assert!((o - s).abs() <= 1e-12 * (1.0 + s));
            }
        }
    }

    #[test]
    fn loss_report_recomposes_and_ignores_well_exposed_predictions(seed in any::<u64>()) {
        let mut r = rng(seed);
        let shape = [1, 3, 8, 8];
        let h = random_tensor(&mut r, &shape, 0.0, 20.0);
        let m = Tensor::from_fn(shape.to_vec(), |_| if r.gen_bool(0.5) { 1.0 } else { r.gen_range(0.0..1.0) });
        let y = random_tensor(&mut r, &shape, 0.0, 3.0);
        let y2 = y.zip_map(&m, |v, mv| if mv == 1.0 { v + 7.0 } else { v }).unwrap();
        let fx = FeatureExtractor::<f64>::random(3, &[4, 6], 3, seed);
        let w = LossWeights::default();
        let eval = |y: &Tensor<f64>| {
            let mut g = Graph::new();
            let yv = g.constant(y.clone());
            let (_, rep) = total_loss(&mut g, yv, &h, &m, &fx, &w).unwrap();
            rep
        };
        let (a, b) = (eval(&y), eval(&y2));
        prop_assert!(a.recomposition_error() <= 1e-6);
        prop_assert!(a.terms.iter().all(|t| t.value >= 0.0));
        prop_assert_eq!(a.total, b.total);
        prop_assert_eq!(
            blend_with_ground_truth(&h, &y, &m, BlendDomain::Linear).unwrap(),
            blend_with_ground_truth(&h, &y2, &m, BlendDomain::Linear).unwrap()
        );
    }

    #[test]
    fn losses_vanish_on_agreement(seed in any::<u64>()) {
        let mut r = rng(seed);
        let shape = [1, 3, 8, 8];
        let h = random_tensor(&mut r, &shape, 0.0, 20.0);
        let m = random_tensor(&mut r, &shape, 0.0, 1.0);
        let y = h.map(|v| (v + 1.0).ln());
        prop_assert!(reconstruction_loss(&y, &h, &m).unwrap() <= 1e-15);
        let fx = FeatureExtractor::<f64>::random(3, &[4], 3, seed);
        let (v, s) = perceptual_loss(&h, &h, &fx, &LossWeights::default()).unwrap();
        prop_assert_eq!((v, s), (0.0, 0.0));
        let other = random_tensor(&mut r, &shape, 0.0, 20.0);
        let (v, s) = perceptual_loss(&other, &h, &fx, &LossWeights::default()).unwrap();
        prop_assert!(v >= 0.0 && s >= 0.0);
    }

    #[test]
    fn gram_matrix_is_symmetric_psd(seed in any::<u64>(), rows in 1usize..20, c in 1usize..5) {
        let mut r = rng(seed);
        let f = random_tensor(&mut r, &[rows, c], -3.0, 3.0);
        let gm = gram_matrix(&f).unwrap();
        let d = gm.data();
        for i in 0..c {
            for j in 0..c {
                prop_assert!((d[i * c + j] - d[j * c + i]).abs() <= 1e-15);
            }
        }
        let min = symmetric_eigenvalues(d, c).into_iter().fold(f64::INFINITY, f64::min);
        prop_assert!(min >= -1e-8, "smallest eigenvalue {}", min);
    }

    #[test]
    fn patch_metric_zero_when_valid_and_shift_invariant(seed in any::<u64>(), k in 1.0f64..10.0) {
        let mut r = rng(seed);
        let h = HdrImage::new(random_tensor(&mut r, &[3, 12, 12], 0.0, 30.0)).unwrap();
        let cfg = SamplerConfig { sigma_s: 2.0, ..SamplerConfig::default() };
        let ones = SoftMask::new(Tensor::ones([3, 12, 12])).unwrap();
        prop_assert_eq!(patch_metric(&h, &ones, &cfg).unwrap(), 0.0);
        let m = SoftMask::new(random_tensor(&mut r, &[3, 12, 12], 0.0, 1.0)).unwrap();
        let a = patch_metric(&h, &m, &cfg).unwrap();
        prop_assert!(a >= 0.0);
        let shifted = HdrImage::new(h.pixels().map(|v| k * (v + 1.0) - 1.0)).unwrap();
        let b = patch_metric(&shifted, &m, &cfg).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()), "{} vs {}", a, b);
    }

    #[test]
    fn bilateral_limits(seed in any::<u64>(), sigma_s in 0.5f64..3.0) {
        let mut r = rng(seed);
        let (h, w) = (r.gen_range(4..10), r.gen_range(4..10));
        let l = random_tensor(&mut r, &[h, w], -2.0, 2.0);
        let radius = (2.0 * sigma_s).ceil() as usize;
        let wide = bilateral_filter(&l, 1e12, sigma_s, radius).unwrap();
        let blur = gaussian_oracle(l.data(), h, w, sigma_s, radius);
        prop_assert!(normwise_rel_error(wide.data(), &blur) <= 1e-9);
        let narrow = bilateral_filter(&l, 1.0, 1e-3, 2).unwrap();
        prop_assert!(normwise_rel_error(narrow.data(), l.data()) <= 1e-12);
    }

    #[test]
    fn plateau_lr_is_non_increasing_with_floor(values in prop::collection::vec(0.0f64..2.0, 1..60), patience in 1usize..5) {
        let mut s = PlateauScheduler::new(1e-5, patience, 2.0);
        let mut last = s.lr;
        for v in values {
            let lr = s.observe(v);
            prop_assert!(lr <= last && lr >= 1e-6);
            last = lr;
        }
    }

    #[test]
    fn readers_never_panic_on_arbitrary_bytes(bytes in prop::collection::vec(any::<u8>(), 0..256), prefix in 0usize..6) {
        let heads: [&[u8]; 6] = [b"", b"PF\n", b"P6\n", b"#?RADIANCE\n", b"MHDR", b"MHDS"];
        let mut b = heads[prefix].to_vec();
        b.extend(bytes);
        let _ = decode_pfm(&b);
        let _ = decode_ppm(&b);
        let _ = decode_rgbe(&b);
        let _ = CheckpointFile::decode(&b);
        let _ = decode_shard(&b);
    }
}

#[test]
fn unit_mask_network_matches_unmasked_network() {
    let cfg = small_unet();
    for seed in 0..10u64 {
        let params = initialize_parameters(&cfg, seed).cast::<f64>();
        let mut r = rng(seed);
        let x = random_tensor(&mut r, &[1, 3, 8, 8], 0.0, 1.0);
        let ones = Tensor::ones([1, 3, 8, 8]);
        let run = |mode| {
            predict(
                &x,
                &ones,
                &params,
                &cfg,
                ForwardOptions {
                    mode,
                    keep_masks: true,
                },
            )
            .unwrap()
        };
        let (fm, masks) = run(MaskingMode::FMask);
        let (sc, _) = run(MaskingMode::SConv);
        assert!(normwise_rel_error(fm.data(), sc.data()) <= 1e-3);
        for m in &masks {
            assert!(m
                .mask
                .data()
                .iter()
                .all(|&v| (1.0 - 1e-4..=1.0).contains(&v)));
        }
    }
}

#[test]
fn sconv_ignores_the_mask_and_imask_only_masks_the_input() {
    let cfg = small_unet();
    let params = initialize_parameters(&cfg, 3).cast::<f64>();
    let mut r = rng(3);
    let x = random_tensor(&mut r, &[1, 3, 8, 8], 0.0, 1.0);
    let m = random_tensor(&mut r, &[1, 3, 8, 8], 0.0, 1.0);
    let run = |mode, input: &Tensor<f64>, mask: &Tensor<f64>| {
        predict(
            input,
            mask,
            &params,
            &cfg,
            ForwardOptions {
                mode,
                keep_masks: false,
            },
        )
        .unwrap()
        .0
    };
    let ones = Tensor::ones([1, 3, 8, 8]);
    assert_eq!(
        run(MaskingMode::SConv, &x, &m),
        run(MaskingMode::SConv, &x, &ones)
    );
    let xm = x.zip_map(&m, |a, b| a * b).unwrap();
    assert_eq!(
        run(MaskingMode::IMask, &x, &m),
        run(MaskingMode::SConv, &xm, &ones)
    );
    assert_ne!(
        run(MaskingMode::FMask, &x, &m),
        run(MaskingMode::IMask, &x, &m)
    );
}

#[test]
fn sample_patches_respects_count_threshold_and_saturation() {
    let cfg = SamplerConfig {
        patch_size: 32,
        per_image: 6,
        threshold: 0.3,
        sigma_s: 3.0,
        ..SamplerConfig::default()
    };
    for seed in 0..6u64 {
        let h = hdrmask::trainer::corpus::hdr_scene(96, seed);
        let recs = sample_patches(&h, seed, &cfg, seed).unwrap();
        assert!(recs.len() <= cfg.per_image);
        for rec in recs {
            assert!(rec.score > cfg.threshold);
            assert!(rec.mask.values().data().iter().any(|&v| v < 1.0));
            assert_eq!(rec.mask, exposure_mask(&rec.ldr, cfg.alpha).unwrap());
        }
    }
}

#[test]
fn training_is_deterministic_and_checkpoints_reproduce_outputs() {
    let images: Vec<_> = (0..6)
        .map(|i| hdrmask::trainer::corpus::texture_image(16, i))
        .collect();
    let cfg = TrainConfig {
        max_steps: 10,
        batch_size: 2,
        eval_every: 5,
        network: small_unet(),
        seed: 11,
        ..TrainConfig::default()
    };
    let run = || {
        let state = TrainerState::fresh(initialize_parameters(&cfg.network, 11), &cfg);
        train_inpainting(&images, &cfg, state).unwrap()
    };
    let (a, b) = (run(), run());
    let (la, lb) = (a.log.step_losses(), b.log.step_losses());
    assert_eq!(la.len(), 10);
    assert!(la.iter().zip(&lb).all(|(x, y)| x.to_bits() == y.to_bits()));
    let lrs = a.log.lr_history();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));

    let mut ck = CheckpointFile::new();
    ck.put_parameters(&a.state.params);
    let back = CheckpointFile::decode(&ck.encode())
        .unwrap()
        .parameters(&cfg.network)
        .unwrap();
    let probe = images[0].to_batch();
    let mask = Tensor::ones([1, 3, 16, 16]);
    let opts = ForwardOptions {
        mode: MaskingMode::FMask,
        keep_masks: false,
    };
    let (p, _) = predict(&probe, &mask, &a.state.params, &cfg.network, opts).unwrap();
    let (q, _) = predict(&probe, &mask, &back, &cfg.network, opts).unwrap();
    assert!(p
        .data()
        .iter()
        .zip(q.data())
        .all(|(x, y)| x.to_bits() == y.to_bits()));
}
