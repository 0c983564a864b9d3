//! Built-in numerical and format self-tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::io::{
    decode_pfm, decode_ppm, decode_rgbe, decode_shard, encode_pfm, encode_ppm, encode_shard,
    CheckpointFile,
};
use crate::losses::{
    blend_term, inpainting_loss, perceptual_terms, reconstruction_term, total_loss, BlendDomain,
    FeatureExtractor, InpaintingWeights, LossWeights,
};
use crate::network::{
    exposure_mask, unet_forward_fixed_masks, ForwardOptions, MaskingMode, UNetConfig,
};
use crate::pipeline::{HdrImage, LdrImage};
use crate::sampler::PatchRecord;
use crate::tensor::{check_gradients, GradCheckOptions, Graph, Tensor, Var};

/// Largest relative finite-difference error of one differentiable objective.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientCase {
    pub name: String,
    pub max_rel_error: f64,
}

fn uniform(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn soft_mask(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| match rng.gen_range(0..3) {
        0 => 1.0,
        1 => 0.0,
        _ => rng.gen_range(0.05..0.95),
    })
}

fn binary_mask(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| if rng.gen_bool(0.3) { 0.0 } else { 1.0 })
}

fn sum_weighted(g: &mut Graph<f64>, x: Var, w: &Tensor<f64>) -> Result<Var> {
    let y = g.mul_const(x, w)?;
    g.sum(y)
}

/// Finite-difference checks at 64-bit of every loss term and of a 2-level
/// feature-masked U-Net (input and all parameters). Masks are not
/// differentiated, so the U-Net check holds the mask pathway fixed.
///
/// Ground-truth radiance is drawn above every blended value so that the
/// detached perceptual normalizer is locally constant. Gradients that cancel
/// exactly leave only rounding noise in the finite difference, so errors are
/// measured against a floor of `1e-6`.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradientCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [1, 3, 8, 8];
    let opts = GradCheckOptions {
        epsilon: 1e-6,
        coords_per_input: Some(32),
        seed,
        abs_floor: 1e-6,
    };
    let extractor = FeatureExtractor::<f64>::random(3, &[4, 6], 3, seed ^ 0xfea7);
    let y_hat = uniform(&mut rng, shape, 0.1, 1.5);
    let m = soft_mask(&mut rng, shape);
    let h = uniform(&mut rng, shape, 0.0, 2.0).map(|v| v + 4.0);
    let mut out = Vec::new();
    let mut case = |name: &str, err: f64| {
        out.push(GradientCase {
            name: name.into(),
            max_rel_error: err,
        })
    };

    case(
        "reconstruction",
        check_gradients(
            |g, v| reconstruction_term(g, v[0], &h, &m),
            std::slice::from_ref(&y_hat),
            &opts,
        )?,
    );
    let w = uniform(&mut rng, shape, -1.0, 1.0);
    case(
        "blend",
        check_gradients(
            |g, v| {
                let b = blend_term(g, v[0], &h, &m, BlendDomain::Linear)?;
                sum_weighted(g, b, &w)
            },
            std::slice::from_ref(&y_hat),
            &opts,
        )?,
    );
    let h_tilde = uniform(&mut rng, shape, 0.0, 3.0);
    case(
        "perceptual",
        check_gradients(
            |g, v| Ok(perceptual_terms(g, v[0], &h, &extractor, 500.0)?.0),
            std::slice::from_ref(&h_tilde),
            &opts,
        )?,
    );
    case(
        "style",
        check_gradients(
            |g, v| Ok(perceptual_terms(g, v[0], &h, &extractor, 500.0)?.1),
            &[h_tilde],
            &opts,
        )?,
    );
    let weights = LossWeights::default();
    case(
        "total",
        check_gradients(
            |g, v| Ok(total_loss(g, v[0], &h, &m, &extractor, &weights)?.0),
            std::slice::from_ref(&y_hat),
            &opts,
        )?,
    );

    let truth = uniform(&mut rng, shape, 0.0, 1.0);
    let pred = uniform(&mut rng, shape, 0.0, 1.0);
    let holes = binary_mask(&mut rng, shape);
    let only = |name: &str| {
        let mut w = InpaintingWeights {
            valid: 0.0,
            hole: 0.0,
            perceptual: 0.0,
            style: 0.0,
            tv: 0.0,
        };
        match name {
            "valid" => w.valid = 1.0,
            "hole" => w.hole = 1.0,
            "perceptual" => w.perceptual = 1.0,
            "style" => w.style = 1.0,
            _ => w.tv = 1.0,
        }
        w
    };
    for term in ["valid", "hole", "perceptual", "style", "tv"] {
        let w = only(term);
        case(
            &format!("inpainting_{term}"),
            check_gradients(
                |g, v| Ok(inpainting_loss(g, v[0], &truth, &holes, &extractor, &w)?.0),
                std::slice::from_ref(&pred),
                &opts,
            )?,
        );
    }

    let config = UNetConfig {
        levels: 2,
        base_channels: 4,
        ..UNetConfig::default()
    };
    let params = crate::trainer::initialize_parameters(&config, seed).cast::<f64>();
    let x = uniform(&mut rng, shape, 0.0, 1.0);
    let input_mask = soft_mask(&mut rng, shape);
    let probe = uniform(&mut rng, shape, -1.0, 1.0);
    let mut inputs = vec![x];
    inputs.extend(params.tensors());
    case(
        "unet_fmask",
        check_gradients(
            |g, v| {
                let pairs: Vec<(Var, Var)> = v[1..].chunks(2).map(|p| (p[0], p[1])).collect();
                let o = unet_forward_fixed_masks(
                    g,
                    v[0],
                    &input_mask,
                    &pairs,
                    &params,
                    &config,
                    ForwardOptions {
                        mode: MaskingMode::FMask,
                        keep_masks: false,
                    },
                )?;
                sum_weighted(g, o.output, &probe)
            },
            &inputs,
            &opts,
        )?,
    );
    Ok(out)
}

/// Encodes and decodes one of each file format and reports whether the
/// result is bit-identical.
pub fn format_selftest(seed: u64) -> Result<Vec<(String, bool)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hdr = HdrImage::new(Tensor::from_fn([3, 8, 8], |_| rng.gen_range(0.0f32..50.0)))?;
    let ldr = LdrImage::new(Tensor::from_fn([3, 8, 8], |_| {
        rng.gen_range(0u8..=255) as f32 / 255.0
    }))?;
    let mut out = Vec::new();

    let pfm_ok = decode_pfm(&encode_pfm(&hdr)?)?
        .pixels()
        .data()
        .iter()
        .zip(hdr.pixels().data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    out.push(("pfm".to_string(), pfm_ok));
    out.push(("ppm".to_string(), decode_ppm(&encode_ppm(&ldr)?)? == ldr));

    let config = UNetConfig {
        levels: 2,
        base_channels: 4,
        ..UNetConfig::default()
    };
    let params = crate::trainer::initialize_parameters(&config, seed);
    let mut ck = CheckpointFile::new();
    ck.put_parameters(&params);
    let bytes = ck.encode();
    let back = CheckpointFile::decode(&bytes)?;
    out.push((
        "checkpoint".to_string(),
        back.parameters(&config)? == params && back.encode() == bytes,
    ));

    let record = PatchRecord {
        mask: exposure_mask(&ldr, 0.96)?,
        hdr,
        ldr,
        score: 1.5,
        source_id: seed,
        offset: (3, 4),
    };
    let bytes = encode_shard(std::slice::from_ref(&record))?;
    let back = decode_shard(&bytes)?;
    out.push((
        "shard".to_string(),
        back == [record] && encode_shard(&back)? == bytes,
    ));
    Ok(out)
}

/// Outcome counts of feeding corrupted inputs to one reader.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FuzzSummary {
    pub format: String,
    pub cases: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub panics: usize,
}

fn mutate(rng: &mut ChaCha8Rng, valid: &[u8]) -> Vec<u8> {
    let mut b = valid.to_vec();
    match rng.gen_range(0..5) {
        0 => {
            for _ in 0..rng.gen_range(1..=8) {
                let i = rng.gen_range(0..b.len());
                b[i] = rng.gen();
            }
        }
        1 => b.truncate(rng.gen_range(0..b.len())),
        2 => {
            let at = rng.gen_range(0..=b.len());
            let extra: Vec<u8> = (0..rng.gen_range(1..16)).map(|_| rng.gen()).collect();
            b.splice(at..at, extra);
        }
        3 => {
            // Overwrite an aligned 4- or 8-byte field, as length and count
            // fields are the usual culprits.
            let width = if rng.gen_bool(0.5) { 4 } else { 8 };
            if b.len() >= width {
                let i = rng.gen_range(0..=b.len() - width) / width * width;
                for x in &mut b[i..i + width] {
                    *x = if rng.gen_bool(0.5) { 0xff } else { rng.gen() };
                }
            }
        }
        _ => b = (0..rng.gen_range(0..64)).map(|_| rng.gen()).collect(),
    }
    b
}

fn fuzz_one<T>(
    format: &str,
    valid: &[u8],
    cases: usize,
    rng: &mut ChaCha8Rng,
    decode: impl Fn(&[u8]) -> Result<T>,
) -> FuzzSummary {
    let mut s = FuzzSummary {
        format: format.into(),
        cases,
        accepted: 0,
        rejected: 0,
        panics: 0,
    };
    for _ in 0..cases {
        let bytes = mutate(rng, valid);
        match std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| decode(&bytes).is_ok())) {
            Ok(true) => s.accepted += 1,
            Ok(false) => s.rejected += 1,
            Err(_) => s.panics += 1,
        }
    }
    s
}

/// Feeds `cases` corrupted variants of a valid file to every reader.
/// Readers must return `Ok` or a structured error; panics are counted.
pub fn fuzz_readers(seed: u64, cases: usize) -> Result<Vec<FuzzSummary>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hdr = HdrImage::new(Tensor::from_fn([3, 6, 5], |i| (i % 11) as f32 * 0.75))?;
    let ldr = LdrImage::new(Tensor::from_fn([3, 6, 5], |i| (i * 7 % 256) as f32 / 255.0))?;
    let config = UNetConfig {
        levels: 2,
        base_channels: 2,
        ..UNetConfig::default()
    };
    let mut ck = CheckpointFile::new();
    ck.put_parameters(&crate::trainer::initialize_parameters(&config, seed));
    ck.put_f64("meta/value", 0.5);
    let record = PatchRecord {
        mask: exposure_mask(&ldr, 0.96)?,
        hdr: hdr.clone(),
        ldr: ldr.clone(),
        score: 2.0,
        source_id: 1,
        offset: (0, 0),
    };
    let mut rgbe = b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y 2 +X 8\n".to_vec();
    for _ in 0..2 {
        rgbe.extend_from_slice(&[2, 2, 0, 8]);
        for v in [100u8, 50, 25, 130] {
            rgbe.extend_from_slice(&[128 + 8, v]);
        }
    }
    let pfm = encode_pfm(&hdr)?;
    let ppm = encode_ppm(&ldr)?;
    let ckb = ck.encode();
    let shard = encode_shard(&[record.clone(), record])?;
    Ok(vec![
        fuzz_one("pfm", &pfm, cases, &mut rng, decode_pfm),
        fuzz_one("ppm", &ppm, cases, &mut rng, decode_ppm),
        fuzz_one("rgbe", &rgbe, cases, &mut rng, decode_rgbe),
        fuzz_one("checkpoint", &ckb, cases, &mut rng, CheckpointFile::decode),
        fuzz_one("shard", &shard, cases, &mut rng, decode_shard),
    ])
}
