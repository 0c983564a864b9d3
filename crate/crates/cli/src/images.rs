use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use hdrmask::io::{
    decode_pfm_tensor, read_ldr, read_pfm, read_rgbe, write_ldr, write_pfm, write_pgm,
};
use hdrmask::network::{
    export_mask_images, exposure_mask, predict, ForwardOptions, MaskingMode, NamedMask, SoftMask,
    UNetConfig, DEFAULT_ALPHA,
};
use hdrmask::pipeline::{compose_hdr, simulate_ldr, CameraCurve, CurveKind, HdrImage};
use hdrmask::trainer::{initialize_parameters, load_model};

use crate::manifest::{beside, create_dir, fresh_seed, inside, load_config, require, Run};
use crate::usage;

pub fn read_hdr(path: &Path) -> Result<HdrImage<f32>> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    let img = match ext.as_deref() {
        Some("pfm") => read_pfm(path)?,
        Some("hdr") | Some("pic") => read_rgbe(path)?,
        _ => {
            return Err(usage(format!(
                "{} is not a .pfm or .hdr file",
                path.display()
            )))
        }
    };
    Ok(img)
}

/// Channel-mean gray image of a `[c, h, w]` mask.
pub fn write_mask_pgm(path: &Path, mask: &SoftMask<f32>) -> Result<()> {
    let named = NamedMask {
        name: "mask".into(),
        mask: mask.values().clone(),
    };
    let (_, gray) = export_mask_images(&[named], true)?
        .pop()
        .expect("one image per mask");
    write_pgm(path, &gray).with_context(|| format!("writing {}", path.display()))
}

fn with_suffix(path: &Path, suffix: &str, ext: &str) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    path.with_file_name(format!("{stem}{suffix}.{ext}"))
}

#[derive(Args)]
pub struct SimulateArgs {
    /// TOML config file or a manifest from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// HDR input (.pfm or .hdr).
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// LDR output (.ppm).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Mask image output (.pgm); defaults to `<out>_mask.pgm`.
    #[arg(long)]
    mask_out: Option<PathBuf>,
    /// Luminance percentile mapped to the clipping point.
    #[arg(long)]
    percentile: Option<f64>,
    /// Quantization bit depth; 0 disables quantization.
    #[arg(long)]
    bits: Option<u8>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Gamma of the camera curve.
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateConfig {
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub mask_out: Option<PathBuf>,
    pub percentile: f64,
    pub quantize_bits: u8,
    pub alpha: f64,
    pub curve: CameraCurve,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            input: None,
            out: None,
            mask_out: None,
            percentile: 90.0,
            quantize_bits: 8,
            alpha: DEFAULT_ALPHA,
            curve: CameraCurve::default(),
        }
    }
}

pub fn simulate(a: SimulateArgs) -> Result<()> {
    let run = Run::start("simulate-ldr");
    let mut c: SimulateConfig = load_config(a.config.as_deref(), "simulate-ldr")?;
    c.input = a.input.or(c.input);
    c.out = a.out.or(c.out);
    c.mask_out = a.mask_out.or(c.mask_out);
    c.percentile = a.percentile.unwrap_or(c.percentile);
    c.quantize_bits = a.bits.unwrap_or(c.quantize_bits);
    c.alpha = a.alpha.unwrap_or(c.alpha);
    if let Some(gamma) = a.gamma {
        c.curve.kind = CurveKind::Gamma { gamma };
    }
    let input = require(&c.input, "--in")?.clone();
    let out = require(&c.out, "--out")?.clone();
    let mask_out = c
        .mask_out
        .clone()
        .unwrap_or_else(|| with_suffix(&out, "_mask", "pgm"));
    c.mask_out = Some(mask_out.clone());

    let h = read_hdr(&input)?;
    let capture = simulate_ldr(&h, c.percentile, &c.curve, c.quantize_bits)?;
    let mask = exposure_mask(&capture.ldr, c.alpha)?;
    write_ldr(&out, &capture.ldr)?;
    write_mask_pgm(&mask_out, &mask)?;
    println!(
        "wrote {} and {} (radiance scale {:.6e})",
        out.display(),
        mask_out.display(),
        capture.scale
    );
    run.finish(
        &beside(&out),
        &c,
        None,
        vec![input],
        vec![out.clone(), mask_out],
    )
}

#[derive(Args)]
pub struct MaskArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// LDR input (.ppm).
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Model checkpoint; without one, freshly initialized weights are used.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    /// One image per channel instead of the channel mean.
    #[arg(long)]
    per_channel: bool,
    /// Seed for the initial weights when no model is given.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    pub input: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub alpha: f64,
    pub per_channel: bool,
    pub seed: Option<u64>,
    pub network: UNetConfig,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            input: None,
            model: None,
            out_dir: None,
            alpha: DEFAULT_ALPHA,
            per_channel: false,
            seed: None,
            network: UNetConfig::default(),
        }
    }
}

pub fn mask(a: MaskArgs) -> Result<()> {
    let run = Run::start("mask");
    let mut c: MaskConfig = load_config(a.config.as_deref(), "mask")?;
    c.input = a.input.or(c.input);
    c.model = a.model.or(c.model);
    c.out_dir = a.out_dir.or(c.out_dir);
    c.alpha = a.alpha.unwrap_or(c.alpha);
    c.per_channel |= a.per_channel;
    c.seed = a.seed.or(c.seed);
    let input = require(&c.input, "--in")?.clone();
    let out_dir = require(&c.out_dir, "--out-dir")?.clone();

    let ldr = read_ldr(&input)?;
    let beta = exposure_mask(&ldr, c.alpha)?;
    let (params, network) = match &c.model {
        Some(m) => {
            let (p, n, _) = load_model(m)?;
            (p, n)
        }
        None => {
            let seed = *c.seed.get_or_insert_with(fresh_seed);
            (initialize_parameters(&c.network, seed), c.network.clone())
        }
    };
    c.network = network.clone();
    create_dir(&out_dir)?;
    let beta_path = out_dir.join("beta.pgm");
    write_mask_pgm(&beta_path, &beta)?;
    let mut outputs = vec![beta_path];
    let (_, masks) = predict(
        &ldr.to_batch(),
        &beta.to_batch(),
        &params,
        &network,
        ForwardOptions {
            mode: MaskingMode::FMask,
            keep_masks: true,
        },
    )?;
    for (name, img) in export_mask_images(&masks, !c.per_channel)? {
        let p = out_dir.join(format!("{name}.pgm"));
        write_pgm(&p, &img)?;
        outputs.push(p);
    }
    println!(
        "wrote {} mask images to {}",
        outputs.len(),
        out_dir.display()
    );
    let mut inputs = vec![input];
    inputs.extend(c.model.clone());
    run.finish(&inside(&out_dir), &c, c.seed, inputs, outputs)
}

#[derive(Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// LDR input (.ppm).
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Log-domain prediction (.pfm) used instead of running a model.
    #[arg(long)]
    prediction: Option<PathBuf>,
    /// HDR output (.pfm).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    mask_out: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Exponent that linearizes the well-exposed pixels.
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
pub struct ReconstructConfig {
    pub input: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub prediction: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub mask_out: Option<PathBuf>,
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for ReconstructConfig {
    fn default() -> Self {
        ReconstructConfig {
            input: None,
            model: None,
            prediction: None,
            out: None,
            mask_out: None,
            alpha: DEFAULT_ALPHA,
            gamma: 2.0,
        }
    }
}

pub fn reconstruct(a: ReconstructArgs) -> Result<()> {
    let run = Run::start("reconstruct");
    let mut c: ReconstructConfig = load_config(a.config.as_deref(), "reconstruct")?;
    c.input = a.input.or(c.input);
    c.model = a.model.or(c.model);
    c.prediction = a.prediction.or(c.prediction);
    c.out = a.out.or(c.out);
    c.mask_out = a.mask_out.or(c.mask_out);
    c.alpha = a.alpha.unwrap_or(c.alpha);
    c.gamma = a.gamma.unwrap_or(c.gamma);
    let input = require(&c.input, "--in")?.clone();
    let out = require(&c.out, "--out")?.clone();

    let ldr = read_ldr(&input)?;
    let mask = exposure_mask(&ldr, c.alpha)?;
    let mut inputs = vec![input];
    let y_hat = match (&c.prediction, &c.model) {
        (Some(p), _) => {
            inputs.push(p.clone());
            decode_pfm_tensor(
                &std::fs::read(p).with_context(|| format!("reading {}", p.display()))?,
            )?
        }
        (None, Some(m)) => {
            inputs.push(m.clone());
            let (params, network, mode) = load_model(m)?;
            let (y, _) = predict(
                &ldr.to_batch(),
                &mask.to_batch(),
                &params,
                &network,
                ForwardOptions {
                    mode,
                    keep_masks: false,
                },
            )?;
            y
        }
        (None, None) => return Err(usage("reconstruct needs --model or --prediction")),
    };
    let hdr = compose_hdr(&ldr, &mask, &y_hat, c.gamma)?;
    write_pfm(&out, &hdr)?;
    let mut outputs = vec![out.clone()];
    if let Some(p) = &c.mask_out {
        write_mask_pgm(p, &mask)?;
        outputs.push(p.clone());
    }
    println!("wrote {}", out.display());
    run.finish(&beside(&out), &c, None, inputs, outputs)
}
