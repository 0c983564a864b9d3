use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use hdrmask::io::{write_dataset_shard, write_pgm};
use hdrmask::network::{export_mask_images, NamedMask};
use hdrmask::sampler::{generate_inpainting_mask, HoleMaskConfig, SamplerConfig};
use hdrmask::trainer::corpus::sample_corpus;

use crate::images::read_hdr;
use crate::manifest::{beside, create_dir, fresh_seed, inside, load_config, require, Run};
use crate::usage;

/// Files in `dir` with one of `exts`, sorted by name.
pub fn list_files(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let p = entry?.path();
        let ext = p
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if ext.is_some_and(|e| exts.contains(&e.as_str())) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Args)]
pub struct SampleArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of HDR images (.pfm or .hdr).
    #[arg(long)]
    in_dir: Option<PathBuf>,
    /// Shard output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Patch side length.
    #[arg(long)]
    patch: Option<usize>,
    /// Candidate patches drawn per image.
    #[arg(long)]
    per_image: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    sigma_s: Option<f64>,
    #[arg(long)]
    sigma_c: Option<f64>,
    /// Quantization bit depth of the simulated captures.
    #[arg(long)]
    bits: Option<u8>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    pub in_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub sampler: SamplerConfig,
}

pub fn sample(a: SampleArgs) -> Result<()> {
    let run = Run::start("sample-patches");
    let mut c: SampleConfig = load_config(a.config.as_deref(), "sample-patches")?;
    c.in_dir = a.in_dir.or(c.in_dir);
    c.out = a.out.or(c.out);
    c.seed = a.seed.or(c.seed);
    let s = &mut c.sampler;
    s.patch_size = a.patch.unwrap_or(s.patch_size);
    s.per_image = a.per_image.unwrap_or(s.per_image);
    s.threshold = a.threshold.unwrap_or(s.threshold);
    s.sigma_s = a.sigma_s.unwrap_or(s.sigma_s);
    s.sigma_c = a.sigma_c.unwrap_or(s.sigma_c);
    s.quantize_bits = a.bits.unwrap_or(s.quantize_bits);
    let in_dir = require(&c.in_dir, "--in-dir")?.clone();
    let out = require(&c.out, "--out")?.clone();
    let seed = *c.seed.get_or_insert_with(fresh_seed);
    if c.sampler.quantize_bits != 8 {
        return Err(usage("shards store 8-bit inputs; --bits must be 8"));
    }

    let files = list_files(&in_dir, &["pfm", "hdr", "pic"])?;
    if files.is_empty() {
        return Err(usage(format!(
            "no .pfm or .hdr files in {}",
            in_dir.display()
        )));
    }
    let mut images = Vec::with_capacity(files.len());
    for (i, f) in files.iter().enumerate() {
        images.push((i as u64, read_hdr(f)?));
    }
    let records = sample_corpus(&images, &c.sampler, seed)?;
    if records.is_empty() {
        anyhow::bail!(
            "no patch from {} images passed the texture threshold {}",
            files.len(),
            c.sampler.threshold
        );
    }
    write_dataset_shard(&out, &records)?;
    println!(
        "wrote {} patches from {} images to {}",
        records.len(),
        files.len(),
        out.display()
    );
    run.finish(&beside(&out), &c, Some(seed), files, vec![out.clone()])
}

#[derive(Args)]
pub struct HoleMaskArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    /// Mask side length.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    coverage_min: Option<f64>,
    #[arg(long)]
    coverage_max: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
pub struct HoleMaskCommandConfig {
    pub out_dir: Option<PathBuf>,
    pub count: usize,
    pub size: usize,
    pub seed: Option<u64>,
    pub holes: HoleMaskConfig,
}

impl Default for HoleMaskCommandConfig {
    fn default() -> Self {
        HoleMaskCommandConfig {
            out_dir: None,
            count: 16,
            size: 64,
            seed: None,
            holes: HoleMaskConfig::default(),
        }
    }
}

pub fn hole_masks(a: HoleMaskArgs) -> Result<()> {
    let run = Run::start("gen-inpaint-masks");
    let mut c: HoleMaskCommandConfig = load_config(a.config.as_deref(), "gen-inpaint-masks")?;
    c.out_dir = a.out_dir.or(c.out_dir);
    c.count = a.count.unwrap_or(c.count);
    c.size = a.size.unwrap_or(c.size);
    c.seed = a.seed.or(c.seed);
    c.holes.coverage.0 = a.coverage_min.unwrap_or(c.holes.coverage.0);
    c.holes.coverage.1 = a.coverage_max.unwrap_or(c.holes.coverage.1);
    let out_dir = require(&c.out_dir, "--out-dir")?.clone();
    let seed = *c.seed.get_or_insert_with(fresh_seed);
    create_dir(&out_dir)?;
    let mut outputs = Vec::with_capacity(c.count);
    for i in 0..c.count {
        let m = generate_inpainting_mask::<f32>(
            [1, c.size, c.size],
            seed.wrapping_add(i as u64),
            &c.holes,
        )?;
        let named = NamedMask {
            name: format!("mask_{i:04}"),
            mask: m.into_values(),
        };
        for (name, img) in export_mask_images(&[named], true)? {
            let p = out_dir.join(format!("{name}.pgm"));
            write_pgm(&p, &img)?;
            outputs.push(p);
        }
    }
    println!("wrote {} masks to {}", outputs.len(), out_dir.display());
    run.finish(&inside(&out_dir), &c, Some(seed), vec![], outputs)
}
