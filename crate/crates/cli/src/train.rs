use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use hdrmask::io::{read_dataset_shard, read_ldr, write_pfm, CheckpointFile};
use hdrmask::network::MaskingMode;
use hdrmask::pipeline::LdrImage;
use hdrmask::sampler::PatchRecord;
use hdrmask::trainer::corpus::texture_image;
use hdrmask::trainer::{
    evaluate, finetune_hdr, initialize_parameters, load_model, run_ablation, save_model,
    train_inpainting, AblationConfig, Corpora, CorpusConfig, EvalOptions, PretrainSource, Stage,
    TrainConfig, TrainOutcome, TrainerState,
};

use crate::data::list_files;
use crate::images::write_mask_pgm;
use crate::manifest::{create_dir, fresh_seed, inside, load_config, require, Run};
use crate::usage;

/// Training knobs shared by both stages.
#[derive(Args)]
pub struct TrainFlags {
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Masking mode: fmask, imask or sconv.
    #[arg(long)]
    mode: Option<String>,
    /// Steps between validation passes.
    #[arg(long)]
    eval_every: Option<u64>,
    /// Validation passes without improvement before the rate is halved.
    #[arg(long)]
    patience: Option<usize>,
    /// Encoder levels of the U-Net.
    #[arg(long)]
    levels: Option<usize>,
    /// Channels at the first level.
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_mode(s: &str) -> Result<MaskingMode> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase())).map_err(|_| {
        usage(format!(
            "unknown masking mode {s:?}; expected fmask, imask or sconv"
        ))
    })
}

impl TrainFlags {
    fn apply(self, t: &mut TrainConfig, seed: &mut Option<u64>) -> Result<()> {
        t.max_steps = self.steps.unwrap_or(t.max_steps);
        t.lr = self.lr.unwrap_or(t.lr);
        t.batch_size = self.batch.unwrap_or(t.batch_size);
        t.eval_every = self.eval_every.unwrap_or(t.eval_every);
        t.patience = self.patience.unwrap_or(t.patience);
        t.network.levels = self.levels.unwrap_or(t.network.levels);
        t.network.base_channels = self.channels.unwrap_or(t.network.base_channels);
        if let Some(m) = &self.mode {
            t.mode = parse_mode(m)?;
        }
        *seed = self.seed.or(*seed);
        t.seed = *seed.get_or_insert_with(fresh_seed);
        t.validate().map_err(|e| usage(e.to_string()))
    }
}

/// Writes the best weights, the resumable state and the log.
fn write_outcome(out_dir: &Path, out: &TrainOutcome, t: &TrainConfig) -> Result<Vec<PathBuf>> {
    let model = out_dir.join("model.mhdr");
    let state = out_dir.join("state.mhdr");
    let log = out_dir.join("log.jsonl");
    save_model(&model, &out.state.best_params, &t.network, t.mode)?;
    out.state.to_checkpoint(t).save(&state)?;
    out.log.write(&log)?;
    Ok(vec![model, state, log])
}

fn initial_state(
    t: &TrainConfig,
    init: Option<&Path>,
    resume: Option<&Path>,
) -> Result<TrainerState> {
    if let Some(r) = resume {
        let f = CheckpointFile::load(r).with_context(|| format!("loading {}", r.display()))?;
        return Ok(TrainerState::from_checkpoint(&f, t)?);
    }
    if let Some(i) = init {
        let f = CheckpointFile::load(i).with_context(|| format!("loading {}", i.display()))?;
        let params = f.parameters(&t.network)?;
        let adam = f.adam(&params)?;
        return Ok(TrainerState::from_pretrained(params, adam, t));
    }
    Ok(TrainerState::fresh(
        initialize_parameters(&t.network, t.seed),
        t,
    ))
}

fn summarize(out: &TrainOutcome) {
    let losses = out.log.step_losses();
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        println!(
            "{} steps, loss {first:.4} -> {last:.4}, best validation {}",
            out.state.step,
            out.state
                .best_validation
                .map_or_else(|| "n/a".to_string(), |v| format!("{v:.6}"))
        );
    }
}

/// Square tiles of `size` covering the image without overlap.
fn tiles(img: &LdrImage<f32>, size: usize) -> Result<Vec<LdrImage<f32>>> {
    let mut out = Vec::new();
    for y in (0..=img.height().saturating_sub(size)).step_by(size) {
        for x in (0..=img.width().saturating_sub(size)).step_by(size) {
            if y + size <= img.height() && x + size <= img.width() {
                out.push(img.crop(y, x, size, size)?);
            }
        }
    }
    Ok(out)
}

#[derive(Args)]
pub struct InpaintArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of LDR images (.ppm), cut into square tiles.
    #[arg(long)]
    in_dir: Option<PathBuf>,
    /// Use this many procedural textures instead of an image directory.
    #[arg(long)]
    procedural: Option<usize>,
    /// Tile side length.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Trainer state to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
pub struct InpaintConfig {
    pub in_dir: Option<PathBuf>,
    pub procedural: Option<usize>,
    pub size: usize,
    pub out_dir: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub seed: Option<u64>,
    pub train: TrainConfig,
}

impl Default for InpaintConfig {
    fn default() -> Self {
        InpaintConfig {
            in_dir: None,
            procedural: None,
            size: 64,
            out_dir: None,
            resume: None,
            seed: None,
            train: TrainConfig::default(),
        }
    }
}

pub fn inpaint(a: InpaintArgs) -> Result<()> {
    let run = Run::start("train-inpaint");
    let mut c: InpaintConfig = load_config(a.config.as_deref(), "train-inpaint")?;
    c.in_dir = a.in_dir.or(c.in_dir);
    c.procedural = a.procedural.or(c.procedural);
    c.size = a.size.unwrap_or(c.size);
    c.out_dir = a.out_dir.or(c.out_dir);
    c.resume = a.resume.or(c.resume);
    c.train.stage = Stage::Inpainting;
    a.train.apply(&mut c.train, &mut c.seed)?;
    let out_dir = require(&c.out_dir, "--out-dir")?.clone();

    let mut inputs = Vec::new();
    let images: Vec<LdrImage<f32>> = match (&c.in_dir, c.procedural) {
        (Some(dir), _) => {
            let files = list_files(dir, &["ppm"])?;
            let mut v = Vec::new();
            for f in &files {
                v.extend(tiles(&read_ldr(f)?, c.size)?);
            }
            inputs = files;
            v
        }
        (None, Some(n)) => (0..n as u64)
            .map(|i| texture_image(c.size, c.train.seed.wrapping_mul(1_000_003) + i))
            .collect(),
        (None, None) => return Err(usage("train-inpaint needs --in-dir or --procedural")),
    };
    if images.is_empty() {
        return Err(usage(format!(
            "no {0}x{0} tiles in the input images",
            c.size
        )));
    }
    inputs.extend(c.resume.clone());
    let state = initial_state(&c.train, None, c.resume.as_deref())?;
    let out = train_inpainting(&images, &c.train, state)?;
    create_dir(&out_dir)?;
    let outputs = write_outcome(&out_dir, &out, &c.train)?;
    summarize(&out);
    run.finish(&inside(&out_dir), &c, c.seed, inputs, outputs)
}

#[derive(Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Patch shard; repeat for several.
    #[arg(long = "shard")]
    shards: Vec<PathBuf>,
    /// Pre-trained checkpoint to start from.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Weight of the perceptual terms; 0 leaves the reconstruction term only.
    #[arg(long)]
    lambda2: Option<f64>,
    /// Keep optimizer moments from the initial checkpoint.
    #[arg(long)]
    carry_optimizer: bool,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub shards: Vec<PathBuf>,
    pub init: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub train: TrainConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            shards: Vec::new(),
            init: None,
            resume: None,
            out_dir: None,
            seed: None,
            train: TrainConfig {
                stage: Stage::HdrFinetune,
                ..TrainConfig::default()
            },
        }
    }
}

fn read_shards(paths: &[PathBuf]) -> Result<Vec<PatchRecord<f32>>> {
    let mut out = Vec::new();
    for p in paths {
        out.extend(
            read_dataset_shard(p).with_context(|| format!("reading shard {}", p.display()))?,
        );
    }
    Ok(out)
}

pub fn finetune(a: FinetuneArgs) -> Result<()> {
    let run = Run::start("finetune-hdr");
    let mut c: FinetuneConfig = load_config(a.config.as_deref(), "finetune-hdr")?;
    if !a.shards.is_empty() {
        c.shards = a.shards;
    }
    c.init = a.init.or(c.init);
    c.resume = a.resume.or(c.resume);
    c.out_dir = a.out_dir.or(c.out_dir);
    c.train.loss.lambda2 = a.lambda2.unwrap_or(c.train.loss.lambda2);
    c.train.carry_optimizer |= a.carry_optimizer;
    c.train.stage = Stage::HdrFinetune;
    if c.init.is_none() && c.resume.is_none() {
        c.train.pretrain = PretrainSource::None;
    }
    a.train.apply(&mut c.train, &mut c.seed)?;
    let out_dir = require(&c.out_dir, "--out-dir")?.clone();
    if c.shards.is_empty() {
        return Err(usage("finetune-hdr needs at least one --shard"));
    }

    let records = read_shards(&c.shards)?;
    let state = initial_state(&c.train, c.init.as_deref(), c.resume.as_deref())?;
    let out = finetune_hdr(&records, &c.train, state)?;
    create_dir(&out_dir)?;
    let outputs = write_outcome(&out_dir, &out, &c.train)?;
    summarize(&out);
    let mut inputs = c.shards.clone();
    inputs.extend(c.init.clone());
    inputs.extend(c.resume.clone());
    run.finish(&inside(&out_dir), &c, c.seed, inputs, outputs)
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "shard")]
    shards: Vec<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Also write every reconstruction (.pfm) and its mask (.pgm).
    #[arg(long)]
    emit_images: bool,
}

#[derive(Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub shards: Vec<PathBuf>,
    pub model: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub emit_images: bool,
    pub options: EvalOptions,
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let run = Run::start("eval");
    let mut c: EvalConfig = load_config(a.config.as_deref(), "eval")?;
    if !a.shards.is_empty() {
        c.shards = a.shards;
    }
    c.model = a.model.or(c.model);
    c.out_dir = a.out_dir.or(c.out_dir);
    c.emit_images |= a.emit_images;
    c.options.keep_outputs = c.emit_images;
    let model = require(&c.model, "--model")?.clone();
    let out_dir = require(&c.out_dir, "--out-dir")?.clone();
    if c.shards.is_empty() {
        return Err(usage("eval needs at least one --shard"));
    }

    let records = read_shards(&c.shards)?;
    let (params, network, mode) = load_model(&model)?;
    let report = evaluate(&records, &params, &network, mode, &c.options)?;
    create_dir(&out_dir)?;
    let metrics = out_dir.join("metrics.tsv");
    std::fs::write(&metrics, report.to_tsv())?;
    let per_image = out_dir.join("per_image.tsv");
    let mut rows = String::from(
        "index\tsource_id\trow\tcolumn\tsaturation_pct\tmse_gamma\tmasked_mse_gamma\n",
    );
    for r in &report.images {
        rows.push_str(&format!(
            "{}\t{}\t{}\t{}\t{:.3}\t{:.6e}\t{:.6e}\n",
            r.index, r.source_id, r.offset.0, r.offset.1, r.saturation, r.mse_gamma, r.masked_mse
        ));
    }
    std::fs::write(&per_image, rows)?;
    let mut outputs = vec![metrics, per_image];
    if c.emit_images {
        let dir = out_dir.join("images");
        create_dir(&dir)?;
        for (r, rec) in report.images.iter().zip(&records) {
            if let Some(h) = &r.reconstruction {
                let p = dir.join(format!("recon_{:04}.pfm", r.index));
                write_pfm(&p, h)?;
                let q = dir.join(format!("mask_{:04}.pgm", r.index));
                write_mask_pgm(&q, &rec.mask)?;
                outputs.extend([p, q]);
            }
        }
    }
    print!("{}", report.to_tsv());
    let mut inputs = c.shards.clone();
    inputs.push(model);
    run.finish(&inside(&out_dir), &c, None, inputs, outputs)
}

#[derive(Args)]
pub struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    pretrain_steps: Option<u64>,
    #[arg(long)]
    finetune_steps: Option<u64>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    textures: Option<usize>,
    #[arg(long)]
    train_scenes: Option<usize>,
    #[arg(long)]
    test_scenes: Option<usize>,
    /// Seed of the procedural corpora.
    #[arg(long)]
    corpus_seed: Option<u64>,
}

#[derive(Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AblateConfig {
    pub out_dir: Option<PathBuf>,
    pub corpus_seed: Option<u64>,
    pub corpus: CorpusConfig,
    pub ablation: AblationConfig,
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    let run = Run::start("ablate");
    let mut c: AblateConfig = load_config(a.config.as_deref(), "ablate")?;
    c.out_dir = a.out_dir.or(c.out_dir);
    if !a.seeds.is_empty() {
        c.ablation.seeds = a.seeds;
    }
    c.ablation.pretrain_steps = a.pretrain_steps.unwrap_or(c.ablation.pretrain_steps);
    c.ablation.finetune_steps = a.finetune_steps.unwrap_or(c.ablation.finetune_steps);
    c.ablation.base.eval_every = a.eval_every.unwrap_or(c.ablation.base.eval_every);
    c.corpus.textures = a.textures.unwrap_or(c.corpus.textures);
    c.corpus.train_scenes = a.train_scenes.unwrap_or(c.corpus.train_scenes);
    c.corpus.test_scenes = a.test_scenes.unwrap_or(c.corpus.test_scenes);
    c.corpus_seed = a.corpus_seed.or(c.corpus_seed);
    let corpus_seed = *c.corpus_seed.get_or_insert_with(fresh_seed);
    let out_dir = require(&c.out_dir, "--out-dir")?.clone();
    c.ablation
        .base
        .validate()
        .map_err(|e| usage(e.to_string()))?;

    let corpora = Corpora::procedural(&c.corpus, corpus_seed)?;
    eprintln!(
        "corpora: {} textures, {} synthetic HDR, {} train and {} test patches",
        corpora.textures.len(),
        corpora.pseudo_hdr.len(),
        corpora.train.len(),
        corpora.test.len()
    );
    let report = run_ablation(&corpora, &c.ablation, |r| {
        eprintln!(
            "{} seed {}: median masked mse_gamma {:.6e} ({:.0}s)",
            r.arm.label(),
            r.seed,
            r.median_masked_mse,
            r.seconds
        )
    })?;
    create_dir(&out_dir)?;
    let tsv = out_dir.join("ablation.tsv");
    std::fs::write(&tsv, report.to_tsv())?;
    let json = out_dir.join("ablation.json");
    std::fs::write(&json, serde_json::to_string_pretty(&report)?)?;
    print!("{}", report.to_tsv());
    run.finish(
        &inside(&out_dir),
        &c,
        Some(corpus_seed),
        vec![],
        vec![tsv, json],
    )
}
