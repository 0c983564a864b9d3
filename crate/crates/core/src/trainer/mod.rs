//! Two-stage optimization: inpainting pre-training and HDR fine-tuning,
//! with plateau learning-rate decay, resumable state and evaluation.

mod ablation;
pub mod corpus;
mod eval;

pub use ablation::{
    run_ablation, run_arm, AblationArm, AblationConfig, AblationReport, AblationRun, Corpora,
    CorpusConfig,
};
pub use eval::{evaluate, evaluate_predictions, EvalOptions, EvalReport, EvalRow, ImageResult};

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::CheckpointFile;
use crate::losses::{
    inpainting_loss, total_loss, FeatureExtractor, InpaintingWeights, LossTerm, LossWeights,
};
use crate::network::{
    unet_forward, ConvLayer, ForwardOptions, MaskingMode, UNetConfig, UNetParameters,
};
use crate::pipeline::LdrImage;
use crate::sampler::{generate_inpainting_mask, HoleMaskConfig, PatchRecord};
use crate::tensor::{Adam, AdamState, Graph, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    #[default]
    Inpainting,
    HdrFinetune,
}

/// What initialized the network before HDR fine-tuning.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainSource {
    #[default]
    Inpainting,
    Hdr,
    None,
}

impl PretrainSource {
    pub fn name(self) -> &'static str {
        match self {
            PretrainSource::Inpainting => "inpainting",
            PretrainSource::Hdr => "hdr",
            PretrainSource::None => "none",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr: f64,
    pub batch_size: usize,
    /// Evaluations without a 1% relative improvement before decaying.
    pub patience: usize,
    pub factor: f64,
    pub lr_floor: f64,
    pub plateau_threshold: f64,
    pub max_steps: u64,
    /// Steps between validation passes; one pass closes an epoch.
    pub eval_every: u64,
    /// Upper bound on validation items, taken in order.
    pub max_validation: usize,
    pub validation_fraction: f64,
    pub seed: u64,
    pub mode: MaskingMode,
    pub pretrain: PretrainSource,
    /// Keep Adam moments from the initializing checkpoint.
    pub carry_optimizer: bool,
    pub network: UNetConfig,
    pub loss: LossWeights,
    pub inpainting: InpaintingWeights,
    pub hole_masks: HoleMaskConfig,
    pub extractor_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Inpainting,
            lr: 2e-4,
            batch_size: 4,
            patience: 5,
            factor: 2.0,
            lr_floor: 1e-6,
            plateau_threshold: 0.01,
            max_steps: 2000,
            eval_every: 100,
            max_validation: 32,
            validation_fraction: 0.1,
            seed: 0,
            mode: MaskingMode::FMask,
            pretrain: PretrainSource::Inpainting,
            carry_optimizer: false,
            network: UNetConfig::default(),
            loss: LossWeights::default(),
            inpainting: InpaintingWeights::default(),
            hole_masks: HoleMaskConfig::default(),
            extractor_seed: crate::losses::DEFAULT_EXTRACTOR_SEED,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Contract(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Contract("batch size must be at least 1".into()));
        }
        if !(self.factor > 1.0) {
            return Err(Error::Contract(format!(
                "plateau factor {} must exceed 1",
                self.factor
            )));
        }
        if self.patience == 0 {
            return Err(Error::Contract(
                "plateau patience must be at least 1".into(),
            ));
        }
        if self.eval_every == 0 {
            return Err(Error::Contract("eval_every must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Contract(
                "validation fraction must lie in [0, 1)".into(),
            ));
        }
        self.network.validate()?;
        self.loss.validate()
    }
}

/// Xavier-uniform weights, zero biases.
pub fn initialize_parameters(config: &UNetConfig, seed: u64) -> UNetParameters<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = config.kernel_size;
    let layers = config
        .layers()
        .into_iter()
        .map(|spec| {
            let fan_in = (spec.in_channels * k * k) as f64;
            let fan_out = (spec.out_channels * k * k) as f64;
            let a = (6.0 / (fan_in + fan_out)).sqrt();
            let weight = Tensor::from_fn(spec.weight_shape(k), |_| rng.gen_range(-a..a) as f32);
            ConvLayer {
                name: spec.name.clone(),
                weight,
                bias: Tensor::zeros([spec.out_channels]),
            }
        })
        .collect();
    UNetParameters { layers }
}

/// Learning-rate decay on validation plateaus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub patience: usize,
    pub factor: f64,
    pub floor: f64,
    pub threshold: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, patience: usize, factor: f64) -> Self {
        PlateauScheduler {
            lr,
            patience: patience.max(1),
            factor,
            floor: 1e-6,
            threshold: 0.01,
            best: None,
            bad_epochs: 0,
        }
    }

    /// Records one validation value and returns the learning rate to use next.
    ///
    /// A value improves when it is below `best * (1 - threshold)`. After
    /// `patience` consecutive non-improving values the rate is divided by
    /// `factor` (not below `floor`) and the count restarts.
    pub fn observe(&mut self, value: f64) -> f64 {
        match self.best {
            Some(b) if !(value < b * (1.0 - self.threshold)) => {
                self.bad_epochs += 1;
                if self.bad_epochs >= self.patience {
                    self.lr = (self.lr / self.factor).max(self.floor);
                    self.bad_epochs = 0;
                }
            }
            _ => {
                self.best = Some(value);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

/// Learning rate after replaying `history` from `lr`.
pub fn plateau_scheduler(history: &[f64], lr: f64, patience: usize, factor: f64) -> f64 {
    let mut s = PlateauScheduler::new(lr, patience, factor);
    for &v in history {
        s.observe(v);
    }
    s.lr
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        step: u64,
        stage: Stage,
        loss: f64,
        terms: Vec<LossTerm>,
        lr: f64,
    },
    Epoch {
        epoch: u64,
        step: u64,
        stage: Stage,
        validation: f64,
        lr: f64,
    },
    Summary {
        stage: Stage,
        steps: u64,
        wall_clock_seconds: f64,
        /// Mean loss on a fixed subset of the training items before and
        /// after the run.
        #[serde(default)]
        probe_loss: Option<(f64, f64)>,
    },
}

/// Line-delimited JSON training log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
}

impl RunLog {
    pub fn step_losses(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Step { loss, .. } => Some(*loss),
                _ => None,
            })
            .collect()
    }

    pub fn validation_history(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Epoch { validation, .. } => Some(*validation),
                _ => None,
            })
            .collect()
    }

    /// Learning rate at every logged step.
    pub fn lr_history(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Step { lr, .. } => Some(*lr),
                _ => None,
            })
            .collect()
    }

    /// `1 - mean(last window) / mean(first window)` of the step losses.
    pub fn loss_drop(&self, window: usize) -> Option<f64> {
        let l = self.step_losses();
        let w = window.min(l.len() / 2);
        if w == 0 {
            return None;
        }
        let first: f64 = l[..w].iter().sum::<f64>() / w as f64;
        let last: f64 = l[l.len() - w..].iter().sum::<f64>() / w as f64;
        Some(1.0 - last / first)
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("log records serialize"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let t = line.trim();
            if !t.is_empty() {
                records.push(
                    serde_json::from_str(t)
                        .map_err(|e| Error::parse(offset, format!("log record: {e}")))?,
                );
            }
            offset += line.len();
        }
        Ok(RunLog { records })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }
}

/// Everything needed to continue a run bit-identically.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerState {
    pub params: UNetParameters<f32>,
    pub adam: AdamState<f32>,
    pub step: u64,
    pub scheduler: PlateauScheduler,
    pub best_validation: Option<f64>,
    pub best_params: UNetParameters<f32>,
}

impl TrainerState {
    pub fn fresh(params: UNetParameters<f32>, config: &TrainConfig) -> Self {
        let mut scheduler = PlateauScheduler::new(config.lr, config.patience, config.factor);
        scheduler.floor = config.lr_floor;
        scheduler.threshold = config.plateau_threshold;
        TrainerState {
            adam: AdamState::new(&params.tensors()),
            best_params: params.clone(),
            params,
            step: 0,
            scheduler,
            best_validation: None,
        }
    }

    /// Starts a new stage from pretrained weights, optionally keeping the
    /// optimizer moments.
    pub fn from_pretrained(
        params: UNetParameters<f32>,
        adam: Option<AdamState<f32>>,
        config: &TrainConfig,
    ) -> Self {
        let mut s = Self::fresh(params, config);
        if config.carry_optimizer {
            if let Some(a) = adam {
                s.adam = a;
            }
        }
        s
    }

    pub fn to_checkpoint(&self, config: &TrainConfig) -> CheckpointFile {
        let mut f = CheckpointFile::new();
        f.put_parameters(&self.params);
        f.put_adam(&self.adam);
        f.put_u64("trainer/step", self.step);
        f.put_f64("scheduler/lr", self.scheduler.lr);
        f.put_u64("scheduler/bad_epochs", self.scheduler.bad_epochs as u64);
        if let Some(b) = self.scheduler.best {
            f.put_f64("scheduler/best", b);
        }
        if let Some(b) = self.best_validation {
            f.put_f64("trainer/best_validation", b);
        }
        for l in &self.best_params.layers {
            f.put(format!("best/{}/weight", l.name), l.weight.clone());
            f.put(format!("best/{}/bias", l.name), l.bias.clone());
        }
        let cfg = serde_json::to_vec(config).expect("config serializes");
        f.put_bytes("trainer/config", &cfg);
        f
    }

    pub fn from_checkpoint(f: &CheckpointFile, config: &TrainConfig) -> Result<Self> {
        let params = f.parameters(&config.network)?;
        let adam = f
            .adam(&params)?
            .ok_or_else(|| Error::Contract("checkpoint has no optimizer state".into()))?;
        let mut scheduler = PlateauScheduler::new(config.lr, config.patience, config.factor);
        scheduler.floor = config.lr_floor;
        scheduler.threshold = config.plateau_threshold;
        scheduler.lr = f.get_f64("scheduler/lr")?;
        scheduler.bad_epochs = f.get_u64("scheduler/bad_epochs")? as usize;
        scheduler.best = f
            .get("scheduler/best")
            .map(|_| f.get_f64("scheduler/best"))
            .transpose()?;
        let best_validation = f
            .get("trainer/best_validation")
            .map(|_| f.get_f64("trainer/best_validation"))
            .transpose()?;
        let mut best = params.clone();
        for l in &mut best.layers {
            if let (Some(w), Some(b)) = (
                f.get(&format!("best/{}/weight", l.name)),
                f.get(&format!("best/{}/bias", l.name)),
            ) {
                l.weight = w.clone();
                l.bias = b.clone();
            }
        }
        best.validate(&config.network)?;
        Ok(TrainerState {
            params,
            adam,
            step: f.get_u64("trainer/step")?,
            scheduler,
            best_validation,
            best_params: best,
        })
    }
}

/// Stores network weights with their layout and masking mode.
pub fn save_model(
    path: impl AsRef<Path>,
    params: &UNetParameters<f32>,
    network: &UNetConfig,
    mode: MaskingMode,
) -> Result<()> {
    let mut f = CheckpointFile::new();
    f.put_parameters(params);
    f.put_bytes(
        "meta/network",
        &serde_json::to_vec(network).expect("config serializes"),
    );
    f.put_bytes("meta/mode", mode.name().as_bytes());
    f.save(path)
}

/// Weights, layout and masking mode from a checkpoint. Files without layout
/// metadata are read with the default layout; a trainer state also records
/// its configuration.
pub fn load_model(
    path: impl AsRef<Path>,
) -> Result<(UNetParameters<f32>, UNetConfig, MaskingMode)> {
    let f = CheckpointFile::load(path)?;
    let (network, mode) = if f.get("meta/network").is_some() {
        let network = serde_json::from_slice(&f.get_bytes("meta/network")?)
            .map_err(|e| Error::Contract(format!("stored network layout: {e}")))?;
        let name = String::from_utf8(f.get_bytes("meta/mode")?)
            .map_err(|_| Error::Contract("stored masking mode is not UTF-8".into()))?;
        let mode = serde_json::from_value(serde_json::Value::String(name.clone()))
            .map_err(|_| Error::Contract(format!("unknown masking mode {name:?}")))?;
        (network, mode)
    } else if f.get("trainer/config").is_some() {
        let cfg: TrainConfig = serde_json::from_slice(&f.get_bytes("trainer/config")?)
            .map_err(|e| Error::Contract(format!("stored trainer config: {e}")))?;
        (cfg.network, cfg.mode)
    } else {
        (UNetConfig::default(), MaskingMode::FMask)
    };
    let params = f.parameters(&network)?;
    Ok((params, network, mode))
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainerState,
    pub log: RunLog,
    /// Mean loss on a fixed subset of the training items before and after
    /// training, with fixed hole masks for inpainting.
    pub probe_loss: (f64, f64),
}

impl TrainOutcome {
    /// `1 - after / before` of [`TrainOutcome::probe_loss`].
    pub fn probe_loss_drop(&self) -> f64 {
        1.0 - self.probe_loss.1 / self.probe_loss.0
    }
}

/// Splits item indices by source id; the validation part holds
/// `ceil(fraction * sources)` sources (at least one when there are two or
/// more sources and the fraction is positive).
pub fn split_by_source(source_ids: &[u64], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let ids: BTreeSet<u64> = source_ids.iter().copied().collect();
    let mut ids: Vec<u64> = ids.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5711_7000);
    ids.shuffle(&mut rng);
    let n_val = if fraction > 0.0 && ids.len() >= 2 {
        ((fraction * ids.len() as f64).ceil() as usize).clamp(1, ids.len() - 1)
    } else {
        0
    };
    let val: BTreeSet<u64> = ids[..n_val].iter().copied().collect();
    let (mut train, mut valid) = (Vec::new(), Vec::new());
    for (i, id) in source_ids.iter().enumerate() {
        if val.contains(id) {
            valid.push(i);
        } else {
            train.push(i);
        }
    }
    (train, valid)
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

fn stack(items: Vec<Tensor<f32>>) -> Result<Tensor<f32>> {
    Tensor::stack(&items)
}

fn forward_opts(mode: MaskingMode) -> ForwardOptions {
    ForwardOptions {
        mode,
        keep_masks: false,
    }
}

/// Inputs for one inpainting batch: masked images, hole masks, truths.
fn inpainting_batch(
    images: &[&LdrImage<f32>],
    mask_seeds: &[u64],
    holes: &HoleMaskConfig,
) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    let mut xs = Vec::new();
    let mut ms = Vec::new();
    let mut ts = Vec::new();
    for (img, &s) in images.iter().zip(mask_seeds) {
        let shape = [img.channels(), img.height(), img.width()];
        let m = generate_inpainting_mask::<f32>(shape, s, holes)?.into_values();
        xs.push(img.pixels().zip_map(&m, |a, b| a * b)?);
        ms.push(m);
        ts.push(img.pixels().clone());
    }
    Ok((stack(xs)?, stack(ms)?, stack(ts)?))
}

fn hdr_batch(records: &[&PatchRecord<f32>]) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    let xs = records.iter().map(|r| r.ldr.pixels().clone()).collect();
    let ms = records.iter().map(|r| r.mask.values().clone()).collect();
    let ts = records.iter().map(|r| r.hdr.pixels().clone()).collect();
    Ok((stack(xs)?, stack(ms)?, stack(ts)?))
}

enum Task<'a> {
    Inpainting { images: &'a [LdrImage<f32>] },
    Hdr { records: &'a [PatchRecord<f32>] },
}

impl Task<'_> {
    fn stage(&self) -> Stage {
        match self {
            Task::Inpainting { .. } => Stage::Inpainting,
            Task::Hdr { .. } => Stage::HdrFinetune,
        }
    }

    fn len(&self) -> usize {
        match self {
            Task::Inpainting { images } => images.len(),
            Task::Hdr { records } => records.len(),
        }
    }

    fn source_ids(&self) -> Vec<u64> {
        match self {
            Task::Inpainting { images } => (0..images.len() as u64).collect(),
            Task::Hdr { records } => records.iter().map(|r| r.source_id).collect(),
        }
    }

    fn batch(
        &self,
        idx: &[usize],
        mask_seeds: &[u64],
        config: &TrainConfig,
    ) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
        match self {
            Task::Inpainting { images } => {
                let imgs: Vec<&LdrImage<f32>> = idx.iter().map(|&i| &images[i]).collect();
                inpainting_batch(&imgs, mask_seeds, &config.hole_masks)
            }
            Task::Hdr { records } => {
                let recs: Vec<&PatchRecord<f32>> = idx.iter().map(|&i| &records[i]).collect();
                hdr_batch(&recs)
            }
        }
    }
}

/// Loss node, its report, and every parameter with its graph variable.
type BatchLoss = (
    crate::tensor::Var,
    crate::losses::LossReport,
    Vec<(crate::tensor::Var, crate::tensor::Var)>,
);

/// Loss node for one batch.
fn batch_loss(
    g: &mut Graph<f32>,
    task: &Task<'_>,
    params: &UNetParameters<f32>,
    trainable: bool,
    batch: &(Tensor<f32>, Tensor<f32>, Tensor<f32>),
    config: &TrainConfig,
    extractor: &FeatureExtractor<f32>,
) -> Result<BatchLoss> {
    let (x, m, t) = batch;
    let xv = g.constant(x.clone());
    let vars = params.register(g, trainable);
    let out = unet_forward(g, xv, m, &vars, &config.network, forward_opts(config.mode))?;
    let (loss, report) = match task {
        Task::Inpainting { .. } => {
            inpainting_loss(g, out.output, t, m, extractor, &config.inpainting)?
        }
        Task::Hdr { .. } => total_loss(g, out.output, t, m, extractor, &config.loss)?,
    };
    Ok((loss, report, vars))
}

/// Mean training objective over `idx`, with hole masks fixed per item.
fn mean_loss(
    task: &Task<'_>,
    params: &UNetParameters<f32>,
    idx: &[usize],
    config: &TrainConfig,
    extractor: &FeatureExtractor<f32>,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for chunk in idx.chunks(config.batch_size) {
        let seeds: Vec<u64> = chunk
            .iter()
            .map(|&i| config.seed ^ 0xba11_0000 ^ i as u64)
            .collect();
        let batch = task.batch(chunk, &seeds, config)?;
        let mut g = Graph::new();
        let (_, report, _) = batch_loss(&mut g, task, params, false, &batch, config, extractor)?;
        sum += report.total * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(sum / count.max(1) as f64)
}

/// Up to `n` training indices spread evenly over `train_idx`.
fn probe_items(train_idx: &[usize], n: usize) -> Vec<usize> {
    let n = n.clamp(1, train_idx.len());
    (0..n).map(|k| train_idx[k * train_idx.len() / n]).collect()
}

fn validation_score(
    task: &Task<'_>,
    params: &UNetParameters<f32>,
    val_idx: &[usize],
    config: &TrainConfig,
    extractor: &FeatureExtractor<f32>,
) -> Result<f64> {
    match task {
        Task::Inpainting { .. } => mean_loss(task, params, val_idx, config, extractor),
        Task::Hdr { records } => {
            let subset: Vec<PatchRecord<f32>> =
                val_idx.iter().map(|&i| records[i].clone()).collect();
            let opts = EvalOptions {
                batch_size: config.batch_size,
                ..EvalOptions::default()
            };
            let report = evaluate(&subset, params, &config.network, config.mode, &opts)?;
            Ok(report.overall().mse_gamma.unwrap_or(f64::NAN))
        }
    }
}

fn run(
    task: Task<'_>,
    config: &TrainConfig,
    mut state: TrainerState,
    extractor: &FeatureExtractor<f32>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if task.len() == 0 {
        return Err(Error::Contract("training set is empty".into()));
    }
    state.params.validate(&config.network)?;
    let (train_idx, mut val_idx) =
        split_by_source(&task.source_ids(), config.validation_fraction, config.seed);
    if train_idx.is_empty() {
        return Err(Error::Contract(
            "no training items after the validation split".into(),
        ));
    }
    val_idx.truncate(config.max_validation);
    let probe = probe_items(&train_idx, config.max_validation);
    let probe_before = mean_loss(&task, &state.params, &probe, config, extractor)?;
    let adam = Adam::default();
    let mut log = RunLog::default();
    let started = Instant::now();
    let stage = task.stage();
    while state.step < config.max_steps {
        let mut rng = step_rng(config.seed, state.step);
        let idx: Vec<usize> = (0..config.batch_size)
            .map(|_| train_idx[rng.gen_range(0..train_idx.len())])
            .collect();
        let mask_seeds: Vec<u64> = (0..config.batch_size).map(|_| rng.gen()).collect();
        let batch = task.batch(&idx, &mask_seeds, config)?;
        let mut g = Graph::new();
        let (loss, report, vars) = batch_loss(
            &mut g,
            &task,
            &state.params,
            true,
            &batch,
            config,
            extractor,
        )?;
        if !report.total.is_finite() {
            return Err(Error::Numeric(format!(
                "loss {} at step {}",
                report.total, state.step
            )));
        }
        let grads = g.backward(loss)?;
        let mut flat = state.params.tensors();
        let grad_list: Vec<Tensor<f32>> = vars
            .iter()
            .zip(flat.chunks(2))
            .flat_map(|(&(w, b), pair)| [grads.wrt(w, &pair[0]), grads.wrt(b, &pair[1])])
            .collect();
        let lr = state.scheduler.lr;
        adam.step(&mut flat, &grad_list, &mut state.adam, lr)?;
        for (dst, src) in state.params.tensors_mut().into_iter().zip(flat) {
            *dst = src;
        }
        state.step += 1;
        log.records.push(LogRecord::Step {
            step: state.step,
            stage,
            loss: report.total,
            terms: report.terms,
            lr,
        });
        if state.step.is_multiple_of(config.eval_every) || state.step == config.max_steps {
            let score = if val_idx.is_empty() {
                report_mean_recent(&log, config.eval_every as usize)
            } else {
                validation_score(&task, &state.params, &val_idx, config, extractor)?
            };
            if state.best_validation.is_none_or(|b| score < b) {
                state.best_validation = Some(score);
                state.best_params = state.params.clone();
            }
            let lr = state.scheduler.observe(score);
            log.records.push(LogRecord::Epoch {
                epoch: state.step / config.eval_every,
                step: state.step,
                stage,
                validation: score,
                lr,
            });
        }
    }
    let probe_after = mean_loss(&task, &state.params, &probe, config, extractor)?;
    log.records.push(LogRecord::Summary {
        stage,
        steps: state.step,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        probe_loss: Some((probe_before, probe_after)),
    });
    Ok(TrainOutcome {
        state,
        log,
        probe_loss: (probe_before, probe_after),
    })
}

fn report_mean_recent(log: &RunLog, n: usize) -> f64 {
    let l = log.step_losses();
    let k = n.min(l.len()).max(1);
    l[l.len().saturating_sub(k)..].iter().sum::<f64>() / k as f64
}

/// Inpainting pre-training on LDR images with synthetic binary holes.
pub fn train_inpainting(
    images: &[LdrImage<f32>],
    config: &TrainConfig,
    state: TrainerState,
) -> Result<TrainOutcome> {
    let extractor = FeatureExtractor::seeded(config.extractor_seed);
    run(Task::Inpainting { images }, config, state, &extractor)
}

/// Training on HDR patch records with the HDR objective. Used for HDR
/// fine-tuning and for the synthetic-HDR pre-training baseline.
pub fn finetune_hdr(
    records: &[PatchRecord<f32>],
    config: &TrainConfig,
    state: TrainerState,
) -> Result<TrainOutcome> {
    let extractor = FeatureExtractor::seeded(config.extractor_seed);
    run(Task::Hdr { records }, config, state, &extractor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scheduler_examples() {
        assert_eq!(
            plateau_scheduler(&[1.0, 0.9, 0.8, 0.7, 0.6], 1.0, 2, 2.0),
            1.0
        );
        assert_eq!(plateau_scheduler(&[1.0, 1.0, 1.0], 1.0, 2, 2.0), 0.5);
        assert_eq!(
            plateau_scheduler(&[1.0, 1.0, 1.0, 1.0, 1.0], 1.0, 2, 2.0),
            0.25
        );
        assert_eq!(plateau_scheduler(&[1.0; 100], 1e-5, 1, 2.0), 1e-6);
    }

    #[test]
    fn xavier_bounds_and_zero_bias() {
        let cfg = UNetConfig {
            levels: 2,
            base_channels: 4,
            ..Default::default()
        };
        let p = initialize_parameters(&cfg, 1);
        for (spec, l) in cfg.layers().iter().zip(&p.layers) {
            let a = (6.0 / ((spec.in_channels + spec.out_channels) * 9) as f64).sqrt() as f32;
            assert!(l.weight.data().iter().all(|v| v.abs() <= a));
            assert!(l.bias.data().iter().all(|&v| v == 0.0));
        }
        assert_eq!(p, initialize_parameters(&cfg, 1));
    }

    #[test]
    fn split_holds_out_whole_sources() {
        let ids = [0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 6, 7, 8, 9, 9];
        let (train, val) = split_by_source(&ids, 0.1, 3);
        assert_eq!(train.len() + val.len(), ids.len());
        let vs: BTreeSet<u64> = val.iter().map(|&i| ids[i]).collect();
        assert_eq!(vs.len(), 1);
        assert!(train.iter().all(|&i| !vs.contains(&ids[i])));
    }

    #[test]
    fn model_file_round_trip() {
        let cfg = UNetConfig {
            levels: 2,
            base_channels: 4,
            ..Default::default()
        };
        let p = initialize_parameters(&cfg, 9);
        let dir = std::env::temp_dir().join(format!("hdrmask-model-{}", std::process::id()));
        save_model(&dir, &p, &cfg, MaskingMode::IMask).unwrap();
        let (q, c, m) = load_model(&dir).unwrap();
        std::fs::remove_file(&dir).unwrap();
        assert_eq!((q, c, m), (p, cfg, MaskingMode::IMask));
    }

    #[test]
    fn log_round_trip() {
        let log = RunLog {
            records: vec![
                LogRecord::Step {
                    step: 1,
                    stage: Stage::Inpainting,
                    loss: 0.5,
                    terms: vec![],
                    lr: 2e-4,
                },
                LogRecord::Summary {
                    stage: Stage::Inpainting,
                    steps: 1,
                    wall_clock_seconds: 0.25,
                    probe_loss: Some((1.0, 0.5)),
                },
            ],
        };
        assert_eq!(RunLog::from_jsonl(&log.to_jsonl()).unwrap(), log);
    }
}
