//! Masking-mode and pre-training ablation over several seeds.

use serde::{Deserialize, Serialize};

use super::corpus::{hdr_scene, pseudo_hdr_records, sample_corpus, texture_image};
use super::eval::{evaluate, EvalOptions};
use super::{
    finetune_hdr, initialize_parameters, train_inpainting, PretrainSource, Stage, TrainConfig,
    TrainerState,
};
use crate::error::{Error, Result};
use crate::network::MaskingMode;
use crate::pipeline::LdrImage;
use crate::sampler::{PatchRecord, SamplerConfig};

/// Data shared by every arm.
#[derive(Clone, Debug, Default)]
pub struct Corpora {
    /// LDR images for inpainting pre-training.
    pub textures: Vec<LdrImage<f32>>,
    /// Synthetic HDR records for the HDR pre-training baseline.
    pub pseudo_hdr: Vec<PatchRecord<f32>>,
    pub train: Vec<PatchRecord<f32>>,
    pub test: Vec<PatchRecord<f32>>,
}

/// Sizes of the procedural corpora.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub textures: usize,
    pub texture_size: usize,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub scene_size: usize,
    pub sampler: SamplerConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            textures: 1000,
            texture_size: 64,
            train_scenes: 40,
            test_scenes: 12,
            scene_size: 256,
            sampler: SamplerConfig {
                per_image: 16,
                ..SamplerConfig::default()
            },
        }
    }
}

impl Corpora {
    /// Textures, synthetic HDR records and sampled scene patches. Test
    /// scenes use source ids disjoint from the training scenes.
    pub fn procedural(config: &CorpusConfig, seed: u64) -> Result<Self> {
        let base = seed.wrapping_mul(1_000_003);
        let textures: Vec<LdrImage<f32>> = (0..config.textures as u64)
            .map(|i| texture_image(config.texture_size, base + i))
            .collect();
        let pseudo_hdr = pseudo_hdr_records(&textures, &config.sampler, seed)?;
        let scenes = |ids: std::ops::Range<u64>| -> Vec<_> {
            ids.map(|i| (i, hdr_scene(config.scene_size, base + i)))
                .collect()
        };
        let n_train = config.train_scenes as u64;
        let train = sample_corpus(&scenes(0..n_train), &config.sampler, seed)?;
        let test = sample_corpus(
            &scenes(n_train..n_train + config.test_scenes as u64),
            &config.sampler,
            seed ^ 0x7e57,
        )?;
        Ok(Corpora {
            textures,
            pseudo_hdr,
            train,
            test,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationArm {
    pub mode: MaskingMode,
    pub pretrain: PretrainSource,
}

impl AblationArm {
    pub const fn new(mode: MaskingMode, pretrain: PretrainSource) -> Self {
        AblationArm { mode, pretrain }
    }

    pub fn label(&self) -> String {
        format!("{}+{}", self.mode.name(), self.pretrain.name())
    }

    /// SConv, IMask and FMask with inpainting pre-training, plus FMask with
    /// HDR pre-training.
    pub fn standard() -> Vec<AblationArm> {
        vec![
            AblationArm::new(MaskingMode::SConv, PretrainSource::Inpainting),
            AblationArm::new(MaskingMode::IMask, PretrainSource::Inpainting),
            AblationArm::new(MaskingMode::FMask, PretrainSource::Inpainting),
            AblationArm::new(MaskingMode::FMask, PretrainSource::Hdr),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub arms: Vec<AblationArm>,
    pub seeds: Vec<u64>,
    pub pretrain_steps: u64,
    pub finetune_steps: u64,
    /// Template for both stages; stage, mode, steps and seed are overridden.
    pub base: TrainConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            arms: AblationArm::standard(),
            seeds: vec![0, 1, 2],
            pretrain_steps: 400,
            finetune_steps: 400,
            base: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub arm: AblationArm,
    pub seed: u64,
    /// Relative fall of the training loss on a fixed probe subset, per stage.
    pub pretrain_loss_drop: Option<f64>,
    pub finetune_loss_drop: Option<f64>,
    pub median_masked_mse: f64,
    pub mean_mse: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
}

impl AblationReport {
    pub fn run(&self, arm: AblationArm, seed: u64) -> Option<&AblationRun> {
        self.runs.iter().find(|r| r.arm == arm && r.seed == seed)
    }

    /// Seeds on which `better` reaches a median masked error no larger than
    /// `worse`, and the number of seeds compared.
    pub fn ordering_wins(&self, better: AblationArm, worse: AblationArm) -> (usize, usize) {
        let mut wins = 0;
        let mut total = 0;
        for a in self.runs.iter().filter(|r| r.arm == better) {
            if let Some(b) = self.run(worse, a.seed) {
                total += 1;
                if a.median_masked_mse <= b.median_masked_mse {
                    wins += 1;
                }
            }
        }
        (wins, total)
    }

    pub fn to_tsv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let mut s = String::from(
            "arm\tseed\tpretrain_loss_drop\tfinetune_loss_drop\tmedian_masked_mse_gamma\tmean_mse_gamma\tseconds\n",
        );
        for r in &self.runs {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{:.6e}\t{:.6e}\t{:.1}\n",
                r.arm.label(),
                r.seed,
                opt(r.pretrain_loss_drop),
                opt(r.finetune_loss_drop),
                r.median_masked_mse,
                r.mean_mse,
                r.seconds
            ));
        }
        s
    }
}

/// Trains and evaluates one arm for one seed.
pub fn run_arm(
    corpora: &Corpora,
    config: &AblationConfig,
    arm: AblationArm,
    seed: u64,
) -> Result<AblationRun> {
    let started = std::time::Instant::now();
    let mut cfg = config.base.clone();
    cfg.seed = seed;
    cfg.mode = arm.mode;
    cfg.pretrain = arm.pretrain;
    let init = initialize_parameters(&cfg.network, seed);
    let (params, adam, pretrain_loss_drop) = match arm.pretrain {
        PretrainSource::None => (init, None, None),
        PretrainSource::Inpainting => {
            let mut c = cfg.clone();
            c.stage = Stage::Inpainting;
            c.max_steps = config.pretrain_steps;
            let out = train_inpainting(&corpora.textures, &c, TrainerState::fresh(init, &c))?;
            let drop = Some(out.probe_loss_drop());
            (out.state.best_params, Some(out.state.adam), drop)
        }
        PretrainSource::Hdr => {
            let mut c = cfg.clone();
            c.stage = Stage::HdrFinetune;
            c.max_steps = config.pretrain_steps;
            let out = finetune_hdr(&corpora.pseudo_hdr, &c, TrainerState::fresh(init, &c))?;
            let drop = Some(out.probe_loss_drop());
            (out.state.best_params, Some(out.state.adam), drop)
        }
    };
    cfg.stage = Stage::HdrFinetune;
    cfg.max_steps = config.finetune_steps;
    let out = finetune_hdr(
        &corpora.train,
        &cfg,
        TrainerState::from_pretrained(params, adam, &cfg),
    )?;
    let report = evaluate(
        &corpora.test,
        &out.state.best_params,
        &cfg.network,
        cfg.mode,
        &EvalOptions::default(),
    )?;
    Ok(AblationRun {
        arm,
        seed,
        pretrain_loss_drop,
        finetune_loss_drop: Some(out.probe_loss_drop()),
        median_masked_mse: report.median_masked_mse(),
        mean_mse: report.overall().mse_gamma.unwrap_or(f64::NAN),
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Runs every arm for every seed, calling `progress` after each run.
pub fn run_ablation(
    corpora: &Corpora,
    config: &AblationConfig,
    mut progress: impl FnMut(&AblationRun),
) -> Result<AblationReport> {
    if corpora.train.is_empty() || corpora.test.is_empty() {
        return Err(Error::Contract(
            "ablation needs training and test records".into(),
        ));
    }
    let mut report = AblationReport::default();
    for &seed in &config.seeds {
        for &arm in &config.arms {
            let run = run_arm(corpora, config, arm, seed)?;
            progress(&run);
            report.runs.push(run);
        }
    }
    Ok(report)
}
