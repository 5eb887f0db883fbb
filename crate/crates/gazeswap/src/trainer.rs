//! Two-phase training over the five experimental conditions.
//!
//! Phase 1 pretrains on a pooled multi-identity dataset; phase 2 trains on
//! one (character, original) identity pair. Each iteration samples a batch
//! from both streams, reconstructs them through their respective latent
//! pathways, composes the condition's loss, and applies one optimizer step.
//!
//! Condition gating: the finetuning condition runs phase 1 with the gaze
//! term disabled, so it shares its pretrain checkpoint with the baseline.
//! More generally, conditions share a pretrain exactly when their phase-1
//! active terms coincide.
//!
//! Determinism: batches come from a ChaCha stream derived from the config
//! seed, and gradient reduction across the batch is ordered, so a fixed
//! `(config, seed)` reproduces the loss trajectory exactly — in parallel
//! batch mode as well.

use crate::dataset::{derive_seed, load_identity, DatasetError, PairSpec};
use crate::gaze::{EstimatorKind, GazeEstimator};
use crate::losses::{
    active_terms, total_loss_with_grads, ConditionId, LossBreakdown, LossContext, LossError,
    LossWeights, Phase, SsimConfig,
};
use crate::model::{
    load_checkpoint_expecting, save_checkpoint, Adam, CheckpointMeta, LiaeModel, ModelConfig,
    ModelError, ModelGrads, PathwayMode, RngState,
};
use crate::synth::FrameSample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("config invalid: {0}")]
    BadConfig(String),
    #[error("io at {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(
        "non-finite loss at iteration {iteration} ({phase:?}); offending batch: {batch:?}"
    )]
    NonFiniteLoss { iteration: u64, phase: Phase, batch: Vec<(String, u32)> },
    #[error("dataset {0} has no frames")]
    EmptyDataset(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.display().to_string(), source }
}

/// Everything one training run needs. Serializes to the TOML config file
/// consumed by the CLI (`schema_version = 1`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub condition: ConditionId,
    /// Phase-1 iterations on the pooled pretrain set.
    pub pretrain_iters: u64,
    /// Phase-2 iterations on the identity pair.
    pub pair_iters: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub ssim: SsimConfig,
    pub estimator: EstimatorKind,
    /// Dataset root for the pooled pretrain identities.
    pub pretrain_data: PathBuf,
    /// Dataset root holding the pair identities.
    pub pair_data: PathBuf,
    pub pair_character: String,
    pub pair_original: String,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    /// Whether em/gaze terms are active during phase 1 for the non-finetune
    /// conditions.
    pub extra_terms_in_pretrain: bool,
    pub adabelief: bool,
    /// When false, batch members are processed in parallel. Gradient
    /// reduction stays ordered, so results are identical either way.
    pub deterministic: bool,
    /// Compute the core DSSIM/MSE on face-masked images.
    pub core_on_masked: bool,
}

impl Default for TrainConfig {
    /// Desk-scale defaults: small enough that the full five-condition
    /// matrix runs on a laptop CPU in well under an hour.
    fn default() -> Self {
        Self {
            condition: ConditionId::Dfl,
            pretrain_iters: 2000,
            pair_iters: 1000,
            batch_size: 4,
            learning_rate: 1e-3,
            seed: 0,
            weights: LossWeights::default(),
            ssim: SsimConfig::default(),
            estimator: EstimatorKind::Centroid,
            pretrain_data: PathBuf::from("data/pretrain"),
            pair_data: PathBuf::from("data/pairs"),
            pair_character: "id00".into(),
            pair_original: "id01".into(),
            out_dir: PathBuf::from("runs/train"),
            model: ModelConfig::default(),
            extra_terms_in_pretrain: true,
            adabelief: false,
            deterministic: true,
            core_on_masked: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be >= 1".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(TrainError::BadConfig("learning_rate must be > 0".into()));
        }
        if self.seed > i64::MAX as u64 {
            return Err(TrainError::BadConfig("seed must fit in 63 bits (TOML limit)".into()));
        }
        self.weights.validate().map_err(TrainError::Loss)?;
        self.model.validate().map_err(TrainError::Model)?;
        Ok(())
    }

    /// Stable digest of the canonical TOML serialization. The output
    /// directory is excluded: the hash identifies the experiment, not
    /// where its artifacts land.
    pub fn config_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        let text = toml::to_string(&canonical).expect("config serializes");
        format!("{:x}", Sha256::digest(text.as_bytes()))
    }

    pub fn to_toml(&self) -> String {
        format!("schema_version = 1\n\n{}", toml::to_string_pretty(self).expect("serializes"))
    }

    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| TrainError::BadConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One per-iteration record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iteration: u64,
    pub breakdown: LossBreakdown,
}

/// Training log: one row per iteration plus run-level diagnostics.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub estimator_failures: u64,
    pub wall_seconds: f64,
    pub seed: u64,
    pub config_hash: String,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str =
        "iteration,dssim,mse,mask_mse,em_term,gaze_term,theta,total";

    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        let mut text = String::from(Self::CSV_HEADER);
        text.push('\n');
        for row in &self.rows {
            let b = &row.breakdown;
            text.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                row.iteration, b.dssim, b.mse, b.mask_mse, b.em_term, b.gaze_term, b.theta, b.total
            ));
        }
        std::fs::write(path, text).map_err(io_err(path))
    }

    pub fn read_csv(path: &Path) -> Result<Vec<LogRow>, TrainError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(TrainError::BadConfig(format!(
                    "trainlog {} line {}: expected 8 fields",
                    path.display(),
                    i + 1
                )));
            }
            let p = |s: &str| s.parse::<f64>().map_err(|e| {
                TrainError::BadConfig(format!("trainlog {} line {}: {e}", path.display(), i + 1))
            });
            rows.push(LogRow {
                iteration: f[0].parse().map_err(|e| {
                    TrainError::BadConfig(format!("trainlog line {}: {e}", i + 1))
                })?,
                breakdown: LossBreakdown {
                    dssim: p(f[1])?,
                    mse: p(f[2])?,
                    mask_mse: p(f[3])?,
                    em_term: p(f[4])?,
                    gaze_term: p(f[5])?,
                    theta: p(f[6])?,
                    total: p(f[7])?,
                },
            });
        }
        Ok(rows)
    }
}

/// Result of a full or partial training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub pretrain_checkpoint: Option<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub log: TrainLog,
}

struct PhaseData<'a> {
    character: &'a [FrameSample],
    original: &'a [FrameSample],
}

/// Estimator plus per-frame cached outputs on source frames (the estimate
/// on the reconstruction is always fresh).
struct EstimatorCache {
    estimator: Box<dyn GazeEstimator>,
    character: Vec<Option<crate::faces::GazeAngles>>,
    original: Vec<Option<crate::faces::GazeAngles>>,
}

struct PhaseRunner<'a> {
    cfg: &'a TrainConfig,
    phase: Phase,
    estimator: Option<EstimatorCache>,
}

impl PhaseRunner<'_> {
    #[allow(clippy::too_many_arguments)]
    fn run(
        &self,
        model: &mut LiaeModel,
        opt: &mut Adam,
        data: &PhaseData,
        rng: &mut ChaCha8Rng,
        iters: u64,
        start_iteration: u64,
        rows: &mut Vec<LogRow>,
        estimator_failures: &mut u64,
    ) -> Result<(), TrainError> {
        let cfg = self.cfg;
        if iters == 0 {
            return Ok(());
        }
        if data.character.is_empty() || data.original.is_empty() {
            return Err(TrainError::EmptyDataset("phase input".into()));
        }

        for it in 0..iters {
            let iteration = start_iteration + it;
            // Batch: character samples then original samples.
            let mut batch: Vec<(PathwayMode, &FrameSample, usize)> =
                Vec::with_capacity(2 * cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let idx = rng.gen_range(0..data.character.len());
                batch.push((PathwayMode::Character, &data.character[idx], idx));
            }
            for _ in 0..cfg.batch_size {
                let idx = rng.gen_range(0..data.original.len());
                batch.push((PathwayMode::Original, &data.original[idx], idx));
            }

            let process = |(mode, sample, slot): &(PathwayMode, &FrameSample, usize)| -> Result<
                (LossBreakdown, ModelGrads, bool),
                TrainError,
            > {
                let (recon, mask_pred, _, cache) = model.forward_cached(&sample.image, *mode)?;
                let source_gaze = self.estimator.as_ref().map(|e| match mode {
                    PathwayMode::Character => e.character[*slot],
                    PathwayMode::Original => e.original[*slot],
                });
                let ctx = LossContext {
                    weights: &cfg.weights,
                    ssim: &cfg.ssim,
                    core_on_masked: cfg.core_on_masked,
                    estimator: self.estimator.as_ref().map(|e| e.estimator.as_ref()),
                    source_gaze,
                };
                let (breakdown, grad_img, grad_mask, failed) = total_loss_with_grads(
                    cfg.condition,
                    self.phase,
                    &sample.image,
                    &recon,
                    &sample.masks,
                    &mask_pred,
                    &ctx,
                )?;
                let mut grads = ModelGrads::zeros_like(model);
                model.backward(&cache, &grad_img, &grad_mask, &mut grads);
                Ok((breakdown, grads, failed))
            };

            let results: Vec<Result<(LossBreakdown, ModelGrads, bool), TrainError>> =
                if cfg.deterministic {
                    batch.iter().map(process).collect()
                } else {
                    batch.par_iter().map(process).collect()
                };

            let mut total_grads = ModelGrads::zeros_like(model);
            let mut mean = LossBreakdown::default();
            let n = batch.len() as f64;
            for r in results {
                let (b, g, failed) = r?;
                if failed {
                    *estimator_failures += 1;
                }
                total_grads.add(&g);
                mean.dssim += b.dssim / n;
                mean.mse += b.mse / n;
                mean.mask_mse += b.mask_mse / n;
                mean.em_term += b.em_term / n;
                mean.gaze_term += b.gaze_term / n;
                mean.theta += b.theta / n;
                mean.total += b.total / n;
            }
            if !mean.total.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    iteration,
                    phase: self.phase,
                    batch: batch
                        .iter()
                        .map(|(_, s, _)| (s.identity_id.clone(), s.frame_index))
                        .collect(),
                });
            }
            total_grads.scale(1.0 / n);
            opt.step(model, &total_grads);
            rows.push(LogRow { iteration, breakdown: mean });
        }
        Ok(())
    }
}

fn build_estimator(cfg: &TrainConfig, phase: Phase, data: &PhaseData) -> Option<EstimatorCache> {
    let terms = active_terms(cfg.condition, phase, cfg.extra_terms_in_pretrain);
    terms.gaze.then(|| {
        let estimator = cfg.estimator.build();
        let precompute = |frames: &[FrameSample]| {
            frames
                .iter()
                .map(|f| estimator.estimate(&f.image, Some(&f.masks)).ok())
                .collect()
        };
        EstimatorCache {
            character: precompute(data.character),
            original: precompute(data.original),
            estimator,
        }
    })
}

fn check_resolution(cfg: &TrainConfig, samples: &[FrameSample], what: &str) -> Result<(), TrainError> {
    if let Some(s) = samples.first() {
        if s.image.resolution() != cfg.model.resolution {
            return Err(TrainError::BadConfig(format!(
                "{what} resolution {} does not match model resolution {}",
                s.image.resolution(),
                cfg.model.resolution
            )));
        }
    }
    Ok(())
}

/// Phase 1 only: pretrains on the pooled dataset and writes
/// `<out_dir>/pretrain.ckpt`.
pub fn pretrain(cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let started = std::time::Instant::now();
    std::fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;

    let mut model = LiaeModel::new(cfg.model, derive_seed(cfg.seed, 1))?;
    let mut opt = Adam::new(&model, cfg.learning_rate, cfg.adabelief);
    let mut rows = Vec::new();
    let mut failures = 0u64;

    let pool = crate::dataset::load_dataset(&cfg.pretrain_data)?;
    check_resolution(cfg, &pool, "pretrain data")?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2));
    let data = PhaseData { character: &pool, original: &pool };
    let runner = PhaseRunner {
        cfg,
        phase: Phase::Pretrain,
        estimator: build_estimator(cfg, Phase::Pretrain, &data),
    };
    runner.run(
        &mut model,
        &mut opt,
        &data,
        &mut rng,
        cfg.pretrain_iters,
        0,
        &mut rows,
        &mut failures,
    )?;

    let ckpt = cfg.out_dir.join("pretrain.ckpt");
    save_checkpoint(
        &model,
        &CheckpointMeta {
            iteration: cfg.pretrain_iters,
            condition: Some(cfg.condition),
            rng: Some(RngState::capture(&rng)),
        },
        &ckpt,
    )?;
    let log = TrainLog {
        rows,
        estimator_failures: failures,
        wall_seconds: started.elapsed().as_secs_f64(),
        seed: cfg.seed,
        config_hash: cfg.config_hash(),
    };
    Ok(TrainOutcome { pretrain_checkpoint: Some(ckpt.clone()), final_checkpoint: ckpt, log })
}

/// Phase 2 only: continues from a pretrain checkpoint on the identity pair
/// and writes `<out_dir>/final.ckpt`.
pub fn pair_train(cfg: &TrainConfig, start_checkpoint: &Path) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let started = std::time::Instant::now();
    std::fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;

    let (mut model, meta) = load_checkpoint_expecting(start_checkpoint, &cfg.model)?;
    let mut opt = Adam::new(&model, cfg.learning_rate, cfg.adabelief);
    let mut rows = Vec::new();
    let mut failures = 0u64;

    let character = load_identity(&cfg.pair_data, &cfg.pair_character)?;
    let original = load_identity(&cfg.pair_data, &cfg.pair_original)?;
    check_resolution(cfg, &character, "pair data")?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3));
    let data = PhaseData { character: &character, original: &original };
    let runner = PhaseRunner {
        cfg,
        phase: Phase::Pair,
        estimator: build_estimator(cfg, Phase::Pair, &data),
    };
    runner.run(
        &mut model,
        &mut opt,
        &data,
        &mut rng,
        cfg.pair_iters,
        meta.iteration,
        &mut rows,
        &mut failures,
    )?;

    let ckpt = cfg.out_dir.join("final.ckpt");
    save_checkpoint(
        &model,
        &CheckpointMeta {
            iteration: meta.iteration + cfg.pair_iters,
            condition: Some(cfg.condition),
            rng: Some(RngState::capture(&rng)),
        },
        &ckpt,
    )?;
    let log = TrainLog {
        rows,
        estimator_failures: failures,
        wall_seconds: started.elapsed().as_secs_f64(),
        seed: cfg.seed,
        config_hash: cfg.config_hash(),
    };
    Ok(TrainOutcome { pretrain_checkpoint: None, final_checkpoint: ckpt, log })
}

/// Full two-phase run. Writes `pretrain.ckpt`, `final.ckpt`, and
/// `trainlog.csv` under the config's output directory.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let pre = pretrain(cfg)?;
    let pair = pair_train(cfg, &pre.final_checkpoint)?;
    let mut rows = pre.log.rows;
    rows.extend(pair.log.rows.iter().copied());
    let log = TrainLog {
        rows,
        estimator_failures: pre.log.estimator_failures + pair.log.estimator_failures,
        wall_seconds: pre.log.wall_seconds + pair.log.wall_seconds,
        seed: cfg.seed,
        config_hash: cfg.config_hash(),
    };
    log.write_csv(&cfg.out_dir.join("trainlog.csv"))?;
    Ok(TrainOutcome {
        pretrain_checkpoint: pre.pretrain_checkpoint,
        final_checkpoint: pair.final_checkpoint,
        log,
    })
}

/// Swaps every frame of one identity through a trained checkpoint. Output
/// filenames align with source frame indices.
pub fn generate_swaps(
    checkpoint: &Path,
    dataset_root: &Path,
    identity: &str,
    out_dir: &Path,
) -> Result<u64, TrainError> {
    let (model, _) = crate::model::load_checkpoint(checkpoint)?;
    let frames = load_identity(dataset_root, identity)?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut count = 0;
    for frame in &frames {
        if frame.image.resolution() != model.config().resolution {
            return Err(TrainError::Model(ModelError::ResolutionMismatch {
                input: frame.image.resolution(),
                model: model.config().resolution,
            }));
        }
        let swapped = model.swap(&frame.image)?;
        let path = out_dir.join(format!("{:04}.png", frame.frame_index));
        swapped.save_png(&path).map_err(|e| TrainError::Model(ModelError::Face(e)))?;
        count += 1;
    }
    Ok(count)
}

// ---- condition matrix -------------------------------------------------------

/// Matrix run specification: every (condition × pair × seed) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixConfig {
    pub base: TrainConfig,
    pub conditions: Vec<ConditionId>,
    pub pairs: Vec<PairSpec>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Run cells on the rayon pool.
    pub parallel: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum CellStatus {
    Ok,
    Failed { error: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestCell {
    pub condition: ConditionId,
    pub character: String,
    pub original: String,
    pub seed: u64,
    pub cell_dir: PathBuf,
    pub pretrain_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
    pub trainlog: PathBuf,
    pub config_hash: String,
    #[serde(flatten)]
    pub status: CellStatus,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub generated_at: Option<String>,
    pub cells: Vec<ManifestCell>,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<(), TrainError> {
        let text = toml::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        toml::from_str(&text).map_err(|e| TrainError::BadConfig(e.to_string()))
    }
}

/// A planned cell before execution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellPlan {
    pub condition: ConditionId,
    pub pair: PairSpec,
    pub seed: u64,
    /// Key identifying which pretrain this cell consumes.
    pub pretrain_key: PretrainKey,
}

/// Conditions share a pretrain checkpoint exactly when their phase-1 loss
/// terms and seed coincide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PretrainKey {
    pub em: bool,
    pub gaze: bool,
    pub seed: u64,
}

impl PretrainKey {
    fn dir_name(&self) -> String {
        format!(
            "pretrain_em{}_gaze{}_s{}",
            u8::from(self.em),
            u8::from(self.gaze),
            self.seed
        )
    }
}

/// Enumerates the matrix cells and the deduplicated pretrains they share.
pub fn plan_condition_matrix(cfg: &MatrixConfig) -> (Vec<PretrainKey>, Vec<CellPlan>) {
    let mut keys = std::collections::BTreeSet::new();
    let mut cells = Vec::new();
    for &seed in &cfg.seeds {
        for &condition in &cfg.conditions {
            let terms = active_terms(condition, Phase::Pretrain, cfg.base.extra_terms_in_pretrain);
            let key = PretrainKey { em: terms.em, gaze: terms.gaze, seed };
            keys.insert(key);
            for pair in &cfg.pairs {
                cells.push(CellPlan { condition, pair: pair.clone(), seed, pretrain_key: key });
            }
        }
    }
    (keys.into_iter().collect(), cells)
}

fn pretrain_condition_for_key(
    key: &PretrainKey,
    conditions: &[ConditionId],
    extra_terms_in_pretrain: bool,
) -> ConditionId {
    // Any condition whose phase-1 terms match the key will do; pick the
    // first so runs are reproducible.
    conditions
        .iter()
        .copied()
        .find(|&c| {
            let t = active_terms(c, Phase::Pretrain, extra_terms_in_pretrain);
            (t.em, t.gaze) == (key.em, key.gaze)
        })
        .unwrap_or(ConditionId::Dfl)
}

/// Trains every (condition × pair × seed) cell, sharing pretrain
/// checkpoints between conditions with identical phase-1 losses. Cells
/// that fail are recorded in the manifest; the rest proceed.
pub fn run_condition_matrix(cfg: &MatrixConfig) -> Result<Manifest, TrainError> {
    cfg.base.validate()?;
    if cfg.conditions.is_empty() || cfg.pairs.is_empty() || cfg.seeds.is_empty() {
        return Err(TrainError::BadConfig(
            "matrix needs at least one condition, pair, and seed".into(),
        ));
    }
    std::fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    let (keys, cells) = plan_condition_matrix(cfg);

    // Stage 1: unique pretrains.
    let pretrain_results: Vec<(PretrainKey, Result<PathBuf, String>)> = {
        let job = |key: &PretrainKey| -> (PretrainKey, Result<PathBuf, String>) {
            let mut pcfg = cfg.base.clone();
            pcfg.condition =
                pretrain_condition_for_key(key, &cfg.conditions, cfg.base.extra_terms_in_pretrain);
            pcfg.seed = key.seed;
            pcfg.out_dir = cfg.out_dir.join(key.dir_name());
            // Honor the key even when extra_terms_in_pretrain differs.
            let result = pretrain(&pcfg)
                .and_then(|o| {
                    o.log.write_csv(&pcfg.out_dir.join("trainlog.csv"))?;
                    Ok(o.final_checkpoint)
                })
                .map_err(|e| e.to_string());
            (*key, result)
        };
        if cfg.parallel {
            keys.par_iter().map(job).collect()
        } else {
            keys.iter().map(job).collect()
        }
    };
    let pretrain_map: std::collections::HashMap<PretrainKey, Result<PathBuf, String>> =
        pretrain_results.into_iter().collect();

    // Stage 2: pair phases.
    let run_cell = |plan: &CellPlan| -> ManifestCell {
        let cell_dir = cfg.out_dir.join(format!(
            "{}_{}_s{}",
            plan.condition,
            plan.pair.label(),
            plan.seed
        ));
        let mut ccfg = cfg.base.clone();
        ccfg.condition = plan.condition;
        ccfg.seed = plan.seed;
        ccfg.pair_character = plan.pair.character.clone();
        ccfg.pair_original = plan.pair.original.clone();
        ccfg.out_dir = cell_dir.clone();
        let pretrain_ckpt = cfg.out_dir.join(plan.pretrain_key.dir_name()).join("pretrain.ckpt");

        let status = match pretrain_map.get(&plan.pretrain_key) {
            Some(Ok(_)) => pair_train(&ccfg, &pretrain_ckpt)
                .and_then(|o| o.log.write_csv(&cell_dir.join("trainlog.csv")).map(|()| o))
                .map(|_| CellStatus::Ok)
                .unwrap_or_else(|e| CellStatus::Failed { error: e.to_string() }),
            Some(Err(e)) => CellStatus::Failed { error: format!("pretrain failed: {e}") },
            None => CellStatus::Failed { error: "pretrain missing".into() },
        };
        ManifestCell {
            condition: plan.condition,
            character: plan.pair.character.clone(),
            original: plan.pair.original.clone(),
            seed: plan.seed,
            cell_dir: cell_dir.clone(),
            pretrain_checkpoint: pretrain_ckpt,
            final_checkpoint: cell_dir.join("final.ckpt"),
            trainlog: cell_dir.join("trainlog.csv"),
            config_hash: ccfg.config_hash(),
            status,
        }
    };
    let manifest_cells: Vec<ManifestCell> = if cfg.parallel {
        cells.par_iter().map(run_cell).collect()
    } else {
        cells.iter().map(run_cell).collect()
    };

    let manifest = Manifest { schema_version: 1, generated_at: None, cells: manifest_cells };
    manifest.write(&cfg.out_dir.join("manifest.toml"))?;
    Ok(manifest)
}
