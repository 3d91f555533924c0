//! End-to-end self-supervised training: depth and pose networks optimized
//! jointly on the weighted photometric, smoothness and consistency objective.

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, MANIFEST_FILE, PARAMS_FILE};
pub use config::{DataSource, TrainConfig, WidthProfile};

use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{generate_synthetic_scene, load_sequence_with, LoadOptions, Sequence, SequenceSample};
use crate::error::{Error, Result};
use crate::evaluation::{depth_metrics, format_table, valid_gt_mask, Align, DepthMetrics, MetricRow};
use crate::factorization::{predict_depth, DepthNet, FactorizedDepth};
use crate::frame::ImageFrame;
use crate::geometry::warp;
use crate::geometry::CameraIntrinsics;
use crate::losses::{self, LossBreakdown, SourceReduction, SynthView};
use crate::nn::{ForwardCtx, ParamStore};
use crate::pose::{iterative_pose, PoseNet};

/// Parameters are trained in single precision.
pub const TRAIN_DTYPE: DType = DType::F32;

/// Depth and pose networks sharing one parameter store.
#[derive(Debug)]
pub struct Model {
    pub params: ParamStore,
    pub depth: DepthNet,
    pub pose: PoseNet,
}

impl Model {
    /// Builds and initializes every parameter from `cfg.seed`.
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let mut params = ParamStore::new(TRAIN_DTYPE, cfg.seed);
        let depth = DepthNet::new(&mut params, "depth", &cfg.depth_config())?;
        let pose = PoseNet::new(&mut params, "pose", &cfg.widths.widths())?;
        Ok(Self { params, depth, pose })
    }

    pub fn predict(&self, image: &ImageFrame) -> Result<FactorizedDepth> {
        predict_depth(image, &self.depth, TRAIN_DTYPE)
    }
}

/// One optimizer step's record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

/// Training and held-out samples resolved from the configured source.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub intrinsics: CameraIntrinsics,
    pub train: Vec<SequenceSample>,
    pub holdout: Vec<SequenceSample>,
}

impl Dataset {
    pub fn from_sequence(seq: &Sequence, holdout_every: usize) -> Result<Self> {
        seq.validate()?;
        let k = seq.intrinsics;
        if k.width % 32 != 0 || k.height % 32 != 0 {
            return Err(Error::Config(format!(
                "image size {}x{} must be divisible by 32",
                k.width, k.height
            )));
        }
        let (holdout, train): (Vec<_>, Vec<_>) = seq
            .samples()
            .into_iter()
            .partition(|s| holdout_every > 0 && s.index % holdout_every == 0);
        if train.is_empty() {
            return Err(Error::Config("no training samples (need at least 3 frames)".into()));
        }
        Ok(Self {
            intrinsics: k,
            train,
            holdout,
        })
    }

    pub fn resolve(cfg: &TrainConfig) -> Result<Self> {
        let seq = match &cfg.data {
            DataSource::Synthetic => generate_synthetic_scene(&cfg.scene)?,
            DataSource::Directory(dir) => load_sequence_with(
                dir,
                LoadOptions {
                    temporal_stride: cfg.data_stride,
                },
            )?,
        };
        Self::from_sequence(&seq, cfg.holdout_every)
    }
}

/// A stacked mini-batch: target and both sources, `[B, 3, H, W]` each.
#[derive(Debug, Clone)]
pub struct Batch {
    pub target: Tensor,
    pub sources: [Tensor; 2],
}

fn flipped(image: &ImageFrame) -> ImageFrame {
    let w = image.width();
    ImageFrame::from_fn(w, image.height(), image.channels(), |c, y, x| image.get(c, y, w - 1 - x))
}

impl Batch {
    /// `flip[i]` mirrors snippet `i` horizontally (all three frames).
    pub fn stack(samples: &[&SequenceSample], flip: &[bool]) -> Result<Self> {
        let prep = |im: &ImageFrame, f: bool| -> Result<Tensor> {
            if f {
                flipped(im).to_tensor(TRAIN_DTYPE)
            } else {
                im.to_tensor(TRAIN_DTYPE)
            }
        };
        let mut t = Vec::with_capacity(samples.len());
        let mut s0 = Vec::with_capacity(samples.len());
        let mut s1 = Vec::with_capacity(samples.len());
        for (s, &f) in samples.iter().zip(flip) {
            t.push(prep(&s.target, f)?);
            s0.push(prep(&s.sources[0], f)?);
            s1.push(prep(&s.sources[1], f)?);
        }
        Ok(Self {
            target: Tensor::cat(&t, 0)?,
            sources: [Tensor::cat(&s0, 0)?, Tensor::cat(&s1, 0)?],
        })
    }

    pub fn len(&self) -> Result<usize> {
        Ok(self.target.dim(0)?)
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// The full objective on one batch, with its breakdown.
pub fn batch_loss(
    model: &Model,
    batch: &Batch,
    k: &CameraIntrinsics,
    cfg: &TrainConfig,
    ctx: &mut ForwardCtx,
) -> Result<(Tensor, LossBreakdown)> {
    let b = batch.len()?;
    let [s0, s1] = &batch.sources;
    let all = Tensor::cat(&[&batch.target, s0, s1], 0)?;
    let depth = model.depth.forward(&all, ctx)?.metric;
    let depth_t = depth.narrow(0, 0, b)?;

    let target2 = Tensor::cat(&[&batch.target, &batch.target], 0)?;
    let source2 = Tensor::cat(&[s0, s1], 0)?;
    let depth_t2 = Tensor::cat(&[&depth_t, &depth_t], 0)?;
    let trace = iterative_pose(&model.pose, &target2, &source2, &depth_t2, k, cfg.effective_iters(), ctx)?;
    let t_to_s = trace.target_to_source()?;
    let (views, grid) = warp::synthesize_tensor(&source2, &depth_t2, &t_to_s, k)?;

    let synths: Vec<SynthView> = (0..2)
        .map(|i| -> Result<SynthView> {
            Ok(SynthView {
                image: views.narrow(0, i * b, b)?,
                valid: grid.valid.narrow(0, i * b, b)?,
            })
        })
        .collect::<Result<_>>()?;
    let (photo, keep) = losses::reprojection(
        &batch.target,
        &synths,
        &[s0.clone(), s1.clone()],
        cfg.weights.alpha,
        SourceReduction::Min,
    )?;
    let smooth = losses::smoothness(&depth_t, &batch.target)?;
    let mut consistency = Vec::with_capacity(2);
    for i in 0..2 {
        let depth_s = depth.narrow(0, (i + 1) * b, b)?;
        consistency.push(losses::depth_consistency(&depth_t, &depth_s, &t_to_s.narrow(i * b, b)?, k)?);
    }
    let cons = ((&consistency[0] + &consistency[1])? * 0.5)?;
    let total = losses::weighted_total(&photo, &smooth, &cons, &cfg.weights)?;
    let breakdown = LossBreakdown {
        photometric: scalar(&photo)?,
        smoothness: scalar(&smooth)?,
        consistency: scalar(&cons)?,
        total: scalar(&total)?,
        automask_fraction: keep,
    };
    Ok((total, breakdown))
}

/// Mean held-out depth metrics (frames without ground truth are skipped).
pub fn evaluate(model: &Model, samples: &[SequenceSample], d_max: f64, align: Align) -> Result<Option<DepthMetrics>> {
    let mut rows = Vec::new();
    for s in samples {
        let Some(gt) = &s.gt_depth else { continue };
        let pred = model.predict(&s.target)?;
        rows.push(depth_metrics(&pred.metric, gt, align, &valid_gt_mask(gt, d_max))?);
    }
    if rows.is_empty() {
        return Ok(None);
    }
    DepthMetrics::mean(&rows).map(Some)
}

/// Owns the model, optimizer and data order for one run.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub data: Dataset,
    optimizer: AdamW,
    rng: ChaCha8Rng,
    dropout_seed: u64,
    step: usize,
    epoch: usize,
    order: Vec<usize>,
    cursor: usize,
    log: Vec<StepRecord>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let data = Dataset::resolve(&config)?;
        Self::with_data(config, data)
    }

    pub fn with_data(config: TrainConfig, data: Dataset) -> Result<Self> {
        config.validate()?;
        let model = Model::new(&config)?;
        let optimizer = AdamW::new(
            model.params.vars(),
            ParamsAdamW {
                lr: config.lr_at(0),
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 0.0,
            },
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
        let dropout_seed = rng.random();
        let mut t = Self {
            config,
            model,
            data,
            optimizer,
            rng,
            dropout_seed,
            step: 0,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
            log: Vec::new(),
        };
        t.reshuffle();
        Ok(t)
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.data.train.len()).collect();
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.data.train.len().div_ceil(self.config.batch_size)
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn log(&self) -> &[StepRecord] {
        &self.log
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr_at(self.epoch)
    }

    fn next_batch(&mut self) -> Result<Batch> {
        let end = (self.cursor + self.config.batch_size).min(self.order.len());
        let idx: Vec<usize> = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        let flips: Vec<bool> = idx
            .iter()
            .map(|_| self.config.augment && self.rng.random_bool(0.5))
            .collect();
        let samples: Vec<&SequenceSample> = idx.iter().map(|&i| &self.data.train[i]).collect();
        Batch::stack(&samples, &flips)
    }

    /// The objective on a batch without touching any parameter.
    pub fn frozen_loss(&self, batch: &Batch) -> Result<LossBreakdown> {
        let mut ctx = ForwardCtx::train(self.dropout_seed);
        Ok(batch_loss(&self.model, batch, &self.data.intrinsics, &self.config, &mut ctx)?.1)
    }

    /// One optimizer step on the next batch of the current epoch.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        if self.cursor >= self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        let batch = self.next_batch()?;
        let lr = self.current_lr();
        self.optimizer.set_learning_rate(lr);
        let mut ctx = ForwardCtx::train(self.dropout_seed.wrapping_add(self.step as u64));
        let (total, loss) = batch_loss(&self.model, &batch, &self.data.intrinsics, &self.config, &mut ctx)?;
        if !loss.is_finite() {
            log::error!("non-finite loss at step {}: {loss}", self.step);
            return Err(Error::NonFiniteLoss { step: self.step, breakdown: loss });
        }
        self.optimizer.backward_step(&total)?;
        let record = StepRecord {
            step: self.step,
            epoch: self.epoch,
            lr,
            loss,
        };
        self.log.push(record);
        self.step += 1;
        Ok(record)
    }

    /// Total steps the configuration asks for.
    pub fn planned_steps(&self) -> usize {
        let full = self.config.epochs * self.steps_per_epoch();
        self.config.max_steps.map_or(full, |m| m.min(full))
    }

    /// Whether the step just taken closed an epoch that should be checkpointed.
    fn checkpoint_due(&self) -> bool {
        let every = self.config.checkpoint_every;
        every > 0 && self.cursor >= self.order.len() && (self.epoch + 1) % every == 0
    }

    pub fn evaluate_holdout(&self, align: Align) -> Result<Option<DepthMetrics>> {
        evaluate(&self.model, &self.data.holdout, self.config.bins.d_max, align)
    }

    pub fn save(&self, dir: &Path) -> Result<CheckpointManifest> {
        let metrics = self.evaluate_holdout(Align::None)?;
        save_checkpoint(dir, &self.model, &self.config, self.epoch, self.step, metrics)
    }
}

/// Result of a complete run.
pub struct TrainOutcome {
    pub manifest: CheckpointManifest,
    pub checkpoint: PathBuf,
    pub log: Vec<StepRecord>,
    pub trainer: Trainer,
}

/// Writes the loss log as CSV.
pub fn write_loss_log(path: &Path, log: &[StepRecord]) -> Result<()> {
    let mut text = String::from("step,epoch,lr,total,photometric,smoothness,consistency,automask_fraction\n");
    for r in log {
        let l = &r.loss;
        text.push_str(&format!(
            "{},{},{},{:.9},{:.9},{:.9},{:.9},{:.6}\n",
            r.step, r.epoch, r.lr, l.total, l.photometric, l.smoothness, l.consistency, l.automask_fraction
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains to completion, checkpointing into `out/checkpoints/`; the final
/// checkpoint goes to `out/checkpoint`.
pub fn train(cfg: TrainConfig, out: &Path) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg)?;
    run(&mut trainer, out)?;
    let checkpoint = out.join("checkpoint");
    let manifest = trainer.save(&checkpoint)?;
    write_loss_log(&out.join("loss_log.csv"), trainer.log())?;
    Ok(TrainOutcome {
        manifest,
        checkpoint,
        log: trainer.log().to_vec(),
        trainer,
    })
}

fn run(trainer: &mut Trainer, out: &Path) -> Result<()> {
    let total = trainer.planned_steps();
    log::info!(
        "training {} steps ({} per epoch, {} train / {} held-out samples)",
        total,
        trainer.steps_per_epoch(),
        trainer.data.train.len(),
        trainer.data.holdout.len()
    );
    for _ in 0..total {
        let r = trainer.train_step()?;
        if r.step % 10 == 0 {
            log::info!("step {:>5} epoch {:>3} lr {:.1e} {}", r.step, r.epoch, r.lr, r.loss);
        }
        if trainer.checkpoint_due() {
            let dir = out.join("checkpoints").join(format!("epoch_{:04}", trainer.epoch() + 1));
            trainer.save(&dir)?;
        }
    }
    Ok(())
}

/// One row of the ablation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub factorization: bool,
    pub residual_pose: bool,
    pub metrics: DepthMetrics,
    pub metrics_median: DepthMetrics,
}

/// Variant names in table order.
pub const ABLATION_GRID: [(&str, bool, bool); 4] = [
    ("backbone", false, false),
    ("+ depth factorization", true, false),
    ("+ residual pose", false, true),
    ("full", true, true),
];

/// Trains one variant per `(factorization, residual_pose)` toggle pair under
/// identical seeds and evaluates on the held-out frames.
pub fn ablate(cfg: &TrainConfig, variants: &[(&str, bool, bool)], out: Option<&Path>) -> Result<Vec<AblationRow>> {
    let data = Dataset::resolve(cfg)?;
    if data.holdout.iter().all(|s| s.gt_depth.is_none()) {
        return Err(Error::Config("ablation needs held-out frames with ground truth".into()));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for &(name, factorization, residual_pose) in variants {
        let variant = TrainConfig {
            factorization,
            residual_pose,
            ..cfg.clone()
        };
        log::info!("ablation variant '{name}'");
        let mut trainer = Trainer::with_data(variant, data.clone())?;
        if let Some(dir) = out {
            let sub = dir.join(name.trim_start_matches("+ ").replace(' ', "_"));
            run(&mut trainer, &sub)?;
            write_loss_log_dir(&sub, trainer.log())?;
        } else {
            for _ in 0..trainer.planned_steps() {
                trainer.train_step()?;
            }
        }
        let missing = || Error::Config("no ground truth in held-out frames".into());
        rows.push(AblationRow {
            name: name.to_string(),
            factorization,
            residual_pose,
            metrics: trainer.evaluate_holdout(Align::None)?.ok_or_else(missing)?,
            metrics_median: trainer.evaluate_holdout(Align::Median)?.ok_or_else(missing)?,
        });
    }
    Ok(rows)
}

fn write_loss_log_dir(dir: &Path, log: &[StepRecord]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_loss_log(&dir.join("loss_log.csv"), log)
}

/// Text table of an ablation; `median` selects the median-aligned metrics.
pub fn ablation_table(rows: &[AblationRow], median: bool) -> String {
    let rows: Vec<MetricRow> = rows
        .iter()
        .map(|r| MetricRow {
            name: r.name.clone(),
            metrics: if median { r.metrics_median } else { r.metrics },
        })
        .collect();
    format_table(&rows, "RMSE")
}
