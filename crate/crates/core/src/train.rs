//! Optimizer, schedules and the training loop.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{anchors_for, decode_predictions, tal_assign, AssignConfig, AssignmentResult};
use crate::autograd::Tape;
use crate::detmodel::{load_checkpoint, save_checkpoint, DetModel, RawPredictions};
use crate::error::{Error, Result};
use crate::evalmetrics::{evaluate_all, EvalConfig, EvalReport};
use crate::losses::{total_loss, FrameTargets, LossBreakdown, LossConfig, LossWeights, COMPONENT_NAMES};
use crate::nn::ParamStore;
use crate::postprocess::{postprocess_pipeline, Detection, PostprocessConfig};
use crate::raddata::{compute_class_weights, resize_frame, ClassWeightConfig, FrameRecord};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_min: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    /// Time constant of the EMA warm-up, in steps; 0 uses `ema_decay` from the first step.
    pub ema_ramp_steps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub shuffle: bool,
    pub phase2: bool,
    /// Checkpoint to start from, used for the second training round.
    pub init_checkpoint: Option<PathBuf>,
    pub val_fraction: f64,
    /// Validate every this many epochs; 0 validates only at the end.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 1e-3,
            lr_min: 1e-5,
            warmup_ratio: 0.05,
            epochs: 100,
            max_steps: None,
            batch_size: 4,
            beta1: 0.937,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            ema_decay: 0.9999,
            ema_ramp_steps: 2000.0,
            grad_clip: Some(10.0),
            seed: 0,
            shuffle: true,
            phase2: false,
            init_checkpoint: None,
            val_fraction: 0.2,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad(format!("warmup_ratio {} outside [0, 1)", self.warmup_ratio));
        }
        if !(self.lr_min >= 0.0 && self.lr_min < self.lr_init) {
            return bad(format!("need 0 <= lr_min < lr_init, got {} and {}", self.lr_min, self.lr_init));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return bad("Adam needs betas in [0, 1) and a positive epsilon".into());
        }
        if !(0.0..=1.0).contains(&self.ema_decay) || self.ema_ramp_steps < 0.0 {
            return bad("ema_decay must lie in [0, 1] and ema_ramp_steps be non-negative".into());
        }
        if self.weight_decay < 0.0 || self.grad_clip.is_some_and(|c| c <= 0.0) {
            return bad("weight_decay must be non-negative and grad_clip positive".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        Ok(())
    }

    /// EMA decay used at a given (1-based) step.
    pub fn ema_decay_at(&self, step: usize) -> f64 {
        if self.ema_ramp_steps > 0.0 {
            self.ema_decay * (1.0 - (-(step as f64) / self.ema_ramp_steps).exp())
        } else {
            self.ema_decay
        }
    }
}

/// Linear warmup from 0, then cosine from `lr_init` down to `lr_min` at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let warm = (cfg.warmup_ratio * total_steps as f64).round() as usize;
    if step < warm {
        return cfg.lr_init * step as f64 / warm as f64;
    }
    let span = total_steps.saturating_sub(warm);
    if span == 0 {
        return cfg.lr_min;
    }
    let p = ((step - warm) as f64 / span as f64).min(1.0);
    cfg.lr_min + 0.5 * (cfg.lr_init - cfg.lr_min) * (1.0 + (std::f64::consts::PI * p).cos())
}

/// `ema <- decay * ema + (1 - decay) * model`, elementwise.
pub fn ema_update<T: Scalar>(ema: &mut ParamStore<T>, model: &ParamStore<T>, decay: f64) {
    let d = T::lit(decay);
    let e = T::one() - d;
    for id in model.ids() {
        let src = model.get(id).data();
        for (a, &b) in ema.get_mut(id).data_mut().iter_mut().zip(src) {
            *a = d * *a + e * b;
        }
    }
}

/// Adam; weight decay is added to the gradient as an L2 term.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|(_, _, p)| vec![T::zero(); p.len()]).collect();
        Self { beta1, beta2, eps, weight_decay, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = T::lit(lr * c2.sqrt() / c1);
        let eps = T::lit(self.eps * c2.sqrt());
        let wd = T::lit(self.weight_decay);
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let p = params.get_mut(id).data_mut();
            for (((p, &g), m), v) in p.iter_mut().zip(g.data()).zip(&mut self.m[i]).zip(&mut self.v[i]) {
                let g = g + wd * *p;
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p = *p - step * *m / (v.sqrt() + eps);
            }
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().flat_map(|g| g.data()).map(|&x| x.f64() * x.f64()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x = *x * s);
        }
    }
    norm
}

/// One optimizer step's record.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub breakdown: LossBreakdown,
    pub num_positives: usize,
    pub grad_norm: f64,
}

pub fn loss_log_header() -> String {
    format!("step\tepoch\tlr\ttotal\t{}\tnum_pos\tgrad_norm", COMPONENT_NAMES.join("\t"))
}

/// Tab-separated rows; floats use shortest round-trip formatting, so equal text means equal bits.
pub fn format_loss_log(log: &[StepLog]) -> String {
    let mut out = loss_log_header();
    out.push('\n');
    for s in log {
        let _ = write!(out, "{}\t{}\t{}\t{}", s.step, s.epoch, s.lr, s.breakdown.total);
        for c in &s.breakdown.components {
            let _ = write!(out, "\t{c}");
        }
        let _ = writeln!(out, "\t{}\t{}", s.num_positives, s.grad_norm);
    }
    out
}

/// Deterministic 80/20-style split by the FNV-1a hash of each frame id.
/// Returns `(train, val)` index lists; validation may be empty for tiny sets.
pub fn split_train_val(frame_ids: &[String], val_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let fnv = |s: &str| s.bytes().fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3));
    let mut order: Vec<usize> = (0..frame_ids.len()).collect();
    order.sort_by(|&a, &b| fnv(&frame_ids[a]).cmp(&fnv(&frame_ids[b])).then(frame_ids[a].cmp(&frame_ids[b])));
    let n_val = ((frame_ids.len() as f64 * val_fraction).round() as usize).min(frame_ids.len().saturating_sub(1));
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Resizes every frame to the model's Doppler depth.
pub fn prepare_frames<T: Scalar>(frames: &[FrameRecord<T>], doppler_bins: usize) -> Result<Vec<FrameRecord<T>>> {
    frames
        .iter()
        .map(|f| if f.cube.shape()[2] == doppler_bins { Ok(f.clone()) } else { resize_frame(f, doppler_bins) })
        .collect()
}

/// Inverse-frequency weights from the annotations of `frames`; absent classes count once.
pub fn class_weights_for<T>(frames: &[&FrameRecord<T>], num_classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0u64; num_classes];
    for a in frames.iter().flat_map(|f| &f.annotations) {
        if a.class_id >= num_classes {
            return Err(Error::InvalidArgument(format!("class id {} >= {num_classes}", a.class_id)));
        }
        counts[a.class_id] += 1;
    }
    counts.iter_mut().filter(|c| **c == 0).for_each(|c| *c = 1);
    compute_class_weights(&ClassWeightConfig::new(counts))
}

/// Model, EMA copy and optimizer state.
pub struct Trainer<T: Scalar> {
    pub cfg: TrainConfig,
    pub loss_cfg: LossConfig,
    pub assign_cfg: AssignConfig,
    pub model: DetModel<T>,
    pub ema: ParamStore<T>,
    pub class_weights: Vec<f64>,
    pub total_steps: usize,
    pub step: usize,
    pub log: Vec<StepLog>,
    opt: Adam<T>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(
        cfg: TrainConfig,
        mut loss_cfg: LossConfig,
        assign_cfg: AssignConfig,
        model: DetModel<T>,
        class_weights: Vec<f64>,
        total_steps: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        assign_cfg.validate()?;
        if cfg.phase2 {
            loss_cfg.weights.alpha[..2].copy_from_slice(&LossWeights::phase2().alpha[..2]);
        }
        loss_cfg.weights.validate()?;
        if class_weights.len() != model.config.num_classes {
            return Err(Error::Config(format!(
                "{} class weights for {} classes",
                class_weights.len(),
                model.config.num_classes
            )));
        }
        let opt = Adam::new(&model.params, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
        Ok(Self { ema: model.params.clone(), cfg, loss_cfg, assign_cfg, model, class_weights, total_steps, step: 0, log: Vec::new(), opt })
    }

    /// Forward, assignment, loss, backward and one Adam update on `batch`.
    pub fn train_step(&mut self, batch: &[&FrameRecord<T>], epoch: usize) -> Result<&StepLog> {
        let lr = lr_at(self.step, self.total_steps, &self.cfg);
        let (mut grads, breakdown, num_positives) = {
            let tape = Tape::new();
            let d = self.model.config.doppler_bins();
            let preds: Vec<RawPredictions<'_, T>> =
                batch.iter().map(|f| self.model.forward(&tape, tape.constant(f.cube.to_input()))).collect::<Result<_>>()?;
            let assigns: Vec<AssignmentResult> = preds
                .iter()
                .zip(batch)
                .map(|(p, f)| tal_assign(&anchors_for(p), &decode_predictions(p, d), &f.annotations, &self.assign_cfg))
                .collect::<Result<_>>()?;
            let frames: Vec<FrameTargets<'_, '_, T>> =
                preds.iter().zip(&assigns).map(|(preds, assign)| FrameTargets { preds, assign }).collect();
            let out = total_loss(&tape, &frames, &self.class_weights, d, &self.loss_cfg)?;
            if !out.breakdown.total.is_finite() {
                return Err(Error::InvalidArgument(format!("non-finite loss at step {}", self.step + 1)));
            }
            (tape.backward(out.total).into_param_grads(&self.model.params), out.breakdown, out.num_positives)
        };
        let grad_norm = clip_grad_norm(&mut grads, self.cfg.grad_clip.unwrap_or(f64::INFINITY));
        self.opt.step(&mut self.model.params, &grads, lr);
        self.step += 1;
        ema_update(&mut self.ema, &self.model.params, self.cfg.ema_decay_at(self.step));
        self.log.push(StepLog { step: self.step, epoch, lr, breakdown, num_positives, grad_norm });
        Ok(self.log.last().expect("just pushed"))
    }

    /// The model with its EMA weights.
    pub fn ema_model(&self) -> DetModel<T> {
        let mut m = self.model.clone();
        m.params = self.ema.clone();
        m
    }
}

/// Detections of one frame through the full postprocessing pipeline.
pub fn detect_frame<T: Scalar>(model: &DetModel<T>, frame: &FrameRecord<T>, post: &PostprocessConfig) -> Result<Vec<Detection>> {
    let tape = Tape::inference();
    let preds = model.forward(&tape, tape.constant(frame.cube.to_input()))?;
    Ok(postprocess_pipeline(&preds, frame.cube.shape(), post))
}

/// Detections for every frame (in parallel) and the resulting metric tables.
pub fn evaluate_model<T: Scalar>(
    model: &DetModel<T>,
    frames: &[&FrameRecord<T>],
    post: &PostprocessConfig,
    eval: &EvalConfig,
) -> Result<(EvalReport, Vec<Vec<Detection>>)> {
    let dets: Vec<Vec<Detection>> = frames.par_iter().map(|f| detect_frame(model, f, post)).collect::<Result<_>>()?;
    let gts: Vec<_> = frames.iter().map(|f| f.annotations.clone()).collect();
    Ok((evaluate_all(&dets, &gts, eval)?, dets))
}

/// Everything `train` produces.
pub struct TrainOutcome<T: Scalar> {
    pub trainer: Trainer<T>,
    /// Best validation 3D mAP at the lowest 3D threshold, if validation ran.
    pub best_map: Option<f64>,
    pub final_report: Option<EvalReport>,
}

/// Where `train` writes its artifacts.
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub dir: PathBuf,
}

impl TrainOutputs {
    pub fn best(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }
    pub fn last(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }
    pub fn loss_log(&self) -> PathBuf {
        self.dir.join("loss_log.tsv")
    }
}

/// Full training run on already-loaded frames.
#[allow(clippy::too_many_arguments)]
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    model: DetModel<T>,
    loss_cfg: &LossConfig,
    assign_cfg: &AssignConfig,
    post: &PostprocessConfig,
    eval: &EvalConfig,
    frames: &[FrameRecord<T>],
    outputs: Option<&TrainOutputs>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    post.validate()?;
    eval.validate()?;
    if frames.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let model = match &cfg.init_checkpoint {
        Some(p) => {
            let m: DetModel<T> = load_checkpoint(p)?;
            if m.config != model.config {
                return Err(Error::Config(format!("{} was trained with a different model config", p.display())));
            }
            m
        }
        None => model,
    };
    let frames = prepare_frames(frames, model.config.doppler_bins())?;
    let ids: Vec<String> = frames.iter().map(|f| f.frame_id.clone()).collect();
    let (mut train_idx, val_idx) = split_train_val(&ids, cfg.val_fraction);
    let val: Vec<&FrameRecord<T>> = if val_idx.is_empty() {
        train_idx.iter().map(|&i| &frames[i]).collect()
    } else {
        val_idx.iter().map(|&i| &frames[i]).collect()
    };
    let train_frames: Vec<&FrameRecord<T>> = train_idx.iter().map(|&i| &frames[i]).collect();
    let weights = class_weights_for(&train_frames, model.config.num_classes)?;

    let per_epoch = train_idx.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.max_steps.map_or(per_epoch * cfg.epochs, |m| m.min(per_epoch * cfg.epochs));
    let mut trainer = Trainer::new(cfg.clone(), loss_cfg.clone(), assign_cfg.clone(), model, weights, total_steps)?;
    info!("training on {} frames, validating on {}, {total_steps} steps", train_idx.len(), val.len());
    if let Some(o) = outputs {
        fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best_map: Option<f64> = None;
    let mut final_report = None;
    let mut epoch = 0;
    while trainer.step < total_steps {
        epoch += 1;
        if cfg.shuffle {
            train_idx.shuffle(&mut rng);
        }
        for chunk in train_idx.chunks(cfg.batch_size) {
            if trainer.step >= total_steps {
                break;
            }
            let batch: Vec<&FrameRecord<T>> = chunk.iter().map(|&i| &frames[i]).collect();
            let s = trainer.train_step(&batch, epoch)?;
            info!("step {} epoch {epoch} lr {:.3e} loss {:.5} pos {}", s.step, s.lr, s.breakdown.total, s.num_positives);
        }
        let last = trainer.step >= total_steps;
        if last || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0) {
            let ema = trainer.ema_model();
            let (report, _) = evaluate_model(&ema, &val, post, eval)?;
            let map = report.rad.map_per_threshold.first().copied().unwrap_or(0.0);
            info!("epoch {epoch}: val 3D mAP@{} = {map:.4}", eval.iou_thresholds_3d[0]);
            if best_map.map_or(true, |b| map > b) {
                best_map = Some(map);
                if let Some(o) = outputs {
                    save_checkpoint(&ema, &o.best())?;
                }
            }
            final_report = Some(report);
        }
    }
    if let Some(o) = outputs {
        save_checkpoint(&trainer.ema_model(), &o.last())?;
        fs::write(o.loss_log(), format_loss_log(&trainer.log)).map_err(|e| Error::io(o.loss_log(), e))?;
    }
    Ok(TrainOutcome { trainer, best_map, final_report })
}

/// Runs `f` on a single-threaded pool so every reduction happens in one order.
pub fn run_deterministic<R: Send>(f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// True when `TRANSRAD_DETERMINISTIC` is set to `1`.
pub fn deterministic_from_env() -> bool {
    std::env::var("TRANSRAD_DETERMINISTIC").is_ok_and(|v| v.trim() == "1")
}
