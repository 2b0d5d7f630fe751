//! Mean-teacher self-training with cross-domain instance mixing.
//!
//! Each step pseudo-labels target boxes with the teacher, mixes source
//! instances into target clips, and minimizes `L_S + L_M`: source
//! cross-entropy plus the mixed-clip cross-entropy scaled per clip by the
//! fraction of confident pseudo-labels. The student is updated by SGD and
//! the teacher follows as an exponential moving average.

mod optim;

pub use optim::{lr_at, sgd_update, warmup_lr};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clipstore::{cap_per_class, extend_source, Annotation, DataError, DatasetIndex, Origin, Sample};
use crate::config::ConfigError;
use crate::evaluator::{confusion_matrix, evaluate_model, ConfusionMatrix, EvalError};
use crate::geometry::BBox;
use crate::mixer::{aim_mix, MixConfig, MixError, PseudoLabel};
use crate::model::{argmax, ema_update_in_place, extract_features, FeatureVector, ModelError, ModelParams, ModelShape};
use crate::rng::{stream, Purpose};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mix(#[from] MixError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Inconsistent(String),
    #[error("parameter shapes differ")]
    ShapeMismatch,
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("empty batch")]
    EmptyBatch,
}

/// Whether the adaptive weight is computed per mixed clip or once per batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LambdaScope {
    Clip,
    Batch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_base: f64,
    pub lr_final_ratio: f64,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub ema_alpha: f64,
    pub conf_threshold: f64,
    pub expand_factor: f64,
    pub discard_threshold: f64,
    pub downscale_area_ratio: f64,
    pub class_cap: usize,
    pub seed: u64,
    pub enable_mix: bool,
    pub enable_pseudo: bool,
    pub enable_resize: bool,
    pub lambda_scope: LambdaScope,
    pub hidden_dim: usize,
    pub pool_grid: usize,
    /// Uniform perturbation of target boxes, as a fraction of box size.
    pub target_box_jitter: f64,
    pub iou_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_base: 1.25e-2,
            lr_final_ratio: 0.01,
            warmup_epochs: 1,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 1e-7,
            epochs: 100,
            batch_size: 8,
            ema_alpha: 0.99,
            conf_threshold: 0.9,
            expand_factor: 0.2,
            discard_threshold: 0.4,
            downscale_area_ratio: 0.5,
            class_cap: 5000,
            seed: 42,
            enable_mix: true,
            enable_pseudo: true,
            enable_resize: true,
            lambda_scope: LambdaScope::Clip,
            hidden_dim: 64,
            pool_grid: 8,
            target_box_jitter: 0.0,
            iou_threshold: 0.5,
        }
    }
}

impl TrainConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if !(self.lr_base > 0.0) {
            return bad("lr_base must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return bad("ema_alpha must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.conf_threshold) {
            return bad("conf_threshold must lie in [0, 1]");
        }
        if self.batch_size == 0 || self.hidden_dim == 0 || self.pool_grid == 0 || self.class_cap == 0 {
            return bad("batch_size, hidden_dim, pool_grid and class_cap must be positive");
        }
        if self.expand_factor < 0.0 || self.weight_decay < 0.0 || self.lr_final_ratio < 0.0 {
            return bad("expand_factor, weight_decay and lr_final_ratio must be non-negative");
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return bad("iou_threshold must lie in (0, 1]");
        }
        if self.target_box_jitter < 0.0 {
            return bad("target_box_jitter must be non-negative");
        }
        Ok(())
    }

    /// Baseline without any adaptation component.
    pub fn source_only(self) -> Self {
        TrainConfig { enable_mix: false, enable_pseudo: false, enable_resize: false, ..self }
    }

    pub fn mix_config(&self) -> MixConfig {
        MixConfig {
            expand_factor: self.expand_factor,
            discard_threshold: self.discard_threshold,
            downscale_area_ratio: self.downscale_area_ratio,
            enable_resize: self.enable_resize,
        }
    }
}

/// Student, teacher and optimizer state. Randomness is derived from
/// `(seed, step)`, so the step counter is the whole RNG state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub student: ModelParams,
    pub teacher: ModelParams,
    pub momentum: ModelParams,
    pub step: usize,
    pub seed: u64,
    pub lambda_history: Vec<f64>,
}

impl TrainState {
    pub fn new(shape: ModelShape, seed: u64) -> Self {
        let student = ModelParams::init(shape, &mut stream(seed, Purpose::Init, 0));
        TrainState {
            teacher: student.clone(),
            momentum: ModelParams::zeros(shape),
            student,
            step: 0,
            seed,
            lambda_history: Vec::new(),
        }
    }
}

/// A sample with features precomputed for each of its annotation boxes.
#[derive(Debug, Clone)]
pub struct FeaturedSample {
    pub sample: Sample,
    pub features: Vec<FeatureVector>,
}

impl FeaturedSample {
    pub fn new(sample: Sample, grid: usize) -> Result<Self, ModelError> {
        let features = sample
            .annotations
            .iter()
            .map(|a| extract_features(&sample.clip, &a.bbox, grid))
            .collect::<Result<_, _>>()?;
        Ok(FeaturedSample { sample, features })
    }
}

fn featurize(ds: &DatasetIndex, grid: usize) -> Result<Vec<FeaturedSample>, ModelError> {
    ds.samples().par_iter().map(|s| FeaturedSample::new(s.clone(), grid)).collect()
}

/// Teacher argmax (ties to the lowest class) and its probability for each box.
pub fn pseudo_label(teacher: &ModelParams, clip: &crate::clipstore::Clip, boxes: &[BBox]) -> Result<Vec<PseudoLabel>, ModelError> {
    let feats = boxes
        .iter()
        .map(|b| extract_features(clip, b, teacher.shape.grid))
        .collect::<Result<Vec<_>, _>>()?;
    pseudo_label_features(teacher, &feats.iter().collect::<Vec<_>>())
}

pub fn pseudo_label_features(teacher: &ModelParams, feats: &[&FeatureVector]) -> Result<Vec<PseudoLabel>, ModelError> {
    Ok(teacher
        .forward_batch(feats)?
        .iter()
        .map(|p| {
            let (label, confidence) = argmax(p);
            PseudoLabel { label, confidence }
        })
        .collect())
}

/// Fraction of confidences at or above `threshold`; 1 for an empty list.
pub fn compute_lambda(confidences: &[f64], threshold: f64) -> f64 {
    if confidences.is_empty() {
        return 1.0;
    }
    confidences.iter().filter(|&&c| c >= threshold).count() as f64 / confidences.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub source_loss: f64,
    pub mixed_loss: f64,
    /// One weight per mixed clip that carried supervision.
    pub lambdas: Vec<f64>,
    pub kept_targets: usize,
    pub discarded: usize,
    pub downscaled: usize,
}

/// Supervision drawn from one mixed (or pseudo-labeled target) clip.
struct MixedTerm {
    features: Vec<FeatureVector>,
    labels: Vec<usize>,
    target_confidences: Vec<f64>,
    kept_targets: usize,
    discarded: usize,
    downscaled: bool,
}

fn target_only_term(target: &FeaturedSample, pseudo: &[PseudoLabel]) -> MixedTerm {
    MixedTerm {
        features: target.features.clone(),
        labels: pseudo.iter().map(|p| p.label).collect(),
        target_confidences: pseudo.iter().map(|p| p.confidence).collect(),
        kept_targets: pseudo.len(),
        discarded: 0,
        downscaled: false,
    }
}

fn mixed_term(
    source: &FeaturedSample,
    target: &FeaturedSample,
    pseudo: &[PseudoLabel],
    cfg: &TrainConfig,
    rng_index: u64,
    grid: usize,
) -> Result<Option<MixedTerm>, TrainError> {
    let mut rng = stream(cfg.seed, Purpose::InstanceSelect, rng_index);
    let mixed = match aim_mix(&source.sample, &target.sample, pseudo, &mut rng, &cfg.mix_config()) {
        Ok(m) => m,
        Err(MixError::NoInstances) => {
            return Ok(cfg.enable_pseudo.then(|| target_only_term(target, pseudo)));
        }
        Err(e) => return Err(e.into()),
    };
    let mut term = MixedTerm {
        features: Vec::new(),
        labels: Vec::new(),
        target_confidences: Vec::new(),
        kept_targets: 0,
        discarded: mixed.discarded_count,
        downscaled: mixed.downscaled,
    };
    let mut confidences = mixed.kept_target_confidences.iter();
    for a in &mixed.annotations {
        let conf = (a.origin == Origin::Target).then(|| *confidences.next().expect("aligned confidences"));
        if conf.is_some() && !cfg.enable_pseudo {
            continue;
        }
        if a.bbox.area() <= 0.0 {
            continue;
        }
        term.features.push(extract_features(&mixed.clip, &a.bbox, grid)?);
        term.labels.push(a.class_id);
        if let Some(c) = conf {
            term.target_confidences.push(c);
            term.kept_targets += 1;
        }
    }
    Ok(Some(term))
}

fn add_scaled(acc: &mut ModelParams, g: &ModelParams, scale: f64) {
    for (a, b) in acc.tensors_mut().into_iter().zip(g.tensors()) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += scale * y;
        }
    }
}

/// One iteration: pseudo-label, mix, compute `L_S + L_M`, SGD, EMA.
pub fn train_step(
    state: &mut TrainState,
    source_batch: &[&FeaturedSample],
    target_batch: &[&FeaturedSample],
    cfg: &TrainConfig,
    steps_per_epoch: usize,
) -> Result<StepMetrics, TrainError> {
    if source_batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let grid = state.student.shape.grid;
    let step = state.step;

    let pseudo: Vec<Vec<PseudoLabel>> = if cfg.enable_mix || cfg.enable_pseudo {
        target_batch
            .iter()
            .map(|t| pseudo_label_features(&state.teacher, &t.features.iter().collect::<Vec<_>>()))
            .collect::<Result<_, _>>()?
    } else {
        Vec::new()
    };

    let terms: Vec<MixedTerm> = if cfg.enable_mix && !target_batch.is_empty() {
        target_batch
            .par_iter()
            .enumerate()
            .map(|(i, t)| {
                let s = source_batch[i % source_batch.len()];
                mixed_term(s, t, &pseudo[i], cfg, (step as u64) << 16 | i as u64, grid)
            })
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .flatten()
            .collect()
    } else if cfg.enable_pseudo {
        target_batch.iter().zip(&pseudo).map(|(t, p)| target_only_term(t, p)).collect()
    } else {
        Vec::new()
    };
    let terms: Vec<MixedTerm> = terms.into_iter().filter(|t| !t.features.is_empty()).collect();

    let lambdas: Vec<f64> = match cfg.lambda_scope {
        LambdaScope::Clip => terms.iter().map(|t| compute_lambda(&t.target_confidences, cfg.conf_threshold)).collect(),
        LambdaScope::Batch => {
            let all: Vec<f64> = terms.iter().flat_map(|t| t.target_confidences.iter().copied()).collect();
            vec![compute_lambda(&all, cfg.conf_threshold); terms.len()]
        }
    };

    let student = &state.student;
    let mut grads = ModelParams::zeros(student.shape);
    let source_items: Vec<(&FeatureVector, usize, f64)> = source_batch
        .iter()
        .flat_map(|s| s.features.iter().zip(&s.sample.annotations).map(|(f, a)| (f, a.class_id, 1.0)))
        .collect();
    let source_loss = if source_items.is_empty() {
        0.0
    } else {
        let (l, g) = student.loss_and_grad(&source_items)?;
        add_scaled(&mut grads, &g, 1.0);
        l
    };

    let clip_results: Vec<(f64, ModelParams)> = terms
        .par_iter()
        .map(|t| {
            let items: Vec<(&FeatureVector, usize, f64)> =
                t.features.iter().zip(&t.labels).map(|(f, &l)| (f, l, 1.0)).collect();
            student.loss_and_grad(&items)
        })
        .collect::<Result<_, _>>()?;
    let mut mixed_loss = 0.0;
    if !clip_results.is_empty() {
        let n = clip_results.len() as f64;
        for ((l, g), &lambda) in clip_results.iter().zip(&lambdas) {
            mixed_loss += lambda * l / n;
            if lambda != 0.0 {
                add_scaled(&mut grads, g, lambda / n);
            }
        }
    }
    let loss = source_loss + mixed_loss;
    if !loss.is_finite() {
        return Err(TrainError::NonFinite("loss"));
    }

    let lr = lr_at(step, steps_per_epoch, cfg);
    sgd_update(&mut state.student, &grads, &mut state.momentum, lr, cfg)?;
    ema_update_in_place(&mut state.teacher, &state.student, cfg.ema_alpha)?;
    state.step += 1;
    if !lambdas.is_empty() {
        state.lambda_history.push(lambdas.iter().sum::<f64>() / lambdas.len() as f64);
    }

    Ok(StepMetrics {
        step,
        lr,
        loss,
        source_loss,
        mixed_loss,
        kept_targets: terms.iter().map(|t| t.kept_targets).sum(),
        discarded: terms.iter().map(|t| t.discarded).sum(),
        downscaled: terms.iter().filter(|t| t.downscaled).count(),
        lambdas,
    })
}

/// Per-epoch record written to `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub target_map: f64,
    pub per_class_ap: BTreeMap<usize, f64>,
    pub mean_lambda: f64,
    pub discard_rate: f64,
    pub lr: f64,
    pub loss: f64,
    pub pseudo_label_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub student: ModelParams,
    pub teacher: ModelParams,
    pub epochs: Vec<EpochMetrics>,
    pub steps: Vec<StepMetrics>,
    pub lambda_history: Vec<f64>,
    /// Teacher pseudo-labels vs hidden truth on the target training boxes, after training.
    pub pseudo_confusion: ConfusionMatrix,
}

fn jitter_boxes(ds: &DatasetIndex, amount: f64, seed: u64) -> Result<DatasetIndex, DataError> {
    let mut rng = stream(seed, Purpose::TargetJitter, 0);
    let samples = ds
        .samples()
        .iter()
        .map(|s| {
            let (w, h) = (s.clip.width, s.clip.height);
            let annotations = s
                .annotations
                .iter()
                .map(|a| {
                    let b = a.bbox;
                    let (bw, bh) = (b.width(), b.height());
                    let mut d = || rng.gen_range(-amount..=amount);
                    let moved = BBox::new(b.x1 + d() * bw, b.y1 + d() * bh, b.x2 + d() * bw, b.y2 + d() * bh);
                    let mut moved = BBox::new(moved.x1.min(moved.x2), moved.y1.min(moved.y2), moved.x1.max(moved.x2), moved.y1.max(moved.y2)).clamp(w, h);
                    if moved.area() <= 0.0 {
                        moved = b;
                    }
                    Annotation { bbox: moved, ..*a }
                })
                .collect();
            Sample { annotations, ..s.clone() }
        })
        .collect();
    DatasetIndex::new(ds.domain(), ds.num_classes(), samples)
}

fn check_inputs(source: &DatasetIndex, target: &DatasetIndex, val: Option<&DatasetIndex>) -> Result<(), TrainError> {
    if source.is_empty() || target.is_empty() {
        return Err(TrainError::Inconsistent("source and target datasets must be non-empty".into()));
    }
    if source.num_annotations() == 0 {
        return Err(TrainError::Inconsistent("source dataset has no annotations".into()));
    }
    for other in std::iter::once(target).chain(val) {
        if other.num_classes() != source.num_classes() {
            return Err(DataError::ClassCountMismatch(source.num_classes(), other.num_classes()).into());
        }
    }
    let first = &source.samples()[0].clip;
    let all = source.samples().iter().chain(target.samples()).chain(val.into_iter().flat_map(|v| v.samples()));
    for s in all {
        if !s.clip.same_dims(first) {
            return Err(TrainError::Inconsistent(format!(
                "clip {} has dims {}x{}x{}x{}, expected {}x{}x{}x{}",
                s.sample_id, s.clip.frames, s.clip.height, s.clip.width, s.clip.channels,
                first.frames, first.height, first.width, first.channels
            )));
        }
    }
    Ok(())
}

/// Run the full training loop.
///
/// `target` supplies boxes only; its labels are used solely for the reported
/// pseudo-label accuracy. Evaluation runs on `val` when given, else on `target`.
pub fn train(
    cfg: &TrainConfig,
    source: &DatasetIndex,
    aux: Option<&DatasetIndex>,
    target: &DatasetIndex,
    val: Option<&DatasetIndex>,
) -> Result<TrainOutput, TrainError> {
    cfg.validate()?;
    check_inputs(source, target, val)?;
    if let Some(a) = aux {
        check_inputs(a, target, None)?;
    }
    let source = match aux {
        Some(a) => extend_source(source, a)?,
        None => source.clone(),
    };
    let source = cap_per_class(&source, cfg.class_cap, &mut stream(cfg.seed, Purpose::Capping, 0));
    let target_boxes = if cfg.target_box_jitter > 0.0 {
        jitter_boxes(target, cfg.target_box_jitter, cfg.seed)?
    } else {
        target.clone()
    };
    let eval_set = val.unwrap_or(target);

    let channels = source.samples()[0].clip.channels;
    let shape = ModelShape { grid: cfg.pool_grid, channels, hidden_dim: cfg.hidden_dim, num_classes: source.num_classes() };
    let mut state = TrainState::new(shape, cfg.seed);

    let source_feats = featurize(&source, cfg.pool_grid)?;
    let target_feats = featurize(&target_boxes, cfg.pool_grid)?;
    let steps_per_epoch = source_feats.len().div_ceil(cfg.batch_size);

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::with_capacity(cfg.epochs * steps_per_epoch);
    for epoch in 0..cfg.epochs {
        let mut src_order: Vec<usize> = (0..source_feats.len()).collect();
        src_order.shuffle(&mut stream(cfg.seed, Purpose::BatchOrder, epoch as u64));
        let mut tgt_order: Vec<usize> = (0..target_feats.len()).collect();
        tgt_order.shuffle(&mut stream(cfg.seed, Purpose::BatchOrder, (1 << 32) | epoch as u64));

        let first_step = steps.len();
        let mut cursor = 0usize;
        for chunk in src_order.chunks(cfg.batch_size) {
            let src_batch: Vec<&FeaturedSample> = chunk.iter().map(|&i| &source_feats[i]).collect();
            let tgt_batch: Vec<&FeaturedSample> = (0..chunk.len())
                .map(|j| &target_feats[tgt_order[(cursor + j) % tgt_order.len()]])
                .collect();
            cursor += chunk.len();
            steps.push(train_step(&mut state, &src_batch, &tgt_batch, cfg, steps_per_epoch)?);
        }

        let epoch_steps = &steps[first_step..];
        let report = evaluate_model(&state.student, eval_set, cfg.iou_threshold)?;
        let lambdas: Vec<f64> = epoch_steps.iter().flat_map(|s| s.lambdas.iter().copied()).collect();
        let (kept, dropped) = epoch_steps.iter().fold((0, 0), |acc, s| (acc.0 + s.kept_targets, acc.1 + s.discarded));
        epochs.push(EpochMetrics {
            epoch,
            target_map: report.result.map,
            per_class_ap: report.result.per_class_ap,
            mean_lambda: if lambdas.is_empty() { 0.0 } else { lambdas.iter().sum::<f64>() / lambdas.len() as f64 },
            discard_rate: if kept + dropped == 0 { 0.0 } else { dropped as f64 / (kept + dropped) as f64 },
            lr: epoch_steps.last().map_or(0.0, |s| s.lr),
            loss: epoch_steps.iter().map(|s| s.loss).sum::<f64>() / epoch_steps.len().max(1) as f64,
            pseudo_label_accuracy: pseudo_confusion(&state.teacher, &target_feats, shape.num_classes)?.accuracy(),
        });
    }

    let pseudo_confusion = pseudo_confusion(&state.teacher, &target_feats, shape.num_classes)?;
    Ok(TrainOutput {
        student: state.student,
        teacher: state.teacher,
        epochs,
        steps,
        lambda_history: state.lambda_history,
        pseudo_confusion,
    })
}

fn pseudo_confusion(teacher: &ModelParams, target: &[FeaturedSample], k: usize) -> Result<ConfusionMatrix, TrainError> {
    let feats: Vec<&FeatureVector> = target.iter().flat_map(|t| &t.features).collect();
    let pseudo: Vec<usize> = pseudo_label_features(teacher, &feats)?.iter().map(|p| p.label).collect();
    let truth: Vec<usize> = target.iter().flat_map(|t| t.sample.annotations.iter().map(|a| a.class_id)).collect();
    Ok(confusion_matrix(&pseudo, &truth, k)?)
}
