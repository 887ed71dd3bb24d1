//! Three-stage training: image-level classifier pretraining, noisy-mask
//! segmenter pretraining, hand-label fine-tuning. Each stage runs a grid
//! search over learning rate / dropout / decay; every grid point trains with
//! best-validation-epoch snapshotting, and the stage keeps the best run
//! (validation accuracy for the classifier, validation pixel F1 for the
//! segmenter; the final stage selects by holdout F1).
//!
//! Grid points are independent and may train in parallel; each derives its
//! own rng streams from the pipeline seed and the grid index, so results do
//! not depend on scheduling.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::format;
use crate::lidar::{slope_baseline, DayRecord, Grid, MaskGrid};
use crate::metrics::{evaluate, EvalReport};
use crate::models::{
    build_classifier, build_segmenter, transfer_weights, predict_mask, Classifier, Segmenter,
};
use crate::nn::{derive_seed, seeded_rng, AdamState, Grads};
use crate::preprocess::{DatasetBundle, QuarterSample, ScaleConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    ClsPretrain,
    NoisyPretrain,
    Finetune,
}

impl Stage {
    pub fn index(self) -> usize {
        match self {
            Stage::ClsPretrain => 1,
            Stage::NoisyPretrain => 2,
            Stage::Finetune => 3,
        }
    }
}

/// One training run's knobs. Paper-scale defaults are 100/100/300 epochs
/// with batches 32/10/10; desk defaults shrink the epochs to 30/30/60.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout: f64,
    pub decay: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn paper_defaults(stage: Stage, seed: u64) -> Self {
        let (epochs, batch_size, lr, dropout) = match stage {
            Stage::ClsPretrain => (100, 32, 1e-3, 0.5),
            Stage::NoisyPretrain => (100, 10, 5.9e-4, 0.2),
            Stage::Finetune => (300, 10, 1e-3, 0.0),
        };
        TrainConfig {
            stage,
            epochs,
            batch_size,
            lr,
            dropout,
            decay: 0.0,
            seed,
        }
    }

    pub fn desk_defaults(stage: Stage, seed: u64) -> Self {
        let mut cfg = Self::paper_defaults(stage, seed);
        cfg.epochs = match stage {
            Stage::ClsPretrain | Stage::NoisyPretrain => 30,
            Stage::Finetune => 60,
        };
        cfg
    }
}

pub const SPLIT_FRACTIONS: (f64, f64, f64) = (0.70, 0.15, 0.15);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_metric: f64,
}

/// Index of the best epoch: highest validation metric, earliest on ties.
pub fn select_best_epoch(history: &[EpochRecord]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, rec) in history.iter().enumerate() {
        match best {
            None => best = Some(i),
            Some(b) if rec.val_metric > history[b].val_metric => best = Some(i),
            _ => {}
        }
    }
    best
}

/// Train/val/test views over one dataset, shared by all grid points of a
/// stage (the shuffle is seeded by the pipeline, not the run).
pub struct SplitView<'a> {
    pub train: Vec<&'a QuarterSample>,
    pub val: Vec<&'a QuarterSample>,
    pub test: Vec<&'a QuarterSample>,
}

pub fn split_samples(samples: &[QuarterSample], seed: u64) -> Result<SplitView<'_>> {
    let n = samples.len();
    if n == 0 {
        return Err(Error::Config("cannot split an empty dataset".into()));
    }
    let (f_train, f_val, f_test) = SPLIT_FRACTIONS;
    if (f_train + f_val + f_test - 1.0).abs() > 1e-9 {
        return Err(Error::Config("split fractions must sum to 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(seed));
    let n_train = (n as f64 * f_train).floor() as usize;
    let n_val = (n as f64 * f_val).floor() as usize;
    let take = |r: std::ops::Range<usize>| r.map(|i| &samples[order[i]]).collect::<Vec<_>>();
    Ok(SplitView {
        train: take(0..n_train),
        val: take(n_train..n_train + n_val),
        test: take(n_train + n_val..n),
    })
}

// ── batch assembly ─────────────────────────────────────────────────────────

fn batch_images(samples: &[&QuarterSample], idxs: &[usize]) -> Result<Tensor> {
    let first = samples[idxs[0]].image.shape().to_vec();
    let per = samples[idxs[0]].image.numel();
    let mut data = Vec::with_capacity(idxs.len() * per);
    for &i in idxs {
        if samples[i].image.shape() != first.as_slice() {
            return Err(Error::dim("batch_images", "inconsistent sample shapes"));
        }
        data.extend_from_slice(samples[i].image.data());
    }
    Tensor::new(vec![idxs.len(), first[0], first[1], first[2]], data)
}

fn batch_class_targets(samples: &[&QuarterSample], idxs: &[usize]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(idxs.len() * 2);
    for &i in idxs {
        if samples[i].has_cloud {
            data.extend_from_slice(&[0.0, 1.0]);
        } else {
            data.extend_from_slice(&[1.0, 0.0]);
        }
    }
    Tensor::new(vec![idxs.len(), 2], data)
}

fn batch_mask_targets(samples: &[&QuarterSample], idxs: &[usize]) -> Result<Tensor> {
    let first = samples[idxs[0]]
        .mask
        .as_ref()
        .ok_or_else(|| Error::Config("sample lacks a pixel mask".into()))?
        .shape()
        .to_vec();
    let per: usize = first.iter().product();
    let mut data = Vec::with_capacity(idxs.len() * per);
    for &i in idxs {
        let m = samples[i]
            .mask
            .as_ref()
            .ok_or_else(|| Error::Config("sample lacks a pixel mask".into()))?;
        data.extend_from_slice(m.data());
    }
    Tensor::new(vec![idxs.len(), first[0], first[1], first[2]], data)
}

/// Converts a one-hot (H, W, 2) label tensor back to a binary grid.
pub fn mask_from_one_hot(t: &Tensor) -> Result<MaskGrid> {
    let s = t.shape();
    if s.len() != 3 || s[2] != 2 {
        return Err(Error::dim("mask_from_one_hot", format!("expected (H, W, 2), got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    let mut grid = Grid::filled(h, w, 0u8);
    for hi in 0..h {
        for wi in 0..w {
            if t.data()[(hi * w + wi) * 2 + 1] == 1.0 {
                grid.set(hi, wi, 1);
            }
        }
    }
    Ok(grid)
}

/// Channel 0 (normalized log backscatter) of a (H, W, 2) image as a rank-2
/// grid, for the slope baseline.
pub fn backscatter_channel(image: &Tensor) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 2 {
        return Err(Error::dim("backscatter_channel", format!("expected (H, W, 2), got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    let mut data = vec![0.0; h * w];
    for (i, v) in data.iter_mut().enumerate() {
        *v = image.data()[i * 2];
    }
    Tensor::new(vec![h, w], data)
}

// ── evaluation helpers ─────────────────────────────────────────────────────

/// Fraction of samples whose predicted class matches `has_cloud`. The
/// cloud class wins logit ties, mirroring the >= 0.5 pixel rule.
pub fn classifier_accuracy(cls: &Classifier, samples: &[&QuarterSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty sample set".into()));
    }
    let mut correct = 0usize;
    for chunk in (0..samples.len()).collect::<Vec<_>>().chunks(32) {
        let x = batch_images(samples, chunk)?;
        let mut g = Graph::new();
        let xid = g.leaf(x, false)?;
        let pass = cls.forward_infer(&mut g, xid)?;
        let logits = g.value(pass.output).data();
        for (row, &i) in logits.chunks_exact(2).zip(chunk) {
            let predicted_cloud = row[1] >= row[0];
            if predicted_cloud == samples[i].has_cloud {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Dataset-level pixel report of a segmenter against the samples' masks.
pub fn segmenter_report(seg: &Segmenter, samples: &[&QuarterSample]) -> Result<EvalReport> {
    let mut preds = Vec::with_capacity(samples.len());
    let mut truths = Vec::with_capacity(samples.len());
    for s in samples {
        preds.push(predict_mask(seg, &s.image)?);
        let m = s
            .mask
            .as_ref()
            .ok_or_else(|| Error::Config("sample lacks a pixel mask".into()))?;
        truths.push(mask_from_one_hot(m)?);
    }
    evaluate(&preds, &truths)
}

/// Dataset-level report of the slope baseline against the samples' masks.
pub fn baseline_report(
    samples: &[&QuarterSample],
    slope_threshold: f64,
    extinction_threshold: f64,
) -> Result<EvalReport> {
    let mut preds = Vec::with_capacity(samples.len());
    let mut truths = Vec::with_capacity(samples.len());
    for s in samples {
        let bs = backscatter_channel(&s.image)?;
        preds.push(slope_baseline(&bs, slope_threshold, extinction_threshold)?);
        let m = s
            .mask
            .as_ref()
            .ok_or_else(|| Error::Config("sample lacks a pixel mask".into()))?;
        truths.push(mask_from_one_hot(m)?);
    }
    evaluate(&preds, &truths)
}

/// Dataset-level report of the noisy (degraded) masks used as predictions.
pub fn noisy_mask_report(
    corpus: &[DayRecord],
    cfg: &ScaleConfig,
    samples: &[&QuarterSample],
) -> Result<EvalReport> {
    let by_id: HashMap<&str, &DayRecord> =
        corpus.iter().map(|d| (d.day_id.as_str(), d)).collect();
    let mut preds = Vec::with_capacity(samples.len());
    let mut truths = Vec::with_capacity(samples.len());
    for s in samples {
        let day = by_id.get(s.source.day_id.as_str()).ok_or_else(|| {
            Error::Config(format!("day {} not in corpus", s.source.day_id))
        })?;
        let noisy = day
            .noisy_mask
            .as_ref()
            .ok_or_else(|| Error::Config(format!("day {} has no noisy mask", day.day_id)))?;
        let offset = cfg.offsets[s.source.quarter];
        let wq = cfg.quarter_width;
        let mut pred = Grid::filled(noisy.height, wq, 0u8);
        for hi in 0..noisy.height {
            for wi in 0..wq {
                let src_w = if s.source.flipped { wq - 1 - wi } else { wi };
                pred.set(hi, wi, noisy.get(hi, offset + src_w));
            }
        }
        preds.push(pred);
        let m = s
            .mask
            .as_ref()
            .ok_or_else(|| Error::Config("sample lacks a pixel mask".into()))?;
        truths.push(mask_from_one_hot(m)?);
    }
    evaluate(&preds, &truths)
}

// ── stage training loops ───────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct StageResult {
    pub best_epoch: usize,
    pub best_val: f64,
    pub history: Vec<EpochRecord>,
}

fn map_divergence(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Divergence { epoch, batch },
        other => other,
    }
}

fn epoch_batches(
    n_train: usize,
    batch_size: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    if n_train == 0 {
        return Err(Error::Config("empty training split".into()));
    }
    let mut order: Vec<usize> = (0..n_train).collect();
    order.shuffle(rng);
    // The final short batch is dropped for stable batch statistics.
    let batches: Vec<Vec<usize>> = order
        .chunks_exact(batch_size)
        .map(|c| c.to_vec())
        .collect();
    if batches.is_empty() {
        return Err(Error::Config(format!(
            "training split of {n_train} yields no full batch of {batch_size}"
        )));
    }
    Ok(batches)
}

/// Stage 1: image-level cross-entropy on the classifier, best epoch by
/// validation accuracy.
pub fn train_classifier_stage(
    init: &Classifier,
    data: &SplitView<'_>,
    cfg: &TrainConfig,
) -> Result<(Classifier, StageResult)> {
    if data.val.is_empty() {
        return Err(Error::Config("empty validation split".into()));
    }
    let mut model = init.clone();
    let mut adam = AdamState::new(cfg.lr, cfg.decay);
    let mut shuffle_rng = seeded_rng(derive_seed(cfg.seed, 1));
    let mut dropout_rng = seeded_rng(derive_seed(cfg.seed, 2));
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Classifier)> = None;
    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(data.train.len(), cfg.batch_size, &mut shuffle_rng)?;
        let mut loss_sum = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let x = batch_images(&data.train, batch)?;
            let t = batch_class_targets(&data.train, batch)?;
            let mut g = Graph::new();
            let xid = g.leaf(x, false)?;
            let pass = model
                .forward_train(&mut g, xid, cfg.dropout, &mut dropout_rng)
                .map_err(|e| map_divergence(e, epoch, bi))?;
            let loss = g
                .cross_entropy(pass.output, &t)
                .map_err(|e| map_divergence(e, epoch, bi))?;
            loss_sum += g.value(loss).item()?;
            g.backward(loss).map_err(|e| map_divergence(e, epoch, bi))?;
            let mut grads = Grads::default();
            for (name, id) in &pass.binding {
                grads.0.insert(name.clone(), g.grad(*id).unwrap().to_vec());
            }
            adam.step(&mut model.params, &grads, epoch)?;
        }
        let val_metric = classifier_accuracy(&model, &data.val)?;
        history.push(EpochRecord {
            epoch,
            loss: loss_sum / history_len_guard(&batches),
            val_metric,
        });
        if best.as_ref().map(|(_, b, _)| val_metric > *b).unwrap_or(true) {
            best = Some((epoch, val_metric, model.clone()));
        }
    }
    let (best_epoch, best_val, snapshot) = best.expect("at least one epoch");
    Ok((
        snapshot,
        StageResult {
            best_epoch,
            best_val,
            history,
        },
    ))
}

fn history_len_guard(batches: &[Vec<usize>]) -> f64 {
    batches.len().max(1) as f64
}

/// Stages 2 and 3: per-pixel cross-entropy on the segmenter, best epoch by
/// validation pixel F1.
pub fn train_segmenter_stage(
    init: &Segmenter,
    data: &SplitView<'_>,
    cfg: &TrainConfig,
) -> Result<(Segmenter, StageResult)> {
    if data.val.is_empty() {
        return Err(Error::Config("empty validation split".into()));
    }
    let mut model = init.clone();
    let mut adam = AdamState::new(cfg.lr, cfg.decay);
    let mut shuffle_rng = seeded_rng(derive_seed(cfg.seed, 1));
    let mut dropout_rng = seeded_rng(derive_seed(cfg.seed, 2));
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Segmenter)> = None;
    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(data.train.len(), cfg.batch_size, &mut shuffle_rng)?;
        let mut loss_sum = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let x = batch_images(&data.train, batch)?;
            let t = batch_mask_targets(&data.train, batch)?;
            let mut g = Graph::new();
            let xid = g.leaf(x, false)?;
            let pass = model
                .forward_train(&mut g, xid, cfg.dropout, &mut dropout_rng)
                .map_err(|e| map_divergence(e, epoch, bi))?;
            let loss = g
                .cross_entropy(pass.output, &t)
                .map_err(|e| map_divergence(e, epoch, bi))?;
            loss_sum += g.value(loss).item()?;
            g.backward(loss).map_err(|e| map_divergence(e, epoch, bi))?;
            let mut grads = Grads::default();
            for (name, id) in &pass.binding {
                grads.0.insert(name.clone(), g.grad(*id).unwrap().to_vec());
            }
            adam.step(&mut model.params, &grads, epoch)?;
        }
        let val_metric = segmenter_report(&model, &data.val)?.f1;
        history.push(EpochRecord {
            epoch,
            loss: loss_sum / history_len_guard(&batches),
            val_metric,
        });
        if best.as_ref().map(|(_, b, _)| val_metric > *b).unwrap_or(true) {
            best = Some((epoch, val_metric, model.clone()));
        }
    }
    let (best_epoch, best_val, snapshot) = best.expect("at least one epoch");
    Ok((
        snapshot,
        StageResult {
            best_epoch,
            best_val,
            history,
        },
    ))
}

// ── hyperparameter grids ───────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct HyperGrid {
    pub lr: Vec<f64>,
    pub dropout: Vec<f64>,
    pub decay: Vec<f64>,
}

impl HyperGrid {
    /// Cross product in (lr, dropout, decay) order.
    pub fn points(&self) -> Vec<(f64, f64, f64)> {
        let mut out = Vec::new();
        for &lr in &self.lr {
            for &dropout in &self.dropout {
                for &decay in &self.decay {
                    out.push((lr, dropout, decay));
                }
            }
        }
        out
    }

    fn contains(&self, point: (f64, f64, f64)) -> bool {
        let close = |xs: &[f64], v: f64| xs.iter().any(|x| (x - v).abs() <= 1e-12);
        close(&self.lr, point.0) && close(&self.dropout, point.1) && close(&self.decay, point.2)
    }
}

/// Per-stage grids. Defaults keep 9 runs per stage and contain the best
/// reported configuration of each stage: (0.001, 0.5, 0), (0.00059, 0.2, 0),
/// (0.001, 0.0, 0).
#[derive(Debug, Clone)]
pub struct HyperGrids {
    pub stage1: HyperGrid,
    pub stage2: HyperGrid,
    pub stage3: HyperGrid,
}

impl HyperGrids {
    pub fn desk_default() -> Self {
        let grid = HyperGrid {
            lr: vec![1e-3, 5.9e-4, 1e-4],
            dropout: vec![0.0, 0.2, 0.5],
            decay: vec![0.0],
        };
        HyperGrids {
            stage1: grid.clone(),
            stage2: grid.clone(),
            stage3: grid,
        }
    }

    pub fn single_point() -> Self {
        HyperGrids {
            stage1: HyperGrid { lr: vec![1e-3], dropout: vec![0.5], decay: vec![0.0] },
            stage2: HyperGrid { lr: vec![5.9e-4], dropout: vec![0.2], decay: vec![0.0] },
            stage3: HyperGrid { lr: vec![1e-3], dropout: vec![0.0], decay: vec![0.0] },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let required = [
            (&self.stage1, (1e-3, 0.5, 0.0), "stage1"),
            (&self.stage2, (5.9e-4, 0.2, 0.0), "stage2"),
            (&self.stage3, (1e-3, 0.0, 0.0), "stage3"),
        ];
        for (grid, point, name) in required {
            if !grid.contains(point) {
                return Err(Error::Config(format!(
                    "{name} grid must contain the best reported point {point:?}"
                )));
            }
            if grid.points().is_empty() {
                return Err(Error::Config(format!("{name} grid is empty")));
            }
        }
        Ok(())
    }
}

// ── pipeline ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Full,
    NoNoisy,
    NoPretrain,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoNoisy => "no_noisy",
            Ablation::NoPretrain => "no_pretrain",
        }
    }
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub stage: Stage,
    pub chosen_point: (f64, f64, f64),
    pub chosen_index: usize,
    pub best_epoch: usize,
    pub best_val: f64,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone)]
pub struct EvalSuite {
    pub model_test: EvalReport,
    pub model_holdout: EvalReport,
    pub baseline_test: EvalReport,
    pub baseline_holdout: EvalReport,
    pub noisy_test: EvalReport,
    pub noisy_holdout: EvalReport,
}

#[derive(Debug)]
pub struct PipelineOutput {
    pub ablation: Ablation,
    pub segmenter: Segmenter,
    /// Post-transfer snapshot after stage 1 (Full runs only); the no_noisy
    /// ablation starts from exactly this.
    pub transferred: Option<Segmenter>,
    pub stages: Vec<StageOutcome>,
    pub reports: EvalSuite,
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub scale: ScaleConfig,
    pub grids: HyperGrids,
    pub seed: u64,
    pub epochs: (usize, usize, usize),
    pub batch: (usize, usize, usize),
    pub baseline_slope_threshold: f64,
    pub baseline_extinction_threshold: f64,
}

impl PipelineConfig {
    pub fn desk_default(seed: u64) -> Self {
        PipelineConfig {
            scale: ScaleConfig::desk(),
            grids: HyperGrids::desk_default(),
            seed,
            epochs: (30, 30, 60),
            batch: (32, 10, 10),
            baseline_slope_threshold: crate::lidar::DEFAULT_SLOPE_THRESHOLD,
            baseline_extinction_threshold: crate::lidar::DEFAULT_EXTINCTION_RATIO_THRESHOLD,
        }
    }

    fn train_config(&self, stage: Stage, point: (f64, f64, f64), run_seed: u64) -> TrainConfig {
        let (epochs, batch_size) = match stage {
            Stage::ClsPretrain => (self.epochs.0, self.batch.0),
            Stage::NoisyPretrain => (self.epochs.1, self.batch.1),
            Stage::Finetune => (self.epochs.2, self.batch.2),
        };
        TrainConfig {
            stage,
            epochs,
            batch_size,
            lr: point.0,
            dropout: point.1,
            decay: point.2,
            seed: run_seed,
        }
    }
}

fn pick_best<T>(results: &[(T, StageResult)]) -> usize {
    let mut best = 0;
    for (i, (_, r)) in results.iter().enumerate() {
        if r.best_val > results[best].1.best_val {
            best = i;
        }
    }
    best
}

/// Runs one ablation of the training pipeline on an assembled bundle.
///
/// * `Full`: stage 1 on the classification set, weight transfer, stage 2 on
///   the noisy set, stage 3 on the hand-labeled set.
/// * `NoNoisy`: stage 3 only, starting from `transfer_source` (the
///   transferred snapshot of a Full run; required).
/// * `NoPretrain`: stage 3 only, from fresh initialization.
///
/// The corpus is needed alongside the bundle to score the degraded masks as
/// predictions.
pub fn run_pipeline(
    corpus: &[DayRecord],
    bundle: &DatasetBundle,
    cfg: &PipelineConfig,
    ablation: Ablation,
    transfer_source: Option<&Segmenter>,
) -> Result<PipelineOutput> {
    cfg.grids.validate()?;
    cfg.scale.validate()?;
    let hand_split = split_samples(&bundle.hand_labeled, derive_seed(cfg.seed, 103))?;
    let holdout: Vec<&QuarterSample> = bundle.holdout.iter().collect();
    if holdout.is_empty() {
        return Err(Error::Config("empty holdout set".into()));
    }

    let mut stages = Vec::new();
    let mut transferred: Option<Segmenter> = None;

    let stage3_start: Segmenter = match ablation {
        Ablation::Full => {
            // Stage 1: classifier grid search by validation accuracy.
            let cls_split = split_samples(&bundle.classification, derive_seed(cfg.seed, 101))?;
            let points = cfg.grids.stage1.points();
            let results: Vec<(Classifier, StageResult)> = points
                .par_iter()
                .enumerate()
                .map(|(gi, &point)| {
                    let run_seed = derive_seed(cfg.seed, 0x1000 + gi as u64);
                    let init = build_classifier(&cfg.scale, derive_seed(run_seed, 7))?;
                    let tc = cfg.train_config(Stage::ClsPretrain, point, run_seed);
                    train_classifier_stage(&init, &cls_split, &tc)
                })
                .collect::<Result<_>>()?;
            let bi = pick_best(&results);
            stages.push(StageOutcome {
                stage: Stage::ClsPretrain,
                chosen_point: points[bi],
                chosen_index: bi,
                best_epoch: results[bi].1.best_epoch,
                best_val: results[bi].1.best_val,
                history: results[bi].1.history.clone(),
            });
            let best_classifier = &results[bi].0;

            // Transfer into a fresh segmenter.
            let mut seg = build_segmenter(&cfg.scale, derive_seed(cfg.seed, 0x5E6))?;
            transfer_weights(best_classifier, &mut seg)?;
            transferred = Some(seg.clone());

            // Stage 2: noisy pretraining by validation F1.
            let noisy_split = split_samples(&bundle.noisy, derive_seed(cfg.seed, 102))?;
            let points = cfg.grids.stage2.points();
            let results: Vec<(Segmenter, StageResult)> = points
                .par_iter()
                .enumerate()
                .map(|(gi, &point)| {
                    let run_seed = derive_seed(cfg.seed, 0x2000 + gi as u64);
                    let tc = cfg.train_config(Stage::NoisyPretrain, point, run_seed);
                    train_segmenter_stage(&seg, &noisy_split, &tc)
                })
                .collect::<Result<_>>()?;
            let bi = pick_best(&results);
            stages.push(StageOutcome {
                stage: Stage::NoisyPretrain,
                chosen_point: points[bi],
                chosen_index: bi,
                best_epoch: results[bi].1.best_epoch,
                best_val: results[bi].1.best_val,
                history: results[bi].1.history.clone(),
            });
            results[bi].0.clone()
        }
        Ablation::NoNoisy => transfer_source
            .ok_or_else(|| {
                Error::Config(
                    "no_noisy requires the transferred snapshot of a full run".into(),
                )
            })?
            .clone(),
        Ablation::NoPretrain => build_segmenter(&cfg.scale, derive_seed(cfg.seed, 0x5E7))?,
    };

    // Stage 3: fine-tune; the final model is the grid point with the best
    // holdout F1 (best-epoch snapshots are still chosen by validation F1).
    let points = cfg.grids.stage3.points();
    let results: Vec<(Segmenter, StageResult, f64)> = points
        .par_iter()
        .enumerate()
        .map(|(gi, &point)| {
            let run_seed = derive_seed(cfg.seed, 0x3000 + gi as u64);
            let tc = cfg.train_config(Stage::Finetune, point, run_seed);
            let (model, result) = train_segmenter_stage(&stage3_start, &hand_split, &tc)?;
            let holdout_f1 = segmenter_report(&model, &holdout)?.f1;
            Ok((model, result, holdout_f1))
        })
        .collect::<Result<_>>()?;
    let mut bi = 0;
    for (i, r) in results.iter().enumerate() {
        if r.2 > results[bi].2 {
            bi = i;
        }
    }
    stages.push(StageOutcome {
        stage: Stage::Finetune,
        chosen_point: points[bi],
        chosen_index: bi,
        best_epoch: results[bi].1.best_epoch,
        best_val: results[bi].1.best_val,
        history: results[bi].1.history.clone(),
    });
    let segmenter = results[bi].0.clone();

    let reports = EvalSuite {
        model_test: segmenter_report(&segmenter, &hand_split.test)?,
        model_holdout: segmenter_report(&segmenter, &holdout)?,
        baseline_test: baseline_report(
            &hand_split.test,
            cfg.baseline_slope_threshold,
            cfg.baseline_extinction_threshold,
        )?,
        baseline_holdout: baseline_report(
            &holdout,
            cfg.baseline_slope_threshold,
            cfg.baseline_extinction_threshold,
        )?,
        noisy_test: noisy_mask_report(corpus, &cfg.scale, &hand_split.test)?,
        noisy_holdout: noisy_mask_report(corpus, &cfg.scale, &holdout)?,
    };

    Ok(PipelineOutput {
        ablation,
        segmenter,
        transferred,
        stages,
        reports,
    })
}

// ── artifacts ──────────────────────────────────────────────────────────────

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    format::write_atomic(path, |w| {
        for rec in history {
            writeln!(w, "{},{:.6},{:.6}", rec.epoch, rec.loss, rec.val_metric)?;
        }
        Ok(())
    })
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    format::write_atomic(path, |w| {
        writeln!(w, "{}", report.csv_line())?;
        Ok(())
    })
}

/// Writes one ablation run's artifacts under `dir`: final checkpoint, the
/// transferred snapshot (full runs), per-stage histories, reports, and a
/// summary of the chosen hyperparameters.
pub fn write_pipeline_artifacts(
    dir: &Path,
    output: &PipelineOutput,
    cfg: &PipelineConfig,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    format::write_checkpoint(
        &output.segmenter.params,
        &output.segmenter.cfg,
        cfg.seed,
        &dir.join("checkpoint.mplp"),
    )?;
    if let Some(t) = &output.transferred {
        format::write_checkpoint(&t.params, &t.cfg, cfg.seed, &dir.join("transferred.mplp"))?;
    }
    for outcome in &output.stages {
        write_history(
            &dir.join(format!("history_stage{}.txt", outcome.stage.index())),
            &outcome.history,
        )?;
    }
    write_report(&dir.join("report_test.txt"), &output.reports.model_test)?;
    write_report(&dir.join("report_holdout.txt"), &output.reports.model_holdout)?;
    write_report(&dir.join("baseline_report_test.txt"), &output.reports.baseline_test)?;
    write_report(
        &dir.join("baseline_report_holdout.txt"),
        &output.reports.baseline_holdout,
    )?;
    write_report(&dir.join("noisy_report_test.txt"), &output.reports.noisy_test)?;
    write_report(&dir.join("noisy_report_holdout.txt"), &output.reports.noisy_holdout)?;
    format::write_atomic(&dir.join("summary.txt"), |w| {
        writeln!(w, "ablation = {}", output.ablation.as_str())?;
        writeln!(w, "seed = {}", cfg.seed)?;
        for s in &output.stages {
            writeln!(
                w,
                "stage{} = lr {:.6}, dropout {:.2}, decay {:.2}, best_epoch {}, best_val {:.6}",
                s.stage.index(),
                s.chosen_point.0,
                s.chosen_point.1,
                s.chosen_point.2,
                s.best_epoch,
                s.best_val
            )?;
        }
        writeln!(w, "holdout_f1 = {:.6}", output.reports.model_holdout.f1)?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lidar::{generate_corpus, SyntheticSceneSpec};
    use crate::preprocess::{assemble_datasets, SplitSpec};

    #[test]
    fn best_epoch_is_argmax_with_earliest_tie() {
        let mk = |vals: &[f64]| -> Vec<EpochRecord> {
            vals.iter()
                .enumerate()
                .map(|(i, &v)| EpochRecord { epoch: i, loss: 0.0, val_metric: v })
                .collect()
        };
        assert_eq!(select_best_epoch(&mk(&[0.1, 0.9, 0.5])), Some(1));
        assert_eq!(select_best_epoch(&mk(&[0.3, 0.9, 0.9])), Some(1));
        assert_eq!(select_best_epoch(&mk(&[])), None);
        assert_eq!(select_best_epoch(&mk(&[0.2])), Some(0));
    }

    #[test]
    fn split_fractions_partition_the_dataset() {
        let template = SyntheticSceneSpec::desk(1);
        let corpus = generate_corpus(&template, 80, 7).unwrap();
        let bundle =
            assemble_datasets(&corpus, &ScaleConfig::desk(), &SplitSpec::desk_default()).unwrap();
        let split = split_samples(&bundle.classification, 9).unwrap();
        assert_eq!(split.train.len(), 112);
        assert_eq!(split.val.len(), 24);
        assert_eq!(split.test.len(), 24);
        // Same seed, same split; different seed, different order.
        let again = split_samples(&bundle.classification, 9).unwrap();
        assert_eq!(
            split.train[0].source,
            again.train[0].source
        );
    }

    #[test]
    fn grids_validate_only_with_required_points() {
        HyperGrids::desk_default().validate().unwrap();
        HyperGrids::single_point().validate().unwrap();
        let mut bad = HyperGrids::desk_default();
        bad.stage2.lr = vec![1e-3, 1e-4];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn no_noisy_without_transfer_source_is_an_error() {
        let template = SyntheticSceneSpec::desk(1);
        let corpus = generate_corpus(&template, 80, 7).unwrap();
        let bundle =
            assemble_datasets(&corpus, &ScaleConfig::desk(), &SplitSpec::desk_default()).unwrap();
        let cfg = PipelineConfig::desk_default(1);
        let err = run_pipeline(&corpus, &bundle, &cfg, Ablation::NoNoisy, None).unwrap_err();
        assert!(err.to_string().contains("no_noisy"), "{err}");
    }
}
