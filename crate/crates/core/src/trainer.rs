//! Training, evaluation and sampling-stability analysis.
//!
//! Each batch runs one forward/backward pass per clip (in parallel under the
//! `parallel` feature) to get the raw quality `q_b` and its parameter gradient
//! `∂q_b/∂θ`. A small second graph remaps the batch with its own statistics and
//! takes the MAE, giving `∂L/∂q_b`; the step direction is `Σ_b ∂L/∂q_b·∂q_b/∂θ`,
//! summed in batch order so the result does not depend on thread scheduling.

use std::path::Path;

use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::features::{read_feature_file, FeatureClip};
use crate::manifest::ManifestEntry;
use crate::metrics::{metric_report, srocc, MetricReport};
use crate::model::{multi_sample_predict, Model};
use crate::optim::{adamw_step, clip_global_norm, AdamState, AdamW};
use crate::par;
use crate::quality::{batch_remap_loss, compute_remap_stats, label_range, QualityPrediction, RemapStats};
use crate::rng::SplitMix64;
use crate::stde::ClipTokens;
use crate::tensor::Tensor;

/// Keys of the random streams derived from a run seed.
pub mod stream {
    pub const SHUFFLE: u64 = 1;
    pub const TSF: u64 = 2;
    pub const VALIDATION: u64 = 3;
    pub const EVALUATION: u64 = 4;
    pub const STABILITY: u64 = 5;
}

/// Repetitions per sample count in [`tsf_stability_report`].
pub const STABILITY_REPEATS: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledClip {
    pub id: String,
    pub mos: f64,
    pub clip: FeatureClip,
}

/// Reads the feature file of every entry, resolving paths against `manifest_dir`.
pub fn load_clips(entries: &[ManifestEntry], manifest_dir: &Path) -> Result<Vec<LabeledClip>> {
    par::map(entries, |_, e| {
        Ok(LabeledClip {
            id: e.video_id.clone(),
            mos: e.mos,
            clip: read_feature_file(e.resolve(manifest_dir))?,
        })
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_srocc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation SROCC.
    pub checkpoint: Checkpoint,
    pub epochs_run: usize,
    /// Validation SROCC of the untrained model.
    pub init_val_srocc: f64,
    pub log: Vec<EpochLog>,
}

struct Prepared {
    tokens: ClipTokens,
    mos: f64,
    frames: usize,
}

fn prepare_all(model: &Model, clips: &[LabeledClip]) -> Result<Vec<Prepared>> {
    par::map(clips, |_, c| {
        Ok(Prepared {
            tokens: model.prepare(&c.clip)?,
            mos: c.mos,
            frames: c.clip.n_frames(),
        })
    })
    .into_iter()
    .collect()
}

/// Contiguous batches of `order`; a trailing single clip joins the previous
/// batch because the batch remap needs at least two scores.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().expect("at least one batch") = &order[start..];
    }
    out
}

fn adam_config(c: &TrainConfig) -> AdamW {
    AdamW {
        lr: c.lr,
        weight_decay: c.weight_decay,
        beta1: c.beta1,
        beta2: c.beta2,
        eps: c.adam_eps,
    }
}

/// Raw quality of every clip, averaged over `s_m` samples; clip `i` samples
/// from `root.split(i)`.
fn raw_predictions(model: &Model, data: &[Prepared], s_m: usize, root: SplitMix64) -> Result<Vec<Vec<f64>>> {
    par::map(data, |i, p| {
        let mut rng = root.split(i as u64);
        multi_sample_predict(model, &p.tokens, s_m, &mut rng).map(|(_, per)| per)
    })
    .into_iter()
    .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Two-pass std of values shifted by the first one, so identical inputs give exactly 0.
fn population_std(v: &[f64]) -> f64 {
    let shifted: Vec<f64> = v.iter().map(|x| x - v[0]).collect();
    let m = mean(&shifted);
    (shifted.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Validation SROCC and the raw scores it was computed from.
fn validate(model: &Model, val: &[Prepared], s_m: usize, seed: u64, decreasing: bool) -> Result<(f64, Vec<f64>)> {
    let root = SplitMix64::new(seed).split(stream::VALIDATION);
    let raw: Vec<f64> = raw_predictions(model, val, s_m, root)?.iter().map(|p| mean(p)).collect();
    let mos: Vec<f64> = val.iter().map(|p| p.mos).collect();
    // the remap is monotone, so ranking the raw scores suffices
    let s = srocc(&raw, &mos)?;
    Ok((if decreasing { -s } else { s }, raw))
}

/// Trains a model from `config.seed` and keeps the best validation epoch.
/// `on_epoch` sees every log record as soon as its epoch finishes.
pub fn train(
    config: &TrainConfig,
    train_set: &[LabeledClip],
    val_set: &[LabeledClip],
    mut on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.len() < 2 {
        return Err(Error::Contract(format!(
            "training needs at least 2 clips, got {}",
            train_set.len()
        )));
    }
    if val_set.len() < 2 {
        return Err(Error::Contract(format!(
            "validation needs at least 2 clips, got {}",
            val_set.len()
        )));
    }
    let mut model = Model::new(config.model.clone(), config.seed)?;
    let train_data = prepare_all(&model, train_set)?;
    let val_data = prepare_all(&model, val_set)?;
    let labels: Vec<f64> = train_data.iter().map(|p| p.mos).collect();
    let range = label_range(&labels)?;
    let root = SplitMix64::new(config.seed);
    let adam = adam_config(config);
    let mut state = AdamState::new(model.store.tensors());

    let (init_val_srocc, _) = validate(&model, &val_data, config.val_s_m, config.seed, config.decreasing_remap)?;
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut since_best = 0;
    let mut log = Vec::new();

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        root.split_path(&[stream::SHUFFLE, epoch as u64]).shuffle(&mut order);
        let mut loss_sum = 0.0;
        for (b, batch) in batches(&order, config.batch_size).into_iter().enumerate() {
            let results = par::map(batch, |_, &i| {
                let p = &train_data[i];
                let mut rng = root.split_path(&[stream::TSF, epoch as u64, i as u64]);
                let sel = model.sample_selection(p.frames, &mut rng)?;
                model.sample_gradient(&p.tokens, &sel)
            });
            let mut qs = Vec::with_capacity(batch.len());
            let mut grads = Vec::with_capacity(batch.len());
            for r in results {
                let (q, g) = r.map_err(|e| Error::Numerical(format!("epoch {epoch}, batch {b}: {e}")))?;
                qs.push(q);
                grads.push(g);
            }
            let batch_labels: Vec<f64> = batch.iter().map(|&i| train_data[i].mos).collect();
            let bl = batch_remap_loss(&qs, &batch_labels, range, config.decreasing_remap)
                .map_err(|e| Error::Numerical(format!("epoch {epoch}, batch {b}: {e}")))?;
            let mut total: Vec<Tensor> = model.store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            for (dq, g) in bl.dq.iter().zip(&grads) {
                for (acc, gi) in total.iter_mut().zip(g) {
                    for (a, x) in acc.data_mut().iter_mut().zip(gi.data()) {
                        *a += dq * x;
                    }
                }
            }
            let norm = clip_global_norm(&mut total, config.grad_clip);
            if !norm.is_finite() {
                return Err(Error::Numerical(format!(
                    "epoch {epoch}, batch {b}: non-finite gradient norm (loss {})",
                    bl.loss
                )));
            }
            adamw_step(model.store.tensors_mut(), &total, &mut state, &adam)?;
            loss_sum += bl.loss * batch.len() as f64;
        }
        let (val_srocc, val_raw) = validate(&model, &val_data, config.val_s_m, config.seed, config.decreasing_remap)?;
        let record = EpochLog {
            epoch,
            train_loss: loss_sum / train_data.len() as f64,
            val_srocc,
        };
        on_epoch(&record)?;
        log.push(record);
        if best.as_ref().is_none_or(|(b, _)| val_srocc > *b) {
            let remap = compute_remap_stats(&val_raw, &[range.0, range.1])?;
            best = Some((val_srocc, Checkpoint::from_model(&model, config, epoch, val_srocc, remap)));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    let (_, checkpoint) = best.expect("at least one epoch runs");
    Ok(TrainOutcome {
        checkpoint,
        epochs_run: log.len(),
        init_val_srocc,
        log,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoPrediction {
    pub video_id: String,
    pub mos: f64,
    pub prediction: QualityPrediction,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutput {
    pub report: MetricReport,
    pub stats: RemapStats,
    pub predictions: Vec<VideoPrediction>,
}

/// Multi-sample prediction of every clip, remapped with statistics of this
/// split's raw predictions and the training label range.
pub fn evaluate(checkpoint: &Checkpoint, clips: &[LabeledClip], s_m: usize, seed: u64) -> Result<EvalOutput> {
    let model = checkpoint.to_model()?;
    evaluate_model(&model, checkpoint.label_range(), checkpoint.config.decreasing_remap, clips, s_m, seed)
}

pub fn evaluate_model(
    model: &Model,
    label_range: (f64, f64),
    decreasing: bool,
    clips: &[LabeledClip],
    s_m: usize,
    seed: u64,
) -> Result<EvalOutput> {
    if clips.len() < 2 {
        return Err(Error::Contract(format!("evaluation needs at least 2 clips, got {}", clips.len())));
    }
    let data = prepare_all(model, clips)?;
    let root = SplitMix64::new(seed).split(stream::EVALUATION);
    let per = raw_predictions(model, &data, s_m, root)?;
    let raw: Vec<f64> = per.iter().map(|p| mean(p)).collect();
    let stats = compute_remap_stats(&raw, &[label_range.0, label_range.1])?;
    let predictions: Vec<VideoPrediction> = clips
        .iter()
        .zip(per)
        .map(|(c, p)| VideoPrediction {
            video_id: c.id.clone(),
            mos: c.mos,
            prediction: QualityPrediction::new(p, &stats, decreasing),
        })
        .collect();
    let mapped: Vec<f64> = predictions.iter().map(|p| p.prediction.q_mapped).collect();
    let mos: Vec<f64> = clips.iter().map(|c| c.mos).collect();
    Ok(EvalOutput {
        report: metric_report(&mapped, &mos)?,
        stats,
        predictions,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StabilityRow {
    pub s_m: usize,
    /// Mean over videos of the std of repeated mapped predictions, divided by the score range.
    pub mean_std: f64,
}

/// Repeats every prediction [`STABILITY_REPEATS`] times per sample count and
/// reports the normalized spread. All repetitions share one set of remap
/// statistics, taken from a reference evaluation with `reference_s_m` samples.
pub fn tsf_stability_report(
    model: &Model,
    label_range: (f64, f64),
    decreasing: bool,
    clips: &[LabeledClip],
    s_m_list: &[usize],
    reference_s_m: usize,
    seed: u64,
) -> Result<Vec<StabilityRow>> {
    let reference = evaluate_model(model, label_range, decreasing, clips, reference_s_m, seed)?;
    let stats = reference.stats;
    let span = stats.s_max - stats.s_min;
    let data = prepare_all(model, clips)?;
    let root = SplitMix64::new(seed).split(stream::STABILITY);
    s_m_list
        .iter()
        .map(|&s_m| {
            let stds = par::map(&data, |i, p| -> Result<f64> {
                let mapped = (0..STABILITY_REPEATS)
                    .map(|r| {
                        let mut rng = root.split_path(&[s_m as u64, r as u64, i as u64]);
                        let (q, _) = multi_sample_predict(model, &p.tokens, s_m, &mut rng)?;
                        Ok(crate::quality::remap(q, &stats, decreasing))
                    })
                    .collect::<Result<Vec<f64>>>()?;
                Ok(population_std(&mapped) / span)
            })
            .into_iter()
            .collect::<Result<Vec<f64>>>()?;
            Ok(StabilityRow {
                s_m,
                mean_std: mean(&stds),
            })
        })
        .collect()
}
