//! The training loop: mixed batches, imbalance-weighted masked loss, Adam
//! and a plateau schedule, with per-epoch logs and best-epoch checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::image::NormalizationKind;
use crate::data::{
    assemble_batch, mixed_batch_sampler, Normalization, PreparedSample, SamplerMode,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, predict_samples, AucReport};
use crate::labelspace::{Dataset, LabelSpace, LabelVector, MaskVector};
use crate::lossfns::{pooled_loss, pooled_loss_grad, weights_for_mode, LossMode};
use crate::netcore::{Checkpoint, Matrix, Model, ModelSpec};
use crate::optim::{AdamState, PlateauPolicy};
use crate::seed;

/// Everything that determines a training run besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub loss_mode: LossMode,
    /// Supervise the location classes.
    pub location: bool,
    pub pooled: bool,
    pub patience: usize,
    pub min_delta: f64,
    pub min_lr: f64,
    pub lr_factor: f64,
    pub normalization: NormalizationKind,
    pub blocks: usize,
    pub layers_per_block: usize,
    pub growth: usize,
    pub batch_norm: bool,
    pub downsampler_layers: usize,
    /// Stop once the validation mean pathology AUC reaches this value.
    pub target_val_auc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let spec = ModelSpec::desk();
        TrainConfig {
            seed: 0,
            batch_size: 32,
            epochs: 20,
            lr: 1e-3,
            loss_mode: LossMode::Weighted,
            location: true,
            pooled: true,
            patience: 3,
            min_delta: 1e-4,
            min_lr: 1e-6,
            lr_factor: 0.1,
            normalization: NormalizationKind::Dataset,
            blocks: spec.blocks,
            layers_per_block: spec.layers_per_block,
            growth: spec.growth,
            batch_norm: spec.batch_norm,
            downsampler_layers: spec.downsampler_layers,
            target_val_auc: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        other => Err(Error::InvalidArgument(format!(
            "bad value `{other}` for `{key}` (on/off)"
        ))),
    }
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

impl TrainConfig {
    /// Preset matching the full-resolution architecture.
    pub fn faithful() -> Self {
        let spec = ModelSpec::faithful();
        TrainConfig {
            batch_size: 128,
            blocks: spec.blocks,
            layers_per_block: spec.layers_per_block,
            growth: spec.growth,
            batch_norm: spec.batch_norm,
            ..TrainConfig::default()
        }
    }

    pub fn model_spec(&self, image_size: usize) -> ModelSpec {
        ModelSpec {
            blocks: self.blocks,
            layers_per_block: self.layers_per_block,
            growth: self.growth,
            batch_norm: self.batch_norm,
            downsampler_layers: self.downsampler_layers,
            ..ModelSpec::desk().with_input(image_size, image_size)
        }
    }

    /// Sets one `key = value` entry. Returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "loss_mode" => {
                self.loss_mode = match value.trim() {
                    "weighted" => LossMode::Weighted,
                    "unweighted" => LossMode::Unweighted,
                    other => {
                        return Err(Error::InvalidArgument(format!(
                            "unknown loss mode `{other}`"
                        )))
                    }
                }
            }
            "location" => self.location = parse_bool(key, value)?,
            "pooled" => self.pooled = parse_bool(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "min_delta" => self.min_delta = parse(key, value)?,
            "min_lr" => self.min_lr = parse(key, value)?,
            "lr_factor" => self.lr_factor = parse(key, value)?,
            "normalization" => {
                self.normalization = match value.trim() {
                    "dataset" => NormalizationKind::Dataset,
                    "imagenet" => NormalizationKind::Imagenet,
                    other => {
                        return Err(Error::InvalidArgument(format!(
                            "unknown normalization `{other}`"
                        )))
                    }
                }
            }
            "blocks" => self.blocks = parse(key, value)?,
            "layers_per_block" => self.layers_per_block = parse(key, value)?,
            "growth" => self.growth = parse(key, value)?,
            "batch_norm" => self.batch_norm = parse_bool(key, value)?,
            "downsampler_layers" => self.downsampler_layers = parse(key, value)?,
            "target_val_auc" => {
                self.target_val_auc = match value.trim() {
                    "" | "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// `key = value` lines in a fixed order; feeding them back through
    /// [`TrainConfig::set`] reproduces the config exactly.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("seed", self.seed.to_string());
        put("batch_size", self.batch_size.to_string());
        put("epochs", self.epochs.to_string());
        put("lr", format!("{:?}", self.lr));
        put(
            "loss_mode",
            match self.loss_mode {
                LossMode::Weighted => "weighted".into(),
                LossMode::Unweighted => "unweighted".into(),
            },
        );
        put("location", on_off(self.location).into());
        put("pooled", on_off(self.pooled).into());
        put("patience", self.patience.to_string());
        put("min_delta", format!("{:?}", self.min_delta));
        put("min_lr", format!("{:?}", self.min_lr));
        put("lr_factor", format!("{:?}", self.lr_factor));
        put(
            "normalization",
            match self.normalization {
                NormalizationKind::Dataset => "dataset".into(),
                NormalizationKind::Imagenet => "imagenet".into(),
            },
        );
        put("blocks", self.blocks.to_string());
        put("layers_per_block", self.layers_per_block.to_string());
        put("growth", self.growth.to_string());
        put("batch_norm", on_off(self.batch_norm).into());
        put("downsampler_layers", self.downsampler_layers.to_string());
        put(
            "target_val_auc",
            self.target_val_auc
                .map(|v| format!("{v:?}"))
                .unwrap_or_else(|| "none".into()),
        );
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return bad("lr_factor must lie in (0, 1)");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        Ok(())
    }
}

/// One epoch of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_per_label: Vec<f64>,
    pub val_loss: f64,
    pub val_per_label: Vec<f64>,
    pub val_auc: Option<f64>,
    pub val_located_auc: Option<f64>,
    /// Fraction of supervised positive pathology entries scored >= 0.5.
    pub val_recall: f64,
    pub reduced: bool,
}

pub struct TrainOutcome {
    /// Weights of the epoch with the best validation AUC.
    pub best: Model,
    pub best_epoch: usize,
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub normalization: Normalization,
}

/// Per-sample training masks: location classes switched off unless enabled.
pub fn training_masks(samples: &[PreparedSample], location: bool) -> Vec<MaskVector> {
    samples
        .iter()
        .map(|s| {
            if location {
                s.mask.clone()
            } else {
                s.mask.without_location()
            }
        })
        .collect()
}

/// Fraction of supervised positive pathology entries with prediction >= 0.5.
pub fn positive_recall(
    space: &LabelSpace,
    preds: &Matrix,
    labels: &[LabelVector],
    masks: &[MaskVector],
) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for (i, (l, m)) in labels.iter().zip(masks).enumerate() {
        for (j, def) in space.labels().iter().enumerate() {
            if !def.kind.is_location() && m.get(j) == 1 && l.get(j) == 1 {
                total += 1;
                if preds.get(i, j) >= 0.5 {
                    hit += 1;
                }
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// Loss over `indices` in consecutive batches; per-label values are
/// averaged with weights proportional to batch size.
fn dataset_loss(
    model: &Model,
    samples: &[PreparedSample],
    indices: &[usize],
    masks: &[MaskVector],
    norm: &Normalization,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<f64>, Matrix)> {
    let preds = predict_samples(model, samples, indices, norm, cfg.batch_size)?;
    let classes = preds.cols();
    let mut per_label = vec![0.0; classes];
    for (c, chunk) in indices.chunks(cfg.batch_size).enumerate() {
        let rows = chunk.len();
        let start = c * cfg.batch_size;
        let p = Matrix::from_vec(
            rows,
            classes,
            preds.data()[start * classes..(start + rows) * classes].to_vec(),
        )?;
        let labels: Vec<LabelVector> = chunk.iter().map(|&i| samples[i].label.clone()).collect();
        let m: Vec<MaskVector> = chunk.iter().map(|&i| masks[i].clone()).collect();
        let w = weights_for_mode(cfg.loss_mode, &labels, &m)?;
        let l = pooled_loss(&p, &labels, &m, &w)?;
        for (acc, v) in per_label.iter_mut().zip(&l.per_label) {
            *acc += v * rows as f64;
        }
    }
    for v in &mut per_label {
        *v /= indices.len() as f64;
    }
    let total = per_label.iter().sum::<f64>() / classes as f64;
    Ok((total, per_label, preds))
}

fn at_epoch(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numerical(m) => Error::Numerical(format!("epoch {epoch}: {m}")),
        other => other,
    }
}

/// Trains on `train`, validating on `val` after every epoch.
pub fn train(
    cfg: &TrainConfig,
    space: &LabelSpace,
    samples: &[PreparedSample],
    train: &[usize],
    val: &[usize],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument(
            "training and validation sets must be non-empty".into(),
        ));
    }
    let size = samples[train[0]].image.width;
    let norm = match cfg.normalization {
        NormalizationKind::Dataset => Normalization::fit(
            train
                .iter()
                .map(|&i| (samples[i].dataset, &samples[i].image)),
        )?,
        NormalizationKind::Imagenet => Normalization::imagenet(),
    };
    let masks = training_masks(samples, cfg.location);
    let spec = cfg.model_spec(size);
    let mut model = Model::new(spec, seed::derive(cfg.seed, "init", 0))?;
    let mut adam = AdamState::for_sizes(
        &model.params().iter().map(|p| p.len()).collect::<Vec<_>>(),
        cfg.lr,
    );
    let mut plateau = PlateauPolicy::new(cfg.patience, cfg.min_delta, cfg.min_lr);
    plateau.factor = cfg.lr_factor;
    let provenance: Vec<Dataset> = train.iter().map(|&i| samples[i].dataset).collect();
    let mode = if cfg.pooled {
        SamplerMode::Pooled
    } else {
        SamplerMode::Single
    };
    let sampler_seed = seed::derive(cfg.seed, "sampler", 0);
    let val_labels: Vec<LabelVector> = val.iter().map(|&i| samples[i].label.clone()).collect();
    let val_eval_masks: Vec<MaskVector> = val.iter().map(|&i| samples[i].mask.clone()).collect();

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Model, Checkpoint)> = None;
    for epoch in 1..=cfg.epochs {
        let plan = mixed_batch_sampler(
            &provenance,
            cfg.batch_size,
            sampler_seed,
            epoch as u64,
            mode,
        )?;
        let classes = model.spec().classes;
        let mut train_per_label = vec![0.0; classes];
        let mut seen = 0usize;
        for local in plan {
            let idx: Vec<usize> = local.iter().map(|&k| train[k]).collect();
            let mut batch = assemble_batch(samples, &idx, &norm)?;
            batch.masks = idx.iter().map(|&i| masks[i].clone()).collect();
            model.zero_grad();
            let cache = model
                .forward_train(&batch.images)
                .map_err(at_epoch(epoch))?;
            let weights = weights_for_mode(cfg.loss_mode, &batch.labels, &batch.masks)?;
            let loss = pooled_loss(cache.predictions(), &batch.labels, &batch.masks, &weights)?;
            if !loss.total.is_finite() {
                return Err(Error::Numerical(format!(
                    "epoch {epoch}: training loss {}",
                    loss.total
                )));
            }
            let grad =
                pooled_loss_grad(cache.predictions(), &batch.labels, &batch.masks, &weights)?;
            model.backward(&cache, &grad)?;
            adam.step(model.params_mut())
                .map_err(|e| Error::Numerical(format!("epoch {epoch}: {e}")))?;
            for (acc, v) in train_per_label.iter_mut().zip(&loss.per_label) {
                *acc += v * idx.len() as f64;
            }
            seen += idx.len();
        }
        for v in &mut train_per_label {
            *v /= seen as f64;
        }
        let train_loss = train_per_label.iter().sum::<f64>() / classes as f64;

        let (val_loss, val_per_label, val_preds) =
            dataset_loss(&model, samples, val, &masks, &norm, cfg).map_err(at_epoch(epoch))?;
        if !val_loss.is_finite() {
            return Err(Error::Numerical(format!(
                "epoch {epoch}: validation loss {val_loss}"
            )));
        }
        let ids: Vec<String> = val.iter().map(|&i| samples[i].image_id.clone()).collect();
        let report =
            AucReport::from_predictions(space, &val_preds, &val_labels, &val_eval_masks, &ids)?;
        let recall = positive_recall(space, &val_preds, &val_labels, &val_eval_masks);
        let lr_used = adam.lr;
        let decision = plateau.update(val_loss, adam.lr)?;
        adam.lr = decision.lr;
        let record = EpochRecord {
            epoch,
            lr: lr_used,
            train_loss,
            train_per_label,
            val_loss,
            val_per_label,
            val_auc: report.means.pathologies,
            val_located_auc: report.means.located,
            val_recall: recall,
            reduced: decision.reduced,
        };
        on_epoch(&record);
        let score = record.val_auc.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(b, ..)| score > *b) {
            let mut ckpt = Checkpoint::capture(&model);
            ckpt.epoch = epoch;
            ckpt.optimizer = Some(adam.clone());
            ckpt.plateau = Some(plateau.clone());
            ckpt.normalization = norm.per_dataset.clone();
            best = Some((score, epoch, model.clone(), ckpt));
        }
        history.push(record);
        if cfg.target_val_auc.is_some_and(|t| score >= t) {
            break;
        }
    }
    let (_, best_epoch, best_model, checkpoint) =
        best.ok_or_else(|| Error::InvalidArgument("epochs must be at least 1".into()))?;
    Ok(TrainOutcome {
        best: best_model,
        best_epoch,
        checkpoint,
        history,
        normalization: norm,
    })
}

/// Held-out report for a trained outcome.
pub fn evaluate_outcome(
    outcome: &TrainOutcome,
    space: &LabelSpace,
    samples: &[PreparedSample],
    test: &[usize],
    batch_size: usize,
) -> Result<AucReport> {
    evaluate(
        &outcome.best,
        samples,
        test,
        &outcome.normalization,
        space,
        batch_size,
    )
}

/// `epoch,split,total,<label>...` rows, one train and one val row per epoch.
pub fn train_log_csv(space: &LabelSpace, history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,split,total");
    for l in space.labels() {
        let name = l.column_name();
        let _ = write!(
            s,
            ",{}",
            if name.contains(',') {
                format!("\"{name}\"")
            } else {
                name
            }
        );
    }
    s.push('\n');
    for r in history {
        for (split, total, per) in [
            ("train", r.train_loss, &r.train_per_label),
            ("val", r.val_loss, &r.val_per_label),
        ] {
            let _ = write!(s, "{},{split},{total:?}", r.epoch);
            for v in per {
                let _ = write!(s, ",{v:?}");
            }
            s.push('\n');
        }
    }
    s
}

/// `epoch,lr,train_loss,val_loss,val_auc,val_located_auc,val_recall,lr_reduced`.
pub fn epochs_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from(
        "epoch,lr,train_loss,val_loss,val_auc,val_located_auc,val_recall,lr_reduced\n",
    );
    let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    for r in history {
        let _ = writeln!(
            s,
            "{},{:?},{:?},{:?},{},{},{:?},{}",
            r.epoch,
            r.lr,
            r.train_loss,
            r.val_loss,
            opt(r.val_auc),
            opt(r.val_located_auc),
            r.val_recall,
            r.reduced as u8
        );
    }
    s
}

/// Writes the logs and the best checkpoint into `dir`.
pub fn write_run(dir: &Path, space: &LabelSpace, outcome: &TrainOutcome) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let put = |name: &str, text: String| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(format!("writing {}", p.display()), e))
    };
    put("train_log.csv", train_log_csv(space, &outcome.history))?;
    put("epochs.csv", epochs_csv(&outcome.history))?;
    outcome.checkpoint.save(&dir.join("checkpoint.json"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_roundtrip() {
        let mut cfg = TrainConfig {
            seed: 77,
            lr: 3e-4,
            loss_mode: LossMode::Unweighted,
            location: false,
            target_val_auc: Some(0.9),
            ..TrainConfig::default()
        };
        cfg.min_delta = 0.1 + 0.2;
        let mut back = TrainConfig::default();
        for line in cfg.to_kv().lines() {
            let (k, v) = line.split_once('=').unwrap();
            assert!(back.set(k.trim(), v).unwrap(), "{k}");
        }
        assert_eq!(back, cfg);
        assert!(!back.set("nope", "1").unwrap());
        assert!(back.set("location", "maybe").is_err());
    }

    #[test]
    fn faithful_preset_is_full_scale() {
        let cfg = TrainConfig::faithful();
        assert_eq!(cfg.batch_size, 128);
        let spec = cfg.model_spec(1024);
        spec.validate().unwrap();
        assert_eq!(spec.downsampled_hw(), (256, 256));
    }
}
