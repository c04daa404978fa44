//! Training loop, checkpoint selection, evaluation and the scheme ablation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rtcan_tensor::{apply_updates, Context, Scalar, Sgd, Var};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta};
use crate::config::RunConfig;
use crate::data::{collate, load_pair, preprocess, ImagePair, Manifest, PreprocessConfig, Split};
use crate::error::{io_err, Error, Result};
use crate::losses::{combined_loss_var, LossConfig};
use crate::metrics::{Accumulator, Diagnostics, MetricsReport, ReportJson};
use crate::model::{predict_mask, Model, ModelConfig, Scheme};
use crate::util::mix_seed;

pub const HISTORY_FILE: &str = "history.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const BETA: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Device {
    Cpu,
    Accelerator,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMetric {
    Iou,
    F2,
}

impl SelectionMetric {
    pub fn of(self, r: &MetricsReport) -> f64 {
        match self {
            SelectionMetric::Iou => r.iou,
            SelectionMetric::F2 => r.f2,
        }
    }

    fn of_json(self, r: &ReportJson) -> f64 {
        match self {
            SelectionMetric::Iou => r.iou,
            SelectionMetric::F2 => r.f2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Learning rate at epoch `k` is `lr * lr_decay_gamma^k`.
    pub lr_decay_gamma: f64,
    pub seed: u64,
    pub device: Device,
    pub selection_metric: SelectionMetric,
    pub precision: Precision,
    /// Stop after this many optimizer steps, even mid-epoch.
    pub max_steps: Option<usize>,
    /// Validate every this many epochs (and always after the last one).
    pub eval_every: usize,
    pub eval_batch_size: usize,
    /// Keep superseded improvement checkpoints instead of deleting them.
    pub keep_checkpoints: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 4,
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 0.0005,
            lr_decay_gamma: 0.95,
            seed: 0,
            device: Device::Cpu,
            selection_metric: SelectionMetric::Iou,
            precision: Precision::F32,
            max_steps: None,
            eval_every: 1,
            eval_batch_size: 4,
            keep_checkpoints: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config(
                "epochs, batch_size, eval_every and eval_batch_size must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) || self.momentum < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("lr must be positive; momentum and weight_decay non-negative".into()));
        }
        if !(self.lr_decay_gamma > 0.0 && self.lr_decay_gamma < 1.0) {
            return Err(Error::Config(format!("lr_decay_gamma {} not in (0, 1)", self.lr_decay_gamma)));
        }
        if self.max_steps == Some(0) {
            return Err(Error::Config("max_steps must be positive".into()));
        }
        if self.device == Device::Accelerator {
            return Err(Error::Config("device `accelerator` is not available in this build; use `cpu`".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay_gamma.powi(epoch as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub lr: f64,
    /// Loss of every optimizer step in this epoch.
    pub step_losses: Vec<f64>,
    pub val_metrics: Option<ReportJson>,
    /// Relative to the run directory; set when this epoch improved the
    /// selection metric.
    pub checkpoint_path: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn step_losses(&self) -> Vec<f64> {
        self.records.iter().flat_map(|r| r.step_losses.iter().copied()).collect()
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<EpochRecord>, _>>()?;
        Ok(Self { records })
    }
}

/// Checkpoint of the epoch with the highest selection metric; the earliest
/// such epoch on ties. `None` if no epoch was validated.
pub fn select_best(history: &TrainHistory, metric: SelectionMetric) -> Option<&EpochRecord> {
    let mut best: Option<&EpochRecord> = None;
    for r in &history.records {
        let Some(m) = &r.val_metrics else { continue };
        if best.is_none_or(|b| metric.of_json(m) > metric.of_json(b.val_metrics.as_ref().unwrap())) {
            best = Some(r);
        }
    }
    best
}

pub struct TrainOutcome<T: Scalar> {
    pub history: TrainHistory,
    /// Weights after the final step.
    pub model: Model<T>,
    /// Best checkpoint by the selection metric.
    pub best_checkpoint: Option<PathBuf>,
    pub steps: usize,
}

fn load_split(manifest: &Manifest, split: Split) -> Result<Vec<ImagePair>> {
    manifest.ids(split).iter().map(|id| load_pair(manifest, id)).collect()
}

/// Train on the manifest's train split, validating on its val split.
pub fn train<T: Scalar>(run: &RunConfig, manifest: &Manifest) -> Result<TrainOutcome<T>> {
    let train_pairs = load_split(manifest, Split::Train)?;
    let val_pairs = load_split(manifest, Split::Val)?;
    if train_pairs.is_empty() || val_pairs.is_empty() {
        return Err(Error::Config(format!(
            "manifest needs nonempty train and val splits (got {} and {})",
            train_pairs.len(),
            val_pairs.len()
        )));
    }
    train_on_pairs(run, &train_pairs, &val_pairs, &manifest.content_hash())
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    f.write_all(line.as_bytes()).map_err(io_err(path))
}

/// Minibatch SGD with momentum, weight decay and per-epoch exponential
/// learning-rate decay. Writes `history.jsonl` and improvement checkpoints
/// under `run.output.directory`.
pub fn train_on_pairs<T: Scalar>(
    run: &RunConfig,
    train_pairs: &[ImagePair],
    val_pairs: &[ImagePair],
    manifest_hash: &str,
) -> Result<TrainOutcome<T>> {
    run.validate()?;
    if train_pairs.is_empty() || val_pairs.is_empty() {
        return Err(Error::Config("train and val sets must be nonempty".into()));
    }
    let tc = &run.train;
    let pre = run.data.preprocess();
    let out = &run.output.directory;
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir).map_err(io_err(&ckpt_dir))?;
    let history_path = out.join(HISTORY_FILE);
    fs::write(&history_path, "").map_err(io_err(&history_path))?;

    let mut model = Model::<T>::new(&run.model)?;
    log::info!(
        "training scheme {} depth {} ({} parameters) on {} pairs, validating on {}",
        run.model.scheme,
        run.model.backbone_depth,
        model.num_parameters(),
        train_pairs.len(),
        val_pairs.len()
    );
    let mut opt = Sgd::new(T::lit(tc.lr), T::lit(tc.momentum), T::lit(tc.weight_decay));
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, PathBuf)> = None;
    let mut steps = 0usize;

    'epochs: for epoch in 0..tc.epochs {
        let lr = tc.lr_at(epoch);
        opt.lr = T::lit(lr);
        let mut order: Vec<usize> = (0..train_pairs.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(tc.seed, epoch as u64)));
        let mut step_losses = Vec::new();
        for chunk in order.chunks(tc.batch_size) {
            if tc.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let samples = chunk
                .iter()
                .map(|&i| {
                    let seed = mix_seed(tc.seed ^ 0xA5A5_A5A5, (epoch * train_pairs.len() + i) as u64);
                    preprocess::<T>(&train_pairs[i], &pre, true, seed)
                })
                .collect::<Result<Vec<_>>>()?;
            let batch = collate(samples)?;
            let loss = train_step(&mut model, &mut opt, &run.loss, &batch, epoch)?;
            step_losses.push(loss);
            steps += 1;
            log::debug!("epoch {epoch} step {steps}: loss {loss:.6}");
        }
        if step_losses.is_empty() {
            break 'epochs;
        }
        let train_loss = step_losses.iter().sum::<f64>() / step_losses.len() as f64;
        let last = epoch + 1 == tc.epochs || tc.max_steps.is_some_and(|m| steps >= m);
        let mut record = EpochRecord {
            epoch,
            train_loss,
            lr,
            step_losses,
            val_metrics: None,
            checkpoint_path: None,
        };
        if (epoch + 1) % tc.eval_every == 0 || last {
            let acc = evaluate_pairs(&model, val_pairs, &pre, tc.eval_batch_size)?;
            let report = acc.report(BETA)?;
            let score = tc.selection_metric.of(&report);
            record.val_metrics = Some(report.to_json());
            log::info!(
                "epoch {epoch}: loss {train_loss:.5}, lr {lr:.6}, val iou {:.4}, f2 {:.4}",
                report.iou,
                report.f2
            );
            if best.as_ref().is_none_or(|(b, _)| score > *b) {
                let rel = format!("{CHECKPOINT_DIR}/epoch_{epoch:03}.safetensors");
                let path = out.join(&rel);
                checkpoint::save(&model, &path, epoch, record.val_metrics.clone(), manifest_hash, &pre)?;
                if let Some((_, old)) = best.take().filter(|_| !tc.keep_checkpoints) {
                    let _ = fs::remove_file(checkpoint::sidecar_path(&old));
                    let _ = fs::remove_file(&old);
                }
                best = Some((score, path));
                record.checkpoint_path = Some(rel);
            }
        } else {
            log::info!("epoch {epoch}: loss {train_loss:.5}, lr {lr:.6}");
        }
        append_line(&history_path, &(serde_json::to_string(&record)? + "\n"))?;
        history.records.push(record);
        if last {
            break;
        }
    }
    Ok(TrainOutcome {
        history,
        model,
        best_checkpoint: best.map(|(_, p)| p),
        steps,
    })
}

/// One optimizer step; returns the batch loss.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut Sgd<T>,
    loss_cfg: &LossConfig,
    batch: &crate::data::Batch<T>,
    epoch: usize,
) -> Result<f64> {
    let target: Vec<u8> = batch.masks.concat();
    let (grads, updates, loss) = {
        let ctx = Context::train(&model.params);
        let pred = model.forward(&ctx, &Var::constant(batch.rgb.clone()), &Var::constant(batch.thermal.clone()))?;
        let non_finite = || Error::NonFiniteLoss {
            epoch,
            batch: batch.ids.clone(),
        };
        if !pred.logits_final.value().all_finite() {
            return Err(non_finite());
        }
        let (loss_var, value) = combined_loss_var(&pred.logits_final, &target, loss_cfg)?;
        let loss = value.total.to_f64().unwrap_or(f64::NAN);
        if !loss.is_finite() {
            return Err(non_finite());
        }
        let grads = loss_var.backward()?;
        drop(loss_var);
        drop(pred);
        (grads, ctx.into_updates(), loss)
    };
    apply_updates(&mut model.params, updates)?;
    opt.step(&mut model.params, &grads)?;
    Ok(loss)
}

/// Evaluation-mode predictions over `pairs`, accumulated per image.
pub fn evaluate_pairs<T: Scalar>(
    model: &Model<T>,
    pairs: &[ImagePair],
    pre: &PreprocessConfig,
    batch_size: usize,
) -> Result<Accumulator> {
    let mut acc = Accumulator::default();
    for chunk in pairs.chunks(batch_size.max(1)) {
        let samples = chunk
            .iter()
            .map(|p| preprocess::<T>(p, pre, false, 0))
            .collect::<Result<Vec<_>>>()?;
        let batch = collate(samples)?;
        let pred = model.infer(&batch.rgb, &batch.thermal)?;
        let masks = predict_mask(pred.logits_final.value())?;
        for ((id, p), gt) in batch.ids.iter().zip(&masks).zip(&batch.masks) {
            acc.add(id, p, gt)?;
        }
    }
    Ok(acc)
}

pub struct Evaluation {
    pub report: MetricsReport,
    pub diagnostics: Diagnostics,
    pub meta: CheckpointMeta,
}

/// Restore a checkpoint and score it on one split of the manifest. When
/// `expected` is given the checkpoint must match its architecture.
pub fn evaluate<T: Scalar>(
    checkpoint_path: &Path,
    manifest: &Manifest,
    split: Split,
    expected: Option<&ModelConfig>,
) -> Result<Evaluation> {
    let (model, meta) = match expected {
        Some(cfg) => checkpoint::load_expecting::<T>(checkpoint_path, cfg)?,
        None => checkpoint::load::<T>(checkpoint_path)?,
    };
    let pairs = load_split(manifest, split)?;
    if pairs.is_empty() {
        return Err(Error::Config(format!("split {split:?} is empty")));
    }
    let acc = evaluate_pairs(&model, &pairs, &meta.preprocess, 4)?;
    Ok(Evaluation {
        report: acc.report(BETA)?,
        diagnostics: acc.diagnostics(BETA)?,
        meta,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub scheme: Scheme,
    pub parameters: usize,
    pub accuracy: f64,
    pub iou: f64,
    pub f2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Fixed-width text: scheme, parameter count, then percent scores.
    pub fn to_text(&self) -> String {
        let mut s = format!("{:<6} {:>12} {:>9} {:>9} {:>9}\n", "scheme", "params", "Acc", "IoU", "F2");
        for r in &self.rows {
            s += &format!(
                "{:<6} {:>12} {:>9.4} {:>9.4} {:>9.4}\n",
                r.scheme.to_string(),
                r.parameters,
                r.accuracy,
                r.iou,
                r.f2
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes") + "\n"
    }
}

/// Train schemes A, B and C with identical data and seeds, then score each
/// best checkpoint on the test split. Runs go to `<output>/scheme_<X>`.
pub fn run_ablation<T: Scalar>(run: &RunConfig, manifest: &Manifest) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(3);
    for scheme in Scheme::ALL {
        let mut cfg = run.clone();
        cfg.model.scheme = scheme;
        cfg.output.directory = run.output.directory.join(format!("scheme_{scheme}"));
        let outcome = train::<T>(&cfg, manifest)?;
        let best = outcome
            .best_checkpoint
            .ok_or_else(|| Error::Checkpoint(format!("scheme {scheme}: no checkpoint written")))?;
        let eval = evaluate::<T>(&best, manifest, Split::Test, Some(&cfg.model))?;
        let j = eval.report.to_json();
        rows.push(AblationRow {
            scheme,
            parameters: outcome.model.num_parameters(),
            accuracy: j.accuracy,
            iou: j.iou,
            f2: j.f2,
        });
    }
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(epoch: usize, iou: Option<f64>) -> EpochRecord {
        EpochRecord {
            epoch,
            train_loss: 1.0,
            lr: 0.02,
            step_losses: vec![1.0],
            val_metrics: iou.map(|v| ReportJson {
                accuracy: 0.0,
                iou: v,
                f2: 100.0 - v,
                precision: 0.0,
                recall: 0.0,
                beta: 2.0,
                conventions: String::new(),
            }),
            checkpoint_path: Some(format!("e{epoch}")),
        }
    }

    fn history(v: &[Option<f64>]) -> TrainHistory {
        TrainHistory {
            records: v.iter().enumerate().map(|(i, &x)| record(i, x)).collect(),
        }
    }

    #[test]
    fn select_best_argmax_and_ties() {
        let h = history(&[Some(10.0), Some(20.0), Some(30.0)]);
        assert_eq!(select_best(&h, SelectionMetric::Iou).unwrap().epoch, 2);
        let h = history(&[Some(50.0), Some(70.0), Some(60.0)]);
        assert_eq!(select_best(&h, SelectionMetric::Iou).unwrap().epoch, 1);
        assert_eq!(select_best(&h, SelectionMetric::F2).unwrap().epoch, 0);
        let h = history(&[Some(40.0), Some(70.0), None, Some(70.0)]);
        assert_eq!(select_best(&h, SelectionMetric::Iou).unwrap().epoch, 1);
        assert!(select_best(&history(&[None]), SelectionMetric::Iou).is_none());
    }

    #[test]
    fn lr_schedule_is_exponential() {
        let tc = TrainConfig::default();
        assert_eq!(tc.lr_at(0), 0.02);
        assert!((tc.lr_at(1) - 0.019).abs() < 1e-15);
        for k in 0..50 {
            let want = 0.02 * 0.95f64.powi(k as i32);
            assert!((tc.lr_at(k) - want).abs() <= 1e-12 * want);
        }
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        let bad = [
            TrainConfig {
                lr_decay_gamma: 1.0,
                ..Default::default()
            },
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
            TrainConfig {
                device: Device::Accelerator,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn history_jsonl_round_trip() {
        let h = history(&[Some(1.5), None]);
        assert_eq!(TrainHistory::from_jsonl(&h.to_jsonl()).unwrap(), h);
    }
}
