//! Training loop, segmentation metrics and the ablation runner.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::Upsample;
use crate::error::{Error, Result};
use crate::layers::Module;
use crate::model::{ModelConfig, SegModel};
use crate::synth::{Dataset, Sample, Split};
use crate::tensor::init::Rng;
use crate::tensor::{no_grad, Tensor, IGNORE_LABEL};

pub const LOSS_LOG: &str = "loss.log";
pub const CHECKPOINT: &str = "model.ckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Peak learning rate, reached at the end of warmup.
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup: usize,
    pub iters: usize,
    pub power: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 6e-5,
            weight_decay: 0.01,
            warmup: 1500,
            iters: 160_000,
            power: 0.9,
            batch_size: 2,
            seed: 0,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    /// Settings for CPU runs on the micro model: a short schedule at a
    /// higher rate, since nothing is pretrained.
    pub fn desk() -> Self {
        TrainConfig { lr: 2e-3, warmup: 100, iters: 2000, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.iters == 0 || self.warmup > self.iters {
            return Err(Error::Config(format!("need 0 < iters and warmup <= iters, got {} / {}", self.warmup, self.iters)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.weight_decay < 0.0 || self.clip_norm < 0.0 || self.power <= 0.0 {
            return Err(Error::Config("weight_decay, clip_norm must be >= 0 and power > 0".into()));
        }
        Ok(())
    }

    /// Rate used for the update at step `t`: linear from 0 over the warmup,
    /// then `(1 - s)^power` where `s` runs from 0 at warmup end to 1 at
    /// `iters`.
    pub fn lr_at(&self, t: usize) -> f64 {
        if t < self.warmup {
            return self.lr * t as f64 / self.warmup as f64;
        }
        let span = (self.iters - self.warmup).max(1) as f64;
        let s = ((t - self.warmup) as f64 / span).min(1.0);
        self.lr * (1.0 - s).powf(self.power)
    }
}

/// Decoupled weight decay Adam. State is kept in parameter visit order.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: TrainConfig,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        AdamW { cfg: cfg.clone(), step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Applies one update with `grads[i]` for the `i`-th visited parameter.
    /// Weight decay skips vectors (biases and norm scales).
    pub fn step<M: Module<f32>>(&mut self, model: &mut M, grads: &[Vec<f32>], lr: f64) {
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        let (b1, b2, eps, wd) = (c.beta1 as f32, c.beta2 as f32, c.eps as f32, c.weight_decay);
        let mut i = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit("", &mut |_, p| {
            let g = &grads[i];
            if ms.len() <= i {
                ms.push(vec![0.0; g.len()]);
                vs.push(vec![0.0; g.len()]);
            }
            let (m, v) = (&mut ms[i], &mut vs[i]);
            let decay = if p.rank() > 1 { (1.0 - lr * wd) as f32 } else { 1.0 };
            let step = (lr / bc1) as f32;
            let root_bc2 = bc2.sqrt() as f32;
            let data: Vec<f32> = p
                .data()
                .iter()
                .zip(g)
                .zip(m.iter_mut().zip(v.iter_mut()))
                .map(|((&w, &g), (m, v))| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    w * decay - step * *m / ((*v).sqrt() / root_bc2 + eps)
                })
                .collect();
            *p = Tensor::param(data, p.shape()).expect("same shape");
            i += 1;
        });
    }
}

/// One loss-log line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
}

impl std::fmt::Display for LogRow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}, {:.6e}, {:.6}", self.iter, self.lr, self.loss)
    }
}

/// Stacks samples into a `[B, 3, H, W]` image and flat labels.
pub fn batch(samples: &[&Sample]) -> Result<(Tensor<f32>, Vec<u8>)> {
    let first = samples.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut image = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut label = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.height, s.width) != (h, w) {
            return Err(Error::Shape(format!("batch mixes {h}x{w} and {}x{}", s.height, s.width)));
        }
        image.extend_from_slice(&s.image);
        label.extend_from_slice(&s.label);
    }
    Ok((Tensor::new(image, &[samples.len(), 3, h, w])?, label))
}

fn global_norm(grads: &[Vec<f32>]) -> f64 {
    grads.iter().flatten().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt()
}

/// Trains `model` in place on `samples`, calling `log` after every step.
/// Batches are drawn from an epoch-wise shuffle seeded by `cfg.seed`.
pub fn train_model(
    model: &mut SegModel<f32>,
    samples: &[Sample],
    cfg: &TrainConfig,
    mut log: impl FnMut(&LogRow),
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    let k = model.num_classes();
    if let Some(bad) = samples.iter().flat_map(|s| &s.label).find(|&&l| l != IGNORE_LABEL && l as usize >= k) {
        return Err(Error::InvalidArgument(format!("label {bad} outside the model's {k} classes")));
    }
    let mut rng = Rng::derive(cfg.seed, 3);
    let mut order: Vec<usize> = Vec::new();
    let mut opt = AdamW::new(cfg);
    let mut rows = Vec::with_capacity(cfg.iters);
    for t in 0..cfg.iters {
        let mut picks = Vec::with_capacity(cfg.batch_size);
        while picks.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..samples.len()).collect();
                rng.shuffle(&mut order);
            }
            picks.push(&samples[order.pop().expect("refilled")]);
        }
        let (image, labels) = batch(&picks)?;
        let loss = model.forward(&image)?.cross_entropy(&labels)?;
        let value = loss.item()? as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss {value} at iteration {t} (lr {:.3e})", cfg.lr_at(t))));
        }
        let gmap = loss.backward()?;
        let mut grads = Vec::new();
        model.visit("", &mut |_, p| {
            grads.push(gmap.get(p).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; p.numel()]));
        });
        let norm = global_norm(&grads);
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm {norm} at iteration {t}")));
        }
        if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
            let s = (cfg.clip_norm / norm) as f32;
            grads.iter_mut().flatten().for_each(|g| *g *= s);
        }
        let lr = cfg.lr_at(t);
        opt.step(model, &grads, lr);
        let row = LogRow { iter: t, lr, loss: value };
        log(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub struct TrainOutcome {
    pub model: SegModel<f32>,
    pub log: Vec<LogRow>,
}

/// Builds a model from `model_cfg` seeded by `cfg.seed`, trains it on the
/// training split and, with `out` set, writes the checkpoint and loss log
/// there.
pub fn train(model_cfg: &ModelConfig, data: &Dataset, cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    check_classes(model_cfg, data)?;
    let samples = data.load_split(Split::Train)?;
    let mut model = SegModel::new(cfg.seed, model_cfg)?;
    let log = train_model(&mut model, &samples, cfg, |_| {})?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        model.save(dir.join(CHECKPOINT))?;
        fs::write(dir.join(LOSS_LOG), format_log(&log))?;
    }
    Ok(TrainOutcome { model, log })
}

pub fn format_log(rows: &[LogRow]) -> String {
    let mut s = String::from("iter, lr, loss\n");
    for r in rows {
        let _ = writeln!(s, "{r}");
    }
    s
}

fn check_classes(model_cfg: &ModelConfig, data: &Dataset) -> Result<()> {
    let (m, d) = (model_cfg.decoder.num_classes, data.num_classes());
    if m != d {
        return Err(Error::InvalidArgument(format!("model predicts {m} classes, dataset has {d}")));
    }
    Ok(())
}

/// Pixel counts `counts[gt * k + pred]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(num_classes: usize) -> Self {
        Confusion { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    /// Pixels labelled [`IGNORE_LABEL`] are skipped.
    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!("{} predictions for {} labels", pred.len(), gt.len())));
        }
        let k = self.num_classes;
        for (&p, &g) in pred.iter().zip(gt) {
            if g == IGNORE_LABEL {
                continue;
            }
            if g as usize >= k || p as usize >= k {
                return Err(Error::InvalidArgument(format!("class {} outside 0..{k}", g.max(p))));
            }
            self.counts[g as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn metrics(&self) -> Metrics {
        let k = self.num_classes;
        let at = |g: usize, p: usize| self.counts[g * k + p] as f64;
        let mut iou = Vec::with_capacity(k);
        let mut acc = Vec::with_capacity(k);
        for c in 0..k {
            let tp = at(c, c);
            let gt: f64 = (0..k).map(|p| at(c, p)).sum();
            let pred: f64 = (0..k).map(|g| at(g, c)).sum();
            let union = gt + pred - tp;
            iou.push(if union > 0.0 { tp / union } else { f64::NAN });
            acc.push(if gt > 0.0 { tp / gt } else { f64::NAN });
        }
        let total: u64 = self.counts.iter().sum();
        let trace: u64 = (0..k).map(|c| self.counts[c * k + c]).sum();
        Metrics {
            miou: 100.0 * nan_mean(&iou),
            macc: 100.0 * nan_mean(&acc),
            aacc: if total > 0 { 100.0 * trace as f64 / total as f64 } else { f64::NAN },
            iou,
            acc,
            confusion: self.clone(),
        }
    }
}

/// Mean over the finite entries; classes absent from both prediction and
/// ground truth carry NaN and are left out.
fn nan_mean(v: &[f64]) -> f64 {
    let kept: Vec<f64> = v.iter().copied().filter(|x| !x.is_nan()).collect();
    if kept.is_empty() {
        f64::NAN
    } else {
        kept.iter().sum::<f64>() / kept.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    /// Per-class IoU in `[0, 1]`, NaN for classes never seen.
    pub iou: Vec<f64>,
    /// Per-class recall in `[0, 1]`.
    pub acc: Vec<f64>,
    /// Percentages.
    pub miou: f64,
    pub macc: f64,
    pub aacc: f64,
    pub confusion: Confusion,
}

impl Metrics {
    pub fn to_text(&self, classes: &[String]) -> String {
        let mut s = format!("{:<16}{:>10}{:>10}\n", "class", "IoU", "Acc");
        for (c, (iou, acc)) in self.iou.iter().zip(&self.acc).enumerate() {
            let name = classes.get(c).cloned().unwrap_or_else(|| c.to_string());
            let _ = writeln!(s, "{name:<16}{:>10.2}{:>10.2}", 100.0 * iou, 100.0 * acc);
        }
        let _ = writeln!(s, "{:<16}{:>10.2}{:>10.2}", "mean", self.miou, self.macc);
        let _ = writeln!(s, "aAcc {:.2}", self.aacc);
        s
    }

    pub fn to_kv(&self) -> String {
        let mut s = format!("miou={:.4}\nmacc={:.4}\naacc={:.4}\n", self.miou, self.macc, self.aacc);
        for (c, iou) in self.iou.iter().enumerate() {
            let _ = writeln!(s, "iou.{c}={iou:.6}");
        }
        s
    }
}

/// Arg-max predictions over `samples`, accumulated into one confusion
/// matrix.
pub fn evaluate(model: &SegModel<f32>, samples: &[Sample], batch_size: usize) -> Result<Metrics> {
    let mut conf = Confusion::new(model.num_classes());
    no_grad(|| -> Result<()> {
        let refs: Vec<&Sample> = samples.iter().collect();
        for chunk in refs.chunks(batch_size.max(1)) {
            let (image, labels) = batch(chunk)?;
            conf.add(&model.forward(&image)?.argmax_channels()?, &labels)?;
        }
        Ok(())
    })?;
    Ok(conf.metrics())
}

/// Loads a checkpoint and scores it on one split.
pub fn evaluate_checkpoint(model_cfg: &ModelConfig, ckpt: &Path, data: &Dataset, split: Split) -> Result<Metrics> {
    check_classes(model_cfg, data)?;
    let model = SegModel::load(model_cfg, ckpt)?;
    evaluate(&model, &data.load_split(split)?, 4)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Scan,
    Deformable,
    Upsample,
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scan" => Ok(Axis::Scan),
            "deformable" => Ok(Axis::Deformable),
            "upsample" => Ok(Axis::Upsample),
            other => Err(Error::InvalidArgument(format!("unknown ablation axis {other:?}"))),
        }
    }
}

impl Axis {
    pub fn title(self) -> &'static str {
        match self {
            Axis::Scan => "scanning methods",
            Axis::Deformable => "deformable designs",
            Axis::Upsample => "upsample methods",
        }
    }

    /// `(row name, config)` for every setting of this axis.
    pub fn variants(self, base: &ModelConfig) -> Vec<(&'static str, ModelConfig)> {
        let with = |f: &dyn Fn(&mut ModelConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            Axis::Scan => [("uni-direction", 1), ("bi-direction", 2), ("quadri-direction", 4)]
                .into_iter()
                .map(|(n, d)| (n, with(&|c| c.decoder.ss2d.directions = d)))
                .collect(),
            Axis::Deformable => [("w/o deformable", false), ("w/ deformable", true)]
                .into_iter()
                .map(|(n, on)| (n, with(&|c| c.decoder.deformable = on)))
                .collect(),
            Axis::Upsample => [Upsample::Bilinear, Upsample::Bicubic, Upsample::PixelShuffle]
                .into_iter()
                .map(|u| (u.name(), with(&|c| c.decoder.upsample = u)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub seeds: Vec<u64>,
    pub miou: Vec<f64>,
    pub macc: Vec<f64>,
    pub median_miou: f64,
    pub median_macc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub axis: Axis,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("Analysis of {} (median over {} seeds)\n", self.axis.title(), self.rows.first().map_or(0, |r| r.seeds.len()));
        let _ = writeln!(s, "{:<20}{:>8}{:>8}   per-seed mIoU", "method", "mIoU", "Acc");
        for r in &self.rows {
            let per: Vec<String> = r.miou.iter().map(|m| format!("{m:.2}")).collect();
            let _ = writeln!(s, "{:<20}{:>8.2}{:>8.2}   {}", r.variant, r.median_miou, r.median_macc, per.join(" "));
        }
        s
    }
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// Trains and scores variants, memoising each `(config, seed)` so axes that
/// share the base setting reuse its runs.
pub struct Ablation<'a> {
    pub data: &'a Dataset,
    pub train: TrainConfig,
    train_set: Vec<Sample>,
    val_set: Vec<Sample>,
    cache: BTreeMap<(String, u64), Metrics>,
}

impl<'a> Ablation<'a> {
    pub fn new(data: &'a Dataset, train: TrainConfig) -> Result<Self> {
        Ok(Ablation {
            train_set: data.load_split(Split::Train)?,
            val_set: data.load_split(Split::Val)?,
            data,
            train,
            cache: BTreeMap::new(),
        })
    }

    /// Validation metrics of `cfg` trained with `seed`.
    pub fn score(&mut self, cfg: &ModelConfig, seed: u64) -> Result<Metrics> {
        let key = (serde_json::to_string(cfg)?, seed);
        if let Some(m) = self.cache.get(&key) {
            return Ok(m.clone());
        }
        check_classes(cfg, self.data)?;
        let tc = TrainConfig { seed, ..self.train.clone() };
        let mut model = SegModel::new(seed, cfg)?;
        train_model(&mut model, &self.train_set, &tc, |_| {})?;
        let m = evaluate(&model, &self.val_set, 4)?;
        self.cache.insert(key, m.clone());
        Ok(m)
    }

    pub fn run(&mut self, axis: Axis, base: &ModelConfig, seeds: &[u64]) -> Result<AblationTable> {
        if seeds.len() < 3 {
            return Err(Error::InvalidArgument(format!("ablations need at least 3 seeds, got {}", seeds.len())));
        }
        let mut rows = Vec::new();
        for (name, cfg) in axis.variants(base) {
            let mut miou = Vec::new();
            let mut macc = Vec::new();
            for &seed in seeds {
                let m = self.score(&cfg, seed)?;
                miou.push(m.miou);
                macc.push(m.macc);
            }
            rows.push(AblationRow {
                variant: name.to_string(),
                seeds: seeds.to_vec(),
                median_miou: median(&miou),
                median_macc: median(&macc),
                miou,
                macc,
            });
        }
        Ok(AblationTable { axis, rows })
    }
}
