//! Loss, learning-rate schedule, AdamW, evaluation and the epoch loop with
//! checkpointing.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{collate, load_manifest, load_triplet, preprocess_dual, DatasetManifest, DualResSample, Mask, Split};
use crate::decoder::binarize;
use crate::error::{Error, Result};
use crate::lora::TrainabilityPolicy;
use crate::metrics::EvalReport;
use crate::model::{ModelConfig, ModelInput, RefSegModel, TextConditioning};
use crate::params::{load_checkpoint_file, ParamStore};
use crate::text::Tokenizer;

pub const CHECKPOINT_FORMAT: &str = "refseg-checkpoint-v1";
const OPTIM_PREFIX: &str = "optim.";

/// Mean logit-form binary cross-entropy:
/// `max(x, 0) − x·y + ln(1 + e^{−|x|})`.
pub fn bce_loss(logits: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if logits.dims() != gt.dims() {
        return Err(Error::shape(format!(
            "logits {:?} vs ground truth {:?}",
            logits.dims(),
            gt.dims()
        )));
    }
    let gt = gt.to_dtype(logits.dtype())?;
    let softplus = logits.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    let per_pixel = ((logits.relu()? - (logits * gt)?)? + softplus)?;
    Ok(per_pixel.mean_all()?)
}

/// Linear warmup to `base_lr`, then cosine decay to zero at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> Result<f64> {
    if step > total_steps || warmup_steps >= total_steps {
        return Err(Error::config(format!(
            "schedule needs step {step} <= total {total_steps} and warmup {warmup_steps} < total"
        )));
    }
    if step < warmup_steps {
        return Ok(base_lr * step as f64 / warmup_steps as f64);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Decoupled-weight-decay Adam over the trainable variables.
#[derive(Debug)]
pub struct AdamW {
    vars: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(vars: Vec<(String, Var)>, weight_decay: f64) -> Result<Self> {
        let m = vars
            .iter()
            .map(|(_, v)| v.as_tensor().zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self {
            vars,
            m,
            v,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (_, var)) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // gradients can carry their own op history; keep it out of the state
            let g = g.detach();
            let m = ((&self.m[i] * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((&self.v[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let update = ((&m / c1)? / ((&v / c2)?.sqrt()? + self.eps)?)?;
            let decayed = (var.as_tensor().detach() * (1.0 - lr * self.weight_decay))?;
            var.set(&(decayed - (update * lr)?)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }

    pub fn state(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (i, (name, _)) in self.vars.iter().enumerate() {
            out.insert(format!("{OPTIM_PREFIX}m.{name}"), self.m[i].clone());
            out.insert(format!("{OPTIM_PREFIX}v.{name}"), self.v[i].clone());
        }
        out.insert(
            format!("{OPTIM_PREFIX}t"),
            Tensor::new(&[self.t as f32], &candle_core::Device::Cpu)?,
        );
        Ok(out)
    }

    pub fn load_state(&mut self, state: &HashMap<String, Tensor>) -> Result<()> {
        let get = |key: String| {
            state
                .get(&key)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor {key}")))
        };
        for (i, (name, var)) in self.vars.iter().enumerate() {
            let dtype = var.dtype();
            self.m[i] = get(format!("{OPTIM_PREFIX}m.{name}"))?.to_dtype(dtype)?;
            self.v[i] = get(format!("{OPTIM_PREFIX}v.{name}"))?.to_dtype(dtype)?;
        }
        self.t = get(format!("{OPTIM_PREFIX}t"))?.to_vec1::<f32>()?[0] as usize;
        Ok(())
    }
}

/// One optimizer update on a batch. Returns the loss before the update.
pub fn train_step(
    model: &RefSegModel,
    optimizer: &mut AdamW,
    input: &ModelInput,
    gt: &Tensor,
    lr: f64,
    step: usize,
) -> Result<f64> {
    let out = model.forward(input, true)?;
    let loss = bce_loss(out.logits(), gt)?;
    let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { step, loss: value });
    }
    let grads = loss.backward()?;
    optimizer.step(&grads, lr)?;
    Ok(value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub policy: TrainabilityPolicy,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Defaults to 5% of the total step count.
    pub warmup_steps: Option<usize>,
    pub weight_decay: f64,
    pub seed: u64,
    pub conditioning: TextConditioning,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            policy: TrainabilityPolicy::default(),
            lr: 1e-4,
            epochs: 200,
            batch_size: 32,
            warmup_steps: None,
            weight_decay: 0.01,
            seed: 0,
            conditioning: TextConditioning::Encoder,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if self.policy.rank == 0 {
            return Err(Error::config("lora rank must be positive"));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size)
    }

    pub fn warmup_for(&self, total_steps: usize) -> usize {
        let w = self
            .warmup_steps
            .unwrap_or_else(|| (total_steps as f64 * 0.05).ceil() as usize);
        w.min(total_steps.saturating_sub(1))
    }
}

/// Turns batches of samples into binary masks at ground-truth resolution.
pub trait Predictor {
    fn predict(&self, batch: &[&DualResSample]) -> Result<Vec<Mask>>;
}

pub struct ModelPredictor<'a> {
    pub model: &'a RefSegModel,
    pub dtype: DType,
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, batch: &[&DualResSample]) -> Result<Vec<Mask>> {
        let (input, _) = collate(batch, self.dtype)?;
        let logits = self.model.forward(&input, false)?.decoded.logits;
        logits_to_masks(&logits)
    }
}

/// `(B, H, W)` logits → binary masks.
pub fn logits_to_masks(logits: &Tensor) -> Result<Vec<Mask>> {
    let (b, h, w) = logits.dims3()?;
    let bin = binarize(logits)?.to_dtype(DType::U8)?;
    (0..b)
        .map(|i| Mask::new(h, w, bin.get(i)?.flatten_all()?.to_vec1::<u8>()?))
        .collect()
}

pub fn evaluate(predictor: &dyn Predictor, samples: &[DualResSample], batch_size: usize) -> Result<EvalReport> {
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&DualResSample> = chunk.iter().collect();
        preds.extend(predictor.predict(&refs)?);
    }
    let pairs: Vec<(&Mask, &Mask)> = preds.iter().zip(samples.iter().map(|s| &s.mask)).collect();
    EvalReport::from_pairs(&pairs)
}

/// Vocabulary over the training expressions (all expressions when the
/// training split is empty).
pub fn tokenizer_for(manifest: &DatasetManifest, max_len: usize) -> Result<Tokenizer> {
    let train = manifest.split(Split::Train);
    let source = if train.is_empty() {
        manifest.entries.iter().collect()
    } else {
        train
    };
    Tokenizer::from_expressions(source.iter().map(|e| e.expression.as_str()), max_len)
}

pub fn load_split(
    manifest: &DatasetManifest,
    split: Split,
    cfg: &ModelConfig,
    tokenizer: &Tokenizer,
) -> Result<Vec<DualResSample>> {
    manifest
        .split(split)
        .into_iter()
        .map(|e| preprocess_dual(&load_triplet(e)?, cfg.image_size_low, cfg.image_size_high, tokenizer))
        .collect()
}

/// Preprocessed train and val splits with their tokenizer.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub tokenizer: Tokenizer,
    pub train: Vec<DualResSample>,
    pub val: Vec<DualResSample>,
}

impl Dataset {
    pub fn load(manifest: &DatasetManifest, cfg: &ModelConfig) -> Result<Self> {
        let tokenizer = tokenizer_for(manifest, cfg.max_len)?;
        Ok(Self {
            train: load_split(manifest, Split::Train, cfg, &tokenizer)?,
            val: load_split(manifest, Split::Val, cfg, &tokenizer)?,
            tokenizer,
        })
    }
}

/// A model with its parameters, optimizer and progress counters.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub store: ParamStore,
    pub model: RefSegModel,
    pub optimizer: AdamW,
    pub tokenizer: Tokenizer,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub best_giou: f64,
}

fn build_model(
    cfg: &TrainConfig,
    tokenizer: &Tokenizer,
    preload: HashMap<String, Tensor>,
) -> Result<(ParamStore, RefSegModel)> {
    let mut store = ParamStore::new(cfg.seed, DType::F32);
    store.preload(preload);
    let (mut model, _) = RefSegModel::build(&mut store, &cfg.model, tokenizer.vocab_size(), &cfg.policy)?;
    model.set_conditioning(cfg.conditioning);
    let leftover = store.unclaimed();
    if !leftover.is_empty() {
        return Err(Error::Checkpoint(format!(
            "checkpoint tensors not used by this configuration: {}",
            leftover.join(", ")
        )));
    }
    Ok((store, model))
}

/// Everything a checkpoint file holds.
pub struct Checkpoint {
    pub cfg: TrainConfig,
    pub tokenizer: Tokenizer,
    pub params: HashMap<String, Tensor>,
    pub optimizer: HashMap<String, Tensor>,
    pub epoch: usize,
    pub step: usize,
    pub best_giou: f64,
}

fn meta<'a>(m: &'a HashMap<String, String>, key: &str) -> Result<&'a str> {
    m.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Checkpoint(format!("missing metadata {key:?}")))
}

impl Checkpoint {
    pub fn read(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Checkpoint(format!("not found: {}", path.display())));
        }
        let (tensors, metadata) = load_checkpoint_file(path)?;
        if meta(&metadata, "format")? != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("{} is not a {CHECKPOINT_FORMAT} file", path.display())));
        }
        let num = |key: &str| -> Result<usize> {
            meta(&metadata, key)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad metadata {key:?}")))
        };
        let (optimizer, params) = tensors
            .into_iter()
            .partition(|(k, _)| k.starts_with(OPTIM_PREFIX));
        Ok(Self {
            cfg: serde_json::from_str(meta(&metadata, "train_config")?)?,
            tokenizer: Tokenizer::from_vocab_str(meta(&metadata, "vocab")?)?,
            params,
            optimizer,
            epoch: num("epoch")?,
            step: num("step")?,
            best_giou: meta(&metadata, "best_giou")?
                .parse()
                .map_err(|_| Error::Checkpoint("bad metadata \"best_giou\"".into()))?,
        })
    }
}

impl Trainer {
    pub fn new(cfg: TrainConfig, tokenizer: Tokenizer) -> Result<Self> {
        cfg.validate()?;
        let (store, model) = build_model(&cfg, &tokenizer, HashMap::new())?;
        let optimizer = AdamW::new(store.trainable_vars(), cfg.weight_decay)?;
        Ok(Self {
            cfg,
            store,
            model,
            optimizer,
            tokenizer,
            epoch: 0,
            step: 0,
            best_giou: f64::NEG_INFINITY,
        })
    }

    /// Restores parameters, optimizer state and counters. `model_override`
    /// replaces the stored architecture (shape mismatches surface as errors).
    pub fn from_checkpoint(path: &Path, model_override: Option<&ModelConfig>) -> Result<Self> {
        let ck = Checkpoint::read(path)?;
        let mut cfg = ck.cfg;
        if let Some(m) = model_override {
            cfg.model = m.clone();
        }
        cfg.validate()?;
        let (store, model) = build_model(&cfg, &ck.tokenizer, ck.params)?;
        let mut optimizer = AdamW::new(store.trainable_vars(), cfg.weight_decay)?;
        if !ck.optimizer.is_empty() {
            optimizer.load_state(&ck.optimizer)?;
        }
        Ok(Self {
            cfg,
            store,
            model,
            optimizer,
            tokenizer: ck.tokenizer,
            epoch: ck.epoch,
            step: ck.step,
            best_giou: ck.best_giou,
        })
    }

    pub fn predictor(&self) -> ModelPredictor<'_> {
        ModelPredictor {
            model: &self.model,
            dtype: self.store.dtype(),
        }
    }

    pub fn save(&self, path: &Path, with_optimizer: bool) -> Result<()> {
        let extra = if with_optimizer {
            self.optimizer.state()?
        } else {
            BTreeMap::new()
        };
        let metadata = HashMap::from([
            ("format".to_string(), CHECKPOINT_FORMAT.to_string()),
            ("train_config".to_string(), serde_json::to_string(&self.cfg)?),
            ("vocab".to_string(), self.tokenizer.to_vocab_string()),
            ("epoch".to_string(), self.epoch.to_string()),
            ("step".to_string(), self.step.to_string()),
            ("best_giou".to_string(), self.best_giou.to_string()),
        ]);
        self.store.save(path, &extra, metadata)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LogRecord {
    Step { step: usize, loss: f64, lr: f64 },
    Eval { epoch: usize, step: usize, val_giou: f64, val_ciou: f64 },
}

impl LogRecord {
    fn step(&self) -> usize {
        match self {
            LogRecord::Step { step, .. } | LogRecord::Eval { step, .. } => *step,
        }
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Validation report of the final model.
    pub final_report: EvalReport,
    pub best_giou: f64,
    pub steps: usize,
    pub log_path: PathBuf,
    pub best_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const LAST_CHECKPOINT: &str = "last.safetensors";
pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const FINAL_CHECKPOINT: &str = "final.safetensors";

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}

/// Trains on `data`, writing the log and checkpoints into `out_dir`. With
/// `resume`, continues from `out_dir/last.safetensors` when present.
pub fn train_on(cfg: &TrainConfig, data: &Dataset, out_dir: &Path, resume: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::config("training split is empty"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOG_FILE);
    let last_path = out_dir.join(LAST_CHECKPOINT);
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let final_path = out_dir.join(FINAL_CHECKPOINT);

    let mut trainer = if resume && last_path.is_file() {
        let t = Trainer::from_checkpoint(&last_path, None)?;
        if t.cfg != *cfg {
            return Err(Error::config(format!(
                "{} was written with a different configuration",
                last_path.display()
            )));
        }
        log::info!("resuming from epoch {} (step {})", t.epoch, t.step);
        t
    } else {
        Trainer::new(cfg.clone(), data.tokenizer.clone())?
    };

    // keep only log records the checkpoint already covers
    let mut kept = Vec::new();
    if trainer.step > 0 && log_path.is_file() {
        kept = read_log(&log_path)?
            .into_iter()
            .filter(|r| r.step() <= trainer.step && !matches!(r, LogRecord::Step { step, .. } if *step >= trainer.step))
            .collect();
    }
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    for r in &kept {
        writeln!(log, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(&log_path, e))?;
    }

    let eval_set = if data.val.is_empty() {
        log::warn!("validation split is empty, evaluating on the training split");
        &data.train
    } else {
        &data.val
    };
    let per_epoch = cfg.steps_per_epoch(data.train.len());
    let total = per_epoch * cfg.epochs;
    let warmup = cfg.warmup_for(total);
    let dtype = trainer.store.dtype();

    while trainer.epoch < cfg.epochs {
        let order = epoch_order(cfg.seed, trainer.epoch, data.train.len());
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&DualResSample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let (input, gt) = collate(&batch, dtype)?;
            let lr = lr_at(trainer.step, total, warmup, cfg.lr)?;
            let loss = train_step(&trainer.model, &mut trainer.optimizer, &input, &gt, lr, trainer.step)?;
            let rec = LogRecord::Step {
                step: trainer.step,
                loss,
                lr,
            };
            writeln!(log, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&log_path, e))?;
            trainer.step += 1;
        }
        trainer.epoch += 1;
        let report = evaluate(&trainer.predictor(), eval_set, cfg.batch_size)?;
        log::info!(
            "epoch {}/{}: val gIoU {:.4} cIoU {:.4}",
            trainer.epoch,
            cfg.epochs,
            report.giou,
            report.ciou
        );
        let rec = LogRecord::Eval {
            epoch: trainer.epoch,
            step: trainer.step,
            val_giou: report.giou,
            val_ciou: report.ciou,
        };
        writeln!(log, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&log_path, e))?;
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        if report.giou > trainer.best_giou {
            trainer.best_giou = report.giou;
            trainer.save(&best_path, false)?;
        }
        trainer.save(&last_path, true)?;
    }
    trainer.save(&final_path, false)?;
    let final_report = evaluate(&trainer.predictor(), eval_set, cfg.batch_size)?;
    Ok(TrainOutcome {
        final_report,
        best_giou: trainer.best_giou,
        steps: trainer.step,
        log_path,
        best_checkpoint: best_path,
        final_checkpoint: final_path,
    })
}

pub fn train_loop(cfg: &TrainConfig, manifest_path: &Path, out_dir: &Path, resume: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = load_manifest(manifest_path)?;
    let data = Dataset::load(&manifest, &cfg.model)?;
    train_on(cfg, &data, out_dir, resume)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn bce_at_zero_logits_is_ln2() {
        let x = Tensor::zeros((4, 4), DType::F64, &Device::Cpu).unwrap();
        let y = Tensor::ones((4, 4), DType::F64, &Device::Cpu).unwrap();
        assert!((scalar(&bce_loss(&x, &y).unwrap()) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_matches_scalar_formula() {
        let xs = [-3.0, -0.5, 0.0, 0.2, 1.5, 4.0, -7.0, 2.5];
        let ys = [0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let expected: f64 = xs
            .iter()
            .zip(ys)
            .map(|(&x, y)| -(y * sig(x).ln() + (1.0 - y) * (1.0 - sig(x)).ln()))
            .sum::<f64>()
            / 8.0;
        let x = Tensor::new(&xs, &Device::Cpu).unwrap();
        let y = Tensor::new(&ys, &Device::Cpu).unwrap();
        assert!((scalar(&bce_loss(&x, &y).unwrap()) - expected).abs() < 1e-12);
    }

    #[test]
    fn bce_extreme_logits_stay_finite() {
        let x = Tensor::new(&[80.0f32, -80.0], &Device::Cpu).unwrap();
        let y = Tensor::new(&[1.0f32, 0.0], &Device::Cpu).unwrap();
        let l = scalar(&bce_loss(&x, &y).unwrap());
        assert!(l.is_finite() && l < 1e-6);
        let z = Tensor::new(&[1.0f32, 0.0, 1.0], &Device::Cpu).unwrap();
        assert!(bce_loss(&x, &z).is_err());
    }

    #[test]
    fn schedule_shape() {
        let base = 1e-4;
        assert_eq!(lr_at(0, 100, 10, base).unwrap(), 0.0);
        assert!((lr_at(10, 100, 10, base).unwrap() - base).abs() < 1e-18);
        assert!((lr_at(55, 100, 10, base).unwrap() - base / 2.0).abs() < 1e-15);
        assert!(lr_at(100, 100, 10, base).unwrap().abs() < 1e-18);
        // continuous at the warmup boundary
        let before = lr_at(9, 1000, 10, base).unwrap();
        assert!((before - 0.9 * base).abs() < 1e-15);
        assert!(lr_at(101, 100, 10, base).is_err());
        assert!(lr_at(0, 10, 10, base).is_err());
    }

    #[test]
    fn adamw_moves_against_gradient() {
        let var = Var::new(&[1.0f64, -1.0], &Device::Cpu).unwrap();
        let mut opt = AdamW::new(vec![("w".into(), var.clone())], 0.0).unwrap();
        let loss = var.as_tensor().sqr().unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap(), 0.1).unwrap();
        let w = var.as_tensor().to_vec1::<f64>().unwrap();
        // first Adam step has magnitude lr regardless of gradient scale
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
        let state = opt.state().unwrap();
        let mut fresh = AdamW::new(vec![("w".into(), var)], 0.0).unwrap();
        fresh.load_state(&state.into_iter().collect()).unwrap();
        assert_eq!(fresh.steps_taken(), 1);
    }

    #[test]
    fn decoupled_decay_without_gradient_signal() {
        let var = Var::new(&[2.0f64], &Device::Cpu).unwrap();
        let mut opt = AdamW::new(vec![("w".into(), var.clone())], 0.5).unwrap();
        // zero gradient: only the decay acts
        let zero = Tensor::zeros(1, DType::F64, &Device::Cpu).unwrap();
        let loss = (var.as_tensor() * zero).unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap(), 0.1).unwrap();
        let got = var.as_tensor().to_vec1::<f64>().unwrap()[0];
        assert!((got - 2.0 * 0.95).abs() < 1e-12, "{got}");
    }

    #[test]
    fn default_config_matches_recipe() {
        let c = TrainConfig::default();
        assert_eq!((c.lr, c.epochs, c.batch_size), (1e-4, 200, 32));
        assert_eq!(c.warmup_for(1000), 50);
        c.validate().unwrap();
    }
}
