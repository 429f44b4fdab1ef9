//! Optimization loop, evaluation and sample loading.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{EncoderMode, OptimConfig, RunConfig};
use crate::data::{
    load_checkpoint, params_to_tensors, read_clip_block, read_clip_features, read_clip_sidecar, read_scene,
    restore_params, save_checkpoint, Checkpoint, ClipFormat, DatasetManifest, ManifestPair, NamedTensor,
    OptimizerState, SynthDataset,
};
use crate::losses::{layer_terms, total_loss, LossBreakdown, SceneTarget};
use crate::metrics::{evaluate_dataset, filter_predictions, predicted_class, ClassMode, FinalPrediction, GtSample, MetricsReport};
use crate::model::{ClipInput, EgoSag, PreparedScene};
use crate::nn::ParamStore;
use crate::{Error, Result};

pub const DTYPE: DType = DType::F32;

/// One clip/scene pair ready for the model.
#[derive(Debug, Clone)]
pub struct Sample {
    pub clip_id: String,
    pub scene_id: String,
    pub class: usize,
    pub scene: Arc<PreparedScene>,
    pub clip: ClipInput,
    pub gt_points: Vec<Vec<bool>>,
    pub target: SceneTarget,
}

impl Sample {
    pub fn id(&self) -> String {
        format!("{}@{}", self.clip_id, self.scene_id)
    }

    pub fn gt(&self) -> GtSample {
        GtSample { masks: self.gt_points.clone(), classes: vec![self.class; self.gt_points.len()] }
    }
}

fn build_sample(pair: &ManifestPair, scene: Arc<PreparedScene>, clip: ClipInput, class: usize) -> Result<Sample> {
    let s = &scene.scene;
    let mut gt_points = Vec::new();
    for &j in &pair.gt_region_indices {
        let mask = s.gt_masks().get(j).ok_or_else(|| {
            Error::domain(format!("pair {}@{}: region {j} does not exist", pair.clip_id, pair.scene_id))
        })?;
        gt_points.push(mask.clone());
    }
    let target = SceneTarget::new(class, &gt_points, &scene.sp)?;
    Ok(Sample {
        clip_id: pair.clip_id.clone(),
        scene_id: pair.scene_id.clone(),
        class,
        scene,
        clip,
        gt_points,
        target,
    })
}

/// Samples of a manifest, reading every scene once.
pub fn load_samples(manifest: &DatasetManifest, cfg: &RunConfig) -> Result<Vec<Sample>> {
    let device = Device::Cpu;
    let mut scenes: HashMap<String, Arc<PreparedScene>> = HashMap::new();
    let mut out = Vec::new();
    for pair in &manifest.pairs {
        let scene = match scenes.get(&pair.scene_id) {
            Some(s) => s.clone(),
            None => {
                let s = Arc::new(PreparedScene::new(read_scene(&manifest.scene_path(&pair.scene_id))?, cfg, DTYPE, &device)?);
                scenes.insert(pair.scene_id.clone(), s.clone());
                s
            }
        };
        let (path, clip) = match cfg.model.video.encoder {
            EncoderMode::Toy => {
                let p = manifest.clip_path(&pair.clip_id, ClipFormat::Raw);
                let clip = ClipInput::Raw(read_clip_block(&p)?);
                (p, clip)
            }
            EncoderMode::Precomputed => {
                let p = manifest.clip_path(&pair.clip_id, ClipFormat::Features);
                let clip = ClipInput::from_grid(&read_clip_features(&p)?, DTYPE, &device)?;
                (p, clip)
            }
        };
        let class = read_clip_sidecar(&path)?.affordance_id.ok_or_else(|| Error::Format {
            path: path.clone(),
            message: "clip sidecar has no affordance_id".into(),
        })?;
        out.push(build_sample(pair, scene, clip, class)?);
    }
    Ok(out)
}

/// Samples of an in-memory synthetic dataset.
pub fn synth_samples(ds: &SynthDataset, manifest: &DatasetManifest, cfg: &RunConfig) -> Result<Vec<Sample>> {
    let mut scenes: HashMap<String, Arc<PreparedScene>> = HashMap::new();
    let mut out = Vec::new();
    for pair in &manifest.pairs {
        let scene = match scenes.get(&pair.scene_id) {
            Some(s) => s.clone(),
            None => {
                let raw = ds
                    .scenes
                    .iter()
                    .find(|s| s.scene_id() == pair.scene_id)
                    .ok_or_else(|| Error::domain(format!("unknown scene {}", pair.scene_id)))?;
                let s = Arc::new(PreparedScene::new(raw.clone(), cfg, DTYPE, &Device::Cpu)?);
                scenes.insert(pair.scene_id.clone(), s.clone());
                s
            }
        };
        let clip = ds
            .clips
            .iter()
            .find(|c| c.clip_id == pair.clip_id)
            .ok_or_else(|| Error::domain(format!("unknown clip {}", pair.clip_id)))?;
        out.push(build_sample(pair, scene, ClipInput::Raw(clip.block.clone()), clip.affordance_id)?);
    }
    Ok(out)
}

/// Decoupled-weight-decay Adam with persistent moments.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(cfg: &OptimConfig, ps: &ParamStore) -> Result<Self> {
        let mut m = BTreeMap::new();
        for (name, var) in ps.iter() {
            m.insert(name.clone(), var.as_tensor().zeros_like()?);
        }
        Ok(Self {
            lr: cfg.lr,
            betas: cfg.betas,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            v: m.clone(),
            m,
        })
    }

    pub fn apply(&mut self, ps: &ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let [b1, b2] = self.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (name, var) in ps.iter() {
            let Some(g) = grads.get(name) else { continue };
            let m = ((&self.m[name] * b1)? + (g * (1.0 - b1))?)?;
            let v = ((&self.v[name] * b2)? + (g.sqr()? * (1.0 - b2))?)?;
            let update = ((&m / c1)? / ((&v / c2)?.sqrt()? + self.eps)?)?;
            let theta = var.as_tensor().detach();
            let next = ((theta * (1.0 - self.lr * self.weight_decay))? - (update * self.lr)?)?;
            var.set(&next)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    pub fn state(&self) -> Result<OptimizerState> {
        let dump = |map: &BTreeMap<String, Tensor>| -> Result<Vec<NamedTensor>> {
            map.iter().map(|(k, t)| NamedTensor::from_tensor(k, t)).collect()
        };
        Ok(OptimizerState { step: self.step, m: dump(&self.m)?, v: dump(&self.v)? })
    }

    pub fn load_state(&mut self, state: &OptimizerState) -> Result<()> {
        for (map, saved) in [(&mut self.m, &state.m), (&mut self.v, &state.v)] {
            for t in saved {
                let cur = map
                    .get(&t.name)
                    .ok_or_else(|| Error::param(format!("optimizer state for unknown parameter `{}`", t.name)))?;
                let new = Tensor::from_vec(t.data.clone(), t.shape.as_slice(), cur.device())?.to_dtype(cur.dtype())?;
                if new.shape() != cur.shape() {
                    return Err(Error::param(format!("optimizer state shape mismatch for `{}`", t.name)));
                }
                map.insert(t.name.clone(), new);
            }
        }
        self.step = state.step;
        Ok(())
    }
}

/// Scale gradients so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: Option<f64>) -> Result<f64> {
    let mut sq = 0.0;
    for g in grads.values() {
        sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    }
    let norm = sq.sqrt();
    if let Some(max) = max_norm {
        if norm > max && norm.is_finite() {
            let s = max / norm;
            for g in grads.values_mut() {
                *g = (&*g * s)?;
            }
        }
    }
    Ok(norm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub pairs: Vec<String>,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalLog {
    pub step: usize,
    pub split: String,
    pub metrics: MetricsReport,
    pub class_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub metrics: MetricsReport,
    pub predictions: Vec<FinalPrediction>,
    pub gts: Vec<GtSample>,
    /// Fraction of samples whose arg-max class equals the clip's class.
    pub class_accuracy: f64,
    /// Best IoU of the top-scored surviving mask against any gt region, per sample.
    pub top1_iou: Vec<f64>,
}

pub fn evaluate(model: &EgoSag, samples: &[Sample], cfg: &RunConfig, mode: ClassMode) -> Result<EvalReport> {
    let mut predictions = Vec::with_capacity(samples.len());
    let mut correct = 0usize;
    let mut top1_iou = Vec::with_capacity(samples.len());
    for s in samples {
        let out = model.forward(&s.scene, &s.clip, &s.clip_id)?;
        let last = out.last();
        correct += (predicted_class(last)? == s.class) as usize;
        let pred = filter_predictions(last, &s.scene.sp, &cfg.loss)?;
        let best = match pred.point_masks.first() {
            Some(m) => s.gt_points.iter().map(|g| crate::metrics::mask_iou(m, g)).collect::<Result<Vec<_>>>()?.into_iter().fold(0.0, f64::max),
            None => 0.0,
        };
        top1_iou.push(best);
        predictions.push(pred);
    }
    let gts: Vec<GtSample> = samples.iter().map(Sample::gt).collect();
    let metrics = evaluate_dataset(&predictions, &gts, mode)?;
    Ok(EvalReport {
        metrics,
        predictions,
        gts,
        class_accuracy: correct as f64 / samples.len().max(1) as f64,
        top1_iou,
    })
}

/// Differentiable loss of one sample.
pub fn sample_loss(model: &EgoSag, sample: &Sample, cfg: &RunConfig) -> Result<(Tensor, LossBreakdown)> {
    let out = model.forward(&sample.scene, &sample.clip, &sample.clip_id)?;
    let terms = out
        .predictions
        .iter()
        .map(|p| layer_terms(p, &sample.target, &cfg.loss))
        .collect::<Result<Vec<_>>>()?;
    total_loss(&terms, cfg.loss.lambda)
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
    pub evals: Vec<EvalLog>,
    pub best_val_map: Option<f64>,
}

impl TrainReport {
    pub fn first_loss(&self) -> Option<f64> {
        self.steps.first().map(|s| s.loss.total)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss.total)
    }
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub ps: ParamStore,
    pub model: EgoSag,
    pub opt: AdamW,
    pub step: usize,
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let mut ps = ParamStore::new(cfg.optim.seed, DTYPE);
        let model = EgoSag::new(&mut ps, cfg)?;
        let opt = AdamW::new(&cfg.optim, &ps)?;
        Ok(Self { cfg: cfg.clone(), ps, model, opt, step: 0 })
    }

    /// Rebuild from a checkpoint written with an architecture-identical config.
    pub fn from_checkpoint(cfg: &RunConfig, path: &Path) -> Result<Self> {
        let ck = load_checkpoint(path, Some(&cfg.arch().hash()))?;
        let mut t = Self::new(cfg)?;
        restore_params(&t.ps, &ck.params)?;
        t.opt.load_state(&ck.optimizer)?;
        t.step = ck.step as usize;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            config_hash: self.cfg.arch().hash(),
            config: self.cfg.to_toml()?,
            step: self.step as u64,
            params: params_to_tensors(&self.ps)?,
            optimizer: self.opt.state()?,
        })
    }

    /// One optimizer step over `batch`, accumulating per-sample gradients.
    pub fn train_step(&mut self, batch: &[&Sample], epoch: usize) -> Result<StepLog> {
        let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut parts = Vec::with_capacity(batch.len());
        let ids: Vec<String> = batch.iter().map(|s| s.id()).collect();
        for s in batch {
            let (loss, breakdown) = sample_loss(&self.model, s, &self.cfg)?;
            if !breakdown.total.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at step {} on pairs {ids:?}: {breakdown:?}",
                    self.step + 1
                )));
            }
            let grads = (loss / batch.len() as f64)?.backward()?;
            for (name, var) in self.ps.iter() {
                if let Some(g) = grads.get(var.as_tensor()) {
                    let g = g.detach();
                    let next = match acc.remove(name) {
                        Some(prev) => (prev + g)?,
                        None => g,
                    };
                    acc.insert(name.clone(), next);
                }
            }
            parts.push(breakdown);
        }
        let grad_norm = clip_grad_norm(&mut acc, self.cfg.optim.grad_clip)?;
        if !grad_norm.is_finite() {
            return Err(Error::Numerical(format!("non-finite gradient norm at step {} on pairs {ids:?}", self.step + 1)));
        }
        self.opt.apply(&self.ps, &acc)?;
        self.step += 1;
        Ok(StepLog {
            step: self.step,
            epoch,
            pairs: ids,
            loss: LossBreakdown::mean(&parts, self.cfg.loss.lambda),
            grad_norm,
            lr: self.opt.lr,
        })
    }

    fn budget(&self, n_train: usize) -> usize {
        let per_epoch = n_train.div_ceil(self.cfg.optim.batch);
        self.cfg.optim.steps.unwrap_or(self.cfg.optim.epochs * per_epoch)
    }

    /// Train on `train`, validating on `val` every `eval_every` steps and at
    /// the end. With `out_dir` set, writes `log.jsonl`, `config.toml`,
    /// `best.ckpt` and `last.ckpt` there.
    pub fn fit(&mut self, train: &[Sample], val: &[Sample], out_dir: Option<&Path>) -> Result<TrainReport> {
        if train.is_empty() {
            return Err(Error::domain("no training pairs"));
        }
        let mut log = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join("config.toml"), self.cfg.to_toml()?)?;
                Some(BufWriter::new(File::create(dir.join("log.jsonl"))?))
            }
            None => None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.optim.seed);
        let budget = self.budget(train.len());
        let mut report = TrainReport::default();
        let mut order: Vec<usize> = Vec::new();
        let mut epoch = 0;
        let mut done = 0;
        while done < budget {
            if order.is_empty() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
                epoch += 1;
            }
            let take = self.cfg.optim.batch.min(order.len());
            let batch: Vec<&Sample> = (0..take).map(|_| &train[order.pop().unwrap()]).collect();
            let entry = match self.train_step(&batch, epoch) {
                Ok(e) => e,
                Err(e @ Error::Numerical(_)) => {
                    if let Some(dir) = out_dir {
                        let ids: Vec<String> = batch.iter().map(|s| s.id()).collect();
                        let dump = serde_json::json!({ "step": self.step + 1, "pairs": ids, "error": e.to_string() });
                        std::fs::write(dir.join("nan_dump.json"), serde_json::to_string_pretty(&dump)?)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            done += 1;
            tracing::debug!(step = entry.step, total = entry.loss.total, "train step");
            if let Some(w) = log.as_mut() {
                writeln!(w, "{}", serde_json::to_string(&serde_json::json!({ "train": entry }))?)?;
            }
            report.steps.push(entry);
            let eval_now = done == budget || self.cfg.optim.eval_every.is_some_and(|k| k > 0 && done % k == 0);
            if eval_now && !val.is_empty() {
                let r = evaluate(&self.model, val, &self.cfg, ClassMode::Aware)?;
                let e = EvalLog {
                    step: self.step,
                    split: "val".into(),
                    metrics: r.metrics.clone(),
                    class_accuracy: r.class_accuracy,
                };
                tracing::info!(step = self.step, map = e.metrics.map, ap25 = e.metrics.ap25, "validation");
                if let Some(w) = log.as_mut() {
                    writeln!(w, "{}", serde_json::to_string(&serde_json::json!({ "eval": e }))?)?;
                }
                if report.best_val_map.is_none_or(|b| e.metrics.map > b) {
                    report.best_val_map = Some(e.metrics.map);
                    if let Some(dir) = out_dir {
                        save_checkpoint(&self.checkpoint()?, &dir.join("best.ckpt"))?;
                    }
                }
                report.evals.push(e);
            }
        }
        if let Some(mut w) = log {
            w.flush()?;
        }
        if let Some(dir) = out_dir {
            let ck = self.checkpoint()?;
            save_checkpoint(&ck, &dir.join("last.ckpt"))?;
            if val.is_empty() {
                save_checkpoint(&ck, &dir.join("best.ckpt"))?;
            }
        }
        Ok(report)
    }
}

pub fn output_dir(cfg: &RunConfig, override_dir: Option<PathBuf>) -> PathBuf {
    override_dir.unwrap_or_else(|| cfg.output.clone())
}
