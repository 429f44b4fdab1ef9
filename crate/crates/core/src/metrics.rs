//! Inference-time filtering and instance-mask AP/recall evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use candle_core::DType;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::bqd::LayerPrediction;
use crate::config::LossConfig;
use crate::nn::tensor_to_array;
use crate::pointcloud::SuperpointPartition;
use crate::{Error, Result};

/// The ten IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalPrediction {
    pub point_masks: Vec<Vec<bool>>,
    pub scores: Vec<f64>,
    pub affordance_id: usize,
}

impl FinalPrediction {
    pub fn empty(affordance_id: usize) -> Self {
        Self { point_masks: Vec::new(), scores: Vec::new(), affordance_id }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Rank queries by score, keep the best `top_k`, drop scores below `tau`,
/// binarize the survivors at `binarize` and expand them to points. Empty
/// masks are dropped.
pub fn filter_masks(
    sp_masks: &Array2<f64>,
    scores: &[f64],
    affordance_id: usize,
    sp: &SuperpointPartition,
    tau: f64,
    top_k: Option<usize>,
    binarize: f64,
) -> Result<FinalPrediction> {
    let (m, q) = sp_masks.dim();
    if q != scores.len() || m != sp.count() {
        return Err(Error::param(format!(
            "{m}x{q} masks, {} scores, {} superpoints",
            scores.len(),
            sp.count()
        )));
    }
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(top_k.unwrap_or(q));
    let mut out = FinalPrediction::empty(affordance_id);
    for i in order.into_iter().filter(|&i| scores[i] >= tau) {
        let on: Vec<bool> = sp_masks.column(i).iter().map(|&p| p >= binarize).collect();
        let mask: Vec<bool> = sp.assignment().iter().map(|&s| on[s]).collect();
        if mask.iter().any(|&b| b) {
            out.point_masks.push(mask);
            out.scores.push(scores[i]);
        }
    }
    Ok(out)
}

/// Final-layer prediction to point masks; the class is the arg-max logit.
pub fn filter_predictions(pred: &LayerPrediction, sp: &SuperpointPartition, cfg: &LossConfig) -> Result<FinalPrediction> {
    let masks = tensor_to_array(&pred.sp_masks)?;
    let scores: Vec<f64> = pred.scores.to_dtype(DType::F64)?.to_vec1()?;
    filter_masks(&masks, &scores, predicted_class(pred)?, sp, cfg.tau, cfg.top_k, cfg.binarize)
}

pub fn predicted_class(pred: &LayerPrediction) -> Result<usize> {
    let logits: Vec<f64> = pred.class_logits.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
    Ok(logits
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0)
}

pub fn mask_iou(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::param(format!("masks of length {} and {}", a.len(), b.len())));
    }
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// Ground truth of one evaluated sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtSample {
    pub masks: Vec<Vec<bool>>,
    pub classes: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassMode {
    /// Predictions only match gt regions of their own class.
    #[default]
    Aware,
    Agnostic,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassMetrics {
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP25")]
    pub ap25: f64,
    #[serde(rename = "RC")]
    pub rc: f64,
    #[serde(rename = "RC50")]
    pub rc50: f64,
    #[serde(rename = "RC25")]
    pub rc25: f64,
    pub n_gt: usize,
}

/// Percentages in `[0, 100]`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP25")]
    pub ap25: f64,
    #[serde(rename = "mRC")]
    pub mrc: f64,
    #[serde(rename = "RC50")]
    pub rc50: f64,
    #[serde(rename = "RC25")]
    pub rc25: f64,
    pub per_class: BTreeMap<usize, ClassMetrics>,
}

impl MetricsReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}", "class", "mAP", "AP50", "AP25", "mRC", "RC50", "RC25");
        for (c, m) in &self.per_class {
            let _ = writeln!(
                s,
                "{:<8} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>8.3}",
                c, m.ap, m.ap50, m.ap25, m.rc, m.rc50, m.rc25
            );
        }
        let _ = writeln!(
            s,
            "{:<8} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>8.3}",
            "all", self.map, self.ap50, self.ap25, self.mrc, self.rc50, self.rc25
        );
        s
    }
}

/// All-point interpolated AP and final recall of a ranked TP/FP list.
pub fn ap_and_recall(tp: &[bool], n_gt: usize) -> (f64, f64) {
    if n_gt == 0 {
        return (0.0, 0.0);
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let ap = tp.iter().zip(&precision).filter(|(t, _)| **t).map(|(_, p)| p).sum::<f64>() / n_gt as f64;
    (ap, hits as f64 / n_gt as f64)
}

struct Ranked {
    sample: usize,
    index: usize,
    score: f64,
}

/// Precomputed IoU of every prediction with every gt region of its sample.
fn iou_tables(preds: &[FinalPrediction], gts: &[GtSample]) -> Result<Vec<Vec<Vec<f64>>>> {
    preds
        .iter()
        .zip(gts)
        .map(|(p, g)| {
            p.point_masks
                .iter()
                .map(|m| g.masks.iter().map(|gm| mask_iou(m, gm)).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

fn class_curve(
    preds: &[FinalPrediction],
    gts: &[GtSample],
    ious: &[Vec<Vec<f64>>],
    class: Option<usize>,
    threshold: f64,
) -> (f64, f64) {
    let gt_ok = |s: usize, j: usize| class.is_none_or(|c| gts[s].classes[j] == c);
    let n_gt: usize = gts.iter().enumerate().map(|(s, g)| (0..g.masks.len()).filter(|&j| gt_ok(s, j)).count()).sum();
    let mut ranked: Vec<Ranked> = preds
        .iter()
        .enumerate()
        .filter(|(_, p)| class.is_none_or(|c| p.affordance_id == c))
        .flat_map(|(s, p)| p.scores.iter().enumerate().map(move |(index, &score)| Ranked { sample: s, index, score }))
        .collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.sample.cmp(&b.sample)).then(a.index.cmp(&b.index)));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.masks.len()]).collect();
    let tp: Vec<bool> = ranked
        .iter()
        .map(|r| {
            let mut best: Option<(usize, f64)> = None;
            for (j, &iou) in ious[r.sample][r.index].iter().enumerate() {
                if gt_ok(r.sample, j) && !used[r.sample][j] && iou >= threshold && best.is_none_or(|b| iou > b.1) {
                    best = Some((j, iou));
                }
            }
            match best {
                Some((j, _)) => {
                    used[r.sample][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    ap_and_recall(&tp, n_gt)
}

pub fn evaluate_dataset(preds: &[FinalPrediction], gts: &[GtSample], mode: ClassMode) -> Result<MetricsReport> {
    if preds.len() != gts.len() {
        return Err(Error::param(format!("{} predictions for {} samples", preds.len(), gts.len())));
    }
    for (s, g) in gts.iter().enumerate() {
        if g.masks.len() != g.classes.len() {
            return Err(Error::param(format!("sample {s}: masks and classes differ in length")));
        }
    }
    let ious = iou_tables(preds, gts)?;
    let classes: Vec<Option<usize>> = match mode {
        ClassMode::Aware => {
            let mut c: Vec<usize> = gts.iter().flat_map(|g| g.classes.iter().copied()).collect();
            c.sort_unstable();
            c.dedup();
            c.into_iter().map(Some).collect()
        }
        ClassMode::Agnostic => {
            if gts.iter().any(|g| !g.masks.is_empty()) {
                vec![None]
            } else {
                vec![]
            }
        }
    };
    let mut report = MetricsReport::default();
    for class in &classes {
        let n_gt = gts
            .iter()
            .map(|g| g.classes.iter().filter(|&&c| class.is_none_or(|k| k == c)).count())
            .sum();
        let at = |t: f64| class_curve(preds, gts, &ious, *class, t);
        let sweep: Vec<(f64, f64)> = iou_thresholds().iter().map(|&t| at(t)).collect();
        let (ap25, rc25) = at(0.25);
        let m = ClassMetrics {
            ap: 100.0 * sweep.iter().map(|x| x.0).sum::<f64>() / sweep.len() as f64,
            ap50: 100.0 * sweep[0].0,
            ap25: 100.0 * ap25,
            rc: 100.0 * sweep.iter().map(|x| x.1).sum::<f64>() / sweep.len() as f64,
            rc50: 100.0 * sweep[0].1,
            rc25: 100.0 * rc25,
            n_gt,
        };
        report.per_class.insert(class.unwrap_or(usize::MAX), m);
    }
    let n = report.per_class.len();
    if n > 0 {
        let avg = |f: fn(&ClassMetrics) -> f64| report.per_class.values().map(f).sum::<f64>() / n as f64;
        report.map = avg(|m| m.ap);
        report.ap50 = avg(|m| m.ap50);
        report.ap25 = avg(|m| m.ap25);
        report.mrc = avg(|m| m.rc);
        report.rc50 = avg(|m| m.rc50);
        report.rc25 = avg(|m| m.rc25);
    }
    Ok(report)
}

/// Serialized predictions of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionDump {
    pub scene_id: String,
    pub clip_id: String,
    pub affordance_id: usize,
    pub predictions: Vec<DumpedMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpedMask {
    pub point_indices: Vec<usize>,
    pub score: f64,
    pub affordance_id: usize,
}

impl PredictionDump {
    pub fn new(scene_id: &str, clip_id: &str, pred: &FinalPrediction) -> Self {
        Self {
            scene_id: scene_id.to_string(),
            clip_id: clip_id.to_string(),
            affordance_id: pred.affordance_id,
            predictions: pred
                .point_masks
                .iter()
                .zip(&pred.scores)
                .map(|(m, &score)| DumpedMask {
                    point_indices: m.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect(),
                    score,
                    affordance_id: pred.affordance_id,
                })
                .collect(),
        }
    }
}
