//! Set matching between predicted and ground-truth masks, and the training
//! objective.

use candle_core::{DType, Tensor, D};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::bqd::LayerPrediction;
use crate::config::{DiceVariant, LossConfig};
use crate::nn::{log_softmax_last, softmax_last, tensor_to_array};
use crate::pointcloud::SuperpointPartition;
use crate::{Error, Result};

/// Smoothed Dice loss `1 - 2(p.g + 1)/(sum p + sum g + 1)` (literal) or
/// `1 - (2 p.g + 1)/(sum p + sum g + 1)` (standard).
pub fn dice_loss(pred: &[f64], gt: &[bool], variant: DiceVariant) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::param(format!("dice inputs of length {} and {}", pred.len(), gt.len())));
    }
    let inter: f64 = pred.iter().zip(gt).filter(|(_, &g)| g).map(|(p, _)| p).sum();
    let sp: f64 = pred.iter().sum();
    let sg = gt.iter().filter(|&&g| g).count() as f64;
    Ok(match variant {
        DiceVariant::Literal => 1.0 - 2.0 * (inter + 1.0) / (sp + sg + 1.0),
        DiceVariant::Standard => 1.0 - (2.0 * inter + 1.0) / (sp + sg + 1.0),
    })
}

/// Mean binary cross-entropy with probabilities clamped to `[clamp, 1 - clamp]`.
pub fn bce_loss(pred: &[f64], gt: &[bool], clamp: f64) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::param("bce inputs must be non-empty and of equal length"));
    }
    let total: f64 = pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| {
            let p = p.clamp(clamp, 1.0 - clamp);
            if g {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / pred.len() as f64)
}

/// `Q x J` matching cost `zeta_1 * BCE + zeta_2 * Dice` between the columns
/// of `sp_masks` (`M x Q`) and the pooled ground-truth masks.
pub fn matching_cost(
    sp_masks: &Array2<f64>,
    gt_sp_masks: &[Vec<bool>],
    zeta: [f64; 2],
    clamp: f64,
    variant: DiceVariant,
) -> Result<Array2<f64>> {
    let (m, q) = sp_masks.dim();
    let mut cost = Array2::zeros((q, gt_sp_masks.len()));
    for i in 0..q {
        let col: Vec<f64> = sp_masks.column(i).to_vec();
        for (j, gt) in gt_sp_masks.iter().enumerate() {
            if gt.len() != m {
                return Err(Error::param(format!("gt mask {j} has {} superpoints, expected {m}", gt.len())));
            }
            cost[[i, j]] = zeta[0] * bce_loss(&col, gt, clamp)? + zeta[1] * dice_loss(&col, gt, variant)?;
        }
    }
    Ok(cost)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `(prediction, gt)` pairs sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    pub cost_matrix: Array2<f64>,
    pub unmatched_preds: Vec<usize>,
    pub total_cost: f64,
}

/// Minimum-cost assignment for `n <= m` (rows to distinct columns) by
/// shortest augmenting paths with potentials. Returns the column of every row.
fn assign_rows(cost: &Array2<f64>) -> Vec<usize> {
    let (n, m) = cost.dim();
    debug_assert!(n <= m);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // p[j]: row (1-based) assigned to column j; column 0 is a sentinel.
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

/// Optimal total cost of a rectangular assignment of size `min(rows, cols)`.
fn optimal_total(cost: &Array2<f64>) -> f64 {
    let (q, j) = cost.dim();
    if q == 0 || j == 0 {
        return 0.0;
    }
    if q <= j {
        assign_rows(cost).iter().enumerate().map(|(r, &c)| cost[[r, c]]).sum()
    } else {
        let t = cost.t().to_owned();
        assign_rows(&t).iter().enumerate().map(|(r, &c)| t[[r, c]]).sum()
    }
}

fn sub_matrix(cost: &Array2<f64>, rows: &[usize], cols: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), cols.len()), |(a, b)| cost[[rows[a], cols[b]]])
}

/// Minimum-cost injective matching of size `min(Q, J)`. Among optimal
/// matchings the lexicographically smallest sorted pair list is returned.
pub fn hungarian_assign(cost: &Array2<f64>) -> Result<MatchResult> {
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::domain("matching cost contains non-finite entries"));
    }
    let (q, j) = cost.dim();
    let size = q.min(j);
    let best = optimal_total(cost);
    let tol = 1e-12 * (1.0 + cost.iter().map(|c| c.abs()).sum::<f64>());
    let mut free_rows: Vec<usize> = (0..q).collect();
    let mut free_cols: Vec<usize> = (0..j).collect();
    let mut pairs = Vec::with_capacity(size);
    let mut fixed = 0.0;
    for i in 0..q {
        if pairs.len() == size {
            break;
        }
        free_rows.retain(|&r| r != i);
        let rest_size = size - pairs.len() - 1;
        let mut chosen = None;
        for &c in &free_cols {
            let cols: Vec<usize> = free_cols.iter().copied().filter(|&x| x != c).collect();
            let rest = sub_matrix(cost, &free_rows, &cols);
            let rest_best = if rest_size == 0 { 0.0 } else { optimal_total(&rest) };
            if (fixed + cost[[i, c]] + rest_best - best).abs() <= tol {
                chosen = Some(c);
                break;
            }
        }
        if let Some(c) = chosen {
            pairs.push((i, c));
            fixed += cost[[i, c]];
            free_cols.retain(|&x| x != c);
        }
    }
    if pairs.len() != size {
        return Err(Error::internal("assignment reconstruction lost optimality"));
    }
    let matched: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let total_cost = pairs.iter().map(|&(a, b)| cost[[a, b]]).sum();
    Ok(MatchResult {
        pairs,
        cost_matrix: cost.clone(),
        unmatched_preds: (0..q).filter(|i| !matched.contains(i)).collect(),
        total_cost,
    })
}

/// KL divergence `KL(softmax(a_i) || softmax(b_i))` per row, averaged.
pub fn kl_rows(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let log_softmax = |row: ndarray::ArrayView1<f64>| -> Vec<f64> {
        let m = row.fold(f64::NEG_INFINITY, |x, &y| x.max(y));
        let z = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
        row.iter().map(|v| v - z).collect()
    };
    let total: f64 = a
        .rows()
        .into_iter()
        .zip(b.rows())
        .map(|(ra, rb)| {
            let (la, lb) = (log_softmax(ra), log_softmax(rb));
            la.iter().zip(&lb).map(|(x, y)| x.exp() * (x - y)).sum::<f64>()
        })
        .sum();
    total / a.nrows() as f64
}

/// Multi-positive contrastive loss over quality scores. Returns `None` when
/// there are no positives or no negatives.
pub fn contrastive_loss(scores: &[f64], gt_iou: &[f64], threshold: f64) -> Option<f64> {
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (&s, &g) in scores.iter().zip(gt_iou) {
        if g > threshold {
            pos.push(s.exp());
        } else {
            neg.push(s.exp());
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let a = pos.iter().sum::<f64>() / pos.len() as f64;
    let b = neg.iter().sum::<f64>() / neg.len() as f64;
    Some(-(a / (a + b)).ln())
}

/// Per-gt point counts inside every superpoint, used for point-level IoU of
/// superpoint masks without expanding them.
#[derive(Debug, Clone)]
pub struct SceneTarget {
    pub class: usize,
    /// Pooled gt masks, one `M`-vector per region.
    pub gt_sp: Vec<Vec<bool>>,
    sizes: Vec<usize>,
    /// `J x M` counts of gt points per superpoint.
    gt_counts: Vec<Vec<usize>>,
    gt_sizes: Vec<usize>,
}

impl SceneTarget {
    pub fn new(class: usize, gt_points: &[Vec<bool>], sp: &SuperpointPartition) -> Result<Self> {
        let mut gt_sp = Vec::with_capacity(gt_points.len());
        let mut gt_counts = Vec::with_capacity(gt_points.len());
        for g in gt_points {
            gt_sp.push(crate::pointcloud::pool_gt_mask(g, sp)?);
            let mut counts = vec![0usize; sp.count()];
            for (p, &s) in sp.assignment().iter().enumerate() {
                counts[s] += g[p] as usize;
            }
            gt_counts.push(counts);
        }
        Ok(Self {
            class,
            gt_sp,
            sizes: sp.sizes(),
            gt_sizes: gt_points.iter().map(|g| g.iter().filter(|&&b| b).count()).collect(),
            gt_counts,
        })
    }

    pub fn n_gt(&self) -> usize {
        self.gt_sp.len()
    }

    /// Point-level IoU of a binary superpoint mask with gt region `j`.
    pub fn iou(&self, sp_on: &[bool], j: usize) -> f64 {
        let mut inter = 0;
        let mut pred = 0;
        for (s, &on) in sp_on.iter().enumerate() {
            if on {
                inter += self.gt_counts[j][s];
                pred += self.sizes[s];
            }
        }
        let union = pred + self.gt_sizes[j] - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Best IoU of each binarized prediction column against any gt region.
    pub fn best_iou(&self, sp_masks: &Array2<f64>, threshold: f64) -> Vec<f64> {
        (0..sp_masks.ncols())
            .map(|i| {
                let on: Vec<bool> = sp_masks.column(i).iter().map(|&p| p >= threshold).collect();
                (0..self.n_gt()).map(|j| self.iou(&on, j)).fold(0.0, f64::max)
            })
            .collect()
    }
}

/// Differentiable loss terms of one decoder layer (scalar tensors).
#[derive(Debug, Clone)]
pub struct LayerTerms {
    pub ce: Tensor,
    pub bce: Tensor,
    pub dice: Tensor,
    pub score: Tensor,
    pub kl: Tensor,
    pub con: Tensor,
    pub con_degenerate: bool,
    pub matching: MatchResult,
}

fn scalar(v: f64, like: &Tensor) -> Result<Tensor> {
    Ok(Tensor::new(v, like.device())?.to_dtype(like.dtype())?)
}

pub fn cross_entropy(logits: &Tensor, class: usize) -> Result<Tensor> {
    let (_, a) = logits.dims2()?;
    if class >= a {
        return Err(Error::param(format!("class {class} out of range for {a} logits")));
    }
    Ok(log_softmax_last(logits)?.narrow(1, class, 1)?.neg()?.sum_all()?)
}

/// Row-wise `KL(softmax(target) || softmax(x))` averaged over rows; the
/// target does not receive gradients.
pub fn kl_loss(target: &Tensor, x: &Tensor) -> Result<Tensor> {
    let target = target.detach();
    let p = softmax_last(&target)?;
    let lp = log_softmax_last(&target)?;
    let lq = log_softmax_last(x)?;
    Ok((p * (lp - lq)?)?.sum(D::Minus1)?.mean_all()?)
}

pub fn contrastive_tensor(scores: &Tensor, positive: &[bool]) -> Result<Option<Tensor>> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mask: Vec<f64> = positive.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect();
    let mask = Tensor::from_vec(mask, positive.len(), scores.device())?.to_dtype(scores.dtype())?;
    let e = scores.exp()?;
    let a = ((&e * &mask)?.sum_all()? / n_pos as f64)?;
    let b = ((&e * (1.0 - &mask)?)?.sum_all()? / n_neg as f64)?;
    Ok(Some(((&a + b)?.log()? - a.log()?)?))
}

/// Dice and BCE of the rows of `pred` (`P x M`) against `gt` (`P x M`),
/// averaged over rows.
fn matched_mask_terms(pred: &Tensor, gt: &Tensor, cfg: &LossConfig) -> Result<(Tensor, Tensor)> {
    let clamped = pred.clamp(cfg.bce_clamp, 1.0 - cfg.bce_clamp)?;
    let bce = ((gt * clamped.log()?)? + ((1.0 - gt)? * (1.0 - &clamped)?.log()?)?)?.neg()?.mean(D::Minus1)?;
    let inter = (pred * gt)?.sum(D::Minus1)?;
    let denom = ((pred.sum(D::Minus1)? + gt.sum(D::Minus1)?)? + 1.0)?;
    let dice = match cfg.dice_variant {
        DiceVariant::Literal => (1.0 - ((inter + 1.0)? * 2.0)?.div(&denom)?)?,
        DiceVariant::Standard => (1.0 - ((inter * 2.0)? + 1.0)?.div(&denom)?)?,
    };
    Ok((bce.mean_all()?, dice.mean_all()?))
}

pub fn layer_terms(pred: &LayerPrediction, target: &SceneTarget, cfg: &LossConfig) -> Result<LayerTerms> {
    let masks = tensor_to_array(&pred.sp_masks)?;
    let (m, q) = masks.dim();
    if masks.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite mask predictions".into()));
    }
    let cost = matching_cost(&masks, &target.gt_sp, cfg.zeta, cfg.bce_clamp, cfg.dice_variant)?;
    let matching = hungarian_assign(&cost)?;
    let like = &pred.scores;
    let (bce, dice) = if matching.pairs.is_empty() {
        (scalar(0.0, like)?, scalar(0.0, like)?)
    } else {
        let idx: Vec<u32> = matching.pairs.iter().map(|p| p.0 as u32).collect();
        let idx = Tensor::from_vec(idx, matching.pairs.len(), like.device())?;
        let rows = pred.sp_masks.t()?.contiguous()?.index_select(&idx, 0)?;
        let gt: Vec<f64> = matching
            .pairs
            .iter()
            .flat_map(|&(_, j)| target.gt_sp[j].iter().map(|&b| if b { 1.0 } else { 0.0 }))
            .collect();
        let gt = Tensor::from_vec(gt, (matching.pairs.len(), m), like.device())?.to_dtype(like.dtype())?;
        matched_mask_terms(&rows, &gt, cfg)?
    };
    let omega = target.best_iou(&masks, cfg.binarize);
    let omega_t = Tensor::from_vec(omega.clone(), q, like.device())?.to_dtype(like.dtype())?;
    let score = (&pred.scores - omega_t)?.sqr()?.mean_all()?;
    let kl = match &pred.q_v {
        Some(q_v) => kl_loss(q_v, &pred.q_s)?,
        None => scalar(0.0, like)?,
    };
    let positive: Vec<bool> = omega.iter().map(|&w| w > cfg.positive_iou).collect();
    let (con, con_degenerate) = match contrastive_tensor(&pred.scores, &positive)? {
        Some(c) => (c, false),
        None => (scalar(0.0, like)?, true),
    };
    Ok(LayerTerms {
        ce: cross_entropy(&pred.class_logits, target.class)?,
        bce,
        dice,
        score,
        kl,
        con,
        con_degenerate,
        matching,
    })
}

/// Scalar loss values of one sample, averaged over layers.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub bce: f64,
    pub dice: f64,
    pub score: f64,
    pub mask: f64,
    pub kl: f64,
    pub con: f64,
    pub total: f64,
    pub lambda: [f64; 4],
}

impl LossBreakdown {
    /// Combine already layer-averaged terms.
    pub fn combine(ce: f64, bce: f64, dice: f64, score: f64, kl: f64, con: f64, lambda: [f64; 4]) -> Self {
        let mask = bce + dice + score;
        let total = lambda[0] * ce + lambda[1] * mask + lambda[2] * kl + lambda[3] * con;
        Self { ce, bce, dice, score, mask, kl, con, total, lambda }
    }

    pub fn recomposed_total(&self) -> f64 {
        self.lambda[0] * self.ce + self.lambda[1] * self.mask + self.lambda[2] * self.kl + self.lambda[3] * self.con
    }

    /// Element-wise mean of several breakdowns, recombined.
    pub fn mean(items: &[LossBreakdown], lambda: [f64; 4]) -> Self {
        let n = items.len().max(1) as f64;
        let avg = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        Self::combine(
            avg(|b| b.ce),
            avg(|b| b.bce),
            avg(|b| b.dice),
            avg(|b| b.score),
            avg(|b| b.kl),
            avg(|b| b.con),
            lambda,
        )
    }
}

/// Average the per-layer terms uniformly and weight them. Returns the
/// differentiable total and its breakdown.
pub fn total_loss(layers: &[LayerTerms], lambda: [f64; 4]) -> Result<(Tensor, LossBreakdown)> {
    if layers.is_empty() {
        return Err(Error::param("total loss needs at least one layer"));
    }
    if lambda.iter().any(|&l| !(l >= 0.0)) {
        return Err(Error::param(format!("loss weights must be non-negative, got {lambda:?}")));
    }
    let n = layers.len() as f64;
    let avg = |f: fn(&LayerTerms) -> &Tensor| -> Result<Tensor> {
        let mut acc = f(&layers[0]).clone();
        for l in &layers[1..] {
            acc = (acc + f(l))?;
        }
        Ok((acc / n)?)
    };
    let (ce, bce, dice, score, kl, con) = (
        avg(|l| &l.ce)?,
        avg(|l| &l.bce)?,
        avg(|l| &l.dice)?,
        avg(|l| &l.score)?,
        avg(|l| &l.kl)?,
        avg(|l| &l.con)?,
    );
    let mask = ((&bce + &dice)? + &score)?;
    let total = ((((&ce * lambda[0])? + (mask * lambda[1])?)? + (&kl * lambda[2])?)? + (&con * lambda[3])?)?;
    let v = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    let breakdown = LossBreakdown::combine(v(&ce)?, v(&bce)?, v(&dice)?, v(&score)?, v(&kl)?, v(&con)?, lambda);
    Ok((total, breakdown))
}
