//! Bilateral query decoder.
//!
//! Learnable queries attend to superpoint features (geometry branch) and to
//! clip tokens (interaction branch); the two refined query sets are merged
//! into the next layer's queries. Every layer feeds a shared prediction head.

use candle_core::{DType, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::BqdConfig;
use crate::encoders::ClipFeatures;
use crate::nn::{mean_rows, sigmoid, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamStore};
use crate::{Error, Result};

pub const QUERY_INIT_STD: f64 = 0.02;

/// `q x c` query matrix drawn from `N(0, 0.02^2)`.
pub fn init_queries(q: usize, c: usize, seed: u64) -> Result<Vec<f64>> {
    if q == 0 || c == 0 {
        return Err(Error::param("query set needs at least one query and channel"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, QUERY_INIT_STD).map_err(|e| Error::param(e.to_string()))?;
    Ok((0..q * c).map(|_| dist.sample(&mut rng)).collect())
}

#[derive(Debug, Clone)]
pub struct BranchFeatures {
    /// `M x C` affordance features `F_a`.
    pub affordance: Tensor,
    /// `M x C` mask features `F_m`.
    pub mask: Tensor,
}

#[derive(Debug, Clone)]
pub struct LayerPrediction {
    /// `1 x A`.
    pub class_logits: Tensor,
    /// `M x Q`, in `(0, 1)`.
    pub sp_masks: Tensor,
    /// `Q`, in `[-1, 1]`.
    pub scores: Tensor,
    pub q_s: Tensor,
    /// Absent in the single-branch decoder.
    pub q_v: Option<Tensor>,
    /// Queries whose score was defined as zero because of a zero norm.
    pub zero_norm_queries: Vec<usize>,
}

/// Pre-norm residual blocks of one branch: cross-attention, self-attention
/// and feed-forward.
#[derive(Debug, Clone)]
pub struct Branch {
    pub cross: MultiHeadAttention,
    pub self_norm: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ffn_norm: LayerNorm,
    pub ffn: Mlp,
}

impl Branch {
    fn new(ps: &mut ParamStore, name: &str, c: usize, heads: usize, ffn_mult: usize) -> Result<Self> {
        Ok(Self {
            cross: MultiHeadAttention::new(ps, &format!("{name}.cross"), None, c, c, c, heads)?,
            self_norm: LayerNorm::new(ps, &format!("{name}.self_norm"), c)?,
            self_attn: MultiHeadAttention::new(ps, &format!("{name}.self_attn"), Some(c), c, c, c, heads)?,
            ffn_norm: LayerNorm::new(ps, &format!("{name}.ffn_norm"), c)?,
            ffn: Mlp::new(ps, &format!("{name}.ffn"), c, ffn_mult * c, c)?,
        })
    }

    pub fn cross_block(&self, q: &Tensor, q_projected: &Tensor, kv: &Tensor) -> Result<Tensor> {
        Ok((q + self.cross.attend(q_projected, kv)?)?)
    }

    pub fn self_block(&self, x: &Tensor) -> Result<Tensor> {
        let n = self.self_norm.forward(x)?;
        Ok((x + self.self_attn.forward(&n, &n)?)?)
    }

    pub fn ffn_block(&self, x: &Tensor) -> Result<Tensor> {
        Ok((x + self.ffn.forward(&self.ffn_norm.forward(x)?)?)?)
    }

    /// `FFN(SelfAttn(CrossAttn(q, kv)))`.
    pub fn forward(&self, q: &Tensor, q_projected: &Tensor, kv: &Tensor) -> Result<Tensor> {
        self.ffn_block(&self.self_block(&self.cross_block(q, q_projected, kv)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct BqdLayer {
    pub q_norm: LayerNorm,
    /// Query projection shared by both branches.
    pub q_proj: Linear,
    pub scene: Branch,
    pub clip: Option<Branch>,
    pub merge_mlp: Option<Mlp>,
}

impl BqdLayer {
    pub fn new(ps: &mut ParamStore, name: &str, c: usize, heads: usize, ffn_mult: usize, bilateral: bool) -> Result<Self> {
        Ok(Self {
            q_norm: LayerNorm::new(ps, &format!("{name}.q_norm"), c)?,
            q_proj: Linear::new(ps, &format!("{name}.q_proj"), c, c, true)?,
            scene: Branch::new(ps, &format!("{name}.scene"), c, heads, ffn_mult)?,
            clip: if bilateral { Some(Branch::new(ps, &format!("{name}.clip"), c, heads, ffn_mult)?) } else { None },
            merge_mlp: if bilateral { Some(Mlp::new(ps, &format!("{name}.merge_mlp"), 2 * c, c, c)?) } else { None },
        })
    }

    /// Returns `(next, q_s, q_v)`.
    pub fn forward(&self, q: &Tensor, affordance: &Tensor, clip_tokens: &Tensor) -> Result<(Tensor, Tensor, Option<Tensor>)> {
        let projected = self.q_proj.forward(&self.q_norm.forward(q)?)?;
        let q_s = self.scene.forward(q, &projected, affordance)?;
        match (&self.clip, &self.merge_mlp) {
            (Some(clip), Some(merge)) => {
                let q_v = clip.forward(q, &projected, clip_tokens)?;
                let next = merge.forward(&Tensor::cat(&[&q_s, &q_v], 1)?)?;
                Ok((next, q_s, Some(q_v)))
            }
            _ => Ok((q_s.clone(), q_s, None)),
        }
    }
}

/// Cosine similarity of every row of `q` (`Q x C`) with `pooled` (`1 x C`);
/// zero-norm rows score 0.
pub fn cosine_scores(q: &Tensor, pooled: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let dot = q.broadcast_mul(pooled)?.sum(D::Minus1)?;
    let qn = q.sqr()?.sum(D::Minus1)?;
    let pn = pooled.sqr()?.sum_all()?;
    // The tiny offset keeps the square root differentiable at zero.
    let denom = qn.broadcast_mul(&pn)?.affine(1.0, 1e-30)?.sqrt()?;
    let scores = (dot / denom)?;
    let norms: Vec<f64> = qn.broadcast_mul(&pn)?.to_dtype(DType::F64)?.to_vec1()?;
    let zero = norms.iter().enumerate().filter(|(_, &n)| n == 0.0).map(|(i, _)| i).collect();
    Ok((scores, zero))
}

#[derive(Debug, Clone)]
pub struct PredictionHead {
    pub classifier: Linear,
}

impl PredictionHead {
    pub fn new(ps: &mut ParamStore, name: &str, c: usize, classes: usize) -> Result<Self> {
        Ok(Self { classifier: Linear::new(ps, &format!("{name}.classifier"), c, classes, true)? })
    }

    pub fn forward(
        &self,
        next: &Tensor,
        q_s: &Tensor,
        q_v: Option<Tensor>,
        mask_features: &Tensor,
        clip_pooled: &Tensor,
    ) -> Result<LayerPrediction> {
        let class_logits = self.classifier.forward(&mean_rows(next)?)?;
        let sp_masks = sigmoid(&mask_features.matmul(&q_s.t()?)?)?;
        let (scores, zero_norm_queries) = cosine_scores(q_s, clip_pooled)?;
        Ok(LayerPrediction { class_logits, sp_masks, scores, q_s: q_s.clone(), q_v, zero_norm_queries })
    }
}

/// Cross-attention of superpoint features over clip tokens, used in place of
/// the bilateral decoder when it is disabled.
#[derive(Debug, Clone)]
pub struct CrossFusion {
    pub norm: LayerNorm,
    pub attn: MultiHeadAttention,
}

impl CrossFusion {
    pub fn new(ps: &mut ParamStore, name: &str, c: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(ps, &format!("{name}.norm"), c)?,
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), Some(c), c, c, c, heads)?,
        })
    }

    pub fn forward(&self, f_sp: &Tensor, clip_tokens: &Tensor) -> Result<Tensor> {
        Ok((f_sp + self.attn.forward(&self.norm.forward(f_sp)?, clip_tokens)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct QueryDecoder {
    pub queries: Tensor,
    pub affordance_projector: Mlp,
    pub mask_projector: Mlp,
    pub fusion: Option<CrossFusion>,
    pub layers: Vec<BqdLayer>,
    pub head: PredictionHead,
    per_layer_heads: bool,
}

impl QueryDecoder {
    pub fn new(ps: &mut ParamStore, name: &str, c: usize, classes: usize, cfg: &BqdConfig, seed: u64) -> Result<Self> {
        if cfg.layers == 0 {
            return Err(Error::param("decoder needs at least one layer"));
        }
        let queries = ps.var(&format!("{name}.queries"), &[cfg.queries, c], crate::nn::Init::Zeros)?;
        ps.set_from_f64(&format!("{name}.queries"), init_queries(cfg.queries, c, seed)?)?;
        Ok(Self {
            queries,
            affordance_projector: Mlp::new(ps, &format!("{name}.affordance_projector"), c, 2 * c, c)?,
            mask_projector: Mlp::new(ps, &format!("{name}.mask_projector"), c, 2 * c, c)?,
            fusion: if cfg.bilateral { None } else { Some(CrossFusion::new(ps, &format!("{name}.fusion"), c, cfg.heads)?) },
            layers: (0..cfg.layers)
                .map(|l| BqdLayer::new(ps, &format!("{name}.layer{l}"), c, cfg.heads, cfg.ffn_mult, cfg.bilateral))
                .collect::<Result<_>>()?,
            head: PredictionHead::new(ps, &format!("{name}.head"), c, classes)?,
            per_layer_heads: cfg.per_layer_heads,
        })
    }

    pub fn project_branch_features(&self, f_sp: &Tensor) -> Result<BranchFeatures> {
        Ok(BranchFeatures {
            affordance: self.affordance_projector.forward(f_sp)?,
            mask: self.mask_projector.forward(f_sp)?,
        })
    }

    /// Predictions of every layer (or only the last one when per-layer heads
    /// are disabled), in layer order.
    pub fn forward(&self, f_sp: &Tensor, clip: &ClipFeatures) -> Result<Vec<LayerPrediction>> {
        let f_sp = match &self.fusion {
            Some(f) => f.forward(f_sp, &clip.tokens)?,
            None => f_sp.clone(),
        };
        let branch = self.project_branch_features(&f_sp)?;
        let mut q = self.queries.clone();
        let mut out = Vec::new();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (next, q_s, q_v) = layer.forward(&q, &branch.affordance, &clip.tokens)?;
            if self.per_layer_heads || l == last {
                out.push(self.head.forward(&next, &q_s, q_v, &branch.mask, &clip.pooled)?);
            }
            q = next;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use candle_core::Device;
    use ndarray::{concatenate, Array2, Axis};
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::nn::oracle::{self, max_abs_diff};
    use crate::nn::{check_gradients, tensor_from_array, tensor_to_array};

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    fn t(a: &Array2<f64>) -> Tensor {
        tensor_from_array(a, DType::F64, &Device::Cpu).unwrap()
    }

    fn cfg(layers: usize, queries: usize, heads: usize) -> BqdConfig {
        BqdConfig { layers, queries, heads, ..BqdConfig::default() }
    }

    fn clip(tokens: &Array2<f64>) -> ClipFeatures {
        ClipFeatures::new("c", Some(0), t(tokens)).unwrap()
    }

    #[test]
    fn query_init_is_seeded_and_centered() {
        let a = init_queries(50, 512, 3).unwrap();
        assert_eq!(a, init_queries(50, 512, 3).unwrap());
        assert_ne!(a, init_queries(50, 512, 4).unwrap());
        let mean = a.iter().sum::<f64>() / a.len() as f64;
        assert!(mean.abs() < 3.0 * QUERY_INIT_STD / ((50 * 512) as f64).sqrt());
        let mut ps = ParamStore::new(0, DType::F32);
        let dec = QueryDecoder::new(&mut ps, "bqd", 512, 17, &cfg(1, 50, 8), 3).unwrap();
        assert_eq!(dec.queries.dims(), &[50, 512]);
    }

    #[test]
    fn branch_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamStore::new(1, DType::F64);
        let dec = QueryDecoder::new(&mut ps, "bqd", 4, 3, &cfg(1, 2, 2), 0).unwrap();
        let f = random(&mut rng, 5, 4);
        let b = dec.project_branch_features(&t(&f)).unwrap();
        assert!(max_abs_diff(&tensor_to_array(&b.affordance).unwrap(), &oracle::mlp(&ps, &dec.affordance_projector, &f)) < 1e-12);
        assert!(max_abs_diff(&tensor_to_array(&b.mask).unwrap(), &oracle::mlp(&ps, &dec.mask_projector, &f)) < 1e-12);
        let zero = dec.project_branch_features(&t(&Array2::zeros((3, 4)))).unwrap();
        let za = tensor_to_array(&zero.affordance).unwrap();
        assert_eq!(za.row(0), za.row(2));
        dec.affordance_projector.set_identity(&ps).unwrap();
        dec.mask_projector.set_identity(&ps).unwrap();
        let b = dec.project_branch_features(&t(&f)).unwrap();
        assert!(max_abs_diff(&tensor_to_array(&b.affordance).unwrap(), &f) < 1e-15);
        assert!(max_abs_diff(&tensor_to_array(&b.mask).unwrap(), &f) < 1e-15);
    }

    #[test]
    fn cross_attention_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamStore::new(2, DType::F64);
        let layer = BqdLayer::new(&mut ps, "l", 4, 2, 2, true).unwrap();
        let q = t(&random(&mut rng, 3, 4));
        let one = random(&mut rng, 1, 4);
        let out = tensor_to_array(&layer.scene.cross.attend(&q, &t(&one)).unwrap()).unwrap();
        let value = oracle::linear(&ps, &layer.scene.cross.o_proj, &oracle::linear(&ps, &layer.scene.cross.v_proj, &one));
        for r in 0..3 {
            for c in 0..4 {
                assert!((out[[r, c]] - value[[0, c]]).abs() < 1e-12);
            }
        }
        let same = Array2::from_shape_fn((5, 4), |(_, j)| one[[0, j]]);
        let out2 = tensor_to_array(&layer.scene.cross.attend(&q, &t(&same)).unwrap()).unwrap();
        assert!(max_abs_diff(&out, &out2) < 1e-12);
        let empty = Tensor::zeros((0, 4), DType::F64, &Device::Cpu).unwrap();
        assert!(layer.scene.cross.attend(&q, &empty).is_err());
    }

    fn branch_oracle(ps: &ParamStore, b: &Branch, q: &Array2<f64>, qp: &Array2<f64>, kv: &Array2<f64>) -> Array2<f64> {
        let x = q + &oracle::attention(ps, &b.cross, qp, kv);
        let n = oracle::layer_norm(&x);
        let x = &x + &oracle::attention(ps, &b.self_attn, &n, &n);
        &x + &oracle::mlp(ps, &b.ffn, &oracle::layer_norm(&x))
    }

    #[test]
    fn layer_matches_composition_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamStore::new(3, DType::F64);
        let layer = BqdLayer::new(&mut ps, "l", 6, 2, 2, true).unwrap();
        let q = random(&mut rng, 3, 6);
        let fa = random(&mut rng, 5, 6);
        let tokens = random(&mut rng, 4, 6);
        let (next, q_s, q_v) = layer.forward(&t(&q), &t(&fa), &t(&tokens)).unwrap();
        let qp = oracle::linear(&ps, &layer.q_proj, &oracle::layer_norm(&q));
        let es = branch_oracle(&ps, &layer.scene, &q, &qp, &fa);
        let ev = branch_oracle(&ps, layer.clip.as_ref().unwrap(), &q, &qp, &tokens);
        let en = oracle::mlp(&ps, layer.merge_mlp.as_ref().unwrap(), &concatenate(Axis(1), &[es.view(), ev.view()]).unwrap());
        assert!(max_abs_diff(&tensor_to_array(&q_s).unwrap(), &es) < 1e-10);
        assert!(max_abs_diff(&tensor_to_array(&q_v.unwrap()).unwrap(), &ev) < 1e-10);
        assert!(max_abs_diff(&tensor_to_array(&next).unwrap(), &en) < 1e-10);
    }

    #[test]
    fn single_query_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParamStore::new(4, DType::F64);
        let layer = BqdLayer::new(&mut ps, "l", 4, 2, 2, true).unwrap();
        let q = random(&mut rng, 1, 4);
        let (next, q_s, _) = layer.forward(&t(&q), &t(&random(&mut rng, 3, 4)), &t(&random(&mut rng, 2, 4))).unwrap();
        assert_eq!(next.dims(), &[1, 4]);
        // Self-attention over one token returns its projected value.
        let x = random(&mut rng, 1, 4);
        let n = oracle::layer_norm(&x);
        let expect = &x + &oracle::linear(&ps, &layer.scene.self_attn.o_proj, &oracle::linear(&ps, &layer.scene.self_attn.v_proj, &n));
        assert!(max_abs_diff(&tensor_to_array(&layer.scene.self_block(&t(&x)).unwrap()).unwrap(), &expect) < 1e-12);
        assert!(q_s.to_vec2::<f64>().unwrap()[0].iter().all(|v| v.is_finite()));
    }

    #[test]
    fn symmetric_branches_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamStore::new(5, DType::F64);
        let layer = BqdLayer::new(&mut ps, "l", 4, 2, 2, true).unwrap();
        let names: Vec<String> = ps.iter().map(|(n, _)| n.clone()).filter(|n| n.starts_with("l.scene.")).collect();
        for n in names {
            let v = ps.values(&n).unwrap();
            ps.set_from_f64(&n.replacen("l.scene.", "l.clip.", 1), v).unwrap();
        }
        let kv = t(&random(&mut rng, 5, 4));
        let (_, q_s, q_v) = layer.forward(&t(&random(&mut rng, 3, 4)), &kv, &kv).unwrap();
        let diff = (q_s - q_v.unwrap()).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn cosine_score_cases() {
        let dev = Device::Cpu;
        let q = Tensor::new(&[[1.0f64, 2.0], [2.0, 1.0], [-2.0, 4.0], [0.0, 0.0], [10.0, 20.0]], &dev).unwrap();
        let pooled = Tensor::new(&[[2.0f64, 1.0]], &dev).unwrap();
        let (s, zero) = cosine_scores(&q, &pooled).unwrap();
        let s: Vec<f64> = s.to_vec1().unwrap();
        assert!((s[0] - 0.8).abs() < 1e-12);
        assert!((s[1] - 1.0).abs() < 1e-12);
        assert!(s[2].abs() < 1e-12);
        assert_eq!(s[3], 0.0);
        assert!((s[4] - s[0]).abs() < 1e-12);
        assert_eq!(zero, vec![3]);
    }

    #[test]
    fn head_outputs_and_layer_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for (per_layer, expect) in [(true, 3), (false, 1)] {
            let mut ps = ParamStore::new(6, DType::F64);
            let c = BqdConfig { per_layer_heads: per_layer, ..cfg(3, 4, 2) };
            let dec = QueryDecoder::new(&mut ps, "bqd", 4, 3, &c, 1).unwrap();
            let preds = dec.forward(&t(&random(&mut rng, 7, 4)), &clip(&random(&mut rng, 5, 4))).unwrap();
            assert_eq!(preds.len(), expect);
            for p in &preds {
                assert_eq!(p.sp_masks.dims(), &[7, 4]);
                assert_eq!(p.class_logits.dims(), &[1, 3]);
                let m: Vec<f64> = p.sp_masks.flatten_all().unwrap().to_vec1().unwrap();
                assert!(m.iter().all(|&v| v > 0.0 && v < 1.0));
                let s: Vec<f64> = p.scores.to_vec1().unwrap();
                assert!(s.iter().all(|&v| (-1.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn head_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ps = ParamStore::new(7, DType::F64);
        let head = PredictionHead::new(&mut ps, "h", 4, 3).unwrap();
        let (next, q_s, fm, pooled) = (random(&mut rng, 3, 4), random(&mut rng, 3, 4), random(&mut rng, 5, 4), random(&mut rng, 1, 4));
        let p = head.forward(&t(&next), &t(&q_s), None, &t(&fm), &t(&pooled)).unwrap();
        let mean = next.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
        assert!(max_abs_diff(&tensor_to_array(&p.class_logits).unwrap(), &oracle::linear(&ps, &head.classifier, &mean)) < 1e-12);
        let masks = fm.dot(&q_s.t()).mapv(oracle::sigmoid);
        assert!(max_abs_diff(&tensor_to_array(&p.sp_masks).unwrap(), &masks) < 1e-12);
    }

    #[test]
    fn layer_and_head_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut ps = ParamStore::new(8, DType::F64);
        let layer = BqdLayer::new(&mut ps, "l", 8, 2, 2, true).unwrap();
        let head = PredictionHead::new(&mut ps, "h", 8, 3).unwrap();
        let q = t(&random(&mut rng, 3, 8));
        let fa = t(&random(&mut rng, 5, 8));
        let fm = t(&random(&mut rng, 5, 8));
        let tokens = t(&random(&mut rng, 4, 8));
        let pooled = t(&random(&mut rng, 1, 8));
        let (pm, ps_, pc) = (t(&random(&mut rng, 5, 3)), t(&random(&mut rng, 1, 3)), t(&random(&mut rng, 1, 3)));
        let names: Vec<String> = ps.iter().map(|(n, _)| n.clone()).collect();
        let report = check_gradients(&ps, &names, 2, 1e-4, || {
            let (next, q_s, q_v) = layer.forward(&q, &fa, &tokens)?;
            let p = head.forward(&next, &q_s, q_v, &fm, &pooled)?;
            let a = (p.sp_masks * &pm)?.sum_all()?;
            let b = (p.scores.unsqueeze(0)? * &ps_)?.sum_all()?;
            let c = (p.class_logits * &pc)?.sum_all()?;
            Ok(((a + b)? + c)?)
        })
        .unwrap();
        assert!(report.probes.len() > 60);
        assert!(report.max_rel_err() < 1e-3, "{:?}", report.worst());
    }
}
