//! Interaction-guided reweighting of decoder features.
//!
//! Each layer groups a decoder level into local sub-regions, lets every
//! sub-region attend to the clip's intention vector, spreads the result back
//! to all rows of the level and adds it through a sigmoid gate.

use candle_core::{DType, Device, Tensor};

use crate::config::{GroupReducer, IsaConfig, IsaLevel};
use crate::encoders::DecoderHook;
use crate::nn::{sigmoid, tensor_from_array, Init, Linear, Mlp, MultiHeadAttention, ParamStore};
use crate::pointcloud::{ball_query_knn, farthest_point_sample, interpolation_weights, Point3};
use crate::{Error, Result};

/// Precomputed sampling, grouping and interpolation tables of one level.
#[derive(Debug, Clone)]
pub struct IsaGeometry {
    pub n_rows: usize,
    pub centroids: Vec<usize>,
    /// `n_c * k` row indices, centroid-major.
    pub group: Tensor,
    pub k: usize,
    /// Dense `n_rows x n_c` interpolation matrix.
    pub interp: Tensor,
}

impl IsaGeometry {
    /// `n_c` is capped by the number of rows.
    pub fn new(
        coords: &[Point3],
        level: &IsaLevel,
        k_interp: usize,
        eps: f64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let n_c = level.n_c.min(coords.len());
        Self::exact(coords, n_c, level.k, level.r, k_interp, eps, dtype, device)
    }

    /// Fails when `n_c` exceeds the number of rows.
    #[allow(clippy::too_many_arguments)]
    pub fn exact(
        coords: &[Point3],
        n_c: usize,
        k: usize,
        r: f64,
        k_interp: usize,
        eps: f64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        if n_c > coords.len() {
            return Err(Error::param(format!("{n_c} centroids requested from {} rows", coords.len())));
        }
        let centroids = farthest_point_sample(coords, n_c, 0)?;
        let groups = ball_query_knn(coords, &centroids, k, r)?;
        let flat: Vec<u32> = groups.iter().flatten().map(|&i| i as u32).collect();
        let centers: Vec<Point3> = centroids.iter().map(|&c| coords[c]).collect();
        let weights = interpolation_weights(&centers, coords, k_interp, eps)?;
        Ok(Self {
            n_rows: coords.len(),
            group: Tensor::from_vec(flat, n_c * k, device)?,
            k,
            interp: tensor_from_array(&weights.to_dense(), dtype, device)?,
            centroids,
        })
    }

    pub fn n_c(&self) -> usize {
        self.centroids.len()
    }
}

#[derive(Debug, Clone)]
pub struct IsaLayer {
    width: usize,
    reducer: GroupReducer,
    residual: bool,
    pub mlp: Mlp,
    pub intent_proj: Linear,
    pub attn: MultiHeadAttention,
    pub gate: Linear,
    pub filter: Linear,
}

impl IsaLayer {
    /// `width` is the level width `C_i`, `intent_width` the model width `C`.
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        width: usize,
        intent_width: usize,
        heads: usize,
        cfg: &IsaConfig,
    ) -> Result<Self> {
        Ok(Self {
            width,
            reducer: cfg.reducer,
            residual: cfg.attention_residual,
            mlp: Mlp::new(ps, &format!("{name}.mlp"), width, width, width)?,
            intent_proj: Linear::new(ps, &format!("{name}.intent_proj"), intent_width, width, true)?,
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), Some(width), width, width, width, heads)?,
            gate: Linear::with_init(
                ps,
                &format!("{name}.gate"),
                width,
                width,
                Init::Zeros,
                Some(Init::Const(cfg.gate_bias)),
            )?,
            filter: Linear::new(ps, &format!("{name}.filter"), width, width, true)?,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Gather each neighborhood, reduce over its `k` members and apply the
    /// shared perceptron; returns `n_c x C_i`.
    pub fn group_subregions(&self, d: &Tensor, geom: &IsaGeometry) -> Result<Tensor> {
        let (n, c) = d.dims2()?;
        if n != geom.n_rows {
            return Err(Error::param(format!("level has {n} rows, geometry expects {}", geom.n_rows)));
        }
        let g = d.index_select(&geom.group, 0)?.reshape((geom.n_c(), geom.k, c))?;
        let g = match self.reducer {
            GroupReducer::Max => g.max(1)?,
            GroupReducer::Mean => g.mean(1)?,
        };
        self.mlp.forward(&g)
    }

    /// Attention of the sub-region features over the single intention token,
    /// before the residual.
    pub fn intent_cross_attention(&self, g: &Tensor, intent: &Tensor) -> Result<Tensor> {
        let token = self.intent_proj.forward(intent)?;
        self.attn.forward(g, &token)
    }

    /// Sub-region features after attention (`F_j`).
    pub fn joint_features(&self, d: &Tensor, geom: &IsaGeometry, intent: &Tensor) -> Result<Tensor> {
        let g = self.group_subregions(d, geom)?;
        let a = self.intent_cross_attention(&g, intent)?;
        Ok(if self.residual { (g + a)? } else { a })
    }

    /// `sigmoid(W_g x + b_g) * (W_f x + b_f)`.
    pub fn residual_gate(&self, x: &Tensor) -> Result<Tensor> {
        Ok((sigmoid(&self.gate.forward(x)?)? * self.filter.forward(x)?)?)
    }

    pub fn forward(&self, d: &Tensor, geom: &IsaGeometry, intent: &Tensor) -> Result<Tensor> {
        let fj = self.joint_features(d, geom, intent)?;
        let propagated = geom.interp.matmul(&fj)?;
        if propagated.dims() != d.dims() {
            return Err(Error::internal(format!(
                "propagated shape {:?} does not match level shape {:?}",
                propagated.dims(),
                d.dims()
            )));
        }
        Ok((d + self.residual_gate(&propagated)?)?)
    }
}

/// One layer per decoder level, coarsest first.
#[derive(Debug, Clone)]
pub struct IsaStack {
    pub layers: Vec<IsaLayer>,
}

impl IsaStack {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        level_widths: &[usize],
        intent_width: usize,
        cfg: &IsaConfig,
        voxel_size: f64,
    ) -> Result<Self> {
        let levels = level_widths.len();
        let layers = level_widths
            .iter()
            .enumerate()
            .map(|(j, &w)| {
                let lv = cfg.level(j + 1, levels, voxel_size)?;
                IsaLayer::new(ps, &format!("{name}.level{}", j + 1), w, intent_width, lv.heads, cfg)
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn bind<'a>(&'a self, geometry: &'a [IsaGeometry], intent: &'a Tensor) -> Result<BoundIsa<'a>> {
        if geometry.len() != self.layers.len() {
            return Err(Error::param(format!(
                "{} ISA layers but geometry for {} levels",
                self.layers.len(),
                geometry.len()
            )));
        }
        if intent.dims2()?.0 != 1 {
            return Err(Error::param("intention must be a single row"));
        }
        Ok(BoundIsa { stack: self, geometry, intent })
    }
}

/// An ISA stack tied to one scene and one clip, usable as a decoder hook.
pub struct BoundIsa<'a> {
    stack: &'a IsaStack,
    geometry: &'a [IsaGeometry],
    intent: &'a Tensor,
}

impl DecoderHook for BoundIsa<'_> {
    fn apply(&self, level: usize, features: Tensor) -> Result<Tensor> {
        let layer = &self.stack.layers[level - 1];
        layer.forward(&features, &self.geometry[level - 1], self.intent)
    }
}

/// Row-wise L2 norm ratio `||a - b|| / ||b||` over the whole matrix.
pub fn relative_change(a: &Tensor, b: &Tensor) -> Result<f64> {
    let num = (a - b)?.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?.sqrt();
    let den = b.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?.sqrt();
    Ok(num / den)
}

#[cfg(test)]
mod tests {
    use ndarray::{Array2, Axis};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::{check_gradients, tensor_to_array};

    const DEV: Device = Device::Cpu;

    fn linear(ps: &ParamStore, l: &Linear, x: &Array2<f64>) -> Array2<f64> {
        let w = Array2::from_shape_vec((l.d_out(), l.d_in()), ps.values(&l.weight_name()).unwrap()).unwrap();
        let mut y = x.dot(&w.t());
        if let Some(b) = l.bias_name() {
            let b = ps.values(&b).unwrap();
            for mut row in y.rows_mut() {
                row.iter_mut().zip(&b).for_each(|(v, b)| *v += b);
            }
        }
        y
    }

    fn mlp(ps: &ParamStore, m: &Mlp, x: &Array2<f64>) -> Array2<f64> {
        linear(ps, &m.fc2, &linear(ps, &m.fc1, x).mapv(|v| v.max(0.0)))
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3> {
        (0..n).map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..0.5)]).collect()
    }

    fn t(a: &Array2<f64>) -> Tensor {
        tensor_from_array(a, DType::F64, &DEV).unwrap()
    }

    fn setup(width: usize, heads: usize, seed: u64) -> (ParamStore, IsaLayer) {
        let mut ps = ParamStore::new(seed, DType::F64);
        let layer = IsaLayer::new(&mut ps, "isa", width, 6, heads, &IsaConfig::default()).unwrap();
        (ps, layer)
    }

    fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        assert_eq!(a.dim(), b.dim());
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn singleton_groups_apply_perceptron_in_fps_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let coords = cloud(&mut rng, 12);
        let d = random(&mut rng, 12, 4);
        let (ps, layer) = setup(4, 2, 2);
        let geom = IsaGeometry::exact(&coords, 12, 1, 0.1, 3, 1e-8, DType::F64, &DEV).unwrap();
        let g = tensor_to_array(&layer.group_subregions(&t(&d), &geom).unwrap()).unwrap();
        let permuted = d.select(Axis(0), &geom.centroids);
        assert!(max_abs_diff(&g, &mlp(&ps, &layer.mlp, &permuted)) < 1e-12);
    }

    #[test]
    fn constant_field_gives_identical_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let coords = cloud(&mut rng, 20);
        let row = random(&mut rng, 1, 4);
        let d = Array2::from_shape_fn((20, 4), |(_, j)| row[[0, j]]);
        let (_ps, layer) = setup(4, 2, 4);
        let geom = IsaGeometry::exact(&coords, 6, 4, 0.3, 3, 1e-8, DType::F64, &DEV).unwrap();
        let g = tensor_to_array(&layer.group_subregions(&t(&d), &geom).unwrap()).unwrap();
        for r in 1..6 {
            assert_eq!(g.row(r), g.row(0));
        }
    }

    #[test]
    fn too_many_centroids_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let coords = cloud(&mut rng, 5);
        assert!(IsaGeometry::exact(&coords, 6, 2, 0.3, 3, 1e-8, DType::F64, &DEV).is_err());
        let level = IsaLevel { n_c: 64, k: 2, r: 0.3, heads: 1 };
        assert_eq!(IsaGeometry::new(&coords, &level, 3, 1e-8, DType::F64, &DEV).unwrap().n_c(), 5);
    }

    // Literal pipeline on plain arrays: FPS, ball query, max over k, perceptron.
    fn group_oracle(ps: &ParamStore, layer: &IsaLayer, d: &Array2<f64>, coords: &[Point3], n_c: usize, k: usize, r: f64) -> Array2<f64> {
        let cents = farthest_point_sample(coords, n_c, 0).unwrap();
        let nb = ball_query_knn(coords, &cents, k, r).unwrap();
        let mut pooled = Array2::from_elem((n_c, d.ncols()), f64::NEG_INFINITY);
        for (i, row) in nb.iter().enumerate() {
            for &p in row {
                for c in 0..d.ncols() {
                    pooled[[i, c]] = pooled[[i, c]].max(d[[p, c]]);
                }
            }
        }
        mlp(ps, &layer.mlp, &pooled)
    }

    #[test]
    fn grouping_matches_stepwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let coords = cloud(&mut rng, 32);
        let d = random(&mut rng, 32, 4);
        let (ps, layer) = setup(4, 2, 8);
        let geom = IsaGeometry::exact(&coords, 8, 5, 0.35, 3, 1e-8, DType::F64, &DEV).unwrap();
        let g = tensor_to_array(&layer.group_subregions(&t(&d), &geom).unwrap()).unwrap();
        assert!(max_abs_diff(&g, &group_oracle(&ps, &layer, &d, &coords, 8, 5, 0.35)) < 1e-12);
    }

    #[test]
    fn single_token_attention_ignores_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (ps, layer) = setup(4, 2, 10);
        let intent = random(&mut rng, 1, 6);
        let g = random(&mut rng, 5, 4);
        let out = tensor_to_array(&layer.intent_cross_attention(&t(&g), &t(&intent)).unwrap()).unwrap();
        // Softmax over one token is exactly one: output is the projected value.
        let token = linear(&ps, &layer.intent_proj, &intent);
        let value = linear(&ps, &layer.attn.o_proj, &linear(&ps, &layer.attn.v_proj, &token));
        for r in 0..5 {
            for c in 0..4 {
                assert!((out[[r, c]] - value[[0, c]]).abs() < 1e-12);
                assert!((out[[r, c]] - out[[0, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn closed_gate_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let coords = cloud(&mut rng, 16);
        let d = random(&mut rng, 16, 4);
        let (ps, layer) = setup(4, 2, 12);
        ps.set_from_f64(&layer.gate.bias_name().unwrap(), vec![-60.0; 4]).unwrap();
        let geom = IsaGeometry::exact(&coords, 5, 3, 0.4, 3, 1e-8, DType::F64, &DEV).unwrap();
        let out = tensor_to_array(&layer.forward(&t(&d), &geom, &t(&random(&mut rng, 1, 6))).unwrap()).unwrap();
        assert!(max_abs_diff(&out, &d) < 1e-20);
    }

    fn forward_oracle(ps: &ParamStore, layer: &IsaLayer, d: &Array2<f64>, coords: &[Point3], intent: &Array2<f64>, n_c: usize, k: usize, r: f64) -> Array2<f64> {
        let g = group_oracle(ps, layer, d, coords, n_c, k, r);
        let token = linear(ps, &layer.intent_proj, intent);
        let value = linear(ps, &layer.attn.o_proj, &linear(ps, &layer.attn.v_proj, &token));
        let fj = Array2::from_shape_fn(g.dim(), |(i, c)| g[[i, c]] + value[[0, c]]);
        let cents = farthest_point_sample(coords, n_c, 0).unwrap();
        let centers: Vec<Point3> = cents.iter().map(|&c| coords[c]).collect();
        let fbar = crate::pointcloud::propagate_features(&centers, fj.view(), coords, 3, 1e-8).unwrap();
        let gate = linear(ps, &layer.gate, &fbar).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let filt = linear(ps, &layer.filter, &fbar);
        d + &(gate * filt)
    }

    #[test]
    fn zero_intent_with_zero_value_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let coords = cloud(&mut rng, 16);
        let d = random(&mut rng, 16, 4);
        let (ps, layer) = setup(4, 2, 14);
        for l in [&layer.attn.v_proj, &layer.attn.o_proj] {
            ps.set_from_f64(&l.weight_name(), vec![0.0; 16]).unwrap();
        }
        // Random gate so the check is not dominated by the closed gate.
        ps.set_from_f64(&layer.gate.weight_name(), (0..16).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        ps.set_from_f64(&layer.gate.bias_name().unwrap(), vec![0.2; 4]).unwrap();
        let intent = Array2::zeros((1, 6));
        let geom = IsaGeometry::exact(&coords, 5, 3, 0.4, 3, 1e-8, DType::F64, &DEV).unwrap();
        let out = tensor_to_array(&layer.forward(&t(&d), &geom, &t(&intent)).unwrap()).unwrap();
        // With zero value/output weights the attention output is the output bias.
        let o_bias = ps.values(&layer.attn.o_proj.bias_name().unwrap()).unwrap();
        let g = group_oracle(&ps, &layer, &d, &coords, 5, 3, 0.4);
        let fj = Array2::from_shape_fn(g.dim(), |(i, c)| g[[i, c]] + o_bias[c]);
        let fbar = geom.interp.to_vec2::<f64>().unwrap();
        let fbar = Array2::from_shape_fn((16, 5), |(i, j)| fbar[i][j]).dot(&fj);
        let gate = linear(&ps, &layer.gate, &fbar).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let expect = &d + &(gate * linear(&ps, &layer.filter, &fbar));
        assert!(max_abs_diff(&out, &expect) < 1e-12);
    }

    #[test]
    fn full_layer_matches_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let coords = cloud(&mut rng, 16);
        let d = random(&mut rng, 16, 4);
        let intent = random(&mut rng, 1, 6);
        let (ps, layer) = setup(4, 2, 16);
        ps.set_from_f64(&layer.gate.weight_name(), (0..16).map(|i| (i as f64 * 0.91).cos()).collect()).unwrap();
        let geom = IsaGeometry::exact(&coords, 6, 4, 0.5, 3, 1e-8, DType::F64, &DEV).unwrap();
        let out = tensor_to_array(&layer.forward(&t(&d), &geom, &t(&intent)).unwrap()).unwrap();
        let expect = forward_oracle(&ps, &layer, &d, &coords, &intent, 6, 4, 0.5);
        assert!(max_abs_diff(&out, &expect) < 1e-10);
        assert_eq!(out.dim(), d.dim());
    }

    #[test]
    fn residual_dominates_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..5 {
            let coords = cloud(&mut rng, 40);
            let d = random(&mut rng, 40, 16);
            let mut ps = ParamStore::new(100 + trial, DType::F64);
            let layer = IsaLayer::new(&mut ps, "isa", 16, 32, 4, &IsaConfig::default()).unwrap();
            let geom = IsaGeometry::exact(&coords, 10, 8, 0.3, 3, 1e-8, DType::F64, &DEV).unwrap();
            let out = layer.forward(&t(&d), &geom, &t(&random(&mut rng, 1, 32))).unwrap();
            let rel = relative_change(&out, &t(&d)).unwrap();
            assert!(rel < 0.05, "relative change {rel}");
        }
    }

    #[test]
    fn gradients_of_gate_filter_and_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let coords = cloud(&mut rng, 16);
        let d = t(&random(&mut rng, 16, 4));
        let intent = t(&random(&mut rng, 1, 6));
        let probe = t(&random(&mut rng, 16, 4));
        let (ps, layer) = setup(4, 2, 20);
        // Open the gate a little so every parameter carries signal.
        ps.set_from_f64(&layer.gate.weight_name(), (0..16).map(|i| (i as f64 * 0.53).sin()).collect()).unwrap();
        ps.set_from_f64(&layer.gate.bias_name().unwrap(), vec![0.0; 4]).unwrap();
        let geom = IsaGeometry::exact(&coords, 6, 4, 0.5, 3, 1e-8, DType::F64, &DEV).unwrap();
        let names: Vec<String> = ["gate", "filter", "attn.q_proj", "attn.k_proj", "attn.v_proj", "attn.o_proj", "intent_proj", "mlp.fc1"]
            .iter()
            .flat_map(|n| [format!("isa.{n}.weight"), format!("isa.{n}.bias")])
            .collect();
        let report = check_gradients(&ps, &names, 4, 1e-4, || {
            Ok((layer.forward(&d, &geom, &intent)? * &probe)?.sum_all()?)
        })
        .unwrap();
        assert!(report.max_rel_err() < 1e-3, "{:?}", report.worst());
    }

    #[test]
    fn literal_form_collapses_to_a_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let coords = cloud(&mut rng, 16);
        let d = random(&mut rng, 16, 4);
        let mut ps = ParamStore::new(22, DType::F64);
        let cfg = IsaConfig { attention_residual: false, ..IsaConfig::default() };
        let layer = IsaLayer::new(&mut ps, "isa", 4, 6, 2, &cfg).unwrap();
        let geom = IsaGeometry::exact(&coords, 6, 4, 0.5, 3, 1e-8, DType::F64, &DEV).unwrap();
        let fj = tensor_to_array(&layer.joint_features(&t(&d), &geom, &t(&random(&mut rng, 1, 6))).unwrap()).unwrap();
        for r in 1..6 {
            for c in 0..4 {
                assert!((fj[[r, c]] - fj[[0, c]]).abs() < 1e-12);
            }
        }
    }
}
