//! The full grounding model: clip encoder, intention projector, sparse U-Net
//! with ISA hooks, superpoint pooling and the query decoder.

use candle_core::{DType, Device, Tensor};

use crate::bqd::{LayerPrediction, QueryDecoder};
use crate::config::{EncoderMode, RunConfig};
use crate::data::FeatureGrid;
use crate::encoders::{
    build_levels, resample_frames, ClipBlock, ClipFeatures, DecoderHook, IdentityHook, IntentionProjector, LevelIndex,
    SceneFeatures, SparseUNet, ToyVideoEncoder,
};
use crate::isa::{IsaGeometry, IsaStack};
use crate::nn::ParamStore;
use crate::pointcloud::{build_superpoints_with, voxelize, PointCloudScene, PoolReducer, SuperpointPartition};
use crate::{Error, Result};

/// Superpoint pooling as a tensor op.
#[derive(Debug, Clone)]
pub enum Pooling {
    /// `M x N` row-normalized membership matrix.
    Mean(Tensor),
    /// `M * s` member indices, each row padded by repeating its first member.
    Max { members: Tensor, size: usize },
}

impl Pooling {
    pub fn new(sp: &SuperpointPartition, reducer: PoolReducer, dtype: DType, device: &Device) -> Result<Self> {
        let (m, n) = (sp.count(), sp.n_points());
        match reducer {
            PoolReducer::Mean => {
                let sizes = sp.sizes();
                let mut w = vec![0f64; m * n];
                for (p, &s) in sp.assignment().iter().enumerate() {
                    w[s * n + p] = 1.0 / sizes[s] as f64;
                }
                Ok(Pooling::Mean(Tensor::from_vec(w, (m, n), device)?.to_dtype(dtype)?))
            }
            PoolReducer::Max => {
                let members = sp.members();
                let size = members.iter().map(Vec::len).max().unwrap_or(1);
                let flat: Vec<u32> =
                    members.iter().flat_map(|g| (0..size).map(move |i| *g.get(i).unwrap_or(&g[0]) as u32)).collect();
                Ok(Pooling::Max { members: Tensor::from_vec(flat, m * size, device)?, size })
            }
        }
    }

    pub fn apply(&self, per_point: &Tensor) -> Result<Tensor> {
        match self {
            Pooling::Mean(w) => Ok(w.matmul(per_point)?),
            Pooling::Max { members, size } => {
                let c = per_point.dims2()?.1;
                let g = per_point.index_select(members, 0)?;
                Ok(g.reshape((members.dims1()? / size, *size, c))?.max(1)?)
            }
        }
    }
}

/// Everything derived from a scene's geometry, computed once and reused.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub scene: PointCloudScene,
    pub input: Tensor,
    pub levels: Vec<LevelIndex>,
    pub point_to_site: Tensor,
    /// Per decoder level, coarsest first; empty when ISA is disabled.
    pub isa_geometry: Vec<IsaGeometry>,
    pub sp: SuperpointPartition,
    pub pooling: Pooling,
}

impl PreparedScene {
    pub fn new(scene: PointCloudScene, cfg: &RunConfig, dtype: DType, device: &Device) -> Result<Self> {
        let m = &cfg.model;
        let depth = m.unet.widths.len();
        let grid = voxelize(&scene, m.voxel_size, m.input_coords)?;
        let sparse = build_levels(&grid, scene.coords(), depth)?;
        let levels = sparse.iter().map(|l| LevelIndex::new(l, device)).collect::<Result<Vec<_>>>()?;
        let feats: Vec<f64> = grid.site_features.iter().copied().collect();
        let input = Tensor::from_vec(feats, grid.site_features.dim(), device)?.to_dtype(dtype)?;
        let p2s: Vec<u32> = grid.point_to_site.iter().map(|&s| s as u32).collect();
        let point_to_site = Tensor::from_vec(p2s, scene.len(), device)?;
        let isa_geometry = if cfg.isa.enabled {
            (1..=depth)
                .map(|i| {
                    let coords = if i == depth { scene.coords() } else { &sparse[depth - i].centers[..] };
                    let lv = cfg.isa.level(i, depth, m.voxel_size)?;
                    IsaGeometry::new(coords, &lv, cfg.isa.k_interp, cfg.isa.interp_eps, dtype, device)
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let sp = build_superpoints_with(&scene, m.superpoints, &m.superpoint_graph)?;
        let pooling = Pooling::new(&sp, m.pool, dtype, device)?;
        Ok(Self { scene, input, levels, point_to_site, isa_geometry, sp, pooling })
    }

    pub fn input_width(&self) -> usize {
        self.input.dims()[1]
    }
}

#[derive(Debug, Clone)]
pub enum ClipInput {
    Raw(ClipBlock),
    /// Precomputed `n_tokens x C` token grid.
    Features(Tensor),
}

impl ClipInput {
    pub fn from_grid(grid: &FeatureGrid, dtype: DType, device: &Device) -> Result<Self> {
        let t = Tensor::from_vec(grid.data.clone(), (grid.n_tokens, grid.width), device)?.to_dtype(dtype)?;
        Ok(ClipInput::Features(t))
    }
}

pub struct ModelOutput {
    pub clip: ClipFeatures,
    pub intent: Tensor,
    pub scene: SceneFeatures,
    pub f_sp: Tensor,
    pub predictions: Vec<LayerPrediction>,
}

impl ModelOutput {
    pub fn last(&self) -> &LayerPrediction {
        self.predictions.last().expect("decoder emits at least one prediction")
    }
}

pub struct EgoSag {
    pub width: usize,
    pub frames: usize,
    pub video: Option<ToyVideoEncoder>,
    pub intention: IntentionProjector,
    pub unet: SparseUNet,
    pub isa: Option<IsaStack>,
    pub decoder: QueryDecoder,
}

impl EgoSag {
    pub fn new(ps: &mut ParamStore, cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let m = &cfg.model;
        let c = m.width;
        let in_ch = if m.input_coords { 6 } else { 3 };
        let video = match m.video.encoder {
            EncoderMode::Toy => Some(ToyVideoEncoder::new(ps, "video", &m.video, c)?),
            EncoderMode::Precomputed => None,
        };
        let intention = IntentionProjector::new(ps, "intention", c)?;
        let unet = SparseUNet::new(ps, "unet", in_ch, &m.unet, c)?;
        let isa = if cfg.isa.enabled {
            let widths: Vec<usize> = (1..=unet.levels()).map(|i| unet.decoder_width(i)).collect();
            Some(IsaStack::new(ps, "isa", &widths, c, &cfg.isa, m.voxel_size)?)
        } else {
            None
        };
        let decoder = QueryDecoder::new(ps, "bqd", c, m.classes, &cfg.bqd, cfg.optim.seed)?;
        Ok(Self { width: c, frames: m.video.frames, video, intention, unet, isa, decoder })
    }

    pub fn encode_clip(&self, clip: &ClipInput, clip_id: &str, affordance_id: Option<usize>) -> Result<ClipFeatures> {
        let tokens = match (clip, &self.video) {
            (ClipInput::Raw(block), Some(enc)) => enc.encode(&resample_frames(block, self.frames))?,
            (ClipInput::Features(t), _) => {
                let w = t.dims2()?.1;
                if w != self.width {
                    return Err(Error::param(format!("clip features have width {w}, model width is {}", self.width)));
                }
                t.clone()
            }
            (ClipInput::Raw(_), None) => {
                return Err(Error::param("model uses precomputed clip features but received a raw clip"));
            }
        };
        ClipFeatures::new(clip_id, affordance_id, tokens)
    }

    pub fn forward(&self, scene: &PreparedScene, clip: &ClipInput, clip_id: &str) -> Result<ModelOutput> {
        let clip = self.encode_clip(clip, clip_id, None)?;
        let intent = self.intention.forward(&clip)?;
        let features = match &self.isa {
            Some(stack) => {
                let hook = stack.bind(&scene.isa_geometry, &intent)?;
                self.scene_features(scene, &hook)?
            }
            None => self.scene_features(scene, &IdentityHook)?,
        };
        let f_sp = scene.pooling.apply(&features.per_point)?;
        let predictions = self.decoder.forward(&f_sp, &clip)?;
        Ok(ModelOutput { clip, intent, scene: features, f_sp, predictions })
    }

    fn scene_features(&self, scene: &PreparedScene, hook: &dyn DecoderHook) -> Result<SceneFeatures> {
        self.unet.forward(&scene.input, &scene.levels, &scene.point_to_site, hook)
    }
}
