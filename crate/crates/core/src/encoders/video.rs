use candle_core::Tensor;

use crate::config::VideoConfig;
use crate::nn::{mean_rows, LayerNorm, Linear, ParamStore};
use crate::{Error, Result};

/// Raw clip: `T x H x W x 3` pixels in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipBlock {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl ClipBlock {
    pub fn new(frames: usize, height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 {
            return Err(Error::domain("empty clip"));
        }
        if pixels.len() != frames * height * width * 3 {
            return Err(Error::domain(format!(
                "clip {frames}x{height}x{width}x3 needs {} values, got {}",
                frames * height * width * 3,
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::domain("clip pixels outside [0, 1]"));
        }
        Ok(Self { frames, height, width, pixels })
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.height * self.width * 3;
        &self.pixels[t * n..(t + 1) * n]
    }
}

/// Uniform temporal resampling (nearest frame at each bin center).
pub fn resample_frames(clip: &ClipBlock, frames: usize) -> ClipBlock {
    let mut pixels = Vec::with_capacity(frames * clip.height * clip.width * 3);
    for i in 0..frames {
        let src = (((i as f64 + 0.5) * clip.frames as f64 / frames as f64).floor() as usize).min(clip.frames - 1);
        pixels.extend_from_slice(clip.frame(src));
    }
    ClipBlock { frames, height: clip.height, width: clip.width, pixels }
}

/// Encoded clip: token grid `F_V` (`n_tokens x C`) and its mean.
#[derive(Debug, Clone)]
pub struct ClipFeatures {
    pub clip_id: String,
    pub affordance_id: Option<usize>,
    pub tokens: Tensor,
    pub pooled: Tensor,
}

impl ClipFeatures {
    pub fn new(clip_id: impl Into<String>, affordance_id: Option<usize>, tokens: Tensor) -> Result<Self> {
        let (n, c) = tokens.dims2()?;
        if n == 0 || c == 0 {
            return Err(Error::domain("clip features need at least one token and channel"));
        }
        let pooled = mean_rows(&tokens)?;
        Ok(Self { clip_id: clip_id.into(), affordance_id, tokens, pooled })
    }

    pub fn width(&self) -> usize {
        self.tokens.dims()[1]
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.dims()[0]
    }
}

struct Stage {
    proj: Linear,
    norm: LayerNorm,
    stride: [usize; 3],
}

/// Stack of non-overlapping strided 3-D convolutions followed by a linear
/// projection to the model width.
pub struct ToyVideoEncoder {
    cfg: VideoConfig,
    stages: Vec<Stage>,
    projector: Linear,
}

impl ToyVideoEncoder {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &VideoConfig, width: usize) -> Result<Self> {
        cfg.token_grid()?;
        let mut d_in = 3;
        let mut stages = Vec::new();
        for (s, (stride, &w)) in cfg.strides.iter().zip(&cfg.widths).enumerate() {
            let fan = stride.iter().product::<usize>() * d_in;
            stages.push(Stage {
                proj: Linear::new(ps, &format!("{name}.stage{s}.conv"), fan, w, true)?,
                norm: LayerNorm::new(ps, &format!("{name}.stage{s}.norm"), w)?,
                stride: *stride,
            });
            d_in = w;
        }
        let projector = Linear::new(ps, &format!("{name}.projector"), d_in, width, true)?;
        Ok(Self { cfg: cfg.clone(), stages, projector })
    }

    /// Token grid dimensions `(T1, H1, W1)`.
    pub fn token_grid(&self) -> [usize; 3] {
        self.cfg.token_grid().expect("validated at construction")
    }

    pub fn encode(&self, clip: &ClipBlock) -> Result<Tensor> {
        if clip.height != self.cfg.height || clip.width != self.cfg.width {
            return Err(Error::param(format!(
                "clip frames are {}x{}, encoder expects {}x{}",
                clip.height, clip.width, self.cfg.height, self.cfg.width
            )));
        }
        let clip = resample_frames(clip, self.cfg.frames);
        let mut dims = [clip.frames, clip.height, clip.width];
        let (dtype, device) = (self.projector.dtype(), self.projector.device());
        let mut x = Tensor::from_slice(&clip.pixels, (dims.iter().product::<usize>(), 3), device)?.to_dtype(dtype)?;
        for stage in &self.stages {
            x = patchify(&x, dims, stage.stride)?;
            dims = [dims[0] / stage.stride[0], dims[1] / stage.stride[1], dims[2] / stage.stride[2]];
            x = stage.norm.forward(&stage.proj.forward(&x)?)?.relu()?;
        }
        self.projector.forward(&x)
    }
}

/// Rearrange `(T*H*W) x C` rows into non-overlapping `stride` patches.
fn patchify(x: &Tensor, dims: [usize; 3], stride: [usize; 3]) -> Result<Tensor> {
    let c = x.dims()[1];
    let [t, h, w] = dims;
    let [st, sh, sw] = stride;
    let (t1, h1, w1) = (t / st, h / sh, w / sw);
    Ok(x.reshape(vec![t1, st, h1, sh, w1, sw, c])?
        .permute(vec![0, 2, 4, 1, 3, 5, 6])?
        .contiguous()?
        .reshape((t1 * h1 * w1, st * sh * sw * c))?)
}

/// Learned 1x1 projection of the clip tokens followed by token averaging,
/// giving the intention vector `F_I` (`1 x C`).
pub struct IntentionProjector {
    pub proj: Linear,
}

impl IntentionProjector {
    pub fn new(ps: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(Self { proj: Linear::new(ps, name, width, width, true)? })
    }

    pub fn forward(&self, clip: &ClipFeatures) -> Result<Tensor> {
        mean_rows(&self.proj.forward(&clip.tokens)?)
    }
}
