use candle_core::Tensor;

use super::sparse::{gather_padded, LevelIndex};
use crate::config::UnetConfig;
use crate::nn::{LayerNorm, Linear, ParamStore};
use crate::{Error, Result};

/// Called after every decoder level with the level index (1 = coarsest,
/// `L` = full point resolution) and that level's features.
pub trait DecoderHook {
    fn apply(&self, level: usize, features: Tensor) -> Result<Tensor>;
}

/// Leaves decoder features untouched.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityHook;

impl DecoderHook for IdentityHook {
    fn apply(&self, _level: usize, features: Tensor) -> Result<Tensor> {
        Ok(features)
    }
}

#[derive(Debug, Clone)]
pub struct SceneFeatures {
    /// `N x C` point features.
    pub per_point: Tensor,
    /// Decoder outputs after the hook, coarsest first; the last one has one
    /// row per point.
    pub decoder: Vec<Tensor>,
}

#[derive(Debug, Clone)]
struct ConvBlock {
    lin: Linear,
    norm: Option<LayerNorm>,
    relu: bool,
}

impl ConvBlock {
    fn new(ps: &mut ParamStore, name: &str, fan_in: usize, out: usize, cfg: &UnetConfig) -> Result<Self> {
        Self::with_norm_width(ps, name, fan_in, out, out, cfg)
    }

    fn with_norm_width(
        ps: &mut ParamStore,
        name: &str,
        fan_in: usize,
        out: usize,
        norm_width: usize,
        cfg: &UnetConfig,
    ) -> Result<Self> {
        Ok(Self {
            lin: Linear::new(ps, &format!("{name}.conv"), fan_in, out, cfg.bias)?,
            norm: if cfg.norm { Some(LayerNorm::new(ps, &format!("{name}.norm"), norm_width)?) } else { None },
            relu: cfg.activation,
        })
    }

    fn post(&self, x: Tensor) -> Result<Tensor> {
        let x = match &self.norm {
            Some(n) => n.forward(&x)?,
            None => x,
        };
        Ok(if self.relu { x.relu()? } else { x })
    }

    fn ssc(&self, x: &Tensor, level: &LevelIndex) -> Result<Tensor> {
        self.post(self.lin.forward(&gather_padded(x, &level.ssc, 27)?)?)
    }

    fn down(&self, x: &Tensor, level: &LevelIndex) -> Result<Tensor> {
        let children = level.children.as_ref().ok_or_else(|| Error::internal("finest level has no children"))?;
        self.post(self.lin.forward(&gather_padded(x, children, 8)?)?)
    }

    /// Transposed stride-2 convolution onto the sites of the finer level.
    fn up(&self, x: &Tensor, coarse: &LevelIndex) -> Result<Tensor> {
        let slots =
            coarse.parent_slots.as_ref().ok_or_else(|| Error::internal("finest level has no parent slots"))?;
        let n = x.dims2()?.0;
        let out = self.lin.d_out() / 8;
        let y = self.lin.forward(x)?.reshape((n * 8, out))?;
        self.post(y.index_select(slots, 0)?)
    }
}

/// Sparse voxel U-Net with submanifold convolutions at every level,
/// stride-2 down/up convolutions between levels and skip concatenation.
#[derive(Debug, Clone)]
pub struct SparseUNet {
    widths: Vec<usize>,
    stem: ConvBlock,
    enc: Vec<(ConvBlock, ConvBlock)>,
    bottleneck: ConvBlock,
    dec: Vec<(ConvBlock, ConvBlock)>,
    out: Linear,
}

impl SparseUNet {
    pub fn new(ps: &mut ParamStore, name: &str, in_ch: usize, cfg: &UnetConfig, width: usize) -> Result<Self> {
        let w = &cfg.widths;
        if w.is_empty() || w.contains(&0) {
            return Err(Error::param("U-Net needs at least one non-zero level width"));
        }
        let stem = ConvBlock::new(ps, &format!("{name}.stem"), 27 * in_ch, w[0], cfg)?;
        let mut enc = Vec::new();
        for l in 1..w.len() {
            enc.push((
                ConvBlock::new(ps, &format!("{name}.enc{l}.down"), 8 * w[l - 1], w[l], cfg)?,
                ConvBlock::new(ps, &format!("{name}.enc{l}.ssc"), 27 * w[l], w[l], cfg)?,
            ));
        }
        let top = w.len() - 1;
        let bottleneck = ConvBlock::new(ps, &format!("{name}.dec1.ssc"), 27 * w[top], w[top], cfg)?;
        let mut dec = Vec::new();
        for e in (0..top).rev() {
            let i = w.len() - e;
            dec.push((
                ConvBlock::with_norm_width(ps, &format!("{name}.dec{i}.up"), w[e + 1], 8 * w[e], w[e], cfg)?,
                ConvBlock::new(ps, &format!("{name}.dec{i}.ssc"), 27 * 2 * w[e], w[e], cfg)?,
            ));
        }
        let out = Linear::new(ps, &format!("{name}.out"), w[0], width, cfg.bias)?;
        Ok(Self { widths: w.clone(), stem, enc, bottleneck, dec, out })
    }

    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    /// Width of decoder level `i` (1-based, coarsest first).
    pub fn decoder_width(&self, i: usize) -> usize {
        self.widths[self.widths.len() - i]
    }

    pub fn out_width(&self) -> usize {
        self.out.d_out()
    }

    /// `input` holds one row per level-0 site; `point_to_site` maps points to
    /// level-0 sites. Decoder level `L` is evaluated per point.
    pub fn forward(
        &self,
        input: &Tensor,
        levels: &[LevelIndex],
        point_to_site: &Tensor,
        hook: &dyn DecoderHook,
    ) -> Result<SceneFeatures> {
        let depth = self.levels();
        if levels.len() != depth {
            return Err(Error::param(format!("U-Net has {depth} levels, geometry has {}", levels.len())));
        }
        if let Some(l) = levels.iter().position(|l| l.n_sites == 0) {
            return Err(Error::domain(format!("sparse level {} has no active sites", l + 1)));
        }
        let mut skips = vec![self.stem.ssc(input, &levels[0])?];
        for (l, (down, ssc)) in self.enc.iter().enumerate() {
            let x = down.down(&skips[l], &levels[l + 1])?;
            skips.push(ssc.ssc(&x, &levels[l + 1])?);
        }
        let mut x = self.bottleneck.ssc(&skips[depth - 1], &levels[depth - 1])?;
        if depth == 1 {
            x = x.index_select(point_to_site, 0)?;
        }
        x = hook.apply(1, x)?;
        let mut decoder = vec![x.clone()];
        for (j, (up, ssc)) in self.dec.iter().enumerate() {
            let i = j + 2;
            let e = depth - i;
            let y = up.up(&x, &levels[e + 1])?;
            let y = ssc.ssc(&Tensor::cat(&[&y, &skips[e]], 1)?, &levels[e])?;
            let y = if i == depth { y.index_select(point_to_site, 0)? } else { y };
            x = hook.apply(i, y)?;
            decoder.push(x.clone());
        }
        Ok(SceneFeatures { per_point: self.out.forward(&x)?, decoder })
    }
}
