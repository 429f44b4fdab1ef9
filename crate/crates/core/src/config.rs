//! Declarative run configuration.
//!
//! Configs are TOML key-value trees. Every key has a default, so an empty
//! file is valid. Environment variables prefixed with `EGOSAG_` override
//! keys, with `__` separating path segments (`EGOSAG_OPTIM__LR=0.001`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::pointcloud::{PoolReducer, SuperpointParams};
use crate::{Error, Result};

pub const ENV_PREFIX: &str = "EGOSAG_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub isa: IsaConfig,
    pub bqd: BqdConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            isa: IsaConfig::default(),
            bqd: BqdConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            data: DataConfig::default(),
            output: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Shared feature width `C`.
    pub width: usize,
    /// Number of affordance categories.
    pub classes: usize,
    /// Voxel edge length in meters.
    pub voxel_size: f64,
    /// Append mean site coordinates to the voxel input features.
    pub input_coords: bool,
    /// Upper bound on superpoints per scene.
    pub superpoints: usize,
    pub superpoint_graph: SuperpointParams,
    pub pool: PoolReducer,
    pub unet: UnetConfig,
    pub video: VideoConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 512,
            classes: 17,
            voxel_size: 0.05,
            input_coords: true,
            superpoints: 512,
            superpoint_graph: SuperpointParams::default(),
            pool: PoolReducer::Mean,
            unet: UnetConfig::default(),
            video: VideoConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnetConfig {
    /// Encoder widths from the finest to the coarsest level; the decoder mirrors them.
    pub widths: Vec<usize>,
    pub norm: bool,
    pub activation: bool,
    pub bias: bool,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self { widths: vec![32, 64, 128, 256, 512], norm: true, activation: true, bias: true }
    }
}

impl UnetConfig {
    /// No bias, no normalization, no nonlinearity: the backbone becomes linear.
    pub fn linear_only(widths: Vec<usize>) -> Self {
        Self { widths, norm: false, activation: false, bias: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    /// Strided 3-D convolution stack over raw clip blocks.
    Toy,
    /// Token grids loaded from feature files.
    Precomputed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VideoConfig {
    pub encoder: EncoderMode,
    /// Frames after temporal resampling.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Per-stage (t, h, w) strides; kernels equal strides.
    pub strides: Vec<[usize; 3]>,
    /// Per-stage output widths, followed by a projection to `model.width`.
    pub widths: Vec<usize>,
}

impl Default for VideoConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderMode::Toy,
            frames: 16,
            height: 224,
            width: 224,
            strides: vec![[1, 4, 4], [2, 4, 4], [2, 2, 2]],
            widths: vec![64, 128, 256],
        }
    }
}

impl VideoConfig {
    pub fn token_grid(&self) -> Result<[usize; 3]> {
        let mut dims = [self.frames, self.height, self.width];
        for s in &self.strides {
            for d in 0..3 {
                if s[d] == 0 || dims[d] % s[d] != 0 {
                    return Err(Error::param(format!("clip dims {dims:?} not divisible by stride {s:?}")));
                }
                dims[d] /= s[d];
            }
        }
        Ok(dims)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupReducer {
    #[default]
    Max,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IsaConfig {
    pub enabled: bool,
    /// Centroid cap per level; the actual count is `min(N_i, n_c)`.
    pub n_c: Vec<usize>,
    pub k: Vec<usize>,
    /// Grouping radius per level in meters; empty means `2 * voxel_size * 2^(L - i)`.
    pub r: Vec<f64>,
    pub heads: Vec<usize>,
    pub reducer: GroupReducer,
    pub k_interp: usize,
    pub interp_eps: f64,
    pub gate_bias: f64,
    /// Add the grouped features back onto the attention output.
    pub attention_residual: bool,
}

impl Default for IsaConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            n_c: vec![64],
            k: vec![16],
            r: vec![],
            heads: vec![4],
            reducer: GroupReducer::Max,
            k_interp: 3,
            interp_eps: 1e-8,
            gate_bias: -4.0,
            attention_residual: true,
        }
    }
}

/// Resolved ISA settings for one decoder level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IsaLevel {
    pub n_c: usize,
    pub k: usize,
    pub r: f64,
    pub heads: usize,
}

impl IsaConfig {
    /// Settings for decoder level `i` (1-based, coarsest first) of `levels`.
    /// Single-entry lists apply to every level.
    pub fn level(&self, i: usize, levels: usize, voxel_size: f64) -> Result<IsaLevel> {
        fn pick<T: Copy>(v: &[T], i: usize, key: &str) -> Result<Option<T>> {
            match v.len() {
                0 => Ok(None),
                1 => Ok(Some(v[0])),
                _ => v.get(i - 1).copied().map(Some).ok_or_else(|| Error::Config {
                    path: format!("isa.{key}"),
                    message: format!("no entry for level {i}"),
                }),
            }
        }
        let n_c = pick(&self.n_c, i, "n_c")?.unwrap_or(64);
        let k = pick(&self.k, i, "k")?.unwrap_or(16);
        let heads = pick(&self.heads, i, "heads")?.unwrap_or(4);
        let r = pick(&self.r, i, "r")?.unwrap_or(2.0 * voxel_size * 2f64.powi((levels - i) as i32));
        if n_c == 0 || k == 0 || !(r > 0.0) || heads == 0 {
            return Err(Error::param(format!("invalid ISA settings at level {i}: n_c={n_c} k={k} r={r} heads={heads}")));
        }
        Ok(IsaLevel { n_c, k, r, heads })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BqdConfig {
    /// Decoder layers `L`.
    pub layers: usize,
    /// Query count `Q`.
    pub queries: usize,
    pub heads: usize,
    /// Use the two-branch decoder; otherwise a single cross-attention fusion
    /// in front of a geometry-only decoder.
    pub bilateral: bool,
    /// Supervise every layer; otherwise only the last one.
    pub per_layer_heads: bool,
    pub ffn_mult: usize,
}

impl Default for BqdConfig {
    fn default() -> Self {
        Self { layers: 6, queries: 50, heads: 8, bilateral: true, per_layer_heads: true, ffn_mult: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiceVariant {
    /// `1 - 2 (p.g + 1) / (sum p + sum g + 1)`.
    #[default]
    Literal,
    /// `1 - (2 p.g + 1) / (sum p + sum g + 1)`.
    Standard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weights of the CE, mask, KL and contrastive terms.
    pub lambda: [f64; 4],
    /// Matching cost weights of BCE and Dice.
    pub zeta: [f64; 2],
    pub dice_variant: DiceVariant,
    /// Inference score threshold.
    pub tau: f64,
    pub top_k: Option<usize>,
    /// IoU above which a query counts as a positive.
    pub positive_iou: f64,
    /// Probability threshold for binarizing masks.
    pub binarize: f64,
    pub bce_clamp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: [1.0, 0.5, 0.5, 0.5],
            zeta: [2.0, 5.0],
            dice_variant: DiceVariant::Literal,
            tau: 0.5,
            top_k: None,
            positive_iou: 0.5,
            binarize: 0.5,
            bce_clamp: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub algorithm: String,
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub epochs: usize,
    /// Step budget; overrides `epochs` when set.
    pub steps: Option<usize>,
    pub batch: usize,
    pub seed: u64,
    pub deterministic: bool,
    pub grad_clip: Option<f64>,
    /// Validate every this many steps (and at the end).
    pub eval_every: Option<usize>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            algorithm: "adamw".into(),
            lr: 1e-4,
            weight_decay: 0.01,
            betas: [0.9, 0.999],
            eps: 1e-8,
            epochs: 250,
            steps: None,
            batch: 1,
            seed: 0,
            deterministic: false,
            grad_clip: Some(1.0),
            eval_every: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
}

/// The architecture-defining part of a run config.
#[derive(Debug, Clone, Copy)]
pub struct ArchConfig<'a> {
    pub model: &'a ModelConfig,
    pub isa: &'a IsaConfig,
    pub bqd: &'a BqdConfig,
}

impl RunConfig {
    pub fn arch(&self) -> ArchConfig<'_> {
        ArchConfig { model: &self.model, isa: &self.isa, bqd: &self.bqd }
    }

    /// Named desk-scale presets.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config { path: "preset".into(), message: format!("unknown preset `{other}`") }),
        }
    }

    /// Small model sized for the `tiny` synthetic dataset on one CPU core.
    pub fn tiny() -> Self {
        let mut c = Self::default();
        c.model.width = 32;
        c.model.classes = 4;
        c.model.voxel_size = 0.1;
        c.model.superpoints = 64;
        c.model.input_coords = false;
        c.model.unet.widths = vec![32, 32];
        c.model.video = VideoConfig {
            encoder: EncoderMode::Toy,
            frames: 16,
            height: 32,
            width: 32,
            strides: vec![[4, 4, 4]],
            widths: vec![32],
        };
        c.isa.n_c = vec![32];
        c.isa.k = vec![8];
        c.bqd.layers = 3;
        c.bqd.queries = 8;
        c.bqd.heads = 4;
        c.loss.top_k = Some(1);
        c.optim.lr = 2e-3;
        c.optim.batch = 12;
        c.optim.steps = Some(300);
        c.optim.eval_every = Some(100);
        c.output = PathBuf::from("runs/tiny");
        c
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let value: toml::Value = text.parse::<toml::Table>().map(toml::Value::Table).map_err(|e| Error::Config {
            path: String::new(),
            message: e.to_string(),
        })?;
        Self::from_value(value)
    }

    /// Load a config file, apply environment overrides, and validate.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::MissingFile(p.to_path_buf()),
                _ => e.into(),
            })?,
            None => String::new(),
        };
        Self::load_str(&text, &path.map(|p| p.display().to_string()).unwrap_or_default())
    }

    /// Parse config text, apply environment overrides, and validate.
    pub fn load_str(text: &str, origin: &str) -> Result<Self> {
        let mut value = text
            .parse::<toml::Table>()
            .map(toml::Value::Table)
            .map_err(|e| Error::Config { path: origin.to_string(), message: e.to_string() })?;
        apply_env_overrides(&mut value, std::env::vars())?;
        Self::from_value(value)
    }

    fn from_value(value: toml::Value) -> Result<Self> {
        let config: Self = serde_path_to_error::deserialize(value).map_err(|e| Error::Config {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config { path: String::new(), message: e.to_string() })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, message: &str| Err(Error::Config { path: path.into(), message: message.into() });
        if self.model.width == 0 {
            return bad("model.width", "must be positive");
        }
        if self.model.classes == 0 {
            return bad("model.classes", "must be positive");
        }
        if !(self.model.voxel_size > 0.0) {
            return bad("model.voxel_size", "must be positive");
        }
        if self.model.superpoints == 0 {
            return bad("model.superpoints", "must be positive");
        }
        if self.model.unet.widths.is_empty() || self.model.unet.widths.contains(&0) {
            return bad("model.unet.widths", "need at least one positive width");
        }
        if self.model.video.strides.len() != self.model.video.widths.len() {
            return bad("model.video.widths", "need one width per stride");
        }
        if let Err(e) = self.model.video.token_grid() {
            return bad("model.video.strides", &e.to_string());
        }
        if self.bqd.layers == 0 || self.bqd.queries == 0 {
            return bad("bqd", "layers and queries must be positive");
        }
        if self.bqd.heads == 0 || self.model.width % self.bqd.heads != 0 {
            return bad("bqd.heads", "must divide model.width");
        }
        if self.loss.lambda.iter().chain(&self.loss.zeta).any(|l| *l < 0.0) {
            return bad("loss.lambda", "weights must be non-negative");
        }
        if self.optim.algorithm != "adamw" {
            return bad("optim.algorithm", "only `adamw` is supported");
        }
        if self.optim.batch == 0 {
            return bad("optim.batch", "must be positive");
        }
        let levels = self.model.unet.widths.len();
        for i in 1..=levels {
            let lv = self.isa.level(i, levels, self.model.voxel_size)?;
            let ci = self.model.unet.widths[levels - i];
            if ci % lv.heads != 0 {
                return bad("isa.heads", &format!("{} heads do not divide level {i} width {ci}", lv.heads));
            }
        }
        Ok(())
    }
}

impl ArchConfig<'_> {
    /// Hash of everything that determines parameter shapes and semantics.
    pub fn hash(&self) -> String {
        let canonical = serde_json::json!({ "model": self.model, "isa": self.isa, "bqd": self.bqd });
        let digest = Sha256::digest(canonical.to_string().as_bytes());
        digest.iter().take(16).map(|b| format!("{b:02x}")).collect()
    }
}

/// Apply `EGOSAG_A__B=value` overrides onto a TOML tree.
pub fn apply_env_overrides(
    root: &mut toml::Value,
    vars: impl IntoIterator<Item = (String, String)>,
) -> Result<()> {
    let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key[ENV_PREFIX.len()..].split("__").map(|s| s.to_ascii_lowercase()).collect();
        if path.iter().any(String::is_empty) {
            return Err(Error::Config { path: key, message: "empty path segment".into() });
        }
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.clone()));
        let mut node = &mut *root;
        for seg in &path[..path.len() - 1] {
            let table = node.as_table_mut().ok_or_else(|| Error::Config {
                path: path.join("."),
                message: "override descends into a non-table value".into(),
            })?;
            node = table.entry(seg.clone()).or_insert_with(|| toml::Value::Table(Default::default()));
        }
        node.as_table_mut()
            .ok_or_else(|| Error::Config { path: path.join("."), message: "override target is not a table".into() })?
            .insert(path.last().unwrap().clone(), value);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reported_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!(c.model.width, 512);
        assert_eq!(c.bqd.queries, 50);
        assert_eq!(c.bqd.layers, 6);
        assert_eq!(c.loss.lambda, [1.0, 0.5, 0.5, 0.5]);
        assert_eq!(c.loss.zeta, [2.0, 5.0]);
        assert_eq!(c.loss.tau, 0.5);
        assert_eq!(c.optim.lr, 1e-4);
        assert_eq!(c.model.video.frames, 16);
        assert_eq!(c.model.video.token_grid().unwrap(), [4, 7, 7]);
        c.validate().unwrap();
        RunConfig::tiny().validate().unwrap();
    }

    #[test]
    fn unknown_key_reports_path() {
        let err = RunConfig::from_toml_str("[optim]\nlrr = 0.1\n").unwrap_err();
        match err {
            Error::Config { path, message } => {
                assert!(path.contains("optim"), "{path}");
                assert!(message.contains("lrr"), "{message}");
            }
            e => panic!("unexpected {e:?}"),
        }
        let err = RunConfig::from_toml_str("[bqd]\nheads = 7\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref path, .. } if path == "bqd.heads"));
    }

    #[test]
    fn env_overrides_apply() {
        let mut v = toml::Value::Table(Default::default());
        apply_env_overrides(
            &mut v,
            vec![
                ("EGOSAG_OPTIM__LR".to_string(), "0.003".to_string()),
                ("EGOSAG_MODEL__UNET__WIDTHS".to_string(), "[8, 8]".to_string()),
                ("EGOSAG_OUTPUT".to_string(), "out/dir".to_string()),
                ("OTHER".to_string(), "1".to_string()),
            ],
        )
        .unwrap();
        let c = RunConfig::from_value(v).unwrap();
        assert_eq!(c.optim.lr, 0.003);
        assert_eq!(c.model.unet.widths, vec![8, 8]);
        assert_eq!(c.output, PathBuf::from("out/dir"));
    }

    #[test]
    fn toml_round_trip_and_hash() {
        let c = RunConfig::tiny();
        let back = RunConfig::from_toml_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(c, back);
        let mut d = c.clone();
        d.optim.lr = 0.5;
        assert_eq!(c.arch().hash(), d.arch().hash());
        d.model.width = 64;
        assert_ne!(c.arch().hash(), d.arch().hash());
    }

    #[test]
    fn isa_level_defaults_track_resolution() {
        let c = IsaConfig::default();
        let l5 = c.level(5, 5, 0.1).unwrap();
        let l1 = c.level(1, 5, 0.1).unwrap();
        assert!((l5.r - 0.2).abs() < 1e-12);
        assert!((l1.r - 3.2).abs() < 1e-12);
        assert_eq!((l1.n_c, l1.k), (64, 16));
    }
}
