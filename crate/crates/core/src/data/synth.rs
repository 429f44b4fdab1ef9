//! Procedural rooms and moving-patch clips.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, ManifestPair, Split};
use crate::encoders::ClipBlock;
use crate::pointcloud::{Point3, PointCloudScene};
use crate::{Error, Result};

pub const DEFAULT_CATALOG: [&str; 17] = [
    "sit", "open", "grasp", "wash", "pour", "cut", "press", "pull", "push", "wipe", "turn", "lift", "place",
    "hang", "plug", "stir", "lie",
];

const ROOM: f64 = 2.0;
const WALL_HEIGHT: f64 = 1.0;
const FLOOR: [f64; 3] = [0.5, 0.5, 0.5];
const WALL: [f64; 3] = [0.8, 0.8, 0.75];
const BODY: [f64; 3] = [0.55, 0.45, 0.35];
const BACKGROUND: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_scenes: usize,
    pub n_clips: usize,
    pub points_per_scene: usize,
    pub affordance_classes: usize,
    /// Inclusive range of labeled regions per scene.
    pub regions_per_scene: (usize, usize),
    /// Std of the coordinate jitter in meters.
    pub coord_noise: f64,
    pub color_noise: f64,
    pub clip_noise: f64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    /// Pixels per frame.
    pub patch_speed: f64,
    pub val_pairs: usize,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_scenes: 32,
            n_clips: 64,
            points_per_scene: 2048,
            affordance_classes: 17,
            regions_per_scene: (1, 4),
            coord_noise: 0.005,
            color_noise: 0.03,
            clip_noise: 0.05,
            frames: 16,
            height: 32,
            width: 32,
            patch: 6,
            patch_speed: 1.5,
            val_pairs: 16,
            rng_seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn tiny() -> Self {
        Self {
            n_scenes: 8,
            n_clips: 16,
            points_per_scene: 1024,
            affordance_classes: 4,
            regions_per_scene: (2, 4),
            val_pairs: 4,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "default" => Ok(Self::default()),
            other => Err(Error::Config { path: "preset".into(), message: format!("unknown synth preset `{other}`") }),
        }
    }

    /// Parse a TOML table of overrides on top of `base`.
    pub fn from_toml_str(text: &str, base: &Self) -> Result<Self> {
        let mut value = toml::Value::try_from(base).map_err(|e| Error::Config { path: "synth".into(), message: e.to_string() })?;
        let table: toml::Table =
            text.parse().map_err(|e: toml::de::Error| Error::Config { path: "synth".into(), message: e.to_string() })?;
        if let Some(root) = value.as_table_mut() {
            root.extend(table);
        }
        let cfg: Self = serde_path_to_error::deserialize(value)
            .map_err(|e| Error::Config { path: format!("synth.{}", e.path()), message: e.inner().to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, message: &str| Err(Error::Config { path: format!("synth.{path}"), message: message.into() });
        if self.n_scenes == 0 || self.n_clips == 0 || self.affordance_classes == 0 {
            return bad("n_scenes", "scene, clip and class counts must be positive");
        }
        let (lo, hi) = self.regions_per_scene;
        if lo == 0 || lo > hi || hi > self.affordance_classes.min(8) {
            return bad("regions_per_scene", "need 1 <= min <= max <= min(classes, 8)");
        }
        if self.points_per_scene < 64 * (hi + 1) {
            return bad("points_per_scene", "too few points for the requested regions");
        }
        if self.frames == 0 || self.patch == 0 || self.patch > self.height.min(self.width) {
            return bad("patch", "patch must fit inside non-empty frames");
        }
        if [self.coord_noise, self.color_noise, self.clip_noise].iter().any(|v| !(*v >= 0.0)) {
            return bad("color_noise", "noise levels must be non-negative");
        }
        if self.val_pairs >= self.n_clips {
            return bad("val_pairs", "must leave at least one training pair");
        }
        Ok(())
    }

    pub fn catalog(&self) -> BTreeMap<usize, String> {
        (0..self.affordance_classes)
            .map(|c| (c, DEFAULT_CATALOG.get(c).map(|s| s.to_string()).unwrap_or_else(|| format!("affordance_{c}"))))
            .collect()
    }

    /// Independent generator for item `index` of stream `kind`.
    fn rng(&self, kind: u64, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        rng.set_stream((kind << 32) | index as u64);
        rng
    }
}

/// Fully saturated hue for class `c`; injective over classes.
pub fn class_color(c: usize, classes: usize) -> [f64; 3] {
    let h = 6.0 * c as f64 / classes.max(1) as f64;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [r, g, b].map(|v| (v * 255.0).round() / 255.0)
}

fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

struct SceneBuilder<'a> {
    cfg: &'a SynthConfig,
    rng: &'a mut ChaCha8Rng,
    coords: Vec<Point3>,
    colors: Vec<Point3>,
    coord_noise: Normal<f64>,
    color_noise: Normal<f64>,
}

impl SceneBuilder<'_> {
    fn push(&mut self, p: [f64; 3], color: [f64; 3]) {
        let j: [f64; 3] = std::array::from_fn(|_| self.coord_noise.sample(self.rng));
        let c: [f64; 3] = std::array::from_fn(|_| self.color_noise.sample(self.rng));
        self.coords.push([(p[0] + j[0]) as f32, (p[1] + j[1]) as f32, (p[2] + j[2]) as f32]);
        self.colors.push(std::array::from_fn(|k| quantize(color[k] + c[k])));
    }

    fn floor(&mut self, n: usize) {
        for _ in 0..n {
            let p = [self.rng.random_range(0.0..ROOM), self.rng.random_range(0.0..ROOM), 0.0];
            self.push(p, FLOOR);
        }
    }

    fn walls(&mut self, n: usize) {
        for i in 0..n {
            let a = self.rng.random_range(0.0..ROOM);
            let z = self.rng.random_range(0.0..WALL_HEIGHT);
            let p = if i % 2 == 0 { [0.0, a, z] } else { [a, 0.0, z] };
            self.push(p, WALL);
        }
    }

    fn top(&mut self, shape: &Shape, n: usize, color: [f64; 3]) {
        for _ in 0..n {
            let p = match *shape {
                Shape::Box { cx, cy, hx, hy, h } => {
                    [cx + self.rng.random_range(-hx..hx), cy + self.rng.random_range(-hy..hy), h]
                }
                Shape::Cylinder { cx, cy, r, h } => {
                    let rho = r * self.rng.random::<f64>().sqrt();
                    let t = self.rng.random_range(0.0..2.0 * PI);
                    [cx + rho * t.cos(), cy + rho * t.sin(), h]
                }
            };
            self.push(p, color);
        }
    }

    fn sides(&mut self, shape: &Shape, n: usize, color: [f64; 3]) {
        for _ in 0..n {
            let p = match *shape {
                Shape::Box { cx, cy, hx, hy, h } => {
                    let s = self.rng.random_range(0.0..4.0 * (hx + hy));
                    let (x, y) = if s < 2.0 * hx {
                        (cx - hx + s, cy - hy)
                    } else if s < 2.0 * (hx + hy) {
                        (cx + hx, cy - hy + s - 2.0 * hx)
                    } else if s < 4.0 * hx + 2.0 * hy {
                        (cx + hx - (s - 2.0 * (hx + hy)), cy + hy)
                    } else {
                        (cx - hx, cy + hy - (s - 4.0 * hx - 2.0 * hy))
                    };
                    [x, y, self.rng.random_range(0.0..h)]
                }
                Shape::Cylinder { cx, cy, r, h } => {
                    let t = self.rng.random_range(0.0..2.0 * PI);
                    [cx + r * t.cos(), cy + r * t.sin(), self.rng.random_range(0.0..h)]
                }
            };
            self.push(p, color);
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Box { cx: f64, cy: f64, hx: f64, hy: f64, h: f64 },
    Cylinder { cx: f64, cy: f64, r: f64, h: f64 },
}

/// Primitive whose top surface carries the region of class `c`.
fn class_shape(c: usize, cx: f64, cy: f64, rng: &mut ChaCha8Rng) -> Shape {
    let h = 0.25 + 0.15 * ((c / 2) % 3) as f64 + rng.random_range(-0.03..0.03);
    if c % 2 == 0 {
        Shape::Box { cx, cy, hx: rng.random_range(0.18..0.25), hy: rng.random_range(0.18..0.25), h }
    } else {
        Shape::Cylinder { cx, cy, r: rng.random_range(0.17..0.24), h }
    }
}

/// A room with one object per entry of `classes` (plus a distractor); the
/// top surface of each object is the labeled region of that class.
pub fn generate_scene_with(
    cfg: &SynthConfig,
    scene_id: &str,
    classes: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<PointCloudScene> {
    if classes.is_empty() || classes.len() > 8 || classes.iter().any(|&c| c >= cfg.affordance_classes) {
        return Err(Error::param(format!("invalid region classes {classes:?}")));
    }
    let n = cfg.points_per_scene;
    let mut cells: Vec<usize> = (0..9).collect();
    cells.shuffle(rng);
    let cell = ROOM / 3.0;
    let mut shapes = Vec::new();
    for (o, &slot) in cells.iter().take(classes.len() + 1).enumerate() {
        let cx = cell * ((slot % 3) as f64 + 0.5) + rng.random_range(-0.06..0.06);
        let cy = cell * ((slot / 3) as f64 + 0.5) + rng.random_range(-0.06..0.06);
        let shape = match classes.get(o) {
            Some(&c) => class_shape(c, cx, cy, rng),
            None => Shape::Box {
                cx,
                cy,
                hx: rng.random_range(0.15..0.25),
                hy: rng.random_range(0.15..0.25),
                h: rng.random_range(0.2..0.6),
            },
        };
        shapes.push(shape);
    }
    let n_walls = n * 15 / 100;
    let per_object = n * 60 / 100 / shapes.len();
    let n_floor = n - n_walls - per_object * shapes.len();
    let mut b = SceneBuilder {
        cfg,
        rng,
        coords: Vec::with_capacity(n),
        colors: Vec::with_capacity(n),
        coord_noise: Normal::new(0.0, cfg.coord_noise).map_err(|e| Error::param(e.to_string()))?,
        color_noise: Normal::new(0.0, cfg.color_noise).map_err(|e| Error::param(e.to_string()))?,
    };
    b.floor(n_floor);
    b.walls(n_walls);
    let mut masks = Vec::new();
    for (o, shape) in shapes.iter().enumerate() {
        let tint: f64 = b.rng.random_range(-0.05..0.05);
        let body = BODY.map(|v| v + tint);
        let n_top = per_object * 2 / 5;
        let start = b.coords.len();
        match classes.get(o) {
            Some(&c) => b.top(shape, n_top, class_color(c, b.cfg.affordance_classes).map(|v| 0.9 * v)),
            None => b.top(shape, n_top, body),
        }
        if o < classes.len() {
            let mut m = vec![false; n];
            m[start..start + n_top].iter_mut().for_each(|v| *v = true);
            masks.push(m);
        }
        b.sides(shape, per_object - n_top, body);
    }
    PointCloudScene::new(scene_id, b.coords, b.colors, masks, classes.to_vec())
}

/// Scene with a random number of distinct region classes.
pub fn generate_scene(cfg: &SynthConfig, scene_id: &str, rng: &mut ChaCha8Rng) -> Result<PointCloudScene> {
    let (lo, hi) = cfg.regions_per_scene;
    let count = rng.random_range(lo..=hi);
    let mut all: Vec<usize> = (0..cfg.affordance_classes).collect();
    all.shuffle(rng);
    all.truncate(count);
    generate_scene_with(cfg, scene_id, &all, rng)
}

/// A patch of the class color moving along the class direction over a
/// noisy gray background. Positions wrap around the frame.
pub fn generate_clip(affordance_id: usize, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<ClipBlock> {
    if affordance_id >= cfg.affordance_classes {
        return Err(Error::param(format!("class {affordance_id} outside the catalog of {}", cfg.affordance_classes)));
    }
    let (t_n, h, w, p) = (cfg.frames, cfg.height, cfg.width, cfg.patch);
    let color = class_color(affordance_id, cfg.affordance_classes);
    let angle = 2.0 * PI * affordance_id as f64 / cfg.affordance_classes as f64;
    let (vx, vy) = (cfg.patch_speed * angle.cos(), cfg.patch_speed * angle.sin());
    let x0 = rng.random_range(0.0..w as f64);
    let y0 = rng.random_range(0.0..h as f64);
    let noise = Normal::new(0.0, cfg.clip_noise).map_err(|e| Error::param(e.to_string()))?;
    let mut pixels = Vec::with_capacity(t_n * h * w * 3);
    for t in 0..t_n {
        let px = (x0 + vx * t as f64).rem_euclid(w as f64).floor() as usize;
        let py = (y0 + vy * t as f64).rem_euclid(h as f64).floor() as usize;
        for y in 0..h {
            let in_y = (y + h - py) % h < p;
            for x in 0..w {
                let inside = in_y && (x + w - px) % w < p;
                for ch in 0..3 {
                    let base = if inside { color[ch] } else { BACKGROUND };
                    let v = if cfg.clip_noise > 0.0 { base + noise.sample(rng) } else { base };
                    pixels.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    ClipBlock::new(t_n, h, w, pixels)
}

#[derive(Debug, Clone)]
pub struct SynthClip {
    pub clip_id: String,
    pub affordance_id: usize,
    pub block: ClipBlock,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub scenes: Vec<PointCloudScene>,
    pub clips: Vec<SynthClip>,
    pub train: DatasetManifest,
    pub val: DatasetManifest,
}

pub fn scene_id(i: usize) -> String {
    format!("scene_{i:03}")
}

pub fn clip_id(i: usize) -> String {
    format!("clip_{i:03}")
}

/// The full dataset as a pure function of the config. Scene `s` always
/// contains class `s mod classes`, so every class can be paired.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let k = cfg.affordance_classes;
    let scenes: Vec<PointCloudScene> = (0..cfg.n_scenes)
        .map(|s| {
            let mut rng = cfg.rng(1, s);
            let (lo, hi) = cfg.regions_per_scene;
            let count = rng.random_range(lo..=hi);
            let mut rest: Vec<usize> = (0..k).filter(|&c| c != s % k).collect();
            rest.shuffle(&mut rng);
            let mut classes = vec![s % k];
            classes.extend(rest.into_iter().take(count - 1));
            generate_scene_with(cfg, &scene_id(s), &classes, &mut rng)
        })
        .collect::<Result<_>>()?;
    let clips: Vec<SynthClip> = (0..cfg.n_clips)
        .map(|i| {
            let c = i % k;
            Ok(SynthClip { clip_id: clip_id(i), affordance_id: c, block: generate_clip(c, cfg, &mut cfg.rng(2, i))? })
        })
        .collect::<Result<_>>()?;

    let mut rng = cfg.rng(3, 0);
    let mut pairs = Vec::new();
    for clip in &clips {
        let hosts: Vec<&PointCloudScene> =
            scenes.iter().filter(|s| s.gt_affordance_ids().contains(&clip.affordance_id)).collect();
        let Some(scene) = hosts.choose(&mut rng) else {
            return Err(Error::internal(format!("no scene hosts class {}", clip.affordance_id)));
        };
        let regions =
            (0..scene.gt_masks().len()).filter(|&j| scene.gt_affordance_ids()[j] == clip.affordance_id).collect();
        pairs.push(ManifestPair {
            clip_id: clip.clip_id.clone(),
            scene_id: scene.scene_id().to_string(),
            gt_region_indices: regions,
        });
    }
    // Held-out pairs are the last clips of each class in turn, so every
    // class keeps training pairs.
    let mut val_idx = Vec::new();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, c) in clips.iter().enumerate() {
        by_class[c.affordance_id].push(i);
    }
    'outer: loop {
        let before = val_idx.len();
        for list in by_class.iter_mut() {
            if val_idx.len() == cfg.val_pairs {
                break 'outer;
            }
            if list.len() > 1 {
                val_idx.push(list.pop().unwrap());
            }
        }
        if val_idx.len() == before {
            break;
        }
    }
    val_idx.sort_unstable();
    let (val, train): (Vec<(usize, ManifestPair)>, Vec<(usize, ManifestPair)>) =
        pairs.into_iter().enumerate().partition(|(i, _)| val_idx.contains(i));
    let manifest = |split, pairs: Vec<(usize, ManifestPair)>| DatasetManifest::new(
        split,
        cfg.catalog(),
        pairs.into_iter().map(|(_, p)| p).collect(),
    );
    Ok(SynthDataset {
        config: cfg.clone(),
        train: manifest(Split::Train, train),
        val: manifest(Split::Val, val),
        scenes,
        clips,
    })
}

/// Normalized joint RGB histogram with `bins` levels per channel.
pub fn color_histogram(clip: &ClipBlock, bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins * bins * bins];
    let bin = |v: f32| ((v as f64 * bins as f64) as usize).min(bins - 1);
    for px in clip.pixels.chunks_exact(3) {
        h[(bin(px[0]) * bins + bin(px[1])) * bins + bin(px[2])] += 1.0;
    }
    let total = (clip.pixels.len() / 3) as f64;
    h.iter_mut().for_each(|v| *v /= total);
    h
}

/// Accuracy of a nearest-centroid classifier on color histograms, fit on
/// `train` and scored on `test`.
pub fn histogram_classifier_accuracy(train: &[(usize, &ClipBlock)], test: &[(usize, &ClipBlock)], bins: usize) -> f64 {
    let mut centroids: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (c, clip) in train {
        let h = color_histogram(clip, bins);
        let e = centroids.entry(*c).or_insert_with(|| (vec![0.0; h.len()], 0));
        e.0.iter_mut().zip(&h).for_each(|(a, b)| *a += b);
        e.1 += 1;
    }
    let correct = test
        .iter()
        .filter(|(c, clip)| {
            let h = color_histogram(clip, bins);
            let best = centroids
                .iter()
                .map(|(k, (sum, n))| {
                    let d: f64 = sum.iter().zip(&h).map(|(s, v)| (s / *n as f64 - v).powi(2)).sum();
                    (*k, d)
                })
                .min_by(|a, b| a.1.total_cmp(&b.1));
            best.map(|b| b.0) == Some(*c)
        })
        .count();
    correct as f64 / test.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic() {
        let cfg = SynthConfig::tiny();
        let a = generate_scene(&cfg, "s", &mut cfg.rng(1, 3)).unwrap();
        let b = generate_scene(&cfg, "s", &mut cfg.rng(1, 3)).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&cfg, "s", &mut cfg.rng(1, 4)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn region_count_follows_config() {
        let cfg = SynthConfig { regions_per_scene: (1, 1), ..SynthConfig::tiny() };
        for i in 0..5 {
            let s = generate_scene(&cfg, "s", &mut cfg.rng(1, i)).unwrap();
            assert_eq!(s.gt_masks().len(), 1);
        }
    }

    #[test]
    fn generated_scenes_are_valid() {
        let cfg = SynthConfig { points_per_scene: 512, ..SynthConfig::default() };
        for i in 0..100 {
            let s = generate_scene(&cfg, "s", &mut cfg.rng(1, i)).unwrap();
            assert_eq!(s.len(), 512);
            let (lo, hi) = cfg.regions_per_scene;
            assert!((lo..=hi).contains(&s.gt_masks().len()));
            let mut ids = s.gt_affordance_ids().to_vec();
            ids.sort_unstable();
            ids.dedup();
            assert_eq!(ids.len(), s.gt_masks().len());
            for m in s.gt_masks() {
                assert_eq!(m.len(), 512);
                assert!(m.iter().any(|&v| v));
            }
            assert!(s.colors().iter().flatten().all(|v| (v * 255.0).fract().abs() < 1e-3 || (v * 255.0).fract() > 0.999));
        }
    }

    #[test]
    fn class_colors_are_distinct() {
        for k in [4usize, 17] {
            let colors: Vec<[f64; 3]> = (0..k).map(|c| class_color(c, k)).collect();
            for i in 0..k {
                for j in 0..i {
                    assert_ne!(colors[i], colors[j], "classes {i} and {j} of {k}");
                }
            }
        }
    }

    #[test]
    fn noiseless_clips_differ_only_by_start() {
        let cfg = SynthConfig { clip_noise: 0.0, ..SynthConfig::tiny() };
        let a = generate_clip(1, &cfg, &mut cfg.rng(2, 0)).unwrap();
        let b = generate_clip(1, &cfg, &mut cfg.rng(2, 1)).unwrap();
        // Same pixel multiset per frame: one patch of one color on a flat background.
        for t in 0..cfg.frames {
            let count = |c: &ClipBlock| c.frame(t).chunks_exact(3).filter(|p| p[0] != BACKGROUND as f32).count();
            assert_eq!(count(&a), cfg.patch * cfg.patch);
            assert_eq!(count(&a), count(&b));
        }
        assert_eq!(color_histogram(&a, 8), color_histogram(&b, 8));
        assert!(generate_clip(4, &cfg, &mut cfg.rng(2, 0)).is_err());
    }

    #[test]
    fn histogram_oracle_recovers_classes() {
        for classes in [4usize, 17] {
            let cfg = SynthConfig { clip_noise: 0.0, affordance_classes: classes, ..SynthConfig::tiny() };
            let clips: Vec<(usize, ClipBlock)> =
                (0..100).map(|i| (i % classes, generate_clip(i % classes, &cfg, &mut cfg.rng(2, i)).unwrap())).collect();
            let refs: Vec<(usize, &ClipBlock)> = clips.iter().map(|(c, b)| (*c, b)).collect();
            let (fit, test) = refs.split_at(50);
            let acc = histogram_classifier_accuracy(fit, test, 8);
            assert!(acc > 0.9, "{classes} classes: accuracy {acc}");
        }
    }

    #[test]
    fn tiny_dataset_contract() {
        let ds = synth_dataset(&SynthConfig::tiny()).unwrap();
        assert_eq!(ds.scenes.len(), 8);
        assert_eq!(ds.clips.len(), 16);
        assert_eq!(ds.train.pairs.len(), 12);
        assert_eq!(ds.val.pairs.len(), 4);
        assert_eq!(ds.train.affordance_catalog.len(), 4);
        let val_classes: Vec<usize> =
            ds.val.pairs.iter().map(|p| ds.clips.iter().find(|c| c.clip_id == p.clip_id).unwrap().affordance_id).collect();
        let mut sorted = val_classes.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
        for p in ds.train.pairs.iter().chain(&ds.val.pairs) {
            let scene = ds.scenes.iter().find(|s| s.scene_id() == p.scene_id).unwrap();
            let clip = ds.clips.iter().find(|c| c.clip_id == p.clip_id).unwrap();
            assert_eq!(p.gt_region_indices.len(), 1);
            assert_eq!(scene.gt_affordance_ids()[p.gt_region_indices[0]], clip.affordance_id);
        }
        let again = synth_dataset(&SynthConfig::tiny()).unwrap();
        assert_eq!(serde_json::to_string(&ds.train).unwrap(), serde_json::to_string(&again.train).unwrap());
        assert_eq!(ds.scenes, again.scenes);
    }
}
