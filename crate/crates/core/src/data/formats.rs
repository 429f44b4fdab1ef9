//! On-disk formats: PLY scenes with JSON sidecars, raw clip blocks and
//! precomputed clip features.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ply_rs::parser::Parser;
use ply_rs::ply::{Addable, DefaultElement, ElementDef, Encoding, Ply, Property, PropertyDef, PropertyType, ScalarType};
use ply_rs::writer::Writer;
use serde::{Deserialize, Serialize};

use crate::encoders::ClipBlock;
use crate::pointcloud::{Point3, PointCloudScene};
use crate::{Error, Result};

pub const CLIP_MAGIC: &[u8; 4] = b"EGSC";
pub const FEATURE_MAGIC: &[u8; 4] = b"EGSF";
pub const FORMAT_VERSION: u32 = 1;

pub(crate) fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => e.into(),
    })
}

pub(crate) fn malformed(path: &Path, message: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), message: message.into() }
}

/// Read the magic and version; a wrong magic or version is a version mismatch.
pub(crate) fn read_header(r: &mut impl Read, path: &Path, magic: &[u8; 4], version: u32) -> Result<()> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m).map_err(|_| malformed(path, "truncated header"))?;
    if &m != magic {
        return Err(Error::VersionMismatch {
            what: path.display().to_string(),
            detail: format!("magic {:?} (expected {:?})", String::from_utf8_lossy(&m), String::from_utf8_lossy(magic)),
        });
    }
    let v = r.read_u32::<LittleEndian>().map_err(|_| malformed(path, "truncated header"))?;
    if v != version {
        return Err(Error::VersionMismatch {
            what: path.display().to_string(),
            detail: format!("version {v} (expected {version})"),
        });
    }
    Ok(())
}

pub(crate) fn read_f32s(r: &mut impl Read, n: usize, path: &Path) -> Result<Vec<f32>> {
    let mut out = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut out).map_err(|_| malformed(path, format!("expected {n} float32 values")))?;
    Ok(out)
}

fn expect_eof(r: &mut impl Read, path: &Path) -> Result<()> {
    let mut rest = [0u8; 1];
    match r.read(&mut rest)? {
        0 => Ok(()),
        _ => Err(malformed(path, "trailing bytes")),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRecord {
    pub affordance_id: usize,
    pub point_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSidecar {
    pub scene_id: String,
    pub regions: Vec<RegionRecord>,
}

/// Binary little-endian PLY with float32 `x, y, z` and uchar `red, green, blue`.
pub fn write_ply(path: &Path, coords: &[Point3], colors: &[Point3]) -> Result<()> {
    if coords.len() != colors.len() {
        return Err(Error::param("coords and colors differ in length"));
    }
    let mut ply = Ply::<DefaultElement>::new();
    ply.header.encoding = Encoding::BinaryLittleEndian;
    let mut vertex = ElementDef::new("vertex".to_string());
    for name in ["x", "y", "z"] {
        vertex.properties.add(PropertyDef::new(name.to_string(), PropertyType::Scalar(ScalarType::Float)));
    }
    for name in ["red", "green", "blue"] {
        vertex.properties.add(PropertyDef::new(name.to_string(), PropertyType::Scalar(ScalarType::UChar)));
    }
    ply.header.elements.add(vertex);
    let rows = coords
        .iter()
        .zip(colors)
        .map(|(p, c)| {
            let mut e = DefaultElement::new();
            for (k, name) in ["x", "y", "z"].iter().enumerate() {
                e.insert(name.to_string(), Property::Float(p[k]));
            }
            for (k, name) in ["red", "green", "blue"].iter().enumerate() {
                e.insert(name.to_string(), Property::UChar((c[k].clamp(0.0, 1.0) * 255.0).round() as u8));
            }
            e
        })
        .collect();
    ply.payload.insert("vertex".to_string(), rows);
    let mut out = BufWriter::new(File::create(path)?);
    Writer::new().write_ply(&mut out, &mut ply).map_err(|e| malformed(path, e.to_string()))?;
    out.flush()?;
    Ok(())
}

pub fn read_ply(path: &Path) -> Result<(Vec<Point3>, Vec<Point3>)> {
    let mut r = BufReader::new(open(path)?);
    let ply = Parser::<DefaultElement>::new().read_ply(&mut r).map_err(|e| malformed(path, e.to_string()))?;
    let vertices = ply.payload.get("vertex").ok_or_else(|| malformed(path, "no vertex element"))?;
    let get = |e: &DefaultElement, name: &str| -> Result<f32> {
        match e.get(name) {
            Some(Property::Float(v)) => Ok(*v),
            Some(Property::Double(v)) => Ok(*v as f32),
            Some(Property::UChar(v)) => Ok(*v as f32 / 255.0),
            _ => Err(malformed(path, format!("vertex property `{name}` missing or of unsupported type"))),
        }
    };
    let mut coords = Vec::with_capacity(vertices.len());
    let mut colors = Vec::with_capacity(vertices.len());
    for v in vertices {
        coords.push([get(v, "x")?, get(v, "y")?, get(v, "z")?]);
        colors.push([get(v, "red")?, get(v, "green")?, get(v, "blue")?]);
    }
    Ok((coords, colors))
}

/// Write `<path>` as PLY and the regions to `<path>.json` (extension replaced).
pub fn write_scene(scene: &PointCloudScene, path: &Path) -> Result<()> {
    write_ply(path, scene.coords(), scene.colors())?;
    let sidecar = SceneSidecar {
        scene_id: scene.scene_id().to_string(),
        regions: (0..scene.gt_masks().len())
            .map(|j| RegionRecord { affordance_id: scene.gt_affordance_ids()[j], point_indices: scene.region_indices(j) })
            .collect(),
    };
    std::fs::write(path.with_extension("json"), serde_json::to_string(&sidecar)? + "\n")?;
    Ok(())
}

pub fn read_scene(path: &Path) -> Result<PointCloudScene> {
    let (coords, colors) = read_ply(path)?;
    let side_path = path.with_extension("json");
    let text = std::fs::read_to_string(&side_path).map_err(|_| Error::MissingFile(side_path.clone()))?;
    let side: SceneSidecar = serde_json::from_str(&text).map_err(|e| malformed(&side_path, e.to_string()))?;
    let n = coords.len();
    let mut masks = Vec::new();
    let mut ids = Vec::new();
    for r in side.regions {
        let mut m = vec![false; n];
        for &i in &r.point_indices {
            *m.get_mut(i).ok_or_else(|| malformed(&side_path, format!("point index {i} out of range {n}")))? = true;
        }
        masks.push(m);
        ids.push(r.affordance_id);
    }
    PointCloudScene::new(side.scene_id, coords, colors, masks, ids)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipSidecar {
    pub clip_id: String,
    pub affordance_id: Option<usize>,
}

fn write_sidecar(path: &Path, clip_id: &str, affordance_id: Option<usize>) -> Result<()> {
    let side = ClipSidecar { clip_id: clip_id.to_string(), affordance_id };
    std::fs::write(path.with_extension("json"), serde_json::to_string(&side)? + "\n")?;
    Ok(())
}

pub fn read_clip_sidecar(path: &Path) -> Result<ClipSidecar> {
    let side_path = path.with_extension("json");
    let text = std::fs::read_to_string(&side_path).map_err(|_| Error::MissingFile(side_path.clone()))?;
    serde_json::from_str(&text).map_err(|e| malformed(&side_path, e.to_string()))
}

pub fn write_clip_block(path: &Path, clip: &ClipBlock, clip_id: &str, affordance_id: Option<usize>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CLIP_MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    for d in [clip.frames, clip.height, clip.width] {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    for &p in &clip.pixels {
        w.write_f32::<LittleEndian>(p)?;
    }
    w.flush()?;
    write_sidecar(path, clip_id, affordance_id)
}

pub fn read_clip_block(path: &Path) -> Result<ClipBlock> {
    let mut r = BufReader::new(open(path)?);
    read_header(&mut r, path, CLIP_MAGIC, FORMAT_VERSION)?;
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        *d = r.read_u32::<LittleEndian>().map_err(|_| malformed(path, "truncated header"))? as usize;
    }
    let pixels = read_f32s(&mut r, dims.iter().product::<usize>() * 3, path)?;
    expect_eof(&mut r, path)?;
    ClipBlock::new(dims[0], dims[1], dims[2], pixels)
}

/// Row-major `n_tokens x width` token grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub n_tokens: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

pub fn write_clip_features(path: &Path, grid: &FeatureGrid, clip_id: &str, affordance_id: Option<usize>) -> Result<()> {
    if grid.data.len() != grid.n_tokens * grid.width {
        return Err(Error::param("feature grid size does not match its shape"));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FEATURE_MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u32::<LittleEndian>(grid.width as u32)?;
    w.write_u32::<LittleEndian>(grid.n_tokens as u32)?;
    for &v in &grid.data {
        w.write_f32::<LittleEndian>(v)?;
    }
    w.flush()?;
    write_sidecar(path, clip_id, affordance_id)
}

pub fn read_clip_features(path: &Path) -> Result<FeatureGrid> {
    let mut r = BufReader::new(open(path)?);
    read_header(&mut r, path, FEATURE_MAGIC, FORMAT_VERSION)?;
    let width = r.read_u32::<LittleEndian>().map_err(|_| malformed(path, "truncated header"))? as usize;
    let n_tokens = r.read_u32::<LittleEndian>().map_err(|_| malformed(path, "truncated header"))? as usize;
    if width == 0 || n_tokens == 0 {
        return Err(malformed(path, "empty feature grid"));
    }
    let data = read_f32s(&mut r, width * n_tokens, path)?;
    if data.iter().any(|v| !v.is_finite()) {
        return Err(malformed(path, "non-finite feature values"));
    }
    expect_eof(&mut r, path)?;
    Ok(FeatureGrid { n_tokens, width, data })
}
