//! Hash-map sparse voxel levels with submanifold and strided convolutions.
//!
//! Convolutions are realized as gathers of neighbor rows (missing neighbors
//! read a zero row appended after the last site) followed by one matmul.

use std::collections::HashMap;

use candle_core::{Device, Tensor};

use crate::pointcloud::{Point3, VoxelGrid};
use crate::{Error, Result};

/// Offsets of a 3x3x3 submanifold kernel, `dx` slowest.
pub const SSC_OFFSETS: [[i32; 3]; 27] = {
    let mut out = [[0; 3]; 27];
    let mut i = 0;
    while i < 27 {
        out[i] = [(i / 9) as i32 - 1, ((i / 3) % 3) as i32 - 1, (i % 3) as i32 - 1];
        i += 1;
    }
    out
};

/// One resolution level of the sparse pyramid. Level 0 is the input grid;
/// level `l` coarsens level `l - 1` by a factor of two.
#[derive(Debug, Clone)]
pub struct SparseLevel {
    pub keys: Vec<[i32; 3]>,
    /// Mean coordinate of the points inside each site.
    pub centers: Vec<Point3>,
    /// Site of every input point at this level.
    pub point_to_site: Vec<usize>,
    /// `n x 27` neighbor sites; `n` stands for an absent neighbor.
    pub ssc_neighbors: Vec<u32>,
    /// `n x 8` child sites in the previous level; absent children are `n_prev`.
    pub children: Vec<u32>,
    /// For every site of the previous level: `parent * 8 + child_slot`.
    pub parent_slots: Vec<u32>,
}

impl SparseLevel {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

fn child_slot(child: &[i32; 3], parent: &[i32; 3]) -> usize {
    let d = [child[0] - 2 * parent[0], child[1] - 2 * parent[1], child[2] - 2 * parent[2]];
    (d[0] * 4 + d[1] * 2 + d[2]) as usize
}

pub fn build_levels(grid: &VoxelGrid, coords: &[Point3], n_levels: usize) -> Result<Vec<SparseLevel>> {
    if n_levels == 0 {
        return Err(Error::param("sparse pyramid needs at least one level"));
    }
    let mut levels: Vec<SparseLevel> = Vec::with_capacity(n_levels);
    for l in 0..n_levels {
        let (keys, point_to_site, children, parent_slots) = if l == 0 {
            (grid.sites.clone(), grid.point_to_site.clone(), Vec::new(), Vec::new())
        } else {
            let prev = &levels[l - 1];
            let mut index = HashMap::new();
            let mut keys = Vec::new();
            let mut prev_to_site = Vec::with_capacity(prev.len());
            for k in &prev.keys {
                let parent = [k[0].div_euclid(2), k[1].div_euclid(2), k[2].div_euclid(2)];
                let next = keys.len();
                let s = *index.entry(parent).or_insert_with(|| {
                    keys.push(parent);
                    next
                });
                prev_to_site.push(s);
            }
            let n_prev = prev.len() as u32;
            let mut children = vec![n_prev; keys.len() * 8];
            let mut parent_slots = Vec::with_capacity(prev.len());
            for (c, k) in prev.keys.iter().enumerate() {
                let p = prev_to_site[c];
                let slot = child_slot(k, &keys[p]);
                children[p * 8 + slot] = c as u32;
                parent_slots.push((p * 8 + slot) as u32);
            }
            let point_to_site = prev.point_to_site.iter().map(|&s| prev_to_site[s]).collect();
            (keys, point_to_site, children, parent_slots)
        };
        if keys.is_empty() {
            return Err(Error::domain(format!("sparse level {} has no active sites", l + 1)));
        }
        let index: HashMap<[i32; 3], usize> = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        let n = keys.len() as u32;
        let mut ssc_neighbors = Vec::with_capacity(keys.len() * 27);
        for k in &keys {
            for o in &SSC_OFFSETS {
                let nb = [k[0] + o[0], k[1] + o[1], k[2] + o[2]];
                ssc_neighbors.push(index.get(&nb).map_or(n, |&i| i as u32));
            }
        }
        let mut sums = vec![[0f64; 3]; keys.len()];
        let mut counts = vec![0usize; keys.len()];
        for (p, &s) in point_to_site.iter().enumerate() {
            (0..3).for_each(|d| sums[s][d] += coords[p][d] as f64);
            counts[s] += 1;
        }
        let centers = sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| [(s[0] / c as f64) as f32, (s[1] / c as f64) as f32, (s[2] / c as f64) as f32])
            .collect();
        levels.push(SparseLevel { keys, centers, point_to_site, ssc_neighbors, children, parent_slots });
    }
    Ok(levels)
}

/// Gather `groups` rows per output site from `x` (with an implicit zero row
/// at index `x.rows`) and lay them side by side.
pub(crate) fn gather_padded(x: &Tensor, index: &Tensor, groups: usize) -> Result<Tensor> {
    let (n, c) = x.dims2()?;
    let padded = Tensor::cat(&[x, &Tensor::zeros((1, c), x.dtype(), x.device())?], 0)?;
    let rows = index.dims1()? / groups;
    debug_assert!(index.dims1()? % groups == 0 && n > 0);
    Ok(padded.index_select(index, 0)?.reshape((rows, groups * c))?)
}

/// Index tensors of one level, ready for gathers.
#[derive(Debug, Clone)]
pub struct LevelIndex {
    pub n_sites: usize,
    pub ssc: Tensor,
    pub children: Option<Tensor>,
    pub parent_slots: Option<Tensor>,
}

impl LevelIndex {
    pub fn new(level: &SparseLevel, device: &Device) -> Result<Self> {
        let opt = |v: &[u32]| -> Result<Option<Tensor>> {
            if v.is_empty() {
                Ok(None)
            } else {
                Ok(Some(Tensor::from_slice(v, v.len(), device)?))
            }
        };
        Ok(Self {
            n_sites: level.len(),
            ssc: Tensor::from_slice(&level.ssc_neighbors, level.ssc_neighbors.len(), device)?,
            children: opt(&level.children)?,
            parent_slots: opt(&level.parent_slots)?,
        })
    }
}
