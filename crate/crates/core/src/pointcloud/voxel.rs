use std::collections::HashMap;

use ndarray::Array2;

use super::PointCloudScene;
use crate::{Error, Result};

/// Sparse set of occupied voxels with per-site averaged features.
#[derive(Debug, Clone)]
pub struct VoxelGrid {
    pub voxel_size: f64,
    /// Integer coordinates of active sites, in order of first occupancy.
    pub sites: Vec<[i32; 3]>,
    /// One row per site: mean color, followed by mean coordinates when requested.
    pub site_features: Array2<f64>,
    /// Mean point coordinate of every site.
    pub site_centers: Vec<[f32; 3]>,
    pub point_to_site: Vec<usize>,
    index: HashMap<[i32; 3], usize>,
}

impl VoxelGrid {
    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn site_of(&self, key: &[i32; 3]) -> Option<usize> {
        self.index.get(key).copied()
    }

    /// Broadcast site features back to points.
    pub fn devoxelize(&self) -> Array2<f64> {
        let cols = self.site_features.ncols();
        let mut out = Array2::zeros((self.point_to_site.len(), cols));
        for (p, &s) in self.point_to_site.iter().enumerate() {
            out.row_mut(p).assign(&self.site_features.row(s));
        }
        out
    }
}

pub(crate) fn voxel_key(p: &[f32; 3], voxel_size: f64) -> [i32; 3] {
    [
        (p[0] as f64 / voxel_size).floor() as i32,
        (p[1] as f64 / voxel_size).floor() as i32,
        (p[2] as f64 / voxel_size).floor() as i32,
    ]
}

pub fn voxelize(scene: &PointCloudScene, voxel_size: f64, with_coords: bool) -> Result<VoxelGrid> {
    if !(voxel_size > 0.0) || !voxel_size.is_finite() {
        return Err(Error::param(format!("voxel_size must be positive, got {voxel_size}")));
    }
    if scene.is_empty() {
        return Err(Error::domain("cannot voxelize an empty scene"));
    }
    let mut index = HashMap::new();
    let mut sites = Vec::new();
    let mut point_to_site = Vec::with_capacity(scene.len());
    for p in scene.coords() {
        let key = voxel_key(p, voxel_size);
        let next = sites.len();
        let s = *index.entry(key).or_insert_with(|| {
            sites.push(key);
            next
        });
        point_to_site.push(s);
    }

    let width = if with_coords { 6 } else { 3 };
    let mut sums = Array2::<f64>::zeros((sites.len(), width));
    let mut centers = vec![[0f64; 3]; sites.len()];
    let mut counts = vec![0usize; sites.len()];
    for (p, &s) in point_to_site.iter().enumerate() {
        let color = scene.colors()[p];
        let xyz = scene.coords()[p];
        for c in 0..3 {
            sums[[s, c]] += color[c] as f64;
            centers[s][c] += xyz[c] as f64;
            if with_coords {
                sums[[s, 3 + c]] += xyz[c] as f64;
            }
        }
        counts[s] += 1;
    }
    for (s, &n) in counts.iter().enumerate() {
        let inv = 1.0 / n as f64;
        sums.row_mut(s).mapv_inplace(|v| v * inv);
        centers[s].iter_mut().for_each(|v| *v *= inv);
    }
    Ok(VoxelGrid {
        voxel_size,
        sites,
        site_features: sums,
        site_centers: centers.iter().map(|c| [c[0] as f32, c[1] as f32, c[2] as f32]).collect(),
        point_to_site,
        index,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn scene(coords: Vec<[f32; 3]>) -> PointCloudScene {
        let colors = (0..coords.len()).map(|i| [(i % 7) as f32 / 7.0, 0.5, 0.25]).collect();
        PointCloudScene::unlabeled("t", coords, colors).unwrap()
    }

    #[test]
    fn two_points_one_or_two_sites() {
        let s = scene(vec![[0.1, 0.1, 0.1], [0.9, 0.9, 0.9]]);
        assert_eq!(voxelize(&s, 1.0, false).unwrap().len(), 1);
        let g = voxelize(&s, 0.5, false).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.sites, vec![[0, 0, 0], [1, 1, 1]]);
    }

    #[test]
    fn rejects_bad_voxel_size() {
        let s = scene(vec![[0.0; 3]]);
        assert!(matches!(voxelize(&s, 0.0, false), Err(Error::Parameter(_))));
        assert!(matches!(voxelize(&s, -1.0, false), Err(Error::Parameter(_))));
    }

    #[test]
    fn random_cloud_maps_to_floored_sites() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let coords: Vec<[f32; 3]> = (0..1000)
            .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(0.0..3.0)])
            .collect();
        let s = scene(coords.clone());
        let g = voxelize(&s, 0.3, true).unwrap();
        for (p, xyz) in coords.iter().enumerate() {
            let expect = [
                (xyz[0] as f64 / 0.3).floor() as i32,
                (xyz[1] as f64 / 0.3).floor() as i32,
                (xyz[2] as f64 / 0.3).floor() as i32,
            ];
            assert_eq!(g.sites[g.point_to_site[p]], expect);
        }
    }

    #[test]
    fn devoxelize_gives_colocated_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let coords: Vec<[f32; 3]> = (0..300).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let s = scene(coords);
        let g = voxelize(&s, 0.25, false).unwrap();
        let per_point = g.devoxelize();
        for p in 0..s.len() {
            let mates: Vec<usize> = (0..s.len()).filter(|&q| g.point_to_site[q] == g.point_to_site[p]).collect();
            for c in 0..3 {
                let mean = mates.iter().map(|&q| s.colors()[q][c] as f64).sum::<f64>() / mates.len() as f64;
                assert!((per_point[[p, c]] - mean).abs() < 1e-12);
            }
        }
    }
}
