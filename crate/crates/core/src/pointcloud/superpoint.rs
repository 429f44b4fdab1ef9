use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, HashMap, VecDeque};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::voxel::voxel_key;
use super::{dist2, knn_indices, Point3, PointCloudScene};
use crate::{Error, Result};

/// Total, surjective map from points to `count` superpoints.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperpointPartition {
    assignment: Vec<usize>,
    count: usize,
}

impl SuperpointPartition {
    pub fn new(assignment: Vec<usize>) -> Result<Self> {
        if assignment.is_empty() {
            return Err(Error::param("partition of zero points"));
        }
        let count = assignment.iter().max().map_or(0, |m| m + 1);
        let mut seen = vec![false; count];
        assignment.iter().for_each(|&a| seen[a] = true);
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::param(format!("superpoint {missing} has no points")));
        }
        Ok(Self { assignment, count })
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn n_points(&self) -> usize {
        self.assignment.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.count];
        self.assignment.iter().for_each(|&a| s[a] += 1);
        s
    }

    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.count];
        for (p, &a) in self.assignment.iter().enumerate() {
            m[a].push(p);
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuperpointParams {
    /// Neighbors per point in the proximity graph.
    pub knn: usize,
    /// Meters of path cost per unit of RGB distance.
    pub color_weight: f64,
    /// Graph edges whose RGB distance exceeds this are cut.
    pub color_cut: f64,
}

impl Default for SuperpointParams {
    fn default() -> Self {
        Self { knn: 10, color_weight: 1.0, color_cut: 0.3 }
    }
}

pub fn build_superpoints(scene: &PointCloudScene, target_m: usize) -> Result<SuperpointPartition> {
    build_superpoints_with(scene, target_m, &SuperpointParams::default())
}

/// Deterministic oversegmentation into at most `target_m` superpoints.
///
/// Seeds are one representative per occupied cell of the finest voxel grid
/// with at most `target_m` cells. Seeds grow over a kNN graph (edges cut at
/// color discontinuities) by cheapest path; components without a seed get
/// their own label, and the smallest superpoints are merged into spatial
/// neighbors until the target is met.
pub fn build_superpoints_with(
    scene: &PointCloudScene,
    target_m: usize,
    params: &SuperpointParams,
) -> Result<SuperpointPartition> {
    if target_m == 0 {
        return Err(Error::param("target_m must be >= 1"));
    }
    let n = scene.len();
    if target_m >= n {
        return SuperpointPartition::new((0..n).collect());
    }
    if target_m == 1 {
        return SuperpointPartition::new(vec![0; n]);
    }
    let coords = scene.coords();
    let colors = scene.colors();

    let knn = knn_indices(coords, coords, params.knn.max(1) + 1);
    let mut spatial_adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    let mut graph: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (i, row) in knn.iter().enumerate() {
        for &(j, d) in row {
            if i == j || spatial_adj[i].contains(&j) {
                continue;
            }
            spatial_adj[i].insert(j);
            spatial_adj[j].insert(i);
            let dc = dist2(&colors[i], &colors[j]).sqrt();
            if dc <= params.color_cut {
                let w = d + params.color_weight * dc;
                graph[i].push((j, w));
                graph[j].push((i, w));
            }
        }
    }
    for row in &mut graph {
        row.sort_by(|a, b| a.0.cmp(&b.0));
        row.dedup_by_key(|e| e.0);
    }

    let seeds = voxel_seeds(coords, target_m);
    let mut label = grow_regions(&graph, &seeds, n);
    let mut next = seeds.len();
    for p in 0..n {
        if label[p] != usize::MAX {
            continue;
        }
        let mut queue = VecDeque::from([p]);
        label[p] = next;
        while let Some(u) = queue.pop_front() {
            for &(v, _) in &graph[u] {
                if label[v] == usize::MAX {
                    label[v] = next;
                    queue.push_back(v);
                }
            }
        }
        next += 1;
    }

    merge_until(&mut label, next, target_m, coords, colors, &spatial_adj, params.color_weight);

    // Compact labels in order of first appearance.
    let mut remap = HashMap::new();
    let assignment = label
        .iter()
        .map(|l| {
            let k = remap.len();
            *remap.entry(*l).or_insert(k)
        })
        .collect();
    SuperpointPartition::new(assignment)
}

fn voxel_seeds(coords: &[Point3], target_m: usize) -> Vec<usize> {
    let count_at = |s: f64| -> usize {
        let mut keys: Vec<[i32; 3]> = coords.iter().map(|p| voxel_key(p, s)).collect();
        keys.sort_unstable();
        keys.dedup();
        keys.len()
    };
    let (mut lo, mut hi) = extent_bounds(coords);
    if count_at(hi) > target_m {
        hi *= 4.0;
    }
    for _ in 0..48 {
        let mid = (lo * hi).sqrt();
        if count_at(mid) <= target_m {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let size = hi;
    let mut cells: HashMap<[i32; 3], Vec<usize>> = HashMap::new();
    let mut order = Vec::new();
    for (i, p) in coords.iter().enumerate() {
        let key = voxel_key(p, size);
        cells
            .entry(key)
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(i);
    }
    order
        .iter()
        .map(|key| {
            let pts = &cells[key];
            let mut c = [0f64; 3];
            for &i in pts {
                (0..3).for_each(|d| c[d] += coords[i][d] as f64);
            }
            let c = c.map(|v| (v / pts.len() as f64) as f32);
            *pts.iter()
                .min_by(|&&a, &&b| dist2(&coords[a], &c).total_cmp(&dist2(&coords[b], &c)).then(a.cmp(&b)))
                .unwrap()
        })
        .collect()
}

fn extent_bounds(coords: &[Point3]) -> (f64, f64) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in coords {
        for d in 0..3 {
            lo[d] = lo[d].min(p[d] as f64);
            hi[d] = hi[d].max(p[d] as f64);
        }
    }
    let extent = (0..3).map(|d| hi[d] - lo[d]).fold(0.0, f64::max).max(1e-6);
    // The upper bound must place every point in one cell even when the cloud
    // straddles a cell boundary at the origin.
    let reach = (0..3).map(|d| lo[d].abs().max(hi[d].abs())).fold(0.0, f64::max);
    (extent * 1e-6, 2.0 * (extent + reach) + 1.0)
}

#[derive(PartialEq)]
struct Frontier {
    cost: f64,
    seed: usize,
    node: usize,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then(other.seed.cmp(&self.seed))
            .then(other.node.cmp(&self.node))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn grow_regions(graph: &[Vec<(usize, f64)>], seeds: &[usize], n: usize) -> Vec<usize> {
    let mut label = vec![usize::MAX; n];
    let mut best = vec![f64::INFINITY; n];
    let mut heap = BinaryHeap::new();
    for (s, &p) in seeds.iter().enumerate() {
        best[p] = 0.0;
        heap.push(Frontier { cost: 0.0, seed: s, node: p });
    }
    while let Some(Frontier { cost, seed, node }) = heap.pop() {
        if label[node] != usize::MAX {
            continue;
        }
        label[node] = seed;
        for &(v, w) in &graph[node] {
            let c = cost + w;
            if label[v] == usize::MAX && c < best[v] {
                best[v] = c;
                heap.push(Frontier { cost: c, seed, node: v });
            }
        }
    }
    label
}

#[allow(clippy::too_many_arguments)]
fn merge_until(
    label: &mut [usize],
    n_labels: usize,
    target_m: usize,
    coords: &[Point3],
    colors: &[Point3],
    spatial_adj: &[BTreeSet<usize>],
    color_weight: f64,
) {
    let mut size = vec![0usize; n_labels];
    let mut sum_xyz = vec![[0f64; 3]; n_labels];
    let mut sum_rgb = vec![[0f64; 3]; n_labels];
    for (p, &l) in label.iter().enumerate() {
        size[l] += 1;
        for d in 0..3 {
            sum_xyz[l][d] += coords[p][d] as f64;
            sum_rgb[l][d] += colors[p][d] as f64;
        }
    }
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n_labels];
    for (p, nbrs) in spatial_adj.iter().enumerate() {
        for &q in nbrs {
            if label[p] != label[q] {
                adj[label[p]].insert(label[q]);
            }
        }
    }
    let mut parent: Vec<usize> = (0..n_labels).collect();
    let mut alive = n_labels;
    let dissimilarity = |a: usize, b: usize, size: &[usize], sx: &[[f64; 3]], sc: &[[f64; 3]]| -> f64 {
        let mut dx = 0.0;
        let mut dc = 0.0;
        for d in 0..3 {
            dx += (sx[a][d] / size[a] as f64 - sx[b][d] / size[b] as f64).powi(2);
            dc += (sc[a][d] / size[a] as f64 - sc[b][d] / size[b] as f64).powi(2);
        }
        dx.sqrt() + color_weight * dc.sqrt()
    };
    while alive > target_m {
        let live = (0..n_labels).filter(|&l| size[l] > 0);
        let smallest_with = |pred: &dyn Fn(usize) -> bool| {
            live.clone().filter(|&l| pred(l)).min_by_key(|&l| (size[l], l))
        };
        let (victim, into) = match smallest_with(&|l| !adj[l].is_empty()) {
            Some(v) => {
                let into = adj[v]
                    .iter()
                    .copied()
                    .min_by(|&a, &b| {
                        dissimilarity(v, a, &size, &sum_xyz, &sum_rgb)
                            .total_cmp(&dissimilarity(v, b, &size, &sum_xyz, &sum_rgb))
                            .then(a.cmp(&b))
                    })
                    .unwrap();
                (v, into)
            }
            None => {
                let v = smallest_with(&|_| true).unwrap();
                let into = live
                    .clone()
                    .filter(|&l| l != v)
                    .min_by(|&a, &b| {
                        dissimilarity(v, a, &size, &sum_xyz, &sum_rgb)
                            .total_cmp(&dissimilarity(v, b, &size, &sum_xyz, &sum_rgb))
                            .then(a.cmp(&b))
                    })
                    .unwrap();
                (v, into)
            }
        };
        size[into] += size[victim];
        size[victim] = 0;
        for d in 0..3 {
            sum_xyz[into][d] += sum_xyz[victim][d];
            sum_rgb[into][d] += sum_rgb[victim][d];
        }
        let moved = std::mem::take(&mut adj[victim]);
        for l in moved {
            adj[l].remove(&victim);
            if l != into {
                adj[l].insert(into);
                adj[into].insert(l);
            }
        }
        adj[into].remove(&victim);
        parent[victim] = into;
        alive -= 1;
    }
    let find = |mut l: usize| {
        while parent[l] != l {
            l = parent[l];
        }
        l
    };
    for l in label.iter_mut() {
        *l = find(*l);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolReducer {
    #[default]
    Mean,
    Max,
}

/// Aggregate point rows into one row per superpoint.
pub fn superpoint_pool(
    point_features: ArrayView2<f64>,
    sp: &SuperpointPartition,
    reducer: PoolReducer,
) -> Result<Array2<f64>> {
    if point_features.nrows() != sp.n_points() {
        return Err(Error::param(format!(
            "{} feature rows for a partition of {} points",
            point_features.nrows(),
            sp.n_points()
        )));
    }
    let c = point_features.ncols();
    let init = match reducer {
        PoolReducer::Mean => 0.0,
        PoolReducer::Max => f64::NEG_INFINITY,
    };
    let mut out = Array2::from_elem((sp.count(), c), init);
    for (p, &s) in sp.assignment().iter().enumerate() {
        for k in 0..c {
            let v = point_features[[p, k]];
            match reducer {
                PoolReducer::Mean => out[[s, k]] += v,
                PoolReducer::Max => out[[s, k]] = out[[s, k]].max(v),
            }
        }
    }
    if reducer == PoolReducer::Mean {
        for (s, n) in sp.sizes().into_iter().enumerate() {
            out.row_mut(s).mapv_inplace(|v| v / n as f64);
        }
    }
    Ok(out)
}

/// Broadcast a per-superpoint mask to points.
pub fn expand_mask(sp_mask: &[f64], sp: &SuperpointPartition) -> Result<Vec<f64>> {
    if sp_mask.len() != sp.count() {
        return Err(Error::param(format!(
            "mask of length {} for {} superpoints",
            sp_mask.len(),
            sp.count()
        )));
    }
    Ok(sp.assignment().iter().map(|&s| sp_mask[s]).collect())
}

/// Majority vote of a point mask per superpoint (strictly more than half active).
pub fn pool_gt_mask(mask: &[bool], sp: &SuperpointPartition) -> Result<Vec<bool>> {
    if mask.len() != sp.n_points() {
        return Err(Error::param("gt mask length does not match partition"));
    }
    let mut on = vec![0usize; sp.count()];
    for (p, &s) in sp.assignment().iter().enumerate() {
        on[s] += mask[p] as usize;
    }
    Ok(on.iter().zip(sp.sizes()).map(|(&a, n)| 2 * a > n).collect())
}
