use super::{check_finite, dist2, Point3};
use crate::{Error, Result};

/// Greedy farthest point sampling starting from `seed_index`.
///
/// Each step picks the unselected point with the largest squared distance to
/// the selected set; ties go to the lowest index.
pub fn farthest_point_sample(coords: &[Point3], n_c: usize, seed_index: usize) -> Result<Vec<usize>> {
    let n = coords.len();
    if n_c == 0 || n_c > n {
        return Err(Error::param(format!("cannot sample {n_c} of {n} points")));
    }
    if seed_index >= n {
        return Err(Error::param(format!("seed index {seed_index} out of range for {n} points")));
    }
    check_finite(coords, "fps input")?;

    let mut selected = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut out = Vec::with_capacity(n_c);
    let mut current = seed_index;
    for _ in 0..n_c {
        out.push(current);
        selected[current] = true;
        let anchor = coords[current];
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n {
            if selected[i] {
                continue;
            }
            let d = dist2(&coords[i], &anchor);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if best.is_none_or(|(_, bd)| min_d[i] > bd) {
                best = Some((i, min_d[i]));
            }
        }
        match best {
            Some((i, _)) => current = i,
            None => break,
        }
    }
    Ok(out)
}

/// Up to `k` nearest neighbors within radius `r` of every centroid.
///
/// Rows are sorted by distance then index, with the centroid itself first
/// among zero-distance points, and padded with the centroid index.
pub fn ball_query_knn(coords: &[Point3], centroids: &[usize], k: usize, r: f64) -> Result<Vec<Vec<usize>>> {
    if centroids.is_empty() {
        return Err(Error::param("ball query needs at least one centroid"));
    }
    if k == 0 {
        return Err(Error::param("ball query needs k >= 1"));
    }
    if !(r > 0.0) {
        return Err(Error::param(format!("ball query radius must be positive, got {r}")));
    }
    let r2 = r * r;
    centroids
        .iter()
        .map(|&c| {
            if c >= coords.len() {
                return Err(Error::param(format!("centroid index {c} out of range")));
            }
            let mut hits: Vec<(f64, bool, usize)> = coords
                .iter()
                .enumerate()
                .filter_map(|(i, p)| {
                    let d = dist2(p, &coords[c]);
                    (d <= r2).then_some((d, i != c, i))
                })
                .collect();
            hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut row: Vec<usize> = hits.into_iter().take(k).map(|h| h.2).collect();
            row.resize(k, c);
            Ok(row)
        })
        .collect()
}

/// The `k` nearest points of `queries` among `points` (brute force), as
/// `(index, distance)` pairs sorted by distance then index.
pub fn knn_indices(points: &[Point3], queries: &[Point3], k: usize) -> Vec<Vec<(usize, f64)>> {
    let k = k.min(points.len());
    queries
        .iter()
        .map(|q| {
            let mut d: Vec<(usize, f64)> = points.iter().enumerate().map(|(i, p)| (i, dist2(p, q))).collect();
            if k < d.len() {
                d.select_nth_unstable_by(k, |a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
                d.truncate(k);
            }
            d.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            d.into_iter().map(|(i, d2)| (i, d2.sqrt())).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn line(xs: &[f32]) -> Vec<Point3> {
        xs.iter().map(|&x| [x, 0.0, 0.0]).collect()
    }

    #[test]
    fn fps_examples() {
        let pts = line(&[0.0, 10.0, 1.0]);
        assert_eq!(farthest_point_sample(&pts, 2, 0).unwrap(), vec![0, 1]);
        assert_eq!(farthest_point_sample(&pts, 1, 2).unwrap(), vec![2]);
        let mut all = farthest_point_sample(&pts, 3, 0).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2]);
        assert!(farthest_point_sample(&pts, 4, 0).is_err());
        assert!(farthest_point_sample(&pts, 1, 3).is_err());
    }

    #[test]
    fn fps_ties_go_to_lowest_index() {
        let pts = line(&[0.0, -1.0, 1.0]);
        assert_eq!(farthest_point_sample(&pts, 2, 0).unwrap(), vec![0, 1]);
    }

    #[test]
    fn ball_query_examples() {
        let pts = line(&[0.0, 1.0, 5.0]);
        assert_eq!(ball_query_knn(&pts, &[0], 2, 2.0).unwrap(), vec![vec![0, 1]]);
        assert_eq!(ball_query_knn(&pts, &[2], 3, 2.0).unwrap(), vec![vec![2, 2, 2]]);
        assert_eq!(ball_query_knn(&pts, &[0, 1, 2], 1, 10.0).unwrap(), vec![vec![0], vec![1], vec![2]]);
        assert!(ball_query_knn(&pts, &[], 1, 1.0).is_err());
        assert!(ball_query_knn(&pts, &[0], 1, 0.0).is_err());
    }

    #[test]
    fn ball_query_matches_brute_force_sort() {
        let pts: Vec<Point3> = (0..40).map(|i| [((i * 37) % 11) as f32 * 0.3, ((i * 13) % 7) as f32 * 0.2, 0.0]).collect();
        let rows = ball_query_knn(&pts, &[3, 17], 6, 0.9).unwrap();
        for (row, &c) in rows.iter().zip(&[3usize, 17]) {
            let mut cand: Vec<usize> = (0..pts.len()).filter(|&i| dist2(&pts[i], &pts[c]) <= 0.81).collect();
            cand.sort_by(|&a, &b| {
                dist2(&pts[a], &pts[c])
                    .total_cmp(&dist2(&pts[b], &pts[c]))
                    .then((a != c).cmp(&(b != c)))
                    .then(a.cmp(&b))
            });
            cand.truncate(6);
            cand.resize(6, c);
            assert_eq!(row, &cand);
        }
    }

    proptest! {
        // Every chosen index attains the max-min distance among the unchosen ones.
        #[test]
        fn fps_is_greedy_optimal(raw in prop::collection::vec((-5.0f32..5.0, -5.0f32..5.0, -5.0f32..5.0), 2..200),
                                 frac in 0.0f64..1.0, seed_sel in 0usize..1000) {
            let pts: Vec<Point3> = raw.iter().map(|&(x, y, z)| [x, y, z]).collect();
            let n_c = 1 + ((pts.len() - 1) as f64 * frac) as usize;
            let seed = seed_sel % pts.len();
            let sel = farthest_point_sample(&pts, n_c, seed).unwrap();
            prop_assert_eq!(sel[0], seed);
            for t in 1..sel.len() {
                let chosen = &sel[..t];
                let score = |i: usize| chosen.iter().map(|&c| dist2(&pts[i], &pts[c])).fold(f64::INFINITY, f64::min);
                let best = (0..pts.len()).filter(|i| !chosen.contains(i)).map(score).fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(score(sel[t]), best);
                let first = (0..pts.len()).find(|i| !chosen.contains(i) && score(*i) == best).unwrap();
                prop_assert_eq!(sel[t], first);
            }
        }
    }
}
