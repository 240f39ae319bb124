//! Density clustering used to clean predicted masks.

use super::cloud::LabeledPointCloud;
use super::mask::Mask;
use crate::warehouse::Vec3;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DbscanParams {
    pub eps: f64,
    pub min_pts: usize,
}

impl Default for DbscanParams {
    fn default() -> Self {
        DbscanParams {
            eps: 0.15,
            min_pts: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LargestCluster {
    /// Input indices of the retained cluster, ascending.
    pub indices: Vec<usize>,
    pub cluster_count: usize,
    /// No point had enough neighbors to seed a cluster.
    pub all_noise: bool,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Label {
    Unvisited,
    Noise,
    Cluster(usize),
}

struct Grid<'a> {
    points: &'a [Vec3],
    eps: f64,
    eps2: f64,
    cells: HashMap<(i64, i64, i64), Vec<usize>>,
}

impl<'a> Grid<'a> {
    fn new(points: &'a [Vec3], eps: f64) -> Self {
        let mut cells: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, eps)).or_default().push(i);
        }
        Grid {
            points,
            eps,
            eps2: eps * eps,
            cells,
        }
    }

    fn key(p: &Vec3, eps: f64) -> (i64, i64, i64) {
        (
            (p.x / eps).floor() as i64,
            (p.y / eps).floor() as i64,
            (p.z / eps).floor() as i64,
        )
    }

    fn neighbors(&self, i: usize, out: &mut Vec<usize>) {
        out.clear();
        let p = &self.points[i];
        let (kx, ky, kz) = Self::key(p, self.eps);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(bucket) = self.cells.get(&(kx + dx, ky + dy, kz + dz)) else {
                        continue;
                    };
                    for &j in bucket {
                        if dist2(p, &self.points[j]) <= self.eps2 {
                            out.push(j);
                        }
                    }
                }
            }
        }
    }
}

fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

/// Runs DBSCAN (a point is core when at least `min_pts` points, itself
/// included, lie within `eps`) and keeps the cluster with the most points.
/// Equal-size clusters resolve to the one holding the lowest input index.
/// Border points join the first cluster, in seed order, that reaches them.
pub fn dbscan_largest_cluster(points: &[Vec3], params: &DbscanParams) -> LargestCluster {
    assert!(
        params.eps > 0.0 && params.min_pts >= 1,
        "invalid DBSCAN parameters"
    );
    let grid = Grid::new(points, params.eps);
    let mut labels = vec![Label::Unvisited; points.len()];
    let mut sizes: Vec<usize> = Vec::new();
    let mut lowest: Vec<usize> = Vec::new();
    let mut nbrs = Vec::new();
    let mut queue = Vec::new();
    for p in 0..points.len() {
        if labels[p] != Label::Unvisited {
            continue;
        }
        grid.neighbors(p, &mut nbrs);
        if nbrs.len() < params.min_pts {
            labels[p] = Label::Noise;
            continue;
        }
        let c = sizes.len();
        sizes.push(0);
        lowest.push(p);
        labels[p] = Label::Cluster(c);
        sizes[c] += 1;
        queue.clear();
        queue.extend_from_slice(&nbrs);
        while let Some(q) = queue.pop() {
            match labels[q] {
                Label::Cluster(_) => continue,
                Label::Noise => {
                    labels[q] = Label::Cluster(c);
                }
                Label::Unvisited => {
                    labels[q] = Label::Cluster(c);
                    grid.neighbors(q, &mut nbrs);
                    if nbrs.len() >= params.min_pts {
                        queue.extend_from_slice(&nbrs);
                    }
                }
            }
            sizes[c] += 1;
            lowest[c] = lowest[c].min(q);
        }
    }
    let best =
        (0..sizes.len()).min_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(lowest[a].cmp(&lowest[b])));
    let indices = match best {
        Some(c) => (0..points.len())
            .filter(|&i| labels[i] == Label::Cluster(c))
            .collect(),
        None => Vec::new(),
    };
    LargestCluster {
        indices,
        cluster_count: sizes.len(),
        all_noise: sizes.is_empty(),
    }
}

/// Restricts `mask` to its largest density cluster. Returns the filtered
/// mask and whether every masked point was noise.
pub fn filter_mask(cloud: &LabeledPointCloud, mask: &Mask, params: &DbscanParams) -> (Mask, bool) {
    let idx: Vec<usize> = mask.ones().collect();
    let pts: Vec<Vec3> = idx.iter().map(|&i| cloud.point(i)).collect();
    let out = dbscan_largest_cluster(&pts, params);
    (
        Mask::from_indices(mask.len(), out.indices.iter().map(|&k| idx[k])),
        out.all_noise,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn blob(center: Vec3, n: usize, spread: f64, seed: u64) -> Vec<Vec3> {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                center
                    + Vec3::new(
                        r.random_range(-spread..spread),
                        r.random_range(-spread..spread),
                        r.random_range(-spread..spread),
                    )
            })
            .collect()
    }

    #[test]
    fn dense_blob_is_kept_whole() {
        let pts = blob(Vec3::zeros(), 100, 0.05, 1);
        let out = dbscan_largest_cluster(&pts, &DbscanParams::default());
        assert_eq!(out.indices, (0..100).collect::<Vec<_>>());
        assert_eq!(out.cluster_count, 1);
    }

    #[test]
    fn larger_of_two_blobs_wins() {
        let mut pts = blob(Vec3::new(5.0, 0.0, 0.0), 10, 0.03, 2);
        pts.extend(blob(Vec3::zeros(), 100, 0.05, 3));
        let out = dbscan_largest_cluster(&pts, &DbscanParams::default());
        assert_eq!(out.indices, (10..110).collect::<Vec<_>>());
        assert_eq!(out.cluster_count, 2);
    }

    #[test]
    fn isolated_points_are_all_noise() {
        let pts = vec![
            Vec3::zeros(),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
        ];
        let out = dbscan_largest_cluster(&pts, &DbscanParams::default());
        assert!(out.all_noise);
        assert!(out.indices.is_empty());
    }

    #[test]
    fn equal_clusters_tie_to_lowest_index() {
        let mut pts = blob(Vec3::new(3.0, 0.0, 0.0), 20, 0.03, 4);
        pts.extend(blob(Vec3::zeros(), 20, 0.03, 5));
        let out = dbscan_largest_cluster(&pts, &DbscanParams::default());
        assert_eq!(out.indices, (0..20).collect::<Vec<_>>());
    }
}
