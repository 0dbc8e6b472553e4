//! Geometric preprocessing: normalization, farthest point sampling, k-NN
//! patch grouping, center ordering and augmentation.
//!
//! All searches are brute force; clouds stay in the low thousands of points.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numeric::kernels::sq_dist;
use crate::{Error, Result, Tensor};

pub type Point = [f64; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub label: Option<usize>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>, label: Option<usize>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::shape("point cloud has no points"));
        }
        if let Some(i) = points.iter().flatten().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
        Ok(Self { points, label })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Point {
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / self.points.len() as f64)
    }
}

/// Centers of the sampled patches and their localized neighborhoods.
///
/// `patches[i]` holds `s` points expressed relative to `centers[i]`.
/// `order` is the sequence in which patches are fed to the sequence model.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub centers: Vec<Point>,
    pub center_indices: Vec<usize>,
    pub neighbors: Vec<Vec<usize>>,
    pub patches: Vec<Vec<Point>>,
    pub order: Vec<usize>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn patch_size(&self) -> usize {
        self.patches.first().map_or(0, Vec::len)
    }

    /// Copy with patches permuted into `order`; the result's own order is
    /// the identity.
    pub fn ordered(&self) -> PatchSet {
        PatchSet {
            centers: self.order.iter().map(|&i| self.centers[i]).collect(),
            center_indices: self.order.iter().map(|&i| self.center_indices[i]).collect(),
            neighbors: self.order.iter().map(|&i| self.neighbors[i].clone()).collect(),
            patches: self.order.iter().map(|&i| self.patches[i].clone()).collect(),
            order: (0..self.len()).collect(),
        }
    }

    pub fn with_order(mut self, strategy: OrderStrategy) -> PatchSet {
        self.order = serialize_order(&self.centers, strategy);
        self
    }

    /// `n × 3` tensor of centers.
    pub fn centers_tensor(&self) -> Tensor {
        Tensor::from_rows(&self.centers)
    }

    /// `s × 3` tensor of one localized patch.
    pub fn patch_tensor(&self, i: usize) -> Tensor {
        Tensor::from_rows(&self.patches[i])
    }
}

/// Greedy farthest point sampling with a seeded random first pick.
pub fn farthest_point_sample(cloud: &PointCloud, n: usize, seed: u64) -> Result<Vec<usize>> {
    check_count(cloud, n, "farthest point sample")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.random_range(0..cloud.len());
    farthest_point_sample_from(cloud, n, first)
}

/// Greedy farthest point sampling starting from `first`. Each further pick
/// maximizes the squared distance to the nearest already-chosen point, with
/// ties going to the lower index.
pub fn farthest_point_sample_from(cloud: &PointCloud, n: usize, first: usize) -> Result<Vec<usize>> {
    check_count(cloud, n, "farthest point sample")?;
    if first >= cloud.len() {
        return Err(Error::range(format!("first index {first} outside cloud")));
    }
    let pts = &cloud.points;
    let mut chosen = Vec::with_capacity(n);
    let mut nearest = vec![f64::INFINITY; pts.len()];
    let mut current = first;
    for _ in 0..n {
        chosen.push(current);
        // Chosen points can never win again, even among duplicates.
        nearest[current] = f64::NEG_INFINITY;
        let anchor = pts[current];
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, p) in pts.iter().enumerate() {
            let d = sq_dist(p, &anchor);
            if d < nearest[i] {
                nearest[i] = d;
            }
            if nearest[i] > best.0 {
                best = (nearest[i], i);
            }
        }
        current = best.1;
    }
    Ok(chosen)
}

/// Groups the `s` nearest cloud points (ties to the lower index) around each
/// center and translates them so the center sits at the origin.
pub fn knn_group(cloud: &PointCloud, center_indices: &[usize], s: usize) -> Result<PatchSet> {
    check_count(cloud, s, "k-NN group size")?;
    if let Some(&bad) = center_indices.iter().find(|&&c| c >= cloud.len()) {
        return Err(Error::range(format!("center index {bad} outside cloud")));
    }
    let pts = &cloud.points;
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(pts.len());
    let mut neighbors = Vec::with_capacity(center_indices.len());
    let mut patches = Vec::with_capacity(center_indices.len());
    let mut centers = Vec::with_capacity(center_indices.len());
    for &ci in center_indices {
        let c = pts[ci];
        dist.clear();
        dist.extend(pts.iter().enumerate().map(|(i, p)| (sq_dist(p, &c), i)));
        let cmp =
            |a: &(f64, usize), b: &(f64, usize)| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1));
        if s < dist.len() {
            dist.select_nth_unstable_by(s - 1, cmp);
            dist.truncate(s);
        }
        dist.sort_unstable_by(cmp);
        let idx: Vec<usize> = dist.iter().map(|d| d.1).collect();
        patches.push(
            idx.iter()
                .map(|&i| [pts[i][0] - c[0], pts[i][1] - c[1], pts[i][2] - c[2]])
                .collect(),
        );
        neighbors.push(idx);
        centers.push(c);
    }
    Ok(PatchSet {
        order: (0..centers.len()).collect(),
        centers,
        center_indices: center_indices.to_vec(),
        neighbors,
        patches,
    })
}

fn check_count(cloud: &PointCloud, k: usize, what: &str) -> Result<()> {
    if k == 0 || k > cloud.len() {
        return Err(Error::range(format!("{what} {k} must be in [1, {}]", cloud.len())));
    }
    Ok(())
}

/// How patch tokens are ordered before the sequence model sees them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderStrategy {
    /// Sort centers by `(x, y, z)`, ties by original position.
    #[default]
    Lexicographic,
    /// Keep the sampling order.
    Sampled,
}

pub fn serialize_order(centers: &[Point], strategy: OrderStrategy) -> Vec<usize> {
    let mut order: Vec<usize> = (0..centers.len()).collect();
    if strategy == OrderStrategy::Lexicographic {
        // Stable sort keeps the original index order among exact ties.
        order.sort_by(|&a, &b| {
            let (p, q) = (centers[a], centers[b]);
            p[0].total_cmp(&q[0])
                .then(p[1].total_cmp(&q[1]))
                .then(p[2].total_cmp(&q[2]))
        });
    }
    order
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub scale: bool,
    pub translate: bool,
    pub rotate: bool,
}

impl AugmentConfig {
    pub fn is_identity(&self) -> bool {
        !(self.scale || self.translate || self.rotate)
    }
}

pub const SCALE_RANGE: (f64, f64) = (2.0 / 3.0, 1.5);
pub const TRANSLATE_RANGE: f64 = 0.2;

/// Random isotropic scale, per-axis translation and rotation about z.
pub fn augment<R: Rng + ?Sized>(cloud: &PointCloud, cfg: &AugmentConfig, rng: &mut R) -> PointCloud {
    let mut out = cloud.clone();
    if cfg.scale {
        let f = rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1);
        scale_cloud(&mut out, f);
    }
    if cfg.translate {
        let off: [f64; 3] = std::array::from_fn(|_| rng.random_range(-TRANSLATE_RANGE..=TRANSLATE_RANGE));
        for p in &mut out.points {
            for k in 0..3 {
                p[k] += off[k];
            }
        }
    }
    if cfg.rotate {
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        rotate_z(&mut out, theta);
    }
    out
}

pub fn scale_cloud(cloud: &mut PointCloud, factor: f64) {
    for p in &mut cloud.points {
        for v in p.iter_mut() {
            *v *= factor;
        }
    }
}

pub fn rotate_z(cloud: &mut PointCloud, theta: f64) {
    let (s, c) = theta.sin_cos();
    for p in &mut cloud.points {
        let (x, y) = (p[0], p[1]);
        p[0] = c * x - s * y;
        p[1] = s * x + c * y;
    }
}

/// Centers the cloud at its centroid and scales it into the unit ball.
pub fn normalize_cloud(cloud: &PointCloud) -> PointCloud {
    let c = cloud.centroid();
    let mut out = cloud.clone();
    for p in &mut out.points {
        for k in 0..3 {
            p[k] -= c[k];
        }
    }
    let radius = out
        .points
        .iter()
        .map(|p| sq_dist(p, &[0.0; 3]).sqrt())
        .fold(0.0, f64::max);
    if radius > 0.0 {
        scale_cloud(&mut out, 1.0 / radius);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line() -> PointCloud {
        PointCloud::new((0..5).map(|i| [i as f64, 0.0, 0.0]).collect(), None).unwrap()
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect();
        PointCloud::new(pts, Some(1)).unwrap()
    }

    #[test]
    fn cloud_rejects_empty_and_nan() {
        assert!(PointCloud::new(vec![], None).is_err());
        assert!(PointCloud::new(vec![[0.0, f64::NAN, 0.0]], None).is_err());
    }

    #[test]
    fn fps_picks_far_endpoint() {
        let idx = farthest_point_sample_from(&line(), 2, 0).unwrap();
        assert_eq!(idx, vec![0, 4]);
    }

    #[test]
    fn fps_exhausts_cloud() {
        let cloud = random_cloud(20, 1);
        let mut idx = farthest_point_sample(&cloud, 20, 9).unwrap();
        idx.sort_unstable();
        assert_eq!(idx, (0..20).collect::<Vec<_>>());
        assert!(farthest_point_sample(&cloud, 21, 9).is_err());
    }

    #[test]
    fn fps_is_seeded() {
        let cloud = random_cloud(64, 2);
        let a = farthest_point_sample(&cloud, 8, 5).unwrap();
        let b = farthest_point_sample(&cloud, 8, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn knn_self_is_nearest() {
        let cloud = random_cloud(30, 3);
        let ps = knn_group(&cloud, &[4, 17], 1).unwrap();
        assert_eq!(ps.neighbors, vec![vec![4], vec![17]]);
        assert_eq!(ps.patches[0], vec![[0.0; 3]]);
        assert!(knn_group(&cloud, &[0], 31).is_err());
    }

    #[test]
    fn knn_separated_clusters() {
        let mut pts: Vec<Point> = (0..6).map(|i| [i as f64 * 0.01, 0.0, 0.0]).collect();
        pts.extend((0..5).map(|i| [100.0 + i as f64 * 0.01, 0.0, 0.0]));
        let cloud = PointCloud::new(pts, None).unwrap();
        let ps = knn_group(&cloud, &[2], 6).unwrap();
        let mut got = ps.neighbors[0].clone();
        got.sort_unstable();
        assert_eq!(got, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn knn_ties_prefer_lower_index() {
        let pts = vec![[0.0; 3], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let cloud = PointCloud::new(pts, None).unwrap();
        let ps = knn_group(&cloud, &[0], 3).unwrap();
        assert_eq!(ps.neighbors[0], vec![0, 1, 2]);
    }

    #[test]
    fn order_examples() {
        let sorted = vec![[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]];
        assert_eq!(serialize_order(&sorted, OrderStrategy::Lexicographic), vec![0, 1, 2]);
        let rev: Vec<Point> = sorted.iter().rev().copied().collect();
        assert_eq!(serialize_order(&rev, OrderStrategy::Lexicographic), vec![2, 1, 0]);
        let dup = vec![[1.0, 1.0, 1.0], [0.0; 3], [1.0, 1.0, 1.0]];
        assert_eq!(serialize_order(&dup, OrderStrategy::Lexicographic), vec![1, 0, 2]);
        assert_eq!(serialize_order(&rev, OrderStrategy::Sampled), vec![0, 1, 2]);
    }

    #[test]
    fn augment_identity_and_isometry() {
        let cloud = random_cloud(40, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&cloud, &AugmentConfig::default(), &mut rng), cloud);

        let rot = AugmentConfig {
            rotate: true,
            ..Default::default()
        };
        let out = augment(&cloud, &rot, &mut rng);
        assert_eq!(out.label, cloud.label);
        for i in 0..cloud.len() {
            for j in 0..cloud.len() {
                let d0 = sq_dist(&cloud.points[i], &cloud.points[j]).sqrt();
                let d1 = sq_dist(&out.points[i], &out.points[j]).sqrt();
                assert!((d0 - d1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn normalize_examples() {
        let single = PointCloud::new(vec![[3.0, -2.0, 5.0]], None).unwrap();
        assert_eq!(normalize_cloud(&single).points, vec![[0.0; 3]]);

        let cloud = random_cloud(100, 6);
        let n = normalize_cloud(&cloud);
        let max = n
            .points
            .iter()
            .map(|p| sq_dist(p, &[0.0; 3]).sqrt())
            .fold(0.0, f64::max);
        assert!((max - 1.0).abs() < 1e-12);
        let c = n.centroid();
        assert!(c.iter().all(|v| v.abs() < 1e-12));
    }
}
