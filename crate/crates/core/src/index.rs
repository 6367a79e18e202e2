use nalgebra::Vector3;

use crate::{GeomError, PointCloud, Result};

const LEAF_SIZE: usize = 8;

/// Balanced kd-tree over point positions, immutable after construction.
///
/// The tree is implicit: `order` is permuted so that every subtree occupies a
/// contiguous range whose median element is the splitting point, with the
/// split axis cycling x, y, z by depth.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    positions: Vec<[f64; 3]>,
    order: Vec<usize>,
}

impl SpatialIndex {
    pub fn build(cloud: &PointCloud) -> Result<Self> {
        cloud.ensure_non_empty()?;
        Ok(Self::from_positions(cloud.positions()))
    }

    /// Builds over arbitrary positions; an empty set gives an index that
    /// answers every query with nothing.
    pub fn from_positions(positions: impl IntoIterator<Item = Vector3<f64>>) -> Self {
        let positions: Vec<[f64; 3]> = positions.into_iter().map(|p| [p.x, p.y, p.z]).collect();
        let mut order: Vec<usize> = (0..positions.len()).collect();
        build_range(&positions, &mut order, 0);
        Self { positions, order }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn position(&self, index: usize) -> Vector3<f64> {
        let p = self.positions[index];
        Vector3::new(p[0], p[1], p[2])
    }

    /// All points with squared distance ≤ radius², as `(index, squared distance)`
    /// sorted by ascending distance, ties by index.
    pub fn within(&self, center: &Vector3<f64>, radius: f64) -> Vec<(usize, f64)> {
        let q = [center.x, center.y, center.z];
        let mut out = Vec::new();
        if radius >= 0.0 {
            self.within_range(&q, radius, radius * radius, 0, self.order.len(), 0, &mut out);
        }
        sort_hits(&mut out);
        out
    }

    /// Up to `cap` nearest in-radius points, padded to exactly `cap` by
    /// cycling through the found points when fewer exist.
    pub fn radius_neighbors(&self, center: &Vector3<f64>, radius: f64, cap: usize) -> Result<Vec<usize>> {
        if !(radius > 0.0) || cap == 0 {
            return Err(GeomError::InvalidArgument(format!(
                "radius must be > 0 and cap >= 1 (got radius {radius}, cap {cap})"
            )));
        }
        let hits = self.within(center, radius);
        if hits.is_empty() {
            return Err(GeomError::EmptyNeighborhood { radius });
        }
        Ok(pad_cyclic(hits.iter().map(|h| h.0), cap))
    }

    /// Nearest point as `(index, squared distance)`; `None` on an empty index.
    pub fn nearest(&self, center: &Vector3<f64>) -> Option<(usize, f64)> {
        self.k_nearest(center, 1).into_iter().next()
    }

    /// The `k` nearest points (fewer if the index is smaller), sorted by
    /// ascending squared distance, ties by index.
    pub fn k_nearest(&self, center: &Vector3<f64>, k: usize) -> Vec<(usize, f64)> {
        let q = [center.x, center.y, center.z];
        let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
        if k > 0 {
            self.knn_range(&q, k, 0, self.order.len(), 0, &mut best);
        }
        best
    }

    #[allow(clippy::too_many_arguments)]
    fn within_range(
        &self,
        q: &[f64; 3],
        radius: f64,
        r2: f64,
        lo: usize,
        hi: usize,
        depth: usize,
        out: &mut Vec<(usize, f64)>,
    ) {
        if hi - lo <= LEAF_SIZE {
            for &i in &self.order[lo..hi] {
                let d2 = dist2(q, &self.positions[i]);
                if d2 <= r2 {
                    out.push((i, d2));
                }
            }
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let split = self.order[mid];
        let d2 = dist2(q, &self.positions[split]);
        if d2 <= r2 {
            out.push((split, d2));
        }
        let axis = depth % 3;
        let plane = self.positions[split][axis];
        if q[axis] - radius <= plane {
            self.within_range(q, radius, r2, lo, mid, depth + 1, out);
        }
        if q[axis] + radius >= plane {
            self.within_range(q, radius, r2, mid + 1, hi, depth + 1, out);
        }
    }

    fn knn_range(&self, q: &[f64; 3], k: usize, lo: usize, hi: usize, depth: usize, best: &mut Vec<(usize, f64)>) {
        if hi - lo <= LEAF_SIZE {
            for &i in &self.order[lo..hi] {
                offer(best, k, (i, dist2(q, &self.positions[i])));
            }
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let split = self.order[mid];
        offer(best, k, (split, dist2(q, &self.positions[split])));
        let axis = depth % 3;
        let diff = q[axis] - self.positions[split][axis];
        let (near, far) = if diff <= 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.knn_range(q, k, near.0, near.1, depth + 1, best);
        let worst = if best.len() < k { f64::INFINITY } else { best[k - 1].1 };
        if diff * diff <= worst {
            self.knn_range(q, k, far.0, far.1, depth + 1, best);
        }
    }
}

/// Repeats `found` cyclically until `cap` entries exist; truncates if longer.
pub(crate) fn pad_cyclic(found: impl Iterator<Item = usize> + Clone, cap: usize) -> Vec<usize> {
    found.cycle().take(cap).collect()
}

fn offer(best: &mut Vec<(usize, f64)>, k: usize, cand: (usize, f64)) {
    if best.len() == k {
        let last = best[k - 1];
        if !hit_less(&cand, &last) {
            return;
        }
        best.pop();
    }
    let pos = best.partition_point(|h| hit_less(h, &cand));
    best.insert(pos, cand);
}

fn hit_less(a: &(usize, f64), b: &(usize, f64)) -> bool {
    a.1 < b.1 || (a.1 == b.1 && a.0 < b.0)
}

fn sort_hits(hits: &mut [(usize, f64)]) {
    hits.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

fn build_range(positions: &[[f64; 3]], order: &mut [usize], depth: usize) {
    if order.len() <= LEAF_SIZE {
        return;
    }
    let axis = depth % 3;
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| positions[a][axis].total_cmp(&positions[b][axis]).then(a.cmp(&b)));
    let (left, rest) = order.split_at_mut(mid);
    build_range(positions, left, depth + 1);
    build_range(positions, &mut rest[1..], depth + 1);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Point;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_within(cloud: &PointCloud, center: &Vector3<f64>, radius: f64) -> Vec<(usize, f64)> {
        let q = [center.x, center.y, center.z];
        let mut out: Vec<(usize, f64)> = cloud
            .iter()
            .enumerate()
            .map(|(i, p)| (i, dist2(&q, &[p.position.x, p.position.y, p.position.z])))
            .filter(|h| h.1 <= radius * radius)
            .collect();
        sort_hits(&mut out);
        out
    }

    fn random_cloud(rng: &mut impl Rng, n: usize) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| Point::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-1.0..1.0), 0.5))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn empty_cloud_rejected() {
        let err = SpatialIndex::build(&PointCloud::default()).unwrap_err();
        assert_eq!(err, GeomError::EmptyCloud);
    }

    #[test]
    fn singleton_query() {
        let c = PointCloud::new(vec![Point::new(1.0, 2.0, 3.0, 0.0)]).unwrap();
        let idx = SpatialIndex::build(&c).unwrap();
        let hits = idx.within(&Vector3::new(1.0, 2.0, 3.0), 0.1);
        assert_eq!(hits, vec![(0, 0.0)]);
    }

    #[test]
    fn unit_cube_corners() {
        let mut pts = Vec::new();
        for x in [0.0, 1.0] {
            for y in [0.0, 1.0] {
                for z in [0.0, 1.0] {
                    pts.push(Point::new(x, y, z, 0.0));
                }
            }
        }
        let c = PointCloud::new(pts).unwrap();
        let idx = SpatialIndex::build(&c).unwrap();
        let origin = Vector3::zeros();
        let got: Vec<usize> = idx.within(&origin, 1.2).iter().map(|h| h.0).collect();
        // origin corner, then the three unit-distance corners by index
        assert_eq!(got, vec![0, 1, 2, 4]);
        assert_eq!(idx.within(&origin, 1.2), brute_within(&c, &origin, 1.2));
    }

    #[test]
    fn random_queries_match_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = random_cloud(&mut rng, 500);
        let idx = SpatialIndex::build(&c).unwrap();
        for _ in 0..20 {
            let q = Vector3::new(rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0), rng.gen_range(-1.5..1.5));
            let r = rng.gen_range(0.1..3.0);
            assert_eq!(idx.within(&q, r), brute_within(&c, &q, r));
        }
    }

    #[test]
    fn padding_cycles_found_points() {
        let c = PointCloud::new(vec![
            Point::new(0.0, 0.0, 0.0, 0.0),
            Point::new(0.5, 0.0, 0.0, 0.0),
            Point::new(10.0, 0.0, 0.0, 0.0),
        ])
        .unwrap();
        let idx = SpatialIndex::build(&c).unwrap();
        assert_eq!(idx.radius_neighbors(&Vector3::zeros(), 1.0, 4).unwrap(), vec![0, 1, 0, 1]);
        assert_eq!(idx.radius_neighbors(&Vector3::zeros(), 1.0, 2).unwrap(), vec![0, 1]);
        assert_eq!(idx.radius_neighbors(&Vector3::zeros(), 1.0, 1).unwrap(), vec![0]);
        assert!(matches!(
            idx.radius_neighbors(&Vector3::new(5.0, 5.0, 5.0), 1.0, 4),
            Err(GeomError::EmptyNeighborhood { .. })
        ));
        assert!(idx.radius_neighbors(&Vector3::zeros(), 0.0, 4).is_err());
        assert!(idx.radius_neighbors(&Vector3::zeros(), 1.0, 0).is_err());
    }

    #[test]
    fn knn_matches_sorted_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = random_cloud(&mut rng, 300);
        let idx = SpatialIndex::build(&c).unwrap();
        for _ in 0..30 {
            let q = Vector3::new(rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0), rng.gen_range(-1.5..1.5));
            let all = brute_within(&c, &q, 1e9);
            assert_eq!(idx.k_nearest(&q, 3), all[..3].to_vec());
            assert_eq!(idx.nearest(&q), Some(all[0]));
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn within_equals_brute_force(seed in 0u64..1_000_000, n in 1usize..1000, r in 0.05f64..4.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = random_cloud(&mut rng, n);
            let idx = SpatialIndex::build(&c).unwrap();
            let q = Vector3::new(rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0), rng.gen_range(-1.5..1.5));
            proptest::prop_assert_eq!(idx.within(&q, r), brute_within(&c, &q, r));
        }
    }
}
