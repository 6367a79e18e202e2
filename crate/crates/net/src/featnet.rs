//! Hierarchical set-abstraction feature extractor producing a 32-d
//! descriptor per input point.

use deepicp_autodiff::{Graph, GroupedMlpSpec, ParameterStore, Tensor, Var};
use deepicp_core::{GeomError, PointCloud, SpatialIndex, Vector3};
use rand::Rng;

use crate::layers::{
    dropout, init_linear, init_mlp, linear, mlp_params, positions_tensor, relu_mlp,
};
use crate::{Mode, NetError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FEConfig {
    /// Center counts of the three abstraction levels, finest first.
    pub level_sizes: [usize; 3],
    /// Grouping radius per level, meters.
    pub radii: [f64; 3],
    pub group_cap: usize,
    pub down_widths: [Vec<usize>; 3],
    /// Propagation MLPs, coarsest first.
    pub up_widths: [Vec<usize>; 3],
    pub out_width: usize,
    pub keep_prob: f64,
}

impl Default for FEConfig {
    fn default() -> Self {
        Self {
            level_sizes: [4096, 1024, 256],
            radii: [0.5, 1.0, 2.0],
            group_cap: 32,
            down_widths: [vec![32, 32], vec![32, 64], vec![64, 64]],
            up_widths: [vec![64, 64], vec![32, 32], vec![32, 32, 32]],
            out_width: 32,
            keep_prob: 0.7,
        }
    }
}

impl FEConfig {
    /// Divides level sizes by `factor` and widens radii by `√factor`, which
    /// keeps the expected neighbors per group roughly constant on surfaces.
    pub fn scaled(factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(NetError::Config("scale factor must be positive".into()));
        }
        let base = Self::default();
        let s = (factor as f64).sqrt();
        let cfg = Self {
            level_sizes: base.level_sizes.map(|n| n / factor),
            radii: base.radii.map(|r| r * s),
            ..base
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let [a, b, c] = self.level_sizes;
        if !(a > b && b > c && c > 0) {
            return Err(NetError::Config(format!(
                "level sizes must strictly decrease: {:?}",
                self.level_sizes
            )));
        }
        let widths_ok = self
            .down_widths
            .iter()
            .chain(self.up_widths.iter())
            .all(|w| !w.is_empty() && w.iter().all(|&x| x > 0));
        if !widths_ok || self.out_width == 0 || self.group_cap == 0 {
            return Err(NetError::Config(
                "widths and group cap must be positive".into(),
            ));
        }
        if self.radii.iter().any(|r| !(*r > 0.0)) {
            return Err(NetError::Config(format!(
                "radii must be positive: {:?}",
                self.radii
            )));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(NetError::Config(format!(
                "keep probability {} outside (0, 1]",
                self.keep_prob
            )));
        }
        Ok(())
    }

    /// Smallest accepted cloud.
    pub fn min_points(&self) -> usize {
        self.level_sizes[2]
    }
}

/// Descriptors for every point of a cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCloud {
    pub positions: Vec<Vector3<f64>>,
    pub intensities: Vec<f64>,
    /// `[N, 32]`.
    pub descriptors: Tensor,
}

/// Greedy max-min subsampling seeded at index 0. Ties go to the lowest
/// index.
pub fn farthest_point_sample(points: &[Vector3<f64>], m: usize) -> Result<Vec<usize>> {
    if m > points.len() {
        return Err(NetError::TooFewPoints {
            got: points.len(),
            need: m,
        });
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    let mut chosen = vec![0];
    let mut dist: Vec<f64> = points
        .iter()
        .map(|p| (p - points[0]).norm_squared())
        .collect();
    dist[0] = -1.0;
    while chosen.len() < m {
        let mut best = usize::MAX;
        let mut best_d = -1.0;
        for (i, &d) in dist.iter().enumerate() {
            if d > best_d {
                best = i;
                best_d = d;
            }
        }
        chosen.push(best);
        let c = points[best];
        dist[best] = -1.0;
        for (i, d) in dist.iter_mut().enumerate() {
            if *d >= 0.0 {
                *d = d.min((points[i] - c).norm_squared());
            }
        }
    }
    Ok(chosen)
}

/// Up to `cap` neighbors of each center within `radius`, padded by
/// duplication. Centers with no neighbor get an empty group; the second
/// value counts them.
pub fn group_points(
    index: &SpatialIndex,
    centers: &[Vector3<f64>],
    radius: f64,
    cap: usize,
) -> Result<(Vec<Vec<usize>>, usize)> {
    let mut empty = 0;
    let mut groups = Vec::with_capacity(centers.len());
    for c in centers {
        match index.radius_neighbors(c, radius, cap) {
            Ok(g) => groups.push(g),
            Err(GeomError::EmptyNeighborhood { .. }) => {
                empty += 1;
                groups.push(Vec::new());
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok((groups, empty))
}

/// Normalized inverse-distance weights over the three nearest coarse points
/// (fewer if the coarse set is smaller).
pub fn interpolation_weights(
    coarse: &SpatialIndex,
    fine: &[Vector3<f64>],
) -> Vec<Vec<(usize, f64)>> {
    fine.iter()
        .map(|p| {
            let near = coarse.k_nearest(p, 3);
            let raw: Vec<(usize, f64)> = near
                .iter()
                .map(|&(i, d2)| (i, 1.0 / d2.sqrt().max(1e-10)))
                .collect();
            let total: f64 = raw.iter().map(|r| r.1).sum();
            raw.into_iter().map(|(i, w)| (i, w / total)).collect()
        })
        .collect()
}

/// Per-center max-pooled MLP over neighbor rows `[p − c, feature]`.
#[allow(clippy::too_many_arguments)]
pub fn set_abstraction(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    layers: usize,
    points: &[Vector3<f64>],
    features: Var,
    centers: &[Vector3<f64>],
    radius: f64,
    cap: usize,
) -> Result<Var> {
    let index = SpatialIndex::from_positions(points.iter().copied());
    let (groups, _) = group_points(&index, centers, radius, cap)?;
    abstraction_with_groups(g, store, prefix, layers, points, features, centers, groups)
}

#[allow(clippy::too_many_arguments)]
fn abstraction_with_groups(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    layers: usize,
    points: &[Vector3<f64>],
    features: Var,
    centers: &[Vector3<f64>],
    groups: Vec<Vec<usize>>,
) -> Result<Var> {
    let pos = g.constant(positions_tensor(points));
    let point_in = g.concat(&[pos, features])?;
    let center_in = g.constant(positions_tensor(centers));
    let layers = mlp_params(g, store, prefix, layers)?;
    Ok(g.grouped_mlp_max(
        point_in,
        center_in,
        GroupedMlpSpec {
            groups,
            layers,
            relative: 3,
            divisor: 1.0,
        },
    )?)
}

/// Interpolates coarse features onto fine points, concatenates the skip
/// features and applies the shared MLP.
#[allow(clippy::too_many_arguments)]
pub fn feature_propagation(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    layers: usize,
    coarse: &[Vector3<f64>],
    coarse_features: Var,
    fine: &[Vector3<f64>],
    skip: Option<Var>,
) -> Result<Var> {
    let index = SpatialIndex::from_positions(coarse.iter().copied());
    let weights = interpolation_weights(&index, fine);
    propagate_with_weights(g, store, prefix, layers, coarse_features, weights, skip)
}

fn propagate_with_weights(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    layers: usize,
    coarse_features: Var,
    weights: Vec<Vec<(usize, f64)>>,
    skip: Option<Var>,
) -> Result<Var> {
    let interpolated = g.weighted_rows(coarse_features, weights)?;
    let joined = match skip {
        Some(s) => g.concat(&[interpolated, s])?,
        None => interpolated,
    };
    relu_mlp(g, store, prefix, layers, joined)
}

struct Level {
    positions: Vec<Vector3<f64>>,
    groups: Vec<Vec<usize>>,
    /// Interpolation from this level's centers back onto the level below.
    upsample: Vec<Vec<(usize, f64)>>,
}

/// Sampling, grouping and interpolation structure of one cloud. It depends
/// only on geometry, so it is computed once and reused across passes.
pub struct FeGeometry {
    positions: Vec<Vector3<f64>>,
    intensities: Vec<f64>,
    levels: Vec<Level>,
    empty_groups: usize,
}

impl FeGeometry {
    /// Level sizes are clamped to the number of points available below them.
    pub fn build(cloud: &PointCloud, config: &FEConfig) -> Result<Self> {
        config.validate()?;
        if cloud.len() < config.min_points() {
            return Err(NetError::TooFewPoints {
                got: cloud.len(),
                need: config.min_points(),
            });
        }
        let positions: Vec<Vector3<f64>> = cloud.positions().collect();
        let intensities = cloud.iter().map(|p| p.intensity).collect();
        let mut levels = Vec::with_capacity(3);
        let mut below = positions.clone();
        let mut empty_groups = 0;
        for l in 0..3 {
            let m = config.level_sizes[l].min(below.len());
            let picked = farthest_point_sample(&below, m)?;
            let centers: Vec<Vector3<f64>> = picked.iter().map(|&i| below[i]).collect();
            let below_index = SpatialIndex::from_positions(below.iter().copied());
            let (groups, empty) =
                group_points(&below_index, &centers, config.radii[l], config.group_cap)?;
            empty_groups += empty;
            let center_index = SpatialIndex::from_positions(centers.iter().copied());
            let upsample = interpolation_weights(&center_index, &below);
            levels.push(Level {
                positions: centers.clone(),
                groups,
                upsample,
            });
            below = centers;
        }
        Ok(Self {
            positions,
            intensities,
            levels,
            empty_groups,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Vector3<f64>] {
        &self.positions
    }

    pub fn intensities(&self) -> &[f64] {
        &self.intensities
    }

    pub fn level_sizes(&self) -> [usize; 3] {
        [0, 1, 2].map(|l| self.levels[l].positions.len())
    }

    /// Groups that found no neighbor (always zero when centers are drawn
    /// from the points being grouped).
    pub fn empty_groups(&self) -> usize {
        self.empty_groups
    }
}

pub(crate) fn init_fe(
    store: &mut ParameterStore,
    config: &FEConfig,
    rng: &mut impl Rng,
) -> Result<()> {
    config.validate()?;
    let mut width = 1;
    let mut level_out = Vec::new();
    for (l, widths) in config.down_widths.iter().enumerate() {
        width = init_mlp(store, &format!("fe.sa{}", l + 1), 3 + width, widths, rng)?;
        level_out.push(width);
    }
    // Skip widths for levels 2, 1 and the raw intensity channel.
    let skips = [level_out[1], level_out[0], 1];
    for (u, widths) in config.up_widths.iter().enumerate() {
        width = init_mlp(
            store,
            &format!("fe.fp{}", 3 - u),
            width + skips[u],
            widths,
            rng,
        )?;
    }
    init_linear(store, "fe.out", width, config.out_width, rng)
}

/// Descriptor tensor `[N, out_width]` for the cloud behind `geometry`.
/// Dropout is active only in training mode.
pub fn fe_forward(
    g: &mut Graph,
    store: &ParameterStore,
    config: &FEConfig,
    geometry: &FeGeometry,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let intensity = g.constant(Tensor::new(
        vec![geometry.len(), 1],
        geometry.intensities.clone(),
    )?);
    let mut below_pos = &geometry.positions;
    let mut below_feat = intensity;
    let mut down = Vec::with_capacity(3);
    for (l, level) in geometry.levels.iter().enumerate() {
        let f = abstraction_with_groups(
            g,
            store,
            &format!("fe.sa{}", l + 1),
            config.down_widths[l].len(),
            below_pos,
            below_feat,
            &level.positions,
            level.groups.clone(),
        )?;
        down.push(f);
        below_pos = &level.positions;
        below_feat = f;
    }
    let skips = [Some(down[1]), Some(down[0]), Some(intensity)];
    let mut h = down[2];
    for (u, skip) in skips.into_iter().enumerate() {
        let level = &geometry.levels[2 - u];
        h = propagate_with_weights(
            g,
            store,
            &format!("fe.fp{}", 3 - u),
            config.up_widths[u].len(),
            h,
            level.upsample.clone(),
            skip,
        )?;
    }
    let out = linear(g, store, "fe.out", h)?;
    match mode {
        Mode::Train(rng) => dropout(g, out, config.keep_prob, &mut **rng),
        Mode::Infer => Ok(out),
    }
}

/// Inference-mode descriptors for a whole cloud.
pub fn extract_features(
    store: &ParameterStore,
    config: &FEConfig,
    cloud: &PointCloud,
) -> Result<FeatureCloud> {
    let geometry = FeGeometry::build(cloud, config)?;
    let mut g = Graph::new();
    let out = fe_forward(&mut g, store, config, &geometry, &mut Mode::Infer)?;
    Ok(FeatureCloud {
        positions: geometry.positions,
        intensities: geometry.intensities,
        descriptors: g.value(out).clone(),
    })
}

#[cfg(test)]
mod tests {
    use deepicp_autodiff::gradcheck::{check_params, random_head, CheckConfig};
    use deepicp_core::Point;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::layers::reference;

    fn v(x: f64, y: f64, z: f64) -> Vector3<f64> {
        Vector3::new(x, y, z)
    }

    fn random_points(rng: &mut impl Rng, n: usize, half: f64) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| {
                v(
                    rng.gen_range(-half..half),
                    rng.gen_range(-half..half),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect()
    }

    fn cloud(points: Vec<Point>) -> PointCloud {
        PointCloud::new(points).unwrap()
    }

    fn random_cloud(rng: &mut impl Rng, n: usize) -> PointCloud {
        cloud(
            random_points(rng, n, 8.0)
                .into_iter()
                .map(|p| Point::from_position(p, rng.gen_range(0.0..1.0)))
                .collect(),
        )
    }

    fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::new(
            vec![rows, cols],
            (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn sorted(mut v: Vec<usize>) -> Vec<usize> {
        v.sort_unstable();
        v
    }

    #[test]
    fn fps_with_m_equal_n_returns_every_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = random_points(&mut rng, 25, 3.0);
        assert_eq!(
            sorted(farthest_point_sample(&pts, 25).unwrap()),
            (0..25).collect::<Vec<_>>()
        );
    }

    #[test]
    fn fps_picks_square_corners_before_center() {
        let pts = [
            v(0.0, 0.0, 0.0),
            v(0.5, 0.5, 0.0),
            v(1.0, 0.0, 0.0),
            v(0.0, 1.0, 0.0),
            v(1.0, 1.0, 0.0),
        ];
        assert_eq!(
            sorted(farthest_point_sample(&pts, 4).unwrap()),
            vec![0, 2, 3, 4]
        );
    }

    #[test]
    fn fps_picks_line_endpoints() {
        let pts: Vec<_> = [0.0, 3.0, 1.0, 9.0, 4.5, 2.0]
            .iter()
            .map(|&x| v(x, 0.0, 0.0))
            .collect();
        assert_eq!(farthest_point_sample(&pts, 2).unwrap(), vec![0, 3]);
    }

    #[test]
    fn fps_rejects_oversized_request() {
        let pts = [v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0)];
        assert!(matches!(
            farthest_point_sample(&pts, 3),
            Err(NetError::TooFewPoints { got: 2, need: 3 })
        ));
    }

    proptest! {
        #[test]
        fn fps_each_pick_maximizes_distance_to_previous(seed in any::<u64>(), n in 3usize..40, frac in 0.1f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts = random_points(&mut rng, n, 5.0);
            let m = ((n as f64 * frac) as usize).max(1);
            let picked = farthest_point_sample(&pts, m).unwrap();
            prop_assert_eq!(picked[0], 0);
            for k in 1..m {
                let score = |i: usize| picked[..k].iter().map(|&j| (pts[i] - pts[j]).norm()).fold(f64::INFINITY, f64::min);
                let best = (0..n).filter(|i| !picked[..k].contains(i)).map(score).fold(0.0, f64::max);
                prop_assert_eq!(score(picked[k]), best);
            }
        }
    }

    fn test_store(rng: &mut ChaCha8Rng, fan_in: usize, widths: &[usize]) -> ParameterStore {
        let mut store = ParameterStore::new();
        init_mlp(&mut store, "t", fan_in, widths, rng).unwrap();
        // nonzero biases so empty-group rows are informative
        for i in 0..widths.len() {
            let b = store.value_mut(&format!("t.l{i}.b")).unwrap();
            for x in b.data_mut() {
                *x = rng.gen_range(-0.2..0.4);
            }
        }
        store
    }

    #[test]
    fn set_abstraction_single_neighbor() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let store = test_store(&mut rng, 5, &[6, 4]);
        let p = v(1.0, 2.0, -0.5);
        let c = v(0.75, 2.25, -0.25);
        let mut g = Graph::new();
        let feat = g.constant(Tensor::new(vec![1, 2], vec![0.3, -0.7]).unwrap());
        let out = set_abstraction(&mut g, &store, "t", 2, &[p], feat, &[c], 1.0, 4).unwrap();
        let d = p - c;
        let want = reference::relu_mlp(&store, "t", 2, &[d.x, d.y, d.z, 0.3, -0.7]);
        assert_eq!(g.value(out).shape(), &[1, 4]);
        for (a, b) in g.value(out).data().iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn set_abstraction_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let store = test_store(&mut rng, 5, &[6, 4]);
        let pts = random_points(&mut rng, 14, 1.5);
        let feats = random_tensor(&mut rng, 14, 2);
        let centers = vec![pts[0], v(0.1, 0.2, 0.0), v(40.0, 0.0, 0.0)];
        let radius = 0.9;
        let mut g = Graph::new();
        let f = g.constant(feats.clone());
        let out = set_abstraction(&mut g, &store, "t", 2, &pts, f, &centers, radius, 64).unwrap();
        for (ci, c) in centers.iter().enumerate() {
            let rows: Vec<Vec<f64>> = pts
                .iter()
                .enumerate()
                .filter(|(_, p)| (*p - c).norm() <= radius)
                .map(|(i, p)| {
                    let d = p - c;
                    vec![d.x, d.y, d.z, feats.row(i)[0], feats.row(i)[1]]
                })
                .collect();
            let rows = if rows.is_empty() {
                vec![vec![0.0; 5]]
            } else {
                rows
            };
            let want = reference::pooled(&store, "t", 2, &rows);
            for (a, b) in g.value(out).row(ci).iter().zip(&want) {
                assert!((a - b).abs() <= 1e-12, "center {ci}");
            }
        }
    }

    #[test]
    fn set_abstraction_ignores_input_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let store = test_store(&mut rng, 5, &[6, 4]);
        let pts = random_points(&mut rng, 20, 1.5);
        let feats = random_tensor(&mut rng, 20, 2);
        let centers = vec![v(0.0, 0.0, 0.0), v(1.0, -0.5, 0.2)];
        let perm: Vec<usize> = (0..20).rev().collect();
        let ppts: Vec<_> = perm.iter().map(|&i| pts[i]).collect();
        let pfeats = Tensor::new(
            vec![20, 2],
            perm.iter().flat_map(|&i| feats.row(i).to_vec()).collect(),
        )
        .unwrap();
        let mut g = Graph::new();
        let f = g.constant(feats);
        let pf = g.constant(pfeats);
        let a = set_abstraction(&mut g, &store, "t", 2, &pts, f, &centers, 1.2, 64).unwrap();
        let b = set_abstraction(&mut g, &store, "t", 2, &ppts, pf, &centers, 1.2, 64).unwrap();
        assert_eq!(g.value(a).data(), g.value(b).data());
    }

    #[test]
    fn interpolation_at_a_coarse_point_copies_it() {
        let coarse = [
            v(0.0, 0.0, 0.0),
            v(1.0, 0.0, 0.0),
            v(0.0, 2.0, 0.0),
            v(3.0, 3.0, 3.0),
        ];
        let index = SpatialIndex::from_positions(coarse.iter().copied());
        let w = interpolation_weights(&index, &[coarse[1]]);
        let on_point: f64 = w[0].iter().filter(|(i, _)| *i == 1).map(|x| x.1).sum();
        assert!((on_point - 1.0).abs() <= 1e-9, "{w:?}");
    }

    #[test]
    fn interpolation_equidistant_is_uniform() {
        let s3 = 3f64.sqrt();
        let coarse = [
            v(1.0, 0.0, 0.0),
            v(-0.5, s3 / 2.0, 0.0),
            v(-0.5, -s3 / 2.0, 0.0),
            v(9.0, 9.0, 9.0),
        ];
        let index = SpatialIndex::from_positions(coarse.iter().copied());
        let w = interpolation_weights(&index, &[v(0.0, 0.0, 0.0)]);
        assert_eq!(sorted(w[0].iter().map(|x| x.0).collect()), vec![0, 1, 2]);
        for (_, wi) in &w[0] {
            assert!((wi - 1.0 / 3.0).abs() <= 1e-15);
        }
    }

    #[test]
    fn feature_propagation_matches_direct_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let store = test_store(&mut rng, 3, &[4, 2]);
        let coarse = random_points(&mut rng, 6, 2.0);
        let fine = random_points(&mut rng, 5, 2.0);
        let cf = random_tensor(&mut rng, 6, 2);
        let skip = random_tensor(&mut rng, 5, 1);
        let mut g = Graph::new();
        let cv = g.constant(cf.clone());
        let sv = g.constant(skip.clone());
        let out =
            feature_propagation(&mut g, &store, "t", 2, &coarse, cv, &fine, Some(sv)).unwrap();
        for (fi, p) in fine.iter().enumerate() {
            let mut near: Vec<(f64, usize)> = coarse
                .iter()
                .enumerate()
                .map(|(i, c)| ((c - p).norm(), i))
                .collect();
            near.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let inv: Vec<f64> = near[..3].iter().map(|(d, _)| 1.0 / d).collect();
            let total: f64 = inv.iter().sum();
            let mut row = vec![0.0; 2];
            for ((_, i), w) in near[..3].iter().zip(&inv) {
                for c in 0..2 {
                    row[c] += w / total * cf.row(*i)[c];
                }
            }
            row.push(skip.row(fi)[0]);
            let want = reference::relu_mlp(&store, "t", 2, &row);
            for (a, b) in g.value(out).row(fi).iter().zip(&want) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    fn toy_store(config: &FEConfig, seed: u64) -> ParameterStore {
        let mut store = ParameterStore::new();
        init_fe(&mut store, config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        store
    }

    #[test]
    fn descriptors_have_one_row_per_point_and_vary() {
        let config = FEConfig::scaled(16).unwrap();
        let store = toy_store(&config, 6);
        let c = random_cloud(&mut ChaCha8Rng::seed_from_u64(7), 300);
        let f = extract_features(&store, &config, &c).unwrap();
        assert_eq!(f.descriptors.shape(), &[300, 32]);
        assert!(f.descriptors.data().iter().all(|x| x.is_finite()));
        let spread = (0..32).any(|c| {
            let col: Vec<f64> = (0..300).map(|i| f.descriptors.row(i)[c]).collect();
            col.iter().any(|x| (x - col[0]).abs() > 1e-6)
        });
        assert!(spread, "descriptors are constant across points");
    }

    #[test]
    fn too_small_cloud_is_rejected() {
        let config = FEConfig::scaled(16).unwrap();
        let store = toy_store(&config, 6);
        let c = random_cloud(&mut ChaCha8Rng::seed_from_u64(7), config.min_points() - 1);
        assert!(matches!(
            extract_features(&store, &config, &c),
            Err(NetError::TooFewPoints { .. })
        ));
    }

    fn shifted(c: &PointCloud, t: Vector3<f64>) -> PointCloud {
        cloud(
            c.iter()
                .map(|p| Point::from_position(p.position + t, p.intensity))
                .collect(),
        )
    }

    #[test]
    fn descriptors_are_bitwise_invariant_to_exact_shifts() {
        let config = FEConfig::scaled(16).unwrap();
        let store = toy_store(&config, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // coordinates on a 1/64 grid so the shifted cloud is represented exactly
        let c = cloud(
            (0..300)
                .map(|_| {
                    let q =
                        |r: &mut ChaCha8Rng, h: i32| f64::from(r.gen_range(-h * 64..h * 64)) / 64.0;
                    Point::from_position(
                        v(q(&mut rng, 8), q(&mut rng, 8), q(&mut rng, 1)),
                        rng.gen_range(0.0..1.0),
                    )
                })
                .collect(),
        );
        let base = extract_features(&store, &config, &c).unwrap();
        for t in [v(5.25, -3.5, 0.125), v(-1024.0, 512.5, 2.0)] {
            let moved = extract_features(&store, &config, &shifted(&c, t)).unwrap();
            assert_eq!(base.descriptors.data(), moved.descriptors.data());
        }
    }

    #[test]
    fn descriptors_are_invariant_to_arbitrary_shifts() {
        let config = FEConfig::scaled(16).unwrap();
        let store = toy_store(&config, 10);
        let c = random_cloud(&mut ChaCha8Rng::seed_from_u64(11), 300);
        let base = extract_features(&store, &config, &c).unwrap();
        let moved = extract_features(&store, &config, &shifted(&c, v(0.1234, -7.77, 3.3))).unwrap();
        let worst = base
            .descriptors
            .data()
            .iter()
            .zip(moved.descriptors.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1e-9, "{worst}");
    }

    #[test]
    fn descriptors_follow_a_permutation_of_the_points() {
        let config = FEConfig::scaled(16).unwrap();
        let store = toy_store(&config, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let base_cloud = random_cloud(&mut rng, 300);
        // sampling is seeded at index 0, so the permutation keeps it in place
        let mut perm: Vec<usize> = (1..300).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        perm.insert(0, 0);
        let permuted = cloud(perm.iter().map(|&i| base_cloud.points()[i]).collect());
        let base = extract_features(&store, &config, &base_cloud).unwrap();
        let moved = extract_features(&store, &config, &permuted).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(
                moved.descriptors.row(k),
                base.descriptors.row(i),
                "point {i}"
            );
        }
    }

    #[test]
    fn fe_parameter_gradients_match_finite_differences() {
        let config = FEConfig {
            level_sizes: [16, 8, 4],
            radii: [1.0, 2.0, 4.0],
            group_cap: 8,
            down_widths: [vec![4, 4], vec![4, 6], vec![6, 6]],
            up_widths: [vec![6, 6], vec![4, 4], vec![4, 4]],
            out_width: 5,
            keep_prob: 0.7,
        };
        let mut store = toy_store(&config, 14);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        // zero biases put dead-unit rows exactly on a ReLU kink
        let biases: Vec<String> = store
            .names()
            .filter(|n| n.ends_with(".b"))
            .map(str::to_string)
            .collect();
        for b in biases {
            for x in store.value_mut(&b).unwrap().data_mut() {
                *x = rng.gen_range(-0.1..0.2);
            }
        }
        let small = cloud(
            random_points(&mut rng, 48, 2.0)
                .into_iter()
                .map(|p| Point::from_position(p, rng.gen_range(0.0..1.0)))
                .collect(),
        );
        let geometry = FeGeometry::build(&small, &config).unwrap();
        let head: Vec<f64> = (0..37).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let names: Vec<String> = store.names().map(str::to_string).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let report = check_params(
            &store,
            &names,
            |g, s| {
                let y = fe_forward(g, s, &config, &geometry, &mut Mode::Infer).map_err(
                    |e| match e {
                        NetError::Autodiff(a) => a,
                        other => panic!("{other}"),
                    },
                )?;
                random_head(g, y, &head)
            },
            CheckConfig {
                per_tensor: Some(4),
                ..CheckConfig::default()
            },
            &mut rng,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-3, "{report:?}");
    }
}
