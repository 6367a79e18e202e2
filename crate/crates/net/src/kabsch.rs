//! Weighted rigid pose solve, both as a plain function and inside the
//! autodiff graph so gradients reach the generated points and the weights.

use deepicp_autodiff::{Graph, Tensor, Var};
use deepicp_core::{KabschSolution, Matrix3, Vector3};

use crate::layers::positions_tensor;
use crate::{NetError, Result};

/// Keypoints, their generated correspondences and weights normalized to
/// sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    pub source: Vec<Vector3<f64>>,
    pub target: Vec<Vector3<f64>>,
    pub weights: Vec<f64>,
}

impl CorrespondenceSet {
    /// Normalizes `weights`; they must be positive.
    pub fn new(
        source: Vec<Vector3<f64>>,
        target: Vec<Vector3<f64>>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let n = source.len();
        if n < 3 || target.len() != n || weights.len() != n {
            return Err(NetError::InvalidArgument(format!(
                "{n} source, {} target, {} weights; need at least 3 matched pairs",
                target.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(NetError::InvalidArgument(
                "correspondence weights must be positive".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        Ok(Self {
            source,
            target,
            weights: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    /// Concatenates two sets and renormalizes the combined weights.
    pub fn pooled(&self, other: &CorrespondenceSet) -> Result<Self> {
        let cat =
            |a: &[Vector3<f64>], b: &[Vector3<f64>]| a.iter().chain(b).copied().collect::<Vec<_>>();
        Self::new(
            cat(&self.source, &other.source),
            cat(&self.target, &other.target),
            self.weights.iter().chain(&other.weights).copied().collect(),
        )
    }
}

pub fn weighted_kabsch(set: &CorrespondenceSet) -> Result<KabschSolution> {
    Ok(deepicp_core::weighted_kabsch(
        &set.source,
        &set.target,
        &set.weights,
    )?)
}

/// Rotation `[3, 3]` and translation `[3]` nodes of a graph pose solve.
#[derive(Debug, Clone, Copy)]
pub struct PoseVars {
    pub rotation: Var,
    pub translation: Var,
    pub reflection_corrected: bool,
}

impl PoseVars {
    pub fn values(&self, g: &Graph) -> (Matrix3<f64>, Vector3<f64>) {
        let r = g.value(self.rotation).data();
        let t = g.value(self.translation).data();
        (Matrix3::from_row_slice(r), Vector3::new(t[0], t[1], t[2]))
    }
}

/// Graph form of the weighted solve. `x, y: [N, 3]`, `w: [N]` summing to
/// one. The determinant sign is treated as a constant.
pub fn kabsch_graph(g: &mut Graph, x: Var, y: Var, w: Var) -> Result<PoseVars> {
    let x_bar = weighted_mean(g, x, w)?;
    let y_bar = weighted_mean(g, y, w)?;
    let neg_x = g.scale(x_bar, -1.0);
    let neg_y = g.scale(y_bar, -1.0);
    let xc = g.add_broadcast(x, neg_x)?;
    let yc = g.add_broadcast(y, neg_y)?;
    let xw = g.mul_rows(xc, w)?;
    let xwt = g.transpose(xw)?;
    let h = g.matmul(xwt, yc)?;
    let (u, _, v) = g.svd3(h)?;
    let uv = {
        let um = Matrix3::from_row_slice(g.value(u).data());
        let vm = Matrix3::from_row_slice(g.value(v).data());
        (vm * um.transpose()).determinant()
    };
    let sign = if uv < 0.0 { -1.0 } else { 1.0 };
    let fix = g.constant(Tensor::new(
        vec![3, 3],
        vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, sign],
    )?);
    let ut = g.transpose(u)?;
    let vf = g.matmul(v, fix)?;
    let rotation = g.matmul(vf, ut)?;
    let xcol = g.reshape(x_bar, &[3, 1])?;
    let rx = g.matmul(rotation, xcol)?;
    let rx = g.reshape(rx, &[3])?;
    let translation = g.sub(y_bar, rx)?;
    Ok(PoseVars {
        rotation,
        translation,
        reflection_corrected: sign < 0.0,
    })
}

fn weighted_mean(g: &mut Graph, x: Var, w: Var) -> Result<Var> {
    let xw = g.mul_rows(x, w)?;
    Ok(g.sum_rows(xw))
}

/// Applies a graph pose to constant points: `[N, 3] -> [N, 3]`.
pub fn apply_pose(g: &mut Graph, pose: &PoseVars, points: &[Vector3<f64>]) -> Result<Var> {
    let x = g.constant(positions_tensor(points));
    let rt = g.transpose(pose.rotation)?;
    let rotated = g.matmul(x, rt)?;
    Ok(g.add_broadcast(rotated, pose.translation)?)
}

#[cfg(test)]
mod tests {
    use deepicp_autodiff::gradcheck::{check_params, random_head, CheckConfig};
    use deepicp_autodiff::ParameterStore;
    use deepicp_core::{angular_error, translational_error, RigidTransform};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_motion(rng: &mut ChaCha8Rng) -> RigidTransform {
        let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let t = Vector3::new(rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0));
        RigidTransform::from_axis_angle(axis, rng.gen_range(-3.0..3.0), t)
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize, motion: &RigidTransform) -> CorrespondenceSet {
        let source: Vec<Vector3<f64>> = (0..n)
            .map(|_| Vector3::new(rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0), rng.gen_range(-3.0..3.0)))
            .collect();
        let target = source.iter().map(|p| motion.apply_point(p)).collect();
        let weights = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
        CorrespondenceSet::new(source, target, weights).unwrap()
    }

    #[test]
    fn exact_pairs_recover_the_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let motion = random_motion(&mut rng);
            let n = rng.gen_range(3..=64);
            let set = random_set(&mut rng, n, &motion);
            let t = weighted_kabsch(&set).unwrap().transform;
            assert!(angular_error(t.rotation(), motion.rotation()) <= 1e-7);
            let e = translational_error(t.translation(), motion.translation());
            assert!(e <= 1e-9, "n {n}: {e:e}");
        }
    }

    #[test]
    fn identical_sets_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let set = random_set(&mut rng, 10, &RigidTransform::identity());
        let t = weighted_kabsch(&set).unwrap().transform;
        assert!((t.rotation() - Matrix3::identity()).amax() < 1e-12);
        assert!(t.translation().amax() < 1e-12);
    }

    #[test]
    fn weights_are_scale_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let motion = random_motion(&mut rng);
            let mut set = random_set(&mut rng, 12, &motion);
            for y in &mut set.target {
                *y += Vector3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
            }
            let base = weighted_kabsch(&set).unwrap().transform;
            let c = rng.gen_range(1e-3..1e3);
            let scaled = CorrespondenceSet::new(
                set.source.clone(),
                set.target.clone(),
                set.weights.iter().map(|w| w * c).collect(),
            )
            .unwrap();
            let other = weighted_kabsch(&scaled).unwrap().transform;
            assert!((base.to_matrix() - other.to_matrix()).amax() <= 1e-12);
        }
    }

    #[test]
    fn construction_validates_inputs() {
        let p = vec![Vector3::zeros(); 3];
        assert!(CorrespondenceSet::new(p.clone(), p.clone(), vec![1.0, 0.0, 1.0]).is_err());
        assert!(CorrespondenceSet::new(p.clone(), p[..2].to_vec(), vec![1.0; 3]).is_err());
        assert!(CorrespondenceSet::new(p[..2].to_vec(), p[..2].to_vec(), vec![1.0; 2]).is_err());
        let set = CorrespondenceSet::new(p.clone(), p, vec![1.0, 2.0, 1.0]).unwrap();
        assert_eq!(set.weights, vec![0.25, 0.5, 0.25]);
    }

    #[test]
    fn pooling_renormalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_set(&mut rng, 4, &RigidTransform::identity());
        let b = random_set(&mut rng, 6, &RigidTransform::identity());
        let pooled = a.pooled(&b).unwrap();
        assert_eq!(pooled.len(), 10);
        assert!((pooled.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((pooled.weights[0] / pooled.weights[4] - a.weights[0] / b.weights[0]).abs() < 1e-12);
    }

    fn graph_solve(set: &CorrespondenceSet) -> (Matrix3<f64>, Vector3<f64>, bool) {
        let mut g = Graph::new();
        let x = g.constant(positions_tensor(&set.source));
        let y = g.constant(positions_tensor(&set.target));
        let w = g.constant(Tensor::new(vec![set.len()], set.weights.clone()).unwrap());
        let pose = kabsch_graph(&mut g, x, y, w).unwrap();
        let (r, t) = pose.values(&g);
        (r, t, pose.reflection_corrected)
    }

    #[test]
    fn graph_solve_matches_plain_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let motion = random_motion(&mut rng);
            let n = rng.gen_range(3..30);
            let mut set = random_set(&mut rng, n, &motion);
            for y in &mut set.target {
                *y += Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            }
            let plain = weighted_kabsch(&set).unwrap();
            let (r, t, flipped) = graph_solve(&set);
            assert!((r - plain.transform.rotation()).amax() <= 1e-9);
            assert!((t - plain.transform.translation()).amax() <= 1e-9);
            // three points span a plane, so the flip direction is arbitrary
            if n > 3 {
                assert_eq!(flipped, plain.reflection_corrected);
            }
        }
    }

    #[test]
    fn graph_solve_corrects_reflections() {
        let source = vec![
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 2.0, 0.0),
            Vector3::new(-1.0, 0.0, 0.0),
            Vector3::new(0.0, -2.0, 0.1),
        ];
        let target: Vec<Vector3<f64>> = source.iter().map(|p| Vector3::new(p.x, p.y, -p.z)).collect();
        let set = CorrespondenceSet::new(source, target, vec![1.0; 4]).unwrap();
        let (r, _, flipped) = graph_solve(&set);
        assert!(flipped);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gradients_reach_points_and_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let motion = random_motion(&mut rng);
        let set = random_set(&mut rng, 8, &motion);
        let noisy: Vec<Vector3<f64>> = set
            .target
            .iter()
            .map(|p| p + Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let mut store = ParameterStore::new();
        store.insert("y", positions_tensor(&noisy), true).unwrap();
        store.insert("w", Tensor::new(vec![8], set.weights.clone()).unwrap(), true).unwrap();
        let head: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let source = set.source.clone();
        let report = check_params(
            &store,
            &["y", "w"],
            |g, s| {
                let x = g.constant(positions_tensor(&source));
                let y = g.param(s, "y")?;
                let w = g.param(s, "w")?;
                let pose = kabsch_graph(g, x, y, w).map_err(|e| match e {
                    NetError::Autodiff(a) => a,
                    other => panic!("{other}"),
                })?;
                let r = random_head(g, pose.rotation, &head[..9])?;
                let t = random_head(g, pose.translation, &head[9..])?;
                g.add(r, t)
            },
            CheckConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }
}
