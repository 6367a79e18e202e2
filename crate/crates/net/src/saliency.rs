//! Point weighting: per-point positive saliency and top-N keypoint selection.

use deepicp_autodiff::{Graph, ParameterStore, Var};
use deepicp_core::Vector3;
use rand::Rng;

use crate::layers::{batch_norm, init_batch_norm, init_linear, linear};
use crate::{NetError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct WeightingConfig {
    /// Hidden widths; a final width-1 softplus layer follows.
    pub hidden: Vec<usize>,
    pub keypoints: usize,
}

impl Default for WeightingConfig {
    fn default() -> Self {
        Self {
            hidden: vec![16, 8],
            keypoints: 64,
        }
    }
}

impl WeightingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.keypoints < 3 {
            return Err(NetError::Config(format!(
                "{} keypoints, need at least 3",
                self.keypoints
            )));
        }
        if self.hidden.contains(&0) {
            return Err(NetError::Config("weighting widths must be positive".into()));
        }
        Ok(())
    }
}

/// Selected keypoints in descending score order.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    pub indices: Vec<usize>,
    pub positions: Vec<Vector3<f64>>,
    pub weights: Vec<f64>,
}

pub(crate) fn init_weighting(
    store: &mut ParameterStore,
    prefix: &str,
    config: &WeightingConfig,
    fan_in: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    config.validate()?;
    let mut width = fan_in;
    for (i, &w) in config.hidden.iter().enumerate() {
        init_linear(store, &format!("{prefix}.l{i}"), width, w, rng)?;
        init_batch_norm(store, &format!("{prefix}.bn{i}"), w)?;
        width = w;
    }
    init_linear(
        store,
        &format!("{prefix}.l{}", config.hidden.len()),
        width,
        1,
        rng,
    )
}

/// Scores `[N, 1]` for descriptors `[N, c]`: (linear, batch norm, ReLU) per
/// hidden layer, then linear + softplus. Batch statistics are used and the
/// running averages updated when `train` is set.
pub fn weighting_forward(
    g: &mut Graph,
    store: &mut ParameterStore,
    prefix: &str,
    config: &WeightingConfig,
    descriptors: Var,
    train: bool,
) -> Result<Var> {
    let mut h = descriptors;
    for i in 0..config.hidden.len() {
        h = linear(g, store, &format!("{prefix}.l{i}"), h)?;
        h = batch_norm(g, store, &format!("{prefix}.bn{i}"), h, train)?;
        h = g.relu(h);
    }
    let out = linear(g, store, &format!("{prefix}.l{}", config.hidden.len()), h)?;
    Ok(g.softplus(out))
}

/// Indices of the `n` largest scores, descending; equal scores keep index
/// order.
pub fn select_topk(scores: &[f64], n: usize) -> Result<Vec<usize>> {
    if n > scores.len() {
        return Err(NetError::TooFewPoints {
            got: scores.len(),
            need: n,
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(n);
    Ok(order)
}

/// Top-`n` selection packaged with positions and score values.
pub fn select_keypoints(
    scores: &[f64],
    positions: &[Vector3<f64>],
    n: usize,
) -> Result<KeypointSet> {
    if scores.len() != positions.len() {
        return Err(NetError::InvalidArgument(format!(
            "{} scores for {} points",
            scores.len(),
            positions.len()
        )));
    }
    let indices = select_topk(scores, n)?;
    Ok(KeypointSet {
        positions: indices.iter().map(|&i| positions[i]).collect(),
        weights: indices.iter().map(|&i| scores[i]).collect(),
        indices,
    })
}

#[cfg(test)]
mod tests {
    use deepicp_autodiff::gradcheck::{check_params, random_head, CheckConfig};
    use deepicp_autodiff::{Tensor, BN_EPS};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::layers::reference;

    fn setup(seed: u64, rows: usize) -> (ParameterStore, Tensor, WeightingConfig) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = WeightingConfig {
            hidden: vec![6, 4],
            keypoints: 3,
        };
        let mut store = ParameterStore::new();
        init_weighting(&mut store, "w", &config, 5, &mut rng).unwrap();
        let names: Vec<String> = store
            .names()
            .filter(|n| n.ends_with(".b") || n.ends_with("beta"))
            .map(str::to_string)
            .collect();
        for n in names {
            for x in store.value_mut(&n).unwrap().data_mut() {
                *x = rng.gen_range(-0.2..0.3);
            }
        }
        let desc = Tensor::new(
            vec![rows, 5],
            (0..rows * 5).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        (store, desc, config)
    }

    #[test]
    fn inference_scores_match_plain_evaluation() {
        let (mut store, desc, config) = setup(1, 7);
        let mut g = Graph::new();
        let x = g.constant(desc.clone());
        let y = weighting_forward(&mut g, &mut store, "w", &config, x, false).unwrap();
        assert_eq!(g.value(y).shape(), &[7, 1]);
        let bn = |h: Vec<f64>, i: usize| -> Vec<f64> {
            let gamma = store.value(&format!("w.bn{i}.gamma")).unwrap().data();
            let beta = store.value(&format!("w.bn{i}.beta")).unwrap().data();
            let stats = store.running_stats(&format!("w.bn{i}")).unwrap();
            h.iter()
                .enumerate()
                .map(|(c, v)| {
                    (gamma[c] * (v - stats.mean[c]) / (stats.var[c] + BN_EPS).sqrt() + beta[c])
                        .max(0.0)
                })
                .collect()
        };
        for r in 0..7 {
            let h = bn(reference::linear(&store, "w.l0", desc.row(r)), 0);
            let h = bn(reference::linear(&store, "w.l1", &h), 1);
            let z = reference::linear(&store, "w.l2", &h)[0];
            let want = z.exp().ln_1p();
            let got = g.value(y).data()[r];
            assert!(got > 0.0);
            assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn training_pass_updates_running_statistics() {
        let (mut store, desc, config) = setup(2, 9);
        let before = store.running_stats("w.bn0").unwrap();
        let mut g = Graph::new();
        let x = g.constant(desc);
        weighting_forward(&mut g, &mut store, "w", &config, x, true).unwrap();
        assert_ne!(store.running_stats("w.bn0").unwrap(), before);
    }

    #[test]
    fn scores_are_positive_for_extreme_inputs() {
        let (mut store, _, config) = setup(3, 1);
        let desc = Tensor::new(
            vec![2, 5],
            vec![1e3, -1e3, 5e2, 0.0, 1e3, -1e3, 1e3, -5e2, 0.0, -1e3],
        )
        .unwrap();
        let mut g = Graph::new();
        let x = g.constant(desc);
        let y = weighting_forward(&mut g, &mut store, "w", &config, x, false).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v > 0.0 && v.is_finite()));
    }

    fn unwrap_net(e: NetError) -> deepicp_autodiff::AutodiffError {
        match e {
            NetError::Autodiff(a) => a,
            other => panic!("{other}"),
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let (store, desc, config) = setup(4, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let head: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for train in [false, true] {
            // under batch statistics a bias feeding batch norm cancels exactly
            let cancelled = |n: &str| train && (n == "w.l0.b" || n == "w.l1.b");
            let names: Vec<String> = store
                .names()
                .filter(|n| store.is_trainable(n) && !cancelled(n))
                .map(str::to_string)
                .collect();
            let names: Vec<&str> = names.iter().map(String::as_str).collect();
            let build = |g: &mut Graph, s: &ParameterStore| {
                let mut s = s.clone();
                let x = g.constant(desc.clone());
                let y = weighting_forward(g, &mut s, "w", &config, x, train).map_err(unwrap_net)?;
                random_head(g, y, &head)
            };
            let report =
                check_params(&store, &names, build, CheckConfig::default(), &mut rng).unwrap();
            assert!(report.max_rel_error <= 1e-5, "train {train}: {report:?}");
            if train {
                let mut work = store.clone();
                let mut g = Graph::new();
                let loss = build(&mut g, &work).unwrap();
                g.backward(loss, &mut work).unwrap();
                for n in ["w.l0.b", "w.l1.b"] {
                    assert!(work.grad(n).unwrap().iter().all(|v| v.abs() <= 1e-12));
                }
            }
        }
    }

    #[test]
    fn descriptor_gradients_match_finite_differences() {
        let (mut store, desc, config) = setup(6, 10);
        store.insert("x", desc, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let head: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for train in [false, true] {
            let report = check_params(
                &store,
                &["x"],
                |g, s| {
                    let mut s = s.clone();
                    let x = g.param(&s, "x")?;
                    let y =
                        weighting_forward(g, &mut s, "w", &config, x, train).map_err(unwrap_net)?;
                    random_head(g, y, &head)
                },
                CheckConfig::default(),
                &mut rng,
            )
            .unwrap();
            assert!(report.max_rel_error <= 1e-5, "train {train}: {report:?}");
        }
    }

    #[test]
    fn picks_largest_in_order() {
        assert_eq!(select_topk(&[0.1, 0.9, 0.5], 2).unwrap(), vec![1, 2]);
    }

    #[test]
    fn ties_keep_index_order() {
        assert_eq!(select_topk(&[0.3; 5], 2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn too_many_requested() {
        assert!(select_topk(&[1.0, 2.0], 3).is_err());
    }

    proptest! {
        #[test]
        fn matches_stable_sort(scores in prop::collection::vec(0u8..20, 1..60), frac in 0.0f64..1.0) {
            let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
            let n = ((scores.len() as f64) * frac) as usize;
            let mut pairs: Vec<(f64, usize)> = scores.iter().copied().zip(0..).collect();
            // Stable sort on negated score keeps the original order of ties.
            pairs.sort_by(|a, b| (-a.0).partial_cmp(&-b.0).unwrap());
            let expected: Vec<usize> = pairs.iter().take(n).map(|p| p.1).collect();
            prop_assert_eq!(select_topk(&scores, n).unwrap(), expected);
        }

        #[test]
        fn raising_a_selected_score_keeps_it(
            scores in prop::collection::vec(0.0f64..1.0, 3..40),
            pick in 0usize..100,
            delta in 1e-6f64..1.0,
        ) {
            let n = scores.len() / 2 + 1;
            let chosen = select_topk(&scores, n).unwrap();
            let target = chosen[pick % chosen.len()];
            let mut raised = scores.clone();
            raised[target] += delta;
            prop_assert!(select_topk(&raised, n).unwrap().contains(&target));
        }
    }
}
