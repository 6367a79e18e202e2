//! Parameter initialization and single-stage forward passes.

use deepicp_autodiff::{Graph, ParameterStore, Tensor};
use deepicp_core::{PointCloud, RigidTransform, SpatialIndex, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cpg::{cost_volume, generate_points, init_cpg, CpgConfig, GridKind};
use crate::dfe::{embed_locations, init_dfe, DFEConfig, EmbeddingSource};
use crate::featnet::{fe_forward, init_fe, FEConfig, FeGeometry};
use crate::kabsch::{kabsch_graph, CorrespondenceSet, PoseVars};
use crate::layers::positions_tensor;
use crate::loss::LossConfig;
use crate::saliency::{
    init_weighting, select_keypoints, weighting_forward, KeypointSet, WeightingConfig,
};
use crate::{Mode, NetError, Result};

#[derive(Debug, Clone, PartialEq)]
#[derive(Default)]
pub struct DeepIcpConfig {
    pub fe: FEConfig,
    pub weighting: WeightingConfig,
    pub dfe: DFEConfig,
    pub cpg: CpgConfig,
    pub loss: LossConfig,
    /// Seeds parameter initialization.
    pub seed: u64,
}


impl DeepIcpConfig {
    /// Reduced configuration for clouds of a few thousand points on a CPU.
    pub fn toy() -> Self {
        let mut fe = FEConfig::scaled(16).expect("16 divides the default level sizes");
        fe.group_cap = 16;
        Self {
            fe,
            weighting: WeightingConfig {
                hidden: vec![16, 8],
                keypoints: 16,
            },
            dfe: DFEConfig {
                cap: 16,
                ..DFEConfig::default()
            },
            cpg: CpgConfig {
                grid: crate::cpg::GridConfig {
                    r_xy: 1.2,
                    s_xy: 0.4,
                    r_z: 1.2,
                    s_z: 0.4,
                },
                channels: vec![16, 4, 1],
            },
            loss: LossConfig::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.fe.validate()?;
        self.weighting.validate()?;
        self.dfe.validate()?;
        self.cpg.validate()?;
        self.loss.validate()
    }
}

/// Front stage searches a 3D lattice; back stage refines along z only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Front,
    Back,
}

impl Stage {
    pub fn prefix(self) -> &'static str {
        match self {
            Stage::Front => "front",
            Stage::Back => "back",
        }
    }

    pub fn grid_kind(self) -> GridKind {
        match self {
            Stage::Front => GridKind::Volume,
            Stage::Back => GridKind::Column,
        }
    }
}

/// A cloud with its spatial index and cached extractor geometry.
pub struct PreparedCloud {
    pub cloud: PointCloud,
    pub index: SpatialIndex,
    pub geometry: FeGeometry,
}

impl PreparedCloud {
    pub fn new(cloud: PointCloud, config: &FEConfig) -> Result<Self> {
        let geometry = FeGeometry::build(&cloud, config)?;
        let index = SpatialIndex::build(&cloud)?;
        Ok(Self {
            cloud,
            index,
            geometry,
        })
    }
}

/// Everything one stage produced, with graph handles for training.
pub struct StageOutput {
    pub keypoints: KeypointSet,
    /// Keypoints under the stage's prior: the candidate lattice centers.
    pub centers: Vec<Vector3<f64>>,
    /// `[N, 3]`.
    pub generated: deepicp_autodiff::Var,
    /// Normalized keypoint weights `[N]`.
    pub weights: deepicp_autodiff::Var,
    /// Softmax over candidates `[N, C]`.
    pub probs: deepicp_autodiff::Var,
    pub pose: PoseVars,
    /// Candidate windows with no target point.
    pub empty_windows: usize,
}

impl StageOutput {
    pub fn generated_points(&self, g: &Graph) -> Vec<Vector3<f64>> {
        g.value(self.generated)
            .data()
            .chunks(3)
            .map(|r| Vector3::new(r[0], r[1], r[2]))
            .collect()
    }

    pub fn correspondences(&self, g: &Graph) -> Result<CorrespondenceSet> {
        CorrespondenceSet::new(
            self.keypoints.positions.clone(),
            self.generated_points(g),
            g.value(self.weights).data().to_vec(),
        )
    }

    /// The solved pose, re-projected onto SO(3) to absorb rounding.
    pub fn transform(&self, g: &Graph) -> Result<RigidTransform> {
        let (r, t) = self.pose.values(g);
        Ok(RigidTransform::new_orthonormalized(r, t)?.0)
    }
}

/// Network parameters plus configuration.
pub struct DeepIcp {
    pub config: DeepIcpConfig,
    pub store: ParameterStore,
}

impl DeepIcp {
    pub fn new(config: DeepIcpConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParameterStore::new();
        init_fe(&mut store, &config.fe, &mut rng)?;
        let feat = config.fe.out_width;
        let desc = config.dfe.out_width(feat);
        for stage in [Stage::Front, Stage::Back] {
            let p = stage.prefix();
            init_weighting(
                &mut store,
                &format!("{p}.weight"),
                &config.weighting,
                feat,
                &mut rng,
            )?;
            init_dfe(&mut store, &format!("{p}.dfe"), &config.dfe, feat, &mut rng)?;
            init_cpg(
                &mut store,
                &format!("{p}.cpg"),
                &config.cpg,
                stage.grid_kind(),
                desc,
                &mut rng,
            )?;
        }
        Ok(Self { config, store })
    }

    pub fn prepare(&self, cloud: PointCloud) -> Result<PreparedCloud> {
        PreparedCloud::new(cloud, &self.config.fe)
    }

    /// Extractor descriptors `[N, 32]` for a prepared cloud.
    pub fn features(
        &self,
        g: &mut Graph,
        cloud: &PreparedCloud,
        mode: &mut Mode<'_>,
    ) -> Result<deepicp_autodiff::Var> {
        fe_forward(g, &self.store, &self.config.fe, &cloud.geometry, mode)
    }

    /// One registration stage from `prior`. `train` switches the weighting
    /// layer's batch norm to batch statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn stage(
        &mut self,
        g: &mut Graph,
        stage: Stage,
        source: &PreparedCloud,
        source_features: deepicp_autodiff::Var,
        target: &PreparedCloud,
        target_features: deepicp_autodiff::Var,
        prior: &RigidTransform,
        train: bool,
    ) -> Result<StageOutput> {
        let p = stage.prefix();
        let kind = stage.grid_kind();
        let cfg = self.config.clone();

        let scores = weighting_forward(
            g,
            &mut self.store,
            &format!("{p}.weight"),
            &cfg.weighting,
            source_features,
            train,
        )?;
        let positions = source.geometry.positions();
        let keypoints =
            select_keypoints(g.value(scores).data(), positions, cfg.weighting.keypoints)?;
        let selected = g.gather_rows(scores, keypoints.indices.clone())?;
        let selected = g.reshape(selected, &[keypoints.indices.len()])?;
        let total = g.sum(selected);
        let weights = g.div_scalar(selected, total)?;

        let source_ctx = EmbeddingSource {
            positions,
            intensities: source.geometry.intensities(),
            index: &source.index,
            features: source_features,
        };
        let (source_desc, _) = embed_locations(
            g,
            &self.store,
            &format!("{p}.dfe"),
            &cfg.dfe,
            &source_ctx,
            &keypoints.positions,
        )?;

        let offsets = cfg.cpg.grid.offsets(kind)?;
        let centers: Vec<Vector3<f64>> = keypoints
            .positions
            .iter()
            .map(|x| prior.apply_point(x))
            .collect();
        let candidates: Vec<Vector3<f64>> = centers
            .iter()
            .flat_map(|c| offsets.iter().map(move |o| c + o))
            .collect();
        let target_ctx = EmbeddingSource {
            positions: target.geometry.positions(),
            intensities: target.geometry.intensities(),
            index: &target.index,
            features: target_features,
        };
        let (candidate_desc, empty_windows) = embed_locations(
            g,
            &self.store,
            &format!("{p}.dfe"),
            &cfg.dfe,
            &target_ctx,
            &candidates,
        )?;

        let logits = cost_volume(
            g,
            &self.store,
            &format!("{p}.cpg"),
            &cfg.cpg,
            kind,
            source_desc,
            candidate_desc,
        )?;
        let probs = g.softmax(logits);
        let center_var = g.constant(positions_tensor(&centers));
        let generated = generate_points(g, probs, center_var, &offsets)?;
        let x = g.constant(positions_tensor(&keypoints.positions));
        let pose = kabsch_graph(g, x, generated, weights)?;
        if !g.value(generated).is_finite() {
            return Err(NetError::InvalidArgument(
                "non-finite generated points".into(),
            ));
        }
        Ok(StageOutput {
            keypoints,
            centers,
            generated,
            weights,
            probs,
            pose,
            empty_windows,
        })
    }

    /// Current parameter values, for checkpointing.
    pub fn parameters(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.store.values()
    }
}
