//! Neighborhood embedding: a mini-PointNet over the radius-`d`
//! neighborhood of a location, normalized by `d`.

use deepicp_autodiff::{Graph, GroupedMlpSpec, ParameterStore, Tensor, Var};
use deepicp_core::{GeomError, SpatialIndex, Vector3};
use rand::Rng;

use crate::featnet::{interpolation_weights, FeatureCloud};
use crate::layers::{init_mlp, mlp_params, positions_tensor, relu_mlp};
use crate::{NetError, Result};

/// Which columns make up a neighborhood row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DfeInput {
    /// Local coordinates, intensity and the extractor descriptor.
    Full,
    /// Local coordinates and intensity only.
    LocalOnly,
    /// Extractor descriptor only.
    FeatureOnly,
    /// No embedding network: descriptors are interpolated from the extractor
    /// output at the query location.
    Bypass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DFEConfig {
    pub radius: f64,
    pub cap: usize,
    pub widths: Vec<usize>,
    pub input: DfeInput,
}

impl Default for DFEConfig {
    fn default() -> Self {
        Self {
            radius: 1.0,
            cap: 32,
            widths: vec![32, 32, 32],
            input: DfeInput::Full,
        }
    }
}

impl DFEConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0)
            || self.cap == 0
            || self.widths.is_empty()
            || self.widths.contains(&0)
        {
            return Err(NetError::Config(format!(
                "invalid embedding config {self:?}"
            )));
        }
        Ok(())
    }

    pub fn row_width(&self, feature_width: usize) -> usize {
        match self.input {
            DfeInput::Full => 4 + feature_width,
            DfeInput::LocalOnly => 4,
            DfeInput::FeatureOnly | DfeInput::Bypass => feature_width,
        }
    }

    pub fn out_width(&self, feature_width: usize) -> usize {
        match self.input {
            DfeInput::Bypass => feature_width,
            _ => *self.widths.last().expect("validated non-empty"),
        }
    }
}

/// `K` rows of network input for one location. An empty window is a zero
/// block with `empty` set.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodBlock {
    pub rows: Tensor,
    pub empty: bool,
}

pub(crate) fn init_dfe(
    store: &mut ParameterStore,
    prefix: &str,
    config: &DFEConfig,
    feature_width: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    config.validate()?;
    if config.input != DfeInput::Bypass {
        init_mlp(
            store,
            prefix,
            config.row_width(feature_width),
            &config.widths,
            rng,
        )?;
    }
    Ok(())
}

fn row(config: &DFEConfig, offset: &Vector3<f64>, intensity: f64, feature: &[f64]) -> Vec<f64> {
    let local = offset / config.radius;
    let mut r = Vec::with_capacity(4 + feature.len());
    if matches!(config.input, DfeInput::Full | DfeInput::LocalOnly) {
        r.extend_from_slice(&[local.x, local.y, local.z, intensity]);
    }
    if matches!(
        config.input,
        DfeInput::Full | DfeInput::FeatureOnly | DfeInput::Bypass
    ) {
        r.extend_from_slice(feature);
    }
    r
}

/// Collects up to `cap` neighbors of `center` within the radius, expressed
/// relative to `center` and divided by the radius, padded by duplication.
pub fn gather_neighborhood(
    cloud: &FeatureCloud,
    index: &SpatialIndex,
    center: &Vector3<f64>,
    config: &DFEConfig,
) -> Result<NeighborhoodBlock> {
    config.validate()?;
    let width = config.row_width(cloud.descriptors.last_dim());
    match index.radius_neighbors(center, config.radius, config.cap) {
        Ok(neighbors) => {
            let data = neighbors
                .iter()
                .flat_map(|&i| {
                    row(
                        config,
                        &(cloud.positions[i] - center),
                        cloud.intensities[i],
                        cloud.descriptors.row(i),
                    )
                })
                .collect();
            Ok(NeighborhoodBlock {
                rows: Tensor::new(vec![config.cap, width], data)?,
                empty: false,
            })
        }
        Err(GeomError::EmptyNeighborhood { .. }) => Ok(NeighborhoodBlock {
            rows: Tensor::zeros(&[config.cap, width]),
            empty: true,
        }),
        Err(e) => Err(e.into()),
    }
}

/// Shared per-row ReLU MLP and channel-wise max over the block's rows.
/// Returns `[out]`.
pub fn dfe_forward(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    config: &DFEConfig,
    block: &NeighborhoodBlock,
) -> Result<Var> {
    let x = g.constant(block.rows.clone());
    let h = relu_mlp(g, store, prefix, config.widths.len(), x)?;
    Ok(g.max_pool_set(h)?)
}

/// Point cloud side of a batched embedding: geometry plus extractor
/// descriptors `[P, c]` living in the graph.
pub struct EmbeddingSource<'a> {
    pub positions: &'a [Vector3<f64>],
    pub intensities: &'a [f64],
    pub index: &'a SpatialIndex,
    pub features: Var,
}

/// Descriptors `[G, out]` for every location in `centers`, plus the number
/// of empty windows.
pub fn embed_locations(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    config: &DFEConfig,
    source: &EmbeddingSource<'_>,
    centers: &[Vector3<f64>],
) -> Result<(Var, usize)> {
    if config.input == DfeInput::Bypass {
        let weights = interpolation_weights(source.index, centers);
        return Ok((g.weighted_rows(source.features, weights)?, 0));
    }
    let mut groups = Vec::with_capacity(centers.len());
    let mut empty = 0;
    for c in centers {
        match source.index.radius_neighbors(c, config.radius, config.cap) {
            Ok(n) => groups.push(n),
            Err(GeomError::EmptyNeighborhood { .. }) => {
                empty += 1;
                groups.push(Vec::new());
            }
            Err(e) => return Err(e.into()),
        }
    }
    let n = source.positions.len();
    let mut point_parts = Vec::new();
    let mut relative = 0;
    if matches!(config.input, DfeInput::Full | DfeInput::LocalOnly) {
        let mut joined = Vec::with_capacity(n * 4);
        for (p, &i) in source.positions.iter().zip(source.intensities) {
            joined.extend_from_slice(&[p.x, p.y, p.z, i]);
        }
        point_parts.push(g.constant(Tensor::new(vec![n, 4], joined)?));
        relative = 3;
    }
    if matches!(config.input, DfeInput::Full | DfeInput::FeatureOnly) {
        point_parts.push(source.features);
    }
    let point_in = if point_parts.len() == 1 {
        point_parts[0]
    } else {
        g.concat(&point_parts)?
    };
    let center_in = if relative > 0 {
        g.constant(positions_tensor(centers))
    } else {
        g.constant(Tensor::zeros(&[centers.len(), 0]))
    };
    let layers = mlp_params(g, store, prefix, config.widths.len())?;
    let spec = GroupedMlpSpec {
        groups,
        layers,
        relative,
        divisor: config.radius,
    };
    Ok((g.grouped_mlp_max(point_in, center_in, spec)?, empty))
}
