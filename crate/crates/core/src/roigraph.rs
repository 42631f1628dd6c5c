//! Deterministic RoI relational graph.
//!
//! Nodes carry a box-derived centroid and volume, mean CT/PET intensities and
//! an externally supplied feature vector. An undirected edge joins two RoIs
//! when their centroids are closer than `tau_d` or their features have cosine
//! above `tau_s`; it is stored once per direction. Each directed edge carries
//!
//! - spatial features `[d_ij, r_ij.x, r_ij.y, r_ij.z, v_i / v_j]`
//! - morphological features `[s_ij, ct_i, pet_i, ct_j, pet_j]`
//!
//! and the export also includes the concatenation `[h_i, h_j, spatial,
//! morphological]` for a downstream learned edge model.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::BoundingBox3D;
use crate::embedding::cosine_slices;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("graph needs at least one node")]
    NoNodes,
    #[error("node {node} has feature dimension {found}, expected {expected}")]
    FeatureDimension {
        node: usize,
        expected: usize,
        found: usize,
    },
    #[error("node {0} has an empty or zero feature vector")]
    DegenerateFeature(usize),
    #[error("degenerate bounding box: volume {0}")]
    DegenerateBox(f64),
    #[error("{modality} subvolume shape {shape:?} does not match bounding box extents {extents:?}")]
    SubvolumeShape {
        modality: &'static str,
        shape: [usize; 3],
        extents: [f64; 3],
    },
    #[error("{modality} subvolume holds {found} values, shape needs {expected}")]
    SubvolumeLength {
        modality: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("self-loop requested for node {0}")]
    SelfLoop(usize),
    #[error("node index {index} out of range for {count} nodes")]
    NodeIndex { index: usize, count: usize },
    #[error("invalid graph config: {0}")]
    Config(String),
    #[error("feature sidecar: {0}")]
    Sidecar(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Voxel values of one modality inside a box, x fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subvolume {
    pub shape: [usize; 3],
    pub values: Vec<f64>,
}

impl Subvolume {
    pub fn constant(shape: [usize; 3], value: f64) -> Self {
        Subvolume {
            shape,
            values: vec![value; shape.iter().product()],
        }
    }

    fn mean_within(&self, bbox: &BoundingBox3D, modality: &'static str) -> Result<f64, GraphError> {
        let extents = bbox.extents();
        let fits = self
            .shape
            .iter()
            .zip(extents)
            .all(|(&s, e)| (s as f64 - e).abs() < 1e-9);
        if !fits {
            return Err(GraphError::SubvolumeShape {
                modality,
                shape: self.shape,
                extents,
            });
        }
        let expected: usize = self.shape.iter().product();
        if self.values.len() != expected {
            return Err(GraphError::SubvolumeLength {
                modality,
                expected,
                found: self.values.len(),
            });
        }
        Ok(self.values.iter().sum::<f64>() / expected as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoINode {
    pub feature: Vec<f64>,
    pub bbox: BoundingBox3D,
    pub centroid: [f64; 3],
    pub volume: f64,
    pub mean_intensity_ct: f64,
    pub mean_intensity_pet: f64,
}

/// Build a node from its box, feature vector and optional CT/PET voxels.
/// Intensities default to 0 when no voxels are supplied.
pub fn derive_node(
    bbox: BoundingBox3D,
    feature: Vec<f64>,
    ct: Option<&Subvolume>,
    pet: Option<&Subvolume>,
) -> Result<RoINode, GraphError> {
    let volume = bbox.volume();
    if volume.is_nan() || volume <= 0.0 {
        return Err(GraphError::DegenerateBox(volume));
    }
    let mean_intensity_ct = ct.map_or(Ok(0.0), |v| v.mean_within(&bbox, "CT"))?;
    let mean_intensity_pet = pet.map_or(Ok(0.0), |v| v.mean_within(&bbox, "PET"))?;
    Ok(RoINode {
        feature,
        centroid: bbox.center(),
        volume,
        bbox,
        mean_intensity_ct,
        mean_intensity_pet,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub tau_d: f64,
    pub tau_s: f64,
}

impl GraphConfig {
    pub fn new(tau_d: f64, tau_s: f64) -> Result<Self, GraphError> {
        if !(tau_d > 0.0 && tau_d.is_finite()) {
            return Err(GraphError::Config(format!("tau_d must be positive, got {tau_d}")));
        }
        if !(-1.0..=1.0).contains(&tau_s) {
            return Err(GraphError::Config(format!("tau_s must lie in [-1, 1], got {tau_s}")));
        }
        Ok(GraphConfig { tau_d, tau_s })
    }
}

/// Raw features of the directed pair `i -> j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeFeatures {
    pub distance: f64,
    pub direction: [f64; 3],
    pub volume_ratio: f64,
    pub feature_similarity: f64,
    /// Set when the centroids coincide and `direction` is the zero vector.
    pub coincident: bool,
    pub spatial_features: [f64; 5],
    pub morphological_features: [f64; 5],
}

fn check_index(index: usize, count: usize) -> Result<(), GraphError> {
    if index < count {
        Ok(())
    } else {
        Err(GraphError::NodeIndex { index, count })
    }
}

pub fn edge_features(nodes: &[RoINode], i: usize, j: usize) -> Result<EdgeFeatures, GraphError> {
    check_index(i, nodes.len())?;
    check_index(j, nodes.len())?;
    if i == j {
        return Err(GraphError::SelfLoop(i));
    }
    let (a, b) = (&nodes[i], &nodes[j]);
    let delta = [
        b.centroid[0] - a.centroid[0],
        b.centroid[1] - a.centroid[1],
        b.centroid[2] - a.centroid[2],
    ];
    let distance = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
    let coincident = distance == 0.0;
    let direction = if coincident {
        [0.0; 3]
    } else {
        delta.map(|d| d / distance)
    };
    let volume_ratio = a.volume / b.volume;
    let feature_similarity = cosine_slices(&a.feature, &b.feature).map_err(|_| {
        if a.feature.len() != b.feature.len() {
            GraphError::FeatureDimension {
                node: j,
                expected: a.feature.len(),
                found: b.feature.len(),
            }
        } else {
            GraphError::DegenerateFeature(i)
        }
    })?;
    Ok(EdgeFeatures {
        distance,
        direction,
        volume_ratio,
        feature_similarity,
        coincident,
        spatial_features: [distance, direction[0], direction[1], direction[2], volume_ratio],
        morphological_features: [
            feature_similarity,
            a.mean_intensity_ct,
            a.mean_intensity_pet,
            b.mean_intensity_ct,
            b.mean_intensity_pet,
        ],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoIEdge {
    pub i: usize,
    pub j: usize,
    #[serde(flatten)]
    pub features: EdgeFeatures,
    /// `[h_i, h_j, spatial_features, morphological_features]`.
    pub concat_input: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoIGraph {
    pub nodes: Vec<RoINode>,
    pub edges: Vec<RoIEdge>,
    pub config: GraphConfig,
}

impl RoIGraph {
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().filter(move |e| e.i == i).map(|e| e.j)
    }
}

/// Connect every pair with `distance < tau_d` or `similarity > tau_s`.
/// Edges come out sorted by `(i, j)`, both directions present.
pub fn build_graph(nodes: Vec<RoINode>, config: GraphConfig) -> Result<RoIGraph, GraphError> {
    if nodes.is_empty() {
        return Err(GraphError::NoNodes);
    }
    let dim = nodes[0].feature.len();
    for (k, node) in nodes.iter().enumerate() {
        if node.feature.len() != dim {
            return Err(GraphError::FeatureDimension {
                node: k,
                expected: dim,
                found: node.feature.len(),
            });
        }
        if node.feature.iter().all(|&x| x == 0.0) {
            return Err(GraphError::DegenerateFeature(k));
        }
    }

    let mut edges = Vec::new();
    for i in 0..nodes.len() {
        for j in 0..nodes.len() {
            if i == j {
                continue;
            }
            let features = edge_features(&nodes, i, j)?;
            if features.distance < config.tau_d || features.feature_similarity > config.tau_s {
                let concat_input = nodes[i]
                    .feature
                    .iter()
                    .chain(&nodes[j].feature)
                    .chain(&features.spatial_features)
                    .chain(&features.morphological_features)
                    .copied()
                    .collect();
                edges.push(RoIEdge {
                    i,
                    j,
                    features,
                    concat_input,
                });
            }
        }
    }
    Ok(RoIGraph {
        nodes,
        edges,
        config,
    })
}

/// Node description as read from a nodes file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub bbox: BoundingBox3D,
    #[serde(default)]
    pub feature: Option<Vec<f64>>,
    #[serde(default)]
    pub ct: Option<Subvolume>,
    #[serde(default)]
    pub pet: Option<Subvolume>,
}

/// Read a feature sidecar: little-endian `u32` node count, `u32` dimension,
/// then `count * dimension` little-endian `f32` values, row-major.
pub fn read_feature_sidecar(mut reader: impl Read) -> Result<Vec<Vec<f64>>, GraphError> {
    let mut header = [0u8; 8];
    reader
        .read_exact(&mut header)
        .map_err(|e| GraphError::Sidecar(format!("truncated header: {e}")))?;
    let count = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let mut body = Vec::new();
    reader.read_to_end(&mut body)?;
    if body.len() != count * dim * 4 {
        return Err(GraphError::Sidecar(format!(
            "header announces {count} x {dim} floats ({} bytes), body has {} bytes",
            count * dim * 4,
            body.len()
        )));
    }
    let floats: Vec<f64> = body
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
        .collect();
    if dim == 0 {
        return Ok(vec![Vec::new(); count]);
    }
    Ok(floats.chunks(dim).map(<[f64]>::to_vec).collect())
}

pub fn write_feature_sidecar(mut writer: impl Write, features: &[Vec<f32>]) -> Result<(), GraphError> {
    let dim = features.first().map_or(0, Vec::len);
    if let Some(bad) = features.iter().position(|f| f.len() != dim) {
        return Err(GraphError::FeatureDimension {
            node: bad,
            expected: dim,
            found: features[bad].len(),
        });
    }
    writer.write_all(&(features.len() as u32).to_le_bytes())?;
    writer.write_all(&(dim as u32).to_le_bytes())?;
    for row in features {
        for x in row {
            writer.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Turn node specs plus optional sidecar features into graph nodes. A
/// sidecar, when given, must cover every node and takes precedence.
pub fn nodes_from_specs(
    specs: &[NodeSpec],
    sidecar: Option<Vec<Vec<f64>>>,
) -> Result<Vec<RoINode>, GraphError> {
    if let Some(features) = &sidecar {
        if features.len() != specs.len() {
            return Err(GraphError::Sidecar(format!(
                "{} feature rows for {} nodes",
                features.len(),
                specs.len()
            )));
        }
    }
    specs
        .iter()
        .enumerate()
        .map(|(k, spec)| {
            let feature = match &sidecar {
                Some(rows) => rows[k].clone(),
                None => spec.feature.clone().ok_or(GraphError::DegenerateFeature(k))?,
            };
            derive_node(spec.bbox, feature, spec.ct.as_ref(), spec.pet.as_ref())
        })
        .collect()
}

pub fn load_sidecar(path: &Path) -> Result<Vec<Vec<f64>>, GraphError> {
    read_feature_sidecar(std::io::BufReader::new(std::fs::File::open(path)?))
}
