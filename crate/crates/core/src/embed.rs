//! Initial node and edge feature assembly plus positional encodings.
//!
//! Node features concatenate (visual, semantic, box) before a bias-free
//! linear projection; edge features concatenate (union visual, both
//! semantics, union box). The edge positional encoding interleaves the two
//! endpoint positions: four-entry blocks hold [sin p_i, cos p_i, sin p_j,
//! cos p_j] with one shared frequency per block.

use crate::data::{NodeRecord, SceneRecord};
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::geometry::union_box;
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbedConfig {
    /// Model width; must be divisible by 4 and by the head count.
    pub d_model: usize,
    /// Maximum length of the node sequence; also the sinusoid base.
    pub max_nodes: usize,
    pub v_dim: usize,
    pub e_dim: usize,
    pub g_dim: usize,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            d_model: 64,
            max_nodes: 64,
            v_dim: 128,
            e_dim: 32,
            g_dim: 32,
        }
    }
}

impl EmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || !self.d_model.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "d_model must be a positive multiple of 4, got {}",
                self.d_model
            )));
        }
        if self.max_nodes < 2 {
            return Err(Error::Config("max_nodes must be at least 2".into()));
        }
        Ok(())
    }

    pub fn node_feature_width(&self) -> usize {
        self.v_dim + self.e_dim + 4
    }

    pub fn edge_feature_width(&self) -> usize {
        self.v_dim + 2 * self.e_dim + 4
    }
}

/// Which positional encoding edge queries receive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeVariant {
    /// Interleaved endpoint sinusoids, one frequency per 4-block.
    Interleaved,
    /// Interleaved endpoint sinusoids with the frequency advancing every
    /// sin/cos pair.
    Dense,
    /// Standard node-style sinusoid of the edge's own sequence index.
    NodeStyle,
    /// Zero vector.
    None,
}

impl PeVariant {
    pub fn name(self) -> &'static str {
        match self {
            PeVariant::Interleaved => "interleaved",
            PeVariant::Dense => "dense",
            PeVariant::NodeStyle => "node-style",
            PeVariant::None => "none",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "interleaved" => Some(PeVariant::Interleaved),
            "dense" => Some(PeVariant::Dense),
            "node-style" => Some(PeVariant::NodeStyle),
            "none" => Some(PeVariant::None),
            _ => None,
        }
    }
}

/// Single code path for every sin/cos pair: prevents the compiler from
/// fusing adjacent calls into `sincos` at some call sites but not others,
/// which would break the bit-exact swap symmetry of the edge encoding.
#[inline(never)]
fn sin_cos_pair(angle: f64) -> (f64, f64) {
    (angle.sin(), angle.cos())
}

/// Standard sinusoid with base `max_nodes`: entry 2k holds
/// sin(pos / m^(2k/d)) and entry 2k+1 the matching cosine.
pub fn node_positional_encoding(position: usize, cfg: &EmbedConfig) -> Result<Vec<f64>> {
    if position >= cfg.max_nodes {
        return Err(Error::Index {
            what: "node position",
            index: position,
            size: cfg.max_nodes,
        });
    }
    let d = cfg.d_model;
    let m = cfg.max_nodes as f64;
    let mut out = vec![0.0; d];
    for pair in 0..d / 2 {
        let even = 2 * pair;
        let angle = position as f64 / m.powf(even as f64 / d as f64);
        (out[even], out[even + 1]) = sin_cos_pair(angle);
    }
    Ok(out)
}

/// Interleaved edge positional encoding over both endpoint positions.
///
/// For block offsets k in {0, 4, 8, ...}: entries (k, k+1) are the sin/cos of
/// p_i and entries (k+2, k+3) the sin/cos of p_j, all at frequency
/// 1/m^(2k/d). The dense variant advances the frequency exponent every
/// sin/cos pair instead of every block.
pub fn edge_positional_encoding(
    p_i: usize,
    p_j: usize,
    variant: PeVariant,
    cfg: &EmbedConfig,
) -> Result<Vec<f64>> {
    for p in [p_i, p_j] {
        if p >= cfg.max_nodes {
            return Err(Error::Index {
                what: "edge endpoint position",
                index: p,
                size: cfg.max_nodes,
            });
        }
    }
    let d = cfg.d_model;
    let m = cfg.max_nodes as f64;
    let mut out = vec![0.0; d];
    match variant {
        PeVariant::Interleaved => {
            let mut k = 0;
            while k + 3 < d {
                let divisor = m.powf(2.0 * k as f64 / d as f64);
                (out[k], out[k + 1]) = sin_cos_pair(p_i as f64 / divisor);
                (out[k + 2], out[k + 3]) = sin_cos_pair(p_j as f64 / divisor);
                k += 4;
            }
        }
        PeVariant::Dense => {
            // pair t covers entries (2t, 2t+1); even pairs encode p_i, odd
            // pairs p_j, each at the node-formula frequency for pair t
            for t in 0..d / 2 {
                let divisor = m.powf(2.0 * (2 * t) as f64 / d as f64);
                let pos = if t % 2 == 0 { p_i } else { p_j };
                (out[2 * t], out[2 * t + 1]) = sin_cos_pair(pos as f64 / divisor);
            }
        }
        PeVariant::NodeStyle | PeVariant::None => {
            unreachable!("caller resolves node-style/none before endpoint encoding")
        }
    }
    Ok(out)
}

/// Positional encodings for a list of undirected edges, honoring the
/// configured variant. `positions` maps node index to sequence position;
/// `edges` are (i, j) node-index pairs.
pub fn edge_positional_matrix(
    edges: &[(usize, usize)],
    positions: &[usize],
    variant: PeVariant,
    cfg: &EmbedConfig,
) -> Result<Matrix> {
    let mut out = Matrix::zeros(edges.len(), cfg.d_model);
    for (row, &(i, j)) in edges.iter().enumerate() {
        let pe = match variant {
            PeVariant::None => vec![0.0; cfg.d_model],
            PeVariant::NodeStyle => node_positional_encoding(row.min(cfg.max_nodes - 1), cfg)?,
            PeVariant::Interleaved | PeVariant::Dense => {
                edge_positional_encoding(positions[i], positions[j], variant, cfg)?
            }
        };
        out.row_mut(row).copy_from_slice(&pe);
    }
    Ok(out)
}

/// Sequence positions: rank of each node under (descending max detector
/// probability, then ascending x1, then record index). The returned vector
/// maps node index to position.
pub fn node_positions(nodes: &[NodeRecord]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..nodes.len()).collect();
    order.sort_by(|&a, &b| {
        let pa = nodes[a].max_prob_class().1;
        let pb = nodes[b].max_prob_class().1;
        pb.partial_cmp(&pa)
            .expect("finite probabilities")
            .then(
                nodes[a]
                    .bbox
                    .x1
                    .partial_cmp(&nodes[b].bbox.x1)
                    .expect("finite coordinates"),
            )
            .then(a.cmp(&b))
    });
    let mut positions = vec![0; nodes.len()];
    for (rank, &idx) in order.iter().enumerate() {
        positions[idx] = rank;
    }
    positions
}

/// Raw (pre-projection) node feature row: [visual; semantic; box].
/// `class_probs` selects the semantic mixture; callers substitute a
/// ground-truth one-hot in PREDCLS mode.
pub fn node_feature_row(
    node: &NodeRecord,
    class_probs: &[f64],
    table: &EmbeddingTable,
    use_semantic: bool,
    use_spatial: bool,
) -> Vec<f64> {
    let mut row = Vec::with_capacity(node.visual.len() + table.dim() + 4);
    row.extend_from_slice(&node.visual);
    if use_semantic {
        row.extend_from_slice(&table.semantic_feature(class_probs));
    } else {
        row.extend(std::iter::repeat_n(0.0, table.dim()));
    }
    if use_spatial {
        row.extend_from_slice(&node.bbox.coords());
    } else {
        row.extend_from_slice(&[0.0; 4]);
    }
    row
}

/// Raw (pre-projection) edge feature row for the undirected pair (i, j):
/// [mean of endpoint visuals; s_i; s_j; union box]. The union-box visual is
/// approximated by the elementwise mean of the endpoint visuals.
#[allow(clippy::too_many_arguments)]
pub fn edge_feature_row(
    scene: &SceneRecord,
    i: usize,
    j: usize,
    probs_i: &[f64],
    probs_j: &[f64],
    table: &EmbeddingTable,
    use_semantic: bool,
    use_spatial: bool,
) -> Result<Vec<f64>> {
    if i == j {
        return Err(Error::Usage(format!("edge endpoints must differ, got ({i}, {j})")));
    }
    let a = &scene.nodes[i];
    let b = &scene.nodes[j];
    let mut row = Vec::with_capacity(a.visual.len() + 2 * table.dim() + 4);
    row.extend(a.visual.iter().zip(&b.visual).map(|(x, y)| (x + y) / 2.0));
    if use_semantic {
        row.extend_from_slice(&table.semantic_feature(probs_i));
        row.extend_from_slice(&table.semantic_feature(probs_j));
    } else {
        row.extend(std::iter::repeat_n(0.0, 2 * table.dim()));
    }
    if use_spatial {
        row.extend_from_slice(&union_box(&a.bbox, &b.bbox).coords());
    } else {
        row.extend_from_slice(&[0.0; 4]);
    }
    Ok(row)
}
