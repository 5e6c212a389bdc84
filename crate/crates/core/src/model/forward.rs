//! The full forward pass: feature assembly, node-to-node encoder,
//! edge-to-node decoder, relation head and predicate logits.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, ParamBinding};
use crate::data::SceneRecord;
use crate::embed::{
    edge_feature_row, edge_positional_matrix, node_feature_row, node_positional_encoding,
    node_positions, EmbedConfig,
};
use crate::embedding::{stable_seed, EmbeddingTable};
use crate::error::{Error, Result};
use crate::freq::FrequencyTable;
use crate::matrix::Matrix;

use super::params::{
    AttnIds, ModelConfig, RelationHeadIds, RtnParams, LAYER_NORM_EPS, LEAKY_SLOPE,
};

/// Evaluation pipeline flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Ground-truth boxes and labels; predict predicates only.
    PredCls,
    /// Ground-truth boxes; predict labels and predicates.
    SgCls,
    /// Detected boxes; predict everything.
    SgDet,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::PredCls => "predcls",
            Mode::SgCls => "sgcls",
            Mode::SgDet => "sgdet",
        }
    }

    pub fn from_name(name: &str) -> Option<Mode> {
        match name {
            "predcls" => Some(Mode::PredCls),
            "sgcls" => Some(Mode::SgCls),
            "sgdet" => Some(Mode::SgDet),
            _ => None,
        }
    }
}

/// Model wiring: parameters plus everything needed to assemble features.
pub struct RtnModel<'a> {
    pub params: &'a RtnParams,
    pub embed: &'a EmbedConfig,
    pub model: &'a ModelConfig,
    pub table: &'a EmbeddingTable,
    pub fq: Option<&'a FrequencyTable>,
}

/// Forward results still attached to the computation graph, for training.
pub struct ForwardGraph {
    pub graph: Graph,
    pub binding: ParamBinding,
    pub object_logits: NodeId,
    pub relation_logits: NodeId,
    pub node_final: NodeId,
    pub edge_final: NodeId,
    /// Ordered candidate pairs, row-aligned with `relation_logits`.
    pub pairs: Vec<(usize, usize)>,
    /// Undirected edges (i < j), row-aligned with `edge_final`.
    pub edges: Vec<(usize, usize)>,
    pub positions: Vec<usize>,
    /// Class pair used (or usable) for the frequency bias, per candidate.
    pub fq_class_pairs: Vec<(usize, usize)>,
    pub enc_attention: Vec<Vec<NodeId>>,
    pub dec_attention: Vec<Vec<NodeId>>,
}

/// Detached forward values for evaluation and inspection.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub object_logits: Matrix,
    pub relation_logits: Matrix,
    pub node_final: Matrix,
    pub edge_final: Matrix,
    pub pairs: Vec<(usize, usize)>,
    pub edges: Vec<(usize, usize)>,
    pub positions: Vec<usize>,
    pub fq_class_pairs: Vec<(usize, usize)>,
    pub enc_attention: Vec<Vec<Matrix>>,
    pub dec_attention: Vec<Vec<Matrix>>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Scaled dot-product attention split over heads; returns the projected
/// output and one weight matrix per head.
pub(crate) fn multi_head_attention(
    g: &mut Graph,
    query_in: NodeId,
    kv_in: NodeId,
    ids: &AttnIds,
    binding: &ParamBinding,
    heads: usize,
) -> Result<(NodeId, Vec<NodeId>)> {
    let d = g.value(query_in).cols();
    debug_assert_eq!(d % heads, 0);
    let d_k = d / heads;
    let scale = 1.0 / (d_k as f64).sqrt();
    let q = g.matmul(query_in, binding.node(ids.wq))?;
    let k = g.matmul(kv_in, binding.node(ids.wk))?;
    let v = g.matmul(kv_in, binding.node(ids.wv))?;
    let mut contexts = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * d_k, d_k);
        let kh = g.slice_cols(k, h * d_k, d_k);
        let vh = g.slice_cols(v, h * d_k, d_k);
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt)?;
        let weights = g.softmax_rows(scores, scale);
        contexts.push(g.matmul(weights, vh)?);
        maps.push(weights);
    }
    let concat = g.concat_cols(&contexts)?;
    let out = g.matmul(concat, binding.node(ids.wo))?;
    Ok((out, maps))
}

struct SublayerCtx<'a> {
    dropout: f64,
    rng: &'a mut ChaCha8Rng,
}

fn residual_norm(
    g: &mut Graph,
    x: NodeId,
    sub: NodeId,
    norm: &super::params::NormIds,
    binding: &ParamBinding,
    ctx: &mut SublayerCtx,
) -> Result<NodeId> {
    let dropped = g.dropout(sub, ctx.dropout, ctx.rng);
    let added = g.add(x, dropped)?;
    Ok(g.layer_norm(
        added,
        binding.node(norm.gain),
        binding.node(norm.bias),
        LAYER_NORM_EPS,
    ))
}

fn feed_forward(
    g: &mut Graph,
    x: NodeId,
    ffn: &super::params::FfnIds,
    binding: &ParamBinding,
) -> Result<NodeId> {
    let h = g.matmul(x, binding.node(ffn.w1))?;
    let h = g.leaky_relu(h, LEAKY_SLOPE);
    g.matmul(h, binding.node(ffn.w2))
}

impl<'a> RtnModel<'a> {
    fn resolved_positions(&self, scene: &SceneRecord) -> Vec<usize> {
        let mut positions = node_positions(&scene.nodes);
        if self.model.shuffle_positions {
            // per-scene deterministic shuffle for ordering-sensitivity runs
            let mut rng = ChaCha8Rng::seed_from_u64(stable_seed(&["shuffle", &scene.id]));
            let n = positions.len();
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = rand::Rng::gen_range(&mut rng, 0..=i);
                perm.swap(i, j);
            }
            for p in &mut positions {
                *p = perm[*p];
            }
        }
        positions
    }

    /// Build the full computation graph for one scene over the supplied
    /// ordered candidate pairs.
    pub fn forward(
        &self,
        scene: &SceneRecord,
        pairs: &[(usize, usize)],
        mode: Mode,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardGraph> {
        let n = scene.nodes.len();
        if n == 0 {
            return Err(Error::Usage("scene has no nodes".into()));
        }
        if n > self.embed.max_nodes {
            return Err(Error::Config(format!(
                "scene has {n} nodes, max_nodes is {}",
                self.embed.max_nodes
            )));
        }
        if self.model.use_freq_bias && self.fq.is_none() {
            return Err(Error::Config(
                "use_freq_bias requires a frequency table".into(),
            ));
        }
        for &(i, j) in pairs {
            if i >= n || j >= n {
                return Err(Error::Index {
                    what: "candidate pair node",
                    index: i.max(j),
                    size: n,
                });
            }
            if i == j {
                return Err(Error::Usage(format!("candidate pair ({i}, {i}) is a self-loop")));
            }
        }

        let mut g = Graph::new(training);
        let binding = ParamBinding::bind(&mut g, &self.params.set);
        let mut ctx = SublayerCtx {
            dropout: self.model.dropout,
            rng,
        };

        // semantic features use ground-truth one-hots in PREDCLS
        let one_hot = |class: usize| {
            let mut v = vec![0.0; self.table.num_classes()];
            v[class] = 1.0;
            v
        };
        let probs_of = |idx: usize| -> Vec<f64> {
            match mode {
                Mode::PredCls => one_hot(scene.nodes[idx].gt_class),
                _ => scene.nodes[idx].class_probs.clone(),
            }
        };

        let positions = self.resolved_positions(scene);

        // ---- node inputs + encoder ----
        let mut node_feats = Matrix::zeros(n, self.embed.node_feature_width());
        let mut pos_enc = Matrix::zeros(n, self.embed.d_model);
        for (i, &position) in positions.iter().enumerate() {
            let row = node_feature_row(
                &scene.nodes[i],
                &probs_of(i),
                self.table,
                self.model.use_semantic,
                self.model.use_spatial,
            );
            node_feats.row_mut(i).copy_from_slice(&row);
            let pe = node_positional_encoding(position, self.embed)?;
            pos_enc.row_mut(i).copy_from_slice(&pe);
        }
        // embeddings are scaled by sqrt(d_model) before the positional
        // encoding is added, per the cited transformer recipe; without it
        // the unit-amplitude sinusoids drown the projected features
        let embed_scale = (self.embed.d_model as f64).sqrt();
        let feats_leaf = g.leaf(node_feats);
        let node_proj = g.matmul(feats_leaf, binding.node(self.params.w_node))?;
        let node_in = g.scale(node_proj, embed_scale);
        let pos_leaf = g.leaf(pos_enc);
        let mut x = g.add(node_in, pos_leaf)?;

        let mut enc_attention = Vec::with_capacity(self.model.enc_layers);
        for layer in &self.params.enc {
            let (attn, maps) =
                multi_head_attention(&mut g, x, x, &layer.attn, &binding, self.model.heads)?;
            enc_attention.push(maps);
            x = residual_norm(&mut g, x, attn, &layer.norm1, &binding, &mut ctx)?;
            let ffn = feed_forward(&mut g, x, &layer.ffn, &binding)?;
            x = residual_norm(&mut g, x, ffn, &layer.norm2, &binding, &mut ctx)?;
        }
        let node_final = x;
        let object_logits = g.matmul(node_final, binding.node(self.params.w_classifier))?;

        // ---- undirected edges + decoder ----
        let edge_set: BTreeSet<(usize, usize)> = pairs
            .iter()
            .map(|&(i, j)| (i.min(j), i.max(j)))
            .collect();
        let edges: Vec<(usize, usize)> = edge_set.into_iter().collect();

        let mut edge_feats = Matrix::zeros(edges.len(), self.embed.edge_feature_width());
        for (row, &(i, j)) in edges.iter().enumerate() {
            let feat = edge_feature_row(
                scene,
                i,
                j,
                &probs_of(i),
                &probs_of(j),
                self.table,
                self.model.use_semantic,
                self.model.use_spatial,
            )?;
            edge_feats.row_mut(row).copy_from_slice(&feat);
        }
        let edge_pe = edge_positional_matrix(&edges, &positions, self.model.pe_variant, self.embed)?;
        let edge_feats_leaf = g.leaf(edge_feats);
        let edge_proj = g.matmul(edge_feats_leaf, binding.node(self.params.w_edge))?;
        let edge_in = g.scale(edge_proj, embed_scale);
        let edge_pe_leaf = g.leaf(edge_pe);
        let mut e = g.add(edge_in, edge_pe_leaf)?;

        let mut dec_attention = Vec::with_capacity(self.model.dec_layers);
        for layer in &self.params.dec {
            if let Some(self_ids) = &layer.self_attn {
                let (sa, _maps) =
                    multi_head_attention(&mut g, e, e, self_ids, &binding, self.model.heads)?;
                let dropped = g.dropout(sa, ctx.dropout, ctx.rng);
                e = g.add(e, dropped)?;
            }
            let (cross, maps) =
                multi_head_attention(&mut g, e, node_final, &layer.cross, &binding, self.model.heads)?;
            dec_attention.push(maps);
            e = residual_norm(&mut g, e, cross, &layer.norm1, &binding, &mut ctx)?;
            let ffn = feed_forward(&mut g, e, &layer.ffn, &binding)?;
            e = residual_norm(&mut g, e, ffn, &layer.norm2, &binding, &mut ctx)?;
        }
        let edge_final = e;

        // ---- relation head over directed candidates ----
        let edge_index: std::collections::BTreeMap<(usize, usize), usize> = edges
            .iter()
            .enumerate()
            .map(|(idx, &e)| (e, idx))
            .collect();
        let subj_idx: Vec<usize> = pairs.iter().map(|&(i, _)| i).collect();
        let obj_idx: Vec<usize> = pairs.iter().map(|&(_, j)| j).collect();
        let edge_rows: Vec<usize> = pairs
            .iter()
            .map(|&(i, j)| edge_index[&(i.min(j), i.max(j))])
            .collect();

        let subj = g.gather_rows(node_final, subj_idx);
        let obj = g.gather_rows(node_final, obj_idx);
        let edge_part = g.gather_rows(edge_final, edge_rows);
        let gap_row = if self.model.use_gap {
            Matrix::row_vector(scene.global_feature.clone())
        } else {
            Matrix::zeros(1, self.embed.g_dim)
        };
        if gap_row.cols() != self.embed.g_dim {
            return Err(Error::Config(format!(
                "global feature has length {}, g_dim is {}",
                gap_row.cols(),
                self.embed.g_dim
            )));
        }
        let gap_leaf = g.leaf(gap_row);
        let gap = g.gather_rows(gap_leaf, vec![0; pairs.len()]);
        let rel_in = g.concat_cols(&[subj, edge_part, obj, gap])?;

        let rel_final = match &self.params.relation_head {
            RelationHeadIds::Rpm { norm, w1, w2 } => {
                let normed = g.layer_norm(
                    rel_in,
                    binding.node(norm.gain),
                    binding.node(norm.bias),
                    LAYER_NORM_EPS,
                );
                let h = g.matmul(normed, binding.node(*w1))?;
                let h = g.dropout(h, ctx.dropout, ctx.rng);
                let h = g.matmul(h, binding.node(*w2))?;
                g.leaky_relu(h, LEAKY_SLOPE)
            }
            RelationHeadIds::Direct { w } => g.matmul(rel_in, binding.node(*w))?,
        };
        let mut relation_logits = g.matmul(rel_final, binding.node(self.params.w_p))?;

        // class pair per candidate for the frequency bias
        let fq_class_pairs: Vec<(usize, usize)> = pairs
            .iter()
            .map(|&(i, j)| {
                let class_of = |idx: usize| match mode {
                    Mode::PredCls => scene.nodes[idx].gt_class,
                    Mode::SgCls | Mode::SgDet => {
                        if training {
                            scene.nodes[idx].gt_class
                        } else {
                            argmax(g.value(object_logits).row(idx))
                        }
                    }
                };
                (class_of(i), class_of(j))
            })
            .collect();

        if self.model.use_freq_bias && !self.model.fq_post_softmax && !pairs.is_empty() {
            let fq = self.fq.expect("checked above");
            let mut bias = Matrix::zeros(pairs.len(), fq.num_predicates());
            for (row, &(c_s, c_o)) in fq_class_pairs.iter().enumerate() {
                bias.row_mut(row).copy_from_slice(fq.logits(c_s, c_o));
            }
            if bias.cols() != g.value(relation_logits).cols() {
                return Err(Error::Dim {
                    op: "frequency bias",
                    lhs: g.value(relation_logits).shape(),
                    rhs: bias.shape(),
                });
            }
            let bias_leaf = g.leaf(bias);
            relation_logits = g.add(relation_logits, bias_leaf)?;
        }

        Ok(ForwardGraph {
            graph: g,
            binding,
            object_logits,
            relation_logits,
            node_final,
            edge_final,
            pairs: pairs.to_vec(),
            edges,
            positions,
            fq_class_pairs,
            enc_attention,
            dec_attention,
        })
    }

    /// Evaluation-mode forward returning detached values.
    pub fn run(&self, scene: &SceneRecord, pairs: &[(usize, usize)], mode: Mode) -> Result<ForwardOutput> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fg = self.forward(scene, pairs, mode, false, &mut rng)?;
        let g = &fg.graph;
        Ok(ForwardOutput {
            object_logits: g.value(fg.object_logits).clone(),
            relation_logits: g.value(fg.relation_logits).clone(),
            node_final: g.value(fg.node_final).clone(),
            edge_final: g.value(fg.edge_final).clone(),
            pairs: fg.pairs,
            edges: fg.edges,
            positions: fg.positions,
            fq_class_pairs: fg.fq_class_pairs,
            enc_attention: fg
                .enc_attention
                .iter()
                .map(|layer| layer.iter().map(|&id| g.value(id).clone()).collect())
                .collect(),
            dec_attention: fg
                .dec_attention
                .iter()
                .map(|layer| layer.iter().map(|&id| g.value(id).clone()).collect())
                .collect(),
        })
    }
}

/// Row-wise softmax of detached logits.
pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
