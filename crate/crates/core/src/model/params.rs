//! Trainable parameters: construction, Xavier-normal initialization, the
//! closed-form scalar count, and the versioned checkpoint container.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{ParamId, ParamSet};
use crate::embed::{EmbedConfig, PeVariant};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const LEAKY_SLOPE: f64 = 0.01;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    /// Ablation: prepend a self-attention sublayer to each decoder layer.
    pub decoder_self_attention: bool,
    pub pe_variant: PeVariant,
    pub use_rpm: bool,
    pub use_freq_bias: bool,
    pub use_gap: bool,
    pub use_semantic: bool,
    pub use_spatial: bool,
    /// Score with softmax(logits) + fq probabilities instead of folding the
    /// frequency bias into the logits.
    pub fq_post_softmax: bool,
    /// Randomize the node sequence order (per-scene deterministic shuffle)
    /// for ordering-sensitivity studies.
    pub shuffle_positions: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            heads: 4,
            enc_layers: 3,
            dec_layers: 2,
            ffn_dim: 256,
            dropout: 0.25,
            decoder_self_attention: false,
            pe_variant: PeVariant::Interleaved,
            use_rpm: true,
            use_freq_bias: true,
            use_gap: true,
            use_semantic: true,
            use_spatial: true,
            fq_post_softmax: false,
            shuffle_positions: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, embed: &EmbedConfig) -> Result<()> {
        embed.validate()?;
        if self.heads == 0 || !embed.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by heads {}",
                embed.d_model, self.heads
            )));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(Error::Config("need at least one encoder and decoder layer".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0,1), got {}", self.dropout)));
        }
        Ok(())
    }

    /// Apply one `key=value` override; used by ablation sweeps and the
    /// run-configuration loader.
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("invalid {what} value `{value}` for `{key}`"));
        match key {
            "heads" => self.heads = value.parse().map_err(|_| bad("integer"))?,
            "enc_layers" => self.enc_layers = value.parse().map_err(|_| bad("integer"))?,
            "dec_layers" => self.dec_layers = value.parse().map_err(|_| bad("integer"))?,
            "ffn_dim" => self.ffn_dim = value.parse().map_err(|_| bad("integer"))?,
            "dropout" => self.dropout = value.parse().map_err(|_| bad("real"))?,
            "decoder_self_attention" => {
                self.decoder_self_attention = value.parse().map_err(|_| bad("boolean"))?
            }
            "pe_variant" => {
                self.pe_variant = PeVariant::from_name(value).ok_or_else(|| bad("variant"))?
            }
            "use_rpm" => self.use_rpm = value.parse().map_err(|_| bad("boolean"))?,
            "use_freq_bias" => self.use_freq_bias = value.parse().map_err(|_| bad("boolean"))?,
            "use_gap" => self.use_gap = value.parse().map_err(|_| bad("boolean"))?,
            "use_semantic" => self.use_semantic = value.parse().map_err(|_| bad("boolean"))?,
            "use_spatial" => self.use_spatial = value.parse().map_err(|_| bad("boolean"))?,
            "fq_post_softmax" => {
                self.fq_post_softmax = value.parse().map_err(|_| bad("boolean"))?
            }
            "shuffle_positions" => {
                self.shuffle_positions = value.parse().map_err(|_| bad("boolean"))?
            }
            _ => return Err(Error::Config(format!("unknown model flag `{key}`"))),
        }
        Ok(())
    }

    /// Canonical `key=value` rendering of the ablation-relevant flags.
    pub fn flag_string(&self) -> String {
        format!(
            "decoder_self_attention={},pe_variant={},use_rpm={},use_freq_bias={},use_gap={},use_semantic={},use_spatial={}",
            self.decoder_self_attention,
            self.pe_variant.name(),
            self.use_rpm,
            self.use_freq_bias,
            self.use_gap,
            self.use_semantic,
            self.use_spatial
        )
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttnIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct FfnIds {
    pub w1: ParamId,
    pub w2: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct NormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct EncLayerIds {
    pub attn: AttnIds,
    pub ffn: FfnIds,
    pub norm1: NormIds,
    pub norm2: NormIds,
}

#[derive(Debug, Clone)]
pub struct DecLayerIds {
    /// Present only when the decoder-self-attention ablation is enabled;
    /// adds exactly the four projection matrices.
    pub self_attn: Option<AttnIds>,
    pub cross: AttnIds,
    pub ffn: FfnIds,
    pub norm1: NormIds,
    pub norm2: NormIds,
}

#[derive(Debug, Clone)]
pub enum RelationHeadIds {
    /// LayerNorm -> W1 -> dropout -> W2 -> LeakyReLU.
    Rpm {
        norm: NormIds,
        w1: ParamId,
        w2: ParamId,
    },
    /// Single linear map, no normalization (RPM-off ablation).
    Direct { w: ParamId },
}

#[derive(Debug, Clone)]
pub struct RtnParams {
    pub set: ParamSet,
    pub w_node: ParamId,
    pub w_edge: ParamId,
    pub enc: Vec<EncLayerIds>,
    pub dec: Vec<DecLayerIds>,
    pub w_classifier: ParamId,
    pub relation_head: RelationHeadIds,
    pub w_p: ParamId,
}

/// Width of the relation head input [f_i; f_ij; f_j; global].
pub fn relation_input_width(embed: &EmbedConfig) -> usize {
    3 * embed.d_model + embed.g_dim
}

fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid std");
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = dist.sample(rng);
    }
    m
}

impl RtnParams {
    pub fn init(
        embed: &EmbedConfig,
        model: &ModelConfig,
        num_classes: usize,
        num_predicates: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        model.validate(embed)?;
        let d = embed.d_model;
        let f = model.ffn_dim;
        let mut set = ParamSet::new();
        let linear = |set: &mut ParamSet, name: String, rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            set.push(name, xavier(rows, cols, rng))
        };
        let attn = |set: &mut ParamSet, prefix: &str, rng: &mut ChaCha8Rng| AttnIds {
            wq: set.push(format!("{prefix}.wq"), xavier(d, d, rng)),
            wk: set.push(format!("{prefix}.wk"), xavier(d, d, rng)),
            wv: set.push(format!("{prefix}.wv"), xavier(d, d, rng)),
            wo: set.push(format!("{prefix}.wo"), xavier(d, d, rng)),
        };
        let norm = |set: &mut ParamSet, prefix: &str, width: usize| NormIds {
            gain: set.push(format!("{prefix}.gain"), Matrix::filled(1, width, 1.0)),
            bias: set.push(format!("{prefix}.bias"), Matrix::zeros(1, width)),
        };

        let w_node = linear(&mut set, "w_node".into(), embed.node_feature_width(), d, rng);
        let w_edge = linear(&mut set, "w_edge".into(), embed.edge_feature_width(), d, rng);

        let mut enc = Vec::with_capacity(model.enc_layers);
        for l in 0..model.enc_layers {
            let p = format!("enc{l}");
            enc.push(EncLayerIds {
                attn: attn(&mut set, &format!("{p}.attn"), rng),
                ffn: FfnIds {
                    w1: linear(&mut set, format!("{p}.ffn.w1"), d, f, rng),
                    w2: linear(&mut set, format!("{p}.ffn.w2"), f, d, rng),
                },
                norm1: norm(&mut set, &format!("{p}.norm1"), d),
                norm2: norm(&mut set, &format!("{p}.norm2"), d),
            });
        }

        let mut dec = Vec::with_capacity(model.dec_layers);
        for l in 0..model.dec_layers {
            let p = format!("dec{l}");
            let self_attn = model
                .decoder_self_attention
                .then(|| attn(&mut set, &format!("{p}.self_attn"), rng));
            dec.push(DecLayerIds {
                self_attn,
                cross: attn(&mut set, &format!("{p}.cross"), rng),
                ffn: FfnIds {
                    w1: linear(&mut set, format!("{p}.ffn.w1"), d, f, rng),
                    w2: linear(&mut set, format!("{p}.ffn.w2"), f, d, rng),
                },
                norm1: norm(&mut set, &format!("{p}.norm1"), d),
                norm2: norm(&mut set, &format!("{p}.norm2"), d),
            });
        }

        let w_classifier = linear(&mut set, "w_classifier".into(), d, num_classes, rng);

        let rel_in = relation_input_width(embed);
        let relation_head = if model.use_rpm {
            RelationHeadIds::Rpm {
                norm: norm(&mut set, "rpm.norm", rel_in),
                w1: linear(&mut set, "rpm.w1".into(), rel_in, 2 * d, rng),
                w2: linear(&mut set, "rpm.w2".into(), 2 * d, d, rng),
            }
        } else {
            RelationHeadIds::Direct {
                w: linear(&mut set, "rpm.direct".into(), rel_in, d, rng),
            }
        };

        let w_p = linear(&mut set, "w_p".into(), d, num_predicates, rng);

        Ok(RtnParams {
            set,
            w_node,
            w_edge,
            enc,
            dec,
            w_classifier,
            relation_head,
            w_p,
        })
    }
}

/// Documented closed form for the total trainable scalar count.
pub fn expected_scalar_count(
    embed: &EmbedConfig,
    model: &ModelConfig,
    num_classes: usize,
    num_predicates: usize,
) -> usize {
    let d = embed.d_model;
    let f = model.ffn_dim;
    let rel_in = relation_input_width(embed);
    let attn = 4 * d * d;
    let enc_layer = attn + 2 * d * f + 4 * d;
    let dec_layer = enc_layer + if model.decoder_self_attention { attn } else { 0 };
    let head = if model.use_rpm {
        2 * rel_in + rel_in * 2 * d + 2 * d * d
    } else {
        rel_in * d
    };
    embed.node_feature_width() * d
        + embed.edge_feature_width() * d
        + model.enc_layers * enc_layer
        + model.dec_layers * dec_layer
        + d * num_classes
        + head
        + d * num_predicates
}

// ---------------------------------------------------------------------------
// Checkpoint container
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &str = "sgg-checkpoint v1";

#[derive(Debug)]
pub struct Checkpoint {
    pub embed: EmbedConfig,
    pub model: ModelConfig,
    pub num_classes: usize,
    pub num_predicates: usize,
    pub vocab_hash: String,
    pub params: RtnParams,
}

fn bool_str(v: bool) -> &'static str {
    if v {
        "true"
    } else {
        "false"
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let display = path.display().to_string();
    let file = fs::File::create(path).map_err(|e| Error::io(&display, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut emit = |line: String| -> Result<()> {
        writeln!(w, "{line}").map_err(|e| Error::io(&display, e))
    };
    emit(CHECKPOINT_MAGIC.to_string())?;
    emit(format!("vocab_hash {}", ckpt.vocab_hash))?;
    let e = &ckpt.embed;
    let m = &ckpt.model;
    for (k, v) in [
        ("d_model", e.d_model.to_string()),
        ("max_nodes", e.max_nodes.to_string()),
        ("v_dim", e.v_dim.to_string()),
        ("e_dim", e.e_dim.to_string()),
        ("g_dim", e.g_dim.to_string()),
        ("heads", m.heads.to_string()),
        ("enc_layers", m.enc_layers.to_string()),
        ("dec_layers", m.dec_layers.to_string()),
        ("ffn_dim", m.ffn_dim.to_string()),
        ("dropout", format!("{:.16e}", m.dropout)),
        ("decoder_self_attention", bool_str(m.decoder_self_attention).to_string()),
        ("pe_variant", m.pe_variant.name().to_string()),
        ("use_rpm", bool_str(m.use_rpm).to_string()),
        ("use_freq_bias", bool_str(m.use_freq_bias).to_string()),
        ("use_gap", bool_str(m.use_gap).to_string()),
        ("use_semantic", bool_str(m.use_semantic).to_string()),
        ("use_spatial", bool_str(m.use_spatial).to_string()),
        ("fq_post_softmax", bool_str(m.fq_post_softmax).to_string()),
        ("shuffle_positions", bool_str(m.shuffle_positions).to_string()),
        ("num_classes", ckpt.num_classes.to_string()),
        ("num_predicates", ckpt.num_predicates.to_string()),
    ] {
        emit(format!("config {k} {v}"))?;
    }
    emit(format!("params {}", ckpt.params.set.len()))?;
    for (name, mat) in ckpt.params.set.iter() {
        emit(format!("param {name} {} {}", mat.rows(), mat.cols()))?;
        for r in 0..mat.rows() {
            let line = mat
                .row(r)
                .iter()
                .map(|v| format!("{v:.16e}"))
                .collect::<Vec<_>>()
                .join(" ");
            emit(line)?;
        }
    }
    emit("end".to_string())?;
    Ok(())
}

struct LineReader {
    lines: std::io::Lines<BufReader<fs::File>>,
    path: String,
    line_no: usize,
}

impl LineReader {
    fn next_line(&mut self) -> Result<String> {
        self.line_no += 1;
        match self.lines.next() {
            Some(Ok(l)) => Ok(l),
            Some(Err(e)) => Err(Error::io(&self.path, e)),
            None => Err(Error::Checkpoint(format!(
                "unexpected end of file at line {}",
                self.line_no
            ))),
        }
    }
}

fn parse_bool(v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Checkpoint(format!("invalid boolean `{v}`"))),
    }
}

/// Load a checkpoint, rejecting a vocabulary hash mismatch.
pub fn load_checkpoint(path: &Path, expected_vocab_hash: &str) -> Result<Checkpoint> {
    let display = path.display().to_string();
    let file = fs::File::open(path).map_err(|e| Error::io(&display, e))?;
    let mut r = LineReader {
        lines: BufReader::new(file).lines(),
        path: display,
        line_no: 0,
    };
    if r.next_line()? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("unrecognized header".into()));
    }
    let hash_line = r.next_line()?;
    let vocab_hash = hash_line
        .strip_prefix("vocab_hash ")
        .ok_or_else(|| Error::Checkpoint("missing vocab_hash".into()))?
        .to_string();
    if vocab_hash != expected_vocab_hash {
        return Err(Error::VocabMismatch {
            expected: vocab_hash,
            found: expected_vocab_hash.to_string(),
        });
    }

    let mut config = std::collections::BTreeMap::new();
    let params_line = loop {
        let line = r.next_line()?;
        if let Some(rest) = line.strip_prefix("config ") {
            let (k, v) = rest
                .split_once(' ')
                .ok_or_else(|| Error::Checkpoint(format!("bad config line `{line}`")))?;
            config.insert(k.to_string(), v.to_string());
        } else {
            break line;
        }
    };
    let get = |k: &str| -> Result<&String> {
        config
            .get(k)
            .ok_or_else(|| Error::Checkpoint(format!("missing config key `{k}`")))
    };
    let get_usize = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("invalid integer for `{k}`")))
    };
    let embed = EmbedConfig {
        d_model: get_usize("d_model")?,
        max_nodes: get_usize("max_nodes")?,
        v_dim: get_usize("v_dim")?,
        e_dim: get_usize("e_dim")?,
        g_dim: get_usize("g_dim")?,
    };
    let model = ModelConfig {
        heads: get_usize("heads")?,
        enc_layers: get_usize("enc_layers")?,
        dec_layers: get_usize("dec_layers")?,
        ffn_dim: get_usize("ffn_dim")?,
        dropout: get("dropout")?
            .parse()
            .map_err(|_| Error::Checkpoint("invalid dropout".into()))?,
        decoder_self_attention: parse_bool(get("decoder_self_attention")?)?,
        pe_variant: PeVariant::from_name(get("pe_variant")?)
            .ok_or_else(|| Error::Checkpoint("invalid pe_variant".into()))?,
        use_rpm: parse_bool(get("use_rpm")?)?,
        use_freq_bias: parse_bool(get("use_freq_bias")?)?,
        use_gap: parse_bool(get("use_gap")?)?,
        use_semantic: parse_bool(get("use_semantic")?)?,
        use_spatial: parse_bool(get("use_spatial")?)?,
        fq_post_softmax: parse_bool(get("fq_post_softmax")?)?,
        shuffle_positions: parse_bool(get("shuffle_positions")?)?,
    };
    let num_classes = get_usize("num_classes")?;
    let num_predicates = get_usize("num_predicates")?;

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut params = RtnParams::init(&embed, &model, num_classes, num_predicates, &mut rng)?;

    let count: usize = params_line
        .strip_prefix("params ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Checkpoint("missing params count".into()))?;
    if count != params.set.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {count} parameters, config implies {}",
            params.set.len()
        )));
    }
    let mut filled = vec![false; count];
    for _ in 0..count {
        let header = r.next_line()?;
        let parts: Vec<&str> = header.split(' ').collect();
        if parts.len() != 4 || parts[0] != "param" {
            return Err(Error::Checkpoint(format!("bad param header `{header}`")));
        }
        let name = parts[1];
        let rows: usize = parts[2]
            .parse()
            .map_err(|_| Error::Checkpoint("invalid row count".into()))?;
        let cols: usize = parts[3]
            .parse()
            .map_err(|_| Error::Checkpoint("invalid col count".into()))?;
        let id = params
            .set
            .id_by_name(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        let target = params.set.get_mut(id);
        if target.shape() != (rows, cols) {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {rows}x{cols}, config implies {}x{}",
                target.shape().0,
                target.shape().1
            )));
        }
        for row in 0..rows {
            let line = r.next_line()?;
            let mut values = line.split(' ');
            for c in 0..cols {
                let v: f64 = values
                    .next()
                    .ok_or_else(|| Error::Checkpoint(format!("short row in `{name}`")))?
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("invalid real in `{name}`")))?;
                target.set(row, c, v);
            }
            if values.next().is_some() {
                return Err(Error::Checkpoint(format!("long row in `{name}`")));
            }
        }
        let index = params.set.ids().position(|i| i == id).expect("present");
        if filled[index] {
            return Err(Error::Checkpoint(format!("duplicate parameter `{name}`")));
        }
        filled[index] = true;
    }
    if r.next_line()? != "end" {
        return Err(Error::Checkpoint("missing end marker".into()));
    }
    if !filled.iter().all(|&f| f) {
        return Err(Error::Checkpoint("checkpoint missing parameters".into()));
    }
    Ok(Checkpoint {
        embed,
        model,
        num_classes,
        num_predicates,
        vocab_hash,
        params,
    })
}
