//! Run configuration: every tunable of the pipeline as a flat `key = value`
//! schema with defaults, loaded from a text file and overridden from the
//! command line (command line > file > defaults). Unknown keys are
//! rejected; the effective configuration can be dumped and reloaded to
//! reproduce a run exactly.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sgg_core::embed::EmbedConfig;
use sgg_core::error::{Error, Result};
use sgg_core::eval::{DetectorNoise, EvalConfig, PairPolicy};
use sgg_core::model::{Mode, ModelConfig};
use sgg_core::synth::{GenConfig, Rule};
use sgg_core::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub gen: GenConfig,
    /// Embedding width of the pseudo word vectors.
    pub e_dim: usize,
    pub d_model: usize,
    pub max_nodes: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval_mode: Mode,
    pub eval_ks: Vec<usize>,
    pub eval_match_iou: f64,
    /// `None` selects the mode-appropriate default policy.
    pub eval_pair_policy: Option<PairPolicy>,
    pub eval_split: String,
    pub eval_seed: u64,
    pub detector: DetectorNoise,
    pub data_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            gen: GenConfig::default(),
            e_dim: 32,
            d_model: 64,
            max_nodes: 64,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval_mode: Mode::PredCls,
            eval_ks: vec![20, 50, 100],
            eval_match_iou: 0.5,
            eval_pair_policy: None,
            eval_split: "test".into(),
            eval_seed: 42,
            detector: DetectorNoise::default(),
            data_dir: PathBuf::from("data"),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_rules(value: &str) -> Result<Vec<Rule>> {
    let mut rules = Vec::new();
    for name in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let rule = Rule::from_name(name)
            .ok_or_else(|| Error::Config(format!("unknown rule `{name}`")))?;
        if !rules.contains(&rule) {
            rules.push(rule);
        }
    }
    Ok(rules)
}

fn parse_ks(value: &str) -> Result<Vec<usize>> {
    let ks: Vec<usize> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse::<usize>("eval.k", s))
        .collect::<Result<_>>()?;
    if ks.is_empty() {
        return Err(Error::Config("eval.k needs at least one entry".into()));
    }
    Ok(ks)
}

impl RunConfig {
    /// Apply one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "gen.classes" => self.gen.num_classes = parse(key, value)?,
            "gen.rules" => self.gen.rules = parse_rules(value)?,
            "gen.train_scenes" => self.gen.train_scenes = parse(key, value)?,
            "gen.val_scenes" => self.gen.val_scenes = parse(key, value)?,
            "gen.test_scenes" => self.gen.test_scenes = parse(key, value)?,
            "gen.nodes_min" => self.gen.nodes_min = parse(key, value)?,
            "gen.nodes_max" => self.gen.nodes_max = parse(key, value)?,
            "gen.visual_noise" => self.gen.visual_noise = parse(key, value)?,
            "gen.detector_eps" => self.gen.detector_eps = parse(key, value)?,
            "gen.v_dim" => self.gen.v_dim = parse(key, value)?,
            "gen.g_dim" => self.gen.g_dim = parse(key, value)?,
            "gen.level_band" => self.gen.level_band = parse(key, value)?,
            "gen.tall_threshold" => self.gen.tall_threshold = parse(key, value)?,
            "gen.max_pairwise_iou" => self.gen.max_pairwise_iou = parse(key, value)?,
            "gen.seed" => self.gen.seed = parse(key, value)?,
            "embed.e_dim" => self.e_dim = parse(key, value)?,
            "embed.d_model" => self.d_model = parse(key, value)?,
            "embed.max_nodes" => self.max_nodes = parse(key, value)?,
            k if k.starts_with("model.") => {
                self.model.set_key(&k["model.".len()..], value)?;
            }
            "train.lr" => self.train.lr = parse(key, value)?,
            "train.batch_scenes" => self.train.batch_scenes = parse(key, value)?,
            "train.epochs" => self.train.epochs = parse(key, value)?,
            "train.fg_bg_ratio" => self.train.fg_bg_ratio = parse(key, value)?,
            "train.patience" => self.train.plateau_patience = parse(key, value)?,
            "train.plateau_factor" => self.train.plateau_factor = parse(key, value)?,
            "train.seed" => self.train.seed = parse(key, value)?,
            "train.momentum" => self.train.momentum = parse(key, value)?,
            "train.w_obj" => self.train.w_obj = parse(key, value)?,
            "train.w_rel" => self.train.w_rel = parse(key, value)?,
            "train.augment" => self.train.augment = parse(key, value)?,
            "train.mode" => {
                self.train.mode = Mode::from_name(value)
                    .ok_or_else(|| Error::Config(format!("unknown mode `{value}`")))?;
            }
            "eval.mode" => {
                self.eval_mode = Mode::from_name(value)
                    .ok_or_else(|| Error::Config(format!("unknown mode `{value}`")))?;
            }
            "eval.k" => self.eval_ks = parse_ks(value)?,
            "eval.match_iou" => self.eval_match_iou = parse(key, value)?,
            "eval.pair_policy" => {
                self.eval_pair_policy = match value {
                    "auto" => None,
                    "all" => Some(PairPolicy::AllPairs),
                    "overlap" => Some(PairPolicy::OverlapOnly),
                    _ => {
                        return Err(Error::Config(format!(
                            "eval.pair_policy must be auto|all|overlap, got `{value}`"
                        )))
                    }
                };
            }
            "eval.split" => {
                if !["train", "val", "test"].contains(&value) {
                    return Err(Error::Config(format!(
                        "eval.split must be train|val|test, got `{value}`"
                    )));
                }
                self.eval_split = value.to_string();
            }
            "eval.seed" => self.eval_seed = parse(key, value)?,
            "det.box_sigma" => self.detector.box_sigma = parse(key, value)?,
            "det.score_noise" => self.detector.score_noise = parse(key, value)?,
            "det.spurious_rate" => self.detector.spurious_rate = parse(key, value)?,
            "det.nms_iou" => self.detector.nms_iou = parse(key, value)?,
            "det.top_k" => self.detector.top_k = parse(key, value)?,
            "data.dir" => self.data_dir = PathBuf::from(value),
            _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Load overrides from a `key = value` file; `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        for (idx, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: idx + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(key.trim(), value.trim()).map_err(|e| Error::Parse {
                line: idx + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// Force every seed in the run to one value.
    pub fn override_seed(&mut self, seed: u64) {
        self.gen.seed = seed;
        self.train.seed = seed;
        self.eval_seed = seed;
    }

    pub fn embed_config(&self) -> EmbedConfig {
        EmbedConfig {
            d_model: self.d_model,
            max_nodes: self.max_nodes,
            v_dim: self.gen.v_dim,
            e_dim: self.e_dim,
            g_dim: self.gen.g_dim,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            mode: self.eval_mode,
            ks: self.eval_ks.clone(),
            match_iou: self.eval_match_iou,
            pair_policy: self
                .eval_pair_policy
                .unwrap_or_else(|| PairPolicy::default_for(self.eval_mode)),
            detector: self.detector.clone(),
            seed: self.eval_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.model.validate(&self.embed_config())?;
        self.train.validate()?;
        self.eval_config().validate()?;
        Ok(())
    }

    /// Canonical dump of the effective configuration; reloading it
    /// reproduces this config exactly.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let rules = self
            .gen
            .rules
            .iter()
            .map(|r| r.name())
            .collect::<Vec<_>>()
            .join(",");
        let ks = self
            .eval_ks
            .iter()
            .map(|k| k.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let pair_policy = match self.eval_pair_policy {
            None => "auto",
            Some(PairPolicy::AllPairs) => "all",
            Some(PairPolicy::OverlapOnly) => "overlap",
        };
        let mut kv = |k: &str, v: String| {
            writeln!(s, "{k} = {v}").expect("write to string");
        };
        kv("gen.classes", self.gen.num_classes.to_string());
        kv("gen.rules", rules);
        kv("gen.train_scenes", self.gen.train_scenes.to_string());
        kv("gen.val_scenes", self.gen.val_scenes.to_string());
        kv("gen.test_scenes", self.gen.test_scenes.to_string());
        kv("gen.nodes_min", self.gen.nodes_min.to_string());
        kv("gen.nodes_max", self.gen.nodes_max.to_string());
        kv("gen.visual_noise", format!("{}", self.gen.visual_noise));
        kv("gen.detector_eps", format!("{}", self.gen.detector_eps));
        kv("gen.v_dim", self.gen.v_dim.to_string());
        kv("gen.g_dim", self.gen.g_dim.to_string());
        kv("gen.level_band", format!("{}", self.gen.level_band));
        kv("gen.tall_threshold", format!("{}", self.gen.tall_threshold));
        kv("gen.max_pairwise_iou", format!("{}", self.gen.max_pairwise_iou));
        kv("gen.seed", self.gen.seed.to_string());
        kv("embed.e_dim", self.e_dim.to_string());
        kv("embed.d_model", self.d_model.to_string());
        kv("embed.max_nodes", self.max_nodes.to_string());
        kv("model.heads", self.model.heads.to_string());
        kv("model.enc_layers", self.model.enc_layers.to_string());
        kv("model.dec_layers", self.model.dec_layers.to_string());
        kv("model.ffn_dim", self.model.ffn_dim.to_string());
        kv("model.dropout", format!("{}", self.model.dropout));
        kv(
            "model.decoder_self_attention",
            self.model.decoder_self_attention.to_string(),
        );
        kv("model.pe_variant", self.model.pe_variant.name().to_string());
        kv("model.use_rpm", self.model.use_rpm.to_string());
        kv("model.use_freq_bias", self.model.use_freq_bias.to_string());
        kv("model.use_gap", self.model.use_gap.to_string());
        kv("model.use_semantic", self.model.use_semantic.to_string());
        kv("model.use_spatial", self.model.use_spatial.to_string());
        kv("model.fq_post_softmax", self.model.fq_post_softmax.to_string());
        kv("model.shuffle_positions", self.model.shuffle_positions.to_string());
        kv("train.lr", format!("{}", self.train.lr));
        kv("train.batch_scenes", self.train.batch_scenes.to_string());
        kv("train.epochs", self.train.epochs.to_string());
        kv("train.fg_bg_ratio", self.train.fg_bg_ratio.to_string());
        kv("train.patience", self.train.plateau_patience.to_string());
        kv("train.plateau_factor", format!("{}", self.train.plateau_factor));
        kv("train.seed", self.train.seed.to_string());
        kv("train.momentum", format!("{}", self.train.momentum));
        kv("train.w_obj", format!("{}", self.train.w_obj));
        kv("train.w_rel", format!("{}", self.train.w_rel));
        kv("train.augment", self.train.augment.to_string());
        kv("train.mode", self.train.mode.name().to_string());
        kv("eval.mode", self.eval_mode.name().to_string());
        kv("eval.k", ks);
        kv("eval.match_iou", format!("{}", self.eval_match_iou));
        kv("eval.pair_policy", pair_policy.to_string());
        kv("eval.split", self.eval_split.clone());
        kv("eval.seed", self.eval_seed.to_string());
        kv("det.box_sigma", format!("{}", self.detector.box_sigma));
        kv("det.score_noise", format!("{}", self.detector.score_noise));
        kv("det.spurious_rate", format!("{}", self.detector.spurious_rate));
        kv("det.nms_iou", format!("{}", self.detector.nms_iou));
        kv("det.top_k", self.detector.top_k.to_string());
        kv("data.dir", self.data_dir.display().to_string());
        s
    }
}
