//! Ablation sweeps: train and evaluate a list of flag variants on shared
//! data with a shared seed and collect one comparable row per variant.

use crate::data::{SceneRecord, Vocab};
use crate::embed::EmbedConfig;
use crate::embedding::pseudo_embedding;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig};
use crate::model::{ModelConfig, RtnModel};
use crate::train::{train, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct AblationVariant {
    pub name: String,
    /// `(flag, value)` overrides applied to the base model config.
    pub overrides: Vec<(String, String)>,
}

/// Named presets mirroring the decoder / positional-encoding / feature
/// ablations.
pub fn preset_variant(name: &str) -> Option<AblationVariant> {
    let overrides: Vec<(&str, &str)> = match name {
        "rtn" => vec![],
        "node-pe" => vec![("pe_variant", "node-style")],
        "dense-pe" => vec![("pe_variant", "dense")],
        "no-pe" => vec![("pe_variant", "none")],
        "vaswani-decoder" => vec![("decoder_self_attention", "true")],
        "no-rpm" => vec![("use_rpm", "false")],
        "no-freq" => vec![("use_freq_bias", "false")],
        "no-gap" => vec![("use_gap", "false")],
        "no-semantic" => vec![("use_semantic", "false")],
        "no-spatial" => vec![("use_spatial", "false")],
        _ => return None,
    };
    Some(AblationVariant {
        name: name.to_string(),
        overrides: overrides
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub flags: String,
    /// Graph-constraint recall per K.
    pub recall: Vec<f64>,
    pub mean_recall: Vec<f64>,
    pub best_epoch: usize,
}

/// Train and evaluate every variant on the same splits with the same seed.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    train_scenes: &[SceneRecord],
    val_scenes: &[SceneRecord],
    test_scenes: &[SceneRecord],
    vocab: &Vocab,
    embed: &EmbedConfig,
    base_model: &ModelConfig,
    train_cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
    variants: &[AblationVariant],
) -> Result<Vec<AblationRow>> {
    if variants.is_empty() {
        return Err(Error::Config("ablation sweep has no variants".into()));
    }
    let table = pseudo_embedding(vocab, embed.e_dim)?;
    let mut rows = Vec::with_capacity(variants.len());
    for variant in variants {
        let mut model_cfg = base_model.clone();
        for (key, value) in &variant.overrides {
            model_cfg.set_key(key, value)?;
        }
        let outcome = train(train_scenes, val_scenes, vocab, embed, &model_cfg, train_cfg)?;
        let model = RtnModel {
            params: &outcome.best_params,
            embed,
            model: &model_cfg,
            table: &table,
            fq: Some(&outcome.fq),
        };
        let report = evaluate(test_scenes, &model, vocab, eval_cfg, &[true])?;
        rows.push(AblationRow {
            name: variant.name.clone(),
            flags: model_cfg.flag_string(),
            recall: report.constraints[0].recall.clone(),
            mean_recall: report.constraints[0].mean_recall.clone(),
            best_epoch: outcome.best_epoch,
        });
    }
    Ok(rows)
}

pub fn ablation_to_csv(rows: &[AblationRow], ks: &[usize]) -> String {
    let mut out = String::from("variant,flags");
    for &k in ks {
        out.push_str(&format!(",R@{k}"));
    }
    for &k in ks {
        out.push_str(&format!(",mR@{k}"));
    }
    out.push_str(",best_epoch\n");
    for row in rows {
        out.push_str(&format!("{},\"{}\"", row.name, row.flags));
        for r in &row.recall {
            out.push_str(&format!(",{r:.6}"));
        }
        for r in &row.mean_recall {
            out.push_str(&format!(",{r:.6}"));
        }
        out.push_str(&format!(",{}\n", row.best_epoch));
    }
    out
}
