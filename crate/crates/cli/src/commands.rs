//! Subcommand implementations: dataset generation, training, evaluation,
//! ablation sweeps and attention-map dumps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sgg_core::ablate::{ablation_to_csv, preset_variant, run_ablation, AblationVariant};
use sgg_core::data::{load_dataset, save_dataset, SceneRecord, Vocab};
use sgg_core::embedding::pseudo_embedding;
use sgg_core::error::{Error, Result};
use sgg_core::eval::{candidate_pairs, evaluate, FrequencyBaseline, PairPolicy};
use sgg_core::freq::build_frequency_table;
use sgg_core::model::{load_checkpoint, save_checkpoint, Checkpoint, RtnModel};
use sgg_core::synth::generate_split;
use sgg_core::train::train;

use crate::config::RunConfig;

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Echo the effective configuration into the output directory so a run can
/// be reproduced from its artifacts alone.
pub fn echo_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    write_file(&out.join("config.effective"), &cfg.dump())
}

fn split_path(cfg: &RunConfig, split: &str) -> PathBuf {
    cfg.data_dir.join(format!("{split}.jsonl"))
}

fn load_split(cfg: &RunConfig, vocab: &Vocab, split: &str) -> Result<Vec<SceneRecord>> {
    load_dataset(&split_path(cfg, split), vocab)
}

pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let counts = [
        ("train", cfg.gen.train_scenes),
        ("val", cfg.gen.val_scenes),
        ("test", cfg.gen.test_scenes),
    ];
    std::fs::create_dir_all(&cfg.data_dir)
        .map_err(|e| Error::io(cfg.data_dir.display().to_string(), e))?;
    let mut manifest = String::new();
    for (split, count) in counts {
        let scenes = generate_split(&cfg.gen, split, count, cfg.gen.seed)?;
        save_dataset(&split_path(cfg, split), &scenes)?;
        writeln!(manifest, "split.{split} = {count}").expect("write to string");
        println!("wrote {count} scenes to {}", split_path(cfg, split).display());
    }
    writeln!(manifest, "seed = {}", cfg.gen.seed).expect("write to string");
    manifest.push_str(&cfg.dump());
    write_file(&cfg.data_dir.join("manifest.txt"), &manifest)?;
    echo_config(cfg, out)?;
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let vocab = cfg.gen.vocab()?;
    let train_scenes = load_split(cfg, &vocab, "train")?;
    let val_scenes = load_split(cfg, &vocab, "val")?;
    let embed = cfg.embed_config();
    let outcome = train(&train_scenes, &val_scenes, &vocab, &embed, &cfg.model, &cfg.train)?;
    let ckpt = Checkpoint {
        embed,
        model: cfg.model.clone(),
        num_classes: vocab.num_classes(),
        num_predicates: vocab.num_predicates(),
        vocab_hash: vocab.hash(),
        params: outcome.best_params,
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    save_checkpoint(&out.join("model.ckpt"), &ckpt)?;
    write_file(&out.join("train_log.csv"), &outcome.log.to_csv())?;
    echo_config(cfg, out)?;
    let last = outcome.log.epochs.last().expect("at least one epoch");
    println!(
        "trained {} epochs (best epoch {}), final val R@20 {:.4}",
        cfg.train.epochs, outcome.best_epoch, last.val_r20
    );
    println!("checkpoint: {}", out.join("model.ckpt").display());
    Ok(())
}

pub struct EvalArgs {
    pub checkpoint: Option<PathBuf>,
    pub freq_baseline: bool,
    /// with | without | both
    pub constraint: String,
}

pub fn cmd_eval(cfg: &RunConfig, out: &Path, args: &EvalArgs) -> Result<()> {
    cfg.validate()?;
    let vocab = cfg.gen.vocab()?;
    let scenes = load_split(cfg, &vocab, &cfg.eval_split)?;
    let train_scenes = load_split(cfg, &vocab, "train")?;
    let fq = build_frequency_table(&train_scenes, &vocab, 1.0)?;
    let eval_cfg = cfg.eval_config();
    let constraints: &[bool] = match args.constraint.as_str() {
        "with" => &[true],
        "without" => &[false],
        "both" => &[true, false],
        other => {
            return Err(Error::Config(format!(
                "constraint must be with|without|both, got `{other}`"
            )))
        }
    };

    let report = if args.freq_baseline {
        let baseline = FrequencyBaseline { fq: &fq };
        evaluate(&scenes, &baseline, &vocab, &eval_cfg, constraints)?
    } else {
        let path = args
            .checkpoint
            .clone()
            .unwrap_or_else(|| out.join("model.ckpt"));
        let ckpt = load_checkpoint(&path, &vocab.hash())?;
        let table = pseudo_embedding(&vocab, ckpt.embed.e_dim)?;
        let model = RtnModel {
            params: &ckpt.params,
            embed: &ckpt.embed,
            model: &ckpt.model,
            table: &table,
            fq: Some(&fq),
        };
        evaluate(&scenes, &model, &vocab, &eval_cfg, constraints)?
    };
    let csv = report.to_csv();
    write_file(&out.join("metrics.csv"), &csv)?;
    echo_config(cfg, out)?;
    print!("{csv}");
    Ok(())
}

/// Parse a sweep file: one variant per non-comment line,
/// `name key=value key=value ...`.
fn parse_sweep(path: &Path) -> Result<Vec<AblationVariant>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut variants = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let name = parts.next().expect("non-empty line").to_string();
        let mut overrides = Vec::new();
        for part in parts {
            let (k, v) = part.split_once('=').ok_or_else(|| Error::Parse {
                line: idx + 1,
                message: format!("expected flag=value, got `{part}`"),
            })?;
            overrides.push((k.to_string(), v.to_string()));
        }
        variants.push(AblationVariant { name, overrides });
    }
    if variants.is_empty() {
        return Err(Error::Config("sweep file lists no variants".into()));
    }
    Ok(variants)
}

pub fn cmd_ablate(
    cfg: &RunConfig,
    out: &Path,
    variants: Option<&str>,
    sweep: Option<&Path>,
) -> Result<()> {
    cfg.validate()?;
    let mut list = Vec::new();
    if let Some(names) = variants {
        for name in names.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            list.push(preset_variant(name).ok_or_else(|| {
                Error::Config(format!("unknown ablation preset `{name}`"))
            })?);
        }
    }
    if let Some(path) = sweep {
        list.extend(parse_sweep(path)?);
    }
    if list.is_empty() {
        return Err(Error::Config(
            "ablate needs --variants presets or a --sweep file".into(),
        ));
    }
    let vocab = cfg.gen.vocab()?;
    let train_scenes = load_split(cfg, &vocab, "train")?;
    let val_scenes = load_split(cfg, &vocab, "val")?;
    let test_scenes = load_split(cfg, &vocab, &cfg.eval_split)?;
    let rows = run_ablation(
        &train_scenes,
        &val_scenes,
        &test_scenes,
        &vocab,
        &cfg.embed_config(),
        &cfg.model,
        &cfg.train,
        &cfg.eval_config(),
        &list,
    )?;
    let csv = ablation_to_csv(&rows, &cfg.eval_ks);
    write_file(&out.join("ablation.csv"), &csv)?;
    echo_config(cfg, out)?;
    print!("{csv}");
    Ok(())
}

fn matrix_block(labels_row: &[String], labels_col: &[String], m: &sgg_core::Matrix) -> String {
    let mut s = String::new();
    s.push('.');
    for label in labels_col {
        s.push(' ');
        s.push_str(label);
    }
    s.push('\n');
    for (r, label) in labels_row.iter().enumerate() {
        s.push_str(label);
        for c in 0..m.cols() {
            write!(s, " {:.17e}", m.get(r, c)).expect("write to string");
        }
        s.push('\n');
    }
    s
}

pub fn cmd_attn(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: Option<&Path>,
    scene_id: &str,
) -> Result<()> {
    cfg.validate()?;
    let vocab = cfg.gen.vocab()?;
    let scenes = load_split(cfg, &vocab, &cfg.eval_split)?;
    let scene = scenes
        .iter()
        .find(|s| s.id == scene_id)
        .ok_or_else(|| Error::Config(format!("scene `{scene_id}` not found in the {} split", cfg.eval_split)))?;
    let train_scenes = load_split(cfg, &vocab, "train")?;
    let fq = build_frequency_table(&train_scenes, &vocab, 1.0)?;
    let default_path = out.join("model.ckpt");
    let path = checkpoint.unwrap_or(&default_path);
    let ckpt = load_checkpoint(path, &vocab.hash())?;
    let table = pseudo_embedding(&vocab, ckpt.embed.e_dim)?;
    let model = RtnModel {
        params: &ckpt.params,
        embed: &ckpt.embed,
        model: &ckpt.model,
        table: &table,
        fq: Some(&fq),
    };
    let pairs = candidate_pairs(&scene.nodes, PairPolicy::AllPairs);
    let output = model.run(scene, &pairs, cfg.eval_mode)?;

    let node_labels: Vec<String> = (0..scene.nodes.len())
        .map(|i| format!("n{i}:{}", vocab.class_name(scene.nodes[i].gt_class)))
        .collect();
    let edge_labels: Vec<String> = output
        .edges
        .iter()
        .map(|&(i, j)| format!("e{i}-{j}"))
        .collect();
    let dir = out.join("attn").join(scene_id);
    for (layer, heads) in output.enc_attention.iter().enumerate() {
        for (head, map) in heads.iter().enumerate() {
            let path = dir.join(format!("n2n_layer{layer}_head{head}.txt"));
            write_file(&path, &matrix_block(&node_labels, &node_labels, map))?;
        }
    }
    for (layer, heads) in output.dec_attention.iter().enumerate() {
        for (head, map) in heads.iter().enumerate() {
            let path = dir.join(format!("e2n_layer{layer}_head{head}.txt"));
            write_file(&path, &matrix_block(&edge_labels, &node_labels, map))?;
        }
    }
    echo_config(cfg, out)?;
    println!(
        "wrote {} N2N and {} E2N maps to {}",
        output.enc_attention.len() * ckpt.model.heads,
        output.dec_attention.len() * ckpt.model.heads,
        dir.display()
    );
    Ok(())
}
