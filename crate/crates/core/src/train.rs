//! Loss assembly, foreground/background edge sampling and the training
//! loop: seeded shuffling, horizontal-flip augmentation, gradient
//! accumulation over fixed-size scene batches, SGD with momentum, and a
//! reduce-on-plateau learning-rate schedule keyed to validation recall.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{sgd_momentum_step, GradStore, NodeId, OptimizerState};
use crate::data::{SceneRecord, Vocab};
use crate::embed::EmbedConfig;
use crate::embedding::pseudo_embedding;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig};
use crate::freq::{build_frequency_table, FrequencyTable};
use crate::model::{ForwardGraph, Mode, ModelConfig, RtnModel, RtnParams};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_scenes: usize,
    pub epochs: usize,
    /// Background candidates sampled per foreground candidate.
    pub fg_bg_ratio: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub seed: u64,
    pub momentum: f64,
    pub w_obj: f64,
    pub w_rel: f64,
    /// Horizontal flip with probability 0.5 when enabled.
    pub augment: bool,
    /// Pipeline mode used for the training forward pass.
    pub mode: Mode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_scenes: 16,
            epochs: 20,
            fg_bg_ratio: 4,
            plateau_patience: 3,
            plateau_factor: 0.5,
            seed: 42,
            momentum: 0.9,
            w_obj: 1.0,
            w_rel: 1.0,
            augment: true,
            mode: Mode::PredCls,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.plateau_factor <= 0.0 || self.plateau_factor > 1.0 {
            return Err(Error::Config("lr and plateau_factor must be positive".into()));
        }
        if self.batch_scenes == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_scenes and epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0,1)".into()));
        }
        if self.w_obj < 0.0 || self.w_rel < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub obj_loss: f64,
    pub rel_loss: f64,
    pub val_r20: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    /// One comma-separated line per epoch:
    /// `epoch,obj_loss,rel_loss,val_r20,lr`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6e}\n",
                e.epoch, e.obj_loss, e.rel_loss, e.val_r20, e.lr
            ));
        }
        out
    }
}

/// All ground-truth directed pairs as foreground plus up to
/// ratio x |foreground| background pairs sampled uniformly without
/// replacement (all of them when fewer exist). Scenes without foreground
/// still contribute `ratio` background pairs. Returns (pair, predicate
/// label) with label 0 for background.
pub fn sample_edges(
    scene: &SceneRecord,
    ratio: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<((usize, usize), usize)> {
    let mut out: Vec<((usize, usize), usize)> = scene
        .relations
        .iter()
        .map(|r| ((r.subject, r.object), r.predicate))
        .collect();
    let fg = out.len();
    let mut background: Vec<(usize, usize)> = Vec::new();
    let n = scene.nodes.len();
    for i in 0..n {
        for j in 0..n {
            if i != j && scene.gt_predicate(i, j) == 0 {
                background.push((i, j));
            }
        }
    }
    let want = if fg > 0 { ratio * fg } else { ratio };
    let take = want.min(background.len());
    // partial Fisher-Yates: uniform without replacement
    for k in 0..take {
        let pick = rng.gen_range(k..background.len());
        background.swap(k, pick);
    }
    let mut chosen: Vec<(usize, usize)> = background[..take].to_vec();
    chosen.sort_unstable();
    out.extend(chosen.into_iter().map(|p| (p, 0)));
    out
}

/// Mirror a scene across the vertical canvas midline. Boxes flip, labels
/// and features are untouched.
pub fn flip_scene(scene: &SceneRecord) -> SceneRecord {
    let mut flipped = scene.clone();
    for node in &mut flipped.nodes {
        node.bbox = node.bbox.flipped_horizontal();
    }
    flipped
}

/// w_obj * CE(object logits, gt classes) + w_rel * CE(relation logits,
/// candidate labels). Returns the loss node plus the detached component
/// values.
pub fn total_loss(
    fg: &mut ForwardGraph,
    gt_classes: &[usize],
    labels: &[usize],
    w_obj: f64,
    w_rel: f64,
) -> Result<(NodeId, f64, f64)> {
    let g = &mut fg.graph;
    let obj = g.cross_entropy(fg.object_logits, gt_classes)?;
    let obj_value = g.value(obj).get(0, 0);
    let obj_scaled = g.scale(obj, w_obj);
    if labels.is_empty() {
        return Ok((obj_scaled, obj_value, 0.0));
    }
    let rel = g.cross_entropy(fg.relation_logits, labels)?;
    let rel_value = g.value(rel).get(0, 0);
    let rel_scaled = g.scale(rel, w_rel);
    let loss = g.add(obj_scaled, rel_scaled)?;
    Ok((loss, obj_value, rel_value))
}

/// Reduce-on-plateau: multiply the rate by `factor` after `patience`
/// consecutive epochs without improvement.
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    pub lr: f64,
    patience: usize,
    factor: f64,
    best: f64,
    since_improvement: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64, patience: usize, factor: f64) -> Self {
        PlateauSchedule {
            lr,
            patience,
            factor,
            best: f64::NEG_INFINITY,
            since_improvement: 0,
        }
    }

    /// Feed one validation metric; returns true when this is a new best.
    pub fn observe(&mut self, metric: f64) -> bool {
        if metric > self.best {
            self.best = metric;
            self.since_improvement = 0;
            true
        } else {
            self.since_improvement += 1;
            if self.since_improvement >= self.patience {
                self.lr *= self.factor;
                self.since_improvement = 0;
            }
            false
        }
    }
}

pub struct TrainOutcome {
    pub log: TrainLog,
    /// Parameters from the epoch with the best validation recall.
    pub best_params: RtnParams,
    pub best_epoch: usize,
    pub fq: FrequencyTable,
}

/// Full training protocol. Deterministic given (inputs, config).
pub fn train(
    train_scenes: &[SceneRecord],
    val_scenes: &[SceneRecord],
    vocab: &Vocab,
    embed: &EmbedConfig,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate(embed)?;
    if train_scenes.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let table = pseudo_embedding(vocab, embed.e_dim)?;
    let fq = build_frequency_table(train_scenes, vocab, 1.0)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = RtnParams::init(
        embed,
        model_cfg,
        vocab.num_classes(),
        vocab.num_predicates(),
        &mut rng,
    )?;
    let mut grads = GradStore::zeros_like(&params.set);
    let mut opt = OptimizerState::new(cfg.lr, cfg.momentum, &params.set);
    let mut schedule = PlateauSchedule::new(cfg.lr, cfg.plateau_patience, cfg.plateau_factor);

    let mut log = TrainLog::default();
    let mut best_params = params.clone();
    let mut best_epoch = 0;

    let val_cfg = EvalConfig {
        ks: vec![20],
        ..EvalConfig::for_mode(Mode::PredCls)
    };

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_scenes.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut obj_sum = 0.0;
        let mut rel_sum = 0.0;
        let mut batch_count = 0usize;
        for (step, &scene_idx) in order.iter().enumerate() {
            let stored = &train_scenes[scene_idx];
            let flipped;
            let scene: &SceneRecord = if cfg.augment && rng.gen_bool(0.5) {
                flipped = flip_scene(stored);
                &flipped
            } else {
                stored
            };
            let candidates = sample_edges(scene, cfg.fg_bg_ratio, &mut rng);
            let pairs: Vec<(usize, usize)> = candidates.iter().map(|&(p, _)| p).collect();
            let labels: Vec<usize> = candidates.iter().map(|&(_, l)| l).collect();
            let gt_classes: Vec<usize> = scene.nodes.iter().map(|n| n.gt_class).collect();

            let model = RtnModel {
                params: &params,
                embed,
                model: model_cfg,
                table: &table,
                fq: Some(&fq),
            };
            let mut fg = model.forward(scene, &pairs, cfg.mode, true, &mut rng)?;
            let (loss, obj_value, rel_value) =
                total_loss(&mut fg, &gt_classes, &labels, cfg.w_obj, cfg.w_rel)?;
            fg.graph.backward(loss)?;
            fg.binding.accumulate_grads(&fg.graph, &mut grads);
            obj_sum += obj_value;
            rel_sum += rel_value;
            batch_count += 1;

            let last = step + 1 == order.len();
            if batch_count == cfg.batch_scenes || last {
                // per-scene losses are already means; the batch gradient is
                // their accumulated sum
                opt.lr = schedule.lr;
                sgd_momentum_step(&mut params.set, &mut grads, &mut opt);
                batch_count = 0;
            }
        }

        let model = RtnModel {
            params: &params,
            embed,
            model: model_cfg,
            table: &table,
            fq: Some(&fq),
        };
        let val_r20 = if val_scenes.is_empty() {
            0.0
        } else {
            let report = evaluate(val_scenes, &model, vocab, &val_cfg, &[true])?;
            report.constraints[0].recall[0]
        };
        let improved = schedule.observe(val_r20);
        if improved || epoch == 1 {
            best_params = params.clone();
            best_epoch = epoch;
        }
        log.epochs.push(EpochLog {
            epoch,
            obj_loss: obj_sum / train_scenes.len() as f64,
            rel_loss: rel_sum / train_scenes.len() as f64,
            val_r20,
            lr: schedule.lr,
        });
    }

    Ok(TrainOutcome {
        log,
        best_params,
        best_epoch,
        fq,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{NodeRecord, RelationRecord};
    use crate::geometry::{iou, BoundingBox};
    use crate::model::tests_support::{small_scene, test_embed, test_model_cfg, test_vocab};

    fn ratio_scene(n: usize, relations: Vec<RelationRecord>) -> SceneRecord {
        let nodes = (0..n)
            .map(|i| {
                let x = 0.05 + 0.12 * i as f64;
                NodeRecord {
                    bbox: BoundingBox::new(x, 0.1, x + 0.1, 0.25),
                    visual: vec![0.0; 8],
                    class_probs: vec![0.25; 4],
                    gt_class: i % 4,
                }
            })
            .collect();
        SceneRecord {
            id: format!("ratio-{n}"),
            nodes,
            relations,
            global_feature: vec![0.0; 4],
        }
    }

    #[test]
    fn sample_edges_ratio_arithmetic() {
        let scene = ratio_scene(
            4,
            vec![RelationRecord {
                subject: 0,
                object: 1,
                predicate: 1,
            }],
        );
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sample = sample_edges(&scene, 4, &mut rng);
        // 1 fg + 4 bg out of 11 eligible background pairs
        assert_eq!(sample.len(), 5);
        assert_eq!(sample.iter().filter(|(_, l)| *l > 0).count(), 1);
    }

    #[test]
    fn sample_edges_two_node_scene_fully_annotated() {
        let scene = ratio_scene(
            2,
            vec![
                RelationRecord {
                    subject: 0,
                    object: 1,
                    predicate: 1,
                },
                RelationRecord {
                    subject: 1,
                    object: 0,
                    predicate: 2,
                },
            ],
        );
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sample = sample_edges(&scene, 4, &mut rng);
        assert_eq!(sample.len(), 2);
        assert!(sample.iter().all(|(_, l)| *l > 0));
    }

    #[test]
    fn sample_edges_no_foreground_takes_ratio_backgrounds() {
        let scene = ratio_scene(4, vec![]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sample = sample_edges(&scene, 4, &mut rng);
        assert_eq!(sample.len(), 4);
        assert!(sample.iter().all(|(_, l)| *l == 0));
    }

    #[test]
    fn sample_edges_background_selection_is_uniform() {
        // 1 fg, 11 eligible bg pairs, 4 sampled: each bg pair should appear
        // with frequency 4/11 over many seeds, within 3 sigma
        let scene = ratio_scene(
            4,
            vec![RelationRecord {
                subject: 0,
                object: 1,
                predicate: 1,
            }],
        );
        let trials = 10_000;
        let mut counts: std::collections::BTreeMap<(usize, usize), usize> =
            std::collections::BTreeMap::new();
        for seed in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for (pair, label) in sample_edges(&scene, 4, &mut rng) {
                if label == 0 {
                    *counts.entry(pair).or_default() += 1;
                }
            }
        }
        assert_eq!(counts.len(), 11);
        let p = 4.0 / 11.0;
        let expected = trials as f64 * p;
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        for (pair, count) in counts {
            let dev = (count as f64 - expected).abs();
            assert!(dev <= 3.0 * sigma, "pair {pair:?}: {count} vs {expected}");
        }
    }

    #[test]
    fn flip_preserves_validity_and_iou_exactly() {
        // grid-snapped coordinates make 1 - x exact in binary floating point
        let snap = |v: f64| (v * 4096.0).round() / 4096.0;
        let b = |x1: f64, y1: f64, x2: f64, y2: f64| {
            BoundingBox::new(snap(x1), snap(y1), snap(x2), snap(y2))
        };
        let a = b(0.1171, 0.25, 0.4414, 0.5);
        let c = b(0.3008, 0.3105, 0.7002, 0.8008);
        let (fa, fc) = (a.flipped_horizontal(), c.flipped_horizontal());
        assert!(fa.is_valid() && fc.is_valid());
        assert_eq!(iou(&fa, &fc), iou(&a, &c));
    }

    #[test]
    fn total_loss_closed_forms() {
        let vocab = test_vocab();
        let embed = test_embed();
        let model_cfg = test_model_cfg();
        let table = pseudo_embedding(&vocab, embed.e_dim).unwrap();
        let fq = build_frequency_table(&[], &vocab, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = RtnParams::init(
            &embed,
            &model_cfg,
            vocab.num_classes(),
            vocab.num_predicates(),
            &mut rng,
        )
        .unwrap();
        // zero logits everywhere: loss = ln C + ln p (fq is uniform, so the
        // bias shifts all relation logits equally)
        params.set.get_mut(params.w_classifier).data_mut().fill(0.0);
        params.set.get_mut(params.w_p).data_mut().fill(0.0);
        let scene = small_scene(3);
        let model = RtnModel {
            params: &params,
            embed: &embed,
            model: &model_cfg,
            table: &table,
            fq: Some(&fq),
        };
        let mut fg = model
            .forward(&scene, &[(0, 1), (1, 2)], Mode::PredCls, false, &mut rng)
            .unwrap();
        let gt: Vec<usize> = scene.nodes.iter().map(|n| n.gt_class).collect();
        let (loss, obj, rel) = total_loss(&mut fg, &gt, &[1, 0], 1.0, 1.0).unwrap();
        let c = vocab.num_classes() as f64;
        let p = vocab.num_predicates() as f64;
        assert!((obj - c.ln()).abs() < 1e-12);
        assert!((rel - p.ln()).abs() < 1e-12);
        assert!((fg.graph.value(loss).get(0, 0) - (c.ln() + p.ln())).abs() < 1e-12);
    }

    #[test]
    fn saturated_logits_give_vanishing_loss() {
        let mut g = crate::autodiff::Graph::new(false);
        let mut logits = crate::matrix::Matrix::filled(2, 3, -1e3);
        logits.set(0, 1, 1e3);
        logits.set(1, 2, 1e3);
        let node = g.leaf(logits);
        let loss = g.cross_entropy(node, &[1, 2]).unwrap();
        assert!(g.value(loss).get(0, 0) < 1e-6);
    }

    #[test]
    fn plateau_schedule_two_triggers() {
        let mut s = PlateauSchedule::new(1e-3, 3, 0.5);
        assert!(s.observe(0.5)); // baseline
        for _ in 0..3 {
            s.observe(0.4);
        }
        assert!((s.lr - 5e-4).abs() < 1e-18);
        for _ in 0..3 {
            s.observe(0.4);
        }
        assert!((s.lr - 2.5e-4).abs() < 1e-18);
    }

    #[test]
    fn optimizer_step_changes_params_iff_gradient_nonzero() {
        let vocab = test_vocab();
        let embed = test_embed();
        let model_cfg = test_model_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut params = RtnParams::init(
            &embed,
            &model_cfg,
            vocab.num_classes(),
            vocab.num_predicates(),
            &mut rng,
        )
        .unwrap();
        let before: Vec<f64> = params
            .set
            .iter()
            .flat_map(|(_, m)| m.data().to_vec())
            .collect();
        let mut grads = GradStore::zeros_like(&params.set);
        let mut opt = OptimizerState::new(1e-2, 0.9, &params.set);
        sgd_momentum_step(&mut params.set, &mut grads, &mut opt);
        let after: Vec<f64> = params
            .set
            .iter()
            .flat_map(|(_, m)| m.data().to_vec())
            .collect();
        assert_eq!(before, after, "zero gradients must not move parameters");

        // a single nonzero gradient entry moves exactly that parameter
        let first = params.set.ids().next().unwrap();
        let mut grads = GradStore::zeros_like(&params.set);
        grads.get_mut(first).data_mut()[0] = 1.0;
        sgd_momentum_step(&mut params.set, &mut grads, &mut opt);
        let after2: Vec<f64> = params
            .set
            .iter()
            .flat_map(|(_, m)| m.data().to_vec())
            .collect();
        assert_ne!(after[0], after2[0]);
        assert_eq!(&after[1..], &after2[1..]);
    }

    fn tiny_dataset(count: usize, seed: u64) -> Vec<SceneRecord> {
        let cfg = crate::synth::GenConfig {
            num_classes: 4,
            nodes_min: 3,
            nodes_max: 4,
            v_dim: 8,
            g_dim: 4,
            ..crate::synth::GenConfig::default()
        };
        crate::synth::generate_split(&cfg, "t", count, seed).unwrap()
    }

    fn tiny_vocab() -> Vocab {
        crate::synth::GenConfig {
            num_classes: 4,
            ..crate::synth::GenConfig::default()
        }
        .vocab()
        .unwrap()
    }

    #[test]
    fn training_is_deterministic() {
        let train_scenes = tiny_dataset(6, 31);
        let val_scenes = tiny_dataset(3, 32);
        let vocab = tiny_vocab();
        let embed = EmbedConfig {
            d_model: 16,
            max_nodes: 16,
            v_dim: 8,
            e_dim: 4,
            g_dim: 4,
        };
        let model_cfg = crate::model::ModelConfig {
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ffn_dim: 32,
            ..crate::model::ModelConfig::default()
        };
        let cfg = TrainConfig {
            epochs: 2,
            batch_scenes: 3,
            ..TrainConfig::default()
        };
        let out1 = train(&train_scenes, &val_scenes, &vocab, &embed, &model_cfg, &cfg).unwrap();
        let out2 = train(&train_scenes, &val_scenes, &vocab, &embed, &model_cfg, &cfg).unwrap();
        assert_eq!(out1.log, out2.log);
        assert_eq!(out1.log.to_csv(), out2.log.to_csv());
        assert_eq!(out1.log.epochs.len(), 2);
        for (a, b) in out1.best_params.set.iter().zip(out2.best_params.set.iter()) {
            assert_eq!(a.1, b.1);
        }
    }

    #[test]
    fn small_lr_descends_on_fixed_batch() {
        let scenes = tiny_dataset(3, 33);
        let vocab = tiny_vocab();
        let embed = EmbedConfig {
            d_model: 16,
            max_nodes: 16,
            v_dim: 8,
            e_dim: 4,
            g_dim: 4,
        };
        let model_cfg = crate::model::ModelConfig {
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ffn_dim: 32,
            dropout: 0.0,
            ..crate::model::ModelConfig::default()
        };
        let table = pseudo_embedding(&vocab, embed.e_dim).unwrap();
        let fq = build_frequency_table(&scenes, &vocab, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = RtnParams::init(
            &embed,
            &model_cfg,
            vocab.num_classes(),
            vocab.num_predicates(),
            &mut rng,
        )
        .unwrap();
        let mut grads = GradStore::zeros_like(&params.set);
        let mut opt = OptimizerState::new(1e-5, 0.9, &params.set);
        // fixed candidates per scene
        let mut sample_rng = ChaCha8Rng::seed_from_u64(8);
        let fixed: Vec<Vec<((usize, usize), usize)>> = scenes
            .iter()
            .map(|s| sample_edges(s, 4, &mut sample_rng))
            .collect();
        let mut losses = Vec::new();
        for _ in 0..10 {
            let mut batch_loss = 0.0;
            for (scene, cands) in scenes.iter().zip(&fixed) {
                let pairs: Vec<(usize, usize)> = cands.iter().map(|&(p, _)| p).collect();
                let labels: Vec<usize> = cands.iter().map(|&(_, l)| l).collect();
                let gt: Vec<usize> = scene.nodes.iter().map(|n| n.gt_class).collect();
                let model = RtnModel {
                    params: &params,
                    embed: &embed,
                    model: &model_cfg,
                    table: &table,
                    fq: Some(&fq),
                };
                let mut dummy_rng = ChaCha8Rng::seed_from_u64(0);
                let mut fg = model
                    .forward(scene, &pairs, Mode::PredCls, true, &mut dummy_rng)
                    .unwrap();
                let (loss, _, _) = total_loss(&mut fg, &gt, &labels, 1.0, 1.0).unwrap();
                batch_loss += fg.graph.value(loss).get(0, 0);
                fg.graph.backward(loss).unwrap();
                fg.binding.accumulate_grads(&fg.graph, &mut grads);
            }
            losses.push(batch_loss / scenes.len() as f64);
            grads.scale(1.0 / scenes.len() as f64);
            sgd_momentum_step(&mut params.set, &mut grads, &mut opt);
        }
        for w in losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "loss increased: {:?}", losses);
        }
    }
}

