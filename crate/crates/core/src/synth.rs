//! Synthetic planted-rule scene generator.
//!
//! Stands in for an object detector and annotated corpus: boxes are sampled
//! on the unit canvas, ground-truth predicates are assigned by deterministic
//! rules over (subject class, object class, relative geometry), visual
//! features are noisy class prototypes with the box coordinates appended,
//! and initial class probabilities are softened one-hots.
//!
//! All six rules are invariant under horizontal mirroring, so the flip
//! augmentation used in training never invalidates a planted label.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{NodeRecord, RelationRecord, SceneRecord, Vocab};
use crate::embedding::stable_seed;
use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};
use crate::matrix::Matrix;

/// Geometric predicate rules: the cross product of the vertical relation
/// between box centers (above / level / below, split by a band of height
/// `level_band`) and the subject's height category (tall boxes exceed
/// `tall_threshold`; the generator draws heights bimodally so the category
/// has a clear margin). With all six enabled they partition the geometry of
/// every ordered pair, so every class-compatible pair carries exactly one
/// relation; every decision boundary is linear in the box coordinates and
/// invariant under horizontal mirroring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    /// Subject center above the object center; subject is a tall box.
    AboveTall,
    /// Subject center above the object center; subject is a short box.
    AboveShort,
    /// Centers vertically level; subject is a tall box.
    LevelTall,
    /// Centers vertically level; subject is a short box.
    LevelShort,
    /// Subject center below the object center; subject is a tall box.
    BelowTall,
    /// Subject center below the object center; subject is a short box.
    BelowShort,
}

pub const ALL_RULES: [Rule; 6] = [
    Rule::AboveTall,
    Rule::AboveShort,
    Rule::LevelTall,
    Rule::LevelShort,
    Rule::BelowTall,
    Rule::BelowShort,
];

impl Rule {
    pub fn name(self) -> &'static str {
        match self {
            Rule::AboveTall => "above-tall",
            Rule::AboveShort => "above-short",
            Rule::LevelTall => "level-tall",
            Rule::LevelShort => "level-short",
            Rule::BelowTall => "below-tall",
            Rule::BelowShort => "below-short",
        }
    }

    pub fn from_name(name: &str) -> Option<Rule> {
        ALL_RULES.iter().copied().find(|r| r.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub num_classes: usize,
    pub rules: Vec<Rule>,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    pub nodes_min: usize,
    pub nodes_max: usize,
    /// Gaussian noise added to class prototype visual features.
    pub visual_noise: f64,
    /// Probability mass spread uniformly over classes in the initial
    /// detector probabilities.
    pub detector_eps: f64,
    pub v_dim: usize,
    pub g_dim: usize,
    /// Half-height of the vertically-level center band separating the
    /// above/level/below cells.
    pub level_band: f64,
    /// Full-height threshold of the tall/short box category.
    pub tall_threshold: f64,
    /// Boxes are rejection-sampled to keep every pairwise IoU at or below
    /// this bound.
    pub max_pairwise_iou: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            num_classes: 8,
            rules: ALL_RULES.to_vec(),
            train_scenes: 500,
            val_scenes: 50,
            test_scenes: 100,
            nodes_min: 4,
            nodes_max: 8,
            visual_noise: 0.02,
            detector_eps: 0.1,
            v_dim: 128,
            g_dim: 32,
            level_band: 0.09,
            tall_threshold: 0.17,
            max_pairwise_iou: 0.3,
            seed: 42,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nodes_min < 2 {
            return Err(Error::Config("scenes need at least 2 nodes".into()));
        }
        if self.nodes_max < self.nodes_min {
            return Err(Error::Config("nodes_max must be >= nodes_min".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("generator needs at least 2 classes".into()));
        }
        if self.rules.is_empty() {
            return Err(Error::Config("generator needs at least one rule".into()));
        }
        if self.v_dim < 8 {
            return Err(Error::Config("v_dim must be at least 8".into()));
        }
        if self.g_dim < 1 {
            return Err(Error::Config("g_dim must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.detector_eps) {
            return Err(Error::Config("detector_eps must be in [0,1)".into()));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Result<Vocab> {
        let classes = (0..self.num_classes).map(|i| format!("class{i}")).collect();
        let mut predicates = vec!["__background__".to_string()];
        predicates.extend(self.rules.iter().map(|r| r.name().to_string()));
        Vocab::new(classes, predicates)
    }
}

/// Class-pair compatibility gate: a relation is planted only when the
/// subject class falls in the lower half and the object class in the upper
/// half of the vocabulary. Asymmetric, so direction carries signal, and for
/// 8 nodes at most 16 of the 56 ordered pairs can be related, which keeps
/// every scene fully recallable at K = 20.
fn classes_compatible(c_s: usize, c_o: usize, num_classes: usize) -> bool {
    c_s < num_classes / 2 && c_o >= num_classes / 2
}

/// The geometric predicate for an ordered box pair, or None when the cell
/// of the partition it falls in is not among the enabled rules.
pub fn planted_rule(rules: &[Rule], s: &BoundingBox, o: &BoundingBox, cfg: &GenConfig) -> Option<Rule> {
    let sy = s.center().1;
    let oy = o.center().1;
    let tall = (s.y2 - s.y1) > cfg.tall_threshold;
    let rule = if sy < oy - cfg.level_band {
        if tall { Rule::AboveTall } else { Rule::AboveShort }
    } else if sy > oy + cfg.level_band {
        if tall { Rule::BelowTall } else { Rule::BelowShort }
    } else if tall {
        Rule::LevelTall
    } else {
        Rule::LevelShort
    };
    rules.contains(&rule).then_some(rule)
}

const GRID: f64 = 4096.0;

/// Vertical centers sit on this grid so center differences stay clear of
/// the level-band boundary.
const CENTER_Y_GRID: f64 = 0.06;

fn snap(v: f64) -> f64 {
    (v * GRID).round() / GRID
}

fn snap_center_y(cy: f64, hh: f64) -> f64 {
    let snapped = (cy / CENTER_Y_GRID).round() * CENTER_Y_GRID;
    snapped.clamp(hh, 1.0 - hh)
}

fn snap_box(b: BoundingBox) -> BoundingBox {
    BoundingBox::new(snap(b.x1), snap(b.y1), snap(b.x2), snap(b.y2))
}

fn sample_free_box(existing: &[BoundingBox], cfg: &GenConfig, rng: &mut ChaCha8Rng) -> BoundingBox {
    // keep a margin below the threshold so grid snapping cannot cross it
    let limit = cfg.max_pairwise_iou - 0.005;
    for attempt in 0..1000 {
        let hw = rng.gen_range(0.03..0.15);
        // bimodal half-heights keep full heights well away from the
        // tall/short threshold
        let hh = if rng.gen_bool(0.5) {
            rng.gen_range(0.02..0.045)
        } else {
            rng.gen_range(0.12..0.2)
        };
        let cx = rng.gen_range(hw..(1.0 - hw));
        let cy = snap_center_y(rng.gen_range(hh..(1.0 - hh)), hh);
        let candidate = snap_box(BoundingBox::new(cx - hw, cy - hh, cx + hw, cy + hh));
        if existing.iter().all(|b| iou(b, &candidate) <= limit) {
            return candidate;
        }
        let _ = attempt;
    }
    // a half-minimum-size box has IoU <= 0.25 with any box of regular size
    let hw = 0.015;
    let cx = rng.gen_range(hw..(1.0 - hw));
    let cy = rng.gen_range(hw..(1.0 - hw));
    snap_box(BoundingBox::new(cx - hw, cy - hw, cx + hw, cy + hw))
}

fn sample_nested_box(parent: &BoundingBox, rng: &mut ChaCha8Rng) -> BoundingBox {
    // linear scale <= 0.35 keeps IoU with the parent at or below 0.13 and
    // nested heights below the tall threshold
    let pw = parent.x2 - parent.x1;
    let ph = parent.y2 - parent.y1;
    let w = pw * rng.gen_range(0.2..0.35);
    let h = ph * rng.gen_range(0.2..0.35);
    let x1 = parent.x1 + rng.gen_range(0.05..0.95) * (pw - w);
    let mut y1 = parent.y1 + rng.gen_range(0.05..0.95) * (ph - h);
    // keep nested centers on the vertical grid when the parent allows it
    let snapped_cy = snap_center_y(y1 + h / 2.0, h / 2.0);
    if snapped_cy - h / 2.0 > parent.y1 && snapped_cy + h / 2.0 < parent.y2 {
        y1 = snapped_cy - h / 2.0;
    }
    let snapped = snap_box(BoundingBox::new(x1, y1, x1 + w, y1 + h));
    // snapping can break strict containment at the parent border
    let eps = 1.0 / GRID;
    BoundingBox::new(
        snapped.x1.max(parent.x1 + eps),
        snapped.y1.max(parent.y1 + eps),
        snapped.x2.min(parent.x2 - eps),
        snapped.y2.min(parent.y2 - eps),
    )
}

/// Class prototype visual vector, a pure function of the class name.
/// Prototypes occupy a small leading block at modest scale so the appended
/// box coordinates stay salient relative to the class-identity part.
fn class_prototype(name: &str, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(stable_seed(&["proto", name]));
    let active = dim.min(12);
    let mut proto = vec![0.0; dim];
    for v in proto.iter_mut().take(active) {
        let x: f64 = StandardNormal.sample(&mut rng);
        *v = 0.2 * x;
    }
    proto
}

/// Fixed projection used for the global scene feature; depends only on the
/// dimensions, never on the dataset seed.
pub fn global_projection(v_dim: usize, g_dim: usize) -> Matrix {
    let seed = stable_seed(&["global-projection", &v_dim.to_string(), &g_dim.to_string()]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (v_dim as f64).sqrt();
    let mut m = Matrix::zeros(v_dim, g_dim);
    for r in 0..v_dim {
        for c in 0..g_dim {
            let x: f64 = StandardNormal.sample(&mut rng);
            m.set(r, c, x * scale);
        }
    }
    m
}

fn softened_one_hot(class: usize, num_classes: usize, eps: f64) -> Vec<f64> {
    let mut probs = vec![eps / num_classes as f64; num_classes];
    probs[class] += 1.0 - eps;
    probs
}

/// Generate one named split. The scene list is a pure function of
/// (config, split name, seed).
pub fn generate_split(cfg: &GenConfig, split: &str, count: usize, seed: u64) -> Result<Vec<SceneRecord>> {
    cfg.validate()?;
    let vocab = cfg.vocab()?;
    let proto_dim = cfg.v_dim - 4;
    let prototypes: Vec<Vec<f64>> = (0..cfg.num_classes)
        .map(|c| class_prototype(vocab.class_name(c), proto_dim))
        .collect();
    let projection = global_projection(cfg.v_dim, cfg.g_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stable_seed(&["split", split]));

    let mut scenes = Vec::with_capacity(count);
    for idx in 0..count {
        let n = rng.gen_range(cfg.nodes_min..=cfg.nodes_max);
        let mut boxes: Vec<BoundingBox> = Vec::with_capacity(n);
        for k in 0..n {
            let nest = k > 0 && rng.gen_bool(0.2);
            let b = if nest {
                let parent = boxes[rng.gen_range(0..boxes.len())];
                // a nested box stays under the cap against its parent but
                // may still collide with a third box; retry, then fall back
                let limit = cfg.max_pairwise_iou - 0.005;
                let mut candidate = None;
                for _ in 0..50 {
                    let inner = sample_nested_box(&parent, &mut rng);
                    if boxes.iter().all(|b| iou(b, &inner) <= limit) {
                        candidate = Some(inner);
                        break;
                    }
                }
                candidate.unwrap_or_else(|| sample_free_box(&boxes, cfg, &mut rng))
            } else {
                sample_free_box(&boxes, cfg, &mut rng)
            };
            boxes.push(b);
        }
        let classes: Vec<usize> = (0..n).map(|_| rng.gen_range(0..cfg.num_classes)).collect();

        let mut nodes = Vec::with_capacity(n);
        for k in 0..n {
            let mut visual: Vec<f64> = prototypes[classes[k]]
                .iter()
                .map(|&p| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    p + cfg.visual_noise * noise
                })
                .collect();
            visual.extend_from_slice(&boxes[k].coords());
            nodes.push(NodeRecord {
                bbox: boxes[k],
                visual,
                class_probs: softened_one_hot(classes[k], cfg.num_classes, cfg.detector_eps),
                gt_class: classes[k],
            });
        }

        let mut relations = Vec::new();
        for s in 0..n {
            for o in 0..n {
                if s == o || !classes_compatible(classes[s], classes[o], cfg.num_classes) {
                    continue;
                }
                if let Some(rule) = planted_rule(&cfg.rules, &boxes[s], &boxes[o], cfg) {
                    let predicate = cfg.rules.iter().position(|&r| r == rule).expect("enabled") + 1;
                    relations.push(RelationRecord {
                        subject: s,
                        object: o,
                        predicate,
                    });
                }
            }
        }

        // mean visual projected to g_dim
        let mut mean = vec![0.0; cfg.v_dim];
        for node in &nodes {
            for (m, v) in mean.iter_mut().zip(&node.visual) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mean_row = Matrix::from_vec(1, cfg.v_dim, mean)?;
        let global = mean_row.matmul(&projection)?;

        let scene = SceneRecord {
            id: format!("{split}-{idx:05}"),
            nodes,
            relations,
            global_feature: global.data().to_vec(),
        };
        scene.validate(&vocab, idx + 1)?;
        scenes.push(scene);
    }
    Ok(scenes)
}
