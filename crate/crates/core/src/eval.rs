//! Triplet ranking and recall evaluation across PREDCLS / SGCLS / SGDET,
//! with and without the graph constraint, plus the frequency-only baseline
//! and the synthetic detector used by SGDET.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{NodeRecord, SceneRecord, Vocab};
use crate::embedding::stable_seed;
use crate::error::{Error, Result};
use crate::freq::FrequencyTable;
use crate::geometry::{intersection_area, iou, nms};
use crate::model::{softmax_row, Mode, RtnModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairPolicy {
    /// All N(N-1) ordered pairs.
    AllPairs,
    /// Ordered pairs whose boxes have positive intersection area.
    OverlapOnly,
}

impl PairPolicy {
    pub fn default_for(mode: Mode) -> Self {
        match mode {
            Mode::PredCls | Mode::SgCls => PairPolicy::AllPairs,
            Mode::SgDet => PairPolicy::OverlapOnly,
        }
    }
}

/// Ordered candidate pairs under a policy, in (i, j) lexicographic order.
pub fn candidate_pairs(nodes: &[NodeRecord], policy: PairPolicy) -> Vec<(usize, usize)> {
    let n = nodes.len();
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let keep = match policy {
                PairPolicy::AllPairs => true,
                PairPolicy::OverlapOnly => {
                    intersection_area(&nodes[i].bbox, &nodes[j].bbox) > 0.0
                }
            };
            if keep {
                out.push((i, j));
            }
        }
    }
    out
}

/// Synthetic detector noise for SGDET.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorNoise {
    /// Gaussian jitter applied to each box coordinate.
    pub box_sigma: f64,
    /// Gaussian noise applied to class log-probabilities.
    pub score_noise: f64,
    /// Per-node probability of adding one spurious detection.
    pub spurious_rate: f64,
    pub nms_iou: f64,
    pub top_k: usize,
}

impl Default for DetectorNoise {
    fn default() -> Self {
        DetectorNoise {
            box_sigma: 0.02,
            score_noise: 0.0,
            spurious_rate: 0.0,
            nms_iou: 0.3,
            top_k: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub mode: Mode,
    pub ks: Vec<usize>,
    pub match_iou: f64,
    pub pair_policy: PairPolicy,
    pub detector: DetectorNoise,
    /// Base seed for the per-scene detector randomness.
    pub seed: u64,
}

impl EvalConfig {
    pub fn for_mode(mode: Mode) -> Self {
        EvalConfig {
            mode,
            ks: vec![20, 50, 100],
            match_iou: 0.5,
            pair_policy: PairPolicy::default_for(mode),
            detector: DetectorNoise::default(),
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() {
            return Err(Error::Config("K list must be non-empty".into()));
        }
        if self.ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("K list must be strictly ascending".into()));
        }
        Ok(())
    }
}

/// Per-scene model outputs reduced to what ranking needs.
#[derive(Debug, Clone)]
pub struct ScenePredictions {
    /// Predicted class per node (ground truth in PREDCLS).
    pub node_classes: Vec<usize>,
    /// Class confidence per node (1.0 in PREDCLS).
    pub node_scores: Vec<f64>,
    pub pairs: Vec<(usize, usize)>,
    /// Per pair: score per predicate (index 0 is background, never ranked).
    pub predicate_scores: Vec<Vec<f64>>,
}

pub trait ScenePredictor {
    fn predict(&self, scene: &SceneRecord, pairs: &[(usize, usize)], mode: Mode)
        -> Result<ScenePredictions>;
}

impl<'a> ScenePredictor for RtnModel<'a> {
    fn predict(
        &self,
        scene: &SceneRecord,
        pairs: &[(usize, usize)],
        mode: Mode,
    ) -> Result<ScenePredictions> {
        let out = self.run(scene, pairs, mode)?;
        let n = scene.nodes.len();
        let mut node_classes = Vec::with_capacity(n);
        let mut node_scores = Vec::with_capacity(n);
        for i in 0..n {
            match mode {
                Mode::PredCls => {
                    node_classes.push(scene.nodes[i].gt_class);
                    node_scores.push(1.0);
                }
                Mode::SgCls | Mode::SgDet => {
                    let probs = softmax_row(out.object_logits.row(i));
                    let mut best = 0;
                    for (c, &p) in probs.iter().enumerate() {
                        if p > probs[best] {
                            best = c;
                        }
                    }
                    node_classes.push(best);
                    node_scores.push(probs[best]);
                }
            }
        }
        let mut predicate_scores = Vec::with_capacity(pairs.len());
        for (row, &(_, _)) in pairs.iter().enumerate() {
            let mut scores = softmax_row(out.relation_logits.row(row));
            if self.model.use_freq_bias && self.model.fq_post_softmax {
                let fq = self.fq.expect("fq required by use_freq_bias");
                let (c_s, c_o) = out.fq_class_pairs[row];
                for (s, p) in scores.iter_mut().zip(fq.probs(c_s, c_o)) {
                    *s += p;
                }
            }
            predicate_scores.push(scores);
        }
        Ok(ScenePredictions {
            node_classes,
            node_scores,
            pairs: pairs.to_vec(),
            predicate_scores,
        })
    }
}

/// Frequency-only comparison model: predicate scores come straight from the
/// smoothed class-pair statistics.
pub struct FrequencyBaseline<'a> {
    pub fq: &'a FrequencyTable,
}

impl<'a> ScenePredictor for FrequencyBaseline<'a> {
    fn predict(
        &self,
        scene: &SceneRecord,
        pairs: &[(usize, usize)],
        mode: Mode,
    ) -> Result<ScenePredictions> {
        let n = scene.nodes.len();
        let mut node_classes = Vec::with_capacity(n);
        let mut node_scores = Vec::with_capacity(n);
        for node in &scene.nodes {
            match mode {
                Mode::PredCls => {
                    node_classes.push(node.gt_class);
                    node_scores.push(1.0);
                }
                Mode::SgCls | Mode::SgDet => {
                    let (class, score) = node.max_prob_class();
                    node_classes.push(class);
                    node_scores.push(score);
                }
            }
        }
        let predicate_scores = pairs
            .iter()
            .map(|&(i, j)| self.fq.probs(node_classes[i], node_classes[j]))
            .collect();
        Ok(ScenePredictions {
            node_classes,
            node_scores,
            pairs: pairs.to_vec(),
            predicate_scores,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletPrediction {
    pub pair_index: usize,
    pub subject: usize,
    pub object: usize,
    pub predicate: usize,
    pub score: f64,
}

/// Rank directed triplets by subject-score x predicate-score x object-score.
/// Under the graph constraint only the best predicate per ordered pair
/// survives. Sort is descending by score with ties broken by (pair index,
/// predicate index).
pub fn rank_triplets(preds: &ScenePredictions, graph_constraint: bool) -> Vec<TripletPrediction> {
    let mut out = Vec::new();
    for (pair_index, &(s, o)) in preds.pairs.iter().enumerate() {
        let scores = &preds.predicate_scores[pair_index];
        let class_factor = preds.node_scores[s] * preds.node_scores[o];
        let mut push = |predicate: usize| {
            out.push(TripletPrediction {
                pair_index,
                subject: s,
                object: o,
                predicate,
                score: class_factor * scores[predicate],
            });
        };
        if graph_constraint {
            let mut best = 1;
            for p in 2..scores.len() {
                if scores[p] > scores[best] {
                    best = p;
                }
            }
            push(best);
        } else {
            for p in 1..scores.len() {
                push(p);
            }
        }
    }
    out.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("finite scores")
            .then(a.pair_index.cmp(&b.pair_index))
            .then(a.predicate.cmp(&b.predicate))
    });
    out
}

/// What a prediction must agree with to claim a ground-truth triplet.
pub struct MatchContext<'a> {
    pub mode: Mode,
    pub match_iou: f64,
    /// Nodes the predictions index into (detections in SGDET).
    pub det_nodes: &'a [NodeRecord],
    pub det_classes: &'a [usize],
    pub gt: &'a SceneRecord,
}

fn prediction_matches_gt(
    pred: &TripletPrediction,
    gt_rel: &crate::data::RelationRecord,
    ctx: &MatchContext,
) -> bool {
    if pred.predicate != gt_rel.predicate {
        return false;
    }
    match ctx.mode {
        Mode::PredCls => pred.subject == gt_rel.subject && pred.object == gt_rel.object,
        Mode::SgCls => {
            pred.subject == gt_rel.subject
                && pred.object == gt_rel.object
                && ctx.det_classes[pred.subject] == ctx.gt.nodes[gt_rel.subject].gt_class
                && ctx.det_classes[pred.object] == ctx.gt.nodes[gt_rel.object].gt_class
        }
        Mode::SgDet => {
            let s_ok = iou(
                &ctx.det_nodes[pred.subject].bbox,
                &ctx.gt.nodes[gt_rel.subject].bbox,
            ) >= ctx.match_iou
                && ctx.det_classes[pred.subject] == ctx.gt.nodes[gt_rel.subject].gt_class;
            let o_ok = iou(
                &ctx.det_nodes[pred.object].bbox,
                &ctx.gt.nodes[gt_rel.object].bbox,
            ) >= ctx.match_iou
                && ctx.det_classes[pred.object] == ctx.gt.nodes[gt_rel.object].gt_class;
            s_ok && o_ok
        }
    }
}

/// Greedy rank-order matching. Returns, per ground-truth relation, the rank
/// (0-based) of the prediction that claimed it, if any. Each ground truth is
/// matched at most once and each prediction claims at most one ground truth,
/// so recall@K for any K is derived by thresholding the ranks.
pub fn match_triplets(ranked: &[TripletPrediction], ctx: &MatchContext) -> Vec<Option<usize>> {
    let mut gt_rank: Vec<Option<usize>> = vec![None; ctx.gt.relations.len()];
    for (rank, pred) in ranked.iter().enumerate() {
        for (g, gt_rel) in ctx.gt.relations.iter().enumerate() {
            if gt_rank[g].is_none() && prediction_matches_gt(pred, gt_rel, ctx) {
                gt_rank[g] = Some(rank);
                break;
            }
        }
    }
    gt_rank
}

/// |gt matched within top K| / |gt| for each K.
pub fn recall_at_k(gt_ranks: &[Option<usize>], ks: &[usize]) -> Vec<f64> {
    let gt_count = gt_ranks.len();
    ks.iter()
        .map(|&k| {
            if gt_count == 0 {
                return 0.0;
            }
            let matched = gt_ranks
                .iter()
                .filter(|r| matches!(r, Some(rank) if *rank < k))
                .count();
            matched as f64 / gt_count as f64
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredicateRecall {
    pub predicate: String,
    pub gt_count: usize,
    /// Recall per K, pooled over the dataset.
    pub recalls: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintReport {
    pub graph_constraint: bool,
    /// Mean of per-scene recalls, aligned with `ks`.
    pub recall: Vec<f64>,
    /// Unweighted mean over predicate classes with at least one instance.
    pub mean_recall: Vec<f64>,
    pub per_predicate: Vec<PredicateRecall>,
    pub gt_triplets: usize,
    pub scenes_scored: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub mode: Mode,
    pub ks: Vec<usize>,
    pub constraints: Vec<ConstraintReport>,
}

/// Detections produced by the synthetic SGDET detector.
#[derive(Debug, Clone)]
pub struct Detections {
    pub nodes: Vec<NodeRecord>,
    pub scores: Vec<f64>,
}

fn repair_interval(lo: f64, hi: f64) -> (f64, f64) {
    let (mut lo, mut hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
    lo = lo.clamp(0.0, 1.0);
    hi = hi.clamp(0.0, 1.0);
    if hi - lo < 1e-4 {
        let c = ((lo + hi) / 2.0).clamp(5e-5, 1.0 - 5e-5);
        lo = c - 5e-5;
        hi = c + 5e-5;
    }
    (lo, hi)
}

/// Jitter ground-truth boxes, perturb class scores, add spurious boxes, run
/// NMS and keep the top-k detections (original relative order preserved).
/// With zero noise and no spurious boxes the detections equal the ground
/// truth exactly.
pub fn simulate_detections(
    scene: &SceneRecord,
    noise: &DetectorNoise,
    rng: &mut ChaCha8Rng,
) -> Detections {
    let c = scene.nodes[0].class_probs.len();
    let mut nodes: Vec<NodeRecord> = Vec::with_capacity(scene.nodes.len());
    for node in &scene.nodes {
        let mut det = node.clone();
        if noise.box_sigma > 0.0 {
            let [x1, y1, x2, y2] = det.bbox.coords();
            let mut jitter = |v: f64| {
                let n: f64 = StandardNormal.sample(rng);
                v + noise.box_sigma * n
            };
            let (nx1, nx2) = repair_interval(jitter(x1), jitter(x2));
            let (ny1, ny2) = repair_interval(jitter(y1), jitter(y2));
            det.bbox = crate::geometry::BoundingBox::new(nx1, ny1, nx2, ny2);
        }
        if noise.score_noise > 0.0 {
            let logits: Vec<f64> = det
                .class_probs
                .iter()
                .map(|&p| {
                    let n: f64 = StandardNormal.sample(rng);
                    (p + 1e-12).ln() + noise.score_noise * n
                })
                .collect();
            det.class_probs = softmax_row(&logits);
        }
        nodes.push(det);
    }
    if noise.spurious_rate > 0.0 {
        let visual_len = scene.nodes[0].visual.len();
        let count = scene.nodes.len();
        for _ in 0..count {
            if !rng.gen_bool(noise.spurious_rate) {
                continue;
            }
            let hw = rng.gen_range(0.03..0.15);
            let hh = rng.gen_range(0.03..0.15);
            let cx = rng.gen_range(hw..(1.0 - hw));
            let cy = rng.gen_range(hh..(1.0 - hh));
            let bbox = crate::geometry::BoundingBox::new(cx - hw, cy - hh, cx + hw, cy + hh);
            let class = rng.gen_range(0..c);
            let mut probs = vec![0.1 / (c as f64 - 1.0); c];
            probs[class] = 0.9;
            // borrow a plausible visual: mean of scene visuals with the
            // spurious box appended in the trailing coordinate slots
            let mut visual = vec![0.0; visual_len];
            for node in &scene.nodes {
                for (v, x) in visual.iter_mut().zip(&node.visual) {
                    *v += x / scene.nodes.len() as f64;
                }
            }
            if visual_len >= 4 {
                visual[visual_len - 4..].copy_from_slice(&bbox.coords());
            }
            nodes.push(NodeRecord {
                bbox,
                visual,
                class_probs: probs,
                gt_class: class,
            });
        }
    }
    let scored: Vec<(crate::geometry::BoundingBox, f64)> = nodes
        .iter()
        .map(|n| (n.bbox, n.max_prob_class().1))
        .collect();
    let mut kept = nms(&scored, noise.nms_iou);
    kept.sort_by(|&a, &b| {
        scored[b]
            .1
            .partial_cmp(&scored[a].1)
            .expect("finite")
            .then(a.cmp(&b))
    });
    kept.truncate(noise.top_k);
    kept.sort_unstable();
    Detections {
        scores: kept.iter().map(|&i| scored[i].1).collect(),
        nodes: kept.into_iter().map(|i| nodes[i].clone()).collect(),
    }
}

struct SceneOutcome {
    /// Match rank per gt relation, per constraint setting.
    gt_ranks: Vec<Vec<Option<usize>>>,
    gt_predicates: Vec<usize>,
}

fn evaluate_scene(
    scene: &SceneRecord,
    predictor: &dyn ScenePredictor,
    cfg: &EvalConfig,
    constraints: &[bool],
) -> Result<SceneOutcome> {
    let (det_scene, det_owned);
    match cfg.mode {
        Mode::SgDet => {
            let mut rng =
                ChaCha8Rng::seed_from_u64(cfg.seed ^ stable_seed(&["detect", &scene.id]));
            let det = simulate_detections(scene, &cfg.detector, &mut rng);
            det_owned = SceneRecord {
                id: scene.id.clone(),
                nodes: det.nodes,
                relations: vec![],
                global_feature: scene.global_feature.clone(),
            };
            det_scene = &det_owned;
        }
        _ => det_scene = scene,
    }
    let pairs = candidate_pairs(&det_scene.nodes, cfg.pair_policy);
    let preds = predictor.predict(det_scene, &pairs, cfg.mode)?;
    let ctx = MatchContext {
        mode: cfg.mode,
        match_iou: cfg.match_iou,
        det_nodes: &det_scene.nodes,
        det_classes: &preds.node_classes,
        gt: scene,
    };
    let mut gt_ranks = Vec::with_capacity(constraints.len());
    for &constraint in constraints {
        let ranked = rank_triplets(&preds, constraint);
        gt_ranks.push(match_triplets(&ranked, &ctx));
    }
    Ok(SceneOutcome {
        gt_ranks,
        gt_predicates: scene.relations.iter().map(|r| r.predicate).collect(),
    })
}

/// Evaluate a predictor over a dataset for each requested constraint
/// setting. Scenes with no ground-truth relations are excluded from the
/// scene-averaged recall.
pub fn evaluate(
    scenes: &[SceneRecord],
    predictor: &dyn ScenePredictor,
    vocab: &Vocab,
    cfg: &EvalConfig,
    constraints: &[bool],
) -> Result<MetricReport> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty dataset".into()));
    }
    let p = vocab.num_predicates();
    let mut per_scene: Vec<SceneOutcome> = Vec::with_capacity(scenes.len());
    for scene in scenes {
        per_scene.push(evaluate_scene(scene, predictor, cfg, constraints)?);
    }

    let mut reports = Vec::with_capacity(constraints.len());
    for (ci, &constraint) in constraints.iter().enumerate() {
        let mut recall_sums = vec![0.0; cfg.ks.len()];
        let mut scenes_scored = 0usize;
        let mut gt_triplets = 0usize;
        let mut class_total = vec![0usize; p];
        let mut class_matched = vec![vec![0usize; p]; cfg.ks.len()];
        for outcome in &per_scene {
            let ranks = &outcome.gt_ranks[ci];
            gt_triplets += ranks.len();
            if !ranks.is_empty() {
                scenes_scored += 1;
                for (slot, r) in recall_sums.iter_mut().zip(recall_at_k(ranks, &cfg.ks)) {
                    *slot += r;
                }
            }
            for (rank, &predicate) in ranks.iter().zip(&outcome.gt_predicates) {
                class_total[predicate] += 1;
                for (ki, &k) in cfg.ks.iter().enumerate() {
                    if matches!(rank, Some(r) if *r < k) {
                        class_matched[ki][predicate] += 1;
                    }
                }
            }
        }
        let recall: Vec<f64> = recall_sums
            .iter()
            .map(|&s| if scenes_scored > 0 { s / scenes_scored as f64 } else { 0.0 })
            .collect();
        let mut per_predicate = Vec::new();
        for predicate in 1..p {
            if class_total[predicate] == 0 {
                continue;
            }
            per_predicate.push(PredicateRecall {
                predicate: vocab.predicate_name(predicate).to_string(),
                gt_count: class_total[predicate],
                recalls: (0..cfg.ks.len())
                    .map(|ki| class_matched[ki][predicate] as f64 / class_total[predicate] as f64)
                    .collect(),
            });
        }
        let mean_recall: Vec<f64> = (0..cfg.ks.len())
            .map(|ki| {
                if per_predicate.is_empty() {
                    0.0
                } else {
                    per_predicate.iter().map(|pr| pr.recalls[ki]).sum::<f64>()
                        / per_predicate.len() as f64
                }
            })
            .collect();

        // metric order sanity: monotone in K, recalls in range
        for w in recall.windows(2) {
            debug_assert!(w[0] <= w[1] + 1e-12);
        }
        debug_assert!(recall.iter().all(|r| (0.0..=1.0).contains(r)));

        reports.push(ConstraintReport {
            graph_constraint: constraint,
            recall,
            mean_recall,
            per_predicate,
            gt_triplets,
            scenes_scored,
        });
    }
    Ok(MetricReport {
        mode: cfg.mode,
        ks: cfg.ks.clone(),
        constraints: reports,
    })
}

impl MetricReport {
    /// Comma-separated rendering: a summary block (mode x constraint x K)
    /// followed by a per-predicate recall block.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("mode,constraint,K,recall,mean_recall,gt_triplets,scenes\n");
        for report in &self.constraints {
            let label = if report.graph_constraint { "with" } else { "without" };
            for (ki, &k) in self.ks.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{},{:.6},{:.6},{},{}\n",
                    self.mode.name(),
                    label,
                    k,
                    report.recall[ki],
                    report.mean_recall[ki],
                    report.gt_triplets,
                    report.scenes_scored
                ));
            }
        }
        out.push('\n');
        out.push_str("predicate,constraint,gt_count");
        for &k in &self.ks {
            out.push_str(&format!(",recall@{k}"));
        }
        out.push('\n');
        for report in &self.constraints {
            let label = if report.graph_constraint { "with" } else { "without" };
            for pr in &report.per_predicate {
                out.push_str(&format!("{},{},{}", pr.predicate, label, pr.gt_count));
                for r in &pr.recalls {
                    out.push_str(&format!(",{r:.6}"));
                }
                out.push('\n');
            }
        }
        out
    }
}
