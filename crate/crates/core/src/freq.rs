//! Predicate frequency statistics conditioned on the (subject class, object
//! class) pair, Laplace-smoothed and stored as log-probabilities. Serves both
//! as the bias added to relation logits and as the frequency-only baseline.

use crate::data::{SceneRecord, Vocab};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyTable {
    num_classes: usize,
    num_predicates: usize,
    /// C x C x p, indexed [subject class][object class][predicate].
    logits: Vec<f64>,
}

impl FrequencyTable {
    pub fn num_predicates(&self) -> usize {
        self.num_predicates
    }

    #[inline]
    fn offset(&self, c_s: usize, c_o: usize) -> usize {
        (c_s * self.num_classes + c_o) * self.num_predicates
    }

    /// Log-probabilities of all predicates for one class pair.
    pub fn logits(&self, c_s: usize, c_o: usize) -> &[f64] {
        let off = self.offset(c_s, c_o);
        &self.logits[off..off + self.num_predicates]
    }

    /// Probabilities (`exp` of the stored logits) for one class pair.
    pub fn probs(&self, c_s: usize, c_o: usize) -> Vec<f64> {
        self.logits(c_s, c_o).iter().map(|&l| l.exp()).collect()
    }
}

/// Count predicates per ordered class pair over `train` and smooth.
///
/// Every ordered node pair without a ground-truth relation contributes one
/// count to the background predicate 0, so the table is a distribution over
/// "which predicate, if any" per candidate pair:
/// `logit[cs][co][r] = ln((count + alpha) / (total + alpha * p))`.
pub fn build_frequency_table(
    train: &[SceneRecord],
    vocab: &Vocab,
    alpha: f64,
) -> Result<FrequencyTable> {
    if alpha <= 0.0 {
        return Err(Error::Config(format!(
            "frequency smoothing alpha must be positive, got {alpha}"
        )));
    }
    let c = vocab.num_classes();
    let p = vocab.num_predicates();
    let mut counts = vec![0u64; c * c * p];
    for scene in train {
        for s in 0..scene.nodes.len() {
            for o in 0..scene.nodes.len() {
                if s == o {
                    continue;
                }
                let predicate = scene.gt_predicate(s, o);
                let c_s = scene.nodes[s].gt_class;
                let c_o = scene.nodes[o].gt_class;
                counts[(c_s * c + c_o) * p + predicate] += 1;
            }
        }
    }
    let mut logits = vec![0.0; c * c * p];
    for pair in 0..c * c {
        let slice = &counts[pair * p..(pair + 1) * p];
        let total: u64 = slice.iter().sum();
        let denom = total as f64 + alpha * p as f64;
        for (r, &count) in slice.iter().enumerate() {
            logits[pair * p + r] = ((count as f64 + alpha) / denom).ln();
        }
    }
    Ok(FrequencyTable {
        num_classes: c,
        num_predicates: p,
        logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{NodeRecord, RelationRecord};
    use crate::geometry::BoundingBox;

    fn vocab3() -> Vocab {
        Vocab::new(
            vec!["a".into(), "b".into()],
            vec!["none".into(), "r1".into(), "r2".into()],
        )
        .unwrap()
    }

    fn node(class: usize) -> NodeRecord {
        NodeRecord {
            bbox: BoundingBox::new(0.1, 0.1, 0.2, 0.2),
            visual: vec![0.0],
            class_probs: vec![
                if class == 0 { 1.0 } else { 0.0 },
                if class == 1 { 1.0 } else { 0.0 },
            ],
            gt_class: class,
        }
    }

    #[test]
    fn empty_data_gives_uniform_slices() {
        let t = build_frequency_table(&[], &vocab3(), 1.0).unwrap();
        let expected = -(3.0_f64).ln();
        for c_s in 0..2 {
            for c_o in 0..2 {
                for &l in t.logits(c_s, c_o) {
                    assert!((l - expected).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_triplet_closed_form() {
        // one 2-node scene with both directions annotated leaves zero
        // background pairs for (a,b)
        let scene = SceneRecord {
            id: "s".into(),
            nodes: vec![node(0), node(1)],
            relations: vec![
                RelationRecord { subject: 0, object: 1, predicate: 1 },
                RelationRecord { subject: 1, object: 0, predicate: 2 },
            ],
            global_feature: vec![0.0],
        };
        let t = build_frequency_table(&[scene], &vocab3(), 1.0).unwrap();
        // count(a,b,r1)=1, total=1, p=3: ln(2/4)
        let l = t.logits(0, 1)[1];
        assert!((l - (2.0f64 / 4.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn background_counted_per_unrelated_pair() {
        let scene = SceneRecord {
            id: "s".into(),
            nodes: vec![node(0), node(1)],
            relations: vec![RelationRecord { subject: 0, object: 1, predicate: 1 }],
            global_feature: vec![0.0],
        };
        let t = build_frequency_table(&[scene], &vocab3(), 1.0).unwrap();
        // the (b,a) ordered pair has no relation: count(b,a,none)=1
        let l = t.logits(1, 0)[0];
        assert!((l - (2.0f64 / 4.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn slices_normalize_on_random_counts() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let vocab = vocab3();
        // random scenes with random relations
        let mut scenes = Vec::new();
        for i in 0..30 {
            let nodes: Vec<NodeRecord> = (0..3).map(|_| node(rng.gen_range(0..2))).collect();
            let mut relations = Vec::new();
            if rng.gen_bool(0.7) {
                relations.push(RelationRecord {
                    subject: 0,
                    object: 1,
                    predicate: rng.gen_range(1..3),
                });
            }
            scenes.push(SceneRecord {
                id: format!("s{i}"),
                nodes,
                relations,
                global_feature: vec![0.0],
            });
        }
        let t = build_frequency_table(&scenes, &vocab, 0.37).unwrap();
        for c_s in 0..2 {
            for c_o in 0..2 {
                let sum: f64 = t.probs(c_s, c_o).iter().sum();
                assert!((sum - 1.0).abs() < 1e-9, "slice ({c_s},{c_o}) sums to {sum}");
            }
        }
    }
}
