//! Scene dataset schema, validation and the line-delimited on-disk format.
//!
//! One scene per line, serialized as a JSON object (see `docs/format.md`).
//! Reals are written in decimal with 17 significant digits so that every
//! value round-trips bit-identically.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

pub const PROB_SUM_TOL: f64 = 1e-9;

/// Object class and predicate names. Predicate index 0 is the reserved
/// "no relation" background and is never ranked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    classes: Vec<String>,
    predicates: Vec<String>,
}

impl Vocab {
    pub fn new(classes: Vec<String>, predicates: Vec<String>) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::Config("vocabulary needs at least 2 object classes".into()));
        }
        if predicates.len() < 2 {
            return Err(Error::Config(
                "vocabulary needs the background predicate plus at least 1 relation type".into(),
            ));
        }
        for (list, what) in [(&classes, "class"), (&predicates, "predicate")] {
            let mut seen = std::collections::BTreeSet::new();
            for name in list.iter() {
                if !seen.insert(name) {
                    return Err(Error::Config(format!("duplicate {what} name `{name}`")));
                }
            }
        }
        Ok(Vocab { classes, predicates })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Total predicate count including the background at index 0.
    pub fn num_predicates(&self) -> usize {
        self.predicates.len()
    }

    pub fn class_name(&self, i: usize) -> &str {
        &self.classes[i]
    }

    pub fn predicate_name(&self, i: usize) -> &str {
        &self.predicates[i]
    }

    pub fn class_names(&self) -> &[String] {
        &self.classes
    }

    /// Stable content hash used to pair checkpoints with datasets.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for c in &self.classes {
            hasher.update(b"c:");
            hasher.update(c.as_bytes());
            hasher.update(b"\n");
        }
        for p in &self.predicates {
            hasher.update(b"p:");
            hasher.update(p.as_bytes());
            hasher.update(b"\n");
        }
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One detected or ground-truth object.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeRecord {
    pub bbox: BoundingBox,
    pub visual: Vec<f64>,
    pub class_probs: Vec<f64>,
    pub gt_class: usize,
}

impl NodeRecord {
    pub fn max_prob_class(&self) -> (usize, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, &p) in self.class_probs.iter().enumerate() {
            if p > best.1 {
                best = (i, p);
            }
        }
        best
    }
}

/// Directed ground-truth relation; `predicate >= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelationRecord {
    pub subject: usize,
    pub object: usize,
    pub predicate: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub id: String,
    pub nodes: Vec<NodeRecord>,
    pub relations: Vec<RelationRecord>,
    pub global_feature: Vec<f64>,
}

impl SceneRecord {
    /// Check every type invariant; `line` is carried into error messages.
    pub fn validate(&self, vocab: &Vocab, line: usize) -> Result<()> {
        let c = vocab.num_classes();
        let p = vocab.num_predicates();
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.bbox.is_valid() {
                return Err(Error::Validation {
                    line,
                    field: "box",
                    message: format!("node {i}: box must satisfy x1<x2 and y1<y2"),
                });
            }
            let [x1, y1, x2, y2] = node.bbox.coords();
            if x1 < 0.0 || y1 < 0.0 || x2 > 1.0 || y2 > 1.0 {
                return Err(Error::Validation {
                    line,
                    field: "box",
                    message: format!("node {i}: box must lie in the unit canvas"),
                });
            }
            if node.class_probs.len() != c {
                return Err(Error::Validation {
                    line,
                    field: "class_probs",
                    message: format!("node {i}: expected {c} entries, got {}", node.class_probs.len()),
                });
            }
            if node.class_probs.iter().any(|&v| !v.is_finite() || v < 0.0) {
                return Err(Error::Validation {
                    line,
                    field: "class_probs",
                    message: format!("node {i}: probabilities must be finite and nonnegative"),
                });
            }
            let sum: f64 = node.class_probs.iter().sum();
            if (sum - 1.0).abs() > PROB_SUM_TOL {
                return Err(Error::Validation {
                    line,
                    field: "class_probs",
                    message: format!("node {i}: probabilities sum to {sum}, expected 1"),
                });
            }
            if node.gt_class >= c {
                return Err(Error::Validation {
                    line,
                    field: "gt_class",
                    message: format!("node {i}: class {} out of range {c}", node.gt_class),
                });
            }
            if node.visual.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation {
                    line,
                    field: "visual",
                    message: format!("node {i}: visual feature must be finite"),
                });
            }
        }
        let mut seen_pairs = std::collections::BTreeSet::new();
        for (i, rel) in self.relations.iter().enumerate() {
            if rel.subject >= self.nodes.len() || rel.object >= self.nodes.len() {
                return Err(Error::Validation {
                    line,
                    field: "relations",
                    message: format!("relation {i}: node index out of range"),
                });
            }
            if rel.subject == rel.object {
                return Err(Error::Validation {
                    line,
                    field: "relations",
                    message: format!("relation {i}: subject equals object"),
                });
            }
            if rel.predicate == 0 || rel.predicate >= p {
                return Err(Error::Validation {
                    line,
                    field: "relations",
                    message: format!("relation {i}: predicate {} out of range 1..{p}", rel.predicate),
                });
            }
            if !seen_pairs.insert((rel.subject, rel.object)) {
                return Err(Error::Validation {
                    line,
                    field: "relations",
                    message: format!(
                        "relation {i}: duplicate ordered pair ({}, {})",
                        rel.subject, rel.object
                    ),
                });
            }
        }
        if self.global_feature.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation {
                line,
                field: "global",
                message: "global feature must be finite".into(),
            });
        }
        Ok(())
    }

    /// Ground-truth predicate for an ordered pair, 0 when unrelated.
    pub fn gt_predicate(&self, subject: usize, object: usize) -> usize {
        self.relations
            .iter()
            .find(|r| r.subject == subject && r.object == object)
            .map(|r| r.predicate)
            .unwrap_or(0)
    }
}

fn fmt_real(out: &mut String, v: f64) {
    write!(out, "{v:.16e}").expect("write to string");
}

fn fmt_reals(out: &mut String, vals: &[f64]) {
    out.push('[');
    for (i, &v) in vals.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        fmt_real(out, v);
    }
    out.push(']');
}

/// Serialize one scene as a single JSON line.
pub fn scene_to_line(scene: &SceneRecord) -> String {
    let mut s = String::new();
    s.push_str("{\"id\":");
    s.push_str(&serde_json::to_string(&scene.id).expect("string encodes"));
    s.push_str(",\"nodes\":[");
    for (i, node) in scene.nodes.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        s.push_str("{\"box\":");
        fmt_reals(&mut s, &node.bbox.coords());
        s.push_str(",\"visual\":");
        fmt_reals(&mut s, &node.visual);
        s.push_str(",\"class_probs\":");
        fmt_reals(&mut s, &node.class_probs);
        write!(s, ",\"gt_class\":{}}}", node.gt_class).expect("write");
    }
    s.push_str("],\"relations\":[");
    for (i, rel) in scene.relations.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        write!(s, "{{\"s\":{},\"o\":{},\"p\":{}}}", rel.subject, rel.object, rel.predicate)
            .expect("write");
    }
    s.push_str("],\"global\":");
    fmt_reals(&mut s, &scene.global_feature);
    s.push('}');
    s
}

#[derive(Deserialize)]
struct RawNode {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    visual: Vec<f64>,
    class_probs: Vec<f64>,
    gt_class: usize,
}

#[derive(Deserialize)]
struct RawRelation {
    s: usize,
    o: usize,
    p: usize,
}

#[derive(Deserialize)]
struct RawScene {
    id: String,
    nodes: Vec<RawNode>,
    relations: Vec<RawRelation>,
    global: Vec<f64>,
}

impl From<RawScene> for SceneRecord {
    fn from(raw: RawScene) -> Self {
        SceneRecord {
            id: raw.id,
            nodes: raw
                .nodes
                .into_iter()
                .map(|n| NodeRecord {
                    bbox: BoundingBox::new(n.bbox[0], n.bbox[1], n.bbox[2], n.bbox[3]),
                    visual: n.visual,
                    class_probs: n.class_probs,
                    gt_class: n.gt_class,
                })
                .collect(),
            relations: raw
                .relations
                .into_iter()
                .map(|r| RelationRecord {
                    subject: r.s,
                    object: r.o,
                    predicate: r.p,
                })
                .collect(),
            global_feature: raw.global,
        }
    }
}

pub fn save_dataset(path: &Path, scenes: &[SceneRecord]) -> Result<()> {
    let display = path.display().to_string();
    let file = fs::File::create(path).map_err(|e| Error::io(&display, e))?;
    let mut w = std::io::BufWriter::new(file);
    for scene in scenes {
        writeln!(w, "{}", scene_to_line(scene)).map_err(|e| Error::io(&display, e))?;
    }
    w.flush().map_err(|e| Error::io(&display, e))?;
    Ok(())
}

/// Load and validate a line-delimited dataset; errors carry 1-based line
/// numbers.
pub fn load_dataset(path: &Path, vocab: &Vocab) -> Result<Vec<SceneRecord>> {
    let display = path.display().to_string();
    let file = fs::File::open(path).map_err(|e| Error::io(&display, e))?;
    let reader = BufReader::new(file);
    let mut scenes = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(&display, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawScene = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let scene: SceneRecord = raw.into();
        scene.validate(vocab, line_no)?;
        scenes.push(scene);
    }
    Ok(scenes)
}
