//! Axis-aligned box geometry on the unit canvas: union, IoU and greedy NMS.

/// (x1, y1, x2, y2) with x1 < x2 and y1 < y2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BoundingBox { x1, y1, x2, y2 }
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2
            && self.y1 < self.y2
            && [self.x1, self.y1, self.x2, self.y2]
                .iter()
                .all(|v| v.is_finite())
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// True iff `self` lies strictly inside `other`.
    pub fn strictly_inside(&self, other: &BoundingBox) -> bool {
        self.x1 > other.x1 && self.y1 > other.y1 && self.x2 < other.x2 && self.y2 < other.y2
    }

    /// Mirror across the vertical canvas midline.
    pub fn flipped_horizontal(&self) -> BoundingBox {
        BoundingBox {
            x1: 1.0 - self.x2,
            y1: self.y1,
            x2: 1.0 - self.x1,
            y2: self.y2,
        }
    }
}

pub fn intersection_area(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = a.x2.min(b.x2) - a.x1.max(b.x1);
    let h = a.y2.min(b.y2) - a.y1.max(b.y1);
    if w <= 0.0 || h <= 0.0 {
        0.0
    } else {
        w * h
    }
}

/// Smallest box containing both inputs.
pub fn union_box(a: &BoundingBox, b: &BoundingBox) -> BoundingBox {
    BoundingBox {
        x1: a.x1.min(b.x1),
        y1: a.y1.min(b.y1),
        x2: a.x2.max(b.x2),
        y2: a.y2.max(b.y2),
    }
}

/// Intersection over union; disjoint boxes score 0.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = intersection_area(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Greedy non-maximum suppression. Candidates are visited in descending
/// score order (ties broken by lower original index); a candidate is dropped
/// when its IoU with any kept box exceeds `threshold`. Returns kept indices
/// in the visiting order.
pub fn nms(candidates: &[(BoundingBox, f64)], threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        candidates[b]
            .1
            .partial_cmp(&candidates[a].1)
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = kept
            .iter()
            .any(|&k| iou(&candidates[k].0, &candidates[i].0) > threshold);
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}
