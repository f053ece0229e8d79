//! Image graphs: detected objects as nodes, pairwise spatial attributes as
//! directed edges.
//!
//! Coordinates follow the image frame delivered by detectors: the origin is
//! the top-left corner and y grows downward. The edge angle is measured from
//! the positive horizontal axis in that frame, so its sine flips sign
//! compared to the usual mathematical orientation.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Array;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("degenerate box [{x1}, {y1}, {x2}, {y2}]: requires x2 > x1, y2 > y1 and finite, non-negative coordinates")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },
}

/// Axis-aligned box in pixel coordinates, `(x1, y1)` top-left inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", try_from = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GraphError> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite() && *v >= 0.0);
        if !finite || x2 <= x1 || y2 <= y1 {
            return Err(GraphError::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = String;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3]).map_err(|e| e.to_string())
    }
}

/// One detector output: box, class, confidence and ingested visual features
/// (a flat vector or a channels x 7 x 7 map, depending on the dataset).
#[derive(Debug, Clone)]
pub struct DetectedObject {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
    pub visual: Option<Array>,
}

/// Ground-truth triplet used for evaluation and for building the
/// relationship prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtTriplet {
    pub subj_box: BBox,
    pub subj_class: usize,
    pub predicate: usize,
    pub obj_box: BBox,
    pub obj_class: usize,
}

/// A validated image entry: detections, image-level predicate labels and
/// (for evaluation) ground-truth triplets.
#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub image_id: String,
    pub width: f64,
    pub height: f64,
    pub objects: Vec<DetectedObject>,
    pub predicate_labels: Vec<u8>,
    pub gt_triplets: Vec<GtTriplet>,
}

/// Which directed pairs become edges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GraphStructure {
    /// Every ordered pair (i, j), i != j.
    FullyConnected,
    /// Edge (i, j) exists iff the class of node i is in the set. Encodes a
    /// structural subject prior (e.g. only humans act as subjects).
    SubjectClasses(BTreeSet<usize>),
}

#[derive(Debug, Clone)]
pub struct GraphNode {
    pub spatial: [f64; 3],
    pub visual: Option<Array>,
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Debug, Clone)]
pub struct GraphEdge {
    pub from: usize,
    pub to: usize,
    pub features: [f64; 5],
}

/// Directed graph over one image's objects.
#[derive(Debug, Clone)]
pub struct ImageGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

/// `[w/h, h/w, wh / (WH)]` for a box inside a `W x H` image.
pub fn spatial_features(b: &BBox, image_w: f64, image_h: f64) -> [f64; 3] {
    let (w, h) = (b.width(), b.height());
    [w / h, h / w, (w * h) / (image_w * image_h)]
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Pairwise spatial attributes of the directed pair i -> j:
/// `[dist(centers)/sqrt(WH), sin(angle), cos(angle), IoU, area_j/area_i]`.
/// Coincident centers yield sin = cos = 0.
pub fn edge_features(b_i: &BBox, b_j: &BBox, image_w: f64, image_h: f64) -> [f64; 5] {
    let (cx_i, cy_i) = b_i.center();
    let (cx_j, cy_j) = b_j.center();
    let dx = cx_j - cx_i;
    let dy = cy_j - cy_i;
    let norm = (dx * dx + dy * dy).sqrt();
    let (sin, cos) = if norm == 0.0 {
        (0.0, 0.0)
    } else {
        (dy / norm, dx / norm)
    };
    [
        norm / (image_w * image_h).sqrt(),
        sin,
        cos,
        iou(b_j, b_i),
        b_j.area() / b_i.area(),
    ]
}

/// Keeps objects with `score >= threshold`, preserving order.
pub fn filter_detections(objects: Vec<DetectedObject>, threshold: f64) -> Vec<DetectedObject> {
    objects
        .into_iter()
        .filter(|o| o.score >= threshold)
        .collect()
}

/// Builds the image graph: nodes carry spatial and visual features, edges
/// are enumerated in lexicographic (i, j) order under the structure mask.
pub fn build_graph(
    objects: &[DetectedObject],
    image_w: f64,
    image_h: f64,
    structure: &GraphStructure,
) -> ImageGraph {
    let nodes: Vec<GraphNode> = objects
        .iter()
        .map(|o| GraphNode {
            spatial: spatial_features(&o.bbox, image_w, image_h),
            visual: o.visual.clone(),
            class_id: o.class_id,
            score: o.score,
            bbox: o.bbox,
        })
        .collect();
    let mut edges = Vec::new();
    for i in 0..nodes.len() {
        let allowed = match structure {
            GraphStructure::FullyConnected => true,
            GraphStructure::SubjectClasses(set) => set.contains(&nodes[i].class_id),
        };
        if !allowed {
            continue;
        }
        for j in 0..nodes.len() {
            if i == j {
                continue;
            }
            edges.push(GraphEdge {
                from: i,
                to: j,
                features: edge_features(&objects[i].bbox, &objects[j].bbox, image_w, image_h),
            });
        }
    }
    ImageGraph { nodes, edges }
}
