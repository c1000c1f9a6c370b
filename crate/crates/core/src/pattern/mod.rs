//! Sewing-pattern domain types, panel geometry, metrics and file formats.

pub mod geometry;
pub mod io;
pub mod metrics;

use std::collections::BTreeSet;

pub use geometry::{
    control_point, drape_point, euler_matrix, rasterize_panel, sample_edge, Mask, MaskGrid,
};
pub use metrics::{panel_iou, pattern_metrics, pattern_metrics_on, stitch_pr, MetricsReport};

/// Upper bound on edges per panel.
pub const MAX_EDGES: usize = 8;

/// Size of the panel-class vocabulary.
pub const NUM_CLASSES: usize = 23;

pub const PANEL_CLASSES: [&str; NUM_CLASSES] = [
    "skirt-front",
    "skirt-back",
    "skirt-front-left",
    "skirt-front-right",
    "skirt-back-left",
    "skirt-back-right",
    "waistband-front",
    "waistband-back",
    "tee-front",
    "tee-back",
    "sleeve-left",
    "sleeve-right",
    "tank-front",
    "tank-back",
    "pant-front",
    "pant-back",
    "jacket-front-left",
    "jacket-front-right",
    "jacket-back",
    "jacket-sleeve-left",
    "jacket-sleeve-right",
    "collar",
    "hood",
];

pub fn class_index(name: &str) -> Option<usize> {
    PANEL_CLASSES.iter().position(|c| *c == name)
}

#[derive(Debug, thiserror::Error)]
pub enum PatternError {
    #[error("panel does not fit a {height}x{width} mask at {scale} cm/px (extent {extent_cm:.2} cm)")]
    PanelOutOfBounds {
        height: usize,
        width: usize,
        scale: f64,
        extent_cm: f64,
    },
    #[error("degenerate panel: area {area_px:.3} px is below 4 px")]
    DegeneratePanel { area_px: f64 },
    #[error("mask resolution mismatch: {left:?} vs {right:?}")]
    ResolutionMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invariant violated at {field}: {message}")]
    InvariantViolation { field: String, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

fn violation(field: impl Into<String>, message: impl Into<String>) -> PatternError {
    PatternError::InvariantViolation {
        field: field.into(),
        message: message.into(),
    }
}

/// Edge-frame control point: `cx` along the chord, `cy` along the chord's
/// left normal, both as fractions of the chord length.
pub type Curvature = [f64; 2];

/// A flat panel with its placement around the body.
#[derive(Clone, Debug, PartialEq)]
pub struct Panel {
    pub class_id: usize,
    /// Counter-clockwise, centimetres, panel-local frame.
    pub vertices: Vec<[f64; 2]>,
    /// One entry per edge; edge `i` runs from vertex `i` to `i+1 mod n`.
    pub curvatures: Vec<Option<Curvature>>,
    /// Intrinsic X-Y-Z Euler angles in degrees.
    pub rotation: [f64; 3],
    /// Centimetres, body frame.
    pub translation: [f64; 3],
}

impl Panel {
    pub fn straight(class_id: usize, vertices: Vec<[f64; 2]>) -> Self {
        let n = vertices.len();
        Self {
            class_id,
            vertices,
            curvatures: vec![None; n],
            rotation: [0.0; 3],
            translation: [0.0; 3],
        }
    }

    pub fn num_edges(&self) -> usize {
        self.vertices.len()
    }

    pub fn edge(&self, i: usize) -> ([f64; 2], [f64; 2], Option<Curvature>) {
        let n = self.vertices.len();
        (self.vertices[i], self.vertices[(i + 1) % n], self.curvatures[i])
    }

    /// Closed outline with `per_edge` samples per edge; each edge contributes
    /// its start point but not its end point.
    pub fn outline(&self, per_edge: usize) -> Vec<[f64; 2]> {
        let per_edge = per_edge.max(2);
        let mut out = Vec::with_capacity(self.num_edges() * per_edge);
        for i in 0..self.num_edges() {
            let (s, e, c) = self.edge(i);
            let pts = sample_edge(s, e, c, per_edge + 1);
            out.extend_from_slice(&pts[..per_edge]);
        }
        out
    }

    /// Signed area of the straight-edge polygon (positive when CCW).
    pub fn polygon_area(&self) -> f64 {
        geometry::signed_area(&self.vertices)
    }

    pub fn validate(&self) -> Result<(), PatternError> {
        let n = self.vertices.len();
        if self.class_id >= NUM_CLASSES {
            return Err(violation("class", format!("class {} outside vocabulary", self.class_id)));
        }
        if !(3..=MAX_EDGES).contains(&n) {
            return Err(violation("vertices", format!("{n} edges, expected 3..={MAX_EDGES}")));
        }
        if self.curvatures.len() != n {
            return Err(violation(
                "curvatures",
                format!("{} entries for {n} edges", self.curvatures.len()),
            ));
        }
        let finite = self.vertices.iter().flatten().all(|v| v.is_finite())
            && self.curvatures.iter().flatten().flatten().all(|v| v.is_finite())
            && self.rotation.iter().chain(&self.translation).all(|v| v.is_finite());
        if !finite {
            return Err(violation("panel", "non-finite value"));
        }
        if !geometry::is_simple_polygon(&self.vertices) {
            return Err(violation("vertices", "polygon is not simple"));
        }
        if self.polygon_area() <= 0.0 {
            return Err(violation("vertices", "vertices are not counter-clockwise"));
        }
        Ok(())
    }
}

/// Reference to edge `edge` of panel `panel`.
pub type EdgeRef = (usize, usize);

/// Unordered edge pair, stored with the smaller reference first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Stitch {
    pub a: EdgeRef,
    pub b: EdgeRef,
}

impl Stitch {
    pub fn new(x: EdgeRef, y: EdgeRef) -> Self {
        if x <= y {
            Self { a: x, b: y }
        } else {
            Self { a: y, b: x }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SewingPattern {
    pub panels: Vec<Panel>,
    pub stitches: Vec<Stitch>,
}

impl SewingPattern {
    pub fn validate(&self) -> Result<(), PatternError> {
        for (i, p) in self.panels.iter().enumerate() {
            p.validate().map_err(|e| match e {
                PatternError::InvariantViolation { field, message } => {
                    violation(format!("panels[{i}].{field}"), message)
                }
                other => other,
            })?;
        }
        let mut used = BTreeSet::new();
        for (i, s) in self.stitches.iter().enumerate() {
            for r in [s.a, s.b] {
                let ok = self
                    .panels
                    .get(r.0)
                    .is_some_and(|p| r.1 < p.num_edges());
                if !ok {
                    return Err(violation(
                        format!("stitches[{i}]"),
                        format!("edge ({}, {}) does not exist", r.0, r.1),
                    ));
                }
                if !used.insert(r) {
                    return Err(violation(
                        format!("stitches[{i}]"),
                        format!("edge ({}, {}) already stitched", r.0, r.1),
                    ));
                }
            }
            if s.a.0 == s.b.0 && s.a.1 == s.b.1 {
                return Err(violation(format!("stitches[{i}]"), "edge stitched to itself"));
            }
        }
        Ok(())
    }

    pub fn class_set(&self) -> BTreeSet<usize> {
        self.panels.iter().map(|p| p.class_id).collect()
    }
}

/// A garment cloud with its ground-truth pattern.
#[derive(Clone, Debug)]
pub struct GarmentSample {
    pub points: Vec<[f64; 3]>,
    pub pattern: SewingPattern,
    pub garment_class: String,
    pub panel_class_set: BTreeSet<usize>,
}

pub const MIN_SAMPLE_POINTS: usize = 512;

impl GarmentSample {
    pub fn validate(&self) -> Result<(), PatternError> {
        if self.points.len() < MIN_SAMPLE_POINTS {
            return Err(violation(
                "points",
                format!("{} points, need at least {MIN_SAMPLE_POINTS}", self.points.len()),
            ));
        }
        self.pattern.validate()?;
        if let Some(p) = self
            .pattern
            .panels
            .iter()
            .find(|p| !self.panel_class_set.contains(&p.class_id))
        {
            return Err(violation("panel_class_set", format!("missing class {}", p.class_id)));
        }
        Ok(())
    }
}
