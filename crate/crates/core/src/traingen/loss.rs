//! Per-sample supervision targets and the composite objective.

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::decoder::{HeadOutputs, SmootherOutputs, ROT_RANGE, TRANSL_RANGE};
use crate::numerics::{Graph, NumericsError, Tensor, Var};
use crate::pattern::geometry::rasterize_on;
use crate::pattern::{Curvature, PatternError, SewingPattern};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub place: f64,
    pub conf: f64,
    pub mask: f64,
    pub con: f64,
    pub asso: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            place: 1.0,
            conf: 1.0,
            mask: 1.0,
            con: 1.0,
            asso: 1.0,
        }
    }
}

/// Unweighted loss parts; `total` is their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub place: f64,
    pub conf: f64,
    pub mask: f64,
    pub con: f64,
    pub asso: f64,
    pub total: f64,
}

pub const PART_NAMES: [&str; 6] = ["place", "conf", "mask", "con", "asso", "total"];

impl LossParts {
    pub fn values(&self) -> [f64; 6] {
        [self.place, self.conf, self.mask, self.con, self.asso, self.total]
    }

    pub fn add(&mut self, other: &LossParts) {
        self.place += other.place;
        self.conf += other.conf;
        self.mask += other.mask;
        self.con += other.con;
        self.asso += other.asso;
        self.total += other.total;
    }

    pub fn scaled(&self, f: f64) -> LossParts {
        LossParts {
            place: self.place * f,
            conf: self.conf * f,
            mask: self.mask * f,
            con: self.con * f,
            asso: self.asso * f,
            total: self.total * f,
        }
    }
}

/// Supervision for one ground-truth panel at its class slot.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotTarget {
    pub slot: usize,
    /// Row-major `H×W` binary mask.
    pub mask: Vec<f64>,
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
    /// Canonically ordered vertices in cm.
    pub vertices: Vec<[f64; 2]>,
    /// Straight edges are `(0.5, 0)`.
    pub curvatures: Vec<Curvature>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub slots: usize,
    pub side: usize,
    pub max_edges: usize,
    pub half_extent: [f64; 2],
    /// Ground-truth slots in ascending slot order.
    pub panels: Vec<SlotTarget>,
    pub confidence: Vec<f64>,
    /// Slots whose mask enters `L_mask`.
    pub mask_supervised: Vec<bool>,
}

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("ground-truth panel of class {class}: {source}")]
    Target { class: usize, source: PatternError },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

impl Targets {
    /// Targets for `pattern`; every non-ground-truth slot gets an empty mask
    /// and zero confidence.
    pub fn build(pattern: &SewingPattern, cfg: &ModelConfig) -> Result<Self, LossError> {
        let grid = cfg.grid();
        let mut panels = Vec::with_capacity(pattern.panels.len());
        for p in &pattern.panels {
            if p.class_id >= cfg.num_classes || p.num_edges() > cfg.max_edges {
                return Err(LossError::ShapeMismatch(format!(
                    "panel class {} with {} edges outside {} slots × {} edges",
                    p.class_id,
                    p.num_edges(),
                    cfg.num_classes,
                    cfg.max_edges
                )));
            }
            if panels.iter().any(|t: &SlotTarget| t.slot == p.class_id) {
                return Err(LossError::ShapeMismatch(format!("class {} appears twice", p.class_id)));
            }
            let mask = rasterize_on(p, &grid).map_err(|source| LossError::Target {
                class: p.class_id,
                source,
            })?;
            panels.push(SlotTarget {
                slot: p.class_id,
                mask: mask.to_values(),
                rotation: p.rotation,
                translation: p.translation,
                vertices: p.vertices.clone(),
                curvatures: p.curvatures.iter().map(|c| c.unwrap_or([0.5, 0.0])).collect(),
            });
        }
        panels.sort_by_key(|t| t.slot);
        let mut confidence = vec![0.0; cfg.num_classes];
        for t in &panels {
            confidence[t.slot] = 1.0;
        }
        Ok(Self {
            slots: cfg.num_classes,
            side: cfg.mask_size,
            max_edges: cfg.max_edges,
            half_extent: grid.half_extent(),
            panels,
            confidence,
            mask_supervised: vec![true; cfg.num_classes],
        })
    }

    /// Drops mask supervision at active slots without a ground-truth panel:
    /// such a slot is asked for a low confidence only.
    pub fn for_instruction(mut self, active: &[bool]) -> Self {
        for (s, sup) in self.mask_supervised.iter_mut().enumerate() {
            if active.get(s).copied().unwrap_or(false) && self.confidence[s] == 0.0 {
                *sup = false;
            }
        }
        self
    }

    pub fn gt_slots(&self) -> Vec<usize> {
        self.panels.iter().map(|t| t.slot).collect()
    }

    /// `n × 1 × H × W` ground-truth masks in slot order.
    pub fn gt_masks(&self) -> Tensor {
        let data = self.panels.iter().flat_map(|t| t.mask.iter().copied()).collect();
        Tensor::new(vec![self.panels.len(), 1, self.side, self.side], data).expect("sized")
    }

    fn supervised_masks(&self) -> (Vec<usize>, Tensor) {
        let pixels = self.side * self.side;
        let rows: Vec<usize> = (0..self.slots).filter(|&s| self.mask_supervised[s]).collect();
        let mut data = vec![0.0; rows.len() * pixels];
        for (i, &s) in rows.iter().enumerate() {
            if let Some(t) = self.panels.iter().find(|t| t.slot == s) {
                data[i * pixels..(i + 1) * pixels].copy_from_slice(&t.mask);
            }
        }
        let n = rows.len();
        (rows, Tensor::new(vec![n, pixels], data).expect("sized"))
    }

    /// Rows `(panel, edge)` of the smoother outputs that carry a real edge.
    fn valid_edge_rows(&self) -> Vec<usize> {
        self.panels
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.vertices.len()).map(move |k| i * self.max_edges + k))
            .collect()
    }
}

/// `L_con` alone: smoother outputs (one mask per ground-truth slot, in slot
/// order) against canonical vertices, curvatures and edge validity.
pub fn contour_loss<'g>(smooth: &SmootherOutputs<'g>, targets: &Targets) -> Result<Var<'g>, LossError> {
    let n = targets.panels.len();
    let e = targets.max_edges;
    if smooth.validity.shape() != [n, e] {
        return Err(LossError::ShapeMismatch(format!(
            "smoother validity {:?}, expected [{n}, {e}]",
            smooth.validity.shape()
        )));
    }
    let rows = targets.valid_edge_rows();
    let [hx, hy] = targets.half_extent;
    let mut verts = Vec::with_capacity(rows.len() * 2);
    let mut curves = Vec::with_capacity(rows.len() * 2);
    let mut valid = vec![0.0; n * e];
    for (i, t) in targets.panels.iter().enumerate() {
        for (k, v) in t.vertices.iter().enumerate() {
            verts.extend([v[0] / hx, v[1] / hy]);
            curves.extend(t.curvatures[k]);
            valid[i * e + k] = 1.0;
        }
    }
    let m = rows.len();
    let v = smooth.vertices.gather_rows(&rows)?.l1(&Tensor::new(vec![m, 2], verts)?)?;
    let along = smooth.curve_along.gather_rows(&rows)?;
    let across = smooth.curve_across.gather_rows(&rows)?;
    let c = Var::concat(&[along, across], 1)?.l1(&Tensor::new(vec![m, 2], curves)?)?;
    let b = smooth.validity.bce_with_logits(&Tensor::new(vec![n, e], valid)?)?;
    Ok(v.add(c)?.add(b)?)
}

/// Total objective and its parts. `smooth` holds the smoother outputs for
/// the ground-truth masks; `asso` is `W_D` when any slot was active.
pub fn composite_loss<'g>(
    g: &'g Graph<'g>,
    heads: &HeadOutputs<'g>,
    smooth: &SmootherOutputs<'g>,
    targets: &Targets,
    asso: Option<Var<'g>>,
    weights: &LossWeights,
) -> Result<(Var<'g>, LossParts), LossError> {
    let m = targets.slots;
    let pixels = targets.side * targets.side;
    if heads.confidence.shape() != [m, 1] || heads.masks.shape() != [m, 1, targets.side, targets.side] {
        return Err(LossError::ShapeMismatch(format!(
            "heads give confidence {:?} and masks {:?} for {m} slots of {}px",
            heads.confidence.shape(),
            heads.masks.shape(),
            targets.side
        )));
    }
    let gt = targets.gt_slots();
    let n = gt.len();
    let rot: Vec<f64> = targets.panels.iter().flat_map(|t| t.rotation.map(|r| r / ROT_RANGE)).collect();
    let tr: Vec<f64> = targets.panels.iter().flat_map(|t| t.translation.map(|x| x / TRANSL_RANGE)).collect();
    let place = heads
        .rotation
        .gather_rows(&gt)?
        .sigmoid()
        .affine(2.0, -1.0)
        .mse(&Tensor::new(vec![n, 3], rot)?)?
        .add(
            heads
                .translation
                .gather_rows(&gt)?
                .sigmoid()
                .affine(2.0, -1.0)
                .mse(&Tensor::new(vec![n, 3], tr)?)?,
        )?;
    let conf = heads
        .confidence
        .bce_with_logits(&Tensor::new(vec![m, 1], targets.confidence.clone())?)?;
    let (rows, mask_target) = targets.supervised_masks();
    let mask = heads
        .masks
        .reshape(&[m, pixels])?
        .gather_rows(&rows)?
        .bce_with_logits(&mask_target)?;
    let con = contour_loss(smooth, targets)?;
    let asso = asso.unwrap_or_else(|| g.constant(Tensor::scalar(0.0)));
    let terms = [
        (place, weights.place),
        (conf, weights.conf),
        (mask, weights.mask),
        (con, weights.con),
        (asso, weights.asso),
    ];
    let mut total = terms[0].0.scale(terms[0].1);
    for &(v, w) in &terms[1..] {
        total = total.add(v.scale(w))?;
    }
    let parts = LossParts {
        place: place.item(),
        conf: conf.item(),
        mask: mask.item(),
        con: con.item(),
        asso: asso.item(),
        total: total.item(),
    };
    Ok((total, parts))
}
