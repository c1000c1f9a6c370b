use std::collections::{BTreeMap, BTreeSet};

use super::geometry::{rasterize_on, sample_edge, Mask, MaskGrid};
use super::{Panel, PatternError, SewingPattern, Stitch};

/// Points per edge when comparing panel outlines.
pub const EDGE_POLYLINE: usize = 10;

#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub panel_l2: f64,
    pub num_panels_acc: f64,
    pub num_edges_acc: f64,
    pub rot_l2: f64,
    pub transl_l2: f64,
    pub stitch_precision: f64,
    pub stitch_recall: f64,
    pub panel_iou: f64,
}

impl MetricsReport {
    /// Field-wise mean; `None` for an empty slice.
    pub fn mean(reports: &[MetricsReport]) -> Option<MetricsReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let sum = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(MetricsReport {
            panel_l2: sum(|r| r.panel_l2),
            num_panels_acc: sum(|r| r.num_panels_acc),
            num_edges_acc: sum(|r| r.num_edges_acc),
            rot_l2: sum(|r| r.rot_l2),
            transl_l2: sum(|r| r.transl_l2),
            stitch_precision: sum(|r| r.stitch_precision),
            stitch_recall: sum(|r| r.stitch_recall),
            panel_iou: sum(|r| r.panel_iou),
        })
    }
}

pub fn panel_iou(a: &Mask, b: &Mask) -> Result<f64, PatternError> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(PatternError::ResolutionMismatch {
            left: (a.height, a.width),
            right: (b.height, b.width),
        });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Precision and recall of predicted stitches against the truth; an empty
/// side makes its ratio vacuously 1.
pub fn stitch_pr(predicted: &[Stitch], truth: &[Stitch]) -> (f64, f64) {
    let p: BTreeSet<Stitch> = predicted.iter().map(|s| Stitch::new(s.a, s.b)).collect();
    let t: BTreeSet<Stitch> = truth.iter().map(|s| Stitch::new(s.a, s.b)).collect();
    let tp = p.intersection(&t).count() as f64;
    let precision = if p.is_empty() { 1.0 } else { tp / p.len() as f64 };
    let recall = if t.is_empty() { 1.0 } else { tp / t.len() as f64 };
    (precision, recall)
}

/// Outline with every edge sampled at [`EDGE_POLYLINE`] points, endpoints
/// included.
fn edge_polylines(panel: &Panel) -> Vec<[f64; 2]> {
    (0..panel.num_edges())
        .flat_map(|i| {
            let (s, e, c) = panel.edge(i);
            sample_edge(s, e, c, EDGE_POLYLINE)
        })
        .collect()
}

/// `count` points spaced evenly by arc length along a closed polyline,
/// starting at its first point.
pub fn resample_closed(points: &[[f64; 2]], count: usize) -> Vec<[f64; 2]> {
    let n = points.len();
    let seg = |i: usize| {
        let (a, b) = (points[i], points[(i + 1) % n]);
        ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt()
    };
    let total: f64 = (0..n).map(seg).sum();
    if n == 0 || total == 0.0 {
        return vec![points.first().copied().unwrap_or([0.0, 0.0]); count];
    }
    let mut out = Vec::with_capacity(count);
    let (mut i, mut walked) = (0usize, 0.0);
    for k in 0..count {
        let target = total * k as f64 / count as f64;
        while i < n - 1 && walked + seg(i) < target {
            walked += seg(i);
            i += 1;
        }
        let (a, b) = (points[i], points[(i + 1) % n]);
        let len = seg(i);
        let t = if len > 0.0 { ((target - walked) / len).clamp(0.0, 1.0) } else { 0.0 };
        out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
    }
    out
}

/// Mean point distance between two panel outlines. Equal edge counts
/// compare edge polylines point by point; otherwise both closed outlines
/// are resampled to a common count by arc length from vertex 0.
pub fn outline_distance(pred: &Panel, truth: &Panel) -> f64 {
    let (a, b) = if pred.num_edges() == truth.num_edges() {
        (edge_polylines(pred), edge_polylines(truth))
    } else {
        let count = EDGE_POLYLINE * pred.num_edges().max(truth.num_edges());
        let closed = |p: &Panel| p.outline(EDGE_POLYLINE - 1);
        (resample_closed(&closed(pred), count), resample_closed(&closed(truth), count))
    };
    let sum: f64 = a
        .iter()
        .zip(&b)
        .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
        .sum();
    sum / a.len().max(1) as f64
}

fn rms_vertex_norm(panel: &Panel) -> f64 {
    let n = panel.vertices.len().max(1) as f64;
    (panel.vertices.iter().map(|v| v[0] * v[0] + v[1] * v[1]).sum::<f64>() / n).sqrt()
}

fn wrap_degrees(d: f64) -> f64 {
    let r = (d + 180.0).rem_euclid(360.0) - 180.0;
    if r == -180.0 {
        180.0
    } else {
        r
    }
}

fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Grid used by [`pattern_metrics`] for panel IOU.
pub const DEFAULT_METRIC_GRID: MaskGrid = MaskGrid {
    height: 64,
    width: 64,
    scale: 3.0,
};

pub fn pattern_metrics(predicted: &SewingPattern, truth: &SewingPattern) -> MetricsReport {
    pattern_metrics_on(predicted, truth, &DEFAULT_METRIC_GRID)
}

/// Metrics of one prediction against its ground truth. Panels are matched
/// by class; truth panels without a prediction add their RMS vertex norm to
/// the panel L2 and count as zero IOU.
pub fn pattern_metrics_on(predicted: &SewingPattern, truth: &SewingPattern, grid: &MaskGrid) -> MetricsReport {
    let mut by_class: BTreeMap<usize, usize> = BTreeMap::new();
    for (i, p) in predicted.panels.iter().enumerate() {
        by_class.entry(p.class_id).or_insert(i);
    }
    let mut l2 = Vec::new();
    let mut ious = Vec::new();
    let (mut edges_ok, mut rot, mut transl, mut matched) = (0usize, 0.0, 0.0, 0usize);
    let mut pred_to_truth: BTreeMap<usize, usize> = BTreeMap::new();
    for (ti, t) in truth.panels.iter().enumerate() {
        let Some(&pi) = by_class.get(&t.class_id) else {
            l2.push(rms_vertex_norm(t));
            ious.push(0.0);
            continue;
        };
        pred_to_truth.insert(pi, ti);
        let p = &predicted.panels[pi];
        matched += 1;
        l2.push(outline_distance(p, t));
        edges_ok += (p.num_edges() == t.num_edges()) as usize;
        rot += norm3([0, 1, 2].map(|k| wrap_degrees(p.rotation[k] - t.rotation[k])));
        transl += norm3([0, 1, 2].map(|k| p.translation[k] - t.translation[k]));
        let iou = match (rasterize_on(p, grid), rasterize_on(t, grid)) {
            (Ok(a), Ok(b)) => panel_iou(&a, &b).unwrap_or(0.0),
            _ => 0.0,
        };
        ious.push(iou);
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let per_matched = |x: f64| if matched == 0 { 0.0 } else { x / matched as f64 };
    // Stitches are compared in truth panel indices.
    let mapped: Vec<Stitch> = predicted
        .stitches
        .iter()
        .filter_map(|s| {
            let a = (*pred_to_truth.get(&s.a.0)?, s.a.1);
            let b = (*pred_to_truth.get(&s.b.0)?, s.b.1);
            Some(Stitch::new(a, b))
        })
        .collect();
    let unmapped = predicted.stitches.len() - mapped.len();
    let (mut precision, recall) = stitch_pr(&mapped, &truth.stitches);
    if unmapped > 0 {
        let tp = precision * mapped.len() as f64;
        precision = tp / predicted.stitches.len() as f64;
    }
    MetricsReport {
        panel_l2: mean(&l2),
        num_panels_acc: (predicted.panels.len() == truth.panels.len()) as u8 as f64,
        num_edges_acc: per_matched(edges_ok as f64),
        rot_l2: per_matched(rot),
        transl_l2: per_matched(transl),
        stitch_precision: precision,
        stitch_recall: recall,
        panel_iou: mean(&ious),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn block(h: usize, w: usize, r0: usize, c0: usize, size: usize) -> Mask {
        let mut m = Mask::empty(h, w);
        for r in r0..r0 + size {
            for c in c0..c0 + size {
                m.set(r, c, true);
            }
        }
        m
    }

    fn skirt() -> SewingPattern {
        let mut panels = Vec::new();
        for (i, class) in [2usize, 3, 4, 5].into_iter().enumerate() {
            let mut p = Panel::straight(class, vec![[-10.0, -20.0], [10.0, -20.0], [8.0, 20.0], [-8.0, 20.0]]);
            p.curvatures[0] = Some([0.5, -0.1]);
            p.rotation = [0.0, 90.0 * i as f64, 0.0];
            p.translation = [i as f64 * 5.0, 0.0, 12.0];
            panels.push(p);
        }
        SewingPattern {
            panels,
            stitches: vec![Stitch::new((0, 1), (1, 3)), Stitch::new((2, 1), (3, 3))],
        }
    }

    #[test]
    fn iou_examples() {
        let a = block(32, 32, 5, 5, 10);
        assert_eq!(panel_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(panel_iou(&a, &block(32, 32, 20, 20, 10)).unwrap(), 0.0);
        let shifted = block(32, 32, 5, 10, 10);
        assert!((panel_iou(&a, &shifted).unwrap() - 50.0 / 150.0).abs() < 1e-15);
        assert_eq!(panel_iou(&Mask::empty(4, 4), &Mask::empty(4, 4)).unwrap(), 1.0);
        assert!(panel_iou(&a, &Mask::empty(16, 16)).is_err());
    }

    #[test]
    fn stitch_pr_examples() {
        let ab = Stitch::new((0, 0), (1, 0));
        let cd = Stitch::new((0, 1), (1, 1));
        let ef = Stitch::new((0, 2), (1, 2));
        assert_eq!(stitch_pr(&[ab, cd], &[ab, cd]), (1.0, 1.0));
        assert_eq!(stitch_pr(&[], &[ab]), (1.0, 0.0));
        assert_eq!(stitch_pr(&[ab, cd], &[ab, ef]), (0.5, 0.5));
        let swapped = Stitch { a: (1, 0), b: (0, 0) };
        assert_eq!(stitch_pr(&[swapped], &[ab]), (1.0, 1.0));
    }

    #[test]
    fn self_comparison_is_perfect() {
        let p = skirt();
        let m = pattern_metrics(&p, &p);
        assert_eq!(m.panel_l2, 0.0);
        assert_eq!(m.rot_l2, 0.0);
        assert_eq!(m.transl_l2, 0.0);
        assert_eq!(m.num_panels_acc, 1.0);
        assert_eq!(m.num_edges_acc, 1.0);
        assert_eq!(m.panel_iou, 1.0);
        assert_eq!((m.stitch_precision, m.stitch_recall), (1.0, 1.0));
    }

    #[test]
    fn missing_panel_fails_count() {
        let truth = skirt();
        let mut pred = truth.clone();
        pred.panels.pop();
        pred.stitches.pop();
        let m = pattern_metrics(&pred, &truth);
        assert_eq!(m.num_panels_acc, 0.0);
        let rms = {
            let v = &truth.panels[3].vertices;
            (v.iter().map(|p| p[0] * p[0] + p[1] * p[1]).sum::<f64>() / 4.0).sqrt()
        };
        assert!((m.panel_l2 - rms / 4.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_shift_gives_unit_distance() {
        let truth = skirt();
        let mut pred = truth.clone();
        for p in &mut pred.panels {
            for v in &mut p.vertices {
                v[0] += 1.0;
            }
        }
        let m = pattern_metrics(&pred, &truth);
        assert!((m.panel_l2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stitches_compare_by_class_not_order() {
        let truth = skirt();
        let mut pred = truth.clone();
        pred.panels.swap(0, 1);
        pred.stitches = vec![Stitch::new((1, 1), (0, 3)), Stitch::new((2, 1), (3, 3))];
        let m = pattern_metrics(&pred, &truth);
        assert_eq!((m.stitch_precision, m.stitch_recall), (1.0, 1.0));
    }

    #[test]
    fn rotation_wraps() {
        let truth = skirt();
        let mut pred = truth.clone();
        pred.panels[0].rotation[0] = 359.0;
        let m = pattern_metrics(&pred, &truth);
        assert!((m.rot_l2 - 0.25).abs() < 1e-9);
    }

    #[test]
    fn resample_square() {
        let sq = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let r = resample_closed(&sq, 8);
        assert_eq!(r[0], [0.0, 0.0]);
        assert!((r[1][0] - 0.5).abs() < 1e-12);
        assert!((r[2][0] - 1.0).abs() < 1e-12 && r[2][1].abs() < 1e-12);
        assert!((r[5][0] - 0.5).abs() < 1e-12 && (r[5][1] - 1.0).abs() < 1e-12);
    }

    fn mask_strategy() -> impl Strategy<Value = (Mask, Mask)> {
        (prop::collection::vec(any::<bool>(), 64), prop::collection::vec(any::<bool>(), 64)).prop_map(|(a, b)| {
            (
                Mask { height: 8, width: 8, data: a },
                Mask { height: 8, width: 8, data: b },
            )
        })
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded((a, b) in mask_strategy()) {
            let x = panel_iou(&a, &b).unwrap();
            let y = panel_iou(&b, &a).unwrap();
            prop_assert_eq!(x, y);
            prop_assert!((0.0..=1.0).contains(&x));
            if a.count() > 0 {
                prop_assert_eq!(panel_iou(&a, &a).unwrap(), 1.0);
            }
        }
    }
}
