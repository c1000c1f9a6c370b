//! Slot decoder, per-slot prediction heads, mask-to-curve smoothing and
//! panel selection.

use rand::Rng;

use crate::config::ModelConfig;
use crate::numerics::layers::{avg_pool2, Conv2d, ConvTranspose2d, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::numerics::{sigmoid, Graph, NumericsError, ParameterStore, Tensor, Var};
use crate::pattern::{Curvature, Panel, SewingPattern};

type Result<T> = std::result::Result<T, NumericsError>;

/// Rotation outputs span `[-ROT_RANGE, ROT_RANGE]` degrees.
pub const ROT_RANGE: f64 = 180.0;
/// Translation outputs span `[-TRANSL_RANGE, TRANSL_RANGE]` cm.
pub const TRANSL_RANGE: f64 = 150.0;

/// Initial bias of the last up-convolution; masks start mostly empty.
const MASK_BIAS_INIT: f64 = -2.0;

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub norm_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm_cross: LayerNorm,
    pub norm_context: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderBlock {
    fn new<R: Rng>(store: &mut ParameterStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            norm_self: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self"), dim, heads, rng)?,
            norm_cross: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            norm_context: LayerNorm::new(store, &format!("{name}.lnctx"), dim),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross"), dim, heads, rng)?,
            norm_ff: LayerNorm::new(store, &format!("{name}.ln3"), dim),
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, 2 * dim, rng),
        })
    }

    fn forward<'g>(&self, g: &'g Graph<'g>, x: Var<'g>, context: Var<'g>) -> Result<Var<'g>> {
        let n = self.norm_self.forward(g, x)?;
        let x = x.add(self.self_attn.forward(g, n, n, n)?)?;
        let n = self.norm_cross.forward(g, x)?;
        let c = self.norm_context.forward(g, context)?;
        let x = x.add(self.cross_attn.forward(g, n, c, c)?)?;
        let n = self.norm_ff.forward(g, x)?;
        x.add(self.ff.forward(g, n)?)
    }
}

/// Up-convolution stack from a slot feature to mask logits.
#[derive(Clone, Debug)]
pub struct MaskHead {
    pub layers: Vec<ConvTranspose2d>,
    pub seed_channels: usize,
    pub seed_side: usize,
}

impl MaskHead {
    pub fn new<R: Rng>(store: &mut ParameterStore, name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let (c0, side) = cfg.mask_seed();
        let widths = [c0, 16, 8, 1];
        let layers: Vec<ConvTranspose2d> = (0..3)
            .map(|i| ConvTranspose2d::new(store, &format!("{name}.up{i}"), widths[i], widths[i + 1], 4, 2, 1, rng))
            .collect();
        store
            .set(&layers[2].bias, Tensor::from_vec(vec![MASK_BIAS_INIT]))
            .expect("bias just inserted");
        Self {
            layers,
            seed_channels: c0,
            seed_side: side,
        }
    }

    /// `B×D` features to `B×1×H×W` logits.
    pub fn forward<'g>(&self, g: &'g Graph<'g>, features: Var<'g>) -> Result<Var<'g>> {
        let b = features.shape()[0];
        let mut x = features.reshape(&[b, self.seed_channels, self.seed_side, self.seed_side])?;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x)?;
            if i + 1 < self.layers.len() {
                x = x.relu();
            }
        }
        Ok(x)
    }
}

/// Differentiable smoother outputs for `B` masks with `E` edge slots each.
#[derive(Clone, Copy)]
pub struct SmootherOutputs<'g> {
    /// `B·E × 2`, vertices divided by the grid half extent, in `[-1, 1]`.
    pub vertices: Var<'g>,
    /// `B·E × 1`, fraction along the chord in `[0, 1]`.
    pub curve_along: Var<'g>,
    /// `B·E × 1`, perpendicular fraction in `[-1, 1]`.
    pub curve_across: Var<'g>,
    /// `B × E` validity logits.
    pub validity: Var<'g>,
}

/// Two conv+pool stages and an MLP regressing a closed Bezier loop from a
/// mask.
#[derive(Clone, Debug)]
pub struct Smoother {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub hidden: Linear,
    pub out: Linear,
    pub max_edges: usize,
    pub half_extent: [f64; 2],
}

const SMOOTH_CH1: usize = 8;
const SMOOTH_CH2: usize = 16;
const SMOOTH_HIDDEN: usize = 128;

impl Smoother {
    pub fn new<R: Rng>(store: &mut ParameterStore, name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let pooled = (cfg.mask_size / 4) * (cfg.mask_size / 4) * SMOOTH_CH2;
        Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), 1, SMOOTH_CH1, 3, 1, 1, rng),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), SMOOTH_CH1, SMOOTH_CH2, 3, 1, 1, rng),
            hidden: Linear::new(store, &format!("{name}.fc1"), pooled, SMOOTH_HIDDEN, rng),
            out: Linear::new(store, &format!("{name}.fc2"), SMOOTH_HIDDEN, cfg.max_edges * 5, rng),
            max_edges: cfg.max_edges,
            half_extent: cfg.grid().half_extent(),
        }
    }

    /// `masks: B×1×H×W` probabilities.
    pub fn forward<'g>(&self, g: &'g Graph<'g>, masks: Var<'g>) -> Result<SmootherOutputs<'g>> {
        let b = masks.shape()[0];
        // Centre inputs on zero.
        let x = masks.affine(2.0, -1.0);
        let x = avg_pool2(g, self.conv1.forward(g, x)?.relu())?;
        let x = avg_pool2(g, self.conv2.forward(g, x)?.relu())?;
        let flat = x.shape()[1..].iter().product();
        let h = self.hidden.forward(g, x.reshape(&[b, flat])?)?.relu();
        let raw = self.out.forward(g, h)?.reshape(&[b * self.max_edges, 5])?;
        Ok(SmootherOutputs {
            vertices: raw.slice(1, 0, 2)?.tanh(),
            curve_along: raw.slice(1, 2, 1)?.tanh().affine(0.5, 0.5),
            curve_across: raw.slice(1, 3, 1)?.tanh(),
            validity: raw.slice(1, 4, 1)?.reshape(&[b, self.max_edges])?,
        })
    }

    /// Curves for one mask of probabilities, row-major `H×W`.
    pub fn smooth_mask(&self, store: &ParameterStore, side: usize, probs: &[f64]) -> Result<SmoothedCurve> {
        let g = Graph::inference(store);
        let x = g.constant(Tensor::new(vec![1, 1, side, side], probs.to_vec())?);
        let out = self.forward(&g, x)?;
        Ok(self.read(&out, 0))
    }

    /// Values of mask `i` from a batched forward pass.
    pub fn read(&self, out: &SmootherOutputs<'_>, i: usize) -> SmoothedCurve {
        let (v, a, c, l) = (out.vertices.value(), out.curve_along.value(), out.curve_across.value(), out.validity.value());
        let e = self.max_edges;
        SmoothedCurve {
            vertices: (0..e)
                .map(|k| {
                    let r = v.row(i * e + k);
                    [r[0] * self.half_extent[0], r[1] * self.half_extent[1]]
                })
                .collect(),
            curvatures: (0..e).map(|k| [a.data()[i * e + k], c.data()[i * e + k]]).collect(),
            edge_validity: l.row(i).iter().map(|&z| sigmoid(z)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SmoothedCurve {
    /// `E_max` vertices in cm, relative to the mask centre.
    pub vertices: Vec<[f64; 2]>,
    pub curvatures: Vec<Curvature>,
    pub edge_validity: Vec<f64>,
}

impl SmoothedCurve {
    /// Closed loop through the valid edge slots, or `None` when fewer than
    /// three are valid or the loop is not a simple polygon. Clockwise loops
    /// are reversed.
    pub fn to_panel(&self, class_id: usize, threshold: f64) -> Option<Panel> {
        let keep: Vec<usize> = (0..self.vertices.len()).filter(|&k| self.edge_validity[k] > threshold).collect();
        if keep.len() < 3 {
            return None;
        }
        let mut vertices: Vec<[f64; 2]> = keep.iter().map(|&k| self.vertices[k]).collect();
        let mut curvatures: Vec<Option<Curvature>> = keep.iter().map(|&k| Some(self.curvatures[k])).collect();
        let mut panel = Panel {
            class_id,
            vertices: vertices.clone(),
            curvatures: curvatures.clone(),
            rotation: [0.0; 3],
            translation: [0.0; 3],
        };
        if panel.polygon_area() < 0.0 {
            // Reverse the loop; each edge keeps its curve mirrored in its own frame.
            vertices.reverse();
            let n = vertices.len();
            curvatures = (0..n)
                .map(|i| curvatures[(2 * n - 2 - i) % n].map(|[a, c]| [1.0 - a, -c]))
                .collect();
            panel.vertices = vertices;
            panel.curvatures = curvatures;
        }
        panel.validate().ok()?;
        Some(panel)
    }
}

/// Head outputs for all `M` slots of one sample.
#[derive(Clone, Copy)]
pub struct HeadOutputs<'g> {
    pub features: Var<'g>,
    /// `M×3` logits; degrees are `ROT_RANGE·(2σ − 1)`.
    pub rotation: Var<'g>,
    /// `M×3` logits; cm are `TRANSL_RANGE·(2σ − 1)`.
    pub translation: Var<'g>,
    /// `M×1` logits.
    pub confidence: Var<'g>,
    /// `M×1×H×W` logits.
    pub masks: Var<'g>,
}

#[derive(Clone, Debug)]
pub struct PanelDecoder {
    pub positions: String,
    pub blocks: Vec<DecoderBlock>,
    pub final_norm: LayerNorm,
    pub rotation: Linear,
    pub translation: Linear,
    pub confidence: Linear,
    pub mask: MaskHead,
    pub slots: usize,
}

impl PanelDecoder {
    pub fn new<R: Rng>(store: &mut ParameterStore, name: &str, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let positions = format!("{name}.pos");
        store.insert(
            &positions,
            Tensor::new(
                vec![cfg.num_classes, cfg.dim],
                (0..cfg.num_classes * cfg.dim).map(|_| rng.random_range(-0.5..0.5)).collect(),
            )?,
        );
        let blocks = (0..cfg.decoder_blocks)
            .map(|i| DecoderBlock::new(store, &format!("{name}.block{i}"), cfg.dim, cfg.heads, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            positions,
            blocks,
            final_norm: LayerNorm::new(store, &format!("{name}.ln"), cfg.dim),
            rotation: Linear::new(store, &format!("{name}.rot"), cfg.dim, 3, rng),
            translation: Linear::new(store, &format!("{name}.transl"), cfg.dim, 3, rng),
            confidence: Linear::new(store, &format!("{name}.conf"), cfg.dim, 1, rng),
            mask: MaskHead::new(store, &format!("{name}.mask"), cfg, rng),
            slots: cfg.num_classes,
        })
    }

    /// `F_comp` from fused slot features (`M×D`) and the global feature (`1×D`).
    pub fn decode<'g>(&self, g: &'g Graph<'g>, f_cm: Var<'g>, f_global: Var<'g>) -> Result<Var<'g>> {
        let mut x = f_cm.add(g.param(&self.positions)?)?;
        for block in &self.blocks {
            x = block.forward(g, x, f_global)?;
        }
        self.final_norm.forward(g, x)
    }

    pub fn heads<'g>(&self, g: &'g Graph<'g>, f_comp: Var<'g>) -> Result<HeadOutputs<'g>> {
        Ok(HeadOutputs {
            features: f_comp,
            rotation: self.rotation.forward(g, f_comp)?,
            translation: self.translation.forward(g, f_comp)?,
            confidence: self.confidence.forward(g, f_comp)?,
            masks: self.mask.forward(g, f_comp)?,
        })
    }
}

/// Degrees from a rotation logit.
pub fn rotation_from_logit(z: f64) -> f64 {
    ROT_RANGE * (2.0 * sigmoid(z) - 1.0)
}

/// Centimetres from a translation logit.
pub fn translation_from_logit(z: f64) -> f64 {
    TRANSL_RANGE * (2.0 * sigmoid(z) - 1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PanelPrediction {
    pub slot: usize,
    pub mask_probs: Vec<f64>,
    pub confidence: f64,
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
    pub curve: SmoothedCurve,
}

impl PanelPrediction {
    pub fn to_panel(&self, threshold: f64) -> Option<Panel> {
        let mut p = self.curve.to_panel(self.slot, threshold)?;
        p.rotation = self.rotation;
        p.translation = self.translation;
        Some(p)
    }
}

/// Slot values (without curves) read from evaluated head outputs.
pub fn read_heads(out: &HeadOutputs<'_>) -> Vec<(Vec<f64>, f64, [f64; 3], [f64; 3])> {
    let (r, t, c, m) = (out.rotation.value(), out.translation.value(), out.confidence.value(), out.masks.value());
    let slots = c.shape()[0];
    let pixels = m.numel() / slots.max(1);
    (0..slots)
        .map(|s| {
            let probs = m.data()[s * pixels..(s + 1) * pixels].iter().map(|&z| sigmoid(z)).collect();
            let rot = [0, 1, 2].map(|k| rotation_from_logit(r.row(s)[k]));
            let tr = [0, 1, 2].map(|k| translation_from_logit(t.row(s)[k]));
            (probs, sigmoid(c.data()[s]), rot, tr)
        })
        .collect()
}

/// Slots kept by thresholding and top-`k`, in descending confidence with
/// ties broken by slot index. Slots marked inactive never pass.
pub fn select_slots(confidences: &[f64], threshold: f64, k: usize, active: Option<&[bool]>) -> Vec<usize> {
    let mut keep: Vec<usize> = (0..confidences.len())
        .filter(|&s| active.is_none_or(|a| a.get(s).copied().unwrap_or(false)))
        .filter(|&s| confidences[s] > threshold)
        .collect();
    keep.sort_by(|&a, &b| confidences[b].total_cmp(&confidences[a]).then(a.cmp(&b)));
    keep.truncate(k);
    keep
}

/// Unstitched pattern from the selected slots, ordered by slot index. Slots
/// whose curve does not close into a valid panel are skipped.
pub fn select_panels(
    predictions: &[PanelPrediction],
    threshold: f64,
    k: usize,
    active: Option<&[bool]>,
) -> SewingPattern {
    let conf: Vec<f64> = predictions.iter().map(|p| p.confidence).collect();
    let mut slots = select_slots(&conf, threshold, k, active);
    slots.sort_unstable();
    SewingPattern {
        panels: slots.iter().filter_map(|&s| predictions[s].to_panel(0.5)).collect(),
        stitches: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{check_inputs_with, check_params, jitter};
    use crate::pattern::geometry::rasterize_on;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ModelConfig, ParameterStore, PanelDecoder, Smoother) {
        let cfg = ModelConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParameterStore::new();
        let dec = PanelDecoder::new(&mut store, "dec", &cfg, &mut rng).unwrap();
        let sm = Smoother::new(&mut store, "smooth", &cfg, &mut rng);
        (cfg, store, dec, sm)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn positions_are_distinct() {
        let (_, store, dec, _) = setup();
        let pos = store.get(&dec.positions).unwrap();
        for a in 0..pos.shape()[0] {
            for b in a + 1..pos.shape()[0] {
                let d: f64 = pos.row(a).iter().zip(pos.row(b)).map(|(x, y)| (x - y).powi(2)).sum();
                assert!(d > 0.0);
            }
        }
    }

    #[test]
    fn zero_inputs_give_distinct_rows() {
        let (cfg, store, dec, _) = setup();
        let g = Graph::inference(&store);
        let out = dec
            .decode(&g, g.constant(Tensor::zeros(&[23, cfg.dim])), g.constant(Tensor::zeros(&[1, cfg.dim])))
            .unwrap()
            .value();
        for a in 0..23 {
            for b in a + 1..23 {
                assert_ne!(out.row(a), out.row(b));
            }
        }
        let again = dec
            .decode(&g, g.constant(Tensor::zeros(&[23, cfg.dim])), g.constant(Tensor::zeros(&[1, cfg.dim])))
            .unwrap()
            .value();
        assert_eq!(out, again);
    }

    #[test]
    fn positions_break_permutation_equivariance() {
        let (cfg, store, dec, _) = setup();
        let g = Graph::inference(&store);
        let f = random(&[23, cfg.dim], 2);
        let glob = g.constant(random(&[1, cfg.dim], 3));
        let base = dec.decode(&g, g.constant(f.clone()), glob).unwrap().value();
        let mut swapped = f.clone();
        let d = cfg.dim;
        let (r0, r1) = (f.row(0).to_vec(), f.row(1).to_vec());
        swapped.data_mut()[..d].copy_from_slice(&r1);
        swapped.data_mut()[d..2 * d].copy_from_slice(&r0);
        let out = dec.decode(&g, g.constant(swapped), glob).unwrap().value();
        assert!(out.row(0) != base.row(1) || out.row(1) != base.row(0));
    }

    #[test]
    fn zero_parameter_heads() {
        let (cfg, mut store, dec, _) = setup();
        let names: Vec<String> = store.names().map(String::from).collect();
        for n in names {
            let shape = store.get(&n).unwrap().shape().to_vec();
            store.set(&n, Tensor::zeros(&shape)).unwrap();
        }
        let g = Graph::inference(&store);
        let out = dec.heads(&g, g.constant(random(&[23, cfg.dim], 4))).unwrap();
        for (probs, conf, rot, tr) in read_heads(&out) {
            assert_eq!(conf, 0.5);
            assert_eq!(rot, [0.0; 3]);
            assert_eq!(tr, [0.0; 3]);
            assert_eq!(probs.len(), cfg.mask_size * cfg.mask_size);
            assert!(probs.iter().all(|&p| p == 0.5));
        }
    }

    #[test]
    fn head_shapes_and_bounds() {
        let cfg = ModelConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParameterStore::new();
        let dec = PanelDecoder::new(&mut store, "dec", &cfg, &mut rng).unwrap();
        let g = Graph::inference(&store);
        let f = random(&[23, cfg.dim], 6);
        let big = Tensor::new(f.shape().to_vec(), f.data().iter().map(|v| v * 1e3).collect()).unwrap();
        let out = dec.heads(&g, g.constant(big)).unwrap();
        assert_eq!(out.masks.shape(), vec![23, 1, 32, 32]);
        for (probs, conf, rot, tr) in read_heads(&out) {
            assert!((0.0..=1.0).contains(&conf));
            assert!(rot.iter().all(|r| r.abs() <= 180.0));
            assert!(tr.iter().all(|t| t.abs() <= 150.0));
            assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn placement_by_hand() {
        let (_, mut store, dec, _) = setup();
        let d = 16;
        let mut w = Tensor::zeros(&[d, 3]);
        w.data_mut()[0] = 0.5; // input 0 → rx
        w.data_mut()[3 + 1] = -2.0; // input 1 → ry
        store.set(&dec.rotation.weight, w).unwrap();
        store.set(&dec.rotation.bias, Tensor::from_vec(vec![0.0, 0.0, 0.25])).unwrap();
        let mut x = Tensor::zeros(&[1, d]);
        x.data_mut()[0] = 1.0;
        x.data_mut()[1] = 0.3;
        let g = Graph::inference(&store);
        let z = dec.rotation.forward(&g, g.constant(x)).unwrap().value();
        let want = [0.5, -0.6, 0.25].map(|z: f64| 180.0 * (2.0 / (1.0 + (-z).exp()) - 1.0));
        for k in 0..3 {
            assert!((rotation_from_logit(z.data()[k]) - want[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn confidence_matches_loop() {
        let (cfg, store, dec, _) = setup();
        let g = Graph::inference(&store);
        let x = random(&[23, cfg.dim], 7);
        let z = dec.confidence.forward(&g, g.constant(x.clone())).unwrap().value();
        let w = store.get(&dec.confidence.weight).unwrap();
        let b = store.get(&dec.confidence.bias).unwrap().data()[0];
        for s in 0..23 {
            let logit: f64 = b + (0..cfg.dim).map(|k| x.at2(s, k) * w.at2(k, 0)).sum::<f64>();
            assert!((sigmoid(z.data()[s]) - 1.0 / (1.0 + (-logit).exp())).abs() < 1e-12);
        }
        assert!(sigmoid(40.0) >= 1.0 - 1e-6);
    }

    #[test]
    fn smoother_bounds_and_determinism() {
        let (cfg, store, _, sm) = setup();
        let side = cfg.mask_size;
        let probs: Vec<f64> = random(&[side * side], 8).data().iter().map(|v| v.abs()).collect();
        let a = sm.smooth_mask(&store, side, &probs).unwrap();
        let b = sm.smooth_mask(&store, side, &probs).unwrap();
        assert_eq!(a, b);
        let h = cfg.grid().half_extent();
        for v in &a.vertices {
            assert!(v[0].abs() <= h[0] && v[1].abs() <= h[1]);
        }
        for c in &a.curvatures {
            assert!((0.0..=1.0).contains(&c[0]) && c[1].abs() <= 1.0);
        }
    }

    #[test]
    fn curve_reversal_keeps_geometry() {
        let cw = SmoothedCurve {
            vertices: vec![[0.0, 0.0], [0.0, 10.0], [10.0, 10.0], [10.0, 0.0]],
            curvatures: vec![[0.3, 0.2], [0.5, 0.0], [0.5, 0.0], [0.5, 0.0]],
            edge_validity: vec![0.9; 4],
        };
        let p = cw.to_panel(0, 0.5).unwrap();
        assert!(p.polygon_area() > 0.0);
        // The curved edge (0,0)→(0,10) now runs (0,10)→(0,0) with the same control point.
        let ctrl = crate::pattern::control_point([0.0, 0.0], [0.0, 10.0], [0.3, 0.2]);
        let hit = (0..4).any(|e| {
            let (s, t, c) = p.edge(e);
            s == [0.0, 10.0] && t == [0.0, 0.0] && {
                let q = crate::pattern::control_point(s, t, c.unwrap());
                (q[0] - ctrl[0]).abs() < 1e-12 && (q[1] - ctrl[1]).abs() < 1e-12
            }
        });
        assert!(hit, "{p:?}");
        let few = SmoothedCurve {
            edge_validity: vec![0.9, 0.9, 0.1, 0.2],
            ..cw
        };
        assert!(few.to_panel(0, 0.5).is_none());
    }

    fn prediction(slot: usize, conf: f64) -> PanelPrediction {
        PanelPrediction {
            slot,
            mask_probs: vec![],
            confidence: conf,
            rotation: [0.0; 3],
            translation: [0.0; 3],
            curve: SmoothedCurve {
                vertices: vec![[-5.0, -5.0], [5.0, -5.0], [5.0, 5.0], [-5.0, 5.0], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0]],
                curvatures: vec![[0.5, 0.0]; 8],
                edge_validity: vec![0.9, 0.9, 0.9, 0.9, 0.1, 0.1, 0.1, 0.1],
            },
        }
    }

    #[test]
    fn selection_rules() {
        let all: Vec<PanelPrediction> = (0..23).map(|s| prediction(s, 0.9)).collect();
        let p = select_panels(&all, 0.5, 14, None);
        assert_eq!(p.panels.iter().map(|p| p.class_id).collect::<Vec<_>>(), (0..14).collect::<Vec<_>>());
        let low: Vec<PanelPrediction> = (0..23).map(|s| prediction(s, 0.1)).collect();
        assert!(select_panels(&low, 0.5, 14, None).panels.is_empty());
        let mut active = vec![false; 23];
        for s in [2, 9, 17] {
            active[s] = true;
        }
        let p = select_panels(&all, 0.5, 14, Some(&active));
        assert_eq!(p.panels.iter().map(|p| p.class_id).collect::<Vec<_>>(), vec![2, 9, 17]);
        assert_eq!(select_slots(&[0.6, 0.9, 0.7, 0.9], 0.5, 3, None), vec![1, 3, 2]);
    }

    #[test]
    fn selected_curve_rasterizes() {
        let (cfg, _, _, _) = setup();
        let mut pred = prediction(0, 0.9);
        pred.curve.vertices.iter_mut().for_each(|v| *v = [v[0] * 2.8, v[1] * 2.8]);
        let p = pred.to_panel(0.5).unwrap();
        // 28 cm square on a 6 cm/px grid covers 4×4 pixel centres.
        assert_eq!(rasterize_on(&p, &cfg.grid()).unwrap().count(), 16);
    }

    #[test]
    fn decoder_and_head_gradients() {
        let (cfg, mut store, dec, sm) = setup();
        jitter(&mut store, 4, 0.05);
        let f = random(&[23, cfg.dim], 9);
        let glob = random(&[1, cfg.dim], 10);
        let masks = Tensor::new(
            vec![2, 1, cfg.mask_size, cfg.mask_size],
            random(&[2 * cfg.mask_size * cfg.mask_size], 11).data().iter().map(|v| v.abs()).collect(),
        )
        .unwrap();
        let names: Vec<String> = store.names().map(String::from).collect();
        let wm = random(&[23, 1, cfg.mask_size, cfg.mask_size], 12);
        let report = check_params(&store, &names, 3, |g| {
            let comp = dec.decode(g, g.constant(f.clone()), g.constant(glob.clone()))?;
            let h = dec.heads(g, comp)?;
            let s = sm.forward(g, g.constant(masks.clone()))?;
            let parts = [
                h.rotation.sigmoid().sum_all(),
                h.translation.tanh().sum_all(),
                h.confidence.sum_all(),
                h.masks.mul_const(&wm)?.sum_all(),
                s.vertices.sum_all(),
                s.curve_along.sum_all(),
                s.curve_across.scale(0.5).sum_all(),
                s.validity.sigmoid().sum_all(),
            ];
            let mut total = parts[0];
            for p in &parts[1..] {
                total = total.add(*p)?;
            }
            Ok(total)
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
        let report = check_inputs_with(&store, &[f, glob], 30, |g, v| {
            let comp = dec.decode(g, v[0], v[1])?;
            Ok(comp.mul(comp)?.sum_all())
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}
