//! Per-slot instructions: text classes, sketch polylines and external
//! embedding vectors, projected to the model width with null rows at
//! inactive slots.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::layers::Linear;
use crate::numerics::{Graph, NumericsError, ParameterStore, Tensor, Var};
use crate::pattern::{class_index, Panel, NUM_CLASSES, PANEL_CLASSES};

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("unknown panel class `{0}`")]
    UnknownClass(String),
    #[error("sketch has no points")]
    EmptySketch,
    #[error("embedding file has no vector for `{0}`")]
    MissingClass(String),
    #[error("embedding dimension {got} does not match expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no sketch prototype for class `{0}`")]
    MissingPrototype(String),
    #[error("prompt file: {0}")]
    File(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

type Result<T> = std::result::Result<T, PromptError>;

/// The ordered panel-class names with lookups both ways.
#[derive(Clone, Copy, Debug, Default)]
pub struct PanelVocabulary;

impl PanelVocabulary {
    pub fn len(&self) -> usize {
        NUM_CLASSES
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn name(&self, index: usize) -> Option<&'static str> {
        PANEL_CLASSES.get(index).copied()
    }

    pub fn index(&self, name: &str) -> Result<usize> {
        class_index(name).ok_or_else(|| PromptError::UnknownClass(name.to_string()))
    }

    /// The static prompt template of a class.
    pub fn template(&self, index: usize) -> Option<String> {
        self.name(index).map(|n| format!("Garment {n}"))
    }

    /// Parses a comma-separated list of class names.
    pub fn parse_list(&self, list: &str) -> Result<Vec<usize>> {
        list.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| self.index(s))
            .collect()
    }
}

/// Polylines in the unit box, drawn for one panel class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SketchPrompt {
    pub strokes: Vec<Vec<[f64; 2]>>,
}

fn lex(a: &[f64; 2], b: &[f64; 2]) -> std::cmp::Ordering {
    a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1]))
}

fn polyline_length(p: &[[f64; 2]]) -> f64 {
    p.windows(2)
        .map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt())
        .sum()
}

/// Point at arc length `s` along an open polyline.
fn point_at(p: &[[f64; 2]], mut s: f64) -> [f64; 2] {
    for w in p.windows(2) {
        let len = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
        if s <= len && len > 0.0 {
            let t = s / len;
            return [w[0][0] + t * (w[1][0] - w[0][0]), w[0][1] + t * (w[1][1] - w[0][1])];
        }
        s -= len;
    }
    *p.last().expect("non-empty polyline")
}

impl SketchPrompt {
    pub fn num_points(&self) -> usize {
        self.strokes.iter().map(Vec::len).sum()
    }

    /// `count` points spread over the strokes by arc length. Each stroke is
    /// first oriented so its smaller endpoint comes first and the strokes
    /// are sorted, then the result is sorted lexicographically; reversing a
    /// stroke or reordering strokes therefore yields identical points.
    pub fn resample(&self, count: usize) -> Result<Vec<[f64; 2]>> {
        let mut strokes: Vec<Vec<[f64; 2]>> = self
            .strokes
            .iter()
            .filter(|s| !s.is_empty())
            .map(|s| {
                let mut s = s.clone();
                let n = s.len();
                // Closed strokes compare their second and second-to-last points.
                let flip = match lex(&s[n - 1], &s[0]) {
                    std::cmp::Ordering::Equal if n > 2 => lex(&s[n - 2], &s[1]).is_lt(),
                    o => o.is_lt(),
                };
                if flip {
                    s.reverse();
                }
                s
            })
            .collect();
        if strokes.is_empty() || count == 0 {
            return Err(PromptError::EmptySketch);
        }
        strokes.sort_by(|a, b| {
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| lex(x, y))
                .find(|o| o.is_ne())
                .unwrap_or(a.len().cmp(&b.len()))
        });
        let lengths: Vec<f64> = strokes.iter().map(|s| polyline_length(s)).collect();
        let total: f64 = lengths.iter().sum();
        let mut out = Vec::with_capacity(count);
        if total == 0.0 {
            for i in 0..count {
                out.push(strokes[i % strokes.len()][0]);
            }
        } else {
            for i in 0..count {
                let mut s = if count == 1 { 0.0 } else { total * i as f64 / (count - 1) as f64 };
                let mut k = 0;
                while k + 1 < strokes.len() && s > lengths[k] {
                    s -= lengths[k];
                    k += 1;
                }
                out.push(point_at(&strokes[k], s.min(lengths[k])));
            }
        }
        out.sort_by(lex);
        Ok(out)
    }

    /// The closed outline of a panel scaled uniformly into the unit box and
    /// centred there.
    pub fn silhouette(panel: &Panel, per_edge: usize) -> Self {
        let mut outline = panel.outline(per_edge);
        outline.push(outline[0]);
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in &outline {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let extent = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-12);
        let offset = [0.5 - (hi[0] - lo[0]) / extent / 2.0, 0.5 - (hi[1] - lo[1]) / extent / 2.0];
        let stroke = outline
            .iter()
            .map(|p| [(p[0] - lo[0]) / extent + offset[0], (p[1] - lo[1]) / extent + offset[1]])
            .collect();
        Self { strokes: vec![stroke] }
    }
}

/// Sketches keyed by class name, as read from a sketch file.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SketchFile {
    pub sketches: BTreeMap<String, SketchPrompt>,
}

impl SketchFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PromptError::File(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| PromptError::File(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("sketch files serialize");
        std::fs::write(path, text).map_err(|e| PromptError::File(e.to_string()))
    }
}

/// Raw prompt vectors keyed by class name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingFile {
    pub dim: usize,
    pub vectors: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PromptError::File(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| PromptError::File(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("embedding files serialize");
        std::fs::write(path, text).map_err(|e| PromptError::File(e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotSource {
    Null,
    Text,
    Sketch,
    External,
}

/// What one decoder slot is told before encoding.
#[derive(Clone, Debug, PartialEq)]
pub enum SlotPrompt {
    Null,
    Text,
    /// Canonical resampled sketch points.
    Sketch(Vec<[f64; 2]>),
    /// A raw vector that only passes through the projection (external
    /// embeddings and sketch prototypes).
    Raw(Vec<f64>, SlotSource),
}

impl SlotPrompt {
    pub fn source(&self) -> SlotSource {
        match self {
            SlotPrompt::Null => SlotSource::Null,
            SlotPrompt::Text => SlotSource::Text,
            SlotPrompt::Sketch(_) => SlotSource::Sketch,
            SlotPrompt::Raw(_, s) => *s,
        }
    }
}

/// Un-encoded instruction over all slots.
#[derive(Clone, Debug, PartialEq)]
pub struct Instruction {
    pub slots: Vec<SlotPrompt>,
}

impl Instruction {
    pub fn empty() -> Self {
        Self {
            slots: vec![SlotPrompt::Null; NUM_CLASSES],
        }
    }

    fn check(class: usize) -> Result<()> {
        if class >= NUM_CLASSES {
            return Err(PromptError::UnknownClass(class.to_string()));
        }
        Ok(())
    }

    pub fn text(classes: &[usize]) -> Result<Self> {
        let mut out = Self::empty();
        for &c in classes {
            Self::check(c)?;
            out.slots[c] = SlotPrompt::Text;
        }
        Ok(out)
    }

    pub fn sketch(sketches: &[(usize, SketchPrompt)], points: usize) -> Result<Self> {
        let mut out = Self::empty();
        for (c, s) in sketches {
            Self::check(*c)?;
            out.slots[*c] = SlotPrompt::Sketch(s.resample(points)?);
        }
        Ok(out)
    }

    /// Raw vectors from an embedding file for the requested classes.
    pub fn external(file: &EmbeddingFile, classes: &[usize], expected_dim: usize) -> Result<Self> {
        if file.dim != expected_dim {
            return Err(PromptError::DimensionMismatch {
                expected: expected_dim,
                got: file.dim,
            });
        }
        let mut out = Self::empty();
        for &c in classes {
            Self::check(c)?;
            let name = PANEL_CLASSES[c];
            let v = file
                .vectors
                .get(name)
                .ok_or_else(|| PromptError::MissingClass(name.to_string()))?;
            if v.len() != file.dim {
                return Err(PromptError::DimensionMismatch {
                    expected: file.dim,
                    got: v.len(),
                });
            }
            out.slots[c] = SlotPrompt::Raw(v.clone(), SlotSource::External);
        }
        Ok(out)
    }

    /// Every slot active: text classes, or the stored per-class sketch
    /// prototypes.
    pub fn standard(mode: PromptMode, prototypes: &Prototypes) -> Result<Self> {
        let mut out = Self::empty();
        for c in 0..NUM_CLASSES {
            out.slots[c] = match mode {
                PromptMode::Text => SlotPrompt::Text,
                PromptMode::Sketch => {
                    let p = prototypes
                        .get(c)
                        .ok_or_else(|| PromptError::MissingPrototype(PANEL_CLASSES[c].to_string()))?;
                    SlotPrompt::Raw(p.to_vec(), SlotSource::Sketch)
                }
            };
        }
        Ok(out)
    }

    /// Keeps only the slots in `classes`.
    pub fn restricted(&self, classes: &[usize]) -> Self {
        let mut out = Self::empty();
        for &c in classes {
            if c < self.slots.len() {
                out.slots[c] = self.slots[c].clone();
            }
        }
        out
    }

    pub fn active(&self) -> Vec<bool> {
        self.slots.iter().map(|s| !matches!(s, SlotPrompt::Null)).collect()
    }

    pub fn active_slots(&self) -> Vec<usize> {
        (0..self.slots.len())
            .filter(|&i| !matches!(self.slots[i], SlotPrompt::Null))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    Text,
    Sketch,
}

impl std::str::FromStr for PromptMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "text" => Ok(Self::Text),
            "sketch" => Ok(Self::Sketch),
            other => Err(format!("unknown prompt mode `{other}` (expected text or sketch)")),
        }
    }
}

/// Mean raw sketch vector per class.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Prototypes {
    pub rows: BTreeMap<usize, Vec<f64>>,
}

impl Prototypes {
    pub fn get(&self, class: usize) -> Option<&[f64]> {
        self.rows.get(&class).map(Vec::as_slice)
    }

    /// Averages `(class, raw vector)` pairs per class.
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = (usize, &'a [f64])>) -> Self {
        let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
        for (c, v) in samples {
            let e = sums.entry(c).or_insert_with(|| (vec![0.0; v.len()], 0));
            for (s, x) in e.0.iter_mut().zip(v) {
                *s += x;
            }
            e.1 += 1;
        }
        Self {
            rows: sums
                .into_iter()
                .map(|(c, (s, n))| (c, s.into_iter().map(|x| x / n as f64).collect()))
                .collect(),
        }
    }
}

/// Encoded instruction: `M × D` features with zero rows at inactive slots.
#[derive(Clone, Debug)]
pub struct InstructionSet {
    pub active: Vec<bool>,
    pub features: Tensor,
    pub source: Vec<SlotSource>,
}

/// Text table, sketch encoder and the shared projection.
#[derive(Clone, Debug)]
pub struct PromptEncoder {
    pub table: String,
    pub sketch_in: Linear,
    pub sketch_out: Linear,
    pub proj_in: Linear,
    pub proj_out: Linear,
    pub raw_dim: usize,
    pub dim: usize,
}

impl PromptEncoder {
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        raw_dim: usize,
        sketch_hidden: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let table = "prompt.text".to_string();
        // Unit-variance rows keep distinct classes well apart at init.
        let data = (0..NUM_CLASSES * raw_dim)
            .map(|_| rng.random_range(-1.0..1.0) * 3f64.sqrt())
            .collect();
        store.insert(&table, Tensor::new(vec![NUM_CLASSES, raw_dim], data).expect("sized"));
        Self {
            table,
            sketch_in: Linear::new(store, "prompt.sketch.l1", 2, sketch_hidden, rng),
            sketch_out: Linear::new(store, "prompt.sketch.l2", sketch_hidden, raw_dim, rng),
            proj_in: Linear::new(store, "prompt.proj.l1", raw_dim, dim, rng),
            proj_out: Linear::new(store, "prompt.proj.l2", dim, dim, rng),
            raw_dim,
            dim,
        }
    }

    /// `1 × R` raw vector of a resampled sketch: per-point MLP then mean.
    pub fn raw_sketch<'g>(&self, g: &'g Graph<'g>, points: &[[f64; 2]]) -> std::result::Result<Var<'g>, NumericsError> {
        if points.is_empty() {
            return Err(NumericsError::EmptyInput("sketch"));
        }
        let data = points.iter().flat_map(|p| [2.0 * p[0] - 1.0, 2.0 * p[1] - 1.0]).collect();
        let x = g.constant(Tensor::new(vec![points.len(), 2], data)?);
        let h = self.sketch_in.forward(g, x)?.relu().mean_axis(0)?.reshape(&[1, self.sketch_in.out_dim])?;
        self.sketch_out.forward(g, h)
    }

    fn raw_row<'g>(&self, g: &'g Graph<'g>, class: usize, slot: &SlotPrompt) -> std::result::Result<Option<Var<'g>>, NumericsError> {
        Ok(match slot {
            SlotPrompt::Null => None,
            SlotPrompt::Text => Some(g.param(&self.table)?.gather_rows(&[class])?),
            SlotPrompt::Sketch(points) => Some(self.raw_sketch(g, points)?),
            SlotPrompt::Raw(v, _) => {
                if v.len() != self.raw_dim {
                    return Err(NumericsError::ShapeMismatch {
                        op: "prompt",
                        left: vec![self.raw_dim],
                        right: vec![v.len()],
                    });
                }
                Some(g.constant(Tensor::new(vec![1, v.len()], v.clone())?))
            }
        })
    }

    pub fn project<'g>(&self, g: &'g Graph<'g>, raw: Var<'g>) -> std::result::Result<Var<'g>, NumericsError> {
        let h = self.proj_in.forward(g, raw)?.relu();
        self.proj_out.forward(g, h)
    }

    /// `M × D` prompt features; inactive rows are exact zeros.
    pub fn forward<'g>(&self, g: &'g Graph<'g>, instr: &Instruction) -> std::result::Result<Var<'g>, NumericsError> {
        let m = instr.slots.len();
        let mut rows = Vec::new();
        let mut index = vec![usize::MAX; m];
        for (c, slot) in instr.slots.iter().enumerate() {
            if let Some(r) = self.raw_row(g, c, slot)? {
                index[c] = rows.len();
                rows.push(r);
            }
        }
        if rows.is_empty() {
            return Ok(g.constant(Tensor::zeros(&[m, self.dim])));
        }
        let raw = if rows.len() == 1 { rows[0] } else { Var::concat(&rows, 0)? };
        let projected = self.project(g, raw)?;
        let zero = g.constant(Tensor::zeros(&[1, self.dim]));
        let null = rows.len();
        let table = Var::concat(&[projected, zero], 0)?;
        let gather: Vec<usize> = index.iter().map(|&i| if i == usize::MAX { null } else { i }).collect();
        table.gather_rows(&gather)
    }

    pub fn encode(&self, store: &ParameterStore, instr: &Instruction) -> Result<InstructionSet> {
        let g = Graph::inference(store);
        let features = Tensor::clone(&self.forward(&g, instr)?.value());
        Ok(InstructionSet {
            active: instr.active(),
            features,
            source: instr.slots.iter().map(SlotPrompt::source).collect(),
        })
    }

    /// Raw sketch vectors as plain values.
    pub fn raw_sketch_value(&self, store: &ParameterStore, points: &[[f64; 2]]) -> Result<Vec<f64>> {
        let g = Graph::inference(store);
        Ok(self.raw_sketch(&g, points)?.value().data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder() -> (ParameterStore, PromptEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParameterStore::new();
        let e = PromptEncoder::new(&mut store, 16, 8, 12, &mut rng);
        (store, e)
    }

    fn rect(w: f64, h: f64) -> SketchPrompt {
        SketchPrompt {
            strokes: vec![vec![[0.0, 0.0], [w, 0.0], [w, h], [0.0, h], [0.0, 0.0]]],
        }
    }

    #[test]
    fn text_sets() {
        let (store, e) = encoder();
        let empty = e.encode(&store, &Instruction::text(&[]).unwrap()).unwrap();
        assert!(empty.features.data().iter().all(|&v| v == 0.0));
        assert!(empty.active.iter().all(|a| !a));
        let one = e.encode(&store, &Instruction::text(&[0]).unwrap()).unwrap();
        assert_eq!(one.active.iter().filter(|&&a| a).count(), 1);
        assert!(one.features.row(0).iter().any(|&v| v != 0.0));
        assert!(one.features.data()[12..].iter().all(|&v| v == 0.0));
        let again = e.encode(&store, &Instruction::text(&[0]).unwrap()).unwrap();
        assert_eq!(one.features, again.features);
        assert!(Instruction::text(&[NUM_CLASSES]).is_err());
        assert!(PanelVocabulary.parse_list("skirt-front,scarf").is_err());
    }

    #[test]
    fn text_rows_are_distinct() {
        let (store, e) = encoder();
        let all = e.encode(&store, &Instruction::text(&(0..NUM_CLASSES).collect::<Vec<_>>()).unwrap()).unwrap();
        for i in 0..NUM_CLASSES {
            for j in i + 1..NUM_CLASSES {
                let d: f64 = all.features.row(i).iter().zip(all.features.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
                assert!(d > 0.0);
            }
        }
    }

    #[test]
    fn single_point_sketch_is_point_embedding() {
        let (store, e) = encoder();
        let s = SketchPrompt {
            strokes: vec![vec![[0.3, 0.7]; 5]],
        };
        let pts = s.resample(64).unwrap();
        assert!(pts.iter().all(|p| *p == [0.3, 0.7]));
        let a = e.raw_sketch_value(&store, &pts).unwrap();
        let b = e.raw_sketch_value(&store, &[[0.3, 0.7]]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn reversed_and_reordered_strokes_are_identical() {
        let (store, e) = encoder();
        let a = SketchPrompt {
            strokes: vec![vec![[0.1, 0.1], [0.9, 0.2], [0.5, 0.8]], vec![[0.0, 1.0], [1.0, 0.0]]],
        };
        let mut b = a.clone();
        b.strokes.reverse();
        b.strokes[0].reverse();
        b.strokes[1].reverse();
        let ia = Instruction::sketch(&[(3, a)], 64).unwrap();
        let ib = Instruction::sketch(&[(3, b)], 64).unwrap();
        let fa = e.encode(&store, &ia).unwrap();
        let fb = e.encode(&store, &ib).unwrap();
        assert_eq!(fa.features.data(), fb.features.data());
    }

    #[test]
    fn distinct_rectangles_do_not_collapse() {
        let (store, e) = encoder();
        let a = e.raw_sketch_value(&store, &rect(1.0, 0.3).resample(64).unwrap()).unwrap();
        let b = e.raw_sketch_value(&store, &rect(0.4, 1.0).resample(64).unwrap()).unwrap();
        let gap: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!(gap > 0.0);
        assert!(matches!(SketchPrompt { strokes: vec![] }.resample(64), Err(PromptError::EmptySketch)));
    }

    #[test]
    fn external_embeddings() {
        let (store, e) = encoder();
        let mut vectors = BTreeMap::new();
        for (i, name) in PANEL_CLASSES.iter().enumerate() {
            let mut v = vec![0.0; 16];
            v[i % 16] = 1.0;
            vectors.insert(name.to_string(), v);
        }
        let file = EmbeddingFile { dim: 16, vectors };
        let set = e.encode(&store, &Instruction::external(&file, &[1, 2], 16).unwrap()).unwrap();
        let g = Graph::inference(&store);
        let mut one_hot = vec![0.0; 16];
        one_hot[1] = 1.0;
        let want = e.project(&g, g.constant(Tensor::new(vec![1, 16], one_hot).unwrap())).unwrap().value();
        assert_eq!(set.features.row(1), want.data());
        assert_eq!(set.source[1], SlotSource::External);

        let mut partial = file.clone();
        partial.vectors.remove("pant-front");
        assert!(matches!(
            Instruction::external(&partial, &[14], 16),
            Err(PromptError::MissingClass(_))
        ));
        assert!(matches!(
            Instruction::external(&file, &[1], 512),
            Err(PromptError::DimensionMismatch { .. })
        ));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.json");
        file.write(&path).unwrap();
        let back = EmbeddingFile::read(&path).unwrap();
        for (k, v) in &file.vectors {
            let w = &back.vectors[k];
            assert!(v.iter().zip(w).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn standard_instructions() {
        let (store, e) = encoder();
        let text = e.encode(&store, &Instruction::standard(PromptMode::Text, &Prototypes::default()).unwrap()).unwrap();
        assert!(text.active.iter().all(|&a| a));
        for r in 0..NUM_CLASSES {
            assert!(text.features.row(r).iter().any(|&v| v != 0.0));
        }
        assert!(matches!(
            Instruction::standard(PromptMode::Sketch, &Prototypes::default()),
            Err(PromptError::MissingPrototype(_))
        ));
        let sketch = rect(1.0, 0.5).resample(64).unwrap();
        let raw = e.raw_sketch_value(&store, &sketch).unwrap();
        let copies = [raw.clone(), raw.clone(), raw.clone()];
        let protos = Prototypes::from_samples((0..NUM_CLASSES).flat_map(|c| copies.iter().map(move |v| (c, v.as_slice()))));
        for c in 0..NUM_CLASSES {
            for (x, y) in protos.get(c).unwrap().iter().zip(&raw) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        let std_sketch = Instruction::standard(PromptMode::Sketch, &protos).unwrap();
        let a = e.encode(&store, &std_sketch).unwrap();
        let b = e.encode(&store, &Instruction::sketch(&[(4, rect(1.0, 0.5))], 64).unwrap()).unwrap();
        for (x, y) in a.features.row(4).iter().zip(b.features.row(4)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn silhouette_fits_unit_box() {
        let p = Panel::straight(0, vec![[-20.0, -5.0], [20.0, -5.0], [20.0, 5.0], [-20.0, 5.0]]);
        let s = SketchPrompt::silhouette(&p, 8);
        let pts = &s.strokes[0];
        assert!(pts.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(pts.first(), pts.last());
        let ys: Vec<f64> = pts.iter().map(|p| p[1]).collect();
        let (lo, hi) = ys.iter().fold((1.0f64, 0.0f64), |(a, b), &y| (a.min(y), b.max(y)));
        assert!((lo - 0.375).abs() < 1e-12 && (hi - 0.625).abs() < 1e-12);
    }
}
