//! Patch grouping and the local/global point-cloud encoders.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::numerics::layers::{Linear, SelfAttentionBlock};
use crate::numerics::{Graph, NumericsError, ParameterStore, Tensor, Var};

#[derive(Debug, thiserror::Error)]
pub enum PointCloudError {
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

type Result<T> = std::result::Result<T, PointCloudError>;

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Greedy farthest-point sampling from a seeded random start. Ties go to
/// the lowest index.
pub fn farthest_point_sample(points: &[[f64; 3]], g: usize, seed: u64) -> Result<Vec<usize>> {
    let n = points.len();
    if n == 0 || g > n {
        return Err(PointCloudError::TooFewPoints {
            needed: g.max(1),
            got: n,
        });
    }
    if g == 0 {
        return Ok(Vec::new());
    }
    let first = ChaCha8Rng::seed_from_u64(seed).random_range(0..n);
    farthest_point_sample_from(points, g, first)
}

/// Farthest-point sampling with a fixed first index.
pub fn farthest_point_sample_from(points: &[[f64; 3]], g: usize, first: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if g > n || first >= n {
        return Err(PointCloudError::TooFewPoints { needed: g, got: n });
    }
    let mut chosen = Vec::with_capacity(g);
    let mut taken = vec![false; n];
    let mut nearest = vec![f64::INFINITY; n];
    let mut next = first;
    for _ in 0..g {
        chosen.push(next);
        taken[next] = true;
        let c = points[next];
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (i, p) in points.iter().enumerate() {
            nearest[i] = nearest[i].min(dist2(*p, c));
            if !taken[i] && nearest[i] > best.0 {
                best = (nearest[i], i);
            }
        }
        next = best.1;
    }
    Ok(chosen)
}

/// Points grouped around patch centres.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub centers: Vec<[f64; 3]>,
    /// `k` point indices per centre, nearest first.
    pub groups: Vec<Vec<usize>>,
    /// Group coordinates relative to their centre.
    pub normalized: Vec<Vec<[f64; 3]>>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn group_size(&self) -> usize {
        self.groups.first().map_or(0, Vec::len)
    }
}

/// The `k` nearest points of each centre, ties broken by index.
pub fn knn_group(points: &[[f64; 3]], centers: &[usize], k: usize) -> Result<PatchSet> {
    if k > points.len() || k == 0 {
        return Err(PointCloudError::TooFewPoints {
            needed: k.max(1),
            got: points.len(),
        });
    }
    let mut out = PatchSet {
        centers: Vec::with_capacity(centers.len()),
        groups: Vec::with_capacity(centers.len()),
        normalized: Vec::with_capacity(centers.len()),
    };
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(points.len());
    for &ci in centers {
        let c = *points.get(ci).ok_or(PointCloudError::TooFewPoints {
            needed: ci + 1,
            got: points.len(),
        })?;
        order.clear();
        order.extend(points.iter().enumerate().map(|(i, p)| (dist2(*p, c), i)));
        order.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut group: Vec<(f64, usize)> = order[..k].to_vec();
        group.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let idx: Vec<usize> = group.iter().map(|g| g.1).collect();
        let normalized = idx
            .iter()
            .map(|&i| [points[i][0] - c[0], points[i][1] - c[1], points[i][2] - c[2]])
            .collect();
        out.centers.push(c);
        out.groups.push(idx);
        out.normalized.push(normalized);
    }
    Ok(out)
}

/// Everything derived from a raw cloud before any learned layer runs.
#[derive(Clone, Debug)]
pub struct CloudInput {
    pub patches: PatchSet,
    /// Subsample fed to the global encoder.
    pub global: Vec<[f64; 3]>,
}

impl CloudInput {
    pub fn prepare(points: &[[f64; 3]], cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let centers = farthest_point_sample(points, cfg.patches, seed)?;
        let patches = knn_group(points, &centers, cfg.neighbors)?;
        let global = if cfg.global_points >= points.len() {
            points.to_vec()
        } else {
            farthest_point_sample(points, cfg.global_points, seed.wrapping_add(1))?
                .into_iter()
                .map(|i| points[i])
                .collect()
        };
        Ok(Self { patches, global })
    }
}

/// Centimetres mapped to one unit of patch-embedder input.
pub const PATCH_UNIT_CM: f64 = 10.0;

/// Shared per-point MLP followed by a max over each patch.
#[derive(Clone, Debug)]
pub struct PatchEmbedder {
    pub first: Linear,
    pub second: Linear,
}

impl PatchEmbedder {
    pub fn new<R: Rng>(store: &mut ParameterStore, name: &str, hidden: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            first: Linear::new(store, &format!("{name}.l1"), 3, hidden, rng),
            second: Linear::new(store, &format!("{name}.l2"), hidden, dim, rng),
        }
    }

    /// `g × D` patch features.
    pub fn forward<'g>(&self, g: &'g Graph<'g>, patches: &PatchSet) -> std::result::Result<Var<'g>, NumericsError> {
        let (n, k) = (patches.len(), patches.group_size());
        if n == 0 || k == 0 {
            return Err(NumericsError::EmptyInput("embed_patches"));
        }
        let data: Vec<f64> = patches
            .normalized
            .iter()
            .flatten()
            .flat_map(|p| p.map(|v| v / PATCH_UNIT_CM))
            .collect();
        let x = g.constant(Tensor::new(vec![n * k, 3], data)?);
        let h = self.first.forward(g, x)?.relu();
        let y = self.second.forward(g, h)?;
        y.reshape(&[n, k, self.second.out_dim])?.max_axis(1)
    }
}

/// Centimetres mapped to one unit of global-encoder coordinates.
pub const GLOBAL_UNIT_CM: f64 = 100.0;

/// Per-point embedding plus positional encoding, self-attention blocks and a
/// mean pool.
#[derive(Clone, Debug)]
pub struct GlobalEncoder {
    pub input: Linear,
    pub hidden: Linear,
    pub blocks: Vec<SelfAttentionBlock>,
    pub dim: usize,
}

/// Sinusoidal features of coordinates in roughly `[-1, 1]`: column `j` uses
/// axis `j % 3` at angular frequency `π·(j/6 + 1)`, alternating sine and
/// cosine.
pub fn positional_encoding(coords: &[[f64; 3]], dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(coords.len() * dim);
    for p in coords {
        for j in 0..dim {
            let axis = j % 3;
            let rest = j / 3;
            let freq = std::f64::consts::PI * (rest / 2 + 1) as f64;
            let a = freq * p[axis];
            data.push(if rest % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    Tensor::new(vec![coords.len(), dim], data).expect("sized above")
}

/// Points shifted to their mean.
pub fn centered(points: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let n = points.len().max(1) as f64;
    let mut m = [0.0; 3];
    for p in points {
        for k in 0..3 {
            m[k] += p[k] / n;
        }
    }
    points.iter().map(|p| [p[0] - m[0], p[1] - m[1], p[2] - m[2]]).collect()
}

impl GlobalEncoder {
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        name: &str,
        dim: usize,
        heads: usize,
        blocks: usize,
        rng: &mut R,
    ) -> std::result::Result<Self, NumericsError> {
        Ok(Self {
            input: Linear::new(store, &format!("{name}.in1"), 3, dim, rng),
            hidden: Linear::new(store, &format!("{name}.in2"), dim, dim, rng),
            blocks: (0..blocks)
                .map(|b| SelfAttentionBlock::new(store, &format!("{name}.block{b}"), dim, heads, rng))
                .collect::<std::result::Result<_, _>>()?,
            dim,
        })
    }

    /// `(F_p: N×D, F_global: 1×D)`; coordinates are centred first, so a rigid
    /// translation of the cloud leaves both unchanged.
    pub fn forward<'g>(
        &self,
        g: &'g Graph<'g>,
        points: &[[f64; 3]],
    ) -> std::result::Result<(Var<'g>, Var<'g>), NumericsError> {
        if points.is_empty() {
            return Err(NumericsError::EmptyInput("encode_global"));
        }
        let c = centered(points);
        let scaled: Vec<[f64; 3]> = c.iter().map(|p| p.map(|v| v / GLOBAL_UNIT_CM)).collect();
        let x = g.constant(Tensor::new(vec![c.len(), 3], scaled.iter().flatten().copied().collect())?);
        let h = self.input.forward(g, x)?.relu();
        let h = self.hidden.forward(g, h)?;
        let mut h = h.add(g.constant(positional_encoding(&scaled, self.dim)))?;
        for block in &self.blocks {
            h = block.forward(g, h)?;
        }
        let pooled = h.mean_axis(0)?.reshape(&[1, self.dim])?;
        Ok((h, pooled))
    }
}

/// Both encoders of the cloud branch.
#[derive(Clone, Debug)]
pub struct CloudEncoder {
    pub patches: PatchEmbedder,
    pub global: GlobalEncoder,
}

/// Differentiable cloud features of one sample.
pub struct CloudFeatures<'g> {
    pub f_loc: Var<'g>,
    pub f_points: Var<'g>,
    pub f_global: Var<'g>,
}

impl CloudEncoder {
    pub fn new<R: Rng>(store: &mut ParameterStore, cfg: &ModelConfig, rng: &mut R) -> std::result::Result<Self, NumericsError> {
        Ok(Self {
            patches: PatchEmbedder::new(store, "cloud.patch", cfg.patch_hidden, cfg.dim, rng),
            global: GlobalEncoder::new(store, "cloud.global", cfg.dim, cfg.heads, cfg.encoder_blocks, rng)?,
        })
    }

    pub fn forward<'g>(&self, g: &'g Graph<'g>, input: &CloudInput) -> std::result::Result<CloudFeatures<'g>, NumericsError> {
        let f_loc = self.patches.forward(g, &input.patches)?;
        let (f_points, f_global) = self.global.forward(g, &input.global)?;
        Ok(CloudFeatures {
            f_loc,
            f_points,
            f_global,
        })
    }
}
