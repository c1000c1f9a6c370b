//! Parameterised building blocks over [`Graph`] values. Each layer only
//! stores parameter names; values live in the [`ParameterStore`].

use rand::Rng;

use super::graph::{Graph, Var};
use super::optim::ParameterStore;
use super::tensor::Tensor;
use super::NumericsError;

type Result<T> = std::result::Result<T, NumericsError>;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `y = x·W + b` with `W: in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParameterStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let weight = format!("{name}.w");
        let bias = format!("{name}.b");
        store.insert_glorot(&weight, &[in_dim, out_dim], in_dim, out_dim, rng);
        store.insert(&bias, Tensor::zeros(&[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.matmul(g.param(&self.weight)?)?.add_row(g.param(&self.bias)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: String,
    pub bias: String,
}

impl LayerNorm {
    pub fn new(store: &mut ParameterStore, name: &str, dim: usize) -> Self {
        let gain = format!("{name}.gain");
        let bias = format!("{name}.bias");
        store.insert(&gain, Tensor::full(&[dim], 1.0));
        store.insert(&bias, Tensor::zeros(&[dim]));
        Self { gain, bias }
    }

    pub fn forward<'g>(&self, g: &'g Graph<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.layer_norm(g.param(&self.gain)?, g.param(&self.bias)?, LAYER_NORM_EPS)
    }
}

/// Two linear maps with a ReLU between them.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParameterStore, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            inner: Linear::new(store, &format!("{name}.l1"), dim, hidden, rng),
            outer: Linear::new(store, &format!("{name}.l2"), hidden, dim, rng),
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let h = self.inner.forward(g, x)?.relu();
        self.outer.forward(g, h)
    }
}

/// Scaled dot-product attention over `heads` column groups with input and
/// output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParameterStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(NumericsError::ShapeMismatch {
                op: "multi_head_attention",
                left: vec![dim],
                right: vec![heads],
            });
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
        })
    }

    pub fn forward<'g>(&self, g: &'g Graph<'g>, q: Var<'g>, k: Var<'g>, v: Var<'g>) -> Result<Var<'g>> {
        Ok(self.forward_with_weights(g, q, k, v)?.0)
    }

    /// Output plus the per-head attention matrices (`n_q × n_k`).
    pub fn forward_with_weights<'g>(
        &self,
        g: &'g Graph<'g>,
        q: Var<'g>,
        k: Var<'g>,
        v: Var<'g>,
    ) -> Result<(Var<'g>, Vec<Var<'g>>)> {
        let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
        if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != self.dim || ks[1] != self.dim || vs != ks {
            return Err(NumericsError::ShapeMismatch {
                op: "multi_head_attention",
                left: qs,
                right: ks,
            });
        }
        let qp = self.query.forward(g, q)?;
        let kp = self.key.forward(g, k)?;
        let vp = self.value.forward(g, v)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = qp.slice(1, h * dh, dh)?;
            let kh = kp.slice(1, h * dh, dh)?;
            let vh = vp.slice(1, h * dh, dh)?;
            let scores = qh.matmul(kh.transpose()?)?.scale(scale);
            let attn = scores.softmax(1)?;
            outs.push(attn.matmul(vh)?);
            weights.push(attn);
        }
        let joined = if outs.len() == 1 {
            outs[0]
        } else {
            Var::concat(&outs, 1)?
        };
        Ok((self.out.forward(g, joined)?, weights))
    }
}

/// Pre-norm transformer block: `x + MHA(LN(x))` then `x + FFN(LN(x))`.
#[derive(Clone, Debug)]
pub struct SelfAttentionBlock {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

impl SelfAttentionBlock {
    pub fn new<R: Rng>(store: &mut ParameterStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            norm_attn: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm_ff: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, 2 * dim, rng),
        })
    }

    pub fn forward<'g>(&self, g: &'g Graph<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let h = self.norm_attn.forward(g, x)?;
        let x = x.add(self.attn.forward(g, h, h, h)?)?;
        let h = self.norm_ff.forward(g, x)?;
        x.add(self.ff.forward(g, h)?)
    }
}

/// Weight `C_in×C_out×K×K` and bias of a transposed convolution.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: String,
    pub bias: String,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let weight = format!("{name}.w");
        let bias = format!("{name}.b");
        let fan = kernel * kernel;
        store.insert_glorot(&weight, &[in_ch, out_ch, kernel, kernel], in_ch * fan / (stride * stride), out_ch * fan, rng);
        store.insert(&bias, Tensor::zeros(&[out_ch]));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.conv_transpose2d(g.param(&self.weight)?, g.param(&self.bias)?, self.stride, self.pad)
    }
}

/// Weight `C_out×C_in×K×K` and bias of a convolution.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: String,
    pub bias: String,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let weight = format!("{name}.w");
        let bias = format!("{name}.b");
        let fan = kernel * kernel;
        store.insert_glorot(&weight, &[out_ch, in_ch, kernel, kernel], in_ch * fan, out_ch * fan, rng);
        store.insert(&bias, Tensor::zeros(&[out_ch]));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.conv2d(g.param(&self.weight)?, g.param(&self.bias)?, self.stride, self.pad)
    }
}

/// Non-learned 2×2 average pooling over every channel, expressed as a
/// strided convolution with a constant depthwise kernel.
pub fn avg_pool2<'g>(g: &'g Graph<'g>, x: Var<'g>) -> Result<Var<'g>> {
    let channels = x.shape().get(1).copied().unwrap_or(0);
    let mut kernel = Tensor::zeros(&[channels, channels, 2, 2]);
    for c in 0..channels {
        for k in 0..4 {
            kernel.data_mut()[(c * channels + c) * 4 + k] = 0.25;
        }
    }
    x.conv2d(g.constant(kernel), g.constant(Tensor::zeros(&[channels])), 2, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn lin(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
        let (n, i) = x.dims2().unwrap();
        let o = w.shape()[1];
        (0..n)
            .map(|r| {
                (0..o)
                    .map(|c| b.data()[c] + (0..i).map(|k| x.at2(r, k) * w.at2(k, c)).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    /// Straight-line attention on nested vectors, without the tape.
    fn attention_oracle(store: &ParameterStore, mha: &MultiHeadAttention, q: &Tensor, k: &Tensor, v: &Tensor) -> Vec<Vec<f64>> {
        let p = |n: &str| store.get(n).unwrap().clone();
        let qp = lin(q, &p(&mha.query.weight), &p(&mha.query.bias));
        let kp = lin(k, &p(&mha.key.weight), &p(&mha.key.bias));
        let vp = lin(v, &p(&mha.value.weight), &p(&mha.value.bias));
        let dh = mha.dim / mha.heads;
        let mut joined = vec![vec![0.0; mha.dim]; qp.len()];
        for h in 0..mha.heads {
            for (i, qi) in qp.iter().enumerate() {
                let logits: Vec<f64> = kp
                    .iter()
                    .map(|kj| (0..dh).map(|d| qi[h * dh + d] * kj[h * dh + d]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let s: f64 = e.iter().sum();
                for d in 0..dh {
                    joined[i][h * dh + d] = e.iter().zip(&vp).map(|(w, vj)| w / s * vj[h * dh + d]).sum();
                }
            }
        }
        let jt = Tensor::from_rows(&joined).unwrap();
        lin(&jt, &p(&mha.out.weight), &p(&mha.out.bias))
    }

    fn setup(dim: usize, heads: usize) -> (ParameterStore, MultiHeadAttention, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParameterStore::new();
        let mha = MultiHeadAttention::new(&mut store, "mha", dim, heads, &mut rng).unwrap();
        // Non-zero biases so the oracle exercises them.
        for name in ["mha.q.b", "mha.k.b", "mha.v.b", "mha.o.b"] {
            store.set(name, random(&[dim], &mut rng)).unwrap();
        }
        (store, mha, rng)
    }

    #[test]
    fn attention_matches_straight_line_oracle() {
        let (store, mha, mut rng) = setup(8, 2);
        let q = random(&[4, 8], &mut rng);
        let k = random(&[4, 8], &mut rng);
        let v = random(&[4, 8], &mut rng);
        let g = Graph::inference(&store);
        let out = mha
            .forward(&g, g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()))
            .unwrap()
            .value();
        let want = attention_oracle(&store, &mha, &q, &k, &v);
        for (r, row) in want.iter().enumerate() {
            for (c, w) in row.iter().enumerate() {
                assert!((out.at2(r, c) - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (store, mha, mut rng) = setup(8, 4);
        let g = Graph::inference(&store);
        let q = g.constant(random(&[5, 8], &mut rng));
        let k = g.constant(random(&[7, 8], &mut rng));
        let (_, weights) = mha.forward_with_weights(&g, q, k, k).unwrap();
        for w in weights {
            let w = w.value();
            for r in 0..5 {
                let s: f64 = w.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_key_forces_projected_value() {
        let (store, mha, mut rng) = setup(8, 2);
        let g = Graph::inference(&store);
        let q = g.constant(random(&[3, 8], &mut rng));
        let kv = random(&[1, 8], &mut rng);
        let out = mha
            .forward(&g, q, g.constant(kv.clone()), g.constant(kv.clone()))
            .unwrap()
            .value();
        let v = mha.value.forward(&g, g.constant(kv)).unwrap();
        let projected = mha.out.forward(&g, v).unwrap().value();
        for r in 0..3 {
            for c in 0..8 {
                assert!((out.at2(r, c) - projected.at2(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn duplicated_keys_match_deduplicated() {
        let (store, mha, mut rng) = setup(8, 2);
        let g = Graph::inference(&store);
        let q = g.constant(random(&[3, 8], &mut rng));
        let kv = random(&[2, 8], &mut rng);
        let mut dup_rows: Vec<Vec<f64>> = Vec::new();
        for r in 0..2 {
            dup_rows.push(kv.row(r).to_vec());
            dup_rows.push(kv.row(r).to_vec());
        }
        let dup = Tensor::from_rows(&dup_rows).unwrap();
        let a = mha.forward(&g, q, g.constant(kv.clone()), g.constant(kv)).unwrap().value();
        let b = mha.forward(&g, q, g.constant(dup.clone()), g.constant(dup)).unwrap().value();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn attention_is_invariant_to_logit_shift() {
        // Adding a constant vector c to every key adds q·c to each logit of a
        // row, which the softmax removes. Use zero query weights plus a bias
        // so q is identical across rows and the shift is uniform.
        let (mut store, mha, mut rng) = setup(8, 2);
        store.set("mha.k.w", Tensor::identity(8)).unwrap();
        store.set("mha.k.b", Tensor::zeros(&[8])).unwrap();
        let g = Graph::inference(&store);
        let q = g.constant(random(&[3, 8], &mut rng));
        let k = random(&[4, 8], &mut rng);
        let v = g.constant(random(&[4, 8], &mut rng));
        let shift: Vec<f64> = (0..8).map(|i| 0.3 * i as f64 - 1.0).collect();
        let mut shifted = k.clone();
        for r in 0..4 {
            for c in 0..8 {
                shifted.data_mut()[r * 8 + c] += shift[c];
            }
        }
        let (a, wa) = mha.forward_with_weights(&g, q, g.constant(k), v).unwrap();
        let (b, wb) = mha.forward_with_weights(&g, q, g.constant(shifted), v).unwrap();
        assert!(a.value().max_abs_diff(&b.value()) < 1e-9);
        for (x, y) in wa.iter().zip(&wb) {
            assert!(x.value().max_abs_diff(&y.value()) < 1e-9);
        }
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParameterStore::new();
        assert!(MultiHeadAttention::new(&mut store, "m", 10, 3, &mut rng).is_err());
    }

    #[test]
    fn avg_pool_averages_quads() {
        let g = Graph::new();
        let x = Tensor::new(vec![1, 1, 2, 4], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let y = avg_pool2(&g, g.constant(x)).unwrap().value();
        assert_eq!(y.shape(), &[1, 1, 1, 2]);
        assert_eq!(y.data(), &[3.5, 5.5]);
    }
}
