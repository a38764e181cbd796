//! Multi-head self-attention and the pre-norm transformer encoder layer.

use ndarray::{Array2, Array3};
use rand::Rng;

use super::linear::{Init, Linear};
use super::norm::{LayerNorm, LayerNormCache};
use super::{gelu, gelu_grad, ParamVisitor, Parameterized};

pub struct MultiHeadAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    n_heads: usize,
    head_dim: usize,
}

pub struct AttnCache {
    x: Array2<f32>,
    q: Array2<f32>,
    k: Array2<f32>,
    v: Array2<f32>,
    /// Softmax probabilities per head: `(heads, V, V)`.
    probs: Array3<f32>,
    ctx: Array2<f32>,
}

impl MultiHeadAttention {
    pub fn new(rng: &mut impl Rng, d: usize, n_heads: usize) -> Self {
        assert!(d % n_heads == 0, "model dim must divide into heads");
        Self {
            wq: Linear::new(rng, d, d, Init::Xavier),
            wk: Linear::new(rng, d, d, Init::Xavier),
            wv: Linear::new(rng, d, d, Init::Xavier),
            wo: Linear::new(rng, d, d, Init::Xavier),
            n_heads,
            head_dim: d / n_heads,
        }
    }

    pub fn forward(&self, x: &Array2<f32>) -> (Array2<f32>, AttnCache) {
        let (v_len, d) = x.dim();
        let (hd, heads) = (self.head_dim, self.n_heads);
        let q = self.wq.forward(x);
        let k = self.wk.forward(x);
        let v = self.wv.forward(x);
        let scale = 1.0 / (hd as f32).sqrt();

        let mut probs = Array3::<f32>::zeros((heads, v_len, v_len));
        let mut ctx = Array2::<f32>::zeros((v_len, d));
        for h in 0..heads {
            let cols = h * hd..(h + 1) * hd;
            let qh = q.slice(ndarray::s![.., cols.clone()]);
            let kh = k.slice(ndarray::s![.., cols.clone()]);
            let vh = v.slice(ndarray::s![.., cols.clone()]);
            let mut scores = qh.dot(&kh.t());
            scores *= scale;
            // Row-wise softmax with max subtraction.
            for (i, row) in scores.rows().into_iter().enumerate() {
                let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0;
                for (j, &s) in row.iter().enumerate() {
                    let e = (s - max).exp();
                    probs[(h, i, j)] = e;
                    sum += e;
                }
                for j in 0..v_len {
                    probs[(h, i, j)] /= sum;
                }
            }
            let ph = probs.slice(ndarray::s![h, .., ..]);
            let ctx_h = ph.dot(&vh);
            ctx.slice_mut(ndarray::s![.., cols]).assign(&ctx_h);
        }
        let out = self.wo.forward(&ctx);
        (
            out,
            AttnCache {
                x: x.clone(),
                q,
                k,
                v,
                probs,
                ctx,
            },
        )
    }

    pub fn backward(&mut self, cache: &AttnCache, dout: &Array2<f32>) -> Array2<f32> {
        let (v_len, d) = cache.x.dim();
        let (hd, heads) = (self.head_dim, self.n_heads);
        let scale = 1.0 / (hd as f32).sqrt();

        let dctx = self.wo.backward(&cache.ctx, dout);
        let mut dq = Array2::<f32>::zeros((v_len, d));
        let mut dk = Array2::<f32>::zeros((v_len, d));
        let mut dv = Array2::<f32>::zeros((v_len, d));
        for h in 0..heads {
            let cols = h * hd..(h + 1) * hd;
            let qh = cache.q.slice(ndarray::s![.., cols.clone()]);
            let kh = cache.k.slice(ndarray::s![.., cols.clone()]);
            let vh = cache.v.slice(ndarray::s![.., cols.clone()]);
            let ph = cache.probs.slice(ndarray::s![h, .., ..]);
            let dctx_h = dctx.slice(ndarray::s![.., cols.clone()]);

            let dprobs = dctx_h.dot(&vh.t());
            dv.slice_mut(ndarray::s![.., cols.clone()])
                .assign(&ph.t().dot(&dctx_h));

            let mut dscores = Array2::<f32>::zeros((v_len, v_len));
            for i in 0..v_len {
                let mut dot = 0.0;
                for j in 0..v_len {
                    dot += dprobs[(i, j)] * ph[(i, j)];
                }
                for j in 0..v_len {
                    dscores[(i, j)] = ph[(i, j)] * (dprobs[(i, j)] - dot) * scale;
                }
            }
            dq.slice_mut(ndarray::s![.., cols.clone()])
                .assign(&dscores.dot(&kh));
            dk.slice_mut(ndarray::s![.., cols])
                .assign(&dscores.t().dot(&qh));
        }
        let mut dx = self.wq.backward(&cache.x, &dq);
        dx += &self.wk.backward(&cache.x, &dk);
        dx += &self.wv.backward(&cache.x, &dv);
        dx
    }
}

impl Parameterized for MultiHeadAttention {
    fn visit_params(&mut self, prefix: &str, visitor: &mut dyn ParamVisitor) {
        self.wq.visit_params(&format!("{prefix}.wq"), visitor);
        self.wk.visit_params(&format!("{prefix}.wk"), visitor);
        self.wv.visit_params(&format!("{prefix}.wv"), visitor);
        self.wo.visit_params(&format!("{prefix}.wo"), visitor);
    }
}

/// Pre-norm encoder layer: `a = x + attn(ln1(x)); out = a + ffn(ln2(a))`
/// with a GELU between the two feed-forward maps.
pub struct TransformerLayer {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

pub struct TransformerCache {
    ln1: LayerNormCache,
    attn: AttnCache,
    ln2: LayerNormCache,
    n2: Array2<f32>,
    h1: Array2<f32>,
    g: Array2<f32>,
}

impl TransformerLayer {
    pub fn new(rng: &mut impl Rng, d: usize, n_heads: usize, ffn_dim: usize) -> Self {
        Self {
            ln1: LayerNorm::new(d),
            attn: MultiHeadAttention::new(rng, d, n_heads),
            ln2: LayerNorm::new(d),
            ff1: Linear::new(rng, d, ffn_dim, Init::He),
            ff2: Linear::new(rng, ffn_dim, d, Init::Xavier),
        }
    }

    pub fn forward(&self, x: &Array2<f32>) -> (Array2<f32>, TransformerCache) {
        let (n1, c_ln1) = self.ln1.forward(x);
        let (attn_out, c_attn) = self.attn.forward(&n1);
        let a = x + &attn_out;
        let (n2, c_ln2) = self.ln2.forward(&a);
        let h1 = self.ff1.forward(&n2);
        let g = h1.mapv(gelu);
        let f = self.ff2.forward(&g);
        let out = &a + &f;
        (
            out,
            TransformerCache {
                ln1: c_ln1,
                attn: c_attn,
                ln2: c_ln2,
                n2,
                h1,
                g,
            },
        )
    }

    pub fn backward(&mut self, cache: &TransformerCache, dout: &Array2<f32>) -> Array2<f32> {
        let dg = self.ff2.backward(&cache.g, dout);
        let dh1 = &dg * &cache.h1.mapv(gelu_grad);
        let dn2 = self.ff1.backward(&cache.n2, &dh1);
        let da = dout + &self.ln2.backward(&cache.ln2, &dn2);
        let dn1 = self.attn.backward(&cache.attn, &da);
        &da + &self.ln1.backward(&cache.ln1, &dn1)
    }
}

impl Parameterized for TransformerLayer {
    fn visit_params(&mut self, prefix: &str, visitor: &mut dyn ParamVisitor) {
        self.ln1.visit_params(&format!("{prefix}.ln1"), visitor);
        self.attn.visit_params(&format!("{prefix}.attn"), visitor);
        self.ln2.visit_params(&format!("{prefix}.ln2"), visitor);
        self.ff1.visit_params(&format!("{prefix}.ff1"), visitor);
        self.ff2.visit_params(&format!("{prefix}.ff2"), visitor);
    }
}
