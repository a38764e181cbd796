//! Layer normalization over the last axis of a row batch.

use ndarray::{Array1, Array2};

use super::{ParamVisitor, Parameterized};

pub const LAYER_NORM_EPS: f32 = 1e-5;

pub struct LayerNorm {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
    pub ggamma: Array1<f32>,
    pub gbeta: Array1<f32>,
}

pub struct LayerNormCache {
    xhat: Array2<f32>,
    inv_std: Array1<f32>,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        Self {
            gamma: Array1::ones(d),
            beta: Array1::zeros(d),
            ggamma: Array1::zeros(d),
            gbeta: Array1::zeros(d),
        }
    }

    pub fn forward(&self, x: &Array2<f32>) -> (Array2<f32>, LayerNormCache) {
        let (n, d) = x.dim();
        let mut xhat = Array2::<f32>::zeros((n, d));
        let mut inv_std = Array1::<f32>::zeros(n);
        let mut out = Array2::<f32>::zeros((n, d));
        for i in 0..n {
            let row = x.row(i);
            let mean = row.sum() / d as f32;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / d as f32;
            let istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = istd;
            for j in 0..d {
                let xh = (x[(i, j)] - mean) * istd;
                xhat[(i, j)] = xh;
                out[(i, j)] = self.gamma[j] * xh + self.beta[j];
            }
        }
        (out, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dout: &Array2<f32>) -> Array2<f32> {
        let (n, d) = dout.dim();
        let mut dx = Array2::<f32>::zeros((n, d));
        for i in 0..n {
            let mut sum_dg = 0.0f32;
            let mut sum_dgx = 0.0f32;
            for j in 0..d {
                let dg = dout[(i, j)] * self.gamma[j];
                sum_dg += dg;
                sum_dgx += dg * cache.xhat[(i, j)];
                self.ggamma[j] += dout[(i, j)] * cache.xhat[(i, j)];
                self.gbeta[j] += dout[(i, j)];
            }
            let m = d as f32;
            for j in 0..d {
                let dg = dout[(i, j)] * self.gamma[j];
                dx[(i, j)] =
                    cache.inv_std[i] * (dg - sum_dg / m - cache.xhat[(i, j)] * sum_dgx / m);
            }
        }
        dx
    }
}

impl Parameterized for LayerNorm {
    fn visit_params(&mut self, prefix: &str, visitor: &mut dyn ParamVisitor) {
        visitor.visit(
            &format!("{prefix}.gamma"),
            &[self.gamma.len()],
            self.gamma.as_slice_mut().unwrap(),
            self.ggamma.as_slice_mut().unwrap(),
        );
        visitor.visit(
            &format!("{prefix}.beta"),
            &[self.beta.len()],
            self.beta.as_slice_mut().unwrap(),
            self.gbeta.as_slice_mut().unwrap(),
        );
    }
}
