//! Fully connected layer over row batches `(N, in) -> (N, out)`.

use ndarray::{Array1, Array2};
use rand::Rng;

use super::{init_he, init_xavier, ParamVisitor, Parameterized};

pub enum Init {
    /// He-normal, for layers feeding a GELU.
    He,
    /// Xavier-uniform, for projections without a following nonlinearity.
    Xavier,
}

pub struct Linear {
    pub w: Array2<f32>,
    pub b: Array1<f32>,
    pub gw: Array2<f32>,
    pub gb: Array1<f32>,
}

impl Linear {
    pub fn new(rng: &mut impl Rng, d_in: usize, d_out: usize, init: Init) -> Self {
        let mut w = Array2::zeros((d_out, d_in));
        match init {
            Init::He => init_he(rng, d_in, w.as_slice_mut().unwrap()),
            Init::Xavier => init_xavier(rng, d_in, d_out, w.as_slice_mut().unwrap()),
        }
        Self {
            w,
            b: Array1::zeros(d_out),
            gw: Array2::zeros((d_out, d_in)),
            gb: Array1::zeros(d_out),
        }
    }

    pub fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        let mut out = x.dot(&self.w.t());
        for mut row in out.rows_mut() {
            row += &self.b;
        }
        out
    }

    /// Accumulate parameter gradients and return the input gradient.
    pub fn backward(&mut self, x: &Array2<f32>, dout: &Array2<f32>) -> Array2<f32> {
        self.gw += &dout.t().dot(x);
        for (g, col) in self.gb.iter_mut().zip(dout.columns()) {
            *g += col.sum();
        }
        dout.dot(&self.w)
    }
}

impl Parameterized for Linear {
    fn visit_params(&mut self, prefix: &str, visitor: &mut dyn ParamVisitor) {
        let shape = [self.w.dim().0, self.w.dim().1];
        visitor.visit(
            &format!("{prefix}.weight"),
            &shape,
            self.w.as_slice_mut().unwrap(),
            self.gw.as_slice_mut().unwrap(),
        );
        visitor.visit(
            &format!("{prefix}.bias"),
            &[self.b.len()],
            self.b.as_slice_mut().unwrap(),
            self.gb.as_slice_mut().unwrap(),
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::rel_err;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forward_matches_manual_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut lin = Linear::new(&mut rng, 2, 2, Init::Xavier);
        lin.w = ndarray::array![[1.0, 2.0], [0.0, -1.0]];
        lin.b = ndarray::array![0.5, 0.0];
        let x = ndarray::array![[3.0, 4.0]];
        let y = lin.forward(&x);
        assert_eq!(y, ndarray::array![[11.5, -4.0]]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut lin = Linear::new(&mut rng, 5, 4, Init::Xavier);
        let x = Array2::from_shape_fn((3, 5), |_| rng.gen_range(-1.0f32..1.0));
        let proj = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0f32..1.0));
        let loss = |l: &Linear, x: &Array2<f32>| -> f64 {
            l.forward(x)
                .iter()
                .zip(proj.iter())
                .map(|(&o, &p)| o as f64 * p as f64)
                .sum()
        };

        let dx = lin.backward(&x, &proj);
        let h = 1e-3f32;

        let dir = Array2::from_shape_fn((3, 5), |_| rng.gen_range(-1.0f32..1.0));
        let mut xp = x.clone();
        xp.scaled_add(h, &dir);
        let mut xm = x.clone();
        xm.scaled_add(-h, &dir);
        let fd = (loss(&lin, &xp) - loss(&lin, &xm)) / (2.0 * h as f64);
        let analytic: f64 = dx
            .iter()
            .zip(dir.iter())
            .map(|(&g, &d)| g as f64 * d as f64)
            .sum();
        assert!(rel_err(analytic, fd) < 1e-2, "{analytic} vs {fd}");

        let wdir = Array2::from_shape_fn(lin.w.dim(), |_| rng.gen_range(-1.0f32..1.0));
        let orig = lin.w.clone();
        let mut wp = orig.clone();
        wp.scaled_add(h, &wdir);
        let mut wm = orig.clone();
        wm.scaled_add(-h, &wdir);
        lin.w = wp;
        let lp = loss(&lin, &x);
        lin.w = wm;
        let lm = loss(&lin, &x);
        lin.w = orig;
        let fd = (lp - lm) / (2.0 * h as f64);
        let analytic: f64 = lin
            .gw
            .iter()
            .zip(wdir.iter())
            .map(|(&g, &d)| g as f64 * d as f64)
            .sum();
        assert!(rel_err(analytic, fd) < 1e-2, "{analytic} vs {fd}");
    }
}
