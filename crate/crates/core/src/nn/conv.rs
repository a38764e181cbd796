//! 2-D convolution via im2col and matrix multiplication. Activations are
//! channel-first `(C, H, W)`.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;

use super::{init_he, ParamVisitor, Parameterized};

pub struct Conv2d {
    /// Weight in GEMM form `(c_out, c_in * k * k)`.
    pub w: Array2<f32>,
    pub b: Array1<f32>,
    pub gw: Array2<f32>,
    pub gb: Array1<f32>,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        rng: &mut impl Rng,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let cols = c_in * k * k;
        let mut w = Array2::zeros((c_out, cols));
        init_he(rng, cols, w.as_slice_mut().unwrap());
        Self {
            w,
            b: Array1::zeros(c_out),
            gw: Array2::zeros((c_out, cols)),
            gb: Array1::zeros(c_out),
            c_in,
            c_out,
            k,
            stride,
            pad,
        }
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Array3<f32>) -> Array2<f32> {
        let (_, h, w) = x.dim();
        let (ho, wo) = self.out_dims(h, w);
        let mut cols = Array2::<f32>::zeros((self.c_in * self.k * self.k, ho * wo));
        for c in 0..self.c_in {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[(row, oy * wo + ox)] = x[(c, iy as usize, ix as usize)];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<f32>, h: usize, w: usize) -> Array3<f32> {
        let (ho, wo) = self.out_dims(h, w);
        let mut dx = Array3::<f32>::zeros((self.c_in, h, w));
        for c in 0..self.c_in {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dx[(c, iy as usize, ix as usize)] += dcols[(row, oy * wo + ox)];
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &Array3<f32>) -> Array3<f32> {
        let (_, h, w) = x.dim();
        let (ho, wo) = self.out_dims(h, w);
        let cols = self.im2col(x);
        let mut out = self.w.dot(&cols);
        for (mut row, &bias) in out.rows_mut().into_iter().zip(self.b.iter()) {
            row += bias;
        }
        out.into_shape_with_order((self.c_out, ho, wo)).unwrap()
    }

    /// Accumulate parameter gradients and return the input gradient.
    /// Recomputes im2col from `x`, trading compute for activation memory.
    pub fn backward(&mut self, x: &Array3<f32>, dout: &Array3<f32>) -> Array3<f32> {
        let (_, h, w) = x.dim();
        let (ho, wo) = self.out_dims(h, w);
        let cols = self.im2col(x);
        let dout2 = dout
            .view()
            .into_shape_with_order((self.c_out, ho * wo))
            .unwrap();
        self.gw += &dout2.dot(&cols.t());
        for (g, row) in self.gb.iter_mut().zip(dout2.rows()) {
            *g += row.sum();
        }
        let dcols = self.w.t().dot(&dout2);
        self.col2im(&dcols, h, w)
    }
}

impl Parameterized for Conv2d {
    fn visit_params(&mut self, prefix: &str, visitor: &mut dyn ParamVisitor) {
        visitor.visit(
            &format!("{prefix}.weight"),
            &[self.c_out, self.c_in, self.k, self.k],
            self.w.as_slice_mut().unwrap(),
            self.gw.as_slice_mut().unwrap(),
        );
        visitor.visit(
            &format!("{prefix}.bias"),
            &[self.c_out],
            self.b.as_slice_mut().unwrap(),
            self.gb.as_slice_mut().unwrap(),
        );
    }
}
