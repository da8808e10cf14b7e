//! 2D convolution via tiled im2col and matrix multiplication.

use super::Mode;
use ndarray::{s, Array1, Array2, Array4, ArrayView3, ArrayViewMut3};
use rand::{Rng, RngExt};

/// Upper bound on im2col tile size in output pixels; keeps the column buffer
/// small at large spatial scales.
const TILE_PIXELS: usize = 16384;

/// A 2D convolution layer over NCHW tensors with square kernels.
pub struct Conv2d {
    pub weight: Array4<f64>, // [out_c, in_c, k, k]
    pub bias: Array1<f64>,
    pub grad_weight: Array4<f64>,
    pub grad_bias: Array1<f64>,
    kernel: usize,
    stride: usize,
    padding: usize,
    cache_input: Option<Array4<f64>>,
}

impl Conv2d {
    /// Kaiming-uniform weight init (`U(-sqrt(6/fan_in), sqrt(6/fan_in))`),
    /// bias `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let w_bound = (6.0 / fan_in).sqrt();
        let b_bound = 1.0 / fan_in.sqrt();
        let mut weight = Array4::zeros((out_channels, in_channels, kernel, kernel));
        for v in weight.iter_mut() {
            *v = rng.random_range(-w_bound..w_bound);
        }
        let mut bias = Array1::zeros(out_channels);
        for v in bias.iter_mut() {
            *v = rng.random_range(-b_bound..b_bound);
        }
        Self {
            grad_weight: Array4::zeros(weight.dim()),
            grad_bias: Array1::zeros(out_channels),
            weight,
            bias,
            kernel,
            stride,
            padding,
            cache_input: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array4<f64> {
        let (n, c_in, h, w) = x.dim();
        assert_eq!(c_in, self.in_channels(), "conv input channels");
        let (oh, ow) = self.out_size(h, w);
        let ckk = c_in * self.kernel * self.kernel;
        let out_c = self.out_channels();
        let w2 = self
            .weight
            .view()
            .into_shape_with_order((out_c, ckk))
            .expect("weight reshape");

        let tile_rows = (TILE_PIXELS / ow).clamp(1, oh);
        let mut col = Array2::zeros((ckk, tile_rows * ow));
        let mut out = Array4::zeros((n, out_c, oh, ow));
        for i in 0..n {
            let x_i = x.index_axis(ndarray::Axis(0), i);
            let mut oy0 = 0;
            while oy0 < oh {
                let rows = tile_rows.min(oh - oy0);
                let l = rows * ow;
                let mut col_tile = col.slice_mut(s![.., ..l]);
                im2col_tile(
                    x_i,
                    col_tile.view_mut(),
                    self.kernel,
                    self.stride,
                    self.padding,
                    oy0,
                    rows,
                    ow,
                );
                let y_tile = w2.dot(&col_tile.view()); // [out_c, l]
                for oc in 0..out_c {
                    let b = self.bias[oc];
                    let src = y_tile.row(oc);
                    let mut dst = out.slice_mut(s![i, oc, oy0..oy0 + rows, ..]);
                    let dst_flat = dst.as_slice_mut().expect("contiguous output");
                    for (d, &s) in dst_flat.iter_mut().zip(src.iter()) {
                        *d = s + b;
                    }
                }
                oy0 += rows;
            }
        }
        if mode == Mode::Train {
            self.cache_input = Some(x.clone());
        }
        out
    }

    /// Backward pass; accumulates weight/bias gradients and returns the
    /// gradient with respect to the input.
    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let x = self
            .cache_input
            .take()
            .expect("conv backward without cached forward");
        let (n, c_in, h, w) = x.dim();
        let (_, out_c, oh, ow) = dy.dim();
        debug_assert_eq!(out_c, self.out_channels());
        let ckk = c_in * self.kernel * self.kernel;

        let w2 = self
            .weight
            .view()
            .into_shape_with_order((out_c, ckk))
            .expect("weight reshape");
        let mut grad_w2 = Array2::zeros((out_c, ckk));
        let mut dx = Array4::zeros((n, c_in, h, w));
        let tile_rows = (TILE_PIXELS / ow).clamp(1, oh);
        let mut col = Array2::zeros((ckk, tile_rows * ow));
        for i in 0..n {
            let x_i = x.index_axis(ndarray::Axis(0), i);
            let mut oy0 = 0;
            while oy0 < oh {
                let rows = tile_rows.min(oh - oy0);
                let l = rows * ow;
                let mut col_tile = col.slice_mut(s![.., ..l]);
                im2col_tile(
                    x_i,
                    col_tile.view_mut(),
                    self.kernel,
                    self.stride,
                    self.padding,
                    oy0,
                    rows,
                    ow,
                );
                let dy_tile_owned = dy.slice(s![i, .., oy0..oy0 + rows, ..]).to_owned();
                let dy_tile = dy_tile_owned
                    .into_shape_with_order((out_c, l))
                    .expect("dy tile reshape");
                grad_w2 += &dy_tile.dot(&col_tile.t());
                for oc in 0..out_c {
                    self.grad_bias[oc] += dy_tile.row(oc).sum();
                }
                let dcol = w2.t().dot(&dy_tile); // [ckk, l]
                col2im_tile(
                    &dcol,
                    dx.index_axis_mut(ndarray::Axis(0), i),
                    self.kernel,
                    self.stride,
                    self.padding,
                    oy0,
                    rows,
                    ow,
                );
                oy0 += rows;
            }
        }
        let grad_w4 = grad_w2
            .into_shape_with_order(self.weight.dim())
            .expect("grad reshape");
        self.grad_weight += &grad_w4;
        dx
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.fill(0.0);
        self.grad_bias.fill(0.0);
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Fill `col` (shape `[c*k*k, rows*ow]`) with the receptive fields of output
/// rows `oy0 .. oy0+rows`.
#[allow(clippy::too_many_arguments)]
fn im2col_tile(
    x: ArrayView3<f64>,
    mut col: ndarray::ArrayViewMut2<f64>,
    k: usize,
    s: usize,
    p: usize,
    oy0: usize,
    rows: usize,
    ow: usize,
) {
    let (c_in, h, w) = x.dim();
    let x_slice = x.to_slice().expect("contiguous input");
    for c in 0..c_in {
        let plane = &x_slice[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let mut dst_row = col.row_mut(row);
                let dst = dst_row.as_slice_mut().expect("contiguous col row");
                let mut idx = 0;
                for dy_row in 0..rows {
                    let oy = oy0 + dy_row;
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        dst[idx..idx + ow].fill(0.0);
                        idx += ow;
                        continue;
                    }
                    let row_base = iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * s + kx) as isize - p as isize;
                        dst[idx] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            plane[row_base + ix as usize]
                        };
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// Scatter-add a column-gradient tile back into the input gradient.
#[allow(clippy::too_many_arguments)]
fn col2im_tile(
    dcol: &Array2<f64>,
    mut dx: ArrayViewMut3<f64>,
    k: usize,
    s: usize,
    p: usize,
    oy0: usize,
    rows: usize,
    ow: usize,
) {
    let (c_in, h, w) = dx.dim();
    let dx_slice = dx.as_slice_mut().expect("contiguous dx");
    let dcol_slice = dcol.as_slice().expect("contiguous dcol");
    let l = rows * ow;
    for c in 0..c_in {
        let plane = &mut dx_slice[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &dcol_slice[row * l..(row + 1) * l];
                let mut idx = 0;
                for dy_row in 0..rows {
                    let oy = oy0 + dy_row;
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        idx += ow;
                        continue;
                    }
                    let row_base = iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[row_base + ix as usize] += src[idx];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    /// Direct convolution oracle, no im2col.
    fn conv_oracle(x: &Array4<f64>, conv: &Conv2d, k: usize, s: usize, p: usize) -> Array4<f64> {
        let (n, c_in, h, w) = x.dim();
        let out_c = conv.out_channels();
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (w + 2 * p - k) / s + 1;
        let mut out = Array4::zeros((n, out_c, oh, ow));
        for i in 0..n {
            for oc in 0..out_c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = conv.bias[oc];
                        for c in 0..c_in {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                        acc += conv.weight[[oc, c, ky, kx]]
                                            * x[[i, c, iy as usize, ix as usize]];
                                    }
                                }
                            }
                        }
                        out[[i, oc, oy, ox]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_direct_convolution() {
        let mut rng = seeded_rng(1);
        for &(k, s, p) in &[(3usize, 1usize, 1usize), (2, 2, 0), (1, 1, 0)] {
            let mut conv = Conv2d::new(3, 4, k, s, p, &mut rng);
            let x = Array4::from_shape_fn((2, 3, 8, 8), |_| rng.random_range(-1.0..1.0));
            let ours = conv.forward(&x, Mode::Eval);
            let oracle = conv_oracle(&x, &conv, k, s, p);
            assert_eq!(ours.dim(), oracle.dim());
            for (a, b) in ours.iter().zip(oracle.iter()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn tiling_does_not_change_results() {
        // Input tall enough to force multiple tiles at a narrow width.
        let mut rng = seeded_rng(7);
        let mut conv = Conv2d::new(2, 3, 3, 1, 1, &mut rng);
        let x = Array4::from_shape_fn((1, 2, 200, 90), |_| rng.random_range(-1.0..1.0));
        let ours = conv.forward(&x, Mode::Eval);
        let oracle = conv_oracle(&x, &conv, 3, 1, 1);
        for (a, b) in ours.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = seeded_rng(2);
        let mut conv = Conv2d::new(2, 3, 3, 1, 1, &mut rng);
        let x = Array4::from_shape_fn((1, 2, 5, 5), |_| rng.random_range(-1.0..1.0));
        // Scalar loss: sum of outputs squared / 2 -> dL/dy = y.
        let y = conv.forward(&x, Mode::Train);
        let dx = conv.backward(&y.clone());

        let loss = |conv: &mut Conv2d, x: &Array4<f64>| -> f64 {
            let y = conv.forward(x, Mode::Eval);
            0.5 * y.iter().map(|v| v * v).sum::<f64>()
        };
        let h = 1e-6;

        for idx in [(0, 0, 0, 0), (0, 1, 2, 3), (0, 0, 4, 4)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&mut conv, &xp) - loss(&mut conv, &xm)) / (2.0 * h);
            let a = dx[idx];
            assert!(
                (a - fd).abs() / fd.abs().max(a.abs()).max(1e-8) < 1e-5,
                "input grad {a} vs fd {fd} at {idx:?}"
            );
        }

        for idx in [(0, 0, 0, 0), (2, 1, 2, 2), (1, 0, 1, 1)] {
            let orig = conv.weight[idx];
            conv.weight[idx] = orig + h;
            let plus = loss(&mut conv, &x);
            conv.weight[idx] = orig - h;
            let minus = loss(&mut conv, &x);
            conv.weight[idx] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let a = conv.grad_weight[idx];
            assert!(
                (a - fd).abs() / fd.abs().max(a.abs()).max(1e-8) < 1e-5,
                "weight grad {a} vs fd {fd} at {idx:?}"
            );
        }

        for oc in 0..3 {
            let fd = {
                let orig = conv.bias[oc];
                conv.bias[oc] = orig + h;
                let plus = loss(&mut conv, &x);
                conv.bias[oc] = orig - h;
                let minus = loss(&mut conv, &x);
                conv.bias[oc] = orig;
                (plus - minus) / (2.0 * h)
            };
            let a = conv.grad_bias[oc];
            assert!((a - fd).abs() / fd.abs().max(1e-8) < 1e-5);
        }
    }

    #[test]
    fn strided_conv_halves_spatial_dims() {
        let mut rng = seeded_rng(3);
        let mut conv = Conv2d::new(4, 4, 2, 2, 0, &mut rng);
        let x = Array4::zeros((1, 4, 16, 16));
        let y = conv.forward(&x, Mode::Eval);
        assert_eq!(y.dim(), (1, 4, 8, 8));
    }
}
