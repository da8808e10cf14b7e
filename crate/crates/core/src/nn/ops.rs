//! Activation, upsampling, and channel-concatenation primitives.

use super::Mode;
use ndarray::{Array4, Axis};

pub struct Relu {
    cache_mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Self { cache_mask: None }
    }

    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array4<f64> {
        let mut out = x.clone();
        if mode == Mode::Train {
            let mut mask = vec![false; x.len()];
            for (i, v) in out.iter_mut().enumerate() {
                if *v > 0.0 {
                    mask[i] = true;
                } else {
                    *v = 0.0;
                }
            }
            self.cache_mask = Some(mask);
        } else {
            for v in out.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        out
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let mask = self
            .cache_mask
            .take()
            .expect("relu backward without cached forward");
        let mut dx = dy.clone();
        for (i, v) in dx.iter_mut().enumerate() {
            if !mask[i] {
                *v = 0.0;
            }
        }
        dx
    }
}

impl Default for Relu {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Sigmoid {
    cache_out: Option<Array4<f64>>,
}

impl Sigmoid {
    pub fn new() -> Self {
        Self { cache_out: None }
    }

    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array4<f64> {
        let out = x.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        if mode == Mode::Train {
            self.cache_out = Some(out.clone());
        }
        out
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let y = self
            .cache_out
            .take()
            .expect("sigmoid backward without cached forward");
        let mut dx = dy.clone();
        for (d, &s) in dx.iter_mut().zip(y.iter()) {
            *d *= s * (1.0 - s);
        }
        dx
    }
}

impl Default for Sigmoid {
    fn default() -> Self {
        Self::new()
    }
}

/// x2 bilinear upsampling with half-pixel centers.
pub struct Upsample2x {
    cache_in_dim: Option<(usize, usize, usize, usize)>,
}

/// Source taps for one output coordinate: two clamped indices and the weight
/// of the second one.
fn taps(o: usize, in_len: usize) -> (usize, usize, f64) {
    let f = (o as f64 + 0.5) / 2.0 - 0.5;
    let i0 = f.floor();
    let t = f - i0;
    let a = (i0.max(0.0) as usize).min(in_len - 1);
    let b = ((i0 + 1.0).max(0.0) as usize).min(in_len - 1);
    (a, b, t)
}

impl Upsample2x {
    pub fn new() -> Self {
        Self { cache_in_dim: None }
    }

    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let (oh, ow) = (h * 2, w * 2);
        let mut out = Array4::zeros((n, c, oh, ow));
        for i in 0..n {
            for ch in 0..c {
                for oy in 0..oh {
                    let (y0, y1, ty) = taps(oy, h);
                    for ox in 0..ow {
                        let (x0, x1, tx) = taps(ox, w);
                        out[[i, ch, oy, ox]] = x[[i, ch, y0, x0]] * (1.0 - ty) * (1.0 - tx)
                            + x[[i, ch, y0, x1]] * (1.0 - ty) * tx
                            + x[[i, ch, y1, x0]] * ty * (1.0 - tx)
                            + x[[i, ch, y1, x1]] * ty * tx;
                    }
                }
            }
        }
        if mode == Mode::Train {
            self.cache_in_dim = Some((n, c, h, w));
        }
        out
    }

    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = self
            .cache_in_dim
            .take()
            .expect("upsample backward without cached forward");
        let mut dx = Array4::zeros((n, c, h, w));
        let (oh, ow) = (h * 2, w * 2);
        for i in 0..n {
            for ch in 0..c {
                for oy in 0..oh {
                    let (y0, y1, ty) = taps(oy, h);
                    for ox in 0..ow {
                        let (x0, x1, tx) = taps(ox, w);
                        let d = dy[[i, ch, oy, ox]];
                        dx[[i, ch, y0, x0]] += d * (1.0 - ty) * (1.0 - tx);
                        dx[[i, ch, y0, x1]] += d * (1.0 - ty) * tx;
                        dx[[i, ch, y1, x0]] += d * ty * (1.0 - tx);
                        dx[[i, ch, y1, x1]] += d * ty * tx;
                    }
                }
            }
        }
        dx
    }
}

impl Default for Upsample2x {
    fn default() -> Self {
        Self::new()
    }
}

/// Concatenate two NCHW tensors along the channel axis (standard layout).
pub fn concat_channels(a: &Array4<f64>, b: &Array4<f64>) -> Array4<f64> {
    let cat = ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("channel concat");
    if cat.is_standard_layout() {
        cat
    } else {
        Array4::from_shape_vec(cat.dim(), cat.iter().copied().collect()).expect("re-layout")
    }
}

/// Split a channel-concatenated gradient back into the two parts.
pub fn split_channels(d: &Array4<f64>, first: usize) -> (Array4<f64>, Array4<f64>) {
    let (view_a, view_b) = d.view().split_at(Axis(1), first);
    (view_a.to_owned(), view_b.to_owned())
}
