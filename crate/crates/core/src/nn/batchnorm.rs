//! Batch normalization over NCHW tensors.

use super::Mode;
use ndarray::{Array1, Array4};

/// Per-channel batch normalization: batch statistics in training, running
/// averages (momentum 0.1) in evaluation.
pub struct BatchNorm2d {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub grad_gamma: Array1<f64>,
    pub grad_beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    momentum: f64,
    eps: f64,
    cache: Option<BnCache>,
}

struct BnCache {
    xhat: Array4<f64>,
    inv_std: Array1<f64>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            grad_gamma: Array1::zeros(channels),
            grad_beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        debug_assert_eq!(c, self.gamma.len());
        let m = (n * h * w) as f64;
        let mut out = Array4::zeros((n, c, h, w));
        match mode {
            Mode::Train => {
                let mut xhat = Array4::zeros((n, c, h, w));
                let mut inv_std = Array1::zeros(c);
                for ch in 0..c {
                    let mut mean = 0.0;
                    for i in 0..n {
                        for y in 0..h {
                            for xx in 0..w {
                                mean += x[[i, ch, y, xx]];
                            }
                        }
                    }
                    mean /= m;
                    let mut var = 0.0;
                    for i in 0..n {
                        for y in 0..h {
                            for xx in 0..w {
                                let d = x[[i, ch, y, xx]] - mean;
                                var += d * d;
                            }
                        }
                    }
                    var /= m;
                    let istd = 1.0 / (var + self.eps).sqrt();
                    inv_std[ch] = istd;
                    let g = self.gamma[ch];
                    let b = self.beta[ch];
                    for i in 0..n {
                        for y in 0..h {
                            for xx in 0..w {
                                let xh = (x[[i, ch, y, xx]] - mean) * istd;
                                xhat[[i, ch, y, xx]] = xh;
                                out[[i, ch, y, xx]] = g * xh + b;
                            }
                        }
                    }
                    // Unbiased variance for the running estimate.
                    let var_unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
                    self.running_mean[ch] =
                        (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mean;
                    self.running_var[ch] =
                        (1.0 - self.momentum) * self.running_var[ch] + self.momentum * var_unbiased;
                }
                self.cache = Some(BnCache { xhat, inv_std });
            }
            Mode::Eval => {
                for ch in 0..c {
                    let istd = 1.0 / (self.running_var[ch] + self.eps).sqrt();
                    let mean = self.running_mean[ch];
                    let g = self.gamma[ch];
                    let b = self.beta[ch];
                    for i in 0..n {
                        for y in 0..h {
                            for xx in 0..w {
                                out[[i, ch, y, xx]] = g * (x[[i, ch, y, xx]] - mean) * istd + b;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Backward through the training-mode normalization (full dependence on
    /// batch statistics).
    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let BnCache { xhat, inv_std } = self
            .cache
            .take()
            .expect("batchnorm backward without cached forward");
        let (n, c, h, w) = dy.dim();
        let m = (n * h * w) as f64;
        let mut dx = Array4::zeros((n, c, h, w));
        for ch in 0..c {
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for i in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        let d = dy[[i, ch, y, xx]];
                        sum_dy += d;
                        sum_dy_xhat += d * xhat[[i, ch, y, xx]];
                    }
                }
            }
            self.grad_beta[ch] += sum_dy;
            self.grad_gamma[ch] += sum_dy_xhat;
            let g = self.gamma[ch];
            let istd = inv_std[ch];
            let mean_dy = sum_dy / m;
            let mean_dy_xhat = sum_dy_xhat / m;
            for i in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        dx[[i, ch, y, xx]] = g
                            * istd
                            * (dy[[i, ch, y, xx]]
                                - mean_dy
                                - xhat[[i, ch, y, xx]] * mean_dy_xhat);
                    }
                }
            }
        }
        dx
    }

    pub fn zero_grad(&mut self) {
        self.grad_gamma.fill(0.0);
        self.grad_beta.fill(0.0);
    }

    pub fn num_params(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }
}
