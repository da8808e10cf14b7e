//! U-Net construction, forward, and hand-written backward.

use super::NetworkError;
use crate::nn::{
    concat_channels, split_channels, BatchNorm2d, Conv2d, Mode, Relu, Sigmoid, Upsample2x,
};
use ndarray::Array4;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Output nonlinearity of the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalActivation {
    /// Unbounded reconstruction output.
    None,
    /// Probabilities in (0, 1) for segmentation.
    Sigmoid,
}

/// Architecture hyperparameters.
///
/// `depth` counts downsamplings; spatial input sizes must be divisible by
/// `2^depth`. Channels at level `l` are `base_channels * multiplier^l`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub channel_multiplier: usize,
    pub out_channels: usize,
    pub batch_norm: bool,
    pub final_activation: FinalActivation,
}

impl UNetConfig {
    /// Reconstruction (inpainting) head: 3 channels, no final activation.
    pub fn reconstruction(depth: usize, base_channels: usize) -> Self {
        Self {
            depth,
            base_channels,
            channel_multiplier: 2,
            out_channels: 3,
            batch_norm: true,
            final_activation: FinalActivation::None,
        }
    }

    /// Segmentation head: 1 channel, sigmoid.
    pub fn segmentation(depth: usize, base_channels: usize) -> Self {
        Self {
            depth,
            base_channels,
            channel_multiplier: 2,
            out_channels: 1,
            batch_norm: true,
            final_activation: FinalActivation::Sigmoid,
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.depth < 1 {
            return Err(NetworkError::InvalidConfig {
                reason: "depth must be >= 1".into(),
            });
        }
        if self.base_channels < 1 {
            return Err(NetworkError::InvalidConfig {
                reason: "base_channels must be >= 1".into(),
            });
        }
        if self.channel_multiplier < 1 {
            return Err(NetworkError::InvalidConfig {
                reason: "channel_multiplier must be >= 1".into(),
            });
        }
        if !matches!(self.out_channels, 1 | 3) {
            return Err(NetworkError::InvalidConfig {
                reason: format!("out_channels must be 1 or 3, got {}", self.out_channels),
            });
        }
        Ok(())
    }

    /// Channel width at spatial level `level` (0 = full resolution).
    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels * self.channel_multiplier.pow(level as u32)
    }

    /// Whether two configs share the same encoder/decoder trunk (everything
    /// except the output head).
    pub fn same_trunk(&self, other: &Self) -> bool {
        self.depth == other.depth
            && self.base_channels == other.base_channels
            && self.channel_multiplier == other.channel_multiplier
            && self.batch_norm == other.batch_norm
    }
}

/// Two 3x3 stride-1 convolutions, each followed by (optional) BN and ReLU.
struct ConvBlock {
    conv1: Conv2d,
    bn1: Option<BatchNorm2d>,
    relu1: Relu,
    conv2: Conv2d,
    bn2: Option<BatchNorm2d>,
    relu2: Relu,
}

impl ConvBlock {
    fn new<R: Rng>(in_c: usize, out_c: usize, batch_norm: bool, rng: &mut R) -> Self {
        Self {
            conv1: Conv2d::new(in_c, out_c, 3, 1, 1, rng),
            bn1: batch_norm.then(|| BatchNorm2d::new(out_c)),
            relu1: Relu::new(),
            conv2: Conv2d::new(out_c, out_c, 3, 1, 1, rng),
            bn2: batch_norm.then(|| BatchNorm2d::new(out_c)),
            relu2: Relu::new(),
        }
    }

    fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array4<f64> {
        let mut h = self.conv1.forward(x, mode);
        if let Some(bn) = &mut self.bn1 {
            h = bn.forward(&h, mode);
        }
        h = self.relu1.forward(&h, mode);
        h = self.conv2.forward(&h, mode);
        if let Some(bn) = &mut self.bn2 {
            h = bn.forward(&h, mode);
        }
        self.relu2.forward(&h, mode)
    }

    fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let mut d = self.relu2.backward(dy);
        if let Some(bn) = &mut self.bn2 {
            d = bn.backward(&d);
        }
        d = self.conv2.backward(&d);
        d = self.relu1.backward(&d);
        if let Some(bn) = &mut self.bn1 {
            d = bn.backward(&d);
        }
        self.conv1.backward(&d)
    }
}

/// 2x2 stride-2 downsampling convolution with (optional) BN and ReLU.
struct DownSample {
    conv: Conv2d,
    bn: Option<BatchNorm2d>,
    relu: Relu,
}

impl DownSample {
    fn new<R: Rng>(channels: usize, batch_norm: bool, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(channels, channels, 2, 2, 0, rng),
            bn: batch_norm.then(|| BatchNorm2d::new(channels)),
            relu: Relu::new(),
        }
    }

    fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array4<f64> {
        let mut h = self.conv.forward(x, mode);
        if let Some(bn) = &mut self.bn {
            h = bn.forward(&h, mode);
        }
        self.relu.forward(&h, mode)
    }

    fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let mut d = self.relu.backward(dy);
        if let Some(bn) = &mut self.bn {
            d = bn.backward(&d);
        }
        self.conv.backward(&d)
    }
}

/// The full encoder-decoder. Encoder blocks feed both the downsampling path
/// and the skip connections; the decoder upsamples x2 bilinearly,
/// concatenates the matching skip tensor, and applies a conv block. A 1x1
/// projection forms the head.
pub struct UNet {
    cfg: UNetConfig,
    enc: Vec<ConvBlock>,  // depth + 1 blocks; the last is the bottleneck
    down: Vec<DownSample>, // depth
    up: Vec<Upsample2x>,   // depth, indexed by target level
    dec: Vec<ConvBlock>,   // depth, indexed by target level
    head: Conv2d,
    final_act: Option<Sigmoid>,
}

/// Build a U-Net with seeded Kaiming-uniform initialization (BN gamma = 1,
/// beta = 0).
pub fn build_unet<R: Rng>(cfg: &UNetConfig, rng: &mut R) -> Result<UNet, NetworkError> {
    cfg.validate()?;
    let mut enc = Vec::with_capacity(cfg.depth + 1);
    let mut down = Vec::with_capacity(cfg.depth);
    for level in 0..=cfg.depth {
        let in_c = if level == 0 {
            3
        } else {
            cfg.channels_at(level - 1)
        };
        enc.push(ConvBlock::new(in_c, cfg.channels_at(level), cfg.batch_norm, rng));
        if level < cfg.depth {
            down.push(DownSample::new(cfg.channels_at(level), cfg.batch_norm, rng));
        }
    }
    let mut up = Vec::with_capacity(cfg.depth);
    let mut dec = Vec::with_capacity(cfg.depth);
    for level in 0..cfg.depth {
        up.push(Upsample2x::new());
        let in_c = cfg.channels_at(level + 1) + cfg.channels_at(level);
        dec.push(ConvBlock::new(in_c, cfg.channels_at(level), cfg.batch_norm, rng));
    }
    let head = Conv2d::new(cfg.channels_at(0), cfg.out_channels, 1, 1, 0, rng);
    let final_act = match cfg.final_activation {
        FinalActivation::Sigmoid => Some(Sigmoid::new()),
        FinalActivation::None => None,
    };
    Ok(UNet {
        cfg: cfg.clone(),
        enc,
        down,
        up,
        dec,
        head,
        final_act,
    })
}

impl UNet {
    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    /// Forward over an NCHW batch. Spatial dimensions are preserved
    /// end-to-end; they must be divisible by `2^depth`.
    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Result<Array4<f64>, NetworkError> {
        let (_, c, h, w) = x.dim();
        if c != 3 {
            return Err(NetworkError::InvalidConfig {
                reason: format!("expected 3 input channels, got {c}"),
            });
        }
        let divisor = 1usize << self.cfg.depth;
        if h % divisor != 0 || w % divisor != 0 {
            return Err(NetworkError::IndivisibleSize {
                height: h,
                width: w,
                divisor,
                depth: self.cfg.depth,
            });
        }

        let mut skips: Vec<Array4<f64>> = Vec::with_capacity(self.cfg.depth);
        let mut hcur = self.enc[0].forward(x, mode);
        for level in 0..self.cfg.depth {
            if level > 0 {
                hcur = self.enc[level].forward(&hcur, mode);
            }
            let down_in = hcur;
            hcur = self.down[level].forward(&down_in, mode);
            skips.push(down_in);
        }
        hcur = self.enc[self.cfg.depth].forward(&hcur, mode);

        for level in (0..self.cfg.depth).rev() {
            let upsampled = self.up[level].forward(&hcur, mode);
            let skip = skips.pop().expect("skip per level");
            let cat = concat_channels(&upsampled, &skip);
            drop(upsampled);
            drop(skip);
            hcur = self.dec[level].forward(&cat, mode);
        }

        let mut out = self.head.forward(&hcur, mode);
        if let Some(act) = &mut self.final_act {
            out = act.forward(&out, mode);
        }
        Ok(out)
    }

    /// Backward from the loss gradient at the output; accumulates parameter
    /// gradients and returns the gradient with respect to the input batch.
    pub fn backward(&mut self, dy: &Array4<f64>) -> Array4<f64> {
        let mut d = match &mut self.final_act {
            Some(act) => act.backward(dy),
            None => dy.clone(),
        };
        d = self.head.backward(&d);

        let mut d_skips: Vec<Option<Array4<f64>>> = (0..self.cfg.depth).map(|_| None).collect();
        for level in 0..self.cfg.depth {
            d = self.dec[level].backward(&d);
            let (d_up, d_skip) = split_channels(&d, self.cfg.channels_at(level + 1));
            d_skips[level] = Some(d_skip);
            d = self.up[level].backward(&d_up);
        }

        d = self.enc[self.cfg.depth].backward(&d);
        for level in (0..self.cfg.depth).rev() {
            d = self.down[level].backward(&d);
            d += &d_skips[level].take().expect("skip gradient per level");
            d = self.enc[level].backward(&d);
        }
        d
    }

    pub fn zero_grads(&mut self) {
        for block in self.enc.iter_mut().chain(self.dec.iter_mut()) {
            block.conv1.zero_grad();
            block.conv2.zero_grad();
            if let Some(bn) = &mut block.bn1 {
                bn.zero_grad();
            }
            if let Some(bn) = &mut block.bn2 {
                bn.zero_grad();
            }
        }
        for ds in &mut self.down {
            ds.conv.zero_grad();
            if let Some(bn) = &mut ds.bn {
                bn.zero_grad();
            }
        }
        self.head.zero_grad();
    }

    /// Total trainable parameter count.
    pub fn num_params(&self) -> usize {
        let mut total = 0;
        self.visit_params(&mut |_, v| total += v.len());
        total
    }

    /// Visit every trainable tensor (read-only) in a fixed order.
    pub fn visit_params(&self, f: &mut dyn FnMut(&str, ndarray::ArrayViewD<'_, f64>)) {
        let visit_block = |name: &str, b: &ConvBlock, f: &mut dyn FnMut(&str, ndarray::ArrayViewD<'_, f64>)| {
            f(&format!("{name}.conv1.weight"), b.conv1.weight.view().into_dyn());
            f(&format!("{name}.conv1.bias"), b.conv1.bias.view().into_dyn());
            if let Some(bn) = &b.bn1 {
                f(&format!("{name}.bn1.gamma"), bn.gamma.view().into_dyn());
                f(&format!("{name}.bn1.beta"), bn.beta.view().into_dyn());
            }
            f(&format!("{name}.conv2.weight"), b.conv2.weight.view().into_dyn());
            f(&format!("{name}.conv2.bias"), b.conv2.bias.view().into_dyn());
            if let Some(bn) = &b.bn2 {
                f(&format!("{name}.bn2.gamma"), bn.gamma.view().into_dyn());
                f(&format!("{name}.bn2.beta"), bn.beta.view().into_dyn());
            }
        };
        for (i, b) in self.enc.iter().enumerate() {
            visit_block(&format!("enc{i}"), b, f);
            if i < self.down.len() {
                let ds = &self.down[i];
                f(&format!("down{i}.conv.weight"), ds.conv.weight.view().into_dyn());
                f(&format!("down{i}.conv.bias"), ds.conv.bias.view().into_dyn());
                if let Some(bn) = &ds.bn {
                    f(&format!("down{i}.bn.gamma"), bn.gamma.view().into_dyn());
                    f(&format!("down{i}.bn.beta"), bn.beta.view().into_dyn());
                }
            }
        }
        for (i, b) in self.dec.iter().enumerate() {
            visit_block(&format!("dec{i}"), b, f);
        }
        f("head.weight", self.head.weight.view().into_dyn());
        f("head.bias", self.head.bias.view().into_dyn());
    }

    /// Visit every trainable tensor mutably along with its gradient, in the
    /// same fixed order as [`UNet::visit_params`].
    pub fn visit_params_grads_mut(
        &mut self,
        f: &mut dyn FnMut(&str, ndarray::ArrayViewMutD<'_, f64>, ndarray::ArrayViewD<'_, f64>),
    ) {
        let visit_block = |name: &str,
                           b: &mut ConvBlock,
                           f: &mut dyn FnMut(
            &str,
            ndarray::ArrayViewMutD<'_, f64>,
            ndarray::ArrayViewD<'_, f64>,
        )| {
            f(
                &format!("{name}.conv1.weight"),
                b.conv1.weight.view_mut().into_dyn(),
                b.conv1.grad_weight.view().into_dyn(),
            );
            f(
                &format!("{name}.conv1.bias"),
                b.conv1.bias.view_mut().into_dyn(),
                b.conv1.grad_bias.view().into_dyn(),
            );
            if let Some(bn) = &mut b.bn1 {
                f(
                    &format!("{name}.bn1.gamma"),
                    bn.gamma.view_mut().into_dyn(),
                    bn.grad_gamma.view().into_dyn(),
                );
                f(
                    &format!("{name}.bn1.beta"),
                    bn.beta.view_mut().into_dyn(),
                    bn.grad_beta.view().into_dyn(),
                );
            }
            f(
                &format!("{name}.conv2.weight"),
                b.conv2.weight.view_mut().into_dyn(),
                b.conv2.grad_weight.view().into_dyn(),
            );
            f(
                &format!("{name}.conv2.bias"),
                b.conv2.bias.view_mut().into_dyn(),
                b.conv2.grad_bias.view().into_dyn(),
            );
            if let Some(bn) = &mut b.bn2 {
                f(
                    &format!("{name}.bn2.gamma"),
                    bn.gamma.view_mut().into_dyn(),
                    bn.grad_gamma.view().into_dyn(),
                );
                f(
                    &format!("{name}.bn2.beta"),
                    bn.beta.view_mut().into_dyn(),
                    bn.grad_beta.view().into_dyn(),
                );
            }
        };
        let depth = self.cfg.depth;
        for i in 0..=depth {
            let b = &mut self.enc[i];
            visit_block(&format!("enc{i}"), b, f);
            if i < depth {
                let ds = &mut self.down[i];
                f(
                    &format!("down{i}.conv.weight"),
                    ds.conv.weight.view_mut().into_dyn(),
                    ds.conv.grad_weight.view().into_dyn(),
                );
                f(
                    &format!("down{i}.conv.bias"),
                    ds.conv.bias.view_mut().into_dyn(),
                    ds.conv.grad_bias.view().into_dyn(),
                );
                if let Some(bn) = &mut ds.bn {
                    f(
                        &format!("down{i}.bn.gamma"),
                        bn.gamma.view_mut().into_dyn(),
                        bn.grad_gamma.view().into_dyn(),
                    );
                    f(
                        &format!("down{i}.bn.beta"),
                        bn.beta.view_mut().into_dyn(),
                        bn.grad_beta.view().into_dyn(),
                    );
                }
            }
        }
        for i in 0..depth {
            let b = &mut self.dec[i];
            visit_block(&format!("dec{i}"), b, f);
        }
        f(
            "head.weight",
            self.head.weight.view_mut().into_dyn(),
            self.head.grad_weight.view().into_dyn(),
        );
        f(
            "head.bias",
            self.head.bias.view_mut().into_dyn(),
            self.head.grad_bias.view().into_dyn(),
        );
    }

    /// Visit every trainable tensor mutably (for checkpoint loading).
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ndarray::ArrayViewMutD<'_, f64>)) {
        self.visit_params_grads_mut(&mut |name, value, _| f(name, value));
    }

    /// Visit the non-trainable buffers (BN running statistics), read-only.
    pub fn visit_buffers(&self, f: &mut dyn FnMut(&str, ndarray::ArrayViewD<'_, f64>)) {
        let visit_bn = |name: String, bn: &Option<BatchNorm2d>, f: &mut dyn FnMut(&str, ndarray::ArrayViewD<'_, f64>)| {
            if let Some(bn) = bn {
                f(&format!("{name}.running_mean"), bn.running_mean.view().into_dyn());
                f(&format!("{name}.running_var"), bn.running_var.view().into_dyn());
            }
        };
        for (i, b) in self.enc.iter().enumerate() {
            visit_bn(format!("enc{i}.bn1"), &b.bn1, f);
            visit_bn(format!("enc{i}.bn2"), &b.bn2, f);
            if i < self.down.len() {
                visit_bn(format!("down{i}.bn"), &self.down[i].bn, f);
            }
        }
        for (i, b) in self.dec.iter().enumerate() {
            visit_bn(format!("dec{i}.bn1"), &b.bn1, f);
            visit_bn(format!("dec{i}.bn2"), &b.bn2, f);
        }
    }

    /// Visit the non-trainable buffers mutably.
    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, ndarray::ArrayViewMutD<'_, f64>)) {
        let visit_bn = |name: String, bn: &mut Option<BatchNorm2d>, f: &mut dyn FnMut(&str, ndarray::ArrayViewMutD<'_, f64>)| {
            if let Some(bn) = bn {
                f(&format!("{name}.running_mean"), bn.running_mean.view_mut().into_dyn());
                f(&format!("{name}.running_var"), bn.running_var.view_mut().into_dyn());
            }
        };
        let depth = self.cfg.depth;
        for i in 0..=depth {
            visit_bn(format!("enc{i}.bn1"), &mut self.enc[i].bn1, f);
            visit_bn(format!("enc{i}.bn2"), &mut self.enc[i].bn2, f);
            if i < depth {
                visit_bn(format!("down{i}.bn"), &mut self.down[i].bn, f);
            }
        }
        for i in 0..depth {
            visit_bn(format!("dec{i}.bn1"), &mut self.dec[i].bn1, f);
            visit_bn(format!("dec{i}.bn2"), &mut self.dec[i].bn2, f);
        }
    }
}

impl crate::nn::ParamVisitable for UNet {
    fn visit_params_grads_mut(
        &mut self,
        f: &mut dyn FnMut(&str, ndarray::ArrayViewMutD<'_, f64>, ndarray::ArrayViewD<'_, f64>),
    ) {
        UNet::visit_params_grads_mut(self, f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use rand::RngExt;

    #[test]
    fn minimal_config_builds_and_runs() {
        let cfg = UNetConfig {
            depth: 1,
            base_channels: 1,
            channel_multiplier: 2,
            out_channels: 3,
            batch_norm: true,
            final_activation: FinalActivation::None,
        };
        let mut rng = seeded_rng(1);
        let mut net = build_unet(&cfg, &mut rng).unwrap();
        let x = Array4::zeros((1, 3, 32, 32));
        let y = net.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.dim(), (1, 3, 32, 32));
    }

    #[test]
    fn invalid_out_channels_is_rejected() {
        let cfg = UNetConfig {
            depth: 2,
            base_channels: 4,
            channel_multiplier: 2,
            out_channels: 2,
            batch_norm: true,
            final_activation: FinalActivation::Sigmoid,
        };
        let mut rng = seeded_rng(1);
        assert!(matches!(
            build_unet(&cfg, &mut rng),
            Err(NetworkError::InvalidConfig { .. })
        ));
    }

    #[test]
    fn indivisible_input_names_divisor() {
        let cfg = UNetConfig::segmentation(4, 2);
        let mut rng = seeded_rng(2);
        let mut net = build_unet(&cfg, &mut rng).unwrap();
        let x = Array4::zeros((1, 3, 50, 50));
        match net.forward(&x, Mode::Eval) {
            Err(NetworkError::IndivisibleSize { divisor, .. }) => assert_eq!(divisor, 16),
            other => panic!("expected IndivisibleSize, got {other:?}"),
        }
    }

    #[test]
    fn zero_weight_segmentation_outputs_half() {
        let cfg = UNetConfig::segmentation(2, 4);
        let mut rng = seeded_rng(3);
        let mut net = build_unet(&cfg, &mut rng).unwrap();
        net.visit_params_mut(&mut |_, mut v| v.fill(0.0));
        let x = Array4::from_shape_fn((1, 3, 16, 16), |_| 0.3);
        let y = net.forward(&x, Mode::Eval).unwrap();
        for &v in y.iter() {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn parameter_count_matches_layer_arithmetic() {
        // Closed-form sum over layers, written independently of the model
        // walk: conv(k, cin, cout) has k²·cin·cout + cout parameters and BN
        // contributes 2·c.
        fn analytic_count(cfg: &UNetConfig) -> usize {
            let conv = |k: usize, cin: usize, cout: usize| k * k * cin * cout + cout;
            let bn = |c: usize| if cfg.batch_norm { 2 * c } else { 0 };
            let ch = |l: usize| cfg.base_channels * cfg.channel_multiplier.pow(l as u32);
            let block = |cin: usize, cout: usize| {
                conv(3, cin, cout) + bn(cout) + conv(3, cout, cout) + bn(cout)
            };
            let mut total = 0;
            for level in 0..=cfg.depth {
                let cin = if level == 0 { 3 } else { ch(level - 1) };
                total += block(cin, ch(level));
                if level < cfg.depth {
                    total += conv(2, ch(level), ch(level)) + bn(ch(level));
                }
            }
            for level in 0..cfg.depth {
                total += block(ch(level + 1) + ch(level), ch(level));
            }
            total + conv(1, ch(0), cfg.out_channels)
        }

        let mut rng = seeded_rng(4);
        for cfg in [
            UNetConfig::segmentation(4, 64),
            UNetConfig::reconstruction(3, 16),
            UNetConfig {
                batch_norm: false,
                ..UNetConfig::segmentation(2, 8)
            },
        ] {
            let net = build_unet(&cfg, &mut rng).unwrap();
            assert_eq!(net.num_params(), analytic_count(&cfg), "config {cfg:?}");
        }
    }

    #[test]
    fn default_unet_parameter_count_is_stable() {
        // depth 4, base 64, segmentation head: the classic 64..1024 schedule.
        let cfg = UNetConfig::segmentation(4, 64);
        let mut rng = seeded_rng(5);
        let net = build_unet(&cfg, &mut rng).unwrap();
        // Frozen via the layer-arithmetic oracle (enc 18_851_136 + down
        // 1_395_520 + dec 12_539_520 + head 65).
        assert_eq!(net.num_params(), 32_786_241);
    }

    #[test]
    fn gradients_match_finite_differences_through_whole_net() {
        // Tiny config, 64-bit arithmetic, full-batch loss = weighted sum of
        // outputs (train mode, so BN uses batch statistics).
        let cfg = UNetConfig {
            depth: 1,
            base_channels: 2,
            channel_multiplier: 2,
            out_channels: 1,
            batch_norm: true,
            final_activation: FinalActivation::Sigmoid,
        };
        let mut rng = seeded_rng(6);
        let mut net = build_unet(&cfg, &mut rng).unwrap();
        let x = Array4::from_shape_fn((1, 3, 16, 16), |_| rng.random_range(0.0..1.0));
        let weights = Array4::from_shape_fn((1, 1, 16, 16), |_| rng.random_range(-1.0..1.0));

        let y = net.forward(&x, Mode::Train).unwrap();
        let _ = y;
        net.zero_grads();
        let y = net.forward(&x, Mode::Train).unwrap();
        let loss0: f64 = y.iter().zip(weights.iter()).map(|(a, b)| a * b).sum();
        let _ = loss0;
        net.backward(&weights);

        // Collect analytic grads.
        let mut grads: Vec<(String, ndarray::ArrayD<f64>)> = Vec::new();
        net.visit_params_grads_mut(&mut |name, _, g| {
            grads.push((name.to_string(), g.to_owned()));
        });

        // Finite differences over a sample of parameters in each tensor.
        let h = 1e-5;
        let mut checked = 0usize;
        let mut failures = Vec::new();
        for (name, grad) in &grads {
            let len = grad.len();
            let sample: Vec<usize> = if len <= 4 {
                (0..len).collect()
            } else {
                vec![0, len / 3, len / 2, len - 1]
            };
            for &flat in &sample {
                let loss_at = |delta: f64, net: &mut UNet| -> f64 {
                    let mut idx = 0usize;
                    net.visit_params_mut(&mut |n, mut v| {
                        if n == name {
                            let slice = v.as_slice_mut().expect("standard layout");
                            slice[flat] += delta;
                        }
                        idx += 1;
                    });
                    let _ = idx;
                    let y = net.forward(&x, Mode::Train).unwrap();
                    // Undo the perturbation.
                    net.visit_params_mut(&mut |n, mut v| {
                        if n == name {
                            let slice = v.as_slice_mut().expect("standard layout");
                            slice[flat] -= delta;
                        }
                    });
                    y.iter().zip(weights.iter()).map(|(a, b)| a * b).sum()
                };
                let plus = loss_at(h, &mut net);
                let minus = loss_at(-h, &mut net);
                let fd = (plus - minus) / (2.0 * h);
                let a = grad.as_slice().expect("layout")[flat];
                let denom = fd.abs().max(a.abs()).max(1e-6);
                if (a - fd).abs() / denom > 1e-3 {
                    failures.push(format!("{name}[{flat}]: analytic {a} vs fd {fd}"));
                }
                checked += 1;
            }
        }
        assert!(checked > 50);
        assert!(failures.is_empty(), "gradient mismatches:\n{}", failures.join("\n"));
    }
}
