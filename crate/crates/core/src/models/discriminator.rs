use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    conv_block, level_channels, push_conv, push_norm, Bound, ModelError, ModelParams, Result,
    LEAKY_SLOPE,
};
use crate::tensor::{conv2d_output_size, Graph, Tensor, Var};

const KERNEL: usize = 4;
const PAD: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    /// Image channels, plus mask channels for the conditional discriminator.
    pub in_channels: usize,
    pub base_channels: usize,
    pub n_stride2_layers: usize,
}

impl DiscriminatorConfig {
    pub fn desk(in_channels: usize) -> Self {
        Self { in_channels, base_channels: 8, n_stride2_layers: 2 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels < 1 || self.base_channels < 1 || self.n_stride2_layers < 1 {
            return Err(ModelError::InvalidConfig(format!(
                "discriminator needs in_channels, base_channels and n_stride2_layers >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Strides of the full conv stack, input to output.
    fn strides(&self) -> Vec<usize> {
        let mut s = vec![2; self.n_stride2_layers];
        s.extend([1, 1]);
        s
    }

    /// Side of the logit grid produced for a square input of side `image_size`.
    pub fn output_size(&self, image_size: usize) -> Result<usize> {
        self.strides().into_iter().try_fold(image_size, |len, s| {
            Ok(conv2d_output_size(len, KERNEL, s, PAD)?)
        })
    }

    /// Side of the input window seen by one output logit, ignoring borders.
    pub fn receptive_field(&self) -> usize {
        self.strides().iter().rev().fold(1, |rf, &s| (rf - 1) * s + KERNEL)
    }

    /// Widest span of real (non-padding) input pixels that any single output
    /// logit depends on.
    pub fn max_patch_coverage(&self, image_size: usize) -> Result<usize> {
        let strides = self.strides();
        let jump: usize = strides.iter().product();
        // Input offset of output cell 0's window: sum of pad * cumulative stride.
        let mut offset = 0usize;
        let mut cum = 1usize;
        for &s in &strides {
            offset += PAD * cum;
            cum *= s;
        }
        let rf = self.receptive_field() as isize;
        let out = self.output_size(image_size)?;
        let widest = (0..out)
            .map(|o| {
                let start = (o * jump) as isize - offset as isize;
                let lo = start.max(0);
                let hi = (start + rf).min(image_size as isize);
                (hi - lo).max(0) as usize
            })
            .max()
            .unwrap_or(0);
        Ok(widest)
    }
}

/// Fully convolutional discriminator emitting one realness logit per patch.
///
/// `n_stride2_layers` stride-2 convs, then a stride-1 conv and a one-channel
/// stride-1 head, all kernel 4 / pad 1. Only the first block skips
/// normalization, and the head has no activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub params: ModelParams,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(config: DiscriminatorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let DiscriminatorConfig { in_channels, base_channels: base, n_stride2_layers: n } = config;
        let mut params = ModelParams::new();
        let mut cin = in_channels;
        for i in 0..=n {
            let cout = level_channels(base, i);
            push_conv(&mut params, i, cin, cout, KERNEL, false, rng);
            if i > 0 {
                push_norm(&mut params, i, cout, rng);
            }
            cin = cout;
        }
        push_conv(&mut params, n + 1, cin, 1, KERNEL, false, rng);
        Ok(Self { config, params })
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        let n = self.config.n_stride2_layers;
        let mut h = x;
        for i in 0..=n {
            let stride = if i < n { 2 } else { 1 };
            h = conv_block(&self.params, bound, g, i, h, stride, false)?;
            h = g.leaky_relu(h, LEAKY_SLOPE)?;
        }
        conv_block(&self.params, bound, g, n + 1, h, 1, false)
    }

    /// Patch logits without gradient tracking.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &bound, xv)?;
        Ok(g.value(y).clone())
    }
}
