use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{
    conv_block, level_channels, push_conv, push_norm, Bound, ModelError, ModelParams, Result,
    DROPOUT_P, LEAKY_SLOPE,
};
use crate::tensor::{Graph, Tensor, TensorError, Var};

/// Decoder blocks (counted from the bottleneck) that apply dropout in training.
const DROPOUT_BLOCKS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    /// Number of stride-2 downsampling stages.
    pub depth: usize,
    /// Side of the square input, a power of two.
    pub image_size: usize,
}

impl GeneratorConfig {
    pub fn desk(in_channels: usize, out_channels: usize) -> Self {
        Self { in_channels, out_channels, base_channels: 8, depth: 3, image_size: 32 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.depth < 1 || self.base_channels < 1 {
            return bad(format!(
                "depth ({}) and base_channels ({}) must be >= 1",
                self.depth, self.base_channels
            ));
        }
        if self.in_channels < 1 || self.out_channels < 1 {
            return bad("channel counts must be >= 1".into());
        }
        if !self.image_size.is_power_of_two() {
            return bad(format!("image_size {} is not a power of two", self.image_size));
        }
        if self.depth >= usize::BITS as usize || self.image_size < 1 << self.depth {
            return bad(format!(
                "image_size {} too small for {} downsampling stages",
                self.image_size, self.depth
            ));
        }
        Ok(())
    }
}

/// Encoder-decoder generator with skip connections at every resolution.
///
/// Encoder block `i` (`0..depth`) is a stride-2 conv to `level_channels(i)`;
/// blocks other than the first and the innermost are instance-normalized,
/// and every block after the first is preceded by a leaky ReLU. Decoder block
/// `depth + j` upsamples with a transposed conv after a ReLU; all but the
/// outermost are normalized and concatenated with the matching encoder
/// features. The outermost decoder block ends in `tanh`.
#[derive(Debug, Clone, PartialEq)]
pub struct UNet {
    pub config: GeneratorConfig,
    pub params: ModelParams,
}

impl UNet {
    pub fn new<R: Rng + ?Sized>(config: GeneratorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let GeneratorConfig { in_channels, out_channels, base_channels: base, depth, .. } = config;
        let ch = |l| level_channels(base, l);
        let mut params = ModelParams::new();
        for i in 0..depth {
            let cin = if i == 0 { in_channels } else { ch(i - 1) };
            push_conv(&mut params, i, cin, ch(i), 4, false, rng);
            if i > 0 && i < depth - 1 {
                push_norm(&mut params, i, ch(i), rng);
            }
        }
        for level in (0..depth).rev() {
            let block = 2 * depth - 1 - level;
            let cin = if level == depth - 1 { ch(level) } else { 2 * ch(level) };
            if level == 0 {
                push_conv(&mut params, block, cin, out_channels, 4, true, rng);
            } else {
                push_conv(&mut params, block, cin, ch(level - 1), 4, true, rng);
                push_norm(&mut params, block, ch(level - 1), rng);
            }
        }
        Ok(Self { config, params })
    }

    /// Adds the forward pass to `g`. `dropout` supplies randomness in
    /// training mode; `None` runs in evaluation mode.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &Bound,
        x: Var,
        mut dropout: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let [_, c, h, w] = g.value(x).dims4("unet")?;
        if c != cfg.in_channels || h != cfg.image_size || w != cfg.image_size {
            return Err(TensorError::ShapeMismatch {
                op: "unet",
                detail: format!(
                    "expected (N, {}, {s}, {s}), got {:?}",
                    cfg.in_channels,
                    g.value(x).shape(),
                    s = cfg.image_size
                ),
            }
            .into());
        }
        let depth = cfg.depth;
        let mut skips = Vec::with_capacity(depth);
        let mut h = x;
        for i in 0..depth {
            let input = if i == 0 { h } else { g.leaky_relu(h, LEAKY_SLOPE)? };
            h = conv_block(&self.params, bound, g, i, input, 2, false)?;
            skips.push(h);
        }
        for level in (0..depth).rev() {
            let block = 2 * depth - 1 - level;
            let a = g.relu(h)?;
            let mut u = conv_block(&self.params, bound, g, block, a, 2, true)?;
            if level == 0 {
                return Ok(g.tanh(u)?);
            }
            if depth - 1 - level < DROPOUT_BLOCKS {
                if let Some(rng) = dropout.as_deref_mut() {
                    u = g.dropout(u, DROPOUT_P, true, rng)?;
                }
            }
            h = g.concat_channels(skips[level - 1], u)?;
        }
        unreachable!("depth >= 1 always reaches level 0")
    }

    /// Evaluation-mode forward pass without gradient tracking.
    pub fn generate(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let x = g.constant(image.clone());
        let y = self.forward(&mut g, &bound, x, None)?;
        Ok(g.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_image(c: usize, size: usize, seed: u64) -> Tensor {
        let mut r = rng(seed);
        let data = (0..c * size * size).map(|_| r.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![1, c, size, size], data).unwrap()
    }

    #[test]
    fn desk_forward_shape_and_range() {
        let net = UNet::new(GeneratorConfig::desk(1, 1), &mut rng(0)).unwrap();
        let y = net.generate(&random_image(1, 32, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 32, 32]);
        assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn parameter_count_depth1() {
        let cfg = GeneratorConfig { in_channels: 1, out_channels: 1, base_channels: 2, depth: 1, image_size: 8 };
        let net = UNet::new(cfg, &mut rng(0)).unwrap();
        // conv 1->2 (k4) with bias, then transposed conv 2->1 with bias.
        let expected = (2 * 16 + 2) + (2 * 16 + 1);
        assert_eq!(net.params.numel(), expected);
        assert_eq!(
            net.params.names().collect::<Vec<_>>(),
            ["block0.conv.weight", "block0.conv.bias", "block1.conv.weight", "block1.conv.bias"]
        );
    }

    #[test]
    fn invalid_configs() {
        let base = GeneratorConfig::desk(1, 1);
        for cfg in [
            GeneratorConfig { depth: 0, ..base },
            GeneratorConfig { base_channels: 0, ..base },
            GeneratorConfig { image_size: 24, ..base },
            GeneratorConfig { depth: 6, ..base },
        ] {
            assert!(matches!(UNet::new(cfg, &mut rng(0)), Err(ModelError::InvalidConfig(_))));
        }
        let at_limit = GeneratorConfig { depth: 5, ..base };
        let net = UNet::new(at_limit, &mut rng(0)).unwrap();
        assert_eq!(net.generate(&random_image(1, 32, 2)).unwrap().shape(), &[1, 1, 32, 32]);
    }

    #[test]
    fn wrong_input_size_rejected() {
        let net = UNet::new(GeneratorConfig::desk(1, 1), &mut rng(0)).unwrap();
        assert!(net.generate(&random_image(1, 16, 0)).is_err());
        assert!(net.generate(&random_image(3, 32, 0)).is_err());
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let net = UNet::new(GeneratorConfig::desk(1, 1), &mut rng(5)).unwrap();
        let x = random_image(1, 32, 9);
        assert_eq!(net.generate(&x).unwrap(), net.generate(&x).unwrap());
    }

    #[test]
    fn training_mode_uses_dropout() {
        let net = UNet::new(GeneratorConfig::desk(1, 1), &mut rng(5)).unwrap();
        let x = random_image(1, 32, 9);
        let run = |seed| {
            let mut g = Graph::new();
            let bound = net.params.bind(&mut g, false);
            let xv = g.constant(x.clone());
            let mut r = rng(seed);
            let y = net.forward(&mut g, &bound, xv, Some(&mut r)).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
        assert_ne!(run(1), net.generate(&x).unwrap());
    }
}
