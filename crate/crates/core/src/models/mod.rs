//! The U-Net generator and the patch discriminator.

mod discriminator;
mod unet;

pub use discriminator::{Discriminator, DiscriminatorConfig};
pub use unet::{GeneratorConfig, UNet};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::{Gradients, Graph, Tensor, TensorError, Var};

/// Standard deviation of the normal weight initializer.
pub const INIT_STD: f32 = 0.02;
pub const LEAKY_SLOPE: f32 = 0.2;
pub const NORM_EPS: f32 = 1e-5;
pub const DROPOUT_P: f32 = 0.5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("unknown parameter {0:?}")]
    MissingParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Named, ordered learnable tensors of one network.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    entries: Vec<(String, Tensor)>,
}

/// Graph handles for every entry of a [`ModelParams`], in entry order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter; panics on a duplicate name.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        self.entries.push((name, tensor.with_grad()));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.entries[i].1)
    }

    /// Registers every tensor as a graph leaf. With `trainable == false` the
    /// leaves are constants and no gradient is tracked for them.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| {
                let mut t = t.clone();
                t.grad = None;
                if trainable {
                    g.leaf(t.with_grad())
                } else {
                    g.constant(t)
                }
            })
            .collect();
        Bound { vars }
    }

    fn var(&self, bound: &Bound, name: &str) -> Result<Var> {
        self.index_of(name)
            .map(|i| bound.vars[i])
            .ok_or_else(|| ModelError::MissingParam(name.to_owned()))
    }

    /// Adds the gradients of `bound` into each tensor's `grad`. Parameters the
    /// loss does not reach receive zeros.
    pub fn accumulate_grads(&mut self, bound: &Bound, grads: &Gradients) {
        for ((_, t), &v) in self.entries.iter_mut().zip(&bound.vars) {
            t.accumulate_grad(&grads.get_or_zeros(v));
        }
    }

    pub fn zero_grads(&mut self) {
        self.entries.iter_mut().for_each(|(_, t)| t.zero_grad());
    }
}

fn normal_tensor<R: Rng + ?Sized>(shape: &[usize], mean: f32, rng: &mut R) -> Tensor {
    let dist = Normal::new(mean, INIT_STD).expect("valid std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// `block{i}.conv.{weight,bias}` for a regular (`[out, in, k, k]`) or
/// transposed (`[in, out, k, k]`) convolution.
fn push_conv<R: Rng + ?Sized>(
    p: &mut ModelParams,
    block: usize,
    cin: usize,
    cout: usize,
    k: usize,
    transposed: bool,
    rng: &mut R,
) {
    let shape = if transposed { [cin, cout, k, k] } else { [cout, cin, k, k] };
    p.push(format!("block{block}.conv.weight"), normal_tensor(&shape, 0.0, rng));
    p.push(format!("block{block}.conv.bias"), Tensor::zeros(&[cout]));
}

fn push_norm<R: Rng + ?Sized>(p: &mut ModelParams, block: usize, c: usize, rng: &mut R) {
    p.push(format!("block{block}.norm.weight"), normal_tensor(&[c], 1.0, rng));
    p.push(format!("block{block}.norm.bias"), Tensor::zeros(&[c]));
}

/// Applies `block{i}.conv` and, when present, `block{i}.norm`.
fn conv_block(
    params: &ModelParams,
    bound: &Bound,
    g: &mut Graph,
    block: usize,
    x: Var,
    stride: usize,
    transposed: bool,
) -> Result<Var> {
    let w = params.var(bound, &format!("block{block}.conv.weight"))?;
    let b = params.var(bound, &format!("block{block}.conv.bias"))?;
    let y = if transposed {
        g.conv_transpose2d(x, w, b, stride, 1)?
    } else {
        g.conv2d(x, w, b, stride, 1)?
    };
    let scale_name = format!("block{block}.norm.weight");
    if params.index_of(&scale_name).is_some() {
        let scale = params.var(bound, &scale_name)?;
        let shift = params.var(bound, &format!("block{block}.norm.bias"))?;
        Ok(g.instance_norm(y, scale, shift, NORM_EPS)?)
    } else {
        Ok(y)
    }
}

/// Feature width at depth `level`: `base * 2^level`, capped at `8 * base`.
pub fn level_channels(base: usize, level: usize) -> usize {
    (base << level.min(3)).min(8 * base)
}
