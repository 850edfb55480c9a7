//! Gradient-check cases: every differentiable graph op plus both networks in
//! a tiny configuration.

use maskgan::models::{Discriminator, DiscriminatorConfig, GeneratorConfig, UNet, LEAKY_SLOPE, NORM_EPS};
use maskgan::{Graph, Tensor, Var};

use super::{gradcheck, gradcheck_op, randn, rng, uniform, FdOptions, FdReport};

pub const SEEDS: u64 = 20;

pub type Case = (&'static str, fn(u64) -> FdReport);

pub fn all() -> Vec<Case> {
    vec![
        ("conv2d", conv2d),
        ("conv2d_strided", conv2d_strided),
        ("conv_transpose2d", conv_transpose2d),
        ("instance_norm", instance_norm),
        ("relu", relu),
        ("leaky_relu", leaky_relu),
        ("tanh", tanh),
        ("sigmoid", sigmoid),
        ("concat_channels", concat_channels),
        ("bce_with_logits", bce_with_logits),
        ("l1", l1),
        ("mse", mse),
        ("dropout", dropout),
        ("add", add),
        ("scale", scale),
        ("mean", mean),
        ("unet", unet),
        ("discriminator", discriminator),
    ]
}

fn opts() -> FdOptions {
    FdOptions::default()
}

fn conv2d(seed: u64) -> FdReport {
    let r = &mut rng(seed);
    let inputs = vec![randn(&[2, 2, 5, 5], 1.0, r), randn(&[3, 2, 3, 3], 0.5, r), randn(&[3], 0.5, r)];
    gradcheck_op(inputs, |g, v| g.conv2d(v[0], v[1], v[2], 1, 1).unwrap(), opts(), seed)
}

fn conv2d_strided(seed: u64) -> FdReport {
    let r = &mut rng(seed);
    let inputs = vec![randn(&[1, 2, 6, 6], 1.0, r), randn(&[2, 2, 4, 4], 0.5, r), randn(&[2], 0.5, r)];
    gradcheck_op(inputs, |g, v| g.conv2d(v[0], v[1], v[2], 2, 1).unwrap(), opts(), seed)
}

fn conv_transpose2d(seed: u64) -> FdReport {
    let r = &mut rng(seed);
    let inputs = vec![randn(&[2, 2, 3, 3], 1.0, r), randn(&[2, 3, 4, 4], 0.5, r), randn(&[3], 0.5, r)];
    gradcheck_op(inputs, |g, v| g.conv_transpose2d(v[0], v[1], v[2], 2, 1).unwrap(), opts(), seed)
}

fn instance_norm(seed: u64) -> FdReport {
    let r = &mut rng(seed);
    let inputs = vec![randn(&[2, 3, 4, 4], 1.0, r), randn(&[3], 1.0, r), randn(&[3], 1.0, r)];
    gradcheck_op(inputs, |g, v| g.instance_norm(v[0], v[1], v[2], NORM_EPS).unwrap(), opts(), seed)
}

fn unary(seed: u64, f: fn(&mut Graph, Var) -> Var) -> FdReport {
    let inputs = vec![randn(&[1, 2, 4, 4], 1.5, &mut rng(seed))];
    gradcheck_op(inputs, move |g, v| f(g, v[0]), opts(), seed)
}

fn relu(seed: u64) -> FdReport {
    unary(seed, |g, x| g.relu(x).unwrap())
}

fn leaky_relu(seed: u64) -> FdReport {
    unary(seed, |g, x| g.leaky_relu(x, LEAKY_SLOPE).unwrap())
}

fn tanh(seed: u64) -> FdReport {
    unary(seed, |g, x| g.tanh(x).unwrap())
}

fn sigmoid(seed: u64) -> FdReport {
    unary(seed, |g, x| g.sigmoid(x).unwrap())
}

fn concat_channels(seed: u64) -> FdReport {
    let r = &mut rng(seed);
    let inputs = vec![randn(&[2, 2, 3, 3], 1.0, r), randn(&[2, 1, 3, 3], 1.0, r)];
    gradcheck_op(inputs, |g, v| g.concat_channels(v[0], v[1]).unwrap(), opts(), seed)
}

fn bce_with_logits(seed: u64) -> FdReport {
    let r = &mut rng(seed);
    let inputs = vec![randn(&[1, 1, 4, 4], 3.0, r), uniform(&[1, 1, 4, 4], 0.05, 0.95, r)];
    gradcheck_op(inputs, |g, v| g.bce_with_logits(v[0], v[1]).unwrap(), opts(), seed)
}

fn l1(seed: u64) -> FdReport {
    let r = &mut rng(seed);
    let inputs = vec![randn(&[1, 2, 3, 3], 1.0, r), randn(&[1, 2, 3, 3], 1.0, r)];
    gradcheck_op(inputs, |g, v| g.l1(v[0], v[1]).unwrap(), opts(), seed)
}

fn mse(seed: u64) -> FdReport {
    let r = &mut rng(seed);
    let inputs = vec![randn(&[1, 2, 3, 3], 1.0, r), randn(&[1, 2, 3, 3], 1.0, r)];
    gradcheck_op(inputs, |g, v| g.mse(v[0], v[1]).unwrap(), opts(), seed)
}

fn dropout(seed: u64) -> FdReport {
    let inputs = vec![randn(&[1, 2, 4, 4], 1.0, &mut rng(seed))];
    // Same stream every evaluation, so the mask is fixed across perturbations.
    gradcheck_op(
        inputs,
        move |g, v| g.dropout(v[0], 0.5, true, &mut rng(seed + 1000)).unwrap(),
        opts(),
        seed,
    )
}

fn add(seed: u64) -> FdReport {
    let r = &mut rng(seed);
    let inputs = vec![randn(&[1, 2, 3, 3], 1.0, r), randn(&[1, 2, 3, 3], 1.0, r)];
    gradcheck_op(inputs, |g, v| g.add(v[0], v[1]).unwrap(), opts(), seed)
}

fn scale(seed: u64) -> FdReport {
    let inputs = vec![randn(&[1, 2, 3, 3], 1.0, &mut rng(seed))];
    gradcheck_op(inputs, |g, v| g.scale(v[0], -2.5).unwrap(), opts(), seed)
}

fn mean(seed: u64) -> FdReport {
    let inputs = vec![randn(&[2, 2, 3, 3], 1.0, &mut rng(seed))];
    gradcheck_op(inputs, |g, v| g.mean(v[0]).unwrap(), opts(), seed)
}

/// Depth-1, base-2 generator on 8x8 inputs, evaluation mode, all parameters
/// and the input perturbed.
fn unet(seed: u64) -> FdReport {
    let r = &mut rng(seed);
    let cfg = GeneratorConfig { in_channels: 1, out_channels: 1, base_channels: 2, depth: 1, image_size: 8 };
    let mut model = UNet::new(cfg, r).unwrap();
    // Larger weights than the 0.02 init so the check is not dominated by tiny gradients.
    for (_, t) in model.params.iter_mut() {
        *t = randn(t.shape(), 0.5, r);
    }
    let x = randn(&[1, 1, 8, 8], 1.0, r);
    let mut state = (model, x);
    let forward = |s: &(UNet, Tensor), g: &mut Graph, grad: bool| {
        let bound = s.0.params.bind(g, grad);
        let x = if grad { g.leaf(s.1.clone().with_grad()) } else { g.constant(s.1.clone()) };
        let y = s.0.forward(g, &bound, x, None).unwrap();
        let mut vars = bound.vars().to_vec();
        vars.push(x);
        (vars, y)
    };
    gradcheck(&mut state, model_slots::<UNet>, &forward, opts(), seed)
}

/// One stride-2 layer, base 2, on a 2-channel 8x8 input (image + mask).
fn discriminator(seed: u64) -> FdReport {
    let r = &mut rng(seed);
    let cfg = DiscriminatorConfig { in_channels: 2, base_channels: 2, n_stride2_layers: 1 };
    let mut model = Discriminator::new(cfg, r).unwrap();
    for (_, t) in model.params.iter_mut() {
        *t = randn(t.shape(), 0.5, r);
    }
    let x = randn(&[1, 2, 8, 8], 1.0, r);
    let mut state = (model, x);
    let forward = |s: &(Discriminator, Tensor), g: &mut Graph, grad: bool| {
        let bound = s.0.params.bind(g, grad);
        let x = if grad { g.leaf(s.1.clone().with_grad()) } else { g.constant(s.1.clone()) };
        let y = s.0.forward(g, &bound, x).unwrap();
        let mut vars = bound.vars().to_vec();
        vars.push(x);
        (vars, y)
    };
    gradcheck(&mut state, model_slots::<Discriminator>, &forward, opts(), seed)
}

pub trait HasParams {
    fn params_mut(&mut self) -> Vec<&mut Tensor>;
}

impl HasParams for UNet {
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.iter_mut().map(|(_, t)| t).collect()
    }
}

impl HasParams for Discriminator {
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.iter_mut().map(|(_, t)| t).collect()
    }
}

fn model_slots<M: HasParams>(s: &mut (M, Tensor)) -> Vec<&mut Tensor> {
    let mut v = s.0.params_mut();
    v.push(&mut s.1);
    v
}

/// Runs `case` over all seeds and merges the reports.
pub fn run(case: fn(u64) -> FdReport) -> FdReport {
    let mut total = FdReport::default();
    for seed in 0..SEEDS {
        total.merge(case(seed));
    }
    total
}

/// Kink skips are tolerated only for a small fraction of elements.
pub fn acceptable(r: &FdReport) -> bool {
    r.ok() && r.skipped * 20 <= r.checked
}
