//! Single optimization steps for both adversarial objectives.

use rand::RngCore;

use super::{adam_step, CganNets, CycleNets, Result, TrainConfig};
use crate::models::{Discriminator, UNet};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CganLosses {
    pub d_loss: f32,
    /// `g_adv + lambda_l1 * g_l1`.
    pub g_loss: f32,
    pub g_adv: f32,
    pub g_l1: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CycleLosses {
    /// Generator-side adversarial term against `disc_b`.
    pub g_adv_ab: f32,
    /// Generator-side adversarial term against `disc_a`.
    pub g_adv_ba: f32,
    pub d_a: f32,
    pub d_b: f32,
    /// `l1(gen_ba(gen_ab(a)), a)`.
    pub cycle_a: f32,
    /// `l1(gen_ab(gen_ba(b)), b)`.
    pub cycle_b: f32,
    pub g_loss: f32,
    pub d_loss: f32,
}

fn target_like(g: &mut Graph, v: Var, value: f32) -> Var {
    let t = Tensor::full(g.value(v).shape(), value);
    g.constant(t)
}

/// `bce(D(x), target)` for a discriminator already bound into `g`.
fn adversarial(
    g: &mut Graph,
    d: &Discriminator,
    bound: &crate::models::Bound,
    x: Var,
    real: bool,
) -> Result<Var> {
    let logits = d.forward(g, bound, x)?;
    let target = target_like(g, logits, if real { 1.0 } else { 0.0 });
    Ok(g.bce_with_logits(logits, target)?)
}

/// Half the real/fake BCE sum for one discriminator.
fn discriminator_loss(
    g: &mut Graph,
    d: &Discriminator,
    bound: &crate::models::Bound,
    real: Var,
    fake: Var,
) -> Result<Var> {
    let l_real = adversarial(g, d, bound, real, true)?;
    let l_fake = adversarial(g, d, bound, fake, false)?;
    let sum = g.add(l_real, l_fake)?;
    Ok(g.scale(sum, 0.5)?)
}

/// One conditional-GAN step: a discriminator update on `(image, mask)` vs
/// `(image, G(image))` with the fake detached, then a generator update on
/// the adversarial term plus `lambda_l1` times the L1 distance to the mask.
pub fn cgan_step(
    nets: &mut CganNets,
    image: &Tensor,
    mask: &Tensor,
    cfg: &TrainConfig,
    dropout: &mut dyn RngCore,
) -> Result<CganLosses> {
    let adam = cfg.adam();
    let mut g = Graph::new();
    let gen_bound = nets.gen.model.params.bind(&mut g, true);
    let x = g.constant(image.clone());
    let y = g.constant(mask.clone());
    let fake = nets.gen.model.forward(&mut g, &gen_bound, x, Some(dropout))?;

    let disc = &nets.disc.model;
    let d_bound = disc.params.bind(&mut g, true);
    let real_pair = g.concat_channels(x, y)?;
    let fake_detached = g.detach(fake);
    let fake_pair = g.concat_channels(x, fake_detached)?;
    let d_loss = discriminator_loss(&mut g, disc, &d_bound, real_pair, fake_pair)?;
    let grads = g.backward(d_loss)?;
    nets.disc.model.params.accumulate_grads(&d_bound, &grads);
    adam_step(&mut nets.disc.model.params, &mut nets.disc.opt, &adam)?;

    // Generator sees the freshly updated discriminator, frozen.
    let disc = &nets.disc.model;
    let d_frozen = disc.params.bind(&mut g, false);
    let fake_pair = g.concat_channels(x, fake)?;
    let g_adv = adversarial(&mut g, disc, &d_frozen, fake_pair, true)?;
    let g_l1 = g.l1(fake, y)?;
    let weighted = g.scale(g_l1, cfg.lambda_l1)?;
    let g_loss = g.add(g_adv, weighted)?;
    let grads = g.backward(g_loss)?;
    nets.gen.model.params.accumulate_grads(&gen_bound, &grads);
    adam_step(&mut nets.gen.model.params, &mut nets.gen.opt, &adam)?;

    Ok(CganLosses {
        d_loss: g.value(d_loss).item(),
        g_loss: g.value(g_loss).item(),
        g_adv: g.value(g_adv).item(),
        g_l1: g.value(g_l1).item(),
    })
}

/// Generator half of a CycleGAN step: accumulates gradients of the
/// adversarial and cycle terms into both generators without stepping them.
/// Returns the losses (discriminator fields zero) and the fakes
/// `(gen_ba(b), gen_ab(a))` as plain tensors for the discriminator half.
pub fn cyclegan_generator_pass(
    nets: &mut CycleNets,
    a: &Tensor,
    b: &Tensor,
    lambda_cycle: f32,
    dropout: &mut dyn RngCore,
) -> Result<(CycleLosses, Tensor, Tensor)> {
    let mut g = Graph::new();
    let (gab, gba): (&UNet, &UNet) = (&nets.gen_ab.model, &nets.gen_ba.model);
    let ab_bound = gab.params.bind(&mut g, true);
    let ba_bound = gba.params.bind(&mut g, true);
    let da_bound = nets.disc_a.model.params.bind(&mut g, false);
    let db_bound = nets.disc_b.model.params.bind(&mut g, false);
    let av = g.constant(a.clone());
    let bv = g.constant(b.clone());

    let fake_b = gab.forward(&mut g, &ab_bound, av, Some(&mut *dropout))?;
    let fake_a = gba.forward(&mut g, &ba_bound, bv, Some(&mut *dropout))?;
    let g_adv_ab = adversarial(&mut g, &nets.disc_b.model, &db_bound, fake_b, true)?;
    let g_adv_ba = adversarial(&mut g, &nets.disc_a.model, &da_bound, fake_a, true)?;
    let mut g_loss = g.add(g_adv_ab, g_adv_ba)?;

    let mut losses = CycleLosses {
        g_adv_ab: g.value(g_adv_ab).item(),
        g_adv_ba: g.value(g_adv_ba).item(),
        ..CycleLosses::default()
    };
    // The reconstructions are needed for the reported cycle terms either way;
    // they only join the objective when the weight is positive.
    let rec_a = gba.forward(&mut g, &ba_bound, fake_b, Some(&mut *dropout))?;
    let rec_b = gab.forward(&mut g, &ab_bound, fake_a, Some(&mut *dropout))?;
    let cycle_a = g.l1(rec_a, av)?;
    let cycle_b = g.l1(rec_b, bv)?;
    losses.cycle_a = g.value(cycle_a).item();
    losses.cycle_b = g.value(cycle_b).item();
    if lambda_cycle > 0.0 {
        let cycle = g.add(cycle_a, cycle_b)?;
        let weighted = g.scale(cycle, lambda_cycle)?;
        g_loss = g.add(g_loss, weighted)?;
    }
    losses.g_loss = g.value(g_loss).item();

    let grads = g.backward(g_loss)?;
    nets.gen_ab.model.params.accumulate_grads(&ab_bound, &grads);
    nets.gen_ba.model.params.accumulate_grads(&ba_bound, &grads);
    Ok((losses, g.value(fake_a).clone(), g.value(fake_b).clone()))
}

/// Discriminator half of a CycleGAN step: accumulates real-vs-fake gradients
/// into both discriminators. Returns `(d_a, d_b)`.
pub fn cyclegan_discriminator_pass(
    nets: &mut CycleNets,
    a: &Tensor,
    b: &Tensor,
    fake_a: &Tensor,
    fake_b: &Tensor,
) -> Result<(f32, f32)> {
    let mut g = Graph::new();
    let da_bound = nets.disc_a.model.params.bind(&mut g, true);
    let db_bound = nets.disc_b.model.params.bind(&mut g, true);
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let (fa, fb) = (g.constant(fake_a.clone()), g.constant(fake_b.clone()));
    let d_a = discriminator_loss(&mut g, &nets.disc_a.model, &da_bound, av, fa)?;
    let d_b = discriminator_loss(&mut g, &nets.disc_b.model, &db_bound, bv, fb)?;
    let total = g.add(d_a, d_b)?;
    let grads = g.backward(total)?;
    nets.disc_a.model.params.accumulate_grads(&da_bound, &grads);
    nets.disc_b.model.params.accumulate_grads(&db_bound, &grads);
    Ok((g.value(d_a).item(), g.value(d_b).item()))
}

/// One CycleGAN step: both generators are updated against frozen
/// discriminators, then both discriminators on the detached fakes.
pub fn cyclegan_step(
    nets: &mut CycleNets,
    a: &Tensor,
    b: &Tensor,
    cfg: &TrainConfig,
    dropout: &mut dyn RngCore,
) -> Result<CycleLosses> {
    let adam = cfg.adam();
    let (mut losses, fake_a, fake_b) =
        cyclegan_generator_pass(nets, a, b, cfg.lambda_cycle, dropout)?;
    adam_step(&mut nets.gen_ab.model.params, &mut nets.gen_ab.opt, &adam)?;
    adam_step(&mut nets.gen_ba.model.params, &mut nets.gen_ba.opt, &adam)?;

    let (d_a, d_b) = cyclegan_discriminator_pass(nets, a, b, &fake_a, &fake_b)?;
    adam_step(&mut nets.disc_a.model.params, &mut nets.disc_a.opt, &adam)?;
    adam_step(&mut nets.disc_b.model.params, &mut nets.disc_b.opt, &adam)?;
    losses.d_a = d_a;
    losses.d_b = d_b;
    losses.d_loss = d_a + d_b;
    Ok(losses)
}
