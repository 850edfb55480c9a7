//! Adversarial training: the conditional (paired) and cycle-consistent
//! (unpaired) objectives, the epoch loop, loss history, and checkpoints.

mod adam;
mod checkpoint;
mod steps;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, Direction};
pub use steps::{
    cgan_step, cyclegan_discriminator_pass, cyclegan_generator_pass, cyclegan_step, CganLosses,
    CycleLosses,
};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{PairedDataset, SplitSpec, UnpairedDataset};
use crate::models::{Discriminator, DiscriminatorConfig, GeneratorConfig, ModelError, ModelParams, UNet};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite {term} loss in epoch {epoch}")]
    NonFinite { epoch: usize, term: &'static str },
    #[error("optimizer: {0}")]
    Optimizer(String),
    #[error("task mismatch: expected {expected}, got {found}")]
    TaskMismatch { expected: Task, found: Task },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Cgan,
    Cyclegan,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Cgan => "cgan",
            Task::Cyclegan => "cyclegan",
        })
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cgan" => Ok(Task::Cgan),
            "cyclegan" => Ok(Task::Cyclegan),
            _ => Err(format!("unknown task {s:?} (valid: cgan, cyclegan)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: Task,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_eps: f32,
    /// Weight of the L1 reconstruction term (conditional GAN).
    pub lambda_l1: f32,
    /// Weight of the cycle-consistency term (CycleGAN).
    pub lambda_cycle: f32,
    pub seed: u64,
    pub image_size: usize,
    pub image_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub disc_base_channels: usize,
    pub disc_layers: usize,
    /// Write an intermediate checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// How the training set was carved out of the source dataset.
    pub split: Option<SplitSpec>,
}

impl TrainConfig {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            epochs: 100,
            batch_size: 1,
            learning_rate: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            lambda_l1: 100.0,
            lambda_cycle: 10.0,
            seed: 0,
            image_size: 32,
            image_channels: 1,
            base_channels: 8,
            depth: 3,
            disc_base_channels: 8,
            disc_layers: 2,
            checkpoint_every: 25,
            split: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_owned()));
        if self.epochs < 1 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        for b in [self.adam_beta1, self.adam_beta2] {
            if !(b > 0.0 && b < 1.0) {
                return bad("adam betas must lie in (0, 1)");
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if !(self.lambda_l1 >= 0.0 && self.lambda_cycle >= 0.0) {
            return bad("loss weights must be >= 0");
        }
        if !matches!(self.image_channels, 1 | 3) {
            return bad("image_channels must be 1 or 3");
        }
        self.generator_config(self.image_channels, 1).validate()?;
        self.discriminator_config(1).validate()?;
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn generator_config(&self, in_channels: usize, out_channels: usize) -> GeneratorConfig {
        GeneratorConfig {
            in_channels,
            out_channels,
            base_channels: self.base_channels,
            depth: self.depth,
            image_size: self.image_size,
        }
    }

    pub fn discriminator_config(&self, in_channels: usize) -> DiscriminatorConfig {
        DiscriminatorConfig {
            in_channels,
            base_channels: self.disc_base_channels,
            n_stride2_layers: self.disc_layers,
        }
    }
}

/// A model together with its optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Net<M> {
    pub model: M,
    pub opt: AdamState,
}

impl Net<UNet> {
    fn generator(cfg: GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let model = UNet::new(cfg, rng)?;
        let opt = AdamState::new(&model.params);
        Ok(Self { model, opt })
    }
}

impl Net<Discriminator> {
    fn discriminator(cfg: DiscriminatorConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let model = Discriminator::new(cfg, rng)?;
        let opt = AdamState::new(&model.params);
        Ok(Self { model, opt })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CganNets {
    pub gen: Net<UNet>,
    pub disc: Net<Discriminator>,
}

/// `gen_ab` maps images (domain A) to masks (domain B); `gen_ba` the reverse.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleNets {
    pub gen_ab: Net<UNet>,
    pub gen_ba: Net<UNet>,
    pub disc_a: Net<Discriminator>,
    pub disc_b: Net<Discriminator>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Nets {
    Cgan(CganNets),
    Cyclegan(CycleNets),
}

/// Random streams carved out of one run seed.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
enum Stream {
    Init = 1,
    Shuffle = 2,
    Dropout = 3,
}

fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

impl Nets {
    /// Freshly initialized networks for `cfg.task`.
    pub fn build(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream_rng(cfg.seed, Stream::Init);
        let c = cfg.image_channels;
        Ok(match cfg.task {
            Task::Cgan => Nets::Cgan(CganNets {
                gen: Net::generator(cfg.generator_config(c, 1), &mut rng)?,
                disc: Net::discriminator(cfg.discriminator_config(c + 1), &mut rng)?,
            }),
            Task::Cyclegan => Nets::Cyclegan(CycleNets {
                gen_ab: Net::generator(cfg.generator_config(c, 1), &mut rng)?,
                gen_ba: Net::generator(cfg.generator_config(1, c), &mut rng)?,
                disc_a: Net::discriminator(cfg.discriminator_config(c), &mut rng)?,
                disc_b: Net::discriminator(cfg.discriminator_config(1), &mut rng)?,
            }),
        })
    }

    pub fn task(&self) -> Task {
        match self {
            Nets::Cgan(_) => Task::Cgan,
            Nets::Cyclegan(_) => Task::Cyclegan,
        }
    }

    /// `(role, params, optimizer)` for every network, in serialization order.
    pub fn parts(&self) -> Vec<(&'static str, &ModelParams, &AdamState)> {
        match self {
            Nets::Cgan(n) => vec![
                ("gen", &n.gen.model.params, &n.gen.opt),
                ("disc", &n.disc.model.params, &n.disc.opt),
            ],
            Nets::Cyclegan(n) => vec![
                ("gen_ab", &n.gen_ab.model.params, &n.gen_ab.opt),
                ("gen_ba", &n.gen_ba.model.params, &n.gen_ba.opt),
                ("disc_a", &n.disc_a.model.params, &n.disc_a.opt),
                ("disc_b", &n.disc_b.model.params, &n.disc_b.opt),
            ],
        }
    }

    pub(crate) fn parts_mut(&mut self) -> Vec<(&'static str, &mut ModelParams, &mut AdamState)> {
        match self {
            Nets::Cgan(n) => vec![
                ("gen", &mut n.gen.model.params, &mut n.gen.opt),
                ("disc", &mut n.disc.model.params, &mut n.disc.opt),
            ],
            Nets::Cyclegan(n) => vec![
                ("gen_ab", &mut n.gen_ab.model.params, &mut n.gen_ab.opt),
                ("gen_ba", &mut n.gen_ba.model.params, &mut n.gen_ba.opt),
                ("disc_a", &mut n.disc_a.model.params, &mut n.disc_a.opt),
                ("disc_b", &mut n.disc_b.model.params, &mut n.disc_b.opt),
            ],
        }
    }
}

/// Mean losses over one epoch. Terms that do not apply to the task are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub g_loss: f32,
    pub d_loss: f32,
    pub g_adv: f32,
    pub g_l1: Option<f32>,
    pub g_cycle: Option<f32>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossHistory {
    pub records: Vec<EpochRecord>,
}

pub const CSV_HEADER: &str = "epoch,g_loss,d_loss,g_adv,g_l1,g_cycle";

/// Population standard deviation of the losses over a trailing window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stability {
    pub window: usize,
    pub g_loss_std: f64,
    pub d_loss_std: f64,
}

impl LossHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f32>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch,
                r.g_loss,
                r.d_loss,
                r.g_adv,
                opt(r.g_l1),
                opt(r.g_cycle)
            ));
        }
        out
    }

    /// Spread of the generator and discriminator losses over the last
    /// `window` epochs (fewer if the history is shorter).
    pub fn stability(&self, window: usize) -> Option<Stability> {
        let n = window.min(self.records.len());
        if n == 0 {
            return None;
        }
        let tail = &self.records[self.records.len() - n..];
        let std = |f: fn(&EpochRecord) -> f32| {
            let mean = tail.iter().map(|r| f(r) as f64).sum::<f64>() / n as f64;
            (tail.iter().map(|r| (f(r) as f64 - mean).powi(2)).sum::<f64>() / n as f64).sqrt()
        };
        Some(Stability { window: n, g_loss_std: std(|r| r.g_loss), d_loss_std: std(|r| r.d_loss) })
    }
}

#[derive(Debug, Clone, Copy)]
pub enum TrainData<'a> {
    Paired(&'a PairedDataset),
    Unpaired(&'a UnpairedDataset),
}

#[derive(Default)]
struct Accum {
    n: usize,
    g_loss: f64,
    d_loss: f64,
    g_adv: f64,
    g_l1: f64,
    g_cycle: f64,
}

impl Accum {
    fn record(&self, epoch: usize, task: Task) -> EpochRecord {
        let m = |v: f64| (v / self.n as f64) as f32;
        EpochRecord {
            epoch,
            g_loss: m(self.g_loss),
            d_loss: m(self.d_loss),
            g_adv: m(self.g_adv),
            g_l1: (task == Task::Cgan).then(|| m(self.g_l1)),
            g_cycle: (task == Task::Cyclegan).then(|| m(self.g_cycle)),
        }
    }
}

fn check_finite(epoch: usize, terms: &[(&'static str, f32)]) -> Result<()> {
    match terms.iter().find(|(_, v)| !v.is_finite()) {
        Some(&(term, _)) => Err(TrainError::NonFinite { epoch, term }),
        None => Ok(()),
    }
}

/// Runs the full training loop. See [`train_with_progress`].
pub fn train(cfg: &TrainConfig, data: TrainData<'_>, out_dir: Option<&Path>) -> Result<Checkpoint> {
    train_with_progress(cfg, data, out_dir, |_| {})
}

/// Trains for `cfg.epochs` epochs, visiting the samples in a fresh seeded
/// order each epoch. With `out_dir` set, writes `checkpoint.mgan` at the end
/// and `checkpoint_epochNNNN.mgan` every `cfg.checkpoint_every` epochs.
pub fn train_with_progress(
    cfg: &TrainConfig,
    data: TrainData<'_>,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Checkpoint> {
    cfg.validate()?;
    let n_samples = match data {
        TrainData::Paired(ds) => ds.len(),
        TrainData::Unpaired(ds) => {
            if ds.domain_b.is_empty() {
                0
            } else {
                ds.domain_a.len()
            }
        }
    };
    if n_samples == 0 {
        return Err(TrainError::InvalidConfig("training set is empty".into()));
    }
    let mut nets = Nets::build(cfg)?;
    match (&data, cfg.task) {
        (TrainData::Paired(_), Task::Cgan) | (TrainData::Unpaired(_), Task::Cyclegan) => {}
        (TrainData::Paired(_), found) => {
            return Err(TrainError::TaskMismatch { expected: Task::Cgan, found })
        }
        (TrainData::Unpaired(_), found) => {
            return Err(TrainError::TaskMismatch { expected: Task::Cyclegan, found })
        }
    }
    let mut shuffle_rng = stream_rng(cfg.seed, Stream::Shuffle);
    let mut dropout_rng = stream_rng(cfg.seed, Stream::Dropout);
    let mut history = LossHistory::default();

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n_samples).collect();
        order.shuffle(&mut shuffle_rng);
        let mut acc = Accum::default();
        match (&mut nets, data) {
            (Nets::Cgan(nets), TrainData::Paired(ds)) => {
                for chunk in order.chunks(cfg.batch_size) {
                    let images: Vec<&Tensor> = chunk.iter().map(|&i| &ds.samples[i].image).collect();
                    let masks: Vec<&Tensor> = chunk.iter().map(|&i| &ds.samples[i].mask).collect();
                    let l = cgan_step(
                        nets,
                        &Tensor::stack_batch(&images)?,
                        &Tensor::stack_batch(&masks)?,
                        cfg,
                        &mut dropout_rng,
                    )?;
                    check_finite(
                        epoch,
                        &[("d_loss", l.d_loss), ("g_adv", l.g_adv), ("g_l1", l.g_l1), ("g_loss", l.g_loss)],
                    )?;
                    acc.n += 1;
                    acc.g_loss += l.g_loss as f64;
                    acc.d_loss += l.d_loss as f64;
                    acc.g_adv += l.g_adv as f64;
                    acc.g_l1 += l.g_l1 as f64;
                }
            }
            (Nets::Cyclegan(nets), TrainData::Unpaired(ds)) => {
                let mut order_b: Vec<usize> = (0..ds.domain_b.len()).collect();
                order_b.shuffle(&mut shuffle_rng);
                for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
                    let a: Vec<&Tensor> = chunk.iter().map(|&i| &ds.domain_a[i]).collect();
                    let b: Vec<&Tensor> = (0..chunk.len())
                        .map(|j| &ds.domain_b[order_b[(step * cfg.batch_size + j) % order_b.len()]])
                        .collect();
                    let l = cyclegan_step(
                        nets,
                        &Tensor::stack_batch(&a)?,
                        &Tensor::stack_batch(&b)?,
                        cfg,
                        &mut dropout_rng,
                    )?;
                    check_finite(
                        epoch,
                        &[
                            ("d_a", l.d_a),
                            ("d_b", l.d_b),
                            ("g_adv_ab", l.g_adv_ab),
                            ("g_adv_ba", l.g_adv_ba),
                            ("cycle_a", l.cycle_a),
                            ("cycle_b", l.cycle_b),
                            ("g_loss", l.g_loss),
                        ],
                    )?;
                    acc.n += 1;
                    acc.g_loss += l.g_loss as f64;
                    acc.d_loss += l.d_loss as f64;
                    acc.g_adv += (l.g_adv_ab + l.g_adv_ba) as f64;
                    acc.g_cycle += (l.cycle_a + l.cycle_b) as f64;
                }
            }
            _ => unreachable!("task/data pairing checked above"),
        }
        let record = acc.record(epoch, cfg.task);
        on_epoch(&record);
        history.records.push(record);

        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 && epoch < cfg.epochs {
                let ckpt = Checkpoint::new(cfg.clone(), nets.clone(), history.clone());
                save_checkpoint(&ckpt, &dir.join(format!("checkpoint_epoch{epoch:04}.mgan")))?;
            }
        }
    }
    let ckpt = Checkpoint::new(cfg.clone(), nets, history);
    if let Some(dir) = out_dir {
        save_checkpoint(&ckpt, &dir.join("checkpoint.mgan"))?;
    }
    Ok(ckpt)
}
