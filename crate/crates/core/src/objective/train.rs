use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{d_loss, g_loss, GanLoss};
use crate::data::SamplePair;
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::nn::{checkpoint, discriminator_forward, Network, NetworkConfig};
use crate::tensor::{Adam, AdamConfig, Tape, Tensor};

const STREAM_GENERATOR: u64 = 1;
const STREAM_DISCRIMINATOR: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_SHUFFLE: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight λ of the L1 term.
    pub lambda_l1: f32,
    pub batch_size: usize,
    /// Number of minibatch steps (one D update plus one G update each).
    pub max_iterations: usize,
    /// Record one loss row every this many iterations.
    pub log_every: usize,
    /// Write a checkpoint every this many iterations, besides the final one.
    pub checkpoint_every: Option<usize>,
    pub seed: u64,
    /// Keep dropout active in G during training.
    pub noise_on: bool,
    pub gan_loss: GanLoss,
    pub adam: AdamConfig,
    pub network: NetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_l1: 100.0,
            batch_size: 4,
            max_iterations: 2000,
            log_every: 10,
            checkpoint_every: None,
            seed: 0,
            noise_on: true,
            gan_loss: GanLoss::NonSaturating,
            adam: AdamConfig::default(),
            network: NetworkConfig::with_size(64),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_l1.is_finite() && self.lambda_l1 >= 0.0) {
            return Err(Error::Config(format!(
                "lambda_l1 must be finite and non-negative, got {}",
                self.lambda_l1
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be at least 1".into()));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be at least 1".into()));
        }
        self.network.validate()
    }
}

/// Losses of one training iteration. `g_total == g_gan + λ · g_l1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    /// 1-based: the record of the k-th step has iteration k.
    pub iteration: usize,
    pub d_loss: f32,
    pub g_gan_loss: f32,
    pub g_l1_loss: f32,
    pub g_total: f32,
}

pub const HISTORY_HEADER: &str = "iteration,d_loss,g_gan,g_l1,g_total";

/// Writes the loss history as CSV. Floats use the shortest representation
/// that round-trips, so equal histories give equal bytes.
pub fn write_history_csv<W: Write>(mut w: W, history: &[LossRecord]) -> std::io::Result<()> {
    writeln!(w, "{HISTORY_HEADER}")?;
    for r in history {
        writeln!(w, "{},{},{},{},{}", r.iteration, r.d_loss, r.g_gan_loss, r.g_l1_loss, r.g_total)?;
    }
    Ok(())
}

/// The two networks, their optimizers and the dropout noise stream.
pub struct GanTrainer {
    pub generator: Network,
    pub discriminator: Network,
    opt_g: Adam,
    opt_d: Adam,
    noise: ChaCha8Rng,
    iteration: usize,
}

impl GanTrainer {
    /// Fresh networks initialized from sub-streams of `cfg.seed`.
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let g = Network::generator(&cfg.network, derive_seed(cfg.seed, STREAM_GENERATOR))?;
        let d = Network::discriminator(&cfg.network, derive_seed(cfg.seed, STREAM_DISCRIMINATOR))?;
        Self::from_networks(g, d, cfg)
    }

    pub fn from_networks(generator: Network, discriminator: Network, cfg: &TrainConfig) -> Result<Self> {
        let opt_g = Adam::new(cfg.adam, generator.params())?;
        let opt_d = Adam::new(cfg.adam, discriminator.params())?;
        Ok(GanTrainer {
            generator,
            discriminator,
            opt_g,
            opt_d,
            noise: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_NOISE)),
            iteration: 0,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// One alternating step on a minibatch: G produces ŷ once; D takes one
    /// Adam step on real (x, y) versus the detached ŷ with G frozen; then the
    /// updated D scores (x, ŷ) again with its weights frozen and G takes one
    /// Adam step on `gan + λ · l1`.
    pub fn train_step(&mut self, batch: &[&SamplePair], cfg: &TrainConfig) -> Result<LossRecord> {
        if batch.is_empty() {
            return Err(Error::Contract("train_step on an empty batch".into()));
        }
        let x = Tensor::stack(&batch.iter().map(|p| &p.x).collect::<Vec<_>>())?;
        let y = Tensor::stack(&batch.iter().map(|p| &p.y).collect::<Vec<_>>())?;

        let mut g_tape = Tape::new();
        let g_params = self.generator.bind(&mut g_tape, true);
        let gx = g_tape.constant(x.clone());
        let noise: Option<&mut dyn RngCore> = if cfg.noise_on { Some(&mut self.noise) } else { None };
        let fake = self.generator.forward(&mut g_tape, &g_params, gx, noise)?;

        let d_value = {
            let mut tape = Tape::new();
            let d_params = self.discriminator.bind(&mut tape, true);
            let dx = tape.constant(x);
            let dy = tape.constant(y.clone());
            let dfake = tape.constant(g_tape.value(fake).clone());
            let real_logits = discriminator_forward(&mut tape, &mut self.discriminator, &d_params, dx, dy)?;
            let fake_logits = discriminator_forward(&mut tape, &mut self.discriminator, &d_params, dx, dfake)?;
            let loss = d_loss(&mut tape, real_logits, fake_logits)?;
            let mut grads = tape.backward(loss)?;
            let grads = d_params.collect(&mut grads)?;
            self.opt_d.step(self.discriminator.params_mut(), &grads)?;
            tape.value(loss).item()?
        };

        let d_frozen = self.discriminator.bind(&mut g_tape, false);
        let fake_logits = discriminator_forward(&mut g_tape, &mut self.discriminator, &d_frozen, gx, fake)?;
        let gy = g_tape.constant(y);
        let parts = g_loss(&mut g_tape, fake_logits, gy, fake, cfg.lambda_l1, cfg.gan_loss)?;
        let mut grads = g_tape.backward(parts.total)?;
        let grads = g_params.collect(&mut grads)?;
        self.opt_g.step(self.generator.params_mut(), &grads)?;

        self.iteration += 1;
        let v = |var| g_tape.value(var).item();
        let record = LossRecord {
            iteration: self.iteration,
            d_loss: d_value,
            g_gan_loss: v(parts.gan)?,
            g_l1_loss: v(parts.l1)?,
            g_total: v(parts.total)?,
        };
        let all = [record.d_loss, record.g_gan_loss, record.g_l1_loss, record.g_total];
        if all.iter().any(|l| !l.is_finite()) {
            return Err(Error::Data(format!("non-finite loss {all:?}")));
        }
        Ok(record)
    }
}

/// Receives checkpoints from [`train_loop`].
pub trait CheckpointSink {
    fn save(&mut self, iteration: usize, generator: &Network, discriminator: &Network) -> Result<()>;
}

pub struct NoCheckpoints;

impl CheckpointSink for NoCheckpoints {
    fn save(&mut self, _: usize, _: &Network, _: &Network) -> Result<()> {
        Ok(())
    }
}

/// Writes `ckpt_<iteration>.json` / `.bin` pairs into a directory.
pub struct DirCheckpoints {
    pub dir: PathBuf,
    pub config_hash: String,
    pub written: Vec<PathBuf>,
}

impl DirCheckpoints {
    pub fn new(dir: &Path, config_hash: &str) -> Self {
        DirCheckpoints {
            dir: dir.to_path_buf(),
            config_hash: config_hash.to_string(),
            written: Vec::new(),
        }
    }
}

impl CheckpointSink for DirCheckpoints {
    fn save(&mut self, iteration: usize, generator: &Network, discriminator: &Network) -> Result<()> {
        let stem = format!("ckpt_{iteration:06}");
        let path = checkpoint::save(&self.dir, &stem, &[generator, discriminator], iteration as u64, &self.config_hash)?;
        self.written.push(path);
        Ok(())
    }
}

pub struct TrainOutcome {
    pub generator: Network,
    pub discriminator: Network,
    pub history: Vec<LossRecord>,
}

/// Trains from scratch for `cfg.max_iterations` steps over shuffled
/// minibatches, reshuffling at each epoch boundary. An incomplete final
/// minibatch is skipped; a dataset smaller than one batch is used whole.
/// `on_record` sees every logged record as it is produced.
pub fn train_loop(
    cfg: &TrainConfig,
    pairs: &[&SamplePair],
    sink: &mut dyn CheckpointSink,
    mut on_record: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    if pairs.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut trainer = GanTrainer::new(cfg)?;
    let mut shuffle = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_SHUFFLE));
    let batch_size = cfg.batch_size.min(pairs.len());
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut cursor = pairs.len();
    let mut history = Vec::with_capacity(cfg.max_iterations / cfg.log_every);
    for it in 1..=cfg.max_iterations {
        if cursor + batch_size > pairs.len() {
            order.shuffle(&mut shuffle);
            cursor = 0;
        }
        let batch: Vec<&SamplePair> = order[cursor..cursor + batch_size].iter().map(|&i| pairs[i]).collect();
        cursor += batch_size;
        let tag = |e| Error::Train {
            iteration: it,
            source: Box::new(e),
        };
        let record = trainer.train_step(&batch, cfg).map_err(tag)?;
        if it % cfg.log_every == 0 {
            on_record(&record);
            history.push(record);
        }
        if cfg.checkpoint_every.is_some_and(|k| it % k == 0 && it != cfg.max_iterations) {
            sink.save(it, &trainer.generator, &trainer.discriminator).map_err(tag)?;
        }
    }
    sink.save(cfg.max_iterations, &trainer.generator, &trainer.discriminator)?;
    Ok(TrainOutcome {
        generator: trainer.generator,
        discriminator: trainer.discriminator,
        history,
    })
}
