//! U-Net generator and PatchGAN discriminator.
//!
//! A [`Network`] owns named parameters and a list of [`Block`]s. Forward
//! passes bind the parameters onto a [`Tape`] (trainable or frozen) and run
//! the blocks with the wiring given by the network's [`Topology`].

pub mod checkpoint;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, NormKind, RunningStats, Tape, Tensor, Var};

/// Standard deviation of the Gaussian weight initialization.
pub const INIT_STD: f64 = 0.02;
const LEAKY_SLOPE: f32 = 0.2;
const KERNEL: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Square input side; a power of two ≥ 16.
    pub image_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_filters: usize,
    /// Generator depth; `None` means log2(image_size), a 1×1 bottleneck.
    pub g_levels: Option<usize>,
    /// Stride-2 blocks in the discriminator.
    pub d_layers: usize,
    pub norm_kind: NormKind,
    pub dropout_p: f32,
    /// Feed D only the (real or generated) target instead of concat(x, y).
    pub unconditional_d: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            image_size: 256,
            in_channels: 3,
            out_channels: 3,
            base_filters: 64,
            g_levels: None,
            d_layers: 3,
            norm_kind: NormKind::Batch,
            dropout_p: 0.5,
            unconditional_d: false,
        }
    }
}

impl NetworkConfig {
    pub fn with_size(image_size: usize) -> Self {
        NetworkConfig {
            image_size,
            ..Self::default()
        }
    }

    pub fn generator_levels(&self) -> usize {
        self.g_levels.unwrap_or(self.image_size.trailing_zeros() as usize)
    }

    /// Filters at generator level `i`: base·2^i capped at base·8.
    pub fn level_filters(&self, i: usize) -> usize {
        self.base_filters << i.min(3)
    }

    /// Side length of the discriminator's logit map.
    pub fn patch_side(&self) -> Option<usize> {
        let mut side = self.image_size;
        for _ in 0..self.d_layers {
            side = (side + 2).checked_sub(KERNEL)? / 2 + 1;
        }
        for _ in 0..2 {
            side = (side + 2).checked_sub(KERNEL)? + 1;
        }
        Some(side)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.image_size < 16 || !self.image_size.is_power_of_two() {
            return fail(format!("image_size must be a power of two ≥ 16, got {}", self.image_size));
        }
        let max_levels = self.image_size.trailing_zeros() as usize;
        let levels = self.generator_levels();
        if levels == 0 || levels > max_levels {
            return fail(format!(
                "g_levels must be in 1..={max_levels} for image_size {}, got {levels}",
                self.image_size
            ));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.base_filters == 0 {
            return fail("channel counts and base_filters must be positive".into());
        }
        if self.d_layers == 0 {
            return fail("d_layers must be ≥ 1".into());
        }
        if self.patch_side().unwrap_or(0) == 0 {
            return fail(format!(
                "d_layers {} leaves no logit map at image_size {}",
                self.d_layers, self.image_size
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail(format!("dropout_p must be in [0, 1), got {}", self.dropout_p));
        }
        Ok(())
    }

    fn d_input_channels(&self) -> usize {
        if self.unconditional_d {
            self.out_channels
        } else {
            self.in_channels + self.out_channels
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetKind {
    Generator,
    Discriminator,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// One step inside a block. Indices refer to the owning network's parameter
/// and running-statistics lists.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv {
        weight: usize,
        bias: Option<usize>,
        stride: usize,
        transposed: bool,
    },
    Norm {
        gamma: usize,
        beta: usize,
        /// Running statistics slot, for batch norm.
        stats: Option<usize>,
    },
    LeakyRelu(f32),
    Relu,
    Tanh,
    Dropout(f32),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub name: String,
    pub layers: Vec<Layer>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Topology {
    /// `levels` encoder blocks followed by `levels` decoder blocks; decoder
    /// level `i` (below the innermost) sees concat(encoder i output, decoder
    /// i+1 output).
    UNet {
        levels: usize,
    },
    Sequential,
}

#[derive(Clone, Debug)]
pub struct Network {
    kind: NetKind,
    config: NetworkConfig,
    topology: Topology,
    blocks: Vec<Block>,
    names: Vec<String>,
    params: Vec<Tensor>,
    stat_names: Vec<String>,
    stats: Vec<RunningStats>,
    mode: Mode,
}

/// A network's parameters recorded on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients aligned with the network's parameter list.
    pub fn collect(&self, grads: &mut Gradients) -> Result<Vec<Tensor>> {
        self.vars
            .iter()
            .map(|&v| {
                grads
                    .take(v)
                    .ok_or_else(|| Error::Contract("network was bound without gradients on this tape".into()))
            })
            .collect()
    }
}

struct Builder {
    rng: ChaCha8Rng,
    norm: NormKind,
    names: Vec<String>,
    params: Vec<Tensor>,
    stat_names: Vec<String>,
    stats: Vec<RunningStats>,
}

impl Builder {
    fn new(cfg: &NetworkConfig, seed: u64) -> Self {
        Builder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            norm: cfg.norm_kind,
            names: Vec::new(),
            params: Vec::new(),
            stat_names: Vec::new(),
            stats: Vec::new(),
        }
    }

    fn param(&mut self, name: String, value: Tensor) -> usize {
        self.names.push(name);
        self.params.push(value);
        self.params.len() - 1
    }

    fn conv(&mut self, block: &str, cin: usize, cout: usize, stride: usize, bias: bool, transposed: bool) -> Layer {
        let dims = if transposed {
            [cin, cout, KERNEL, KERNEL]
        } else {
            [cout, cin, KERNEL, KERNEL]
        };
        let init = Tensor::randn(&dims, 0.0, INIT_STD, &mut self.rng);
        let weight = self.param(format!("{block}.conv.weight"), init);
        let bias = bias.then(|| self.param(format!("{block}.conv.bias"), Tensor::zeros(&[cout])));
        Layer::Conv {
            weight,
            bias,
            stride,
            transposed,
        }
    }

    fn norm(&mut self, block: &str, channels: usize) -> Layer {
        let init = Tensor::randn(&[channels], 1.0, INIT_STD, &mut self.rng);
        let gamma = self.param(format!("{block}.norm.gamma"), init);
        let beta = self.param(format!("{block}.norm.beta"), Tensor::zeros(&[channels]));
        let stats = (self.norm == NormKind::Batch).then(|| {
            self.stat_names.push(format!("{block}.norm.running"));
            self.stats.push(RunningStats::new(channels));
            self.stats.len() - 1
        });
        Layer::Norm { gamma, beta, stats }
    }

    fn finish(self, kind: NetKind, config: &NetworkConfig, topology: Topology, blocks: Vec<Block>) -> Network {
        Network {
            kind,
            config: config.clone(),
            topology,
            blocks,
            names: self.names,
            params: self.params,
            stat_names: self.stat_names,
            stats: self.stats,
            mode: Mode::Train,
        }
    }
}

impl Network {
    /// U-Net: stride-2 conv downs, mirrored transposed-conv ups with skip
    /// concatenation, dropout in the three innermost decoder blocks, tanh out.
    /// No normalization on the outermost blocks or the innermost down block.
    pub fn generator(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let levels = cfg.generator_levels();
        let mut b = Builder::new(cfg, seed);
        let mut blocks = Vec::with_capacity(2 * levels);
        for i in 0..levels {
            let name = format!("gen.down{i}");
            let cin = if i == 0 { cfg.in_channels } else { cfg.level_filters(i - 1) };
            let cout = cfg.level_filters(i);
            let (outermost, innermost) = (i == 0, i == levels - 1);
            let mut layers = Vec::new();
            if !outermost {
                layers.push(Layer::LeakyRelu(LEAKY_SLOPE));
            }
            let normed = !outermost && !innermost;
            layers.push(b.conv(&name, cin, cout, 2, !normed, false));
            if normed {
                layers.push(b.norm(&name, cout));
            }
            blocks.push(Block { name, layers });
        }
        for i in (0..levels).rev() {
            let name = format!("gen.up{i}");
            let cin = if i == levels - 1 {
                cfg.level_filters(i)
            } else {
                2 * cfg.level_filters(i)
            };
            let outermost = i == 0;
            let cout = if outermost { cfg.out_channels } else { cfg.level_filters(i - 1) };
            let mut layers = vec![Layer::Relu, b.conv(&name, cin, cout, 2, outermost, true)];
            if outermost {
                layers.push(Layer::Tanh);
            } else {
                layers.push(b.norm(&name, cout));
                if i + 3 >= levels && cfg.dropout_p > 0.0 {
                    layers.push(Layer::Dropout(cfg.dropout_p));
                }
            }
            blocks.push(Block { name, layers });
        }
        Ok(b.finish(NetKind::Generator, cfg, Topology::UNet { levels }, blocks))
    }

    /// PatchGAN: `d_layers` stride-2 conv blocks (first without norm), one
    /// stride-1 block, then a stride-1 conv to a single channel of logits.
    pub fn discriminator(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder::new(cfg, seed);
        let mut blocks = Vec::with_capacity(cfg.d_layers + 2);
        let filters = |i: usize| cfg.base_filters << i.min(3);
        let mut cin = cfg.d_input_channels();
        for i in 0..=cfg.d_layers {
            let name = format!("disc.block{i}");
            let cout = filters(i);
            let stride = if i < cfg.d_layers { 2 } else { 1 };
            let mut layers = vec![b.conv(&name, cin, cout, stride, i == 0, false)];
            if i > 0 {
                layers.push(b.norm(&name, cout));
            }
            layers.push(Layer::LeakyRelu(LEAKY_SLOPE));
            blocks.push(Block { name, layers });
            cin = cout;
        }
        let name = "disc.logits".to_string();
        let layers = vec![b.conv(&name, cin, 1, 1, true, false)];
        blocks.push(Block { name, layers });
        Ok(b.finish(NetKind::Discriminator, cfg, Topology::Sequential, blocks))
    }

    pub fn kind(&self) -> NetKind {
        self.kind
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn stat_names(&self) -> &[String] {
        &self.stat_names
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.stats
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.stats
    }

    /// Records every parameter on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.leaf(p.clone(), trainable)).collect(),
        }
    }

    /// Runs the network; in train mode batch-norm layers use batch
    /// statistics and update the stored running statistics.
    pub fn forward(&mut self, tape: &mut Tape, bound: &Bound, input: Var, noise: Option<&mut dyn RngCore>) -> Result<Var> {
        let mut stats = std::mem::take(&mut self.stats);
        let out = self.run(tape, bound, input, noise, &mut stats, self.mode);
        self.stats = stats;
        out
    }

    /// Forward without a caller-visible tape. Running statistics are never
    /// modified, so this is safe to call on a shared network.
    pub fn infer(&self, input: &Tensor, noise: Option<&mut dyn RngCore>) -> Result<Tensor> {
        self.infer_in(self.mode, input, noise)
    }

    /// [`Network::infer`] with normalization behaving as in `mode`
    /// regardless of the stored mode.
    pub fn infer_in(&self, mode: Mode, input: &Tensor, noise: Option<&mut dyn RngCore>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(input.clone());
        let mut stats = self.stats.clone();
        let out = self.run(&mut tape, &bound, x, noise, &mut stats, mode)?;
        Ok(tape.value(out).clone())
    }

    fn check_input(&self, tape: &Tape, input: Var, channels: usize) -> Result<()> {
        let dims = tape.value(input).dims4()?;
        let s = self.config.image_size;
        if dims[1] != channels || dims[2] != s || dims[3] != s {
            return Err(Error::shape("network input", &dims, &[dims[0], channels, s, s]));
        }
        Ok(())
    }

    fn run(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        input: Var,
        mut noise: Option<&mut dyn RngCore>,
        stats: &mut [RunningStats],
        mode: Mode,
    ) -> Result<Var> {
        if bound.vars.len() != self.params.len() {
            return Err(Error::Contract("bound parameters do not belong to this network".into()));
        }
        match self.topology {
            Topology::Sequential => {
                self.check_input(tape, input, self.config.d_input_channels())?;
                let mut h = input;
                for block in &self.blocks {
                    h = self.run_block(tape, bound, block, h, reborrow(&mut noise), stats, mode)?;
                }
                Ok(h)
            }
            Topology::UNet { levels } => {
                self.check_input(tape, input, self.config.in_channels)?;
                let mut skips = Vec::with_capacity(levels);
                let mut h = input;
                for block in &self.blocks[..levels] {
                    h = self.run_block(tape, bound, block, h, reborrow(&mut noise), stats, mode)?;
                    skips.push(h);
                }
                for (j, block) in self.blocks[levels..].iter().enumerate() {
                    if j > 0 {
                        h = tape.concat_channels(skips[levels - 1 - j], h)?;
                    }
                    h = self.run_block(tape, bound, block, h, reborrow(&mut noise), stats, mode)?;
                }
                Ok(h)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn run_block(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        block: &Block,
        mut h: Var,
        mut noise: Option<&mut dyn RngCore>,
        stats: &mut [RunningStats],
        mode: Mode,
    ) -> Result<Var> {
        let v = |i: usize| bound.vars[i];
        for layer in &block.layers {
            h = match *layer {
                Layer::Conv {
                    weight,
                    bias,
                    stride,
                    transposed: false,
                } => tape.conv2d(h, v(weight), bias.map(v), stride, 1)?,
                Layer::Conv {
                    weight,
                    bias,
                    stride,
                    transposed: true,
                } => tape.conv_transpose2d(h, v(weight), bias.map(v), stride, 1)?,
                Layer::Norm {
                    gamma,
                    beta,
                    stats: Some(slot),
                } => tape.batch_norm2d(h, v(gamma), v(beta), &mut stats[slot], mode == Mode::Train)?,
                Layer::Norm { gamma, beta, stats: None } => tape.instance_norm2d(h, v(gamma), v(beta), 1e-5)?,
                Layer::LeakyRelu(slope) => tape.leaky_relu(h, slope)?,
                Layer::Relu => tape.relu(h)?,
                Layer::Tanh => tape.tanh(h)?,
                Layer::Dropout(p) => tape.dropout(h, p as f64, reborrow(&mut noise))?,
            };
        }
        Ok(h)
    }
}

fn reborrow<'a>(noise: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    noise.as_mut().map(|r| &mut **r as &mut dyn RngCore)
}

/// ŷ = G(x, z): a convenience wrapper around [`Network::infer`]. Noise z is
/// realized by dropout and only active when `noise` is given.
pub fn generator_forward(g: &Network, x: &Tensor, noise: Option<&mut dyn RngCore>) -> Result<Tensor> {
    if g.kind != NetKind::Generator {
        return Err(Error::Contract("generator_forward called with a discriminator".into()));
    }
    g.infer(x, noise)
}

/// Patch logits of D for the pair (x, y), recorded on `tape`.
pub fn discriminator_forward(tape: &mut Tape, d: &mut Network, bound: &Bound, x: Var, y: Var) -> Result<Var> {
    if d.kind != NetKind::Discriminator {
        return Err(Error::Contract("discriminator_forward called with a generator".into()));
    }
    let (xd, yd) = (tape.value(x).dims4()?, tape.value(y).dims4()?);
    if xd[0] != yd[0] || xd[2..] != yd[2..] {
        return Err(Error::shape("discriminator_forward", &xd, &yd));
    }
    let input = if d.config.unconditional_d { y } else { tape.concat_channels(x, y)? };
    d.forward(tape, bound, input, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(size: usize) -> NetworkConfig {
        NetworkConfig {
            image_size: size,
            base_filters: 4,
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn validate_rejects_bad_configs() {
        assert!(NetworkConfig::with_size(48).validate().is_err());
        assert!(NetworkConfig::with_size(8).validate().is_err());
        let too_deep = NetworkConfig {
            g_levels: Some(7),
            ..NetworkConfig::with_size(64)
        };
        assert!(matches!(Network::generator(&too_deep, 0), Err(Error::Config(_))));
        let no_d = NetworkConfig {
            d_layers: 0,
            ..NetworkConfig::with_size(64)
        };
        assert!(Network::discriminator(&no_d, 0).is_err());
        let no_patch = NetworkConfig {
            d_layers: 3,
            ..NetworkConfig::with_size(16)
        };
        assert!(no_patch.validate().is_err());
    }

    #[test]
    fn default_levels_reach_a_one_by_one_bottleneck() {
        let cfg = NetworkConfig::with_size(64);
        assert_eq!(cfg.generator_levels(), 6);
        assert_eq!(64 >> cfg.generator_levels(), 1);
    }

    #[test]
    fn filter_schedule_caps_at_eight_times_base() {
        let cfg = NetworkConfig::default();
        let f: Vec<usize> = (0..8).map(|i| cfg.level_filters(i)).collect();
        assert_eq!(f, [64, 128, 256, 512, 512, 512, 512, 512]);
    }

    #[test]
    fn parameter_names_are_unique() {
        let cfg = small(32);
        for net in [Network::generator(&cfg, 1).unwrap(), Network::discriminator(&cfg, 1).unwrap()] {
            let mut names = net.param_names().to_vec();
            names.sort();
            names.dedup();
            assert_eq!(names.len(), net.param_names().len());
        }
    }

    #[test]
    fn dropout_sits_in_three_innermost_decoder_blocks() {
        let g = Network::generator(&small(64), 0).unwrap();
        let with_dropout: Vec<&str> = g
            .blocks()
            .iter()
            .filter(|b| b.layers.iter().any(|l| matches!(l, Layer::Dropout(_))))
            .map(|b| b.name.as_str())
            .collect();
        assert_eq!(with_dropout, ["gen.up5", "gen.up4", "gen.up3"]);
    }

    #[test]
    fn outermost_and_innermost_down_blocks_have_no_norm() {
        let g = Network::generator(&small(32), 0).unwrap();
        let has_norm = |name: &str| {
            g.blocks()
                .iter()
                .find(|b| b.name == name)
                .unwrap()
                .layers
                .iter()
                .any(|l| matches!(l, Layer::Norm { .. }))
        };
        assert!(!has_norm("gen.down0"));
        assert!(!has_norm("gen.down4"));
        assert!(has_norm("gen.down1"));
        assert!(!has_norm("gen.up0"));
        assert!(has_norm("gen.up4"));
        let d = Network::discriminator(&small(32), 0).unwrap();
        assert!(d.blocks()[0].layers.iter().all(|l| !matches!(l, Layer::Norm { .. })));
    }

    #[test]
    fn wrong_input_size_is_a_shape_error() {
        let g = Network::generator(&small(32), 0).unwrap();
        let x = Tensor::zeros(&[1, 3, 16, 16]);
        assert!(matches!(generator_forward(&g, &x, None), Err(Error::Shape { .. })));
    }

    #[test]
    fn instance_norm_generator_runs_with_batch_of_one() {
        let cfg = NetworkConfig {
            norm_kind: NormKind::Instance,
            ..small(32)
        };
        let mut g = Network::generator(&cfg, 3).unwrap();
        assert!(g.running_stats().is_empty());
        let mut tape = Tape::new();
        let bound = g.bind(&mut tape, true);
        let x = tape.constant(Tensor::rand_uniform(&[1, 3, 32, 32], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0)));
        let y = g.forward(&mut tape, &bound, x, None).unwrap();
        assert_eq!(tape.value(y).dims(), &[1, 3, 32, 32]);
    }
}
