//! Block-structured U-Net with weight-sharing kernel-size choices.
//!
//! The network is divided into 2n+1 blocks for n resolution levels: encoder
//! blocks E0..E(n-1), an explicit middle block, and decoder blocks
//! D(n-1)..D0. Every block holds `layers_per_block` residual layers whose
//! convolution kernel size is the searchable choice; norms, time projections
//! and channel-matching shortcuts are shared across choices. Transitions
//! between blocks are parameter-free (mean pooling down, nearest-neighbor
//! up, channel concat for skips), so every trainable parameter belongs to
//! exactly one block.

mod model;
mod train;

pub use model::{
    copy_teacher_convs_into_supernet, forward_block, forward_full, teacher_capture,
    teacher_capture_at, Supernet, SupernetWithArch, TeacherFeatures, UNet,
};
pub use train::{
    train_denoiser, train_supernet_block, BatchSource, BlockTrainReport, DenoiseTrainOpts,
    SupernetTrainOpts,
};

use crate::error::{CoreError, Result};
use crate::rng::Rng;

/// One convolution kernel-size option.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Kernel {
    K1,
    K3,
    K5,
}

impl Kernel {
    pub const ALL: [Kernel; 3] = [Kernel::K1, Kernel::K3, Kernel::K5];

    pub fn size(self) -> usize {
        match self {
            Kernel::K1 => 1,
            Kernel::K3 => 3,
            Kernel::K5 => 5,
        }
    }

    pub fn from_size(k: usize) -> Option<Kernel> {
        match k {
            1 => Some(Kernel::K1),
            3 => Some(Kernel::K3),
            5 => Some(Kernel::K5),
            _ => None,
        }
    }
}

/// Kernel choices for every layer of one block.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockArch(Vec<Kernel>);

impl BlockArch {
    pub fn new(choices: Vec<Kernel>) -> Self {
        BlockArch(choices)
    }

    pub fn uniform(k: Kernel, layers: usize) -> Self {
        BlockArch(vec![k; layers])
    }

    pub fn choices(&self) -> &[Kernel] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sample(layers: usize, rng: &mut Rng) -> Self {
        BlockArch((0..layers).map(|_| Kernel::ALL[rng.below(3)]).collect())
    }
}

/// Kernel choices for the whole network, block by block.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SubnetArch {
    blocks: Vec<BlockArch>,
}

impl SubnetArch {
    pub fn from_blocks(blocks: Vec<BlockArch>) -> Self {
        SubnetArch { blocks }
    }

    pub fn blocks(&self) -> &[BlockArch] {
        &self.blocks
    }

    pub fn block(&self, i: usize) -> &BlockArch {
        &self.blocks[i]
    }

    pub fn with_block(&self, i: usize, arch: BlockArch) -> Self {
        let mut blocks = self.blocks.clone();
        blocks[i] = arch;
        SubnetArch { blocks }
    }

    /// Flat per-layer view, encoder-to-decoder order.
    pub fn flat_choices(&self) -> Vec<Kernel> {
        self.blocks.iter().flat_map(|b| b.0.iter().copied()).collect()
    }
}

/// The architecture with every choice equal to the teacher's 3x3 kernels.
pub fn teacher_arch(config: &UNetConfig) -> SubnetArch {
    SubnetArch {
        blocks: (0..config.block_count())
            .map(|_| BlockArch::uniform(Kernel::K3, config.layers_per_block))
            .collect(),
    }
}

/// Every layer choice drawn uniformly from {1, 3, 5}.
pub fn sample_random_path(config: &UNetConfig, rng: &mut Rng) -> SubnetArch {
    SubnetArch {
        blocks: (0..config.block_count())
            .map(|_| BlockArch::sample(config.layers_per_block, rng))
            .collect(),
    }
}

/// Static structure of the U-Net.
#[derive(Debug, Clone, PartialEq)]
pub struct UNetConfig {
    /// Resolution level count n; the network has 2n+1 blocks.
    pub levels: usize,
    pub base_channels: usize,
    /// Per-level channel multiplier, length `levels`.
    pub channel_mult: Vec<usize>,
    /// Searchable residual layers per block.
    pub layers_per_block: usize,
    pub image_size: usize,
    pub image_channels: usize,
    pub time_embed_dim: usize,
}

impl UNetConfig {
    pub fn block_count(&self) -> usize {
        2 * self.levels + 1
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels * self.channel_mult[level]
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(CoreError::Configuration("levels must be >= 1".into()));
        }
        if self.channel_mult.len() != self.levels {
            return Err(CoreError::Configuration(format!(
                "channel_mult has {} entries for {} levels",
                self.channel_mult.len(),
                self.levels
            )));
        }
        if self.layers_per_block == 0 {
            return Err(CoreError::Configuration(
                "layers_per_block must be >= 1".into(),
            ));
        }
        if self.layers_per_block > 8 {
            return Err(CoreError::Configuration(format!(
                "layers_per_block = {} exceeds the per-block enumeration bound (3^d <= 6561)",
                self.layers_per_block
            )));
        }
        let down_factor = 1usize << (self.levels - 1);
        if self.image_size % down_factor != 0 || self.image_size / down_factor == 0 {
            return Err(CoreError::Configuration(format!(
                "image size {} not divisible by 2^(levels-1) = {down_factor}",
                self.image_size
            )));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(CoreError::Configuration(
                "time_embed_dim must be even and positive".into(),
            ));
        }
        // Every normalized activation must split into min(4, C) groups.
        for spec in layout(self)? {
            for layer in &spec.layers {
                let g = norm_groups(layer.c_in);
                if layer.c_in % g != 0 {
                    return Err(CoreError::Configuration(format!(
                        "layer input channels {} not divisible by {} norm groups",
                        layer.c_in, g
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Group count for group normalization.
pub fn norm_groups(channels: usize) -> usize {
    channels.min(4)
}

/// Role of a block in the encoder/middle/decoder chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Encoder(usize),
    Middle,
    Decoder(usize),
}

/// One residual layer's channel interface.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub c_in: usize,
    pub c_out: usize,
}

/// Resolved structure of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpec {
    pub index: usize,
    pub kind: BlockKind,
    /// Resolution level the block operates at (0 = full resolution).
    pub level: usize,
    /// Spatial size at that level.
    pub resolution: usize,
    pub layers: Vec<LayerSpec>,
    /// Channel count of the block input X_i (after skip concat for decoders).
    pub in_channels: usize,
    pub out_channels: usize,
    pub has_stem: bool,
    pub has_head: bool,
}

impl BlockSpec {
    /// Parameter-name prefix, e.g. "e0", "mid", "d2".
    pub fn prefix(&self) -> String {
        match self.kind {
            BlockKind::Encoder(l) => format!("e{l}"),
            BlockKind::Middle => "mid".to_string(),
            BlockKind::Decoder(l) => format!("d{l}"),
        }
    }
}

/// Computes the block structure: E0..E(n-1), middle, D(n-1)..D0.
pub fn layout(config: &UNetConfig) -> Result<Vec<BlockSpec>> {
    let n = config.levels;
    if n == 0 || config.channel_mult.len() != n {
        return Err(CoreError::Configuration(
            "invalid levels/channel_mult".into(),
        ));
    }
    let d = config.layers_per_block;
    let ch = |l: usize| config.channels_at(l);
    let res = |l: usize| config.image_size >> l;
    let mut blocks = Vec::with_capacity(2 * n + 1);

    for l in 0..n {
        // First layer adapts the incoming channel count to this level's.
        let c_first_in = if l == 0 { ch(0) } else { ch(l - 1) };
        let mut layers = vec![LayerSpec {
            c_in: c_first_in,
            c_out: ch(l),
        }];
        layers.extend(std::iter::repeat_n(
            LayerSpec {
                c_in: ch(l),
                c_out: ch(l),
            },
            d - 1,
        ));
        blocks.push(BlockSpec {
            index: l,
            kind: BlockKind::Encoder(l),
            level: l,
            resolution: res(l),
            layers,
            in_channels: if l == 0 { config.image_channels } else { ch(l - 1) },
            out_channels: ch(l),
            has_stem: l == 0,
            has_head: false,
        });
    }

    let top = n - 1;
    blocks.push(BlockSpec {
        index: n,
        kind: BlockKind::Middle,
        level: top,
        resolution: res(top),
        layers: vec![
            LayerSpec {
                c_in: ch(top),
                c_out: ch(top),
            };
            d
        ],
        in_channels: ch(top),
        out_channels: ch(top),
        has_stem: false,
        has_head: false,
    });

    for l in (0..n).rev() {
        // Input is concat(previous block output, encoder skip at this level).
        let prev_out = if l == top { ch(top) } else { ch(l + 1) };
        let c_in = prev_out + ch(l);
        let mut layers = vec![LayerSpec { c_in, c_out: ch(l) }];
        layers.extend(std::iter::repeat_n(
            LayerSpec {
                c_in: ch(l),
                c_out: ch(l),
            },
            d - 1,
        ));
        blocks.push(BlockSpec {
            index: 2 * n - l,
            kind: BlockKind::Decoder(l),
            level: l,
            resolution: res(l),
            layers,
            in_channels: c_in,
            out_channels: if l == 0 { config.image_channels } else { ch(l) },
            has_stem: false,
            has_head: l == 0,
        });
    }
    Ok(blocks)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn desk_config() -> UNetConfig {
        UNetConfig {
            levels: 3,
            base_channels: 16,
            channel_mult: vec![1, 2, 2],
            layers_per_block: 2,
            image_size: 16,
            image_channels: 1,
            time_embed_dim: 32,
        }
    }

    #[test]
    fn layout_has_2n_plus_1_blocks() {
        let cfg = desk_config();
        cfg.validate().unwrap();
        let blocks = layout(&cfg).unwrap();
        assert_eq!(blocks.len(), 7);
        assert_eq!(blocks[0].kind, BlockKind::Encoder(0));
        assert_eq!(blocks[3].kind, BlockKind::Middle);
        assert_eq!(blocks[6].kind, BlockKind::Decoder(0));
        // Decoder inputs concatenate previous output with the skip.
        assert_eq!(blocks[4].in_channels, 32 + 32);
        assert_eq!(blocks[5].in_channels, 32 + 32);
        assert_eq!(blocks[6].in_channels, 32 + 16);
        assert_eq!(blocks[6].out_channels, 1);
    }

    #[test]
    fn teacher_arch_is_all_threes() {
        let cfg = desk_config();
        let arch = teacher_arch(&cfg);
        assert_eq!(arch.blocks().len(), 7);
        for b in arch.blocks() {
            assert_eq!(b.choices(), &[Kernel::K3, Kernel::K3]);
        }
    }

    #[test]
    fn random_path_choice_frequencies_are_uniform() {
        let cfg = desk_config();
        let mut rng = Rng::seed_from(77);
        let mut counts = [0usize; 3];
        let draws = 10_000;
        for _ in 0..draws {
            let path = sample_random_path(&cfg, &mut rng);
            for k in path.flat_choices() {
                let idx = match k {
                    Kernel::K1 => 0,
                    Kernel::K3 => 1,
                    Kernel::K5 => 2,
                };
                counts[idx] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        assert_eq!(total, draws * 14);
        let expect = total as f64 / 3.0;
        // 3 sigma for a binomial with p = 1/3.
        let sigma = (total as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for &c in &counts {
            assert!(
                (c as f64 - expect).abs() < 3.0 * sigma,
                "counts {counts:?} not uniform"
            );
        }
    }

    #[test]
    fn fixed_seed_gives_same_path() {
        let cfg = desk_config();
        let a = sample_random_path(&cfg, &mut Rng::seed_from(5));
        let b = sample_random_path(&cfg, &mut Rng::seed_from(5));
        assert_eq!(a, b);
    }

    #[test]
    fn config_rejects_bad_shapes() {
        let mut cfg = desk_config();
        cfg.image_size = 10; // not divisible by 4
        assert!(cfg.validate().is_err());
        let mut cfg = desk_config();
        cfg.layers_per_block = 9;
        assert!(cfg.validate().is_err());
        let mut cfg = desk_config();
        cfg.channel_mult = vec![1, 2];
        assert!(cfg.validate().is_err());
    }
}
