use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// The three cross-modal Transformer blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Block {
    /// Audio queries, visual keys/values.
    Av,
    /// Visual queries, audio keys/values.
    Va,
    /// AV output queries, VA output keys/values.
    Fusion,
}

impl Block {
    pub const ALL: [Block; 3] = [Block::Av, Block::Va, Block::Fusion];

    pub fn prefix(self) -> &'static str {
        match self {
            Block::Av => "av",
            Block::Va => "va",
            Block::Fusion => "fusion",
        }
    }

    pub(crate) fn index(self) -> usize {
        match self {
            Block::Av => 0,
            Block::Va => 1,
            Block::Fusion => 2,
        }
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

/// One Transformer layer addressed by block and 1-based layer number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerSpec {
    pub block: Block,
    pub layer: usize,
}

impl LayerSpec {
    pub const fn new(block: Block, layer: usize) -> Self {
        LayerSpec { block, layer }
    }

    pub fn validate(self, layers_per_block: usize) -> Result<()> {
        if self.layer == 0 || self.layer > layers_per_block {
            return Err(Error::Config(format!(
                "layer {self} outside 1..={layers_per_block}"
            )));
        }
        Ok(())
    }

    /// Parses a comma-separated list such as `fusion3,av4,va1`.
    pub fn parse_list(s: &str) -> Result<Vec<LayerSpec>> {
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(str::parse)
            .collect()
    }

    pub fn format_list(layers: &[LayerSpec]) -> String {
        layers.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.block, self.layer)
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let split = s
            .find(|c: char| c.is_ascii_digit())
            .ok_or_else(|| Error::Config(format!("layer spec `{s}` has no layer number")))?;
        let (name, num) = s.split_at(split);
        let block = match name {
            "av" => Block::Av,
            "va" => Block::Va,
            "fusion" => Block::Fusion,
            _ => return Err(Error::Config(format!("unknown block `{name}` in layer spec `{s}`"))),
        };
        let layer = num
            .parse()
            .map_err(|_| Error::Config(format!("bad layer number in `{s}`")))?;
        if layer == 0 {
            return Err(Error::Config(format!("layer numbers start at 1 (`{s}`)")));
        }
        Ok(LayerSpec { block, layer })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub layers_per_block: usize,
    /// Feed-forward hidden width is `ffn_mult * d_model`.
    pub ffn_mult: usize,
    pub d_visual_in: usize,
    pub d_audio_in: usize,
    /// Audio frames per visual frame.
    pub audio_rate: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale teacher.
    pub fn teacher() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            layers_per_block: 4,
            ffn_mult: 2,
            d_visual_in: 16,
            d_audio_in: 12,
            audio_rate: 4,
            seed: 7,
        }
    }

    /// Desk-scale student.
    pub fn student() -> Self {
        ModelConfig {
            d_model: 24,
            seed: 11,
            ..ModelConfig::teacher()
        }
    }

    /// Full-width teacher profile; used for parameter counting only.
    pub fn full_teacher() -> Self {
        ModelConfig {
            d_model: 512,
            ffn_mult: 4,
            ..ModelConfig::teacher()
        }
    }

    /// Full-width student profile; used for parameter counting only.
    pub fn full_student() -> Self {
        ModelConfig {
            d_model: 200,
            ffn_mult: 4,
            ..ModelConfig::student()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("layers_per_block", self.layers_per_block),
            ("ffn_mult", self.ffn_mult),
            ("d_visual_in", self.d_visual_in),
            ("d_audio_in", self.d_audio_in),
            ("audio_rate", self.audio_rate),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Every `(block, layer)` of this configuration in block-major order.
    pub fn all_layers(&self) -> Vec<LayerSpec> {
        Block::ALL
            .iter()
            .flat_map(|&b| (1..=self.layers_per_block).map(move |l| LayerSpec::new(b, l)))
            .collect()
    }
}
