use std::fmt;

use crate::activations::Activation;
use crate::attention::WindowScheme;
use crate::error::{Error, Result};

/// Default attention window side, in tokens.
pub const DEFAULT_WINDOW: usize = 8;
/// Default squeeze reduction inside SK fusion.
pub const DEFAULT_SK_REDUCTION: usize = 8;

pub const STAGES: usize = 5;

/// Fraction of a stage's blocks that carry attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ratio {
    pub num: usize,
    pub den: usize,
}

impl Ratio {
    pub const ZERO: Ratio = Ratio { num: 0, den: 1 };
    pub const ONE: Ratio = Ratio { num: 1, den: 1 };

    pub const fn new(num: usize, den: usize) -> Self {
        Ratio { num, den }
    }

    /// `ceil(ratio · n)`.
    pub fn of(self, n: usize) -> usize {
        (self.num * n).div_ceil(self.den)
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvType {
    /// Depthwise 5×5.
    DwConv,
    /// Dense 3×3, activation, dense 3×3.
    ConvBlock,
}

impl ConvType {
    pub fn kernel_size(self) -> usize {
        match self {
            ConvType::DwConv => 5,
            ConvType::ConvBlock => 3,
        }
    }
}

/// Architecture hyper-parameters of one network variant.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantSpec {
    pub name: String,
    pub depths: [usize; STAGES],
    pub dims: [usize; STAGES],
    pub mlp_ratios: [usize; STAGES],
    pub attn_ratios: [Ratio; STAGES],
    pub heads: [usize; STAGES],
    pub conv: ConvType,
    pub window: usize,
    pub scheme: WindowScheme,
    pub activation: Activation,
    pub sk_reduction: usize,
}

const ENCODER_HEAVY: [Ratio; STAGES] = [
    Ratio::new(1, 4),
    Ratio::new(1, 2),
    Ratio::new(3, 4),
    Ratio::ZERO,
    Ratio::ZERO,
];

impl VariantSpec {
    pub const NAMES: [&'static str; 5] = ["T", "S", "B", "M", "L"];

    /// One of the five published variants, `T`, `S`, `B`, `M` or `L`.
    pub fn named(name: &str) -> Result<Self> {
        let (depths, dims, conv) = match name.trim_start_matches("DehazeFormer-") {
            "T" | "t" => ([4, 4, 4, 2, 2], [24, 48, 96, 48, 24], ConvType::DwConv),
            "S" | "s" => ([8, 8, 8, 4, 4], [24, 48, 96, 48, 24], ConvType::DwConv),
            "B" | "b" => ([16, 16, 16, 8, 8], [24, 48, 96, 48, 24], ConvType::DwConv),
            "M" | "m" => ([12, 12, 12, 6, 6], [24, 48, 96, 48, 24], ConvType::ConvBlock),
            "L" | "l" => ([16, 16, 16, 12, 12], [48, 96, 192, 96, 48], ConvType::ConvBlock),
            other => return Err(Error::config(format!("unknown variant `{other}` (expected T, S, B, M or L)"))),
        };
        Ok(Self {
            name: name.trim_start_matches("DehazeFormer-").to_ascii_uppercase(),
            depths,
            dims,
            mlp_ratios: [2, 4, 4, 2, 2],
            attn_ratios: ENCODER_HEAVY,
            heads: [2, 4, 6, 1, 1],
            conv,
            window: DEFAULT_WINDOW,
            scheme: WindowScheme::ReflectionPad,
            activation: Activation::Relu,
            sk_reduction: DEFAULT_SK_REDUCTION,
        })
    }

    /// The shallow all-attention ablation variant.
    pub fn all_attention() -> Self {
        Self {
            name: "A".into(),
            depths: [2; STAGES],
            mlp_ratios: [2, 4, 4, 4, 2],
            attn_ratios: [Ratio::ONE; STAGES],
            heads: [2, 4, 6, 4, 2],
            ..Self::named("T").expect("T is a known variant")
        }
    }

    pub fn attention_blocks(&self, stage: usize) -> usize {
        self.attn_ratios[stage].of(self.depths[stage])
    }

    /// Attention blocks sit at the end of each stage.
    pub fn block_has_attention(&self, stage: usize, block: usize) -> bool {
        block >= self.depths[stage] - self.attention_blocks(stage)
    }

    /// Odd blocks of a stage use the shifted window grid.
    pub fn block_shift(&self, block: usize) -> usize {
        if block % 2 == 1 {
            self.window / 2
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        if d.contains(&0) || self.depths.contains(&0) {
            return Err(Error::config("dims and depths must be positive"));
        }
        if d[3] != d[1] || d[4] != d[0] {
            return Err(Error::config(format!(
                "decoder dims {:?} must mirror encoder dims for skip fusion",
                d
            )));
        }
        if self.window < 2 {
            return Err(Error::config("window must be at least 2"));
        }
        for (s, &dim) in d.iter().enumerate() {
            let r = self.attn_ratios[s];
            if r.den == 0 || r.num > r.den {
                return Err(Error::config(format!("attention ratio {r} outside [0, 1]")));
            }
            if self.mlp_ratios[s] == 0 {
                return Err(Error::config("mlp ratio must be positive"));
            }
            if self.attention_blocks(s) > 0 && (self.heads[s] == 0 || !dim.is_multiple_of(self.heads[s])) {
                return Err(Error::config(format!(
                    "stage {} heads {} do not divide dim {}",
                    s + 1,
                    self.heads[s],
                    dim
                )));
            }
        }
        for c in [d[3], d[4]] {
            if self.sk_reduction == 0 || c % self.sk_reduction != 0 {
                return Err(Error::config(format!(
                    "SK reduction {} does not divide {c}",
                    self.sk_reduction
                )));
            }
        }
        Ok(())
    }
}
