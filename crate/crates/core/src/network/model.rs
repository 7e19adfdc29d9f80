//! Typed layers assembled from a [`WeightStore`] and the 5-stage forward pass.

use super::fusion::{pixel_shuffle2, sk_fusion, soft_reconstruct, SkFusionParams};
use super::spec::{ConvType, VariantSpec, STAGES};
use super::weights::{block_prefix, schema, WeightStore};
use crate::activations::Activation;
use crate::attention::{aggregate, AttentionParams, ParallelConv, RelPosBias, WindowAttention, WindowLayout};
use crate::error::{Error, Result};
use crate::normalization::{rescalenorm_begin, rescalenorm_end, NormParams, RescaleWeights};
use crate::tensor::{conv2d, linear, Dense, Kernel, PadMode, Tensor};

struct Reader<'a> {
    store: &'a WeightStore,
}

impl Reader<'_> {
    fn vec(&self, name: &str) -> Result<Vec<f32>> {
        Ok(self.store.get(name)?.data.clone())
    }

    fn dense(&self, prefix: &str) -> Result<Dense> {
        let w = self.store.get(&format!("{prefix}.weight"))?;
        let [cin, cout] = w.shape[..] else {
            return Err(Error::shape(format!("{prefix}.weight is not a matrix")));
        };
        Dense::new(cin, cout, w.data.clone(), self.vec(&format!("{prefix}.bias"))?)
    }

    fn kernel(&self, prefix: &str, groups: usize) -> Result<Kernel> {
        let w = self.store.get(&format!("{prefix}.weight"))?;
        let [k, _, cin_g, cout] = w.shape[..] else {
            return Err(Error::shape(format!("{prefix}.weight is not a 4-d kernel")));
        };
        Kernel::new(k, cin_g * groups, cout, groups, w.data.clone(), self.vec(&format!("{prefix}.bias"))?)
    }

    fn fusion(&self, prefix: &str) -> Result<SkFusionParams> {
        Ok(SkFusionParams {
            proj: self.dense(&format!("{prefix}.proj"))?,
            squeeze: self.dense(&format!("{prefix}.squeeze"))?,
            expand: self.dense(&format!("{prefix}.expand"))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub fc1: Dense,
    pub fc2: Dense,
    pub activation: Activation,
}

impl Mlp {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let hidden = self.activation.apply(&linear(x, &self.fc1)?);
        linear(&hidden, &self.fc2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowedAttention {
    pub norm: NormParams,
    pub rescale: RescaleWeights,
    pub bias: RelPosBias,
    pub shift: usize,
}

/// One transformer block. Blocks without attention skip the normalization
/// and run only the convolution branch between the projections.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub mixer: AttentionParams,
    pub attention: Option<WindowedAttention>,
    pub mlp: Mlp,
}

impl Block {
    pub fn forward(&self, x: &Tensor, spec: &VariantSpec) -> Result<Tensor> {
        let mixed = match &self.attention {
            Some(att) => {
                let layout = WindowLayout::new(spec.window, att.shift, spec.scheme, x.height(), x.width())?;
                let (normed, pair) = rescalenorm_begin(x, &att.norm, &att.rescale)?;
                let y = aggregate(
                    &normed,
                    &self.mixer,
                    Some(WindowAttention {
                        bias: &att.bias,
                        layout: &layout,
                    }),
                )?;
                rescalenorm_end(&y, &pair)?
            }
            None => aggregate(x, &self.mixer, None)?,
        };
        let x = x.add(&mixed)?;
        x.add(&self.mlp.forward(&x)?)
    }
}

/// Feature-map extents seen during one forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    /// `[b, h, w, c]` at the output of each stage.
    pub stages: [[usize; 4]; STAGES],
}

#[derive(Debug, Clone, PartialEq)]
pub struct DehazeFormer {
    pub spec: VariantSpec,
    pub embed: Kernel,
    pub stages: Vec<Vec<Block>>,
    pub down: [Kernel; 2],
    pub up: [Dense; 2],
    pub fusion: [SkFusionParams; 2],
    pub head: Kernel,
}

impl DehazeFormer {
    pub fn from_store(spec: &VariantSpec, store: &WeightStore) -> Result<Self> {
        spec.validate()?;
        // every schema entry must be present with the declared shape
        for p in schema(spec) {
            let have = store.get(&p.name)?;
            if have.shape != p.shape || have.data.len() != p.len() {
                return Err(Error::ParamShape {
                    name: p.name,
                    expected: p.shape,
                    found: have.shape.clone(),
                });
            }
        }
        let r = Reader { store };
        let mut stages = Vec::with_capacity(STAGES);
        for stage in 0..STAGES {
            let c = spec.dims[stage];
            let mut blocks = Vec::with_capacity(spec.depths[stage]);
            for block in 0..spec.depths[stage] {
                let p = block_prefix(stage, block);
                let has_attn = spec.block_has_attention(stage, block);
                let conv = match spec.conv {
                    ConvType::DwConv => ParallelConv::Depthwise(r.kernel(&format!("{p}.attn.conv"), c)?),
                    ConvType::ConvBlock => ParallelConv::Block {
                        first: r.kernel(&format!("{p}.attn.conv1"), 1)?,
                        second: r.kernel(&format!("{p}.attn.conv2"), 1)?,
                        activation: spec.activation,
                    },
                };
                let qkv = if has_attn {
                    r.dense(&format!("{p}.attn.qkv"))?
                } else {
                    r.dense(&format!("{p}.attn.v"))?
                };
                let heads = if has_attn { spec.heads[stage] } else { 1 };
                let mixer = AttentionParams::new(c, heads, qkv, r.dense(&format!("{p}.attn.proj"))?, conv)?;
                let attention = if has_attn {
                    Some(WindowedAttention {
                        norm: NormParams {
                            scale: r.vec(&format!("{p}.norm.scale"))?,
                            shift: r.vec(&format!("{p}.norm.shift"))?,
                        },
                        rescale: RescaleWeights {
                            w_gamma: r.vec(&format!("{p}.norm.w_gamma"))?,
                            b_gamma: r.vec(&format!("{p}.norm.b_gamma"))?,
                            w_beta: r.vec(&format!("{p}.norm.w_beta"))?,
                            b_beta: r.vec(&format!("{p}.norm.b_beta"))?,
                        },
                        bias: RelPosBias::new(spec.window, heads, r.vec(&format!("{p}.attn.rel_bias"))?)?,
                        shift: spec.block_shift(block),
                    })
                } else {
                    None
                };
                let mlp = Mlp {
                    fc1: r.dense(&format!("{p}.mlp.fc1"))?,
                    fc2: r.dense(&format!("{p}.mlp.fc2"))?,
                    activation: spec.activation,
                };
                blocks.push(Block { mixer, attention, mlp });
            }
            stages.push(blocks);
        }
        Ok(Self {
            spec: spec.clone(),
            embed: r.kernel("embed", 1)?,
            stages,
            down: [r.kernel("down1", 1)?, r.kernel("down2", 1)?],
            up: [r.dense("up1")?, r.dense("up2")?],
            fusion: [r.fusion("fusion1")?, r.fusion("fusion2")?],
            head: r.kernel("head", 1)?,
        })
    }

    fn run_stage(&self, stage: usize, mut x: Tensor) -> Result<Tensor> {
        for block in &self.stages[stage] {
            x = block.forward(&x, &self.spec)?;
        }
        Ok(x)
    }

    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        self.forward_traced(image).map(|(out, _)| out)
    }

    pub fn forward_traced(&self, image: &Tensor) -> Result<(Tensor, Trace)> {
        let [_, h, w, c] = image.shape();
        if c != 3 {
            return Err(Error::shape(format!("expected a 3-channel image, got {c} channels")));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(format!(
                "image extents {h}x{w} must be divisible by 4; pad to {}x{}",
                h.next_multiple_of(4),
                w.next_multiple_of(4)
            )));
        }
        let mut stages = [[0usize; 4]; STAGES];
        let x = conv2d(image, &self.embed, 1, PadMode::Reflect)?;
        let skip1 = self.run_stage(0, x)?;
        stages[0] = skip1.shape();
        let x = conv2d(&skip1, &self.down[0], 2, PadMode::Reflect)?;
        let skip2 = self.run_stage(1, x)?;
        stages[1] = skip2.shape();
        let x = conv2d(&skip2, &self.down[1], 2, PadMode::Reflect)?;
        let x = self.run_stage(2, x)?;
        stages[2] = x.shape();
        let x = pixel_shuffle2(&linear(&x, &self.up[0])?)?;
        let x = sk_fusion(&skip2, &x, &self.fusion[0])?;
        let x = self.run_stage(3, x)?;
        stages[3] = x.shape();
        let x = pixel_shuffle2(&linear(&x, &self.up[1])?)?;
        let x = sk_fusion(&skip1, &x, &self.fusion[1])?;
        let x = self.run_stage(4, x)?;
        stages[4] = x.shape();
        let o = conv2d(&x, &self.head, 1, PadMode::Reflect)?;
        Ok((soft_reconstruct(&o, image)?, Trace { stages }))
    }
}

/// Builds the network from `weights` and runs it on `image`.
pub fn forward(spec: &VariantSpec, weights: &WeightStore, image: &Tensor) -> Result<Tensor> {
    DehazeFormer::from_store(spec, weights)?.forward(image)
}
