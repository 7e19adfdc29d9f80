mod fusion;
mod model;
mod overhead;
mod spec;
mod weights;

pub use fusion::{fusion_weights, pixel_shuffle2, sk_fusion, soft_reconstruct, FusionWeights, SkFusionParams};
pub use model::{forward, Block, DehazeFormer, Mlp, Trace, WindowedAttention};
pub use overhead::{
    attention_core_macs, conv_macs, count_macs, count_params, linear_macs, mac_breakdown, param_breakdown, Breakdown,
};
pub use spec::{ConvType, Ratio, VariantSpec, DEFAULT_SK_REDUCTION, DEFAULT_WINDOW, STAGES};
pub use weights::{block_prefix, manifest_path, payload_path, schema, Init, Param, ParamSpec, WeightStore, INIT_STD};
