//! Layer vocabulary shared by the encoder, decoder and discriminators.

pub mod blocks;
pub mod layers;
mod shift_conv;

pub use blocks::{
    resnext_width, BatchDecoderBlock, BatchDecoderBlockCfg, DiscriminatorBlock,
    DiscriminatorBlockCfg, EncoderBlock, EncoderBlockCfg, GroupDecoderBlock, GroupDecoderBlockCfg,
    ResNeXtLayer, SelfAttention, RESNEXT_CARDINALITY,
};
pub use layers::{
    leaky_relu, BatchNorm, Conv2d, ConvTranspose2d, GroupNorm, Linear, Padding, LEAKY_SLOPE,
};
pub use shift_conv::shift_conv;
pub(crate) use shift_conv::{into_storage, storage_tensor};
