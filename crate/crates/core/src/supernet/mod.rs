//! The elastic backbone and its search space.

pub(crate) mod model;
mod space;

pub use model::{
    block_id, BoundParam, ElasticViT, Forward, Linear, LoraSettings, Norm, ParamGroup, Slice, Trainable, Block,
    HEAD_BITS, LN_EPS,
};
pub use space::{sample_uniform, validate_config, Operator, SearchSpace, SubnetConfig};
