//! The multiview fusion transformer: input projection, multiview blocks with
//! per-view memory, learned latent pooling and a normalized output head.

mod forward;
mod params;
#[cfg(test)]
mod reference;

pub use forward::{
    attention, block_forward, fuse, fuse_batch, fuse_many, latent_pooling, project_in,
    stack_views, AttnVars, LayoutMasks, ParamVars, ViewLayout,
};
pub use params::{InitConfig, ModelConfig, Parameters};
