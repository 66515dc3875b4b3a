//! Story-to-video pipeline skeleton on a toy diffusion transformer.
//!
//! The crate covers layout planning ([`plan`]), the mapping of planned boxes
//! onto latent tokens ([`raster`]), region-routed 3D attention masks
//! ([`mask`]), region-bound low-rank adapters ([`lora`]), a small diffusion
//! transformer with exact adapter gradients ([`dit`]), motion/subject prior
//! training ([`training`]), motion-clip retrieval ([`retrieval`]) and the
//! LLM planning client ([`planner`]). [`cli`] wires them into subcommands.

pub mod cli;
pub mod dit;
pub mod lora;
pub mod mask;
pub mod plan;
pub mod planner;
pub mod raster;
pub mod retrieval;
pub mod training;
