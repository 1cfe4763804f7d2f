//! Grounded chain-of-thought data curation: distill, extract targets,
//! bootstrap verified boxes, assemble GCoT, augment, and evaluate.

pub mod assembler;
pub mod bootstrap;
pub mod config;
pub mod dataset_io;
pub mod distiller;
pub mod eval;
pub mod extract;
pub mod gateway;
pub mod grounder;
pub mod model;
pub mod normalize;
pub mod pipeline;
pub mod synth;
