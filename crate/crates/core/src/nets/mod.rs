//! Graph builders for the 2D and hybrid 3D networks.

pub mod ahnet;
pub mod backbone;
pub mod builder;
pub mod config;
pub mod graph;
pub mod mcgcn;

pub use ahnet::build_ahnet;
pub use backbone::Geometry;
pub use config::{NetConfig, Preset, ZPooling};
pub use graph::{Layer, LayerKind, ModelGraph, Mode, ParamStore, Part};
pub use mcgcn::build_mcgcn;
