//! Volumes on disk, the synthetic generator and training patch streams.

pub mod augment;
pub mod dataset;
pub mod patches;
pub mod synth;
pub mod volume;

pub use augment::{augment, AugmentConfig, AugmentParams, Interp};
pub use dataset::Dataset;
pub use patches::{collate, Layout, Patch, PatchSampler, PatchStream, SamplerConfig, Task};
pub use synth::{synth_dataset, synth_generate, synth_volume, SynthConfig};
pub use volume::{Annotation, Volume};
