//! Multi-planar CNN segmentation of volumetric images.
//!
//! A 3D scan is decomposed into axial, coronal, and sagittal slice stacks;
//! one 2D encoder-decoder network per plane labels every pixel; the three
//! per-plane probability volumes are then combined by an adaptive fusion
//! step that weights each plane per class by the reliability of its
//! connected components. The crate also ships the preprocessing
//! (edge-preserving diffusion, histogram matching), Table-style data
//! augmentation, a five-metric evaluation suite, synthetic phantoms for
//! desk-scale experiments, and the pipeline orchestration used by the
//! `mpseg` command-line tool.

pub mod augment;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod network;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};

pub(crate) mod util {
    /// SplitMix64 step; used to derive independent stream seeds from a base
    /// seed so parallel work stays reproducible.
    pub fn derive_seed(base: u64, stream: u64) -> u64 {
        let mut z = base
            .wrapping_add(0x9e3779b97f4a7c15)
            .wrapping_add(stream.wrapping_mul(0xbf58476d1ce4e5b9));
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

}
