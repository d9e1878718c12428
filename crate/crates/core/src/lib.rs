//! Fisheye head-pose estimation toolkit.
//!
//! * [`geometry`]: the fisheye mapping, its numerical inverse, polar coordinates.
//! * [`synthesis`]: marker rendering, canvas placement, warping, cropping, manifests.
//! * [`tensor`]: a small reverse-mode autodiff engine in double precision.
//! * [`network`]: backbone, location feature extraction, location and pose heads.
//! * [`training`]: target binning, the multi-task loss, Adam and the epoch loop.
//! * [`evaluation`]: MAE, radial error curves and ablation reports.

pub mod evaluation;
pub mod geometry;
pub mod network;
pub mod synthesis;
pub mod tensor;
pub mod training;

pub use geometry::{BoundingBox, NormalizedPoint, PolarLocation};
pub use network::{ModelConfig, ModelParams};
pub use synthesis::{EulerAngles, FisheyeSample, SourceSample};
pub use tensor::{Tape, Tensor, Var};

/// Child seed for stream `index` of a master seed (splitmix64 finalizer).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
