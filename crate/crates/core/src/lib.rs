pub mod affine;
pub mod bspline;
pub mod error;
pub mod imaging;
pub mod matching;
pub mod metrics;
pub mod pipeline;
pub mod synth;
pub mod transform;
