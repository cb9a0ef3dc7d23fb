//! Scene editing, splat and mesh rendering, training-pair construction, a
//! toy conditional diffusion pipeline and benchmark metrics for controllable
//! driving simulation.

pub mod diffusion;
pub mod edit;
pub mod fixtures;
pub mod geometry;
pub mod meshalign;
pub mod metrics;
pub mod raster;
pub mod scene;
pub mod splatfit;
