pub mod forecaster;
pub mod imagery;
pub mod neural;
pub mod patch_grid;
pub mod patchmatch;
pub mod pipeline;
pub mod vqvae;
pub mod synthetic;
