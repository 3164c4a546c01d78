//! Pseudo-anomaly generation: Perlin-masked texture blends in pixel space and
//! Gaussian perturbations in feature space.

mod latent;
mod perlin;
mod pixel;

pub use latent::{simulate_latent_anomaly, LatentPerturbation};
pub use perlin::PerlinField;
pub(crate) use pixel::is_image_file;
pub use pixel::{
    blend, perlin_mask, simulate_pixel_anomaly, simulate_with_seed, SyntheticAnomaly, TextureSource,
};
