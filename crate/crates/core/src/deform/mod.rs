//! Image deformations for building degraded datasets, and the estimators
//! used to pick their parameter ranges.

pub mod blur;
pub mod color;
pub mod illumination;
pub mod poisson;
pub mod synth;

use thiserror::Error;

use crate::image::ImageError;

pub use blur::{gaussian_blur, gaussian_kernel_1d, kernel_side};
pub use color::{
    estimate_gamma, estimate_lambda, gamma_contrast, hsv_shift, hsv_to_rgb, hsv_to_rgb_image, rgb_to_hsv,
    rgb_to_hsv_image, HsvChannel,
};
pub use illumination::{
    apply_illumination, build_illumination_model, evaluate_polynomial, fit_illumination,
    fit_illumination_with_residual, IlluminationModel,
};
pub use poisson::{
    composite_gradient_domain, composite_patch, poisson_system, CompositeMode, PoissonSolver, PoissonSystem,
};
pub use synth::{make_mirror_sample, make_noisy_luminary_sample, DistractorSpec};

#[derive(Debug, Error)]
pub enum DeformError {
    #[error("blur sigma must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("every pixel was excluded from the ratio estimate")]
    AllPixelsExcluded,
    #[error("illumination fit is rank deficient ({rank} < {needed})")]
    SingularFit { rank: usize, needed: usize },
    #[error("illumination corpus needs at least 2 images, got {0}")]
    CorpusTooSmall(usize),
    #[error("patch at ({x}, {y}) of size {w}x{h} does not fit in {width}x{height}")]
    PatchOutOfBounds {
        x: i64,
        y: i64,
        w: usize,
        h: usize,
        width: usize,
        height: usize,
    },
    #[error("no room above the station for a mirrored copy")]
    NoRoomAbove,
    #[error("could not place distractor {placed} of {count} after {attempts} attempts")]
    PlacementFailed {
        placed: usize,
        count: usize,
        attempts: usize,
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Image(#[from] ImageError),
}
