//! Cyclic image-to-video domain adaptation at desk scale.
//!
//! An image model (encoder, classifier, domain discriminator) and a video
//! model (frame encoder, temporal convolution, classifier) teach each other
//! through pseudo labels on unlabeled target videos:
//!
//! 1. class-agnostic adversarial alignment of source images and target frames,
//! 2. video model trained on thresholded, vote-aggregated frame pseudo labels,
//! 3. class-aware contrastive alignment driven by video pseudo labels,
//! 4. video model re-trained on the refreshed image pseudo labels,
//!
//! with stages 3 and 4 repeated as often as requested.

pub mod autodiff;
mod error;
pub mod losses;
pub mod models;
pub mod optim;
pub mod pipeline;
pub mod pseudolabel;
pub mod synthdata;

pub use error::{Error, Result};
