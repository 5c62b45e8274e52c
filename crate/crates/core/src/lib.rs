//! Angle-closure detection for anterior-segment OCT images.
//!
//! The pipeline fits the two corneal surfaces, localises the scleral spur by
//! sliding-window HOG + SVR regression along the corneal bottom boundary, and
//! classifies the angle with a three-branch convolutional network fed the
//! whole image, its left half and a spur-centred patch. A synthetic generator
//! with exact ground truth stands in for clinical data.

pub mod aca;
pub mod augment;
pub mod cornea;
mod error;
pub mod hog;
pub mod image;
pub mod manifest;
pub mod metrics;
pub mod mldn;
pub mod pipeline;
pub mod preprocess;
pub mod svr;
pub mod synth;

pub use error::{Error, Result};
pub use image::{load_image, GrayImage, PixelPoint};
