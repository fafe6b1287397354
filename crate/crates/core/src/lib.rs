//! Desk-scale dynamic emission tomography toolkit.
//!
//! The crate simulates a dynamic 2D scan of a digital head phantom, builds
//! sparse row-stochastic kernel matrices from composite-frame prior images
//! (either empirically from pixel intensities or through a small trainable
//! convolutional feature extractor), and reconstructs every time frame with
//! ML-EM or kernelized EM.
//!
//! Modules follow the processing chain:
//!
//! * [`imaging`] — phantom geometry, time-activity curves, frame integration
//! * [`projector`] — parallel-beam system model, count scaling, Poisson sampling
//! * [`kernel`] — kNN graphs, Gaussian similarity, softmax-normalized sparse kernels
//! * [`recon`] — ML-EM / kernelized-EM iterations and composite rebinning
//! * [`deepkernel`] — trainable feature network, denoising-autoencoder loss,
//!   analytic gradients, count thinning, training loop
//! * [`experiments`] — config parsing, file formats, metrics, pipeline driver
//!
//! All heavy loops are data-parallel over rays, pixels or sinogram elements.
//! With the default `parallel` feature they run on rayon; without it they run
//! sequentially. Results are identical either way: every output slot is
//! produced by exactly one task and all reductions have a fixed order.

pub mod error;
pub(crate) mod par;

pub mod image;
pub mod imaging;
pub mod projector;
pub mod kernel;
pub mod recon;
pub mod deepkernel;
pub mod experiments;

pub use error::{Error, Result};
pub use image::Image2D;
