//! flowfill: pseudo-spectral 2D turbulence data generation and
//! vector-quantized flow-field completion.
//!
//! The crate covers the full pipeline:
//!
//! 1. [`solver`] integrates the forced 2D vorticity equation and samples
//!    Gaussian-random-field initial conditions.
//! 2. [`dataset`] turns solver runs into a persisted, split corpus of frames.
//! 3. [`masking`] occludes frames with square missing regions.
//! 4. [`vqvae`] defines the vector-quantized autoencoder and discriminator.
//! 5. [`training`] runs the two training stages (reconstruction, completion).
//! 6. [`evaluation`] scores completions (masked relative L2, energy spectra,
//!    vorticity distributions) and imports baseline completions from files.
//! 7. [`plot`] renders reports as figure PNGs.
//! 8. [`config`] is the one TOML document driving all of the above; the
//!    `flowfill` binary wires it to generate / train-stage1 / train-stage2 /
//!    evaluate / plot subcommands.

pub mod autodiff;
pub mod config;
pub mod container;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod fft;
pub mod masking;
pub mod percept;
pub mod plot;
pub mod solver;
pub mod training;
pub mod vqvae;

pub use error::{Error, Result};
