//! MRI to PET volume synthesis.
//!
//! A volumetric encoder-decoder generator is trained adversarially against a
//! bidirectional transformer that reads both images as integer token
//! sequences. The transformer's sequence-classification head plays the role
//! of the GAN discriminator, and its masked-token head pushes the generator
//! toward the wide, zero-heavy PET intensity distribution.
//!
//! Module map:
//!
//! * [`volume`], [`synth`]: the volume container, MRI-statistics
//!   normalization, file I/O and a seeded synthetic paired-data source.
//! * [`tokenizer`]: abs-max summarization, quantization with folding,
//!   sequence assembly and mask planning.
//! * [`generator`]: the encoder-decoder with tanhshrink output.
//! * [`bert`]: the transformer discriminator with NSP and MLM heads.
//! * [`train`]: the combined objective, optimizers and checkpoints.
//! * [`metrics`]: PSNR / SSIM / RMSE and intensity histograms.
//! * [`autograd`], [`tensor`]: the small reverse-mode engine the models run on.

pub mod autograd;
pub mod bert;
pub mod checkpoint;
pub mod cnn_d;
pub mod config;
pub mod error;
pub mod generator;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::{Float, Tensor};
pub use volume::{Modality, NormalizationStats, PairSample, Volume};
