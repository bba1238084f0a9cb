//! Decides whether an image was produced by the decoder of a specific latent
//! generative model.
//!
//! The decision inverts the decoder by gradient descent on its input, starting from
//! the encoder's projection of the image, and compares the best reconstruction loss
//! against a Grubbs-test threshold fitted offline on the model's own outputs.
//!
//! ```no_run
//! use latent_origin::prelude::*;
//!
//! let data = synthetic_images([3, 32, 32], 2_000, 1)?;
//! let (model, _) = train_autoencoder(&data, &ConvSpec::vae([3, 32, 32]), &TrainingConfig::default())?;
//! let profile = calibrate_model(&model, &CalibrationOptions::default(), &InversionConfig::encoder())?;
//! let x = model.sample_belongings(1, 99)?.remove(0);
//! assert_eq!(attribute_image(&profile, &model, &x)?.label, Label::Belonging);
//! # Ok::<(), latent_origin::Error>(())
//! ```

pub mod attribution;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod inversion;
pub mod nn;
pub mod stats;
pub mod store;
pub mod tensor;
pub mod zoo;

pub use error::{Error, Result};

pub mod prelude {
    pub use crate::attribution::{
        attribute_image, batch_attribute, calibrate_model, calibrate_on_belongings,
        CalibrationOptions, CalibrationProfile,
        Label, Verdict,
    };
    pub use crate::error::{Error, Result};
    pub use crate::inversion::{
        convergence_step, initialize_latent, invert_latent, invert_latent_with_truth,
        reconstruction_loss, InitMode, InversionConfig, InversionResult, StopRule,
    };
    pub use crate::stats::{
        critical_value, grubbs_threshold, regularized_incomplete_beta, student_t_cdf,
        student_t_pdf, CalibrationSummary,
    };
    pub use crate::tensor::{ImageTensor, LatentTensor, Shape};
    pub use crate::zoo::data::{load_png_folder, synthetic_images};
    pub use crate::zoo::{
        train_autoencoder, Autoencoder, AutoencoderKind, BelongingSource, Checkpoint, Codebook,
        ConvSpec, TrainingConfig, TrainingReport,
    };
}
