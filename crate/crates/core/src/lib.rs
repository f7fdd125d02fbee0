//! Unsupervised anomaly detection for machine audio with an adversarially
//! trained autoencoder.
//!
//! Audio clips become scaled log-mel patches ([`frontend`]). A generator
//! (autoencoder) and a critic are trained together on normal patches only
//! ([`model`], [`training`]). Anomaly scores come from both the generator's
//! reconstruction residuals and the critic's embeddings ([`detection`]), are
//! evaluated with AUC and partial AUC ([`evaluation`]) and can be mapped back
//! onto the spectrogram ([`localization`]).

// `!(x > 0.0)` guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

/// Unit enums with a fixed text form used in file names and CSV columns.
macro_rules! text_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $name {
            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl std::str::FromStr for $name {
            type Err = $crate::Error;
            fn from_str(s: &str) -> $crate::Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err($crate::Error::InvalidInput(format!(
                        concat!("unknown ", stringify!($name), " '{}'"), other
                    ))),
                }
            }
        }
    };
}

pub mod config;
pub mod data;
pub mod detection;
pub mod error;
pub mod evaluation;
pub mod frontend;
pub mod localization;
pub mod model;
pub mod pipeline;
pub mod store;
pub mod training;

pub use aegan_autograd as autograd;
pub use error::{Error, Result};
