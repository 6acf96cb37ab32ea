//! Training small convolutional networks under explanatory supervision.
//!
//! The crate bundles a reverse-mode autodiff engine with higher-order
//! gradients ([`tensor`]), a CNN toolkit ([`nn`]), the decoy contamination
//! protocol ([`contaminate`]), the activation and input-gradient penalties
//! ([`xsloss`]), teacher-generated annotations ([`teacher`]), evaluation
//! ([`eval`]) and end-to-end experiment recipes ([`experiment`]).

pub mod contaminate;
pub mod data;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod nn;
pub mod teacher;
pub mod tensor;
pub mod xsloss;

use std::path::PathBuf;

pub use data::{Batch, Dataset, LabeledImage, Origin};
pub use nn::{Model, ModelSpec, SgdConfig};
pub use tensor::{Array, Graph, Tensor, TensorError};
pub use xsloss::{XsConfig, XsMethod};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parse error at byte {offset}: {detail}")]
    Parse { offset: usize, detail: String },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: usize },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! invalid {
    ($($arg:tt)*) => { $crate::Error::Invalid(format!($($arg)*)) };
}
pub(crate) use invalid;
