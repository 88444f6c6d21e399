//! Contrast-aware MRI representation learning from acquisition metadata.
//!
//! The pipeline: parse acquisition parameters from DICOM files or a JSON
//! manifest ([`dicom`]), group acquisitions into contrast classes by quantized
//! numerics and categorical combinations ([`grouping`]), render metadata as
//! deterministic sentences ([`templating`]), and train a 3D image encoder and
//! a text encoder ([`encoders`]) with a symmetric multi-positive contrastive
//! loss ([`loss`]) on a simulated phantom corpus ([`phantom`]). The shared
//! embedding space backs exact retrieval ([`store`]), linear-probe and
//! few-shot evaluation ([`eval`]), and unsupervised metadata quality control
//! ([`qc`]).
//!
//! All training runs on a small tape-based autodiff engine ([`tensor`]) with
//! no external ML framework.

pub mod dicom;
pub mod encoders;
pub mod eval;
pub mod grouping;
pub mod loss;
pub mod phantom;
pub mod qc;
pub mod store;
pub mod templating;
pub mod tensor;
pub mod trainer;
mod util;
pub mod volume;

/// Tool version string recorded in every stage output.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
