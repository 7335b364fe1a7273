//! File formats, feature extraction, dataset handling and the training
//! driver around [`eendcd_core`].

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod driver;
pub mod error;
pub mod features;
pub mod rttm;
pub mod tensor_io;
pub mod wav;

pub use error::{Error, Result};
