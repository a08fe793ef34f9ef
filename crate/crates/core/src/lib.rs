pub mod audio;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod external;
pub mod extractors;
pub mod features;
pub mod frame_vc;
pub mod matrix;
pub mod nn;
pub mod pipelines;
pub mod seq2seq;
pub mod text;
pub mod toy;

pub use error::{Error, Result};
pub use matrix::Matrix;
