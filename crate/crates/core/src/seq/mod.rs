//! Recurrent building blocks: LSTM layers, the acoustic encoder, the
//! prediction network and character language models.

pub mod encoder;
pub mod lm;
pub mod lstm;
pub mod prediction;

pub use encoder::{stack_and_skip, Encoder, EncoderConfig};
pub use lm::{CharLm, CharLmConfig, LmScore, LmState};
pub use lstm::{sample_dropconnect_mask, LstmLayer, LstmState};
pub use prediction::{PredictionConfig, PredictionNetwork, PredictionState};
