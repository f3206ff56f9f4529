//! Long-term recurrent convolutional sequence models.
//!
//! A feature extractor maps each frame (or a single image) to a vector, a
//! stack of RNN or LSTM cells models the sequence, and a linear softmax layer
//! predicts a label or the next word. The crate covers sequence
//! classification with late fusion, image captioning (one layer, two layers,
//! and the factored two-layer stack), encoder-decoder sequence mapping and
//! per-step conditioned decoding, trained end to end with SGD and
//! backpropagation through time.
//!
//! Decoding (greedy, beam, best-of-N sampling), metrics (BLEU, retrieval
//! recall/median rank, clip-protocol accuracy, two-stream fusion) and the
//! file formats used by the `lrcn` command-line tool live here as well.

pub mod cells;
pub mod decode;
pub mod error;
pub mod eval;
pub mod features;
pub mod io;
pub mod model;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use cells::{Cell, CellKind, GateActivations, LstmCellParams, RecurrentState, RnnCellParams};
pub use decode::{DecodeConfig, Hypothesis, Strategy};
pub use error::{Error, Result};
pub use features::{ExtractorKind, FeatureExtractor, FeatureExtractorSpec};
pub use model::{CaptionVariant, Example, Input, Lrcn, ModelSpec, Target, Task};
pub use tensor::Tensor;
pub use train::{LossReport, TrainConfig};
pub use vocab::Vocabulary;
