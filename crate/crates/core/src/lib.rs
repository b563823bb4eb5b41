//! Joint target/opinion detection and table-filling sentiment classification
//! for aspect sentiment triplet extraction.
//!
//! A sentence is labeled twice: a sequence encoder tags targets and opinions
//! with BIO labels, and a table encoder classifies the sentiment of every
//! token pair on an N×N grid. The two encoders interact per layer — table
//! cells guide the sequence attention, sequence features are injected back
//! into the table — and decoding combines spans with aggregated cell
//! probabilities into `(target, sentiment, opinion)` triplets.

pub mod cells;
pub mod corpus;
pub mod decode;
pub mod evaluate;
pub mod model;
pub mod numerics;
pub mod train;

pub use corpus::{
    BioTag, Embeddings, Sentence, Sentiment, SentimentTable, Span, TableLabel, Triplet, Vocabulary,
};
pub use decode::Prediction;
pub use evaluate::{Evaluation, ScoreReport};
pub use model::{Model, ModelConfig};
pub use numerics::{Graph, Parameter, Precision, RunRng, Tensor};
pub use train::{Checkpoint, TrainConfig};
