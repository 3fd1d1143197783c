pub mod bench;
pub mod composer;
pub mod corpus;
pub mod metrics;
pub mod midi;
pub mod numerics;
pub mod performer;
pub mod pertok;
pub mod sampling;
pub mod training;

pub use composer::{Composer, ComposerConfig};
pub use midi::{NoteEvent, Score};
pub use performer::{Performer, PerformerConfig};
pub use pertok::{Token, TokenKind, Tokenizer, TokenizerConfig};
pub use sampling::DecodeMode;
pub use training::TrainConfig;
