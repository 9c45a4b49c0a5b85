//! Fully local vision-language inference: preprocessing, graph execution,
//! greedy decoding and tokenization.

pub mod engine;
pub mod graph;
pub mod preprocess;
pub mod testkit;
pub mod tokenizer;

pub use engine::{
    argmax, generate, load_model, tg_speed, BundleError, GenerateError, GenerateOptions, GenerationConfig, GenerationResult,
    ModelBundle, VlmEngine,
};
pub use graph::{DecoderGraph, EncoderGraph, EncoderOutput, GraphError, KvCache};
pub use preprocess::{preprocess, PreprocessConfig, PreprocessedImage, PromptMode};
pub use tokenizer::{BpeTokenizer, TokenId, TokenizerError};
