//! Model bundles and greedy generation with a key/value cache.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::debug;

use super::graph::{self, DecoderGraph, EncoderGraph, GraphError};
use super::preprocess::{preprocess, PreprocessConfig, PreprocessedImage, PromptMode};
use super::tokenizer::{BpeTokenizer, TokenId, TokenizerError};
use crate::capture::CroppedImage;
use crate::clock::{Clock, MonotonicClock};

pub const ENCODER_FILE: &str = "encoder_model.graph";
pub const DECODER_FILE: &str = "decoder_with_past_model.graph";
pub const VOCAB_FILE: &str = "vocab.json";
pub const MERGES_FILE: &str = "merges.txt";
pub const PREPROCESS_FILE: &str = "preprocessor_config.json";
pub const GENERATION_FILE: &str = "generation_config.json";

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("{role} absent: {path}")]
    MissingFile { role: &'static str, path: PathBuf },
    #[error("tokenizer: {0}")]
    Tokenizer(#[from] TokenizerError),
    #[error("{file}: {source}")]
    Graph { file: &'static str, source: GraphError },
    #[error("{file}: {message}")]
    Config { file: &'static str, message: String },
    #[error("bundle mismatch: {0}")]
    Mismatch(String),
}

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("encoder failed: {0}")]
    Encode(GraphError),
    #[error("decoder failed at step {step}: {source}")]
    Decode { step: usize, source: GraphError },
    #[error("generation cancelled after {steps} tokens")]
    Cancelled { steps: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub eos_token_id: TokenId,
    pub decoder_start_token_id: TokenId,
    pub max_new_tokens: usize,
}

#[derive(Debug)]
pub struct ModelBundle {
    pub dir: PathBuf,
    pub encoder: Box<dyn EncoderGraph>,
    pub decoder: Box<dyn DecoderGraph>,
    pub tokenizer: BpeTokenizer,
    pub preprocess: PreprocessConfig,
    pub generation: GenerationConfig,
}

fn required(dir: &Path, name: &str, role: &'static str) -> Result<PathBuf, BundleError> {
    let path = dir.join(name);
    if path.is_file() {
        Ok(path)
    } else {
        Err(BundleError::MissingFile { role, path })
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, file: &'static str) -> Result<T, BundleError> {
    let text = std::fs::read_to_string(path).map_err(|e| BundleError::Config { file, message: e.to_string() })?;
    serde_json::from_str(&text).map_err(|e| BundleError::Config { file, message: e.to_string() })
}

impl ModelBundle {
    /// Loads and cross-checks every file of a model directory.
    pub fn load(dir: &Path) -> Result<Self, BundleError> {
        let encoder_path = required(dir, ENCODER_FILE, "encoder_graph")?;
        let decoder_path = required(dir, DECODER_FILE, "decoder_graph")?;
        let vocab = required(dir, VOCAB_FILE, "tokenizer_files");
        let merges = required(dir, MERGES_FILE, "tokenizer_files");
        let (vocab, merges) = (vocab?, merges?);
        let pre_path = required(dir, PREPROCESS_FILE, "preprocess_config")?;
        let gen_path = required(dir, GENERATION_FILE, "generation_config")?;

        let preprocess: PreprocessConfig = read_json(&pre_path, PREPROCESS_FILE)?;
        let generation: GenerationConfig = read_json(&gen_path, GENERATION_FILE)?;
        let tokenizer = BpeTokenizer::from_files(&vocab, &merges)?;
        let encoder = graph::load_encoder(&encoder_path).map_err(|source| BundleError::Graph { file: ENCODER_FILE, source })?;
        let decoder = graph::load_decoder(&decoder_path).map_err(|source| BundleError::Graph { file: DECODER_FILE, source })?;

        if preprocess.target_size != encoder.input_size() {
            return Err(BundleError::Mismatch(format!(
                "preprocess target_size {} but encoder input is {}",
                preprocess.target_size,
                encoder.input_size()
            )));
        }
        if preprocess.image_std.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(BundleError::Config { file: PREPROCESS_FILE, message: "image_std must be > 0".into() });
        }
        if encoder.hidden_size() != decoder.encoder_hidden_size() {
            return Err(BundleError::Mismatch(format!(
                "encoder width {} but decoder cross-attends over {}",
                encoder.hidden_size(),
                decoder.encoder_hidden_size()
            )));
        }
        if tokenizer.vocab_size() > decoder.vocab_size() {
            return Err(BundleError::Mismatch(format!(
                "tokenizer has {} ids but decoder only {}",
                tokenizer.vocab_size(),
                decoder.vocab_size()
            )));
        }
        for (what, id) in [("eos_token_id", generation.eos_token_id), ("decoder_start_token_id", generation.decoder_start_token_id)] {
            if id as usize >= decoder.vocab_size() {
                return Err(BundleError::Config { file: GENERATION_FILE, message: format!("{what} {id} out of range") });
            }
        }
        Ok(Self { dir: dir.to_path_buf(), encoder, decoder, tokenizer, preprocess, generation })
    }

    pub fn preprocess(&self, img: &CroppedImage) -> PreprocessedImage {
        preprocess(img, &self.preprocess)
    }

    /// Decoder input that precedes the first generated token.
    pub fn decoder_prefix(&self, prompt: &str) -> Vec<TokenId> {
        let mut prefix = vec![self.generation.decoder_start_token_id];
        if self.preprocess.prompt_mode == PromptMode::Conditioned {
            prefix.extend(self.tokenizer.encode(prompt));
        }
        prefix
    }
}

/// Loads a bundle and reports how long it took, kept apart from inference.
pub fn load_model(dir: &Path, clock: &dyn Clock) -> Result<(ModelBundle, f64), BundleError> {
    let start = clock.now();
    let bundle = ModelBundle::load(dir)?;
    Ok((bundle, clock.now() - start))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    /// Generated ids, without the prefix and without the end-of-sequence id.
    pub token_ids: Vec<TokenId>,
    pub text: String,
    pub prompt: String,
    pub prompt_conditioned: bool,
    pub encode_time: f64,
    pub decode_time: f64,
    /// Whole call, including detokenization.
    pub inference_time: f64,
    pub tokens_generated: usize,
    pub tg_speed: f64,
}

/// Tokens per second of the decode phase; zero when nothing was generated.
pub fn tg_speed(tokens: usize, decode_time: f64) -> f64 {
    if tokens == 0 || decode_time <= 0.0 {
        0.0
    } else {
        tokens as f64 / decode_time
    }
}

/// Index of the largest logit; ties go to the lowest id.
pub fn argmax(logits: &[f32]) -> TokenId {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] || (logits[best].is_nan() && !v.is_nan()) {
            best = i;
        }
    }
    best as TokenId
}

#[derive(Default)]
pub struct GenerateOptions<'a> {
    pub cancel: Option<&'a AtomicBool>,
    pub on_token: Option<&'a mut dyn FnMut(TokenId, &str)>,
}

/// Greedy encoder-decoder generation.
///
/// The encoder runs once; the decoder is fed the prefix, then one token per
/// step together with the cache. Reads the clock exactly four times: start,
/// after encoding, after the decode loop, and at the end.
pub fn generate(
    bundle: &ModelBundle,
    image: &PreprocessedImage,
    prompt: &str,
    max_new_tokens: usize,
    clock: &dyn Clock,
    mut opts: GenerateOptions<'_>,
) -> Result<GenerationResult, GenerateError> {
    let t_start = clock.now();
    let encoded = bundle.encoder.run(image).map_err(GenerateError::Encode)?;
    let t_encoded = clock.now();

    let eos = bundle.generation.eos_token_id;
    let mut tokens = Vec::new();
    if max_new_tokens > 0 {
        let mut cache = bundle.decoder.init_cache(&encoded).map_err(|source| GenerateError::Decode { step: 0, source })?;
        let prefix = bundle.decoder_prefix(prompt);
        let mut logits = bundle.decoder.run(&prefix, &mut cache).map_err(|source| GenerateError::Decode { step: 0, source })?;
        loop {
            let next = argmax(&logits);
            if next == eos {
                break;
            }
            tokens.push(next);
            if let Some(cb) = opts.on_token.as_mut() {
                cb(next, &bundle.tokenizer.decode_token(next));
            }
            if tokens.len() >= max_new_tokens {
                break;
            }
            if opts.cancel.is_some_and(|c| c.load(Ordering::Relaxed)) {
                return Err(GenerateError::Cancelled { steps: tokens.len() });
            }
            let step = tokens.len();
            logits = bundle.decoder.run(&[next], &mut cache).map_err(|source| GenerateError::Decode { step, source })?;
            debug_assert_eq!(cache.sequence_length, prefix.len() + step);
        }
    }
    let t_decoded = clock.now();
    let text = bundle.tokenizer.decode(&tokens, true);
    let t_end = clock.now();

    let decode_time = t_decoded - t_encoded;
    debug!(tokens = tokens.len(), decode_time, "generation finished");
    Ok(GenerationResult {
        tokens_generated: tokens.len(),
        tg_speed: tg_speed(tokens.len(), decode_time),
        token_ids: tokens,
        text,
        prompt: prompt.to_string(),
        prompt_conditioned: bundle.preprocess.prompt_mode == PromptMode::Conditioned,
        encode_time: t_encoded - t_start,
        decode_time,
        inference_time: t_end - t_start,
    })
}

/// Owns the active bundle. Swapping replaces it in place; a failed swap
/// keeps the previous bundle.
pub struct VlmEngine {
    bundle: Arc<ModelBundle>,
    clock: Arc<dyn Clock>,
    max_new_tokens: Option<usize>,
}

impl std::fmt::Debug for VlmEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VlmEngine").field("model", &self.bundle.dir).finish()
    }
}

impl VlmEngine {
    pub fn load(dir: &Path) -> Result<(Self, f64), BundleError> {
        Self::load_with_clock(dir, Arc::new(MonotonicClock::new()))
    }

    pub fn load_with_clock(dir: &Path, clock: Arc<dyn Clock>) -> Result<(Self, f64), BundleError> {
        let (bundle, load_time) = load_model(dir, clock.as_ref())?;
        Ok((Self { bundle: Arc::new(bundle), clock, max_new_tokens: None }, load_time))
    }

    pub fn from_bundle(bundle: ModelBundle, clock: Arc<dyn Clock>) -> Self {
        Self { bundle: Arc::new(bundle), clock, max_new_tokens: None }
    }

    pub fn bundle(&self) -> &ModelBundle {
        &self.bundle
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    /// Overrides the bundle's `max_new_tokens`.
    pub fn set_max_new_tokens(&mut self, n: Option<usize>) {
        self.max_new_tokens = n;
    }

    pub fn max_new_tokens(&self) -> usize {
        self.max_new_tokens.unwrap_or(self.bundle.generation.max_new_tokens)
    }

    /// Replaces the bundle without restarting; returns the load time.
    pub fn swap_model(&mut self, dir: &Path) -> Result<f64, BundleError> {
        let (bundle, load_time) = load_model(dir, self.clock.as_ref())?;
        self.bundle = Arc::new(bundle);
        Ok(load_time)
    }

    pub fn generate(
        &mut self,
        image: &PreprocessedImage,
        prompt: &str,
        opts: GenerateOptions<'_>,
    ) -> Result<GenerationResult, GenerateError> {
        let max_new = self.max_new_tokens();
        generate(&self.bundle, image, prompt, max_new, self.clock.as_ref(), opts)
    }

    /// Preprocesses a crop and answers a prompt about it.
    pub fn answer(&mut self, crop: &CroppedImage, prompt: &str, opts: GenerateOptions<'_>) -> Result<(PreprocessedImage, GenerationResult), GenerateError> {
        let image = self.bundle.preprocess(crop);
        let result = self.generate(&image, prompt, opts)?;
        Ok((image, result))
    }
}
