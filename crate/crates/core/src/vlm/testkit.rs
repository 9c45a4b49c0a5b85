//! Deterministic tiny random-weight model bundles.
//!
//! Used by tests, the benchmark smoke runs and the simulator when no real
//! checkpoint is configured. The same spec and seed always produce
//! byte-identical files.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::engine::{GenerationConfig, DECODER_FILE, ENCODER_FILE, GENERATION_FILE, MERGES_FILE, PREPROCESS_FILE, VOCAB_FILE};
use super::graph::{Activation, DecoderConfig, EncoderConfig, GraphArchive, GraphError, DECODER_KIND, ENCODER_KIND};
use super::preprocess::{PreprocessConfig, PromptMode};
use super::tokenizer::byte_to_char_table;

pub const TINY_VOCAB: &str = include_str!("../../assets/tiny_tokenizer/vocab.json");
pub const TINY_MERGES: &str = include_str!("../../assets/tiny_tokenizer/merges.txt");

#[derive(Debug, Clone, PartialEq)]
pub struct TinyBundleSpec {
    pub seed: u64,
    /// Keep only the first `n` merges (and the tokens they create).
    pub merges: Option<usize>,
    pub prompt_mode: PromptMode,
    pub max_new_tokens: usize,
    pub image_size: u32,
    pub patch_size: u32,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_positions: usize,
    /// Uniform init range for weight matrices.
    pub init_range: f32,
}

impl Default for TinyBundleSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            merges: None,
            prompt_mode: PromptMode::Captioning,
            max_new_tokens: 16,
            image_size: 224,
            patch_size: 32,
            hidden_size: 32,
            num_layers: 2,
            num_heads: 2,
            max_positions: 64,
            init_range: 0.35,
        }
    }
}

/// Vocabulary and merges, optionally truncated to the first `keep` merges
/// with ids renumbered densely.
pub fn tokenizer_files(keep: Option<usize>) -> (String, String) {
    let Some(keep) = keep else {
        return (TINY_VOCAB.to_string(), TINY_MERGES.to_string());
    };
    let merges: Vec<&str> = TINY_MERGES.lines().filter(|l| !l.starts_with("#version") && !l.is_empty()).take(keep).collect();
    let mut tokens: Vec<String> = vec!["<|endoftext|>".to_string()];
    tokens.extend(byte_to_char_table().iter().map(|c| c.to_string()));
    for m in &merges {
        let merged = m.replacen(' ', "", 1);
        if !tokens.contains(&merged) {
            tokens.push(merged);
        }
    }
    let vocab: serde_json::Map<String, serde_json::Value> =
        tokens.into_iter().enumerate().map(|(i, t)| (t, json!(i))).collect();
    let mut merges_txt = String::from("#version: 0.2\n");
    for m in merges {
        merges_txt.push_str(m);
        merges_txt.push('\n');
    }
    (serde_json::Value::Object(vocab).to_string(), merges_txt)
}

struct Init {
    rng: ChaCha8Rng,
    range: f32,
}

impl Init {
    fn matrix(&mut self, n: usize) -> Vec<f32> {
        let r = self.range;
        (0..n).map(|_| self.rng.gen_range(-r..r)).collect()
    }

    fn small(&mut self, n: usize) -> Vec<f32> {
        (0..n).map(|_| self.rng.gen_range(-0.05..0.05)).collect()
    }

    fn linear(&mut self, ar: &mut GraphArchive, prefix: &str, out: usize, input: usize) {
        let scale = 1.0 / (input as f32).sqrt() * 3.0;
        let w = self.matrix(out * input).into_iter().map(|x| x * scale).collect();
        ar.insert(format!("{prefix}.weight"), vec![out, input], w);
        ar.insert(format!("{prefix}.bias"), vec![out], self.small(out));
    }

    fn layer_norm(&mut self, ar: &mut GraphArchive, prefix: &str, dim: usize) {
        let w = self.small(dim).into_iter().map(|x| 1.0 + x).collect();
        ar.insert(format!("{prefix}.weight"), vec![dim], w);
        ar.insert(format!("{prefix}.bias"), vec![dim], self.small(dim));
    }
}

pub fn encoder_archive(spec: &TinyBundleSpec) -> GraphArchive {
    let cfg = EncoderConfig {
        image_size: spec.image_size,
        patch_size: spec.patch_size,
        hidden_size: spec.hidden_size,
        num_layers: spec.num_layers,
        num_heads: spec.num_heads,
        intermediate_size: 2 * spec.hidden_size,
        layer_norm_eps: 1e-12,
        activation: Activation::Gelu,
    };
    let mut init = Init { rng: ChaCha8Rng::seed_from_u64(spec.seed), range: spec.init_range };
    let mut ar = GraphArchive::new(ENCODER_KIND, serde_json::to_value(&cfg).expect("serializable"));
    let (h, p) = (cfg.hidden_size, cfg.patch_size as usize);
    init.linear(&mut ar, "embeddings.patch", h, 3 * p * p);
    ar.insert("embeddings.cls", vec![h], init.matrix(h));
    ar.insert("embeddings.position", vec![cfg.num_patches() + 1, h], init.matrix((cfg.num_patches() + 1) * h));
    for i in 0..cfg.num_layers {
        let pre = format!("layers.{i}");
        init.layer_norm(&mut ar, &format!("{pre}.ln_before"), h);
        for part in ["q", "k", "v", "out"] {
            init.linear(&mut ar, &format!("{pre}.attn.{part}"), h, h);
        }
        init.layer_norm(&mut ar, &format!("{pre}.ln_after"), h);
        init.linear(&mut ar, &format!("{pre}.mlp.fc1"), cfg.intermediate_size, h);
        init.linear(&mut ar, &format!("{pre}.mlp.fc2"), h, cfg.intermediate_size);
    }
    init.layer_norm(&mut ar, "final_ln", h);
    ar
}

pub fn decoder_archive(spec: &TinyBundleSpec, vocab_size: usize) -> GraphArchive {
    let cfg = DecoderConfig {
        vocab_size,
        max_positions: spec.max_positions,
        hidden_size: spec.hidden_size,
        num_layers: spec.num_layers,
        num_heads: spec.num_heads,
        intermediate_size: 2 * spec.hidden_size,
        encoder_hidden_size: spec.hidden_size,
        layer_norm_eps: 1e-5,
        activation: Activation::GeluTanh,
    };
    let mut init = Init { rng: ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x9e37_79b9)), range: spec.init_range };
    let mut ar = GraphArchive::new(DECODER_KIND, serde_json::to_value(&cfg).expect("serializable"));
    let (h, e) = (cfg.hidden_size, cfg.encoder_hidden_size);
    ar.insert("wte", vec![vocab_size, h], init.matrix(vocab_size * h));
    ar.insert("wpe", vec![cfg.max_positions, h], init.matrix(cfg.max_positions * h));
    for i in 0..cfg.num_layers {
        let pre = format!("layers.{i}");
        init.layer_norm(&mut ar, &format!("{pre}.ln_1"), h);
        init.linear(&mut ar, &format!("{pre}.attn.qkv"), 3 * h, h);
        init.linear(&mut ar, &format!("{pre}.attn.out"), h, h);
        init.layer_norm(&mut ar, &format!("{pre}.ln_cross"), h);
        init.linear(&mut ar, &format!("{pre}.cross.q"), h, h);
        init.linear(&mut ar, &format!("{pre}.cross.kv"), 2 * h, e);
        init.linear(&mut ar, &format!("{pre}.cross.out"), h, h);
        init.layer_norm(&mut ar, &format!("{pre}.ln_2"), h);
        init.linear(&mut ar, &format!("{pre}.mlp.fc1"), cfg.intermediate_size, h);
        init.linear(&mut ar, &format!("{pre}.mlp.fc2"), h, cfg.intermediate_size);
    }
    init.layer_norm(&mut ar, "ln_f", h);
    ar
}

/// Writes a complete model directory.
pub fn write_tiny_bundle(dir: &Path, spec: &TinyBundleSpec) -> Result<(), GraphError> {
    let io = |e: std::io::Error| GraphError::Read { path: dir.display().to_string(), message: e.to_string() };
    std::fs::create_dir_all(dir).map_err(io)?;
    let (vocab, merges) = tokenizer_files(spec.merges);
    let vocab_map: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&vocab).expect("generated vocab is JSON");
    let vocab_size = vocab_map.len();
    let eos = vocab_map["<|endoftext|>"].as_u64().expect("id") as u32;

    std::fs::write(dir.join(VOCAB_FILE), vocab).map_err(io)?;
    std::fs::write(dir.join(MERGES_FILE), merges).map_err(io)?;
    let pre = PreprocessConfig {
        target_size: spec.image_size,
        image_mean: [0.5; 3],
        image_std: [0.5; 3],
        prompt_mode: spec.prompt_mode,
    };
    let gen = GenerationConfig { eos_token_id: eos, decoder_start_token_id: eos, max_new_tokens: spec.max_new_tokens };
    let pretty = |v: serde_json::Value| serde_json::to_string_pretty(&v).expect("serializable") + "\n";
    std::fs::write(dir.join(PREPROCESS_FILE), pretty(serde_json::to_value(&pre).expect("serializable"))).map_err(io)?;
    std::fs::write(dir.join(GENERATION_FILE), pretty(serde_json::to_value(&gen).expect("serializable"))).map_err(io)?;
    encoder_archive(spec).write(&dir.join(ENCODER_FILE))?;
    decoder_archive(spec, vocab_size).write(&dir.join(DECODER_FILE))?;
    Ok(())
}
