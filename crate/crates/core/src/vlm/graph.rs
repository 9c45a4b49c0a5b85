//! Serialized encoder and decoder-with-past graphs and their CPU runtime.
//!
//! A graph file is a safetensors archive. Its metadata names the graph kind
//! (`vit_encoder` or `gpt2_decoder_with_past`) and carries the layer
//! hyper-parameters as JSON; the tensors are float32 weights. The layer
//! layout follows the ViT image encoder and the GPT-2 decoder with
//! cross-attention, so converted checkpoints run unchanged.
//!
//! Every kernel processes one token row at a time in a fixed summation
//! order. Running the decoder over a whole prefix without a cache therefore
//! produces bit-identical logits to running it token by token with one.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::preprocess::PreprocessedImage;
use super::tokenizer::TokenId;

pub const GRAPH_FORMAT: &str = "lookask-graph/1";
pub const ENCODER_KIND: &str = "vit_encoder";
pub const DECODER_KIND: &str = "gpt2_decoder_with_past";

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("cannot read graph {path}: {message}")]
    Read { path: String, message: String },
    #[error("invalid graph file: {0}")]
    Format(String),
    #[error("tensor {name}: {message}")]
    Tensor { name: String, message: String },
    #[error("input shape mismatch: {0}")]
    Shape(String),
    #[error("position {position} exceeds the decoder's {max} positions")]
    PositionOverflow { position: usize, max: usize },
    #[error("token id {0} outside the decoder vocabulary")]
    TokenOutOfRange(TokenId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Exact erf-based GELU.
    Gelu,
    /// Tanh approximation used by GPT-2 (`gelu_new`).
    GeluTanh,
}

impl Activation {
    fn apply(self, xs: &mut [f32]) {
        match self {
            Activation::Gelu => {
                for x in xs {
                    *x = 0.5 * *x * (1.0 + libm::erff(*x / std::f32::consts::SQRT_2));
                }
            }
            Activation::GeluTanh => {
                const C: f32 = 0.797_884_6; // sqrt(2/pi)
                for x in xs {
                    *x = 0.5 * *x * (1.0 + (C * (*x + 0.044715 * *x * *x * *x)).tanh());
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: u32,
    pub patch_size: u32,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub intermediate_size: usize,
    pub layer_norm_eps: f32,
    pub activation: Activation,
}

impl EncoderConfig {
    pub fn num_patches(&self) -> usize {
        let side = (self.image_size / self.patch_size) as usize;
        side * side
    }

    fn validate(&self) -> Result<(), GraphError> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(GraphError::Format(format!(
                "image_size {} is not a multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.num_heads == 0 || self.hidden_size % self.num_heads != 0 {
            return Err(GraphError::Format("hidden_size must be divisible by num_heads".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub max_positions: usize,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub intermediate_size: usize,
    pub encoder_hidden_size: usize,
    pub layer_norm_eps: f32,
    pub activation: Activation,
}

impl DecoderConfig {
    fn validate(&self) -> Result<(), GraphError> {
        if self.num_heads == 0 || self.hidden_size % self.num_heads != 0 {
            return Err(GraphError::Format("hidden_size must be divisible by num_heads".into()));
        }
        Ok(())
    }
}

/// Rewrites the JSON header with sorted keys so equal archives serialize to
/// equal bytes; the metadata map would otherwise follow hash order.
fn canonical_header(bytes: Vec<u8>) -> Result<Vec<u8>, GraphError> {
    fn sorted(v: serde_json::Value) -> serde_json::Value {
        match v {
            serde_json::Value::Object(map) => {
                let ordered: std::collections::BTreeMap<_, _> = map.into_iter().map(|(k, v)| (k, sorted(v))).collect();
                serde_json::Value::Object(ordered.into_iter().collect())
            }
            other => other,
        }
    }
    let bad = |m: &str| GraphError::Format(m.to_string());
    let len = u64::from_le_bytes(bytes.get(..8).ok_or_else(|| bad("short archive"))?.try_into().unwrap()) as usize;
    let header = bytes.get(8..8 + len).ok_or_else(|| bad("short header"))?;
    let value: serde_json::Value = serde_json::from_slice(header).map_err(|e| bad(&e.to_string()))?;
    let mut text = serde_json::to_string(&sorted(value)).map_err(|e| bad(&e.to_string()))?;
    while text.len() % 8 != 0 {
        text.push(' ');
    }
    let mut out = Vec::with_capacity(bytes.len());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&bytes[8 + len..]);
    Ok(out)
}

/// Named float32 tensors plus graph metadata, as stored on disk.
#[derive(Debug, Clone, Default)]
pub struct GraphArchive {
    pub kind: String,
    pub config: serde_json::Value,
    pub tensors: HashMap<String, (Vec<usize>, Vec<f32>)>,
}

impl GraphArchive {
    pub fn new(kind: &str, config: serde_json::Value) -> Self {
        Self { kind: kind.to_string(), config, tensors: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.insert(name.into(), (shape, data));
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, GraphError> {
        let raw: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .tensors
            .iter()
            .map(|(name, (shape, data))| {
                (name.clone(), shape.clone(), data.iter().flat_map(|x| x.to_le_bytes()).collect())
            })
            .collect();
        let views = raw
            .iter()
            .map(|(name, shape, bytes)| {
                TensorView::new(Dtype::F32, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| GraphError::Tensor { name: name.clone(), message: e.to_string() })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let meta = HashMap::from([
            ("format".to_string(), GRAPH_FORMAT.to_string()),
            ("graph".to_string(), self.kind.clone()),
            ("config".to_string(), self.config.to_string()),
        ]);
        let bytes = safetensors::serialize(views, &Some(meta)).map_err(|e| GraphError::Format(e.to_string()))?;
        canonical_header(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GraphError> {
        let st = SafeTensors::deserialize(bytes).map_err(|e| GraphError::Format(e.to_string()))?;
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| GraphError::Format(e.to_string()))?;
        let meta = header.metadata().clone().unwrap_or_default();
        match meta.get("format").map(String::as_str) {
            Some(GRAPH_FORMAT) => {}
            other => return Err(GraphError::Format(format!("unsupported graph format {other:?}"))),
        }
        let kind = meta.get("graph").cloned().ok_or_else(|| GraphError::Format("missing graph kind".into()))?;
        let config = serde_json::from_str(meta.get("config").map(String::as_str).unwrap_or("null"))
            .map_err(|e| GraphError::Format(format!("config: {e}")))?;
        let mut tensors = HashMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(GraphError::Tensor { name, message: format!("dtype {:?}, expected F32", view.dtype()) });
            }
            let data = view.data().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.insert(name, (view.shape().to_vec(), data));
        }
        Ok(Self { kind, config, tensors })
    }

    pub fn read(path: &Path) -> Result<Self, GraphError> {
        let bytes = std::fs::read(path).map_err(|e| GraphError::Read { path: path.display().to_string(), message: e.to_string() })?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<(), GraphError> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| GraphError::Read { path: path.display().to_string(), message: e.to_string() })
    }

    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f32>, GraphError> {
        let (got, data) = self
            .tensors
            .remove(name)
            .ok_or_else(|| GraphError::Tensor { name: name.into(), message: "missing".into() })?;
        if got != shape {
            return Err(GraphError::Tensor { name: name.into(), message: format!("shape {got:?}, expected {shape:?}") });
        }
        Ok(data)
    }

    fn config_as<T: for<'de> Deserialize<'de>>(&self) -> Result<T, GraphError> {
        serde_json::from_value(self.config.clone()).map_err(|e| GraphError::Format(format!("config: {e}")))
    }
}

// ---- kernels ------------------------------------------------------------

#[derive(Debug, Clone)]
struct Linear {
    weight: Vec<f32>, // [out, in]
    bias: Vec<f32>,
    input: usize,
}

impl Linear {
    fn load(ar: &mut GraphArchive, prefix: &str, output: usize, input: usize) -> Result<Self, GraphError> {
        Ok(Self {
            weight: ar.take(&format!("{prefix}.weight"), &[output, input])?,
            bias: ar.take(&format!("{prefix}.bias"), &[output])?,
            input,
        })
    }

    fn forward(&self, x: &[f32]) -> Vec<f32> {
        debug_assert_eq!(x.len(), self.input);
        self.weight
            .chunks_exact(self.input)
            .zip(&self.bias)
            .map(|(row, b)| dot(row, x) + b)
            .collect()
    }
}

#[derive(Debug, Clone)]
struct LayerNorm {
    weight: Vec<f32>,
    bias: Vec<f32>,
    eps: f32,
}

impl LayerNorm {
    fn load(ar: &mut GraphArchive, prefix: &str, dim: usize, eps: f32) -> Result<Self, GraphError> {
        Ok(Self {
            weight: ar.take(&format!("{prefix}.weight"), &[dim])?,
            bias: ar.take(&format!("{prefix}.bias"), &[dim])?,
            eps,
        })
    }

    fn forward(&self, x: &[f32]) -> Vec<f32> {
        let n = x.len() as f32;
        let mean = x.iter().sum::<f32>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
        let inv = 1.0 / (var + self.eps).sqrt();
        x.iter()
            .zip(self.weight.iter().zip(&self.bias))
            .map(|(v, (w, b))| (v - mean) * inv * w + b)
            .collect()
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_in_place(x: &mut [f32], y: &[f32]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

/// Multi-head attention of one query row over `n` key/value rows stored
/// contiguously (`keys[j*dim..(j+1)*dim]`).
fn attend(query: &[f32], keys: &[f32], values: &[f32], n: usize, heads: usize) -> Vec<f32> {
    let dim = query.len();
    let hd = dim / heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut out = vec![0f32; dim];
    let mut scores = vec![0f32; n];
    for h in 0..heads {
        let q = &query[h * hd..(h + 1) * hd];
        for (j, s) in scores.iter_mut().enumerate() {
            *s = dot(q, &keys[j * dim + h * hd..j * dim + (h + 1) * hd]) * scale;
        }
        let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0f32;
        for s in &mut scores {
            *s = (*s - max).exp();
            sum += *s;
        }
        let o = &mut out[h * hd..(h + 1) * hd];
        for (j, s) in scores.iter().enumerate() {
            let p = s / sum;
            let v = &values[j * dim + h * hd..j * dim + (h + 1) * hd];
            for (acc, vv) in o.iter_mut().zip(v) {
                *acc += p * vv;
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
struct Mlp {
    fc1: Linear,
    fc2: Linear,
    act: Activation,
}

impl Mlp {
    fn load(ar: &mut GraphArchive, prefix: &str, hidden: usize, inner: usize, act: Activation) -> Result<Self, GraphError> {
        Ok(Self {
            fc1: Linear::load(ar, &format!("{prefix}.fc1"), inner, hidden)?,
            fc2: Linear::load(ar, &format!("{prefix}.fc2"), hidden, inner)?,
            act,
        })
    }

    fn forward(&self, x: &[f32]) -> Vec<f32> {
        let mut h = self.fc1.forward(x);
        self.act.apply(&mut h);
        self.fc2.forward(&h)
    }
}

// ---- encoder ------------------------------------------------------------

/// Encoder output: `seq_len` rows of `hidden_size` floats.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub hidden: Vec<f32>,
    pub seq_len: usize,
    pub hidden_size: usize,
}

pub trait EncoderGraph: Send + Sync + std::fmt::Debug {
    fn input_size(&self) -> u32;
    fn hidden_size(&self) -> usize;
    fn run(&self, image: &PreprocessedImage) -> Result<EncoderOutput, GraphError>;
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln_before: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    ln_after: LayerNorm,
    mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct VitEncoder {
    cfg: EncoderConfig,
    patch: Linear,
    cls: Vec<f32>,
    position: Vec<f32>,
    layers: Vec<EncoderLayer>,
    final_ln: LayerNorm,
}

impl VitEncoder {
    pub fn from_archive(mut ar: GraphArchive) -> Result<Self, GraphError> {
        if ar.kind != ENCODER_KIND {
            return Err(GraphError::Format(format!("expected {ENCODER_KIND} graph, found {}", ar.kind)));
        }
        let cfg: EncoderConfig = ar.config_as()?;
        cfg.validate()?;
        let (h, p) = (cfg.hidden_size, cfg.patch_size as usize);
        let eps = cfg.layer_norm_eps;
        let patch = Linear::load(&mut ar, "embeddings.patch", h, 3 * p * p)?;
        let cls = ar.take("embeddings.cls", &[h])?;
        let position = ar.take("embeddings.position", &[cfg.num_patches() + 1, h])?;
        let layers = (0..cfg.num_layers)
            .map(|i| {
                let pre = format!("layers.{i}");
                Ok(EncoderLayer {
                    ln_before: LayerNorm::load(&mut ar, &format!("{pre}.ln_before"), h, eps)?,
                    q: Linear::load(&mut ar, &format!("{pre}.attn.q"), h, h)?,
                    k: Linear::load(&mut ar, &format!("{pre}.attn.k"), h, h)?,
                    v: Linear::load(&mut ar, &format!("{pre}.attn.v"), h, h)?,
                    out: Linear::load(&mut ar, &format!("{pre}.attn.out"), h, h)?,
                    ln_after: LayerNorm::load(&mut ar, &format!("{pre}.ln_after"), h, eps)?,
                    mlp: Mlp::load(&mut ar, &format!("{pre}.mlp"), h, cfg.intermediate_size, cfg.activation)?,
                })
            })
            .collect::<Result<_, GraphError>>()?;
        let final_ln = LayerNorm::load(&mut ar, "final_ln", h, eps)?;
        Ok(Self { cfg, patch, cls, position, layers, final_ln })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Patch vector in (channel, row, col) order, matching a conv kernel
    /// of shape `[hidden, 3, p, p]` flattened.
    fn patch_vector(&self, image: &PreprocessedImage, gy: usize, gx: usize) -> Vec<f32> {
        let p = self.cfg.patch_size as usize;
        let size = image.size as usize;
        let mut v = Vec::with_capacity(3 * p * p);
        for c in 0..3 {
            let plane = image.channel(c);
            for py in 0..p {
                let row = (gy * p + py) * size + gx * p;
                v.extend_from_slice(&plane[row..row + p]);
            }
        }
        v
    }
}

impl EncoderGraph for VitEncoder {
    fn input_size(&self) -> u32 {
        self.cfg.image_size
    }

    fn hidden_size(&self) -> usize {
        self.cfg.hidden_size
    }

    fn run(&self, image: &PreprocessedImage) -> Result<EncoderOutput, GraphError> {
        if image.size != self.cfg.image_size || image.data.len() != 3 * (image.size * image.size) as usize {
            return Err(GraphError::Shape(format!(
                "encoder expects 3x{0}x{0}, got 3x{1}x{1}",
                self.cfg.image_size, image.size
            )));
        }
        let h = self.cfg.hidden_size;
        let side = (self.cfg.image_size / self.cfg.patch_size) as usize;
        let seq = side * side + 1;
        let mut x: Vec<Vec<f32>> = Vec::with_capacity(seq);
        x.push(self.cls.clone());
        for gy in 0..side {
            for gx in 0..side {
                x.push(self.patch.forward(&self.patch_vector(image, gy, gx)));
            }
        }
        for (row, pos) in x.iter_mut().zip(self.position.chunks_exact(h)) {
            add_in_place(row, pos);
        }

        for layer in &self.layers {
            let normed: Vec<Vec<f32>> = x.iter().map(|r| layer.ln_before.forward(r)).collect();
            let keys: Vec<f32> = normed.iter().flat_map(|r| layer.k.forward(r)).collect();
            let values: Vec<f32> = normed.iter().flat_map(|r| layer.v.forward(r)).collect();
            for (row, n) in x.iter_mut().zip(&normed) {
                let q = layer.q.forward(n);
                let a = layer.out.forward(&attend(&q, &keys, &values, seq, self.cfg.num_heads));
                add_in_place(row, &a);
            }
            for row in x.iter_mut() {
                let m = layer.mlp.forward(&layer.ln_after.forward(row));
                add_in_place(row, &m);
            }
        }
        let hidden = x.iter().flat_map(|r| self.final_ln.forward(r)).collect();
        Ok(EncoderOutput { hidden, seq_len: seq, hidden_size: h })
    }
}

// ---- decoder ------------------------------------------------------------

/// Past self-attention keys/values per layer, plus the cross-attention
/// keys/values derived once from the encoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    pub self_keys: Vec<Vec<f32>>,
    pub self_values: Vec<Vec<f32>>,
    pub cross_keys: Vec<Vec<f32>>,
    pub cross_values: Vec<Vec<f32>>,
    pub encoder_len: usize,
    pub sequence_length: usize,
    pub hidden_size: usize,
}

impl KvCache {
    pub fn num_layers(&self) -> usize {
        self.self_keys.len()
    }
}

pub trait DecoderGraph: Send + Sync + std::fmt::Debug {
    fn vocab_size(&self) -> usize;
    fn encoder_hidden_size(&self) -> usize;
    fn max_positions(&self) -> usize;
    /// Fresh cache for one generation, holding the cross-attention state.
    fn init_cache(&self, encoder: &EncoderOutput) -> Result<KvCache, GraphError>;
    /// Feeds `ids` after the cached prefix and returns the logits of the
    /// last fed position. The cache grows by `ids.len()` positions.
    fn run(&self, ids: &[TokenId], cache: &mut KvCache) -> Result<Vec<f32>, GraphError>;
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    ln_1: LayerNorm,
    qkv: Linear,
    attn_out: Linear,
    ln_cross: LayerNorm,
    cross_q: Linear,
    cross_kv: Linear,
    cross_out: Linear,
    ln_2: LayerNorm,
    mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct Gpt2Decoder {
    cfg: DecoderConfig,
    wte: Vec<f32>,
    wpe: Vec<f32>,
    layers: Vec<DecoderLayer>,
    ln_f: LayerNorm,
}

impl Gpt2Decoder {
    pub fn from_archive(mut ar: GraphArchive) -> Result<Self, GraphError> {
        if ar.kind != DECODER_KIND {
            return Err(GraphError::Format(format!("expected {DECODER_KIND} graph, found {}", ar.kind)));
        }
        let cfg: DecoderConfig = ar.config_as()?;
        cfg.validate()?;
        let (h, e, eps) = (cfg.hidden_size, cfg.encoder_hidden_size, cfg.layer_norm_eps);
        let wte = ar.take("wte", &[cfg.vocab_size, h])?;
        let wpe = ar.take("wpe", &[cfg.max_positions, h])?;
        let layers = (0..cfg.num_layers)
            .map(|i| {
                let pre = format!("layers.{i}");
                Ok(DecoderLayer {
                    ln_1: LayerNorm::load(&mut ar, &format!("{pre}.ln_1"), h, eps)?,
                    qkv: Linear::load(&mut ar, &format!("{pre}.attn.qkv"), 3 * h, h)?,
                    attn_out: Linear::load(&mut ar, &format!("{pre}.attn.out"), h, h)?,
                    ln_cross: LayerNorm::load(&mut ar, &format!("{pre}.ln_cross"), h, eps)?,
                    cross_q: Linear::load(&mut ar, &format!("{pre}.cross.q"), h, h)?,
                    cross_kv: Linear::load(&mut ar, &format!("{pre}.cross.kv"), 2 * h, e)?,
                    cross_out: Linear::load(&mut ar, &format!("{pre}.cross.out"), h, h)?,
                    ln_2: LayerNorm::load(&mut ar, &format!("{pre}.ln_2"), h, eps)?,
                    mlp: Mlp::load(&mut ar, &format!("{pre}.mlp"), h, cfg.intermediate_size, cfg.activation)?,
                })
            })
            .collect::<Result<_, GraphError>>()?;
        let ln_f = LayerNorm::load(&mut ar, "ln_f", h, eps)?;
        Ok(Self { cfg, wte, wpe, layers, ln_f })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }
}

impl DecoderGraph for Gpt2Decoder {
    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    fn encoder_hidden_size(&self) -> usize {
        self.cfg.encoder_hidden_size
    }

    fn max_positions(&self) -> usize {
        self.cfg.max_positions
    }

    fn init_cache(&self, encoder: &EncoderOutput) -> Result<KvCache, GraphError> {
        if encoder.hidden_size != self.cfg.encoder_hidden_size {
            return Err(GraphError::Shape(format!(
                "decoder expects encoder width {}, got {}",
                self.cfg.encoder_hidden_size, encoder.hidden_size
            )));
        }
        let h = self.cfg.hidden_size;
        let mut cross_keys = Vec::with_capacity(self.layers.len());
        let mut cross_values = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let mut k = Vec::with_capacity(encoder.seq_len * h);
            let mut v = Vec::with_capacity(encoder.seq_len * h);
            for row in encoder.hidden.chunks_exact(encoder.hidden_size) {
                let kv = layer.cross_kv.forward(row);
                k.extend_from_slice(&kv[..h]);
                v.extend_from_slice(&kv[h..]);
            }
            cross_keys.push(k);
            cross_values.push(v);
        }
        Ok(KvCache {
            self_keys: vec![Vec::new(); self.layers.len()],
            self_values: vec![Vec::new(); self.layers.len()],
            cross_keys,
            cross_values,
            encoder_len: encoder.seq_len,
            sequence_length: 0,
            hidden_size: h,
        })
    }

    fn run(&self, ids: &[TokenId], cache: &mut KvCache) -> Result<Vec<f32>, GraphError> {
        if ids.is_empty() {
            return Err(GraphError::Shape("decoder needs at least one input token".into()));
        }
        if cache.num_layers() != self.layers.len() || cache.hidden_size != self.cfg.hidden_size {
            return Err(GraphError::Shape("cache does not belong to this decoder".into()));
        }
        let h = self.cfg.hidden_size;
        let heads = self.cfg.num_heads;
        let mut last = Vec::new();
        for &id in ids {
            let pos = cache.sequence_length;
            if pos >= self.cfg.max_positions {
                return Err(GraphError::PositionOverflow { position: pos, max: self.cfg.max_positions });
            }
            let tok = id as usize;
            if tok >= self.cfg.vocab_size {
                return Err(GraphError::TokenOutOfRange(id));
            }
            let mut x: Vec<f32> = self.wte[tok * h..(tok + 1) * h].to_vec();
            add_in_place(&mut x, &self.wpe[pos * h..(pos + 1) * h]);
            for (l, layer) in self.layers.iter().enumerate() {
                let qkv = layer.qkv.forward(&layer.ln_1.forward(&x));
                cache.self_keys[l].extend_from_slice(&qkv[h..2 * h]);
                cache.self_values[l].extend_from_slice(&qkv[2 * h..]);
                let a = attend(&qkv[..h], &cache.self_keys[l], &cache.self_values[l], pos + 1, heads);
                add_in_place(&mut x, &layer.attn_out.forward(&a));

                let q = layer.cross_q.forward(&layer.ln_cross.forward(&x));
                let c = attend(&q, &cache.cross_keys[l], &cache.cross_values[l], cache.encoder_len, heads);
                add_in_place(&mut x, &layer.cross_out.forward(&c));

                let m = layer.mlp.forward(&layer.ln_2.forward(&x));
                add_in_place(&mut x, &m);
            }
            cache.sequence_length += 1;
            last = x;
        }
        let hidden = self.ln_f.forward(&last);
        Ok(self.wte.chunks_exact(h).map(|row| dot(row, &hidden)).collect())
    }
}

/// Loads either graph kind from a file and checks it is the expected one.
pub fn load_encoder(path: &Path) -> Result<Box<dyn EncoderGraph>, GraphError> {
    Ok(Box::new(VitEncoder::from_archive(GraphArchive::read(path)?)?))
}

pub fn load_decoder(path: &Path) -> Result<Box<dyn DecoderGraph>, GraphError> {
    Ok(Box::new(Gpt2Decoder::from_archive(GraphArchive::read(path)?)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_over_single_row_returns_value() {
        let out = attend(&[1.0, 2.0], &[0.3, -0.1], &[5.0, 7.0], 1, 2);
        assert_eq!(out, vec![5.0, 7.0]);
    }

    #[test]
    fn attention_weights_sum_to_one() {
        // Equal keys give a uniform average of the values.
        let keys = vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let values = vec![0.0, 3.0, 6.0, 9.0, 12.0, 15.0];
        let out = attend(&[0.5, 0.5], &keys, &values, 3, 1);
        assert!((out[0] - 6.0).abs() < 1e-6 && (out[1] - 9.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_centers_and_scales() {
        let ln = LayerNorm { weight: vec![1.0; 4], bias: vec![0.0; 4], eps: 0.0 };
        let y = ln.forward(&[1.0, 2.0, 3.0, 4.0]);
        assert!(y.iter().sum::<f32>().abs() < 1e-6);
        let var = y.iter().map(|v| v * v).sum::<f32>() / 4.0;
        assert!((var - 1.0).abs() < 1e-5);
    }

    #[test]
    fn gelu_variants_agree_roughly() {
        let mut a = vec![-2.0, -0.5, 0.0, 0.5, 2.0];
        let mut b = a.clone();
        Activation::Gelu.apply(&mut a);
        Activation::GeluTanh.apply(&mut b);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-3);
        }
        assert_eq!(a[2], 0.0);
        assert!((a[4] - 1.9545).abs() < 1e-3);
    }

    #[test]
    fn archive_round_trip_and_format_check() {
        let mut ar = GraphArchive::new(ENCODER_KIND, serde_json::json!({"x": 1}));
        ar.insert("w", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let bytes = ar.to_bytes().unwrap();
        let back = GraphArchive::from_bytes(&bytes).unwrap();
        assert_eq!(back.kind, ENCODER_KIND);
        assert_eq!(back.tensors["w"], (vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        assert!(GraphArchive::from_bytes(b"garbage").is_err());
        assert!(VitEncoder::from_archive(back).is_err());
    }
}
