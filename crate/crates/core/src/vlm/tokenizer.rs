//! Byte-level byte-pair encoding, GPT-2 flavour.
//!
//! Text is split with the GPT-2 pre-tokenization pattern, every byte of a
//! piece is mapped to a printable stand-in character, and merges are applied
//! by rank until none applies. Decoding reverses the byte mapping.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use regex::Regex;
use thiserror::Error;

pub type TokenId = u32;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("cannot read {path}: {message}")]
    Read { path: String, message: String },
    #[error("malformed vocabulary: {0}")]
    Vocab(String),
    #[error("merges line {line}: {message}")]
    Merge { line: usize, message: String },
}

/// The GPT-2 split pattern without its trailing `\s+(?!\S)` lookahead
/// alternative, which is emulated in [`pre_tokenize`].
const SPLIT_PATTERN: &str = r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+";

/// The reversible byte to printable-char table used by GPT-2.
pub fn byte_to_char_table() -> [char; 256] {
    let mut table = ['\0'; 256];
    let printable = |b: u32| (0x21..=0x7e).contains(&b) || (0xa1..=0xac).contains(&b) || (0xae..=0xff).contains(&b);
    let mut extra = 0u32;
    for b in 0..256u32 {
        let cp = if printable(b) {
            b
        } else {
            extra += 1;
            255 + extra
        };
        table[b as usize] = char::from_u32(cp).expect("valid code point");
    }
    table
}

/// Splits text the way the GPT-2 regex does.
pub fn pre_tokenize<'a>(re: &Regex, text: &'a str) -> Vec<&'a str> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < text.len() {
        let m = re.find_at(text, pos).expect("split pattern matches every position");
        debug_assert_eq!(m.start(), pos);
        let piece = m.as_str();
        let mut end = m.end();
        // A bare whitespace run: `\s+(?!\S)` keeps the last whitespace char
        // for the next piece when the run is followed by a non-space.
        if piece.chars().all(char::is_whitespace) && end < text.len() {
            let last = piece.chars().next_back().expect("nonempty match");
            if piece.chars().count() > 1 {
                end -= last.len_utf8();
            }
        }
        out.push(&text[pos..end]);
        pos = end;
    }
    out
}

pub struct BpeTokenizer {
    encoder: HashMap<String, TokenId>,
    decoder: Vec<Option<String>>,
    ranks: HashMap<(String, String), usize>,
    byte_chars: [char; 256],
    char_bytes: HashMap<char, u8>,
    special: Vec<TokenId>,
    splitter: Regex,
    cache: Mutex<HashMap<String, Vec<TokenId>>>,
}

impl std::fmt::Debug for BpeTokenizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BpeTokenizer")
            .field("vocab_size", &self.vocab_size())
            .field("merges", &self.ranks.len())
            .finish()
    }
}

impl BpeTokenizer {
    pub fn from_files(vocab_path: &Path, merges_path: &Path) -> Result<Self, TokenizerError> {
        let read = |p: &Path| {
            std::fs::read_to_string(p).map_err(|e| TokenizerError::Read { path: p.display().to_string(), message: e.to_string() })
        };
        Self::from_strs(&read(vocab_path)?, &read(merges_path)?)
    }

    /// Builds a tokenizer from `vocab.json` and `merges.txt` contents.
    ///
    /// Every byte stand-in must be in the vocabulary and every merge must
    /// combine known tokens into a known token; violations fail here rather
    /// than at encode time.
    pub fn from_strs(vocab_json: &str, merges_txt: &str) -> Result<Self, TokenizerError> {
        let encoder: HashMap<String, TokenId> =
            serde_json::from_str(vocab_json).map_err(|e| TokenizerError::Vocab(e.to_string()))?;
        let size = encoder.values().map(|&id| id as usize + 1).max().unwrap_or(0);
        let mut decoder = vec![None; size];
        for (tok, &id) in &encoder {
            if decoder[id as usize].replace(tok.clone()).is_some() {
                return Err(TokenizerError::Vocab(format!("id {id} assigned twice")));
            }
        }

        let byte_chars = byte_to_char_table();
        for (b, c) in byte_chars.iter().enumerate() {
            if !encoder.contains_key(&c.to_string()) {
                return Err(TokenizerError::Vocab(format!("byte {b:#04x} ({c:?}) missing from vocabulary")));
            }
        }
        let char_bytes = byte_chars.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();

        let mut ranks = HashMap::new();
        for (i, line) in merges_txt.lines().enumerate() {
            let line_no = i + 1;
            if line.starts_with("#version") || line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(TokenizerError::Merge { line: line_no, message: format!("expected two symbols, got {line:?}") });
            };
            for sym in [a, b] {
                if !encoder.contains_key(sym) {
                    return Err(TokenizerError::Merge { line: line_no, message: format!("unknown symbol {sym:?}") });
                }
            }
            let merged = format!("{a}{b}");
            if !encoder.contains_key(&merged) {
                return Err(TokenizerError::Merge { line: line_no, message: format!("merge result {merged:?} not in vocabulary") });
            }
            let rank = ranks.len();
            ranks.entry((a.to_string(), b.to_string())).or_insert(rank);
        }

        let mut special: Vec<TokenId> = encoder
            .iter()
            .filter(|(tok, _)| tok.starts_with("<|") && tok.ends_with("|>"))
            .map(|(_, &id)| id)
            .collect();
        special.sort_unstable();

        Ok(Self {
            encoder,
            decoder,
            ranks,
            byte_chars,
            char_bytes,
            special,
            splitter: Regex::new(SPLIT_PATTERN).expect("static pattern"),
            cache: Mutex::new(HashMap::new()),
        })
    }

    /// One past the largest token id.
    pub fn vocab_size(&self) -> usize {
        self.decoder.len()
    }

    pub fn token_id(&self, token: &str) -> Option<TokenId> {
        self.encoder.get(token).copied()
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        self.special.binary_search(&id).is_ok()
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut ids = Vec::new();
        for piece in pre_tokenize(&self.splitter, text) {
            if let Some(hit) = self.cache.lock().expect("cache lock").get(piece) {
                ids.extend_from_slice(hit);
                continue;
            }
            let word: Vec<String> = piece.bytes().map(|b| self.byte_chars[b as usize].to_string()).collect();
            let piece_ids: Vec<TokenId> = self.merge_word(word).iter().map(|sym| self.encoder[sym]).collect();
            ids.extend_from_slice(&piece_ids);
            self.cache.lock().expect("cache lock").insert(piece.to_string(), piece_ids);
        }
        ids
    }

    fn merge_word(&self, mut word: Vec<String>) -> Vec<String> {
        while word.len() > 1 {
            let best = word
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, w[0].clone(), w[1].clone())))
                .min_by_key(|(r, _, _)| *r);
            let Some((_, a, b)) = best else { break };
            let mut merged = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len() && word[i] == a && word[i + 1] == b {
                    merged.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut word[i]));
                    i += 1;
                }
            }
            word = merged;
        }
        word
    }

    /// Decodes ids back to text. Special tokens are dropped when
    /// `skip_special` is set; unknown ids are ignored. Byte sequences that
    /// are not valid UTF-8 are replaced with U+FFFD.
    pub fn decode(&self, ids: &[TokenId], skip_special: bool) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            if skip_special && self.is_special(id) {
                continue;
            }
            let Some(Some(tok)) = self.decoder.get(id as usize) else { continue };
            if self.is_special(id) {
                bytes.extend_from_slice(tok.as_bytes());
                continue;
            }
            bytes.extend(tok.chars().filter_map(|c| self.char_bytes.get(&c).copied()));
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    /// Decodes one token on its own, for streaming display.
    pub fn decode_token(&self, id: TokenId) -> String {
        self.decode(&[id], true)
    }
}
