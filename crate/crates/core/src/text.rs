//! Word-level tokenizer and the transformer text encoder.
//!
//! The encoder yields one hidden state per position. The state at the EOS
//! position is the sentence-level (global) feature; every other position is a
//! word-level (local) feature.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{join, EncoderBlock, LayerNorm, MASKED_LOGIT};
use crate::params::{Init, ParamKind, ParamStore};

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const EOS_TOKEN: &str = "<eos>";
pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const EOS_ID: u32 = 2;

const VOCAB_HEADER: &str = "# refseg vocabulary v1";

/// Lowercases, replaces punctuation with spaces and splits on whitespace.
pub fn normalize_words(expression: &str) -> Vec<String> {
    expression
        .to_lowercase()
        .chars()
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// A tokenized expression of exactly `max_len` ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedText {
    pub ids: Vec<u32>,
    /// `true` at padded positions.
    pub pad_mask: Vec<bool>,
}

impl TokenizedText {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Index of the EOS token (the last non-pad position).
    pub fn eos_index(&self) -> usize {
        self.pad_mask.iter().take_while(|p| !**p).count() - 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    max_len: usize,
}

impl Tokenizer {
    /// Builds a vocabulary from the words of `expressions`, sorted so the
    /// result does not depend on input order.
    pub fn from_expressions<'a>(
        expressions: impl IntoIterator<Item = &'a str>,
        max_len: usize,
    ) -> Result<Self> {
        let words: BTreeSet<String> = expressions
            .into_iter()
            .flat_map(normalize_words)
            .collect();
        Self::from_words(words, max_len)
    }

    pub fn from_words(words: impl IntoIterator<Item = String>, max_len: usize) -> Result<Self> {
        if max_len < 2 {
            return Err(Error::Tokenizer(format!(
                "max_len must be at least 2 (one word plus EOS), got {max_len}"
            )));
        }
        let mut tokens = vec![
            PAD_TOKEN.to_string(),
            UNK_TOKEN.to_string(),
            EOS_TOKEN.to_string(),
        ];
        for w in words {
            if !tokens.contains(&w) {
                tokens.push(w);
            }
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Self {
            tokens,
            index,
            max_len,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    /// Sequence length including EOS (`L + 1`).
    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn with_max_len(&self, max_len: usize) -> Result<Self> {
        Self::from_words(self.tokens[3..].iter().cloned(), max_len)
    }

    pub fn tokenize(&self, expression: &str) -> Result<TokenizedText> {
        let words = normalize_words(expression);
        if words.is_empty() {
            return Err(Error::Tokenizer(format!(
                "expression {expression:?} has no words"
            )));
        }
        let mut ids: Vec<u32> = words
            .iter()
            .take(self.max_len - 1)
            .map(|w| self.id(w))
            .collect();
        ids.push(EOS_ID);
        let real = ids.len();
        ids.resize(self.max_len, PAD_ID);
        let pad_mask = (0..self.max_len).map(|i| i >= real).collect();
        Ok(TokenizedText { ids, pad_mask })
    }

    /// Serialized vocabulary: a `#` header block, then one token per line
    /// where the line's index among token lines is the id.
    pub fn to_vocab_string(&self) -> String {
        let mut s = format!(
            "{VOCAB_HEADER}\n# special: {PAD_TOKEN} {UNK_TOKEN} {EOS_TOKEN}\n# max_len: {}\n",
            self.max_len
        );
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_vocab_str(text: &str) -> Result<Self> {
        let mut max_len = None;
        let mut tokens = Vec::new();
        for line in text.lines() {
            if let Some(header) = line.strip_prefix('#') {
                if let Some(v) = header.trim().strip_prefix("max_len:") {
                    max_len = Some(v.trim().parse::<usize>().map_err(|e| {
                        Error::Tokenizer(format!("bad max_len header {v:?}: {e}"))
                    })?);
                }
                continue;
            }
            let t = line.trim();
            if !t.is_empty() {
                tokens.push(t.to_string());
            }
        }
        if tokens.len() < 3 || tokens[..3] != [PAD_TOKEN, UNK_TOKEN, EOS_TOKEN] {
            return Err(Error::Tokenizer(
                "vocabulary must start with <pad>, <unk>, <eos>".into(),
            ));
        }
        let max_len =
            max_len.ok_or_else(|| Error::Tokenizer("vocabulary lacks a max_len header".into()))?;
        Self::from_words(tokens.into_iter().skip(3), max_len)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_vocab_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_vocab_str(&text)
    }
}

/// Per-sample text features, batched.
#[derive(Debug, Clone)]
pub struct TextFeatures {
    /// `(B, L, d₁)` word-level features (every position except EOS).
    pub t_local: Tensor,
    /// `(B, 1, d₁)` hidden state at the EOS position.
    pub t_global: Tensor,
    /// `(B, L)`, `true` where the `t_local` row comes from padding.
    pub pad_mask: Vec<Vec<bool>>,
    /// `(B, L + 1, d₁)` all encoder outputs.
    pub states: Tensor,
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    token_embedding: Tensor,
    position_embedding: Tensor,
    pub(crate) blocks: Vec<EncoderBlock>,
    ln_final: LayerNorm,
    max_len: usize,
    dim: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &TextEncoderConfig) -> Result<Self> {
        let kind = ParamKind::Frozen;
        let token_embedding = store.get_or_init(
            &join(prefix, "token_embedding"),
            &[cfg.vocab_size, cfg.dim],
            Init::Normal { std: 1.0 },
            kind,
        )?;
        let position_embedding = store.get_or_init(
            &join(prefix, "position_embedding"),
            &[cfg.max_len, cfg.dim],
            Init::Normal { std: 0.1 },
            kind,
        )?;
        let blocks = (0..cfg.layers)
            .map(|i| {
                EncoderBlock::new(
                    store,
                    &format!("{prefix}.blocks.{i}"),
                    cfg.dim,
                    cfg.heads,
                    cfg.mlp_ratio,
                    kind,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            token_embedding,
            position_embedding,
            blocks,
            ln_final: LayerNorm::new(store, &join(prefix, "ln_final"), cfg.dim, kind)?,
            max_len: cfg.max_len,
            dim: cfg.dim,
        })
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn blocks(&self) -> &[EncoderBlock] {
        &self.blocks
    }

    /// The same encoder accepting shorter sequences, using the leading rows
    /// of the positional table.
    pub fn with_max_len(&self, max_len: usize) -> Result<Self> {
        if max_len > self.max_len {
            return Err(Error::config(format!(
                "cannot extend positional table from {} to {max_len}",
                self.max_len
            )));
        }
        let mut out = self.clone();
        out.position_embedding = self.position_embedding.narrow(0, 0, max_len)?;
        out.max_len = max_len;
        Ok(out)
    }

    pub fn encode(&self, batch: &[TokenizedText]) -> Result<TextFeatures> {
        let b = batch.len();
        let n = self.max_len;
        if b == 0 {
            return Err(Error::shape("empty text batch"));
        }
        for t in batch {
            if t.ids.len() != n || t.pad_mask.len() != n {
                return Err(Error::shape(format!(
                    "token sequence length {} (pad mask {}) != max_len {n}",
                    t.ids.len(),
                    t.pad_mask.len()
                )));
            }
        }
        let dev = self.token_embedding.device();
        let dtype = self.token_embedding.dtype();
        let ids: Vec<u32> = batch.iter().flat_map(|t| t.ids.iter().copied()).collect();
        let ids = Tensor::from_vec(ids, b * n, dev)?;
        let x = self
            .token_embedding
            .index_select(&ids, 0)?
            .reshape((b, n, self.dim))?
            .broadcast_add(&self.position_embedding)?;
        let bias: Vec<f64> = batch
            .iter()
            .flat_map(|t| t.pad_mask.iter().map(|&p| if p { MASKED_LOGIT } else { 0.0 }))
            .collect();
        let bias = Tensor::from_vec(bias, (b, n), dev)?.to_dtype(dtype)?;
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(&h, Some(&bias))?;
        }
        let states = self.ln_final.forward(&h)?;

        let flat = states.reshape((b * n, self.dim))?;
        let mut global_idx = Vec::with_capacity(b);
        let mut local_idx = Vec::with_capacity(b * (n - 1));
        let mut pad_mask = Vec::with_capacity(b);
        for (i, t) in batch.iter().enumerate() {
            let eos = t.eos_index();
            global_idx.push((i * n + eos) as u32);
            let mut mask = Vec::with_capacity(n - 1);
            for p in (0..n).filter(|&p| p != eos) {
                local_idx.push((i * n + p) as u32);
                mask.push(t.pad_mask[p]);
            }
            pad_mask.push(mask);
        }
        let t_global = flat
            .index_select(&Tensor::new(global_idx, dev)?, 0)?
            .reshape((b, 1, self.dim))?;
        let t_local = flat
            .index_select(&Tensor::new(local_idx, dev)?, 0)?
            .reshape((b, n - 1, self.dim))?;
        Ok(TextFeatures {
            t_local,
            t_global,
            pad_mask,
            states,
        })
    }
}

/// Helper for tests and callers holding raw id / mask slices.
pub fn encode_text(
    encoder: &TextEncoder,
    token_ids: &[u32],
    pad_mask: &[bool],
) -> Result<TextFeatures> {
    encoder.encode(&[TokenizedText {
        ids: token_ids.to_vec(),
        pad_mask: pad_mask.to_vec(),
    }])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok(max_len: usize) -> Tokenizer {
        Tokenizer::from_expressions(["the red circle on the left", "a big blue square"], max_len)
            .unwrap()
    }

    #[test]
    fn three_words_padded() {
        let t = tok(8).tokenize("the red circle").unwrap();
        assert_eq!(t.ids.len(), 8);
        assert_eq!(t.ids[3], EOS_ID);
        assert_eq!(&t.ids[4..], &[PAD_ID; 4]);
        assert_eq!(t.pad_mask.iter().filter(|p| **p).count(), 4);
        assert_eq!(t.eos_index(), 3);
    }

    #[test]
    fn exactly_fills_without_padding() {
        let t = tok(5).tokenize("the red circle on").unwrap();
        assert_eq!(t.ids.last(), Some(&EOS_ID));
        assert!(t.pad_mask.iter().all(|p| !p));
    }

    #[test]
    fn truncates_but_keeps_eos() {
        let t = tok(4).tokenize("the red circle on the left").unwrap();
        assert_eq!(t.ids.len(), 4);
        assert_eq!(t.ids[3], EOS_ID);
        assert!(t.pad_mask.iter().all(|p| !p));
    }

    #[test]
    fn unknown_and_punctuation() {
        let tk = tok(8);
        let t = tk.tokenize("The RED, zebra!").unwrap();
        assert_eq!(t.ids[0], tk.id("the"));
        assert_eq!(t.ids[1], tk.id("red"));
        assert_eq!(t.ids[2], UNK_ID);
        assert_eq!(t.ids[3], EOS_ID);
    }

    #[test]
    fn empty_expression_rejected() {
        assert!(tok(8).tokenize("   ").is_err());
        assert!(tok(8).tokenize("").is_err());
        assert!(tok(8).tokenize("?!").is_err());
    }

    #[test]
    fn vocab_file_roundtrip() {
        let tk = tok(12);
        let back = Tokenizer::from_vocab_str(&tk.to_vocab_string()).unwrap();
        assert_eq!(tk, back);
        assert!(Tokenizer::from_vocab_str("a\nb\n").is_err());
    }
}
