use rand::Rng;
use serde::{Deserialize, Serialize};

use super::schema::AttributeSchema;
use super::vocab::{TokenizerVocab, DEFAULT_MAX_LEN};
use crate::error::{Error, Result};
use crate::nn::{normal_tensor, LayerNorm, TransformerBlock};
use crate::tensor::{ParamId, ParamStore, Scalar, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub max_len: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig {
            depth: 1,
            heads: 4,
            mlp_ratio: 4,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

/// Prompt sentences of a schema together with their token ids.
#[derive(Debug, Clone)]
pub struct PromptBank {
    pub vocab: TokenizerVocab,
    pub sentences: Vec<String>,
    pub ids: Vec<Vec<usize>>,
}

impl PromptBank {
    pub fn new(schema: &AttributeSchema, max_len: usize) -> Result<Self> {
        Self::from_sentences(schema.sentences(), max_len)
    }

    pub fn from_sentences(sentences: Vec<String>, max_len: usize) -> Result<Self> {
        if sentences.is_empty() {
            return Err(Error::Contract("no attribute sentences".into()));
        }
        let vocab = TokenizerVocab::build(&sentences, max_len)?;
        let ids = sentences.iter().map(|s| vocab.tokenize(s)).collect();
        Ok(PromptBank { vocab, sentences, ids })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

/// Token embedding plus learned positions, a stack of transformer blocks
/// and a final norm. Each sentence is represented by its end-token row.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub token_embedding: ParamId,
    pub position: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub ln_final: LayerNorm,
    pub dim: usize,
    pub max_len: usize,
    pub vocab_size: usize,
}

impl TextEncoder {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        cfg: &TextConfig,
        vocab_size: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let token_embedding = store.add("text.token_embedding", normal_tensor(&[vocab_size, dim], 0.02, rng), true)?;
        let position = store.add("text.position", normal_tensor(&[cfg.max_len, dim], 0.01, rng), true)?;
        let blocks = (0..cfg.depth)
            .map(|i| TransformerBlock::new(store, &format!("text.blocks.{i}"), dim, cfg.heads, cfg.mlp_ratio, rng))
            .collect::<Result<_>>()?;
        Ok(TextEncoder {
            token_embedding,
            position,
            blocks,
            ln_final: LayerNorm::new(store, "text.ln_final", dim)?,
            dim,
            max_len: cfg.max_len,
            vocab_size,
        })
    }

    /// `F_t`: one `[dim]` row per prompt, in prompt order.
    pub fn embed<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, bank: &PromptBank) -> Result<Var> {
        let m = bank.len();
        let l = self.max_len;
        if bank.vocab.max_len() != l || bank.vocab.len() != self.vocab_size {
            return Err(Error::ModelMismatch(format!(
                "text encoder expects vocabulary {} and length {}, prompts have {} and {}",
                self.vocab_size,
                l,
                bank.vocab.len(),
                bank.vocab.max_len()
            )));
        }
        let flat: Vec<usize> = bank.ids.iter().flatten().copied().collect();
        let table = tape.param(store, self.token_embedding);
        let x = tape.gather(table, &flat)?;
        let x = tape.reshape(x, &[m, l, self.dim])?;
        let pos = tape.param(store, self.position);
        let mut x = tape.add(x, pos)?;
        for block in &self.blocks {
            x = block.forward(tape, store, x, None)?;
        }
        let x = self.ln_final.forward(tape, store, x)?;
        let x = tape.reshape(x, &[m * l, self.dim])?;
        let rows: Vec<usize> =
            bank.ids.iter().enumerate().map(|(i, ids)| i * l + TokenizerVocab::end_position(ids)).collect();
        tape.gather(x, &rows)
    }
}
