//! Attribute schema, prompt construction and the text encoder that turns
//! each attribute sentence into one token.

mod encoder;
mod prompt;
mod schema;
mod vocab;

pub use encoder::{PromptBank, TextConfig, TextEncoder};
pub use prompt::{sentence_for, split_expand, PromptTemplate};
pub use schema::{AttributeClass, AttributeGroup, AttributeSchema, GroupKind};
pub use vocab::{TokenizerVocab, DEFAULT_MAX_LEN, END, PAD, START, UNKNOWN};
