//! Token accounting.
//!
//! Budgets throughout the crate are expressed in proxy tokens so that tests
//! run without a model tokenizer. The default counter charges one token per
//! four characters, rounded up.

use std::fmt;
use std::sync::Arc;

/// Counts tokens in a piece of text.
pub trait TokenCounter: Send + Sync + fmt::Debug {
    fn count(&self, text: &str) -> usize;
}

/// `ceil(chars / 4)`, counted in Unicode scalar values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CharProxyCounter;

impl TokenCounter for CharProxyCounter {
    fn count(&self, text: &str) -> usize {
        text.chars().count().div_ceil(4)
    }
}

/// Shared handle to a counter.
pub type SharedCounter = Arc<dyn TokenCounter>;

pub fn default_counter() -> SharedCounter {
    Arc::new(CharProxyCounter)
}
