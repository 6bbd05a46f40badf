//! Character-level vocabulary for the arithmetic task.

use std::collections::HashMap;

use super::{Result, TaskError};

/// Fixed symbol set: digits, the three operators, structural characters,
/// the prompt delimiter `?` and the end token `$`. Ids follow list
/// order, so `'7'` is always id 7.
pub const SYMBOLS: [char; 19] = [
    '0', '1', '2', '3', '4', '5', '6', '7', '8', '9', '+', '-', '*', '=', ';', '#', ' ', '?', '$',
];

#[derive(Debug, Clone)]
pub struct Vocab {
    ids: HashMap<char, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::standard()
    }
}

impl Vocab {
    pub fn standard() -> Self {
        let ids = SYMBOLS.iter().enumerate().map(|(i, c)| (*c, i)).collect();
        Vocab { ids }
    }

    pub fn size(&self) -> usize {
        SYMBOLS.len()
    }

    pub fn end_token(&self) -> usize {
        self.ids[&'$']
    }

    pub fn prompt_delim(&self) -> char {
        '?'
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.ids.get(&c).copied()
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .enumerate()
            .map(|(pos, c)| {
                self.id(c)
                    .ok_or(TaskError::UnknownSymbol { symbol: c, pos })
            })
            .collect()
    }

    pub fn detokenize(&self, tokens: &[usize]) -> Result<String> {
        tokens
            .iter()
            .map(|&t| {
                SYMBOLS
                    .get(t)
                    .copied()
                    .ok_or(TaskError::UnknownToken { token: t })
            })
            .collect()
    }
}
