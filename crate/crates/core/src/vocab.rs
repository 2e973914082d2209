use std::collections::HashMap;

use crate::error::{IsanError, Result};

/// The 27-symbol character set: space followed by `a`..`z`.
pub const TEXT_SYMBOLS: &str = " abcdefghijklmnopqrstuvwxyz";

/// Alphabet of the two-type bracket counting task.
pub const PAREN_SYMBOLS: &str = "()[]a";

/// Symbol used for spaces in rendered output (`_annual`).
pub const SPACE_GLYPH: char = '_';

/// Ordered set of distinct symbols with a bijective index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<char>,
    index: HashMap<char, usize>,
    text_mode: bool,
}

impl Vocab {
    pub fn new(symbols: impl IntoIterator<Item = char>) -> Result<Self> {
        let symbols: Vec<char> = symbols.into_iter().collect();
        Self::build(symbols, false)
    }

    /// Lowercase letters plus space. Text mode folds case and maps every
    /// other character to space before lookup.
    pub fn text() -> Self {
        Self::build(TEXT_SYMBOLS.chars().collect(), true).expect("static vocabulary is valid")
    }

    pub fn paren() -> Self {
        Self::build(PAREN_SYMBOLS.chars().collect(), false).expect("static vocabulary is valid")
    }

    fn build(symbols: Vec<char>, text_mode: bool) -> Result<Self> {
        if symbols.len() < 2 {
            return Err(IsanError::Argument(format!(
                "vocabulary needs at least 2 symbols, got {}",
                symbols.len()
            )));
        }
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, &c) in symbols.iter().enumerate() {
            if index.insert(c, i).is_some() {
                return Err(IsanError::Argument(format!("duplicate symbol {c:?}")));
            }
        }
        if text_mode && !symbols.contains(&' ') {
            return Err(IsanError::Argument("text vocabulary needs a space".into()));
        }
        Ok(Self {
            symbols,
            index,
            text_mode,
        })
    }

    /// Rebuild from a stored symbol list; recognises the standard text set.
    pub fn from_symbols(symbols: &[char]) -> Result<Self> {
        let text_mode = symbols.iter().collect::<String>() == TEXT_SYMBOLS;
        Self::build(symbols.to_vec(), text_mode)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn is_text(&self) -> bool {
        self.text_mode
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn symbol(&self, index: usize) -> Result<char> {
        self.symbols
            .get(index)
            .copied()
            .ok_or_else(|| IsanError::UnknownToken(format!("index {index}")))
    }

    /// Index of the space symbol, if the vocabulary has one.
    pub fn space(&self) -> Option<usize> {
        self.index.get(&' ').copied()
    }

    /// Text-mode normalisation: lowercase, anything outside the vocabulary becomes space.
    pub fn normalize_char(&self, c: char) -> char {
        if !self.text_mode {
            return c;
        }
        let c = if c == SPACE_GLYPH { ' ' } else { c.to_ascii_lowercase() };
        if self.index.contains_key(&c) {
            c
        } else {
            ' '
        }
    }

    pub fn index_of(&self, c: char) -> Result<usize> {
        let c = self.normalize_char(c);
        self.index
            .get(&c)
            .copied()
            .ok_or_else(|| IsanError::UnknownToken(format!("{c:?}")))
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars().map(|c| self.index_of(c)).collect()
    }

    pub fn decode(&self, tokens: &[usize]) -> Result<String> {
        tokens.iter().map(|&t| self.symbol(t)).collect()
    }

    pub fn check(&self, token: usize) -> Result<()> {
        if token < self.len() {
            Ok(())
        } else {
            Err(IsanError::UnknownToken(format!("index {token}")))
        }
    }
}
