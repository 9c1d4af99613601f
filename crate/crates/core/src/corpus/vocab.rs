use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const UNK: usize = 1;

/// Rendered for [`UNK`] by [`Vocab::detokenize`].
pub const UNK_CHAR: char = '\u{FFFD}';

/// Character-level symbol table. Id 0 is padding, id 1 is unknown, the
/// alphabet follows in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    symbols: Vec<char>,
}

impl Default for Vocab {
    /// Printable ASCII, `' '` through `'~'` (ids 2..=96).
    fn default() -> Self {
        Self::new((' '..='~').collect()).expect("ASCII is distinct")
    }
}

impl Vocab {
    /// Fails when the alphabet repeats a symbol.
    pub fn new(symbols: Vec<char>) -> crate::Result<Self> {
        for (i, c) in symbols.iter().enumerate() {
            if symbols[..i].contains(c) {
                return Err(crate::Error::Config(format!(
                    "symbol {c:?} listed twice in vocabulary"
                )));
            }
        }
        Ok(Self { symbols })
    }

    /// Number of ids including padding and unknown.
    pub fn len(&self) -> usize {
        self.symbols.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, c: char) -> usize {
        match c {
            ' '..='~' if self.symbols.first() == Some(&' ') && self.symbols.len() == 95 => {
                c as usize - ' ' as usize + 2
            }
            _ => self
                .symbols
                .iter()
                .position(|&s| s == c)
                .map_or(UNK, |i| i + 2),
        }
    }

    pub fn symbol(&self, id: usize) -> Option<char> {
        id.checked_sub(2).and_then(|i| self.symbols.get(i).copied())
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.chars().map(|c| self.id(c)).collect()
    }

    /// Padding renders as nothing, unknown and out-of-range ids as U+FFFD.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id != PAD)
            .map(|&id| self.symbol(id).unwrap_or(UNK_CHAR))
            .collect()
    }
}
