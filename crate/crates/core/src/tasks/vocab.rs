use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::tokens;

/// Marker symbol used by the select-marked family.
pub const MARKER: &str = "X";

/// Whitespace-symbol vocabulary. Ids below [`tokens::FIRST_SYMBOL`] are
/// reserved for PAD/BOS/EOS/SEP; symbol `i` gets id `FIRST_SYMBOL + i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() || s.chars().any(char::is_whitespace) {
                return Err(Error::config(format!("invalid symbol `{s}`")));
            }
            if index.insert(s.clone(), tokens::FIRST_SYMBOL + i as u32).is_some() {
                return Err(Error::config(format!("duplicate symbol `{s}`")));
            }
        }
        Ok(Self { symbols, index })
    }

    /// `n` lowercase letter symbols (`a`, `b`, …, skipping `x` so it never
    /// reads like the marker) followed by the marker.
    pub fn letters(n: usize) -> Result<Self> {
        const LETTERS: &str = "abcdefghijklmnopqrstuvwyz";
        if n == 0 || n > LETTERS.len() {
            return Err(Error::config(format!(
                "letter vocabulary needs 1..={} symbols, got {n}",
                LETTERS.len()
            )));
        }
        let mut symbols: Vec<String> = LETTERS.chars().take(n).map(String::from).collect();
        symbols.push(MARKER.to_string());
        Self::new(symbols)
    }

    /// Plain (non-marker) symbol count.
    pub fn plain_len(&self) -> usize {
        self.symbols.iter().filter(|s| *s != MARKER).count()
    }

    /// Token ids of the plain symbols in vocabulary order.
    pub fn plain_ids(&self) -> Vec<u32> {
        self.symbols
            .iter()
            .filter(|s| *s != MARKER)
            .map(|s| self.index[s])
            .collect()
    }

    pub fn marker_id(&self) -> Option<u32> {
        self.index.get(MARKER).copied()
    }

    /// Size the model's embedding table must have.
    pub fn model_size(&self) -> usize {
        tokens::FIRST_SYMBOL as usize + self.symbols.len()
    }

    pub fn id(&self, symbol: &str) -> Option<u32> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: u32) -> Option<&str> {
        id.checked_sub(tokens::FIRST_SYMBOL)
            .and_then(|i| self.symbols.get(i as usize))
            .map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>, String> {
        text.split_whitespace()
            .map(|s| self.id(s).ok_or_else(|| format!("unknown symbol `{s}`")))
            .collect()
    }

    /// Space-joined symbols; reserved ids render as `<pad>`, `<bos>`, ….
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| match id {
                tokens::PAD => "<pad>",
                tokens::BOS => "<bos>",
                tokens::EOS => "<eos>",
                tokens::SEP => "<sep>",
                _ => self.symbol(id).unwrap_or("<unk>"),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    /// One symbol per line.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.symbols.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let symbols = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        Self::new(symbols).map_err(|e| Error::format(path, e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn letters_layout() {
        let v = Vocab::letters(20).unwrap();
        assert_eq!(v.plain_len(), 20);
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.marker_id(), Some(24));
        assert_eq!(v.model_size(), 25);
    }

    #[test]
    fn encode_decode_round_trip() {
        let v = Vocab::letters(5).unwrap();
        let ids = v.encode("a X c").unwrap();
        assert_eq!(v.decode(&ids), "a X c");
        assert!(v.encode("a q").is_err());
    }

    #[test]
    fn rejects_duplicates() {
        assert!(Vocab::new(vec!["a".into(), "a".into()]).is_err());
    }
}
