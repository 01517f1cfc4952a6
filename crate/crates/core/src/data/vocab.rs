use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

pub const UNKNOWN_TOKEN: &str = "<unk>";

/// Token ↔ id map. Id 0 is reserved for tokens unseen at build time.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Sorted distinct tokens of the (training) captions.
    pub fn build<'a, I, S>(captions: I) -> Self
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let distinct: BTreeSet<&str> = captions.into_iter().flatten().map(AsRef::as_ref).collect();
        let tokens = std::iter::once(UNKNOWN_TOKEN).chain(distinct).map(String::from).collect();
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(String::from).collect();
        if tokens.first().map(String::as_str) != Some(UNKNOWN_TOKEN) {
            return Err(Error::Data(format!("{}: vocabulary must start with {UNKNOWN_TOKEN}", path.display())));
        }
        Ok(Self::from_tokens(tokens))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_maps_to_zero() {
        let caps = [vec!["dog", "ball"], vec!["dog", "cat"]];
        let v = Vocab::build(caps.iter().map(Vec::as_slice));
        assert_eq!(v.len(), 4);
        assert_eq!(v.encode(&["cat", "zebra", "ball"]), [2, 0, 1]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(Vocab::load(&p).unwrap(), v);
    }
}
