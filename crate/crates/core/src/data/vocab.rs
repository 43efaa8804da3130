use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const MASK: usize = 4;
pub const RESERVED_TOKENS: usize = 5;

const RESERVED: [&str; RESERVED_TOKENS] = ["<pad>", "<s>", "</s>", "<unk>", "<mask>"];

pub fn is_reserved(id: usize) -> bool {
    id < RESERVED_TOKENS
}

/// Token/id bijection with the reserved ids fixed at 0..5.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for t in RESERVED {
            v.add(t);
        }
        v
    }

    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self::new();
        for w in words {
            v.add(w);
        }
        v
    }

    /// Adds a token if absent and returns its id.
    pub fn add(&mut self, token: &str) -> usize {
        if let Some(&id) = self.ids.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.ids.insert(token.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line, reserved tokens first.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)
            .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        for t in &self.tokens {
            writeln!(f, "{t}").map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut v = Self::new();
        for (i, line) in text.lines().enumerate() {
            let record = |message: String| Error::Record {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            if i < RESERVED_TOKENS {
                if line != RESERVED[i] {
                    return Err(record(format!("expected reserved token {}", RESERVED[i])));
                }
                continue;
            }
            if line.is_empty() || line.contains(char::is_whitespace) {
                return Err(record(format!("invalid token {line:?}")));
            }
            if v.id(line).is_some() {
                return Err(record(format!("duplicate token {line:?}")));
            }
            v.add(line);
        }
        if v.len() < RESERVED_TOKENS {
            return Err(Error::Validation(format!("{} holds no reserved tokens", path.display())));
        }
        Ok(v)
    }
}

/// Lowercased whitespace split with punctuation as separate tokens.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars() {
            if ch.is_ascii_punctuation() && ch != '\'' && ch != '-' {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            } else {
                word.extend(ch.to_lowercase());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<usize> {
    split_words(text)
        .iter()
        .map(|w| vocab.id(w).unwrap_or(UNK))
        .collect()
}

/// Space-joined tokens; reserved ids other than UNK are dropped.
pub fn detokenize(ids: &[usize], vocab: &Vocabulary) -> String {
    ids.iter()
        .filter(|&&id| !is_reserved(id) || id == UNK)
        .map(|&id| vocab.token(id).unwrap_or("<unk>"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocabulary::new();
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<s>"), Some(BOS));
        assert_eq!(v.id("</s>"), Some(EOS));
        assert_eq!(v.id("<unk>"), Some(UNK));
        assert_eq!(v.id("<mask>"), Some(MASK));
    }

    #[test]
    fn tokenize_cases() {
        let v = Vocabulary::from_words(["a", "man", "."]);
        assert!(tokenize("", &v).is_empty());
        let ids = tokenize("A man .", &v);
        assert_eq!(ids, vec![5, 6, 7]);
        assert_eq!(tokenize("a dog", &v), vec![5, UNK]);
        assert_eq!(split_words("Hello, world!"), vec!["hello", ",", "world", "!"]);
        assert_eq!(detokenize(&tokenize("A  MAN.", &v), &v), "a man .");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        let v = Vocabulary::from_words(["x", "y", "z"]);
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
        std::fs::write(&p, "<pad>\n<s>\n</s>\n<unk>\n<mask>\nx\nx\n").unwrap();
        assert!(matches!(Vocabulary::load(&p), Err(Error::Record { line: 7, .. })));
    }
}
