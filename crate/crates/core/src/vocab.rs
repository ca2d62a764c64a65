//! Word vocabulary with reserved special tokens.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;

pub const SPECIALS: [&str; 4] = ["<pad>", "<start>", "<end>", "<unk>"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Specials first, then `words` in the given order (duplicates and
    /// special names are skipped).
    pub fn new<I: IntoIterator<Item = String>>(words: I) -> Self {
        let mut v = Vocab {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for w in SPECIALS.iter().map(|s| s.to_string()).chain(words) {
            if !v.index.contains_key(&w) {
                v.index.insert(w.clone(), v.words.len());
                v.words.push(w);
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Index of `word`, or [`UNK`].
    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Vec<usize> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    /// Words for `ids`, stopping before END and skipping START and PAD.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != END)
            .filter(|&&i| i != START && i != PAD)
            .map(|&i| self.word(i).unwrap_or(SPECIALS[UNK]).to_string())
            .collect()
    }
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        Vocab::new(words)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}
