use std::collections::HashMap;

use crate::tagset::{is_tag_token, NeCategory};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const BLANK: usize = 0;

pub const TARGET_SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];
pub const BLANK_TOKEN: &str = "<blank>";

/// Bidirectional token ↔ id table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    is_tag: Vec<bool>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect::<HashMap<_, _>>();
        assert_eq!(index.len(), tokens.len(), "duplicate vocabulary entries");
        let is_tag = tokens.iter().map(|t| is_tag_token(t)).collect();
        Vocab {
            tokens,
            index,
            is_tag,
        }
    }

    /// `<pad> <s> </s> <unk>` followed by `words`, plus the 36 tag tokens when
    /// `with_tags`.
    pub fn target<S: AsRef<str>>(words: &[S], with_tags: bool) -> Self {
        let mut tokens: Vec<String> = TARGET_SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.iter().map(|w| w.as_ref().to_string()));
        if with_tags {
            tokens.extend(NeCategory::tag_tokens());
        }
        Vocab::new(tokens)
    }

    /// `<blank>` followed by `words`, for the CTC head.
    pub fn source<S: AsRef<str>>(words: &[S]) -> Self {
        let mut tokens = vec![BLANK_TOKEN.to_string()];
        tokens.extend(words.iter().map(|w| w.as_ref().to_string()));
        Vocab::new(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_tag(&self, id: usize) -> bool {
        self.is_tag[id]
    }

    pub fn num_tags(&self) -> usize {
        self.is_tag.iter().filter(|t| **t).count()
    }
}
