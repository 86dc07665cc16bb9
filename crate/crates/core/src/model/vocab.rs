//! Word-level vocabulary over the synthetic caption grammar and the
//! annotation prompts, with reserved control tokens.

use std::collections::HashMap;

use super::{ModelError, ModelResult};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
/// End-of-sequence: emitting this halts generation.
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Fixed word list: grammar words, prompt words, and caption-flavored filler
/// so the table lands at 64 entries.
const WORDS: [&str; 60] = [
    // caption grammar
    "a", "moves", "red", "green", "blue", "yellow", "white", "square", "circle", "triangle",
    "left", "right", "up", "down",
    // prompt words
    "what", "is", "this", "video", "about", "happens", "in", "the", "can", "you", "describe",
    "detail", "do", "like", "who", "are", "where", "from", "?",
    // filler
    "an", "object", "moving", "slowly", "quickly", "across", "toward", "away", "small", "large",
    "bright", "dark", "scene", "background", "frame", "over", "under", "near", "while", "then",
    "and", "it", "stays", "turns", "fades", "grows", "shrinks",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// The built-in 64-token vocabulary.
    pub fn standard() -> Self {
        let tokens: Vec<String> = RESERVED
            .iter()
            .chain(WORDS.iter())
            .map(|s| s.to_string())
            .collect();
        Vocabulary::from_tokens(tokens).expect("built-in vocabulary is valid")
    }

    /// Rebuilds a vocabulary from an ordered token list (checkpoint load).
    pub fn from_tokens(tokens: Vec<String>) -> ModelResult<Self> {
        if tokens.len() < 8 {
            return Err(ModelError::Config(format!(
                "vocabulary needs at least 8 tokens, got {}",
                tokens.len()
            )));
        }
        for (i, expect) in RESERVED.iter().enumerate() {
            if tokens[i] != *expect {
                return Err(ModelError::Config(format!(
                    "reserved token {i} must be {expect:?}, got {:?}",
                    tokens[i]
                )));
            }
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(ModelError::Config(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn lookup(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Lowercases, splits on whitespace, and separates terminal punctuation
    /// into its own token. Unknown words map to UNK.
    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for raw in text.split_whitespace() {
            let lower = raw.to_lowercase();
            let mut word = lower.as_str();
            let mut tail = Vec::new();
            while let Some(last) = word.chars().last() {
                if matches!(last, '?' | '.' | '!' | ',') {
                    tail.push(last.to_string());
                    word = &word[..word.len() - last.len_utf8()];
                } else {
                    break;
                }
            }
            if !word.is_empty() {
                out.push(self.lookup(word).unwrap_or(UNK));
            }
            for t in tail.iter().rev() {
                out.push(self.lookup(t).unwrap_or(UNK));
            }
        }
        out
    }

    pub fn decode(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .map(|&t| self.token(t))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// A sequence of content tokens plus whether generation ended with EOS.
/// Control tokens are excluded: EOS is represented by the flag, and PAD may
/// only appear as trailing filler.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    tokens: Vec<usize>,
    terminated: bool,
}

impl TokenSeq {
    pub fn new(tokens: Vec<usize>, terminated: bool) -> ModelResult<Self> {
        if tokens.contains(&EOS) {
            return Err(ModelError::Config(
                "EOS belongs in the terminated flag, not the token list".into(),
            ));
        }
        let mut seen_pad = false;
        for &t in &tokens {
            if t == PAD {
                seen_pad = true;
            } else if seen_pad {
                return Err(ModelError::Config("PAD before a non-PAD token".into()));
            }
        }
        Ok(TokenSeq { tokens, terminated })
    }

    pub fn empty(terminated: bool) -> Self {
        TokenSeq {
            tokens: Vec::new(),
            terminated,
        }
    }

    pub fn from_text(vocab: &Vocabulary, text: &str) -> ModelResult<Self> {
        TokenSeq::new(vocab.encode_text(text), false)
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn terminated(&self) -> bool {
        self.terminated
    }

    pub fn text(&self, vocab: &Vocabulary) -> String {
        vocab.decode(&self.tokens)
    }
}
