//! Shared token vocabulary for actions, observations and task instructions.
//!
//! Every token is a single word. Ids are stable: the table below is the
//! canonical order and a checkpoint's embedding rows are indexed by it.

use std::collections::HashMap;
use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index into the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(pub u16);

impl Token {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// What a token means to the action parser.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenClass {
    Special,
    Verb(Verb),
    Receptacle,
    Object,
    Room,
    Word,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verb {
    Go,
    Take,
    Put,
    Open,
    Close,
}

pub const SPECIALS: [&str; 3] = ["<bos>", "<eos>", "<sep>"];
pub const VERBS: [&str; 5] = ["go", "take", "put", "open", "close"];
/// Plain surfaces; layouts draw these first.
pub const PLAIN_RECEPTACLES: [&str; 9] = [
    "table", "counter", "shelf", "desk", "sofa", "bed", "sink", "stove", "dresser",
];
/// Receptacles with a door.
pub const OPENABLE_RECEPTACLES: [&str; 4] = ["drawer", "cabinet", "fridge", "safe"];
pub const OBJECTS: [&str; 10] = [
    "apple", "mug", "book", "key", "pen", "plate", "cup", "phone", "towel", "bowl",
];
pub const ROOMS: [&str; 3] = ["kitchen", "bedroom", "bathroom"];
pub const WORDS: [&str; 30] = [
    "you", "arrive", "at", "see", "nothing", "happens", "pick", "up", "in", "is", "closed",
    "task", "complete", "and", "are", "to", "from", "the", "a", "it", "now", "room", "done",
    "hand", "full", "empty", "already", "not", "here", "holding",
];

pub const BOS: Token = Token(0);
pub const EOS: Token = Token(1);
pub const SEP: Token = Token(2);

/// Ordered token table.
#[derive(Debug)]
pub struct Vocabulary {
    words: Vec<&'static str>,
    classes: Vec<TokenClass>,
    lookup: HashMap<&'static str, Token>,
}

impl Vocabulary {
    fn build() -> Self {
        let mut words = Vec::new();
        let mut classes = Vec::new();
        for w in SPECIALS {
            words.push(w);
            classes.push(TokenClass::Special);
        }
        for (w, v) in VERBS.iter().zip([Verb::Go, Verb::Take, Verb::Put, Verb::Open, Verb::Close]) {
            words.push(*w);
            classes.push(TokenClass::Verb(v));
        }
        for w in PLAIN_RECEPTACLES.iter().chain(OPENABLE_RECEPTACLES.iter()) {
            words.push(*w);
            classes.push(TokenClass::Receptacle);
        }
        for w in OBJECTS {
            words.push(w);
            classes.push(TokenClass::Object);
        }
        for w in ROOMS {
            words.push(w);
            classes.push(TokenClass::Room);
        }
        for w in WORDS {
            words.push(w);
            classes.push(TokenClass::Word);
        }
        let lookup = words
            .iter()
            .enumerate()
            .map(|(i, w)| (*w, Token(i as u16)))
            .collect::<HashMap<_, _>>();
        assert_eq!(lookup.len(), words.len(), "duplicate vocabulary entry");
        Self { words, classes, lookup }
    }

    /// The process-wide vocabulary.
    pub fn get() -> &'static Vocabulary {
        static VOCAB: OnceLock<Vocabulary> = OnceLock::new();
        VOCAB.get_or_init(Vocabulary::build)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, token: Token) -> &'static str {
        self.words[token.index()]
    }

    pub fn class(&self, token: Token) -> TokenClass {
        self.classes[token.index()]
    }

    pub fn token(&self, word: &str) -> Result<Token> {
        self.lookup
            .get(word)
            .copied()
            .ok_or_else(|| Error::Input(format!("unknown token `{word}`")))
    }

    /// Panicking lookup for words known at compile time.
    pub fn tok(&self, word: &str) -> Token {
        self.token(word)
            .unwrap_or_else(|_| panic!("`{word}` is not in the vocabulary"))
    }

    pub fn contains(&self, token: Token) -> bool {
        token.index() < self.len()
    }

    pub fn check(&self, tokens: &[Token]) -> Result<()> {
        match tokens.iter().find(|t| !self.contains(**t)) {
            Some(t) => Err(Error::Input(format!("token id {} outside vocabulary", t.0))),
            None => Ok(()),
        }
    }

    /// Whitespace-separated words to tokens.
    pub fn encode(&self, text: &str) -> Result<Vec<Token>> {
        text.split_whitespace().map(|w| self.token(w)).collect()
    }

    pub fn decode(&self, tokens: &[Token]) -> String {
        tokens
            .iter()
            .map(|t| {
                if self.contains(*t) {
                    self.word(*t).to_string()
                } else {
                    format!("<{}>", t.0)
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn verb_token(&self, verb: Verb) -> Token {
        self.tok(match verb {
            Verb::Go => "go",
            Verb::Take => "take",
            Verb::Put => "put",
            Verb::Open => "open",
            Verb::Close => "close",
        })
    }
}

/// Helper for displaying token sequences.
pub struct Words<'a>(pub &'a [Token]);

impl fmt::Display for Words<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&Vocabulary::get().decode(self.0))
    }
}
