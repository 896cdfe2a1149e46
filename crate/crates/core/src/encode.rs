//! C lexing, vocabulary construction, and fixed-length sequence encoding.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Example, FailingCase};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const SEP: u32 = 2;
pub const RESERVED: usize = 3;
pub const DEFAULT_MAX_LEN: usize = 256;

const VOCAB_HEADER: &str = "symdistill-vocab v1";

/// Operators matched before their single-character prefixes.
const OPERATORS: [&str; 24] = [
    "<<=", ">>=", "...", "<=", ">=", "==", "!=", "&&", "||", "++", "--", "+=", "-=", "*=", "/=",
    "%=", "&=", "|=", "^=", "<<", ">>", "->", "##", "::",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Ident,
    Number,
    Str,
    Char,
    Punct,
    Preproc,
}

/// A lexed token with its byte span in the input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token<'a> {
    pub kind: TokenKind,
    pub text: &'a str,
    pub start: usize,
    pub end: usize,
}

/// Lex C source into tokens, keeping byte spans.
///
/// Comments and whitespace are dropped. Preprocessor directives become one
/// opaque token per line. Bytes that start no known token are emitted as
/// single-character tokens.
pub fn lex_spans(source: &str) -> Vec<Token<'_>> {
    let bytes = source.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    let mut line_start = true;
    while i < bytes.len() {
        let c = bytes[i];
        if c == b'\n' {
            line_start = true;
            i += 1;
            continue;
        }
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        if c == b'/' && bytes.get(i + 1) == Some(&b'/') {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        if c == b'/' && bytes.get(i + 1) == Some(&b'*') {
            i += 2;
            while i < bytes.len() && !(bytes[i] == b'*' && bytes.get(i + 1) == Some(&b'/')) {
                i += 1;
            }
            i = (i + 2).min(bytes.len());
            continue;
        }
        let start = i;
        let kind;
        if c == b'#' && line_start {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            let text = source[start..i].trim_end();
            out.push(Token {
                kind: TokenKind::Preproc,
                text,
                start,
                end: start + text.len(),
            });
            continue;
        }
        line_start = false;
        if c.is_ascii_alphabetic() || c == b'_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            kind = TokenKind::Ident;
        } else if c.is_ascii_digit() || (c == b'.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit)) {
            i = scan_number(bytes, i);
            kind = TokenKind::Number;
        } else if c == b'"' || c == b'\'' {
            i = scan_quoted(bytes, i, c);
            kind = if c == b'"' { TokenKind::Str } else { TokenKind::Char };
        } else if let Some(op) = OPERATORS.iter().find(|op| source[i..].starts_with(*op)) {
            i += op.len();
            kind = TokenKind::Punct;
        } else {
            // One full UTF-8 character, never a partial byte sequence.
            let ch_len = source[i..].chars().next().map_or(1, char::len_utf8);
            i += ch_len;
            kind = TokenKind::Punct;
        }
        out.push(Token {
            kind,
            text: &source[start..i],
            start,
            end: i,
        });
    }
    out
}

fn scan_number(bytes: &[u8], mut i: usize) -> usize {
    if bytes[i] == b'0' && matches!(bytes.get(i + 1), Some(b'x' | b'X')) {
        i += 2;
        while i < bytes.len() && bytes[i].is_ascii_hexdigit() {
            i += 1;
        }
    } else {
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'.' {
            i += 1;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
        }
        if i < bytes.len() && matches!(bytes[i], b'e' | b'E') {
            let mut j = i + 1;
            if j < bytes.len() && matches!(bytes[j], b'+' | b'-') {
                j += 1;
            }
            if j < bytes.len() && bytes[j].is_ascii_digit() {
                i = j;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
            }
        }
    }
    while i < bytes.len() && matches!(bytes[i], b'u' | b'U' | b'l' | b'L' | b'f' | b'F') {
        i += 1;
    }
    i
}

fn scan_quoted(bytes: &[u8], mut i: usize, quote: u8) -> usize {
    i += 1;
    while i < bytes.len() {
        match bytes[i] {
            b'\\' => i += 2,
            b'\n' => return i,
            b if b == quote => return i + 1,
            _ => i += 1,
        }
    }
    bytes.len()
}

/// Token texts of `source`, see [`lex_spans`].
pub fn lex_c(source: &str) -> Vec<String> {
    lex_spans(source).into_iter().map(|t| t.text.to_string()).collect()
}

/// Flat text rendering of failing behavior, the second half of the model input.
pub fn behavior_text(cases: &[FailingCase]) -> String {
    let mut out = String::new();
    for case in cases {
        let _ = writeln!(
            out,
            "input: {} expected: {} observed: {}",
            case.input.trim(),
            case.expected.trim(),
            case.observed.trim()
        );
    }
    out
}

/// Tokens of the joint program/behavior input, without the separator.
pub fn example_tokens(example: &Example) -> (Vec<String>, Vec<String>) {
    (
        lex_c(&example.buggy_source),
        lex_c(&behavior_text(&example.failing_behavior)),
    )
}

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("training split is empty")]
    EmptyTrainSplit,
    #[error("vocabulary file {path}: {message}")]
    Format { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Token to id map. Ids 0..3 are reserved for PAD, UNK and SEP.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), (i + RESERVED) as u32))
            .collect();
        Self { tokens, index }
    }

    /// Builds the vocabulary from training examples only.
    ///
    /// Tokens seen at least `min_count` times are kept, ordered by descending
    /// frequency and then lexicographically.
    pub fn build<'a, I>(train: I, min_count: usize) -> Result<Self, VocabError>
    where
        I: IntoIterator<Item = &'a Example>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut seen = 0usize;
        for example in train {
            seen += 1;
            let (program, behavior) = example_tokens(example);
            for tok in program.into_iter().chain(behavior) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if seen == 0 {
            return Err(VocabError::EmptyTrainSplit);
        }
        let mut entries: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count.max(1))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Self::from_tokens(entries.into_iter().map(|(t, _)| t).collect()))
    }

    /// Total id space including reserved ids.
    pub fn size(&self) -> usize {
        self.tokens.len() + RESERVED
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        match id {
            PAD => Some("<pad>"),
            UNK => Some("<unk>"),
            SEP => Some("<sep>"),
            _ => self.tokens.get(id as usize - RESERVED).map(String::as_str),
        }
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Serializes to the text format: a header line, then one token per line
    /// where the zero-based line index equals `id - 3`.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.tokens.len() * 6 + VOCAB_HEADER.len() + 1);
        out.push_str(VOCAB_HEADER);
        out.push('\n');
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, String> {
        let mut lines = text.lines();
        match lines.next() {
            Some(VOCAB_HEADER) => {}
            other => return Err(format!("unexpected header {other:?}")),
        }
        let tokens: Vec<String> = lines.map(str::to_string).collect();
        let vocab = Self::from_tokens(tokens);
        if vocab.index.len() != vocab.tokens.len() {
            return Err("duplicate token".into());
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text).map_err(|message| VocabError::Format {
            path: path.display().to_string(),
            message,
        })
    }

    /// Fraction of token occurrences in `examples` that map to UNK.
    pub fn oov_rate<'a, I>(&self, examples: I) -> f64
    where
        I: IntoIterator<Item = &'a Example>,
    {
        let (mut total, mut unknown) = (0usize, 0usize);
        for example in examples {
            let (program, behavior) = example_tokens(example);
            for tok in program.iter().chain(&behavior) {
                total += 1;
                if !self.contains(tok) {
                    unknown += 1;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            unknown as f64 / total as f64
        }
    }
}

/// Right-padded id sequence of exactly `max_len` entries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// Number of leading non-PAD positions.
    pub attention_len: usize,
}

impl TokenSequence {
    pub fn active(&self) -> &[u32] {
        &self.ids[..self.attention_len]
    }
}

/// Program tokens, SEP, behavior tokens; truncated from the tail, then padded.
pub fn encode(example: &Example, vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    let (program, behavior) = example_tokens(example);
    encode_tokens(&program, &behavior, vocab, max_len)
}

pub fn encode_tokens(
    program: &[String],
    behavior: &[String],
    vocab: &Vocabulary,
    max_len: usize,
) -> TokenSequence {
    let mut ids: Vec<u32> = program
        .iter()
        .map(|t| vocab.id(t))
        .chain(std::iter::once(SEP))
        .chain(behavior.iter().map(|t| vocab.id(t)))
        .take(max_len)
        .collect();
    let attention_len = ids.len();
    ids.resize(max_len, PAD);
    TokenSequence { ids, attention_len }
}
