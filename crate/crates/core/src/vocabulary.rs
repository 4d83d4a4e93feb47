//! Token space: ICD-10 level-3 event codes plus a handful of special tokens.
//!
//! The on-disk format is a UTF-8 text file with one `code<TAB>kind<TAB>label`
//! record per line. Ids are assigned by line order starting at 0, and lines
//! beginning with `#` (as well as blank lines) are skipped.

use std::collections::HashMap;
use std::fmt;
use std::io::Read;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Contiguous 0-based token id.
pub type TokenId = usize;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("line {line}: malformed record: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: duplicate code {code:?} (first defined on line {first_line})")]
    DuplicateCode {
        line: usize,
        code: String,
        first_line: usize,
    },
    #[error("record {index}: token id {id} is duplicated or out of sequence")]
    NonContiguousId { index: usize, id: TokenId },
    #[error("vocabulary has no terminal token")]
    MissingTerminal,
    #[error("vocabulary has no event token")]
    MissingEvent,
    #[error("unknown code {0:?}")]
    UnknownCode(String),
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: TokenId, size: usize },
    #[error("vocabulary is not valid UTF-8: {0}")]
    Encoding(#[from] std::string::FromUtf8Error),
    #[error("i/o error reading vocabulary: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenKind {
    /// An ordinary diagnosis event.
    Event,
    /// Ends a trajectory when generated (e.g. DEATH).
    Terminal,
    /// Never sampled, never emitted.
    Padding,
    /// Time-invariant covariate such as sex; kept under context truncation.
    Static,
}

impl TokenKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TokenKind::Event => "event",
            TokenKind::Terminal => "terminal",
            TokenKind::Padding => "padding",
            TokenKind::Static => "static",
        }
    }
}

impl fmt::Display for TokenKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TokenKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "event" => Ok(TokenKind::Event),
            "terminal" => Ok(TokenKind::Terminal),
            "padding" => Ok(TokenKind::Padding),
            "static" => Ok(TokenKind::Static),
            other => Err(format!("unknown token kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub id: TokenId,
    pub code: String,
    pub label: String,
    pub kind: TokenKind,
}

/// Immutable bidirectional code/id mapping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<Token>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Builds a vocabulary from already-constructed tokens, checking every
    /// invariant. Codes are upper-cased.
    pub fn from_tokens(tokens: Vec<Token>) -> Result<Self, VocabError> {
        let mut index = HashMap::with_capacity(tokens.len());
        let mut normalized = Vec::with_capacity(tokens.len());
        for (i, mut tok) in tokens.into_iter().enumerate() {
            if tok.id != i {
                return Err(VocabError::NonContiguousId { index: i, id: tok.id });
            }
            tok.code = normalize_code(&tok.code);
            validate_code(&tok.code).map_err(|reason| VocabError::Malformed {
                line: i + 1,
                reason,
            })?;
            if let Some(&first) = index.get(&tok.code) {
                return Err(VocabError::DuplicateCode {
                    line: i + 1,
                    code: tok.code,
                    first_line: first + 1,
                });
            }
            index.insert(tok.code.clone(), i);
            normalized.push(tok);
        }
        Self::finish(normalized, index)
    }

    fn finish(tokens: Vec<Token>, index: HashMap<String, TokenId>) -> Result<Self, VocabError> {
        if !tokens.iter().any(|t| t.kind == TokenKind::Terminal) {
            return Err(VocabError::MissingTerminal);
        }
        if !tokens.iter().any(|t| t.kind == TokenKind::Event) {
            return Err(VocabError::MissingEvent);
        }
        Ok(Self { tokens, index })
    }

    pub fn load<R: Read>(mut source: R) -> Result<Self, VocabError> {
        let mut buf = Vec::new();
        source.read_to_end(&mut buf)?;
        Self::parse(&String::from_utf8(buf)?)
    }

    pub fn parse(text: &str) -> Result<Self, VocabError> {
        let mut tokens = Vec::new();
        let mut index = HashMap::new();
        // code -> line number, for diagnostics
        let mut lines_of: HashMap<String, usize> = HashMap::new();

        for (lineno, raw) in text.split('\n').enumerate() {
            let line_no = lineno + 1;
            let line = raw.strip_suffix('\r').unwrap_or(raw);
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.splitn(3, '\t');
            let (code, kind, label) = match (fields.next(), fields.next(), fields.next()) {
                (Some(c), Some(k), Some(l)) => (c, k, l),
                _ => {
                    return Err(VocabError::Malformed {
                        line: line_no,
                        reason: "expected code<TAB>kind<TAB>label".into(),
                    })
                }
            };
            let code = normalize_code(code);
            validate_code(&code).map_err(|reason| VocabError::Malformed {
                line: line_no,
                reason,
            })?;
            let kind = kind.parse::<TokenKind>().map_err(|reason| VocabError::Malformed {
                line: line_no,
                reason,
            })?;
            if let Some(&first_line) = lines_of.get(&code) {
                return Err(VocabError::DuplicateCode {
                    line: line_no,
                    code,
                    first_line,
                });
            }
            let id = tokens.len();
            lines_of.insert(code.clone(), line_no);
            index.insert(code.clone(), id);
            tokens.push(Token {
                id,
                code,
                label: label.to_string(),
                kind,
            });
        }
        Self::finish(tokens, index)
    }

    /// Canonical serialized form. Parsing the output yields an equal vocabulary.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(&t.code);
            out.push('\t');
            out.push_str(t.kind.as_str());
            out.push('\t');
            out.push_str(&t.label);
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Case-insensitive code lookup. Unknown codes are an error; there is no
    /// unknown-token fallback.
    pub fn encode(&self, code: &str) -> Result<TokenId, VocabError> {
        self.index
            .get(&normalize_code(code))
            .copied()
            .ok_or_else(|| VocabError::UnknownCode(code.to_string()))
    }

    pub fn decode(&self, id: TokenId) -> Result<&Token, VocabError> {
        self.tokens.get(id).ok_or(VocabError::IdOutOfRange {
            id,
            size: self.tokens.len(),
        })
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn kind(&self, id: TokenId) -> Option<TokenKind> {
        self.tokens.get(id).map(|t| t.kind)
    }

    pub fn ids_of_kind(&self, kind: TokenKind) -> impl Iterator<Item = TokenId> + '_ {
        self.tokens.iter().filter(move |t| t.kind == kind).map(|t| t.id)
    }

    /// Tokens whose code or label contains `needle` (case-insensitive).
    pub fn search<'a>(&'a self, needle: &str) -> impl Iterator<Item = &'a Token> + 'a {
        let needle = needle.to_lowercase();
        self.tokens.iter().filter(move |t| {
            needle.is_empty()
                || t.code.to_lowercase().contains(&needle)
                || t.label.to_lowercase().contains(&needle)
        })
    }
}

fn normalize_code(code: &str) -> String {
    code.trim().to_ascii_uppercase()
}

fn validate_code(code: &str) -> Result<(), String> {
    if code.is_empty() {
        return Err("empty code".into());
    }
    if code.chars().any(char::is_whitespace) {
        return Err(format!("code {code:?} contains whitespace"));
    }
    Ok(())
}
