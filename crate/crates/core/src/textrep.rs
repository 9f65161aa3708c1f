//! Tokenization, title/description imputation, pin text assembly and
//! cross-encoder input construction.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{read_jsonl, write_jsonl, PinDocument};
use crate::error::{Error, Result};
use crate::hash::Fnv1a;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const SEP: TokenId = 1;
pub const UNK: TokenId = 2;
pub const FIELD: TokenId = 3;

const RESERVED: [&str; 4] = ["[PAD]", "[SEP]", "[UNK]", "[FIELD]"];

/// Segment id of query-side positions (including the separator).
pub const QUERY_SEGMENT: u8 = 0;
pub const PIN_SEGMENT: u8 = 1;

/// Lowercases, splits on whitespace and punctuation, and emits CJK
/// characters as single-character tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if is_cjk(ch) {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(ch.to_string());
        } else if ch.is_alphanumeric() {
            current.push(ch);
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

fn is_cjk(ch: char) -> bool {
    matches!(ch as u32,
        0x3040..=0x30FF      // Hiragana, Katakana
        | 0x3400..=0x4DBF    // CJK Extension A
        | 0x4E00..=0x9FFF    // CJK Unified Ideographs
        | 0xAC00..=0xD7AF    // Hangul syllables
        | 0xF900..=0xFAFF    // CJK Compatibility Ideographs
        | 0x20000..=0x2FA1F) // Extensions B+ and compatibility supplement
}

/// Fills an empty title from the link title and an empty description from
/// the link description.
pub fn impute_title_description(pin: &PinDocument) -> PinDocument {
    let mut out = pin.clone();
    if out.title.is_empty() {
        out.title = pin.link_title.clone();
    }
    if out.description.is_empty() {
        out.description = pin.link_description.clone();
    }
    out
}

/// Text-field families of a pin, listed in the default assembly order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    SyntheticCaption,
    Title,
    Description,
    LinkTitle,
    LinkDescription,
    BoardTitles,
    EngagedQueryTokens,
}

impl Field {
    pub const ALL: [Field; 7] = [
        Field::SyntheticCaption,
        Field::Title,
        Field::Description,
        Field::LinkTitle,
        Field::LinkDescription,
        Field::BoardTitles,
        Field::EngagedQueryTokens,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Field::SyntheticCaption => "synthetic_caption",
            Field::Title => "title",
            Field::Description => "description",
            Field::LinkTitle => "link_title",
            Field::LinkDescription => "link_description",
            Field::BoardTitles => "board_titles",
            Field::EngagedQueryTokens => "engaged_query_tokens",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Tokens contributed by one field family of `pin`.
///
/// Board titles are deduplicated as strings before tokenizing; the engaged
/// query tokens contribute each unique token once.
pub fn field_tokens(pin: &PinDocument, field: Field) -> Vec<String> {
    match field {
        Field::SyntheticCaption => tokenize(&pin.synthetic_caption),
        Field::Title => tokenize(&pin.title),
        Field::Description => tokenize(&pin.description),
        Field::LinkTitle => tokenize(&pin.link_title),
        Field::LinkDescription => tokenize(&pin.link_description),
        Field::BoardTitles => {
            let mut seen = HashSet::new();
            pin.board_titles
                .iter()
                .filter(|t| seen.insert(t.as_str()))
                .flat_map(|t| tokenize(t))
                .collect()
        }
        Field::EngagedQueryTokens => {
            let mut seen = HashSet::new();
            pin.engaged_query_tokens
                .iter()
                .flat_map(|t| tokenize(t))
                .filter(|t| seen.insert(t.clone()))
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextRepConfig {
    pub max_len: usize,
    pub field_order: Vec<Field>,
    pub include_field_delimiters: bool,
}

impl Default for TextRepConfig {
    fn default() -> Self {
        TextRepConfig {
            max_len: 64,
            field_order: Field::ALL.to_vec(),
            include_field_delimiters: true,
        }
    }
}

impl TextRepConfig {
    pub const MIN_LEN: usize = 8;

    pub fn validate(&self) -> Result<()> {
        if self.max_len < Self::MIN_LEN {
            return Err(Error::Validation(format!(
                "max_len {} below minimum {}",
                self.max_len,
                Self::MIN_LEN
            )));
        }
        Ok(())
    }
}

/// Frozen token-to-id mapping. Ids 0..=3 are reserved for
/// `[PAD]`, `[SEP]`, `[UNK]` and `[FIELD]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

#[derive(Debug, Serialize, Deserialize)]
struct VocabEntry {
    token: String,
    id: TokenId,
}

impl Vocabulary {
    /// Builds a vocabulary over every distinct token in `tokens`. Ids after
    /// the reserved block follow lexicographic token order, so the result
    /// does not depend on input order.
    pub fn build<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let distinct: BTreeSet<String> = tokens
            .into_iter()
            .map(|t| t.as_ref().to_owned())
            .filter(|t| !RESERVED.contains(&t.as_str()))
            .collect();
        let all = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(distinct)
            .collect();
        Self::from_tokens(all)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Vocabulary { tokens, ids }
    }

    /// Vocabulary over all query texts and pin fields of a corpus.
    pub fn from_corpus<'a>(
        queries: impl IntoIterator<Item = &'a str>,
        pins: &[PinDocument],
    ) -> Self {
        let mut all = Vec::new();
        for q in queries {
            all.extend(tokenize(q));
        }
        for pin in pins {
            let pin = impute_title_description(pin);
            for f in Field::ALL {
                all.extend(field_tokens(&pin, f));
            }
        }
        Self::build(all)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or `UNK` when out of vocabulary.
    pub fn id(&self, token: &str) -> TokenId {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// FNV-1a fingerprint over the tokens in id order.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv1a::new();
        for t in &self.tokens {
            h.write(t.as_bytes()).write(&[0]);
        }
        h.finish()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let entries: Vec<VocabEntry> = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| VocabEntry {
                token: t.clone(),
                id: i as TokenId,
            })
            .collect();
        write_jsonl(path, &entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut entries: Vec<VocabEntry> = read_jsonl(path)?;
        entries.sort_by_key(|e| e.id);
        for (i, e) in entries.iter().enumerate() {
            if e.id as usize != i {
                return Err(Error::Validation(format!(
                    "vocabulary ids must be dense; missing id {i}"
                )));
            }
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if entries.get(i).map(|e| e.token.as_str()) != Some(r) {
                return Err(Error::Validation(format!(
                    "vocabulary id {i} must be {r}"
                )));
            }
        }
        let vocab = Self::from_tokens(entries.into_iter().map(|e| e.token).collect());
        if vocab.ids.len() != vocab.tokens.len() {
            return Err(Error::Validation("vocabulary has duplicate tokens".into()));
        }
        Ok(vocab)
    }
}

/// Concatenates the tokenized field families in `config.field_order`,
/// separated by `[FIELD]` when delimiters are enabled, and truncates the tail
/// to `config.max_len`. Empty families contribute nothing, not even a
/// delimiter.
pub fn assemble_pin_text(
    pin: &PinDocument,
    vocab: &Vocabulary,
    config: &TextRepConfig,
) -> Vec<TokenId> {
    let mut out: Vec<TokenId> = Vec::new();
    for &field in &config.field_order {
        if out.len() >= config.max_len {
            break;
        }
        let toks = field_tokens(pin, field);
        if toks.is_empty() {
            continue;
        }
        if config.include_field_delimiters && !out.is_empty() {
            out.push(FIELD);
        }
        out.extend(toks.iter().map(|t| vocab.id(t)));
    }
    out.truncate(config.max_len);
    out
}

/// Joint query/pin token sequence with parallel segment ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub tokens: Vec<TokenId>,
    pub segment_ids: Vec<u8>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// `query ++ [SEP] ++ pin`, truncating only the pin tail to fit `max_len`.
pub fn build_crossencoder_input(
    query_tokens: &[TokenId],
    pin_tokens: &[TokenId],
    max_len: usize,
) -> Result<TokenSeq> {
    let head = query_tokens.len() + 1;
    if head > max_len {
        return Err(Error::InputTooLong(format!(
            "query of {} tokens plus separator exceeds max_len {max_len}",
            query_tokens.len()
        )));
    }
    let pin_take = pin_tokens.len().min(max_len - head);
    let mut tokens = Vec::with_capacity(head + pin_take);
    tokens.extend_from_slice(query_tokens);
    tokens.push(SEP);
    tokens.extend_from_slice(&pin_tokens[..pin_take]);
    let mut segment_ids = vec![QUERY_SEGMENT; head];
    segment_ids.resize(head + pin_take, PIN_SEGMENT);
    Ok(TokenSeq {
        tokens,
        segment_ids,
    })
}

/// Full input pipeline for one `(query text, pin)` pair: tokenize, impute,
/// assemble and join.
pub fn encode_pair(
    query_text: &str,
    pin: &PinDocument,
    vocab: &Vocabulary,
    config: &TextRepConfig,
) -> Result<TokenSeq> {
    let query = vocab.encode(&tokenize(query_text));
    let pin = impute_title_description(pin);
    let pin_tokens = assemble_pin_text(&pin, vocab, config);
    build_crossencoder_input(&query, &pin_tokens, config.max_len)
}
