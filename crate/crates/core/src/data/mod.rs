//! Input layer: cleaning, char vocabulary, joint text/event-type layout,
//! gold span location, padding, and JSON Lines I/O.

pub mod synth;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synth::{generate_synthetic, SynthConfig};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const RESERVED: usize = 4;

/// One (news text, event type, entities) record.
///
/// `entities` is empty for prediction-only data. The first entity is the
/// primary one; training flattens all of them into separate inputs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RawExample {
    pub id: String,
    pub text: String,
    pub event_type: String,
    pub entities: Vec<String>,
}

impl RawExample {
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        event_type: impl Into<String>,
        entity: Option<&str>,
    ) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            event_type: event_type.into(),
            entities: entity.map(|e| vec![e.to_string()]).unwrap_or_default(),
        }
    }

    pub fn entity(&self) -> Option<&str> {
        self.entities.first().map(String::as_str)
    }
}

fn is_format_char(c: char) -> bool {
    matches!(c,
        '\u{00AD}' | '\u{061C}' | '\u{180E}' | '\u{200B}'..='\u{200F}'
        | '\u{202A}'..='\u{202E}' | '\u{2060}'..='\u{2064}' | '\u{2066}'..='\u{206F}'
        | '\u{FEFF}' | '\u{FFF9}'..='\u{FFFB}')
}

/// Removes control and zero-width/format characters and collapses whitespace
/// runs to one space. Everything else, CJK punctuation included, is kept.
pub fn clean_text(raw: &str) -> Result<String> {
    let mut out = String::with_capacity(raw.len());
    let mut pending_space = false;
    for c in raw.chars() {
        if c.is_whitespace() {
            pending_space = true;
        } else if c.is_control() || is_format_char(c) {
            continue;
        } else {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(c);
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyText);
    }
    Ok(out)
}

/// Char-level vocabulary with reserved ids PAD=0, UNK=1, CLS=2, SEP=3.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary {
    chars: Vec<char>,
    index: HashMap<char, u32>,
}

impl Vocabulary {
    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Result<Self> {
        let mut vocab = Self::default();
        for c in chars {
            if vocab.index.contains_key(&c) {
                return Err(Error::Contract(format!("duplicate vocabulary entry {c:?}")));
            }
            vocab.insert(c);
        }
        Ok(vocab)
    }

    fn insert(&mut self, c: char) -> u32 {
        *self.index.entry(c).or_insert_with(|| {
            self.chars.push(c);
            (RESERVED + self.chars.len() - 1) as u32
        })
    }

    /// Total id count including the reserved entries.
    pub fn len(&self) -> usize {
        RESERVED + self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn id(&self, c: char) -> u32 {
        self.index.get(&c).copied().unwrap_or(UNK)
    }

    pub fn char_of(&self, id: u32) -> Option<char> {
        (id as usize)
            .checked_sub(RESERVED)
            .and_then(|i| self.chars.get(i).copied())
    }

    /// Printable label for an id, used by attention dumps.
    pub fn label(&self, id: u32) -> String {
        match id {
            PAD => "[PAD]".into(),
            UNK => "[UNK]".into(),
            CLS => "[CLS]".into(),
            SEP => "[SEP]".into(),
            _ => self.char_of(id).map(String::from).unwrap_or_else(|| "[UNK]".into()),
        }
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    /// One char per line; line `i` holds id `i + 4`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for c in &self.chars {
            writeln!(w, "{c}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut chars = Vec::new();
        let body = text.strip_suffix('\n').unwrap_or(&text);
        if body.is_empty() {
            return Ok(Self::default());
        }
        for (i, line) in body.split('\n').enumerate() {
            let mut it = line.chars();
            match (it.next(), it.next()) {
                (Some(c), None) => chars.push(c),
                _ => {
                    return Err(Error::Parse {
                        line: i + 1,
                        msg: format!("expected exactly one char, got {line:?}"),
                    })
                }
            }
        }
        Self::from_chars(chars)
    }
}

/// Collects every char of the cleaned texts and event types, in first-seen
/// order.
pub fn build_vocab<'a>(corpus: impl IntoIterator<Item = &'a RawExample>) -> Vocabulary {
    let mut vocab = Vocabulary::default();
    for ex in corpus {
        for field in [&ex.text, &ex.event_type] {
            if let Ok(clean) = clean_text(field) {
                clean.chars().for_each(|c| {
                    vocab.insert(c);
                });
            }
        }
    }
    vocab
}

/// Encoded `[CLS] text [SEP] event-type [SEP] [PAD]…` sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedInput {
    pub id: String,
    pub token_ids: Vec<u32>,
    /// 0 for the text region (and CLS/first SEP/padding), 1 for the event type.
    pub segment_ids: Vec<u8>,
    pub attention_mask: Vec<bool>,
    /// Inclusive positions of the first and last text char.
    pub text_span: (usize, usize),
    /// Inclusive gold (start, end) positions into `token_ids`.
    pub gold: Option<(usize, usize)>,
    /// Cleaned text after truncation; position `p` of the text region is
    /// `text[p - text_span.0]`.
    pub text: Vec<char>,
}

impl TokenizedInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Number of non-padding positions.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m).count()
    }

    /// Positions that may hold an entity boundary.
    pub fn text_mask(&self) -> Vec<bool> {
        (0..self.len())
            .map(|p| p >= self.text_span.0 && p <= self.text_span.1)
            .collect()
    }

    /// Substring of the text addressed by inclusive layout positions.
    pub fn span_text(&self, start: usize, end: usize) -> Option<String> {
        let (first, last) = self.text_span;
        if start < first || end > last || start > end {
            return None;
        }
        Some(self.text[start - first..=end - first].iter().collect())
    }

    /// Copy padded with PAD positions up to `len`.
    pub fn padded(&self, len: usize) -> TokenizedInput {
        let mut out = self.clone();
        if len > out.len() {
            let extra = len - out.len();
            out.token_ids.extend(std::iter::repeat_n(PAD, extra));
            out.segment_ids.extend(std::iter::repeat_n(0, extra));
            out.attention_mask.extend(std::iter::repeat_n(false, extra));
        }
        out
    }
}

fn find_chars(hay: &[char], needle: &[char]) -> Option<usize> {
    if needle.is_empty() || needle.len() > hay.len() {
        return None;
    }
    hay.windows(needle.len()).position(|w| w == needle)
}

/// Encodes `ex` with its primary entity (if any) as gold.
pub fn encode_example(ex: &RawExample, vocab: &Vocabulary, max_len: usize) -> Result<TokenizedInput> {
    encode_with_entity(ex, ex.entity(), vocab, max_len)
}

/// Encodes `ex` with an explicit gold entity.
///
/// The text is truncated from the right so the whole layout fits in
/// `max_len`; the event type is never truncated. The gold span is the first
/// occurrence of the cleaned entity within the surviving text.
pub fn encode_with_entity(
    ex: &RawExample,
    entity: Option<&str>,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<TokenizedInput> {
    let text: Vec<char> = clean_text(&ex.text)?.chars().collect();
    let event: Vec<char> = clean_text(&ex.event_type)?.chars().collect();
    let budget = max_len
        .checked_sub(event.len() + 3)
        .filter(|&b| b >= 1)
        .ok_or_else(|| {
            Error::Contract(format!(
                "max_len {max_len} leaves no room for text with a {}-char event type",
                event.len()
            ))
        })?;
    let text: Vec<char> = text.into_iter().take(budget).collect();
    let n = text.len();

    let gold = match entity {
        None => None,
        Some(e) => {
            let needle: Vec<char> = clean_text(e)
                .map_err(|_| Error::GoldNotFound { id: ex.id.clone() })?
                .chars()
                .collect();
            let pos = find_chars(&text, &needle).ok_or_else(|| Error::GoldNotFound { id: ex.id.clone() })?;
            Some((1 + pos, pos + needle.len()))
        }
    };

    let total = n + event.len() + 3;
    let mut token_ids = Vec::with_capacity(total);
    let mut segment_ids = Vec::with_capacity(total);
    token_ids.push(CLS);
    token_ids.extend(text.iter().map(|&c| vocab.id(c)));
    token_ids.push(SEP);
    segment_ids.resize(n + 2, 0);
    token_ids.extend(event.iter().map(|&c| vocab.id(c)));
    token_ids.push(SEP);
    segment_ids.resize(total, 1);

    Ok(TokenizedInput {
        id: ex.id.clone(),
        token_ids,
        segment_ids,
        attention_mask: vec![true; total],
        text_span: (1, n),
        gold,
        text,
    })
}

/// Encodes one input per gold entity. Examples whose gold disappears under
/// truncation are skipped and counted.
pub fn encode_training(
    corpus: &[RawExample],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<(Vec<TokenizedInput>, usize)> {
    let mut out = Vec::new();
    let mut skipped = 0;
    for ex in corpus {
        if ex.entities.is_empty() {
            return Err(Error::Contract(format!("training example `{}` has no entity", ex.id)));
        }
        for e in &ex.entities {
            match encode_with_entity(ex, Some(e), vocab, max_len) {
                Ok(t) => out.push(t),
                Err(Error::GoldNotFound { .. }) => skipped += 1,
                Err(err) => return Err(err),
            }
        }
    }
    Ok((out, skipped))
}

/// A set of inputs padded to a common length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub seq_len: usize,
    pub items: Vec<TokenizedInput>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn token_ids(&self) -> Vec<&[u32]> {
        self.items.iter().map(|t| t.token_ids.as_slice()).collect()
    }

    pub fn segment_ids(&self) -> Vec<&[u8]> {
        self.items.iter().map(|t| t.segment_ids.as_slice()).collect()
    }

    pub fn attention_mask(&self) -> Vec<&[bool]> {
        self.items.iter().map(|t| t.attention_mask.as_slice()).collect()
    }

    pub fn gold(&self) -> Vec<Option<(usize, usize)>> {
        self.items.iter().map(|t| t.gold).collect()
    }
}

/// Pads every item to the longest one in the batch.
pub fn batch(items: &[TokenizedInput]) -> Batch {
    let seq_len = items.iter().map(TokenizedInput::len).max().unwrap_or(0);
    Batch {
        seq_len,
        items: items.iter().map(|t| t.padded(seq_len)).collect(),
    }
}

#[derive(Deserialize)]
struct JsonRecord {
    id: String,
    text: String,
    event_type: String,
    #[serde(default)]
    entity: Option<String>,
    #[serde(default)]
    entities: Option<Vec<String>>,
}

#[derive(Serialize)]
struct JsonRecordOut<'a> {
    id: &'a str,
    text: &'a str,
    event_type: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    entity: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    entities: Option<&'a [String]>,
}

/// Parses JSON Lines records; blank lines are ignored. A multi-valued
/// `entities` field takes precedence over `entity`.
pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<RawExample>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        let entities = match (rec.entities, rec.entity) {
            (Some(list), _) => list,
            (None, Some(e)) => vec![e],
            (None, None) => Vec::new(),
        };
        out.push(RawExample {
            id: rec.id,
            text: rec.text,
            event_type: rec.event_type,
            entities,
        });
    }
    Ok(out)
}

pub fn load_jsonl(path: &Path) -> Result<Vec<RawExample>> {
    read_jsonl(BufReader::new(File::open(path)?))
}

/// Writes records with `entity` for single-entity examples and `entities`
/// otherwise.
pub fn write_jsonl<W: Write>(mut w: W, corpus: &[RawExample]) -> Result<()> {
    for ex in corpus {
        let (entity, entities) = match ex.entities.len() {
            0 => (None, None),
            1 => (Some(ex.entities[0].as_str()), None),
            _ => (None, Some(ex.entities.as_slice())),
        };
        let rec = JsonRecordOut {
            id: &ex.id,
            text: &ex.text,
            event_type: &ex.event_type,
            entity,
            entities,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_jsonl(path: &Path, corpus: &[RawExample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_jsonl(&mut w, corpus)?;
    w.flush()?;
    Ok(())
}
