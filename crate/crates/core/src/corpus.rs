//! Annotated short texts, tokenization and query construction.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kb::CandidateOption;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;

pub const MASK_TOKEN: &str = "[MASK]";
const SPECIALS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", MASK_TOKEN];

/// A mention span in character offsets (end exclusive).
#[derive(Debug, Clone, PartialEq)]
pub struct Mention {
    pub start: usize,
    pub end: usize,
    pub surface: String,
    /// `None` in inference mode.
    pub gold: Option<CandidateOption>,
    /// Free-form label carried through the corpus file (the synthetic
    /// generator uses it to mark how a mention is meant to be resolved).
    pub tag: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedText {
    pub id: Option<String>,
    pub text: String,
    pub mentions: Vec<Mention>,
}

#[derive(Serialize, Deserialize)]
struct MentionRecord {
    start: usize,
    end: usize,
    surface: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tag: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct TextRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    text: String,
    mentions: Vec<MentionRecord>,
}

impl AnnotatedText {
    /// Validates span bounds, surfaces and ordering.
    pub fn new(id: Option<String>, text: String, mentions: Vec<Mention>) -> Result<Self> {
        let chars: Vec<char> = text.chars().collect();
        let mut prev_end = 0;
        for m in &mentions {
            if m.start >= m.end || m.end > chars.len() {
                return Err(Error::InvalidSpan {
                    start: m.start,
                    end: m.end,
                    len: chars.len(),
                });
            }
            if m.start < prev_end {
                return Err(Error::OverlappingSpans(m.start, m.end));
            }
            let covered: String = chars[m.start..m.end].iter().collect();
            if covered != m.surface {
                return Err(Error::SurfaceMismatch {
                    surface: m.surface.clone(),
                    start: m.start,
                    end: m.end,
                });
            }
            prev_end = m.end;
        }
        Ok(Self { id, text, mentions })
    }

    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }

    pub fn has_gold(&self) -> bool {
        self.mentions.iter().all(|m| m.gold.is_some())
    }
}

pub fn read_corpus<R: BufRead>(reader: R) -> Result<Vec<AnnotatedText>> {
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TextRecord = serde_json::from_str(&line)
            .map_err(|err| Error::Format(format!("corpus line {}: {err}", lineno + 1)))?;
        let mentions = rec
            .mentions
            .into_iter()
            .map(|m| Mention {
                start: m.start,
                end: m.end,
                surface: m.surface,
                gold: m.gold.as_deref().map(CandidateOption::from_label),
                tag: m.tag,
            })
            .collect();
        let text = AnnotatedText::new(rec.id, rec.text, mentions)
            .map_err(|err| Error::Format(format!("corpus line {}: {err}", lineno + 1)))?;
        out.push(text);
    }
    Ok(out)
}

pub fn write_corpus<W: Write>(mut w: W, texts: &[AnnotatedText]) -> Result<()> {
    for t in texts {
        let rec = TextRecord {
            id: t.id.clone(),
            text: t.text.clone(),
            mentions: t
                .mentions
                .iter()
                .map(|m| MentionRecord {
                    start: m.start,
                    end: m.end,
                    surface: m.surface.clone(),
                    gold: m.gold.as_ref().map(|g| g.label().to_string()),
                    tag: m.tag.clone(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn is_unspaced_script(c: char) -> bool {
    matches!(c as u32,
        0x3040..=0x30FF   // kana
        | 0x3400..=0x4DBF // CJK ext A
        | 0x4E00..=0x9FFF // CJK unified
        | 0xAC00..=0xD7AF // hangul syllables
        | 0xF900..=0xFAFF // CJK compatibility
        | 0x20000..=0x2FA1F)
}

fn is_split_char(c: char) -> bool {
    is_unspaced_script(c) || c.is_ascii_punctuation() || matches!(c as u32, 0x3000..=0x303F | 0xFF00..=0xFF0F)
}

fn split_plain(chunk: &str, out: &mut Vec<String>) {
    let mut run = String::new();
    for c in chunk.chars() {
        if is_split_char(c) {
            if !run.is_empty() {
                out.push(std::mem::take(&mut run));
            }
            out.push(c.to_lowercase().collect());
        } else {
            run.extend(c.to_lowercase());
        }
    }
    if !run.is_empty() {
        out.push(run);
    }
}

/// Splits text into token strings.
///
/// Whitespace separates words; characters of unspaced scripts (CJK, kana,
/// hangul) and punctuation become single-character tokens. Special tokens
/// such as `[MASK]` are kept verbatim wherever they occur.
pub fn pieces(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut rest = chunk;
        while !rest.is_empty() {
            let hit = SPECIALS
                .iter()
                .filter_map(|s| rest.find(s).map(|pos| (pos, *s)))
                .min_by_key(|&(pos, _)| pos);
            match hit {
                Some((pos, special)) => {
                    split_plain(&rest[..pos], &mut out);
                    out.push(special.to_string());
                    rest = &rest[pos + special.len()..];
                }
                None => {
                    split_plain(rest, &mut out);
                    rest = "";
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(Vec::new()).expect("reserved tokens are distinct")
    }
}

impl Vocabulary {
    /// Builds a vocabulary from an ordered token list; reserved tokens are
    /// always placed at ids 0..5 and skipped if present in `tokens`.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut vocab = Self {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for s in SPECIALS {
            vocab.push(s.to_string());
        }
        for t in tokens {
            if SPECIALS.contains(&t.as_str()) {
                continue;
            }
            if vocab.ids.contains_key(&t) {
                return Err(Error::Format(format!("duplicate vocabulary token `{t}`")));
            }
            vocab.push(t);
        }
        Ok(vocab)
    }

    /// Vocabulary over every token of `texts`, in first-seen order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut vocab = Self::default();
        for text in texts {
            for p in pieces(text) {
                if !vocab.ids.contains_key(&p) {
                    vocab.push(p);
                }
            }
        }
        vocab
    }

    fn push(&mut self, token: String) {
        let id = self.tokens.len() as u32;
        self.ids.insert(token.clone(), id);
        self.tokens.push(token);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Tokens after the reserved block, in id order.
    pub fn user_tokens(&self) -> &[String] {
        &self.tokens[SPECIALS.len()..]
    }

    pub fn insert(&mut self, token: &str) -> u32 {
        match self.ids.get(token) {
            Some(&id) => id,
            None => {
                self.push(token.to_string());
                self.tokens.len() as u32 - 1
            }
        }
    }
}

pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<u32> {
    pieces(text)
        .iter()
        .map(|p| vocab.id(p).unwrap_or(UNK))
        .collect()
}

pub fn detokenize(ids: &[u32], vocab: &Vocabulary) -> String {
    ids.iter()
        .map(|&id| vocab.token(id).unwrap_or("[UNK]"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Replace character spans right to left; `edits` must not overlap.
fn splice(text: &str, mut edits: Vec<(usize, usize, &str)>) -> Result<String> {
    edits.sort_by_key(|e| e.0);
    for pair in edits.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(Error::OverlappingSpans(pair[1].0, pair[1].1));
        }
    }
    let mut chars: Vec<char> = text.chars().collect();
    for (start, end, replacement) in edits.into_iter().rev() {
        chars.splice(start..end, replacement.chars());
    }
    Ok(chars.into_iter().collect())
}

/// The text with mention `target` replaced by `[MASK]`.
pub fn build_query(text: &AnnotatedText, target: usize) -> String {
    let m = &text.mentions[target];
    splice(&text.text, vec![(m.start, m.end, MASK_TOKEN)]).expect("single edit cannot overlap")
}

/// Query for `target` after earlier turns linked other mentions.
///
/// `history` maps mention index → linked canonical name, `None` for NIL
/// (whose surface is kept).
pub fn update_query(
    text: &AnnotatedText,
    target: usize,
    history: &BTreeMap<usize, Option<String>>,
) -> Result<String> {
    let mut edits = Vec::with_capacity(history.len() + 1);
    for (&idx, name) in history {
        if idx == target {
            continue;
        }
        let m = text.mentions.get(idx).ok_or(Error::InvalidSpan {
            start: idx,
            end: idx,
            len: text.mentions.len(),
        })?;
        if let Some(name) = name {
            edits.push((m.start, m.end, name.as_str()));
        }
    }
    let m = &text.mentions[target];
    edits.push((m.start, m.end, MASK_TOKEN));
    splice(&text.text, edits)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Cls,
    Description,
    Query,
    Option,
    Separator,
    Padding,
}

/// Encoder input: token ids with aligned segment tags.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub segments: Vec<Segment>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Appends `n` padding positions holding arbitrary ids.
    pub fn padded_with(mut self, fill: &[u32]) -> Self {
        for &id in fill {
            self.ids.push(id);
            self.segments.push(Segment::Padding);
        }
        self
    }

    fn push_run(&mut self, ids: &[u32], seg: Segment) {
        self.ids.extend_from_slice(ids);
        self.segments.extend(std::iter::repeat_n(seg, ids.len()));
        self.ids.push(SEP);
        self.segments.push(Segment::Separator);
    }
}

/// `[CLS] D [SEP] Q [SEP] O [SEP]`, trimming the description tail to fit.
pub fn assemble_option_sequence(
    description: &str,
    query: &str,
    option_name: &str,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<TokenSequence> {
    if max_len < 8 {
        return Err(Error::InvalidConfig(format!("max_len {max_len} is below 8")));
    }
    let mut desc = tokenize(description, vocab);
    let q = tokenize(query, vocab);
    let o = tokenize(option_name, vocab);
    let fixed = 4 + q.len() + o.len();
    if fixed > max_len {
        return Err(Error::SequenceOverflow {
            needed: fixed,
            max: max_len,
        });
    }
    desc.truncate(max_len - fixed);
    let mut seq = TokenSequence {
        ids: vec![CLS],
        segments: vec![Segment::Cls],
    };
    seq.push_run(&desc, Segment::Description);
    seq.push_run(&q, Segment::Query);
    seq.push_run(&o, Segment::Option);
    Ok(seq)
}

/// `[CLS] Q [SEP]` for the query-only linkability judgement.
pub fn assemble_query_sequence(query: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    let q = tokenize(query, vocab);
    if q.len() + 2 > max_len {
        return Err(Error::SequenceOverflow {
            needed: q.len() + 2,
            max: max_len,
        });
    }
    let mut seq = TokenSequence {
        ids: vec![CLS],
        segments: vec![Segment::Cls],
    };
    seq.push_run(&q, Segment::Query);
    Ok(seq)
}
