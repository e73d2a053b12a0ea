//! Word-level forced alignments, frame-span conversion, tokenization, vocab.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const BLANK_ID: usize = 0;
pub const SOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;
pub const NUM_RESERVED: usize = 4;

const RESERVED_NAMES: [&str; NUM_RESERVED] = ["<blank>", "<sos>", "<eos>", "<unk>"];

/// One aligned word: token text plus its time extent in seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSpan {
    pub token: String,
    pub start_s: f64,
    pub dur_s: f64,
}

impl TokenSpan {
    pub fn end_s(&self) -> f64 {
        self.start_s + self.dur_s
    }
}

/// A token's extent in feature frames, `[start_frame, end_frame)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameSpan {
    pub token_index: usize,
    pub start_frame: usize,
    pub end_frame: usize,
}

/// Parse CTM text (`utt_id channel start_s dur_s token` per line) into
/// per-utterance span lists, sorted by start time and checked for overlap.
pub fn parse_ctm(text: &str) -> Result<BTreeMap<String, Vec<TokenSpan>>> {
    // Keep source line numbers so overlap errors can cite both records.
    let mut by_utt: BTreeMap<String, Vec<(usize, TokenSpan)>> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 5 fields `utt chan start dur token`, got {}", fields.len()),
            });
        }
        let start_s: f64 = fields[2]
            .parse()
            .map_err(|_| Error::Parse { line: line_no, msg: format!("bad start `{}`", fields[2]) })?;
        let dur_s: f64 = fields[3]
            .parse()
            .map_err(|_| Error::Parse { line: line_no, msg: format!("bad duration `{}`", fields[3]) })?;
        if start_s < 0.0 || !start_s.is_finite() {
            return Err(Error::Parse { line: line_no, msg: format!("negative start {start_s}") });
        }
        if dur_s <= 0.0 || !dur_s.is_finite() {
            return Err(Error::Parse { line: line_no, msg: format!("non-positive duration {dur_s}") });
        }
        by_utt.entry(fields[0].to_string()).or_default().push((
            line_no,
            TokenSpan { token: fields[4].to_string(), start_s, dur_s },
        ));
    }

    let mut out = BTreeMap::new();
    for (utt, mut spans) in by_utt {
        spans.sort_by(|a, b| a.1.start_s.partial_cmp(&b.1.start_s).unwrap());
        for w in spans.windows(2) {
            let (la, a) = (&w[0].0, &w[0].1);
            let (lb, b) = (&w[1].0, &w[1].1);
            if a.end_s() > b.start_s + 1e-9 {
                return Err(Error::Validation(format!(
                    "{utt}: spans overlap (lines {la} and {lb}: `{}` [{:.3}, {:.3}) vs `{}` [{:.3}, {:.3}))",
                    a.token,
                    a.start_s,
                    a.end_s(),
                    b.token,
                    b.start_s,
                    b.end_s(),
                )));
            }
        }
        out.insert(utt, spans.into_iter().map(|(_, s)| s).collect());
    }
    Ok(out)
}

/// Inverse of [`parse_ctm`] for valid span maps; times use the shortest
/// round-trippable decimal form so parse(serialize(x)) == x.
pub fn serialize_ctm(spans: &BTreeMap<String, Vec<TokenSpan>>) -> String {
    let mut out = String::new();
    for (utt, list) in spans {
        for s in list {
            let _ = writeln!(out, "{utt} 1 {} {} {}", s.start_s, s.dur_s, s.token);
        }
    }
    out
}

/// Convert time spans to frame spans at `frame_shift_ms`, masking
/// generously: start is floored, end is ceiled, then clipped to
/// `num_frames`. Spans that collapse to nothing are dropped.
pub fn spans_to_frames(spans: &[TokenSpan], frame_shift_ms: f64, num_frames: usize) -> Vec<FrameSpan> {
    let mut out = Vec::with_capacity(spans.len());
    for (i, s) in spans.iter().enumerate() {
        let start = (s.start_s * 1000.0 / frame_shift_ms).floor() as usize;
        let end = ((s.end_s() * 1000.0 / frame_shift_ms).ceil() as usize).min(num_frames);
        if start < end {
            out.push(FrameSpan { token_index: i, start_frame: start, end_frame: end });
        }
    }
    out
}

/// Token table with fixed reserved ids 0..4 (blank, sos, eos, unk) followed
/// by content tokens. Immutable after construction.
#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    id_of: HashMap<String, usize>,
}

impl Vocab {
    /// Build from content tokens (reserved block is added here).
    pub fn from_content(content: Vec<String>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED_NAMES.iter().map(|s| s.to_string()).collect();
        let mut id_of = HashMap::new();
        for t in content {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Validation(format!("invalid vocab token `{t}`")));
            }
            if RESERVED_NAMES.contains(&t.as_str()) || id_of.contains_key(&t) {
                return Err(Error::Validation(format!("duplicate or reserved vocab token `{t}`")));
            }
            id_of.insert(t.clone(), tokens.len());
            tokens.push(t);
        }
        Ok(Vocab { tokens, id_of })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved block is always present
    }

    pub fn id(&self, token: &str) -> usize {
        self.id_of.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn contains(&self, token: &str) -> bool {
        self.id_of.contains_key(token)
    }

    /// One content token per line; line number = id - reserved block size.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens[NUM_RESERVED..] {
            let _ = writeln!(out, "{t}");
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut content = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let t = line.trim();
            if t.is_empty() {
                return Err(Error::Parse {
                    line: idx + 1,
                    msg: "blank line in vocab file would shift ids".into(),
                });
            }
            content.push(t.to_string());
        }
        Vocab::from_content(content)
    }
}

/// Lowercased whitespace tokenization; unknown words map to `<unk>`.
/// Total on arbitrary input, never errors.
pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<usize> {
    text.split_whitespace().map(|w| vocab.id(&w.to_lowercase())).collect()
}

/// Inverse mapping for display; reserved ids are skipped.
pub fn ids_to_text(ids: &[usize], vocab: &Vocab) -> String {
    let words: Vec<&str> =
        ids.iter().filter(|&&i| i >= NUM_RESERVED && i < vocab.len()).map(|&i| vocab.token(i)).collect();
    words.join(" ")
}

/// Most-frequent-first vocabulary over lowercased corpus words, ties broken
/// lexicographically; `max_size` includes the reserved block.
pub fn build_vocab<'a, I: IntoIterator<Item = &'a str>>(lines: I, max_size: usize) -> Result<Vocab> {
    if max_size <= NUM_RESERVED {
        return Err(Error::Config(format!(
            "vocab size {max_size} leaves no room after {NUM_RESERVED} reserved ids"
        )));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    for line in lines {
        for w in line.split_whitespace() {
            let w = w.to_lowercase();
            if RESERVED_NAMES.contains(&w.as_str()) {
                continue;
            }
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - NUM_RESERVED);
    Vocab::from_content(ranked.into_iter().map(|(t, _)| t).collect())
}
