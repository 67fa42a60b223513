//! Named-entity category inventory and the three interchangeable encodings of
//! an annotated sentence: span lists, inline tag tokens and per-token labels.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// One of the 18 OntoNotes entity categories, or `O` for tokens outside any entity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NeCategory {
    O,
    Person,
    Norp,
    Fac,
    Org,
    Gpe,
    Loc,
    Product,
    Event,
    WorkOfArt,
    Law,
    Language,
    Date,
    Time,
    Percent,
    Money,
    Quantity,
    Ordinal,
    Cardinal,
}

/// Size of the label space of the parallel tag head (18 categories plus `O`).
pub const NUM_LABELS: usize = 19;
/// Number of inline tag tokens (one open and one close tag per category).
pub const NUM_TAG_TOKENS: usize = 36;

impl NeCategory {
    /// All 19 labels in head-index order; `O` is index 0.
    pub const ALL: [NeCategory; NUM_LABELS] = [
        NeCategory::O,
        NeCategory::Person,
        NeCategory::Norp,
        NeCategory::Fac,
        NeCategory::Org,
        NeCategory::Gpe,
        NeCategory::Loc,
        NeCategory::Product,
        NeCategory::Event,
        NeCategory::WorkOfArt,
        NeCategory::Law,
        NeCategory::Language,
        NeCategory::Date,
        NeCategory::Time,
        NeCategory::Percent,
        NeCategory::Money,
        NeCategory::Quantity,
        NeCategory::Ordinal,
        NeCategory::Cardinal,
    ];

    /// The 18 entity categories (everything but `O`).
    pub fn entities() -> &'static [NeCategory] {
        &Self::ALL[1..]
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<NeCategory> {
        Self::ALL.get(i).copied()
    }

    pub fn is_entity(self) -> bool {
        self != NeCategory::O
    }

    pub fn name(self) -> &'static str {
        match self {
            NeCategory::O => "O",
            NeCategory::Person => "PERSON",
            NeCategory::Norp => "NORP",
            NeCategory::Fac => "FAC",
            NeCategory::Org => "ORG",
            NeCategory::Gpe => "GPE",
            NeCategory::Loc => "LOC",
            NeCategory::Product => "PRODUCT",
            NeCategory::Event => "EVENT",
            NeCategory::WorkOfArt => "WORK_OF_ART",
            NeCategory::Law => "LAW",
            NeCategory::Language => "LANGUAGE",
            NeCategory::Date => "DATE",
            NeCategory::Time => "TIME",
            NeCategory::Percent => "PERCENT",
            NeCategory::Money => "MONEY",
            NeCategory::Quantity => "QUANTITY",
            NeCategory::Ordinal => "ORDINAL",
            NeCategory::Cardinal => "CARDINAL",
        }
    }

    /// `<CAT>`; `None` for `O`.
    pub fn open_tag(self) -> Option<String> {
        self.is_entity().then(|| format!("<{}>", self.name()))
    }

    /// `</CAT>`; `None` for `O`.
    pub fn close_tag(self) -> Option<String> {
        self.is_entity().then(|| format!("</{}>", self.name()))
    }

    /// Every inline tag token, open tags first, in category order.
    pub fn tag_tokens() -> Vec<String> {
        let entities = Self::entities();
        entities
            .iter()
            .filter_map(|c| c.open_tag())
            .chain(entities.iter().filter_map(|c| c.close_tag()))
            .collect()
    }
}

impl fmt::Display for NeCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NeCategory {
    type Err = TagError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| TagError::UnknownCategory(s.to_string()))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TagError {
    #[error("unknown NE category `{0}`")]
    UnknownCategory(String),
    #[error("unbalanced tag at position {position}: {kind}")]
    UnbalancedTag { position: usize, kind: UnbalancedKind },
    #[error("invalid span {start}..{end}: {reason}")]
    InvalidSpan {
        start: usize,
        end: usize,
        reason: &'static str,
    },
    #[error("length mismatch: {tokens} tokens vs {labels} labels")]
    LengthMismatch { tokens: usize, labels: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnbalancedKind {
    CloseWithoutOpen,
    UnclosedAtEnd,
    Mismatched,
    Nested,
    Empty,
}

impl fmt::Display for UnbalancedKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            UnbalancedKind::CloseWithoutOpen => "close tag without open tag",
            UnbalancedKind::UnclosedAtEnd => "open tag never closed",
            UnbalancedKind::Mismatched => "close tag does not match open tag",
            UnbalancedKind::Nested => "nested open tag",
            UnbalancedKind::Empty => "entity encloses no tokens",
        };
        f.write_str(s)
    }
}

/// A typed entity over the half-open token range `start..end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NeSpan {
    pub start: usize,
    pub end: usize,
    pub category: NeCategory,
}

impl NeSpan {
    pub fn new(start: usize, end: usize, category: NeCategory) -> Self {
        NeSpan {
            start,
            end,
            category,
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Surface tokens plus a flat, sorted, non-overlapping list of entity spans.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct AnnotatedText {
    pub tokens: Vec<String>,
    pub spans: Vec<NeSpan>,
}

impl AnnotatedText {
    /// Builds a text after checking the span invariants.
    pub fn new(tokens: Vec<String>, spans: Vec<NeSpan>) -> Result<Self, TagError> {
        let text = AnnotatedText { tokens, spans };
        text.validate()?;
        Ok(text)
    }

    pub fn plain<S: AsRef<str>>(tokens: &[S]) -> Self {
        AnnotatedText {
            tokens: tokens.iter().map(|t| t.as_ref().to_string()).collect(),
            spans: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), TagError> {
        let mut prev_end = 0;
        for span in &self.spans {
            let bad = |reason| TagError::InvalidSpan {
                start: span.start,
                end: span.end,
                reason,
            };
            if span.start >= span.end {
                return Err(bad("empty or reversed"));
            }
            if span.end > self.tokens.len() {
                return Err(bad("past end of tokens"));
            }
            if span.start < prev_end {
                return Err(bad("overlapping or unsorted"));
            }
            if !span.category.is_entity() {
                return Err(bad("category O is not an entity"));
            }
            prev_end = span.end;
        }
        Ok(())
    }

    /// Tokens of `span` joined by single spaces.
    pub fn surface(&self, span: &NeSpan) -> String {
        self.tokens[span.start..span.end].join(" ")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Per-token labels aligned 1:1 with `AnnotatedText::tokens`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelLabels {
    pub labels: Vec<NeCategory>,
}

/// Returns the category and whether the token is a close tag, if `token` has
/// the tag shape `</?[A-Z_]+>`.
fn tag_shape(token: &str) -> Option<(&str, bool)> {
    let inner = token.strip_prefix('<')?.strip_suffix('>')?;
    let (name, closing) = match inner.strip_prefix('/') {
        Some(rest) => (rest, true),
        None => (inner, false),
    };
    let valid = !name.is_empty() && name.bytes().all(|b| b.is_ascii_uppercase() || b == b'_');
    valid.then_some((name, closing))
}

/// True if `token` matches the tag-token pattern `</?[A-Z_]+>`.
pub fn is_tag_token(token: &str) -> bool {
    tag_shape(token).is_some()
}

/// Parsed tag token: `(category, is_close)`.
pub fn parse_tag_token(token: &str) -> Option<Result<(NeCategory, bool), TagError>> {
    tag_shape(token).map(|(name, closing)| {
        name.parse::<NeCategory>().and_then(|c| {
            if c.is_entity() {
                Ok((c, closing))
            } else {
                Err(TagError::UnknownCategory(name.to_string()))
            }
        })
    })
}

/// Output of the lenient parser.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Recovered {
    pub text: AnnotatedText,
    /// Number of tag tokens that were dropped.
    pub warnings: usize,
}

/// Strict inline parser: any malformed tag is an error carrying its position
/// in the tagged input.
pub fn parse_inline<S: AsRef<str>>(tagged: &[S]) -> Result<AnnotatedText, TagError> {
    parse_impl(tagged, true).map(|r| r.text)
}

/// Lenient inline parser for model output: offending tags are dropped and counted.
pub fn parse_inline_lenient<S: AsRef<str>>(tagged: &[S]) -> Recovered {
    parse_impl(tagged, false).expect("lenient parsing cannot fail")
}

fn parse_impl<S: AsRef<str>>(tagged: &[S], strict: bool) -> Result<Recovered, TagError> {
    let mut tokens = Vec::with_capacity(tagged.len());
    let mut spans = Vec::new();
    let mut warnings = 0;
    // (category, surface index of first enclosed token, tagged position of the open tag)
    let mut open: Option<(NeCategory, usize, usize)> = None;

    let fail = |position, kind| TagError::UnbalancedTag { position, kind };

    for (pos, tok) in tagged.iter().enumerate() {
        let tok = tok.as_ref();
        let (cat, closing) = match parse_tag_token(tok) {
            None => {
                tokens.push(tok.to_string());
                continue;
            }
            Some(Err(e)) => {
                if strict {
                    return Err(e);
                }
                warnings += 1;
                continue;
            }
            Some(Ok(tag)) => tag,
        };

        match (closing, open) {
            (false, None) => open = Some((cat, tokens.len(), pos)),
            (false, Some(_)) => {
                if strict {
                    return Err(fail(pos, UnbalancedKind::Nested));
                }
                warnings += 1;
            }
            (true, None) => {
                if strict {
                    return Err(fail(pos, UnbalancedKind::CloseWithoutOpen));
                }
                warnings += 1;
            }
            (true, Some((open_cat, start, _))) if open_cat == cat => {
                if start == tokens.len() {
                    if strict {
                        return Err(fail(pos, UnbalancedKind::Empty));
                    }
                    // both tags of the empty pair are dropped
                    warnings += 2;
                } else {
                    spans.push(NeSpan::new(start, tokens.len(), cat));
                }
                open = None;
            }
            (true, Some(_)) => {
                if strict {
                    return Err(fail(pos, UnbalancedKind::Mismatched));
                }
                warnings += 1;
            }
        }
    }

    if let Some((_, _, pos)) = open {
        if strict {
            return Err(fail(pos, UnbalancedKind::UnclosedAtEnd));
        }
        warnings += 1;
    }

    Ok(Recovered {
        text: AnnotatedText { tokens, spans },
        warnings,
    })
}

/// Interleaves open/close tag tokens around each span.
pub fn serialize_inline(text: &AnnotatedText) -> Vec<String> {
    let mut out = Vec::with_capacity(text.tokens.len() + 2 * text.spans.len());
    let mut spans = text.spans.iter().peekable();
    for (i, tok) in text.tokens.iter().enumerate() {
        if let Some(span) = spans.peek() {
            if span.start == i {
                out.extend(span.category.open_tag());
            }
        }
        out.push(tok.clone());
        if let Some(span) = spans.peek() {
            if span.end == i + 1 {
                out.extend(span.category.close_tag());
                spans.next();
            }
        }
    }
    out
}

/// Category of the covering span for each token, `O` elsewhere.
pub fn to_token_labels(text: &AnnotatedText) -> ParallelLabels {
    let mut labels = vec![NeCategory::O; text.tokens.len()];
    for span in &text.spans {
        labels[span.start..span.end].fill(span.category);
    }
    ParallelLabels { labels }
}

/// Maximal runs of one non-`O` label become one span, so two adjacent entities
/// of the same category come back merged.
pub fn from_token_labels<S: AsRef<str>>(
    tokens: &[S],
    labels: &ParallelLabels,
) -> Result<AnnotatedText, TagError> {
    if tokens.len() != labels.labels.len() {
        return Err(TagError::LengthMismatch {
            tokens: tokens.len(),
            labels: labels.labels.len(),
        });
    }
    let mut spans = Vec::new();
    let mut i = 0;
    while i < labels.labels.len() {
        let cat = labels.labels[i];
        let mut j = i + 1;
        while j < labels.labels.len() && labels.labels[j] == cat {
            j += 1;
        }
        if cat.is_entity() {
            spans.push(NeSpan::new(i, j, cat));
        }
        i = j;
    }
    Ok(AnnotatedText {
        tokens: tokens.iter().map(|t| t.as_ref().to_string()).collect(),
        spans,
    })
}

/// Parses one line of an inline-tagged corpus file (whitespace tokenized).
pub fn parse_line(line: &str) -> Result<AnnotatedText, TagError> {
    let toks: Vec<&str> = line.split_whitespace().collect();
    parse_inline(&toks)
}

/// Formats a text as one inline-tagged line.
pub fn format_line(text: &AnnotatedText) -> String {
    serialize_inline(text).join(" ")
}
