//! Positive/negative multi-modal prompts, their text serialization, token
//! grouping, and the prompt self-attention masks.

use std::collections::HashSet;
use std::ops::Range;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Class delimiter in serialized prompt text.
pub const SEPARATOR: &str = ".";

/// A box drawn on some image. The image may be the one being counted
/// (internal exemplar) or any other image (external exemplar).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarRef {
    pub image_ref: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

impl ExemplarRef {
    pub fn new(image_ref: impl Into<String>, bbox: BBox) -> Self {
        Self { image_ref: image_ref.into(), bbox }
    }
}

/// Text and exemplars describing one class. Empty text means exemplar-only.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassPrompt {
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub exemplars: Vec<ExemplarRef>,
}

impl ClassPrompt {
    pub fn text(text: impl Into<String>) -> Self {
        Self { text: text.into(), exemplars: Vec::new() }
    }

    pub fn with_exemplars(mut self, exemplars: Vec<ExemplarRef>) -> Self {
        self.exemplars = exemplars;
        self
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.text.split_whitespace()
    }

    pub fn has_text(&self) -> bool {
        self.words().next().is_some()
    }

    fn normalized_text(&self) -> String {
        self.words().collect::<Vec<_>>().join(" ")
    }

    pub fn is_empty(&self) -> bool {
        !self.has_text() && self.exemplars.is_empty()
    }
}

/// One positive class plus an ordered list of negative classes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub positive: ClassPrompt,
    #[serde(default)]
    pub negatives: Vec<ClassPrompt>,
}

impl PromptSpec {
    pub fn new(positive: ClassPrompt, negatives: Vec<ClassPrompt>) -> Self {
        Self { positive, negatives }
    }

    pub fn text_only(positive: &str, negatives: &[&str]) -> Self {
        Self {
            positive: ClassPrompt::text(positive),
            negatives: negatives.iter().map(|t| ClassPrompt::text(*t)).collect(),
        }
    }

    /// Classes in prompt order: positive first, then negatives.
    pub fn classes(&self) -> impl Iterator<Item = &ClassPrompt> {
        std::iter::once(&self.positive).chain(self.negatives.iter())
    }

    pub fn classes_mut(&mut self) -> impl Iterator<Item = &mut ClassPrompt> {
        std::iter::once(&mut self.positive).chain(self.negatives.iter_mut())
    }

    pub fn num_classes(&self) -> usize {
        1 + self.negatives.len()
    }

    pub fn class(&self, group: usize) -> Option<&ClassPrompt> {
        if group == 0 {
            Some(&self.positive)
        } else {
            self.negatives.get(group - 1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, class) in self.classes().enumerate() {
            if class.is_empty() {
                let which = if i == 0 { "positive class".to_string() } else { format!("negative class {i}") };
                return Err(Error::InvalidPrompt(format!("{which} has neither text nor exemplars")));
            }
            if class.words().any(|w| w == SEPARATOR || w.contains('.')) {
                return Err(Error::InvalidPrompt(format!(
                    "class text `{}` contains the separator",
                    class.text
                )));
            }
            for ex in &class.exemplars {
                ex.bbox.validate()?;
                if ex.image_ref.is_empty() {
                    return Err(Error::InvalidPrompt("exemplar with empty image_ref".into()));
                }
            }
            if class.has_text() && !seen.insert(class.normalized_text()) {
                return Err(Error::InvalidPrompt(format!(
                    "class text `{}` appears more than once",
                    class.text
                )));
            }
        }
        Ok(())
    }

    /// Number of exemplars over all classes.
    pub fn exemplar_count(&self) -> usize {
        self.classes().map(|c| c.exemplars.len()).sum()
    }
}

/// Renders the prompt text as `t+ . t-1 . ... . t-N .`.
pub fn serialize_text(spec: &PromptSpec) -> String {
    spec.classes()
        .map(|c| {
            let text = c.normalized_text();
            if text.is_empty() {
                SEPARATOR.to_string()
            } else {
                format!("{text} {SEPARATOR}")
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Word-level tokenization of serialized prompt text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextTokens {
    /// Word tokens, separators removed.
    pub words: Vec<String>,
    /// Per-class ranges over `words`, one per separator-terminated class.
    pub spans: Vec<Range<usize>>,
}

impl TextTokens {
    pub fn separator_count(&self) -> usize {
        self.spans.len()
    }
}

/// Splits serialized text into word tokens and recovers the class spans.
/// A trailing class without a closing separator is still reported.
pub fn tokenize(text: &str) -> Result<TextTokens> {
    let mut words = Vec::new();
    let mut spans = Vec::new();
    let mut start = 0;
    let mut open = false;
    for tok in text.split_whitespace() {
        if tok == SEPARATOR {
            spans.push(start..words.len());
            start = words.len();
            open = false;
        } else {
            words.push(tok.to_string());
            open = true;
        }
    }
    if open {
        spans.push(start..words.len());
    }
    if spans.is_empty() {
        return Err(Error::InvalidPrompt("empty prompt text".into()));
    }
    Ok(TextTokens { words, spans })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
}

/// Where a prompt token comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    /// Word token, indexing the text-encoder output.
    Text(usize),
    /// Exemplar `index` of class `class`.
    Exemplar { class: usize, index: usize },
    Separator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenRecord {
    pub index: usize,
    /// `None` for separators.
    pub group: Option<usize>,
    pub polarity: Polarity,
    pub kind: TokenKind,
}

/// Prompt token layout: per class its text tokens, then its exemplar tokens,
/// then a separator. Group 0 is the positive class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGroupMap {
    pub records: Vec<TokenRecord>,
    pub num_groups: usize,
}

impl TokenGroupMap {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records of non-separator tokens, in sequence order. Their order defines
    /// the columns of the prompt-feature matrix.
    pub fn features(&self) -> impl Iterator<Item = &TokenRecord> {
        self.records.iter().filter(|r| r.group.is_some())
    }

    pub fn feature_count(&self) -> usize {
        self.features().count()
    }

    /// Group of each prompt-feature column.
    pub fn feature_groups(&self) -> Vec<usize> {
        self.features().filter_map(|r| r.group).collect()
    }

    /// Prompt-feature columns belonging to `group`.
    pub fn columns_of(&self, group: usize) -> Vec<usize> {
        self.feature_groups()
            .iter()
            .enumerate()
            .filter(|(_, g)| **g == group)
            .map(|(c, _)| c)
            .collect()
    }

    pub fn positive_columns(&self) -> Vec<usize> {
        self.columns_of(0)
    }

    pub fn negative_columns(&self) -> Vec<usize> {
        self.feature_groups()
            .iter()
            .enumerate()
            .filter(|(_, g)| **g != 0)
            .map(|(c, _)| c)
            .collect()
    }
}

/// Lays out prompt tokens and assigns class groups. `text_spans` are the
/// per-class word ranges produced by [`tokenize`] on [`serialize_text`].
pub fn assign_groups(spec: &PromptSpec, text_spans: &[Range<usize>]) -> Result<TokenGroupMap> {
    if text_spans.len() != spec.num_classes() {
        return Err(Error::InvalidPrompt(format!(
            "{} text spans for {} classes",
            text_spans.len(),
            spec.num_classes()
        )));
    }
    let mut expected_start = 0;
    for (i, span) in text_spans.iter().enumerate() {
        if span.start < expected_start {
            return Err(Error::InvalidPrompt(format!("text span {i} overlaps its predecessor")));
        }
        if span.start != expected_start || span.end < span.start {
            return Err(Error::InvalidPrompt(format!("text span {i} leaves a gap or is inverted")));
        }
        expected_start = span.end;
    }
    let mut records = Vec::new();
    for (group, (class, span)) in spec.classes().zip(text_spans).enumerate() {
        let polarity = if group == 0 { Polarity::Positive } else { Polarity::Negative };
        let mut push = |kind: TokenKind, group: Option<usize>| {
            let index = records.len();
            records.push(TokenRecord { index, group, polarity, kind });
        };
        for w in span.clone() {
            push(TokenKind::Text(w), Some(group));
        }
        for index in 0..class.exemplars.len() {
            push(TokenKind::Exemplar { class: group, index }, Some(group));
        }
        push(TokenKind::Separator, None);
    }
    Ok(TokenGroupMap { records, num_groups: spec.num_classes() })
}

/// Prompt self-attention variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Every prompt token attends to every other.
    OptionA,
    /// Tokens attend only within their own class.
    #[default]
    OptionB,
}

/// `L x L` boolean mask over the full token sequence; `true` = may attend.
/// Separators attend to nothing and are attended by nothing.
pub fn build_attention_mask(groups: &TokenGroupMap, mode: MaskMode) -> Array2<bool> {
    let n = groups.len();
    Array2::from_shape_fn((n, n), |(i, j)| {
        match (groups.records[i].group, groups.records[j].group) {
            (Some(a), Some(b)) => match mode {
                MaskMode::OptionA => true,
                MaskMode::OptionB => a == b,
            },
            _ => false,
        }
    })
}

/// Restriction of a full-sequence mask to the prompt-feature columns
/// (separators dropped).
pub fn feature_mask(groups: &TokenGroupMap, mode: MaskMode) -> Array2<bool> {
    let g = groups.feature_groups();
    let n = g.len();
    Array2::from_shape_fn((n, n), |(i, j)| match mode {
        MaskMode::OptionA => true,
        MaskMode::OptionB => g[i] == g[j],
    })
}
