//! Textual and multi-modal instruction representations.
//!
//! A [`TextInstruction`] is a whitespace-tokenized instruction together with
//! its landmark phrase spans and the path it describes. Phrase spans are
//! 1-based and inclusive on both ends, so a span `start=3, end=4` over
//! `["walk", "past", "the", "sofa"]` covers `"the sofa"`.
//!
//! A [`MultiModalInstruction`] attaches [`VisualPrompt`]s to phrases. Its
//! conceptual token sequence places each image directly after the last word
//! of the phrase it illustrates.

use std::collections::HashSet;
use std::fmt;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InstructionError {
    #[error("instruction has no tokens")]
    EmptyTokens,
    #[error("phrase {phrase} span {start}..{end} is outside 1..{len}")]
    SpanOutOfRange {
        phrase: usize,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("phrase {second} overlaps phrase {first}")]
    OverlappingSpans { first: usize, second: usize },
    #[error("phrase {second} starts before phrase {first}")]
    UnsortedSpans { first: usize, second: usize },
    #[error("instruction path is empty")]
    EmptyPath,
    #[error("path node {node:?} at position {position} repeats the previous node")]
    RepeatedPathNode { position: usize, node: String },
    #[error("prompt refers to phrase {index} but the instruction has {phrases} phrases")]
    InvalidPhraseIndex { index: usize, phrases: usize },
    #[error("more than one prompt for phrase {0}")]
    DuplicatePhraseIndex(usize),
    #[error("prompt for phrase {phrase_index} has an invalid box: {reason}")]
    InvalidBox { phrase_index: usize, reason: String },
    #[error("setting {setting} does not allow {prompts} prompts")]
    SettingViolation { setting: Setting, prompts: usize },
}

/// Landmark phrase span, 1-based and inclusive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhraseSpan {
    #[serde(default)]
    pub text: String,
    pub start: usize,
    pub end: usize,
}

impl PhraseSpan {
    pub fn new(text: impl Into<String>, start: usize, end: usize) -> Self {
        Self {
            text: text.into(),
            start,
            end,
        }
    }
}

/// Unvalidated instruction record, the line shape of `instructions.jsonl`.
///
/// Fields this type does not know about are kept in `extra` and written back
/// unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub id: String,
    pub tokens: Vec<String>,
    #[serde(default)]
    pub phrases: Vec<PhraseSpan>,
    pub path: Vec<String>,
    /// Source language of the original instruction text, when it was translated upstream.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<String>,
    /// Alternative caption-style instruction produced by a captioner client.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

/// A validated textual instruction. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "InstructionRecord", into = "InstructionRecord")]
pub struct TextInstruction {
    record: InstructionRecord,
}

impl TextInstruction {
    pub fn id(&self) -> &str {
        &self.record.id
    }

    pub fn tokens(&self) -> &[String] {
        &self.record.tokens
    }

    pub fn phrases(&self) -> &[PhraseSpan] {
        &self.record.phrases
    }

    pub fn path_node_ids(&self) -> &[String] {
        &self.record.path
    }

    pub fn len(&self) -> usize {
        self.record.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.record.tokens.is_empty()
    }

    pub fn text(&self) -> String {
        self.record.tokens.join(" ")
    }

    pub fn record(&self) -> &InstructionRecord {
        &self.record
    }

    pub fn into_record(self) -> InstructionRecord {
        self.record
    }

    /// Replaces the phrase list, re-running validation.
    pub fn with_phrases(&self, phrases: Vec<PhraseSpan>) -> Result<Self, InstructionError> {
        let mut record = self.record.clone();
        record.phrases = phrases;
        validate_instruction(record)
    }

    pub fn with_caption(mut self, caption: Option<String>) -> Self {
        self.record.caption = caption;
        self
    }

    /// Words covered by phrase `index` (0-based).
    pub fn phrase_words(&self, index: usize) -> Option<&[String]> {
        self.record
            .phrases
            .get(index)
            .map(|p| &self.record.tokens[p.start - 1..p.end])
    }
}

impl TryFrom<InstructionRecord> for TextInstruction {
    type Error = InstructionError;

    fn try_from(record: InstructionRecord) -> Result<Self, Self::Error> {
        validate_instruction(record)
    }
}

impl From<TextInstruction> for InstructionRecord {
    fn from(instr: TextInstruction) -> Self {
        instr.record
    }
}

/// Checks every instruction invariant and returns the validated instruction.
///
/// Phrases with an empty `text` get it filled in from their covered tokens.
pub fn validate_instruction(
    mut raw: InstructionRecord,
) -> Result<TextInstruction, InstructionError> {
    let len = raw.tokens.len();
    if len == 0 {
        return Err(InstructionError::EmptyTokens);
    }
    for (i, p) in raw.phrases.iter().enumerate() {
        if p.start < 1 || p.start > p.end || p.end > len {
            return Err(InstructionError::SpanOutOfRange {
                phrase: i,
                start: p.start,
                end: p.end,
                len,
            });
        }
    }
    for (i, pair) in raw.phrases.windows(2).enumerate() {
        let (prev, next) = (&pair[0], &pair[1]);
        if next.start < prev.start {
            return Err(InstructionError::UnsortedSpans {
                first: i,
                second: i + 1,
            });
        }
        if next.start <= prev.end {
            return Err(InstructionError::OverlappingSpans {
                first: i,
                second: i + 1,
            });
        }
    }
    if raw.path.is_empty() {
        return Err(InstructionError::EmptyPath);
    }
    for (i, pair) in raw.path.windows(2).enumerate() {
        if pair[0] == pair[1] {
            return Err(InstructionError::RepeatedPathNode {
                position: i + 1,
                node: pair[1].clone(),
            });
        }
    }
    for p in raw.phrases.iter_mut() {
        if p.text.is_empty() {
            p.text = raw.tokens[p.start - 1..p.end].join(" ");
        }
    }
    Ok(TextInstruction { record: raw })
}

/// Axis-aligned box in pixels, serialized as `[x, y, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Describes why the box does not fit inside `dims`, if it does not.
    pub fn check_within(&self, dims: ImageDims) -> Result<(), String> {
        let vals = [self.x, self.y, self.w, self.h];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err("non-finite coordinate".into());
        }
        if dims.width == 0 || dims.height == 0 {
            return Err(format!("empty image {}x{}", dims.width, dims.height));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(format!("non-positive size {}x{}", self.w, self.h));
        }
        if self.x < 0.0 || self.y < 0.0 {
            return Err(format!("negative origin ({}, {})", self.x, self.y));
        }
        if self.x + self.w > f64::from(dims.width) || self.y + self.h > f64::from(dims.height) {
            return Err(format!(
                "box {:?} exceeds image {}x{}",
                vals, dims.width, dims.height
            ));
        }
        Ok(())
    }
}

impl From<[f64; 4]> for BBox {
    fn from([x, y, w, h]: [f64; 4]) -> Self {
        Self { x, y, w, h }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageDims {
    #[serde(rename = "image_width")]
    pub width: u32,
    #[serde(rename = "image_height")]
    pub height: u32,
}

impl ImageDims {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height }
    }

    pub fn area(&self) -> f64 {
        f64::from(self.width) * f64::from(self.height)
    }
}

/// An image attached to one phrase of an instruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualPrompt {
    pub phrase_index: usize,
    pub image_ref: String,
    pub bbox: BBox,
    #[serde(flatten)]
    pub image_dims: ImageDims,
    /// Viewpoint the image was captured at, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_id: Option<String>,
}

impl VisualPrompt {
    pub fn validate(&self) -> Result<(), InstructionError> {
        self.bbox
            .check_within(self.image_dims)
            .map_err(|reason| InstructionError::InvalidBox {
                phrase_index: self.phrase_index,
                reason,
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Aligned,
    Related,
    Terminal,
    TextOnly,
}

impl Setting {
    pub fn as_str(&self) -> &'static str {
        match self {
            Setting::Aligned => "aligned",
            Setting::Related => "related",
            Setting::Terminal => "terminal",
            Setting::TextOnly => "text_only",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Setting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "aligned" => Ok(Setting::Aligned),
            "related" => Ok(Setting::Related),
            "terminal" => Ok(Setting::Terminal),
            "text_only" | "text" => Ok(Setting::TextOnly),
            other => Err(format!("unknown setting {other:?}")),
        }
    }
}

/// Component scores of the alignment that produced a record's prompts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionScores {
    pub s_seq: f64,
    pub s_det_avg: f64,
    pub s_box_avg: f64,
    pub s_all: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MultiModalRecord {
    #[serde(flatten)]
    base: TextInstruction,
    setting: Setting,
    #[serde(default)]
    prompts: Vec<VisualPrompt>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scores: Option<SelectionScores>,
}

/// An instruction with images inserted after their landmark phrases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MultiModalRecord", into = "MultiModalRecord")]
pub struct MultiModalInstruction {
    base: TextInstruction,
    prompts: Vec<VisualPrompt>,
    setting: Setting,
    scores: Option<SelectionScores>,
}

/// One element of the interleaved word/image sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SequenceItem<'a> {
    Word(&'a str),
    Image(&'a VisualPrompt),
}

impl MultiModalInstruction {
    /// Validates `prompts` against `base` and the setting's prompt-count rule.
    /// Prompts are stored sorted by phrase index.
    pub fn new(
        base: TextInstruction,
        mut prompts: Vec<VisualPrompt>,
        setting: Setting,
    ) -> Result<Self, InstructionError> {
        let phrases = base.phrases().len();
        let mut seen = HashSet::new();
        for p in &prompts {
            if p.phrase_index >= phrases {
                return Err(InstructionError::InvalidPhraseIndex {
                    index: p.phrase_index,
                    phrases,
                });
            }
            if !seen.insert(p.phrase_index) {
                return Err(InstructionError::DuplicatePhraseIndex(p.phrase_index));
            }
            p.validate()?;
        }
        let allowed = match setting {
            Setting::Terminal => prompts.len() <= 1,
            Setting::TextOnly => prompts.is_empty(),
            Setting::Aligned | Setting::Related => true,
        };
        if !allowed {
            return Err(InstructionError::SettingViolation {
                setting,
                prompts: prompts.len(),
            });
        }
        prompts.sort_by_key(|p| p.phrase_index);
        Ok(Self {
            base,
            prompts,
            setting,
            scores: None,
        })
    }

    pub fn text_only(base: TextInstruction) -> Self {
        Self {
            base,
            prompts: Vec::new(),
            setting: Setting::TextOnly,
            scores: None,
        }
    }

    pub fn base(&self) -> &TextInstruction {
        &self.base
    }

    pub fn id(&self) -> &str {
        self.base.id()
    }

    pub fn prompts(&self) -> &[VisualPrompt] {
        &self.prompts
    }

    pub fn setting(&self) -> Setting {
        self.setting
    }

    pub fn scores(&self) -> Option<&SelectionScores> {
        self.scores.as_ref()
    }

    pub fn with_scores(mut self, scores: Option<SelectionScores>) -> Self {
        self.scores = scores;
        self
    }

    /// Same instruction with each prompt's image reference passed through `f`.
    pub(crate) fn map_image_refs(&self, mut f: impl FnMut(&VisualPrompt) -> String) -> Self {
        let mut out = self.clone();
        for p in out.prompts.iter_mut() {
            p.image_ref = f(p);
        }
        out
    }

    /// The interleaved sequence `x_1..x_end1, I_1, x_end1+1.., I_2, ..., x_L`.
    pub fn sequence(&self) -> Vec<SequenceItem<'_>> {
        let phrases = self.base.phrases();
        let mut out = Vec::with_capacity(self.base.len() + self.prompts.len());
        let mut next_prompt = self.prompts.iter().peekable();
        for (i, word) in self.base.tokens().iter().enumerate() {
            out.push(SequenceItem::Word(word));
            while let Some(p) = next_prompt.next_if(|p| phrases[p.phrase_index].end == i + 1) {
                out.push(SequenceItem::Image(p));
            }
        }
        out
    }
}

impl TryFrom<MultiModalRecord> for MultiModalInstruction {
    type Error = InstructionError;

    fn try_from(r: MultiModalRecord) -> Result<Self, Self::Error> {
        Ok(MultiModalInstruction::new(r.base, r.prompts, r.setting)?.with_scores(r.scores))
    }
}

impl From<MultiModalInstruction> for MultiModalRecord {
    fn from(m: MultiModalInstruction) -> Self {
        MultiModalRecord {
            base: m.base,
            setting: m.setting,
            prompts: m.prompts,
            scores: m.scores,
        }
    }
}

/// Attaches `prompts` to `instr`. An empty prompt list yields a text-only
/// instruction; otherwise the result is tagged [`Setting::Aligned`] and can
/// be re-tagged with [`restrict_setting`].
pub fn interleave(
    instr: TextInstruction,
    prompts: Vec<VisualPrompt>,
) -> Result<MultiModalInstruction, InstructionError> {
    let setting = if prompts.is_empty() {
        Setting::TextOnly
    } else {
        Setting::Aligned
    };
    MultiModalInstruction::new(instr, prompts, setting)
}

/// Reduces the prompts of `mmi` to what `target` allows.
///
/// * `Terminal` keeps the prompt with the largest phrase index.
/// * `TextOnly` drops every prompt.
/// * `Aligned` / `Related` keep all prompts, or with `keep` a seeded uniform
///   subset of `min(keep, n)` prompts in their original order.
pub fn restrict_setting(
    mmi: &MultiModalInstruction,
    target: Setting,
    keep: Option<usize>,
    seed: u64,
) -> MultiModalInstruction {
    let prompts = match target {
        Setting::Terminal => mmi.prompts.last().cloned().into_iter().collect(),
        Setting::TextOnly => Vec::new(),
        Setting::Aligned | Setting::Related => match keep {
            None => mmi.prompts.clone(),
            Some(k) => {
                let n = mmi.prompts.len();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut picked = index::sample(&mut rng, n, k.min(n)).into_vec();
                picked.sort_unstable();
                picked.into_iter().map(|i| mmi.prompts[i].clone()).collect()
            }
        },
    };
    MultiModalInstruction {
        base: mmi.base.clone(),
        prompts,
        setting: target,
        scores: mmi.scores,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Text,
    Image,
}

/// One input slot of the multi-modal encoder.
///
/// `source_index` is the token index for text entries and the prompt index
/// for image entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub kind: TokenKind,
    pub source_index: usize,
    pub visual_position: Option<usize>,
    pub multimodal_position: usize,
}

/// Token layout carrying both position encodings: a visual position that
/// enumerates images, and a multi-modal position shared by each image and
/// the final word of its phrase.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub entries: Vec<LayoutEntry>,
}

impl TokenLayout {
    pub fn text_entries(&self) -> impl Iterator<Item = &LayoutEntry> {
        self.entries.iter().filter(|e| e.kind == TokenKind::Text)
    }

    pub fn image_entries(&self) -> impl Iterator<Item = &LayoutEntry> {
        self.entries.iter().filter(|e| e.kind == TokenKind::Image)
    }
}

pub fn assemble_token_layout(mmi: &MultiModalInstruction) -> TokenLayout {
    let phrases = mmi.base.phrases();
    let mut entries = Vec::with_capacity(mmi.base.len() + mmi.prompts.len());
    let mut prompts = mmi.prompts.iter().enumerate().peekable();
    for i in 0..mmi.base.len() {
        entries.push(LayoutEntry {
            kind: TokenKind::Text,
            source_index: i,
            visual_position: None,
            multimodal_position: i,
        });
        while let Some((k, _)) = prompts.next_if(|(_, p)| phrases[p.phrase_index].end == i + 1) {
            entries.push(LayoutEntry {
                kind: TokenKind::Image,
                source_index: k,
                visual_position: Some(k),
                multimodal_position: i,
            });
        }
    }
    TokenLayout { entries }
}
