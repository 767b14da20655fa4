//! Landmark-image alignment.
//!
//! Each landmark phrase has a [`CandidateSet`] of detector hits. A choice of
//! one candidate per phrase is scored by
//!
//! ```text
//! S_all = S_seq + beta0 * mean(detection score) + beta1 * mean(box score)
//! ```
//!
//! where `S_seq` rewards choices whose images appear along the path in the
//! same order as the phrases appear in the instruction. The Related setting
//! takes the per-phrase argmax of the detection score, the Aligned setting
//! maximizes `S_all` (exhaustively for small instances, by beam search
//! otherwise) and the Terminal setting keeps the last Aligned image.

mod beam;
mod scoring;
mod search;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instruction::{BBox, ImageDims, SelectionScores, VisualPrompt};

pub use beam::{effective_beam_width, select_aligned_beam};
pub use scoring::{bbox_score, combined_score, sequence_score};
pub use search::{
    derive_terminal, search_space_size, select_aligned, select_aligned_exhaustive, select_related,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AlignmentError {
    #[error("phrase {0} has no candidates")]
    EmptyCandidateSet(usize),
    #[error("no candidate sets to align")]
    NoCandidateSets,
    #[error("search space of {size} combinations exceeds the oracle bound {bound}")]
    SearchSpaceTooLarge { size: u128, bound: u64 },
    #[error("selection is empty")]
    EmptySelection,
    #[error("selection refers to phrase {index} but the instruction has {phrases} phrases")]
    PhraseOutOfRange { index: usize, phrases: usize },
    #[error("invalid candidate: {0}")]
    InvalidCandidate(String),
    #[error("invalid alignment config: {0}")]
    InvalidConfig(String),
}

/// Where a candidate image sits along the path: the position of its source
/// node in the path, then the view index within that node's panorama.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct OrderKey {
    pub path_position: u32,
    pub view_index: u32,
}

impl OrderKey {
    pub fn new(path_position: u32, view_index: u32) -> Self {
        Self {
            path_position,
            view_index,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CandidateRecord {
    score: f64,
    image_ref: String,
    bbox: BBox,
    image_width: u32,
    image_height: u32,
    path_position: u32,
    #[serde(default)]
    view_index: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    node_id: Option<String>,
}

/// One detector hit for a phrase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CandidateRecord", into = "CandidateRecord")]
pub struct Candidate {
    pub detection_score: f64,
    pub image_ref: String,
    pub bbox: BBox,
    pub image_dims: ImageDims,
    pub order_key: OrderKey,
    /// Viewpoint the image was captured at. Required by pre-explore and
    /// viewpoint evaluation, optional otherwise.
    pub node_id: Option<String>,
}

impl Candidate {
    pub fn new(
        detection_score: f64,
        image_ref: impl Into<String>,
        bbox: BBox,
        image_dims: ImageDims,
        order_key: OrderKey,
    ) -> Result<Self, AlignmentError> {
        let c = Self {
            detection_score,
            image_ref: image_ref.into(),
            bbox,
            image_dims,
            order_key,
            node_id: None,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn with_node(mut self, node_id: impl Into<String>) -> Self {
        self.node_id = Some(node_id.into());
        self
    }

    pub fn validate(&self) -> Result<(), AlignmentError> {
        if !(0.0..=1.0).contains(&self.detection_score) {
            return Err(AlignmentError::InvalidCandidate(format!(
                "{}: detection score {} outside [0, 1]",
                self.image_ref, self.detection_score
            )));
        }
        self.bbox
            .check_within(self.image_dims)
            .map_err(|r| AlignmentError::InvalidCandidate(format!("{}: {r}", self.image_ref)))
    }

    pub fn to_prompt(&self, phrase_index: usize) -> VisualPrompt {
        VisualPrompt {
            phrase_index,
            image_ref: self.image_ref.clone(),
            bbox: self.bbox,
            image_dims: self.image_dims,
            node_id: self.node_id.clone(),
        }
    }

    /// Total order used to break score ties: order key, image reference,
    /// then the remaining fields so that distinct candidates never compare
    /// equal.
    pub fn tie_cmp(&self, other: &Self) -> Ordering {
        self.order_key
            .cmp(&other.order_key)
            .then_with(|| self.image_ref.cmp(&other.image_ref))
            .then_with(|| other.detection_score.total_cmp(&self.detection_score))
            .then_with(|| {
                let (a, b): ([f64; 4], [f64; 4]) = (self.bbox.into(), other.bbox.into());
                a.iter()
                    .zip(&b)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(Ordering::Equal)
            })
            .then_with(|| {
                (self.image_dims.width, self.image_dims.height)
                    .cmp(&(other.image_dims.width, other.image_dims.height))
            })
            .then_with(|| self.node_id.cmp(&other.node_id))
    }
}

impl TryFrom<CandidateRecord> for Candidate {
    type Error = AlignmentError;

    fn try_from(r: CandidateRecord) -> Result<Self, Self::Error> {
        let c = Candidate {
            detection_score: r.score,
            image_ref: r.image_ref,
            bbox: r.bbox,
            image_dims: ImageDims::new(r.image_width, r.image_height),
            order_key: OrderKey::new(r.path_position, r.view_index),
            node_id: r.node_id,
        };
        c.validate()?;
        Ok(c)
    }
}

impl From<Candidate> for CandidateRecord {
    fn from(c: Candidate) -> Self {
        CandidateRecord {
            score: c.detection_score,
            image_ref: c.image_ref,
            bbox: c.bbox,
            image_width: c.image_dims.width,
            image_height: c.image_dims.height,
            path_position: c.order_key.path_position,
            view_index: c.order_key.view_index,
            node_id: c.node_id,
        }
    }
}

/// Candidates for one phrase, best detection score first.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    phrase_index: usize,
    candidates: Vec<Candidate>,
}

impl CandidateSet {
    pub fn new(
        phrase_index: usize,
        mut candidates: Vec<Candidate>,
    ) -> Result<Self, AlignmentError> {
        if candidates.is_empty() {
            return Err(AlignmentError::EmptyCandidateSet(phrase_index));
        }
        for c in &candidates {
            c.validate()?;
        }
        candidates.sort_by(|a, b| {
            b.detection_score
                .total_cmp(&a.detection_score)
                .then_with(|| a.tie_cmp(b))
        });
        Ok(Self {
            phrase_index,
            candidates,
        })
    }

    pub fn phrase_index(&self) -> usize {
        self.phrase_index
    }

    pub fn candidates(&self) -> &[Candidate] {
        &self.candidates
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// Highest detection score, ties going to the earlier order key.
    pub fn best(&self) -> &Candidate {
        &self.candidates[0]
    }
}

/// Line shape of `candidates.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSetRecord {
    pub instruction_id: String,
    pub phrase_index: usize,
    pub candidates: Vec<Candidate>,
}

impl CandidateSetRecord {
    pub fn into_set(self) -> Result<CandidateSet, AlignmentError> {
        CandidateSet::new(self.phrase_index, self.candidates)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignmentConfig {
    /// Weight of the mean detection score.
    pub beta0: f64,
    /// Weight of the mean bounding-box score.
    pub beta1: f64,
    pub beam_width: usize,
    pub beam_width_cap: usize,
    /// Largest search space the exhaustive search will enumerate.
    pub oracle_bound: u64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            beta0: 0.5,
            beta1: 0.1,
            beam_width: 16,
            beam_width_cap: 200,
            oracle_bound: 1_000_000,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<(), AlignmentError> {
        let bad = |m: String| Err(AlignmentError::InvalidConfig(m));
        if !(self.beta0.is_finite() && self.beta0 >= 0.0) {
            return bad(format!("beta0 = {}", self.beta0));
        }
        if !(self.beta1.is_finite() && self.beta1 >= 0.0) {
            return bad(format!("beta1 = {}", self.beta1));
        }
        if self.beam_width == 0 || self.beam_width_cap == 0 {
            return bad("beam widths must be positive".into());
        }
        Ok(())
    }
}

/// One chosen candidate per aligned phrase, with its scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub phrase_indices: Vec<usize>,
    pub chosen: Vec<Candidate>,
    pub s_seq: f64,
    pub s_det_avg: f64,
    pub s_box_avg: f64,
    pub s_all: f64,
}

impl Selection {
    pub fn len(&self) -> usize {
        self.chosen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chosen.is_empty()
    }

    pub fn scores(&self) -> SelectionScores {
        SelectionScores {
            s_seq: self.s_seq,
            s_det_avg: self.s_det_avg,
            s_box_avg: self.s_box_avg,
            s_all: self.s_all,
        }
    }

    pub fn prompts(&self) -> Vec<VisualPrompt> {
        self.phrase_indices
            .iter()
            .zip(&self.chosen)
            .map(|(&i, c)| c.to_prompt(i))
            .collect()
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// A 1x1 box in a 100000x100000 frame: box score 1e-10.
    pub fn tiny(score: f64, pos: u32, name: &str) -> Candidate {
        Candidate::new(
            score,
            name,
            BBox::new(0.0, 0.0, 1.0, 1.0),
            ImageDims::new(100_000, 100_000),
            OrderKey::new(pos, 0),
        )
        .unwrap()
    }

    pub fn cand(score: f64, pos: u32, view: u32, area_frac: f64, name: &str) -> Candidate {
        Candidate::new(
            score,
            name,
            BBox::new(0.0, 0.0, 100.0 * area_frac, 100.0),
            ImageDims::new(100, 100),
            OrderKey::new(pos, view),
        )
        .unwrap()
    }

    /// Phrase A has a high-scoring decoy late on the path; phrase B sits early.
    pub fn decoy_sets() -> Vec<CandidateSet> {
        vec![
            CandidateSet::new(0, vec![tiny(0.9, 5, "a_decoy"), tiny(0.6, 1, "a_true")]).unwrap(),
            CandidateSet::new(1, vec![tiny(0.9, 2, "b")]).unwrap(),
        ]
    }
}
