//! Seams for the external models used by the pipeline, with file-backed
//! fixture implementations.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{Candidate, CandidateSetRecord};
use crate::instruction::PhraseSpan;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClientError {
    #[error("{endpoint} unavailable: {reason}")]
    Unavailable { endpoint: String, reason: String },
    #[error("{endpoint} returned an invalid response: {reason}")]
    BadResponse { endpoint: String, reason: String },
    #[error("fixture has no entry for {0}")]
    MissingFixture(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractRequest {
    pub instruction_id: String,
    pub text: String,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractResponse {
    pub phrases: Vec<PhraseSpan>,
}

/// A viewpoint to scan and its position along the scanned path.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeRef {
    pub node_id: String,
    pub path_position: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectRequest {
    pub instruction_id: String,
    pub phrase_index: usize,
    pub phrase: String,
    pub nodes: Vec<NodeRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectResponse {
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRequest {
    pub instruction_id: String,
    pub path: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionResponse {
    pub caption: String,
}

/// Landmark phrase extraction (a large language model in production).
pub trait ExtractorClient: Send + Sync {
    fn extract(&self, req: &ExtractRequest) -> Result<Vec<PhraseSpan>, ClientError>;
}

/// Zero-shot phrase grounding over the images of the requested nodes.
pub trait DetectorClient: Send + Sync {
    fn detect(&self, req: &DetectRequest) -> Result<Vec<Candidate>, ClientError>;
}

/// Path captioning, used for caption-style alternative instructions.
pub trait CaptionerClient: Send + Sync {
    fn caption(&self, req: &CaptionRequest) -> Result<String, ClientError>;
}

/// Fixture line: `{"instruction_id", "phrases": [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhraseFixtureRecord {
    pub instruction_id: String,
    pub phrases: Vec<PhraseSpan>,
}

#[derive(Debug, Clone, Default)]
pub struct FixtureExtractor {
    phrases: HashMap<String, Vec<PhraseSpan>>,
}

impl FixtureExtractor {
    pub fn new(records: Vec<PhraseFixtureRecord>) -> Self {
        Self {
            phrases: records
                .into_iter()
                .map(|r| (r.instruction_id, r.phrases))
                .collect(),
        }
    }
}

impl ExtractorClient for FixtureExtractor {
    fn extract(&self, req: &ExtractRequest) -> Result<Vec<PhraseSpan>, ClientError> {
        self.phrases
            .get(&req.instruction_id)
            .cloned()
            .ok_or_else(|| ClientError::MissingFixture(req.instruction_id.clone()))
    }
}

/// Serves candidates from `candidates.jsonl` records.
///
/// Candidates with a `node_id` are returned only when that node is among the
/// requested ones, and take the requested node's path position. Candidates
/// without one are returned when their stored path position was requested.
#[derive(Debug, Clone, Default)]
pub struct FixtureDetector {
    candidates: HashMap<(String, usize), Vec<Candidate>>,
}

impl FixtureDetector {
    pub fn new(records: Vec<CandidateSetRecord>) -> Self {
        let mut candidates: HashMap<(String, usize), Vec<Candidate>> = HashMap::new();
        for r in records {
            candidates
                .entry((r.instruction_id, r.phrase_index))
                .or_default()
                .extend(r.candidates);
        }
        Self { candidates }
    }
}

impl DetectorClient for FixtureDetector {
    fn detect(&self, req: &DetectRequest) -> Result<Vec<Candidate>, ClientError> {
        let Some(stored) = self
            .candidates
            .get(&(req.instruction_id.clone(), req.phrase_index))
        else {
            return Ok(Vec::new());
        };
        let mut position: HashMap<&str, u32> = HashMap::new();
        for n in &req.nodes {
            position
                .entry(n.node_id.as_str())
                .or_insert(n.path_position);
        }
        let out = stored
            .iter()
            .filter_map(|c| match &c.node_id {
                Some(node) => position.get(node.as_str()).map(|&p| {
                    let mut c = c.clone();
                    c.order_key.path_position = p;
                    c
                }),
                None => req
                    .nodes
                    .iter()
                    .any(|n| n.path_position == c.order_key.path_position)
                    .then(|| c.clone()),
            })
            .collect();
        Ok(out)
    }
}

/// Fixture line: `{"instruction_id", "caption"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionFixtureRecord {
    pub instruction_id: String,
    pub caption: String,
}

#[derive(Debug, Clone, Default)]
pub struct FixtureCaptioner {
    captions: HashMap<String, String>,
}

impl FixtureCaptioner {
    pub fn new(records: Vec<CaptionFixtureRecord>) -> Self {
        Self {
            captions: records
                .into_iter()
                .map(|r| (r.instruction_id, r.caption))
                .collect(),
        }
    }
}

impl CaptionerClient for FixtureCaptioner {
    fn caption(&self, req: &CaptionRequest) -> Result<String, ClientError> {
        self.captions
            .get(&req.instruction_id)
            .cloned()
            .ok_or_else(|| ClientError::MissingFixture(req.instruction_id.clone()))
    }
}
