//! Dataset generation: extraction, detection, alignment and augmentation
//! over pluggable clients.
//!
//! Instructions are processed independently (in parallel on the current
//! rayon pool) and the outputs are ordered by instruction id, so a run with
//! fixed inputs and seed always produces the same files.

mod augment;
pub mod clients;
pub mod remote;

use std::collections::HashSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use augment::{sample_augmented, AugmentRecord, AugmentStore, DEFAULT_VARIANTS};
pub use clients::{
    CaptionFixtureRecord, CaptionRequest, CaptionerClient, ClientError, DetectRequest,
    DetectorClient, ExtractRequest, ExtractorClient, FixtureCaptioner, FixtureDetector,
    FixtureExtractor, NodeRef, PhraseFixtureRecord,
};
pub use remote::{RemoteEndpoint, RemoteOptions};

use crate::alignment::{
    derive_terminal, select_aligned, select_related, AlignmentConfig, AlignmentError, CandidateSet,
};
use crate::instruction::{
    InstructionError, MultiModalInstruction, PhraseSpan, Setting, TextInstruction,
};
use crate::io::{write_jsonl, DatasetError};
use crate::nav::{GraphError, NavGraph};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("extractor returned invalid spans: {0}")]
    InvalidSpanFromClient(InstructionError),
    #[error("detector returned an invalid candidate for phrase {phrase_index}: {reason}")]
    InvalidCandidateFromClient { phrase_index: usize, reason: String },
    #[error("augmentation variant equals its original {0:?}")]
    InvalidAugmentation(String),
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Instruction(#[from] InstructionError),
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("instruction {id}: {source}")]
    AtInstruction {
        id: String,
        #[source]
        source: Box<PipelineError>,
    },
}

impl PipelineError {
    /// The innermost error, past any instruction context.
    pub fn root(&self) -> &PipelineError {
        match self {
            PipelineError::AtInstruction { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for failures of external clients or the file system, as opposed
    /// to invalid input.
    pub fn is_environmental(&self) -> bool {
        matches!(
            self.root(),
            PipelineError::Client(_) | PipelineError::Dataset(DatasetError::Io { .. })
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub alignment: AlignmentConfig,
    /// Probability of substituting a prompt image by a generated variant.
    pub gamma: f64,
    pub seed: u64,
    /// Variants per prompt considered during substitution.
    pub variants: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            alignment: AlignmentConfig::default(),
            gamma: 0.2,
            seed: 0,
            variants: DEFAULT_VARIANTS,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.alignment.validate()?;
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(PipelineError::InvalidConfig(format!(
                "gamma = {} outside [0, 1]",
                self.gamma
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissReason {
    /// The instruction has no landmark phrases.
    NoPhrases,
    /// The detector found nothing for this phrase.
    NoCandidates,
}

/// Line shape of `misses.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissRecord {
    pub instruction_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phrase_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phrase: Option<String>,
    pub reason: MissReason,
}

/// Splitmix-style mix of a run seed with an instruction id, stable across
/// platforms and releases.
pub fn instruction_seed(seed: u64, id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = h ^ seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Asks the extractor for landmark phrases and validates them against the
/// instruction's tokens. Invalid spans are reported, not repaired.
pub fn run_extraction(
    instr: &TextInstruction,
    client: &dyn ExtractorClient,
) -> Result<Vec<PhraseSpan>, PipelineError> {
    let req = ExtractRequest {
        instruction_id: instr.id().to_string(),
        text: instr.text(),
        tokens: instr.tokens().to_vec(),
    };
    let phrases = client.extract(&req)?;
    let checked = instr
        .with_phrases(phrases)
        .map_err(PipelineError::InvalidSpanFromClient)?;
    Ok(checked.phrases().to_vec())
}

/// Path nodes with their positions.
pub fn path_nodes(path: &[String]) -> Vec<NodeRef> {
    path.iter()
        .enumerate()
        .map(|(i, n)| NodeRef {
            node_id: n.clone(),
            path_position: i as u32,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionOutcome {
    pub sets: Vec<CandidateSet>,
    pub misses: Vec<MissRecord>,
}

/// One detector call per phrase over `nodes`. Phrases without candidates are
/// recorded as misses and get no set.
pub fn run_detection(
    instruction_id: &str,
    phrases: &[PhraseSpan],
    nodes: &[NodeRef],
    client: &dyn DetectorClient,
) -> Result<DetectionOutcome, PipelineError> {
    let mut sets = Vec::new();
    let mut misses = Vec::new();
    for (phrase_index, phrase) in phrases.iter().enumerate() {
        let req = DetectRequest {
            instruction_id: instruction_id.to_string(),
            phrase_index,
            phrase: phrase.text.clone(),
            nodes: nodes.to_vec(),
        };
        let found = client.detect(&req)?;
        if found.is_empty() {
            misses.push(MissRecord {
                instruction_id: instruction_id.to_string(),
                phrase_index: Some(phrase_index),
                phrase: Some(phrase.text.clone()),
                reason: MissReason::NoCandidates,
            });
            continue;
        }
        let set = CandidateSet::new(phrase_index, found).map_err(|e| {
            PipelineError::InvalidCandidateFromClient {
                phrase_index,
                reason: e.to_string(),
            }
        })?;
        sets.push(set);
    }
    Ok(DetectionOutcome { sets, misses })
}

/// The three prompt settings of one instruction.
#[derive(Debug, Clone, PartialEq)]
pub struct SettingRecords {
    pub aligned: MultiModalInstruction,
    pub related: MultiModalInstruction,
    pub terminal: MultiModalInstruction,
}

impl SettingRecords {
    pub fn text_only(instr: &TextInstruction) -> Self {
        let t = MultiModalInstruction::text_only(instr.clone());
        Self {
            aligned: t.clone(),
            related: t.clone(),
            terminal: t,
        }
    }

    pub fn get(&self, setting: Setting) -> Option<&MultiModalInstruction> {
        match setting {
            Setting::Aligned => Some(&self.aligned),
            Setting::Related => Some(&self.related),
            Setting::Terminal => Some(&self.terminal),
            Setting::TextOnly => None,
        }
    }
}

/// Aligned by score optimization, Related by per-phrase argmax, Terminal as
/// the last Aligned image.
pub fn build_settings(
    instr: &TextInstruction,
    sets: &[CandidateSet],
    cfg: &PipelineConfig,
) -> Result<SettingRecords, PipelineError> {
    let aligned_sel = select_aligned(sets, &cfg.alignment)?;
    let related_sel = select_related(sets, &cfg.alignment)?;
    let terminal = derive_terminal(&aligned_sel, instr.phrases().len())?;
    let aligned =
        MultiModalInstruction::new(instr.clone(), aligned_sel.prompts(), Setting::Aligned)?
            .with_scores(Some(aligned_sel.scores()));
    let related =
        MultiModalInstruction::new(instr.clone(), related_sel.prompts(), Setting::Related)?
            .with_scores(Some(related_sel.scores()));
    let terminal = MultiModalInstruction::new(instr.clone(), vec![terminal], Setting::Terminal)?;
    Ok(SettingRecords {
        aligned,
        related,
        terminal,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreExploreOutcome {
    pub record: MultiModalInstruction,
    pub misses: Vec<MissRecord>,
    /// Nodes handed to the detector: the pseudo path and its neighbors.
    pub scanned: Vec<NodeRef>,
}

/// Nodes of `path` in order, each followed by its not-yet-seen neighbors.
/// Neighbors share the path position of the node they were reached from.
pub fn exploration_nodes(path: &[String], graph: &NavGraph) -> Result<Vec<NodeRef>, GraphError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, node) in path.iter().enumerate() {
        let neighbors = graph.neighbors(node)?;
        for id in std::iter::once(node.as_str()).chain(neighbors) {
            if seen.insert(id.to_string()) {
                out.push(NodeRef {
                    node_id: id.to_string(),
                    path_position: i as u32,
                });
            }
        }
    }
    Ok(out)
}

/// Builds an Aligned instruction from images harvested along an agent's own
/// pseudo path (and the neighbors of its nodes) instead of the gold path.
/// Falls back to a text-only record when nothing is detected.
pub fn pre_explore_build(
    instr: &TextInstruction,
    pseudo_path: &[String],
    graph: &NavGraph,
    detector: &dyn DetectorClient,
    cfg: &PipelineConfig,
) -> Result<PreExploreOutcome, PipelineError> {
    graph.check_trajectory(pseudo_path)?;
    let scanned = exploration_nodes(pseudo_path, graph)?;
    let allowed: HashSet<&str> = scanned.iter().map(|n| n.node_id.as_str()).collect();
    let outcome = run_detection(instr.id(), instr.phrases(), &scanned, detector)?;
    for set in &outcome.sets {
        for c in set.candidates() {
            match &c.node_id {
                Some(n) if allowed.contains(n.as_str()) => {}
                other => {
                    return Err(PipelineError::InvalidCandidateFromClient {
                        phrase_index: set.phrase_index(),
                        reason: format!("{} comes from unscanned node {other:?}", c.image_ref),
                    })
                }
            }
        }
    }
    let mut misses = outcome.misses;
    if instr.phrases().is_empty() {
        misses.push(MissRecord {
            instruction_id: instr.id().to_string(),
            phrase_index: None,
            phrase: None,
            reason: MissReason::NoPhrases,
        });
    }
    let record = if outcome.sets.is_empty() {
        MultiModalInstruction::text_only(instr.clone())
    } else {
        let sel = select_aligned(&outcome.sets, &cfg.alignment)?;
        MultiModalInstruction::new(instr.clone(), sel.prompts(), Setting::Aligned)?
            .with_scores(Some(sel.scores()))
    };
    Ok(PreExploreOutcome {
        record,
        misses,
        scanned,
    })
}

/// Outputs of one instruction.
#[derive(Debug, Clone, PartialEq)]
pub struct InstructionOutput {
    pub settings: SettingRecords,
    pub misses: Vec<MissRecord>,
}

/// Output dataset of a pipeline run, ordered by instruction id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetOutput {
    pub aligned: Vec<MultiModalInstruction>,
    pub related: Vec<MultiModalInstruction>,
    pub terminal: Vec<MultiModalInstruction>,
    pub misses: Vec<MissRecord>,
}

impl DatasetOutput {
    pub fn records(&self, setting: Setting) -> &[MultiModalInstruction] {
        match setting {
            Setting::Aligned => &self.aligned,
            Setting::Related => &self.related,
            Setting::Terminal => &self.terminal,
            Setting::TextOnly => &[],
        }
    }

    /// Writes `<setting>.jsonl` for each requested setting and `misses.jsonl`.
    pub fn write_to(&self, dir: &Path, settings: &[Setting]) -> Result<(), DatasetError> {
        std::fs::create_dir_all(dir).map_err(|source| DatasetError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        for &s in settings {
            write_jsonl(dir.join(format!("{s}.jsonl")), self.records(s))?;
        }
        write_jsonl(dir.join("misses.jsonl"), &self.misses)
    }
}

/// The full generation pipeline over a set of clients.
pub struct Pipeline<'a> {
    pub extractor: Option<&'a dyn ExtractorClient>,
    pub detector: &'a dyn DetectorClient,
    pub captioner: Option<&'a dyn CaptionerClient>,
    pub augment: Option<&'a AugmentStore>,
    pub config: PipelineConfig,
}

impl<'a> Pipeline<'a> {
    pub fn new(detector: &'a dyn DetectorClient, config: PipelineConfig) -> Self {
        Self {
            extractor: None,
            detector,
            captioner: None,
            augment: None,
            config,
        }
    }

    pub fn process(&self, instr: &TextInstruction) -> Result<InstructionOutput, PipelineError> {
        let mut instr = instr.clone();
        if instr.phrases().is_empty() {
            if let Some(extractor) = self.extractor {
                let phrases = run_extraction(&instr, extractor)?;
                instr = instr.with_phrases(phrases)?;
            }
        }
        if let Some(captioner) = self.captioner {
            let caption = captioner.caption(&CaptionRequest {
                instruction_id: instr.id().to_string(),
                path: instr.path_node_ids().to_vec(),
            })?;
            instr = instr.with_caption(Some(caption));
        }
        if instr.phrases().is_empty() {
            return Ok(InstructionOutput {
                settings: SettingRecords::text_only(&instr),
                misses: vec![MissRecord {
                    instruction_id: instr.id().to_string(),
                    phrase_index: None,
                    phrase: None,
                    reason: MissReason::NoPhrases,
                }],
            });
        }

        let nodes = path_nodes(instr.path_node_ids());
        let detection = run_detection(instr.id(), instr.phrases(), &nodes, self.detector)?;
        let mut settings = if detection.sets.is_empty() {
            SettingRecords::text_only(&instr)
        } else {
            build_settings(&instr, &detection.sets, &self.config)?
        };
        if let Some(store) = self.augment {
            let seed = instruction_seed(self.config.seed, instr.id());
            let cfg = &self.config;
            let aug = |m: &MultiModalInstruction, salt: u64| {
                sample_augmented(m, store, cfg.gamma, cfg.variants, seed ^ salt)
            };
            settings = SettingRecords {
                aligned: aug(&settings.aligned, 1),
                related: aug(&settings.related, 2),
                terminal: aug(&settings.terminal, 3),
            };
        }
        Ok(InstructionOutput {
            settings,
            misses: detection.misses,
        })
    }

    /// Processes every instruction; outputs are sorted by instruction id.
    pub fn run(&self, instructions: &[TextInstruction]) -> Result<DatasetOutput, PipelineError> {
        self.config.validate()?;
        let mut outputs: Vec<(String, InstructionOutput)> = instructions
            .par_iter()
            .map(|instr| {
                self.process(instr)
                    .map(|out| (instr.id().to_string(), out))
                    .map_err(|e| PipelineError::AtInstruction {
                        id: instr.id().to_string(),
                        source: Box::new(e),
                    })
            })
            .collect::<Result<_, _>>()?;
        outputs.sort_by(|a, b| a.0.cmp(&b.0));
        let mut data = DatasetOutput::default();
        for (_, out) in outputs {
            data.aligned.push(out.settings.aligned);
            data.related.push(out.settings.related);
            data.terminal.push(out.settings.terminal);
            data.misses.extend(out.misses);
        }
        Ok(data)
    }
}
