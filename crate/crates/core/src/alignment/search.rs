use std::cmp::Ordering;

use super::scoring::{bbox_score, score_choice, score_from_concordant, weighted_total};
use super::{AlignmentConfig, AlignmentError, CandidateSet, OrderKey, Selection};
use crate::instruction::VisualPrompt;

/// Per-candidate values looked up during search, indexed `[phrase][candidate]`.
pub(crate) struct Tables<'a> {
    pub sets: &'a [CandidateSet],
    pub keys: Vec<Vec<OrderKey>>,
    pub det: Vec<Vec<f64>>,
    pub boxes: Vec<Vec<f64>>,
}

impl<'a> Tables<'a> {
    pub fn new(sets: &'a [CandidateSet]) -> Result<Self, AlignmentError> {
        if sets.is_empty() {
            return Err(AlignmentError::NoCandidateSets);
        }
        if let Some(s) = sets.iter().find(|s| s.is_empty()) {
            return Err(AlignmentError::EmptyCandidateSet(s.phrase_index()));
        }
        let map = |f: &dyn Fn(&super::Candidate) -> f64| -> Vec<Vec<f64>> {
            sets.iter()
                .map(|s| s.candidates().iter().map(f).collect())
                .collect()
        };
        Ok(Self {
            sets,
            keys: sets
                .iter()
                .map(|s| s.candidates().iter().map(|c| c.order_key).collect())
                .collect(),
            det: map(&|c| c.detection_score),
            boxes: map(&bbox_score),
        })
    }

    pub fn n(&self) -> usize {
        self.sets.len()
    }

    /// Exact `S_all` of a complete choice; sums run in phrase order.
    pub fn exact_score(&self, choice: &[usize], cfg: &AlignmentConfig) -> f64 {
        let n = self.n();
        let mut concordant = 0u64;
        for i in 0..n {
            for j in i + 1..n {
                if self.keys[i][choice[i]] <= self.keys[j][choice[j]] {
                    concordant += 1;
                }
            }
        }
        let det = (0..n).fold(0.0, |acc, p| acc + self.det[p][choice[p]]);
        let boxes = (0..n).fold(0.0, |acc, p| acc + self.boxes[p][choice[p]]);
        let nf = n as f64;
        weighted_total(
            score_from_concordant(concordant, n),
            det / nf,
            boxes / nf,
            cfg,
        )
    }

    /// Lexicographic comparison of two choices by their candidates' tie keys.
    pub fn tie_cmp(&self, a: &[usize], b: &[usize]) -> Ordering {
        self.sets
            .iter()
            .enumerate()
            .map(|(p, s)| s.candidates()[a[p]].tie_cmp(&s.candidates()[b[p]]))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    }

    /// True when `(score, choice)` should replace the incumbent.
    pub fn beats(&self, score: f64, choice: &[usize], best: Option<(f64, &[usize])>) -> bool {
        match best {
            None => true,
            Some((best_score, best_choice)) => {
                score > best_score
                    || (score == best_score && self.tie_cmp(choice, best_choice).is_lt())
            }
        }
    }

    pub fn into_selection(self, choice: &[usize], cfg: &AlignmentConfig) -> Selection {
        let phrase_indices = self.sets.iter().map(|s| s.phrase_index()).collect();
        let chosen = self
            .sets
            .iter()
            .zip(choice)
            .map(|(s, &k)| s.candidates()[k].clone())
            .collect();
        score_choice(phrase_indices, chosen, cfg)
    }
}

/// Per-phrase argmax of the detection score. Ties go to the smaller order
/// key, then the smaller image reference.
pub fn select_related(
    sets: &[CandidateSet],
    cfg: &AlignmentConfig,
) -> Result<Selection, AlignmentError> {
    let tables = Tables::new(sets)?;
    let choice = vec![0; sets.len()];
    Ok(tables.into_selection(&choice, cfg))
}

/// Number of complete choices, saturating at `u128::MAX`.
pub fn search_space_size(sets: &[CandidateSet]) -> u128 {
    sets.iter()
        .try_fold(1u128, |acc, s| acc.checked_mul(s.len() as u128))
        .unwrap_or(u128::MAX)
}

/// Enumerates every choice and returns the one with the largest `S_all`.
/// Equal scores go to the lexicographically smallest tuple of
/// `(path_position, view_index, image_ref)` over phrases.
pub fn select_aligned_exhaustive(
    sets: &[CandidateSet],
    cfg: &AlignmentConfig,
) -> Result<Selection, AlignmentError> {
    let tables = Tables::new(sets)?;
    let size = search_space_size(sets);
    if size > u128::from(cfg.oracle_bound) {
        return Err(AlignmentError::SearchSpaceTooLarge {
            size,
            bound: cfg.oracle_bound,
        });
    }
    let mut search = Exhaustive {
        tables: &tables,
        cfg,
        choice: vec![0; sets.len()],
        det_prefix: vec![0.0; sets.len() + 1],
        box_prefix: vec![0.0; sets.len() + 1],
        best: None,
    };
    search.visit(0, 0);
    let best = search.best.expect("non-empty search space").1;
    Ok(tables.into_selection(&best, cfg))
}

struct Exhaustive<'t, 'a> {
    tables: &'t Tables<'a>,
    cfg: &'t AlignmentConfig,
    choice: Vec<usize>,
    det_prefix: Vec<f64>,
    box_prefix: Vec<f64>,
    best: Option<(f64, Vec<usize>)>,
}

impl Exhaustive<'_, '_> {
    fn visit(&mut self, phrase: usize, concordant: u64) {
        let t = self.tables;
        let n = t.n();
        if phrase == n {
            let nf = n as f64;
            let score = weighted_total(
                score_from_concordant(concordant, n),
                self.det_prefix[n] / nf,
                self.box_prefix[n] / nf,
                self.cfg,
            );
            let incumbent = self.best.as_ref().map(|(s, c)| (*s, c.as_slice()));
            if t.beats(score, &self.choice, incumbent) {
                self.best = Some((score, self.choice.clone()));
            }
            return;
        }
        for k in 0..t.keys[phrase].len() {
            let key = t.keys[phrase][k];
            let gained = (0..phrase)
                .filter(|&i| t.keys[i][self.choice[i]] <= key)
                .count() as u64;
            self.choice[phrase] = k;
            self.det_prefix[phrase + 1] = self.det_prefix[phrase] + t.det[phrase][k];
            self.box_prefix[phrase + 1] = self.box_prefix[phrase] + t.boxes[phrase][k];
            self.visit(phrase + 1, concordant + gained);
        }
    }
}

/// Aligned selection: exhaustive when the search space fits in the oracle
/// bound, beam search otherwise.
pub fn select_aligned(
    sets: &[CandidateSet],
    cfg: &AlignmentConfig,
) -> Result<Selection, AlignmentError> {
    if search_space_size(sets) <= u128::from(cfg.oracle_bound) {
        select_aligned_exhaustive(sets, cfg)
    } else {
        super::select_aligned_beam(sets, cfg)
    }
}

/// Terminal prompt: the aligned image of the last landmark.
pub fn derive_terminal(
    aligned: &Selection,
    phrase_count: usize,
) -> Result<VisualPrompt, AlignmentError> {
    let (index, cand) = aligned
        .phrase_indices
        .iter()
        .zip(&aligned.chosen)
        .max_by_key(|(&i, _)| i)
        .ok_or(AlignmentError::EmptySelection)?;
    if *index >= phrase_count {
        return Err(AlignmentError::PhraseOutOfRange {
            index: *index,
            phrases: phrase_count,
        });
    }
    Ok(cand.to_prompt(*index))
}
