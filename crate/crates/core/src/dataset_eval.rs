//! Dataset-quality evaluation: landmark phrase agreement with a gold
//! annotation (fuzzy matching and ROUGE-L) and viewpoint agreement of the
//! aligned images.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nav::{GraphError, NavGraph};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("{selected} selected viewpoints but {gold} gold viewpoints")]
    LengthMismatch { selected: usize, gold: usize },
}

/// `1 - levenshtein(a, b) / max(|a|, |b|)` over characters; two empty
/// strings are identical.
pub fn fuzzy_similarity(a: &str, b: &str) -> f64 {
    strsim::normalized_levenshtein(a, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeL {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            row[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(row[j])
            };
        }
        std::mem::swap(&mut prev, &mut row);
    }
    prev[b.len()]
}

/// LCS-based precision/recall/F1 of `pred` against `gold`.
pub fn rouge_l<T: PartialEq>(pred: &[T], gold: &[T]) -> RougeL {
    match (pred.is_empty(), gold.is_empty()) {
        (true, true) => {
            return RougeL {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
            }
        }
        (true, false) | (false, true) => {
            return RougeL {
                precision: 0.0,
                recall: 0.0,
                f1: 0.0,
            }
        }
        _ => {}
    }
    let lcs = lcs_len(pred, gold) as f64;
    let precision = lcs / pred.len() as f64;
    let recall = lcs / gold.len() as f64;
    RougeL {
        precision,
        recall,
        f1: harmonic(precision, recall),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhraseScorer {
    Fuzzy,
    RougeL,
}

impl PhraseScorer {
    pub fn default_threshold(&self) -> f64 {
        match self {
            PhraseScorer::Fuzzy => 0.8,
            PhraseScorer::RougeL => 0.5,
        }
    }

    /// Similarity of two phrases after lowercasing and collapsing whitespace.
    pub fn similarity(&self, a: &str, b: &str) -> f64 {
        let (a, b) = (normalize(a), normalize(b));
        match self {
            PhraseScorer::Fuzzy => fuzzy_similarity(&a, &b),
            PhraseScorer::RougeL => {
                let ta: Vec<&str> = a.split(' ').filter(|t| !t.is_empty()).collect();
                let tb: Vec<&str> = b.split(' ').filter(|t| !t.is_empty()).collect();
                rouge_l(&ta, &tb).f1
            }
        }
    }
}

impl std::str::FromStr for PhraseScorer {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "fuzzy" => Ok(PhraseScorer::Fuzzy),
            "rouge-l" | "rougel" | "rouge" => Ok(PhraseScorer::RougeL),
            other => Err(format!("unknown scorer {other:?}")),
        }
    }
}

fn normalize(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhraseMatchReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub hits: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl PhraseMatchReport {
    pub fn from_counts(hits: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |den: usize| {
            if den > 0 {
                hits as f64 / den as f64
            } else if predicted == 0 && gold == 0 {
                1.0
            } else {
                0.0
            }
        };
        let (precision, recall) = (ratio(predicted), ratio(gold));
        Self {
            precision,
            recall,
            f1: harmonic(precision, recall),
            hits,
            predicted,
            gold,
        }
    }
}

/// Greedy one-to-one matching of predicted to gold phrases in descending
/// similarity order. Pairs at or above `threshold` are hits.
pub fn phrase_set_prf<S: AsRef<str>>(
    pred: &[S],
    gold: &[S],
    scorer: PhraseScorer,
    threshold: f64,
) -> PhraseMatchReport {
    let mut pairs = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gold.iter().enumerate() {
            let sim = scorer.similarity(p.as_ref(), g.as_ref());
            if sim >= threshold {
                pairs.push((sim, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut pred_used = vec![false; pred.len()];
    let mut gold_used = vec![false; gold.len()];
    let mut hits = 0;
    for (_, i, j) in pairs {
        if !pred_used[i] && !gold_used[j] {
            pred_used[i] = true;
            gold_used[j] = true;
            hits += 1;
        }
    }
    PhraseMatchReport::from_counts(hits, pred.len(), gold.len())
}

/// Hit counts pooled over a corpus.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PhraseTally {
    pub hits: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl PhraseTally {
    pub fn add(&mut self, r: &PhraseMatchReport) {
        self.hits += r.hits;
        self.predicted += r.predicted;
        self.gold += r.gold;
    }

    pub fn report(&self) -> PhraseMatchReport {
        PhraseMatchReport::from_counts(self.hits, self.predicted, self.gold)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewpointReport {
    pub matching: f64,
    pub neighboring: f64,
    pub total: usize,
}

/// Viewpoint counts pooled over a corpus.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ViewpointTally {
    pub exact: usize,
    pub near: usize,
    pub total: usize,
}

impl ViewpointTally {
    pub fn add(&mut self, selected: &str, gold: &str, graph: &NavGraph) -> Result<(), EvalError> {
        let exact = selected == gold;
        let near = exact || graph.adjacent(selected, gold)?;
        self.exact += usize::from(exact);
        self.near += usize::from(near);
        self.total += 1;
        Ok(())
    }

    /// Empty tallies report zero accuracy.
    pub fn report(&self) -> ViewpointReport {
        let frac = |k: usize| {
            if self.total == 0 {
                0.0
            } else {
                k as f64 / self.total as f64
            }
        };
        ViewpointReport {
            matching: frac(self.exact),
            neighboring: frac(self.near),
            total: self.total,
        }
    }
}

/// Fraction of phrases whose selected viewpoint equals the gold one
/// (`matching`), or equals or neighbors it (`neighboring`).
pub fn viewpoint_accuracy<S: AsRef<str>>(
    selected: &[S],
    gold: &[S],
    graph: &NavGraph,
) -> Result<ViewpointReport, EvalError> {
    if selected.len() != gold.len() {
        return Err(EvalError::LengthMismatch {
            selected: selected.len(),
            gold: gold.len(),
        });
    }
    let mut tally = ViewpointTally::default();
    for (s, g) in selected.iter().zip(gold) {
        tally.add(s.as_ref(), g.as_ref(), graph)?;
    }
    Ok(tally.report())
}

/// Line shape of `gold.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldRecord {
    pub instruction_id: String,
    pub phrases: Vec<String>,
    #[serde(default)]
    pub viewpoints: Vec<String>,
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::nav::tests::line_graph;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Longest common subsequence by enumerating every subsequence of the
    /// shorter list.
    pub(crate) fn brute_lcs<T: PartialEq>(a: &[T], b: &[T]) -> usize {
        let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
        let is_subseq = |mask: u32| {
            let mut it = long.iter();
            (0..short.len())
                .filter(|i| mask >> i & 1 == 1)
                .all(|i| it.any(|x| *x == short[i]))
        };
        (0u32..1 << short.len())
            .filter(|&m| is_subseq(m))
            .map(|m| m.count_ones() as usize)
            .max()
            .unwrap_or(0)
    }

    #[test]
    fn fuzzy_examples() {
        assert_eq!(fuzzy_similarity("wicker chair", "wicker chair"), 1.0);
        assert_abs_diff_eq!(
            fuzzy_similarity("chair", "chairs"),
            1.0 - 1.0 / 6.0,
            epsilon = 1e-12
        );
        assert_eq!(fuzzy_similarity("", "sofa"), 0.0);
        assert_eq!(fuzzy_similarity("", ""), 1.0);
    }

    #[test]
    fn rouge_examples() {
        let toks = |s: &str| s.split(' ').map(String::from).collect::<Vec<_>>();
        let r = rouge_l(&toks("blue chair"), &toks("blue chair"));
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        let r = rouge_l(&toks("the blue chair"), &toks("blue chair"));
        assert_abs_diff_eq!(r.precision, 2.0 / 3.0, epsilon = 1e-12);
        assert_eq!(r.recall, 1.0);
        assert_abs_diff_eq!(r.f1, 0.8, epsilon = 1e-12);
        let r = rouge_l(&toks("red door"), &toks("blue chair"));
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
        let empty: Vec<String> = vec![];
        assert_eq!(rouge_l(&empty, &toks("x")).f1, 0.0);
        assert_eq!(rouge_l(&empty, &empty).f1, 1.0);
    }

    #[test]
    fn phrase_prf_examples() {
        let gold = ["the sofa", "wicker chair", "kitchen", "red door"];
        let r = phrase_set_prf(&gold, &gold, PhraseScorer::Fuzzy, 0.8);
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));

        let pred = [
            "the sofa",
            "wicker chair",
            "kitchen",
            "red door",
            "staircase",
        ];
        let r = phrase_set_prf(&pred, &gold, PhraseScorer::Fuzzy, 0.8);
        assert_eq!((r.precision, r.recall), (0.8, 1.0));
        assert_abs_diff_eq!(r.f1, 0.888_888_888_9, epsilon = 1e-9);

        let none: [&str; 0] = [];
        let r = phrase_set_prf(&none, &gold, PhraseScorer::RougeL, 0.5);
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn greedy_matching_is_one_to_one() {
        let pred = ["chair", "chair"];
        let gold = ["chair"];
        let r = phrase_set_prf(&pred, &gold, PhraseScorer::Fuzzy, 0.8);
        assert_eq!((r.hits, r.precision, r.recall), (1, 0.5, 1.0));
        let r = phrase_set_prf(
            &["The  Blue chair"],
            &["blue chair"],
            PhraseScorer::RougeL,
            0.5,
        );
        assert_eq!(r.hits, 1);
    }

    #[test]
    fn viewpoint_examples() {
        let g = line_graph();
        let r = viewpoint_accuracy(&["A", "C"], &["A", "C"], &g).unwrap();
        assert_eq!((r.matching, r.neighboring), (1.0, 1.0));
        let r = viewpoint_accuracy(&["B", "D", "A"], &["A", "C", "B"], &g).unwrap();
        assert_eq!((r.matching, r.neighboring), (0.0, 1.0));
        let r = viewpoint_accuracy(&["A", "B", "A", "D"], &["A", "B", "C", "B"], &g).unwrap();
        assert_eq!((r.matching, r.neighboring), (0.5, 0.5));
        assert!(matches!(
            viewpoint_accuracy(&["A"], &["Q"], &g),
            Err(EvalError::Graph(_))
        ));
        assert!(matches!(
            viewpoint_accuracy(&["A"], &[], &g),
            Err(EvalError::LengthMismatch { .. })
        ));
    }

    fn phrase() -> impl Strategy<Value = String> {
        "[a-c]{0,3}( [a-c]{1,3}){0,2}"
    }

    proptest! {
        #[test]
        fn lcs_matches_brute_force(a in proptest::collection::vec(0u8..3, 0..=8), b in proptest::collection::vec(0u8..3, 0..=8)) {
            prop_assert_eq!(lcs_len(&a, &b), brute_lcs(&a, &b));
        }

        #[test]
        fn similarities_symmetric(a in phrase(), b in phrase()) {
            prop_assert_eq!(fuzzy_similarity(&a, &b), fuzzy_similarity(&b, &a));
            let ta: Vec<char> = a.chars().collect();
            let tb: Vec<char> = b.chars().collect();
            prop_assert!((rouge_l(&ta, &tb).f1 - rouge_l(&tb, &ta).f1).abs() < 1e-12);
        }

        #[test]
        fn hit_counts_are_integral(pred in proptest::collection::vec(phrase(), 0..6), gold in proptest::collection::vec(phrase(), 0..6), fuzzy in any::<bool>(), t in 0.1f64..=1.0) {
            let scorer = if fuzzy { PhraseScorer::Fuzzy } else { PhraseScorer::RougeL };
            let r = phrase_set_prf(&pred, &gold, scorer, t);
            if !pred.is_empty() {
                prop_assert!((r.precision * pred.len() as f64 - r.hits as f64).abs() < 1e-9);
            }
            if !gold.is_empty() {
                prop_assert!((r.recall * gold.len() as f64 - r.hits as f64).abs() < 1e-9);
            }
            prop_assert!(r.hits <= pred.len().min(gold.len()));
        }

        #[test]
        fn neighboring_at_least_matching(pairs in proptest::collection::vec((0usize..7, 0usize..7), 0..12)) {
            let g = line_graph();
            let names = ["A", "B", "C", "D", "E", "F", "Z"];
            let sel: Vec<&str> = pairs.iter().map(|p| names[p.0]).collect();
            let gold: Vec<&str> = pairs.iter().map(|p| names[p.1]).collect();
            let r = viewpoint_accuracy(&sel, &gold, &g).unwrap();
            prop_assert!(r.neighboring >= r.matching);
        }
    }
}
