//! Adaptive bidirectional beam search over candidate assignments.
//!
//! A forward pass assigns phrases first to last and a backward pass last to
//! first. Partial assignments are ranked by an optimistic bound on the final
//! `S_all`:
//!
//! * concordant pairs among assigned phrases are counted exactly;
//! * a pair between an assigned phrase and an unassigned one is counted when
//!   the unassigned phrase's most favourable key would make it concordant;
//! * pairs among unassigned phrases are all counted;
//! * unassigned phrases contribute their best detection and box scores.
//!
//! The bound never underestimates, and equals the exact score once every
//! phrase is assigned. When the beam is at least as wide as the search space
//! nothing is pruned and the result matches the exhaustive search.

use std::cmp::Reverse;

use super::scoring::score_from_concordant;
use super::search::Tables;
use super::{AlignmentConfig, AlignmentError, CandidateSet, Selection};

/// `min(cap, beam_width * ceil(mean set size / 4))`, at least 1.
pub fn effective_beam_width(sets: &[CandidateSet], cfg: &AlignmentConfig) -> usize {
    if sets.is_empty() {
        return cfg.beam_width.clamp(1, cfg.beam_width_cap.max(1));
    }
    let total: usize = sets.iter().map(CandidateSet::len).sum();
    let quarters = 4 * sets.len();
    let factor = total.div_ceil(quarters).max(1);
    cfg.beam_width
        .saturating_mul(factor)
        .min(cfg.beam_width_cap)
        .max(1)
}

pub fn select_aligned_beam(
    sets: &[CandidateSet],
    cfg: &AlignmentConfig,
) -> Result<Selection, AlignmentError> {
    cfg.validate()?;
    let tables = Tables::new(sets)?;
    let n = tables.n();
    let width = effective_beam_width(sets, cfg);

    let forward_order: Vec<usize> = (0..n).collect();
    let backward_order: Vec<usize> = (0..n).rev().collect();
    let backward_keys: Vec<Vec<_>> = tables
        .keys
        .iter()
        .map(|ks| ks.iter().copied().map(Reverse).collect())
        .collect();

    let mut contenders = beam_pass(&tables, &forward_order, &tables.keys, width, cfg);
    contenders.extend(beam_pass(
        &tables,
        &backward_order,
        &backward_keys,
        width,
        cfg,
    ));
    // per-phrase argmax, so the result never scores below the Related choice
    contenders.push(vec![0; n]);

    let mut best: Option<(f64, Vec<usize>)> = None;
    for choice in contenders {
        let score = tables.exact_score(&choice, cfg);
        let incumbent = best.as_ref().map(|(s, c)| (*s, c.as_slice()));
        if tables.beats(score, &choice, incumbent) {
            best = Some((score, choice));
        }
    }
    let (_, choice) = best.expect("at least one contender");
    Ok(tables.into_selection(&choice, cfg))
}

struct State<K> {
    /// Candidate index per assigned step, in processing order.
    choice: Vec<usize>,
    keys: Vec<K>,
    concordant: u64,
    /// Sum over unassigned phrases of how many assigned keys their best key
    /// would be concordant with.
    future: u64,
    det: f64,
    boxes: f64,
}

struct Expansion {
    parent: usize,
    cand: usize,
    bound: f64,
    concordant: u64,
    future: u64,
    det: f64,
    boxes: f64,
}

/// One directional pass. `keys` are already mapped so that, in processing
/// order, an earlier key `a` and a later key `b` are concordant iff `a <= b`.
/// Returns the final beam as choices indexed by phrase.
fn beam_pass<K: Ord + Copy>(
    tables: &Tables<'_>,
    order: &[usize],
    keys: &[Vec<K>],
    width: usize,
    cfg: &AlignmentConfig,
) -> Vec<Vec<usize>> {
    let n = order.len();
    let nf = n as f64;
    let best_key: Vec<K> = keys
        .iter()
        .map(|ks| *ks.iter().max().expect("non-empty set"))
        .collect();

    // gain[s][k]: phrases processed after step s whose best key is
    // concordant with candidate k of step s
    let gain: Vec<Vec<u64>> = (0..n)
        .map(|s| {
            keys[order[s]]
                .iter()
                .map(|k| {
                    order[s + 1..]
                        .iter()
                        .filter(|&&q| *k <= best_key[q])
                        .count() as u64
                })
                .collect()
        })
        .collect();
    let suffix = |table: &[Vec<f64>]| -> Vec<f64> {
        let mut out = vec![0.0; n + 1];
        for s in (0..n).rev() {
            let best = table[order[s]]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            out[s] = out[s + 1] + best;
        }
        out
    };
    let det_rest = suffix(&tables.det);
    let box_rest = suffix(&tables.boxes);

    let mut beam = vec![State::<K> {
        choice: Vec::new(),
        keys: Vec::new(),
        concordant: 0,
        future: 0,
        det: 0.0,
        boxes: 0.0,
    }];
    let mut expansions = Vec::new();

    for (s, &phrase) in order.iter().enumerate() {
        let unassigned = (n - s - 1) as u64;
        let free_pairs = unassigned * unassigned.saturating_sub(1) / 2;
        expansions.clear();
        for (parent, state) in beam.iter().enumerate() {
            let dropped = state
                .keys
                .iter()
                .filter(|a| **a <= best_key[phrase])
                .count() as u64;
            for (cand, key) in keys[phrase].iter().enumerate() {
                let gained = state.keys.iter().filter(|a| *a <= key).count() as u64;
                let concordant = state.concordant + gained;
                let future = state.future - dropped + gain[s][cand];
                let det = state.det + tables.det[phrase][cand];
                let boxes = state.boxes + tables.boxes[phrase][cand];
                let bound = score_from_concordant(concordant + future + free_pairs, n)
                    + cfg.beta0 * (det + det_rest[s + 1]) / nf
                    + cfg.beta1 * (boxes + box_rest[s + 1]) / nf;
                expansions.push(Expansion {
                    parent,
                    cand,
                    bound,
                    concordant,
                    future,
                    det,
                    boxes,
                });
            }
        }
        // parents are ranked already, so (parent, cand) is a stable tie-break
        expansions.sort_by(|a, b| {
            b.bound
                .total_cmp(&a.bound)
                .then(a.parent.cmp(&b.parent))
                .then(a.cand.cmp(&b.cand))
        });
        expansions.truncate(width);
        beam = expansions
            .iter()
            .map(|e| {
                let parent = &beam[e.parent];
                let mut choice = Vec::with_capacity(s + 1);
                choice.extend_from_slice(&parent.choice);
                choice.push(e.cand);
                let mut ks = Vec::with_capacity(s + 1);
                ks.extend_from_slice(&parent.keys);
                ks.push(keys[phrase][e.cand]);
                State {
                    choice,
                    keys: ks,
                    concordant: e.concordant,
                    future: e.future,
                    det: e.det,
                    boxes: e.boxes,
                }
            })
            .collect();
    }

    beam.into_iter()
        .map(|state| {
            let mut by_phrase = vec![0; n];
            for (s, &k) in state.choice.iter().enumerate() {
                by_phrase[order[s]] = k;
            }
            by_phrase
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::*;
    use super::super::search::tests::arb_sets;
    use super::super::{search_space_size, select_aligned_exhaustive, select_related};
    use super::*;
    use proptest::prelude::*;

    fn wide() -> AlignmentConfig {
        AlignmentConfig {
            beam_width: 625,
            beam_width_cap: 625,
            ..AlignmentConfig::default()
        }
    }

    #[test]
    fn width_rule() {
        let cfg = AlignmentConfig {
            beam_width: 10,
            beam_width_cap: 35,
            ..AlignmentConfig::default()
        };
        let set = |k: usize| {
            CandidateSet::new(
                0,
                (0..k).map(|i| cand(0.5, i as u32, 0, 0.1, "x")).collect(),
            )
            .unwrap()
        };
        assert_eq!(effective_beam_width(&[set(4), set(4)], &cfg), 10);
        assert_eq!(effective_beam_width(&[set(5), set(4)], &cfg), 20);
        assert_eq!(effective_beam_width(&[set(20)], &cfg), 35);
        assert_eq!(effective_beam_width(&[set(1)], &cfg), 10);
    }

    #[test]
    fn single_phrase_matches_related_when_boxes_agree() {
        let cfg = AlignmentConfig::default();
        let sets = vec![CandidateSet::new(
            0,
            vec![
                cand(0.4, 2, 0, 0.5, "a"),
                cand(0.8, 9, 1, 0.5, "b"),
                cand(0.8, 9, 0, 0.5, "c"),
            ],
        )
        .unwrap()];
        let beam = select_aligned_beam(&sets, &cfg).unwrap();
        assert_eq!(beam, select_related(&sets, &cfg).unwrap());
        assert_eq!(beam.s_seq, 1.0);
        assert_eq!(beam.chosen[0].image_ref, "c");
    }

    #[test]
    fn decoy_fixture() {
        let sel = select_aligned_beam(&decoy_sets(), &AlignmentConfig::default()).unwrap();
        let names: Vec<_> = sel.chosen.iter().map(|c| c.image_ref.as_str()).collect();
        assert_eq!(names, ["a_true", "b"]);
    }

    /// True landmark images at strictly increasing positions; lower-scoring
    /// decoys sit at reversed positions.
    fn monotone_instance(n: usize) -> Vec<CandidateSet> {
        (0..n)
            .map(|p| {
                let truth = cand(0.7, 10 + p as u32, 0, 0.3, &format!("true{p}"));
                let decoy = cand(0.6, (10 + n - p) as u32, 2, 0.3, &format!("decoy{p}"));
                let decoy2 = cand(0.65, (2 * n - p) as u32 + 20, 1, 0.3, &format!("far{p}"));
                CandidateSet::new(p, vec![decoy, truth, decoy2]).unwrap()
            })
            .collect()
    }

    #[test]
    fn monotone_chain_beats_decoys() {
        let cfg = AlignmentConfig {
            beam_width: 4,
            beam_width_cap: 4,
            ..AlignmentConfig::default()
        };
        for n in [3, 6, 12] {
            let sets = monotone_instance(n);
            let sel = select_aligned_beam(&sets, &cfg).unwrap();
            assert_eq!(sel.s_seq, 1.0);
            assert!(
                sel.chosen.iter().all(|c| c.image_ref.starts_with("true")),
                "n={n}"
            );
            if search_space_size(&sets) <= 1_000_000 {
                assert_eq!(sel, select_aligned_exhaustive(&sets, &cfg).unwrap());
            }
        }
    }

    #[test]
    fn rejects_empty_inputs() {
        let cfg = AlignmentConfig::default();
        assert_eq!(
            select_aligned_beam(&[], &cfg).unwrap_err(),
            AlignmentError::NoCandidateSets
        );
    }

    proptest! {
        #[test]
        fn equals_exhaustive_when_wide(sets in arb_sets(4, 5)) {
            let cfg = wide();
            prop_assert!(search_space_size(&sets) <= 625);
            let beam = select_aligned_beam(&sets, &cfg).unwrap();
            let oracle = select_aligned_exhaustive(&sets, &cfg).unwrap();
            prop_assert_eq!(beam.s_all.to_bits(), oracle.s_all.to_bits());
            prop_assert_eq!(beam, oracle);
        }

        #[test]
        fn never_below_related(sets in arb_sets(8, 6), width in 1usize..8) {
            let cfg = AlignmentConfig { beam_width: width, beam_width_cap: width, ..AlignmentConfig::default() };
            let beam = select_aligned_beam(&sets, &cfg).unwrap();
            prop_assert!(beam.s_all >= select_related(&sets, &cfg).unwrap().s_all);
        }

        #[test]
        fn deterministic(sets in arb_sets(6, 6)) {
            let cfg = AlignmentConfig { beam_width: 2, beam_width_cap: 3, ..AlignmentConfig::default() };
            prop_assert_eq!(select_aligned_beam(&sets, &cfg).unwrap(), select_aligned_beam(&sets, &cfg).unwrap());
        }
    }
}
