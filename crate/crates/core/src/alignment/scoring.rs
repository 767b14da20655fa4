use super::{AlignmentConfig, Candidate, Selection};

/// Order-consistency score `4c / (n(n-1)) - 1`, where `c` counts the pairs
/// `i < j` with `keys[i] <= keys[j]`. Equal keys count as concordant.
/// Sequences of length 0 or 1 score 1.
pub fn sequence_score<K: Ord + Clone>(keys: &[K]) -> f64 {
    let n = keys.len();
    if n < 2 {
        return 1.0;
    }
    let total = (n * (n - 1) / 2) as u64;
    let inversions = count_strict_inversions(&mut keys.to_vec());
    score_from_concordant(total - inversions, n)
}

pub(crate) fn score_from_concordant(concordant: u64, n: usize) -> f64 {
    if n < 2 {
        return 1.0;
    }
    4.0 * concordant as f64 / (n as f64 * (n as f64 - 1.0)) - 1.0
}

/// Number of pairs `i < j` with `v[i] > v[j]`, by merge sort. Sorts `v`.
fn count_strict_inversions<K: Ord + Clone>(v: &mut [K]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut count = count_strict_inversions(&mut v[..mid]) + count_strict_inversions(&mut v[mid..]);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        // equal elements are not inversions, so the left one goes first
        if v[i] <= v[j] {
            merged.push(v[i].clone());
            i += 1;
        } else {
            count += (mid - i) as u64;
            merged.push(v[j].clone());
            j += 1;
        }
    }
    merged.extend_from_slice(&v[i..mid]);
    merged.extend_from_slice(&v[j..]);
    v.clone_from_slice(&merged);
    count
}

/// Fraction of the frame covered by the candidate's box.
pub fn bbox_score(c: &Candidate) -> f64 {
    c.bbox.area() / c.image_dims.area()
}

pub(crate) fn weighted_total(s_seq: f64, det_avg: f64, box_avg: f64, cfg: &AlignmentConfig) -> f64 {
    s_seq + cfg.beta0 * det_avg + cfg.beta1 * box_avg
}

/// Scores a complete choice given in phrase order. Phrase indices default to
/// `0..n`.
pub fn combined_score(chosen: Vec<Candidate>, cfg: &AlignmentConfig) -> Selection {
    let phrase_indices = (0..chosen.len()).collect();
    score_choice(phrase_indices, chosen, cfg)
}

pub(crate) fn score_choice(
    phrase_indices: Vec<usize>,
    chosen: Vec<Candidate>,
    cfg: &AlignmentConfig,
) -> Selection {
    let keys: Vec<_> = chosen.iter().map(|c| c.order_key).collect();
    let s_seq = sequence_score(&keys);
    let n = chosen.len().max(1) as f64;
    let det_sum = chosen.iter().fold(0.0, |acc, c| acc + c.detection_score);
    let box_sum = chosen.iter().fold(0.0, |acc, c| acc + bbox_score(c));
    let (s_det_avg, s_box_avg) = (det_sum / n, box_sum / n);
    Selection {
        phrase_indices,
        chosen,
        s_seq,
        s_det_avg,
        s_box_avg,
        s_all: weighted_total(s_seq, s_det_avg, s_box_avg, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::*;
    use super::*;
    use crate::alignment::OrderKey;
    use crate::instruction::{BBox, ImageDims};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Direct pair enumeration with the `<=` concordance rule.
    fn brute_concordant<K: Ord>(keys: &[K]) -> u64 {
        let mut c = 0;
        for i in 0..keys.len() {
            for j in i + 1..keys.len() {
                if keys[i] <= keys[j] {
                    c += 1;
                }
            }
        }
        c
    }

    #[test]
    fn sequence_examples() {
        assert_eq!(sequence_score(&[1, 2, 3]), 1.0);
        assert_eq!(sequence_score(&[3, 2, 1]), -1.0);
        assert_abs_diff_eq!(sequence_score(&[2, 1, 3]), 1.0 / 3.0, epsilon = 1e-15);
        assert_eq!(sequence_score(&[1, 1, 2]), 1.0);
        assert_eq!(sequence_score::<u32>(&[]), 1.0);
        assert_eq!(sequence_score(&[7]), 1.0);
        assert_eq!(brute_concordant(&[2, 1, 3]), 2);
    }

    #[test]
    fn bbox_examples() {
        let full = cand(0.5, 0, 0, 1.0, "a");
        assert_eq!(bbox_score(&full), 1.0);
        let mut c = full.clone();
        c.bbox = BBox::new(0.0, 0.0, 50.0, 50.0);
        assert_eq!(bbox_score(&c), 0.25);
        c.bbox = BBox::new(10.0, 10.0, 30.0, 20.0);
        c.image_dims = ImageDims::new(200, 100);
        assert_abs_diff_eq!(bbox_score(&c), 0.03, epsilon = 1e-15);
    }

    #[test]
    fn combined_examples() {
        let cfg = AlignmentConfig::default();
        // s_seq = 1, det avg 0.8, box avg 0.5
        let sel = combined_score(
            vec![cand(0.7, 0, 0, 0.4, "a"), cand(0.9, 1, 0, 0.6, "b")],
            &cfg,
        );
        assert_eq!(sel.s_seq, 1.0);
        assert_abs_diff_eq!(sel.s_det_avg, 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(sel.s_box_avg, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(sel.s_all, 1.45, epsilon = 1e-12);

        let single = combined_score(vec![cand(0.6, 4, 0, 0.25, "a")], &cfg);
        assert_abs_diff_eq!(single.s_all, 1.325, epsilon = 1e-12);

        // keys [2,1,3], det avg 0.6, box avg 0.2
        let sel = combined_score(
            vec![
                cand(0.5, 2, 0, 0.2, "a"),
                cand(0.6, 1, 0, 0.1, "b"),
                cand(0.7, 3, 0, 0.3, "c"),
            ],
            &cfg,
        );
        assert_abs_diff_eq!(sel.s_all, 1.0 / 3.0 + 0.3 + 0.02, epsilon = 1e-12);
        assert_abs_diff_eq!(sel.s_all, 0.6533, epsilon = 1e-4);
    }

    #[test]
    fn view_index_breaks_position_ties() {
        let keys = [OrderKey::new(1, 5), OrderKey::new(1, 2)];
        assert_eq!(sequence_score(&keys), -1.0);
    }

    proptest! {
        #[test]
        fn matches_pair_enumeration(keys in proptest::collection::vec(0u8..6, 0..25)) {
            let n = keys.len();
            let expected = if n < 2 {
                1.0
            } else {
                4.0 * brute_concordant(&keys) as f64 / (n * (n - 1)) as f64 - 1.0
            };
            let got = sequence_score(&keys);
            prop_assert_eq!(got, expected);
            prop_assert!((-1.0..=1.0).contains(&got));
            let sorted = keys.windows(2).all(|w| w[0] <= w[1]);
            prop_assert_eq!(got == 1.0, sorted);
        }

        #[test]
        fn reversal_negates_without_ties(mut keys in proptest::collection::hash_set(0u32..1000, 2..20).prop_map(|s| s.into_iter().collect::<Vec<_>>())) {
            let fwd = sequence_score(&keys);
            keys.reverse();
            let rev = sequence_score(&keys);
            prop_assert!((fwd + rev).abs() < 1e-12);
        }
    }
}
