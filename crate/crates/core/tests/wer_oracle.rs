//! Alignment oracle: the backtrace-based S/I/D decomposition must agree with
//! an independent cost-only edit-distance DP on total errors, and conserve
//! H + S + D = N, across 500 randomized word-sequence pairs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slamprune::eval::align;

/// Plain Levenshtein distance over words, no backtrace, written against the
/// textbook recurrence rather than the production alignment code.
fn edit_distance(reference: &[&str], hypothesis: &[&str]) -> usize {
    let n = reference.len();
    let m = hypothesis.len();
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for i in 1..=n {
        cur[0] = i;
        for j in 1..=m {
            let sub = prev[j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

fn random_words(rng: &mut ChaCha8Rng, len: usize) -> Vec<String> {
    // Tiny vocabulary so matches, substitutions, and repeats all occur often.
    const WORDS: [&str; 6] = ["a", "b", "c", "ab", "ba", "cc"];
    (0..len)
        .map(|_| WORDS[rng.gen_range(0..WORDS.len())].to_string())
        .collect()
}

#[test]
fn alignment_matches_cost_only_dp_on_500_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0e77);
    for case in 0..500 {
        let ref_len = rng.gen_range(1..=12);
        let reference = random_words(&mut rng, ref_len);
        let hyp_len = rng.gen_range(0..=12);
        let hypothesis = random_words(&mut rng, hyp_len);
        let r: Vec<&str> = reference.iter().map(String::as_str).collect();
        let h: Vec<&str> = hypothesis.iter().map(String::as_str).collect();
        let counts = align(&r, &h).unwrap();
        let distance = edit_distance(&r, &h);
        assert_eq!(
            counts.errors(),
            distance,
            "case {case}: S+I+D != edit distance for {r:?} vs {h:?}"
        );
        assert_eq!(
            counts.hits + counts.substitutions + counts.deletions,
            counts.reference_words,
            "case {case}: H+S+D != N for {r:?} vs {h:?}"
        );
        assert_eq!(counts.reference_words, r.len());
    }
}

#[test]
fn identical_sequences_have_zero_errors() {
    let words = vec!["x", "y", "z"];
    let counts = align(&words, &words).unwrap();
    assert_eq!(counts.errors(), 0);
    assert_eq!(counts.hits, 3);
}
