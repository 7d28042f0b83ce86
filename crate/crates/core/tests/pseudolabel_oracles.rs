//! Keep-ratio thresholds and frame voting against independently coded
//! oracles.

use std::collections::BTreeSet;

use cycda::pseudolabel::{
    aggregate, average_frames, compute_threshold, keep_count, threshold_and_vote, threshold_from_scores, AggregationStrategy,
    FramePrediction, VideoPseudoLabel,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Keep ratios as exact fractions `num / den`.
const RATIOS: [(usize, usize); 4] = [(1, 2), (7, 10), (4, 5), (1, 1)];

fn frame(video_id: usize, frame_index: usize, class_id: usize, confidence: f64, classes: usize) -> FramePrediction {
    let rest = (1.0 - confidence) / (classes - 1) as f64;
    let mut probs = vec![rest; classes];
    probs[class_id] = confidence;
    FramePrediction {
        video_id,
        frame_index,
        class_id,
        confidence,
        probs,
    }
}

/// Frames whose per-video maxima are pairwise distinct.
fn distinct_max_instance(rng: &mut ChaCha8Rng) -> (Vec<FramePrediction>, usize) {
    let n = rng.random_range(1..60);
    let classes = 4;
    let mut maxima = BTreeSet::new();
    while maxima.len() < n {
        maxima.insert(rng.random_range(300_000u64..1_000_000));
    }
    let mut maxima: Vec<f64> = maxima.into_iter().map(|m| m as f64 / 1e6).collect();
    maxima.shuffle(rng);
    let mut preds = Vec::new();
    for (v, &m) in maxima.iter().enumerate() {
        let frames = rng.random_range(1..6);
        let top = rng.random_range(0..frames);
        for t in 0..frames {
            let c = if t == top { m } else { rng.random_range(0.25..m) };
            preds.push(frame(v, t, rng.random_range(0..classes), c, classes));
        }
    }
    preds.shuffle(rng);
    (preds, n)
}

#[test]
fn threshold_keeps_floor_pn_videos() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for instance in 0..1000 {
        let (preds, n) = distinct_max_instance(&mut rng);
        for (num, den) in RATIOS {
            let p = num as f64 / den as f64;
            let delta = compute_threshold(&preds, p).unwrap();
            let survivors: BTreeSet<usize> = preds
                .iter()
                .filter(|f| f.confidence >= delta)
                .map(|f| f.video_id)
                .collect();
            assert_eq!(survivors.len(), num * n / den, "instance {instance}, p {p}, n {n}");
        }
    }
}

#[test]
fn worked_threshold_example() {
    let preds: Vec<FramePrediction> = [0.9, 0.8, 0.6, 0.4]
        .iter()
        .enumerate()
        .map(|(v, &c)| frame(v, 0, 0, c, 2))
        .collect();
    assert_eq!(compute_threshold(&preds, 0.5).unwrap(), 0.7);
    let kept = threshold_and_vote(&preds, 0.7);
    assert_eq!(kept.iter().map(|l| l.video_id).collect::<Vec<_>>(), vec![0, 1]);
}

/// Filter-and-vote written from the rule text: keep frames with confidence
/// at least delta; the winner has the most votes, then the highest summed
/// confidence, then the lowest class id; videos with no surviving frame are
/// dropped.
fn vote_oracle(preds: &[FramePrediction], delta: f64, classes: usize) -> Vec<VideoPseudoLabel> {
    let videos: BTreeSet<usize> = preds.iter().map(|f| f.video_id).collect();
    let mut out = Vec::new();
    for v in videos {
        let kept: Vec<&FramePrediction> = preds
            .iter()
            .filter(|f| f.video_id == v && f.confidence >= delta)
            .collect();
        if kept.is_empty() {
            continue;
        }
        let mut candidates: Vec<(usize, f64, usize)> = (0..classes)
            .map(|c| {
                let mine: Vec<f64> = kept.iter().filter(|f| f.class_id == c).map(|f| f.confidence).collect();
                (mine.len(), mine.iter().sum::<f64>(), c)
            })
            .filter(|&(votes, _, _)| votes > 0)
            .collect();
        candidates.sort_by(|a, b| b.0.cmp(&a.0).then(b.1.total_cmp(&a.1)).then(a.2.cmp(&b.2)));
        let (votes, sum, class_id) = candidates[0];
        out.push(VideoPseudoLabel {
            video_id: v,
            class_id,
            confidence: sum / votes as f64,
        });
    }
    out
}

#[test]
fn thresh_then_avg_matches_brute_force_vote() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut ties_seen = 0;
    for instance in 0..500 {
        let classes = rng.random_range(2..5);
        let n = rng.random_range(1..12);
        let mut preds = Vec::new();
        for v in 0..n {
            for t in 0..rng.random_range(1..8) {
                // eighths are exact in binary, so equal vote sums tie exactly
                let c = rng.random_range(4..=8) as f64 / 8.0;
                preds.push(frame(v, t, rng.random_range(0..classes), c, classes));
            }
        }
        preds.shuffle(&mut rng);
        let (num, den) = RATIOS[rng.random_range(0..RATIOS.len())];
        let p = num as f64 / den as f64;

        let delta = compute_threshold(&preds, p).unwrap();
        let got = aggregate(&preds, p, AggregationStrategy::ThreshThenAvg).unwrap();
        assert_eq!(got, vote_oracle(&preds, delta, classes), "instance {instance}");

        // also at a delta equal to an observed confidence
        let exact = preds[rng.random_range(0..preds.len())].confidence;
        assert_eq!(
            threshold_and_vote(&preds, exact),
            vote_oracle(&preds, exact, classes),
            "instance {instance}, delta {exact}"
        );

        let oracle_all = vote_oracle(&preds, f64::NEG_INFINITY, classes);
        for l in &oracle_all {
            let tally = |c: usize| {
                let v: Vec<f64> = preds
                    .iter()
                    .filter(|f| f.video_id == l.video_id && f.class_id == c)
                    .map(|f| f.confidence)
                    .collect();
                (v.len(), v.iter().sum::<f64>())
            };
            let w = tally(l.class_id);
            if (0..classes).any(|c| c != l.class_id && tally(c).0 == w.0) {
                ties_seen += 1;
            }
        }
    }
    assert!(ties_seen > 100, "only {ties_seen} vote ties exercised");
}

#[test]
fn tie_rule_examples() {
    // equal votes, higher summed confidence wins
    let preds = vec![frame(0, 0, 2, 0.9, 3), frame(0, 1, 1, 0.6, 3), frame(0, 2, 1, 0.5, 3), frame(0, 3, 2, 0.75, 3)];
    assert_eq!(threshold_and_vote(&preds, 0.0)[0].class_id, 2);
    // equal votes and sums, lowest class id wins
    let preds = vec![frame(0, 0, 2, 0.75, 3), frame(0, 1, 1, 0.75, 3)];
    assert_eq!(threshold_and_vote(&preds, 0.0)[0].class_id, 1);
}

#[test]
fn average_strategies_keep_floor_pn_videos() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let (preds, n) = distinct_max_instance(&mut rng);
        for (num, den) in RATIOS {
            let p = num as f64 / den as f64;
            let kept = aggregate(&preds, p, AggregationStrategy::AvgThenThresh).unwrap();
            let averaged = average_frames(&preds).unwrap();
            let distinct: BTreeSet<u64> = averaged.iter().map(|l| l.confidence.to_bits()).collect();
            // averaged confidences can coincide; the count is exact when they do not
            if distinct.len() == n {
                assert_eq!(kept.len(), num * n / den);
            } else {
                assert!(kept.len() >= num * n / den && kept.len() <= n);
            }
        }
    }
}

proptest! {
    #[test]
    fn threshold_separates_kth_and_next_score(
        scores in prop::collection::btree_set(0u32..1_000_000, 1..80),
        ratio in 0usize..4,
    ) {
        let scores: Vec<f64> = scores.into_iter().map(|s| s as f64 / 1e6).collect();
        let (num, den) = RATIOS[ratio];
        let p = num as f64 / den as f64;
        let delta = threshold_from_scores(&scores, p).unwrap();
        let kept = scores.iter().filter(|&&s| s >= delta).count();
        prop_assert_eq!(kept, num * scores.len() / den);
        prop_assert_eq!(kept, keep_count(p, scores.len()));
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        if kept > 0 && kept < sorted.len() {
            prop_assert!(delta <= sorted[kept - 1] && delta > sorted[kept]);
        }
    }

    #[test]
    fn threshold_is_invariant_to_score_order(mut scores in prop::collection::vec(0.0f64..1.0, 1..50), seed in any::<u64>()) {
        let before = threshold_from_scores(&scores, 0.7).unwrap();
        scores.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(before.to_bits(), threshold_from_scores(&scores, 0.7).unwrap().to_bits());
    }
}
