use fedcode::metrics::{ndcg_at_k, rank_target, recall_at_k, MetricSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Position of the target after a full descending sort that places it
/// behind every item with an equal score.
fn sorted_rank(scores: &[f64], target: usize) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| (a == target).cmp(&(b == target)))
    });
    order.iter().position(|&i| i == target).unwrap() + 1
}

#[test]
fn rank_matches_full_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..1_000 {
        let n = rng.random_range(1..300);
        // Coarse scores so ties are common.
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..20) as f64 * 0.5).collect();
        let target = rng.random_range(0..n);
        assert_eq!(rank_target(&scores, target), sorted_rank(&scores, target));
    }
}

#[test]
fn rank_three_gives_half_ndcg() {
    assert_eq!(ndcg_at_k(&[3], 10).unwrap(), 0.5);
    assert_eq!(recall_at_k(&[3], 10).unwrap(), 1.0);
    let m = MetricSet::from_ranks(&[3, 11, 60]).unwrap();
    assert_eq!(m.recall10, 1.0 / 3.0);
    assert_eq!(m.recall50, 2.0 / 3.0);
}
