use proptest::prelude::*;

use mltfr_core::metrics::{compute_improvement, rank_metrics};

fn instances() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>, usize)> {
    (1usize..10, 1usize..8).prop_flat_map(|(n, users)| {
        (
            prop::collection::vec(prop::collection::vec((0u8..6).prop_map(f64::from), n), users),
            prop::collection::vec(0..n, users),
            1..=n,
        )
    })
}

fn oracle(scores: &[Vec<f64>], targets: &[usize], k: usize) -> (f64, f64, f64) {
    let (mut hr, mut ndcg, mut top1) = (0.0, 0.0, 0.0);
    for (s, &t) in scores.iter().zip(targets) {
        let mut order: Vec<usize> = (0..s.len()).collect();
        order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
        let rank = order.iter().position(|&i| i == t).unwrap() + 1;
        if rank <= k {
            hr += 1.0;
            ndcg += 1.0 / ((rank + 1) as f64).log2();
        }
        if rank == 1 {
            top1 += 1.0;
        }
    }
    let n = targets.len() as f64;
    (hr / n, ndcg / n, top1 / n)
}

proptest! {
    #[test]
    fn agrees_with_full_sort((scores, targets, k) in instances()) {
        let r = rank_metrics(&scores, &targets, k).unwrap();
        let (hr, ndcg, top1) = oracle(&scores, &targets, k);
        prop_assert!((r.hr_at_k - hr).abs() < 1e-12);
        prop_assert!((r.ndcg_at_k - ndcg).abs() < 1e-12);
        prop_assert!((r.top1 - top1).abs() < 1e-12);
        prop_assert!(r.ndcg_at_k <= r.hr_at_k + 1e-15);
        prop_assert_eq!(r.n_users, targets.len());
    }

    #[test]
    fn identical_metrics_improve_by_zero(x in 1e-6f64..1.0, y in 1e-6f64..1.0) {
        prop_assert_eq!(compute_improvement(x, y, x, y).unwrap(), 0.0);
    }
}

#[test]
fn nonpositive_inputs_are_rejected() {
    assert!(compute_improvement(0.1, -0.1, 0.1, 0.1).is_err());
    assert!(compute_improvement(0.1, 0.1, f64::NAN, 0.1).is_err());
}
