use crate::error::{Error, Result};
use crate::pointcloud::Label;

/// Mann-Whitney area under the ROC curve; ties count one half.
pub fn auroc(scores: &[(f64, Label)]) -> Result<f64> {
    let pos = scores.iter().filter(|(_, l)| l.is_anomalous()).count();
    let neg = scores.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUROC needs at least one normal and one anomalous sample".into(),
        ));
    }
    if let Some((s, _)) = scores.iter().find(|(s, _)| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {s}")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].0.total_cmp(&scores[b].0));
    // sum of mid-ranks of the anomalous samples
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]].0 == scores[order[i]].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if scores[k].1.is_anomalous() {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Quadratic pairwise reference for [`auroc`].
pub fn auroc_bruteforce(scores: &[(f64, Label)]) -> Result<f64> {
    let mut wins = 0.0;
    let mut pairs = 0usize;
    for (sa, la) in scores {
        if !la.is_anomalous() {
            continue;
        }
        for (sn, ln) in scores {
            if ln.is_anomalous() {
                continue;
            }
            pairs += 1;
            if sa > sn {
                wins += 1.0;
            } else if sa == sn {
                wins += 0.5;
            }
        }
    }
    if pairs == 0 {
        return Err(Error::UndefinedMetric("no (normal, anomalous) pair".into()));
    }
    Ok(wins / pairs as f64)
}

/// Largest drop from any earlier value to the current one. `None` when there
/// is no earlier value.
pub fn forgetting(history: &[f64], current: f64) -> Option<f64> {
    history.iter().map(|&h| h - current).reduce(f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use proptest::prelude::*;
    use rand::Rng;
    use Label::{Anomalous as A, Normal as N};

    #[test]
    fn closed_cases() {
        assert_eq!(auroc(&[(0.1, N), (0.2, N), (0.7, A), (0.9, A)]).unwrap(), 1.0);
        // every anomalous score beats every normal one here
        assert_eq!(auroc(&[(0.1, N), (0.4, A), (0.35, N), (0.8, A)]).unwrap(), 1.0);
        // three of four pairs ordered correctly
        assert_eq!(auroc(&[(0.1, N), (0.4, N), (0.35, A), (0.8, A)]).unwrap(), 0.75);
        assert_eq!(auroc(&[(1.0, N), (1.0, A)]).unwrap(), 0.5);
        assert!(matches!(auroc(&[(1.0, N), (2.0, N)]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn null_distribution_is_near_half() {
        let mut rng = seed::rng(17);
        let s: Vec<_> = (0..4000)
            .map(|_| (rng.random::<f64>(), if rng.random_bool(0.5) { A } else { N }))
            .collect();
        assert!((auroc(&s).unwrap() - 0.5).abs() < 0.03);
    }

    #[test]
    fn forgetting_is_largest_drop() {
        assert_eq!(forgetting(&[], 0.5), None);
        assert_eq!(forgetting(&[0.9, 0.7], 0.6), Some(0.30000000000000004));
        assert_eq!(forgetting(&[0.5], 0.8), Some(-0.30000000000000004));
    }

    proptest! {
        #[test]
        fn matches_bruteforce(raw in prop::collection::vec((0u8..20, any::<bool>()), 2..200)) {
            let s: Vec<_> = raw.iter().map(|&(v, a)| (v as f64 / 4.0, if a { A } else { N })).collect();
            match (auroc(&s), auroc_bruteforce(&s)) {
                (Ok(x), Ok(y)) => prop_assert!((x - y).abs() < 1e-12 && (0.0..=1.0).contains(&x)),
                (Err(_), Err(_)) => {}
                other => prop_assert!(false, "{:?}", other),
            }
        }
    }
}
