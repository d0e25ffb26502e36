//! ROC AUC in two independent forms.

use crate::error::{Error, Result};

fn check(labels: &[u8], scores: &[f64]) -> Result<(usize, usize)> {
    if labels.len() != scores.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels vs {} scores",
            labels.len(),
            scores.len()
        )));
    }
    let pos = labels.iter().filter(|&&l| l > 0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass(format!("{neg} negatives / {pos} positives")));
    }
    Ok((pos, neg))
}

/// Mann-Whitney form: P(score of a random positive > random negative),
/// ties counted one half. Computed from mid-ranks.
pub fn roc_auc(labels: &[u8], scores: &[f64]) -> Result<f64> {
    let (pos, neg) = check(labels, scores)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps mid-ranks integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_mid = (i + 1 + j + 1) as u128;
        for &k in &order[i..=j] {
            if labels[k] > 0 {
                twice_rank_sum += twice_mid;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as u128, neg as u128);
    // U = R - p(p+1)/2; AUC = U / (p n)
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

/// Area under the empirical ROC curve by the trapezoid rule, walking
/// thresholds from high to low.
pub fn trapezoid_auc(labels: &[u8], scores: &[f64]) -> Result<f64> {
    let (pos, neg) = check(labels, scores)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0u128, 0u128);
    // Twice the area in units of (1/neg) x (1/pos).
    let mut twice_area: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let (tp0, fp0) = (tp, fp);
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] > 0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        twice_area += (fp - fp0) * (tp + tp0);
    }
    Ok(twice_area as f64 / (2 * pos as u128 * neg as u128) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairwise(labels: &[u8], scores: &[f64]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li == 1 && lj == 0 {
                    pairs += 1.0;
                    wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        std::cmp::Ordering::Greater => 1.0,
                        std::cmp::Ordering::Equal => 0.5,
                        std::cmp::Ordering::Less => 0.0,
                    };
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn worked_example() {
        let l = [1, 0, 1, 0];
        let s = [0.9, 0.8, 0.7, 0.1];
        assert_eq!(roc_auc(&l, &s).unwrap(), 0.75);
        assert_eq!(trapezoid_auc(&l, &s).unwrap(), 0.75);
    }

    #[test]
    fn separated_and_tied() {
        assert_eq!(roc_auc(&[0, 0, 1, 1], &[0.1, 0.2, 0.3, 0.4]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0, 1, 1, 0], &[0.5; 4]).unwrap(), 0.5);
        assert!(matches!(roc_auc(&[1, 1], &[0.1, 0.2]), Err(Error::SingleClass(_))));
    }

    proptest! {
        #[test]
        fn forms_agree_with_pairwise(
            data in prop::collection::vec((0u8..2, 0u8..6), 2..40)
        ) {
            let labels: Vec<u8> = data.iter().map(|d| d.0).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let scores: Vec<f64> = data.iter().map(|d| d.1 as f64 / 5.0).collect();
            let a = roc_auc(&labels, &scores).unwrap();
            prop_assert_eq!(a, trapezoid_auc(&labels, &scores).unwrap());
            prop_assert!((a - pairwise(&labels, &scores)).abs() < 1e-12);
        }

        #[test]
        fn invariant_under_monotone_maps(
            data in prop::collection::vec((0u8..2, -50i32..50), 2..40)
        ) {
            let labels: Vec<u8> = data.iter().map(|d| d.0).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let scores: Vec<f64> = data.iter().map(|d| d.1 as f64 / 10.0).collect();
            let mapped: Vec<f64> = scores.iter().map(|s| s.exp() * 3.0 + 1.0).collect();
            prop_assert_eq!(roc_auc(&labels, &scores).unwrap(), roc_auc(&labels, &mapped).unwrap());
        }
    }
}
