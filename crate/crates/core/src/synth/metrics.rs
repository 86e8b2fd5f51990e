use crate::error::{RaptError, Result};

/// Area under the ROC curve via the Mann–Whitney rank statistic; tied
/// scores receive their average rank (a tie counts one half).
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(RaptError::Input(format!(
            "auroc: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(RaptError::Input("auroc: NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(RaptError::Input("auroc needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of (1-based, tie-averaged) ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Operating point at a fixed episodic false-positive budget. Returns
/// `(tpr, threshold)` where `threshold` is the smallest value with at most
/// `floor(budget · n_nominal)` nominal scores strictly above it, and `tpr`
/// is the fraction of anomalous scores strictly above the threshold.
/// `tpr` is `None` for an empty anomalous set.
pub fn tpr_at_episodic_fpr(
    nominal: &[f64],
    anomalous: &[f64],
    fpr_budget: f64,
) -> Result<(Option<f64>, f64)> {
    if nominal.is_empty() {
        return Err(RaptError::Input("tpr_at_episodic_fpr: empty nominal set".into()));
    }
    if !(0.0..=1.0).contains(&fpr_budget) {
        return Err(RaptError::Input(format!("fpr budget {fpr_budget} outside [0, 1]")));
    }
    if nominal.iter().chain(anomalous).any(|s| s.is_nan()) {
        return Err(RaptError::Input("tpr_at_episodic_fpr: NaN score".into()));
    }
    let allowed = (fpr_budget * nominal.len() as f64 + 1e-9).floor() as usize;
    let threshold = if allowed >= nominal.len() {
        f64::NEG_INFINITY
    } else {
        let mut desc = nominal.to_vec();
        desc.sort_by(|a, b| b.total_cmp(a));
        desc[allowed]
    };
    let tpr = (!anomalous.is_empty()).then(|| {
        anomalous.iter().filter(|&&s| s > threshold).count() as f64 / anomalous.len() as f64
    });
    Ok((tpr, threshold))
}

/// Fraction of nominal scores strictly above `threshold`.
pub fn fpr_at(nominal: &[f64], threshold: f64) -> f64 {
    nominal.iter().filter(|&&s| s > threshold).count() as f64 / nominal.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_scores() {
        let s = [0.1, 0.2, 0.9, 1.0];
        let l = [false, false, true, true];
        assert_eq!(auroc(&s, &l).unwrap(), 1.0);
        let flipped = [true, true, false, false];
        assert_eq!(auroc(&s, &flipped).unwrap(), 0.0);
    }

    #[test]
    fn ties_count_half() {
        assert_eq!(auroc(&[1.0, 1.0], &[true, false]).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(auroc(&[1.0, 2.0], &[true, true]).is_err());
        assert!(auroc(&[1.0], &[true, false]).is_err());
    }

    #[test]
    fn budget_allows_one_of_two_hundred() {
        let nominal: Vec<f64> = (0..200).map(|i| i as f64).collect();
        let (_, thr) = tpr_at_episodic_fpr(&nominal, &[], 0.005).unwrap();
        assert_eq!(thr, 198.0);
        assert!(fpr_at(&nominal, thr) <= 0.005);
    }

    #[test]
    fn perfect_separation_any_budget() {
        let nominal = [0.0, 1.0, 2.0];
        let anomalous = [3.0, 4.0];
        for b in [0.0, 0.005, 0.5] {
            assert_eq!(tpr_at_episodic_fpr(&nominal, &anomalous, b).unwrap().0, Some(1.0));
        }
    }
}
