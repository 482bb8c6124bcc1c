use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Mae,
    Rmse,
    RocAuc,
}

impl MetricKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mae" => Some(Self::Mae),
            "rmse" => Some(Self::Rmse),
            "roc_auc" | "rocauc" | "auc" => Some(Self::RocAuc),
            _ => None,
        }
    }

    pub fn higher_is_better(self) -> bool {
        self == Self::RocAuc
    }
}

fn check_lengths(preds: &[f64], labels: &[f64]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::Shape {
            op: "metric",
            lhs: vec![preds.len()],
            rhs: vec![labels.len()],
        });
    }
    if preds.is_empty() {
        return Err(Error::invalid("metric over zero predictions"));
    }
    Ok(())
}

pub fn metric(kind: MetricKind, preds: &[f64], labels: &[f64]) -> Result<f64> {
    match kind {
        MetricKind::Mae => mae(preds, labels),
        MetricKind::Rmse => rmse(preds, labels),
        MetricKind::RocAuc => roc_auc(preds, labels),
    }
}

pub fn mae(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths(preds, labels)?;
    Ok(preds.iter().zip(labels).map(|(p, y)| (p - y).abs()).sum::<f64>() / preds.len() as f64)
}

pub fn rmse(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths(preds, labels)?;
    let mse = preds.iter().zip(labels).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / preds.len() as f64;
    Ok(mse.sqrt())
}

/// Area under the ROC curve from the Mann-Whitney rank statistic with
/// midranks for tied scores. Labels must be 0 or 1 with both present.
pub fn roc_auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths(scores, labels)?;
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::invalid("roc_auc needs binary 0/1 labels"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("roc_auc scores".into()));
    }
    let positives = labels.iter().filter(|&&y| y == 1.0).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::invalid("roc_auc needs both classes present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k] == 1.0).count() as f64 * midrank;
        i = j + 1;
    }
    let p = positives as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * negatives as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regression_metrics() {
        let (p, y) = ([1.0, 2.0, 3.0], [1.0, 2.0, 5.0]);
        assert!((mae(&p, &y).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((rmse(&p, &y).unwrap() - (4.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!(mae(&p, &y[..2]).is_err());
    }

    #[test]
    fn auc_cases() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[0.0, 0.0, 1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5; 4], &[0.0, 1.0, 0.0, 1.0]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.9, 0.1], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(roc_auc(&[0.1, 0.2], &[1.0, 1.0]).is_err());
        // One tie between a positive and a negative counts one half.
        assert_eq!(roc_auc(&[0.1, 0.5, 0.5], &[0.0, 0.0, 1.0]).unwrap(), 0.75);
    }
}
