//! Average precision, mAP, accuracy and k-fold orchestration.

use serde::Serialize;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("no positive labels")]
    NoPositives,
    #[error("no class has a positive label")]
    NoValidClass,
    #[error("fold {0} has no clips")]
    MissingFold(u32),
    #[error("fold {fold} outside 1..={k}")]
    FoldOutOfRange { fold: u32, k: u32 },
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Non-interpolated AP. Items are ranked by descending score; equal scores keep
/// their input order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(MetricsError::Length(scores.len(), labels.len()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(MetricsError::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut hits, mut acc) = (0usize, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            acc += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(acc / positives as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapReport {
    /// `None` for classes without positives; those are left out of the mean.
    pub per_class: Vec<Option<f64>>,
    pub map: f64,
}

/// Mean AP over columns of `clips × classes` score and label matrices.
pub fn mean_ap(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<MapReport> {
    if scores.len() != labels.len() {
        return Err(MetricsError::Length(scores.len(), labels.len()));
    }
    let classes = scores.first().ok_or(MetricsError::Empty)?.len();
    for (s, l) in scores.iter().zip(labels) {
        if s.len() != classes || l.len() != classes {
            return Err(MetricsError::Length(s.len(), l.len()));
        }
    }
    let mut per_class = Vec::with_capacity(classes);
    for c in 0..classes {
        let col: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let lab: Vec<bool> = labels.iter().map(|r| r[c]).collect();
        per_class.push(match average_precision(&col, &lab) {
            Ok(ap) => Some(ap),
            Err(MetricsError::NoPositives) => {
                log::warn!("class {c} has no positives; excluded from mAP");
                None
            }
            Err(e) => return Err(e),
        });
    }
    let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(MetricsError::NoValidClass);
    }
    let map = valid.iter().sum::<f64>() / valid.len() as f64;
    Ok(MapReport { per_class, map })
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(MetricsError::Length(preds.len(), labels.len()));
    }
    if preds.is_empty() {
        return Err(MetricsError::Empty);
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Index of the largest value; the first wins on ties.
pub fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

/// `counts[label][pred]`.
pub fn confusion(preds: &[usize], labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; classes]; classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p < classes && l < classes {
            m[l][p] += 1;
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldResult {
    pub fold: u32,
    pub train_size: usize,
    pub eval_size: usize,
    pub metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KFoldReport {
    pub folds: Vec<FoldResult>,
    pub mean: f64,
    pub std: f64,
}

/// Holds out each fold `1..=k` once. `folds[i]` is the fold of clip `i`;
/// `run(fold, train, eval)` receives clip indices and returns the metric.
pub fn kfold_runner<E>(
    folds: &[u32],
    k: u32,
    mut run: impl FnMut(u32, &[usize], &[usize]) -> std::result::Result<f64, E>,
) -> std::result::Result<KFoldReport, E>
where
    E: From<MetricsError>,
{
    if let Some(&bad) = folds.iter().find(|&&f| f == 0 || f > k) {
        return Err(MetricsError::FoldOutOfRange { fold: bad, k }.into());
    }
    for fold in 1..=k {
        if !folds.contains(&fold) {
            return Err(MetricsError::MissingFold(fold).into());
        }
    }
    let mut results = Vec::with_capacity(k as usize);
    for fold in 1..=k {
        let (eval, train): (Vec<usize>, Vec<usize>) = (0..folds.len()).partition(|&i| folds[i] == fold);
        let metric = run(fold, &train, &eval)?;
        log::info!("fold {fold}: {metric:.4}");
        results.push(FoldResult { fold, train_size: train.len(), eval_size: eval.len(), metric });
    }
    let mean = results.iter().map(|r| r.metric).sum::<f64>() / k as f64;
    let var = results.iter().map(|r| (r.metric - mean).powi(2)).sum::<f64>() / k as f64;
    Ok(KFoldReport { folds: results, mean, std: var.sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        assert!((average_precision(&[0.9, 0.8, 0.1], &[false, false, true]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(average_precision(&[0.1, 0.2], &[false, false]), Err(MetricsError::NoPositives));
    }

    #[test]
    fn ties_keep_input_order() {
        assert_eq!(average_precision(&[0.5, 0.5], &[true, false]).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.5, 0.5], &[false, true]).unwrap(), 0.5);
    }

    #[test]
    fn map_examples() {
        let scores = vec![vec![0.9, 0.1], vec![0.2, 0.8], vec![0.5, 0.3]];
        let labels = vec![vec![false, true], vec![true, false], vec![false, true]];
        let r = mean_ap(&scores, &labels).unwrap();
        assert_eq!(r.per_class[0], Some(1.0 / 3.0));
        assert!((r.per_class[1].unwrap() - 7.0 / 12.0).abs() < 1e-15);
        let perfect = mean_ap(&scores, &[vec![true, false], vec![false, true], vec![false, false]]).unwrap();
        assert_eq!(perfect.map, 1.0);
        assert_eq!(perfect.per_class, vec![Some(1.0), Some(1.0)]);
    }

    #[test]
    fn map_of_half_and_one() {
        let scores = vec![vec![0.9, 0.9], vec![0.1, 0.1]];
        let labels = vec![vec![false, true], vec![true, false]];
        assert_eq!(mean_ap(&scores, &labels).unwrap().map, 0.75);
    }

    #[test]
    fn map_skips_empty_classes() {
        let r = mean_ap(&[vec![0.1, 0.2]], &[vec![true, false]]).unwrap();
        assert_eq!(r.per_class, vec![Some(1.0), None]);
        assert_eq!(mean_ap(&[vec![0.1]], &[vec![false]]), Err(MetricsError::NoValidClass));
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 2, 3], &[0, 1, 2, 0]).unwrap(), 0.75);
        assert_eq!(accuracy(&[], &[]), Err(MetricsError::Empty));
    }

    #[test]
    fn confusion_counts() {
        let m = confusion(&[0, 1, 1], &[0, 0, 1], 2);
        assert_eq!(m, vec![vec![1, 1], vec![0, 1]]);
    }

    #[test]
    fn kfold_partition() {
        let folds = [1, 2, 3, 4, 5, 1, 2, 3, 4, 5, 5];
        let mut held = Vec::new();
        let r = kfold_runner::<MetricsError>(&folds, 5, |f, train, eval| {
            assert_eq!(train.len() + eval.len(), folds.len());
            assert!(eval.iter().all(|&i| folds[i] == f) && train.iter().all(|&i| folds[i] != f));
            held.push(f);
            Ok(0.9)
        })
        .unwrap();
        assert_eq!(held, vec![1, 2, 3, 4, 5]);
        assert!((r.mean - 0.9).abs() < 1e-15);
        assert_eq!(r.folds.iter().map(|f| f.eval_size).collect::<Vec<_>>(), vec![2, 2, 2, 2, 3]);
    }

    #[test]
    fn kfold_requires_coverage() {
        let r = kfold_runner::<MetricsError>(&[1, 2, 3, 4], 5, |_, _, _| Ok(1.0));
        assert_eq!(r.unwrap_err(), MetricsError::MissingFold(5));
        let r = kfold_runner::<MetricsError>(&[1, 6], 5, |_, _, _| Ok(1.0));
        assert!(matches!(r, Err(MetricsError::FoldOutOfRange { fold: 6, .. })));
    }
}
