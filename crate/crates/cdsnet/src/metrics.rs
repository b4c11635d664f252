//! Post-hoc logit adjustment, accuracy metrics, and the evaluation report.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class prior estimated from train-split counts. Strictly positive and
/// normalized. When any class is absent, add-one smoothing keeps its log
/// finite: p_j = (count_j + 1) / (total + N).
#[derive(Clone, Debug)]
pub struct ClassPrior {
    p: Vec<f64>,
}

impl ClassPrior {
    pub fn from_counts(counts: &[u32]) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::Contract("prior needs at least one class".into()));
        }
        let total: u64 = counts.iter().map(|&c| c as u64).sum();
        if total == 0 {
            return Err(Error::Contract("prior needs at least one training sample".into()));
        }
        let p: Vec<f64> = if counts.iter().any(|&c| c == 0) {
            let denom = (total + counts.len() as u64) as f64;
            counts.iter().map(|&c| (c as f64 + 1.0) / denom).collect()
        } else {
            counts.iter().map(|&c| c as f64 / total as f64).collect()
        };
        Ok(ClassPrior { p })
    }

    pub fn uniform(n: usize) -> Self {
        ClassPrior { p: vec![1.0 / n as f64; n] }
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.p
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }
}

/// `out_j = l_j - tau * log(p_j)` applied to one logit row.
pub fn logit_adjust(logits: &[f32], prior: &ClassPrior, tau: f32) -> Result<Vec<f32>> {
    if logits.len() != prior.len() {
        return Err(Error::dimension(
            "logit_adjust",
            format!("{} logits vs {} prior entries", logits.len(), prior.len()),
        ));
    }
    if prior.p.iter().any(|&p| p <= 0.0) {
        return Err(Error::Contract("prior entries must be strictly positive".into()));
    }
    Ok(logits
        .iter()
        .zip(&prior.p)
        .map(|(&l, &p)| l - tau * (p.ln() as f32))
        .collect())
}

/// Argmax with first-index tie breaking.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predictions for a flat `[n, k]` logit block, optionally adjusted.
pub fn predict_classes(logits: &[f32], k: usize, adjust: Option<(&ClassPrior, f32)>) -> Result<Vec<u16>> {
    let mut preds = Vec::with_capacity(logits.len() / k);
    for row in logits.chunks_exact(k) {
        let pred = match adjust {
            Some((prior, tau)) => argmax(&logit_adjust(row, prior, tau)?),
            None => argmax(row),
        };
        preds.push(pred as u16);
    }
    Ok(preds)
}

fn check_lengths(preds: &[u16], labels: &[u16]) -> Result<()> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::Contract(format!(
            "need equal non-empty prediction/label lists, got {} and {}",
            preds.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// Fraction of correctly classified instances.
pub fn instance_accuracy(preds: &[u16], labels: &[u16]) -> Result<f64> {
    check_lengths(preds, labels)?;
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Mean per-class recall; classes with no support in the eval split are
/// excluded from the mean.
pub fn class_accuracy(preds: &[u16], labels: &[u16], num_classes: usize) -> Result<f64> {
    check_lengths(preds, labels)?;
    let mut support = vec![0u64; num_classes];
    let mut correct = vec![0u64; num_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        let l = l as usize;
        if l >= num_classes {
            return Err(Error::Contract(format!("label {l} out of range for {num_classes} classes")));
        }
        support[l] += 1;
        if p == l as u16 {
            correct[l] += 1;
        }
    }
    let mut acc = 0.0;
    let mut present = 0usize;
    for c in 0..num_classes {
        if support[c] > 0 {
            acc += correct[c] as f64 / support[c] as f64;
            present += 1;
        }
    }
    if present == 0 {
        return Err(Error::Contract("no class has eval support".into()));
    }
    Ok(acc / present as f64)
}

/// counts[true][pred] tallies; row sums equal per-class support.
pub fn confusion_matrix(preds: &[u16], labels: &[u16], num_classes: usize) -> Result<Vec<Vec<u32>>> {
    check_lengths(preds, labels)?;
    let mut m = vec![vec![0u32; num_classes]; num_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p as usize >= num_classes || l as usize >= num_classes {
            return Err(Error::Contract("prediction or label out of class range".into()));
        }
        m[l as usize][p as usize] += 1;
    }
    Ok(m)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerClassReport {
    pub name: String,
    pub support: u32,
    pub recall: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdjustmentReport {
    pub enabled: bool,
    pub tau: f32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub i_acc: f64,
    pub c_acc: f64,
    pub per_class: Vec<PerClassReport>,
    pub confusion: Vec<Vec<u32>>,
    pub logit_adjustment: AdjustmentReport,
}

impl EvalReport {
    pub fn build(
        preds: &[u16],
        labels: &[u16],
        class_names: &[String],
        adjustment: AdjustmentReport,
    ) -> Result<EvalReport> {
        let k = class_names.len();
        let confusion = confusion_matrix(preds, labels, k)?;
        let per_class = class_names
            .iter()
            .enumerate()
            .map(|(c, name)| {
                let support: u32 = confusion[c].iter().sum();
                let recall = if support > 0 { confusion[c][c] as f64 / support as f64 } else { 0.0 };
                PerClassReport { name: name.clone(), support, recall }
            })
            .collect();
        Ok(EvalReport {
            i_acc: instance_accuracy(preds, labels)?,
            c_acc: class_accuracy(preds, labels, k)?,
            per_class,
            confusion,
            logit_adjustment: adjustment,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tau_zero_is_identity() {
        let prior = ClassPrior::from_counts(&[90, 10]).unwrap();
        let l = vec![2.0f32, 1.0];
        assert_eq!(logit_adjust(&l, &prior, 0.0).unwrap(), l);
    }

    #[test]
    fn uniform_prior_shifts_all_logits_equally() {
        let prior = ClassPrior::uniform(4);
        let l = vec![0.3f32, -1.0, 2.0, 0.0];
        let adj = logit_adjust(&l, &prior, 1.0).unwrap();
        let shift = adj[0] - l[0];
        for (a, o) in adj.iter().zip(&l) {
            assert!((a - o - shift).abs() < 1e-6);
        }
        assert_eq!(argmax(&adj), argmax(&l));
    }

    #[test]
    fn adjustment_flips_argmax_toward_rare_class() {
        let prior = ClassPrior::from_counts(&[90, 10]).unwrap();
        let l = vec![2.0f32, 1.0];
        let adj = logit_adjust(&l, &prior, 1.0).unwrap();
        assert!((adj[0] - (2.0 - (0.9f32).ln())).abs() < 1e-6);
        assert!((adj[1] - (1.0 - (0.1f32).ln())).abs() < 1e-6);
        assert_eq!(argmax(&l), 0);
        assert_eq!(argmax(&adj), 1);
    }

    #[test]
    fn monotone_toward_rarer_class() {
        let prior = ClassPrior::from_counts(&[70, 30]).unwrap();
        for tau in [0.1f32, 0.5, 1.0, 2.0] {
            let adj = logit_adjust(&[1.0, 1.0], &prior, tau).unwrap();
            assert!(adj[1] > adj[0], "tau={tau}");
        }
    }

    #[test]
    fn zero_count_class_gets_smoothed_floor() {
        let prior = ClassPrior::from_counts(&[99, 0, 1]).unwrap();
        let p = prior.probabilities();
        assert!(p.iter().all(|&v| v > 0.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((p[1] - 1.0 / 103.0).abs() < 1e-12);
    }

    #[test]
    fn accuracy_split_example() {
        // 90 of class A correct, 10 of class B wrong
        let mut preds = vec![0u16; 90];
        preds.extend(vec![0u16; 10]);
        let mut labels = vec![0u16; 90];
        labels.extend(vec![1u16; 10]);
        assert!((instance_accuracy(&preds, &labels).unwrap() - 0.9).abs() < 1e-12);
        assert!((class_accuracy(&preds, &labels, 2).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn metrics_are_permutation_invariant() {
        let preds = vec![0u16, 1, 2, 1, 0];
        let labels = vec![0u16, 1, 1, 1, 2];
        let i1 = instance_accuracy(&preds, &labels).unwrap();
        let c1 = class_accuracy(&preds, &labels, 3).unwrap();
        let perm = [4usize, 2, 0, 3, 1];
        let preds2: Vec<u16> = perm.iter().map(|&i| preds[i]).collect();
        let labels2: Vec<u16> = perm.iter().map(|&i| labels[i]).collect();
        assert_eq!(i1, instance_accuracy(&preds2, &labels2).unwrap());
        assert_eq!(c1, class_accuracy(&preds2, &labels2, 3).unwrap());
    }

    #[test]
    fn confusion_matrix_cross_checks_instance_accuracy() {
        let preds = vec![0u16, 1, 1, 2, 0, 2, 2];
        let labels = vec![0u16, 1, 2, 2, 1, 2, 0];
        let m = confusion_matrix(&preds, &labels, 3).unwrap();
        let trace: u32 = (0..3).map(|i| m[i][i]).sum();
        let total: u32 = m.iter().flatten().sum();
        let from_matrix = trace as f64 / total as f64;
        let direct = instance_accuracy(&preds, &labels).unwrap();
        assert!((from_matrix - direct).abs() < 1e-9);
        // row sums are supports
        for (c, row) in m.iter().enumerate() {
            let sum: u32 = row.iter().sum();
            let support = labels.iter().filter(|&&l| l as usize == c).count() as u32;
            assert_eq!(sum, support);
        }
    }

    #[test]
    fn perfect_predictions_are_diagonal() {
        let labels = vec![0u16, 1, 2, 1];
        let m = confusion_matrix(&labels, &labels, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_eq!(m[i][j], 0);
                }
            }
        }
        assert_eq!(instance_accuracy(&labels, &labels).unwrap(), 1.0);
        assert_eq!(class_accuracy(&labels, &labels, 3).unwrap(), 1.0);
    }

    #[test]
    fn empty_input_rejected() {
        assert!(instance_accuracy(&[], &[]).is_err());
    }
}
