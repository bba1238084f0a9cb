use serde::{Deserialize, Serialize};

use crate::attribution::Label;
use crate::error::{Error, Result};

/// Belonging is the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    pub fn true_positive_rate(&self) -> f64 {
        self.tp as f64 / (self.tp + self.fn_) as f64
    }

    pub fn false_positive_rate(&self) -> f64 {
        self.fp as f64 / (self.fp + self.tn) as f64
    }
}

/// Counts decisions on known belongings and known non-belongings.
pub fn confusion(belonging: &[Label], other: &[Label]) -> Result<ConfusionCounts> {
    if belonging.is_empty() || other.is_empty() {
        return Err(Error::invalid(
            "confusion counts need both belonging and non-belonging decisions",
        ));
    }
    let tp = belonging.iter().filter(|&&l| l == Label::Belonging).count();
    let fp = other.iter().filter(|&&l| l == Label::Belonging).count();
    Ok(ConfusionCounts {
        tp,
        fp,
        fn_: belonging.len() - tp,
        tn: other.len() - fp,
    })
}

/// Probability that a random non-belonging loss exceeds a random belonging loss, ties
/// counted as one half (Mann–Whitney U over average ranks).
pub fn auroc(belonging_losses: &[f64], other_losses: &[f64]) -> Result<f64> {
    if belonging_losses.is_empty() || other_losses.is_empty() {
        return Err(Error::invalid("AUROC needs two nonempty samples"));
    }
    if belonging_losses.iter().chain(other_losses).any(|v| v.is_nan()) {
        return Err(Error::invalid("AUROC inputs contain NaN"));
    }
    let mut all: Vec<(f64, bool)> = belonging_losses
        .iter()
        .map(|&v| (v, false))
        .chain(other_losses.iter().map(|&v| (v, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut rank_sum_other = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum_other += avg * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let (nb, no) = (belonging_losses.len() as f64, other_losses.len() as f64);
    Ok((rank_sum_other - no * (no + 1.0) / 2.0) / (nb * no))
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::*;

    #[test]
    fn reported_confusion_row() {
        let c = ConfusionCounts {
            tp: 480,
            fp: 53,
            fn_: 20,
            tn: 447,
        };
        assert!((c.accuracy() - 0.927).abs() < 1e-12);
    }

    #[test]
    fn confusion_counts_and_complement() {
        let b = [Belonging, Belonging, NonBelonging];
        let o = [NonBelonging, Belonging];
        let c = confusion(&b, &o).unwrap();
        assert_eq!(
            c,
            ConfusionCounts {
                tp: 2,
                fp: 1,
                fn_: 1,
                tn: 1
            }
        );
        let flip = |v: &[Label]| -> Vec<Label> {
            v.iter()
                .map(|l| if *l == Belonging { NonBelonging } else { Belonging })
                .collect()
        };
        let inv = confusion(&flip(&b), &flip(&o)).unwrap();
        assert!((inv.accuracy() - (1.0 - c.accuracy())).abs() < 1e-15);
        assert_eq!(confusion(&[Belonging; 10], &[NonBelonging; 10]).unwrap().accuracy(), 1.0);
        assert!(confusion(&[], &o).is_err());
    }

    #[test]
    fn auroc_simple_cases() {
        assert_eq!(auroc(&[0.1, 0.2], &[0.3, 0.4]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3, 0.4], &[0.1, 0.2]).unwrap(), 0.0);
        let same = [0.5, 0.1, 0.7];
        assert_eq!(auroc(&same, &same).unwrap(), 0.5);
        assert_eq!(auroc(&[1.0], &[1.0, 2.0]).unwrap(), 0.75);
        assert!(auroc(&[], &[1.0]).is_err());
    }
}
