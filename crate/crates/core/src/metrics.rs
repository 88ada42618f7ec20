//! Confusion-matrix metrics: overall accuracy, average accuracy, Cohen's kappa.
//!
//! Each metric is a ratio of integer counts. It is formed exactly in integer
//! arithmetic and rounded to `f64` once, so hand-computed fractions come out
//! as the nearest double (e.g. κ = 2000/5000 is exactly `0.4`).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `K×K` counts; rows are true classes, columns predictions (class `c` at index `c−1`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Shape(format!("confusion matrix must be square, got {k} rows")));
        }
        Ok(ConfusionMatrix {
            k,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.k.max(1)).map(<[u64]>::to_vec).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        (0..self.k).map(|j| self.get(i, j)).sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        (0..self.k).map(|i| self.get(i, j)).sum()
    }

    /// Same counts with class `i` relabelled `perm[i]` on both axes.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = ConfusionMatrix::zeros(self.k);
        for i in 0..self.k {
            for j in 0..self.k {
                out.counts[perm[i] * self.k + perm[j]] = self.get(i, j);
            }
        }
        out
    }
}

pub fn confusion_matrix(truth: &[u32], pred: &[u32], k: usize) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(Error::Contract(format!(
            "{} true labels but {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    let mut cm = ConfusionMatrix::zeros(k);
    for (i, (&t, &p)) in truth.iter().zip(pred).enumerate() {
        for (what, l) in [("true", t), ("predicted", p)] {
            if l == 0 || l as usize > k {
                return Err(Error::Contract(format!(
                    "{what} label {l} at index {i} outside 1..={k}"
                )));
            }
        }
        cm.counts[(t as usize - 1) * k + (p as usize - 1)] += 1;
    }
    Ok(cm)
}

/// Exact rational with a positive denominator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fraction {
    pub num: i128,
    pub den: i128,
}

impl Fraction {
    fn new(num: i128, den: i128) -> Self {
        let g = gcd(num.unsigned_abs(), den.unsigned_abs()).max(1) as i128;
        let s = if den < 0 { -1 } else { 1 };
        Fraction {
            num: s * num / g,
            den: s * den / g,
        }
    }

    fn checked_add(self, o: Fraction) -> Option<Fraction> {
        let g = gcd(self.den as u128, o.den as u128) as i128;
        let l = (self.den / g).checked_mul(o.den)?;
        let a = self.num.checked_mul(l / self.den)?;
        let b = o.num.checked_mul(l / o.den)?;
        Some(Fraction::new(a.checked_add(b)?, l))
    }

    /// Nearest double when both parts fit in 53 bits (the IEEE division is
    /// then correctly rounded); otherwise within a few ulps.
    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

pub fn overall_accuracy_fraction(cm: &ConfusionMatrix) -> Result<Fraction> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::UndefinedMetric("overall accuracy of an empty confusion matrix".into()));
    }
    Ok(Fraction::new(cm.trace() as i128, total as i128))
}

pub fn overall_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    overall_accuracy_fraction(cm).map(Fraction::to_f64)
}

pub fn per_class_recall(cm: &ConfusionMatrix) -> Result<Vec<f64>> {
    (0..cm.classes())
        .map(|i| recall_fraction(cm, i).map(Fraction::to_f64))
        .collect()
}

fn recall_fraction(cm: &ConfusionMatrix, i: usize) -> Result<Fraction> {
    let rs = cm.row_sum(i);
    if rs == 0 {
        return Err(Error::UndefinedMetric(format!(
            "average accuracy: class {} has no samples",
            i + 1
        )));
    }
    Ok(Fraction::new(cm.get(i, i) as i128, rs as i128))
}

pub fn average_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let k = cm.classes();
    if k == 0 {
        return Err(Error::UndefinedMetric("average accuracy with zero classes".into()));
    }
    let recalls = (0..k).map(|i| recall_fraction(cm, i)).collect::<Result<Vec<_>>>()?;
    let exact = recalls
        .iter()
        .try_fold(Fraction::new(0, 1), |acc, &r| acc.checked_add(r))
        .and_then(|s| Some(Fraction::new(s.num, s.den.checked_mul(k as i128)?)));
    Ok(match exact {
        Some(f) => f.to_f64(),
        None => recalls.iter().map(|r| r.to_f64()).sum::<f64>() / k as f64,
    })
}

/// κ = (n·trace − Σ rᵢcᵢ) / (n² − Σ rᵢcᵢ), equivalent to (p_o − p_e)/(1 − p_e).
pub fn cohen_kappa_fraction(cm: &ConfusionMatrix) -> Result<Fraction> {
    let n = cm.total() as i128;
    if n == 0 {
        return Err(Error::UndefinedMetric("kappa of an empty confusion matrix".into()));
    }
    let chance: i128 = (0..cm.classes())
        .map(|i| cm.row_sum(i) as i128 * cm.col_sum(i) as i128)
        .sum();
    let den = n * n - chance;
    if den == 0 {
        return Err(Error::UndefinedMetric(
            "kappa undefined: expected agreement is 1 (single-cell distribution)".into(),
        ));
    }
    Ok(Fraction::new(n * cm.trace() as i128 - chance, den))
}

pub fn cohen_kappa(cm: &ConfusionMatrix) -> Result<f64> {
    cohen_kappa_fraction(cm).map(Fraction::to_f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub confusion: ConfusionMatrix,
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    pub per_class_recall: Vec<f64>,
}

impl MetricsReport {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Result<Self> {
        Ok(MetricsReport {
            oa: overall_accuracy(&confusion)?,
            aa: average_accuracy(&confusion)?,
            kappa: cohen_kappa(&confusion)?,
            per_class_recall: per_class_recall(&confusion)?,
            confusion,
        })
    }

    pub fn from_labels(truth: &[u32], pred: &[u32], k: usize) -> Result<Self> {
        MetricsReport::from_confusion(confusion_matrix(truth, pred, k)?)
    }

    /// `{"oa":…, "aa":…, "kappa":…, "per_class_recall":[…], "confusion":[[…]]}`, reals to 6 decimals.
    pub fn to_json(&self) -> String {
        let mut s = String::new();
        let recalls: Vec<String> = self.per_class_recall.iter().map(|r| format!("{r:.6}")).collect();
        let rows: Vec<String> = self
            .confusion
            .rows()
            .iter()
            .map(|r| {
                let cells: Vec<String> = r.iter().map(u64::to_string).collect();
                format!("[{}]", cells.join(","))
            })
            .collect();
        write!(
            s,
            "{{\"oa\":{:.6},\"aa\":{:.6},\"kappa\":{:.6},\"per_class_recall\":[{}],\"confusion\":[{}]}}",
            self.oa,
            self.aa,
            self.kappa,
            recalls.join(","),
            rows.join(",")
        )
        .expect("writing to a String");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm(rows: &[&[u64]]) -> ConfusionMatrix {
        ConfusionMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn confusion_examples() {
        let perfect = confusion_matrix(&[1, 2, 3, 2], &[1, 2, 3, 2], 3).unwrap();
        assert_eq!(perfect.rows(), vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]);
        assert_eq!(confusion_matrix(&[], &[], 2).unwrap(), ConfusionMatrix::zeros(2));
        let c = confusion_matrix(&[1, 1, 2, 2], &[1, 2, 2, 2], 2).unwrap();
        assert_eq!(c, cm(&[&[1, 1], &[0, 2]]));
    }

    #[test]
    fn confusion_rejects_out_of_range() {
        let err = confusion_matrix(&[1, 3], &[1, 1], 2).unwrap_err().to_string();
        assert!(err.contains("index 1"), "{err}");
        assert!(confusion_matrix(&[0], &[1], 2).is_err());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(overall_accuracy(&cm(&[&[1, 1], &[0, 2]])).unwrap(), 0.75);
        assert_eq!(overall_accuracy(&cm(&[&[3, 0], &[0, 5]])).unwrap(), 1.0);
        assert_eq!(overall_accuracy(&cm(&[&[1, 1], &[1, 1]])).unwrap(), 0.5);
        assert!(matches!(
            overall_accuracy(&ConfusionMatrix::zeros(2)),
            Err(Error::UndefinedMetric(_))
        ));

        assert_eq!(average_accuracy(&cm(&[&[8, 2], &[4, 6]])).unwrap(), 0.7);
        assert_eq!(average_accuracy(&cm(&[&[1, 1], &[0, 2]])).unwrap(), 0.75);
        assert_eq!(average_accuracy(&cm(&[&[4, 0], &[0, 9]])).unwrap(), 1.0);
        let err = average_accuracy(&cm(&[&[4, 0], &[0, 0]])).unwrap_err().to_string();
        assert!(err.contains("class 2"), "{err}");
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(cohen_kappa(&cm(&[&[50, 0], &[0, 50]])).unwrap(), 1.0);
        assert_eq!(cohen_kappa(&cm(&[&[25, 25], &[25, 25]])).unwrap(), 0.0);
        assert_eq!(cohen_kappa(&cm(&[&[40, 10], &[20, 30]])).unwrap(), 0.4);
        assert!(matches!(
            cohen_kappa(&cm(&[&[7, 0], &[0, 0]])),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn json_has_six_decimals() {
        let r = MetricsReport::from_confusion(cm(&[&[40, 10], &[20, 30]])).unwrap();
        assert_eq!(
            r.to_json(),
            "{\"oa\":0.700000,\"aa\":0.700000,\"kappa\":0.400000,\
             \"per_class_recall\":[0.800000,0.600000],\"confusion\":[[40,10],[20,30]]}"
        );
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["kappa"], 0.4);
    }
}
