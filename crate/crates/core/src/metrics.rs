//! Class-incremental accuracy bookkeeping.
//!
//! `S[t][τ]` is the accuracy on task `τ`'s test classes after training task
//! `t` (both 0-based here). With `A_t = mean_τ≤t S[t][τ]`, the final average
//! accuracy is `A_T` and the average incremental accuracy is `mean_t A_t`.
//! Entries are kept as exact fractions; averages are exact rationals.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Tensor;

/// `correct / total`, kept exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accuracy {
    pub correct: u64,
    pub total: u64,
}

impl Accuracy {
    pub fn new(correct: u64, total: u64) -> Result<Self> {
        if total == 0 || correct > total {
            return Err(Error::Validation(format!("invalid accuracy {correct}/{total}")));
        }
        Ok(Accuracy { correct, total })
    }

    pub fn ratio(&self) -> BigRational {
        BigRational::new(BigInt::from(self.correct), BigInt::from(self.total))
    }

    pub fn value(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Accuracy of argmax predictions over all logits.
pub fn evaluate_task(logits: &Tensor, labels: &[usize]) -> Result<Accuracy> {
    if labels.is_empty() {
        return Err(Error::Validation("empty test set".into()));
    }
    if !logits.is_matrix() || logits.rows() != labels.len() {
        return Err(Error::shape("evaluate_task", logits.shape(), &[labels.len()]));
    }
    let correct = argmax_rows(logits)
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    Accuracy::new(correct as u64, labels.len() as u64)
}

/// Lower-triangular accuracy matrix, one row per finished task.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<Accuracy>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<Vec<Accuracy>>) -> Result<Self> {
        let mut m = Self::new();
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    /// Appends the evaluations after the next task; the row must cover every task seen so far.
    pub fn push_row(&mut self, row: Vec<Accuracy>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::Validation(format!(
                "row {} of the accuracy matrix needs {} entries, got {}",
                self.rows.len(),
                self.rows.len() + 1,
                row.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<Accuracy>] {
        &self.rows
    }

    /// Entries as floats, for reports.
    pub fn values(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| r.iter().map(Accuracy::value).collect()).collect()
    }

    fn nonempty(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::Validation("accuracy matrix has no rows".into()));
        }
        Ok(())
    }

    /// `A_t` for every task.
    pub fn stage_means(&self) -> Result<Vec<BigRational>> {
        self.nonempty()?;
        Ok(self
            .rows
            .iter()
            .map(|r| {
                let sum = r.iter().fold(BigRational::zero(), |acc, a| acc + a.ratio());
                sum / BigRational::from_integer(BigInt::from(r.len()))
            })
            .collect())
    }
}

/// Final average accuracy, `A_T`.
pub fn faa(s: &AccuracyMatrix) -> Result<BigRational> {
    Ok(s.stage_means()?.pop().expect("nonempty"))
}

/// Average incremental accuracy, `mean_t A_t`.
pub fn aia(s: &AccuracyMatrix) -> Result<BigRational> {
    let means = s.stage_means()?;
    let n = BigRational::from_integer(BigInt::from(means.len()));
    Ok(means.into_iter().fold(BigRational::zero(), |a, b| a + b) / n)
}

/// `max_{t<T} S[t][τ] − S[T][τ]`, clamped at zero, for each task before the last.
pub fn forgetting(s: &AccuracyMatrix) -> Result<Vec<BigRational>> {
    s.nonempty()?;
    let last = s.rows.len() - 1;
    Ok((0..last)
        .map(|tau| {
            let best = (tau..last)
                .map(|t| s.rows[t][tau].ratio())
                .max()
                .expect("at least one earlier row");
            let drop = best - s.rows[last][tau].ratio();
            if drop < BigRational::zero() {
                BigRational::zero()
            } else {
                drop
            }
        })
        .collect())
}

pub fn to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn acc(c: u64, t: u64) -> Accuracy {
        Accuracy::new(c, t).unwrap()
    }

    fn rat(n: i64, d: i64) -> BigRational {
        BigRational::new(n.into(), d.into())
    }

    fn example() -> AccuracyMatrix {
        AccuracyMatrix::from_rows(vec![vec![acc(9, 10)], vec![acc(8, 10), acc(6, 10)]]).unwrap()
    }

    #[test]
    fn hand_computed_matrix() {
        let s = example();
        assert_eq!(faa(&s).unwrap(), rat(7, 10));
        assert_eq!(aia(&s).unwrap(), rat(8, 10));
        assert_eq!(forgetting(&s).unwrap(), vec![rat(1, 10)]);
    }

    #[test]
    fn constant_matrix_returns_constant() {
        let rows = (1..=4).map(|t| vec![acc(3, 8); t]).collect();
        let s = AccuracyMatrix::from_rows(rows).unwrap();
        assert_eq!(faa(&s).unwrap(), rat(3, 8));
        assert_eq!(aia(&s).unwrap(), rat(3, 8));
        assert!(forgetting(&s).unwrap().iter().all(Zero::is_zero));
    }

    #[test]
    fn single_task() {
        let s = AccuracyMatrix::from_rows(vec![vec![acc(2, 5)]]).unwrap();
        assert_eq!(faa(&s).unwrap(), rat(2, 5));
        assert_eq!(aia(&s).unwrap(), faa(&s).unwrap());
        assert!(forgetting(&s).unwrap().is_empty());
    }

    #[test]
    fn improving_columns_have_no_forgetting() {
        let s = AccuracyMatrix::from_rows(vec![vec![acc(1, 2)], vec![acc(3, 4), acc(1, 1)]]).unwrap();
        assert_eq!(forgetting(&s).unwrap(), vec![rat(0, 1)]);
    }

    #[test]
    fn malformed_matrices_are_rejected() {
        assert!(AccuracyMatrix::from_rows(vec![vec![acc(1, 2), acc(1, 2)]]).is_err());
        assert!(faa(&AccuracyMatrix::new()).is_err());
        assert!(Accuracy::new(3, 2).is_err());
    }

    #[test]
    fn evaluate_examples() {
        let logits = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [2.0, 1.0], [0.0, 3.0]]).unwrap();
        assert_eq!(evaluate_task(&logits, &[0, 1, 0, 0]).unwrap(), acc(3, 4));
        let constant = Tensor::from_rows(&[[0.0, 1.0, 0.0]; 5]).unwrap();
        assert_eq!(evaluate_task(&constant, &[1, 1, 0, 2, 1]).unwrap(), acc(3, 5));
        let ties = Tensor::from_rows(&[[0.5, 0.5]]).unwrap();
        assert_eq!(argmax_rows(&ties), vec![0]);
        assert!(matches!(evaluate_task(&Tensor::zeros(&[1, 2]), &[]), Err(Error::Validation(_))));
    }

    #[test]
    fn evaluation_ignores_sample_order() {
        let logits = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [2.0, 1.0]]).unwrap();
        let perm = logits.select_rows(&[2, 0, 1]).unwrap();
        assert_eq!(
            evaluate_task(&logits, &[0, 0, 0]).unwrap(),
            evaluate_task(&perm, &[0, 0, 0]).unwrap()
        );
    }
}
