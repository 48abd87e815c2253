use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

/// Rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != k * k {
            return Err(shape_err!("{} counts cannot form a {k}x{k} matrix", counts.len()));
        }
        Ok(ConfusionMatrix { k, counts })
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.k + predicted] += 1;
    }

    pub fn n_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.k + predicted]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i * self.k..(i + 1) * self.k].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        (0..self.k).map(|i| self.get(i, j)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    /// Overall accuracy; 0 for an empty matrix.
    pub fn oa(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.trace() as f64 / n as f64,
        }
    }

    /// Recall of each class, `None` for classes absent from the truth.
    pub fn per_class_accuracy(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|i| match self.row_sum(i) {
                0 => None,
                n => Some(self.get(i, i) as f64 / n as f64),
            })
            .collect()
    }

    /// Mean recall over the classes present in the truth.
    pub fn aa(&self) -> f64 {
        let present: Vec<f64> = self.per_class_accuracy().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }

    /// Cohen's kappa. When chance agreement is total (a single class on both
    /// axes) the agreement is perfect and kappa is 1.
    pub fn kappa(&self) -> f64 {
        let n = self.total();
        if n == 0 {
            return 0.0;
        }
        let n = n as f64;
        let p_o = self.trace() as f64 / n;
        let p_e = (0..self.k)
            .map(|i| self.row_sum(i) as f64 * self.col_sum(i) as f64)
            .sum::<f64>()
            / (n * n);
        if p_e == 1.0 {
            1.0
        } else {
            (p_o - p_e) / (1.0 - p_e)
        }
    }
}

/// Summary of a classifier on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    pub per_class: Vec<Option<f64>>,
}

impl From<ConfusionMatrix> for Evaluation {
    fn from(confusion: ConfusionMatrix) -> Self {
        Evaluation {
            oa: confusion.oa(),
            aa: confusion.aa(),
            kappa: confusion.kappa(),
            per_class: confusion.per_class_accuracy(),
            confusion,
        }
    }
}
