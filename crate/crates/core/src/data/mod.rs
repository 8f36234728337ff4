//! Expression matrices, survival annotations, and the split protocol.

mod io;
mod normalize;
mod split;

pub use io::{load_expression, load_labels, load_survival, save_expression, save_labels, save_survival};
pub use normalize::{filter_low_variance, zscore_normalize, GeneStats};
pub use split::{split, SplitIndices};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Samples x genes matrix of continuous values with explicit missingness.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpressionMatrix {
    pub sample_ids: Vec<String>,
    pub gene_ids: Vec<String>,
    /// Row-major samples x genes values; entries where `present` is false
    /// hold an unspecified placeholder and must not be read.
    pub values: Vec<f64>,
    /// false = missing measurement.
    pub present: Vec<bool>,
}

impl ExpressionMatrix {
    pub fn new(
        sample_ids: Vec<String>,
        gene_ids: Vec<String>,
        values: Vec<f64>,
        present: Vec<bool>,
    ) -> Result<Self> {
        let n = sample_ids.len() * gene_ids.len();
        if values.len() != n || present.len() != n {
            return Err(contract(format!(
                "matrix: {} samples x {} genes needs {n} cells, got {} values / {} flags",
                sample_ids.len(),
                gene_ids.len(),
                values.len(),
                present.len()
            )));
        }
        check_unique(&sample_ids, "sample id")?;
        check_unique(&gene_ids, "gene id")?;
        for (i, (&v, &p)) in values.iter().zip(&present).enumerate() {
            if p && !v.is_finite() {
                return Err(contract(format!(
                    "matrix: non-finite value {v} at cell {i} marked present"
                )));
            }
        }
        Ok(ExpressionMatrix {
            sample_ids,
            gene_ids,
            values,
            present,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn n_genes(&self) -> usize {
        self.gene_ids.len()
    }

    pub fn get(&self, sample: usize, gene: usize) -> Option<f64> {
        let i = sample * self.n_genes() + gene;
        self.present[i].then(|| self.values[i])
    }

    pub fn set(&mut self, sample: usize, gene: usize, value: f64) {
        let i = sample * self.n_genes() + gene;
        self.values[i] = value;
        self.present[i] = true;
    }

    pub fn sample_index(&self) -> HashMap<&str, usize> {
        self.sample_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect()
    }

    /// New matrix keeping only the given sample rows, in the given order.
    pub fn select_samples(&self, rows: &[usize]) -> ExpressionMatrix {
        let g = self.n_genes();
        let mut values = Vec::with_capacity(rows.len() * g);
        let mut present = Vec::with_capacity(rows.len() * g);
        let mut ids = Vec::with_capacity(rows.len());
        for &r in rows {
            ids.push(self.sample_ids[r].clone());
            values.extend_from_slice(&self.values[r * g..(r + 1) * g]);
            present.extend_from_slice(&self.present[r * g..(r + 1) * g]);
        }
        ExpressionMatrix {
            sample_ids: ids,
            gene_ids: self.gene_ids.clone(),
            values,
            present,
        }
    }

    /// New matrix keeping only the given gene columns, in the given order.
    pub fn select_genes(&self, cols: &[usize]) -> ExpressionMatrix {
        let g = self.n_genes();
        let mut values = Vec::with_capacity(self.n_samples() * cols.len());
        let mut present = Vec::with_capacity(self.n_samples() * cols.len());
        for r in 0..self.n_samples() {
            for &c in cols {
                values.push(self.values[r * g + c]);
                present.push(self.present[r * g + c]);
            }
        }
        ExpressionMatrix {
            sample_ids: self.sample_ids.clone(),
            gene_ids: cols.iter().map(|&c| self.gene_ids[c].clone()).collect(),
            values,
            present,
        }
    }
}

fn check_unique(ids: &[String], what: &str) -> Result<()> {
    let mut seen = HashMap::new();
    for id in ids {
        if seen.insert(id.as_str(), ()).is_some() {
            return Err(contract(format!("duplicate {what} \"{id}\"")));
        }
    }
    Ok(())
}

/// One patient's follow-up outcome. `event == true` means death observed at
/// `time`; false means censored at `time`. Time units are whatever the input
/// file used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub sample_id: String,
    pub time: f64,
    pub event: bool,
}

impl SurvivalRecord {
    pub fn new(sample_id: impl Into<String>, time: f64, event: bool) -> Result<Self> {
        if !(time > 0.0) {
            return Err(contract(format!("survival time must be > 0, got {time}")));
        }
        Ok(SurvivalRecord {
            sample_id: sample_id.into(),
            time,
            event,
        })
    }
}

/// Parameters of the three-way split: test vs development, then development
/// into pretrain vs pretrain-monitor.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub pretrain_fraction_of_dev: f64,
    /// When true, the split is stratified by a per-sample label.
    pub stratify: bool,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            test_fraction: 0.3,
            pretrain_fraction_of_dev: 0.8,
            stratify: false,
            seed: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_rejects_duplicates_and_nonfinite() {
        let dup = ExpressionMatrix::new(
            vec!["a".into(), "a".into()],
            vec!["g".into()],
            vec![1.0, 2.0],
            vec![true, true],
        );
        assert!(dup.is_err());

        let inf = ExpressionMatrix::new(
            vec!["a".into()],
            vec!["g".into()],
            vec![f64::INFINITY],
            vec![true],
        );
        assert!(inf.is_err());

        // non-finite is fine where not present
        let ok = ExpressionMatrix::new(
            vec!["a".into()],
            vec!["g".into()],
            vec![f64::NAN],
            vec![false],
        );
        assert!(ok.is_ok());
    }

    #[test]
    fn survival_rejects_nonpositive_time() {
        assert!(SurvivalRecord::new("s", 0.0, true).is_err());
        assert!(SurvivalRecord::new("s", -1.0, false).is_err());
        assert!(SurvivalRecord::new("s", 10.5, true).is_ok());
    }

    #[test]
    fn select_preserves_order() {
        let m = ExpressionMatrix::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec!["g1".into(), "g2".into()],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            vec![true; 6],
        )
        .unwrap();
        let sub = m.select_samples(&[2, 0]);
        assert_eq!(sub.sample_ids, vec!["c", "a"]);
        assert_eq!(sub.values, vec![5.0, 6.0, 1.0, 2.0]);
        let cols = m.select_genes(&[1]);
        assert_eq!(cols.gene_ids, vec!["g2"]);
        assert_eq!(cols.values, vec![2.0, 4.0, 6.0]);
    }
}
