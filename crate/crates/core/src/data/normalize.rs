//! Per-gene standardization and variance filtering.
//!
//! Statistics are always computed on a caller-chosen subset (the development
//! samples in the standard pipeline) and applied to the whole matrix, so the
//! held-out split never leaks into normalization. Standard deviations use the
//! n-1 (sample) convention throughout.

use crate::error::{contract, Result};

use super::ExpressionMatrix;

/// Per-gene normalization statistics.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GeneStats {
    pub mean: f64,
    pub std: f64,
    /// std below 1e-8 over the stats subset; values left untouched and the
    /// gene should be excluded downstream.
    pub constant: bool,
}

const CONSTANT_STD: f64 = 1e-8;

fn subset_moments(m: &ExpressionMatrix, gene: usize, rows: &[usize]) -> GeneStats {
    let g = m.n_genes();
    let mut n = 0usize;
    let mut sum = 0.0;
    for &r in rows {
        if m.present[r * g + gene] {
            n += 1;
            sum += m.values[r * g + gene];
        }
    }
    if n < 2 {
        return GeneStats {
            mean: if n == 1 { sum } else { 0.0 },
            std: 0.0,
            constant: true,
        };
    }
    let mean = sum / n as f64;
    let mut ss = 0.0;
    for &r in rows {
        if m.present[r * g + gene] {
            let d = m.values[r * g + gene] - mean;
            ss += d * d;
        }
    }
    let std = (ss / (n - 1) as f64).sqrt();
    GeneStats {
        mean,
        std,
        constant: std < CONSTANT_STD,
    }
}

/// Standardize each gene to (value - mean) / std using statistics computed
/// over `stats_from` rows only. Constant genes are flagged and left untouched.
pub fn zscore_normalize(
    m: &ExpressionMatrix,
    stats_from: &[usize],
) -> Result<(ExpressionMatrix, Vec<GeneStats>)> {
    if stats_from.is_empty() {
        return Err(contract("zscore: stats subset is empty"));
    }
    let g = m.n_genes();
    let stats: Vec<GeneStats> = (0..g).map(|j| subset_moments(m, j, stats_from)).collect();
    let mut out = m.clone();
    for r in 0..m.n_samples() {
        for (j, s) in stats.iter().enumerate() {
            let i = r * g + j;
            if out.present[i] && !s.constant {
                out.values[i] = (out.values[i] - s.mean) / s.std;
            }
        }
    }
    Ok((out, stats))
}

/// Drop genes whose raw (pre-normalization) std over all samples is below
/// `min_std`. Survivor order is preserved.
pub fn filter_low_variance(m: &ExpressionMatrix, min_std: f64) -> Result<ExpressionMatrix> {
    if min_std < 0.0 {
        return Err(contract(format!("filter: min_std {min_std} must be >= 0")));
    }
    let all_rows: Vec<usize> = (0..m.n_samples()).collect();
    let keep: Vec<usize> = (0..m.n_genes())
        .filter(|&j| subset_moments(m, j, &all_rows).std >= min_std)
        .collect();
    if keep.is_empty() {
        return Err(contract(format!(
            "filter: no gene has std >= {min_std}; nothing left"
        )));
    }
    Ok(m.select_genes(&keep))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(values: Vec<f64>, genes: usize) -> ExpressionMatrix {
        let samples = values.len() / genes;
        ExpressionMatrix::new(
            (0..samples).map(|i| format!("s{i}")).collect(),
            (0..genes).map(|j| format!("g{j}")).collect(),
            values,
            vec![true; samples * genes],
        )
        .unwrap()
    }

    #[test]
    fn zscore_hand_oracle() {
        // [1,2,3]: mean 2, sample std (n-1) = 1, so z = [-1, 0, 1]
        let m = matrix(vec![1.0, 2.0, 3.0], 1);
        let (z, stats) = zscore_normalize(&m, &[0, 1, 2]).unwrap();
        assert!((stats[0].mean - 2.0).abs() < 1e-15);
        assert!((stats[0].std - 1.0).abs() < 1e-15);
        assert_eq!(z.values, vec![-1.0, 0.0, 1.0]);
    }

    #[test]
    fn zscore_is_idempotent_on_standardized_input() {
        let m = matrix(vec![-1.0, 0.0, 1.0], 1);
        let (z, _) = zscore_normalize(&m, &[0, 1, 2]).unwrap();
        for (a, b) in z.values.iter().zip(&m.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_gene_flagged_and_untouched() {
        let m = matrix(vec![5.0, 5.0, 5.0], 1);
        let (z, stats) = zscore_normalize(&m, &[0, 1, 2]).unwrap();
        assert!(stats[0].constant);
        assert_eq!(z.values, vec![5.0, 5.0, 5.0]);
    }

    #[test]
    fn stats_come_from_subset_only() {
        let m = matrix(vec![1.0, 2.0, 3.0, 100.0], 1);
        let (z, stats) = zscore_normalize(&m, &[0, 1, 2]).unwrap();
        assert!((stats[0].mean - 2.0).abs() < 1e-15);
        // the held-out row is transformed with subset statistics
        assert!((z.values[3] - 98.0).abs() < 1e-12);
    }

    #[test]
    fn zscore_full_matrix_mean_zero_std_one() {
        let mut vals = Vec::new();
        for i in 0..40 {
            vals.push((i as f64 * 0.37).sin() * 3.0 + 1.0);
            vals.push((i as f64 * 0.91).cos() * 0.5 - 2.0);
        }
        let m = matrix(vals, 2);
        let rows: Vec<usize> = (0..40).collect();
        let (z, _) = zscore_normalize(&m, &rows).unwrap();
        for j in 0..2 {
            let col: Vec<f64> = (0..40).map(|r| z.values[r * 2 + j]).collect();
            let mean = col.iter().sum::<f64>() / 40.0;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 39.0;
            assert!(mean.abs() < 1e-10, "mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-10, "std {}", var.sqrt());
        }
    }

    #[test]
    fn filter_zero_threshold_is_identity() {
        let m = matrix(vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0], 2);
        let f = filter_low_variance(&m, 0.0).unwrap();
        assert_eq!(f, m);
    }

    #[test]
    fn filter_drops_constant_gene() {
        // gene 1 is constant
        let m = matrix(vec![1.0, 7.0, 0.1, 2.0, 7.0, 0.3, 3.0, 7.0, 0.2], 3);
        let f = filter_low_variance(&m, 1e-6).unwrap();
        assert_eq!(f.gene_ids, vec!["g0", "g2"]);

        // survivors all have std >= threshold
        let rows: Vec<usize> = (0..3).collect();
        for j in 0..f.n_genes() {
            assert!(subset_moments(&f, j, &rows).std >= 1e-6);
        }
    }

    #[test]
    fn filter_everything_is_an_error() {
        let m = matrix(vec![1.0, 1.0], 1);
        assert!(filter_low_variance(&m, 0.5).is_err());
    }
}
