//! Discretization of continuous expression values into value tokens, and the
//! learnable embedding tables that represent genes, value levels, and the
//! special cls / mask / missing symbols.

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// How bin edges are placed over the value range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinningKind {
    /// Equal-width bins over the clamp range. Data-independent.
    Uniform,
    /// Edges at empirical quantiles of a reference value set.
    Quantile,
}

/// Maps a continuous (z-scored) value to one of `n_levels` discrete levels.
///
/// Values are clamped to `[lo, hi]` first. Bins are half-open
/// `[edge_k, edge_{k+1})` with the final bin closed, so `bin` is total and
/// monotone for every finite input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueBinner {
    pub n_levels: usize,
    pub lo: f64,
    pub hi: f64,
    /// `n_levels - 1` strictly ascending cut points.
    pub edges: Vec<f64>,
    pub kind: BinningKind,
}

impl ValueBinner {
    /// Equal-width bins over `[lo, hi]`.
    pub fn uniform(n_levels: usize, lo: f64, hi: f64) -> Result<Self> {
        if n_levels < 2 {
            return Err(contract(format!("binner: n_levels {n_levels} must be >= 2")));
        }
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(contract(format!("binner: invalid range [{lo}, {hi}]")));
        }
        let width = (hi - lo) / n_levels as f64;
        let edges = (1..n_levels).map(|k| lo + width * k as f64).collect();
        Ok(ValueBinner {
            n_levels,
            lo,
            hi,
            edges,
            kind: BinningKind::Uniform,
        })
    }

    /// Edges at the empirical quantiles of `values`; clamp range is the
    /// observed min/max. Duplicate quantiles are nudged to stay ascending.
    pub fn quantile(n_levels: usize, values: &[f64]) -> Result<Self> {
        if n_levels < 2 {
            return Err(contract(format!("binner: n_levels {n_levels} must be >= 2")));
        }
        let mut sorted: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        if sorted.len() < n_levels {
            return Err(contract(format!(
                "binner: need at least {n_levels} finite values for quantile edges, got {}",
                sorted.len()
            )));
        }
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = sorted.len();
        let mut edges = Vec::with_capacity(n_levels - 1);
        for k in 1..n_levels {
            let q = k as f64 / n_levels as f64;
            let pos = q * (n - 1) as f64;
            let i = pos.floor() as usize;
            let frac = pos - i as f64;
            let e = if i + 1 < n {
                sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
            } else {
                sorted[i]
            };
            edges.push(e);
        }
        // enforce strict ascent
        for k in 1..edges.len() {
            if edges[k] <= edges[k - 1] {
                edges[k] = edges[k - 1] + f64::EPSILON.max(edges[k - 1].abs() * 1e-12);
            }
        }
        Ok(ValueBinner {
            n_levels,
            lo: sorted[0],
            hi: sorted[n - 1],
            edges,
            kind: BinningKind::Quantile,
        })
    }

    /// Level index of a finite value. NaN is a contract error: missing values
    /// never reach the binner, they are embedded with the missing token.
    pub fn bin(&self, v: f64) -> Result<usize> {
        if v.is_nan() {
            return Err(contract("bin: NaN input (missing values use the missing token)"));
        }
        let v = v.clamp(self.lo, self.hi);
        Ok(self.edges.partition_point(|e| *e <= v))
    }
}

/// Learnable embedding tables. Gene and value tables are 2-D (rows are
/// embeddings); the three special symbols are single rows.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTables {
    pub gene: Tensor,    // vocab x d
    pub value: Tensor,   // n_levels x d
    pub missing: Tensor, // 1 x d
    pub cls: Tensor,     // 1 x d
    pub mask: Tensor,    // 1 x d
    pub d: usize,
}

/// Initialization scale for all embedding tables.
pub const INIT_STD: f64 = 0.02;

impl EmbeddingTables {
    /// Entries drawn from Normal(0, 0.02^2), reproducible from the RNG state.
    pub fn init(vocab_size: usize, d: usize, n_levels: usize, rng: &mut ChaCha12Rng) -> Result<Self> {
        if vocab_size == 0 || d == 0 || n_levels == 0 {
            return Err(contract(format!(
                "embedding init: sizes must be positive (vocab {vocab_size}, d {d}, levels {n_levels})"
            )));
        }
        Ok(EmbeddingTables {
            gene: Tensor::randn(&[vocab_size, d], 0.0, INIT_STD, rng),
            value: Tensor::randn(&[n_levels, d], 0.0, INIT_STD, rng),
            missing: Tensor::randn(&[1, d], 0.0, INIT_STD, rng),
            cls: Tensor::randn(&[1, d], 0.0, INIT_STD, rng),
            mask: Tensor::randn(&[1, d], 0.0, INIT_STD, rng),
            d,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.gene.rows()
    }

    pub fn n_levels(&self) -> usize {
        self.value.rows()
    }

    fn check_gene(&self, gene: usize) -> Result<()> {
        if gene >= self.vocab_size() {
            return Err(contract(format!(
                "gene index {gene} out of vocabulary (size {})",
                self.vocab_size()
            )));
        }
        Ok(())
    }

    /// Token embedding of a gene with an observed value or a missing one:
    /// `gene_emb + value_emb[bin(v)]`, or `gene_emb + missing_emb`.
    pub fn embed_gene(&self, gene: usize, value: Option<f64>, binner: &ValueBinner) -> Result<Vec<f64>> {
        self.check_gene(gene)?;
        let g = self.gene.row(gene);
        let other = match value {
            Some(v) => self.value.row(binner.bin(v)?),
            None => self.missing.row(0),
        };
        Ok(g.iter().zip(other).map(|(a, b)| a + b).collect())
    }

    /// Token embedding of a gene whose value is to be restored:
    /// `gene_emb + mask_emb`.
    pub fn embed_masked(&self, gene: usize) -> Result<Vec<f64>> {
        self.check_gene(gene)?;
        let g = self.gene.row(gene);
        Ok(g.iter().zip(self.mask.row(0)).map(|(a, b)| a + b).collect())
    }
}
