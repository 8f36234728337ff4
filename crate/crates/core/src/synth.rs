//! Synthetic ground-truth generator.
//!
//! Expression is a linear factor model X = F L^T + noise, class labels shift
//! the factor means, and survival follows an exponential model whose log-rate
//! is linear in the factors. That makes proportional-hazards fitting exactly
//! well-specified, so downstream oracles are sharp: the generator's own risk
//! score is the best possible predictor.

use rand::RngExt;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{ExpressionMatrix, SurvivalRecord};
use crate::error::{contract, Result};
use crate::rng;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub n_genes: usize,
    /// Latent dimension of the factor model.
    pub n_factors: usize,
    pub loading_scale: f64,
    pub noise_std: f64,
    pub n_classes: usize,
    /// Distance of class means from the origin in factor space.
    pub class_sep: f64,
    /// Target fraction of censored samples, in [0, 1).
    pub censoring_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_samples: 500,
            n_genes: 200,
            n_factors: 3,
            loading_scale: 1.0,
            noise_std: 0.5,
            n_classes: 4,
            class_sep: 3.0,
            censoring_rate: 0.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.n_factors == 0 || self.n_factors > self.n_genes {
            return Err(contract(format!(
                "synth: n_factors {} must be in [1, n_genes {}]",
                self.n_factors, self.n_genes
            )));
        }
        if self.noise_std < 0.0 {
            return Err(contract("synth: noise_std must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.censoring_rate) {
            return Err(contract("synth: censoring_rate must be in [0, 1)"));
        }
        if self.n_samples < 2 || self.n_classes == 0 {
            return Err(contract("synth: need n_samples >= 2 and n_classes >= 1"));
        }
        Ok(())
    }
}

/// Everything the generator knows, for oracle-style assertions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthTruth {
    /// n_samples x n_factors, row-major.
    pub factors: Vec<f64>,
    /// n_genes x n_factors, row-major.
    pub loadings: Vec<f64>,
    /// Log hazard rate per sample.
    pub risk: Vec<f64>,
    /// Risk direction in factor space.
    pub risk_weights: Vec<f64>,
    /// n_classes x n_factors class mean shifts.
    pub class_means: Vec<f64>,
}

pub struct SynthData {
    pub matrix: ExpressionMatrix,
    pub labels: Vec<(String, String)>,
    pub survival: Vec<SurvivalRecord>,
    pub truth: SynthTruth,
}

/// Class means on a regular simplex when they fit in factor space (maximally
/// separated), random unit directions otherwise.
fn class_means(n_classes: usize, k: usize, sep: f64, rng: &mut ChaCha12Rng) -> Vec<f64> {
    let mut means = vec![0.0; n_classes * k];
    if n_classes == 1 {
        return means;
    }
    if n_classes <= k + 1 {
        // regular simplex: orthonormal-ish construction then centering
        for c in 0..n_classes {
            if c > 0 {
                means[c * k + (c - 1)] = 1.0;
            }
        }
        let mut centroid = vec![0.0; k];
        for c in 0..n_classes {
            for j in 0..k {
                centroid[j] += means[c * k + j] / n_classes as f64;
            }
        }
        for c in 0..n_classes {
            let mut norm = 0.0;
            for j in 0..k {
                means[c * k + j] -= centroid[j];
                norm += means[c * k + j] * means[c * k + j];
            }
            let norm = norm.sqrt();
            for j in 0..k {
                means[c * k + j] *= sep / norm;
            }
        }
    } else {
        for c in 0..n_classes {
            let mut norm = 0.0;
            for j in 0..k {
                let v: f64 = StandardNormal.sample(rng);
                means[c * k + j] = v;
                norm += v * v;
            }
            let norm = norm.sqrt().max(1e-12);
            for j in 0..k {
                means[c * k + j] *= sep / norm;
            }
        }
    }
    means
}

/// Censoring hazard whose expected censored fraction matches the target:
/// with death ~ Exp(exp(r)) and censor ~ Exp(c), P(censored) = c/(c+exp(r)).
fn calibrate_censor_rate(risks: &[f64], target: f64) -> f64 {
    if target <= 0.0 {
        return 0.0;
    }
    let expected = |c: f64| -> f64 {
        risks.iter().map(|r| c / (c + r.exp())).sum::<f64>() / risks.len() as f64
    };
    let (mut lo, mut hi) = (1e-12, 1e12);
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if expected(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo * hi).sqrt()
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let (n, g, k) = (cfg.n_samples, cfg.n_genes, cfg.n_factors);

    let mut class_rng = rng::stream(cfg.seed, "synth-class");
    let mut factor_rng = rng::stream(cfg.seed, "synth-factor");
    let mut loading_rng = rng::stream(cfg.seed, "synth-loading");
    let mut noise_rng = rng::stream(cfg.seed, "synth-noise");
    let mut surv_rng = rng::stream(cfg.seed, "synth-surv");

    let means = class_means(cfg.n_classes, k, cfg.class_sep, &mut class_rng);

    // labels round-robin so classes stay balanced
    let sample_class: Vec<usize> = (0..n).map(|i| i % cfg.n_classes).collect();

    let mut factors = vec![0.0; n * k];
    for i in 0..n {
        let c = sample_class[i];
        for j in 0..k {
            let z: f64 = StandardNormal.sample(&mut factor_rng);
            factors[i * k + j] = means[c * k + j] + z;
        }
    }

    let mut loadings = vec![0.0; g * k];
    for v in loadings.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut loading_rng);
        *v = cfg.loading_scale * z;
    }

    let mut values = vec![0.0; n * g];
    for i in 0..n {
        for j in 0..g {
            let mut x = 0.0;
            for f in 0..k {
                x += factors[i * k + f] * loadings[j * k + f];
            }
            if cfg.noise_std > 0.0 {
                let z: f64 = StandardNormal.sample(&mut noise_rng);
                x += cfg.noise_std * z;
            }
            values[i * g + j] = x;
        }
    }

    // risk = w . factors with w a fixed unit direction
    let mut w = vec![0.0; k];
    let mut norm = 0.0;
    for v in w.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut surv_rng);
        *v = z;
        norm += z * z;
    }
    let norm = norm.sqrt().max(1e-12);
    for v in w.iter_mut() {
        *v /= norm;
    }
    let risk: Vec<f64> = (0..n)
        .map(|i| (0..k).map(|j| w[j] * factors[i * k + j]).sum())
        .collect();

    let censor_hazard = calibrate_censor_rate(&risk, cfg.censoring_rate);
    let sample_ids: Vec<String> = (0..n).map(|i| format!("s{i:05}")).collect();
    let mut survival = Vec::with_capacity(n);
    for i in 0..n {
        let death = Exp::new(risk[i].exp()).unwrap().sample(&mut surv_rng);
        let (time, event) = if censor_hazard > 0.0 {
            let censor = Exp::new(censor_hazard).unwrap().sample(&mut surv_rng);
            if death <= censor {
                (death, true)
            } else {
                (censor, false)
            }
        } else {
            (death, true)
        };
        // exponential draws are continuous; clamp away an exact 0 anyway
        survival.push(SurvivalRecord::new(sample_ids[i].clone(), time.max(1e-12), event)?);
    }

    let matrix = ExpressionMatrix::new(
        sample_ids.clone(),
        (0..g).map(|j| format!("g{j:05}")).collect(),
        values,
        vec![true; n * g],
    )?;
    let labels = sample_ids
        .iter()
        .zip(&sample_class)
        .map(|(id, c)| (id.clone(), format!("c{c}")))
        .collect();

    Ok(SynthData {
        matrix,
        labels,
        survival,
        truth: SynthTruth {
            factors,
            loadings,
            risk,
            risk_weights: w,
            class_means: means,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_one_noiseless_columns_are_scalar_multiples() {
        let cfg = SynthConfig {
            n_samples: 50,
            n_genes: 10,
            n_factors: 1,
            noise_std: 0.0,
            n_classes: 1,
            censoring_rate: 0.0,
            seed: 3,
            ..Default::default()
        };
        let d = generate(&cfg).unwrap();
        let f0: Vec<f64> = (0..50).map(|i| d.truth.factors[i]).collect();
        for j in 0..10 {
            let l = d.truth.loadings[j];
            for i in 0..50 {
                let got = d.matrix.get(i, j).unwrap();
                assert!((got - l * f0[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_loadings_no_noise_correlate_perfectly() {
        let cfg = SynthConfig {
            n_samples: 100,
            n_genes: 5,
            n_factors: 2,
            noise_std: 0.0,
            n_classes: 1,
            censoring_rate: 0.0,
            seed: 5,
            ..Default::default()
        };
        let mut d = generate(&cfg).unwrap();
        // force two genes to share loadings, recompute their columns
        let k = cfg.n_factors;
        let (l0, l1) = (0usize, 1usize);
        let src: Vec<f64> = d.truth.loadings[l0 * k..(l0 + 1) * k].to_vec();
        d.truth.loadings[l1 * k..(l1 + 1) * k].copy_from_slice(&src);
        for i in 0..cfg.n_samples {
            let x: f64 = (0..k).map(|f| d.truth.factors[i * k + f] * src[f]).sum();
            d.matrix.set(i, l0, x);
            d.matrix.set(i, l1, x);
        }
        let a: Vec<f64> = (0..cfg.n_samples).map(|i| d.matrix.get(i, l0).unwrap()).collect();
        let b: Vec<f64> = (0..cfg.n_samples).map(|i| d.matrix.get(i, l1).unwrap()).collect();
        let corr = correlation(&a, &b);
        assert!((corr - 1.0).abs() < 1e-12, "corr {corr}");
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
        cov / (va.sqrt() * vb.sqrt())
    }

    #[test]
    fn censoring_rate_calibrated_within_five_percent() {
        let cfg = SynthConfig {
            n_samples: 2000,
            n_genes: 5,
            n_factors: 2,
            censoring_rate: 0.3,
            seed: 11,
            ..Default::default()
        };
        let d = generate(&cfg).unwrap();
        let censored = d.survival.iter().filter(|r| !r.event).count() as f64;
        let rate = censored / 2000.0;
        assert!((rate - 0.3).abs() < 0.05, "empirical censoring {rate}");
    }

    #[test]
    fn generation_is_seeded() {
        let cfg = SynthConfig::default();
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.matrix, b.matrix);
        assert_eq!(a.survival, b.survival);
    }

    #[test]
    fn class_means_are_equidistant_on_simplex() {
        let mut rng = rng::stream(0, "cm");
        let m = class_means(4, 3, 2.0, &mut rng);
        let dist = |a: usize, b: usize| -> f64 {
            (0..3)
                .map(|j| (m[a * 3 + j] - m[b * 3 + j]).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let d01 = dist(0, 1);
        for (a, b) in [(0, 2), (0, 3), (1, 2), (1, 3), (2, 3)] {
            assert!((dist(a, b) - d01).abs() < 1e-9);
        }
        // all at radius `sep`
        for c in 0..4 {
            let r: f64 = (0..3).map(|j| m[c * 3 + j] * m[c * 3 + j]).sum::<f64>().sqrt();
            assert!((r - 2.0).abs() < 1e-9);
        }
    }
}
