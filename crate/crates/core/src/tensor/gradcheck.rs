//! Finite-difference verification of analytic gradients.

use crate::error::{contract, Result};

use super::{Graph, Tensor, Var};

#[derive(Debug)]
pub struct ParamCheck {
    pub name: String,
    /// Largest relative error across the tensor's elements.
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.params.iter().all(|p| p.pass)
    }

    pub fn worst(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }
}

/// Relative error with a small floor so that gradients at floating-point
/// noise scale (including the zero-vs-zero case in dead regions) compare as
/// equal rather than dividing by ~0.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-4);
    (analytic - numeric).abs() / denom
}

/// Compare analytic gradients of `build` against central finite differences.
///
/// `build` must be deterministic: it receives a fresh graph plus one leaf per
/// entry of `params` (in order) and returns the scalar loss node.
pub fn grad_check<F>(
    build: F,
    params: &[(String, Tensor)],
    h: f64,
    rel_tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(contract(format!("grad_check: h={h} outside [1e-7, 1e-3]")));
    }

    // Analytic pass.
    let graph = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| graph.param(t.clone())).collect();
    let loss = build(&graph, &vars)?;
    let grads = graph.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(v, (_, t))| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();
    drop(graph);

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vs: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let l = build(&g, &vs)?;
        Ok(g.value(l).item())
    };

    let mut report = Vec::with_capacity(params.len());
    let mut work: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    for (pi, (name, tensor)) in params.iter().enumerate() {
        let mut max_err: f64 = 0.0;
        for e in 0..tensor.numel() {
            let orig = tensor.data()[e];
            work[pi].data_mut()[e] = orig + h;
            let up = eval(&work)?;
            work[pi].data_mut()[e] = orig - h;
            let down = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * h);
            max_err = max_err.max(rel_err(analytic[pi].data()[e], numeric));
        }
        report.push(ParamCheck {
            name: name.clone(),
            max_rel_err: max_err,
            pass: max_err < rel_tol,
        });
    }
    Ok(GradCheckReport { params: report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_under_central_differences() {
        // f(x) = sum(x*x): central differences are exact for quadratics
        let params = vec![("x".to_string(), Tensor::vector(vec![0.7, -1.3, 2.0]))];
        let report = grad_check(
            |g, vars| {
                let sq = g.mul(vars[0], vars[0])?;
                Ok(g.sum_all(sq))
            },
            &params,
            1e-5,
            1e-9,
        )
        .unwrap();
        assert!(report.pass(), "worst {}", report.worst());
    }

    #[test]
    fn dead_relu_region_compares_zero_vs_zero() {
        let params = vec![("x".to_string(), Tensor::vector(vec![-3.0, -1.0]))];
        let report = grad_check(
            |g, vars| {
                let r = g.relu(vars[0]);
                Ok(g.sum_all(r))
            },
            &params,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.pass());
        assert_eq!(report.worst(), 0.0);
    }

    #[test]
    fn rejects_out_of_range_step() {
        let params = vec![("x".to_string(), Tensor::vector(vec![1.0]))];
        let err = grad_check(|g, vars| Ok(g.sum_all(vars[0])), &params, 1e-2, 1e-4);
        assert!(err.is_err());
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let mut rng = crate::rng::stream(11, "gc-ln");
        let params = vec![
            ("x".to_string(), Tensor::randn(&[3, 4], 0.0, 1.0, &mut rng)),
            ("gain".to_string(), Tensor::randn(&[4], 1.0, 0.1, &mut rng)),
            ("bias".to_string(), Tensor::randn(&[4], 0.0, 0.1, &mut rng)),
        ];
        let report = grad_check(
            |g, vars| {
                let y = g.layer_norm(vars[0], vars[1], vars[2], 1e-5)?;
                // square to make the loss depend nonlinearly on y
                let sq = g.mul(y, y)?;
                Ok(g.mean_all(sq))
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass(), "worst {}", report.worst());
    }

    #[test]
    fn two_layer_mlp_gradients_match_finite_differences() {
        let mut rng = crate::rng::stream(5, "gc-mlp");
        let params = vec![
            ("w1".to_string(), Tensor::randn(&[4, 8], 0.0, 0.5, &mut rng)),
            ("b1".to_string(), Tensor::randn(&[8], 0.0, 0.5, &mut rng)),
            ("w2".to_string(), Tensor::randn(&[8, 3], 0.0, 0.5, &mut rng)),
            ("b2".to_string(), Tensor::randn(&[3], 0.0, 0.5, &mut rng)),
        ];
        let x = Tensor::randn(&[5, 4], 0.0, 1.0, &mut rng);
        let target = Tensor::randn(&[5, 3], 0.0, 1.0, &mut rng);
        let report = grad_check(
            |g, vars| {
                let xv = g.constant(x.clone());
                let tv = g.constant(target.clone());
                let h1 = g.matmul(xv, vars[0])?;
                let h1 = g.add_row(h1, vars[1])?;
                let h1 = g.gelu(h1);
                let out = g.matmul(h1, vars[2])?;
                let out = g.add_row(out, vars[3])?;
                let d = g.sub(out, tv)?;
                let sq = g.mul(d, d)?;
                Ok(g.mean_all(sq))
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass(), "worst {}", report.worst());
    }

    #[test]
    fn softmax_attention_block_gradients_match() {
        let mut rng = crate::rng::stream(9, "gc-attn");
        let d = 8;
        let params = vec![
            ("wq".to_string(), Tensor::randn(&[d, d], 0.0, 0.3, &mut rng)),
            ("wk".to_string(), Tensor::randn(&[d, d], 0.0, 0.3, &mut rng)),
            ("wv".to_string(), Tensor::randn(&[d, d], 0.0, 0.3, &mut rng)),
        ];
        let x = Tensor::randn(&[5, d], 0.0, 1.0, &mut rng);
        let report = grad_check(
            |g, vars| {
                let xv = g.constant(x.clone());
                let q = g.matmul(xv, vars[0])?;
                let k = g.matmul(xv, vars[1])?;
                let v = g.matmul(xv, vars[2])?;
                let kt = g.transpose(k)?;
                let scores = g.matmul(q, kt)?;
                let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
                let probs = g.softmax_rows(scores, None)?;
                let ctx = g.matmul(probs, v)?;
                let sq = g.mul(ctx, ctx)?;
                Ok(g.mean_all(sq))
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass(), "worst {}", report.worst());
    }
}
