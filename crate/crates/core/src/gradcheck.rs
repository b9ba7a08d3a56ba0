//! Central finite-difference verification of analytic gradients.

use crate::composer::{compose_model, framework_loss, ComposerConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nets::{init_params, ModelSpec, ParamVars};
use crate::rng::{split, SplitMix64};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(param index, element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Relative error with denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks every element of every parameter; returns the max relative error.
pub fn check_gradients<F>(f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let picks: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.numel()).map(move |e| (p, e)))
        .collect();
    Ok(check_gradients_at(f, params, h, &picks)?.max_rel_error)
}

/// Checks only the listed `(param index, element index)` pairs.
pub fn check_gradients_at<F>(
    f: F,
    params: &[Tensor],
    h: f64,
    picks: &[(usize, usize)],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Invalid(format!("gradcheck step must be positive, got {h}")));
    }
    let mut graph = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| graph.param(p)).collect();
    let loss = f(&mut graph, &vars)?;
    graph.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            graph
                .grad(v)
                .map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec)
        })
        .collect();

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vs: Vec<Var> = ps.iter().map(|p| g.constant(p.detached())).collect();
        let l = f(&mut g, &vs)?;
        Ok(g.value(l).item())
    };

    let mut work: Vec<Tensor> = params.iter().map(Tensor::detached).collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for &(p, e) in picks {
        let orig = work[p].data()[e];
        work[p].data_mut()[e] = orig + h;
        let plus = eval(&work)?;
        work[p].data_mut()[e] = orig - h;
        let minus = eval(&work)?;
        work[p].data_mut()[e] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(analytic[p][e], numeric);
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((p, e));
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Finite-difference check of the full composed loss with respect to every
/// parameter of a randomly initialized model on a random `(y, x)` pair.
pub fn check_composed_model(
    spec: &ModelSpec,
    cfg: &ComposerConfig,
    input_shape: [usize; 4],
    seed: u64,
    h: f64,
) -> Result<GradCheckReport> {
    let params = init_params(spec, seed);
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    let tensors: Vec<Tensor> = params.iter().map(|(_, t)| t.detached()).collect();
    let mut rng = SplitMix64::new(split(seed, 0x9c));
    let y = Tensor::from_fn(input_shape, |_| rng.uniform());
    let x = Tensor::from_fn(input_shape, |_| rng.uniform());
    let picks: Vec<(usize, usize)> = tensors
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.numel()).map(move |e| (p, e)))
        .collect();
    check_gradients_at(
        |g, vars| {
            let bound = ParamVars::from_pairs(names.iter().map(String::as_str).zip(vars.iter().copied()));
            let yv = g.constant(y.clone());
            let xv = g.constant(x.clone());
            let trace = compose_model(g, spec, &bound, yv, cfg)?;
            Ok(framework_loss(g, &trace, xv, cfg)?.total)
        },
        &tensors,
        h,
        &picks,
    )
}
