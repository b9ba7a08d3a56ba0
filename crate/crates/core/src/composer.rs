//! Truncated Taylor composition: a mapping term plus factorially weighted
//! derivative terms produced by unrolling one shared network.
//!
//! ```text
//! f_out   = F(y)
//! g^0     = f_out            (or y, see SeedTerm)
//! g^{k+1} = G(concat(g^k, y)) + k * g^k     (WithKResidual)
//! g^{k+1} = G(concat(g^k, y))               (ConcatOnly)
//! O       = f_out + sum_{k=1..n} g^k / k!
//! L       = l1(x, O) + lambda * l1(x, f_out)
//! ```

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nets::{ModelSpec, ParamVars};
use crate::tensor::{ensure_same_shape, Tensor};

/// Largest supported Taylor order.
pub const MAX_ORDER: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecurrenceVariant {
    /// `g^{k+1} = G(concat(g^k, y)) + k * g^k`.
    WithKResidual,
    /// `g^{k+1} = G(concat(g^k, y))`.
    ConcatOnly,
}

/// Starting value of the recurrence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeedTerm {
    MappingOutput,
    DegradedInput,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComposerConfig {
    pub order: usize,
    pub lambda: f64,
    pub variant: RecurrenceVariant,
    pub seed_term: SeedTerm,
}

impl Default for ComposerConfig {
    fn default() -> Self {
        Self {
            order: 3,
            lambda: 1.0,
            variant: RecurrenceVariant::WithKResidual,
            seed_term: SeedTerm::MappingOutput,
        }
    }
}

impl ComposerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.order > MAX_ORDER {
            return Err(Error::Invalid(format!(
                "Taylor order {} exceeds the maximum of {MAX_ORDER}",
                self.order
            )));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Invalid(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Graph handles for one composed forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComposerTrace {
    pub f_out: Var,
    /// `g^1 ..= g^n`.
    pub terms: Vec<Var>,
    pub output: Var,
}

impl ComposerTrace {
    pub fn order(&self) -> usize {
        self.terms.len()
    }

    /// Copies the traced values out of the graph.
    pub fn values(&self, g: &Graph) -> TraceValues {
        TraceValues {
            f_out: g.value(self.f_out).detached(),
            terms: self.terms.iter().map(|&v| g.value(v).detached()).collect(),
            output: g.value(self.output).detached(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceValues {
    pub f_out: Tensor,
    pub terms: Vec<Tensor>,
    pub output: Tensor,
}

/// `[1/1!, 1/2!, ..., 1/n!]`, with factorials formed exactly as integers.
pub fn factorial_weights(n: usize) -> Vec<f64> {
    let mut fact: u64 = 1;
    (1..=n as u64)
        .map(|k| {
            fact *= k;
            1.0 / fact as f64
        })
        .collect()
}

/// Unrolls the derivative recurrence to `cfg.order` and assembles the output.
///
/// `mapping` is called once on `y`; `derivative(g, g_k, y)` once per order.
pub fn compose_orders<M, D>(
    g: &mut Graph,
    y: Var,
    cfg: &ComposerConfig,
    mapping: M,
    mut derivative: D,
) -> Result<ComposerTrace>
where
    M: FnOnce(&mut Graph, Var) -> Result<Var>,
    D: FnMut(&mut Graph, Var, Var) -> Result<Var>,
{
    cfg.validate()?;
    let f_out = mapping(g, y)?;
    ensure_same_shape("compose_orders", g.value(y), g.value(f_out))?;
    let mut current = match cfg.seed_term {
        SeedTerm::MappingOutput => f_out,
        SeedTerm::DegradedInput => y,
    };
    let mut terms = Vec::with_capacity(cfg.order);
    for k in 0..cfg.order {
        let mut next = derivative(g, current, y)?;
        ensure_same_shape("compose_orders", g.value(y), g.value(next))?;
        if cfg.variant == RecurrenceVariant::WithKResidual && k > 0 {
            let residual = g.scale(current, k as f64);
            next = g.add(next, residual)?;
        }
        terms.push(next);
        current = next;
    }
    let output = assemble_output(g, f_out, &terms)?;
    Ok(ComposerTrace {
        f_out,
        terms,
        output,
    })
}

/// `O = f_out + sum_k g^k / k!`. With no terms, returns `f_out` itself.
pub fn assemble_output(g: &mut Graph, f_out: Var, terms: &[Var]) -> Result<Var> {
    let mut acc = f_out;
    for (&term, w) in terms.iter().zip(factorial_weights(terms.len())) {
        let weighted = g.scale(term, w);
        acc = g.add(acc, weighted)?;
    }
    Ok(acc)
}

/// Composes F and G from a bound parameter set.
pub fn compose_model(
    g: &mut Graph,
    spec: &ModelSpec,
    vars: &ParamVars,
    y: Var,
    cfg: &ComposerConfig,
) -> Result<ComposerTrace> {
    compose_orders(
        g,
        y,
        cfg,
        |g, y| spec.forward_f(g, vars, y),
        |g, gk, y| spec.forward_g(g, vars, gk, y),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossTerms {
    pub total: Var,
    /// `l1(x, O)`.
    pub output: Var,
    /// `l1(x, f_out)`.
    pub mapping: Var,
}

/// `l1(x, O) + lambda * l1(x, f_out)`.
pub fn framework_loss(
    g: &mut Graph,
    trace: &ComposerTrace,
    x: Var,
    cfg: &ComposerConfig,
) -> Result<LossTerms> {
    let output = g.l1_loss(trace.output, x)?;
    let mapping = g.l1_loss(trace.f_out, x)?;
    let weighted = g.scale(mapping, cfg.lambda);
    let total = g.add(output, weighted)?;
    Ok(LossTerms {
        total,
        output,
        mapping,
    })
}
