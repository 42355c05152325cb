//! Central finite-difference verification of reverse-mode gradients.

use super::{BoundParams, Graph, OpKind, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Agreement for one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    /// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂, 1e-8)` over the whole tensor.
    pub rel_error: f64,
    /// Worst `|a − n| / max(|a|, |n|, 1e-8)` over single coordinates.
    pub max_coord_rel_error: f64,
    pub max_abs_error: f64,
    /// `‖a‖₂`, for judging the error against the finite-difference noise.
    pub analytic_norm: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    /// Largest per-tensor `rel_error`.
    pub max_rel_error: f64,
    /// Largest per-coordinate relative error. Coordinates whose gradient is
    /// within a few orders of the finite-difference roundoff (about
    /// `ulp(f) / h`) can dominate this figure without any fault in the rule.
    pub max_coord_rel_error: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub struct GradChecker {
    step: f64,
    corrupt: Option<OpKind>,
}

impl GradChecker {
    pub fn new(step: f64) -> Self {
        GradChecker { step, corrupt: None }
    }

    /// Negative control: the analytic pass runs with a corrupted rule for `kind`.
    pub fn with_corrupted_rule(mut self, kind: OpKind) -> Self {
        self.corrupt = Some(kind);
        self
    }

    /// Compares `backward` against `(f(θ+h) − f(θ−h)) / 2h` for every
    /// coordinate of every parameter in `store`.
    pub fn run<F>(&self, store: &ParamStore, f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph, &BoundParams) -> Result<Tensor>,
    {
        if !(self.step > 0.0) {
            return Err(Error::Domain(format!("gradient check step must be positive, got {}", self.step)));
        }
        let mut g = Graph::new();
        if let Some(kind) = self.corrupt {
            g.corrupt_backward(kind);
        }
        let bound = g.bind(store);
        let loss = f(&mut g, &bound)?;
        let base = loss.item()?;
        if !base.is_finite() {
            return Err(Error::Numeric(format!("objective is not finite: {}", base)));
        }
        let grads = g.backward(&loss)?;

        let eval = |s: &ParamStore| -> Result<f64> {
            let mut g = Graph::no_grad();
            let bound = g.bind(s);
            let v = f(&mut g, &bound)?.item()?;
            if !v.is_finite() {
                return Err(Error::Numeric(format!("objective is not finite: {}", v)));
            }
            Ok(v)
        };

        let mut work = store.clone();
        let mut params = Vec::with_capacity(store.len());
        for id in store.ids() {
            let analytic = grads
                .get(id)
                .ok_or_else(|| Error::Graph(format!("no gradient for {}", store.name(id))))?
                .to_vec();
            let original = store.get(id).to_vec();
            let mut data = original.clone();
            let mut worst_rel: f64 = 0.0;
            let mut worst_abs: f64 = 0.0;
            let (mut diff_sq, mut a_sq, mut n_sq) = (0.0, 0.0, 0.0);
            for i in 0..data.len() {
                data[i] = original[i] + self.step;
                work.set_data(id, data.clone())?;
                let plus = eval(&work)?;
                data[i] = original[i] - self.step;
                work.set_data(id, data.clone())?;
                let minus = eval(&work)?;
                data[i] = original[i];
                let numeric = (plus - minus) / (2.0 * self.step);
                let a = analytic[i];
                let abs = (a - numeric).abs();
                let rel = abs / a.abs().max(numeric.abs()).max(1e-8);
                worst_rel = worst_rel.max(rel);
                worst_abs = worst_abs.max(abs);
                diff_sq += abs * abs;
                a_sq += a * a;
                n_sq += numeric * numeric;
            }
            work.set_data(id, original)?;
            params.push(ParamCheck {
                name: store.name(id).to_string(),
                numel: data.len(),
                rel_error: diff_sq.sqrt() / a_sq.sqrt().max(n_sq.sqrt()).max(1e-8),
                max_coord_rel_error: worst_rel,
                max_abs_error: worst_abs,
                analytic_norm: a_sq.sqrt(),
            });
        }
        let max_rel_error = params.iter().map(|p| p.rel_error).fold(0.0, f64::max);
        let max_coord_rel_error = params.iter().map(|p| p.max_coord_rel_error).fold(0.0, f64::max);
        Ok(GradCheckReport {
            params,
            max_rel_error,
            max_coord_rel_error,
        })
    }
}

/// Worst per-coordinate relative error; see [`GradChecker::run`].
pub fn grad_check<F>(store: &ParamStore, step: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &BoundParams) -> Result<Tensor>,
{
    Ok(GradChecker::new(step).run(store, f)?.max_coord_rel_error)
}
