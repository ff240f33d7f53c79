//! Marginal-likelihood gradients, finite-difference checks, L-BFGS with
//! early stopping, and parallel multi-restart training.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract, numerical, Error, Result};
use crate::gp::{Dataset, GpModel};

/// A differentiable scalar loss over a flat parameter vector.
pub trait Objective: Sync {
    fn value_and_gradient(&self, params: &[f64]) -> Result<(f64, Vec<f64>)>;

    fn value(&self, params: &[f64]) -> Result<f64> {
        Ok(self.value_and_gradient(params)?.0)
    }
}

impl<F> Objective for F
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)> + Sync,
{
    fn value_and_gradient(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        self(params)
    }
}

/// Negative log marginal likelihood of `model` on `data` as a function of
/// the model's parameters.
pub struct GpObjective<'a> {
    pub model: &'a GpModel,
    pub data: &'a Dataset,
}

impl GpObjective<'_> {
    fn at(&self, params: &[f64]) -> Result<GpModel> {
        let mut m = self.model.clone();
        m.set_params(params)?;
        Ok(m)
    }
}

impl Objective for GpObjective<'_> {
    fn value_and_gradient(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.at(params)?.nll_and_gradient(self.data)
    }

    fn value(&self, params: &[f64]) -> Result<f64> {
        self.at(params)?.nll(self.data)
    }
}

/// Gradient of the negative log marginal likelihood with respect to
/// [`GpModel::params`].
pub fn gradient(model: &GpModel, data: &Dataset) -> Result<Vec<f64>> {
    Ok(model.nll_and_gradient(data)?.1)
}

/// Default relative step of [`fd_check`].
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct FdEntry {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FdReport {
    pub entries: Vec<FdEntry>,
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
}

/// Compares `analytic` against central differences of `loss` at the given
/// indices, with step `h * max(1, |theta_i|)` and relative error
/// `|a - n| / max(1, |a|)`.
pub fn fd_check<F>(loss: F, params: &[f64], analytic: &[f64], h: f64, indices: &[usize]) -> Result<FdReport>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if analytic.len() != params.len() {
        return Err(contract(format!(
            "{} gradient entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut report = FdReport::default();
    let mut theta = params.to_vec();
    for &i in indices {
        if i >= params.len() {
            return Err(contract(format!("index {i} out of range for {} parameters", params.len())));
        }
        let step = h * params[i].abs().max(1.0);
        theta[i] = params[i] + step;
        let up = loss(&theta)?;
        theta[i] = params[i] - step;
        let down = loss(&theta)?;
        theta[i] = params[i];
        let numeric = (up - down) / (2.0 * step);
        let rel_error = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        if report.worst_index.is_none() || rel_error > report.max_rel_error {
            report.max_rel_error = rel_error;
            report.worst_index = Some(i);
        }
        report.entries.push(FdEntry {
            index: i,
            analytic: analytic[i],
            numeric,
            rel_error,
        });
    }
    Ok(report)
}

/// How accepted steps are chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMode {
    /// Armijo backtracking; `step_size` is the first trial step of
    /// steepest-descent iterations, quasi-Newton iterations try 1.
    #[default]
    LineSearch,
    /// `x += step_size * d`, always accepted.
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub restarts: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub step_size: f64,
    pub lbfgs_history: usize,
    pub seed: u64,
    pub step_mode: StepMode,
    /// Stop when the gradient infinity-norm falls below this.
    pub grad_tol: f64,
    /// Minimum absolute decrease of the best loss that resets patience.
    pub improvement_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            restarts: 80,
            max_epochs: 2000,
            patience: 20,
            step_size: 0.01,
            lbfgs_history: 10,
            seed: 0,
            step_mode: StepMode::LineSearch,
            grad_tol: 1e-8,
            improvement_tol: 1e-9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.restarts == 0 {
            return bad("restarts must be positive");
        }
        if self.max_epochs == 0 || self.patience == 0 || self.lbfgs_history == 0 {
            return bad("max_epochs, patience and lbfgs_history must be positive");
        }
        if self.patience >= self.max_epochs {
            return bad("patience must be smaller than max_epochs");
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad("step_size must be positive");
        }
        if !(self.grad_tol >= 0.0 && self.improvement_tol >= 0.0) {
            return bad("tolerances must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    Patience,
    GradientTolerance,
    LineSearchFailure,
    /// The fixed-step mode landed on a point where the loss is undefined.
    NonFinite,
}

/// Result of one L-BFGS run.
#[derive(Clone, Debug, PartialEq)]
pub struct LbfgsOutcome {
    /// Best parameters seen.
    pub params: Vec<f64>,
    pub loss: f64,
    pub epochs: usize,
    pub stop_reason: StopReason,
    /// Best-so-far loss after each epoch.
    pub trace: Vec<f64>,
}

const ARMIJO_C1: f64 = 1e-4;
const BACKTRACK: f64 = 0.5;
const MAX_BACKTRACKS: usize = 30;
const CURVATURE_EPS: f64 = 1e-10;

struct Memory {
    pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
    capacity: usize,
}

impl Memory {
    fn push(&mut self, s: Vec<f64>, y: Vec<f64>) {
        let sy = dot(&s, &y);
        if sy > CURVATURE_EPS * norm(&s) * norm(&y) {
            if self.pairs.len() == self.capacity {
                self.pairs.pop_front();
            }
            self.pairs.push_back((s, y, 1.0 / sy));
        }
    }

    /// `-H g` by the two-loop recursion.
    fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q = g.to_vec();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, rho) in self.pairs.iter().rev() {
            let a = rho * dot(s, &q);
            axpy(-a, y, &mut q);
            alphas.push(a);
        }
        if let Some((s, y, _)) = self.pairs.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in self.pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            axpy(a - b, s, &mut q);
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += a * xi);
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn finite_eval<O: Objective + ?Sized>(obj: &O, x: &[f64]) -> Option<(f64, Vec<f64>)> {
    match obj.value_and_gradient(x) {
        Ok((f, g)) if f.is_finite() && g.iter().all(|v| v.is_finite()) => Some((f, g)),
        _ => None,
    }
}

/// Minimizes `objective` from `initial`. One epoch is one iteration.
pub fn lbfgs_fit<O: Objective + ?Sized>(objective: &O, initial: &[f64], config: &TrainConfig) -> Result<LbfgsOutcome> {
    config.validate()?;
    let (mut f, mut g) = objective.value_and_gradient(initial)?;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(numerical(format!("loss {f} or its gradient is not finite at the initial point")));
    }
    let mut x = initial.to_vec();
    let mut best = (f, x.clone());
    let mut trace = Vec::new();
    let mut memory = Memory {
        pairs: VecDeque::with_capacity(config.lbfgs_history),
        capacity: config.lbfgs_history,
    };
    let mut reset_used = false;
    let mut stale = 0;
    let finish = |best: (f64, Vec<f64>), epochs, stop_reason, trace| {
        Ok(LbfgsOutcome {
            params: best.1,
            loss: best.0,
            epochs,
            stop_reason,
            trace,
        })
    };
    if inf_norm(&g) < config.grad_tol {
        return finish(best, 0, StopReason::GradientTolerance, trace);
    }

    for epoch in 1..=config.max_epochs {
        let mut d = memory.direction(&g);
        let mut steepest = memory.pairs.is_empty();
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            memory.pairs.clear();
            d = g.iter().map(|v| -v).collect();
            steepest = true;
            slope = dot(&g, &d);
        }
        if steepest {
            // Without curvature information the raw gradient sets the step
            // length, which can be enormous near a singular Gram.
            let scale = (1.0 / g.iter().map(|v| v.abs()).sum::<f64>()).min(1.0);
            d.iter_mut().for_each(|v| *v *= scale);
            slope *= scale;
        }

        let accepted = match config.step_mode {
            StepMode::LineSearch => {
                let mut t = if steepest { config.step_size } else { 1.0 };
                let mut found = None;
                for _ in 0..=MAX_BACKTRACKS {
                    let mut xn = x.clone();
                    axpy(t, &d, &mut xn);
                    if let Some((fnew, gnew)) = finite_eval(objective, &xn) {
                        if fnew <= f + ARMIJO_C1 * t * slope {
                            found = Some((xn, fnew, gnew));
                            break;
                        }
                    }
                    t *= BACKTRACK;
                }
                match found {
                    Some(step) => {
                        reset_used = false;
                        step
                    }
                    None if !reset_used && !steepest => {
                        log::debug!("line search failed at epoch {epoch}; resetting curvature memory");
                        memory.pairs.clear();
                        reset_used = true;
                        trace.push(best.0);
                        continue;
                    }
                    None => return finish(best, epoch, StopReason::LineSearchFailure, trace),
                }
            }
            StepMode::Fixed => {
                let mut xn = x.clone();
                axpy(config.step_size, &d, &mut xn);
                match finite_eval(objective, &xn) {
                    Some((fnew, gnew)) => (xn, fnew, gnew),
                    None => return finish(best, epoch, StopReason::NonFinite, trace),
                }
            }
        };

        let (xn, fnew, gnew) = accepted;
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
        memory.push(s, y);
        x = xn;
        f = fnew;
        g = gnew;

        if f < best.0 - config.improvement_tol {
            stale = 0;
        } else {
            stale += 1;
        }
        if f < best.0 {
            best = (f, x.clone());
        }
        trace.push(best.0);

        if inf_norm(&g) < config.grad_tol {
            return finish(best, epoch, StopReason::GradientTolerance, trace);
        }
        if stale >= config.patience {
            return finish(best, epoch, StopReason::Patience, trace);
        }
    }
    finish(best, config.max_epochs, StopReason::MaxEpochs, trace)
}

/// Summary of one restart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestartTrace {
    pub restart: usize,
    pub seed: u64,
    /// Best loss reached, or `None` when the restart errored.
    pub final_loss: Option<f64>,
    pub epochs: usize,
    pub stop_reason: Option<StopReason>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub best_params: Vec<f64>,
    pub best_loss: f64,
    pub best_restart: usize,
    pub restarts: Vec<RestartTrace>,
    /// Best-so-far loss per epoch of the winning restart.
    pub trace: Vec<f64>,
    /// False when the winning restart ran out of epochs.
    pub converged: bool,
}

/// Runs `config.restarts` independent fits in parallel. Restart `r` gets its
/// starting point from `init(r, rng)` with a ChaCha8 generator seeded by
/// `config.seed + r`. The lowest loss wins; ties go to the lower index.
pub fn multi_restart_with<O, F>(objective: &O, config: &TrainConfig, init: F) -> Result<FitResult>
where
    O: Objective + ?Sized,
    F: Fn(usize, &mut ChaCha8Rng) -> Vec<f64> + Sync,
{
    config.validate()?;
    let outcomes: Vec<(u64, Result<LbfgsOutcome>)> = (0..config.restarts)
        .into_par_iter()
        .map(|r| {
            let seed = config.seed.wrapping_add(r as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let start = init(r, &mut rng);
            (seed, lbfgs_fit(objective, &start, config))
        })
        .collect();

    let mut traces = Vec::with_capacity(outcomes.len());
    let mut best: Option<(usize, LbfgsOutcome)> = None;
    for (r, (seed, outcome)) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(o) => {
                traces.push(RestartTrace {
                    restart: r,
                    seed,
                    final_loss: Some(o.loss),
                    epochs: o.epochs,
                    stop_reason: Some(o.stop_reason),
                    error: None,
                });
                if best.as_ref().is_none_or(|(_, b)| o.loss < b.loss) {
                    best = Some((r, o));
                }
            }
            Err(e) => traces.push(RestartTrace {
                restart: r,
                seed,
                final_loss: None,
                epochs: 0,
                stop_reason: None,
                error: Some(e.to_string()),
            }),
        }
    }
    match best {
        Some((r, o)) => Ok(FitResult {
            best_params: o.params,
            best_loss: o.loss,
            best_restart: r,
            restarts: traces,
            trace: o.trace,
            converged: o.stop_reason != StopReason::MaxEpochs,
        }),
        None => {
            let reasons: Vec<String> = traces
                .iter()
                .map(|t| format!("restart {}: {}", t.restart, t.error.as_deref().unwrap_or("?")))
                .collect();
            Err(numerical(format!(
                "all {} restarts failed ({})",
                traces.len(),
                reasons.join("; ")
            )))
        }
    }
}

/// Trains `model` on `data` from freshly drawn initializations and returns
/// the model at the best parameters found.
pub fn multi_restart_fit(model: &GpModel, data: &Dataset, config: &TrainConfig) -> Result<(GpModel, FitResult)> {
    let objective = GpObjective { model, data };
    let fit = multi_restart_with(&objective, config, |_, rng| {
        let mut m = model.clone();
        m.reinitialize(rng);
        m.params()
    })?;
    let mut trained = model.clone();
    trained.set_params(&fit.best_params)?;
    Ok((trained, fit))
}
