//! Limited-memory BFGS with a strong-Wolfe line search and restart-on-failure.
//!
//! When an evaluation fails (an error or a non-finite value or gradient), the
//! trial point is discarded, the curvature history is cleared and the search
//! resumes from the last accepted iterate with a short steepest-descent step.

use std::collections::VecDeque;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbfgsConfig {
    pub memory_pairs: usize,
    pub max_iterations: usize,
    /// Infinity-norm threshold on the gradient.
    pub grad_tol: f64,
    pub max_restarts: usize,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search_steps: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory_pairs: 10,
            max_iterations: 1000,
            grad_tol: 1e-6,
            max_restarts: 5,
            c1: 1e-4,
            c2: 0.9,
            max_line_search_steps: 25,
        }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.memory_pairs == 0 || self.max_iterations == 0 || self.max_line_search_steps == 0 {
            return Err(GpError::InvalidConfig("L-BFGS counts must be at least 1".into()));
        }
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(GpError::InvalidConfig(format!(
                "line search needs 0 < c1 < c2 < 1, got c1 = {}, c2 = {}",
                self.c1, self.c2
            )));
        }
        if !(self.grad_tol >= 0.0) {
            return Err(GpError::InvalidConfig("grad_tol must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    GradTol,
    MaxIters,
    LineSearchStall,
    RestartsExhausted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptResult {
    pub x_final: DVector<f64>,
    pub f_final: f64,
    pub grad_norm_final: f64,
    pub iterations: usize,
    pub restarts_used: usize,
    pub evaluations: usize,
    pub termination: Termination,
}

struct Evaluator<F> {
    objective: F,
    count: usize,
}

impl<F> Evaluator<F>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    /// `None` for any failure or non-finite output.
    fn eval(&mut self, x: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
        self.count += 1;
        match (self.objective)(x) {
            Ok((f, g)) if f.is_finite() && g.iter().all(|v| v.is_finite()) => Some((f, g)),
            _ => None,
        }
    }
}

enum LineSearch {
    Accepted { x: DVector<f64>, f: f64, g: DVector<f64> },
    NonFinite,
    Stalled,
}

struct Trial {
    t: f64,
    f: f64,
    g: DVector<f64>,
    dphi: f64,
}

/// Minimizer of the cubic through `(x1, f1, g1)` and `(x2, f2, g2)`, clamped to `bounds`.
fn cubic_interpolate(x1: f64, f1: f64, g1: f64, x2: f64, f2: f64, g2: f64, bounds: (f64, f64)) -> f64 {
    let (lo, hi) = bounds;
    let d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2);
    let d2_sq = d1 * d1 - g1 * g2;
    if d2_sq >= 0.0 {
        let d2 = d2_sq.sqrt();
        let t = if x1 <= x2 {
            x2 - (x2 - x1) * ((g2 + d2 - d1) / (g2 - g1 + 2.0 * d2))
        } else {
            x1 - (x1 - x2) * ((g1 + d2 - d1) / (g1 - g2 + 2.0 * d2))
        };
        if t.is_finite() {
            return t.clamp(lo, hi);
        }
    }
    0.5 * (lo + hi)
}

struct LineSearchCtx<'a> {
    x: &'a DVector<f64>,
    d: &'a DVector<f64>,
    f0: f64,
    dphi0: f64,
    config: &'a LbfgsConfig,
    budget: usize,
}

impl LineSearchCtx<'_> {
    fn try_step<F>(&mut self, eval: &mut Evaluator<F>, t: f64) -> Option<Option<Trial>>
    where
        F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
    {
        if self.budget == 0 {
            return None;
        }
        self.budget -= 1;
        let xt = self.x + self.d * t;
        Some(eval.eval(&xt).map(|(f, g)| {
            let dphi = g.dot(self.d);
            Trial { t, f, g, dphi }
        }))
    }

    fn accept(&self, trial: Trial) -> LineSearch {
        LineSearch::Accepted {
            x: self.x + self.d * trial.t,
            f: trial.f,
            g: trial.g,
        }
    }

    fn armijo(&self, trial: &Trial) -> bool {
        trial.f <= self.f0 + self.config.c1 * trial.t * self.dphi0
    }

    fn curvature(&self, trial: &Trial) -> bool {
        trial.dphi.abs() <= -self.config.c2 * self.dphi0
    }

    fn run<F>(mut self, eval: &mut Evaluator<F>, g0: &DVector<f64>, t_init: f64) -> LineSearch
    where
        F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
    {
        let mut prev = Trial {
            t: 0.0,
            f: self.f0,
            g: g0.clone(),
            dphi: self.dphi0,
        };
        let mut t = t_init;
        let mut first = true;
        loop {
            let trial = match self.try_step(eval, t) {
                None => return self.fallback(prev),
                Some(None) => return LineSearch::NonFinite,
                Some(Some(trial)) => trial,
            };
            if !self.armijo(&trial) || (!first && trial.f >= prev.f) {
                return self.zoom(eval, prev, trial);
            }
            if self.curvature(&trial) {
                return self.accept(trial);
            }
            if trial.dphi >= 0.0 {
                return self.zoom(eval, trial, prev);
            }
            let min_step = trial.t + 0.01 * (trial.t - prev.t);
            let max_step = trial.t * 10.0;
            t = cubic_interpolate(
                prev.t,
                prev.f,
                prev.dphi,
                trial.t,
                trial.f,
                trial.dphi,
                (min_step, max_step),
            );
            prev = trial;
            first = false;
        }
    }

    /// Refines a bracket whose `lo` end satisfies sufficient decrease.
    fn zoom<F>(&mut self, eval: &mut Evaluator<F>, mut lo: Trial, mut hi: Trial) -> LineSearch
    where
        F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
    {
        loop {
            let (a, b) = if lo.t < hi.t { (lo.t, hi.t) } else { (hi.t, lo.t) };
            let width = b - a;
            if width * self.d.amax() < 1e-14 * (1.0 + self.x.amax()) {
                return self.fallback(lo);
            }
            let margin = 0.1 * width;
            let t = cubic_interpolate(lo.t, lo.f, lo.dphi, hi.t, hi.f, hi.dphi, (a + margin, b - margin));
            let trial = match self.try_step(eval, t) {
                None => return self.fallback(lo),
                Some(None) => return LineSearch::NonFinite,
                Some(Some(trial)) => trial,
            };
            if !self.armijo(&trial) || trial.f >= lo.f {
                hi = trial;
            } else {
                if self.curvature(&trial) {
                    return self.accept(trial);
                }
                if trial.dphi * (hi.t - lo.t) >= 0.0 {
                    hi = lo;
                }
                lo = trial;
            }
        }
    }

    /// Out of budget: keep the best sufficient-decrease point if it moved at all.
    fn fallback(&self, lo: Trial) -> LineSearch {
        if lo.t > 0.0 && lo.f < self.f0 {
            self.accept(lo)
        } else {
            LineSearch::Stalled
        }
    }
}

/// Two-loop recursion: returns `-H g`.
fn lbfgs_direction(g: &DVector<f64>, history: &VecDeque<(DVector<f64>, DVector<f64>, f64)>) -> DVector<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * s.dot(&q);
        q.axpy(-a, y, 1.0);
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        q *= s.dot(y) / y.dot(y);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = rho * y.dot(&q);
        q.axpy(a - b, s, 1.0);
    }
    -q
}

/// Minimizes `objective` starting from `x0`.
///
/// The objective returns the value and gradient; an `Err`, NaN or infinity at
/// a trial point triggers a restart. Always returns the best accepted iterate.
pub fn minimize<F>(objective: F, x0: &DVector<f64>, config: &LbfgsConfig) -> Result<OptResult>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    config.validate()?;
    let mut eval = Evaluator { objective, count: 0 };
    let (mut f, mut g) = eval.eval(x0).ok_or(GpError::InvalidStart)?;
    let mut x = x0.clone();
    let mut history: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::with_capacity(config.memory_pairs);
    let mut iterations = 0;
    let mut restarts = 0;
    // Restarts since the last accepted step; each shrinks the recovery step.
    let mut consecutive_failures = 0;

    let termination = loop {
        if g.amax() <= config.grad_tol {
            break Termination::GradTol;
        }
        if iterations >= config.max_iterations {
            break Termination::MaxIters;
        }

        let mut d = if history.is_empty() {
            -&g
        } else {
            lbfgs_direction(&g, &history)
        };
        let mut dphi0 = g.dot(&d);
        if !(dphi0 < 0.0) || !dphi0.is_finite() {
            history.clear();
            d = -&g;
            dphi0 = g.dot(&d);
        }
        let t_init = if history.is_empty() {
            (1.0 / g.norm()).min(1.0) * 0.1f64.powi(consecutive_failures)
        } else {
            1.0
        };

        let ctx = LineSearchCtx {
            x: &x,
            d: &d,
            f0: f,
            dphi0,
            config,
            budget: config.max_line_search_steps,
        };
        match ctx.run(&mut eval, &g, t_init) {
            LineSearch::Accepted {
                x: x_new,
                f: f_new,
                g: g_new,
            } => {
                let s = &x_new - &x;
                let y = &g_new - &g;
                let sy = s.dot(&y);
                if sy > 1e-10 * s.norm() * y.norm() && sy > 0.0 {
                    if history.len() == config.memory_pairs {
                        history.pop_front();
                    }
                    history.push_back((s, y, 1.0 / sy));
                }
                x = x_new;
                f = f_new;
                g = g_new;
                iterations += 1;
                consecutive_failures = 0;
            }
            LineSearch::NonFinite => {
                if restarts >= config.max_restarts {
                    break Termination::RestartsExhausted;
                }
                restarts += 1;
                consecutive_failures += 1;
                history.clear();
            }
            LineSearch::Stalled => {
                if history.is_empty() {
                    break Termination::LineSearchStall;
                }
                history.clear();
            }
        }
    };

    Ok(OptResult {
        grad_norm_final: g.amax(),
        x_final: x,
        f_final: f,
        iterations,
        restarts_used: restarts,
        evaluations: eval.count,
        termination,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_converges_quickly() {
        let c = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let obj = |x: &DVector<f64>| {
            let r = x - &c;
            Ok((0.5 * r.norm_squared(), r))
        };
        let res = minimize(obj, &DVector::zeros(3), &LbfgsConfig::default()).unwrap();
        assert!((&res.x_final - &c).amax() < 1e-8, "{res:?}");
        assert!(res.iterations <= 10);
        assert_eq!(res.termination, Termination::GradTol);
    }

    fn rosenbrock(x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = DVector::from_vec(vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)]);
        Ok((f, g))
    }

    #[test]
    fn rosenbrock_reaches_minimum() {
        let x0 = DVector::from_vec(vec![-1.2, 1.0]);
        let res = minimize(rosenbrock, &x0, &LbfgsConfig::default()).unwrap();
        assert!(res.f_final < 1e-8, "{res:?}");
        assert!((res.x_final[0] - 1.0).abs() < 1e-3 && (res.x_final[1] - 1.0).abs() < 1e-3);
        assert!(res.iterations <= 200);
    }

    #[test]
    fn invalid_start_is_reported() {
        let obj = |_: &DVector<f64>| Ok((f64::NAN, DVector::zeros(1)));
        assert_eq!(
            minimize(obj, &DVector::zeros(1), &LbfgsConfig::default()),
            Err(GpError::InvalidStart)
        );
    }

    #[test]
    fn errors_count_as_failures() {
        let obj = |x: &DVector<f64>| {
            if x[0] < -0.5 {
                Err(GpError::NonFiniteObjective("out of domain".into()))
            } else {
                Ok(((x[0] - 3.0).powi(2), DVector::from_vec(vec![2.0 * (x[0] - 3.0)])))
            }
        };
        let res = minimize(obj, &DVector::from_vec(vec![0.0]), &LbfgsConfig::default()).unwrap();
        assert!((res.x_final[0] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn cubic_interpolation_of_a_quadratic_is_exact() {
        // f(t) = (t - 0.3)^2
        let f = |t: f64| (t - 0.3) * (t - 0.3);
        let g = |t: f64| 2.0 * (t - 0.3);
        let t = cubic_interpolate(0.0, f(0.0), g(0.0), 1.0, f(1.0), g(1.0), (0.0, 1.0));
        assert!((t - 0.3).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_wolfe_constants() {
        let cfg = LbfgsConfig {
            c1: 0.9,
            c2: 0.1,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
