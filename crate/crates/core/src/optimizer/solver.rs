//! Augmented Lagrangian over inequality constraints `c_i(v) <= 0`, with a
//! box-projected L-BFGS inner loop.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Values at one point. `constraints` are in `c_i <= 0` form.
#[derive(Clone, Debug, PartialEq)]
pub struct Values {
    pub objective: f64,
    pub constraints: Vec<f64>,
    /// Extra per-point quantities carried into the run log.
    pub diagnostics: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub objective: Vec<f64>,
    pub constraints: Vec<Vec<f64>>,
}

/// Smooth problem with box bounds and inequality constraints.
pub trait ConstrainedProblem {
    fn dim(&self) -> usize;

    fn bounds(&self) -> (Vec<f64>, Vec<f64>);

    /// Reference magnitude of each constraint, used for relative violations.
    fn constraint_scales(&self) -> Vec<f64>;

    /// `None` marks a point that cannot be evaluated; the line search treats
    /// it as `+inf` and backtracks.
    fn evaluate(&mut self, v: &[f64]) -> Result<Option<Values>>;

    /// Gradients at a point previously accepted by `evaluate`.
    fn gradient(&mut self, v: &[f64]) -> Result<Gradients>;
}

/// `max_i max(0, c_i / |s_i|)`.
pub fn relative_violation(constraints: &[f64], scales: &[f64]) -> Result<f64> {
    if constraints.len() != scales.len() {
        return invalid("constraint and scale counts differ");
    }
    let mut worst = 0.0f64;
    for (c, s) in constraints.iter().zip(scales) {
        if *s == 0.0 || !s.is_finite() {
            return invalid(format!("constraint bound must be finite and nonzero, got {s}"));
        }
        worst = worst.max(c / s.abs());
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub memory: usize,
    /// Gradient evaluations allowed in total.
    pub max_gradients: usize,
    /// Relative violation accepted as feasible.
    pub feasibility_tol: f64,
    /// Projected-gradient and complementarity tolerance.
    pub optimality_tol: f64,
    pub initial_penalty: f64,
    pub max_inner: usize,
    pub max_outer: usize,
    pub armijo: f64,
    pub max_backtracks: usize,
    /// First step length as a fraction of the narrowest box width.
    pub initial_step: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            max_gradients: 100,
            feasibility_tol: 2e-3,
            optimality_tol: 1e-6,
            initial_penalty: 10.0,
            max_inner: 50,
            max_outer: 100,
            armijo: 1e-4,
            max_backtracks: 40,
            initial_step: 0.1,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.memory == 0 || self.max_gradients == 0 || self.max_inner == 0 || self.max_outer == 0 {
            return invalid("solver memory and iteration budgets must be positive");
        }
        let positive = [self.feasibility_tol, self.optimality_tol, self.initial_penalty, self.initial_step];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return invalid("solver tolerances, penalty and step must be positive");
        }
        if !(self.armijo > 0.0 && self.armijo < 0.5) {
            return invalid(format!("Armijo constant must lie in (0, 0.5), got {}", self.armijo));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    BudgetExhausted,
    /// No descent possible from the current point.
    Stalled,
    OuterLimit,
}

/// One accepted inner iterate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub iterate: usize,
    pub outer: usize,
    pub objective: f64,
    pub constraints: Vec<f64>,
    pub diagnostics: Vec<f64>,
    pub eps_rel: f64,
    pub evaluations: usize,
    pub gradients: usize,
    pub step_norm: f64,
}

#[derive(Clone, Debug)]
pub struct SolveResult {
    pub v: Vec<f64>,
    pub values: Values,
    pub eps_rel: f64,
    pub multipliers: Vec<f64>,
    pub penalty: f64,
    /// Projected gradient of the Lagrangian at the final outer iterate.
    pub kkt_norm: f64,
    pub converged: bool,
    pub termination: Termination,
    pub evaluations: usize,
    pub gradients: usize,
    pub outer_iterations: usize,
    pub log: Vec<LogRow>,
    /// Relative violation of every accepted outer iterate.
    pub outer_violations: Vec<f64>,
}

struct Counted<'a, P: ConstrainedProblem + ?Sized> {
    problem: &'a mut P,
    evaluations: usize,
    gradients: usize,
    max_gradients: usize,
}

impl<P: ConstrainedProblem + ?Sized> Counted<'_, P> {
    fn evaluate(&mut self, v: &[f64]) -> Result<Option<Values>> {
        self.evaluations += 1;
        let out = self.problem.evaluate(v)?;
        Ok(out.filter(|val| val.objective.is_finite() && val.constraints.iter().all(|c| c.is_finite())))
    }

    fn gradient(&mut self, v: &[f64]) -> Result<Option<Gradients>> {
        if self.gradients >= self.max_gradients {
            return Ok(None);
        }
        self.gradients += 1;
        self.problem.gradient(v).map(Some)
    }
}

fn merit(val: &Values, mu: &[f64], rho: f64) -> f64 {
    val.objective
        + val
            .constraints
            .iter()
            .zip(mu)
            .map(|(c, m)| ((m + rho * c).max(0.0).powi(2) - m * m) / (2.0 * rho))
            .sum::<f64>()
}

fn merit_gradient(val: &Values, g: &Gradients, mu: &[f64], rho: f64) -> Vec<f64> {
    let mut out = g.objective.clone();
    for ((c, m), gc) in val.constraints.iter().zip(mu).zip(&g.constraints) {
        let w = (m + rho * c).max(0.0);
        if w > 0.0 {
            for (o, gi) in out.iter_mut().zip(gc) {
                *o += w * gi;
            }
        }
    }
    out
}

fn project(v: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((x, l), h) in v.iter_mut().zip(lo).zip(hi) {
        *x = x.clamp(*l, *h);
    }
}

/// `||P(v - g) - v||_inf`.
fn projected_gradient_norm(v: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    v.iter()
        .zip(g)
        .zip(lo.iter().zip(hi))
        .map(|((x, gi), (l, h))| ((x - gi).clamp(*l, *h) - x).abs())
        .fold(0.0, f64::max)
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

enum InnerStop {
    Tolerance,
    Iterations,
    Budget,
    NoProgress,
}

struct Point {
    v: Vec<f64>,
    values: Values,
    grad: Vec<f64>,
}

struct Run<'a, 'p, P: ConstrainedProblem + ?Sized> {
    counted: Counted<'p, P>,
    config: &'a SolverConfig,
    lo: Vec<f64>,
    hi: Vec<f64>,
    scales: Vec<f64>,
    log: Vec<LogRow>,
    outer: usize,
    best: Option<(Vec<f64>, Values, f64)>,
    raw: Gradients,
}

impl<P: ConstrainedProblem + ?Sized> Run<'_, '_, P> {
    fn record(&mut self, v: &[f64], values: &Values, step_norm: f64) -> Result<()> {
        let eps = relative_violation(&values.constraints, &self.scales)?;
        self.log.push(LogRow {
            iterate: self.log.len(),
            outer: self.outer,
            objective: values.objective,
            constraints: values.constraints.clone(),
            diagnostics: values.diagnostics.clone(),
            eps_rel: eps,
            evaluations: self.counted.evaluations,
            gradients: self.counted.gradients,
            step_norm,
        });
        let tol = self.config.feasibility_tol;
        let better = match &self.best {
            None => true,
            Some((_, b, be)) => match (eps <= tol, *be <= tol) {
                (true, true) => values.objective < b.objective,
                (true, false) => true,
                (false, true) => false,
                (false, false) => eps < *be,
            },
        };
        if better {
            self.best = Some((v.to_vec(), values.clone(), eps));
        }
        Ok(())
    }

    /// Minimize the merit function from `start`; `start.grad` is already the
    /// merit gradient for `(mu, rho)`.
    fn inner(&mut self, mut x: Point, mu: &[f64], rho: f64) -> Result<(Point, f64, InnerStop)> {
        let n = x.v.len();
        let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
        let mut f = merit(&x.values, mu, rho);
        let pg0 = projected_gradient_norm(&x.v, &x.grad, &self.lo, &self.hi);
        let tol = self.config.optimality_tol.max(1e-2 * pg0);
        let width = self
            .lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| h - l)
            .filter(|w| *w > 0.0)
            .fold(f64::INFINITY, f64::min);
        let first_step = if width.is_finite() { self.config.initial_step * width } else { 1.0 };
        for _ in 0..self.config.max_inner {
            let pg = projected_gradient_norm(&x.v, &x.grad, &self.lo, &self.hi);
            if pg <= tol {
                return Ok((x, pg, InnerStop::Tolerance));
            }
            // variables held at a bound by the gradient stay fixed
            let free: Vec<bool> = (0..n)
                .map(|i| {
                    let g = x.grad[i];
                    !((x.v[i] <= self.lo[i] && g > 0.0) || (x.v[i] >= self.hi[i] && g < 0.0))
                })
                .collect();
            let mask = |v: &mut Vec<f64>| {
                for (a, f) in v.iter_mut().zip(&free) {
                    if !f {
                        *a = 0.0;
                    }
                }
            };
            let mut q = x.grad.clone();
            mask(&mut q);
            let mut dir = if pairs.is_empty() {
                let s = first_step / inf_norm(&q).max(f64::MIN_POSITIVE);
                q.iter().map(|g| -s * g).collect()
            } else {
                let mut alphas = Vec::with_capacity(pairs.len());
                for (s, y, r) in pairs.iter().rev() {
                    let a = r * dot(s, &q);
                    for (qi, yi) in q.iter_mut().zip(y) {
                        *qi -= a * yi;
                    }
                    alphas.push(a);
                }
                let (s, y, _) = pairs.back().unwrap();
                let gamma = dot(s, y) / dot(y, y);
                for qi in q.iter_mut() {
                    *qi *= gamma;
                }
                for ((s, y, r), a) in pairs.iter().zip(alphas.iter().rev()) {
                    let b = r * dot(y, &q);
                    for (qi, si) in q.iter_mut().zip(s) {
                        *qi += (a - b) * si;
                    }
                }
                q.iter().map(|v| -v).collect::<Vec<f64>>()
            };
            mask(&mut dir);
            if dot(&dir, &x.grad) >= 0.0 {
                pairs.clear();
                let mut g = x.grad.clone();
                mask(&mut g);
                let s = first_step / inf_norm(&g).max(f64::MIN_POSITIVE);
                dir = g.iter().map(|g| -s * g).collect();
            }

            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..=self.config.max_backtracks {
                let mut cand: Vec<f64> = x.v.iter().zip(&dir).map(|(v, d)| v + alpha * d).collect();
                project(&mut cand, &self.lo, &self.hi);
                let step: Vec<f64> = cand.iter().zip(&x.v).map(|(c, v)| c - v).collect();
                if inf_norm(&step) == 0.0 {
                    break;
                }
                if let Some(val) = self.counted.evaluate(&cand)? {
                    let fc = merit(&val, mu, rho);
                    if fc <= f + self.config.armijo * dot(&x.grad, &step) {
                        accepted = Some((cand, val, fc, step));
                        break;
                    }
                }
                alpha *= 0.5;
            }
            let Some((v_new, val, f_new, step)) = accepted else {
                return Ok((x, pg, InnerStop::NoProgress));
            };
            let Some(raw) = self.counted.gradient(&v_new)? else {
                // the accepted point stands, but no gradient is left to continue from
                self.record(&v_new, &val, inf_norm(&step))?;
                let grad = x.grad.clone();
                return Ok((
                    Point {
                        v: v_new,
                        values: val,
                        grad,
                    },
                    f64::INFINITY,
                    InnerStop::Budget,
                ));
            };
            let g_new = merit_gradient(&val, &raw, mu, rho);
            self.raw = raw;
            self.record(&v_new, &val, inf_norm(&step))?;
            let y: Vec<f64> = g_new.iter().zip(&x.grad).map(|(a, b)| a - b).collect();
            let sy = dot(&step, &y);
            if sy > 1e-12 * dot(&step, &step).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
                if pairs.len() == self.config.memory {
                    pairs.pop_front();
                }
                pairs.push_back((step, y, 1.0 / sy));
            }
            x = Point {
                v: v_new,
                values: val,
                grad: g_new,
            };
            f = f_new;
        }
        let pg = projected_gradient_norm(&x.v, &x.grad, &self.lo, &self.hi);
        Ok((x, pg, InnerStop::Iterations))
    }
}

/// Minimize `J(v)` subject to `c(v) <= 0` and the problem's box.
///
/// Multipliers follow `mu_i <- max(0, mu_i + rho c_i)`; the penalty doubles
/// whenever an outer iterate fails to halve the relative violation. An outer
/// iterate that increases the violation above the feasibility tolerance is
/// rejected: the previous point is restored, the multipliers still take the
/// trial's update and the penalty doubles.
pub fn solve<P: ConstrainedProblem + ?Sized>(problem: &mut P, v0: &[f64], config: &SolverConfig) -> Result<SolveResult> {
    config.validate()?;
    let d = problem.dim();
    if v0.len() != d {
        return invalid(format!("initial vector has length {}, expected {d}", v0.len()));
    }
    let (lo, hi) = problem.bounds();
    if lo.len() != d || hi.len() != d || lo.iter().zip(&hi).any(|(l, h)| !(l <= h)) {
        return invalid("box bounds must have lower <= upper for every component");
    }
    let scales = problem.constraint_scales();
    let m = scales.len();
    let mut v = v0.to_vec();
    project(&mut v, &lo, &hi);

    let mut run = Run {
        counted: Counted {
            problem,
            evaluations: 0,
            gradients: 0,
            max_gradients: config.max_gradients,
        },
        config,
        lo,
        hi,
        scales,
        log: Vec::new(),
        outer: 0,
        best: None,
        raw: Gradients {
            objective: Vec::new(),
            constraints: Vec::new(),
        },
    };
    let Some(values) = run.counted.evaluate(&v)? else {
        return Err(Error::Numerical("initial design cannot be evaluated".into()));
    };
    if values.constraints.len() != m {
        return invalid(format!("problem returned {} constraints, expected {m}", values.constraints.len()));
    }
    let raw = run
        .counted
        .gradient(&v)?
        .ok_or_else(|| Error::InvalidArgument("gradient budget is zero".into()))?;
    run.record(&v, &values, 0.0)?;

    let mut mu = vec![0.0; m];
    let mut rho = config.initial_penalty;
    let grad = merit_gradient(&values, &raw, &mu, rho);
    run.raw = raw;
    let mut current = Point { v, values, grad };
    let mut violation = relative_violation(&current.values.constraints, &run.scales)?;
    let mut outer_violations = vec![violation];
    let mut kkt_norm = f64::INFINITY;
    let mut idle = 0;
    let mut termination = Termination::OuterLimit;

    for outer in 0..config.max_outer {
        run.outer = outer + 1;
        let saved = (current.v.clone(), current.values.clone(), run.raw.clone());
        let (x, pg, stop) = run.inner(current, &mu, rho)?;
        let new_violation = relative_violation(&x.values.constraints, &run.scales)?;
        let budget_hit = matches!(stop, InnerStop::Budget) || run.counted.gradients >= config.max_gradients;
        let moved = x.v != saved.0;

        if new_violation <= violation || new_violation <= config.feasibility_tol {
            let halved = new_violation <= 0.5 * violation || new_violation <= config.feasibility_tol;
            let updated: Vec<f64> = x
                .values
                .constraints
                .iter()
                .zip(&mu)
                .map(|(c, m)| (m + rho * c).max(0.0))
                .collect();
            let complementarity = x
                .values
                .constraints
                .iter()
                .zip(&updated)
                .map(|(c, m)| (c * m).abs())
                .fold(0.0, f64::max);
            // at the inner solution the merit gradient is the Lagrangian
            // gradient with the updated multipliers
            kkt_norm = pg;
            mu = updated;
            if !halved {
                rho *= 2.0;
            }
            violation = new_violation;
            outer_violations.push(violation);
            current = x;
            if !budget_hit {
                current.grad = merit_gradient(&current.values, &run.raw, &mu, rho);
            }
            if violation <= config.feasibility_tol
                && kkt_norm <= config.optimality_tol
                && complementarity <= config.optimality_tol
            {
                termination = Termination::Converged;
                break;
            }
        } else {
            // the trial still carries a valid multiplier estimate
            for (m, c) in mu.iter_mut().zip(&x.values.constraints) {
                *m = (*m + rho * c).max(0.0);
            }
            rho *= 2.0;
            current = Point {
                v: saved.0,
                values: saved.1,
                grad: Vec::new(),
            };
            run.raw = saved.2;
            current.grad = merit_gradient(&current.values, &run.raw, &mu, rho);
        }
        if budget_hit {
            termination = Termination::BudgetExhausted;
            break;
        }
        idle = if moved { 0 } else { idle + 1 };
        if idle >= 3 {
            termination = Termination::Stalled;
            break;
        }
    }

    let converged = termination == Termination::Converged;
    let (v, values, eps_rel) = if converged {
        let e = relative_violation(&current.values.constraints, &run.scales)?;
        (current.v, current.values, e)
    } else {
        run.best.take().expect("initial point is always recorded")
    };
    Ok(SolveResult {
        v,
        values,
        eps_rel,
        multipliers: mu,
        penalty: rho,
        kkt_norm,
        converged,
        termination,
        evaluations: run.counted.evaluations,
        gradients: run.counted.gradients,
        outer_iterations: run.outer,
        log: run.log,
        outer_violations,
    })
}

/// Box-constrained minimization of a smooth function without constraints,
/// sharing the inner loop of [`solve`].
pub fn minimize_box(
    value: impl FnMut(&[f64]) -> Result<Option<f64>>,
    gradient: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    v0: &[f64],
    lo: Vec<f64>,
    hi: Vec<f64>,
    config: &SolverConfig,
) -> Result<SolveResult> {
    struct Plain<V, G> {
        d: usize,
        lo: Vec<f64>,
        hi: Vec<f64>,
        value: V,
        gradient: G,
    }
    impl<V, G> ConstrainedProblem for Plain<V, G>
    where
        V: FnMut(&[f64]) -> Result<Option<f64>>,
        G: FnMut(&[f64]) -> Result<Vec<f64>>,
    {
        fn dim(&self) -> usize {
            self.d
        }
        fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
            (self.lo.clone(), self.hi.clone())
        }
        fn constraint_scales(&self) -> Vec<f64> {
            Vec::new()
        }
        fn evaluate(&mut self, v: &[f64]) -> Result<Option<Values>> {
            Ok((self.value)(v)?.map(|objective| Values {
                objective,
                constraints: Vec::new(),
                diagnostics: Vec::new(),
            }))
        }
        fn gradient(&mut self, v: &[f64]) -> Result<Gradients> {
            Ok(Gradients {
                objective: (self.gradient)(v)?,
                constraints: Vec::new(),
            })
        }
    }
    let mut p = Plain {
        d: v0.len(),
        lo,
        hi,
        value,
        gradient,
    };
    solve(&mut p, v0, config)
}
