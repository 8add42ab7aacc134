//! Adjoint gradients of flow functionals with respect to Hicks-Henne
//! coefficients.
//!
//! With `F(u, x) = u - omega P R(u, x)` and `R = A(x) u - b(x)`, the adjoint
//! fixed point is `lambda <- dJ/du + (I - omega P A)^T lambda`, sharing the
//! primal contraction. The total derivative is then
//! `dJ/dx = dJ/dx|_u - omega (dR/dx)^T P lambda`; `P` and `omega` depend on `x`
//! only through terms multiplied by `R = 0` at the converged state.

use nalgebra::DVector;

use super::panel::{loop_nodes, record_functionals, record_panels};
use super::{default_relaxation, FlowConditions, ObjectiveSpec, PanelSystem, StallGuard};
use crate::autodiff::{Shape, Tape};
use crate::error::{invalid, Error, Result};
use crate::geometry::{deform, AirfoilShape, BumpBasis, Deformed, HicksHenneVector};

/// Base shape on the panel grid plus the bump values at every panel node, so
/// that node ordinates are `y0 + B delta`.
#[derive(Clone, Debug)]
pub struct ShapeParameterization {
    base: AirfoilShape,
    basis: BumpBasis,
    n_panels: usize,
    x: Vec<f64>,
    y0: Vec<f64>,
    /// Row-major `(N + 1, d)`.
    node_bumps: Vec<f64>,
}

impl ShapeParameterization {
    pub fn new(base: &AirfoilShape, basis: BumpBasis, n_panels: usize) -> Result<Self> {
        let (x, y0) = super::panel_nodes(base, n_panels)?;
        let base = base.resample(n_panels / 2 + 1)?;
        let m = n_panels / 2 + 1;
        let k = basis.len();
        let d = basis.dim();
        let mut node_bumps = vec![0.0; x.len() * d];
        for (i, &xi) in x.iter().enumerate() {
            // lower surface first (trailing edge to leading edge), then upper
            let offset = if i < m { k } else { 0 };
            for n in 0..k {
                node_bumps[i * d + offset + n] = basis.value(n, xi);
            }
        }
        Ok(Self {
            base,
            basis,
            n_panels,
            x,
            y0,
            node_bumps,
        })
    }

    pub fn base(&self) -> &AirfoilShape {
        &self.base
    }

    pub fn basis(&self) -> &BumpBasis {
        &self.basis
    }

    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    pub fn n_panels(&self) -> usize {
        self.n_panels
    }

    pub fn shape(&self, delta: &[f64]) -> Result<Deformed> {
        deform(&self.base, &HicksHenneVector::new(delta.to_vec())?, &self.basis)
    }

    pub fn nodes(&self, delta: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let shape = self.shape(delta)?.shape;
        let s = (shape.lower(), shape.upper());
        Ok(loop_nodes(s.0.x(), s.0.y(), s.1.x(), s.1.y()))
    }

    pub fn system(&self, delta: &[f64], conditions: FlowConditions) -> Result<PanelSystem> {
        let (x, y) = self.nodes(delta)?;
        PanelSystem::from_nodes(&x, &y, conditions)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdjointOptions {
    /// Stop when `||lambda_{k+1} - lambda_k||_inf` drops below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Relaxation; `None` uses the primal default.
    pub omega: Option<f64>,
}

impl Default for AdjointOptions {
    fn default() -> Self {
        Self {
            tol: 1e-11,
            max_iter: 50_000,
            omega: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdjointState {
    pub lambda: Vec<f64>,
    pub iterations: usize,
    pub omega: f64,
    pub history: Vec<f64>,
    /// `dJ/du` at the primal state.
    pub dj_du: Vec<f64>,
}

impl AdjointState {
    /// `lambda` from the equivalent transposed system `omega A^T P lambda = dJ/du`.
    pub fn direct(system: &PanelSystem, dj_du: &[f64], omega: f64) -> Result<Vec<f64>> {
        let w = system.solve_transposed(dj_du)?;
        let diag = system.matrix().diagonal();
        Ok(w.iter().zip(diag.iter()).map(|(w, d)| w * d / omega).collect())
    }
}

/// Gradient of `spec` with respect to the design vector at the converged
/// state `u` of `system`, which must have been assembled from
/// `param.system(delta, ..)`.
pub fn adjoint_gradient(
    spec: &ObjectiveSpec,
    param: &ShapeParameterization,
    delta: &[f64],
    system: &PanelSystem,
    u: &[f64],
    options: AdjointOptions,
) -> Result<(Vec<f64>, AdjointState)> {
    let d = param.dim();
    if delta.len() != d {
        return invalid(format!("design vector has length {}, expected {d}", delta.len()));
    }
    if u.len() != system.n_panels() + 1 || system.n_panels() != param.n_panels {
        return invalid("state and parameterization do not match the panel system");
    }
    spec.validate(system.n_panels())?;
    let cond = system.conditions();
    let nn = param.x.len();

    let mut tape = Tape::new();
    let dv = tape.vector_variable(delta);
    let bumps = tape.constant(Shape::Matrix(nn, d), param.node_bumps.clone())?;
    let y0 = tape.vector_constant(&param.y0);
    let x = tape.vector_constant(&param.x);
    let dy = tape.matvec(bumps, dv)?;
    let y = tape.add(y0, dy)?;
    let panels = record_panels(&mut tape, x, y, &cond)?;
    let uv = tape.vector_variable(u);
    let f = record_functionals(&mut tape, &panels, uv, &cond)?;
    let j = spec.record(&mut tape, &f, panels.ds)?;

    let grads = tape.backward(j, None)?;
    let dj_du = grads.wrt(uv);
    let explicit = grads.wrt(dv);

    let omega = options.omega.unwrap_or_else(|| default_relaxation(system));
    let (lambda, iterations, history) = adjoint_fixed_point(system, &dj_du, omega, options)?;

    let au = tape.matvec(panels.a, uv)?;
    let r = tape.sub(au, panels.b)?;
    let p = system.preconditioner();
    let seed: Vec<f64> = lambda.iter().zip(&p).map(|(l, p)| l * p).collect();
    let rg = tape.backward(r, Some(&seed))?;
    let through_state = rg.wrt(dv);

    let grad = explicit
        .iter()
        .zip(&through_state)
        .map(|(e, s)| e - omega * s)
        .collect();
    Ok((
        grad,
        AdjointState {
            lambda,
            iterations,
            omega,
            history,
            dj_du,
        },
    ))
}

fn adjoint_fixed_point(
    system: &PanelSystem,
    g: &[f64],
    omega: f64,
    options: AdjointOptions,
) -> Result<(Vec<f64>, usize, Vec<f64>)> {
    let at = system.matrix().transpose();
    let p = system.preconditioner();
    let g = DVector::from_column_slice(g);
    let mut lambda = g.clone();
    let mut history = Vec::new();
    let mut guard = StallGuard::new();
    for it in 1..=options.max_iter {
        let pl = DVector::from_iterator(p.len(), lambda.iter().zip(&p).map(|(l, p)| l * p));
        let next = &g + &lambda - omega * (&at * pl);
        let step = (&next - &lambda).amax();
        lambda = next;
        history.push(step);
        if step < options.tol {
            return Ok((lambda.as_slice().to_vec(), it, history));
        }
        if guard.stalled(step) {
            break;
        }
    }
    Err(Error::NonConvergence {
        what: "adjoint fixed-point iteration",
        iterations: history.len(),
        last_residual: history.last().copied().unwrap_or(f64::NAN),
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::objective;
    use crate::geometry::naca4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(code: &str, n: usize) -> ShapeParameterization {
        let s = naca4(code, 200).unwrap();
        ShapeParameterization::new(&s, BumpBasis::new(40).unwrap(), n).unwrap()
    }

    fn functional(param: &ShapeParameterization, spec: &ObjectiveSpec, delta: &[f64], cond: FlowConditions) -> f64 {
        let sys = param.system(delta, cond).unwrap();
        let u = sys.solve_direct().unwrap();
        objective(spec, &sys, &u).unwrap()
    }

    fn target_for(param: &ShapeParameterization, cond: FlowConditions) -> ObjectiveSpec {
        let other = setup("2412", param.n_panels());
        let sys = other.system(&vec![0.0; 40], cond).unwrap();
        ObjectiveSpec::TargetCp {
            target: sys.cp(&sys.solve_direct().unwrap()),
        }
    }

    #[test]
    fn zero_delta_reproduces_base_nodes() {
        let param = setup("0012", 80);
        let s = naca4("0012", 200).unwrap();
        let (x, y) = crate::flow::panel_nodes(&s, 80).unwrap();
        let (x2, y2) = param.nodes(&vec![0.0; 40]).unwrap();
        assert_eq!(x, x2);
        for (a, b) in y.iter().zip(&y2) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn lambda_matches_direct_transposed_solve() {
        let param = setup("0012", 100);
        let cond = FlowConditions::from_degrees(2.0);
        let spec = target_for(&param, cond);
        let delta = vec![0.0; 40];
        let sys = param.system(&delta, cond).unwrap();
        let u = super::super::solve_fixed_point(&sys, None, 1e-12, 50_000).unwrap().u;
        let (_, st) = adjoint_gradient(&spec, &param, &delta, &sys, &u, AdjointOptions::default()).unwrap();
        let direct = AdjointState::direct(&sys, &st.dj_du, st.omega).unwrap();
        let diff = st
            .lambda
            .iter()
            .zip(&direct)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-8, "max diff {diff}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let param = setup("0012", 60);
        let cond = FlowConditions::from_degrees(2.0);
        let spec = target_for(&param, cond);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let delta: Vec<f64> = (0..40).map(|_| rng.gen_range(-1e-3..1e-3)).collect();
        let sys = param.system(&delta, cond).unwrap();
        let u = sys.solve_direct().unwrap();
        let (g, _) = adjoint_gradient(&spec, &param, &delta, &sys, &u, AdjointOptions::default()).unwrap();
        let h = 1e-6;
        for k in 0..40 {
            let mut p = delta.clone();
            p[k] += h;
            let mut m = delta.clone();
            m[k] -= h;
            let fd = (functional(&param, &spec, &p, cond) - functional(&param, &spec, &m, cond)) / (2.0 * h);
            let rel = (fd - g[k]).abs() / g[k].abs().max(1e-10);
            assert!(rel < 1e-5, "component {k}: adjoint {} fd {fd}", g[k]);
        }
    }

    #[test]
    fn lift_gradient_matches_directional_derivative() {
        let param = setup("2412", 80);
        let cond = FlowConditions::from_degrees(3.0);
        let delta = vec![0.0; 40];
        let sys = param.system(&delta, cond).unwrap();
        let u = sys.solve_direct().unwrap();
        let (g, _) = adjoint_gradient(&ObjectiveSpec::MaxCl, &param, &delta, &sys, &u, AdjointOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v: Vec<f64> = (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h = 1e-6;
        let at = |s: f64| {
            let d: Vec<f64> = v.iter().map(|vi| s * vi).collect();
            functional(&param, &ObjectiveSpec::MaxCl, &d, cond)
        };
        let fd = (at(h) - at(-h)) / (2.0 * h);
        let dot: f64 = g.iter().zip(&v).map(|(a, b)| a * b).sum();
        assert!((fd - dot).abs() / dot.abs() < 1e-5, "{fd} vs {dot}");
    }

    #[test]
    fn symmetric_moment_gradient_pairs_mirrored_bumps() {
        let param = setup("0012", 80);
        let cond = FlowConditions::new(0.0);
        let delta = vec![0.0; 40];
        let sys = param.system(&delta, cond).unwrap();
        let u = sys.solve_direct().unwrap();
        let spec = ObjectiveSpec::CmMagnitude;
        let (g, _) = adjoint_gradient(&spec, &param, &delta, &sys, &u, AdjointOptions::default()).unwrap();
        for k in 0..20 {
            assert!((g[k] + g[20 + k]).abs() < 1e-8, "pair {k}: {} {}", g[k], g[20 + k]);
        }
    }

    #[test]
    fn adjoint_non_convergence_carries_history() {
        let param = setup("0012", 60);
        let cond = FlowConditions::from_degrees(2.0);
        let sys = param.system(&vec![0.0; 40], cond).unwrap();
        let u = sys.solve_direct().unwrap();
        let opts = AdjointOptions {
            omega: Some(0.0),
            ..AdjointOptions::default()
        };
        match adjoint_gradient(&ObjectiveSpec::MaxCl, &param, &vec![0.0; 40], &sys, &u, opts) {
            Err(Error::NonConvergence { history, .. }) => assert!(!history.is_empty()),
            other => panic!("unexpected {other:?}"),
        }
    }
}
