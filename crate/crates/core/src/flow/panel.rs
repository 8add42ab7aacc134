//! Hess–Smith panel method: constant-strength sources per panel plus one
//! uniform vortex strength, flow tangency at panel midpoints and a Kutta row
//! equating the tangential velocities of the two trailing-edge panels.
//!
//! Nodes run clockwise: trailing edge, lower surface, leading edge, upper
//! surface, trailing edge. Unknowns are the `N` source strengths followed by
//! the vortex strength.
//!
//! The assembly is written once against the autodiff tape. Plain evaluations
//! record it with constant inputs; adjoint evaluations mark the node ordinates
//! and the state as variables and pull cotangents back through the same graph.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use super::FlowConditions;
use crate::autodiff::{Shape, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::geometry::AirfoilShape;

/// Panel midpoint quantities and system blocks as recorded on a tape.
pub(crate) struct TapedPanels {
    /// `(N+1, N+1)` influence matrix.
    pub a: Var,
    pub b: Var,
    /// `(N, N+1)` map from unknowns to tangential velocity.
    pub vt_matrix: Var,
    /// Freestream part of the tangential velocity.
    pub vt_free: Var,
    pub dx: Var,
    pub dy: Var,
    pub ds: Var,
    pub xm: Var,
    pub ym: Var,
}

/// Record the panel system for nodes `x`, `y` (each length `N + 1`).
pub(crate) fn record_panels(tape: &mut Tape, x: Var, y: Var, cond: &FlowConditions) -> Result<TapedPanels> {
    let n = x.len() - 1;
    let two_pi = 2.0 * PI;
    let v = Shape::Vector(n);

    let starts: Vec<usize> = (0..n).collect();
    let ends: Vec<usize> = (1..=n).collect();
    let xs = tape.gather(x, &starts, v)?;
    let xe = tape.gather(x, &ends, v)?;
    let ys = tape.gather(y, &starts, v)?;
    let ye = tape.gather(y, &ends, v)?;
    let dx = tape.sub(xe, xs)?;
    let dy = tape.sub(ye, ys)?;
    let theta = tape.atan2(dy, dx)?;
    let dx2 = tape.mul(dx, dx)?;
    let dy2 = tape.mul(dy, dy)?;
    let ds2 = tape.add(dx2, dy2)?;
    let ds = tape.power(ds2, 0.5)?;
    let xm = tape.add(xs, xe)?;
    let xm = tape.scale(xm, 0.5)?;
    let ym = tape.add(ys, ye)?;
    let ym = tape.scale(ym, 0.5)?;

    // Off-diagonal (i, j) pairs, row-major with the diagonal skipped.
    let np = n * (n - 1);
    let mut pi_idx = Vec::with_capacity(np);
    let mut pj_idx = Vec::with_capacity(np);
    let mut pjp_idx = Vec::with_capacity(np);
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            pi_idx.push(i);
            pj_idx.push(j);
            pjp_idx.push(j + 1);
        }
    }
    let pv = Shape::Vector(np);
    let xmi = tape.gather(xm, &pi_idx, pv)?;
    let ymi = tape.gather(ym, &pi_idx, pv)?;
    let xj = tape.gather(x, &pj_idx, pv)?;
    let xjp = tape.gather(x, &pjp_idx, pv)?;
    let yj = tape.gather(y, &pj_idx, pv)?;
    let yjp = tape.gather(y, &pjp_idx, pv)?;
    let dxj = tape.sub(xmi, xj)?;
    let dxjp = tape.sub(xmi, xjp)?;
    let dyj = tape.sub(ymi, yj)?;
    let dyjp = tape.sub(ymi, yjp)?;

    let t1 = tape.mul(dxjp, dxjp)?;
    let t2 = tape.mul(dyjp, dyjp)?;
    let r2jp = tape.add(t1, t2)?;
    let t1 = tape.mul(dxj, dxj)?;
    let t2 = tape.mul(dyj, dyj)?;
    let r2j = tape.add(t1, t2)?;
    let ratio = tape.div(r2jp, r2j)?;
    let flog = tape.log(ratio)?;
    let flog = tape.scale(flog, 0.5)?;

    let t1 = tape.mul(dyjp, dxj)?;
    let t2 = tape.mul(dxjp, dyj)?;
    let cross = tape.sub(t1, t2)?;
    let t1 = tape.mul(dxjp, dxj)?;
    let t2 = tape.mul(dyjp, dyj)?;
    let dot = tape.add(t1, t2)?;
    let ftan = tape.atan2(cross, dot)?;

    let thi = tape.gather(theta, &pi_idx, pv)?;
    let thj = tape.gather(theta, &pj_idx, pv)?;
    let dth = tape.sub(thi, thj)?;
    let c = tape.cos(dth)?;
    let s = tape.sin(dth)?;

    // Source influence on normal velocity (and vortex influence on tangential).
    let t1 = tape.mul(s, flog)?;
    let t2 = tape.mul(c, ftan)?;
    let p1 = tape.add(t1, t2)?;
    let p1 = tape.scale(p1, 1.0 / two_pi)?;
    // Vortex influence on normal velocity (minus source influence on tangential).
    let t1 = tape.mul(c, flog)?;
    let t2 = tape.mul(s, ftan)?;
    let p2 = tape.sub(t1, t2)?;
    let p2 = tape.scale(p2, 1.0 / two_pi)?;

    let ones = tape.constant(Shape::Vector(n - 1), vec![1.0; n - 1])?;
    let p1m = tape.reshape(p1, Shape::Matrix(n, n - 1))?;
    let p1_rows = tape.matvec(p1m, ones)?;
    let p2m = tape.reshape(p2, Shape::Matrix(n, n - 1))?;
    let p2_rows = tape.matvec(p2m, ones)?;
    let half = tape.constant(Shape::Vector(n), vec![0.5; n])?;
    let zero = tape.constant(Shape::Scalar, vec![0.0])?;

    let pair_pos = |i: usize, j: usize| i * (n - 1) + if j < i { j } else { j - 1 };

    // Tangential-velocity matrix, sources: -p2 off the diagonal, 0 on it;
    // vortex column: row sums of p1 plus the self-induced 1/2.
    let neg_p2 = tape.scale(p2, -1.0)?;
    let vt_vortex = tape.add(p1_rows, half)?;
    let vt_src = tape.concat(&[neg_p2, vt_vortex, zero])?;
    let mut idx = Vec::with_capacity(n * (n + 1));
    for i in 0..n {
        for j in 0..=n {
            idx.push(if j == n {
                np + i
            } else if j == i {
                np + n
            } else {
                pair_pos(i, j)
            });
        }
    }
    let vt_matrix = tape.gather(vt_src, &idx, Shape::Matrix(n, n + 1))?;

    // Tangency rows: p1 off the diagonal, 1/2 on it, vortex column from p2.
    let a_src = tape.concat(&[p1, p2_rows, half])?;
    idx.clear();
    for i in 0..n {
        for j in 0..=n {
            idx.push(if j == n {
                np + i
            } else if j == i {
                np + n + i
            } else {
                pair_pos(i, j)
            });
        }
    }
    let tangency = tape.gather(a_src, &idx, Shape::Matrix(n, n + 1))?;
    let first = tape.slice(vt_matrix, 0, Shape::Vector(n + 1))?;
    let last = tape.slice(vt_matrix, (n - 1) * (n + 1), Shape::Vector(n + 1))?;
    let kutta = tape.add(first, last)?;
    let kutta = tape.reshape(kutta, Shape::Matrix(1, n + 1))?;
    let a = tape.concat(&[tangency, kutta])?;

    let alpha = tape.constant(Shape::Vector(n), vec![cond.alpha; n])?;
    let rel = tape.sub(theta, alpha)?;
    let sin_rel = tape.sin(rel)?;
    let cos_rel = tape.cos(rel)?;
    let b_tan = tape.scale(sin_rel, cond.v_inf)?;
    let vt_free = tape.scale(cos_rel, cond.v_inf)?;
    let te = tape.gather(vt_free, &[0, n - 1], Shape::Vector(2))?;
    let te = tape.sum(te)?;
    let b_kutta = tape.scale(te, -1.0)?;
    let b = tape.concat(&[b_tan, b_kutta])?;

    Ok(TapedPanels {
        a,
        b,
        vt_matrix,
        vt_free,
        dx,
        dy,
        ds,
        xm,
        ym,
    })
}

/// Pressure-based functionals recorded on the same tape as the panels.
pub(crate) struct TapedFunctionals {
    pub cp: Var,
    pub cl: Var,
    pub cm: Var,
}

pub(crate) fn record_functionals(
    tape: &mut Tape,
    panels: &TapedPanels,
    u: Var,
    cond: &FlowConditions,
) -> Result<TapedFunctionals> {
    let n = panels.dx.len();
    let vt = tape.matvec(panels.vt_matrix, u)?;
    let vt = tape.add(vt, panels.vt_free)?;
    let vt2 = tape.mul(vt, vt)?;
    let vt2 = tape.scale(vt2, 1.0 / (cond.v_inf * cond.v_inf))?;
    let ones = tape.constant(Shape::Vector(n), vec![1.0; n])?;
    let cp = tape.sub(ones, vt2)?;

    // Force per unit dynamic pressure: -Cp n ds with n ds = (-dy, dx).
    let lift_w = {
        let a = tape.scale(panels.dy, -cond.alpha.sin())?;
        let b = tape.scale(panels.dx, -cond.alpha.cos())?;
        tape.add(a, b)?
    };
    let cl = tape.mul(cp, lift_w)?;
    let cl = tape.sum(cl)?;

    // Nose-up moment about the quarter chord.
    let quarter = tape.constant(Shape::Vector(n), vec![0.25; n])?;
    let rx = tape.sub(panels.xm, quarter)?;
    let arm = {
        let a = tape.mul(rx, panels.dx)?;
        let b = tape.mul(panels.ym, panels.dy)?;
        tape.add(a, b)?
    };
    let cm = tape.mul(cp, arm)?;
    let cm = tape.sum(cm)?;
    Ok(TapedFunctionals { cp, cl, cm })
}

/// Assembled panel system with plain values.
#[derive(Clone, Debug)]
pub struct PanelSystem {
    conditions: FlowConditions,
    x_nodes: Vec<f64>,
    y_nodes: Vec<f64>,
    a: DMatrix<f64>,
    b: DVector<f64>,
    vt_matrix: DMatrix<f64>,
    vt_free: DVector<f64>,
    ds: Vec<f64>,
    xm: Vec<f64>,
    ym: Vec<f64>,
}

/// Closed-loop panel nodes from a shape resampled to `n_panels / 2 + 1`
/// cosine-spaced points per surface.
pub fn panel_nodes(shape: &AirfoilShape, n_panels: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n_panels < 40 || n_panels % 2 != 0 {
        return invalid(format!("panel count must be even and >= 40, got {n_panels}"));
    }
    let s = shape.resample(n_panels / 2 + 1)?;
    Ok(loop_nodes(s.lower().x(), s.lower().y(), s.upper().x(), s.upper().y()))
}

pub(crate) fn loop_nodes(lx: &[f64], ly: &[f64], ux: &[f64], uy: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut x: Vec<f64> = lx.iter().rev().copied().collect();
    let mut y: Vec<f64> = ly.iter().rev().copied().collect();
    x.extend(&ux[1..]);
    y.extend(&uy[1..]);
    (x, y)
}

fn check_panels(x: &[f64], y: &[f64]) -> Result<()> {
    for i in 0..x.len() - 1 {
        let len = (x[i + 1] - x[i]).hypot(y[i + 1] - y[i]);
        if !(len > 1e-12) {
            return Err(Error::Geometry {
                panel: i,
                message: format!("panel length {len:e}"),
            });
        }
    }
    Ok(())
}

/// Assemble the panel system for `shape` at `n_panels` panels.
pub fn assemble(shape: &AirfoilShape, n_panels: usize, conditions: FlowConditions) -> Result<PanelSystem> {
    let (x, y) = panel_nodes(shape, n_panels)?;
    PanelSystem::from_nodes(&x, &y, conditions)
}

impl PanelSystem {
    pub fn from_nodes(x: &[f64], y: &[f64], conditions: FlowConditions) -> Result<Self> {
        conditions.validate()?;
        if x.len() != y.len() || x.len() < 4 {
            return invalid("panel nodes must be two equal-length lists of at least 4 points");
        }
        check_panels(x, y)?;
        let n = x.len() - 1;
        let mut tape = Tape::new();
        let xv = tape.vector_constant(x);
        let yv = tape.vector_constant(y);
        let p = record_panels(&mut tape, xv, yv, &conditions)?;
        let a = DMatrix::from_row_slice(n + 1, n + 1, tape.value(p.a));
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite influence coefficient".into()));
        }
        Ok(Self {
            conditions,
            x_nodes: x.to_vec(),
            y_nodes: y.to_vec(),
            a,
            b: DVector::from_column_slice(tape.value(p.b)),
            vt_matrix: DMatrix::from_row_slice(n, n + 1, tape.value(p.vt_matrix)),
            vt_free: DVector::from_column_slice(tape.value(p.vt_free)),
            ds: tape.value(p.ds).to_vec(),
            xm: tape.value(p.xm).to_vec(),
            ym: tape.value(p.ym).to_vec(),
        })
    }

    pub fn n_panels(&self) -> usize {
        self.ds.len()
    }

    pub fn conditions(&self) -> FlowConditions {
        self.conditions
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn rhs(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn nodes(&self) -> (&[f64], &[f64]) {
        (&self.x_nodes, &self.y_nodes)
    }

    pub fn panel_lengths(&self) -> &[f64] {
        &self.ds
    }

    pub fn midpoints(&self) -> (&[f64], &[f64]) {
        (&self.xm, &self.ym)
    }

    pub fn residual(&self, u: &[f64]) -> f64 {
        let u = DVector::from_column_slice(u);
        (&self.a * u - &self.b).amax()
    }

    /// Dense LU solve, used to cross-check the fixed-point iteration.
    pub fn solve_direct(&self) -> Result<Vec<f64>> {
        if self.b.amax() < ZERO_RHS {
            return Ok(vec![0.0; self.b.len()]);
        }
        let lu = self.a.clone().lu();
        let u = lu
            .solve(&self.b)
            .ok_or_else(|| Error::Numerical("singular panel matrix".into()))?;
        Ok(u.as_slice().to_vec())
    }

    /// Solve `A^T w = g` directly.
    pub fn solve_transposed(&self, g: &[f64]) -> Result<Vec<f64>> {
        let lu = self.a.transpose().lu();
        let w = lu
            .solve(&DVector::from_column_slice(g))
            .ok_or_else(|| Error::Numerical("singular panel matrix".into()))?;
        Ok(w.as_slice().to_vec())
    }

    /// Inverse diagonal of the influence matrix.
    pub fn preconditioner(&self) -> Vec<f64> {
        self.a.diagonal().iter().map(|d| 1.0 / d).collect()
    }

    /// Power-iteration estimate of the spectral radius of `P A`.
    pub fn spectral_radius_estimate(&self, iterations: usize) -> f64 {
        let p = self.preconditioner();
        let n = p.len();
        let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
        let mut rho = 0.0;
        for _ in 0..iterations {
            let mut w = &self.a * &v;
            for (wi, pi) in w.iter_mut().zip(&p) {
                *wi *= pi;
            }
            rho = w.norm();
            if rho == 0.0 {
                break;
            }
            v = w / rho;
        }
        rho
    }

    /// Surface pressure coefficient per panel.
    pub fn cp(&self, u: &[f64]) -> Vec<f64> {
        let vt = &self.vt_matrix * DVector::from_column_slice(u) + &self.vt_free;
        let v2 = self.conditions.v_inf * self.conditions.v_inf;
        vt.iter().map(|v| 1.0 - v * v / v2).collect()
    }

    pub fn coefficients(&self, u: &[f64]) -> Result<Coefficients> {
        let mut tape = Tape::new();
        let xv = tape.vector_constant(&self.x_nodes);
        let yv = tape.vector_constant(&self.y_nodes);
        let p = record_panels(&mut tape, xv, yv, &self.conditions)?;
        let uv = tape.vector_constant(u);
        let f = record_functionals(&mut tape, &p, uv, &self.conditions)?;
        let perimeter: f64 = self.ds.iter().sum();
        let gamma = u[u.len() - 1];
        let chord = 1.0;
        Ok(Coefficients {
            cl: tape.scalar(f.cl),
            cm: tape.scalar(f.cm),
            cl_kutta_joukowski: 2.0 * gamma * perimeter / (self.conditions.v_inf * chord),
            cp: tape.value(f.cp).to_vec(),
        })
    }
}

/// Right-hand sides below this are treated as an undisturbed stream.
pub(crate) const ZERO_RHS: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct Coefficients {
    pub cl: f64,
    /// Quarter-chord pitching moment, nose-up positive.
    pub cm: f64,
    /// `2 Gamma / (V c)` from the total circulation.
    pub cl_kutta_joukowski: f64,
    pub cp: Vec<f64>,
}
