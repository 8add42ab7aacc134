//! Central finite-difference checks of every gradient path: tape ops, the
//! flow adjoint, the sampler VJP and the full latent chain.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Shape, Tape, Var};
use crate::denoiser::NoisePredictor;
use crate::diffusion::{backprop_through_sampler, generate, NoiseSchedule};
use crate::error::Result;
use crate::flow::{adjoint_gradient, objective, AdjointOptions, FlowConditions, ObjectiveSpec, ShapeParameterization};
use crate::optimizer::DesignProblem;

pub const OP_TOL: f64 = 1e-5;
pub const ADJOINT_TOL: f64 = 1e-5;
pub const SAMPLER_TOL: f64 = 1e-4;
pub const CHAIN_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckRow {
    pub name: String,
    pub trials: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckRow {
    fn new(name: impl Into<String>, trials: usize, max_rel_err: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            trials,
            max_rel_err,
            tolerance,
            passed: max_rel_err < tolerance,
        }
    }
}

/// Plain-text table with one row per check.
pub fn table(rows: &[CheckRow]) -> String {
    let w = rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(5);
    let mut out = format!("{:<w$}  {:>6}  {:>12}  {:>9}  result\n", "check", "trials", "max rel err", "tolerance");
    for r in rows {
        out.push_str(&format!(
            "{:<w$}  {:>6}  {:>12.3e}  {:>9.0e}  {}\n",
            r.name,
            r.trials,
            r.max_rel_err,
            r.tolerance,
            if r.passed { "pass" } else { "FAIL" }
        ));
    }
    out
}

/// `||a - b||_inf / max(||b||_inf, floor)`.
fn rel_inf(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let num = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let den = b.iter().fold(0.0f64, |m, y| m.max(y.abs())).max(floor);
    num / den
}

type Builder = fn(&mut Tape, &[Var]) -> Result<Var>;

struct OpCase {
    name: &'static str,
    inputs: Vec<(Shape, Domain)>,
    build: Builder,
}

#[derive(Clone, Copy)]
enum Domain {
    Any,
    Positive,
    /// `|x| >= 0.5`.
    AwayFromZero,
}

fn draw(rng: &mut ChaCha8Rng, n: usize, dom: Domain) -> Vec<f64> {
    (0..n)
        .map(|_| match dom {
            Domain::Any => rng.gen_range(-1.5..1.5),
            Domain::Positive => rng.gen_range(0.3..2.0),
            Domain::AwayFromZero => {
                let v: f64 = rng.gen_range(0.5..1.5);
                if rng.gen::<bool>() {
                    v
                } else {
                    -v
                }
            }
        })
        .collect()
}

fn op_cases() -> Vec<OpCase> {
    use Domain::*;
    use Shape::{Matrix as M, Scalar as S, Vector as V};
    let v = |n| (V(n), Any);
    vec![
        OpCase { name: "add", inputs: vec![v(5), v(5)], build: |t, x| t.add(x[0], x[1]) },
        OpCase { name: "sub", inputs: vec![v(5), v(5)], build: |t, x| t.sub(x[0], x[1]) },
        OpCase { name: "mul", inputs: vec![v(5), v(5)], build: |t, x| t.mul(x[0], x[1]) },
        OpCase { name: "div", inputs: vec![v(5), (V(5), AwayFromZero)], build: |t, x| t.div(x[0], x[1]) },
        OpCase { name: "atan2", inputs: vec![(V(5), AwayFromZero), (V(5), AwayFromZero)], build: |t, x| t.atan2(x[0], x[1]) },
        OpCase { name: "scale", inputs: vec![v(5)], build: |t, x| t.scale(x[0], -1.7) },
        OpCase { name: "sin", inputs: vec![v(5)], build: |t, x| t.sin(x[0]) },
        OpCase { name: "cos", inputs: vec![v(5)], build: |t, x| t.cos(x[0]) },
        OpCase { name: "exp", inputs: vec![v(5)], build: |t, x| t.exp(x[0]) },
        OpCase { name: "log", inputs: vec![(V(5), Positive)], build: |t, x| t.log(x[0]) },
        OpCase { name: "power", inputs: vec![(V(5), Positive)], build: |t, x| t.power(x[0], 2.5) },
        OpCase { name: "tanh", inputs: vec![v(5)], build: |t, x| t.tanh(x[0]) },
        OpCase { name: "silu", inputs: vec![v(5)], build: |t, x| t.silu(x[0]) },
        OpCase { name: "sum", inputs: vec![(M(3, 4), Any)], build: |t, x| t.sum(x[0]) },
        OpCase { name: "mean", inputs: vec![(M(3, 4), Any)], build: |t, x| t.mean(x[0]) },
        OpCase { name: "matvec", inputs: vec![(M(3, 4), Any), v(4)], build: |t, x| t.matvec(x[0], x[1]) },
        OpCase { name: "matmul", inputs: vec![(M(3, 4), Any), (M(4, 2), Any)], build: |t, x| t.matmul(x[0], x[1]) },
        OpCase { name: "conv1d", inputs: vec![(M(2, 6), Any), (M(3, 6), Any)], build: |t, x| t.conv1d(x[0], x[1], 3) },
        OpCase { name: "concat", inputs: vec![(M(2, 3), Any), (M(1, 3), Any)], build: |t, x| t.concat(&[x[0], x[1]]) },
        OpCase { name: "slice", inputs: vec![v(7)], build: |t, x| t.slice(x[0], 2, V(3)) },
        OpCase { name: "broadcast_scalar", inputs: vec![(S, Any)], build: |t, x| t.broadcast(x[0], M(2, 3)) },
        OpCase { name: "broadcast_rows", inputs: vec![v(3)], build: |t, x| t.broadcast(x[0], M(3, 4)) },
        OpCase { name: "gather", inputs: vec![v(5)], build: |t, x| t.gather(x[0], &[4, 0, 0, 2, 3, 4], V(6)) },
        OpCase { name: "reshape", inputs: vec![(M(2, 3), Any)], build: |t, x| t.reshape(x[0], V(6)) },
    ]
}

/// Every tape op against central differences of `<w, op(inputs)>` for a random
/// cotangent `w`; `trials` random draws per op.
pub fn check_ops(trials: usize, seed: u64) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let mut rows = Vec::new();
    for case in op_cases() {
        let mut worst = 0.0f64;
        for _ in 0..trials {
            let values: Vec<Vec<f64>> = case.inputs.iter().map(|(s, d)| draw(&mut rng, s.len(), *d)).collect();
            let eval = |vals: &[Vec<f64>]| -> Result<(Tape, Vec<Var>, Var)> {
                let mut t = Tape::new();
                let vars = case
                    .inputs
                    .iter()
                    .zip(vals)
                    .map(|((s, _), v)| t.variable(*s, v.clone()))
                    .collect::<Result<Vec<_>>>()?;
                let out = (case.build)(&mut t, &vars)?;
                Ok((t, vars, out))
            };
            let (tape, vars, out) = eval(&values)?;
            let w: Vec<f64> = (0..out.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let grads = tape.backward(out, Some(&w))?;
            let pair = |vals: &[Vec<f64>]| -> Result<f64> {
                let (t, _, o) = eval(vals)?;
                Ok(t.value(o).iter().zip(&w).map(|(a, b)| a * b).sum())
            };
            for (i, var) in vars.iter().enumerate() {
                let ad = grads.wrt(*var);
                let mut fd = vec![0.0; ad.len()];
                for (k, f) in fd.iter_mut().enumerate() {
                    let mut p = values.clone();
                    p[i][k] += h;
                    let mut m = values.clone();
                    m[i][k] -= h;
                    *f = (pair(&p)? - pair(&m)?) / (2.0 * h);
                }
                worst = worst.max(rel_inf(&ad, &fd, 1e-8));
            }
        }
        rows.push(CheckRow::new(format!("op {}", case.name), trials, worst, OP_TOL));
    }
    Ok(rows)
}

/// Adjoint gradient of `spec` against central differences of the directly
/// solved functional, component by component.
pub fn check_flow_adjoint(
    param: &ShapeParameterization,
    spec: &ObjectiveSpec,
    conditions: FlowConditions,
    delta: &[f64],
) -> Result<CheckRow> {
    let system = param.system(delta, conditions)?;
    let u = system.solve_direct()?;
    let (g, _) = adjoint_gradient(spec, param, delta, &system, &u, AdjointOptions::default())?;
    let f = |d: &[f64]| -> Result<f64> {
        let s = param.system(d, conditions)?;
        objective(spec, &s, &s.solve_direct()?)
    };
    let h = 1e-6;
    let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut worst = 0.0f64;
    for k in 0..delta.len() {
        let mut p = delta.to_vec();
        p[k] += h;
        let mut m = delta.to_vec();
        m[k] -= h;
        let fd = (f(&p)? - f(&m)?) / (2.0 * h);
        worst = worst.max((fd - g[k]).abs() / fd.abs().max(1e-6 * scale).max(1e-14));
    }
    Ok(CheckRow::new("flow adjoint dJ/ddelta", delta.len(), worst, ADJOINT_TOL))
}

/// `backprop_through_sampler` against central differences of `xbar^T G(z)`
/// over every latent component, for `pairs` random `(z, xbar)`.
pub fn check_sampler_vjp<M: NoisePredictor + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    steps: &[usize],
    pairs: usize,
    seed: u64,
) -> Result<CheckRow> {
    let d = model.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let z: Vec<f64> = (0..d).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let xbar: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, zbar) = backprop_through_sampler(model, &z, schedule, steps, &xbar)?;
        let f = |z: &[f64]| -> Result<f64> {
            Ok(generate(model, z, schedule, Some(steps))?.iter().zip(&xbar).map(|(a, b)| a * b).sum())
        };
        let scale = zbar.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for k in 0..d {
            let mut p = z.clone();
            p[k] += h;
            let mut m = z.clone();
            m[k] -= h;
            let fd = (f(&p)? - f(&m)?) / (2.0 * h);
            worst = worst.max((fd - zbar[k]).abs() / fd.abs().max(1e-3 * scale));
        }
    }
    Ok(CheckRow::new(
        format!("sampler VJP ({} steps)", steps.len()),
        pairs,
        worst,
        SAMPLER_TOL,
    ))
}

/// Latent-mode objective gradient (flow adjoint then sampler pullback)
/// against central differences of `J(denormalize(G(z)))`.
pub fn check_latent_chain(problem: &mut DesignProblem, z: &[f64]) -> Result<CheckRow> {
    problem.evaluate(z)?;
    let g = problem.gradient(z)?.objective;
    let h = 1e-5;
    let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut worst = 0.0f64;
    for k in 0..z.len() {
        let mut p = z.to_vec();
        p[k] += h;
        let mut m = z.to_vec();
        m[k] -= h;
        let fd = (problem.evaluate(&p)?.objective - problem.evaluate(&m)?.objective) / (2.0 * h);
        worst = worst.max((fd - g[k]).abs() / fd.abs().max(1e-3 * scale));
    }
    Ok(CheckRow::new("latent chain dJ/dz", z.len(), worst, CHAIN_TOL))
}
