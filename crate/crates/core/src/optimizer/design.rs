//! Airfoil design problems in bump space or in the latent space of a trained
//! sampler.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::solver::{self, ConstrainedProblem, Gradients, SolveResult, SolverConfig, Termination, Values};
use crate::denoiser::NoisePredictor;
use crate::diffusion::{generate, sampler_vjps, NoiseSchedule};
use crate::error::{invalid, Error, Result};
use crate::flow::{
    adjoint_gradient, objective, solve_fixed_point, AdjointOptions, FlowConditions, ObjectiveSpec, PanelSystem,
    ShapeParameterization,
};
use crate::geometry::{NormalizationBox, ThicknessModel};

/// Primal flow tolerance on `||A u - b||_inf` used for design evaluations.
pub const FLOW_TOL: f64 = 1e-12;
const FLOW_MAX_ITER: usize = 20_000;

/// Encoding residuals above this RMS are flagged.
pub const ENCODE_WARN_RMS: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Bump coefficients directly.
    #[serde(alias = "hh_space")]
    Hh,
    /// Latent vector of the sampler, decoded through `denormalize(G(z))`.
    #[serde(alias = "latent_space")]
    Latent,
    /// Bump coefficients with the bumps nearest the chord ends frozen.
    #[serde(alias = "hh-scaled")]
    HhScaled,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Hh => "hh",
            Self::Latent => "latent",
            Self::HhScaled => "hh_scaled",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hh" | "hh_space" => Ok(Self::Hh),
            "latent" | "latent_space" => Ok(Self::Latent),
            "hh-scaled" | "hh_scaled" => Ok(Self::HhScaled),
            _ => invalid(format!("unknown mode {s:?} (expected hh, latent or hh-scaled)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    /// Pressure-integrated lift coefficient.
    Cl,
    /// Maximum thickness over chord.
    #[serde(rename = "t_c")]
    ThicknessRatio,
}

/// `quantity >= bound`, stored as `c = bound - quantity <= 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Constraint {
    pub quantity: Quantity,
    pub bound: f64,
}

/// Components whose bump peaks lie within `fraction` of either chord end, per
/// surface. `true` means frozen.
pub fn scaled_mask(peaks: &[f64], fraction: f64) -> Result<Vec<bool>> {
    if !(0.0..0.5).contains(&fraction) {
        return invalid(format!("frozen fraction must lie in [0, 0.5), got {fraction}"));
    }
    let one: Vec<bool> = peaks
        .iter()
        .map(|&p| fraction > 0.0 && (p <= fraction || p >= 1.0 - fraction))
        .collect();
    Ok([one.clone(), one].concat())
}

/// `max_i max(0, (bound_i - achieved_i) / bound_i)`.
pub fn epsilon_rel(constraints: &[Constraint], achieved: &[f64]) -> Result<f64> {
    let c: Vec<f64> = constraints.iter().zip(achieved).map(|(k, a)| k.bound - a).collect();
    let s: Vec<f64> = constraints.iter().map(|k| k.bound).collect();
    if achieved.len() != constraints.len() {
        return invalid("one achieved value is needed per constraint");
    }
    solver::relative_violation(&c, &s)
}

/// Trained sampler plus everything needed to map a latent to bump space.
pub struct Decoder {
    pub model: Box<dyn NoisePredictor + Send + Sync>,
    pub schedule: NoiseSchedule,
    /// Strided DDIM timesteps, descending.
    pub steps: Vec<usize>,
    pub normalization: NormalizationBox,
}

impl Decoder {
    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    /// `G(z)` in normalized coordinates.
    pub fn sample(&self, z: &[f64]) -> Result<Vec<f64>> {
        generate(self.model.as_ref(), z, &self.schedule, Some(&self.steps))
    }

    /// `denormalize(G(z))`.
    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.normalization.denormalize(&self.sample(z)?))
    }

    /// Pull bump-space cotangents back to the latent, one sampler recording.
    pub fn pullback(&self, z: &[f64], delta_bars: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let w = self.normalization.widths();
        let xbars: Vec<Vec<f64>> = delta_bars
            .iter()
            .map(|g| g.iter().zip(&w).map(|(g, w)| g * w).collect())
            .collect();
        let refs: Vec<&[f64]> = xbars.iter().map(Vec::as_slice).collect();
        Ok(sampler_vjps(self.model.as_ref(), z, &self.schedule, &self.steps, &refs)?.1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub objective: ObjectiveSpec,
    #[serde(default)]
    pub constraints: Vec<Constraint>,
    pub conditions: FlowConditions,
    pub mode: Mode,
    /// `|delta_i| <= hh_bound` in the bump modes.
    #[serde(default = "default_hh_bound")]
    pub hh_bound: f64,
    /// `|z_i| <= latent_bound` in latent mode.
    #[serde(default = "default_latent_bound")]
    pub latent_bound: f64,
    #[serde(default = "default_frozen_fraction")]
    pub frozen_fraction: f64,
}

fn default_hh_bound() -> f64 {
    0.1
}

fn default_latent_bound() -> f64 {
    3.0
}

fn default_frozen_fraction() -> f64 {
    0.05
}

/// Values of one design evaluation. A failed flow solve yields
/// `objective = +inf` with `flow_failed` set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub delta: Vec<f64>,
    pub objective: f64,
    pub cl: f64,
    pub t_c: f64,
    /// `bound - quantity` per constraint.
    pub constraints: Vec<f64>,
    pub flow_failed: bool,
    pub failure: Option<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    /// Design evaluations (`#J`), one primal solve each.
    pub objective_evaluations: usize,
    /// Gradient evaluations (`#grad J`), covering the objective and all constraints.
    pub gradient_evaluations: usize,
    pub primal_solves: usize,
    pub adjoint_solves: usize,
}

struct Cached {
    v: Vec<f64>,
    delta: Vec<f64>,
    system: PanelSystem,
    u: Vec<f64>,
}

pub struct DesignProblem {
    spec: ProblemSpec,
    param: ShapeParameterization,
    thickness: ThicknessModel,
    decoder: Option<Decoder>,
    frozen: Vec<bool>,
    pinned: Option<Vec<f64>>,
    counters: Counters,
    cache: Option<Cached>,
}

fn flow_failure(e: &Error) -> bool {
    matches!(e, Error::NonConvergence { .. } | Error::Geometry { .. } | Error::Numerical(_))
}

impl DesignProblem {
    pub fn new(spec: ProblemSpec, param: ShapeParameterization, decoder: Option<Decoder>) -> Result<Self> {
        spec.conditions.validate()?;
        spec.objective.validate(param.n_panels())?;
        let d = param.dim();
        match (spec.mode, &decoder) {
            (Mode::Latent, None) => return invalid("latent mode needs a trained sampler"),
            (Mode::Latent, Some(dec)) if dec.dim() != d || dec.normalization.dim() != d => {
                return invalid(format!("sampler dimension {} does not match design dimension {d}", dec.dim()))
            }
            _ => {}
        }
        for c in &spec.constraints {
            if c.bound == 0.0 || !c.bound.is_finite() {
                return invalid(format!("constraint bound must be finite and nonzero, got {}", c.bound));
            }
        }
        if !(spec.hh_bound > 0.0 && spec.latent_bound > 0.0) {
            return invalid("box bounds must be positive");
        }
        let frozen = if spec.mode == Mode::HhScaled {
            scaled_mask(param.basis().peaks(), spec.frozen_fraction)?
        } else {
            vec![false; d]
        };
        let thickness = ThicknessModel::new(param.base(), param.basis())?;
        Ok(Self {
            spec,
            param,
            thickness,
            decoder,
            frozen,
            pinned: None,
            counters: Counters::default(),
            cache: None,
        })
    }

    pub fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    pub fn mode(&self) -> Mode {
        self.spec.mode
    }

    pub fn parameterization(&self) -> &ShapeParameterization {
        &self.param
    }

    pub fn decoder(&self) -> Option<&Decoder> {
        self.decoder.as_ref()
    }

    /// Hand the sampler back, e.g. to reuse it for another problem.
    pub fn into_decoder(self) -> Option<Decoder> {
        self.decoder
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn frozen(&self) -> &[bool] {
        &self.frozen
    }

    /// Bump coefficients for a decision vector.
    pub fn delta(&self, v: &[f64]) -> Result<Vec<f64>> {
        let d = self.param.dim();
        if v.len() != d {
            return invalid(format!("decision vector has length {}, expected {d}", v.len()));
        }
        match (self.spec.mode, &self.decoder) {
            (Mode::Latent, Some(dec)) => dec.decode(v),
            _ => Ok(v.to_vec()),
        }
    }

    /// Objective, lift, thickness and constraints at `v`; one primal solve.
    pub fn evaluate(&mut self, v: &[f64]) -> Result<Evaluation> {
        let delta = self.delta(v)?;
        self.counters.objective_evaluations += 1;
        let t_c = self.thickness.value(&delta)?;
        let fail = |delta: Vec<f64>, e: &Error| Evaluation {
            delta,
            objective: f64::INFINITY,
            cl: f64::NAN,
            t_c,
            constraints: vec![f64::INFINITY; self.spec.constraints.len()],
            flow_failed: true,
            failure: Some(e.to_string()),
        };
        let system = match self.param.system(&delta, self.spec.conditions) {
            Ok(s) => s,
            Err(e) if flow_failure(&e) => return Ok(fail(delta, &e)),
            Err(e) => return Err(e),
        };
        self.counters.primal_solves += 1;
        let u = match solve_fixed_point(&system, None, FLOW_TOL, FLOW_MAX_ITER) {
            Ok(s) => s.u,
            Err(e) if flow_failure(&e) => return Ok(fail(delta, &e)),
            Err(e) => return Err(e),
        };
        let j = objective(&self.spec.objective, &system, &u)?;
        let cl = system.coefficients(&u)?.cl;
        let constraints = self
            .spec
            .constraints
            .iter()
            .map(|c| {
                c.bound
                    - match c.quantity {
                        Quantity::Cl => cl,
                        Quantity::ThicknessRatio => t_c,
                    }
            })
            .collect();
        self.cache = Some(Cached {
            v: v.to_vec(),
            delta: delta.clone(),
            system,
            u,
        });
        Ok(Evaluation {
            delta,
            objective: j,
            cl,
            t_c,
            constraints,
            flow_failed: false,
            failure: None,
        })
    }

    /// Gradients of the objective and every constraint with respect to the
    /// decision vector: one adjoint solve per flow functional, then (latent
    /// mode) one sampler pullback for all of them.
    pub fn gradient(&mut self, v: &[f64]) -> Result<Gradients> {
        if self.cache.as_ref().map_or(true, |c| c.v != v) {
            let e = self.evaluate(v)?;
            if e.flow_failed {
                return Err(Error::Numerical(format!(
                    "gradient requested at a point whose flow solve failed: {}",
                    e.failure.unwrap_or_default()
                )));
            }
        }
        let cache = self.cache.as_ref().expect("evaluated above");
        self.counters.gradient_evaluations += 1;
        let opts = AdjointOptions::default();
        let adjoint = |spec: &ObjectiveSpec, counters: &mut Counters| {
            counters.adjoint_solves += 1;
            adjoint_gradient(spec, &self.param, &cache.delta, &cache.system, &cache.u, opts).map(|r| r.0)
        };
        let mut grads = vec![adjoint(&self.spec.objective, &mut self.counters)?];
        let mut lift = None;
        for c in &self.spec.constraints {
            let g = match c.quantity {
                // d(bound - Cl) = d(-Cl), the gradient of the lift objective
                Quantity::Cl => match &lift {
                    Some(g) => Clone::clone(g),
                    None => {
                        let g = adjoint(&ObjectiveSpec::MaxCl, &mut self.counters)?;
                        lift = Some(g.clone());
                        g
                    }
                },
                Quantity::ThicknessRatio => {
                    let (_, g) = self.thickness.value_and_gradient(&cache.delta)?;
                    g.into_iter().map(|x| -x).collect()
                }
            };
            grads.push(g);
        }
        if let (Mode::Latent, Some(dec)) = (self.spec.mode, &self.decoder) {
            grads = dec.pullback(v, &grads)?;
        }
        for g in &mut grads {
            for (x, f) in g.iter_mut().zip(&self.frozen) {
                if *f {
                    *x = 0.0;
                }
            }
        }
        let objective = grads.remove(0);
        Ok(Gradients {
            objective,
            constraints: grads,
        })
    }

    /// Pin frozen components to `v0` and run the solver.
    pub fn solve(&mut self, v0: &[f64], config: &SolverConfig) -> Result<DesignResult> {
        if v0.len() != self.param.dim() {
            return invalid(format!("initial vector has length {}, expected {}", v0.len(), self.param.dim()));
        }
        self.pinned = Some(v0.to_vec());
        let before = self.counters;
        let r = solver::solve(self, v0, config);
        self.pinned = None;
        let r = r?;
        let final_eval = self.evaluate(&r.v)?;
        // the confirming evaluation above is bookkeeping, not an optimizer call
        self.counters.objective_evaluations -= 1;
        self.counters.primal_solves -= 1;
        let achieved: Vec<f64> = self
            .spec
            .constraints
            .iter()
            .map(|c| match c.quantity {
                Quantity::Cl => final_eval.cl,
                Quantity::ThicknessRatio => final_eval.t_c,
            })
            .collect();
        let eps_rel = epsilon_rel(&self.spec.constraints, &achieved)?;
        let shape = self.param.shape(&final_eval.delta)?;
        let counters = Counters {
            objective_evaluations: self.counters.objective_evaluations - before.objective_evaluations,
            gradient_evaluations: self.counters.gradient_evaluations - before.gradient_evaluations,
            primal_solves: self.counters.primal_solves - before.primal_solves,
            adjoint_solves: self.counters.adjoint_solves - before.adjoint_solves,
        };
        Ok(DesignResult {
            mode: self.spec.mode,
            decision: r.v.clone(),
            delta: final_eval.delta.clone(),
            coordinates: shape.shape.selig_loop(),
            self_intersecting: shape.self_intersecting,
            objective: final_eval.objective,
            cl: final_eval.cl,
            t_c: final_eval.t_c,
            constraints: self.spec.constraints.clone(),
            eps_rel,
            objective_history: r.log.iter().map(|l| l.objective).collect(),
            counters,
            converged: r.converged,
            termination: r.termination,
            multipliers: r.multipliers.clone(),
            kkt_norm: r.kkt_norm,
            solver: r,
        })
    }
}

impl ConstrainedProblem for DesignProblem {
    fn dim(&self) -> usize {
        self.param.dim()
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.param.dim();
        let b = match self.spec.mode {
            Mode::Latent => self.spec.latent_bound,
            _ => self.spec.hh_bound,
        };
        let (mut lo, mut hi) = (vec![-b; d], vec![b; d]);
        if let Some(p) = &self.pinned {
            for i in (0..d).filter(|&i| self.frozen[i]) {
                lo[i] = p[i];
                hi[i] = p[i];
            }
        }
        (lo, hi)
    }

    fn constraint_scales(&self) -> Vec<f64> {
        self.spec.constraints.iter().map(|c| c.bound).collect()
    }

    fn evaluate(&mut self, v: &[f64]) -> Result<Option<Values>> {
        let e = DesignProblem::evaluate(self, v)?;
        Ok((!e.flow_failed).then(|| Values {
            objective: e.objective,
            constraints: e.constraints,
            diagnostics: vec![e.cl, e.t_c],
        }))
    }

    fn gradient(&mut self, v: &[f64]) -> Result<Gradients> {
        DesignProblem::gradient(self, v)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DesignResult {
    pub mode: Mode,
    /// `delta` in the bump modes, `z` in latent mode.
    pub decision: Vec<f64>,
    pub delta: Vec<f64>,
    /// Selig-ordered coordinates of the decoded shape.
    pub coordinates: Vec<(f64, f64)>,
    pub self_intersecting: bool,
    pub objective: f64,
    pub cl: f64,
    pub t_c: f64,
    pub constraints: Vec<Constraint>,
    pub eps_rel: f64,
    pub objective_history: Vec<f64>,
    pub counters: Counters,
    pub converged: bool,
    pub termination: Termination,
    pub multipliers: Vec<f64>,
    pub kkt_norm: f64,
    #[serde(skip)]
    pub solver: SolveResult,
}

impl DesignResult {
    /// `iterate,J,Cl,t_c,eps_rel,n_J,n_gradJ,step_norm`.
    pub fn log_csv(&self) -> String {
        let mut out = String::from("iterate,J,Cl,t_c,eps_rel,n_J,n_gradJ,step_norm\n");
        for r in &self.solver.log {
            out.push_str(&format!(
                "{},{:.12e},{:.12e},{:.12e},{:.6e},{},{},{:.6e}\n",
                r.iterate,
                r.objective,
                r.diagnostics[0],
                r.diagnostics[1],
                r.eps_rel,
                r.evaluations,
                r.gradients,
                r.step_norm
            ));
        }
        out
    }
}

/// Standard normal latent from a fixed seed.
pub fn gaussian_latent(d: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoding {
    pub z: Vec<f64>,
    /// RMS of `G(z) - target` in normalized coordinates.
    pub residual_rms: f64,
    pub warning: bool,
    pub iterations: usize,
}

/// Quasi-Newton steps used by [`encode`].
pub const ENCODE_STEPS: usize = 200;

/// Pseudo-inverse of the sampler: `z` minimizing `||G(z) - target||^2` in
/// normalized coordinates, started from `z0` and kept within `|z_i| <= bound`.
pub fn encode(decoder: &Decoder, target: &[f64], z0: &[f64], bound: f64) -> Result<Encoding> {
    let d = decoder.dim();
    if target.len() != d || z0.len() != d {
        return invalid(format!("target and start must have length {d}"));
    }
    let value = |z: &[f64]| -> Result<Option<f64>> {
        let x = decoder.sample(z)?;
        Ok(Some(x.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum()))
    };
    let gradient = |z: &[f64]| -> Result<Vec<f64>> {
        let x = decoder.sample(z)?;
        let r: Vec<f64> = x.iter().zip(target).map(|(a, b)| 2.0 * (a - b)).collect();
        Ok(sampler_vjps(decoder.model.as_ref(), z, &decoder.schedule, &decoder.steps, &[&r])?
            .1
            .remove(0))
    };
    let config = SolverConfig {
        max_gradients: ENCODE_STEPS,
        max_inner: ENCODE_STEPS,
        optimality_tol: 1e-10,
        ..SolverConfig::default()
    };
    let r = solver::minimize_box(value, gradient, z0, vec![-bound; d], vec![bound; d], &config)?;
    let residual_rms = (r.values.objective / d as f64).sqrt();
    Ok(Encoding {
        z: r.v,
        residual_rms,
        warning: residual_rms > ENCODE_WARN_RMS,
        iterations: r.gradients,
    })
}

pub fn summarize(result: &DesignResult) -> String {
    format!(
        "{}: J={:.6e} Cl={:.4} t/c={:.4} eps_rel={:.2e} #J={} #gradJ={} {}",
        result.mode,
        result.objective,
        result.cl,
        result.t_c,
        result.eps_rel,
        result.counters.objective_evaluations,
        result.counters.gradient_evaluations,
        if result.converged { "converged" } else { "not converged" }
    )
}
