//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion with
//! its wall time against the budget. Failures are reported, not fatal; set
//! `ACCEPTANCE_STRICT=1` to turn any failure into a non-zero exit.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use latentfoil::dataset::{Corpus, NacaSweep};
use latentfoil::denoiser::{init_weights, DenoiserConfig, DenoiserWeights};
use latentfoil::diffusion::{
    ddim_step, forward_diffuse, generate, predicted_x0, strided_steps, train, NoiseSchedule, ScheduleSpec,
    TrainConfig, TrainOutcome,
};
use latentfoil::flow::{
    adjoint_gradient, assemble, objective, AdjointOptions, AdjointState, FlowConditions, ObjectiveSpec,
    ShapeParameterization,
};
use latentfoil::geometry::{
    deform, fit_hicks_henne, naca4, BumpBasis, HicksHenneVector, NormalizationBox, CORPUS_DAMPING, FIT_POINTS,
};
use latentfoil::gradcheck::{check_latent_chain, check_ops, check_sampler_vjp};
use latentfoil::manifold::{spectrum_sweep, DEFAULT_TAU};
use latentfoil::optimizer::{
    encode, gaussian_latent, solve, summarize, ConstrainedProblem, Constraint, Decoder, DesignProblem,
    DesignResult, Gradients, Mode, ProblemSpec, Quantity, SolverConfig, Values,
};
use latentfoil::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const D: usize = 40;
const PANELS: usize = 200;
const DESIGN_ALPHA: f64 = 2.31;
const FEASIBLE: f64 = 2e-3;

struct Line {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
    elapsed: Duration,
    budget: Duration,
}

impl Line {
    fn ok(&self) -> bool {
        self.passed && self.elapsed <= self.budget
    }

    fn print(&self) {
        let slow = if self.passed && !self.ok() { " (over budget)" } else { "" };
        println!(
            "[{}] {:>2} {:<28} {:>8.1} s / {:>5.0} s{}  {}",
            if self.ok() { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.elapsed.as_secs_f64(),
            self.budget.as_secs_f64(),
            slow,
            self.detail
        );
    }
}

fn run(id: usize, name: &'static str, budget_s: u64, f: impl FnOnce() -> Result<(bool, String)>) -> Line {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    let line = Line {
        id,
        name,
        passed,
        detail,
        elapsed: start.elapsed(),
        budget: Duration::from_secs(budget_s),
    };
    line.print();
    line
}

fn param(code: &str, n: usize) -> Result<ShapeParameterization> {
    ShapeParameterization::new(&naca4(code, FIT_POINTS)?, BumpBasis::new(D)?, n)
}

/// Target pressure: NACA 2412 at the design angle on the same panelling.
fn target_cp(n: usize) -> Result<ObjectiveSpec> {
    let sys = param("2412", n)?.system(&[0.0; D], FlowConditions::from_degrees(DESIGN_ALPHA))?;
    Ok(ObjectiveSpec::TargetCp {
        target: sys.coefficients(&sys.solve_direct()?)?.cp,
    })
}

fn autodiff_ops() -> Result<(bool, String)> {
    let rows = check_ops(100, 2024)?;
    let worst = rows.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)).expect("ops registered");
    let failed = rows.iter().filter(|r| !r.passed).count();
    Ok((
        failed == 0,
        format!("{} ops x 100 trials, worst {} {:.2e}, {failed} failed", rows.len(), worst.name, worst.max_rel_err),
    ))
}

fn hicks_henne_roundtrip() -> Result<(bool, String)> {
    let base = naca4("0012", FIT_POINTS)?;
    let basis = BumpBasis::new(D)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let truth: Vec<f64> = (0..D).map(|_| rng.gen_range(-0.01..0.01)).collect();
        let target = deform(&base, &HicksHenneVector::new(truth.clone())?, &basis)?.shape;
        let fit = fit_hicks_henne(&target, &base, &basis)?;
        for (a, b) in fit.delta.as_slice().iter().zip(&truth) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok((worst < 1e-6, format!("50 vectors, max-abs error {worst:.2e}")))
}

fn panel_solver() -> Result<(bool, String)> {
    let shape = naca4("0012", FIT_POINTS)?;
    let alpha = 5f64.to_radians();
    let sys = assemble(&shape, PANELS, FlowConditions::new(alpha))?;
    let c = sys.coefficients(&sys.solve_direct()?)?;
    let thin = 2.0 * std::f64::consts::PI * alpha.sin();
    let thin_err = (c.cl / thin - 1.0).abs();
    let kj_err = (c.cl / c.cl_kutta_joukowski - 1.0).abs();
    let sym = assemble(&shape, PANELS, FlowConditions::new(0.0))?;
    let cl0 = sym.coefficients(&sym.solve_direct()?)?.cl;
    let passed = thin_err < 0.10 && kj_err < 0.02 && cl0.abs() < 1e-6;
    Ok((
        passed,
        format!(
            "Cl {:.4} vs 2 pi sin a {thin:.4} ({:.2} %), vs KJ {:.2} %, |Cl(0)| {:.1e}",
            c.cl,
            100.0 * thin_err,
            100.0 * kj_err,
            cl0.abs()
        ),
    ))
}

fn adjoint_machinery() -> Result<(bool, String)> {
    let p = param("0012", PANELS)?;
    let spec = target_cp(PANELS)?;
    let cond = FlowConditions::from_degrees(DESIGN_ALPHA);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let delta: Vec<f64> = (0..D).map(|_| rng.gen_range(-1e-3..1e-3)).collect();
    let sys = p.system(&delta, cond)?;
    let u = sys.solve_direct()?;
    let (g, st) = adjoint_gradient(&spec, &p, &delta, &sys, &u, AdjointOptions::default())?;
    let direct = AdjointState::direct(&sys, &st.dj_du, st.omega)?;
    let lambda_diff = st.lambda.iter().zip(&direct).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let j = |d: &[f64]| -> Result<f64> {
        let s = p.system(d, cond)?;
        objective(&spec, &s, &s.solve_direct()?)
    };
    let h = 1e-6;
    let mut worst = 0.0f64;
    for k in 0..D {
        let mut a = delta.clone();
        a[k] += h;
        let mut b = delta.clone();
        b[k] -= h;
        let fd = (j(&a)? - j(&b)?) / (2.0 * h);
        worst = worst.max((fd - g[k]).abs() / g[k].abs().max(1e-10));
    }
    Ok((
        lambda_diff < 1e-8 && worst < 1e-5,
        format!("|lambda - direct| {lambda_diff:.1e}, worst component rel error {worst:.2e}"),
    ))
}

fn diffusion_contracts(schedule: &NoiseSchedule) -> Result<(bool, String)> {
    let mut prod = 1.0f64;
    let mut identity = 0.0f64;
    for t in 1..=schedule.timesteps() {
        prod *= 1.0 - schedule.beta(t);
        identity = identity.max((schedule.alpha_bar(t) - prod).abs());
    }

    let w = init_weights(&DenoiserConfig::default())?;
    let z = gaussian_latent(D, 5);
    let steps = strided_steps(schedule.timesteps(), 50)?;
    let a = generate(&w, &z, schedule, Some(&steps))?;
    let b = generate(&w, &z, schedule, Some(&steps))?;
    let bitwise = a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());
    let last = ddim_step(&w, &z, 1, schedule)? == predicted_x0(&w, &z, 1, schedule)?;

    // q(x_t | x_0) = N(sqrt(ab) x0, (1 - ab))
    let (t, x0, n) = (400, 0.7, 100_000);
    let ab = schedule.alpha_bar(t);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut sum = 0.0;
    let mut sq = 0.0;
    for _ in 0..n {
        let e: f64 = rng.sample(StandardNormal);
        let x = forward_diffuse(&[x0], t, &[e], schedule)?[0];
        sum += x;
        sq += x * x;
    }
    let mean = sum / n as f64;
    let var = sq / n as f64 - mean * mean;
    let (m_ref, v_ref) = (ab.sqrt() * x0, 1.0 - ab);
    let z_mean = (mean - m_ref) / (v_ref / n as f64).sqrt();
    let z_var = (var - v_ref) / (v_ref * (2.0 / n as f64).sqrt());
    let passed = identity < 1e-14 && bitwise && last && z_mean.abs() < 3.0 && z_var.abs() < 3.0;
    Ok((
        passed,
        format!(
            "product {identity:.1e}, bitwise {bitwise}, t=1 step {last}, moments {z_mean:+.2} / {z_var:+.2} sigma"
        ),
    ))
}

fn sampler_vjp(schedule: &NoiseSchedule) -> Result<(bool, String)> {
    let w = init_weights(&DenoiserConfig::default())?;
    let steps = strided_steps(schedule.timesteps(), 10)?;
    let row = check_sampler_vjp(&w, schedule, &steps, 5, 17)?;
    Ok((row.passed, format!("5 pairs x {D} components, worst {:.2e}", row.max_rel_err)))
}

/// `min x1^2 + x2^2` subject to `x1 >= 1`.
struct Kkt;

impl ConstrainedProblem for Kkt {
    fn dim(&self) -> usize {
        2
    }
    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![f64::NEG_INFINITY; 2], vec![f64::INFINITY; 2])
    }
    fn constraint_scales(&self) -> Vec<f64> {
        vec![1.0]
    }
    fn evaluate(&mut self, v: &[f64]) -> Result<Option<Values>> {
        Ok(Some(Values {
            objective: v[0] * v[0] + v[1] * v[1],
            constraints: vec![1.0 - v[0]],
            diagnostics: vec![],
        }))
    }
    fn gradient(&mut self, v: &[f64]) -> Result<Gradients> {
        Ok(Gradients {
            objective: vec![2.0 * v[0], 2.0 * v[1]],
            constraints: vec![vec![-1.0, 0.0]],
        })
    }
}

fn kkt() -> Result<(bool, String)> {
    let r = solve(&mut Kkt, &[3.0, -2.0], &SolverConfig::default())?;
    let x_err = (r.v[0] - 1.0).abs().max(r.v[1].abs());
    let mu = r.multipliers[0];
    Ok((
        r.converged && x_err < 1e-5 && (mu - 2.0).abs() < 1e-3,
        format!("x error {x_err:.1e}, multiplier {mu:.6}, {} gradients", r.gradients),
    ))
}

struct Smoke {
    corpus: Corpus,
    outcome: TrainOutcome,
}

fn smoke_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        batch_size: 8,
        num_steps: 2000,
        ema_decay: 0.995,
        seed: 0,
    }
}

fn smoke_training(schedule: &NoiseSchedule, smoke: &mut Option<Smoke>) -> Result<(bool, String)> {
    let shapes = NacaSweep::default().shapes()?;
    let corpus = Corpus::fit(&shapes, &naca4("0012", FIT_POINTS)?, &BumpBasis::new(D)?, CORPUS_DAMPING)?;
    let data = corpus.normalized();
    let init = init_weights(&DenoiserConfig::default())?;
    let first = train(&init, &data, &smoke_config(), schedule)?;
    let again = train(&init, &data, &smoke_config(), schedule)?;
    let bitwise = first.step_losses.len() == again.step_losses.len()
        && first.step_losses.iter().zip(&again.step_losses).all(|(a, b)| a.to_bits() == b.to_bits());
    let early = first.windowed_loss(200).unwrap_or(f64::NAN);
    let late = first.windowed_loss(2000).unwrap_or(f64::NAN);
    let drop = 1.0 - late / early;
    let detail = format!(
        "{} shapes, windowed loss {early:.4} -> {late:.4} ({:.1} % drop), rerun bitwise {bitwise}",
        corpus.len(),
        100.0 * drop
    );
    *smoke = Some(Smoke { corpus, outcome: first });
    Ok((drop >= 0.30 && bitwise, detail))
}

fn decoder(w: &DenoiserWeights, schedule: &NoiseSchedule, steps: usize, norm: &NormalizationBox) -> Result<Decoder> {
    Ok(Decoder {
        model: Box::new(w.clone()),
        steps: strided_steps(schedule.timesteps(), steps)?,
        schedule: schedule.clone(),
        normalization: norm.clone(),
    })
}

fn constraints() -> Vec<Constraint> {
    vec![
        Constraint {
            quantity: Quantity::Cl,
            bound: 0.30,
        },
        Constraint {
            quantity: Quantity::ThicknessRatio,
            bound: 0.105,
        },
    ]
}

fn problem(mode: Mode, dec: Option<Decoder>) -> Result<DesignProblem> {
    let spec = ProblemSpec {
        objective: target_cp(PANELS)?,
        constraints: constraints(),
        conditions: FlowConditions::from_degrees(DESIGN_ALPHA),
        mode,
        hh_bound: 0.1,
        latent_bound: 3.0,
        frozen_fraction: 0.05,
    };
    DesignProblem::new(spec, param("0012", PANELS)?, dec)
}

fn chain_gradient(smoke: &Smoke, schedule: &NoiseSchedule) -> Result<(bool, String)> {
    let dec = decoder(&smoke.outcome.ema, schedule, 10, &smoke.corpus.normalization)?;
    let mut p = problem(Mode::Latent, Some(dec))?;
    let row = check_latent_chain(&mut p, &gaussian_latent(D, 3))?;
    Ok((row.passed, format!("{D} components at 10 steps, worst {:.2e}", row.max_rel_err)))
}

fn manifold_signature(smoke: &Smoke, schedule: &NoiseSchedule) -> Result<(bool, String)> {
    let w = &smoke.outcome.ema;
    let steps = strided_steps(schedule.timesteps(), 50)?;
    let points = (0..20)
        .map(|i| generate(w, &gaussian_latent(D, 100 + i), schedule, Some(&steps)))
        .collect::<Result<Vec<_>>>()?;
    let report = spectrum_sweep(w, &points, DEFAULT_TAU)?;
    let median = report.median_rank();
    let frac = report.fraction_with_gap(5.0);
    let gaps = report
        .gap_range()
        .map_or("none".to_string(), |(a, b)| format!("{a:.2}..{b:.2}"));
    Ok((
        median < D as f64 && frac >= 0.75,
        format!("median rank {median}, rank gap >= 5 at {:.0} % of samples (ratios {gaps})", 100.0 * frac),
    ))
}

fn design_runs(smoke: &Smoke, schedule: &NoiseSchedule) -> Result<(bool, String)> {
    let config = SolverConfig::default();
    let check = |r: &DesignResult| r.eps_rel <= FEASIBLE && r.counters.gradient_evaluations <= 100;

    let mut hh = problem(Mode::Hh, None)?;
    let hh = hh.solve(&[0.0; D], &config)?;
    println!("     {}", summarize(&hh));

    let dec = decoder(
        &smoke.outcome.ema,
        schedule,
        latentfoil::diffusion::DEFAULT_INFER_STEPS,
        &smoke.corpus.normalization,
    )?;
    let base = dec.normalization.normalize(&[0.0; D]);
    let enc = encode(&dec, &base, &gaussian_latent(D, 0), 3.0)?;
    println!("     latent init: base encoded with rms {:.2e}", enc.residual_rms);
    let mut lat = problem(Mode::Latent, Some(dec))?;
    let lat = lat.solve(&enc.z, &config)?;
    println!("     {}", summarize(&lat));

    let ratio = lat.objective / hh.objective;
    Ok((
        check(&hh) && check(&lat) && ratio <= 1.1,
        format!(
            "eps_rel hh {:.1e} latent {:.1e}, J latent / J hh = {ratio:.3}",
            hh.eps_rel, lat.eps_rel
        ),
    ))
}

fn main() -> ExitCode {
    let schedule = ScheduleSpec::default().build().expect("default schedule");
    let mut lines = vec![
        run(1, "autodiff ops", 10, autodiff_ops),
        run(2, "Hicks-Henne roundtrip", 5, hicks_henne_roundtrip),
        run(3, "panel solver", 2, panel_solver),
        run(4, "adjoint machinery", 30, adjoint_machinery),
        run(5, "diffusion contracts", 30, || diffusion_contracts(&schedule)),
        run(6, "sampler VJP", 60, || sampler_vjp(&schedule)),
    ];
    let mut smoke = None;
    let training = run(8, "training smoke", 600, || smoke_training(&schedule, &mut smoke));
    lines.push(training);
    match &smoke {
        Some(s) => {
            lines.push(run(7, "end-to-end chain gradient", 300, || chain_gradient(s, &schedule)));
            lines.push(run(9, "manifold signature", 300, || manifold_signature(s, &schedule)));
            lines.push(run(10, "constrained design", 1200, || design_runs(s, &schedule)));
        }
        None => {
            for (id, name) in [(7, "end-to-end chain gradient"), (9, "manifold signature"), (10, "constrained design")] {
                lines.push(run(id, name, 1, || Ok((false, "no smoke-trained model".into()))));
            }
        }
    }
    lines.push(run(11, "analytic KKT", 1, kkt));

    lines.sort_by_key(|l| l.id);
    let failed: Vec<String> = lines.iter().filter(|l| !l.ok()).map(|l| l.id.to_string()).collect();
    println!(
        "acceptance: {}/{} passed{}",
        lines.len() - failed.len(),
        lines.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!("; failing: {}", failed.join(", "))
        }
    );
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && !failed.is_empty() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
