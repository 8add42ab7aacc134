//! DDPM forward process and training, the deterministic DDIM sampler `G`, and
//! reverse-mode differentiation through the whole sampling chain.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::denoiser::{DenoiserWeights, NoisePredictor};
use crate::error::{invalid, Error, Result};

/// Default DDIM inference step count.
pub const DEFAULT_INFER_STEPS: usize = 50;

/// Parameters of a linear beta schedule, as stored in checkpoints and configs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        linear_schedule(self.timesteps, self.beta_start, self.beta_end)
    }
}

/// `beta_t`, `alpha_t = 1 - beta_t` and `alpha_bar_t` for `t = 1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub fn linear_schedule(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if timesteps == 0 {
        return invalid("schedule needs at least one step");
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return invalid(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        ));
    }
    let beta: Vec<f64> = if timesteps == 1 {
        vec![beta_start]
    } else {
        let step = (beta_end - beta_start) / (timesteps - 1) as f64;
        (0..timesteps).map(|i| beta_start + step * i as f64).collect()
    };
    NoiseSchedule::from_betas(beta)
}

impl NoiseSchedule {
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return invalid("every beta must lie in (0, 1)");
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self { beta, alpha, alpha_bar })
    }

    pub fn timesteps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `alpha_bar_t`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return invalid(format!("timestep {t} outside 1..={}", self.timesteps()));
        }
        Ok(())
    }
}

/// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_diffuse(x0: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    if x0.len() != eps.len() {
        return invalid("x0 and eps lengths differ");
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// Noise-prediction loss `mean_batch ||eps - eps_hat(x_t, t)||^2` with one
/// `(t, eps)` draw per batch element, recorded on `tape`.
pub fn training_loss<M: NoisePredictor + ?Sized>(
    model: &M,
    tape: &mut Tape,
    params: Option<Var>,
    batch: &[&[f64]],
    rng: &mut impl Rng,
    schedule: &NoiseSchedule,
) -> Result<Var> {
    if batch.is_empty() {
        return invalid("training batch is empty");
    }
    let d = model.dim();
    let mut terms = Vec::with_capacity(batch.len());
    for x0 in batch {
        if x0.len() != d {
            return invalid(format!("training vector has length {}, expected {d}", x0.len()));
        }
        let t = rng.gen_range(1..=schedule.timesteps());
        let eps: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let xt = forward_diffuse(x0, t, &eps, schedule)?;
        let xv = tape.vector_constant(&xt);
        let pred = model.predict(tape, params, xv, t)?;
        let target = tape.vector_constant(&eps);
        let diff = tape.sub(target, pred)?;
        let sq = tape.mul(diff, diff)?;
        terms.push(tape.sum(sq)?);
    }
    let all = tape.concat(&terms)?;
    tape.mean(all)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub num_steps: usize,
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 2,
            num_steps: 140_000,
            ema_decay: 0.995,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return invalid(format!("learning rate must be non-negative, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return invalid("batch size must be positive");
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return invalid(format!("EMA decay must lie in (0, 1), got {}", self.ema_decay));
        }
        Ok(())
    }
}

/// Steps between loss-curve records; also the smoothing window.
pub const LOG_INTERVAL: usize = 100;

/// Smoothing factor of the exponential moving average of the step loss.
const LOSS_EMA: f64 = 0.99;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    /// Mean step loss over the last `LOG_INTERVAL` steps.
    pub loss: f64,
    /// Exponential moving average of the step loss.
    pub ema_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// EMA weights, used for sampling.
    pub ema: DenoiserWeights,
    /// Raw optimizer iterate.
    pub weights: DenoiserWeights,
    pub step_losses: Vec<f64>,
    pub curve: Vec<LossRecord>,
}

impl TrainOutcome {
    /// Loss curve as `step,loss,ema_loss` CSV.
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("step,loss,ema_loss\n");
        for r in &self.curve {
            s.push_str(&format!("{},{:.10e},{:.10e}\n", r.step, r.loss, r.ema_loss));
        }
        s
    }

    /// Windowed mean loss ending at `step` (1-based), over `LOG_INTERVAL` steps.
    pub fn windowed_loss(&self, step: usize) -> Option<f64> {
        if step < LOG_INTERVAL || step > self.step_losses.len() {
            return None;
        }
        let w = &self.step_losses[step - LOG_INTERVAL..step];
        Some(w.iter().sum::<f64>() / w.len() as f64)
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, theta: &mut [f64], g: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g[i] * g[i];
            theta[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Adam on [`training_loss`] with an EMA copy of the weights. Deterministic
/// given `config.seed`; batches are drawn with replacement.
pub fn train(
    weights: &DenoiserWeights,
    dataset: &[Vec<f64>],
    config: &TrainConfig,
    schedule: &NoiseSchedule,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return invalid("training set is empty");
    }
    if schedule.timesteps() != weights.config().timesteps {
        return invalid(format!(
            "schedule has {} steps, network expects {}",
            schedule.timesteps(),
            weights.config().timesteps
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut current = weights.clone();
    let mut ema = weights.clone();
    let mut adam = Adam::new(current.len());
    let mut step_losses = Vec::with_capacity(config.num_steps);
    let mut curve = Vec::new();
    let mut smooth = None;

    for step in 1..=config.num_steps {
        let batch: Vec<&[f64]> = (0..config.batch_size)
            .map(|_| dataset[rng.gen_range(0..dataset.len())].as_slice())
            .collect();
        let mut tape = Tape::new();
        let theta = current.record_params(&mut tape, true)?;
        let loss = training_loss(&current, &mut tape, Some(theta), &batch, &mut rng, schedule)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Diverged { step, loss: value });
        }
        let grad = tape.backward(loss, None)?.wrt(theta);
        drop(tape);
        adam.step(current.params_mut(), &grad, config.learning_rate);
        if current.params().iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { step, loss: f64::NAN });
        }
        let decay = config.ema_decay;
        for (e, c) in ema.params_mut().iter_mut().zip(current.params()) {
            *e = decay * *e + (1.0 - decay) * c;
        }

        step_losses.push(value);
        let s = match smooth {
            None => value,
            Some(prev) => LOSS_EMA * prev + (1.0 - LOSS_EMA) * value,
        };
        smooth = Some(s);
        if step % LOG_INTERVAL == 0 {
            let w = &step_losses[step - LOG_INTERVAL..];
            let rec = LossRecord {
                step,
                loss: w.iter().sum::<f64>() / w.len() as f64,
                ema_loss: s,
            };
            log::info!("step {step}: loss {:.5} (ema {:.5})", rec.loss, rec.ema_loss);
            curve.push(rec);
        }
    }
    Ok(TrainOutcome {
        ema,
        weights: current,
        step_losses,
        curve,
    })
}

/// Record `f_theta(x_t, t) = (x_t - sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_bar_t)`.
fn record_x0(tape: &mut Tape, x: Var, eps: Var, t: usize, schedule: &NoiseSchedule) -> Result<Var> {
    let ab = schedule.alpha_bar(t);
    let noise = tape.scale(eps, -(1.0 - ab).sqrt())?;
    let num = tape.add(x, noise)?;
    tape.scale(num, 1.0 / ab.sqrt())
}

/// Record one deterministic DDIM update from `t` to `t_prev < t`.
pub fn record_ddim_step<M: NoisePredictor + ?Sized>(
    model: &M,
    tape: &mut Tape,
    params: Option<Var>,
    x: Var,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<Var> {
    schedule.check_t(t)?;
    if t_prev >= t {
        return invalid(format!("DDIM step must go backwards, got {t} -> {t_prev}"));
    }
    let eps = model.predict(tape, params, x, t)?;
    let x0 = record_x0(tape, x, eps, t, schedule)?;
    let ab_prev = schedule.alpha_bar(t_prev);
    let a = tape.scale(x0, ab_prev.sqrt())?;
    let b = tape.scale(eps, (1.0 - ab_prev).sqrt())?;
    tape.add(a, b)
}

fn run_untaped<M: NoisePredictor + ?Sized>(
    model: &M,
    x: &[f64],
    f: impl FnOnce(&mut Tape, Option<Var>, Var) -> Result<Var>,
) -> Result<Vec<f64>> {
    if x.len() != model.dim() {
        return invalid(format!("input has length {}, expected {}", x.len(), model.dim()));
    }
    let mut tape = Tape::new();
    let params = model.prepare(&mut tape, false)?;
    let xv = tape.vector_constant(x);
    let y = f(&mut tape, params, xv)?;
    Ok(tape.value(y).to_vec())
}

/// Predicted clean sample `f_theta(x_t, t)`.
pub fn predicted_x0<M: NoisePredictor + ?Sized>(model: &M, x_t: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    run_untaped(model, x_t, |tape, p, x| {
        let eps = model.predict(tape, p, x, t)?;
        record_x0(tape, x, eps, t, schedule)
    })
}

/// One DDIM step `x_t -> x_{t-1}`.
pub fn ddim_step<M: NoisePredictor + ?Sized>(model: &M, x_t: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    ddim_step_to(model, x_t, t, t.saturating_sub(1), schedule)
}

/// One DDIM step `x_t -> x_{t_prev}` (strided sampling).
pub fn ddim_step_to<M: NoisePredictor + ?Sized>(
    model: &M,
    x_t: &[f64],
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    run_untaped(model, x_t, |tape, p, x| record_ddim_step(model, tape, p, x, t, t_prev, schedule))
}

/// `n` strided timesteps from `T` down to 1, uniformly spaced and rounded.
pub fn strided_steps(timesteps: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > timesteps {
        return invalid(format!("cannot take {n} inference steps out of {timesteps}"));
    }
    if n == 1 {
        return Ok(vec![timesteps]);
    }
    let span = (timesteps - 1) as f64 / (n - 1) as f64;
    Ok((0..n).rev().map(|k| 1 + (k as f64 * span).round() as usize).collect())
}

fn check_steps(steps: &[usize], schedule: &NoiseSchedule) -> Result<()> {
    if steps.is_empty() {
        return invalid("step list is empty");
    }
    if steps[0] > schedule.timesteps() || *steps.last().expect("nonempty") == 0 {
        return invalid(format!("steps must lie in 1..={}", schedule.timesteps()));
    }
    if steps.windows(2).any(|w| w[1] >= w[0]) {
        return invalid("steps must be strictly decreasing");
    }
    Ok(())
}

/// Record the DDIM chain `G(z)` over `steps` (strictly decreasing), ending at `t = 0`.
pub fn record_generate<M: NoisePredictor + ?Sized>(
    model: &M,
    tape: &mut Tape,
    params: Option<Var>,
    z: Var,
    steps: &[usize],
    schedule: &NoiseSchedule,
) -> Result<Var> {
    check_steps(steps, schedule)?;
    let mut x = z;
    for (k, &t) in steps.iter().enumerate() {
        let t_prev = steps.get(k + 1).copied().unwrap_or(0);
        x = record_ddim_step(model, tape, params, x, t, t_prev, schedule)?;
    }
    Ok(x)
}

/// Deterministic generative map `x0 = G(z)`. `steps = None` uses
/// [`DEFAULT_INFER_STEPS`] strided steps.
pub fn generate<M: NoisePredictor + ?Sized>(
    model: &M,
    z: &[f64],
    schedule: &NoiseSchedule,
    steps: Option<&[usize]>,
) -> Result<Vec<f64>> {
    let default;
    let steps = match steps {
        Some(s) => s,
        None => {
            default = strided_steps(schedule.timesteps(), DEFAULT_INFER_STEPS.min(schedule.timesteps()))?;
            &default
        }
    };
    run_untaped(model, z, |tape, p, x| record_generate(model, tape, p, x, steps, schedule))
}

/// `G(z)` together with the VJP `zbar = xbar^T dG/dz`, from one taped chain
/// and one backward sweep.
pub fn backprop_through_sampler<M: NoisePredictor + ?Sized>(
    model: &M,
    z: &[f64],
    schedule: &NoiseSchedule,
    steps: &[usize],
    xbar: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (x, mut zbars) = sampler_vjps(model, z, schedule, steps, &[xbar])?;
    Ok((x, zbars.remove(0)))
}

/// Several VJPs through the same recorded chain; one backward sweep each.
pub fn sampler_vjps<M: NoisePredictor + ?Sized>(
    model: &M,
    z: &[f64],
    schedule: &NoiseSchedule,
    steps: &[usize],
    xbars: &[&[f64]],
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let d = model.dim();
    if z.len() != d || xbars.iter().any(|xb| xb.len() != d) {
        return invalid(format!("latent and cotangents must have length {d}"));
    }
    if xbars.iter().any(|xb| xb.iter().any(|v| !v.is_finite())) {
        return invalid("cotangent has non-finite entries");
    }
    let mut tape = Tape::new();
    let params = model.prepare(&mut tape, false)?;
    let zv = tape.vector_variable(z);
    let x = record_generate(model, &mut tape, params, zv, steps, schedule)?;
    let zbars = xbars
        .iter()
        .map(|xb| Ok(tape.backward(x, Some(xb))?.wrt(zv)))
        .collect::<Result<_>>()?;
    Ok((tape.value(x).to_vec(), zbars))
}

/// Ancestral DDPM sampling with posterior variance
/// `(1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) beta_t`; the last step is mean-only.
pub fn ddpm_sample<M: NoisePredictor + ?Sized>(model: &M, rng: &mut impl Rng, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    let d = model.dim();
    let mut x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    for t in (1..=schedule.timesteps()).rev() {
        let eps = run_untaped(model, &x, |tape, p, xv| model.predict(tape, p, xv, t))?;
        let (a, ab, b) = (schedule.alpha(t), schedule.alpha_bar(t), schedule.beta(t));
        let coef = b / (1.0 - ab).sqrt();
        let var = (1.0 - schedule.alpha_bar(t - 1)) / (1.0 - ab) * b;
        let sigma = var.sqrt();
        for i in 0..d {
            let mean = (x[i] - coef * eps[i]) / a.sqrt();
            x[i] = if t > 1 {
                mean + sigma * rng.sample::<f64, _>(StandardNormal)
            } else {
                mean
            };
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Shape;
    use crate::denoiser::{init_weights, DenoiserConfig, ZeroNoise};

    /// Predictor given as a plain function of `(x, t)`; no gradient flows to `x`.
    struct FnNoise<F: Fn(&[f64], usize) -> Vec<f64>>(usize, F);

    impl<F: Fn(&[f64], usize) -> Vec<f64>> NoisePredictor for FnNoise<F> {
        fn dim(&self) -> usize {
            self.0
        }
        fn prepare(&self, _: &mut Tape, _: bool) -> Result<Option<Var>> {
            Ok(None)
        }
        fn predict(&self, tape: &mut Tape, _: Option<Var>, x: Var, t: usize) -> Result<Var> {
            let v = (self.1)(tape.value(x), t);
            tape.constant(Shape::Vector(self.0), v)
        }
    }

    fn small_net(timesteps: usize) -> DenoiserWeights {
        init_weights(&DenoiserConfig {
            d: 8,
            channels: 4,
            depth: 1,
            time_embed_dim: 8,
            timesteps,
            seed: 2,
        })
        .unwrap()
    }

    #[test]
    fn schedule_examples() {
        let s = linear_schedule(1, 0.1, 0.3).unwrap();
        assert_eq!(s.betas(), &[0.1]);
        let s = linear_schedule(2, 0.1, 0.3).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.63).abs() < 1e-15);
        assert!(linear_schedule(10, 0.3, 0.1).is_err());
        assert!(linear_schedule(0, 0.1, 0.3).is_err());
    }

    #[test]
    fn default_schedule_product() {
        let s = ScheduleSpec::default().build().unwrap();
        // 50-digit product of (1 - beta_t)
        assert!((s.alpha_bar(1000) - 4.035_829_765_375_683e-5).abs() < 1e-16, "{}", s.alpha_bar(1000));
        assert!(s.alpha_bar(1000) < 1e-4);
        for t in 1..=1000 {
            assert!((s.alpha_bar(t) - s.alpha_bar(t - 1) * s.alpha(t)).abs() < 1e-14);
        }
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn forward_diffuse_limits() {
        let s = ScheduleSpec::default().build().unwrap();
        let x0 = vec![1.0, -2.0];
        let y = forward_diffuse(&x0, 10, &[0.0, 0.0], &s).unwrap();
        assert_eq!(y[0], s.alpha_bar(10).sqrt());
        let y = forward_diffuse(&x0, 1000, &[0.5, 0.5], &s).unwrap();
        assert!((y[0] - 0.5).abs() < 0.01);
        assert!(forward_diffuse(&x0, 0, &[0.0, 0.0], &s).is_err());
    }

    #[test]
    fn zero_predictor_loss_is_noise_norm() {
        let s = ScheduleSpec::default().build().unwrap();
        let model = ZeroNoise(40);
        let data: Vec<Vec<f64>> = (0..64).map(|i| vec![i as f64 / 64.0; 40]).collect();
        let batch: Vec<&[f64]> = data.iter().map(|v| v.as_slice()).collect();
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let loss = training_loss(&model, &mut tape, None, &batch, &mut rng, &s).unwrap();
        // mean of 64 chi-square(40) draws: 40 +- 3 * sqrt(80 / 64)
        assert!((tape.scalar(loss) - 40.0).abs() < 3.0 * (80.0f64 / 64.0).sqrt());
        assert!(training_loss(&model, &mut tape, None, &[], &mut rng, &s).is_err());
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        let s = ScheduleSpec::default().build().unwrap();
        let x0 = vec![0.25; 6];
        let oracle = {
            let x0 = x0.clone();
            let s = s.clone();
            FnNoise(6, move |x: &[f64], t| {
                let ab = s.alpha_bar(t);
                x.iter()
                    .zip(&x0)
                    .map(|(xt, x0)| (xt - ab.sqrt() * x0) / (1.0 - ab).sqrt())
                    .collect()
            })
        };
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let loss = training_loss(&oracle, &mut tape, None, &[&x0, &x0], &mut rng, &s).unwrap();
        assert!(tape.scalar(loss) < 1e-20);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let s = linear_schedule(50, 1e-3, 0.05).unwrap();
        let w = small_net(50);
        let data = vec![vec![0.3, -0.1, 0.5, 0.2, -0.4, 0.1, 0.0, 0.6]; 2];
        let batch: Vec<&[f64]> = data.iter().map(|v| v.as_slice()).collect();
        let eval = |w: &DenoiserWeights| {
            let mut tape = Tape::new();
            let th = w.record_params(&mut tape, true).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let l = training_loss(w, &mut tape, Some(th), &batch, &mut rng, &s).unwrap();
            (tape.scalar(l), tape.backward(l, None).unwrap().wrt(th))
        };
        let (_, g) = eval(&w);
        let h = 1e-6;
        let start = w.layout().get("lift.weight").unwrap().offset;
        for k in start..start + 10 {
            let mut p = w.clone();
            p.params_mut()[k] += h;
            let mut m = w.clone();
            m.params_mut()[k] -= h;
            let fd = (eval(&p).0 - eval(&m).0) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-4 * fd.abs().max(1e-6), "{k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn predicted_x0_inverts_noising() {
        let s = ScheduleSpec::default().build().unwrap();
        let x0 = vec![0.2, -0.7, 1.1];
        let eps = vec![0.5, 0.1, -1.3];
        let xt = forward_diffuse(&x0, 300, &eps, &s).unwrap();
        let e = eps.clone();
        let stub = FnNoise(3, move |_: &[f64], _| e.clone());
        let rec = predicted_x0(&stub, &xt, 300, &s).unwrap();
        for (a, b) in rec.iter().zip(&x0) {
            assert!((a - b).abs() < 1e-12);
        }
        let zero = predicted_x0(&ZeroNoise(3), &xt, 300, &s).unwrap();
        assert!((zero[0] - xt[0] / s.alpha_bar(300).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn ddim_step_properties() {
        let s = ScheduleSpec::default().build().unwrap();
        let w = small_net(1000);
        let x: Vec<f64> = (0..8).map(|i| (i as f64).cos()).collect();
        assert_eq!(ddim_step(&w, &x, 1, &s).unwrap(), predicted_x0(&w, &x, 1, &s).unwrap());
        let y = ddim_step(&ZeroNoise(8), &x, 400, &s).unwrap();
        let r = (s.alpha_bar(399) / s.alpha_bar(400)).sqrt();
        for (a, b) in y.iter().zip(&x) {
            assert!((a - r * b).abs() < 1e-14);
        }
    }

    #[test]
    fn generate_is_fold_of_steps_and_deterministic() {
        let s = linear_schedule(100, 1e-3, 0.05).unwrap();
        let w = small_net(100);
        let z: Vec<f64> = (0..8).map(|i| 0.3 * i as f64 - 1.0).collect();
        let steps = strided_steps(100, 10).unwrap();
        assert_eq!(steps[0], 100);
        assert_eq!(*steps.last().unwrap(), 1);
        let g1 = generate(&w, &z, &s, Some(&steps)).unwrap();
        let g2 = generate(&w, &z, &s, Some(&steps)).unwrap();
        assert_eq!(g1, g2);
        let mut x = z.clone();
        for (k, &t) in steps.iter().enumerate() {
            x = ddim_step_to(&w, &x, t, steps.get(k + 1).copied().unwrap_or(0), &s).unwrap();
        }
        assert_eq!(x, g1);
        assert!(generate(&w, &z, &s, Some(&[5, 7])).is_err());
        assert!(generate(&w, &z, &s, Some(&[101, 7])).is_err());
    }

    #[test]
    fn strided_steps_cover_range() {
        assert_eq!(strided_steps(1000, 1).unwrap(), vec![1000]);
        let s = strided_steps(1000, 50).unwrap();
        assert_eq!(s.len(), 50);
        assert!(s.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(strided_steps(10, 10).unwrap(), (1..=10).rev().collect::<Vec<_>>());
        assert!(strided_steps(10, 11).is_err());
    }

    #[test]
    fn sampler_vjp_matches_finite_differences() {
        let s = ScheduleSpec::default().build().unwrap();
        let w = small_net(1000);
        let steps = strided_steps(1000, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let z: Vec<f64> = (0..8).map(|_| rng.sample(StandardNormal)).collect();
        let xbar: Vec<f64> = (0..8).map(|_| rng.sample(StandardNormal)).collect();
        let (_, zbar) = backprop_through_sampler(&w, &z, &s, &steps, &xbar).unwrap();
        let f = |z: &[f64]| -> f64 {
            let x = generate(&w, z, &s, Some(&steps)).unwrap();
            x.iter().zip(&xbar).map(|(a, b)| a * b).sum()
        };
        let h = 1e-5;
        for k in 0..8 {
            let mut p = z.clone();
            p[k] += h;
            let mut m = z.clone();
            m[k] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - zbar[k]).abs() <= 1e-4 * fd.abs().max(1e-3), "{k}: {fd} vs {}", zbar[k]);
        }
        let scaled: Vec<f64> = xbar.iter().map(|v| 3.0 * v).collect();
        let (_, zbar3) = backprop_through_sampler(&w, &z, &s, &steps, &scaled).unwrap();
        for (a, b) in zbar3.iter().zip(&zbar) {
            assert!((a - 3.0 * b).abs() < 1e-10);
        }
    }

    #[test]
    fn near_identity_chain_passes_cotangent_through() {
        let s = NoiseSchedule::from_betas(vec![1e-12]).unwrap();
        let xbar = vec![0.3, -1.0, 2.0];
        let (_, zbar) = backprop_through_sampler(&ZeroNoise(3), &[1.0, 2.0, 3.0], &s, &[1], &xbar).unwrap();
        for (a, b) in zbar.iter().zip(&xbar) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn training_is_deterministic_and_zero_lr_is_inert() {
        let s = linear_schedule(50, 1e-3, 0.05).unwrap();
        let w = small_net(50);
        let data: Vec<Vec<f64>> = (0..16).map(|i| (0..8).map(|j| ((i * j) as f64 * 0.1).sin()).collect()).collect();
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 4,
            num_steps: 200,
            ema_decay: 0.99,
            seed: 5,
        };
        let a = train(&w, &data, &cfg, &s).unwrap();
        let b = train(&w, &data, &cfg, &s).unwrap();
        assert_eq!(a.step_losses, b.step_losses);
        assert_eq!(a.ema, b.ema);
        assert_eq!(a.curve.len(), 2);
        assert!(a.curve_csv().starts_with("step,loss,ema_loss\n100,"));
        let frozen = train(&w, &data, &TrainConfig { learning_rate: 0.0, ..cfg.clone() }, &s).unwrap();
        assert_eq!(frozen.weights.params(), w.params());
        assert!(train(&w, &[], &cfg, &s).is_err());
    }

    #[test]
    fn nan_loss_aborts_with_step() {
        let s = linear_schedule(50, 1e-3, 0.05).unwrap();
        let w = small_net(50);
        let data = vec![vec![f64::NAN; 8]];
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 1,
            num_steps: 10,
            ema_decay: 0.99,
            seed: 5,
        };
        assert!(matches!(train(&w, &data, &cfg, &s), Err(Error::Diverged { step: 1, .. })));
    }

    #[test]
    fn ddpm_sampling_is_seeded() {
        let s = linear_schedule(20, 1e-3, 0.05).unwrap();
        let w = small_net(20);
        let a = ddpm_sample(&w, &mut ChaCha8Rng::seed_from_u64(1), &s).unwrap();
        let b = ddpm_sample(&w, &mut ChaCha8Rng::seed_from_u64(1), &s).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }
}
