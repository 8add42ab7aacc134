use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use latentfoil::dataset::Corpus;
use latentfoil::denoiser::{init_weights, read_checkpoint, write_checkpoint, DenoiserConfig, DenoiserWeights};
use latentfoil::diffusion::{strided_steps, train as train_model, NoiseSchedule};
use latentfoil::flow::{FlowConditions, ObjectiveSpec, ShapeParameterization};
use latentfoil::geometry::{deform, parse_coordinates, BumpBasis, HicksHenneVector, NormalizationBox};
use latentfoil::gradcheck::{self, CheckRow};
use latentfoil::manifold::spectrum_sweep;
use latentfoil::optimizer::{
    encode, gaussian_latent, summarize, Constraint, Decoder, DesignProblem, DesignResult, Mode, ProblemSpec, Quantity,
};
use serde::{Deserialize, Serialize};

use crate::artifact::{csv_body, read_hashed, Input, Provenance, Writer};
use crate::config::{resolve_shape, InitKind, Loaded, ObjectiveKind, RunConfig};

/// Marker for the gradient-check exit status.
#[derive(Debug)]
pub struct GradcheckFailed(pub usize);

impl std::fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} gradient check(s) failed", self.0)
    }
}

impl std::error::Error for GradcheckFailed {}

/// Marker for a required input that does not exist.
#[derive(Debug)]
pub struct MissingArtifact(pub PathBuf);

impl std::fmt::Display for MissingArtifact {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "missing artifact {}", self.0.display())
    }
}

impl std::error::Error for MissingArtifact {}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(MissingArtifact(path.to_path_buf()).into())
    }
}

fn schedule(cfg: &RunConfig) -> Result<NoiseSchedule> {
    Ok(cfg.schedule.spec().build()?)
}

fn basis(cfg: &RunConfig) -> Result<BumpBasis> {
    Ok(BumpBasis::new(cfg.geometry.d)?)
}

fn fmt_row(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:.12e}")).collect::<Vec<_>>().join(",")
}

fn indexed_header(prefix: &str, n: usize) -> String {
    (0..n).map(|i| format!("{prefix}{i}")).collect::<Vec<_>>().join(",")
}

#[derive(Serialize, Deserialize)]
struct CheckpointExtra {
    normalization: NormalizationBox,
    base: String,
    config_sha256: String,
    inputs: Vec<Input>,
}

/// Denoiser and normalization from a checkpoint written by `train`.
pub struct Model {
    pub weights: DenoiserWeights,
    pub normalization: NormalizationBox,
    pub input: Input,
}

pub fn load_model(cfg: &RunConfig) -> Result<Model> {
    let path = &cfg.paths.checkpoint;
    require(path)?;
    let (bytes, input) = read_hashed(path)?;
    let (weights, extra) = read_checkpoint(bytes.as_slice()).with_context(|| format!("loading {}", path.display()))?;
    let extra: CheckpointExtra =
        serde_json::from_value(extra).with_context(|| format!("{}: checkpoint header lacks normalization", path.display()))?;
    let wc = weights.config();
    if wc.timesteps != cfg.schedule.timesteps || wc.d != cfg.geometry.d {
        bail!(
            "{} was trained with T={} d={}, config has T={} d={}",
            path.display(),
            wc.timesteps,
            wc.d,
            cfg.schedule.timesteps,
            cfg.geometry.d
        );
    }
    Ok(Model {
        weights,
        normalization: extra.normalization,
        input,
    })
}

pub fn decoder(cfg: &RunConfig, model: Model) -> Result<Decoder> {
    let schedule = schedule(cfg)?;
    Ok(Decoder {
        model: Box::new(model.weights),
        steps: strided_steps(schedule.timesteps(), cfg.schedule.infer_steps)?,
        schedule,
        normalization: model.normalization,
    })
}

pub fn gen_data(loaded: &Loaded, out: &Path) -> Result<()> {
    let cfg = &loaded.config;
    let mut prov = Provenance::new("gen-data", &loaded.text);
    let mut shapes = cfg.data.sweep.shapes()?;
    let synthetic = shapes.len();
    let mut skipped = Vec::new();
    if let Some(dir) = &cfg.data.dat_dir {
        require(dir)?;
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .with_context(|| format!("listing {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("dat")))
            .collect();
        files.sort();
        for f in files {
            let (bytes, input) = read_hashed(&f)?;
            match parse_coordinates(&bytes) {
                Ok(shape) => {
                    let name = f.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
                    shapes.push((name, shape));
                    prov.add_input(input);
                }
                Err(e) => {
                    log::warn!("skipping {}: {e}", f.display());
                    skipped.push(format!("{}: {e}", f.display()));
                }
            }
        }
    }
    let base = resolve_shape(&cfg.geometry.base)?;
    let corpus = Corpus::fit(&shapes, &base, &basis(cfg)?, cfg.data.fit_damping)?;
    let d = cfg.geometry.d;

    let mut w = Writer::new(out, prov)?;
    let mut raw = format!("name,residual,{}\n", indexed_header("delta", d));
    for e in &corpus.entries {
        raw.push_str(&format!("{},{:.6e},{}\n", e.name, e.residual, fmt_row(&e.delta)));
    }
    w.text("dataset.csv", &raw)?;
    let mut norm = format!("{}\n", indexed_header("x", d));
    for x in corpus.normalized() {
        norm.push_str(&fmt_row(&x));
        norm.push('\n');
    }
    w.text("normalized.csv", &norm)?;
    w.json("normalization.json", &corpus.normalization)?;
    let mean = corpus.entries.iter().map(|e| e.residual).sum::<f64>() / corpus.len() as f64;
    let mut report = format!(
        "shapes {}\nsynthetic {}\nfiles {}\nskipped {}\nmean_fit_rms {:.3e}\nmax_fit_rms {:.3e}\n",
        corpus.len(),
        synthetic,
        corpus.len() - synthetic,
        skipped.len(),
        mean,
        corpus.max_residual()
    );
    for s in &skipped {
        report.push_str(&format!("skipped {s}\n"));
    }
    w.text("fit_report.txt", &report)?;
    println!(
        "fitted {} shapes ({} skipped), max fit rms {:.3e}",
        corpus.len(),
        skipped.len(),
        corpus.max_residual()
    );
    Ok(())
}

fn read_normalized(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    csv_body(&text)
        .skip(1)
        .enumerate()
        .map(|(i, l)| {
            l.split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .with_context(|| format!("{}: bad row {}", path.display(), i + 1))
        })
        .collect()
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<(T, Input)> {
    require(path)?;
    let (bytes, input) = read_hashed(path)?;
    let v = serde_json::from_slice(&bytes).with_context(|| format!("{}: unexpected contents", path.display()))?;
    Ok((v, input))
}

pub fn train(loaded: &Loaded, out: &Path) -> Result<()> {
    let cfg = &loaded.config;
    let mut prov = Provenance::new("train", &loaded.text);
    let data_path = cfg.paths.data_dir.join("normalized.csv");
    let norm_path = cfg.paths.data_dir.join("normalization.json");
    require(&data_path)?;
    let (_, data_input) = read_hashed(&data_path)?;
    let data = read_normalized(&data_path)?;
    let (normalization, norm_input): (NormalizationBox, _) = read_json(&norm_path)?;
    if data.iter().any(|r| r.len() != cfg.geometry.d) || normalization.dim() != cfg.geometry.d {
        bail!("{}: rows must have {} entries", data_path.display(), cfg.geometry.d);
    }
    prov.add_input(data_input);
    prov.add_input(norm_input);

    let net = DenoiserConfig {
        d: cfg.geometry.d,
        channels: cfg.model.channels,
        depth: cfg.model.depth,
        time_embed_dim: cfg.model.time_embed_dim,
        timesteps: cfg.schedule.timesteps,
        seed: cfg.model.seed,
    };
    let init = init_weights(&net)?;
    let started = std::time::Instant::now();
    let outcome = train_model(&init, &data, &cfg.train.train_config(), &schedule(cfg)?)?;
    let elapsed = started.elapsed().as_secs_f64();

    let extra = CheckpointExtra {
        normalization,
        base: cfg.geometry.base.clone(),
        config_sha256: prov.config_sha256.clone(),
        inputs: prov.inputs.clone(),
    };
    let ckpt = &cfg.paths.checkpoint;
    if let Some(dir) = ckpt.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &outcome.ema, serde_json::to_value(&extra)?)?;
    fs::write(ckpt, &buf).with_context(|| format!("writing {}", ckpt.display()))?;

    let mut w = Writer::new(out, prov)?;
    w.text("loss_curve.csv", &outcome.curve_csv())?;
    let last = outcome.curve.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "trained {} steps in {elapsed:.1} s, final windowed loss {last:.5}; checkpoint {}",
        cfg.train.steps,
        ckpt.display()
    );
    Ok(())
}

pub fn sample(loaded: &Loaded, out: &Path, n: usize, seed: u64) -> Result<()> {
    let cfg = &loaded.config;
    let mut prov = Provenance::new("sample", &loaded.text);
    let model = load_model(cfg)?;
    prov.add_input(model.input.clone());
    let dec = decoder(cfg, model)?;
    let base = resolve_shape(&cfg.geometry.base)?;
    let basis = basis(cfg)?;
    let d = cfg.geometry.d;
    let mut rows = format!("index,seed,t_c,self_intersecting,{}\n", indexed_header("delta", d));
    for i in 0..n {
        let s = seed.wrapping_add(i as u64);
        let delta = dec.decode(&gaussian_latent(d, s))?;
        let shape = deform(&base, &HicksHenneVector::new(delta.clone())?, &basis)?;
        rows.push_str(&format!(
            "{i},{s},{:.6},{},{}\n",
            shape.shape.thickness_to_chord(),
            shape.self_intersecting,
            fmt_row(&delta)
        ));
    }
    Writer::new(out, prov)?.text("samples.csv", &rows)?;
    println!("wrote {n} samples");
    Ok(())
}

#[derive(Deserialize)]
struct PointsFile {
    delta: Vec<f64>,
}

pub fn analyze(loaded: &Loaded, out: &Path, tau: f64, points: &[PathBuf]) -> Result<()> {
    let cfg = &loaded.config;
    let mut prov = Provenance::new("analyze", &loaded.text);
    let model = load_model(cfg)?;
    prov.add_input(model.input.clone());
    let dec = decoder(cfg, model)?;
    let d = cfg.geometry.d;
    let xs: Vec<Vec<f64>> = if points.is_empty() {
        (0..cfg.analysis.samples)
            .map(|i| dec.sample(&gaussian_latent(d, cfg.analysis.seed.wrapping_add(i as u64))))
            .collect::<latentfoil::Result<_>>()?
    } else {
        let mut xs = Vec::new();
        for p in points {
            let (f, input): (PointsFile, _) = read_json(p)?;
            if f.delta.len() != d {
                bail!("{}: delta has {} entries, expected {d}", p.display(), f.delta.len());
            }
            prov.add_input(input);
            xs.push(dec.normalization.normalize(&f.delta));
        }
        xs
    };
    let report = spectrum_sweep(dec.model.as_ref(), &xs, tau)?;
    let mut w = Writer::new(out, prov)?;
    w.text("spectrum.csv", &report.to_csv())?;
    w.svg("spectrum.svg", &report.to_svg())?;
    let gaps = report.gap_range().map_or("none".into(), |(a, b)| format!("{a:.2}..{b:.2}"));
    println!(
        "{} points, median rank {} at tau {tau:e}, rank gap ratios {gaps}",
        report.reports.len(),
        report.median_rank()
    );
    Ok(())
}

fn conditions(cfg: &RunConfig) -> FlowConditions {
    FlowConditions {
        alpha: cfg.problem.alpha.to_radians(),
        v_inf: cfg.problem.v_inf,
    }
}

fn objective(cfg: &RunConfig, param: &ShapeParameterization, prov: &mut Provenance) -> Result<ObjectiveSpec> {
    Ok(match cfg.problem.objective {
        ObjectiveKind::MaxCl => ObjectiveSpec::MaxCl,
        ObjectiveKind::CmMagnitude => ObjectiveSpec::CmMagnitude,
        ObjectiveKind::TargetCp => {
            let spec = &cfg.problem.target;
            if Path::new(spec).exists() {
                prov.add_input(read_hashed(Path::new(spec))?.1);
            }
            let target = resolve_shape(spec)?;
            let tp = ShapeParameterization::new(&target, param.basis().clone(), param.n_panels())?;
            let sys = tp.system(&vec![0.0; param.dim()], conditions(cfg))?;
            ObjectiveSpec::TargetCp {
                target: sys.coefficients(&sys.solve_direct()?)?.cp,
            }
        }
    })
}

fn constraints(cl: Option<f64>, tc: Option<f64>) -> Vec<Constraint> {
    let mut out = Vec::new();
    if let Some(b) = cl {
        out.push(Constraint {
            quantity: Quantity::Cl,
            bound: b,
        });
    }
    if let Some(b) = tc {
        out.push(Constraint {
            quantity: Quantity::ThicknessRatio,
            bound: b,
        });
    }
    out
}

/// Starting decision vector for `mode`.
fn initial_point(cfg: &RunConfig, dec: Option<&Decoder>) -> Result<Vec<f64>> {
    let d = cfg.geometry.d;
    let p = &cfg.problem;
    match (dec, p.init) {
        (None, _) => Ok(vec![0.0; d]),
        (Some(_), InitKind::Gaussian) => Ok(gaussian_latent(d, p.seed)),
        (Some(dec), InitKind::Base) => {
            let target = dec.normalization.normalize(&vec![0.0; d]);
            let e = encode(dec, &target, &gaussian_latent(d, p.seed), p.latent_bound)?;
            if e.warning {
                log::warn!("base shape encoded with residual rms {:.3e}", e.residual_rms);
            }
            Ok(e.z)
        }
    }
}

pub struct OptimizeArgs {
    pub mode: Mode,
    pub dump_flow: bool,
}

pub fn optimize(loaded: &Loaded, out: &Path, args: &OptimizeArgs) -> Result<Vec<DesignResult>> {
    let cfg = &loaded.config;
    let mut prov = Provenance::new("optimize", &loaded.text);
    let base = resolve_shape(&cfg.geometry.base)?;
    let param = ShapeParameterization::new(&base, basis(cfg)?, cfg.geometry.n_panels)?;
    let objective = objective(cfg, &param, &mut prov)?;
    let model = match args.mode {
        Mode::Latent => {
            let m = load_model(cfg)?;
            prov.add_input(m.input.clone());
            Some(m)
        }
        _ => None,
    };
    let dec = model.map(|m| decoder(cfg, m)).transpose()?;
    let v0 = initial_point(cfg, dec.as_ref())?;

    let cases: Vec<(Option<f64>, Option<f64>)> = if cfg.problem.grid.is_empty() {
        vec![(cfg.problem.cl_bound, cfg.problem.tc_bound)]
    } else {
        cfg.problem.grid.iter().map(|&(a, b)| (Some(a), Some(b))).collect()
    };
    let mut w = Writer::new(out, prov)?;
    let mut dec = dec;
    let mut results = Vec::new();
    for (k, (cl, tc)) in cases.iter().enumerate() {
        let spec = ProblemSpec {
            objective: objective.clone(),
            constraints: constraints(*cl, *tc),
            conditions: conditions(cfg),
            mode: args.mode,
            hh_bound: cfg.problem.hh_bound,
            latent_bound: cfg.problem.latent_bound,
            frozen_fraction: cfg.problem.frozen_fraction,
        };
        let mut problem = DesignProblem::new(spec, param.clone(), dec.take())?;
        let result = problem.solve(&v0, &cfg.solver)?;
        let suffix = if cases.len() > 1 {
            format!("{}_{k}", args.mode.as_str())
        } else {
            args.mode.as_str().to_string()
        };
        w.json(&format!("result_{suffix}.json"), &result)?;
        w.text(&format!("log_{suffix}.csv"), &result.log_csv())?;
        if args.dump_flow {
            w.text(&format!("flow_{suffix}.csv"), &flow_table(&param, &result.delta, conditions(cfg))?)?;
        }
        println!("{}", summarize(&result));
        dec = problem.into_decoder();
        results.push(result);
    }
    Ok(results)
}

/// Panel midpoints, lengths and surface pressure of the solved flow.
fn flow_table(param: &ShapeParameterization, delta: &[f64], cond: FlowConditions) -> Result<String> {
    let sys = param.system(delta, cond)?;
    let u = sys.solve_direct()?;
    let c = sys.coefficients(&u)?;
    let (mx, my) = sys.midpoints();
    let mut s = format!(
        "# cl {:.10e} cm {:.10e} cl_kutta_joukowski {:.10e}\npanel,x_mid,y_mid,ds,cp\n",
        c.cl, c.cm, c.cl_kutta_joukowski
    );
    for i in 0..sys.n_panels() {
        s.push_str(&format!(
            "{i},{:.10e},{:.10e},{:.10e},{:.10e}\n",
            mx[i],
            my[i],
            sys.panel_lengths()[i],
            c.cp[i]
        ));
    }
    Ok(s)
}

pub fn gradcheck(loaded: &Loaded, out: &Path, seed: u64) -> Result<()> {
    let cfg = &loaded.config;
    let prov = Provenance::new("gradcheck", &loaded.text);
    let mut rows: Vec<CheckRow> = gradcheck::check_ops(100, seed)?;

    let d = cfg.geometry.d;
    let base = resolve_shape(&cfg.geometry.base)?;
    // coarse panels keep the finite-difference sweep quick
    let param = ShapeParameterization::new(&base, basis(cfg)?, 60)?;
    let mut dummy = Provenance::new("", "");
    let spec = objective(cfg, &param, &mut dummy)?;
    let delta: Vec<f64> = gaussian_latent(d, seed).iter().map(|v| 2e-3 * v).collect();
    rows.push(gradcheck::check_flow_adjoint(&param, &spec, conditions(cfg), &delta)?);

    // fresh weights on a short schedule; the check is about the chain, not the model
    let small = latentfoil::diffusion::ScheduleSpec {
        timesteps: 10,
        ..cfg.schedule.spec()
    };
    let schedule = small.build()?;
    let net = DenoiserConfig {
        d,
        channels: cfg.model.channels,
        depth: cfg.model.depth,
        time_embed_dim: cfg.model.time_embed_dim,
        timesteps: 10,
        seed,
    };
    let weights = init_weights(&net)?;
    let steps = strided_steps(10, 10)?;
    rows.push(gradcheck::check_sampler_vjp(&weights, &schedule, &steps, 5, seed)?);

    let decoder = Decoder {
        model: Box::new(weights),
        schedule,
        steps,
        normalization: NormalizationBox::new(vec![-1e-4; d], vec![1e-4; d])?,
    };
    let pspec = ProblemSpec {
        objective: spec,
        constraints: constraints(cfg.problem.cl_bound, cfg.problem.tc_bound),
        conditions: conditions(cfg),
        mode: Mode::Latent,
        hh_bound: cfg.problem.hh_bound,
        latent_bound: cfg.problem.latent_bound,
        frozen_fraction: cfg.problem.frozen_fraction,
    };
    let mut problem = DesignProblem::new(pspec, param, Some(decoder))?;
    rows.push(gradcheck::check_latent_chain(&mut problem, &gaussian_latent(d, seed ^ 0x5eed))?);

    let table = gradcheck::table(&rows);
    print!("{table}");
    let mut csv = String::from("check,trials,max_rel_err,tolerance,passed\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{:.3e},{:.1e},{}\n", r.name, r.trials, r.max_rel_err, r.tolerance, r.passed));
    }
    Writer::new(out, prov)?.text("gradcheck.csv", &csv)?;
    let failed = rows.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(GradcheckFailed(failed).into());
    }
    Ok(())
}

#[derive(Deserialize)]
struct ReportCounters {
    objective_evaluations: usize,
    gradient_evaluations: usize,
}

#[derive(Deserialize)]
struct ReportEntry {
    mode: Mode,
    objective: f64,
    cl: f64,
    t_c: f64,
    eps_rel: f64,
    counters: ReportCounters,
    converged: bool,
}

/// Constraint violations above this are flagged in the report.
pub const REPORT_FEASIBILITY: f64 = 2e-3;

pub fn report(loaded: &Loaded, out: &Path, inputs: &[PathBuf]) -> Result<()> {
    let mut prov = Provenance::new("report", &loaded.text);
    let files: Vec<PathBuf> = if inputs.is_empty() {
        let dir = &loaded.config.paths.out_dir;
        require(dir)?;
        let mut f: Vec<PathBuf> = fs::read_dir(dir)
            .with_context(|| format!("listing {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("result_") && n.ends_with(".json"))
            })
            .collect();
        f.sort();
        f
    } else {
        inputs.to_vec()
    };
    if files.is_empty() {
        return Err(anyhow!(MissingArtifact(loaded.config.paths.out_dir.join("result_*.json"))));
    }
    let mut table = format!(
        "{:<28} {:<10} {:>13} {:>8} {:>8} {:>10} {:>5} {:>6} {:>9}\n",
        "file", "mode", "J", "Cl", "t/c", "eps_rel", "#J", "#gradJ", "converged"
    );
    let mut csv = String::from("file,mode,J,Cl,t_c,eps_rel,feasible,n_J,n_gradJ,converged\n");
    for f in &files {
        let (e, input): (ReportEntry, _) = read_json(f)?;
        prov.add_input(input);
        let name = f.file_name().map_or_else(|| f.display().to_string(), |n| n.to_string_lossy().into_owned());
        let flag = if e.eps_rel > REPORT_FEASIBILITY { "*" } else { "" };
        table.push_str(&format!(
            "{:<28} {:<10} {:>13.6e} {:>8.4} {:>8.4} {:>9.2e}{:1} {:>5} {:>6} {:>9}\n",
            name,
            e.mode.as_str(),
            e.objective,
            e.cl,
            e.t_c,
            e.eps_rel,
            flag,
            e.counters.objective_evaluations,
            e.counters.gradient_evaluations,
            e.converged
        ));
        csv.push_str(&format!(
            "{name},{},{:.10e},{:.6},{:.6},{:.3e},{},{},{},{}\n",
            e.mode.as_str(),
            e.objective,
            e.cl,
            e.t_c,
            e.eps_rel,
            flag.is_empty(),
            e.counters.objective_evaluations,
            e.counters.gradient_evaluations,
            e.converged
        ));
    }
    table.push_str(&format!("* eps_rel above {REPORT_FEASIBILITY:.0e}\n"));
    print!("{table}");
    Writer::new(out, prov)?.text("report.csv", &csv)?;
    Ok(())
}
