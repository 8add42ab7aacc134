//! Fixtures shared by the benchmarks.

use latentfoil::denoiser::{init_weights, DenoiserConfig, DenoiserWeights};
use latentfoil::diffusion::{NoiseSchedule, ScheduleSpec};
use latentfoil::flow::{FlowConditions, ObjectiveSpec, PanelSystem, ShapeParameterization};
use latentfoil::geometry::{naca4, BumpBasis};

pub const D: usize = 40;

/// NACA 0012 with the default bump basis at `n_panels`.
pub fn parameterization(n_panels: usize) -> ShapeParameterization {
    let base = naca4("0012", 200).expect("valid code");
    ShapeParameterization::new(&base, BumpBasis::new(D).expect("basis"), n_panels).expect("parameterization")
}

pub fn system(param: &ShapeParameterization, alpha_deg: f64) -> PanelSystem {
    param
        .system(&vec![0.0; D], FlowConditions::from_degrees(alpha_deg))
        .expect("system")
}

/// Pressure of NACA 2412 on the same panelling.
pub fn target_cp(n_panels: usize, alpha_deg: f64) -> ObjectiveSpec {
    let t = naca4("2412", 200).expect("valid code");
    let p = ShapeParameterization::new(&t, BumpBasis::new(D).expect("basis"), n_panels).expect("parameterization");
    let sys = system(&p, alpha_deg);
    let u = sys.solve_direct().expect("solve");
    ObjectiveSpec::TargetCp {
        target: sys.coefficients(&u).expect("coefficients").cp,
    }
}

pub fn denoiser() -> (DenoiserWeights, NoiseSchedule) {
    let weights = init_weights(&DenoiserConfig::default()).expect("weights");
    (weights, ScheduleSpec::default().build().expect("schedule"))
}
