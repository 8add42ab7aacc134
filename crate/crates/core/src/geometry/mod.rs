//! Airfoil contours, Hicks-Henne deformation and coordinate-file handling.

mod hicks_henne;
mod interp;
mod io;
mod naca;

pub use hicks_henne::{
    deform, fit_hicks_henne, fit_hicks_henne_damped, BumpBasis, Deformed, FitResult, HicksHenneVector, CORPUS_DAMPING,
    NormalizationBox, ThicknessModel, FIT_POINTS,
};
pub use interp::Pchip;
pub use io::{parse_coordinates, to_csv, CoordinateFormat};
pub use naca::{naca4, naca4_params};

use crate::error::{invalid, Result};

/// Tolerance on the 0 / 1 chord endpoints.
pub const ENDPOINT_TOL: f64 = 1e-9;

/// Default surface resolution used for thickness evaluation.
pub const THICKNESS_POINTS: usize = 200;

/// One surface of an airfoil, leading edge to trailing edge.
#[derive(Clone, Debug, PartialEq)]
pub struct Surface {
    x: Vec<f64>,
    y: Vec<f64>,
}

impl Surface {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() {
            return invalid("surface x and y lengths differ");
        }
        if x.len() < 2 {
            return invalid("surface needs at least two points");
        }
        if x[0].abs() > ENDPOINT_TOL || (x[x.len() - 1] - 1.0).abs() > ENDPOINT_TOL {
            return invalid(format!(
                "surface must span x = 0..1, got {}..{}",
                x[0],
                x[x.len() - 1]
            ));
        }
        if let Some(i) = x.windows(2).position(|w| w[1] <= w[0]) {
            return invalid(format!("surface x not strictly increasing at index {}", i + 1));
        }
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return invalid("surface contains non-finite coordinates");
        }
        Ok(Self { x, y })
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn interpolant(&self) -> Pchip {
        Pchip::new(&self.x, &self.y).expect("validated surface")
    }

    fn map_y(&self, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            x: self.x.clone(),
            y: self.x.iter().zip(&self.y).map(|(&x, &y)| f(x, y)).collect(),
        }
    }
}

/// Closed (or open trailing edge) chord-normalized airfoil contour.
#[derive(Clone, Debug, PartialEq)]
pub struct AirfoilShape {
    upper: Surface,
    lower: Surface,
}

/// Cosine-spaced abscissae `x_i = (1 - cos(pi i / (n - 1))) / 2`.
pub fn cosine_spacing(n: usize) -> Vec<f64> {
    let mut x: Vec<f64> = (0..n)
        .map(|i| 0.5 * (1.0 - (std::f64::consts::PI * i as f64 / (n - 1) as f64).cos()))
        .collect();
    x[0] = 0.0;
    x[n - 1] = 1.0;
    x
}

impl AirfoilShape {
    pub fn new(upper: Surface, lower: Surface) -> Self {
        Self { upper, lower }
    }

    pub fn from_xy(ux: Vec<f64>, uy: Vec<f64>, lx: Vec<f64>, ly: Vec<f64>) -> Result<Self> {
        Ok(Self {
            upper: Surface::new(ux, uy)?,
            lower: Surface::new(lx, ly)?,
        })
    }

    pub fn flat_plate(n: usize) -> Self {
        let x = cosine_spacing(n.max(2));
        let s = Surface::new(x.clone(), vec![0.0; x.len()]).expect("valid plate");
        Self {
            upper: s.clone(),
            lower: s,
        }
    }

    pub fn upper(&self) -> &Surface {
        &self.upper
    }

    pub fn lower(&self) -> &Surface {
        &self.lower
    }

    /// Monotone-cubic resampling of both surfaces onto `n` cosine-spaced points.
    pub fn resample(&self, n: usize) -> Result<Self> {
        if n < 10 {
            return invalid(format!("resample needs at least 10 points, got {n}"));
        }
        let x = cosine_spacing(n);
        let resample_surface = |s: &Surface| {
            let p = s.interpolant();
            let y: Vec<f64> = x.iter().map(|&t| p.eval(t)).collect();
            Surface {
                x: x.clone(),
                y,
            }
        };
        Ok(Self {
            upper: resample_surface(&self.upper),
            lower: resample_surface(&self.lower),
        })
    }

    /// Whether both surfaces share the same abscissae.
    pub fn has_shared_abscissae(&self) -> bool {
        self.upper.x == self.lower.x
    }

    /// Upper minus lower surface on `n` shared cosine-spaced abscissae.
    pub fn thickness_distribution(&self, n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let x = cosine_spacing(n);
        let pu = self.upper.interpolant();
        let pl = self.lower.interpolant();
        let t = x.iter().map(|&v| pu.eval(v) - pl.eval(v)).collect();
        Ok((x, t))
    }

    /// Maximum thickness over chord (chord is 1 by normalization).
    pub fn thickness_to_chord(&self) -> f64 {
        let (_, t) = self
            .thickness_distribution(THICKNESS_POINTS)
            .expect("fixed resolution");
        t.into_iter().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Lower surface rising above the upper one anywhere on shared abscissae.
    pub fn is_self_intersecting(&self) -> bool {
        let (_, t) = self
            .thickness_distribution(THICKNESS_POINTS)
            .expect("fixed resolution");
        t.iter().any(|&v| v < -1e-9)
    }

    pub fn scale_y(&self, factor: f64) -> Self {
        Self {
            upper: self.upper.map_y(|_, y| factor * y),
            lower: self.lower.map_y(|_, y| factor * y),
        }
    }

    /// Selig-ordered loop: trailing edge over the upper surface to the leading
    /// edge, then along the lower surface back to the trailing edge.
    pub fn selig_loop(&self) -> Vec<(f64, f64)> {
        let mut pts: Vec<(f64, f64)> = self
            .upper
            .x
            .iter()
            .zip(&self.upper.y)
            .rev()
            .map(|(&x, &y)| (x, y))
            .collect();
        pts.extend(
            self.lower
                .x
                .iter()
                .zip(&self.lower.y)
                .skip(1)
                .map(|(&x, &y)| (x, y)),
        );
        pts
    }
}
