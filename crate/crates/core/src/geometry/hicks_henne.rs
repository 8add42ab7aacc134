//! Hicks-Henne bump functions `f_n(x) = sin^3(pi x^e_n)` with
//! `e_n = ln 0.5 / ln x_n`, so each bump peaks at `x_n` with value 1 and
//! vanishes at both chord ends.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{AirfoilShape, Surface, THICKNESS_POINTS};
use crate::error::{invalid, Error, Result};

/// Points per surface used when fitting coordinates to bump coefficients.
pub const FIT_POINTS: usize = 200;

const SINGULAR_CUTOFF: f64 = 1e-14;

/// Peak locations and exponents for one surface; the same basis is applied to
/// the upper and the lower surface.
#[derive(Clone, Debug, PartialEq)]
pub struct BumpBasis {
    peaks: Vec<f64>,
    exponents: Vec<f64>,
}

impl BumpBasis {
    /// Basis for a design vector of length `d`: `d / 2` bumps per surface at
    /// `x_n = n / (d/2 + 1)`.
    pub fn new(d: usize) -> Result<Self> {
        if d < 2 || d % 2 != 0 {
            return invalid(format!("design dimension must be even and >= 2, got {d}"));
        }
        let half = d / 2;
        let peaks: Vec<f64> = (1..=half).map(|n| n as f64 / (half + 1) as f64).collect();
        Self::from_peaks(peaks)
    }

    pub fn from_peaks(peaks: Vec<f64>) -> Result<Self> {
        if peaks.is_empty() {
            return invalid("bump basis needs at least one peak");
        }
        if let Some(p) = peaks.iter().find(|&&p| !(p > 0.0 && p < 1.0)) {
            return invalid(format!("bump peak {p} outside (0, 1)"));
        }
        let exponents = peaks.iter().map(|&p| 0.5f64.ln() / p.ln()).collect();
        Ok(Self { peaks, exponents })
    }

    /// Bumps per surface.
    pub fn len(&self) -> usize {
        self.peaks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.peaks.is_empty()
    }

    /// Full design dimension (both surfaces).
    pub fn dim(&self) -> usize {
        2 * self.peaks.len()
    }

    pub fn peaks(&self) -> &[f64] {
        &self.peaks
    }

    pub fn exponents(&self) -> &[f64] {
        &self.exponents
    }

    pub fn evaluate(&self, n: usize, x: f64) -> Result<f64> {
        if n >= self.len() {
            return invalid(format!("bump index {n} out of range"));
        }
        if !(0.0..=1.0).contains(&x) {
            return invalid(format!("bump argument {x} outside [0, 1]"));
        }
        Ok(self.value(n, x))
    }

    pub(crate) fn value(&self, n: usize, x: f64) -> f64 {
        if x <= 0.0 || x >= 1.0 {
            return 0.0;
        }
        (PI * x.powf(self.exponents[n])).sin().powi(3)
    }

    /// Row-major `(xs.len(), len())` matrix of bump values.
    pub fn matrix(&self, xs: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(xs.len(), self.len(), |i, n| self.value(n, xs[i]))
    }
}

/// Design vector: upper-surface coefficients followed by lower-surface ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HicksHenneVector(Vec<f64>);

impl HicksHenneVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.len() % 2 != 0 {
            return invalid(format!(
                "Hicks-Henne vector length must be even and positive, got {}",
                values.len()
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return invalid("Hicks-Henne vector has non-finite entries");
        }
        Ok(Self(values))
    }

    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn upper(&self) -> &[f64] {
        &self.0[..self.0.len() / 2]
    }

    pub fn lower(&self) -> &[f64] {
        &self.0[self.0.len() / 2..]
    }
}

/// Output of [`deform`]. Self-intersecting results are returned, not rejected.
#[derive(Clone, Debug)]
pub struct Deformed {
    pub shape: AirfoilShape,
    pub self_intersecting: bool,
}

fn bump_sum(basis: &BumpBasis, coeffs: &[f64], x: f64) -> f64 {
    coeffs
        .iter()
        .enumerate()
        .filter(|(_, c)| **c != 0.0)
        .map(|(n, c)| c * basis.value(n, x))
        .sum()
}

/// Add the bump deformation to both surfaces of `base`; abscissae are kept.
pub fn deform(base: &AirfoilShape, delta: &HicksHenneVector, basis: &BumpBasis) -> Result<Deformed> {
    if delta.len() != basis.dim() {
        return invalid(format!(
            "design vector has length {}, basis expects {}",
            delta.len(),
            basis.dim()
        ));
    }
    let shift = |s: &Surface, c: &[f64]| s.map_y(|x, y| y + bump_sum(basis, c, x));
    let shape = AirfoilShape::new(shift(base.upper(), delta.upper()), shift(base.lower(), delta.lower()));
    let self_intersecting = shape.is_self_intersecting();
    Ok(Deformed {
        shape,
        self_intersecting,
    })
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub delta: HicksHenneVector,
    /// Root-mean-square coordinate error over both surfaces.
    pub residual: f64,
}

/// Linear least-squares fit of bump coefficients deforming `base` into
/// `target`, both evaluated on [`FIT_POINTS`] cosine-spaced points per surface.
/// Exact on the span of the basis; see [`fit_hicks_henne_damped`] for shapes
/// outside it.
pub fn fit_hicks_henne(target: &AirfoilShape, base: &AirfoilShape, basis: &BumpBasis) -> Result<FitResult> {
    fit(target, base, basis, 0.0)
}

/// Relative singular-value cutoff used when fitting training shapes.
pub const CORPUS_DAMPING: f64 = 1e-3;

/// Tikhonov-damped fit: singular directions of the bump matrix below
/// `cutoff * sigma_max` are suppressed (filter factor `s^2 / (s^2 + lambda)`
/// with `lambda = (cutoff * sigma_max)^2`).
///
/// Shapes outside the span leave a residual that the undamped solution
/// absorbs into huge cancelling coefficients along near-null directions
/// (|delta| ~ 1e4 for plain NACA sections); damping keeps the coefficients
/// at the scale of the shape change for a small increase in residual.
pub fn fit_hicks_henne_damped(
    target: &AirfoilShape,
    base: &AirfoilShape,
    basis: &BumpBasis,
    cutoff: f64,
) -> Result<FitResult> {
    if !(cutoff >= 0.0 && cutoff < 1.0) {
        return invalid(format!("damping cutoff must lie in [0, 1), got {cutoff}"));
    }
    fit(target, base, basis, cutoff)
}

fn fit(target: &AirfoilShape, base: &AirfoilShape, basis: &BumpBasis, cutoff: f64) -> Result<FitResult> {
    let target = target.resample(FIT_POINTS)?;
    let base = base.resample(FIT_POINTS)?;
    let xs = target.upper().x().to_vec();
    let b = basis.matrix(&xs);
    // The bump columns are strongly correlated (cond(B) ~ 4e8 for d = 40), so
    // the Gram matrix is too ill-conditioned for normal equations; solve the
    // least-squares problem on B itself.
    let svd = b.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if !(smax > 0.0) || svd.singular_values.min() <= smax * SINGULAR_CUTOFF {
        return Err(Error::Numerical("bump matrix is rank deficient on the fit grid".into()));
    }
    let (u, vt) = match (&svd.u, &svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::Numerical("singular vectors unavailable".into())),
    };
    let lambda = (cutoff * smax).powi(2);
    let filter: Vec<f64> = svd.singular_values.iter().map(|s| s / (s * s + lambda)).collect();

    let mut delta = Vec::with_capacity(basis.dim());
    let mut sq = 0.0;
    for (t, s) in [(target.upper(), base.upper()), (target.lower(), base.lower())] {
        let diff = DVector::from_iterator(xs.len(), t.y().iter().zip(s.y()).map(|(a, b)| a - b));
        let mut proj = u.tr_mul(&diff);
        for (p, f) in proj.iter_mut().zip(&filter) {
            *p *= f;
        }
        let coeffs = vt.tr_mul(&proj);
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::Numerical("fit produced non-finite coefficients".into()));
        }
        let err = &b * &coeffs - &diff;
        sq += err.norm_squared();
        delta.extend(coeffs.iter());
    }
    let residual = (sq / (2 * xs.len()) as f64).sqrt();
    Ok(FitResult {
        delta: HicksHenneVector::new(delta)?,
        residual,
    })
}

/// Maximum thickness of `deform(base, delta)` as an explicit function of the
/// design vector, with its gradient.
///
/// The thickness is sampled on [`THICKNESS_POINTS`] cosine-spaced stations;
/// bumps are evaluated there analytically, so the map is linear in `delta`
/// before the maximum is taken.
#[derive(Clone, Debug)]
pub struct ThicknessModel {
    base: Vec<f64>,
    bumps: DMatrix<f64>,
}

impl ThicknessModel {
    pub fn new(base: &AirfoilShape, basis: &BumpBasis) -> Result<Self> {
        let (x, base) = base.thickness_distribution(THICKNESS_POINTS)?;
        Ok(Self {
            base,
            bumps: basis.matrix(&x),
        })
    }

    fn distribution(&self, delta: &[f64]) -> Result<Vec<f64>> {
        let k = self.bumps.ncols();
        if delta.len() != 2 * k {
            return invalid(format!("design vector has length {}, expected {}", delta.len(), 2 * k));
        }
        Ok(self
            .base
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let row = self.bumps.row(i);
                t + (0..k).map(|n| row[n] * (delta[n] - delta[k + n])).sum::<f64>()
            })
            .collect())
    }

    fn argmax(t: &[f64]) -> usize {
        t.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
            .0
    }

    pub fn value(&self, delta: &[f64]) -> Result<f64> {
        let t = self.distribution(delta)?;
        Ok(t[Self::argmax(&t)])
    }

    /// Value and gradient; the gradient is that of the active station.
    pub fn value_and_gradient(&self, delta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let t = self.distribution(delta)?;
        let i = Self::argmax(&t);
        let row = self.bumps.row(i);
        let mut g: Vec<f64> = row.iter().copied().collect();
        g.extend(row.iter().map(|v| -v));
        Ok((t[i], g))
    }
}

/// Per-component affine box mapping training vectors onto `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationBox {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl NormalizationBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return invalid("normalization bounds must be nonempty and equally long");
        }
        if let Some(i) = lo.iter().zip(&hi).position(|(l, h)| !(h > l)) {
            return invalid(format!("normalization box is degenerate in component {i}"));
        }
        Ok(Self { lo, hi })
    }

    /// Componentwise min/max over a set of vectors.
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut it = samples.into_iter();
        let first = it
            .next()
            .ok_or_else(|| Error::InvalidArgument("no samples for normalization".into()))?;
        let mut lo = first.to_vec();
        let mut hi = first.to_vec();
        for s in it {
            if s.len() != lo.len() {
                return invalid("samples of differing length");
            }
            for i in 0..s.len() {
                lo[i] = lo[i].min(s[i]);
                hi[i] = hi[i].max(s[i]);
            }
        }
        Self::new(lo, hi)
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    /// `hi - lo`, the Jacobian diagonal of [`Self::denormalize`].
    pub fn widths(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| h - l).collect()
    }

    pub fn normalize(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(x, (l, h))| (x - l) / (h - l))
            .collect()
    }

    pub fn denormalize(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(x, (l, h))| l + x * (h - l))
            .collect()
    }
}
