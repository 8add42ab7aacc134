use super::io::{normalize_loop, surfaces_from_loop};
use super::{cosine_spacing, AirfoilShape};
use crate::error::{invalid, Result};

/// NACA 4-digit section from its code, e.g. `"2412"`, resampled to `n` cosine
/// points per surface.
pub fn naca4(code: &str, n: usize) -> Result<AirfoilShape> {
    let digits: Vec<u32> = code.chars().filter_map(|c| c.to_digit(10)).collect();
    if code.len() != 4 || digits.len() != 4 {
        return invalid(format!("NACA code must be four digits, got {code:?}"));
    }
    let m = digits[0] as f64 / 100.0;
    let p = digits[1] as f64 / 10.0;
    let t = (digits[2] * 10 + digits[3]) as f64 / 100.0;
    naca4_params(m, p, t, n)
}

/// NACA 4-digit section with maximum camber `m` at chord station `p` and
/// thickness `t` (all as fractions of chord), closed trailing edge.
///
/// Thickness is applied normal to the camber line, so cambered sections have
/// their leading edge slightly ahead of the mean-line origin; the contour is
/// renormalized to unit chord afterwards.
pub fn naca4_params(m: f64, p: f64, t: f64, n: usize) -> Result<AirfoilShape> {
    if !(0.0..0.1).contains(&m) || !(0.0..=0.4).contains(&t) {
        return invalid(format!("NACA parameters out of range: m={m}, t={t}"));
    }
    if m > 0.0 && !(p > 0.0 && p < 1.0) {
        return invalid(format!("cambered NACA section needs 0 < p < 1, got {p}"));
    }
    if n < 10 {
        return invalid(format!("NACA section needs at least 10 points, got {n}"));
    }
    if m == 0.0 && t == 0.0 {
        return Ok(AirfoilShape::flat_plate(n));
    }

    let xs = cosine_spacing(4 * n);
    let thickness = |x: f64| {
        5.0 * t
            * (0.2969 * x.sqrt() - 0.1260 * x - 0.3516 * x * x + 0.2843 * x.powi(3)
                - 0.1036 * x.powi(4))
    };
    let camber = |x: f64| -> (f64, f64) {
        if m == 0.0 {
            (0.0, 0.0)
        } else if x < p {
            (m / (p * p) * (2.0 * p * x - x * x), 2.0 * m / (p * p) * (p - x))
        } else {
            let q = (1.0 - p) * (1.0 - p);
            (
                m / q * (1.0 - 2.0 * p + 2.0 * p * x - x * x),
                2.0 * m / q * (p - x),
            )
        }
    };
    let mut upper = Vec::with_capacity(xs.len());
    let mut lower = Vec::with_capacity(xs.len());
    for &x in &xs {
        let yt = thickness(x);
        let (yc, slope) = camber(x);
        let th = slope.atan();
        upper.push((x - yt * th.sin(), yc + yt * th.cos()));
        lower.push((x + yt * th.sin(), yc - yt * th.cos()));
    }
    // Selig order: TE along the upper surface to the LE, back along the lower.
    let mut pts: Vec<(f64, f64)> = upper.into_iter().rev().collect();
    pts.extend(lower.into_iter().skip(1));
    let pts = normalize_loop(&pts)?;
    let shape = surfaces_from_loop(&pts, 0)?;
    shape.resample(n)
}
