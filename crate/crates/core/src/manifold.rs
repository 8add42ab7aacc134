//! Singular-value signature of the learned score at `t = 1`.
//!
//! A denoiser that has learned a low-dimensional data manifold has a score
//! Jacobian whose spectrum drops sharply after the manifold's codimension.

use std::fmt::Write as _;

use crate::autodiff::Tape;
use crate::denoiser::NoisePredictor;
use crate::error::{invalid, Error, Result};

/// Default relative rank threshold.
pub const DEFAULT_TAU: f64 = 1e-2;

/// Orthogonality tolerance of the Jacobi sweeps.
pub const JACOBI_TOL: f64 = 1e-12;

const MAX_SWEEPS: usize = 100;

/// `J_ij = d[beta_1 s(x)]_i / dx_j = -d eps_hat(x, 1)_i / dx_j`, row-major,
/// one reverse sweep per row.
pub fn score_jacobian<M: NoisePredictor + ?Sized>(model: &M, x: &[f64]) -> Result<Vec<f64>> {
    let d = model.dim();
    if x.len() != d {
        return invalid(format!("point has length {}, expected {d}", x.len()));
    }
    let mut tape = Tape::new();
    let params = model.prepare(&mut tape, false)?;
    let xv = tape.vector_variable(x);
    let eps = model.predict(&mut tape, params, xv, 1)?;
    let mut jac = vec![0.0; d * d];
    let mut seed = vec![0.0; d];
    for i in 0..d {
        seed[i] = 1.0;
        let row = tape.backward(eps, Some(&seed))?.wrt(xv);
        for (j, v) in row.into_iter().enumerate() {
            jac[i * d + j] = -v;
        }
        seed[i] = 0.0;
    }
    Ok(jac)
}

/// Thin SVD `A = U diag(s) V^T` of a row-major `rows x cols` matrix
/// (`rows >= cols`), singular values descending.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Vec<f64>,
    pub s: Vec<f64>,
    pub v: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    pub sweeps: usize,
}

impl Svd {
    /// `U diag(s) V^T`, row-major.
    pub fn reconstruct(&self) -> Vec<f64> {
        let (m, n) = (self.rows, self.cols);
        let mut a = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                a[i * n + j] = (0..n).map(|k| self.u[i * n + k] * self.s[k] * self.v[j * n + k]).sum();
            }
        }
        a
    }
}

/// One-sided (Hestenes) Jacobi SVD.
pub fn jacobi_svd(a: &[f64], rows: usize, cols: usize) -> Result<Svd> {
    if a.len() != rows * cols || rows < cols || cols == 0 {
        return invalid(format!("SVD needs a {rows} x {cols} matrix with rows >= cols"));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("matrix has non-finite entries".into()));
    }
    let (m, n) = (rows, cols);
    // work on columns
    let mut w: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a[i * n + j]).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| f64::from(u8::from(i == j))).collect()).collect();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    let mut sweeps = 0;
    loop {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&w[p], &w[p]);
                let beta = dot(&w[q], &w[q]);
                let gamma = dot(&w[p], &w[q]);
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for cols in [&mut w, &mut v] {
                    let (lo, hi) = cols.split_at_mut(q);
                    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                        let (xp, xq) = (*x, *y);
                        *x = c * xp - s * xq;
                        *y = s * xp + c * xq;
                    }
                }
            }
        }
        sweeps += 1;
        if !rotated {
            break;
        }
        if sweeps >= MAX_SWEEPS {
            return Err(Error::Numerical(format!("Jacobi SVD did not converge in {MAX_SWEEPS} sweeps")));
        }
    }
    let mut order: Vec<(f64, usize)> = w.iter().enumerate().map(|(j, c)| (dot(c, c).sqrt(), j)).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut u = vec![0.0; m * n];
    let mut vv = vec![0.0; n * n];
    let mut s = Vec::with_capacity(n);
    for (k, &(sigma, j)) in order.iter().enumerate() {
        s.push(sigma);
        for i in 0..m {
            u[i * n + k] = if sigma > 0.0 { w[j][i] / sigma } else { 0.0 };
        }
        for i in 0..n {
            vv[i * n + k] = v[j][i];
        }
    }
    Ok(Svd {
        u,
        s,
        v: vv,
        rows: m,
        cols: n,
        sweeps,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumReport {
    pub point: Vec<f64>,
    /// Descending.
    pub singular_values: Vec<f64>,
    pub tau: f64,
    /// `#{sigma_i >= tau sigma_1}`.
    pub rank: usize,
    /// `sigma_r / sigma_{r+1}` at the numerical rank; `None` at full rank.
    pub rank_gap_ratio: Option<f64>,
    /// 1-based `k` maximizing `sigma_k / sigma_{k+1}`; `None` for flat spectra.
    pub gap_index: Option<usize>,
    pub gap_ratio: Option<f64>,
}

fn ratio(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else if a > 0.0 {
        f64::INFINITY
    } else {
        1.0
    }
}

/// Numerical rank and gaps of a square row-major matrix.
pub fn spectrum(jacobian: &[f64], d: usize, tau: f64, point: Vec<f64>) -> Result<SpectrumReport> {
    if !(tau > 0.0 && tau < 1.0) {
        return invalid(format!("rank threshold must lie in (0, 1), got {tau}"));
    }
    let svd = jacobi_svd(jacobian, d, d)?;
    let s = svd.s;
    let s1 = s[0];
    let rank = s.iter().filter(|&&v| s1 > 0.0 && v >= tau * s1).count();
    let rank_gap_ratio = (rank > 0 && rank < d).then(|| ratio(s[rank - 1], s[rank]));
    let (mut gap_index, mut gap_ratio) = (None, None);
    for k in 1..d {
        let r = ratio(s[k - 1], s[k]);
        // a ratio of exactly one (flat spectrum) is no gap
        if r > 1.0 + 1e-12 && gap_ratio.map_or(true, |g| r > g) {
            gap_index = Some(k);
            gap_ratio = Some(r);
        }
    }
    Ok(SpectrumReport {
        point,
        singular_values: s,
        tau,
        rank,
        rank_gap_ratio,
        gap_index,
        gap_ratio,
    })
}

#[derive(Clone, Debug)]
pub struct SweepReport {
    pub reports: Vec<SpectrumReport>,
}

impl SweepReport {
    pub fn median_rank(&self) -> f64 {
        let mut r: Vec<usize> = self.reports.iter().map(|r| r.rank).collect();
        r.sort_unstable();
        let n = r.len();
        if n % 2 == 1 {
            r[n / 2] as f64
        } else {
            0.5 * (r[n / 2 - 1] + r[n / 2]) as f64
        }
    }

    /// Smallest and largest rank gap ratio among rank-deficient points.
    pub fn gap_range(&self) -> Option<(f64, f64)> {
        let g: Vec<f64> = self.reports.iter().filter_map(|r| r.rank_gap_ratio).collect();
        (!g.is_empty()).then(|| {
            (
                g.iter().copied().fold(f64::INFINITY, f64::min),
                g.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            )
        })
    }

    /// Fraction of points whose rank gap ratio is at least `min_ratio`.
    pub fn fraction_with_gap(&self, min_ratio: f64) -> f64 {
        let n = self.reports.iter().filter(|r| r.rank_gap_ratio.is_some_and(|g| g >= min_ratio)).count();
        n as f64 / self.reports.len() as f64
    }

    /// `point,s1..sd,rank,rank_gap_ratio,gap_index,gap_ratio`.
    pub fn to_csv(&self) -> String {
        let d = self.reports.first().map_or(0, |r| r.singular_values.len());
        let mut out = String::from("point");
        for i in 1..=d {
            let _ = write!(out, ",s{i}");
        }
        out.push_str(",rank,rank_gap_ratio,gap_index,gap_ratio\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6e}"));
        for (i, r) in self.reports.iter().enumerate() {
            let _ = write!(out, "{i}");
            for s in &r.singular_values {
                let _ = write!(out, ",{s:.10e}");
            }
            let _ = writeln!(
                out,
                ",{},{},{},{}",
                r.rank,
                opt(r.rank_gap_ratio),
                r.gap_index.map_or(String::new(), |k| k.to_string()),
                opt(r.gap_ratio)
            );
        }
        out
    }

    /// Log-scale plot of every normalized spectrum `sigma_i / sigma_1`.
    pub fn to_svg(&self) -> String {
        let (w, h, pad) = (640.0, 400.0, 50.0);
        let d = self.reports.first().map_or(1, |r| r.singular_values.len()).max(2);
        let floor = self
            .reports
            .iter()
            .flat_map(|r| r.singular_values.iter().map(move |s| s / r.singular_values[0]))
            .filter(|v| *v > 0.0)
            .fold(1.0f64, f64::min)
            .log10()
            .floor()
            .min(-1.0);
        let px = |i: usize| pad + (w - 2.0 * pad) * i as f64 / (d - 1) as f64;
        let py = |v: f64| {
            let l = if v > 0.0 { v.log10().max(floor) } else { floor };
            pad + (h - 2.0 * pad) * (l / floor)
        };
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
             <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"black\"/>\n\
             <line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
            h - pad,
            h - pad,
            w - pad,
            h - pad
        );
        for e in (floor as i64)..=0 {
            let y = py(10f64.powi(e as i32));
            let _ = writeln!(s, "<text x=\"5\" y=\"{y:.1}\" font-size=\"11\">1e{e}</text>");
        }
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"12\">index</text>", w / 2.0, h - 15.0);
        for r in &self.reports {
            let s1 = r.singular_values[0];
            let pts: Vec<String> = r
                .singular_values
                .iter()
                .enumerate()
                .map(|(i, v)| format!("{:.1},{:.1}", px(i), py(if s1 > 0.0 { v / s1 } else { 0.0 })))
                .collect();
            let _ = writeln!(
                s,
                "<polyline fill=\"none\" stroke=\"steelblue\" stroke-opacity=\"0.6\" points=\"{}\"/>",
                pts.join(" ")
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Spectrum at every point.
pub fn spectrum_sweep<M: NoisePredictor + ?Sized>(model: &M, points: &[Vec<f64>], tau: f64) -> Result<SweepReport> {
    if points.is_empty() {
        return invalid("spectrum sweep needs at least one point");
    }
    let d = model.dim();
    let reports = points
        .iter()
        .map(|p| spectrum(&score_jacobian(model, p)?, d, tau, p.clone()))
        .collect::<Result<_>>()?;
    Ok(SweepReport { reports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Shape, Var};
    use crate::denoiser::{init_weights, DenoiserConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Linear(usize, Vec<f64>);

    impl NoisePredictor for Linear {
        fn dim(&self) -> usize {
            self.0
        }
        fn prepare(&self, tape: &mut Tape, _: bool) -> Result<Option<Var>> {
            tape.constant(Shape::Matrix(self.0, self.0), self.1.clone()).map(Some)
        }
        fn predict(&self, tape: &mut Tape, p: Option<Var>, x: Var, _: usize) -> Result<Var> {
            tape.matvec(p.unwrap(), x)
        }
    }

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn linear_stub_jacobian_is_negated_matrix() {
        let m = random(25, 1);
        let j = score_jacobian(&Linear(5, m.clone()), &[0.1; 5]).unwrap();
        for (a, b) in j.iter().zip(&m) {
            assert_eq!(*a, -b);
        }
    }

    #[test]
    fn network_jacobian_matches_finite_differences() {
        let w = init_weights(&DenoiserConfig {
            d: 8,
            channels: 4,
            depth: 1,
            time_embed_dim: 8,
            timesteps: 100,
            seed: 3,
        })
        .unwrap();
        let x = random(8, 2);
        let j = score_jacobian(&w, &x).unwrap();
        let h = 1e-6;
        for col in 0..8 {
            let mut p = x.clone();
            p[col] += h;
            let mut m = x.clone();
            m[col] -= h;
            let (ep, em) = (w.forward(&p, 1).unwrap(), w.forward(&m, 1).unwrap());
            for row in 0..8 {
                let fd = -(ep[row] - em[row]) / (2.0 * h);
                let a = j[row * 8 + col];
                assert!((fd - a).abs() <= 1e-4 * fd.abs().max(1e-4), "({row},{col}) {fd} vs {a}");
            }
        }
    }

    #[test]
    fn svd_reconstructs_random_matrix() {
        let a = random(40 * 40, 5);
        let svd = jacobi_svd(&a, 40, 40).unwrap();
        let r = svd.reconstruct();
        let num: f64 = a.iter().zip(&r).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let den: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(num / den < 1e-10);
        assert!(svd.s.windows(2).all(|w| w[0] >= w[1]));
        let na = nalgebra::DMatrix::from_row_slice(40, 40, &a).singular_values();
        let mut ns: Vec<f64> = na.iter().copied().collect();
        ns.sort_by(|a, b| b.total_cmp(a));
        for (x, y) in svd.s.iter().zip(&ns) {
            assert!((x - y).abs() < 1e-10 * ns[0]);
        }
    }

    #[test]
    fn rank_one_and_identity() {
        let u = random(6, 7);
        let v = random(6, 8);
        let a: Vec<f64> = (0..36).map(|k| u[k / 6] * v[k % 6]).collect();
        let r = spectrum(&a, 6, DEFAULT_TAU, vec![]).unwrap();
        assert_eq!(r.rank, 1);
        assert!(r.singular_values[1] / r.singular_values[0] < 1e-12);
        assert_eq!(r.gap_index, Some(1));
        let eye: Vec<f64> = (0..36).map(|k| f64::from(u8::from(k / 6 == k % 6))).collect();
        let r = spectrum(&eye, 6, DEFAULT_TAU, vec![]).unwrap();
        assert_eq!(r.rank, 6);
        assert_eq!(r.gap_index, None);
        assert_eq!(r.rank_gap_ratio, None);
    }

    #[test]
    fn non_finite_matrix_is_numerical_error() {
        assert!(matches!(jacobi_svd(&[f64::NAN, 0.0, 0.0, 1.0], 2, 2), Err(Error::Numerical(_))));
    }

    #[test]
    fn sweep_rows_and_determinism() {
        let lin = Linear(4, vec![2.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1e-3, 0.0, 0.0, 0.0, 0.0, 1e-4]);
        let p = vec![0.0; 4];
        let rep = spectrum_sweep(&lin, &[p.clone(), p.clone()], DEFAULT_TAU).unwrap();
        assert_eq!(rep.reports[0], rep.reports[1]);
        assert_eq!(rep.reports[0].rank, 2);
        assert_eq!(rep.reports[0].rank_gap_ratio, Some(1000.0));
        assert_eq!(rep.median_rank(), 2.0);
        let csv = rep.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("point,s1,s2,s3,s4,rank,"));
        assert!(rep.to_svg().contains("<polyline"));
        let single = spectrum_sweep(&lin, &[p], DEFAULT_TAU).unwrap();
        assert_eq!(single.to_csv().lines().count(), 2);
        assert!(spectrum_sweep(&lin, &[], DEFAULT_TAU).is_err());
    }
}
