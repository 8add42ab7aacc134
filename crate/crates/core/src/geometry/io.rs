//! Selig / Lednicer coordinate files and CSV output.

use std::fmt::Write as _;

use super::{AirfoilShape, Surface};
use crate::error::{Error, Result};

/// Trailing-edge gaps up to this size (in chords) are closed by averaging.
pub const TE_CLOSE_GAP: f64 = 1e-3;

const MIN_SURFACE_POINTS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoordinateFormat {
    /// One loop: trailing edge, upper surface, leading edge, lower surface.
    Selig,
    /// Point-count header, then upper and lower blocks from the leading edge.
    Lednicer,
}

struct Row {
    line: usize,
    x: f64,
    y: f64,
}

fn numeric_rows(text: &str) -> Result<Vec<Row>> {
    let mut rows = Vec::new();
    let mut header_seen = false;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        let parsed: Option<Vec<f64>> = toks.iter().map(|t| t.parse::<f64>().ok()).collect();
        match parsed {
            Some(v) if v.len() == 2 && v.iter().all(|x| x.is_finite()) => {
                header_seen = true;
                rows.push(Row {
                    line: i + 1,
                    x: v[0],
                    y: v[1],
                })
            }
            _ if !header_seen => header_seen = true,
            _ => {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected two numbers, found {line:?}"),
                })
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: text.lines().count().max(1),
            message: "no coordinate rows".into(),
        });
    }
    Ok(rows)
}

fn lednicer_counts(first: &Row) -> Option<(usize, usize)> {
    let integral = |v: f64| v >= 2.0 && v.fract() == 0.0;
    (integral(first.x) && integral(first.y)).then(|| (first.x as usize, first.y as usize))
}

/// Parse a Selig- or Lednicer-format coordinate file into a normalized shape.
pub fn parse_coordinates(bytes: &[u8]) -> Result<AirfoilShape> {
    parse_coordinates_with_format(bytes).map(|(s, _)| s)
}

pub fn parse_coordinates_with_format(bytes: &[u8]) -> Result<(AirfoilShape, CoordinateFormat)> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
        line: 1,
        message: format!("not UTF-8: {e}"),
    })?;
    let rows = numeric_rows(text)?;
    if let Some((nu, nl)) = lednicer_counts(&rows[0]) {
        let body = &rows[1..];
        if body.len() != nu + nl {
            return Err(Error::MalformedInput(format!(
                "Lednicer header promises {nu} + {nl} points, file has {}",
                body.len()
            )));
        }
        let upper = &body[..nu];
        let lower = &body[nu..];
        // Rebuild a Selig loop so both formats share the normalization path.
        let mut pts: Vec<(f64, f64)> = upper.iter().rev().map(|r| (r.x, r.y)).collect();
        let skip = usize::from(
            lower
                .first()
                .zip(upper.first())
                .is_some_and(|(a, b)| a.x == b.x && a.y == b.y),
        );
        pts.extend(lower.iter().skip(skip).map(|r| (r.x, r.y)));
        let pts = normalize_loop(&pts)?;
        return Ok((surfaces_from_loop(&pts, rows[0].line)?, CoordinateFormat::Lednicer));
    }
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.x, r.y)).collect();
    let pts = normalize_loop(&pts)?;
    Ok((surfaces_from_loop(&pts, rows[0].line)?, CoordinateFormat::Selig))
}

/// Shift the leading edge (minimum x) to x = 0 and the trailing-edge midpoint
/// to y = 0, and scale the chord to unit length. The loop is not rotated.
pub(crate) fn normalize_loop(pts: &[(f64, f64)]) -> Result<Vec<(f64, f64)>> {
    let (first, last) = match (pts.first(), pts.last()) {
        (Some(a), Some(b)) => (*a, *b),
        _ => return Err(Error::MalformedInput("empty coordinate loop".into())),
    };
    let xmin = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let xmax = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let chord = xmax - xmin;
    if !(chord > 0.0) {
        return Err(Error::MalformedInput("zero chord length".into()));
    }
    let y_te = 0.5 * (first.1 + last.1);
    Ok(pts
        .iter()
        .map(|&(x, y)| ((x - xmin) / chord, (y - y_te) / chord))
        .collect())
}

fn monotone_surface(pts: impl Iterator<Item = (f64, f64)>) -> (Vec<f64>, Vec<f64>) {
    let mut xs: Vec<f64> = Vec::new();
    let mut ys = Vec::new();
    for (x, y) in pts {
        if xs.last().is_some_and(|&last| x <= last) {
            continue;
        }
        xs.push(x);
        ys.push(y);
    }
    (xs, ys)
}

/// Split a normalized Selig loop at the leading edge into two surfaces.
pub(crate) fn surfaces_from_loop(pts: &[(f64, f64)], line: usize) -> Result<AirfoilShape> {
    let ile = pts
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .0.total_cmp(&b.1 .0))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::MalformedInput("empty coordinate loop".into()))?;
    let (mut ax, mut ay) = monotone_surface(pts[..=ile].iter().rev().copied());
    let (mut bx, mut by) = monotone_surface(pts[ile..].iter().copied());
    for (xs, ys) in [(&ax, &ay), (&bx, &by)] {
        if xs.len() < MIN_SURFACE_POINTS {
            return Err(Error::MalformedInput(format!(
                "surface has {} points, need at least {MIN_SURFACE_POINTS} (data from line {line})",
                xs.len().min(ys.len())
            )));
        }
    }
    for xs in [&mut ax, &mut bx] {
        let last = xs.len() - 1;
        if xs[last] < 1.0 - TE_CLOSE_GAP {
            return Err(Error::MalformedInput(format!(
                "surface ends at x = {:.6}, short of the trailing edge",
                xs[last]
            )));
        }
        xs[0] = 0.0;
        xs[last] = 1.0;
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    if mean(&ay) < mean(&by) {
        std::mem::swap(&mut ax, &mut bx);
        std::mem::swap(&mut ay, &mut by);
    }
    let (nu, nl) = (ay.len() - 1, by.len() - 1);
    let gap = ay[nu] - by[nl];
    if gap.abs() <= TE_CLOSE_GAP {
        let mid = 0.5 * (ay[nu] + by[nl]);
        ay[nu] = mid;
        by[nl] = mid;
    }
    Ok(AirfoilShape::new(Surface::new(ax, ay)?, Surface::new(bx, by)?))
}

/// Two-column `x,y` CSV of the Selig-ordered contour.
pub fn to_csv(shape: &AirfoilShape) -> String {
    let mut out = String::from("x,y\n");
    for (x, y) in shape.selig_loop() {
        let _ = writeln!(out, "{x:.12},{y:.12}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::naca4;

    fn selig_text(shape: &AirfoilShape, title: &str) -> String {
        let mut s = format!("{title}\n");
        for (x, y) in shape.selig_loop() {
            let _ = writeln!(s, " {x:.8}  {y:.8}");
        }
        s
    }

    fn lednicer_text(shape: &AirfoilShape) -> String {
        let mut s = format!(
            "LEDNICER TEST\n{}. {}.\n\n",
            shape.upper().len(),
            shape.lower().len()
        );
        for (x, y) in shape.upper().x().iter().zip(shape.upper().y()) {
            let _ = writeln!(s, "{x:.8} {y:.8}");
        }
        s.push('\n');
        for (x, y) in shape.lower().x().iter().zip(shape.lower().y()) {
            let _ = writeln!(s, "{x:.8} {y:.8}");
        }
        s
    }

    #[test]
    fn selig_fixture_roundtrip() {
        let naca = naca4("0012", 81).unwrap();
        let (shape, fmt) = parse_coordinates_with_format(selig_text(&naca, "NACA 0012").as_bytes()).unwrap();
        assert_eq!(fmt, CoordinateFormat::Selig);
        assert!((shape.thickness_to_chord() - 0.12).abs() < 1e-3);
    }

    #[test]
    fn lednicer_matches_selig() {
        let naca = naca4("2412", 61).unwrap();
        let a = parse_coordinates(selig_text(&naca, "x").as_bytes()).unwrap();
        let (b, fmt) = parse_coordinates_with_format(lednicer_text(&naca).as_bytes()).unwrap();
        assert_eq!(fmt, CoordinateFormat::Lednicer);
        assert_eq!(a, b);
    }

    #[test]
    fn scaled_and_shifted_input_is_normalized() {
        let naca = naca4("0012", 40).unwrap();
        let mut s = String::from("big\n");
        for (x, y) in naca.selig_loop() {
            let _ = writeln!(s, "{} {}", 3.0 + 2.0 * x, -1.0 + 2.0 * y);
        }
        let shape = parse_coordinates(s.as_bytes()).unwrap();
        assert!((shape.thickness_to_chord() - naca.thickness_to_chord()).abs() < 1e-9);
    }

    #[test]
    fn small_te_gap_is_closed_large_kept() {
        let naca = naca4("0012", 40).unwrap();
        let with_gap = |gap: f64| {
            let loop_ = naca.selig_loop();
            let n = loop_.len();
            let mut s = String::from("gap\n");
            for (i, (x, y)) in loop_.into_iter().enumerate() {
                let y = if i == 0 { y + gap / 2.0 } else if i == n - 1 { y - gap / 2.0 } else { y };
                let _ = writeln!(s, "{x} {y}");
            }
            parse_coordinates(s.as_bytes()).unwrap()
        };
        let closed = with_gap(5e-4);
        assert_eq!(closed.upper().y().last(), closed.lower().y().last());
        let open = with_gap(5e-3);
        let g = open.upper().y().last().unwrap() - open.lower().y().last().unwrap();
        assert!((g - 5e-3).abs() < 1e-9);
    }

    #[test]
    fn empty_file_is_parse_error() {
        assert!(matches!(parse_coordinates(b""), Err(Error::Parse { .. })));
        assert!(matches!(parse_coordinates(b"title only\n"), Err(Error::Parse { .. })));
    }

    #[test]
    fn non_numeric_row_reports_line() {
        let text = "title\n1.0 0.0\n0.5 0.05\n0.0 abc\n";
        match parse_coordinates(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn too_few_points_is_malformed() {
        let text = "t\n1 0\n0.5 0.05\n0 0\n0.5 -0.05\n1 0\n";
        assert!(matches!(parse_coordinates(text.as_bytes()), Err(Error::MalformedInput(_))));
    }

    #[test]
    fn csv_has_header_and_loop() {
        let naca = naca4("0012", 20).unwrap();
        let csv = to_csv(&naca);
        assert!(csv.starts_with("x,y\n"));
        assert_eq!(csv.lines().count(), 1 + 39);
    }
}
