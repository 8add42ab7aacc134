//! Training corpus: NACA 4-digit sweeps (and parsed coordinate files) fitted
//! to Hicks-Henne vectors and normalized to the unit box.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{fit_hicks_henne_damped, naca4_params, AirfoilShape, BumpBasis, NormalizationBox, FIT_POINTS};

/// Inclusive range sampled at `count` evenly spaced values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl Sweep {
    pub fn values(&self) -> Vec<f64> {
        match self.count {
            0 => Vec::new(),
            1 => vec![self.min],
            n => (0..n)
                .map(|i| self.min + (self.max - self.min) * i as f64 / (n - 1) as f64)
                .collect(),
        }
    }
}

/// Grid over NACA 4-digit camber, camber position and thickness.
/// The default 8 x 8 x 8 grid yields 512 sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NacaSweep {
    pub camber: Sweep,
    pub position: Sweep,
    pub thickness: Sweep,
}

impl Default for NacaSweep {
    fn default() -> Self {
        Self {
            camber: Sweep {
                min: 0.0,
                max: 0.06,
                count: 8,
            },
            position: Sweep {
                min: 0.2,
                max: 0.6,
                count: 8,
            },
            thickness: Sweep {
                min: 0.08,
                max: 0.18,
                count: 8,
            },
        }
    }
}

impl NacaSweep {
    pub fn len(&self) -> usize {
        self.camber.count * self.position.count * self.thickness.count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Named sections, e.g. `naca_m0.0200_p0.400_t0.120`.
    pub fn shapes(&self) -> Result<Vec<(String, AirfoilShape)>> {
        let mut out = Vec::with_capacity(self.len());
        for m in self.camber.values() {
            for p in self.position.values() {
                for t in self.thickness.values() {
                    let shape = naca4_params(m, p, t, FIT_POINTS)?;
                    out.push((format!("naca_m{m:.4}_p{p:.3}_t{t:.3}"), shape));
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct CorpusEntry {
    pub name: String,
    /// Hicks-Henne coefficients relative to the base shape.
    pub delta: Vec<f64>,
    pub residual: f64,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub entries: Vec<CorpusEntry>,
    pub normalization: NormalizationBox,
}

impl Corpus {
    /// Fit every shape against `base` with the given damping cutoff (see
    /// [`fit_hicks_henne_damped`]) and derive the normalization box.
    pub fn fit(shapes: &[(String, AirfoilShape)], base: &AirfoilShape, basis: &BumpBasis, damping: f64) -> Result<Self> {
        if shapes.is_empty() {
            return invalid("corpus has no shapes");
        }
        let mut entries = Vec::with_capacity(shapes.len());
        for (name, shape) in shapes {
            let fit = fit_hicks_henne_damped(shape, base, basis, damping)?;
            entries.push(CorpusEntry {
                name: name.clone(),
                delta: fit.delta.into_inner(),
                residual: fit.residual,
            });
        }
        let normalization = NormalizationBox::from_samples(entries.iter().map(|e| e.delta.as_slice()))?;
        Ok(Self { entries, normalization })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Training vectors mapped into the unit box.
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        self.entries
            .iter()
            .map(|e| self.normalization.normalize(&e.delta))
            .collect()
    }

    pub fn max_residual(&self) -> f64 {
        self.entries.iter().map(|e| e.residual).fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{naca4, CORPUS_DAMPING};

    #[test]
    fn sweep_counts() {
        let s = NacaSweep {
            camber: Sweep { min: 0.0, max: 0.07, count: 8 },
            position: Sweep { min: 0.2, max: 0.6, count: 5 },
            thickness: Sweep { min: 0.08, max: 0.18, count: 11 },
        };
        assert_eq!(s.len(), 440);
        assert_eq!(NacaSweep::default().len(), 512);
        let v = s.thickness.values();
        assert_eq!(v[0], 0.08);
        assert!((v[10] - 0.18).abs() < 1e-15);
    }

    #[test]
    fn default_sweep_fits_tightly() {
        let sweep = NacaSweep {
            camber: Sweep { min: 0.0, max: 0.06, count: 3 },
            position: Sweep { min: 0.2, max: 0.6, count: 3 },
            thickness: Sweep { min: 0.08, max: 0.18, count: 3 },
        };
        let shapes = sweep.shapes().unwrap();
        let base = naca4("0012", FIT_POINTS).unwrap();
        let corpus = Corpus::fit(&shapes, &base, &BumpBasis::new(40).unwrap(), CORPUS_DAMPING).unwrap();
        assert_eq!(corpus.len(), 27);
        // worst case is the 6 % camber, 18 % thickness corner
        assert!(corpus.max_residual() < 2e-3, "{}", corpus.max_residual());
        // coefficients stay at the scale of the shape change
        let amax = corpus
            .entries
            .iter()
            .flat_map(|e| e.delta.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(amax < 0.5, "{amax}");
        let n = corpus.normalized();
        for k in 0..40 {
            let lo = n.iter().map(|v| v[k]).fold(f64::INFINITY, f64::min);
            let hi = n.iter().map(|v| v[k]).fold(f64::NEG_INFINITY, f64::max);
            assert!(lo.abs() < 1e-12 && (hi - 1.0).abs() < 1e-12);
        }
    }
}
