//! Source time courses with controlled inter-source correlation.
//!
//! Each source is a zero-mean, unit-RMS mixture of sinusoids. Sources are
//! built from an orthonormal set of such mixtures (Gram-Schmidt) and mixed
//! through a Cholesky factor of the target correlation matrix, so the
//! sample Pearson correlation of every pair equals its target up to
//! rounding.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const DEFAULT_SAMPLES: usize = 16;

/// Upper bound of the pairwise correlation drawn for [`Correlation::Random`].
pub const RANDOM_CORRELATION_MAX: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Correlation {
    /// Common pairwise target for every source pair.
    Fixed(f64),
    /// Each pair drawn uniformly from `[0, RANDOM_CORRELATION_MAX]`.
    Random,
}

impl Default for Correlation {
    fn default() -> Self {
        Correlation::Fixed(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimecourseSpec {
    pub n_samples: usize,
    pub n_sources: usize,
    pub correlation: Correlation,
    pub amplitude: f64,
    pub seed: u64,
}

impl Default for TimecourseSpec {
    fn default() -> Self {
        Self {
            n_samples: DEFAULT_SAMPLES,
            n_sources: 1,
            correlation: Correlation::default(),
            amplitude: 1.0,
            seed: 0,
        }
    }
}

/// Sample Pearson correlation coefficient.
pub fn pearson_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid(
            "pearson: vectors must be non-empty and equal length",
        ));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if !(saa > 0.0 && sbb > 0.0) {
        return Err(Error::invalid("pearson: zero-variance input"));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Lower-triangular L with L·Lᵀ = R for positive semi-definite R.
/// Zero pivots are allowed; returns `None` when R is not PSD.
pub(crate) fn psd_cholesky(r: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    const TOL: f64 = 1e-10;
    let q = r.nrows();
    let mut l = DMatrix::<f64>::zeros(q, q);
    for j in 0..q {
        let d = r[(j, j)] - (0..j).map(|k| l[(j, k)] * l[(j, k)]).sum::<f64>();
        if d < -TOL {
            return None;
        }
        if d <= TOL {
            for i in j + 1..q {
                let off = r[(i, j)] - (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum::<f64>();
                if off.abs() > 1e-8 {
                    return None;
                }
            }
            continue;
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..q {
            let off = r[(i, j)] - (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum::<f64>();
            l[(i, j)] = off / ljj;
        }
    }
    Some(l)
}

fn random_mixture(rng: &mut Rng, n: usize) -> Vec<f64> {
    let components = rng.random_range(2..=3);
    let f_lo = (1.0 / n as f64).min(0.25);
    let params: Vec<(f64, f64, f64)> = (0..components)
        .map(|_| {
            (
                rng.random_range(0.5..1.0),
                rng.random_range(f_lo..0.45),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    (0..n)
        .map(|t| {
            params
                .iter()
                .map(|(w, f, ph)| w * (2.0 * PI * f * t as f64 + ph).sin())
                .sum()
        })
        .collect()
}

/// `q` zero-mean, mutually orthogonal mixtures, each with squared norm `n`.
fn orthonormal_mixtures(rng: &mut Rng, q: usize, n: usize) -> Result<Vec<Vec<f64>>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(q);
    let unit_rms = (n as f64).sqrt();
    let mut attempts = 0;
    while basis.len() < q {
        attempts += 1;
        if attempts > 100 * q {
            return Err(Error::Numeric(
                "could not draw independent sinusoid mixtures".into(),
            ));
        }
        let mut v = random_mixture(rng, n);
        let mean = v.iter().sum::<f64>() / n as f64;
        v.iter_mut().for_each(|x| *x -= mean);
        let before = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        // modified Gram-Schmidt, twice for stability
        for _ in 0..2 {
            for b in &basis {
                let c = v.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (n as f64);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 1e-6 * before) {
            continue;
        }
        v.iter_mut().for_each(|x| *x *= unit_rms / norm);
        basis.push(v);
    }
    Ok(basis)
}

fn target_matrix(spec: &TimecourseSpec, rng: &mut Rng) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let q = spec.n_sources;
    match spec.correlation {
        Correlation::Fixed(rho) => {
            let r = DMatrix::from_fn(q, q, |i, j| if i == j { 1.0 } else { rho });
            let l = psd_cholesky(&r).ok_or_else(|| {
                Error::invalid(format!(
                    "correlation {rho} is infeasible for {q} sources (matrix not positive semi-definite)"
                ))
            })?;
            Ok((r, l))
        }
        Correlation::Random => {
            for _ in 0..1000 {
                let mut r = DMatrix::identity(q, q);
                for i in 0..q {
                    for j in i + 1..q {
                        let v = rng.random_range(0.0..=RANDOM_CORRELATION_MAX);
                        r[(i, j)] = v;
                        r[(j, i)] = v;
                    }
                }
                if let Some(l) = psd_cholesky(&r) {
                    return Ok((r, l));
                }
            }
            Err(Error::Numeric(
                "no feasible random correlation matrix drawn".into(),
            ))
        }
    }
}

/// Q×N source time courses per `spec`.
///
/// A single-sample request (N = 1) is a snapshot: every source takes the
/// value `amplitude`. Otherwise N must exceed Q so that Q zero-mean
/// orthogonal components exist.
pub fn sinusoid_mixture_timecourses(spec: &TimecourseSpec) -> Result<DMatrix<f64>> {
    let (q, n) = (spec.n_sources, spec.n_samples);
    if n == 0 || q == 0 {
        return Err(Error::invalid(
            "time courses need n_samples >= 1 and n_sources >= 1",
        ));
    }
    if !(spec.amplitude > 0.0 && spec.amplitude.is_finite()) {
        return Err(Error::invalid(format!(
            "amplitude must be > 0, got {}",
            spec.amplitude
        )));
    }
    if let Correlation::Fixed(rho) = spec.correlation {
        if !(rho.abs() <= 1.0) {
            return Err(Error::invalid(format!(
                "correlation must lie in [-1, 1], got {rho}"
            )));
        }
    }
    if n == 1 {
        return Ok(DMatrix::from_element(q, 1, spec.amplitude));
    }
    if n <= q {
        return Err(Error::invalid(format!(
            "{q} sources need more than {q} samples for exact correlation control, got {n}"
        )));
    }

    let mut rng = rng::rng(spec.seed);
    let (_, l) = target_matrix(spec, &mut rng)?;
    let basis = orthonormal_mixtures(&mut rng, q, n)?;
    let e = DMatrix::from_fn(q, n, |i, t| basis[i][t]);
    Ok(l * e * spec.amplitude)
}
