use std::fmt;

use nalgebra::DMatrix;

use super::lead_field::LeadFieldMatrix;
use crate::error::{Error, Result};
use crate::rng;

/// Requested signal-to-noise ratio of a simulated recording.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Snr {
    /// 20·log10(‖signal‖_F / ‖noise‖_F).
    Db(f64),
    Noiseless,
}

impl Snr {
    pub fn db(self) -> Option<f64> {
        match self {
            Snr::Db(v) => Some(v),
            Snr::Noiseless => None,
        }
    }

    /// Binary encoding: noiseless is stored as +inf.
    pub fn to_f64(self) -> f64 {
        self.db().unwrap_or(f64::INFINITY)
    }

    pub fn from_f64(v: f64) -> Self {
        if v == f64::INFINITY {
            Snr::Noiseless
        } else {
            Snr::Db(v)
        }
    }
}

impl fmt::Display for Snr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Snr::Db(v) => write!(f, "{v}"),
            Snr::Noiseless => f.write_str("noiseless"),
        }
    }
}

/// Active grid points and their Q×N time courses.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceActivation {
    indices: Vec<usize>,
    timecourses: DMatrix<f64>,
}

impl SourceActivation {
    /// Requires distinct indices, one time-course row per index and N ≥ 1.
    /// An empty activation (Q = 0) is representable; it only simulates
    /// without noise.
    pub fn new(indices: Vec<usize>, timecourses: DMatrix<f64>) -> Result<Self> {
        if timecourses.nrows() != indices.len() {
            return Err(Error::invalid(format!(
                "{} indices but {} time-course rows",
                indices.len(),
                timecourses.nrows()
            )));
        }
        if timecourses.ncols() == 0 {
            return Err(Error::invalid("time courses need at least one sample"));
        }
        let mut sorted = indices.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("activation indices must be distinct"));
        }
        Ok(Self {
            indices,
            timecourses,
        })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn timecourses(&self) -> &DMatrix<f64> {
        &self.timecourses
    }

    pub fn n_sources(&self) -> usize {
        self.indices.len()
    }

    pub fn n_samples(&self) -> usize {
        self.timecourses.ncols()
    }
}

/// Simulated sensor data `measurements = signal + noise`.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub measurements: DMatrix<f64>,
    pub signal: DMatrix<f64>,
    pub noise: DMatrix<f64>,
    pub snr: Snr,
    pub seed: u64,
}

pub fn frobenius_norm(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Frobenius-norm SNR in dB (amplitude ratio).
pub fn measure_snr(signal: &DMatrix<f64>, noise: &DMatrix<f64>) -> Result<f64> {
    if signal.shape() != noise.shape() {
        return Err(Error::invalid("signal and noise shapes differ"));
    }
    let nn = frobenius_norm(noise);
    if !(nn > 0.0) {
        return Err(Error::invalid("noise matrix has zero Frobenius norm"));
    }
    Ok(20.0 * (frobenius_norm(signal) / nn).log10())
}

/// Simulates `Y = A[:, indices]·S + noise`. Noise is drawn i.i.d. standard
/// normal from `seed` and rescaled so the Frobenius SNR hits the request.
pub fn simulate(
    lead_field: &LeadFieldMatrix,
    activation: &SourceActivation,
    snr: Snr,
    seed: u64,
) -> Result<Recording> {
    let m = lead_field.n_sensors();
    let n = activation.n_samples();
    let signal = if activation.n_sources() == 0 {
        DMatrix::zeros(m, n)
    } else {
        lead_field.select(activation.indices())? * activation.timecourses()
    };

    let noise = match snr {
        Snr::Noiseless => DMatrix::zeros(m, n),
        Snr::Db(db) => {
            if !db.is_finite() {
                return Err(Error::invalid(format!("SNR must be finite, got {db}")));
            }
            if activation.n_sources() == 0 {
                return Err(Error::invalid("SNR is undefined for an empty activation"));
            }
            let signal_norm = frobenius_norm(&signal);
            if !(signal_norm > 0.0) {
                return Err(Error::invalid("SNR is undefined for a zero signal"));
            }
            let mut rng = rng::rng(seed);
            let draw = DMatrix::from_vec(m, n, rng::gaussian_vec(&mut rng, m * n));
            let scale = signal_norm / (frobenius_norm(&draw) * 10f64.powf(db / 20.0));
            draw * scale
        }
    };

    Ok(Recording {
        measurements: &signal + &noise,
        signal,
        noise,
        snr,
        seed,
    })
}

/// Adds an i.i.d. Gaussian model error with ‖ΔA‖_F = rho·‖A‖_F.
pub fn perturb_lead_field(
    lead_field: &LeadFieldMatrix,
    rho: f64,
    seed: u64,
) -> Result<LeadFieldMatrix> {
    if !(rho >= 0.0 && rho.is_finite()) {
        return Err(Error::invalid(format!(
            "perturbation fraction must be >= 0, got {rho}"
        )));
    }
    if rho == 0.0 {
        return Ok(lead_field.clone());
    }
    let a = lead_field.entries();
    let (m, p) = a.shape();
    let mut rng = rng::rng(seed);
    let draw = DMatrix::from_vec(m, p, rng::gaussian_vec(&mut rng, m * p));
    let scale = rho * frobenius_norm(a) / frobenius_norm(&draw);
    LeadFieldMatrix::from_matrix(a + draw * scale)
}
