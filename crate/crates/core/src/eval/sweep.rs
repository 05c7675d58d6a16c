use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;

use super::metric::assignment_error;
use crate::dataset::{generate_example, DatasetParams};
use crate::error::{Error, Result};
use crate::forward::{perturb_lead_field, LeadFieldMatrix, Snr, SourceSpace, Vec3};
use crate::nn::{predict_locations, NetworkModel};
use crate::par::{self, Exec};
use crate::rng;
use crate::signal::Correlation;
use crate::subspace::{music_localize_with_graph, rap_music_localize_with, NeighborGraph};

/// Tag separating perturbation seeds from trial seeds.
const PERTURB_TAG: u64 = 0x7065_7274;

#[derive(Debug, Clone)]
pub enum Localizer {
    RapMusic,
    Music,
    Mlp(Arc<NetworkModel>),
    Cnn(Arc<NetworkModel>),
}

impl Localizer {
    pub fn name(&self) -> &'static str {
        match self {
            Localizer::RapMusic => "rap_music",
            Localizer::Music => "music",
            Localizer::Mlp(_) => "mlp",
            Localizer::Cnn(_) => "cnn",
        }
    }

    pub fn model(&self) -> Option<&NetworkModel> {
        match self {
            Localizer::Mlp(m) | Localizer::Cnn(m) => Some(m),
            _ => None,
        }
    }

    /// Whether this localizer can take M×N inputs and report Q sources.
    pub fn check_shape(&self, sensors: usize, samples: usize, q: usize) -> Result<()> {
        match self.model() {
            None => Ok(()),
            Some(m) if m.sensors() == sensors && m.samples() == samples && m.n_sources() == q => {
                Ok(())
            }
            Some(m) => Err(Error::invalid(format!(
                "{} model expects {}×{} inputs and {} sources, run has {}×{} and {}",
                self.name(),
                m.sensors(),
                m.samples(),
                m.n_sources(),
                sensors,
                samples,
                q
            ))),
        }
    }
}

/// Everything a localizer needs besides the data, prepared once per sweep.
pub struct LocalizerContext<'a> {
    localizer: &'a Localizer,
    lead_field: &'a LeadFieldMatrix,
    space: &'a SourceSpace,
    graph: Option<NeighborGraph>,
    exec: Exec,
}

impl<'a> LocalizerContext<'a> {
    pub fn new(
        localizer: &'a Localizer,
        lead_field: &'a LeadFieldMatrix,
        space: &'a SourceSpace,
        exec: Exec,
    ) -> Self {
        let graph = matches!(localizer, Localizer::Music)
            .then(|| NeighborGraph::knn(space, NeighborGraph::DEFAULT_K));
        Self {
            localizer,
            lead_field,
            space,
            graph,
            exec,
        }
    }

    /// Estimated positions, always exactly `q` of them. MUSIC maps with fewer
    /// than `q` local maxima repeat their strongest peak.
    pub fn localize(&self, y: &DMatrix<f64>, q: usize) -> Result<Vec<Vec3>> {
        match self.localizer {
            Localizer::RapMusic => {
                Ok(
                    rap_music_localize_with(self.exec, y, self.lead_field, self.space, q)?
                        .positions,
                )
            }
            Localizer::Music => {
                let graph = self.graph.as_ref().expect("graph built for MUSIC");
                let mut pos =
                    music_localize_with_graph(self.exec, y, self.lead_field, self.space, graph, q)?
                        .positions;
                let fill = pos
                    .first()
                    .copied()
                    .unwrap_or_else(|| self.space.centroid());
                pos.resize(q, fill);
                Ok(pos)
            }
            Localizer::Mlp(m) | Localizer::Cnn(m) => predict_locations(m, y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub localizer: Localizer,
    pub n_sources: usize,
    pub snr_values: Vec<Snr>,
    pub correlation_values: Vec<Correlation>,
    pub n_samples: usize,
    pub trials: usize,
    pub perturbation_rhos: Vec<f64>,
    pub amplitude: f64,
    pub seed: u64,
    /// Report mean localization wall-clock time. Off gives reproducible files.
    pub record_elapsed: bool,
    pub exec: Exec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            localizer: Localizer::RapMusic,
            n_sources: 1,
            snr_values: vec![Snr::Db(0.0)],
            correlation_values: vec![Correlation::Fixed(0.0)],
            n_samples: 16,
            trials: 200,
            perturbation_rhos: vec![0.0],
            amplitude: 1.0,
            seed: 0,
            record_elapsed: false,
            exec: Exec::default(),
        }
    }
}

impl ExperimentConfig {
    fn validate(&self, lead_field: &LeadFieldMatrix, space: &SourceSpace) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::invalid("trials must be >= 1"));
        }
        if self.snr_values.is_empty() || self.correlation_values.is_empty() {
            return Err(Error::invalid(
                "at least one SNR and one correlation value are required",
            ));
        }
        if self
            .perturbation_rhos
            .iter()
            .any(|r| !(*r >= 0.0 && r.is_finite()))
        {
            return Err(Error::invalid(
                "perturbation fractions must be finite and >= 0",
            ));
        }
        if lead_field.n_sources() != space.len() {
            return Err(Error::invalid("lead field and source space sizes differ"));
        }
        self.localizer
            .check_shape(lead_field.n_sensors(), self.n_samples, self.n_sources)
    }

    fn conditions(&self) -> Vec<(Snr, Correlation)> {
        let mut out = Vec::with_capacity(self.snr_values.len() * self.correlation_values.len());
        for &s in &self.snr_values {
            for &c in &self.correlation_values {
                out.push((s, c));
            }
        }
        out
    }

    /// Data parameters for condition `index`; trial `t` is example `t` of
    /// this dataset, independent of the localizer.
    fn condition_params(&self, index: usize, snr: Snr, correlation: Correlation) -> DatasetParams {
        DatasetParams {
            n_sources: self.n_sources,
            count: self.trials,
            snr,
            correlation,
            n_samples: self.n_samples,
            amplitude: self.amplitude,
            seed: rng::derive_seed(self.seed, &[index as u64]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub snr: Snr,
    pub correlation: Correlation,
    pub n_sources: usize,
    pub n_samples: usize,
    pub localizer: String,
    pub trials: usize,
    pub mean_error_m: f64,
    pub stderr_m: f64,
    pub mean_elapsed_s: f64,
    /// Forward-model perturbation, present in robustness sweeps only.
    pub rho: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn run_condition(
    config: &ExperimentConfig,
    ctx: &LocalizerContext<'_>,
    data_lead_field: &LeadFieldMatrix,
    space: &SourceSpace,
    params: &DatasetParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let outcomes = par::map_range(config.exec, config.trials, |t| -> Result<(f64, f64)> {
        let ex = generate_example(data_lead_field, space, params, t as u64)?;
        let start = Instant::now();
        let est = ctx.localize(&ex.measurement, config.n_sources)?;
        let elapsed = start.elapsed().as_secs_f64();
        Ok((assignment_error(&ex.targets, &est)?, elapsed))
    });
    let mut errors = Vec::with_capacity(config.trials);
    let mut times = Vec::with_capacity(config.trials);
    for o in outcomes {
        let (e, s) = o?;
        errors.push(e);
        times.push(s);
    }
    Ok((errors, times))
}

fn row(
    config: &ExperimentConfig,
    snr: Snr,
    correlation: Correlation,
    errors: &[f64],
    times: &[f64],
    rho: Option<f64>,
) -> SweepRow {
    let (mean, stderr) = mean_and_stderr(errors);
    SweepRow {
        snr,
        correlation,
        n_sources: config.n_sources,
        n_samples: config.n_samples,
        localizer: config.localizer.name().to_string(),
        trials: errors.len(),
        mean_error_m: mean,
        stderr_m: stderr,
        mean_elapsed_s: if config.record_elapsed {
            mean_and_stderr(times).0
        } else {
            0.0
        },
        rho,
    }
}

/// One row per (SNR, correlation) condition, in SNR-major order.
pub fn run_accuracy_sweep(
    config: &ExperimentConfig,
    lead_field: &LeadFieldMatrix,
    space: &SourceSpace,
) -> Result<SweepReport> {
    config.validate(lead_field, space)?;
    // Trials run in parallel; each localization stays on one thread.
    let ctx = LocalizerContext::new(&config.localizer, lead_field, space, Exec::Serial);
    let mut rows = Vec::new();
    for (i, (snr, corr)) in config.conditions().into_iter().enumerate() {
        let params = config.condition_params(i, snr, corr);
        let (errors, times) = run_condition(config, &ctx, lead_field, space, &params)?;
        rows.push(row(config, snr, corr, &errors, &times, None));
    }
    Ok(SweepReport { rows })
}

/// Data are simulated through `perturb_lead_field(A, ρ)` while the localizer
/// keeps the nominal `A`. One row per (ρ, condition), ρ-major; trial data for
/// ρ = 0 coincide with [`run_accuracy_sweep`].
pub fn run_robustness_sweep(
    config: &ExperimentConfig,
    lead_field: &LeadFieldMatrix,
    space: &SourceSpace,
) -> Result<SweepReport> {
    config.validate(lead_field, space)?;
    if config.perturbation_rhos.is_empty() {
        return Err(Error::invalid("no perturbation fractions given"));
    }
    let ctx = LocalizerContext::new(&config.localizer, lead_field, space, Exec::Serial);
    let mut rows = Vec::new();
    for &rho in &config.perturbation_rhos {
        let seed = rng::derive_seed(config.seed, &[PERTURB_TAG, rho.to_bits()]);
        let perturbed = perturb_lead_field(lead_field, rho, seed)?;
        for (i, (snr, corr)) in config.conditions().into_iter().enumerate() {
            let params = config.condition_params(i, snr, corr);
            let (errors, times) = run_condition(config, &ctx, &perturbed, space, &params)?;
            rows.push(row(config, snr, corr, &errors, &times, Some(rho)));
        }
    }
    Ok(SweepReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{build_synthetic_source_space, compute_lead_field, SensorArray};
    use crate::nn::build_mlp_with_hidden;

    fn setup() -> (LeadFieldMatrix, SourceSpace) {
        let sensors = SensorArray::helmet(24, 0.12).unwrap();
        let space = build_synthetic_source_space(60, 0.07, 1).unwrap();
        (compute_lead_field(&sensors, &space).unwrap(), space)
    }

    #[test]
    fn mean_and_stderr_by_hand() {
        // mean 2, sample variance 1, stderr 1/√3
        let (m, s) = mean_and_stderr(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0 / 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean_and_stderr(&[4.0]), (4.0, 0.0));
    }

    #[test]
    fn noiseless_rap_music_is_exact() {
        let (lf, space) = setup();
        let config = ExperimentConfig {
            snr_values: vec![Snr::Noiseless],
            trials: 20,
            ..Default::default()
        };
        let report = run_accuracy_sweep(&config, &lf, &space).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.rows[0].mean_error_m, 0.0);
        assert_eq!(report.rows[0].trials, 20);
        assert_eq!(report.rows[0].mean_elapsed_s, 0.0);
    }

    #[test]
    fn serial_and_parallel_agree_and_repeat() {
        let (lf, space) = setup();
        let base = ExperimentConfig {
            n_sources: 2,
            snr_values: vec![Snr::Db(-5.0), Snr::Db(10.0)],
            correlation_values: vec![Correlation::Fixed(0.3), Correlation::Random],
            trials: 12,
            seed: 4,
            ..Default::default()
        };
        let a = run_accuracy_sweep(&base, &lf, &space).unwrap();
        let b = run_accuracy_sweep(
            &ExperimentConfig {
                exec: Exec::Serial,
                ..base.clone()
            },
            &lf,
            &space,
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(a, run_accuracy_sweep(&base, &lf, &space).unwrap());
        assert_eq!(a.rows.len(), 4);
        assert!(a
            .rows
            .iter()
            .all(|r| r.mean_error_m >= 0.0 && r.stderr_m >= 0.0));
    }

    #[test]
    fn robustness_at_zero_matches_accuracy() {
        let (lf, space) = setup();
        let config = ExperimentConfig {
            n_sources: 2,
            snr_values: vec![Snr::Db(0.0)],
            trials: 10,
            perturbation_rhos: vec![0.0, 0.1],
            ..Default::default()
        };
        let acc = run_accuracy_sweep(&config, &lf, &space).unwrap();
        let rob = run_robustness_sweep(&config, &lf, &space).unwrap();
        assert_eq!(rob.rows.len(), 2);
        assert_eq!(
            rob.rows[0],
            SweepRow {
                rho: Some(0.0),
                ..acc.rows[0].clone()
            }
        );
        assert_eq!(rob.rows[1].rho, Some(0.1));
        assert!(rob.rows[1].mean_error_m.is_finite());
    }

    #[test]
    fn paired_localizers_see_the_same_data() {
        let (lf, space) = setup();
        let config = ExperimentConfig {
            snr_values: vec![Snr::Noiseless],
            trials: 8,
            ..Default::default()
        };
        let rap = run_accuracy_sweep(&config, &lf, &space).unwrap();
        let music = run_accuracy_sweep(
            &ExperimentConfig {
                localizer: Localizer::Music,
                ..config
            },
            &lf,
            &space,
        )
        .unwrap();
        // Single noiseless source: both scans peak at the true grid point.
        assert_eq!(rap.rows[0].mean_error_m, 0.0);
        assert_eq!(music.rows[0].mean_error_m, 0.0);
    }

    #[test]
    fn model_shape_is_checked() {
        let (lf, space) = setup();
        let model = Arc::new(build_mlp_with_hidden(24, 2, &[4], 0).unwrap());
        let config = ExperimentConfig {
            localizer: Localizer::Mlp(model.clone()),
            n_samples: 1,
            trials: 3,
            ..Default::default()
        };
        assert!(matches!(
            run_accuracy_sweep(&config, &lf, &space),
            Err(Error::InvalidArgument(_))
        ));
        let ok = ExperimentConfig {
            n_sources: 2,
            ..config
        };
        let report = run_accuracy_sweep(&ok, &lf, &space).unwrap();
        assert_eq!(report.rows[0].localizer, "mlp");
    }

    #[test]
    fn bad_configs_are_rejected() {
        let (lf, space) = setup();
        for config in [
            ExperimentConfig {
                trials: 0,
                ..Default::default()
            },
            ExperimentConfig {
                snr_values: vec![],
                ..Default::default()
            },
            ExperimentConfig {
                perturbation_rhos: vec![-0.1],
                ..Default::default()
            },
        ] {
            assert!(matches!(
                run_accuracy_sweep(&config, &lf, &space),
                Err(Error::InvalidArgument(_))
            ));
        }
        let empty = ExperimentConfig {
            perturbation_rhos: vec![],
            ..Default::default()
        };
        assert!(run_robustness_sweep(&empty, &lf, &space).is_err());
    }
}
