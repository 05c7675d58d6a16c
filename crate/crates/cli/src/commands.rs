use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::Serialize;

use megloc::dataset::{read_dataset, write_dataset_stream, DatasetParams, DatasetStream};
use megloc::eval::{
    run_accuracy_sweep, run_robustness_sweep, run_timing_benchmark, write_sweep_csv, write_timing_csv,
    ExperimentConfig, Localizer, LocalizerContext,
};
use megloc::forward::{
    build_synthetic_source_space, compute_lead_field, read_lead_field, write_lead_field, Fingerprint,
    LeadFieldMatrix, SensorArray, SourceSpace,
};
use megloc::nn::{
    build_cnn_with, build_mlp_with_hidden, load_model, save_model, train_with_callback, write_loss_history,
    NetworkModel, ShuffledDataset, TrainingConfig,
};
use megloc::par::Exec;

use crate::config::{snr_from_db, LocalizerName, ModelKind, RunConfig, TrainSource};
use crate::error::{CliError, CliResult};

/// Shared state of one invocation: the resolved config and output directory.
pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
}

impl Context {
    pub fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out.join(p)
        }
    }

    fn lead_field(&self) -> CliResult<(LeadFieldMatrix, SourceSpace, Fingerprint)> {
        Ok(read_lead_field(&self.path(&self.config.geometry.lead_field))?)
    }

    fn data_params(&self) -> DatasetParams {
        let d = &self.config.data;
        DatasetParams {
            n_sources: d.n_sources,
            count: d.count,
            snr: snr_from_db(d.snr_db),
            correlation: d.correlation.to_correlation(),
            n_samples: d.n_samples,
            amplitude: d.amplitude,
            seed: d.seed,
        }
    }
}

fn check_fingerprint(what: &str, lead_field: &Fingerprint, found: &Fingerprint) -> CliResult<()> {
    if found != lead_field {
        return Err(CliError::fingerprint_mismatch(what, lead_field, found));
    }
    Ok(())
}

fn load_checked_model(path: &Path, fp: &Fingerprint) -> CliResult<NetworkModel> {
    let model = load_model(path)?;
    check_fingerprint("model", fp, &model.fingerprint)?;
    Ok(model)
}

fn localizer_for(name: LocalizerName, model: Option<NetworkModel>) -> CliResult<Localizer> {
    Ok(match (name, model) {
        (LocalizerName::RapMusic, _) => Localizer::RapMusic,
        (LocalizerName::Music, _) => Localizer::Music,
        (LocalizerName::Mlp, Some(m)) if m.conv().is_none() => Localizer::Mlp(Arc::new(m)),
        (LocalizerName::Cnn, Some(m)) if m.conv().is_some() => Localizer::Cnn(Arc::new(m)),
        (name, _) => return Err(CliError::Config(format!("model file does not hold a {name:?} network"))),
    })
}

pub fn gen_geometry(ctx: &Context) -> CliResult<()> {
    let g = &ctx.config.geometry;
    let sensors = SensorArray::helmet(g.n_sensors, g.sensor_radius)?;
    let space = build_synthetic_source_space(g.n_sources, g.source_radius, g.seed)?;
    let lf = compute_lead_field(&sensors, &space)?;
    let path = ctx.path(&g.lead_field);
    let fp = write_lead_field(&path, &lf, &space)?;
    write_sensors_csv(&ctx.path(&g.sensors_csv), &sensors)?;
    let size = fs::metadata(&path)?.len();
    println!("M={} P={} bytes={} fingerprint={fp}", lf.n_sensors(), lf.n_sources(), size);
    Ok(())
}

fn write_sensors_csv(path: &Path, sensors: &SensorArray) -> CliResult<()> {
    let mut text = String::from("x,y,z,nx,ny,nz\n");
    for (p, n) in sensors.positions().iter().zip(sensors.orientations()) {
        text.push_str(&format!("{},{},{},{},{},{}\n", p.x, p.y, p.z, n.x, n.y, n.z));
    }
    let tmp = path.with_extension("csv.partial");
    fs::write(&tmp, text)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn gen_data(ctx: &Context) -> CliResult<()> {
    let (lf, space, _) = ctx.lead_field()?;
    let mut stream = DatasetStream::new(&lf, &space, ctx.data_params())?;
    let path = ctx.path(&ctx.config.data.path);
    let fp = stream.meta().fingerprint;
    let n = write_dataset_stream(&path, &mut stream, ctx.config.data.batch.max(1))?;
    println!("examples={n} path={} fingerprint={fp}", path.display());
    Ok(())
}

fn build_model(ctx: &Context, sensors: usize) -> CliResult<NetworkModel> {
    let m = &ctx.config.model;
    let model = match m.kind {
        ModelKind::Mlp => build_mlp_with_hidden(sensors, m.n_sources, &m.hidden, m.seed)?,
        ModelKind::Cnn => build_cnn_with(sensors, m.n_samples, m.n_sources, m.filters, m.taps, &m.hidden, m.seed)?,
    };
    Ok(model)
}

pub fn train(ctx: &Context) -> CliResult<()> {
    let (lf, space, fp) = ctx.lead_field()?;
    let c = &ctx.config;
    if c.data.n_sources != c.model.n_sources || c.data.n_samples != c.model.input_samples() {
        return Err(CliError::Config(format!(
            "data (Q={}, N={}) does not fit the model (Q={}, N={})",
            c.data.n_sources,
            c.data.n_samples,
            c.model.n_sources,
            c.model.input_samples()
        )));
    }
    let mut model = build_model(ctx, lf.n_sensors())?;
    model.fingerprint = fp;
    model.set_output_frame_from(&space)?;
    let tc = TrainingConfig {
        learning_rate: c.train.learning_rate,
        batch_size: c.train.batch_size,
        steps: c.train.steps,
        reg_type: c.train.reg_type.to_reg_type(),
        reg_weight: c.train.reg_weight,
        seed: c.train.seed,
        log_every: c.train.log_every,
    };
    let log = |r: &megloc::nn::LossRecord| eprintln!("step {} loss {:e}", r.step, r.loss);
    let (model, history) = match c.train.source {
        TrainSource::Stream => {
            let params = DatasetParams { count: (tc.steps * tc.batch_size).max(1), ..ctx.data_params() };
            let mut stream = DatasetStream::new(&lf, &space, params)?;
            train_with_callback(model, &mut stream, &tc, log)?
        }
        TrainSource::Dataset => {
            let data = read_dataset(&ctx.path(&c.data.path))?;
            check_fingerprint("dataset", &fp, &data.meta.fingerprint)?;
            let mut source = ShuffledDataset::new(&data, tc.seed)?;
            train_with_callback(model, &mut source, &tc, log)?
        }
    };
    let path = ctx.path(&c.model.path);
    save_model(&model, &path)?;
    write_loss_history(&ctx.path(&c.train.loss_history), &history)?;
    println!("steps={} parameters={} path={}", tc.steps, model.parameter_count(), path.display());
    Ok(())
}

fn read_recording_csv(path: &Path) -> CliResult<DMatrix<f64>> {
    let text = fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
        rows.push(row);
    }
    let n = rows.first().map_or(0, Vec::len);
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(CliError::Config(format!("{} is not a rectangular sensor × sample table", path.display())));
    }
    Ok(DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]))
}

#[derive(Serialize)]
struct LocatedSource {
    localizer: &'static str,
    source: usize,
    position: [f64; 3],
    #[serde(skip_serializing_if = "Option::is_none")]
    grid_index: Option<usize>,
}

pub fn localize(ctx: &Context) -> CliResult<()> {
    let (lf, space, fp) = ctx.lead_field()?;
    let c = &ctx.config.localize;
    let y = match &c.recording {
        Some(p) => read_recording_csv(&ctx.path(p))?,
        None => {
            let data = read_dataset(&ctx.path(&ctx.config.data.path))?;
            check_fingerprint("dataset", &fp, &data.meta.fingerprint)?;
            let ex = data.examples.get(c.example).ok_or_else(|| {
                CliError::Config(format!("example {} out of range ({} examples)", c.example, data.len()))
            })?;
            ex.measurement.clone()
        }
    };
    let model = if c.localizer.uses_model() {
        Some(load_checked_model(&ctx.path(c.model.as_ref().unwrap_or(&ctx.config.model.path)), &fp)?)
    } else {
        None
    };
    let localizer = localizer_for(c.localizer, model)?;
    localizer.check_shape(lf.n_sensors(), y.ncols(), c.n_sources)?;
    let positions = LocalizerContext::new(&localizer, &lf, &space, Exec::default()).localize(&y, c.n_sources)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (k, p) in positions.iter().enumerate() {
        let grid_index = (!localizer.model().is_some()).then(|| space.positions().iter().position(|g| g == p)).flatten();
        let line = LocatedSource { localizer: localizer.name(), source: k, position: [p.x, p.y, p.z], grid_index };
        writeln!(out, "{}", serde_json::to_string(&line).map_err(|e| CliError::Other(e.to_string()))?)?;
    }
    Ok(())
}

fn experiment(ctx: &Context, fp: &Fingerprint) -> CliResult<ExperimentConfig> {
    let e = &ctx.config.experiment;
    let model = if e.localizer.uses_model() {
        Some(load_checked_model(&ctx.path(e.model.as_ref().unwrap_or(&ctx.config.model.path)), fp)?)
    } else {
        None
    };
    Ok(ExperimentConfig {
        localizer: localizer_for(e.localizer, model)?,
        n_sources: e.n_sources,
        snr_values: e.snr_values.iter().map(|&v| snr_from_db(v)).collect(),
        correlation_values: e.correlation_values.iter().map(|c| c.to_correlation()).collect(),
        n_samples: e.n_samples,
        trials: e.trials,
        perturbation_rhos: e.perturbation_rhos.clone(),
        amplitude: e.amplitude,
        seed: e.seed,
        record_elapsed: e.record_elapsed,
        exec: Exec::default(),
    })
}

pub fn sweep(ctx: &Context) -> CliResult<()> {
    let (lf, space, fp) = ctx.lead_field()?;
    let report = run_accuracy_sweep(&experiment(ctx, &fp)?, &lf, &space)?;
    let path = ctx.path(&ctx.config.experiment.output);
    write_sweep_csv(&report, &path)?;
    println!("rows={} path={}", report.rows.len(), path.display());
    Ok(())
}

pub fn perturb_sweep(ctx: &Context) -> CliResult<()> {
    let (lf, space, fp) = ctx.lead_field()?;
    let report = run_robustness_sweep(&experiment(ctx, &fp)?, &lf, &space)?;
    let path = ctx.path(&ctx.config.experiment.robustness_output);
    write_sweep_csv(&report, &path)?;
    println!("rows={} path={}", report.rows.len(), path.display());
    Ok(())
}

pub fn bench_time(ctx: &Context) -> CliResult<()> {
    let (lf, space, fp) = ctx.lead_field()?;
    let t = &ctx.config.timing;
    let mut localizers = Vec::new();
    if t.rap_music {
        localizers.push(Localizer::RapMusic);
    }
    if t.music {
        localizers.push(Localizer::Music);
    }
    for p in &t.models {
        let m = load_checked_model(&ctx.path(p), &fp)?;
        let name = if m.conv().is_some() { LocalizerName::Cnn } else { LocalizerName::Mlp };
        localizers.push(localizer_for(name, Some(m))?);
    }
    let report = run_timing_benchmark(&localizers, &lf, &space, &t.q_values, &t.n_samples_values, t.repeats, t.seed)?;
    let path = ctx.path(&t.output);
    write_timing_csv(&report, &path)?;
    for r in &report.rows {
        println!("{} q={} n={} median_ms={:.3}", r.algorithm, r.n_sources, r.n_samples, r.median_ms);
    }
    Ok(())
}
