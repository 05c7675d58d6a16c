//! Labeled measurement/location datasets, materialized or streamed, and the
//! `MEGD` file format.
//!
//! Example `k` of a dataset depends only on `(seed, k)`: its grid indices,
//! time courses and noise are all drawn from a child generator seeded with
//! `derive_seed(seed, [k])`. Materialized and streamed datasets are therefore
//! identical, and generation parallelizes without changing results.

use std::cmp::Ordering;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::index;
use rand::RngCore;

use crate::binio::{check_magic, Reader, Writer};
use crate::error::{Error, Result};
use crate::forward::{
    fingerprint, simulate, Fingerprint, LeadFieldMatrix, Snr, SourceActivation, SourceSpace, Vec3,
};
use crate::par::{self, Exec};
use crate::rng;
use crate::signal::{sinusoid_mixture_timecourses, Correlation, TimecourseSpec};

pub const MEGD_MAGIC: &[u8; 4] = b"MEGD";
pub const MEGD_VERSION: u32 = 1;
const MEGD_HEADER_LEN: usize = 76;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetParams {
    pub n_sources: usize,
    pub count: usize,
    pub snr: Snr,
    pub correlation: Correlation,
    pub n_samples: usize,
    pub amplitude: f64,
    pub seed: u64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            n_sources: 1,
            count: 1,
            snr: Snr::Noiseless,
            correlation: Correlation::Random,
            n_samples: 1,
            amplitude: 1.0,
            seed: 0,
        }
    }
}

/// One M×N measurement and its true source coordinates (meters), sorted
/// lexicographically by (x, y, z).
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub measurement: DMatrix<f64>,
    pub targets: Vec<Vec3>,
}

impl Example {
    /// Targets flattened to `[x0, y0, z0, x1, ...]`.
    pub fn flat_targets(&self) -> Vec<f64> {
        self.targets.iter().flat_map(|t| [t.x, t.y, t.z]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub n_sensors: usize,
    pub n_samples: usize,
    pub n_sources: usize,
    pub snr: Snr,
    pub seed: u64,
    pub fingerprint: Fingerprint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub examples: Vec<Example>,
    pub meta: DatasetMeta,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

pub fn lexicographic(a: &Vec3, b: &Vec3) -> Ordering {
    a.x.total_cmp(&b.x)
        .then(a.y.total_cmp(&b.y))
        .then(a.z.total_cmp(&b.z))
}

fn validate(
    lead_field: &LeadFieldMatrix,
    space: &SourceSpace,
    params: &DatasetParams,
) -> Result<()> {
    if lead_field.n_sources() != space.len() {
        return Err(Error::invalid("lead field and source space sizes differ"));
    }
    if !(1..=3).contains(&params.n_sources) {
        return Err(Error::invalid(format!(
            "Q must be 1, 2 or 3, got {}",
            params.n_sources
        )));
    }
    if params.n_sources > space.len() {
        return Err(Error::invalid(format!(
            "Q = {} exceeds grid size {}",
            params.n_sources,
            space.len()
        )));
    }
    if params.count == 0 {
        return Err(Error::invalid("dataset count must be >= 1"));
    }
    // exercises the time-course constraints once up front
    sinusoid_mixture_timecourses(&TimecourseSpec {
        n_samples: params.n_samples,
        n_sources: params.n_sources,
        correlation: params.correlation,
        amplitude: params.amplitude,
        seed: params.seed,
    })?;
    Ok(())
}

/// The k-th example of the dataset described by `params`.
pub fn generate_example(
    lead_field: &LeadFieldMatrix,
    space: &SourceSpace,
    params: &DatasetParams,
    k: u64,
) -> Result<Example> {
    let mut rng = rng::rng(rng::derive_seed(params.seed, &[k]));
    let mut indices = index::sample(&mut rng, space.len(), params.n_sources).into_vec();
    let tc_seed = rng.next_u64();
    let noise_seed = rng.next_u64();
    indices.sort_by(|&a, &b| lexicographic(&space.positions()[a], &space.positions()[b]));

    let timecourses = sinusoid_mixture_timecourses(&TimecourseSpec {
        n_samples: params.n_samples,
        n_sources: params.n_sources,
        correlation: params.correlation,
        amplitude: params.amplitude,
        seed: tc_seed,
    })?;
    let activation = SourceActivation::new(indices.clone(), timecourses)?;
    let rec = simulate(lead_field, &activation, params.snr, noise_seed)?;
    Ok(Example {
        measurement: rec.measurements,
        targets: indices.iter().map(|&i| space.positions()[i]).collect(),
    })
}

fn meta(lead_field: &LeadFieldMatrix, params: &DatasetParams, fp: Fingerprint) -> DatasetMeta {
    DatasetMeta {
        n_sensors: lead_field.n_sensors(),
        n_samples: params.n_samples,
        n_sources: params.n_sources,
        snr: params.snr,
        seed: params.seed,
        fingerprint: fp,
    }
}

pub fn generate_dataset(
    lead_field: &LeadFieldMatrix,
    space: &SourceSpace,
    params: &DatasetParams,
) -> Result<LabeledDataset> {
    generate_dataset_with(Exec::default(), lead_field, space, params)
}

pub fn generate_dataset_with(
    exec: Exec,
    lead_field: &LeadFieldMatrix,
    space: &SourceSpace,
    params: &DatasetParams,
) -> Result<LabeledDataset> {
    validate(lead_field, space, params)?;
    let fp = fingerprint(lead_field, space)?;
    let examples = par::map_range(exec, params.count, |k| {
        generate_example(lead_field, space, params, k as u64)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(LabeledDataset {
        examples,
        meta: meta(lead_field, params, fp),
    })
}

/// Pull-based dataset: examples are produced on demand, a batch at a time.
pub struct DatasetStream<'a> {
    lead_field: &'a LeadFieldMatrix,
    space: &'a SourceSpace,
    params: DatasetParams,
    meta: DatasetMeta,
    next: u64,
    exec: Exec,
}

impl<'a> DatasetStream<'a> {
    pub fn new(
        lead_field: &'a LeadFieldMatrix,
        space: &'a SourceSpace,
        params: DatasetParams,
    ) -> Result<Self> {
        validate(lead_field, space, &params)?;
        let fp = fingerprint(lead_field, space)?;
        Ok(Self {
            lead_field,
            space,
            meta: meta(lead_field, &params, fp),
            params,
            next: 0,
            exec: Exec::default(),
        })
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn remaining(&self) -> usize {
        self.params.count - self.next as usize
    }

    /// Up to `batch` further examples; empty once `count` have been drawn.
    pub fn next_batch(&mut self, batch: usize) -> Result<Vec<Example>> {
        let n = batch.min(self.remaining());
        let start = self.next;
        let out = par::map_range(self.exec, n, |i| {
            generate_example(self.lead_field, self.space, &self.params, start + i as u64)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        self.next += n as u64;
        Ok(out)
    }
}

impl Iterator for DatasetStream<'_> {
    type Item = Result<Example>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining() == 0 {
            return None;
        }
        let ex = generate_example(self.lead_field, self.space, &self.params, self.next);
        self.next += 1;
        Some(ex)
    }
}

// MEGD layout (little-endian): magic, version u32, M u32, N u32, Q u32,
// count u64, snr_db f64 (+inf = noiseless), seed u64, lead-field
// fingerprint [u8; 32]; then per example M·N f32 measurements (snapshot-
// major: the M sensors of sample 0, then sample 1, ...) and Q·3 f32 targets.

fn header(meta: &DatasetMeta, count: usize) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(MEGD_MAGIC);
    w.u32(MEGD_VERSION);
    w.u32(meta.n_sensors as u32);
    w.u32(meta.n_samples as u32);
    w.u32(meta.n_sources as u32);
    w.u64(count as u64);
    w.f64(meta.snr.to_f64());
    w.u64(meta.seed);
    w.bytes(&meta.fingerprint.0);
    w.buf
}

fn encode_example(w: &mut Writer, ex: &Example) {
    for v in ex.measurement.iter() {
        w.f32(*v as f32);
    }
    for t in &ex.targets {
        w.f32(t.x as f32);
        w.f32(t.y as f32);
        w.f32(t.z as f32);
    }
}

pub fn write_dataset(path: &Path, dataset: &LabeledDataset) -> Result<()> {
    let mut w = Writer {
        buf: header(&dataset.meta, dataset.len()),
    };
    for ex in &dataset.examples {
        encode_example(&mut w, ex);
    }
    crate::binio::write_atomic(path, &w.buf)
}

/// Writes a stream to disk batch by batch without materializing it.
pub fn write_dataset_stream(
    path: &Path,
    stream: &mut DatasetStream<'_>,
    batch: usize,
) -> Result<usize> {
    let tmp = path.with_extension("partial");
    let result = (|| -> Result<usize> {
        let mut out = BufWriter::new(File::create(&tmp)?);
        out.write_all(&header(stream.meta(), stream.remaining()))?;
        let mut written = 0;
        loop {
            let examples = stream.next_batch(batch.max(1))?;
            if examples.is_empty() {
                break;
            }
            let mut w = Writer::default();
            for ex in &examples {
                encode_example(&mut w, ex);
            }
            out.write_all(&w.buf)?;
            written += examples.len();
        }
        out.flush()?;
        Ok(written)
    })();
    match result {
        Ok(n) => {
            fs::rename(&tmp, path)?;
            Ok(n)
        }
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}

pub fn read_dataset(path: &Path) -> Result<LabeledDataset> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes, "dataset file");
    check_magic(&mut r, MEGD_MAGIC)?;
    let version = r.u32()?;
    if version != MEGD_VERSION {
        return Err(Error::Version {
            found: version,
            expected: MEGD_VERSION,
        });
    }
    let m = r.u32()? as usize;
    let n = r.u32()? as usize;
    let q = r.u32()? as usize;
    let count = r.u64()? as usize;
    let snr = Snr::from_f64(r.f64()?);
    let seed = r.u64()?;
    let fp = Fingerprint(r.array::<32>()?);
    let per_example = (m * n + q * 3) * 4;
    if count.checked_mul(per_example) != Some(bytes.len().saturating_sub(MEGD_HEADER_LEN)) {
        return Err(Error::Corrupt(format!(
            "dataset file holds {} payload bytes, header implies {count} × {per_example}",
            bytes.len().saturating_sub(MEGD_HEADER_LEN)
        )));
    }
    let mut examples = Vec::with_capacity(count);
    for _ in 0..count {
        let vals = (0..m * n)
            .map(|_| r.f32().map(f64::from))
            .collect::<Result<Vec<_>>>()?;
        let targets = (0..q)
            .map(|_| Ok(Vec3::new(r.f32()? as f64, r.f32()? as f64, r.f32()? as f64)))
            .collect::<Result<Vec<_>>>()?;
        examples.push(Example {
            measurement: DMatrix::from_vec(m, n, vals),
            targets,
        });
    }
    r.finish()?;
    Ok(LabeledDataset {
        examples,
        meta: DatasetMeta {
            n_sensors: m,
            n_samples: n,
            n_sources: q,
            snr,
            seed,
            fingerprint: fp,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{build_synthetic_source_space, compute_lead_field, SensorArray};

    fn setup() -> (LeadFieldMatrix, SourceSpace) {
        let sensors = SensorArray::helmet(10, 0.12).unwrap();
        let space = build_synthetic_source_space(40, 0.08, 3).unwrap();
        (compute_lead_field(&sensors, &space).unwrap(), space)
    }

    #[test]
    fn noiseless_snapshot_is_scaled_topography() {
        let (lf, space) = setup();
        let params = DatasetParams {
            amplitude: 2.0,
            ..DatasetParams::default()
        };
        let ds = generate_dataset(&lf, &space, &params).unwrap();
        let ex = &ds.examples[0];
        let idx = space
            .positions()
            .iter()
            .position(|p| *p == ex.targets[0])
            .unwrap();
        assert_eq!(
            ex.measurement.column(0).into_owned(),
            lf.topography(idx).unwrap() * 2.0
        );
    }

    #[test]
    fn deterministic_and_canonical() {
        let (lf, space) = setup();
        let params = DatasetParams {
            n_sources: 2,
            count: 1000,
            snr: Snr::Db(5.0),
            n_samples: 16,
            seed: 11,
            ..DatasetParams::default()
        };
        let a = generate_dataset(&lf, &space, &params).unwrap();
        let small = DatasetParams {
            count: 3,
            ..params.clone()
        };
        assert_eq!(
            generate_dataset(&lf, &space, &small).unwrap().examples,
            a.examples[..3]
        );
        assert_eq!(
            generate_dataset_with(Exec::Serial, &lf, &space, &small).unwrap(),
            generate_dataset(&lf, &space, &small).unwrap()
        );
        for ex in &a.examples {
            assert_ne!(
                lexicographic(&ex.targets[0], &ex.targets[1]),
                Ordering::Greater
            );
            assert!(ex.targets.iter().all(|t| space.positions().contains(t)));
        }
    }

    #[test]
    fn stream_matches_materialized() {
        let (lf, space) = setup();
        let params = DatasetParams {
            n_sources: 3,
            count: 64,
            snr: Snr::Db(0.0),
            n_samples: 16,
            seed: 5,
            ..DatasetParams::default()
        };
        let ds = generate_dataset(&lf, &space, &params).unwrap();
        let mut s1 = DatasetStream::new(&lf, &space, params.clone()).unwrap();
        let mut s2 = DatasetStream::new(&lf, &space, params.clone()).unwrap();
        let mut streamed = Vec::new();
        while streamed.len() < 32 {
            let a = s1.next_batch(5).unwrap();
            let b = s2.next_batch(5).unwrap();
            assert_eq!(a, b);
            streamed.extend(a);
        }
        assert_eq!(streamed[..32], ds.examples[..32]);
        let rest: Vec<Example> = s1.map(|e| e.unwrap()).collect();
        assert_eq!(rest.len(), 64 - streamed.len());
        assert_eq!(rest.last(), ds.examples.last());
    }

    #[test]
    fn rejects_bad_params() {
        let (lf, space) = setup();
        for params in [
            DatasetParams {
                n_sources: 4,
                ..DatasetParams::default()
            },
            DatasetParams {
                n_sources: 0,
                ..DatasetParams::default()
            },
            DatasetParams {
                count: 0,
                ..DatasetParams::default()
            },
        ] {
            assert!(generate_dataset(&lf, &space, &params).is_err());
        }
        let tiny = build_synthetic_source_space(2, 0.08, 0).unwrap();
        let tlf = compute_lead_field(&SensorArray::helmet(4, 0.12).unwrap(), &tiny).unwrap();
        let params = DatasetParams {
            n_sources: 3,
            ..DatasetParams::default()
        };
        assert!(generate_dataset(&tlf, &tiny, &params).is_err());
    }

    #[test]
    fn file_round_trip() {
        let (lf, space) = setup();
        let params = DatasetParams {
            n_sources: 2,
            count: 7,
            snr: Snr::Db(10.0),
            n_samples: 16,
            seed: 2,
            ..DatasetParams::default()
        };
        let ds = generate_dataset(&lf, &space, &params).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.megd");
        let p2 = dir.path().join("b.megd");
        write_dataset(&p1, &ds).unwrap();
        let mut stream = DatasetStream::new(&lf, &space, params).unwrap();
        assert_eq!(write_dataset_stream(&p2, &mut stream, 3).unwrap(), 7);
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());

        let back = read_dataset(&p1).unwrap();
        assert_eq!(back.meta, ds.meta);
        for (a, b) in back.examples.iter().zip(&ds.examples) {
            assert_eq!(a.measurement.shape(), (10, 16));
            for (x, y) in a.measurement.iter().zip(b.measurement.iter()) {
                assert_eq!(*x, (*y as f32) as f64);
            }
        }

        let bytes = fs::read(&p1).unwrap();
        fs::write(&p1, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_dataset(&p1), Err(Error::Corrupt(_))));
    }
}
