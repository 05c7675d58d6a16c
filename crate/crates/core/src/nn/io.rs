//! `MEGM` model files.
//!
//! Layout (little-endian): magic `MEGM`, version u32, lead-field fingerprint
//! [u8; 32], sensors u32, samples u32, input scaling u8, output frame
//! (center x, y, z and scale as f64), layer count u32,
//! then one descriptor per layer (conv: kind 0, sensors u32, taps u32,
//! filters u32; dense: kind 1, inputs u32, outputs u32, activation u8), then
//! all parameters as f64 in layer order: conv kernels `[filter][sensor][tap]`
//! and biases, then each dense layer's weights row-major (`out × in`) and
//! biases.

use std::fs;
use std::path::Path;

use super::layers::{Activation, DenseLayer, SpaceTimeConvLayer};
use super::model::{InputScaling, NetworkModel, OutputFrame};
use crate::binio::{check_magic, write_atomic, Reader, Writer};
use crate::error::{Error, Result};
use crate::forward::{Fingerprint, Vec3};

pub const MEGM_MAGIC: &[u8; 4] = b"MEGM";
pub const MEGM_VERSION: u32 = 1;

const KIND_CONV: u8 = 0;
const KIND_DENSE: u8 = 1;

pub fn encode_model(model: &NetworkModel) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(MEGM_MAGIC);
    w.u32(MEGM_VERSION);
    w.bytes(&model.fingerprint.0);
    w.u32(model.sensors as u32);
    w.u32(model.samples as u32);
    w.u8(model.scaling.code());
    w.f64s(model.frame.center.as_slice());
    w.f64(model.frame.scale);
    w.u32((model.dense.len() + usize::from(model.conv.is_some())) as u32);
    if let Some(c) = &model.conv {
        w.u8(KIND_CONV);
        w.u32(c.sensors as u32);
        w.u32(c.taps as u32);
        w.u32(c.filters as u32);
    }
    for d in &model.dense {
        w.u8(KIND_DENSE);
        w.u32(d.inputs as u32);
        w.u32(d.outputs as u32);
        w.u8(d.activation.code());
    }
    if let Some(c) = &model.conv {
        w.f64s(&c.kernels);
        w.f64s(&c.biases);
    }
    for d in &model.dense {
        w.f64s(&d.weights_row_major());
        w.f64s(&d.biases);
    }
    w.buf
}

pub fn save_model(model: &NetworkModel, path: &Path) -> Result<()> {
    write_atomic(path, &encode_model(model))
}

enum Descriptor {
    Conv {
        sensors: usize,
        taps: usize,
        filters: usize,
    },
    Dense {
        inputs: usize,
        outputs: usize,
        activation: Activation,
    },
}

pub fn decode_model(bytes: &[u8]) -> Result<NetworkModel> {
    let mut r = Reader::new(bytes, "model file");
    check_magic(&mut r, MEGM_MAGIC)?;
    let version = r.u32()?;
    if version != MEGM_VERSION {
        return Err(Error::Version {
            found: version,
            expected: MEGM_VERSION,
        });
    }
    let fingerprint = Fingerprint(r.array::<32>()?);
    let sensors = r.u32()? as usize;
    let samples = r.u32()? as usize;
    let scaling = InputScaling::from_code(r.u8()?)
        .ok_or_else(|| Error::Corrupt("unknown input scaling".into()))?;
    let center = r.f64s(3)?;
    let frame = OutputFrame::new(Vec3::from_column_slice(&center), r.f64()?)
        .map_err(|e| Error::Corrupt(e.to_string()))?;
    let n_layers = r.u32()? as usize;
    if n_layers > 1024 {
        return Err(Error::Corrupt(format!(
            "implausible layer count {n_layers}"
        )));
    }
    let mut descs = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        descs.push(match r.u8()? {
            KIND_CONV => Descriptor::Conv {
                sensors: r.u32()? as usize,
                taps: r.u32()? as usize,
                filters: r.u32()? as usize,
            },
            KIND_DENSE => Descriptor::Dense {
                inputs: r.u32()? as usize,
                outputs: r.u32()? as usize,
                activation: Activation::from_code(r.u8()?)
                    .ok_or_else(|| Error::Corrupt("unknown activation".into()))?,
            },
            k => return Err(Error::Corrupt(format!("unknown layer kind {k}"))),
        });
    }
    let mut conv = None;
    let mut dense = Vec::new();
    for (i, d) in descs.into_iter().enumerate() {
        match d {
            Descriptor::Conv {
                sensors,
                taps,
                filters,
            } => {
                if i != 0 {
                    return Err(Error::Corrupt("conv layer must come first".into()));
                }
                let kernels = r.f64s(filters * sensors * taps)?;
                let biases = r.f64s(filters)?;
                conv = Some(
                    SpaceTimeConvLayer::from_parts(sensors, taps, filters, kernels, biases)
                        .map_err(|e| Error::Corrupt(e.to_string()))?,
                );
            }
            Descriptor::Dense {
                inputs,
                outputs,
                activation,
            } => {
                let weights = r.f64s(inputs * outputs)?;
                let biases = r.f64s(outputs)?;
                dense.push(
                    DenseLayer::from_row_major(inputs, outputs, &weights, biases, activation)
                        .map_err(|e| Error::Corrupt(e.to_string()))?,
                );
            }
        }
    }
    r.finish()?;
    let mut model = NetworkModel::new(sensors, samples, scaling, conv, dense)
        .map_err(|e| Error::Corrupt(e.to_string()))?;
    model.fingerprint = fingerprint;
    model.frame = frame;
    Ok(model)
}

pub fn load_model(path: &Path) -> Result<NetworkModel> {
    decode_model(&fs::read(path)?)
}
