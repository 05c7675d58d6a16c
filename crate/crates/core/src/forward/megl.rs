//! `MEGL` lead-field files.
//!
//! Layout (little-endian): magic `MEGL`, version u32, M u32, P u32, then the
//! M·P lead-field entries as f64 in column-major order, then P×3 source
//! positions and P×3 source orientations as f64 (point-major).

use std::fmt;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use super::geometry::{SourceSpace, Vec3};
use super::lead_field::LeadFieldMatrix;
use crate::binio::{check_magic, write_atomic, Reader, Writer};
use crate::error::{Error, Result};

pub const MEGL_MAGIC: &[u8; 4] = b"MEGL";
pub const MEGL_VERSION: u32 = 1;

/// SHA-256 of a serialized lead-field file; binds datasets and models to
/// the forward model they were made with.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Fingerprint(pub [u8; 32]);

impl Fingerprint {
    pub fn is_unset(&self) -> bool {
        self.0 == [0; 32]
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fingerprint({self})")
    }
}

pub(crate) fn encode(lead_field: &LeadFieldMatrix, space: &SourceSpace) -> Result<Vec<u8>> {
    if lead_field.n_sources() != space.len() {
        return Err(Error::invalid(format!(
            "lead field has {} columns but source space has {} points",
            lead_field.n_sources(),
            space.len()
        )));
    }
    let mut w = Writer::default();
    w.bytes(MEGL_MAGIC);
    w.u32(MEGL_VERSION);
    w.u32(lead_field.n_sensors() as u32);
    w.u32(lead_field.n_sources() as u32);
    w.f64s(lead_field.entries().as_slice());
    for p in space.positions() {
        w.f64s(p.as_slice());
    }
    for q in space.orientations() {
        w.f64s(q.as_slice());
    }
    Ok(w.buf)
}

pub fn fingerprint(lead_field: &LeadFieldMatrix, space: &SourceSpace) -> Result<Fingerprint> {
    Ok(Fingerprint(
        Sha256::digest(encode(lead_field, space)?).into(),
    ))
}

pub fn write_lead_field(
    path: &Path,
    lead_field: &LeadFieldMatrix,
    space: &SourceSpace,
) -> Result<Fingerprint> {
    let bytes = encode(lead_field, space)?;
    write_atomic(path, &bytes)?;
    Ok(Fingerprint(Sha256::digest(&bytes).into()))
}

pub fn read_lead_field(path: &Path) -> Result<(LeadFieldMatrix, SourceSpace, Fingerprint)> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes, "lead-field file");
    check_magic(&mut r, MEGL_MAGIC)?;
    let version = r.u32()?;
    if version != MEGL_VERSION {
        return Err(Error::Version {
            found: version,
            expected: MEGL_VERSION,
        });
    }
    let m = r.u32()? as usize;
    let p = r.u32()? as usize;
    let entries = r.f64s(m * p)?;
    let mut vecs = |n: usize| -> Result<Vec<Vec3>> {
        Ok(r.f64s(n * 3)?
            .chunks_exact(3)
            .map(Vec3::from_column_slice)
            .collect())
    };
    let positions = vecs(p)?;
    let orientations = vecs(p)?;
    r.finish()?;
    let lead_field = LeadFieldMatrix::from_matrix(DMatrix::from_vec(m, p, entries))
        .map_err(|e| Error::Corrupt(e.to_string()))?;
    let space =
        SourceSpace::new(positions, orientations).map_err(|e| Error::Corrupt(e.to_string()))?;
    Ok((
        lead_field,
        space,
        Fingerprint(Sha256::digest(&bytes).into()),
    ))
}
