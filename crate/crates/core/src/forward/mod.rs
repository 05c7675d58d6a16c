//! Synthetic MEG forward model: sensor helmet, cortical surrogate grid,
//! fixed-orientation lead field and noisy recordings.

mod geometry;
mod lead_field;
mod megl;
mod simulate;

pub use geometry::{build_synthetic_source_space, SensorArray, SourceSpace, Vec3};
pub use lead_field::{compute_lead_field, compute_lead_field_with, dipole_field, LeadFieldMatrix};
pub use megl::{
    fingerprint, read_lead_field, write_lead_field, Fingerprint, MEGL_MAGIC, MEGL_VERSION,
};
pub use simulate::{
    frobenius_norm, measure_snr, perturb_lead_field, simulate, Recording, Snr, SourceActivation,
};
