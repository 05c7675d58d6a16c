use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;

pub type Vec3 = Vector3<f64>;

const UNIT_TOL: f64 = 1e-12;
const IDEMPOTENT_TOL: f64 = 1e-14;

fn normalize_all(vs: Vec<Vec3>, what: &str) -> Result<Vec<Vec3>> {
    vs.into_iter()
        .enumerate()
        .map(|(i, v)| {
            let n = v.norm();
            if !(n.is_finite() && n > 0.0) {
                return Err(Error::invalid(format!(
                    "{what} {i} has zero or non-finite norm"
                )));
            }
            // Vectors already unit to rounding are kept bit-exact, so a
            // space read back from disk encodes to the same bytes.
            if (n - 1.0).abs() <= IDEMPOTENT_TOL {
                return Ok(v);
            }
            let u = v / n;
            debug_assert!((u.norm() - 1.0).abs() <= UNIT_TOL);
            Ok(u)
        })
        .collect()
}

fn check_finite(ps: &[Vec3], what: &str) -> Result<()> {
    match ps.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
        Some(i) => Err(Error::invalid(format!("{what} {i} is not finite"))),
        None => Ok(()),
    }
}

/// Quasi-uniform Fibonacci points on the upper unit hemisphere (z > 0).
fn fibonacci_hemisphere(count: usize, azimuth_offset: f64) -> Vec<Vec3> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..count)
        .map(|k| {
            let z = 1.0 - (k as f64 + 0.5) / count as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = azimuth_offset + golden * k as f64;
            Vec3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

/// MEG sensors: positions in meters and unit pick-up orientations.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorArray {
    positions: Vec<Vec3>,
    orientations: Vec<Vec3>,
}

impl SensorArray {
    /// Orientations are normalized on construction.
    pub fn new(positions: Vec<Vec3>, orientations: Vec<Vec3>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::invalid("sensor array needs at least one sensor"));
        }
        if positions.len() != orientations.len() {
            return Err(Error::invalid(
                "sensor positions/orientations length mismatch",
            ));
        }
        check_finite(&positions, "sensor position")?;
        let orientations = normalize_all(orientations, "sensor orientation")?;
        Ok(Self {
            positions,
            orientations,
        })
    }

    /// Radially oriented magnetometers spread over an upper hemisphere.
    pub fn helmet(count: usize, radius: f64) -> Result<Self> {
        if count == 0 || !(radius > 0.0) {
            return Err(Error::invalid("helmet needs count >= 1 and radius > 0"));
        }
        let dirs = fibonacci_hemisphere(count, 0.0);
        let positions = dirs.iter().map(|d| d * radius).collect();
        Self::new(positions, dirs)
    }

    /// Default whole-head helmet: 306 sensors at 12 cm.
    pub fn default_helmet() -> Self {
        Self::helmet(306, 0.12).expect("valid default helmet")
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn orientations(&self) -> &[Vec3] {
        &self.orientations
    }
}

/// Candidate dipole grid with one fixed orientation per point.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSpace {
    positions: Vec<Vec3>,
    orientations: Vec<Vec3>,
    grid_spacing: f64,
}

impl SourceSpace {
    /// Validates distinctness and normalizes orientations. The grid spacing
    /// is estimated as the side of the mean area cell on a hemisphere at the
    /// mean source radius.
    pub fn new(positions: Vec<Vec3>, orientations: Vec<Vec3>) -> Result<Self> {
        if positions.len() < 2 {
            return Err(Error::invalid("source space needs at least two points"));
        }
        if positions.len() != orientations.len() {
            return Err(Error::invalid(
                "source positions/orientations length mismatch",
            ));
        }
        check_finite(&positions, "source position")?;
        let orientations = normalize_all(orientations, "source orientation")?;

        let mut keys: Vec<(usize, [u64; 3])> = positions
            .iter()
            .enumerate()
            .map(|(i, p)| (i, [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()]))
            .collect();
        keys.sort_unstable_by_key(|k| k.1);
        if let Some(w) = keys.windows(2).find(|w| w[0].1 == w[1].1) {
            return Err(Error::invalid(format!(
                "source positions {} and {} coincide",
                w[0].0, w[1].0
            )));
        }

        let mean_r = positions.iter().map(|p| p.norm()).sum::<f64>() / positions.len() as f64;
        let grid_spacing = (2.0 * PI * mean_r * mean_r / positions.len() as f64).sqrt();
        Ok(Self {
            positions,
            orientations,
            grid_spacing,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn orientations(&self) -> &[Vec3] {
        &self.orientations
    }

    pub fn grid_spacing(&self) -> f64 {
        self.grid_spacing
    }

    pub fn position(&self, index: usize) -> Option<&Vec3> {
        self.positions.get(index)
    }

    pub fn centroid(&self) -> Vec3 {
        self.positions.iter().sum::<Vec3>() / self.positions.len() as f64
    }

    /// Reorders grid points: entry `k` of the result is point `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.len() {
            return Err(Error::invalid("permutation length mismatch"));
        }
        let positions = order.iter().map(|&i| self.positions[i]).collect();
        let orientations = order.iter().map(|&i| self.orientations[i]).collect();
        Self::new(positions, orientations)
    }
}

/// Deterministic cortex surrogate: `count` Fibonacci points on the upper
/// hemisphere of the given radius, seeded azimuthal offset, and a seeded
/// smooth tangential orientation field.
///
/// The field is `G·r̂ + b` (Gaussian `G` and `b`) projected onto each
/// tangent plane, so neighbouring dipoles point alike, as on a patch of
/// cortex.
pub fn build_synthetic_source_space(count: usize, radius: f64, seed: u64) -> Result<SourceSpace> {
    if count < 2 {
        return Err(Error::invalid(format!(
            "source count must be >= 2, got {count}"
        )));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::invalid(format!("radius must be > 0, got {radius}")));
    }
    let mut rng = rng::rng(seed);
    let offset = rng.random_range(0.0..2.0 * PI);
    let dirs = fibonacci_hemisphere(count, offset);
    let g = Matrix3::from_fn(|_, _| rng::standard_normal(&mut rng));
    let b = Vec3::from_fn(|_, _| rng::standard_normal(&mut rng));
    let orientations = dirs
        .iter()
        .map(|r| {
            let v = g * r + b;
            let t = v - r * v.dot(r);
            if t.norm() > 1e-9 {
                return t;
            }
            // the field vanishes here; any tangent direction will do
            let helper = if r.z.abs() < 0.9 {
                Vec3::z()
            } else {
                Vec3::x()
            };
            helper.cross(r)
        })
        .collect();
    let positions = dirs.iter().map(|d| d * radius).collect();
    SourceSpace::new(positions, orientations)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_space_sits_on_sphere() {
        let s = build_synthetic_source_space(2, 0.08, 7).unwrap();
        assert_eq!(s.len(), 2);
        assert_ne!(s.positions()[0], s.positions()[1]);
        for p in s.positions() {
            assert!((p.norm() - 0.08).abs() < 1e-15);
        }
    }

    #[test]
    fn full_size_grid() {
        let s = build_synthetic_source_space(15002, 0.08, 1).unwrap();
        assert_eq!(s.len(), 15002);
        assert!(s.positions().iter().all(|p| p.z > 0.0));
        for (p, q) in s.positions().iter().zip(s.orientations()) {
            assert!((q.norm() - 1.0).abs() <= 1e-12);
            // tangential
            assert!(q.dot(p).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = build_synthetic_source_space(500, 0.08, 3).unwrap();
        let b = build_synthetic_source_space(500, 0.08, 3).unwrap();
        let c = build_synthetic_source_space(500, 0.08, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn neighbouring_orientations_agree() {
        let s = build_synthetic_source_space(2000, 0.07, 5).unwrap();
        let (p, q) = (s.positions(), s.orientations());
        let mut cos = Vec::new();
        for i in 0..p.len() {
            let j = (0..p.len())
                .filter(|&j| j != i)
                .min_by(|&a, &b| (p[a] - p[i]).norm().total_cmp(&(p[b] - p[i]).norm()))
                .unwrap();
            cos.push(q[i].dot(&q[j]));
        }
        cos.sort_by(f64::total_cmp);
        assert!(cos[cos.len() / 2] > 0.95, "median {}", cos[cos.len() / 2]);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(build_synthetic_source_space(1, 0.08, 0).is_err());
        assert!(build_synthetic_source_space(10, 0.0, 0).is_err());
        assert!(build_synthetic_source_space(10, -1.0, 0).is_err());
    }

    #[test]
    fn duplicate_positions_rejected() {
        let p = vec![Vec3::new(0.0, 0.0, 0.05); 2];
        let q = vec![Vec3::x(); 2];
        assert!(SourceSpace::new(p, q).is_err());
    }

    #[test]
    fn orientations_are_normalized() {
        let s = SensorArray::new(
            vec![Vec3::new(0.0, 0.0, 0.1)],
            vec![Vec3::new(0.0, 0.0, 5.0)],
        )
        .unwrap();
        assert_eq!(s.orientations()[0], Vec3::z());
        assert!(SensorArray::new(vec![Vec3::zeros()], vec![Vec3::zeros()]).is_err());
        assert_eq!(SensorArray::default_helmet().len(), 306);
    }
}
