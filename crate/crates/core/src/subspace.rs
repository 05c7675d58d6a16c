//! Covariance-based scanning localizers: MUSIC and RAP-MUSIC over a
//! fixed-orientation lead field.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::forward::{LeadFieldMatrix, SourceSpace, Vec3};
use crate::par::{self, Exec};

/// Grid columns handed to one worker at a time.
const COLUMN_CHUNK: usize = 256;

pub fn sample_covariance(y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if y.ncols() == 0 {
        return Err(Error::invalid("covariance needs at least one sample"));
    }
    let c = y * y.transpose() / y.ncols() as f64;
    // exact symmetry
    Ok((&c + c.transpose()) * 0.5)
}

/// Orthonormal basis of the dominant eigenvectors of a covariance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalSubspace {
    pub basis: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
}

impl SignalSubspace {
    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }
}

/// Full symmetric eigendecomposition sorted by descending eigenvalue, with
/// each eigenvector's largest-magnitude component made positive.
pub fn sorted_eigen(c: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let m = c.nrows();
    if c.ncols() != m {
        return Err(Error::invalid("covariance must be square"));
    }
    let scale = c.amax().max(f64::MIN_POSITIVE);
    if (c - c.transpose()).amax() > 1e-9 * scale {
        return Err(Error::invalid("covariance must be symmetric"));
    }
    let eig = SymmetricEigen::try_new(c.clone(), f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numeric("symmetric eigendecomposition did not converge".into()))?;
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let mut vectors = DMatrix::zeros(m, m);
    let mut values = Vec::with_capacity(m);
    for (k, &i) in order.iter().enumerate() {
        let mut v = eig.eigenvectors.column(i).into_owned();
        let pivot = v.iamax();
        if v[pivot] < 0.0 {
            v.neg_mut();
        }
        vectors.set_column(k, &v);
        values.push(eig.eigenvalues[i]);
    }
    Ok((values, vectors))
}

pub fn signal_subspace(c: &DMatrix<f64>, rank: usize) -> Result<SignalSubspace> {
    let m = c.nrows();
    if rank == 0 || rank >= m {
        return Err(Error::invalid(format!(
            "subspace rank must be in 1..{m}, got {rank}"
        )));
    }
    let (values, vectors) = sorted_eigen(c)?;
    Ok(SignalSubspace {
        basis: vectors.columns(0, rank).into_owned(),
        eigenvalues: values[..rank].iter().map(|&v| v.max(0.0)).collect(),
    })
}

/// Subspace correlation of every grid topography: `‖Uᵀ â_p‖` with `â_p` the
/// unit-normalized column.
pub fn music_map(subspace: &SignalSubspace, lead_field: &LeadFieldMatrix) -> Result<Vec<f64>> {
    music_map_with(Exec::default(), subspace, lead_field)
}

pub fn music_map_with(
    exec: Exec,
    subspace: &SignalSubspace,
    lead_field: &LeadFieldMatrix,
) -> Result<Vec<f64>> {
    if subspace.basis.nrows() != lead_field.n_sensors() {
        return Err(Error::invalid(
            "subspace and lead field sensor counts differ",
        ));
    }
    let u = &subspace.basis;
    let mut out = vec![0.0; lead_field.n_sources()];
    par::for_each_chunk(exec, &mut out, COLUMN_CHUNK, |chunk, start| {
        for (k, v) in chunk.iter_mut().enumerate() {
            let a = lead_field.column(start + k);
            let norm = a.norm();
            let proj: f64 = u.column_iter().map(|uc| uc.dot(&a).powi(2)).sum();
            *v = proj.sqrt() / norm;
        }
    });
    Ok(out)
}

/// `I − B(BᵀB)⁻¹Bᵀ`, built from an orthonormal basis of `B`'s columns.
pub fn orthogonal_projector(m: usize, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut pi = DMatrix::identity(m, m);
    if b.ncols() == 0 {
        return Ok(pi);
    }
    if b.nrows() != m || b.ncols() >= m {
        return Err(Error::invalid("projector basis has incompatible shape"));
    }
    let qr = b.clone().qr();
    let r = qr.r();
    let rmax = r.diagonal().amax();
    if r.diagonal().iter().any(|d| d.abs() <= 1e-10 * rmax) {
        return Err(Error::Numeric(
            "found topographies are linearly dependent".into(),
        ));
    }
    let q = qr.q();
    pi -= &q * q.transpose();
    Ok(pi)
}

/// Sources found by a scanning localizer, in discovery order.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationResult {
    pub indices: Vec<usize>,
    pub positions: Vec<Vec3>,
    pub localizer_values: Vec<f64>,
    pub elapsed: f64,
    /// False when fewer sources than requested could be found.
    pub complete: bool,
}

fn check_inputs(
    y: &DMatrix<f64>,
    lead_field: &LeadFieldMatrix,
    space: &SourceSpace,
    q: usize,
) -> Result<()> {
    if !(1..=3).contains(&q) {
        return Err(Error::invalid(format!("Q must be 1, 2 or 3, got {q}")));
    }
    if q >= lead_field.n_sensors() {
        return Err(Error::invalid(
            "Q must be smaller than the number of sensors",
        ));
    }
    if y.nrows() != lead_field.n_sensors() {
        return Err(Error::invalid(format!(
            "data has {} channels, lead field has {}",
            y.nrows(),
            lead_field.n_sensors()
        )));
    }
    if lead_field.n_sources() != space.len() {
        return Err(Error::invalid("lead field and source space sizes differ"));
    }
    Ok(())
}

/// Global maximum; the lowest index wins exact ties.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// One RAP-MUSIC scan: projects every lead-field column with `pi` and
/// evaluates the subspace correlation. Columns already found are zeroed.
fn projected_map(
    exec: Exec,
    pi: &DMatrix<f64>,
    u: &DMatrix<f64>,
    lead_field: &LeadFieldMatrix,
    found: &[usize],
) -> Vec<f64> {
    let m = lead_field.n_sensors();
    let mut out = vec![0.0; lead_field.n_sources()];
    par::for_each_chunk(exec, &mut out, COLUMN_CHUNK, |chunk, start| {
        let mut proj = DVector::<f64>::zeros(m);
        for (k, v) in chunk.iter_mut().enumerate() {
            let p = start + k;
            if found.contains(&p) {
                *v = 0.0;
                continue;
            }
            let a = lead_field.column(p);
            pi.mul_to(&a, &mut proj);
            let norm = proj.norm();
            if norm <= 1e-10 * a.norm() {
                *v = 0.0;
                continue;
            }
            let s: f64 = u.column_iter().map(|uc| uc.dot(&proj).powi(2)).sum();
            *v = s.sqrt() / norm;
        }
    });
    out
}

pub fn rap_music_localize(
    y: &DMatrix<f64>,
    lead_field: &LeadFieldMatrix,
    space: &SourceSpace,
    q: usize,
) -> Result<LocalizationResult> {
    rap_music_localize_with(Exec::default(), y, lead_field, space, q)
}

/// Recursively applied and projected MUSIC. At step k the topographies found
/// so far are projected out of the data and of every grid column, and the
/// localizer is scanned against the rank `q − k + 1` signal subspace of the
/// projected data.
pub fn rap_music_localize_with(
    exec: Exec,
    y: &DMatrix<f64>,
    lead_field: &LeadFieldMatrix,
    space: &SourceSpace,
    q: usize,
) -> Result<LocalizationResult> {
    check_inputs(y, lead_field, space, q)?;
    let start = Instant::now();
    let m = lead_field.n_sensors();
    let mut found: Vec<usize> = Vec::with_capacity(q);
    let mut values = Vec::with_capacity(q);

    for k in 0..q {
        let b = lead_field.select(&found)?;
        let pi = orthogonal_projector(m, &b)?;
        let y_proj = &pi * y;
        let cov = sample_covariance(&y_proj)?;
        let sub = signal_subspace(&cov, q - k)?;
        let map = projected_map(exec, &pi, &sub.basis, lead_field, &found);
        let best = argmax(&map);
        found.push(best);
        values.push(map[best]);
    }

    Ok(LocalizationResult {
        positions: found.iter().map(|&i| space.positions()[i]).collect(),
        indices: found,
        localizer_values: values,
        elapsed: start.elapsed().as_secs_f64(),
        complete: true,
    })
}

/// k-nearest-neighbour adjacency over grid positions.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    neighbors: Vec<Vec<usize>>,
}

impl NeighborGraph {
    pub const DEFAULT_K: usize = 6;

    pub fn knn(space: &SourceSpace, k: usize) -> Self {
        Self::knn_with(Exec::default(), space, k)
    }

    pub fn knn_with(exec: Exec, space: &SourceSpace, k: usize) -> Self {
        let pos = space.positions();
        let k = k.min(pos.len() - 1);
        let neighbors = par::map_range(exec, pos.len(), |i| {
            let mut d: Vec<(f64, usize)> = pos
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, p)| ((p - pos[i]).norm_squared(), j))
                .collect();
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < d.len() {
                d.select_nth_unstable_by(k, cmp);
                d.truncate(k);
            }
            d.sort_by(cmp);
            d.into_iter().map(|(_, j)| j).collect()
        });
        Self { neighbors }
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    /// Indices whose value beats every neighbour (ties go to the lower
    /// index), sorted by value descending then index ascending.
    pub fn local_maxima(&self, values: &[f64]) -> Vec<usize> {
        let mut maxima: Vec<usize> = (0..values.len())
            .filter(|&i| {
                self.neighbors[i]
                    .iter()
                    .all(|&j| values[i] > values[j] || (values[i] == values[j] && i < j))
            })
            .collect();
        maxima.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
        maxima
    }
}

pub fn music_localize(
    y: &DMatrix<f64>,
    lead_field: &LeadFieldMatrix,
    space: &SourceSpace,
    q: usize,
) -> Result<LocalizationResult> {
    let graph = NeighborGraph::knn(space, NeighborGraph::DEFAULT_K);
    music_localize_with_graph(Exec::default(), y, lead_field, space, &graph, q)
}

/// Non-recursive MUSIC: one scan against the rank-`q` subspace, returning the
/// `q` largest local maxima of the map over the neighbour graph.
pub fn music_localize_with_graph(
    exec: Exec,
    y: &DMatrix<f64>,
    lead_field: &LeadFieldMatrix,
    space: &SourceSpace,
    graph: &NeighborGraph,
    q: usize,
) -> Result<LocalizationResult> {
    check_inputs(y, lead_field, space, q)?;
    if graph.len() != space.len() {
        return Err(Error::invalid(
            "neighbour graph does not match the source space",
        ));
    }
    let start = Instant::now();
    let cov = sample_covariance(y)?;
    let sub = signal_subspace(&cov, q)?;
    let map = music_map_with(exec, &sub, lead_field)?;
    let mut maxima = graph.local_maxima(&map);
    maxima.truncate(q);
    Ok(LocalizationResult {
        positions: maxima.iter().map(|&i| space.positions()[i]).collect(),
        localizer_values: maxima.iter().map(|&i| map[i]).collect(),
        complete: maxima.len() == q,
        indices: maxima,
        elapsed: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{
        build_synthetic_source_space, compute_lead_field, simulate, SensorArray, Snr,
        SourceActivation,
    };
    use crate::rng;
    use crate::signal::{sinusoid_mixture_timecourses, Correlation, TimecourseSpec};

    fn setup(p: usize, m: usize) -> (LeadFieldMatrix, SourceSpace) {
        let sensors = SensorArray::helmet(m, 0.12).unwrap();
        let space = build_synthetic_source_space(p, 0.08, 21).unwrap();
        (compute_lead_field(&sensors, &space).unwrap(), space)
    }

    fn random_matrix(r: usize, c: usize, seed: u64) -> DMatrix<f64> {
        let mut g = rng::rng(seed);
        DMatrix::from_vec(r, c, rng::gaussian_vec(&mut g, r * c))
    }

    fn noiseless(lf: &LeadFieldMatrix, idx: &[usize], rho: f64, seed: u64) -> DMatrix<f64> {
        let s = sinusoid_mixture_timecourses(&TimecourseSpec {
            n_samples: 16,
            n_sources: idx.len(),
            correlation: Correlation::Fixed(rho),
            amplitude: 1.0,
            seed,
        })
        .unwrap();
        simulate(
            lf,
            &SourceActivation::new(idx.to_vec(), s).unwrap(),
            Snr::Noiseless,
            0,
        )
        .unwrap()
        .measurements
    }

    #[test]
    fn covariance_examples() {
        let y = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, -1.0]);
        let c = sample_covariance(&y).unwrap();
        assert_eq!(c, &y * y.transpose());
        // [[1,0],[0,1]] with N = 2 → C = I/2; [[1,2],[3,4]] → [[5,11],[11,25]]/2
        assert_eq!(
            sample_covariance(&DMatrix::identity(2, 2)).unwrap(),
            DMatrix::identity(2, 2) * 0.5
        );
        let c = sample_covariance(&DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(c, DMatrix::from_row_slice(2, 2, &[2.5, 5.5, 5.5, 12.5]));
        let c = sample_covariance(&random_matrix(7, 5, 1)).unwrap();
        assert!((&c - c.transpose()).amax() <= 1e-12);
    }

    #[test]
    fn subspace_examples() {
        let v = DVector::from_vec(vec![0.6, -0.8, 0.0]);
        let c = &v * v.transpose();
        let s = signal_subspace(&c, 1).unwrap();
        assert!((s.eigenvalues[0] - 1.0).abs() < 1e-12);
        // largest-magnitude component (-0.8) flipped positive
        assert!((s.basis.column(0) + &v).amax() < 1e-12);

        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0, 2.0]));
        let s = signal_subspace(&d, 2).unwrap();
        assert_eq!(s.eigenvalues, vec![3.0, 2.0]);
        assert!((s.basis.column(0) - DVector::from_vec(vec![0.0, 1.0, 0.0])).amax() < 1e-12);
        assert!((s.basis.column(1) - DVector::from_vec(vec![0.0, 0.0, 1.0])).amax() < 1e-12);

        assert!(signal_subspace(&d, 3).is_err());
        assert!(signal_subspace(&d, 0).is_err());
    }

    #[test]
    fn eigen_reconstruction() {
        let a = random_matrix(6, 6, 4);
        let c = (&a + a.transpose()) * 0.5;
        let (vals, vecs) = sorted_eigen(&c).unwrap();
        let mut rec = DMatrix::zeros(6, 6);
        for i in 0..6 {
            let u = vecs.column(i);
            rec += &u * u.transpose() * vals[i];
        }
        assert!((rec - &c).amax() < 1e-9);
        assert!(vals.windows(2).all(|w| w[0] >= w[1]));
        let s = signal_subspace(&c, 4).unwrap();
        assert!((s.basis.transpose() * &s.basis - DMatrix::identity(4, 4)).amax() < 1e-10);
    }

    #[test]
    fn music_map_matches_direct_oracle() {
        let (lf, _) = setup(10, 8);
        let q = random_matrix(8, 2, 9).qr().q();
        let sub = SignalSubspace {
            basis: q.clone(),
            eigenvalues: vec![2.0, 1.0],
        };
        let map = music_map(&sub, &lf).unwrap();
        for (p, v) in map.iter().enumerate() {
            let a = lf.topography(p).unwrap();
            let n = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let mut acc = 0.0;
            for j in 0..2 {
                let d: f64 = (0..8).map(|i| q[(i, j)] * a[i] / n).sum();
                acc += d * d;
            }
            assert!((v - acc.sqrt()).abs() < 1e-12);
            assert!(*v >= 0.0 && *v <= 1.0 + 1e-12);
        }
        assert_eq!(map, music_map_with(Exec::Serial, &sub, &lf).unwrap());
    }

    #[test]
    fn music_map_extremes() {
        let (lf, _) = setup(30, 12);
        let y = noiseless(&lf, &[7], 0.0, 1);
        let sub = signal_subspace(&sample_covariance(&y).unwrap(), 1).unwrap();
        let map = music_map(&sub, &lf).unwrap();
        assert!((map[7] - 1.0).abs() < 1e-9);

        // subspace orthogonal to column 3
        let a = lf.topography(3).unwrap();
        let pi = orthogonal_projector(12, &DMatrix::from_columns(&[a])).unwrap();
        let u = (&pi * random_matrix(12, 1, 2)).normalize();
        let sub = SignalSubspace {
            basis: u,
            eigenvalues: vec![1.0],
        };
        assert!(music_map(&sub, &lf).unwrap()[3].abs() < 1e-12);
    }

    #[test]
    fn projector_properties() {
        let b = random_matrix(9, 3, 3);
        let pi = orthogonal_projector(9, &b).unwrap();
        assert!((&pi * &pi - &pi).amax() < 1e-10);
        assert!((&pi * &b).amax() < 1e-10);
        let mut dep = b.clone();
        let c0 = dep.column(0).into_owned();
        dep.set_column(2, &(c0 * 2.0));
        assert!(matches!(
            orthogonal_projector(9, &dep),
            Err(Error::Numeric(_))
        ));
        assert_eq!(
            orthogonal_projector(9, &DMatrix::zeros(9, 0)).unwrap(),
            DMatrix::identity(9, 9)
        );
    }

    #[test]
    fn rap_single_source_exact() {
        let (lf, space) = setup(200, 32);
        let y = noiseless(&lf, &[123], 0.0, 5);
        let r = rap_music_localize(&y, &lf, &space, 1).unwrap();
        assert_eq!(r.indices, vec![123]);
        assert!((r.localizer_values[0] - 1.0).abs() < 1e-9);
        assert_eq!(r.positions[0], space.positions()[123]);
        assert!(r.elapsed > 0.0);
    }

    #[test]
    fn rap_first_step_is_music_argmax() {
        let (lf, space) = setup(100, 24);
        let mut y = noiseless(&lf, &[10, 60], 0.3, 6);
        y += random_matrix(24, 16, 7) * 0.05 * y.amax();
        let sub = signal_subspace(&sample_covariance(&y).unwrap(), 2).unwrap();
        let map = music_map(&sub, &lf).unwrap();
        let r = rap_music_localize(&y, &lf, &space, 2).unwrap();
        assert_eq!(r.indices[0], argmax(&map));
        let r1 = music_localize(&y, &lf, &space, 1).unwrap();
        let r1_rap = rap_music_localize(&y, &lf, &space, 1).unwrap();
        assert_eq!(r1.indices, r1_rap.indices);
    }

    #[test]
    fn rap_serial_equals_parallel() {
        let (lf, space) = setup(150, 20);
        let y = noiseless(&lf, &[1, 77, 140], 0.5, 8);
        let a = rap_music_localize_with(Exec::Serial, &y, &lf, &space, 3).unwrap();
        let b = rap_music_localize_with(Exec::Parallel, &y, &lf, &space, 3).unwrap();
        assert_eq!(a.indices, b.indices);
        assert_eq!(a.localizer_values, b.localizer_values);
    }

    #[test]
    fn music_two_separated_sources() {
        let (lf, space) = setup(200, 32);
        // pick two grid points far apart
        let far = (0..200)
            .max_by(|&a, &b| {
                let da = (space.positions()[a] - space.positions()[0]).norm();
                let db = (space.positions()[b] - space.positions()[0]).norm();
                da.total_cmp(&db)
            })
            .unwrap();
        let y = noiseless(&lf, &[0, far], 0.0, 3);
        let mut r = music_localize(&y, &lf, &space, 2).unwrap();
        r.indices.sort();
        assert!(r.complete);
        let mut want = vec![0, far];
        want.sort();
        assert_eq!(r.indices, want);
    }

    #[test]
    fn knn_graph_and_maxima() {
        let space = build_synthetic_source_space(50, 0.08, 1).unwrap();
        let g = NeighborGraph::knn(&space, 6);
        for i in 0..50 {
            assert_eq!(g.neighbors(i).len(), 6);
            assert!(!g.neighbors(i).contains(&i));
        }
        let flat = vec![1.0; 50];
        // all tied: only points lower than all their neighbours survive
        let maxima = g.local_maxima(&flat);
        assert!(maxima.contains(&0));
        for &i in &maxima {
            assert!(g.neighbors(i).iter().all(|&j| i < j));
        }
    }

    #[test]
    fn shape_errors() {
        let (lf, space) = setup(20, 8);
        let y = DMatrix::zeros(7, 4);
        assert!(rap_music_localize(&y, &lf, &space, 1).is_err());
        let y = DMatrix::zeros(8, 4);
        assert!(rap_music_localize(&y, &lf, &space, 4).is_err());
    }
}
