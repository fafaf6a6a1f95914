//! Spherical k-means pseudo-labeling: fits centroids to unit-norm region
//! features (optionally in a two-level coarse/fine hierarchy) and assigns
//! labels by exact nearest-centroid search.
//!
//! On L2-normalized vectors, assignment by minimal Euclidean distance and by
//! maximal cosine similarity coincide (`‖f − c‖² = 2 − 2 f·c`), so Lloyd
//! iterations assign by distance and update each center to the normalized
//! mean of its points — the exact minimizer of within-cluster squared
//! distance under the unit-norm constraint, which keeps inertia
//! non-increasing.

use crate::binio;
use crate::error::{Error, Result};
use crate::linalg::l2_normalize_rows;
use crate::real::Real;
use crate::rng::{derive_seed, rng_from_seed, stream};
use ndarray::{Array2, ArrayView1};
use rand::Rng;
use rayon::prelude::*;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const CENTROID_MAGIC: &[u8; 4] = b"RICC";
const COARSE_MAGIC: &[u8; 4] = b"RICH";

/// Unit-norm tolerance for table validation, measured at f64.
const ROW_NORM_TOL: f64 = 1e-6;

/// Coarse level of a hierarchical fit: its centers plus, for each coarse
/// bucket, the indices of the fine centers fitted inside it.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseLevel<F> {
    pub centers: Array2<F>,
    pub children: Vec<Vec<usize>>,
}

/// Fitted cluster centers. `centers` rows are the K fine centers every
/// assignment scans exactly; `level1` records the coarse structure of a
/// hierarchical fit (it plays no role in assignment).
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidTable<F> {
    pub centers: Array2<F>,
    pub level1: Option<CoarseLevel<F>>,
}

impl<F: Real> CentroidTable<F> {
    pub fn new(centers: Array2<F>, level1: Option<CoarseLevel<F>>) -> Result<Self> {
        let table = CentroidTable { centers, level1 };
        table.validate()?;
        Ok(table)
    }

    pub fn k(&self) -> usize {
        self.centers.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centers.ncols()
    }

    /// Checks the type invariants: K ≥ 1, unit rows (measured at f64), and —
    /// when a coarse level is present — children forming an exact partition
    /// of the fine centers.
    pub fn validate(&self) -> Result<()> {
        if self.k() == 0 {
            return Err(Error::validation("centroid table is empty"));
        }
        let check_rows = |m: &Array2<F>, what: &str| -> Result<()> {
            for (i, row) in m.outer_iter().enumerate() {
                let norm = row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
                if !norm.is_finite() || (norm - 1.0).abs() > ROW_NORM_TOL {
                    return Err(Error::validation(format!(
                        "{what} row {i} has norm {norm}, expected 1"
                    )));
                }
            }
            Ok(())
        };
        check_rows(&self.centers, "centroid")?;
        if let Some(level1) = &self.level1 {
            check_rows(&level1.centers, "coarse centroid")?;
            if level1.children.len() != level1.centers.nrows() {
                return Err(Error::validation(
                    "coarse child lists do not match coarse center count",
                ));
            }
            let mut seen = vec![false; self.k()];
            for children in &level1.children {
                for &c in children {
                    if c >= self.k() || seen[c] {
                        return Err(Error::validation(
                            "coarse children must partition the fine centers",
                        ));
                    }
                    seen[c] = true;
                }
            }
            if seen.iter().any(|&s| !s) {
                return Err(Error::validation(
                    "coarse children must cover every fine center",
                ));
            }
        }
        Ok(())
    }

    /// Precision cast (e.g. f64 fit → f32 file). Entry-wise; unit norms move
    /// by at most a few ulps, well inside the validation tolerance.
    pub fn cast<G: Real>(&self) -> CentroidTable<G> {
        CentroidTable {
            centers: self.centers.mapv(|v| G::from_f64(v.as_f64())),
            level1: self.level1.as_ref().map(|l| CoarseLevel {
                centers: l.centers.mapv(|v| G::from_f64(v.as_f64())),
                children: l.children.clone(),
            }),
        }
    }
}

/// Inertia traces of every Lloyd run in a fit: one trace for a flat fit, and
/// `1 + K1` traces (coarse first) for a hierarchical fit. Each trace holds
/// the total squared distance at every assignment step and is non-increasing.
#[derive(Debug, Clone, Default)]
pub struct FitStats {
    pub inertia_traces: Vec<Vec<f64>>,
}

impl FitStats {
    /// Inertia after the final assignment of the fine (or flat) fit, summed
    /// over all runs that produced fine centers.
    pub fn final_inertia(&self) -> f64 {
        if self.inertia_traces.len() == 1 {
            *self.inertia_traces[0].last().unwrap_or(&0.0)
        } else {
            self.inertia_traces[1..]
                .iter()
                .filter_map(|t| t.last())
                .sum()
        }
    }
}

/// Fits `k` centers to the feature rows (normalizing them first). With
/// `coarse_k = Some(K1)`, fits K1 coarse centers, partitions the points, and
/// fits ⌈k/K1⌉ fine centers inside each bucket (capped by bucket size), so
/// the realized fine-center count can differ slightly from `k`.
pub fn kmeans_fit<F: Real>(
    features: &Array2<F>,
    k: usize,
    coarse_k: Option<usize>,
    iters: usize,
    seed: u64,
) -> Result<(CentroidTable<F>, FitStats)> {
    let n = features.nrows();
    if k == 0 {
        return Err(Error::config("K must be >= 1"));
    }
    if n < k {
        return Err(Error::validation(format!(
            "cannot fit {k} clusters to {n} points"
        )));
    }
    let mut points = features.clone();
    l2_normalize_rows(&mut points)?;

    let mut stats = FitStats::default();
    let table = match coarse_k {
        None => {
            let mut rng = rng_from_seed(derive_seed(seed, &[stream::KMEANS]));
            let mut trace = Vec::new();
            let (centers, _) = lloyd(&points, k, iters, &mut rng, &mut trace)?;
            stats.inertia_traces.push(trace);
            CentroidTable::new(centers, None)?
        }
        Some(k1) => {
            if k1 > k {
                return Err(Error::config(format!("coarse K1 {k1} exceeds K {k}")));
            }
            let mut rng = rng_from_seed(derive_seed(seed, &[stream::KMEANS, 0]));
            let mut trace = Vec::new();
            let (coarse_centers, assignment) = lloyd(&points, k1, iters, &mut rng, &mut trace)?;
            stats.inertia_traces.push(trace);

            let per_bucket = k.div_ceil(k1);
            let mut fine_rows: Vec<Array2<F>> = Vec::with_capacity(k1);
            let mut children: Vec<Vec<usize>> = Vec::with_capacity(k1);
            let mut next_fine = 0usize;
            for bucket in 0..k1 {
                let member_rows: Vec<usize> = assignment
                    .iter()
                    .enumerate()
                    .filter_map(|(i, &a)| (a == bucket).then_some(i))
                    .collect();
                if member_rows.is_empty() {
                    children.push(Vec::new());
                    stats.inertia_traces.push(Vec::new());
                    continue;
                }
                let mut bucket_points = Array2::zeros((member_rows.len(), points.ncols()));
                for (row, &i) in member_rows.iter().enumerate() {
                    bucket_points.row_mut(row).assign(&points.row(i));
                }
                let fine_k = per_bucket.min(member_rows.len());
                let mut bucket_rng =
                    rng_from_seed(derive_seed(seed, &[stream::KMEANS, 1 + bucket as u64]));
                let mut trace = Vec::new();
                let (centers, _) =
                    lloyd(&bucket_points, fine_k, iters, &mut bucket_rng, &mut trace)?;
                stats.inertia_traces.push(trace);
                children.push((next_fine..next_fine + fine_k).collect());
                next_fine += fine_k;
                fine_rows.push(centers);
            }
            let dim = points.ncols();
            let mut centers = Array2::zeros((next_fine, dim));
            let mut offset = 0;
            for block in &fine_rows {
                centers
                    .slice_mut(ndarray::s![offset..offset + block.nrows(), ..])
                    .assign(block);
                offset += block.nrows();
            }
            CentroidTable::new(
                centers,
                Some(CoarseLevel {
                    centers: coarse_centers,
                    children,
                }),
            )?
        }
    };
    Ok((table, stats))
}

/// Lloyd's algorithm on unit vectors with k-means++ seeding and
/// farthest-point repair of empty clusters. Returns the centers and the
/// final assignment; pushes inertia onto `trace` at every assignment step
/// (`iters + 1` entries).
fn lloyd<F: Real>(
    points: &Array2<F>,
    k: usize,
    iters: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
    trace: &mut Vec<f64>,
) -> Result<(Array2<F>, Vec<usize>)> {
    let n = points.nrows();
    let dim = points.ncols();
    debug_assert!(k >= 1 && n >= k);

    let seeds = kmeanspp_seed(points, k, rng);
    let mut centers = Array2::zeros((k, dim));
    for (row, &i) in seeds.iter().enumerate() {
        centers.row_mut(row).assign(&points.row(i));
    }

    let mut assignment = vec![0usize; n];
    for _ in 0..iters {
        let assigned = assign_points(points, &centers);
        trace.push(assigned.iter().map(|&(_, d2)| d2).sum());
        debug_assert!(
            trace.len() < 2 || trace[trace.len() - 1] <= trace[trace.len() - 2] + 1e-9,
            "Lloyd inertia increased"
        );
        for (i, &(a, _)) in assigned.iter().enumerate() {
            assignment[i] = a;
        }
        update_centers(points, &assigned, &mut centers)?;
    }
    let assigned = assign_points(points, &centers);
    trace.push(assigned.iter().map(|&(_, d2)| d2).sum());
    for (i, &(a, _)) in assigned.iter().enumerate() {
        assignment[i] = a;
    }
    Ok((centers, assignment))
}

/// k-means++: first seed uniform, then each next seed drawn with probability
/// proportional to squared distance from the nearest chosen seed.
fn kmeanspp_seed<F: Real>(
    points: &Array2<F>,
    k: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<usize> {
    let n = points.nrows();
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.random_range(0..n));
    let mut d2 = vec![f64::INFINITY; n];
    while chosen.len() < k {
        let latest = points.row(*chosen.last().unwrap());
        for (i, d) in d2.iter_mut().enumerate() {
            let dist = sq_dist(points.row(i), latest);
            if dist < *d {
                *d = dist;
            }
        }
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            // All remaining points coincide with chosen seeds; take the first
            // index not yet chosen to keep seeds distinct.
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
    }
    chosen
}

/// Nearest center per point, in parallel, order preserved.
fn assign_points<F: Real>(points: &Array2<F>, centers: &Array2<F>) -> Vec<(usize, f64)> {
    (0..points.nrows())
        .into_par_iter()
        .map(|i| nearest(centers, points.row(i)))
        .collect()
}

/// Normalized per-cluster means; empty clusters are re-seeded from the point
/// farthest from its assigned center (repeatedly, excluding reused points).
fn update_centers<F: Real>(
    points: &Array2<F>,
    assigned: &[(usize, f64)],
    centers: &mut Array2<F>,
) -> Result<()> {
    let k = centers.nrows();
    let dim = centers.ncols();
    let mut sums = vec![vec![0.0f64; dim]; k];
    let mut counts = vec![0usize; k];
    for (i, &(a, _)) in assigned.iter().enumerate() {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(points.row(i).iter()) {
            *s += v.as_f64();
        }
    }
    let mut farthest_used = vec![false; points.nrows()];
    for cluster in 0..k {
        if counts[cluster] == 0 {
            let far = assigned
                .iter()
                .enumerate()
                .filter(|(i, _)| !farthest_used[*i])
                .max_by(|a, b| a.1 .1.partial_cmp(&b.1 .1).unwrap().then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .ok_or_else(|| Error::numeric("no point available to repair empty cluster"))?;
            farthest_used[far] = true;
            centers.row_mut(cluster).assign(&points.row(far));
            continue;
        }
        let norm = sums[cluster].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::numeric(
                "cluster mean vanished; antipodal points cancel exactly",
            ));
        }
        for (c, s) in centers.row_mut(cluster).iter_mut().zip(&sums[cluster]) {
            *c = F::from_f64(s / norm);
        }
    }
    Ok(())
}

fn sq_dist<F: Real>(a: ArrayView1<'_, F>, b: ArrayView1<'_, F>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum()
}

/// Exhaustive argmin of Euclidean distance (computed at f64); ties go to the
/// smallest index.
fn nearest<F: Real>(centers: &Array2<F>, point: ArrayView1<'_, F>) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (idx, c) in centers.outer_iter().enumerate() {
        let d2 = sq_dist(point, c);
        if d2 < best.1 {
            best = (idx, d2);
        }
    }
    best
}

/// Pseudo-label of one feature: the exact nearest fine center after
/// normalization. The coarse level never participates.
pub fn assign_label<F: Real>(feature: ArrayView1<'_, F>, table: &CentroidTable<F>) -> Result<usize> {
    if feature.len() != table.dim() {
        return Err(Error::validation(format!(
            "feature dim {} != centroid dim {}",
            feature.len(),
            table.dim()
        )));
    }
    let norm = feature.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return Err(Error::numeric("cannot assign a zero-norm or non-finite feature"));
    }
    let unit = feature.mapv(|v| F::from_f64(v.as_f64() / norm));
    Ok(nearest(&table.centers, unit.view()).0)
}

/// Labels for every feature row plus a per-class histogram of length K.
pub fn assign_all<F: Real>(
    features: &Array2<F>,
    table: &CentroidTable<F>,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let labels = (0..features.nrows())
        .into_par_iter()
        .map(|i| assign_label(features.row(i), table))
        .collect::<Result<Vec<_>>>()?;
    let mut histogram = vec![0usize; table.k()];
    for &l in &labels {
        histogram[l] += 1;
    }
    Ok((labels, histogram))
}

// ---------------------------------------------------------------------------
// Centroid file I/O
// ---------------------------------------------------------------------------

/// Writes a table: magic "RICC", u32 K, u32 D, f32 rows; when a coarse level
/// is present, an appended block: magic "RICH", u32 K1, f32 rows, then per
/// bucket a u32 child count and u32 child indices.
pub fn write_centroids<W: Write>(writer: &mut W, table: &CentroidTable<f32>) -> Result<()> {
    table.validate()?;
    writer.write_all(CENTROID_MAGIC)?;
    binio::write_u32(writer, table.k() as u32)?;
    binio::write_u32(writer, table.dim() as u32)?;
    binio::write_f32s(writer, table.centers.as_slice().expect("contiguous"))?;
    if let Some(level1) = &table.level1 {
        writer.write_all(COARSE_MAGIC)?;
        binio::write_u32(writer, level1.centers.nrows() as u32)?;
        binio::write_f32s(writer, level1.centers.as_slice().expect("contiguous"))?;
        for children in &level1.children {
            binio::write_u32(writer, children.len() as u32)?;
            for &c in children {
                binio::write_u32(writer, c as u32)?;
            }
        }
    }
    Ok(())
}

pub fn read_centroids<R: Read>(reader: &mut R) -> Result<CentroidTable<f32>> {
    binio::expect_magic(reader, CENTROID_MAGIC)?;
    let k = binio::read_u32(reader, "centroid count")? as usize;
    let dim = binio::read_u32(reader, "centroid dim")? as usize;
    if k == 0 || dim == 0 {
        return Err(Error::format("centroid file declares zero K or D"));
    }
    let data = binio::read_f32s(reader, k * dim, "centroid rows")?;
    let centers = Array2::from_shape_vec((k, dim), data).expect("shape matches read");

    let mut magic = [0u8; 4];
    let level1 = match reader.read(&mut magic) {
        Ok(0) => None,
        Ok(4) if &magic == COARSE_MAGIC => {
            let k1 = binio::read_u32(reader, "coarse count")? as usize;
            let data = binio::read_f32s(reader, k1 * dim, "coarse rows")?;
            let coarse = Array2::from_shape_vec((k1, dim), data).expect("shape matches read");
            let mut children = Vec::with_capacity(k1);
            for _ in 0..k1 {
                let len = binio::read_u32(reader, "child count")? as usize;
                let mut list = Vec::with_capacity(len);
                for _ in 0..len {
                    list.push(binio::read_u32(reader, "child index")? as usize);
                }
                children.push(list);
            }
            Some(CoarseLevel {
                centers: coarse,
                children,
            })
        }
        Ok(_) => return Err(Error::format("trailing bytes after centroid rows")),
        Err(e) => return Err(Error::Io(e)),
    };
    CentroidTable::new(centers, level1)
}

pub fn write_centroids_file(path: &Path, table: &CentroidTable<f32>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_centroids(&mut w, table)?;
    w.flush()?;
    Ok(())
}

pub fn read_centroids_file(path: &Path) -> Result<CentroidTable<f32>> {
    read_centroids(&mut BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use ndarray::{Array1, Axis};
    use rand_distr::{Distribution, Normal};

    fn random_unit_rows(n: usize, dim: usize, seed: u64) -> Array2<f64> {
        let mut rng = rng_from_seed(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut m = Array2::from_shape_fn((n, dim), |_| normal.sample(&mut rng));
        l2_normalize_rows(&mut m).unwrap();
        m
    }

    /// Gaussian blobs around random unit means; returns (points, means, ids).
    fn blobs(
        blob_count: usize,
        per_blob: usize,
        dim: usize,
        noise: f64,
        seed: u64,
    ) -> (Array2<f64>, Array2<f64>, Vec<usize>) {
        let means = random_unit_rows(blob_count, dim, seed);
        let mut rng = rng_from_seed(seed + 1);
        let normal = Normal::new(0.0, noise).unwrap();
        let mut points = Array2::zeros((blob_count * per_blob, dim));
        let mut ids = Vec::with_capacity(blob_count * per_blob);
        for b in 0..blob_count {
            for i in 0..per_blob {
                let row = b * per_blob + i;
                for d in 0..dim {
                    points[[row, d]] = means[[b, d]] + normal.sample(&mut rng);
                }
                ids.push(b);
            }
        }
        l2_normalize_rows(&mut points).unwrap();
        (points, means, ids)
    }

    fn cos(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn saturated_fit_returns_the_points_with_zero_inertia() {
        let points = random_unit_rows(8, 4, 1);
        let (table, stats) = kmeans_fit(&points, 8, None, 3, 42).unwrap();
        assert_eq!(table.k(), 8);
        assert!(stats.inertia_traces[0].last().unwrap() < &1e-12);
        // Every point has an exactly-matching center.
        for row in points.outer_iter() {
            let (_, d2) = nearest(&table.centers, row);
            assert!(d2 < 1e-12);
        }
    }

    #[test]
    fn single_cluster_center_is_the_normalized_mean() {
        let points = random_unit_rows(20, 6, 2);
        let (table, _) = kmeans_fit(&points, 1, None, 5, 7).unwrap();
        let mean = points.mean_axis(Axis(0)).unwrap();
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (c, m) in table.centers.row(0).iter().zip(mean.iter()) {
            assert!((c - m / norm).abs() < 1e-12);
        }
    }

    #[test]
    fn separated_blobs_recover_their_means() {
        let (points, means, _) = blobs(16, 40, 16, 0.05, 3);
        let (table, stats) = kmeans_fit(&points, 16, None, 25, 9).unwrap();
        let mut taken = vec![false; 16];
        for mean in means.outer_iter() {
            let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
            let unit_mean = mean.mapv(|v| v / norm);
            let (best, best_cos) = table
                .centers
                .outer_iter()
                .enumerate()
                .map(|(i, c)| (i, cos(c, unit_mean.view())))
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap();
            assert!(best_cos >= 0.99, "blob mean matched at cosine {best_cos}");
            assert!(!taken[best], "two blob means matched the same center");
            taken[best] = true;
        }
        // Inertia non-increasing over the whole trace.
        for w in stats.inertia_traces[0].windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "inertia increased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let points = random_unit_rows(100, 8, 4);
        let (a, _) = kmeans_fit(&points, 10, None, 10, 77).unwrap();
        let (b, _) = kmeans_fit(&points, 10, None, 10, 77).unwrap();
        assert_eq!(a, b);
        let (c, _) = kmeans_fit(&points, 10, Some(3), 10, 77).unwrap();
        let (d, _) = kmeans_fit(&points, 10, Some(3), 10, 77).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn fit_rejects_bad_counts() {
        let points = random_unit_rows(5, 4, 5);
        assert!(kmeans_fit(&points, 6, None, 3, 1).is_err()); // n < K
        assert!(kmeans_fit(&points, 3, Some(4), 3, 1).is_err()); // K1 > K
        assert!(kmeans_fit(&points, 0, None, 3, 1).is_err());
    }

    #[test]
    fn hierarchical_fit_partitions_fine_centers() {
        let (points, _, _) = blobs(8, 30, 8, 0.05, 6);
        let (table, stats) = kmeans_fit(&points, 16, Some(4), 15, 11).unwrap();
        let level1 = table.level1.as_ref().expect("coarse level present");
        assert_eq!(level1.centers.nrows(), 4);
        // children partition is enforced by validate(); spot-check coverage.
        let total: usize = level1.children.iter().map(Vec::len).sum();
        assert_eq!(total, table.k());
        // Coarse + per-bucket traces.
        assert_eq!(stats.inertia_traces.len(), 1 + 4);
        for trace in &stats.inertia_traces {
            for w in trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-9);
            }
        }
        // Labels always land inside [0, K).
        let (labels, _) = assign_all(&points, &table).unwrap();
        assert!(labels.iter().all(|&l| l < table.k()));
    }

    #[test]
    fn assign_exact_center_and_tie_break() {
        let centers = ndarray::arr2(&[
            [-1.0, 0.0],
            [0.0, -1.0],
            [1.0, 0.0],
            [-1.0, 0.0],
            [0.0, -1.0],
            [0.0, 1.0],
        ]);
        let table = CentroidTable::new(centers, None).unwrap();
        // Feature equal to center 2.
        let f = Array1::from_vec(vec![1.0, 0.0]);
        assert_eq!(assign_label(f.view(), &table).unwrap(), 2);
        // Exactly equidistant from centers 2 and 5 -> smallest index wins.
        let f = Array1::from_vec(vec![1.0, 1.0]);
        assert_eq!(assign_label(f.view(), &table).unwrap(), 2);
    }

    #[test]
    fn assign_matches_brute_force_oracle_and_cosine_argmax() {
        let centers = random_unit_rows(64, 8, 7);
        let table = CentroidTable::new(centers.clone(), None).unwrap();
        let features = random_unit_rows(1000, 8, 8);
        let (labels, histogram) = assign_all(&features, &table).unwrap();
        assert_eq!(histogram.iter().sum::<usize>(), 1000);
        for (i, &label) in labels.iter().enumerate() {
            let f = features.row(i);
            // Independent oracle 1: exhaustive Euclidean scan.
            let brute = centers
                .outer_iter()
                .enumerate()
                .map(|(k, c)| (k, sq_dist(f, c)))
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)))
                .unwrap()
                .0;
            assert_eq!(label, brute);
            // Independent oracle 2: cosine argmax (equivalent on unit rows).
            let by_cos = centers
                .outer_iter()
                .enumerate()
                .map(|(k, c)| (k, cos(f, c)))
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)))
                .unwrap()
                .0;
            assert_eq!(label, by_cos);
        }
    }

    #[test]
    fn assign_is_scale_invariant_and_rejects_zero() {
        let centers = random_unit_rows(16, 8, 9);
        let table = CentroidTable::new(centers, None).unwrap();
        let features = random_unit_rows(50, 8, 10);
        for f in features.outer_iter() {
            let a = assign_label(f, &table).unwrap();
            let scaled = f.mapv(|v| v * 3.7);
            assert_eq!(assign_label(scaled.view(), &table).unwrap(), a);
        }
        let zero = Array1::<f64>::zeros(8);
        assert!(assign_label(zero.view(), &table).is_err());
    }

    #[test]
    fn assign_all_on_empty_input() {
        let table = CentroidTable::new(random_unit_rows(4, 8, 11), None).unwrap();
        let features = Array2::<f64>::zeros((0, 8));
        let (labels, histogram) = assign_all(&features, &table).unwrap();
        assert!(labels.is_empty());
        assert_eq!(histogram, vec![0; 4]);
    }

    #[test]
    fn assign_centers_to_themselves_is_identity() {
        let centers = random_unit_rows(32, 8, 12);
        let table = CentroidTable::new(centers.clone(), None).unwrap();
        let (labels, _) = assign_all(&centers, &table).unwrap();
        assert_eq!(labels, (0..32).collect::<Vec<_>>());
    }

    #[test]
    fn centroid_file_round_trips() {
        let (points, _, _) = blobs(4, 25, 8, 0.05, 13);
        let (table64, _) = kmeans_fit(&points, 8, Some(2), 10, 21).unwrap();
        let table: CentroidTable<f32> = table64.cast();

        let mut buf = Vec::new();
        write_centroids(&mut buf, &table).unwrap();
        let again = read_centroids(&mut buf.as_slice()).unwrap();
        assert_eq!(table, again);

        // Flat table round trip too.
        let (flat64, _) = kmeans_fit(&points, 5, None, 10, 22).unwrap();
        let flat: CentroidTable<f32> = flat64.cast();
        let mut buf = Vec::new();
        write_centroids(&mut buf, &flat).unwrap();
        assert_eq!(read_centroids(&mut buf.as_slice()).unwrap(), flat);
    }

    #[test]
    fn centroid_file_rejects_truncation_and_bad_magic() {
        let (table64, _) = kmeans_fit(&random_unit_rows(10, 4, 14), 3, None, 5, 23).unwrap();
        let table: CentroidTable<f32> = table64.cast();
        let mut buf = Vec::new();
        write_centroids(&mut buf, &table).unwrap();

        let truncated = &buf[..buf.len() - 3];
        assert!(read_centroids(&mut &truncated[..]).is_err());

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_centroids(&mut bad.as_slice()).is_err());

        let mut trailing = buf.clone();
        trailing.extend_from_slice(&[1, 2, 3]);
        assert!(read_centroids(&mut trailing.as_slice()).is_err());
    }
}
