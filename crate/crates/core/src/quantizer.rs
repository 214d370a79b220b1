//! Discrete unit inventory: k-means codebooks over feature frames, nearest
//! centroid quantization, centroid inversion, and the feature/codebook file
//! formats.
//!
//! Training is Lloyd's algorithm from k-means++ seeds. Centroids are kept in
//! `f64` while iterating and rounded to `f32` (the file precision) at the end.
//! The assignment step is parallel over frames but every frame's decision is
//! independent, and the centroid sums are reduced sequentially, so results do
//! not depend on the worker count.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::binio::{put_f32s, put_u32, read_file, write_atomic, FormatError, Reader};
use crate::features::{FeatureKind, FeatureMatrix};

pub const FEATURE_MAGIC: &[u8; 4] = b"U2UF";
pub const CODEBOOK_MAGIC: &[u8; 4] = b"U2UC";
pub const FORMAT_VERSION: u32 = 1;

/// Unit ids are stored as u16 in unit cache files.
pub const MAX_CLUSTERS: usize = 1 << 16;

#[derive(Debug, Error)]
pub enum QuantizerError {
    #[error("need at least {k} distinct frames, got {found}")]
    TooFewFrames { k: usize, found: usize },
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("feature kind {features} incompatible with {codebook} codebook")]
    KindMismatch {
        features: &'static str,
        codebook: &'static str,
    },
    #[error("unit {unit} out of range for codebook of {k} clusters")]
    UnitOutOfRange { unit: u32, k: usize },
    #[error("invalid k-means settings: {0}")]
    InvalidSettings(String),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// A sequence of unit ids from one codebook.
#[derive(Debug, Clone, PartialEq, Eq, Default, Hash)]
pub struct UnitSequence(pub Vec<u32>);

impl UnitSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }
}

impl From<Vec<u32>> for UnitSequence {
    fn from(v: Vec<u32>) -> Self {
        UnitSequence(v)
    }
}

/// Frames pooled from many feature matrices, all of one dimensionality.
#[derive(Debug, Clone)]
pub struct FramePool {
    data: Vec<f32>,
    dim: usize,
    kind: FeatureKind,
}

impl FramePool {
    pub fn new(data: Vec<f32>, dim: usize, kind: FeatureKind) -> Result<Self, QuantizerError> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(QuantizerError::DimMismatch {
                expected: dim,
                found: data.len(),
            });
        }
        Ok(Self { data, dim, kind })
    }

    pub fn from_matrices<'a>(
        mats: impl IntoIterator<Item = &'a FeatureMatrix>,
    ) -> Result<Self, QuantizerError> {
        let mut it = mats.into_iter().peekable();
        let first = it
            .peek()
            .ok_or(QuantizerError::TooFewFrames { k: 1, found: 0 })?;
        let (dim, kind) = (first.dims(), first.kind());
        let mut data = Vec::new();
        for m in it {
            if m.dims() != dim {
                return Err(QuantizerError::DimMismatch {
                    expected: dim,
                    found: m.dims(),
                });
            }
            data.extend_from_slice(m.data());
        }
        Self::new(data, dim, kind)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone)]
pub struct KMeansOptions {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub rel_tol: f64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            k: 100,
            seed: 0,
            max_iter: 100,
            rel_tol: 1e-6,
        }
    }
}

/// Diagnostics from one training run.
#[derive(Debug, Clone)]
pub struct KMeansTrace {
    /// The k-means++ seeds, `k x dim` row-major.
    pub initial_centroids: Vec<f64>,
    /// Objective after every assignment step, starting with the seeds.
    pub objectives: Vec<f64>,
    /// Final frame-to-cluster assignment.
    pub assignment: Vec<u32>,
    /// Number of empty clusters repaired across all iterations.
    pub repairs: usize,
}

/// `k` centroid vectors defining the unit inventory.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    centroids: Vec<f32>,
    k: usize,
    dim: usize,
    kind: FeatureKind,
    seed: u64,
    iterations: usize,
    objective: f64,
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

fn sq_dist_f64(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y;
            d * d
        })
        .sum()
}

/// Index of the nearest centroid and its squared distance; ties go to the
/// lowest index.
fn nearest(frame: &[f32], centroids: &[f64], dim: usize) -> (u32, f64) {
    let mut best = (0u32, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist_f64(frame, c);
        if d < best.1 {
            best = (j as u32, d);
        }
    }
    best
}

fn assign(pool: &FramePool, centroids: &[f64], out: &mut [u32], dists: &mut [f64]) -> f64 {
    let dim = pool.dim;
    out.par_iter_mut()
        .zip(dists.par_iter_mut())
        .enumerate()
        .for_each(|(i, (a, d))| {
            let (j, dist) = nearest(pool.row(i), centroids, dim);
            *a = j;
            *d = dist;
        });
    dists.iter().sum::<f64>() / pool.len() as f64
}

fn kmeans_pp(pool: &FramePool, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>, QuantizerError> {
    let n = pool.len();
    let dim = pool.dim;
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..n);
    centroids.extend(pool.row(first).iter().map(|&v| v as f64));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist_f64(pool.row(i), &centroids[..dim])).collect();
    for chosen in 1..k {
        let total: f64 = d2.iter().sum();
        if !(total > 0.0) {
            return Err(QuantizerError::TooFewFrames { k, found: chosen });
        }
        let target = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &d) in d2.iter().enumerate() {
            if d <= 0.0 {
                continue;
            }
            acc += d;
            pick = Some(i);
            if acc > target {
                break;
            }
        }
        let pick = pick.expect("positive total implies a positive weight");
        let row: Vec<f64> = pool.row(pick).iter().map(|&v| v as f64).collect();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist_f64(pool.row(i), &row));
        }
        centroids.extend(row);
    }
    Ok(centroids)
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Stops after `max_iter` updates or once the relative objective decrease
/// falls below `rel_tol`. Clusters left empty by an assignment are moved onto
/// the frames farthest from their own centroids.
pub fn train_codebook(
    pool: &FramePool,
    opts: &KMeansOptions,
) -> Result<(Codebook, KMeansTrace), QuantizerError> {
    let (k, dim, n) = (opts.k, pool.dim, pool.len());
    if !(2..=MAX_CLUSTERS).contains(&k) {
        return Err(QuantizerError::InvalidSettings(format!(
            "k must be in 2..={MAX_CLUSTERS}, got {k}"
        )));
    }
    if opts.max_iter == 0 || !(opts.rel_tol >= 0.0) {
        return Err(QuantizerError::InvalidSettings(
            "max_iter must be positive and rel_tol non-negative".into(),
        ));
    }
    if n < k {
        return Err(QuantizerError::TooFewFrames { k, found: n });
    }
    if pool.data.iter().any(|v| !v.is_finite()) {
        return Err(QuantizerError::InvalidSettings("non-finite feature value".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut centroids = kmeans_pp(pool, k, &mut rng)?;
    let initial_centroids = centroids.clone();

    let mut assignment = vec![0u32; n];
    let mut dists = vec![0.0f64; n];
    let mut objective = assign(pool, &centroids, &mut assignment, &mut dists);
    let mut objectives = vec![objective];
    let mut iterations = 0;
    let mut repairs = 0;
    let mut sums = vec![0.0f64; k * dim];
    let mut counts = vec![0usize; k];

    while iterations < opts.max_iter && objective > 0.0 {
        sums.iter_mut().for_each(|s| *s = 0.0);
        counts.iter_mut().for_each(|c| *c = 0);
        for (i, &a) in assignment.iter().enumerate() {
            let a = a as usize;
            counts[a] += 1;
            for (s, &v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(pool.row(i)) {
                *s += v as f64;
            }
        }
        let empty: Vec<usize> = (0..k).filter(|&j| counts[j] == 0).collect();
        for j in 0..k {
            if counts[j] > 0 {
                let c = counts[j] as f64;
                for (dst, &s) in centroids[j * dim..(j + 1) * dim]
                    .iter_mut()
                    .zip(&sums[j * dim..(j + 1) * dim])
                {
                    *dst = s / c;
                }
            }
        }
        if !empty.is_empty() {
            // farthest frames first; index breaks ties
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| dists[b].total_cmp(&dists[a]).then(a.cmp(&b)));
            let mut used: Vec<&[f32]> = Vec::new();
            let mut candidates = order.into_iter();
            for j in empty {
                for i in candidates.by_ref() {
                    let row = pool.row(i);
                    if !used.contains(&row) {
                        used.push(row);
                        for (dst, &v) in centroids[j * dim..(j + 1) * dim].iter_mut().zip(row) {
                            *dst = v as f64;
                        }
                        repairs += 1;
                        break;
                    }
                }
            }
        }
        iterations += 1;
        let next = assign(pool, &centroids, &mut assignment, &mut dists);
        objectives.push(next);
        let done = objective - next <= opts.rel_tol * objective;
        objective = next;
        if done {
            break;
        }
    }

    let codebook = Codebook {
        centroids: centroids.iter().map(|&c| c as f32).collect(),
        k,
        dim,
        kind: pool.kind,
        seed: opts.seed,
        iterations,
        objective,
    };
    codebook.validate()?;
    Ok((
        codebook,
        KMeansTrace {
            initial_centroids,
            objectives,
            assignment,
            repairs,
        },
    ))
}

fn kinds_compatible(features: FeatureKind, codebook: FeatureKind) -> bool {
    features == codebook || features == FeatureKind::Imported || codebook == FeatureKind::Imported
}

impl Codebook {
    /// Builds a codebook from explicit centroids, checking its invariants.
    pub fn from_centroids(
        centroids: Vec<f32>,
        dim: usize,
        kind: FeatureKind,
    ) -> Result<Self, QuantizerError> {
        if dim == 0 || !centroids.len().is_multiple_of(dim) {
            return Err(QuantizerError::DimMismatch {
                expected: dim,
                found: centroids.len(),
            });
        }
        let cb = Codebook {
            k: centroids.len() / dim,
            centroids,
            dim,
            kind,
            seed: 0,
            iterations: 0,
            objective: 0.0,
        };
        cb.validate()?;
        Ok(cb)
    }

    fn validate(&self) -> Result<(), QuantizerError> {
        let invalid = |m: String| Err(QuantizerError::Format(FormatError::Invalid(m)));
        if !(2..=MAX_CLUSTERS).contains(&self.k) {
            return invalid(format!("codebook needs 2..={MAX_CLUSTERS} centroids, has {}", self.k));
        }
        if self.centroids.iter().any(|v| !v.is_finite()) {
            return invalid("non-finite centroid".into());
        }
        let mut rows: Vec<&[f32]> = self.centroids.chunks_exact(self.dim).collect();
        rows.sort_by(|a, b| {
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        if rows.windows(2).any(|w| w[0] == w[1]) {
            return invalid("duplicate centroid rows".into());
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Lloyd updates performed; 0 for codebooks loaded from disk.
    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn objective(&self) -> f64 {
        self.objective
    }

    pub fn centroid(&self, j: usize) -> &[f32] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    fn check_features(&self, features: &FeatureMatrix) -> Result<(), QuantizerError> {
        if features.dims() != self.dim {
            return Err(QuantizerError::DimMismatch {
                expected: self.dim,
                found: features.dims(),
            });
        }
        if !kinds_compatible(features.kind(), self.kind) {
            return Err(QuantizerError::KindMismatch {
                features: features.kind().name(),
                codebook: self.kind.name(),
            });
        }
        Ok(())
    }

    /// Nearest centroid per frame; ties go to the lowest index.
    pub fn quantize(&self, features: &FeatureMatrix) -> Result<UnitSequence, QuantizerError> {
        self.check_features(features)?;
        let ids = features
            .rows()
            .map(|frame| {
                let mut best = (0u32, f64::INFINITY);
                for j in 0..self.k {
                    let d = sq_dist(frame, self.centroid(j));
                    if d < best.1 {
                        best = (j as u32, d);
                    }
                }
                best.0
            })
            .collect();
        Ok(UnitSequence(ids))
    }

    /// Replaces each unit by its centroid.
    pub fn invert(&self, units: &UnitSequence) -> Result<FeatureMatrix, QuantizerError> {
        let mut data = Vec::with_capacity(units.len() * self.dim);
        for &u in units.ids() {
            if u as usize >= self.k {
                return Err(QuantizerError::UnitOutOfRange { unit: u, k: self.k });
            }
            data.extend_from_slice(self.centroid(u as usize));
        }
        Ok(FeatureMatrix::new(data, units.len(), self.dim, self.kind))
    }

    /// Mean squared distance between frames and their reconstructions.
    pub fn distortion(&self, features: &FeatureMatrix) -> Result<f64, QuantizerError> {
        let units = self.quantize(features)?;
        if units.is_empty() {
            return Ok(0.0);
        }
        let total: f64 = features
            .rows()
            .zip(units.ids())
            .map(|(f, &u)| sq_dist(f, self.centroid(u as usize)))
            .sum();
        Ok(total / units.len() as f64)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(29 + self.centroids.len() * 4 + 8);
        out.extend_from_slice(CODEBOOK_MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_u32(&mut out, self.k as u32);
        put_u32(&mut out, self.dim as u32);
        out.push(self.kind.code());
        out.extend_from_slice(&self.seed.to_le_bytes());
        put_f32s(&mut out, &self.centroids);
        out.extend_from_slice(&self.objective.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, QuantizerError> {
        let mut r = Reader::new(bytes);
        r.magic(CODEBOOK_MAGIC)?;
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(FormatError::VersionUnsupported(version).into());
        }
        let k = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let kind = FeatureKind::from_code(r.u8()?)
            .ok_or_else(|| FormatError::Invalid("unknown feature kind".into()))?;
        let seed = r.u64()?;
        if dim == 0 {
            return Err(FormatError::Invalid("zero-dimensional codebook".into()).into());
        }
        let count = k.checked_mul(dim).ok_or(FormatError::TruncatedFile)?;
        let centroids = r.f32_vec(count)?;
        let objective = r.f64()?;
        r.finish()?;
        let cb = Codebook {
            centroids,
            k,
            dim,
            kind,
            seed,
            iterations: 0,
            objective,
        };
        cb.validate()?;
        Ok(cb)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), QuantizerError> {
        Ok(write_atomic(path.as_ref(), &self.to_bytes())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, QuantizerError> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }
}

/// Free-function form of [`Codebook::quantize`].
pub fn quantize(features: &FeatureMatrix, cb: &Codebook) -> Result<UnitSequence, QuantizerError> {
    cb.quantize(features)
}

/// Free-function form of [`Codebook::invert`].
pub fn invert(units: &UnitSequence, cb: &Codebook) -> Result<FeatureMatrix, QuantizerError> {
    cb.invert(units)
}

pub fn encode_features(features: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(17 + features.data().len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, features.frames() as u32);
    put_u32(&mut out, features.dims() as u32);
    out.push(features.kind().code());
    put_f32s(&mut out, features.data());
    out
}

/// Parses a feature file. The result is always tagged [`FeatureKind::Imported`].
pub fn decode_features(bytes: &[u8]) -> Result<FeatureMatrix, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(FEATURE_MAGIC)?;
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(FormatError::VersionUnsupported(version));
    }
    let frames = r.u32()? as usize;
    let dims = r.u32()? as usize;
    FeatureKind::from_code(r.u8()?).ok_or_else(|| FormatError::Invalid("unknown feature kind".into()))?;
    if dims == 0 && frames > 0 {
        return Err(FormatError::Invalid("zero-dimensional frames".into()));
    }
    let data = r.f32_vec(frames.checked_mul(dims).ok_or(FormatError::TruncatedFile)?)?;
    r.finish()?;
    if data.iter().any(|v| !v.is_finite()) {
        return Err(FormatError::Invalid("non-finite feature value".into()));
    }
    Ok(FeatureMatrix::new(data, frames, dims, FeatureKind::Imported))
}

pub fn export_features(features: &FeatureMatrix, path: impl AsRef<Path>) -> Result<(), FormatError> {
    write_atomic(path.as_ref(), &encode_features(features))
}

pub fn import_features(path: impl AsRef<Path>) -> Result<FeatureMatrix, FormatError> {
    decode_features(&read_file(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn pool_1d(values: &[f32]) -> FramePool {
        FramePool::new(values.to_vec(), 1, FeatureKind::Mfcc).unwrap()
    }

    fn random_pool(n: usize, dim: usize, seed: u64) -> FramePool {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * dim).map(|_| rng.gen_range(-5.0f32..5.0)).collect();
        FramePool::new(data, dim, FeatureKind::Mfcc).unwrap()
    }

    fn opts(k: usize, seed: u64) -> KMeansOptions {
        KMeansOptions {
            k,
            seed,
            ..KMeansOptions::default()
        }
    }

    #[test]
    fn separable_clusters_recovered_exactly() {
        let (cb, _) = train_codebook(&pool_1d(&[0., 0., 0., 10., 10., 10.]), &opts(2, 1)).unwrap();
        let mut c = cb.centroids().to_vec();
        c.sort_by(f32::total_cmp);
        assert_eq!(c, vec![0.0, 10.0]);
        assert_eq!(cb.objective(), 0.0);
    }

    #[test]
    fn k_equal_to_distinct_frames_gives_zero_objective() {
        let frames = [1.0, 4.0, 4.0, 9.0, 1.0, 16.0];
        let (cb, _) = train_codebook(&pool_1d(&frames), &opts(4, 3)).unwrap();
        assert_eq!(cb.objective(), 0.0);
        for j in 0..4 {
            assert!(frames.contains(&cb.centroid(j)[0]));
        }
    }

    #[test]
    fn too_few_frames() {
        assert!(matches!(
            train_codebook(&pool_1d(&[1.0, 2.0]), &opts(3, 0)),
            Err(QuantizerError::TooFewFrames { .. })
        ));
        assert!(matches!(
            train_codebook(&pool_1d(&[1.0, 1.0, 1.0]), &opts(2, 0)),
            Err(QuantizerError::TooFewFrames { .. })
        ));
    }

    #[test]
    fn pooled_dims_must_agree() {
        let a = FeatureMatrix::new(vec![0.0; 6], 3, 2, FeatureKind::Mfcc);
        let b = FeatureMatrix::new(vec![0.0; 6], 2, 3, FeatureKind::Mfcc);
        assert!(matches!(
            FramePool::from_matrices([&a, &b]),
            Err(QuantizerError::DimMismatch { .. })
        ));
    }

    /// Independent Lloyd loop restarted from the recorded seeds.
    fn lloyd_oracle(pool: &FramePool, init: &[f64], k: usize, iters: usize) -> Vec<u32> {
        let dim = pool.dim();
        let mut c = init.to_vec();
        let assign = |c: &[f64]| -> Vec<u32> {
            (0..pool.len())
                .map(|i| {
                    let mut best = 0;
                    let mut bd = f64::MAX;
                    for j in 0..k {
                        let mut d = 0.0;
                        for t in 0..dim {
                            let diff = pool.row(i)[t] as f64 - c[j * dim + t];
                            d += diff * diff;
                        }
                        if d < bd {
                            bd = d;
                            best = j;
                        }
                    }
                    best as u32
                })
                .collect()
        };
        let mut a = assign(&c);
        for _ in 0..iters {
            for j in 0..k {
                let members: Vec<usize> = (0..pool.len()).filter(|&i| a[i] as usize == j).collect();
                assert!(!members.is_empty(), "oracle assumes no empty clusters");
                for t in 0..dim {
                    c[j * dim + t] =
                        members.iter().map(|&i| pool.row(i)[t] as f64).sum::<f64>() / members.len() as f64;
                }
            }
            a = assign(&c);
        }
        a
    }

    #[test]
    fn lloyd_trace_matches_independent_oracle() {
        let pool = random_pool(200, 2, 42);
        let (cb, trace) = train_codebook(&pool, &opts(8, 7)).unwrap();
        for w in trace.objectives.windows(2) {
            assert!(w[1] <= w[0], "objective increased: {:?}", trace.objectives);
        }
        assert_eq!(trace.repairs, 0);
        let oracle = lloyd_oracle(&pool, &trace.initial_centroids, 8, cb.iterations());
        assert_eq!(oracle, trace.assignment);
    }

    #[test]
    fn objective_non_increasing_across_seeds() {
        for seed in 0..10 {
            let pool = random_pool(300, 3, 100 + seed);
            let (_, trace) = train_codebook(&pool, &opts(12, seed)).unwrap();
            assert!(trace.objectives.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn same_seed_same_codebook() {
        let pool = random_pool(150, 4, 9);
        let a = train_codebook(&pool, &opts(6, 5)).unwrap().0;
        let b = train_codebook(&pool, &opts(6, 5)).unwrap().0;
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn nearest_centroid_and_tie_rule() {
        let cb = Codebook::from_centroids(vec![0.0, 10.0], 1, FeatureKind::Mfcc).unwrap();
        let f = FeatureMatrix::new(vec![4.9, 5.1, 5.0], 3, 1, FeatureKind::Mfcc);
        assert_eq!(cb.quantize(&f).unwrap().ids(), &[0, 1, 0]);
    }

    #[test]
    fn quantize_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let dim = 13;
        let centroids: Vec<f32> = (0..100 * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let cb = Codebook::from_centroids(centroids.clone(), dim, FeatureKind::Mfcc).unwrap();
        let frames: Vec<f32> = (0..50 * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let f = FeatureMatrix::new(frames.clone(), 50, dim, FeatureKind::Mfcc);
        let got = cb.quantize(&f).unwrap();
        for t in 0..50 {
            let dists: Vec<f64> = (0..100)
                .map(|j| {
                    (0..dim)
                        .map(|i| (frames[t * dim + i] as f64 - centroids[j * dim + i] as f64).powi(2))
                        .sum()
                })
                .collect();
            let min = dists.iter().cloned().fold(f64::MAX, f64::min);
            let want = dists.iter().position(|&d| d == min).unwrap();
            assert_eq!(got.ids()[t], want as u32);
        }
    }

    #[test]
    fn quantize_rejects_mismatches() {
        let cb = Codebook::from_centroids(vec![0.0, 1.0, 2.0, 3.0], 2, FeatureKind::Mfcc).unwrap();
        let wrong_dim = FeatureMatrix::new(vec![0.0; 3], 1, 3, FeatureKind::Mfcc);
        assert!(matches!(cb.quantize(&wrong_dim), Err(QuantizerError::DimMismatch { .. })));
        let wrong_kind = FeatureMatrix::new(vec![0.0; 2], 1, 2, FeatureKind::LogMel);
        assert!(matches!(cb.quantize(&wrong_kind), Err(QuantizerError::KindMismatch { .. })));
        let imported = FeatureMatrix::new(vec![0.0; 2], 1, 2, FeatureKind::Imported);
        assert!(cb.quantize(&imported).is_ok());
    }

    #[test]
    fn invert_cases() {
        let cb = Codebook::from_centroids(vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0], 2, FeatureKind::Mfcc).unwrap();
        let empty = cb.invert(&UnitSequence::default()).unwrap();
        assert_eq!(empty.frames(), 0);
        assert!(matches!(
            cb.invert(&UnitSequence(vec![3])),
            Err(QuantizerError::UnitOutOfRange { unit: 3, k: 3 })
        ));
    }

    #[test]
    fn duplicate_centroids_rejected() {
        assert!(Codebook::from_centroids(vec![1.0, 2.0, 1.0, 2.0], 2, FeatureKind::Mfcc).is_err());
        assert!(Codebook::from_centroids(vec![1.0, 2.0], 2, FeatureKind::Mfcc).is_err());
    }

    #[test]
    fn distortion_non_increasing_in_k() {
        let pool = random_pool(400, 3, 1234);
        let features = FeatureMatrix::new(pool.data.clone(), pool.len(), 3, FeatureKind::Mfcc);
        let mut last = f64::INFINITY;
        for k in [2, 4, 8, 16] {
            let (cb, _) = train_codebook(&pool, &opts(k, 0)).unwrap();
            let d = cb.distortion(&features).unwrap();
            assert!(d <= last, "k={k}: {d} > {last}");
            last = d;
        }
    }

    #[test]
    fn codebook_file_round_trip() {
        let pool = random_pool(60, 2, 3);
        let (cb, _) = train_codebook(&pool, &opts(4, 1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cb.u2uc");
        cb.save(&path).unwrap();
        let back = Codebook::load(&path).unwrap();
        assert_eq!(back.centroids(), cb.centroids());
        assert_eq!(back.objective(), cb.objective());
        assert_eq!(back.seed(), 1);
        let mut bytes = cb.to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            Codebook::from_bytes(&bytes),
            Err(QuantizerError::Format(FormatError::BadMagic { .. }))
        ));
        let bytes = cb.to_bytes();
        assert!(matches!(
            Codebook::from_bytes(&bytes[..bytes.len() - 1]),
            Err(QuantizerError::Format(FormatError::TruncatedFile))
        ));
    }

    #[test]
    fn feature_file_cases() {
        let f = FeatureMatrix::new((0..20).map(|v| v as f32 * 0.5).collect(), 10, 2, FeatureKind::Mfcc);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.u2uf");
        export_features(&f, &path).unwrap();
        let back = import_features(&path).unwrap();
        assert_eq!(back.data(), f.data());
        assert_eq!(back.kind(), FeatureKind::Imported);

        let mut bad = encode_features(&f);
        bad[..4].copy_from_slice(b"NOPE");
        assert!(matches!(decode_features(&bad), Err(FormatError::BadMagic { .. })));

        let bytes = encode_features(&f);
        // 10 frames declared, 9 present
        assert!(matches!(
            decode_features(&bytes[..bytes.len() - 8]),
            Err(FormatError::TruncatedFile)
        ));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(decode_features(&v2), Err(FormatError::VersionUnsupported(2))));
    }

    proptest! {
        #[test]
        fn invert_then_quantize_is_identity(units in prop::collection::vec(0u32..5, 0..40)) {
            let cb = Codebook::from_centroids(
                vec![0.0, 0.0, 1.0, 0.5, -2.0, 3.0, 7.0, -1.0, 0.25, 0.25], 2, FeatureKind::Mfcc).unwrap();
            let seq = UnitSequence(units);
            let f = cb.invert(&seq).unwrap();
            prop_assert_eq!(cb.quantize(&f).unwrap(), seq);
        }

        #[test]
        fn quantize_is_permutation_equivariant(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dim = 3;
            let k = 6;
            let centroids: Vec<f32> = (0..k * dim).map(|_| rng.gen_range(-3.0f32..3.0)).collect();
            let mut perm: Vec<usize> = (0..k).collect();
            for i in (1..k).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            // row perm[j] of the permuted book is row j of the original
            let mut permuted = vec![0.0f32; k * dim];
            for j in 0..k {
                permuted[perm[j] * dim..(perm[j] + 1) * dim].copy_from_slice(&centroids[j * dim..(j + 1) * dim]);
            }
            let a = Codebook::from_centroids(centroids, dim, FeatureKind::Mfcc).unwrap();
            let b = Codebook::from_centroids(permuted, dim, FeatureKind::Mfcc).unwrap();
            let frames: Vec<f32> = (0..30 * dim).map(|_| rng.gen_range(-3.0f32..3.0)).collect();
            let f = FeatureMatrix::new(frames, 30, dim, FeatureKind::Mfcc);
            let ua = a.quantize(&f).unwrap();
            let ub = b.quantize(&f).unwrap();
            for (x, y) in ua.ids().iter().zip(ub.ids()) {
                prop_assert_eq!(perm[*x as usize] as u32, *y);
            }
        }
    }
}
