//! Exact k-th nearest neighbour distances.
//!
//! Each query runs in two passes over the reference set:
//!
//! 1. A filter pass computes approximate squared distances from `f32` dot
//!    products against a column-blocked copy of the points, each with a
//!    rigorous rounding-error bound. A bounded max-heap tracks the k-th
//!    smallest upper bound, and points whose lower bound is not above it are
//!    kept as candidates.
//! 2. A refine pass computes the exact squared distance of every surviving
//!    candidate as a plain left-to-right `f64` sum of `(q_j - x_j)^2`.
//!
//! Every point that could be among the k nearest survives the filter, so the
//! returned k-th distance is bit-for-bit the value an exhaustive `f64` scan
//! produces.
//!
//! Batch scoring filters a tile of queries per pass, so each block of points
//! is read once per tile rather than once per query.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;

use crate::scorers::ScoreError;

/// Points per column block in the filter layout.
const LANES: usize = 32;

/// Queries sharing one filter pass in batched scoring.
const QUERY_TILE: usize = 4;

/// Unit roundoff of `f32`.
const F32_EPS: f64 = 1.0 / (1u64 << 24) as f64;

/// Immutable reference set for k-NN scoring.
#[derive(Clone, Debug)]
pub struct KnnIndex {
    dim: usize,
    len: usize,
    normalize: bool,
    /// Row-major `f64` copy of the (normalized) points, used for exact distances.
    rows: Vec<f64>,
    /// Squared norms and norms of `rows`, zero-padded to whole blocks.
    norms_sq: Vec<f64>,
    norms: Vec<f64>,
    /// Block `b` stores points `b*LANES..` dimension-major: `blocks[b][j][lane]`.
    blocks: Vec<f32>,
    /// Coefficient of `(|q| + |x|)^2` in the per-pair error bound.
    bound_coef: f64,
    /// Absolute slack covering `f32` underflow.
    bound_floor: f64,
    /// False when magnitudes are too large for the `f32` filter.
    filter: bool,
}

pub(crate) fn l2_normalize(row: &mut [f64]) -> Result<(), ScoreError> {
    let norm = row.iter().fold(0.0, |s, v| s + v * v).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(ScoreError::ZeroVector);
    }
    for v in row.iter_mut() {
        *v /= norm;
    }
    Ok(())
}

#[inline]
fn exact_sq_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

impl KnnIndex {
    /// Builds an index over `data`, a row-major matrix with `dim` columns.
    pub fn build(data: &[f32], dim: usize, normalize: bool) -> Result<Self, ScoreError> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(ScoreError::DimMismatch {
                expected: dim,
                actual: data.len(),
            });
        }
        let len = data.len() / dim;
        let mut rows: Vec<f64> = data.iter().map(|&v| v as f64).collect();
        if normalize {
            for row in rows.chunks_exact_mut(dim) {
                l2_normalize(row)?;
            }
        }
        let n_blocks = len.div_ceil(LANES);
        let mut norms_sq: Vec<f64> = rows
            .chunks_exact(dim)
            .map(|r| r.iter().fold(0.0, |s, v| s + v * v))
            .collect();
        norms_sq.resize(n_blocks * LANES, 0.0);
        let norms: Vec<f64> = norms_sq.iter().map(|v| v.sqrt()).collect();
        let max_norm = norms.iter().copied().fold(0.0, f64::max);

        let mut blocks = vec![0f32; n_blocks * dim * LANES];
        for (i, row) in rows.chunks_exact(dim).enumerate() {
            let (b, lane) = (i / LANES, i % LANES);
            let base = b * dim * LANES;
            for (j, &v) in row.iter().enumerate() {
                blocks[base + j * LANES + lane] = v as f32;
            }
        }
        // |fl32(q.x) - q.x| <= (dim + 2.01) u |q||x| <= (dim + 3) u (|q|+|x|)^2 / 4,
        // doubled through -2 q.x; the f64 terms are orders of magnitude smaller.
        // Use 8x that.
        let bound_coef = 4.0 * (dim as f64 + 4.0) * F32_EPS;
        Ok(Self {
            dim,
            len,
            normalize,
            rows,
            norms_sq,
            norms,
            blocks,
            bound_coef,
            bound_floor: dim as f64 * 1e-40,
            filter: max_norm < 1e15,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn normalize(&self) -> bool {
        self.normalize
    }

    /// Stored (normalized) reference point.
    pub fn point(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    /// Converts a raw query into the index's space.
    pub fn prepare_query(&self, query: &[f32]) -> Result<Vec<f64>, ScoreError> {
        if query.len() != self.dim {
            return Err(ScoreError::DimMismatch {
                expected: self.dim,
                actual: query.len(),
            });
        }
        let mut q: Vec<f64> = query.iter().map(|&v| v as f64).collect();
        if self.normalize {
            l2_normalize(&mut q)?;
        }
        Ok(q)
    }

    /// Euclidean distance from a raw query to its k-th nearest reference point.
    pub fn kth_distance(&self, query: &[f32], k: usize) -> Result<f64, ScoreError> {
        let q = self.prepare_query(query)?;
        self.check_k(k, 0)?;
        Ok(self.kth_sq_distance(&q, k, None).sqrt())
    }

    /// Leave-one-out distance: the k-th nearest neighbour of reference point `i`
    /// among the other points.
    pub fn kth_distance_excluding_self(&self, i: usize, k: usize) -> Result<f64, ScoreError> {
        self.check_k(k, 1)?;
        let q = self.point(i).to_vec();
        Ok(self.kth_sq_distance(&q, k, Some(i)).sqrt())
    }

    /// k-th NN distances for every row of a row-major query matrix, in parallel.
    pub fn kth_distances(&self, queries: &[f32], k: usize) -> Result<Vec<f64>, ScoreError> {
        if !queries.len().is_multiple_of(self.dim) {
            return Err(ScoreError::DimMismatch {
                expected: self.dim,
                actual: queries.len() % self.dim,
            });
        }
        self.check_k(k, 0)?;
        let tiles = queries
            .par_chunks(QUERY_TILE * self.dim)
            .map(|tile| {
                let qs = tile
                    .chunks_exact(self.dim)
                    .map(|row| self.prepare_query(row))
                    .collect::<Result<Vec<_>, _>>()?;
                let refs: Vec<&[f64]> = qs.iter().map(Vec::as_slice).collect();
                let mut out = vec![0.0; refs.len()];
                self.kth_sq_distances_tile::<QUERY_TILE>(&refs, k, &[None; QUERY_TILE][..refs.len()], &mut out);
                Ok(out)
            })
            .collect::<Result<Vec<_>, ScoreError>>()?;
        Ok(tiles.into_iter().flatten().map(f64::sqrt).collect())
    }

    /// Leave-one-out k-th NN distances for every reference point.
    pub fn kth_distances_loo(&self, k: usize) -> Result<Vec<f64>, ScoreError> {
        self.check_k(k, 1)?;
        let starts: Vec<usize> = (0..self.len).step_by(QUERY_TILE).collect();
        let tiles: Vec<Vec<f64>> = starts
            .into_par_iter()
            .map(|s| {
                let ids: Vec<usize> = (s..(s + QUERY_TILE).min(self.len)).collect();
                let refs: Vec<&[f64]> = ids.iter().map(|&i| self.point(i)).collect();
                let exclude: Vec<Option<usize>> = ids.iter().map(|&i| Some(i)).collect();
                let mut out = vec![0.0; ids.len()];
                self.kth_sq_distances_tile::<QUERY_TILE>(&refs, k, &exclude, &mut out);
                out
            })
            .collect();
        Ok(tiles.into_iter().flatten().map(f64::sqrt).collect())
    }

    fn check_k(&self, k: usize, excluded: usize) -> Result<(), ScoreError> {
        if k == 0 || k + excluded > self.len {
            Err(ScoreError::TooFewPoints {
                k,
                available: self.len.saturating_sub(excluded),
            })
        } else {
            Ok(())
        }
    }

    fn kth_sq_distance(&self, q: &[f64], k: usize, exclude: Option<usize>) -> f64 {
        let mut out = [0.0];
        self.kth_sq_distances_tile::<1>(&[q], k, &[exclude], &mut out);
        out[0]
    }

    /// Squared k-th distances for up to `Q` queries sharing one filter pass.
    fn kth_sq_distances_tile<const Q: usize>(
        &self,
        qs: &[&[f64]],
        k: usize,
        exclude: &[Option<usize>],
        out: &mut [f64],
    ) {
        if !self.filter {
            for ((q, &ex), o) in qs.iter().zip(exclude).zip(out.iter_mut()) {
                let mut exact: Vec<f64> = (0..self.len)
                    .filter(|&i| Some(i) != ex)
                    .map(|i| exact_sq_distance(q, self.point(i)))
                    .collect();
                *o = *exact.select_nth_unstable_by(k - 1, f64::total_cmp).1;
            }
            return;
        }
        let candidates = self.candidates::<Q>(qs, k, exclude);
        for ((q, cand), o) in qs.iter().zip(candidates).zip(out.iter_mut()) {
            let mut exact: Vec<f64> = cand.into_iter().map(|i| exact_sq_distance(q, self.point(i))).collect();
            *o = *exact.select_nth_unstable_by(k - 1, f64::total_cmp).1;
        }
    }

    fn candidates<const Q: usize>(&self, qs: &[&[f64]], k: usize, exclude: &[Option<usize>]) -> Vec<Vec<usize>> {
        let dim = self.dim;
        // unused tile slots repeat the first query and are discarded
        let mut q32 = vec![0f32; Q * dim];
        for t in 0..Q {
            let q = qs.get(t).unwrap_or(&qs[0]);
            for (d, &v) in q32[t * dim..(t + 1) * dim].iter_mut().zip(q.iter()) {
                *d = v as f32;
            }
        }
        let mut scans: Vec<Scan> = qs.iter().zip(exclude).map(|(q, &ex)| Scan::new(q, k, ex)).collect();
        scan_blocks::<Q>(self, &q32, &mut scans);
        scans.into_iter().map(Scan::finish).collect()
    }
}

/// Filter-pass state of one query.
struct Scan {
    q_sq: f64,
    q_norm: f64,
    k: usize,
    exclude: Option<usize>,
    heap: BinaryHeap<MaxF64>,
    tau: f64,
    kept: Vec<(usize, f64)>,
}

impl Scan {
    fn new(q: &[f64], k: usize, exclude: Option<usize>) -> Self {
        let q_sq = q.iter().fold(0.0, |s, v| s + v * v);
        Self {
            q_sq,
            q_norm: q_sq.sqrt(),
            k,
            exclude,
            heap: BinaryHeap::with_capacity(k + 1),
            tau: f64::INFINITY,
            kept: Vec::with_capacity(4 * k),
        }
    }

    #[inline(always)]
    fn visit(&mut self, index: &KnnIndex, b: usize, dots: &[f32; LANES]) {
        let start = b * LANES;
        let n = LANES.min(index.len - start);
        let norms_sq: &[f64; LANES] = index.norms_sq[start..start + LANES].try_into().expect("padded norms");
        let norms: &[f64; LANES] = index.norms[start..start + LANES].try_into().expect("padded norms");
        let mut lower = [0f64; LANES];
        let mut upper = [0f64; LANES];
        for l in 0..LANES {
            let approx = self.q_sq + norms_sq[l] - 2.0 * dots[l] as f64;
            let s = self.q_norm + norms[l];
            let bound = index.bound_coef * s * s + index.bound_floor;
            lower[l] = approx - bound;
            upper[l] = approx + bound;
        }
        for l in 0..n {
            if lower[l] > self.tau || self.exclude == Some(start + l) {
                continue;
            }
            self.kept.push((start + l, lower[l]));
            if self.heap.len() < self.k {
                self.heap.push(MaxF64(upper[l]));
                if self.heap.len() == self.k {
                    self.tau = self.heap.peek().map_or(f64::INFINITY, |m| m.0);
                }
            } else if upper[l] < self.tau {
                self.heap.pop();
                self.heap.push(MaxF64(upper[l]));
                self.tau = self.heap.peek().map_or(f64::INFINITY, |m| m.0);
            }
        }
    }

    fn finish(self) -> Vec<usize> {
        let tau = self.tau;
        self.kept
            .into_iter()
            .filter(|&(_, lower)| lower <= tau)
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct MaxF64(f64);

impl PartialEq for MaxF64 {
    fn eq(&self, other: &Self) -> bool {
        self.0.total_cmp(&other.0) == Ordering::Equal
    }
}

impl Eq for MaxF64 {}

impl PartialOrd for MaxF64 {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for MaxF64 {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Lanes per register tile of the dot-product kernel.
const HALF: usize = LANES / 2;

/// Dot products of `Q` queries (`q` is `Q x dim`, row-major) with the 32
/// points of one block. Each lane accumulates over `j` in order.
#[inline(always)]
fn block_dots_generic<const Q: usize, const FUSED: bool>(
    q: &[f32],
    dim: usize,
    block: &[f32],
    out: &mut [[f32; LANES]; Q],
) {
    for h in 0..LANES / HALF {
        let mut acc = [[0f32; HALF]; Q];
        for j in 0..dim {
            let col: &[f32; HALF] = block[j * LANES + h * HALF..j * LANES + (h + 1) * HALF]
                .try_into()
                .expect("block column");
            for t in 0..Q {
                let qj = q[t * dim + j];
                for l in 0..HALF {
                    acc[t][l] = if FUSED {
                        qj.mul_add(col[l], acc[t][l])
                    } else {
                        acc[t][l] + qj * col[l]
                    };
                }
            }
        }
        for t in 0..Q {
            out[t][h * HALF..(h + 1) * HALF].copy_from_slice(&acc[t]);
        }
    }
}

/// One filter pass of `Q` queries over every block.
#[inline(always)]
fn scan_blocks_generic<const Q: usize, const FUSED: bool>(index: &KnnIndex, q: &[f32], scans: &mut [Scan]) {
    let dim = index.dim;
    let mut dots = [[0f32; LANES]; Q];
    for (b, block) in index.blocks.chunks_exact(dim * LANES).enumerate() {
        block_dots_generic::<Q, FUSED>(q, dim, block, &mut dots);
        for (scan, d) in scans.iter_mut().zip(&dots) {
            scan.visit(index, b, d);
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,avx2,fma")]
unsafe fn scan_blocks_avx512<const Q: usize>(index: &KnnIndex, q: &[f32], scans: &mut [Scan]) {
    scan_blocks_generic::<Q, true>(index, q, scans)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn scan_blocks_avx2<const Q: usize>(index: &KnnIndex, q: &[f32], scans: &mut [Scan]) {
    scan_blocks_generic::<Q, true>(index, q, scans)
}

fn scan_blocks<const Q: usize>(index: &KnnIndex, q: &[f32], scans: &mut [Scan]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the required CPU features were detected at runtime.
            return unsafe { scan_blocks_avx512::<Q>(index, q, scans) };
        }
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
            // SAFETY: as above.
            return unsafe { scan_blocks_avx2::<Q>(index, q, scans) };
        }
    }
    scan_blocks_generic::<Q, false>(index, q, scans)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_square() -> KnnIndex {
        let pts = [1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0];
        KnnIndex::build(&pts, 2, true).unwrap()
    }

    #[test]
    fn four_unit_vectors() {
        let idx = unit_square();
        assert_eq!(idx.len(), 4);
        for i in 0..4 {
            let n: f64 = idx.point(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        assert_eq!(idx.kth_distance(&[1.0, 0.0], 1).unwrap(), 0.0);
        assert_eq!(idx.kth_distance(&[1.0, 0.0], 2).unwrap(), 2f64.sqrt());
    }

    #[test]
    fn zero_row_rejected_when_normalizing() {
        let err = KnnIndex::build(&[1.0, 0.0, 0.0, 0.0], 2, true).unwrap_err();
        assert!(matches!(err, ScoreError::ZeroVector));
        assert!(KnnIndex::build(&[1.0, 0.0, 0.0, 0.0], 2, false).is_ok());
    }

    #[test]
    fn k_larger_than_set() {
        let idx = unit_square();
        assert!(matches!(
            idx.kth_distance(&[1.0, 0.0], 5),
            Err(ScoreError::TooFewPoints { k: 5, available: 4 })
        ));
        assert!(matches!(
            idx.kth_distance_excluding_self(0, 4),
            Err(ScoreError::TooFewPoints { .. })
        ));
    }

    #[test]
    fn dimension_checked() {
        let idx = unit_square();
        assert!(matches!(
            idx.kth_distance(&[1.0, 0.0, 0.0], 1),
            Err(ScoreError::DimMismatch { .. })
        ));
    }

    #[test]
    fn leave_one_out_skips_self_only() {
        let pts = [0.0, 0.0, 0.0, 0.0, 3.0, 4.0];
        let idx = KnnIndex::build(&pts, 2, false).unwrap();
        // the duplicate of point 0 is still a neighbour
        assert_eq!(idx.kth_distance_excluding_self(0, 1).unwrap(), 0.0);
        assert_eq!(idx.kth_distance_excluding_self(2, 1).unwrap(), 5.0);
        assert_eq!(idx.kth_distances_loo(2).unwrap(), vec![5.0, 5.0, 5.0]);
    }

    #[test]
    fn filter_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(n, d, normalize) in &[(500, 7, true), (300, 64, false), (97, 3, true), (1000, 33, false)] {
            let data: Vec<f32> = (0..n * d).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let idx = KnnIndex::build(&data, d, normalize).unwrap();
            for _ in 0..50 {
                let q: Vec<f32> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let qp = idx.prepare_query(&q).unwrap();
                let mut all: Vec<f64> = (0..n).map(|i| exact_sq_distance(&qp, idx.point(i))).collect();
                all.sort_by(f64::total_cmp);
                for k in [1, 5, 50] {
                    assert_eq!(idx.kth_distance(&q, k).unwrap().to_bits(), all[k - 1].sqrt().to_bits());
                }
            }
        }
    }

    #[test]
    fn batched_paths_match_single_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (n, d) = (203, 10);
        let data: Vec<f32> = (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let idx = KnnIndex::build(&data, d, false).unwrap();
        // 11 queries leave a ragged last tile
        let queries: Vec<f32> = (0..11 * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let batched = idx.kth_distances(&queries, 7).unwrap();
        for (row, got) in queries.chunks_exact(d).zip(&batched) {
            assert_eq!(got.to_bits(), idx.kth_distance(row, 7).unwrap().to_bits());
        }
        let loo = idx.kth_distances_loo(7).unwrap();
        assert_eq!(loo.len(), n);
        for (i, got) in loo.iter().enumerate() {
            let mut all: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| exact_sq_distance(idx.point(i), idx.point(j)))
                .collect();
            all.sort_by(f64::total_cmp);
            assert_eq!(got.to_bits(), all[6].sqrt().to_bits());
        }
    }

    #[test]
    fn huge_magnitudes_use_the_plain_scan() {
        let data = [1e30f32, 0.0, 0.0, 1e30, -1e30, 0.0];
        let idx = KnnIndex::build(&data, 2, false).unwrap();
        assert!(!idx.filter);
        let d = idx.kth_distance(&[1e30, 0.0], 1).unwrap();
        assert_eq!(d, 0.0);
    }
}
