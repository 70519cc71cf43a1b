//! Deterministic point-set kernels: farthest point sampling, KNN queries in
//! metric or feature space, and the serialization scans with their
//! permutation algebra.
//!
//! Everything here is a pure function of its inputs. Ties are always broken
//! toward the lowest index so results are reproducible, and centroids are
//! accumulated in value-sorted order so they do not depend on row order.

use crate::error::{Error, Result};
use crate::mat::Mat;

/// One level of the point hierarchy: coordinates, position embeddings and
/// features row-aligned across the three matrices.
#[derive(Debug, Clone)]
pub struct PointSet {
    pub coords: Mat,
    pub pos_embed: Mat,
    pub features: Mat,
}

impl PointSet {
    pub fn new(coords: Mat, pos_embed: Mat, features: Mat) -> Result<Self> {
        let n = coords.rows();
        if n == 0 {
            return Err(Error::invalid("point set must contain at least one point"));
        }
        if pos_embed.rows() != n || features.rows() != n {
            return Err(Error::invalid(format!(
                "row count mismatch: coords {n}, pos_embed {}, features {}",
                pos_embed.rows(),
                features.rows()
            )));
        }
        coords.ensure_finite("coords")?;
        pos_embed.ensure_finite("pos_embed")?;
        features.ensure_finite("features")?;
        Ok(PointSet { coords, pos_embed, features })
    }

    pub fn len(&self) -> usize {
        self.coords.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.rows() == 0
    }
}

/// Scan strategies for serializing a point set into a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScanKind {
    X,
    Y,
    Z,
    InsideOut,
    /// Neighbor sequences ordered by query distance.
    KnnDistance,
}

/// A permutation over a point set, tagged with how it was produced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanIndex {
    pub order: Vec<usize>,
    pub kind: ScanKind,
    pub transposed: bool,
}

impl ScanIndex {
    pub fn new(order: Vec<usize>, kind: ScanKind) -> Self {
        ScanIndex { order, kind, transposed: false }
    }

    pub fn identity(n: usize, kind: ScanKind) -> Self {
        ScanIndex { order: (0..n).collect(), kind, transposed: false }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    fn check_permutation(&self) -> Result<()> {
        let n = self.order.len();
        let mut seen = vec![false; n];
        for &i in &self.order {
            if i >= n || seen[i] {
                return Err(Error::invalid("index sequence is not a permutation"));
            }
            seen[i] = true;
        }
        Ok(())
    }
}

/// KNN result: per query row, `k` reference indices sorted ascending by
/// distance with the matching Euclidean distances.
#[derive(Debug, Clone)]
pub struct NeighborGroup {
    pub center_count: usize,
    pub k: usize,
    /// Row-major `center_count x k` indices into the reference set.
    pub neighbor_indices: Vec<usize>,
    /// Row-major `center_count x k` Euclidean distances, non-decreasing per row.
    pub distances: Vec<f64>,
}

impl NeighborGroup {
    pub fn indices_of(&self, center: usize) -> &[usize] {
        &self.neighbor_indices[center * self.k..(center + 1) * self.k]
    }

    pub fn distances_of(&self, center: usize) -> &[f64] {
        &self.distances[center * self.k..(center + 1) * self.k]
    }

    /// Restrict each row to its first `k` entries (valid because rows are
    /// sorted by distance, so a smaller neighborhood is a prefix).
    pub fn truncated(&self, k: usize) -> NeighborGroup {
        assert!(k <= self.k);
        let mut idx = Vec::with_capacity(self.center_count * k);
        let mut dist = Vec::with_capacity(self.center_count * k);
        for c in 0..self.center_count {
            idx.extend_from_slice(&self.indices_of(c)[..k]);
            dist.extend_from_slice(&self.distances_of(c)[..k]);
        }
        NeighborGroup { center_count: self.center_count, k, neighbor_indices: idx, distances: dist }
    }
}

/// Seed rule for farthest point sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FpsSeed {
    /// Start from the point nearest the centroid; selection becomes
    /// invariant to input row order on tie-free inputs.
    NearestToCentroid,
    /// Start from row 0.
    FirstIndex,
}

/// Column means accumulated in value-sorted order, so the result is
/// bit-identical under any permutation of the rows.
pub fn canonical_mean(coords: &Mat) -> Vec<f64> {
    let (n, d) = coords.shape();
    let mut mean = vec![0.0; d];
    let mut column = Vec::with_capacity(n);
    for (c, m) in mean.iter_mut().enumerate() {
        column.clear();
        for r in 0..n {
            column.push(coords.get(r, c));
        }
        column.sort_unstable_by(f64::total_cmp);
        *m = column.iter().sum::<f64>() / n as f64;
    }
    mean
}

fn dist2_to_point(coords: &Mat, row: usize, p: &[f64]) -> f64 {
    coords
        .row(row)
        .iter()
        .zip(p.iter())
        .map(|(a, b)| {
            let d = a - b;
            d * d
        })
        .sum()
}

/// Greedy farthest point sampling: after the seed, each pick maximizes the
/// minimum distance to the points already selected. Ties go to the lowest
/// index.
pub fn farthest_point_sample(coords: &Mat, m: usize, seed: FpsSeed) -> Result<Vec<usize>> {
    let n = coords.rows();
    if m == 0 || m > n {
        return Err(Error::invalid(format!(
            "sample size {m} must satisfy 1 <= m <= {n}"
        )));
    }
    coords.ensure_finite("coords")?;

    let first = match seed {
        FpsSeed::FirstIndex => 0,
        FpsSeed::NearestToCentroid => {
            let centroid = canonical_mean(coords);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for r in 0..n {
                let d = dist2_to_point(coords, r, &centroid);
                if d < best_d {
                    best_d = d;
                    best = r;
                }
            }
            best
        }
    };

    let mut selected = Vec::with_capacity(m);
    selected.push(first);
    let mut min_d2 = vec![0.0f64; n];
    for r in 0..n {
        min_d2[r] = coords.row_dist2(r, coords, first);
    }

    while selected.len() < m {
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (r, &d) in min_d2.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = r;
            }
        }
        selected.push(best);
        for r in 0..n {
            let d = coords.row_dist2(r, coords, best);
            if d < min_d2[r] {
                min_d2[r] = d;
            }
        }
    }
    Ok(selected)
}

/// k nearest reference rows per query row by Euclidean distance, sorted
/// ascending, ties broken by lowest reference index. Works in metric space
/// (columns = spatial dims) and feature space alike.
pub fn knn_query(queries: &Mat, reference: &Mat, k: usize) -> Result<NeighborGroup> {
    let n = reference.rows();
    if k == 0 || k > n {
        return Err(Error::invalid(format!(
            "neighbor count {k} must satisfy 1 <= k <= {n}"
        )));
    }
    if queries.cols() != reference.cols() {
        return Err(Error::invalid(format!(
            "query width {} != reference width {}",
            queries.cols(),
            reference.cols()
        )));
    }
    queries.ensure_finite("queries")?;
    reference.ensure_finite("reference")?;

    let q = queries.rows();
    let mut indices = Vec::with_capacity(q * k);
    let mut dists = Vec::with_capacity(q * k);
    // Per query keep the k best (d2, idx) pairs in a sorted scratch buffer;
    // k is small so insertion beats a full sort of all n candidates.
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for qi in 0..q {
        best.clear();
        for r in 0..n {
            let d2 = queries.row_dist2(qi, reference, r);
            if best.len() == k {
                let worst = best[k - 1];
                if (d2, r) >= (worst.0, worst.1) {
                    continue;
                }
                best.pop();
            }
            let pos = best.partition_point(|&(bd, bi)| (bd, bi) < (d2, r));
            best.insert(pos, (d2, r));
        }
        for &(d2, r) in best.iter() {
            indices.push(r);
            dists.push(d2.sqrt());
        }
    }
    Ok(NeighborGroup { center_count: q, k, neighbor_indices: indices, distances: dists })
}

/// Sort by one coordinate axis ascending; ties break lexicographically on the
/// remaining coordinates, then on the index.
pub fn scan_coordinate(coords: &Mat, axis: usize) -> Result<ScanIndex> {
    let (n, d) = coords.shape();
    if axis >= d {
        return Err(Error::invalid(format!("axis {axis} out of range for {d}-d coords")));
    }
    coords.ensure_finite("coords")?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let pa = coords.get(a, axis);
        let pb = coords.get(b, axis);
        pa.total_cmp(&pb)
            .then_with(|| {
                for c in 0..d {
                    if c == axis {
                        continue;
                    }
                    let cmp = coords.get(a, c).total_cmp(&coords.get(b, c));
                    if cmp != std::cmp::Ordering::Equal {
                        return cmp;
                    }
                }
                std::cmp::Ordering::Equal
            })
            .then(a.cmp(&b))
    });
    let kind = match axis {
        0 => ScanKind::X,
        1 => ScanKind::Y,
        _ => ScanKind::Z,
    };
    Ok(ScanIndex::new(order, kind))
}

/// Sort by distance to the centroid, nearest first; ties break on index.
pub fn scan_inside_out(coords: &Mat) -> Result<ScanIndex> {
    let n = coords.rows();
    if n == 0 {
        return Err(Error::invalid("empty point set"));
    }
    coords.ensure_finite("coords")?;
    let centroid = canonical_mean(coords);
    let mut keyed: Vec<(f64, usize)> = (0..n)
        .map(|r| (dist2_to_point(coords, r, &centroid), r))
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(ScanIndex::new(keyed.into_iter().map(|(_, r)| r).collect(), ScanKind::InsideOut))
}

/// The inverse permutation: `invert(theta)[theta[i]] = i`, so gathering by
/// `theta` then by the inverse restores the original row order.
pub fn invert_indices(theta: &ScanIndex) -> Result<ScanIndex> {
    theta.check_permutation()?;
    let mut inv = vec![0usize; theta.order.len()];
    for (i, &o) in theta.order.iter().enumerate() {
        inv[o] = i;
    }
    Ok(ScanIndex { order: inv, kind: theta.kind, transposed: theta.transposed })
}

/// The scan traversed back-to-front.
pub fn transpose_indices(theta: &ScanIndex) -> ScanIndex {
    let mut order = theta.order.clone();
    order.reverse();
    ScanIndex { order, kind: theta.kind, transposed: !theta.transposed }
}

/// A named scan recipe: a base strategy plus optional reversal. The full
/// default set is the four base scans and their transposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ScanStrategy {
    pub kind: ScanKind,
    pub transposed: bool,
}

impl ScanStrategy {
    pub fn name(&self) -> &'static str {
        match (self.kind, self.transposed) {
            (ScanKind::X, false) => "x",
            (ScanKind::Y, false) => "y",
            (ScanKind::Z, false) => "z",
            (ScanKind::InsideOut, false) => "io",
            (ScanKind::X, true) => "xt",
            (ScanKind::Y, true) => "yt",
            (ScanKind::Z, true) => "zt",
            (ScanKind::InsideOut, true) => "iot",
            (ScanKind::KnnDistance, _) => "knn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let (base, transposed) = match s {
            "x" | "y" | "z" | "io" => (s, false),
            "xt" | "yt" | "zt" => (&s[..1], true),
            "iot" => ("io", true),
            other => return Err(Error::invalid(format!("unknown scan strategy '{other}'"))),
        };
        let kind = match base {
            "x" => ScanKind::X,
            "y" => ScanKind::Y,
            "z" => ScanKind::Z,
            _ => ScanKind::InsideOut,
        };
        Ok(ScanStrategy { kind, transposed })
    }

    /// The default group of eight: coordinate-order and inside-out scans
    /// plus their transposes.
    pub fn full_set() -> Vec<ScanStrategy> {
        let mut out = Vec::with_capacity(8);
        for transposed in [false, true] {
            for kind in [ScanKind::X, ScanKind::Y, ScanKind::Z, ScanKind::InsideOut] {
                out.push(ScanStrategy { kind, transposed });
            }
        }
        out
    }
}

/// Build the permutation for one strategy from coordinates in metric space.
pub fn build_scan(coords: &Mat, strategy: ScanStrategy) -> Result<ScanIndex> {
    let base = match strategy.kind {
        ScanKind::X => scan_coordinate(coords, 0)?,
        ScanKind::Y => scan_coordinate(coords, 1)?,
        ScanKind::Z => scan_coordinate(coords, 2)?,
        ScanKind::InsideOut => scan_inside_out(coords)?,
        ScanKind::KnnDistance => {
            return Err(Error::invalid("knn-distance scans come from neighbor queries"))
        }
    };
    Ok(if strategy.transposed { transpose_indices(&base) } else { base })
}

/// Row gather: output row `i` is input row `theta[i]`.
pub fn gather_rows(p: &Mat, theta: &ScanIndex) -> Result<Mat> {
    gather_rows_by(p, &theta.order)
}

/// Row gather by an arbitrary index list (need not be a permutation).
pub fn gather_rows_by(p: &Mat, idx: &[usize]) -> Result<Mat> {
    let c = p.cols();
    let mut out = Mat::zeros(idx.len(), c);
    for (i, &src) in idx.iter().enumerate() {
        if src >= p.rows() {
            return Err(Error::invalid(format!(
                "gather index {src} out of range for {} rows",
                p.rows()
            )));
        }
        out.row_mut(i).copy_from_slice(p.row(src));
    }
    Ok(out)
}
