//! Losses and evaluation metrics: cross-entropy and Dice live as graph ops,
//! the set distances (Chamfer, density-aware Chamfer, exact EMD) and the
//! metric suite (ACC, CD, EMD, Dice, mIoU, sDice) live here.
//!
//! Conventions, fixed: Chamfer sums squared L2 and averages symmetrically;
//! EMD uses unsquared L2 under an exact optimal assignment divided by the
//! point count; mIoU/Dice macro-average over the classes present in the
//! target sample and then mean over samples.

use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, gather_rows_by, FpsSeed};
use crate::mat::Mat;

/// Default exponential sharpness for the density-aware Chamfer distance on
/// unit-sphere-normalized clouds.
pub const DCD_ALPHA: f64 = 1.0;

/// Smoothing constant for the Dice loss.
pub const DICE_SMOOTH: f64 = 1e-5;

/// Largest point count fed to the exact EMD solver; bigger inputs are
/// deterministically resampled by the metric layer before calling it.
pub const EMD_MAX_POINTS: usize = 1024;

// ---------------------------------------------------------------------------
// Chamfer distance
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub(crate) struct ChamferSaved {
    /// Nearest Q index per P row.
    nn_pq: Vec<usize>,
    /// Nearest P index per Q row.
    nn_qp: Vec<usize>,
}

fn nearest_rows(from: &Mat, to: &Mat) -> Vec<usize> {
    let mut out = Vec::with_capacity(from.rows());
    for i in 0..from.rows() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for j in 0..to.rows() {
            let d = from.row_dist2(i, to, j);
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        out.push(best);
    }
    out
}

fn check_sets(p: &Mat, q: &Mat) -> Result<()> {
    if p.rows() == 0 || q.rows() == 0 {
        return Err(Error::invalid("point sets must be non-empty"));
    }
    if p.cols() != q.cols() {
        return Err(Error::invalid(format!(
            "point sets must share a width: {} vs {}",
            p.cols(),
            q.cols()
        )));
    }
    Ok(())
}

pub(crate) fn chamfer_forward(p: &Mat, q: &Mat) -> Result<(f64, ChamferSaved)> {
    check_sets(p, q)?;
    let nn_pq = nearest_rows(p, q);
    let nn_qp = nearest_rows(q, p);
    let mut term_p = 0.0;
    for (i, &j) in nn_pq.iter().enumerate() {
        term_p += p.row_dist2(i, q, j);
    }
    let mut term_q = 0.0;
    for (j, &i) in nn_qp.iter().enumerate() {
        term_q += q.row_dist2(j, p, i);
    }
    let value = term_p / p.rows() as f64 + term_q / q.rows() as f64;
    Ok((value, ChamferSaved { nn_pq, nn_qp }))
}

/// Symmetric mean squared-L2 Chamfer distance.
pub fn chamfer_distance(p: &Mat, q: &Mat) -> Result<f64> {
    chamfer_forward(p, q).map(|(v, _)| v)
}

pub(crate) fn chamfer_backward_p(g: f64, p: &Mat, q: &Mat, saved: &ChamferSaved, gp: &mut Mat) {
    let n = p.rows() as f64;
    let m = q.rows() as f64;
    let c = p.cols();
    for (i, &j) in saved.nn_pq.iter().enumerate() {
        let scale = 2.0 * g / n;
        for d in 0..c {
            gp.data_mut()[i * c + d] += scale * (p.get(i, d) - q.get(j, d));
        }
    }
    for (j, &i) in saved.nn_qp.iter().enumerate() {
        let scale = 2.0 * g / m;
        for d in 0..c {
            gp.data_mut()[i * c + d] += scale * (p.get(i, d) - q.get(j, d));
        }
    }
}

pub(crate) fn chamfer_backward_q(g: f64, p: &Mat, q: &Mat, saved: &ChamferSaved, gq: &mut Mat) {
    let n = p.rows() as f64;
    let m = q.rows() as f64;
    let c = p.cols();
    for (i, &j) in saved.nn_pq.iter().enumerate() {
        let scale = 2.0 * g / n;
        for d in 0..c {
            gq.data_mut()[j * c + d] += scale * (q.get(j, d) - p.get(i, d));
        }
    }
    for (j, &i) in saved.nn_qp.iter().enumerate() {
        let scale = 2.0 * g / m;
        for d in 0..c {
            gq.data_mut()[j * c + d] += scale * (q.get(j, d) - p.get(i, d));
        }
    }
}

// ---------------------------------------------------------------------------
// Density-aware Chamfer distance
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub(crate) struct DcdSaved {
    nn_pq: Vec<usize>,
    nn_qp: Vec<usize>,
    /// How many P rows picked each Q row as nearest.
    count_q: Vec<usize>,
    /// How many Q rows picked each P row as nearest.
    count_p: Vec<usize>,
}

pub(crate) fn dcd_forward(p: &Mat, q: &Mat, alpha: f64) -> Result<(f64, DcdSaved)> {
    check_sets(p, q)?;
    if alpha <= 0.0 {
        return Err(Error::invalid("alpha must be positive"));
    }
    let nn_pq = nearest_rows(p, q);
    let nn_qp = nearest_rows(q, p);
    let mut count_q = vec![0usize; q.rows()];
    for &j in &nn_pq {
        count_q[j] += 1;
    }
    let mut count_p = vec![0usize; p.rows()];
    for &i in &nn_qp {
        count_p[i] += 1;
    }
    let mut term_p = 0.0;
    for (i, &j) in nn_pq.iter().enumerate() {
        let d2 = p.row_dist2(i, q, j);
        term_p += 1.0 - (-alpha * d2).exp() / count_q[j] as f64;
    }
    let mut term_q = 0.0;
    for (j, &i) in nn_qp.iter().enumerate() {
        let d2 = q.row_dist2(j, p, i);
        term_q += 1.0 - (-alpha * d2).exp() / count_p[i] as f64;
    }
    let value = 0.5 * (term_p / p.rows() as f64 + term_q / q.rows() as f64);
    Ok((value, DcdSaved { nn_pq, nn_qp, count_q, count_p }))
}

/// Density-aware Chamfer distance; values lie in `[0, 1)`.
pub fn density_aware_chamfer(p: &Mat, q: &Mat, alpha: f64) -> Result<f64> {
    dcd_forward(p, q, alpha).map(|(v, _)| v)
}

pub(crate) fn dcd_backward_p(
    g: f64,
    p: &Mat,
    q: &Mat,
    alpha: f64,
    saved: &DcdSaved,
    gp: &mut Mat,
) {
    let n = p.rows() as f64;
    let m = q.rows() as f64;
    let c = p.cols();
    for (i, &j) in saved.nn_pq.iter().enumerate() {
        let d2 = p.row_dist2(i, q, j);
        let coeff = 0.5 / n * (-alpha * d2).exp() / saved.count_q[j] as f64 * alpha * 2.0;
        for d in 0..c {
            gp.data_mut()[i * c + d] += g * coeff * (p.get(i, d) - q.get(j, d));
        }
    }
    for (j, &i) in saved.nn_qp.iter().enumerate() {
        let d2 = q.row_dist2(j, p, i);
        let coeff = 0.5 / m * (-alpha * d2).exp() / saved.count_p[i] as f64 * alpha * 2.0;
        for d in 0..c {
            gp.data_mut()[i * c + d] += g * coeff * (p.get(i, d) - q.get(j, d));
        }
    }
}

pub(crate) fn dcd_backward_q(
    g: f64,
    p: &Mat,
    q: &Mat,
    alpha: f64,
    saved: &DcdSaved,
    gq: &mut Mat,
) {
    let n = p.rows() as f64;
    let m = q.rows() as f64;
    let c = p.cols();
    for (i, &j) in saved.nn_pq.iter().enumerate() {
        let d2 = p.row_dist2(i, q, j);
        let coeff = 0.5 / n * (-alpha * d2).exp() / saved.count_q[j] as f64 * alpha * 2.0;
        for d in 0..c {
            gq.data_mut()[j * c + d] += g * coeff * (q.get(j, d) - p.get(i, d));
        }
    }
    for (j, &i) in saved.nn_qp.iter().enumerate() {
        let d2 = q.row_dist2(j, p, i);
        let coeff = 0.5 / m * (-alpha * d2).exp() / saved.count_p[i] as f64 * alpha * 2.0;
        for d in 0..c {
            gq.data_mut()[j * c + d] += g * coeff * (q.get(j, d) - p.get(i, d));
        }
    }
}

// ---------------------------------------------------------------------------
// Exact EMD via the Hungarian method
// ---------------------------------------------------------------------------

/// Minimum-cost perfect assignment on a square cost matrix; returns the
/// matched column per row. O(n^3) with potentials.
fn hungarian_assign(cost: &Mat) -> Vec<usize> {
    let n = cost.rows();
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched = vec![0usize; n + 1]; // matched[j] = row assigned to column j (1-based, 0 = none)
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if matched[j] > 0 {
            assignment[matched[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Exact Earth Mover's distance between equal-size sets: the mean unsquared
/// L2 transport cost under the optimal bijection.
pub fn emd_exact(p: &Mat, q: &Mat) -> Result<f64> {
    check_sets(p, q)?;
    if p.rows() != q.rows() {
        return Err(Error::invalid(format!(
            "EMD requires equal cardinality, got {} vs {} (caller resamples)",
            p.rows(),
            q.rows()
        )));
    }
    if p.rows() > EMD_MAX_POINTS {
        return Err(Error::invalid(format!(
            "EMD limited to {EMD_MAX_POINTS} points, got {}",
            p.rows()
        )));
    }
    let n = p.rows();
    let mut cost = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            cost.set(i, j, p.row_dist2(i, q, j).sqrt());
        }
    }
    let assignment = hungarian_assign(&cost);
    let total: f64 = assignment.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum();
    Ok(total / n as f64)
}

// ---------------------------------------------------------------------------
// Metric suite
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Classify,
    Complete,
    Segment,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Classify => "classify",
            Task::Complete => "complete",
            Task::Segment => "segment",
        }
    }
}

/// Named scalar metrics for one task over a set of samples.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub task: Task,
    pub metrics: Vec<(String, f64)>,
    pub samples: usize,
}

impl MetricReport {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.metrics.iter().find(|(k, _)| k == key).map(|&(_, v)| v)
    }

    /// Human-readable lines.
    pub fn to_text(&self) -> String {
        let mut s = format!("task: {}\nsamples: {}\n", self.task.name(), self.samples);
        for (k, v) in &self.metrics {
            s.push_str(&format!("{k}: {v:.6}\n"));
        }
        s
    }

    /// Machine-readable `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = format!("task={}\nsamples={}\n", self.task.name(), self.samples);
        for (k, v) in &self.metrics {
            s.push_str(&format!("{k}={v:.12e}\n"));
        }
        s
    }
}

/// Index of the row maximum, ties to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Row-wise softmax on plain values.
pub fn softmax_rows(logits: &Mat) -> Mat {
    let (n, k) = logits.shape();
    let mut out = Mat::zeros(n, k);
    for r in 0..n {
        let row = logits.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = out.row_mut(r);
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row.iter()) {
            *o = (v - m).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

pub fn classification_metrics(pred_labels: &[usize], true_labels: &[usize]) -> Result<MetricReport> {
    if pred_labels.len() != true_labels.len() || pred_labels.is_empty() {
        return Err(Error::invalid("prediction/target count mismatch"));
    }
    let correct = pred_labels
        .iter()
        .zip(true_labels)
        .filter(|(a, b)| a == b)
        .count();
    Ok(MetricReport {
        task: Task::Classify,
        metrics: vec![("acc".into(), correct as f64 / pred_labels.len() as f64)],
        samples: pred_labels.len(),
    })
}

/// Deterministically resample a cloud to `m` points with FPS when it is
/// larger; used to feed the exact EMD solver.
fn resample_for_emd(cloud: &Mat, m: usize) -> Result<Mat> {
    if cloud.rows() == m {
        return Ok(cloud.clone());
    }
    let idx = farthest_point_sample(cloud, m, FpsSeed::NearestToCentroid)?;
    gather_rows_by(cloud, &idx)
}

pub fn completion_metrics(preds: &[Mat], targets: &[Mat]) -> Result<MetricReport> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::invalid("prediction/target count mismatch"));
    }
    let mut cd_sum = 0.0;
    let mut emd_sum = 0.0;
    for (p, q) in preds.iter().zip(targets) {
        cd_sum += chamfer_distance(p, q)?;
        let m = p.rows().min(q.rows()).min(EMD_MAX_POINTS);
        let pr = resample_for_emd(p, m)?;
        let qr = resample_for_emd(q, m)?;
        emd_sum += emd_exact(&pr, &qr)?;
    }
    let n = preds.len() as f64;
    Ok(MetricReport {
        task: Task::Complete,
        metrics: vec![("cd".into(), cd_sum / n), ("emd".into(), emd_sum / n)],
        samples: preds.len(),
    })
}

/// Per-sample macro IoU/Dice on argmax labels plus the V-Net soft Dice on
/// probabilities, each averaged over the classes present in the target.
fn segmentation_sample(probs: &Mat, labels: &[usize]) -> Result<(f64, f64, f64)> {
    let (n, k) = probs.shape();
    if labels.len() != n {
        return Err(Error::invalid("one label per point required"));
    }
    let pred: Vec<usize> = (0..n).map(|r| argmax(probs.row(r))).collect();
    let mut iou_sum = 0.0;
    let mut dice_sum = 0.0;
    let mut sdice_sum = 0.0;
    let mut present = 0;
    for c in 0..k {
        let truth_count = labels.iter().filter(|&&l| l == c).count();
        if truth_count == 0 {
            continue;
        }
        present += 1;
        let pred_count = pred.iter().filter(|&&l| l == c).count();
        let inter = pred
            .iter()
            .zip(labels)
            .filter(|(&p, &l)| p == c && l == c)
            .count();
        let union = pred_count + truth_count - inter;
        iou_sum += inter as f64 / union as f64;
        dice_sum += 2.0 * inter as f64 / (pred_count + truth_count) as f64;

        // V-Net soft formulation on probabilities
        let mut pdoty = 0.0;
        let mut p2 = 0.0;
        let mut y2 = 0.0;
        for r in 0..n {
            let pv = probs.get(r, c);
            p2 += pv * pv;
            if labels[r] == c {
                pdoty += pv;
                y2 += 1.0;
            }
        }
        sdice_sum += 2.0 * pdoty / (p2 + y2);
    }
    if present == 0 {
        return Err(Error::invalid("target sample has no labeled points"));
    }
    let p = present as f64;
    Ok((iou_sum / p, dice_sum / p, sdice_sum / p))
}

pub fn segmentation_metrics(probs: &[Mat], labels: &[Vec<usize>]) -> Result<MetricReport> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::invalid("prediction/target count mismatch"));
    }
    let mut miou = 0.0;
    let mut dice = 0.0;
    let mut sdice = 0.0;
    for (p, l) in probs.iter().zip(labels) {
        let (i, d, s) = segmentation_sample(p, l)?;
        miou += i;
        dice += d;
        sdice += s;
    }
    let n = probs.len() as f64;
    Ok(MetricReport {
        task: Task::Segment,
        metrics: vec![
            ("miou".into(), miou / n),
            ("dice".into(), dice / n),
            ("sdice".into(), sdice / n),
        ],
        samples: probs.len(),
    })
}

/// Per-task predictions for [`compute_metrics`].
pub enum Predictions<'a> {
    Classify { logits: &'a [Mat] },
    Complete { clouds: &'a [Mat] },
    Segment { probs: &'a [Mat] },
}

/// Per-task targets for [`compute_metrics`].
pub enum Targets<'a> {
    Classify { labels: &'a [usize] },
    Complete { clouds: &'a [Mat] },
    Segment { labels: &'a [Vec<usize>] },
}

/// Dispatch to the task's metric suite; mismatched task/shape combinations
/// are invalid-argument errors.
pub fn compute_metrics(
    task: Task,
    predictions: &Predictions<'_>,
    targets: &Targets<'_>,
) -> Result<MetricReport> {
    match (task, predictions, targets) {
        (Task::Classify, Predictions::Classify { logits }, Targets::Classify { labels }) => {
            let pred: Vec<usize> = logits.iter().map(|m| argmax(m.row(0))).collect();
            classification_metrics(&pred, labels)
        }
        (Task::Complete, Predictions::Complete { clouds }, Targets::Complete { clouds: t }) => {
            completion_metrics(clouds, t)
        }
        (Task::Segment, Predictions::Segment { probs }, Targets::Segment { labels }) => {
            segmentation_metrics(probs, labels)
        }
        _ => Err(Error::invalid("task does not match prediction/target kinds")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::rng::rng_from_seed;
    use rand::Rng;
    use std::sync::Arc;

    fn random_cloud(n: usize, seed: u64) -> Mat {
        let mut rng = rng_from_seed(seed);
        let mut m = Mat::zeros(n, 3);
        for v in m.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        m
    }

    #[test]
    fn cross_entropy_uniform_and_hand_cases() {
        let mut g = Graph::new();
        let logits = g.input(Mat::filled(1, 4, 0.3));
        let loss = g.cross_entropy(logits, Arc::new(vec![1])).unwrap();
        assert!((g.value(loss).item() - 4.0f64.ln()).abs() < 1e-12);

        let mut g = Graph::new();
        let logits = g.input(Mat::from_vec(1, 2, vec![1.0, 0.0]));
        let loss = g.cross_entropy(logits, Arc::new(vec![0])).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((g.value(loss).item() - expected).abs() < 1e-12);
        assert!((g.value(loss).item() - 0.3133).abs() < 1e-4);

        // loss -> 0 as the correct-logit margin grows
        let mut g = Graph::new();
        let logits = g.input(Mat::from_vec(1, 3, vec![50.0, 0.0, 0.0]));
        let loss = g.cross_entropy(logits, Arc::new(vec![0])).unwrap();
        assert!(g.value(loss).item() < 1e-12);

        let mut g = Graph::new();
        let logits = g.input(Mat::filled(1, 3, 0.0));
        assert!(g.cross_entropy(logits, Arc::new(vec![3])).is_err());
    }

    #[test]
    fn dice_loss_cases() {
        // perfect one-hot
        let mut g = Graph::new();
        let probs = g.input(Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let loss = g.dice_loss(probs, Arc::new(vec![0, 1]), DICE_SMOOTH).unwrap();
        assert!(g.value(loss).item().abs() < 1e-4);

        // all wrong
        let mut g = Graph::new();
        let probs = g.input(Mat::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0]));
        let loss = g.dice_loss(probs, Arc::new(vec![0, 1]), DICE_SMOOTH).unwrap();
        assert!((g.value(loss).item() - 1.0).abs() < 1e-4);

        // uniform probabilities: per-class dice 0.5
        let mut g = Graph::new();
        let probs = g.input(Mat::filled(2, 2, 0.5));
        let loss = g.dice_loss(probs, Arc::new(vec![0, 1]), DICE_SMOOTH).unwrap();
        assert!((g.value(loss).item() - 0.5).abs() < 1e-4);
    }

    #[test]
    fn chamfer_cases() {
        let p = random_cloud(20, 1);
        assert!(chamfer_distance(&p, &p).unwrap().abs() < 1e-15);

        let a = Mat::from_vec(1, 3, vec![0.0, 0.0, 0.0]);
        let b = Mat::from_vec(1, 3, vec![3.0, 4.0, 0.0]);
        assert!((chamfer_distance(&a, &b).unwrap() - 50.0).abs() < 1e-12);

        let q = random_cloud(13, 2);
        let pq = chamfer_distance(&p, &q).unwrap();
        let qp = chamfer_distance(&q, &p).unwrap();
        assert!((pq - qp).abs() < 1e-15);

        assert!(chamfer_distance(&Mat::zeros(0, 3), &q).is_err());
    }

    #[test]
    fn dcd_cases() {
        let p = random_cloud(25, 3);
        assert!(density_aware_chamfer(&p, &p, 1.0).unwrap().abs() < 1e-15);

        // duplicated source onto a single target: matched count halves the kernel
        let p = Mat::from_vec(2, 3, vec![0.0; 6]);
        let q = Mat::from_vec(1, 3, vec![0.0; 3]);
        let v = density_aware_chamfer(&p, &q, 1.0).unwrap();
        assert!((v - 0.25).abs() < 1e-12);

        let a = random_cloud(17, 4);
        let b = random_cloud(11, 5);
        let v = density_aware_chamfer(&a, &b, 1.0).unwrap();
        assert!((0.0..1.0).contains(&v));
        let sym = density_aware_chamfer(&b, &a, 1.0).unwrap();
        assert!((v - sym).abs() < 1e-15);

        assert!(density_aware_chamfer(&a, &b, 0.0).is_err());
    }

    #[test]
    fn emd_cases() {
        let p = random_cloud(12, 6);
        assert!(emd_exact(&p, &p).unwrap().abs() < 1e-12);

        let a = Mat::from_vec(1, 3, vec![0.0, 0.0, 0.0]);
        let b = Mat::from_vec(1, 3, vec![1.0, 0.0, 0.0]);
        assert!((emd_exact(&a, &b).unwrap() - 1.0).abs() < 1e-12);

        // crossing pairs resolve to the zero-cost permutation
        let p = Mat::from_vec(2, 3, vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let q = Mat::from_vec(2, 3, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(emd_exact(&p, &q).unwrap().abs() < 1e-12);

        let c = random_cloud(5, 7);
        assert!(emd_exact(&p, &c).is_err());
    }

    #[test]
    fn emd_matches_brute_force() {
        fn brute(p: &Mat, q: &Mat) -> f64 {
            let n = p.rows();
            let mut perm: Vec<usize> = (0..n).collect();
            let mut best = f64::INFINITY;
            // Heap's algorithm
            fn heaps(k: usize, perm: &mut Vec<usize>, p: &Mat, q: &Mat, best: &mut f64) {
                if k == 1 {
                    let cost: f64 = perm
                        .iter()
                        .enumerate()
                        .map(|(i, &j)| p.row_dist2(i, q, j).sqrt())
                        .sum();
                    if cost < *best {
                        *best = cost;
                    }
                    return;
                }
                for i in 0..k {
                    heaps(k - 1, perm, p, q, best);
                    if k % 2 == 0 {
                        perm.swap(i, k - 1);
                    } else {
                        perm.swap(0, k - 1);
                    }
                }
            }
            heaps(n, &mut perm, p, q, &mut best);
            best / n as f64
        }
        for trial in 0..15 {
            let n = 2 + trial % 6;
            let p = random_cloud(n, 900 + trial as u64);
            let q = random_cloud(n, 950 + trial as u64);
            let fast = emd_exact(&p, &q).unwrap();
            let slow = brute(&p, &q);
            assert!((fast - slow).abs() < 1e-9, "n={n}: {fast} vs {slow}");
        }
    }

    #[test]
    fn set_distances_are_permutation_invariant() {
        let p = random_cloud(30, 8);
        let q = random_cloud(30, 9);
        let mut rng = rng_from_seed(10);
        let mut perm: Vec<usize> = (0..30).collect();
        for i in (1..30).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let p2 = gather_rows_by(&p, &perm).unwrap();
        assert!((chamfer_distance(&p, &q).unwrap() - chamfer_distance(&p2, &q).unwrap()).abs() < 1e-12);
        assert!(
            (density_aware_chamfer(&p, &q, 1.0).unwrap()
                - density_aware_chamfer(&p2, &q, 1.0).unwrap())
            .abs()
                < 1e-12
        );
        assert!((emd_exact(&p, &q).unwrap() - emd_exact(&p2, &q).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn classification_metric_counts() {
        let r = classification_metrics(&[0, 1, 1, 0], &[0, 1, 0, 0]).unwrap();
        assert!((r.get("acc").unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn segmentation_metrics_perfect_and_soft() {
        // perfect hard predictions
        let probs = Mat::from_vec(4, 2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        let labels = vec![0usize, 0, 1, 1];
        let r = segmentation_metrics(&[probs.clone()], &[labels.clone()]).unwrap();
        assert!((r.get("miou").unwrap() - 1.0).abs() < 1e-12);
        assert!((r.get("dice").unwrap() - 1.0).abs() < 1e-12);
        // one-hot probabilities: sDice equals hard Dice
        assert!((r.get("sdice").unwrap() - r.get("dice").unwrap()).abs() < 1e-12);
    }

    #[test]
    fn sdice_equals_hard_dice_on_one_hot_mistakes() {
        // one wrong one-hot prediction
        let probs = Mat::from_vec(4, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let labels = vec![0usize, 0, 1, 1];
        let r = segmentation_metrics(&[probs], &[labels]).unwrap();
        let dice = r.get("dice").unwrap();
        let sdice = r.get("sdice").unwrap();
        assert!((dice - sdice).abs() < 1e-4, "{dice} vs {sdice}");
        assert!(dice < 1.0);
    }

    #[test]
    fn dice_loss_consistent_with_dice_metric() {
        // one-hot probabilities, all classes present: 1 - dice_loss should
        // equal macro Dice within the smoothing tolerance
        let probs = Mat::from_vec(
            6,
            3,
            vec![
                1.0, 0.0, 0.0, //
                0.0, 1.0, 0.0, //
                0.0, 1.0, 0.0, //
                0.0, 0.0, 1.0, //
                1.0, 0.0, 0.0, //
                0.0, 0.0, 1.0,
            ],
        );
        let labels = vec![0usize, 1, 2, 2, 0, 1];
        let mut g = Graph::new();
        let p = g.input(probs.clone());
        let loss = g
            .dice_loss(p, Arc::new(labels.clone()), DICE_SMOOTH)
            .unwrap();
        let loss_v = g.value(loss).item();

        // hard dice from the metric suite on the same predictions
        let r = segmentation_metrics(&[probs], &[labels]).unwrap();
        let dice = r.get("dice").unwrap();
        assert!((1.0 - loss_v - dice).abs() < 1e-4, "{} vs {dice}", 1.0 - loss_v);
    }

    #[test]
    fn compute_metrics_dispatch_and_mismatch() {
        let logits = vec![Mat::from_vec(1, 3, vec![0.1, 0.9, 0.0])];
        let labels = vec![1usize];
        let r = compute_metrics(
            Task::Classify,
            &Predictions::Classify { logits: &logits },
            &Targets::Classify { labels: &labels },
        )
        .unwrap();
        assert_eq!(r.get("acc"), Some(1.0));
        assert_eq!(r.metrics.len(), 1);

        let err = compute_metrics(
            Task::Segment,
            &Predictions::Classify { logits: &logits },
            &Targets::Classify { labels: &labels },
        );
        assert!(err.is_err());
    }

    #[test]
    fn completion_metrics_resample_unequal() {
        let pred = random_cloud(40, 11);
        let target = random_cloud(25, 12);
        let r = completion_metrics(&[pred], &[target]).unwrap();
        assert!(r.get("cd").unwrap() > 0.0);
        assert!(r.get("emd").unwrap() > 0.0);
    }

    #[test]
    fn report_serialization() {
        let r = MetricReport {
            task: Task::Complete,
            metrics: vec![("cd".into(), 0.5), ("emd".into(), 0.25)],
            samples: 7,
        };
        let text = r.to_text();
        assert!(text.contains("task: complete"));
        assert!(text.contains("cd: 0.500000"));
        let kv = r.to_kv();
        assert!(kv.contains("task=complete"));
        assert!(kv.contains("samples=7"));
        assert!(kv.lines().any(|l| l.starts_with("emd=")));
    }
}
