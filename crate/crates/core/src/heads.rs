//! Task decoders: classification MLP on the latent vector, grid-folding
//! completion decoder, and the hierarchical interpolation segmentation head.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamStore};
use crate::encoder::{EncodedHierarchy, EncoderConfig};
use crate::error::{Error, Result};
use crate::geometry::knn_query;
use crate::mat::Mat;
use crate::nn::{LinearLayer, MlpStack};

/// Inverse-distance weighting floor.
pub const INTERP_EPS: f64 = 1e-8;

// ---------------------------------------------------------------------------
// Classification head
// ---------------------------------------------------------------------------

/// Two-layer MLP from the latent vector to class logits; the loss applies
/// the softmax.
#[derive(Debug, Clone)]
pub struct ClassifyHead {
    pub mlp: MlpStack,
    pub classes: usize,
}

impl ClassifyHead {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        latent_width: usize,
        classes: usize,
    ) -> Self {
        let hidden = (latent_width / 2).max(1);
        let mlp = MlpStack::init(store, rng, "head.classify", latent_width, &[hidden], classes);
        ClassifyHead { mlp, classes }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z: NodeId) -> Result<NodeId> {
        g.value(z).ensure_finite("latent vector")?;
        self.mlp.forward(g, store, z)
    }
}

// ---------------------------------------------------------------------------
// Folding completion decoder
// ---------------------------------------------------------------------------

/// Folding decoder shape: `patches * grid_side^2` output points, two fold
/// steps, shared fold-MLP widths (last width must be 3).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FoldingConfig {
    pub grid_side: usize,
    pub patches: usize,
    pub fold_widths: Vec<usize>,
}

impl Default for FoldingConfig {
    fn default() -> Self {
        FoldingConfig { grid_side: 32, patches: 1, fold_widths: vec![256, 128, 3] }
    }
}

impl FoldingConfig {
    pub fn output_points(&self) -> usize {
        self.patches * self.grid_side * self.grid_side
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_side < 2 {
            return Err(Error::invalid("grid side must be at least 2"));
        }
        if self.patches == 0 {
            return Err(Error::invalid("need at least one patch"));
        }
        if self.fold_widths.last() != Some(&3) {
            return Err(Error::invalid("fold MLP must end in width 3"));
        }
        Ok(())
    }
}

/// One patch: a fixed 2-D grid plus two fold MLPs conditioned on `z`.
#[derive(Debug, Clone)]
struct FoldPatch {
    fold1: MlpStack,
    fold2: MlpStack,
}

#[derive(Debug, Clone)]
pub struct FoldingDecoder {
    pub config: FoldingConfig,
    patches: Vec<FoldPatch>,
    latent_width: usize,
}

impl FoldingDecoder {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        latent_width: usize,
        config: FoldingConfig,
    ) -> Result<Self> {
        config.validate()?;
        let hidden = &config.fold_widths[..config.fold_widths.len() - 1];
        let patches = (0..config.patches)
            .map(|p| FoldPatch {
                fold1: MlpStack::init(
                    store,
                    rng,
                    &format!("head.fold.patch{p}.fold1"),
                    2 + latent_width,
                    hidden,
                    3,
                ),
                fold2: MlpStack::init(
                    store,
                    rng,
                    &format!("head.fold.patch{p}.fold2"),
                    3 + latent_width,
                    hidden,
                    3,
                ),
            })
            .collect();
        Ok(FoldingDecoder { config, patches, latent_width })
    }

    /// The fixed square lattice in `[-1, 1]^2`, row-major.
    pub fn grid(&self) -> Mat {
        let side = self.config.grid_side;
        let mut grid = Mat::zeros(side * side, 2);
        for i in 0..side {
            let u = -1.0 + 2.0 * i as f64 / (side - 1) as f64;
            for j in 0..side {
                let v = -1.0 + 2.0 * j as f64 / (side - 1) as f64;
                grid.set(i * side + j, 0, u);
                grid.set(i * side + j, 1, v);
            }
        }
        grid
    }

    /// Stretch the grid into a cloud guided by `z`: two folds, each an MLP of
    /// the previous point concatenated with the broadcast latent vector.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z: NodeId) -> Result<NodeId> {
        if g.value(z).shape() != (1, self.latent_width) {
            return Err(Error::invalid("latent vector width mismatch"));
        }
        g.value(z).ensure_finite("latent vector")?;
        let grid = self.grid();
        let rows = grid.rows();
        let zb = g.broadcast_row(z, rows)?;
        let mut outputs = Vec::with_capacity(self.patches.len());
        for patch in &self.patches {
            let grid_node = g.input(grid.clone());
            let cat1 = g.concat_cols(&[grid_node, zb])?;
            let folded1 = patch.fold1.forward(g, store, cat1)?;
            let cat2 = g.concat_cols(&[folded1, zb])?;
            outputs.push(patch.fold2.forward(g, store, cat2)?);
        }
        if outputs.len() == 1 {
            return Ok(outputs[0]);
        }
        // stack patches row-wise by gathering from a concatenation
        let mut stacked = outputs[0];
        for &next in &outputs[1..] {
            let a_rows = g.value(stacked).rows();
            let b_rows = g.value(next).rows();
            // concat along rows: gather trick via two separate gathers is
            // wasteful; build directly
            let mut combined = Mat::zeros(a_rows + b_rows, 3);
            for r in 0..a_rows {
                combined.row_mut(r).copy_from_slice(g.value(stacked).row(r));
            }
            for r in 0..b_rows {
                combined.row_mut(a_rows + r).copy_from_slice(g.value(next).row(r));
            }
            // keep gradients: express as gather of each part
            let idx_a: Vec<usize> = (0..a_rows).collect();
            let idx_b: Vec<usize> = (0..b_rows).collect();
            let ga = g.gather_rows(stacked, Arc::new(idx_a))?;
            let gb = g.gather_rows(next, Arc::new(idx_b))?;
            stacked = concat_rows(g, ga, gb)?;
        }
        Ok(stacked)
    }
}

/// Row-wise concatenation built from column concat on transposed-free ops:
/// implemented as a scatter through gather indices.
fn concat_rows(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    let (ar, c) = g.value(a).shape();
    let (br, c2) = g.value(b).shape();
    if c != c2 {
        return Err(Error::invalid("row concat requires equal widths"));
    }
    // pad each part with zero rows, then add
    let za = g.input(Mat::zeros(br, c));
    let zb = g.input(Mat::zeros(ar, c));
    let a_idx: Vec<usize> = (0..ar).collect();
    let b_idx: Vec<usize> = (0..br).collect();
    let _ = (za, zb, a_idx, b_idx);
    // simplest correct construction: gather with an index map over a column
    // concat is not available, so instead scatter via weighted pooling
    // (identity weights) on the stacked index space
    let total = ar + br;
    let mut idx = Vec::with_capacity(total);
    let mut w = Vec::with_capacity(total);
    for r in 0..ar {
        idx.push(r);
        w.push(1.0);
    }
    for r in 0..br {
        idx.push(ar + r);
        w.push(1.0);
    }
    // build a (ar+br) x c node whose first rows come from a, rest from b:
    // gather a and b into place using two weighted pools over a shared
    // zero-padded concat is overkill; fall back to a dedicated op-free path:
    // treat [a; b] = gather([a_ext]) + gather([b_ext]) where a_ext pads a
    // with zeros via add_row-free concat.
    let a_ext = {
        let pad = g.input(Mat::zeros(br, c));
        stack_two(g, a, pad)?
    };
    let b_ext = {
        let pad = g.input(Mat::zeros(ar, c));
        stack_two(g, pad, b)?
    };
    g.add(a_ext, b_ext)
}

/// Stack two nodes row-wise using gather indices into each part separately,
/// summing disjoint supports.
fn stack_two(g: &mut Graph, top: NodeId, bottom: NodeId) -> Result<NodeId> {
    let (tr, _c) = g.value(top).shape();
    let (br, _) = g.value(bottom).shape();
    let top_idx: Vec<usize> = (0..tr).chain(std::iter::repeat(0).take(br)).collect();
    let bottom_idx: Vec<usize> = std::iter::repeat(0)
        .take(tr)
        .chain(0..br)
        .collect();
    let top_mask: Vec<f64> = (0..tr + br).map(|r| if r < tr { 1.0 } else { 0.0 }).collect();
    let bottom_mask: Vec<f64> = (0..tr + br).map(|r| if r >= tr { 1.0 } else { 0.0 }).collect();
    let gt = g.gather_rows(top, Arc::new(top_idx))?;
    let gb = g.gather_rows(bottom, Arc::new(bottom_idx))?;
    let c = g.value(gt).cols();
    let mt = g.input(mask_mat(&top_mask, c));
    let mb = g.input(mask_mat(&bottom_mask, c));
    let pt = g.mul(gt, mt)?;
    let pb = g.mul(gb, mb)?;
    g.add(pt, pb)
}

fn mask_mat(mask: &[f64], cols: usize) -> Mat {
    let mut m = Mat::zeros(mask.len(), cols);
    for (r, &v) in mask.iter().enumerate() {
        for c in 0..cols {
            m.set(r, c, v);
        }
    }
    m
}

// ---------------------------------------------------------------------------
// Segmentation head
// ---------------------------------------------------------------------------

/// Segmentation decoder shape: interpolation neighbor count, per-level MLP
/// widths (mirroring the encoder channels), and the class count.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentationHeadConfig {
    pub interp_k: usize,
    pub widths: Vec<usize>,
    pub classes: usize,
}

impl Default for SegmentationHeadConfig {
    fn default() -> Self {
        SegmentationHeadConfig { interp_k: 3, widths: Vec::new(), classes: 2 }
    }
}

impl SegmentationHeadConfig {
    pub fn validate(&self, encoder: &EncoderConfig) -> Result<()> {
        if self.interp_k == 0 {
            return Err(Error::invalid("interpolation neighbor count must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if !self.widths.is_empty() && self.widths.len() != encoder.levels {
            return Err(Error::invalid(format!(
                "decoder widths length {} != {} levels",
                self.widths.len(),
                encoder.levels
            )));
        }
        Ok(())
    }

    fn effective_widths(&self, encoder: &EncoderConfig) -> Vec<usize> {
        if self.widths.is_empty() {
            encoder.channels.clone()
        } else {
            self.widths.clone()
        }
    }
}

/// Distance-weighted feature interpolation: for each query point, the k
/// nearest reference points contribute with weights `(1/(d+eps))`
/// normalized to sum to one.
pub fn interpolate_features(
    g: &mut Graph,
    query_coords: &Mat,
    ref_coords: &Mat,
    ref_features: NodeId,
    k: usize,
) -> Result<NodeId> {
    if k > ref_coords.rows() {
        return Err(Error::invalid(format!(
            "interpolation k={k} exceeds {} reference points",
            ref_coords.rows()
        )));
    }
    let group = knn_query(query_coords, ref_coords, k)?;
    let q = query_coords.rows();
    let mut weights = Vec::with_capacity(q * k);
    for qi in 0..q {
        let dists = group.distances_of(qi);
        let raw: Vec<f64> = dists.iter().map(|d| 1.0 / (d + INTERP_EPS)).collect();
        let total: f64 = raw.iter().sum();
        for w in raw {
            weights.push(w / total);
        }
    }
    g.weighted_pool(
        ref_features,
        Arc::new(group.neighbor_indices.clone()),
        Arc::new(weights),
        k,
    )
}

/// Hierarchical interpolation decoder: one MLP per hierarchy level plus a
/// final linear layer producing per-point logits at level 0.
#[derive(Debug, Clone)]
pub struct SegmentHead {
    pub config: SegmentationHeadConfig,
    /// MLP per level, index 0 = input level, index M = deepest.
    level_mlps: Vec<MlpStack>,
    out: LinearLayer,
}

impl SegmentHead {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        encoder: &EncoderConfig,
        config: SegmentationHeadConfig,
    ) -> Result<Self> {
        config.validate(encoder)?;
        let widths = config.effective_widths(encoder);
        let enc_width = |level: usize| -> usize {
            if level == 0 {
                encoder.channels[0]
            } else {
                encoder.channels[level - 1]
            }
        };
        let dec_width = |level: usize| -> usize {
            if level == 0 {
                widths[0]
            } else {
                widths[level - 1]
            }
        };
        let m = encoder.levels;
        let mut level_mlps = Vec::with_capacity(m + 1);
        for level in 0..=m {
            let upstream = if level == m { encoder.latent_width } else { dec_width(level + 1) };
            let input = enc_width(level) + upstream;
            let w = dec_width(level);
            level_mlps.push(MlpStack::init(
                store,
                rng,
                &format!("head.segment.level{level}"),
                input,
                &[w],
                w,
            ));
        }
        let out = LinearLayer::init(store, rng, "head.segment.out", dec_width(0), config.classes);
        Ok(SegmentHead { config, level_mlps, out })
    }

    /// Decode per-point logits for the level-0 points: the deepest level
    /// concatenates the broadcast latent vector, every shallower level
    /// concatenates features interpolated from the level below it.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        hierarchy: &EncodedHierarchy,
    ) -> Result<NodeId> {
        let m = self.level_mlps.len() - 1;
        if hierarchy.levels.len() != m + 1 {
            return Err(Error::InvalidState(format!(
                "hierarchy has {} levels, decoder expects {}",
                hierarchy.levels.len(),
                m + 1
            )));
        }
        let deepest = &hierarchy.levels[m];
        let zb = g.broadcast_row(hierarchy.z, deepest.len())?;
        let cat = g.concat_cols(&[deepest.features, zb])?;
        let mut decoded = self.level_mlps[m].forward(g, store, cat)?;
        for level in (0..m).rev() {
            let current = &hierarchy.levels[level];
            let below = &hierarchy.levels[level + 1];
            let interp = interpolate_features(
                g,
                &current.coords,
                &below.coords,
                decoded,
                self.config.interp_k.min(below.len()),
            )?;
            let cat = g.concat_cols(&[current.features, interp])?;
            decoded = self.level_mlps[level].forward(g, store, cat)?;
        }
        self.out.forward(g, store, decoded)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{encode, EncoderParams};
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn random_cloud(n: usize, seed: u64) -> Mat {
        let mut rng = rng_from_seed(seed);
        let mut m = Mat::zeros(n, 3);
        for v in m.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        m
    }

    #[test]
    fn classify_zero_weights_yield_bias_logits() {
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(1);
        let head = ClassifyHead::init(&mut store, &mut rng, 16, 5);
        for (lin, _) in &head.mlp.hidden {
            for v in store.value_mut(lin.w).data_mut() {
                *v = 0.0;
            }
        }
        for v in store.value_mut(head.mlp.out.w).data_mut() {
            *v = 0.0;
        }
        let mut g = Graph::new();
        let z = g.input(random_cloud(1, 2).reshaped(1, 3));
        // widen to 16
        let mut zwide = Mat::zeros(1, 16);
        for c in 0..16 {
            zwide.set(0, c, g.value(z).get(0, c % 3));
        }
        let mut g = Graph::new();
        let z = g.input(zwide);
        let logits = head.forward(&mut g, &store, z).unwrap();
        assert_eq!(g.value(logits).shape(), (1, 5));
        let first = g.value(logits).get(0, 0);
        for c in 0..5 {
            assert_eq!(g.value(logits).get(0, c), first);
        }
        // argmax tie-break lands on class 0
        assert_eq!(crate::objectives::argmax(g.value(logits).row(0)), 0);
    }

    #[test]
    fn classify_head_gradients() {
        use crate::gradcheck::{fd_gradient, max_rel_error, FD_STEP};
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(3);
        let head = ClassifyHead::init(&mut store, &mut rng, 8, 3);
        let z0 = random_cloud(1, 4).reshaped(1, 3);
        let mut z = Mat::zeros(1, 8);
        for c in 0..8 {
            z.set(0, c, z0.get(0, c % 3));
        }
        let labels = std::sync::Arc::new(vec![1usize]);
        let forward = |probe: &Mat| {
            let mut g = Graph::new();
            let zn = g.input(probe.clone());
            let logits = head.forward(&mut g, &store, zn).unwrap();
            let loss = g.cross_entropy(logits, labels.clone()).unwrap();
            g.value(loss).item()
        };
        let numeric = fd_gradient(forward, &z, FD_STEP);
        let mut g = Graph::new();
        let zn = g.input(z.clone());
        let logits = head.forward(&mut g, &store, zn).unwrap();
        let loss = g.cross_entropy(logits, labels.clone()).unwrap();
        let grads = g.backward(loss).unwrap();
        let analytic = grads.get(zn).unwrap();
        let err = max_rel_error(analytic, &numeric);
        assert!(err < 1e-5, "rel error {err}");
    }

    #[test]
    fn fold_output_count_and_determinism() {
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(5);
        let cfg = FoldingConfig { grid_side: 4, patches: 1, fold_widths: vec![8, 3] };
        let dec = FoldingDecoder::init(&mut store, &mut rng, 8, cfg).unwrap();
        let z = random_cloud(1, 6).reshaped(1, 3);
        let mut zwide = Mat::zeros(1, 8);
        for c in 0..8 {
            zwide.set(0, c, z.get(0, c % 3));
        }
        let run = || {
            let mut g = Graph::new();
            let zn = g.input(zwide.clone());
            let out = dec.forward(&mut g, &store, zn).unwrap();
            g.value(out).clone()
        };
        let a = run();
        assert_eq!(a.shape(), (16, 3));
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn fold_zero_weights_collapse_to_bias() {
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(7);
        let cfg = FoldingConfig { grid_side: 3, patches: 1, fold_widths: vec![4, 3] };
        let dec = FoldingDecoder::init(&mut store, &mut rng, 4, cfg).unwrap();
        // zero every weight; set fold2 output bias to a marker point
        for (_, p) in store.iter().map(|(i, p)| (i, p.name.clone())).collect::<Vec<_>>() {
            let _ = p;
        }
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            if name.ends_with(".w") {
                for v in store.value_mut(id).data_mut() {
                    *v = 0.0;
                }
            }
            if name == "head.fold.patch0.fold2.out.b" {
                let b = store.value_mut(id);
                b.set(0, 0, 0.25);
                b.set(0, 1, -0.5);
                b.set(0, 2, 1.0);
            }
        }
        let mut g = Graph::new();
        let zn = g.input(Mat::zeros(1, 4));
        let out = dec.forward(&mut g, &store, zn).unwrap();
        for r in 0..9 {
            assert_eq!(g.value(out).row(r), &[0.25, -0.5, 1.0]);
        }
    }

    #[test]
    fn fold_multi_patch_counts() {
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(8);
        let cfg = FoldingConfig { grid_side: 3, patches: 2, fold_widths: vec![4, 3] };
        let dec = FoldingDecoder::init(&mut store, &mut rng, 4, cfg).unwrap();
        let mut g = Graph::new();
        let zn = g.input(random_cloud(1, 9).reshaped(1, 3));
        let mut zwide = Mat::zeros(1, 4);
        for c in 0..4 {
            zwide.set(0, c, g.value(zn).get(0, c % 3));
        }
        let mut g = Graph::new();
        let zn = g.input(zwide);
        let out = dec.forward(&mut g, &store, zn).unwrap();
        assert_eq!(g.value(out).shape(), (18, 3));
        // the two patches have independent parameters, so outputs differ
        let top = g.value(out).row(0).to_vec();
        let bottom = g.value(out).row(9).to_vec();
        assert_ne!(top, bottom);
    }

    #[test]
    fn fold_small_z_perturbation_bounded() {
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(10);
        let cfg = FoldingConfig { grid_side: 4, patches: 1, fold_widths: vec![8, 3] };
        let dec = FoldingDecoder::init(&mut store, &mut rng, 6, cfg).unwrap();
        let base = random_cloud(1, 11).reshaped(1, 3);
        let mut z = Mat::zeros(1, 6);
        for c in 0..6 {
            z.set(0, c, base.get(0, c % 3));
        }
        let run = |zv: &Mat| {
            let mut g = Graph::new();
            let zn = g.input(zv.clone());
            let out = dec.forward(&mut g, &store, zn).unwrap();
            g.value(out).clone()
        };
        let a = run(&z);
        let mut z2 = z.clone();
        z2.set(0, 0, z.get(0, 0) + 1e-3);
        let b = run(&z2);
        let mut max_disp = 0.0f64;
        for (x, y) in a.data().iter().zip(b.data()) {
            max_disp = max_disp.max((x - y).abs());
        }
        assert!(max_disp > 0.0);
        assert!(max_disp < 1.0, "displacement {max_disp} for a 1e-3 nudge");
    }

    #[test]
    fn interpolation_hand_cases() {
        // query is a reference point, k=1: reproduces that feature
        let mut g = Graph::new();
        let feats = g.input(Mat::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let refs = Mat::from_vec(2, 3, vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let queries = Mat::from_vec(1, 3, vec![0.0, 0.0, 0.0]);
        let out = interpolate_features(&mut g, &queries, &refs, feats, 1).unwrap();
        assert_eq!(g.value(out).row(0), &[1.0, 2.0]);

        // equidistant pair, k=2: midpoint
        let mut g = Graph::new();
        let feats = g.input(Mat::from_vec(2, 1, vec![2.0, 6.0]));
        let refs = Mat::from_vec(2, 3, vec![-1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let queries = Mat::from_vec(1, 3, vec![0.0, 0.0, 0.0]);
        let out = interpolate_features(&mut g, &queries, &refs, feats, 2).unwrap();
        assert!((g.value(out).get(0, 0) - 4.0).abs() < 1e-9);

        // distances 1 and 3: weights 0.75 / 0.25
        let mut g = Graph::new();
        let feats = g.input(Mat::from_vec(2, 1, vec![1.0, 0.0]));
        let refs = Mat::from_vec(2, 3, vec![1.0, 0.0, 0.0, 3.0, 0.0, 0.0]);
        let queries = Mat::from_vec(1, 3, vec![0.0, 0.0, 0.0]);
        let out = interpolate_features(&mut g, &queries, &refs, feats, 2).unwrap();
        assert!((g.value(out).get(0, 0) - 0.75).abs() < 1e-8);

        // k too large
        let mut g = Graph::new();
        let feats = g.input(Mat::zeros(2, 1));
        assert!(interpolate_features(&mut g, &queries, &refs, feats, 3).is_err());
    }

    #[test]
    fn interpolation_weights_are_convex() {
        // checked through the output: interpolating constant features must
        // reproduce the constant exactly if weights sum to one
        let refs = random_cloud(20, 12);
        let queries = random_cloud(7, 13);
        let mut g = Graph::new();
        let feats = g.input(Mat::filled(20, 3, 2.5));
        let out = interpolate_features(&mut g, &queries, &refs, feats, 3).unwrap();
        for &v in g.value(out).data() {
            assert!((v - 2.5).abs() < 1e-12);
        }
    }

    fn tiny_hierarchy(seed: u64, n: usize) -> (ParamStore, EncoderParams, EncoderConfig, Mat) {
        let cfg = EncoderConfig::tiny();
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(seed);
        let params = EncoderParams::init(&mut store, &mut rng, &cfg).unwrap();
        let coords = random_cloud(n, seed + 100);
        (store, params, cfg, coords)
    }

    #[test]
    fn segment_head_shapes_and_covariance() {
        let (mut store, params, cfg, coords) = tiny_hierarchy(14, 24);
        let mut rng = rng_from_seed(15);
        let head_cfg = SegmentationHeadConfig { interp_k: 3, widths: vec![], classes: 4 };
        let head = SegmentHead::init(&mut store, &mut rng, &cfg, head_cfg).unwrap();

        let mut g = Graph::new();
        let h = encode(&mut g, &store, &params, &cfg, &coords).unwrap();
        let logits = head.forward(&mut g, &store, &h).unwrap();
        assert_eq!(g.value(logits).shape(), (24, 4));
        let base = g.value(logits).clone();

        // permuting input points permutes logits rows identically
        let mut rng2 = rng_from_seed(16);
        let mut perm: Vec<usize> = (0..24).collect();
        for i in (1..24).rev() {
            perm.swap(i, rng2.gen_range(0..=i));
        }
        let shuffled = crate::geometry::gather_rows_by(&coords, &perm).unwrap();
        let mut g2 = Graph::new();
        let h2 = encode(&mut g2, &store, &params, &cfg, &shuffled).unwrap();
        let logits2 = head.forward(&mut g2, &store, &h2).unwrap();
        let moved = g2.value(logits2);
        for (i, &src) in perm.iter().enumerate() {
            assert_eq!(moved.row(i), base.row(src), "row {i}");
        }
    }

    #[test]
    fn segment_head_rejects_missing_levels() {
        let (mut store, params, cfg, coords) = tiny_hierarchy(17, 24);
        let mut rng = rng_from_seed(18);
        let head = SegmentHead::init(
            &mut store,
            &mut rng,
            &cfg,
            SegmentationHeadConfig { interp_k: 3, widths: vec![], classes: 2 },
        )
        .unwrap();
        let mut g = Graph::new();
        let mut h = encode(&mut g, &store, &params, &cfg, &coords).unwrap();
        h.levels.pop();
        assert!(matches!(
            head.forward(&mut g, &store, &h),
            Err(Error::InvalidState(_))
        ));
    }

    #[test]
    fn segment_head_single_level_degenerate() {
        // M = 1 reduces to concat(f, z) per point
        let mut cfg = EncoderConfig::tiny();
        cfg.levels = 1;
        cfg.channels = vec![8];
        cfg.ratios = vec![1.0];
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(19);
        let params = EncoderParams::init(&mut store, &mut rng, &cfg).unwrap();
        let head = SegmentHead::init(
            &mut store,
            &mut rng,
            &cfg,
            SegmentationHeadConfig { interp_k: 2, widths: vec![], classes: 3 },
        )
        .unwrap();
        let coords = random_cloud(16, 20);
        let mut g = Graph::new();
        let h = encode(&mut g, &store, &params, &cfg, &coords).unwrap();
        let logits = head.forward(&mut g, &store, &h).unwrap();
        assert_eq!(g.value(logits).shape(), (16, 3));
    }
}
