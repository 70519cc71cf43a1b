//! The hierarchical SSM encoder: input embedding, subsample levels with
//! multi-scale dynamic KNN grouping, local feature extraction over neighbor
//! sequences, global feature extraction over long scans, and the final
//! max-pool to the latent vector.
//!
//! FPS runs in metric space; KNN grouping runs in the feature space of the
//! parent level, so neighborhoods follow the learned features rather than
//! raw distance. All scans for the group block are built from coordinates.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamStore};
use crate::error::{Error, Result};
use crate::geometry::{
    build_scan, farthest_point_sample, gather_rows_by, knn_query, FpsSeed, NeighborGroup,
    ScanStrategy,
};
use crate::mat::Mat;
use crate::nn::{default_groups, LinearLayer, MlpStack};
use crate::ssm::{pssm_group_forward, pssm_vanilla_forward, PssmBlockParams};

/// Architecture hyperparameters for the encoder.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Number of subsample levels (M).
    pub levels: usize,
    /// Output feature width per level; length must equal `levels`.
    pub channels: Vec<usize>,
    /// Position embedding width.
    pub pos_embed_width: usize,
    /// Latent vector width.
    pub latent_width: usize,
    /// Neighbor counts per scale (length = number of scales L).
    pub neighbor_counts: Vec<usize>,
    /// Downsample ratio per level; 1.0 keeps every point.
    pub ratios: Vec<f64>,
    /// SSM state dimension.
    pub state_size: usize,
    /// Block inner-width expansion factor.
    pub expansion: usize,
    /// Scan strategies for the group block (G = scan_set.len()).
    pub scan_set: Vec<String>,
}

impl Default for EncoderConfig {
    /// Paper-scale architecture.
    fn default() -> Self {
        EncoderConfig {
            levels: 5,
            channels: vec![64, 64, 128, 256, 512],
            pos_embed_width: 64,
            latent_width: 1024,
            neighbor_counts: vec![16, 32],
            ratios: vec![1.0, 0.5, 0.5, 0.5, 0.5],
            state_size: 16,
            expansion: 2,
            scan_set: ScanStrategy::full_set().iter().map(|s| s.name().to_string()).collect(),
        }
    }
}

impl EncoderConfig {
    /// Desk-scale configuration used by the synthetic-task suites.
    pub fn desk() -> Self {
        EncoderConfig {
            levels: 5,
            channels: vec![16, 16, 32, 64, 128],
            pos_embed_width: 32,
            latent_width: 256,
            neighbor_counts: vec![8, 16],
            ratios: vec![1.0, 0.5, 0.5, 0.5, 0.5],
            state_size: 8,
            expansion: 1,
            ..Default::default()
        }
    }

    /// Minimal configuration for end-to-end gradient checks.
    pub fn tiny() -> Self {
        EncoderConfig {
            levels: 2,
            channels: vec![8, 16],
            pos_embed_width: 8,
            latent_width: 16,
            neighbor_counts: vec![4, 8],
            ratios: vec![1.0, 0.5],
            state_size: 4,
            expansion: 1,
            scan_set: vec!["z".into(), "io".into()],
        }
    }

    pub fn scales(&self) -> usize {
        self.neighbor_counts.len()
    }

    pub fn max_neighbors(&self) -> usize {
        self.neighbor_counts.iter().copied().max().unwrap_or(0)
    }

    pub fn parsed_scan_set(&self) -> Result<Vec<ScanStrategy>> {
        self.scan_set.iter().map(|s| ScanStrategy::parse(s)).collect()
    }

    /// Feature width entering level `i` (1-based): the projection width for
    /// level 1, the previous level's output width after that.
    fn input_width(&self, level: usize) -> usize {
        if level <= 1 {
            self.channels[0]
        } else {
            self.channels[level - 2]
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::invalid("encoder needs at least one level"));
        }
        if self.channels.len() != self.levels {
            return Err(Error::invalid(format!(
                "channels list has {} entries for {} levels",
                self.channels.len(),
                self.levels
            )));
        }
        if self.ratios.len() != self.levels {
            return Err(Error::invalid(format!(
                "ratios list has {} entries for {} levels",
                self.ratios.len(),
                self.levels
            )));
        }
        for &r in &self.ratios {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::invalid(format!("ratio {r} outside (0, 1]")));
            }
        }
        let scales = self.scales();
        if scales == 0 {
            return Err(Error::invalid("need at least one neighbor scale"));
        }
        if self.neighbor_counts.iter().any(|&k| k == 0) {
            return Err(Error::invalid("neighbor counts must be positive"));
        }
        for (i, &c) in self.channels.iter().enumerate() {
            if c % scales != 0 {
                return Err(Error::invalid(format!(
                    "channels[{i}]={c} not divisible into {scales} scales"
                )));
            }
            let split = c / scales;
            for width in [c, split, c * self.expansion.max(1), split * self.expansion.max(1)] {
                let g = default_groups(width);
                if width % g != 0 {
                    return Err(Error::invalid(format!(
                        "width {width} not divisible by its norm group count {g}"
                    )));
                }
            }
        }
        if self.pos_embed_width == 0 || self.latent_width == 0 || self.state_size == 0 {
            return Err(Error::invalid("widths and state size must be positive"));
        }
        if self.expansion == 0 {
            return Err(Error::invalid("expansion must be at least 1"));
        }
        self.parsed_scan_set()?;
        if self.scan_set.is_empty() {
            return Err(Error::invalid("scan set must not be empty"));
        }
        Ok(())
    }
}

/// Parameters of one subsample level.
#[derive(Debug, Clone)]
pub struct LevelParams {
    /// Per-scale projection of grouped `(pos, feat)` rows to the scale width.
    pub scale_proj: Vec<LinearLayer>,
    /// Per-scale vanilla block over neighbor sequences.
    pub local_blocks: Vec<PssmBlockParams>,
    /// Group block over the long scans.
    pub global_block: PssmBlockParams,
}

/// All encoder parameters, registered in a deterministic order.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub embed_pos: MlpStack,
    pub embed_feat: MlpStack,
    pub levels: Vec<LevelParams>,
    pub final_proj: LinearLayer,
}

impl EncoderParams {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let scans = cfg.parsed_scan_set()?;
        let embed_pos = MlpStack::init(
            store,
            rng,
            "encoder.embed_pos",
            3,
            &[cfg.pos_embed_width],
            cfg.pos_embed_width,
        );
        let embed_feat =
            MlpStack::init(store, rng, "encoder.embed_feat", 3, &[cfg.channels[0]], cfg.channels[0]);
        let mut levels = Vec::with_capacity(cfg.levels);
        for i in 1..=cfg.levels {
            let c_out = cfg.channels[i - 1];
            let split = c_out / cfg.scales();
            let grouped_width = cfg.input_width(i) + cfg.pos_embed_width;
            let mut scale_proj = Vec::with_capacity(cfg.scales());
            let mut local_blocks = Vec::with_capacity(cfg.scales());
            for j in 0..cfg.scales() {
                scale_proj.push(LinearLayer::init(
                    store,
                    rng,
                    &format!("encoder.level{i}.scale{j}.proj"),
                    grouped_width,
                    split,
                ));
                local_blocks.push(PssmBlockParams::init(
                    store,
                    rng,
                    &format!("encoder.level{i}.scale{j}.local"),
                    split,
                    1,
                    cfg.state_size,
                    cfg.expansion,
                ));
            }
            let global_block = PssmBlockParams::init(
                store,
                rng,
                &format!("encoder.level{i}.global"),
                c_out,
                scans.len(),
                cfg.state_size,
                cfg.expansion,
            );
            levels.push(LevelParams { scale_proj, local_blocks, global_block });
        }
        let final_proj = LinearLayer::init(
            store,
            rng,
            "encoder.final_proj",
            cfg.channels[cfg.levels - 1],
            cfg.latent_width,
        );
        Ok(EncoderParams { embed_pos, embed_feat, levels, final_proj })
    }
}

/// One level of the encoded hierarchy inside a graph: plain coordinates plus
/// graph nodes for position embeddings and features.
#[derive(Debug, Clone)]
pub struct LevelState {
    pub coords: Mat,
    pub pos: NodeId,
    pub features: NodeId,
}

impl LevelState {
    pub fn len(&self) -> usize {
        self.coords.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.rows() == 0
    }
}

/// Everything the decoders need: all retained levels (index 0 is the
/// embedded input set) and the latent vector node.
#[derive(Debug)]
pub struct EncodedHierarchy {
    pub levels: Vec<LevelState>,
    pub z: NodeId,
}

/// Position embedding and feature projection of the raw input coordinates.
pub fn embed_input(
    g: &mut Graph,
    store: &ParamStore,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    coords: &Mat,
) -> Result<LevelState> {
    let n = coords.rows();
    if coords.cols() != 3 {
        return Err(Error::invalid("input coordinates must be N x 3"));
    }
    if n < cfg.max_neighbors() {
        return Err(Error::invalid(format!(
            "{n} points cannot support k={} neighborhoods",
            cfg.max_neighbors()
        )));
    }
    coords.ensure_finite("coords")?;
    let x0 = g.input(coords.clone());
    let pos = params.embed_pos.forward(g, store, x0)?;
    let features = params.embed_feat.forward(g, store, x0)?;
    Ok(LevelState { coords: coords.clone(), pos, features })
}

/// FPS selection plus per-scale feature-space KNN grouping for one level.
#[derive(Debug)]
pub struct SubsampledLevel {
    pub coords: Mat,
    pub pos: NodeId,
    pub selected: Vec<usize>,
    /// Per-scale neighborhoods into the parent set, sorted by distance.
    pub neighbors: Vec<NeighborGroup>,
}

pub fn subsample_level(
    g: &mut Graph,
    parent: &LevelState,
    cfg: &EncoderConfig,
    level: usize,
) -> Result<SubsampledLevel> {
    let n_prev = parent.len();
    let k_max = cfg.max_neighbors();
    if k_max > n_prev {
        return Err(Error::invalid(format!(
            "level {level}: k={k_max} exceeds {n_prev} parent points"
        )));
    }
    let ratio = cfg.ratios[level - 1];
    let selected: Vec<usize> = if ratio >= 1.0 {
        (0..n_prev).collect()
    } else {
        let m = ((ratio * n_prev as f64).ceil() as usize).clamp(1, n_prev);
        farthest_point_sample(&parent.coords, m, FpsSeed::NearestToCentroid)?
    };
    let coords = gather_rows_by(&parent.coords, &selected)?;
    let pos = g.gather_rows(parent.pos, Arc::new(selected.clone()))?;

    // dynamic KNN in the parent's feature space; smaller scales are prefixes
    // of the widest query because rows are sorted by (distance, index)
    let feats = g.value(parent.features).clone();
    let queries = gather_rows_by(&feats, &selected)?;
    let widest = knn_query(&queries, &feats, k_max)?;
    let neighbors = cfg
        .neighbor_counts
        .iter()
        .map(|&k| widest.truncated(k))
        .collect();
    Ok(SubsampledLevel { coords, pos, selected, neighbors })
}

/// Local features: per scale, grouped neighbor `(pos, feat)` rows are
/// projected to the scale width, run through a vanilla PSSM block as
/// distance-ordered sequences, max-pooled over neighbors, and concatenated
/// across scales.
pub fn local_features(
    g: &mut Graph,
    store: &ParamStore,
    level_params: &LevelParams,
    parent: &LevelState,
    sub: &SubsampledLevel,
) -> Result<NodeId> {
    let concat_pf = g.concat_cols(&[parent.pos, parent.features])?;
    let centers = sub.selected.len();
    let mut pooled = Vec::with_capacity(sub.neighbors.len());
    for (j, group) in sub.neighbors.iter().enumerate() {
        let idx = Arc::new(group.neighbor_indices.clone());
        let grouped = g.gather_rows(concat_pf, idx)?;
        let projected = level_params.scale_proj[j].forward(g, store, grouped)?;
        let scanned = pssm_vanilla_forward(
            g,
            store,
            &level_params.local_blocks[j],
            projected,
            centers,
            group.k,
        )?;
        pooled.push(g.max_pool_set(scanned, group.k)?);
    }
    g.concat_cols(&pooled)
}

/// Global features: the full scan set is built from the level's coordinates
/// in metric space and fed with the local features through the group block.
pub fn global_features(
    g: &mut Graph,
    store: &ParamStore,
    level_params: &LevelParams,
    coords: &Mat,
    local: NodeId,
    scan_set: &[ScanStrategy],
) -> Result<NodeId> {
    let scans = scan_set
        .iter()
        .map(|&s| build_scan(coords, s))
        .collect::<Result<Vec<_>>>()?;
    pssm_group_forward(g, store, &level_params.global_block, local, &scans)
}

/// Full encoder pass: embedding, all subsample levels, final projection and
/// channel-wise max pool to the latent vector.
pub fn encode(
    g: &mut Graph,
    store: &ParamStore,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    coords: &Mat,
) -> Result<EncodedHierarchy> {
    let scan_set = cfg.parsed_scan_set()?;
    let mut levels = Vec::with_capacity(cfg.levels + 1);
    levels.push(embed_input(g, store, params, cfg, coords)?);
    for i in 1..=cfg.levels {
        let sub = subsample_level(g, &levels[i - 1], cfg, i)?;
        let local = local_features(g, store, &params.levels[i - 1], &levels[i - 1], &sub)?;
        let features = global_features(
            g,
            store,
            &params.levels[i - 1],
            &sub.coords,
            local,
            &scan_set,
        )?;
        levels.push(LevelState { coords: sub.coords, pos: sub.pos, features });
    }
    let last = levels.last().expect("at least the input level");
    let projected = params.final_proj.forward(g, store, last.features)?;
    let z = g.max_pool_set(projected, last.len())?;
    Ok(EncodedHierarchy { levels, z })
}
