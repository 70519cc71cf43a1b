//! Layer building blocks on top of the autodiff graph: linear maps,
//! per-row group normalization, and the small MLP stacks the encoder and
//! heads are assembled from.
//!
//! Initialization is uniform with fan-in scaling, `U(-1/sqrt(fan_in),
//! 1/sqrt(fan_in))`, biases zero, norm scales one.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, ParamId, ParamStore};
use crate::error::Result;
use crate::mat::Mat;

pub const LEAKY_SLOPE: f64 = 0.01;
pub const NORM_EPS: f64 = 1e-5;

/// Group count for group normalization: 8, capped so every group keeps at
/// least two channels. Statistics are per row, and a single-channel group
/// normalizes to a constant, so size-1 groups would erase the feature.
pub fn default_groups(width: usize) -> usize {
    (width / 2).clamp(1, 8)
}

#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl LinearLayer {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        output: usize,
    ) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let mut w = Mat::zeros(input, output);
        for v in w.data_mut() {
            *v = rng.gen_range(-bound..bound);
        }
        let w = store.add(format!("{name}.w"), w);
        let b = store.add(format!("{name}.b"), Mat::zeros(1, output));
        LinearLayer { w, b, input, output }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct NormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub width: usize,
}

impl NormLayer {
    pub fn init(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Mat::filled(1, width, 1.0));
        let beta = store.add(format!("{name}.beta"), Mat::zeros(1, width));
        NormLayer { gamma, beta, groups: default_groups(width), width }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.group_norm(x, gamma, beta, self.groups, NORM_EPS)
    }
}

/// `linear -> group norm -> leaky ReLU` per hidden width, then a final
/// linear layer.
#[derive(Debug, Clone)]
pub struct MlpStack {
    pub hidden: Vec<(LinearLayer, NormLayer)>,
    pub out: LinearLayer,
}

impl MlpStack {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        hidden: &[usize],
        output: usize,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden.len());
        let mut width = input;
        for (i, &h) in hidden.iter().enumerate() {
            let lin = LinearLayer::init(store, rng, &format!("{name}.h{i}"), width, h);
            let norm = NormLayer::init(store, &format!("{name}.h{i}.norm"), h);
            layers.push((lin, norm));
            width = h;
        }
        let out = LinearLayer::init(store, rng, &format!("{name}.out"), width, output);
        MlpStack { hidden: layers, out }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for (lin, norm) in &self.hidden {
            h = lin.forward(g, store, h)?;
            h = norm.forward(g, store, h)?;
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        self.out.forward(g, store, h)
    }
}
