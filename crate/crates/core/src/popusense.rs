//! Hypergraph latent refinement.
//!
//! * Narrow: one hypergraph per sample over its `s*s` latent positions.
//! * Wide: one hypergraph over the spatially pooled latents of the batch plus
//!   the read-only memory bank of pooled normal latents. The refinement at a
//!   batch vertex is broadcast over that sample's grid.
//!
//! Both variants return `z + delta`, where `delta` comes from a stack of
//! hypergraph convolutions whose last layer is zero-initialized, so fresh
//! parameters leave `z` untouched.

use std::collections::VecDeque;

use ndarray::{s, Array1, Array2, Array4, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypergraph::{self, Activation, ConvParams, Hypergraph, Metric, Propagator};
use crate::pdc::{LatentMap, ParamBlock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Narrow,
    Wide,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Narrow => "narrow",
            Variant::Wide => "wide",
        }
    }

    pub fn default_k(self) -> usize {
        match self {
            Variant::Narrow => 8,
            Variant::Wide => 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankPolicy {
    #[default]
    Fifo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopuSenseConfig {
    pub variant: Variant,
    pub k: usize,
    pub layers: usize,
    pub bank_capacity: usize,
    pub bank_policy: BankPolicy,
}

impl PopuSenseConfig {
    pub fn new(variant: Variant) -> Self {
        Self { variant, k: variant.default_k(), layers: 2, bank_capacity: 256, bank_policy: BankPolicy::Fifo }
    }

    pub fn validate(&self, batch_size: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("popusense.k must be >= 1".into()));
        }
        if self.layers == 0 {
            return Err(Error::Config("popusense.layers must be >= 1".into()));
        }
        // The first wide step sees an empty bank: the batch alone must
        // supply k neighbours.
        if self.variant == Variant::Wide && self.k >= batch_size {
            return Err(Error::Config(format!(
                "popusense.k = {} must be < train.batch_size = {batch_size} for the wide variant",
                self.k
            )));
        }
        if self.variant == Variant::Wide && self.bank_capacity < batch_size {
            return Err(Error::Config(format!(
                "popusense.bank_capacity = {} must be >= train.batch_size = {batch_size}",
                self.bank_capacity
            )));
        }
        Ok(())
    }
}

/// FIFO store of pooled latent vectors from normal training samples.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    dim: usize,
    entries: VecDeque<Vec<f64>>,
}

impl MemoryBank {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self { capacity, dim, entries: VecDeque::with_capacity(capacity) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries oldest first.
    pub fn entries(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.entries.iter().map(|e| e.as_slice())
    }

    pub fn push(&mut self, entry: &[f64]) -> Result<()> {
        if entry.len() != self.dim {
            return Err(Error::ShapeMismatch(format!("bank entries have length {}, got {}", self.dim, entry.len())));
        }
        if self.capacity == 0 {
            return Ok(());
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry.to_vec());
        Ok(())
    }

    pub fn to_matrix(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.entries.len(), self.dim));
        for (mut row, e) in m.outer_iter_mut().zip(&self.entries) {
            row.assign(&ArrayView2::from_shape((1, self.dim), e).expect("entry length").row(0));
        }
        m
    }
}

/// Spatial mean per sample and channel, `B x C`.
pub fn pool_latent(z: &LatentMap) -> Array2<f64> {
    let (b, c, s, _) = z.data().dim();
    let area = (s * s) as f64;
    let mut out = Array2::zeros((b, c));
    for ((i, j), o) in out.indexed_iter_mut() {
        *o = z.data().slice(s![i, j, .., ..]).sum() / area;
    }
    out
}

/// Appends the batch's pooled latents, evicting the oldest beyond capacity.
pub fn bank_update(bank: &mut MemoryBank, z: &LatentMap) -> Result<()> {
    let pooled = pool_latent(z);
    for row in pooled.outer_iter() {
        bank.push(row.as_slice().expect("standard layout"))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinerParams {
    layers: Vec<ConvParams>,
}

impl RefinerParams {
    /// `layers` square `channels x channels` hypergraph convolutions: relu
    /// hidden layers with seeded fan-in uniform weights, then a linear output
    /// projection initialized to zero.
    pub fn new(channels: usize, layers: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (6.0 / channels as f64).sqrt();
        let mut stack = Vec::with_capacity(layers);
        for _ in 0..layers.saturating_sub(1) {
            let mut p = ConvParams::zeros(channels, channels, Activation::Relu);
            p.theta.iter_mut().for_each(|w| *w = rng.random_range(-bound..bound));
            stack.push(p);
        }
        stack.push(ConvParams::zeros(channels, channels, Activation::Linear));
        Self { layers: stack }
    }

    /// Builds from explicit layers; the last one must be linear.
    pub fn from_layers(layers: Vec<ConvParams>) -> Result<Self> {
        match layers.last() {
            None => Err(Error::EmptyInput),
            Some(l) if l.activation != Activation::Linear => {
                Err(Error::ShapeMismatch("the output layer must be linear".into()))
            }
            Some(_) => {
                for pair in layers.windows(2) {
                    if pair[0].d_out() != pair[1].d_in() {
                        return Err(Error::ShapeMismatch("refiner layer widths do not chain".into()));
                    }
                }
                Ok(Self { layers })
            }
        }
    }

    pub fn layers(&self) -> &[ConvParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ConvParams] {
        &mut self.layers
    }

    pub fn output_layer(&self) -> &ConvParams {
        self.layers.last().expect("non-empty stack")
    }

    pub fn zeros_like(&self) -> Self {
        Self { layers: self.layers.iter().map(|l| ConvParams::zeros(l.d_in(), l.d_out(), l.activation)).collect() }
    }

    pub fn blocks(&self) -> Vec<ParamBlock<'_>> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push(ParamBlock {
                name: format!("refiner.{i}.theta"),
                shape: l.theta.shape().to_vec(),
                data: l.theta.as_slice().expect("standard layout"),
            });
            out.push(ParamBlock {
                name: format!("refiner.{i}.bias"),
                shape: l.bias.shape().to_vec(),
                data: l.bias.as_slice().expect("standard layout"),
            });
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(l.theta.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }
}

/// Forward record of one hypergraph convolution stack.
struct StackTrace {
    graph: Hypergraph,
    px: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

fn run_stack(x: Array2<f64>, graph: Hypergraph, p: &RefinerParams) -> Result<(Array2<f64>, StackTrace)> {
    let prop = Propagator::new(&graph)?;
    let mut cur = x;
    let mut px = Vec::with_capacity(p.layers.len());
    let mut pre = Vec::with_capacity(p.layers.len());
    for layer in &p.layers {
        let (pxl, prel) = hypergraph::conv_pre(&prop, cur.view(), layer)?;
        let mut out = prel.clone();
        hypergraph::activate(&mut out, layer.activation);
        px.push(pxl);
        pre.push(prel);
        cur = out;
    }
    Ok((cur, StackTrace { graph, px, pre }))
}

impl StackTrace {
    fn backward(&self, p: &RefinerParams, upstream: Array2<f64>, grad: &mut RefinerParams) -> Result<Array2<f64>> {
        let prop = Propagator::new(&self.graph)?;
        let mut d = upstream;
        for (i, layer) in p.layers.iter().enumerate().rev() {
            let g = hypergraph::conv_backward(&prop, &self.px[i], &self.pre[i], layer, d.view())?;
            grad.layers[i].theta += &g.dtheta;
            grad.layers[i].bias += &g.dbias;
            d = g.dx;
        }
        Ok(d)
    }
}

enum Scope {
    Narrow(Vec<StackTrace>),
    Wide { batch: usize, stack: StackTrace },
}

/// Everything needed to backpropagate through one refinement call.
pub(crate) struct RefineTrace {
    scope: Scope,
    grid: usize,
}

fn check_params(z: &LatentMap, p: &RefinerParams) -> Result<()> {
    let c = z.channels();
    if p.layers[0].d_in() != c || p.output_layer().d_out() != c {
        return Err(Error::ShapeMismatch(format!(
            "refiner maps {} -> {} channels, latent has {c}",
            p.layers[0].d_in(),
            p.output_layer().d_out()
        )));
    }
    Ok(())
}

/// Latent grid of one sample as an `s*s x C` vertex-feature matrix.
fn sample_vertices(z: &Array4<f64>, b: usize) -> Array2<f64> {
    let (_, c, s, _) = z.dim();
    z.slice(s![b, .., .., ..])
        .to_owned()
        .into_shape_with_order((c, s * s))
        .expect("contiguous")
        .reversed_axes()
        .as_standard_layout()
        .into_owned()
}

fn narrow_traced(z: &LatentMap, cfg: &PopuSenseConfig, p: &RefinerParams) -> Result<(LatentMap, RefineTrace)> {
    check_params(z, p)?;
    let (b, c, s, _) = z.data().dim();
    let mut out = z.data().clone();
    let mut traces = Vec::with_capacity(b);
    for i in 0..b {
        let x = sample_vertices(z.data(), i);
        let graph = hypergraph::knn_hyperedges(x.view(), cfg.k, Metric::Euclidean)?;
        let (delta, trace) = run_stack(x, graph, p)?;
        for ch in 0..c {
            for y in 0..s {
                for xx in 0..s {
                    out[[i, ch, y, xx]] += delta[[y * s + xx, ch]];
                }
            }
        }
        traces.push(trace);
    }
    Ok((LatentMap::from_raw(out), RefineTrace { scope: Scope::Narrow(traces), grid: s }))
}

fn wide_traced(
    z: &LatentMap,
    bank: &MemoryBank,
    cfg: &PopuSenseConfig,
    p: &RefinerParams,
) -> Result<(LatentMap, RefineTrace)> {
    check_params(z, p)?;
    let (b, c, s, _) = z.data().dim();
    if bank.len() + b <= cfg.k {
        return Err(Error::BankTooSmall { bank: bank.len(), batch: b, k: cfg.k });
    }
    if !bank.is_empty() && bank.dim() != c {
        return Err(Error::ShapeMismatch(format!("bank entries have length {}, latent has {c} channels", bank.dim())));
    }
    let mut x = Array2::zeros((b + bank.len(), c));
    x.slice_mut(s![..b, ..]).assign(&pool_latent(z));
    if !bank.is_empty() {
        x.slice_mut(s![b.., ..]).assign(&bank.to_matrix());
    }
    let graph = hypergraph::knn_hyperedges(x.view(), cfg.k, Metric::Euclidean)?;
    let (delta, stack) = run_stack(x, graph, p)?;
    let mut out = z.data().clone();
    for i in 0..b {
        for ch in 0..c {
            let d = delta[[i, ch]];
            out.slice_mut(s![i, ch, .., ..]).mapv_inplace(|v| v + d);
        }
    }
    Ok((LatentMap::from_raw(out), RefineTrace { scope: Scope::Wide { batch: b, stack }, grid: s }))
}

pub(crate) fn refine_traced(
    z: &LatentMap,
    bank: &MemoryBank,
    cfg: &PopuSenseConfig,
    p: &RefinerParams,
) -> Result<(LatentMap, RefineTrace)> {
    match cfg.variant {
        Variant::Narrow => narrow_traced(z, cfg, p),
        Variant::Wide => wide_traced(z, bank, cfg, p),
    }
}

impl RefineTrace {
    /// Returns the latent gradient (residual path included) and accumulates
    /// refiner gradients into `grad`. Bank vertices receive no gradient.
    pub fn backward(&self, p: &RefinerParams, dout: &Array4<f64>, grad: &mut RefinerParams) -> Result<Array4<f64>> {
        let (b, c, s, _) = dout.dim();
        debug_assert_eq!(s, self.grid);
        let mut dz = dout.clone();
        match &self.scope {
            Scope::Narrow(traces) => {
                for (i, trace) in traces.iter().enumerate() {
                    let up = sample_vertices(dout, i);
                    let dx = trace.backward(p, up, grad)?;
                    for ch in 0..c {
                        for y in 0..s {
                            for xx in 0..s {
                                dz[[i, ch, y, xx]] += dx[[y * s + xx, ch]];
                            }
                        }
                    }
                }
            }
            Scope::Wide { batch, stack } => {
                let n = stack.graph.num_vertices();
                let mut up = Array2::zeros((n, c));
                for i in 0..*batch {
                    for ch in 0..c {
                        up[[i, ch]] = dout.slice(s![i, ch, .., ..]).sum();
                    }
                }
                let dx = stack.backward(p, up, grad)?;
                let area = (s * s) as f64;
                for i in 0..b {
                    for ch in 0..c {
                        let g = dx[[i, ch]] / area;
                        dz.slice_mut(s![i, ch, .., ..]).mapv_inplace(|v| v + g);
                    }
                }
            }
        }
        Ok(dz)
    }
}

pub fn refine_narrow(z: &LatentMap, cfg: &PopuSenseConfig, p: &RefinerParams) -> Result<LatentMap> {
    if cfg.variant != Variant::Narrow {
        return Err(Error::Config("refine_narrow called with a wide configuration".into()));
    }
    narrow_traced(z, cfg, p).map(|(out, _)| out)
}

pub fn refine_wide(z: &LatentMap, bank: &MemoryBank, cfg: &PopuSenseConfig, p: &RefinerParams) -> Result<LatentMap> {
    if cfg.variant != Variant::Wide {
        return Err(Error::Config("refine_wide called with a narrow configuration".into()));
    }
    wide_traced(z, bank, cfg, p).map(|(out, _)| out)
}

/// Dispatches on `cfg.variant`; the bank is ignored by the narrow variant.
pub fn refine(z: &LatentMap, bank: &MemoryBank, cfg: &PopuSenseConfig, p: &RefinerParams) -> Result<LatentMap> {
    refine_traced(z, bank, cfg, p).map(|(out, _)| out)
}

/// Flattened pooled vector helper used by tests and bindings.
pub fn pooled_row(z: &LatentMap, b: usize) -> Array1<f64> {
    pool_latent(z).row(b).to_owned()
}
