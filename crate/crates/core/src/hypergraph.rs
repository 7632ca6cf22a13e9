//! Sparse hypergraphs and normalized hypergraph convolution.
//!
//! Incidence is stored edge-major: every hyperedge keeps its sorted vertex
//! list, and a vertex-major index is derived once at construction. The
//! convolution is the symmetric-normalized form
//!
//! ```text
//! X' = act( Dv^-1/2 H W De^-1 H^T Dv^-1/2 X Theta + b )
//! ```
//!
//! with `Dv[v] = sum_e w[e] H[v,e]` and `De[e] = sum_v H[v,e]`.

use std::collections::HashSet;

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Hypergraph {
    num_vertices: usize,
    edges: Vec<Vec<usize>>,
    weights: Vec<f64>,
    vertex_edges: Vec<Vec<usize>>,
}

impl Hypergraph {
    /// One singleton hyperedge `{v}` per vertex, unit weights.
    pub fn self_loops(num_vertices: usize) -> Self {
        let edges: Vec<Vec<usize>> = (0..num_vertices).map(|v| vec![v]).collect();
        Self::from_checked(num_vertices, edges, vec![1.0; num_vertices])
    }

    fn from_checked(num_vertices: usize, edges: Vec<Vec<usize>>, weights: Vec<f64>) -> Self {
        let mut vertex_edges = vec![Vec::new(); num_vertices];
        for (e, members) in edges.iter().enumerate() {
            for &v in members {
                vertex_edges[v].push(e);
            }
        }
        Self { num_vertices, edges, weights, vertex_edges }
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Sorted vertex lists, one per hyperedge.
    pub fn edges(&self) -> &[Vec<usize>] {
        &self.edges
    }

    pub fn edge_weights(&self) -> &[f64] {
        &self.weights
    }

    /// Hyperedges containing vertex `v`, in edge order.
    pub fn edges_of(&self, v: usize) -> &[usize] {
        &self.vertex_edges[v]
    }

    /// Dense `num_vertices x num_edges` 0/1 incidence matrix.
    pub fn incidence_dense(&self) -> Array2<f64> {
        let mut h = Array2::zeros((self.num_vertices, self.edges.len()));
        for (e, members) in self.edges.iter().enumerate() {
            for &v in members {
                h[[v, e]] = 1.0;
            }
        }
        h
    }
}

/// Builds a hypergraph from explicit vertex sets. Repeated vertices inside
/// one edge collapse to a single incidence; edges keep their input order.
pub fn incidence_from_edges(num_vertices: usize, edges: &[Vec<usize>], weights: &[f64]) -> Result<Hypergraph> {
    if edges.len() != weights.len() {
        return Err(Error::ShapeMismatch(format!("{} edges but {} weights", edges.len(), weights.len())));
    }
    let mut sets = Vec::with_capacity(edges.len());
    for (e, members) in edges.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::EmptyEdge { edge: e });
        }
        let w = weights[e];
        if w.is_nan() || w <= 0.0 || w.is_infinite() {
            return Err(Error::NonPositiveWeight { edge: e, weight: w });
        }
        let mut set = members.clone();
        if let Some(&bad) = set.iter().find(|&&v| v >= num_vertices) {
            return Err(Error::IndexOutOfRange { index: bad, len: num_vertices });
        }
        set.sort_unstable();
        set.dedup();
        sets.push(set);
    }
    Ok(Hypergraph::from_checked(num_vertices, sets, weights.to_vec()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Metric {
    #[default]
    Euclidean,
}

/// kNN hyperedges: for every vertex `v`, the edge `{v} + knn(v)` with self
/// excluded from the neighbour search and distance ties broken by the lower
/// vertex index. Identical vertex sets are kept once (first occurrence) and
/// every edge gets unit weight.
pub fn knn_hyperedges(features: ArrayView2<'_, f64>, k: usize, metric: Metric) -> Result<Hypergraph> {
    let n = features.nrows();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if k >= n {
        return Err(Error::KTooLarge { k, n });
    }
    let dist = pairwise_distances(features, metric);
    let mut seen: HashSet<Vec<usize>> = HashSet::with_capacity(n);
    let mut edges = Vec::with_capacity(n);
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for v in 0..n {
        let row = &dist[v * n..(v + 1) * n];
        order.clear();
        order.extend((0..n).filter(|&u| u != v));
        if k > 0 {
            // Stable sort on an index-ordered list keeps lower indices first among ties.
            order.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
        }
        let mut edge: Vec<usize> = order[..k].to_vec();
        edge.push(v);
        edge.sort_unstable();
        if seen.insert(edge.clone()) {
            edges.push(edge);
        }
    }
    let weights = vec![1.0; edges.len()];
    Ok(Hypergraph::from_checked(n, edges, weights))
}

fn pairwise_distances(features: ArrayView2<'_, f64>, metric: Metric) -> Vec<f64> {
    let n = features.nrows();
    let mut dist = vec![0.0; n * n];
    match metric {
        // Squared distances order identically to Euclidean ones.
        Metric::Euclidean => {
            for i in 0..n {
                let a = features.row(i);
                for j in (i + 1)..n {
                    let b = features.row(j);
                    let d: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
                    dist[i * n + j] = d;
                    dist[j * n + i] = d;
                }
            }
        }
    }
    dist
}

#[derive(Debug, Clone, PartialEq)]
pub struct DegreePair {
    pub vertex_degrees: Array1<f64>,
    pub edge_degrees: Array1<f64>,
}

pub fn degree_matrices(g: &Hypergraph) -> Result<DegreePair> {
    let mut dv = Array1::zeros(g.num_vertices);
    let mut de = Array1::zeros(g.edges.len());
    for (e, members) in g.edges.iter().enumerate() {
        de[e] = members.len() as f64;
        for &v in members {
            dv[v] += g.weights[e];
        }
    }
    if let Some(vertex) = dv.iter().position(|&d: &f64| d <= 0.0) {
        return Err(Error::IsolatedVertex { vertex });
    }
    Ok(DegreePair { vertex_degrees: dv, edge_degrees: de })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    /// `d_in x d_out`.
    pub theta: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl ConvParams {
    pub fn zeros(d_in: usize, d_out: usize, activation: Activation) -> Self {
        Self { theta: Array2::zeros((d_in, d_out)), bias: Array1::zeros(d_out), activation }
    }

    pub fn d_in(&self) -> usize {
        self.theta.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.theta.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub dx: Array2<f64>,
    pub dtheta: Array2<f64>,
    pub dbias: Array1<f64>,
}

/// The propagation operator `Dv^-1/2 H W De^-1 H^T Dv^-1/2` of one
/// hypergraph, with its normalizers precomputed. The operator is symmetric,
/// so the same routine serves the forward and backward passes.
#[derive(Debug, Clone)]
pub struct Propagator<'g> {
    graph: &'g Hypergraph,
    inv_sqrt_dv: Vec<f64>,
    edge_scale: Vec<f64>,
}

impl<'g> Propagator<'g> {
    pub fn new(graph: &'g Hypergraph) -> Result<Self> {
        let deg = degree_matrices(graph)?;
        let inv_sqrt_dv = deg.vertex_degrees.iter().map(|d| 1.0 / d.sqrt()).collect();
        let edge_scale = graph.weights.iter().zip(deg.edge_degrees.iter()).map(|(w, de)| w / de).collect();
        Ok(Self { graph, inv_sqrt_dv, edge_scale })
    }

    pub fn graph(&self) -> &Hypergraph {
        self.graph
    }

    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let n = self.graph.num_vertices;
        if x.nrows() != n {
            return Err(Error::ShapeMismatch(format!(
                "features have {} rows, hypergraph has {} vertices",
                x.nrows(),
                n
            )));
        }
        let d = x.ncols();
        let mut out = Array2::zeros((n, d));
        let mut acc = vec![0.0; d];
        for (e, members) in self.graph.edges.iter().enumerate() {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for &v in members {
                let s = self.inv_sqrt_dv[v];
                for (a, &xv) in acc.iter_mut().zip(x.row(v).iter()) {
                    *a += s * xv;
                }
            }
            let scale = self.edge_scale[e];
            for &v in members {
                let s = self.inv_sqrt_dv[v] * scale;
                for (o, &a) in out.row_mut(v).iter_mut().zip(acc.iter()) {
                    *o += s * a;
                }
            }
        }
        Ok(out)
    }
}

fn check_params(x: ArrayView2<'_, f64>, p: &ConvParams) -> Result<()> {
    if x.ncols() != p.d_in() {
        return Err(Error::ShapeMismatch(format!("features have {} columns, theta expects {}", x.ncols(), p.d_in())));
    }
    if p.bias.len() != p.d_out() {
        return Err(Error::ShapeMismatch(format!("bias has length {}, theta has {} outputs", p.bias.len(), p.d_out())));
    }
    Ok(())
}

/// Pre-activation `P X Theta + b` together with `P X`.
pub(crate) fn conv_pre(
    prop: &Propagator<'_>,
    x: ArrayView2<'_, f64>,
    p: &ConvParams,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_params(x, p)?;
    let px = prop.apply(x)?;
    let mut pre = px.dot(&p.theta);
    pre += &p.bias;
    Ok((px, pre))
}

pub(crate) fn activate(pre: &mut Array2<f64>, act: Activation) {
    if act == Activation::Relu {
        pre.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
    }
}

/// Backward pass given `P X` and the pre-activation from [`conv_pre`].
pub(crate) fn conv_backward(
    prop: &Propagator<'_>,
    px: &Array2<f64>,
    pre: &Array2<f64>,
    p: &ConvParams,
    upstream: ArrayView2<'_, f64>,
) -> Result<ConvGrads> {
    if upstream.dim() != pre.dim() {
        return Err(Error::ShapeMismatch(format!("upstream {:?} vs output {:?}", upstream.dim(), pre.dim())));
    }
    let mut dpre = upstream.to_owned();
    if p.activation == Activation::Relu {
        dpre.zip_mut_with(pre, |g, &z| {
            if z <= 0.0 {
                *g = 0.0
            }
        });
    }
    let dbias = dpre.sum_axis(Axis(0));
    let dtheta = px.t().dot(&dpre);
    let dx = prop.apply(dpre.dot(&p.theta.t()).view())?;
    Ok(ConvGrads { dx, dtheta, dbias })
}

/// One normalized hypergraph convolution layer.
pub fn hgconv(x: ArrayView2<'_, f64>, g: &Hypergraph, p: &ConvParams) -> Result<Array2<f64>> {
    let prop = Propagator::new(g)?;
    let (_, mut out) = conv_pre(&prop, x, p)?;
    activate(&mut out, p.activation);
    Ok(out)
}

/// Exact gradients of `sum(upstream * hgconv(x, g, p))`.
pub fn hgconv_grad(
    x: ArrayView2<'_, f64>,
    g: &Hypergraph,
    p: &ConvParams,
    upstream: ArrayView2<'_, f64>,
) -> Result<ConvGrads> {
    let prop = Propagator::new(g)?;
    let (px, pre) = conv_pre(&prop, x, p)?;
    conv_backward(&prop, &px, &pre, p, upstream)
}
