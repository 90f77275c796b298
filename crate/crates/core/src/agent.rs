//! The routing agent: a graph-convolutional vertex encoder, an optional
//! learned query projection, and a temperature softmax over candidate scores.
//!
//! Vertex encoder, per block:
//!
//! ```text
//! Z   = ELU(Â · H · W_conv)            Â = D̃^-1/2 (A ∨ Aᵀ + I) D̃^-1/2
//! R   = H + Z · W_fc + b_fc
//! out = LayerNorm(R) ⊙ gain + bias
//! ```
//!
//! three blocks, followed by `E_v = ELU(H · W1 + b1) · W2 + b2` (plus `X` when
//! the input skip is enabled). Gradients are computed by hand; [`gcn_backward`]
//! mirrors [`gcn_forward`] step for step.

use std::path::Path;

use ndarray::{Array1, Array2, Axis, Zip};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::io::{read_file, write_file, ByteReader, ByteWriter};
use crate::proxgraph::ProximityGraph;
use crate::vecstore::{dot, Dataset};

pub const AGENT_MAGIC: &[u8; 8] = b"MIPSAGT1";
pub const EMBEDDING_MAGIC: &[u8; 8] = b"MIPSEMB1";
pub const ELU_ALPHA: f64 = 1.0;
pub const LAYER_NORM_EPS: f64 = 1e-9;

#[inline]
pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        ELU_ALPHA * (x.exp() - 1.0)
    }
}

#[inline]
fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        ELU_ALPHA * x.exp()
    }
}

/// Symmetrically normalized adjacency with self-loops, stored as CSR.
/// Directed graphs are symmetrized first.
#[derive(Clone, Debug)]
pub struct NormalizedAdjacency {
    offsets: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
}

impl NormalizedAdjacency {
    pub fn from_graph(graph: &ProximityGraph) -> Self {
        let n = graph.len();
        let mut nbrs: Vec<Vec<usize>> = (0..n).map(|v| vec![v]).collect();
        for (u, list) in graph.out_edges().iter().enumerate() {
            for &v in list {
                nbrs[u].push(v);
                nbrs[v].push(u);
            }
        }
        for list in &mut nbrs {
            list.sort_unstable();
            list.dedup();
        }
        let inv_sqrt: Vec<f64> = nbrs.iter().map(|l| 1.0 / (l.len() as f64).sqrt()).collect();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        offsets.push(0);
        for (u, list) in nbrs.iter().enumerate() {
            for &v in list {
                cols.push(v);
                weights.push(inv_sqrt[u] * inv_sqrt[v]);
            }
            offsets.push(cols.len());
        }
        Self {
            offsets,
            cols,
            weights,
        }
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `Â · h`. Â is symmetric, so this also serves as `Âᵀ · h` in backprop.
    pub fn apply(&self, h: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(h.raw_dim());
        for (u, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            for idx in self.offsets[u]..self.offsets[u + 1] {
                row.scaled_add(self.weights[idx], &h.row(self.cols[idx]));
            }
        }
        out
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let n = self.len();
        let mut a = Array2::zeros((n, n));
        for u in 0..n {
            for idx in self.offsets[u]..self.offsets[u + 1] {
                a[[u, self.cols[idx]]] = self.weights[idx];
            }
        }
        a
    }
}

/// `ELU(Â · H · W)`.
pub fn graph_conv_layer(
    h: &Array2<f64>,
    adj: &NormalizedAdjacency,
    w: &Array2<f64>,
) -> Result<Array2<f64>> {
    if h.nrows() != adj.len() {
        return Err(Error::Shape(format!(
            "H has {} rows, graph {} nodes",
            h.nrows(),
            adj.len()
        )));
    }
    if h.ncols() != w.nrows() {
        return Err(Error::Shape(format!(
            "H is {}x{}, W is {}x{}",
            h.nrows(),
            h.ncols(),
            w.nrows(),
            w.ncols()
        )));
    }
    Ok(adj.apply(&h.dot(w)).mapv_into(elu))
}

/// Row-wise layer normalization without affine terms. Returns the normalized
/// rows and the per-row reciprocal standard deviations.
pub fn layer_norm(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let cols = x.ncols() as f64;
    let mut out = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in out.axis_iter_mut(Axis(0)).zip(rstd.iter_mut()) {
        let mean = row.sum() / cols;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / cols;
        *r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row *= *r;
    }
    (out, rstd)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub conv: Array2<f64>,
    pub fc_weight: Array2<f64>,
    pub fc_bias: Array1<f64>,
    pub ln_gain: Array1<f64>,
    pub ln_bias: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcnParams {
    pub blocks: Vec<ConvBlock>,
    pub ffn_w1: Array2<f64>,
    pub ffn_b1: Array1<f64>,
    pub ffn_w2: Array2<f64>,
    pub ffn_b2: Array1<f64>,
    /// Adds the input vectors to the encoder output (`E_v = X + f(X)`).
    pub input_skip: bool,
}

impl GcnParams {
    pub fn input_dim(&self) -> usize {
        self.ffn_w1.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.ffn_w1.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.ffn_w2.ncols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryTransformKind {
    Identity,
    Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub enum QueryTransform {
    Identity,
    /// `d' x d` projection.
    Linear(Array2<f64>),
}

impl QueryTransform {
    pub fn kind(&self) -> QueryTransformKind {
        match self {
            QueryTransform::Identity => QueryTransformKind::Identity,
            QueryTransform::Linear(_) => QueryTransformKind::Linear,
        }
    }
}

/// How fresh parameters are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AgentInit {
    /// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); no input skip.
    Uniform,
    /// Uniform init plus the input skip with a zeroed output layer, so the
    /// untrained encoder returns `E_v = X` exactly.
    Anchored,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub blocks: usize,
    pub temperature: f64,
    pub query: QueryTransformKind,
    pub init: AgentInit,
}

impl AgentConfig {
    /// Three blocks, `d' = d`, identity query transform.
    pub fn new(dim: usize, temperature: f64) -> Self {
        Self {
            input_dim: dim,
            hidden_dim: dim,
            output_dim: dim,
            blocks: 3,
            temperature,
            query: QueryTransformKind::Identity,
            init: AgentInit::Uniform,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("agent dimensions must be positive".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.query == QueryTransformKind::Identity && self.output_dim != self.input_dim {
            return Err(Error::Config("identity query transform requires d' = d".into()));
        }
        if self.init == AgentInit::Anchored && self.output_dim != self.input_dim {
            return Err(Error::Config("anchored init requires d' = d".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentParams {
    pub gcn: GcnParams,
    pub query: QueryTransform,
    pub temperature: f64,
}

fn uniform_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = 1.0 / (rows as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
}

impl AgentParams {
    pub fn init(config: &AgentConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.input_dim;
        let blocks = (0..config.blocks)
            .map(|_| ConvBlock {
                conv: uniform_matrix(rng, d, d),
                fc_weight: uniform_matrix(rng, d, d),
                fc_bias: Array1::zeros(d),
                ln_gain: Array1::ones(d),
                ln_bias: Array1::zeros(d),
            })
            .collect();
        let ffn_w1 = uniform_matrix(rng, d, config.hidden_dim);
        let mut ffn_w2 = uniform_matrix(rng, config.hidden_dim, config.output_dim);
        let anchored = config.init == AgentInit::Anchored;
        if anchored {
            ffn_w2.fill(0.0);
        }
        let query = match config.query {
            QueryTransformKind::Identity => QueryTransform::Identity,
            QueryTransformKind::Linear => {
                QueryTransform::Linear(
                    uniform_matrix(rng, d, config.output_dim)
                        .reversed_axes()
                        .as_standard_layout()
                        .into_owned(),
                )
            }
        };
        Ok(Self {
            gcn: GcnParams {
                blocks,
                ffn_w1,
                ffn_b1: Array1::zeros(config.hidden_dim),
                ffn_w2,
                ffn_b2: Array1::zeros(config.output_dim),
                input_skip: anchored,
            },
            query,
            temperature: config.temperature,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.gcn.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.gcn.output_dim()
    }

    /// Same structure, every tensor zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Every trainable tensor, in a fixed order, with its `(rows, cols)` shape.
    pub fn tensors(&self) -> Vec<(&[f64], (usize, usize))> {
        fn m(a: &Array2<f64>) -> (&[f64], (usize, usize)) {
            (a.as_slice().expect("standard layout"), a.dim())
        }
        fn v(a: &Array1<f64>) -> (&[f64], (usize, usize)) {
            (a.as_slice().expect("standard layout"), (1, a.len()))
        }
        let mut out = Vec::new();
        for b in &self.gcn.blocks {
            out.extend([m(&b.conv), m(&b.fc_weight), v(&b.fc_bias), v(&b.ln_gain), v(&b.ln_bias)]);
        }
        out.extend([
            m(&self.gcn.ffn_w1),
            v(&self.gcn.ffn_b1),
            m(&self.gcn.ffn_w2),
            v(&self.gcn.ffn_b2),
        ]);
        if let QueryTransform::Linear(w) = &self.query {
            out.push(m(w));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        fn m(a: &mut Array2<f64>) -> &mut [f64] {
            a.as_slice_mut().expect("standard layout")
        }
        fn v(a: &mut Array1<f64>) -> &mut [f64] {
            a.as_slice_mut().expect("standard layout")
        }
        let mut out = Vec::new();
        for b in &mut self.gcn.blocks {
            out.push(m(&mut b.conv));
            out.push(m(&mut b.fc_weight));
            out.push(v(&mut b.fc_bias));
            out.push(v(&mut b.ln_gain));
            out.push(v(&mut b.ln_bias));
        }
        out.push(m(&mut self.gcn.ffn_w1));
        out.push(v(&mut self.gcn.ffn_b1));
        out.push(m(&mut self.gcn.ffn_w2));
        out.push(v(&mut self.gcn.ffn_b2));
        if let QueryTransform::Linear(w) = &mut self.query {
            out.push(m(w));
        }
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.gcn.blocks.len() {
            for part in ["conv", "fc_weight", "fc_bias", "ln_gain", "ln_bias"] {
                out.push(format!("block{i}.{part}"));
            }
        }
        out.extend(["ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2"].map(String::from));
        if matches!(self.query, QueryTransform::Linear(_)) {
            out.push("query.w".into());
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(t, _)| t.iter().all(|v| v.is_finite()))
    }

    /// Layout: magic, `d: u32, d': u32, hidden: u32, tau: f64, blocks: u32,
    /// query kind: u8, input skip: u8`, then every tensor as `rows: u32,
    /// cols: u32` followed by f32 values, little-endian.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = ByteWriter::default();
        w.bytes(AGENT_MAGIC);
        w.u32(self.input_dim() as u32);
        w.u32(self.output_dim() as u32);
        w.u32(self.gcn.hidden_dim() as u32);
        w.f64(self.temperature);
        w.u32(self.gcn.blocks.len() as u32);
        w.u8(match self.query {
            QueryTransform::Identity => 0,
            QueryTransform::Linear(_) => 1,
        });
        w.u8(u8::from(self.gcn.input_skip));
        for (t, (rows, cols)) in self.tensors() {
            w.u32(rows as u32);
            w.u32(cols as u32);
            for &v in t {
                w.f32(v as f32);
            }
        }
        write_file(path, &w.buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let mut r = ByteReader::new(&bytes, path);
        r.magic(AGENT_MAGIC)?;
        let d = r.u32()? as usize;
        let d_out = r.u32()? as usize;
        let hidden = r.u32()? as usize;
        let temperature = r.f64()?;
        let blocks = r.u32()? as usize;
        let query = match r.u8()? {
            0 => QueryTransformKind::Identity,
            1 => QueryTransformKind::Linear,
            t => return Err(r.malformed(format!("bad query kind {t}"))),
        };
        let skip = match r.u8()? {
            0 => false,
            1 => true,
            t => return Err(r.malformed(format!("bad skip flag {t}"))),
        };
        let config = AgentConfig {
            input_dim: d,
            hidden_dim: hidden,
            output_dim: d_out,
            blocks,
            temperature,
            query,
            init: if skip { AgentInit::Anchored } else { AgentInit::Uniform },
        };
        config
            .validate()
            .map_err(|e| r.malformed(format!("bad header: {e}")))?;
        let mut params = Self::init(&config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        let shapes: Vec<(usize, usize)> = params.tensors().iter().map(|(_, s)| *s).collect();
        for (t, shape) in params.tensors_mut().into_iter().zip(shapes) {
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            if (rows, cols) != shape {
                return Err(r.malformed(format!(
                    "tensor shape {rows}x{cols}, expected {}x{}",
                    shape.0, shape.1
                )));
            }
            for v in t.iter_mut() {
                *v = f64::from(r.f32()?);
            }
        }
        r.finish()?;
        if !params.all_finite() {
            return Err(Error::NonFinite("agent checkpoint"));
        }
        Ok(params)
    }
}

/// Intermediate values of one block, kept for backprop.
#[derive(Clone, Debug)]
struct BlockCache {
    input: Array2<f64>,
    pre_activation: Array2<f64>,
    activation: Array2<f64>,
    normed: Array2<f64>,
    rstd: Array1<f64>,
}

/// Everything [`gcn_backward`] needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    blocks: Vec<BlockCache>,
    ffn_input: Array2<f64>,
    ffn_pre: Array2<f64>,
    ffn_act: Array2<f64>,
}

/// Dataset rows as an `n x d` matrix (`H^(0) = X`).
pub fn dataset_matrix(dataset: &Dataset) -> Array2<f64> {
    Array2::from_shape_vec(
        (dataset.len(), dataset.dim()),
        dataset.items().as_flat().to_vec(),
    )
    .expect("dataset is rectangular")
}

/// Runs the encoder over all vertices, returning `E_v` for every row of `x`.
pub fn gcn_forward(
    x: &Array2<f64>,
    adj: &NormalizedAdjacency,
    params: &GcnParams,
) -> Result<(Array2<f64>, ForwardCache)> {
    if x.ncols() != params.input_dim() {
        return Err(Error::Shape(format!(
            "input has {} columns, encoder expects {}",
            x.ncols(),
            params.input_dim()
        )));
    }
    let mut h = x.clone();
    let mut caches = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let pre = adj.apply(&h.dot(&block.conv));
        if pre.nrows() != h.nrows() {
            return Err(Error::Shape("adjacency does not match input rows".into()));
        }
        let act = pre.mapv(elu);
        let residual = &h + &act.dot(&block.fc_weight) + &block.fc_bias;
        let (normed, rstd) = layer_norm(&residual);
        let out = &normed * &block.ln_gain + &block.ln_bias;
        caches.push(BlockCache {
            input: std::mem::replace(&mut h, out),
            pre_activation: pre,
            activation: act,
            normed,
            rstd,
        });
    }
    let ffn_pre = h.dot(&params.ffn_w1) + &params.ffn_b1;
    let ffn_act = ffn_pre.mapv(elu);
    let mut out = ffn_act.dot(&params.ffn_w2) + &params.ffn_b2;
    if params.input_skip {
        out += x;
    }
    Ok((
        out,
        ForwardCache {
            blocks: caches,
            ffn_input: h,
            ffn_pre,
            ffn_act,
        },
    ))
}

fn col_sums(a: &Array2<f64>) -> Array1<f64> {
    a.sum_axis(Axis(0))
}

/// Backpropagates `d_out = dJ/dE_v` through the encoder, returning gradients
/// with the same structure as `params`.
pub fn gcn_backward(
    adj: &NormalizedAdjacency,
    params: &GcnParams,
    cache: &ForwardCache,
    d_out: &Array2<f64>,
) -> GcnParams {
    let mut grads = params.clone();
    grads.ffn_w2 = cache.ffn_act.t().dot(d_out);
    grads.ffn_b2 = col_sums(d_out);
    let mut d_pre = d_out.dot(&params.ffn_w2.t());
    Zip::from(&mut d_pre)
        .and(&cache.ffn_pre)
        .for_each(|g, &x| *g *= elu_grad(x));
    grads.ffn_w1 = cache.ffn_input.t().dot(&d_pre);
    grads.ffn_b1 = col_sums(&d_pre);
    let mut d_h = d_pre.dot(&params.ffn_w1.t());

    for (i, (block, bc)) in params.blocks.iter().zip(&cache.blocks).enumerate().rev() {
        let g = &mut grads.blocks[i];
        g.ln_gain = (&d_h * &bc.normed).sum_axis(Axis(0));
        g.ln_bias = col_sums(&d_h);
        let d_normed = &d_h * &block.ln_gain;
        let cols = d_normed.ncols() as f64;
        let mut d_res = Array2::zeros(d_normed.raw_dim());
        for (((mut out, dn), nr), &rstd) in d_res
            .axis_iter_mut(Axis(0))
            .zip(d_normed.axis_iter(Axis(0)))
            .zip(bc.normed.axis_iter(Axis(0)))
            .zip(&bc.rstd)
        {
            let mean_dn = dn.sum() / cols;
            let mean_dn_n = dn.dot(&nr) / cols;
            Zip::from(&mut out)
                .and(&dn)
                .and(&nr)
                .for_each(|o, &a, &b| *o = rstd * (a - mean_dn - b * mean_dn_n));
        }
        g.fc_weight = bc.activation.t().dot(&d_res);
        g.fc_bias = col_sums(&d_res);
        let mut d_act = d_res.dot(&block.fc_weight.t());
        Zip::from(&mut d_act)
            .and(&bc.pre_activation)
            .for_each(|g, &x| *g *= elu_grad(x));
        let d_hw = adj.apply(&d_act);
        g.conv = bc.input.t().dot(&d_hw);
        d_h = d_res + d_hw.dot(&block.conv.t());
    }
    grads
}

/// `E_q(q)`: the query itself, or `W_q · q`.
pub fn embed_query(q: &[f64], transform: &QueryTransform) -> Result<Vec<f64>> {
    match transform {
        QueryTransform::Identity => Ok(q.to_vec()),
        QueryTransform::Linear(w) => {
            if w.ncols() != q.len() {
                return Err(Error::LengthMismatch {
                    left: q.len(),
                    right: w.ncols(),
                });
            }
            Ok(w.rows().into_iter().map(|r| dot(r.as_slice().unwrap(), q)).collect())
        }
    }
}

/// Precomputed `E_v` rows tied to the graph they were computed on.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    rows: Array2<f64>,
    graph_checksum: u64,
}

impl EmbeddingTable {
    pub fn new(rows: Array2<f64>, graph_checksum: u64) -> Self {
        let rows = if rows.is_standard_layout() {
            rows
        } else {
            rows.as_standard_layout().into_owned()
        };
        Self {
            rows,
            graph_checksum,
        }
    }

    #[inline]
    pub fn row(&self, v: usize) -> &[f64] {
        let d = self.rows.ncols();
        &self.rows.as_slice().expect("standard layout")[v * d..(v + 1) * d]
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn graph_checksum(&self) -> u64 {
        self.graph_checksum
    }

    pub fn check_graph(&self, graph: &ProximityGraph) -> Result<()> {
        if self.graph_checksum != graph.checksum() {
            return Err(Error::StaleEmbeddings {
                table: self.graph_checksum,
                graph: graph.checksum(),
            });
        }
        if self.len() != graph.len() {
            return Err(Error::Shape(format!(
                "{} embedding rows for {} vertices",
                self.len(),
                graph.len()
            )));
        }
        Ok(())
    }

    /// Layout: magic, `graph checksum: u64, n: u64, d': u32`, then f32 rows.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = ByteWriter::default();
        w.bytes(EMBEDDING_MAGIC);
        w.u64(self.graph_checksum);
        w.u64(self.len() as u64);
        w.u32(self.dim() as u32);
        for &v in self.rows.iter() {
            w.f32(v as f32);
        }
        write_file(path, &w.buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let mut r = ByteReader::new(&bytes, path);
        r.magic(EMBEDDING_MAGIC)?;
        let checksum = r.u64()?;
        let n = r.len_u64()?;
        let d = r.u32()? as usize;
        if r.remaining() != n * d * 4 {
            return Err(r.malformed("embedding payload size mismatch"));
        }
        let data = (0..n * d)
            .map(|_| r.f32().map(f64::from))
            .collect::<Result<Vec<_>>>()?;
        let rows = Array2::from_shape_vec((n, d), data).map_err(|e| r.malformed(e.to_string()))?;
        Ok(Self::new(rows, checksum))
    }
}

/// Computes the embedding table for `graph` under `params`.
pub fn precompute_embeddings(
    dataset: &Dataset,
    graph: &ProximityGraph,
    params: &AgentParams,
) -> Result<EmbeddingTable> {
    if dataset.len() != graph.len() {
        return Err(Error::Shape(format!(
            "dataset has {} items, graph {} nodes",
            dataset.len(),
            graph.len()
        )));
    }
    let adj = NormalizedAdjacency::from_graph(graph);
    let (rows, _) = gcn_forward(&dataset_matrix(dataset), &adj, &params.gcn)?;
    Ok(EmbeddingTable::new(rows, graph.checksum()))
}

/// Softmax over `<E_v(c), E_q(q)> / tau`, computed with max subtraction.
pub fn policy_probs(
    candidates: &[usize],
    query: &[f64],
    table: &EmbeddingTable,
    temperature: f64,
) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let logits: Vec<f64> = candidates
        .iter()
        .map(|&c| dot(table.row(c), query) / temperature)
        .collect();
    Ok(softmax(&logits))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = p.iter().sum();
    for v in &mut p {
        *v /= z;
    }
    p
}

/// Draws an index from a categorical distribution.
pub fn sample_action(probs: &[f64], rng: &mut impl Rng) -> Result<usize> {
    if probs.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let sum: f64 = probs.iter().sum();
    if !sum.is_finite() || (sum - 1.0).abs() > 1e-6 || probs.iter().any(|p| *p < 0.0) {
        return Err(Error::BadProbabilities(sum));
    }
    if probs.len() == 1 {
        return Ok(0);
    }
    let dist = WeightedIndex::new(probs).map_err(|_| Error::BadProbabilities(sum))?;
    Ok(dist.sample(rng))
}

/// A query-specific view of the agent: embedded query, vertex table and
/// temperature.
#[derive(Clone, Debug)]
pub struct Policy<'a> {
    table: &'a EmbeddingTable,
    query: Vec<f64>,
    temperature: f64,
}

impl<'a> Policy<'a> {
    pub fn new(table: &'a EmbeddingTable, query: Vec<f64>, temperature: f64) -> Self {
        Self {
            table,
            query,
            temperature,
        }
    }

    pub fn table(&self) -> &'a EmbeddingTable {
        self.table
    }

    pub fn query(&self) -> &[f64] {
        &self.query
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn probs(&self, candidates: &[usize]) -> Result<Vec<f64>> {
        policy_probs(candidates, &self.query, self.table, self.temperature)
    }
}

/// Adds `weight * d log pi(chosen | candidates)` to the table and query
/// gradients and returns `log pi(chosen)`.
///
/// With `p = softmax(<E_v(c), e_q> / tau)`:
/// `d log p_a / d E_v(c) = (1[c = a] - p_c) e_q / tau` and
/// `d log p_a / d e_q = sum_c (1[c = a] - p_c) E_v(c) / tau`.
#[allow(clippy::too_many_arguments)]
pub fn accumulate_log_prob_grad(
    table: &EmbeddingTable,
    query: &[f64],
    temperature: f64,
    candidates: &[usize],
    chosen_index: usize,
    weight: f64,
    d_table: &mut Array2<f64>,
    d_query: &mut [f64],
) -> Result<f64> {
    let probs = policy_probs(candidates, query, table, temperature)?;
    let log_p = probs[chosen_index].ln();
    if weight == 0.0 {
        return Ok(log_p);
    }
    for (j, (&c, &p)) in candidates.iter().zip(&probs).enumerate() {
        let indicator = if j == chosen_index { 1.0 } else { 0.0 };
        let coef = weight * (indicator - p) / temperature;
        if coef == 0.0 {
            continue;
        }
        let mut row = d_table.row_mut(c);
        for (g, &qv) in row.iter_mut().zip(query) {
            *g += coef * qv;
        }
        for (g, &ev) in d_query.iter_mut().zip(table.row(c)) {
            *g += coef * ev;
        }
    }
    Ok(log_p)
}

/// Gradient of `dJ/dW_q` given `dJ/de_q` for a linear transform: `outer(d_eq, q)`.
pub fn query_transform_grad(d_query: &[f64], q: &[f64], grad: &mut Array2<f64>) {
    for (i, &g) in d_query.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        for (j, &qv) in q.iter().enumerate() {
            grad[[i, j]] += g * qv;
        }
    }
}
